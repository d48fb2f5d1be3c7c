//! TCP backend: one listener per node, one cached outgoing connection per
//! peer, every message wrapped in a `u32` length-prefixed frame.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::wire::{read_frame, write_frame};
use super::{encode_message, Inbox, Message, Transport, TransportError};
use crate::blackboard::Address;

pub const CONNECT_TIMEOUT: Duration = Duration::from_secs(1);

struct Shared {
    local: Address,
    conns: Mutex<HashMap<Address, BufWriter<TcpStream>>>,
    accepted: Mutex<Vec<TcpStream>>,
    closing: AtomicBool,
}

impl Shared {
    fn send(&self, to: &Address, msg: &Message) -> Result<(), TransportError> {
        let bytes = encode_message(msg)?;
        let mut conns = self.conns.lock().unwrap();
        // A cached connection may have gone stale; retry once on a fresh one.
        for attempt in 0..2 {
            if !conns.contains_key(to) {
                let stream = connect(to)?;
                conns.insert(to.clone(), BufWriter::new(stream));
            }
            let w = conns.get_mut(to).expect("just inserted");
            match write_frame(w, &bytes) {
                Ok(()) => return Ok(()),
                Err(e) => {
                    conns.remove(to);
                    if attempt == 1 {
                        return Err(TransportError::WriteFailed(to.clone(), e));
                    }
                }
            }
        }
        unreachable!()
    }
}

fn connect(to: &Address) -> Result<TcpStream, TransportError> {
    let addrs: Vec<SocketAddr> = to
        .as_str()
        .to_socket_addrs()
        .map_err(|e| TransportError::ConnectFailed(to.clone(), e))?
        .collect();
    let mut last = None;
    for a in addrs {
        match TcpStream::connect_timeout(&a, CONNECT_TIMEOUT) {
            Ok(s) => {
                let _ = s.set_nodelay(true);
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(TransportError::ConnectFailed(
        to.clone(),
        last.unwrap_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "no address resolved")),
    ))
}

pub struct SocketTransport {
    shared: Arc<Shared>,
    listen_addr: SocketAddr,
    acceptor: Option<JoinHandle<()>>,
}

impl SocketTransport {
    /// Binds `listen` (e.g. `127.0.0.1:7000`) and starts accepting frames.
    pub fn bind(listen: &str, inbox: Arc<dyn Inbox>) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(listen).map_err(|e| TransportError::BindFailed(listen.to_string(), e))?;
        Self::from_listener(listener, inbox)
    }

    /// Uses an already bound listener; the node's address becomes the
    /// listener's local address.
    pub fn from_listener(listener: TcpListener, inbox: Arc<dyn Inbox>) -> Result<Self, TransportError> {
        let listen_addr = listener
            .local_addr()
            .map_err(|e| TransportError::BindFailed("<listener>".into(), e))?;
        let shared = Arc::new(Shared {
            local: Address::new(listen_addr.to_string()),
            conns: Mutex::new(HashMap::new()),
            accepted: Mutex::new(Vec::new()),
            closing: AtomicBool::new(false),
        });
        let sh = shared.clone();
        let acceptor = thread::Builder::new()
            .name(format!("accept-{listen_addr}"))
            .spawn(move || accept_loop(listener, sh, inbox))
            .expect("spawn acceptor");
        Ok(Self {
            shared,
            listen_addr,
            acceptor: Some(acceptor),
        })
    }

    pub fn listen_addr(&self) -> SocketAddr {
        self.listen_addr
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, inbox: Arc<dyn Inbox>) {
    for stream in listener.incoming() {
        if shared.closing.load(Ordering::Acquire) {
            break;
        }
        let Ok(stream) = stream else { continue };
        if let Ok(clone) = stream.try_clone() {
            shared.accepted.lock().unwrap().push(clone);
        }
        let sh = shared.clone();
        let inbox = inbox.clone();
        let _ = thread::Builder::new()
            .name(format!("conn-{}", shared.local))
            .spawn(move || read_loop(stream, sh, inbox));
    }
}

fn read_loop(stream: TcpStream, shared: Arc<Shared>, inbox: Arc<dyn Inbox>) {
    let mut reader = BufReader::new(stream);
    loop {
        match read_frame(&mut reader) {
            Ok(Some(frame)) => {
                if let Some((to, reply)) = inbox.deliver(&frame) {
                    if let Err(e) = shared.send(&to, &reply) {
                        log::debug!("{}: reply to {to} failed: {e}", shared.local);
                    }
                }
            }
            Ok(None) => break,
            Err(e) => {
                if !shared.closing.load(Ordering::Acquire) {
                    log::debug!("{}: dropping connection: {e}", shared.local);
                }
                break;
            }
        }
    }
}

impl Transport for SocketTransport {
    fn local_address(&self) -> &Address {
        &self.shared.local
    }

    fn send(&self, to: &Address, msg: &Message) -> Result<(), TransportError> {
        self.shared.send(to, msg)
    }
}

impl Drop for SocketTransport {
    fn drop(&mut self) {
        self.shared.closing.store(true, Ordering::Release);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.listen_addr, CONNECT_TIMEOUT);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        for s in self.shared.accepted.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        self.shared.conns.lock().unwrap().clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{Ping, Pong};
    use std::sync::mpsc;

    struct Collect(Mutex<mpsc::Sender<Message>>);

    impl Inbox for Collect {
        fn deliver(&self, bytes: &[u8]) -> Option<(Address, Message)> {
            let msg = crate::transport::decode_message(bytes).ok()?;
            self.0.lock().unwrap().send(msg).unwrap();
            None
        }
    }

    fn ping() -> Message {
        Message::Ping(Ping {
            ping_id: 42,
            sender: "127.0.0.1:1".into(),
            evaluations: 1000,
            fitness: 123,
            tour: vec![2, 0, 1],
        })
    }

    #[test]
    fn loopback_round_trip() {
        let (tx, rx) = mpsc::channel();
        let server = SocketTransport::bind("127.0.0.1:0", Arc::new(Collect(Mutex::new(tx)))).unwrap();
        let client = SocketTransport::bind("127.0.0.1:0", Arc::new(Collect(Mutex::new(mpsc::channel().0)))).unwrap();
        let to = server.local_address().clone();
        client.send(&to, &ping()).unwrap();
        let pong = Message::Pong(Pong {
            ping_id: 7,
            sender: "x".into(),
        });
        client.send(&to, &pong).unwrap();
        assert_eq!(rx.recv_timeout(Duration::from_secs(5)).unwrap(), ping());
        assert_eq!(rx.recv_timeout(Duration::from_secs(5)).unwrap(), pong);
    }

    #[test]
    fn closed_port_fails_to_connect() {
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let client = SocketTransport::bind("127.0.0.1:0", Arc::new(Collect(Mutex::new(mpsc::channel().0)))).unwrap();
        let err = client
            .send(&Address::new(format!("127.0.0.1:{port}")), &ping())
            .unwrap_err();
        assert!(matches!(err, TransportError::ConnectFailed(..)));
    }
}
