//! Binary message format.
//!
//! All integers are big-endian.
//!
//! ```text
//! magic  "GEA1"                       4 bytes
//! kind   0x01 PING | 0x02 PONG        1 byte
//! ping_id                             u64
//! sender length                       u16, then UTF-8 bytes
//! -- PING only --
//! evaluations                         u64
//! fitness                             u64
//! tour length                         u32, then one u32 per city
//! ```
//!
//! On stream sockets each message travels in a frame prefixed by its length
//! as a `u32`.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::blackboard::Address;

pub const MAGIC: [u8; 4] = *b"GEA1";
pub const KIND_PING: u8 = 0x01;
pub const KIND_PONG: u8 = 0x02;

/// Frames larger than this are rejected by [`read_frame`].
pub const MAX_FRAME_LEN: u32 = 16 * 1024 * 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic")]
    BadMagic,
    #[error("message truncated")]
    Truncated,
    #[error("unknown message kind {0:#04x}")]
    UnknownKind(u8),
    #[error("sender address is not valid UTF-8")]
    InvalidAddress,
    #[error("sender address longer than 65535 bytes")]
    AddressTooLong,
    #[error("tour of {0} cities does not fit the length field")]
    TourTooLarge(usize),
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ping {
    pub ping_id: u64,
    pub sender: Address,
    pub evaluations: u64,
    pub fitness: u64,
    pub tour: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pong {
    pub ping_id: u64,
    pub sender: Address,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    Ping(Ping),
    Pong(Pong),
}

impl Message {
    pub fn ping_id(&self) -> u64 {
        match self {
            Message::Ping(p) => p.ping_id,
            Message::Pong(p) => p.ping_id,
        }
    }

    pub fn sender(&self) -> &Address {
        match self {
            Message::Ping(p) => &p.sender,
            Message::Pong(p) => &p.sender,
        }
    }
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>, WireError> {
    let sender = msg.sender().as_str().as_bytes();
    let sender_len = u16::try_from(sender.len()).map_err(|_| WireError::AddressTooLong)?;
    let mut out = Vec::with_capacity(15 + sender.len());
    out.extend_from_slice(&MAGIC);
    match msg {
        Message::Ping(_) => out.push(KIND_PING),
        Message::Pong(_) => out.push(KIND_PONG),
    }
    out.extend_from_slice(&msg.ping_id().to_be_bytes());
    out.extend_from_slice(&sender_len.to_be_bytes());
    out.extend_from_slice(sender);
    if let Message::Ping(p) = msg {
        let n = u32::try_from(p.tour.len()).map_err(|_| WireError::TourTooLarge(p.tour.len()))?;
        out.reserve(20 + 4 * p.tour.len());
        out.extend_from_slice(&p.evaluations.to_be_bytes());
        out.extend_from_slice(&p.fitness.to_be_bytes());
        out.extend_from_slice(&n.to_be_bytes());
        for c in &p.tour {
            out.extend_from_slice(&c.to_be_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_message(bytes: &[u8]) -> Result<Message, WireError> {
    let mut r = Reader { buf: bytes };
    let magic = r.take(4).map_err(|_| {
        if MAGIC.starts_with(bytes) {
            WireError::Truncated
        } else {
            WireError::BadMagic
        }
    })?;
    if magic != MAGIC {
        return Err(WireError::BadMagic);
    }
    let kind = r.u8()?;
    if kind != KIND_PING && kind != KIND_PONG {
        return Err(WireError::UnknownKind(kind));
    }
    let ping_id = r.u64()?;
    let len = r.u16()? as usize;
    let sender = std::str::from_utf8(r.take(len)?).map_err(|_| WireError::InvalidAddress)?;
    let sender = Address::new(sender);

    let msg = if kind == KIND_PONG {
        Message::Pong(Pong { ping_id, sender })
    } else {
        let evaluations = r.u64()?;
        let fitness = r.u64()?;
        let n = r.u32()? as usize;
        // Check the payload is present before allocating for it.
        if r.buf.len() / 4 < n {
            return Err(WireError::Truncated);
        }
        let tour = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        Message::Ping(Ping {
            ping_id,
            sender,
            evaluations,
            fitness,
            tour,
        })
    };
    if !r.buf.is_empty() {
        return Err(WireError::TrailingBytes(r.buf.len()));
    }
    Ok(msg)
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    let len =
        u32::try_from(payload.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    let mut buf = Vec::with_capacity(4 + payload.len());
    buf.extend_from_slice(&len.to_be_bytes());
    buf.extend_from_slice(payload);
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one length-prefixed frame. Returns `Ok(None)` on a clean EOF at a
/// frame boundary.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes"),
        ));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(Some(payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pong(id: u64, sender: &str) -> Message {
        Message::Pong(Pong {
            ping_id: id,
            sender: sender.into(),
        })
    }

    fn ping(tour: Vec<u32>) -> Message {
        Message::Ping(Ping {
            ping_id: 9,
            sender: "n".into(),
            evaluations: 5,
            fitness: 77,
            tour,
        })
    }

    #[test]
    fn pong_size() {
        // magic 4 + kind 1 + id 8 + len 2 + "a" 1
        assert_eq!(encode_message(&pong(1, "a")).unwrap().len(), 16);
    }

    #[test]
    fn ping_payload_size() {
        // evaluations 8 + fitness 8 + length 4 + 3 cities × 4
        let ping_len = encode_message(&ping(vec![0, 1, 2])).unwrap().len();
        let prefix = encode_message(&pong(9, "n")).unwrap().len();
        assert_eq!(ping_len - prefix, 32);
    }

    #[test]
    fn decode_errors() {
        let mut bytes = encode_message(&ping(vec![2, 0, 1])).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode_message(&bad), Err(WireError::BadMagic));
        bad = bytes.clone();
        bad[4] = 0x07;
        assert_eq!(decode_message(&bad), Err(WireError::UnknownKind(7)));
        bytes.pop();
        assert_eq!(decode_message(&bytes), Err(WireError::Truncated));
        assert_eq!(decode_message(b"GE"), Err(WireError::Truncated));
        assert_eq!(decode_message(b""), Err(WireError::Truncated));
        let mut long = encode_message(&pong(1, "a")).unwrap();
        long.push(0);
        assert_eq!(decode_message(&long), Err(WireError::TrailingBytes(1)));
    }

    #[test]
    fn huge_declared_tour_does_not_allocate() {
        let mut bytes = encode_message(&ping(vec![])).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&u32::MAX.to_be_bytes());
        assert_eq!(decode_message(&bytes), Err(WireError::Truncated));
    }

    #[test]
    fn frames_split_back_apart() {
        let a = encode_message(&ping(vec![0, 1, 2, 3])).unwrap();
        let b = encode_message(&pong(4, "peer")).unwrap();
        let mut stream = Vec::new();
        write_frame(&mut stream, &a).unwrap();
        write_frame(&mut stream, &b).unwrap();
        let mut cur = io::Cursor::new(stream);
        assert_eq!(read_frame(&mut cur).unwrap().unwrap(), a);
        assert_eq!(read_frame(&mut cur).unwrap().unwrap(), b);
        assert_eq!(read_frame(&mut cur).unwrap(), None);
    }

    #[test]
    fn oversized_frame_rejected() {
        let mut cur = io::Cursor::new((MAX_FRAME_LEN + 1).to_be_bytes().to_vec());
        assert!(read_frame(&mut cur).is_err());
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        let sender = "[a-z0-9:.\\-]{0,24}";
        prop_oneof![
            (any::<u64>(), sender).prop_map(|(id, s)| pong(id, &s)),
            (
                any::<u64>(),
                sender,
                any::<u64>(),
                any::<u64>(),
                proptest::collection::vec(any::<u32>(), 0..400)
            )
                .prop_map(|(ping_id, s, evaluations, fitness, tour)| Message::Ping(Ping {
                    ping_id,
                    sender: s.as_str().into(),
                    evaluations,
                    fitness,
                    tour,
                })),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(msg in arb_message()) {
            let bytes = encode_message(&msg).unwrap();
            prop_assert_eq!(decode_message(&bytes).unwrap(), msg);
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
            let _ = decode_message(&bytes);
        }
    }
}
