//! Simulated network.
//!
//! [`SimNetwork`] decides when (and whether) a message arrives: the delay is
//! `latency + size / bandwidth + jitter`, never less than [`MIN_DELAY`], and
//! deliveries on one ordered pair never overtake each other. All randomness
//! comes from one seeded stream, so a given send sequence always produces
//! the same schedule.
//!
//! [`SimHub`] runs that model in real time: each attached node gets its own
//! delivery thread which sleeps until the next message is due.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{encode_message, Inbox, Message, Transport, TransportError};
use crate::blackboard::Address;
use crate::clock::{Clock, SystemClock};
use crate::operators::RngStream;

/// Smallest delivery delay; a zero-cost link still takes one quantum.
pub const MIN_DELAY: Duration = Duration::from_micros(1);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkModel {
    /// One-way base delay.
    #[serde(with = "duration_ms")]
    pub latency: Duration,
    /// Bytes per second; `f64::INFINITY` makes size irrelevant.
    pub bandwidth: f64,
    /// Half-width of the uniform additive noise.
    #[serde(with = "duration_ms")]
    pub jitter: Duration,
    pub loss_probability: f64,
}

impl Default for LinkModel {
    /// Roughly a switched gigabit LAN.
    fn default() -> Self {
        Self {
            latency: Duration::from_micros(100),
            bandwidth: 125_000_000.0,
            jitter: Duration::ZERO,
            loss_probability: 0.0,
        }
    }
}

impl LinkModel {
    pub fn new(latency: Duration, bandwidth: f64) -> Self {
        Self {
            latency,
            bandwidth,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        if self.bandwidth.is_nan() || self.bandwidth <= 0.0 {
            return Err(TransportError::InvalidLink(format!(
                "bandwidth {} must be positive",
                self.bandwidth
            )));
        }
        if !(0.0..1.0).contains(&self.loss_probability) {
            return Err(TransportError::InvalidLink(format!(
                "loss probability {} outside [0, 1)",
                self.loss_probability
            )));
        }
        Ok(())
    }

    /// Delay before jitter.
    pub fn base_delay(&self, size: usize) -> Duration {
        let transfer_ns = (size as f64 * 1e9 / self.bandwidth).round();
        self.latency + Duration::from_nanos(transfer_ns as u64)
    }
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1e3)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        if !(ms >= 0.0 && ms.is_finite()) {
            return Err(serde::de::Error::custom(format!("invalid duration {ms} ms")));
        }
        Ok(Duration::from_secs_f64(ms / 1e3))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScheduledDelivery {
    pub at: Duration,
    /// Global send sequence number; breaks ties between equal `at`.
    pub seq: u64,
    pub from: Address,
    pub to: Address,
    pub bytes: Vec<u8>,
}

#[derive(Debug)]
pub struct SimNetwork {
    default_link: LinkModel,
    links: HashMap<(Address, Address), LinkModel>,
    nodes: BTreeSet<Address>,
    last_delivery: HashMap<(Address, Address), Duration>,
    rng: RngStream,
    seq: u64,
    dropped: u64,
}

impl SimNetwork {
    pub fn new(default_link: LinkModel, seed: u64) -> Result<Self, TransportError> {
        default_link.validate()?;
        Ok(Self {
            default_link,
            links: HashMap::new(),
            nodes: BTreeSet::new(),
            last_delivery: HashMap::new(),
            rng: RngStream::new(seed, u64::MAX),
            seq: 0,
            dropped: 0,
        })
    }

    pub fn add_node(&mut self, address: Address) {
        self.nodes.insert(address);
    }

    pub fn contains(&self, address: &Address) -> bool {
        self.nodes.contains(address)
    }

    pub fn set_link(&mut self, from: Address, to: Address, link: LinkModel) -> Result<(), TransportError> {
        link.validate()?;
        self.links.insert((from, to), link);
        Ok(())
    }

    /// Changes the link model used for every pair without an explicit link.
    pub fn set_default_link(&mut self, link: LinkModel) -> Result<(), TransportError> {
        link.validate()?;
        self.default_link = link;
        Ok(())
    }

    pub fn link(&self, from: &Address, to: &Address) -> &LinkModel {
        self.links
            .get(&(from.clone(), to.clone()))
            .unwrap_or(&self.default_link)
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Decides the fate of one message sent at `now`. `Ok(None)` means the
    /// message was lost.
    pub fn simulated_send(
        &mut self,
        from: &Address,
        to: &Address,
        bytes: Vec<u8>,
        now: Duration,
    ) -> Result<Option<ScheduledDelivery>, TransportError> {
        for a in [from, to] {
            if !self.nodes.contains(a) {
                return Err(TransportError::UnknownAddress(a.clone()));
            }
        }
        let link = *self.link(from, to);
        if link.loss_probability > 0.0 && self.rng.gen_bool(link.loss_probability) {
            self.dropped += 1;
            return Ok(None);
        }
        let mut delay_ns = link.base_delay(bytes.len()).as_nanos() as i128;
        if !link.jitter.is_zero() {
            let j = link.jitter.as_nanos() as i64;
            delay_ns += self.rng.gen_range(-j..=j) as i128;
        }
        let delay = Duration::from_nanos(delay_ns.max(0) as u64).max(MIN_DELAY);
        let key = (from.clone(), to.clone());
        let mut at = now + delay;
        if let Some(&prev) = self.last_delivery.get(&key) {
            at = at.max(prev);
        }
        self.last_delivery.insert(key, at);
        self.seq += 1;
        Ok(Some(ScheduledDelivery {
            at,
            seq: self.seq,
            from: from.clone(),
            to: to.clone(),
            bytes,
        }))
    }
}

/// Real-time driver for a [`SimNetwork`] shared by nodes in one process.
#[derive(Clone)]
pub struct SimHub {
    inner: Arc<HubInner>,
}

struct HubInner {
    net: Mutex<SimNetwork>,
    mailboxes: RwLock<HashMap<Address, Arc<Mailbox>>>,
    clock: SystemClock,
}

#[derive(Default)]
struct Mailbox {
    queue: Mutex<BinaryHeap<Reverse<Queued>>>,
    wake: Condvar,
    closed: AtomicBool,
}

struct Queued(ScheduledDelivery);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.0.at, self.0.seq) == (other.0.at, other.0.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.0.at, self.0.seq).cmp(&(other.0.at, other.0.seq))
    }
}

impl SimHub {
    pub fn new(default_link: LinkModel, seed: u64) -> Result<Self, TransportError> {
        Ok(Self {
            inner: Arc::new(HubInner {
                net: Mutex::new(SimNetwork::new(default_link, seed)?),
                mailboxes: RwLock::new(HashMap::new()),
                clock: SystemClock::new(),
            }),
        })
    }

    pub fn clock(&self) -> SystemClock {
        self.inner.clock
    }

    /// Declares an address so that messages to it are accepted before the
    /// node is attached (and dropped while it is not).
    pub fn add_node(&self, address: Address) {
        self.inner.net.lock().unwrap().add_node(address);
    }

    pub fn set_default_link(&self, link: LinkModel) -> Result<(), TransportError> {
        self.inner.net.lock().unwrap().set_default_link(link)
    }

    pub fn set_link(&self, from: Address, to: Address, link: LinkModel) -> Result<(), TransportError> {
        self.inner.net.lock().unwrap().set_link(from, to, link)
    }

    pub fn dropped(&self) -> u64 {
        self.inner.net.lock().unwrap().dropped()
    }

    /// Connects a node and starts its delivery thread.
    pub fn attach(&self, address: Address, inbox: Arc<dyn Inbox>) -> Result<SimEndpoint, TransportError> {
        self.add_node(address.clone());
        let mailbox = Arc::new(Mailbox::default());
        {
            let mut boxes = self.inner.mailboxes.write().unwrap();
            if boxes.contains_key(&address) {
                return Err(TransportError::AddressInUse(address));
            }
            boxes.insert(address.clone(), mailbox.clone());
        }
        let hub = self.clone();
        let mb = mailbox.clone();
        let addr = address.clone();
        let worker = thread::Builder::new()
            .name(format!("deliver-{address}"))
            .spawn(move || hub.delivery_loop(&addr, &mb, inbox))
            .expect("spawn delivery thread");
        Ok(SimEndpoint {
            hub: self.clone(),
            address,
            mailbox,
            worker: Some(worker),
        })
    }

    fn send_from(&self, from: &Address, to: &Address, msg: &Message) -> Result<(), TransportError> {
        let bytes = encode_message(msg)?;
        let now = self.inner.clock.now();
        let scheduled = self.inner.net.lock().unwrap().simulated_send(from, to, bytes, now)?;
        let Some(delivery) = scheduled else {
            return Ok(());
        };
        let boxes = self.inner.mailboxes.read().unwrap();
        if let Some(mb) = boxes.get(to) {
            mb.queue.lock().unwrap().push(Reverse(Queued(delivery)));
            mb.wake.notify_one();
        }
        Ok(())
    }

    fn delivery_loop(&self, me: &Address, mailbox: &Mailbox, inbox: Arc<dyn Inbox>) {
        loop {
            let due = {
                let mut q = mailbox.queue.lock().unwrap();
                loop {
                    if mailbox.closed.load(Ordering::Acquire) {
                        return;
                    }
                    let now = self.inner.clock.now();
                    match q.peek() {
                        Some(Reverse(Queued(d))) if d.at <= now => break q.pop().unwrap().0 .0,
                        Some(Reverse(Queued(d))) => {
                            let wait = d.at - now;
                            q = mailbox.wake.wait_timeout(q, wait).unwrap().0;
                        }
                        None => q = mailbox.wake.wait(q).unwrap(),
                    }
                }
            };
            if let Some((to, reply)) = inbox.deliver(&due.bytes) {
                if let Err(e) = self.send_from(me, &to, &reply) {
                    log::debug!("{me}: reply to {to} failed: {e}");
                }
            }
        }
    }
}

/// One node's attachment to a [`SimHub`]. Dropping it detaches the node.
pub struct SimEndpoint {
    hub: SimHub,
    address: Address,
    mailbox: Arc<Mailbox>,
    worker: Option<JoinHandle<()>>,
}

impl SimEndpoint {
    pub fn clock(&self) -> SystemClock {
        self.hub.clock()
    }
}

impl Transport for SimEndpoint {
    fn local_address(&self) -> &Address {
        &self.address
    }

    fn send(&self, to: &Address, msg: &Message) -> Result<(), TransportError> {
        self.hub.send_from(&self.address, to, msg)
    }
}

impl Drop for SimEndpoint {
    fn drop(&mut self) {
        self.hub.inner.mailboxes.write().unwrap().remove(&self.address);
        {
            let _q = self.mailbox.queue.lock().unwrap();
            self.mailbox.closed.store(true, Ordering::Release);
        }
        self.mailbox.wake.notify_all();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

static NEXT_HUB_SEED: AtomicU64 = AtomicU64::new(0);

impl Default for SimHub {
    fn default() -> Self {
        Self::new(LinkModel::default(), NEXT_HUB_SEED.fetch_add(1, Ordering::Relaxed)).expect("default link is valid")
    }
}
