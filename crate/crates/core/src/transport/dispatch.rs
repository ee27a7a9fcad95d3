//! Asynchronous replicate delivery shared by both backends: a pending queue
//! drained by delivery workers, retries with backoff, and a separate
//! callback executor.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering::SeqCst};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam::channel::{self, Receiver, Sender};
use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::message::code;
use super::{Callback, Message, TransportError, REPLICATE_ATTEMPTS};
use crate::node::ServerId;

/// Delivery behaviour for asynchronous messages (and request latency on the
/// loopback backend).
#[derive(Clone, Debug)]
pub struct DeliveryPolicy {
    pub min_delay: Duration,
    pub max_delay: Duration,
    /// Deliver pending messages in seeded random order instead of FIFO.
    pub reorder: bool,
    pub seed: u64,
    /// Delivery worker threads.
    pub workers: usize,
}

impl Default for DeliveryPolicy {
    fn default() -> Self {
        DeliveryPolicy { min_delay: Duration::ZERO, max_delay: Duration::ZERO, reorder: false, seed: 0, workers: 2 }
    }
}

impl DeliveryPolicy {
    pub(crate) fn sample_delay(&self, rng: &mut ChaCha8Rng) -> Duration {
        if self.max_delay <= self.min_delay {
            return self.min_delay;
        }
        let lo = self.min_delay.as_nanos() as u64;
        let hi = self.max_delay.as_nanos() as u64;
        Duration::from_nanos(rng.random_range(lo..=hi))
    }
}

pub(crate) type DeliverFn = dyn Fn(ServerId, Message) -> Result<Message, TransportError> + Send + Sync;

struct Job {
    seq: u64,
    dest: ServerId,
    msg: Message,
    done: Callback,
    attempts: u32,
    not_before: Instant,
}

struct State {
    jobs: Vec<Job>,
    rng: ChaCha8Rng,
    held: HashSet<ServerId>,
    duplicates: u32,
    shutdown: bool,
    next_seq: u64,
    log: Vec<(u64, ServerId)>,
}

struct Inner {
    state: Mutex<State>,
    cv: Condvar,
    deliver: Box<DeliverFn>,
    policy: DeliveryPolicy,
    /// `None` wakes the callback thread to notice shutdown.
    callbacks: Sender<Option<Box<dyn FnOnce() + Send>>>,
    in_flight: AtomicUsize,
    delivered: AtomicU64,
    callbacks_fired: AtomicU64,
}

/// Counters exported by a dispatcher.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DispatchStats {
    pub delivered: u64,
    pub callbacks_fired: u64,
    pub in_flight: usize,
}

pub(crate) struct Dispatcher {
    inner: Arc<Inner>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Dispatcher {
    pub(crate) fn new(policy: DeliveryPolicy, deliver: Box<DeliverFn>) -> Dispatcher {
        let (tx, rx) = channel::unbounded();
        let inner = Arc::new(Inner {
            state: Mutex::new(State {
                jobs: Vec::new(),
                rng: ChaCha8Rng::seed_from_u64(policy.seed),
                held: HashSet::new(),
                duplicates: 0,
                shutdown: false,
                next_seq: 0,
                log: Vec::new(),
            }),
            cv: Condvar::new(),
            deliver,
            policy: policy.clone(),
            callbacks: tx,
            in_flight: AtomicUsize::new(0),
            delivered: AtomicU64::new(0),
            callbacks_fired: AtomicU64::new(0),
        });
        let mut threads = Vec::new();
        for i in 0..policy.workers.max(1) {
            let inner = Arc::clone(&inner);
            threads.push(
                thread::Builder::new()
                    .name(format!("deliver-{i}"))
                    .spawn(move || worker(&inner))
                    .expect("spawn delivery worker"),
            );
        }
        let cb_inner = Arc::clone(&inner);
        threads.push(
            thread::Builder::new()
                .name("callbacks".into())
                .spawn(move || callback_loop(&cb_inner, rx))
                .expect("spawn callback executor"),
        );
        Dispatcher { inner, threads: Mutex::new(threads) }
    }

    pub(crate) fn submit(&self, dest: ServerId, msg: Message, done: Callback) {
        self.inner.in_flight.fetch_add(1, SeqCst);
        let mut st = self.inner.state.lock();
        let seq = st.next_seq;
        st.next_seq += 1;
        st.jobs.push(Job { seq, dest, msg, done, attempts: 0, not_before: Instant::now() });
        drop(st);
        self.inner.cv.notify_one();
    }

    /// Stops delivering to `dest` until [`Dispatcher::release`].
    pub(crate) fn hold(&self, dest: ServerId) {
        self.inner.state.lock().held.insert(dest);
    }

    pub(crate) fn release(&self, dest: ServerId) {
        self.inner.state.lock().held.remove(&dest);
        self.inner.cv.notify_all();
    }

    /// Delivers each of the next `n` messages twice (callbacks still fire once).
    pub(crate) fn duplicate_next(&self, n: u32) {
        self.inner.state.lock().duplicates += n;
    }

    /// Sequence numbers in delivery order, with their destinations.
    pub(crate) fn delivery_log(&self) -> Vec<(u64, ServerId)> {
        self.inner.state.lock().log.clone()
    }

    pub(crate) fn stats(&self) -> DispatchStats {
        DispatchStats {
            delivered: self.inner.delivered.load(SeqCst),
            callbacks_fired: self.inner.callbacks_fired.load(SeqCst),
            in_flight: self.inner.in_flight.load(SeqCst),
        }
    }

    /// Waits until every submitted message has had its callback run.
    pub(crate) fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while self.inner.in_flight.load(SeqCst) != 0 {
            if Instant::now() > deadline {
                return false;
            }
            thread::sleep(Duration::from_micros(200));
        }
        true
    }

    /// Stops the workers; undelivered messages are dropped.
    pub(crate) fn shutdown(&self) {
        self.inner.state.lock().shutdown = true;
        self.inner.cv.notify_all();
        let _ = self.inner.callbacks.send(None);
        let threads: Vec<_> = self.threads.lock().drain(..).collect();
        let me = thread::current().id();
        for t in threads {
            if t.thread().id() != me {
                let _ = t.join();
            }
        }
    }
}

impl Drop for Dispatcher {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn worker(inner: &Inner) {
    loop {
        let (job, delay, dup) = {
            let mut st = inner.state.lock();
            loop {
                if st.shutdown {
                    return;
                }
                let now = Instant::now();
                let ready: Vec<usize> = st
                    .jobs
                    .iter()
                    .enumerate()
                    .filter(|(_, j)| !st.held.contains(&j.dest) && j.not_before <= now)
                    .map(|(i, _)| i)
                    .collect();
                if !ready.is_empty() {
                    let pick = if inner.policy.reorder {
                        ready[st.rng.random_range(0..ready.len())]
                    } else {
                        *ready.iter().min_by_key(|&&i| st.jobs[i].seq).unwrap()
                    };
                    let job = st.jobs.swap_remove(pick);
                    let delay = inner.policy.sample_delay(&mut st.rng);
                    let dup = st.duplicates > 0;
                    if dup {
                        st.duplicates -= 1;
                    }
                    st.log.push((job.seq, job.dest));
                    break (job, delay, dup);
                }
                let wait = st
                    .jobs
                    .iter()
                    .filter(|j| !st.held.contains(&j.dest))
                    .map(|j| j.not_before.saturating_duration_since(now))
                    .min()
                    .unwrap_or(Duration::from_millis(5))
                    .clamp(Duration::from_micros(50), Duration::from_millis(5));
                inner.cv.wait_for(&mut st, wait);
            }
        };
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        let result = (inner.deliver)(job.dest, job.msg);
        if dup {
            let _ = (inner.deliver)(job.dest, job.msg);
        }
        inner.delivered.fetch_add(1, SeqCst);
        let retry = |mut job: Job, after: Duration| {
            job.not_before = Instant::now() + after;
            inner.state.lock().jobs.push(job);
            inner.cv.notify_one();
        };
        match result {
            Ok(Message::Ack { ok: false, value: code::NOT_READY }) => retry(job, Duration::from_micros(100)),
            Ok(resp) => fire(inner, job.done, Ok(resp)),
            Err(e) => {
                let attempts = job.attempts + 1;
                if attempts >= REPLICATE_ATTEMPTS {
                    log::warn!("replicate to server {} failed {attempts} times: {e}", job.dest);
                    fire(inner, job.done, Err(TransportError::Exhausted(attempts)));
                } else {
                    let backoff = Duration::from_millis(1 << attempts);
                    retry(Job { attempts, ..job }, backoff);
                }
            }
        }
    }
}

fn fire(inner: &Inner, done: Callback, result: Result<Message, TransportError>) {
    let job: Box<dyn FnOnce() + Send> = Box::new(move || done(result));
    if inner.callbacks.send(Some(job)).is_err() {
        inner.in_flight.fetch_sub(1, SeqCst);
    }
}

fn callback_loop(inner: &Inner, rx: Receiver<Option<Box<dyn FnOnce() + Send>>>) {
    loop {
        match rx.recv_timeout(Duration::from_millis(20)) {
            Ok(Some(cb)) => {
                cb();
                inner.callbacks_fired.fetch_add(1, SeqCst);
                inner.in_flight.fetch_sub(1, SeqCst);
            }
            Ok(None) | Err(channel::RecvTimeoutError::Timeout) => {
                if inner.state.lock().shutdown && rx.is_empty() {
                    return;
                }
            }
            Err(channel::RecvTimeoutError::Disconnected) => return,
        }
    }
}
