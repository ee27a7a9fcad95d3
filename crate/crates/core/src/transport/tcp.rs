//! TCP backend. Each server listens on one socket and hands decoded requests
//! to a worker pool; outgoing connections are shared per peer and responses
//! are matched back to callers by request id.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering::SeqCst};
use std::sync::{Arc, OnceLock, Weak};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam::channel::{self, Receiver, Sender};
use parking_lot::Mutex;

use super::dispatch::{DeliveryPolicy, Dispatcher};
use super::message::MAX_FRAME;
use super::{Callback, Handler, Message, Network, TransportError};
use crate::node::ServerId;

/// How long a caller waits for a response before reporting an i/o error.
pub const REQUEST_TIMEOUT: Duration = Duration::from_secs(30);

fn read_frame(stream: &mut TcpStream) -> io::Result<Vec<u8>> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("frame of {len} bytes")));
    }
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body)?;
    Ok(body)
}

type Reply = (u64, Message, Arc<Mutex<TcpStream>>);

/// Listening side of one server.
pub struct TcpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl TcpServer {
    pub fn bind(addr: SocketAddr, handler: Arc<dyn Handler>, workers: usize) -> io::Result<TcpServer> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::default();
        let (tx, rx) = channel::unbounded::<Reply>();
        let mut threads = Vec::new();
        for i in 0..workers.max(1) {
            let rx = rx.clone();
            let handler = Arc::clone(&handler);
            threads.push(thread::Builder::new().name(format!("tcp-worker-{i}")).spawn(move || serve_requests(rx, handler))?);
        }
        let (s, c) = (Arc::clone(&stop), Arc::clone(&conns));
        threads.push(thread::Builder::new().name("tcp-accept".into()).spawn(move || accept_loop(listener, s, c, tx))?);
        Ok(TcpServer { addr, stop, conns, threads: Mutex::new(threads) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&self) {
        self.stop.store(true, SeqCst);
        for c in self.conns.lock().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
        for t in self.threads.lock().drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, stop: Arc<AtomicBool>, conns: Arc<Mutex<Vec<TcpStream>>>, tx: Sender<Reply>) {
    let mut readers = Vec::new();
    while !stop.load(SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let setup = stream
                    .set_nonblocking(false)
                    .and_then(|_| stream.set_nodelay(true))
                    .and_then(|_| Ok((stream.try_clone()?, stream.try_clone()?)));
                let Ok((reader, tracked)) = setup else { continue };
                conns.lock().push(tracked);
                let writer = Arc::new(Mutex::new(stream));
                let tx = tx.clone();
                readers.push(thread::spawn(move || read_requests(reader, writer, tx)));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
    for c in conns.lock().iter() {
        let _ = c.shutdown(Shutdown::Both);
    }
    drop(tx);
    for r in readers {
        let _ = r.join();
    }
}

fn read_requests(mut reader: TcpStream, writer: Arc<Mutex<TcpStream>>, tx: Sender<Reply>) {
    while let Ok(body) = read_frame(&mut reader) {
        match Message::decode_body(&body) {
            Ok((id, msg)) => {
                if tx.send((id, msg, Arc::clone(&writer))).is_err() {
                    return;
                }
            }
            Err(e) => {
                log::warn!("dropping connection after bad frame: {e}");
                let _ = reader.shutdown(Shutdown::Both);
                return;
            }
        }
    }
}

fn serve_requests(rx: Receiver<Reply>, handler: Arc<dyn Handler>) {
    for (id, msg, writer) in rx {
        let frame = handler.handle(msg).encode(id);
        if let Err(e) = writer.lock().write_all(&frame) {
            log::debug!("response {id} not written: {e}");
        }
    }
}

/// One outgoing connection with its response demultiplexer.
struct Conn {
    writer: Mutex<TcpStream>,
    pending: Arc<Mutex<HashMap<u64, Sender<Message>>>>,
    alive: Arc<AtomicBool>,
}

impl Conn {
    fn open(addr: SocketAddr) -> io::Result<Conn> {
        let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(5))?;
        stream.set_nodelay(true)?;
        let mut reader = stream.try_clone()?;
        let pending: Arc<Mutex<HashMap<u64, Sender<Message>>>> = Arc::default();
        let alive = Arc::new(AtomicBool::new(true));
        let (p, a) = (Arc::clone(&pending), Arc::clone(&alive));
        thread::spawn(move || {
            while let Ok(body) = read_frame(&mut reader) {
                let Ok((id, msg)) = Message::decode_body(&body) else { break };
                if let Some(tx) = p.lock().remove(&id) {
                    let _ = tx.send(msg);
                }
            }
            a.store(false, SeqCst);
            // Dropping the senders wakes every waiter with a disconnect.
            p.lock().clear();
        });
        Ok(Conn { writer: Mutex::new(stream), pending, alive })
    }
}

impl Drop for Conn {
    fn drop(&mut self) {
        let _ = self.writer.lock().shutdown(Shutdown::Both);
    }
}

struct NetInner {
    me: ServerId,
    peers: HashMap<ServerId, SocketAddr>,
    conns: Mutex<HashMap<ServerId, Arc<Conn>>>,
    next_id: AtomicU64,
    dispatcher: OnceLock<Dispatcher>,
}

impl NetInner {
    fn conn(&self, dest: ServerId) -> Result<Arc<Conn>, TransportError> {
        let addr = *self.peers.get(&dest).ok_or(TransportError::UnknownServer(dest))?;
        let mut conns = self.conns.lock();
        if let Some(c) = conns.get(&dest) {
            if c.alive.load(SeqCst) {
                return Ok(Arc::clone(c));
            }
        }
        let c = Arc::new(Conn::open(addr).map_err(|e| io_err(dest, e))?);
        conns.insert(dest, Arc::clone(&c));
        Ok(c)
    }

    fn request(&self, dest: ServerId, msg: Message) -> Result<Message, TransportError> {
        let conn = self.conn(dest)?;
        let id = self.next_id.fetch_add(1, SeqCst);
        let (tx, rx) = channel::bounded(1);
        conn.pending.lock().insert(id, tx);
        if !conn.alive.load(SeqCst) {
            conn.pending.lock().remove(&id);
            return Err(TransportError::Down(dest));
        }
        if let Err(e) = conn.writer.lock().write_all(&msg.encode(id)) {
            conn.pending.lock().remove(&id);
            self.conns.lock().remove(&dest);
            return Err(io_err(dest, e));
        }
        match rx.recv_timeout(REQUEST_TIMEOUT) {
            Ok(resp) => Ok(resp),
            Err(channel::RecvTimeoutError::Timeout) => {
                conn.pending.lock().remove(&id);
                Err(TransportError::Io { server: dest, detail: "timed out".into() })
            }
            Err(channel::RecvTimeoutError::Disconnected) => Err(TransportError::Down(dest)),
        }
    }
}

fn io_err(server: ServerId, e: io::Error) -> TransportError {
    TransportError::Io { server, detail: e.to_string() }
}

/// Send side of one server over TCP.
#[derive(Clone)]
pub struct TcpNet {
    inner: Arc<NetInner>,
}

impl TcpNet {
    pub fn new(me: ServerId, peers: HashMap<ServerId, SocketAddr>, policy: DeliveryPolicy) -> TcpNet {
        let inner = Arc::new(NetInner {
            me,
            peers,
            conns: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            dispatcher: OnceLock::new(),
        });
        let weak: Weak<NetInner> = Arc::downgrade(&inner);
        let dispatcher = Dispatcher::new(
            policy,
            Box::new(move |dest, msg| match weak.upgrade() {
                Some(inner) => inner.request(dest, msg),
                None => Err(TransportError::Down(dest)),
            }),
        );
        let _ = inner.dispatcher.set(dispatcher);
        TcpNet { inner }
    }

    pub fn wait_idle(&self, timeout: Duration) -> bool {
        self.dispatcher().wait_idle(timeout)
    }

    pub fn shutdown(&self) {
        self.dispatcher().shutdown();
        self.inner.conns.lock().clear();
    }

    fn dispatcher(&self) -> &Dispatcher {
        self.inner.dispatcher.get().expect("dispatcher initialised in new")
    }
}

impl Network for TcpNet {
    fn me(&self) -> ServerId {
        self.inner.me
    }

    fn servers(&self) -> Vec<ServerId> {
        let mut ids: Vec<_> = self.inner.peers.keys().copied().collect();
        if !ids.contains(&self.inner.me) {
            ids.push(self.inner.me);
        }
        ids.sort_unstable();
        ids
    }

    fn request(&self, dest: ServerId, msg: Message) -> Result<Message, TransportError> {
        self.inner.request(dest, msg)
    }

    fn send_async(&self, dest: ServerId, msg: Message, done: Callback) {
        self.dispatcher().submit(dest, msg, done)
    }
}
