//! Multi-process cluster runtime over loopback TCP.
//!
//! One driver process launches `n` copies of its own executable in worker
//! mode, hands each a WorkerId through a framed handshake, and wires the
//! workers into a ring for allreduce. The driver keeps one control
//! connection per worker (tasks, barriers, broadcast, scatter, heartbeats);
//! workers talk to each other only over the ring, one TCP hop to the
//! successor.
//!
//! Scope: single host. The config accepts a listen host, but nothing here
//! arranges multi-host process placement or transport security, and the
//! failure model is crash-stop: a dead worker fails the job. Fail-fast is a
//! deliberate choice where recovery semantics would otherwise be invented.

use crate::codec::{PayloadReader, PayloadWriter};
use crate::shards::{RecordBatch, Shards};
use crate::split_sizes;
use log::{debug, info, warn};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::any::Any;
use std::collections::{HashMap, HashSet};
use std::io::{self, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::panic::{self, AssertUnwindSafe};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};
use thiserror::Error;

// ---------------------------------------------------------------------------
// Frame layer
// ---------------------------------------------------------------------------

pub const FRAME_MAGIC: [u8; 4] = *b"SPW1";

/// Upper bound on a frame payload. Nothing this runtime ships approaches it;
/// the cap turns a corrupt length prefix into an error instead of a giant
/// allocation.
pub const MAX_FRAME_LEN: u32 = 256 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0,
    HelloAck = 1,
    Barrier = 2,
    BarrierRelease = 3,
    Broadcast = 4,
    Scatter = 5,
    AllreduceChunk = 6,
    TaskRun = 7,
    TaskResult = 8,
    Heartbeat = 9,
    Shutdown = 10,
    Error = 11,
}

impl MsgType {
    pub const ALL: [MsgType; 12] = [
        MsgType::Hello,
        MsgType::HelloAck,
        MsgType::Barrier,
        MsgType::BarrierRelease,
        MsgType::Broadcast,
        MsgType::Scatter,
        MsgType::AllreduceChunk,
        MsgType::TaskRun,
        MsgType::TaskResult,
        MsgType::Heartbeat,
        MsgType::Shutdown,
        MsgType::Error,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<MsgType> {
        MsgType::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("bad frame magic \"{}\", expected \"SPW1\"", .0.escape_ascii())]
    BadMagic([u8; 4]),
    #[error("unknown frame msg_type code {0}")]
    UnknownMsgType(u8),
    #[error("frame length {0} exceeds the {MAX_FRAME_LEN} byte cap")]
    TooLarge(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Wire layout: magic "SPW1", u32 little-endian payload length, one msg_type
/// byte, then the payload.
pub fn encode_frame(msg_type: MsgType, payload: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(9 + payload.len());
    buf.extend_from_slice(&FRAME_MAGIC);
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.push(msg_type.code());
    buf.extend_from_slice(payload);
    buf
}

/// Frames are written with a single `write_all` so concurrent writers that
/// share a stream behind a lock never interleave partial frames.
pub fn write_frame(w: &mut impl Write, msg_type: MsgType, payload: &[u8]) -> Result<(), FrameError> {
    w.write_all(&encode_frame(msg_type, payload))?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<Frame, FrameError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != FRAME_MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let len = u32::from_le_bytes(len_bytes);
    if len > MAX_FRAME_LEN {
        return Err(FrameError::TooLarge(len));
    }
    let mut type_byte = [0u8; 1];
    r.read_exact(&mut type_byte)?;
    let msg_type = MsgType::from_code(type_byte[0]).ok_or(FrameError::UnknownMsgType(type_byte[0]))?;
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok(Frame { msg_type, payload })
}

// ---------------------------------------------------------------------------
// Config, state, errors
// ---------------------------------------------------------------------------

/// How long a stopped worker gets to exit after a Shutdown frame before the
/// driver falls back to SIGKILL.
pub const SHUTDOWN_GRACE: Duration = Duration::from_secs(2);

/// Worker-side cap on waiting for a barrier release. A barrier that waits
/// this long means a peer died or stalled; failing the task lets the driver's
/// own death detection produce the real diagnosis.
pub const WORKER_BARRIER_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub n_workers: usize,
    /// Host the driver control socket listens on. Workers are directed to
    /// connect back to this host, so it must be reachable locally.
    pub host: String,
    /// Driver listen port; 0 picks an ephemeral port.
    pub base_port: u16,
    pub handshake_timeout: Duration,
    pub heartbeat_interval: Duration,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            n_workers: 1,
            host: "127.0.0.1".to_string(),
            base_port: 0,
            handshake_timeout: Duration::from_secs(10),
            heartbeat_interval: Duration::from_millis(500),
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.n_workers < 1 {
            return Err(ClusterError::BadConfig("n_workers must be at least 1".into()));
        }
        if self.handshake_timeout.is_zero() {
            return Err(ClusterError::BadConfig("handshake timeout must be positive".into()));
        }
        if self.heartbeat_interval.is_zero() {
            return Err(ClusterError::BadConfig("heartbeat interval must be positive".into()));
        }
        Ok(())
    }
}

/// Workers are numbered 0..n by the driver; the id doubles as the worker's
/// position in the allreduce ring.
pub type WorkerId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterState {
    Launching,
    Ready,
    ShuttingDown,
    Down,
}

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cluster config invalid: {0}")]
    BadConfig(String),
    #[error("failed to bind driver listener on {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("failed to spawn worker {id}: {source}")]
    Spawn { id: usize, source: io::Error },
    #[error("handshake timed out after {timeout:?}; workers never connected: {missing:?}")]
    HandshakeTimeout { timeout: Duration, missing: Vec<usize> },
    #[error("worker {0} completed the handshake twice")]
    DuplicateWorker(usize),
    #[error("malformed handshake: {0}")]
    BadHello(String),
    #[error("cluster is {0:?}; operation requires Ready")]
    NotReady(ClusterState),
    #[error("{partitions} partitions for {workers} workers; repartition the shards to one per worker")]
    PartitionMismatch { partitions: usize, workers: usize },
    #[error("worker {0} died")]
    WorkerDead(usize),
    #[error("task \"{task}\" failed on worker {worker}: {message}")]
    TaskFailed {
        task: String,
        worker: usize,
        message: String,
    },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Liveness ledger for the fleet. Dead is terminal: a heartbeat that arrives
/// after a worker was declared dead is a zombie talking and is ignored.
pub struct ManagerState {
    workers: Vec<WorkerHealth>,
}

struct WorkerHealth {
    last_heartbeat: Instant,
    live: bool,
}

impl ManagerState {
    fn new(n: usize) -> Self {
        let now = Instant::now();
        ManagerState {
            workers: (0..n)
                .map(|_| WorkerHealth { last_heartbeat: now, live: true })
                .collect(),
        }
    }

    pub fn record_heartbeat(&mut self, id: usize) {
        if let Some(w) = self.workers.get_mut(id) {
            if w.live {
                w.last_heartbeat = Instant::now();
            }
        }
    }

    pub fn mark_dead(&mut self, id: usize) {
        if let Some(w) = self.workers.get_mut(id) {
            w.live = false;
        }
    }

    pub fn is_live(&self, id: usize) -> bool {
        self.workers.get(id).is_some_and(|w| w.live)
    }

    pub fn heartbeat_age(&self, id: usize) -> Duration {
        self.workers
            .get(id)
            .map_or(Duration::ZERO, |w| w.last_heartbeat.elapsed())
    }
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

enum Event {
    Barrier { worker: usize, seq: u32 },
    TaskDone { worker: usize, seq: u32, result: Result<Vec<u8>, String> },
    WorkerError { worker: usize, message: String },
    Dead { worker: usize },
}

struct WorkerHandle {
    child: Child,
    ctrl: TcpStream,
    reader: Option<thread::JoinHandle<()>>,
}

pub struct ClusterContext {
    cfg: ClusterConfig,
    state: ClusterState,
    workers: Vec<WorkerHandle>,
    events: Receiver<Event>,
    manager: Arc<Mutex<ManagerState>>,
    seq: u32,
}

/// Spawn `cfg.n_workers` copies of the current executable in worker mode and
/// run the Hello/HelloAck handshake with each. On success every WorkerId in
/// `0..n` was seen exactly once, every worker knows its ring successor, and
/// the context is Ready. On failure every spawned process is killed before
/// the error returns.
pub fn launch_cluster(cfg: ClusterConfig) -> Result<ClusterContext, ClusterError> {
    cfg.validate()?;
    let n = cfg.n_workers;
    let bind_addr = format!("{}:{}", cfg.host, cfg.base_port);
    let listener = TcpListener::bind(&bind_addr).map_err(|source| ClusterError::Bind {
        addr: bind_addr.clone(),
        source,
    })?;
    let port = listener.local_addr()?.port();
    let driver_addr = format!("{}:{}", cfg.host, port);
    let exe = std::env::current_exe()?;
    info!("driver listening on {driver_addr}, launching {n} workers");

    let mut children: Vec<Option<Child>> = Vec::with_capacity(n);
    for id in 0..n {
        let spawned = Command::new(&exe)
            .args(["--worker", "--id", &id.to_string(), "--driver", &driver_addr])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .spawn();
        match spawned {
            Ok(child) => children.push(Some(child)),
            Err(source) => {
                kill_all(&mut children);
                return Err(ClusterError::Spawn { id, source });
            }
        }
    }

    // Collect one Hello per worker, in whatever order they arrive.
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + cfg.handshake_timeout;
    let mut hellos: Vec<Option<(TcpStream, u16)>> = (0..n).map(|_| None).collect();
    let mut seen = 0usize;
    while seen < n {
        let now = Instant::now();
        if now >= deadline {
            kill_all(&mut children);
            let missing = hellos
                .iter()
                .enumerate()
                .filter(|(_, h)| h.is_none())
                .map(|(i, _)| i)
                .collect();
            return Err(ClusterError::HandshakeTimeout {
                timeout: cfg.handshake_timeout,
                missing,
            });
        }
        match listener.accept() {
            Ok((stream, _)) => {
                let hello = read_hello(stream, deadline.saturating_duration_since(now));
                match hello {
                    Ok((stream, id, ring_port)) => {
                        if id >= n {
                            kill_all(&mut children);
                            return Err(ClusterError::BadHello(format!(
                                "worker id {id} out of range for {n} workers"
                            )));
                        }
                        if hellos[id].is_some() {
                            kill_all(&mut children);
                            return Err(ClusterError::DuplicateWorker(id));
                        }
                        debug!("worker {id} connected, ring port {ring_port}");
                        hellos[id] = Some((stream, ring_port));
                        seen += 1;
                    }
                    Err(e) => {
                        // A connection that never produced a valid Hello does
                        // not fail the launch; the deadline accounts for it.
                        warn!("discarding connection without a valid hello: {e}");
                    }
                }
            }
            Err(ref e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                kill_all(&mut children);
                return Err(ClusterError::Io(e));
            }
        }
    }

    let ring_ports: Vec<u16> = hellos.iter().map(|h| h.as_ref().unwrap().1).collect();
    let heartbeat_ms = cfg.heartbeat_interval.as_millis() as u32;
    let mut streams = Vec::with_capacity(n);
    for (id, slot) in hellos.into_iter().enumerate() {
        let (mut stream, _) = slot.unwrap();
        let successor = format!("127.0.0.1:{}", ring_ports[(id + 1) % n]);
        let mut w = PayloadWriter::new();
        w.u32(n as u32).u32(heartbeat_ms).str(&successor);
        if let Err(e) = write_frame(&mut stream, MsgType::HelloAck, &w.finish()) {
            kill_all(&mut children);
            return Err(e.into());
        }
        stream.set_read_timeout(None)?;
        streams.push(stream);
    }

    let manager = Arc::new(Mutex::new(ManagerState::new(n)));
    let (tx, events) = mpsc::channel();
    let mut workers = Vec::with_capacity(n);
    for (id, ctrl) in streams.into_iter().enumerate() {
        let read_half = ctrl.try_clone()?;
        let reader = spawn_driver_reader(id, read_half, tx.clone(), Arc::clone(&manager));
        workers.push(WorkerHandle {
            child: children[id].take().unwrap(),
            ctrl,
            reader: Some(reader),
        });
    }

    info!("cluster ready with {n} workers");
    Ok(ClusterContext {
        cfg,
        state: ClusterState::Ready,
        workers,
        events,
        manager,
        seq: 0,
    })
}

fn kill_all(children: &mut [Option<Child>]) {
    for child in children.iter_mut().flatten() {
        let _ = child.kill();
        let _ = child.wait();
    }
}

/// Read the worker's Hello off a fresh connection: worker id and the port of
/// its ring listener.
fn read_hello(stream: TcpStream, remaining: Duration) -> Result<(TcpStream, usize, u16), ClusterError> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(remaining.max(Duration::from_millis(10))))?;
    stream.set_nodelay(true)?;
    let mut reader = stream;
    let frame = read_frame(&mut reader)?;
    if frame.msg_type != MsgType::Hello {
        return Err(ClusterError::BadHello(format!(
            "expected Hello, got {:?}",
            frame.msg_type
        )));
    }
    let mut r = PayloadReader::new(&frame.payload);
    let id = r.u32().map_err(|e| ClusterError::BadHello(e.to_string()))? as usize;
    let ring_port = r.u16().map_err(|e| ClusterError::BadHello(e.to_string()))?;
    r.finish().map_err(|e| ClusterError::BadHello(e.to_string()))?;
    Ok((reader, id, ring_port))
}

fn spawn_driver_reader(
    id: usize,
    stream: TcpStream,
    tx: Sender<Event>,
    manager: Arc<Mutex<ManagerState>>,
) -> thread::JoinHandle<()> {
    thread::Builder::new()
        .name(format!("ctrl-reader-{id}"))
        .spawn(move || {
            let mut reader = BufReader::new(stream);
            loop {
                let frame = match read_frame(&mut reader) {
                    Ok(f) => f,
                    Err(e) => {
                        debug!("worker {id} control stream closed: {e}");
                        break;
                    }
                };
                let outcome = dispatch_worker_frame(id, frame, &tx, &manager);
                if let Err(message) = outcome {
                    let _ = tx.send(Event::WorkerError { worker: id, message });
                    break;
                }
            }
            manager.lock().unwrap().mark_dead(id);
            let _ = tx.send(Event::Dead { worker: id });
        })
        .expect("spawn control reader thread")
}

fn dispatch_worker_frame(
    id: usize,
    frame: Frame,
    tx: &Sender<Event>,
    manager: &Arc<Mutex<ManagerState>>,
) -> Result<(), String> {
    match frame.msg_type {
        MsgType::Heartbeat => {
            manager.lock().unwrap().record_heartbeat(id);
            Ok(())
        }
        MsgType::Barrier => {
            let mut r = PayloadReader::new(&frame.payload);
            let seq = r.u32().map_err(|e| e.to_string())?;
            let _ = tx.send(Event::Barrier { worker: id, seq });
            Ok(())
        }
        MsgType::TaskResult => {
            let mut r = PayloadReader::new(&frame.payload);
            let parse = (|| -> Result<(u32, bool, Vec<u8>), crate::codec::PayloadError> {
                let seq = r.u32()?;
                let ok = r.u8()? == 1;
                let body = r.bytes()?.to_vec();
                Ok((seq, ok, body))
            })();
            let (seq, ok, body) = parse.map_err(|e| e.to_string())?;
            let result = if ok {
                Ok(body)
            } else {
                Err(String::from_utf8_lossy(&body).into_owned())
            };
            let _ = tx.send(Event::TaskDone { worker: id, seq, result });
            Ok(())
        }
        MsgType::Error => {
            let mut r = PayloadReader::new(&frame.payload);
            let message = r.str().unwrap_or_else(|_| "malformed error frame".to_string());
            Err(message)
        }
        other => Err(format!("unexpected {other:?} frame on the control channel")),
    }
}

impl ClusterContext {
    pub fn state(&self) -> ClusterState {
        self.state
    }

    pub fn n_workers(&self) -> usize {
        self.cfg.n_workers
    }

    pub fn worker_pids(&self) -> Vec<u32> {
        self.workers.iter().map(|w| w.child.id()).collect()
    }

    fn ensure_ready(&self) -> Result<(), ClusterError> {
        if self.state != ClusterState::Ready {
            return Err(ClusterError::NotReady(self.state));
        }
        Ok(())
    }

    /// Send identical bytes to every worker. Workers keep only the most
    /// recent broadcast. Control frames are FIFO per connection, so a
    /// broadcast followed by `run_task` is visible to the task on arrival.
    pub fn broadcast(&mut self, payload: &[u8]) -> Result<(), ClusterError> {
        self.ensure_ready()?;
        for id in 0..self.workers.len() {
            self.write_to(id, MsgType::Broadcast, payload)?;
        }
        Ok(())
    }

    /// Hand partition `i` of `shards` to worker `i`.
    pub fn scatter_shards(&mut self, shards: &Shards<RecordBatch>) -> Result<(), ClusterError> {
        self.ensure_ready()?;
        let partitions = shards.num_partitions();
        let workers = self.cfg.n_workers;
        if partitions != workers {
            return Err(ClusterError::PartitionMismatch { partitions, workers });
        }
        for (id, part) in shards.parts().iter().enumerate() {
            let bytes = crate::codec::encode_record_batch(part);
            self.write_to(id, MsgType::Scatter, &bytes)?;
        }
        Ok(())
    }

    /// Block until every worker reaches a barrier, then release them all.
    pub fn barrier(&mut self) -> Result<(), ClusterError> {
        self.run_task("__barrier", &[])?;
        Ok(())
    }

    /// Run a registered task on every worker with shared `args`. Results come
    /// back ordered by WorkerId. Any failure aborts the call: first worker
    /// error wins, results already collected are discarded.
    pub fn run_task(&mut self, task: &str, args: &[u8]) -> Result<Vec<Vec<u8>>, ClusterError> {
        self.ensure_ready()?;
        self.seq += 1;
        let seq = self.seq;
        let n = self.cfg.n_workers;
        let mut w = PayloadWriter::new();
        w.u32(seq).str(task).bytes(args);
        let frame_payload = w.finish();
        for id in 0..n {
            self.write_to(id, MsgType::TaskRun, &frame_payload)?;
        }

        let mut results: Vec<Option<Vec<u8>>> = (0..n).map(|_| None).collect();
        let mut pending = n;
        let mut barrier_arrivals: HashSet<usize> = HashSet::new();
        let stale_limit = (self.cfg.heartbeat_interval * 4).max(Duration::from_secs(2));
        while pending > 0 {
            match self.events.recv_timeout(self.cfg.heartbeat_interval) {
                Ok(Event::Barrier { worker, seq: s }) if s == seq => {
                    barrier_arrivals.insert(worker);
                    if barrier_arrivals.len() == n {
                        barrier_arrivals.clear();
                        for id in 0..n {
                            self.write_to(id, MsgType::BarrierRelease, &[])?;
                        }
                    }
                }
                Ok(Event::Barrier { worker, seq: s }) => {
                    debug!("ignoring stale barrier from worker {worker} (seq {s}, current {seq})");
                }
                Ok(Event::TaskDone { worker, seq: s, result }) if s == seq => match result {
                    Ok(body) => {
                        if results[worker].replace(body).is_none() {
                            pending -= 1;
                        }
                    }
                    Err(message) => {
                        return Err(ClusterError::TaskFailed {
                            task: task.to_string(),
                            worker,
                            message,
                        });
                    }
                },
                Ok(Event::TaskDone { worker, .. }) => {
                    debug!("ignoring stale task result from worker {worker}");
                }
                Ok(Event::WorkerError { worker, message }) => {
                    return Err(ClusterError::TaskFailed {
                        task: task.to_string(),
                        worker,
                        message,
                    });
                }
                Ok(Event::Dead { worker }) => {
                    if results[worker].is_none() {
                        return Err(ClusterError::WorkerDead(worker));
                    }
                }
                Err(RecvTimeoutError::Timeout) => {
                    let mut manager = self.manager.lock().unwrap();
                    for (id, slot) in results.iter().enumerate() {
                        if slot.is_none()
                            && manager.is_live(id)
                            && manager.heartbeat_age(id) > stale_limit
                        {
                            warn!("worker {id} heartbeat stale, declaring it dead");
                            manager.mark_dead(id);
                            drop(manager);
                            let _ = self.workers[id].child.kill();
                            return Err(ClusterError::WorkerDead(id));
                        }
                    }
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(ClusterError::Protocol("driver event channel closed".into()));
                }
            }
        }
        Ok(results.into_iter().map(Option::unwrap).collect())
    }

    fn write_to(&mut self, id: usize, msg_type: MsgType, payload: &[u8]) -> Result<(), ClusterError> {
        if !self.manager.lock().unwrap().is_live(id) {
            return Err(ClusterError::WorkerDead(id));
        }
        write_frame(&mut self.workers[id].ctrl, msg_type, payload)
            .map_err(|_| ClusterError::WorkerDead(id))
    }

    /// Stop the fleet: Shutdown frame first, SIGKILL for anything still alive
    /// after the grace period, then reap every child. Safe to call from any
    /// state and idempotent; Down means no worker process is left alive.
    pub fn shutdown(&mut self) {
        if self.state == ClusterState::Down {
            return;
        }
        self.state = ClusterState::ShuttingDown;
        for handle in &mut self.workers {
            let _ = write_frame(&mut handle.ctrl, MsgType::Shutdown, &[]);
        }
        let deadline = Instant::now() + SHUTDOWN_GRACE;
        let mut exited = vec![false; self.workers.len()];
        while Instant::now() < deadline && exited.iter().any(|e| !e) {
            for (handle, done) in self.workers.iter_mut().zip(exited.iter_mut()) {
                if !*done && matches!(handle.child.try_wait(), Ok(Some(_))) {
                    *done = true;
                }
            }
            if exited.iter().all(|e| *e) {
                break;
            }
            thread::sleep(Duration::from_millis(10));
        }
        for (handle, done) in self.workers.iter_mut().zip(exited.iter()) {
            if !*done {
                warn!("worker pid {} ignored shutdown, killing it", handle.child.id());
                let _ = handle.child.kill();
            }
            let _ = handle.child.wait();
        }
        for handle in &mut self.workers {
            let _ = handle.ctrl.shutdown(std::net::Shutdown::Both);
            if let Some(reader) = handle.reader.take() {
                let _ = reader.join();
            }
        }
        self.state = ClusterState::Down;
        info!("cluster down");
    }
}

impl Drop for ClusterContext {
    fn drop(&mut self) {
        self.shutdown();
    }
}

// ---------------------------------------------------------------------------
// Worker
// ---------------------------------------------------------------------------

/// Recognize the worker-mode invocation `--worker --id <n> --driver <host:port>`.
/// Every binary that can act as a driver checks this before anything else and
/// diverts to [`worker_main`] on a match.
pub fn parse_worker_argv(args: &[String]) -> Option<(usize, String)> {
    if !args.iter().any(|a| a == "--worker") {
        return None;
    }
    let mut id = None;
    let mut driver = None;
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--id" => id = it.next().and_then(|v| v.parse().ok()),
            "--driver" => driver = it.next().cloned(),
            _ => {}
        }
    }
    Some((id?, driver?))
}

struct ScatterSlot {
    bytes: Option<Vec<u8>>,
    decoded: Option<Arc<RecordBatch>>,
}

struct WorkerShared {
    write: Mutex<TcpStream>,
    broadcast: Mutex<Option<Arc<Vec<u8>>>>,
    scatter: Mutex<ScatterSlot>,
}

impl WorkerShared {
    fn send(&self, msg_type: MsgType, payload: &[u8]) -> Result<(), FrameError> {
        let mut stream = self.write.lock().unwrap();
        write_frame(&mut *stream, msg_type, payload)
    }
}

/// Opaque state a task keeps between invocations on the same worker, keyed by
/// a name the task owns.
#[derive(Default)]
pub struct StateSlots(HashMap<String, Box<dyn Any + Send>>);

impl StateSlots {
    pub fn put<T: Any + Send>(&mut self, key: &str, value: T) {
        self.0.insert(key.to_string(), Box::new(value));
    }

    pub fn get<T: Any + Send>(&self, key: &str) -> Option<&T> {
        self.0.get(key).and_then(|b| b.downcast_ref())
    }

    pub fn get_mut<T: Any + Send>(&mut self, key: &str) -> Option<&mut T> {
        self.0.get_mut(key).and_then(|b| b.downcast_mut())
    }

    pub fn take<T: Any + Send>(&mut self, key: &str) -> Option<T> {
        let boxed = self.0.remove(key)?;
        match boxed.downcast::<T>() {
            Ok(v) => Some(*v),
            Err(boxed) => {
                self.0.insert(key.to_string(), boxed);
                None
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

impl ReduceOp {
    pub fn code(self) -> u8 {
        match self {
            ReduceOp::Sum => 0,
            ReduceOp::Mean => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<ReduceOp> {
        match code {
            0 => Some(ReduceOp::Sum),
            1 => Some(ReduceOp::Mean),
            _ => None,
        }
    }
}

/// Everything a task can touch on its worker.
pub struct WorkerCtx {
    pub worker_id: usize,
    pub n_workers: usize,
    /// Cross-task scratch state (model replicas and the like).
    pub state: StateSlots,
    shared: Arc<WorkerShared>,
    barrier_rx: Receiver<()>,
    ring_send: TcpStream,
    ring_recv: BufReader<TcpStream>,
    rounds: u64,
    cur_seq: u32,
}

impl WorkerCtx {
    /// Cumulative count of ring communication rounds this worker performed.
    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    /// Latest broadcast payload, if any arrived.
    pub fn broadcast_data(&self) -> Option<Arc<Vec<u8>>> {
        self.shared.broadcast.lock().unwrap().clone()
    }

    /// The scattered partition for this worker, decoded once and cached until
    /// the next scatter replaces it.
    pub fn scattered_batch(&self) -> Result<Arc<RecordBatch>, String> {
        let mut slot = self.shared.scatter.lock().unwrap();
        if let Some(decoded) = &slot.decoded {
            return Ok(Arc::clone(decoded));
        }
        let bytes = slot
            .bytes
            .as_ref()
            .ok_or_else(|| "no partition has been scattered to this worker".to_string())?;
        let batch = crate::codec::decode_record_batch(bytes).map_err(|e| e.to_string())?;
        let arc = Arc::new(batch);
        slot.decoded = Some(Arc::clone(&arc));
        Ok(arc)
    }

    /// Enter a barrier: tell the driver we arrived, then wait for the release
    /// that comes once all workers did.
    pub fn barrier(&mut self) -> Result<(), String> {
        // Drain releases from an earlier barrier this worker timed out of;
        // control-channel FIFO ordering guarantees any such release was
        // queued before the TaskRun that started the current task.
        while self.barrier_rx.try_recv().is_ok() {}
        let mut w = PayloadWriter::new();
        w.u32(self.cur_seq);
        self.shared
            .send(MsgType::Barrier, &w.finish())
            .map_err(|e| format!("barrier send failed: {e}"))?;
        self.barrier_rx
            .recv_timeout(WORKER_BARRIER_TIMEOUT)
            .map_err(|_| format!("barrier timed out after {WORKER_BARRIER_TIMEOUT:?}"))
    }

    /// Ring allreduce across all workers. Every worker must call this with a
    /// vector of the same length; results are byte-identical on all workers.
    /// The vector is cut into n contiguous chunks (larger chunks first), then
    /// n-1 reduce-scatter rounds and n-1 allgather rounds move each chunk
    /// around the ring exactly once in each phase.
    pub fn allreduce(&mut self, values: &[f32], op: ReduceOp) -> Result<Vec<f32>, String> {
        let n = self.n_workers;
        let mut data = values.to_vec();
        if n > 1 {
            let sizes = split_sizes(data.len(), n);
            let mut offsets = Vec::with_capacity(n + 1);
            let mut acc = 0;
            offsets.push(0);
            for s in &sizes {
                acc += s;
                offsets.push(acc);
            }
            let total = data.len() as u32;
            let id = self.worker_id;
            for r in 0..n - 1 {
                let send_chunk = (id + n - r) % n;
                let recv_chunk = (id + n - r - 1) % n;
                let received = exchange(
                    &mut self.ring_send,
                    &mut self.ring_recv,
                    total,
                    r as u32,
                    send_chunk as u32,
                    &data[offsets[send_chunk]..offsets[send_chunk + 1]],
                    sizes[recv_chunk],
                )?;
                for (dst, src) in data[offsets[recv_chunk]..offsets[recv_chunk + 1]]
                    .iter_mut()
                    .zip(received)
                {
                    *dst += src;
                }
                self.rounds += 1;
            }
            for r in 0..n - 1 {
                let send_chunk = (id + 1 + n - r) % n;
                let recv_chunk = (id + n - r) % n;
                let received = exchange(
                    &mut self.ring_send,
                    &mut self.ring_recv,
                    total,
                    (n - 1 + r) as u32,
                    send_chunk as u32,
                    &data[offsets[send_chunk]..offsets[send_chunk + 1]],
                    sizes[recv_chunk],
                )?;
                data[offsets[recv_chunk]..offsets[recv_chunk + 1]].copy_from_slice(&received);
                self.rounds += 1;
            }
        }
        if op == ReduceOp::Mean {
            let scale = n as f32;
            for x in &mut data {
                *x /= scale;
            }
        }
        Ok(data)
    }
}

/// One lockstep ring round: ship our chunk to the successor while reading the
/// predecessor's. The send runs on a scoped thread so a chunk larger than the
/// socket buffer cannot deadlock the ring.
fn exchange(
    send: &mut TcpStream,
    recv: &mut BufReader<TcpStream>,
    total: u32,
    round: u32,
    send_chunk: u32,
    out: &[f32],
    expect_len: usize,
) -> Result<Vec<f32>, String> {
    let mut w = PayloadWriter::new();
    w.u32(total).u32(round).u32(send_chunk).f32s(out);
    let payload = w.finish();
    thread::scope(|scope| {
        let sender = scope.spawn(move || write_frame(send, MsgType::AllreduceChunk, &payload));
        let frame = read_frame(recv).map_err(|e| format!("ring receive failed: {e}"))?;
        sender
            .join()
            .expect("ring sender thread panicked")
            .map_err(|e| format!("ring send failed: {e}"))?;
        if frame.msg_type != MsgType::AllreduceChunk {
            return Err(format!("unexpected {:?} frame on the ring", frame.msg_type));
        }
        let mut r = PayloadReader::new(&frame.payload);
        let peer_total = r.u32().map_err(|e| e.to_string())?;
        let peer_round = r.u32().map_err(|e| e.to_string())?;
        let _peer_chunk = r.u32().map_err(|e| e.to_string())?;
        let values = r.f32s().map_err(|e| e.to_string())?;
        if peer_total != total {
            return Err(format!(
                "allreduce length mismatch: this worker has {total} elements, peer has {peer_total}"
            ));
        }
        if peer_round != round {
            return Err(format!("ring out of step: expected round {round}, got {peer_round}"));
        }
        if values.len() != expect_len {
            return Err(format!(
                "ring chunk size mismatch: expected {expect_len} elements, got {}",
                values.len()
            ));
        }
        Ok(values)
    })
}

enum WorkerControl {
    Task { seq: u32, name: String, args: Vec<u8> },
}

/// Entry point for a process started with `--worker`. Never returns; the
/// process exits when the driver says Shutdown or its connection drops.
pub fn worker_main(id: usize, driver: &str) -> ! {
    match worker_run(id, driver) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            warn!("worker {id} failed: {e}");
            std::process::exit(2);
        }
    }
}

fn worker_run(id: usize, driver: &str) -> Result<i32, String> {
    // Fault-injection hook used by launch-failure tests: the named worker
    // goes quiet instead of completing the handshake.
    if std::env::var("SHARDPIPE_FAULT_STALL_HELLO").ok().as_deref() == Some(&id.to_string()) {
        thread::sleep(Duration::from_secs(120));
        return Ok(2);
    }

    let ring_listener =
        TcpListener::bind("127.0.0.1:0").map_err(|e| format!("ring listener bind failed: {e}"))?;
    let ring_port = ring_listener
        .local_addr()
        .map_err(|e| e.to_string())?
        .port();

    let deadline = Instant::now() + Duration::from_secs(15);
    let mut ctrl = connect_retry(driver, deadline)
        .map_err(|e| format!("worker {id} could not reach driver at {driver}: {e}"))?;
    ctrl.set_nodelay(true).map_err(|e| e.to_string())?;
    let mut hello = PayloadWriter::new();
    hello.u32(id as u32).u16(ring_port);
    write_frame(&mut ctrl, MsgType::Hello, &hello.finish()).map_err(|e| e.to_string())?;

    let ack = read_frame(&mut ctrl).map_err(|e| format!("waiting for HelloAck: {e}"))?;
    if ack.msg_type != MsgType::HelloAck {
        return Err(format!("expected HelloAck, got {:?}", ack.msg_type));
    }
    let mut r = PayloadReader::new(&ack.payload);
    let n = r.u32().map_err(|e| e.to_string())? as usize;
    let heartbeat_ms = r.u32().map_err(|e| e.to_string())?;
    let successor = r.str().map_err(|e| e.to_string())?;
    r.finish().map_err(|e| e.to_string())?;
    info!("worker {id}/{n} handshake done, ring successor {successor}");

    // Ring wiring. Connect to the successor (its listener predates its Hello,
    // so it is already bound) and accept the predecessor. With n=1 both ends
    // come from this worker connecting to itself.
    let mut ring_send = connect_retry(&successor, Instant::now() + Duration::from_secs(15))
        .map_err(|e| format!("ring connect to {successor} failed: {e}"))?;
    ring_send.set_nodelay(true).map_err(|e| e.to_string())?;
    let mut ring_hello = PayloadWriter::new();
    ring_hello.u32(id as u32);
    write_frame(&mut ring_send, MsgType::Hello, &ring_hello.finish()).map_err(|e| e.to_string())?;
    let ring_recv_stream = accept_with_deadline(&ring_listener, Instant::now() + Duration::from_secs(15))
        .map_err(|e| format!("ring accept failed: {e}"))?;
    ring_recv_stream.set_nodelay(true).map_err(|e| e.to_string())?;
    let mut ring_recv = BufReader::new(ring_recv_stream);
    let pred_frame = read_frame(&mut ring_recv).map_err(|e| format!("ring hello: {e}"))?;
    let mut pr = PayloadReader::new(&pred_frame.payload);
    let pred = pr.u32().map_err(|e| e.to_string())? as usize;
    let expected_pred = (id + n - 1) % n;
    if pred_frame.msg_type != MsgType::Hello || pred != expected_pred {
        return Err(format!(
            "ring mis-wired: expected predecessor {expected_pred}, got {pred}"
        ));
    }

    let shared = Arc::new(WorkerShared {
        write: Mutex::new(ctrl.try_clone().map_err(|e| e.to_string())?),
        broadcast: Mutex::new(None),
        scatter: Mutex::new(ScatterSlot { bytes: None, decoded: None }),
    });

    // Heartbeats come from their own thread so a long task never makes the
    // driver think this worker died.
    {
        let shared = Arc::clone(&shared);
        let interval = Duration::from_millis(heartbeat_ms.max(1) as u64);
        let mut hb = PayloadWriter::new();
        hb.u32(id as u32);
        let payload = hb.finish();
        thread::Builder::new()
            .name(format!("heartbeat-{id}"))
            .spawn(move || loop {
                thread::sleep(interval);
                if shared.send(MsgType::Heartbeat, &payload).is_err() {
                    std::process::exit(1);
                }
            })
            .map_err(|e| e.to_string())?;
    }

    let (barrier_tx, barrier_rx) = mpsc::channel();
    let (task_tx, task_rx) = mpsc::channel();
    {
        let shared = Arc::clone(&shared);
        thread::Builder::new()
            .name(format!("worker-reader-{id}"))
            .spawn(move || worker_reader_loop(id, ctrl, shared, barrier_tx, task_tx))
            .map_err(|e| e.to_string())?;
    }

    let mut ctx = WorkerCtx {
        worker_id: id,
        n_workers: n,
        state: StateSlots::default(),
        shared: Arc::clone(&shared),
        barrier_rx,
        ring_send,
        ring_recv,
        rounds: 0,
        cur_seq: 0,
    };

    while let Ok(WorkerControl::Task { seq, name, args }) = task_rx.recv() {
        ctx.cur_seq = seq;
        let result = match find_task(&name) {
            Some(task) => panic::catch_unwind(AssertUnwindSafe(|| task(&mut ctx, &args)))
                .unwrap_or_else(|p| Err(panic_message(p))),
            None => Err(format!("unknown task \"{name}\"")),
        };
        let mut w = PayloadWriter::new();
        w.u32(seq);
        match &result {
            Ok(body) => {
                w.u8(1).bytes(body);
            }
            Err(message) => {
                w.u8(0).bytes(message.as_bytes());
            }
        }
        if shared.send(MsgType::TaskResult, &w.finish()).is_err() {
            return Ok(1);
        }
    }
    // The reader hung up: driver is gone, leave quietly.
    Ok(0)
}

fn panic_message(p: Box<dyn Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("task panicked: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("task panicked: {s}")
    } else {
        "task panicked".to_string()
    }
}

fn worker_reader_loop(
    id: usize,
    ctrl: TcpStream,
    shared: Arc<WorkerShared>,
    barrier_tx: Sender<()>,
    task_tx: Sender<WorkerControl>,
) {
    let mut reader = BufReader::new(ctrl);
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(e) => {
                debug!("worker {id} lost the driver connection: {e}");
                std::process::exit(1);
            }
        };
        match frame.msg_type {
            MsgType::Shutdown => {
                debug!("worker {id} received shutdown");
                std::process::exit(0);
            }
            MsgType::BarrierRelease => {
                let _ = barrier_tx.send(());
            }
            MsgType::Broadcast => {
                *shared.broadcast.lock().unwrap() = Some(Arc::new(frame.payload));
            }
            MsgType::Scatter => {
                let mut slot = shared.scatter.lock().unwrap();
                slot.bytes = Some(frame.payload);
                slot.decoded = None;
            }
            MsgType::TaskRun => {
                let mut r = PayloadReader::new(&frame.payload);
                let parsed = (|| -> Result<WorkerControl, crate::codec::PayloadError> {
                    let seq = r.u32()?;
                    let name = r.str()?;
                    let args = r.bytes()?.to_vec();
                    Ok(WorkerControl::Task { seq, name, args })
                })();
                match parsed {
                    Ok(control) => {
                        let _ = task_tx.send(control);
                    }
                    Err(e) => {
                        let mut w = PayloadWriter::new();
                        w.str(&format!("malformed TaskRun frame: {e}"));
                        let _ = shared.send(MsgType::Error, &w.finish());
                        std::process::exit(1);
                    }
                }
            }
            other => {
                let mut w = PayloadWriter::new();
                w.str(&format!("unexpected {other:?} frame from the driver"));
                let _ = shared.send(MsgType::Error, &w.finish());
                std::process::exit(1);
            }
        }
    }
}

fn connect_retry(addr: &str, deadline: Instant) -> io::Result<TcpStream> {
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(e);
                }
                thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

fn accept_with_deadline(listener: &TcpListener, deadline: Instant) -> io::Result<TcpStream> {
    listener.set_nonblocking(true)?;
    loop {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                return Ok(stream);
            }
            Err(ref e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(io::Error::new(io::ErrorKind::TimedOut, "ring accept timed out"));
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e),
        }
    }
}

// ---------------------------------------------------------------------------
// Task registry
// ---------------------------------------------------------------------------

pub type TaskFn = fn(&mut WorkerCtx, &[u8]) -> Result<Vec<u8>, String>;

/// Static table of tasks both ends agree on by name. Dispatch is by name,
/// never by serialized code.
pub fn task_table() -> &'static [(&'static str, TaskFn)] {
    &[
        ("echo", tasks::echo),
        ("__barrier", tasks::barrier_task),
        ("sleep_barrier", tasks::sleep_barrier),
        ("broadcast_digest", tasks::broadcast_digest),
        ("scatter_rows", tasks::scatter_rows),
        ("allreduce_probe", tasks::allreduce_probe),
        ("allreduce_fixed", tasks::allreduce_fixed),
        ("fail_on", tasks::fail_on),
        ("train_epoch", crate::estimator::tasks::train_epoch),
        ("predict_partition", crate::estimator::tasks::predict_partition),
        ("evaluate_partition", crate::estimator::tasks::evaluate_partition),
        ("fit_init", crate::estimator::tasks::fit_init),
        ("fetch_params", crate::estimator::tasks::fetch_params),
    ]
}

pub fn find_task(name: &str) -> Option<TaskFn> {
    task_table()
        .iter()
        .find(|(task_name, _)| *task_name == name)
        .map(|(_, f)| *f)
}

/// Deterministic per-worker probe vector for allreduce tests: uniform values
/// in [1, 1000) so relative-error comparisons never fight cancellation.
pub fn probe_vector(seed: u64, worker_id: usize, len: usize) -> Vec<f32> {
    let stream = seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(worker_id as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let dist = Uniform::new(1.0f32, 1000.0f32);
    (0..len).map(|_| dist.sample(&mut rng)).collect()
}

mod tasks {
    use super::*;
    use sha2::{Digest, Sha256};

    /// Returns this worker's id as u32 little-endian.
    pub fn echo(ctx: &mut WorkerCtx, _args: &[u8]) -> Result<Vec<u8>, String> {
        Ok((ctx.worker_id as u32).to_le_bytes().to_vec())
    }

    pub fn barrier_task(ctx: &mut WorkerCtx, _args: &[u8]) -> Result<Vec<u8>, String> {
        ctx.barrier()?;
        Ok(Vec::new())
    }

    /// Args: one u32 delay in milliseconds per worker. Sleeps its own delay,
    /// enters the barrier, and reports milliseconds spent from task start to
    /// barrier return.
    pub fn sleep_barrier(ctx: &mut WorkerCtx, args: &[u8]) -> Result<Vec<u8>, String> {
        let mut r = PayloadReader::new(args);
        let count = r.u32().map_err(|e| e.to_string())? as usize;
        if count != ctx.n_workers {
            return Err(format!("{count} delays for {} workers", ctx.n_workers));
        }
        let mut delay_ms = 0;
        for i in 0..count {
            let v = r.u32().map_err(|e| e.to_string())?;
            if i == ctx.worker_id {
                delay_ms = v;
            }
        }
        let start = Instant::now();
        thread::sleep(Duration::from_millis(delay_ms as u64));
        ctx.barrier()?;
        let elapsed = start.elapsed().as_millis() as u64;
        Ok(elapsed.to_le_bytes().to_vec())
    }

    /// SHA-256 of the latest broadcast payload.
    pub fn broadcast_digest(ctx: &mut WorkerCtx, _args: &[u8]) -> Result<Vec<u8>, String> {
        let data = ctx
            .broadcast_data()
            .ok_or_else(|| "nothing has been broadcast".to_string())?;
        Ok(Sha256::digest(data.as_slice()).to_vec())
    }

    /// Row count of the scattered partition as u32 little-endian.
    pub fn scatter_rows(ctx: &mut WorkerCtx, _args: &[u8]) -> Result<Vec<u8>, String> {
        let batch = ctx.scattered_batch()?;
        Ok((batch.len() as u32).to_le_bytes().to_vec())
    }

    /// Args: u64 seed, u32 length, u8 op code. Builds this worker's
    /// deterministic probe vector, allreduces it, and returns the cumulative
    /// round count followed by the result vector.
    pub fn allreduce_probe(ctx: &mut WorkerCtx, args: &[u8]) -> Result<Vec<u8>, String> {
        let mut r = PayloadReader::new(args);
        let seed = r.u64().map_err(|e| e.to_string())?;
        let len = r.u32().map_err(|e| e.to_string())? as usize;
        let op = ReduceOp::from_code(r.u8().map_err(|e| e.to_string())?)
            .ok_or_else(|| "bad reduce op code".to_string())?;
        let local = probe_vector(seed, ctx.worker_id, len);
        let before = ctx.rounds();
        let reduced = ctx.allreduce(&local, op)?;
        let rounds = ctx.rounds() - before;
        let mut w = PayloadWriter::new();
        w.u64(rounds).f32s(&reduced);
        Ok(w.finish())
    }

    /// Args: u8 op code, then one f32 vector per worker. Each worker reduces
    /// its own vector and returns the result.
    pub fn allreduce_fixed(ctx: &mut WorkerCtx, args: &[u8]) -> Result<Vec<u8>, String> {
        let mut r = PayloadReader::new(args);
        let op = ReduceOp::from_code(r.u8().map_err(|e| e.to_string())?)
            .ok_or_else(|| "bad reduce op code".to_string())?;
        let mut local = None;
        for i in 0..ctx.n_workers {
            let v = r.f32s().map_err(|e| e.to_string())?;
            if i == ctx.worker_id {
                local = Some(v);
            }
        }
        let local = local.ok_or_else(|| "missing vector for this worker".to_string())?;
        let reduced = ctx.allreduce(&local, op)?;
        let mut w = PayloadWriter::new();
        w.f32s(&reduced);
        Ok(w.finish())
    }

    /// Args: u32 worker id that must fail. Everyone else succeeds.
    pub fn fail_on(ctx: &mut WorkerCtx, args: &[u8]) -> Result<Vec<u8>, String> {
        let mut r = PayloadReader::new(args);
        let victim = r.u32().map_err(|e| e.to_string())? as usize;
        if ctx.worker_id == victim {
            Err(format!("injected failure on worker {victim}"))
        } else {
            Ok(Vec::new())
        }
    }
}
