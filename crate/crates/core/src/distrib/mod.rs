//! Blockwise kernel and gradient computation spread over a pool of workers.
//!
//! The server cuts `K(X, Y)` into tiles of at most `B × B` pairs, ships each
//! tile as a [`BlockTask`] through a shared FIFO queue and reduces the
//! answers in tile order, so results never depend on which worker finished
//! first. Workers are threads in this process or remote processes speaking
//! the frame protocol in [`wire`].

use std::collections::HashMap;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::images::ImageSet;
use crate::kernel_grad::{kernel_block_vjp_sides, KernelBackend, Sides};
use crate::kernels::{kernel_matrix, Family, KernelSpec};

pub mod wire;

#[cfg(test)]
mod tests;

/// Failed attempts beyond the first before a task aborts the assembly.
pub const MAX_RETRIES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Backward,
}

/// One tile of work: a kernel block, or a cotangent contraction of one.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTask {
    pub task_id: u64,
    pub phase: Phase,
    pub spec: KernelSpec,
    pub x_block: ImageSet,
    pub y_block: ImageSet,
    /// Present exactly for backward tasks.
    pub cotangent: Option<DMatrix<f64>>,
    /// Image gradients wanted by a backward task.
    pub sides: Sides,
    /// Row and column offset of the tile in the full matrix.
    pub coords: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Kernel(DMatrix<f64>),
    Gradients { x: Vec<f64>, y: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockResult {
    pub task_id: u64,
    pub payload: Payload,
    pub worker_id: u32,
    pub elapsed_ms: u64,
}

/// Tile of the `rows × cols` grid starting at `(row, col)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Row-major cover of an `n_rows × n_cols` grid by tiles of at most `b × b`.
pub fn partition(n_rows: usize, n_cols: usize, b: usize) -> Vec<Tile> {
    assert!(b >= 1, "block size must be at least 1");
    let mut out = Vec::with_capacity(n_rows.div_ceil(b) * n_cols.div_ceil(b));
    for row in (0..n_rows).step_by(b) {
        for col in (0..n_cols).step_by(b) {
            out.push(Tile {
                row,
                col,
                rows: b.min(n_rows - row),
                cols: b.min(n_cols - col),
            });
        }
    }
    out
}

/// Block size for a kernel on images of `shape`: conv tiles cost
/// `(HW)²` per pair, so they shrink with the image.
pub fn default_block_size(spec: &KernelSpec, shape: (usize, usize, usize)) -> usize {
    match spec.family {
        Family::Fc => 256,
        _ => {
            let hw = (shape.0 * shape.1).max(1) as f64;
            ((16.0 * 1024.0 / hw) as usize).clamp(1, 256)
        }
    }
}

impl BlockTask {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.x_block.len(), self.y_block.len());
        match (self.phase, &self.cotangent) {
            (Phase::Forward, None) => Ok(()),
            (Phase::Backward, Some(ct)) if ct.shape() == (n, m) => Ok(()),
            (Phase::Backward, Some(ct)) => Err(Error::ShapeMismatch(format!(
                "cotangent is {}x{} for a {n}x{m} block",
                ct.nrows(),
                ct.ncols()
            ))),
            (Phase::Forward, Some(_)) => Err(Error::ProtocolError("forward task carries a cotangent".into())),
            (Phase::Backward, None) => Err(Error::ProtocolError("backward task without cotangent".into())),
        }
    }
}

/// Computes one task in this process.
pub fn execute(task: &BlockTask, worker_id: u32) -> Result<BlockResult> {
    let start = Instant::now();
    task.validate()?;
    let payload = match &task.cotangent {
        None => Payload::Kernel(kernel_matrix(&task.x_block, &task.y_block, &task.spec)?),
        Some(ct) => {
            let (x, y) = kernel_block_vjp_sides(&task.x_block, &task.y_block, &task.spec, ct, task.sides)?;
            Payload::Gradients { x, y }
        }
    };
    Ok(BlockResult {
        task_id: task.task_id,
        payload,
        worker_id,
        elapsed_ms: start.elapsed().as_millis() as u64,
    })
}

/// Something that runs a batch of tasks to completion.
pub trait Executor: Sync {
    /// Results come back ordered like `tasks`.
    fn run(&self, tasks: Vec<BlockTask>) -> Result<Vec<BlockResult>>;
}

/// Runs every task on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Inline;

impl Executor for Inline {
    fn run(&self, tasks: Vec<BlockTask>) -> Result<Vec<BlockResult>> {
        tasks.iter().map(|t| execute(t, 0)).collect()
    }
}

/// What an injected fault does to a worker about to run a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Report a failure and keep serving.
    Fail,
    /// Drop the task and exit the worker thread.
    Die,
}

/// Called with (worker id, task id, attempt) before each task.
pub type FaultHook = Arc<dyn Fn(u32, u64, usize) -> Fault + Send + Sync>;

enum Outcome {
    Done(BlockResult),
    Failed { task_id: u64, attempt: usize, reason: String },
}

struct Job {
    task: Arc<BlockTask>,
    attempt: usize,
    reply: Sender<Outcome>,
    cancelled: Arc<AtomicBool>,
}

/// Reports a failure for the job if it is dropped before an answer is sent,
/// which covers workers that die or panic while holding it.
struct Claim(Option<Job>);

impl Claim {
    fn job(&self) -> &Job {
        self.0.as_ref().expect("claim already answered")
    }

    fn answer(mut self, outcome: Outcome) {
        if let Some(job) = self.0.take() {
            let _ = job.reply.send(outcome);
        }
    }
}

impl Drop for Claim {
    fn drop(&mut self) {
        if let Some(job) = self.0.take() {
            let _ = job.reply.send(Outcome::Failed {
                task_id: job.task.task_id,
                attempt: job.attempt,
                reason: "worker lost".into(),
            });
        }
    }
}

struct Alive(Arc<AtomicUsize>);

impl Alive {
    fn enlist(count: &Arc<AtomicUsize>) -> Self {
        count.fetch_add(1, Ordering::SeqCst);
        Alive(count.clone())
    }
}

impl Drop for Alive {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// FIFO work queue shared by local threads and remote connections.
pub struct WorkerPool {
    jobs: Option<Sender<Job>>,
    queue: Receiver<Job>,
    alive: Arc<AtomicUsize>,
    next_worker: Arc<AtomicU32>,
    stop: Arc<AtomicBool>,
    locals: Mutex<Vec<JoinHandle<()>>>,
    remotes: Arc<Mutex<Vec<JoinHandle<()>>>>,
    addr: Option<SocketAddr>,
    /// How long a run waits with no live workers before giving up.
    pub stall_timeout: Duration,
}

impl WorkerPool {
    fn empty() -> Self {
        let (jobs, queue) = unbounded();
        WorkerPool {
            jobs: Some(jobs),
            queue,
            alive: Arc::new(AtomicUsize::new(0)),
            next_worker: Arc::new(AtomicU32::new(0)),
            stop: Arc::new(AtomicBool::new(false)),
            locals: Mutex::new(Vec::new()),
            remotes: Arc::new(Mutex::new(Vec::new())),
            addr: None,
            stall_timeout: Duration::from_secs(30),
        }
    }

    /// `workers` threads in this process.
    pub fn local(workers: usize) -> Self {
        Self::local_with_faults(workers, None)
    }

    pub fn local_with_faults(workers: usize, faults: Option<FaultHook>) -> Self {
        let pool = Self::empty();
        for _ in 0..workers {
            pool.spawn_local(faults.clone());
        }
        pool
    }

    /// Adds one worker thread.
    pub fn spawn_local(&self, faults: Option<FaultHook>) {
        let id = self.next_worker.fetch_add(1, Ordering::SeqCst);
        let queue = self.queue.clone();
        let alive = Alive::enlist(&self.alive);
        let handle = thread::spawn(move || local_worker(id, queue, alive, faults));
        self.locals.lock().expect("pool lock").push(handle);
    }

    /// Listens on `endpoint`; every worker that connects joins the pool.
    pub fn serve(endpoint: impl ToSocketAddrs, heartbeat: Duration) -> Result<Self> {
        let listener = TcpListener::bind(endpoint)?;
        listener.set_nonblocking(true)?;
        let mut pool = Self::empty();
        pool.addr = Some(listener.local_addr()?);
        let queue = pool.queue.clone();
        let alive = pool.alive.clone();
        let ids = pool.next_worker.clone();
        let stop = pool.stop.clone();
        let remotes = pool.remotes.clone();
        thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let id = ids.fetch_add(1, Ordering::SeqCst);
                        log::info!("worker {id} connected from {peer}");
                        let guard = Alive::enlist(&alive);
                        let queue = queue.clone();
                        let handle = thread::spawn(move || remote_worker(id, stream, queue, guard, heartbeat));
                        remotes.lock().expect("pool lock").push(handle);
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        thread::sleep(Duration::from_millis(20));
                    }
                }
            }
        });
        Ok(pool)
    }

    /// Address a served pool listens on.
    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.addr
    }

    pub fn live_workers(&self) -> usize {
        self.alive.load(Ordering::SeqCst)
    }

    /// Blocks until at least `n` workers are live.
    pub fn wait_for_workers(&self, n: usize, timeout: Duration) -> Result<()> {
        let deadline = Instant::now() + timeout;
        while self.live_workers() < n {
            if Instant::now() >= deadline {
                return Err(Error::WorkerFailure(0));
            }
            thread::sleep(Duration::from_millis(10));
        }
        Ok(())
    }

    fn submit(&self, job: Job) {
        self.jobs.as_ref().expect("pool open").send(job).expect("queue receiver held by pool");
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.jobs = None;
        for h in self.locals.get_mut().expect("pool lock").drain(..) {
            let _ = h.join();
        }
        // remote handlers notice the closed queue and send Shutdown; give them
        // a moment to flush it, but never hang on a wedged connection
        let deadline = Instant::now() + Duration::from_secs(5);
        let remotes = std::mem::take(&mut *self.remotes.lock().expect("pool lock"));
        for h in remotes {
            while !h.is_finished() && Instant::now() < deadline {
                thread::sleep(Duration::from_millis(5));
            }
            if h.is_finished() {
                let _ = h.join();
            }
        }
    }
}

impl Executor for WorkerPool {
    fn run(&self, tasks: Vec<BlockTask>) -> Result<Vec<BlockResult>> {
        let (reply, answers) = unbounded();
        let cancelled = Arc::new(AtomicBool::new(false));
        let tasks: Vec<Arc<BlockTask>> = tasks.into_iter().map(Arc::new).collect();
        let position: HashMap<u64, usize> = tasks.iter().enumerate().map(|(i, t)| (t.task_id, i)).collect();
        if position.len() != tasks.len() {
            return Err(Error::ProtocolError("duplicate task ids".into()));
        }
        let job = |task: &Arc<BlockTask>, attempt| Job {
            task: task.clone(),
            attempt,
            reply: reply.clone(),
            cancelled: cancelled.clone(),
        };
        for t in &tasks {
            self.submit(job(t, 0));
        }
        let mut results: Vec<Option<BlockResult>> = vec![None; tasks.len()];
        let mut remaining = tasks.len();
        let mut stalled_since: Option<Instant> = None;
        let abort = |e: Error| {
            cancelled.store(true, Ordering::SeqCst);
            Err(e)
        };
        while remaining > 0 {
            match answers.recv_timeout(Duration::from_millis(50)) {
                Ok(Outcome::Done(r)) => {
                    let Some(&i) = position.get(&r.task_id) else {
                        return abort(Error::ProtocolError(format!("result for unknown task {}", r.task_id)));
                    };
                    // a retried task may finish twice; the first answer wins
                    if results[i].is_none() {
                        results[i] = Some(r);
                        remaining -= 1;
                    }
                }
                Ok(Outcome::Failed { task_id, attempt, reason }) => {
                    let i = position[&task_id];
                    if results[i].is_some() {
                        continue;
                    }
                    log::warn!("task {task_id} attempt {attempt} failed: {reason}");
                    if attempt >= MAX_RETRIES {
                        return abort(Error::AssemblyAborted {
                            task_id,
                            attempts: attempt + 1,
                        });
                    }
                    self.submit(job(&tasks[i], attempt + 1));
                }
                Err(RecvTimeoutError::Timeout) => {
                    if self.live_workers() > 0 {
                        stalled_since = None;
                    } else if stalled_since.get_or_insert_with(Instant::now).elapsed() > self.stall_timeout {
                        let missing = results.iter().position(Option::is_none).unwrap_or(0);
                        return abort(Error::WorkerFailure(tasks[missing].task_id));
                    }
                }
                Err(RecvTimeoutError::Disconnected) => unreachable!("run holds a reply sender"),
            }
        }
        Ok(results.into_iter().map(|r| r.expect("all tasks answered")).collect())
    }
}

fn local_worker(id: u32, queue: Receiver<Job>, _alive: Alive, faults: Option<FaultHook>) {
    while let Ok(job) = queue.recv() {
        if job.cancelled.load(Ordering::SeqCst) {
            continue;
        }
        let claim = Claim(Some(job));
        let (task, attempt) = (claim.job().task.clone(), claim.job().attempt);
        match faults.as_ref().map_or(Fault::None, |f| f(id, task.task_id, attempt)) {
            Fault::None => {}
            Fault::Fail => {
                claim.answer(Outcome::Failed {
                    task_id: task.task_id,
                    attempt,
                    reason: "injected failure".into(),
                });
                continue;
            }
            Fault::Die => {
                log::warn!("worker {id} killed on task {}", task.task_id);
                return;
            }
        }
        let outcome = match execute(&task, id) {
            Ok(r) => Outcome::Done(r),
            Err(e) => Outcome::Failed {
                task_id: task.task_id,
                attempt,
                reason: e.to_string(),
            },
        };
        claim.answer(outcome);
    }
}

fn remote_worker(id: u32, mut stream: TcpStream, queue: Receiver<Job>, _alive: Alive, heartbeat: Duration) {
    use wire::{read_message, write_message, Message};
    if let Err(e) = stream.set_nonblocking(false).and_then(|_| stream.set_nodelay(true)) {
        log::warn!("worker {id}: {e}");
        return;
    }
    loop {
        let job = match queue.recv_timeout(heartbeat) {
            Ok(job) => job,
            Err(RecvTimeoutError::Timeout) => {
                if write_message(&mut stream, &Message::Heartbeat).is_err() {
                    log::warn!("worker {id} went away");
                    return;
                }
                continue;
            }
            Err(RecvTimeoutError::Disconnected) => {
                let _ = write_message(&mut stream, &Message::Shutdown);
                return;
            }
        };
        if job.cancelled.load(Ordering::SeqCst) {
            continue;
        }
        let claim = Claim(Some(job));
        let (task, attempt) = (claim.job().task.clone(), claim.job().attempt);
        let sent = write_message(&mut stream, &Message::Task((*task).clone()));
        let reply = sent.and_then(|_| loop {
            match read_message(&mut stream)? {
                Message::Heartbeat => continue,
                other => break Ok(other),
            }
        });
        match reply {
            Ok(Message::Result(mut r)) if r.task_id == task.task_id => {
                r.worker_id = id;
                claim.answer(Outcome::Done(r));
            }
            Ok(Message::Failure { task_id, reason }) if task_id == task.task_id => claim.answer(Outcome::Failed {
                task_id,
                attempt,
                reason,
            }),
            Ok(other) => {
                log::warn!("worker {id} sent an unexpected {other:?}");
                return;
            }
            Err(e) => {
                log::warn!("worker {id} lost: {e}");
                return;
            }
        }
    }
}

/// Why a worker loop ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WorkerExit {
    Shutdown,
    IdleTimeout,
}

/// Connects to a server and computes tasks until told to stop; gives up
/// after `idle_timeout` without any frame from the server.
pub fn worker_connect(endpoint: impl ToSocketAddrs, idle_timeout: Duration) -> Result<WorkerExit> {
    use wire::{read_message, write_message, Message};
    let mut stream = TcpStream::connect(endpoint)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(idle_timeout))?;
    loop {
        let msg = match read_message(&mut stream) {
            Ok(m) => m,
            Err(Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                log::info!("no frame for {idle_timeout:?}, disconnecting");
                return Ok(WorkerExit::IdleTimeout);
            }
            Err(e) => return Err(e),
        };
        match msg {
            Message::Task(task) => {
                let answer = match execute(&task, 0) {
                    Ok(r) => Message::Result(r),
                    Err(e) => Message::Failure {
                        task_id: task.task_id,
                        reason: e.to_string(),
                    },
                };
                write_message(&mut stream, &answer)?;
            }
            Message::Heartbeat => {}
            Message::Shutdown => return Ok(WorkerExit::Shutdown),
            other => return Err(Error::ProtocolError(format!("worker received {other:?}"))),
        }
    }
}

/// `K(X, Y)` assembled from `b × b` tiles.
pub fn assemble_forward(x: &ImageSet, y: &ImageSet, spec: &KernelSpec, pool: &dyn Executor, b: usize) -> Result<DMatrix<f64>> {
    let tiles = partition(x.len(), y.len(), b);
    let tasks = tiles
        .iter()
        .enumerate()
        .map(|(id, t)| BlockTask {
            task_id: id as u64,
            phase: Phase::Forward,
            spec: *spec,
            x_block: x.range(t.row, t.row + t.rows),
            y_block: y.range(t.col, t.col + t.cols),
            cotangent: None,
            sides: Sides::Both,
            coords: (t.row, t.col),
        })
        .collect();
    let results = pool.run(tasks)?;
    let mut out = DMatrix::zeros(x.len(), y.len());
    for (t, r) in tiles.iter().zip(&results) {
        let Payload::Kernel(k) = &r.payload else {
            return Err(Error::ProtocolError(format!("task {} returned gradients", r.task_id)));
        };
        if k.shape() != (t.rows, t.cols) || k.iter().any(|v| !v.is_finite()) {
            return Err(Error::ProtocolError(format!("task {} returned a malformed block", r.task_id)));
        }
        out.view_mut((t.row, t.col), (t.rows, t.cols)).copy_from(k);
    }
    Ok(out)
}

struct VjpJob<'a> {
    x: &'a ImageSet,
    y: &'a ImageSet,
    ct: &'a DMatrix<f64>,
    sides: Sides,
}

/// Sums tile VJPs of several cotangent blocks sharing `grads.len()` output
/// buffers, in task order.
fn assemble_vjps(jobs: &[VjpJob], spec: &KernelSpec, pool: &dyn Executor, b: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut tasks = Vec::new();
    let mut placed = Vec::new();
    for (j, job) in jobs.iter().enumerate() {
        for t in partition(job.x.len(), job.y.len(), b) {
            let ct = job.ct.view((t.row, t.col), (t.rows, t.cols)).into_owned();
            if ct.iter().all(|&v| v == 0.0) {
                continue;
            }
            tasks.push(BlockTask {
                task_id: tasks.len() as u64,
                phase: Phase::Backward,
                spec: *spec,
                x_block: job.x.range(t.row, t.row + t.rows),
                y_block: job.y.range(t.col, t.col + t.cols),
                cotangent: Some(ct),
                sides: job.sides,
                coords: (t.row, t.col),
            });
            placed.push((j, t));
        }
    }
    let results = pool.run(tasks)?;
    let mut out: Vec<(Vec<f64>, Vec<f64>)> = jobs
        .iter()
        .map(|j| {
            let gx = if j.sides != Sides::Y { vec![0.0; j.x.pixels().len()] } else { Vec::new() };
            let gy = if j.sides != Sides::X { vec![0.0; j.y.pixels().len()] } else { Vec::new() };
            (gx, gy)
        })
        .collect();
    for ((j, t), r) in placed.iter().zip(&results) {
        let Payload::Gradients { x: gx, y: gy } = &r.payload else {
            return Err(Error::ProtocolError(format!("task {} returned a kernel block", r.task_id)));
        };
        let (dim_x, dim_y) = (jobs[*j].x.image_len(), jobs[*j].y.image_len());
        let (ox, oy) = &mut out[*j];
        add_rows(ox, gx, t.row * dim_x, t.rows * dim_x, r.task_id)?;
        add_rows(oy, gy, t.col * dim_y, t.cols * dim_y, r.task_id)?;
    }
    Ok(out)
}

fn add_rows(dst: &mut [f64], src: &[f64], offset: usize, len: usize, task_id: u64) -> Result<()> {
    if dst.is_empty() {
        return Ok(());
    }
    if src.len() != len || src.iter().any(|v| !v.is_finite()) {
        return Err(Error::ProtocolError(format!("task {task_id} returned a malformed gradient")));
    }
    for (d, s) in dst[offset..offset + len].iter_mut().zip(src) {
        *d += s;
    }
    Ok(())
}

/// Blockwise VJP of `K(X, Y)` against `cotangent`.
pub fn assemble_vjp(
    x: &ImageSet,
    y: &ImageSet,
    spec: &KernelSpec,
    cotangent: &DMatrix<f64>,
    sides: Sides,
    pool: &dyn Executor,
    b: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if cotangent.shape() != (x.len(), y.len()) {
        return Err(Error::ShapeMismatch(format!(
            "cotangent is {}x{} for a {}x{} kernel",
            cotangent.nrows(),
            cotangent.ncols(),
            x.len(),
            y.len()
        )));
    }
    let job = VjpJob { x, y, ct: cotangent, sides };
    Ok(assemble_vjps(&[job], spec, pool, b)?.pop().expect("one job"))
}

/// Gradient with respect to the support images of `⟨dL/dK_ss, K_ss⟩ +
/// ⟨dL/dK_ts, K_ts⟩`; support-support tiles feed both of their slots.
pub fn assemble_backward(
    xs: &ImageSet,
    xt: &ImageSet,
    spec: &KernelSpec,
    d_kss: &DMatrix<f64>,
    d_kts: &DMatrix<f64>,
    pool: &dyn Executor,
    b: usize,
) -> Result<Vec<f64>> {
    if d_kss.shape() != (xs.len(), xs.len()) || d_kts.shape() != (xt.len(), xs.len()) {
        return Err(Error::ShapeMismatch("cotangents do not match the kernel matrices".into()));
    }
    let jobs = [
        VjpJob {
            x: xs,
            y: xs,
            ct: d_kss,
            sides: Sides::Both,
        },
        VjpJob {
            x: xt,
            y: xs,
            ct: d_kts,
            sides: Sides::Y,
        },
    ];
    let mut parts = assemble_vjps(&jobs, spec, pool, b)?.into_iter();
    let (mut g, g2) = parts.next().expect("kss part");
    for (a, v) in g.iter_mut().zip(&g2) {
        *a += v;
    }
    let (_, g3) = parts.next().expect("kts part");
    for (a, v) in g.iter_mut().zip(&g3) {
        *a += v;
    }
    Ok(g)
}

/// Kernel backend evaluating every matrix and VJP through an executor.
pub struct Distributed<'a> {
    pub pool: &'a dyn Executor,
    /// Tile size; `None` picks [`default_block_size`].
    pub block: Option<usize>,
}

impl Distributed<'_> {
    fn block(&self, spec: &KernelSpec, x: &ImageSet) -> usize {
        self.block.unwrap_or_else(|| default_block_size(spec, x.shape()))
    }
}

impl KernelBackend for Distributed<'_> {
    fn kernel_matrix(&self, x: &ImageSet, y: &ImageSet, spec: &KernelSpec) -> Result<DMatrix<f64>> {
        assemble_forward(x, y, spec, self.pool, self.block(spec, x))
    }

    fn vjp(
        &self,
        x: &ImageSet,
        y: &ImageSet,
        spec: &KernelSpec,
        cotangent: &DMatrix<f64>,
        sides: Sides,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        assemble_vjp(x, y, spec, cotangent, sides, self.pool, self.block(spec, x))
    }
}
