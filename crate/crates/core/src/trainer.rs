//! Data-parallel master/worker training.
//!
//! The patterns are split into one contiguous shard per worker. A pass runs
//! in two steps. First a discrete-event model of the chunk protocol decides
//! how many rows each worker gets through: workers step through their shard
//! `chunk_size` rows at a time, poll the master after every chunk and stop
//! when the master has seen `halt_fraction` of all patterns. Then the workers
//! compute exactly those rows and the master sums their partial results in
//! worker order.
//!
//! Because the schedule comes from the model and not from thread timing,
//! both backends produce bit-identical results.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::ops::Range;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cluster::{logn_reduce_seconds, CostModel};
use crate::error::{shape_err, Error, Result};
use crate::gemm::Kernel;
use crate::matcore::Mat32;
use crate::nn::{self, Batch, GradResult, MlpParams, NetShape};
use crate::optim::{sample_stride, slope_of, Evaluation, LineObjective};

/// Environment variable capping the number of OS threads.
pub const THREADS_ENV: &str = "ULSNN_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Workers run one after another on the calling thread.
    #[default]
    Simulated,
    /// Workers run on OS threads and talk over channels.
    Threads,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerCfg {
    pub workers: usize,
    pub chunk_size: usize,
    pub halt_fraction: f32,
    pub backend: Backend,
    /// Worker 0 runs on the master's own thread.
    pub master_computes: bool,
    /// Upper bound on OS threads; `ULSNN_THREADS` lowers it further.
    pub threads: Option<usize>,
    /// One-way message latency in the schedule model, seconds.
    pub poll_latency: f64,
    /// Relative slowness per worker in the schedule model; empty is uniform.
    pub speed_factors: Vec<f64>,
    /// Flop rate of one worker in the schedule model.
    pub model_flops_per_sec: f64,
}

impl Default for TrainerCfg {
    fn default() -> Self {
        TrainerCfg {
            workers: 4,
            chunk_size: 320,
            halt_fraction: 0.8,
            backend: Backend::Simulated,
            master_computes: true,
            threads: None,
            poll_latency: 0.0,
            speed_factors: Vec::new(),
            model_flops_per_sec: 1e9,
        }
    }
}

impl TrainerCfg {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Invalid("workers must be at least 1".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::Invalid("chunk_size must be at least 1".into()));
        }
        if !(self.halt_fraction > 0.0 && self.halt_fraction <= 1.0) {
            return Err(Error::Invalid(format!(
                "halt_fraction must be in (0, 1], got {}",
                self.halt_fraction
            )));
        }
        if !(self.poll_latency >= 0.0 && self.poll_latency.is_finite()) {
            return Err(Error::Invalid("poll_latency must be non-negative".into()));
        }
        if !self.speed_factors.is_empty() && self.speed_factors.len() != self.workers {
            return Err(Error::Invalid(format!(
                "{} speed factors for {} workers",
                self.speed_factors.len(),
                self.workers
            )));
        }
        if self.speed_factors.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(Error::Invalid("speed factors must be positive".into()));
        }
        if !(self.model_flops_per_sec > 0.0) {
            return Err(Error::Invalid("model_flops_per_sec must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Invalid("threads must be at least 1".into()));
        }
        Ok(())
    }

    fn speed(&self, w: usize) -> f64 {
        self.speed_factors.get(w).copied().unwrap_or(1.0)
    }
}

/// Contiguous shards whose sizes differ by at most one, larger ones first.
/// Surplus workers get empty ranges.
pub fn partition(n_p: usize, workers: usize) -> Vec<Range<usize>> {
    let workers = workers.max(1);
    let base = n_p / workers;
    let extra = n_p % workers;
    let mut start = 0;
    (0..workers)
        .map(|w| {
            let len = base + usize::from(w < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKind {
    Error,
    Gradient,
}

/// Outcome of the chunk-polling model for one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    /// Rows each worker processes, always a prefix of its shard.
    pub consumed: Vec<usize>,
    /// Model time at which each worker finished its last chunk.
    pub finish: Vec<f64>,
    /// When the master's count crossed the threshold.
    pub halt_time: Option<f64>,
    pub makespan: f64,
    pub polls: usize,
    /// Model time of one full chunk on the slowest worker.
    pub chunk_seconds: f64,
}

impl Schedule {
    pub fn total(&self) -> usize {
        self.consumed.iter().sum()
    }

    /// Spread of finish times over the workers that did any work.
    pub fn idle_spread(&self) -> f64 {
        let active = self.consumed.iter().zip(&self.finish).filter(|(&c, _)| c > 0).map(|(_, &f)| f);
        let (lo, hi) = active.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| (lo.min(f), hi.max(f)));
        if lo.is_finite() {
            hi - lo
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Event {
    ChunkDone { worker: usize, rows: usize },
    PollArrive { worker: usize, rows: usize },
    Reply { worker: usize, halt: bool },
}

struct Timed {
    time: f64,
    seq: u64,
    event: Event,
}

impl PartialEq for Timed {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Timed {}

impl PartialOrd for Timed {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Timed {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

/// Runs the chunk-polling protocol on a virtual clock.
///
/// `row_seconds[w]` is the time worker `w` needs per row. After each chunk a
/// worker sends its row count to the master and waits for the reply; the
/// master answers "halt" once it has counted `halt_fraction` of all rows, and
/// a worker whose shard is exhausted is told to halt as well.
pub fn simulate_schedule(
    sizes: &[usize],
    row_seconds: &[f64],
    chunk_size: usize,
    halt_fraction: f32,
    latency: f64,
) -> Result<Schedule> {
    if row_seconds.len() != sizes.len() {
        return Err(shape_err("simulate_schedule", "one row time per worker is required"));
    }
    if chunk_size == 0 {
        return Err(Error::Invalid("chunk_size must be at least 1".into()));
    }
    let n: usize = sizes.iter().sum();
    let target = f64::from(halt_fraction) * n as f64;
    let mut consumed = vec![0usize; sizes.len()];
    let mut finish = vec![0.0f64; sizes.len()];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |heap: &mut BinaryHeap<Timed>, time: f64, event: Event| {
        heap.push(Timed { time, seq, event });
        seq += 1;
    };
    let chunk_rows = |w: usize, done: usize| chunk_size.min(sizes[w] - done);
    for w in 0..sizes.len() {
        if sizes[w] > 0 {
            let rows = chunk_rows(w, 0);
            push(&mut heap, rows as f64 * row_seconds[w], Event::ChunkDone { worker: w, rows });
        }
    }
    let mut counted = 0usize;
    let mut halt_time = None;
    let mut polls = 0usize;
    while let Some(Timed { time, event, .. }) = heap.pop() {
        match event {
            Event::ChunkDone { worker, rows } => {
                consumed[worker] += rows;
                finish[worker] = time;
                push(&mut heap, time + latency, Event::PollArrive { worker, rows });
            }
            Event::PollArrive { worker, rows } => {
                counted += rows;
                polls += 1;
                if halt_time.is_none() && counted as f64 >= target {
                    halt_time = Some(time);
                }
                let halt = halt_time.is_some() || consumed[worker] == sizes[worker];
                push(&mut heap, time + latency, Event::Reply { worker, halt });
            }
            Event::Reply { worker, halt } => {
                if !halt {
                    let rows = chunk_rows(worker, consumed[worker]);
                    push(&mut heap, time + rows as f64 * row_seconds[worker], Event::ChunkDone { worker, rows });
                }
            }
        }
    }
    let makespan = finish.iter().copied().fold(0.0, f64::max);
    let chunk_seconds = row_seconds.iter().copied().fold(0.0, f64::max) * chunk_size as f64;
    Ok(Schedule {
        consumed,
        finish,
        halt_time,
        makespan,
        polls,
        chunk_seconds,
    })
}

/// Contributing flops and the wall time they took.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct FlopLedger {
    pub contributing_flops: u64,
    pub wall_seconds: f64,
    pub gflops_rate: f64,
}

impl FlopLedger {
    pub fn new(contributing_flops: u64, wall_seconds: f64) -> Self {
        let mut l = FlopLedger {
            contributing_flops,
            wall_seconds,
            gflops_rate: 0.0,
        };
        l.refresh();
        l
    }

    pub fn record(&mut self, flops: u64, seconds: f64) {
        self.contributing_flops += flops;
        self.wall_seconds += seconds;
        self.refresh();
    }

    fn refresh(&mut self) {
        self.gflops_rate = if self.wall_seconds > 0.0 {
            self.contributing_flops as f64 / self.wall_seconds / 1e9
        } else {
            0.0
        };
    }
}

/// Per-process flops of one error pass and one gradient pass when
/// `halt_fraction` of `n_p` patterns are spread over `procs` processes.
pub fn per_process_pass_flops(shape: NetShape, n_p: usize, halt_fraction: f64, procs: usize) -> Result<(f64, f64)> {
    if procs == 0 {
        return Err(Error::Invalid("procs must be at least 1".into()));
    }
    let e = shape.error_flops(n_p)? as f64 * halt_fraction / procs as f64;
    let g = shape.gradient_flops(n_p)? as f64 * halt_fraction / procs as f64;
    Ok((e, g))
}

/// CRC-32 of little-endian `f32` values.
pub fn crc_f32(v: &[f32]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for x in v {
        h.update(&x.to_le_bytes());
    }
    h.finalize()
}

#[derive(Clone, Debug)]
enum Command {
    Params { flat: Arc<Vec<f32>>, checksum: u32 },
    Direction { d: Arc<Vec<f32>>, checksum: u32 },
    Compute { kind: PassKind, step: f32, rows: usize, stride: usize },
    Commit { step: f32 },
    FailNextCompute,
    Shutdown,
}

#[derive(Clone, Debug)]
enum Partial {
    Error { error: f64, n_patterns: usize, flops: u64 },
    Grad(GradResult),
}

#[derive(Debug)]
enum ReplyBody {
    Ack(u32),
    Nack,
    Partial(Partial),
    Failed(String),
}

#[derive(Debug)]
struct Reply {
    worker: usize,
    body: ReplyBody,
}

struct Worker {
    id: usize,
    range: Range<usize>,
    batch: Arc<Batch>,
    kernel: Kernel,
    chunk_size: usize,
    shape: NetShape,
    params: Option<MlpParams>,
    direction: Vec<f32>,
    fail_next: bool,
}

impl Worker {
    fn handle(&mut self, cmd: Command) -> ReplyBody {
        match cmd {
            Command::Params { flat, checksum } => {
                if crc_f32(&flat) != checksum {
                    return ReplyBody::Nack;
                }
                match MlpParams::from_flat(self.shape, &flat) {
                    Ok(p) => {
                        let sum = p.checksum();
                        self.params = Some(p);
                        ReplyBody::Ack(sum)
                    }
                    Err(e) => ReplyBody::Failed(e.to_string()),
                }
            }
            Command::Direction { d, checksum } => {
                if crc_f32(&d) != checksum {
                    return ReplyBody::Nack;
                }
                self.direction = d.to_vec();
                ReplyBody::Ack(checksum)
            }
            Command::Compute { kind, step, rows, stride } => {
                if std::mem::take(&mut self.fail_next) {
                    return ReplyBody::Failed("injected failure".into());
                }
                match self.compute(kind, step, rows, stride) {
                    Ok(p) => ReplyBody::Partial(p),
                    Err(e) => ReplyBody::Failed(e.to_string()),
                }
            }
            Command::Commit { step } => {
                let res = match self.params.as_mut() {
                    Some(p) => p.add_scaled(step, &self.direction),
                    None => Err(Error::Invalid("no parameters".into())),
                };
                match res {
                    Ok(()) => ReplyBody::Ack(self.params.as_ref().map_or(0, MlpParams::checksum)),
                    Err(e) => ReplyBody::Failed(e.to_string()),
                }
            }
            Command::FailNextCompute => {
                self.fail_next = true;
                ReplyBody::Ack(0)
            }
            Command::Shutdown => ReplyBody::Ack(0),
        }
    }

    fn compute(&self, kind: PassKind, step: f32, rows: usize, stride: usize) -> Result<Partial> {
        let base = self.params.as_ref().ok_or_else(|| Error::Invalid("no parameters".into()))?;
        let trial;
        let p = if step != 0.0 {
            let mut t = base.clone();
            t.add_scaled(step, &self.direction)?;
            trial = t;
            &trial
        } else {
            base
        };
        let rows = rows.min(self.range.len());
        let stride = stride.max(1);
        let mut grad = match kind {
            PassKind::Gradient => Some(GradResult::zeros(self.shape)),
            PassKind::Error => None,
        };
        let (mut error, mut n, mut flops) = (0.0f64, 0usize, 0u64);
        let mut start = 0;
        while start < rows {
            let end = (start + self.chunk_size).min(rows);
            let chunk = self.chunk(start, end, stride)?;
            start = end;
            if chunk.is_empty() {
                continue;
            }
            match grad.as_mut() {
                Some(acc) => acc.accumulate(&nn::gradient(p, &chunk, &self.kernel)?)?,
                None => {
                    let (e, f) = nn::error(p, &chunk, &self.kernel)?;
                    error += e;
                    n += chunk.len();
                    flops += f;
                }
            }
        }
        Ok(match grad {
            Some(g) => Partial::Grad(g),
            None => Partial::Error {
                error,
                n_patterns: n,
                flops,
            },
        })
    }

    /// Shard rows `start..end`, keeping the global rows that belong to the
    /// `1/stride` subsample.
    fn chunk(&self, start: usize, end: usize, stride: usize) -> Result<Batch> {
        let lo = self.range.start + start;
        let hi = self.range.start + end;
        if stride == 1 {
            return self.batch.slice(lo, hi);
        }
        let idx: Vec<usize> = (lo..hi).filter(|&i| nn::in_subsample(i, stride)).collect();
        let x = Mat32::from_fn(idx.len(), self.batch.x.cols(), |i, j| self.batch.x.get(idx[i], j));
        let t = Mat32::from_fn(idx.len(), self.batch.t.cols(), |i, j| self.batch.t.get(idx[i], j));
        Batch::new(x, t)
    }
}

enum Pool {
    Inline(Vec<Worker>),
    Threads {
        local: Option<Worker>,
        senders: Vec<Sender<(usize, Command)>>,
        owner: Vec<Option<usize>>,
        replies: Receiver<Reply>,
        handles: Vec<JoinHandle<()>>,
    },
}

fn thread_cap(cfg: &TrainerCfg) -> usize {
    let env = std::env::var(THREADS_ENV).ok().and_then(|s| s.trim().parse::<usize>().ok()).filter(|&n| n > 0);
    let mut cap = cfg.threads.unwrap_or(usize::MAX);
    if let Some(e) = env {
        cap = cap.min(e);
    }
    cap.max(1)
}

impl Pool {
    fn new(mut workers: Vec<Worker>, cfg: &TrainerCfg) -> Pool {
        if cfg.backend == Backend::Simulated {
            return Pool::Inline(workers);
        }
        let local = if cfg.master_computes { Some(workers.remove(0)) } else { None };
        let offset = usize::from(local.is_some());
        let n_threads = thread_cap(cfg).min(workers.len());
        let (reply_tx, replies) = mpsc::channel();
        let mut senders = Vec::new();
        let mut handles = Vec::new();
        let mut owner = vec![None; workers.len() + offset];
        let mut buckets: Vec<Vec<Worker>> = (0..n_threads).map(|_| Vec::new()).collect();
        for (i, w) in workers.into_iter().enumerate() {
            owner[w.id] = Some(i % n_threads);
            buckets[i % n_threads].push(w);
        }
        for mut bucket in buckets {
            let (tx, rx) = mpsc::channel::<(usize, Command)>();
            let reply_tx = reply_tx.clone();
            senders.push(tx);
            handles.push(std::thread::spawn(move || {
                while let Ok((id, cmd)) = rx.recv() {
                    let stop = matches!(cmd, Command::Shutdown);
                    if let Some(w) = bucket.iter_mut().find(|w| w.id == id) {
                        let body = w.handle(cmd);
                        if reply_tx.send(Reply { worker: id, body }).is_err() {
                            break;
                        }
                    }
                    if stop && bucket.iter().all(|w| w.id <= id) {
                        break;
                    }
                }
            }));
        }
        Pool::Threads {
            local,
            senders,
            owner,
            replies,
            handles,
        }
    }

    /// Sends every command and returns the replies in worker order.
    fn dispatch(&mut self, cmds: Vec<(usize, Command)>) -> Result<Vec<Reply>> {
        let mut out = Vec::with_capacity(cmds.len());
        match self {
            Pool::Inline(workers) => {
                for (id, cmd) in cmds {
                    let body = workers[id].handle(cmd);
                    out.push(Reply { worker: id, body });
                }
            }
            Pool::Threads {
                local,
                senders,
                owner,
                replies,
                ..
            } => {
                let mut local_cmds = Vec::new();
                let mut remote = 0;
                for (id, cmd) in cmds {
                    match owner.get(id).copied().flatten() {
                        Some(t) => {
                            senders[t].send((id, cmd)).map_err(|_| lost(id))?;
                            remote += 1;
                        }
                        None => local_cmds.push((id, cmd)),
                    }
                }
                // The master works on its own shard while the others run.
                for (id, cmd) in local_cmds {
                    let w = local.as_mut().filter(|w| w.id == id).ok_or_else(|| lost(id))?;
                    out.push(Reply { worker: id, body: w.handle(cmd) });
                }
                for _ in 0..remote {
                    out.push(replies.recv().map_err(|_| lost(usize::MAX))?);
                }
            }
        }
        out.sort_by_key(|r| r.worker);
        Ok(out)
    }

    fn shutdown(&mut self) {
        if let Pool::Threads {
            senders,
            owner,
            handles,
            ..
        } = self
        {
            for (id, t) in owner.iter().enumerate() {
                if let Some(t) = t {
                    let _ = senders[*t].send((id, Command::Shutdown));
                }
            }
            senders.clear();
            for h in handles.drain(..) {
                let _ = h.join();
            }
        }
    }
}

fn lost(worker: usize) -> Error {
    Error::Worker {
        worker,
        start: 0,
        end: 0,
        reason: "worker is unreachable".into(),
    }
}

/// One logged message.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MessageRecord {
    pub kind: &'static str,
    pub worker: usize,
    pub bytes: u64,
}

/// Aggregated result of one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PassResult {
    pub kind: PassKind,
    /// Present for gradient passes.
    pub grad: Option<GradResult>,
    pub error: f64,
    pub n_patterns: usize,
    pub flops: u64,
    pub schedule: Schedule,
    pub wall_seconds: f64,
}

/// Faults injected by tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Fault {
    pub worker: usize,
    /// Corrupt this many of the next parameter or direction messages.
    pub corrupt_transmissions: usize,
    /// Fail the next compute command.
    pub fail_compute: bool,
}

/// The master: owns the reference parameters and drives the workers.
pub struct Trainer {
    cfg: TrainerCfg,
    shape: NetShape,
    shards: Vec<Range<usize>>,
    pool: Pool,
    base: MlpParams,
    direction: Vec<f32>,
    ledger: FlopLedger,
    log: Vec<MessageRecord>,
    corrupt: Vec<usize>,
    last_schedule: Option<Schedule>,
    virtual_seconds: f64,
}

impl Trainer {
    pub fn new(params: MlpParams, batch: Batch, kernel: Kernel, cfg: TrainerCfg) -> Result<Trainer> {
        cfg.validate()?;
        let shape = params.shape();
        if batch.x.cols() != shape.n_i || batch.t.cols() != shape.n_o {
            return Err(shape_err(
                "Trainer",
                format!("batch {}→{} for net {}/{}/{}", batch.x.cols(), batch.t.cols(), shape.n_i, shape.n_h, shape.n_o),
            ));
        }
        let shards = partition(batch.len(), cfg.workers);
        let batch = Arc::new(batch);
        let workers = shards
            .iter()
            .enumerate()
            .map(|(id, r)| Worker {
                id,
                range: r.clone(),
                batch: Arc::clone(&batch),
                kernel,
                chunk_size: cfg.chunk_size,
                shape,
                params: None,
                direction: Vec::new(),
                fail_next: false,
            })
            .collect();
        let pool = Pool::new(workers, &cfg);
        let mut t = Trainer {
            corrupt: vec![0; cfg.workers],
            cfg,
            shape,
            shards,
            pool,
            direction: vec![0.0; params.param_count()],
            base: params,
            ledger: FlopLedger::default(),
            log: Vec::new(),
            last_schedule: None,
            virtual_seconds: 0.0,
        };
        t.broadcast_params()?;
        Ok(t)
    }

    pub fn cfg(&self) -> &TrainerCfg {
        &self.cfg
    }

    pub fn shards(&self) -> &[Range<usize>] {
        &self.shards
    }

    pub fn ledger(&self) -> FlopLedger {
        self.ledger
    }

    pub fn messages(&self) -> &[MessageRecord] {
        &self.log
    }

    /// Schedule-model time of every pass so far; sampled passes count
    /// `1/stride` of their makespan.
    pub fn virtual_seconds(&self) -> f64 {
        self.virtual_seconds
    }

    pub fn last_schedule(&self) -> Option<&Schedule> {
        self.last_schedule.as_ref()
    }

    pub fn inject_fault(&mut self, fault: Fault) -> Result<()> {
        if fault.worker >= self.cfg.workers {
            return Err(Error::Invalid(format!("no worker {}", fault.worker)));
        }
        self.corrupt[fault.worker] += fault.corrupt_transmissions;
        if fault.fail_compute {
            for r in self.pool.dispatch(vec![(fault.worker, Command::FailNextCompute)])? {
                self.expect_ack(r)?;
            }
        }
        Ok(())
    }

    fn worker_error(&self, worker: usize, reason: String) -> Error {
        let r = self.shards.get(worker).cloned().unwrap_or(0..0);
        Error::Worker {
            worker,
            start: r.start,
            end: r.end,
            reason,
        }
    }

    fn expect_ack(&self, r: Reply) -> Result<u32> {
        match r.body {
            ReplyBody::Ack(sum) => Ok(sum),
            ReplyBody::Nack => Err(Error::Checksum(r.worker)),
            ReplyBody::Failed(reason) => Err(self.worker_error(r.worker, reason)),
            ReplyBody::Partial(_) => Err(self.worker_error(r.worker, "unexpected partial result".into())),
        }
    }

    /// Sends a vector to every worker with its CRC; a worker that reports a
    /// mismatch gets one retransmission.
    fn send_verified(&mut self, kind: &'static str, v: &[f32], make: fn(Arc<Vec<f32>>, u32) -> Command) -> Result<Vec<u32>> {
        let checksum = crc_f32(v);
        let clean = Arc::new(v.to_vec());
        let bytes = 4 * v.len() as u64;
        let mut pending: Vec<usize> = (0..self.cfg.workers).collect();
        let mut acks = vec![0u32; self.cfg.workers];
        for attempt in 0..2 {
            let cmds: Vec<(usize, Command)> = pending
                .iter()
                .map(|&w| {
                    self.log.push(MessageRecord { kind, worker: w, bytes });
                    let payload = if self.corrupt[w] > 0 {
                        self.corrupt[w] -= 1;
                        let mut bad = v.to_vec();
                        if let Some(x) = bad.first_mut() {
                            *x = f32::from_bits(x.to_bits() ^ 1);
                        } else {
                            bad.push(1.0);
                        }
                        Arc::new(bad)
                    } else {
                        Arc::clone(&clean)
                    };
                    (w, make(payload, checksum))
                })
                .collect();
            let mut retry = Vec::new();
            for r in self.pool.dispatch(cmds)? {
                match r.body {
                    ReplyBody::Nack if attempt == 0 => retry.push(r.worker),
                    _ => {
                        let w = r.worker;
                        acks[w] = self.expect_ack(r)?;
                    }
                }
            }
            if retry.is_empty() {
                break;
            }
            pending = retry;
        }
        Ok(acks)
    }

    /// Full parameter broadcast; returns the checksum each worker holds.
    pub fn broadcast_params(&mut self) -> Result<Vec<u32>> {
        let flat = self.base.to_flat();
        let acks = self.send_verified("params", &flat, |flat, checksum| Command::Params { flat, checksum })?;
        let want = self.base.checksum();
        if let Some(w) = acks.iter().position(|&a| a != want) {
            return Err(Error::Checksum(w));
        }
        Ok(acks)
    }

    /// Ships a search direction to every worker.
    pub fn send_direction(&mut self, d: &[f32]) -> Result<()> {
        if d.len() != self.base.param_count() {
            return Err(shape_err("send_direction", format!("{} for {} parameters", d.len(), self.base.param_count())));
        }
        self.send_verified("direction", d, |d, checksum| Command::Direction { d, checksum })?;
        self.direction.copy_from_slice(d);
        Ok(())
    }

    fn schedule(&self, kind: PassKind) -> Result<Schedule> {
        let per_row = match kind {
            PassKind::Error => self.shape.error_flops(1)?,
            PassKind::Gradient => self.shape.gradient_flops(1)?,
        } as f64
            / self.cfg.model_flops_per_sec;
        let sizes: Vec<usize> = self.shards.iter().map(|r| r.len()).collect();
        let row_seconds: Vec<f64> = (0..sizes.len()).map(|w| per_row * self.cfg.speed(w)).collect();
        simulate_schedule(&sizes, &row_seconds, self.cfg.chunk_size, self.cfg.halt_fraction, self.cfg.poll_latency)
    }

    /// One error or gradient pass at `base + step · d`, using every
    /// `stride`-th consumed row.
    pub fn run_pass(&mut self, kind: PassKind, step: f32, stride: usize) -> Result<PassResult> {
        let schedule = self.schedule(kind)?;
        let t0 = Instant::now();
        let cmds = schedule
            .consumed
            .iter()
            .enumerate()
            .map(|(w, &rows)| (w, Command::Compute { kind, step, rows, stride }))
            .collect();
        let replies = self.pool.dispatch(cmds)?;
        let mut grad = match kind {
            PassKind::Gradient => Some(GradResult::zeros(self.shape)),
            PassKind::Error => None,
        };
        let (mut error, mut n, mut flops) = (0.0f64, 0usize, 0u64);
        for r in replies {
            match r.body {
                ReplyBody::Partial(Partial::Grad(g)) => {
                    grad.as_mut()
                        .ok_or_else(|| self.worker_error(r.worker, "gradient for an error pass".into()))?
                        .accumulate(&g)?;
                }
                ReplyBody::Partial(Partial::Error {
                    error: e,
                    n_patterns,
                    flops: f,
                }) => {
                    error += e;
                    n += n_patterns;
                    flops += f;
                }
                ReplyBody::Failed(reason) => return Err(self.worker_error(r.worker, reason)),
                _ => return Err(self.worker_error(r.worker, "unexpected reply".into())),
            }
        }
        if let Some(g) = &grad {
            error = g.error;
            n = g.n_patterns;
            flops = g.flops;
        }
        let wall_seconds = t0.elapsed().as_secs_f64();
        self.ledger.record(flops, wall_seconds);
        self.virtual_seconds += schedule.makespan / stride.max(1) as f64;
        self.last_schedule = Some(schedule.clone());
        Ok(PassResult {
            kind,
            grad,
            error,
            n_patterns: n,
            flops,
            schedule,
            wall_seconds,
        })
    }

    pub fn params(&self) -> &MlpParams {
        &self.base
    }

    pub fn into_params(mut self) -> MlpParams {
        self.pool.shutdown();
        std::mem::replace(&mut self.base, MlpParams::zeros(NetShape::new(0, 0, 0)))
    }
}

impl Drop for Trainer {
    fn drop(&mut self) {
        self.pool.shutdown();
    }
}

impl LineObjective for Trainer {
    fn dim(&self) -> usize {
        self.base.param_count()
    }

    fn gradient(&mut self) -> Result<Evaluation> {
        let r = self.run_pass(PassKind::Gradient, 0.0, 1)?;
        let g = r.grad.expect("gradient pass");
        Ok(Evaluation {
            grad: g.to_flat(),
            error: g.error,
            n_patterns: g.n_patterns,
            flops: g.flops,
        })
    }

    fn set_direction(&mut self, d: &[f32]) -> Result<()> {
        self.send_direction(d)
    }

    fn error_along(&mut self, step: f32) -> Result<(f64, u64)> {
        let r = self.run_pass(PassKind::Error, step, 1)?;
        Ok((r.error, r.flops))
    }

    fn slope_along(&mut self, step: f32, fraction: f32) -> Result<(f64, u64)> {
        let r = self.run_pass(PassKind::Gradient, step, sample_stride(fraction))?;
        let g = r.grad.expect("gradient pass");
        Ok((slope_of(&g, &self.direction), g.flops))
    }

    fn commit(&mut self, step: f32) -> Result<()> {
        self.log.extend((0..self.cfg.workers).map(|w| MessageRecord {
            kind: "step",
            worker: w,
            bytes: 4,
        }));
        let cmds = (0..self.cfg.workers).map(|w| (w, Command::Commit { step })).collect();
        let replies = self.pool.dispatch(cmds)?;
        self.base.add_scaled(step, &self.direction)?;
        let want = self.base.checksum();
        for r in replies {
            let w = r.worker;
            if self.expect_ack(r)? != want {
                return Err(Error::Checksum(w));
            }
        }
        Ok(())
    }

    fn params(&self) -> &MlpParams {
        &self.base
    }

    fn virtual_clock(&self) -> Option<f64> {
        (self.cfg.backend == Backend::Simulated).then_some(self.virtual_seconds)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// Every worker holds this many patterns.
    Weak { patterns_per_worker: usize },
    /// This many patterns are split over the workers.
    Strong { total_patterns: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub workers: usize,
    pub n_patterns: usize,
    pub compute_seconds: f64,
    pub reduce_seconds: f64,
    pub seconds: f64,
    pub efficiency: f64,
}

pub const SCALING_CSV_HEADER: &str = "workers,n_patterns,compute_seconds,reduce_seconds,seconds,efficiency";

/// Model time of one gradient pass plus its library reduce, for each worker
/// count, with parallel efficiency relative to a single worker.
pub fn scaling_study(
    shape: NetShape,
    workers: &[usize],
    mode: ScalingMode,
    cfg: &TrainerCfg,
    model: &CostModel,
) -> Result<Vec<ScalingPoint>> {
    let per_row = shape.gradient_flops(1)? as f64 / cfg.model_flops_per_sec;
    let bytes = shape.vector_bytes();
    let time = |w: usize| -> Result<(usize, f64, f64)> {
        let n = match mode {
            ScalingMode::Weak { patterns_per_worker } => patterns_per_worker * w,
            ScalingMode::Strong { total_patterns } => total_patterns,
        };
        let sizes: Vec<usize> = partition(n, w).iter().map(|r| r.len()).collect();
        let s = simulate_schedule(&sizes, &vec![per_row; w], cfg.chunk_size, cfg.halt_fraction, cfg.poll_latency)?;
        Ok((n, s.makespan, logn_reduce_seconds(w, bytes, model)))
    };
    let (_, c1, r1) = time(1)?;
    let t1 = c1 + r1;
    workers
        .iter()
        .map(|&w| {
            if w == 0 {
                return Err(Error::Invalid("worker counts must be positive".into()));
            }
            let (n, c, r) = time(w)?;
            let t = c + r;
            let efficiency = match mode {
                ScalingMode::Weak { .. } => t1 / t,
                ScalingMode::Strong { .. } => t1 / (w as f64 * t),
            };
            Ok(ScalingPoint {
                workers: w,
                n_patterns: n,
                compute_seconds: c,
                reduce_seconds: r,
                seconds: t,
                efficiency,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize, shape: NetShape, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Mat32::from_fn(n, shape.n_i, |_, _| rng.gen_range(-1.0..1.0));
        let t = Mat32::from_fn(n, shape.n_o, |_, _| if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
        Batch::new(x, t).unwrap()
    }

    fn rel_close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
    }

    #[test]
    fn partition_examples() {
        let sizes = |n, w| partition(n, w).iter().map(|r: &Range<usize>| r.len()).collect::<Vec<_>>();
        assert_eq!(sizes(10, 3), vec![4, 3, 3]);
        assert_eq!(sizes(5, 8), vec![1, 1, 1, 1, 1, 0, 0, 0]);
        let big = partition(9_264_000, 193);
        assert_eq!(big.len(), 193);
        assert!(big.iter().all(|r| r.len().abs_diff(48_000) <= 1));
    }

    proptest! {
        #[test]
        fn partition_is_disjoint_cover(n in 0usize..5000, w in 1usize..64) {
            let p = partition(n, w);
            prop_assert_eq!(p.len(), w);
            let mut next = 0;
            for r in &p {
                prop_assert_eq!(r.start, next);
                next = r.end;
            }
            prop_assert_eq!(next, n);
            let (lo, hi) = p.iter().fold((usize::MAX, 0), |(lo, hi), r| (lo.min(r.len()), hi.max(r.len())));
            prop_assert!(hi - lo <= 1);
        }

        #[test]
        fn consumed_count_bound(n in 1usize..20_000, w in 1usize..17, chunk in 1usize..400, hf in 0.05f32..1.0) {
            let sizes: Vec<usize> = partition(n, w).iter().map(|r| r.len()).collect();
            let s = simulate_schedule(&sizes, &vec![1e-3; w], chunk, hf, 0.0).unwrap();
            let target = f64::from(hf) * n as f64;
            prop_assert!(s.total() as f64 >= target);
            prop_assert!(s.total() as f64 <= target + (w * chunk) as f64);
            prop_assert!(s.idle_spread() <= s.chunk_seconds + 1e-12);
            for (c, sz) in s.consumed.iter().zip(&sizes) {
                prop_assert!(c <= sz);
            }
        }
    }

    #[test]
    fn schedule_with_latency_and_slow_worker() {
        let sizes = vec![3200; 4];
        let s = simulate_schedule(&sizes, &[1e-3, 1e-3, 1e-3, 3e-3], 320, 0.8, 1e-4).unwrap();
        assert!(s.total() >= 10_240);
        // The slow worker consumes the least.
        assert!(s.consumed[3] < s.consumed[0]);
        let full = simulate_schedule(&sizes, &[1e-3; 4], 320, 1.0, 0.0).unwrap();
        assert_eq!(full.consumed, sizes);
    }

    #[test]
    fn single_worker_full_pass_matches_nn() {
        let shape = NetShape::new(5, 4, 3);
        let batch = data(700, shape, 1);
        let p = MlpParams::random(shape, 2);
        let cfg = TrainerCfg {
            workers: 1,
            halt_fraction: 1.0,
            ..TrainerCfg::default()
        };
        let mut t = Trainer::new(p.clone(), batch.clone(), Kernel::default(), cfg).unwrap();
        let r = t.run_pass(PassKind::Gradient, 0.0, 1).unwrap();
        let g = r.grad.unwrap();
        let want = nn::gradient(&p, &batch, &Kernel::default()).unwrap();
        assert_eq!(g.n_patterns, 700);
        assert_eq!(g.flops, want.flops);
        assert!(rel_close(&g.to_flat(), &want.to_flat(), 1e-5));
        assert!((g.error - want.error).abs() <= 1e-9 * want.error.max(1.0));
    }

    #[test]
    fn four_workers_match_union_of_consumed_rows() {
        let shape = NetShape::new(6, 5, 4);
        let batch = data(3000, shape, 3);
        let p = MlpParams::random(shape, 4);
        let mut t = Trainer::new(p.clone(), batch.clone(), Kernel::default(), TrainerCfg::default()).unwrap();
        let r = t.run_pass(PassKind::Gradient, 0.0, 1).unwrap();
        let rows: Vec<usize> = t
            .shards()
            .iter()
            .zip(&r.schedule.consumed)
            .flat_map(|(s, &c)| s.start..s.start + c)
            .collect();
        let x = Mat32::from_fn(rows.len(), 6, |i, j| batch.x.get(rows[i], j));
        let tt = Mat32::from_fn(rows.len(), 4, |i, j| batch.t.get(rows[i], j));
        let want = nn::gradient(&p, &Batch::new(x, tt).unwrap(), &Kernel::default()).unwrap();
        let g = r.grad.unwrap();
        assert_eq!(g.n_patterns, rows.len());
        assert!(rel_close(&g.to_flat(), &want.to_flat(), 1e-5));
        assert_eq!(t.ledger().contributing_flops, shape.gradient_flops(rows.len()).unwrap());
    }

    #[test]
    fn threads_backend_is_bit_identical() {
        let shape = NetShape::new(6, 5, 4);
        let batch = data(2000, shape, 5);
        let p = MlpParams::random(shape, 6);
        let run = |backend, threads| {
            let cfg = TrainerCfg {
                backend,
                threads,
                workers: 5,
                chunk_size: 64,
                ..TrainerCfg::default()
            };
            let mut t = Trainer::new(p.clone(), batch.clone(), Kernel::default(), cfg).unwrap();
            let g = t.run_pass(PassKind::Gradient, 0.0, 1).unwrap().grad.unwrap();
            let d = g.to_flat();
            t.send_direction(&d).unwrap();
            let e = t.run_pass(PassKind::Error, 0.01, 1).unwrap().error;
            LineObjective::commit(&mut t, 0.01).unwrap();
            (g, e, t.params().clone())
        };
        let a = run(Backend::Simulated, None);
        let b = run(Backend::Threads, None);
        let c = run(Backend::Threads, Some(2));
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn broadcast_sizes_and_checksums() {
        let shape = NetShape::new(100, 50, 50);
        assert_eq!(shape.vector_bytes(), 30_000);
        assert_eq!(NetShape::jocr().vector_bytes(), 6_917_760);
        let batch = data(40, shape, 7);
        let mut t = Trainer::new(MlpParams::random(shape, 1), batch, Kernel::default(), TrainerCfg::default()).unwrap();
        let a = t.broadcast_params().unwrap();
        let b = t.broadcast_params().unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&c| c == t.params().checksum()));
        assert!(t.messages().iter().filter(|m| m.kind == "params").all(|m| m.bytes == 30_000));
    }

    #[test]
    fn corrupted_message_is_retransmitted_once() {
        let shape = NetShape::new(3, 2, 2);
        let batch = data(50, shape, 8);
        let mut t = Trainer::new(MlpParams::random(shape, 1), batch, Kernel::default(), TrainerCfg::default()).unwrap();
        let before = t.messages().len();
        t.inject_fault(Fault { worker: 2, corrupt_transmissions: 1, fail_compute: false }).unwrap();
        t.broadcast_params().unwrap();
        assert_eq!(t.messages().len() - before, 5);
        t.inject_fault(Fault { worker: 1, corrupt_transmissions: 2, fail_compute: false }).unwrap();
        assert!(matches!(t.broadcast_params(), Err(Error::Checksum(1))));
    }

    #[test]
    fn worker_failure_names_its_range() {
        let shape = NetShape::new(3, 2, 2);
        let batch = data(100, shape, 9);
        let mut t = Trainer::new(MlpParams::random(shape, 1), batch, Kernel::default(), TrainerCfg::default()).unwrap();
        t.inject_fault(Fault { worker: 3, corrupt_transmissions: 0, fail_compute: true }).unwrap();
        match t.run_pass(PassKind::Error, 0.0, 1) {
            Err(Error::Worker { worker: 3, start: 75, end: 100, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ledger_identity() {
        let l = FlopLedger::new(1_234_567_890_123, 2.5);
        assert!((l.gflops_rate * l.wall_seconds * 1e9 - l.contributing_flops as f64).abs() <= 1e-3);
        assert_eq!(FlopLedger::new(5, 0.0).gflops_rate, 0.0);
    }

    #[test]
    fn large_config_per_process_rates() {
        let (e, g) = per_process_pass_flops(NetShape::jocr(), 9_264_000, 0.8, 193).unwrap();
        assert!((e / 1e9 - 135.0).abs() / 135.0 < 0.02, "{e}");
        assert!((g / 1e9 - 383.0).abs() / 383.0 < 0.01, "{g}");
    }

    #[test]
    fn weak_scaling_is_near_linear() {
        let cfg = TrainerCfg {
            model_flops_per_sec: 1.0754e9,
            ..TrainerCfg::default()
        };
        let pts = scaling_study(
            NetShape::jocr(),
            &[1, 2, 4, 8, 16],
            ScalingMode::Weak { patterns_per_worker: 32_000 },
            &cfg,
            &CostModel::default(),
        )
        .unwrap();
        assert!(pts[4].efficiency >= 0.9, "{:?}", pts[4]);
        let strong = scaling_study(
            NetShape::jocr(),
            &[1, 4, 16, 64],
            ScalingMode::Strong { total_patterns: 3_200 },
            &cfg,
            &CostModel::default(),
        )
        .unwrap();
        assert!(strong.windows(2).all(|w| w[1].efficiency < w[0].efficiency));
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(TrainerCfg { workers: 0, ..TrainerCfg::default() }.validate().is_err());
        assert!(TrainerCfg { halt_fraction: 0.0, ..TrainerCfg::default() }.validate().is_err());
        assert!(TrainerCfg { speed_factors: vec![1.0], ..TrainerCfg::default() }.validate().is_err());
        assert!(serde_json::from_str::<TrainerCfg>(r#"{"workerz": 3}"#).is_err());
        let c: TrainerCfg = serde_json::from_str(r#"{"workers": 3, "backend": "threads"}"#).unwrap();
        assert_eq!((c.workers, c.backend, c.chunk_size), (3, Backend::Threads, 320));
    }
}
