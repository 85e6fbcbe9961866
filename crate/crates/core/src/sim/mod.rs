//! Deterministic bulk-synchronous multi-rank fabric.
//!
//! Each rank runs the same async program against its own [`Comm`]. Every
//! fabric operation that communicates is a superstep barrier: the executor
//! polls all ranks until each one is suspended at a barrier, then delivers
//! the buffered point-to-point messages (sender order, FIFO per pair) and
//! resolves the collective. Messages sent before a barrier are readable after
//! it. Ranks never share mutable state, so results and metrics depend only on
//! `(rank count, program, seed)`, not on how many worker threads poll them.

mod metrics;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::pin::Pin;
use std::sync::{Arc, Mutex, MutexGuard};
use std::task::{Context, Poll, Waker};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use metrics::{CollectiveKind, Metrics, StageMetrics};

use crate::error::{Error, Result};

pub type Rank = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Route {
    /// Process-graph edge, checked against the declared neighbor set.
    Neighbor,
    /// Explicit pair traffic (block migration, link maintenance).
    Pair,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub src: Rank,
    pub route: Route,
    pub bytes: Vec<u8>,
}

#[derive(Debug)]
enum Request {
    Sync,
    Or(bool),
    Sum(Vec<f64>),
    Gather(Vec<u8>),
}

impl Request {
    fn kind(&self) -> Option<CollectiveKind> {
        match self {
            Request::Sync => None,
            Request::Or(_) => Some(CollectiveKind::AllReduceBoolOr),
            Request::Sum(_) => Some(CollectiveKind::AllReduceSum),
            Request::Gather(_) => Some(CollectiveKind::AllGatherBytes),
        }
    }
}

#[derive(Debug)]
enum Reply {
    Sync,
    Or(bool),
    Sum(Vec<f64>),
    Gather(Arc<Vec<Vec<u8>>>),
}

#[derive(Debug, Default)]
struct Slot {
    outbox: Vec<(Rank, Route, Vec<u8>)>,
    inbox: Vec<Envelope>,
    request: Option<Request>,
    reply: Option<Reply>,
    stage: String,
    metrics: BTreeMap<String, StageMetrics>,
}

impl Slot {
    fn stage_metrics(&mut self) -> &mut StageMetrics {
        let stage = self.stage.clone();
        self.metrics.entry(stage).or_default()
    }
}

fn lock(slot: &Mutex<Slot>) -> MutexGuard<'_, Slot> {
    slot.lock().unwrap_or_else(|e| e.into_inner())
}

/// A rank's handle to the fabric.
pub struct Comm {
    rank: Rank,
    size: usize,
    slot: Arc<Mutex<Slot>>,
    rng: ChaCha8Rng,
}

impl std::fmt::Debug for Comm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Comm")
            .field("rank", &self.rank)
            .field("size", &self.size)
            .finish()
    }
}

struct Barrier {
    slot: Arc<Mutex<Slot>>,
    request: Option<Request>,
}

impl Future for Barrier {
    type Output = Reply;

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Reply> {
        let slot = self.slot.clone();
        let mut s = lock(&slot);
        if let Some(req) = self.request.take() {
            s.request = Some(req);
            return Poll::Pending;
        }
        match s.reply.take() {
            Some(r) => Poll::Ready(r),
            None => Poll::Pending,
        }
    }
}

impl Comm {
    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Rank-private deterministic random stream derived from the run seed.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Tags subsequent traffic of this rank with a stage name.
    pub fn set_stage(&mut self, stage: &str) {
        let mut s = lock(&self.slot);
        s.stage = stage.to_string();
        s.stage_metrics();
    }

    fn push(&mut self, dest: Rank, route: Route, bytes: Vec<u8>) -> Result<()> {
        if dest >= self.size {
            return Err(Error::Fabric { dest, size: self.size });
        }
        let mut s = lock(&self.slot);
        let m = s.stage_metrics();
        m.p2p_msgs += 1;
        m.p2p_bytes += bytes.len() as u64;
        s.outbox.push((dest, route, bytes));
        Ok(())
    }

    /// Buffers a pair message; it is delivered at the next barrier.
    pub fn send(&mut self, dest: Rank, bytes: Vec<u8>) -> Result<()> {
        self.push(dest, Route::Pair, bytes)
    }

    /// Superstep barrier without a collective.
    pub async fn sync(&mut self) {
        let reply = Barrier {
            slot: self.slot.clone(),
            request: Some(Request::Sync),
        }
        .await;
        debug_assert!(matches!(reply, Reply::Sync));
    }

    /// Drains every delivered message.
    pub fn take_inbox(&mut self) -> Vec<Envelope> {
        std::mem::take(&mut lock(&self.slot).inbox)
    }

    /// Drains delivered pair messages, keeping neighbor traffic queued.
    pub fn take_pairs(&mut self) -> Vec<(Rank, Vec<u8>)> {
        let mut s = lock(&self.slot);
        let (pairs, rest): (Vec<Envelope>, Vec<Envelope>) = std::mem::take(&mut s.inbox)
            .into_iter()
            .partition(|e| e.route == Route::Pair);
        s.inbox = rest;
        pairs.into_iter().map(|e| (e.src, e.bytes)).collect()
    }

    /// Sends the given pair messages, crosses a barrier and returns what
    /// arrived, ordered by sender.
    pub async fn exchange_pairs(
        &mut self,
        outgoing: impl IntoIterator<Item = (Rank, Vec<u8>)>,
    ) -> Result<Vec<(Rank, Vec<u8>)>> {
        for (dest, bytes) in outgoing {
            self.send(dest, bytes)?;
        }
        self.sync().await;
        Ok(self.take_pairs())
    }

    /// One round of process-graph communication. Every payload must be
    /// addressed to a member of `neighbors`, and every message received in
    /// this round must come from one; anything else is a locality violation.
    pub async fn neighbor_exchange(
        &mut self,
        neighbors: &BTreeSet<Rank>,
        payloads: BTreeMap<Rank, Vec<u8>>,
    ) -> Result<BTreeMap<Rank, Vec<u8>>> {
        for dest in payloads.keys() {
            if !neighbors.contains(dest) {
                return Err(Error::Locality {
                    from: self.rank,
                    to: *dest,
                });
            }
        }
        for (dest, bytes) in payloads {
            self.push(dest, Route::Neighbor, bytes)?;
        }
        self.sync().await;
        let mut s = lock(&self.slot);
        let (mine, rest): (Vec<Envelope>, Vec<Envelope>) = std::mem::take(&mut s.inbox)
            .into_iter()
            .partition(|e| e.route == Route::Neighbor);
        s.inbox = rest;
        drop(s);
        let mut out = BTreeMap::new();
        for e in mine {
            if !neighbors.contains(&e.src) {
                return Err(Error::Locality {
                    from: e.src,
                    to: self.rank,
                });
            }
            if out.insert(e.src, e.bytes).is_some() {
                return Err(Error::protocol(format!(
                    "rank {} sent twice to {} in one neighbor round",
                    e.src, self.rank
                )));
            }
        }
        Ok(out)
    }

    pub async fn all_reduce_or(&mut self, value: bool) -> bool {
        match (Barrier {
            slot: self.slot.clone(),
            request: Some(Request::Or(value)),
        })
        .await
        {
            Reply::Or(v) => v,
            other => unreachable!("unexpected reply {other:?}"),
        }
    }

    /// Element-wise global sum, accumulated in rank order.
    pub async fn all_reduce_sum(&mut self, values: &[f64]) -> Vec<f64> {
        match (Barrier {
            slot: self.slot.clone(),
            request: Some(Request::Sum(values.to_vec())),
        })
        .await
        {
            Reply::Sum(v) => v,
            other => unreachable!("unexpected reply {other:?}"),
        }
    }

    /// Gathers every rank's bytes on every rank (index = source rank).
    pub async fn all_gather(&mut self, bytes: Vec<u8>) -> Arc<Vec<Vec<u8>>> {
        match (Barrier {
            slot: self.slot.clone(),
            request: Some(Request::Gather(bytes)),
        })
        .await
        {
            Reply::Gather(v) => v,
            other => unreachable!("unexpected reply {other:?}"),
        }
    }
}

/// Final states and metrics of a run.
#[derive(Debug)]
pub struct RunOutput<T> {
    pub results: Vec<T>,
    pub metrics: Metrics,
}

/// Executor configuration.
#[derive(Clone, Debug)]
pub struct Fabric {
    size: usize,
    workers: usize,
    seed: u64,
}

type RankFuture<T> = Pin<Box<dyn Future<Output = Result<T>> + Send>>;

impl Fabric {
    pub fn new(size: usize) -> Self {
        Fabric {
            size,
            workers: 1,
            seed: 0,
        }
    }

    /// Number of threads polling rank programs; 1 is the reference mode.
    pub fn workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Runs `program` on every rank, handing each rank its own initial state.
    pub fn run_each<S, T, F, Fut>(&self, states: Vec<S>, program: F) -> Result<RunOutput<T>>
    where
        S: Send,
        T: Send + 'static,
        F: Fn(Comm, S) -> Fut,
        Fut: Future<Output = Result<T>> + Send + 'static,
    {
        if states.len() != self.size {
            return Err(Error::contract(format!(
                "{} rank states for {} ranks",
                states.len(),
                self.size
            )));
        }
        let states: Mutex<Vec<Option<S>>> = Mutex::new(states.into_iter().map(Some).collect());
        self.run(|comm| {
            let state = states.lock().unwrap_or_else(|e| e.into_inner())[comm.rank()]
                .take()
                .expect("each rank starts once");
            program(comm, state)
        })
    }

    /// Runs `program` on every rank until all of them return.
    pub fn run<T, F, Fut>(&self, program: F) -> Result<RunOutput<T>>
    where
        T: Send + 'static,
        F: Fn(Comm) -> Fut,
        Fut: Future<Output = Result<T>> + Send + 'static,
    {
        if self.size == 0 {
            return Err(Error::contract("rank count must be at least 1"));
        }
        let slots: Vec<Arc<Mutex<Slot>>> = (0..self.size).map(|_| Arc::new(Mutex::new(Slot::default()))).collect();
        let mut tasks: Vec<Option<RankFuture<T>>> = slots
            .iter()
            .enumerate()
            .map(|(rank, slot)| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(rank as u64);
                let comm = Comm {
                    rank,
                    size: self.size,
                    slot: slot.clone(),
                    rng,
                };
                Some(Box::pin(program(comm)) as RankFuture<T>)
            })
            .collect();
        let mut results: Vec<Option<T>> = (0..self.size).map(|_| None).collect();
        let mut metrics = Metrics::new(self.size);

        let pool = if self.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(self.workers)
                    .build()
                    .map_err(|e| Error::contract(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };

        loop {
            let polled: Vec<Option<Poll<Result<T>>>> = match &pool {
                Some(pool) => pool.install(|| tasks.par_iter_mut().map(poll_task).collect()),
                None => tasks.iter_mut().map(poll_task).collect(),
            };
            let mut first_err = None;
            for (rank, p) in polled.into_iter().enumerate() {
                if let Some(Poll::Ready(r)) = p {
                    tasks[rank] = None;
                    match r {
                        Ok(v) => results[rank] = Some(v),
                        Err(e) => {
                            first_err.get_or_insert(e);
                        }
                    }
                }
            }
            if let Some(e) = first_err {
                return Err(e);
            }
            for slot in &slots {
                let s = lock(slot);
                for stage in s.metrics.keys() {
                    metrics.note_stage(stage);
                }
            }

            let waiting: Vec<Rank> = (0..self.size).filter(|&r| tasks[r].is_some()).collect();
            if waiting.is_empty() {
                let mut leaked = 0;
                for slot in &slots {
                    let s = lock(slot);
                    leaked += s.inbox.len() + s.outbox.len();
                }
                if leaked > 0 {
                    return Err(Error::ProtocolLeak(leaked));
                }
                break;
            }
            if waiting.len() < self.size {
                let done: Vec<Rank> = (0..self.size).filter(|&r| tasks[r].is_none()).collect();
                return Err(Error::protocol(format!(
                    "ranks {done:?} terminated while ranks {waiting:?} wait at a barrier"
                )));
            }

            let mut requests = Vec::with_capacity(self.size);
            for (rank, slot) in slots.iter().enumerate() {
                match lock(slot).request.take() {
                    Some(r) => requests.push(r),
                    None => {
                        return Err(Error::protocol(format!(
                            "rank {rank} suspended outside a fabric operation"
                        )))
                    }
                }
            }
            let kind = requests[0].kind();
            if let Some(r) = requests.iter().position(|q| q.kind() != kind) {
                return Err(Error::protocol(format!(
                    "mismatched barrier: rank 0 at {kind:?}, rank {r} at {:?}",
                    requests[r].kind()
                )));
            }

            // deliver point-to-point traffic in sender order
            for src in 0..self.size {
                let outbox = std::mem::take(&mut lock(&slots[src]).outbox);
                for (dest, route, bytes) in outbox {
                    let mut d = lock(&slots[dest]);
                    let m = d.stage_metrics();
                    m.recv_msgs += 1;
                    m.recv_bytes += bytes.len() as u64;
                    d.inbox.push(Envelope { src, route, bytes });
                }
            }

            let replies: Vec<Reply> = match kind {
                None => (0..self.size).map(|_| Reply::Sync).collect(),
                Some(CollectiveKind::AllReduceBoolOr) => {
                    let v = requests.iter().any(|q| matches!(q, Request::Or(true)));
                    (0..self.size).map(|_| Reply::Or(v)).collect()
                }
                Some(CollectiveKind::AllReduceSum) => {
                    let mut sum: Vec<f64> = Vec::new();
                    for q in &requests {
                        let Request::Sum(v) = q else { unreachable!() };
                        if sum.is_empty() {
                            sum = vec![0.0; v.len()];
                        }
                        if v.len() != sum.len() {
                            return Err(Error::protocol("all_reduce_sum length mismatch"));
                        }
                        for (s, x) in sum.iter_mut().zip(v) {
                            *s += x;
                        }
                    }
                    (0..self.size).map(|_| Reply::Sum(sum.clone())).collect()
                }
                Some(CollectiveKind::AllGatherBytes) => {
                    let all: Vec<Vec<u8>> = requests
                        .iter()
                        .map(|q| match q {
                            Request::Gather(b) => b.clone(),
                            _ => unreachable!(),
                        })
                        .collect();
                    let all = Arc::new(all);
                    (0..self.size).map(|_| Reply::Gather(all.clone())).collect()
                }
            };

            if let Some(kind) = kind {
                let total_gathered: u64 = requests
                    .iter()
                    .map(|q| match q {
                        Request::Gather(b) => b.len() as u64,
                        _ => 0,
                    })
                    .sum();
                let stage = lock(&slots[0]).stage.clone();
                *metrics.collective_calls.entry((stage, kind)).or_default() += 1;
                for (slot, q) in slots.iter().zip(&requests) {
                    let mut s = lock(slot);
                    let m = s.stage_metrics();
                    m.collectives += 1;
                    m.collective_bytes += match q {
                        Request::Sync => 0,
                        Request::Or(_) => 1,
                        Request::Sum(v) => 8 * v.len() as u64,
                        Request::Gather(b) => b.len() as u64,
                    };
                    m.replicated_bytes += total_gathered;
                }
            }
            for (slot, reply) in slots.iter().zip(replies) {
                lock(slot).reply = Some(reply);
            }
            metrics.supersteps += 1;
        }

        for (rank, slot) in slots.iter().enumerate() {
            let s = lock(slot);
            metrics.per_rank[rank] = s.metrics.clone();
        }
        Ok(RunOutput {
            results: results.into_iter().map(|r| r.expect("finished")).collect(),
            metrics,
        })
    }
}

fn poll_task<T>(task: &mut Option<RankFuture<T>>) -> Option<Poll<Result<T>>> {
    let fut = task.as_mut()?;
    let mut cx = Context::from_waker(Waker::noop());
    Some(fut.as_mut().poll(&mut cx))
}
