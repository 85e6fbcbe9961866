use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllReduceBoolOr,
    AllReduceSum,
    AllGatherBytes,
}

/// Communication counters of one rank during one pipeline stage.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StageMetrics {
    pub p2p_msgs: u64,
    pub p2p_bytes: u64,
    pub recv_msgs: u64,
    pub recv_bytes: u64,
    pub collectives: u64,
    pub collective_bytes: u64,
    /// Bytes of globally replicated data this rank had to hold.
    pub replicated_bytes: u64,
}

impl StageMetrics {
    pub fn add(&mut self, other: &StageMetrics) {
        self.p2p_msgs += other.p2p_msgs;
        self.p2p_bytes += other.p2p_bytes;
        self.recv_msgs += other.recv_msgs;
        self.recv_bytes += other.recv_bytes;
        self.collectives += other.collectives;
        self.collective_bytes += other.collective_bytes;
        self.replicated_bytes += other.replicated_bytes;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Metrics {
    /// Stage names in first-use order.
    pub stages: Vec<String>,
    pub per_rank: Vec<BTreeMap<String, StageMetrics>>,
    /// Global count of collective operations per stage and kind.
    pub collective_calls: BTreeMap<(String, CollectiveKind), u64>,
    pub supersteps: u64,
}

impl Metrics {
    pub fn new(size: usize) -> Self {
        Metrics {
            per_rank: vec![BTreeMap::new(); size],
            ..Default::default()
        }
    }

    pub fn num_ranks(&self) -> usize {
        self.per_rank.len()
    }

    pub(crate) fn note_stage(&mut self, stage: &str) {
        if !self.stages.iter().any(|s| s == stage) {
            self.stages.push(stage.to_string());
        }
    }

    pub fn rank_stage(&self, rank: usize, stage: &str) -> StageMetrics {
        self.per_rank[rank].get(stage).cloned().unwrap_or_default()
    }

    pub fn rank_total(&self, rank: usize) -> StageMetrics {
        let mut t = StageMetrics::default();
        for m in self.per_rank[rank].values() {
            t.add(m);
        }
        t
    }

    pub fn stage_total(&self, stage: &str) -> StageMetrics {
        let mut t = StageMetrics::default();
        for r in 0..self.per_rank.len() {
            t.add(&self.rank_stage(r, stage));
        }
        t
    }

    pub fn total(&self) -> StageMetrics {
        let mut t = StageMetrics::default();
        for r in 0..self.per_rank.len() {
            t.add(&self.rank_total(r));
        }
        t
    }

    pub fn collective_count(&self, stage: Option<&str>, kind: CollectiveKind) -> u64 {
        self.collective_calls
            .iter()
            .filter(|((s, k), _)| *k == kind && stage.is_none_or(|st| st == s))
            .map(|(_, n)| n)
            .sum()
    }

    /// Appends the counters of a later run (same rank count) to this one.
    pub fn merge(&mut self, other: &Metrics) {
        for s in &other.stages {
            self.note_stage(s);
        }
        if self.per_rank.len() < other.per_rank.len() {
            self.per_rank.resize(other.per_rank.len(), BTreeMap::new());
        }
        for (mine, theirs) in self.per_rank.iter_mut().zip(&other.per_rank) {
            for (stage, m) in theirs {
                mine.entry(stage.clone()).or_default().add(m);
            }
        }
        for (k, n) in &other.collective_calls {
            *self.collective_calls.entry(k.clone()).or_default() += n;
        }
        self.supersteps += other.supersteps;
    }

    /// CSV with header `rank,stage,p2p_msgs,p2p_bytes,collectives,collective_bytes,replicated_bytes`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,stage,p2p_msgs,p2p_bytes,collectives,collective_bytes,replicated_bytes\n");
        for (rank, stages) in self.per_rank.iter().enumerate() {
            for stage in &self.stages {
                let m = stages.get(stage).cloned().unwrap_or_default();
                let _ = writeln!(
                    out,
                    "{rank},{stage},{},{},{},{},{}",
                    m.p2p_msgs, m.p2p_bytes, m.collectives, m.collective_bytes, m.replicated_bytes
                );
            }
        }
        out
    }
}
