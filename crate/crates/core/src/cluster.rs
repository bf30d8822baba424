//! Tetrahedral cluster model, reduce schedules and their cost.
//!
//! Four groups of nodes sit at the corners of a tetrahedron; every pair of
//! groups shares one switch and every node has one NIC per incident switch.
//! A server node joins the cluster through a gigabit uplink and hosts the
//! master process.
//!
//! Correctness and timing are separate: [`execute_reduce`] moves real
//! payloads along a [`ReducePlan`] in declared order, [`cost_of`] prices the
//! same plan with a per-link bandwidth model.
//!
//! Bandwidths in megabits use `1 Mb = 2^20` bits; vector sizes are bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MEGABIT: f64 = (1u64 << 20) as f64;
const MEBIBYTE: f64 = (1u64 << 20) as f64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterTopology {
    pub groups: usize,
    pub nodes_per_group: usize,
    pub procs_per_node: usize,
    pub nics_per_node: usize,
    /// One switch per unordered group pair, in lexicographic order.
    pub switches: Vec<(usize, usize)>,
    /// Processes on the server node; the first is the master.
    pub server_procs: usize,
}

/// The 4 × 24 × 2 instance with a two-process server node.
pub fn build_bunyip() -> ClusterTopology {
    ClusterTopology::tetrahedral(4, 24, 2, 2).expect("canonical topology is valid")
}

impl ClusterTopology {
    /// Fully connected group graph with one NIC per other group.
    pub fn tetrahedral(
        groups: usize,
        nodes_per_group: usize,
        procs_per_node: usize,
        server_procs: usize,
    ) -> Result<Self> {
        let mut switches = Vec::new();
        for a in 0..groups {
            for b in a + 1..groups {
                switches.push((a, b));
            }
        }
        let t = ClusterTopology {
            groups,
            nodes_per_group,
            procs_per_node,
            nics_per_node: groups.saturating_sub(1),
            switches,
            server_procs,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups < 2 || self.nodes_per_group == 0 || self.procs_per_node == 0 {
            return Err(Error::Plan(format!(
                "degenerate topology: {} groups × {} nodes × {} procs",
                self.groups, self.nodes_per_group, self.procs_per_node
            )));
        }
        if self.server_procs == 0 {
            return Err(Error::Plan("the server must host the master process".into()));
        }
        if self.nics_per_node != self.groups - 1 {
            return Err(Error::Plan(format!(
                "{} NICs per node cannot face {} other groups",
                self.nics_per_node,
                self.groups - 1
            )));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &self.switches {
            if a >= self.groups || b >= self.groups || a == b {
                return Err(Error::Plan(format!("switch ({a}, {b}) is not a group pair")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Plan(format!("group pair ({a}, {b}) has two switches")));
            }
        }
        if seen.len() != self.groups * (self.groups - 1) / 2 {
            return Err(Error::Plan("some group pair shares no switch".into()));
        }
        Ok(())
    }

    pub fn compute_nodes(&self) -> usize {
        self.groups * self.nodes_per_group
    }

    pub fn server_node(&self) -> usize {
        self.compute_nodes()
    }

    pub fn worker_procs(&self) -> usize {
        self.compute_nodes() * self.procs_per_node
    }

    pub fn total_procs(&self) -> usize {
        self.worker_procs() + self.server_procs
    }

    pub fn master(&self) -> usize {
        self.worker_procs()
    }

    pub fn node_of_group(&self, group: usize, index: usize) -> usize {
        group * self.nodes_per_group + index
    }

    pub fn group_of(&self, node: usize) -> Option<usize> {
        (node < self.compute_nodes()).then(|| node / self.nodes_per_group)
    }

    pub fn proc_of(&self, node: usize, local: usize) -> usize {
        if node == self.server_node() {
            self.worker_procs() + local
        } else {
            node * self.procs_per_node + local
        }
    }

    pub fn node_of_proc(&self, proc: usize) -> usize {
        if proc >= self.worker_procs() {
            self.server_node()
        } else {
            proc / self.procs_per_node
        }
    }

    /// Index of the NIC of a `group` node that faces `other`.
    pub fn nic_facing(&self, group: usize, other: usize) -> Option<usize> {
        if group == other || group >= self.groups || other >= self.groups {
            return None;
        }
        Some(if other < group { other } else { other - 1 })
    }

    /// The switch reached by NIC `nic` of a node in `group`.
    pub fn switch_of_nic(&self, group: usize, nic: usize) -> Option<usize> {
        let other = (0..self.groups).filter(|&g| g != group).nth(nic)?;
        let key = (group.min(other), group.max(other));
        self.switches.iter().position(|&(a, b)| (a.min(b), a.max(b)) == key)
    }

    /// Minimum over balanced group bipartitions of the crossing switch
    /// capacity.
    pub fn bisection_bandwidth(&self, switch_gbps: f64) -> f64 {
        let half = self.groups / 2;
        let mut best = f64::INFINITY;
        for mask in 0u32..(1u32 << self.groups) {
            if mask.count_ones() as usize != half {
                continue;
            }
            let cut = self
                .switches
                .iter()
                .filter(|&&(a, b)| ((mask >> a) & 1) != ((mask >> b) & 1))
                .count();
            best = best.min(cut as f64 * switch_gbps);
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Channel {
    /// Shared memory between processes of one node.
    Shm,
    /// 100 Mb/s NIC to NIC through the switch both attach to.
    Nic { src_nic: usize, dst_nic: usize },
    /// Into the server's gigabit uplink, leaving the sender on `nic`.
    Gigabit { nic: usize },
    /// Library point-to-point message over TCP.
    Tcp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub src: usize,
    pub dst: usize,
    pub channel: Channel,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub transfers: Vec<Transfer>,
    /// Senders start unevenly; the stage pays the calibrated wait.
    pub sync_slack: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    Naive,
    Logn,
    Bunyip,
}

impl fmt::Display for PlanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlanKind::Naive => "naive",
            PlanKind::Logn => "logn",
            PlanKind::Bunyip => "bunyip",
        })
    }
}

impl std::str::FromStr for PlanKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(PlanKind::Naive),
            "logn" => Ok(PlanKind::Logn),
            "bunyip" => Ok(PlanKind::Bunyip),
            _ => Err(Error::Invalid(format!("unknown plan '{s}' (naive, logn, bunyip)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducePlan {
    pub kind: PlanKind,
    pub n_procs: usize,
    pub master: usize,
    pub stages: Vec<Stage>,
}

impl ReducePlan {
    pub fn transfer_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.transfers.len()).collect()
    }

    /// Checks that every process but the master sends exactly once, never
    /// after it has been drained, and only to a process still holding data.
    pub fn validate(&self) -> Result<()> {
        let mut live = vec![true; self.n_procs];
        for (si, stage) in self.stages.iter().enumerate() {
            let mut senders = BTreeSet::new();
            for t in &stage.transfers {
                if t.src >= self.n_procs || t.dst >= self.n_procs || t.src == t.dst {
                    return Err(Error::Plan(format!("stage {}: bad transfer {t:?}", si + 1)));
                }
                if !live[t.src] || !live[t.dst] || !senders.insert(t.src) {
                    return Err(Error::Plan(format!(
                        "stage {}: transfer {} -> {} touches a drained process",
                        si + 1,
                        t.src,
                        t.dst
                    )));
                }
            }
            for &s in &senders {
                live[s] = false;
            }
        }
        let holders: Vec<usize> = (0..self.n_procs).filter(|&p| live[p]).collect();
        if holders != [self.master] {
            return Err(Error::Plan(format!(
                "after the last stage {} processes still hold data",
                holders.len()
            )));
        }
        Ok(())
    }

    /// No NIC endpoint, shared-memory segment or TCP endpoint appears twice
    /// in one stage. The server uplink is a shared ingress and exempt.
    pub fn check_no_conflict(&self, topo: &ClusterTopology) -> Result<()> {
        for (si, stage) in self.stages.iter().enumerate() {
            let mut used = BTreeSet::new();
            for t in &stage.transfers {
                let (sn, dn) = (topo.node_of_proc(t.src), topo.node_of_proc(t.dst));
                let keys: Vec<(u8, usize, usize)> = match t.channel {
                    Channel::Shm => vec![(0, t.src, sn)],
                    Channel::Nic { src_nic, dst_nic } => vec![(1, sn, src_nic), (2, dn, dst_nic)],
                    Channel::Gigabit { nic } if sn != topo.server_node() => vec![(1, sn, nic)],
                    Channel::Gigabit { .. } => vec![],
                    Channel::Tcp => vec![(3, t.src, 0), (4, t.dst, 0)],
                };
                for k in keys {
                    if !used.insert(k) {
                        return Err(Error::Plan(format!(
                            "stage {}: transfer {} -> {} reuses a busy channel",
                            si + 1,
                            t.src,
                            t.dst
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn plan(kind: PlanKind, topo: &ClusterTopology) -> Result<ReducePlan> {
    match kind {
        PlanKind::Naive => plan_naive(topo),
        PlanKind::Logn => plan_logn(topo),
        PlanKind::Bunyip => plan_bunyip(topo),
    }
}

/// Every process sends straight to the master over the gigabit uplink.
pub fn plan_naive(topo: &ClusterTopology) -> Result<ReducePlan> {
    topo.validate()?;
    let master = topo.master();
    let transfers = (0..topo.total_procs())
        .filter(|&p| p != master)
        .map(|p| Transfer {
            src: p,
            dst: master,
            channel: Channel::Gigabit {
                nic: if p < topo.worker_procs() { (p % topo.procs_per_node) % topo.nics_per_node } else { 0 },
            },
        })
        .collect();
    Ok(ReducePlan {
        kind: PlanKind::Naive,
        n_procs: topo.total_procs(),
        master,
        stages: vec![Stage {
            transfers,
            sync_slack: false,
        }],
    })
}

/// Binomial tree over ranks: the master, the other server processes, then
/// compute processes node by node.
pub fn plan_logn(topo: &ClusterTopology) -> Result<ReducePlan> {
    topo.validate()?;
    let n = topo.total_procs();
    let rank_to_proc: Vec<usize> = (topo.worker_procs()..n).chain(0..topo.worker_procs()).collect();
    let mut stages = Vec::new();
    let mut span = 1usize;
    while span < n {
        let transfers = (0..n)
            .filter(|r| r % (2 * span) == span)
            .map(|r| Transfer {
                src: rank_to_proc[r],
                dst: rank_to_proc[r - span],
                channel: Channel::Tcp,
            })
            .collect();
        stages.push(Stage {
            transfers,
            sync_slack: false,
        });
        span *= 2;
    }
    Ok(ReducePlan {
        kind: PlanKind::Logn,
        n_procs: n,
        master: topo.master(),
        stages,
    })
}

/// The four-stage topology-aware reduce.
///
/// 1. Shared memory folds every node's processes into its first process.
/// 2. Node `i` of group 0 sends to node `i` of group 1, and group 2 to
///    group 3, each over the NIC pair on their common switch.
/// 3. Groups 1 and 3 split into sets of `nics + 1` nodes; the set's first
///    node receives from the others simultaneously, one per NIC.
/// 4. The set roots send to the master through the gigabit uplink.
pub fn plan_bunyip(topo: &ClusterTopology) -> Result<ReducePlan> {
    topo.validate()?;
    let set = topo.nics_per_node + 1;
    if topo.groups != 4 || !topo.nodes_per_group.is_multiple_of(set) {
        return Err(Error::Plan(format!(
            "the four-stage reduce needs 4 groups with node counts divisible by {set}"
        )));
    }
    let lead = |node: usize| topo.proc_of(node, 0);

    let mut s1 = Vec::new();
    for node in 0..=topo.compute_nodes() {
        let locals = if node == topo.server_node() { topo.server_procs } else { topo.procs_per_node };
        for l in 1..locals {
            s1.push(Transfer {
                src: topo.proc_of(node, l),
                dst: lead(node),
                channel: Channel::Shm,
            });
        }
    }

    let mut s2 = Vec::new();
    for (from, to) in [(0usize, 1usize), (2, 3)] {
        let src_nic = topo.nic_facing(from, to).expect("distinct groups");
        let dst_nic = topo.nic_facing(to, from).expect("distinct groups");
        for i in 0..topo.nodes_per_group {
            s2.push(Transfer {
                src: lead(topo.node_of_group(from, i)),
                dst: lead(topo.node_of_group(to, i)),
                channel: Channel::Nic { src_nic, dst_nic },
            });
        }
    }

    let mut s3 = Vec::new();
    let mut roots = Vec::new();
    for g in [1usize, 3] {
        for base in (0..topo.nodes_per_group).step_by(set) {
            let root = topo.node_of_group(g, base);
            roots.push((g, root));
            for j in 0..topo.nics_per_node {
                s3.push(Transfer {
                    src: lead(topo.node_of_group(g, base + 1 + j)),
                    dst: lead(root),
                    channel: Channel::Nic { src_nic: j, dst_nic: j },
                });
            }
        }
    }

    let s4 = roots
        .into_iter()
        .map(|(g, root)| Transfer {
            src: lead(root),
            dst: topo.master(),
            channel: Channel::Gigabit {
                nic: topo.nic_facing(g, g - 1).expect("distinct groups"),
            },
        })
        .collect();

    Ok(ReducePlan {
        kind: PlanKind::Bunyip,
        n_procs: topo.total_procs(),
        master: topo.master(),
        stages: vec![
            Stage { transfers: s1, sync_slack: false },
            Stage { transfers: s2, sync_slack: false },
            Stage { transfers: s3, sync_slack: false },
            Stage { transfers: s4, sync_slack: true },
        ],
    })
}

/// Runs the plan on real payloads and returns the master's vector.
///
/// Each transfer adds the sender's vector into the receiver's, in stage
/// order and then transfer order, so float results are reproducible.
pub fn execute_reduce<T>(plan: &ReducePlan, vectors: Vec<Vec<T>>) -> Result<Vec<T>>
where
    T: Copy + AddAssign,
{
    if vectors.len() != plan.n_procs {
        return Err(Error::Plan(format!(
            "plan covers {} processes but {} vectors were supplied",
            plan.n_procs,
            vectors.len()
        )));
    }
    let len = vectors.first().map_or(0, Vec::len);
    if let Some((p, v)) = vectors.iter().enumerate().find(|(_, v)| v.len() != len) {
        return Err(Error::Plan(format!("process {p} holds {} elements, expected {len}", v.len())));
    }
    let mut held: Vec<Option<Vec<T>>> = vectors.into_iter().map(Some).collect();
    for (si, stage) in plan.stages.iter().enumerate() {
        for t in &stage.transfers {
            let src = held
                .get_mut(t.src)
                .and_then(Option::take)
                .ok_or_else(|| Error::Plan(format!("stage {}: process {} has nothing to send", si + 1, t.src)))?;
            let dst = held
                .get_mut(t.dst)
                .and_then(Option::as_mut)
                .ok_or_else(|| Error::Plan(format!("stage {}: process {} cannot receive", si + 1, t.dst)))?;
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    let result = held
        .get_mut(plan.master)
        .and_then(Option::take)
        .ok_or_else(|| Error::Plan("the master ended without data".into()))?;
    if let Some(p) = held.iter().position(Option::is_some) {
        return Err(Error::Plan(format!("process {p} never contributed")));
    }
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// MiB/s through shared memory.
    pub shm_bandwidth: f64,
    /// Mb/s per NIC.
    pub nic_bandwidth: f64,
    pub nic_efficiency: f64,
    /// Fraction of the summed NIC bandwidth a node can absorb at once.
    pub multi_nic_agg_efficiency: f64,
    /// Mb/s into the server.
    pub gigabit_bandwidth: f64,
    /// Fraction of NIC bandwidth a library TCP message achieves.
    pub library_efficiency: f64,
    /// Synchronization wait added to stages flagged with slack.
    pub gigabit_stage_seconds: f64,
    pub add_seconds_per_vector: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            shm_bandwidth: 37.7,
            nic_bandwidth: 100.0,
            nic_efficiency: 0.8,
            multi_nic_agg_efficiency: 185.0 / 300.0,
            gigabit_bandwidth: 1024.0,
            library_efficiency: 0.5,
            gigabit_stage_seconds: 2.495,
            add_seconds_per_vector: 0.005,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.shm_bandwidth, self.nic_bandwidth, self.gigabit_bandwidth];
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Invalid("bandwidths must be positive".into()));
        }
        let effs = [self.nic_efficiency, self.multi_nic_agg_efficiency, self.library_efficiency];
        if effs.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            return Err(Error::Invalid("efficiencies must lie in (0, 1]".into()));
        }
        if self.gigabit_stage_seconds < 0.0 || self.add_seconds_per_vector < 0.0 {
            return Err(Error::Invalid("calibrated constants must be non-negative".into()));
        }
        Ok(())
    }

    fn nic_bytes_per_sec(&self) -> f64 {
        self.nic_bandwidth * MEGABIT / 8.0 * self.nic_efficiency
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Link {
    Shm(usize),
    NicOut(usize, usize),
    NicIn(usize, usize),
    NodeIn(usize),
    ServerIn,
    TcpOut(usize),
    TcpIn(usize),
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Link::Shm(n) => write!(f, "shm node {n}"),
            Link::NicOut(n, k) => write!(f, "node {n} nic {k} out"),
            Link::NicIn(n, k) => write!(f, "node {n} nic {k} in"),
            Link::NodeIn(n) => write!(f, "node {n} aggregate in"),
            Link::ServerIn => f.write_str("server gigabit in"),
            Link::TcpOut(p) => write!(f, "proc {p} tcp out"),
            Link::TcpIn(p) => write!(f, "proc {p} tcp in"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageCost {
    pub stage: usize,
    pub transfers: usize,
    pub seconds: f64,
    pub bottleneck: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub plan: PlanKind,
    pub vector_bytes: u64,
    pub stages: Vec<StageCost>,
    pub total_seconds: f64,
}

pub const COST_CSV_HEADER: &str = "plan,stage,transfers,seconds";

impl CostReport {
    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(w, "{COST_CSV_HEADER}")?;
        }
        for s in &self.stages {
            writeln!(w, "{},{},{},{:.6}", self.plan, s.stage, s.transfers, s.seconds)?;
        }
        Ok(())
    }
}

/// Prices every stage as its slowest link plus one vector add (adds overlap
/// the arrivals) plus the slack constant when flagged.
pub fn cost_of(plan: &ReducePlan, topo: &ClusterTopology, vector_bytes: u64, model: &CostModel) -> Result<CostReport> {
    if vector_bytes == 0 {
        return Err(Error::Invalid("vector_bytes must be positive".into()));
    }
    model.validate()?;
    let bytes = vector_bytes as f64;
    let nic = model.nic_bytes_per_sec();
    let agg = model.nics_as_node_ingress(topo);
    let rate = |l: &Link| -> f64 {
        match l {
            Link::Shm(_) => model.shm_bandwidth * MEBIBYTE,
            Link::NicOut(..) | Link::NicIn(..) => nic,
            Link::NodeIn(_) => agg,
            Link::ServerIn => model.gigabit_bandwidth * MEGABIT / 8.0,
            Link::TcpOut(_) | Link::TcpIn(_) => model.nic_bandwidth * MEGABIT / 8.0 * model.library_efficiency,
        }
    };
    let mut stages = Vec::with_capacity(plan.stages.len());
    for (si, stage) in plan.stages.iter().enumerate() {
        let mut load: BTreeMap<Link, f64> = BTreeMap::new();
        for t in &stage.transfers {
            let (sn, dn) = (topo.node_of_proc(t.src), topo.node_of_proc(t.dst));
            let links: Vec<Link> = match t.channel {
                Channel::Shm => vec![Link::Shm(sn)],
                Channel::Nic { src_nic, dst_nic } => {
                    vec![Link::NicOut(sn, src_nic), Link::NicIn(dn, dst_nic), Link::NodeIn(dn)]
                }
                Channel::Gigabit { nic } if sn != topo.server_node() => vec![Link::NicOut(sn, nic), Link::ServerIn],
                Channel::Gigabit { .. } => vec![Link::ServerIn],
                Channel::Tcp => vec![Link::TcpOut(t.src), Link::TcpIn(t.dst)],
            };
            for l in links {
                *load.entry(l).or_default() += bytes;
            }
        }
        let (bottleneck, transfer_secs) = load
            .iter()
            .map(|(l, b)| (l.to_string(), b / rate(l)))
            .fold((String::from("none"), 0.0f64), |acc, x| if x.1 > acc.1 { x } else { acc });
        let mut seconds = transfer_secs;
        if !stage.transfers.is_empty() {
            seconds += model.add_seconds_per_vector;
        }
        if stage.sync_slack {
            seconds += model.gigabit_stage_seconds;
        }
        stages.push(StageCost {
            stage: si + 1,
            transfers: stage.transfers.len(),
            seconds,
            bottleneck,
        });
    }
    let total_seconds = stages.iter().map(|s| s.seconds).sum();
    Ok(CostReport {
        plan: plan.kind,
        vector_bytes,
        stages,
        total_seconds,
    })
}

impl CostModel {
    fn nics_as_node_ingress(&self, topo: &ClusterTopology) -> f64 {
        topo.nics_per_node as f64 * self.nic_bandwidth * MEGABIT / 8.0 * self.multi_nic_agg_efficiency
    }
}

/// Time of a binomial-tree library reduce over `procs` processes.
pub fn logn_reduce_seconds(procs: usize, vector_bytes: u64, model: &CostModel) -> f64 {
    if procs <= 1 {
        return 0.0;
    }
    let stages = usize::BITS - (procs - 1).leading_zeros();
    let per_stage = vector_bytes as f64 / (model.nic_bandwidth * MEGABIT / 8.0 * model.library_efficiency)
        + model.add_seconds_per_vector;
    stages as f64 * per_stage
}

/// Inputs of the speedup curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeedupCfg {
    pub n_i: usize,
    pub n_h: usize,
    pub n_o: usize,
    /// Processes computing gradients.
    pub procs: usize,
    /// Sustained gradient flop rate of one process.
    pub flops_per_proc: f64,
}

impl Default for SpeedupCfg {
    fn default() -> Self {
        SpeedupCfg {
            n_i: 400,
            n_h: 480,
            n_o: 3203,
            procs: 193,
            // 9,264,000 patterns fill 446 s of gradient work on 193 processes.
            flops_per_proc: 1.0754e9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpeedupPoint {
    pub n_patterns: usize,
    pub grad_seconds: f64,
    pub library_seconds: f64,
    pub optimised_seconds: f64,
    pub speedup: f64,
}

pub const SPEEDUP_CSV_HEADER: &str = "n_patterns,grad_seconds,library_seconds,optimised_seconds,speedup";

/// `(T_grad + T_logn) / (T_grad + T_bunyip)` for each pattern count.
pub fn reduce_speedup_curve(
    n_patterns: &[usize],
    cfg: &SpeedupCfg,
    model: &CostModel,
) -> Result<Vec<SpeedupPoint>> {
    let topo = build_bunyip();
    let bytes = 4 * crate::nn::param_count(cfg.n_i, cfg.n_h, cfg.n_o) as u64;
    let lib = cost_of(&plan_logn(&topo)?, &topo, bytes, model)?.total_seconds;
    let opt = cost_of(&plan_bunyip(&topo)?, &topo, bytes, model)?.total_seconds;
    if cfg.procs == 0 || !(cfg.flops_per_proc > 0.0) {
        return Err(Error::Invalid("speedup needs positive procs and flop rate".into()));
    }
    n_patterns
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::Invalid("pattern counts must be positive".into()));
            }
            let flops = crate::nn::gradient_flops(n, cfg.n_i, cfg.n_h, cfg.n_o)? as f64;
            let t = flops / (cfg.procs as f64 * cfg.flops_per_proc);
            Ok(SpeedupPoint {
                n_patterns: n,
                grad_seconds: t,
                library_seconds: lib,
                optimised_seconds: opt,
                speedup: (t + lib) / (t + opt),
            })
        })
        .collect()
}

pub fn write_speedup_csv<W: Write>(mut w: W, points: &[SpeedupPoint]) -> std::io::Result<()> {
    writeln!(w, "{SPEEDUP_CSV_HEADER}")?;
    for p in points {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6}",
            p.n_patterns, p.grad_seconds, p.library_seconds, p.optimised_seconds, p.speedup
        )?;
    }
    Ok(())
}

/// Topology plus the bandwidth table, as written to the topology file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    #[serde(flatten)]
    pub topology: ClusterTopology,
    pub bandwidth: CostModel,
}

pub fn topology_json(topo: &ClusterTopology, model: &CostModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(&TopologyFile {
        topology: topo.clone(),
        bandwidth: *model,
    })?)
}
