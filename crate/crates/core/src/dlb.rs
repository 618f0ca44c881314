//! Dynamic load balancing: per-step cost accounting, the Stop-At-Rise
//! rebalancing decision, and migration-cost-aware repartitioning.
//!
//! Decision logic is replicated-deterministic: every rank computes the same
//! `sar_decide` outcome from the allgathered ledger, and the measured
//! rebalance cost is agreed on by taking the maximum across ranks.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use crate::decomp::{partition_graph_refine, build_graph, Decomposition, RefineParams};
use crate::error::{usage, Result};
use crate::mesh::DistributedGrid;
use crate::particles::ParticleSet;
use crate::transport::World;

/// Per-cell compute and migration costs plus per-step wall times.
/// Each rank fills in the cells it owns; `rebalance` gathers the rest.
#[derive(Clone, Debug)]
pub struct CostLedger {
    /// Compute cost c_i per sub-sub-domain cell (entity count or a measured
    /// time proxy); local contribution, zero for cells owned elsewhere.
    pub cell_cost: Vec<f64>,
    /// Migration cost m_i per cell: bytes (or entities) resident that would
    /// move were the cell reassigned; local contribution.
    pub migration: Vec<f64>,
    /// Per recorded step: wall time of every rank.
    pub step_times: Vec<Vec<f64>>,
}

impl CostLedger {
    pub fn new(ncells: usize) -> CostLedger {
        CostLedger {
            cell_cost: vec![0.0; ncells],
            migration: vec![0.0; ncells],
            step_times: Vec::new(),
        }
    }

    /// Install entity counts as the cost model.
    pub fn set_costs_from_counts(&mut self, counts: &[f64]) {
        self.cell_cost.copy_from_slice(counts);
    }

    /// Measured-time cost model: attribute this rank's step time to its
    /// cells in proportion to their entity counts.
    pub fn set_costs_from_time(&mut self, counts: &[f64], rank_time: f64) {
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            self.cell_cost.fill(0.0);
            return;
        }
        for (c, &n) in self.cell_cost.iter_mut().zip(counts) {
            *c = rank_time * n / total;
        }
    }
}

/// Stop-At-Rise state: rebalance when the amortized per-step cost
/// `W(n) = (C + sum delta_i) / n` first rises.
#[derive(Clone, Debug)]
pub struct SarState {
    steps_since_rebalance: u32,
    cum_degradation: f64,
    w_prev: f64,
    rebalance_cost: f64,
}

impl SarState {
    /// `cost_prior` seeds the rebalance-cost estimate C until the first
    /// measured rebalance.
    pub fn new(cost_prior: f64) -> SarState {
        SarState {
            steps_since_rebalance: 0,
            cum_degradation: 0.0,
            w_prev: f64::INFINITY,
            rebalance_cost: cost_prior,
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps_since_rebalance
    }

    pub fn cumulative_degradation(&self) -> f64 {
        self.cum_degradation
    }

    pub fn rebalance_cost(&self) -> f64 {
        self.rebalance_cost
    }

    /// Amortized per-step cost after the steps recorded so far.
    pub fn w_current(&self) -> f64 {
        if self.steps_since_rebalance == 0 {
            f64::INFINITY
        } else {
            (self.rebalance_cost + self.cum_degradation) / self.steps_since_rebalance as f64
        }
    }

    fn reset(&mut self, measured_cost: f64) {
        self.steps_since_rebalance = 0;
        self.cum_degradation = 0.0;
        self.w_prev = f64::INFINITY;
        self.rebalance_cost = measured_cost;
    }
}

/// Record one step: degradation `delta = max(times) - mean(times)` is
/// appended to the SAR state and the times to the ledger. Returns delta.
pub fn record_step(ledger: &mut CostLedger, sar: &mut SarState, per_rank_times: &[f64]) -> f64 {
    let n = per_rank_times.len().max(1) as f64;
    let max = per_rank_times.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = per_rank_times.iter().sum::<f64>() / n;
    let delta = (max - mean).max(0.0);
    sar.w_prev = sar.w_current();
    sar.cum_degradation += delta;
    sar.steps_since_rebalance += 1;
    ledger.step_times.push(per_rank_times.to_vec());
    delta
}

/// True when `W(n) > W(n-1)` (first rise). `W(0) = +inf`, so a single step
/// never triggers by itself.
pub fn sar_decide(sar: &SarState) -> bool {
    if sar.steps_since_rebalance == 0 {
        return false;
    }
    sar.w_current() > sar.w_prev
}

/// Data structures to migrate when the decomposition changes.
#[derive(Default)]
pub struct RebalanceTargets<'a> {
    pub pset: Option<&'a mut ParticleSet>,
    pub grid: Option<&'a mut DistributedGrid>,
}

/// Repartition with the current assignment as the seed (no de novo
/// decomposition), migrate the targets, and reset the SAR state with the
/// measured (rank-agreed) cost of this rebalance. Migration costs are
/// discounted by `1 / max(1, n)`, amortizing the transfer linearly over the
/// steps since the last rebalance. Returns the new decomposition.
pub fn rebalance(
    world: &mut World,
    decomp: &Arc<Decomposition>,
    ledger: &CostLedger,
    sar: &mut SarState,
    targets: RebalanceTargets<'_>,
) -> Result<Arc<Decomposition>> {
    let ncells = decomp.grid().cell_count();
    if ledger.cell_cost.len() != ncells || ledger.migration.len() != ncells {
        return Err(usage("ledger size does not match the cell grid"));
    }
    let t0 = Instant::now();
    // gather local cost contributions into the replicated global vectors
    let mut local = Vec::with_capacity(ncells * 16);
    for v in ledger.cell_cost.iter().chain(ledger.migration.iter()) {
        local.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    let all = world.allgather(&local)?;
    let mut cost = vec![0.0f64; ncells];
    let mut migration = vec![0.0f64; ncells];
    for buf in all {
        let mut at = 0;
        for slot in cost.iter_mut().chain(migration.iter_mut()) {
            *slot += f64::from_bits(crate::schema::read_u64(&buf, &mut at)?);
        }
    }
    let discount = 1.0 / sar.steps_since_rebalance.max(1) as f64;
    let graph = build_graph(decomp.grid(), &cost, decomp.bc(), decomp.ghost());
    let refined = partition_graph_refine(
        &graph,
        decomp.nranks(),
        decomp.assignment(),
        Some(&migration),
        discount,
        RefineParams::default(),
    );
    let new_decomp = Arc::new(decomp.with_assignment(refined)?);
    if let Some(pset) = targets.pset {
        pset.rebind(world, new_decomp.clone())?;
    }
    if let Some(grid) = targets.grid {
        *grid = grid.redistribute(world, new_decomp.clone())?;
    }
    // agree on the measured cost so every rank resets SAR identically
    let measured = t0.elapsed().as_secs_f64();
    let all = world.allgather(&measured.to_bits().to_le_bytes())?;
    let agreed = all
        .iter()
        .map(|b| f64::from_bits(u64::from_le_bytes(b[..8].try_into().unwrap())))
        .fold(0.0f64, f64::max);
    sar.reset(agreed);
    Ok(new_decomp)
}

/// Appends one CSV row per step: step, per-rank times, delta, W, and
/// whether this step triggered a rebalance.
pub struct LedgerTrace {
    file: std::fs::File,
    wrote_header: bool,
    nranks: usize,
}

impl LedgerTrace {
    pub fn create(path: &std::path::Path, nranks: usize) -> Result<LedgerTrace> {
        let file = std::fs::File::create(path)?;
        Ok(LedgerTrace { file, wrote_header: false, nranks })
    }

    pub fn record(
        &mut self,
        step: usize,
        times: &[f64],
        delta: f64,
        w: f64,
        rebalanced: bool,
    ) -> Result<()> {
        if !self.wrote_header {
            let ranks: Vec<String> = (0..self.nranks).map(|r| format!("t_rank{r}")).collect();
            writeln!(self.file, "step,{},delta,w,rebalanced", ranks.join(","))?;
            self.wrote_header = true;
        }
        let ts: Vec<String> = times.iter().map(|t| format!("{t}")).collect();
        writeln!(
            self.file,
            "{step},{},{delta},{w},{}",
            ts.join(","),
            u8::from(rebalanced)
        )?;
        Ok(())
    }
}
