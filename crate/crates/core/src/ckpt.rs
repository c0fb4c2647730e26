//! Low-rank activation checkpointing.
//!
//! The forward pass keeps only the plan's checkpoint slots. During the
//! backward sweep every tensor the backward needs but did not keep is
//! rebuilt from those slots by re-running the producing steps; collectives
//! hit on the way are traced as re-forward traffic.
//!
//! Recompute cost is recompute FLOPs plus `comm_weight` FLOP-equivalents per
//! re-forward collective element. The default weight is the ratio of a
//! bf16 tensor-core peak (312 TFLOP/s) to an intra-node link carrying
//! 150 G elements/s (300 GB/s of 2-byte elements), about 2080.

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::comm::{Comm, Pass, Trace};
use crate::error::{Error, Result};
use crate::model::{attention_prob_elements, DecoderBlockWeights, RankPaths, Variant};
use crate::plan::{NormMode, ShardPlan, Step, Strategy};
use crate::sim::{distribute_paths, Machine};
use crate::tensor::Tensor;

pub const DEFAULT_COMM_WEIGHT: u64 = 2080;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CkptPolicy {
    None,
    LowRankBoundary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CkptReport {
    pub policy: CkptPolicy,
    pub strategy: Strategy,
    pub stored_without_ckpt: u64,
    pub stored_with_ckpt: u64,
    pub delta_mem: u64,
    pub recompute_flops: u64,
    pub reforward_collectives: u64,
    pub reforward_comm_elements: u64,
    pub comm_weight: u64,
    /// `recompute_flops + comm_weight * reforward_comm_elements`.
    pub recompute_cost: u64,
}

impl CkptReport {
    fn none(strategy: Strategy, stored: u64) -> Self {
        Self {
            policy: CkptPolicy::None,
            strategy,
            stored_without_ckpt: stored,
            stored_with_ckpt: stored,
            delta_mem: 0,
            recompute_flops: 0,
            reforward_collectives: 0,
            reforward_comm_elements: 0,
            comm_weight: DEFAULT_COMM_WEIGHT,
            recompute_cost: 0,
        }
    }

    /// Saved elements per unit of recompute cost.
    pub fn eff(&self) -> Result<Ratio<u128>> {
        eff_ckpt(self)
    }

    /// Saved elements per recompute FLOP, ignoring re-forward traffic.
    pub fn eff_flops_only(&self) -> Result<Ratio<u128>> {
        ratio(self.delta_mem, self.recompute_flops)
    }
}

fn ratio(num: u64, den: u64) -> Result<Ratio<u128>> {
    if den == 0 {
        return Err(Error::DivisionByZero("nothing was recomputed".into()));
    }
    Ok(Ratio::new(num as u128, den as u128))
}

/// Memory saved per unit of recompute cost.
pub fn eff_ckpt(report: &CkptReport) -> Result<Ratio<u128>> {
    ratio(report.delta_mem, report.recompute_cost)
}

/// Slots the backward pass of one block reads.
pub fn saved_slots(plan: &ShardPlan) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for (_, step) in plan.steps() {
        match step {
            Step::Linear { .. } | Step::GroupedLinear { .. } | Step::BatchedLinear { .. } => {
                out.extend(step.inputs())
            }
            Step::Norm { src, site, mode, .. } => {
                out.insert(src.clone());
                if *mode != NormMode::Replicated {
                    out.insert(site.stat_slot());
                }
            }
            Step::Bottleneck { src, .. } if plan.variant == Variant::Cola => {
                out.insert(src.clone());
            }
            Step::Attention { q, k, v, .. } => {
                out.extend([q.clone(), k.clone(), v.clone()]);
            }
            Step::Swiglu { gate, up, .. } => {
                out.extend([gate.clone(), up.clone()]);
            }
            _ => {}
        }
    }
    out
}

/// Attention probabilities kept by every attention step, all ranks.
fn attention_internal_elements(plan: &ShardPlan) -> u64 {
    let (b, s, tp) = (plan.shape.b, plan.shape.s, plan.shape.tp as u64);
    plan.steps()
        .iter()
        .map(|(_, st)| match st {
            Step::Attention { heads, .. } => attention_prob_elements(b, s, *heads) * tp,
            _ => 0,
        })
        .sum()
}

/// Stored-activation elements of one block without checkpointing.
pub fn saved_elements(plan: &ShardPlan, m: &Machine) -> Result<u64> {
    let mut total = attention_internal_elements(plan);
    for slot in saved_slots(plan) {
        let n = m.slot_elements(&slot);
        if n == 0 {
            return Err(Error::Simulation(format!("saved slot `{slot}` was never written")));
        }
        total += n;
    }
    Ok(total)
}

/// Indices (into `plan.steps()`) of the steps a backward sweep re-runs when
/// only the checkpoint slots were kept.
pub fn reforward_steps(plan: &ShardPlan) -> Result<Vec<usize>> {
    let steps = plan.steps();
    let available: BTreeSet<String> = plan
        .ckpt_slots
        .iter()
        .cloned()
        .chain(std::iter::once("x".to_string()))
        .collect();
    let mut producer = BTreeMap::new();
    for (i, (_, s)) in steps.iter().enumerate() {
        for out in s.outputs() {
            producer.entry(out).or_insert(i);
        }
    }
    let mut selected = BTreeSet::new();
    let mut work: Vec<String> = saved_slots(plan).into_iter().collect();
    for (i, (_, s)) in steps.iter().enumerate() {
        // attention keeps internal state, so it always runs again
        if matches!(s, Step::Attention { .. }) && selected.insert(i) {
            work.extend(s.inputs());
        }
    }
    while let Some(slot) = work.pop() {
        if available.contains(&slot) {
            continue;
        }
        let i = *producer
            .get(&slot)
            .ok_or_else(|| Error::Simulation(format!("no step produces `{slot}`")))?;
        if selected.insert(i) {
            work.extend(steps[i].1.inputs());
        }
    }
    Ok(selected.into_iter().collect())
}

/// Run one block under `policy`, simulate the backward sweep's re-forward,
/// and report memory and recompute cost.
pub fn run_with_ckpt(
    plan: &ShardPlan,
    block: &DecoderBlockWeights,
    x: &Tensor,
    policy: CkptPolicy,
) -> Result<(Tensor, Trace, CkptReport)> {
    run_with_ckpt_weighted(plan, block, x, None, policy, DEFAULT_COMM_WEIGHT)
}

pub fn run_with_ckpt_weighted(
    plan: &ShardPlan,
    block: &DecoderBlockWeights,
    x: &Tensor,
    h_prev: Option<&RankPaths>,
    policy: CkptPolicy,
    comm_weight: u64,
) -> Result<(Tensor, Trace, CkptReport)> {
    if policy == CkptPolicy::LowRankBoundary && (!plan.variant.is_low_rank() || plan.ckpt_slots.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "low-rank checkpointing needs a low-rank variant, plan runs {}",
            plan.variant
        )));
    }
    let mut comm = Comm::new(plan.element_bytes);
    let mut fwd = Machine::new(plan, block)?;
    fwd.load_input(x)?;
    let h_split = h_prev.map(|h| distribute_paths(plan, h)).transpose()?;
    if let Some(h) = &h_split {
        fwd.load_h_prev(h.clone());
    }
    let steps = plan.steps();
    fwd.run(&steps, &mut comm)?;
    let stored_without = saved_elements(plan, &fwd)?;
    fwd.run(&plan.finale_steps(), &mut comm)?;
    let (b, s, d) = (plan.shape.b, plan.shape.s, plan.cfg.d);
    let y = fwd.replicated(&plan.output)?.reshape(&[b, s, d])?;

    if policy == CkptPolicy::None {
        comm.trace.stored_elements = stored_without;
        return Ok((y, comm.trace, CkptReport::none(plan.strategy, stored_without)));
    }

    let stored_with: u64 = plan.ckpt_slots.iter().map(|c| fwd.slot_elements(c)).sum();
    comm.trace.stored_elements = stored_with;

    let mut re = Machine::new(plan, block)?;
    for slot in &plan.ckpt_slots {
        let per_rank = fwd
            .ranks
            .iter()
            .map(|r| r.slot(slot).cloned())
            .collect::<Result<Vec<_>>>()?;
        re.load_sharded(slot, per_rank, fwd.layouts[slot]);
    }
    if let Some(h) = h_split {
        re.load_h_prev(h);
    }
    let picked = reforward_steps(plan)?;
    let subset: Vec<(&str, &Step)> = picked.iter().map(|&i| steps[i]).collect();
    comm.set_pass(Pass::Reforward);
    let before = comm.trace.records.len();
    re.run(&subset, &mut comm)?;
    for (_, step) in &subset {
        for slot in step.outputs() {
            for (a, b) in fwd.ranks.iter().zip(&re.ranks) {
                if !a.slot(&slot)?.bit_eq(b.slot(&slot)?) {
                    return Err(Error::Simulation(format!(
                        "recomputed `{slot}` differs from the forward value on rank {}",
                        a.rank
                    )));
                }
            }
        }
    }
    let reforward = &comm.trace.records[before..];
    let comm_elements: u64 = reforward.iter().map(|r| r.elements + r.stat_elements).sum();
    let flops = comm.trace.reforward.gemm_flops + comm.trace.reforward.attention_flops;
    let report = CkptReport {
        policy,
        strategy: plan.strategy,
        stored_without_ckpt: stored_without,
        stored_with_ckpt: stored_with,
        delta_mem: stored_without.saturating_sub(stored_with),
        recompute_flops: flops,
        reforward_collectives: reforward.len() as u64,
        reforward_comm_elements: comm_elements,
        comm_weight,
        recompute_cost: flops + comm_weight * comm_elements,
    };
    Ok((y, comm.trace, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_block, input_activations, ModelConfig, RunShape};
    use crate::plan::{plan, PlanOptions};
    use crate::sim::execute_forward;

    fn run(strategy: Strategy, variant: Variant, grouping: bool, policy: CkptPolicy) -> (Tensor, Trace, CkptReport) {
        let cfg = ModelConfig::toy();
        let shape = RunShape::new(2, 8, 2);
        let opts = PlanOptions {
            grouping,
            ..Default::default()
        };
        let p = plan(strategy, variant, &cfg, &shape, opts).unwrap();
        let block = build_block(&cfg, variant, 9);
        let x = input_activations(&cfg, &shape, 9);
        run_with_ckpt(&p, &block, &x, policy).unwrap()
    }

    #[test]
    fn btp_reforward_is_communication_free() {
        for v in Variant::LOW_RANK {
            let (_, trace, rep) = run(Strategy::Btp, v, false, CkptPolicy::LowRankBoundary);
            assert_eq!(rep.reforward_collectives, 0, "{v}");
            assert_eq!(trace.collective_count(Pass::Reforward), 0);
            assert!(rep.recompute_flops > 0);
        }
    }

    #[test]
    fn vanilla_reforward_crosses_chunks() {
        let (_, _, rep) = run(Strategy::VanillaTp, Variant::Svd, false, CkptPolicy::LowRankBoundary);
        assert_eq!(rep.reforward_collectives, 6);
        let (_, _, rep) = run(Strategy::VanillaTp, Variant::Svd, true, CkptPolicy::LowRankBoundary);
        assert_eq!(rep.reforward_collectives, 3);
    }

    #[test]
    fn output_unchanged_by_ckpt() {
        for s in [Strategy::VanillaTp, Strategy::Btp] {
            let (a, _, _) = run(s, Variant::Cola, false, CkptPolicy::LowRankBoundary);
            let (b, _, _) = run(s, Variant::Cola, false, CkptPolicy::None);
            assert!(a.bit_eq(&b));
        }
    }

    #[test]
    fn none_policy_is_free() {
        let (_, _, rep) = run(Strategy::Btp, Variant::Svd, false, CkptPolicy::None);
        assert_eq!((rep.delta_mem, rep.recompute_flops), (0, 0));
        assert!(matches!(eff_ckpt(&rep), Err(Error::DivisionByZero(_))));
    }

    #[test]
    fn ckpt_saves_memory() {
        for s in [Strategy::VanillaTp, Strategy::Btp] {
            for v in Variant::LOW_RANK {
                let (_, _, rep) = run(s, v, false, CkptPolicy::LowRankBoundary);
                assert!(rep.stored_with_ckpt < rep.stored_without_ckpt, "{s} {v}");
            }
        }
    }

    #[test]
    fn btp_more_efficient_than_vanilla() {
        for v in Variant::LOW_RANK {
            let (_, _, b) = run(Strategy::Btp, v, false, CkptPolicy::LowRankBoundary);
            let (_, _, va) = run(Strategy::VanillaTp, v, false, CkptPolicy::LowRankBoundary);
            assert!(b.eff().unwrap() > va.eff().unwrap(), "{v}");
        }
    }

    #[test]
    fn eff_arithmetic() {
        let mut rep = CkptReport::none(Strategy::Btp, 0);
        rep.delta_mem = 100;
        rep.recompute_flops = 50;
        rep.recompute_cost = 50;
        assert_eq!(eff_ckpt(&rep).unwrap(), Ratio::from_integer(2));
    }

    #[test]
    fn full_rank_policy_rejected() {
        let cfg = ModelConfig::toy();
        let shape = RunShape::new(2, 8, 2);
        let p = plan(Strategy::FullRankTp, Variant::FullRank, &cfg, &shape, PlanOptions::default()).unwrap();
        let block = build_block(&cfg, Variant::FullRank, 1);
        let x = input_activations(&cfg, &shape, 1);
        assert!(run_with_ckpt(&p, &block, &x, CkptPolicy::LowRankBoundary).is_err());
        let (y, _, _) = run_with_ckpt(&p, &block, &x, CkptPolicy::None).unwrap();
        assert!(y.bit_eq(&execute_forward(&p, &block, &x).unwrap().y));
    }
}
