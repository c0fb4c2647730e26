#![allow(dead_code)]

use lowrank_tp::model::{build_block, input_activations, reference_forward};
use lowrank_tp::plan::plan;
use lowrank_tp::sim::{execute_forward, Execution};
use lowrank_tp::{ModelConfig, PlanOptions, RunShape, ShardPlan, Strategy, Tensor, Variant};

pub const SEED: u64 = 2024;

pub fn toy_cfg(d: usize, d_ff: usize) -> ModelConfig {
    ModelConfig::new(1, 4, d, d_ff, d / 4).unwrap()
}

/// Variants each strategy can run.
pub fn variants(s: Strategy) -> &'static [Variant] {
    match s {
        Strategy::FullRankTp => &[Variant::FullRank],
        _ => &Variant::LOW_RANK,
    }
}

pub fn opts(grouping: bool, online_norm: bool) -> PlanOptions {
    PlanOptions {
        grouping,
        online_norm,
        lowrank_ckpt: false,
    }
}

pub struct Run {
    pub plan: ShardPlan,
    pub exec: Execution,
    pub reference: Tensor,
}

pub fn run(strategy: Strategy, variant: Variant, cfg: &ModelConfig, shape: &RunShape, o: PlanOptions) -> Run {
    let plan = plan(strategy, variant, cfg, shape, o).unwrap();
    let block = build_block(cfg, variant, SEED);
    let x = input_activations(cfg, shape, SEED);
    let exec = execute_forward(&plan, &block, &x).unwrap();
    let reference = reference_forward(&block, &x, None).unwrap().0;
    Run {
        plan,
        exec,
        reference,
    }
}
