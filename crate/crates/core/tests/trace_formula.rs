mod common;

use common::*;
use lowrank_tp::comm::trace_volume_in;
use lowrank_tp::cost::{block_volume_for, iter_volume, tp_block_volume, Parallelism};
use lowrank_tp::plan::{apply_grouping, enumerate_collectives, plan};
use lowrank_tp::{trace_volume, ModelConfig, Pass, RunShape, Strategy, Tag, Variant};
use proptest::prelude::*;

fn grid() -> Vec<(ModelConfig, RunShape, Strategy)> {
    let mut out = Vec::new();
    for d in [16, 32] {
        for d_ff in [d * 5 / 2, 4 * d] {
            for b in [1, 2, 4] {
                for s in [4, 8] {
                    for tp in [1, 2, 4] {
                        for strategy in Strategy::ALL {
                            out.push((toy_cfg(d, d_ff), RunShape::new(b, s, tp), strategy));
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn traced_block_volume_equals_closed_form() {
    let g = grid();
    assert_eq!(g.len(), 216);
    for (cfg, shape, strategy) in g {
        let variant = strategy.default_variant();
        let r = run(strategy, variant, &cfg, &shape, opts(false, true));
        let traced = trace_volume(&r.exec.trace, Tag::Block).elements;
        let expected =
            tp_block_volume(strategy, shape.b, shape.s, cfg.d, cfg.d_ff, Some(cfg.r)).unwrap();
        assert_eq!(traced, expected, "{strategy} d={} d_ff={} {shape:?}", cfg.d, cfg.d_ff);
        assert_eq!(r.plan.block_volume(), expected);
    }
}

#[test]
fn volume_independent_of_tp() {
    let cfg = ModelConfig::toy();
    for strategy in Strategy::ALL {
        let v: Vec<u64> = [1, 2, 4]
            .iter()
            .map(|&tp| {
                let r = run(strategy, strategy.default_variant(), &cfg, &RunShape::new(2, 8, tp), opts(false, true));
                trace_volume(&r.exec.trace, Tag::Block).elements
            })
            .collect();
        assert!(v.windows(2).all(|w| w[0] == w[1]), "{strategy}: {v:?}");
    }
}

#[test]
fn static_enumeration_matches_trace() {
    let cfg = ModelConfig::toy();
    for strategy in Strategy::ALL {
        for &variant in variants(strategy) {
            for grouping in [false, true] {
                for online in [false, true] {
                    let r = run(strategy, variant, &cfg, &RunShape::new(2, 8, 2), opts(grouping, online));
                    let predicted = enumerate_collectives(&r.plan);
                    assert_eq!(predicted, r.exec.trace.records, "{strategy} {variant}");
                }
            }
        }
    }
}

#[test]
fn iteration_tp_volume_is_twice_layers_times_block() {
    let cfg = ModelConfig::new(2, 4, 16, 40, 4).unwrap();
    let shape = RunShape::new(2, 8, 2);
    for strategy in Strategy::ALL {
        let r = run(strategy, strategy.default_variant(), &cfg, &shape, opts(false, true));
        let traced = trace_volume(&r.exec.trace, Tag::Block).elements;
        assert_eq!(iter_volume(Parallelism::Tp, strategy, &cfg, &shape), 2 * 2 * traced);
    }
}

#[test]
fn preset_7b_dp_volumes() {
    let cfg = ModelConfig::preset("7B").unwrap();
    let shape = RunShape::new(1, 1, 1);
    let full = iter_volume(Parallelism::Dp, Strategy::FullRankTp, &cfg, &shape);
    let low = iter_volume(Parallelism::Dp, Strategy::Btp, &cfg, &shape);
    // 32 * (4 * 4096^2 + 3 * 4096 * 11008) and 32 * (11 * 4096 * 1024 + 3 * 11008 * 1024)
    assert_eq!(full, 32 * (4 * 4096 * 4096 + 3 * 4096 * 11008));
    assert_eq!(low, 32 * (11 * 4096 * 1024 + 3 * 11008 * 1024));
    assert_eq!(full, 6_476_005_376);
    assert_eq!(low, 2_558_525_440);
}

#[test]
fn btp_block_payload_is_smallest_when_rank_is_quarter_width() {
    for name in ["1B", "3B", "7B", "13B", "30B"] {
        let cfg = ModelConfig::preset(name).unwrap();
        let shape = RunShape::new(1, 2048, 8);
        let btp = block_volume_for(Strategy::Btp, &cfg, &shape);
        let full = block_volume_for(Strategy::FullRankTp, &cfg, &shape);
        let vanilla = block_volume_for(Strategy::VanillaTp, &cfg, &shape);
        assert!(btp < full && full < vanilla, "{name}");
    }
}

#[test]
fn sync_norm_statistics_stay_out_of_block_volume() {
    let cfg = ModelConfig::toy();
    let shape = RunShape::new(2, 8, 2);
    let sync = run(Strategy::Btp, Variant::Svd, &cfg, &shape, opts(false, false));
    let online = run(Strategy::Btp, Variant::Svd, &cfg, &shape, opts(false, true));
    assert_eq!(
        trace_volume(&sync.exec.trace, Tag::Block).elements,
        trace_volume(&online.exec.trace, Tag::Block).elements
    );
    let stat = trace_volume(&sync.exec.trace, Tag::Stat);
    assert_eq!(stat.calls, 2);
    assert_eq!(stat.elements, 2 * 16);
    assert_eq!(trace_volume(&online.exec.trace, Tag::Stat).calls, 0);
    assert!(sync.exec.trace.records.len() > online.exec.trace.records.len());
}

#[test]
fn forward_trace_has_no_reforward_records() {
    let cfg = ModelConfig::toy();
    let r = run(Strategy::Btp, Variant::Svd, &cfg, &RunShape::new(2, 8, 2), opts(true, true));
    assert_eq!(trace_volume_in(&r.exec.trace, Tag::Block, Pass::Reforward).calls, 0);
}

#[test]
fn grouping_preserves_volume_and_cuts_launches() {
    let cfg = ModelConfig::toy();
    let shape = RunShape::new(2, 8, 2);
    for strategy in Strategy::ALL {
        let base = plan(strategy, strategy.default_variant(), &cfg, &shape, opts(false, true)).unwrap();
        let grouped = apply_grouping(&base).unwrap();
        assert_eq!(base.block_volume(), grouped.block_volume());
        assert!(grouped.gemm_launches_per_block() < base.gemm_launches_per_block());
        let calls = |p: &lowrank_tp::ShardPlan| enumerate_collectives(p).len();
        assert!(calls(&grouped) <= calls(&base));
    }
}

proptest! {
    #[test]
    fn closed_form_volume_linear_in_tokens(b in 1usize..64, s in 1usize..512, d in 1usize..4096, m in 1usize..5, q in 1usize..9) {
        let d_ff = d * m;
        let r = (d / q).max(1);
        for strategy in Strategy::ALL {
            let one = tp_block_volume(strategy, b, s, d, d_ff, Some(r)).unwrap();
            let two = tp_block_volume(strategy, 2 * b, s, d, d_ff, Some(r)).unwrap();
            prop_assert_eq!(two, 2 * one);
        }
    }

    #[test]
    fn btp_beats_full_rank_when_rank_small(b in 1usize..8, s in 1usize..64, d in 8usize..512) {
        let r = d / 4;
        let btp = tp_block_volume(Strategy::Btp, b, s, d, 4 * d, Some(r)).unwrap();
        let full = tp_block_volume(Strategy::FullRankTp, b, s, d, 4 * d, Some(r)).unwrap();
        prop_assert!(btp < full);
    }
}
