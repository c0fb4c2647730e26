//! Closed-form communication volumes and arithmetic intensities.
//!
//! Volumes are element counts; bytes are applied only when a report is
//! rendered. Ratios between volumes are exact rationals.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, RunShape};
use crate::plan::Strategy;

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
    }
}

/// FLOPs per byte of a dense `[M, K] x [K, N]` product: `2MNK` over the
/// bytes of both operands and the result.
pub fn ai_matmul(m: usize, n: usize, k: usize, bytes: usize) -> Result<f64> {
    Ok(ai_matmul_exact(m, n, k, bytes)?.to_f64())
}

pub fn ai_matmul_exact(m: usize, n: usize, k: usize, bytes: usize) -> Result<Exact> {
    for (name, v) in [("M", m), ("N", n), ("K", k), ("bytes", bytes)] {
        if v == 0 {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
    }
    let (m, n, k, bytes) = (m as u128, n as u128, k as u128, bytes as u128);
    Ok(Exact::from(Ratio::new(2 * m * n * k, (m * k + k * n + m * n) * bytes)))
}

/// Tensor-parallel payload of one block's forward pass, in elements.
pub fn tp_block_volume(
    strategy: Strategy,
    b: usize,
    s: usize,
    d: usize,
    d_ff: usize,
    r: Option<usize>,
) -> Result<u64> {
    let (b, s, d, d_ff) = (b as u64, s as u64, d as u64, d_ff as u64);
    Ok(match strategy {
        Strategy::FullRankTp => 2 * b * s * d,
        Strategy::VanillaTp => {
            r.ok_or_else(|| Error::InvalidArgument("vanilla TP needs the rank r".into()))?;
            5 * b * s * d + 2 * b * s * d_ff
        }
        Strategy::Btp => {
            let r = r.ok_or_else(|| Error::InvalidArgument("BTP needs the rank r".into()))? as u64;
            7 * b * s * r
        }
    })
}

pub fn block_volume_for(strategy: Strategy, cfg: &ModelConfig, shape: &RunShape) -> u64 {
    tp_block_volume(strategy, shape.b, shape.s, cfg.d, cfg.d_ff, Some(cfg.r))
        .expect("rank is always given")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Dp,
    Pp,
    Tp,
}

/// Per-iteration volume, forward and backward, in elements. DP is the
/// gradient all-reduce over the block parameters; `FullRankTp` selects the
/// dense count and the low-rank strategies the factored one.
pub fn iter_volume(par: Parallelism, strategy: Strategy, cfg: &ModelConfig, shape: &RunShape) -> u64 {
    let (l, d, d_ff, r) = (cfg.layers as u64, cfg.d as u64, cfg.d_ff as u64, cfg.r as u64);
    let (b, s, p) = (shape.b as u64, shape.s as u64, shape.p as u64);
    match par {
        Parallelism::Dp => match strategy {
            Strategy::FullRankTp => l * (4 * d * d + 3 * d * d_ff),
            _ => l * (11 * d * r + 3 * d_ff * r),
        },
        Parallelism::Pp => 2 * p * b * s * d,
        Parallelism::Tp => 2 * l * block_volume_for(strategy, cfg, shape),
    }
}

/// Per-MLP-block GEMM arithmetic intensity, modelling the MLP as two
/// linears `d -> alpha d -> d`. `alpha = d_ff / d`, `beta = d / r`.
pub fn mlp_ai(strategy: Strategy, alpha: f64, beta: f64, b: f64, s: f64, d: f64, tp: f64) -> Result<f64> {
    for (n, v) in [("alpha", alpha), ("b", b), ("s", s), ("d", d), ("tp", tp)] {
        positive(n, v)?;
    }
    if beta < 1.0 || tp < 1.0 {
        return Err(Error::InvalidArgument("beta and tp must be >= 1".into()));
    }
    let bsd = b * s * d;
    Ok(match strategy {
        Strategy::FullRankTp => alpha * bsd * d / (bsd * tp + alpha * d * (d + b * s)),
        Strategy::VanillaTp => {
            4.0 * bsd * d * (1.0 + alpha)
                / (4.0 * bsd * beta * tp * (1.0 + alpha) + 4.0 * d * d * (1.0 + alpha) + 8.0 * bsd)
        }
        Strategy::Btp => {
            4.0 * bsd * d * (1.0 + alpha)
                / (4.0 * beta * bsd * (1.0 + alpha) + 4.0 * d * d * (1.0 + alpha) + 8.0 * bsd * tp)
        }
    })
}

/// Per-rank MLP FLOPs under the same two-linear model.
pub fn mlp_flops(strategy: Strategy, alpha: f64, beta: f64, b: f64, s: f64, d: f64, tp: f64) -> f64 {
    let bsd2 = b * s * d * d;
    match strategy {
        Strategy::FullRankTp => 4.0 * alpha * bsd2 / tp,
        _ => 4.0 * (1.0 + alpha) * bsd2 / (beta * tp),
    }
}

/// A rational with its decimal value, for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exact {
    pub num: u128,
    pub den: u128,
    pub value: f64,
}

impl From<Ratio<u128>> for Exact {
    fn from(r: Ratio<u128>) -> Self {
        Self {
            num: *r.numer(),
            den: *r.denom(),
            value: *r.numer() as f64 / *r.denom() as f64,
        }
    }
}

impl Exact {
    pub fn of(num: u64, den: u64) -> Self {
        Ratio::new(num as u128, den as u128).into()
    }

    pub fn ratio(&self) -> Ratio<u128> {
        Ratio::new(self.num, self.den)
    }

    pub fn to_f64(&self) -> f64 {
        self.value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyCost {
    pub strategy: Strategy,
    pub tp_block_volume: u64,
    pub tp_iter_volume: u64,
    pub tp_iter_bytes: u64,
    pub dp_iter_volume: u64,
    pub pp_iter_volume: u64,
    pub mlp_ai: f64,
    pub mlp_flops_per_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub vanilla_over_full: Exact,
    pub full_over_btp: Exact,
    pub vanilla_over_btp: Exact,
    pub dp_full_over_lowrank: Exact,
    pub ai_btp_over_vanilla: f64,
    pub ai_vanilla_over_full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub element_bytes: usize,
    pub strategies: Vec<StrategyCost>,
    pub ratios: Ratios,
    /// `V_vanilla / V_full == (5 + 2 alpha) / 2` and
    /// `V_btp / V_full == 7 / (2 beta)` as exact rationals.
    pub identities_hold: bool,
    pub mlp_ai_model: String,
}

impl CostReport {
    pub fn get(&self, s: Strategy) -> &StrategyCost {
        self.strategies
            .iter()
            .find(|c| c.strategy == s)
            .expect("every strategy is reported")
    }
}

pub fn ratio_report(cfg: &ModelConfig, shape: &RunShape, element_bytes: usize) -> Result<CostReport> {
    cfg.validate()?;
    if shape.b == 0 || shape.s == 0 || shape.tp == 0 {
        return Err(Error::InvalidArgument("b, s and tp must be positive".into()));
    }
    let alpha = cfg.d_ff as f64 / cfg.d as f64;
    let beta = cfg.d as f64 / cfg.r as f64;
    let (b, s, d, tp) = (shape.b as f64, shape.s as f64, cfg.d as f64, shape.tp as f64);
    let mut strategies = Vec::new();
    for st in Strategy::ALL {
        let tp_iter = iter_volume(Parallelism::Tp, st, cfg, shape);
        strategies.push(StrategyCost {
            strategy: st,
            tp_block_volume: block_volume_for(st, cfg, shape),
            tp_iter_volume: tp_iter,
            tp_iter_bytes: tp_iter * element_bytes as u64,
            dp_iter_volume: iter_volume(Parallelism::Dp, st, cfg, shape),
            pp_iter_volume: iter_volume(Parallelism::Pp, st, cfg, shape),
            mlp_ai: mlp_ai(st, alpha, beta, b, s, d, tp)?,
            mlp_flops_per_rank: mlp_flops(st, alpha, beta, b, s, d, tp),
        });
    }
    let v = |s: Strategy| block_volume_for(s, cfg, shape);
    let (vf, vv, vb) = (v(Strategy::FullRankTp), v(Strategy::VanillaTp), v(Strategy::Btp));
    let ai = |s: Strategy| strategies.iter().find(|c| c.strategy == s).unwrap().mlp_ai;
    let ratios = Ratios {
        vanilla_over_full: Exact::of(vv, vf),
        full_over_btp: Exact::of(vf, vb),
        vanilla_over_btp: Exact::of(vv, vb),
        dp_full_over_lowrank: Exact::of(
            iter_volume(Parallelism::Dp, Strategy::FullRankTp, cfg, shape),
            iter_volume(Parallelism::Dp, Strategy::Btp, cfg, shape),
        ),
        ai_btp_over_vanilla: ai(Strategy::Btp) / ai(Strategy::VanillaTp),
        ai_vanilla_over_full: ai(Strategy::VanillaTp) / ai(Strategy::FullRankTp),
    };
    let alpha_q = Ratio::new(cfg.d_ff as u128, cfg.d as u128);
    let beta_q = Ratio::new(cfg.d as u128, cfg.r as u128);
    let two = Ratio::from_integer(2u128);
    let identities_hold = ratios.vanilla_over_full.ratio() == (Ratio::from_integer(5) + two * alpha_q) / two
        && Ratio::new(vb as u128, vf as u128) == Ratio::from_integer(7) / (two * beta_q);
    Ok(CostReport {
        element_bytes,
        strategies,
        ratios,
        identities_hold,
        mlp_ai_model: "two-linear MLP (d -> d_ff -> d); the simulated SwiGLU MLP has three linears".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::Strategy;
    use proptest::prelude::*;

    fn cfg(d: usize, d_ff: usize, r: usize) -> ModelConfig {
        ModelConfig::new(1, 1, d, d_ff, r).unwrap()
    }

    #[test]
    fn ai_examples() {
        assert!((ai_matmul(1, 1, 1, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let v = ai_matmul(4096, 1024, 4096, 2).unwrap();
        assert!((v - 682.6666).abs() < 1e-3, "{v}");
        assert_eq!(ai_matmul(3, 5, 7, 2).unwrap(), ai_matmul(5, 3, 7, 2).unwrap());
        assert!(ai_matmul(0, 1, 1, 1).is_err());
    }

    #[test]
    fn block_volume_examples() {
        assert_eq!(tp_block_volume(Strategy::FullRankTp, 1, 2, 8, 20, None).unwrap(), 32);
        assert_eq!(tp_block_volume(Strategy::VanillaTp, 1, 2, 8, 20, Some(2)).unwrap(), 160);
        assert_eq!(tp_block_volume(Strategy::Btp, 1, 2, 8, 20, Some(2)).unwrap(), 28);
        assert!(tp_block_volume(Strategy::Btp, 1, 2, 8, 20, None).is_err());
    }

    #[test]
    fn dp_volume_7b() {
        let c = ModelConfig::preset("7B").unwrap();
        let sh = RunShape::new(1, 1, 1);
        let full = iter_volume(Parallelism::Dp, Strategy::FullRankTp, &c, &sh);
        let low = iter_volume(Parallelism::Dp, Strategy::Btp, &c, &sh);
        assert_eq!(full, 6_476_005_376);
        assert_eq!(low, 2_558_525_440);
        assert_eq!(low, iter_volume(Parallelism::Dp, Strategy::VanillaTp, &c, &sh));
        let ratio = full as f64 / low as f64;
        assert!((ratio - 2.531).abs() < 1e-3);
    }

    #[test]
    fn pp_volume() {
        let c = cfg(8, 20, 2);
        let sh = RunShape::new(3, 5, 1);
        assert_eq!(iter_volume(Parallelism::Pp, Strategy::Btp, &c, &sh), 2 * 3 * 5 * 8);
    }

    #[test]
    fn ratio_identities() {
        let sh = RunShape::new(2, 4, 1);
        let r = ratio_report(&cfg(16, 40, 4), &sh, 2).unwrap();
        assert_eq!(r.ratios.vanilla_over_full.ratio(), Ratio::from_integer(5));
        assert_eq!(r.ratios.full_over_btp.ratio(), Ratio::new(8, 7));
        assert_eq!(r.ratios.vanilla_over_btp.ratio(), Ratio::new(40, 7));
        assert!(r.identities_hold);
        let r = ratio_report(&cfg(16, 64, 4), &sh, 2).unwrap();
        assert_eq!(r.ratios.vanilla_over_full.ratio(), Ratio::new(13, 2));
        assert!(r.identities_hold);
    }

    #[test]
    fn mlp_ai_7b() {
        let a = 11008.0 / 4096.0;
        let f = mlp_ai(Strategy::FullRankTp, a, 4.0, 4.0, 4096.0, 4096.0, 4.0).unwrap();
        let v = mlp_ai(Strategy::VanillaTp, a, 4.0, 4.0, 4096.0, 4096.0, 4.0).unwrap();
        let b = mlp_ai(Strategy::Btp, a, 4.0, 4.0, 4096.0, 4096.0, 4.0).unwrap();
        assert!((b / v - 2.616).abs() < 0.01, "{}", b / v);
        assert!((v / f - 0.163).abs() < 0.01, "{}", v / f);
        assert_eq!(
            mlp_flops(Strategy::VanillaTp, a, 4.0, 4.0, 4096.0, 4096.0, 4.0),
            mlp_flops(Strategy::Btp, a, 4.0, 4.0, 4096.0, 4096.0, 4.0)
        );
        assert!(mlp_ai(Strategy::Btp, a, 0.5, 4.0, 4096.0, 4096.0, 4.0).is_err());
    }

    #[test]
    fn tp_iteration_is_twice_layers_times_block() {
        let c = ModelConfig::preset("1B").unwrap();
        let sh = RunShape::new(2, 128, 4);
        for s in Strategy::ALL {
            assert_eq!(
                iter_volume(Parallelism::Tp, s, &c, &sh),
                2 * 24 * block_volume_for(s, &c, &sh)
            );
        }
    }

    proptest! {
        #[test]
        fn btp_ai_dominates_vanilla(
            b in 1u32..16, s in 1u32..8192, d in 64u32..16384,
            alpha in 1.0f64..8.0, beta in 1.01f64..16.0, tp in 2u32..16,
        ) {
            let args = (alpha, beta, b as f64, s as f64, d as f64, tp as f64);
            let v = mlp_ai(Strategy::VanillaTp, args.0, args.1, args.2, args.3, args.4, args.5).unwrap();
            let t = mlp_ai(Strategy::Btp, args.0, args.1, args.2, args.3, args.4, args.5).unwrap();
            prop_assert!(t >= v);
        }

        #[test]
        fn doubling_batch_scales_activation_volumes(b in 1usize..8, s in 1usize..64, tp in 1usize..8) {
            let c = cfg(32, 80, 8);
            let one = RunShape::new(b, s, tp);
            let two = RunShape::new(2 * b, s, tp);
            for st in Strategy::ALL {
                for par in [Parallelism::Tp, Parallelism::Pp] {
                    prop_assert_eq!(iter_volume(par, st, &c, &two), 2 * iter_volume(par, st, &c, &one));
                }
                prop_assert_eq!(iter_volume(Parallelism::Dp, st, &c, &two), iter_volume(Parallelism::Dp, st, &c, &one));
            }
        }
    }
}
