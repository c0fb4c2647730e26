//! Model configurations, low-rank variants, decoder-block weights and the
//! single-device reference forward pass used as the correctness oracle.
//!
//! Weights are stored input-major (`[d_in, d_out]`) so that a projection of
//! row-major activations is a plain `x · W`. A factored projection keeps its
//! down factor as `[d_in, r]` and its up factor as `[r, d_out]`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::rmsnorm_reference;
use crate::tensor::{derive_seed, matmul, seeded_fill, swiglu, Tensor};

pub const DEFAULT_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub d_ff: usize,
    pub r: usize,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
}

fn default_eps() -> f64 {
    DEFAULT_NORM_EPS
}

impl ModelConfig {
    pub fn new(layers: usize, heads: usize, d: usize, d_ff: usize, r: usize) -> Result<Self> {
        let cfg = Self {
            layers,
            heads,
            d,
            d_ff,
            r,
            norm_eps: DEFAULT_NORM_EPS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d", self.d),
            ("d_ff", self.d_ff),
            ("r", self.r),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if self.r > self.d {
            return Err(Error::InvalidArgument(format!(
                "rank r={} exceeds hidden width d={}",
                self.r, self.d
            )));
        }
        if self.d % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d={} is not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::InvalidArgument("norm_eps must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Published LLaMA-style presets with the canonical rank `r = d/4`.
    pub fn preset(name: &str) -> Result<Self> {
        let (layers, heads, d, d_ff) = match name.to_ascii_uppercase().as_str() {
            "1B" => (24, 32, 2048, 5472),
            "3B" => (28, 24, 3072, 8192),
            "7B" => (32, 32, 4096, 11008),
            "13B" => (40, 40, 5120, 13824),
            "30B" => (36, 64, 8192, 22016),
            _ => return Err(Error::UnknownPreset(name.to_string())),
        };
        Self::new(layers, heads, d, d_ff, d / 4)
    }

    pub const PRESETS: [&'static str; 5] = ["1B", "3B", "7B", "13B", "30B"];

    /// Small configuration used throughout the tests: d=16, r=4, d_ff=40,
    /// 4 heads, 2 layers.
    pub fn toy() -> Self {
        Self::new(2, 4, 16, 40, 4).expect("toy config is valid")
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// `d_ff / d`.
    pub fn alpha(&self) -> Ratio<u64> {
        Ratio::new(self.d_ff as u64, self.d as u64)
    }

    /// `d / r`.
    pub fn beta(&self) -> Ratio<u64> {
        Ratio::new(self.d as u64, self.r as u64)
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.norm_eps = eps;
        self
    }
}

/// Micro-batch, sequence length, tensor-parallel degree, pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunShape {
    pub b: usize,
    pub s: usize,
    pub tp: usize,
    #[serde(default = "one")]
    pub p: usize,
}

fn one() -> usize {
    1
}

impl RunShape {
    pub fn new(b: usize, s: usize, tp: usize) -> Self {
        Self { b, s, tp, p: 1 }
    }

    /// Number of activation rows, `b * s`.
    pub fn tokens(&self) -> usize {
        self.b * self.s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    FullRank,
    Svd,
    Cola,
    Lax,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::FullRank, Variant::Svd, Variant::Cola, Variant::Lax];
    pub const LOW_RANK: [Variant; 3] = [Variant::Svd, Variant::Cola, Variant::Lax];

    pub fn is_low_rank(self) -> bool {
        self != Variant::FullRank
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::FullRank => "full-rank",
            Variant::Svd => "svd",
            Variant::Cola => "cola",
            Variant::Lax => "lax",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full-rank" | "fullrank" | "full" | "none" => Ok(Variant::FullRank),
            "svd" => Ok(Variant::Svd),
            "cola" => Ok(Variant::Cola),
            "lax" => Ok(Variant::Lax),
            other => Err(Error::InvalidArgument(format!("unknown variant `{other}`"))),
        }
    }
}

/// The seven logical projections of a decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [
        Proj::Q,
        Proj::K,
        Proj::V,
        Proj::O,
        Proj::Gate,
        Proj::Up,
        Proj::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "q",
            Proj::K => "k",
            Proj::V => "v",
            Proj::O => "o",
            Proj::Gate => "gate",
            Proj::Up => "up",
            Proj::Down => "down",
        }
    }

    pub fn in_dim(self, cfg: &ModelConfig) -> usize {
        match self {
            Proj::Down => cfg.d_ff,
            _ => cfg.d,
        }
    }

    pub fn out_dim(self, cfg: &ModelConfig) -> usize {
        match self {
            Proj::Gate | Proj::Up => cfg.d_ff,
            _ => cfg.d,
        }
    }
}

impl fmt::Display for Proj {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Full(Tensor),
    Factored { down: Tensor, up: Tensor },
}

impl Projection {
    pub fn param_count(&self) -> usize {
        match self {
            Projection::Full(w) => w.numel(),
            Projection::Factored { down, up } => down.numel() + up.numel(),
        }
    }
}

/// Which piece of a projection a weight reference points at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Full,
    Down,
    Up,
}

/// Low-rank pre-activations `h = D x` per projection, shaped `[b, s, r]`.
/// LaX layers consume the previous layer's bundle and emit their own.
pub type RankPaths = BTreeMap<Proj, Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlockWeights {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub layer: usize,
    pub projections: BTreeMap<Proj, Projection>,
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
}

impl DecoderBlockWeights {
    pub fn projection(&self, p: Proj) -> &Projection {
        &self.projections[&p]
    }

    pub fn weight(&self, p: Proj, factor: Factor) -> Result<&Tensor> {
        match (self.projection(p), factor) {
            (Projection::Full(w), Factor::Full) => Ok(w),
            (Projection::Factored { down, .. }, Factor::Down) => Ok(down),
            (Projection::Factored { up, .. }, Factor::Up) => Ok(up),
            _ => Err(Error::InvalidArgument(format!(
                "projection {p} has no {factor:?} factor for variant {}",
                self.variant
            ))),
        }
    }

    /// Parameters held by the seven projections (norm scales excluded).
    pub fn linear_param_count(&self) -> usize {
        self.projections.values().map(Projection::param_count).sum()
    }
}

/// Closed-form linear parameter count per block.
pub fn expected_linear_params(cfg: &ModelConfig, variant: Variant) -> usize {
    let (d, d_ff, r) = (cfg.d, cfg.d_ff, cfg.r);
    if variant.is_low_rank() {
        11 * d * r + 3 * d_ff * r
    } else {
        4 * d * d + 3 * d * d_ff
    }
}

fn init_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let scale = 1.0 / (rows as f64).sqrt();
    seeded_fill(&[rows, cols], seed).map(|v| v * scale)
}

/// Deterministic weights for layer 0.
pub fn build_block(cfg: &ModelConfig, variant: Variant, seed: u64) -> DecoderBlockWeights {
    build_layer(cfg, variant, seed, 0)
}

pub fn build_layer(cfg: &ModelConfig, variant: Variant, seed: u64, layer: usize) -> DecoderBlockWeights {
    let base = derive_seed(seed, 1000 + layer as u64);
    let mut projections = BTreeMap::new();
    for (i, p) in Proj::ALL.into_iter().enumerate() {
        let (din, dout) = (p.in_dim(cfg), p.out_dim(cfg));
        let s = derive_seed(base, 2 * i as u64);
        let proj = if variant.is_low_rank() {
            Projection::Factored {
                down: init_matrix(din, cfg.r, s),
                up: init_matrix(cfg.r, dout, derive_seed(base, 2 * i as u64 + 1)),
            }
        } else {
            Projection::Full(init_matrix(din, dout, s))
        };
        projections.insert(p, proj);
    }
    let gamma = |stream| seeded_fill(&[cfg.d], derive_seed(base, stream)).map(|v| 1.0 + 0.25 * v);
    DecoderBlockWeights {
        cfg: *cfg,
        variant,
        layer,
        projections,
        attn_norm: gamma(100),
        mlp_norm: gamma(101),
    }
}

/// One block per layer, `cfg.layers` of them.
pub fn build_stack(cfg: &ModelConfig, variant: Variant, seed: u64) -> Vec<DecoderBlockWeights> {
    (0..cfg.layers)
        .map(|l| build_layer(cfg, variant, seed, l))
        .collect()
}

/// Block input activations `[b, s, d]`.
pub fn input_activations(cfg: &ModelConfig, shape: &RunShape, seed: u64) -> Tensor {
    seeded_fill(&[shape.b, shape.s, cfg.d], derive_seed(seed, 7))
}

/// The CoLA pathway nonlinearity: SwiGLU with both operands taken from the
/// rank-`r` pre-activation, i.e. `silu(z) * z`.
pub fn cola_nonlinearity(z: &Tensor) -> Tensor {
    swiglu(z, z).expect("operands share a shape")
}

/// Causal multi-head scaled-dot-product attention over `[b*s, heads*hd]`
/// rows. Returns the context rows and the FLOPs of the two score/value GEMMs
/// (dense count, mask ignored).
pub fn causal_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    b: usize,
    s: usize,
    heads: usize,
) -> Result<(Tensor, u64)> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::Dimension(format!(
            "attention operands differ: {:?} {:?} {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let width = q.last_dim();
    if q.rows() != b * s || heads == 0 || width % heads != 0 {
        return Err(Error::Dimension(format!(
            "attention input {:?} does not split into b={b}, s={s}, heads={heads}",
            q.shape()
        )));
    }
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; b * s * width];
    let mut scores = vec![0.0; s];
    for bi in 0..b {
        for h in 0..heads {
            let col = h * hd;
            for i in 0..s {
                let qrow = (bi * s + i) * width + col;
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let krow = (bi * s + j) * width + col;
                    let mut dot = 0.0;
                    for c in 0..hd {
                        dot += qd[qrow + c] * kd[krow + c];
                    }
                    scores[j] = dot * scale;
                    max = max.max(scores[j]);
                }
                let mut denom = 0.0;
                for sc in scores.iter_mut().take(i + 1) {
                    *sc = (*sc - max).exp();
                    denom += *sc;
                }
                for j in 0..=i {
                    let p = scores[j] / denom;
                    let vrow = (bi * s + j) * width + col;
                    for c in 0..hd {
                        out[qrow + c] += p * vd[vrow + c];
                    }
                }
            }
        }
    }
    let flops = 4 * (b * heads * s * s * hd) as u64;
    Ok((Tensor::new(q.shape().to_vec(), out)?, flops))
}

/// Number of attention-probability elements one attention call keeps for
/// the backward pass.
pub fn attention_prob_elements(b: usize, s: usize, heads: usize) -> u64 {
    (b * heads * s * s) as u64
}

fn project(
    block: &DecoderBlockWeights,
    p: Proj,
    x: &Tensor,
    h_prev: Option<&RankPaths>,
    nonlinearity: fn(&Tensor) -> Tensor,
    h_cur: &mut RankPaths,
) -> Result<Tensor> {
    match block.projection(p) {
        Projection::Full(w) => Ok(matmul(x, w)?.0),
        Projection::Factored { down, up } => {
            let z = matmul(x, down)?.0;
            let mid = match block.variant {
                Variant::Svd => z,
                Variant::Cola => nonlinearity(&z),
                Variant::Lax => {
                    h_cur.insert(p, z.clone());
                    match h_prev {
                        Some(prev) => {
                            let hp = prev.get(&p).ok_or_else(|| {
                                Error::InvalidArgument(format!("h_prev lacks projection {p}"))
                            })?;
                            z.add(&hp.as_matrix())?
                        }
                        None => z,
                    }
                }
                Variant::FullRank => unreachable!("full-rank blocks hold full matrices"),
            };
            Ok(matmul(&mid, up)?.0)
        }
    }
}

/// Single-device decoder block:
/// `h = x + O(attn(Q n1, K n1, V n1))`, `y = h + Down(swiglu(Gate n2, Up n2))`
/// with `n1 = RMSNorm(x)` and `n2 = RMSNorm(h)`.
///
/// For LaX blocks `h_prev` carries the previous layer's rank-`r`
/// pre-activations; layer 0 treats a missing bundle as zeros, deeper layers
/// require it. The returned bundle is `Some` only for LaX.
pub fn reference_forward(
    block: &DecoderBlockWeights,
    x: &Tensor,
    h_prev: Option<&RankPaths>,
) -> Result<(Tensor, Option<RankPaths>)> {
    forward_with_nonlinearity(block, x, h_prev, cola_nonlinearity)
}

pub(crate) fn forward_with_nonlinearity(
    block: &DecoderBlockWeights,
    x: &Tensor,
    h_prev: Option<&RankPaths>,
    nonlinearity: fn(&Tensor) -> Tensor,
) -> Result<(Tensor, Option<RankPaths>)> {
    let cfg = &block.cfg;
    if x.rank() != 3 || x.last_dim() != cfg.d {
        return Err(Error::Dimension(format!(
            "block input must be [b, s, {}], got {:?}",
            cfg.d,
            x.shape()
        )));
    }
    if block.variant == Variant::Lax && block.layer > 0 && h_prev.is_none() {
        return Err(Error::InvalidArgument(format!(
            "LaX layer {} needs the previous layer's low-rank activations",
            block.layer
        )));
    }
    let (b, s) = (x.shape()[0], x.shape()[1]);
    let xm = x.as_matrix();
    let mut h_cur = RankPaths::new();

    let n1 = rmsnorm_reference(&xm, &block.attn_norm, cfg.norm_eps)?;
    let q = project(block, Proj::Q, &n1, h_prev, nonlinearity, &mut h_cur)?;
    let k = project(block, Proj::K, &n1, h_prev, nonlinearity, &mut h_cur)?;
    let v = project(block, Proj::V, &n1, h_prev, nonlinearity, &mut h_cur)?;
    let (ctx, _) = causal_attention(&q, &k, &v, b, s, cfg.heads)?;
    let o = project(block, Proj::O, &ctx, h_prev, nonlinearity, &mut h_cur)?;
    let h = xm.add(&o)?;

    let n2 = rmsnorm_reference(&h, &block.mlp_norm, cfg.norm_eps)?;
    let g = project(block, Proj::Gate, &n2, h_prev, nonlinearity, &mut h_cur)?;
    let u = project(block, Proj::Up, &n2, h_prev, nonlinearity, &mut h_cur)?;
    let m = swiglu(&g, &u)?;
    let dn = project(block, Proj::Down, &m, h_prev, nonlinearity, &mut h_cur)?;
    let y = h.add(&dn)?.reshape(x.shape())?;

    let bundle = (block.variant == Variant::Lax).then(|| {
        h_cur
            .into_iter()
            .map(|(p, t)| (p, t.reshape(&[b, s, cfg.r]).expect("rank rows")))
            .collect()
    });
    Ok((y, bundle))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy8() -> ModelConfig {
        ModelConfig::new(1, 2, 8, 20, 2).unwrap()
    }

    #[test]
    fn presets_match_table() {
        let c = ModelConfig::preset("7B").unwrap();
        assert_eq!((c.layers, c.heads, c.d, c.d_ff, c.r), (32, 32, 4096, 11008, 1024));
        let c = ModelConfig::preset("1B").unwrap();
        assert_eq!((c.layers, c.heads, c.d, c.d_ff, c.r), (24, 32, 2048, 5472, 512));
        let c = ModelConfig::preset("30B").unwrap();
        assert_eq!((c.layers, c.heads, c.d, c.d_ff, c.r), (36, 64, 8192, 22016, 2048));
        for name in ModelConfig::PRESETS {
            let c = ModelConfig::preset(name).unwrap();
            assert_eq!(c.r * 4, c.d);
            assert_eq!(c.d % c.heads, 0);
        }
        assert!(matches!(
            ModelConfig::preset("70B"),
            Err(Error::UnknownPreset(_))
        ));
    }

    #[test]
    fn config_invariants() {
        assert!(ModelConfig::new(1, 3, 8, 8, 2).is_err());
        assert!(ModelConfig::new(1, 2, 8, 8, 16).is_err());
        let c = ModelConfig::preset("7B").unwrap();
        assert_eq!(c.beta(), Ratio::new(4, 1));
        assert_eq!(c.alpha(), Ratio::new(11008, 4096));
    }

    #[test]
    fn block_shapes() {
        let cfg = toy8();
        let full = build_block(&cfg, Variant::FullRank, 1);
        assert_eq!(full.weight(Proj::Q, Factor::Full).unwrap().shape(), &[8, 8]);
        let svd = build_block(&cfg, Variant::Svd, 1);
        let down = svd.weight(Proj::Q, Factor::Down).unwrap();
        let up = svd.weight(Proj::Q, Factor::Up).unwrap();
        // stored input-major: down is [d_in, r], up is [r, d_out]
        assert_eq!(down.shape(), &[8, 2]);
        assert_eq!(up.shape(), &[2, 8]);
        assert_eq!(svd.weight(Proj::Gate, Factor::Up).unwrap().shape(), &[2, 20]);
        assert_eq!(svd.weight(Proj::Down, Factor::Down).unwrap().shape(), &[20, 2]);
        assert_eq!(build_block(&cfg, Variant::Svd, 1), svd);
        assert_ne!(build_block(&cfg, Variant::Svd, 2), svd);
    }

    #[test]
    fn param_counts_match_closed_form() {
        let cfg = ModelConfig::toy();
        for v in Variant::ALL {
            let block = build_block(&cfg, v, 3);
            assert_eq!(block.linear_param_count(), expected_linear_params(&cfg, v), "{v}");
        }
    }

    #[test]
    fn zero_input_passes_through() {
        let cfg = toy8();
        let x = Tensor::zeros(&[1, 2, 8]);
        for v in Variant::ALL {
            let mut block = build_block(&cfg, v, 5);
            block.attn_norm = Tensor::zeros(&[8]);
            block.mlp_norm = Tensor::zeros(&[8]);
            let (y, _) = reference_forward(&block, &x, None).unwrap();
            assert!(y.bit_eq(&x), "{v}");
            // zero scales also silence nonzero inputs
            let x2 = seeded_fill(&[1, 2, 8], 9);
            let (y2, _) = reference_forward(&block, &x2, None).unwrap();
            assert!(y2.max_abs_diff(&x2).unwrap() < 1e-15, "{v}");
        }
    }

    #[test]
    fn lax_layer0_equals_svd() {
        let cfg = toy8();
        let svd = build_block(&cfg, Variant::Svd, 4);
        let mut lax = svd.clone();
        lax.variant = Variant::Lax;
        let x = seeded_fill(&[1, 2, 8], 10);
        let (ys, hs) = reference_forward(&svd, &x, None).unwrap();
        let zeros: RankPaths = Proj::ALL
            .into_iter()
            .map(|p| (p, Tensor::zeros(&[1, 2, 2])))
            .collect();
        let (yl, hl) = reference_forward(&lax, &x, Some(&zeros)).unwrap();
        assert!(hs.is_none());
        assert!(ys.bit_eq(&yl));
        let hl = hl.unwrap();
        assert_eq!(hl.len(), 7);
        assert_eq!(hl[&Proj::Q].shape(), &[1, 2, 2]);
    }

    #[test]
    fn lax_interior_layer_needs_h_prev() {
        let cfg = toy8();
        let block = build_layer(&cfg, Variant::Lax, 4, 1);
        let x = seeded_fill(&[1, 2, 8], 10);
        assert!(reference_forward(&block, &x, None).is_err());
    }

    #[test]
    fn cola_with_identity_is_svd() {
        let cfg = toy8();
        let svd = build_block(&cfg, Variant::Svd, 6);
        let mut cola = svd.clone();
        cola.variant = Variant::Cola;
        let x = seeded_fill(&[2, 3, 8], 11);
        let (ys, _) = reference_forward(&svd, &x, None).unwrap();
        let (yc, _) = forward_with_nonlinearity(&cola, &x, None, |z| z.clone()).unwrap();
        assert!(ys.bit_eq(&yc));
        let (yn, _) = reference_forward(&cola, &x, None).unwrap();
        assert!(yn.max_abs_diff(&ys).unwrap() > 1e-6);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = ModelConfig::toy();
        let shape = RunShape::new(2, 8, 1);
        let x = input_activations(&cfg, &shape, 3);
        for v in Variant::ALL {
            let block = build_block(&cfg, v, 3);
            let a = reference_forward(&block, &x, None).unwrap().0;
            let b = reference_forward(&block, &x, None).unwrap().0;
            assert!(a.bit_eq(&b));
        }
    }

    #[test]
    fn attention_first_token_copies_value() {
        // causal: position 0 attends only to itself
        let q = seeded_fill(&[2, 4], 1);
        let k = seeded_fill(&[2, 4], 2);
        let v = seeded_fill(&[2, 4], 3);
        let (out, flops) = causal_attention(&q, &k, &v, 1, 2, 2).unwrap();
        for c in 0..4 {
            assert!((out.get(&[0, c]) - v.get(&[0, c])).abs() < 1e-15);
        }
        assert_eq!(flops, 4 * 2 * 2 * 2 * 2);
    }
}
