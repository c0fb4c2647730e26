//! Sharding plans for the three tensor-parallel strategies.
//!
//! A plan is a flat program over named activation slots. Each decoder block
//! is a list of chunks; every chunk ends in exactly one all-reduce. Steps
//! between chunk boundaries must be computable on per-rank shards.
//!
//! * `FullRankTp`: column-parallel Q/K/V and gate/up, row-parallel O and
//!   down; two chunks per block.
//! * `VanillaTp`: every factor pair is its own chunk. The down factor is
//!   column-parallel over the rank, the up factor row-parallel over the
//!   rank, and the reduction lands on the full output width.
//! * `Btp`: chunks run from an up factor (column-parallel over its output)
//!   to the next down factor (row-parallel over its input), so every
//!   reduction is rank-wide and the residual stream stays sharded along the
//!   hidden dimension.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::comm::{CollectiveKind, CollectiveRecord, Pass, Tag};
use crate::error::{Error, Result};
use crate::model::{Factor, ModelConfig, Proj, RunShape, Variant};
use crate::tensor::DEFAULT_ELEMENT_BYTES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    FullRankTp,
    VanillaTp,
    Btp,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::FullRankTp, Strategy::VanillaTp, Strategy::Btp];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FullRankTp => "full-rank-tp",
            Strategy::VanillaTp => "vanilla-tp",
            Strategy::Btp => "btp",
        }
    }

    /// Variant the strategy runs when none is given.
    pub fn default_variant(self) -> Variant {
        match self {
            Strategy::FullRankTp => Variant::FullRank,
            _ => Variant::Svd,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "full-rank-tp" | "full-rank" | "full" | "fullrank" => Ok(Strategy::FullRankTp),
            "vanilla-tp" | "vanilla" => Ok(Strategy::VanillaTp),
            "btp" => Ok(Strategy::Btp),
            other => Err(Error::InvalidArgument(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub grouping: bool,
    pub online_norm: bool,
    pub lowrank_ckpt: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShardKind {
    Column,
    Row,
    Replicated,
}

/// How one weight is split across ranks. Weights are `[d_in, d_out]`, so a
/// column split cuts axis 1 and a row split cuts axis 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShardSpec {
    pub kind: ShardKind,
    pub axis: usize,
    pub local_extent: usize,
    pub global_extent: usize,
}

impl ShardSpec {
    pub fn column(global: usize, tp: usize) -> Self {
        Self {
            kind: ShardKind::Column,
            axis: 1,
            local_extent: global / tp,
            global_extent: global,
        }
    }

    pub fn row(global: usize, tp: usize) -> Self {
        Self {
            kind: ShardKind::Row,
            axis: 0,
            local_extent: global / tp,
            global_extent: global,
        }
    }

    pub fn replicated(global: usize) -> Self {
        Self {
            kind: ShardKind::Replicated,
            axis: 0,
            local_extent: global,
            global_extent: global,
        }
    }

    pub fn parts(&self) -> usize {
        self.global_extent / self.local_extent
    }
}

impl fmt::Display for ShardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ShardKind::Column => write!(f, "column {}/{}", self.local_extent, self.global_extent),
            ShardKind::Row => write!(f, "row {}/{}", self.local_extent, self.global_extent),
            ShardKind::Replicated => write!(f, "replicated"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormSite {
    Attn,
    Mlp,
}

impl NormSite {
    pub fn slot(self) -> &'static str {
        match self {
            NormSite::Attn => "n1",
            NormSite::Mlp => "n2",
        }
    }

    /// Reduced sum of squares, replicated.
    pub fn stat_slot(self) -> String {
        format!("{}.stat", self.slot())
    }

    /// Local sum of squares, per rank.
    pub fn local_ss_slot(self) -> String {
        format!("{}.ss", self.slot())
    }

    /// Local RMS, per rank.
    pub fn local_rms_slot(self) -> String {
        format!("{}.rms", self.slot())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// Full hidden width on every rank.
    Replicated,
    /// Sharded input, normalized with the reduced global statistic.
    Global,
    /// Sharded input, normalized with the rank's own statistic.
    Local,
}

/// How sharded norms are handled in a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormStrategy {
    Replicated,
    Sync,
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualLayout {
    Replicated,
    ShardedAlongD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WeightRef {
    pub proj: Proj,
    pub factor: Factor,
}

impl WeightRef {
    pub fn new(proj: Proj, factor: Factor) -> Self {
        Self { proj, factor }
    }
}

impl fmt::Display for WeightRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.factor {
            Factor::Full => write!(f, "{}", self.proj),
            Factor::Down => write!(f, "{}.down", self.proj),
            Factor::Up => write!(f, "{}.up", self.proj),
        }
    }
}

/// Online-norm repair attached to an all-reduce: pre-scale by the local
/// RMS, reduce, divide by the global RMS. `carry` marks the reduction that
/// also transports the statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recovery {
    pub site: NormSite,
    pub carry: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Step {
    Norm {
        src: String,
        dst: String,
        site: NormSite,
        mode: NormMode,
    },
    StatReduce {
        src: String,
        site: NormSite,
    },
    Linear {
        src: String,
        dst: String,
        weight: WeightRef,
        spec: ShardSpec,
    },
    /// Shared input, weights concatenated along the output axis.
    GroupedLinear {
        src: String,
        dsts: Vec<String>,
        weights: Vec<WeightRef>,
        spec: ShardSpec,
    },
    /// Distinct inputs, one batched launch.
    BatchedLinear {
        pairs: Vec<(String, WeightRef, String)>,
        spec: ShardSpec,
    },
    /// Rank-space operation between the two factors (CoLA activation or
    /// LaX cross-layer add).
    Bottleneck {
        src: String,
        dst: String,
        proj: Proj,
    },
    Attention {
        q: String,
        k: String,
        v: String,
        dst: String,
        /// Heads held by each rank.
        heads: usize,
    },
    Swiglu {
        gate: String,
        up: String,
        dst: String,
    },
    Add {
        a: String,
        b: String,
        dst: String,
    },
    AllReduce {
        srcs: Vec<String>,
        dsts: Vec<String>,
        widths: Vec<usize>,
        recover: Option<Recovery>,
    },
    Gather {
        src: String,
        dst: String,
        width: usize,
        tag: Tag,
    },
}

impl Step {
    pub fn inputs(&self) -> Vec<String> {
        match self {
            Step::Norm { src, site, mode, .. } => {
                let mut v = vec![src.clone()];
                if *mode == NormMode::Global {
                    v.push(site.stat_slot());
                }
                v
            }
            Step::StatReduce { src, .. } => vec![src.clone()],
            Step::Linear { src, .. } | Step::GroupedLinear { src, .. } => vec![src.clone()],
            Step::BatchedLinear { pairs, .. } => pairs.iter().map(|p| p.0.clone()).collect(),
            Step::Bottleneck { src, .. } => vec![src.clone()],
            Step::Attention { q, k, v, .. } => vec![q.clone(), k.clone(), v.clone()],
            Step::Swiglu { gate, up, .. } => vec![gate.clone(), up.clone()],
            Step::Add { a, b, .. } => vec![a.clone(), b.clone()],
            Step::AllReduce { srcs, recover, .. } => {
                let mut v = srcs.clone();
                if let Some(rec) = recover {
                    v.push(rec.site.local_rms_slot());
                    if rec.carry {
                        v.push(rec.site.local_ss_slot());
                    } else {
                        v.push(rec.site.stat_slot());
                    }
                }
                v
            }
            Step::Gather { src, .. } => vec![src.clone()],
        }
    }

    pub fn outputs(&self) -> Vec<String> {
        match self {
            Step::Norm { dst, site, mode, .. } => {
                let mut v = vec![dst.clone()];
                if *mode == NormMode::Local {
                    v.push(site.local_ss_slot());
                    v.push(site.local_rms_slot());
                }
                v
            }
            Step::StatReduce { site, .. } => vec![site.stat_slot()],
            Step::Linear { dst, .. }
            | Step::Bottleneck { dst, .. }
            | Step::Attention { dst, .. }
            | Step::Swiglu { dst, .. }
            | Step::Add { dst, .. }
            | Step::Gather { dst, .. } => vec![dst.clone()],
            Step::GroupedLinear { dsts, .. } => dsts.clone(),
            Step::BatchedLinear { pairs, .. } => pairs.iter().map(|p| p.2.clone()).collect(),
            Step::AllReduce { dsts, recover, .. } => {
                let mut v = dsts.clone();
                if let Some(Recovery { site, carry: true }) = recover {
                    v.push(site.stat_slot());
                }
                v
            }
        }
    }

    pub fn is_collective(&self) -> bool {
        matches!(
            self,
            Step::AllReduce { .. } | Step::StatReduce { .. } | Step::Gather { .. }
        )
    }

    pub fn launches(&self) -> u64 {
        match self {
            Step::Linear { .. } | Step::GroupedLinear { .. } | Step::BatchedLinear { .. } => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &[String]| v.join(",");
        match self {
            Step::Norm { src, dst, mode, .. } => {
                let m = match mode {
                    NormMode::Replicated => "replicated",
                    NormMode::Global => "global",
                    NormMode::Local => "local",
                };
                write!(f, "norm {dst} <- {src} [{m}]")
            }
            Step::StatReduce { src, site } => {
                write!(f, "stat-reduce {} <- {src}", site.stat_slot())
            }
            Step::Linear { src, dst, weight, spec } => {
                write!(f, "linear {dst} <- {src} * {weight} [{spec}]")
            }
            Step::GroupedLinear { src, dsts, weights, spec } => {
                let w: Vec<String> = weights.iter().map(|w| w.to_string()).collect();
                write!(f, "grouped-linear {} <- {src} * {} [{spec}]", list(dsts), list(&w))
            }
            Step::BatchedLinear { pairs, spec } => {
                let p: Vec<String> = pairs
                    .iter()
                    .map(|(s, w, d)| format!("{d}<-{s}*{w}"))
                    .collect();
                write!(f, "batched-linear {} [{spec}]", list(&p))
            }
            Step::Bottleneck { src, dst, .. } => write!(f, "bottleneck {dst} <- {src}"),
            Step::Attention { q, k, v, dst, heads } => {
                write!(f, "attention {dst} <- {q},{k},{v} heads/rank={heads}")
            }
            Step::Swiglu { gate, up, dst } => write!(f, "swiglu {dst} <- {gate},{up}"),
            Step::Add { a, b, dst } => write!(f, "add {dst} <- {a},{b}"),
            Step::AllReduce { srcs, dsts, widths, recover } => {
                let w: usize = widths.iter().sum();
                write!(f, "all-reduce {} <- {} width={w}", list(dsts), list(srcs))?;
                match recover {
                    Some(Recovery { site, carry: true }) => write!(f, " +stat({})", site.slot()),
                    Some(Recovery { site, carry: false }) => write!(f, " recover({})", site.slot()),
                    None => Ok(()),
                }
            }
            Step::Gather { src, dst, width, tag } => {
                write!(f, "all-gather {dst} <- {src} width={width} ({tag})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpChunk {
    pub id: String,
    pub steps: Vec<Step>,
}

impl TpChunk {
    pub fn collective(&self) -> Option<&Step> {
        self.steps.last().filter(|s| matches!(s, Step::AllReduce { .. }))
    }
}

/// What happens at the embedding output and before the model's final
/// projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryRules {
    pub embedding_output: ResidualLayout,
    pub final_projection: ShardKind,
    pub gather_before_final: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub strategy: Strategy,
    pub variant: Variant,
    pub cfg: ModelConfig,
    pub shape: RunShape,
    pub options: PlanOptions,
    pub norm: NormStrategy,
    pub residual: ResidualLayout,
    pub chunks: Vec<TpChunk>,
    /// Steps after the last chunk of a block that belong to the next
    /// block's first chunk.
    pub epilogue: Vec<Step>,
    /// Once per stack, after the last block.
    pub finale: Vec<Step>,
    pub boundary: BoundaryRules,
    /// Slots stored under low-rank boundary checkpointing.
    pub ckpt_slots: Vec<String>,
    pub block_output: String,
    pub output: String,
    pub element_bytes: usize,
    pub warnings: Vec<String>,
}

pub const EPILOGUE: &str = "epilogue";
pub const FINALE: &str = "finale";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    Replicated,
    /// Split along the last axis, rank `i` holding the `i`-th piece.
    Sharded,
    /// Per-rank summands awaiting a reduction.
    Partial,
    /// Per-rank values with no combined meaning (local statistics).
    PerRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    Elementwise,
    Swiglu,
    ResidualAdd,
    Attention,
    RmsNorm,
    Concat,
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elementwise" => Ok(OpKind::Elementwise),
            "swiglu" => Ok(OpKind::Swiglu),
            "residual-add" => Ok(OpKind::ResidualAdd),
            "attention" => Ok(OpKind::Attention),
            "rmsnorm" => Ok(OpKind::RmsNorm),
            "concat" => Ok(OpKind::Concat),
            other => Err(Error::InvalidArgument(format!("unknown op kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Safety {
    ShardedSafe,
    ShardedUnsafe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpContext {
    /// The op's reduction or feature axis is split across ranks.
    pub sharded: bool,
    /// Operands of a binary op share one layout.
    pub aligned: bool,
    pub heads: usize,
    pub tp: usize,
}

impl OpContext {
    pub fn sharded(heads: usize, tp: usize) -> Self {
        Self {
            sharded: tp > 1,
            aligned: true,
            heads,
            tp,
        }
    }
}

/// Whether an op is correct on per-rank shards without cross-rank data.
pub fn classify(op: OpKind, ctx: OpContext) -> Result<Safety> {
    use Safety::*;
    Ok(match op {
        OpKind::Elementwise | OpKind::Swiglu => ShardedSafe,
        OpKind::ResidualAdd => {
            if ctx.aligned {
                ShardedSafe
            } else {
                ShardedUnsafe
            }
        }
        OpKind::Attention => {
            if ctx.tp == 0 || ctx.heads % ctx.tp != 0 {
                return Err(Error::Plan(format!(
                    "heads={} not divisible by tp={}",
                    ctx.heads, ctx.tp
                )));
            }
            ShardedSafe
        }
        OpKind::RmsNorm | OpKind::Concat => {
            if ctx.sharded {
                ShardedUnsafe
            } else {
                ShardedSafe
            }
        }
    })
}

fn slot(p: Proj, suffix: &str) -> String {
    format!("{p}.{suffix}")
}

struct Builder {
    strategy: Strategy,
    cfg: ModelConfig,
    variant: Variant,
    tp: usize,
    heads_local: usize,
    norm: NormStrategy,
    grouping: bool,
    chunks: Vec<TpChunk>,
    cur: Vec<Step>,
}

impl Builder {
    fn push(&mut self, step: Step) {
        self.cur.push(step);
    }

    fn close(&mut self, id: &str) {
        let steps = std::mem::take(&mut self.cur);
        self.chunks.push(TpChunk {
            id: id.to_string(),
            steps,
        });
    }

    fn norm(&mut self, site: NormSite, src: &str) {
        let mode = match self.norm {
            NormStrategy::Replicated => NormMode::Replicated,
            NormStrategy::Sync => {
                self.push(Step::StatReduce {
                    src: src.into(),
                    site,
                });
                NormMode::Global
            }
            NormStrategy::Online => NormMode::Local,
        };
        self.push(Step::Norm {
            src: src.into(),
            dst: site.slot().into(),
            site,
            mode,
        });
    }

    fn recovery(&self, site: NormSite, carry: bool) -> Option<Recovery> {
        (self.norm == NormStrategy::Online).then_some(Recovery { site, carry })
    }

    /// Emits the rank-space op for `p` if the variant has one and returns
    /// the slot the up factor reads.
    fn bottleneck(&mut self, p: Proj) -> String {
        let z = slot(p, "z");
        if self.variant == Variant::Svd {
            return z;
        }
        let a = slot(p, "a");
        self.push(Step::Bottleneck {
            src: z,
            dst: a.clone(),
            proj: p,
        });
        a
    }

    fn attention(&mut self, dst: &str) {
        self.push(Step::Attention {
            q: "q".into(),
            k: "k".into(),
            v: "v".into(),
            dst: dst.into(),
            heads: self.heads_local,
        });
    }

    fn all_reduce(&mut self, srcs: Vec<String>, dsts: Vec<String>, widths: Vec<usize>, recover: Option<Recovery>) {
        self.push(Step::AllReduce {
            srcs,
            dsts,
            widths,
            recover,
        });
    }

    /// Linears sharing `src`, grouped or one by one.
    fn shared_input(&mut self, src: &str, items: &[(Proj, Factor, String)], spec: ShardSpec) {
        if self.grouping && items.len() > 1 {
            self.push(Step::GroupedLinear {
                src: src.into(),
                dsts: items.iter().map(|i| i.2.clone()).collect(),
                weights: items.iter().map(|i| WeightRef::new(i.0, i.1)).collect(),
                spec,
            });
        } else {
            for (p, f, dst) in items {
                self.push(Step::Linear {
                    src: src.into(),
                    dst: dst.clone(),
                    weight: WeightRef::new(*p, *f),
                    spec,
                });
            }
        }
    }

    /// Linears with distinct inputs, batched or one by one.
    fn distinct_inputs(&mut self, items: Vec<(String, Proj, Factor, String)>, spec: ShardSpec) {
        if self.grouping && items.len() > 1 {
            self.push(Step::BatchedLinear {
                pairs: items
                    .into_iter()
                    .map(|(s, p, f, d)| (s, WeightRef::new(p, f), d))
                    .collect(),
                spec,
            });
        } else {
            for (src, p, f, dst) in items {
                self.push(Step::Linear {
                    src,
                    dst,
                    weight: WeightRef::new(p, f),
                    spec,
                });
            }
        }
    }

    fn full_rank(&mut self) {
        let (d, d_ff, tp) = (self.cfg.d, self.cfg.d_ff, self.tp);
        let full = Factor::Full;
        self.norm(NormSite::Attn, "x");
        self.shared_input(
            "n1",
            &[
                (Proj::Q, full, "q".into()),
                (Proj::K, full, "k".into()),
                (Proj::V, full, "v".into()),
            ],
            ShardSpec::column(d, tp),
        );
        self.attention("attn");
        self.distinct_inputs(vec![("attn".into(), Proj::O, full, "o.p".into())], ShardSpec::row(d, tp));
        self.all_reduce(vec!["o.p".into()], vec!["o".into()], vec![d], None);
        self.close("attn");

        self.push(Step::Add {
            a: "x".into(),
            b: "o".into(),
            dst: "h".into(),
        });
        self.norm(NormSite::Mlp, "h");
        self.shared_input(
            "n2",
            &[(Proj::Gate, full, "g".into()), (Proj::Up, full, "u".into())],
            ShardSpec::column(d_ff, tp),
        );
        self.push(Step::Swiglu {
            gate: "g".into(),
            up: "u".into(),
            dst: "m".into(),
        });
        self.distinct_inputs(vec![("m".into(), Proj::Down, full, "down.p".into())], ShardSpec::row(d_ff, tp));
        self.all_reduce(vec!["down.p".into()], vec!["dn".into()], vec![d], None);
        self.close("mlp");
    }

    /// Down factor (column over r), rank-space op, up factor (row over r)
    /// for each projection in `group`, ending in one reduction.
    fn vanilla_pairs(&mut self, src: &str, group: &[(Proj, &str)]) {
        let (r, tp) = (self.cfg.r, self.tp);
        let items: Vec<(Proj, Factor, String)> = group
            .iter()
            .map(|(p, _)| (*p, Factor::Down, slot(*p, "z")))
            .collect();
        self.shared_input(src, &items, ShardSpec::column(r, tp));
        let mids: Vec<String> = group.iter().map(|(p, _)| self.bottleneck(*p)).collect();
        let ups = group
            .iter()
            .zip(mids)
            .map(|((p, _), mid)| (mid, *p, Factor::Up, slot(*p, "p")))
            .collect();
        self.distinct_inputs(ups, ShardSpec::row(r, tp));
        self.all_reduce(
            group.iter().map(|(p, _)| slot(*p, "p")).collect(),
            group.iter().map(|(_, dst)| dst.to_string()).collect(),
            group.iter().map(|(p, _)| p.out_dim(&self.cfg)).collect(),
            None,
        );
    }

    fn vanilla(&mut self) {
        self.norm(NormSite::Attn, "x");
        if self.grouping {
            self.vanilla_pairs("n1", &[(Proj::Q, "q"), (Proj::K, "k"), (Proj::V, "v")]);
            self.close("qkv");
        } else {
            self.vanilla_pairs("n1", &[(Proj::Q, "q")]);
            self.close("q");
            self.vanilla_pairs("n1", &[(Proj::K, "k")]);
            self.close("k");
            self.vanilla_pairs("n1", &[(Proj::V, "v")]);
            self.close("v");
        }
        self.attention("attn");
        self.vanilla_pairs("attn", &[(Proj::O, "o")]);
        self.close("o");

        self.push(Step::Add {
            a: "x".into(),
            b: "o".into(),
            dst: "h".into(),
        });
        self.norm(NormSite::Mlp, "h");
        if self.grouping {
            self.vanilla_pairs("n2", &[(Proj::Gate, "g"), (Proj::Up, "u")]);
            self.close("gate-up");
        } else {
            self.vanilla_pairs("n2", &[(Proj::Gate, "g")]);
            self.close("gate");
            self.vanilla_pairs("n2", &[(Proj::Up, "u")]);
            self.close("up");
        }
        self.push(Step::Swiglu {
            gate: "g".into(),
            up: "u".into(),
            dst: "m".into(),
        });
        self.vanilla_pairs("m", &[(Proj::Down, "dn")]);
        self.close("down");
    }

    /// Row-parallel down factors over a sharded input, reduced onto the
    /// rank-wide `{p}.z` slots. `first` carries the norm statistic when
    /// online recovery is on.
    fn btp_downs(&mut self, src: &str, group: &[Proj], site: Option<NormSite>, first: bool) {
        let spec = ShardSpec::row(group[0].in_dim(&self.cfg), self.tp);
        let items: Vec<(Proj, Factor, String)> = group
            .iter()
            .map(|p| (*p, Factor::Down, slot(*p, "p")))
            .collect();
        self.shared_input(src, &items, spec);
        let recover = site.and_then(|s| self.recovery(s, first));
        self.all_reduce(
            group.iter().map(|p| slot(*p, "p")).collect(),
            group.iter().map(|p| slot(*p, "z")).collect(),
            vec![self.cfg.r; group.len()],
            recover,
        );
    }

    /// Column-parallel up factors producing sharded activations.
    fn btp_ups(&mut self, group: &[(Proj, &str)]) {
        let spec = ShardSpec::column(group[0].0.out_dim(&self.cfg), self.tp);
        let mids: Vec<String> = group.iter().map(|(p, _)| self.bottleneck(*p)).collect();
        let items = group
            .iter()
            .zip(mids)
            .map(|((p, dst), mid)| (mid, *p, Factor::Up, dst.to_string()))
            .collect();
        self.distinct_inputs(items, spec);
    }

    fn btp(&mut self) {
        let attn = Some(NormSite::Attn);
        let mlp = Some(NormSite::Mlp);
        self.norm(NormSite::Attn, "x");
        if self.grouping {
            self.btp_downs("n1", &[Proj::Q, Proj::K, Proj::V], attn, true);
            self.close("qkv");
        } else {
            self.btp_downs("n1", &[Proj::Q], attn, true);
            self.close("q");
            self.btp_downs("n1", &[Proj::K], attn, false);
            self.close("k");
            self.btp_downs("n1", &[Proj::V], attn, false);
            self.close("v");
        }
        self.btp_ups(&[(Proj::Q, "q"), (Proj::K, "k"), (Proj::V, "v")]);
        self.attention("attn");
        self.btp_downs("attn", &[Proj::O], None, false);
        self.close("o");

        self.btp_ups(&[(Proj::O, "o")]);
        self.push(Step::Add {
            a: "x".into(),
            b: "o".into(),
            dst: "h".into(),
        });
        self.norm(NormSite::Mlp, "h");
        if self.grouping {
            self.btp_downs("n2", &[Proj::Gate, Proj::Up], mlp, true);
            self.close("gate-up");
        } else {
            self.btp_downs("n2", &[Proj::Gate], mlp, true);
            self.close("gate");
            self.btp_downs("n2", &[Proj::Up], mlp, false);
            self.close("up");
        }
        self.btp_ups(&[(Proj::Gate, "g"), (Proj::Up, "u")]);
        self.push(Step::Swiglu {
            gate: "g".into(),
            up: "u".into(),
            dst: "m".into(),
        });
        self.btp_downs("m", &[Proj::Down], None, false);
        self.close("down");
        self.btp_ups(&[(Proj::Down, "dn")]);
    }

    fn epilogue(&mut self) -> Vec<Step> {
        self.push(Step::Add {
            a: "h".into(),
            b: "dn".into(),
            dst: "y".into(),
        });
        std::mem::take(&mut self.cur)
    }

    fn ckpt_slots(&self) -> Vec<String> {
        let mut slots = vec!["x".to_string()];
        match self.strategy {
            Strategy::FullRankTp => return Vec::new(),
            Strategy::VanillaTp => slots.extend(Proj::ALL.iter().map(|p| slot(*p, "z"))),
            Strategy::Btp => {
                slots.extend(Proj::ALL.iter().map(|p| slot(*p, "z")));
                if self.norm != NormStrategy::Replicated {
                    slots.push(NormSite::Attn.stat_slot());
                    slots.push(NormSite::Mlp.stat_slot());
                }
            }
        }
        slots
    }
}

fn require_divisible(name: &str, extent: usize, tp: usize) -> Result<()> {
    if extent % tp != 0 {
        return Err(Error::Plan(format!(
            "{name}={extent} is not divisible by tp={tp}"
        )));
    }
    Ok(())
}

/// Build the sharding plan for one decoder block.
pub fn plan(
    strategy: Strategy,
    variant: Variant,
    cfg: &ModelConfig,
    shape: &RunShape,
    options: PlanOptions,
) -> Result<ShardPlan> {
    cfg.validate().map_err(|e| Error::Plan(e.to_string()))?;
    let tp = shape.tp;
    if tp == 0 || shape.b == 0 || shape.s == 0 || shape.p == 0 {
        return Err(Error::Plan("b, s, tp and p must be positive".into()));
    }
    require_divisible("heads", cfg.heads, tp)?;
    require_divisible("d", cfg.d, tp)?;
    require_divisible("d_ff", cfg.d_ff, tp)?;
    match strategy {
        Strategy::FullRankTp if variant.is_low_rank() => {
            return Err(Error::Plan(format!(
                "full-rank TP shards full matrices; variant {variant} is factored"
            )))
        }
        Strategy::VanillaTp | Strategy::Btp if !variant.is_low_rank() => {
            return Err(Error::Plan(format!("{strategy} needs a low-rank variant")))
        }
        Strategy::VanillaTp => require_divisible("r", cfg.r, tp)?,
        _ => {}
    }

    let mut warnings = Vec::new();
    let norm = match (strategy, options.online_norm) {
        (Strategy::Btp, true) => NormStrategy::Online,
        (Strategy::Btp, false) => NormStrategy::Sync,
        (_, online) => {
            if online {
                warnings.push(format!(
                    "online norm has no sharded norm to fuse under {strategy}; norms stay replicated"
                ));
            }
            NormStrategy::Replicated
        }
    };
    let mut effective = options;
    effective.online_norm = norm == NormStrategy::Online;
    if options.lowrank_ckpt && !variant.is_low_rank() {
        warnings.push("low-rank checkpointing needs a low-rank variant; disabled".into());
        effective.lowrank_ckpt = false;
    }

    let mut b = Builder {
        strategy,
        cfg: *cfg,
        variant,
        tp,
        heads_local: cfg.heads / tp,
        norm,
        grouping: options.grouping,
        chunks: Vec::new(),
        cur: Vec::new(),
    };
    let residual = match strategy {
        Strategy::FullRankTp => {
            b.full_rank();
            ResidualLayout::Replicated
        }
        Strategy::VanillaTp => {
            b.heads_local = cfg.heads;
            b.vanilla();
            ResidualLayout::Replicated
        }
        Strategy::Btp => {
            b.btp();
            ResidualLayout::ShardedAlongD
        }
    };
    let epilogue = b.epilogue();
    let sharded = residual == ResidualLayout::ShardedAlongD;
    let finale = if sharded {
        vec![Step::Gather {
            src: "y".into(),
            dst: "y.full".into(),
            width: cfg.d,
            tag: Tag::Boundary,
        }]
    } else {
        Vec::new()
    };
    let plan = ShardPlan {
        strategy,
        variant,
        cfg: *cfg,
        shape: *shape,
        options: effective,
        norm,
        residual,
        ckpt_slots: b.ckpt_slots(),
        chunks: b.chunks,
        epilogue,
        finale,
        boundary: BoundaryRules {
            embedding_output: residual,
            final_projection: ShardKind::Replicated,
            gather_before_final: sharded,
        },
        block_output: "y".into(),
        output: if sharded { "y.full".into() } else { "y".into() },
        element_bytes: DEFAULT_ELEMENT_BYTES,
        warnings,
    };
    plan.validate()?;
    Ok(plan)
}

/// Rebuild `plan` with grouped linears, checking that every group only
/// joins weights that were sharded the same way.
pub fn apply_grouping(plan: &ShardPlan) -> Result<ShardPlan> {
    let mut options = plan.options;
    options.grouping = true;
    let mut grouped = self::plan(plan.strategy, plan.variant, &plan.cfg, &plan.shape, options)?;
    grouped.element_bytes = plan.element_bytes;
    let before = plan.weight_specs()?;
    for (_, step) in grouped.steps() {
        let (members, spec): (Vec<WeightRef>, ShardSpec) = match step {
            Step::GroupedLinear { weights, spec, .. } => (weights.clone(), *spec),
            Step::BatchedLinear { pairs, spec } => (pairs.iter().map(|p| p.1).collect(), *spec),
            _ => continue,
        };
        for w in members {
            if before.get(&w) != Some(&spec) {
                return Err(Error::Plan(format!(
                    "cannot group {w}: its shard spec differs from the group's [{spec}]"
                )));
            }
        }
    }
    Ok(grouped)
}

impl ShardPlan {
    pub fn with_element_bytes(mut self, bytes: usize) -> Self {
        self.element_bytes = bytes;
        self
    }

    /// Per-block steps in execution order with their chunk id.
    pub fn steps(&self) -> Vec<(&str, &Step)> {
        let mut out = Vec::new();
        for c in &self.chunks {
            for s in &c.steps {
                out.push((c.id.as_str(), s));
            }
        }
        for s in &self.epilogue {
            out.push((EPILOGUE, s));
        }
        out
    }

    pub fn finale_steps(&self) -> Vec<(&str, &Step)> {
        self.finale.iter().map(|s| (FINALE, s)).collect()
    }

    /// The single spec each weight is sharded with.
    pub fn weight_specs(&self) -> Result<BTreeMap<WeightRef, ShardSpec>> {
        let mut map = BTreeMap::new();
        let mut put = |w: WeightRef, spec: ShardSpec| -> Result<()> {
            if let Some(prev) = map.insert(w, spec) {
                if prev != spec {
                    return Err(Error::Plan(format!("{w} is sharded two ways")));
                }
            }
            Ok(())
        };
        for (_, step) in self.steps() {
            match step {
                Step::Linear { weight, spec, .. } => put(*weight, *spec)?,
                Step::GroupedLinear { weights, spec, .. } => {
                    for w in weights {
                        put(*w, *spec)?;
                    }
                }
                Step::BatchedLinear { pairs, spec } => {
                    for p in pairs {
                        put(p.1, *spec)?;
                    }
                }
                _ => {}
            }
        }
        Ok(map)
    }

    pub fn tokens(&self) -> usize {
        self.shape.tokens()
    }

    pub fn gemm_launches_per_block(&self) -> u64 {
        self.steps().iter().map(|(_, s)| s.launches()).sum()
    }

    /// Static layout of every slot the plan writes.
    pub fn layouts(&self) -> Result<BTreeMap<String, Layout>> {
        let mut map = BTreeMap::new();
        let x = match self.residual {
            ResidualLayout::Replicated => Layout::Replicated,
            ResidualLayout::ShardedAlongD => Layout::Sharded,
        };
        map.insert("x".to_string(), x);
        let all: Vec<(&str, &Step)> = self.steps().into_iter().chain(self.finale_steps()).collect();
        for (chunk, step) in all {
            let get = |m: &BTreeMap<String, Layout>, s: &str| {
                m.get(s).copied().ok_or_else(|| {
                    Error::Plan(format!("chunk {chunk}: `{s}` is read before it is written"))
                })
            };
            for input in step.inputs() {
                let l = get(&map, &input)?;
                let partial_ok = matches!(step, Step::AllReduce { .. });
                if l == Layout::Partial && !partial_ok {
                    return Err(Error::Plan(format!(
                        "chunk {chunk}: `{input}` is a partial sum consumed before its reduction"
                    )));
                }
            }
            let out_layout = match step {
                Step::Norm { src, site, mode, .. } => {
                    if *mode == NormMode::Local {
                        map.insert(site.local_ss_slot(), Layout::PerRank);
                        map.insert(site.local_rms_slot(), Layout::PerRank);
                    }
                    get(&map, src)?
                }
                Step::StatReduce { .. } => Layout::Replicated,
                Step::Linear { src, spec, .. }
                | Step::GroupedLinear { src, spec, .. } => linear_layout(get(&map, src)?, spec, chunk)?,
                Step::BatchedLinear { pairs, spec } => {
                    let mut l = Layout::Replicated;
                    for p in pairs {
                        l = linear_layout(get(&map, &p.0)?, spec, chunk)?;
                    }
                    l
                }
                Step::Bottleneck { src, .. } => get(&map, src)?,
                Step::Attention { q, .. } => get(&map, q)?,
                Step::Swiglu { gate: a, up: b, .. } | Step::Add { a, b, .. } => {
                    let (la, lb) = (get(&map, a)?, get(&map, b)?);
                    let op = if matches!(step, Step::Add { .. }) {
                        OpKind::ResidualAdd
                    } else {
                        OpKind::Swiglu
                    };
                    let ctx = OpContext {
                        sharded: la == Layout::Sharded,
                        aligned: la == lb,
                        heads: self.cfg.heads,
                        tp: self.shape.tp,
                    };
                    if classify(op, ctx)? == Safety::ShardedUnsafe || la != lb {
                        return Err(Error::Plan(format!(
                            "chunk {chunk}: operands `{a}` and `{b}` have different layouts"
                        )));
                    }
                    la
                }
                Step::AllReduce { .. } => Layout::Replicated,
                Step::Gather { .. } => Layout::Replicated,
            };
            for out in step.outputs() {
                map.entry(out).or_insert(out_layout);
            }
            if let Step::AllReduce { dsts, .. } = step {
                for d in dsts {
                    map.insert(d.clone(), Layout::Replicated);
                }
            }
        }
        Ok(map)
    }

    /// Check the structural invariants: one trailing all-reduce per chunk,
    /// no collective elsewhere except standalone statistics, safe ops only,
    /// and the per-strategy chunk count.
    pub fn validate(&self) -> Result<()> {
        for c in &self.chunks {
            if c.collective().is_none() {
                return Err(Error::Plan(format!("chunk {} does not end in an all-reduce", c.id)));
            }
            let extra = c.steps[..c.steps.len() - 1]
                .iter()
                .filter(|s| matches!(s, Step::AllReduce { .. } | Step::Gather { .. }))
                .count();
            if extra > 0 {
                return Err(Error::Plan(format!("chunk {} holds more than one collective", c.id)));
            }
            for s in &c.steps {
                if let Step::Attention { heads, .. } = s {
                    if self.strategy != Strategy::VanillaTp {
                        classify(OpKind::Attention, OpContext::sharded(self.cfg.heads, self.shape.tp))?;
                        debug_assert_eq!(*heads * self.shape.tp, self.cfg.heads);
                    }
                }
                if let Step::Norm { mode, .. } = s {
                    let ctx = OpContext::sharded(self.cfg.heads, self.shape.tp);
                    let sharded = *mode != NormMode::Replicated;
                    let unsafe_norm = classify(OpKind::RmsNorm, OpContext { sharded, ..ctx })?
                        == Safety::ShardedUnsafe;
                    // sharded norms are legal only with a statistic handler
                    if unsafe_norm && self.norm == NormStrategy::Replicated {
                        return Err(Error::Plan(format!(
                            "chunk {}: norm over a sharded hidden dim without a handler",
                            c.id
                        )));
                    }
                }
            }
        }
        for s in &self.epilogue {
            if s.is_collective() {
                return Err(Error::Plan("epilogue may not communicate".into()));
            }
        }
        let expected = match (self.strategy, self.options.grouping) {
            (Strategy::FullRankTp, _) => 2,
            (_, false) => 7,
            (_, true) => 4,
        };
        if self.chunks.len() != expected {
            return Err(Error::Plan(format!(
                "{} expects {expected} chunks per block, found {}",
                self.strategy,
                self.chunks.len()
            )));
        }
        self.weight_specs()?;
        self.layouts()?;
        Ok(())
    }

    /// Sum of the block-tagged payloads of one forward pass of one block.
    pub fn block_volume(&self) -> u64 {
        enumerate_collectives(self)
            .iter()
            .filter(|r| r.tag == Tag::Block && r.chunk_id != FINALE)
            .map(|r| r.elements)
            .sum()
    }
}

fn linear_layout(input: Layout, spec: &ShardSpec, chunk: &str) -> Result<Layout> {
    Ok(match spec.kind {
        ShardKind::Column => {
            if input != Layout::Replicated {
                return Err(Error::Plan(format!(
                    "chunk {chunk}: column-parallel linear needs a replicated input"
                )));
            }
            Layout::Sharded
        }
        ShardKind::Row => {
            if input != Layout::Sharded {
                return Err(Error::Plan(format!(
                    "chunk {chunk}: row-parallel linear needs a sharded input"
                )));
            }
            Layout::Partial
        }
        ShardKind::Replicated => input,
    })
}

/// Static prediction of the forward collectives of one block followed by
/// the stack finale, in the order the simulator emits them.
pub fn enumerate_collectives(plan: &ShardPlan) -> Vec<CollectiveRecord> {
    let t = plan.tokens() as u64;
    let bytes = plan.element_bytes as u64;
    let mut out = Vec::new();
    let mut push = |kind, tag, chunk: &str, elements: u64, stat: u64| {
        out.push(CollectiveRecord {
            kind,
            tag,
            chunk_id: chunk.to_string(),
            elements,
            bytes: elements * bytes,
            stat_elements: stat,
            stat_bytes: stat * bytes,
            pass: Pass::Forward,
        });
    };
    for (chunk, step) in plan.steps().into_iter().chain(plan.finale_steps()) {
        match step {
            Step::StatReduce { .. } => push(CollectiveKind::AllReduce, Tag::Stat, chunk, t, 0),
            Step::AllReduce { widths, recover, .. } => {
                let e = t * widths.iter().sum::<usize>() as u64;
                match recover {
                    Some(Recovery { carry: true, .. }) => {
                        push(CollectiveKind::AllReduceCoalesced, Tag::Block, chunk, e, t)
                    }
                    _ => push(CollectiveKind::AllReduce, Tag::Block, chunk, e, 0),
                }
            }
            Step::Gather { width, tag, .. } => {
                push(CollectiveKind::AllGather, *tag, chunk, t * *width as u64, 0)
            }
            _ => {}
        }
    }
    out
}

impl fmt::Display for ShardPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let norm = match self.norm {
            NormStrategy::Replicated => "replicated",
            NormStrategy::Sync => "sync",
            NormStrategy::Online => "online",
        };
        let residual = match self.residual {
            ResidualLayout::Replicated => "replicated",
            ResidualLayout::ShardedAlongD => "sharded-d",
        };
        writeln!(
            f,
            "plan {} variant={} tp={} b={} s={} norm={norm} grouping={} residual={residual}",
            self.strategy, self.variant, self.shape.tp, self.shape.b, self.shape.s, self.options.grouping
        )?;
        let (b, s) = (self.shape.b, self.shape.s);
        for c in &self.chunks {
            let steps: Vec<String> = c.steps.iter().map(|s| s.to_string()).collect();
            let payload = match c.collective() {
                Some(Step::AllReduce { widths, .. }) => widths.iter().sum::<usize>(),
                _ => 0,
            };
            writeln!(f, "chunk {}: {} | payload [{b},{s},{payload}]", c.id, steps.join(" ; "))?;
        }
        let epi: Vec<String> = self.epilogue.iter().map(|s| s.to_string()).collect();
        writeln!(f, "{EPILOGUE}: {}", epi.join(" ; "))?;
        if !self.finale.is_empty() {
            let fin: Vec<String> = self.finale.iter().map(|s| s.to_string()).collect();
            writeln!(f, "{FINALE}: {}", fin.join(" ; "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg8() -> ModelConfig {
        ModelConfig::new(1, 2, 8, 20, 2).unwrap()
    }

    fn payloads(p: &ShardPlan) -> Vec<(String, u64)> {
        enumerate_collectives(p)
            .into_iter()
            .filter(|r| r.tag == Tag::Block)
            .map(|r| (r.chunk_id, r.elements))
            .collect()
    }

    fn mk(strategy: Strategy, variant: Variant, tp: usize, opts: PlanOptions) -> ShardPlan {
        plan(strategy, variant, &cfg8(), &RunShape::new(1, 2, tp), opts).unwrap()
    }

    #[test]
    fn full_rank_two_chunks() {
        let p = mk(Strategy::FullRankTp, Variant::FullRank, 2, PlanOptions::default());
        assert_eq!(payloads(&p), vec![("attn".into(), 16), ("mlp".into(), 16)]);
        assert_eq!(p.block_volume(), 32);
    }

    #[test]
    fn vanilla_seven_chunks() {
        let p = mk(Strategy::VanillaTp, Variant::Svd, 2, PlanOptions::default());
        let pl = payloads(&p);
        assert_eq!(pl.len(), 7);
        assert_eq!(pl.iter().filter(|(_, e)| *e == 16).count(), 5);
        assert_eq!(pl.iter().filter(|(_, e)| *e == 40).count(), 2);
        assert_eq!(p.block_volume(), 160);
    }

    #[test]
    fn btp_seven_rank_payloads() {
        let p = mk(Strategy::Btp, Variant::Svd, 2, PlanOptions::default());
        let pl = payloads(&p);
        assert_eq!(pl.len(), 7);
        assert!(pl.iter().all(|(_, e)| *e == 4));
        assert_eq!(p.block_volume(), 28);
        assert_eq!(p.residual, ResidualLayout::ShardedAlongD);
        assert!(p.boundary.gather_before_final);
        let fin = enumerate_collectives(&p);
        assert_eq!(fin.last().unwrap().tag, Tag::Boundary);
    }

    #[test]
    fn btp_chunks_run_up_to_down() {
        let p = mk(Strategy::Btp, Variant::Cola, 2, PlanOptions::default());
        let specs = p.weight_specs().unwrap();
        for proj in Proj::ALL {
            assert_eq!(specs[&WeightRef::new(proj, Factor::Down)].kind, ShardKind::Row);
            assert_eq!(specs[&WeightRef::new(proj, Factor::Up)].kind, ShardKind::Column);
        }
        let layouts = p.layouts().unwrap();
        for s in ["x", "h", "y"] {
            assert_eq!(layouts[s], Layout::Sharded, "{s}");
        }
        assert_eq!(layouts["q.z"], Layout::Replicated);
    }

    #[test]
    fn vanilla_shards_rank() {
        let p = mk(Strategy::VanillaTp, Variant::Svd, 2, PlanOptions::default());
        let specs = p.weight_specs().unwrap();
        let down = specs[&WeightRef::new(Proj::Q, Factor::Down)];
        assert_eq!((down.kind, down.local_extent), (ShardKind::Column, 1));
        let up = specs[&WeightRef::new(Proj::Q, Factor::Up)];
        assert_eq!((up.kind, up.local_extent), (ShardKind::Row, 1));
    }

    #[test]
    fn divisibility_errors_name_dimension() {
        let cfg = ModelConfig::new(1, 6, 24, 48, 6).unwrap();
        let err = plan(Strategy::Btp, Variant::Svd, &cfg, &RunShape::new(1, 2, 4), PlanOptions::default())
            .unwrap_err();
        assert!(err.to_string().contains("heads"), "{err}");
        let cfg = ModelConfig::new(1, 4, 16, 40, 2).unwrap();
        let err = plan(Strategy::VanillaTp, Variant::Svd, &cfg, &RunShape::new(1, 2, 4), PlanOptions::default())
            .unwrap_err();
        assert!(err.to_string().contains("r=2"), "{err}");
        // BTP does not split the rank
        assert!(plan(Strategy::Btp, Variant::Svd, &cfg, &RunShape::new(1, 2, 4), PlanOptions::default()).is_ok());
    }

    #[test]
    fn variant_strategy_mismatch() {
        let cfg = cfg8();
        let shape = RunShape::new(1, 2, 2);
        assert!(plan(Strategy::FullRankTp, Variant::Svd, &cfg, &shape, PlanOptions::default()).is_err());
        assert!(plan(Strategy::Btp, Variant::FullRank, &cfg, &shape, PlanOptions::default()).is_err());
    }

    #[test]
    fn classification() {
        let ctx = OpContext::sharded(8, 4);
        assert_eq!(classify(OpKind::Swiglu, ctx).unwrap(), Safety::ShardedSafe);
        assert_eq!(classify(OpKind::RmsNorm, ctx).unwrap(), Safety::ShardedUnsafe);
        assert_eq!(classify(OpKind::Attention, ctx).unwrap(), Safety::ShardedSafe);
        assert_eq!(classify(OpKind::Concat, ctx).unwrap(), Safety::ShardedUnsafe);
        assert!(classify(OpKind::Attention, OpContext::sharded(6, 4)).is_err());
        let misaligned = OpContext {
            aligned: false,
            ..ctx
        };
        assert_eq!(classify(OpKind::ResidualAdd, misaligned).unwrap(), Safety::ShardedUnsafe);
        assert!("dropout".parse::<OpKind>().is_err());
        assert_eq!("swiglu".parse::<OpKind>().unwrap(), OpKind::Swiglu);
    }

    #[test]
    fn grouping_btp() {
        let p = mk(Strategy::Btp, Variant::Svd, 2, PlanOptions::default());
        let g = apply_grouping(&p).unwrap();
        let before = payloads(&p);
        let after = payloads(&g);
        assert!(after.len() < before.len());
        assert_eq!(after.len(), 4);
        assert_eq!(after[0], ("qkv".into(), 12));
        assert_eq!(p.block_volume(), g.block_volume());
        assert!(g.gemm_launches_per_block() < p.gemm_launches_per_block());
        assert_eq!((p.gemm_launches_per_block(), g.gemm_launches_per_block()), (14, 8));
    }

    #[test]
    fn grouping_full_rank_cuts_launches_only() {
        let p = mk(Strategy::FullRankTp, Variant::FullRank, 2, PlanOptions::default());
        let g = apply_grouping(&p).unwrap();
        assert_eq!((p.gemm_launches_per_block(), g.gemm_launches_per_block()), (7, 4));
        assert_eq!(payloads(&p), payloads(&g));
    }

    #[test]
    fn online_norm_carries_stats() {
        let opts = PlanOptions {
            online_norm: true,
            ..Default::default()
        };
        let p = mk(Strategy::Btp, Variant::Svd, 2, opts);
        let recs = enumerate_collectives(&p);
        let coalesced: Vec<_> = recs
            .iter()
            .filter(|r| r.kind == CollectiveKind::AllReduceCoalesced)
            .collect();
        assert_eq!(coalesced.len(), 2);
        assert!(coalesced.iter().all(|r| r.stat_elements == 2));
        assert!(recs.iter().all(|r| r.tag != Tag::Stat));

        let sync = mk(Strategy::Btp, Variant::Svd, 2, PlanOptions::default());
        let stats = enumerate_collectives(&sync)
            .into_iter()
            .filter(|r| r.tag == Tag::Stat)
            .count();
        assert_eq!(stats, 2);
    }

    #[test]
    fn online_norm_outside_btp_falls_back() {
        let opts = PlanOptions {
            online_norm: true,
            ..Default::default()
        };
        let p = mk(Strategy::FullRankTp, Variant::FullRank, 2, opts);
        assert_eq!(p.norm, NormStrategy::Replicated);
        assert!(!p.options.online_norm);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn text_form_has_one_line_per_chunk() {
        let p = mk(Strategy::Btp, Variant::Cola, 2, PlanOptions::default());
        let text = p.to_string();
        assert_eq!(text.lines().filter(|l| l.starts_with("chunk ")).count(), 7);
        assert!(text.contains("chunk q: stat-reduce n1.stat <- x"));
        assert!(text.contains("payload [1,2,2]"));
    }

    #[test]
    fn ckpt_slots_per_strategy() {
        let p = mk(Strategy::VanillaTp, Variant::Svd, 2, PlanOptions::default());
        assert_eq!(p.ckpt_slots.len(), 8);
        let p = mk(Strategy::FullRankTp, Variant::FullRank, 2, PlanOptions::default());
        assert!(p.ckpt_slots.is_empty());
    }
}
