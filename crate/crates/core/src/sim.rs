//! Single-threaded SPMD executor for shard plans.
//!
//! Every rank owns its weight shards and a workspace of named activation
//! slots. Steps run rank by rank in ascending order; collectives are
//! rendezvous points that see all ranks at once.

use std::collections::BTreeMap;

use crate::ckpt;
use crate::comm::{Comm, Tag, Trace};
use crate::error::{Error, Result};
use crate::model::{
    causal_attention, cola_nonlinearity, DecoderBlockWeights, Proj, RankPaths, Variant,
};
use crate::norm::{divide_rows, local_normalize, normalize_rows, rms_from_sum_squares, rmsnorm_reference};
use crate::plan::{
    Layout, NormMode, NormSite, Recovery, ShardKind, ShardPlan, ShardSpec, Step, WeightRef,
};
use crate::tensor::{batched_matmul, concat_axis, matmul, split_axis, swiglu, Tensor};

#[derive(Debug, Clone)]
pub struct RankState {
    pub rank: usize,
    pub weights: BTreeMap<WeightRef, Tensor>,
    pub workspace: BTreeMap<String, Tensor>,
    attn_norm: Tensor,
    mlp_norm: Tensor,
    h_prev: Option<BTreeMap<Proj, Tensor>>,
    pub h_cur: BTreeMap<Proj, Tensor>,
}

impl RankState {
    pub fn slot(&self, name: &str) -> Result<&Tensor> {
        self.workspace
            .get(name)
            .ok_or_else(|| Error::Simulation(format!("rank {}: slot `{name}` is empty", self.rank)))
    }

    fn gamma(&self, site: NormSite) -> &Tensor {
        match site {
            NormSite::Attn => &self.attn_norm,
            NormSite::Mlp => &self.mlp_norm,
        }
    }
}

fn shard_weight(w: &Tensor, spec: &ShardSpec, tp: usize) -> Result<Vec<Tensor>> {
    match spec.kind {
        ShardKind::Replicated => Ok(vec![w.clone(); tp]),
        _ => split_axis(w, spec.axis, tp),
    }
}

fn split_widths(t: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>> {
    if widths.len() == 1 {
        return Ok(vec![t.clone()]);
    }
    let total: usize = widths.iter().sum();
    if total != t.last_dim() {
        return Err(Error::Simulation(format!(
            "cannot split width {} into {widths:?}",
            t.last_dim()
        )));
    }
    let rows = t.rows();
    let mut outs: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
    for row in t.data().chunks(total) {
        let mut off = 0;
        for (o, &w) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(data, &w)| Tensor::new(vec![rows, w], data))
        .collect()
}

/// Running state of one plan over `tp` simulated ranks.
pub struct Machine<'a> {
    pub plan: &'a ShardPlan,
    pub ranks: Vec<RankState>,
    pub layouts: BTreeMap<String, Layout>,
    variant: Variant,
    layer: usize,
    eps: f64,
}

impl<'a> Machine<'a> {
    pub fn new(plan: &'a ShardPlan, block: &DecoderBlockWeights) -> Result<Self> {
        if block.cfg != plan.cfg || block.variant != plan.variant {
            return Err(Error::Simulation(
                "block weights do not match the plan's config and variant".into(),
            ));
        }
        let tp = plan.shape.tp;
        let specs = plan.weight_specs()?;
        let mut ranks: Vec<RankState> = (0..tp)
            .map(|rank| RankState {
                rank,
                weights: BTreeMap::new(),
                workspace: BTreeMap::new(),
                attn_norm: block.attn_norm.clone(),
                mlp_norm: block.mlp_norm.clone(),
                h_prev: None,
                h_cur: BTreeMap::new(),
            })
            .collect();
        for (w, spec) in &specs {
            let full = block.weight(w.proj, w.factor)?;
            for (rank, shard) in ranks.iter_mut().zip(shard_weight(full, spec, tp)?) {
                rank.weights.insert(*w, shard);
            }
        }
        if plan.norm != crate::plan::NormStrategy::Replicated {
            let a = split_axis(&block.attn_norm, 0, tp)?;
            let m = split_axis(&block.mlp_norm, 0, tp)?;
            for ((rank, a), m) in ranks.iter_mut().zip(a).zip(m) {
                rank.attn_norm = a;
                rank.mlp_norm = m;
            }
        }
        Ok(Self {
            plan,
            ranks,
            layouts: BTreeMap::new(),
            variant: block.variant,
            layer: block.layer,
            eps: block.cfg.norm_eps,
        })
    }

    fn tp(&self) -> usize {
        self.ranks.len()
    }

    /// Place a `[b, s, d]` block input according to the residual layout.
    pub fn load_input(&mut self, x: &Tensor) -> Result<()> {
        let d = self.plan.cfg.d;
        if x.rank() != 3 || x.shape()[0] != self.plan.shape.b || x.shape()[1] != self.plan.shape.s || x.last_dim() != d {
            return Err(Error::Dimension(format!(
                "block input must be [{}, {}, {d}], got {:?}",
                self.plan.shape.b,
                self.plan.shape.s,
                x.shape()
            )));
        }
        let xm = x.as_matrix();
        match self.plan.residual {
            crate::plan::ResidualLayout::Replicated => self.put_replicated("x", xm),
            crate::plan::ResidualLayout::ShardedAlongD => {
                let shards = split_axis(&xm, 1, self.tp())?;
                self.put_each("x", shards, Layout::Sharded);
            }
        }
        Ok(())
    }

    /// Place an already distributed block input (stack execution).
    pub fn load_sharded(&mut self, name: &str, per_rank: Vec<Tensor>, layout: Layout) {
        self.put_each(name, per_rank, layout);
    }

    /// LaX rank-space inputs from the previous layer, per rank.
    pub fn load_h_prev(&mut self, per_rank: Vec<BTreeMap<Proj, Tensor>>) {
        for (rank, h) in self.ranks.iter_mut().zip(per_rank) {
            rank.h_prev = Some(h);
        }
    }

    fn put_replicated(&mut self, name: &str, t: Tensor) {
        for rank in &mut self.ranks {
            rank.workspace.insert(name.to_string(), t.clone());
        }
        self.layouts.insert(name.to_string(), Layout::Replicated);
    }

    fn put_each(&mut self, name: &str, per_rank: Vec<Tensor>, layout: Layout) {
        for (rank, t) in self.ranks.iter_mut().zip(per_rank) {
            rank.workspace.insert(name.to_string(), t);
        }
        self.layouts.insert(name.to_string(), layout);
    }

    fn gather_slot(&self, name: &str) -> Result<Vec<&Tensor>> {
        self.ranks.iter().map(|r| r.slot(name)).collect()
    }

    fn layout(&self, name: &str) -> Layout {
        self.layouts.get(name).copied().unwrap_or(Layout::Replicated)
    }

    /// Apply `f` on every rank and store the single result in `dst`.
    fn each(
        &mut self,
        dst: &str,
        layout: Layout,
        mut f: impl FnMut(&RankState) -> Result<Tensor>,
    ) -> Result<()> {
        let outs: Vec<Tensor> = self.ranks.iter().map(&mut f).collect::<Result<_>>()?;
        self.put_each(dst, outs, layout);
        Ok(())
    }

    fn linear_layout(&self, src: &str, spec: &ShardSpec) -> Layout {
        match spec.kind {
            ShardKind::Column => Layout::Sharded,
            ShardKind::Row => Layout::Partial,
            ShardKind::Replicated => self.layout(src),
        }
    }

    pub fn run(&mut self, steps: &[(&str, &Step)], comm: &mut Comm) -> Result<()> {
        for (chunk, step) in steps {
            self.step(chunk, step, comm)
                .map_err(|e| match e {
                    Error::Simulation(m) => Error::Simulation(format!("chunk {chunk}: {step}: {m}")),
                    other => other,
                })?;
        }
        Ok(())
    }

    pub fn step(&mut self, chunk: &str, step: &Step, comm: &mut Comm) -> Result<()> {
        let pass = comm.pass();
        let (b, s) = (self.plan.shape.b, self.plan.shape.s);
        let d = self.plan.cfg.d;
        let eps = self.eps;
        match step {
            Step::Norm { src, dst, site, mode } => match mode {
                NormMode::Replicated => {
                    let l = self.layout(src);
                    self.each(dst, l, |r| rmsnorm_reference(r.slot(src)?, r.gamma(*site), eps))?;
                }
                NormMode::Global => {
                    let stat = site.stat_slot();
                    self.each(dst, Layout::Sharded, |r| {
                        let rms = rms_from_sum_squares(r.slot(&stat)?, d, eps);
                        normalize_rows(r.slot(src)?, &rms, r.gamma(*site))
                    })?;
                }
                NormMode::Local => {
                    let mut outs = Vec::new();
                    let mut sss = Vec::new();
                    let mut rmss = Vec::new();
                    for r in &self.ranks {
                        let (o, ss, rms) = local_normalize(r.slot(src)?, r.gamma(*site), eps)?;
                        outs.push(o);
                        sss.push(ss);
                        rmss.push(rms);
                    }
                    self.put_each(dst, outs, Layout::Sharded);
                    self.put_each(&site.local_ss_slot(), sss, Layout::PerRank);
                    self.put_each(&site.local_rms_slot(), rmss, Layout::PerRank);
                }
            },
            Step::StatReduce { src, site } => {
                let ss: Vec<Tensor> = self
                    .ranks
                    .iter()
                    .map(|r| r.slot(src).map(Tensor::row_sum_squares))
                    .collect::<Result<_>>()?;
                let refs: Vec<&Tensor> = ss.iter().collect();
                let total = comm.all_reduce(&refs, Tag::Stat, chunk)?;
                self.put_replicated(&site.stat_slot(), total);
            }
            Step::Linear { src, dst, weight, spec } => {
                let mut flops = 0;
                let layout = self.linear_layout(src, spec);
                self.each(dst, layout, |r| {
                    let (y, f) = matmul(r.slot(src)?, &r.weights[weight])?;
                    flops += f;
                    Ok(y)
                })?;
                let c = comm.trace.counters_mut(pass);
                c.gemm_launches += 1;
                c.gemm_flops += flops;
            }
            Step::GroupedLinear { src, dsts, weights, spec } => {
                let mut flops = 0;
                let mut per_rank = Vec::new();
                for r in &self.ranks {
                    let parts: Vec<Tensor> = weights.iter().map(|w| r.weights[w].clone()).collect();
                    let widths: Vec<usize> = parts.iter().map(Tensor::last_dim).collect();
                    let fused = concat_axis(&parts, 1)?;
                    let (y, f) = matmul(r.slot(src)?, &fused)?;
                    flops += f;
                    per_rank.push(split_widths(&y, &widths)?);
                }
                let layout = self.linear_layout(src, spec);
                for (i, dst) in dsts.iter().enumerate() {
                    let outs = per_rank.iter().map(|p| p[i].clone()).collect();
                    self.put_each(dst, outs, layout);
                }
                let c = comm.trace.counters_mut(pass);
                c.gemm_launches += 1;
                c.gemm_flops += flops;
            }
            Step::BatchedLinear { pairs, spec } => {
                let mut flops = 0;
                let mut per_rank = Vec::new();
                for r in &self.ranks {
                    let ins: Vec<(&Tensor, &Tensor)> = pairs
                        .iter()
                        .map(|(s, w, _)| Ok((r.slot(s)?, &r.weights[w])))
                        .collect::<Result<_>>()?;
                    let out = batched_matmul(&ins)?;
                    flops += out.flops;
                    per_rank.push(out.outputs);
                }
                for (i, (src, _, dst)) in pairs.iter().enumerate() {
                    let layout = self.linear_layout(src, spec);
                    let outs = per_rank.iter().map(|p| p[i].clone()).collect();
                    self.put_each(dst, outs, layout);
                }
                let c = comm.trace.counters_mut(pass);
                c.gemm_launches += 1;
                c.gemm_flops += flops;
            }
            Step::Bottleneck { src, dst, proj } => {
                let l = self.layout(src);
                let (variant, layer) = (self.variant, self.layer);
                let mut outs = Vec::new();
                for r in &mut self.ranks {
                    let z = r.slot(src)?.clone();
                    let out = match variant {
                        Variant::Cola => cola_nonlinearity(&z),
                        Variant::Lax => {
                            r.h_cur.insert(*proj, z.clone());
                            match &r.h_prev {
                                Some(h) => {
                                    let prev = h.get(proj).ok_or_else(|| {
                                        Error::Simulation(format!("h_prev lacks {proj}"))
                                    })?;
                                    z.add(prev)?
                                }
                                None if layer == 0 => z,
                                None => {
                                    return Err(Error::InvalidArgument(format!(
                                        "LaX layer {layer} needs the previous layer's low-rank activations"
                                    )))
                                }
                            }
                        }
                        _ => z,
                    };
                    outs.push(out);
                }
                self.put_each(dst, outs, l);
            }
            Step::Attention { q, k, v, dst, heads } => {
                let l = self.layout(q);
                let mut flops = 0;
                self.each(dst, l, |r| {
                    let (o, f) = causal_attention(r.slot(q)?, r.slot(k)?, r.slot(v)?, b, s, *heads)?;
                    flops += f;
                    Ok(o)
                })?;
                comm.trace.counters_mut(pass).attention_flops += flops;
            }
            Step::Swiglu { gate, up, dst } => {
                let l = self.layout(gate);
                self.each(dst, l, |r| swiglu(r.slot(gate)?, r.slot(up)?))?;
            }
            Step::Add { a, b: rhs, dst } => {
                let l = self.layout(a);
                self.each(dst, l, |r| r.slot(a)?.add(r.slot(rhs)?))?;
            }
            Step::AllReduce { srcs, dsts, widths, recover } => {
                self.all_reduce(chunk, srcs, dsts, widths, recover.as_ref(), comm)?;
            }
            Step::Gather { src, dst, tag, .. } => {
                let gathered = if self.layout(src) == Layout::Sharded {
                    comm.all_gather(&self.gather_slot(src)?, *tag, chunk)?
                } else {
                    let first = self.ranks[0].slot(src)?;
                    comm.all_gather(&[first], *tag, chunk)?
                };
                self.put_replicated(dst, gathered);
            }
        }
        Ok(())
    }

    fn all_reduce(
        &mut self,
        chunk: &str,
        srcs: &[String],
        dsts: &[String],
        widths: &[usize],
        recover: Option<&Recovery>,
        comm: &mut Comm,
    ) -> Result<()> {
        let d = self.plan.cfg.d;
        let mut mains = Vec::with_capacity(self.tp());
        for r in &self.ranks {
            let parts: Vec<Tensor> = srcs.iter().map(|s| r.slot(s).cloned()).collect::<Result<_>>()?;
            let mut m = if parts.len() == 1 {
                parts.into_iter().next().unwrap()
            } else {
                concat_axis(&parts, 1)?
            };
            if let Some(rec) = recover {
                m = m.scale_rows(r.slot(&rec.site.local_rms_slot())?)?;
            }
            mains.push(m);
        }
        let mut out = match recover {
            Some(Recovery { site, carry: true }) => {
                let ss = self.gather_slot(&site.local_ss_slot())?;
                let pairs: Vec<(&Tensor, &Tensor)> = mains.iter().zip(ss).collect();
                let (sum, stat) = comm.all_reduce_coalesced(&pairs, chunk)?;
                self.put_replicated(&site.stat_slot(), stat);
                sum
            }
            _ => {
                let refs: Vec<&Tensor> = mains.iter().collect();
                comm.all_reduce(&refs, Tag::Block, chunk)?
            }
        };
        if let Some(rec) = recover {
            let stat = self.ranks[0].slot(&rec.site.stat_slot())?;
            let rms = rms_from_sum_squares(stat, d, self.eps);
            out = divide_rows(&out, &rms)?;
        }
        for (dst, part) in dsts.iter().zip(split_widths(&out, widths)?) {
            self.put_replicated(dst, part);
        }
        Ok(())
    }

    /// A replicated slot as one tensor, after checking every rank agrees
    /// bit for bit.
    pub fn replicated(&self, name: &str) -> Result<Tensor> {
        let first = self.ranks[0].slot(name)?;
        for r in &self.ranks[1..] {
            if !r.slot(name)?.bit_eq(first) {
                return Err(Error::Simulation(format!(
                    "replicas of `{name}` diverge on rank {}",
                    r.rank
                )));
            }
        }
        Ok(first.clone())
    }

    /// A slot recombined into its logical value: replicated slots are
    /// checked and returned, sharded slots concatenated.
    pub fn logical(&self, name: &str) -> Result<Tensor> {
        match self.layout(name) {
            Layout::Sharded => {
                let parts: Vec<Tensor> = self.gather_slot(name)?.into_iter().cloned().collect();
                concat_axis(&parts, 1)
            }
            Layout::Replicated => self.replicated(name),
            other => Err(Error::Simulation(format!(
                "`{name}` is {other:?} and has no single logical value"
            ))),
        }
    }

    /// Per-rank LaX pre-activations produced by this block.
    pub fn h_cur_per_rank(&self) -> Vec<BTreeMap<Proj, Tensor>> {
        self.ranks.iter().map(|r| r.h_cur.clone()).collect()
    }

    /// LaX pre-activations recombined to `[b, s, r]` per projection.
    pub fn h_cur_logical(&self) -> Result<RankPaths> {
        let (b, s, r) = (self.plan.shape.b, self.plan.shape.s, self.plan.cfg.r);
        let mut out = RankPaths::new();
        for p in Proj::ALL {
            let z = p.to_string() + ".z";
            let parts: Vec<Tensor> = self
                .ranks
                .iter()
                .map(|rk| {
                    rk.h_cur
                        .get(&p)
                        .cloned()
                        .ok_or_else(|| Error::Simulation(format!("no LaX state for {p}")))
                })
                .collect::<Result<_>>()?;
            let full = if self.layout(&z) == Layout::Sharded {
                concat_axis(&parts, 1)?
            } else {
                parts[0].clone()
            };
            out.insert(p, full.reshape(&[b, s, r])?);
        }
        Ok(out)
    }

    /// Elements of `name` held across all ranks.
    pub fn slot_elements(&self, name: &str) -> u64 {
        self.ranks
            .iter()
            .filter_map(|r| r.workspace.get(name))
            .map(|t| t.numel() as u64)
            .sum()
    }
}

/// Result of running a plan.
#[derive(Debug, Clone)]
pub struct Execution {
    /// Gathered block or stack output, `[b, s, d]`.
    pub y: Tensor,
    pub trace: Trace,
    /// LaX pre-activations of the last block.
    pub h_cur: Option<RankPaths>,
    /// Layout and per-rank width of the residual slots, for inspection.
    pub residual: BTreeMap<String, (Layout, usize)>,
}

fn residual_view(m: &Machine) -> BTreeMap<String, (Layout, usize)> {
    ["x", "h", "y"]
        .iter()
        .filter_map(|name| {
            let w = m.ranks[0].workspace.get(*name)?.last_dim();
            Some((name.to_string(), (m.layout(name), w)))
        })
        .collect()
}

fn finish(m: &Machine) -> Result<Tensor> {
    let (b, s, d) = (m.plan.shape.b, m.plan.shape.s, m.plan.cfg.d);
    m.replicated(&m.plan.output)?.reshape(&[b, s, d])
}

/// One block forward on `plan.shape.tp` ranks, including the stack finale.
pub fn execute_forward(plan: &ShardPlan, block: &DecoderBlockWeights, x: &Tensor) -> Result<Execution> {
    execute_block(plan, block, x, None)
}

pub fn execute_block(
    plan: &ShardPlan,
    block: &DecoderBlockWeights,
    x: &Tensor,
    h_prev: Option<&RankPaths>,
) -> Result<Execution> {
    let mut comm = Comm::new(plan.element_bytes);
    let mut m = Machine::new(plan, block)?;
    m.load_input(x)?;
    if let Some(h) = h_prev {
        m.load_h_prev(distribute_paths(plan, h)?);
    }
    m.run(&plan.steps(), &mut comm)?;
    comm.trace.stored_elements = ckpt::saved_elements(plan, &m)?;
    let residual = residual_view(&m);
    m.run(&plan.finale_steps(), &mut comm)?;
    let y = finish(&m)?;
    let h_cur = (block.variant == Variant::Lax)
        .then(|| m.h_cur_logical())
        .transpose()?;
    Ok(Execution {
        y,
        trace: comm.trace,
        h_cur,
        residual,
    })
}

/// Split `[b, s, r]` rank-space tensors the way the plan lays them out.
pub fn distribute_paths(plan: &ShardPlan, h: &RankPaths) -> Result<Vec<BTreeMap<Proj, Tensor>>> {
    let tp = plan.shape.tp;
    let layouts = plan.layouts()?;
    let mut per_rank = vec![BTreeMap::new(); tp];
    for (p, t) in h {
        let tm = t.as_matrix();
        let z = format!("{p}.z");
        let parts = if layouts.get(&z) == Some(&Layout::Sharded) {
            split_axis(&tm, 1, tp)?
        } else {
            vec![tm; tp]
        };
        for (rank, part) in per_rank.iter_mut().zip(parts) {
            rank.insert(*p, part);
        }
    }
    Ok(per_rank)
}

/// Run `blocks` back to back without gathering between them. LaX blocks
/// hand their rank-space pre-activations to the next block rank by rank.
pub fn execute_stack(plan: &ShardPlan, blocks: &[DecoderBlockWeights], x: &Tensor) -> Result<Execution> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("empty stack".into()));
    }
    let mut comm = Comm::new(plan.element_bytes);
    let mut carry: Option<(Vec<Tensor>, Layout)> = None;
    let mut h: Option<Vec<BTreeMap<Proj, Tensor>>> = None;
    let mut stored = 0;
    for (i, block) in blocks.iter().enumerate() {
        let mut m = Machine::new(plan, block)?;
        match carry.take() {
            None => m.load_input(x)?,
            Some((per_rank, layout)) => m.load_sharded("x", per_rank, layout),
        }
        if let Some(hp) = h.take() {
            m.load_h_prev(hp);
        }
        m.run(&plan.steps(), &mut comm)?;
        stored += ckpt::saved_elements(plan, &m)?;
        if block.variant == Variant::Lax {
            h = Some(m.h_cur_per_rank());
        }
        if i + 1 == blocks.len() {
            let residual = residual_view(&m);
            m.run(&plan.finale_steps(), &mut comm)?;
            let y = finish(&m)?;
            let h_cur = (block.variant == Variant::Lax)
                .then(|| m.h_cur_logical())
                .transpose()?;
            comm.trace.stored_elements = stored;
            return Ok(Execution {
                y,
                trace: comm.trace,
                h_cur,
                residual,
            });
        }
        let out = &plan.block_output;
        let layout = m.layout(out);
        let per_rank = m.ranks.iter().map(|r| r.slot(out).cloned()).collect::<Result<_>>()?;
        carry = Some((per_rank, layout));
    }
    unreachable!("loop returns on the last block")
}
