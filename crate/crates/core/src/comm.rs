//! Traced collectives over simulated ranks.
//!
//! Payloads follow the logical convention: a record carries the element
//! count of one rank's tensor, independent of how a real ring or tree would
//! move it. Reductions fold in ascending rank order.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{concat_axis, Tensor, DEFAULT_ELEMENT_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectiveKind {
    AllReduce,
    AllGather,
    AllReduceCoalesced,
}

/// Which counter a collective is charged to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tag {
    /// Per-block activation traffic covered by the volume formulas.
    Block,
    /// Normalization statistics riding a coalesced all-reduce.
    FusedStat,
    /// Standalone normalization-statistic all-reduce (sync norm).
    Stat,
    /// Embedding/head boundary traffic outside the per-block formulas.
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pass {
    Forward,
    Reforward,
}

macro_rules! kebab_display {
    ($($ty:ty),*) => {$(
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                let s = kebab_name(self);
                f.write_str(&s)
            }
        }
    )*};
}

fn kebab_name<T: std::fmt::Debug>(v: &T) -> String {
    let name = format!("{v:?}");
    let mut out = String::new();
    for (i, c) in name.chars().enumerate() {
        if c.is_ascii_uppercase() {
            if i > 0 {
                out.push('-');
            }
            out.push(c.to_ascii_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

kebab_display!(CollectiveKind, Tag, Pass);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveRecord {
    pub kind: CollectiveKind,
    pub tag: Tag,
    pub chunk_id: String,
    pub elements: u64,
    pub bytes: u64,
    /// Fused statistic payload of a coalesced call; zero otherwise.
    pub stat_elements: u64,
    pub stat_bytes: u64,
    pub pass: Pass,
}

/// Compute counters for one pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounters {
    pub gemm_launches: u64,
    pub gemm_flops: u64,
    pub attention_flops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<CollectiveRecord>,
    pub forward: PassCounters,
    pub reforward: PassCounters,
    /// Stored-activation elements summed over ranks.
    pub stored_elements: u64,
}

impl Trace {
    pub fn counters_mut(&mut self, pass: Pass) -> &mut PassCounters {
        match pass {
            Pass::Forward => &mut self.forward,
            Pass::Reforward => &mut self.reforward,
        }
    }

    pub fn counters(&self, pass: Pass) -> &PassCounters {
        match pass {
            Pass::Forward => &self.forward,
            Pass::Reforward => &self.reforward,
        }
    }

    pub fn collective_count(&self, pass: Pass) -> usize {
        self.records.iter().filter(|r| r.pass == pass).count()
    }

    /// Rows for the CSV export. A coalesced call contributes two rows, its
    /// main payload and its fused statistic.
    pub fn csv_rows(&self) -> Vec<TraceRow> {
        let mut rows = Vec::new();
        for r in &self.records {
            rows.push(TraceRow {
                chunk_id: r.chunk_id.clone(),
                kind: r.kind.to_string(),
                tag: r.tag.to_string(),
                elements: r.elements,
                bytes: r.bytes,
                pass: r.pass.to_string(),
            });
            if r.kind == CollectiveKind::AllReduceCoalesced {
                rows.push(TraceRow {
                    chunk_id: r.chunk_id.clone(),
                    kind: r.kind.to_string(),
                    tag: Tag::FusedStat.to_string(),
                    elements: r.stat_elements,
                    bytes: r.stat_bytes,
                    pass: r.pass.to_string(),
                });
            }
        }
        rows
    }
}

/// One line of the trace CSV, columns in export order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub chunk_id: String,
    pub kind: String,
    pub tag: String,
    pub elements: u64,
    pub bytes: u64,
    pub pass: String,
}

pub const TRACE_COLUMNS: [&str; 6] = ["chunk_id", "kind", "tag", "elements", "bytes", "pass"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Volume {
    pub elements: u64,
    pub bytes: u64,
    pub calls: u64,
}

/// Forward-pass volume charged to `tag`.
pub fn trace_volume(trace: &Trace, tag: Tag) -> Volume {
    trace_volume_in(trace, tag, Pass::Forward)
}

pub fn trace_volume_in(trace: &Trace, tag: Tag, pass: Pass) -> Volume {
    let mut v = Volume::default();
    for r in trace.records.iter().filter(|r| r.pass == pass) {
        if r.tag == tag {
            v.elements += r.elements;
            v.bytes += r.bytes;
            v.calls += 1;
        } else if tag == Tag::FusedStat && r.stat_elements > 0 {
            v.elements += r.stat_elements;
            v.bytes += r.stat_bytes;
            v.calls += 1;
        }
    }
    v
}

/// Bytes a ring all-reduce would put on each link: `2 (n-1)/n` times the
/// logical payload. Reported beside, never instead of, the logical volume.
pub fn ring_allreduce_bytes(logical_bytes: u64, tp: usize) -> Ratio<u64> {
    let n = tp.max(1) as u64;
    Ratio::new(2 * (n - 1) * logical_bytes, n)
}

/// Collective endpoint shared by all simulated ranks of one group.
#[derive(Debug, Clone)]
pub struct Comm {
    pub trace: Trace,
    element_bytes: usize,
    pass: Pass,
}

impl Default for Comm {
    fn default() -> Self {
        Self::new(DEFAULT_ELEMENT_BYTES)
    }
}

fn check_ranks(per_rank: &[&Tensor], what: &str) -> Result<()> {
    let first = per_rank
        .first()
        .ok_or_else(|| Error::Simulation(format!("{what} with no ranks")))?;
    for (i, t) in per_rank.iter().enumerate().skip(1) {
        if t.shape() != first.shape() {
            return Err(Error::Simulation(format!(
                "{what}: rank {i} holds {:?}, rank 0 holds {:?}",
                t.shape(),
                first.shape()
            )));
        }
    }
    Ok(())
}

fn fold(per_rank: &[&Tensor]) -> Tensor {
    let mut acc = per_rank[0].clone();
    for t in &per_rank[1..] {
        acc.add_assign(t).expect("shapes checked");
    }
    acc
}

impl Comm {
    pub fn new(element_bytes: usize) -> Self {
        Self {
            trace: Trace::default(),
            element_bytes,
            pass: Pass::Forward,
        }
    }

    pub fn element_bytes(&self) -> usize {
        self.element_bytes
    }

    pub fn pass(&self) -> Pass {
        self.pass
    }

    pub fn set_pass(&mut self, pass: Pass) {
        self.pass = pass;
    }

    fn bytes(&self, elements: u64) -> u64 {
        elements * self.element_bytes as u64
    }

    fn record(&mut self, kind: CollectiveKind, tag: Tag, chunk: &str, elements: u64, stat: u64) {
        self.trace.records.push(CollectiveRecord {
            kind,
            tag,
            chunk_id: chunk.to_string(),
            elements,
            bytes: self.bytes(elements),
            stat_elements: stat,
            stat_bytes: self.bytes(stat),
            pass: self.pass,
        });
    }

    /// Elementwise sum over ranks; every rank receives the result.
    pub fn all_reduce(&mut self, per_rank: &[&Tensor], tag: Tag, chunk: &str) -> Result<Tensor> {
        check_ranks(per_rank, "all-reduce")?;
        let out = fold(per_rank);
        self.record(CollectiveKind::AllReduce, tag, chunk, out.numel() as u64, 0);
        Ok(out)
    }

    /// Reduce a main payload and a statistic in a single call.
    pub fn all_reduce_coalesced(
        &mut self,
        per_rank: &[(&Tensor, &Tensor)],
        chunk: &str,
    ) -> Result<(Tensor, Tensor)> {
        let mains: Vec<&Tensor> = per_rank.iter().map(|p| p.0).collect();
        let stats: Vec<&Tensor> = per_rank.iter().map(|p| p.1).collect();
        check_ranks(&mains, "coalesced all-reduce")?;
        check_ranks(&stats, "coalesced all-reduce (stats)")?;
        let (main, stat) = (fold(&mains), fold(&stats));
        self.record(
            CollectiveKind::AllReduceCoalesced,
            Tag::Block,
            chunk,
            main.numel() as u64,
            stat.numel() as u64,
        );
        Ok((main, stat))
    }

    /// Concatenate last-axis shards in rank order.
    pub fn all_gather(&mut self, per_rank: &[&Tensor], tag: Tag, chunk: &str) -> Result<Tensor> {
        if per_rank.is_empty() {
            return Err(Error::Simulation("all-gather with no ranks".into()));
        }
        let owned: Vec<Tensor> = per_rank.iter().map(|t| (*t).clone()).collect();
        let axis = owned[0].rank() - 1;
        let out = concat_axis(&owned, axis)
            .map_err(|e| Error::Simulation(format!("all-gather: {e}")))?;
        self.record(CollectiveKind::AllGather, tag, chunk, out.numel() as u64, 0);
        Ok(out)
    }
}
