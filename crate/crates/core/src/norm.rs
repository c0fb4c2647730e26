//! RMSNorm: the single-device reference, the sync variant that all-reduces
//! the statistic on its own, and the online variant that normalizes with
//! local statistics and repairs the result after the chunk's all-reduce.
//!
//! Both sharded variants exchange per-row sums of squares rather than RMS
//! values, so the global statistic is an exact sum. The online recovery
//! multiplies each rank's GEMM output by its local RMS before the reduction
//! and divides by the global RMS after it; this is exact for any `eps >= 0`.

use serde::{Deserialize, Serialize};

use crate::comm::{Comm, Tag};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

pub fn check_eps(eps: f64) -> Result<()> {
    if eps.is_finite() && eps >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("norm epsilon must be finite and >= 0, got {eps}")))
    }
}

/// `sqrt(ss / width + eps)` per row.
pub fn rms_from_sum_squares(ss: &Tensor, width: usize, eps: f64) -> Tensor {
    let w = width as f64;
    ss.map(|v| (v / w + eps).sqrt())
}

/// `x / rms * gamma` with one RMS per row.
pub fn normalize_rows(x: &Tensor, rms: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    if gamma.numel() != x.last_dim() {
        return Err(Error::Dimension(format!(
            "norm scale has {} entries for width {}",
            gamma.numel(),
            x.last_dim()
        )));
    }
    if rms.numel() != x.rows() {
        return Err(Error::Dimension(format!(
            "{} row statistics for {} rows",
            rms.numel(),
            x.rows()
        )));
    }
    let w = x.last_dim();
    let mut out = x.clone();
    let g = gamma.data();
    for (row, &r) in out.data_mut().chunks_mut(w).zip(rms.data()) {
        for (v, &gj) in row.iter_mut().zip(g) {
            *v = *v / r * gj;
        }
    }
    Ok(out)
}

/// Divide every row by the matching entry of `rms`.
pub fn divide_rows(x: &Tensor, rms: &Tensor) -> Result<Tensor> {
    if rms.numel() != x.rows() {
        return Err(Error::Dimension(format!(
            "{} row statistics for {} rows",
            rms.numel(),
            x.rows()
        )));
    }
    let w = x.last_dim();
    let mut out = x.clone();
    for (row, &r) in out.data_mut().chunks_mut(w).zip(rms.data()) {
        row.iter_mut().for_each(|v| *v /= r);
    }
    Ok(out)
}

/// `x * gamma / sqrt(mean(x^2) + eps)` over the last axis.
pub fn rmsnorm_reference(x: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
    check_eps(eps)?;
    let rms = rms_from_sum_squares(&x.row_sum_squares(), x.last_dim(), eps);
    normalize_rows(x, &rms, gamma)
}

/// Per-rank statistics of one online normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub rms_local: Vec<Tensor>,
    pub rms_global: Tensor,
}

impl NormStats {
    /// `rms_local / rms_global` per rank, the factor that turns a locally
    /// normalized product into the globally normalized one.
    pub fn correction(&self) -> Vec<Tensor> {
        self.rms_local
            .iter()
            .map(|l| {
                let mut c = l.clone();
                c.data_mut()
                    .iter_mut()
                    .zip(self.rms_global.data())
                    .for_each(|(v, g)| *v /= g);
                c
            })
            .collect()
    }
}

fn check_shards(shards: &[Tensor], gammas: &[Tensor]) -> Result<usize> {
    let first = shards
        .first()
        .ok_or_else(|| Error::InvalidArgument("no shards".into()))?;
    if gammas.len() != shards.len() {
        return Err(Error::Dimension(format!(
            "{} scale shards for {} activation shards",
            gammas.len(),
            shards.len()
        )));
    }
    for (i, (x, g)) in shards.iter().zip(gammas).enumerate() {
        if x.shape() != first.shape() {
            return Err(Error::Dimension(format!(
                "shard {i} is {:?}, shard 0 is {:?}",
                x.shape(),
                first.shape()
            )));
        }
        if g.numel() != x.last_dim() {
            return Err(Error::Dimension(format!(
                "scale shard {i} has {} entries for width {}",
                g.numel(),
                x.last_dim()
            )));
        }
    }
    Ok(first.last_dim() * shards.len())
}

/// Normalize a hidden dimension sharded across ranks by all-reducing the
/// per-row sum of squares as a standalone collective.
pub fn sync_rmsnorm(
    shards: &[Tensor],
    gammas: &[Tensor],
    eps: f64,
    comm: &mut Comm,
    chunk: &str,
) -> Result<Vec<Tensor>> {
    check_eps(eps)?;
    let d = check_shards(shards, gammas)?;
    let ss: Vec<Tensor> = shards.iter().map(Tensor::row_sum_squares).collect();
    let refs: Vec<&Tensor> = ss.iter().collect();
    let total = comm.all_reduce(&refs, Tag::Stat, chunk)?;
    let rms = rms_from_sum_squares(&total, d, eps);
    shards
        .iter()
        .zip(gammas)
        .map(|(x, g)| normalize_rows(x, &rms, g))
        .collect()
}

/// Local half of the online norm on one rank: normalized rows, the local
/// sum of squares and the local RMS.
pub fn local_normalize(x: &Tensor, gamma: &Tensor, eps: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let ss = x.row_sum_squares();
    let rms = rms_from_sum_squares(&ss, x.last_dim(), eps);
    let out = normalize_rows(x, &rms, gamma)?;
    Ok((out, ss, rms))
}

/// Online RMSNorm fused with the row-parallel GEMM that follows it.
///
/// Each rank normalizes its shard with its own statistic, multiplies by its
/// weight shard, pre-scales the product by its local RMS and joins one
/// coalesced all-reduce carrying the product and the sum of squares. The
/// reduced product is then divided by the global RMS.
pub fn online_rmsnorm_chunk(
    shards: &[Tensor],
    weights: &[Tensor],
    gammas: &[Tensor],
    eps: f64,
    comm: &mut Comm,
    chunk: &str,
) -> Result<(Tensor, NormStats)> {
    check_eps(eps)?;
    let d = check_shards(shards, gammas)?;
    if weights.len() != shards.len() {
        return Err(Error::Dimension(format!(
            "{} weight shards for {} activation shards",
            weights.len(),
            shards.len()
        )));
    }
    let lead: Vec<usize> = shards[0].shape()[..shards[0].rank() - 1].to_vec();
    let mut partials = Vec::with_capacity(shards.len());
    let mut sums = Vec::with_capacity(shards.len());
    let mut rms_local = Vec::with_capacity(shards.len());
    for ((x, w), g) in shards.iter().zip(weights).zip(gammas) {
        let (xn, ss, rms) = local_normalize(&x.as_matrix(), g, eps)?;
        let h = matmul(&xn, w)?.0.scale_rows(&rms)?;
        partials.push(h);
        sums.push(ss);
        rms_local.push(rms);
    }
    let pairs: Vec<(&Tensor, &Tensor)> = partials.iter().zip(&sums).collect();
    let (h, ss) = comm.all_reduce_coalesced(&pairs, chunk)?;
    let rms_global = rms_from_sum_squares(&ss, d, eps);
    let y = divide_rows(&h, &rms_global)?;
    let mut shape = lead.clone();
    shape.push(y.last_dim());
    let reshape_stat = |t: &Tensor| {
        let mut s = lead.clone();
        s.push(1);
        t.reshape(&s).expect("one statistic per row")
    };
    Ok((
        y.reshape(&shape)?,
        NormStats {
            rms_local: rms_local.iter().map(reshape_stat).collect(),
            rms_global: reshape_stat(&rms_global),
        },
    ))
}

/// Largest deviation between `W (x_i / rms(x))` and
/// `(W (x_i / rms(x_i))) * rms(x_i) / rms(x)` for one shard, with no
/// epsilon. The two agree up to rounding.
pub fn recovery_identity_gap(shard: &Tensor, full: &Tensor, w: &Tensor) -> Result<f64> {
    let shard = shard.as_matrix();
    let full = full.as_matrix();
    if shard.rows() != full.rows() {
        return Err(Error::Dimension("shard and full input differ in rows".into()));
    }
    let rms_full = rms_from_sum_squares(&full.row_sum_squares(), full.last_dim(), 0.0);
    let rms_shard = rms_from_sum_squares(&shard.row_sum_squares(), shard.last_dim(), 0.0);
    let lhs = matmul(&divide_rows(&shard, &rms_full)?, w)?.0;
    let local = matmul(&divide_rows(&shard, &rms_shard)?, w)?.0;
    let mut corr = rms_shard.clone();
    corr.data_mut()
        .iter_mut()
        .zip(rms_full.data())
        .for_each(|(v, f)| *v /= f);
    lhs.max_abs_diff(&local.scale_rows(&corr)?)
}
