//! Statistics of how a correction reshapes attention: per-layer intensity,
//! spatial entropy, pre/post similarity and per-head magnitude.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionTensor;
use crate::error::{MhsaError, Result};

/// Rows whose total mass is at or below this count as empty.
pub const EMPTY_ROW_MASS: f64 = 1e-12;

fn same_shape(a: &AttentionTensor, b: &AttentionTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MhsaError::shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// Per layer: `Σ_{h,n} |A' − A|`.
pub fn layer_delta(a: &AttentionTensor, a_prime: &AttentionTensor) -> Result<Vec<f64>> {
    same_shape(a, a_prime)?;
    Ok((0..a.shape().layers)
        .map(|l| {
            a.layer(l)
                .iter()
                .zip(a_prime.layer(l))
                .map(|(&x, &y)| (f64::from(y) - f64::from(x)).abs())
                .sum()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEntropy {
    /// Per layer, mean over heads of the row entropy in nats.
    pub per_layer: Vec<f64>,
    /// Rows treated as zero-entropy because they carry no mass.
    pub empty_rows: usize,
}

/// Entropy of each row normalized to a distribution, after clamping negative
/// entries to zero.
pub fn spatial_entropy(a: &AttentionTensor) -> LayerEntropy {
    let s = a.shape();
    let mut empty_rows = 0;
    let per_layer = (0..s.layers)
        .map(|l| {
            let mut sum = 0.0;
            for h in 0..s.heads {
                let row = a.row(l, h);
                let total: f64 = row.iter().map(|&v| f64::from(v).max(0.0)).sum();
                if total <= EMPTY_ROW_MASS {
                    empty_rows += 1;
                    continue;
                }
                sum -= row
                    .iter()
                    .map(|&v| f64::from(v).max(0.0) / total)
                    .filter(|&p| p > 0.0)
                    .map(|p| p * p.ln())
                    .sum::<f64>();
            }
            sum / s.heads as f64
        })
        .collect();
    LayerEntropy {
        per_layer,
        empty_rows,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCosine {
    pub per_layer: Vec<f64>,
    /// Layers where either vector has zero norm; their cosine is set to 1.
    pub zero_norm: Vec<bool>,
}

pub fn layer_cosine(a: &AttentionTensor, a_prime: &AttentionTensor) -> Result<LayerCosine> {
    same_shape(a, a_prime)?;
    let (mut per_layer, mut zero_norm) = (Vec::new(), Vec::new());
    for l in 0..a.shape().layers {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.layer(l).iter().zip(a_prime.layer(l)) {
            let (x, y) = (f64::from(x), f64::from(y));
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        let degenerate = na == 0.0 || nb == 0.0;
        per_layer.push(if degenerate {
            1.0
        } else {
            (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
        });
        zero_norm.push(degenerate);
    }
    Ok(LayerCosine {
        per_layer,
        zero_norm,
    })
}

/// `L × H` matrix of the mean over tokens of `|A' − A|`.
pub fn head_heatmap(a: &AttentionTensor, a_prime: &AttentionTensor) -> Result<Vec<Vec<f64>>> {
    same_shape(a, a_prime)?;
    let s = a.shape();
    Ok((0..s.layers)
        .map(|l| {
            (0..s.heads)
                .map(|h| {
                    a.row(l, h)
                        .iter()
                        .zip(a_prime.row(l, h))
                        .map(|(&x, &y)| (f64::from(y) - f64::from(x)).abs())
                        .sum::<f64>()
                        / s.visual_tokens as f64
                })
                .collect()
        })
        .collect())
}

/// Everything measured on one corrected sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionStats {
    pub per_layer_abs_delta: Vec<f64>,
    pub per_layer_entropy_pre: Vec<f64>,
    pub per_layer_entropy_post: Vec<f64>,
    pub per_layer_cosine: Vec<f64>,
    pub head_delta: Vec<Vec<f64>>,
}

pub fn correction_stats(a: &AttentionTensor, a_prime: &AttentionTensor) -> Result<CorrectionStats> {
    Ok(CorrectionStats {
        per_layer_abs_delta: layer_delta(a, a_prime)?,
        per_layer_entropy_pre: spatial_entropy(a).per_layer,
        per_layer_entropy_post: spatial_entropy(a_prime).per_layer,
        per_layer_cosine: layer_cosine(a, a_prime)?.per_layer,
        head_delta: head_heatmap(a, a_prime)?,
    })
}

/// Stats for many `(A, A')` pairs, in input order.
pub fn correction_stats_batch(
    pairs: &[(AttentionTensor, AttentionTensor)],
) -> Result<Vec<CorrectionStats>> {
    pairs
        .par_iter()
        .map(|(a, b)| correction_stats(a, b))
        .collect()
}

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    pub sem: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub n: usize,
    /// `n == 1`: every SEM is reported as 0.
    pub single_sample: bool,
    pub abs_delta: Vec<MeanSem>,
    pub entropy_pre: Vec<MeanSem>,
    pub entropy_post: Vec<MeanSem>,
    pub cosine: Vec<MeanSem>,
    pub head_delta: Vec<Vec<MeanSem>>,
    /// Up to three layers with the largest mean absolute delta, largest first.
    pub top_layers: Vec<usize>,
}

fn mean_sem(values: impl Iterator<Item = f64> + Clone) -> MeanSem {
    let n = values.clone().count();
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return MeanSem { mean, sem: 0.0 };
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    MeanSem {
        mean,
        sem: var.sqrt() / (n as f64).sqrt(),
    }
}

fn columnwise(stats: &[CorrectionStats], field: fn(&CorrectionStats) -> &[f64]) -> Vec<MeanSem> {
    (0..field(&stats[0]).len())
        .map(|l| mean_sem(stats.iter().map(move |s| field(s)[l])))
        .collect()
}

pub fn aggregate_stats(stats: &[CorrectionStats]) -> Result<AggregateStats> {
    let first = stats
        .first()
        .ok_or_else(|| MhsaError::DegenerateDataset("no correction statistics".into()))?;
    let layers = first.per_layer_abs_delta.len();
    let heads = first.head_delta.first().map_or(0, Vec::len);
    for s in stats {
        let dims_ok = [
            s.per_layer_abs_delta.len(),
            s.per_layer_entropy_pre.len(),
            s.per_layer_entropy_post.len(),
            s.per_layer_cosine.len(),
            s.head_delta.len(),
        ]
        .iter()
        .all(|&n| n == layers)
            && s.head_delta.iter().all(|r| r.len() == heads);
        if !dims_ok {
            return Err(MhsaError::shape(
                format!("{layers} layers x {heads} heads"),
                "inconsistent statistics",
            ));
        }
    }
    let abs_delta = columnwise(stats, |s| &s.per_layer_abs_delta);
    let head_delta = (0..layers)
        .map(|l| {
            (0..heads)
                .map(|h| mean_sem(stats.iter().map(move |s| s.head_delta[l][h])))
                .collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..layers).collect();
    order.sort_by(|&i, &j| {
        abs_delta[j]
            .mean
            .total_cmp(&abs_delta[i].mean)
            .then(i.cmp(&j))
    });
    order.truncate(3);
    Ok(AggregateStats {
        n: stats.len(),
        single_sample: stats.len() == 1,
        entropy_pre: columnwise(stats, |s| &s.per_layer_entropy_pre),
        entropy_post: columnwise(stats, |s| &s.per_layer_entropy_post),
        cosine: columnwise(stats, |s| &s.per_layer_cosine),
        abs_delta,
        head_delta,
        top_layers: order,
    })
}

pub const LAYER_STATS_HEADER: &str =
    "layer,abs_delta_mean,abs_delta_sem,entropy_pre,entropy_post,delta_entropy,cosine";
const ENTROPY_UNIT_LINE: &str = "# entropy columns in nats";

/// Per-layer table. Values use the shortest representation that parses back to
/// the same f64.
pub fn write_layer_stats<W: Write>(mut out: W, agg: Option<&AggregateStats>) -> Result<()> {
    writeln!(out, "{ENTROPY_UNIT_LINE}")?;
    writeln!(out, "{LAYER_STATS_HEADER}")?;
    if let Some(agg) = agg {
        for l in 0..agg.abs_delta.len() {
            let (pre, post) = (agg.entropy_pre[l].mean, agg.entropy_post[l].mean);
            writeln!(
                out,
                "{l},{:?},{:?},{pre:?},{post:?},{:?},{:?}",
                agg.abs_delta[l].mean,
                agg.abs_delta[l].sem,
                post - pre,
                agg.cosine[l].mean
            )?;
        }
    }
    Ok(())
}

/// `L` rows of `H` mean head deltas.
pub fn write_head_heatmap<W: Write>(
    mut out: W,
    agg: Option<&AggregateStats>,
    heads: usize,
) -> Result<()> {
    let cols: Vec<String> = (0..heads).map(|h| format!("h{h}")).collect();
    writeln!(out, "layer,{}", cols.join(","))?;
    if let Some(agg) = agg {
        for (l, row) in agg.head_delta.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|m| format!("{:?}", m.mean)).collect();
            writeln!(out, "{l},{}", cells.join(","))?;
        }
    }
    Ok(())
}

/// One parsed `layer_stats.csv` row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerStatsRow {
    pub layer: usize,
    pub abs_delta_mean: f64,
    pub abs_delta_sem: f64,
    pub entropy_pre: f64,
    pub entropy_post: f64,
    pub delta_entropy: f64,
    pub cosine: f64,
}

fn data_lines<R: BufRead>(input: R, header_prefix: &str) -> Result<Vec<Vec<String>>> {
    let mut rows = Vec::new();
    let mut seen_header = false;
    for line in input.lines() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            if !line.starts_with(header_prefix) {
                return Err(MhsaError::Format(format!("unexpected header `{line}`")));
            }
            seen_header = true;
            continue;
        }
        rows.push(line.split(',').map(str::to_string).collect());
    }
    Ok(rows)
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| MhsaError::Format(format!("bad number `{s}`")))
}

pub fn read_layer_stats<R: BufRead>(input: R) -> Result<Vec<LayerStatsRow>> {
    data_lines(input, LAYER_STATS_HEADER)?
        .into_iter()
        .map(|c| {
            if c.len() != 7 {
                return Err(MhsaError::Format(format!(
                    "expected 7 columns, got {}",
                    c.len()
                )));
            }
            Ok(LayerStatsRow {
                layer: num(&c[0])?,
                abs_delta_mean: num(&c[1])?,
                abs_delta_sem: num(&c[2])?,
                entropy_pre: num(&c[3])?,
                entropy_post: num(&c[4])?,
                delta_entropy: num(&c[5])?,
                cosine: num(&c[6])?,
            })
        })
        .collect()
}

pub fn read_head_heatmap<R: BufRead>(input: R) -> Result<Vec<Vec<f64>>> {
    data_lines(input, "layer")?
        .into_iter()
        .map(|c| c[1..].iter().map(|v| num(v)).collect())
        .collect()
}
