use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{detector_loss, mean_gradients};
use crate::error::{MhsaError, Result};
use crate::sample::LabeledSample;
use crate::surrogate::SurrogateHead;
use crate::tinynet::{self, AdamWConfig, DenseNet, GradientBundle, OptimizerState};

use super::config::{TrainConfig, TrainMode};
use super::losses::{generator_objective, LossWeights};

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub l_dg: f64,
    pub l_reg: f64,
    pub l_lvlm: f64,
    pub l_total: f64,
    pub l_d: f64,
    pub grad_norm_g: f64,
    pub grad_norm_d: f64,
    pub mean_delta_norm: f64,
}

pub const TRAIN_LOG_HEADER: &str =
    "step,L_dg,L_reg,L_LVLM,L_total,L_d,grad_norm_G,grad_norm_D,mean_delta_norm";

pub fn write_train_log<W: Write>(mut out: W, rows: &[TrainLogRow]) -> Result<()> {
    writeln!(out, "{TRAIN_LOG_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.l_dg,
            r.l_reg,
            r.l_lvlm,
            r.l_total,
            r.l_d,
            r.grad_norm_g,
            r.grad_norm_d,
            r.mean_delta_norm
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub generator: DenseNet,
    pub detector: DenseNet,
    pub log: Vec<TrainLogRow>,
}

#[derive(Default)]
struct BatchStats {
    dg: f64,
    reg: f64,
    lvlm: f64,
    total: f64,
    delta_norm: f64,
}

/// Joint training: each batch updates the generator on the weighted objective,
/// then fine-tunes the detector on the raw attention of the same batch.
///
/// Batch losses and gradients are arithmetic means over the batch. The
/// detector-guided term applies to samples labeled hallucinatory unless
/// `config.dg_on_all` is set.
pub fn train_mhsa(
    generator: &DenseNet,
    detector: &DenseNet,
    head: Option<&SurrogateHead>,
    data: &[LabeledSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let first = data
        .first()
        .ok_or_else(|| MhsaError::DegenerateDataset("no training samples".into()))?;
    let d = first.attention.shape().flat_dim();
    if generator.input_dim() != d || generator.output_dim() != d || detector.input_dim() != d {
        return Err(MhsaError::shape(
            format!("networks over {d} attention entries"),
            format!(
                "G {}->{}, D {}",
                generator.input_dim(),
                generator.output_dim(),
                detector.input_dim()
            ),
        ));
    }
    let weights = LossWeights::from_config(config);
    let head = match config.mode {
        TrainMode::Discriminative if weights.lvlm > 0.0 => Some(head.ok_or_else(|| {
            MhsaError::Config("discriminative training with lambda_lvlm > 0 needs a head".into())
        })?),
        _ => None,
    };

    let mut g = generator.clone();
    let mut dnet = detector.clone();
    let adam = |lr| AdamWConfig {
        lr,
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.eps,
        weight_decay: config.weight_decay,
    };
    let mut g_state = OptimizerState::new(&g, adam(config.lr_g));
    let mut d_state = OptimizerState::new(&dnet, adam(config.lr_d));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let flats: Vec<Vec<f64>> = data.iter().map(|s| s.attention.flatten()).collect();
    let mut log = Vec::new();

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let step = log.len();
            let per_sample: Vec<Result<_>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &data[i];
                    generator_objective(
                        &g,
                        &dnet,
                        head,
                        &flats[i],
                        config.dg_on_all || s.y() == 1,
                        s.gt_answer,
                        weights,
                    )
                })
                .collect();
            let mut g_grads = GradientBundle::zeros_like(&g);
            let mut stats = BatchStats::default();
            for r in per_sample {
                let obj = r?;
                g_grads.add_assign(&obj.grads)?;
                stats.dg += obj.components.dg;
                stats.reg += obj.components.reg;
                stats.lvlm += obj.components.lvlm;
                stats.total += obj.total;
                stats.delta_norm += obj.delta_norm;
            }
            let n = batch.len() as f64;
            g_grads.scale(1.0 / n);
            if !stats.total.is_finite() {
                return Err(MhsaError::NumericalDivergence { step });
            }

            // the detector only ever sees the raw tensors of the batch
            let (l_d, d_grads) = mean_gradients(&dnet, batch, |&i| {
                detector_loss(&dnet, &data[i].attention, data[i].y())
            })?;
            if !l_d.is_finite() {
                return Err(MhsaError::NumericalDivergence { step });
            }

            tinynet::step(&mut g, &g_grads, &mut g_state)?;
            tinynet::step(&mut dnet, &d_grads, &mut d_state)?;
            log.push(TrainLogRow {
                step,
                l_dg: stats.dg / n,
                l_reg: stats.reg / n,
                l_lvlm: stats.lvlm / n,
                l_total: stats.total / n,
                l_d,
                grad_norm_g: g_grads.l2_norm(),
                grad_norm_d: d_grads.l2_norm(),
                mean_delta_norm: stats.delta_norm / n,
            });
        }
    }
    Ok(TrainOutcome {
        generator: g,
        detector: dnet,
        log,
    })
}

/// Mean `‖G(A)‖₂` over a sample set.
pub fn mean_delta_norm(g: &DenseNet, samples: &[LabeledSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(MhsaError::DegenerateDataset("no samples".into()));
    }
    let norms: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            g.forward(&s.attention.flatten())
                .map(|(delta, _)| delta.iter().map(|v| v * v).sum::<f64>().sqrt())
        })
        .collect::<Result<_>>()?;
    Ok(norms.iter().sum::<f64>() / norms.len() as f64)
}
