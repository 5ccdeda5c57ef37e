//! Binary hallucination detector over flattened attention.
//!
//! Output 0 is the non-hallucination score, output 1 the hallucination score.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionTensor;
use crate::error::{MhsaError, Result};
use crate::sample::LabeledSample;
use crate::tinynet::{
    self, init_detector, log_softmax, AdamWConfig, DenseNet, GradientBundle, OptimizerState,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutput {
    pub p_non_halluc: f64,
    pub p_halluc: f64,
    pub predicted_class: u8,
}

impl DetectorOutput {
    fn from_logits(logits: &[f64]) -> Self {
        let logp = log_softmax(logits);
        let (p0, p1) = (logp[0].exp(), logp[1].exp());
        DetectorOutput {
            p_non_halluc: p0,
            p_halluc: p1,
            // ties resolve to "not hallucinating"
            predicted_class: u8::from(logits[1] > logits[0]),
        }
    }

    pub fn is_hallucination(&self) -> bool {
        self.predicted_class == 1
    }
}

pub(crate) fn check_detector_dims(d: &DenseNet, dim: usize) -> Result<()> {
    if d.output_dim() != 2 {
        return Err(MhsaError::shape("detector with 2 outputs", d.output_dim()));
    }
    if d.input_dim() != dim {
        return Err(MhsaError::shape(d.input_dim(), dim));
    }
    Ok(())
}

pub fn detect(d: &DenseNet, a: &AttentionTensor) -> Result<DetectorOutput> {
    detect_flat(d, &a.flatten())
}

pub fn detect_flat(d: &DenseNet, x: &[f64]) -> Result<DetectorOutput> {
    check_detector_dims(d, x.len())?;
    let (logits, _) = d.forward(x)?;
    Ok(DetectorOutput::from_logits(&logits))
}

/// Binary cross-entropy of the detector on raw attention, with parameter gradients.
///
/// Corrected tensors are refused: the detector is only ever supervised on raw attention.
pub fn detector_loss(d: &DenseNet, a: &AttentionTensor, y: u8) -> Result<(f64, GradientBundle)> {
    if a.is_corrected() {
        return Err(MhsaError::CorrectedInput);
    }
    detector_loss_flat(d, &a.flatten(), y)
}

pub(crate) fn detector_loss_flat(d: &DenseNet, x: &[f64], y: u8) -> Result<(f64, GradientBundle)> {
    if y > 1 {
        return Err(MhsaError::Label(i64::from(y)));
    }
    check_detector_dims(d, x.len())?;
    let (logits, cache) = d.forward(x)?;
    let (loss, d_logits) = tinynet::cross_entropy(&logits, usize::from(y));
    let (grads, _) = d.backward(&cache, &d_logits)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            hidden: 128,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 1,
            batch_size: 16,
            seed: 42,
        }
    }
}

/// Mean gradient over a batch. Per-sample work runs in parallel; the reduction is
/// sequential in sample order so results do not depend on thread count.
pub(crate) fn mean_gradients<T: Sync>(
    net: &DenseNet,
    items: &[T],
    per_item: impl Fn(&T) -> Result<(f64, GradientBundle)> + Sync,
) -> Result<(f64, GradientBundle)> {
    let results: Vec<Result<(f64, GradientBundle)>> = items.par_iter().map(&per_item).collect();
    let mut total = GradientBundle::zeros_like(net);
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.add_assign(&g)?;
    }
    let n = items.len().max(1) as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

/// Supervised detector training on raw attention. Returns the network and the
/// per-step mean batch loss.
pub fn pretrain_detector(
    data: &[LabeledSample],
    config: &PretrainConfig,
) -> Result<(DenseNet, Vec<f64>)> {
    let first = data
        .first()
        .ok_or_else(|| MhsaError::DegenerateDataset("no samples".into()))?;
    let positives = data.iter().filter(|s| s.y() == 1).count();
    if positives == 0 || positives == data.len() {
        return Err(MhsaError::DegenerateDataset(
            "detector pretraining needs both labels".into(),
        ));
    }
    if config.batch_size == 0 {
        return Err(MhsaError::Config("batch_size must be positive".into()));
    }
    let shape = first.attention.shape();
    let mut net = init_detector(shape, config.hidden, config.seed)?;
    let mut state = OptimizerState::new(&net, AdamWConfig::new(config.lr, config.weight_decay));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d37e);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = mean_gradients(&net, batch, |&i| {
                let s = &data[i];
                s.attention.check_shape(shape)?;
                detector_loss(&net, &s.attention, s.y())
            })?;
            if !loss.is_finite() {
                return Err(MhsaError::NumericalDivergence { step: losses.len() });
            }
            tinynet::step(&mut net, &grads, &mut state)?;
            losses.push(loss);
        }
    }
    Ok((net, losses))
}

/// Fraction of samples whose predicted class equals their hallucination label.
pub fn accuracy(d: &DenseNet, data: &[LabeledSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(MhsaError::DegenerateDataset("no samples".into()));
    }
    let correct: Vec<bool> = data
        .par_iter()
        .map(|s| detect(d, &s.attention).map(|o| o.predicted_class == s.y()))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / data.len() as f64)
}
