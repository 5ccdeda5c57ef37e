use crate::attention::{AttentionShape, AttentionTensor};
use crate::detector::check_detector_dims;
use crate::error::{MhsaError, Result};
use crate::sample::Answer;
use crate::surrogate::SurrogateHead;
use crate::tinynet::{cross_entropy, log_softmax, DenseNet, GradientBundle};

use super::config::{TrainConfig, TrainMode};

/// Residual correction `A' = A + ΔA` produced by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub delta: AttentionTensor,
    pub corrected: AttentionTensor,
    /// `Σ ΔA²`, accumulated in f64.
    pub l2_norm_sq: f64,
}

fn check_generator(g: &DenseNet, shape: AttentionShape) -> Result<()> {
    let d = shape.flat_dim();
    if g.input_dim() != d || g.output_dim() != d {
        return Err(MhsaError::shape(
            format!("generator {d} -> {d}"),
            format!("{} -> {}", g.input_dim(), g.output_dim()),
        ));
    }
    Ok(())
}

pub fn correct(g: &DenseNet, a: &AttentionTensor) -> Result<Correction> {
    let shape = a.shape();
    check_generator(g, shape)?;
    let (out, _) = g.forward(&a.flatten())?;
    let delta: Vec<f32> = out.iter().map(|&v| v as f32).collect();
    let corrected: Vec<f32> = a.values().iter().zip(&delta).map(|(x, d)| x + d).collect();
    let l2_norm_sq = delta.iter().map(|&d| f64::from(d) * f64::from(d)).sum();
    Ok(Correction {
        delta: AttentionTensor::offset(shape, delta)?,
        corrected: AttentionTensor::new_corrected(shape, corrected)?,
        l2_norm_sq,
    })
}

/// `-log D_0(A')`: pushes corrected attention toward the non-hallucination class.
pub fn dg_loss(d: &DenseNet, corrected: &AttentionTensor) -> Result<f64> {
    let x = corrected.flatten();
    check_detector_dims(d, x.len())?;
    let (logits, _) = d.forward(&x)?;
    Ok(-log_softmax(&logits)[0])
}

/// Squared L2 norm of the correction.
pub fn reg_loss(delta: &AttentionTensor) -> f64 {
    delta
        .values()
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum()
}

/// Cross-entropy of the answer head on corrected attention against the ground truth.
pub fn lvlm_loss(
    head: &SurrogateHead,
    corrected: &AttentionTensor,
    gt: Answer,
    mode: TrainMode,
) -> Result<f64> {
    if mode == TrainMode::CaptionOffline {
        return Err(MhsaError::Mode(mode.to_string()));
    }
    corrected.check_shape(head.shape())?;
    let target = gt.index().ok_or(MhsaError::Label(-1))?;
    let (loss, _) = cross_entropy(&head.logits(&corrected.flatten())?, target);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub dg: f64,
    pub reg: f64,
    pub lvlm: f64,
}

/// `λ_dg·L_dg + λ_reg·L_reg + λ_LVLM·L_LVLM`.
pub fn total_loss(c: &LossComponents, config: &TrainConfig) -> Result<f64> {
    for (name, v) in [
        ("lambda_dg", config.lambda_dg),
        ("lambda_reg", config.lambda_reg),
        ("lambda_lvlm", config.lambda_lvlm),
    ] {
        if v < 0.0 {
            return Err(MhsaError::Config(format!("{name} is negative")));
        }
    }
    Ok(config.lambda_dg * c.dg + config.lambda_reg * c.reg + config.lambda_lvlm * c.lvlm)
}

/// Loss weights for one generator objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub dg: f64,
    pub reg: f64,
    pub lvlm: f64,
}

impl LossWeights {
    pub fn from_config(config: &TrainConfig) -> Self {
        LossWeights {
            dg: config.lambda_dg,
            reg: config.lambda_reg,
            lvlm: config.lambda_lvlm,
        }
    }
}

/// Result of one per-sample generator objective evaluation.
#[derive(Debug, Clone)]
pub struct SampleObjective {
    pub components: LossComponents,
    pub total: f64,
    pub grads: GradientBundle,
    pub delta_norm: f64,
}

/// Per-sample generator objective and its exact gradient w.r.t. the generator.
///
/// Everything runs in f64 on the flat attention. `apply_dg` selects whether the
/// detector-guided term participates; `gt` is required when `weights.lvlm > 0`.
pub fn generator_objective(
    g: &DenseNet,
    d: &DenseNet,
    head: Option<&SurrogateHead>,
    x: &[f64],
    apply_dg: bool,
    gt: Option<Answer>,
    weights: LossWeights,
) -> Result<SampleObjective> {
    if g.input_dim() != x.len() || g.output_dim() != x.len() {
        return Err(MhsaError::shape(x.len(), g.input_dim()));
    }
    let (delta, g_cache) = g.forward(x)?;
    let corrected: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
    let mut d_corrected = vec![0.0; x.len()];
    let mut components = LossComponents::default();

    if apply_dg {
        check_detector_dims(d, x.len())?;
        let (logits, d_cache) = d.forward(&corrected)?;
        let (loss, d_logits) = cross_entropy(&logits, 0);
        components.dg = loss;
        if weights.dg != 0.0 {
            let scaled: Vec<f64> = d_logits.iter().map(|v| v * weights.dg).collect();
            let (_, d_input) = d.backward(&d_cache, &scaled)?;
            d_corrected
                .iter_mut()
                .zip(&d_input)
                .for_each(|(a, b)| *a += b);
        }
    }

    components.reg = delta.iter().map(|v| v * v).sum();

    if weights.lvlm != 0.0 {
        let head = head
            .ok_or_else(|| MhsaError::Config("answer-quality loss needs the answer head".into()))?;
        let target = gt.and_then(Answer::index).ok_or(MhsaError::Label(-1))?;
        let (loss, d_logits) = cross_entropy(&head.logits(&corrected)?, target);
        components.lvlm = loss;
        let scaled: Vec<f64> = d_logits.iter().map(|v| v * weights.lvlm).collect();
        let d_input = head.logits_backward(&scaled)?;
        d_corrected
            .iter_mut()
            .zip(&d_input)
            .for_each(|(a, b)| *a += b);
    }

    let d_delta: Vec<f64> = d_corrected
        .iter()
        .zip(&delta)
        .map(|(dc, dl)| dc + 2.0 * weights.reg * dl)
        .collect();
    let (grads, _) = g.backward(&g_cache, &d_delta)?;
    let total =
        weights.dg * components.dg + weights.reg * components.reg + weights.lvlm * components.lvlm;
    Ok(SampleObjective {
        components,
        total,
        grads,
        delta_norm: components.reg.sqrt(),
    })
}
