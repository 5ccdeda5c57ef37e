//! Deterministic stand-in for a vision-language model.
//!
//! Attention rows are synthesized per `(layer, head)`: grounded rows concentrate on
//! the region of the visual grid that supports the answer, hallucinated rows are
//! diffuse and lean toward the wrong region in all but the first few "evidence"
//! layers. A frozen linear head reads per-layer region mass and turns attention
//! into an answer distribution, so correcting attention can change the answer.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionShape, AttentionTensor, AttentionTrace};
use crate::error::{MhsaError, Result};
use crate::sample::{Answer, LabeledSample};
use crate::tinynet::softmax;

pub const DEFAULT_WHITELIST: [&str; 8] = [
    "dog", "cat", "person", "car", "bicycle", "chair", "bottle", "cup",
];

const FILLER_WORDS: [&str; 10] = [
    "a", "the", "near", "with", "on", "is", "sitting", "next", "to", "and",
];

// Rejection sampling keeps labels consistent with what the head actually answers.
const MAX_REDRAWS: usize = 64;

/// Shape of one class of attention rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerativityParams {
    /// Logit boost of the focused region; larger is sharper.
    pub concentration: f64,
    /// Probability that a row focuses on the planted region rather than a wrong one.
    pub p_align: f64,
    /// Uniform mass mixed into every row.
    pub noise_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub grounded: GenerativityParams,
    pub hallucinated: GenerativityParams,
    /// Fraction of leading layers that stay grounded even in hallucinated samples.
    pub evidence_fraction: f64,
    /// Standard deviation of per-token logit jitter.
    pub jitter: f64,
    /// Head readout gain on per-layer region mass.
    pub head_gain: f64,
    /// Head weight on evidence layers (later layers have weight 1).
    pub evidence_weight: f64,
    /// Scale of the head's fixed random projection of the flat tensor.
    pub projection_scale: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            grounded: GenerativityParams {
                concentration: 4.0,
                p_align: 1.0,
                noise_floor: 0.02,
            },
            hallucinated: GenerativityParams {
                concentration: 1.0,
                p_align: 0.0,
                noise_floor: 0.02,
            },
            evidence_fraction: 0.25,
            jitter: 0.3,
            head_gain: 4.0,
            evidence_weight: 0.25,
            projection_scale: 0.05,
            seed: 0x5u64,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        for p in [&self.grounded, &self.hallucinated] {
            if p.concentration.is_nan()
                || p.concentration <= 0.0
                || !(0.0..=1.0).contains(&p.p_align)
            {
                return Err(MhsaError::Config(
                    "concentration must be > 0 and p_align in [0, 1]".into(),
                ));
            }
            if !(0.0..=1.0).contains(&p.noise_floor) {
                return Err(MhsaError::Config("noise floor must be in [0, 1]".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.evidence_fraction) {
            return Err(MhsaError::Config(
                "evidence_fraction must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// What the synthetic image contains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: u64,
    /// Visual tokens that support the correct answer.
    pub planted_region: BTreeSet<usize>,
    pub present_objects: BTreeSet<String>,
    pub distractor_objects: BTreeSet<String>,
}

impl SceneSpec {
    pub fn validate(&self, shape: AttentionShape) -> Result<()> {
        if self.planted_region.is_empty()
            || self
                .planted_region
                .iter()
                .any(|&n| n >= shape.visual_tokens)
        {
            return Err(MhsaError::Config(format!(
                "planted region must be nonempty with indices < {}",
                shape.visual_tokens
            )));
        }
        if !self.present_objects.is_disjoint(&self.distractor_objects) {
            return Err(MhsaError::Config(
                "present and distractor objects overlap".into(),
            ));
        }
        Ok(())
    }
}

/// Frozen linear readout from attention to an answer distribution.
///
/// `logit[a] = gain * Σ_l w_l * mass_l(region_a) + projection[a] · flat(A)` where
/// `mass_l` is the head-averaged attention mass on the answer's region in layer `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateHead {
    shape: AttentionShape,
    labels: Vec<String>,
    regions: Vec<Vec<usize>>,
    layer_weights: Vec<f64>,
    gain: f64,
    projection: Vec<f64>,
}

impl SurrogateHead {
    pub fn new(
        shape: AttentionShape,
        labels: Vec<String>,
        regions: Vec<Vec<usize>>,
        config: &SurrogateConfig,
        seed: u64,
    ) -> Result<Self> {
        if labels.len() != regions.len() || labels.len() < 2 {
            return Err(MhsaError::Config(
                "head needs at least two answers, one region each".into(),
            ));
        }
        if regions
            .iter()
            .any(|r| r.is_empty() || r.iter().any(|&n| n >= shape.visual_tokens))
        {
            return Err(MhsaError::Config("head region out of range".into()));
        }
        let evidence = evidence_layers(shape, config.evidence_fraction);
        let layer_weights = (0..shape.layers)
            .map(|l| {
                if l < evidence {
                    config.evidence_weight
                } else {
                    1.0
                }
            })
            .collect();
        let d = shape.flat_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = config.projection_scale / (d as f64).sqrt();
        let projection = (0..labels.len() * d)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(SurrogateHead {
            shape,
            labels,
            regions,
            layer_weights,
            gain: config.head_gain,
            projection,
        })
    }

    pub fn shape(&self) -> AttentionShape {
        self.shape
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn region(&self, answer: usize) -> &[usize] {
        &self.regions[answer]
    }

    pub fn answer_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.shape.flat_dim();
        if x.len() != d {
            return Err(MhsaError::shape(d, x.len()));
        }
        let heads = self.shape.heads as f64;
        Ok(self
            .regions
            .iter()
            .enumerate()
            .map(|(a, region)| {
                let mut mass = 0.0;
                for (l, w) in self.layer_weights.iter().enumerate() {
                    let mut m = 0.0;
                    for h in 0..self.shape.heads {
                        for &n in region {
                            m += x[self.shape.index(l, h, n)];
                        }
                    }
                    mass += w * m / heads;
                }
                let proj: f64 = self.projection[a * d..(a + 1) * d]
                    .iter()
                    .zip(x)
                    .map(|(p, v)| p * v)
                    .sum();
                self.gain * mass + proj
            })
            .collect())
    }

    /// Gradient of `Σ_a upstream[a] * logit[a]` with respect to the flat attention.
    pub fn logits_backward(&self, upstream: &[f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.labels.len() {
            return Err(MhsaError::shape(self.labels.len(), upstream.len()));
        }
        let d = self.shape.flat_dim();
        let heads = self.shape.heads as f64;
        let mut grad = vec![0.0; d];
        for (a, &u) in upstream.iter().enumerate() {
            if u == 0.0 {
                continue;
            }
            for (g, p) in grad.iter_mut().zip(&self.projection[a * d..(a + 1) * d]) {
                *g += u * p;
            }
            for (l, w) in self.layer_weights.iter().enumerate() {
                let coeff = u * self.gain * w / heads;
                for h in 0..self.shape.heads {
                    for &n in &self.regions[a] {
                        grad[self.shape.index(l, h, n)] += coeff;
                    }
                }
            }
        }
        Ok(grad)
    }

    pub fn forward_flat(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Index of the most likely answer; `None` when the distribution is not finite.
    pub fn argmax_flat(&self, x: &[f64]) -> Result<Option<usize>> {
        let logits = self.logits(x)?;
        if logits.iter().any(|z| !z.is_finite()) {
            return Ok(None);
        }
        let mut best = 0;
        for (i, z) in logits.iter().enumerate() {
            if *z > logits[best] {
                best = i;
            }
        }
        Ok(Some(best))
    }
}

/// Answer distribution of the head for an attention tensor.
pub fn head_forward(head: &SurrogateHead, a: &AttentionTensor) -> Result<Vec<f64>> {
    a.check_shape(head.shape)?;
    head.forward_flat(&a.flatten())
}

fn evidence_layers(shape: AttentionShape, fraction: f64) -> usize {
    ((shape.layers as f64 * fraction).floor() as usize)
        .max(1)
        .min(shape.layers)
}

/// Contiguous block `[k*N/K, (k+1)*N/K)` of the visual grid.
fn block(shape: AttentionShape, k: usize, of: usize) -> Vec<usize> {
    let n = shape.visual_tokens;
    (k * n / of..(k + 1) * n / of).collect()
}

/// The surrogate model: attention synthesis plus its two frozen heads.
#[derive(Debug, Clone)]
pub struct Surrogate {
    shape: AttentionShape,
    config: SurrogateConfig,
    pope_head: SurrogateHead,
    caption_head: SurrogateHead,
}

impl Surrogate {
    pub fn new(
        shape: AttentionShape,
        config: SurrogateConfig,
        whitelist: &[String],
    ) -> Result<Self> {
        config.validate()?;
        if shape.visual_tokens < 4 {
            return Err(MhsaError::Config("need at least 4 visual tokens".into()));
        }
        if whitelist.len() < 2 || whitelist.len() > shape.visual_tokens {
            return Err(MhsaError::Config(format!(
                "whitelist size {} must be in [2, {}]",
                whitelist.len(),
                shape.visual_tokens
            )));
        }
        let pope_head = SurrogateHead::new(
            shape,
            vec!["Yes".into(), "No".into()],
            vec![block(shape, 0, 4), block(shape, 2, 4)],
            &config,
            config.seed,
        )?;
        let caption_head = SurrogateHead::new(
            shape,
            whitelist.to_vec(),
            (0..whitelist.len())
                .map(|k| block(shape, k, whitelist.len()))
                .collect(),
            &config,
            config.seed.wrapping_add(1),
        )?;
        Ok(Surrogate {
            shape,
            config,
            pope_head,
            caption_head,
        })
    }

    pub fn with_defaults(shape: AttentionShape) -> Result<Self> {
        let whitelist: Vec<String> = DEFAULT_WHITELIST.iter().map(|s| s.to_string()).collect();
        Self::new(shape, SurrogateConfig::default(), &whitelist)
    }

    pub fn shape(&self) -> AttentionShape {
        self.shape
    }

    pub fn config(&self) -> &SurrogateConfig {
        &self.config
    }

    pub fn pope_head(&self) -> &SurrogateHead {
        &self.pope_head
    }

    pub fn caption_head(&self) -> &SurrogateHead {
        &self.caption_head
    }

    pub fn whitelist(&self) -> &[String] {
        self.caption_head.labels()
    }

    fn evidence_layers(&self) -> usize {
        evidence_layers(self.shape, self.config.evidence_fraction)
    }

    /// One attention row focused on `region` with the given sharpness.
    fn row<R: Rng>(
        &self,
        rng: &mut R,
        region: &[usize],
        concentration: f64,
        floor: f64,
    ) -> Vec<f32> {
        let n = self.shape.visual_tokens;
        let mut logits: Vec<f64> = (0..n)
            .map(|_| self.config.jitter * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for &i in region {
            logits[i] += concentration;
        }
        let mass: f64 = rng.random_range(0.85..=1.0);
        softmax(&logits)
            .iter()
            .map(|p| (mass * ((1.0 - floor) * p + floor / n as f64)) as f32)
            .collect()
    }

    /// Attention for one output position. `target` is where grounded rows look;
    /// hallucinated rows outside the evidence layers lean toward `wrong` instead.
    fn synthesize<R: Rng>(
        &self,
        rng: &mut R,
        target: &[usize],
        wrong: &[usize],
        hallucinate: bool,
    ) -> Result<AttentionTensor> {
        let evidence = self.evidence_layers();
        let mut values = Vec::with_capacity(self.shape.flat_dim());
        for l in 0..self.shape.layers {
            let params = if hallucinate && l >= evidence {
                self.config.hallucinated
            } else {
                self.config.grounded
            };
            for _ in 0..self.shape.heads {
                let region = if rng.random_bool(params.p_align) {
                    target
                } else {
                    wrong
                };
                values.extend(self.row(rng, region, params.concentration, params.noise_floor));
            }
        }
        AttentionTensor::new(self.shape, values)
    }

    /// A yes/no question about `queried`. The planted region is the head's region for
    /// the correct answer.
    pub fn pope_scene<R: Rng>(
        &self,
        rng: &mut R,
        scene_id: u64,
        present: bool,
    ) -> (SceneSpec, String) {
        let (present_objects, distractors) = self.split_objects(rng);
        let queried = if present {
            present_objects.iter().next().cloned()
        } else {
            distractors.iter().next().cloned()
        }
        .expect("object sets are nonempty");
        let gt = if present { 0 } else { 1 };
        let scene = SceneSpec {
            scene_id,
            planted_region: self.pope_head.region(gt).iter().copied().collect(),
            present_objects,
            distractor_objects: distractors,
        };
        (scene, queried)
    }

    fn split_objects<R: Rng>(&self, rng: &mut R) -> (BTreeSet<String>, BTreeSet<String>) {
        let mut objects: Vec<String> = self.whitelist().to_vec();
        objects.shuffle(rng);
        let k = objects.len();
        let n_present = rng.random_range(1..=(k / 2).max(1));
        let present = objects[..n_present].iter().cloned().collect();
        let distractors = objects[n_present..].iter().cloned().collect();
        (present, distractors)
    }

    /// Draws a discriminative sample. The label is consistent with the head: grounded
    /// samples are answered correctly, hallucinated ones incorrectly.
    pub fn sample_discriminative<R: Rng>(
        &self,
        rng: &mut R,
        scene: &SceneSpec,
        queried: &str,
        hallucinate: bool,
    ) -> Result<LabeledSample> {
        scene.validate(self.shape)?;
        let gt = if scene.present_objects.contains(queried) {
            Answer::Yes
        } else {
            Answer::No
        };
        let gt_idx = gt.index().expect("gt is Yes or No");
        let target: Vec<usize> = scene.planted_region.iter().copied().collect();
        let wrong = self.pope_head.region(1 - gt_idx).to_vec();
        let mut attention = self.synthesize(rng, &target, &wrong, hallucinate)?;
        for _ in 0..MAX_REDRAWS {
            let answer = self.pope_head.argmax_flat(&attention.flatten())?;
            if (answer == Some(gt_idx)) != hallucinate {
                break;
            }
            attention = self.synthesize(rng, &target, &wrong, hallucinate)?;
        }
        let class4 = if hallucinate { 2 } else { 0 } + u8::from(rng.random_bool(0.5));
        LabeledSample::new(
            scene.scene_id,
            attention,
            class4,
            Some(gt),
            Some(scene.scene_id),
        )
    }

    /// A captioning scene: present objects are planted in their head regions.
    pub fn caption_scene<R: Rng>(&self, rng: &mut R, scene_id: u64) -> SceneSpec {
        let (present_objects, distractor_objects) = self.split_objects(rng);
        let planted_region = present_objects
            .iter()
            .flat_map(|o| {
                let k = self.caption_head.answer_index(o).expect("whitelist object");
                self.caption_head.region(k).to_vec()
            })
            .collect();
        SceneSpec {
            scene_id,
            planted_region,
            present_objects,
            distractor_objects,
        }
    }

    /// Emits a caption of `length` tokens with per-token attention. Every third token
    /// is an object noun; with probability `halluc_rate` it names a distractor.
    pub fn generate_caption_trace<R: Rng>(
        &self,
        rng: &mut R,
        scene: &SceneSpec,
        length: usize,
        halluc_rate: f64,
    ) -> Result<(Vec<String>, AttentionTrace)> {
        if length == 0 {
            return Err(MhsaError::EmptyTrace);
        }
        scene.validate(self.shape)?;
        let present: Vec<&String> = scene.present_objects.iter().collect();
        let distractors: Vec<&String> = scene.distractor_objects.iter().collect();
        if present.is_empty() {
            return Err(MhsaError::Config(
                "caption scene has no present objects".into(),
            ));
        }
        let head = &self.caption_head;
        let region_of = |o: &str| -> Result<Vec<usize>> {
            head.answer_index(o)
                .map(|k| head.region(k).to_vec())
                .ok_or_else(|| MhsaError::Config(format!("`{o}` is not in the whitelist")))
        };
        let mut tokens = Vec::with_capacity(length);
        let mut steps = Vec::with_capacity(length);
        for m in 0..length {
            if m % 3 != 2 {
                let word = *FILLER_WORDS.choose(rng).expect("nonempty");
                let focus = block(self.shape, rng.random_range(0..4), 4);
                let filler = GenerativityParams {
                    concentration: 2.0,
                    ..self.config.grounded
                };
                let mut values = Vec::with_capacity(self.shape.flat_dim());
                for _ in 0..self.shape.layers * self.shape.heads {
                    values.extend(self.row(rng, &focus, filler.concentration, filler.noise_floor));
                }
                tokens.push(word.to_string());
                steps.push(AttentionTensor::new(self.shape, values)?);
                continue;
            }
            let hallucinate = !distractors.is_empty() && rng.random_bool(halluc_rate);
            let anchor = *present.choose(rng).expect("nonempty");
            let (word, target, wrong) = if hallucinate {
                let d = *distractors.choose(rng).expect("nonempty");
                (d, region_of(anchor)?, region_of(d)?)
            } else {
                let r = region_of(anchor)?;
                (anchor, r.clone(), r)
            };
            let want = head.answer_index(word).expect("whitelist object");
            let mut attention = self.synthesize(rng, &target, &wrong, hallucinate)?;
            for _ in 0..MAX_REDRAWS {
                if head.argmax_flat(&attention.flatten())? == Some(want) {
                    break;
                }
                attention = self.synthesize(rng, &target, &wrong, hallucinate)?;
            }
            tokens.push(word.clone());
            steps.push(attention);
        }
        Ok((tokens, AttentionTrace::new(self.shape, steps)?))
    }
}

/// Per-token label used to build token-level training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenLabel {
    NonHalluc,
    Halluc,
    NotApplicable,
}

/// Whitelist nouns absent from the ground truth are hallucinated, present ones are
/// not, and every other token is excluded.
pub fn label_caption_tokens(
    tokens: &[String],
    whitelist: &BTreeSet<String>,
    gt_objects: &BTreeSet<String>,
) -> Vec<TokenLabel> {
    tokens
        .iter()
        .map(|t| {
            let t = t.to_lowercase();
            if !whitelist.contains(&t) {
                TokenLabel::NotApplicable
            } else if gt_objects.contains(&t) {
                TokenLabel::NonHalluc
            } else {
                TokenLabel::Halluc
            }
        })
        .collect()
}

/// Per-sample generator: `seed ^ sample_id`.
pub fn sample_rng(global_seed: u64, sample_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(global_seed ^ sample_id)
}

/// Shannon entropy (nats) of each `(layer, head)` row after normalizing it to sum 1.
pub fn row_entropies(a: &AttentionTensor) -> Vec<f64> {
    let s = a.shape();
    let mut out = Vec::with_capacity(s.layers * s.heads);
    for l in 0..s.layers {
        for h in 0..s.heads {
            let row = a.row(l, h);
            let total: f64 = row.iter().map(|&v| f64::from(v.max(0.0))).sum();
            if total <= 1e-12 {
                out.push(0.0);
                continue;
            }
            let e = row
                .iter()
                .map(|&v| f64::from(v.max(0.0)) / total)
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum();
            out.push(e);
        }
    }
    out
}
