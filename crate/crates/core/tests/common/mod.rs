#![allow(dead_code)]

use mhsa_core::attention::AttentionShape;
use mhsa_core::sample::LabeledSample;
use mhsa_core::surrogate::{sample_rng, Surrogate};
use rand::Rng;

pub fn surrogate(layers: usize, heads: usize, tokens: usize) -> Surrogate {
    let shape = AttentionShape::new(layers, heads, tokens).unwrap();
    Surrogate::with_defaults(shape).unwrap()
}

/// Discriminative samples with ids `ids`, half present and half hallucinated.
pub fn samples(sur: &Surrogate, seed: u64, ids: std::ops::Range<u64>) -> Vec<LabeledSample> {
    ids.map(|id| {
        let mut rng = sample_rng(seed, id);
        let present = rng.random_bool(0.5);
        let hallucinate = rng.random_bool(0.5);
        let (scene, q) = sur.pope_scene(&mut rng, id, present);
        sur.sample_discriminative(&mut rng, &scene, &q, hallucinate)
            .unwrap()
    })
    .collect()
}
