mod common;

use std::collections::BTreeSet;

use mhsa_core::detector::{detect, pretrain_detector, PretrainConfig};
use mhsa_core::eval::chair_metrics;
use mhsa_core::pipeline::{infer_discriminative, infer_generative, Bundle, Caption};
use mhsa_core::sample::LabeledSample;
use mhsa_core::steering::{correct, oversample, train_mhsa, TrainConfig, TrainMode};
use mhsa_core::surrogate::{sample_rng, Surrogate};
use mhsa_core::tinynet::{init_detector, init_generator, DenseNet};

fn zero_generator(sur: &Surrogate) -> DenseNet {
    let d = sur.shape().flat_dim();
    DenseNet::zeros(&[d, 32, d], false).unwrap()
}

#[test]
fn unflagged_answers_are_untouched() {
    let sur = common::surrogate(2, 2, 16);
    let g = init_generator(sur.shape(), 64, 1).unwrap();
    let d = init_detector(sur.shape(), 128, 2).unwrap();
    let bundle = Bundle {
        generator: &g,
        detector: &d,
        head: sur.pope_head(),
    };
    for s in common::samples(&sur, 3, 0..200) {
        let (rec, corr) =
            infer_discriminative(bundle, s.sample_id, &s.attention, s.gt_answer, true).unwrap();
        assert_eq!(rec.was_flagged, corr.is_some());
        if !rec.was_flagged {
            assert_eq!(rec.answer_before, rec.answer_after);
        }
    }
}

#[test]
fn zero_generator_is_identity() {
    let sur = common::surrogate(2, 2, 16);
    let g = zero_generator(&sur);
    for s in common::samples(&sur, 4, 0..50) {
        let c = correct(&g, &s.attention).unwrap();
        assert_eq!(c.corrected.values(), s.attention.values());
        assert_eq!(c.l2_norm_sq, 0.0);
    }
}

#[test]
fn disabled_correction_keeps_captions() {
    let sur = common::surrogate(2, 2, 16);
    let g = init_generator(sur.shape(), 64, 1).unwrap();
    let d = init_detector(sur.shape(), 128, 2).unwrap();
    let whitelist: BTreeSet<String> = sur.whitelist().iter().cloned().collect();
    let bundle = Bundle {
        generator: &g,
        detector: &d,
        head: sur.caption_head(),
    };
    for id in 0..20 {
        let mut rng = sample_rng(5, id);
        let scene = sur.caption_scene(&mut rng, id);
        let (tokens, trace) = sur
            .generate_caption_trace(&mut rng, &scene, 12, 0.5)
            .unwrap();
        let cap = Caption {
            sample_id: id,
            tokens: &tokens,
            trace: &trace,
            gt_objects: &scene.present_objects,
        };
        let rec = infer_generative(bundle, &whitelist, &cap, false).unwrap();
        assert_eq!(rec.tokens_after, tokens);
        assert!(rec.flags.iter().all(|f| !f));
    }
}

#[test]
fn untrained_generator_barely_moves_attention() {
    let sur = common::surrogate(2, 2, 16);
    let g = init_generator(sur.shape(), 512, 9).unwrap();
    for s in common::samples(&sur, 6, 0..100) {
        let c = correct(&g, &s.attention).unwrap();
        let l = s.attention.shape().layers * s.attention.shape().heads;
        let tv: f64 = c
            .delta
            .values()
            .iter()
            .map(|v| f64::from(v.abs()))
            .sum::<f64>()
            / (2.0 * l as f64);
        assert!(tv <= 1e-2, "total variation {tv}");
    }
}

fn trained(sur: &Surrogate, train: &[LabeledSample], mode: TrainMode) -> (DenseNet, DenseNet) {
    let (d0, _) = pretrain_detector(train, &PretrainConfig::default()).unwrap();
    let cfg = match mode {
        TrainMode::Discriminative => TrainConfig::pope_qwen(),
        TrainMode::CaptionOffline => TrainConfig::caption_qwen(),
    };
    let g0 = init_generator(sur.shape(), cfg.hidden_g, cfg.seed).unwrap();
    let out = train_mhsa(&g0, &d0, Some(sur.pope_head()), &oversample(train, 1), &cfg).unwrap();
    (out.generator, out.detector)
}

#[test]
fn trained_generator_flips_most_flagged_hallucinations() {
    let sur = common::surrogate(4, 4, 16);
    let train = common::samples(&sur, 7, 0..4000);
    let val = common::samples(&sur, 7, 4000..4500);
    let (g, d) = trained(&sur, &train, TrainMode::Discriminative);
    let (mut flagged, mut flipped) = (0, 0);
    for s in val.iter().filter(|s| s.y() == 1) {
        if detect(&d, &s.attention).unwrap().is_hallucination() {
            flagged += 1;
            let c = correct(&g, &s.attention).unwrap();
            flipped += usize::from(!detect(&d, &c.corrected).unwrap().is_hallucination());
        }
    }
    assert!(flagged > 0);
    assert!(
        flipped as f64 >= 0.6 * flagged as f64,
        "{flipped}/{flagged}"
    );
}

#[test]
fn caption_correction_does_not_add_hallucinations() {
    let sur = common::surrogate(4, 4, 16);
    let whitelist: BTreeSet<String> = sur.whitelist().iter().cloned().collect();
    let mut captions = Vec::new();
    let mut train = Vec::new();
    for id in 0..400u64 {
        let mut rng = sample_rng(8, id);
        let scene = sur.caption_scene(&mut rng, id);
        let (tokens, trace) = sur
            .generate_caption_trace(&mut rng, &scene, 15, 0.3)
            .unwrap();
        if id < 200 {
            for (m, (t, a)) in tokens.iter().zip(trace.steps()).enumerate() {
                if !whitelist.contains(t) {
                    continue;
                }
                let class = if scene.present_objects.contains(t) {
                    0
                } else {
                    2
                };
                train.push(
                    LabeledSample::new(id << 16 | m as u64, a.clone(), class, None, Some(id))
                        .unwrap(),
                );
            }
        } else {
            captions.push((id, tokens, trace, scene.present_objects));
        }
    }
    let (d0, _) = pretrain_detector(&train, &PretrainConfig::default()).unwrap();
    let cfg = TrainConfig::caption_qwen();
    let g0 = init_generator(sur.shape(), cfg.hidden_g, cfg.seed).unwrap();
    let out = train_mhsa(&g0, &d0, None, &oversample(&train, 1), &cfg).unwrap();
    let bundle = Bundle {
        generator: &out.generator,
        detector: &out.detector,
        head: sur.caption_head(),
    };

    let records: Vec<_> = captions
        .iter()
        .map(|(id, tokens, trace, gt)| {
            let cap = Caption {
                sample_id: *id,
                tokens,
                trace,
                gt_objects: gt,
            };
            infer_generative(bundle, &whitelist, &cap, true).unwrap()
        })
        .collect();
    let before = chair_metrics(&records, &whitelist, false).unwrap();
    let after = chair_metrics(&records, &whitelist, true).unwrap();
    assert!(after.counts.halluc_mentions <= before.counts.halluc_mentions);
}
