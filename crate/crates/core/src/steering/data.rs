use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MhsaError, Result};
use crate::sample::LabeledSample;

/// Splits samples into train/validation at question granularity: every record of
/// one question lands on the same side. Input order is kept within each side.
pub fn split_by_question(
    samples: &[LabeledSample],
    train_ratio: f64,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if !(0.0..=1.0).contains(&train_ratio) {
        return Err(MhsaError::Config(format!(
            "train ratio {train_ratio} outside [0, 1]"
        )));
    }
    let mut ids = BTreeSet::new();
    for s in samples {
        ids.insert(
            s.question_id
                .ok_or(MhsaError::MissingQuestionId(s.sample_id))?,
        );
    }
    let mut ids: Vec<u64> = ids.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_ratio * ids.len() as f64).round() as usize;
    let train_ids: BTreeSet<u64> = ids[..n_train].iter().copied().collect();
    let (train, val) = samples
        .iter()
        .cloned()
        .partition(|s| train_ids.contains(&s.question_id.expect("checked above")));
    Ok((train, val))
}

/// Target class sizes: classes 2 and 3 kept whole; classes 0 and 1 each cut to
/// `ceil((|C2| + |C3|) / 2)`, or fewer if not that many exist.
pub fn oversample_counts(counts: [usize; 4]) -> [usize; 4] {
    let target = (counts[2] + counts[3]).div_ceil(2);
    [
        counts[0].min(target),
        counts[1].min(target),
        counts[2],
        counts[3],
    ]
}

pub fn class_counts(samples: &[LabeledSample]) -> [usize; 4] {
    let mut counts = [0usize; 4];
    for s in samples {
        counts[usize::from(s.class4)] += 1;
    }
    counts
}

/// Rebalances a training set toward hallucinated samples. Non-hallucinated classes
/// are subsampled uniformly without replacement; survivors keep their input order.
pub fn oversample(samples: &[LabeledSample], seed: u64) -> Vec<LabeledSample> {
    let counts = class_counts(samples);
    if counts[2] + counts[3] == 0 {
        log::warn!("no hallucinated samples; classes 0 and 1 are subsampled to nothing");
    }
    let target = oversample_counts(counts);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.class4).or_default().push(i);
    }
    let mut keep = vec![false; samples.len()];
    for (class, members) in &by_class {
        let want = target[usize::from(*class)];
        if want >= members.len() {
            members.iter().for_each(|&i| keep[i] = true);
        } else {
            for k in index::sample(&mut rng, members.len(), want) {
                keep[members[k]] = true;
            }
        }
    }
    samples
        .iter()
        .zip(keep)
        .filter(|&(_s, k)| k)
        .map(|(s, _k)| s.clone())
        .collect()
}
