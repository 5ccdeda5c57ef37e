//! POPE and CHAIR metrics and before/after comparison tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{MhsaError, Result};
use crate::pipeline::{CaptionRecord, EvalRecord};
use crate::sample::Answer;

/// A percentage kept as the exact ratio `100 · num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Percent {
    pub num: u64,
    pub den: u64,
}

impl Percent {
    pub fn new(num: u64, den: u64) -> Self {
        Percent { num, den }
    }

    /// 0 when the denominator is 0.
    pub fn value(&self) -> f64 {
        if self.den == 0 {
            0.0
        } else {
            100.0 * self.num as f64 / self.den as f64
        }
    }

    /// Rounded half away from zero to two decimals, using integer arithmetic so
    /// that exact ties round correctly.
    pub fn rounded(&self) -> f64 {
        if self.den == 0 {
            return 0.0;
        }
        let (num, den) = (u128::from(self.num), u128::from(self.den));
        let hundredths = (20_000 * num + den) / (2 * den);
        hundredths as f64 / 100.0
    }
}

/// Half away from zero to two decimals.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PopeCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub invalid: u64,
    pub yes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeMetrics {
    pub counts: PopeCounts,
    pub accuracy: Percent,
    pub precision: Percent,
    pub recall: Percent,
    pub f1: Percent,
    pub yes_ratio: Percent,
}

impl PopeMetrics {
    /// Metrics from confusion counts. Positive is the `Yes` label; invalid answers
    /// count only in the accuracy and yes-ratio denominators.
    pub fn from_counts(c: PopeCounts) -> Self {
        let total = c.tp + c.fp + c.tn + c.fn_ + c.invalid;
        if 2 * c.tp + c.fp + c.fn_ == 0 || c.tp == 0 {
            log::warn!("F1 undefined or zero (no true positives); reported as 0");
        }
        PopeMetrics {
            counts: c,
            accuracy: Percent::new(c.tp + c.tn, total),
            precision: Percent::new(c.tp, c.tp + c.fp),
            recall: Percent::new(c.tp, c.tp + c.fn_),
            // 2PR/(P+R) reduces to 2TP/(2TP+FP+FN); zero when TP is zero
            f1: Percent::new(
                2 * c.tp,
                if c.tp == 0 {
                    0
                } else {
                    2 * c.tp + c.fp + c.fn_
                },
            ),
            yes_ratio: Percent::new(c.yes, total),
        }
    }

    pub fn fields(&self) -> [(&'static str, Percent); 5] {
        [
            ("Acc", self.accuracy),
            ("Prec", self.precision),
            ("Recall", self.recall),
            ("F1", self.f1),
            ("Yes%", self.yes_ratio),
        ]
    }
}

/// POPE metrics over the answers before correction, or after when `use_after`.
pub fn pope_metrics(records: &[EvalRecord], use_after: bool) -> Result<PopeMetrics> {
    if records.is_empty() {
        return Err(MhsaError::DegenerateDataset("no eval records".into()));
    }
    let mut c = PopeCounts::default();
    for r in records {
        let gt = r.gt_answer.ok_or_else(|| {
            MhsaError::DegenerateDataset(format!("sample {} has no gt", r.sample_id))
        })?;
        let answer = if use_after {
            r.answer_after
        } else {
            r.answer_before
        };
        match (answer, gt) {
            (Answer::Invalid, _) => c.invalid += 1,
            (Answer::Yes, Answer::Yes) => c.tp += 1,
            (Answer::Yes, _) => c.fp += 1,
            (Answer::No, Answer::No) => c.tn += 1,
            (Answer::No, _) => c.fn_ += 1,
        }
        if answer == Answer::Yes {
            c.yes += 1;
        }
    }
    Ok(PopeMetrics::from_counts(c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ChairCounts {
    pub mentions: u64,
    pub halluc_mentions: u64,
    pub captions: u64,
    pub halluc_captions: u64,
    pub gt_objects: u64,
    pub gt_mentioned: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChairMetrics {
    pub counts: ChairCounts,
    pub chair_i: Percent,
    pub chair_s: Percent,
    pub recall: Percent,
}

impl ChairMetrics {
    pub fn from_counts(c: ChairCounts) -> Self {
        ChairMetrics {
            counts: c,
            chair_i: Percent::new(c.halluc_mentions, c.mentions),
            chair_s: Percent::new(c.halluc_captions, c.captions),
            recall: Percent::new(c.gt_mentioned, c.gt_objects),
        }
    }

    pub fn fields(&self) -> [(&'static str, Percent); 3] {
        [
            ("CHAIRi", self.chair_i),
            ("CHAIRs", self.chair_s),
            ("Recall", self.recall),
        ]
    }
}

/// CHAIR over captions. Mentions are counted per occurrence, hallucinating captions
/// once each, and recall over distinct ground-truth objects per caption.
pub fn chair_metrics(
    captions: &[CaptionRecord],
    whitelist: &BTreeSet<String>,
    use_after: bool,
) -> Result<ChairMetrics> {
    if captions.is_empty() {
        return Err(MhsaError::DegenerateDataset("no captions".into()));
    }
    let mut c = ChairCounts::default();
    for cap in captions {
        let tokens = if use_after {
            &cap.tokens_after
        } else {
            &cap.tokens_before
        };
        let mut mentioned = BTreeSet::new();
        let mut hallucinated = false;
        for t in tokens {
            let t = t.to_lowercase();
            if !whitelist.contains(&t) {
                continue;
            }
            c.mentions += 1;
            if cap.gt_objects.contains(&t) {
                mentioned.insert(t);
            } else {
                c.halluc_mentions += 1;
                hallucinated = true;
            }
        }
        c.captions += 1;
        c.halluc_captions += u64::from(hallucinated);
        c.gt_objects += cap.gt_objects.len() as u64;
        c.gt_mentioned += mentioned.len() as u64;
    }
    Ok(ChairMetrics::from_counts(c))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metrics {
    Pope(PopeMetrics),
    Chair(ChairMetrics),
}

impl Metrics {
    pub fn kind(&self) -> &'static str {
        match self {
            Metrics::Pope(_) => "pope",
            Metrics::Chair(_) => "chair",
        }
    }

    /// Field names and presented (rounded) values in table order.
    pub fn rounded_fields(&self) -> Vec<(&'static str, f64)> {
        match self {
            Metrics::Pope(m) => m.fields().iter().map(|(k, p)| (*k, p.rounded())).collect(),
            Metrics::Chair(m) => m.fields().iter().map(|(k, p)| (*k, p.rounded())).collect(),
        }
    }
}

/// Signed per-field differences `after − before` of the presented values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub kind: String,
    pub before: Vec<(String, f64)>,
    pub after: Vec<(String, f64)>,
    pub delta: Vec<(String, f64)>,
}

pub fn compare(before: &Metrics, after: &Metrics) -> Result<DeltaTable> {
    if before.kind() != after.kind() {
        return Err(MhsaError::MetricKind {
            before: before.kind().into(),
            after: after.kind().into(),
        });
    }
    let b = before.rounded_fields();
    let a = after.rounded_fields();
    let delta = b
        .iter()
        .zip(&a)
        .map(|((k, vb), (_, va))| (k.to_string(), round2(va - vb)))
        .collect();
    let owned = |v: Vec<(&str, f64)>| v.into_iter().map(|(k, x)| (k.to_string(), x)).collect();
    Ok(DeltaTable {
        kind: before.kind().into(),
        before: owned(b),
        after: owned(a),
        delta,
    })
}

fn signed(x: f64) -> String {
    if x >= 0.0 {
        format!("+{x:.2}")
    } else {
        format!("{x:.2}")
    }
}

impl DeltaTable {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let names: Vec<&str> = self.before.iter().map(|(k, _)| k.as_str()).collect();
        writeln!(out, "method,{}", names.join(","))?;
        let row = |v: &[(String, f64)]| -> Vec<String> {
            v.iter().map(|(_, x)| format!("{x:.2}")).collect()
        };
        writeln!(out, "baseline,{}", row(&self.before).join(","))?;
        writeln!(out, "mhsa,{}", row(&self.after).join(","))?;
        let d: Vec<String> = self.delta.iter().map(|(_, x)| signed(*x)).collect();
        writeln!(out, "delta,{}", d.join(","))?;
        Ok(())
    }

    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}", "Method");
        for (k, _) in &self.before {
            let _ = write!(s, "{k:>9}");
        }
        s.push('\n');
        let mut line = |name: &str, cells: Vec<String>| {
            let _ = write!(s, "{name:<10}");
            for c in cells {
                let _ = write!(s, "{c:>9}");
            }
            s.push('\n');
        };
        line(
            "Baseline",
            self.before.iter().map(|(_, x)| format!("{x:.2}")).collect(),
        );
        line(
            "MHSA",
            self.after.iter().map(|(_, x)| format!("{x:.2}")).collect(),
        );
        line("Δ", self.delta.iter().map(|(_, x)| signed(*x)).collect());
        s
    }
}
