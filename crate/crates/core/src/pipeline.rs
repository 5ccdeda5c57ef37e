//! Detect-then-correct inference with per-phase timing.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionTensor, AttentionTrace};
use crate::detector::detect;
use crate::error::{MhsaError, Result};
use crate::sample::Answer;
use crate::steering::{correct, Correction};
use crate::surrogate::SurrogateHead;
use crate::tinynet::DenseNet;

/// Generator, detector and answer head evaluated together.
#[derive(Debug, Clone, Copy)]
pub struct Bundle<'a> {
    pub generator: &'a DenseNet,
    pub detector: &'a DenseNet,
    pub head: &'a SurrogateHead,
}

/// Milliseconds spent in each inference phase. Phases that did not run are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub forward_ms: f64,
    pub detect_ms: f64,
    pub correct_ms: f64,
    pub reforward_ms: f64,
}

impl PhaseTimings {
    pub fn total_ms(&self) -> f64 {
        self.forward_ms + self.detect_ms + self.correct_ms + self.reforward_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: u64,
    pub was_flagged: bool,
    pub answer_before: Answer,
    pub answer_after: Answer,
    pub gt_answer: Option<Answer>,
    /// Answer forward alone, as the uncorrected model would run.
    pub latency_plain_ms: f64,
    pub latency_total_ms: f64,
    pub phases: PhaseTimings,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn answer_of(head: &SurrogateHead, x: &[f64]) -> Result<Answer> {
    Ok(match head.argmax_flat(x)? {
        Some(k) => head.labels()[k].parse()?,
        None => Answer::Invalid,
    })
}

/// Answers from `a`, and if the detector flags it, answers again from `A + G(A)`.
/// With `enable_correction == false` the detector still runs but nothing is corrected.
pub fn infer_discriminative(
    bundle: Bundle<'_>,
    sample_id: u64,
    a: &AttentionTensor,
    gt_answer: Option<Answer>,
    enable_correction: bool,
) -> Result<(EvalRecord, Option<Correction>)> {
    a.check_shape(bundle.head.shape())?;
    let mut phases = PhaseTimings::default();

    let t = Instant::now();
    let answer_before = answer_of(bundle.head, &a.flatten())?;
    phases.forward_ms = elapsed_ms(t);

    let t = Instant::now();
    let was_flagged = detect(bundle.detector, a)?.is_hallucination();
    phases.detect_ms = elapsed_ms(t);

    let mut answer_after = answer_before;
    let mut correction = None;
    if was_flagged && enable_correction {
        let t = Instant::now();
        let c = correct(bundle.generator, a)?;
        phases.correct_ms = elapsed_ms(t);

        let t = Instant::now();
        answer_after = answer_of(bundle.head, &c.corrected.flatten())?;
        phases.reforward_ms = elapsed_ms(t);
        correction = Some(c);
    }
    let record = EvalRecord {
        sample_id,
        was_flagged,
        answer_before,
        answer_after,
        gt_answer,
        latency_plain_ms: phases.forward_ms,
        latency_total_ms: phases.total_ms(),
        phases,
    };
    Ok((record, correction))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub sample_id: u64,
    pub tokens_before: Vec<String>,
    pub tokens_after: Vec<String>,
    /// Per token: whether the detector flagged it and a correction fired.
    pub flags: Vec<bool>,
    pub gt_objects: BTreeSet<String>,
}

/// A decoded caption with the attention of every step.
#[derive(Debug, Clone)]
pub struct Caption<'a> {
    pub sample_id: u64,
    pub tokens: &'a [String],
    pub trace: &'a AttentionTrace,
    pub gt_objects: &'a BTreeSet<String>,
}

/// Token-level correction over a decoded caption. Only steps whose token is a
/// whitelist noun are screened; a flagged step is re-decoded greedily from the
/// corrected attention. `bundle.head` is the caption head.
pub fn infer_generative(
    bundle: Bundle<'_>,
    whitelist: &BTreeSet<String>,
    caption: &Caption<'_>,
    enable_correction: bool,
) -> Result<CaptionRecord> {
    let Caption {
        sample_id,
        tokens,
        trace,
        gt_objects,
    } = *caption;
    if tokens.len() != trace.len() {
        return Err(MhsaError::shape(
            format!("{} attention steps", tokens.len()),
            format!("{} steps", trace.len()),
        ));
    }
    trace.steps()[0].check_shape(bundle.head.shape())?;
    let mut tokens_after = tokens.to_vec();
    let mut flags = vec![false; tokens.len()];
    if enable_correction {
        for (m, (token, a)) in tokens.iter().zip(trace.steps()).enumerate() {
            if !whitelist.contains(&token.to_lowercase()) {
                continue;
            }
            if !detect(bundle.detector, a)?.is_hallucination() {
                continue;
            }
            let c = correct(bundle.generator, a)?;
            flags[m] = true;
            if let Some(k) = bundle.head.argmax_flat(&c.corrected.flatten())? {
                tokens_after[m] = bundle.head.labels()[k].clone();
            }
        }
    }
    Ok(CaptionRecord {
        sample_id,
        tokens_before: tokens.to_vec(),
        tokens_after,
        flags,
        gt_objects: gt_objects.clone(),
    })
}

/// `p · mean_flagged + (1 − p) · mean_nonflagged`.
pub fn amortized_mean(p_flagged: f64, mean_flagged: f64, mean_nonflagged: f64) -> f64 {
    p_flagged * mean_flagged + (1.0 - p_flagged) * mean_nonflagged
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyGroup {
    pub count: usize,
    pub ratio: f64,
    pub mean_ms: f64,
    pub median_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p_flagged: f64,
    pub nonflagged: LatencyGroup,
    pub flagged: LatencyGroup,
    pub overall: LatencyGroup,
    pub baseline_mean_ms: f64,
    /// `overall / baseline − 1`.
    pub overhead: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len() / 2;
    if s.len() % 2 == 1 {
        s[k]
    } else {
        (s[k - 1] + s[k]) / 2.0
    }
}

fn group(v: &[f64], total: usize) -> LatencyGroup {
    LatencyGroup {
        count: v.len(),
        ratio: v.len() as f64 / total as f64,
        mean_ms: mean(v),
        median_ms: median(v),
    }
}

pub fn bench_latency(records: &[EvalRecord]) -> Result<LatencySummary> {
    if records.is_empty() {
        return Err(MhsaError::DegenerateDataset("no eval records".into()));
    }
    let n = records.len();
    let (flagged, nonflagged): (Vec<&EvalRecord>, Vec<&EvalRecord>) =
        records.iter().partition(|r| r.was_flagged);
    let totals =
        |rs: &[&EvalRecord]| -> Vec<f64> { rs.iter().map(|r| r.latency_total_ms).collect() };
    let all: Vec<f64> = records.iter().map(|r| r.latency_total_ms).collect();
    let plain: Vec<f64> = records.iter().map(|r| r.latency_plain_ms).collect();
    let flagged = group(&totals(&flagged), n);
    let nonflagged = group(&totals(&nonflagged), n);
    let p_flagged = flagged.ratio;
    let overall = LatencyGroup {
        count: n,
        ratio: 1.0,
        mean_ms: amortized_mean(p_flagged, flagged.mean_ms, nonflagged.mean_ms),
        median_ms: median(&all),
    };
    let baseline_mean_ms = mean(&plain);
    let overhead = if baseline_mean_ms > 0.0 {
        overall.mean_ms / baseline_mean_ms - 1.0
    } else {
        0.0
    };
    Ok(LatencySummary {
        p_flagged,
        nonflagged,
        flagged,
        overall,
        baseline_mean_ms,
        overhead,
    })
}

pub const BREAKDOWN_HEADER: &str = "sample_type,ratio,avg_ms,median_ms";

/// Per-status latency table: non-flagged, flagged, all.
pub fn write_latency_breakdown<W: Write>(mut out: W, s: &LatencySummary) -> Result<()> {
    writeln!(out, "{BREAKDOWN_HEADER}")?;
    for (name, g) in [
        ("non_halluc_no_correction", s.nonflagged),
        ("halluc_corrected", s.flagged),
        ("all", s.overall),
    ] {
        writeln!(
            out,
            "{name},{:.4},{:.4},{:.4}",
            g.ratio, g.mean_ms, g.median_ms
        )?;
    }
    Ok(())
}

/// Baseline against corrected pipeline: mean latency and throughput.
pub fn write_latency_overall<W: Write>(mut out: W, s: &LatencySummary) -> Result<()> {
    let throughput = |ms: f64| if ms > 0.0 { 1e3 / ms } else { 0.0 };
    let (tb, tm) = (
        throughput(s.baseline_mean_ms),
        throughput(s.overall.mean_ms),
    );
    let ratio = if tb > 0.0 { tm / tb - 1.0 } else { 0.0 };
    writeln!(out, "metric,baseline,mhsa,delta")?;
    writeln!(
        out,
        "avg_latency_ms,{:.4},{:.4},{:.4}",
        s.baseline_mean_ms, s.overall.mean_ms, s.overhead
    )?;
    writeln!(out, "throughput_per_s,{tb:.4},{tm:.4},{ratio:.4}")?;
    Ok(())
}

/// One JSON object per line.
pub fn write_jsonl<W: Write, T: Serialize>(mut out: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
