use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use mhsa_core::analysis::{
    aggregate_stats, correction_stats_batch, write_head_heatmap, write_layer_stats,
};
use mhsa_core::attention::{AttentionShape, AttentionTrace};
use mhsa_core::detector::{accuracy, pretrain_detector, PretrainConfig};
use mhsa_core::eval::{chair_metrics, compare, pope_metrics, DeltaTable, Metrics};
use mhsa_core::pipeline::{
    bench_latency, infer_discriminative, infer_generative, read_jsonl, write_jsonl,
    write_latency_breakdown, write_latency_overall, Bundle, Caption, EvalRecord,
};
use mhsa_core::sample::LabeledSample;
use mhsa_core::steering::{
    class_counts, oversample, split_by_question, train_mhsa, write_train_log, TrainConfig,
    TrainMode,
};
use mhsa_core::store::{load_store, save_store, StoreRecord, UNLABELED};
use mhsa_core::surrogate::{
    label_caption_tokens, sample_rng, Surrogate, SurrogateConfig, TokenLabel, DEFAULT_WHITELIST,
};
use mhsa_core::tinynet::{checkpoint, init_generator, DenseNet};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::manifest::ManifestBuilder;
use crate::{
    AnalyzeArgs, BenchArgs, DataMode, EvalCaptionArgs, EvalPopeArgs, GenDataArgs, PretrainArgs,
    SplitArgs, TrainArgs, UsageError,
};

/// Caption token records carry `scene << TOKEN_BITS | position` as sample id.
pub const TOKEN_BITS: u32 = 16;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!(
            "input file {} does not exist",
            path.display()
        )))
    }
}

fn require_checkpoint(stem: &Path) -> Result<()> {
    require_file(&stem.with_extension("manifest"))?;
    require_file(&stem.with_extension("bin"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    f(&mut out)?;
    out.flush()?;
    Ok(())
}

fn read_whitelist(path: Option<&Path>) -> Result<Vec<String>> {
    match path {
        None => Ok(DEFAULT_WHITELIST.iter().map(|s| s.to_string()).collect()),
        Some(p) => {
            require_file(p)?;
            let words: Vec<String> = fs::read_to_string(p)?
                .lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect();
            if words.is_empty() {
                return Err(usage(format!("whitelist {} is empty", p.display())));
            }
            Ok(words)
        }
    }
}

fn surrogate(shape: AttentionShape, whitelist: &[String]) -> Result<Surrogate> {
    Ok(Surrogate::new(
        shape,
        SurrogateConfig::default(),
        whitelist,
    )?)
}

fn question_id(sample_id: u64, mode: DataMode) -> u64 {
    match mode {
        DataMode::Disc => sample_id,
        DataMode::Caption => sample_id >> TOKEN_BITS,
    }
}

/// Labeled samples of a store; caption tokens without a label are skipped.
fn load_samples(path: &Path, mode: DataMode) -> Result<(AttentionShape, Vec<LabeledSample>)> {
    require_file(path)?;
    let (shape, records) = load_store(path)?;
    let samples = records
        .into_iter()
        .filter(|r| r.class().is_some())
        .map(|r| {
            let gt = r.gt();
            let qid = question_id(r.sample_id, mode);
            LabeledSample::new(r.sample_id, r.attention, r.class4, gt, Some(qid))
        })
        .collect::<mhsa_core::Result<Vec<_>>>()?;
    Ok((shape, samples))
}

fn training_split(
    samples: Vec<LabeledSample>,
    split: &SplitArgs,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if split.no_split {
        return Ok((samples, Vec::new()));
    }
    Ok(split_by_question(
        &samples,
        split.split_ratio,
        split.split_seed,
    )?)
}

fn class_table(counts: [usize; 4]) -> String {
    let total: usize = counts.iter().sum();
    format!(
        "{:>8} {:>8} {:>8} {:>8} {:>8}\n{:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "Cls 0",
        "Cls 1",
        "Cls 2",
        "Cls 3",
        "Total",
        counts[0],
        counts[1],
        counts[2],
        counts[3],
        total
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneLine {
    pub sample_id: u64,
    pub present_objects: BTreeSet<String>,
    pub distractor_objects: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queried: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class4: Option<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_labels: Vec<TokenLabel>,
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let shape = AttentionShape::parse(&a.shape).map_err(|e| usage(e.to_string()))?;
    if !(0.0..=1.0).contains(&a.halluc_rate) {
        return Err(usage("--halluc-rate must lie in [0, 1]"));
    }
    if a.count == 0 {
        return Err(usage("--count must be positive"));
    }
    if a.mode == DataMode::Caption && (a.caption_length == 0 || a.caption_length >= 1 << TOKEN_BITS)
    {
        return Err(usage("--caption-length must lie in [1, 65535]"));
    }
    let whitelist = read_whitelist(a.whitelist.as_deref())?;
    let s = surrogate(shape, &whitelist)?;
    create_dir(&a.out_dir)?;
    let ids: Vec<u64> = (a.start_id..a.start_id + a.count as u64).collect();

    let per_id: Vec<(Vec<StoreRecord>, SceneLine)> = ids
        .par_iter()
        .map(|&id| -> mhsa_core::Result<_> {
            let mut rng = sample_rng(a.seed, id);
            match a.mode {
                DataMode::Disc => {
                    let present = rng.random_bool(0.5);
                    let hallucinate = rng.random_bool(a.halluc_rate);
                    let (scene, queried) = s.pope_scene(&mut rng, id, present);
                    let sample =
                        s.sample_discriminative(&mut rng, &scene, &queried, hallucinate)?;
                    let line = SceneLine {
                        sample_id: id,
                        present_objects: scene.present_objects,
                        distractor_objects: scene.distractor_objects,
                        queried: Some(queried),
                        gt_answer: sample.gt_answer.map(|g| g.to_string()),
                        class4: Some(sample.class4),
                        tokens: Vec::new(),
                        token_labels: Vec::new(),
                    };
                    Ok((vec![StoreRecord::from(&sample)], line))
                }
                DataMode::Caption => {
                    let scene = s.caption_scene(&mut rng, id);
                    let (tokens, trace) = s.generate_caption_trace(
                        &mut rng,
                        &scene,
                        a.caption_length,
                        a.halluc_rate,
                    )?;
                    let wl: BTreeSet<String> = whitelist.iter().cloned().collect();
                    let labels = label_caption_tokens(&tokens, &wl, &scene.present_objects);
                    let records = trace
                        .into_steps()
                        .into_iter()
                        .zip(&labels)
                        .enumerate()
                        .map(|(m, (attention, label))| {
                            let coin = u8::from(rng.random_bool(0.5));
                            let class4 = match label {
                                TokenLabel::NonHalluc => coin,
                                TokenLabel::Halluc => 2 + coin,
                                TokenLabel::NotApplicable => UNLABELED,
                            };
                            StoreRecord {
                                sample_id: id << TOKEN_BITS | m as u64,
                                class4,
                                gt_answer: UNLABELED,
                                attention,
                            }
                        })
                        .collect();
                    let line = SceneLine {
                        sample_id: id,
                        present_objects: scene.present_objects,
                        distractor_objects: scene.distractor_objects,
                        queried: None,
                        gt_answer: None,
                        class4: None,
                        tokens,
                        token_labels: labels,
                    };
                    Ok((records, line))
                }
            }
        })
        .collect::<mhsa_core::Result<_>>()?;

    let mut records = Vec::new();
    let mut lines = Vec::new();
    for (r, l) in per_id {
        records.extend(r);
        lines.push(l);
    }
    let store_path = a.out_dir.join("samples.attnstore");
    let scenes_path = a.out_dir.join("scenes.jsonl");
    let whitelist_path = a.out_dir.join("whitelist.txt");
    save_store(&store_path, shape, &records)?;
    write_with(&scenes_path, |out| Ok(write_jsonl(out, &lines)?))?;
    fs::write(&whitelist_path, whitelist.join("\n") + "\n")?;

    let mut counts = [0usize; 4];
    for r in &records {
        if let Some(c) = r.class() {
            counts[usize::from(c)] += 1;
        }
    }
    print!("{}", class_table(counts));
    println!("shape {shape}, {} records", records.len());

    ManifestBuilder::new("gen-data")
        .config("shape", shape)
        .config("count", a.count)
        .config("halluc_rate", a.halluc_rate)
        .config("mode", format!("{:?}", a.mode).to_lowercase())
        .config("start_id", a.start_id)
        .config("caption_length", a.caption_length)
        .seed(a.seed)
        .output(&store_path)
        .output(&scenes_path)
        .output(&whitelist_path)
        .write(&a.out_dir)?;
    Ok(())
}

fn pretrain_config(a: &PretrainArgs) -> PretrainConfig {
    PretrainConfig {
        hidden: a.hidden,
        lr: a.lr,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
    }
}

fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    write_with(path, |out| {
        writeln!(out, "step,loss")?;
        for (i, l) in losses.iter().enumerate() {
            writeln!(out, "{i},{l}")?;
        }
        Ok(())
    })
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    if a.batch_size == 0 || a.hidden == 0 {
        return Err(usage("--batch-size and --hidden must be positive"));
    }
    let (_, samples) = load_samples(&a.data, a.mode)?;
    let (train, val) = training_split(samples, &a.split)?;
    let cfg = pretrain_config(&a);
    let (net, losses) = pretrain_detector(&train, &cfg)?;
    println!("train accuracy {:.4}", accuracy(&net, &train)?);
    if !val.is_empty() {
        println!("val accuracy {:.4}", accuracy(&net, &val)?);
    }
    create_dir(&a.out_dir)?;
    let stem = a.out_dir.join("detector");
    checkpoint::save(&net, &stem, "detector", cfg.seed)?;
    let log_path = a.out_dir.join("pretrain_log.csv");
    write_losses(&log_path, &losses)?;
    ManifestBuilder::new("pretrain-detector")
        .config("hidden", cfg.hidden)
        .config("lr", cfg.lr)
        .config("weight_decay", cfg.weight_decay)
        .config("epochs", cfg.epochs)
        .config("batch_size", cfg.batch_size)
        .config("split_ratio", a.split.split_ratio)
        .config("split_seed", a.split.split_seed)
        .seed(cfg.seed)
        .input(&a.data)
        .output(stem.with_extension("manifest"))
        .output(stem.with_extension("bin"))
        .output(&log_path)
        .write(&a.out_dir)?;
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::preset(&a.preset)?;
    if let Some(path) = &a.config {
        require_file(path)?;
        cfg.apply_kv(&fs::read_to_string(path)?)?;
    }
    let overrides: [(&str, Option<String>); 11] = [
        ("lambda_dg", a.lambda_dg.map(|v| v.to_string())),
        ("lambda_reg", a.lambda_reg.map(|v| v.to_string())),
        ("lambda_lvlm", a.lambda_lvlm.map(|v| v.to_string())),
        ("lr_g", a.lr_g.map(|v| v.to_string())),
        ("lr_d", a.lr_d.map(|v| v.to_string())),
        ("weight_decay", a.weight_decay.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("hidden_g", a.hidden_g.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("mode", a.mode.clone()),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    if a.dg_on_all {
        cfg.dg_on_all = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let mode = match cfg.mode {
        TrainMode::Discriminative => DataMode::Disc,
        TrainMode::CaptionOffline => DataMode::Caption,
    };
    if let Some(stem) = &a.detector {
        require_checkpoint(stem)?;
    }
    let whitelist = read_whitelist(a.whitelist.as_deref())?;
    let (shape, samples) = load_samples(&a.data, mode)?;
    let (train_split, val) = training_split(samples, &a.split)?;

    let detector = match &a.detector {
        Some(stem) => checkpoint::load(stem)?.0,
        None => {
            log::info!("no detector given; pretraining on the training split");
            let pre = PretrainConfig {
                seed: cfg.seed,
                ..PretrainConfig::default()
            };
            pretrain_detector(&train_split, &pre)?.0
        }
    };
    let train_set = if a.no_oversample {
        train_split
    } else {
        oversample(&train_split, cfg.seed)
    };
    let counts = class_counts(&train_set);
    print!("{}", class_table(counts));

    let s = surrogate(shape, &whitelist)?;
    let head = (mode == DataMode::Disc).then(|| s.pope_head());
    let generator = init_generator(shape, cfg.hidden_g, cfg.seed)?;
    let outcome = train_mhsa(&generator, &detector, head, &train_set, &cfg)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "step {}: L_total {:.6} L_d {:.6} mean |dA| {:.6}",
            last.step, last.l_total, last.l_d, last.mean_delta_norm
        );
    }
    if !val.is_empty() {
        println!(
            "val detector accuracy {:.4}",
            accuracy(&outcome.detector, &val)?
        );
    }

    create_dir(&a.out_dir)?;
    let g_stem = a.out_dir.join("generator");
    let d_stem = a.out_dir.join("detector");
    checkpoint::save(&outcome.generator, &g_stem, "generator", cfg.seed)?;
    checkpoint::save(&outcome.detector, &d_stem, "detector", cfg.seed)?;
    let log_path = a.out_dir.join("train_log.csv");
    write_with(&log_path, |out| Ok(write_train_log(out, &outcome.log)?))?;
    let cfg_path = a.out_dir.join("config.txt");
    fs::write(&cfg_path, cfg.to_kv())?;

    let mut m = ManifestBuilder::new("train");
    for line in cfg.to_kv().lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            m.config(k, v);
        }
    }
    m.config("oversample", !a.no_oversample)
        .config("split_ratio", a.split.split_ratio)
        .config("split_seed", a.split.split_seed)
        .seed(cfg.seed)
        .input(&a.data);
    if let Some(stem) = &a.detector {
        m.input(stem.with_extension("bin"));
    }
    m.output(g_stem.with_extension("manifest"))
        .output(g_stem.with_extension("bin"))
        .output(d_stem.with_extension("manifest"))
        .output(d_stem.with_extension("bin"))
        .output(&log_path)
        .output(&cfg_path)
        .write(&a.out_dir)?;
    Ok(())
}

fn load_bundle(generator: &Path, detector: &Path) -> Result<(DenseNet, DenseNet)> {
    require_checkpoint(generator)?;
    require_checkpoint(detector)?;
    Ok((
        checkpoint::load(generator)?.0,
        checkpoint::load(detector)?.0,
    ))
}

fn write_tables(dir: &Path, table: &DeltaTable) -> Result<(PathBuf, PathBuf)> {
    let csv = dir.join("metrics.csv");
    let txt = dir.join("metrics.txt");
    write_with(&csv, |out| Ok(table.write_csv(out)?))?;
    fs::write(&txt, table.to_text())?;
    print!("{}", table.to_text());
    Ok((csv, txt))
}

pub fn eval_pope(a: EvalPopeArgs) -> Result<()> {
    let (g, d) = load_bundle(&a.generator, &a.detector)?;
    require_file(&a.data)?;
    let whitelist = read_whitelist(a.whitelist.as_deref())?;
    let (shape, records) = load_store(&a.data)?;
    let s = surrogate(shape, &whitelist)?;
    let bundle = Bundle {
        generator: &g,
        detector: &d,
        head: s.pope_head(),
    };
    let results = records
        .par_iter()
        .map(|r| infer_discriminative(bundle, r.sample_id, &r.attention, r.gt(), !a.no_correct))
        .collect::<mhsa_core::Result<Vec<_>>>()?;
    let eval: Vec<EvalRecord> = results.iter().map(|(r, _)| r.clone()).collect();
    let before = Metrics::Pope(pope_metrics(&eval, false)?);
    let after = Metrics::Pope(pope_metrics(&eval, true)?);
    let table = compare(&before, &after)?;

    create_dir(&a.out_dir)?;
    let flagged = eval.iter().filter(|r| r.was_flagged).count();
    println!("flagged {flagged} of {}", eval.len());
    let records_path = a.out_dir.join("records.jsonl");
    write_with(&records_path, |out| Ok(write_jsonl(out, &eval)?))?;
    let (csv, txt) = write_tables(&a.out_dir, &table)?;

    let mut m = ManifestBuilder::new("eval-pope");
    m.config("correct", !a.no_correct)
        .input(&a.data)
        .input(a.generator.with_extension("bin"))
        .input(a.detector.with_extension("bin"))
        .output(&records_path)
        .output(&csv)
        .output(&txt);
    if a.save_corrections {
        let corrected: Vec<StoreRecord> = records
            .iter()
            .zip(&results)
            .filter_map(|(r, (_, c))| {
                c.as_ref().map(|c| StoreRecord {
                    sample_id: r.sample_id,
                    class4: r.class4,
                    gt_answer: r.gt_answer,
                    attention: c.corrected.clone(),
                })
            })
            .collect();
        let path = a.out_dir.join("corrections.attnstore");
        save_store(&path, shape, &corrected)?;
        m.output(&path);
    }
    m.write(&a.out_dir)?;
    Ok(())
}

pub fn eval_caption(a: EvalCaptionArgs) -> Result<()> {
    let (g, d) = load_bundle(&a.generator, &a.detector)?;
    require_file(&a.data)?;
    require_file(&a.scenes)?;
    let whitelist = read_whitelist(a.whitelist.as_deref())?;
    let wl: BTreeSet<String> = whitelist.iter().cloned().collect();
    let (shape, records) = load_store(&a.data)?;
    let scenes: Vec<SceneLine> = read_jsonl(&fs::read_to_string(&a.scenes)?)?;

    let mut steps: BTreeMap<u64, Vec<(u64, StoreRecord)>> = BTreeMap::new();
    for r in records {
        steps
            .entry(r.sample_id >> TOKEN_BITS)
            .or_default()
            .push((r.sample_id & ((1 << TOKEN_BITS) - 1), r));
    }
    let s = surrogate(shape, &whitelist)?;
    let bundle = Bundle {
        generator: &g,
        detector: &d,
        head: s.caption_head(),
    };
    let captions = scenes
        .par_iter()
        .map(|scene| -> Result<_> {
            let mut recs = steps
                .get(&scene.sample_id)
                .cloned()
                .ok_or_else(|| anyhow!("scene {} has no attention records", scene.sample_id))?;
            recs.sort_by_key(|(m, _)| *m);
            let trace =
                AttentionTrace::new(shape, recs.into_iter().map(|(_, r)| r.attention).collect())?;
            let caption = Caption {
                sample_id: scene.sample_id,
                tokens: &scene.tokens,
                trace: &trace,
                gt_objects: &scene.present_objects,
            };
            Ok(infer_generative(bundle, &wl, &caption, !a.no_correct)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let before = Metrics::Chair(chair_metrics(&captions, &wl, false)?);
    let after = Metrics::Chair(chair_metrics(&captions, &wl, true)?);
    let table = compare(&before, &after)?;

    create_dir(&a.out_dir)?;
    let flagged: usize = captions
        .iter()
        .map(|c| c.flags.iter().filter(|&&f| f).count())
        .sum();
    println!(
        "corrected {flagged} tokens over {} captions",
        captions.len()
    );
    let out_path = a.out_dir.join("captions.jsonl");
    write_with(&out_path, |out| Ok(write_jsonl(out, &captions)?))?;
    let (csv, txt) = write_tables(&a.out_dir, &table)?;
    ManifestBuilder::new("eval-caption")
        .config("correct", !a.no_correct)
        .input(&a.data)
        .input(&a.scenes)
        .input(a.generator.with_extension("bin"))
        .input(a.detector.with_extension("bin"))
        .output(&out_path)
        .output(&csv)
        .output(&txt)
        .write(&a.out_dir)?;
    Ok(())
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    require_file(&a.data)?;
    require_file(&a.corrections)?;
    let (shape, originals) = load_store(&a.data)?;
    let (cshape, corrected) = load_store(&a.corrections)?;
    if shape != cshape {
        return Err(mhsa_core::MhsaError::Shape {
            expected: shape.to_string(),
            got: cshape.to_string(),
        }
        .into());
    }
    let by_id: HashMap<u64, &StoreRecord> = originals.iter().map(|r| (r.sample_id, r)).collect();
    let pairs = corrected
        .into_iter()
        .map(|c| {
            let a = by_id.get(&c.sample_id).ok_or_else(|| {
                anyhow!("corrected sample {} is not in the data store", c.sample_id)
            })?;
            Ok((a.attention.clone(), c.attention))
        })
        .collect::<Result<Vec<_>>>()?;
    let agg = if pairs.is_empty() {
        log::warn!("no corrected samples; writing header-only tables");
        None
    } else {
        Some(aggregate_stats(&correction_stats_batch(&pairs)?)?)
    };

    create_dir(&a.out_dir)?;
    let layer_path = a.out_dir.join("layer_stats.csv");
    let heat_path = a.out_dir.join("head_heatmap.csv");
    write_with(&layer_path, |out| Ok(write_layer_stats(out, agg.as_ref())?))?;
    write_with(&heat_path, |out| {
        Ok(write_head_heatmap(out, agg.as_ref(), shape.heads)?)
    })?;
    if let Some(agg) = &agg {
        println!(
            "{} corrected samples; most modified layers {:?}",
            agg.n, agg.top_layers
        );
    }
    ManifestBuilder::new("analyze")
        .input(&a.data)
        .input(&a.corrections)
        .output(&layer_path)
        .output(&heat_path)
        .write(&a.out_dir)?;
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    require_file(&a.records)?;
    let records: Vec<EvalRecord> = read_jsonl(&fs::read_to_string(&a.records)?)?;
    let s = bench_latency(&records)?;
    let direct = records.iter().map(|r| r.latency_total_ms).sum::<f64>() / records.len() as f64;
    create_dir(&a.out_dir)?;
    let breakdown = a.out_dir.join("latency_breakdown.csv");
    let overall = a.out_dir.join("latency_overall.csv");
    write_with(&breakdown, |out| Ok(write_latency_breakdown(out, &s)?))?;
    write_with(&overall, |out| Ok(write_latency_overall(out, &s)?))?;
    let mut stdout = std::io::stdout().lock();
    write_latency_overall(&mut stdout, &s)?;
    write_latency_breakdown(&mut stdout, &s)?;
    let rel = if direct > 0.0 {
        (s.overall.mean_ms - direct).abs() / direct
    } else {
        0.0
    };
    writeln!(
        stdout,
        "amortized mean {:.4} ms, direct mean {direct:.4} ms, relative gap {rel:.2e}",
        s.overall.mean_ms
    )?;
    ManifestBuilder::new("bench")
        .input(&a.records)
        .output(&breakdown)
        .output(&overall)
        .write(&a.out_dir)?;
    Ok(())
}
