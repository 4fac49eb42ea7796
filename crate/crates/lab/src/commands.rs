//! The experiment commands behind the `readlab` binary.
//!
//! Every command checks its inputs, writes `manifest.json` into its output
//! directory and only then computes. Outputs are pure functions of the
//! manifest and the input files.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use read_core::eval::{rank_items, RankingResult};
use read_core::models::{pretrain_decoder, ModelDims, PretrainReport};
use read_core::tensor::ParamStore;
use read_core::train::{prepare_dataset, run_training, Checkpoint, EpochMetrics, EvalSuites};
use read_core::world::{build_benchmark, split_scenes, BenchmarkItem, Dataset, SuiteKind};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, load_checkpoint, load_decoder, save_checkpoint, save_decoder};
use crate::config::LabConfig;
use crate::error::{LabError, Result};
use crate::formats::{read_dataset, read_suite, write_dataset, write_suite};
use crate::manifest::{Manifest, FORMAT_VERSION};
use crate::metrics::{metrics_line, read_metrics, summary_rows, write_csv, write_metrics, write_rankings, SummaryRow};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const DECODER_FILE: &str = "decoder.ckpt";
pub const PRETRAIN_REPORT_FILE: &str = "pretrain_report.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ANALYSIS_FILE: &str = "analysis.csv";

pub fn suite_file(kind: SuiteKind) -> String {
    format!("suite_{}.jsonl", kind.as_str())
}

pub fn rankings_file(kind: SuiteKind) -> String {
    format!("rankings_{}.jsonl", kind.as_str())
}

/// Creates `out`, refusing a non-empty directory unless `force` is set.
pub fn prepare_out(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .map_err(|e| LabError::io(out, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(LabError::Config(format!(
                "output directory {} exists; pass --force to overwrite",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| LabError::io(out, e))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(LabError::Missing(path.to_path_buf()))
    }
}

/// Dataset-shaping settings recorded by `gen`.
pub const DATA_KEYS: [&str; 4] = ["train_scenes", "held_out_scenes", "num_paraphrases", "noise_fraction"];

/// Takes the dataset-shaping keys from the data manifest. Keys listed in
/// `explicit` must agree with it.
pub fn inherit_data_keys(cfg: &mut LabConfig, data: &Path, explicit: &[String]) -> Result<()> {
    let m = Manifest::read(data)?;
    let current: std::collections::BTreeMap<_, _> = cfg.to_pairs().into_iter().collect();
    for k in DATA_KEYS {
        let Some(v) = m.config.get(k) else { continue };
        if explicit.iter().any(|e| e == k) && current.get(k) != Some(v) {
            return Err(LabError::Config(format!(
                "{k} = {} conflicts with the dataset in {} ({k} = {v})",
                current[k],
                data.display()
            )));
        }
        cfg.set(k, v)?;
    }
    Ok(())
}

pub fn cmd_gen(cfg: &LabConfig, out: &Path, suites: &[SuiteKind], force: bool) -> Result<()> {
    cfg.validate()?;
    prepare_out(out, force)?;
    Manifest::new("gen", cfg, out).write(out)?;
    let t = &cfg.train;
    let (train, held) = split_scenes(cfg.train_scenes, cfg.held_out_scenes, t.seed)?;
    let dataset = prepare_dataset(&train, t.num_paraphrases, t.noise_fraction, t.seed)?;
    write_dataset(&out.join(TRAIN_FILE), &dataset)?;
    for kind in suites {
        let items = build_benchmark(*kind, &held, t.seed)?;
        write_suite(&out.join(suite_file(*kind)), &items)?;
    }
    Ok(())
}

pub fn load_suites(data: &Path) -> Result<EvalSuites> {
    let get = |k| read_suite(&data.join(suite_file(k)));
    Ok(EvalSuites {
        swap: get(SuiteKind::Swap)?,
        replace: get(SuiteKind::Replace)?,
        paraphrase: get(SuiteKind::Paraphrase)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub epochs: usize,
    pub train_nll: Vec<f64>,
    pub held_out_perplexity: Vec<f64>,
    pub branching: f64,
    pub memory_win_rate: f64,
    pub train_size: usize,
    pub held_out_size: usize,
}

impl From<&PretrainReport> for PretrainSummary {
    fn from(r: &PretrainReport) -> Self {
        Self {
            epochs: r.held_out_perplexity.len(),
            train_nll: r.train_nll.clone(),
            held_out_perplexity: r.held_out_perplexity.clone(),
            branching: r.branching,
            memory_win_rate: r.memory_win_rate,
            train_size: r.train_size,
            held_out_size: r.held_out_size,
        }
    }
}

pub fn cmd_pretrain(cfg: &LabConfig, data: &Path, out: &Path, force: bool) -> Result<PretrainSummary> {
    cfg.validate()?;
    let train_file = data.join(TRAIN_FILE);
    require(&train_file)?;
    prepare_out(out, force)?;
    let mut m = Manifest::new("pretrain-decoder", cfg, out);
    m.add_input("dataset", &train_file)?;
    m.write(out)?;
    let dataset = read_dataset(&train_file)?;
    let dims = ModelDims::default();
    let (store, report) = pretrain_decoder(&dataset.caption_corpus(), &dims, &cfg.pretrain())?;
    save_decoder(&out.join(DECODER_FILE), &store, &dims)?;
    let summary = PretrainSummary::from(&report);
    let path = out.join(PRETRAIN_REPORT_FILE);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| LabError::format(&path, e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| LabError::io(&path, e))?;
    Ok(summary)
}

/// Inputs shared by `train` and `ablate`.
pub struct TrainInputs {
    pub dataset: Dataset,
    pub suites: EvalSuites,
    pub decoder: ParamStore,
    pub dims: ModelDims,
}

pub fn load_train_inputs(data: &Path, decoder: &Path) -> Result<TrainInputs> {
    let train_file = data.join(TRAIN_FILE);
    require(&train_file)?;
    for k in SuiteKind::ALL {
        require(&data.join(suite_file(k)))?;
    }
    require(decoder)?;
    let (store, dims) = load_decoder(decoder)?;
    Ok(TrainInputs {
        dataset: read_dataset(&train_file)?,
        suites: load_suites(data)?,
        decoder: store,
        dims,
    })
}

fn record_inputs(m: &mut Manifest, data: &Path, decoder: &Path) -> Result<()> {
    m.add_input("dataset", &data.join(TRAIN_FILE))?;
    for k in SuiteKind::ALL {
        m.add_input(&format!("suite_{}", k.as_str()), &data.join(suite_file(k)))?;
    }
    m.add_input("decoder", decoder)
}

fn append(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| LabError::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| LabError::io(path, e))
}

/// One training run into `out`: `metrics.jsonl` grows by a line per epoch
/// and `checkpoint.ckpt` always holds the latest epoch.
pub fn train_into(cfg: &LabConfig, inputs: &TrainInputs, out: &Path, resume: Option<Checkpoint>) -> Result<Vec<EpochMetrics>> {
    let metrics = out.join(METRICS_FILE);
    let ckpt = out.join(CHECKPOINT_FILE);
    let mut history: Vec<EpochMetrics> = match &resume {
        Some(ck) if metrics.exists() => read_metrics(&metrics)?.into_iter().take(ck.epoch).collect(),
        _ => Vec::new(),
    };
    write_metrics(&metrics, &history)?;
    let mut failure = None;
    let outcome = run_training(
        &cfg.train,
        inputs.dims,
        &inputs.dataset,
        &inputs.decoder,
        &inputs.suites,
        resume,
        |m, ck| {
            let r = append(&metrics, &metrics_line(m)).and_then(|_| save_checkpoint(&ckpt, ck));
            r.map_err(|e| {
                let msg = e.to_string();
                failure = Some(e);
                read_core::Error::Invalid(msg)
            })
        },
    );
    if let Some(e) = failure {
        return Err(e);
    }
    history.extend(outcome?.history);
    Ok(history)
}

pub fn cmd_train(
    cfg: &LabConfig,
    data: &Path,
    decoder: &Path,
    out: &Path,
    resume: Option<&Path>,
    force: bool,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    let inputs = load_train_inputs(data, decoder)?;
    let resume = resume.map(load_checkpoint).transpose()?;
    prepare_out(out, force || resume.is_some())?;
    let mut m = Manifest::new("train", cfg, out);
    record_inputs(&mut m, data, decoder)?;
    m.write(out)?;
    train_into(cfg, &inputs, out, resume)
}

/// Row `r` (1-based) of the ablation grid: which of reconstruction and
/// alignment are switched on.
pub fn ablation_weights(row: usize, alpha: f64, beta: f64) -> (f64, f64) {
    match row {
        1 => (0.0, 0.0),
        2 => (alpha, 0.0),
        3 => (0.0, beta),
        _ => (alpha, beta),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub alpha: f64,
    pub beta: f64,
    /// Seed, or `mean` for the per-row average.
    pub seed: String,
    pub epoch: usize,
    pub acc_swap: f64,
    pub acc_replace: f64,
    pub acc_itt: f64,
    pub acc_tot: f64,
    pub acc_avg: f64,
    pub sim_pos_pos: f64,
    pub sim_pos_neg: f64,
}

pub fn run_dir(out: &Path, row: usize, seed: u64) -> PathBuf {
    out.join(format!("row{row}_seed{seed}"))
}

/// Runs `jobs` closures at a time over `0..n`, returning results in index order.
pub fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("threads joined")
        .into_iter()
        .map(|r| r.expect("every index ran"))
        .collect()
}

pub fn cmd_ablate(cfg: &LabConfig, data: &Path, decoder: &Path, out: &Path, jobs: usize, force: bool) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if !(cfg.train.alpha > 0.0 && cfg.train.beta > 0.0) {
        return Err(LabError::Config("ablation needs alpha > 0 and beta > 0".into()));
    }
    let inputs = load_train_inputs(data, decoder)?;
    prepare_out(out, force)?;
    let mut m = Manifest::new("ablate", cfg, out);
    record_inputs(&mut m, data, decoder)?;
    m.write(out)?;
    let seeds: Vec<u64> = (0..cfg.ablation_seeds as u64).map(|s| cfg.train.seed + s).collect();
    let runs: Vec<(usize, u64)> = (1..=4).flat_map(|r| seeds.iter().map(move |s| (r, *s))).collect();
    let finals = parallel_map(runs.len(), jobs, |i| {
        let (row, seed) = runs[i];
        let mut c = cfg.clone();
        (c.train.alpha, c.train.beta) = ablation_weights(row, cfg.train.alpha, cfg.train.beta);
        c.train.seed = seed;
        let dir = run_dir(out, row, seed);
        prepare_out(&dir, true)?;
        Manifest::new("train", &c, &dir).write(&dir)?;
        let history = train_into(&c, &inputs, &dir, None)?;
        history
            .last()
            .copied()
            .ok_or_else(|| LabError::Numeric("run produced no epochs".into()))
    })?;
    let mut rows = Vec::new();
    for row in 1..=4 {
        let (alpha, beta) = ablation_weights(row, cfg.train.alpha, cfg.train.beta);
        let mine: Vec<(u64, EpochMetrics)> = runs
            .iter()
            .zip(&finals)
            .filter(|((r, _), _)| *r == row)
            .map(|((_, s), m)| (*s, *m))
            .collect();
        for (seed, f) in &mine {
            rows.push(ablation_row(row, alpha, beta, seed.to_string(), f));
        }
        let n = mine.len() as f64;
        let mut mean = [0.0; 11];
        for (_, f) in &mine {
            for (a, v) in mean.iter_mut().zip(f.values()) {
                *a += v / n;
            }
        }
        let epoch = mine.first().map_or(0, |(_, f)| f.epoch);
        rows.push(ablation_row(row, alpha, beta, "mean".into(), &EpochMetrics::from_values(epoch, mean)));
    }
    write_csv(&out.join(ABLATION_FILE), &rows)?;
    Ok(rows)
}

fn ablation_row(row: usize, alpha: f64, beta: f64, seed: String, f: &EpochMetrics) -> AblationRow {
    AblationRow {
        row,
        alpha,
        beta,
        seed,
        epoch: f.epoch,
        acc_swap: f.acc_swap,
        acc_replace: f.acc_replace,
        acc_itt: f.acc_itt,
        acc_tot: f.acc_tot,
        acc_avg: (f.acc_swap + f.acc_replace + f.acc_itt + f.acc_tot) / 4.0,
        sim_pos_pos: f.sim_pos_pos,
        sim_pos_neg: f.sim_pos_neg,
    }
}

/// Rejects suite files written under a different format or vocabulary.
pub fn check_compatible(data: &Path, header: &checkpoint::Header) -> Result<()> {
    let m = Manifest::read(data)?;
    if m.format_version != FORMAT_VERSION || header.version != FORMAT_VERSION {
        return Err(LabError::Config(format!(
            "version mismatch: suites v{}, checkpoint v{}, tool v{FORMAT_VERSION}",
            m.format_version, header.version
        )));
    }
    if m.text_vocab != header.dims.text_vocab || m.image_vocab != header.dims.image_vocab {
        return Err(LabError::Config(format!(
            "vocabulary mismatch: suites ({}, {}), checkpoint ({}, {})",
            m.text_vocab, m.image_vocab, header.dims.text_vocab, header.dims.image_vocab
        )));
    }
    Ok(())
}

pub fn cmd_eval(
    cfg: &LabConfig,
    ckpt: &Path,
    data: &Path,
    suites: &[SuiteKind],
    out: &Path,
    force: bool,
) -> Result<Vec<SummaryRow>> {
    require(ckpt)?;
    let files: Vec<(SuiteKind, PathBuf)> = suites.iter().map(|k| (*k, data.join(suite_file(*k)))).collect();
    for (_, f) in &files {
        require(f)?;
    }
    let header = checkpoint::peek_header(ckpt)?;
    check_compatible(data, &header)?;
    prepare_out(out, force)?;
    let mut m = Manifest::new("eval", cfg, out);
    m.add_input("checkpoint", ckpt)?;
    for (k, f) in &files {
        m.add_input(&format!("suite_{}", k.as_str()), f)?;
    }
    m.write(out)?;
    let ck = load_checkpoint(ckpt)?;
    let mut rows = Vec::new();
    for (k, f) in &files {
        let items: Vec<BenchmarkItem> = read_suite(f)?;
        let results: Vec<RankingResult> = rank_items(&ck.bundle, &items)?;
        write_rankings(&out.join(rankings_file(*k)), &results)?;
        rows.extend(summary_rows(ck.epoch, k.as_str(), &results));
    }
    write_csv(&out.join(SUMMARY_FILE), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub run: String,
    pub recon_target: String,
    pub alpha: f64,
    pub beta: f64,
    pub epoch: usize,
    pub sim_pos_pos: f64,
    pub sim_pos_neg: f64,
    pub acc_tot: f64,
}

/// Joins the per-epoch similarity traces of finished runs.
pub fn cmd_analyze(runs: &[PathBuf], out: &Path, force: bool) -> Result<Vec<AnalysisRow>> {
    if runs.is_empty() {
        return Err(LabError::Config("analyze needs at least one run directory".into()));
    }
    for r in runs {
        require(&r.join(METRICS_FILE))?;
        require(&r.join(crate::manifest::MANIFEST_FILE))?;
    }
    prepare_out(out, force)?;
    let mut m = Manifest::new("analyze", &LabConfig::default(), out);
    for (i, r) in runs.iter().enumerate() {
        m.add_input(&format!("run{i}"), &r.join(METRICS_FILE))?;
    }
    m.write(out)?;
    let mut rows = Vec::new();
    for r in runs {
        let cfg = Manifest::read(r)?.lab_config()?;
        for e in read_metrics(&r.join(METRICS_FILE))? {
            rows.push(AnalysisRow {
                run: r.display().to_string(),
                recon_target: cfg.train.recon_target.as_str().into(),
                alpha: cfg.train.alpha,
                beta: cfg.train.beta,
                epoch: e.epoch,
                sim_pos_pos: e.sim_pos_pos,
                sim_pos_neg: e.sim_pos_neg,
                acc_tot: e.acc_tot,
            });
        }
    }
    write_csv(&out.join(ANALYSIS_FILE), &rows)?;
    Ok(rows)
}
