//! Batch assembly, the optimization loop and resumable checkpoints.

mod batch;
mod config;
pub mod optim;

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use batch::{assemble_batch, prepare_dataset, sample_batch, BatchSample};
pub use config::{AlignSource, ReconTarget, TrainConfig, CONFIG_KEYS};
pub use optim::{clip_grad_norm, grad_norm, lr_schedule, AdamW};

use crate::error::{invalid, Error, Result};
use crate::eval::{rank_items, summarize, trace_from_results};
use crate::losses::{
    hard_negative_contrastive_loss, read_loss, sentence_alignment_loss, token_reconstruction_loss,
};
use crate::models::{ModelBundle, ModelDims};
use crate::tensor::{Graph, ParamStore, Var};
use crate::world::rng::{derive, seeded};
use crate::world::{build_benchmark, BenchmarkItem, Dataset, Scene, SuiteKind, TokenId};

/// Loss values of one step. Components with zero weight are still
/// evaluated and reported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub contrastive: f64,
    pub reconstruction: f64,
    pub alignment: f64,
    pub tau: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

struct Forward {
    total: Var,
    contrastive: Var,
    reconstruction: Var,
    alignment: Var,
}

fn forward(g: &mut Graph, bundle: &ModelBundle, batch: &BatchSample, cfg: &TrainConfig) -> Result<Forward> {
    let b = batch.len();
    if b < 2 {
        return Err(invalid("a batch needs at least two samples"));
    }
    let m = batch.negatives.first().map_or(0, |n| n.len());
    if batch.negatives.iter().any(|n| n.len() != m) {
        return Err(invalid("every caption needs the same number of hard negatives"));
    }
    let mut texts: Vec<&[TokenId]> = Vec::with_capacity(b * (m + 2));
    texts.extend(batch.captions.iter().map(|c| c.as_slice()));
    texts.extend(batch.negatives.iter().flatten().map(|c| c.as_slice()));
    texts.extend(batch.paraphrases.iter().map(|c| c.as_slice()));
    let t = bundle.encode_texts(g, &texts)?;
    let v = g.slice_rows(t, 0, b)?;
    let neg = if m > 0 { Some(g.slice_rows(t, b, b * m)?) } else { None };
    let para = g.slice_rows(t, b + b * m, b)?;
    let images: Vec<&[TokenId]> = batch.images.iter().map(|i| &i.tokens[..]).collect();
    let u = bundle.encode_images(g, &images)?;

    let inv_tau = bundle.inverse_tau(g)?;
    let contrastive = hard_negative_contrastive_loss(g, u, v, neg, inv_tau, cfg.symmetric_negatives)?;
    let h = bundle.project(g, v)?;
    let reconstruction = token_reconstruction_loss(g, &bundle.decoder, &bundle.store, h, &batch.targets)?;
    let align_inv_tau = bundle.align_inverse_tau(g)?;
    let alignment = sentence_alignment_loss(g, v, para, align_inv_tau)?;
    let total = read_loss(
        g,
        contrastive,
        (cfg.alpha > 0.0).then_some(reconstruction),
        (cfg.beta > 0.0).then_some(alignment),
        cfg.weights(),
    )?;
    Ok(Forward {
        total,
        contrastive,
        reconstruction,
        alignment,
    })
}

/// The weighted objective of a batch as a graph node.
pub fn objective(g: &mut Graph, bundle: &ModelBundle, batch: &BatchSample, cfg: &TrainConfig) -> Result<Var> {
    Ok(forward(g, bundle, batch, cfg)?.total)
}

/// Loss values of a batch without touching gradients or parameters.
pub fn evaluate_batch(bundle: &ModelBundle, batch: &BatchSample, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let f = forward(&mut g, bundle, batch, cfg)?;
    Ok(LossBreakdown {
        total: g.value(f.total).item(),
        contrastive: g.value(f.contrastive).item(),
        reconstruction: g.value(f.reconstruction).item(),
        alignment: g.value(f.alignment).item(),
        tau: bundle.tau(),
        grad_norm: 0.0,
    })
}

/// One clipped AdamW update of everything but the decoder. Weight decay
/// skips the temperature.
pub fn train_step(
    bundle: &mut ModelBundle,
    opt: &mut AdamW,
    batch: &BatchSample,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    if !bundle.decoder_frozen() {
        return Err(invalid("the decoder must be frozen before fine-tuning"));
    }
    bundle.store.zero_grad();
    let mut g = Graph::new();
    let f = forward(&mut g, bundle, batch, cfg)?;
    let mut report = LossBreakdown {
        total: g.value(f.total).item(),
        contrastive: g.value(f.contrastive).item(),
        reconstruction: g.value(f.reconstruction).item(),
        alignment: g.value(f.alignment).item(),
        tau: bundle.tau(),
        grad_norm: 0.0,
    };
    let non_finite = |r: &LossBreakdown| Error::NonFiniteLoss {
        contrastive: r.contrastive,
        reconstruction: r.reconstruction,
        alignment: r.alignment,
        tau: r.tau,
    };
    let values = [report.total, report.contrastive, report.reconstruction, report.alignment];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(non_finite(&report));
    }
    g.backward(f.total, &mut bundle.store)?;
    let ids = bundle.trainable();
    let decay: Vec<bool> = ids.iter().map(|id| !bundle.is_temperature(*id)).collect();
    report.grad_norm = clip_grad_norm(&mut bundle.store, &ids, cfg.clip);
    if !report.grad_norm.is_finite() {
        return Err(non_finite(&report));
    }
    opt.update(&mut bundle.store, &ids, &decay, lr);
    bundle.clamp_temperature();
    Ok(report)
}

/// Held-out suites scored after every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSuites {
    pub swap: Vec<BenchmarkItem>,
    pub replace: Vec<BenchmarkItem>,
    pub paraphrase: Vec<BenchmarkItem>,
}

impl EvalSuites {
    pub fn build(scenes: &[Scene], seed: u64) -> Result<Self> {
        Ok(Self {
            swap: build_benchmark(SuiteKind::Swap, scenes, seed)?,
            replace: build_benchmark(SuiteKind::Replace, scenes, seed)?,
            paraphrase: build_benchmark(SuiteKind::Paraphrase, scenes, seed)?,
        })
    }

    pub fn get(&self, kind: SuiteKind) -> &[BenchmarkItem] {
        match kind {
            SuiteKind::Swap => &self.swap,
            SuiteKind::Replace => &self.replace,
            SuiteKind::Paraphrase => &self.paraphrase,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_contrastive: f64,
    pub loss_recon: f64,
    pub loss_align: f64,
    pub acc_swap: f64,
    pub acc_replace: f64,
    pub acc_itt: f64,
    pub acc_tot: f64,
    pub sim_pos_pos: f64,
    pub sim_pos_neg: f64,
    pub tau: f64,
}

/// Metric names after `epoch`, in log order.
pub const METRIC_KEYS: [&str; 11] = [
    "loss_total",
    "loss_contrastive",
    "loss_recon",
    "loss_align",
    "acc_swap",
    "acc_replace",
    "acc_itt",
    "acc_tot",
    "sim_pos_pos",
    "sim_pos_neg",
    "tau",
];

impl EpochMetrics {
    pub fn values(&self) -> [f64; 11] {
        [
            self.loss_total,
            self.loss_contrastive,
            self.loss_recon,
            self.loss_align,
            self.acc_swap,
            self.acc_replace,
            self.acc_itt,
            self.acc_tot,
            self.sim_pos_pos,
            self.sim_pos_neg,
            self.tau,
        ]
    }

    pub fn from_values(epoch: usize, v: [f64; 11]) -> Self {
        Self {
            epoch,
            loss_total: v[0],
            loss_contrastive: v[1],
            loss_recon: v[2],
            loss_align: v[3],
            acc_swap: v[4],
            acc_replace: v[5],
            acc_itt: v[6],
            acc_tot: v[7],
            sim_pos_pos: v[8],
            sim_pos_neg: v[9],
            tau: v[10],
        }
    }
}

/// Held-out accuracies and paraphrase-pair similarities of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalScores {
    pub acc_swap: f64,
    pub acc_replace: f64,
    pub acc_itt: f64,
    pub acc_tot: f64,
    pub sim_pos_pos: f64,
    pub sim_pos_neg: f64,
}

pub fn evaluate_suites(bundle: &ModelBundle, suites: &EvalSuites) -> Result<EvalScores> {
    let single = |items: &[BenchmarkItem]| -> Result<f64> {
        let r = rank_items(bundle, items)?;
        Ok(summarize(&r).ok_or_else(|| invalid("empty evaluation suite"))?.single)
    };
    let para = rank_items(bundle, &suites.paraphrase)?;
    let s = summarize(&para).ok_or_else(|| invalid("empty paraphrase suite"))?;
    let trace = trace_from_results(&para, 0)?;
    Ok(EvalScores {
        acc_swap: single(&suites.swap)?,
        acc_replace: single(&suites.replace)?,
        acc_itt: s.itt.ok_or_else(|| invalid("paraphrase suite lacks two positives"))?,
        acc_tot: s.tot.ok_or_else(|| invalid("paraphrase suite lacks two positives"))?,
        sim_pos_pos: trace.pos_pos,
        sim_pos_neg: trace.pos_neg(),
    })
}

/// Position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub optimizer: AdamW,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub config_hash: [u8; 32],
    pub rng: RngState,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
}

/// A fresh model for `cfg` with the frozen decoder loaded.
pub fn init_bundle(cfg: &TrainConfig, dims: ModelDims, decoder: &ParamStore) -> Result<ModelBundle> {
    if decoder.is_empty() {
        return Err(invalid("a pre-trained decoder is required"));
    }
    let mut bundle = ModelBundle::new(dims, derive(cfg.seed, 0x7a1, 0), cfg.shared_tau);
    bundle.load_decoder(decoder)?;
    Ok(bundle)
}

pub fn steps_per_epoch(dataset: &Dataset, cfg: &TrainConfig) -> u64 {
    (dataset.len() / cfg.batch_size) as u64
}

/// Trains for `cfg.epochs` epochs, scoring the suites after each one.
///
/// Each epoch visits the scenes in a fresh random order, in full batches.
/// `on_epoch` sees every epoch's metrics and checkpoint. With `resume`,
/// training continues after the checkpoint's epoch and the history holds
/// only the new epochs. The dataset is used as given; paraphrase noise is
/// applied by [`prepare_dataset`].
pub fn run_training<F>(
    cfg: &TrainConfig,
    dims: ModelDims,
    dataset: &Dataset,
    decoder: &ParamStore,
    suites: &EvalSuites,
    resume: Option<Checkpoint>,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochMetrics, &Checkpoint) -> Result<()>,
{
    cfg.validate()?;
    if dataset.len() < cfg.batch_size {
        return Err(invalid(format!(
            "dataset has {} scenes, fewer than batch size {}",
            dataset.len(),
            cfg.batch_size
        )));
    }
    let hash = cfg.hash();
    let (mut bundle, mut opt, mut step, start, mut rng) = match resume {
        Some(ck) => {
            if ck.config_hash != hash {
                return Err(invalid("checkpoint was written under a different config"));
            }
            if ck.epoch > cfg.epochs {
                return Err(invalid("checkpoint is past the configured number of epochs"));
            }
            if !ck.bundle.decoder_frozen() {
                return Err(invalid("checkpoint decoder is not frozen"));
            }
            (ck.bundle, ck.optimizer, ck.step, ck.epoch, ck.rng.restore())
        }
        None => (
            init_bundle(cfg, dims, decoder)?,
            AdamW::new(cfg.weight_decay),
            0,
            0,
            seeded(cfg.seed, 0x7a2),
        ),
    };
    let per_epoch = steps_per_epoch(dataset, cfg);
    let total = per_epoch * cfg.epochs as u64;
    let mut history = Vec::with_capacity(cfg.epochs - start);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut last = None;
    for epoch in start + 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch = assemble_batch(dataset, cfg, chunk, &mut rng)?;
            let lr = lr_schedule(step, cfg.warmup, total, cfg.lr);
            let r = train_step(&mut bundle, &mut opt, &batch, cfg, lr)?;
            step += 1;
            for (s, v) in sums.iter_mut().zip([r.total, r.contrastive, r.reconstruction, r.alignment]) {
                *s += v;
            }
        }
        let n = per_epoch as f64;
        let scores = evaluate_suites(&bundle, suites)?;
        let metrics = EpochMetrics {
            epoch,
            loss_total: sums[0] / n,
            loss_contrastive: sums[1] / n,
            loss_recon: sums[2] / n,
            loss_align: sums[3] / n,
            acc_swap: scores.acc_swap,
            acc_replace: scores.acc_replace,
            acc_itt: scores.acc_itt,
            acc_tot: scores.acc_tot,
            sim_pos_pos: scores.sim_pos_pos,
            sim_pos_neg: scores.sim_pos_neg,
            tau: bundle.tau(),
        };
        let ck = Checkpoint {
            bundle: bundle.clone(),
            optimizer: opt.clone(),
            step,
            epoch,
            config_hash: hash,
            rng: RngState::capture(&rng),
        };
        on_epoch(&metrics, &ck)?;
        history.push(metrics);
        last = Some(ck);
    }
    let checkpoint = last.unwrap_or(Checkpoint {
        bundle,
        optimizer: opt,
        step,
        epoch: start,
        config_hash: hash,
        rng: RngState::capture(&rng),
    });
    Ok(TrainOutcome { history, checkpoint })
}
