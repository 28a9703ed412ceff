//! The cooperative training loop.
//!
//! Each iteration: (1) cooperative sampling for the batch labels,
//! (2) contrastive pairs per anchor, (3) one Adam step on the descriptor
//! objective, (4) one Adam step on the generator objective. Every random draw
//! of iteration `t` comes from a substream keyed by `(seed, t)`, so a run
//! resumed from a checkpoint replays exactly.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, append_prefixed, Checkpoint, Header};
use crate::config::{validate_config, TrainConfig};
use crate::data::{real_triplet_ids, sample_batch, Dataset, LabelSampler};
use crate::error::{Error, Result};
use crate::frechet::frechet_between;
use crate::losses::{descriptor_loss, generator_loss_with_grad, DescriptorInputs, LossMask, LossReport, LossWeights, Triplets};
use crate::mcmc::cooperative_sample;
use crate::nets::{generate_contrastive_pairs, Descriptor, Generator};
use crate::optim::{Adam, AdamConfig};
use crate::retrieval::{binarize, evaluate, HashIndex, Queries};
use crate::rng::{substream, Stream};
use crate::types::ImageShape;

/// Rows per forward pass when encoding or probing.
const CHUNK: usize = 256;

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub mask: LossMask,
    pub iteration: u64,
    pub generator: Generator<f32>,
    pub descriptor: Descriptor<f32>,
    pub opt_desc: Adam<f32>,
    pub opt_gen: Adam<f32>,
}

pub fn check_mask(mask: LossMask) -> Result<()> {
    if !(mask.nll || mask.vae || mask.triplet || mask.class) {
        return Err(Error::config("ablate", "cannot disable all four losses"));
    }
    Ok(())
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, shape: ImageShape, mask: LossMask) -> Result<Self> {
        let cfg = validate_config(cfg.clone())?;
        check_mask(mask)?;
        let mut rng = substream(cfg.seed, Stream::Init, 0);
        let generator = Generator::new(&cfg, shape, &mut rng)?;
        let descriptor = Descriptor::new(&cfg, shape, &mut rng)?;
        let opt_desc = Adam::new(AdamConfig::with_lr(cfg.lr_desc), &descriptor.params);
        let opt_gen = Adam::new(AdamConfig::with_lr(cfg.lr_gen), &generator.params);
        Ok(TrainState { cfg, mask, iteration: 0, generator, descriptor, opt_desc, opt_gen })
    }

    pub fn shape(&self) -> ImageShape {
        self.descriptor.shape
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = self.generator.params.clone();
        append_prefixed(&mut tensors, "", &self.descriptor.params);
        append_prefixed(&mut tensors, "opt.desc.m.", &self.opt_desc.m);
        append_prefixed(&mut tensors, "opt.desc.v.", &self.opt_desc.v);
        append_prefixed(&mut tensors, "opt.gen.m.", &self.opt_gen.m);
        append_prefixed(&mut tensors, "opt.gen.v.", &self.opt_gen.v);
        Checkpoint {
            header: Header {
                config: self.cfg.clone(),
                mask: self.mask,
                shape: self.shape(),
                iteration: self.iteration,
                desc_steps: self.opt_desc.step,
                gen_steps: self.opt_gen.step,
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let h = &ckpt.header;
        let mut s = TrainState::new(&h.config, h.shape, h.mask)?;
        ckpt.restore_into("", &mut s.generator.params)?;
        ckpt.restore_into("", &mut s.descriptor.params)?;
        ckpt.restore_into("opt.desc.m.", &mut s.opt_desc.m)?;
        ckpt.restore_into("opt.desc.v.", &mut s.opt_desc.v)?;
        ckpt.restore_into("opt.gen.m.", &mut s.opt_gen.m)?;
        ckpt.restore_into("opt.gen.v.", &mut s.opt_gen.v)?;
        s.iteration = h.iteration;
        s.opt_desc.step = h.desc_steps;
        s.opt_gen.step = h.gen_steps;
        Ok(s)
    }

    /// Writes `dir/ckpt_{iteration}.bin`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(checkpoint::file_name(self.iteration));
        self.to_checkpoint().save(&path)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// One training batch. `real_pairs` holds a real positive and negative per
/// anchor row; it is needed for real-real triplets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array2<f32>,
    pub labels: Vec<usize>,
    pub real_pairs: Option<(Array2<f32>, Array2<f32>)>,
}

fn diverged(iteration: u64, component: &'static str) -> Error {
    Error::Divergence { iteration, component }
}

fn check_report(report: &LossReport, iteration: u64) -> Result<()> {
    match report.non_finite() {
        Some(component) => Err(diverged(iteration, component)),
        None => Ok(()),
    }
}

/// One iteration. On error the state is left untouched.
pub fn train_step(state: &mut TrainState, batch: &Batch, sampler: &LabelSampler) -> Result<LossReport> {
    let t = state.iteration;
    let iter = t + 1;
    let cfg = &state.cfg;
    let mask = state.mask;
    let labels = &batch.labels;
    if labels.len() < 2 || batch.images.nrows() != labels.len() {
        return Err(Error::Shape(format!("batch of {} images / {} labels; need at least 2", batch.images.nrows(), labels.len())));
    }
    // without the NLL term there is no synthesis at all
    let synthesize = mask.nll;

    let samples = if synthesize {
        let mut rng = substream(cfg.seed, Stream::Sampling, t);
        Some(cooperative_sample(labels, &state.generator, &state.descriptor, &cfg.langevin(), &mut rng).map_err(|e| match e {
            Error::NonFiniteGradient { .. } => diverged(iter, "langevin"),
            other => other,
        })?)
    } else {
        None
    };

    let triplets = if mask.triplet {
        let n = labels.len();
        let mut anchors = Vec::new();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        if synthesize {
            let mut rng = substream(cfg.seed, Stream::Pairs, t);
            let pairs = generate_contrastive_pairs(&state.generator, labels, sampler, cfg.sigma, &mut rng)?;
            anchors.extend(0..n);
            pos.push(pairs.positives);
            neg.push(pairs.negatives);
        }
        if !synthesize || cfg.real_triplets {
            let (p, q) = batch
                .real_pairs
                .as_ref()
                .ok_or_else(|| Error::Shape("real-real triplets requested but the batch has no real pairs".into()))?;
            anchors.extend(0..n);
            pos.push(p.clone());
            neg.push(q.clone());
        }
        let stack = |parts: &[Array2<f32>]| concatenate(Axis(0), &parts.iter().map(|a| a.view()).collect::<Vec<_>>()).expect("triplet stack");
        Some(Triplets { anchors, positives: stack(&pos), negatives: stack(&neg) })
    } else {
        None
    };

    let effective = LossMask { vae: mask.vae && synthesize, ..mask };
    let weights = LossWeights::from_config(cfg, effective);
    let inputs = DescriptorInputs {
        real: batch.images.view(),
        labels,
        synth: samples.as_ref().map(|s| s.x_tilde.view()),
        triplets: triplets.as_ref(),
    };
    let mut rng = substream(cfg.seed, Stream::VaeDescriptor, t);
    let (mut report, grads) = descriptor_loss(&state.descriptor, &state.generator, &inputs, &weights, &mut rng).map_err(|e| match e {
        Error::Data(_) => diverged(iter, "vae"),
        other => other,
    })?;
    check_report(&report, iter)?;

    let mut descriptor = state.descriptor.clone();
    let mut opt_desc = state.opt_desc.clone();
    opt_desc.update(&mut descriptor.params, &grads).map_err(|_| diverged(iter, "descriptor_total"))?;

    if let Some(s) = &samples {
        let mut rng = substream(cfg.seed, Stream::VaeGenerator, t);
        let (value, g_grads) =
            generator_loss_with_grad(s.x_tilde.view(), labels, &state.generator, &descriptor, cfg.sigma, cfg.gamma, &mut rng)
                .map_err(|e| match e {
                    Error::Data(_) => diverged(iter, "generator_total"),
                    other => other,
                })?;
        report.generator_total = value as f64;
        check_report(&report, iter)?;
        state.opt_gen.update(&mut state.generator.params, &g_grads).map_err(|_| diverged(iter, "generator_total"))?;
    }
    state.descriptor = descriptor;
    state.opt_desc = opt_desc;
    state.iteration = iter;
    Ok(report)
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: u64,
    #[serde(flatten)]
    pub losses: LossReport,
    pub wall_ms: f64,
}

/// One row of `curves.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub iter: u64,
    pub map: f64,
    pub acc: f64,
    pub frechet: f64,
}

pub trait Callbacks {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }
    fn on_probe(&mut self, _probe: &ProbeReport) -> Result<()> {
        Ok(())
    }
}

pub struct NoCallbacks;

impl Callbacks for NoCallbacks {}

/// Keeps every record in memory.
#[derive(Debug, Default, Clone)]
pub struct Recorder {
    pub steps: Vec<StepRecord>,
    pub probes: Vec<ProbeReport>,
}

impl Callbacks for Recorder {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        self.steps.push(record.clone());
        Ok(())
    }
    fn on_probe(&mut self, probe: &ProbeReport) -> Result<()> {
        self.probes.push(probe.clone());
        Ok(())
    }
}

/// Writes `train_log.jsonl` and `curves.csv`, appending when resuming.
pub struct ArtifactLog {
    log: BufWriter<File>,
    curves: csv::Writer<File>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CURVES_FILE: &str = "curves.csv";

impl ArtifactLog {
    pub fn open(dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<File> {
            let mut o = OpenOptions::new();
            o.create(true);
            if append {
                o.append(true);
            } else {
                o.write(true).truncate(true);
            }
            Ok(o.open(dir.join(name))?)
        };
        let curves_path = dir.join(CURVES_FILE);
        let fresh = !append || !curves_path.exists() || std::fs::metadata(&curves_path)?.len() == 0;
        let curves_file = open(CURVES_FILE)?;
        let log = BufWriter::new(open(LOG_FILE)?);
        let mut curves = csv::WriterBuilder::new().has_headers(false).from_writer(curves_file);
        if fresh {
            curves.write_record(["iter", "map", "acc", "frechet"]).map_err(csv_err)?;
            curves.flush()?;
        }
        Ok(ArtifactLog { log, curves })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

impl Callbacks for ArtifactLog {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.log, record)?;
        self.log.write_all(b"\n")?;
        self.log.flush()?;
        Ok(())
    }

    fn on_probe(&mut self, p: &ProbeReport) -> Result<()> {
        self.curves.serialize(p).map_err(csv_err)?;
        self.curves.flush()?;
        Ok(())
    }
}

struct Both<'a> {
    a: &'a mut dyn Callbacks,
    b: Option<ArtifactLog>,
}

impl Callbacks for Both<'_> {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        self.a.on_step(r)?;
        self.b.as_mut().map_or(Ok(()), |b| b.on_step(r))
    }
    fn on_probe(&mut self, p: &ProbeReport) -> Result<()> {
        self.a.on_probe(p)?;
        self.b.as_mut().map_or(Ok(()), |b| b.on_probe(p))
    }
}

/// Real-valued hash codes for the listed items.
pub fn encode(descriptor: &Descriptor<f32>, dataset: &Dataset, ids: &[usize]) -> Result<Array2<f32>> {
    let mut parts = Vec::new();
    for chunk in ids.chunks(CHUNK) {
        parts.push(descriptor.hash(dataset.images::<f32>(chunk).view())?);
    }
    if parts.is_empty() {
        return Ok(Array2::zeros((0, descriptor.code_bits)));
    }
    Ok(concatenate(Axis(0), &parts.iter().map(|p| p.view()).collect::<Vec<_>>()).expect("code stack"))
}

pub fn binary_codes(real: &Array2<f32>) -> Vec<Vec<u8>> {
    real.rows().into_iter().map(|r| binarize(&r.to_vec())).collect()
}

/// Hash index over dataset items, keyed by item position.
pub fn build_index(descriptor: &Descriptor<f32>, dataset: &Dataset, ids: &[usize]) -> Result<HashIndex> {
    let codes = binary_codes(&encode(descriptor, dataset, ids)?);
    HashIndex::build(
        descriptor.code_bits,
        ids.iter().zip(codes).map(|(&i, c)| (i as u64, c, dataset.labels(i).to_vec())),
    )
}

pub fn queries(descriptor: &Descriptor<f32>, dataset: &Dataset, ids: &[usize]) -> Result<Queries> {
    Ok(Queries {
        ids: ids.iter().map(|&i| i as u64).collect(),
        codes: binary_codes(&encode(descriptor, dataset, ids)?),
        labels: ids.iter().map(|&i| dataset.labels(i).to_vec()).collect(),
    })
}

/// Fraction of items whose predicted class is in their label set.
pub fn accuracy(descriptor: &Descriptor<f32>, dataset: &Dataset, ids: &[usize]) -> Result<f64> {
    if ids.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for chunk in ids.chunks(CHUNK) {
        let pred = descriptor.predict(dataset.images::<f32>(chunk).view())?;
        hits += chunk.iter().zip(pred).filter(|(&i, p)| dataset.labels(i).contains(p)).count();
    }
    Ok(hits as f64 / ids.len() as f64)
}

/// Fréchet distance between base features of real items and of cooperative
/// samples drawn for the same labels.
pub fn frechet_diagnostic(state: &TrainState, dataset: &Dataset, ids: &[usize]) -> Result<f64> {
    let cfg = &state.cfg;
    let mut rng = substream(cfg.seed, Stream::Probe, state.iteration);
    let mut real = Vec::new();
    let mut synth = Vec::new();
    for chunk in ids.chunks(CHUNK) {
        let labels = dataset.conditioning_labels(chunk, &mut rng);
        real.push(state.descriptor.features(dataset.images::<f32>(chunk).view())?);
        let s = cooperative_sample(&labels, &state.generator, &state.descriptor, &cfg.langevin(), &mut rng)?;
        synth.push(state.descriptor.features(s.x_tilde.view())?);
    }
    let stack = |v: &[Array2<f32>]| concatenate(Axis(0), &v.iter().map(|a| a.view()).collect::<Vec<_>>()).expect("feature stack");
    frechet_between(stack(&real).view(), stack(&synth).view())
}

/// mAP@probe_k, accuracy and the Fréchet diagnostic on a fixed probe split.
pub fn probe(state: &TrainState, dataset: &Dataset, query_ids: &[usize], db_ids: &[usize]) -> Result<ProbeReport> {
    let index = build_index(&state.descriptor, dataset, db_ids)?;
    let q = queries(&state.descriptor, dataset, query_ids)?;
    let metrics = evaluate(&index, &q, state.cfg.probe_k)?;
    Ok(ProbeReport {
        iter: state.iteration,
        map: metrics[0].value,
        acc: accuracy(&state.descriptor, dataset, query_ids)?,
        frechet: frechet_diagnostic(state, dataset, query_ids)?,
    })
}

/// Training pool and probe split derived from a dataset's splits. Without a
/// train split every item trains; without query or database splits there is
/// no probe.
pub struct Plan {
    pub train: Vec<usize>,
    pub probe_queries: Vec<usize>,
    pub probe_database: Vec<usize>,
}

impl Plan {
    pub fn new(dataset: &Dataset, cfg: &TrainConfig) -> Self {
        let s = &dataset.splits;
        let train = if s.train.is_empty() { (0..dataset.len()).collect() } else { s.train.clone() };
        let (q, d) = if s.query.is_empty() || s.database.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            (
                s.query[..cfg.probe_queries.min(s.query.len())].to_vec(),
                s.database[..cfg.probe_database.min(s.database.len())].to_vec(),
            )
        };
        Plan { train, probe_queries: q, probe_database: d }
    }
}

/// The batch of iteration `t`.
pub fn assemble_batch(state: &TrainState, dataset: &Dataset, pool: &[usize]) -> Result<Batch> {
    let cfg = &state.cfg;
    let mut rng = substream(cfg.seed, Stream::Batch, state.iteration);
    let ids = sample_batch(pool, cfg.batch_size, &mut rng);
    let labels = dataset.conditioning_labels(&ids, &mut rng);
    let needs_real = state.mask.triplet && (!state.mask.nll || cfg.real_triplets);
    let real_pairs = if needs_real {
        let (p, n) = real_triplet_ids(dataset, pool, &labels, &mut rng)?;
        Some((dataset.images(&p), dataset.images(&n)))
    } else {
        None
    };
    Ok(Batch { images: dataset.images(&ids), labels, real_pairs })
}

/// Runs the remaining iteration budget. With `out_dir`, writes the log,
/// curves and periodic checkpoints there, a final checkpoint at the end, and
/// a checkpoint of the last good state if an iteration fails.
pub fn fit(
    mut state: TrainState,
    dataset: &Dataset,
    callbacks: &mut dyn Callbacks,
    out_dir: Option<&Path>,
) -> Result<TrainState> {
    let cfg = validate_config(state.cfg.clone())?;
    if dataset.is_empty() {
        return Err(Error::NoItems);
    }
    dataset.check_labels(cfg.num_classes)?;
    if dataset.shape != state.shape() {
        return Err(Error::Shape(format!("dataset images {:?} vs model {:?}", dataset.shape, state.shape())));
    }
    let plan = Plan::new(dataset, &cfg);
    let sampler = LabelSampler::from_dataset(dataset, &plan.train, cfg.num_classes)?;
    let log = match out_dir {
        Some(dir) => Some(ArtifactLog::open(dir, state.iteration > 0)?),
        None => None,
    };
    let mut cb = Both { a: callbacks, b: log };
    let budget = cfg.iterations as u64;
    let can_probe = !plan.probe_queries.is_empty() && !plan.probe_database.is_empty();
    let mut last_probe = None;

    while state.iteration < budget {
        let started = Instant::now();
        let step = assemble_batch(&state, dataset, &plan.train).and_then(|b| train_step(&mut state, &b, &sampler));
        let report = match step {
            Ok(r) => r,
            Err(e) => {
                if let Some(dir) = out_dir {
                    state.save(dir)?;
                }
                return Err(e);
            }
        };
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        cb.on_step(&StepRecord { iter: state.iteration, losses: report, wall_ms })?;
        let it = state.iteration;
        if can_probe && cfg.eval_every > 0 && it.is_multiple_of(cfg.eval_every as u64) {
            cb.on_probe(&probe(&state, dataset, &plan.probe_queries, &plan.probe_database)?)?;
            last_probe = Some(it);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && it.is_multiple_of(cfg.checkpoint_every as u64) {
                state.save(dir)?;
            }
        }
    }
    if can_probe && state.iteration > 0 && last_probe != Some(state.iteration) {
        cb.on_probe(&probe(&state, dataset, &plan.probe_queries, &plan.probe_database)?)?;
    }
    if let Some(dir) = out_dir {
        state.save(dir)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{blobs, make_splits, BlobSpec, SplitSizes};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            code_bits: 8,
            latent_dim: 4,
            num_classes: 2,
            channels: 4,
            feature_dim: 16,
            head_hidden: 16,
            embed_dim: 4,
            batch_size: 8,
            langevin_steps: 3,
            iterations: 6,
            eval_every: 3,
            checkpoint_every: 4,
            probe_k: 10,
            probe_queries: 10,
            probe_database: 20,
            seed: 5,
            ..Default::default()
        }
    }

    fn tiny_data() -> Dataset {
        let ds = blobs(&BlobSpec { classes: 2, side: 8, per_class: 40, noise: 0.2, seed: 1 }).unwrap();
        make_splits(&ds, SplitSizes { train: 40, query: 10, database: 30 }, 2).unwrap()
    }

    fn fixed_batch(ds: &Dataset) -> Batch {
        let ids: Vec<usize> = (0..8).collect();
        Batch { images: ds.images(&ids), labels: ids.iter().map(|&i| ds.labels(i)[0]).collect(), real_pairs: None }
    }

    #[test]
    fn steps_are_deterministic() {
        let ds = tiny_data();
        let sampler = LabelSampler::from_counts(vec![1, 1]).unwrap();
        let run = || {
            let mut s = TrainState::new(&tiny_cfg(), ds.shape, LossMask::default()).unwrap();
            (0..3).map(|_| train_step(&mut s, &fixed_batch(&ds), &sampler).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn default_mask_reports_every_component() {
        let ds = tiny_data();
        let sampler = LabelSampler::from_counts(vec![1, 1]).unwrap();
        let mut s = TrainState::new(&tiny_cfg(), ds.shape, LossMask::default()).unwrap();
        let r = train_step(&mut s, &fixed_batch(&ds), &sampler).unwrap();
        for v in [r.nll_surrogate, r.vae, r.triplet, r.classification, r.generator_total] {
            assert!(v != 0.0 && v.is_finite(), "{r:?}");
        }
        let recomputed = r.recompute_total(s.cfg.beta_inference, s.cfg.beta_hash, s.cfg.beta_class);
        assert!((recomputed - r.descriptor_total).abs() <= 1e-9 * recomputed.abs());
    }

    #[test]
    fn update_isolation() {
        let ds = tiny_data();
        let sampler = LabelSampler::from_counts(vec![1, 1]).unwrap();
        // generator only changes in its own step
        let mut s = TrainState::new(&TrainConfig { lr_gen: 0.0, ..tiny_cfg() }, ds.shape, LossMask::default()).unwrap();
        let gen_before = s.generator.params.clone();
        let desc_before = s.descriptor.params.clone();
        train_step(&mut s, &fixed_batch(&ds), &sampler).unwrap();
        assert_eq!(s.generator.params, gen_before);
        assert_ne!(s.descriptor.params, desc_before);

        let mut s = TrainState::new(&TrainConfig { lr_desc: 0.0, ..tiny_cfg() }, ds.shape, LossMask::default()).unwrap();
        let gen_before = s.generator.params.clone();
        let desc_before = s.descriptor.params.clone();
        train_step(&mut s, &fixed_batch(&ds), &sampler).unwrap();
        assert_eq!(s.descriptor.params, desc_before);
        assert_ne!(s.generator.params, gen_before);
    }

    #[test]
    fn nll_ablation_needs_real_pairs_and_skips_generator() {
        let ds = tiny_data();
        let sampler = LabelSampler::from_counts(vec![1, 1]).unwrap();
        let mask = LossMask { nll: false, ..Default::default() };
        let mut s = TrainState::new(&tiny_cfg(), ds.shape, mask).unwrap();
        assert!(train_step(&mut s, &fixed_batch(&ds), &sampler).is_err());
        assert_eq!(s.iteration, 0);
        let pool: Vec<usize> = ds.splits.train.clone();
        let b = assemble_batch(&s, &ds, &pool).unwrap();
        let gen_before = s.generator.params.clone();
        let r = train_step(&mut s, &b, &sampler).unwrap();
        assert_eq!((r.nll_surrogate, r.vae, r.generator_total), (0.0, 0.0, 0.0));
        assert!(r.triplet > 0.0 && r.classification > 0.0);
        assert_eq!(s.generator.params, gen_before);
    }

    #[test]
    fn all_losses_masked_is_rejected() {
        let none = LossMask { nll: false, vae: false, triplet: false, class: false };
        assert!(TrainState::new(&tiny_cfg(), ImageShape::new(1, 8, 8), none).is_err());
    }

    #[test]
    fn zero_budget_writes_initial_checkpoint() {
        let ds = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let s = TrainState::new(&TrainConfig { iterations: 0, ..tiny_cfg() }, ds.shape, LossMask::default()).unwrap();
        let out = fit(s.clone(), &ds, &mut NoCallbacks, Some(dir.path())).unwrap();
        assert_eq!(out.iteration, 0);
        let back = TrainState::load(&dir.path().join("ckpt_0.bin")).unwrap();
        assert_eq!(back.generator.params, s.generator.params);
        assert_eq!(back.descriptor.params, s.descriptor.params);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let ds = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let mut full = Recorder::default();
        let s = TrainState::new(&cfg, ds.shape, LossMask::default()).unwrap();
        let end = fit(s, &ds, &mut full, Some(dir.path())).unwrap();

        let resumed = TrainState::load(&dir.path().join("ckpt_4.bin")).unwrap();
        assert_eq!(resumed.iteration, 4);
        let mut tail = Recorder::default();
        let end2 = fit(resumed, &ds, &mut tail, None).unwrap();
        let strip = |r: &[StepRecord]| r.iter().map(|s| (s.iter, s.losses)).collect::<Vec<_>>();
        assert_eq!(strip(&tail.steps), strip(&full.steps[4..]));
        assert_eq!(end2.descriptor.params, end.descriptor.params);
        assert_eq!(end2.generator.params, end.generator.params);

        let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 6);
        let curves = std::fs::read_to_string(dir.path().join(CURVES_FILE)).unwrap();
        let mut lines = curves.lines();
        assert_eq!(lines.next(), Some("iter,map,acc,frechet"));
        assert_eq!(lines.map(|l| l.split(',').next().unwrap().to_string()).collect::<Vec<_>>(), ["3", "6"]);
        assert!(dir.path().join("ckpt_6.bin").exists());
    }

    #[test]
    fn probe_values_in_range() {
        let ds = tiny_data();
        let s = TrainState::new(&tiny_cfg(), ds.shape, LossMask::default()).unwrap();
        let plan = Plan::new(&ds, &s.cfg);
        let p = probe(&s, &ds, &plan.probe_queries, &plan.probe_database).unwrap();
        assert!((0.0..=1.0).contains(&p.map) && (0.0..=1.0).contains(&p.acc));
        assert!(p.frechet >= 0.0 && p.frechet.is_finite());
    }
}
