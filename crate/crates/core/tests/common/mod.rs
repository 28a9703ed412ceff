//! Reference oracles and acceptance checks shared by the integration tests
//! and the acceptance runner.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Instant;

use coophash::data::{blobs, make_splits, BlobSpec, Dataset, SplitSizes};
use coophash::losses::{descriptor_loss, generator_loss_with_grad, gaussian_kl, DescriptorInputs, LossMask, LossWeights, Triplets};
use coophash::mcmc::{langevin_revise, LangevinConfig, Quadratic};
use coophash::nets::ParamStore;
use coophash::retrieval::{average_precision, binarize, hamming_distance, mean_average_precision, precision_at_k, search, HashIndex, RankingResult};
use coophash::rng::{gaussian, seeded_rng, Rng};
use coophash::training::{fit, Recorder, TrainState};
use coophash::types::ImageShape;
use coophash::{Descriptor, Generator, TrainConfig};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;

pub type Check = Result<String, String>;

pub fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- Hamming

/// Bit-by-bit count over the first `bits` positions.
pub fn naive_hamming(a: &[u8], b: &[u8], bits: usize) -> u32 {
    (0..bits).filter(|&j| (a[j / 8] >> (j % 8)) & 1 != (b[j / 8] >> (j % 8)) & 1).count() as u32
}

pub fn random_code(rng: &mut Rng, bits: usize) -> Vec<u8> {
    let signs: Vec<f64> = (0..bits).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    binarize(&signs)
}

pub fn hamming_oracle(pairs: usize) -> Check {
    let mut rng = seeded_rng(101);
    for bits in [16, 32, 64] {
        for _ in 0..pairs {
            let a = random_code(&mut rng, bits);
            let b = random_code(&mut rng, bits);
            let fast = hamming_distance(&a, &b, bits).map_err(|e| e.to_string())?;
            let slow = naive_hamming(&a, &b, bits);
            ensure(fast == slow, || format!("K={bits}: popcount {fast} vs bit loop {slow}"))?;
        }
    }
    Ok(format!("{} pairs per K in {{16, 32, 64}} agree", pairs))
}

// ---------------------------------------------------------------- ranking

/// Full sort of the whole index by (distance, id), truncated to `k`.
pub fn full_sort_search(index: &HashIndex, query: &[u8], k: usize) -> Vec<(u64, u32)> {
    let mut all: Vec<(u64, u32)> = (0..index.len())
        .map(|i| (index.ids()[i], naive_hamming(index.code(i), query, index.bits())))
        .collect();
    all.sort_by_key(|&(id, d)| (d, id));
    all.truncate(k);
    all
}

/// AP@k enumerated straight from its definition.
pub fn enumerate_ap(pattern: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in pattern.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn enumerate_precision(pattern: &[bool], k: usize) -> f64 {
    pattern.iter().take(k).filter(|&&r| r).count() as f64 / k as f64
}

pub fn random_index(rng: &mut Rng, n: usize, bits: usize, classes: usize) -> HashIndex {
    let mut ids: Vec<u64> = (0..n as u64 * 3).collect();
    ids.shuffle(rng);
    let items: Vec<_> = ids[..n].iter().map(|&id| (id, random_code(rng, bits), vec![rng.random_range(0..classes)])).collect();
    HashIndex::build(bits, items).expect("random index")
}

pub fn ranking_oracle(indexes: usize, patterns: usize) -> Check {
    let mut rng = seeded_rng(202);
    for t in 0..indexes {
        let n = rng.random_range(1..=500);
        let bits = [8, 13, 16, 32, 64][t % 5];
        // few bits and many items force ties
        let index = random_index(&mut rng, n, bits, 5);
        let q = random_code(&mut rng, bits);
        let k = rng.random_range(1..=n + 10);
        let got = search(&index, 0, &q, k).map_err(|e| e.to_string())?;
        let want = full_sort_search(&index, &q, k);
        ensure(got.items == want, || format!("index {t} (N={n}, K={bits}, k={k}) differs from the full sort"))?;
    }
    for _ in 0..patterns {
        let k = rng.random_range(1..=50);
        let pattern: Vec<bool> = (0..k).map(|_| rng.random_bool(0.4)).collect();
        let ranking = RankingResult { query_id: 0, items: (0..k as u64).map(|i| (i + 1, 0)).collect(), k };
        let rel = |_: u64, item: u64| pattern[item as usize - 1];
        let map = mean_average_precision(std::slice::from_ref(&ranking), rel, k);
        let p = precision_at_k(std::slice::from_ref(&ranking), rel, k);
        let ap = average_precision(&pattern);
        let (ap_o, p_o) = (enumerate_ap(&pattern), enumerate_precision(&pattern, k));
        ensure((map - ap_o).abs() < 1e-9 && (ap - ap_o).abs() < 1e-9, || format!("AP {map} vs oracle {ap_o} on {pattern:?}"))?;
        ensure((p - p_o).abs() < 1e-9, || format!("P@{k} {p} vs oracle {p_o}"))?;
    }
    Ok(format!("{indexes} indexes match the full sort; {patterns} relevance patterns match enumeration"))
}

// ---------------------------------------------------------------- gradients

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        code_bits: 6,
        latent_dim: 4,
        num_classes: 3,
        channels: 2,
        feature_dim: 10,
        head_hidden: 8,
        embed_dim: 3,
        ..Default::default()
    }
}

pub struct GradFixture {
    pub cfg: TrainConfig,
    pub shape: ImageShape,
    pub generator: Generator<f64>,
    pub descriptor: Descriptor<f64>,
    pub real: Array2<f64>,
    pub synth: Array2<f64>,
    pub labels: Vec<usize>,
    pub triplets: Triplets<f64>,
}

fn image_batch(rng: &mut Rng, n: usize, len: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, len), |_| (0.5 * gaussian::<f64>(rng)).tanh())
}

impl GradFixture {
    pub fn new(seed: u64) -> Self {
        let cfg = tiny_config();
        let shape = ImageShape::new(1, 8, 8);
        let mut rng = seeded_rng(seed);
        let generator = Generator::new(&cfg, shape, &mut rng).unwrap();
        let descriptor = Descriptor::new(&cfg, shape, &mut rng).unwrap();
        let n = 4;
        let real = image_batch(&mut rng, n, shape.len());
        let synth = image_batch(&mut rng, n, shape.len());
        let triplets = Triplets {
            anchors: vec![0, 1, 2, 3],
            positives: image_batch(&mut rng, n, shape.len()),
            negatives: image_batch(&mut rng, n, shape.len()),
        };
        GradFixture { cfg, shape, generator, descriptor, real, synth, labels: vec![0, 1, 2, 1], triplets }
    }

    fn inputs(&self) -> DescriptorInputs<'_, f64> {
        DescriptorInputs {
            real: self.real.view(),
            labels: &self.labels,
            synth: Some(self.synth.view()),
            triplets: Some(&self.triplets),
        }
    }

    pub fn weights(&self, mask: LossMask, energy_reg: f64) -> LossWeights {
        LossWeights { energy_reg, ..LossWeights::unit(mask, self.cfg.sigma, self.cfg.gamma, self.cfg.margin(), 0.1) }
    }

    /// Value and analytic gradient of the descriptor objective restricted to `mask`.
    pub fn descriptor_objective(&self, params: &ParamStore<f64>, w: &LossWeights) -> (f64, ParamStore<f64>) {
        let mut d = self.descriptor.clone();
        d.params = params.clone();
        let (r, g) = descriptor_loss(&d, &self.generator, &self.inputs(), w, &mut seeded_rng(7)).unwrap();
        (r.descriptor_total, g)
    }

    pub fn generator_objective(&self, params: &ParamStore<f64>) -> (f64, ParamStore<f64>) {
        let mut g = self.generator.clone();
        g.params = params.clone();
        generator_loss_with_grad(self.synth.view(), &self.labels, &g, &self.descriptor, self.cfg.sigma, self.cfg.gamma, &mut seeded_rng(7))
            .unwrap()
    }
}

/// Largest relative error between the analytic gradient and central
/// differences at `coords` random coordinates with a nonzero gradient.
pub fn finite_difference_check(
    params: &ParamStore<f64>,
    objective: impl Fn(&ParamStore<f64>) -> (f64, ParamStore<f64>),
    coords: usize,
    seed: u64,
) -> Result<f64, String> {
    let (_, analytic) = objective(params);
    let flat: Vec<f64> = analytic.entries().iter().flat_map(|e| e.data.iter().copied()).collect();
    let mut candidates: Vec<usize> = (0..flat.len()).filter(|&i| flat[i].abs() > 1e-7).collect();
    ensure(candidates.len() >= coords, || format!("only {} coordinates carry gradient", candidates.len()))?;
    candidates.shuffle(&mut seeded_rng(seed));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for &flat_i in &candidates[..coords] {
        let (id, j) = params.locate(flat_i);
        let mut plus = params.clone();
        plus.data_mut(id)[j] += h;
        let mut minus = params.clone();
        minus.data_mut(id)[j] -= h;
        let numeric = (objective(&plus).0 - objective(&minus).0) / (2.0 * h);
        let a = flat[flat_i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
        ensure(rel.is_finite(), || format!("{}[{j}]: analytic {a} vs numeric {numeric}", params.entry(id).name))?;
        worst = worst.max(rel);
    }
    Ok(worst)
}

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Worst relative error of each objective: NLL (with and without the energy
/// penalty), VAE, triplet, classification, generator.
pub fn gradient_suite() -> Result<Vec<(&'static str, f64)>, String> {
    let fx = GradFixture::new(11);
    let p = &fx.descriptor.params;
    let cases: [(&'static str, LossMask, f64); 5] = [
        ("nll", LossMask::only_nll(), 0.0),
        ("nll+penalty", LossMask::only_nll(), 1.0),
        ("vae", LossMask::only_vae(), 0.0),
        ("triplet", LossMask::only_triplet(), 0.0),
        ("classification", LossMask::only_class(), 0.0),
    ];
    let mut out = Vec::new();
    for (i, (name, mask, reg)) in cases.into_iter().enumerate() {
        let w = fx.weights(mask, reg);
        out.push((name, finite_difference_check(p, |q| fx.descriptor_objective(q, &w), 10, 31 + i as u64)?));
    }
    out.push(("generator", finite_difference_check(&fx.generator.params, |q| fx.generator_objective(q), 10, 41)?));
    Ok(out)
}

pub fn gradient_check() -> Check {
    let results = gradient_suite()?;
    let summary: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    for (name, err) in &results {
        ensure(*err < GRAD_TOLERANCE, || format!("{name}: relative error {err:.3e} ≥ {GRAD_TOLERANCE:e}"))?;
    }
    Ok(format!("max rel. err: {}", summary.join(", ")))
}

// ---------------------------------------------------------------- Langevin

/// Long-run second moment of the scalar chain
/// `x ← x − (δ²/2)·x + δ·ξ`, averaged after a burn-in.
pub fn scalar_langevin_second_moment(delta: f64, steps: usize, seed: u64) -> f64 {
    let mut rng = seeded_rng(seed);
    let keep = 1.0 - delta * delta / 2.0;
    let burn = steps / 10;
    let mut x = 0.0f64;
    let mut acc = 0.0;
    for t in 0..steps {
        x = keep * x + delta * gaussian::<f64>(&mut rng);
        if t >= burn {
            acc += x * x;
        }
    }
    acc / (steps - burn) as f64
}

pub fn langevin_stationarity(dim: usize, chains: usize, steps: usize, oracle_steps: usize) -> Check {
    let delta = 0.1;
    let oracle = scalar_langevin_second_moment(delta, oracle_steps, 303);
    let x0 = Array2::<f64>::zeros((chains, dim));
    let cfg = LangevinConfig { delta, steps, clamp: false };
    let mut streams: Vec<Rng> = (0..chains as u64).map(|i| seeded_rng(10_000 + i)).collect();
    let labels = vec![0; chains];
    let x = langevin_revise(x0.view(), &labels, &Quadratic, &cfg, &mut streams).map_err(|e| e.to_string())?;
    let moment = x.mapv(|v| v * v).mean().unwrap();
    let rel = (moment - oracle).abs() / oracle;
    ensure(rel < 0.05, || format!("second moment {moment:.4} vs oracle {oracle:.4} ({:.1}%)", 100.0 * rel))?;
    Ok(format!("E[x²] = {moment:.4}, oracle {oracle:.4} ({:.2}% off)", 100.0 * rel))
}

// ---------------------------------------------------------------- KL

/// Monte Carlo `E_q[log q(z) − log p(z)]` for `q = N(μ, diag v)`,
/// `p = N(0, I)`, drawing `samples` points as antithetic pairs `±ε`.
pub fn monte_carlo_kl(mu: &[f64], var: &[f64], samples: usize, rng: &mut Rng) -> f64 {
    let log_ratio = |eps: &[f64]| -> f64 {
        mu.iter()
            .zip(var)
            .zip(eps)
            .map(|((&m, &v), &e)| {
                let z = m + v.sqrt() * e;
                // log q − log p with the 2π terms cancelled
                -0.5 * v.ln() - 0.5 * e * e + 0.5 * z * z
            })
            .sum()
    };
    let pairs = samples / 2;
    let mut acc = 0.0;
    for _ in 0..pairs {
        let eps: Vec<f64> = mu.iter().map(|_| gaussian(rng)).collect();
        let neg: Vec<f64> = eps.iter().map(|e| -e).collect();
        acc += log_ratio(&eps) + log_ratio(&neg);
    }
    acc / (2 * pairs) as f64
}

pub fn kl_monte_carlo(pairs: usize, samples: usize) -> Check {
    let mut rng = seeded_rng(404);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let d = rng.random_range(2..=8);
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(0.75..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        let closed = gaussian_kl(&mu, &var);
        let mc = monte_carlo_kl(&mu, &var, samples, &mut rng);
        let rel = (closed - mc).abs() / closed;
        ensure(rel < 0.01, || format!("KL {closed:.5} vs Monte Carlo {mc:.5} (μ={mu:?}, v={var:?})"))?;
        worst = worst.max(rel);
    }
    Ok(format!("{pairs} (μ, v) pairs, worst relative gap {:.3}%", 100.0 * worst))
}

// ---------------------------------------------------------------- blobs

pub fn blob_config() -> TrainConfig {
    TrainConfig {
        code_bits: 8,
        num_classes: 2,
        iterations: 500,
        eval_every: 100,
        checkpoint_every: 0,
        train_size: 500,
        query_size: 100,
        database_size: 600,
        probe_k: 100,
        probe_queries: 100,
        probe_database: 600,
        delta: 0.1,
        energy_reg: 0.01,
        ..Default::default()
    }
}

pub fn blob_dataset(cfg: &TrainConfig) -> Dataset {
    let ds = blobs(&BlobSpec { classes: 2, side: 8, per_class: 600, noise: 0.3, seed: 0 }).unwrap();
    make_splits(&ds, SplitSizes { train: cfg.train_size, query: cfg.query_size, database: cfg.database_size }, cfg.seed).unwrap()
}

pub fn train_blobs(cfg: &TrainConfig, mask: LossMask) -> (TrainState, Recorder, Dataset) {
    let ds = blob_dataset(cfg);
    let state = TrainState::new(cfg, ds.shape, mask).unwrap();
    let mut rec = Recorder::default();
    let state = fit(state, &ds, &mut rec, None).unwrap();
    (state, rec, ds)
}

// ---------------------------------------------------------------- CLI

pub fn binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_coophash"))
}

pub fn write_config(dir: &Path, json: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, json).unwrap();
    path
}

/// Runs the binary; returns (exit code, stdout, stderr).
pub fn coophash(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(binary()).args(args).output().expect("run coophash");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

pub fn coophash_ok(args: &[&str]) -> String {
    let (code, stdout, stderr) = coophash(args);
    assert_eq!(code, 0, "coophash {args:?} failed: {stderr}");
    stdout
}

/// The training log with the wall-clock field removed from every record.
pub fn log_without_wall_time(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}
