//! Training objectives and their gradients.
//!
//! The descriptor minimizes
//! `L_NLL + β_I·L_VAE + β_H·L_TR + β_C·L_CLASS` in a single backward sweep
//! over the passes it needs (real batch, revised samples, synthetic
//! positives/negatives); the generator minimizes `L_VAE` with the descriptor
//! frozen. Synthetic inputs are constants here: no gradient reaches the
//! sampler or, from the descriptor loss, the generator.

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nets::{Descriptor, DescriptorPass, Generator, HeadGrads, Heads, ParamStore, Real};
use crate::rng::{gaussian_vec, Rng};

/// Per-iteration loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub nll_surrogate: f64,
    pub vae: f64,
    pub triplet: f64,
    pub classification: f64,
    pub descriptor_total: f64,
    pub generator_total: f64,
}

impl LossReport {
    /// `nll + β_I·vae + β_H·triplet + β_C·classification` from the components.
    pub fn recompute_total(&self, beta_inference: f64, beta_hash: f64, beta_class: f64) -> f64 {
        self.nll_surrogate + beta_inference * self.vae + beta_hash * self.triplet + beta_class * self.classification
    }

    /// First non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("nll_surrogate", self.nll_surrogate),
            ("vae", self.vae),
            ("triplet", self.triplet),
            ("classification", self.classification),
            ("descriptor_total", self.descriptor_total),
            ("generator_total", self.generator_total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }
}

/// Which descriptor objectives are active. A disabled objective is neither
/// computed nor reported (its value is logged as 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossMask {
    pub nll: bool,
    pub vae: bool,
    pub triplet: bool,
    pub class: bool,
}

impl Default for LossMask {
    fn default() -> Self {
        LossMask { nll: true, vae: true, triplet: true, class: true }
    }
}

impl LossMask {
    pub fn only_nll() -> Self {
        LossMask { nll: true, vae: false, triplet: false, class: false }
    }
    pub fn only_vae() -> Self {
        LossMask { nll: false, vae: true, triplet: false, class: false }
    }
    pub fn only_triplet() -> Self {
        LossMask { nll: false, vae: false, triplet: true, class: false }
    }
    pub fn only_class() -> Self {
        LossMask { nll: false, vae: false, triplet: false, class: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta_inference: f64,
    pub beta_hash: f64,
    pub beta_class: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub margin: f64,
    pub lambda_q: f64,
    /// Weight of the `mean(f_E(real)² + f_E(synth)²)` penalty folded into the
    /// NLL term.
    pub energy_reg: f64,
    pub mask: LossMask,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainConfig, mask: LossMask) -> Self {
        LossWeights {
            beta_inference: cfg.beta_inference,
            beta_hash: cfg.beta_hash,
            beta_class: cfg.beta_class,
            gamma: cfg.gamma,
            sigma: cfg.sigma,
            margin: cfg.margin(),
            lambda_q: cfg.lambda_q,
            energy_reg: cfg.energy_reg,
            mask,
        }
    }

    /// Unit weights with only the objectives in `mask`; used to isolate one loss.
    pub fn unit(mask: LossMask, sigma: f64, gamma: f64, margin: f64, lambda_q: f64) -> Self {
        LossWeights { beta_inference: 1.0, beta_hash: 1.0, beta_class: 1.0, gamma, sigma, margin, lambda_q, energy_reg: 0.0, mask }
    }
}

fn mean<F: Real>(v: ArrayView1<F>) -> F {
    v.sum() / F::of(v.len() as f64)
}

/// `mean f_E(real) − mean f_E(synth)` from precomputed energies.
pub fn nll_surrogate_value<F: Real>(real_energy: ArrayView1<F>, synth_energy: ArrayView1<F>) -> Result<F> {
    if real_energy.len() != synth_energy.len() {
        return Err(Error::Shape(format!(
            "real batch of {} vs synthetic batch of {}",
            real_energy.len(),
            synth_energy.len()
        )));
    }
    Ok(mean(real_energy) - mean(synth_energy))
}

/// The NLL surrogate whose parameter gradient is the contrastive
/// `mean ∂f_E(real) − mean ∂f_E(synth)`.
pub fn nll_surrogate<F: Real>(
    descriptor: &Descriptor<F>,
    real: ArrayView2<F>,
    real_labels: &[usize],
    synth: ArrayView2<F>,
    synth_labels: &[usize],
) -> Result<F> {
    if real.nrows() != synth.nrows() {
        return Err(Error::Shape(format!("real batch of {} vs synthetic batch of {}", real.nrows(), synth.nrows())));
    }
    let er = descriptor.energy(real, real_labels)?;
    let es = descriptor.energy(synth, synth_labels)?;
    nll_surrogate_value(er.view(), es.view())
}

/// Closed-form `KL(N(μ, diag v) ‖ N(0, I)) = ½ Σ (v + μ² − 1 − log v)`.
pub fn gaussian_kl(mu: &[f64], var: &[f64]) -> f64 {
    assert_eq!(mu.len(), var.len());
    assert!(var.iter().all(|&v| v > 0.0), "variance must be positive");
    0.5 * mu.iter().zip(var).map(|(&m, &v)| v + m * m - 1.0 - v.ln()).sum::<f64>()
}

/// Row-wise KL to the standard normal from mean and log-variance.
pub fn kl_rows<F: Real>(mu: ArrayView2<F>, logvar: ArrayView2<F>) -> Array1<F> {
    let half = F::of(0.5);
    let mut out = Array1::zeros(mu.nrows());
    for ((o, m), lv) in out.iter_mut().zip(mu.rows()).zip(logvar.rows()) {
        *o = half * m.iter().zip(lv.iter()).map(|(&m, &l)| l.exp() + m * m - F::one() - l).sum::<F>();
    }
    out
}

/// Variational loss terms for one batch, with gradients.
#[derive(Debug, Clone)]
pub struct VaeTerms<F> {
    pub value: F,
    pub recon: F,
    pub kl: F,
    pub d_mu: Array2<F>,
    pub d_logvar: Array2<F>,
}

/// `mean_i [‖x̃_i − g(c_i, z_i)‖² / (2σ²) + γ KL_i]` with
/// `z = μ + exp(logvar/2) ⊙ ε`. Generator gradients go to `gen_grads` when
/// given; the returned `d_mu`/`d_logvar` are the gradients for the
/// inference head.
#[allow(clippy::too_many_arguments)]
pub fn vae_terms<F: Real>(
    x_tilde: ArrayView2<F>,
    labels: &[usize],
    mu: ArrayView2<F>,
    logvar: ArrayView2<F>,
    eps: ArrayView2<F>,
    generator: &Generator<F>,
    sigma: f64,
    gamma: f64,
    gen_grads: Option<&mut ParamStore<F>>,
) -> Result<VaeTerms<F>> {
    if logvar.iter().any(|v| !v.exp().is_finite() || v.exp() <= F::zero()) {
        return Err(Error::Data("non-positive posterior variance".into()));
    }
    let n = F::of(x_tilde.nrows() as f64);
    let half = F::of(0.5);
    let std = logvar.mapv(|l| (l * half).exp());
    let z = &mu + &(&std * &eps);
    let (recon_x, pass) = generator.forward(labels, z.view())?;
    let resid = &x_tilde - &recon_x;
    let inv_two_s2 = F::of(1.0 / (2.0 * sigma * sigma));
    let recon = resid.mapv(|r| r * r).sum() * inv_two_s2 / n;
    let kl = kl_rows(mu, logvar).sum() / n;
    let gamma_f = F::of(gamma);
    let value = recon + gamma_f * kl;

    let d_recon = resid.mapv(|r| -r * F::of(1.0 / (sigma * sigma)) / n);
    let dz = generator.backward(&pass, d_recon.view(), gen_grads);
    let d_mu = &dz + &mu.mapv(|m| gamma_f * m / n);
    let mut d_logvar = &dz * &eps * &std * half;
    d_logvar += &logvar.mapv(|l| gamma_f * half * (l.exp() - F::one()) / n);
    Ok(VaeTerms { value, recon, kl, d_mu, d_logvar })
}

fn draw_eps<F: Real>(rng: &mut Rng, rows: usize, cols: usize) -> Array2<F> {
    Array2::from_shape_vec((rows, cols), gaussian_vec(rng, rows * cols)).expect("eps")
}

/// The variational bound on revised samples `x̃`.
pub fn vae_loss<F: Real>(
    x_tilde: ArrayView2<F>,
    labels: &[usize],
    generator: &Generator<F>,
    descriptor: &Descriptor<F>,
    sigma: f64,
    gamma: f64,
    rng: &mut Rng,
) -> Result<F> {
    let pass = descriptor.run(x_tilde, labels, Heads::INFERENCE)?;
    let eps = draw_eps(rng, x_tilde.nrows(), descriptor.latent_dim);
    let t = vae_terms(x_tilde, labels, pass.mu().unwrap(), pass.logvar().unwrap(), eps.view(), generator, sigma, gamma, None)?;
    Ok(t.value)
}

/// The generator objective (same value as [`vae_loss`] under the same rng
/// state) and its gradient with respect to the generator parameters only.
pub fn generator_loss_with_grad<F: Real>(
    x_tilde: ArrayView2<F>,
    labels: &[usize],
    generator: &Generator<F>,
    descriptor: &Descriptor<F>,
    sigma: f64,
    gamma: f64,
    rng: &mut Rng,
) -> Result<(F, ParamStore<F>)> {
    let pass = descriptor.run(x_tilde, labels, Heads::INFERENCE)?;
    let eps = draw_eps(rng, x_tilde.nrows(), descriptor.latent_dim);
    let mut grads = generator.params.zeros_like();
    let t = vae_terms(
        x_tilde,
        labels,
        pass.mu().unwrap(),
        pass.logvar().unwrap(),
        eps.view(),
        generator,
        sigma,
        gamma,
        Some(&mut grads),
    )?;
    Ok((t.value, grads))
}

pub fn generator_loss<F: Real>(
    x_tilde: ArrayView2<F>,
    labels: &[usize],
    generator: &Generator<F>,
    descriptor: &Descriptor<F>,
    sigma: f64,
    gamma: f64,
    rng: &mut Rng,
) -> Result<F> {
    Ok(generator_loss_with_grad(x_tilde, labels, generator, descriptor, sigma, gamma, rng)?.0)
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Triplet-ranking loss for one `(h, h⁺, h⁻)`:
/// `‖h−h⁺‖ + max(m − ‖h−h⁻‖, 0) + λ Σ ‖|·|−1‖`.
pub fn triplet_ranking_loss(h: &[f64], h_plus: &[f64], h_minus: &[f64], margin: f64, lambda_q: f64) -> Result<f64> {
    if h.len() != h_plus.len() || h.len() != h_minus.len() {
        return Err(Error::Shape(format!("triplet lengths {}, {}, {}", h.len(), h_plus.len(), h_minus.len())));
    }
    let pos = l2(h.iter().zip(h_plus).map(|(a, b)| a - b));
    let neg = l2(h.iter().zip(h_minus).map(|(a, b)| a - b));
    let quant = |v: &[f64]| l2(v.iter().map(|x| x.abs() - 1.0));
    Ok(pos + (margin - neg).max(0.0) + lambda_q * (quant(h) + quant(h_plus) + quant(h_minus)))
}

/// Gradients of the mean triplet loss over rows.
#[derive(Debug, Clone)]
pub struct TripletGrads<F> {
    pub value: F,
    pub anchor: Array2<F>,
    pub positive: Array2<F>,
    pub negative: Array2<F>,
}

fn unit_or_zero<F: Real>(diff: &[F]) -> (F, Vec<F>) {
    let norm = diff.iter().map(|&d| d * d).sum::<F>().sqrt();
    if norm > F::zero() {
        (norm, diff.iter().map(|&d| d / norm).collect())
    } else {
        (norm, vec![F::zero(); diff.len()])
    }
}

fn quantization<F: Real>(u: ArrayView1<F>) -> (F, Vec<F>) {
    let dev: Vec<F> = u.iter().map(|&x| x.abs() - F::one()).collect();
    let (q, unit) = unit_or_zero(&dev);
    let sign = |x: F| if x > F::zero() { F::one() } else if x < F::zero() { -F::one() } else { F::zero() };
    (q, unit.iter().zip(u.iter()).map(|(&g, &x)| g * sign(x)).collect())
}

pub fn triplet_batch<F: Real>(
    anchor: ArrayView2<F>,
    positive: ArrayView2<F>,
    negative: ArrayView2<F>,
    margin: f64,
    lambda_q: f64,
) -> Result<TripletGrads<F>> {
    if anchor.dim() != positive.dim() || anchor.dim() != negative.dim() {
        return Err(Error::Shape(format!(
            "triplet batches {:?}, {:?}, {:?}",
            anchor.dim(),
            positive.dim(),
            negative.dim()
        )));
    }
    let n = anchor.nrows();
    let scale = F::of(1.0 / n as f64);
    let (m, lam) = (F::of(margin), F::of(lambda_q));
    let mut value = F::zero();
    let mut ga = Array2::zeros(anchor.raw_dim());
    let mut gp = Array2::zeros(anchor.raw_dim());
    let mut gn = Array2::zeros(anchor.raw_dim());
    for i in 0..n {
        let (a, p, q) = (anchor.row(i), positive.row(i), negative.row(i));
        let dp: Vec<F> = a.iter().zip(p.iter()).map(|(&x, &y)| x - y).collect();
        let dn: Vec<F> = a.iter().zip(q.iter()).map(|(&x, &y)| x - y).collect();
        let (pos, up) = unit_or_zero(&dp);
        let (neg, un) = unit_or_zero(&dn);
        let hinge = m - neg;
        let (qa, ua) = quantization(a);
        let (qp, upq) = quantization(p);
        let (qn, unq) = quantization(q);
        value += pos + hinge.max(F::zero()) + lam * (qa + qp + qn);
        for j in 0..a.len() {
            let mut da = up[j] + lam * ua[j];
            let mut dn_j = lam * unq[j];
            if hinge > F::zero() {
                da -= un[j];
                dn_j += un[j];
            }
            ga[[i, j]] = da * scale;
            gp[[i, j]] = (-up[j] + lam * upq[j]) * scale;
            gn[[i, j]] = dn_j * scale;
        }
    }
    Ok(TripletGrads { value: value * scale, anchor: ga, positive: gp, negative: gn })
}

/// Mean cross-entropy over rows and `∂/∂logits`.
pub fn cross_entropy<F: Real>(logits: ArrayView2<F>, labels: &[usize]) -> Result<(F, Array2<F>)> {
    let classes = logits.ncols();
    if labels.len() != logits.nrows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), logits.nrows())));
    }
    if let Some(&label) = labels.iter().find(|&&c| c >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let n = F::of(labels.len() as f64);
    let mut total = F::zero();
    let mut grad = Array2::zeros(logits.raw_dim());
    for ((row, &y), mut g) in logits.rows().into_iter().zip(labels).zip(grad.rows_mut()) {
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let shifted: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
        let rest: F = shifted.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, &e)| e).sum();
        let own = shifted[y];
        // ln(own + rest) − ln(own); ln_1p keeps precision when the true class dominates
        total += (rest / own).ln_1p();
        let z = own + rest;
        for (j, gj) in g.iter_mut().enumerate() {
            let p = shifted[j] / z;
            *gj = (if j == y { p - F::one() } else { p }) / n;
        }
    }
    Ok((total / n, grad))
}

/// Mean cross-entropy of `softmax(h θ_C)` against `labels`.
pub fn classification_loss<F: Real>(hash: ArrayView2<F>, labels: &[usize], theta_c: ArrayView2<F>) -> Result<F> {
    if hash.ncols() != theta_c.nrows() {
        return Err(Error::Shape(format!("hash width {} vs classifier {:?}", hash.ncols(), theta_c.dim())));
    }
    Ok(cross_entropy(hash.dot(&theta_c).view(), labels)?.0)
}

/// Synthetic triplets anchored on rows of the real batch.
#[derive(Debug, Clone)]
pub struct Triplets<F> {
    pub anchors: Vec<usize>,
    pub positives: Array2<F>,
    pub negatives: Array2<F>,
}

/// Inputs of one descriptor update.
#[derive(Debug, Clone, Copy)]
pub struct DescriptorInputs<'a, F> {
    pub real: ArrayView2<'a, F>,
    pub labels: &'a [usize],
    /// Revised samples `x̃` for the same labels.
    pub synth: Option<ArrayView2<'a, F>>,
    pub triplets: Option<&'a Triplets<F>>,
}

fn add_into<F: Real>(acc: &mut Option<Array2<F>>, g: Array2<F>) {
    *acc = Some(match acc.take() {
        Some(a) => a + &g,
        None => g,
    });
}

/// The composite descriptor objective. Returns the report (with
/// `generator_total` left at 0) and the gradient for every descriptor
/// parameter; generator parameters are read but never differentiated.
pub fn descriptor_loss<F: Real>(
    descriptor: &Descriptor<F>,
    generator: &Generator<F>,
    inputs: &DescriptorInputs<'_, F>,
    w: &LossWeights,
    rng: &mut Rng,
) -> Result<(LossReport, ParamStore<F>)> {
    let mask = w.mask;
    let labels = inputs.labels;
    let n = inputs.real.nrows();
    let mut grads = descriptor.params.zeros_like();
    let mut report = LossReport::default();

    let need_synth = mask.nll || mask.vae;
    let synth = if need_synth {
        Some(inputs.synth.ok_or_else(|| Error::Shape("synthetic batch required for NLL/VAE terms".into()))?)
    } else {
        None
    };
    if let Some(s) = synth {
        if s.nrows() != n {
            return Err(Error::Shape(format!("real batch of {n} vs synthetic batch of {}", s.nrows())));
        }
    }
    let triplets = if mask.triplet {
        Some(inputs.triplets.ok_or_else(|| Error::Shape("triplets required for the triplet term".into()))?)
    } else {
        None
    };

    let real_heads = Heads { energy: mask.nll, inference: false, hash: mask.triplet, logits: mask.class };
    let real_pass = descriptor.run(inputs.real, labels, real_heads)?;
    let synth_pass = match synth {
        Some(s) => Some(descriptor.run(s, labels, Heads { energy: mask.nll, inference: mask.vae, hash: false, logits: false })?),
        None => None,
    };

    let mut real_g = HeadGrads::<F>::default();
    let mut synth_g = HeadGrads::<F>::default();
    let inv_n = F::of(1.0 / n as f64);

    if mask.nll {
        let er = real_pass.energy().unwrap();
        let es = synth_pass.as_ref().unwrap().energy().unwrap();
        let a = F::of(w.energy_reg);
        let penalty = a * (er.mapv(|e| e * e).sum() + es.mapv(|e| e * e).sum()) * inv_n;
        report.nll_surrogate = (nll_surrogate_value(er.view(), es.view())? + penalty).as_f64();
        let two_a = F::of(2.0) * a * inv_n;
        real_g.energy = Some(er.mapv(|e| inv_n + two_a * e));
        synth_g.energy = Some(es.mapv(|e| two_a * e - inv_n));
    }

    if mask.vae {
        let sp = synth_pass.as_ref().unwrap();
        let eps = draw_eps(rng, n, descriptor.latent_dim);
        let t = vae_terms(synth.unwrap(), labels, sp.mu().unwrap(), sp.logvar().unwrap(), eps.view(), generator, w.sigma, w.gamma, None)?;
        report.vae = t.value.as_f64();
        let b = F::of(w.beta_inference);
        synth_g.mu = Some(t.d_mu * b);
        synth_g.logvar = Some(t.d_logvar * b);
    }

    let mut pair_pass: Option<(DescriptorPass<F>, Array2<F>)> = None;
    if let Some(tr) = triplets {
        let k = tr.anchors.len();
        if tr.positives.nrows() != k || tr.negatives.nrows() != k {
            return Err(Error::Shape("triplet positives/negatives do not match anchors".into()));
        }
        let stacked = concatenate(Axis(0), &[tr.positives.view(), tr.negatives.view()]).expect("pair stack");
        let pp = descriptor.run(stacked.view(), &[], Heads::HASH)?;
        let hash_real = real_pass.hash().unwrap();
        let anchors = hash_real.select(Axis(0), &tr.anchors);
        let pair_hash = pp.hash().unwrap();
        let t = triplet_batch(
            anchors.view(),
            pair_hash.slice(ndarray::s![..k, ..]),
            pair_hash.slice(ndarray::s![k.., ..]),
            w.margin,
            w.lambda_q,
        )?;
        report.triplet = t.value.as_f64();
        let b = F::of(w.beta_hash);
        let mut d_real = Array2::zeros(hash_real.raw_dim());
        for (row, &a) in tr.anchors.iter().enumerate() {
            let mut target = d_real.row_mut(a);
            target.scaled_add(b, &t.anchor.row(row));
        }
        add_into(&mut real_g.hash, d_real);
        let d_pairs = concatenate(Axis(0), &[t.positive.view(), t.negative.view()]).expect("pair grads") * b;
        pair_pass = Some((pp, d_pairs));
    }

    if mask.class {
        let logits = real_pass.logits.as_ref().unwrap();
        let (value, d_logits) = cross_entropy(logits.view(), labels)?;
        report.classification = value.as_f64();
        real_g.logits = Some(d_logits * F::of(w.beta_class));
    }

    descriptor.backward(&real_pass, real_g, Some(&mut grads), false);
    if let Some(sp) = &synth_pass {
        descriptor.backward(sp, synth_g, Some(&mut grads), false);
    }
    if let Some((pp, d_pairs)) = pair_pass {
        descriptor.backward(&pp, HeadGrads { hash: Some(d_pairs), ..Default::default() }, Some(&mut grads), false);
    }

    report.descriptor_total = report.recompute_total(w.beta_inference, w.beta_hash, w.beta_class);
    Ok((report, grads))
}
