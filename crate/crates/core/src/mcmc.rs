//! Langevin revision and cooperative sampling.
//!
//! Chains start from generator samples and take `T` steps of
//! `x ← x − (δ²/2) ∂f_E/∂x + δ ε`. Only the energy gradient enters the
//! update, and each chain draws its noise from its own stream, so a batch of
//! chains evolves exactly as the same chains would one at a time.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nets::{Descriptor, Generator, Real};
use crate::rng::{fork, gaussian, gaussian_vec, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LangevinConfig {
    pub delta: f64,
    pub steps: usize,
    /// Project onto `[-1, 1]` after every step.
    pub clamp: bool,
}

/// A (label-conditional) energy over rows of a batch.
pub trait EnergyFunction<F: Real> {
    fn energy(&self, x: ArrayView2<F>, labels: &[usize]) -> Result<Array1<F>>;
    fn grad_x(&self, x: ArrayView2<F>, labels: &[usize]) -> Result<Array2<F>>;
}

impl<F: Real> EnergyFunction<F> for Descriptor<F> {
    fn energy(&self, x: ArrayView2<F>, labels: &[usize]) -> Result<Array1<F>> {
        Descriptor::energy(self, x, labels)
    }

    fn grad_x(&self, x: ArrayView2<F>, labels: &[usize]) -> Result<Array2<F>> {
        self.energy_grad_x(x, labels)
    }
}

/// `‖x‖² / 2`, ignoring labels.
#[derive(Debug, Clone, Copy, Default)]
pub struct Quadratic;

impl<F: Real> EnergyFunction<F> for Quadratic {
    fn energy(&self, x: ArrayView2<F>, _labels: &[usize]) -> Result<Array1<F>> {
        Ok(x.rows().into_iter().map(|r| r.iter().map(|&v| v * v).sum::<F>() * F::of(0.5)).collect())
    }

    fn grad_x(&self, x: ArrayView2<F>, _labels: &[usize]) -> Result<Array2<F>> {
        Ok(x.to_owned())
    }
}

/// Another energy shifted by a constant.
#[derive(Debug, Clone, Copy)]
pub struct Shifted<'a, E, F> {
    pub inner: &'a E,
    pub constant: F,
}

impl<F: Real, E: EnergyFunction<F>> EnergyFunction<F> for Shifted<'_, E, F> {
    fn energy(&self, x: ArrayView2<F>, labels: &[usize]) -> Result<Array1<F>> {
        Ok(self.inner.energy(x, labels)? + self.constant)
    }

    fn grad_x(&self, x: ArrayView2<F>, labels: &[usize]) -> Result<Array2<F>> {
        self.inner.grad_x(x, labels)
    }
}

/// Runs `cfg.steps` Langevin updates on every row of `x0`; row `i` draws its
/// noise from `chains[i]`.
pub fn langevin_revise<F: Real, E: EnergyFunction<F> + ?Sized>(
    x0: ArrayView2<F>,
    labels: &[usize],
    energy: &E,
    cfg: &LangevinConfig,
    chains: &mut [Rng],
) -> Result<Array2<F>> {
    if chains.len() != x0.nrows() {
        return Err(Error::Shape(format!("{} noise streams for {} chains", chains.len(), x0.nrows())));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite Langevin initial state".into()));
    }
    let half_step = F::of(cfg.delta * cfg.delta / 2.0);
    let delta = F::of(cfg.delta);
    let (lo, hi) = (-F::one(), F::one());
    let mut x = x0.to_owned();
    for step in 0..cfg.steps {
        let grad = energy.grad_x(x.view(), labels)?;
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { step });
        }
        for ((mut row, g), rng) in x.rows_mut().into_iter().zip(grad.rows()).zip(chains.iter_mut()) {
            for (v, &gv) in row.iter_mut().zip(g.iter()) {
                *v = *v - half_step * gv + delta * gaussian::<F>(rng);
                if cfg.clamp {
                    *v = v.max(lo).min(hi);
                }
            }
        }
    }
    Ok(x)
}

/// Output of one round of cooperative sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct CooperativeSamples<F> {
    /// Latent codes `ẑ ~ N(0, I)`.
    pub z_hat: Array2<F>,
    /// Generator proposals `x̂ = g(c, ẑ)`.
    pub x_hat: Array2<F>,
    /// Langevin-revised samples `x̃`.
    pub x_tilde: Array2<F>,
}

/// Draws `ẑ`, generates `x̂`, and revises it under the descriptor's energy.
pub fn cooperative_sample<F: Real>(
    labels: &[usize],
    generator: &Generator<F>,
    descriptor: &Descriptor<F>,
    cfg: &LangevinConfig,
    rng: &mut Rng,
) -> Result<CooperativeSamples<F>> {
    let n = labels.len();
    let d = generator.latent_dim;
    let z_hat = Array2::from_shape_vec((n, d), gaussian_vec::<F>(rng, n * d)).expect("latent batch");
    let x_hat = generator.generate(labels, z_hat.view())?;
    let mut chains: Vec<Rng> = (0..n).map(|_| fork(rng)).collect();
    let x_tilde = langevin_revise(x_hat.view(), labels, descriptor, cfg, &mut chains)?;
    Ok(CooperativeSamples { z_hat, x_hat, x_tilde })
}
