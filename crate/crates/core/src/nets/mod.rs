//! The two networks and the small forward/backward engine they run on.
//!
//! Parameters live in a [`ParamStore`]: a flat list of named tensors. Layers
//! hold only [`ParamId`]s into the store, so the descriptor's four heads all
//! address the same base-network entries, and gradients, optimizer moments and
//! checkpoints are just more stores with the same layout.

mod descriptor;
mod generator;
pub mod layers;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, LinalgScalar, ScalarOperand};
use num_traits::Float;

pub use descriptor::{Descriptor, DescriptorBatch, DescriptorPass, HeadGrads, HeadKind, Heads};
pub use generator::{Generator, GeneratorPass};

use crate::data::{sample_negative_label, LabelSampler};
use crate::error::Result;
use crate::rng::{gaussian, gaussian_vec, Rng};

/// Floating-point element type of the networks. Training runs in `f32`;
/// gradient checks instantiate the same code with `f64`.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<F>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "parameter shape/data mismatch");
        self.entries.push(ParamEntry { name: name.into(), shape, data });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn data(&self, id: ParamId) -> &[F] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.entries[id.0].data
    }

    pub fn mat(&self, id: ParamId) -> ArrayView2<'_, F> {
        let e = &self.entries[id.0];
        ArrayView2::from_shape((e.shape[0], e.shape[1]), &e.data).expect("2-d parameter")
    }

    pub fn mat_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        let e = &mut self.entries[id.0];
        ArrayViewMut2::from_shape((e.shape[0], e.shape[1]), &mut e.data).expect("2-d parameter")
    }

    pub fn vector(&self, id: ParamId) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.entries[id.0].data[..])
    }

    pub fn vector_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, F> {
        ArrayViewMut1::from(&mut self.entries[id.0].data[..])
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), shape: e.shape.clone(), data: vec![F::zero(); e.data.len()] })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for e in &mut self.entries {
            e.data.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Maps a flat coordinate (over all entries in order) to `(id, offset)`.
    pub fn locate(&self, mut flat: usize) -> (ParamId, usize) {
        for (i, e) in self.entries.iter().enumerate() {
            if flat < e.data.len() {
                return (ParamId(i), flat);
            }
            flat -= e.data.len();
        }
        panic!("flat coordinate out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: e.data.iter().map(|v| G::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

/// Synthetic pairs sharing one latent code per anchor:
/// `x⁺ = g(c⁺, z) + ε`, `x⁻ = g(c⁻, z) + ε` with `c⁻ ≠ c⁺` drawn from the
/// label histogram. The noise draw is shared too, so the two images differ
/// only through the label.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePairs<F> {
    pub z: Array2<F>,
    pub positives: Array2<F>,
    pub negatives: Array2<F>,
    pub negative_labels: Vec<usize>,
}

pub fn generate_contrastive_pairs<F: Real>(
    generator: &Generator<F>,
    positive_labels: &[usize],
    sampler: &LabelSampler,
    sigma: f64,
    rng: &mut Rng,
) -> Result<ContrastivePairs<F>> {
    let n = positive_labels.len();
    let negative_labels =
        positive_labels.iter().map(|&c| sample_negative_label(sampler, c, rng)).collect::<Result<Vec<_>>>()?;
    let d = generator.latent_dim;
    let z = Array2::from_shape_vec((n, d), gaussian_vec::<F>(rng, n * d)).expect("latent batch");
    let mut positives = generator.generate(positive_labels, z.view())?;
    let mut negatives = generator.generate(&negative_labels, z.view())?;
    let s = F::of(sigma);
    for (p, q) in positives.iter_mut().zip(negatives.iter_mut()) {
        let eps = s * gaussian::<F>(rng);
        *p += eps;
        *q += eps;
    }
    Ok(ContrastivePairs { z, positives, negatives, negative_labels })
}

/// `g(c, μ(x, c))`, with `c` from the caller or, if absent, the classifier's
/// prediction.
pub fn reconstruct<F: Real>(
    generator: &Generator<F>,
    descriptor: &Descriptor<F>,
    x: ArrayView2<F>,
    labels: Option<&[usize]>,
) -> Result<Array2<F>> {
    let labels = match labels {
        Some(l) => l.to_vec(),
        None => descriptor.predict(x)?,
    };
    let (mu, _) = descriptor.posterior(x, &labels)?;
    generator.generate(&labels, mu.view())
}
