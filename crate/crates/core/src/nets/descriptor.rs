use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use super::layers::{chw_to_hwc, fan_in_std, hwc_to_chw, leaky_relu, leaky_relu_backward, tanh, tanh_backward, Conv2d, ConvGeom, Embedding, Linear};
use super::{ParamId, ParamStore, Real};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::rng::{gaussian, Rng};
use crate::types::{DescriptorOutput, ImageShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Energy,
    Inference,
    Hash,
    Classifier,
}

/// Which heads a forward pass evaluates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Heads {
    pub energy: bool,
    pub inference: bool,
    pub hash: bool,
    pub logits: bool,
}

impl Heads {
    pub const ALL: Heads = Heads { energy: true, inference: true, hash: true, logits: true };
    pub const ENERGY: Heads = Heads { energy: true, inference: false, hash: false, logits: false };
    pub const INFERENCE: Heads = Heads { energy: false, inference: true, hash: false, logits: false };
    pub const HASH: Heads = Heads { energy: false, inference: false, hash: true, logits: false };

    fn needs_labels(&self) -> bool {
        self.energy || self.inference
    }
}

/// Two dense layers on the base features, optionally conditioned on a label
/// embedding concatenated to the input.
#[derive(Debug, Clone)]
struct Head {
    embed: Option<Embedding>,
    fc1: Linear,
    fc2: Linear,
    squash: bool,
}

#[derive(Debug, Clone)]
struct HeadCache<F> {
    input: Array2<F>,
    hidden: Array2<F>,
    out: Array2<F>,
}

impl Head {
    #[allow(clippy::too_many_arguments)]
    fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &TrainConfig,
        conditioned: bool,
        outputs: usize,
        squash: bool,
        rng: &mut Rng,
    ) -> Self {
        let embed = conditioned
            .then(|| Embedding::new(store, &format!("{name}.embed"), cfg.num_classes, cfg.embed_dim, cfg.init_gain, rng));
        let inputs = cfg.feature_dim + embed.as_ref().map_or(0, |e| e.dim);
        let fc1 = Linear::new(store, &format!("{name}.fc1"), inputs, cfg.head_hidden, cfg.init_gain, rng);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), cfg.head_hidden, outputs, cfg.init_gain, rng);
        Head { embed, fc1, fc2, squash }
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.embed.iter().map(|e| e.table).collect();
        ids.extend([self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias]);
        ids
    }

    fn forward<F: Real>(&self, p: &ParamStore<F>, feat: ArrayView2<F>, labels: &[usize]) -> HeadCache<F> {
        let input = match &self.embed {
            Some(e) => concatenate(Axis(1), &[feat, e.forward(p, labels).view()]).expect("head input"),
            None => feat.to_owned(),
        };
        let hidden = leaky_relu(self.fc1.forward(p, input.view()));
        let mut out = self.fc2.forward(p, hidden.view());
        if self.squash {
            out = tanh(out);
        }
        HeadCache { input, hidden, out }
    }

    fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        cache: &HeadCache<F>,
        labels: &[usize],
        d_out: ArrayView2<F>,
        mut grads: Option<&mut ParamStore<F>>,
        feature_dim: usize,
    ) -> Array2<F> {
        let d_pre = if self.squash { tanh_backward(cache.out.view(), d_out) } else { d_out.to_owned() };
        let d_hidden = self.fc2.backward(p, cache.hidden.view(), d_pre.view(), grads.as_deref_mut());
        let d_hidden = leaky_relu_backward(cache.hidden.view(), d_hidden.view());
        let d_input = self.fc1.backward(p, cache.input.view(), d_hidden.view(), grads.as_deref_mut());
        if let (Some(e), Some(g)) = (&self.embed, grads) {
            e.backward(labels, d_input.slice(s![.., feature_dim..]), g);
        }
        d_input.slice(s![.., ..feature_dim]).to_owned()
    }
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<Conv2d>,
    fc: Linear,
    energy: Head,
    inference: Head,
    hash: Head,
    classifier: ParamId,
}

/// The multipurpose descriptor: a shared convolutional base `f_0` under four
/// heads (energy, inference, hash, linear classifier over the hash output).
#[derive(Debug, Clone)]
pub struct Descriptor<F> {
    pub params: ParamStore<F>,
    pub shape: ImageShape,
    pub code_bits: usize,
    pub latent_dim: usize,
    pub classes: usize,
    pub feature_dim: usize,
    layout: Layout,
}

#[derive(Debug, Clone)]
struct BaseCache<F> {
    cols: Vec<Array2<F>>,
    acts: Vec<Array2<F>>,
}

/// One forward pass, retained for [`Descriptor::backward`].
#[derive(Debug, Clone)]
pub struct DescriptorPass<F> {
    labels: Vec<usize>,
    base: BaseCache<F>,
    pub features: Array2<F>,
    energy: Option<HeadCache<F>>,
    inference: Option<HeadCache<F>>,
    hash: Option<HeadCache<F>>,
    pub logits: Option<Array2<F>>,
    latent_dim: usize,
}

impl<F: Real> DescriptorPass<F> {
    pub fn batch(&self) -> usize {
        self.features.nrows()
    }

    pub fn energy(&self) -> Option<Array1<F>> {
        self.energy.as_ref().map(|c| c.out.column(0).to_owned())
    }

    pub fn mu(&self) -> Option<ArrayView2<'_, F>> {
        self.inference.as_ref().map(|c| c.out.slice(s![.., ..self.latent_dim]))
    }

    pub fn logvar(&self) -> Option<ArrayView2<'_, F>> {
        self.inference.as_ref().map(|c| c.out.slice(s![.., self.latent_dim..]))
    }

    pub fn hash(&self) -> Option<ArrayView2<'_, F>> {
        self.hash.as_ref().map(|c| c.out.view())
    }
}

/// Upstream gradients for each head output of a [`DescriptorPass`].
#[derive(Debug, Clone, Default)]
pub struct HeadGrads<F> {
    pub energy: Option<Array1<F>>,
    pub mu: Option<Array2<F>>,
    pub logvar: Option<Array2<F>>,
    pub hash: Option<Array2<F>>,
    pub logits: Option<Array2<F>>,
}

/// All head outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBatch<F> {
    pub energy: Array1<F>,
    pub post_mean: Array2<F>,
    pub post_var: Array2<F>,
    pub hash: Array2<F>,
    pub logits: Array2<F>,
}

impl<F: Real> DescriptorBatch<F> {
    pub fn output(&self, i: usize) -> DescriptorOutput {
        let row = |a: &Array2<F>| a.row(i).iter().map(|v| v.as_f64()).collect();
        DescriptorOutput {
            energy: self.energy[i].as_f64(),
            post_mean: row(&self.post_mean),
            post_var: row(&self.post_var),
            hash: row(&self.hash),
            logits: row(&self.logits),
        }
    }
}

const BASE_BLOCKS: usize = 3;

impl<F: Real> Descriptor<F> {
    pub fn new(cfg: &TrainConfig, shape: ImageShape, rng: &mut Rng) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("empty image shape".into()));
        }
        let gain = cfg.init_gain;
        let mut params = ParamStore::new();
        let mut convs = Vec::with_capacity(BASE_BLOCKS);
        let (mut h, mut w, mut c) = (shape.height, shape.width, shape.channels);
        for i in 0..BASE_BLOCKS {
            let out_c = cfg.channels << i;
            let geom = ConvGeom::new(h, w, c, 3, 2, 1);
            convs.push(Conv2d::new(&mut params, &format!("desc.base.conv{}", i + 1), geom, out_c, gain, rng));
            (h, w, c) = (geom.out_h, geom.out_w, out_c);
        }
        let fc = Linear::new(&mut params, "desc.base.fc", h * w * c, cfg.feature_dim, gain, rng);
        let energy = Head::new(&mut params, "desc.energy", cfg, true, 1, false, rng);
        let inference = Head::new(&mut params, "desc.inference", cfg, true, 2 * cfg.latent_dim, false, rng);
        let hash = Head::new(&mut params, "desc.hash", cfg, false, cfg.code_bits, true, rng);
        let classifier = params.add(
            "desc.classifier",
            vec![cfg.code_bits, cfg.num_classes],
            (0..cfg.code_bits * cfg.num_classes).map(|_| gaussian::<F>(rng) * F::of(fan_in_std(cfg.code_bits, gain))).collect(),
        );
        Ok(Descriptor {
            params,
            shape,
            code_bits: cfg.code_bits,
            latent_dim: cfg.latent_dim,
            classes: cfg.num_classes,
            feature_dim: cfg.feature_dim,
            layout: Layout { convs, fc, energy, inference, hash, classifier },
        })
    }

    /// Parameters of the shared base `θ_0`.
    pub fn base_params(&self) -> Vec<ParamId> {
        let l = &self.layout;
        let mut ids: Vec<ParamId> = l.convs.iter().flat_map(|c| [c.weight, c.bias]).collect();
        ids.extend([l.fc.weight, l.fc.bias]);
        ids
    }

    /// Parameters that exist only in one head.
    pub fn head_only_params(&self, kind: HeadKind) -> Vec<ParamId> {
        let l = &self.layout;
        match kind {
            HeadKind::Energy => l.energy.ids(),
            HeadKind::Inference => l.inference.ids(),
            HeadKind::Hash => l.hash.ids(),
            HeadKind::Classifier => vec![l.classifier],
        }
    }

    /// The full parameter view of a head: the shared base followed by the
    /// head's own parameters. The classifier view also includes the hash head
    /// it reads from.
    pub fn head_params(&self, kind: HeadKind) -> Vec<ParamId> {
        let mut ids = self.base_params();
        if kind == HeadKind::Classifier {
            ids.extend(self.head_only_params(HeadKind::Hash));
        }
        ids.extend(self.head_only_params(kind));
        ids
    }

    pub fn classifier(&self) -> ParamId {
        self.layout.classifier
    }

    fn check(&self, x: &ArrayView2<F>, labels: &[usize], heads: Heads) -> Result<()> {
        if x.ncols() != self.shape.len() {
            return Err(Error::Shape(format!("image rows of {} values, expected {}", x.ncols(), self.shape.len())));
        }
        if heads.needs_labels() {
            if labels.len() != x.nrows() {
                return Err(Error::Shape(format!("{} labels for {} images", labels.len(), x.nrows())));
            }
            if let Some(&label) = labels.iter().find(|&&c| c >= self.classes) {
                return Err(Error::LabelOutOfRange { label, classes: self.classes });
            }
        }
        Ok(())
    }

    /// Runs the base once and the requested heads on its features.
    pub fn run(&self, x: ArrayView2<F>, labels: &[usize], heads: Heads) -> Result<DescriptorPass<F>> {
        self.check(&x, labels, heads)?;
        let l = &self.layout;
        let p = &self.params;
        let s = self.shape;
        let mut cur = chw_to_hwc(x, s.channels, s.height, s.width);
        let mut cols = Vec::with_capacity(BASE_BLOCKS);
        let mut acts = Vec::with_capacity(BASE_BLOCKS);
        for conv in &l.convs {
            let (y, col) = conv.forward(p, cur.view());
            cols.push(col);
            cur = leaky_relu(y);
            acts.push(cur.clone());
        }
        let features = leaky_relu(l.fc.forward(p, cur.view()));
        let energy = heads.energy.then(|| l.energy.forward(p, features.view(), labels));
        let inference = heads.inference.then(|| l.inference.forward(p, features.view(), labels));
        let hash = (heads.hash || heads.logits).then(|| l.hash.forward(p, features.view(), labels));
        let logits = if heads.logits { hash.as_ref().map(|h| h.out.dot(&p.mat(l.classifier))) } else { None };
        Ok(DescriptorPass {
            labels: labels.to_vec(),
            base: BaseCache { cols, acts },
            features,
            energy,
            inference,
            hash,
            logits,
            latent_dim: self.latent_dim,
        })
    }

    /// Backpropagates head gradients through one pass. Parameter gradients
    /// are accumulated into `grads` when given; the image gradient (in
    /// `(C, H, W)` order) is returned when `want_dx`.
    pub fn backward(
        &self,
        pass: &DescriptorPass<F>,
        g: HeadGrads<F>,
        mut grads: Option<&mut ParamStore<F>>,
        want_dx: bool,
    ) -> Option<Array2<F>> {
        let l = &self.layout;
        let p = &self.params;
        let batch = pass.batch();
        let mut d_feat = Array2::<F>::zeros((batch, self.feature_dim));

        if let (Some(de), Some(cache)) = (g.energy, &pass.energy) {
            let d_out = de.insert_axis(Axis(1));
            d_feat += &l.energy.backward(p, cache, &pass.labels, d_out.view(), grads.as_deref_mut(), self.feature_dim);
        }
        if g.mu.is_some() || g.logvar.is_some() {
            let cache = pass.inference.as_ref().expect("inference head was not run");
            let zeros = || Array2::<F>::zeros((batch, self.latent_dim));
            let d_mu = g.mu.unwrap_or_else(zeros);
            let d_lv = g.logvar.unwrap_or_else(zeros);
            let d_out = concatenate(Axis(1), &[d_mu.view(), d_lv.view()]).expect("inference grads");
            d_feat += &l.inference.backward(p, cache, &pass.labels, d_out.view(), grads.as_deref_mut(), self.feature_dim);
        }
        let mut d_hash = g.hash;
        if let Some(dl) = g.logits {
            let cache = pass.hash.as_ref().expect("hash head was not run");
            if let Some(gr) = grads.as_deref_mut() {
                ndarray::linalg::general_mat_mul(F::one(), &cache.out.t(), &dl, F::one(), &mut gr.mat_mut(l.classifier));
            }
            let via_logits = dl.dot(&p.mat(l.classifier).t());
            d_hash = Some(match d_hash {
                Some(dh) => dh + &via_logits,
                None => via_logits,
            });
        }
        if let Some(dh) = d_hash {
            let cache = pass.hash.as_ref().expect("hash head was not run");
            d_feat += &l.hash.backward(p, cache, &pass.labels, dh.view(), grads.as_deref_mut(), self.feature_dim);
        }

        let d_fc = leaky_relu_backward(pass.features.view(), d_feat.view());
        let last = pass.base.acts.last().expect("base activations");
        let mut d = l.fc.backward(p, last.view(), d_fc.view(), grads.as_deref_mut());
        for (i, conv) in l.convs.iter().enumerate().rev() {
            let d_pre = leaky_relu_backward(pass.base.acts[i].view(), d.view());
            d = conv.backward(p, pass.base.cols[i].view(), d_pre.view(), grads.as_deref_mut(), i > 0 || want_dx)?;
        }
        let s = self.shape;
        Some(hwc_to_chw(d.view(), s.channels, s.height, s.width))
    }

    pub fn forward_batch(&self, x: ArrayView2<F>, labels: &[usize]) -> Result<DescriptorBatch<F>> {
        let pass = self.run(x, labels, Heads::ALL)?;
        Ok(DescriptorBatch {
            energy: pass.energy().expect("energy"),
            post_mean: pass.mu().expect("mu").to_owned(),
            post_var: pass.logvar().expect("logvar").mapv(|v| v.exp()),
            hash: pass.hash().expect("hash").to_owned(),
            logits: pass.logits.clone().expect("logits"),
        })
    }

    pub fn forward_one(&self, pixels: &[F], label: usize) -> Result<DescriptorOutput> {
        let x = ArrayView2::from_shape((1, pixels.len()), pixels).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.forward_batch(x, &[label])?.output(0))
    }

    /// `f_E(x, c)` per row.
    pub fn energy(&self, x: ArrayView2<F>, labels: &[usize]) -> Result<Array1<F>> {
        Ok(self.run(x, labels, Heads::ENERGY)?.energy().expect("energy"))
    }

    /// `∂f_E/∂x` per row; descriptor parameters are left untouched.
    pub fn energy_grad_x(&self, x: ArrayView2<F>, labels: &[usize]) -> Result<Array2<F>> {
        let pass = self.run(x, labels, Heads::ENERGY)?;
        let g = HeadGrads { energy: Some(Array1::from_elem(pass.batch(), F::one())), ..Default::default() };
        Ok(self.backward(&pass, g, None, true).expect("input gradient"))
    }

    /// Real-valued hash codes `f_H(x)`.
    pub fn hash(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        Ok(self.run(x, &[], Heads::HASH)?.hash().expect("hash").to_owned())
    }

    pub fn logits(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        let heads = Heads { logits: true, ..Default::default() };
        Ok(self.run(x, &[], heads)?.logits.expect("logits"))
    }

    /// Most likely class per row.
    pub fn predict(&self, x: ArrayView2<F>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, F::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn features(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        Ok(self.run(x, &[], Heads::default())?.features)
    }

    /// Posterior mean and variance of the inference head.
    pub fn posterior(&self, x: ArrayView2<F>, labels: &[usize]) -> Result<(Array2<F>, Array2<F>)> {
        let pass = self.run(x, labels, Heads::INFERENCE)?;
        Ok((pass.mu().expect("mu").to_owned(), pass.logvar().expect("logvar").mapv(|v| v.exp())))
    }

    /// `z = μ + sqrt(v) ⊙ ε`. `var_cap` clamps the variance from above; a cap
    /// of zero returns `μ` exactly.
    pub fn infer_latent(&self, x: ArrayView2<F>, labels: &[usize], rng: &mut Rng, var_cap: Option<f64>) -> Result<Array2<F>> {
        let (mu, mut var) = self.posterior(x, labels)?;
        if let Some(cap) = var_cap {
            let cap = F::of(cap);
            var.mapv_inplace(|v| v.min(cap));
        }
        let mut z = mu;
        ndarray::Zip::from(&mut z).and(&var).for_each(|zi, &v| *zi += v.sqrt() * gaussian::<F>(rng));
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, seeded_rng};

    fn cfg() -> TrainConfig {
        TrainConfig {
            code_bits: 6,
            latent_dim: 3,
            num_classes: 4,
            channels: 3,
            feature_dim: 16,
            head_hidden: 8,
            embed_dim: 3,
            init_gain: 1.0,
            ..Default::default()
        }
    }

    fn images(rng: &mut Rng, b: usize, shape: ImageShape) -> Array2<f64> {
        Array2::from_shape_vec((b, shape.len()), gaussian_vec::<f64>(rng, b * shape.len()))
            .unwrap()
            .mapv(|v| v.clamp(-1.0, 1.0))
    }

    #[test]
    fn output_shapes_follow_config() {
        for (k, l) in [(6, 4), (16, 10)] {
            let c = TrainConfig { code_bits: k, num_classes: l, ..cfg() };
            let shape = ImageShape::new(2, 8, 8);
            let mut rng = seeded_rng(1);
            let d = Descriptor::<f64>::new(&c, shape, &mut rng).unwrap();
            let x = images(&mut rng, 3, shape);
            let out = d.forward_batch(x.view(), &[0, 1, 2]).unwrap();
            assert_eq!(out.hash.dim(), (3, k));
            assert_eq!(out.logits.dim(), (3, l));
            assert_eq!(out.post_mean.dim(), (3, 3));
            assert_eq!(out.energy.len(), 3);
        }
    }

    #[test]
    fn forward_is_pure_and_variance_positive() {
        let shape = ImageShape::new(1, 12, 12);
        let mut rng = seeded_rng(2);
        let d = Descriptor::<f32>::new(&TrainConfig { init_gain: 0.1, ..cfg() }, shape, &mut rng).unwrap();
        let x = images(&mut rng, 4, shape).mapv(|v| v as f32);
        let a = d.forward_batch(x.view(), &[0, 1, 2, 3]).unwrap();
        let b = d.forward_batch(x.view(), &[0, 1, 2, 3]).unwrap();
        assert_eq!(a, b);
        assert!(a.post_var.iter().all(|&v| v > 0.0));
        assert!((0..4).all(|i| a.output(i).is_finite()));
    }

    #[test]
    fn heads_share_base_storage() {
        let d = Descriptor::<f64>::new(&cfg(), ImageShape::new(1, 8, 8), &mut seeded_rng(3)).unwrap();
        let base = d.base_params();
        for kind in [HeadKind::Energy, HeadKind::Inference, HeadKind::Hash, HeadKind::Classifier] {
            assert_eq!(&d.head_params(kind)[..base.len()], &base[..]);
        }
        let mut all: Vec<ParamId> = base.clone();
        for kind in [HeadKind::Energy, HeadKind::Inference, HeadKind::Hash, HeadKind::Classifier] {
            all.extend(d.head_only_params(kind));
        }
        all.sort();
        all.dedup();
        assert_eq!(all.len(), d.params.len(), "every parameter belongs to exactly one block");
    }

    #[test]
    fn label_range_checked() {
        let shape = ImageShape::new(1, 8, 8);
        let d = Descriptor::<f64>::new(&cfg(), shape, &mut seeded_rng(4)).unwrap();
        let x = Array2::zeros((1, shape.len()));
        assert!(matches!(d.energy(x.view(), &[4]), Err(Error::LabelOutOfRange { label: 4, classes: 4 })));
        // hashing does not look at labels
        assert!(d.hash(x.view()).is_ok());
    }

    #[test]
    fn zero_variance_cap_returns_mean() {
        let shape = ImageShape::new(1, 8, 8);
        let mut rng = seeded_rng(5);
        let d = Descriptor::<f64>::new(&cfg(), shape, &mut rng).unwrap();
        let x = images(&mut rng, 2, shape);
        let (mu, _) = d.posterior(x.view(), &[1, 3]).unwrap();
        let z = d.infer_latent(x.view(), &[1, 3], &mut rng, Some(0.0)).unwrap();
        assert_eq!(z, mu);
    }

    #[test]
    fn infer_latent_reproducible() {
        let shape = ImageShape::new(1, 8, 8);
        let mut rng = seeded_rng(6);
        let d = Descriptor::<f64>::new(&cfg(), shape, &mut rng).unwrap();
        let x = images(&mut rng, 2, shape);
        let a = d.infer_latent(x.view(), &[0, 1], &mut seeded_rng(9), None).unwrap();
        let b = d.infer_latent(x.view(), &[0, 1], &mut seeded_rng(9), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reparameterized_samples_center_on_mean() {
        let shape = ImageShape::new(1, 8, 8);
        let mut rng = seeded_rng(7);
        let d = Descriptor::<f64>::new(&cfg(), shape, &mut rng).unwrap();
        let x = images(&mut rng, 1, shape);
        let n = 10_000;
        let xs = x.broadcast((n, shape.len())).unwrap().to_owned();
        let labels = vec![2; n];
        let z = d.infer_latent(xs.view(), &labels, &mut rng, None).unwrap();
        let (mu, var) = d.posterior(x.view(), &[2]).unwrap();
        let mean = z.mean_axis(Axis(0)).unwrap();
        for j in 0..3 {
            let bound = 4.0 * (var[[0, j]] / n as f64).sqrt();
            assert!((mean[j] - mu[[0, j]]).abs() < bound, "dim {j}: {} vs {}", mean[j], mu[[0, j]]);
        }
    }

    #[test]
    fn energy_input_gradient_matches_finite_differences() {
        let shape = ImageShape::new(2, 8, 8);
        let mut rng = seeded_rng(8);
        let d = Descriptor::<f64>::new(&cfg(), shape, &mut rng).unwrap();
        let x = images(&mut rng, 1, shape).mapv(|v| v * 0.8);
        let grad = d.energy_grad_x(x.view(), &[1]).unwrap();
        let h = 1e-6;
        use rand::Rng as _;
        for _ in 0..20 {
            let j = rng.random_range(0..shape.len());
            let mut xp = x.clone();
            xp[[0, j]] += h;
            let mut xm = x.clone();
            xm[[0, j]] -= h;
            let numeric = (d.energy(xp.view(), &[1]).unwrap()[0] - d.energy(xm.view(), &[1]).unwrap()[0]) / (2.0 * h);
            let analytic = grad[[0, j]];
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-10);
            assert!(err < 1e-4, "coord {j}: numeric {numeric} analytic {analytic}");
        }
    }
}
