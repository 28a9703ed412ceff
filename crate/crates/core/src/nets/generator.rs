use ndarray::{concatenate, Array2, ArrayView2, Axis};

use super::layers::{
    column_split, hwc_to_chw, chw_to_hwc, relu, relu_backward, tanh, tanh_backward, ConvGeom, ConvTranspose2d, Embedding,
    Linear,
};
use super::{ParamStore, Real};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::rng::{gaussian, Rng};
use crate::types::ImageShape;

#[derive(Debug, Clone)]
struct Layout {
    embed: Embedding,
    fc: Linear,
    seed_channels: usize,
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
}

/// Top-down decoder `g(c, z)`: label embedding and latent code, a dense layer
/// to a `(H/4, W/4)` seed, two stride-2 transposed convolutions, `tanh`.
#[derive(Debug, Clone)]
pub struct Generator<F> {
    pub params: ParamStore<F>,
    pub shape: ImageShape,
    pub latent_dim: usize,
    pub classes: usize,
    layout: Layout,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GeneratorPass<F> {
    labels: Vec<usize>,
    input: Array2<F>,
    seed: Array2<F>,
    hidden: Array2<F>,
    out_hwc: Array2<F>,
}

impl<F: Real> Generator<F> {
    pub fn new(cfg: &TrainConfig, shape: ImageShape, rng: &mut Rng) -> Result<Self> {
        if !shape.height.is_multiple_of(4) || !shape.width.is_multiple_of(4) || shape.height == 0 || shape.width == 0 {
            return Err(Error::Shape(format!(
                "generator needs image sides divisible by 4, got {}x{}",
                shape.height, shape.width
            )));
        }
        let gain = cfg.init_gain;
        let (sh, sw) = (shape.height / 4, shape.width / 4);
        let c0 = 4 * cfg.channels;
        let c1 = 2 * cfg.channels;
        let mut params = ParamStore::new();
        let embed = Embedding::new(&mut params, "gen.embed", cfg.num_classes, cfg.embed_dim, gain, rng);
        let fc = Linear::new(&mut params, "gen.fc", cfg.embed_dim + cfg.latent_dim, sh * sw * c0, gain, rng);
        let up1 = ConvTranspose2d::new(&mut params, "gen.up1", ConvGeom::new(2 * sh, 2 * sw, c1, 4, 2, 1), c0, gain, rng);
        let up2 = ConvTranspose2d::new(
            &mut params,
            "gen.up2",
            ConvGeom::new(shape.height, shape.width, shape.channels, 4, 2, 1),
            c1,
            gain,
            rng,
        );
        Ok(Generator {
            params,
            shape,
            latent_dim: cfg.latent_dim,
            classes: cfg.num_classes,
            layout: Layout { embed, fc, seed_channels: c0, up1, up2 },
        })
    }

    fn check(&self, labels: &[usize], z: &ArrayView2<F>) -> Result<()> {
        if z.nrows() != labels.len() || z.ncols() != self.latent_dim {
            return Err(Error::Shape(format!(
                "latent batch {:?} for {} labels (d = {})",
                z.dim(),
                labels.len(),
                self.latent_dim
            )));
        }
        if let Some(&label) = labels.iter().find(|&&c| c >= self.classes) {
            return Err(Error::LabelOutOfRange { label, classes: self.classes });
        }
        Ok(())
    }

    /// Images `(B, C*H*W)` plus the activations for [`Generator::backward`].
    pub fn forward(&self, labels: &[usize], z: ArrayView2<F>) -> Result<(Array2<F>, GeneratorPass<F>)> {
        self.check(labels, &z)?;
        let l = &self.layout;
        let p = &self.params;
        let emb = l.embed.forward(p, labels);
        let input = concatenate(Axis(1), &[emb.view(), z]).expect("generator input");
        let seed = relu(l.fc.forward(p, input.view()));
        debug_assert_eq!(seed.ncols() % l.seed_channels, 0);
        let hidden = relu(l.up1.forward(p, seed.view()));
        let out_hwc = tanh(l.up2.forward(p, hidden.view()));
        let s = self.shape;
        let images = hwc_to_chw(out_hwc.view(), s.channels, s.height, s.width);
        Ok((images, GeneratorPass { labels: labels.to_vec(), input, seed, hidden, out_hwc }))
    }

    /// The deterministic core `g(c, z)`.
    pub fn generate(&self, labels: &[usize], z: ArrayView2<F>) -> Result<Array2<F>> {
        Ok(self.forward(labels, z)?.0)
    }

    /// `g(c, z) + ε` with `ε ~ N(0, σ² I)`.
    pub fn generate_noisy(&self, labels: &[usize], z: ArrayView2<F>, sigma: f64, rng: &mut Rng) -> Result<Array2<F>> {
        let mut x = self.generate(labels, z)?;
        let s = F::of(sigma);
        x.mapv_inplace(|v| v + s * gaussian::<F>(rng));
        Ok(x)
    }

    /// Backpropagates `d_images` (in `(C, H, W)` order); returns `∂/∂z`.
    pub fn backward(
        &self,
        pass: &GeneratorPass<F>,
        d_images: ArrayView2<F>,
        mut grads: Option<&mut ParamStore<F>>,
    ) -> Array2<F> {
        let l = &self.layout;
        let p = &self.params;
        let s = self.shape;
        let d_out = chw_to_hwc(d_images, s.channels, s.height, s.width);
        let d_pre2 = tanh_backward(pass.out_hwc.view(), d_out.view());
        let d_hidden = l.up2.backward(p, pass.hidden.view(), d_pre2.view(), grads.as_deref_mut());
        let d_pre1 = relu_backward(pass.hidden.view(), d_hidden.view());
        let d_seed = l.up1.backward(p, pass.seed.view(), d_pre1.view(), grads.as_deref_mut());
        let d_fc = relu_backward(pass.seed.view(), d_seed.view());
        let d_input = l.fc.backward(p, pass.input.view(), d_fc.view(), grads.as_deref_mut());
        let (d_emb, d_z) = column_split(d_input.view(), l.embed.dim);
        if let Some(g) = grads {
            l.embed.backward(&pass.labels, d_emb.view(), g);
        }
        d_z
    }
}
