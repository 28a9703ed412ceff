//! Layers with hand-written backward passes.
//!
//! Image batches are `(B, H*W*C)` matrices in channel-last order; convolutions
//! are im2col followed by one GEMM. Each `backward` accumulates parameter
//! gradients into `grads` when given and returns the input gradient.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};

use super::{ParamId, ParamStore, Real};
use crate::rng::{gaussian, Rng};

fn normal_init<F: Real>(n: usize, std: f64, rng: &mut Rng) -> Vec<F> {
    (0..n).map(|_| gaussian::<F>(rng) * F::of(std)).collect()
}

/// He-scaled standard deviation `gain * sqrt(2 / fan_in)`.
pub fn fan_in_std(fan_in: usize, gain: f64) -> f64 {
    gain * (2.0 / fan_in.max(1) as f64).sqrt()
}

fn accumulate_matmul<F: Real>(grads: &mut ParamStore<F>, id: ParamId, a: ArrayView2<F>, b: ArrayView2<F>) {
    let mut g = grads.mat_mut(id);
    general_mat_mul(F::one(), &a, &b, F::one(), &mut g);
}

fn accumulate_bias<F: Real>(grads: &mut ParamStore<F>, id: ParamId, dy: ArrayView2<F>) {
    let mut g = grads.vector_mut(id);
    for row in dy.rows() {
        g += &row;
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), vec![inputs, outputs], normal_init(inputs * outputs, fan_in_std(inputs, gain), rng));
        let bias = store.add(format!("{name}.bias"), vec![outputs], vec![F::zero(); outputs]);
        Linear { weight, bias, inputs, outputs }
    }

    pub fn forward<F: Real>(&self, p: &ParamStore<F>, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&p.mat(self.weight));
        y += &p.vector(self.bias);
        y
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        x: ArrayView2<F>,
        dy: ArrayView2<F>,
        grads: Option<&mut ParamStore<F>>,
    ) -> Array2<F> {
        if let Some(g) = grads {
            accumulate_matmul(g, self.weight, x.t(), dy);
            accumulate_bias(g, self.bias, dy);
        }
        dy.dot(&p.mat(self.weight).t())
    }
}

/// Lookup table, the conditioning path for class labels.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, count: usize, dim: usize, gain: f64, rng: &mut Rng) -> Self {
        let table = store.add(format!("{name}.table"), vec![count, dim], normal_init(count * dim, gain, rng));
        Embedding { table, count, dim }
    }

    pub fn forward<F: Real>(&self, p: &ParamStore<F>, labels: &[usize]) -> Array2<F> {
        let t = p.mat(self.table);
        let mut out = Array2::zeros((labels.len(), self.dim));
        for (mut row, &c) in out.rows_mut().into_iter().zip(labels) {
            row.assign(&t.row(c));
        }
        out
    }

    pub fn backward<F: Real>(&self, labels: &[usize], dy: ArrayView2<F>, grads: &mut ParamStore<F>) {
        let mut g = grads.mat_mut(self.table);
        for (row, &c) in dy.rows().into_iter().zip(labels) {
            let mut target = g.row_mut(c);
            target += &row;
        }
    }
}

/// Geometry of a convolution from a `(h, w, c)` image to `(out_h, out_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(h: usize, w: usize, c: usize, k: usize, stride: usize, pad: usize) -> Self {
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        ConvGeom { h, w, c, k, stride, pad, out_h, out_w }
    }

    pub fn patch(&self) -> usize {
        self.k * self.k * self.c
    }

    pub fn image_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

/// Unfolds `(B, h*w*c)` into `(B*out_h*out_w, k*k*c)` patches.
pub fn im2col<F: Real>(x: ArrayView2<F>, g: &ConvGeom) -> Array2<F> {
    let batch = x.nrows();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let patch = g.patch();
    let mut col = vec![F::zero(); batch * g.positions() * patch];
    for b in 0..batch {
        let img = &xs[b * g.image_len()..(b + 1) * g.image_len()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * patch;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        if let Some((iy, ix)) = g.source(oy, ky, ox, kx) {
                            let src = (iy * g.w + ix) * g.c;
                            let dst = row + (ky * g.k + kx) * g.c;
                            col[dst..dst + g.c].copy_from_slice(&img[src..src + g.c]);
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((batch * g.positions(), patch), col).expect("im2col shape")
}

/// Adjoint of [`im2col`]: scatters patches back, summing overlaps.
pub fn col2im<F: Real>(col: ArrayView2<F>, batch: usize, g: &ConvGeom) -> Array2<F> {
    let col = col.as_standard_layout();
    let cs = col.as_slice().expect("standard layout");
    let patch = g.patch();
    let mut out = vec![F::zero(); batch * g.image_len()];
    for b in 0..batch {
        let img = &mut out[b * g.image_len()..(b + 1) * g.image_len()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * patch;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        if let Some((iy, ix)) = g.source(oy, ky, ox, kx) {
                            let dst = (iy * g.w + ix) * g.c;
                            let src = row + (ky * g.k + kx) * g.c;
                            for (o, &v) in img[dst..dst + g.c].iter_mut().zip(&cs[src..src + g.c]) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((batch, g.image_len()), out).expect("col2im shape")
}

fn add_channel_bias<F: Real>(y: &mut Array2<F>, bias: ndarray::ArrayView1<F>) {
    let c = bias.len();
    for v in y.as_slice_mut().expect("contiguous").chunks_mut(c) {
        for (o, &b) in v.iter_mut().zip(bias.iter()) {
            *o += b;
        }
    }
}

fn channel_rows<F: Real>(x: ArrayView2<'_, F>, c: usize) -> ArrayView2<'_, F> {
    let n = x.len() / c;
    let data = x.to_slice().expect("channel-last reshape requires contiguous input");
    ArrayView2::from_shape((n, c), data).expect("channel-last reshape")
}

/// Strided 2-d convolution, weight `(k*k*c_in, c_out)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub out_c: usize,
}

impl Conv2d {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, geom: ConvGeom, out_c: usize, gain: f64, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), vec![geom.patch(), out_c], normal_init(geom.patch() * out_c, fan_in_std(geom.patch(), gain), rng));
        let bias = store.add(format!("{name}.bias"), vec![out_c], vec![F::zero(); out_c]);
        Conv2d { weight, bias, geom, out_c }
    }

    pub fn output_len(&self) -> usize {
        self.geom.positions() * self.out_c
    }

    /// Returns the output and the patch matrix needed by `backward`.
    pub fn forward<F: Real>(&self, p: &ParamStore<F>, x: ArrayView2<F>) -> (Array2<F>, Array2<F>) {
        let batch = x.nrows();
        let col = im2col(x, &self.geom);
        let mut y = col.dot(&p.mat(self.weight));
        y += &p.vector(self.bias);
        let y = y.into_shape_with_order((batch, self.output_len())).expect("conv output");
        (y, col)
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        col: ArrayView2<F>,
        dy: ArrayView2<F>,
        grads: Option<&mut ParamStore<F>>,
        want_dx: bool,
    ) -> Option<Array2<F>> {
        let batch = dy.nrows();
        let dy_std = dy.as_standard_layout();
        let dy_rows = channel_rows(dy_std.view(), self.out_c);
        if let Some(g) = grads {
            accumulate_matmul(g, self.weight, col.t(), dy_rows);
            accumulate_bias(g, self.bias, dy_rows);
        }
        want_dx.then(|| {
            let dcol = dy_rows.dot(&p.mat(self.weight).t());
            col2im(dcol.view(), batch, &self.geom)
        })
    }
}

/// Transposed convolution; `geom` describes the forward convolution that maps
/// this layer's output back to its input, so `geom.c` is the output channel
/// count and `(geom.out_h, geom.out_w)` the input spatial size.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
    pub in_c: usize,
}

impl ConvTranspose2d {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, geom: ConvGeom, in_c: usize, gain: f64, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), vec![in_c, geom.patch()], normal_init(in_c * geom.patch(), fan_in_std(in_c * geom.k * geom.k / (geom.stride * geom.stride), gain), rng));
        let bias = store.add(format!("{name}.bias"), vec![geom.c], vec![F::zero(); geom.c]);
        ConvTranspose2d { weight, bias, geom, in_c }
    }

    pub fn forward<F: Real>(&self, p: &ParamStore<F>, x: ArrayView2<F>) -> Array2<F> {
        let batch = x.nrows();
        let rows = channel_rows(x, self.in_c);
        let col = rows.dot(&p.mat(self.weight));
        let mut y = col2im(col.view(), batch, &self.geom);
        add_channel_bias(&mut y, p.vector(self.bias));
        y
    }

    pub fn backward<F: Real>(
        &self,
        p: &ParamStore<F>,
        x: ArrayView2<F>,
        dy: ArrayView2<F>,
        grads: Option<&mut ParamStore<F>>,
    ) -> Array2<F> {
        let batch = dy.nrows();
        let dcol = im2col(dy, &self.geom);
        if let Some(g) = grads {
            let rows = channel_rows(x, self.in_c);
            accumulate_matmul(g, self.weight, rows.t(), dcol.view());
            accumulate_bias(g, self.bias, channel_rows(dy, self.geom.c));
        }
        let dx = dcol.dot(&p.mat(self.weight).t());
        dx.into_shape_with_order((batch, self.geom.positions() * self.in_c)).expect("convT dx")
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu<F: Real>(mut x: Array2<F>) -> Array2<F> {
    let s = F::of(LEAKY_SLOPE);
    x.mapv_inplace(|v| if v > F::zero() { v } else { v * s });
    x
}

/// Gradient through a leaky ReLU given its output (the sign is preserved).
pub fn leaky_relu_backward<F: Real>(y: ArrayView2<F>, dy: ArrayView2<F>) -> Array2<F> {
    let s = F::of(LEAKY_SLOPE);
    let mut out = dy.to_owned();
    ndarray::Zip::from(&mut out).and(&y).for_each(|d, &v| {
        if v <= F::zero() {
            *d *= s
        }
    });
    out
}

pub fn relu<F: Real>(mut x: Array2<F>) -> Array2<F> {
    x.mapv_inplace(|v| v.max(F::zero()));
    x
}

pub fn relu_backward<F: Real>(y: ArrayView2<F>, dy: ArrayView2<F>) -> Array2<F> {
    let mut out = dy.to_owned();
    ndarray::Zip::from(&mut out).and(&y).for_each(|d, &v| {
        if v <= F::zero() {
            *d = F::zero()
        }
    });
    out
}

pub fn tanh<F: Real>(mut x: Array2<F>) -> Array2<F> {
    x.mapv_inplace(|v| v.tanh());
    x
}

pub fn tanh_backward<F: Real>(y: ArrayView2<F>, dy: ArrayView2<F>) -> Array2<F> {
    let mut out = dy.to_owned();
    ndarray::Zip::from(&mut out).and(&y).for_each(|d, &v| *d *= F::one() - v * v);
    out
}

/// Reorders `(B, C*H*W)` rows into `(B, H*W*C)`.
pub fn chw_to_hwc<F: Real>(x: ArrayView2<F>, c: usize, h: usize, w: usize) -> Array2<F> {
    if c == 1 {
        return x.to_owned();
    }
    let mut out = Array2::zeros(x.raw_dim());
    for (src, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
        for ch in 0..c {
            for p in 0..h * w {
                dst[p * c + ch] = src[ch * h * w + p];
            }
        }
    }
    out
}

pub fn hwc_to_chw<F: Real>(x: ArrayView2<F>, c: usize, h: usize, w: usize) -> Array2<F> {
    if c == 1 {
        return x.to_owned();
    }
    let mut out = Array2::zeros(x.raw_dim());
    for (src, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
        for ch in 0..c {
            for p in 0..h * w {
                dst[ch * h * w + p] = src[p * c + ch];
            }
        }
    }
    out
}

pub fn column_split<F: Real>(x: ArrayView2<F>, at: usize) -> (Array2<F>, Array2<F>) {
    let (a, b) = x.view().split_at(Axis(1), at);
    (a.to_owned(), b.to_owned())
}
