//! Layers with explicit forward caches and backward passes.
//!
//! Activations are 2-D with one row per (sample, timestep), samples
//! contiguous and time-major within a sample, and one column per channel.
//! Gradients accumulate into the `d*` fields until [`Layer::visit`] callers
//! reset them.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis, NdFloat};
use rand::Rng as _;

use crate::rng::Rng;

/// Float types the network runs in (`f32` for training, `f64` for checks).
pub trait Scalar: NdFloat + Default + num_traits::FromPrimitive {
    fn of(v: f64) -> Self;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
}

/// Parameter visitor: `(name, values, gradients)`.
pub type ParamVisitor<'a, S> = dyn FnMut(&str, &mut [S], &mut [S]) + 'a;

pub trait Layer<S: Scalar> {
    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, S>);
}

fn uniform_fill<S: Scalar>(shape: (usize, usize), bound: f64, rng: &mut Rng) -> Array2<S> {
    Array2::from_shape_simple_fn(shape, || S::of(rng.random_range(-bound..=bound)))
}

/// Dense map applied row-wise: `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear<S> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
    pub d_weight: Array2<S>,
    pub d_bias: Array1<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            weight: uniform_fill((d_in, d_out), 1.0 / (d_in as f64).sqrt(), rng),
            bias: Array1::zeros(d_out),
            d_weight: Array2::zeros((d_in, d_out)),
            d_bias: Array1::zeros(d_out),
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Array2<S>, dy: &Array2<S>) -> Array2<S> {
        general_mat_mul(S::one(), &x.t(), dy, S::one(), &mut self.d_weight);
        self.d_bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl<S: Scalar> Layer<S> for Linear<S> {
    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        f(
            &format!("{prefix}.weight"),
            self.weight.as_slice_mut().unwrap(),
            self.d_weight.as_slice_mut().unwrap(),
        );
        f(
            &format!("{prefix}.bias"),
            self.bias.as_slice_mut().unwrap(),
            self.d_bias.as_slice_mut().unwrap(),
        );
    }
}

/// Length-preserving 1-D convolution over time (odd kernel, zero padding),
/// computed as an im2col product. Weight rows are indexed `tap * c_in + ch`.
#[derive(Clone, Debug)]
pub struct Conv1d<S> {
    pub kernel: usize,
    pub c_in: usize,
    pub weight: Array2<S>,
    pub bias: Array1<S>,
    pub d_weight: Array2<S>,
    pub d_bias: Array1<S>,
}

impl<S: Scalar> Conv1d<S> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, rng: &mut Rng) -> Self {
        let fan_in = kernel * c_in;
        Self {
            kernel,
            c_in,
            weight: uniform_fill((fan_in, c_out), 1.0 / (fan_in as f64).sqrt(), rng),
            bias: Array1::zeros(c_out),
            d_weight: Array2::zeros((fan_in, c_out)),
            d_bias: Array1::zeros(c_out),
        }
    }

    fn im2col(&self, x: &Array2<S>, len: usize) -> Array2<S> {
        let rows = x.nrows();
        let (k, c) = (self.kernel, self.c_in);
        let pad = k / 2;
        let mut cols = Array2::zeros((rows, k * c));
        let x = x.as_standard_layout();
        let src = x.as_slice().unwrap();
        let dst = cols.as_slice_mut().unwrap();
        for (r, out_row) in dst.chunks_mut(k * c).enumerate() {
            let (b, t) = (r / len, r % len);
            for tap in 0..k {
                let tt = t + tap;
                if tt < pad || tt - pad >= len {
                    continue;
                }
                let from = (b * len + tt - pad) * c;
                out_row[tap * c..(tap + 1) * c].copy_from_slice(&src[from..from + c]);
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<S>, len: usize) -> Array2<S> {
        let rows = dcols.nrows();
        let (k, c) = (self.kernel, self.c_in);
        let pad = k / 2;
        let mut dx = Array2::zeros((rows, c));
        let dcols = dcols.as_standard_layout();
        let src = dcols.as_slice().unwrap();
        let dst = dx.as_slice_mut().unwrap();
        for (r, grad_row) in src.chunks(k * c).enumerate() {
            let (b, t) = (r / len, r % len);
            for tap in 0..k {
                let tt = t + tap;
                if tt < pad || tt - pad >= len {
                    continue;
                }
                let to = (b * len + tt - pad) * c;
                for (d, &g) in dst[to..to + c].iter_mut().zip(&grad_row[tap * c..(tap + 1) * c]) {
                    *d += g;
                }
            }
        }
        dx
    }

    /// Returns the output and the im2col buffer needed by `backward`.
    pub fn forward(&self, x: &Array2<S>, len: usize) -> (Array2<S>, Array2<S>) {
        let cols = self.im2col(x, len);
        let mut y = cols.dot(&self.weight);
        y += &self.bias;
        (y, cols)
    }

    pub fn backward(&mut self, cols: &Array2<S>, dy: &Array2<S>, len: usize) -> Array2<S> {
        general_mat_mul(S::one(), &cols.t(), dy, S::one(), &mut self.d_weight);
        self.d_bias += &dy.sum_axis(Axis(0));
        let dcols = dy.dot(&self.weight.t());
        self.col2im(&dcols, len)
    }
}

impl<S: Scalar> Layer<S> for Conv1d<S> {
    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        f(
            &format!("{prefix}.weight"),
            self.weight.as_slice_mut().unwrap(),
            self.d_weight.as_slice_mut().unwrap(),
        );
        f(
            &format!("{prefix}.bias"),
            self.bias.as_slice_mut().unwrap(),
            self.d_bias.as_slice_mut().unwrap(),
        );
    }
}

pub fn relu_inplace<S: Scalar>(x: &mut Array2<S>) {
    x.mapv_inplace(|v| if v > S::zero() { v } else { S::zero() });
}

/// Zeroes `dy` where the ReLU output was not positive.
pub fn relu_backward<S: Scalar>(out: &Array2<S>, dy: &mut Array2<S>) {
    ndarray::Zip::from(dy).and(out).for_each(|d, &o| {
        if o <= S::zero() {
            *d = S::zero();
        }
    });
}

/// Inverted dropout mask (entries 0 or `1/(1-p)`), or `None` when inactive.
pub fn dropout_mask<S: Scalar>(
    shape: (usize, usize),
    p: f64,
    rng: Option<&mut Rng>,
) -> Option<Array2<S>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = S::of(1.0 / (1.0 - p));
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < p {
            S::zero()
        } else {
            keep
        }
    }))
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm<S> {
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
    pub d_gamma: Array1<S>,
    pub d_beta: Array1<S>,
}

pub struct LayerNormCache<S> {
    x_hat: Array2<S>,
    inv_std: Array1<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            d_gamma: Array1::zeros(dim),
            d_beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> (Array2<S>, LayerNormCache<S>) {
        let d = S::of(x.ncols() as f64);
        let mut x_hat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in x_hat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).fold(S::zero(), |a, b| a + b) / d;
            *is = S::one() / (var + S::of(LN_EPS)).sqrt();
            let k = *is;
            row.mapv_inplace(|v| v * k);
        }
        let mut y = &x_hat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { x_hat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<S>, dy: &Array2<S>) -> Array2<S> {
        self.d_gamma += &(dy * &cache.x_hat).sum_axis(Axis(0));
        self.d_beta += &dy.sum_axis(Axis(0));
        let d = S::of(dy.ncols() as f64);
        let dx_hat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), &is) in dx
            .rows_mut()
            .into_iter()
            .zip(dx_hat.rows())
            .zip(cache.x_hat.rows())
            .zip(cache.inv_std.iter())
        {
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            for ((o, &gi), &xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = is / d * (d * gi - sum_g - xi * sum_gx);
            }
        }
        dx
    }
}

impl<S: Scalar> Layer<S> for LayerNorm<S> {
    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        f(
            &format!("{prefix}.gamma"),
            self.gamma.as_slice_mut().unwrap(),
            self.d_gamma.as_slice_mut().unwrap(),
        );
        f(
            &format!("{prefix}.beta"),
            self.beta.as_slice_mut().unwrap(),
            self.d_beta.as_slice_mut().unwrap(),
        );
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows<S: Scalar>(x: &mut Array2<S>) {
    for mut row in x.rows_mut() {
        let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head scaled dot-product self-attention with output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<S> {
    pub n_heads: usize,
    pub query: Linear<S>,
    pub key: Linear<S>,
    pub value: Linear<S>,
    pub output: Linear<S>,
}

pub struct AttentionCache<S> {
    q: Array2<S>,
    k: Array2<S>,
    v: Array2<S>,
    concat: Array2<S>,
    /// One `T x T` weight matrix per (sample, head), sample-major.
    pub weights: Vec<Array2<S>>,
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new(d_model: usize, n_heads: usize, rng: &mut Rng) -> Self {
        Self {
            n_heads,
            query: Linear::new(d_model, d_model, rng),
            key: Linear::new(d_model, d_model, rng),
            value: Linear::new(d_model, d_model, rng),
            output: Linear::new(d_model, d_model, rng),
        }
    }

    fn head_width(&self) -> usize {
        self.query.weight.ncols() / self.n_heads
    }

    pub fn forward(&self, h: &Array2<S>, len: usize) -> (Array2<S>, AttentionCache<S>) {
        let q = self.query.forward(h);
        let k = self.key.forward(h);
        let v = self.value.forward(h);
        let dk = self.head_width();
        let scale = S::of(1.0 / (dk as f64).sqrt());
        let batch = h.nrows() / len;
        let mut concat = Array2::zeros(h.raw_dim());
        let mut weights = Vec::with_capacity(batch * self.n_heads);
        for b in 0..batch {
            let rows = b * len..(b + 1) * len;
            for head in 0..self.n_heads {
                let cols = head * dk..(head + 1) * dk;
                let qs = q.slice(s![rows.clone(), cols.clone()]);
                let ks = k.slice(s![rows.clone(), cols.clone()]);
                let vs = v.slice(s![rows.clone(), cols.clone()]);
                let mut a = qs.dot(&ks.t());
                a.mapv_inplace(|x| x * scale);
                softmax_rows(&mut a);
                let mut out = concat.slice_mut(s![rows.clone(), cols]);
                general_mat_mul(S::one(), &a, &vs, S::zero(), &mut out);
                weights.push(a);
            }
        }
        let out = self.output.forward(&concat);
        (
            out,
            AttentionCache {
                q,
                k,
                v,
                concat,
                weights,
            },
        )
    }

    pub fn backward(
        &mut self,
        h: &Array2<S>,
        cache: &AttentionCache<S>,
        d_out: &Array2<S>,
        len: usize,
    ) -> Array2<S> {
        let d_concat = self.output.backward(&cache.concat, d_out);
        let dk = self.head_width();
        let scale = S::of(1.0 / (dk as f64).sqrt());
        let batch = h.nrows() / len;
        let mut dq = Array2::zeros(h.raw_dim());
        let mut dkey = Array2::zeros(h.raw_dim());
        let mut dv = Array2::zeros(h.raw_dim());
        for b in 0..batch {
            let rows = b * len..(b + 1) * len;
            for head in 0..self.n_heads {
                let cols = head * dk..(head + 1) * dk;
                let a = &cache.weights[b * self.n_heads + head];
                let d_o = d_concat.slice(s![rows.clone(), cols.clone()]);
                let qs = cache.q.slice(s![rows.clone(), cols.clone()]);
                let ks = cache.k.slice(s![rows.clone(), cols.clone()]);
                let vs = cache.v.slice(s![rows.clone(), cols.clone()]);
                let da = d_o.dot(&vs.t());
                general_mat_mul(
                    S::one(),
                    &a.t(),
                    &d_o,
                    S::zero(),
                    &mut dv.slice_mut(s![rows.clone(), cols.clone()]),
                );
                // softmax backward, then the 1/sqrt(dk) scale
                let mut ds = &da * a;
                let row_dot = ds.sum_axis(Axis(1));
                for ((mut r, ar), &rd) in ds.rows_mut().into_iter().zip(a.rows()).zip(&row_dot) {
                    for (x, &w) in r.iter_mut().zip(ar.iter()) {
                        *x = (*x - w * rd) * scale;
                    }
                }
                general_mat_mul(
                    S::one(),
                    &ds,
                    &ks,
                    S::zero(),
                    &mut dq.slice_mut(s![rows.clone(), cols.clone()]),
                );
                general_mat_mul(
                    S::one(),
                    &ds.t(),
                    &qs,
                    S::zero(),
                    &mut dkey.slice_mut(s![rows.clone(), cols]),
                );
            }
        }
        let mut dh = self.query.backward(h, &dq);
        dh += &self.key.backward(h, &dkey);
        dh += &self.value.backward(h, &dv);
        dh
    }
}

impl<S: Scalar> Layer<S> for MultiHeadAttention<S> {
    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, S>) {
        self.query.visit(&format!("{prefix}.query"), f);
        self.key.visit(&format!("{prefix}.key"), f);
        self.value.visit(&format!("{prefix}.value"), f);
        self.output.visit(&format!("{prefix}.output"), f);
    }
}
