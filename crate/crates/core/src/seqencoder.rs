//! Causal self-attentive sequence encoder with exact reverse-mode gradients.
//!
//! Each block is pre-norm: `x += Attn(LN1(x))`, then `x += FFN(LN2(x))`, where
//! the feed-forward network is `d -> 4d -> d` with a tanh-approximated GELU.
//! The input at position `j` is the item representation plus a learned
//! absolute position embedding. Positions are counted from the start of the
//! (already truncated) context.
//!
//! Parameter count: `n_max * d + L * (12 d^2 + 13 d)`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seeded_rng;

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub max_len: usize,
    /// Dropout on the residual branches and the input; 0 disables it.
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 2,
            dim: 64,
            max_len: 50,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.max_len == 0 {
            return Err(Error::Config("encoder dim, heads and max_len must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder.dim = {} is not divisible by encoder.heads = {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("encoder.dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let d = self.dim;
        self.max_len * d + self.layers * (12 * d * d + 13 * d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl LayerParams {
    fn zeros(d: usize) -> Self {
        LayerParams {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            w1: Array2::zeros((d, 4 * d)),
            b1: Array1::zeros(4 * d),
            w2: Array2::zeros((4 * d, d)),
            b2: Array1::zeros(d),
        }
    }

    fn tensors(&self) -> [&[f64]; 16] {
        [
            slice(&self.ln1_gain),
            slice(&self.ln1_bias),
            self.wq.as_slice().unwrap(),
            slice(&self.bq),
            self.wk.as_slice().unwrap(),
            slice(&self.bk),
            self.wv.as_slice().unwrap(),
            slice(&self.bv),
            self.wo.as_slice().unwrap(),
            slice(&self.bo),
            slice(&self.ln2_gain),
            slice(&self.ln2_bias),
            self.w1.as_slice().unwrap(),
            slice(&self.b1),
            self.w2.as_slice().unwrap(),
            slice(&self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 16] {
        [
            self.ln1_gain.as_slice_mut().unwrap(),
            self.ln1_bias.as_slice_mut().unwrap(),
            self.wq.as_slice_mut().unwrap(),
            self.bq.as_slice_mut().unwrap(),
            self.wk.as_slice_mut().unwrap(),
            self.bk.as_slice_mut().unwrap(),
            self.wv.as_slice_mut().unwrap(),
            self.bv.as_slice_mut().unwrap(),
            self.wo.as_slice_mut().unwrap(),
            self.bo.as_slice_mut().unwrap(),
            self.ln2_gain.as_slice_mut().unwrap(),
            self.ln2_bias.as_slice_mut().unwrap(),
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }
}

fn slice(a: &Array1<f64>) -> &[f64] {
    a.as_slice().unwrap()
}

/// Names of the per-layer tensors, in serialization order.
pub const LAYER_TENSOR_NAMES: [&str; 16] = [
    "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gain",
    "ln2_bias", "w1", "b1", "w2", "b2",
];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// `max_len x dim` absolute position embeddings.
    pub positions: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    /// Gaussian(0, 0.02) weights and position embeddings, zero biases, unit
    /// layer-norm gains.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let d = config.dim;
        let mut gauss = |shape: (usize, usize)| {
            Array2::from_shape_simple_fn(shape, || INIT_STD * rng.sample::<f64, _>(StandardNormal))
        };
        let positions = gauss((config.max_len, d));
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_gain: Array1::ones(d),
                wq: gauss((d, d)),
                wk: gauss((d, d)),
                wv: gauss((d, d)),
                wo: gauss((d, d)),
                ln2_gain: Array1::ones(d),
                w1: gauss((d, 4 * d)),
                w2: gauss((4 * d, d)),
                ..LayerParams::zeros(d)
            })
            .collect();
        Ok(EncoderParams {
            config: config.clone(),
            positions,
            layers,
        })
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            config: self.config.clone(),
            positions: Array2::zeros(self.positions.dim()),
            layers: (0..self.layers.len())
                .map(|_| LayerParams::zeros(self.config.dim))
                .collect(),
        }
    }

    /// Flat parameter blocks in serialization order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.positions.as_slice().unwrap()];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.positions.as_slice_mut().unwrap()];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: ArrayView2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * gain + bias;
    (y, LayerNormCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &LayerNormCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(&dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = &dy * gain;
    let mut dx = Array2::zeros(dy.dim());
    for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        let r = cache.rstd[i];
        Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
            *o = r * (gi - sum_g / d - xi * sum_gx / d);
        });
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LayerCache {
    ln1: LayerNormCache,
    a1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn_out: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ln2: LayerNormCache,
    a2: Array2<f64>,
    h1: Array2<f64>,
    g: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
}

/// Intermediate values of one forward pass, consumed by [`backward`].
pub struct ForwardCache {
    len: usize,
    input_mask: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
}

fn dropout_mask<R: Rng>(shape: (usize, usize), p: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < p { 0.0 } else { keep })
}

/// Runs the encoder over `inputs` (`T x d`, `T <= max_len`) and returns the
/// hidden states of the last layer at every position.
pub fn forward<R: Rng>(
    params: &EncoderParams,
    inputs: ArrayView2<f64>,
    mut dropout_rng: Option<&mut R>,
) -> Result<(Array2<f64>, ForwardCache)> {
    let cfg = &params.config;
    let t = inputs.nrows();
    if t == 0 || t > cfg.max_len {
        return Err(Error::Config(format!(
            "sequence length {t} outside [1, {}]",
            cfg.max_len
        )));
    }
    if inputs.ncols() != cfg.dim {
        return Err(Error::Dimension {
            expected: cfg.dim,
            got: inputs.ncols(),
        });
    }
    let p = cfg.dropout;
    let use_dropout = p > 0.0 && dropout_rng.is_some();

    let mut x = &inputs + &params.positions.slice(s![..t, ..]);
    let input_mask = if use_dropout {
        let m = dropout_mask((t, cfg.dim), p, dropout_rng.as_mut().unwrap());
        x *= &m;
        Some(m)
    } else {
        None
    };

    let heads = cfg.heads;
    let dh = cfg.dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (a1, ln1) = layer_norm(x.view(), &layer.ln1_gain, &layer.ln1_bias);
        let q = a1.dot(&layer.wq) + &layer.bq;
        let k = a1.dot(&layer.wk) + &layer.bk;
        let v = a1.dot(&layer.wv) + &layer.bv;
        let mut concat = Array2::zeros((t, cfg.dim));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t());
            for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    row[j] *= scale;
                    max = max.max(row[j]);
                }
                let mut sum = 0.0;
                for j in 0..=i {
                    row[j] = (row[j] - max).exp();
                    sum += row[j];
                }
                for j in 0..t {
                    row[j] = if j <= i { row[j] / sum } else { 0.0 };
                }
            }
            concat.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            probs.push(sc);
        }
        let mut attn = concat.dot(&layer.wo) + &layer.bo;
        let attn_mask = if use_dropout {
            let m = dropout_mask((t, cfg.dim), p, dropout_rng.as_mut().unwrap());
            attn *= &m;
            Some(m)
        } else {
            None
        };
        let x2 = &x + &attn;
        let (a2, ln2) = layer_norm(x2.view(), &layer.ln2_gain, &layer.ln2_bias);
        let h1 = a2.dot(&layer.w1) + &layer.b1;
        let g = h1.mapv(gelu);
        let mut ffn = g.dot(&layer.w2) + &layer.b2;
        let ffn_mask = if use_dropout {
            let m = dropout_mask((t, cfg.dim), p, dropout_rng.as_mut().unwrap());
            ffn *= &m;
            Some(m)
        } else {
            None
        };
        x = &x2 + &ffn;
        caches.push(LayerCache {
            ln1,
            a1,
            q,
            k,
            v,
            probs,
            attn_out: concat,
            attn_mask,
            ln2,
            a2,
            h1,
            g,
            ffn_mask,
        });
    }
    Ok((
        x,
        ForwardCache {
            len: t,
            input_mask,
            layers: caches,
        },
    ))
}

/// Back-propagates `d_out` (`T x d`, gradient w.r.t. every output position).
/// Parameter gradients are accumulated into `grads` when given; the gradient
/// w.r.t. the inputs is returned.
pub fn backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    d_out: ArrayView2<f64>,
    mut grads: Option<&mut EncoderParams>,
) -> Array2<f64> {
    let cfg = &params.config;
    let t = cache.len;
    let heads = cfg.heads;
    let dh = cfg.dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dx = d_out.to_owned();
    let want = grads.is_some();
    let mut scratch = LayerParams::zeros(cfg.dim);

    for (li, (layer, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let g = match grads.as_deref_mut() {
            Some(gr) => &mut gr.layers[li],
            None => &mut scratch,
        };
        // feed-forward branch
        let mut dffn = dx.clone();
        if let Some(m) = &lc.ffn_mask {
            dffn *= m;
        }
        if want {
            g.w2 += &lc.g.t().dot(&dffn);
            g.b2 += &dffn.sum_axis(Axis(0));
        }
        let mut dh1 = dffn.dot(&layer.w2.t());
        Zip::from(&mut dh1).and(&lc.h1).for_each(|d, &h| *d *= gelu_grad(h));
        if want {
            g.w1 += &lc.a2.t().dot(&dh1);
            g.b1 += &dh1.sum_axis(Axis(0));
        }
        let da2 = dh1.dot(&layer.w1.t());
        dx += &layer_norm_backward(da2.view(), &lc.ln2, &layer.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);

        // attention branch
        let mut dattn = dx.clone();
        if let Some(m) = &lc.attn_mask {
            dattn *= m;
        }
        if want {
            g.wo += &lc.attn_out.t().dot(&dattn);
            g.bo += &dattn.sum_axis(Axis(0));
        }
        let dconcat = dattn.dot(&layer.wo.t());
        let mut dq = Array2::zeros((t, cfg.dim));
        let mut dk = Array2::zeros((t, cfg.dim));
        let mut dv = Array2::zeros((t, cfg.dim));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &lc.probs[h];
            let do_h = dconcat.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&do_h));
            let mut ds = do_h.dot(&lc.v.slice(cols).t());
            for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                let pr = p.row(i);
                let dot: f64 = (0..=i).map(|j| row[j] * pr[j]).sum();
                for j in 0..t {
                    row[j] = if j <= i { pr[j] * (row[j] - dot) * scale } else { 0.0 };
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
        }
        if want {
            g.wq += &lc.a1.t().dot(&dq);
            g.bq += &dq.sum_axis(Axis(0));
            g.wk += &lc.a1.t().dot(&dk);
            g.bk += &dk.sum_axis(Axis(0));
            g.wv += &lc.a1.t().dot(&dv);
            g.bv += &dv.sum_axis(Axis(0));
        }
        let da1 = dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
        dx += &layer_norm_backward(da1.view(), &lc.ln1, &layer.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
    }

    if let Some(m) = &cache.input_mask {
        dx *= m;
    }
    if let Some(gr) = grads {
        let mut pos = gr.positions.slice_mut(s![..t, ..]);
        pos += &dx;
    }
    dx
}

fn check_valid_len(params: &EncoderParams, item_reps: ArrayView2<f64>, valid_len: usize) -> Result<()> {
    if valid_len == 0 || valid_len > params.config.max_len {
        return Err(Error::Config(format!(
            "valid_len {valid_len} outside [1, {}]",
            params.config.max_len
        )));
    }
    if item_reps.nrows() < valid_len {
        return Err(Error::Config(format!(
            "{} item representations supplied for valid_len {valid_len}",
            item_reps.nrows()
        )));
    }
    Ok(())
}

/// Hidden state of the last layer at position `valid_len - 1`. Rows of
/// `item_reps` past `valid_len` are ignored.
pub fn encode_sequence(params: &EncoderParams, item_reps: ArrayView2<f64>, valid_len: usize) -> Result<Array1<f64>> {
    check_valid_len(params, item_reps, valid_len)?;
    let (out, _) = forward::<rand_chacha::ChaCha8Rng>(params, item_reps.slice(s![..valid_len, ..]), None)?;
    Ok(out.row(valid_len - 1).to_owned())
}

/// Gradients of `upstream . encode_sequence(...)`.
pub struct SequenceGrad {
    pub output: Array1<f64>,
    pub params: EncoderParams,
    /// Same number of rows as the supplied item representations; rows past
    /// `valid_len` are zero.
    pub inputs: Array2<f64>,
}

pub fn encode_sequence_with_grad(
    params: &EncoderParams,
    item_reps: ArrayView2<f64>,
    valid_len: usize,
    upstream: ArrayView1<f64>,
) -> Result<SequenceGrad> {
    check_valid_len(params, item_reps, valid_len)?;
    let (out, cache) = forward::<rand_chacha::ChaCha8Rng>(params, item_reps.slice(s![..valid_len, ..]), None)?;
    let mut d_out = Array2::zeros(out.dim());
    d_out.row_mut(valid_len - 1).assign(&upstream);
    let mut grads = params.zeros_like();
    let d_in = backward(params, &cache, d_out.view(), Some(&mut grads));
    let mut inputs = Array2::zeros(item_reps.dim());
    inputs.slice_mut(s![..valid_len, ..]).assign(&d_in);
    Ok(SequenceGrad {
        output: out.row(valid_len - 1).to_owned(),
        params: grads,
        inputs,
    })
}
