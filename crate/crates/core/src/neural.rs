//! Differentiable encoder pieces: a unidirectional LSTM over dense inputs,
//! a dense compression layer over sparse binary features, inverted dropout,
//! and column-wise fusion of the two branches.

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::glorot_uniform_with;
use crate::error::{Error, Result};
use crate::featurizer::SparseFeatureVector;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gate blocks are stacked in the order input, forget, cell candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `4H x d`
    pub w: Array2<f64>,
    /// `4H x H`
    pub u: Array2<f64>,
    /// `4H`
    pub b: Array1<f64>,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmParams {
            w: Array2::zeros((4 * hidden_dim, input_dim)),
            u: Array2::zeros((4 * hidden_dim, hidden_dim)),
            b: Array1::zeros(4 * hidden_dim),
        }
    }

    /// Glorot weights, zero biases except the forget gate.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        forget_bias: f64,
        rng: &mut R,
    ) -> Self {
        let mut b = Array1::zeros(4 * hidden_dim);
        b.slice_mut(s![hidden_dim..2 * hidden_dim])
            .fill(forget_bias);
        LstmParams {
            w: glorot_uniform_with(input_dim, 4 * hidden_dim, rng),
            u: glorot_uniform_with(hidden_dim, 4 * hidden_dim, rng),
            b,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.u.ncols()
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden_dim();
        if self.w.nrows() != 4 * h || self.u.nrows() != 4 * h || self.b.len() != 4 * h {
            return Err(Error::Dimension(format!(
                "inconsistent LSTM parameter shapes: W {:?}, U {:?}, b {}",
                self.w.dim(),
                self.u.dim(),
                self.b.len()
            )));
        }
        Ok(())
    }
}

pub struct LstmCache {
    x: Array2<f64>,
    /// Activated gates per step, `T x 4H`.
    gates: Array2<f64>,
    c: Array2<f64>,
    tanh_c: Array2<f64>,
    h: Array2<f64>,
    hidden: usize,
}

/// Run the LSTM from `h0 = c0 = 0`; returns `T x H` hidden states.
pub fn lstm_forward(x: &Array2<f64>, p: &LstmParams) -> Result<(Array2<f64>, LstmCache)> {
    p.check()?;
    if x.ncols() != p.input_dim() {
        return Err(Error::Dimension(format!(
            "LSTM input width {} but parameters expect {}",
            x.ncols(),
            p.input_dim()
        )));
    }
    let steps = x.nrows();
    let hd = p.hidden_dim();
    let mut gates = x.dot(&p.w.t());
    gates += &p.b;
    let mut c = Array2::zeros((steps, hd));
    let mut tanh_c = Array2::zeros((steps, hd));
    let mut h = Array2::zeros((steps, hd));
    for t in 0..steps {
        if t > 0 {
            let rec = p.u.dot(&h.row(t - 1));
            let mut row = gates.row_mut(t);
            row += &rec;
        }
        let mut row = gates.row_mut(t);
        for k in 0..hd {
            row[k] = sigmoid(row[k]);
            row[hd + k] = sigmoid(row[hd + k]);
            row[2 * hd + k] = row[2 * hd + k].tanh();
            row[3 * hd + k] = sigmoid(row[3 * hd + k]);
        }
        for k in 0..hd {
            let prev = if t > 0 { c[[t - 1, k]] } else { 0.0 };
            let ct = row[hd + k] * prev + row[k] * row[2 * hd + k];
            c[[t, k]] = ct;
            tanh_c[[t, k]] = ct.tanh();
            h[[t, k]] = row[3 * hd + k] * tanh_c[[t, k]];
        }
    }
    let cache = LstmCache {
        x: x.clone(),
        gates,
        c,
        tanh_c,
        h: h.clone(),
        hidden: hd,
    };
    Ok((h, cache))
}

/// Gradient w.r.t. LSTM weights and inputs, shaped like [`LstmParams`].
pub type LstmGrads = LstmParams;

/// Backpropagation through time for `sum <grad_h, h>`.
pub fn lstm_backward(
    cache: &LstmCache,
    grad_h: &Array2<f64>,
    p: &LstmParams,
) -> Result<(LstmGrads, Array2<f64>)> {
    let steps = cache.h.nrows();
    let hd = cache.hidden;
    if grad_h.dim() != (steps, hd) || p.hidden_dim() != hd || p.input_dim() != cache.x.ncols() {
        return Err(Error::Dimension(format!(
            "LSTM backward: grad {:?} does not match cache ({steps}, {hd})",
            grad_h.dim()
        )));
    }
    let mut d_pre = Array2::zeros((steps, 4 * hd));
    let mut dh_next = Array1::<f64>::zeros(hd);
    let mut dc_next = Array1::<f64>::zeros(hd);
    for t in (0..steps).rev() {
        let g = cache.gates.row(t);
        let mut da = d_pre.row_mut(t);
        for k in 0..hd {
            let (ig, fg, cg, og) = (g[k], g[hd + k], g[2 * hd + k], g[3 * hd + k]);
            let tc = cache.tanh_c[[t, k]];
            let dh = grad_h[[t, k]] + dh_next[k];
            let d_o = dh * tc;
            let dc = dc_next[k] + dh * og * (1.0 - tc * tc);
            let c_prev = if t > 0 { cache.c[[t - 1, k]] } else { 0.0 };
            da[k] = dc * cg * ig * (1.0 - ig);
            da[hd + k] = dc * c_prev * fg * (1.0 - fg);
            da[2 * hd + k] = dc * ig * (1.0 - cg * cg);
            da[3 * hd + k] = d_o * og * (1.0 - og);
            dc_next[k] = dc * fg;
        }
        dh_next = p.u.t().dot(&da);
    }
    let grad_w = d_pre.t().dot(&cache.x);
    let mut grad_u = Array2::zeros((4 * hd, hd));
    if steps > 1 {
        grad_u = d_pre
            .slice(s![1.., ..])
            .t()
            .dot(&cache.h.slice(s![..steps - 1, ..]));
    }
    let grad_b = d_pre.sum_axis(Axis(0));
    let grad_x = d_pre.dot(&p.w);
    Ok((
        LstmParams {
            w: grad_w,
            u: grad_u,
            b: grad_b,
        },
        grad_x,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayerParams {
    /// `D x F`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayerParams {
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        DenseLayerParams {
            w: glorot_uniform_with(in_dim, out_dim, rng),
            b: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    Train,
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    pub rate: f64,
    pub mode: DropoutMode,
}

impl DropoutSpec {
    pub fn new(rate: f64, mode: DropoutMode) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(DropoutSpec { rate, mode })
    }

    pub fn inference() -> Self {
        DropoutSpec {
            rate: 0.0,
            mode: DropoutMode::Inference,
        }
    }

    fn active(&self) -> bool {
        self.mode == DropoutMode::Train && self.rate > 0.0
    }

    /// Inverted dropout mask: kept units scaled by `1 / (1 - p)`, dropped units 0.
    pub fn sample_mask<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Option<Array1<f64>> {
        if !self.active() {
            return None;
        }
        let keep = 1.0 - self.rate;
        Some(Array1::from_shape_simple_fn(len, || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        }))
    }
}

pub struct DenseCache {
    indices: Vec<u32>,
    in_dim: usize,
    pre: Array1<f64>,
    mask: Option<Array1<f64>>,
    activation: Activation,
}

/// `activation(W v + b)` followed by inverted dropout in train mode. `W v`
/// sums the columns at `v.indices()`.
pub fn dense_forward<R: Rng + ?Sized>(
    v: &SparseFeatureVector,
    p: &DenseLayerParams,
    drop: &DropoutSpec,
    rng: &mut R,
) -> Result<(Array1<f64>, DenseCache)> {
    if v.dimension() != p.in_dim() {
        return Err(Error::Dimension(format!(
            "sparse vector dimension {} but dense layer expects {}",
            v.dimension(),
            p.in_dim()
        )));
    }
    let mut pre = p.b.clone();
    for &j in v.indices() {
        pre += &p.w.column(j as usize);
    }
    let mut out = pre.mapv(|x| p.activation.apply(x));
    let mask = drop.sample_mask(out.len(), rng);
    if let Some(m) = &mask {
        out *= m;
    }
    Ok((
        out,
        DenseCache {
            indices: v.indices().to_vec(),
            in_dim: v.dimension(),
            pre,
            mask,
            activation: p.activation,
        },
    ))
}

/// Dense-layer gradient. Inputs are binary, so the weight gradient for every
/// active column equals `delta` and is zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub columns: Vec<u32>,
    pub delta: Array1<f64>,
    pub in_dim: usize,
}

impl DenseGrads {
    pub fn grad_b(&self) -> &Array1<f64> {
        &self.delta
    }

    pub fn grad_w_dense(&self) -> Array2<f64> {
        let mut g = Array2::zeros((self.delta.len(), self.in_dim));
        for &j in &self.columns {
            g.column_mut(j as usize).assign(&self.delta);
        }
        g
    }

    pub fn accumulate(&self, grad_w: &mut Array2<f64>, grad_b: &mut Array1<f64>) {
        for &j in &self.columns {
            let mut col = grad_w.column_mut(j as usize);
            col += &self.delta;
        }
        *grad_b += &self.delta;
    }
}

pub fn dense_backward(cache: &DenseCache, grad_out: ArrayView1<f64>) -> Result<DenseGrads> {
    if grad_out.len() != cache.pre.len() {
        return Err(Error::Dimension(format!(
            "dense backward: gradient length {} but layer width {}",
            grad_out.len(),
            cache.pre.len()
        )));
    }
    let mut delta = Array1::zeros(cache.pre.len());
    Zip::from(&mut delta)
        .and(&grad_out)
        .and(&cache.pre)
        .for_each(|d, &g, &pre| *d = g * cache.activation.derivative(pre));
    if let Some(m) = &cache.mask {
        delta *= m;
    }
    Ok(DenseGrads {
        columns: cache.indices.clone(),
        delta,
        in_dim: cache.in_dim,
    })
}

/// Inverted dropout over every entry of `x`; returns the mask when active.
pub fn dropout_matrix<R: Rng + ?Sized>(
    x: &mut Array2<f64>,
    drop: &DropoutSpec,
    rng: &mut R,
) -> Option<Array2<f64>> {
    let mask = drop.sample_mask(x.len(), rng)?;
    let mask = mask.into_shape_with_order(x.dim()).expect("same length");
    *x *= &mask;
    Some(mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `T x (H + D)`, LSTM columns first.
    pub fused: Array2<f64>,
    /// Column where the hand-built block starts (0 without an LSTM branch).
    pub split: usize,
}

pub fn fuse(h: Option<&Array2<f64>>, z: Option<&Array2<f64>>) -> Result<EncoderOutput> {
    match (h, z) {
        (None, None) => Err(Error::InvalidArgument(
            "fuse needs at least one branch".into(),
        )),
        (Some(h), None) => Ok(EncoderOutput {
            fused: h.clone(),
            split: h.ncols(),
        }),
        (None, Some(z)) => Ok(EncoderOutput {
            fused: z.clone(),
            split: 0,
        }),
        (Some(h), Some(z)) => {
            if h.nrows() != z.nrows() {
                return Err(Error::Dimension(format!(
                    "branch lengths differ: {} vs {}",
                    h.nrows(),
                    z.nrows()
                )));
            }
            let fused = ndarray::concatenate(Axis(1), &[h.view(), z.view()]).expect("rows match");
            Ok(EncoderOutput {
                fused,
                split: h.ncols(),
            })
        }
    }
}
