//! Small dense-array neural-network layers with hand-written backward
//! passes.
//!
//! Layers are plain structs of `f64` arrays. Gradients are stored in a
//! value of the same type, so optimizers and serialization work through
//! the [`Params`] traversal instead of per-layer code.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::Rng;

use crate::formats::snapshot::Snapshot;
use crate::error::{Error, Result};

pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Named traversal of every trainable tensor, in a fixed order.
pub trait Params {
    fn params(&self) -> Vec<ParamRef<'_>>;
    fn params_mut(&mut self) -> Vec<(String, &mut [f64])>;
}

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

fn pref(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Collects child parameters under a name prefix.
pub fn nested<'a>(out: &mut Vec<ParamRef<'a>>, prefix: &str, child: &'a dyn Params) {
    for p in child.params() {
        out.push(ParamRef {
            name: pref(prefix, &p.name),
            ..p
        });
    }
}

pub fn nested_mut<'a>(out: &mut Vec<(String, &'a mut [f64])>, prefix: &str, child: &'a mut dyn Params) {
    for (n, d) in child.params_mut() {
        out.push((pref(prefix, &n), d));
    }
}

pub fn param_count(p: &dyn Params) -> usize {
    p.params().iter().map(|r| r.data.len()).sum()
}

pub fn flat(p: &dyn Params) -> Vec<f64> {
    p.params().iter().flat_map(|r| r.data.iter().copied()).collect()
}

pub fn set_flat(p: &mut dyn Params, values: &[f64]) {
    let mut it = values.iter();
    for (_, d) in p.params_mut() {
        for v in d.iter_mut() {
            *v = *it.next().expect("flat vector too short");
        }
    }
    assert!(it.next().is_none(), "flat vector too long");
}

pub fn zero(p: &mut dyn Params) {
    for (_, d) in p.params_mut() {
        d.fill(0.0);
    }
}

pub fn all_finite(p: &dyn Params) -> bool {
    p.params().iter().all(|r| r.data.iter().all(|v| v.is_finite()))
}

/// `p -= lr * g`, tensor by tensor.
pub fn sgd(p: &mut dyn Params, g: &dyn Params, lr: f64) {
    let grads = g.params();
    let params = p.params_mut();
    assert_eq!(grads.len(), params.len());
    for ((_, d), gr) in params.into_iter().zip(&grads) {
        for (v, gv) in d.iter_mut().zip(gr.data) {
            *v -= lr * gv;
        }
    }
}

pub fn save_into(p: &dyn Params, snap: &mut Snapshot, prefix: &str) {
    for r in p.params() {
        snap.push(pref(prefix, &r.name), &r.shape, r.data.iter().copied());
    }
}

pub fn load_from(p: &mut dyn Params, snap: &Snapshot, prefix: &str) -> Result<()> {
    for (name, d) in p.params_mut() {
        let full = pref(prefix, &name);
        let t = snap
            .get(&full)
            .ok_or_else(|| Error::malformed("model snapshot", format!("missing tensor {full}")))?;
        if t.data.len() != d.len() {
            return Err(Error::malformed(
                "model snapshot",
                format!("tensor {full} has {} values, expected {}", t.data.len(), d.len()),
            ));
        }
        for (v, s) in d.iter_mut().zip(&t.data) {
            *v = f64::from(*s);
        }
    }
    Ok(())
}

fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> impl FnMut() -> f64 + '_ {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    move || rng.random_range(-limit..=limit)
}

// ---------------------------------------------------------------- dense

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in × out`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let mut init = xavier(rng, inputs, outputs);
        Dense {
            w: Array2::from_shape_simple_fn((inputs, outputs), &mut init),
            b: Array1::zeros(outputs),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Dense {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Params for Dense {
    fn params(&self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef { name: "w".into(), shape: self.w.shape().to_vec(), data: slice(&self.w) },
            ParamRef { name: "b".into(), shape: self.b.shape().to_vec(), data: slice(&self.b) },
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("w".into(), slice_mut(&mut self.w)), ("b".into(), slice_mut(&mut self.b))]
    }
}

// ---------------------------------------------------------------- conv

/// Square-kernel convolution, stride 1, zero "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `out × (in·k·k)`, input-channel major.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub in_ch: usize,
    pub k: usize,
}

pub struct ConvCache {
    /// `c·k·k × n·h·w`, sample-major columns.
    cols: Array2<f64>,
    n: usize,
    h: usize,
    w: usize,
}

/// Valid destination range `lo..hi` for a tap at offset `d` along an axis
/// of length `len`.
fn tap_range(d: isize, len: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// Unfolds `x` (`n × c × h × w`, zero padding) into one column per output
/// pixel of every sample.
fn im2col(x: &Array4<f64>, k: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let p = (k / 2) as isize;
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut cols = Array2::zeros((c * k * k, n * hw));
    for ch in 0..c {
        for ky in 0..k {
            let dy = ky as isize - p;
            let (y0, y1) = tap_range(dy, h);
            for kx in 0..k {
                let dx = kx as isize - p;
                let (x0, x1) = tap_range(dx, w);
                let mut row = cols.row_mut((ch * k + ky) * k + kx);
                let dst = row.as_slice_mut().expect("contiguous row");
                for i in 0..n {
                    let plane = &src[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = (sy * w) as isize + x0 as isize + dx;
                        let len = x1 - x0;
                        dst[i * hw + y * w + x0..i * hw + y * w + x1]
                            .copy_from_slice(&plane[s0 as usize..s0 as usize + len]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, n: usize, c: usize, h: usize, w: usize, k: usize) -> Array4<f64> {
    let hw = h * w;
    let p = (k / 2) as isize;
    let mut x = Array4::zeros((n, c, h, w));
    let dst = x.as_slice_mut().expect("standard layout");
    for ch in 0..c {
        for ky in 0..k {
            let dy = ky as isize - p;
            let (y0, y1) = tap_range(dy, h);
            for kx in 0..k {
                let dx = kx as isize - p;
                let (x0, x1) = tap_range(dx, w);
                let row = cols.row((ch * k + ky) * k + kx);
                let row = row.as_slice().expect("contiguous row");
                for i in 0..n {
                    let plane = &mut dst[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = ((sy * w) as isize + x0 as isize + dx) as usize;
                        let src = &row[i * hw + y * w + x0..i * hw + y * w + x1];
                        for (d, v) in plane[s0..s0 + src.len()].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    x
}

impl Conv2d {
    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, k: usize, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let mut init = xavier(rng, in_ch * k * k, out_ch * k * k);
        Conv2d {
            w: Array2::from_shape_simple_fn((out_ch, in_ch * k * k), &mut init),
            b: Array1::zeros(out_ch),
            in_ch,
            k,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
            ..*self
        }
    }

    pub fn out_ch(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array4<f64>, ConvCache)> {
        let (n, c, h, w) = x.dim();
        if c != self.in_ch {
            return Err(Error::invalid(format!("convolution expects {} channels, got {c}", self.in_ch)));
        }
        let cols = im2col(x, self.k);
        let out = self.w.dot(&cols) + &self.b.view().insert_axis(Axis(1));
        let y = out
            .into_shape_with_order((self.out_ch(), n, h, w))
            .expect("shape")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned();
        Ok((y, ConvCache { cols, n, h, w }))
    }

    pub fn backward(&self, cache: &ConvCache, dy: &Array4<f64>, grad: &mut Conv2d, need_dx: bool) -> Option<Array4<f64>> {
        let (n, h, w) = (cache.n, cache.h, cache.w);
        let d = dy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_ch(), n * h * w))
            .expect("shape");
        grad.w += &d.dot(&cache.cols.t());
        grad.b += &d.sum_axis(Axis(1));
        need_dx.then(|| col2im(&self.w.t().dot(&d), n, self.in_ch, h, w, self.k))
    }
}

impl Params for Conv2d {
    fn params(&self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef { name: "w".into(), shape: self.w.shape().to_vec(), data: slice(&self.w) },
            ParamRef { name: "b".into(), shape: self.b.shape().to_vec(), data: slice(&self.b) },
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("w".into(), slice_mut(&mut self.w)), ("b".into(), slice_mut(&mut self.b))]
    }
}

// ---------------------------------------------------------------- pointwise

pub fn relu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Backward of [`relu`] given its output.
pub fn relu_backward<D: ndarray::Dimension>(y: &ndarray::Array<f64, D>, dy: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &o| {
        if o <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

/// 2×2 max-pool with stride 2; odd trailing rows/columns are dropped.
pub fn maxpool2(x: &Array4<f64>) -> (Array4<f64>, Vec<usize>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::zeros((n, c, oh, ow));
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let xs = x.as_slice().expect("contiguous");
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for r in 0..oh {
                for q in 0..ow {
                    let mut best = base + 2 * r * w + 2 * q;
                    for (dr, dq) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * r + dr) * w + 2 * q + dq;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    y[[i, ch, r, q]] = xs[best];
                    arg.push(best);
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(input_dim: (usize, usize, usize, usize), arg: &[usize], dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = Array4::zeros(input_dim);
    let d = dx.as_slice_mut().expect("contiguous");
    for (&idx, g) in arg.iter().zip(dy.iter()) {
        d[idx] += g;
    }
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

pub const LOG_FLOOR: f64 = 1e-12;

fn log_sum_exp(row: ndarray::ArrayView1<f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy against integer labels, and its gradient
/// with respect to the logits. Computed from log-sum-exp, so it is exact
/// and unbounded for extreme logits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    assert_eq!(n, labels.len());
    let mut loss = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        loss += log_sum_exp(row) - row[y];
    }
    let mut grad = softmax(logits);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    grad /= n as f64;
    (loss / n as f64, grad)
}

/// Mean cross-entropy of softmax outputs against the uniform distribution,
/// and its gradient with respect to the logits.
pub fn softmax_uniform_cross_entropy(logits: &Array2<f64>) -> (f64, Array2<f64>) {
    let (n, d) = logits.dim();
    let loss = logits
        .rows()
        .into_iter()
        .map(|row| log_sum_exp(row) - row.mean().expect("non-empty row"))
        .sum::<f64>()
        / n as f64;
    let grad = (softmax(logits) - 1.0 / d as f64) / n as f64;
    (loss, grad)
}

// ---------------------------------------------------------------- dropout

/// Inverted-dropout mask: entries are 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng>(shape: (usize, usize), rate: f64, rng: &mut R) -> Array2<f64> {
    if rate <= 0.0 {
        return Array2::ones(shape);
    }
    let keep = 1.0 - rate;
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
}

// ---------------------------------------------------------------- LSTM

/// One LSTM layer. Gate blocks are ordered input, forget, candidate,
/// output along the `4H` axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    /// `in × 4H`.
    pub wx: Array2<f64>,
    /// `H × 4H`.
    pub wh: Array2<f64>,
    pub b: Array1<f64>,
}

pub struct LstmCache {
    x: Array2<f64>,
    steps: Vec<LstmStep>,
    n: usize,
}

struct LstmStep {
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    /// Activated gates, `n × 4H`.
    gates: Array2<f64>,
    tanh_c: Array2<f64>,
}

impl Lstm {
    pub fn new<R: Rng>(inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let wx = {
            let mut init = xavier(rng, inputs, hidden);
            Array2::from_shape_simple_fn((inputs, 4 * hidden), &mut init)
        };
        let wh = {
            let mut init = xavier(rng, hidden, hidden);
            Array2::from_shape_simple_fn((hidden, 4 * hidden), &mut init)
        };
        Lstm { wx, wh, b: Array1::zeros(4 * hidden) }
    }

    pub fn zeros_like(&self) -> Self {
        Lstm {
            wx: Array2::zeros(self.wx.dim()),
            wh: Array2::zeros(self.wh.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    pub fn hidden(&self) -> usize {
        self.wh.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.wx.nrows()
    }

    /// Runs the recurrence over `x` (`T × n × in`) from zero state and
    /// returns all hidden states (`T × n × H`).
    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, LstmCache)> {
        let (t_len, n, i) = x.dim();
        if i != self.inputs() {
            return Err(Error::invalid(format!("LSTM expects {} inputs, got {i}", self.inputs())));
        }
        let h_size = self.hidden();
        let x2 = x.to_owned().into_shape_with_order((t_len * n, i)).expect("shape");
        let zx = x2.dot(&self.wx) + &self.b;
        let mut h = Array2::zeros((n, h_size));
        let mut c = Array2::<f64>::zeros((n, h_size));
        let mut out = Array3::zeros((t_len, n, h_size));
        let mut steps = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut gates = zx.slice(s![t * n..(t + 1) * n, ..]).to_owned() + h.dot(&self.wh);
            gates.slice_mut(s![.., 0..2 * h_size]).mapv_inplace(sigmoid);
            gates.slice_mut(s![.., 2 * h_size..3 * h_size]).mapv_inplace(f64::tanh);
            gates.slice_mut(s![.., 3 * h_size..]).mapv_inplace(sigmoid);
            let ig = gates.slice(s![.., 0..h_size]);
            let fg = gates.slice(s![.., h_size..2 * h_size]);
            let gg = gates.slice(s![.., 2 * h_size..3 * h_size]);
            let og = gates.slice(s![.., 3 * h_size..]);
            let c_new = &fg * &c + &ig * &gg;
            let tanh_c = c_new.mapv(f64::tanh);
            let h_new = &og * &tanh_c;
            out.slice_mut(s![t, .., ..]).assign(&h_new);
            steps.push(LstmStep {
                h_prev: std::mem::replace(&mut h, h_new),
                c_prev: std::mem::replace(&mut c, c_new),
                gates,
                tanh_c,
            });
        }
        Ok((out, LstmCache { x: x2, steps, n }))
    }

    /// Backpropagation through time. `dh` holds the loss gradient for every
    /// emitted hidden state.
    pub fn backward(&self, cache: &LstmCache, dh: &Array3<f64>, grad: &mut Lstm, need_dx: bool) -> Option<Array3<f64>> {
        let h_size = self.hidden();
        let n = cache.n;
        let t_len = cache.steps.len();
        let mut dz_all = Array2::zeros((t_len * n, 4 * h_size));
        let mut dh_next = Array2::<f64>::zeros((n, h_size));
        let mut dc_next = Array2::<f64>::zeros((n, h_size));
        for t in (0..t_len).rev() {
            let st = &cache.steps[t];
            let ig = st.gates.slice(s![.., 0..h_size]);
            let fg = st.gates.slice(s![.., h_size..2 * h_size]);
            let gg = st.gates.slice(s![.., 2 * h_size..3 * h_size]);
            let og = st.gates.slice(s![.., 3 * h_size..]);
            let dht = &dh.slice(s![t, .., ..]) + &dh_next;
            let d_o = &dht * &st.tanh_c;
            let dc = &dc_next + &(&dht * &og * &st.tanh_c.mapv(|v| 1.0 - v * v));
            let mut dz = dz_all.slice_mut(s![t * n..(t + 1) * n, ..]);
            dz.slice_mut(s![.., 0..h_size])
                .assign(&(&dc * &gg * &ig.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., h_size..2 * h_size])
                .assign(&(&dc * &st.c_prev * &fg.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., 2 * h_size..3 * h_size])
                .assign(&(&dc * &ig * &gg.mapv(|v| 1.0 - v * v)));
            dz.slice_mut(s![.., 3 * h_size..])
                .assign(&(&d_o * &og.mapv(|v| v * (1.0 - v))));
            dc_next = &dc * &fg;
            let dz = dz.to_owned();
            grad.wh += &st.h_prev.t().dot(&dz);
            dh_next = dz.dot(&self.wh.t());
        }
        grad.wx += &cache.x.t().dot(&dz_all);
        grad.b += &dz_all.sum_axis(Axis(0));
        need_dx.then(|| {
            dz_all
                .dot(&self.wx.t())
                .into_shape_with_order((t_len, n, self.inputs()))
                .expect("shape")
        })
    }
}

impl Params for Lstm {
    fn params(&self) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef { name: "wx".into(), shape: self.wx.shape().to_vec(), data: slice(&self.wx) },
            ParamRef { name: "wh".into(), shape: self.wh.shape().to_vec(), data: slice(&self.wh) },
            ParamRef { name: "b".into(), shape: self.b.shape().to_vec(), data: slice(&self.b) },
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("wx".into(), slice_mut(&mut self.wx)),
            ("wh".into(), slice_mut(&mut self.wh)),
            ("b".into(), slice_mut(&mut self.b)),
        ]
    }
}

// ---------------------------------------------------------------- checks

/// Central finite-difference comparison helpers.
pub mod gradcheck {
    use super::{flat, set_flat, Params};

    pub const STEP: f64 = 1e-5;

    /// `|a - n| / max(|a|, |n|)`, with gradients below `floor` in both
    /// estimates compared on an absolute scale of `floor`.
    pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
    }

    /// Largest relative error between `analytic` and central differences of
    /// `loss` over the parameter vector of `model`, checking at most
    /// `max_per_model` evenly spaced coordinates.
    pub fn check_params<P: Params + Clone>(
        model: &P,
        analytic: &dyn Params,
        max_coords: usize,
        loss: impl Fn(&P) -> f64,
    ) -> f64 {
        let base = flat(model);
        let grad = flat(analytic);
        assert_eq!(base.len(), grad.len());
        let stride = (base.len() / max_coords.max(1)).max(1);
        let mut worst: f64 = 0.0;
        let mut probe = model.clone();
        for i in (0..base.len()).step_by(stride) {
            let mut v = base.clone();
            v[i] = base[i] + STEP;
            set_flat(&mut probe, &v);
            let up = loss(&probe);
            v[i] = base[i] - STEP;
            set_flat(&mut probe, &v);
            let down = loss(&probe);
            let num = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_error(grad[i], num, 1e-6));
        }
        worst
    }

    /// Same comparison over a plain input vector.
    pub fn check_input(x: &[f64], analytic: &[f64], loss: impl Fn(&[f64]) -> f64) -> f64 {
        let mut worst: f64 = 0.0;
        let mut v = x.to_vec();
        for i in 0..x.len() {
            v[i] = x[i] + STEP;
            let up = loss(&v);
            v[i] = x[i] - STEP;
            let down = loss(&v);
            v[i] = x[i];
            worst = worst.max(rel_error(analytic[i], (up - down) / (2.0 * STEP), 1e-6));
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_input, check_params};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-4;

    fn rand2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    fn rand3(rng: &mut ChaCha8Rng, d: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0))
    }

    fn rand4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn dense_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = Dense::new(5, 4, &mut rng);
        layer.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let x = rand2(&mut rng, 3, 5);
        let r = rand2(&mut rng, 3, 4);
        let loss = |l: &Dense, x: &Array2<f64>| (l.forward(x) * &r).sum();
        let mut g = layer.zeros_like();
        let dx = layer.backward(&x, &r, &mut g);
        assert!(check_params(&layer, &g, 100, |l| loss(l, &x)) < TOL);
        let xf: Vec<f64> = x.iter().copied().collect();
        let err = check_input(&xf, dx.as_slice().unwrap(), |v| {
            loss(&layer, &Array2::from_shape_vec((3, 5), v.to_vec()).unwrap())
        });
        assert!(err < TOL);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(2, 3, 3, &mut rng);
        let x = rand4(&mut rng, (1, 2, 5, 4));
        let (y, _) = conv.forward(&x).unwrap();
        for o in 0..3 {
            for r in 0..5 {
                for c in 0..4 {
                    let mut want = conv.b[o];
                    for ch in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sr, sc) = (r as isize + ky as isize - 1, c as isize + kx as isize - 1);
                                if (0..5).contains(&sr) && (0..4).contains(&sc) {
                                    want += conv.w[[o, ch * 9 + ky * 3 + kx]] * x[[0, ch, sr as usize, sc as usize]];
                                }
                            }
                        }
                    }
                    assert!((y[[0, o, r, c]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3] {
            let mut conv = Conv2d::new(2, 3, k, &mut rng);
            conv.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            let x = rand4(&mut rng, (2, 2, 5, 6));
            let r = rand4(&mut rng, (2, 3, 5, 6));
            let loss = |l: &Conv2d, x: &Array4<f64>| (l.forward(x).unwrap().0 * &r).sum();
            let (_, cache) = conv.forward(&x).unwrap();
            let mut g = conv.zeros_like();
            let dx = conv.backward(&cache, &r, &mut g, true).unwrap();
            assert!(check_params(&conv, &g, 200, |l| loss(l, &x)) < TOL);
            let xf: Vec<f64> = x.iter().copied().collect();
            let err = check_input(&xf, dx.as_slice().unwrap(), |v| {
                loss(&conv, &Array4::from_shape_vec(x.dim(), v.to_vec()).unwrap())
            });
            assert!(err < TOL, "k={k}: {err}");
        }
    }

    #[test]
    fn relu_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand4(&mut rng, (2, 2, 6, 5));
        let r = rand4(&mut rng, (2, 2, 3, 2));
        let loss = |x: &Array4<f64>| (maxpool2(&relu(x)).0 * &r).sum();
        let y = relu(&x);
        let (_, arg) = maxpool2(&y);
        let dy = maxpool2_backward(y.dim(), &arg, &r);
        let dx = relu_backward(&y, &dy);
        let xf: Vec<f64> = x.iter().copied().collect();
        let err = check_input(&xf, dx.as_slice().unwrap(), |v| {
            loss(&Array4::from_shape_vec(x.dim(), v.to_vec()).unwrap())
        });
        assert!(err < TOL);
    }

    #[test]
    fn pool_picks_block_max() {
        let x = Array4::from_shape_vec((1, 1, 2, 4), vec![1.0, 5.0, -1.0, -2.0, 3.0, 2.0, -3.0, -0.5]).unwrap();
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.iter().copied().collect::<Vec<_>>(), vec![5.0, -0.5]);
        assert_eq!(arg, vec![1, 7]);
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        let uniform = Array2::zeros((3, 10));
        let (l, _) = softmax_cross_entropy(&uniform, &[0, 4, 9]);
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let (u, _) = softmax_uniform_cross_entropy(&Array2::zeros((4, 2)));
        assert!((u - 2f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = rand2(&mut rng, 4, 3) * 3.0;
        let labels = [2, 0, 1, 1];
        let (_, g) = softmax_cross_entropy(&z, &labels);
        let zf: Vec<f64> = z.iter().copied().collect();
        let err = check_input(&zf, g.as_slice().unwrap(), |v| {
            softmax_cross_entropy(&Array2::from_shape_vec((4, 3), v.to_vec()).unwrap(), &labels).0
        });
        assert!(err < TOL);
        let (_, g) = softmax_uniform_cross_entropy(&z);
        let err = check_input(&zf, g.as_slice().unwrap(), |v| {
            softmax_uniform_cross_entropy(&Array2::from_shape_vec((4, 3), v.to_vec()).unwrap()).0
        });
        assert!(err < TOL);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = rand2(&mut rng, 3, 5);
        let (l1, g1) = softmax_cross_entropy(&z, &[1, 2, 3]);
        let (l2, g2) = softmax_cross_entropy(&(&z + 17.5), &[1, 2, 3]);
        assert!((l1 - l2).abs() < 1e-9);
        assert!(g1.iter().zip(g2.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
        for row in softmax(&(z * 40.0)).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_single_step_by_hand() {
        // scalar cell: one input, one hidden unit
        let cell = Lstm {
            wx: Array2::from_shape_vec((1, 4), vec![0.5, -0.3, 0.8, 0.2]).unwrap(),
            wh: Array2::from_shape_vec((1, 4), vec![0.1, 0.1, 0.1, 0.1]).unwrap(),
            b: Array1::from_vec(vec![0.1, 0.2, -0.1, 0.0]),
        };
        let x = Array3::from_elem((1, 1, 1), 2.0);
        let (h, _) = cell.forward(&x).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sig(0.5 * 2.0 + 0.1);
        let g = (0.8f64 * 2.0 - 0.1).tanh();
        let o = sig(0.2 * 2.0);
        let c = i * g;
        assert!((h[[0, 0, 0]] - o * c.tanh()).abs() < 1e-15);
    }

    #[test]
    fn lstm_zero_fixed_point_and_length() {
        let cell = Lstm {
            wx: Array2::zeros((3, 8)),
            wh: Array2::zeros((2, 8)),
            b: Array1::zeros(8),
        };
        let (h, _) = cell.forward(&Array3::zeros((12, 4, 3))).unwrap();
        assert_eq!(h.dim(), (12, 4, 2));
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_bptt_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cell = Lstm::new(3, 4, &mut rng);
        cell.b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let x = rand3(&mut rng, (5, 2, 3));
        let r = rand3(&mut rng, (5, 2, 4));
        let loss = |l: &Lstm, x: &Array3<f64>| (l.forward(x).unwrap().0 * &r).sum();
        let (_, cache) = cell.forward(&x).unwrap();
        let mut g = cell.zeros_like();
        let dx = cell.backward(&cache, &r, &mut g, true).unwrap();
        assert!(check_params(&cell, &g, 500, |l| loss(l, &x)) < TOL);
        let xf: Vec<f64> = x.iter().copied().collect();
        let err = check_input(&xf, dx.as_slice().unwrap(), |v| {
            loss(&cell, &Array3::from_shape_vec(x.dim(), v.to_vec()).unwrap())
        });
        assert!(err < TOL);
    }

    #[test]
    fn dropout_mask_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = dropout_mask((400, 250), 0.25, &mut rng);
        let mean = m.mean().unwrap();
        assert!((mean - 1.0).abs() < 0.01);
        let zeros = m.iter().filter(|&&v| v == 0.0).count() as f64 / m.len() as f64;
        assert!((zeros - 0.25).abs() < 0.01);
        assert!(dropout_mask((2, 2), 0.0, &mut rng).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn params_roundtrip_and_sgd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut d = Dense::new(3, 2, &mut rng);
        let before = flat(&d);
        assert_eq!(param_count(&d), 8);
        let mut g = d.zeros_like();
        sgd(&mut d, &g, 1.0);
        assert_eq!(flat(&d), before);
        g.b.fill(1.0);
        sgd(&mut d, &g, 0.5);
        assert_eq!(d.b.to_vec(), vec![-0.5, -0.5]);

        let mut snap = Snapshot::default();
        save_into(&d, &mut snap, "head");
        let mut other = Dense::new(3, 2, &mut rng);
        load_from(&mut other, &snap, "head").unwrap();
        for (a, b) in flat(&d).iter().zip(flat(&other)) {
            assert_eq!(*a as f32, b as f32);
        }
        assert!(load_from(&mut other, &snap, "missing").is_err());
    }
}
