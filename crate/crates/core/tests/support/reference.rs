//! Straight-line reference implementation of the AttentionLSTM and plain
//! LSTM forward passes, generic over the scalar type.
//!
//! Written independently of the tape: plain loops over slices, no graph.
//! Evaluated in [`DD`] it serves as a high-precision finite-difference
//! oracle; evaluated in `f64` it cross-checks the library's forward pass.

use std::ops::{Add, Div, Mul, Neg, Sub};

use attnfc_core::attention::AttentionKind;
use attnfc_core::model::{Model, ModelKind};
use attnfc_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dd::DD;

pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn of(x: f64) -> Self;
    fn val(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn positive(self) -> bool;

    fn zero() -> Self {
        Self::of(0.0)
    }

    fn one() -> Self {
        Self::of(1.0)
    }

    fn sigmoid(self) -> Self {
        if self.positive() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }

    fn tanh(self) -> Self {
        // tanh(x) = sign(x) (1 - e^{-2|x|}) / (1 + e^{-2|x|})
        let neg = !self.positive();
        let a = if neg { -self } else { self };
        let e = (-(a + a)).exp();
        let t = (Self::one() - e) / (Self::one() + e);
        if neg {
            -t
        } else {
            t
        }
    }

    fn relu(self) -> Self {
        if self.positive() {
            self
        } else {
            Self::zero()
        }
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn val(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn positive(self) -> bool {
        self > 0.0
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

impl Real for DD {
    fn of(x: f64) -> Self {
        DD::new(x)
    }
    fn val(self) -> f64 {
        self.to_f64()
    }
    fn exp(self) -> Self {
        DD::exp(self)
    }
    fn sqrt(self) -> Self {
        DD::sqrt(self)
    }
    fn positive(self) -> bool {
        self.is_positive()
    }
}

/// Parameter tensors in `Model::named_tensors` order, with shapes.
pub struct Params<R> {
    pub values: Vec<Vec<R>>,
    pub shapes: Vec<Vec<usize>>,
}

impl<R: Real> Params<R> {
    pub fn of_model(model: &Model) -> Self {
        let named = model.named_tensors();
        Params {
            values: named
                .iter()
                .map(|(_, t)| t.data().iter().map(|&v| R::of(v)).collect())
                .collect(),
            shapes: named.iter().map(|(_, t)| t.shape().to_vec()).collect(),
        }
    }
}

struct Cursor<'a, R> {
    params: &'a Params<R>,
    next: usize,
}

struct Dense<'a, R> {
    w: &'a [R],
    b: &'a [R],
    rows: usize,
    cols: usize,
}

impl<'a, R: Real> Cursor<'a, R> {
    fn take(&mut self) -> (&'a [R], &'a [usize]) {
        let i = self.next;
        self.next += 1;
        (&self.params.values[i], &self.params.shapes[i])
    }

    fn dense(&mut self) -> Dense<'a, R> {
        let (w, shape) = self.take();
        let (b, _) = self.take();
        Dense {
            w,
            b,
            rows: shape[0],
            cols: shape[1],
        }
    }
}

impl<R: Real> Dense<'_, R> {
    fn apply(&self, x: &[R]) -> Vec<R> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                let mut s = R::zero();
                for j in 0..self.cols {
                    s = s + self.w[i * self.cols + j] * x[j];
                }
                s + self.b[i]
            })
            .collect()
    }
}

struct Lstm<'a, R> {
    gates: [Dense<'a, R>; 4],
}

impl<'a, R: Real> Lstm<'a, R> {
    fn read(c: &mut Cursor<'a, R>) -> Self {
        Lstm {
            gates: [c.dense(), c.dense(), c.dense(), c.dense()],
        }
    }

    fn step(&self, h: &[R], cell: &[R], x: &[R]) -> (Vec<R>, Vec<R>) {
        let hx: Vec<R> = h.iter().chain(x).copied().collect();
        let f = self.gates[0].apply(&hx);
        let i = self.gates[1].apply(&hx);
        let g = self.gates[2].apply(&hx);
        let o = self.gates[3].apply(&hx);
        let m = h.len();
        let mut c_new = Vec::with_capacity(m);
        let mut h_new = Vec::with_capacity(m);
        for k in 0..m {
            let c = f[k].sigmoid() * cell[k] + i[k].sigmoid() * g[k].tanh();
            h_new.push(o[k].sigmoid() * c.tanh());
            c_new.push(c);
        }
        (h_new, c_new)
    }
}

fn layer_norm<R: Real>(x: &[R], gain: &[R], offset: &[R], eps: f64) -> Vec<R> {
    let n = R::of(x.len() as f64);
    let mean = x.iter().fold(R::zero(), |a, &b| a + b) / n;
    let var = x.iter().fold(R::zero(), |a, &b| a + (b - mean) * (b - mean)) / n;
    let inv = R::one() / (var + R::of(eps)).sqrt();
    x.iter()
        .zip(gain.iter().zip(offset))
        .map(|(&v, (&g, &o))| (v - mean) * inv * g + o)
        .collect()
}

fn softmax_over_time<R: Real>(scores: &[Vec<R>]) -> Vec<Vec<R>> {
    let t_len = scores.len();
    let k = scores[0].len();
    let mut out = vec![vec![R::zero(); k]; t_len];
    for j in 0..k {
        let max = scores
            .iter()
            .map(|r| r[j].val())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<R> = scores.iter().map(|r| (r[j] - R::of(max)).exp()).collect();
        let total = exps.iter().fold(R::zero(), |a, &b| a + b);
        for t in 0..t_len {
            out[t][j] = exps[t] / total;
        }
    }
    out
}

/// Dropout masks drawn exactly as the library draws them: one uniform per
/// element of every non-top encoder layer output, time step by time step.
pub fn dropout_masks(model: &Model, seed: u64) -> Vec<Vec<Vec<f64>>> {
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = cfg.dropout_rate;
    let keep = 1.0 / (1.0 - rate);
    let depth = cfg.encoder_layer_sizes.len();
    cfg.encoder_layer_sizes[..depth - 1]
        .iter()
        .map(|&m| {
            (0..cfg.lookback)
                .map(|_| {
                    (0..m)
                        .map(|_| {
                            if rate == 0.0 {
                                1.0
                            } else if rng.gen::<f64>() < rate {
                                0.0
                            } else {
                                keep
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// One-step prediction. `masks[layer][t][unit]` multiplies the normalized
/// output of every non-top layer (pass all-ones for evaluation mode).
pub fn predict<R: Real>(
    model: &Model,
    params: &Params<R>,
    window: &Tensor,
    times: &[f64],
    masks: &[Vec<Vec<f64>>],
) -> R {
    let cfg = &model.config;
    let mut c = Cursor { params, next: 0 };
    let lookback = cfg.lookback;
    let row = |t: usize| -> Vec<R> { window.row(t).iter().map(|&v| R::of(v)).collect() };

    let (t2v, inputs): (Option<(&[R], &[R])>, Vec<Vec<R>>) = match cfg.kind {
        ModelKind::Persistence => {
            return R::of(window.get2(lookback - 1, cfg.target_index));
        }
        ModelKind::PlainLstm => (None, (0..lookback).map(row).collect()),
        ModelKind::AttentionLstm => {
            let (alpha, _) = c.take();
            let (beta, _) = c.take();
            let rows = (0..lookback)
                .map(|t| {
                    let mut r = row(t);
                    let tt = R::of(times[t]);
                    for j in 0..alpha.len() {
                        let z = alpha[j] * tt + beta[j];
                        r.push(if j == 0 { z } else { z.relu() });
                    }
                    r
                })
                .collect();
            (Some((alpha, beta)), rows)
        }
    };

    let depth = cfg.encoder_layer_sizes.len();
    let mut seq = inputs.clone();
    let mut last_h = Vec::new();
    let mut last_c = Vec::new();
    for layer in 0..depth {
        let lstm = Lstm::read(&mut c);
        let (gain, _) = c.take();
        let (offset, _) = c.take();
        let m = cfg.encoder_layer_sizes[layer];
        let mut h = vec![R::zero(); m];
        let mut cell = vec![R::zero(); m];
        let mut next = Vec::with_capacity(lookback);
        for (t, x) in seq.iter().enumerate() {
            let (h2, c2) = lstm.step(&h, &cell, x);
            h = h2;
            cell = c2;
            let mut y = layer_norm(&h, gain, offset, 1e-5);
            if layer + 1 < depth {
                for (v, &k) in y.iter_mut().zip(&masks[layer][t]) {
                    *v = *v * R::of(k);
                }
            }
            next.push(y);
        }
        seq = next;
        last_h = h;
        last_c = cell;
    }

    match cfg.kind {
        ModelKind::PlainLstm => {
            let head = c.dense();
            head.apply(&seq[lookback - 1])[0]
        }
        ModelKind::AttentionLstm => {
            let _ = t2v;
            let decoder = Lstm::read(&mut c);
            let hidden = c.dense();
            let out = c.dense();
            let head = c.dense();
            let (d_h, _) = decoder.step(&last_h, &last_c, &inputs[lookback - 1]);
            let scores: Vec<Vec<R>> = seq
                .iter()
                .map(|h_t| {
                    let joint: Vec<R> = h_t.iter().chain(&last_h).copied().collect();
                    let z: Vec<R> = hidden.apply(&joint).into_iter().map(Real::tanh).collect();
                    out.apply(&z)
                })
                .collect();
            let alpha = softmax_over_time(&scores);
            let n = seq[0].len();
            let context: Vec<R> = (0..n)
                .map(|j| {
                    let col = match cfg.attention {
                        AttentionKind::Basic => 0,
                        AttentionKind::FineGrained => j,
                    };
                    (0..lookback).fold(R::zero(), |a, t| a + alpha[t][col] * seq[t][j])
                })
                .collect();
            let joint: Vec<R> = context.iter().chain(&d_h).copied().collect();
            head.apply(&joint)[0]
        }
        ModelKind::Persistence => unreachable!(),
    }
}

/// `(prediction - target)^2`
pub fn squared_error<R: Real>(
    model: &Model,
    params: &Params<R>,
    window: &Tensor,
    times: &[f64],
    masks: &[Vec<Vec<f64>>],
    target: f64,
) -> R {
    let d = predict(model, params, window, times, masks) - R::of(target);
    d * d
}

/// Central difference of the squared error with respect to entry `index`
/// of parameter tensor `param`, evaluated entirely in double-double.
pub fn central_difference_dd(
    model: &Model,
    window: &Tensor,
    times: &[f64],
    masks: &[Vec<Vec<f64>>],
    target: f64,
    param: usize,
    index: usize,
    step: f64,
) -> f64 {
    let mut params = Params::<DD>::of_model(model);
    let base = params.values[param][index];
    params.values[param][index] = base + DD::new(step);
    let plus = squared_error(model, &params, window, times, masks, target);
    params.values[param][index] = base - DD::new(step);
    let minus = squared_error(model, &params, window, times, masks, target);
    ((plus - minus) / DD::new(2.0 * step)).to_f64()
}
