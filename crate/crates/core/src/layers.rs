//! LSTM cell, dense, dropout, layer normalization and Time2Vec.
//!
//! Each layer has a parameter record holding plain [`Tensor`]s, a `*Vars`
//! counterpart holding the same tensors bound into a [`Graph`], and
//! graph-level forward functions. Value-level helpers on the parameter
//! records build a throwaway graph for one-off evaluation.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Flat, ordered view of a parameter record.
///
/// `tensors`, `tensors_mut` and the bound `*Vars::vars` of the same record
/// must visit tensors in the same order.
pub trait Parameters {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>);

    fn parameter_count(&self) -> usize {
        let mut out = Vec::new();
        self.tensors("", &mut out);
        out.iter().map(|(_, t)| t.len()).sum()
    }
}

fn uniform(rng: &mut dyn RngCore, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn rename_dim(err: Error, op: &str) -> Error {
    match err {
        Error::Dimension { left, right, .. } => Error::Dimension {
            op: op.to_string(),
            left,
            right,
        },
        other => other,
    }
}

// ---------------------------------------------------------------- dense

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    /// `[out × in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl DenseParams {
    pub fn zeros(input: usize, output: usize) -> Self {
        DenseParams {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn init(input: usize, output: usize, rng: &mut dyn RngCore) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        DenseParams {
            weight: uniform(rng, &[output, input], bound),
            bias: uniform(rng, &[output], bound),
        }
    }

    pub fn input_size(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_size(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph) -> DenseVars {
        DenseVars {
            weight: g.param(self.weight.clone()),
            bias: g.param(self.bias.clone()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.constant(x.clone());
        let y = dense(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }
}

impl DenseVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        out.extend([self.weight, self.bias]);
    }
}

impl Parameters for DenseParams {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}weight"), &self.weight));
        out.push((format!("{prefix}bias"), &self.bias));
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// `W·x + b`, no activation.
pub fn dense(g: &mut Graph, p: &DenseVars, x: Var) -> Result<Var> {
    let wx = g.matvec(p.weight, x).map_err(|e| rename_dim(e, "dense"))?;
    g.add(wx, p.bias).map_err(|e| rename_dim(e, "dense bias"))
}

// ----------------------------------------------------------------- lstm

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    pub input_size: usize,
    pub hidden_size: usize,
    /// Gates in order forget, input, candidate, output; each weight is
    /// `[hidden × (hidden + input)]` acting on `concat(h, x)`.
    pub forget: DenseParams,
    pub input: DenseParams,
    pub candidate: DenseParams,
    pub output: DenseParams,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmCellVars {
    pub input_size: usize,
    pub hidden_size: usize,
    pub forget: DenseVars,
    pub input: DenseVars,
    pub candidate: DenseVars,
    pub output: DenseVars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmStateVars {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[hidden]),
            c: Tensor::zeros(&[hidden]),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> LstmStateVars {
        LstmStateVars {
            h: g.constant(self.h.clone()),
            c: g.constant(self.c.clone()),
        }
    }

    pub fn read(g: &Graph, vars: LstmStateVars) -> Self {
        LstmState {
            h: g.value(vars.h).clone(),
            c: g.value(vars.c).clone(),
        }
    }
}

impl LstmCellParams {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let gate = || DenseParams::zeros(hidden_size + input_size, hidden_size);
        LstmCellParams {
            input_size,
            hidden_size,
            forget: gate(),
            input: gate(),
            candidate: gate(),
            output: gate(),
        }
    }

    pub fn init(input_size: usize, hidden_size: usize, rng: &mut dyn RngCore) -> Self {
        let fan_in = hidden_size + input_size;
        let mut gate = || DenseParams::init(fan_in, hidden_size, rng);
        LstmCellParams {
            input_size,
            hidden_size,
            forget: gate(),
            input: gate(),
            candidate: gate(),
            output: gate(),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> LstmCellVars {
        LstmCellVars {
            input_size: self.input_size,
            hidden_size: self.hidden_size,
            forget: self.forget.bind(g),
            input: self.input.bind(g),
            candidate: self.candidate.bind(g),
            output: self.output.bind(g),
        }
    }

    pub fn step(&self, state: &LstmState, x: &Tensor) -> Result<LstmState> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let s = state.bind(&mut g);
        let x = g.constant(x.clone());
        let next = lstm_step(&mut g, &vars, s, x)?;
        Ok(LstmState::read(&g, next))
    }

    /// Runs the cell over `xs`, returning every hidden state as rows of a
    /// `[T × hidden]` matrix and the final state.
    pub fn sequence(&self, initial: &LstmState, xs: &[Tensor]) -> Result<(Tensor, LstmState)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let s = initial.bind(&mut g);
        let xs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let (h, last) = lstm_sequence(&mut g, &vars, s, &xs)?;
        Ok((g.value(h).clone(), LstmState::read(&g, last)))
    }
}

impl LstmCellVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        for gate in [&self.forget, &self.input, &self.candidate, &self.output] {
            gate.vars(out);
        }
    }
}

impl Parameters for LstmCellParams {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.forget.tensors(&format!("{prefix}forget."), out);
        self.input.tensors(&format!("{prefix}input."), out);
        self.candidate.tensors(&format!("{prefix}candidate."), out);
        self.output.tensors(&format!("{prefix}output."), out);
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.forget.tensors_mut(out);
        self.input.tensors_mut(out);
        self.candidate.tensors_mut(out);
        self.output.tensors_mut(out);
    }
}

/// One LSTM step:
///
/// ```text
/// f  = σ(W_f·[h, x] + b_f)        i = σ(W_i·[h, x] + b_i)
/// c̃  = tanh(W_c·[h, x] + b_c)     c' = f ⊙ c + i ⊙ c̃
/// o  = σ(W_o·[h, x] + b_o)        h' = o ⊙ tanh(c')
/// ```
pub fn lstm_step(
    g: &mut Graph,
    p: &LstmCellVars,
    state: LstmStateVars,
    x: Var,
) -> Result<LstmStateVars> {
    let m = p.hidden_size;
    if g.shape(x) != [p.input_size] {
        return Err(Error::dim("lstm input", &[p.input_size], g.shape(x)));
    }
    if g.shape(state.h) != [m] || g.shape(state.c) != [m] {
        return Err(Error::dim("lstm state", &[m], g.shape(state.h)));
    }
    let hx = g.concat(state.h, x, 0)?;
    let gate = |g: &mut Graph, name: &str, d: &DenseVars| {
        dense(g, d, hx).map_err(|e| rename_dim(e, &format!("lstm {name} gate")))
    };
    let f_pre = gate(g, "forget", &p.forget)?;
    let i_pre = gate(g, "input", &p.input)?;
    let c_pre = gate(g, "candidate", &p.candidate)?;
    let o_pre = gate(g, "output", &p.output)?;

    let f = g.sigmoid(f_pre)?;
    let i = g.sigmoid(i_pre)?;
    let c_tilde = g.tanh(c_pre)?;
    let o = g.sigmoid(o_pre)?;

    let keep = g.hadamard(f, state.c)?;
    let write = g.hadamard(i, c_tilde)?;
    let c = g.add(keep, write)?;
    let c_act = g.tanh(c)?;
    let h = g.hadamard(o, c_act)?;
    Ok(LstmStateVars { h, c })
}

/// Returns `H` (`[T × hidden]`) and the final state.
pub fn lstm_sequence(
    g: &mut Graph,
    p: &LstmCellVars,
    initial: LstmStateVars,
    xs: &[Var],
) -> Result<(Var, LstmStateVars)> {
    if xs.is_empty() {
        return Err(Error::Contract("lstm sequence is empty".into()));
    }
    let mut state = initial;
    let mut rows = Vec::with_capacity(xs.len());
    for &x in xs {
        state = lstm_step(g, p, state, x)?;
        rows.push(state.h);
    }
    let h = g.stack_rows(&rows)?;
    Ok((h, state))
}

// ------------------------------------------------------------- time2vec

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Time2VecParams {
    /// `[l + 1]`
    pub alpha: Tensor,
    /// `[l + 1]`
    pub beta: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct Time2VecVars {
    pub alpha: Var,
    pub beta: Var,
}

impl Time2VecParams {
    pub fn zeros(l: usize) -> Self {
        Time2VecParams {
            alpha: Tensor::zeros(&[l + 1]),
            beta: Tensor::zeros(&[l + 1]),
        }
    }

    pub fn init(l: usize, rng: &mut dyn RngCore) -> Self {
        Time2VecParams {
            alpha: uniform(rng, &[l + 1], 1.0),
            beta: uniform(rng, &[l + 1], 1.0),
        }
    }

    pub fn new(alpha: Tensor, beta: Tensor) -> Result<Self> {
        if alpha.shape() != beta.shape() || alpha.rank() != 1 || alpha.is_empty() {
            return Err(Error::dim("time2vec", alpha.shape(), beta.shape()));
        }
        Ok(Time2VecParams { alpha, beta })
    }

    /// Embedding size `l + 1`.
    pub fn size(&self) -> usize {
        self.alpha.len()
    }

    pub fn bind(&self, g: &mut Graph) -> Time2VecVars {
        Time2VecVars {
            alpha: g.param(self.alpha.clone()),
            beta: g.param(self.beta.clone()),
        }
    }

    pub fn embed(&self, t: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let out = time2vec(&mut g, &vars, t)?;
        Ok(g.value(out).clone())
    }
}

impl Time2VecVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        out.extend([self.alpha, self.beta]);
    }
}

impl Parameters for Time2VecParams {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}alpha"), &self.alpha));
        out.push((format!("{prefix}beta"), &self.beta));
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.alpha);
        out.push(&mut self.beta);
    }
}

/// Element 0 is `α₀t + β₀`; elements `1..=l` are `relu(α_j t + β_j)`.
pub fn time2vec(g: &mut Graph, p: &Time2VecVars, t: f64) -> Result<Var> {
    if !t.is_finite() {
        return Err(Error::NonFinite("time2vec time index".into()));
    }
    let size = g.shape(p.alpha)[0];
    let at = g.scale(p.alpha, t);
    let linear = g.add(at, p.beta)?;
    if size == 1 {
        return Ok(linear);
    }
    let mut first = vec![0.0; size];
    first[0] = 1.0;
    let rest: Vec<f64> = first.iter().map(|v| 1.0 - v).collect();
    let first = g.constant(Tensor::vector(first));
    let rest = g.constant(Tensor::vector(rest));
    let periodic = g.relu(linear)?;
    let a = g.hadamard(linear, first)?;
    let b = g.hadamard(periodic, rest)?;
    g.add(a, b)
}

// -------------------------------------------------------------- dropout

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; evaluation is the
/// identity.
pub fn dropout(
    g: &mut Graph,
    rate: f64,
    x: Var,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Var> {
    check_dropout_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = g.constant(Tensor::new(shape, mask)?);
    g.hadamard(x, mask)
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

pub fn dropout_forward(rate: f64, x: &Tensor, mode: Mode, rng: &mut dyn RngCore) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = dropout(&mut g, rate, v, mode, rng)?;
    Ok(g.value(y).clone())
}

// ----------------------------------------------------------- layer norm

pub const LAYER_NORM_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub offset: Tensor,
    pub epsilon: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub gain: Var,
    pub offset: Var,
    pub epsilon: f64,
}

impl LayerNormParams {
    pub fn new(size: usize) -> Self {
        LayerNormParams {
            gain: Tensor::ones(&[size]),
            offset: Tensor::zeros(&[size]),
            epsilon: LAYER_NORM_EPSILON,
        }
    }

    pub fn zeros(size: usize) -> Self {
        LayerNormParams {
            gain: Tensor::zeros(&[size]),
            offset: Tensor::zeros(&[size]),
            epsilon: LAYER_NORM_EPSILON,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> LayerNormVars {
        LayerNormVars {
            gain: g.param(self.gain.clone()),
            offset: g.param(self.offset.clone()),
            epsilon: self.epsilon,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.constant(x.clone());
        let y = layer_norm(&mut g, &vars, x)?;
        Ok(g.value(y).clone())
    }
}

impl LayerNormVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        out.extend([self.gain, self.offset]);
    }
}

impl Parameters for LayerNormParams {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}gain"), &self.gain));
        out.push((format!("{prefix}offset"), &self.offset));
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.gain);
        out.push(&mut self.offset);
    }
}

/// Normalizes over the feature dimension, then applies gain and offset.
pub fn layer_norm(g: &mut Graph, p: &LayerNormVars, x: Var) -> Result<Var> {
    let n = g.normalize(x, p.epsilon)?;
    let scaled = g.hadamard(n, p.gain).map_err(|e| rename_dim(e, "layer norm"))?;
    g.add(scaled, p.offset)
}
