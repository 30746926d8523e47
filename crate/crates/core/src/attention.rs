//! Attention over encoder states.
//!
//! Basic attention scores each encoder step with one scalar and normalizes
//! over time. Fine-grained attention scores every hidden dimension
//! separately, normalizing over time once per dimension, so a `T`-step
//! sequence of `n`-dimensional states carries `n × T` weights instead of
//! `T`.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{dense, DenseParams, DenseVars, Parameters};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Basic,
    FineGrained,
}

/// Two-layer scoring network: `concat(h_t, d_prev) → tanh(dense) → dense`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionScorerParams {
    pub hidden: DenseParams,
    pub output: DenseParams,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionScorerVars {
    pub hidden: DenseVars,
    pub output: DenseVars,
}

impl AttentionScorerParams {
    /// `encoder_size` is the width of each encoder state, `decoder_size` the
    /// width of the decoder state, `scorer_size` the hidden layer width.
    pub fn init(
        kind: AttentionKind,
        encoder_size: usize,
        decoder_size: usize,
        scorer_size: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        let arity = match kind {
            AttentionKind::Basic => 1,
            AttentionKind::FineGrained => encoder_size,
        };
        AttentionScorerParams {
            hidden: DenseParams::init(encoder_size + decoder_size, scorer_size, rng),
            output: DenseParams::init(scorer_size, arity, rng),
        }
    }

    pub fn zeros(
        kind: AttentionKind,
        encoder_size: usize,
        decoder_size: usize,
        scorer_size: usize,
    ) -> Self {
        let arity = match kind {
            AttentionKind::Basic => 1,
            AttentionKind::FineGrained => encoder_size,
        };
        AttentionScorerParams {
            hidden: DenseParams::zeros(encoder_size + decoder_size, scorer_size),
            output: DenseParams::zeros(scorer_size, arity),
        }
    }

    pub fn arity(&self) -> usize {
        self.output.output_size()
    }

    pub fn bind(&self, g: &mut Graph) -> AttentionScorerVars {
        AttentionScorerVars {
            hidden: self.hidden.bind(g),
            output: self.output.bind(g),
        }
    }

    /// Basic-mode scores `e_t`, one per encoder row.
    pub fn score_basic(&self, states: &Tensor, d_prev: &Tensor) -> Result<Tensor> {
        if self.arity() != 1 {
            return Err(arity_error(AttentionKind::Basic, 1, self.arity()));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let h = g.constant(states.clone());
        let d = g.constant(d_prev.clone());
        let e = score(&mut g, &vars, h, d)?;
        g.value(e).reshaped(&[states.rows()])
    }

    pub fn attend_basic(&self, states: &Tensor, d_prev: &Tensor) -> Result<AttentionResult> {
        self.attend(AttentionKind::Basic, states, d_prev)
    }

    pub fn attend_fine(&self, states: &Tensor, d_prev: &Tensor) -> Result<AttentionResult> {
        self.attend(AttentionKind::FineGrained, states, d_prev)
    }

    fn attend(&self, kind: AttentionKind, states: &Tensor, d_prev: &Tensor) -> Result<AttentionResult> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let h = g.constant(states.clone());
        let d = g.constant(d_prev.clone());
        let out = attend(&mut g, kind, &vars, h, d)?;
        Ok(out.read(&g))
    }
}

impl AttentionScorerVars {
    pub fn vars(&self, out: &mut Vec<Var>) {
        self.hidden.vars(out);
        self.output.vars(out);
    }
}

impl Parameters for AttentionScorerParams {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.hidden.tensors(&format!("{prefix}hidden."), out);
        self.output.tensors(&format!("{prefix}output."), out);
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.hidden.tensors_mut(out);
        self.output.tensors_mut(out);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult {
    /// `[n]`
    pub context: Tensor,
    /// `[T × k]`; `k = 1` for basic attention, `k = n` for fine-grained.
    pub weights: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub context: Var,
    pub weights: Var,
}

impl AttentionVars {
    pub fn read(&self, g: &Graph) -> AttentionResult {
        AttentionResult {
            context: g.value(self.context).clone(),
            weights: g.value(self.weights).clone(),
        }
    }
}

fn arity_error(kind: AttentionKind, expected: usize, got: usize) -> Error {
    Error::Config(format!(
        "{kind:?} attention needs a scorer with {expected} outputs, got {got}"
    ))
}

/// Scores every row of `states` (`[T × n]`) against `d_prev`, giving
/// `[T × k]`.
pub fn score(g: &mut Graph, p: &AttentionScorerVars, states: Var, d_prev: Var) -> Result<Var> {
    let shape = g.shape(states).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Contract(format!(
            "attention needs a non-empty [T × n] state matrix, got {shape:?}"
        )));
    }
    let mut rows = Vec::with_capacity(shape[0]);
    for t in 0..shape[0] {
        let h_t = g.row(states, t)?;
        let joint = g.concat(h_t, d_prev, 0)?;
        let hidden = dense(g, &p.hidden, joint)?;
        let hidden = g.tanh(hidden)?;
        rows.push(dense(g, &p.output, hidden)?);
    }
    g.stack_rows(&rows)
}

/// `α = softmax_t(e)`, `context = Σ_t α_t h_t` for scores `e: [T × 1]`.
pub fn basic_from_scores(g: &mut Graph, scores: Var, states: Var) -> Result<AttentionVars> {
    let (se, sh) = (g.shape(scores).to_vec(), g.shape(states).to_vec());
    if se.len() != 2 || se[1] != 1 || sh.len() != 2 || se[0] != sh[0] {
        return Err(Error::dim("basic attention", &se, &sh));
    }
    let weights = g.softmax(scores, 0)?;
    let wt = g.transpose(weights)?;
    let ctx = g.matmul(wt, states)?;
    let context = g.reshape(ctx, &[sh[1]])?;
    Ok(AttentionVars { context, weights })
}

/// `α_t^j = softmax_t(e^j)` separately for each dimension `j`;
/// `context_j = Σ_t α_t^j h_t^j`, for scores `e: [T × n]`.
pub fn fine_from_scores(g: &mut Graph, scores: Var, states: Var) -> Result<AttentionVars> {
    let (se, sh) = (g.shape(scores).to_vec(), g.shape(states).to_vec());
    if se != sh || se.len() != 2 {
        return Err(Error::dim("fine-grained attention", &se, &sh));
    }
    let weights = g.softmax(scores, 0)?;
    let weighted = g.hadamard(weights, states)?;
    let context = g.sum_axis(weighted, 0)?;
    Ok(AttentionVars { context, weights })
}

pub fn attend(
    g: &mut Graph,
    kind: AttentionKind,
    p: &AttentionScorerVars,
    states: Var,
    d_prev: Var,
) -> Result<AttentionVars> {
    let n = g.shape(states).get(1).copied().unwrap_or(0);
    let arity = g.shape(p.output.bias)[0];
    let expected = match kind {
        AttentionKind::Basic => 1,
        AttentionKind::FineGrained => n,
    };
    if arity != expected {
        return Err(arity_error(kind, expected, arity));
    }
    let scores = score(g, p, states, d_prev)?;
    match kind {
        AttentionKind::Basic => basic_from_scores(g, scores, states),
        AttentionKind::FineGrained => fine_from_scores(g, scores, states),
    }
}
