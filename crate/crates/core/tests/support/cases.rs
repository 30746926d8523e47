//! Shared random cases for the full-model gradient check.

use attnfc_core::layers::Mode;
use attnfc_core::model::{Model, ModelConfig};
use attnfc_core::numerics::{Graph, Tensor, Var};
use attnfc_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub seed: u64,
    pub model: Model,
    pub window: Tensor,
    pub times: Vec<f64>,
    pub target: f64,
}

/// Random default-architecture model with a random scaled window and a
/// day-index time axis starting somewhere in the paper's date range.
pub fn case(config: &ModelConfig, seed: u64) -> Case {
    let model = Model::new(config.clone(), seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(1000 + seed);
    let rows: Vec<Vec<f64>> = (0..config.lookback)
        .map(|_| (0..config.feature_count).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let start = r.gen_range(0..200) as f64;
    Case {
        seed,
        model,
        window: Tensor::matrix(&rows).unwrap(),
        times: (0..config.lookback).map(|i| start + i as f64).collect(),
        target: r.gen_range(-1.0..1.0),
    }
}

impl Case {
    /// Training-mode squared error on the tape; dropout uses `ChaCha8(seed)`.
    pub fn loss(&self, g: &mut Graph, leaves: &[Var]) -> Result<Var> {
        let bound = self.model.bind_leaves(leaves)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let out = self
            .model
            .forward(g, &bound, &self.window, &self.times, Mode::Train, &mut rng)?;
        let y = g.constant(Tensor::vector(vec![self.target]));
        let d = g.sub(out.prediction, y)?;
        let s = g.hadamard(d, d)?;
        Ok(g.sum(s))
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.model
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect()
    }
}

/// Outcome of checking one entry against the best available central
/// difference.
#[derive(Clone, Debug)]
pub struct EntryCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric_f64: f64,
    pub numeric_dd: Option<f64>,
    pub rel_error: f64,
}

pub struct CaseReport {
    pub entries: usize,
    pub rechecked: Vec<EntryCheck>,
    pub failures: Vec<EntryCheck>,
    pub max_rel_error: f64,
}

/// Central differences (step `step`) for every parameter entry in f64.
/// Entries the f64 quotient cannot resolve to `tol` are recomputed with the
/// same step in double-double, which removes the cancellation error.
pub fn check_case(c: &Case, step: f64, tol: f64) -> CaseReport {
    use super::reference::{central_difference_dd, dropout_masks};
    use attnfc_core::numerics::{finite_diff_check, relative_error};

    let names: Vec<String> = c.model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let report = finite_diff_check(&c.params(), |g, v| c.loss(g, v), step, tol).unwrap();
    let masks = dropout_masks(&c.model, c.seed);
    let mut out = CaseReport {
        entries: report.entries.len(),
        rechecked: Vec::new(),
        failures: Vec::new(),
        max_rel_error: 0.0,
    };
    for e in &report.entries {
        let mut check = EntryCheck {
            param: names[e.param].clone(),
            index: e.index,
            analytic: e.analytic,
            numeric_f64: e.numeric,
            numeric_dd: None,
            rel_error: e.rel_error,
        };
        if e.rel_error > tol {
            let dd = central_difference_dd(
                &c.model, &c.window, &c.times, &masks, c.target, e.param, e.index, step,
            );
            check.numeric_dd = Some(dd);
            check.rel_error = relative_error(e.analytic, dd);
            out.rechecked.push(check.clone());
        }
        out.max_rel_error = out.max_rel_error.max(check.rel_error);
        if check.rel_error > tol {
            out.failures.push(check);
        }
    }
    out
}
