//! Central-difference verification of analytic gradients.

use crate::error::Result;
use crate::exec::Execution;
use crate::numerics::{Graph, Tensor, Var};

/// One checked parameter entry.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.rel_error))
    }

    pub fn flagged(&self) -> Vec<&GradCheckEntry> {
        self.entries
            .iter()
            .filter(|e| !(e.rel_error <= self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.flagged().is_empty()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Evaluates `f` with `params` bound as trainable leaves and returns the
/// scalar loss together with the graph and the leaf handles.
fn evaluate<F>(params: &[Tensor], f: &F) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok((g, vars, loss))
}

/// Compares reverse-mode gradients of `f` against
/// `(f(p + step) - f(p - step)) / (2 step)` for every entry of every tensor
/// in `params`. `f` must be deterministic and return a scalar node.
pub fn finite_diff_check<F>(
    params: &[Tensor],
    f: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + Send,
{
    finite_diff_check_with(params, f, step, tolerance, Execution::default())
}

pub fn finite_diff_check_with<F>(
    params: &[Tensor],
    f: F,
    step: f64,
    tolerance: f64,
    exec: Execution,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + Send,
{
    let (mut g, vars, loss) = evaluate(params, &f)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().expect("gradient populated"))
        .collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |i| (p, i)))
        .collect();

    let probe = |p: usize, i: usize, delta: f64| -> Result<f64> {
        let mut shifted = params.to_vec();
        shifted[p].data_mut()[i] += delta;
        let (g, _, loss) = evaluate(&shifted, &f)?;
        g.value(loss).item()
    };

    let numeric: Vec<Result<f64>> = exec.map_slice(&coords, |&(p, i)| {
        let plus = probe(p, i, step)?;
        let minus = probe(p, i, -step)?;
        Ok((plus - minus) / (2.0 * step))
    });

    let mut entries = Vec::with_capacity(coords.len());
    for (&(p, i), n) in coords.iter().zip(numeric) {
        let n = n?;
        let a = analytic[p].data()[i];
        entries.push(GradCheckEntry {
            param: p,
            index: i,
            analytic: a,
            numeric: n,
            rel_error: relative_error(a, n),
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}
