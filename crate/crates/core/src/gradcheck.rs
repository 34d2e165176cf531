//! Central-difference verification of analytic gradients.
//!
//! Checks run the function on a `Graph<f64>`: the code under test is the same
//! generic code the `f32` models execute, while the numeric derivative is not
//! dominated by single-precision rounding.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};

/// Smallest denominator used when forming relative errors.
pub const DENOM_FLOOR: f64 = 1e-6;

/// Which coordinates of each input to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// Up to `per_input` coordinates per input, drawn without replacement.
    Sample { per_input: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub coords_checked: usize,
    /// (input index, coordinate) of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[(Vec<usize>, Vec<f64>)], track: bool) -> Result<(Graph<f64>, Vec<Tensor>, Tensor)>
where
    F: Fn(&mut Graph<f64>, &[Tensor]) -> Result<Tensor>,
{
    let mut g = Graph::<f64>::new();
    let mut leaves = Vec::with_capacity(inputs.len());
    for (shape, values) in inputs {
        let t = if track {
            g.variable(shape, values.clone())?
        } else {
            g.tensor(shape, values.clone())?
        };
        leaves.push(t);
    }
    let out = f(&mut g, &leaves)?;
    if g.data(out).len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    Ok((g, leaves, out))
}

/// Compares the analytic gradient of the scalar function `f` with central
/// differences of step `h` at the given input values.
pub fn finite_diff_check<F>(
    f: F,
    inputs: &[(Vec<usize>, Vec<f64>)],
    h: f64,
    tol: f64,
    coords: Coords,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Tensor]) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let (mut g, leaves, out) = evaluate(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|&t| g.grad(t).unwrap_or_default()).collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        coords_checked: 0,
        worst: None,
        tol,
        passed: true,
    };
    let mut work: Vec<(Vec<usize>, Vec<f64>)> = inputs.to_vec();
    for (i, (_, values)) in inputs.iter().enumerate() {
        let picked: Vec<usize> = match coords {
            Coords::All => (0..values.len()).collect(),
            Coords::Sample { per_input, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                let mut idx = sample(&mut rng, values.len(), per_input.min(values.len())).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        for c in picked {
            let orig = values[c];
            work[i].1[c] = orig + h;
            let (gp, _, op) = evaluate(&f, &work, false)?;
            let plus = gp.item(op);
            work[i].1[c] = orig - h;
            let (gm, _, om) = evaluate(&f, &work, false)?;
            let minus = gm.item(om);
            work[i].1[c] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i][c];
            let rel = relative_error(a, numeric);
            report.coords_checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = Some((i, c));
            }
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}
