use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Number of coordinates to probe (all of them when fewer exist).
    pub coords: usize,
    /// Denominator floor for the relative error, so coordinates with a true
    /// gradient of zero are judged on absolute error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-3,
            coords: 64,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checks: Vec<CoordinateCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences on a random subset of coordinates.
///
/// `f` receives a fresh graph and one bound parameter per entry of `params`,
/// and must return a scalar node.
pub fn finite_difference_check<F>(
    params: &[Tensor],
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param_ref(p)).collect();
        let loss = f(&mut g, &vars)?;
        g.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(&v, p)| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect()
    };

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant_ref(p)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.numel();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut flat: Vec<usize> = sample(&mut rng, total, opts.coords.min(total)).into_vec();
    flat.sort_unstable();

    let mut work = params.to_vec();
    let mut checks = Vec::with_capacity(flat.len());
    for k in flat {
        let param = offsets.partition_point(|&o| o <= k) - 1;
        let index = k - offsets[param];
        let orig = work[param].data()[index];
        work[param].data_mut()[index] = orig + opts.eps;
        let plus = eval(&work)?;
        work[param].data_mut()[index] = orig - opts.eps;
        let minus = eval(&work)?;
        work[param].data_mut()[index] = orig;

        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic[param][index];
        let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
        checks.push(CoordinateCheck {
            param,
            index,
            analytic: a,
            numeric,
            rel_error: (a - numeric).abs() / denom,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < opts.tol,
        max_rel_error,
        checks,
    })
}
