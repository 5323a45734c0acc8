//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates probed per parameter tensor; smaller tensors are probed exhaustively.
    pub max_coords_per_param: usize,
    pub seed: u64,
    /// Skip coordinates whose +-eps probes flip a ReLU sign or a max-pool
    /// winner relative to the unperturbed point. The central difference
    /// across such a switch measures an average of two slopes, not the
    /// derivative.
    pub skip_switches: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-4,
            max_coords_per_param: 24,
            seed: 0,
            skip_switches: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over probed coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    /// Coordinates skipped as non-differentiable; always 0 without `skip_switches`.
    pub coords_skipped: usize,
    /// (analytic, numeric) at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
}

/// Loss and switch signature at `params`.
fn eval_loss<F>(params: &[Tensor<f64>], builder: &mut F) -> Result<(f64, Option<u64>)>
where
    F: FnMut(&mut Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut g = Graph::inference().track_switches();
    let vars: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = builder(&mut g, &vars)?.value().item()?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {loss}")));
    }
    Ok((loss, g.switch_signature()))
}

/// Compares backpropagated gradients of `builder`'s scalar output against
/// central differences, in 64-bit arithmetic.
pub fn gradient_check<F>(
    params: &[Tensor<f64>],
    opts: GradCheckOptions,
    mut builder: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut g = Graph::new();
    let vars: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = builder(&mut g, &vars)?;
    let value = loss.value().item()?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {value}")));
    }
    let grads = g.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        coords_skipped: 0,
        worst_values: None,
    };
    let base = if opts.skip_switches {
        eval_loss(params, &mut builder)?.1
    } else {
        None
    };
    let mut probe = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = param.data()[i];
            probe[pi].data_mut()[i] = orig + opts.eps;
            let (up, sig_up) = eval_loss(&probe, &mut builder)?;
            probe[pi].data_mut()[i] = orig - opts.eps;
            let (down, sig_down) = eval_loss(&probe, &mut builder)?;
            probe[pi].data_mut()[i] = orig;

            if opts.skip_switches && (sig_up != base || sig_down != base) {
                report.coords_skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic[pi].data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, i));
                report.worst_values = Some((a, numeric));
            }
        }
    }
    Ok(report)
}
