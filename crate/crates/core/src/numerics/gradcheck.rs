//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;

use super::rng;
use super::tape::{OpKind, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Bound on `|analytic − numeric| / max(1, |numeric|)`.
    pub tol: f64,
    /// Check at least this many elements, spread over every parameter tensor,
    /// instead of all of them. `None` checks everything.
    pub max_elements: Option<usize>,
    pub seed: u64,
    /// Negative-control hook forwarded to [`Tape::inject_fault`] for the
    /// analytic pass.
    pub fault: Option<OpKind>,
    /// How many of the worst elements the report keeps.
    pub keep_worst: usize,
    /// When a perturbation moves some ReLU input across zero, retry with
    /// the step divided by 10, at most this many times.
    pub kink_retries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-6,
            max_elements: None,
            seed: 0,
            fault: None,
            keep_worst: 10,
            kink_retries: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Offender {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Elements compared with a reduced step after a kink crossing.
    pub reduced_step: usize,
    /// Elements whose every step still crossed a kink; not compared.
    pub skipped: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tol: f64,
    /// Largest errors first.
    pub worst: Vec<Offender>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{} elements checked, {} above tol {:e}, max error {:.3e}",
            self.checked, self.failures, self.tol, self.max_error
        )?;
        if self.reduced_step + self.skipped > 0 {
            writeln!(
                f,
                "{} compared with a reduced step at a ReLU kink, {} skipped",
                self.reduced_step, self.skipped
            )?;
        }
        for o in &self.worst {
            writeln!(
                f,
                "  {}[{}]: analytic {:.9e} numeric {:.9e} error {:.3e}",
                o.param, o.index, o.analytic, o.numeric, o.error
            )?;
        }
        Ok(())
    }
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences. `f` receives the tape and one [`Var`] per entry of `params`
/// and must be deterministic.
pub fn grad_check<F>(
    params: &[(String, Tensor)],
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], fault: Option<OpKind>| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        if let Some(kind) = fault {
            tape.inject_fault(kind);
        }
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let (tape, vars, out) = eval(&values, opts.fault)?;
    let loss = tape.value(out).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed point".into()));
    }
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    for ((name, _), g) in params.iter().zip(&analytic) {
        if let Some(i) = g.first_non_finite() {
            return Err(Error::NonFinite(format!(
                "analytic gradient of {name}[{i}]"
            )));
        }
    }

    let selection = select_elements(params, opts);
    let mut offenders = Vec::new();
    let mut failures = 0;
    let mut max_error: f64 = 0.0;
    let mut checked = 0;
    let mut reduced_step = 0;
    let mut skipped = 0;
    let base_pattern = tape.relu_pattern();
    drop(tape);
    let loss_at = |values: &[Tensor]| -> Result<(f64, u64)> {
        let (tape, _, out) = eval(values, None)?;
        Ok((tape.value(out).data()[0], tape.relu_pattern()))
    };
    for (p, indices) in selection.iter().enumerate() {
        for &i in indices {
            let orig = values[p].data()[i];
            let mut step = opts.step;
            let mut numeric = None;
            for attempt in 0..=opts.kink_retries {
                values[p].data_mut()[i] = orig + step;
                let (plus, pp) = loss_at(&values)?;
                values[p].data_mut()[i] = orig - step;
                let (minus, pm) = loss_at(&values)?;
                values[p].data_mut()[i] = orig;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss when perturbing {}[{i}]",
                        params[p].0
                    )));
                }
                if pp == base_pattern && pm == base_pattern {
                    if attempt > 0 {
                        reduced_step += 1;
                    }
                    numeric = Some((plus - minus) / (2.0 * step));
                    break;
                }
                step /= 10.0;
            }
            let Some(numeric) = numeric else {
                skipped += 1;
                continue;
            };
            let a = analytic[p].data()[i];
            let error = (a - numeric).abs() / numeric.abs().max(1.0);
            checked += 1;
            max_error = max_error.max(error);
            if error > opts.tol {
                failures += 1;
            }
            offenders.push(Offender {
                param: params[p].0.clone(),
                index: i,
                analytic: a,
                numeric,
                error,
            });
        }
    }
    offenders.sort_by(|a, b| b.error.total_cmp(&a.error));
    offenders.truncate(opts.keep_worst);
    Ok(GradCheckReport {
        checked,
        reduced_step,
        skipped,
        failures,
        max_error,
        tol: opts.tol,
        worst: offenders,
    })
}

/// Per-tensor element indices to check. With a budget, every tensor gets the
/// same quota (capped by its size), raised until the budget is met.
fn select_elements(params: &[(String, Tensor)], opts: &GradCheckOptions) -> Vec<Vec<usize>> {
    let total: usize = params.iter().map(|(_, t)| t.len()).sum();
    let budget = match opts.max_elements {
        Some(b) if b < total => b,
        _ => return params.iter().map(|(_, t)| (0..t.len()).collect()).collect(),
    };
    let mut quota = budget.div_ceil(params.len().max(1));
    while params
        .iter()
        .map(|(_, t)| t.len().min(quota))
        .sum::<usize>()
        < budget
    {
        quota += 1;
    }
    let mut rng = rng::seeded(opts.seed);
    params
        .iter()
        .map(|(_, t)| {
            let take = t.len().min(quota);
            let mut idx = sample(&mut rng, t.len(), take).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect()
}
