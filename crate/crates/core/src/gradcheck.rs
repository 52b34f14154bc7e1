//! Central-difference gradient checks in double precision.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::params::ParamStore;
use crate::{Error, Result, RngState, Tape, Tensor, Var};

fn check_step(h: f64) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidStep(h))
    }
}

/// `|analytic − numeric| / max(1, |analytic|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let y = f(&mut tape, xv)?;
    tape.scalar(y)
}

/// Maximum relative error between the tape gradient of scalar `f` at `x`
/// and the central difference `(f(x+h·e) − f(x−h·e)) / 2h`, over every
/// element of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    check_step(h)?;
    let x = x.clone().with_requires_grad(true);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let y = f(&mut tape, xv)?;
    let grads = tape.gradients(y)?;
    let zeros = alloc::vec![0.0; x.len()];
    let analytic = grads.get(xv).unwrap_or(&zeros);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic[i], (fp - fm) / (2.0 * h)));
    }
    Ok(worst)
}

/// Which coordinates of each trainable tensor a parameter-level check probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    All,
    /// Up to `per_tensor` seeded-random coordinates per tensor (every
    /// coordinate when the tensor is no larger than that).
    Sampled { per_tensor: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    pub tensors: usize,
}

/// Gradient check of a scalar function of every trainable tensor in
/// `store`. Frozen tensors are part of the function but not probed.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    f: F,
    h: f64,
    coverage: Coverage,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_step(h)?;
    let mut work = store.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let y = f(&mut tape, &work)?;
    tape.backward(y, &mut work)?;

    let mut rng = match coverage {
        Coverage::Sampled { seed, .. } => Some(RngState::new(seed)),
        Coverage::All => None,
    };
    let ids: Vec<_> = work.iter().filter(|(_, _, t)| t.requires_grad()).map(|(id, _, _)| id).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        tensors: ids.len(),
    };
    for id in ids {
        let n = work.get(id).len();
        let analytic: Vec<f64> = match work.get(id).grad() {
            Some(g) => g.to_vec(),
            None => alloc::vec![0.0; n],
        };
        let coords: Vec<usize> = match (coverage, rng.as_mut()) {
            (Coverage::Sampled { per_tensor, .. }, Some(rng)) if n > per_tensor => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(per_tensor);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let fp = eval_params(&f, &work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let fm = eval_params(&f, &work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let err = relative_error(analytic[i], (fp - fm) / (2.0 * h));
            report.checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst_param = work.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn eval_params<F>(f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let y = f(&mut tape, store)?;
    tape.scalar(y)
}
