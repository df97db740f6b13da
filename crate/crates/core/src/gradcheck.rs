//! Central finite-difference verification of tape gradients.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], track: bool) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), track)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok((tape, vars, out))
}

/// Compare tape gradients of the scalar function `f` against central
/// differences with step `step`. When the inputs hold more than
/// `max_probes` coordinates, a seeded random subset is checked.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    tolerance: f64,
    max_probes: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = evaluate(&f, inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| alloc::vec![0.0; t.len()]))
        .collect();
    drop(tape);

    let total: usize = inputs.iter().map(|t| t.len()).sum();
    let mut coords: Vec<(usize, usize)> = Vec::new();
    if total <= max_probes {
        for (i, t) in inputs.iter().enumerate() {
            coords.extend((0..t.len()).map(|c| (i, c)));
        }
    } else {
        let mut r = rng::stream(seed);
        for _ in 0..max_probes {
            let mut flat = r.gen_range(0..total);
            let mut input = 0;
            while flat >= inputs[input].len() {
                flat -= inputs[input].len();
                input += 1;
            }
            coords.push((input, flat));
        }
    }

    let mut probes = Vec::with_capacity(coords.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (input, coord) in coords {
        let orig = work[input].data()[coord];
        work[input].data_mut()[coord] = orig + step;
        let (t, _, o) = evaluate(&f, &work, false)?;
        let up = t.value(o).item();
        work[input].data_mut()[coord] = orig - step;
        let (t, _, o) = evaluate(&f, &work, false)?;
        let down = t.value(o).item();
        work[input].data_mut()[coord] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[input][coord];
        probes.push(Probe {
            input,
            coord,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < tolerance,
        probes,
        max_rel_error,
        tolerance,
    })
}
