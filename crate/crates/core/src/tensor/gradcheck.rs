//! Central finite-difference oracle for gradients.
//!
//! The oracle only ever calls the forward pass, so it stays independent of
//! the backward implementation it is used to check.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Tape, Var};

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Default relative tolerance for autodiff-vs-FD comparisons.
pub const FD_REL_TOL: f64 = 1e-4;
/// Below this magnitude on both sides, a coordinate counts as matching:
/// central differences bottom out in roundoff there.
pub const FD_ZERO_FLOOR: f64 = 1e-7;
/// Absolute differences below this are inside the oracle's own error
/// (truncation plus roundoff at `FD_STEP`), so they never count as a
/// mismatch regardless of relative size.
pub const FD_ABS_FLOOR: f64 = 1e-9;

/// d f / d x[i] by central differences, one scalar function of a flat input.
pub fn finite_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = f(&probe);
        probe[i] = orig - step;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Relative error per the crate-wide convention `|ad-fd| / (|fd| + 1e-8)`.
pub fn rel_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (fd.abs() + 1e-8)
}

/// True when every coordinate matches within `rel_tol`, treating
/// coordinates tiny on both sides as matched.
pub fn grads_match(ad: &[f64], fd: &[f64], rel_tol: f64) -> bool {
    worst_mismatch(ad, fd, rel_tol).is_none()
}

/// Index and relative error of the worst offending coordinate, if any.
pub fn worst_mismatch(ad: &[f64], fd: &[f64], rel_tol: f64) -> Option<(usize, f64)> {
    assert_eq!(ad.len(), fd.len());
    let mut worst: Option<(usize, f64)> = None;
    for i in 0..ad.len() {
        if ad[i].abs() < FD_ZERO_FLOOR && fd[i].abs() < FD_ZERO_FLOOR {
            continue;
        }
        if (ad[i] - fd[i]).abs() < FD_ABS_FLOOR {
            continue;
        }
        let e = rel_error(ad[i], fd[i]);
        if e >= rel_tol && worst.map_or(true, |(_, w)| e > w) {
            worst = Some((i, e));
        }
    }
    worst
}

/// Checks a tape-built scalar function's gradients against central
/// differences for each listed input. `build` must construct the loss from
/// scratch on the given tape — it is called once for autodiff and `2·n`
/// times for the oracle.
pub fn check_tape_gradients<F>(
    build: F,
    shapes: &[Vec<usize>],
    inputs: &[Vec<f64>],
    rel_tol: f64,
) -> Result<(), String>
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    check_tape_gradients_sampled(build, shapes, inputs, rel_tol, None, &mut rand::thread_rng())
}

/// As [`check_tape_gradients`], but when `max_coords` is set, only a random
/// subset of coordinates per input is probed (for large parameter sets).
pub fn check_tape_gradients_sampled<F, R>(
    build: F,
    shapes: &[Vec<usize>],
    inputs: &[Vec<f64>],
    rel_tol: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<(), String>
where
    F: Fn(&Tape, &[Var]) -> Var,
    R: Rng,
{
    assert_eq!(shapes.len(), inputs.len());
    let run = |values: &[Vec<f64>]| -> (f64, Vec<Option<Vec<f64>>>) {
        let tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(values)
            .map(|(s, v)| tape.leaf_from(s.clone(), v.clone(), true).expect("leaf"))
            .collect();
        let loss = build(&tape, &vars);
        let map = tape.backward(loss).expect("backward");
        let grads = vars
            .iter()
            .map(|v| map.get(*v).map(|t| t.data().to_vec()))
            .collect();
        (tape.value_scalar(loss), grads)
    };

    let (_, ad_grads) = run(inputs);

    for (which, input) in inputs.iter().enumerate() {
        let ad = ad_grads[which]
            .clone()
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let coords: Vec<usize> = match max_coords {
            Some(m) if input.len() > m => {
                let mut idx: Vec<usize> = (0..input.len()).collect();
                idx.shuffle(rng);
                idx.truncate(m);
                idx
            }
            _ => (0..input.len()).collect(),
        };
        for &i in &coords {
            let mut probe: Vec<Vec<f64>> = inputs.to_vec();
            probe[which][i] += FD_STEP;
            let (fp, _) = run_forward_only(&probe, shapes, &build);
            probe[which][i] -= 2.0 * FD_STEP;
            let (fm, _) = run_forward_only(&probe, shapes, &build);
            let fd = (fp - fm) / (2.0 * FD_STEP);
            if ad[i].abs() < FD_ZERO_FLOOR && fd.abs() < FD_ZERO_FLOOR {
                continue;
            }
            if (ad[i] - fd).abs() < FD_ABS_FLOOR {
                continue;
            }
            let e = rel_error(ad[i], fd);
            if e >= rel_tol {
                return Err(format!(
                    "input {which} coord {i}: ad {} vs fd {} (rel err {e:.3e})",
                    ad[i], fd
                ));
            }
        }
    }
    Ok(())
}

fn run_forward_only<F>(values: &[Vec<f64>], shapes: &[Vec<usize>], build: &F) -> (f64, ())
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let tape = Tape::new();
    let vars: Vec<Var> = shapes
        .iter()
        .zip(values)
        .map(|(s, v)| tape.leaf_from(s.clone(), v.clone(), false).expect("leaf"))
        .collect();
    let loss = build(&tape, &vars);
    (tape.value_scalar(loss), ())
}
