//! CTC loss via the forward-backward recursion on the blank-interleaved
//! label lattice, entirely in log space.

use super::collapse;
use crate::error::{Error, Result};
use crate::tensor::tape::log_add_exp;
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::BLANK_ID;

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Log alpha/beta tables over the `T x (2U+1)` lattice.
///
/// `log_alpha[t][s]` covers emissions `0..=t`; `log_beta[t][s]` covers the
/// continuation strictly after `t`, so `alpha + beta` summed over any
/// column reproduces the total log-likelihood.
#[derive(Debug, Clone)]
pub struct CtcLattice {
    pub log_alpha: Vec<f64>,
    pub log_beta: Vec<f64>,
    pub states: usize,
    pub frames: usize,
    pub log_likelihood: f64,
}

impl CtcLattice {
    pub fn alpha(&self, t: usize, s: usize) -> f64 {
        self.log_alpha[t * self.states + s]
    }

    pub fn beta(&self, t: usize, s: usize) -> f64 {
        self.log_beta[t * self.states + s]
    }

    /// Log-likelihood reconstructed by cutting the lattice at column `t`.
    pub fn cut(&self, t: usize) -> f64 {
        let mut acc = NEG_INF;
        for s in 0..self.states {
            acc = log_add_exp(acc, self.alpha(t, s) + self.beta(t, s));
        }
        acc
    }
}

#[derive(Debug, Clone)]
pub struct CtcLossResult {
    /// `-log p(y | x)`; infinite when the target cannot be aligned.
    pub loss: f64,
    /// Exact gradient w.r.t. the input log-probabilities, zero when
    /// unreachable.
    pub grad: Vec<f64>,
    /// Set when `T' < |y| + required separators`, distinguishing the
    /// infinite loss from numeric overflow.
    pub unreachable: bool,
}

fn validate(log_probs: &Tensor, target: &[usize]) -> Result<(usize, usize)> {
    let shape = log_probs.shape();
    if shape.len() != 2 {
        return Err(Error::invalid(format!(
            "ctc: log_probs must be [T,V], got {shape:?}"
        )));
    }
    let (t, v) = (shape[0], shape[1]);
    if t == 0 || v < 2 {
        return Err(Error::invalid("ctc: need T >= 1 and V >= 2"));
    }
    for &id in target {
        if id == BLANK_ID {
            return Err(Error::invalid("ctc: target contains blank"));
        }
        if id >= v {
            return Err(Error::invalid(format!("ctc: target id {id} >= vocab {v}")));
        }
    }
    Ok((t, v))
}

/// Blank-interleaved label string: `[blank, y1, blank, y2, ..., blank]`.
fn extended_labels(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK_ID);
    for &y in target {
        ext.push(y);
        ext.push(BLANK_ID);
    }
    ext
}

/// Builds the full alpha/beta lattice for a target.
pub fn ctc_lattice(log_probs: &Tensor, target: &[usize]) -> Result<CtcLattice> {
    let (t_len, v) = validate(log_probs, target)?;
    let ext = extended_labels(target);
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs.data()[t * v + k];

    let mut alpha = vec![NEG_INF; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = log_add_exp(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && ext[s] != BLANK_ID && ext[s] != ext[s - 2] {
                acc = log_add_exp(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if acc == NEG_INF {
                NEG_INF
            } else {
                acc + lp(t, ext[s])
            };
        }
    }

    let mut beta = vec![NEG_INF; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s] + lp(t + 1, ext[s]);
            if s + 1 < s_len {
                acc = log_add_exp(acc, beta[(t + 1) * s_len + s + 1] + lp(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && ext[s + 2] != BLANK_ID && ext[s + 2] != ext[s] {
                acc = log_add_exp(acc, beta[(t + 1) * s_len + s + 2] + lp(t + 1, ext[s + 2]));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let ll = {
        let last = (t_len - 1) * s_len;
        let mut acc = alpha[last + s_len - 1];
        if s_len > 1 {
            acc = log_add_exp(acc, alpha[last + s_len - 2]);
        }
        acc
    };

    Ok(CtcLattice {
        log_alpha: alpha,
        log_beta: beta,
        states: s_len,
        frames: t_len,
        log_likelihood: ll,
    })
}

/// Forward-backward CTC loss with its exact gradient.
///
/// Input rows must already be log-probabilities (log-softmax outputs).
/// Combined with the log-softmax backward, the gradient at the logits is
/// the classic softmax-minus-occupancy form.
pub fn ctc_loss(log_probs: &Tensor, target: &[usize]) -> Result<CtcLossResult> {
    let (t_len, v) = validate(log_probs, target)?;
    let lat = ctc_lattice(log_probs, target)?;
    if lat.log_likelihood == NEG_INF {
        return Ok(CtcLossResult {
            loss: f64::INFINITY,
            grad: vec![0.0; t_len * v],
            unreachable: true,
        });
    }
    let ext = extended_labels(target);
    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        for (s, &label) in ext.iter().enumerate() {
            let occ = lat.alpha(t, s) + lat.beta(t, s) - lat.log_likelihood;
            if occ > NEG_INF {
                grad[t * v + label] -= occ.exp();
            }
        }
    }
    Ok(CtcLossResult {
        loss: -lat.log_likelihood,
        grad,
        unreachable: false,
    })
}

/// Records a CTC loss node on the tape so gradients flow to the logits.
/// Returns the tape node and the raw result (check `unreachable` before
/// training on it).
pub fn ctc_loss_on_tape(tape: &Tape, log_probs: Var, target: &[usize]) -> Result<(Var, CtcLossResult)> {
    let t = Tensor::new(tape.shape(log_probs), tape.values(log_probs))
        .expect("tape node is consistent");
    let res = ctc_loss(&t, target)?;
    let node = tape.custom_scalar(log_probs, res.loss, res.grad.clone())?;
    Ok((node, res))
}

/// Enumerates every alignment `Z` and sums the ones collapsing to the
/// target: the definitional form of the loss. Refuses instances with more
/// than 10^7 paths.
pub fn ctc_loss_oracle(log_probs: &Tensor, target: &[usize]) -> Result<f64> {
    let (t_len, v) = validate(log_probs, target)?;
    let paths = (v as f64).powi(t_len as i32);
    if paths > 1e7 {
        return Err(Error::invalid(format!(
            "ctc oracle: {v}^{t_len} paths exceed the enumeration budget"
        )));
    }
    let lp = |t: usize, k: usize| log_probs.data()[t * v + k];
    let mut total = NEG_INF;
    let mut path = vec![0usize; t_len];
    loop {
        if collapse(&path) == target {
            let logp: f64 = (0..t_len).map(|t| lp(t, path[t])).sum();
            total = log_add_exp(total, logp);
        }
        // odometer increment over V^T
        let mut pos = 0;
        loop {
            if pos == t_len {
                return Ok(if total == NEG_INF {
                    f64::INFINITY
                } else {
                    -total
                });
            }
            path[pos] += 1;
            if path[pos] < v {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const A: usize = 1;

    /// Uniform log-probs over `v` symbols for `t` frames.
    fn uniform(t: usize, v: usize) -> Tensor {
        Tensor::new(vec![t, v], vec![(1.0 / v as f64).ln(); t * v]).unwrap()
    }

    pub(crate) fn random_log_probs(rng: &mut ChaCha8Rng, t: usize, v: usize) -> Tensor {
        let mut data = vec![0.0; t * v];
        for row in data.chunks_mut(v) {
            for x in row.iter_mut() {
                *x = rng.gen_range(-5.0..5.0);
            }
            let lse = crate::tensor::tape::log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        Tensor::new(vec![t, v], data).unwrap()
    }

    #[test]
    fn single_frame_uniform_single_alignment() {
        let res = ctc_loss(&uniform(1, 2), &[A]).unwrap();
        assert!((res.loss - 0.5f64.ln().abs()).abs() < 1e-12);
        assert!((res.loss - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn two_frames_uniform_three_alignments() {
        // alignments {aa, a_, _a} of 4 total
        let res = ctc_loss(&uniform(2, 2), &[A]).unwrap();
        assert!((res.loss - (-0.75f64.ln())).abs() < 1e-12);
        assert!((res.loss - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn empty_target_counts_only_blanks() {
        let res = ctc_loss(&uniform(2, 2), &[]).unwrap();
        assert!((res.loss - (-0.25f64.ln())).abs() < 1e-12);
        assert!((res.loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn unreachable_target_is_infinite_not_overflow() {
        // "aa" needs a separating blank: minimum 3 frames
        let res = ctc_loss(&uniform(2, 2), &[A, A]).unwrap();
        assert!(res.unreachable);
        assert!(res.loss.is_infinite() && res.loss > 0.0);
        assert!(res.grad.iter().all(|&g| g == 0.0));
        let oracle = ctc_loss_oracle(&uniform(2, 2), &[A, A]).unwrap();
        assert!(oracle.is_infinite());
    }

    #[test]
    fn oracle_agrees_on_random_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let t = rng.gen_range(1..=5);
            let v = rng.gen_range(2..=4);
            let u = rng.gen_range(0..=3.min(t));
            let target: Vec<usize> = (0..u).map(|_| rng.gen_range(1..v)).collect();
            let lp = random_log_probs(&mut rng, t, v);
            let fb = ctc_loss(&lp, &target).unwrap();
            let oracle = ctc_loss_oracle(&lp, &target).unwrap();
            if fb.loss.is_infinite() {
                assert!(oracle.is_infinite());
            } else {
                assert!(
                    (fb.loss - oracle).abs() < 1e-9,
                    "fb {} oracle {}",
                    fb.loss,
                    oracle
                );
            }
        }
    }

    #[test]
    fn alpha_beta_cut_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..50 {
            let t = rng.gen_range(2..=6);
            let lp = random_log_probs(&mut rng, t, 3);
            let target = vec![1, 2];
            let lat = ctc_lattice(&lp, &target).unwrap();
            if lat.log_likelihood == NEG_INF {
                continue;
            }
            for cut_t in 0..t {
                assert!(
                    (lat.cut(cut_t) - lat.log_likelihood).abs() < 1e-9,
                    "cut at {cut_t}: {} vs {}",
                    lat.cut(cut_t),
                    lat.log_likelihood
                );
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let t = rng.gen_range(2..=4);
            let v = 3;
            let target = vec![1];
            let lp = random_log_probs(&mut rng, t, v);
            let res = ctc_loss(&lp, &target).unwrap();
            let fd = crate::tensor::gradcheck::finite_difference(
                |x| {
                    let t = Tensor::new(vec![t, v], x.to_vec()).unwrap();
                    ctc_loss(&t, &target).unwrap().loss
                },
                lp.data(),
                1e-5,
            );
            assert!(
                crate::tensor::gradcheck::grads_match(&res.grad, &fd, 1e-4),
                "{:?} vs {:?}",
                res.grad,
                fd
            );
        }
    }

    #[test]
    fn no_nan_for_extreme_logits() {
        // rows log-softmaxed from logits at the +-30 extremes
        let mut data = vec![0.0; 4 * 3];
        for (i, row) in data.chunks_mut(3).enumerate() {
            row[0] = if i % 2 == 0 { 30.0 } else { -30.0 };
            row[1] = -30.0;
            row[2] = 30.0;
            let lse = crate::tensor::tape::log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let lp = Tensor::new(vec![4, 3], data).unwrap();
        let res = ctc_loss(&lp, &[1, 2]).unwrap();
        assert!(!res.loss.is_nan());
        assert!(res.grad.iter().all(|g| !g.is_nan()));
    }

    #[test]
    fn target_with_blank_rejected() {
        assert!(ctc_loss(&uniform(2, 3), &[BLANK_ID]).is_err());
    }

    #[test]
    fn oracle_refuses_oversized_instances() {
        assert!(ctc_loss_oracle(&uniform(30, 4), &[1]).is_err());
    }
}
