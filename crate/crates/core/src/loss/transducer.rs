//! Transducer (RNN-T) loss on the `(T'+1) x (U+1)` lattice: blanks advance
//! time, labels advance the target, and every path ends with a blank
//! emitted from the last frame at `u = U`.

use crate::error::{Error, Result};
use crate::tensor::tape::log_add_exp;
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::BLANK_ID;

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Log alpha/beta over lattice cells `(t, u)`.
///
/// `alpha(t,u)` sums paths arriving at the cell (emissions before it);
/// `beta(t,u)` sums completions from the cell (its own emission onward).
/// [`TransducerLattice::cut_with`] recombines them into the total
/// log-likelihood at any frame.
#[derive(Debug, Clone)]
pub struct TransducerLattice {
    pub log_alpha: Vec<f64>,
    pub log_beta: Vec<f64>,
    pub frames: usize,
    pub target_len: usize,
    pub log_likelihood: f64,
}

impl TransducerLattice {
    fn idx(&self, t: usize, u: usize) -> usize {
        t * (self.target_len + 1) + u
    }

    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.log_alpha[self.idx(t, u)]
    }

    pub fn beta(&self, t: usize, u: usize) -> f64 {
        self.log_beta[self.idx(t, u)]
    }

    /// Log-likelihood reconstructed by cutting along the blank edges of
    /// frame `t`.
    ///
    /// A path touches several cells within a frame (one per label emitted
    /// there) but takes exactly one blank out of it, so summing
    /// `alpha + blank emission + continuation` over `u` counts each path
    /// once. Requires the blank log-probs, so it is provided by the loss
    /// functions below rather than stored here.
    pub fn cut_with(&self, t: usize, blank_lp: impl Fn(usize) -> f64) -> f64 {
        let mut acc = NEG_INF;
        for u in 0..=self.target_len {
            let cont = if t + 1 < self.frames {
                self.beta(t + 1, u)
            } else if u == self.target_len {
                0.0
            } else {
                NEG_INF
            };
            if cont > NEG_INF {
                acc = log_add_exp(acc, self.alpha(t, u) + blank_lp(u) + cont);
            }
        }
        acc
    }
}

#[derive(Debug, Clone)]
pub struct TransducerLossResult {
    pub loss: f64,
    /// Gradient w.r.t. the `[(T'*(U+1)), V]` joint log-probabilities,
    /// rows indexed `t*(U+1)+u`.
    pub grad: Vec<f64>,
}

fn validate(log_probs: &Tensor, target: &[usize], frames: usize) -> Result<usize> {
    let shape = log_probs.shape();
    let u = target.len();
    if shape.len() != 2 || shape[0] != frames * (u + 1) {
        return Err(Error::invalid(format!(
            "transducer: log_probs must be [{}x{}, V], got {shape:?}",
            frames,
            u + 1
        )));
    }
    let v = shape[1];
    if frames == 0 || v < 2 {
        return Err(Error::invalid("transducer: need T' >= 1 and V >= 2"));
    }
    for &id in target {
        if id == BLANK_ID {
            return Err(Error::invalid("transducer: target contains blank"));
        }
        if id >= v {
            return Err(Error::invalid(format!(
                "transducer: target id {id} >= vocab {v}"
            )));
        }
    }
    Ok(v)
}

/// Builds the alpha/beta tables for a target.
pub fn transducer_lattice(
    log_probs: &Tensor,
    target: &[usize],
    frames: usize,
) -> Result<TransducerLattice> {
    let v = validate(log_probs, target, frames)?;
    let u_len = target.len();
    let cols = u_len + 1;
    let lp = |t: usize, u: usize, k: usize| log_probs.data()[(t * cols + u) * v + k];

    let mut alpha = vec![NEG_INF; frames * cols];
    alpha[0] = 0.0;
    for t in 0..frames {
        for u in 0..cols {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = NEG_INF;
            if t > 0 {
                acc = log_add_exp(acc, alpha[(t - 1) * cols + u] + lp(t - 1, u, BLANK_ID));
            }
            if u > 0 {
                acc = log_add_exp(acc, alpha[t * cols + u - 1] + lp(t, u - 1, target[u - 1]));
            }
            alpha[t * cols + u] = acc;
        }
    }

    let mut beta = vec![NEG_INF; frames * cols];
    for t in (0..frames).rev() {
        for u in (0..cols).rev() {
            // blank: consumes frame t; completes from the last frame only at u = U
            let blank_cont = if t + 1 < frames {
                beta[(t + 1) * cols + u]
            } else if u == u_len {
                0.0
            } else {
                NEG_INF
            };
            let mut acc = if blank_cont == NEG_INF {
                NEG_INF
            } else {
                lp(t, u, BLANK_ID) + blank_cont
            };
            if u < u_len {
                acc = log_add_exp(acc, lp(t, u, target[u]) + beta[t * cols + u + 1]);
            }
            beta[t * cols + u] = acc;
        }
    }

    let ll = alpha[(frames - 1) * cols + u_len] + lp(frames - 1, u_len, BLANK_ID);

    Ok(TransducerLattice {
        log_alpha: alpha,
        log_beta: beta,
        frames,
        target_len: u_len,
        log_likelihood: ll,
    })
}

/// Forward-backward transducer loss with its exact gradient.
pub fn transducer_loss(
    log_probs: &Tensor,
    target: &[usize],
    frames: usize,
) -> Result<TransducerLossResult> {
    let v = validate(log_probs, target, frames)?;
    let lat = transducer_lattice(log_probs, target, frames)?;
    let u_len = target.len();
    let cols = u_len + 1;
    let ll = lat.log_likelihood;
    let mut grad = vec![0.0; frames * cols * v];
    if ll == NEG_INF {
        return Ok(TransducerLossResult {
            loss: f64::INFINITY,
            grad,
        });
    }
    let lp = |t: usize, u: usize, k: usize| log_probs.data()[(t * cols + u) * v + k];
    for t in 0..frames {
        for u in 0..cols {
            let a = lat.alpha(t, u);
            if a == NEG_INF {
                continue;
            }
            let blank_cont = if t + 1 < frames {
                lat.beta(t + 1, u)
            } else if u == u_len {
                0.0
            } else {
                NEG_INF
            };
            if blank_cont > NEG_INF {
                let occ = a + lp(t, u, BLANK_ID) + blank_cont - ll;
                grad[(t * cols + u) * v + BLANK_ID] -= occ.exp();
            }
            if u < u_len {
                let cont = lat.beta(t, u + 1);
                if cont > NEG_INF {
                    let occ = a + lp(t, u, target[u]) + cont - ll;
                    grad[(t * cols + u) * v + target[u]] -= occ.exp();
                }
            }
        }
    }
    Ok(TransducerLossResult { loss: -ll, grad })
}

/// Records a transducer loss node on the tape.
pub fn transducer_loss_on_tape(
    tape: &Tape,
    log_probs: Var,
    target: &[usize],
    frames: usize,
) -> Result<(Var, TransducerLossResult)> {
    let t = Tensor::new(tape.shape(log_probs), tape.values(log_probs))
        .expect("tape node is consistent");
    let res = transducer_loss(&t, target, frames)?;
    let node = tape.custom_scalar(log_probs, res.loss, res.grad.clone())?;
    Ok((node, res))
}

/// Sums over every monotone lattice path emitting the target, by direct
/// DFS over move sequences. Refuses instances beyond ~10^6 paths.
pub fn transducer_loss_oracle(
    log_probs: &Tensor,
    target: &[usize],
    frames: usize,
) -> Result<f64> {
    let v = validate(log_probs, target, frames)?;
    let u_len = target.len();
    let paths = binomial(frames + u_len, u_len);
    if paths > 1e6 {
        return Err(Error::invalid(format!(
            "transducer oracle: ~{paths:.0} paths exceed the enumeration budget"
        )));
    }
    let cols = u_len + 1;
    let lp = |t: usize, u: usize, k: usize| log_probs.data()[(t * cols + u) * v + k];

    fn dfs(
        t: usize,
        u: usize,
        acc: f64,
        frames: usize,
        target: &[usize],
        lp: &dyn Fn(usize, usize, usize) -> f64,
        total: &mut f64,
    ) {
        if u < target.len() {
            dfs(
                t,
                u + 1,
                acc + lp(t, u, target[u]),
                frames,
                target,
                lp,
                total,
            );
        }
        if t + 1 < frames {
            dfs(t + 1, u, acc + lp(t, u, BLANK_ID), frames, target, lp, total);
        } else if u == target.len() {
            *total = log_add_exp(*total, acc + lp(t, u, BLANK_ID));
        }
    }

    let mut total = NEG_INF;
    dfs(0, 0, 0.0, frames, target, &lp, &mut total);
    Ok(if total == NEG_INF {
        f64::INFINITY
    } else {
        -total
    })
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const A: usize = 1;

    fn uniform(frames: usize, u: usize, v: usize) -> Tensor {
        let rows = frames * (u + 1);
        Tensor::new(vec![rows, v], vec![(1.0 / v as f64).ln(); rows * v]).unwrap()
    }

    fn random_log_probs(rng: &mut ChaCha8Rng, frames: usize, u: usize, v: usize) -> Tensor {
        let rows = frames * (u + 1);
        let mut data = vec![0.0; rows * v];
        for row in data.chunks_mut(v) {
            for x in row.iter_mut() {
                *x = rng.gen_range(-5.0..5.0);
            }
            let lse = crate::tensor::tape::log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        Tensor::new(vec![rows, v], data).unwrap()
    }

    #[test]
    fn single_frame_empty_target_is_one_blank() {
        let res = transducer_loss(&uniform(1, 0, 2), &[], 1).unwrap();
        assert!((res.loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_one_label_uniform_has_two_orders() {
        // label at frame 0 or frame 1, three emissions each at p = 0.5
        let res = transducer_loss(&uniform(2, 1, 2), &[A], 2).unwrap();
        assert!((res.loss - (-0.25f64.ln())).abs() < 1e-12);
        assert!((res.loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn empty_target_forced_blank_path() {
        for frames in 1..=5 {
            let res = transducer_loss(&uniform(frames, 0, 2), &[], frames).unwrap();
            assert!((res.loss - frames as f64 * 2.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_agrees_on_random_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let frames = rng.gen_range(1..=4);
            let u = rng.gen_range(0..=3);
            let v = rng.gen_range(2..=3);
            let target: Vec<usize> = (0..u).map(|_| rng.gen_range(1..v)).collect();
            let lp = random_log_probs(&mut rng, frames, u, v);
            let fb = transducer_loss(&lp, &target, frames).unwrap();
            let oracle = transducer_loss_oracle(&lp, &target, frames).unwrap();
            assert!(
                (fb.loss - oracle).abs() < 1e-9,
                "fb {} oracle {}",
                fb.loss,
                oracle
            );
        }
    }

    #[test]
    fn alpha_beta_cut_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..50 {
            let frames = rng.gen_range(1..=4);
            let u = rng.gen_range(0..=3);
            let target: Vec<usize> = (0..u).map(|_| rng.gen_range(1..3)).collect();
            let lp = random_log_probs(&mut rng, frames, u, 3);
            let lat = transducer_lattice(&lp, &target, frames).unwrap();
            let cols = u + 1;
            for t in 0..frames {
                let cut =
                    lat.cut_with(t, |uu| lp.data()[(t * cols + uu) * 3 + BLANK_ID]);
                assert!(
                    (cut - lat.log_likelihood).abs() < 1e-9,
                    "cut at {t}: {cut} vs {}",
                    lat.log_likelihood
                );
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let frames = rng.gen_range(1..=3);
            let u = rng.gen_range(0..=2);
            let target: Vec<usize> = (0..u).map(|_| rng.gen_range(1..3)).collect();
            let lp = random_log_probs(&mut rng, frames, u, 3);
            let res = transducer_loss(&lp, &target, frames).unwrap();
            let rows = frames * (u + 1);
            let fd = crate::tensor::gradcheck::finite_difference(
                |x| {
                    let t = Tensor::new(vec![rows, 3], x.to_vec()).unwrap();
                    transducer_loss(&t, &target, frames).unwrap().loss
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
    fn blank_in_target_rejected() {
        assert!(transducer_loss(&uniform(2, 1, 2), &[BLANK_ID], 2).is_err());
    }

    #[test]
    fn oracle_refuses_oversized_instances() {
        let target = vec![A; 15];
        assert!(transducer_loss_oracle(&uniform(20, 15, 2), &target, 20).is_err());
    }
}
