//! Optimization pieces: Adam with bias correction, the warmup/inverse-sqrt
//! learning-rate schedule, parameter EMA, and variational noise views.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Overlay, ParamStore};

/// `lr(k) = peak * min(k/warmup, sqrt(warmup/k))`, `k >= 1`.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize) -> f64 {
    let k = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (k / w).min((w / k).sqrt())
}

/// Adam over the trainable entries of a store. Moment buffers are indexed
/// by `ParamId`, allocated lazily on the first gradient.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Option<Vec<f64>>>,
    pub v: Vec<Option<Vec<f64>>>,
    /// Update count for bias correction (skipped steps excluded).
    pub t: usize,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            t: 0,
        }
    }

    /// Applies one update; `grads` is indexed by `ParamId` with `None`
    /// for parameters without gradients this step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads[id.0].as_ref() else {
                continue;
            };
            if !store.entry(id).trainable {
                continue;
            }
            let n = g.len();
            let m = self.m[id.0].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[id.0].get_or_insert_with(|| vec![0.0; n]);
            let theta = store.tensor_mut(id).data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                theta[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales gradients in place when their global L2 norm exceeds `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g {
                *v *= scale;
            }
        }
    }
    norm
}

/// Shadow weights start as a copy of the trainable parameters.
pub fn ema_init(store: &ParamStore) -> Overlay {
    store
        .iter()
        .map(|(_, e)| e.trainable.then(|| e.tensor.data().to_vec()))
        .collect()
}

/// `shadow = gamma * shadow + (1 - gamma) * theta`, elementwise, after
/// each step.
pub fn ema_update(shadow: &mut Overlay, store: &ParamStore, gamma: f64) -> Result<()> {
    if !(0.0 < gamma && gamma < 1.0) {
        return Err(Error::Config(format!("ema: decay {gamma} outside (0,1)")));
    }
    for (id, entry) in store.iter() {
        if let Some(s) = shadow[id.0].as_mut() {
            for (sv, tv) in s.iter_mut().zip(entry.tensor.data()) {
                *sv = gamma * *sv + (1.0 - gamma) * tv;
            }
        }
    }
    Ok(())
}

/// Noised view of the variational-noise-scoped parameters (embeddings and
/// LSTMs): `theta + n, n ~ Normal(0, sigma^2)`, drawn fresh per call.
/// Gradients keep flowing to the underlying parameters because the view
/// only changes leaf values, not the graph.
pub fn vn_overlay(store: &ParamStore, sigma: f64, rng: &mut impl Rng) -> Result<Overlay> {
    if sigma < 0.0 {
        return Err(Error::Config(format!("vn: negative sigma {sigma}")));
    }
    if sigma == 0.0 {
        // exact identity view
        return Ok(store
            .iter()
            .map(|(_, e)| (e.trainable && e.vn).then(|| e.tensor.data().to_vec()))
            .collect());
    }
    let dist = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(store
        .iter()
        .map(|(_, e)| {
            (e.trainable && e.vn).then(|| {
                e.tensor
                    .data()
                    .iter()
                    .map(|v| v + dist.sample(rng))
                    .collect()
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with_param(values: Vec<f64>, vn: bool) -> crate::model::ParamStore {
        let mut s = crate::model::ParamStore::new();
        let n = values.len();
        s.register(
            "p".into(),
            Tensor::new(vec![n], values).unwrap(),
            true,
            vn,
        );
        s
    }

    #[test]
    fn schedule_peaks_at_warmup_and_halves_at_4x() {
        let peak = 3e-3;
        let w = 100;
        assert!((lr_schedule(w, peak, w) - peak).abs() < 1e-15);
        for k in 1..w {
            assert!(lr_schedule(k, peak, w) < lr_schedule(k + 1, peak, w));
        }
        assert!((lr_schedule(4 * w, peak, w) - peak / 2.0).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        // with bias correction, step 1 moves by lr * g/(|g| + ~eps)
        let mut store = store_with_param(vec![1.0, -2.0], false);
        let mut adam = Adam::new(&store);
        let grads = vec![Some(vec![0.5, -0.25])];
        adam.step(&mut store, &grads, 0.1);
        let p = store.tensor(crate::model::ParamId(0)).data().to_vec();
        assert!((p[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p[1] - (-2.0 + 0.1)).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut store = store_with_param(vec![3.0, -1.5], false);
        let mut adam = Adam::new(&store);
        let grads = vec![Some(vec![0.0, 0.0])];
        adam.step(&mut store, &grads, 0.1);
        assert_eq!(
            store.tensor(crate::model::ParamId(0)).data(),
            &[3.0, -1.5]
        );
        assert_eq!(adam.m[0].as_ref().unwrap().len(), 2);
    }

    #[test]
    fn adam_reaches_the_quadratic_optimum() {
        // f(theta) = sum (theta - c)^2; driven with an exponentially
        // decaying lr so the final oscillation sits below 1e-6
        let target = [0.3, -1.2, 2.5];
        let mut store = store_with_param(vec![0.0, 0.0, 0.0], false);
        let mut adam = Adam::new(&store);
        let id = crate::model::ParamId(0);
        for k in 0..5000 {
            let theta = store.tensor(id).data().to_vec();
            let g: Vec<f64> = theta.iter().zip(&target).map(|(t, c)| 2.0 * (t - c)).collect();
            let lr = 0.5 * 0.995f64.powi(k);
            adam.step(&mut store, &[Some(g)], lr);
        }
        for (t, c) in store.tensor(id).data().iter().zip(&target) {
            assert!((t - c).abs() < 1e-6, "{t} vs {c}");
        }
    }

    #[test]
    fn ema_direct_substitution_and_geometric_convergence() {
        // theta' = 0, theta = 1, gamma = 0.9 -> 0.1
        let store = store_with_param(vec![1.0], false);
        let mut shadow: Overlay = vec![Some(vec![0.0])];
        ema_update(&mut shadow, &store, 0.9).unwrap();
        assert!((shadow[0].as_ref().unwrap()[0] - 0.1).abs() < 1e-15);

        // constant theta: |theta'_k - theta| = gamma^k |theta'_0 - theta|
        let mut shadow: Overlay = vec![Some(vec![0.0])];
        let gamma = 0.9;
        for k in 1..=40 {
            ema_update(&mut shadow, &store, gamma).unwrap();
            let want = gamma.powi(k);
            let got = (shadow[0].as_ref().unwrap()[0] - 1.0).abs();
            assert!((got - want).abs() < 1e-12, "k={k}: {got} vs {want}");
        }
    }

    #[test]
    fn ema_rejects_decay_outside_unit_interval() {
        let store = store_with_param(vec![1.0], false);
        let mut shadow = ema_init(&store);
        assert!(ema_update(&mut shadow, &store, 1.0).is_err());
        assert!(ema_update(&mut shadow, &store, 0.0).is_err());
    }

    #[test]
    fn vn_sigma_zero_is_identity_and_scope_respected() {
        let mut s = crate::model::ParamStore::new();
        s.register("emb".into(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true, true);
        s.register("lin".into(), Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), true, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let overlay = vn_overlay(&s, 0.0, &mut rng).unwrap();
        assert_eq!(overlay[0].as_ref().unwrap(), &vec![1.0, 2.0]);
        assert!(overlay[1].is_none(), "out-of-scope params are never noised");

        let overlay = vn_overlay(&s, 0.075, &mut rng).unwrap();
        assert!(overlay[0].as_ref().unwrap() != &vec![1.0, 2.0]);
        assert!(overlay[1].is_none());
    }

    #[test]
    fn vn_empirical_std_matches_sigma_within_one_percent() {
        let n = 100_000;
        let mut s = crate::model::ParamStore::new();
        s.register("emb".into(), Tensor::zeros(vec![n]), true, true);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let overlay = vn_overlay(&s, 0.075, &mut rng).unwrap();
        let noise = overlay[0].as_ref().unwrap();
        let mean = noise.iter().sum::<f64>() / n as f64;
        let var = noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        assert!((std - 0.075).abs() / 0.075 < 0.01, "std {std}");
    }

    #[test]
    fn clip_rescales_only_above_the_threshold() {
        let mut grads = vec![Some(vec![3.0, 4.0])]; // norm 5
        let norm = clip_global_norm(&mut grads, 10.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert_eq!(grads[0].as_ref().unwrap(), &vec![3.0, 4.0]);
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let g = grads[0].as_ref().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}
