//! Trainable building blocks: linear, embedding, LSTM cell, layer norm,
//! and batch norm with running statistics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tensor, Var};

use super::{BnUpdate, ForwardCtx, ParamId, ParamStore};

/// Batch-norm running statistics momentum.
pub const BN_MOMENTUM: f64 = 0.99;
pub const NORM_EPS: f64 = 1e-5;

/// Xavier-uniform initialization.
pub fn xavier(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape, data).expect("xavier shape")
}

pub struct Linear {
    pub(crate) w: ParamId,
    pub(crate) b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.register(
            format!("{name}.w"),
            xavier(rng, vec![in_dim, out_dim], in_dim, out_dim),
            true,
            false,
        );
        let b = bias.then(|| {
            store.register(
                format!("{name}.b"),
                Tensor::zeros(vec![out_dim]),
                true,
                false,
            )
        });
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ctx: &ForwardCtx, x: Var) -> Result<Var> {
        let y = ctx.tape.matmul(x, ctx.var(self.w))?;
        match self.b {
            Some(b) => ctx.tape.add_bias(y, ctx.var(b)),
            None => Ok(y),
        }
    }
}

pub struct Embedding {
    table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Self {
        let data = (0..vocab * dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let table = store.register(
            format!("{name}.table"),
            Tensor::new(vec![vocab, dim], data).expect("embedding shape"),
            true,
            true, // variational-noise scope
        );
        Embedding { table, dim }
    }

    pub fn forward(&self, ctx: &ForwardCtx, ids: &[usize]) -> Result<Var> {
        ctx.tape.embedding(ctx.var(self.table), ids)
    }
}

pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.register(
            format!("{name}.gamma"),
            Tensor::new(vec![dim], vec![1.0; dim]).expect("ln gamma"),
            true,
            false,
        );
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(vec![dim]), true, false);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, ctx: &ForwardCtx, x: Var) -> Result<Var> {
        ctx.tape
            .layer_norm(x, ctx.var(self.gamma), ctx.var(self.beta), NORM_EPS)
    }
}

/// Batch norm over time frames with running statistics buffers; training
/// normalizes with batch stats and queues a running-stat update, eval uses
/// the frozen buffers.
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.register(
            format!("{name}.gamma"),
            Tensor::new(vec![dim], vec![1.0; dim]).expect("bn gamma"),
            true,
            false,
        );
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(vec![dim]), true, false);
        let running_mean = store.register(
            format!("{name}.running_mean"),
            Tensor::zeros(vec![dim]),
            false,
            false,
        );
        let running_var = store.register(
            format!("{name}.running_var"),
            Tensor::new(vec![dim], vec![1.0; dim]).expect("bn var"),
            false,
            false,
        );
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward(&self, ctx: &ForwardCtx, x: Var) -> Result<Var> {
        if ctx.train {
            let (y, mean, var) =
                ctx.tape
                    .batch_norm_train(x, ctx.var(self.gamma), ctx.var(self.beta), NORM_EPS)?;
            ctx.record_bn(BnUpdate {
                mean_id: self.running_mean,
                var_id: self.running_var,
                mean,
                var,
                momentum: BN_MOMENTUM,
            });
            Ok(y)
        } else {
            let mean = ctx.buffer(self.running_mean);
            let var = ctx.buffer(self.running_var);
            ctx.tape.batch_norm_eval(
                x,
                ctx.var(self.gamma),
                ctx.var(self.beta),
                NORM_EPS,
                &mean,
                &var,
            )
        }
    }
}

/// Single LSTM cell; weights sit in the variational-noise scope.
pub struct LstmCell {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let w = store.register(
            format!("{name}.w"),
            xavier(
                rng,
                vec![in_dim + hidden, 4 * hidden],
                in_dim + hidden,
                4 * hidden,
            ),
            true,
            true,
        );
        // forget-gate bias starts at 1
        let mut bias = vec![0.0; 4 * hidden];
        for v in bias.iter_mut().skip(hidden).take(hidden) {
            *v = 1.0;
        }
        let b = store.register(
            format!("{name}.b"),
            Tensor::new(vec![4 * hidden], bias).expect("lstm bias"),
            true,
            true,
        );
        LstmCell {
            w,
            b,
            in_dim,
            hidden,
        }
    }

    pub fn zero_state(&self, ctx: &ForwardCtx) -> (Var, Var) {
        let h = ctx
            .tape
            .leaf_from(vec![1, self.hidden], vec![0.0; self.hidden], false)
            .expect("zero state");
        let c = ctx
            .tape
            .leaf_from(vec![1, self.hidden], vec![0.0; self.hidden], false)
            .expect("zero state");
        (h, c)
    }

    /// One step: gate order `i f g o`.
    pub fn step(&self, ctx: &ForwardCtx, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let t = ctx.tape;
        let z = t.concat_cols(x, h)?;
        let gates = t.add_bias(t.matmul(z, ctx.var(self.w))?, ctx.var(self.b))?;
        let hd = self.hidden;
        let i = t.sigmoid(t.slice_cols(gates, 0, hd)?);
        let f = t.sigmoid(t.slice_cols(gates, hd, 2 * hd)?);
        let g = t.tanh(t.slice_cols(gates, 2 * hd, 3 * hd)?);
        let o = t.sigmoid(t.slice_cols(gates, 3 * hd, 4 * hd)?);
        let c_next = t.add(t.mul(f, c)?, t.mul(i, g)?)?;
        let h_next = t.mul(o, t.tanh(c_next))?;
        Ok((h_next, c_next))
    }

    /// Runs the whole sequence from a zero state, returning `[T, hidden]`.
    pub fn forward_seq(&self, ctx: &ForwardCtx, xs: Var) -> Result<Var> {
        let t_len = ctx.tape.shape(xs)[0];
        let (mut h, mut c) = self.zero_state(ctx);
        let mut rows = Vec::with_capacity(t_len);
        for ti in 0..t_len {
            let x = ctx.tape.slice_rows(xs, ti, ti + 1)?;
            let (h2, c2) = self.step(ctx, x, h, c)?;
            h = h2;
            c = c2;
            rows.push(h);
        }
        ctx.tape.concat_rows(&rows)
    }
}
