//! Decoder heads: the CTC projection, the transducer prediction + joint
//! networks, and the attention (Attend/Spell) decoder.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Var;
use crate::vocab::{BLANK_ID, SOS_ID};

use super::layers::{Embedding, Linear, LstmCell};
use super::{EncodedSequence, ForwardCtx, ModelConfig, ParamStore};

/// One affine transformation to vocabulary logits, log-softmaxed per frame.
pub struct CtcHead {
    proj: Linear,
}

impl CtcHead {
    pub fn vocab_size(&self) -> usize {
        self.proj.out_dim
    }
}

impl CtcHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        CtcHead {
            proj: Linear::new(store, rng, &format!("{name}.proj"), cfg.d_model, cfg.vocab_size, true),
        }
    }

    /// `[T', V]` log-probabilities; `exp` of each row sums to one.
    pub fn log_probs(&self, ctx: &ForwardCtx, enc: Var) -> Result<Var> {
        ctx.tape.log_softmax(self.proj.forward(ctx, enc)?)
    }
}

/// Prediction-network state after consuming a label prefix. The state is
/// cached per hypothesis so lattice cells and beam expansions sharing a
/// prefix never recompute it.
#[derive(Debug, Clone, Copy)]
pub struct PredState {
    pub h: Var,
    pub c: Var,
    /// Joint-space projection of `h`, cached for the joint network.
    pub proj: Var,
}

/// Prediction network (embedding + one LSTM) and joint network
/// `tanh(Linear(enc) + Linear(pred)) -> Linear(V)`.
pub struct TransducerHead {
    embed: Embedding,
    lstm: LstmCell,
    enc_proj: Linear,
    pred_proj: Linear,
    out: Linear,
}

impl TransducerHead {
    pub fn vocab_size(&self) -> usize {
        self.out.out_dim
    }
}

impl TransducerHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        TransducerHead {
            embed: Embedding::new(store, rng, &format!("{name}.embed"), cfg.vocab_size, cfg.embed_dim),
            lstm: LstmCell::new(store, rng, &format!("{name}.lstm"), cfg.embed_dim, cfg.dec_hidden),
            enc_proj: Linear::new(store, rng, &format!("{name}.enc_proj"), cfg.d_model, cfg.joint_dim, true),
            pred_proj: Linear::new(
                store,
                rng,
                &format!("{name}.pred_proj"),
                cfg.dec_hidden,
                cfg.joint_dim,
                false,
            ),
            out: Linear::new(store, rng, &format!("{name}.out"), cfg.joint_dim, cfg.vocab_size, true),
        }
    }

    /// State after consuming only SOS (the empty prefix).
    pub fn start_state(&self, ctx: &ForwardCtx) -> Result<PredState> {
        let (h, c) = self.lstm.zero_state(ctx);
        self.advance_from(ctx, h, c, SOS_ID)
    }

    /// Feeds one label; the blank never enters the prediction network.
    pub fn advance(&self, ctx: &ForwardCtx, state: &PredState, token: usize) -> Result<PredState> {
        if token == BLANK_ID {
            return Err(Error::invalid("transducer: blank in prediction prefix"));
        }
        self.advance_from(ctx, state.h, state.c, token)
    }

    fn advance_from(&self, ctx: &ForwardCtx, h: Var, c: Var, token: usize) -> Result<PredState> {
        let emb = self.embed.forward(ctx, &[token])?;
        let (h, c) = self.lstm.step(ctx, emb, h, c)?;
        let proj = self.pred_proj.forward(ctx, h)?;
        Ok(PredState { h, c, proj })
    }

    /// `[T', joint]` encoder-side projection, computed once per utterance.
    pub fn prepare_enc(&self, ctx: &ForwardCtx, enc: EncodedSequence) -> Result<Var> {
        self.enc_proj.forward(ctx, enc.var)
    }

    /// Log-probabilities over vocab-plus-blank for one lattice cell.
    pub fn joint_step(
        &self,
        ctx: &ForwardCtx,
        enc_proj: Var,
        t: usize,
        state: &PredState,
    ) -> Result<Vec<f64>> {
        let tape = ctx.tape;
        let row = tape.slice_rows(enc_proj, t, t + 1)?;
        let joint = tape.tanh(tape.add(row, state.proj)?);
        let logits = self.out.forward(ctx, joint)?;
        Ok(tape.values(tape.log_softmax(logits)?))
    }

    /// Training-time joint table: `[T' * (U+1), V]` log-probabilities with
    /// rows indexed `t * (U+1) + u`.
    pub fn joint_log_probs(
        &self,
        ctx: &ForwardCtx,
        enc: EncodedSequence,
        target: &[usize],
    ) -> Result<Var> {
        let tape = ctx.tape;
        if target.contains(&BLANK_ID) {
            return Err(Error::invalid("transducer: blank in target"));
        }
        // prediction states for prefixes of length 0..=U
        let mut rows = Vec::with_capacity(target.len() + 1);
        let (mut h, mut c) = self.lstm.zero_state(ctx);
        let mut token = SOS_ID;
        for i in 0..=target.len() {
            let emb = self.embed.forward(ctx, &[token])?;
            let (h2, c2) = self.lstm.step(ctx, emb, h, c)?;
            h = h2;
            c = c2;
            rows.push(h);
            if i < target.len() {
                token = target[i];
            }
        }
        let states = tape.concat_rows(&rows)?;
        let enc_p = self.enc_proj.forward(ctx, enc.var)?;
        let pred_p = self.pred_proj.forward(ctx, states)?;
        let big = tape.add(
            tape.repeat_rows_interleave(enc_p, target.len() + 1)?,
            tape.tile_rows(pred_p, enc.frames)?,
        )?;
        let logits = self.out.forward(ctx, tape.tanh(big))?;
        tape.log_softmax(logits)
    }
}

/// Encoder-side tensors an attention decoder reuses across output steps.
pub struct EncPack {
    pub enc: Var,
    pub frames: usize,
    keys: Var,
    values: Var,
}

/// Decoder state: LSTM state plus the previous context vector
/// (input-feeding).
#[derive(Debug, Clone, Copy)]
pub struct AttnState {
    pub h: Var,
    pub c: Var,
    pub context: Var,
}

enum AttnMech {
    /// `score = w^T tanh(W_enc x_j + W_state s)`; context over raw encoder
    /// frames. The BLSTM pairing.
    Additive {
        w_enc: Linear,
        w_state: Linear,
        score: Linear,
    },
    /// Scaled multi-head dot attention over projected keys/values. The
    /// Conformer pairing.
    Dot {
        wq: Linear,
        wk: Linear,
        wv: Linear,
        heads: usize,
        dim: usize,
    },
}

/// Attend/Spell decoder: embedding, one LSTM with input-feeding, an
/// attention mechanism, and an output projection over `[state; context]`.
pub struct AttentionDecoder {
    embed: Embedding,
    lstm: LstmCell,
    mech: AttnMech,
    out: Linear,
    ctx_dim: usize,
}

impl AttentionDecoder {
    pub fn vocab_size(&self) -> usize {
        self.out.out_dim
    }
}

impl AttentionDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let (mech, ctx_dim) = match cfg.encoder {
            super::EncoderKind::Blstm => (
                AttnMech::Additive {
                    w_enc: Linear::new(store, rng, &format!("{name}.w_enc"), cfg.d_model, cfg.attn_dim, true),
                    w_state: Linear::new(
                        store,
                        rng,
                        &format!("{name}.w_state"),
                        cfg.dec_hidden,
                        cfg.attn_dim,
                        false,
                    ),
                    score: Linear::new(store, rng, &format!("{name}.score"), cfg.attn_dim, 1, false),
                },
                cfg.d_model,
            ),
            super::EncoderKind::Conformer => (
                AttnMech::Dot {
                    wq: Linear::new(store, rng, &format!("{name}.wq"), cfg.dec_hidden, cfg.attn_dim, true),
                    wk: Linear::new(store, rng, &format!("{name}.wk"), cfg.d_model, cfg.attn_dim, true),
                    wv: Linear::new(store, rng, &format!("{name}.wv"), cfg.d_model, cfg.attn_dim, true),
                    heads: cfg.attn_heads,
                    dim: cfg.attn_dim,
                },
                cfg.attn_dim,
            ),
        };
        AttentionDecoder {
            embed: Embedding::new(store, rng, &format!("{name}.embed"), cfg.vocab_size, cfg.embed_dim),
            lstm: LstmCell::new(
                store,
                rng,
                &format!("{name}.lstm"),
                cfg.embed_dim + ctx_dim,
                cfg.dec_hidden,
            ),
            out: Linear::new(
                store,
                rng,
                &format!("{name}.out"),
                cfg.dec_hidden + ctx_dim,
                cfg.vocab_size,
                true,
            ),
            mech,
            ctx_dim,
        }
    }

    pub fn prepare(&self, ctx: &ForwardCtx, enc: EncodedSequence) -> Result<EncPack> {
        if enc.frames == 0 {
            return Err(Error::invalid("attention: empty encoder output"));
        }
        let (keys, values) = match &self.mech {
            AttnMech::Additive { w_enc, .. } => (w_enc.forward(ctx, enc.var)?, enc.var),
            AttnMech::Dot { wk, wv, .. } => {
                (wk.forward(ctx, enc.var)?, wv.forward(ctx, enc.var)?)
            }
        };
        Ok(EncPack {
            enc: enc.var,
            frames: enc.frames,
            keys,
            values,
        })
    }

    pub fn start_state(&self, ctx: &ForwardCtx) -> Result<AttnState> {
        let (h, c) = self.lstm.zero_state(ctx);
        let context = ctx
            .tape
            .leaf_from(vec![1, self.ctx_dim], vec![0.0; self.ctx_dim], false)?;
        Ok(AttnState { h, c, context })
    }

    /// Context vector and attention weights for the current state. The
    /// weight rows (one per head) each sum to one over the `T'` frames.
    pub fn attend(&self, ctx: &ForwardCtx, pack: &EncPack, h: Var) -> Result<(Var, Var)> {
        let tape = ctx.tape;
        match &self.mech {
            AttnMech::Additive { w_state, score, .. } => {
                let s_proj = w_state.forward(ctx, h)?;
                let s_flat = tape.reshape(s_proj, vec![tape.shape(s_proj)[1]])?;
                let energies = score.forward(ctx, tape.tanh(tape.add_bias(pack.keys, s_flat)?))?;
                let weights = tape.softmax(tape.reshape(energies, vec![1, pack.frames])?)?;
                let context = tape.matmul(weights, pack.values)?;
                Ok((context, weights))
            }
            AttnMech::Dot { wq, heads, dim, .. } => {
                let dh = dim / heads;
                let q = wq.forward(ctx, h)?;
                let mut ctxs = Vec::with_capacity(*heads);
                let mut weight_rows = Vec::with_capacity(*heads);
                for hd in 0..*heads {
                    let (from, to) = (hd * dh, (hd + 1) * dh);
                    let q_h = tape.slice_cols(q, from, to)?;
                    let k_h = tape.slice_cols(pack.keys, from, to)?;
                    let v_h = tape.slice_cols(pack.values, from, to)?;
                    let scores = tape.scale(tape.matmul_nt(q_h, k_h)?, 1.0 / (dh as f64).sqrt());
                    let w = tape.softmax(scores)?;
                    weight_rows.push(w);
                    ctxs.push(tape.matmul(w, v_h)?);
                }
                let mut context = ctxs[0];
                for c in ctxs.iter().skip(1) {
                    context = tape.concat_cols(context, *c)?;
                }
                Ok((context, tape.concat_rows(&weight_rows)?))
            }
        }
    }

    /// One decode step: consumes a token, returns the next state and the
    /// raw (pre-softmax) vocabulary logits.
    pub fn step(
        &self,
        ctx: &ForwardCtx,
        pack: &EncPack,
        state: &AttnState,
        token: usize,
    ) -> Result<(AttnState, Vec<f64>)> {
        let (next, logits) = self.step_var(ctx, pack, state, token)?;
        Ok((next, ctx.tape.values(logits)))
    }

    fn step_var(
        &self,
        ctx: &ForwardCtx,
        pack: &EncPack,
        state: &AttnState,
        token: usize,
    ) -> Result<(AttnState, Var)> {
        let tape = ctx.tape;
        let emb = self.embed.forward(ctx, &[token])?;
        let x = tape.concat_cols(emb, state.context)?;
        let (h, c) = self.lstm.step(ctx, x, state.h, state.c)?;
        let (context, _) = self.attend(ctx, pack, h)?;
        let logits = self.out.forward(ctx, tape.concat_cols(h, context)?)?;
        Ok((AttnState { h, c, context }, logits))
    }

    /// Teacher-forced `[U+1, V]` log-probabilities over the gold prefix
    /// sequence `[SOS, y_1, .., y_U]` (the final row predicts EOS).
    pub fn teacher_forced_log_probs(
        &self,
        ctx: &ForwardCtx,
        enc: EncodedSequence,
        target: &[usize],
    ) -> Result<Var> {
        let tape = ctx.tape;
        let pack = self.prepare(ctx, enc)?;
        let mut state = self.start_state(ctx)?;
        let mut rows = Vec::with_capacity(target.len() + 1);
        let mut token = SOS_ID;
        for i in 0..=target.len() {
            let (next, logits) = self.step_var(ctx, &pack, &state, token)?;
            state = next;
            rows.push(logits);
            if i < target.len() {
                token = target[i];
            }
        }
        tape.log_softmax(tape.concat_rows(&rows)?)
    }
}
