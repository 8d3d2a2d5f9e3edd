//! Encoders: a stride-2 convolutional subsampler feeding either stacked
//! bidirectional LSTM layers or Conformer blocks.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::features::{FeatureMatrix, NUM_MELS};
use crate::tensor::{Tensor, Var};

use super::layers::{xavier, BatchNorm, LayerNorm, Linear, LstmCell};
use super::{ForwardCtx, ModelConfig, ParamId, ParamStore};

/// Output length of one k=3 s=2 p=1 convolution.
fn conv_len(n: usize) -> usize {
    if n == 0 {
        0
    } else {
        (n - 1) / 2 + 1
    }
}

/// Subsampled length after the two stride-2 convolutions:
/// `ceil(ceil(T/2)/2)`.
pub fn subsampled_len(t: usize) -> usize {
    conv_len(conv_len(t))
}

/// Two 2-D convolutions (kernel 3, stride 2, padding 1) with ReLU, then a
/// linear projection of the flattened channels to `d_model`.
pub struct Subsampler {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    proj: Linear,
    channels: usize,
}

impl Subsampler {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let c = cfg.subsample_channels;
        let conv1_w = store.register(
            format!("{name}.conv1.w"),
            xavier(rng, vec![c, 1, 3, 3], 9, c * 9),
            true,
            false,
        );
        let conv1_b = store.register(
            format!("{name}.conv1.b"),
            Tensor::zeros(vec![c]),
            true,
            false,
        );
        let conv2_w = store.register(
            format!("{name}.conv2.w"),
            xavier(rng, vec![c, c, 3, 3], c * 9, c * 9),
            true,
            false,
        );
        let conv2_b = store.register(
            format!("{name}.conv2.b"),
            Tensor::zeros(vec![c]),
            true,
            false,
        );
        let freq_out = conv_len(conv_len(NUM_MELS));
        let proj = Linear::new(store, rng, &format!("{name}.proj"), c * freq_out, cfg.d_model, true);
        Ok(Subsampler {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            proj,
            channels: c,
        })
    }

    pub fn forward(&self, ctx: &ForwardCtx, feat: &FeatureMatrix) -> Result<Var> {
        let tape = ctx.tape;
        let t_len = feat.num_frames();
        let x = tape.leaf_from(
            vec![1, t_len, NUM_MELS],
            feat.data().to_vec(),
            false,
        )?;
        let h1 = tape.relu(tape.conv2d(x, ctx.var(self.conv1_w), ctx.var(self.conv1_b), 2, 1)?);
        let h2 = tape.relu(tape.conv2d(h1, ctx.var(self.conv2_w), ctx.var(self.conv2_b), 2, 1)?);
        let flat = tape.flatten_chw(h2)?;
        self.proj.forward(ctx, flat)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

/// Stacked bidirectional LSTM layers; forward and backward outputs are
/// concatenated per frame, keeping the width at `d_model`.
pub struct BlstmEncoder {
    layers: Vec<(LstmCell, LstmCell)>,
}

impl BlstmEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let per_dir = cfg.d_model / 2;
        let layers = (0..cfg.num_blocks)
            .map(|i| {
                let fw = LstmCell::new(store, rng, &format!("{name}.l{i}.fw"), cfg.d_model, per_dir);
                let bw = LstmCell::new(store, rng, &format!("{name}.l{i}.bw"), cfg.d_model, per_dir);
                (fw, bw)
            })
            .collect();
        BlstmEncoder { layers }
    }

    pub fn forward(&self, ctx: &ForwardCtx, mut x: Var) -> Result<Var> {
        let tape = ctx.tape;
        for (fw, bw) in &self.layers {
            let f_out = fw.forward_seq(ctx, x)?;
            let rev_in = tape.reverse_rows(x)?;
            let b_out = tape.reverse_rows(bw.forward_seq(ctx, rev_in)?)?;
            x = tape.concat_cols(f_out, b_out)?;
        }
        Ok(x)
    }
}

/// Feed-forward module: layer norm, expansion with Swish, projection back,
/// dropout. Used in half-step (macaron) residuals.
struct FeedForward {
    ln: LayerNorm,
    lin1: Linear,
    lin2: Linear,
    dropout: f64,
}

impl FeedForward {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        d_ffn: usize,
        dropout: f64,
    ) -> Self {
        FeedForward {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d_model),
            lin1: Linear::new(store, rng, &format!("{name}.lin1"), d_model, d_ffn, true),
            lin2: Linear::new(store, rng, &format!("{name}.lin2"), d_ffn, d_model, true),
            dropout,
        }
    }

    fn forward(&self, ctx: &ForwardCtx, x: Var) -> Result<Var> {
        let y = self.ln.forward(ctx, x)?;
        let y = ctx.tape.swish(self.lin1.forward(ctx, y)?);
        let y = ctx.dropout(y, self.dropout);
        let y = self.lin2.forward(ctx, y)?;
        Ok(ctx.dropout(y, self.dropout))
    }
}

/// Multi-head self-attention with Transformer-XL style relative positional
/// encoding: sinusoidal distance embeddings through a learned projection,
/// plus learned global content/position biases per head.
pub struct RelSelfAttention {
    ln: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wr: Linear,
    wo: Linear,
    u_bias: ParamId,
    v_bias: ParamId,
    num_heads: usize,
    d_model: usize,
    dropout: f64,
}

impl RelSelfAttention {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        num_heads: usize,
        dropout: f64,
    ) -> Self {
        RelSelfAttention {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d_model),
            wq: Linear::new(store, rng, &format!("{name}.wq"), d_model, d_model, true),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d_model, d_model, true),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d_model, d_model, true),
            wr: Linear::new(store, rng, &format!("{name}.wr"), d_model, d_model, false),
            wo: Linear::new(store, rng, &format!("{name}.wo"), d_model, d_model, true),
            u_bias: store.register(
                format!("{name}.u"),
                Tensor::zeros(vec![d_model]),
                true,
                false,
            ),
            v_bias: store.register(
                format!("{name}.v"),
                Tensor::zeros(vec![d_model]),
                true,
                false,
            ),
            num_heads,
            d_model,
            dropout,
        }
    }

    /// Sinusoidal embeddings for distances `-(t-1) ..= t-1`, one row per
    /// shifted column of the score matrix.
    fn sinusoid_table(t_len: usize, d_model: usize) -> Vec<f64> {
        let rows = 2 * t_len - 1;
        let mut data = vec![0.0; rows * d_model];
        for r in 0..rows {
            let dist = r as f64 - (t_len as f64 - 1.0);
            for k in 0..d_model / 2 {
                let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / d_model as f64);
                data[r * d_model + 2 * k] = (dist * freq).sin();
                data[r * d_model + 2 * k + 1] = (dist * freq).cos();
            }
        }
        data
    }

    /// Per-head `[T, T]` attention scores: content plus shifted position
    /// terms, scaled by `1/sqrt(d_head)`.
    fn head_scores(
        &self,
        ctx: &ForwardCtx,
        q_h: Var,
        k_h: Var,
        p_h: Var,
        u_h: Var,
        v_h: Var,
    ) -> Result<Var> {
        let tape = ctx.tape;
        let dh = self.d_model / self.num_heads;
        let content = tape.matmul_nt(tape.add_bias(q_h, u_h)?, k_h)?;
        let pos_full = tape.matmul_nt(tape.add_bias(q_h, v_h)?, p_h)?;
        let pos = tape.rel_shift(pos_full)?;
        Ok(tape.scale(tape.add(content, pos)?, 1.0 / (dh as f64).sqrt()))
    }

    pub fn forward(&self, ctx: &ForwardCtx, x: Var) -> Result<Var> {
        let tape = ctx.tape;
        let t_len = tape.shape(x)[0];
        let dh = self.d_model / self.num_heads;

        let xn = self.ln.forward(ctx, x)?;
        let q = self.wq.forward(ctx, xn)?;
        let k = self.wk.forward(ctx, xn)?;
        let v = self.wv.forward(ctx, xn)?;

        let sin = tape.leaf_from(
            vec![2 * t_len - 1, self.d_model],
            Self::sinusoid_table(t_len, self.d_model),
            false,
        )?;
        let p = self.wr.forward(ctx, sin)?;
        let u_all = ctx.var(self.u_bias);
        let v_all = ctx.var(self.v_bias);
        let u2 = tape.reshape(u_all, vec![1, self.d_model])?;
        let v2 = tape.reshape(v_all, vec![1, self.d_model])?;

        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let (from, to) = (h * dh, (h + 1) * dh);
            let q_h = tape.slice_cols(q, from, to)?;
            let k_h = tape.slice_cols(k, from, to)?;
            let v_h = tape.slice_cols(v, from, to)?;
            let p_h = tape.slice_cols(p, from, to)?;
            let u_h = tape.reshape(tape.slice_cols(u2, from, to)?, vec![dh])?;
            let v_bias_h = tape.reshape(tape.slice_cols(v2, from, to)?, vec![dh])?;
            let scores = self.head_scores(ctx, q_h, k_h, p_h, u_h, v_bias_h)?;
            debug_assert_eq!(tape.shape(scores), vec![t_len, t_len]);
            let attn = tape.softmax(scores)?;
            let attn = ctx.dropout(attn, self.dropout);
            heads.push(tape.matmul(attn, v_h)?);
        }
        let mut cat = heads[0];
        for h in heads.iter().skip(1) {
            cat = tape.concat_cols(cat, *h)?;
        }
        let out = self.wo.forward(ctx, cat)?;
        Ok(ctx.dropout(out, self.dropout))
    }
}

/// Convolution module: layer norm, pointwise expansion, GLU, depthwise
/// conv, batch norm, Swish, pointwise projection, dropout.
struct ConvModule {
    ln: LayerNorm,
    pw1: Linear,
    dw_w: ParamId,
    dw_b: ParamId,
    bn: BatchNorm,
    pw2: Linear,
    dropout: f64,
}

impl ConvModule {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        kernel: usize,
        dropout: f64,
    ) -> Self {
        ConvModule {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d_model),
            pw1: Linear::new(store, rng, &format!("{name}.pw1"), d_model, 2 * d_model, true),
            dw_w: store.register(
                format!("{name}.dw.w"),
                xavier(rng, vec![d_model, kernel], kernel, kernel),
                true,
                false,
            ),
            dw_b: store.register(
                format!("{name}.dw.b"),
                Tensor::zeros(vec![d_model]),
                true,
                false,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), d_model),
            pw2: Linear::new(store, rng, &format!("{name}.pw2"), d_model, d_model, true),
            dropout,
        }
    }

    fn forward(&self, ctx: &ForwardCtx, x: Var) -> Result<Var> {
        let tape = ctx.tape;
        let y = self.ln.forward(ctx, x)?;
        let y = self.pw1.forward(ctx, y)?;
        let y = tape.glu(y)?;
        let y = tape.dw_conv1d(y, ctx.var(self.dw_w), ctx.var(self.dw_b))?;
        let y = self.bn.forward(ctx, y)?;
        let y = tape.swish(y);
        let y = self.pw2.forward(ctx, y)?;
        Ok(ctx.dropout(y, self.dropout))
    }
}

/// One Conformer block: half-step FFN, relative-position self-attention,
/// convolution module, half-step FFN, final layer norm, with residuals
/// around every sub-module.
pub struct ConformerBlock {
    ffn1: FeedForward,
    attn: RelSelfAttention,
    conv: ConvModule,
    ffn2: FeedForward,
    final_ln: LayerNorm,
}

impl ConformerBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        ConformerBlock {
            ffn1: FeedForward::new(
                store,
                rng,
                &format!("{name}.ffn1"),
                cfg.d_model,
                cfg.d_ffn,
                cfg.dropout,
            ),
            attn: RelSelfAttention::new(
                store,
                rng,
                &format!("{name}.attn"),
                cfg.d_model,
                cfg.num_heads,
                cfg.dropout,
            ),
            conv: ConvModule::new(
                store,
                rng,
                &format!("{name}.conv"),
                cfg.d_model,
                cfg.conv_kernel,
                cfg.dropout,
            ),
            ffn2: FeedForward::new(
                store,
                rng,
                &format!("{name}.ffn2"),
                cfg.d_model,
                cfg.d_ffn,
                cfg.dropout,
            ),
            final_ln: LayerNorm::new(store, &format!("{name}.final_ln"), cfg.d_model),
        }
    }

    pub fn forward(&self, ctx: &ForwardCtx, x: Var) -> Result<Var> {
        let tape = ctx.tape;
        let x = tape.add(x, tape.scale(self.ffn1.forward(ctx, x)?, 0.5))?;
        let x = tape.add(x, self.attn.forward(ctx, x)?)?;
        let x = tape.add(x, self.conv.forward(ctx, x)?)?;
        let x = tape.add(x, tape.scale(self.ffn2.forward(ctx, x)?, 0.5))?;
        self.final_ln.forward(ctx, x)
    }
}

pub struct ConformerEncoder {
    blocks: Vec<ConformerBlock>,
}

impl ConformerEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let blocks = (0..cfg.num_blocks)
            .map(|i| ConformerBlock::new(store, rng, &format!("{name}.b{i}"), cfg))
            .collect();
        ConformerEncoder { blocks }
    }

    pub fn forward(&self, ctx: &ForwardCtx, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AsrModel, DecoderKind, EncoderKind};
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};

    fn toy_features(t: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(t, (0..t * NUM_MELS).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn subsample_length_arithmetic() {
        assert_eq!(subsampled_len(100), 25);
        assert_eq!(subsampled_len(1), 1);
        assert_eq!(subsampled_len(4), 1);
    }

    #[test]
    fn subsampler_output_matches_length_formula() {
        let cfg = ModelConfig::toy(EncoderKind::Conformer, DecoderKind::Ctc, 16);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sub = Subsampler::new(&mut store, &mut rng, "s", &cfg).unwrap();
        for t in [1, 4, 7, 100] {
            let tape = Tape::new();
            let ctx = ForwardCtx::eval(&tape, &store, None);
            let y = sub.forward(&ctx, &toy_features(t, 2)).unwrap();
            assert_eq!(tape.shape(y), vec![subsampled_len(t), cfg.d_model]);
        }
    }

    #[test]
    fn encoder_length_depends_only_on_input_length() {
        let cfg = ModelConfig::toy(EncoderKind::Conformer, DecoderKind::Ctc, 16);
        let mut store = ParamStore::new();
        let model = AsrModel::new(&cfg, &mut store, 3).unwrap();
        for seed in [10, 11] {
            let tape = Tape::new();
            let ctx = ForwardCtx::eval(&tape, &store, None);
            let enc = model.encode(&ctx, &toy_features(23, seed)).unwrap();
            assert_eq!(enc.frames, subsampled_len(23));
            assert_eq!(enc.dim, cfg.d_model);
        }
    }

    #[test]
    fn blstm_zero_input_outputs_bounded_by_tanh() {
        let cfg = ModelConfig::toy(EncoderKind::Blstm, DecoderKind::Ctc, 16);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = BlstmEncoder::new(&mut store, &mut rng, "e", &cfg);
        let tape = Tape::new();
        let ctx = ForwardCtx::eval(&tape, &store, None);
        let x = tape.leaf_from(vec![5, 64], vec![0.0; 5 * 64], false).unwrap();
        let y = enc.forward(&ctx, x).unwrap();
        assert!(tape.values(y).iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn blstm_time_reversal_swaps_direction_channels() {
        // mirrored weights: copy forward cell weights into the backward cell
        let cfg = ModelConfig {
            num_blocks: 1,
            ..ModelConfig::toy(EncoderKind::Blstm, DecoderKind::Ctc, 16)
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = BlstmEncoder::new(&mut store, &mut rng, "e", &cfg);
        let (fw, bw) = &enc.layers[0];
        let fw_w = store.tensor(fw.w).clone();
        let fw_b = store.tensor(fw.b).clone();
        *store.tensor_mut(bw.w) = fw_w;
        *store.tensor_mut(bw.b) = fw_b;

        let mut vrng = ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<f64> = (0..6 * 64).map(|_| vrng.gen_range(-1.0..1.0)).collect();
        let run = |data: Vec<f64>| {
            let tape = Tape::new();
            let ctx = ForwardCtx::eval(&tape, &store, None);
            let x = tape.leaf_from(vec![6, 64], data, false).unwrap();
            let y = enc.forward(&ctx, x).unwrap();
            tape.values(y)
        };
        let fwd = run(xs.clone());
        let mut rev_rows = Vec::new();
        for t in (0..6).rev() {
            rev_rows.extend_from_slice(&xs[t * 64..(t + 1) * 64]);
        }
        let rev = run(rev_rows);
        // out_rev[t] = [bw-half; fw-half] of out_fwd[T-1-t]
        let half = 32;
        for t in 0..6 {
            for j in 0..half {
                let a = fwd[(5 - t) * 64 + j];
                let b = rev[t * 64 + half + j];
                assert!((a - b).abs() < 1e-12);
                let a2 = fwd[(5 - t) * 64 + half + j];
                let b2 = rev[t * 64 + j];
                assert!((a2 - b2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_frame_blstm_is_one_cell_step_each_direction() {
        let cfg = ModelConfig {
            num_blocks: 1,
            ..ModelConfig::toy(EncoderKind::Blstm, DecoderKind::Ctc, 16)
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = BlstmEncoder::new(&mut store, &mut rng, "e", &cfg);
        let (fw, bw) = &enc.layers[0];

        let mut vrng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<f64> = (0..64).map(|_| vrng.gen_range(-1.0..1.0)).collect();

        let tape = Tape::new();
        let ctx = ForwardCtx::eval(&tape, &store, None);
        let x = tape.leaf_from(vec![1, 64], xs.clone(), false).unwrap();
        let y = enc.forward(&ctx, x).unwrap();

        let (h0, c0) = fw.zero_state(&ctx);
        let (hf, _) = fw.step(&ctx, x, h0, c0).unwrap();
        let (h0b, c0b) = bw.zero_state(&ctx);
        let (hb, _) = bw.step(&ctx, x, h0b, c0b).unwrap();
        let mut want = tape.values(hf);
        want.extend(tape.values(hb));
        assert_eq!(tape.values(y), want);
    }

    #[test]
    fn conformer_preserves_shape_and_attention_rows_normalize() {
        let cfg = ModelConfig::toy(EncoderKind::Conformer, DecoderKind::Ctc, 16);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = ConformerEncoder::new(&mut store, &mut rng, "e", &cfg);
        let tape = Tape::new();
        let ctx = ForwardCtx::eval(&tape, &store, None);
        let mut vrng = ChaCha8Rng::seed_from_u64(10);
        let x = tape
            .leaf_from(
                vec![7, 64],
                (0..7 * 64).map(|_| vrng.gen_range(-1.0..1.0)).collect(),
                false,
            )
            .unwrap();
        let y = enc.forward(&ctx, x).unwrap();
        assert_eq!(tape.shape(y), vec![7, 64]);

        // scores of the first block's attention are [T, T] and softmax rows sum to 1
        let attn = &enc.blocks[0].attn;
        let xn = attn.ln.forward(&ctx, x).unwrap();
        let q = attn.wq.forward(&ctx, xn).unwrap();
        let k = attn.wk.forward(&ctx, xn).unwrap();
        let sin = tape
            .leaf_from(
                vec![13, 64],
                RelSelfAttention::sinusoid_table(7, 64),
                false,
            )
            .unwrap();
        let p = attn.wr.forward(&ctx, sin).unwrap();
        let dh = 16;
        let q_h = tape.slice_cols(q, 0, dh).unwrap();
        let k_h = tape.slice_cols(k, 0, dh).unwrap();
        let p_h = tape.slice_cols(p, 0, dh).unwrap();
        let u = tape
            .leaf_from(vec![dh], vec![0.0; dh], false)
            .unwrap();
        let scores = attn.head_scores(&ctx, q_h, k_h, p_h, u, u).unwrap();
        assert_eq!(tape.shape(scores), vec![7, 7]);
        let probs = tape.softmax(scores).unwrap();
        let vals = tape.values(probs);
        for row in vals.chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn conformer_block_gradients_match_fd_on_tiny_instance() {
        // d_model 8, 4 frames, every parameter probed on sampled coords;
        // dropout zeroed so train-mode forwards are deterministic
        let cfg = ModelConfig {
            d_model: 8,
            num_heads: 2,
            d_ffn: 16,
            conv_kernel: 3,
            num_blocks: 1,
            subsample_channels: 2,
            dropout: 0.0,
            ..ModelConfig::toy(EncoderKind::Conformer, DecoderKind::Ctc, 16)
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let block = ConformerBlock::new(&mut store, &mut rng, "b", &cfg);

        let mut vrng = ChaCha8Rng::seed_from_u64(12);
        let xs: Vec<f64> = (0..4 * 8).map(|_| vrng.gen_range(-1.0..1.0)).collect();

        // both the autodiff and FD runs use a train-mode context so batch
        // norm takes the same path
        let run = |store: &ParamStore, grad: bool| -> (f64, Vec<(usize, Option<Tensor>)>) {
            let tape = Tape::new();
            let ctx = ForwardCtx::train(&tape, store, None, 0);
            let x = tape.leaf_from(vec![4, 8], xs.clone(), false).unwrap();
            let y = block.forward(&ctx, x).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let loss = tape.sum_all(sq);
            if grad {
                let map = tape.backward(loss).unwrap();
                let grads = store
                    .ids()
                    .map(|id| (id.0, map.get(ctx.var(id)).cloned()))
                    .collect();
                (tape.value_scalar(loss), grads)
            } else {
                (tape.value_scalar(loss), vec![])
            }
        };

        let (_, ad_grads) = run(&store, true);
        let mut checker = ChaCha8Rng::seed_from_u64(13);
        for (idx, ad) in ad_grads {
            let id = crate::model::ParamId(idx);
            if !store.entry(id).trainable {
                continue;
            }
            let ad = match ad {
                Some(t) => t.into_data(),
                None => continue,
            };
            let n = store.tensor(id).numel();
            let probes: Vec<usize> = if n <= 6 {
                (0..n).collect()
            } else {
                (0..6).map(|_| checker.gen_range(0..n)).collect()
            };
            for i in probes {
                let orig = store.tensor(id).data()[i];
                store.tensor_mut(id).data_mut()[i] = orig + 1e-5;
                let (fp, _) = run(&store, false);
                store.tensor_mut(id).data_mut()[i] = orig - 1e-5;
                let (fm, _) = run(&store, false);
                store.tensor_mut(id).data_mut()[i] = orig;
                let fd = (fp - fm) / 2e-5;
                let name = &store.entry(id).name;
                assert!(
                    crate::tensor::gradcheck::grads_match(&[ad[i]], &[fd], 1e-4),
                    "{name}[{i}]: ad {} vs fd {fd}",
                    ad[i]
                );
            }
        }
    }
}
