//! Model assembly: a central parameter store, the forward context that
//! binds parameters onto a tape, and the encoder/decoder networks.

pub mod encoder;
pub mod heads;
pub mod layers;

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::loss::{attention_loss_on_tape, ctc_loss_on_tape, transducer_loss_on_tape};
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::{TokenSequence, EOS_ID};

pub use encoder::{BlstmEncoder, ConformerEncoder, Subsampler};
pub use heads::{AttentionDecoder, AttnState, CtcHead, EncPack, PredState, TransducerHead};

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    /// In the variational-noise scope (embedding and LSTM parameters).
    pub vn: bool,
}

/// Owns every parameter and buffer of a model, in registration order so
/// ids, checkpoints, and noise draws are reproducible.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: String, tensor: Tensor, trainable: bool, vn: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
            vn,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total trainable scalar count.
    pub fn num_trainable_values(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Name/shape/flags listing used for checkpoint compatibility checks.
    pub fn manifest(&self) -> Vec<ParamManifestEntry> {
        self.entries
            .iter()
            .map(|e| ParamManifestEntry {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                trainable: e.trainable,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Per-entry value overrides, indexed by `ParamId`; used for EMA shadows
/// and variational-noise views.
pub type Overlay = Vec<Option<Vec<f64>>>;

/// Observed batch statistics a batch-norm layer wants folded into its
/// running buffers (applied by the trainer after the step).
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

/// Binds parameters onto one tape for one forward pass. Each parameter is
/// leafed at most once; values come from the store or from an overlay
/// (EMA weights at eval, noised weights in training).
pub struct ForwardCtx<'a> {
    pub tape: &'a Tape,
    store: &'a ParamStore,
    overlay: Option<&'a Overlay>,
    pub train: bool,
    grad: bool,
    rng: RefCell<ChaCha8Rng>,
    memo: RefCell<HashMap<usize, Var>>,
    bn_updates: RefCell<Vec<BnUpdate>>,
}

impl<'a> ForwardCtx<'a> {
    /// Training context: gradients tracked, dropout active.
    pub fn train(
        tape: &'a Tape,
        store: &'a ParamStore,
        noise: Option<&'a Overlay>,
        dropout_seed: u64,
    ) -> Self {
        ForwardCtx {
            tape,
            store,
            overlay: noise,
            train: true,
            grad: true,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(dropout_seed)),
            memo: RefCell::new(HashMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// Evaluation context: deterministic, no gradients, dropout off,
    /// batch norm frozen. `ema` supplies shadow weights when enabled.
    pub fn eval(tape: &'a Tape, store: &'a ParamStore, ema: Option<&'a Overlay>) -> Self {
        ForwardCtx {
            tape,
            store,
            overlay: ema,
            train: false,
            grad: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
            memo: RefCell::new(HashMap::new()),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    /// The parameter as a tape leaf (memoized per context).
    pub fn var(&self, id: ParamId) -> Var {
        if let Some(&v) = self.memo.borrow().get(&id.0) {
            return v;
        }
        let entry = self.store.entry(id);
        let values = match self.overlay.and_then(|o| o[id.0].as_ref()) {
            Some(over) => over.clone(),
            None => entry.tensor.data().to_vec(),
        };
        let v = self
            .tape
            .leaf_from(
                entry.tensor.shape().to_vec(),
                values,
                self.grad && entry.trainable,
            )
            .expect("store entry is consistent");
        self.memo.borrow_mut().insert(id.0, v);
        v
    }

    /// Raw buffer values (running statistics), never overlaid.
    pub fn buffer(&self, id: ParamId) -> Vec<f64> {
        self.store.tensor(id).data().to_vec()
    }

    pub fn dropout(&self, x: Var, p: f64) -> Var {
        self.tape
            .dropout(x, p, self.train, &mut *self.rng.borrow_mut())
    }

    pub fn record_bn(&self, update: BnUpdate) {
        self.bn_updates.borrow_mut().push(update);
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate> {
        std::mem::take(&mut *self.bn_updates.borrow_mut())
    }

    /// Every parameter bound onto the tape so far, ordered by id; the
    /// trainer reads gradients off these pairs after `backward`.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let memo = self.memo.borrow();
        let mut v: Vec<(ParamId, Var)> = memo.iter().map(|(&i, &var)| (ParamId(i), var)).collect();
        v.sort_by_key(|(id, _)| id.0);
        v
    }
}

/// Encoder output: `T' x d_enc` frames on the tape.
#[derive(Debug, Clone, Copy)]
pub struct EncodedSequence {
    pub var: Var,
    pub frames: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Blstm,
    Conformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Ctc,
    Transducer,
    Attention,
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EncoderKind::Blstm => write!(f, "blstm"),
            EncoderKind::Conformer => write!(f, "conformer"),
        }
    }
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecoderKind::Ctc => write!(f, "ctc"),
            DecoderKind::Transducer => write!(f, "transducer"),
            DecoderKind::Attention => write!(f, "attention"),
        }
    }
}

/// Architecture hyperparameters. Defaults mirror the paper-scale systems;
/// the toy presets shrink everything for desk-scale runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub vocab_size: usize,
    /// Encoder width; also the BLSTM concatenated output dim.
    pub d_model: usize,
    pub subsample_channels: usize,
    /// Conformer depth / BLSTM layer count.
    pub num_blocks: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    pub conv_kernel: usize,
    /// Decoder LSTM width (prediction network / attention decoder).
    pub dec_hidden: usize,
    pub embed_dim: usize,
    pub joint_dim: usize,
    /// Additive attention width (BLSTM systems).
    pub attn_dim: usize,
    /// Dot-attention heads in the decoder (Conformer systems).
    pub attn_heads: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// The paper-scale BLSTM system (LAS-6-1280 lineage).
    pub fn paper_blstm(decoder: DecoderKind, vocab_size: usize) -> Self {
        ModelConfig {
            encoder: EncoderKind::Blstm,
            decoder,
            vocab_size,
            d_model: 1280,
            subsample_channels: 256,
            num_blocks: 6,
            num_heads: 8,
            d_ffn: 2048,
            conv_kernel: 32,
            dec_hidden: 1280,
            embed_dim: 128,
            joint_dim: 640,
            attn_dim: 128,
            attn_heads: 8,
            dropout: 0.1,
        }
    }

    /// The paper-scale Conformer system (Conformer L lineage).
    pub fn paper_conformer(decoder: DecoderKind, vocab_size: usize) -> Self {
        ModelConfig {
            encoder: EncoderKind::Conformer,
            decoder,
            vocab_size,
            d_model: 512,
            subsample_channels: 256,
            num_blocks: 17,
            num_heads: 8,
            d_ffn: 2048,
            conv_kernel: 32,
            dec_hidden: 640,
            embed_dim: 128,
            joint_dim: 640,
            attn_dim: 512,
            attn_heads: 8,
            dropout: 0.1,
        }
    }

    /// Desk-scale preset: 2 blocks/layers at d_model 64.
    pub fn toy(encoder: EncoderKind, decoder: DecoderKind, vocab_size: usize) -> Self {
        ModelConfig {
            encoder,
            decoder,
            vocab_size,
            d_model: 64,
            subsample_channels: 8,
            num_blocks: 2,
            num_heads: 4,
            d_ffn: 128,
            conv_kernel: 7,
            dec_hidden: 64,
            embed_dim: 32,
            joint_dim: 64,
            attn_dim: 64,
            attn_heads: 4,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::Config("model: vocab too small".into()));
        }
        if self.d_model == 0 || self.num_blocks == 0 {
            return Err(Error::Config("model: zero-sized encoder".into()));
        }
        if self.encoder == EncoderKind::Conformer && self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model: d_model {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        if self.encoder == EncoderKind::Blstm && self.d_model % 2 != 0 {
            return Err(Error::Config(
                "model: BLSTM needs an even d_model (two directions)".into(),
            ));
        }
        if self.decoder == DecoderKind::Attention
            && self.encoder == EncoderKind::Conformer
            && self.attn_dim % self.attn_heads != 0
        {
            return Err(Error::Config(format!(
                "model: attn_dim {} not divisible by {} heads",
                self.attn_dim, self.attn_heads
            )));
        }
        if self.conv_kernel == 0 {
            return Err(Error::Config("model: conv kernel must be >= 1".into()));
        }
        Ok(())
    }
}

pub enum Encoder {
    Blstm(BlstmEncoder),
    Conformer(ConformerEncoder),
}

pub enum Head {
    Ctc(CtcHead),
    Transducer(TransducerHead),
    Attention(AttentionDecoder),
}

/// Per-item loss: the tape node to backprop (absent when the target is
/// unreachable) plus the scalar value.
pub struct ItemLoss {
    pub var: Option<Var>,
    pub value: f64,
}

/// One encoder plus one decoder head over a shared parameter store.
pub struct AsrModel {
    pub cfg: ModelConfig,
    subsampler: Subsampler,
    encoder: Encoder,
    pub head: Head,
}

impl AsrModel {
    /// Registers all parameters into `store`, initialized from `seed`.
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subsampler = Subsampler::new(store, &mut rng, "subsample", cfg)?;
        let encoder = match cfg.encoder {
            EncoderKind::Blstm => Encoder::Blstm(BlstmEncoder::new(store, &mut rng, "enc", cfg)),
            EncoderKind::Conformer => {
                Encoder::Conformer(ConformerEncoder::new(store, &mut rng, "enc", cfg))
            }
        };
        let head = match cfg.decoder {
            DecoderKind::Ctc => Head::Ctc(CtcHead::new(store, &mut rng, "ctc", cfg)),
            DecoderKind::Transducer => {
                Head::Transducer(TransducerHead::new(store, &mut rng, "trans", cfg))
            }
            DecoderKind::Attention => {
                Head::Attention(AttentionDecoder::new(store, &mut rng, "att", cfg))
            }
        };
        Ok(AsrModel {
            cfg: cfg.clone(),
            subsampler,
            encoder,
            head,
        })
    }

    /// Subsamples and encodes a feature matrix.
    pub fn encode(&self, ctx: &ForwardCtx, feat: &FeatureMatrix) -> Result<EncodedSequence> {
        let x = self.subsampler.forward(ctx, feat)?;
        let out = match &self.encoder {
            Encoder::Blstm(e) => e.forward(ctx, x)?,
            Encoder::Conformer(e) => e.forward(ctx, x)?,
        };
        let shape = ctx.tape.shape(out);
        Ok(EncodedSequence {
            var: out,
            frames: shape[0],
            dim: shape[1],
        })
    }

    /// Loss for one utterance under the configured head.
    pub fn loss(
        &self,
        ctx: &ForwardCtx,
        feat: &FeatureMatrix,
        target: &TokenSequence,
    ) -> Result<ItemLoss> {
        let enc = self.encode(ctx, feat)?;
        match &self.head {
            Head::Ctc(h) => {
                let logp = h.log_probs(ctx, enc.var)?;
                let (node, res) = ctc_loss_on_tape(ctx.tape, logp, target)?;
                Ok(ItemLoss {
                    var: (!res.unreachable).then_some(node),
                    value: res.loss,
                })
            }
            Head::Transducer(h) => {
                let logp = h.joint_log_probs(ctx, enc, target)?;
                let (node, res) = transducer_loss_on_tape(ctx.tape, logp, target, enc.frames)?;
                Ok(ItemLoss {
                    var: res.loss.is_finite().then_some(node),
                    value: res.loss,
                })
            }
            Head::Attention(h) => {
                let logp = h.teacher_forced_log_probs(ctx, enc, target)?;
                let mut with_eos = target.clone();
                with_eos.push(EOS_ID);
                let node = attention_loss_on_tape(ctx.tape, logp, &with_eos)?;
                Ok(ItemLoss {
                    var: Some(node),
                    value: ctx.tape.value_scalar(node),
                })
            }
        }
    }
}
