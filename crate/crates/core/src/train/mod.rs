//! Training: configuration, the optimization loop (Adam + warmup schedule,
//! SpecAugment, variational noise, parameter EMA, checkpointing, metrics
//! log), and the recognizer that reloads checkpoints for decoding.

pub mod checkpoint;
pub mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, SpecAugmentConfig};
use crate::error::{Error, Result};
use crate::features::{apply_norm, fit_norm, FeatureMatrix, NormStats};
use crate::manifest::Manifest;
use crate::metrics::{CorpusCer, ThroughputMeter, UttDecoder};
use crate::model::{
    AsrModel, BnUpdate, DecoderKind, EncoderKind, ForwardCtx, ModelConfig, Overlay, ParamStore,
};
use crate::search::{decode_features, DecodeOutput, SearchConfig};
use crate::tensor::Tape;
use crate::vocab::{TokenSequence, Vocabulary};

pub use checkpoint::CheckpointHeader;
pub use optim::{clip_global_norm, ema_init, ema_update, lr_schedule, vn_overlay, Adam};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    pub train_manifest: PathBuf,
    #[serde(default)]
    pub dev_manifest: Option<PathBuf>,
    pub vocab: PathBuf,
    /// Fit mean/variance stats on the training partition and normalize.
    #[serde(default = "default_true")]
    pub normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    #[default]
    Toy,
    Paper,
}

/// Architecture selection: a preset plus optional dimension overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    #[serde(default)]
    pub preset: ModelPreset,
    #[serde(default)]
    pub d_model: Option<usize>,
    #[serde(default)]
    pub subsample_channels: Option<usize>,
    #[serde(default)]
    pub num_blocks: Option<usize>,
    #[serde(default)]
    pub num_heads: Option<usize>,
    #[serde(default)]
    pub d_ffn: Option<usize>,
    #[serde(default)]
    pub conv_kernel: Option<usize>,
    #[serde(default)]
    pub dec_hidden: Option<usize>,
    #[serde(default)]
    pub embed_dim: Option<usize>,
    #[serde(default)]
    pub joint_dim: Option<usize>,
    #[serde(default)]
    pub attn_dim: Option<usize>,
    #[serde(default)]
    pub attn_heads: Option<usize>,
    #[serde(default)]
    pub dropout: Option<f64>,
}

impl ModelSection {
    pub fn resolve(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut cfg = match self.preset {
            ModelPreset::Toy => ModelConfig::toy(self.encoder, self.decoder, vocab_size),
            ModelPreset::Paper => match self.encoder {
                EncoderKind::Blstm => ModelConfig::paper_blstm(self.decoder, vocab_size),
                EncoderKind::Conformer => ModelConfig::paper_conformer(self.decoder, vocab_size),
            },
        };
        macro_rules! over {
            ($f:ident) => {
                if let Some(v) = self.$f {
                    cfg.$f = v;
                }
            };
        }
        over!(d_model);
        over!(subsample_channels);
        over!(num_blocks);
        over!(num_heads);
        over!(d_ffn);
        over!(conv_kernel);
        over!(dec_hidden);
        over!(embed_dim);
        over!(joint_dim);
        over!(attn_dim);
        over!(attn_heads);
        over!(dropout);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub out_dir: PathBuf,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub ema: bool,
    pub ema_decay: f64,
    pub vn: bool,
    pub vn_sigma: f64,
    pub specaugment: bool,
    /// Mask geometry; `None` picks the per-encoder published setting.
    pub sa_config: Option<SpecAugmentConfig>,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    /// Stop once dev CER drops below this.
    pub stop_at_cer: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            out_dir: "out".into(),
            batch_size: 8,
            total_steps: 150_000,
            seed: 0,
            lr_peak: 1e-3,
            warmup_steps: 10_000,
            grad_clip: 5.0,
            ema: true,
            ema_decay: 0.9999,
            vn: true,
            vn_sigma: 0.075,
            specaugment: true,
            sa_config: None,
            eval_every: 1000,
            checkpoint_every: 0,
            stop_at_cer: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub beam_width: usize,
    pub eos_logit_threshold: f64,
    pub max_emit_per_frame: usize,
    pub greedy: bool,
    /// Cap the dev utterances decoded per evaluation.
    pub max_utts: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            beam_width: 8,
            eos_logit_threshold: 5.0,
            max_emit_per_frame: 4,
            greedy: false,
            max_utts: None,
        }
    }
}

impl EvalSection {
    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            beam_width: self.beam_width,
            eos_logit_threshold: self.eos_logit_threshold,
            max_output_length: None,
            max_emit_per_frame: self.max_emit_per_frame,
            greedy: self.greedy,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_size == 0 || t.total_steps == 0 {
            return Err(Error::Config("train: zero batch or steps".into()));
        }
        if t.ema && !(0.0 < t.ema_decay && t.ema_decay < 1.0) {
            return Err(Error::Config(format!(
                "train: ema_decay {} outside (0,1)",
                t.ema_decay
            )));
        }
        if t.vn && t.vn_sigma < 0.0 {
            return Err(Error::Config("train: negative vn_sigma".into()));
        }
        if t.lr_peak <= 0.0 {
            return Err(Error::Config("train: lr_peak must be positive".into()));
        }
        if t.eval_every == 0 {
            return Err(Error::Config("train: eval_every must be >= 1".into()));
        }
        if let Some(sa) = &t.sa_config {
            sa.validate()?;
        }
        Ok(())
    }

    /// The mask geometry in effect: explicit config, or the published
    /// per-encoder setting.
    pub fn sa_config(&self) -> SpecAugmentConfig {
        if !self.train.specaugment {
            return SpecAugmentConfig::disabled();
        }
        self.train.sa_config.unwrap_or(match self.model.encoder {
            EncoderKind::Blstm => SpecAugmentConfig::blstm(),
            EncoderKind::Conformer => SpecAugmentConfig::conformer(),
        })
    }
}

// ---- metrics log records ---------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: usize,
        loss: Option<f64>,
        lr: f64,
        grad_norm: Option<f64>,
        wall_s: f64,
    },
    Eval {
        step: usize,
        cer: f64,
        utt_per_sec: Option<f64>,
        wall_s: f64,
    },
}

#[derive(Debug, Clone)]
pub struct EvalPoint {
    pub step: usize,
    pub wall_seconds: f64,
    pub cer: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub skipped_steps: usize,
    pub wall_seconds: f64,
    pub utt_per_sec: Option<f64>,
    pub final_dev_cer: Option<f64>,
    pub eval_history: Vec<EvalPoint>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

// ---- data preparation ---------------------------------------------------------

struct PreparedItem {
    id: String,
    feat: FeatureMatrix,
    tokens: TokenSequence,
}

fn prepare_items(
    manifest: &Manifest,
    vocab: &Vocabulary,
    norm: Option<&NormStats>,
) -> Result<Vec<PreparedItem>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let raw = manifest.load_features(e)?;
            let feat = match norm {
                Some(s) => apply_norm(&raw, s)?,
                None => raw,
            };
            Ok(PreparedItem {
                id: e.id.clone(),
                feat,
                tokens: vocab.encode(&e.text),
            })
        })
        .collect()
}

/// splitmix64, for deriving per-step / per-item RNG seeds.
fn derive_seed(master: u64, step: usize, item: usize, tag: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(step as u64 + 1))
        .wrapping_add(0xbf58476d1ce4e5b9u64.wrapping_mul(item as u64 + 1))
        .wrapping_add(tag);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const TAG_DROPOUT: u64 = 1;
const TAG_SA: u64 = 2;
const TAG_VN: u64 = 3;
const TAG_SHUFFLE: u64 = 4;

struct ItemOutcome {
    loss: f64,
    grads: Option<Vec<Option<Vec<f64>>>>,
    bn: Vec<BnUpdate>,
}

fn run_item(
    model: &AsrModel,
    store: &ParamStore,
    item: &PreparedItem,
    sa: &SpecAugmentConfig,
    vn: Option<&Overlay>,
    master_seed: u64,
    step: usize,
    index_in_batch: usize,
) -> Result<ItemOutcome> {
    let feat = if sa.is_disabled() {
        item.feat.clone()
    } else {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(master_seed, step, index_in_batch, TAG_SA));
        augment(&item.feat, sa, &mut rng)?
    };
    let tape = Tape::new();
    let ctx = ForwardCtx::train(
        &tape,
        store,
        vn,
        derive_seed(master_seed, step, index_in_batch, TAG_DROPOUT),
    );
    let out = model.loss(&ctx, &feat, &item.tokens)?;
    let Some(loss_var) = out.var else {
        // unreachable target (too few frames): skip the item
        return Ok(ItemOutcome {
            loss: out.value,
            grads: None,
            bn: ctx.take_bn_updates(),
        });
    };
    let map = tape.backward(loss_var)?;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (pid, var) in ctx.bound_params() {
        if let Some(g) = map.get(var) {
            grads[pid.0] = Some(g.data().to_vec());
        }
    }
    Ok(ItemOutcome {
        loss: out.value,
        grads: Some(grads),
        bn: ctx.take_bn_updates(),
    })
}

fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let m = u.momentum;
        {
            let rm = store.tensor_mut(u.mean_id).data_mut();
            for (r, &obs) in rm.iter_mut().zip(&u.mean) {
                *r = m * *r + (1.0 - m) * obs;
            }
        }
        let rv = store.tensor_mut(u.var_id).data_mut();
        for (r, &obs) in rv.iter_mut().zip(&u.var) {
            *r = m * *r + (1.0 - m) * obs;
        }
    }
}

// ---- the loop -------------------------------------------------------------------

/// Runs the full training loop described by the config; writes checkpoints
/// and a line-delimited metrics log under `train.out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let t_start = Instant::now();
    let out_dir = &cfg.train.out_dir;
    std::fs::create_dir_all(out_dir)?;

    let vocab = Vocabulary::load(&cfg.data.vocab)?;
    let model_cfg = cfg.model.resolve(vocab.size())?;
    let train_manifest = Manifest::load(&cfg.data.train_manifest)?;
    if train_manifest.is_empty() {
        return Err(Error::invalid("train: empty training manifest"));
    }

    // normalization stats come from the raw training features
    let norm = if cfg.data.normalize {
        let raw: Vec<FeatureMatrix> = train_manifest
            .entries
            .iter()
            .map(|e| train_manifest.load_features(e))
            .collect::<Result<_>>()?;
        let stats = fit_norm(raw.iter())?;
        stats.save(&out_dir.join("norm.stats"))?;
        Some(stats)
    } else {
        None
    };

    let train_items = prepare_items(&train_manifest, &vocab, norm.as_ref())?;
    let dev_items = match &cfg.data.dev_manifest {
        Some(p) => prepare_items(&Manifest::load(p)?, &vocab, norm.as_ref())?,
        None => Vec::new(),
    };

    let mut store = ParamStore::new();
    let model = AsrModel::new(&model_cfg, &mut store, cfg.train.seed)?;
    let mut adam = Adam::new(&store);
    let mut ema = cfg.train.ema.then(|| ema_init(&store));
    let sa = cfg.sa_config();
    sa.validate()?;
    let search = cfg.eval.search_config();

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let mut meter = ThroughputMeter::new(50);

    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut epoch = 0u64;
    let mut cursor = 0usize;
    shuffle(&mut order, cfg.train.seed, epoch);

    let mut skipped = 0usize;
    let mut eval_history: Vec<EvalPoint> = Vec::new();
    let mut final_cer = None;
    let mut steps_run = 0usize;

    for step in 1..=cfg.train.total_steps {
        steps_run = step;
        // assemble the batch, cycling epochs
        let mut batch = Vec::with_capacity(cfg.train.batch_size);
        for _ in 0..cfg.train.batch_size {
            if cursor == order.len() {
                cursor = 0;
                epoch += 1;
                shuffle(&mut order, cfg.train.seed, epoch);
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let vn = if cfg.train.vn && cfg.train.vn_sigma >= 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, step, 0, TAG_VN));
            Some(vn_overlay(&store, cfg.train.vn_sigma, &mut rng)?)
        } else {
            None
        };

        let outcomes: Vec<ItemOutcome> = batch
            .par_iter()
            .enumerate()
            .map(|(bi, &idx)| {
                run_item(
                    &model,
                    &store,
                    &train_items[idx],
                    &sa,
                    vn.as_ref(),
                    cfg.train.seed,
                    step,
                    bi,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        // deterministic reduction in batch order
        let mut used = 0usize;
        let mut loss_sum = 0.0;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; store.len()];
        for o in &outcomes {
            if let Some(g) = &o.grads {
                used += 1;
                loss_sum += o.loss;
                for (slot, item_g) in grads.iter_mut().zip(g) {
                    if let Some(ig) = item_g {
                        match slot {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(ig) {
                                    *a += b;
                                }
                            }
                            None => *slot = Some(ig.clone()),
                        }
                    }
                }
            }
        }

        let lr = lr_schedule(step, cfg.train.lr_peak, cfg.train.warmup_steps);
        let mut step_loss = None;
        let mut grad_norm = None;
        let finite = used > 0
            && loss_sum.is_finite()
            && grads
                .iter()
                .flatten()
                .all(|g| g.iter().all(|v| v.is_finite()));
        if finite {
            let inv = 1.0 / used as f64;
            for g in grads.iter_mut().flatten() {
                for v in g.iter_mut() {
                    *v *= inv;
                }
            }
            let norm = clip_global_norm(&mut grads, cfg.train.grad_clip);
            adam.step(&mut store, &grads, lr);
            if let Some(shadow) = ema.as_mut() {
                ema_update(shadow, &store, cfg.train.ema_decay)?;
            }
            step_loss = Some(loss_sum / used as f64);
            grad_norm = Some(norm);
        } else {
            skipped += 1;
        }
        for o in &outcomes {
            apply_bn_updates(&mut store, &o.bn);
        }
        meter.record_step(batch.len());

        write_record(
            &mut metrics,
            &LogRecord::Step {
                step,
                loss: step_loss,
                lr,
                grad_norm,
                wall_s: t_start.elapsed().as_secs_f64(),
            },
        )?;

        let due_eval = step % cfg.train.eval_every == 0 || step == cfg.train.total_steps;
        if due_eval && !dev_items.is_empty() {
            let cer = evaluate(&model, &store, ema.as_ref(), &dev_items, &search, &cfg.eval)?;
            let wall = t_start.elapsed().as_secs_f64();
            write_record(
                &mut metrics,
                &LogRecord::Eval {
                    step,
                    cer,
                    utt_per_sec: meter.utt_per_sec().ok(),
                    wall_s: wall,
                },
            )?;
            eval_history.push(EvalPoint {
                step,
                wall_seconds: wall,
                cer,
            });
            final_cer = Some(cer);
            if cfg.train.stop_at_cer.is_some_and(|x| cer < x) {
                break;
            }
        }

        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
            save_checkpoint(
                &out_dir.join(format!("ckpt_{step:07}.bin")),
                cfg,
                &vocab,
                norm.as_ref(),
                &store,
                &adam,
                ema.as_ref(),
                step,
                skipped,
            )?;
        }
    }

    let ckpt_path = out_dir.join("final.ckpt");
    save_checkpoint(
        &ckpt_path,
        cfg,
        &vocab,
        norm.as_ref(),
        &store,
        &adam,
        ema.as_ref(),
        steps_run,
        skipped,
    )?;
    metrics.flush()?;

    Ok(TrainReport {
        steps: steps_run,
        skipped_steps: skipped,
        wall_seconds: t_start.elapsed().as_secs_f64(),
        utt_per_sec: meter.utt_per_sec().ok(),
        final_dev_cer: final_cer,
        eval_history,
        checkpoint: ckpt_path,
        metrics: metrics_path,
    })
}

fn shuffle(order: &mut [usize], seed: u64, epoch: u64) {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as usize, 0, TAG_SHUFFLE));
    order.shuffle(&mut rng);
}

fn write_record(w: &mut impl Write, record: &LogRecord) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| Error::invalid(e.to_string()))?;
    writeln!(w, "{line}")?;
    Ok(())
}

fn evaluate(
    model: &AsrModel,
    store: &ParamStore,
    ema: Option<&Overlay>,
    dev: &[PreparedItem],
    search: &SearchConfig,
    eval_cfg: &EvalSection,
) -> Result<f64> {
    let take = eval_cfg.max_utts.unwrap_or(dev.len()).min(dev.len());
    let hyps: Vec<DecodeOutput> = dev[..take]
        .par_iter()
        .map(|item| decode_features(model, store, ema, &item.feat, search))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = CorpusCer::new();
    for (item, hyp) in dev[..take].iter().zip(&hyps) {
        acc.add(&item.tokens, &hyp.tokens)?;
    }
    acc.value()
}

#[allow(clippy::too_many_arguments)]
fn save_checkpoint(
    path: &Path,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    norm: Option<&NormStats>,
    store: &ParamStore,
    adam: &Adam,
    ema: Option<&Overlay>,
    step: usize,
    skipped: usize,
) -> Result<()> {
    let header = CheckpointHeader {
        version: 0, // filled by save
        config_toml: cfg.to_toml_string(),
        vocab_chars: vocab.chars().iter().collect(),
        norm_mean: norm.map(|n| n.mean().to_vec()),
        norm_std: norm.map(|n| n.std().to_vec()),
        step,
        seed: cfg.train.seed,
        skipped_steps: skipped,
        adam_t: 0,    // filled by save
        has_ema: false, // filled by save
        params: Vec::new(),
    };
    checkpoint::save(path, store, adam, ema, header)
}

// ---- recognizer ------------------------------------------------------------------

/// A trained system reloaded from a checkpoint: model, vocabulary,
/// normalization stats, and (when enabled) the EMA shadow weights used
/// for decoding.
pub struct Recognizer {
    pub config: TrainConfig,
    pub model: AsrModel,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub norm: Option<NormStats>,
    pub ema: Option<Overlay>,
    pub search: SearchConfig,
}

impl Recognizer {
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint_with_config(path, None)
    }

    /// `config_override` must describe the same architecture; on mismatch
    /// the error prints both shape manifests.
    pub fn from_checkpoint_with_config(
        path: &Path,
        config_override: Option<TrainConfig>,
    ) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let embedded = TrainConfig::from_toml_str(&ckpt.header.config_toml)?;
        let config = config_override.unwrap_or(embedded);

        let vocab = Vocabulary::from_chars(ckpt.header.vocab_chars.chars().collect());
        let model_cfg = config.model.resolve(vocab.size())?;
        let mut store = ParamStore::new();
        let model = AsrModel::new(&model_cfg, &mut store, 0)?;
        checkpoint::check_manifests(&store.manifest(), &ckpt.header.params)?;
        for (i, values) in ckpt.param_values.into_iter().enumerate() {
            store
                .tensor_mut(crate::model::ParamId(i))
                .data_mut()
                .copy_from_slice(&values);
        }
        let norm = match (ckpt.header.norm_mean, ckpt.header.norm_std) {
            (Some(m), Some(s)) => Some(NormStats::from_parts(m, s)?),
            _ => None,
        };
        let ema = if config.train.ema { ckpt.ema } else { None };
        let search = config.eval.search_config();
        Ok(Recognizer {
            config,
            model,
            store,
            vocab,
            norm,
            ema,
            search,
        })
    }

    /// Decodes raw (unnormalized) features with the configured search.
    pub fn decode(&self, raw: &FeatureMatrix) -> Result<DecodeOutput> {
        self.decode_with(raw, &self.search)
    }

    pub fn decode_with(&self, raw: &FeatureMatrix, search: &SearchConfig) -> Result<DecodeOutput> {
        let feat = match &self.norm {
            Some(s) => apply_norm(raw, s)?,
            None => raw.clone(),
        };
        decode_features(&self.model, &self.store, self.ema.as_ref(), &feat, search)
    }

    pub fn transcript(&self, tokens: &[usize]) -> Result<String> {
        self.vocab.decode(tokens)
    }
}

impl UttDecoder for Recognizer {
    fn decode(&self, feat: &FeatureMatrix) -> Result<TokenSequence> {
        Ok(Recognizer::decode(self, feat)?.tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydata::{generate, write_corpus, ToyTaskSpec};

    fn tiny_config(dir: &Path, encoder: EncoderKind, decoder: DecoderKind) -> TrainConfig {
        let spec = ToyTaskSpec {
            vocab_size: 4,
            min_len: 1,
            max_len: 3,
            min_frames_per_token: 4,
            max_frames_per_token: 6,
            noise: 0.05,
            seed: 11,
            wav: false,
        };
        let train = generate(&spec, 12, "tr").unwrap();
        let dev = generate(&spec, 4, "dv").unwrap();
        let train_manifest = write_corpus(&spec, &train, dir, "train.jsonl").unwrap();
        let dev_manifest = write_corpus(&spec, &dev, dir, "dev.jsonl").unwrap();
        let vocab = Vocabulary::build(train.iter().map(|u| u.transcript.as_str())).unwrap();
        let vocab_path = dir.join("vocab.txt");
        vocab.save(&vocab_path).unwrap();

        TrainConfig {
            data: DataSection {
                train_manifest,
                dev_manifest: Some(dev_manifest),
                vocab: vocab_path,
                normalize: true,
            },
            model: ModelSection {
                encoder,
                decoder,
                preset: ModelPreset::Toy,
                d_model: Some(16),
                subsample_channels: Some(2),
                num_blocks: Some(1),
                num_heads: Some(2),
                d_ffn: Some(24),
                conv_kernel: Some(3),
                dec_hidden: Some(12),
                embed_dim: Some(8),
                joint_dim: Some(12),
                attn_dim: Some(12),
                attn_heads: Some(2),
                dropout: Some(0.0),
            },
            train: TrainSection {
                out_dir: dir.join("out"),
                batch_size: 4,
                total_steps: 6,
                seed: 3,
                lr_peak: 1e-3,
                warmup_steps: 10,
                eval_every: 3,
                ..TrainSection::default()
            },
            eval: EvalSection {
                beam_width: 2,
                max_utts: Some(2),
                ..EvalSection::default()
            },
        }
    }

    #[test]
    fn config_toml_round_trip_with_defaults() {
        let text = r#"
[data]
train_manifest = "train.jsonl"
vocab = "vocab.txt"

[model]
encoder = "conformer"
decoder = "transducer"
"#;
        let cfg = TrainConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.train.total_steps, 150_000);
        assert_eq!(cfg.train.ema_decay, 0.9999);
        assert_eq!(cfg.train.vn_sigma, 0.075);
        assert_eq!(cfg.eval.beam_width, 8);
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back.train.total_steps, cfg.train.total_steps);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = r#"
[data]
train_manifest = "t"
vocab = "v"

[model]
encoder = "blstm"
decoder = "ctc"

[train]
"#;
        let bad = format!("{base}ema_decay = 1.5");
        assert!(TrainConfig::from_toml_str(&bad).is_err());
        let bad = format!("{base}lr_peak = 0.0");
        assert!(TrainConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn sa_config_defaults_follow_the_encoder() {
        let mk = |enc| {
            let text = format!(
                "[data]\ntrain_manifest=\"t\"\nvocab=\"v\"\n[model]\nencoder=\"{enc}\"\ndecoder=\"ctc\"\n"
            );
            TrainConfig::from_toml_str(&text).unwrap()
        };
        assert_eq!(mk("blstm").sa_config(), SpecAugmentConfig::blstm());
        assert_eq!(mk("conformer").sa_config(), SpecAugmentConfig::conformer());
    }

    #[test]
    fn short_training_run_writes_artifacts_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), EncoderKind::Conformer, DecoderKind::Ctc);
        let report = train(&cfg).unwrap();
        assert_eq!(report.steps, 6);
        assert!(report.checkpoint.exists());
        assert!(report.metrics.exists());
        assert!(!report.eval_history.is_empty());

        // metrics log parses line by line
        let text = std::fs::read_to_string(&report.metrics).unwrap();
        let mut step_lines = 0;
        for line in text.lines() {
            let rec: LogRecord = serde_json::from_str(line).unwrap();
            if matches!(rec, LogRecord::Step { .. }) {
                step_lines += 1;
            }
        }
        assert_eq!(step_lines, 6);

        // the checkpoint reloads into a working recognizer
        let rec = Recognizer::from_checkpoint(&report.checkpoint).unwrap();
        let spec = ToyTaskSpec {
            vocab_size: 4,
            min_len: 1,
            max_len: 2,
            noise: 0.0,
            seed: 99,
            ..ToyTaskSpec::default()
        };
        let utt = &generate(&spec, 1, "q").unwrap()[0];
        let out = rec.decode(&utt.features).unwrap();
        let _ = rec.transcript(&out.tokens).unwrap();
    }

    #[test]
    fn identical_seeds_reproduce_loss_streams() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg_a = tiny_config(dir_a.path(), EncoderKind::Blstm, DecoderKind::Ctc);
        let mut cfg_b = tiny_config(dir_b.path(), EncoderKind::Blstm, DecoderKind::Ctc);
        cfg_a.train.total_steps = 5;
        cfg_b.train.total_steps = 5;
        let ra = train(&cfg_a).unwrap();
        let rb = train(&cfg_b).unwrap();
        let losses = |p: &Path| -> Vec<f64> {
            std::fs::read_to_string(p)
                .unwrap()
                .lines()
                .filter_map(|l| match serde_json::from_str(l).unwrap() {
                    LogRecord::Step { loss, .. } => loss,
                    _ => None,
                })
                .collect()
        };
        let (la, lb) = (losses(&ra.metrics), losses(&rb.metrics));
        assert_eq!(la.len(), lb.len());
        for (a, b) in la.iter().zip(&lb) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn checkpoint_architecture_mismatch_prints_both_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), EncoderKind::Conformer, DecoderKind::Ctc);
        let report = train(&cfg).unwrap();
        let mut other = cfg.clone();
        other.model.d_model = Some(24);
        let err = match Recognizer::from_checkpoint_with_config(&report.checkpoint, Some(other)) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected an architecture mismatch"),
        };
        assert!(err.contains("mismatch"), "{err}");
        assert!(err.contains("expected") && err.contains("found"), "{err}");
    }

    #[test]
    fn vn_resamples_noise_every_step() {
        // two consecutive overlays from the step-derived rngs differ
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), EncoderKind::Blstm, DecoderKind::Ctc);
        let vocab = Vocabulary::load(&cfg.data.vocab).unwrap();
        let model_cfg = cfg.model.resolve(vocab.size()).unwrap();
        let mut store = ParamStore::new();
        let _model = AsrModel::new(&model_cfg, &mut store, 1).unwrap();
        let overlay = |step: usize| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, step, 0, TAG_VN));
            vn_overlay(&store, 0.075, &mut rng).unwrap()
        };
        let (o1, o2) = (overlay(1), overlay(2));
        let first = o1.iter().position(|x| x.is_some()).unwrap();
        assert_ne!(o1[first], o2[first]);
        // same step twice is identical (reproducibility)
        assert_eq!(o1[first], overlay(1)[first]);
    }
}
