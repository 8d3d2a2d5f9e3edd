//! Synthetic desk-scale corpus: each character renders as a distinct
//! frequency-band template repeated for a random number of frames, plus
//! Gaussian noise. Noiseless utterances are exactly recoverable by
//! per-frame nearest-template classification, so the Bayes-optimal CER of
//! the clean task is zero.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, Waveform, NUM_MELS};
use crate::manifest::{Manifest, ManifestEntry};

/// Characters available to toy vocabularies, in id order.
pub const TOY_CHARS: &[char] = &[
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p', 'q', 'r',
    's', 't', 'u', 'v', 'w', 'x', 'y', 'z',
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
    /// Render pure-tone WAV audio instead of writing features directly.
    pub wav: bool,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            vocab_size: 12,
            min_len: 3,
            max_len: 8,
            min_frames_per_token: 4,
            max_frames_per_token: 8,
            noise: 0.1,
            seed: 0,
            wav: false,
        }
    }
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.vocab_size > TOY_CHARS.len() {
            return Err(Error::Config(format!(
                "toy: vocab_size must be 1..={}, got {}",
                TOY_CHARS.len(),
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config("toy: bad utterance length range".into()));
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return Err(Error::Config("toy: bad frames-per-token range".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("toy: negative noise".into()));
        }
        Ok(())
    }

    /// Spectral template for character index `i`: a raised band over an
    /// otherwise low floor.
    pub fn template(&self, i: usize) -> [f64; NUM_MELS] {
        let mut t = [-1.0; NUM_MELS];
        let lo = i * NUM_MELS / self.vocab_size;
        let hi = (i + 1) * NUM_MELS / self.vocab_size;
        for v in t.iter_mut().take(hi).skip(lo) {
            *v = 1.5;
        }
        t
    }

    /// Index of the nearest template for one frame (ties toward the
    /// lowest index).
    pub fn classify_frame(&self, frame: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.vocab_size {
            let t = self.template(i);
            let d: f64 = frame.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

/// One generated utterance.
#[derive(Debug, Clone)]
pub struct ToyUtterance {
    pub id: String,
    pub transcript: String,
    pub features: FeatureMatrix,
    /// Present only in WAV mode.
    pub waveform: Option<Waveform>,
}

/// Deterministic given the spec's seed; `prefix` keeps train/eval ids
/// distinct.
pub fn generate(spec: &ToyTaskSpec, n: usize, prefix: &str) -> Result<Vec<ToyUtterance>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("toy: n must be >= 1"));
    }
    let mut hasher_seed = spec.seed;
    for b in prefix.bytes() {
        hasher_seed = hasher_seed.wrapping_mul(0x100000001b3) ^ b as u64;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hasher_seed);
    let noise = if spec.noise > 0.0 {
        Some(Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(n);
    for idx in 0..n {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let chars: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
        let transcript: String = chars.iter().map(|&c| TOY_CHARS[c]).collect();
        let frames_per: Vec<usize> = (0..len)
            .map(|_| rng.gen_range(spec.min_frames_per_token..=spec.max_frames_per_token))
            .collect();

        let (features, waveform) = if spec.wav {
            let wav = render_tones(spec, &chars, &frames_per);
            (crate::features::extract_logmel(&wav)?, Some(wav))
        } else {
            let total: usize = frames_per.iter().sum();
            let mut data = Vec::with_capacity(total * NUM_MELS);
            for (ci, &c) in chars.iter().enumerate() {
                let t = spec.template(c);
                for _ in 0..frames_per[ci] {
                    for &v in &t {
                        let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
                        data.push(v + n);
                    }
                }
            }
            (FeatureMatrix::new(total, data)?, None)
        };
        out.push(ToyUtterance {
            id: format!("{prefix}{idx:05}"),
            transcript,
            features,
            waveform,
        });
    }
    Ok(out)
}

/// Pure tone per character: 400 Hz + 200 Hz per index at 16 kHz, each
/// token lasting its frame count times the 10 ms hop.
fn render_tones(spec: &ToyTaskSpec, chars: &[usize], frames_per: &[usize]) -> Waveform {
    let sr = 16000u32;
    let hop = 160usize;
    // pad by one window so the last token is fully covered by frames
    let total_samples: usize = frames_per.iter().map(|f| f * hop).sum::<usize>() + 480;
    let mut samples = Vec::with_capacity(total_samples);
    for (ci, &c) in chars.iter().enumerate() {
        let hz = 400.0 + 200.0 * c as f64;
        let n = frames_per[ci] * hop;
        for i in 0..n {
            samples.push(0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / sr as f64).sin());
        }
    }
    samples.resize(total_samples, 0.0);
    let _ = spec;
    Waveform::new(samples, sr).expect("tone synthesis is finite")
}

/// Writes utterances and a manifest under `dir`; returns the manifest path.
pub fn write_corpus(
    spec: &ToyTaskSpec,
    utterances: &[ToyUtterance],
    dir: &Path,
    manifest_name: &str,
) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(utterances.len());
    for u in utterances {
        let entry = if spec.wav {
            let rel = format!("{}.wav", u.id);
            u.waveform
                .as_ref()
                .expect("wav mode keeps waveforms")
                .write_wav(&dir.join(&rel))?;
            ManifestEntry {
                id: u.id.clone(),
                features: None,
                audio: Some(rel.into()),
                text: u.transcript.clone(),
            }
        } else {
            let rel = format!("{}.feat", u.id);
            u.features.save(&dir.join(&rel))?;
            ManifestEntry {
                id: u.id.clone(),
                features: Some(rel.into()),
                audio: None,
                text: u.transcript.clone(),
            }
        };
        entries.push(entry);
    }
    let path = dir.join(manifest_name);
    Manifest::save(&path, &entries)?;
    Ok(path)
}
