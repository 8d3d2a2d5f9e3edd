//! Evaluation metrics: character error rate, decoding real-time factor
//! (batch 1, single-threaded, CPU), and training throughput in utt/sec.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::vocab::TokenSequence;

/// Levenshtein distance with unit substitution/insertion/deletion costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// `edits / |ref|`; the reference must be nonempty.
pub fn cer(reference: &TokenSequence, hypothesis: &TokenSequence) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("cer: empty reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus-level CER accumulator: total edits over total reference length.
#[derive(Debug, Default, Clone, Copy)]
pub struct CorpusCer {
    edits: usize,
    ref_len: usize,
}

impl CorpusCer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<T: PartialEq>(&mut self, reference: &[T], hypothesis: &[T]) -> Result<()> {
        if reference.is_empty() {
            return Err(Error::invalid("cer: empty reference"));
        }
        self.edits += edit_distance(reference, hypothesis);
        self.ref_len += reference.len();
        Ok(())
    }

    pub fn merge(&mut self, other: CorpusCer) {
        self.edits += other.edits;
        self.ref_len += other.ref_len;
    }

    pub fn value(&self) -> Result<f64> {
        if self.ref_len == 0 {
            return Err(Error::invalid("cer: no reference characters"));
        }
        Ok(self.edits as f64 / self.ref_len as f64)
    }

    pub fn utterances_counted(&self) -> usize {
        self.ref_len
    }
}

/// Anything that turns features into a token sequence; lets the bench
/// harness run against real recognizers and controlled fakes alike.
pub trait UttDecoder {
    fn decode(&self, feat: &FeatureMatrix) -> Result<TokenSequence>;
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct UttTiming {
    pub id: String,
    pub audio_seconds: f64,
    pub decode_wall_seconds: f64,
    pub rtf: f64,
}

/// Real-time-factor report: per-utterance rows plus aggregates.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchReport {
    pub per_utterance: Vec<UttTiming>,
    pub mean_rtf: f64,
    pub stddev_rtf: f64,
    pub utt_per_sec: f64,
    pub cer: Option<f64>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,audio_seconds,decode_wall_seconds,rtf\n");
        for u in &self.per_utterance {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                u.id, u.audio_seconds, u.decode_wall_seconds, u.rtf
            ));
        }
        s
    }

    pub fn summary(&self) -> String {
        let cer = match self.cer {
            Some(c) => format!("{:.2}%", c * 100.0),
            None => "-".to_string(),
        };
        format!(
            "utterances: {}\nmean RTF:   {:.4}\nstddev RTF: {:.4}\ndecode utt/sec: {:.2}\nCER: {cer}",
            self.per_utterance.len(),
            self.mean_rtf,
            self.stddev_rtf,
            self.utt_per_sec,
        )
    }
}

/// One utterance of bench input: features plus an optional reference.
pub struct BenchItem {
    pub id: String,
    pub features: FeatureMatrix,
    pub reference: Option<TokenSequence>,
}

/// Decodes the corpus one utterance at a time on the calling thread,
/// timing from feature-ready to final hypothesis (feature extraction and
/// I/O stay outside the clock). One warm-up decode amortizes one-time
/// allocations.
pub fn measure_rtf<D: UttDecoder>(decoder: &D, corpus: &[BenchItem]) -> Result<BenchReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("measure_rtf: empty corpus"));
    }
    let _ = decoder.decode(&corpus[0].features)?; // warm-up, untimed

    let mut rows = Vec::with_capacity(corpus.len());
    let mut cer_acc = CorpusCer::new();
    let mut have_refs = true;
    let mut total_wall = 0.0;
    for item in corpus {
        let start = Instant::now();
        let hyp = decoder.decode(&item.features)?;
        let wall = start.elapsed().as_secs_f64();
        total_wall += wall;
        let audio = item.features.audio_seconds();
        if audio <= 0.0 {
            return Err(Error::invalid(format!(
                "measure_rtf: utterance {} has no audio span",
                item.id
            )));
        }
        rows.push(UttTiming {
            id: item.id.clone(),
            audio_seconds: audio,
            decode_wall_seconds: wall,
            rtf: wall / audio,
        });
        match &item.reference {
            Some(r) => cer_acc.add(r, &hyp)?,
            None => have_refs = false,
        }
    }
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.rtf).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r.rtf - mean).powi(2)).sum::<f64>() / n;
    Ok(BenchReport {
        mean_rtf: mean,
        stddev_rtf: var.sqrt(),
        utt_per_sec: n / total_wall,
        cer: if have_refs { Some(cer_acc.value()?) } else { None },
        per_utterance: rows,
    })
}

/// Training throughput over a warm window: the first `warmup_steps`
/// recorded steps are excluded, and utterances are divided by the wall
/// time spanned by the remaining steps.
#[derive(Debug)]
pub struct ThroughputMeter {
    warmup_steps: usize,
    marks: Vec<(Instant, usize)>,
}

impl ThroughputMeter {
    pub fn new(warmup_steps: usize) -> Self {
        ThroughputMeter {
            warmup_steps,
            marks: Vec::new(),
        }
    }

    /// Call once per completed step with the number of utterances in it.
    pub fn record_step(&mut self, utterances: usize) {
        self.marks.push((Instant::now(), utterances));
    }

    pub fn steps_recorded(&self) -> usize {
        self.marks.len()
    }

    /// Utterances per wall second over the post-warmup window.
    pub fn utt_per_sec(&self) -> Result<f64> {
        if self.marks.len() < self.warmup_steps + 2 {
            return Err(Error::invalid(format!(
                "throughput: window too short ({} steps recorded, warmup {})",
                self.marks.len(),
                self.warmup_steps
            )));
        }
        let window = &self.marks[self.warmup_steps..];
        // the first mark in the window opens it; its utterances were
        // processed before, so only later steps count
        let utts: usize = window[1..].iter().map(|(_, n)| n).sum();
        if utts == 0 {
            return Err(Error::invalid("throughput: zero utterances in window"));
        }
        let secs = window[window.len() - 1].0.duration_since(window[0].0).as_secs_f64();
        if secs <= 0.0 {
            return Err(Error::invalid("throughput: empty time window"));
        }
        Ok(utts as f64 / secs)
    }
}
