//! Dataset model, line-delimited storage, synthetic data, and batching.
//!
//! A dataset is a sequence of conversations; each conversation carries
//! per-utterance speaker ids, label ids, and one feature vector per modality
//! (text / audio / visual). On disk the format is UTF-8 JSON, one
//! conversation object per line:
//!
//! ```json
//! {"id":"c0","speakers":[0,1],"labels":[2,0],
//!  "text":[[...],[...]],"audio":[[...],[...]],"visual":[[...],[...]]}
//! ```
//!
//! Feature widths and the label range are validated against a
//! [`FeatureSpec`] at load time; errors name the conversation, utterance and
//! offending dimension so bad files are diagnosable.

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

// ===== Schema =====

/// Expected feature widths and label count for a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub d_text: usize,
    pub d_audio: usize,
    pub d_visual: usize,
    /// Number of emotion classes.
    pub classes: usize,
}

impl FeatureSpec {
    /// IEMOCAP-style extraction widths: RoBERTa text, IS10 audio, 3D-CNN
    /// visual, six classes.
    pub fn iemocap() -> FeatureSpec {
        FeatureSpec {
            d_text: 1024,
            d_audio: 1582,
            d_visual: 342,
            classes: 6,
        }
    }

    /// MELD-style extraction widths: seven classes, compact audio features.
    pub fn meld() -> FeatureSpec {
        FeatureSpec {
            d_text: 1024,
            d_audio: 300,
            d_visual: 342,
            classes: 7,
        }
    }

    /// Parse a profile selector: `iemocap`, `meld`, or
    /// `custom:D_TEXT,D_AUDIO,D_VISUAL,CLASSES`.
    pub fn parse_profile(s: &str) -> Result<FeatureSpec> {
        match s {
            "iemocap" => Ok(FeatureSpec::iemocap()),
            "meld" => Ok(FeatureSpec::meld()),
            other => {
                let rest = other.strip_prefix("custom:").ok_or_else(|| {
                    Error::Config(format!(
                        "unknown feature profile {other:?}; expected iemocap, meld, or custom:DT,DA,DV,CLASSES"
                    ))
                })?;
                let parts: Vec<&str> = rest.split(',').collect();
                if parts.len() != 4 {
                    return Err(Error::Config(format!(
                        "custom profile needs 4 comma-separated integers, got {rest:?}"
                    )));
                }
                let mut vals = [0usize; 4];
                for (i, p) in parts.iter().enumerate() {
                    vals[i] = p.trim().parse().map_err(|_| {
                        Error::Config(format!("custom profile field {i} is not an integer: {p:?}"))
                    })?;
                }
                let spec = FeatureSpec {
                    d_text: vals[0],
                    d_audio: vals[1],
                    d_visual: vals[2],
                    classes: vals[3],
                };
                spec.validate()?;
                Ok(spec)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_text == 0 || self.d_audio == 0 || self.d_visual == 0 {
            return Err(Error::Config(
                "feature dimensions must all be positive".into(),
            ));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }
}

/// One conversation: utterance-aligned speakers, labels, and per-modality
/// feature rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub speakers: Vec<usize>,
    pub labels: Vec<usize>,
    pub text: Vec<Vec<f64>>,
    pub audio: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
}

impl Conversation {
    /// Number of utterances.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Check internal consistency against a [`FeatureSpec`].
    pub fn validate(&self, spec: &FeatureSpec) -> Result<()> {
        let l = self.labels.len();
        if l == 0 {
            return Err(Error::Data(format!(
                "conversation {}: empty conversations are not allowed",
                self.id
            )));
        }
        for (field, n) in [
            ("speakers", self.speakers.len()),
            ("text", self.text.len()),
            ("audio", self.audio.len()),
            ("visual", self.visual.len()),
        ] {
            if n != l {
                return Err(Error::Data(format!(
                    "conversation {}: {field} has {n} entries but there are {l} labels",
                    self.id
                )));
            }
        }
        for (i, &y) in self.labels.iter().enumerate() {
            if y >= spec.classes {
                return Err(Error::Data(format!(
                    "conversation {} utterance {i}: label {y} out of range for {} classes",
                    self.id, spec.classes
                )));
            }
        }
        for (modality, rows, want) in [
            ("text", &self.text, spec.d_text),
            ("audio", &self.audio, spec.d_audio),
            ("visual", &self.visual, spec.d_visual),
        ] {
            for (i, row) in rows.iter().enumerate() {
                if row.len() != want {
                    return Err(Error::Data(format!(
                        "conversation {} utterance {i}: {modality} feature dim {} != expected {want}",
                        self.id,
                        row.len()
                    )));
                }
                if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Data(format!(
                        "conversation {} utterance {i}: {modality} contains non-finite value {bad}",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

// ===== Storage =====

/// Load and validate a line-delimited dataset.
pub fn load_dataset(path: impl AsRef<Path>, spec: &FeatureSpec) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Data(format!("cannot open dataset {}: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!(
                "{}:{}: malformed conversation record: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        conv.validate(spec)?;
        out.push(conv);
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "dataset {} contains no conversations",
            path.display()
        )));
    }
    Ok(out)
}

/// Write a dataset in the line-delimited format. Finite f64 values survive a
/// save/load round trip exactly.
pub fn save_dataset(path: impl AsRef<Path>, convs: &[Conversation]) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    for conv in convs {
        let line = serde_json::to_string(conv)
            .map_err(|e| Error::Data(format!("cannot serialize conversation {}: {e}", conv.id)))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

// ===== Synthetic data =====

/// Generator settings for seeded synthetic conversations.
///
/// Each class gets one fixed unit mean direction per modality. The
/// `cross_modal` fraction routes label signal away from text: at 0.0 the
/// class signal lives entirely in the text features, at 1.0 entirely in
/// audio and visual, with text pure noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub conversations: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub classes: usize,
    pub speakers: usize,
    pub d_text: usize,
    pub d_audio: usize,
    pub d_visual: usize,
    /// Magnitude of the class mean relative to unit feature noise.
    pub class_sep: f64,
    /// Fraction of label signal carried only by audio/visual, in [0, 1].
    pub cross_modal: f64,
    /// Std of the i.i.d. noise added to every feature entry.
    pub noise: f64,
    /// Probability that an utterance repeats the previous utterance's label
    /// (emotional inertia). 0 draws every label independently; the marginal
    /// class distribution stays uniform for any value.
    #[serde(default)]
    pub label_inertia: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            conversations: 40,
            min_len: 6,
            max_len: 10,
            classes: 3,
            speakers: 2,
            d_text: 24,
            d_audio: 20,
            d_visual: 16,
            class_sep: 3.0,
            cross_modal: 0.0,
            noise: 1.0,
            label_inertia: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec {
            d_text: self.d_text,
            d_audio: self.d_audio,
            d_visual: self.d_visual,
            classes: self.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conversations == 0 {
            return Err(Error::Config("need at least one conversation".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.speakers == 0 {
            return Err(Error::Config("need at least one speaker".into()));
        }
        if !(0.0..=1.0).contains(&self.cross_modal) {
            return Err(Error::Config(format!(
                "cross_modal must be in [0, 1], got {}",
                self.cross_modal
            )));
        }
        if !(self.class_sep >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config(
                "class_sep and noise must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.label_inertia) {
            return Err(Error::Config(format!(
                "label_inertia must be in [0, 1], got {}",
                self.label_inertia
            )));
        }
        self.feature_spec().validate()
    }
}

fn unit_direction<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v = crate::tensor::Array::rand_normal(&[d], 0.0, 1.0, rng);
        let norm = v.data().iter().map(|e| e * e).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.data().iter().map(|e| e / norm).collect();
        }
    }
}

/// Generate a deterministic synthetic dataset. Labels and speakers are drawn
/// uniformly; features are `strength * class_direction + noise`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Conversation>> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, Stream::Synthetic);

    let text_strength = cfg.class_sep * (1.0 - cfg.cross_modal);
    let av_strength = cfg.class_sep * cfg.cross_modal;

    // Fixed per-dataset class directions, one per (class, modality).
    let dirs_text: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| unit_direction(cfg.d_text, &mut rng))
        .collect();
    let dirs_audio: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| unit_direction(cfg.d_audio, &mut rng))
        .collect();
    let dirs_visual: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| unit_direction(cfg.d_visual, &mut rng))
        .collect();

    let mut out = Vec::with_capacity(cfg.conversations);
    for c in 0..cfg.conversations {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let speakers: Vec<usize> = (0..len).map(|_| rng.gen_range(0..cfg.speakers)).collect();
        let mut labels: Vec<usize> = Vec::with_capacity(len);
        for _ in 0..len {
            // Sticky chain: repeating the previous label with probability
            // `label_inertia` keeps the stationary distribution uniform.
            // The inertia check comes first so a 0 setting draws exactly
            // the same random stream as plain independent sampling.
            let label = match labels.last() {
                Some(&prev) if cfg.label_inertia > 0.0 && rng.gen_bool(cfg.label_inertia) => prev,
                _ => rng.gen_range(0..cfg.classes),
            };
            labels.push(label);
        }
        let feature = |dir: &[f64], strength: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            dir.iter()
                .map(|&mu| {
                    let noise: f64 = crate::tensor::Array::rand_normal(&[1], 0.0, 1.0, rng).data()[0];
                    strength * mu + cfg.noise * noise
                })
                .collect::<Vec<f64>>()
        };
        let text = labels
            .iter()
            .map(|&y| feature(&dirs_text[y], text_strength, &mut rng))
            .collect();
        let audio = labels
            .iter()
            .map(|&y| feature(&dirs_audio[y], av_strength, &mut rng))
            .collect();
        let visual = labels
            .iter()
            .map(|&y| feature(&dirs_visual[y], av_strength, &mut rng))
            .collect();
        out.push(Conversation {
            id: format!("syn-{c:04}"),
            speakers,
            labels,
            text,
            audio,
            visual,
        });
    }
    Ok(out)
}

// ===== Batching =====

/// Split `0..n` into batches of whole-conversation indices. With a shuffle
/// seed the order is a seeded permutation; without, insertion order. Every
/// index appears in exactly one batch; the final batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = rng_for(seed, Stream::Shuffle);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}

// ===== Tests =====
