//! Run configuration: model dimensions, loss weights, optimizer settings,
//! modality selection, and ablation switches, parsed from flat
//! `key = value` text with later sources overriding earlier ones.

use std::collections::BTreeSet;
use std::path::PathBuf;

use crate::data::{FeatureSpec, SyntheticConfig};
use crate::error::{Error, Result};

/// One input channel of an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

/// Which modalities participate in a run. The backbone modality is text
/// when present; a single non-text modality may run alone as its own
/// backbone, but two modalities without text have no anchor stream and are
/// rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modalities {
    pub text: bool,
    pub audio: bool,
    pub visual: bool,
}

impl Modalities {
    pub fn all() -> Self {
        Modalities {
            text: true,
            audio: true,
            visual: true,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut m = Modalities {
            text: false,
            audio: false,
            visual: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "t" | "text" => m.text = true,
                "a" | "audio" => m.audio = true,
                "v" | "visual" => m.visual = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown modality '{other}' (expected t, a, v)"
                    )))
                }
            }
        }
        if !m.text && !m.audio && !m.visual {
            return Err(Error::Config("no modalities selected".into()));
        }
        Ok(m)
    }

    pub fn to_string_key(&self) -> String {
        let mut parts = Vec::new();
        if self.text {
            parts.push("t");
        }
        if self.audio {
            parts.push("a");
        }
        if self.visual {
            parts.push("v");
        }
        parts.join(",")
    }

    /// The stream that anchors the model: text when active, otherwise the
    /// single remaining modality.
    pub fn backbone(&self) -> Modality {
        if self.text {
            Modality::Text
        } else if self.audio {
            Modality::Audio
        } else {
            Modality::Visual
        }
    }

    /// Auxiliary (prompt) modalities in fusion order: visual first, then
    /// audio.
    pub fn aux(&self) -> Vec<Modality> {
        let mut aux = Vec::new();
        if self.text {
            if self.visual {
                aux.push(Modality::Visual);
            }
            if self.audio {
                aux.push(Modality::Audio);
            }
        }
        aux
    }

    pub fn active(&self) -> Vec<Modality> {
        let mut v = Vec::new();
        if self.text {
            v.push(Modality::Text);
        }
        if self.audio {
            v.push(Modality::Audio);
        }
        if self.visual {
            v.push(Modality::Visual);
        }
        v
    }
}

/// Structural ablation switches. Several can be combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AblationFlags {
    /// Replace transformer fusion by concatenating the filtered auxiliary
    /// streams directly (the transformer parameters are never created).
    pub no_mpt: bool,
    /// Drop the utterance-level contrastive term and its projections.
    pub no_ucl: bool,
    /// Drop the supervised contrastive term and its projection.
    pub no_scl: bool,
    /// Skip graph enhancement: the backbone keeps its raw encoder output.
    pub no_rgcn: bool,
    /// Bypass the audio feature filter (raw encoded audio as the prompt).
    pub full_audio: bool,
    /// Bypass the visual feature filter.
    pub full_visual: bool,
}

impl AblationFlags {
    pub fn parse(s: &str) -> Result<Self> {
        let mut f = AblationFlags::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" => {}
                "no_mpt" => f.no_mpt = true,
                "no_ucl" => f.no_ucl = true,
                "no_scl" => f.no_scl = true,
                "no_rgcn" => f.no_rgcn = true,
                "full_audio" => f.full_audio = true,
                "full_visual" => f.full_visual = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation '{other}' (expected no_mpt, no_ucl, no_scl, \
                         no_rgcn, full_audio, full_visual)"
                    )))
                }
            }
        }
        Ok(f)
    }

    pub fn to_string_key(&self) -> String {
        let mut parts = Vec::new();
        if self.no_mpt {
            parts.push("no_mpt");
        }
        if self.no_ucl {
            parts.push("no_ucl");
        }
        if self.no_scl {
            parts.push("no_scl");
        }
        if self.no_rgcn {
            parts.push("no_rgcn");
        }
        if self.full_audio {
            parts.push("full_audio");
        }
        if self.full_visual {
            parts.push("full_visual");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join(",")
        }
    }
}

/// Everything a training or evaluation run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: FeatureSpec,
    /// Shared model width `d`; encoders, filters, graph layers and
    /// transformer blocks all operate at this width.
    pub model_dim: usize,
    pub heads: usize,
    /// Number of stacked transformer blocks.
    pub mpt_blocks: usize,
    /// Graph context window: edges connect utterances at distance <= window.
    pub window: usize,
    pub rgcn_layers: usize,
    /// Speaker count for relation indexing (speaker ids are folded mod this).
    pub max_speakers: usize,
    pub dropout: f64,
    pub lr: f64,
    pub lambda_scl: f64,
    pub lambda_ucl: f64,
    pub tau: f64,
    pub epochs: usize,
    /// Conversations per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub modalities: Modalities,
    pub ablate: AblationFlags,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    /// IEMOCAP-profile defaults.
    fn default() -> Self {
        RunConfig {
            spec: FeatureSpec::iemocap(),
            model_dim: 40,
            heads: 5,
            mpt_blocks: 5,
            window: 2,
            rgcn_layers: 1,
            max_speakers: 2,
            dropout: 0.2,
            lr: 1e-4,
            lambda_scl: crate::losses::DEFAULT_LAMBDA_SCL,
            lambda_ucl: crate::losses::DEFAULT_LAMBDA_UCL,
            tau: crate::losses::DEFAULT_TAU,
            epochs: 300,
            batch_size: 4,
            seed: 0,
            modalities: Modalities::all(),
            ablate: AblationFlags::default(),
            train_data: None,
            val_data: None,
            out_dir: None,
        }
    }
}

/// Parse flat `key = value` text: one pair per line, `#` starts a comment,
/// blank lines skipped. Duplicate keys within one source are rejected.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if !seen.insert(key.clone()) {
            return Err(Error::Config(format!(
                "line {}: duplicate key '{key}'",
                lineno + 1
            )));
        }
        pairs.push((key, value));
    }
    Ok(pairs)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{value}'")))
}

impl RunConfig {
    /// Switch dataset profile: feature widths, class count, speaker count,
    /// and the profile's learning rate.
    pub fn apply_profile(&mut self, name: &str) -> Result<()> {
        match name {
            "iemocap" => {
                self.spec = FeatureSpec::iemocap();
                self.lr = 1e-4;
                self.max_speakers = 2;
            }
            "meld" => {
                self.spec = FeatureSpec::meld();
                self.lr = 3e-4;
                self.max_speakers = 9;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown profile '{other}' (expected iemocap or meld)"
                )))
            }
        }
        Ok(())
    }

    /// Apply one `key = value` setting. Keys are applied in order, so a
    /// `profile` key should come before the keys it would otherwise reset.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "profile" => self.apply_profile(value)?,
            "text_dim" => self.spec.d_text = parse_num(key, value)?,
            "audio_dim" => self.spec.d_audio = parse_num(key, value)?,
            "visual_dim" => self.spec.d_visual = parse_num(key, value)?,
            "classes" => self.spec.classes = parse_num(key, value)?,
            "model_dim" => self.model_dim = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "mpt_blocks" => self.mpt_blocks = parse_num(key, value)?,
            "window" => self.window = parse_num(key, value)?,
            "rgcn_layers" => self.rgcn_layers = parse_num(key, value)?,
            "max_speakers" => self.max_speakers = parse_num(key, value)?,
            "dropout" => self.dropout = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "lambda_scl" => self.lambda_scl = parse_num(key, value)?,
            "lambda_ucl" => self.lambda_ucl = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "modalities" => self.modalities = Modalities::parse(value)?,
            "ablate" => self.ablate = AblationFlags::parse(value)?,
            "train_data" => self.train_data = Some(PathBuf::from(value)),
            "val_data" => self.val_data = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.apply(&k, &v)?;
        }
        Ok(())
    }

    /// Serialize every setting (fully resolved — no `profile` key) in a
    /// fixed order, suitable for checkpoint manifests.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = vec![
            ("text_dim".into(), self.spec.d_text.to_string()),
            ("audio_dim".into(), self.spec.d_audio.to_string()),
            ("visual_dim".into(), self.spec.d_visual.to_string()),
            ("classes".into(), self.spec.classes.to_string()),
            ("model_dim".into(), self.model_dim.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("mpt_blocks".into(), self.mpt_blocks.to_string()),
            ("window".into(), self.window.to_string()),
            ("rgcn_layers".into(), self.rgcn_layers.to_string()),
            ("max_speakers".into(), self.max_speakers.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("lambda_scl".into(), self.lambda_scl.to_string()),
            ("lambda_ucl".into(), self.lambda_ucl.to_string()),
            ("tau".into(), self.tau.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("modalities".into(), self.modalities.to_string_key()),
            ("ablate".into(), self.ablate.to_string_key()),
        ];
        // Paths are machine-local; persist them only when set.
        if let Some(p) = &self.train_data {
            kv.push(("train_data".into(), p.display().to_string()));
        }
        if let Some(p) = &self.val_data {
            kv.push(("val_data".into(), p.display().to_string()));
        }
        if let Some(p) = &self.out_dir {
            kv.push(("out_dir".into(), p.display().to_string()));
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let d = self.model_dim;
        if d < 4 {
            return Err(Error::Config(format!(
                "model_dim must be at least 4 (bottleneck width d/4), got {d}"
            )));
        }
        if d % 2 != 0 {
            return Err(Error::Config(format!(
                "model_dim must be even (two encoder directions), got {d}"
            )));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {d} must divide into heads {}",
                self.heads
            )));
        }
        if self.mpt_blocks == 0 {
            return Err(Error::Config("mpt_blocks must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if self.rgcn_layers == 0 {
            return Err(Error::Config("rgcn_layers must be at least 1".into()));
        }
        if self.max_speakers == 0 {
            return Err(Error::Config("max_speakers must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.lambda_scl < 0.0 || self.lambda_ucl < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let m = self.modalities;
        if !m.text && m.audio && m.visual {
            return Err(Error::Config(
                "audio+visual without text has no backbone stream; select text \
                 or a single modality"
                    .into(),
            ));
        }
        if self.ablate.full_audio && !(m.text && m.audio) {
            return Err(Error::Config(
                "full_audio requires audio as an auxiliary modality".into(),
            ));
        }
        if self.ablate.full_visual && !(m.text && m.visual) {
            return Err(Error::Config(
                "full_visual requires visual as an auxiliary modality".into(),
            ));
        }
        Ok(())
    }

    /// Feature width of one modality in the input data.
    pub fn input_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.spec.d_text,
            Modality::Audio => self.spec.d_audio,
            Modality::Visual => self.spec.d_visual,
        }
    }

    /// Width of the fused auxiliary block: one model width per auxiliary
    /// modality, zero when the backbone runs alone.
    pub fn fused_dim(&self) -> usize {
        self.modalities.aux().len() * self.model_dim
    }

    /// Width of the classifier input: backbone plus fused block.
    pub fn fusion_dim(&self) -> usize {
        self.model_dim + self.fused_dim()
    }

    /// Whether the utterance-level contrastive term is active.
    pub fn ucl_active(&self) -> bool {
        !self.ablate.no_ucl && !self.modalities.aux().is_empty()
    }

    /// Whether the supervised contrastive term is active.
    pub fn scl_active(&self) -> bool {
        !self.ablate.no_scl && !self.modalities.aux().is_empty()
    }
}

/// Build a synthetic-data configuration from `key = value` text.
pub fn synthetic_from_kv(text: &str) -> Result<SyntheticConfig> {
    let mut cfg = SyntheticConfig::default();
    for (key, value) in parse_kv(text)? {
        match key.as_str() {
            "conversations" => cfg.conversations = parse_num(&key, &value)?,
            "min_len" => cfg.min_len = parse_num(&key, &value)?,
            "max_len" => cfg.max_len = parse_num(&key, &value)?,
            "classes" => cfg.classes = parse_num(&key, &value)?,
            "speakers" => cfg.speakers = parse_num(&key, &value)?,
            "d_text" => cfg.d_text = parse_num(&key, &value)?,
            "d_audio" => cfg.d_audio = parse_num(&key, &value)?,
            "d_visual" => cfg.d_visual = parse_num(&key, &value)?,
            "class_sep" => cfg.class_sep = parse_num(&key, &value)?,
            "cross_modal" => cfg.cross_modal = parse_num(&key, &value)?,
            "noise" => cfg.noise = parse_num(&key, &value)?,
            "label_inertia" => cfg.label_inertia = parse_num(&key, &value)?,
            "seed" => cfg.seed = parse_num(&key, &value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown synthetic-data key '{other}'"
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

// ===== Tests =====
