//! Model, training and data-generation settings, plus the flat `key = value`
//! file format that carries them.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result, SsgaError};

/// Cosine-similarity threshold for the early stop, or the never-stop sentinel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StopThreshold {
    Cosine(f64),
    Never,
}

impl StopThreshold {
    /// Any finite threshold is accepted; values below -1 always stop.
    pub fn validate(self) -> Result<Self> {
        match self {
            StopThreshold::Cosine(d) if !d.is_finite() => {
                Err(SsgaError::Config(format!("delta must be finite, got {d}")))
            }
            other => Ok(other),
        }
    }
}

impl fmt::Display for StopThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopThreshold::Cosine(d) => write!(f, "{d}"),
            StopThreshold::Never => write!(f, "never"),
        }
    }
}

impl FromStr for StopThreshold {
    type Err = SsgaError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("never") || s.eq_ignore_ascii_case("never-stop") {
            return Ok(StopThreshold::Never);
        }
        let d: f64 = s
            .parse()
            .map_err(|_| SsgaError::Config(format!("invalid delta '{s}'")))?;
        StopThreshold::Cosine(d).validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsgaConfig {
    pub num_stages: usize,
    pub alpha: f64,
    pub beta_schedule: Vec<f64>,
    pub delta: StopThreshold,
    pub stop_criterion: String,
    pub num_queries: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub num_heads: usize,
    pub decoder_layers: usize,
    pub pool_size: usize,
    pub sampling_order: String,
    pub sampling_seed: u64,
}

impl Default for SsgaConfig {
    fn default() -> Self {
        Self {
            num_stages: 4,
            alpha: 1.0,
            beta_schedule: vec![1.5; 4],
            delta: StopThreshold::Cosine(0.9),
            stop_criterion: "cosine".into(),
            num_queries: 32,
            num_classes: 4,
            embed_dim: 64,
            feature_dim: 64,
            num_heads: 4,
            decoder_layers: 2,
            pool_size: 4,
            sampling_order: "descending".into(),
            sampling_seed: 0,
        }
    }
}

impl SsgaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SsgaError::Config(m));
        if self.num_stages == 0 {
            return bad("num_stages must be at least 1".into());
        }
        if self.beta_schedule.len() != self.num_stages {
            return bad(format!(
                "beta_schedule has {} entries for {} stages",
                self.beta_schedule.len(),
                self.num_stages
            ));
        }
        if self.beta_schedule.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return bad("beta values must be positive".into());
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite".into());
        }
        self.delta.validate()?;
        if self.pool_size == 0 {
            return bad("pool_size must be at least 1".into());
        }
        for (name, v) in [
            ("num_queries", self.num_queries),
            ("num_classes", self.num_classes),
            ("embed_dim", self.embed_dim),
            ("feature_dim", self.feature_dim),
            ("num_heads", self.num_heads),
            ("decoder_layers", self.decoder_layers),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        Ok(())
    }

    /// Sets one field from its textual form. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "num_stages" => {
                let l: usize = parse(key, value)?;
                if self.beta_schedule.iter().all(|b| *b == self.beta_schedule[0]) {
                    let b = self.beta_schedule.first().copied().unwrap_or(1.5);
                    self.beta_schedule = vec![b; l];
                }
                self.num_stages = l;
            }
            "alpha" => self.alpha = parse(key, value)?,
            "beta_schedule" | "beta" => {
                let betas = value
                    .split(',')
                    .map(|v| parse::<f64>(key, v))
                    .collect::<Result<Vec<_>>>()?;
                self.beta_schedule = if betas.len() == 1 {
                    vec![betas[0]; self.num_stages]
                } else {
                    betas
                };
            }
            "delta" => self.delta = value.parse()?,
            "stop_criterion" => self.stop_criterion = value.to_string(),
            "num_queries" => self.num_queries = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "num_heads" => self.num_heads = parse(key, value)?,
            "decoder_layers" => self.decoder_layers = parse(key, value)?,
            "pool_size" => self.pool_size = parse(key, value)?,
            "sampling_order" => self.sampling_order = value.to_string(),
            "sampling_seed" => self.sampling_seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let betas: Vec<String> = self.beta_schedule.iter().map(|b| format!("{b}")).collect();
        let mut s = String::new();
        let _ = writeln!(s, "num_stages = {}", self.num_stages);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "beta_schedule = {}", betas.join(","));
        let _ = writeln!(s, "delta = {}", self.delta);
        let _ = writeln!(s, "stop_criterion = {}", self.stop_criterion);
        let _ = writeln!(s, "num_queries = {}", self.num_queries);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "embed_dim = {}", self.embed_dim);
        let _ = writeln!(s, "feature_dim = {}", self.feature_dim);
        let _ = writeln!(s, "num_heads = {}", self.num_heads);
        let _ = writeln!(s, "decoder_layers = {}", self.decoder_layers);
        let _ = writeln!(s, "pool_size = {}", self.pool_size);
        let _ = writeln!(s, "sampling_order = {}", self.sampling_order);
        let _ = writeln!(s, "sampling_seed = {}", self.sampling_seed);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub class_weight: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    pub no_object_weight: f64,
    /// Random flips / transposes of whole clips.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 4,
            lr: 3e-4,
            weight_decay: 1e-4,
            max_grad_norm: 1.0,
            class_weight: 2.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
            no_object_weight: 0.1,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "max_grad_norm" => self.max_grad_norm = parse(key, value)?,
            "class_weight" => self.class_weight = parse(key, value)?,
            "l1_weight" => self.l1_weight = parse(key, value)?,
            "giou_weight" => self.giou_weight = parse(key, value)?,
            "no_object_weight" => self.no_object_weight = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "train_seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Synthetic benchmark layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_clips: usize,
    pub val_clips: usize,
    pub num_frames: usize,
    pub frame_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_classes: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub slow_speed: (f64, f64),
    pub fast_speed: (f64, f64),
    pub blur_per_speed: f64,
    pub defocus_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_clips: 60,
            val_clips: 20,
            num_frames: 16,
            frame_size: 64,
            min_objects: 1,
            max_objects: 3,
            num_classes: 4,
            min_size: 0.12,
            max_size: 0.3,
            slow_speed: (0.0, 0.01),
            fast_speed: (0.04, 0.08),
            blur_per_speed: 1.0,
            defocus_prob: 0.25,
        }
    }
}

impl DataConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "train_clips" => self.train_clips = parse(key, value)?,
            "val_clips" => self.val_clips = parse(key, value)?,
            "num_frames" => self.num_frames = parse(key, value)?,
            "frame_size" => self.frame_size = parse(key, value)?,
            "min_objects" => self.min_objects = parse(key, value)?,
            "max_objects" => self.max_objects = parse(key, value)?,
            "min_size" => self.min_size = parse(key, value)?,
            "max_size" => self.max_size = parse(key, value)?,
            "slow_speed" => self.slow_speed = parse_pair(key, value)?,
            "fast_speed" => self.fast_speed = parse_pair(key, value)?,
            "blur_per_speed" => self.blur_per_speed = parse(key, value)?,
            "defocus_prob" => self.defocus_prob = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Everything a `key = value` config file can set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub model: SsgaConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ConfigFile {
    /// Splits `key = value` lines. `#` starts a comment; blank lines are ignored.
    pub fn pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SsgaError::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
            })?;
            out.push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in Self::pairs(text)? {
            if key == "num_classes" {
                cfg.data.num_classes = parse(&key, &value)?;
            }
            let known = cfg.model.set(&key, &value)? | cfg.train.set(&key, &value)? | cfg.data.set(&key, &value)?;
            if !known {
                return Err(SsgaError::Config(format!("unknown key '{key}'")));
            }
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| SsgaError::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = value.split(',').collect();
    if parts.len() != 2 {
        return Err(SsgaError::Config(format!("'{key}' expects 'lo,hi'")));
    }
    Ok((parse(key, parts[0])?, parse(key, parts[1])?))
}
