//! Run configuration: flat `key = value` text with `[section]` headers.
//! Every constant the trainer uses lives here so runs are auditable; the
//! canonical serialization is echoed into run logs and hashed into
//! checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskMode {
    Au,
    Palsy,
}

impl TaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskMode::Au => "au",
            TaskMode::Palsy => "palsy",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiceDenominator {
    SumSquares,
    ProductSquares,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellStateMode {
    Aggregate,
    Reset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateWeights {
    Shared,
    PerIndex,
}

/// Relational module variant: the skip-BiLSTM, a plain BiLSTM, or none.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationalVariant {
    Skip,
    Plain,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: TaskMode,
    pub rules: PathBuf,
    pub flip_table: PathBuf,
    pub input_size: usize,
    pub stem_channels: usize,
    pub align_channels: usize,
    pub global_channels: usize,
    pub hidden_channels: usize,
    pub fusion_channels: usize,
    pub refine_channels: usize,
    pub head_hidden: usize,
    pub adaptive_hidden: usize,
    pub e_max: f64,
    pub offset_max: f64,
    pub sigma_ratio: f64,
    pub tau: f64,
    pub lambda: f64,
    pub dice_denominator: DiceDenominator,
    pub cell_state_mode: CellStateMode,
    pub gate_weights: GateWeights,
    pub relational: RelationalVariant,
    pub fusion_refine: bool,
    pub adaptive_regions: bool,
    pub fixed_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: TaskMode::Au,
            rules: PathBuf::from("configs/rules_bp4d.txt"),
            flip_table: PathBuf::from("configs/flip_49.txt"),
            input_size: 176,
            stem_channels: 64,
            align_channels: 16,
            global_channels: 64,
            hidden_channels: 64,
            fusion_channels: 64,
            refine_channels: 64,
            head_hidden: 64,
            adaptive_hidden: 32,
            e_max: 0.3,
            offset_max: 0.1,
            sigma_ratio: 0.5,
            tau: 1.0,
            lambda: 0.5,
            dice_denominator: DiceDenominator::SumSquares,
            cell_state_mode: CellStateMode::Aggregate,
            gate_weights: GateWeights::Shared,
            relational: RelationalVariant::Skip,
            fusion_refine: true,
            adaptive_regions: true,
            fixed_scale: 0.14,
        }
    }
}

impl ModelConfig {
    /// Feature-map stride of the stem.
    pub const STRIDE: usize = 4;

    pub fn feature_size(&self) -> usize {
        self.input_size / Self::STRIDE
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size % 8 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be divisible by 8",
                self.input_size
            )));
        }
        if self.stem_channels % 4 != 0 {
            return Err(Error::Config(format!(
                "stem_channels {} must be divisible by 4",
                self.stem_channels
            )));
        }
        if self.hidden_channels != self.stem_channels {
            // The skipping gate multiplies hidden states with branch features
            // elementwise, which pins the two widths together.
            return Err(Error::Config(format!(
                "hidden_channels {} must equal stem_channels {}",
                self.hidden_channels, self.stem_channels
            )));
        }
        if !(self.e_max > 0.0 && self.offset_max >= 0.0 && self.sigma_ratio > 0.0) {
            return Err(Error::Config("e_max/offset_max/sigma_ratio out of range".into()));
        }
        if !(self.fixed_scale > 0.0 && self.fixed_scale <= self.e_max) {
            return Err(Error::Config(format!(
                "fixed_scale {} must be in (0, e_max]",
                self.fixed_scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    pub fold_plan: Option<PathBuf>,
    pub train_folds: Vec<usize>,
    pub eval_fold: Option<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub max_steps: usize,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.csv"),
            fold_plan: None,
            train_folds: Vec::new(),
            eval_fold: None,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: 0.5,
            lr_decay_every: 2,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            augment: true,
            max_steps: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub subjects: usize,
    pub frames_per_subject: usize,
    pub image_size: usize,
    pub blob_intensity: f64,
    pub blob_sigma_ratio: f64,
    pub jitter: f64,
    pub active_rate: f64,
    pub grade_ratios: [f64; 4],
    pub folds: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 8,
            frames_per_subject: 8,
            image_size: 184,
            blob_intensity: 140.0,
            blob_sigma_ratio: 0.25,
            jitter: 0.8,
            active_rate: 0.4,
            grade_ratios: [1.0, 0.7, 0.45, 0.15],
            folds: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse_str(&text, &path.display().to_string())?;
        if let Ok(seed) = std::env::var("ALGRNET_SEED") {
            cfg.train.seed = seed.parse().map_err(|_| {
                Error::Config(format!("ALGRNET_SEED is not an integer: {seed}"))
            })?;
        }
        Ok(cfg)
    }

    pub fn parse_str(text: &str, path: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_string(),
                line: ln + 1,
                msg,
            };
            if line.starts_with('[') {
                section = line
                    .strip_prefix('[')
                    .and_then(|s| s.strip_suffix(']'))
                    .ok_or_else(|| err("malformed section header".into()))?
                    .to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected key = value".into()))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(&section, key, value)
                .map_err(|m| err(m))?;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> std::result::Result<(), String> {
        macro_rules! num {
            () => {
                value.parse().map_err(|e| format!("{key}: {e}"))?
            };
        }
        let unknown = || Err(format!("unknown key [{section}] {key}"));
        match section {
            "model" => {
                let m = &mut self.model;
                match key {
                    "mode" => {
                        m.mode = match value {
                            "au" => TaskMode::Au,
                            "palsy" => TaskMode::Palsy,
                            _ => return Err(format!("unknown mode {value}")),
                        }
                    }
                    "rules" => m.rules = PathBuf::from(value),
                    "flip_table" => m.flip_table = PathBuf::from(value),
                    "input_size" => m.input_size = num!(),
                    "stem_channels" => m.stem_channels = num!(),
                    "align_channels" => m.align_channels = num!(),
                    "global_channels" => m.global_channels = num!(),
                    "hidden_channels" => m.hidden_channels = num!(),
                    "fusion_channels" => m.fusion_channels = num!(),
                    "refine_channels" => m.refine_channels = num!(),
                    "head_hidden" => m.head_hidden = num!(),
                    "adaptive_hidden" => m.adaptive_hidden = num!(),
                    "e_max" => m.e_max = num!(),
                    "offset_max" => m.offset_max = num!(),
                    "sigma_ratio" => m.sigma_ratio = num!(),
                    "tau" => m.tau = num!(),
                    "lambda" => m.lambda = num!(),
                    "dice_denominator" => {
                        m.dice_denominator = match value {
                            "sum_squares" => DiceDenominator::SumSquares,
                            "product_squares" => DiceDenominator::ProductSquares,
                            _ => return Err(format!("unknown dice_denominator {value}")),
                        }
                    }
                    "cell_state_mode" => {
                        m.cell_state_mode = match value {
                            "aggregate" => CellStateMode::Aggregate,
                            "reset" => CellStateMode::Reset,
                            _ => return Err(format!("unknown cell_state_mode {value}")),
                        }
                    }
                    "gate_weights" => {
                        m.gate_weights = match value {
                            "shared" => GateWeights::Shared,
                            "per_index" => GateWeights::PerIndex,
                            _ => return Err(format!("unknown gate_weights {value}")),
                        }
                    }
                    "relational" => {
                        m.relational = match value {
                            "skip" => RelationalVariant::Skip,
                            "plain" => RelationalVariant::Plain,
                            "none" => RelationalVariant::None,
                            _ => return Err(format!("unknown relational {value}")),
                        }
                    }
                    "fusion_refine" => {
                        m.fusion_refine =
                            parse_bool(value).ok_or(format!("bad bool {value}"))?
                    }
                    "adaptive_regions" => {
                        m.adaptive_regions =
                            parse_bool(value).ok_or(format!("bad bool {value}"))?
                    }
                    "fixed_scale" => m.fixed_scale = num!(),
                    _ => return unknown(),
                }
            }
            "train" => {
                let t = &mut self.train;
                match key {
                    "manifest" => t.manifest = PathBuf::from(value),
                    "fold_plan" => t.fold_plan = Some(PathBuf::from(value)),
                    "train_folds" => {
                        t.train_folds = value
                            .split(',')
                            .filter(|s| !s.trim().is_empty())
                            .map(|s| s.trim().parse().map_err(|e| format!("{key}: {e}")))
                            .collect::<std::result::Result<_, _>>()?;
                    }
                    "eval_fold" => t.eval_fold = Some(num!()),
                    "lr" => t.lr = num!(),
                    "momentum" => t.momentum = num!(),
                    "weight_decay" => t.weight_decay = num!(),
                    "lr_decay" => t.lr_decay = num!(),
                    "lr_decay_every" => t.lr_decay_every = num!(),
                    "epochs" => t.epochs = num!(),
                    "batch_size" => t.batch_size = num!(),
                    "seed" => t.seed = num!(),
                    "augment" => {
                        t.augment = parse_bool(value).ok_or(format!("bad bool {value}"))?
                    }
                    "max_steps" => t.max_steps = num!(),
                    "out_dir" => t.out_dir = PathBuf::from(value),
                    _ => return unknown(),
                }
            }
            "synth" => {
                let s = &mut self.synth;
                match key {
                    "subjects" => s.subjects = num!(),
                    "frames_per_subject" => s.frames_per_subject = num!(),
                    "image_size" => s.image_size = num!(),
                    "blob_intensity" => s.blob_intensity = num!(),
                    "blob_sigma_ratio" => s.blob_sigma_ratio = num!(),
                    "jitter" => s.jitter = num!(),
                    "active_rate" => s.active_rate = num!(),
                    "grade_ratios" => {
                        let vals: Vec<f64> = value
                            .split(',')
                            .map(|s| s.trim().parse().map_err(|e| format!("{key}: {e}")))
                            .collect::<std::result::Result<_, _>>()?;
                        if vals.len() != 4 {
                            return Err("grade_ratios needs 4 values".into());
                        }
                        s.grade_ratios = [vals[0], vals[1], vals[2], vals[3]];
                    }
                    "folds" => s.folds = num!(),
                    _ => return unknown(),
                }
            }
            _ => return Err(format!("unknown section [{section}]")),
        }
        Ok(())
    }

    /// Canonical text form: every key, every value, fixed order. Used for run
    /// logs and for the checkpoint config hash.
    pub fn serialize(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let s = &self.synth;
        let mut out = String::new();
        let _ = writeln!(out, "[model]");
        let _ = writeln!(out, "mode = {}", m.mode.as_str());
        let _ = writeln!(out, "rules = {}", m.rules.display());
        let _ = writeln!(out, "flip_table = {}", m.flip_table.display());
        let _ = writeln!(out, "input_size = {}", m.input_size);
        let _ = writeln!(out, "stem_channels = {}", m.stem_channels);
        let _ = writeln!(out, "align_channels = {}", m.align_channels);
        let _ = writeln!(out, "global_channels = {}", m.global_channels);
        let _ = writeln!(out, "hidden_channels = {}", m.hidden_channels);
        let _ = writeln!(out, "fusion_channels = {}", m.fusion_channels);
        let _ = writeln!(out, "refine_channels = {}", m.refine_channels);
        let _ = writeln!(out, "head_hidden = {}", m.head_hidden);
        let _ = writeln!(out, "adaptive_hidden = {}", m.adaptive_hidden);
        let _ = writeln!(out, "e_max = {}", m.e_max);
        let _ = writeln!(out, "offset_max = {}", m.offset_max);
        let _ = writeln!(out, "sigma_ratio = {}", m.sigma_ratio);
        let _ = writeln!(out, "tau = {}", m.tau);
        let _ = writeln!(out, "lambda = {}", m.lambda);
        let _ = writeln!(
            out,
            "dice_denominator = {}",
            match m.dice_denominator {
                DiceDenominator::SumSquares => "sum_squares",
                DiceDenominator::ProductSquares => "product_squares",
            }
        );
        let _ = writeln!(
            out,
            "cell_state_mode = {}",
            match m.cell_state_mode {
                CellStateMode::Aggregate => "aggregate",
                CellStateMode::Reset => "reset",
            }
        );
        let _ = writeln!(
            out,
            "gate_weights = {}",
            match m.gate_weights {
                GateWeights::Shared => "shared",
                GateWeights::PerIndex => "per_index",
            }
        );
        let _ = writeln!(
            out,
            "relational = {}",
            match m.relational {
                RelationalVariant::Skip => "skip",
                RelationalVariant::Plain => "plain",
                RelationalVariant::None => "none",
            }
        );
        let _ = writeln!(out, "fusion_refine = {}", m.fusion_refine);
        let _ = writeln!(out, "adaptive_regions = {}", m.adaptive_regions);
        let _ = writeln!(out, "fixed_scale = {}", m.fixed_scale);
        let _ = writeln!(out, "[train]");
        let _ = writeln!(out, "manifest = {}", t.manifest.display());
        if let Some(fp) = &t.fold_plan {
            let _ = writeln!(out, "fold_plan = {}", fp.display());
        }
        if !t.train_folds.is_empty() {
            let folds: Vec<String> = t.train_folds.iter().map(|f| f.to_string()).collect();
            let _ = writeln!(out, "train_folds = {}", folds.join(","));
        }
        if let Some(ef) = t.eval_fold {
            let _ = writeln!(out, "eval_fold = {ef}");
        }
        let _ = writeln!(out, "lr = {}", t.lr);
        let _ = writeln!(out, "momentum = {}", t.momentum);
        let _ = writeln!(out, "weight_decay = {}", t.weight_decay);
        let _ = writeln!(out, "lr_decay = {}", t.lr_decay);
        let _ = writeln!(out, "lr_decay_every = {}", t.lr_decay_every);
        let _ = writeln!(out, "epochs = {}", t.epochs);
        let _ = writeln!(out, "batch_size = {}", t.batch_size);
        let _ = writeln!(out, "seed = {}", t.seed);
        let _ = writeln!(out, "augment = {}", t.augment);
        let _ = writeln!(out, "max_steps = {}", t.max_steps);
        let _ = writeln!(out, "out_dir = {}", t.out_dir.display());
        let _ = writeln!(out, "[synth]");
        let _ = writeln!(out, "subjects = {}", s.subjects);
        let _ = writeln!(out, "frames_per_subject = {}", s.frames_per_subject);
        let _ = writeln!(out, "image_size = {}", s.image_size);
        let _ = writeln!(out, "blob_intensity = {}", s.blob_intensity);
        let _ = writeln!(out, "blob_sigma_ratio = {}", s.blob_sigma_ratio);
        let _ = writeln!(out, "jitter = {}", s.jitter);
        let _ = writeln!(out, "active_rate = {}", s.active_rate);
        let _ = writeln!(
            out,
            "grade_ratios = {},{},{},{}",
            s.grade_ratios[0], s.grade_ratios[1], s.grade_ratios[2], s.grade_ratios[3]
        );
        let _ = writeln!(out, "folds = {}", s.folds);
        out
    }

    /// FNV-1a over the canonical serialization of the model section only, so
    /// training bookkeeping changes do not invalidate checkpoints.
    pub fn model_hash(&self) -> u64 {
        let text = self.serialize();
        let model_part = text.split("[train]").next().unwrap_or(&text);
        fnv1a(model_part.as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
