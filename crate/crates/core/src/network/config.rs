//! Model and training configuration: presets, validation and the flat
//! `key=value` file format.

use std::fmt;

use crate::attention::{MslaConfig, DEFAULT_KERNELS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Convolutional local feature extraction.
    Local,
    /// Attention-based global feature extraction.
    Global,
}

impl BlockKind {
    pub fn letter(self) -> char {
        match self {
            BlockKind::Local => 'L',
            BlockKind::Global => 'G',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub stage_depths: [usize; 4],
    pub stage_widths: [usize; 4],
    pub pattern: [BlockKind; 4],
    pub kernel_set: Vec<usize>,
    pub head_width: usize,
    pub num_classes: usize,
    /// `(H, W)`.
    pub input_size: (usize, usize),
    pub in_channels: usize,
}

pub const PRESETS: [&str; 3] = ["base", "small", "desk"];

/// The five encoder layouts of the ablation over block types.
pub const PATTERNS: [&str; 5] = ["LLLL", "LLLG", "LLGG", "LGGG", "GGGG"];

impl Default for ModelConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl ModelConfig {
    pub fn base() -> Self {
        Self {
            stage_depths: [4, 8, 11, 5],
            stage_widths: [64, 128, 256, 512],
            pattern: parse_pattern("LLGG").unwrap(),
            kernel_set: DEFAULT_KERNELS.to_vec(),
            head_width: 32,
            num_classes: 9,
            input_size: (224, 224),
            in_channels: 3,
        }
    }

    pub fn small() -> Self {
        Self { stage_depths: [3, 4, 8, 3], ..Self::base() }
    }

    /// Laptop-sized variant used for the synthetic experiments.
    pub fn desk() -> Self {
        Self {
            stage_depths: [2, 2, 4, 2],
            stage_widths: [32, 64, 128, 256],
            head_width: 16,
            num_classes: 4,
            input_size: (64, 64),
            ..Self::base()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::base()),
            "small" => Ok(Self::small()),
            "desk" => Ok(Self::desk()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (expected one of {})", PRESETS.join(", ")))),
        }
    }

    pub fn pattern_string(&self) -> String {
        self.pattern.iter().map(|k| k.letter()).collect()
    }

    pub fn with_pattern(mut self, pattern: &str) -> Result<Self> {
        self.pattern = parse_pattern(pattern)?;
        Ok(self)
    }

    /// Head width used by a stage: the configured width, capped at the
    /// per-branch channel count.
    pub fn stage_head_width(&self, stage: usize) -> usize {
        let cb = self.stage_widths[stage] / self.kernel_set.len().max(1);
        self.head_width.min(cb.max(1))
    }

    pub fn msla_config(&self, stage: usize) -> Result<MslaConfig> {
        MslaConfig::new(self.stage_widths[stage], self.stage_head_width(stage), self.kernel_set.clone())
    }

    /// Spatial extent of stage `i` (0-based) output.
    pub fn stage_extent(&self, stage: usize) -> (usize, usize) {
        let f = 4 << stage;
        (self.input_size.0 / f, self.input_size.1 / f)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let Some(i) = self.stage_depths.iter().position(|&d| d == 0) {
            return bad(format!("stage_depths: stage {} has depth 0", i + 1));
        }
        if self.stage_widths[0] == 0 {
            return bad("stage_widths: widths must be positive".into());
        }
        for i in 0..3 {
            if self.stage_widths[i + 1] != 2 * self.stage_widths[i] {
                return bad(format!(
                    "stage_widths must double per stage: width[{}]={} but width[{}]={}",
                    i + 1,
                    self.stage_widths[i + 1],
                    i,
                    self.stage_widths[i]
                ));
            }
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return bad(format!("input_size {h}x{w} must be positive multiples of 32"));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels must be at least 1".into());
        }
        if self.head_width == 0 {
            return bad("head_width must be positive".into());
        }
        for (i, kind) in self.pattern.iter().enumerate() {
            if *kind == BlockKind::Global {
                self.msla_config(i).map_err(|e| Error::Config(format!("stage {} (G): {}", i + 1, strip(e))))?;
            }
        }
        Ok(())
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

pub fn parse_pattern(s: &str) -> Result<[BlockKind; 4]> {
    let kinds: Vec<BlockKind> = s
        .chars()
        .map(|c| match c {
            'L' | 'l' => Ok(BlockKind::Local),
            'G' | 'g' => Ok(BlockKind::Global),
            _ => Err(Error::Config(format!("pattern {s:?}: expected letters L or G"))),
        })
        .collect::<Result<_>>()?;
    kinds.try_into().map_err(|_| Error::Config(format!("pattern {s:?}: expected exactly 4 letters")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdamW => "adamw",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 - step / total)^0.9`.
    Poly,
}

pub const POLY_POWER: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub recipe: String,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Dice weight of the hybrid loss.
    pub lambda: f64,
    pub aug_prob: f64,
    pub lr_schedule: LrSchedule,
}

pub const RECIPES: [&str; 3] = ["synapse", "acdc", "cvc"];

impl Default for TrainConfig {
    fn default() -> Self {
        Self::synapse()
    }
}

impl TrainConfig {
    /// SGD, multi-organ.
    pub fn synapse() -> Self {
        Self {
            recipe: "synapse".into(),
            optimizer: OptimizerKind::Sgd,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 400,
            batch_size: 24,
            lambda: 0.6,
            aug_prob: 0.0,
            lr_schedule: LrSchedule::Constant,
        }
    }

    /// AdamW, cardiac.
    pub fn acdc() -> Self {
        Self {
            recipe: "acdc".into(),
            optimizer: OptimizerKind::AdamW,
            lr: 3e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            ..Self::synapse()
        }
    }

    /// AdamW, binary polyp segmentation, dice only, augmented.
    pub fn cvc() -> Self {
        Self {
            recipe: "cvc".into(),
            optimizer: OptimizerKind::AdamW,
            lr: 1e-4,
            weight_decay: 5e-4,
            epochs: 200,
            batch_size: 8,
            lambda: 1.0,
            aug_prob: 0.25,
            ..Self::synapse()
        }
    }

    pub fn recipe(name: &str) -> Result<Self> {
        match name {
            "synapse" => Ok(Self::synapse()),
            "acdc" => Ok(Self::acdc()),
            "cvc" => Ok(Self::cvc()),
            _ => Err(Error::Config(format!("unknown recipe {name:?} (expected one of {})", RECIPES.join(", ")))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.aug_prob) {
            return bad(format!("aug_prob must lie in [0, 1], got {}", self.aug_prob));
        }
        Ok(())
    }
}

/// Everything a config file can set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("expected comma-separated integers, got {v:?}")))
        .collect()
}

fn parse_four(v: &str) -> std::result::Result<[usize; 4], String> {
    parse_list(v)?.try_into().map_err(|_| format!("expected exactly 4 integers, got {v:?}"))
}

fn parse_num<N: std::str::FromStr>(v: &str) -> std::result::Result<N, String> {
    v.parse().map_err(|_| format!("invalid number {v:?}"))
}

impl RunConfig {
    /// Parses `key=value` lines (`#` starts a comment). `preset` and `recipe`
    /// are applied first wherever they appear; other keys override them.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse { line: line_no, msg: format!("expected key=value, got {line:?}") });
            };
            entries.push((line_no, k.trim().to_string(), v.trim().to_string()));
        }

        let mut cfg = RunConfig::default();
        for (line, k, v) in &entries {
            let res = match k.as_str() {
                "preset" => ModelConfig::preset(v).map(|m| cfg.model = m),
                "recipe" => TrainConfig::recipe(v).map(|t| cfg.train = t),
                _ => Ok(()),
            };
            res.map_err(|e| Error::Parse { line: *line, msg: strip(e) })?;
        }
        for (line, k, v) in &entries {
            cfg.apply(k, v).map_err(|msg| Error::Parse { line: *line, msg })?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "preset" | "recipe" => {}
            "stage_depths" => m.stage_depths = parse_four(v)?,
            "stage_widths" => m.stage_widths = parse_four(v)?,
            "pattern" => m.pattern = parse_pattern(v).map_err(strip)?,
            "kernel_set" => m.kernel_set = parse_list(v)?,
            "head_width" => m.head_width = parse_num(v)?,
            "num_classes" => m.num_classes = parse_num(v)?,
            "in_channels" => m.in_channels = parse_num(v)?,
            "input_size" => {
                let dims = parse_list(v)?;
                m.input_size = match dims[..] {
                    [s] => (s, s),
                    [h, w] => (h, w),
                    _ => return Err(format!("input_size takes one or two integers, got {v:?}")),
                };
            }
            "optimizer" => {
                t.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adamw" => OptimizerKind::AdamW,
                    _ => return Err(format!("unknown optimizer {v:?} (expected sgd or adamw)")),
                }
            }
            "lr" => t.lr = parse_num(v)?,
            "momentum" => t.momentum = parse_num(v)?,
            "weight_decay" => t.weight_decay = parse_num(v)?,
            "epochs" => t.epochs = parse_num(v)?,
            "batch_size" => t.batch_size = parse_num(v)?,
            "lambda" => t.lambda = parse_num(v)?,
            "aug_prob" => t.aug_prob = parse_num(v)?,
            "lr_schedule" => {
                t.lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "poly" => LrSchedule::Poly,
                    _ => return Err(format!("unknown lr_schedule {v:?} (expected constant or poly)")),
                }
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let join = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "recipe={}\nstage_depths={}\nstage_widths={}\npattern={}\nkernel_set={}\nhead_width={}\nnum_classes={}\ninput_size={},{}\nin_channels={}\n\
             optimizer={}\nlr={}\nmomentum={}\nweight_decay={}\nepochs={}\nbatch_size={}\nlambda={}\naug_prob={}\nlr_schedule={}\n",
            t.recipe,
            join(&m.stage_depths),
            join(&m.stage_widths),
            m.pattern_string(),
            join(&m.kernel_set),
            m.head_width,
            m.num_classes,
            m.input_size.0,
            m.input_size.1,
            m.in_channels,
            t.optimizer,
            t.lr,
            t.momentum,
            t.weight_decay,
            t.epochs,
            t.batch_size,
            t.lambda,
            t.aug_prob,
            match t.lr_schedule {
                LrSchedule::Constant => "constant",
                LrSchedule::Poly => "poly",
            }
        )
    }
}

/// Model part of [`RunConfig::parse`].
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    RunConfig::parse(text).map(|c| c.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in PRESETS {
            ModelConfig::preset(p).unwrap().validate().unwrap();
        }
        for p in PATTERNS {
            ModelConfig::base().with_pattern(p).unwrap().validate().unwrap();
            ModelConfig::desk().with_pattern(p).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn base_preset_depths() {
        assert_eq!(parse_config("preset=base").unwrap().stage_depths, [4, 8, 11, 5]);
        assert_eq!(parse_config("preset=small").unwrap().stage_depths, [3, 4, 8, 3]);
        assert_eq!(parse_config("").unwrap(), ModelConfig::base());
    }

    #[test]
    fn overrides_apply_after_preset() {
        let c = RunConfig::parse("num_classes=2 # binary\npreset=desk\nrecipe=cvc\nlr=0.001").unwrap();
        assert_eq!(c.model.num_classes, 2);
        assert_eq!(c.model.stage_widths, [32, 64, 128, 256]);
        assert_eq!(c.train.lambda, 1.0);
        assert_eq!(c.train.lr, 0.001);
    }

    #[test]
    fn all_cnn_pattern_accepted() {
        let c = parse_config("pattern=LLLL").unwrap();
        assert!(c.pattern.iter().all(|&k| k == BlockKind::Local));
    }

    #[test]
    fn non_doubling_widths_rejected() {
        let e = parse_config("stage_widths=64,128,256,500").unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("double")), "{e}");
    }

    #[test]
    fn unknown_key_reports_line() {
        let e = parse_config("preset=base\n\n# c\nwidth=3").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 4, .. }), "{e}");
        let e = parse_config("head_width=abc").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
        let e = parse_config("no equals sign").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
    }

    #[test]
    fn input_size_must_divide_by_32() {
        let e = parse_config("input_size=100").unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("32")), "{e}");
        assert_eq!(parse_config("input_size=64,96").unwrap().input_size, (64, 96));
    }

    #[test]
    fn global_stage_divisibility_checked() {
        let e = parse_config("head_width=24").unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("stage 3")), "{e}");
        assert!(parse_config("head_width=24\npattern=LLLL").is_ok());
    }

    #[test]
    fn head_width_capped_at_branch_width() {
        let c = ModelConfig::base().with_pattern("GGGG").unwrap();
        assert_eq!(c.stage_head_width(0), 16);
        assert_eq!(c.stage_head_width(2), 32);
    }

    #[test]
    fn text_roundtrip() {
        let c = RunConfig::parse("preset=desk\nrecipe=acdc\npattern=LGGG\nlr_schedule=poly").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
