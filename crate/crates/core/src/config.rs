//! Run configuration and its canonical `key = value` text form.
//!
//! The text form is what config files contain and what checkpoints embed:
//! one `section.key = value` pair per line, `#` starts a comment, unknown
//! keys are rejected. Rendering always emits every key in a fixed order, so
//! equal configs give byte-identical text.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{GladError, Result};
use crate::task::TaskConfig;
use crate::teacher::TeacherConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Distill into hidden states through the alignment network.
    LateHidden,
    /// Blend projected teacher features into the vision tokens.
    EarlyWeighted,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::LateHidden => "late",
            FusionMode::EarlyWeighted => "early",
        })
    }
}

impl FromStr for FusionMode {
    type Err = GladError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "late" | "late_hidden" => Ok(FusionMode::LateHidden),
            "early" | "early_weighted" => Ok(FusionMode::EarlyWeighted),
            _ => Err(GladError::Config(format!("unknown fusion mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_llm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub action_codebook: usize,
    pub action_len: usize,
    pub instruction_len: usize,
    pub d_teacher: usize,
    /// 1-based layer whose image-token states are distilled.
    pub align_layer: usize,
    pub fusion: FusionMode,
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            d_llm: 64,
            n_layers: 4,
            n_heads: 4,
            vocab: 64,
            action_codebook: 16,
            action_len: 4,
            instruction_len: 5,
            d_teacher: 32,
            align_layer: 4,
            fusion: FusionMode::LateHidden,
            lambda: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Flattened pixels per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Image, instruction and the `action_len - 1` teacher-forced actions.
    pub fn seq_len(&self) -> usize {
        self.n_patches() + self.instruction_len + self.action_len - 1
    }

    /// Position whose logits predict action `i`.
    pub fn action_query(&self, i: usize) -> usize {
        self.n_patches() + self.instruction_len - 1 + i
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(GladError::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 || self.image_size == 0 {
            return err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || self.d_llm % self.n_heads != 0 || self.d_llm % 2 != 0 {
            return err(format!(
                "d_llm {} must be even and divisible by n_heads {}",
                self.d_llm, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return err("n_layers must be positive".into());
        }
        if !(1..=self.n_layers).contains(&self.align_layer) {
            return err(format!(
                "align_layer {} outside [1, {}]",
                self.align_layer, self.n_layers
            ));
        }
        if self.vocab == 0 || self.action_codebook == 0 || self.action_len == 0 || self.instruction_len == 0 {
            return err("vocab, action_codebook, action_len and instruction_len must be positive".into());
        }
        if self.d_teacher == 0 {
            return err("d_teacher must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return err(format!("lambda {} must be a finite non-negative number", self.lambda));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Pretrain,
    Posttrain,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Posttrain => "posttrain",
        })
    }
}

impl FromStr for Stage {
    type Err = GladError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "posttrain" => Ok(Stage::Posttrain),
            _ => Err(GladError::Config(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    /// Desk-scale rate. Paper-scale anchors: 5e-7 (pretrain), 3.5e-5 (posttrain).
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Size of a fixed training set cycled in order; 0 streams fresh scenes.
    pub dataset_size: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Pretrain,
            steps: 2000,
            batch_size: 32,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 0,
            dataset_size: 0,
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }
}

impl TrainConfig {
    /// Defaults for the second stage.
    pub fn posttrain() -> Self {
        TrainConfig {
            stage: Stage::Posttrain,
            lr: 1e-4,
            steps: 500,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(GladError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("lr {} must be positive", self.lr));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return err("steps and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || !(self.grad_clip > 0.0) {
            return err("eps and grad_clip must be positive, weight_decay non-negative".into());
        }
        if self.lora_rank == 0 || !(self.lora_alpha > 0.0) {
            return err("lora_rank and lora_alpha must be positive".into());
        }
        Ok(())
    }
}

/// Everything a run needs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    pub task: TaskConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        if self.teacher.dim != self.model.d_teacher {
            return Err(GladError::Config(format!(
                "teacher.dim {} differs from model.d_teacher {}",
                self.teacher.dim, self.model.d_teacher
            )));
        }
        if self.teacher.frames == 0 {
            return Err(GladError::Config("teacher.frames must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text: every key, fixed order, shortest round-trip floats.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        vec![
            ("model.image_size", m.image_size.to_string()),
            ("model.patch_size", m.patch_size.to_string()),
            ("model.d_llm", m.d_llm.to_string()),
            ("model.n_layers", m.n_layers.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.vocab", m.vocab.to_string()),
            ("model.action_codebook", m.action_codebook.to_string()),
            ("model.action_len", m.action_len.to_string()),
            ("model.instruction_len", m.instruction_len.to_string()),
            ("model.d_teacher", m.d_teacher.to_string()),
            ("model.align_layer", m.align_layer.to_string()),
            ("model.fusion", m.fusion.to_string()),
            ("model.lambda", format!("{:?}", m.lambda)),
            ("teacher.frames", self.teacher.frames.to_string()),
            ("teacher.tokens", self.teacher.tokens.to_string()),
            ("teacher.dim", self.teacher.dim.to_string()),
            ("teacher.seed", self.teacher.seed.to_string()),
            ("task.appearance_bias", format!("{:?}", self.task.appearance_bias)),
            ("task.synonym_rate", format!("{:?}", self.task.synonym_rate)),
            ("task.shade_strength", format!("{:?}", self.task.shade_strength)),
            ("train.stage", t.stage.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", format!("{:?}", t.lr)),
            ("train.beta1", format!("{:?}", t.beta1)),
            ("train.beta2", format!("{:?}", t.beta2)),
            ("train.eps", format!("{:?}", t.eps)),
            ("train.weight_decay", format!("{:?}", t.weight_decay)),
            ("train.grad_clip", format!("{:?}", t.grad_clip)),
            ("train.seed", t.seed.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.dataset_size", t.dataset_size.to_string()),
            ("train.lora_rank", t.lora_rank.to_string()),
            ("train.lora_alpha", format!("{:?}", t.lora_alpha)),
        ]
    }

    /// Apply `key = value` text on top of `self`. Keys outside the known
    /// set are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GladError::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| GladError::Config(format!("{key}: cannot parse {v:?}")))
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.image_size" => m.image_size = p(key, value)?,
            "model.patch_size" => m.patch_size = p(key, value)?,
            "model.d_llm" => m.d_llm = p(key, value)?,
            "model.n_layers" => m.n_layers = p(key, value)?,
            "model.n_heads" => m.n_heads = p(key, value)?,
            "model.vocab" => m.vocab = p(key, value)?,
            "model.action_codebook" => m.action_codebook = p(key, value)?,
            "model.action_len" => m.action_len = p(key, value)?,
            "model.instruction_len" => m.instruction_len = p(key, value)?,
            "model.d_teacher" => m.d_teacher = p(key, value)?,
            "model.align_layer" => m.align_layer = p(key, value)?,
            "model.fusion" => m.fusion = value.parse()?,
            "model.lambda" => m.lambda = p(key, value)?,
            "teacher.frames" => self.teacher.frames = p(key, value)?,
            "teacher.tokens" => self.teacher.tokens = p(key, value)?,
            "teacher.dim" => self.teacher.dim = p(key, value)?,
            "teacher.seed" => self.teacher.seed = p(key, value)?,
            "task.appearance_bias" => self.task.appearance_bias = p(key, value)?,
            "task.synonym_rate" => self.task.synonym_rate = p(key, value)?,
            "task.shade_strength" => self.task.shade_strength = p(key, value)?,
            "train.stage" => t.stage = value.parse()?,
            "train.steps" => t.steps = p(key, value)?,
            "train.batch_size" => t.batch_size = p(key, value)?,
            "train.lr" => t.lr = p(key, value)?,
            "train.beta1" => t.beta1 = p(key, value)?,
            "train.beta2" => t.beta2 = p(key, value)?,
            "train.eps" => t.eps = p(key, value)?,
            "train.weight_decay" => t.weight_decay = p(key, value)?,
            "train.grad_clip" => t.grad_clip = p(key, value)?,
            "train.seed" => t.seed = p(key, value)?,
            "train.checkpoint_every" => t.checkpoint_every = p(key, value)?,
            "train.dataset_size" => t.dataset_size = p(key, value)?,
            "train.lora_rank" => t.lora_rank = p(key, value)?,
            "train.lora_alpha" => t.lora_alpha = p(key, value)?,
            _ => return Err(GladError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

/// Split canonical text into ordered pairs. Later duplicates win when
/// collected into a map; here they are an error.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| GladError::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if k.is_empty() {
            return Err(GladError::Config(format!("line {}: empty key", n + 1)));
        }
        if seen.insert(k.clone(), ()).is_some() {
            return Err(GladError::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}
