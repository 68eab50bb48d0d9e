use std::path::Path;

use crate::encoders::PromptStrategy;
use crate::error::{Error, Result};
use crate::inference::{BalanceMode, StreamSubset};
use crate::losses::SscPlacement;

/// Parse `key = value` lines. `#` starts a comment, blank lines are skipped,
/// duplicate keys are errors.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
        }
        if pairs.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("duplicate key {key:?}")));
        }
        pairs.push((key, value));
    }
    Ok(pairs)
}

/// Every knob of a training/evaluation run. Defaults are the desk-scale
/// benchmark configuration; any key can be overridden in the config file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub queries: usize,
    pub decoder_layers: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub encoder_width: usize,
    pub sam_patch: usize,
    pub clip_patch: usize,
    pub clip_downsample: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub cls_weight: f64,
    pub ssc_weight: f64,
    pub ssc_placement: SscPlacement,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub balance_mode: BalanceMode,
    pub temperature: f64,
    pub embeddings: StreamSubset,
    pub prompts: PromptStrategy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            image_size: 64,
            iterations: 2000,
            batch_size: 4,
            learning_rate: 1e-4,
            weight_decay: 5e-2,
            queries: 8,
            decoder_layers: 3,
            hidden_dim: 32,
            embed_dim: 6,
            encoder_depth: 8,
            encoder_heads: 4,
            encoder_width: 64,
            sam_patch: 16,
            clip_patch: 8,
            clip_downsample: 0.5,
            bce_weight: 5.0,
            dice_weight: 5.0,
            cls_weight: 2.0,
            ssc_weight: 10.0,
            ssc_placement: SscPlacement::SupervisedLast(1),
            alpha: 0.2,
            beta: 0.7,
            gamma: 0.0,
            balance_mode: BalanceMode::Arithmetic,
            temperature: 0.01,
            embeddings: StreamSubset::ALL,
            prompts: PromptStrategy::Ensemble,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key:?}")))
}

pub fn prompt_strategy_token(p: PromptStrategy) -> &'static str {
    match p {
        PromptStrategy::Single => "single",
        PromptStrategy::Ensemble => "ensemble",
    }
}

pub fn parse_prompt_strategy(token: &str) -> Result<PromptStrategy> {
    match token {
        "single" => Ok(PromptStrategy::Single),
        "ensemble" => Ok(PromptStrategy::Ensemble),
        other => Err(Error::Config(format!("unknown prompt strategy {other:?}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (key, value) in parse_kv(text)? {
            match key.as_str() {
                "seed" => cfg.seed = parse_num(&key, &value)?,
                "image_size" => cfg.image_size = parse_num(&key, &value)?,
                "iterations" => cfg.iterations = parse_num(&key, &value)?,
                "batch_size" => cfg.batch_size = parse_num(&key, &value)?,
                "learning_rate" => cfg.learning_rate = parse_num(&key, &value)?,
                "weight_decay" => cfg.weight_decay = parse_num(&key, &value)?,
                "queries" => cfg.queries = parse_num(&key, &value)?,
                "decoder_layers" => cfg.decoder_layers = parse_num(&key, &value)?,
                "hidden_dim" => cfg.hidden_dim = parse_num(&key, &value)?,
                "embed_dim" => cfg.embed_dim = parse_num(&key, &value)?,
                "encoder_depth" => cfg.encoder_depth = parse_num(&key, &value)?,
                "encoder_heads" => cfg.encoder_heads = parse_num(&key, &value)?,
                "encoder_width" => cfg.encoder_width = parse_num(&key, &value)?,
                "sam_patch" => cfg.sam_patch = parse_num(&key, &value)?,
                "clip_patch" => cfg.clip_patch = parse_num(&key, &value)?,
                "clip_downsample" => cfg.clip_downsample = parse_num(&key, &value)?,
                "bce_weight" => cfg.bce_weight = parse_num(&key, &value)?,
                "dice_weight" => cfg.dice_weight = parse_num(&key, &value)?,
                "cls_weight" => cfg.cls_weight = parse_num(&key, &value)?,
                "ssc_weight" => cfg.ssc_weight = parse_num(&key, &value)?,
                "ssc_placement" => cfg.ssc_placement = SscPlacement::parse(&value)?,
                "alpha" => cfg.alpha = parse_num(&key, &value)?,
                "beta" => cfg.beta = parse_num(&key, &value)?,
                "gamma" => cfg.gamma = parse_num(&key, &value)?,
                "balance_mode" => cfg.balance_mode = BalanceMode::parse(&value)?,
                "temperature" => cfg.temperature = parse_num(&key, &value)?,
                "embeddings" => cfg.embeddings = StreamSubset::parse(&value)?,
                "prompts" => cfg.prompts = parse_prompt_strategy(&value)?,
                other => return Err(Error::Config(format!("unknown config key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Canonical serialization: sorted keys, shortest round-trip floats.
    /// Parsing the output reproduces the config exactly.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("alpha = {}\n", self.alpha));
        s.push_str(&format!("balance_mode = {}\n", self.balance_mode.token()));
        s.push_str(&format!("batch_size = {}\n", self.batch_size));
        s.push_str(&format!("bce_weight = {}\n", self.bce_weight));
        s.push_str(&format!("beta = {}\n", self.beta));
        s.push_str(&format!("clip_downsample = {}\n", self.clip_downsample));
        s.push_str(&format!("clip_patch = {}\n", self.clip_patch));
        s.push_str(&format!("cls_weight = {}\n", self.cls_weight));
        s.push_str(&format!("decoder_layers = {}\n", self.decoder_layers));
        s.push_str(&format!("dice_weight = {}\n", self.dice_weight));
        s.push_str(&format!("embed_dim = {}\n", self.embed_dim));
        s.push_str(&format!("embeddings = {}\n", self.embeddings.token()));
        s.push_str(&format!("encoder_depth = {}\n", self.encoder_depth));
        s.push_str(&format!("encoder_heads = {}\n", self.encoder_heads));
        s.push_str(&format!("encoder_width = {}\n", self.encoder_width));
        s.push_str(&format!("gamma = {}\n", self.gamma));
        s.push_str(&format!("hidden_dim = {}\n", self.hidden_dim));
        s.push_str(&format!("image_size = {}\n", self.image_size));
        s.push_str(&format!("iterations = {}\n", self.iterations));
        s.push_str(&format!("learning_rate = {}\n", self.learning_rate));
        s.push_str(&format!("prompts = {}\n", prompt_strategy_token(self.prompts)));
        s.push_str(&format!("queries = {}\n", self.queries));
        s.push_str(&format!("sam_patch = {}\n", self.sam_patch));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("ssc_placement = {}\n", self.ssc_placement.token()));
        s.push_str(&format!("ssc_weight = {}\n", self.ssc_weight));
        s.push_str(&format!("temperature = {}\n", self.temperature));
        s.push_str(&format!("weight_decay = {}\n", self.weight_decay));
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Config("batch size and iterations must be positive".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.sam_patch) {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of sam_patch {}",
                self.image_size, self.sam_patch
            )));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate must be positive, weight decay non-negative".into()));
        }
        if self.clip_downsample <= 0.0 || self.clip_downsample > 1.0 {
            return Err(Error::Config(format!(
                "clip_downsample must be in (0, 1], got {}",
                self.clip_downsample
            )));
        }
        Ok(())
    }
}
