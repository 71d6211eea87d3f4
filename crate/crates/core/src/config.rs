//! Flat `key = value` configuration covering the model, training and
//! decoding settings.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::numeric::Precision;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("inconsistent configuration: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// N_d
    pub nl_layers: usize,
    /// N_1
    pub ast_layers: usize,
    /// N_2
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub conv_window: usize,
    pub tree_conv_window: usize,
    /// Number of leading AST blocks that carry a tree convolution.
    pub tree_conv_blocks: usize,
    pub max_depth: usize,
    pub char_len: usize,
    pub max_path: usize,
    pub position_sin_only: bool,
    pub disable_tree_conv: bool,
    pub disable_rule_def: bool,
    pub disable_char_embed: bool,
    pub disable_self_att: bool,
    pub disable_pointer: bool,
    /// Train only the copy route when a token is reachable both ways.
    pub copy_preferred: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            heads: 8,
            nl_layers: 6,
            ast_layers: 5,
            decoder_layers: 5,
            ffn_dim: 1024,
            conv_window: 3,
            tree_conv_window: 3,
            tree_conv_blocks: 5,
            max_depth: 32,
            char_len: 16,
            max_path: 16,
            position_sin_only: false,
            disable_tree_conv: false,
            disable_rule_def: false,
            disable_char_embed: false,
            disable_self_att: false,
            disable_pointer: false,
            copy_preferred: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub precision: Precision,
    /// Evaluate dev StrAcc every this many epochs (0 disables).
    pub dev_every: usize,
    /// Write a checkpoint every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
    /// Fail on the first undecomposable example instead of skipping it.
    pub strict: bool,
    /// Stop early once the epoch loss falls below this value (0 disables).
    pub target_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dropout: 0.15,
            batch_size: 32,
            epochs: 100,
            seed: 1,
            clip_norm: 5.0,
            precision: Precision::F32,
            dev_every: 1,
            checkpoint_every: 0,
            strict: false,
            target_loss: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceConfig {
    pub beam_size: usize,
    pub max_steps: usize,
    /// Rank finished hypotheses by mean rather than summed log probability.
    pub length_norm: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { beam_size: 5, max_steps: 300, length_norm: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

/// Every key, in rendering order, with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("d_model", "embedding and hidden size"),
    ("heads", "attention heads"),
    ("nl_layers", "NL reader blocks"),
    ("ast_layers", "AST reader blocks"),
    ("decoder_layers", "decoder blocks"),
    ("ffn_dim", "width of the first feed-forward layer"),
    ("conv_window", "word convolution window (odd)"),
    ("tree_conv_window", "tree convolution window"),
    ("tree_conv_blocks", "leading AST blocks with tree convolution"),
    ("max_depth", "largest depth embedding bucket"),
    ("char_len", "characters kept per token"),
    ("max_path", "symbols kept in the query path"),
    ("position_sin_only", "use sin on odd position dimensions too"),
    ("disable_tree_conv", "replace tree convolution with a dense layer"),
    ("disable_rule_def", "drop the rule definition gate"),
    ("disable_char_embed", "drop the character gate"),
    ("disable_self_att", "drop self-attention sub-layers"),
    ("disable_pointer", "predefined rules only, no copying"),
    ("copy_preferred", "train the copy route alone when both apply"),
    ("dropout", "dropout rate"),
    ("batch_size", "examples per update"),
    ("epochs", "training epochs"),
    ("seed", "random seed"),
    ("clip_norm", "global gradient norm clip"),
    ("precision", "parameter storage: f32 or f64"),
    ("dev_every", "epochs between dev evaluations (0 = never)"),
    ("checkpoint_every", "epochs between checkpoints (0 = final only)"),
    ("strict", "abort on undecomposable examples"),
    ("target_loss", "stop once epoch loss drops below this (0 = off)"),
    ("beam_size", "beam width"),
    ("max_steps", "rule budget per program"),
    ("length_norm", "rank by mean log probability"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let t = &mut self.train;
        let i = &mut self.inference;
        match key {
            "d_model" => m.d_model = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "nl_layers" => m.nl_layers = parse(key, value)?,
            "ast_layers" => m.ast_layers = parse(key, value)?,
            "decoder_layers" => m.decoder_layers = parse(key, value)?,
            "ffn_dim" => m.ffn_dim = parse(key, value)?,
            "conv_window" => m.conv_window = parse(key, value)?,
            "tree_conv_window" => m.tree_conv_window = parse(key, value)?,
            "tree_conv_blocks" => m.tree_conv_blocks = parse(key, value)?,
            "max_depth" => m.max_depth = parse(key, value)?,
            "char_len" => m.char_len = parse(key, value)?,
            "max_path" => m.max_path = parse(key, value)?,
            "position_sin_only" => m.position_sin_only = parse(key, value)?,
            "disable_tree_conv" => m.disable_tree_conv = parse(key, value)?,
            "disable_rule_def" => m.disable_rule_def = parse(key, value)?,
            "disable_char_embed" => m.disable_char_embed = parse(key, value)?,
            "disable_self_att" => m.disable_self_att = parse(key, value)?,
            "disable_pointer" => m.disable_pointer = parse(key, value)?,
            "copy_preferred" => m.copy_preferred = parse(key, value)?,
            "dropout" => t.dropout = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "precision" => {
                t.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: value.into(),
                            reason: "expected f32 or f64".into(),
                        })
                    }
                }
            }
            "dev_every" => t.dev_every = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "strict" => t.strict = parse(key, value)?,
            "target_loss" => t.target_loss = parse(key, value)?,
            "beam_size" => i.beam_size = parse(key, value)?,
            "max_steps" => i.max_steps = parse(key, value)?,
            "length_norm" => i.length_norm = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t, i) = (&self.model, &self.train, &self.inference);
        Some(match key {
            "d_model" => m.d_model.to_string(),
            "heads" => m.heads.to_string(),
            "nl_layers" => m.nl_layers.to_string(),
            "ast_layers" => m.ast_layers.to_string(),
            "decoder_layers" => m.decoder_layers.to_string(),
            "ffn_dim" => m.ffn_dim.to_string(),
            "conv_window" => m.conv_window.to_string(),
            "tree_conv_window" => m.tree_conv_window.to_string(),
            "tree_conv_blocks" => m.tree_conv_blocks.to_string(),
            "max_depth" => m.max_depth.to_string(),
            "char_len" => m.char_len.to_string(),
            "max_path" => m.max_path.to_string(),
            "position_sin_only" => m.position_sin_only.to_string(),
            "disable_tree_conv" => m.disable_tree_conv.to_string(),
            "disable_rule_def" => m.disable_rule_def.to_string(),
            "disable_char_embed" => m.disable_char_embed.to_string(),
            "disable_self_att" => m.disable_self_att.to_string(),
            "disable_pointer" => m.disable_pointer.to_string(),
            "copy_preferred" => m.copy_preferred.to_string(),
            "dropout" => t.dropout.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "epochs" => t.epochs.to_string(),
            "seed" => t.seed.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            "precision" => match t.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
            "dev_every" => t.dev_every.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "strict" => t.strict.to_string(),
            "target_loss" => t.target_loss.to_string(),
            "beam_size" => i.beam_size.to_string(),
            "max_steps" => i.max_steps.to_string(),
            "length_norm" => i.length_norm.to_string(),
            _ => return None,
        })
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(ConfigError::Syntax { line: n + 1 });
            }
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("every listed key renders"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        let bad = |msg: String| Err(ConfigError::Inconsistent(msg));
        if m.d_model == 0 || m.heads == 0 || !m.d_model.is_multiple_of(m.heads) {
            return bad(format!("d_model {} must be a positive multiple of heads {}", m.d_model, m.heads));
        }
        if !m.d_model.is_multiple_of(2) {
            return bad("d_model must be even for position embeddings".into());
        }
        if m.nl_layers == 0 || m.ast_layers == 0 || m.decoder_layers == 0 {
            return bad("every stage needs at least one block".into());
        }
        if m.tree_conv_blocks > m.ast_layers {
            return bad(format!("tree_conv_blocks {} exceeds ast_layers {}", m.tree_conv_blocks, m.ast_layers));
        }
        if m.conv_window.is_multiple_of(2) {
            return bad("conv_window must be odd".into());
        }
        if m.tree_conv_window == 0 || m.ffn_dim == 0 || m.char_len == 0 || m.max_path == 0 {
            return bad("window, ffn_dim, char_len and max_path must be positive".into());
        }
        if !(0.0..1.0).contains(&self.train.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.train.dropout));
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.inference.beam_size == 0 || self.inference.max_steps == 0 {
            return bad("beam_size and max_steps must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = Config::default();
        cfg.set("d_model", "64").unwrap();
        cfg.set("precision", "f64").unwrap();
        cfg.set("disable_pointer", "true").unwrap();
        let back = Config::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_key_renders_and_parses() {
        let cfg = Config::default();
        for (k, _) in KEYS {
            let v = cfg.get(k).unwrap();
            let mut c = Config::default();
            c.set(k, &v).unwrap();
        }
        assert_eq!(cfg.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn errors() {
        assert_eq!(Config::parse("d_model 3"), Err(ConfigError::Syntax { line: 1 }));
        assert_eq!(Config::parse("\nwidth = 3"), Err(ConfigError::UnknownKey("width".into())));
        assert!(matches!(Config::parse("heads = many"), Err(ConfigError::Value { .. })));
        assert!(matches!(Config::parse("heads = 7"), Err(ConfigError::Inconsistent(_))));
        assert!(matches!(Config::parse("tree_conv_blocks = 6"), Err(ConfigError::Inconsistent(_))));
        assert!(matches!(Config::parse("dropout = 1.0"), Err(ConfigError::Inconsistent(_))));
        assert!(Config::parse("# only a comment\n\nseed = 4 # trailing").is_ok());
    }
}
