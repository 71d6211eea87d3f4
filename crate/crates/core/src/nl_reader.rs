//! Tokenization, vocabularies and the NL reader stack.

use std::collections::HashMap;

use rand::Rng;

use crate::config::ModelConfig;
use crate::numeric::nn::{self, GateLayer, LayerNorm, Linear, MultiHeadAttention, SeparableConv};
use crate::numeric::{Graph, NumericError, ParamId, ParamStore, Var};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NlError {
    #[error("empty description")]
    Empty,
    #[error("vocabulary line {line}: {reason}")]
    Vocab { line: usize, reason: String },
    #[error("character id {id} outside table of {size}")]
    UnknownChar { id: usize, size: usize },
    #[error("input padded to {got} characters per token, reader expects {expected}")]
    CharLength { expected: usize, got: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenizeMode {
    #[default]
    Plain,
    Structural,
}

impl std::str::FromStr for TokenizeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plain" => Ok(TokenizeMode::Plain),
            "structural" => Ok(TokenizeMode::Structural),
            _ => Err(format!("unknown tokenization mode {s:?}")),
        }
    }
}

/// Whitespace separates tokens; every other non-word character is a token
/// of its own.
pub fn tokenize_plain(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// `key: value` lines contribute their value as one token; other lines are
/// split as in plain mode.
pub fn tokenize_structural(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in text.lines() {
        match line.split_once(':') {
            Some((key, value)) if is_attribute_key(key) => {
                let value = value.trim();
                if !value.is_empty() {
                    out.push(value.to_string());
                }
            }
            _ => out.extend(tokenize_plain(line)),
        }
    }
    out
}

fn is_attribute_key(key: &str) -> bool {
    let key = key.trim();
    !key.is_empty() && key.chars().all(|c| c.is_alphanumeric() || c == '_' || c == ' ' || c == '-')
}

pub fn tokenize(text: &str, mode: TokenizeMode) -> Vec<String> {
    match mode {
        TokenizeMode::Plain => tokenize_plain(text),
        TokenizeMode::Structural => tokenize_structural(text),
    }
}

/// Token-to-id table with `<pad>` at 0 and `<unk>` at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        v.insert("<pad>");
        v.insert("<unk>");
        v
    }
}

impl Vocabulary {
    pub fn build<'a>(items: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocabulary::default();
        for t in items {
            v.insert(t);
        }
        v
    }

    /// Character vocabulary over every char of every token.
    pub fn build_chars<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Vocabulary::default();
        let mut buf = [0u8; 4];
        for t in tokens {
            for c in t.chars() {
                v.insert(c.encode_utf8(&mut buf));
            }
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    /// One token per line; the line number is the id.
    pub fn from_text(text: &str) -> Result<Self, NlError> {
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for (n, line) in text.lines().enumerate() {
            if v.index.contains_key(line) {
                return Err(NlError::Vocab { line: n + 1, reason: format!("duplicate token {line:?}") });
            }
            v.tokens.push(line.to_string());
            v.index.insert(line.to_string(), n);
        }
        if v.tokens.first().map(String::as_str) != Some("<pad>") || v.tokens.get(1).map(String::as_str) != Some("<unk>") {
            return Err(NlError::Vocab { line: 1, reason: "ids 0 and 1 must be <pad> and <unk>".into() });
        }
        Ok(v)
    }
}

/// A tokenized description ready for the reader.
#[derive(Debug, Clone, PartialEq)]
pub struct NlInput {
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    /// L×M row-major character ids, zero padded on the right.
    pub char_ids: Vec<usize>,
    pub char_len: usize,
}

impl NlInput {
    pub fn new(tokens: Vec<String>, words: &Vocabulary, chars: &Vocabulary, char_len: usize) -> Result<Self, NlError> {
        if tokens.is_empty() {
            return Err(NlError::Empty);
        }
        let token_ids = tokens.iter().map(|t| words.id(t)).collect();
        let mut char_ids = Vec::with_capacity(tokens.len() * char_len);
        let mut buf = [0u8; 4];
        for t in &tokens {
            let mut row: Vec<usize> = t.chars().take(char_len).map(|c| chars.id(c.encode_utf8(&mut buf))).collect();
            row.resize(char_len, PAD_ID);
            char_ids.extend(row);
        }
        Ok(NlInput { tokens, token_ids, char_ids, char_len })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn char_row(&self, i: usize) -> &[usize] {
        &self.char_ids[i * self.char_len..(i + 1) * self.char_len]
    }
}

/// Output of the reader: L×d features and (when enabled) L×d character
/// features.
#[derive(Debug, Clone, Copy)]
pub struct NlEncoding {
    pub features: Var,
    pub char_features: Option<Var>,
}

#[derive(Debug, Clone)]
struct NlBlock {
    self_att: Option<(MultiHeadAttention, LayerNorm)>,
    gate: Option<(GateLayer, LayerNorm)>,
    conv1: SeparableConv,
    conv2: SeparableConv,
    conv_norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct NlReader {
    pub word_embedding: ParamId,
    char_embedding: Option<(ParamId, Linear, LayerNorm)>,
    blocks: Vec<NlBlock>,
    d: usize,
    literal_positions: bool,
}

impl NlReader {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        words: usize,
        chars: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericError> {
        let d = cfg.d_model;
        let word_embedding = store.add_embedding("nl.word_embedding", words, d, rng)?;
        let char_embedding = if cfg.disable_char_embed {
            None
        } else {
            let table = store.add_embedding("nl.char_embedding", chars, d, rng)?;
            let proj = Linear::new(store, "nl.char_proj", cfg.char_len * d, d, true, rng)?;
            let norm = LayerNorm::new(store, "nl.char_norm", d)?;
            Some((table, proj, norm))
        };
        let mut blocks = Vec::with_capacity(cfg.nl_layers);
        for b in 0..cfg.nl_layers {
            let p = format!("nl.block{b}");
            let self_att = if cfg.disable_self_att {
                None
            } else {
                Some((
                    MultiHeadAttention::new(store, &format!("{p}.self_att"), d, cfg.heads, rng)?,
                    LayerNorm::new(store, &format!("{p}.self_att_norm"), d)?,
                ))
            };
            let gate = if cfg.disable_char_embed {
                None
            } else {
                Some((
                    GateLayer::new(store, &format!("{p}.gate"), d, cfg.heads, rng)?,
                    LayerNorm::new(store, &format!("{p}.gate_norm"), d)?,
                ))
            };
            blocks.push(NlBlock {
                self_att,
                gate,
                conv1: SeparableConv::new(store, &format!("{p}.conv1"), d, cfg.conv_window, rng)?,
                conv2: SeparableConv::new(store, &format!("{p}.conv2"), d, cfg.conv_window, rng)?,
                conv_norm: LayerNorm::new(store, &format!("{p}.conv_norm"), d)?,
            });
        }
        Ok(NlReader { word_embedding, char_embedding, blocks, d, literal_positions: cfg.position_sin_only })
    }

    /// Character features: the M character embeddings of each token are
    /// concatenated, projected to d and normalized.
    pub fn char_embed(&self, g: &mut Graph, input: &NlInput) -> Result<Option<Var>, NlError> {
        let Some((table, proj, norm)) = &self.char_embedding else { return Ok(None) };
        let size = g.store().get(*table).rows();
        let expected = g.store().get(proj.weight).rows() / self.d;
        if input.char_len != expected {
            return Err(NlError::CharLength { expected, got: input.char_len });
        }
        if let Some(&bad) = input.char_ids.iter().find(|&&c| c >= size) {
            return Err(NlError::UnknownChar { id: bad, size });
        }
        let t = g.param(*table);
        let rows = g.gather_rows(t, &input.char_ids)?;
        let flat = g.reshape(rows, input.len(), input.char_len * self.d)?;
        let h = proj.forward(g, flat)?;
        Ok(Some(norm.forward(g, h)?))
    }

    /// One block. `x` already includes this block's position embedding.
    pub fn block(
        &self,
        g: &mut Graph,
        b: usize,
        x: Var,
        char_features: Option<Var>,
        dropout: f64,
    ) -> Result<Var, NumericError> {
        let blk = &self.blocks[b];
        let mut h = x;
        if let Some((att, norm)) = &blk.self_att {
            let a = att.forward(g, h, h, None)?;
            h = nn::residual_norm(g, h, a, norm, dropout)?;
        }
        if let (Some((gate, norm)), Some(c)) = (&blk.gate, char_features) {
            let m = gate.forward(g, h, c)?;
            h = nn::residual_norm(g, h, m, norm, dropout)?;
        }
        let c = blk.conv1.forward(g, h)?;
        let c = g.gelu(c);
        let c = blk.conv2.forward(g, c)?;
        nn::residual_norm(g, h, c, &blk.conv_norm, dropout)
    }

    pub fn encode(&self, g: &mut Graph, input: &NlInput, dropout: f64) -> Result<NlEncoding, NlError> {
        if input.is_empty() {
            return Err(NlError::Empty);
        }
        let size = g.store().get(self.word_embedding).rows();
        let ids: Vec<usize> = input.token_ids.iter().map(|&i| if i < size { i } else { UNK_ID }).collect();
        let table = g.param(self.word_embedding);
        let mut x = g.gather_rows(table, &ids)?;
        let char_features = self.char_embed(g, input)?;
        for b in 0..self.blocks.len() {
            let pos = g.constant(nn::position_matrix(input.len(), b + 1, self.d, self.literal_positions));
            let xin = g.add(x, pos)?;
            x = self.block(g, b, xin, char_features, dropout)?;
        }
        Ok(NlEncoding { features: x, char_features })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }
}
