//! Path-query decoder and the output head: predefined-rule softmax, pointer
//! over description tokens and the p_g mixture.

use rand::Rng;

use crate::config::ModelConfig;
use crate::grammar::{RuleMask, SymbolId, PAD_SYMBOL};
use crate::numeric::nn::{self, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numeric::{Graph, NumericError, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum DecoderError {
    #[error("empty query path")]
    EmptyPath,
    #[error("step {step}: no valid expansion")]
    NoValidExpansion { step: usize },
    #[error("step {step}: mask covers {got} NL positions, expected {expected}")]
    MaskWidth { step: usize, expected: usize, got: usize },
    #[error("{queries} query rows but {visible} visibility entries")]
    Visibility { queries: usize, visible: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Root-to-frontier symbols, clamped to the deepest `max_path` and padded at
/// the tail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryPathInput {
    pub symbol_ids: Vec<usize>,
}

impl QueryPathInput {
    pub fn new(path: &[SymbolId], max_path: usize) -> Result<Self, DecoderError> {
        if path.is_empty() {
            return Err(DecoderError::EmptyPath);
        }
        let start = path.len().saturating_sub(max_path);
        let mut symbol_ids: Vec<usize> = path[start..].iter().map(|s| s.0).collect();
        symbol_ids.resize(max_path, PAD_SYMBOL.0);
        Ok(QueryPathInput { symbol_ids })
    }
}

/// Next-rule distribution at one step. A side with no valid entry is all
/// zeros and the gate is pinned to the other side.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleDistribution {
    pub gate: f64,
    pub predefined: Vec<f64>,
    pub copy: Vec<f64>,
    pub mask: RuleMask,
}

impl RuleDistribution {
    pub fn predefined_prob(&self, id: usize) -> f64 {
        self.gate * self.predefined[id]
    }

    pub fn copy_prob(&self, pos: usize) -> f64 {
        (1.0 - self.gate) * self.copy[pos]
    }

    pub fn total_mass(&self) -> f64 {
        self.gate * self.predefined.iter().sum::<f64>() + (1.0 - self.gate) * self.copy.iter().sum::<f64>()
    }
}

/// Graph handles for a batch of steps. `probs` is S×(R+L): gated predefined
/// probabilities followed by gated copy probabilities.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub gate: Var,
    pub predefined: Var,
    pub copy: Option<Var>,
    pub probs: Var,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ast_att: MultiHeadAttention,
    ast_norm: LayerNorm,
    nl_att: MultiHeadAttention,
    nl_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Debug, Clone)]
struct Pointer {
    gate: Linear,
    from_decoder: Linear,
    from_nl: Linear,
    v: Linear,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    symbol_embedding: ParamId,
    query_proj: Linear,
    query_norm: LayerNorm,
    blocks: Vec<DecoderBlock>,
    rules: Linear,
    pointer: Option<Pointer>,
    max_path: usize,
    d: usize,
}

impl Decoder {
    /// `symbol_embedding` is shared with the AST reader.
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rules: usize,
        symbol_embedding: ParamId,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericError> {
        let d = cfg.d_model;
        let mut blocks = Vec::with_capacity(cfg.decoder_layers);
        for b in 0..cfg.decoder_layers {
            let p = format!("dec.block{b}");
            blocks.push(DecoderBlock {
                ast_att: MultiHeadAttention::new(store, &format!("{p}.ast_att"), d, cfg.heads, rng)?,
                ast_norm: LayerNorm::new(store, &format!("{p}.ast_norm"), d)?,
                nl_att: MultiHeadAttention::new(store, &format!("{p}.nl_att"), d, cfg.heads, rng)?,
                nl_norm: LayerNorm::new(store, &format!("{p}.nl_norm"), d)?,
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, cfg.ffn_dim, rng)?,
                ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d)?,
            });
        }
        let pointer = if cfg.disable_pointer {
            None
        } else {
            Some(Pointer {
                gate: Linear::new(store, "head.gate", d, 1, true, rng)?,
                from_decoder: Linear::new(store, "head.pointer_dec", d, d, false, rng)?,
                from_nl: Linear::new(store, "head.pointer_nl", d, d, true, rng)?,
                v: Linear::new(store, "head.pointer_v", d, 1, false, rng)?,
            })
        };
        Ok(Decoder {
            symbol_embedding,
            query_proj: Linear::new(store, "dec.query_proj", cfg.max_path * d, d, true, rng)?,
            query_norm: LayerNorm::new(store, "dec.query_norm", d)?,
            blocks,
            rules: Linear::new(store, "head.rules", d, rules, true, rng)?,
            pointer,
            max_path: cfg.max_path,
            d,
        })
    }

    pub fn max_path(&self) -> usize {
        self.max_path
    }

    pub fn has_pointer(&self) -> bool {
        self.pointer.is_some()
    }

    /// One query vector per path: embed, concatenate, project, normalize.
    pub fn encode_queries(&self, g: &mut Graph, paths: &[QueryPathInput]) -> Result<Var, DecoderError> {
        if paths.is_empty() {
            return Err(DecoderError::EmptyPath);
        }
        let ids: Vec<usize> = paths.iter().flat_map(|p| p.symbol_ids.iter().copied()).collect();
        let table = g.param(self.symbol_embedding);
        let e = g.gather_rows(table, &ids)?;
        let e = g.reshape(e, paths.len(), self.max_path * self.d)?;
        let h = self.query_proj.forward(g, e)?;
        Ok(self.query_norm.forward(g, h)?)
    }

    /// Runs the decoder blocks. Query row s attends to AST rows
    /// `0..visible[s]`.
    pub fn decode(
        &self,
        g: &mut Graph,
        queries: Var,
        ast: Var,
        nl: Var,
        visible: &[usize],
        dropout: f64,
    ) -> Result<Var, DecoderError> {
        let s = g.shape(queries).0;
        let p = g.shape(ast).0;
        if visible.len() != s {
            return Err(DecoderError::Visibility { queries: s, visible: visible.len() });
        }
        let mask: Vec<bool> = visible.iter().flat_map(|&v| (0..p).map(move |c| c < v)).collect();
        let mut h = queries;
        for blk in &self.blocks {
            let a = blk.ast_att.forward(g, h, ast, Some(&mask))?;
            h = nn::residual_norm(g, h, a, &blk.ast_norm, dropout)?;
            let a = blk.nl_att.forward(g, h, nl, None)?;
            h = nn::residual_norm(g, h, a, &blk.nl_norm, dropout)?;
            let f = blk.ffn.forward(g, h)?;
            h = nn::residual_norm(g, h, f, &blk.ffn_norm, dropout)?;
        }
        Ok(h)
    }

    /// Pointer logits ξ[s,t] = vᵀ tanh(W1 h_s + W2 y_t), as an S×L matrix.
    pub fn pointer_logits(&self, g: &mut Graph, h: Var, nl: Var) -> Result<Option<Var>, DecoderError> {
        let Some(ptr) = &self.pointer else { return Ok(None) };
        let s = g.shape(h).0;
        let l = g.shape(nl).0;
        let a = ptr.from_decoder.forward(g, h)?;
        let b = ptr.from_nl.forward(g, nl)?;
        let a = g.gather_rows(a, &(0..s * l).map(|k| k / l).collect::<Vec<_>>())?;
        let b = g.gather_rows(b, &(0..s * l).map(|k| k % l).collect::<Vec<_>>())?;
        let sum = g.add(a, b)?;
        let t = g.tanh(sum);
        let xi = ptr.v.forward(g, t)?;
        Ok(Some(g.reshape(xi, s, l)?))
    }

    /// Masked distributions for each decoder row.
    pub fn head(&self, g: &mut Graph, h: Var, nl: Var, masks: &[RuleMask]) -> Result<HeadOutput, DecoderError> {
        let s = g.shape(h).0;
        let l = g.shape(nl).0;
        if masks.len() != s {
            return Err(DecoderError::Visibility { queries: s, visible: masks.len() });
        }
        let pointer = self.pointer.is_some();
        for (step, m) in masks.iter().enumerate() {
            if m.copy.len() != l {
                return Err(DecoderError::MaskWidth { step, expected: l, got: m.copy.len() });
            }
            if !m.any_predefined() && !(pointer && m.any_copy()) {
                return Err(DecoderError::NoValidExpansion { step });
            }
        }
        // Rows with nothing valid on one side get an open mask; the gate
        // gives that side zero weight.
        let side_mask = |side: &dyn Fn(&RuleMask) -> &[bool]| -> Vec<bool> {
            masks
                .iter()
                .flat_map(|m| {
                    let v = side(m);
                    let open = !v.iter().any(|&b| b);
                    v.iter().map(move |&b| b || open)
                })
                .collect()
        };
        let logits = self.rules.forward(g, h)?;
        let predefined = g.softmax(logits, Some(&side_mask(&|m| &m.predefined)))?;
        let Some(ptr) = &self.pointer else {
            let gate = g.constant(Tensor::column(vec![1.0; s]));
            return Ok(HeadOutput { gate, predefined, copy: None, probs: predefined });
        };
        let xi = self.pointer_logits(g, h, nl)?.expect("pointer present");
        let copy = g.softmax(xi, Some(&side_mask(&|m| &m.copy)))?;
        let raw = ptr.gate.forward(g, h)?;
        let raw = g.sigmoid(raw);
        let (keep, fixed): (Vec<f64>, Vec<f64>) = masks
            .iter()
            .map(|m| match (m.any_predefined(), m.any_copy()) {
                (false, _) => (0.0, 0.0),
                (true, false) => (0.0, 1.0),
                (true, true) => (1.0, 0.0),
            })
            .unzip();
        let keep = g.constant(Tensor::column(keep));
        let fixed = g.constant(Tensor::column(fixed));
        let gate = g.mul(raw, keep)?;
        let gate = g.add(gate, fixed)?;
        let inv = g.affine(gate, -1.0, 1.0);
        let pd = g.mul_col(predefined, gate)?;
        let pc = g.mul_col(copy, inv)?;
        let probs = g.concat_cols(&[pd, pc])?;
        Ok(HeadOutput { gate, predefined, copy: Some(copy), probs })
    }

    /// Reads per-step distributions out of evaluated head output.
    pub fn distributions(g: &Graph, out: &HeadOutput, masks: &[RuleMask]) -> Vec<RuleDistribution> {
        let gate = g.value(out.gate);
        let pd = g.value(out.predefined);
        masks
            .iter()
            .enumerate()
            .map(|(s, m)| {
                let side = |vals: &[f64], valid: &[bool]| -> Vec<f64> {
                    vals.iter().zip(valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect()
                };
                let copy = match out.copy {
                    Some(c) => side(g.value(c).row_slice(s), &m.copy),
                    None => vec![0.0; m.copy.len()],
                };
                RuleDistribution {
                    gate: gate.get(s, 0),
                    predefined: side(pd.row_slice(s), &m.predefined),
                    copy,
                    mask: m.clone(),
                }
            })
            .collect()
    }
}
