//! Encodes a partial derivation: rule embeddings fused with rule
//! definitions, causal self-attention, NL attention and tree convolution
//! along the ancestor chain.

use rand::Rng;

use crate::config::ModelConfig;
use crate::grammar::{adjacency_matrix, DerivationState, Grammar, GrammarError, RuleRef, PAD_SYMBOL};
use crate::nl_reader::Vocabulary;
use crate::numeric::nn::{self, GateLayer, LayerNorm, Linear, MultiHeadAttention};
use crate::numeric::{Graph, NumericError, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum AstError {
    #[error("empty rule sequence")]
    Empty,
    #[error("rule at position {position} has arity {arity}, more than the configured {max}")]
    Arity { position: usize, arity: usize, max: usize },
    #[error("adjacency of size {got} does not match {expected} rules")]
    Adjacency { expected: usize, got: usize },
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// Reader input for the first `len` rules of a derivation.
#[derive(Debug, Clone, PartialEq)]
pub struct AstInput {
    /// Row in the rule embedding table; copy rules use the shared last row.
    pub rule_rows: Vec<usize>,
    /// Word id of the copied token, for copy rules.
    pub copy_words: Vec<Option<usize>>,
    pub depths: Vec<usize>,
    pub parent_links: Vec<usize>,
    /// P×width symbol ids: [α, β_1, …] padded with the pad symbol.
    pub rule_defs: Vec<usize>,
    pub def_width: usize,
}

impl AstInput {
    pub fn from_state(
        grammar: &Grammar,
        state: &DerivationState,
        len: usize,
        words: &Vocabulary,
        max_arity: usize,
    ) -> Result<Self, AstError> {
        if len == 0 || len > state.len() {
            return Err(AstError::Empty);
        }
        let copy_row = grammar.num_rules();
        let width = max_arity + 1;
        let mut inp = AstInput {
            rule_rows: Vec::with_capacity(len),
            copy_words: Vec::with_capacity(len),
            depths: state.depths()[..len].to_vec(),
            parent_links: state.rule_parent_index()[..len].to_vec(),
            rule_defs: Vec::with_capacity(len * width),
            def_width: width,
        };
        for (i, rule) in state.rules()[..len].iter().enumerate() {
            let parent = state.rule_parents()[i];
            let children = grammar.rule_definition(parent, rule)?;
            if children.len() > max_arity {
                return Err(AstError::Arity { position: i, arity: children.len(), max: max_arity });
            }
            match rule {
                RuleRef::Predefined(id) => {
                    inp.rule_rows.push(id.0);
                    inp.copy_words.push(None);
                }
                RuleRef::Copy(tok) => {
                    inp.rule_rows.push(copy_row);
                    inp.copy_words.push(Some(words.id(tok)));
                }
            }
            inp.rule_defs.push(parent.0);
            inp.rule_defs.extend(children.iter().map(|s| s.0));
            inp.rule_defs.extend(std::iter::repeat_n(PAD_SYMBOL.0, max_arity - children.len()));
        }
        Ok(inp)
    }

    pub fn len(&self) -> usize {
        self.rule_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rule_rows.is_empty()
    }

    /// Truncate to the first `len` rules.
    pub fn prefix(&self, len: usize) -> Self {
        AstInput {
            rule_rows: self.rule_rows[..len].to_vec(),
            copy_words: self.copy_words[..len].to_vec(),
            depths: self.depths[..len].to_vec(),
            parent_links: self.parent_links[..len].to_vec(),
            rule_defs: self.rule_defs[..len * self.def_width].to_vec(),
            def_width: self.def_width,
        }
    }
}

/// Constant selection matrices S_k = (M^k)ᵀ for k = 1..window−1, so that
/// row j of S_k·Y is the k-th ancestor's row (the root pads itself).
pub fn ancestor_selectors(g: &mut Graph, parent_links: &[usize], window: usize) -> Vec<Var> {
    let p = parent_links.len();
    (1..window)
        .map(|k| {
            let m = adjacency_matrix(parent_links, k);
            g.constant(Tensor::matrix(p, p, m.transpose_f64()).expect("square"))
        })
        .collect()
}

/// [Y; S_1·Y; …] concatenated along features: the tree convolution input.
pub fn tree_conv_input(g: &mut Graph, y: Var, selectors: &[Var]) -> Result<Var, NumericError> {
    let mut parts = vec![y];
    for &s in selectors {
        parts.push(g.matmul(s, y)?);
    }
    g.concat_cols(&parts)
}

#[derive(Debug, Clone)]
struct TreeConv {
    proj: Linear,
    norm: LayerNorm,
    dense: bool,
}

impl TreeConv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        window: usize,
        dense: bool,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericError> {
        let fan_in = if dense { d } else { window * d };
        Ok(TreeConv {
            proj: Linear::new(store, &format!("{name}.proj"), fan_in, d, true, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            dense,
        })
    }

    fn forward(&self, g: &mut Graph, y: Var, selectors: &[Var]) -> Result<Var, NumericError> {
        let input = if self.dense { y } else { tree_conv_input(g, y, selectors)? };
        let h = self.proj.forward(g, input)?;
        let h = g.gelu(h);
        self.norm.forward(g, h)
    }
}

#[derive(Debug, Clone)]
struct AstBlock {
    self_att: Option<(MultiHeadAttention, LayerNorm)>,
    gate: Option<(GateLayer, LayerNorm)>,
    nl_att: MultiHeadAttention,
    nl_norm: LayerNorm,
    tree_conv: Option<TreeConv>,
}

#[derive(Debug, Clone)]
pub struct AstReader {
    pub rule_embedding: ParamId,
    pub symbol_embedding: ParamId,
    word_embedding: ParamId,
    rule_def: Option<(Linear, Linear, LayerNorm)>,
    depth_embedding: ParamId,
    blocks: Vec<AstBlock>,
    final_convs: Vec<TreeConv>,
    d: usize,
    max_depth: usize,
    window: usize,
    literal_positions: bool,
}

impl AstReader {
    /// `rules` counts predefined rules; the embedding table gets one extra
    /// row shared by all copy rules. `word_embedding` is the NL reader's.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rules: usize,
        symbols: usize,
        max_arity: usize,
        word_embedding: ParamId,
        rng: &mut impl Rng,
    ) -> Result<Self, NumericError> {
        let d = cfg.d_model;
        let rule_embedding = store.add_embedding("ast.rule_embedding", rules + 1, d, rng)?;
        let symbol_embedding = store.add_embedding("ast.symbol_embedding", symbols, d, rng)?;
        let rule_def = if cfg.disable_rule_def {
            None
        } else {
            Some((
                Linear::new(store, "ast.def_proj", (max_arity + 1) * d, d, true, rng)?,
                Linear::new(store, "ast.rule_proj", 3 * d, d, true, rng)?,
                LayerNorm::new(store, "ast.rule_norm", d)?,
            ))
        };
        let depth_embedding = store.add_embedding("ast.depth_embedding", cfg.max_depth + 1, d, rng)?;
        let mut blocks = Vec::with_capacity(cfg.ast_layers);
        for b in 0..cfg.ast_layers {
            let p = format!("ast.block{b}");
            let self_att = if cfg.disable_self_att {
                None
            } else {
                Some((
                    MultiHeadAttention::new(store, &format!("{p}.self_att"), d, cfg.heads, rng)?,
                    LayerNorm::new(store, &format!("{p}.self_att_norm"), d)?,
                ))
            };
            let gate = if cfg.disable_rule_def {
                None
            } else {
                Some((
                    GateLayer::new(store, &format!("{p}.gate"), d, cfg.heads, rng)?,
                    LayerNorm::new(store, &format!("{p}.gate_norm"), d)?,
                ))
            };
            let tree_conv = if b < cfg.tree_conv_blocks {
                Some(TreeConv::new(store, &format!("{p}.tree_conv"), d, cfg.tree_conv_window, cfg.disable_tree_conv, rng)?)
            } else {
                None
            };
            blocks.push(AstBlock {
                self_att,
                gate,
                nl_att: MultiHeadAttention::new(store, &format!("{p}.nl_att"), d, cfg.heads, rng)?,
                nl_norm: LayerNorm::new(store, &format!("{p}.nl_norm"), d)?,
                tree_conv,
            });
        }
        let final_convs = (0..2)
            .map(|k| TreeConv::new(store, &format!("ast.final_conv{k}"), d, cfg.tree_conv_window, cfg.disable_tree_conv, rng))
            .collect::<Result<_, _>>()?;
        Ok(AstReader {
            rule_embedding,
            symbol_embedding,
            word_embedding,
            rule_def,
            depth_embedding,
            blocks,
            final_convs,
            d,
            max_depth: cfg.max_depth,
            window: cfg.tree_conv_window,
            literal_positions: cfg.position_sin_only,
        })
    }

    /// Table-lookup rule embeddings r_i. A copy rule adds the copied word's
    /// embedding to the shared copy row.
    pub fn rule_embeddings(&self, g: &mut Graph, input: &AstInput) -> Result<Var, AstError> {
        let table = g.param(self.rule_embedding);
        let r = g.gather_rows(table, &input.rule_rows)?;
        let copies: Vec<(usize, usize)> =
            input.copy_words.iter().enumerate().filter_map(|(i, w)| w.map(|w| (i, w))).collect();
        if copies.is_empty() {
            return Ok(r);
        }
        let words = g.param(self.word_embedding);
        let vocab = g.store().get(self.word_embedding).rows();
        // Non-copy rows pick the pad word and are then zeroed by the mask.
        let ids: Vec<usize> = input.copy_words.iter().map(|w| w.filter(|&w| w < vocab).unwrap_or(0)).collect();
        let w = g.gather_rows(words, &ids)?;
        let mask = g.constant(Tensor::column(input.copy_words.iter().map(|w| f64::from(u8::from(w.is_some()))).collect()));
        let w = g.mul_col(w, mask)?;
        Ok(g.add(r, w)?)
    }

    /// y^(rule) = norm(W_rule [r_i; r^(c); α]) with r^(c) a dense layer over
    /// the padded definition embeddings.
    pub fn rule_definition_encoding(&self, g: &mut Graph, input: &AstInput, r: Var) -> Result<Option<Var>, AstError> {
        let Some((def_proj, rule_proj, norm)) = &self.rule_def else { return Ok(None) };
        let p = input.len();
        let expected = def_proj_width(g, def_proj) / self.d;
        if input.def_width != expected {
            return Err(AstError::Arity { position: 0, arity: input.def_width - 1, max: expected - 1 });
        }
        let syms = g.param(self.symbol_embedding);
        let defs = g.gather_rows(syms, &input.rule_defs)?;
        let defs = g.reshape(defs, p, input.def_width * self.d)?;
        let content = def_proj.forward(g, defs)?;
        let parents: Vec<usize> = input.rule_defs.chunks(input.def_width).map(|c| c[0]).collect();
        let alpha = g.gather_rows(syms, &parents)?;
        let cat = g.concat_cols(&[r, content, alpha])?;
        let h = rule_proj.forward(g, cat)?;
        Ok(Some(norm.forward(g, h)?))
    }

    pub fn depth_rows(&self, depths: &[usize]) -> Vec<usize> {
        depths.iter().map(|&d| d.min(self.max_depth)).collect()
    }

    pub fn encode(&self, g: &mut Graph, input: &AstInput, nl: Var, dropout: f64) -> Result<Var, AstError> {
        if input.is_empty() {
            return Err(AstError::Empty);
        }
        let r = self.rule_embeddings(g, input)?;
        let y_rule = self.rule_definition_encoding(g, input, r)?;
        let dtable = g.param(self.depth_embedding);
        let depth = g.gather_rows(dtable, &self.depth_rows(&input.depths))?;
        let selectors = ancestor_selectors(g, &input.parent_links, self.window);
        self.encode_with(g, r, y_rule, depth, nl, &selectors, dropout)
    }

    #[allow(clippy::too_many_arguments)]
    fn encode_with(
        &self,
        g: &mut Graph,
        r: Var,
        y_rule: Option<Var>,
        depth: Var,
        nl: Var,
        selectors: &[Var],
        dropout: f64,
    ) -> Result<Var, AstError> {
        let p = g.shape(r).0;
        if let Some(&s) = selectors.first() {
            if g.shape(s).0 != p {
                return Err(AstError::Adjacency { expected: p, got: g.shape(s).0 });
            }
        }
        let mask = nn::causal_mask(p);
        let mut x = r;
        for (b, blk) in self.blocks.iter().enumerate() {
            let pos = g.constant(nn::position_matrix(p, b + 1, self.d, self.literal_positions));
            let h = g.add(x, pos)?;
            let mut h = g.add(h, depth)?;
            if let Some((att, norm)) = &blk.self_att {
                let a = att.forward(g, h, h, Some(&mask))?;
                h = nn::residual_norm(g, h, a, norm, dropout)?;
            }
            if let (Some((gate, norm)), Some(yr)) = (&blk.gate, y_rule) {
                let m = gate.forward(g, h, yr)?;
                h = nn::residual_norm(g, h, m, norm, dropout)?;
            }
            let a = blk.nl_att.forward(g, h, nl, None)?;
            h = nn::residual_norm(g, h, a, &blk.nl_norm, dropout)?;
            if let Some(tc) = &blk.tree_conv {
                h = tc.forward(g, h, selectors)?;
            }
            x = h;
        }
        for tc in &self.final_convs {
            x = tc.forward(g, x, selectors)?;
        }
        Ok(x)
    }
}

fn def_proj_width(g: &Graph, lin: &Linear) -> usize {
    g.store().get(lin.weight).rows()
}
