//! The assembled network: NL reader, AST reader, decoder and head sharing
//! one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ast_reader::{AstError, AstInput, AstReader};
use crate::config::ModelConfig;
use crate::decoder::{Decoder, DecoderError, HeadOutput, QueryPathInput};
use crate::grammar::{GrammarError, RuleMask};
use crate::nl_reader::{NlError, NlInput, NlReader};
use crate::numeric::{Graph, NumericError, ParamStore, Precision, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Nl(#[from] NlError),
    #[error(transparent)]
    Ast(#[from] AstError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("step {step}: target {target} is not a valid expansion")]
    TargetMasked { step: usize, target: String },
    #[error("derivation needs at least one rule after the start rule")]
    ShortDerivation,
}

/// Sizes fixed by the grammar and vocabularies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub rules: usize,
    pub symbols: usize,
    pub max_arity: usize,
    pub words: usize,
    pub chars: usize,
}

impl ModelDims {
    pub const KEYS: [&'static str; 5] = ["rules", "symbols", "max_arity", "words", "chars"];

    pub fn get(&self, key: &str) -> Option<usize> {
        Some(match key {
            "rules" => self.rules,
            "symbols" => self.symbols,
            "max_arity" => self.max_arity,
            "words" => self.words,
            "chars" => self.chars,
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: usize) -> bool {
        match key {
            "rules" => self.rules = value,
            "symbols" => self.symbols = value,
            "max_arity" => self.max_arity = value,
            "words" => self.words = value,
            "chars" => self.chars = value,
            _ => return false,
        }
        true
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub store: ParamStore,
    nl: NlReader,
    ast: AstReader,
    decoder: Decoder,
}

impl Model {
    pub fn new(config: &ModelConfig, dims: ModelDims, precision: Precision, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(precision);
        let nl = NlReader::new(&mut store, config, dims.words, dims.chars, &mut rng)?;
        let ast = AstReader::new(&mut store, config, dims.rules, dims.symbols, dims.max_arity, nl.word_embedding, &mut rng)?;
        let decoder = Decoder::new(&mut store, config, dims.rules, ast.symbol_embedding, &mut rng)?;
        Ok(Model { config: config.clone(), dims, store, nl, ast, decoder })
    }

    pub fn has_pointer(&self) -> bool {
        self.decoder.has_pointer()
    }

    pub fn max_path(&self) -> usize {
        self.decoder.max_path()
    }

    pub fn encode_nl(&self, g: &mut Graph, input: &NlInput, dropout: f64) -> Result<Var, ModelError> {
        Ok(self.nl.encode(g, input, dropout)?.features)
    }

    /// AST reader, decoder and head for a set of query rows. Row s attends to
    /// AST rows `0..visible[s]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_steps(
        &self,
        g: &mut Graph,
        nl: Var,
        ast: &AstInput,
        paths: &[QueryPathInput],
        visible: &[usize],
        masks: &[RuleMask],
        dropout: f64,
    ) -> Result<HeadOutput, ModelError> {
        let y = self.ast.encode(g, ast, nl, dropout)?;
        let q = self.decoder.encode_queries(g, paths)?;
        let h = self.decoder.decode(g, q, y, nl, visible, dropout)?;
        Ok(self.decoder.head(g, h, nl, masks)?)
    }

    /// Full pass: NL reader plus [`Model::forward_steps`] with causal
    /// visibility.
    pub fn forward(
        &self,
        g: &mut Graph,
        nl: &NlInput,
        ast: &AstInput,
        paths: &[QueryPathInput],
        masks: &[RuleMask],
        dropout: f64,
    ) -> Result<HeadOutput, ModelError> {
        let features = self.encode_nl(g, nl, dropout)?;
        let visible: Vec<usize> = (1..=paths.len()).collect();
        self.forward_steps(g, features, ast, paths, &visible, masks, dropout)
    }
}
