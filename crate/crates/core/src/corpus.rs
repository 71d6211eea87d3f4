//! JSONL corpora of description/program pairs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::grammar::{
    decompose, derive, linearize, parse_program_tokens, parse_sexpr, AstNode, Grammar, GrammarError, RuleRef,
};
use crate::model::{ModelDims, ModelError};
use crate::nl_reader::{tokenize, TokenizeMode, Vocabulary};
use crate::training::TrainExample;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("corpus has no records")]
    Empty,
    #[error("record {id}: {reason}")]
    Record { id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProgramFormat {
    /// Whitespace-separated program tokens.
    #[default]
    Tokens,
    /// Serialized tree, `(Symbol child …)`.
    Ast,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub description: String,
    pub program: String,
    #[serde(default)]
    pub format: ProgramFormat,
}

impl CorpusRecord {
    pub fn tree(&self, grammar: &Grammar) -> Result<AstNode, GrammarError> {
        match self.format {
            ProgramFormat::Tokens => {
                let tokens: Vec<String> = self.program.split_whitespace().map(String::from).collect();
                parse_program_tokens(grammar, &tokens)
            }
            ProgramFormat::Ast => parse_sexpr(grammar, &self.program),
        }
    }
}

pub fn parse_records(text: &str) -> Result<Vec<CorpusRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(line).map_err(|source| CorpusError::Json { line: i + 1, source })?;
        if rec.description.trim().is_empty() || rec.program.trim().is_empty() {
            return Err(CorpusError::Record { id: rec.id, reason: "empty description or program".into() });
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<CorpusRecord>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    parse_records(&text)
}

/// One JSON object per line.
pub fn records_to_text(records: &[CorpusRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("plain strings serialize") + "\n").collect()
}

/// A record after tokenization and decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedExample {
    pub id: String,
    pub tokens: Vec<String>,
    pub rules: Vec<RuleRef>,
    pub program: Vec<String>,
}

/// A record that could not be used.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusIssue {
    pub index: usize,
    pub id: String,
    pub reason: String,
}

impl std::fmt::Display for CorpusIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "record {} ({}): {}", self.index, self.id, self.reason)
    }
}

fn issue_or_fail(issues: &mut Vec<CorpusIssue>, strict: bool, issue: CorpusIssue) -> Result<(), CorpusError> {
    if strict {
        return Err(CorpusError::Record { id: issue.id, reason: issue.reason });
    }
    log::warn!("skipping {issue}");
    issues.push(issue);
    Ok(())
}

/// Tokenizes descriptions and decomposes programs. With `promote`, copy-slot
/// tokens absent from their own description first become predefined
/// literal rules of `grammar`, so decomposition sees the final rule set.
pub fn prepare(
    records: &[CorpusRecord],
    mode: TokenizeMode,
    grammar: &mut Grammar,
    promote: bool,
    strict: bool,
) -> Result<(Vec<ParsedExample>, Vec<CorpusIssue>), CorpusError> {
    let mut issues = Vec::new();
    let mut trees = Vec::with_capacity(records.len());
    for (index, rec) in records.iter().enumerate() {
        let tokens = tokenize(&rec.description, mode);
        let parsed = rec.tree(grammar).and_then(|tree| Ok((decompose(grammar, &tree)?, tree)));
        match parsed {
            Ok((rules, tree)) => trees.push(Some((tokens, rules, tree))),
            Err(e) => {
                issue_or_fail(&mut issues, strict, CorpusIssue { index, id: rec.id.clone(), reason: e.to_string() })?;
                trees.push(None);
            }
        }
    }
    if promote {
        for (tokens, rules, _) in trees.iter().flatten() {
            let state = derive(grammar, rules).map_err(|e| CorpusError::Record { id: String::new(), reason: e.to_string() })?;
            for (rule, &parent) in rules.iter().zip(state.rule_parents()) {
                if let RuleRef::Copy(tok) = rule {
                    if !tokens.contains(tok) {
                        grammar
                            .promote(parent, tok)
                            .map_err(|e| CorpusError::Record { id: String::new(), reason: e.to_string() })?;
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    for (index, item) in trees.into_iter().enumerate() {
        let Some((tokens, _, tree)) = item else { continue };
        let id = records[index].id.clone();
        let result = decompose(grammar, &tree).and_then(|rules| Ok((rules, linearize(&tree)?)));
        match result {
            Ok((rules, program)) if !tokens.is_empty() => out.push(ParsedExample { id, tokens, rules, program }),
            Ok(_) => issue_or_fail(&mut issues, strict, CorpusIssue { index, id, reason: "empty description".into() })?,
            Err(e) => issue_or_fail(&mut issues, strict, CorpusIssue { index, id, reason: e.to_string() })?,
        }
    }
    Ok((out, issues))
}

/// Word and character vocabularies over the descriptions.
pub fn build_vocabularies(examples: &[ParsedExample]) -> (Vocabulary, Vocabulary) {
    let words = Vocabulary::build(examples.iter().flat_map(|e| e.tokens.iter().map(String::as_str)));
    let chars = Vocabulary::build_chars(examples.iter().flat_map(|e| e.tokens.iter().map(String::as_str)));
    (words, chars)
}

/// Teacher-forcing data for each parsed example. Examples the model cannot
/// score (for instance a copied token missing from the description) are
/// reported, or fatal under `strict`.
pub fn to_train_examples(
    parsed: &[ParsedExample],
    grammar: &Grammar,
    cfg: &ModelConfig,
    max_arity: usize,
    words: &Vocabulary,
    chars: &Vocabulary,
    strict: bool,
) -> Result<(Vec<TrainExample>, Vec<CorpusIssue>), CorpusError> {
    let mut out = Vec::new();
    let mut issues = Vec::new();
    for (index, p) in parsed.iter().enumerate() {
        let r: Result<TrainExample, ModelError> =
            TrainExample::new(grammar, cfg, max_arity, words, chars, &p.id, p.tokens.clone(), p.rules.clone());
        match r {
            Ok(ex) => out.push(ex),
            Err(e) => issue_or_fail(&mut issues, strict, CorpusIssue { index, id: p.id.clone(), reason: e.to_string() })?,
        }
    }
    Ok((out, issues))
}

/// A grammar with its vocabularies and teacher-forcing examples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grammar: Grammar,
    pub words: Vocabulary,
    pub chars: Vocabulary,
    pub parsed: Vec<ParsedExample>,
    pub examples: Vec<TrainExample>,
    pub issues: Vec<CorpusIssue>,
}

impl Dataset {
    /// Prepares `records` with promotion and vocabularies built from them.
    pub fn build(
        mut grammar: Grammar,
        records: &[CorpusRecord],
        mode: TokenizeMode,
        cfg: &ModelConfig,
        strict: bool,
    ) -> Result<Self, CorpusError> {
        let (parsed, mut issues) = prepare(records, mode, &mut grammar, true, strict)?;
        let (words, chars) = build_vocabularies(&parsed);
        let (examples, more) = to_train_examples(&parsed, &grammar, cfg, grammar.max_arity(), &words, &chars, strict)?;
        issues.extend(more);
        Ok(Dataset { grammar, words, chars, parsed, examples, issues })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            rules: self.grammar.num_rules(),
            symbols: self.grammar.num_symbols(),
            max_arity: self.grammar.max_arity(),
            words: self.words.len(),
            chars: self.chars.len(),
        }
    }
}
