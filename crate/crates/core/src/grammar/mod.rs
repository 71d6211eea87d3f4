//! Context-free grammars over which programs are generated.
//!
//! A program is represented by the pre-order sequence of rules that derives
//! its syntax tree. This module owns the rule inventory, the derivation state
//! machine and the structural facts the network consumes (depths, parent
//! links, ancestor adjacency, root-to-frontier paths and validity masks).

mod derivation;
mod program;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

pub use derivation::{
    adjacency_matrix, decompose, derive, linearize, valid_rule_mask, AdjacencyMatrix, AstNode,
    DerivationState, RuleMask,
};
pub use program::{parse_program_tokens, parse_sexpr};

/// Reserved symbol used to pad symbol sequences.
pub const PAD_SYMBOL: SymbolId = SymbolId(0);
/// The synthetic root expanded by the start rule.
pub const START_NODE: SymbolId = SymbolId(1);
/// Terminal class of tokens produced by copy rules.
pub const TOKEN_SYMBOL: SymbolId = SymbolId(2);
/// The start rule `snode -> <start symbol>` always has id 0.
pub const START_RULE: RuleId = RuleId(0);

const RESERVED_NAMES: [&str; 3] = ["<pad>", "snode", "<token>"];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GrammarError {
    #[error("line {line}: syntax error: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: duplicate rule `{rule}`")]
    DuplicateRule { line: usize, rule: String },
    #[error("line {line}: `{name}` is a reserved symbol name")]
    ReservedName { line: usize, name: String },
    #[error("grammar defines no rules")]
    Empty,
    #[error("nonterminal `{symbol}` is unreachable from the start symbol `{start}`")]
    Unreachable { symbol: String, start: String },
    #[error("unknown rule id {0}")]
    UnknownRule(usize),
    #[error("step {position}: rule `{rule}` cannot expand frontier `{frontier}`")]
    FrontierMismatch {
        position: usize,
        rule: String,
        frontier: String,
    },
    #[error("extra rules after completion (position {position})")]
    ExtraRules { position: usize },
    #[error("rule sequence must start with the start rule")]
    MissingStartRule,
    #[error("rule sequence is empty")]
    EmptySequence,
    #[error("derivation complete: no frontier to expand")]
    DerivationComplete,
    #[error("derivation is incomplete")]
    Incomplete,
    #[error("`{symbol}` cannot be copied into: it is not a copy slot")]
    NotCopySlot { symbol: String },
    #[error("no rule `{parent} -> {children}` and it is not expressible as a copy")]
    UnknownProduction { parent: String, children: String },
    #[error("cannot parse program: {0}")]
    Unparseable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SymbolId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RuleId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SymbolKind {
    Terminal,
    Nonterminal,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Symbol {
    pub name: String,
    pub kind: SymbolKind,
}

impl Symbol {
    pub fn is_terminal(&self) -> bool {
        self.kind == SymbolKind::Terminal
    }
}

/// A predefined production `parent -> children`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrammarRule {
    pub id: RuleId,
    pub parent: SymbolId,
    pub children: Vec<SymbolId>,
}

/// A rule as it appears in a derivation: either a predefined rule or a copy
/// of a description token into the frontier slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RuleRef {
    Predefined(RuleId),
    Copy(String),
}

#[derive(Debug, Clone)]
pub struct Grammar {
    symbols: Vec<Symbol>,
    rules: Vec<GrammarRule>,
    start_symbol: SymbolId,
    copy_slots: BTreeSet<SymbolId>,
    symbol_index: HashMap<(SymbolKind, String), SymbolId>,
    rules_by_parent: Vec<Vec<RuleId>>,
    rule_index: HashMap<(SymbolId, Vec<SymbolId>), RuleId>,
    reserved_literals: HashSet<String>,
}

impl Grammar {
    /// Parses the line-oriented grammar format.
    ///
    /// Each non-empty line is either a rule `Parent -> Child1 Child2 ...` or a
    /// `%copy Name ...` directive declaring copy slots. `#` starts a comment.
    /// Symbols appearing on a left-hand side (or declared as copy slots) are
    /// nonterminals; everything else, including quoted literals, is terminal.
    /// Rule ids follow file order starting at 1; id 0 is the synthesized start
    /// rule `snode -> <first left-hand side>`.
    pub fn parse(text: &str) -> Result<Self, GrammarError> {
        let mut raw_rules: Vec<(usize, String, Vec<RawSymbol>)> = Vec::new();
        let mut copy_decls: Vec<(usize, String)> = Vec::new();

        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = strip_comment(raw_line);
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("%copy") {
                let names: Vec<&str> = rest.split_whitespace().collect();
                if names.is_empty() || !rest.starts_with(char::is_whitespace) {
                    return Err(syntax(line_no, "`%copy` needs at least one symbol name"));
                }
                for name in names {
                    check_bare_name(line_no, name)?;
                    copy_decls.push((line_no, name.to_string()));
                }
                continue;
            }
            let Some((lhs, rhs)) = line.split_once("->") else {
                return Err(syntax(line_no, "expected `Parent -> Child ...`"));
            };
            let lhs = lhs.trim();
            if lhs.is_empty() {
                return Err(syntax(line_no, "missing left-hand side"));
            }
            if lhs.split_whitespace().count() != 1 {
                return Err(syntax(line_no, "left-hand side must be a single symbol"));
            }
            check_bare_name(line_no, lhs)?;
            let children = lex_rhs(line_no, rhs)?;
            if children.is_empty() {
                return Err(syntax(line_no, "right-hand side is empty"));
            }
            raw_rules.push((line_no, lhs.to_string(), children));
        }

        if raw_rules.is_empty() {
            return Err(GrammarError::Empty);
        }

        let nonterminal_names: HashSet<&str> = raw_rules
            .iter()
            .map(|(_, lhs, _)| lhs.as_str())
            .chain(copy_decls.iter().map(|(_, n)| n.as_str()))
            .collect();

        let mut grammar = Grammar::with_reserved();
        let start_name = raw_rules[0].1.clone();
        let start_symbol = grammar.intern(&start_name, SymbolKind::Nonterminal);
        grammar.start_symbol = start_symbol;
        grammar.push_rule(START_NODE, vec![start_symbol]);

        for (_, name) in &copy_decls {
            let id = grammar.intern(name, SymbolKind::Nonterminal);
            grammar.copy_slots.insert(id);
        }

        for (line_no, lhs, rhs) in &raw_rules {
            let parent = grammar.intern(lhs, SymbolKind::Nonterminal);
            let children: Vec<SymbolId> = rhs
                .iter()
                .map(|sym| match sym {
                    RawSymbol::Bare(name) if nonterminal_names.contains(name.as_str()) => {
                        grammar.intern(name, SymbolKind::Nonterminal)
                    }
                    RawSymbol::Bare(name) | RawSymbol::Quoted(name) => {
                        grammar.intern(name, SymbolKind::Terminal)
                    }
                })
                .collect();
            if grammar.rule_index.contains_key(&(parent, children.clone())) {
                return Err(GrammarError::DuplicateRule {
                    line: *line_no,
                    rule: format!("{} -> {}", lhs, grammar.render_symbols(&children)),
                });
            }
            grammar.push_rule(parent, children);
        }

        grammar.check_reachable()?;
        grammar.refresh_reserved_literals();
        Ok(grammar)
    }

    fn with_reserved() -> Self {
        let mut grammar = Grammar {
            symbols: Vec::new(),
            rules: Vec::new(),
            start_symbol: START_NODE,
            copy_slots: BTreeSet::new(),
            symbol_index: HashMap::new(),
            rules_by_parent: Vec::new(),
            rule_index: HashMap::new(),
            reserved_literals: HashSet::new(),
        };
        grammar.intern(RESERVED_NAMES[0], SymbolKind::Terminal);
        grammar.intern(RESERVED_NAMES[1], SymbolKind::Nonterminal);
        grammar.intern(RESERVED_NAMES[2], SymbolKind::Terminal);
        grammar
    }

    fn intern(&mut self, name: &str, kind: SymbolKind) -> SymbolId {
        if let Some(&id) = self.symbol_index.get(&(kind, name.to_string())) {
            return id;
        }
        let id = SymbolId(self.symbols.len());
        self.symbols.push(Symbol {
            name: name.to_string(),
            kind,
        });
        self.symbol_index.insert((kind, name.to_string()), id);
        self.rules_by_parent.push(Vec::new());
        id
    }

    fn push_rule(&mut self, parent: SymbolId, children: Vec<SymbolId>) -> RuleId {
        let id = RuleId(self.rules.len());
        self.rule_index.insert((parent, children.clone()), id);
        self.rules_by_parent[parent.0].push(id);
        self.rules.push(GrammarRule {
            id,
            parent,
            children,
        });
        id
    }

    fn check_reachable(&self) -> Result<(), GrammarError> {
        let mut seen = vec![false; self.symbols.len()];
        let mut stack = vec![self.start_symbol];
        seen[self.start_symbol.0] = true;
        while let Some(sym) = stack.pop() {
            for rule in &self.rules_by_parent[sym.0] {
                for &child in &self.rules[rule.0].children {
                    if !seen[child.0] {
                        seen[child.0] = true;
                        stack.push(child);
                    }
                }
            }
        }
        for (idx, symbol) in self.symbols.iter().enumerate().skip(RESERVED_NAMES.len()) {
            if !symbol.is_terminal() && !seen[idx] {
                return Err(GrammarError::Unreachable {
                    symbol: symbol.name.clone(),
                    start: self.symbols[self.start_symbol.0].name.clone(),
                });
            }
        }
        Ok(())
    }

    fn refresh_reserved_literals(&mut self) {
        self.reserved_literals = self
            .rules
            .iter()
            .filter(|r| r.parent != START_NODE && !self.copy_slots.contains(&r.parent))
            .flat_map(|r| r.children.iter())
            .filter(|c| self.symbols[c.0].is_terminal())
            .map(|c| self.symbols[c.0].name.clone())
            .collect();
    }

    /// Adds `parent -> "token"` as a predefined rule, returning its id.
    /// Only copy slots accept new terminal expansions.
    pub fn promote(&mut self, parent: SymbolId, token: &str) -> Result<RuleId, GrammarError> {
        if !self.copy_slots.contains(&parent) {
            return Err(GrammarError::NotCopySlot {
                symbol: self.symbol(parent).name.clone(),
            });
        }
        let literal = self.intern(token, SymbolKind::Terminal);
        if let Some(&id) = self.rule_index.get(&(parent, vec![literal])) {
            return Ok(id);
        }
        Ok(self.push_rule(parent, vec![literal]))
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.symbols
    }

    pub fn symbol(&self, id: SymbolId) -> &Symbol {
        &self.symbols[id.0]
    }

    pub fn symbol_id(&self, name: &str, kind: SymbolKind) -> Option<SymbolId> {
        self.symbol_index.get(&(kind, name.to_string())).copied()
    }

    pub fn nonterminal(&self, name: &str) -> Option<SymbolId> {
        self.symbol_id(name, SymbolKind::Nonterminal)
    }

    pub fn terminal(&self, name: &str) -> Option<SymbolId> {
        self.symbol_id(name, SymbolKind::Terminal)
    }

    pub fn rules(&self) -> &[GrammarRule] {
        &self.rules
    }

    pub fn rule(&self, id: RuleId) -> Result<&GrammarRule, GrammarError> {
        self.rules.get(id.0).ok_or(GrammarError::UnknownRule(id.0))
    }

    /// Number of predefined rules, including the start rule.
    pub fn num_rules(&self) -> usize {
        self.rules.len()
    }

    pub fn num_symbols(&self) -> usize {
        self.symbols.len()
    }

    pub fn start_symbol(&self) -> SymbolId {
        self.start_symbol
    }

    pub fn start_rule(&self) -> &GrammarRule {
        &self.rules[START_RULE.0]
    }

    pub fn rules_for(&self, parent: SymbolId) -> &[RuleId] {
        &self.rules_by_parent[parent.0]
    }

    pub fn find_rule(&self, parent: SymbolId, children: &[SymbolId]) -> Option<RuleId> {
        self.rule_index.get(&(parent, children.to_vec())).copied()
    }

    /// Predefined rule `parent -> "token"` if one exists.
    pub fn literal_rule(&self, parent: SymbolId, token: &str) -> Option<RuleId> {
        let literal = self.terminal(token)?;
        self.find_rule(parent, &[literal])
    }

    pub fn is_copy_slot(&self, symbol: SymbolId) -> bool {
        self.copy_slots.contains(&symbol)
    }

    pub fn copy_slots(&self) -> impl Iterator<Item = SymbolId> + '_ {
        self.copy_slots.iter().copied()
    }

    /// Whether `token` may be copied into a copy slot. Literals that act as
    /// fixed syntax elsewhere in the grammar are excluded so token programs
    /// parse unambiguously.
    pub fn token_copyable(&self, token: &str) -> bool {
        !self.reserved_literals.contains(token)
    }

    /// Largest right-hand-side length over predefined rules.
    pub fn max_arity(&self) -> usize {
        self.rules.iter().map(|r| r.children.len()).max().unwrap_or(1)
    }

    /// Parent symbol and child symbols of a rule reference.
    pub fn rule_definition(&self, parent: SymbolId, rule: &RuleRef) -> Result<Vec<SymbolId>, GrammarError> {
        match rule {
            RuleRef::Predefined(id) => Ok(self.rule(*id)?.children.clone()),
            RuleRef::Copy(_) => {
                if self.is_copy_slot(parent) {
                    Ok(vec![TOKEN_SYMBOL])
                } else {
                    Err(GrammarError::NotCopySlot {
                        symbol: self.symbol(parent).name.clone(),
                    })
                }
            }
        }
    }

    pub fn render_symbols(&self, ids: &[SymbolId]) -> String {
        ids.iter()
            .map(|&id| self.render_symbol(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn render_symbol(&self, id: SymbolId) -> String {
        let sym = self.symbol(id);
        if sym.is_terminal() {
            quote(&sym.name)
        } else {
            sym.name.clone()
        }
    }

    pub fn render_rule(&self, rule: &RuleRef) -> String {
        match rule {
            RuleRef::Predefined(id) => match self.rule(*id) {
                Ok(r) => format!(
                    "{} -> {}",
                    self.symbol(r.parent).name,
                    self.render_symbols(&r.children)
                ),
                Err(_) => format!("<unknown rule {}>", id.0),
            },
            RuleRef::Copy(token) => format!("<copy> -> {}", quote(token)),
        }
    }

    /// Serializes back into the file format. Parsing the output yields a
    /// grammar with identical symbols-by-name and rule ids.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.copy_slots.is_empty() {
            out.push_str("%copy");
            for &slot in &self.copy_slots {
                out.push(' ');
                out.push_str(&self.symbol(slot).name);
            }
            out.push('\n');
        }
        for rule in self.rules.iter().skip(1) {
            out.push_str(&self.symbol(rule.parent).name);
            out.push_str(" -> ");
            out.push_str(&self.render_symbols(&rule.children));
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

enum RawSymbol {
    Bare(String),
    Quoted(String),
}

fn syntax(line: usize, message: &str) -> GrammarError {
    GrammarError::Syntax {
        line,
        message: message.to_string(),
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    let mut escaped = false;
    for (i, ch) in line.char_indices() {
        match ch {
            _ if escaped => escaped = false,
            '\\' if in_quote => escaped = true,
            '"' => in_quote = !in_quote,
            '#' if !in_quote => return &line[..i],
            _ => {}
        }
    }
    line
}

fn check_bare_name(line: usize, name: &str) -> Result<(), GrammarError> {
    if RESERVED_NAMES.contains(&name) {
        return Err(GrammarError::ReservedName {
            line,
            name: name.to_string(),
        });
    }
    if name.contains('"') || name.starts_with('%') || name.contains("->") {
        return Err(syntax(line, &format!("invalid symbol name `{name}`")));
    }
    Ok(())
}

fn lex_rhs(line: usize, rhs: &str) -> Result<Vec<RawSymbol>, GrammarError> {
    let mut out = Vec::new();
    let mut chars = rhs.chars().peekable();
    while let Some(&ch) = chars.peek() {
        if ch.is_whitespace() {
            chars.next();
            continue;
        }
        if ch == '"' {
            chars.next();
            let mut lit = String::new();
            let mut closed = false;
            while let Some(c) = chars.next() {
                match c {
                    '\\' => match chars.next() {
                        Some(e) => lit.push(e),
                        None => break,
                    },
                    '"' => {
                        closed = true;
                        break;
                    }
                    other => lit.push(other),
                }
            }
            if !closed {
                return Err(syntax(line, "unterminated quoted literal"));
            }
            if lit.is_empty() || lit.chars().any(char::is_whitespace) {
                return Err(syntax(line, "literals must be non-empty single tokens"));
            }
            out.push(RawSymbol::Quoted(lit));
        } else {
            let mut name = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                name.push(c);
                chars.next();
            }
            check_bare_name(line, &name)?;
            out.push(RawSymbol::Bare(name));
        }
    }
    Ok(out)
}

fn quote(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    out.push('"');
    for ch in text.chars() {
        if ch == '"' || ch == '\\' {
            out.push('\\');
        }
        out.push(ch);
    }
    out.push('"');
    out
}
