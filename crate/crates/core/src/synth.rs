//! Seeded synthetic description/program tasks.
//!
//! The generated language is a sequence of statements over nested
//! expressions. Descriptions spell each construct with a fixed phrase in
//! prefix order, so the program is a function of its description; variable
//! names appear verbatim and most of them are not predefined, which makes
//! the copy path necessary.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{records_to_text, CorpusRecord, ProgramFormat};
use crate::grammar::{decompose, parse_program_tokens, Grammar, GrammarError};

const KEYWORDS: &[(&str, &str)] =
    &[("print", "show"), ("return", "give"), ("assert", "check"), ("yield", "emit"), ("del", "drop"), ("raise", "throw")];
const OPERATORS: &[(&str, &str)] = &[
    ("+", "sum"),
    ("-", "difference"),
    ("*", "product"),
    ("/", "quotient"),
    ("<", "less"),
    (">", "greater"),
    ("==", "equal"),
    ("**", "power"),
];
const FUNCTIONS: &[(&str, &str)] =
    &[("len", "length"), ("abs", "magnitude"), ("str", "text"), ("int", "integer"), ("sorted", "ordering")];
const NUMBERS: &[&str] = &["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];
const NAMES: &[&str] = &["x", "y", "z", "i", "n", "self"];
const PHRASE_WORDS: &[&str] = &["set", "to", "of", "and", "then"];

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("infeasible options: {0}")]
    Infeasible(String),
    #[error("generated program failed to decompose: {0}")]
    Grammar(#[from] GrammarError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub seed: u64,
    /// Number of examples.
    pub size: usize,
    /// Keyword statements besides assignment.
    pub statement_kinds: usize,
    /// Binary operators.
    pub operators: usize,
    /// Unary functions.
    pub functions: usize,
    /// Numeric literals 0..numbers.
    pub numbers: usize,
    /// Variable names with a predefined rule.
    pub predefined_names: usize,
    /// Distinct copy-only identifiers to draw from.
    pub identifier_pool: usize,
    /// Maximum expression nesting.
    pub max_depth: usize,
    /// Maximum statements per program.
    pub max_statements: usize,
    /// Maximum derivation length, start rule included.
    pub max_rules: usize,
    /// Probability that a name is drawn from the identifier pool.
    pub copy_rate: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            seed: 1,
            size: 50,
            statement_kinds: 3,
            operators: 4,
            functions: 2,
            numbers: 10,
            predefined_names: 3,
            identifier_pool: 40,
            max_depth: 2,
            max_statements: 2,
            max_rules: 25,
            copy_rate: 0.5,
        }
    }
}

impl SynthOptions {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::Infeasible(m));
        if self.size == 0 {
            return fail("size must be at least 1".into());
        }
        if self.statement_kinds == 0 || self.statement_kinds > KEYWORDS.len() {
            return fail(format!("statement_kinds must be in 1..={}", KEYWORDS.len()));
        }
        if self.operators > OPERATORS.len() {
            return fail(format!("operators must be at most {}", OPERATORS.len()));
        }
        if self.functions > FUNCTIONS.len() {
            return fail(format!("functions must be at most {}", FUNCTIONS.len()));
        }
        if self.numbers == 0 || self.numbers > NUMBERS.len() {
            return fail(format!("numbers must be in 1..={}", NUMBERS.len()));
        }
        if self.predefined_names == 0 || self.predefined_names > NAMES.len() {
            return fail(format!("predefined_names must be in 1..={}", NAMES.len()));
        }
        if !(0.0..=1.0).contains(&self.copy_rate) {
            return fail("copy_rate must be in [0, 1]".into());
        }
        if self.copy_rate > 0.0 && self.identifier_pool == 0 {
            return fail("copy_rate > 0 needs a non-empty identifier pool".into());
        }
        if self.max_statements == 0 {
            return fail("max_statements must be at least 1".into());
        }
        // start, Prog, Stmt, Expr, Num
        if self.max_rules < 5 {
            return fail("max_rules must be at least 5, the shortest program".into());
        }
        if self.max_depth > 0 && self.operators == 0 && self.functions == 0 {
            return fail("max_depth > 0 needs an operator or a function".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub grammar: String,
    pub records: Vec<CorpusRecord>,
}

impl SynthTask {
    /// Writes `grammar.txt` and `corpus.jsonl` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("grammar.txt"), self.grammar.as_bytes())?;
        write_atomic(&dir.join("corpus.jsonl"), records_to_text(&self.records).as_bytes())?;
        Ok(())
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let name = path.file_name().ok_or_else(|| io::Error::other("path has no file name"))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

enum Expr {
    Name(String),
    Num(usize),
    Op(usize, Box<Expr>, Box<Expr>),
    Call(usize, Box<Expr>),
}

enum Stmt {
    Keyword(usize, Expr),
    Assign(String, Expr),
}

impl Expr {
    fn program(&self, out: &mut Vec<String>) {
        match self {
            Expr::Name(n) => out.push(n.clone()),
            Expr::Num(k) => out.push(k.to_string()),
            Expr::Op(o, a, b) => {
                out.push("(".into());
                a.program(out);
                out.push(OPERATORS[*o].0.into());
                b.program(out);
                out.push(")".into());
            }
            Expr::Call(f, a) => {
                out.push(FUNCTIONS[*f].0.into());
                out.push("(".into());
                a.program(out);
                out.push(")".into());
            }
        }
    }

    fn describe(&self, out: &mut Vec<String>) {
        match self {
            Expr::Name(n) => out.push(n.clone()),
            Expr::Num(k) => out.push(NUMBERS[*k].into()),
            Expr::Op(o, a, b) => {
                out.push(OPERATORS[*o].1.into());
                out.push("of".into());
                a.describe(out);
                out.push("and".into());
                b.describe(out);
            }
            Expr::Call(f, a) => {
                out.push(FUNCTIONS[*f].1.into());
                out.push("of".into());
                a.describe(out);
            }
        }
    }
}

fn grammar_text(o: &SynthOptions) -> String {
    let mut g = String::new();
    g.push_str("Prog -> Stmt\nProg -> Stmt ; Prog\n");
    for (kw, _) in &KEYWORDS[..o.statement_kinds] {
        let _ = writeln!(g, "Stmt -> {kw} Expr");
    }
    g.push_str("Stmt -> Name = Expr\nExpr -> Name\nExpr -> Num\n");
    for (op, _) in &OPERATORS[..o.operators] {
        let _ = writeln!(g, "Expr -> ( Expr {op} Expr )");
    }
    for (f, _) in &FUNCTIONS[..o.functions] {
        let _ = writeln!(g, "Expr -> {f} ( Expr )");
    }
    for k in 0..o.numbers {
        let _ = writeln!(g, "Num -> {k}");
    }
    for n in &NAMES[..o.predefined_names] {
        let _ = writeln!(g, "Name -> {n}");
    }
    g.push_str("%copy Name\n");
    g
}

fn identifier_pool(rng: &mut ChaCha8Rng, count: usize, reserved: &HashSet<String>) -> Vec<String> {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.random_range(2..=3);
        let mut s = String::new();
        for _ in 0..syllables {
            s.push(*CONSONANTS.choose(rng).unwrap() as char);
            s.push(*VOWELS.choose(rng).unwrap() as char);
        }
        if !reserved.contains(&s) && seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

struct Sampler<'a> {
    o: &'a SynthOptions,
    pool: &'a [String],
}

impl Sampler<'_> {
    fn name(&self, rng: &mut ChaCha8Rng) -> String {
        if rng.random_bool(self.o.copy_rate) {
            self.pool.choose(rng).unwrap().clone()
        } else {
            NAMES[rng.random_range(0..self.o.predefined_names)].to_string()
        }
    }

    fn expr(&self, rng: &mut ChaCha8Rng, depth: usize) -> Expr {
        let o = self.o;
        if depth < o.max_depth && rng.random_bool(0.55) {
            let ops = o.operators;
            let k = rng.random_range(0..ops + o.functions);
            if k < ops {
                return Expr::Op(k, Box::new(self.expr(rng, depth + 1)), Box::new(self.expr(rng, depth + 1)));
            }
            return Expr::Call(k - ops, Box::new(self.expr(rng, depth + 1)));
        }
        if rng.random_bool(0.5) {
            Expr::Name(self.name(rng))
        } else {
            Expr::Num(rng.random_range(0..o.numbers))
        }
    }

    fn program(&self, rng: &mut ChaCha8Rng) -> Vec<Stmt> {
        let n = rng.random_range(1..=self.o.max_statements);
        (0..n)
            .map(|_| {
                let k = rng.random_range(0..=self.o.statement_kinds);
                if k == self.o.statement_kinds {
                    Stmt::Assign(self.name(rng), self.expr(rng, 0))
                } else {
                    Stmt::Keyword(k, self.expr(rng, 0))
                }
            })
            .collect()
    }
}

fn render(program: &[Stmt]) -> (Vec<String>, Vec<String>) {
    let (mut code, mut desc) = (Vec::new(), Vec::new());
    for (i, stmt) in program.iter().enumerate() {
        if i > 0 {
            code.push(";".into());
            desc.push("then".into());
        }
        match stmt {
            Stmt::Keyword(k, e) => {
                code.push(KEYWORDS[*k].0.into());
                e.program(&mut code);
                desc.push(KEYWORDS[*k].1.into());
                e.describe(&mut desc);
            }
            Stmt::Assign(n, e) => {
                code.push(n.clone());
                code.push("=".into());
                e.program(&mut code);
                desc.extend(["set".to_string(), n.clone(), "to".to_string()]);
                e.describe(&mut desc);
            }
        }
    }
    (code, desc)
}

/// Generates a grammar and `size` distinct examples whose derivations fit
/// in `max_rules`.
pub fn synth_task(o: &SynthOptions) -> Result<SynthTask, SynthError> {
    o.validate()?;
    let text = grammar_text(o);
    let grammar = Grammar::parse(&text)?;
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let reserved: HashSet<String> = grammar
        .symbols()
        .iter()
        .map(|s| s.name.clone())
        .chain(KEYWORDS.iter().chain(OPERATORS).chain(FUNCTIONS).map(|(_, w)| w.to_string()))
        .chain(NUMBERS.iter().chain(PHRASE_WORDS).map(|w| w.to_string()))
        .collect();
    let pool = identifier_pool(&mut rng, o.identifier_pool, &reserved);
    let sampler = Sampler { o, pool: &pool };

    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(o.size);
    let budget = 200 * o.size;
    let mut attempts = 0;
    while records.len() < o.size {
        attempts += 1;
        if attempts > budget {
            return Err(SynthError::Infeasible(format!(
                "found only {} distinct programs within {} rules",
                records.len(),
                o.max_rules
            )));
        }
        let (code, desc) = render(&sampler.program(&mut rng));
        let rules = decompose(&grammar, &parse_program_tokens(&grammar, &code)?)?;
        if rules.len() > o.max_rules || !seen.insert(code.clone()) {
            continue;
        }
        records.push(CorpusRecord {
            id: format!("synth-{:04}", records.len()),
            description: desc.join(" "),
            program: code.join(" "),
            format: ProgramFormat::Tokens,
        });
    }
    Ok(SynthTask { grammar: text, records })
}

/// Fraction of records whose program contains a token that no predefined
/// rule produces.
pub fn copy_only_fraction(grammar: &Grammar, records: &[CorpusRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let predefined: HashSet<&str> = grammar
        .rules()
        .iter()
        .flat_map(|r| r.children.iter())
        .map(|&c| grammar.symbol(c).name.as_str())
        .collect();
    let hits = records.iter().filter(|r| r.program.split_whitespace().any(|t| !predefined.contains(t))).count();
    hits as f64 / records.len() as f64
}
