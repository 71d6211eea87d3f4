//! Turning stored programs back into syntax trees.

use std::collections::{HashMap, HashSet};

use super::{AstNode, Grammar, GrammarError, SymbolId, START_NODE, TOKEN_SYMBOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Elem {
    Symbol(SymbolId),
    /// Any copyable token, for copy slots.
    Wild,
}

struct Production {
    parent: SymbolId,
    rhs: Vec<Elem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Item {
    prod: usize,
    dot: usize,
    origin: usize,
}

/// Parses a whitespace-tokenized program with an Earley recognizer and
/// extracts the first tree in rule-id order.
///
/// Copy slots accept any single copyable token in addition to their
/// predefined rules; predefined rules win when both apply.
pub fn parse_program_tokens(grammar: &Grammar, tokens: &[String]) -> Result<AstNode, GrammarError> {
    if tokens.is_empty() {
        return Err(GrammarError::Unparseable("empty program".into()));
    }
    let mut prods: Vec<Production> = grammar
        .rules()
        .iter()
        .filter(|r| r.parent != START_NODE)
        .map(|r| Production {
            parent: r.parent,
            rhs: r.children.iter().map(|&c| Elem::Symbol(c)).collect(),
        })
        .collect();
    for slot in grammar.copy_slots() {
        prods.push(Production {
            parent: slot,
            rhs: vec![Elem::Wild],
        });
    }
    let mut by_parent: HashMap<SymbolId, Vec<usize>> = HashMap::new();
    for (i, p) in prods.iter().enumerate() {
        by_parent.entry(p.parent).or_default().push(i);
    }

    let matches = |elem: Elem, token: &str| -> bool {
        match elem {
            Elem::Wild => grammar.token_copyable(token),
            Elem::Symbol(s) => {
                let sym = grammar.symbol(s);
                sym.is_terminal() && s != TOKEN_SYMBOL && sym.name == token
            }
        }
    };
    let is_nonterminal = |elem: Elem| matches!(elem, Elem::Symbol(s) if !grammar.symbol(s).is_terminal());

    let n = tokens.len();
    let mut chart: Vec<Vec<Item>> = vec![Vec::new(); n + 1];
    let mut seen: Vec<HashSet<Item>> = vec![HashSet::new(); n + 1];
    let mut completed: HashMap<(SymbolId, usize, usize), Vec<usize>> = HashMap::new();

    let start = grammar.start_symbol();
    for &p in by_parent.get(&start).map(Vec::as_slice).unwrap_or(&[]) {
        let item = Item { prod: p, dot: 0, origin: 0 };
        if seen[0].insert(item) {
            chart[0].push(item);
        }
    }

    for i in 0..=n {
        let mut k = 0;
        while k < chart[i].len() {
            let item = chart[i][k];
            k += 1;
            let prod = &prods[item.prod];
            if item.dot == prod.rhs.len() {
                let entry = completed.entry((prod.parent, item.origin, i)).or_default();
                if !entry.contains(&item.prod) {
                    entry.push(item.prod);
                }
                // Origin set is finished (or is the current set when origin == i,
                // impossible without empty rules).
                let waiting: Vec<Item> = chart[item.origin]
                    .iter()
                    .filter(|w| {
                        let r = &prods[w.prod].rhs;
                        w.dot < r.len() && r[w.dot] == Elem::Symbol(prod.parent)
                    })
                    .copied()
                    .collect();
                for w in waiting {
                    let next = Item { dot: w.dot + 1, ..w };
                    if seen[i].insert(next) {
                        chart[i].push(next);
                    }
                }
                continue;
            }
            let elem = prod.rhs[item.dot];
            if is_nonterminal(elem) {
                let Elem::Symbol(sym) = elem else { unreachable!() };
                for &p in by_parent.get(&sym).map(Vec::as_slice).unwrap_or(&[]) {
                    let predicted = Item { prod: p, dot: 0, origin: i };
                    if seen[i].insert(predicted) {
                        chart[i].push(predicted);
                    }
                }
            } else if i < n && matches(elem, &tokens[i]) {
                let next = Item { dot: item.dot + 1, ..item };
                if seen[i + 1].insert(next) {
                    chart[i + 1].push(next);
                }
            }
        }
    }

    for list in completed.values_mut() {
        list.sort_unstable();
    }
    if !completed.contains_key(&(start, 0, n)) {
        let furthest = (0..=n).rev().find(|&i| !chart[i].is_empty()).unwrap_or(0);
        return Err(GrammarError::Unparseable(format!(
            "no derivation; parse fails near token {} (`{}`)",
            furthest,
            tokens.get(furthest).map(String::as_str).unwrap_or("<end>")
        )));
    }

    let mut builder = TreeBuilder {
        grammar,
        tokens,
        prods: &prods,
        completed: &completed,
        memo: HashMap::new(),
        visiting: HashSet::new(),
    };
    let mut tree = builder
        .build(start, 0, n)
        .ok_or_else(|| GrammarError::Unparseable("cyclic grammar admits no finite tree".into()))?;
    tree.renumber();
    Ok(tree)
}

struct TreeBuilder<'a> {
    grammar: &'a Grammar,
    tokens: &'a [String],
    prods: &'a [Production],
    completed: &'a HashMap<(SymbolId, usize, usize), Vec<usize>>,
    memo: HashMap<(SymbolId, usize, usize), Option<AstNode>>,
    visiting: HashSet<(SymbolId, usize, usize)>,
}

impl TreeBuilder<'_> {
    fn build(&mut self, sym: SymbolId, start: usize, end: usize) -> Option<AstNode> {
        let key = (sym, start, end);
        if let Some(done) = self.memo.get(&key) {
            return done.clone();
        }
        if !self.visiting.insert(key) {
            return None;
        }
        let mut result = None;
        if let Some(prods) = self.completed.get(&key) {
            for &p in prods {
                if let Some(children) = self.fit(p, 0, start, end) {
                    result = Some(AstNode {
                        symbol: sym,
                        token: None,
                        children,
                        node_id: 0,
                    });
                    break;
                }
            }
        }
        self.visiting.remove(&key);
        self.memo.insert(key, result.clone());
        result
    }

    fn fit(&mut self, prod: usize, k: usize, pos: usize, end: usize) -> Option<Vec<AstNode>> {
        let rhs = &self.prods[prod].rhs;
        if k == rhs.len() {
            return (pos == end).then(Vec::new);
        }
        let remaining = rhs.len() - k - 1;
        if pos + 1 + remaining > end {
            return None;
        }
        match rhs[k] {
            Elem::Wild => {
                let token = &self.tokens[pos];
                if !self.grammar.token_copyable(token) {
                    return None;
                }
                let mut rest = self.fit(prod, k + 1, pos + 1, end)?;
                rest.insert(0, AstNode::leaf(TOKEN_SYMBOL, token.clone()));
                Some(rest)
            }
            Elem::Symbol(s) if self.grammar.symbol(s).is_terminal() => {
                if self.grammar.symbol(s).name != self.tokens[pos] {
                    return None;
                }
                let mut rest = self.fit(prod, k + 1, pos + 1, end)?;
                rest.insert(0, AstNode::leaf(s, self.tokens[pos].clone()));
                Some(rest)
            }
            Elem::Symbol(s) => {
                for split in pos + 1..=end - remaining {
                    if !self.completed.contains_key(&(s, pos, split)) {
                        continue;
                    }
                    let Some(child) = self.build(s, pos, split) else {
                        continue;
                    };
                    if let Some(mut rest) = self.fit(prod, k + 1, split, end) {
                        rest.insert(0, child);
                        return Some(rest);
                    }
                }
                None
            }
        }
    }
}

/// Parses the serialized-tree program form: `(Symbol child ...)` for
/// nonterminals and bare or `"quoted"` tokens for leaves.
pub fn parse_sexpr(grammar: &Grammar, text: &str) -> Result<AstNode, GrammarError> {
    let tokens = lex_sexpr(text)?;
    let mut pos = 0;
    let mut tree = parse_node(grammar, &tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(GrammarError::Unparseable("trailing input after tree".into()));
    }
    if tree.children.is_empty() {
        return Err(GrammarError::Unparseable("tree root must be a nonterminal".into()));
    }
    tree.renumber();
    Ok(tree)
}

#[derive(Debug, Clone, PartialEq)]
enum SexprToken {
    Open,
    Close,
    Atom(String),
}

fn lex_sexpr(text: &str) -> Result<Vec<SexprToken>, GrammarError> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            c if c.is_whitespace() => {
                chars.next();
            }
            '(' => {
                chars.next();
                out.push(SexprToken::Open);
            }
            ')' => {
                chars.next();
                out.push(SexprToken::Close);
            }
            '"' => {
                chars.next();
                let mut atom = String::new();
                let mut closed = false;
                while let Some(c) = chars.next() {
                    match c {
                        '\\' => atom.extend(chars.next()),
                        '"' => {
                            closed = true;
                            break;
                        }
                        other => atom.push(other),
                    }
                }
                if !closed {
                    return Err(GrammarError::Unparseable("unterminated string".into()));
                }
                out.push(SexprToken::Atom(atom));
            }
            _ => {
                let mut atom = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_whitespace() || c == '(' || c == ')' {
                        break;
                    }
                    atom.push(c);
                    chars.next();
                }
                out.push(SexprToken::Atom(atom));
            }
        }
    }
    Ok(out)
}

fn parse_node(grammar: &Grammar, tokens: &[SexprToken], pos: &mut usize) -> Result<AstNode, GrammarError> {
    match tokens.get(*pos) {
        Some(SexprToken::Open) => {
            *pos += 1;
            let Some(SexprToken::Atom(name)) = tokens.get(*pos) else {
                return Err(GrammarError::Unparseable("expected symbol after `(`".into()));
            };
            let symbol = grammar
                .nonterminal(name)
                .ok_or_else(|| GrammarError::Unparseable(format!("unknown nonterminal `{name}`")))?;
            *pos += 1;
            let mut children = Vec::new();
            loop {
                match tokens.get(*pos) {
                    Some(SexprToken::Close) => {
                        *pos += 1;
                        break;
                    }
                    Some(_) => children.push(parse_node(grammar, tokens, pos)?),
                    None => return Err(GrammarError::Unparseable("unbalanced `(`".into())),
                }
            }
            if children.is_empty() {
                return Err(GrammarError::Unparseable(format!("`{name}` has no children")));
            }
            Ok(AstNode {
                symbol,
                token: None,
                children,
                node_id: 0,
            })
        }
        Some(SexprToken::Atom(token)) => {
            *pos += 1;
            let symbol = grammar
                .terminal(token)
                .filter(|&s| s.0 > TOKEN_SYMBOL.0)
                .unwrap_or(TOKEN_SYMBOL);
            Ok(AstNode::leaf(symbol, token.clone()))
        }
        Some(SexprToken::Close) => Err(GrammarError::Unparseable("unexpected `)`".into())),
        None => Err(GrammarError::Unparseable("unexpected end of tree".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{decompose, derive, linearize, RuleRef};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn parses_left_recursive_grammar() {
        let g = Grammar::parse("E -> E \"+\" T\nE -> T\nT -> \"1\"\nT -> \"2\"").unwrap();
        let tree = parse_program_tokens(&g, &toks("1 + 2 + 1")).unwrap();
        assert_eq!(linearize(&tree).unwrap(), toks("1 + 2 + 1"));
        let seq = decompose(&g, &tree).unwrap();
        assert_eq!(derive(&g, &seq).unwrap().program().unwrap(), tree);
    }

    #[test]
    fn copy_slots_take_free_tokens() {
        let g = Grammar::parse("%copy Name\nS -> \"let\" Name \"=\" V\nV -> Name\nV -> \"0\"").unwrap();
        let tree = parse_program_tokens(&g, &toks("let total = 0")).unwrap();
        let seq = decompose(&g, &tree).unwrap();
        assert!(seq.contains(&RuleRef::Copy("total".into())));
        // keywords are never copied
        assert!(parse_program_tokens(&g, &toks("let let = 0")).is_err());
    }

    #[test]
    fn rejects_non_programs() {
        let g = Grammar::parse("S -> \"a\" \"b\"").unwrap();
        assert!(parse_program_tokens(&g, &toks("a")).is_err());
        assert!(parse_program_tokens(&g, &toks("a b b")).is_err());
        assert!(parse_program_tokens(&g, &[]).is_err());
    }

    #[test]
    fn fig1_assignment_tree() {
        let g = Grammar::parse(
            "%copy str\nroot -> Module\nModule -> body\nbody -> Assign\nAssign -> targets \"=\" value\n\
             targets -> Name\nName -> str\nvalue -> Num\nNum -> n\nn -> \"10\"",
        )
        .unwrap();
        let tree = parse_program_tokens(&g, &toks("length = 10")).unwrap();
        let seq = decompose(&g, &tree).unwrap();
        assert_eq!(seq[1], RuleRef::Predefined(crate::grammar::RuleId(1)));
        assert_eq!(linearize(&tree).unwrap(), toks("length = 10"));
    }

    #[test]
    fn sexpr_round_trip() {
        let g = Grammar::parse("%copy Id\nS -> S S\nS -> Id\nS -> \"b\"").unwrap();
        let tree = parse_sexpr(&g, "(S (S (Id foo)) (S \"b\"))").unwrap();
        let seq = decompose(&g, &tree).unwrap();
        assert_eq!(derive(&g, &seq).unwrap().program().unwrap(), tree);
        assert!(parse_sexpr(&g, "(S (S b)").is_err());
        assert!(parse_sexpr(&g, "(Nope b)").is_err());
    }
}
