use super::{
    Grammar, GrammarError, RuleRef, SymbolId, START_NODE, START_RULE, TOKEN_SYMBOL,
};

/// A syntax tree node. `node_id` is the node's pre-order index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AstNode {
    pub symbol: SymbolId,
    pub token: Option<String>,
    pub children: Vec<AstNode>,
    pub node_id: usize,
}

impl AstNode {
    pub fn leaf(symbol: SymbolId, token: impl Into<String>) -> Self {
        AstNode {
            symbol,
            token: Some(token.into()),
            children: Vec::new(),
            node_id: 0,
        }
    }

    pub fn node(symbol: SymbolId, children: Vec<AstNode>) -> Self {
        let mut node = AstNode {
            symbol,
            token: None,
            children,
            node_id: 0,
        };
        node.renumber();
        node
    }

    /// Reassigns pre-order ids starting at 0.
    pub fn renumber(&mut self) {
        fn walk(node: &mut AstNode, next: &mut usize) {
            node.node_id = *next;
            *next += 1;
            for child in &mut node.children {
                walk(child, next);
            }
        }
        let mut next = 0;
        walk(self, &mut next);
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(AstNode::size).sum::<usize>()
    }
}

#[derive(Debug, Clone)]
struct NodeSlot {
    symbol: SymbolId,
    token: Option<String>,
    children: Vec<usize>,
    parent: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    node: usize,
    depth: usize,
    creator: usize,
}

/// A partial derivation under the pre-order (leftmost-outermost) expansion
/// policy.
///
/// The tree is rooted at the synthetic `snode`; the start rule expands it to
/// the grammar's start symbol. Rule depths are the depths of the expanded
/// node (`snode` has depth 0) and `rule_parent_index[i]` is the position of
/// the rule that created the node expanded at position `i`.
#[derive(Debug, Clone)]
pub struct DerivationState {
    rules: Vec<RuleRef>,
    depths: Vec<usize>,
    rule_parent_index: Vec<usize>,
    rule_parents: Vec<SymbolId>,
    nodes: Vec<NodeSlot>,
    pending: Vec<Pending>,
}

impl DerivationState {
    /// The empty derivation whose frontier is `snode`.
    pub fn new() -> Self {
        DerivationState {
            rules: Vec::new(),
            depths: Vec::new(),
            rule_parent_index: Vec::new(),
            rule_parents: Vec::new(),
            nodes: vec![NodeSlot {
                symbol: START_NODE,
                token: None,
                children: Vec::new(),
                parent: None,
            }],
            pending: vec![Pending {
                node: 0,
                depth: 0,
                creator: 0,
            }],
        }
    }

    /// The state after applying only the start rule.
    pub fn started(grammar: &Grammar) -> Self {
        let mut state = Self::new();
        state
            .apply(grammar, RuleRef::Predefined(START_RULE))
            .expect("start rule always expands snode");
        state
    }

    pub fn rules(&self) -> &[RuleRef] {
        &self.rules
    }

    pub fn depths(&self) -> &[usize] {
        &self.depths
    }

    pub fn rule_parent_index(&self) -> &[usize] {
        &self.rule_parent_index
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn frontier(&self) -> Option<SymbolId> {
        self.pending.last().map(|p| self.nodes[p.node].symbol)
    }

    /// Symbol expanded by the rule at each position.
    pub fn rule_parents(&self) -> &[SymbolId] {
        &self.rule_parents
    }

    /// Applies `rule` to the frontier.
    pub fn apply(&mut self, grammar: &Grammar, rule: RuleRef) -> Result<(), GrammarError> {
        let position = self.rules.len();
        let Some(top) = self.pending.last().copied() else {
            return Err(GrammarError::ExtraRules { position });
        };
        let frontier = self.nodes[top.node].symbol;
        let children: Vec<(SymbolId, Option<String>)> = match &rule {
            RuleRef::Predefined(id) => {
                let r = grammar.rule(*id)?;
                if r.parent != frontier {
                    return Err(GrammarError::FrontierMismatch {
                        position,
                        rule: grammar.render_rule(&rule),
                        frontier: grammar.symbol(frontier).name.clone(),
                    });
                }
                r.children
                    .iter()
                    .map(|&c| {
                        let sym = grammar.symbol(c);
                        let token = sym.is_terminal().then(|| sym.name.clone());
                        (c, token)
                    })
                    .collect()
            }
            RuleRef::Copy(token) => {
                if !grammar.is_copy_slot(frontier) {
                    return Err(GrammarError::FrontierMismatch {
                        position,
                        rule: grammar.render_rule(&rule),
                        frontier: grammar.symbol(frontier).name.clone(),
                    });
                }
                vec![(TOKEN_SYMBOL, Some(token.clone()))]
            }
        };

        self.pending.pop();
        self.rules.push(rule);
        self.depths.push(top.depth);
        self.rule_parents.push(frontier);
        self.rule_parent_index
            .push(if position == 0 { 0 } else { top.creator });

        let mut created = Vec::with_capacity(children.len());
        for (symbol, token) in children {
            let idx = self.nodes.len();
            self.nodes.push(NodeSlot {
                symbol,
                token: token.clone(),
                children: Vec::new(),
                parent: Some(top.node),
            });
            created.push((idx, token.is_none()));
        }
        self.nodes[top.node].children = created.iter().map(|&(i, _)| i).collect();
        for &(idx, is_nonterminal) in created.iter().rev() {
            if is_nonterminal {
                self.pending.push(Pending {
                    node: idx,
                    depth: top.depth + 1,
                    creator: position,
                });
            }
        }
        Ok(())
    }

    /// The whole tree including the `snode` root, numbered in pre-order.
    pub fn tree(&self) -> AstNode {
        self.build(0)
    }

    /// The program tree below `snode`, if the start rule has been applied.
    pub fn program(&self) -> Option<AstNode> {
        let root = *self.nodes[0].children.first()?;
        let mut tree = self.build(root);
        tree.renumber();
        Some(tree)
    }

    fn build(&self, idx: usize) -> AstNode {
        let mut node = self.build_raw(idx);
        node.renumber();
        node
    }

    fn build_raw(&self, idx: usize) -> AstNode {
        let slot = &self.nodes[idx];
        AstNode {
            symbol: slot.symbol,
            token: slot.token.clone(),
            children: slot.children.iter().map(|&c| self.build_raw(c)).collect(),
            node_id: 0,
        }
    }

    /// Symbols from the root (`snode`) to the frontier, inclusive.
    pub fn query_path(&self) -> Result<Vec<SymbolId>, GrammarError> {
        let top = self.pending.last().ok_or(GrammarError::DerivationComplete)?;
        let mut path = Vec::new();
        let mut cur = Some(top.node);
        while let Some(n) = cur {
            path.push(self.nodes[n].symbol);
            cur = self.nodes[n].parent;
        }
        path.reverse();
        Ok(path)
    }

    /// Left-to-right terminal tokens of the (complete) program.
    pub fn tokens(&self) -> Result<Vec<String>, GrammarError> {
        if !self.is_complete() {
            return Err(GrammarError::Incomplete);
        }
        let program = self.program().ok_or(GrammarError::Incomplete)?;
        linearize(&program)
    }
}

impl Default for DerivationState {
    fn default() -> Self {
        Self::new()
    }
}

/// Replays `rule_ids` from the empty state.
pub fn derive(grammar: &Grammar, rule_ids: &[RuleRef]) -> Result<DerivationState, GrammarError> {
    match rule_ids.first() {
        None => return Err(GrammarError::EmptySequence),
        Some(RuleRef::Predefined(id)) if *id == START_RULE => {}
        Some(_) => return Err(GrammarError::MissingStartRule),
    }
    let mut state = DerivationState::new();
    for rule in rule_ids {
        state.apply(grammar, rule.clone())?;
    }
    Ok(state)
}

/// Pre-order rule sequence of a complete tree, beginning with the start rule.
///
/// `tree` may be rooted at the start symbol or at `snode`. Terminal leaves
/// under a copy slot that no predefined rule produces become copy rules.
pub fn decompose(grammar: &Grammar, tree: &AstNode) -> Result<Vec<RuleRef>, GrammarError> {
    let mut out = Vec::new();
    let root = if tree.symbol == START_NODE {
        let [child] = tree.children.as_slice() else {
            return Err(GrammarError::Incomplete);
        };
        child
    } else {
        tree
    };
    let start_children = [root.symbol];
    if grammar.find_rule(START_NODE, &start_children) != Some(START_RULE) {
        return Err(GrammarError::UnknownProduction {
            parent: "snode".into(),
            children: grammar.render_symbols(&start_children),
        });
    }
    out.push(RuleRef::Predefined(START_RULE));
    decompose_node(grammar, root, &mut out)?;
    Ok(out)
}

fn decompose_node(
    grammar: &Grammar,
    node: &AstNode,
    out: &mut Vec<RuleRef>,
) -> Result<(), GrammarError> {
    if grammar.symbol(node.symbol).is_terminal() {
        return Ok(());
    }
    if node.children.is_empty() {
        return Err(GrammarError::Incomplete);
    }
    let children: Vec<SymbolId> = node.children.iter().map(|c| c.symbol).collect();
    if let Some(id) = grammar.find_rule(node.symbol, &children) {
        out.push(RuleRef::Predefined(id));
    } else if let [leaf] = node.children.as_slice() {
        let copyable = grammar.is_copy_slot(node.symbol)
            && grammar.symbol(leaf.symbol).is_terminal()
            && leaf.children.is_empty();
        let token = leaf.token.clone().unwrap_or_else(|| grammar.symbol(leaf.symbol).name.clone());
        if !copyable {
            return Err(unknown_production(grammar, node.symbol, &children));
        }
        match grammar.literal_rule(node.symbol, &token) {
            Some(id) => out.push(RuleRef::Predefined(id)),
            None => out.push(RuleRef::Copy(token)),
        }
        return Ok(());
    } else {
        return Err(unknown_production(grammar, node.symbol, &children));
    }
    for child in &node.children {
        decompose_node(grammar, child, out)?;
    }
    Ok(())
}

fn unknown_production(grammar: &Grammar, parent: SymbolId, children: &[SymbolId]) -> GrammarError {
    GrammarError::UnknownProduction {
        parent: grammar.symbol(parent).name.clone(),
        children: grammar.render_symbols(children),
    }
}

/// Left-to-right terminal tokens of a complete tree.
pub fn linearize(tree: &AstNode) -> Result<Vec<String>, GrammarError> {
    fn walk(node: &AstNode, out: &mut Vec<String>) -> Result<(), GrammarError> {
        if node.children.is_empty() {
            let token = node.token.as_ref().ok_or(GrammarError::Incomplete)?;
            out.push(token.clone());
            return Ok(());
        }
        for child in &node.children {
            walk(child, out)?;
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(tree, &mut out)?;
    Ok(out)
}

/// Dense 0/1 matrix over rule positions; column `j` has its single 1 in the
/// row of the ancestor selected for position `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    size: usize,
    data: Vec<u8>,
}

impl AdjacencyMatrix {
    fn parent_links(parents: &[usize]) -> Self {
        let size = parents.len();
        let mut data = vec![0u8; size * size];
        for (j, &p) in parents.iter().enumerate() {
            data[p * size + j] = 1;
        }
        AdjacencyMatrix { size, data }
    }

    fn identity(size: usize) -> Self {
        let mut data = vec![0u8; size * size];
        for i in 0..size {
            data[i * size + i] = 1;
        }
        AdjacencyMatrix { size, data }
    }

    fn multiply(&self, other: &Self) -> Self {
        let n = self.size;
        let mut data = vec![0u8; n * n];
        for i in 0..n {
            for k in 0..n {
                if self.data[i * n + k] == 0 {
                    continue;
                }
                for j in 0..n {
                    data[i * n + j] |= other.data[k * n + j];
                }
            }
        }
        AdjacencyMatrix { size: n, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.size + col]
    }

    /// Row index of the 1 in column `col`.
    pub fn selected(&self, col: usize) -> usize {
        (0..self.size)
            .find(|&r| self.get(r, col) == 1)
            .expect("every column selects exactly one row")
    }

    /// Row-major values as floats.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Row-major values of the transpose, as floats.
    pub fn transpose_f64(&self) -> Vec<f64> {
        let n = self.size;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[j * n + i] = f64::from(self.data[i * n + j]);
            }
        }
        out
    }
}

/// `M^order` for the parent-selection matrix of the given parent links.
/// Position 0 is its own parent, so ancestors saturate at the root.
pub fn adjacency_matrix(parent_links: &[usize], order: usize) -> AdjacencyMatrix {
    let base = AdjacencyMatrix::parent_links(parent_links);
    let mut acc = AdjacencyMatrix::identity(parent_links.len());
    for _ in 0..order {
        acc = acc.multiply(&base);
    }
    acc
}

/// Which rules may expand the current frontier: predefined rules by id and
/// copy positions into the description tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleMask {
    pub predefined: Vec<bool>,
    pub copy: Vec<bool>,
}

impl RuleMask {
    pub fn any_predefined(&self) -> bool {
        self.predefined.iter().any(|&b| b)
    }

    pub fn any_copy(&self) -> bool {
        self.copy.iter().any(|&b| b)
    }

    pub fn is_empty(&self) -> bool {
        !self.any_predefined() && !self.any_copy()
    }
}

pub fn valid_rule_mask(
    grammar: &Grammar,
    state: &DerivationState,
    nl_tokens: &[String],
) -> Result<RuleMask, GrammarError> {
    let frontier = state.frontier().ok_or(GrammarError::DerivationComplete)?;
    let mut predefined = vec![false; grammar.num_rules()];
    for &id in grammar.rules_for(frontier) {
        predefined[id.0] = true;
    }
    let copy = if grammar.is_copy_slot(frontier) {
        nl_tokens.iter().map(|t| grammar.token_copyable(t)).collect()
    } else {
        vec![false; nl_tokens.len()]
    };
    Ok(RuleMask { predefined, copy })
}
