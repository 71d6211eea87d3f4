//! End-to-end acceptance checks. Every test prints one
//! `criterion N [PASS|FAIL] ...` line before asserting.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use syntaxgen::ast_reader::ancestor_selectors;
use syntaxgen::config::{Config, InferenceConfig, ModelConfig, TrainConfig};
use syntaxgen::corpus::Dataset;
use syntaxgen::decoder::QueryPathInput;
use syntaxgen::grammar::{
    adjacency_matrix, decompose, derive, AstNode, DerivationState, Grammar, RuleMask, RuleRef, SymbolId,
};
use syntaxgen::inference::{generate, score_derivation, Decoding};
use syntaxgen::metrics::{bleu, str_acc};
use syntaxgen::model::{Model, ModelDims};
use syntaxgen::nl_reader::{NlInput, TokenizeMode, Vocabulary};
use syntaxgen::numeric::{primitive_suite, GradCheckOptions, Graph, ParamStore, Precision};
use syntaxgen::synth::{copy_only_fraction, synth_task, SynthOptions};
use syntaxgen::training::{greedy_str_acc, mean_loss, micro_gradient_check, Control, TrainExample, Trainer};

const ROUND_TRIP_BUDGET: Duration = Duration::from_secs(10);
const GRADIENT_BUDGET: Duration = Duration::from_secs(120);
const PRIMITIVE_TOL: f64 = 1e-4;
const END_TO_END_TOL: f64 = 1e-3;
const DISTRIBUTION_TOL: f64 = 1e-6;
const OVERFIT_BUDGET: Duration = Duration::from_secs(15 * 60);
const OVERFIT_MIN_STR_ACC: f64 = 95.0;
const OVERFIT_MAX_LOSS: f64 = 0.1;
const OVERFIT_MAX_EPOCHS: usize = 400;
const ABLATION_EXPECTED_BELOW: f64 = 70.0;
const BLEU_ORACLE: f64 = 39.51088983592967;
const BLEU_TOL: f64 = 0.1;

fn report(n: usize, ok: bool, detail: &str) {
    println!("criterion {n:>2} [{}] {detail}", if ok { "PASS" } else { "FAIL" });
}

// ---------------------------------------------------------------------------
// Random grammars and derivations

const TERMINALS: &[&str] = &["a", "b", "c", "d", "(", ")", ",", "+", "kw", "op"];
const COPY_TOKENS: &[&str] = &["foo", "bar", "baz", "qux"];

/// Nonterminals `N0..Nk` where `Ni` only refers to `Nj` with `j > i`, plus
/// optional self-recursion and an `Id` copy slot with one literal.
fn random_grammar(rng: &mut ChaCha8Rng, recursive: bool, max_nonterminals: usize) -> String {
    let k = rng.random_range(2..=max_nonterminals);
    let mut text = String::new();
    for i in 0..k {
        let mut seen = BTreeSet::new();
        let n_rules = rng.random_range(1..=3);
        for r in 0..n_rules {
            let len = rng.random_range(1..=3);
            let mut children: Vec<String> = (0..len)
                .map(|_| {
                    if i + 1 < k && rng.random_bool(0.3) {
                        format!("N{}", rng.random_range(i + 1..k))
                    } else {
                        TERMINALS.choose(rng).unwrap().to_string()
                    }
                })
                .collect();
            if r == 0 && i + 1 < k {
                children.push(format!("N{}", i + 1));
            }
            if r == 0 && i == 0 {
                children.push("Id".into());
            }
            if seen.insert(children.clone()) {
                text.push_str(&format!("N{i} -> {}\n", children.join(" ")));
            }
        }
        if recursive && rng.random_bool(0.5) {
            text.push_str(&format!("N{i} -> {} N{i}\n", TERMINALS.choose(rng).unwrap()));
        }
    }
    text.push_str("Id -> lit\n%copy Id\n");
    text
}

/// Expansions of the frontier: predefined rules, then copies of `tokens`
/// that no literal rule of the slot already produces.
fn options(g: &Grammar, state: &DerivationState, tokens: &[&str]) -> Vec<RuleRef> {
    let f = state.frontier().unwrap();
    let mut out: Vec<RuleRef> = g.rules_for(f).iter().map(|&id| RuleRef::Predefined(id)).collect();
    if g.is_copy_slot(f) {
        let distinct: BTreeSet<&str> = tokens.iter().copied().collect();
        for t in distinct {
            if g.token_copyable(t) && g.literal_rule(f, t).is_none() {
                out.push(RuleRef::Copy(t.to_string()));
            }
        }
    }
    out
}

fn is_recursive(g: &Grammar, rule: &RuleRef, parent: SymbolId) -> bool {
    match rule {
        RuleRef::Predefined(id) => g.rule(*id).unwrap().children.contains(&parent),
        RuleRef::Copy(_) => false,
    }
}

fn random_derivation(g: &Grammar, rng: &mut ChaCha8Rng, tokens: &[&str], soft_len: usize) -> Vec<RuleRef> {
    let mut state = DerivationState::started(g);
    while !state.is_complete() {
        let f = state.frontier().unwrap();
        let mut opts = options(g, &state, tokens);
        if state.len() > soft_len {
            opts.retain(|r| !is_recursive(g, r, f));
        }
        state.apply(g, opts.choose(rng).unwrap().clone()).unwrap();
    }
    state.rules().to_vec()
}

/// (depth, parent rule index) per expansion, read off the tree in pre-order.
fn tree_oracle(g: &Grammar, node: &AstNode, depth: usize, parent: usize, out: &mut Vec<(usize, usize)>) {
    if g.symbol(node.symbol).is_terminal() {
        return;
    }
    let me = out.len();
    out.push((depth, parent));
    for c in &node.children {
        tree_oracle(g, c, depth + 1, me, out);
    }
}

fn ancestor(parents: &[usize], mut j: usize, order: usize) -> usize {
    for _ in 0..order {
        j = parents[j];
    }
    j
}

// ---------------------------------------------------------------------------
// Small random models

fn tiny_config(pointer: bool) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        nl_layers: 1,
        ast_layers: 1,
        decoder_layers: 1,
        ffn_dim: 16,
        tree_conv_blocks: 1,
        char_len: 5,
        max_path: 6,
        disable_pointer: !pointer,
        ..ModelConfig::default()
    }
}

struct Toy {
    grammar: Grammar,
    words: Vocabulary,
    chars: Vocabulary,
    model: Model,
}

fn toy(text: &str, cfg: &ModelConfig, seed: u64) -> Toy {
    let grammar = Grammar::parse(text).unwrap();
    let vocab: Vec<&str> = TERMINALS.iter().chain(COPY_TOKENS).chain(["lit", "show", "the"].iter()).copied().collect();
    let words = Vocabulary::build(vocab.iter().copied());
    let chars = Vocabulary::build_chars(vocab.iter().copied());
    let dims = ModelDims {
        rules: grammar.num_rules(),
        symbols: grammar.num_symbols(),
        max_arity: grammar.max_arity(),
        words: words.len(),
        chars: chars.len(),
    };
    let model = Model::new(cfg, dims, Precision::F64, seed).unwrap();
    Toy { grammar, words, chars, model }
}

fn random_description(rng: &mut ChaCha8Rng, len: usize) -> Vec<String> {
    let pool: Vec<&str> = TERMINALS.iter().chain(COPY_TOKENS).chain(["lit", "show", "the"].iter()).copied().collect();
    (0..len).map(|_| pool.choose(rng).unwrap().to_string()).collect()
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_grammar_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let (mut checked, mut failures) = (0usize, Vec::new());
    for gi in 0..20 {
        let grammar = Grammar::parse(&random_grammar(&mut rng, true, 5)).unwrap();
        for di in 0..50 {
            let rules = random_derivation(&grammar, &mut rng, COPY_TOKENS, 30);
            let state = derive(&grammar, &rules).unwrap();
            let mut oracle = Vec::new();
            tree_oracle(&grammar, &state.tree(), 0, 0, &mut oracle);
            let depths: Vec<usize> = oracle.iter().map(|o| o.0).collect();
            let parents: Vec<usize> = oracle.iter().map(|o| o.1).collect();
            let laws = (1..rules.len()).all(|i| parents[i] < i && depths[i] == depths[parents[i]] + 1);
            let ok = state.is_complete()
                && decompose(&grammar, &state.tree()).as_ref() == Ok(&rules)
                && decompose(&grammar, &state.program().unwrap()).as_ref() == Ok(&rules)
                && state.depths() == depths.as_slice()
                && state.rule_parent_index() == parents.as_slice()
                && laws;
            checked += 1;
            if !ok {
                failures.push(format!("grammar {gi} derivation {di}"));
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = failures.is_empty() && checked == 1000 && elapsed < ROUND_TRIP_BUDGET;
    report(
        1,
        ok,
        &format!("grammar round trip: {checked} derivations, {} failures, {:.2}s", failures.len(), elapsed.as_secs_f64()),
    );
    assert!(ok, "{failures:?}");
}

#[test]
fn criterion_02_adjacency_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let store = ParamStore::new(Precision::F64);
    let (mut checked, mut mismatches) = (0usize, 0usize);
    while checked < 200 {
        let grammar = Grammar::parse(&random_grammar(&mut rng, true, 4)).unwrap();
        let rules = random_derivation(&grammar, &mut rng, COPY_TOKENS, 8);
        if rules.len() > 12 {
            continue;
        }
        let state = derive(&grammar, &rules).unwrap();
        let parents = state.rule_parent_index();
        let p = parents.len();
        let mut g = Graph::new(&store);
        let selectors = ancestor_selectors(&mut g, parents, 3);
        for order in 1..=2 {
            let m = adjacency_matrix(parents, order);
            let s = g.value(selectors[order - 1]);
            for j in 0..p {
                let want = ancestor(parents, j, order);
                let row_ok = (0..p).all(|c| s.get(j, c) == if c == want { 1.0 } else { 0.0 });
                if m.selected(j) != want || !row_ok {
                    mismatches += 1;
                }
            }
        }
        assert_eq!(ancestor(parents, 0, 2), 0);
        checked += 1;
    }
    let ok = mismatches == 0;
    report(2, ok, &format!("adjacency oracle: {checked} derivations, orders 1 and 2, {mismatches} mismatches"));
    assert!(ok);
}

#[test]
fn criterion_03_gradient_suite() {
    let start = Instant::now();
    let suite = primitive_suite(3).unwrap();
    let (worst_name, worst) = suite
        .iter()
        .map(|(n, r)| (n.clone(), r.max_rel_error))
        .fold((String::new(), 0.0f64), |acc, x| if x.1 > acc.1 { x } else { acc });
    let micro = micro_gradient_check(7, &GradCheckOptions::default()).unwrap();
    let elapsed = start.elapsed();
    let ok = worst < PRIMITIVE_TOL && micro.max_rel_error < END_TO_END_TOL && micro.dead.is_empty() && elapsed < GRADIENT_BUDGET;
    report(
        3,
        ok,
        &format!(
            "gradient suite: {} primitives, worst {worst:.2e} ({worst_name}); end-to-end {:.2e} over {} entries; {:.1}s",
            suite.len(),
            micro.max_rel_error,
            micro.checked,
            elapsed.as_secs_f64()
        ),
    );
    assert!(ok, "{micro:?}");
}

#[test]
fn criterion_04_distribution_laws() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut passes, mut worst_norm, mut worst_mass, mut masked_leak) = (0usize, 0.0f64, 0.0f64, 0.0f64);
    for gi in 0..10 {
        let text = random_grammar(&mut rng, true, 4);
        let t = toy(&text, &tiny_config(gi % 5 != 4), gi as u64);
        for _ in 0..50 {
            let len = rng.random_range(1..=6);
            let desc = random_description(&mut rng, len);
            let nl = NlInput::new(desc.clone(), &t.words, &t.chars, 5).unwrap();
            let desc_refs: Vec<&str> = desc.iter().map(String::as_str).collect();
            let rules = random_derivation(&t.grammar, &mut rng, &desc_refs, 10);
            let cut = rng.random_range(1..rules.len());
            let state = derive(&t.grammar, &rules[..cut]).unwrap();
            let dist = Decoding::new(&t.model, &t.grammar, &t.words, &nl).unwrap().distribution(&state).unwrap();
            let pd: f64 = (0..dist.predefined.len()).map(|i| dist.predefined_prob(i)).sum();
            let cp: f64 = (0..dist.copy.len()).map(|i| dist.copy_prob(i)).sum();
            worst_norm = worst_norm.max((pd + cp - 1.0).abs());
            let law = dist.gate * dist.predefined.iter().sum::<f64>() + (1.0 - dist.gate) * dist.copy.iter().sum::<f64>();
            worst_mass = worst_mass.max((law - 1.0).abs());
            for (i, &open) in dist.mask.predefined.iter().enumerate() {
                if !open {
                    masked_leak = masked_leak.max(dist.predefined_prob(i).abs());
                }
            }
            for (i, &open) in dist.mask.copy.iter().enumerate() {
                if !open {
                    masked_leak = masked_leak.max(dist.copy_prob(i).abs());
                }
            }
            passes += 1;
        }
    }
    let ok = passes == 500 && worst_norm < DISTRIBUTION_TOL && worst_mass < DISTRIBUTION_TOL && masked_leak == 0.0;
    report(
        4,
        ok,
        &format!(
            "distribution laws: {passes} passes, normalization {worst_norm:.1e}, total-mass {worst_mass:.1e}, masked mass {masked_leak:.1e}"
        ),
    );
    assert!(ok);
}

fn step_probs(t: &Toy, ex: &TrainExample) -> Vec<Vec<f64>> {
    let mut g = Graph::new(&t.model.store);
    let out = t.model.forward(&mut g, &ex.nl, &ex.ast, &ex.paths, &ex.masks, 0.0).unwrap();
    let p = g.value(out.probs);
    (0..p.rows()).map(|r| p.row_slice(r).to_vec()).collect()
}

#[test]
fn criterion_05_causality() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut trials, mut leaks, mut changed_later) = (0usize, 0usize, 0usize);
    while trials < 20 {
        let text = random_grammar(&mut rng, true, 4);
        let cfg = tiny_config(true);
        let t = toy(&text, &cfg, trials as u64);
        let desc = random_description(&mut rng, 5);
        let desc_refs: Vec<&str> = desc.iter().map(String::as_str).collect();
        let rules = random_derivation(&t.grammar, &mut rng, &desc_refs, 10);
        if rules.len() < 5 {
            continue;
        }
        let ex = TrainExample::new(&t.grammar, &cfg, t.grammar.max_arity(), &t.words, &t.chars, "c", desc, rules).unwrap();
        let base = step_probs(&t, &ex);
        let steps = ex.steps();
        let i = rng.random_range(0..steps - 1);
        let mut p = ex.clone();
        let (rows, syms, w) = (t.grammar.num_rules() + 1, t.grammar.num_symbols(), p.ast.def_width);
        for j in i + 1..steps {
            p.ast.rule_rows[j] = rng.random_range(0..rows);
            p.ast.copy_words[j] = rng.random_bool(0.5).then(|| rng.random_range(0..t.words.len()));
            p.ast.depths[j] = rng.random_range(0..8);
            p.ast.parent_links[j] = rng.random_range(0..j);
            for c in 0..w {
                p.ast.rule_defs[j * w + c] = rng.random_range(0..syms);
            }
            let path: Vec<usize> = (0..cfg.max_path).map(|_| rng.random_range(0..syms)).collect();
            p.paths[j] = QueryPathInput { symbol_ids: path };
            let mask = &p.masks[j];
            p.masks[j] = RuleMask {
                predefined: (0..mask.predefined.len()).map(|_| rng.random_bool(0.5)).collect(),
                copy: (0..mask.copy.len()).map(|_| rng.random_bool(0.5)).collect(),
            };
        }
        let after = step_probs(&t, &p);
        let same = (0..=i).all(|s| base[s].iter().zip(&after[s]).all(|(a, b)| a.to_bits() == b.to_bits()));
        if !same {
            leaks += 1;
        }
        if base[steps - 1] != after[steps - 1] {
            changed_later += 1;
        }
        trials += 1;
    }
    let ok = leaks == 0 && changed_later > 0;
    report(
        5,
        ok,
        &format!("causality: {trials} trials, {leaks} with earlier steps changed, {changed_later} with later steps changed"),
    );
    assert!(ok);
}

/// Every complete derivation, or `None` past `limit`.
fn enumerate(g: &Grammar, tokens: &[&str], limit: usize) -> Option<Vec<Vec<RuleRef>>> {
    fn go(g: &Grammar, s: DerivationState, tokens: &[&str], limit: usize, out: &mut Vec<Vec<RuleRef>>) -> bool {
        if s.is_complete() {
            out.push(s.rules().to_vec());
            return out.len() <= limit;
        }
        for r in options(g, &s, tokens) {
            let mut next = s.clone();
            next.apply(g, r).unwrap();
            if !go(g, next, tokens, limit, out) {
                return false;
            }
        }
        true
    }
    let mut out = Vec::new();
    go(g, DerivationState::started(g), tokens, limit, &mut out).then_some(out)
}

#[test]
fn criterion_06_beam_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (mut grammars, mut agree, mut sizes) = (0usize, 0usize, Vec::new());
    while grammars < 10 {
        let text = random_grammar(&mut rng, false, 3);
        let t = toy(&text, &tiny_config(true), 60 + grammars as u64);
        let desc = vec!["show".to_string(), COPY_TOKENS[grammars % 4].to_string(), "the".to_string()];
        let desc_refs: Vec<&str> = desc.iter().map(String::as_str).collect();
        let Some(all) = enumerate(&t.grammar, &desc_refs, 20) else { continue };
        if all.len() < 2 {
            continue;
        }
        let nl = NlInput::new(desc.clone(), &t.words, &t.chars, 5).unwrap();
        let scored: Vec<(f64, &Vec<RuleRef>)> =
            all.iter().map(|r| (score_derivation(&t.model, &t.grammar, &t.words, &nl, r).unwrap(), r)).collect();
        let best = scored.iter().max_by(|a, b| a.0.total_cmp(&b.0)).unwrap();
        let cfg = InferenceConfig { beam_size: 20, max_steps: 100, length_norm: false };
        let beam = generate(&t.model, &t.grammar, &t.words, &nl, &cfg).unwrap();
        let top = &beam[0];
        if &top.rules == best.1 && (top.log_prob - best.0).abs() < 1e-9 {
            agree += 1;
        }
        sizes.push(all.len());
        grammars += 1;
    }
    let ok = agree == 10;
    report(6, ok, &format!("beam oracle: {agree}/10 grammars agree with exhaustive search (derivation counts {sizes:?})"));
    assert!(ok);
}

struct OverfitRun {
    str_acc: f64,
    loss: f64,
    epochs: usize,
    elapsed: Duration,
}

struct SynthSetup {
    dataset: Dataset,
    rules: usize,
    longest: usize,
    copy_only: f64,
}

fn overfit_config(pointer: bool) -> ModelConfig {
    ModelConfig {
        d_model: 64,
        heads: 4,
        nl_layers: 2,
        ast_layers: 2,
        decoder_layers: 2,
        ffn_dim: 256,
        tree_conv_blocks: 2,
        char_len: 8,
        disable_pointer: !pointer,
        ..ModelConfig::default()
    }
}

fn synth_setup(cfg: &ModelConfig) -> SynthSetup {
    let task = synth_task(&SynthOptions { seed: 7, size: 50, ..SynthOptions::default() }).unwrap();
    let grammar = Grammar::parse(&task.grammar).unwrap();
    let copy_only = copy_only_fraction(&grammar, &task.records);
    let dataset = Dataset::build(grammar, &task.records, TokenizeMode::Plain, cfg, true).unwrap();
    let longest = dataset.parsed.iter().map(|p| p.rules.len()).max().unwrap();
    SynthSetup { rules: dataset.grammar.num_rules(), dataset, longest, copy_only }
}

/// Trains until greedy StrAcc and loss both meet the overfit targets, the
/// epoch cap, or `max_epochs`.
fn overfit(pointer: bool, max_epochs: usize) -> OverfitRun {
    let cfg = overfit_config(pointer);
    let s = synth_setup(&cfg);
    let ds = &s.dataset;
    let mut model = Model::new(&cfg, ds.dims(), Precision::F32, 1).unwrap();
    let tc = TrainConfig { epochs: max_epochs, batch_size: 8, dropout: 0.0, dev_every: 0, ..TrainConfig::default() };
    let mut trainer = Trainer::new(tc, 80);
    let start = Instant::now();
    let mut last = (0.0, f64::INFINITY);
    trainer
        .train(&mut model, &ds.grammar, &ds.words, &ds.examples, &[], |stats, m| {
            if stats.epoch % 10 == 0 || stats.epoch == max_epochs {
                let acc = greedy_str_acc(m, &ds.grammar, &ds.words, &ds.examples, 80).unwrap();
                let loss = mean_loss(m, &ds.examples).unwrap();
                last = (acc, loss);
                if acc >= OVERFIT_MIN_STR_ACC && loss < OVERFIT_MAX_LOSS {
                    return Ok(Control::Stop);
                }
            }
            if start.elapsed() > OVERFIT_BUDGET {
                return Ok(Control::Stop);
            }
            Ok(Control::Continue)
        })
        .unwrap();
    let epochs = trainer.epochs_done();
    if !epochs.is_multiple_of(10) && epochs != max_epochs {
        last = (
            greedy_str_acc(&model, &ds.grammar, &ds.words, &ds.examples, 80).unwrap(),
            mean_loss(&model, &ds.examples).unwrap(),
        );
    }
    OverfitRun { str_acc: last.0, loss: last.1, epochs, elapsed: start.elapsed() }
}

fn full_run() -> &'static OverfitRun {
    static RUN: OnceLock<OverfitRun> = OnceLock::new();
    RUN.get_or_init(|| overfit(true, OVERFIT_MAX_EPOCHS))
}

#[test]
fn criterion_07_overfit() {
    let s = synth_setup(&overfit_config(true));
    let task_ok = (25..=35).contains(&s.rules) && s.longest <= 25 && s.copy_only >= 0.3 && s.dataset.examples.len() == 50;
    let run = full_run();
    let ok = task_ok && run.str_acc >= OVERFIT_MIN_STR_ACC && run.loss < OVERFIT_MAX_LOSS && run.elapsed <= OVERFIT_BUDGET;
    report(
        7,
        ok,
        &format!(
            "overfit: {} rules, longest program {} rules, {:.0}% copy-only; StrAcc {:.1}, loss {:.4} after {} epochs in {:.0}s",
            s.rules,
            s.longest,
            100.0 * s.copy_only,
            run.str_acc,
            run.loss,
            run.epochs,
            run.elapsed.as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_08_pointer_ablation() {
    let full = full_run();
    let ablated = overfit(false, full.epochs.max(100));
    let ok = ablated.str_acc < full.str_acc;
    report(
        8,
        ok,
        &format!(
            "pointer ablation: without pointer StrAcc {:.1} after {} epochs (expected below {ABLATION_EXPECTED_BELOW}), full model {:.1} after {}",
            ablated.str_acc, ablated.epochs, full.str_acc, full.epochs
        ),
    );
    assert!(ok);
}

const DEFAULT_CONFIG_GOLDEN: &str = "\
d_model = 256
heads = 8
nl_layers = 6
ast_layers = 5
decoder_layers = 5
ffn_dim = 1024
conv_window = 3
tree_conv_window = 3
tree_conv_blocks = 5
max_depth = 32
char_len = 16
max_path = 16
position_sin_only = false
disable_tree_conv = false
disable_rule_def = false
disable_char_embed = false
disable_self_att = false
disable_pointer = false
copy_preferred = false
dropout = 0.15
batch_size = 32
epochs = 100
seed = 1
clip_norm = 5
precision = f32
dev_every = 1
checkpoint_every = 0
strict = false
target_loss = 0
beam_size = 5
max_steps = 300
length_norm = false
";

#[test]
fn criterion_09_config_golden() {
    let c = Config::default();
    let text = c.to_text();
    let fields = c.model.nl_layers == 6
        && c.model.ast_layers == 5
        && c.model.decoder_layers == 5
        && c.model.d_model == 256
        && c.model.ffn_dim == 1024
        && c.train.dropout == 0.15
        && c.model.tree_conv_window == 3
        && c.inference.beam_size == 5;
    let reparsed = Config::parse(&text).map(|p| p == c).unwrap_or(false);
    let ok = text == DEFAULT_CONFIG_GOLDEN && fields && reparsed;
    report(9, ok, "config golden: N_d=6, N_1=N_2=5, d=256, ffn 1024, dropout 0.15, kt=3, beam 5");
    assert!(ok, "{text}");
}

#[test]
fn criterion_10_metrics() {
    let toks = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let refs = vec![toks("def f ( x ) : return x + 1"), toks("y = [ i for i in range ( 3 ) ]")];
    let acc = str_acc(&refs, &refs).unwrap();
    let self_bleu = bleu(&refs, &refs).unwrap();
    let hyps = vec![toks("def add ( a , b ) : return a + b"), toks("x = foo ( y )")];
    let gold = vec![toks("def add ( x , y ) : return x + y"), toks("x = foo ( y , z )")];
    let b = bleu(&hyps, &gold).unwrap();
    let ok = acc == 100.0 && (self_bleu - 100.0).abs() < 1e-9 && (b - BLEU_ORACLE).abs() < BLEU_TOL;
    report(10, ok, &format!("metrics: StrAcc {acc}, self-BLEU {self_bleu:.4}, BLEU {b:.4} vs reference scorer {BLEU_ORACLE:.4}"));
    assert!(ok);
}
