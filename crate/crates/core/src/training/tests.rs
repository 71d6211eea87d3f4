use super::*;
use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::grammar::{decompose, parse_program_tokens};
use crate::numeric::{ParamStore, Precision, Tensor};

const G: &str = "\
Prog -> Stmt
Prog -> Stmt ; Prog
Stmt -> print ( Name )
Stmt -> set Name = Num
Num -> one
Num -> two
Name -> x
%copy Name
";

struct Task {
    grammar: Grammar,
    words: Vocabulary,
    chars: Vocabulary,
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn task(pairs: &[(&str, &str)]) -> Task {
    let grammar = Grammar::parse(G).unwrap();
    let words = Vocabulary::build(pairs.iter().flat_map(|(d, _)| d.split_whitespace()));
    let chars = Vocabulary::build_chars(pairs.iter().flat_map(|(d, _)| d.split_whitespace()));
    Task { grammar, words, chars }
}

fn small_cfg(d: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        heads: 2,
        nl_layers: 1,
        ast_layers: 1,
        decoder_layers: 1,
        ffn_dim: 2 * d,
        tree_conv_blocks: 1,
        char_len: 6,
        max_path: 8,
        ..ModelConfig::default()
    }
}

fn dims(t: &Task) -> ModelDims {
    ModelDims {
        rules: t.grammar.num_rules(),
        symbols: t.grammar.num_symbols(),
        max_arity: t.grammar.max_arity(),
        words: t.words.len(),
        chars: t.chars.len(),
    }
}

fn example(t: &Task, cfg: &ModelConfig, id: &str, desc: &str, program: &str) -> TrainExample {
    let tree = parse_program_tokens(&t.grammar, &toks(program)).unwrap();
    let rules = decompose(&t.grammar, &tree).unwrap();
    TrainExample::new(&t.grammar, cfg, t.grammar.max_arity(), &t.words, &t.chars, id, toks(desc), rules).unwrap()
}

const PAIRS: &[(&str, &str)] = &[
    ("show total", "print ( total )"),
    ("assign one to x then show x", "set x = one ; print ( x )"),
    ("assign two to count", "set count = two"),
];

#[test]
fn targets_cover_routes() {
    let t = task(PAIRS);
    let cfg = small_cfg(8);
    let r = t.grammar.num_rules();
    let ex = example(&t, &cfg, "a", "show total total", "print ( total )");
    // start, Prog -> Stmt, Stmt -> print ( Name ), copy "total"
    assert_eq!(ex.steps(), 3);
    assert_eq!(ex.targets[0], vec![1]);
    assert_eq!(ex.targets[1], vec![3]);
    assert_eq!(ex.targets[2], vec![r + 1, r + 2]);

    // "x" has a literal rule and also appears in the description.
    let ex = example(&t, &cfg, "b", "show x", "print ( x )");
    let x_rule = t.grammar.literal_rule(t.grammar.nonterminal("Name").unwrap(), "x").unwrap();
    assert_eq!(ex.targets[2], vec![x_rule.0, r + 1]);
    let preferred = ModelConfig { copy_preferred: true, ..cfg.clone() };
    assert_eq!(example(&t, &preferred, "b", "show x", "print ( x )").targets[2], vec![r + 1]);

    let no_ptr = ModelConfig { disable_pointer: true, ..cfg.clone() };
    let ex = example(&t, &no_ptr, "a", "show total", "print ( total )");
    assert!(ex.targets[2].is_empty());
    assert_eq!(ex.scored_steps(), 2);
    assert_eq!(example(&t, &no_ptr, "b", "show x", "print ( x )").targets[2], vec![x_rule.0]);
}

#[test]
fn copy_target_absent_from_description_is_rejected() {
    let t = task(PAIRS);
    let cfg = small_cfg(8);
    let tree = parse_program_tokens(&t.grammar, &toks("print ( total )")).unwrap();
    let rules = decompose(&t.grammar, &tree).unwrap();
    let err = TrainExample::new(&t.grammar, &cfg, 3, &t.words, &t.chars, "c", toks("show sum"), rules).unwrap_err();
    assert!(matches!(err, ModelError::TargetMasked { step: 2, .. }));
}

#[test]
fn uniform_over_four_rules_costs_ln4() {
    let store = ParamStore::new(Precision::F64);
    let mut g = Graph::new(&store);
    let probs = g.constant(Tensor::matrix(2, 6, vec![0.25, 0.25, 0.0, 0.25, 0.25, 0.0, 0.25, 0.0, 0.25, 0.25, 0.0, 0.25]).unwrap());
    let loss = nll_loss(&mut g, probs, &[vec![3], vec![0]]).unwrap().unwrap();
    assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-15);
    let sure = g.constant(Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap());
    let loss = nll_loss(&mut g, sure, &[vec![1]]).unwrap().unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
    let zero = nll_loss(&mut g, sure, &[vec![0]]).unwrap().unwrap();
    assert!((g.value(zero).item() + PROB_FLOOR.ln()).abs() < 1e-9);
    assert!(nll_loss(&mut g, sure, &[vec![]]).unwrap().is_none());
}

#[test]
fn copy_step_loss_is_gated_pointer_probability() {
    let t = task(PAIRS);
    let cfg = small_cfg(8);
    let model = Model::new(&cfg, dims(&t), Precision::F64, 3).unwrap();
    let ex = example(&t, &cfg, "a", "show total", "print ( total )");
    let mut g = Graph::new(&model.store);
    let out = model.forward(&mut g, &ex.nl, &ex.ast, &ex.paths, &ex.masks, 0.0).unwrap();
    let d = Decoder::distributions(&g, &out, &ex.masks);
    let only_copy: Vec<Vec<usize>> = ex.targets.iter().enumerate().map(|(s, c)| if s == 2 { c.clone() } else { vec![] }).collect();
    let loss = nll_loss(&mut g, out.probs, &only_copy).unwrap().unwrap();
    let expected = -((1.0 - d[2].gate) * d[2].copy[1]).ln();
    assert!((g.value(loss).item() - expected).abs() < 1e-12);
}

#[test]
fn mean_loss_is_mean_of_example_losses() {
    let t = task(PAIRS);
    let cfg = small_cfg(8);
    let model = Model::new(&cfg, dims(&t), Precision::F64, 5).unwrap();
    let exs: Vec<TrainExample> = PAIRS.iter().enumerate().map(|(i, (d, p))| example(&t, &cfg, &i.to_string(), d, p)).collect();
    let single: Vec<f64> = exs.iter().map(|e| mean_loss(&model, std::slice::from_ref(e)).unwrap()).collect();
    let mean = single.iter().sum::<f64>() / 3.0;
    assert!((mean_loss(&model, &exs).unwrap() - mean).abs() < 1e-12);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let report = micro_gradient_check(11, &GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
    assert!(report.dead.is_empty(), "{:?}", report.dead);
    assert!(report.checked > 100);
}

#[test]
fn memorizes_single_example() {
    let t = task(PAIRS);
    let cfg = small_cfg(32);
    let mut model = Model::new(&cfg, dims(&t), Precision::F32, 1).unwrap();
    let ex = vec![example(&t, &cfg, "b", PAIRS[1].0, PAIRS[1].1)];
    let tc = TrainConfig { epochs: 200, batch_size: 1, dev_every: 0, ..TrainConfig::default() };
    let mut trainer = Trainer::new(tc, 50);
    let hist = trainer.train(&mut model, &t.grammar, &t.words, &ex, &[], |_, _| Ok(Control::Continue)).unwrap();
    let last = hist.last().unwrap().loss;
    assert!(last < 0.05, "final loss {last}");
    assert_eq!(greedy_str_acc(&model, &t.grammar, &t.words, &ex, 50).unwrap(), 100.0);
}

#[test]
fn empty_corpus_is_an_error() {
    let t = task(PAIRS);
    let cfg = small_cfg(8);
    let mut model = Model::new(&cfg, dims(&t), Precision::F32, 1).unwrap();
    let mut trainer = Trainer::new(TrainConfig::default(), 10);
    let r = trainer.train(&mut model, &t.grammar, &t.words, &[], &[], |_, _| Ok(Control::Continue));
    assert!(matches!(r, Err(TrainError::EmptyCorpus)));
}

fn short_run(t: &Task, cfg: &ModelConfig) -> (Vec<f64>, Model) {
    let mut model = Model::new(cfg, dims(t), Precision::F32, 2).unwrap();
    let exs: Vec<TrainExample> = PAIRS.iter().enumerate().map(|(i, (d, p))| example(t, cfg, &i.to_string(), d, p)).collect();
    let tc = TrainConfig { epochs: 4, batch_size: 2, seed: 9, ..TrainConfig::default() };
    let mut trainer = Trainer::new(tc, 30);
    let hist = trainer.train(&mut model, &t.grammar, &t.words, &exs, &exs, |_, _| Ok(Control::Continue)).unwrap();
    (hist.iter().map(|h| h.loss).collect(), model)
}

#[test]
fn training_is_deterministic() {
    let t = task(PAIRS);
    let cfg = small_cfg(8);
    let (a, ma) = short_run(&t, &cfg);
    let (b, mb) = short_run(&t, &cfg);
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    for (x, y) in ma.store.iter().zip(mb.store.iter()) {
        assert_eq!(x.1.tensor, y.1.tensor);
    }
}

#[test]
fn checkpoint_round_trip_reproduces_loss() {
    let t = task(PAIRS);
    let cfg = small_cfg(8);
    let (_, model) = short_run(&t, &cfg);
    let exs: Vec<TrainExample> = PAIRS.iter().enumerate().map(|(i, (d, p))| example(&t, &cfg, &i.to_string(), d, p)).collect();
    let config = Config { model: cfg.clone(), ..Config::default() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_model(&path, &model, &config).unwrap();
    let (loaded, back) = load_model(&path).unwrap();
    assert_eq!(back, config);
    assert_eq!(loaded.dims, model.dims);
    let before = mean_loss(&model, &exs).unwrap();
    let after = mean_loss(&loaded, &exs).unwrap();
    assert_eq!(before.to_bits(), after.to_bits());
}

#[test]
fn snapshot_requires_dims() {
    let text = Config::default().to_text();
    assert!(matches!(parse_snapshot(&text), Err(TrainError::Dims(_))));
    let d = ModelDims { rules: 4, symbols: 9, max_arity: 3, words: 12, chars: 20 };
    let (c, back) = parse_snapshot(&snapshot_text(&Config::default(), &d)).unwrap();
    assert_eq!(back, d);
    assert_eq!(c, Config::default());
}

#[test]
fn log_line_format() {
    let s = EpochStats { epoch: 3, loss: 0.5, dev_str_acc: Some(66.666666), skipped_updates: 0 };
    assert_eq!(s.log_line(), "3\t0.500000\t66.6667");
    let s = EpochStats { dev_str_acc: None, ..s };
    assert_eq!(s.log_line(), "3\t0.500000\t-");
}
