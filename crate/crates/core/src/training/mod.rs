//! Teacher-forced training: per-step targets, NLL objective, Adafactor
//! updates and checkpoints.

mod adafactor;
mod checkpoint;

pub use adafactor::{Adafactor, StepReport};
pub use checkpoint::{Checkpoint, CheckpointEntry, CheckpointError, MAGIC, VERSION};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ast_reader::AstInput;
use crate::config::{Config, ConfigError, ModelConfig, TrainConfig};
use crate::decoder::QueryPathInput;
use crate::grammar::{valid_rule_mask, DerivationState, Grammar, RuleMask, RuleRef};
use crate::inference::greedy;
use crate::metrics::str_acc;
use crate::model::{Model, ModelDims, ModelError};
use crate::nl_reader::{NlInput, Vocabulary};
use crate::numeric::{check_gradients, GradCheckOptions, GradCheckReport, Gradients, Graph, NumericError, Var};

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("example {id}: {source}")]
    Example { id: String, source: ModelError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint config: {0}")]
    Dims(String),
}

/// One supervised derivation, preprocessed for teacher forcing.
///
/// Step t feeds rules[0..=t] to the AST reader and predicts rules[t+1].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: String,
    pub nl: NlInput,
    pub rules: Vec<RuleRef>,
    pub ast: AstInput,
    pub paths: Vec<QueryPathInput>,
    pub masks: Vec<RuleMask>,
    /// Per step, columns of the S×(R+L) probability matrix whose sum is the
    /// target probability. Empty for steps the model cannot score.
    pub targets: Vec<Vec<usize>>,
    pub program: Vec<String>,
}

impl TrainExample {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grammar: &Grammar,
        cfg: &ModelConfig,
        max_arity: usize,
        words: &Vocabulary,
        chars: &Vocabulary,
        id: &str,
        tokens: Vec<String>,
        rules: Vec<RuleRef>,
    ) -> Result<Self, ModelError> {
        if rules.len() < 2 {
            return Err(ModelError::ShortDerivation);
        }
        let nl = NlInput::new(tokens, words, chars, cfg.char_len)?;
        let mut state = DerivationState::new();
        state.apply(grammar, rules[0].clone())?;
        let steps = rules.len() - 1;
        let (mut paths, mut masks, mut targets) = (Vec::with_capacity(steps), Vec::with_capacity(steps), Vec::with_capacity(steps));
        for (t, rule) in rules[1..].iter().enumerate() {
            paths.push(QueryPathInput::new(&state.query_path()?, cfg.max_path)?);
            let mask = valid_rule_mask(grammar, &state, &nl.tokens)?;
            targets.push(target_columns(grammar, &state, rule, &mask, &nl.tokens, cfg, t)?);
            masks.push(mask);
            state.apply(grammar, rule.clone())?;
        }
        let program = state.tokens()?;
        let ast = AstInput::from_state(grammar, &state, steps, words, max_arity)?;
        Ok(TrainExample { id: id.to_string(), nl, rules, ast, paths, masks, targets, program })
    }

    pub fn steps(&self) -> usize {
        self.targets.len()
    }

    pub fn scored_steps(&self) -> usize {
        self.targets.iter().filter(|t| !t.is_empty()).count()
    }

    /// Keeps only the first `steps` decoding steps.
    pub fn truncate(&mut self, steps: usize) {
        let steps = steps.min(self.steps());
        self.targets.truncate(steps);
        self.paths.truncate(steps);
        self.masks.truncate(steps);
        self.ast = self.ast.prefix(steps);
    }
}

/// Probability-matrix columns that realize `rule` at the frontier of
/// `state`. Predefined rules sit at their id, copy position t at R + t.
///
/// A literal rule whose token also appears at copyable positions keeps both
/// routes, or only the copy route under `copy_preferred`. Copy-only targets
/// are unscorable without the pointer and yield no columns.
pub fn target_columns(
    grammar: &Grammar,
    state: &DerivationState,
    rule: &RuleRef,
    mask: &RuleMask,
    nl_tokens: &[String],
    cfg: &ModelConfig,
    step: usize,
) -> Result<Vec<usize>, ModelError> {
    let r = grammar.num_rules();
    let masked = || ModelError::TargetMasked { step, target: grammar.render_rule(rule) };
    let copies_of = |tok: &str| -> Vec<usize> {
        if cfg.disable_pointer {
            return Vec::new();
        }
        nl_tokens.iter().enumerate().filter(|(t, w)| mask.copy[*t] && w.as_str() == tok).map(|(t, _)| r + t).collect()
    };
    match rule {
        RuleRef::Predefined(id) => {
            if !mask.predefined.get(id.0).copied().unwrap_or(false) {
                return Err(masked());
            }
            let parent = state.frontier().ok_or_else(masked)?;
            let copies = if grammar.is_copy_slot(parent) {
                match grammar.rule(*id)?.children.as_slice() {
                    [leaf] if grammar.symbol(*leaf).is_terminal() => copies_of(&grammar.symbol(*leaf).name),
                    _ => Vec::new(),
                }
            } else {
                Vec::new()
            };
            if cfg.copy_preferred && !copies.is_empty() {
                return Ok(copies);
            }
            let mut cols = vec![id.0];
            cols.extend(copies);
            Ok(cols)
        }
        RuleRef::Copy(tok) => {
            if cfg.disable_pointer {
                return Ok(Vec::new());
            }
            let cols = copies_of(tok);
            if cols.is_empty() {
                return Err(masked());
            }
            Ok(cols)
        }
    }
}

/// Mean over scored steps of −log(max(Σ probs[s, cols], 1e-12)). `None`
/// when no step is scored.
pub fn nll_loss(g: &mut Graph, probs: Var, targets: &[Vec<usize>]) -> Result<Option<Var>, NumericError> {
    let cols = g.shape(probs).1;
    let groups: Vec<Vec<usize>> = targets
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.is_empty())
        .map(|(s, t)| t.iter().map(|c| s * cols + c).collect())
        .collect();
    if groups.is_empty() {
        return Ok(None);
    }
    let p = g.select_sum(probs, &groups)?;
    let p = g.clamp_min(p, PROB_FLOOR);
    let lp = g.log(p);
    let mean = g.mean(lp);
    Ok(Some(g.scale(mean, -1.0)))
}

/// Teacher-forced loss of one example.
pub fn example_loss(model: &Model, g: &mut Graph, ex: &TrainExample, dropout: f64) -> Result<Option<Var>, ModelError> {
    let out = model.forward(g, &ex.nl, &ex.ast, &ex.paths, &ex.masks, dropout)?;
    Ok(nll_loss(g, out.probs, &ex.targets)?)
}

/// Loss value and gradients of one example. With `seed` set, dropout is
/// active and seeded; otherwise evaluation mode.
pub fn example_gradients(
    model: &Model,
    ex: &TrainExample,
    dropout: f64,
    seed: Option<u64>,
) -> Result<Option<(f64, Gradients)>, ModelError> {
    let mut g = match seed {
        Some(s) => Graph::training(&model.store, s),
        None => Graph::new(&model.store),
    };
    let rate = if seed.is_some() { dropout } else { 0.0 };
    let Some(loss) = example_loss(model, &mut g, ex, rate)? else { return Ok(None) };
    let value = g.value(loss).item();
    Ok(Some((value, g.backward(loss)?)))
}

/// Mean evaluation-mode loss over examples that have scored steps.
pub fn mean_loss(model: &Model, examples: &[TrainExample]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for ex in examples {
        let mut g = Graph::new(&model.store);
        if let Some(l) = example_loss(model, &mut g, ex, 0.0)? {
            total += g.value(l).item();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// StrAcc of greedy decoding against each example's program.
pub fn greedy_str_acc(
    model: &Model,
    grammar: &Grammar,
    words: &Vocabulary,
    examples: &[TrainExample],
    max_steps: usize,
) -> Result<f64, ModelError> {
    let mut preds = Vec::with_capacity(examples.len());
    for ex in examples {
        let out = greedy(model, grammar, words, &ex.nl, max_steps)?;
        preds.push(out.map(|g| g.tokens).unwrap_or_default());
    }
    let refs: Vec<Vec<String>> = examples.iter().map(|e| e.program.clone()).collect();
    Ok(str_acc(&preds, &refs).unwrap_or(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub dev_str_acc: Option<f64>,
    pub skipped_updates: usize,
}

impl EpochStats {
    /// `epoch<TAB>loss<TAB>dev_stracc`, with `-` when dev was not evaluated.
    pub fn log_line(&self) -> String {
        let dev = self.dev_str_acc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
        format!("{}\t{:.6}\t{}", self.epoch, self.loss, dev)
    }
}

/// What the per-epoch callback asks the loop to do next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

pub struct Trainer {
    pub optimizer: Adafactor,
    pub config: TrainConfig,
    /// Step cap for dev-set greedy decoding.
    pub max_steps: usize,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, max_steps: usize) -> Self {
        Trainer { optimizer: Adafactor::default(), config, max_steps, epoch: 0 }
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One pass over `train` in a seeded shuffled order. Returns the mean
    /// per-example loss and the number of skipped updates.
    pub fn run_epoch(&mut self, model: &mut Model, train: &[TrainExample]) -> Result<(f64, usize), TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        self.epoch += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (self.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut counted, mut skipped) = (0.0, 0usize, 0usize);
        for batch in order.chunks(self.config.batch_size.max(1)) {
            let mut grads = Gradients::zeros_like(&model.store);
            let mut n = 0usize;
            for &i in batch {
                let ex = &train[i];
                let seed = rng.random::<u64>();
                let res = example_gradients(model, ex, self.config.dropout, Some(seed))
                    .map_err(|e| TrainError::Example { id: ex.id.clone(), source: e })?;
                if let Some((loss, g)) = res {
                    total += loss;
                    counted += 1;
                    grads.merge(&g);
                    n += 1;
                }
            }
            if n == 0 {
                continue;
            }
            grads.scale(1.0 / n as f64);
            let norm = grads.global_norm();
            if norm.is_finite() && norm > self.config.clip_norm {
                grads.scale(self.config.clip_norm / norm);
            }
            if !self.optimizer.step(&mut model.store, &grads).applied {
                skipped += 1;
            }
        }
        Ok((if counted == 0 { 0.0 } else { total / counted as f64 }, skipped))
    }

    /// Runs up to `config.epochs` epochs. `on_epoch` sees each epoch's
    /// stats and the updated model.
    pub fn train(
        &mut self,
        model: &mut Model,
        grammar: &Grammar,
        words: &Vocabulary,
        train: &[TrainExample],
        dev: &[TrainExample],
        mut on_epoch: impl FnMut(&EpochStats, &Model) -> Result<Control, TrainError>,
    ) -> Result<Vec<EpochStats>, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let mut history = Vec::new();
        for _ in 0..self.config.epochs {
            let (loss, skipped_updates) = self.run_epoch(model, train)?;
            let epoch = self.epoch;
            let dev_str_acc = if !dev.is_empty() && self.config.dev_every > 0 && epoch.is_multiple_of(self.config.dev_every) {
                Some(greedy_str_acc(model, grammar, words, dev, self.max_steps)?)
            } else {
                None
            };
            let stats = EpochStats { epoch, loss, dev_str_acc, skipped_updates };
            log::info!("{}", stats.log_line());
            let control = on_epoch(&stats, model)?;
            history.push(stats);
            if control == Control::Stop || (self.config.target_loss > 0.0 && loss < self.config.target_loss) {
                break;
            }
        }
        Ok(history)
    }
}

/// Finite-difference check of the summed NLL of `examples`. Needs a
/// 64-bit store.
pub fn gradient_check(
    model: &Model,
    examples: &[TrainExample],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, ModelError> {
    let total = |g: &mut Graph| -> Result<Option<Var>, ModelError> {
        let mut acc: Option<Var> = None;
        for ex in examples {
            if let Some(l) = example_loss(model, g, ex, 0.0)? {
                acc = Some(match acc {
                    Some(a) => g.add(a, l)?,
                    None => l,
                });
            }
        }
        Ok(acc)
    };
    {
        let mut g = Graph::new(&model.store);
        if total(&mut g)?.is_none() {
            return Err(ModelError::Numeric(NumericError::Loss("no scored steps".into())));
        }
    }
    Ok(check_gradients(
        &model.store,
        |g| total(g).map_err(|e| NumericError::Loss(e.to_string()))?.ok_or_else(|| NumericError::Loss("no scored steps".into())),
        opts,
    )?)
}

const MICRO_GRAMMAR: &str = "\
Prog -> Stmt
Prog -> Stmt ; Prog
Stmt -> print ( Name )
Stmt -> set Name = Num
Num -> one
Num -> two
Name -> x
%copy Name
";

/// Finite-difference check of the whole model at the smallest scale: d = 4,
/// one block per stage, at most three steps and three description tokens
/// per example, one example exercising the copy path.
pub fn micro_gradient_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport, TrainError> {
    let grammar = Grammar::parse(MICRO_GRAMMAR).map_err(ModelError::from)?;
    let pairs = [("show x", "print ( x )"), ("one to y", "set y = one")];
    let words = Vocabulary::build(pairs.iter().flat_map(|(d, _)| d.split_whitespace()));
    let chars = Vocabulary::build_chars(pairs.iter().flat_map(|(d, _)| d.split_whitespace()));
    let cfg = ModelConfig {
        d_model: 4,
        heads: 2,
        nl_layers: 1,
        ast_layers: 1,
        decoder_layers: 1,
        ffn_dim: 8,
        tree_conv_blocks: 1,
        char_len: 3,
        max_path: 4,
        ..ModelConfig::default()
    };
    let dims = ModelDims {
        rules: grammar.num_rules(),
        symbols: grammar.num_symbols(),
        max_arity: grammar.max_arity(),
        words: words.len(),
        chars: chars.len(),
    };
    let model = Model::new(&cfg, dims, crate::numeric::Precision::F64, seed)?;
    let mut examples = Vec::new();
    for (i, (desc, program)) in pairs.iter().enumerate() {
        let tokens: Vec<String> = program.split_whitespace().map(String::from).collect();
        let tree = crate::grammar::parse_program_tokens(&grammar, &tokens).map_err(ModelError::from)?;
        let rules = crate::grammar::decompose(&grammar, &tree).map_err(ModelError::from)?;
        let nl = desc.split_whitespace().map(String::from).collect();
        let mut ex = TrainExample::new(&grammar, &cfg, grammar.max_arity(), &words, &chars, &i.to_string(), nl, rules)?;
        ex.truncate(3);
        examples.push(ex);
    }
    Ok(gradient_check(&model, &examples, opts)?)
}

const DIMS_PREFIX: &str = "dims.";

/// Config text plus the grammar/vocabulary sizes, as stored in checkpoints.
pub fn snapshot_text(config: &Config, dims: &ModelDims) -> String {
    let mut text = config.to_text();
    for key in ModelDims::KEYS {
        text.push_str(&format!("{DIMS_PREFIX}{key} = {}\n", dims.get(key).unwrap_or(0)));
    }
    text
}

pub fn parse_snapshot(text: &str) -> Result<(Config, ModelDims), TrainError> {
    let mut dims = ModelDims { rules: 0, symbols: 0, max_arity: 0, words: 0, chars: 0 };
    let mut seen = 0;
    let mut rest = String::new();
    for line in text.lines() {
        match line.trim().strip_prefix(DIMS_PREFIX) {
            Some(kv) => {
                let (k, v) = kv.split_once('=').ok_or_else(|| TrainError::Dims(line.to_string()))?;
                let v: usize = v.trim().parse().map_err(|_| TrainError::Dims(line.to_string()))?;
                if !dims.set(k.trim(), v) {
                    return Err(TrainError::Dims(format!("unknown key {}", k.trim())));
                }
                seen += 1;
            }
            None => {
                rest.push_str(line);
                rest.push('\n');
            }
        }
    }
    if seen != ModelDims::KEYS.len() {
        return Err(TrainError::Dims("missing model dimensions".into()));
    }
    Ok((Config::parse(&rest)?, dims))
}

pub fn save_model(path: &Path, model: &Model, config: &Config) -> Result<(), TrainError> {
    let text = snapshot_text(config, &model.dims);
    Ok(Checkpoint::from_store(&text, &model.store).save(path)?)
}

/// Rebuilds a model from a checkpoint. Returns it with the stored config.
pub fn load_model(path: &Path) -> Result<(Model, Config), TrainError> {
    let ck = Checkpoint::load(path)?;
    let (config, dims) = parse_snapshot(&ck.config)?;
    let mut model = Model::new(&config.model, dims, config.train.precision, 0)?;
    ck.apply_to(&mut model.store)?;
    Ok((model, config))
}

#[cfg(test)]
mod tests;
