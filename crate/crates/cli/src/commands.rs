use std::fs::{self, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;

use syntaxgen::config::Config;
use syntaxgen::corpus::{prepare, read_records, to_train_examples, CorpusRecord, Dataset, ProgramFormat};
use syntaxgen::grammar::{linearize, parse_sexpr, Grammar};
use syntaxgen::inference::generate as beam_search;
use syntaxgen::metrics::EvalReport;
use syntaxgen::model::{Model, ModelDims};
use syntaxgen::nl_reader::{tokenize, NlInput, TokenizeMode, Vocabulary};
use syntaxgen::numeric::{primitive_suite, GradCheckOptions};
use syntaxgen::synth::{copy_only_fraction, synth_task, SynthOptions};
use syntaxgen::training::{load_model, micro_gradient_check, save_model, Control, Trainer};

use crate::error::CliError;
use crate::{ConfigArgs, EvaluateArgs, GenerateArgs, GradcheckArgs, SynthArgs, TrainArgs};

const CONFIG_FILE: &str = "config.txt";
const GRAMMAR_FILE: &str = "grammar.txt";
const WORDS_FILE: &str = "words.txt";
const CHARS_FILE: &str = "chars.txt";
const MODE_FILE: &str = "mode.txt";
const MODEL_FILE: &str = "model.ckpt";
const BEST_FILE: &str = "best.ckpt";
const METRICS_FILE: &str = "metrics.log";

const PRIMITIVE_TOL: f64 = 1e-4;
const END_TO_END_TOL: f64 = 1e-3;

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::read(path, e))
}

fn write_atomic(path: &Path, text: &str) -> Result<(), CliError> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, text).and_then(|_| fs::rename(&tmp, path)).map_err(|e| CliError::write(path, e))
}

fn parse_mode(s: &str) -> Result<TokenizeMode, CliError> {
    s.trim().parse().map_err(CliError::Usage)
}

fn mode_name(m: TokenizeMode) -> &'static str {
    match m {
        TokenizeMode::Plain => "plain",
        TokenizeMode::Structural => "structural",
    }
}

fn load_config(args: &ConfigArgs) -> Result<Config, CliError> {
    let mut cfg = Config::default();
    if let Some(p) = &args.config {
        cfg.apply_text(&read_text(p)?).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
    }
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn load_grammar(path: &Path) -> Result<Grammar, CliError> {
    Grammar::parse(&read_text(path)?).map_err(|e| CliError::grammar(path, e))
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let mode = parse_mode(&a.mode)?;
    let grammar = load_grammar(&a.grammar)?;
    let records = read_records(&a.train)?;
    let strict = cfg.train.strict;
    let ds = Dataset::build(grammar, &records, mode, &cfg.model, strict)?;
    if ds.examples.is_empty() {
        return Err(CliError::Data(format!("{}: no usable training examples", a.train.display())));
    }
    log::info!("{} training examples, {} skipped, {} rules", ds.examples.len(), ds.issues.len(), ds.grammar.num_rules());

    let dev = match &a.dev {
        Some(p) => {
            let recs = read_records(p)?;
            let mut g = ds.grammar.clone();
            let (parsed, _) = prepare(&recs, mode, &mut g, false, strict)?;
            let max_arity = ds.grammar.max_arity();
            to_train_examples(&parsed, &ds.grammar, &cfg.model, max_arity, &ds.words, &ds.chars, strict)?.0
        }
        None => Vec::new(),
    };

    let out = &a.out;
    fs::create_dir_all(out).map_err(|e| CliError::write(out, e))?;
    write_atomic(&out.join(CONFIG_FILE), &cfg.to_text())?;
    write_atomic(&out.join(GRAMMAR_FILE), &ds.grammar.to_text())?;
    write_atomic(&out.join(WORDS_FILE), &ds.words.to_text())?;
    write_atomic(&out.join(CHARS_FILE), &ds.chars.to_text())?;
    write_atomic(&out.join(MODE_FILE), &format!("{}\n", mode_name(mode)))?;
    let metrics_path = out.join(METRICS_FILE);
    fs::write(&metrics_path, "").map_err(|e| CliError::write(&metrics_path, e))?;

    let mut model = Model::new(&cfg.model, ds.dims(), cfg.train.precision, cfg.train.seed)?;
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.inference.max_steps);
    let every = cfg.train.checkpoint_every;
    let mut best = f64::NEG_INFINITY;
    let mut io_error = None;
    let history = trainer.train(&mut model, &ds.grammar, &ds.words, &ds.examples, &dev, |stats, m| {
        let line = format!("{}\n", stats.log_line());
        let appended = OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .and_then(|mut f| f.write_all(line.as_bytes()));
        if let Err(e) = appended {
            io_error = Some(CliError::write(&metrics_path, e));
            return Ok(Control::Stop);
        }
        if every > 0 && stats.epoch % every == 0 {
            save_model(&out.join(format!("epoch-{:04}.ckpt", stats.epoch)), m, &cfg)?;
        }
        if let Some(acc) = stats.dev_str_acc {
            if acc > best {
                best = acc;
                save_model(&out.join(BEST_FILE), m, &cfg)?;
            }
        }
        Ok(Control::Continue)
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    save_model(&out.join(MODEL_FILE), &model, &cfg)?;
    if let Some(last) = history.last() {
        println!("trained {} epochs, final loss {:.6}", last.epoch, last.loss);
    }
    if best.is_finite() {
        println!("best dev StrAcc {best:.2}");
    }
    println!("model written to {}", out.display());
    Ok(())
}

struct ModelDir {
    model: Model,
    config: Config,
    grammar: Grammar,
    words: Vocabulary,
    chars: Vocabulary,
    mode: TokenizeMode,
}

fn load_model_dir(dir: &Path) -> Result<ModelDir, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("{} is not a model directory", dir.display())));
    }
    let grammar = load_grammar(&dir.join(GRAMMAR_FILE))?;
    let vocab = |name: &str| -> Result<Vocabulary, CliError> {
        let p = dir.join(name);
        Vocabulary::from_text(&read_text(&p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
    };
    let words = vocab(WORDS_FILE)?;
    let chars = vocab(CHARS_FILE)?;
    let mode = parse_mode(&read_text(&dir.join(MODE_FILE))?)?;
    let ckpt = dir.join(MODEL_FILE);
    let (model, config) = load_model(&ckpt).map_err(|e| CliError::Checkpoint(format!("{}: {e}", ckpt.display())))?;
    let expected = ModelDims {
        rules: grammar.num_rules(),
        symbols: grammar.num_symbols(),
        max_arity: grammar.max_arity(),
        words: words.len(),
        chars: chars.len(),
    };
    if model.dims != expected {
        return Err(CliError::Checkpoint(format!(
            "{} was trained for {} but the directory's grammar and vocabularies give {}; retrain or restore the matching files",
            ckpt.display(),
            dims_text(&model.dims),
            dims_text(&expected)
        )));
    }
    Ok(ModelDir { model, config, grammar, words, chars, mode })
}

fn dims_text(d: &ModelDims) -> String {
    ModelDims::KEYS.iter().map(|k| format!("{k}={}", d.get(k).unwrap_or(0))).collect::<Vec<_>>().join(" ")
}

fn reference_tokens(grammar: &Grammar, rec: &CorpusRecord) -> Result<Vec<String>, CliError> {
    match rec.format {
        ProgramFormat::Tokens => Ok(rec.program.split_whitespace().map(String::from).collect()),
        ProgramFormat::Ast => parse_sexpr(grammar, &rec.program)
            .and_then(|t| linearize(&t))
            .map_err(|e| CliError::Data(format!("record {}: {e}", rec.id))),
    }
}

fn beam_width(cli: Option<usize>, cfg: &Config) -> Result<usize, CliError> {
    match cli {
        Some(0) => Err(CliError::Usage("--beam must be at least 1".into())),
        Some(b) => Ok(b),
        None => Ok(cfg.inference.beam_size),
    }
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let items = match (&a.model, &a.predictions, &a.references) {
        (None, Some(p), Some(r)) => {
            let preds = read_text(p)?;
            let refs = read_text(r)?;
            let preds: Vec<&str> = preds.lines().collect();
            let refs: Vec<&str> = refs.lines().collect();
            if preds.len() != refs.len() {
                return Err(CliError::Data(format!("{} predictions for {} references", preds.len(), refs.len())));
            }
            let toks = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
            preds.iter().zip(&refs).enumerate().map(|(i, (p, r))| ((i + 1).to_string(), toks(p), toks(r))).collect()
        }
        (Some(dir), None, None) => {
            let test = a.test.as_ref().ok_or_else(|| CliError::Usage("--model needs --test".into()))?;
            let m = load_model_dir(dir)?;
            let mode = match &a.mode {
                Some(s) => parse_mode(s)?,
                None => m.mode,
            };
            let mut icfg = m.config.inference.clone();
            icfg.beam_size = beam_width(a.beam, &m.config)?;
            let mut items = Vec::new();
            for rec in read_records(test)? {
                let reference = reference_tokens(&m.grammar, &rec)?;
                let tokens = tokenize(&rec.description, mode);
                let nl = NlInput::new(tokens, &m.words, &m.chars, m.config.model.char_len)?;
                let best = beam_search(&m.model, &m.grammar, &m.words, &nl, &icfg)?;
                let prediction = best.into_iter().next().map(|g| g.tokens).unwrap_or_default();
                items.push((rec.id, prediction, reference));
            }
            items
        }
        _ => return Err(CliError::Usage("use either --predictions with --references, or --model with --test".into())),
    };
    let report = EvalReport::new(items)?;
    let text = report.to_text();
    match &a.out {
        Some(p) => {
            write_atomic(p, &text)?;
            println!("str_acc {:.4} bleu {:.4} ({} examples)", report.str_acc, report.bleu, report.verdicts.len());
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn generate(a: &GenerateArgs) -> Result<(), CliError> {
    let m = load_model_dir(&a.model)?;
    let text = match &a.description {
        Some(d) => d.clone(),
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).map_err(|e| CliError::Data(format!("cannot read stdin: {e}")))?;
            s
        }
    };
    let mode = match &a.mode {
        Some(s) => parse_mode(s)?,
        None => m.mode,
    };
    let tokens = tokenize(&text, mode);
    let nl = NlInput::new(tokens, &m.words, &m.chars, m.config.model.char_len)?;
    let mut icfg = m.config.inference.clone();
    icfg.beam_size = beam_width(a.beam, &m.config)?;
    let results = beam_search(&m.model, &m.grammar, &m.words, &nl, &icfg)?;
    println!("# beam_size\t{}", icfg.beam_size);
    if results.is_empty() {
        log::warn!("no complete program within {} steps", icfg.max_steps);
    }
    for (rank, r) in results.iter().enumerate() {
        println!("{}\t{:.6}\t{:.6}\t{}", rank + 1, r.score, r.log_prob, r.tokens.join(" "));
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let suite = primitive_suite(a.seed).map_err(|e| CliError::GradCheck(e.to_string()))?;
    let mut worst_primitive = 0.0f64;
    for (name, r) in &suite {
        println!("primitive\t{name}\t{:.3e}", r.max_rel_error);
        worst_primitive = worst_primitive.max(r.max_rel_error);
    }
    let micro = micro_gradient_check(a.seed, &GradCheckOptions::default()).map_err(|e| CliError::GradCheck(e.to_string()))?;
    println!("end_to_end\t{:.3e}\t{} entries", micro.max_rel_error, micro.checked);
    println!("max relative error: primitives {worst_primitive:.3e}, end-to-end {:.3e}", micro.max_rel_error);
    if !micro.dead.is_empty() {
        return Err(CliError::GradCheck(format!("parameters without gradient: {}", micro.dead.join(", "))));
    }
    if worst_primitive >= PRIMITIVE_TOL || micro.max_rel_error >= END_TO_END_TOL {
        return Err(CliError::GradCheck(format!(
            "gradient check failed: primitives {worst_primitive:.3e} (limit {PRIMITIVE_TOL:e}), end-to-end {:.3e} (limit {END_TO_END_TOL:e}) at {:?}",
            micro.max_rel_error, micro.worst_param
        )));
    }
    println!("ok");
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let opts = SynthOptions {
        seed: a.seed,
        size: a.size,
        statement_kinds: a.statement_kinds,
        operators: a.operators,
        functions: a.functions,
        numbers: a.numbers,
        predefined_names: a.predefined_names,
        identifier_pool: a.identifier_pool,
        max_depth: a.max_depth,
        max_statements: a.max_statements,
        max_rules: a.max_rules,
        copy_rate: a.copy_rate,
    };
    let task = synth_task(&opts)?;
    task.write_to(&a.out)?;
    let grammar = Grammar::parse(&task.grammar).map_err(|e| CliError::Data(e.to_string()))?;
    println!(
        "wrote {} examples to {} ({} rules, {:.0}% with copy-only tokens)",
        task.records.len(),
        a.out.display(),
        grammar.num_rules(),
        100.0 * copy_only_fraction(&grammar, &task.records)
    );
    Ok(())
}
