//! Grammar-constrained beam search over rule expansions.

use std::cmp::Ordering;

use crate::ast_reader::AstInput;
use crate::config::InferenceConfig;
use crate::decoder::{Decoder, QueryPathInput, RuleDistribution};
use crate::grammar::{valid_rule_mask, DerivationState, Grammar, RuleId, RuleRef};
use crate::model::{Model, ModelError};
use crate::nl_reader::{NlInput, Vocabulary};
use crate::numeric::{Graph, Tensor};

#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    pub state: DerivationState,
    pub log_prob: f64,
    pub finished: bool,
}

/// A complete program from [`generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub tokens: Vec<String>,
    pub rules: Vec<RuleRef>,
    pub log_prob: f64,
    /// Ranking score: `log_prob`, or `log_prob / rules` with length
    /// normalization.
    pub score: f64,
}

/// Frozen NL features for one description, reused across decoding steps.
pub struct Decoding<'a> {
    model: &'a Model,
    grammar: &'a Grammar,
    words: &'a Vocabulary,
    nl: &'a NlInput,
    features: Tensor,
}

impl<'a> Decoding<'a> {
    pub fn new(model: &'a Model, grammar: &'a Grammar, words: &'a Vocabulary, nl: &'a NlInput) -> Result<Self, ModelError> {
        let mut g = Graph::new(&model.store);
        let f = model.encode_nl(&mut g, nl, 0.0)?;
        let features = g.value(f).clone();
        Ok(Decoding { model, grammar, words, nl, features })
    }

    /// Distribution over expansions of `state`'s frontier.
    pub fn distribution(&self, state: &DerivationState) -> Result<RuleDistribution, ModelError> {
        let ast = AstInput::from_state(self.grammar, state, state.len(), self.words, self.model.dims.max_arity)?;
        let path = QueryPathInput::new(&state.query_path()?, self.model.max_path())?;
        let mask = valid_rule_mask(self.grammar, state, &self.nl.tokens)?;
        let mut g = Graph::new(&self.model.store);
        let nl = g.constant(self.features.clone());
        let masks = [mask];
        let out = self.model.forward_steps(&mut g, nl, &ast, &[path], &[state.len()], &masks, 0.0)?;
        Ok(Decoder::distributions(&g, &out, &masks).remove(0))
    }

    /// Distinct expansions with positive probability. Copy routes that
    /// produce the same rule are summed; a copied token with a literal rule
    /// under the frontier merges into that rule.
    pub fn candidates(&self, state: &DerivationState, dist: &RuleDistribution) -> Vec<(RuleRef, f64, usize)> {
        let frontier = state.frontier();
        let mut out: Vec<(RuleRef, f64, usize)> = Vec::new();
        for (id, &p) in dist.predefined.iter().enumerate() {
            if dist.mask.predefined[id] && p > 0.0 {
                out.push((RuleRef::Predefined(RuleId(id)), dist.gate * p, 0));
            }
        }
        for (pos, &p) in dist.copy.iter().enumerate() {
            if !dist.mask.copy[pos] || p <= 0.0 {
                continue;
            }
            let tok = &self.nl.tokens[pos];
            let rule = match frontier.and_then(|f| self.grammar.literal_rule(f, tok)) {
                Some(id) => RuleRef::Predefined(id),
                None => RuleRef::Copy(tok.clone()),
            };
            let mass = (1.0 - dist.gate) * p;
            match out.iter_mut().find(|(r, _, _)| *r == rule) {
                Some(entry) => entry.1 += mass,
                None => out.push((rule, mass, pos)),
            }
        }
        out.retain(|(_, p, _)| *p > 0.0);
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| tie_order(a, b)));
        out
    }
}

/// Lower rule id first, predefined before copy, lower copy position first.
fn tie_order(a: &(RuleRef, f64, usize), b: &(RuleRef, f64, usize)) -> Ordering {
    match (&a.0, &b.0) {
        (RuleRef::Predefined(x), RuleRef::Predefined(y)) => x.0.cmp(&y.0),
        (RuleRef::Predefined(_), RuleRef::Copy(_)) => Ordering::Less,
        (RuleRef::Copy(_), RuleRef::Predefined(_)) => Ordering::Greater,
        (RuleRef::Copy(_), RuleRef::Copy(_)) => a.2.cmp(&b.2),
    }
}

fn score(log_prob: f64, len: usize, length_norm: bool) -> f64 {
    if length_norm {
        log_prob / len as f64
    } else {
        log_prob
    }
}

/// Beam search from the start rule. Returns finished programs ranked by
/// score; empty when every hypothesis dies or runs past `max_steps`.
pub fn generate(
    model: &Model,
    grammar: &Grammar,
    words: &Vocabulary,
    nl: &NlInput,
    cfg: &InferenceConfig,
) -> Result<Vec<Generated>, ModelError> {
    let beam_size = cfg.beam_size.max(1);
    let dec = Decoding::new(model, grammar, words, nl)?;
    let mut live = vec![BeamHypothesis { state: DerivationState::started(grammar), log_prob: 0.0, finished: false }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    let mut dropped = 0usize;

    while !live.is_empty() {
        let mut expansions: Vec<BeamHypothesis> = Vec::new();
        for hyp in &live {
            if hyp.state.len() >= cfg.max_steps {
                dropped += 1;
                continue;
            }
            let dist = dec.distribution(&hyp.state)?;
            for (rule, p, _) in dec.candidates(&hyp.state, &dist) {
                let mut state = hyp.state.clone();
                state.apply(grammar, rule)?;
                let finished = state.is_complete();
                expansions.push(BeamHypothesis { state, log_prob: hyp.log_prob + p.ln(), finished });
            }
        }
        // Stable sort keeps parent order, then candidate order, on ties.
        expansions.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        expansions.truncate(beam_size);
        live.clear();
        for e in expansions {
            if e.finished {
                finished.push(e);
            } else {
                live.push(e);
            }
        }
        if !cfg.length_norm && finished.len() >= beam_size {
            finished.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
            let worst_kept = finished[beam_size - 1].log_prob;
            if live.iter().all(|h| h.log_prob <= worst_kept) {
                break;
            }
        }
    }
    if dropped > 0 {
        log::warn!("{dropped} hypotheses dropped after reaching {} rules", cfg.max_steps);
    }
    if finished.is_empty() {
        log::warn!("no complete derivation for input of {} tokens", nl.len());
    }
    let mut out: Vec<Generated> = finished
        .into_iter()
        .map(|h| {
            let tokens = h.state.tokens()?;
            Ok(Generated {
                score: score(h.log_prob, h.state.len(), cfg.length_norm),
                tokens,
                rules: h.state.rules().to_vec(),
                log_prob: h.log_prob,
            })
        })
        .collect::<Result<_, ModelError>>()?;
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(beam_size);
    Ok(out)
}

/// Greedy decoding: beam search of width one.
pub fn greedy(
    model: &Model,
    grammar: &Grammar,
    words: &Vocabulary,
    nl: &NlInput,
    max_steps: usize,
) -> Result<Option<Generated>, ModelError> {
    let cfg = InferenceConfig { beam_size: 1, max_steps, length_norm: false };
    Ok(generate(model, grammar, words, nl, &cfg)?.into_iter().next())
}

/// Sum of per-step log probabilities the model assigns to `rules`, under
/// the same route merging as [`generate`].
pub fn score_derivation(
    model: &Model,
    grammar: &Grammar,
    words: &Vocabulary,
    nl: &NlInput,
    rules: &[RuleRef],
) -> Result<f64, ModelError> {
    let dec = Decoding::new(model, grammar, words, nl)?;
    let mut state = DerivationState::started(grammar);
    let mut total = 0.0;
    for rule in &rules[1..] {
        let dist = dec.distribution(&state)?;
        let p = dec
            .candidates(&state, &dist)
            .into_iter()
            .find(|(r, _, _)| r == rule)
            .map(|(_, p, _)| p)
            .ok_or_else(|| ModelError::TargetMasked { step: state.len() - 1, target: grammar.render_rule(rule) })?;
        total += p.ln();
        state.apply(grammar, rule.clone())?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::grammar::derive;
    use crate::model::ModelDims;
    use crate::numeric::Precision;

    fn tiny(grammar: &Grammar, words: &Vocabulary, chars: &Vocabulary, seed: u64) -> Model {
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            nl_layers: 1,
            ast_layers: 1,
            decoder_layers: 1,
            ffn_dim: 16,
            tree_conv_blocks: 1,
            max_path: 6,
            ..ModelConfig::default()
        };
        let dims = ModelDims {
            rules: grammar.num_rules(),
            symbols: grammar.num_symbols(),
            max_arity: grammar.max_arity(),
            words: words.len(),
            chars: chars.len(),
        };
        Model::new(&cfg, dims, Precision::F64, seed).unwrap()
    }

    fn input(tokens: &[&str]) -> (NlInput, Vocabulary, Vocabulary) {
        let words = Vocabulary::build(tokens.iter().copied());
        let chars = Vocabulary::build_chars(tokens.iter().copied());
        let nl = NlInput::new(tokens.iter().map(|s| s.to_string()).collect(), &words, &chars, 16).unwrap();
        (nl, words, chars)
    }

    #[test]
    fn single_derivation_grammar() {
        let grammar = Grammar::parse("S -> A B\nA -> a\nB -> b\n").unwrap();
        let (nl, words, chars) = input(&["x", "y"]);
        let model = tiny(&grammar, &words, &chars, 1);
        for beam in [1, 3, 5] {
            let cfg = InferenceConfig { beam_size: beam, ..InferenceConfig::default() };
            let out = generate(&model, &grammar, &words, &nl, &cfg).unwrap();
            assert_eq!(out.len(), 1);
            assert_eq!(out[0].tokens, vec!["a", "b"]);
            assert_eq!(out[0].log_prob, 0.0);
        }
    }

    #[test]
    fn copies_from_description() {
        let grammar = Grammar::parse("S -> f ( N )\nN -> one\n%copy N\n").unwrap();
        let (nl, words, chars) = input(&["call", "f", "with", "total"]);
        let model = tiny(&grammar, &words, &chars, 2);
        let cfg = InferenceConfig { beam_size: 5, ..InferenceConfig::default() };
        let out = generate(&model, &grammar, &words, &nl, &cfg).unwrap();
        let programs: Vec<String> = out.iter().map(|g| g.tokens.join(" ")).collect();
        assert!(programs.contains(&"f ( total )".to_string()), "{programs:?}");
        assert!(programs.contains(&"f ( one )".to_string()));
        // "f" is fixed syntax and never copyable.
        assert!(!programs.contains(&"f ( f )".to_string()));
        for g in &out {
            let replayed = derive(&grammar, &g.rules).unwrap();
            assert!(replayed.is_complete());
            let s = score_derivation(&model, &grammar, &words, &nl, &g.rules).unwrap();
            assert!((s - g.log_prob).abs() < 1e-9);
        }
        let total: f64 = out.iter().map(|g| g.log_prob.exp()).sum();
        // "with" and "call" are copyable too, so five programs share the mass.
        assert!((total - 1.0).abs() < 1e-9, "{total}");
    }

    #[test]
    fn max_steps_drops_long_hypotheses() {
        let grammar = Grammar::parse("S -> A B\nA -> a\nB -> b\n").unwrap();
        let (nl, words, chars) = input(&["x"]);
        let model = tiny(&grammar, &words, &chars, 3);
        let cfg = InferenceConfig { beam_size: 2, max_steps: 2, length_norm: false };
        assert!(generate(&model, &grammar, &words, &nl, &cfg).unwrap().is_empty());
        let cfg = InferenceConfig { beam_size: 2, max_steps: 4, length_norm: false };
        assert_eq!(generate(&model, &grammar, &words, &nl, &cfg).unwrap().len(), 1);
    }

    #[test]
    fn ties_prefer_lower_rule_id() {
        let grammar = Grammar::parse("S -> a\nS -> b\n").unwrap();
        let (nl, words, chars) = input(&["x"]);
        let mut model = tiny(&grammar, &words, &chars, 4);
        // Zero the rule projection so both rules get equal probability.
        for name in ["head.rules.weight", "head.rules.bias"] {
            let id = model.store.id(name).unwrap();
            let zero = Tensor::zeros(model.store.get(id).shape());
            model.store.set(id, zero).unwrap();
        }
        let out = greedy(&model, &grammar, &words, &nl, 10).unwrap().unwrap();
        assert_eq!(out.tokens, vec!["a"]);
        assert!((out.log_prob - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn wider_beam_never_scores_worse() {
        let grammar = Grammar::parse("S -> S S\nS -> a\nS -> b\n").unwrap();
        let (nl, words, chars) = input(&["p", "q"]);
        let model = tiny(&grammar, &words, &chars, 5);
        let mut prev = f64::NEG_INFINITY;
        for beam in 1..=4 {
            let cfg = InferenceConfig { beam_size: beam, max_steps: 12, length_norm: false };
            let best = generate(&model, &grammar, &words, &nl, &cfg).unwrap()[0].log_prob;
            assert!(best >= prev - 1e-12);
            prev = best;
        }
    }
}
