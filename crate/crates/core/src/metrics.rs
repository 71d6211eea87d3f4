//! Exact-match accuracy and corpus BLEU.

use std::collections::HashMap;
use std::fmt::Write;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("{predictions} predictions for {references} references")]
    Length { predictions: usize, references: usize },
    #[error("no examples")]
    Empty,
    #[error("reference {0} is empty")]
    EmptyReference(usize),
}

pub const BLEU_DESCRIPTION: &str = "corpus BLEU-4, brevity penalty, add-1 smoothing on orders 2-4";

fn check(predictions: usize, references: usize) -> Result<(), MetricsError> {
    if predictions != references {
        return Err(MetricsError::Length { predictions, references });
    }
    if predictions == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Percentage of predictions token-identical to their reference.
pub fn str_acc<S: AsRef<str>>(predictions: &[Vec<S>], references: &[Vec<S>]) -> Result<f64, MetricsError> {
    check(predictions.len(), references.len())?;
    let hits = predictions.iter().zip(references).filter(|(p, r)| same(p, r)).count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

fn same<S: AsRef<str>>(a: &[S], b: &[S]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.as_ref() == y.as_ref())
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(|s| s.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus-level BLEU-4 on a 0–100 scale.
pub fn bleu<S: AsRef<str>>(predictions: &[Vec<S>], references: &[Vec<S>]) -> Result<f64, MetricsError> {
    check(predictions.len(), references.len())?;
    if let Some(i) = references.iter().position(|r| r.is_empty()) {
        return Err(MetricsError::EmptyReference(i));
    }
    let mut correct = [0.0f64; 4];
    let mut total = [0.0f64; 4];
    let (mut sys_len, mut ref_len) = (0usize, 0usize);
    for (p, r) in predictions.iter().zip(references) {
        sys_len += p.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hyp = ngrams(p, n);
            let refs = ngrams(r, n);
            total[n - 1] += hyp.values().sum::<usize>() as f64;
            correct[n - 1] += hyp.iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum::<usize>() as f64;
        }
    }
    if sys_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let (c, t) = if n > 0 { (correct[n] + 1.0, total[n] + 1.0) } else { (correct[n], total[n]) };
        if c == 0.0 {
            return Ok(0.0);
        }
        log_sum += (c / t).ln();
    }
    let bp = if sys_len < ref_len { (1.0 - ref_len as f64 / sys_len as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub id: String,
    pub exact: bool,
    pub prediction: Vec<String>,
    pub reference: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub str_acc: f64,
    pub bleu: f64,
    pub verdicts: Vec<Verdict>,
}

impl EvalReport {
    /// `items` holds (id, prediction, reference).
    pub fn new(items: Vec<(String, Vec<String>, Vec<String>)>) -> Result<Self, MetricsError> {
        let preds: Vec<Vec<String>> = items.iter().map(|i| i.1.clone()).collect();
        let refs: Vec<Vec<String>> = items.iter().map(|i| i.2.clone()).collect();
        let str_acc = str_acc(&preds, &refs)?;
        let bleu = bleu(&preds, &refs)?;
        let verdicts = items
            .into_iter()
            .map(|(id, prediction, reference)| Verdict { exact: prediction == reference, id, prediction, reference })
            .collect();
        Ok(EvalReport { str_acc, bleu, verdicts })
    }

    pub fn exact_count(&self) -> usize {
        self.verdicts.iter().filter(|v| v.exact).count()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# bleu: {BLEU_DESCRIPTION}");
        let _ = writeln!(out, "examples\t{}", self.verdicts.len());
        let _ = writeln!(out, "exact\t{}", self.exact_count());
        let _ = writeln!(out, "str_acc\t{:.4}", self.str_acc);
        let _ = writeln!(out, "bleu\t{:.4}", self.bleu);
        for v in &self.verdicts {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                v.id,
                if v.exact { "exact" } else { "diff" },
                v.prediction.join(" "),
                v.reference.join(" ")
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn str_acc_cases() {
        let a = vec![toks("a b"), toks("c"), toks("d e f")];
        assert_eq!(str_acc(&a, &a).unwrap(), 100.0);
        let b = vec![toks("x"), toks("y"), toks("z")];
        assert_eq!(str_acc(&a, &b).unwrap(), 0.0);
        let c = vec![toks("a b"), toks("y"), toks("z")];
        assert_eq!(str_acc(&a, &c).unwrap(), 100.0 / 3.0);
        assert!(matches!(str_acc(&a, &b[..2]), Err(MetricsError::Length { .. })));
    }

    #[test]
    fn bleu_identical_and_disjoint() {
        let a = vec![toks("def f ( x ) : return x"), toks("y = 1")];
        assert!((bleu(&a, &a).unwrap() - 100.0).abs() < 1e-9);
        let b = vec![toks("p q r s t u v w"), toks("k l m")];
        assert!(bleu(&b, &a).unwrap() < 1.0);
        assert_eq!(bleu(&[Vec::<String>::new()], &[toks("a b")]).unwrap(), 0.0);
    }

    #[test]
    fn bleu_matches_reference_scorer() {
        let hyps = vec![toks("def add ( a , b ) : return a + b"), toks("x = foo ( y )")];
        let refs = vec![toks("def add ( x , y ) : return x + y"), toks("x = foo ( y , z )")];
        let score = bleu(&hyps, &refs).unwrap();
        assert!((score - 39.51088983592967).abs() < 1e-9, "{score}");
    }

    #[test]
    fn report_counts_agree() {
        let items = vec![
            ("1".to_string(), toks("a b"), toks("a b")),
            ("2".to_string(), toks("a"), toks("b")),
        ];
        let r = EvalReport::new(items).unwrap();
        assert_eq!(r.exact_count(), 1);
        assert_eq!(r.str_acc, 50.0);
        assert!(r.to_text().contains("str_acc\t50.0000"));
    }
}
