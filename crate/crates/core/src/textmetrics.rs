//! Answer-quality metrics: token F1, BLEU-4 and ROUGE-L.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercases, strips punctuation and splits on whitespace.
pub fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// [`tokens`] with the articles `a`, `an` and `the` removed.
pub fn normalize(text: &str) -> Vec<String> {
    tokens(text)
        .into_iter()
        .filter(|w| !ARTICLES.contains(&w.as_str()))
        .collect()
}

fn counts<T: std::hash::Hash + Eq + Clone>(items: &[T]) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for x in items {
        *m.entry(x.clone()).or_insert(0) += 1;
    }
    m
}

fn overlap<T: std::hash::Hash + Eq + Clone>(pred: &[T], gold: &[T]) -> usize {
    let gold = counts(gold);
    counts(pred)
        .into_iter()
        .map(|(k, c)| c.min(gold.get(&k).copied().unwrap_or(0)))
        .sum()
}

fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Bag-of-words F1 over normalized tokens.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let (p, g) = (normalize(pred), normalize(gold));
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let common = overlap(&p, &g) as f64;
    f_measure(common / p.len() as f64, common / g.len() as f64)
}

/// Sentence-level BLEU-4 with uniform weights and brevity penalty.
///
/// A zero n-gram precision for `n ≥ 2` is replaced by `1 / (total + 1)`.
pub fn bleu(pred: &str, gold: &str) -> f64 {
    let (p, g) = (tokens(pred), tokens(gold));
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let pn: Vec<&[String]> = p.windows(n).collect();
        let gn: Vec<&[String]> = g.windows(n).collect();
        let matches = overlap(&pn, &gn);
        let total = pn.len();
        let precision = if matches > 0 {
            matches as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += precision.ln() / 4.0;
    }
    let (c, r) = (p.len() as f64, g.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS-based F-measure (β = 1).
pub fn rouge_l(pred: &str, gold: &str) -> f64 {
    let (p, g) = (tokens(pred), tokens(gold));
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let l = lcs_len(&p, &g) as f64;
    f_measure(l / p.len() as f64, l / g.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredAnswer {
    pub f1: f64,
    pub bleu: f64,
    pub rouge_l: f64,
}

impl ScoredAnswer {
    /// Each metric multiplied by 100.
    pub fn percent(&self) -> Self {
        Self {
            f1: self.f1 * 100.0,
            bleu: self.bleu * 100.0,
            rouge_l: self.rouge_l * 100.0,
        }
    }
}

pub fn score_answer(pred: &str, gold: &str) -> ScoredAnswer {
    ScoredAnswer {
        f1: token_f1(pred, gold),
        bleu: bleu(pred, gold),
        rouge_l: rouge_l(pred, gold),
    }
}

/// Mean over every answer and mean of the per-example maxima.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub average: ScoredAnswer,
    pub best_per_example: ScoredAnswer,
    pub examples: usize,
    pub answers: usize,
}

/// `groups[i]` holds the scores of every answer generated for example `i`.
pub fn summarize(groups: &[Vec<ScoredAnswer>]) -> ScoreSummary {
    let mut sum = ScoredAnswer::default();
    let mut best_sum = ScoredAnswer::default();
    let mut answers = 0;
    let mut examples = 0;
    for g in groups.iter().filter(|g| !g.is_empty()) {
        examples += 1;
        let mut best = g[0];
        for s in g {
            sum.f1 += s.f1;
            sum.bleu += s.bleu;
            sum.rouge_l += s.rouge_l;
            best.f1 = best.f1.max(s.f1);
            best.bleu = best.bleu.max(s.bleu);
            best.rouge_l = best.rouge_l.max(s.rouge_l);
            answers += 1;
        }
        best_sum.f1 += best.f1;
        best_sum.bleu += best.bleu;
        best_sum.rouge_l += best.rouge_l;
    }
    let mean = |s: ScoredAnswer, n: usize| {
        if n == 0 {
            ScoredAnswer::default()
        } else {
            let n = n as f64;
            ScoredAnswer {
                f1: s.f1 / n,
                bleu: s.bleu / n,
                rouge_l: s.rouge_l / n,
            }
        }
    };
    ScoreSummary {
        average: mean(sum, answers),
        best_per_example: mean(best_sum, examples),
        examples,
        answers,
    }
}
