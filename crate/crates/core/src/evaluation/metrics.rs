//! Overlap and diversity metrics over whitespace tokens.

use std::collections::{HashMap, HashSet};

use crate::error::{ClvError, Result};

fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn ngrams<'t, 'a>(toks: &'t [&'a str], n: usize) -> impl Iterator<Item = &'t [&'a str]> {
    toks.windows(n)
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(ClvError::InvalidArgument("n-gram order must be positive".into()));
    }
    Ok(())
}

/// Unique n-grams over total n-grams, pooled across `texts`.
pub fn distinct_n<S: AsRef<str>>(texts: &[S], n: usize) -> Result<f64> {
    check_n(n)?;
    let toks: Vec<Vec<&str>> = texts.iter().map(|t| tokens(t.as_ref())).collect();
    let mut unique: HashSet<&[&str]> = HashSet::new();
    let mut total = 0usize;
    for t in &toks {
        for g in ngrams(t, n) {
            unique.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        return Err(ClvError::InvalidArgument(format!("no {n}-grams in the given texts")));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// C-Dist: distinct-n over one response per example.
pub fn corpus_dist<S: AsRef<str>>(responses: &[S], n: usize) -> Result<f64> {
    distinct_n(responses, n)
}

pub const SAMPLES_PER_EXAMPLE: usize = 5;

/// S-Dist: distinct-n within each example's five samples, averaged over
/// examples. Examples whose samples hold no n-gram at all are left out of
/// the mean; if that leaves nothing, it is an error.
pub fn sentence_dist<S: AsRef<str>>(per_example: &[Vec<S>], n: usize) -> Result<f64> {
    check_n(n)?;
    if per_example.is_empty() {
        return Err(ClvError::InvalidArgument("no examples".into()));
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (i, samples) in per_example.iter().enumerate() {
        if samples.len() != SAMPLES_PER_EXAMPLE {
            return Err(ClvError::InvalidArgument(format!(
                "example {i}: S-Dist needs exactly {SAMPLES_PER_EXAMPLE} samples, got {}",
                samples.len()
            )));
        }
        if let Ok(v) = distinct_n(samples, n) {
            sum += v;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(ClvError::InvalidArgument(format!("no {n}-grams in any sample set")));
    }
    Ok(sum / counted as f64)
}

fn counts<'a>(toks: &[&'a str]) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for t in toks {
        *m.entry(*t).or_insert(0) += 1;
    }
    m
}

fn clipped_matches(hyp: &[&str], reference: &[&str]) -> usize {
    let r = counts(reference);
    counts(hyp)
        .into_iter()
        .map(|(tok, c)| c.min(r.get(tok).copied().unwrap_or(0)))
        .sum()
}

fn aligned<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<()> {
    if hyps.is_empty() {
        return Err(ClvError::InvalidArgument("empty hypothesis set".into()));
    }
    if hyps.len() != refs.len() {
        return Err(ClvError::dim("hypotheses vs references", refs.len(), hyps.len()));
    }
    Ok(())
}

/// Corpus-level BLEU-1: clipped unigram precision times the brevity penalty
/// `exp(min(0, 1 − ref_len / hyp_len))`.
pub fn bleu_1<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    aligned(hyps, refs)?;
    let (mut matched, mut hyp_len, mut ref_len) = (0usize, 0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (tokens(h.as_ref()), tokens(r.as_ref()));
        matched += clipped_matches(&h, &r);
        hyp_len += h.len();
        ref_len += r.len();
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let precision = matched as f64 / hyp_len as f64;
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(precision * bp)
}

/// Sentence-level BLEU-1 with add-one smoothing on the precision.
pub fn sentence_bleu_1_smoothed(hyp: &str, reference: &str) -> f64 {
    let (h, r) = (tokens(hyp), tokens(reference));
    if h.is_empty() {
        return 0.0;
    }
    let precision = (clipped_matches(&h, &r) as f64 + 1.0) / (h.len() as f64 + 1.0);
    let bp = (1.0 - r.len() as f64 / h.len() as f64).min(0.0).exp();
    precision * bp
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA_SQ: f64 = 1.44;

/// LCS F-measure with `β² = 1.44`.
pub fn rouge_l(hyp: &str, reference: &str) -> Result<f64> {
    let (h, r) = (tokens(hyp), tokens(reference));
    if h.is_empty() || r.is_empty() {
        return Err(ClvError::InvalidArgument("ROUGE-L of an empty sentence".into()));
    }
    let lcs = lcs_len(&h, &r) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / h.len() as f64;
    let rec = lcs / r.len() as f64;
    Ok((1.0 + ROUGE_BETA_SQ) * p * rec / (rec + ROUGE_BETA_SQ * p))
}

/// Mean ROUGE-L over aligned pairs. An empty hypothesis scores 0.
pub fn corpus_rouge_l<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    aligned(hyps, refs)?;
    let mut sum = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        if h.as_ref().split_whitespace().next().is_none() {
            continue;
        }
        sum += rouge_l(h.as_ref(), r.as_ref())?;
    }
    Ok(sum / hyps.len() as f64)
}
