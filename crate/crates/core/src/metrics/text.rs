//! Caption-style text similarity metrics over whitespace tokens.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub type Sentence = Vec<String>;

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_corpus(candidates: &[Sentence], references: &[Sentence]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::contract("cannot score an empty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

/// Corpus BLEU-1 … BLEU-`max_n` (clipped n-gram precision, uniform
/// geometric mean, brevity penalty).
pub fn bleu(candidates: &[Sentence], references: &[Sentence], max_n: usize) -> Result<Vec<f64>> {
    check_corpus(candidates, references)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    for (c, r) in candidates.iter().zip(references) {
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let c_len: usize = candidates.iter().map(Vec::len).sum();
    let r_len: usize = references.iter().map(Vec::len).sum();
    let bp = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let mut scores = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 1..=max_n {
        if matched[n - 1] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n - 1] as f64 / total[n - 1] as f64).ln();
        }
        scores.push(if zero { 0.0 } else { bp * (log_sum / n as f64).exp() });
    }
    Ok(scores)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// Sentence ROUGE-L F-score with β = 1.2.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l_corpus(candidates: &[Sentence], references: &[Sentence]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let sum: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l(c, r)).sum();
    Ok(sum / candidates.len() as f64)
}

/// Chunk count of an alignment given as (candidate, reference) position
/// pairs sorted by candidate position.
pub fn chunks(alignment: &[(usize, usize)]) -> usize {
    if alignment.is_empty() {
        return 0;
    }
    1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

struct AlignSearch<'a> {
    cand: &'a [String],
    refr: &'a [String],
    used: Vec<bool>,
    path: Vec<(usize, usize)>,
    target: usize,
    best: usize,
    /// Matchable candidate tokens from position i onwards (upper bound).
    reachable: Vec<usize>,
}

impl AlignSearch<'_> {
    fn run(&mut self, i: usize) {
        let m = self.path.len();
        let so_far = chunks(&self.path);
        if so_far >= self.best {
            return;
        }
        if m == self.target {
            self.best = so_far;
            return;
        }
        if i == self.cand.len() || m + self.reachable[i] < self.target {
            return;
        }
        // Try continuing the current chunk first, then the other matches,
        // then leaving the token unmatched.
        let mut options: Vec<usize> = (0..self.refr.len())
            .filter(|&j| !self.used[j] && self.refr[j] == self.cand[i])
            .collect();
        if let Some(&(pi, pj)) = self.path.last() {
            if pi + 1 == i {
                options.sort_by_key(|&j| j != pj + 1);
            }
        }
        for j in options {
            self.used[j] = true;
            self.path.push((i, j));
            self.run(i + 1);
            self.path.pop();
            self.used[j] = false;
        }
        self.run(i + 1);
    }
}

/// Maximum number of exact unigram matches and the fewest chunks among
/// alignments achieving it.
pub fn align_exact(candidate: &[String], reference: &[String]) -> (usize, usize) {
    let mut ref_counts: BTreeMap<&String, usize> = BTreeMap::new();
    for t in reference {
        *ref_counts.entry(t).or_insert(0) += 1;
    }
    let mut cand_counts: BTreeMap<&String, usize> = BTreeMap::new();
    for t in candidate {
        *cand_counts.entry(t).or_insert(0) += 1;
    }
    let target: usize = cand_counts
        .iter()
        .map(|(t, &c)| c.min(ref_counts.get(t).copied().unwrap_or(0)))
        .sum();
    if target == 0 {
        return (0, 0);
    }
    let mut reachable = vec![0; candidate.len() + 1];
    for i in (0..candidate.len()).rev() {
        reachable[i] = reachable[i + 1] + usize::from(ref_counts.contains_key(&candidate[i]));
    }
    let mut s = AlignSearch {
        cand: candidate,
        refr: reference,
        used: vec![false; reference.len()],
        path: Vec::with_capacity(target),
        target,
        best: usize::MAX,
        reachable,
    };
    s.run(0);
    (target, s.best)
}

/// Exact-match METEOR: F_mean = 10PR/(R + 9P), fragmentation penalty
/// 0.5·(chunks/m)³.
pub fn meteor_exact(candidate: &[String], reference: &[String]) -> f64 {
    let (m, ch) = align_exact(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (ch as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

pub fn meteor_corpus(candidates: &[Sentence], references: &[Sentence]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| meteor_exact(c, r))
        .sum();
    Ok(sum / candidates.len() as f64)
}

fn cosine(a: &BTreeMap<&[String], f64>, b: &BTreeMap<&[String], f64>) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().map(|(g, v)| v * b.get(g).copied().unwrap_or(0.0)).sum();
    dot / (na * nb)
}

fn tfidf_vector<'a>(
    counts: BTreeMap<&'a [String], usize>,
    df: &BTreeMap<&[String], usize>,
    n_docs: f64,
) -> BTreeMap<&'a [String], f64> {
    counts
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0) as f64;
            (g, c as f64 * (n_docs / (1.0 + d)).ln())
        })
        .collect()
}

/// CIDEr with n = 1…4: TF-IDF n-gram vectors, idf = ln(N / (1 + df)) with
/// document frequencies over the references, 10 × mean cosine per order,
/// averaged over orders.
pub fn cider(candidates: &[Sentence], references: &[Sentence]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let n_docs = references.len() as f64;
    let mut total = 0.0;
    for n in 1..=4 {
        let ref_counts: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for rc in &ref_counts {
            for g in rc.keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let mut sum = 0.0;
        for (c, rc) in candidates.iter().zip(ref_counts.iter()) {
            let cv = tfidf_vector(ngram_counts(c, n), &df, n_docs);
            let rv = tfidf_vector(rc.clone(), &df, n_docs);
            sum += cosine(&cv, &rv);
        }
        total += 10.0 * sum / candidates.len() as f64;
    }
    Ok(total / 4.0)
}

/// Natural-log entropy with 0·ln 0 = 0.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<f64>()
}
