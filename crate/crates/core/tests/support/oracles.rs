//! Slow, independent reimplementations of the text metrics.

use clvqa::metrics::Sentence;
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;

/// All n-grams of a sentence, one entry per occurrence.
pub fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= t.len() {
        out.push(t[i..i + n].to_vec());
        i += 1;
    }
    out
}

pub fn occurrences(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub fn bleu_oracle(cands: &[Sentence], refs: &[Sentence], max_n: usize) -> Vec<f64> {
    let mut precisions = Vec::new();
    for n in 1..=max_n {
        let (mut clipped, mut total) = (0usize, 0usize);
        for (c, r) in cands.iter().zip(refs) {
            let cg = grams(c, n);
            let rg = grams(r, n);
            let mut seen: Vec<Vec<String>> = Vec::new();
            for g in &cg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g.clone());
                clipped += occurrences(&cg, g).min(occurrences(&rg, g));
            }
            total += cg.len();
        }
        precisions.push((clipped, total));
    }
    let c: usize = cands.iter().map(|x| x.len()).sum();
    let r: usize = refs.iter().map(|x| x.len()).sum();
    let bp = if c == 0 { 0.0 } else if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    (1..=max_n)
        .map(|n| {
            let ps = &precisions[..n];
            if ps.iter().any(|&(m, _)| m == 0) {
                return 0.0;
            }
            let prod: f64 = ps.iter().map(|&(m, t)| m as f64 / t as f64).product();
            bp * prod.powf(1.0 / n as f64)
        })
        .collect()
}

pub fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|x| it.any(|y| y == *x))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn lcs_oracle(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for bits in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| bits & (1 << i) != 0).map(|i| &a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_oracle(c: &[String], r: &[String]) -> f64 {
    let l = lcs_oracle(c, r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    let b2 = 1.2f64 * 1.2;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Every one-to-one exact alignment, as lists of (candidate, reference) positions.
pub fn all_alignments(c: &[String], r: &[String]) -> Vec<Vec<(usize, usize)>> {
    fn go(i: usize, c: &[String], r: &[String], used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if i == c.len() {
            out.push(cur.clone());
            return;
        }
        go(i + 1, c, r, used, cur, out);
        for j in 0..r.len() {
            if !used[j] && r[j] == c[i] {
                used[j] = true;
                cur.push((i, j));
                go(i + 1, c, r, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(0, c, r, &mut vec![false; r.len()], &mut Vec::new(), &mut out);
    out
}

pub fn chunk_count(a: &[(usize, usize)]) -> usize {
    let mut n = 0;
    for (k, &(i, j)) in a.iter().enumerate() {
        let continues = k > 0 && a[k - 1] == (i.wrapping_sub(1), j.wrapping_sub(1));
        if !continues {
            n += 1;
        }
    }
    n
}

pub fn meteor_oracle(c: &[String], r: &[String]) -> (usize, usize, f64) {
    let (m, ch) = all_alignments(c, r)
        .iter()
        .map(|a| (a.len(), chunk_count(a)))
        .min_by_key(|&(m, ch)| (std::cmp::Reverse(m), ch))
        .unwrap();
    if m == 0 {
        return (0, 0, 0.0);
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let f = 10.0 * p * rec / (rec + 9.0 * p);
    (m, ch, f * (1.0 - 0.5 * (ch as f64 / m as f64).powi(3)))
}

/// Dense document-by-term tables, one per order, as a spreadsheet would hold them.
pub fn cider_oracle(cands: &[Sentence], refs: &[Sentence]) -> f64 {
    let docs = refs.len() as f64;
    let mut per_order = Vec::new();
    for n in 1..=4 {
        let mut columns: Vec<Vec<String>> = Vec::new();
        for sent in cands.iter().chain(refs) {
            for g in grams(sent, n) {
                if !columns.contains(&g) {
                    columns.push(g);
                }
            }
        }
        let tf = |sent: &Sentence| -> Vec<f64> {
            let gs = grams(sent, n);
            columns.iter().map(|col| occurrences(&gs, col) as f64).collect()
        };
        let ref_tf: Vec<Vec<f64>> = refs.iter().map(tf).collect();
        let idf: Vec<f64> = (0..columns.len())
            .map(|k| {
                let df = ref_tf.iter().filter(|row| row[k] > 0.0).count() as f64;
                (docs / (1.0 + df)).ln()
            })
            .collect();
        let mut cos_sum = 0.0;
        for (c, rt) in cands.iter().zip(&ref_tf) {
            let ct = tf(c);
            let cv: Vec<f64> = ct.iter().zip(&idf).map(|(a, b)| a * b).collect();
            let rv: Vec<f64> = rt.iter().zip(&idf).map(|(a, b)| a * b).collect();
            let dot: f64 = cv.iter().zip(&rv).map(|(a, b)| a * b).sum();
            let na = cv.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = rv.iter().map(|x| x * x).sum::<f64>().sqrt();
            cos_sum += if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
        }
        per_order.push(10.0 * cos_sum / cands.len() as f64);
    }
    per_order.iter().sum::<f64>() / 4.0
}

pub const ALPHABET: [&str; 5] = ["a", "b", "c", "d", "e"];

/// A random corpus of up to six pairs over a five-word alphabet. Candidates
/// may be empty; references have at least one token. Both are at most eight
/// tokens long.
pub fn random_corpus(r: &mut ChaCha8Rng) -> (Vec<Sentence>, Vec<Sentence>) {
    let n = r.gen_range(1..=6);
    let mut sent = |min: usize| -> Sentence {
        let len = r.gen_range(min..=8);
        (0..len).map(|_| ALPHABET[r.gen_range(0..ALPHABET.len())].to_string()).collect()
    };
    let cands = (0..n).map(|_| sent(0)).collect();
    let refs = (0..n).map(|_| sent(1)).collect();
    (cands, refs)
}
