use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::text::{bleu, cider, meteor_corpus, rouge_l_corpus, Sentence};
use crate::error::{Error, Result};

/// Reported metrics, in table column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Bleu1,
    Bleu2,
    Bleu3,
    Bleu4,
    Meteor,
    RougeL,
    Cider,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Bleu1,
        Metric::Bleu2,
        Metric::Bleu3,
        Metric::Bleu4,
        Metric::Meteor,
        Metric::RougeL,
        Metric::Cider,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Bleu1 => "BLEU-1",
            Metric::Bleu2 => "BLEU-2",
            Metric::Bleu3 => "BLEU-3",
            Metric::Bleu4 => "BLEU-4",
            Metric::Meteor => "METEOR",
            Metric::RougeL => "ROUGE_L",
            Metric::Cider => "CIDEr",
        }
    }

    /// Factor applied for display: ×100 for everything except CIDEr.
    pub fn display_scale(self) -> f64 {
        if self == Metric::Cider {
            1.0
        } else {
            100.0
        }
    }

    fn index(self) -> usize {
        Metric::ALL.iter().position(|&m| m == self).unwrap()
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown metric {s:?}")))
    }
}

/// One value per [`Metric`]; BLEU/METEOR/ROUGE in [0, 1], CIDEr in [0, 10].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricScores(pub [f64; 7]);

impl MetricScores {
    pub fn get(&self, m: Metric) -> f64 {
        self.0[m.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Metric, f64)> + '_ {
        Metric::ALL.into_iter().map(|m| (m, self.get(m)))
    }
}

/// All corpus-level metrics for aligned candidate/reference lists.
pub fn score_corpus(candidates: &[Sentence], references: &[Sentence]) -> Result<MetricScores> {
    let b = bleu(candidates, references, 4)?;
    Ok(MetricScores([
        b[0],
        b[1],
        b[2],
        b[3],
        meteor_corpus(candidates, references)?,
        rouge_l_corpus(candidates, references)?,
        cider(candidates, references)?,
    ]))
}

/// A prediction line `id<TAB>candidate<TAB>reference`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub id: String,
    pub candidate: Sentence,
    pub reference: Sentence,
}

fn words(s: &str) -> Sentence {
    s.split_whitespace().map(|w| w.to_lowercase()).collect()
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let body: String = preds
        .iter()
        .map(|p| format!("{}\t{}\t{}\n", p.id, p.candidate.join(" "), p.reference.join(" ")))
        .collect();
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::parse(path, i + 1, "expected id<TAB>candidate<TAB>reference"));
        }
        out.push(Prediction {
            id: f[0].to_string(),
            candidate: words(f[1]),
            reference: words(f[2]),
        });
    }
    Ok(out)
}

pub fn score_predictions(preds: &[Prediction]) -> Result<MetricScores> {
    let (c, r): (Vec<Sentence>, Vec<Sentence>) = preds
        .iter()
        .map(|p| (p.candidate.clone(), p.reference.clone()))
        .unzip();
    score_corpus(&c, &r)
}

/// `metric,value` CSV with raw (unscaled) values.
pub fn scores_csv(scores: &MetricScores) -> String {
    let mut out = String::from("metric,value\n");
    for (m, v) in scores.iter() {
        out.push_str(&format!("{m},{v}\n"));
    }
    out
}

/// `a[t][j]`: score on task `j` after training through task `t`.
///
/// Sequential runs score every task after every task, so only entries with
/// `t >= j` count towards forgetting. Joint runs have a single row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub metric: Metric,
    pub tasks: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(metric: Metric, tasks: Vec<String>) -> Self {
        Self {
            metric,
            tasks,
            rows: Vec::new(),
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(j)).copied()
    }

    pub fn final_row(&self) -> Result<&[f64]> {
        match self.rows.last() {
            Some(r) if r.len() == self.n_tasks() => Ok(r),
            _ => Err(Error::contract("score matrix has no complete final row")),
        }
    }

    pub fn average(&self) -> Result<f64> {
        let r = self.final_row()?;
        Ok(r.iter().sum::<f64>() / r.len() as f64)
    }

    /// Mean over `j < N` of `max_{j ≤ t < N} a[t][j] − a[N][j]`.
    pub fn forgetting(&self) -> Result<f64> {
        let n = self.n_tasks();
        if n < 2 {
            return Err(Error::contract("forgetting needs at least two tasks"));
        }
        if self.rows.len() != n || self.rows.iter().enumerate().any(|(t, r)| r.len() < t + 1) {
            return Err(Error::contract(
                "forgetting needs a score for every seen task after every task",
            ));
        }
        let last = self.final_row()?;
        let mut sum = 0.0;
        for j in 0..n - 1 {
            let best = (j..n - 1)
                .map(|t| self.rows[t][j])
                .fold(f64::NEG_INFINITY, f64::max);
            sum += best - last[j];
        }
        Ok(sum / (n - 1) as f64)
    }
}

/// Average and forgetting of a score matrix; forgetting is `None` when the
/// matrix only has a final row.
pub fn aggregates(matrix: &ScoreMatrix) -> Result<(f64, Option<f64>)> {
    let avg = matrix.average()?;
    let forget = if matrix.rows.len() == matrix.n_tasks() && matrix.n_tasks() >= 2 {
        Some(matrix.forgetting()?)
    } else {
        None
    };
    Ok((avg, forget))
}
