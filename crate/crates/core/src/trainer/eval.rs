use crate::autodiff::{log_softmax_rows, softmax_rows, ParameterStore};
use crate::error::{Error, Result};
use crate::metrics::{entropy, score_predictions, MetricScores, Prediction};
use crate::model::{forced_logits, generate, EncodedSample, ModelConfig, Vocabulary};
use crate::taskstream::Sample;

/// Greedy predictions for `samples`, scored against their answers.
pub fn evaluate_samples(
    store: &ParameterStore,
    vocab: &Vocabulary,
    samples: &[Sample],
    max_answer_len: usize,
    batch: usize,
) -> Result<(MetricScores, Vec<Prediction>)> {
    if samples.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty test set"));
    }
    let cfg = ModelConfig::from_store(store)?;
    if cfg.vocab_size != vocab.len() {
        return Err(Error::Incompatible(format!(
            "model has {} output classes, vocabulary {} tokens",
            cfg.vocab_size,
            vocab.len()
        )));
    }
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let encoded = chunk
            .iter()
            .map(|s| EncodedSample::encode(s, vocab))
            .collect::<Result<Vec<_>>>()?;
        let out = generate(store, &cfg, &encoded, max_answer_len)?;
        for (s, ids) in chunk.iter().zip(out) {
            preds.push(Prediction {
                id: s.id.clone(),
                candidate: vocab.decode(&ids),
                reference: s.answer.clone(),
            });
        }
    }
    Ok((score_predictions(&preds)?, preds))
}

/// Mean answer-token entropy and test loss under teacher forcing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub mean_entropy: f64,
    pub test_loss: f64,
}

pub fn diagnostics(
    store: &ParameterStore,
    vocab: &Vocabulary,
    samples: &[Sample],
    batch: usize,
) -> Result<Diagnostics> {
    if samples.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty test set"));
    }
    let cfg = ModelConfig::from_store(store)?;
    let (mut h_sum, mut nll_sum, mut count) = (0.0, 0.0, 0usize);
    for chunk in samples.chunks(batch.max(1)) {
        let encoded = chunk
            .iter()
            .map(|s| EncodedSample::encode(s, vocab))
            .collect::<Result<Vec<_>>>()?;
        let (logits, tf) = forced_logits(store, &cfg, &encoded)?;
        let probs = softmax_rows(&logits, 1.0);
        let logp = log_softmax_rows(&logits, 1.0);
        for (r, (&m, &t)) in tf.mask.iter().zip(&tf.targets).enumerate() {
            if !m {
                continue;
            }
            h_sum += entropy(probs.row(r));
            nll_sum -= logp.row(r)[t];
            count += 1;
        }
    }
    Ok(Diagnostics {
        mean_entropy: h_sum / count as f64,
        test_loss: nll_sum / count as f64,
    })
}
