//! Context-conditioned bigram decoder over a merged scene+question embedding.
//!
//! The input embedding at position `j` is the modality table row of token `j`
//! plus positional row `j`. The decoder pools it into a context vector `ctx`
//! (masked mean) and computes, for answer position `t`,
//!
//! ```text
//! logits_t = W_o · tanh(W_h · [ctx ; text(prefix_t) + pos(t)] + b_h) + b_o
//! ```
//!
//! so position `t` depends only on `ctx` and the prefix token at `t`.

use rand::Rng as _;

use super::vocab::{Vocabulary, BOS, EOS, PAD};
use crate::autodiff::{masked_cross_entropy, Graph, NodeId, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::taskstream::Sample;

pub const SCENE_TABLE: &str = "emb.scene";
pub const TEXT_TABLE: &str = "emb.text";
pub const POS_TABLE: &str = "emb.pos";
pub const HIDDEN_W: &str = "dec.w_h";
pub const HIDDEN_B: &str = "dec.b_h";
pub const OUT_W: &str = "dec.w_o";
pub const OUT_B: &str = "dec.b_o";

pub const MODEL_PARAMS: [&str; 7] = [
    SCENE_TABLE,
    TEXT_TABLE,
    POS_TABLE,
    HIDDEN_W,
    HIDDEN_B,
    OUT_W,
    OUT_B,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_embed: usize,
    pub d_hidden: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_embed: 64,
            d_hidden: 128,
            max_len: 32,
        }
    }

    /// Recovers the dimensions from stored parameter shapes.
    pub fn from_store(store: &ParameterStore) -> Result<Self> {
        let text = store.get(TEXT_TABLE)?.shape().to_vec();
        let pos = store.get(POS_TABLE)?.shape().to_vec();
        let hidden = store.get(HIDDEN_W)?.shape().to_vec();
        if text.len() != 2 || pos.len() != 2 || hidden.len() != 2 {
            return Err(Error::Incompatible("model tensors must be matrices".into()));
        }
        Ok(Self {
            vocab_size: text[0],
            d_embed: text[1],
            d_hidden: hidden[1],
            max_len: pos[0],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.vocab_size
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Inserts freshly initialized model parameters into `store`.
pub fn init_params(cfg: &ModelConfig, store: &mut ParameterStore, rng: &mut Rng) {
    let (v, d, h) = (cfg.vocab_size, cfg.d_embed, cfg.d_hidden);
    store.insert(SCENE_TABLE, uniform(rng, &[v, d], 0.5));
    store.insert(TEXT_TABLE, uniform(rng, &[v, d], 0.5));
    store.insert(POS_TABLE, uniform(rng, &[cfg.max_len, d], 0.1));
    store.insert(HIDDEN_W, uniform(rng, &[2 * d, h], 1.0 / ((2 * d) as f64).sqrt()));
    store.insert(HIDDEN_B, Tensor::zeros(&[h]));
    store.insert(OUT_W, uniform(rng, &[h, v], 1.0 / (h as f64).sqrt()));
    store.insert(OUT_B, Tensor::zeros(&[v]));
}

/// Graph handles of the model parameters.
#[derive(Debug, Clone, Copy)]
pub struct ModelNodes {
    pub scene: NodeId,
    pub text: NodeId,
    pub pos: NodeId,
    pub w_h: NodeId,
    pub b_h: NodeId,
    pub w_o: NodeId,
    pub b_o: NodeId,
}

impl ModelNodes {
    /// `detached` binds every parameter as a constant (teacher, evaluation).
    pub fn bind(g: &mut Graph, store: &ParameterStore, detached: bool) -> Result<Self> {
        Ok(Self {
            scene: store.bind(g, SCENE_TABLE, detached)?,
            text: store.bind(g, TEXT_TABLE, detached)?,
            pos: store.bind(g, POS_TABLE, detached)?,
            w_h: store.bind(g, HIDDEN_W, detached)?,
            b_h: store.bind(g, HIDDEN_B, detached)?,
            w_o: store.bind(g, OUT_W, detached)?,
            b_o: store.bind(g, OUT_B, detached)?,
        })
    }

    pub fn named(&self) -> [(&'static str, NodeId); 7] {
        [
            (SCENE_TABLE, self.scene),
            (TEXT_TABLE, self.text),
            (POS_TABLE, self.pos),
            (HIDDEN_W, self.w_h),
            (HIDDEN_B, self.b_h),
            (OUT_W, self.w_o),
            (OUT_B, self.b_o),
        ]
    }
}

/// A sample mapped to vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub scene: Vec<usize>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

impl EncodedSample {
    pub fn encode(sample: &Sample, vocab: &Vocabulary) -> Result<Self> {
        Ok(Self {
            scene: vocab.encode(&sample.scene)?,
            question: vocab.encode(&sample.question)?,
            answer: vocab.encode(&sample.answer)?,
        })
    }

    pub fn input_len(&self) -> usize {
        self.scene.len() + self.question.len()
    }
}

/// Per-position input vectors of a batch, laid out `[N·L × d_e]` with
/// scene positions first, then question positions, then zero padding.
#[derive(Debug, Clone)]
pub struct MergedEmbedding {
    pub node: NodeId,
    pub batch: usize,
    pub len: usize,
    pub mask: Vec<bool>,
}

impl MergedEmbedding {
    pub fn valid_len(&self, sample: usize) -> usize {
        self.mask[sample * self.len..(sample + 1) * self.len]
            .iter()
            .filter(|m| **m)
            .count()
    }
}

pub fn embed(
    g: &mut Graph,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
    batch: &[EncodedSample],
) -> Result<MergedEmbedding> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    for s in batch {
        if s.input_len() > cfg.max_len {
            return Err(Error::contract(format!(
                "input of {} tokens exceeds the maximum length {} (no truncation)",
                s.input_len(),
                cfg.max_len
            )));
        }
        if s.input_len() == 0 {
            return Err(Error::contract("sample has neither scene nor question tokens"));
        }
    }
    let len = batch.iter().map(EncodedSample::input_len).max().unwrap_or(0);
    let rows = batch.len() * len;
    let mut scene_ids = vec![None; rows];
    let mut text_ids = vec![None; rows];
    let mut pos_ids = vec![None; rows];
    let mut mask = vec![false; rows];
    for (i, s) in batch.iter().enumerate() {
        for (j, &id) in s.scene.iter().enumerate() {
            scene_ids[i * len + j] = Some(id);
        }
        for (j, &id) in s.question.iter().enumerate() {
            text_ids[i * len + s.scene.len() + j] = Some(id);
        }
        for j in 0..s.input_len() {
            pos_ids[i * len + j] = Some(j);
            mask[i * len + j] = true;
        }
    }
    let scene = g.gather_masked(nodes.scene, &scene_ids)?;
    let text = g.gather_masked(nodes.text, &text_ids)?;
    let pos = g.gather_masked(nodes.pos, &pos_ids)?;
    let e = g.add(scene, text)?;
    let node = g.add(e, pos)?;
    Ok(MergedEmbedding {
        node,
        batch: batch.len(),
        len,
        mask,
    })
}

/// Masked mean of the merged embedding per sample: `[N × d_e]`.
pub fn context(g: &mut Graph, e: &MergedEmbedding) -> Result<NodeId> {
    let cols = e.batch * e.len;
    let mut pool = vec![0.0; e.batch * cols];
    for i in 0..e.batch {
        let w = 1.0 / e.valid_len(i) as f64;
        for j in 0..e.len {
            if e.mask[i * e.len + j] {
                pool[i * cols + i * e.len + j] = w;
            }
        }
    }
    let pool = g.constant(Tensor::new(vec![e.batch, cols], pool)?);
    g.matmul(pool, e.node)
}

/// One decoder query: sample index, prefix token, answer position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeRow {
    pub sample: usize,
    pub token: usize,
    pub pos: usize,
}

/// Logits `[R × K]` for a list of decoder queries against per-sample contexts.
pub fn decode_rows(
    g: &mut Graph,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
    ctx: NodeId,
    rows: &[DecodeRow],
) -> Result<NodeId> {
    let n = g.value(ctx).shape()[0];
    let mut expand = vec![0.0; rows.len() * n];
    for (r, row) in rows.iter().enumerate() {
        if row.sample >= n {
            return Err(Error::Index {
                op: "decode_rows",
                index: row.sample,
                bound: n,
            });
        }
        if row.pos >= cfg.max_len {
            return Err(Error::contract(format!(
                "answer position {} exceeds the maximum length {}",
                row.pos, cfg.max_len
            )));
        }
        expand[r * n + row.sample] = 1.0;
    }
    let expand = g.constant(Tensor::new(vec![rows.len(), n], expand)?);
    let ctx_rows = g.matmul(expand, ctx)?;
    let tokens: Vec<usize> = rows.iter().map(|r| r.token).collect();
    let positions: Vec<usize> = rows.iter().map(|r| r.pos).collect();
    let tok = g.gather(nodes.text, &tokens)?;
    let pos = g.gather(nodes.pos, &positions)?;
    let tok = g.add(tok, pos)?;
    let input = g.concat_cols(ctx_rows, tok)?;
    let pre = g.matmul(input, nodes.w_h)?;
    let pre = g.add_bias(pre, nodes.b_h)?;
    let hidden = g.tanh(pre)?;
    let out = g.matmul(hidden, nodes.w_o)?;
    g.add_bias(out, nodes.b_o)
}

/// Logits `[N × L × K]` for every position of every prefix (padded to the
/// longest prefix with PAD).
pub fn decode_logits(
    g: &mut Graph,
    nodes: &ModelNodes,
    cfg: &ModelConfig,
    e: &MergedEmbedding,
    prefixes: &[Vec<usize>],
) -> Result<NodeId> {
    if prefixes.len() != e.batch {
        return Err(Error::contract("one prefix per sample required"));
    }
    for p in prefixes {
        match p.first() {
            None => return Err(Error::contract("empty answer prefix")),
            Some(&t) if t != BOS => return Err(Error::contract("answer prefix must start with BOS")),
            _ => {}
        }
    }
    let len = prefixes.iter().map(Vec::len).max().unwrap_or(0);
    let rows: Vec<DecodeRow> = prefixes
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            (0..len).map(move |t| DecodeRow {
                sample: i,
                token: p.get(t).copied().unwrap_or(PAD),
                pos: t,
            })
        })
        .collect();
    let ctx = context(g, e)?;
    let flat = decode_rows(g, nodes, cfg, ctx, &rows)?;
    g.reshape(flat, vec![prefixes.len(), len, cfg.num_classes()])
}

/// Teacher-forcing layout of a batch: prefixes `[BOS, a…]`, targets `[a…, EOS]`
/// padded to a common length, with the padding mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeacherForcing {
    pub prefixes: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub len: usize,
}

impl TeacherForcing {
    pub fn new(batch: &[EncodedSample]) -> Self {
        let len = batch.iter().map(|s| s.answer.len() + 1).max().unwrap_or(1);
        let mut prefixes = Vec::with_capacity(batch.len());
        let mut targets = vec![PAD; batch.len() * len];
        let mut mask = vec![false; batch.len() * len];
        for (i, s) in batch.iter().enumerate() {
            let mut p = vec![BOS];
            p.extend_from_slice(&s.answer);
            prefixes.push(p);
            for (t, &tok) in s.answer.iter().chain(std::iter::once(&EOS)).enumerate() {
                targets[i * len + t] = tok;
                mask[i * len + t] = true;
            }
        }
        Self {
            prefixes,
            targets,
            mask,
            len,
        }
    }
}

/// Ground-truth loss: masked cross-entropy over answer tokens.
pub fn loss_gt(g: &mut Graph, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
    masked_cross_entropy(g, logits, targets, mask)
}

/// Teacher-forced forward pass returning `(graph, logits, layout)` for a
/// batch, with the parameters bound as constants.
pub fn forced_logits(store: &ParameterStore, cfg: &ModelConfig, batch: &[EncodedSample]) -> Result<(Tensor, TeacherForcing)> {
    let mut g = Graph::new();
    let nodes = ModelNodes::bind(&mut g, store, true)?;
    let tf = TeacherForcing::new(batch);
    let e = embed(&mut g, &nodes, cfg, batch)?;
    let logits = decode_logits(&mut g, &nodes, cfg, &e, &tf.prefixes)?;
    Ok((g.value(logits).clone(), tf))
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from BOS until EOS or `max_len` generated tokens.
/// EOS is not included in the returned ids.
pub fn generate(
    store: &ParameterStore,
    cfg: &ModelConfig,
    batch: &[EncodedSample],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let mut g = Graph::new();
    let nodes = ModelNodes::bind(&mut g, store, true)?;
    let e = embed(&mut g, &nodes, cfg, batch)?;
    let ctx = context(&mut g, &e)?;
    let mut outputs: Vec<Vec<usize>> = vec![Vec::new(); batch.len()];
    let mut last = vec![BOS; batch.len()];
    let mut active: Vec<usize> = (0..batch.len()).collect();
    for step in 0..max_len.min(cfg.max_len) {
        if active.is_empty() {
            break;
        }
        let rows: Vec<DecodeRow> = active
            .iter()
            .map(|&i| DecodeRow {
                sample: i,
                token: last[i],
                pos: step,
            })
            .collect();
        let logits = decode_rows(&mut g, &nodes, cfg, ctx, &rows)?;
        let value = g.value(logits).clone();
        let mut still = Vec::with_capacity(active.len());
        for (r, &i) in active.iter().enumerate() {
            let tok = argmax_lowest(value.row(r));
            if tok == EOS {
                continue;
            }
            outputs[i].push(tok);
            last[i] = tok;
            still.push(i);
        }
        active = still;
    }
    Ok(outputs)
}
