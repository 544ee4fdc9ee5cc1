//! Per-task linear projections of the merged embedding and the drift
//! penalty between them.
//!
//! Task `n` owns `proj.W.<n>` (`d_e × d_proj`). Projections are a side
//! branch: they feed only the regularizer, never the decoder.

use rand::Rng as _;

use crate::autodiff::{Graph, NodeId, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::model::MergedEmbedding;
use crate::seed::Rng;

pub fn projection_name(task: usize) -> String {
    format!("proj.W.{task}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionBank {
    pub d_embed: usize,
    pub d_proj: usize,
    /// Index of the newest (trainable) projection; 0 when empty.
    pub current: usize,
}

impl ProjectionBank {
    pub fn new(d_embed: usize, d_proj: usize) -> Self {
        Self {
            d_embed,
            d_proj,
            current: 0,
        }
    }

    /// Freezes every existing projection and adds a fresh one for the next
    /// task, drawn from uniform(−1/√d_e, 1/√d_e).
    pub fn add_task_projection(&mut self, store: &mut ParameterStore, rng: &mut Rng) -> usize {
        for m in 1..=self.current {
            store.freeze(&projection_name(m));
        }
        self.current += 1;
        let bound = 1.0 / (self.d_embed as f64).sqrt();
        let data = (0..self.d_embed * self.d_proj)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let w = Tensor::new(vec![self.d_embed, self.d_proj], data).expect("sized above");
        store.insert(projection_name(self.current), w);
        self.current
    }

    /// Rebuilds the bank description from the `proj.W.*` entries of a store.
    pub fn from_store(store: &ParameterStore) -> Result<Option<Self>> {
        let mut n = 0;
        while store.contains(&projection_name(n + 1)) {
            n += 1;
        }
        if n == 0 {
            return Ok(None);
        }
        let shape = store.get(&projection_name(1))?.shape().to_vec();
        Ok(Some(Self {
            d_embed: shape[0],
            d_proj: shape[1],
            current: n,
        }))
    }

    pub fn frozen_names(&self) -> Vec<String> {
        (1..self.current).map(projection_name).collect()
    }
}

/// `F_m = e · W_m` for every position of the batch.
pub fn project(g: &mut Graph, w: NodeId, e: NodeId) -> Result<NodeId> {
    let (ws, es) = (g.value(w).shape().to_vec(), g.value(e).shape().to_vec());
    if ws.len() != 2 || es.len() != 2 || ws[0] != es[1] {
        return Err(Error::contract(format!(
            "projection of shape {ws:?} does not apply to embeddings {es:?}"
        )));
    }
    g.matmul(e, w)
}

/// Mean squared difference over valid positions and projection dimensions.
pub fn pro_loss_pair(g: &mut Graph, f_n: NodeId, f_m: NodeId, mask: &[bool]) -> Result<NodeId> {
    let shape = g.value(f_n).shape().to_vec();
    let (rows, d) = (shape[0], shape[shape.len() - 1]);
    if mask.len() != rows {
        return Err(Error::Shape {
            op: "pro_loss_pair",
            lhs: shape,
            rhs: vec![mask.len()],
        });
    }
    let valid = mask.iter().filter(|m| **m).count();
    if valid == 0 {
        return Err(Error::DegenerateBatch("no valid positions to regularize".into()));
    }
    let w = 1.0 / (valid * d) as f64;
    let weights = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { w } else { 0.0 }, d))
        .collect();
    let diff = g.sub(f_n, f_m)?;
    let sq = g.square(diff)?;
    g.weighted_sum(sq, weights)
}

/// The regularizer node and the projection leaves it was built from.
#[derive(Debug, Clone)]
pub struct ProLoss {
    pub loss: NodeId,
    /// `W_n`, bound as trainable.
    pub current: Option<NodeId>,
    /// `W_1 … W_{n−1}`, bound as constants.
    pub frozen: Vec<NodeId>,
}

/// Σ_{m<n} pair(F_n, F_m) for the bank's current task `n`. Only `W_n` is
/// bound as trainable; earlier projections enter as constants while `e`
/// keeps its gradient. Zero when there is no earlier task.
pub fn pro_loss_total(
    g: &mut Graph,
    store: &ParameterStore,
    bank: &ProjectionBank,
    e: &MergedEmbedding,
) -> Result<ProLoss> {
    let n = bank.current;
    if n <= 1 {
        return Ok(ProLoss {
            loss: g.constant(Tensor::scalar(0.0)),
            current: None,
            frozen: Vec::new(),
        });
    }
    let w_n = store.bind(g, &projection_name(n), false)?;
    let f_n = project(g, w_n, e.node)?;
    let mut total = None;
    let mut frozen = Vec::with_capacity(n - 1);
    for m in 1..n {
        let w_m = store.bind(g, &projection_name(m), true)?;
        frozen.push(w_m);
        let f_m = project(g, w_m, e.node)?;
        let pair = pro_loss_pair(g, f_n, f_m, &e.mask)?;
        total = Some(match total {
            None => pair,
            Some(t) => g.add(t, pair)?,
        });
    }
    Ok(ProLoss {
        loss: total.expect("n >= 2"),
        current: Some(w_n),
        frozen,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchKind {
    Current,
    Replay,
}

/// Loss terms available for one batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub gt: Option<NodeId>,
    pub pro: Option<NodeId>,
    pub replay: Option<NodeId>,
}

/// Current batches: `L_GT + λ·L_pro` (the regularizer may be absent).
/// Replay batches: `replay_weight · L_replay`.
pub fn total_loss(
    g: &mut Graph,
    kind: BatchKind,
    parts: LossParts,
    lambda: f64,
    replay_weight: f64,
) -> Result<NodeId> {
    match kind {
        BatchKind::Current => {
            let gt = parts
                .gt
                .ok_or_else(|| Error::contract("current batch without a ground-truth loss"))?;
            if parts.replay.is_some() {
                return Err(Error::contract("current batch given a replay loss"));
            }
            match parts.pro {
                Some(pro) => {
                    let scaled = g.scale(pro, lambda)?;
                    g.add(gt, scaled)
                }
                None => Ok(gt),
            }
        }
        BatchKind::Replay => {
            let replay = parts
                .replay
                .ok_or_else(|| Error::contract("replay batch without a replay loss"))?;
            if parts.gt.is_some() || parts.pro.is_some() {
                return Err(Error::contract("replay batch given current-batch terms"));
            }
            g.scale(replay, replay_weight)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule {
    pub lambda0: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self { lambda0: 0.05 }
    }
}

/// `λ_n = λ0 · 2^{−(n−2)}` for tasks `n ≥ 2`.
pub fn lambda_for_task(n: usize, schedule: &LambdaSchedule) -> Result<f64> {
    if n < 2 {
        return Err(Error::contract(format!(
            "no projection regularizer for task {n}; it starts at task 2"
        )));
    }
    Ok(schedule.lambda0 * 0.5f64.powi((n - 2) as i32))
}
