//! Training loops for continual, vanilla and joint runs.
//!
//! Run directory layout:
//!
//! ```text
//! config.snapshot        resolved configuration
//! vocab.tsv              token<TAB>id
//! losses.csv             one line per optimizer step
//! scorematrix.csv        checkpoint,task,metric,value (raw values)
//! freeze_audit.csv       content hashes of teacher / frozen projections
//! checkpoints/task<N>.clvq (+ .frozen sidecar)
//! memory/task<N>.tsv     replay memory after task N
//! predictions/task<N>/<task>.tsv
//! entropy.csv            final-checkpoint entropy and test loss per task
//! report.csv, forgetting_curve.csv
//! run.log
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::config::{DataSource, Mode, RunConfig};
use super::eval::{diagnostics, evaluate_samples, Diagnostics};
use super::report::{report, scorematrix_csv};
use crate::autodiff::{masked_cross_entropy, Gradients, Graph, NodeId, OptimizerState, ParameterStore, Tensor};
use crate::checkpoint;
use crate::distill::replay_loss;
use crate::error::{Error, Result};
use crate::metrics::{write_predictions, Metric, ScoreMatrix};
use crate::model::{
    decode_logits, embed, forced_logits, init_params, loss_gt, EncodedSample, ModelConfig, ModelNodes,
    TeacherForcing, Vocabulary, MODEL_PARAMS,
};
use crate::projection::{
    lambda_for_task, pro_loss_total, projection_name, total_loss, BatchKind, LossParts, ProjectionBank,
};
use crate::replay::MemoryBuffer;
use crate::seed::{rng_for, Rng};
use crate::taskstream::{generate_stream, read_stream, StreamConfig, TaskDataset};

pub const PARTIAL_MARKER: &str = "PARTIAL";

/// Content hashes taken before and after training one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeAudit {
    pub task: usize,
    pub object: &'static str,
    pub before: String,
    pub after: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub tasks: Vec<String>,
    pub matrices: Vec<ScoreMatrix>,
    pub diagnostics: Vec<Diagnostics>,
    pub audits: Vec<FreezeAudit>,
    pub replay_steps: usize,
    pub current_steps: usize,
}

impl RunOutcome {
    pub fn matrix(&self, metric: Metric) -> &ScoreMatrix {
        self.matrices.iter().find(|m| m.metric == metric).expect("every metric is tracked")
    }
}

pub fn load_stream(cfg: &RunConfig) -> Result<Vec<TaskDataset>> {
    match &cfg.data {
        DataSource::Dir(dir) => read_stream(dir),
        DataSource::Generated { seed, size_per_task } => {
            generate_stream(&StreamConfig::with_train_size(*size_per_task, *seed))
        }
    }
}

pub fn stream_vocabulary(stream: &[TaskDataset]) -> Vocabulary {
    Vocabulary::from_samples(stream.iter().flat_map(TaskDataset::all_samples))
}

struct Run<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    vocab: Vocabulary,
    mcfg: ModelConfig,
    store: ParameterStore,
    log: Vec<String>,
    losses: String,
    step: usize,
    replay_steps: usize,
    current_steps: usize,
}

#[derive(Default)]
struct StepLoss {
    total: f64,
    gt: Option<f64>,
    pro: Option<f64>,
    replay: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn collect_grads(grads: &mut Gradients, named: &[(String, NodeId)]) -> BTreeMap<String, Tensor> {
    named
        .iter()
        .filter_map(|(n, id)| grads.take(*id).map(|t| (n.clone(), t)))
        .collect()
}

fn model_bindings(nodes: &ModelNodes) -> Vec<(String, NodeId)> {
    nodes.named().iter().map(|(n, id)| (n.to_string(), *id)).collect()
}

impl<'a> Run<'a> {
    fn new(cfg: &'a RunConfig, dir: &Path, vocab: Vocabulary) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        let mcfg = ModelConfig {
            vocab_size: vocab.len(),
            d_embed: cfg.d_embed,
            d_hidden: cfg.d_hidden,
            max_len: cfg.max_input_len,
        };
        let mut store = ParameterStore::new();
        init_params(&mcfg, &mut store, &mut rng_for(cfg.seed, "model.init"));
        Ok(Self {
            cfg,
            dir: dir.to_path_buf(),
            vocab,
            mcfg,
            store,
            log: Vec::new(),
            losses: String::from("step,task,epoch,kind,loss,gt,pro,replay\n"),
            step: 0,
            replay_steps: 0,
            current_steps: 0,
        })
    }

    fn encode(&self, samples: &[crate::taskstream::Sample]) -> Result<Vec<EncodedSample>> {
        samples
            .iter()
            .map(|s| EncodedSample::encode(s, &self.vocab))
            .collect()
    }

    fn record(&mut self, task: usize, epoch: usize, kind: &str, l: StepLoss) -> Result<()> {
        self.step += 1;
        if !l.total.is_finite() {
            return Err(Error::contract(format!("non-finite loss at step {}", self.step)));
        }
        writeln!(
            self.losses,
            "{},{},{},{},{},{},{},{}",
            self.step,
            task,
            epoch,
            kind,
            l.total,
            fmt_opt(l.gt),
            fmt_opt(l.pro),
            fmt_opt(l.replay)
        )
        .unwrap();
        Ok(())
    }

    /// `L_GT (+ λ_n L_pro)` on a batch of the current task.
    fn current_step(
        &mut self,
        opt: &mut OptimizerState,
        batch: &[EncodedSample],
        bank: Option<&ProjectionBank>,
        task: usize,
    ) -> Result<StepLoss> {
        let mut g = Graph::new();
        let nodes = ModelNodes::bind(&mut g, &self.store, false)?;
        let mut named = model_bindings(&nodes);
        let tf = TeacherForcing::new(batch);
        let e = embed(&mut g, &nodes, &self.mcfg, batch)?;
        let logits = decode_logits(&mut g, &nodes, &self.mcfg, &e, &tf.prefixes)?;
        let gt = loss_gt(&mut g, logits, &tf.targets, &tf.mask)?;
        let mut parts = LossParts {
            gt: Some(gt),
            ..Default::default()
        };
        let mut lambda = 0.0;
        if let Some(bank) = bank.filter(|_| task >= 2) {
            let pro = pro_loss_total(&mut g, &self.store, bank, &e)?;
            if let Some(w) = pro.current {
                named.push((projection_name(bank.current), w));
            }
            parts.pro = Some(pro.loss);
            lambda = lambda_for_task(task, &self.cfg.lambda)?;
        }
        let total = total_loss(&mut g, BatchKind::Current, parts, lambda, self.cfg.distill.replay_weight)?;
        let mut grads = g.backward(total)?;
        opt.step(&mut self.store, &collect_grads(&mut grads, &named))?;
        Ok(StepLoss {
            total: g.value(total).item(),
            gt: Some(g.value(gt).item()),
            pro: parts.pro.map(|p| g.value(p).item()),
            replay: None,
        })
    }

    /// `replay_weight · L_replay` on a batch drawn from memory.
    fn replay_step(
        &mut self,
        opt: &mut OptimizerState,
        batch: &[EncodedSample],
        teacher: Option<&ParameterStore>,
    ) -> Result<StepLoss> {
        let mut g = Graph::new();
        let nodes = ModelNodes::bind(&mut g, &self.store, false)?;
        let named = model_bindings(&nodes);
        let tf = TeacherForcing::new(batch);
        let e = embed(&mut g, &nodes, &self.mcfg, batch)?;
        let logits = decode_logits(&mut g, &nodes, &self.mcfg, &e, &tf.prefixes)?;
        let replay = match teacher {
            Some(t) => {
                let (teacher_logits, _) = forced_logits(t, &self.mcfg, batch)?;
                replay_loss(&mut g, logits, &teacher_logits, &tf.targets, &tf.mask, &self.cfg.distill)?
            }
            None => masked_cross_entropy(&mut g, logits, &tf.targets, &tf.mask)?,
        };
        let parts = LossParts {
            replay: Some(replay),
            ..Default::default()
        };
        let total = total_loss(&mut g, BatchKind::Replay, parts, 0.0, self.cfg.distill.replay_weight)?;
        let mut grads = g.backward(total)?;
        opt.step(&mut self.store, &collect_grads(&mut grads, &named))?;
        Ok(StepLoss {
            total: g.value(total).item(),
            replay: Some(g.value(replay).item()),
            ..Default::default()
        })
    }

    fn save_checkpoint(&mut self, task: usize) -> Result<()> {
        let path = self.dir.join("checkpoints").join(format!("task{task}.clvq"));
        if let Err(e) = checkpoint::save(&path, &self.store, &self.vocab) {
            let marker = self.dir.join(PARTIAL_MARKER);
            let _ = fs::write(&marker, format!("checkpoint write failed after task {task}: {e}\n"));
            self.flush_logs()?;
            return Err(e);
        }
        self.log.push(format!("task {task}: checkpoint {}", path.display()));
        Ok(())
    }

    fn write(&self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }

    fn flush_logs(&self) -> Result<()> {
        self.write("losses.csv", &self.losses)?;
        let mut log = self.log.join("\n");
        log.push('\n');
        self.write("run.log", &log)
    }

    /// Scores the current parameters on the test splits of `tasks`.
    fn evaluate(&self, stream: &[TaskDataset], tasks: std::ops::Range<usize>, label: usize) -> Result<Vec<[f64; 7]>> {
        let mut rows = Vec::new();
        for j in tasks {
            let ds = &stream[j];
            let (scores, preds) = evaluate_samples(
                &self.store,
                &self.vocab,
                &ds.test,
                self.cfg.max_answer_len,
                self.cfg.eval_batch,
            )?;
            let path = self.dir.join(format!("predictions/task{label}/{}.tsv", ds.task));
            fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
            write_predictions(&path, &preds)?;
            rows.push(scores.0);
        }
        Ok(rows)
    }
}

fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Endless reshuffled walk over the replay memory.
struct ReplaySampler {
    len: usize,
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl ReplaySampler {
    fn new(len: usize, rng: Rng) -> Self {
        Self {
            len,
            order: Vec::new(),
            pos: 0,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.len) {
            if self.pos == self.order.len() {
                self.order = shuffled(self.len, &mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Runs the configured training mode and writes the run directory.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let stream = load_stream(cfg)?;
    if stream.iter().any(|d| d.train.is_empty() || d.test.is_empty()) {
        return Err(Error::contract("every task needs training and test samples"));
    }
    let vocab = stream_vocabulary(&stream);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let _ = fs::remove_file(out.join(PARTIAL_MARKER));
    vocab.write(&out.join("vocab.tsv"))?;
    let mut run = Run::new(cfg, out, vocab)?;
    run.write("config.snapshot", &cfg.snapshot())?;
    run.log.push(format!(
        "mode {} seed {} tasks {} parameters {}",
        cfg.mode.name(),
        cfg.seed,
        stream.len(),
        run.store.num_scalars()
    ));

    let tasks: Vec<String> = stream.iter().map(|d| d.task.to_string()).collect();
    let mut matrices: Vec<ScoreMatrix> = Metric::ALL
        .iter()
        .map(|&m| ScoreMatrix::new(m, tasks.clone()))
        .collect();
    let mut audits = Vec::new();

    match cfg.mode {
        Mode::Joint => train_joint(&mut run, &stream, &mut matrices)?,
        Mode::Continual | Mode::Vanilla => train_sequential(&mut run, &stream, &mut matrices, &mut audits)?,
    }

    let diags = stream
        .iter()
        .map(|d| diagnostics(&run.store, &run.vocab, &d.test, cfg.eval_batch))
        .collect::<Result<Vec<_>>>()?;
    let mut ent = String::from("task,mean_entropy,test_loss\n");
    for (t, d) in tasks.iter().zip(&diags) {
        writeln!(ent, "{t},{},{}", d.mean_entropy, d.test_loss).unwrap();
    }
    run.write("entropy.csv", &ent)?;

    let mut audit_csv = String::from("task,object,before,after\n");
    for a in &audits {
        writeln!(audit_csv, "{},{},{},{}", a.task, a.object, a.before, a.after).unwrap();
    }
    run.write("freeze_audit.csv", &audit_csv)?;
    run.write("scorematrix.csv", &scorematrix_csv(&matrices, cfg.mode))?;
    run.log.push(format!(
        "steps: {} current, {} replay",
        run.current_steps, run.replay_steps
    ));
    run.flush_logs()?;
    report(out)?;

    Ok(RunOutcome {
        dir: out.to_path_buf(),
        tasks,
        matrices,
        diagnostics: diags,
        audits,
        replay_steps: run.replay_steps,
        current_steps: run.current_steps,
    })
}

fn push_row(matrices: &mut [ScoreMatrix], t: usize, rows: &[[f64; 7]]) {
    for (mi, m) in matrices.iter_mut().enumerate() {
        while m.rows.len() <= t {
            m.rows.push(Vec::new());
        }
        m.rows[t] = rows.iter().map(|r| r[mi]).collect();
    }
}

fn train_sequential(
    run: &mut Run<'_>,
    stream: &[TaskDataset],
    matrices: &mut [ScoreMatrix],
    audits: &mut Vec<FreezeAudit>,
) -> Result<()> {
    let cfg = run.cfg;
    let (er, kd, pro) = cfg.effective_flags();
    let capacity = if cfg.memory_capacity > 0 {
        cfg.memory_capacity
    } else {
        (stream[0].train.len() / 10).max(1)
    };
    let mut memory = MemoryBuffer::new(capacity);
    let mut bank = pro.then(|| ProjectionBank::new(cfg.d_embed, cfg.d_proj));
    run.log.push(format!(
        "ablation er={er} kd={kd} pro={pro} memory capacity {capacity} k {}",
        cfg.memory_k
    ));

    for (idx, ds) in stream.iter().enumerate() {
        let n = idx + 1;
        if let Some(b) = bank.as_mut() {
            b.add_task_projection(&mut run.store, &mut rng_for(cfg.seed, &format!("proj.init.{n}")));
        }
        let teacher = (kd && n >= 2).then(|| run.store.clone());
        let frozen: Vec<String> = bank.as_ref().map(ProjectionBank::frozen_names).unwrap_or_default();
        let teacher_before = match &teacher {
            Some(t) => Some(t.content_hash(MODEL_PARAMS)?),
            None => None,
        };
        let frozen_before = run.store.content_hash(frozen.iter().map(String::as_str))?;

        let train = run.encode(&ds.train)?;
        let replay_pool = if er && n >= 2 {
            let samples: Vec<_> = memory.samples().cloned().collect();
            run.encode(&samples)?
        } else {
            Vec::new()
        };
        let mut sampler = ReplaySampler::new(replay_pool.len(), rng_for(cfg.seed, &format!("replay.task{n}")));
        let mut opt = OptimizerState::new(cfg.optimizer);
        for epoch in 1..=cfg.epochs {
            let order = shuffled(train.len(), &mut rng_for(cfg.seed, &format!("shuffle.task{n}.epoch{epoch}")));
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let batch: Vec<EncodedSample> = chunk.iter().map(|&i| train[i].clone()).collect();
                let l = run.current_step(&mut opt, &batch, bank.as_ref(), n)?;
                run.current_steps += 1;
                run.record(n, epoch, "current", l)?;
                if !replay_pool.is_empty() && (b + 1) % cfg.replay_period == 0 {
                    let picks = sampler.next_batch(cfg.batch_size);
                    let batch: Vec<EncodedSample> = picks.iter().map(|&i| replay_pool[i].clone()).collect();
                    let l = run.replay_step(&mut opt, &batch, teacher.as_ref())?;
                    run.replay_steps += 1;
                    run.record(n, epoch, "replay", l)?;
                }
            }
        }

        if let (Some(t), Some(before)) = (&teacher, teacher_before) {
            let after = t.content_hash(MODEL_PARAMS)?;
            run.log.push(format!("task {n}: teacher sha256 before {before} after {after}"));
            let same = before == after;
            audits.push(FreezeAudit { task: n, object: "teacher", before, after });
            if !same {
                return Err(Error::contract(format!("teacher changed during task {n}")));
            }
        }
        if !frozen.is_empty() {
            let after = run.store.content_hash(frozen.iter().map(String::as_str))?;
            run.log.push(format!(
                "task {n}: frozen projections {} sha256 before {frozen_before} after {after}",
                frozen.join(" ")
            ));
            let same = frozen_before == after;
            audits.push(FreezeAudit {
                task: n,
                object: "frozen_projections",
                before: frozen_before,
                after,
            });
            if !same {
                return Err(Error::contract(format!("frozen projections changed during task {n}")));
            }
        }

        run.save_checkpoint(n)?;
        if er {
            memory.refresh(&ds.train, n, cfg.memory_k, &mut rng_for(cfg.seed, &format!("memory.task{n}")))?;
            let counts: Vec<String> = memory
                .task_counts()
                .iter()
                .map(|(t, c)| format!("{t}:{c}"))
                .collect();
            run.log.push(format!(
                "task {n}: memory {} entries, share {}, per task {}",
                memory.len(),
                memory.share,
                counts.join(" ")
            ));
            if let Some(s) = memory.shortfalls.iter().find(|s| s.task == n) {
                run.log.push(format!(
                    "task {n}: memory shortfall, {} of {} entries (cluster quota floors)",
                    s.got, s.share
                ));
            }
            let path = run.dir.join(format!("memory/task{n}.tsv"));
            fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
            memory.write(&path)?;
        }
        let rows = run.evaluate(stream, 0..stream.len(), n)?;
        push_row(matrices, n - 1, &rows);
        let bleu4: Vec<String> = rows.iter().map(|r| format!("{:.2}", r[3] * 100.0)).collect();
        run.log.push(format!("task {n}: BLEU-4 on tasks 1..={}: {}", stream.len(), bleu4.join(" ")));
        run.flush_logs()?;
    }
    Ok(())
}

fn train_joint(run: &mut Run<'_>, stream: &[TaskDataset], matrices: &mut [ScoreMatrix]) -> Result<()> {
    let cfg = run.cfg;
    let mut train = Vec::new();
    for ds in stream {
        train.extend(run.encode(&ds.train)?);
    }
    let mut opt = OptimizerState::new(cfg.optimizer);
    for epoch in 1..=cfg.epochs {
        let order = shuffled(train.len(), &mut rng_for(cfg.seed, &format!("shuffle.joint.epoch{epoch}")));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<EncodedSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let l = run.current_step(&mut opt, &batch, None, 1)?;
            run.current_steps += 1;
            run.record(0, epoch, "current", l)?;
        }
    }
    let n = stream.len();
    run.save_checkpoint(n)?;
    let rows = run.evaluate(stream, 0..n, n)?;
    push_row(matrices, 0, &rows);
    run.flush_logs()
}
