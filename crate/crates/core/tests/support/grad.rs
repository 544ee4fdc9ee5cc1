//! Randomized finite-difference checks for every graph op and the
//! composite training losses.

use clvqa::autodiff::gradcheck::{check_gradients, GradCheckReport, DEFAULT_EPS};
use clvqa::autodiff::{masked_cross_entropy, Graph, NodeId, Tensor};
use clvqa::distill::{distill_weight, replay_loss, teacher_probs, token_confidence, DistillConfig};
use clvqa::model::{decode_logits, embed, loss_gt, EncodedSample, ModelConfig, ModelNodes, TeacherForcing};
use clvqa::projection::{pro_loss_pair, project, total_loss, BatchKind, LossParts};
use clvqa::Result;
use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Checked = Vec<(&'static str, GradCheckReport)>;

pub fn rng(label: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x6752_4144 ^ label)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

fn rand_weights(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Reduces any node to a scalar with fixed random weights, so every output
/// element contributes a distinct amount to the checked gradient.
fn reduce(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let n = g.value(x).numel();
    let w = rand_weights(&mut rng(seed), n);
    g.weighted_sum(x, w)
}

fn check<F>(out: &mut Checked, name: &'static str, build: F, inputs: &[Tensor])
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let report = check_gradients(build, inputs, DEFAULT_EPS).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(report.checked > 0, "{name}: nothing checked");
    out.push((name, report));
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(1..=4))
}

/// One randomized instance of every differentiable op.
pub fn op_checks(trial: u64) -> Checked {
    let mut out = Vec::new();
    let r = &mut rng(trial);
    let t = trial;

    let (m, k, n) = dims(r);
    let a = rand_tensor(r, &[m, k], 1.0);
    let b = rand_tensor(r, &[k, n], 1.0);
    check(&mut out, "matmul", |g, x| { let y = g.matmul(x[0], x[1])?; reduce(g, y, t) }, &[a, b]);

    let (m, k, n) = dims(r);
    let pair = [rand_tensor(r, &[m, k], 1.0), rand_tensor(r, &[m, k], 1.0)];
    check(&mut out, "add", |g, x| { let y = g.add(x[0], x[1])?; reduce(g, y, t) }, &pair);
    check(&mut out, "sub", |g, x| { let y = g.sub(x[0], x[1])?; reduce(g, y, t) }, &pair);
    check(&mut out, "mul", |g, x| { let y = g.mul(x[0], x[1])?; reduce(g, y, t) }, &pair);
    // The same node on both sides accumulates two gradient contributions.
    check(&mut out, "mul_self", |g, x| { let y = g.mul(x[0], x[0])?; reduce(g, y, t) }, &pair[..1]);

    let x3 = [rand_tensor(r, &[m, k, n], 1.5)];
    let c = r.gen_range(-2.0..2.0);
    let w = rand_weights(r, m * k * n);
    check(&mut out, "tanh", |g, x| { let y = g.tanh(x[0])?; reduce(g, y, t) }, &x3);
    check(&mut out, "square", |g, x| { let y = g.square(x[0])?; reduce(g, y, t) }, &x3);
    check(&mut out, "scale", |g, x| { let y = g.scale(x[0], c)?; reduce(g, y, t) }, &x3);
    check(&mut out, "sum", |g, x| { let y = g.tanh(x[0])?; g.sum(y) }, &x3);
    check(&mut out, "weighted_sum", |g, x| { let y = g.square(x[0])?; g.weighted_sum(y, w.clone()) }, &x3);
    check(
        &mut out,
        "reshape",
        |g, x| { let y = g.reshape(x[0], vec![m * k, n])?; let y = g.tanh(y)?; reduce(g, y, t) },
        &x3,
    );

    let bias = rand_tensor(r, &[n], 1.0);
    check(&mut out, "add_bias", |g, x| { let y = g.add_bias(x[0], x[1])?; reduce(g, y, t) }, &[x3[0].clone(), bias]);
    let left = rand_tensor(r, &[m, k], 1.0);
    let right = rand_tensor(r, &[m, n], 1.0);
    check(&mut out, "concat_cols", |g, x| { let y = g.concat_cols(x[0], x[1])?; reduce(g, y, t) }, &[left, right]);

    let (v, d, _) = dims(r);
    let rows = r.gen_range(1..=6);
    let ids: Vec<usize> = (0..rows).map(|_| r.gen_range(0..v)).collect();
    let masked: Vec<Option<usize>> = (0..rows).map(|_| r.gen_bool(0.7).then(|| r.gen_range(0..v))).collect();
    let table = [rand_tensor(r, &[v, d], 1.0)];
    check(&mut out, "gather", |g, x| { let y = g.gather(x[0], &ids)?; reduce(g, y, t) }, &table);
    check(&mut out, "gather_masked", |g, x| { let y = g.gather_masked(x[0], &masked)?; reduce(g, y, t) }, &table);

    let (m, k, _) = dims(r);
    let temp = r.gen_range(0.5..3.0);
    let logits = [rand_tensor(r, &[m, k + 1], 2.0)];
    check(&mut out, "softmax", |g, x| { let y = g.softmax_temp(x[0], temp)?; reduce(g, y, t) }, &logits);
    check(&mut out, "log_softmax", |g, x| { let y = g.log_softmax_temp(x[0], temp)?; reduce(g, y, t) }, &logits);

    let (n, l, k) = dims(r);
    let logits = [rand_tensor(r, &[n, l, k + 1], 2.0)];
    let targets: Vec<usize> = (0..n * l).map(|_| r.gen_range(0..=k)).collect();
    let mut mask: Vec<bool> = (0..n * l).map(|_| r.gen_bool(0.7)).collect();
    mask[0] = true;
    check(&mut out, "masked_cross_entropy", |g, x| masked_cross_entropy(g, x[0], &targets, &mask), &logits);
    out
}

/// A random tiny model and batch.
struct Setup {
    cfg: ModelConfig,
    params: Vec<Tensor>,
    batch: Vec<EncodedSample>,
}

fn words(r: &mut ChaCha8Rng, v: usize, lo: usize, hi: usize) -> Vec<usize> {
    let n = r.gen_range(lo..=hi);
    (0..n).map(|_| r.gen_range(3..v)).collect()
}

fn setup(r: &mut ChaCha8Rng) -> Setup {
    let cfg = ModelConfig {
        vocab_size: r.gen_range(5..=7),
        d_embed: r.gen_range(2..=3),
        d_hidden: r.gen_range(2..=4),
        max_len: 6,
    };
    let (v, d, h) = (cfg.vocab_size, cfg.d_embed, cfg.d_hidden);
    let params = vec![
        rand_tensor(r, &[v, d], 0.8),
        rand_tensor(r, &[v, d], 0.8),
        rand_tensor(r, &[cfg.max_len, d], 0.3),
        rand_tensor(r, &[2 * d, h], 0.8),
        rand_tensor(r, &[h], 0.3),
        rand_tensor(r, &[h, v], 0.8),
        rand_tensor(r, &[v], 0.3),
    ];
    let n = r.gen_range(1..=2);
    let batch = (0..n)
        .map(|_| EncodedSample {
            scene: words(r, v, 1, 2),
            question: words(r, v, 0, 2),
            answer: words(r, v, 1, 3),
        })
        .collect();
    Setup { cfg, params, batch }
}

fn nodes(x: &[NodeId]) -> ModelNodes {
    ModelNodes {
        scene: x[0],
        text: x[1],
        pos: x[2],
        w_h: x[3],
        b_h: x[4],
        w_o: x[5],
        b_o: x[6],
    }
}

/// The three training objectives through a random model. Also returns how
/// many answer tokens passed the distillation gate, so callers can make
/// sure the distillation branch was exercised.
pub fn composite_checks(trial: u64) -> (Checked, usize) {
    let mut out = Vec::new();
    let r = &mut rng(10_000 + trial);

    let s = setup(r);
    let tf = TeacherForcing::new(&s.batch);
    check(
        &mut out,
        "L_GT",
        |g, x| {
            let nd = nodes(x);
            let e = embed(g, &nd, &s.cfg, &s.batch)?;
            let logits = decode_logits(g, &nd, &s.cfg, &e, &tf.prefixes)?;
            loss_gt(g, logits, &tf.targets, &tf.mask)
        },
        &s.params,
    );

    let cfg = DistillConfig::default();
    let teacher = rand_tensor(r, &[s.batch.len(), tf.len, s.cfg.vocab_size], 6.0);
    let conf = token_confidence(&teacher_probs(&teacher, cfg.temperature).unwrap());
    let gated = conf
        .iter()
        .zip(&tf.mask)
        .filter(|(c, m)| **m && distill_weight(**c, cfg.tau, cfg.alpha_max) > 0.0)
        .count();
    check(
        &mut out,
        "L_replay",
        |g, x| {
            let nd = nodes(x);
            let e = embed(g, &nd, &s.cfg, &s.batch)?;
            let logits = decode_logits(g, &nd, &s.cfg, &e, &tf.prefixes)?;
            let replay = replay_loss(g, logits, &teacher, &tf.targets, &tf.mask, &cfg)?;
            let parts = LossParts { replay: Some(replay), ..Default::default() };
            total_loss(g, BatchKind::Replay, parts, 0.0, cfg.replay_weight)
        },
        &s.params,
    );

    let d_proj = r.gen_range(1..=3);
    let lambda = r.gen_range(0.01..0.2);
    let n_frozen = r.gen_range(1..=2);
    let frozen: Vec<Tensor> = (0..n_frozen).map(|_| rand_tensor(r, &[s.cfg.d_embed, d_proj], 1.0)).collect();
    let mut inputs = s.params.clone();
    inputs.push(rand_tensor(r, &[s.cfg.d_embed, d_proj], 1.0));
    check(
        &mut out,
        "L_GT + lambda L_pro",
        |g, x| {
            let nd = nodes(x);
            let e = embed(g, &nd, &s.cfg, &s.batch)?;
            let logits = decode_logits(g, &nd, &s.cfg, &e, &tf.prefixes)?;
            let gt = loss_gt(g, logits, &tf.targets, &tf.mask)?;
            let f_n = project(g, x[7], e.node)?;
            let mut pro = None;
            for w in &frozen {
                let w = g.constant(w.clone());
                let f_m = project(g, w, e.node)?;
                let pair = pro_loss_pair(g, f_n, f_m, &e.mask)?;
                pro = Some(match pro {
                    None => pair,
                    Some(p) => g.add(p, pair)?,
                });
            }
            let parts = LossParts { gt: Some(gt), pro, replay: None };
            total_loss(g, BatchKind::Current, parts, lambda, 1.0)
        },
        &inputs,
    );
    (out, gated)
}
