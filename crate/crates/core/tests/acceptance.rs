//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Set `CLVQA_ACCEPTANCE_FAST=1` to skip the training experiments
//! (criteria 4 to 7); skipped criteria are reported as SKIP.

mod support;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use clvqa::autodiff::gradcheck::DEFAULT_REL_TOL;
use clvqa::autodiff::{log_softmax_rows, masked_cross_entropy, softmax_rows, Graph, Tensor};
use clvqa::checkpoint;
use clvqa::distill::{distill_weight, replay_loss, token_kd, DistillConfig};
use clvqa::metrics::{align_exact, bleu, cider, entropy, meteor_exact, rouge_l, rouge_l_corpus, meteor_corpus, Metric};
use clvqa::model::{Vocabulary, MODEL_PARAMS};
use clvqa::projection::{lambda_for_task, projection_name, LambdaSchedule};
use clvqa::replay::per_cluster_quota;
use clvqa::taskstream::{generate_stream, StreamConfig};
use clvqa::trainer::{train, RunConfig, RunOutcome};
use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::grad::{composite_checks, op_checks};
use support::memory::checked_pipeline;
use support::oracles::{bleu_oracle, cider_oracle, meteor_oracle, random_corpus, rouge_oracle};

const SEEDS: [u64; 3] = [1, 2, 3];
/// Learning rate of the forgetting experiment (see the README).
const EXPERIMENT_LR: &str = "1e-3";
const TASKS: usize = 4;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    verdict: Verdict,
    summary: String,
    details: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, summary: impl Into<String>) -> Self {
        Self {
            verdict: if pass { Verdict::Pass } else { Verdict::Fail },
            summary: summary.into(),
            details: Vec::new(),
        }
    }

    fn skip() -> Self {
        Self {
            verdict: Verdict::Skip,
            summary: "CLVQA_ACCEPTANCE_FAST is set".into(),
            details: Vec::new(),
        }
    }

    fn with_details(mut self, details: Vec<String>) -> Self {
        self.details = details;
        self
    }
}

/// Collects named boolean checks and renders the failing ones.
#[derive(Default)]
struct Checks {
    total: usize,
    failed: Vec<String>,
}

impl Checks {
    fn check(&mut self, name: impl Into<String>, ok: bool) {
        self.total += 1;
        if !ok {
            self.failed.push(name.into());
        }
    }

    fn close(&mut self, name: &str, got: f64, want: f64, tol: f64) {
        self.check(format!("{name}: got {got}, want {want}"), (got - want).abs() <= tol);
    }

    fn outcome(self, what: &str) -> Outcome {
        let pass = self.failed.is_empty();
        let summary = format!("{}/{} {what}", self.total - self.failed.len(), self.total);
        Outcome::new(pass, summary).with_details(self.failed)
    }
}

// ---------------------------------------------------------------------------
// 1. Loss and schedule formulas

fn criterion_1() -> Outcome {
    let mut c = Checks::default();
    c.check("quota [50,30,20] S=10", per_cluster_quota(&[50, 30, 20], 10).unwrap() == [5, 3, 2]);

    c.close("gate at c = tau", distill_weight(0.5, 0.5, 0.7), 0.0, 1e-9);
    c.close("gate below tau", distill_weight(0.3, 0.5, 0.7), 0.0, 1e-9);
    c.close("gate at c = 1", distill_weight(1.0, 0.5, 0.7), 0.7, 1e-9);
    c.close("gate at c = 0.75", distill_weight(0.75, 0.5, 0.7), 0.35, 1e-9);

    let mut r = ChaCha8Rng::seed_from_u64(71);
    for trial in 0..20 {
        let k = r.gen_range(2..=6);
        let t = r.gen_range(0.5..4.0);
        let zt = Tensor::new(vec![1, k], (0..k).map(|_| r.gen_range(-3.0..3.0)).collect()).unwrap();
        let zs = Tensor::new(vec![1, k], (0..k).map(|_| r.gen_range(-3.0..3.0)).collect()).unwrap();
        let p = softmax_rows(&zt, t);
        let self_kd = token_kd(p.data(), log_softmax_rows(&zt, t).data(), t);
        c.close(&format!("self-KL {trial}"), self_kd, 0.0, 1e-9);
        let q = log_softmax_rows(&zs, t);
        let kl: f64 = p.data().iter().zip(q.data()).map(|(a, lb)| a * (a.ln() - lb)).sum();
        c.close(&format!("T^2 scaling {trial}"), token_kd(p.data(), q.data(), t), t * t * kl, 1e-9);
    }

    // alpha_max = 0: the replay loss is exactly the masked cross-entropy.
    let cfg = DistillConfig {
        alpha_max: 0.0,
        ..Default::default()
    };
    for trial in 0..20 {
        let (n, l, k) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(2..=6));
        let data: Vec<f64> = (0..n * l * k).map(|_| r.gen_range(-4.0..4.0)).collect();
        let teacher = Tensor::new(vec![n, l, k], (0..n * l * k).map(|_| r.gen_range(-8.0..8.0)).collect()).unwrap();
        let targets: Vec<usize> = (0..n * l).map(|_| r.gen_range(0..k)).collect();
        let mut mask: Vec<bool> = (0..n * l).map(|_| r.gen_bool(0.7)).collect();
        mask[0] = true;
        let mut g = Graph::new();
        let s = g.param(Tensor::new(vec![n, l, k], data).unwrap());
        let ce = masked_cross_entropy(&mut g, s, &targets, &mask).unwrap();
        let rl = replay_loss(&mut g, s, &teacher, &targets, &mask, &cfg).unwrap();
        c.close(&format!("collapse {trial}"), g.value(rl).item(), g.value(ce).item(), 1e-9);
    }

    let sched = LambdaSchedule::default();
    for (n, want) in [(2, 0.05), (3, 0.025), (4, 0.0125)] {
        c.close(&format!("lambda task {n}"), lambda_for_task(n, &sched).unwrap(), want, 1e-9);
    }
    c.outcome("formula checks within 1e-9")
}

// ---------------------------------------------------------------------------
// 2. Gradient checks

fn criterion_2() -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut failed = Vec::new();
    let mut gated = 0;
    for trial in 0..20 {
        let (composite, g) = composite_checks(trial);
        gated += g;
        for (name, report) in op_checks(trial).into_iter().chain(composite) {
            checked += 1;
            if report.max_rel_error > worst.0 {
                worst = (report.max_rel_error, name.to_string());
            }
            if !report.passed(DEFAULT_REL_TOL) {
                failed.push(format!("{name} trial {trial}: {:.3e}", report.max_rel_error));
            }
        }
    }
    if gated == 0 {
        failed.push("distillation gate never opened".into());
    }
    Outcome::new(
        failed.is_empty(),
        format!(
            "{checked} checks over 20 random shapes, worst relative error {:.2e} ({}), tolerance {DEFAULT_REL_TOL:e}",
            worst.0, worst.1
        ),
    )
    .with_details(failed)
}

// ---------------------------------------------------------------------------
// 3. Metrics against brute-force oracles

fn s(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

fn criterion_3() -> Outcome {
    let mut c = Checks::default();
    let mut r = ChaCha8Rng::seed_from_u64(33);
    let corpora = 50;
    for i in 0..corpora {
        let (cands, refs) = random_corpus(&mut r);
        let got = bleu(&cands, &refs, 4).unwrap();
        let want = bleu_oracle(&cands, &refs, 4);
        for n in 0..4 {
            c.close(&format!("corpus {i} BLEU-{}", n + 1), got[n], want[n], 1e-9);
        }
        let rouge_mean = cands.iter().zip(&refs).map(|(a, b)| rouge_oracle(a, b)).sum::<f64>() / cands.len() as f64;
        c.close(&format!("corpus {i} ROUGE-L"), rouge_l_corpus(&cands, &refs).unwrap(), rouge_mean, 1e-9);
        let meteor_mean = cands.iter().zip(&refs).map(|(a, b)| meteor_oracle(a, b).2).sum::<f64>() / cands.len() as f64;
        c.close(&format!("corpus {i} METEOR"), meteor_corpus(&cands, &refs).unwrap(), meteor_mean, 1e-9);
        c.close(&format!("corpus {i} CIDEr"), cider(&cands, &refs).unwrap(), cider_oracle(&cands, &refs), 1e-9);
    }

    // Hand-computed values.
    let b = bleu(&[s("the cat sat")], &[s("the cat sat down")], 4).unwrap();
    c.close("BLEU-1 brevity example", b[0], (1.0f64 - 4.0 / 3.0).exp(), 1e-9);
    c.close("ROUGE-L example", rouge_l(&s("the car stops"), &s("the red car stops")), 1.83 / 2.19, 1e-9);
    c.check("METEOR crossing alignment", align_exact(&s("a b c d"), &s("a c b d")) == (4, 4));
    c.close("METEOR crossing score", meteor_exact(&s("a b c d"), &s("a c b d")), 0.5, 1e-9);
    c.close("METEOR identity m=3", meteor_exact(&s("x y z"), &s("x y z")), 1.0 - 0.5 / 27.0, 1e-9);
    let refs = [s("a b c d e"), s("f g h i j"), s("k l m n o")];
    c.close("CIDEr self-similarity", cider(&refs, &refs).unwrap(), 10.0, 1e-9);
    c.close("entropy uniform 4", entropy(&[0.25; 4]), 4f64.ln(), 1e-9);
    c.close("entropy one-hot", entropy(&[0.0, 1.0]), 0.0, 1e-9);
    c.close("entropy [0.7311, 0.2689]", entropy(&[0.7311, 0.2689]), 0.5822, 1e-4);
    c.outcome(&format!("metric checks ({corpora} random corpora plus hand values)"))
}

// ---------------------------------------------------------------------------
// 4 to 7. Training experiments

struct Experiment {
    root: PathBuf,
}

impl Experiment {
    fn config(&self, mode: &str, er: bool, kd: bool, pro: bool, seed: u64) -> String {
        format!(
            "run.mode = {mode}\nrun.seed = {seed}\ndata.seed = {seed}\ndata.size_per_task = 2000\n\
             ablation.er = {er}\nablation.kd = {kd}\nablation.pro = {pro}\ntrain.lr = {EXPERIMENT_LR}\n"
        )
    }

    fn run(&self, label: &str, mode: &str, flags: (bool, bool, bool), seed: u64) -> RunOutcome {
        let text = self.config(mode, flags.0, flags.1, flags.2, seed);
        let dir = self.root.join(format!("{label}.seed{seed}"));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&self.root).unwrap();
        fs::write(self.root.join(format!("{label}.seed{seed}.cfg")), &text).unwrap();
        let cfg = RunConfig::parse(&text, &self.root).unwrap();
        let start = Instant::now();
        let out = train(&cfg, &dir).unwrap_or_else(|e| panic!("{label} seed {seed}: {e}"));
        eprintln!("  trained {label} seed {seed} in {:.1}s", start.elapsed().as_secs_f64());
        out
    }
}

/// BLEU-4 (scaled ×100) summary of one run.
struct Bleu4 {
    a11: f64,
    a41: f64,
    average: f64,
    forgetting: f64,
}

fn bleu4(out: &RunOutcome) -> Bleu4 {
    let m = out.matrix(Metric::Bleu4);
    Bleu4 {
        a11: 100.0 * m.get(0, 0).unwrap(),
        a41: 100.0 * m.get(TASKS - 1, 0).unwrap(),
        average: 100.0 * m.average().unwrap(),
        forgetting: 100.0 * m.forgetting().unwrap(),
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

struct Runs {
    vanilla: Vec<RunOutcome>,
    full: Vec<RunOutcome>,
    er: Vec<RunOutcome>,
    er_kd: Vec<RunOutcome>,
}

fn criterion_4(runs: &Runs) -> Outcome {
    let summarize = |rs: &[RunOutcome]| -> Bleu4 {
        let b: Vec<Bleu4> = rs.iter().map(bleu4).collect();
        Bleu4 {
            a11: mean(b.iter().map(|x| x.a11)),
            a41: mean(b.iter().map(|x| x.a41)),
            average: mean(b.iter().map(|x| x.average)),
            forgetting: mean(b.iter().map(|x| x.forgetting)),
        }
    };
    let (v, f, e) = (summarize(&runs.vanilla), summarize(&runs.full), summarize(&runs.er));
    let a = v.a41 <= v.a11 - 15.0;
    let b = f.average >= v.average + 10.0;
    let c = f.forgetting <= 0.5 * v.forgetting;
    let d = f.average >= e.average - 1.0 && e.average >= v.average - 1.0;
    let mark = |ok: bool| if ok { "ok" } else { "FAILED" };
    let mut details = vec![format!(
        "{:<10} {:>8} {:>8} {:>8} {:>10}",
        "BLEU-4", "a(1,1)", "a(4,1)", "average", "forgetting"
    )];
    for (name, x) in [("vanilla", &v), ("ER", &e), ("ER+KD+Pro", &f)] {
        details.push(format!(
            "{name:<10} {:>8.2} {:>8.2} {:>8.2} {:>10.2}",
            x.a11, x.a41, x.average, x.forgetting
        ));
    }
    details.push(format!("(a) vanilla a(4,1) <= a(1,1) - 15: {:.2} vs {:.2} {}", v.a41, v.a11 - 15.0, mark(a)));
    details.push(format!("(b) full average >= vanilla + 10: {:.2} vs {:.2} {}", f.average, v.average + 10.0, mark(b)));
    details.push(format!(
        "(c) full forgetting <= 0.5 x vanilla: {:.2} vs {:.2} {}",
        f.forgetting,
        0.5 * v.forgetting,
        mark(c)
    ));
    details.push(format!(
        "(d) full >= ER >= vanilla (1 point ties): {:.2} / {:.2} / {:.2} {}",
        f.average,
        e.average,
        v.average,
        mark(d)
    ));
    Outcome::new(a && b && c && d, format!("3-seed BLEU-4 means at lr {EXPERIMENT_LR}, 2000 samples per task")).with_details(details)
}

fn criterion_5(runs: &Runs) -> Outcome {
    let tasks = runs.er[0].tasks.clone();
    let per_task = |rs: &[RunOutcome], j: usize| mean(rs.iter().map(|r| r.diagnostics[j].mean_entropy));
    let mut details = vec![format!("{:<12} {:>10} {:>10} {:>10}", "task", "ER", "ER+KD", "diff")];
    let mut differing = 0;
    for (j, t) in tasks.iter().enumerate() {
        let (e, k) = (per_task(&runs.er, j), per_task(&runs.er_kd, j));
        if (k - e).abs() > 1e-6 {
            differing += 1;
        }
        details.push(format!("{t:<12} {e:>10.4} {k:>10.4} {:>+10.4}", k - e));
    }
    Outcome::new(
        differing >= 2,
        format!("mean answer-token entropy differs on {differing} of {} tasks (3-seed means)", tasks.len()),
    )
    .with_details(details)
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    out.sort();
    out
}

fn criterion_6(exp: &Experiment, first: &RunOutcome) -> Outcome {
    let seed = SEEDS[0];
    let cfg = exp.root.join(format!("full.seed{seed}.cfg"));
    let again = exp.root.join(format!("full.seed{seed}.rerun"));
    let _ = fs::remove_dir_all(&again);
    let status = Command::new(env!("CARGO_BIN_EXE_clvqa"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--out", again.to_str().unwrap()])
        .output()
        .expect("clvqa binary runs");
    if !status.status.success() {
        return Outcome::new(false, format!("rerun failed: {}", String::from_utf8_lossy(&status.stderr)));
    }
    let mut c = Checks::default();
    let mut names: Vec<String> = vec!["losses.csv".into(), "scorematrix.csv".into()];
    for p in files_under(&first.dir.join("checkpoints")) {
        names.push(format!("checkpoints/{}", p.file_name().unwrap().to_str().unwrap()));
    }
    for name in &names {
        let a = fs::read(first.dir.join(name)).unwrap();
        let b = fs::read(again.join(name)).unwrap_or_default();
        c.check(format!("{name} differs"), a == b);
    }
    c.outcome("files byte-identical between the in-process run and a CLI rerun (ER+KD+Pro, seed 1)")
}

fn criterion_7(full: &[RunOutcome]) -> Outcome {
    let mut c = Checks::default();
    for run in full {
        let vocab = Vocabulary::read(&run.dir.join("vocab.tsv")).unwrap();
        let ckpt = |n: usize| checkpoint::load(&run.dir.join(format!("checkpoints/task{n}.clvq")), &vocab).unwrap();
        let csv = fs::read_to_string(run.dir.join("freeze_audit.csv")).unwrap();
        let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
        c.check(format!("{}: {} audit rows", run.dir.display(), rows.len()), rows.len() == 2 * (TASKS - 1));
        for row in &rows {
            let (n, object, before, after) = (row[0].parse::<usize>().unwrap(), row[1].as_str(), &row[2], &row[3]);
            c.check(format!("task {n} {object} changed"), before == after);
            // The recorded hashes must also match the checkpoints on either side of task n.
            let (prev, cur) = (ckpt(n - 1), ckpt(n));
            match object {
                "teacher" => {
                    c.check(format!("task {n} teacher vs checkpoint {}", n - 1), prev.content_hash(MODEL_PARAMS).unwrap() == *before);
                }
                _ => {
                    let names: Vec<String> = (1..n).map(projection_name).collect();
                    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                    c.check(format!("task {n} projections before"), prev.content_hash(refs.iter().copied()).unwrap() == *before);
                    c.check(format!("task {n} projections after"), cur.content_hash(refs.iter().copied()).unwrap() == *after);
                }
            }
        }
    }
    c.outcome("teacher / frozen-projection hash checks across the 3 ER+KD+Pro runs")
}

// ---------------------------------------------------------------------------
// 8. Memory invariants

fn criterion_8() -> Outcome {
    let stream = generate_stream(&StreamConfig::with_train_size(200, 8)).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(88);
    let mut c = Checks::default();
    for trial in 0..40 {
        let capacity = r.gen_range(1..=120);
        let k = r.gen_range(1..=6);
        let seed = r.gen();
        let sizes: Vec<usize> = (0..TASKS).map(|_| r.gen_range(20..=200)).collect();
        let first = checked_pipeline(&stream, capacity, k, seed, &sizes);
        let again = checked_pipeline(&stream, capacity, k, seed, &sizes);
        let label = format!("trial {trial} (S={capacity}, k={k}, sizes {sizes:?})");
        match (&first, &again) {
            (Ok(a), Ok(b)) => c.check(format!("{label}: not deterministic"), a == b),
            (Err(e), _) | (_, Err(e)) => c.check(format!("{label}: {e}"), false),
        }
        for (j, q) in [(0, 17), (1, 40), (2, 5)] {
            let sizes: Vec<usize> = (0..k).map(|i| 10 + 7 * i + j).collect();
            let quota = per_cluster_quota(&sizes, q).unwrap();
            c.check(format!("{label}: quota sum {quota:?} > {q}"), quota.iter().sum::<usize>() <= q);
        }
    }
    c.outcome("randomized 4-task memory runs and quota checks")
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let fast = std::env::var("CLVQA_ACCEPTANCE_FAST").is_ok_and(|v| !v.is_empty() && v != "0");
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "loss and schedule formulas", criterion_1()),
        (2, "gradient checks", criterion_2()),
        (3, "metric oracles", criterion_3()),
    ];
    if fast {
        for (i, name) in [(4, "forgetting experiment"), (5, "entropy diagnostic"), (6, "determinism"), (7, "freeze contracts")] {
            results.push((i, name, Outcome::skip()));
        }
    } else {
        let exp = Experiment {
            root: Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"),
        };
        eprintln!("training runs under {}", exp.root.display());
        let runs = Runs {
            vanilla: SEEDS.iter().map(|&s| exp.run("vanilla", "vanilla", (false, false, false), s)).collect(),
            full: SEEDS.iter().map(|&s| exp.run("full", "continual", (true, true, true), s)).collect(),
            er: SEEDS.iter().map(|&s| exp.run("er", "continual", (true, false, false), s)).collect(),
            er_kd: SEEDS.iter().map(|&s| exp.run("er_kd", "continual", (true, true, false), s)).collect(),
        };
        results.push((4, "forgetting experiment", criterion_4(&runs)));
        results.push((5, "entropy diagnostic", criterion_5(&runs)));
        results.push((6, "determinism", criterion_6(&exp, &runs.full[0])));
        results.push((7, "freeze contracts", criterion_7(&runs.full)));
    }
    results.push((8, "memory invariants", criterion_8()));
    results.sort_by_key(|r| r.0);

    let mut report = String::new();
    let mut failed = 0;
    for (i, name, o) in &results {
        let tag = match o.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        writeln!(report, "{tag} criterion {i} ({name}): {}", o.summary).unwrap();
        for d in o.details.iter().take(12) {
            writeln!(report, "       {d}").unwrap();
        }
        if o.details.len() > 12 {
            writeln!(report, "       ... {} more", o.details.len() - 12).unwrap();
        }
    }
    print!("{report}");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
