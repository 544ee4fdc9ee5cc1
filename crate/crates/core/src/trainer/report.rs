use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{Metric, ScoreMatrix};

/// Checkpoint label of row `t`: the task index trained through, or the
/// last task for the single joint row.
fn checkpoint_label(mode: Mode, row: usize, n_tasks: usize) -> usize {
    match mode {
        Mode::Joint => n_tasks,
        _ => row + 1,
    }
}

/// `checkpoint,task,metric,value` with one line per stored entry.
pub fn scorematrix_csv(matrices: &[ScoreMatrix], mode: Mode) -> String {
    let mut out = String::from("checkpoint,task,metric,value\n");
    let Some(first) = matrices.first() else {
        return out;
    };
    for (t, row) in first.rows.iter().enumerate() {
        for j in 0..row.len() {
            for m in matrices {
                writeln!(
                    out,
                    "{},{},{},{}",
                    checkpoint_label(mode, t, first.n_tasks()),
                    m.tasks[j],
                    m.metric,
                    m.rows[t][j]
                )
                .unwrap();
            }
        }
    }
    out
}

/// Parses `scorematrix.csv` back into one matrix per metric.
pub fn read_scorematrix(path: &Path, tasks: &[String]) -> Result<Vec<ScoreMatrix>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut matrices: Vec<ScoreMatrix> = Metric::ALL
        .iter()
        .map(|&m| ScoreMatrix::new(m, tasks.to_vec()))
        .collect();
    let mut checkpoints: Vec<usize> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = |m: &str| Error::parse(path, i + 1, m.to_string());
        if f.len() != 4 {
            return Err(bad("expected checkpoint,task,metric,value"));
        }
        let ckpt: usize = f[0].parse().map_err(|_| bad("bad checkpoint"))?;
        let j = tasks.iter().position(|t| t == f[1]).ok_or_else(|| bad("unknown task"))?;
        let metric: Metric = f[2].parse().map_err(|_| bad("unknown metric"))?;
        let value: f64 = f[3].parse().map_err(|_| bad("bad value"))?;
        if checkpoints.last() != Some(&ckpt) {
            checkpoints.push(ckpt);
        }
        let t = checkpoints.len() - 1;
        let m = matrices.iter_mut().find(|m| m.metric == metric).unwrap();
        while m.rows.len() <= t {
            m.rows.push(Vec::new());
        }
        if m.rows[t].len() != j {
            return Err(bad("scores must be listed in task order"));
        }
        m.rows[t].push(value);
    }
    Ok(matrices)
}

fn task_names(run_dir: &Path) -> Result<Vec<String>> {
    let path = run_dir.join("entropy.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').next())
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect())
}

fn required_artifacts(mode: Mode, n_tasks: usize) -> Vec<String> {
    let mut names: Vec<String> = ["config.snapshot", "losses.csv", "scorematrix.csv", "entropy.csv"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    match mode {
        Mode::Joint => names.push(format!("checkpoints/task{n_tasks}.clvq")),
        _ => names.extend((1..=n_tasks).map(|t| format!("checkpoints/task{t}.clvq"))),
    }
    names
}

fn fmt_scaled(m: Metric, v: f64) -> String {
    format!("{:.2}", v * m.display_scale())
}

/// Builds `report.csv` and `forgetting_curve.csv` from a finished run and
/// returns a printable summary.
pub fn report(run_dir: &Path) -> Result<String> {
    let snapshot = run_dir.join("config.snapshot");
    let config_text = fs::read_to_string(&snapshot).ok();
    let n_hint = 4;
    let Some(config_text) = config_text else {
        let missing = required_artifacts(Mode::Continual, n_hint)
            .into_iter()
            .filter(|a| !run_dir.join(a).exists())
            .collect();
        return Err(Error::MissingArtifacts {
            dir: run_dir.to_path_buf(),
            missing,
        });
    };
    let cfg = RunConfig::parse(&config_text, run_dir)?;
    let tasks = task_names(run_dir).unwrap_or_default();
    let n = if tasks.is_empty() { n_hint } else { tasks.len() };
    let missing: Vec<String> = required_artifacts(cfg.mode, n)
        .into_iter()
        .filter(|a| !run_dir.join(a).exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts {
            dir: run_dir.to_path_buf(),
            missing,
        });
    }
    let matrices = read_scorematrix(&run_dir.join("scorematrix.csv"), &tasks)?;

    let header: Vec<&str> = Metric::ALL.iter().map(|m| m.name()).collect();
    let mut csv = String::from(
        "# corpus-level BLEU and CIDEr, sentence-mean METEOR and ROUGE_L; BLEU/METEOR/ROUGE_L x100\n",
    );
    writeln!(csv, "row,{}", header.join(",")).unwrap();
    let mut table = format!("mode {}\n{:<12}", cfg.mode.name(), "");
    for h in &header {
        write!(table, "{h:>9}").unwrap();
    }
    table.push('\n');

    let add_row = |label: &str, values: Vec<Option<f64>>, csv: &mut String, table: &mut String| {
        let cells: Vec<String> = Metric::ALL
            .iter()
            .zip(&values)
            .map(|(&m, v)| v.map(|v| fmt_scaled(m, v)).unwrap_or_else(|| "n/a".into()))
            .collect();
        writeln!(csv, "{label},{}", cells.join(",")).unwrap();
        write!(table, "{label:<12}").unwrap();
        for c in &cells {
            write!(table, "{c:>9}").unwrap();
        }
        table.push('\n');
    };

    for (j, task) in tasks.iter().enumerate() {
        let vals = matrices
            .iter()
            .map(|m| m.final_row().ok().map(|r| r[j]))
            .collect();
        add_row(task, vals, &mut csv, &mut table);
    }
    let avgs = matrices.iter().map(|m| m.average().ok()).collect();
    add_row("average", avgs, &mut csv, &mut table);
    let forget = matrices
        .iter()
        .map(|m| if m.rows.len() == n { m.forgetting().ok() } else { None })
        .collect();
    add_row("forgetting", forget, &mut csv, &mut table);
    fs::write(run_dir.join("report.csv"), &csv).map_err(|e| Error::io(run_dir, e))?;

    let mut curve = format!("checkpoint,{}\n", header.join(","));
    let rows = matrices[0].rows.len();
    for t in 0..rows {
        let cells: Vec<String> = matrices
            .iter()
            .map(|m| fmt_scaled(m.metric, m.rows[t][0]))
            .collect();
        writeln!(curve, "{},{}", checkpoint_label(cfg.mode, t, n), cells.join(",")).unwrap();
    }
    fs::write(run_dir.join("forgetting_curve.csv"), curve).map_err(|e| Error::io(run_dir, e))?;

    let ent_path = run_dir.join("entropy.csv");
    let ent = fs::read_to_string(&ent_path).map_err(|e| Error::io(&ent_path, e))?;
    table.push_str("\nfinal checkpoint    entropy  test loss\n");
    for line in ent.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() == 3 {
            let h: f64 = f[1].parse().unwrap_or(f64::NAN);
            let l: f64 = f[2].parse().unwrap_or(f64::NAN);
            writeln!(table, "{:<16}{h:>11.4}{l:>11.4}", f[0]).unwrap();
        }
    }
    Ok(table)
}
