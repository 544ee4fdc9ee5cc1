use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autodiff::AdamWConfig;
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::projection::LambdaSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Continual,
    Joint,
    Vanilla,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Continual => "continual",
            Mode::Joint => "joint",
            Mode::Vanilla => "vanilla",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continual" => Ok(Mode::Continual),
            "joint" => Ok(Mode::Joint),
            "vanilla" => Ok(Mode::Vanilla),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

/// Where the task stream comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// A directory written by `gen-tasks`.
    Dir(PathBuf),
    /// Generated in memory.
    Generated { seed: u64, size_per_task: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub data: DataSource,
    pub er: bool,
    pub kd: bool,
    pub pro: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub replay_period: usize,
    pub optimizer: AdamWConfig,
    pub d_embed: usize,
    pub d_hidden: usize,
    pub max_input_len: usize,
    pub max_answer_len: usize,
    pub eval_batch: usize,
    /// 0 means 10% of the per-task training size.
    pub memory_capacity: usize,
    pub memory_k: usize,
    pub distill: DistillConfig,
    pub lambda: LambdaSchedule,
    pub d_proj: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Continual,
            seed: 0,
            data: DataSource::Generated {
                seed: 0,
                size_per_task: 2000,
            },
            er: true,
            kd: true,
            pro: true,
            epochs: 4,
            batch_size: 4,
            replay_period: 4,
            optimizer: AdamWConfig::default(),
            d_embed: 64,
            d_hidden: 128,
            max_input_len: 32,
            max_answer_len: 12,
            eval_batch: 64,
            memory_capacity: 0,
            memory_k: 5,
            distill: DistillConfig::default(),
            lambda: LambdaSchedule::default(),
            d_proj: 32,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str, base_dir: &Path) -> Result<()> {
        let v = value;
        match key {
            "run.mode" => self.mode = v.parse()?,
            "run.seed" => self.seed = parse_num(key, v)?,
            "data.dir" => self.data = DataSource::Dir(base_dir.join(v)),
            "data.seed" | "data.size_per_task" => {
                let (mut seed, mut size) = match self.data {
                    DataSource::Generated { seed, size_per_task } => (seed, size_per_task),
                    DataSource::Dir(_) => (0, 2000),
                };
                if key == "data.seed" {
                    seed = parse_num(key, v)?;
                } else {
                    size = parse_num(key, v)?;
                }
                self.data = DataSource::Generated {
                    seed,
                    size_per_task: size,
                };
            }
            "ablation.er" => self.er = parse_bool(key, v)?,
            "ablation.kd" => self.kd = parse_bool(key, v)?,
            "ablation.pro" => self.pro = parse_bool(key, v)?,
            "train.epochs" => self.epochs = parse_num(key, v)?,
            "train.batch_size" => self.batch_size = parse_num(key, v)?,
            "train.replay_period" => self.replay_period = parse_num(key, v)?,
            "train.lr" => self.optimizer.lr = parse_num(key, v)?,
            "train.weight_decay" => self.optimizer.weight_decay = parse_num(key, v)?,
            "train.beta1" => self.optimizer.beta1 = parse_num(key, v)?,
            "train.beta2" => self.optimizer.beta2 = parse_num(key, v)?,
            "train.eps" => self.optimizer.eps = parse_num(key, v)?,
            "model.d_embed" => self.d_embed = parse_num(key, v)?,
            "model.d_hidden" => self.d_hidden = parse_num(key, v)?,
            "model.max_input_len" => self.max_input_len = parse_num(key, v)?,
            "eval.max_answer_len" => self.max_answer_len = parse_num(key, v)?,
            "eval.batch" => self.eval_batch = parse_num(key, v)?,
            "memory.capacity" => self.memory_capacity = parse_num(key, v)?,
            "memory.k" => self.memory_k = parse_num(key, v)?,
            "distill.temperature" => self.distill.temperature = parse_num(key, v)?,
            "distill.tau" => self.distill.tau = parse_num(key, v)?,
            "distill.alpha_max" => self.distill.alpha_max = parse_num(key, v)?,
            "distill.replay_weight" => self.distill.replay_weight = parse_num(key, v)?,
            "pro.lambda0" => self.lambda.lambda0 = parse_num(key, v)?,
            "pro.d_proj" => self.d_proj = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` text. Blank lines and `#` comments are
    /// ignored; relative `data.dir` paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", i + 1))
            })?;
            cfg.set(k.trim(), v.trim(), base_dir)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Ablation flags after applying the mode: vanilla and joint switch all
    /// three mechanisms off.
    pub fn effective_flags(&self) -> (bool, bool, bool) {
        match self.mode {
            Mode::Continual => (self.er, self.kd, self.pro),
            Mode::Vanilla | Mode::Joint => (false, false, false),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.mode == Mode::Continual && self.kd && !self.er {
            return bad("ablation.kd = on requires ablation.er = on");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.replay_period == 0 {
            return bad("train.epochs, train.batch_size and train.replay_period must be positive");
        }
        if !(self.optimizer.lr > 0.0) || self.optimizer.weight_decay < 0.0 {
            return bad("train.lr must be positive and train.weight_decay non-negative");
        }
        if self.d_embed == 0 || self.d_hidden == 0 || self.d_proj == 0 || self.max_input_len == 0 {
            return bad("model and projection dimensions must be positive");
        }
        if self.max_answer_len == 0 || self.eval_batch == 0 || self.memory_k == 0 {
            return bad("eval.max_answer_len, eval.batch and memory.k must be positive");
        }
        if !(self.lambda.lambda0 > 0.0) {
            return bad("pro.lambda0 must be positive");
        }
        self.distill
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Canonical listing of every key with its resolved value.
    pub fn snapshot(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut lines: Vec<(String, String)> = vec![
            ("run.mode".into(), self.mode.name().into()),
            ("run.seed".into(), self.seed.to_string()),
            ("ablation.er".into(), on_off(self.er).into()),
            ("ablation.kd".into(), on_off(self.kd).into()),
            ("ablation.pro".into(), on_off(self.pro).into()),
            ("train.epochs".into(), self.epochs.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.replay_period".into(), self.replay_period.to_string()),
            ("train.lr".into(), self.optimizer.lr.to_string()),
            ("train.weight_decay".into(), self.optimizer.weight_decay.to_string()),
            ("train.beta1".into(), self.optimizer.beta1.to_string()),
            ("train.beta2".into(), self.optimizer.beta2.to_string()),
            ("train.eps".into(), self.optimizer.eps.to_string()),
            ("model.d_embed".into(), self.d_embed.to_string()),
            ("model.d_hidden".into(), self.d_hidden.to_string()),
            ("model.max_input_len".into(), self.max_input_len.to_string()),
            ("eval.max_answer_len".into(), self.max_answer_len.to_string()),
            ("eval.batch".into(), self.eval_batch.to_string()),
            ("memory.capacity".into(), self.memory_capacity.to_string()),
            ("memory.k".into(), self.memory_k.to_string()),
            ("distill.temperature".into(), self.distill.temperature.to_string()),
            ("distill.tau".into(), self.distill.tau.to_string()),
            ("distill.alpha_max".into(), self.distill.alpha_max.to_string()),
            ("distill.replay_weight".into(), self.distill.replay_weight.to_string()),
            ("pro.lambda0".into(), self.lambda.lambda0.to_string()),
            ("pro.d_proj".into(), self.d_proj.to_string()),
        ];
        match &self.data {
            DataSource::Dir(p) => lines.push(("data.dir".into(), p.display().to_string())),
            DataSource::Generated { seed, size_per_task } => {
                lines.push(("data.seed".into(), seed.to_string()));
                lines.push(("data.size_per_task".into(), size_per_task.to_string()));
            }
        }
        lines.sort();
        for (k, v) in lines {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
