use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;

use super::kmeans::{kmeans, DEFAULT_MAX_ITER};
use super::tfidf::tfidf_fit_transform;
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::taskstream::{Sample, TaskKind};

/// `floor(size_c / Σ sizes × budget)` per cluster, before any capping.
pub fn proportional_quota(sizes: &[usize], budget: usize) -> Result<Vec<usize>> {
    if sizes.is_empty() {
        return Err(Error::contract("no clusters to allocate a quota over"));
    }
    if sizes.contains(&0) {
        return Err(Error::contract("cluster sizes must be positive"));
    }
    let total: usize = sizes.iter().sum();
    Ok(sizes.iter().map(|&s| s * budget / total).collect())
}

/// Proportional quota capped at the cluster size.
pub fn per_cluster_quota(sizes: &[usize], budget: usize) -> Result<Vec<usize>> {
    Ok(proportional_quota(sizes, budget)?
        .into_iter()
        .zip(sizes)
        .map(|(q, &s)| q.min(s))
        .collect())
}

/// A selected sample and the question cluster it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct CuratedSample {
    pub sample: Sample,
    pub cluster: usize,
}

/// TF-IDF over the questions, k-means, proportional quotas, then uniform
/// sampling without replacement inside each cluster.
///
/// Output is ordered by cluster and, within a cluster, by dataset order.
pub fn curate_task_memory(
    dataset: &[Sample],
    budget: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<CuratedSample>> {
    if budget > dataset.len() {
        return Err(Error::contract(format!(
            "memory budget {budget} exceeds the {} available samples",
            dataset.len()
        )));
    }
    let docs: Vec<Vec<String>> = dataset.iter().map(|s| s.question.clone()).collect();
    let (_, matrix) = tfidf_fit_transform(&docs)?;
    let clustering = kmeans(&matrix, k, rng, DEFAULT_MAX_ITER)?;
    let quotas = per_cluster_quota(&clustering.sizes(), budget)?;
    let mut out = Vec::with_capacity(budget);
    for (c, &quota) in quotas.iter().enumerate() {
        let members = clustering.members(c);
        let mut picked: Vec<usize> = sample_indices(rng, members.len(), quota)
            .into_iter()
            .map(|i| members[i])
            .collect();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| CuratedSample {
            sample: dataset[i].clone(),
            cluster: c,
        }));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub sample: Sample,
    /// 1-based position of the source task in the stream.
    pub task: usize,
    pub cluster: usize,
}

/// A new task's contribution fell short of its share.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shortfall {
    pub task: usize,
    pub share: usize,
    pub got: usize,
}

/// Replay memory with per-task, per-cluster provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    pub capacity: usize,
    pub entries: Vec<MemoryEntry>,
    /// Target share ⌊S/n⌋ of every task after the latest refresh.
    pub share: usize,
    pub tasks_seen: usize,
    pub shortfalls: Vec<Shortfall>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::new(),
            share: capacity,
            tasks_seen: 0,
            shortfalls: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of entries per source task.
    pub fn task_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.task).or_insert(0) += 1;
        }
        m
    }

    pub fn cluster_counts(&self, task: usize) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.task == task) {
            *m.entry(e.cluster).or_insert(0) += 1;
        }
        m
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.entries.iter().map(|e| &e.sample)
    }

    /// Checks capacity, share and uniqueness invariants.
    pub fn validate(&self) -> Result<()> {
        if self.entries.len() > self.capacity {
            return Err(Error::contract(format!(
                "memory holds {} entries, capacity {}",
                self.entries.len(),
                self.capacity
            )));
        }
        for (task, count) in self.task_counts() {
            if task == 0 || task > self.tasks_seen || count > self.share {
                return Err(Error::contract(format!(
                    "task {task} holds {count} entries, share {}",
                    self.share
                )));
            }
        }
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            if !ids.insert((e.task, &e.sample.id)) {
                return Err(Error::contract(format!("duplicate sample {}", e.sample.id)));
            }
        }
        Ok(())
    }

    /// Admits task `n` (1-based) with an equal share ⌊S/n⌋ for every task
    /// seen so far. Earlier tasks are thinned per cluster, proportionally and
    /// at random; the new task is curated from `dataset`.
    pub fn refresh(&mut self, dataset: &[Sample], n: usize, k: usize, rng: &mut Rng) -> Result<()> {
        if n != self.tasks_seen + 1 {
            return Err(Error::contract(format!(
                "memory refresh for task {n} after {} tasks",
                self.tasks_seen
            )));
        }
        let share = self.capacity / n;
        for task in 1..n {
            self.evict_task(task, share, rng);
        }
        let budget = share.min(dataset.len());
        let k = k.min(dataset.len()).max(1);
        let curated = if budget == 0 {
            Vec::new()
        } else {
            curate_task_memory(dataset, budget, k, rng)?
        };
        if curated.len() < share {
            self.shortfalls.push(Shortfall {
                task: n,
                share,
                got: curated.len(),
            });
        }
        self.entries.extend(curated.into_iter().map(|c| MemoryEntry {
            sample: c.sample,
            task: n,
            cluster: c.cluster,
        }));
        self.share = share;
        self.tasks_seen = n;
        self.validate()
    }

    fn evict_task(&mut self, task: usize, share: usize, rng: &mut Rng) {
        let counts = self.cluster_counts(task);
        let total: usize = counts.values().sum();
        if total <= share {
            return;
        }
        // Largest-remainder apportionment keeps every cluster within one
        // entry of its exact proportional size.
        let mut keep: BTreeMap<usize, usize> = counts
            .iter()
            .map(|(&c, &n)| (c, n * share / total))
            .collect();
        let mut rest = share - keep.values().sum::<usize>();
        let mut by_remainder: Vec<(usize, usize)> = counts
            .iter()
            .map(|(&c, &n)| (c, n * share % total))
            .collect();
        by_remainder.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        for (c, _) in by_remainder {
            if rest == 0 {
                break;
            }
            *keep.get_mut(&c).unwrap() += 1;
            rest -= 1;
        }

        let mut retained = vec![true; self.entries.len()];
        for (&c, &n) in &counts {
            let members: Vec<usize> = (0..self.entries.len())
                .filter(|&i| self.entries[i].task == task && self.entries[i].cluster == c)
                .collect();
            let kept: BTreeSet<usize> = sample_indices(rng, n, keep[&c]).into_iter().collect();
            for (j, &i) in members.iter().enumerate() {
                retained[i] = kept.contains(&j);
            }
        }
        let mut it = retained.into_iter();
        self.entries.retain(|_| it.next().unwrap());
    }

    /// Line format: `task<TAB>cluster<TAB>scene<TAB>question<TAB>answer`.
    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|e| {
                format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    e.sample.task,
                    e.cluster,
                    e.sample.scene.join(" "),
                    e.sample.question.join(" "),
                    e.sample.answer.join(" ")
                )
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a persisted buffer. Sample ids are not stored, so entries get
/// synthetic ids `mem-<line>`.
pub fn read_memory(path: &Path) -> Result<Vec<MemoryEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::parse(path, i + 1, "expected 5 tab-separated fields"));
        }
        let kind: TaskKind = f[0]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("unknown task {:?}", f[0])))?;
        let cluster = f[1]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("bad cluster {:?}", f[1])))?;
        let task = TaskKind::ALL.iter().position(|&t| t == kind).unwrap() + 1;
        out.push(MemoryEntry {
            sample: Sample {
                id: format!("mem-{}", i + 1),
                task: kind,
                scene: words(f[2]),
                question: words(f[3]),
                answer: words(f[4]),
            },
            task,
            cluster,
        });
    }
    Ok(out)
}
