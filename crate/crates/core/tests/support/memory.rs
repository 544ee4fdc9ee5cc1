//! Four-task replay-memory pipeline with every buffer invariant checked
//! after each refresh.

use clvqa::replay::MemoryBuffer;
use clvqa::seed::rng_for;
use clvqa::taskstream::TaskDataset;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Refreshes a buffer of `capacity` with the first `sizes[i]` training
/// samples of each task and returns the serialized memory after every task.
pub fn checked_pipeline(
    stream: &[TaskDataset],
    capacity: usize,
    k: usize,
    seed: u64,
    sizes: &[usize],
) -> Result<Vec<String>, String> {
    let mut memory = MemoryBuffer::new(capacity);
    let mut admitted = Vec::new();
    let mut snapshots = Vec::new();
    for (idx, ds) in stream.iter().enumerate() {
        let n = idx + 1;
        let data = &ds.train[..sizes[idx].min(ds.train.len())];
        memory
            .refresh(data, n, k, &mut rng_for(seed, &format!("memory.task{n}")))
            .map_err(|e| e.to_string())?;
        let share = capacity / n;
        ensure!(memory.len() <= capacity, "{} entries exceed capacity {capacity}", memory.len());
        ensure!(memory.share == share, "share {} after task {n}, expected {share}", memory.share);
        let counts = memory.task_counts();
        admitted.push(counts.get(&n).copied().unwrap_or(0));
        for j in 1..=n {
            let held = counts.get(&j).copied().unwrap_or(0);
            // Older tasks shrink to the current share and never grow back.
            let want = admitted[j - 1].min(share);
            ensure!(held == want, "task {j} holds {held} after refresh {n}, expected {want}");
        }
        // Cluster quotas are floors, so the new task may fall short of its
        // share by less than one entry per cluster, never more.
        let target = share.min(data.len());
        let clusters = k.min(data.len()).max(1);
        ensure!(
            admitted[idx] <= target && target - admitted[idx] < clusters,
            "task {n} admitted {} of {target} with {clusters} clusters",
            admitted[idx]
        );
        for e in &memory.entries {
            ensure!(e.task >= 1 && e.task <= n, "entry with task {}", e.task);
            ensure!(e.cluster < k, "entry with cluster {}", e.cluster);
            ensure!(e.sample.task == stream[e.task - 1].task, "sample {} filed under task {}", e.sample.id, e.task);
        }
        memory.validate().map_err(|e| e.to_string())?;
        snapshots.push(memory.to_tsv());
    }
    Ok(snapshots)
}
