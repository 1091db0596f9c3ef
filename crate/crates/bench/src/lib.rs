//! Fixtures shared by the benchmarks.

use std::collections::HashMap;

use meaeq_core::synth::{self, SynthConfig, SynthTask, VICTIM_TRAIN_OFFSET};
use meaeq_core::{CacheBackend, DeterministicBackend, Embedding, Result};

/// Synthetic task with `pool_size` corpus sentences, seed 0.
pub fn task(pool_size: usize) -> Result<SynthTask> {
    synth::generate(&SynthConfig {
        pool_size,
        ..SynthConfig::default()
    })
}

/// Corpus embeddings in id order.
pub fn points(task: &SynthTask) -> Vec<Embedding> {
    task.embeddings
        .iter()
        .filter(|(id, _)| *id < VICTIM_TRAIN_OFFSET)
        .map(|(_, e)| e.clone())
        .collect()
}

/// Cache-backed embeddings for every synthetic id.
pub fn embedding_backend(task: &SynthTask) -> Result<CacheBackend> {
    CacheBackend::new().with_embeddings(task.embeddings.iter().cloned())
}

/// Keyword scorer that marks the task-relevant corpus sentences.
pub fn scoring_backend(task: &SynthTask) -> Result<DeterministicBackend> {
    DeterministicBackend::new(task.config.dim, 0, &[task.config.keyword.as_str()])
}

/// The first `n` victim training items with their embeddings.
pub fn labeled(task: &SynthTask, n: usize) -> (Vec<Embedding>, Vec<usize>) {
    let by_id: HashMap<u64, &Embedding> = task.embeddings.iter().map(|(id, e)| (*id, e)).collect();
    task.victim_train
        .items()
        .iter()
        .take(n)
        .map(|t| (by_id[&t.id].clone(), t.label))
        .unzip()
}
