//! Task relevance filtering: keep sentences whose entailment probability
//! against the task prompt reaches a threshold.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{EntailmentScores, InferenceBackend, PromptTemplate};
use crate::corpus::{read_json_lines, write_json_lines, CorpusStore, Sentence, SentenceLookup};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Original,
    Filtered,
    Reduced,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Original => "original",
            Stage::Filtered => "filtered",
            Stage::Reduced => "reduced",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered, duplicate-free list of sentence ids at one pipeline stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryPool {
    ids: Vec<u64>,
    stage: Stage,
}

impl QueryPool {
    pub fn new(ids: Vec<u64>, stage: Stage) -> Result<Self> {
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::InvalidValue(format!("duplicate id {dup} in query pool")));
        }
        Ok(QueryPool { ids, stage })
    }

    /// Every sentence of the store, in store order.
    pub fn original(store: &CorpusStore) -> Self {
        QueryPool {
            ids: store.ids().collect(),
            stage: Stage::Original,
        }
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.ids.contains(&id)
    }

    /// Check that every id resolves.
    pub fn bind<'a, L: SentenceLookup + ?Sized>(&self, lookup: &'a L) -> Result<Vec<&'a Sentence>> {
        self.ids.iter().map(|&id| lookup.sentence(id)).collect()
    }

    pub(crate) fn expect_stage(&self, expected: Stage) -> Result<()> {
        if self.stage == expected {
            Ok(())
        } else {
            Err(Error::StageOrder {
                expected: expected.name(),
                found: self.stage.name(),
            })
        }
    }

    pub(crate) fn with_stage(ids: Vec<u64>, stage: Stage) -> Self {
        QueryPool { ids, stage }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub epsilon: f64,
    pub prompt: PromptTemplate,
}

impl FilterConfig {
    pub const DEFAULT_EPSILON: f64 = 0.95;

    pub fn new(epsilon: f64, prompt: PromptTemplate) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidValue(format!("epsilon {epsilon} outside [0, 1]")));
        }
        Ok(FilterConfig { epsilon, prompt })
    }
}

pub type ScoreTable = BTreeMap<u64, EntailmentScores>;

/// Score every pool sentence against the prompt.
pub fn score_pool<L: SentenceLookup + ?Sized>(
    pool: &QueryPool,
    lookup: &L,
    backend: &dyn InferenceBackend,
    prompt: &PromptTemplate,
) -> Result<ScoreTable> {
    let sentences = pool.bind(lookup)?;
    if sentences.is_empty() {
        return Ok(ScoreTable::new());
    }
    let scores = backend.score_batch(&sentences, prompt)?;
    Ok(pool.ids().iter().copied().zip(scores).collect())
}

/// Keep ids with `p_entailment >= epsilon`, preserving pool order.
pub fn filter_task_relevant(pool: &QueryPool, scores: &ScoreTable, cfg: &FilterConfig) -> Result<QueryPool> {
    pool.expect_stage(Stage::Original)?;
    let mut kept = Vec::new();
    let mut max_entailment = f64::NEG_INFINITY;
    for &id in pool.ids() {
        let p = scores.get(&id).ok_or(Error::MissingScore(id))?.entailment;
        max_entailment = max_entailment.max(p);
        if p >= cfg.epsilon {
            kept.push(id);
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyFilterResult { max_entailment });
    }
    Ok(QueryPool::with_stage(kept, Stage::Filtered))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: usize,
    pub dropped: usize,
    pub keep_ratio: f64,
}

pub fn filter_report(before: &QueryPool, after: &QueryPool) -> Result<FilterReport> {
    let all: HashSet<u64> = before.ids().iter().copied().collect();
    if let Some(stray) = after.ids().iter().find(|id| !all.contains(id)) {
        return Err(Error::Inconsistent(format!(
            "id {stray} is in the filtered pool but not in the original"
        )));
    }
    let kept = after.len();
    let total = before.len();
    Ok(FilterReport {
        kept,
        dropped: total - kept,
        keep_ratio: if total == 0 {
            0.0
        } else {
            kept as f64 / total as f64
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilteredRecord {
    pub id: u64,
    pub p_entailment: f64,
}

/// Persist a filtered pool as `{id, p_entailment}` lines sorted by id.
pub fn write_filtered_pool(path: impl AsRef<Path>, pool: &QueryPool, scores: &ScoreTable) -> Result<()> {
    let mut records: Vec<FilteredRecord> = pool
        .ids()
        .iter()
        .map(|&id| {
            scores
                .get(&id)
                .map(|s| FilteredRecord {
                    id,
                    p_entailment: s.entailment,
                })
                .ok_or(Error::MissingScore(id))
        })
        .collect::<Result<_>>()?;
    records.sort_by_key(|r| r.id);
    write_json_lines(path.as_ref(), &records)
}

pub fn read_filtered_pool(path: impl AsRef<Path>) -> Result<(QueryPool, Vec<FilteredRecord>)> {
    let records: Vec<FilteredRecord> = read_json_lines(path.as_ref(), "filtered pool")?;
    let pool = QueryPool::new(records.iter().map(|r| r.id).collect(), Stage::Filtered)?;
    Ok((pool, records))
}
