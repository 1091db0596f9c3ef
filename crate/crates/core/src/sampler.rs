//! Budgeted query selection: random sampling, the two active-learning
//! baselines and the filter-then-cluster composition.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::InferenceBackend;
use crate::cluster;
use crate::corpus::{self, SentenceLookup};
use crate::error::{Error, Result};
use crate::filter::{self, FilterConfig, QueryPool, Stage};
use crate::hash::mix_seed;
use crate::student::{self, LabeledPair, StudentModel, TrainHyper};
use crate::victim::{self, QueryLedger, Victim};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetMode {
    Rate,
    Absolute,
}

/// Query budget, either an absolute count or a rate of some base size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSpec {
    pub mode: BudgetMode,
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub absolute_k: usize,
    #[serde(default)]
    pub base_size: usize,
}

impl BudgetSpec {
    pub fn rate(rate: f64, base_size: usize) -> Self {
        BudgetSpec {
            mode: BudgetMode::Rate,
            rate,
            absolute_k: 0,
            base_size,
        }
    }

    pub fn absolute(k: usize) -> Self {
        BudgetSpec {
            mode: BudgetMode::Absolute,
            rate: 0.0,
            absolute_k: k,
            base_size: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == BudgetMode::Rate && !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::InvalidValue(format!(
                "budget rate {} outside (0, 1]",
                self.rate
            )));
        }
        Ok(())
    }
}

/// Resolve a budget to a query count, rounding rates down. Products that land
/// within float noise of an integer snap to it, so 0.003 × 40000 is 120.
pub fn compute_budget(spec: &BudgetSpec) -> Result<usize> {
    spec.validate()?;
    let k = match spec.mode {
        BudgetMode::Absolute => spec.absolute_k,
        BudgetMode::Rate => {
            let x = spec.rate * spec.base_size as f64;
            let r = x.round();
            if (x - r).abs() <= 1e-9 * r.max(1.0) {
                r as usize
            } else {
                x.floor() as usize
            }
        }
    };
    if k == 0 {
        return Err(Error::ZeroBudget);
    }
    Ok(k)
}

fn check_k(pool_len: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::ZeroBudget);
    }
    if k > pool_len {
        return Err(Error::ShortPool {
            requested: k,
            available: pool_len,
        });
    }
    Ok(())
}

/// Uniform draw of `k` ids without replacement, returned sorted.
pub fn random_sample(pool: &QueryPool, k: usize, seed: u64) -> Result<QueryPool> {
    check_k(pool.len(), k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u64> = rand::seq::index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool.ids()[i])
        .collect();
    ids.sort_unstable();
    QueryPool::new(ids, Stage::Reduced)
}

/// Shannon entropy in nats, with 0·ln 0 taken as 0.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidDistribution("empty vector".into()));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidDistribution(format!(
            "component {p} outside [0, 1]"
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("components sum to {sum}")));
    }
    Ok(-probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ALConfig {
    pub rounds: usize,
    pub seed_fraction: f64,
}

impl Default for ALConfig {
    fn default() -> Self {
        ALConfig {
            rounds: 5,
            seed_fraction: 0.2,
        }
    }
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("active learning needs at least one round".into()));
        }
        if !(self.seed_fraction > 0.0 && self.seed_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "seed_fraction {} outside (0, 1]",
                self.seed_fraction
            )));
        }
        Ok(())
    }

    /// Per-round query counts summing to `k`. A single round takes all of
    /// `k`; otherwise round one takes floor(k·seed_fraction) and the rest is
    /// split evenly, earlier rounds absorbing the remainder.
    pub fn quotas(&self, k: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if self.rounds == 1 {
            return Ok(vec![k]);
        }
        let first = (k as f64 * self.seed_fraction).floor() as usize;
        let rest = k.saturating_sub(first);
        let later = self.rounds - 1;
        let mut quotas = vec![first];
        quotas.extend((0..later).map(|r| rest / later + usize::from(r < rest % later)));
        if let Some(r) = quotas.iter().position(|&q| q == 0) {
            return Err(Error::Config(format!(
                "budget {k} leaves round {} with no queries under {} rounds",
                r + 1,
                self.rounds
            )));
        }
        Ok(quotas)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlStrategy {
    Random,
    Uncertainty,
}

/// Everything the active-learning loop touches besides the pool.
pub struct AlContext<'a, L: SentenceLookup + ?Sized> {
    pub lookup: &'a L,
    pub backend: &'a dyn InferenceBackend,
    pub victim: &'a dyn Victim,
    pub hyper: &'a TrainHyper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlOutcome {
    pub queries: QueryPool,
    pub labels: Vec<LabeledPair>,
    pub student: StudentModel,
}

/// Multi-round sampling that retrains the student on every label collected so
/// far before choosing the next round's queries.
pub fn al_loop<L: SentenceLookup + ?Sized>(
    pool: &QueryPool,
    k: usize,
    cfg: &ALConfig,
    strategy: AlStrategy,
    ctx: &AlContext<'_, L>,
    ledger: &mut QueryLedger,
    seed: u64,
) -> Result<AlOutcome> {
    check_k(pool.len(), k)?;
    let quotas = cfg.quotas(k)?;
    let num_classes = ctx.victim.num_classes();
    let mut sorted = pool.ids().to_vec();
    sorted.sort_unstable();
    let embeddings = match strategy {
        AlStrategy::Uncertainty if quotas.len() > 1 => {
            let sentences = sorted
                .iter()
                .map(|&id| ctx.lookup.sentence(id))
                .collect::<Result<Vec<_>>>()?;
            Some(ctx.backend.embed_batch(&sentences)?)
        }
        _ => None,
    };
    let mut taken = vec![false; sorted.len()];
    let mut labels: Vec<LabeledPair> = Vec::with_capacity(k);
    let mut student: Option<StudentModel> = None;

    for (round, &quota) in quotas.iter().enumerate() {
        let wrap = |e: Error| Error::Round {
            round: round + 1,
            source: Box::new(e),
        };
        let remaining: Vec<usize> = (0..sorted.len()).filter(|&i| !taken[i]).collect();
        let picked: Vec<usize> = if round == 0 || strategy == AlStrategy::Random {
            let rest = QueryPool::with_stage(remaining.iter().map(|&i| sorted[i]).collect(), Stage::Original);
            let round_seed = if round == 0 {
                seed
            } else {
                mix_seed(seed, round as u64)
            };
            let drawn = random_sample(&rest, quota, round_seed).map_err(wrap)?;
            drawn
                .ids()
                .iter()
                .map(|id| sorted.binary_search(id).expect("drawn from pool"))
                .collect()
        } else {
            let model = student.as_ref().expect("trained after round one");
            let points = embeddings.as_ref().expect("embedded for uncertainty");
            let mut scored = remaining
                .iter()
                .map(|&i| Ok((entropy(&model.predict(&points[i])?.probabilities)?, i)))
                .collect::<Result<Vec<(f64, usize)>>>()
                .map_err(wrap)?;
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scored.into_iter().take(quota).map(|(_, i)| i).collect()
        };
        let mut ids: Vec<u64> = picked.iter().map(|&i| sorted[i]).collect();
        ids.sort_unstable();
        for &i in &picked {
            taken[i] = true;
        }
        let batch = QueryPool::new(ids, Stage::Reduced).map_err(wrap)?;
        let responses = victim::query_victim(ctx.victim, &batch, ctx.lookup, ledger).map_err(wrap)?;
        labels.extend(responses.iter().map(|r| LabeledPair {
            query_id: r.query_id,
            label: r.label,
        }));
        student = Some(
            student::train_or_constant(&labels, ctx.lookup, ctx.backend, num_classes, ctx.hyper)
                .map_err(wrap)?,
        );
    }

    let mut ids: Vec<u64> = labels.iter().map(|p| p.query_id).collect();
    ids.sort_unstable();
    Ok(AlOutcome {
        queries: QueryPool::new(ids, Stage::Reduced)?,
        labels,
        student: student.expect("at least one round"),
    })
}

/// Filter the original pool for task relevance, then reduce it to `k`
/// cluster representatives. Clusters that end up empty leave slots that are
/// filled by a seeded uniform draw from the unselected filtered sentences.
pub fn meaeq_sample<L: SentenceLookup + ?Sized>(
    pool_original: &QueryPool,
    lookup: &L,
    backend: &dyn InferenceBackend,
    filter_cfg: &FilterConfig,
    k: usize,
    t: usize,
    seed: u64,
) -> Result<QueryPool> {
    let scores = filter::score_pool(pool_original, lookup, backend, &filter_cfg.prompt)?;
    let filtered = filter::filter_task_relevant(pool_original, &scores, filter_cfg)?;
    check_k(filtered.len(), k)?;
    let reduced = cluster::reduce(&filtered, lookup, backend, k, t, seed)?;
    top_up(&filtered, reduced.representatives, k, seed)
}

/// Pad `chosen` to `k` ids with a seeded draw from the rest of `pool`.
pub fn top_up(pool: &QueryPool, chosen: QueryPool, k: usize, seed: u64) -> Result<QueryPool> {
    let missing = k.saturating_sub(chosen.len());
    if missing == 0 {
        return Ok(chosen);
    }
    let rest: Vec<u64> = pool
        .ids()
        .iter()
        .copied()
        .filter(|&id| !chosen.contains(id))
        .collect();
    let extra = random_sample(
        &QueryPool::with_stage(rest, Stage::Filtered),
        missing,
        mix_seed(seed, 0x746f70),
    )?;
    let mut ids: Vec<u64> = chosen.ids().iter().chain(extra.ids()).copied().collect();
    ids.sort_unstable();
    QueryPool::new(ids, Stage::Reduced)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "rs")]
    Random,
    #[serde(rename = "al-rs")]
    AlRandom,
    #[serde(rename = "al-us")]
    AlUncertainty,
    #[serde(rename = "meaeq")]
    Meaeq,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Random,
        Strategy::AlRandom,
        Strategy::AlUncertainty,
        Strategy::Meaeq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "rs",
            Strategy::AlRandom => "al-rs",
            Strategy::AlUncertainty => "al-us",
            Strategy::Meaeq => "meaeq",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Strategy::Random => "RS",
            Strategy::AlRandom => "AL-RS",
            Strategy::AlUncertainty => "AL-US",
            Strategy::Meaeq => "MeaeQ",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySetHeader {
    pub strategy: Strategy,
    pub seed: u64,
    pub k: usize,
    pub config_digest: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySetEntry {
    pub rank: usize,
    pub id: u64,
    pub text: String,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum QuerySetLine {
    Header(QuerySetHeader),
    Entry(QuerySetEntry),
}

/// Header line, then one `{rank, id, text}` line per query in pool order.
pub fn write_query_set<L: SentenceLookup + ?Sized>(
    path: impl AsRef<Path>,
    header: &QuerySetHeader,
    pool: &QueryPool,
    lookup: &L,
) -> Result<()> {
    let mut lines = vec![QuerySetLine::Header(header.clone())];
    for (rank, s) in pool.bind(lookup)?.into_iter().enumerate() {
        lines.push(QuerySetLine::Entry(QuerySetEntry {
            rank,
            id: s.id,
            text: s.text.clone(),
        }));
    }
    corpus::write_json_lines(path.as_ref(), &lines)
}

pub fn read_query_set(path: impl AsRef<Path>) -> Result<(QuerySetHeader, QueryPool, Vec<QuerySetEntry>)> {
    let lines: Vec<QuerySetLine> = corpus::read_json_lines(path.as_ref(), "query set")?;
    let mut it = lines.into_iter();
    let Some(QuerySetLine::Header(header)) = it.next() else {
        return Err(Error::Format {
            what: "query set",
            message: "first line must be the header".into(),
        });
    };
    let mut entries = Vec::new();
    for line in it {
        match line {
            QuerySetLine::Entry(e) if e.rank == entries.len() => entries.push(e),
            QuerySetLine::Entry(e) => {
                return Err(Error::Format {
                    what: "query set",
                    message: format!("rank {} out of sequence", e.rank),
                })
            }
            QuerySetLine::Header(_) => {
                return Err(Error::Format {
                    what: "query set",
                    message: "repeated header".into(),
                })
            }
        }
    }
    let pool = QueryPool::new(entries.iter().map(|e| e.id).collect(), Stage::Reduced)?;
    Ok((header, pool, entries))
}
