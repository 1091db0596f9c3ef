//! Agreement and accuracy metrics, the multi-seed experiment runner and
//! report rendering.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Embedding, InferenceBackend};
use crate::cluster;
use crate::corpus::{self, Sentence, SentenceLookup, SentenceSet};
use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::filter::{self, FilterConfig, QueryPool};
use crate::sampler::{self, ALConfig, AlContext, AlStrategy, Strategy};
use crate::student::{self, LabeledPair, StudentModel, TrainHyper};
use crate::victim::{self, QueryLedger, TaskSpec, Victim};

fn matching_fraction(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidValue("cannot score an empty label list".into()));
    }
    let hits = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(hits as f64 / a.len() as f64)
}

/// Fraction of positions where victim and student labels match.
pub fn agreement(victim_labels: &[usize], student_labels: &[usize]) -> Result<f64> {
    matching_fraction(victim_labels, student_labels)
}

/// Fraction of positions where the student matches the gold label.
pub fn accuracy(student_labels: &[usize], gold_labels: &[usize]) -> Result<f64> {
    matching_fraction(student_labels, gold_labels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledText {
    pub id: u64,
    pub text: String,
    pub label: usize,
}

/// Held-out texts with gold labels. Ids share the space used by embedding
/// caches, so they must not collide with corpus ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalDataset {
    items: Vec<LabeledText>,
    sentences: SentenceSet,
}

impl EvalDataset {
    pub fn new(items: Vec<LabeledText>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidValue("evaluation set is empty".into()));
        }
        let mut sentences = SentenceSet::new();
        let mut seen = HashSet::new();
        for it in &items {
            if !seen.insert(it.id) {
                return Err(Error::InvalidValue(format!("duplicate evaluation id {}", it.id)));
            }
            sentences.insert(Sentence::new(it.id, it.text.clone()));
        }
        Ok(EvalDataset { items, sentences })
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.items.iter().find(|it| it.label >= num_classes) {
            Some(it) => Err(Error::InvalidValue(format!(
                "item {} has label {} but the task has {num_classes} classes",
                it.id, it.label
            ))),
            None => Ok(()),
        }
    }

    pub fn items(&self) -> &[LabeledText] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.label).collect()
    }

    pub fn pairs(&self) -> Vec<LabeledPair> {
        self.items
            .iter()
            .map(|it| LabeledPair {
                query_id: it.id,
                label: it.label,
            })
            .collect()
    }

    pub fn sentences(&self) -> Vec<&Sentence> {
        self.items
            .iter()
            .map(|it| self.sentences.sentence(it.id).expect("indexed at construction"))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        corpus::write_json_lines(path.as_ref(), &self.items)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(corpus::read_json_lines(path.as_ref(), "evaluation set")?)
    }
}

impl SentenceLookup for EvalDataset {
    fn sentence(&self, id: u64) -> Result<&Sentence> {
        self.sentences.sentence(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub agreement: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub message: String,
}

/// Summary over seeds. `std` is the population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if min == max {
            return Some(Aggregate {
                mean: min,
                std: 0.0,
                min,
                max,
            });
        }
        let mean = (values.iter().sum::<f64>() / n).clamp(min, max);
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Aggregate {
            mean,
            std: var.sqrt(),
            min,
            max,
        })
    }

    /// Percent cell in the form `75.8 ± 4.5 (79.7)`.
    pub fn cell(&self) -> String {
        format!(
            "{:.1} ± {:.1} ({:.1})",
            self.mean * 100.0,
            self.std * 100.0,
            self.max * 100.0
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: Strategy,
    pub task: String,
    pub k: usize,
    pub per_seed: Vec<SeedMetrics>,
    #[serde(default)]
    pub failed: Vec<SeedFailure>,
    pub agreement: Option<Aggregate>,
    pub accuracy: Option<Aggregate>,
    pub config_digest: u64,
}

impl MetricsReport {
    /// Aggregate per-seed results after sorting both lists by seed.
    pub fn from_results(
        strategy: Strategy,
        task: impl Into<String>,
        k: usize,
        mut per_seed: Vec<SeedMetrics>,
        mut failed: Vec<SeedFailure>,
        config_digest: u64,
    ) -> Self {
        per_seed.sort_by_key(|m| m.seed);
        failed.sort_by_key(|f| f.seed);
        let ag: Vec<f64> = per_seed.iter().map(|m| m.agreement).collect();
        let acc: Vec<f64> = per_seed.iter().map(|m| m.accuracy).collect();
        MetricsReport {
            strategy,
            task: task.into(),
            k,
            agreement: Aggregate::of(&ag),
            accuracy: Aggregate::of(&acc),
            per_seed,
            failed,
            config_digest,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.failed.is_empty() && !self.per_seed.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(self).map_err(|e| Error::format("metrics report", e))?;
        std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("metrics report", e))
    }
}

/// Everything a run needs, already loaded.
pub struct ExperimentResources<'a> {
    pub task: &'a TaskSpec,
    pub pool: &'a QueryPool,
    pub lookup: &'a SentenceSet,
    pub backend: &'a dyn InferenceBackend,
    pub victim: &'a dyn Victim,
    pub eval: &'a EvalDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub strategy: Strategy,
    pub k: usize,
    pub epsilon: f64,
    pub iterations: usize,
    pub al: ALConfig,
    pub hyper: TrainHyper,
    pub seeds: Vec<u64>,
    pub config_digest: u64,
}

struct Prepared<'a> {
    res: &'a ExperimentResources<'a>,
    plan: &'a ExperimentPlan,
    filtered: Option<QueryPool>,
    eval_points: Vec<Embedding>,
    victim_eval: Vec<usize>,
    gold: Vec<usize>,
}

impl Prepared<'_> {
    fn run_seed(&self, seed: u64) -> Result<SeedMetrics> {
        let res = self.res;
        let plan = self.plan;
        let hyper = plan.hyper.with_seed(seed);
        let mut ledger = QueryLedger::new(plan.k);
        let student = match plan.strategy {
            Strategy::Random | Strategy::Meaeq => {
                let queries = match &self.filtered {
                    None => sampler::random_sample(res.pool, plan.k, seed)?,
                    Some(filtered) => {
                        if plan.k > filtered.len() {
                            return Err(Error::ShortPool {
                                requested: plan.k,
                                available: filtered.len(),
                            });
                        }
                        let reduced = cluster::reduce(
                            filtered,
                            res.lookup,
                            res.backend,
                            plan.k,
                            plan.iterations,
                            seed,
                        )?;
                        sampler::top_up(filtered, reduced.representatives, plan.k, seed)?
                    }
                };
                victim::query_victim(res.victim, &queries, res.lookup, &mut ledger)?;
                student::train_or_constant(
                    &ledger.labeled_pairs(),
                    res.lookup,
                    res.backend,
                    res.task.num_classes,
                    &hyper,
                )?
            }
            Strategy::AlRandom | Strategy::AlUncertainty => {
                let strategy = if plan.strategy == Strategy::AlRandom {
                    AlStrategy::Random
                } else {
                    AlStrategy::Uncertainty
                };
                let ctx = AlContext {
                    lookup: res.lookup,
                    backend: res.backend,
                    victim: res.victim,
                    hyper: &hyper,
                };
                sampler::al_loop(res.pool, plan.k, &plan.al, strategy, &ctx, &mut ledger, seed)?.student
            }
        };
        let predicted = predict_labels(&student, &self.eval_points)?;
        Ok(SeedMetrics {
            seed,
            agreement: agreement(&self.victim_eval, &predicted)?,
            accuracy: accuracy(&predicted, &self.gold)?,
        })
    }
}

/// Victim labels for the evaluation set, fetched in `max_batch` chunks.
/// These never touch an attack ledger.
pub fn reference_labels(victim: &dyn Victim, sentences: &[&Sentence]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(victim.max_batch().max(1)) {
        let labels = victim.classify(chunk).map_err(|e| Error::VictimUnavailable {
            message: format!("labeling the evaluation set: {e}"),
            answered: 0,
        })?;
        if labels.len() != chunk.len() || labels.iter().any(|&l| l >= victim.num_classes()) {
            return Err(Error::VictimUnavailable {
                message: "malformed labels for the evaluation set".into(),
                answered: 0,
            });
        }
        out.extend(labels);
    }
    Ok(out)
}

pub fn predict_labels(model: &StudentModel, points: &[Embedding]) -> Result<Vec<usize>> {
    points.iter().map(|p| Ok(model.predict(p)?.label)).collect()
}

/// Run every seed of the plan. Stage errors abort only their seed and are
/// listed in the report; errors in shared preparation abort the run.
pub fn run_plan(res: &ExperimentResources<'_>, plan: &ExperimentPlan) -> Result<MetricsReport> {
    if plan.seeds.is_empty() {
        return Err(Error::Config("no seeds configured".into()));
    }
    res.eval.validate(res.task.num_classes)?;
    let eval_sentences = res.eval.sentences();
    let eval_points = res.backend.embed_batch(&eval_sentences)?;
    let victim_eval = reference_labels(res.victim, &eval_sentences)?;
    let filtered = match plan.strategy {
        Strategy::Meaeq => {
            let cfg = FilterConfig::new(plan.epsilon, res.task.prompt.clone())?;
            let scores = filter::score_pool(res.pool, res.lookup, res.backend, &cfg.prompt)?;
            Some(filter::filter_task_relevant(res.pool, &scores, &cfg)?)
        }
        _ => None,
    };
    let prepared = Prepared {
        res,
        plan,
        filtered,
        eval_points,
        victim_eval,
        gold: res.eval.labels(),
    };
    let outcomes: Vec<(u64, Result<SeedMetrics>)> = plan
        .seeds
        .par_iter()
        .map(|&seed| (seed, prepared.run_seed(seed)))
        .collect();
    let mut per_seed = Vec::new();
    let mut failed = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(m) => per_seed.push(m),
            Err(e) => failed.push(SeedFailure {
                seed,
                message: e.to_string(),
            }),
        }
    }
    Ok(MetricsReport::from_results(
        plan.strategy,
        res.task.name.clone(),
        plan.k,
        per_seed,
        failed,
        plan.config_digest,
    ))
}

/// Load every artifact named by the config and run it.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport> {
    config.build()?.run()
}

pub const STOPWORDS: &[&str] = &[
    "a",
    "about",
    "above",
    "after",
    "again",
    "against",
    "all",
    "am",
    "an",
    "and",
    "any",
    "are",
    "as",
    "at",
    "be",
    "because",
    "been",
    "before",
    "being",
    "below",
    "between",
    "both",
    "but",
    "by",
    "can",
    "could",
    "did",
    "do",
    "does",
    "doing",
    "down",
    "during",
    "each",
    "few",
    "for",
    "from",
    "further",
    "had",
    "has",
    "have",
    "having",
    "he",
    "her",
    "here",
    "hers",
    "herself",
    "him",
    "himself",
    "his",
    "how",
    "i",
    "if",
    "in",
    "into",
    "is",
    "it",
    "its",
    "itself",
    "just",
    "me",
    "more",
    "most",
    "my",
    "myself",
    "no",
    "nor",
    "not",
    "now",
    "of",
    "off",
    "on",
    "once",
    "only",
    "or",
    "other",
    "our",
    "ours",
    "ourselves",
    "out",
    "over",
    "own",
    "s",
    "same",
    "she",
    "should",
    "so",
    "some",
    "such",
    "t",
    "than",
    "that",
    "the",
    "their",
    "theirs",
    "them",
    "themselves",
    "then",
    "there",
    "these",
    "they",
    "this",
    "those",
    "through",
    "to",
    "too",
    "under",
    "until",
    "up",
    "very",
    "was",
    "we",
    "were",
    "what",
    "when",
    "where",
    "which",
    "while",
    "who",
    "whom",
    "why",
    "will",
    "with",
    "would",
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
];

pub fn default_stopwords() -> HashSet<String> {
    STOPWORDS.iter().map(|s| s.to_string()).collect()
}

/// One word per line; blank lines and `#` comments are skipped.
pub fn load_stopwords(path: impl AsRef<Path>) -> Result<HashSet<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
        .collect())
}

/// Most frequent lowercase words, descending by count with alphabetical ties.
pub fn top_frequent_words<L: SentenceLookup + ?Sized>(
    queries: &QueryPool,
    lookup: &L,
    n: usize,
    stopwords: &HashSet<String>,
) -> Result<Vec<(String, usize)>> {
    if n == 0 {
        return Err(Error::InvalidValue("n must be at least 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for s in queries.bind(lookup)? {
        for word in s
            .text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            let word = word.to_lowercase();
            if !stopwords.contains(&word) {
                *counts.entry(word).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(n);
    Ok(ranked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Stands in for a missing value in either format.
pub const GAP_MARKER: &str = "n/a";

pub const CSV_HEADER: &str = "strategy,task,k,seed,agreement,accuracy";

/// Render one or more reports. Markdown gives a cell per metric in percent
/// with an asterisk on rows that lost seeds; CSV gives one row per seed with
/// `n/a` in place of metrics for failed seeds.
pub fn emit_report(reports: &[MetricsReport], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in reports {
                let mut rows: Vec<(u64, String)> = r
                    .per_seed
                    .iter()
                    .map(|m| (m.seed, format!("{},{}", m.agreement, m.accuracy)))
                    .collect();
                rows.extend(
                    r.failed
                        .iter()
                        .map(|f| (f.seed, format!("{GAP_MARKER},{GAP_MARKER}"))),
                );
                rows.sort_by_key(|(s, _)| *s);
                for (seed, values) in rows {
                    let _ = writeln!(out, "{},{},{},{seed},{values}", r.strategy, r.task, r.k);
                }
            }
        }
        ReportFormat::Markdown => {
            out.push_str("| Method | Task | k | Agreement (%) | Accuracy (%) | Seeds |\n");
            out.push_str("|---|---|---:|---|---|---|\n");
            let mut gaps = Vec::new();
            for r in reports {
                let cell = |a: &Option<Aggregate>| match a {
                    Some(a) if r.failed.is_empty() => a.cell(),
                    Some(a) => format!("{} *", a.cell()),
                    None => GAP_MARKER.to_string(),
                };
                let total = r.per_seed.len() + r.failed.len();
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {}/{} |",
                    r.strategy.display_name(),
                    r.task,
                    r.k,
                    cell(&r.agreement),
                    cell(&r.accuracy),
                    r.per_seed.len(),
                    total
                );
                if !r.failed.is_empty() {
                    let seeds: Vec<String> = r.failed.iter().map(|f| f.seed.to_string()).collect();
                    gaps.push(format!(
                        "{} on {} at k={}: seeds {} failed",
                        r.strategy.display_name(),
                        r.task,
                        r.k,
                        seeds.join(", ")
                    ));
                }
            }
            if !gaps.is_empty() {
                out.push('\n');
                for g in gaps {
                    let _ = writeln!(out, "* {g}");
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub strategy: Strategy,
    pub task: String,
    pub k: usize,
    pub seed: u64,
    /// `None` for a failed seed.
    pub metrics: Option<(f64, f64)>,
}

/// Parse the CSV written by [`emit_report`].
pub fn parse_report_csv(text: &str) -> Result<Vec<CsvRow>> {
    let bad = |line: usize, msg: String| Error::Format {
        what: "report csv",
        message: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(bad(1, "missing header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(n, format!("{} fields", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(n, e.to_string()));
        let metrics = if f[4] == GAP_MARKER && f[5] == GAP_MARKER {
            None
        } else {
            Some((num(f[4])?, num(f[5])?))
        };
        rows.push(CsvRow {
            strategy: f[0].parse()?,
            task: f[1].to_string(),
            k: f[2]
                .parse()
                .map_err(|e: std::num::ParseIntError| bad(n, e.to_string()))?,
            seed: f[3]
                .parse()
                .map_err(|e: std::num::ParseIntError| bad(n, e.to_string()))?,
            metrics,
        });
    }
    Ok(rows)
}

/// Group reports by (task, k) for side-by-side comparison.
pub fn group_reports(reports: &[MetricsReport]) -> BTreeMap<(String, usize), Vec<&MetricsReport>> {
    let mut groups: BTreeMap<(String, usize), Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.task.clone(), r.k)).or_default().push(r);
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::CacheBackend;
    use crate::filter::Stage;
    use crate::sampler::Strategy;
    use crate::victim::make_simulated_victim;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn metric_cases() {
        assert_eq!(agreement(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        assert_eq!(agreement(&[0, 1, 0], &[1, 0, 1]).unwrap(), 0.0);
        assert_eq!(agreement(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[2, 0], &[2, 0]).unwrap(), 1.0);
        assert!(matches!(agreement(&[0], &[0, 1]), Err(Error::Shape { .. })));
        assert!(agreement(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn metric_identities(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
            let (a, b): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            prop_assert_eq!(agreement(&a, &a).unwrap(), 1.0);
            prop_assert_eq!(agreement(&a, &b).unwrap(), agreement(&b, &a).unwrap());
            prop_assert_eq!(agreement(&b, &a).unwrap(), accuracy(&a, &b).unwrap());
        }
    }

    #[test]
    fn aggregate_and_cells() {
        let a = Aggregate {
            mean: 0.758,
            std: 0.045,
            min: 0.7,
            max: 0.797,
        };
        assert_eq!(a.cell(), "75.8 ± 4.5 (79.7)");
        let one = Aggregate::of(&[0.5]).unwrap();
        assert_eq!(one.std, 0.0);
        assert_eq!(one.cell(), "50.0 ± 0.0 (50.0)");
        let same = Aggregate::of(&[0.8; 10]).unwrap();
        assert_eq!(same.std, 0.0);
        let pop = Aggregate::of(&[0.0, 1.0]).unwrap();
        assert_eq!(pop.std, 0.5);
        assert!(Aggregate::of(&[]).is_none());
    }

    fn report(failed: Vec<SeedFailure>) -> MetricsReport {
        let per_seed = vec![
            SeedMetrics {
                seed: 1,
                agreement: 0.8125,
                accuracy: 0.1 + 0.2,
            },
            SeedMetrics {
                seed: 0,
                agreement: 2.0 / 3.0,
                accuracy: 0.5,
            },
        ];
        MetricsReport::from_results(Strategy::Meaeq, "hate_speech", 60, per_seed, failed, 7)
    }

    #[test]
    fn csv_parses_back() {
        let r = report(vec![SeedFailure {
            seed: 2,
            message: "boom".into(),
        }]);
        let text = emit_report(std::slice::from_ref(&r), ReportFormat::Csv);
        let rows = parse_report_csv(&text).unwrap();
        assert_eq!(rows.len(), 3);
        for (row, m) in rows.iter().zip(&r.per_seed) {
            assert_eq!(row.seed, m.seed);
            assert_eq!(row.metrics, Some((m.agreement, m.accuracy)));
            assert_eq!(row.strategy, Strategy::Meaeq);
            assert_eq!(row.k, 60);
        }
        assert_eq!(rows[2].metrics, None);
        assert!(parse_report_csv("nope\n").is_err());
    }

    #[test]
    fn markdown_marks_gaps() {
        let full = report(vec![]);
        let md = emit_report(std::slice::from_ref(&full), ReportFormat::Markdown);
        assert!(md.contains("| MeaeQ | hate_speech | 60 |"));
        assert!(md.contains("| 2/2 |"));
        assert!(!md.contains('*'));
        let partial = report(vec![SeedFailure {
            seed: 9,
            message: "x".into(),
        }]);
        let md = emit_report(&[partial], ReportFormat::Markdown);
        assert!(md.contains(" * |"));
        assert!(md.contains("seeds 9 failed"));
        let empty = MetricsReport::from_results(Strategy::Random, "t", 5, vec![], vec![], 0);
        assert!(emit_report(&[empty], ReportFormat::Markdown).contains(GAP_MARKER));
    }

    #[test]
    fn report_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let r = report(vec![]);
        r.save(&path).unwrap();
        assert_eq!(MetricsReport::load(&path).unwrap(), r);
    }

    #[test]
    fn word_counts() {
        let set: SentenceSet = [
            Sentence::new(0, "hate hate speech"),
            Sentence::new(1, "the and of"),
        ]
        .into_iter()
        .collect();
        let stop = default_stopwords();
        let p0 = QueryPool::new(vec![0], Stage::Reduced).unwrap();
        assert_eq!(
            top_frequent_words(&p0, &set, 20, &stop).unwrap(),
            vec![("hate".to_string(), 2), ("speech".to_string(), 1)]
        );
        let p1 = QueryPool::new(vec![1], Stage::Reduced).unwrap();
        assert!(top_frequent_words(&p1, &set, 20, &stop).unwrap().is_empty());
        let none = QueryPool::new(vec![], Stage::Reduced).unwrap();
        assert!(top_frequent_words(&none, &set, 5, &stop).unwrap().is_empty());
    }

    #[test]
    fn word_counts_match_reference() {
        let vocab = [
            "Alpha", "beta", "gamma", "delta", "the", "Epsilon", "zeta", "of", "eta",
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set: SentenceSet = (0..1000u64)
            .map(|i| {
                let words: Vec<&str> = (0..rng.random_range(1..12))
                    .map(|_| vocab[rng.random_range(0..vocab.len())])
                    .collect();
                Sentence::new(i, words.join(if i % 3 == 0 { ", " } else { " " }))
            })
            .collect();
        let pool = QueryPool::new((0..1000).collect(), Stage::Reduced).unwrap();
        let stop = default_stopwords();
        let got = top_frequent_words(&pool, &set, 100, &stop).unwrap();
        let mut reference: BTreeMap<String, usize> = BTreeMap::new();
        for i in 0..1000 {
            for w in set.sentence(i).unwrap().text.replace(',', " ").split_whitespace() {
                let w = w.to_lowercase();
                if w != "the" && w != "of" {
                    *reference.entry(w).or_default() += 1;
                }
            }
        }
        assert_eq!(got.len(), reference.len());
        for (w, c) in &got {
            assert_eq!(reference[w], *c);
        }
        assert!(got
            .windows(2)
            .all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
    }

    fn separable(n: u64, offset: u64, seed: u64) -> (Vec<LabeledText>, Vec<(u64, Embedding)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items = Vec::new();
        let mut embs = Vec::new();
        for i in 0..n {
            let id = offset + i;
            let label = (i % 2) as usize;
            let s = if label == 1 { 1.0 } else { -1.0 };
            let v = [
                s * (1.0 + rng.random::<f64>()),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            embs.push((id, Embedding::from_f64(&v).unwrap()));
            items.push(LabeledText {
                id,
                text: format!("item {id}"),
                label,
            });
        }
        (items, embs)
    }

    #[test]
    fn closed_loop_reaches_full_agreement() {
        let (train, mut embs) = separable(40, 0, 1);
        let (test, test_embs) = separable(30, 1000, 2);
        embs.extend(test_embs);
        let backend: Arc<dyn InferenceBackend> = Arc::new(CacheBackend::new().with_embeddings(embs).unwrap());
        let mut lookup: SentenceSet = train
            .iter()
            .map(|t| Sentence::new(t.id, t.text.clone()))
            .collect();
        for t in &test {
            lookup.insert(Sentence::new(t.id, t.text.clone()));
        }
        let seed = 4;
        let hyper = TrainHyper {
            epochs: 40,
            ..TrainHyper::default()
        };
        let train_pairs: Vec<LabeledPair> = train
            .iter()
            .map(|t| LabeledPair {
                query_id: t.id,
                label: t.label,
            })
            .collect();
        let victim =
            make_simulated_victim(&train_pairs, &lookup, backend.clone(), 2, &hyper.with_seed(seed)).unwrap();
        let task = TaskSpec::sst2();
        let pool = QueryPool::new((0..40).collect(), Stage::Original).unwrap();
        let eval = EvalDataset::new(test).unwrap();
        let res = ExperimentResources {
            task: &task,
            pool: &pool,
            lookup: &lookup,
            backend: backend.as_ref(),
            victim: &victim,
            eval: &eval,
        };
        let plan = ExperimentPlan {
            strategy: Strategy::Random,
            k: 40,
            epsilon: 0.95,
            iterations: 300,
            al: ALConfig::default(),
            hyper,
            seeds: vec![seed],
            config_digest: 0,
        };
        let r = run_plan(&res, &plan).unwrap();
        assert_eq!(r.per_seed[0].agreement, 1.0);

        let repeated = ExperimentPlan {
            seeds: vec![seed; 10],
            ..plan.clone()
        };
        let r = run_plan(&res, &repeated).unwrap();
        assert_eq!(r.agreement.unwrap().std, 0.0);
        assert_eq!(r.per_seed.len(), 10);

        let multi = ExperimentPlan {
            seeds: (0..6).collect(),
            k: 12,
            ..plan.clone()
        };
        for strategy in Strategy::ALL {
            if strategy == Strategy::Meaeq {
                continue;
            }
            let p = ExperimentPlan {
                strategy,
                ..multi.clone()
            };
            let a = run_plan(&res, &p).unwrap();
            let b = run_plan(&res, &p).unwrap();
            assert_eq!(
                serde_json::to_string(&a).unwrap(),
                serde_json::to_string(&b).unwrap()
            );
            assert!(a.is_complete(), "{strategy}: {:?}", a.failed);
        }

        let too_big = ExperimentPlan { k: 41, ..plan };
        let r = run_plan(&res, &too_big).unwrap();
        assert!(r.per_seed.is_empty());
        assert_eq!(r.failed.len(), 1);
        assert!(!r.is_complete());
    }

    #[test]
    fn eval_dataset_rules() {
        assert!(EvalDataset::new(vec![]).is_err());
        let dup = vec![
            LabeledText {
                id: 1,
                text: "a".into(),
                label: 0,
            },
            LabeledText {
                id: 1,
                text: "b".into(),
                label: 1,
            },
        ];
        assert!(EvalDataset::new(dup).is_err());
        let ok = EvalDataset::new(vec![LabeledText {
            id: 1,
            text: "a".into(),
            label: 3,
        }])
        .unwrap();
        assert!(ok.validate(2).is_err());
        assert!(ok.validate(4).is_ok());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        ok.save(&path).unwrap();
        assert_eq!(EvalDataset::load(&path).unwrap(), ok);
    }
}
