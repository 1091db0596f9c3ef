//! Experiment configuration files.
//!
//! A config is a TOML document with `[task]`, `[corpus]`, `[backend]`,
//! `[strategy]`, `[budget]`, `[victim]`, `[student]` and `[seeds]` tables.
//! Any key can be overridden with `section.key=value`, where the value is
//! read as TOML and falls back to a bare string. Relative paths are resolved
//! against the directory holding the config.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{
    CacheBackend, DeterministicBackend, HttpBackend, HttpConfig, InferenceBackend, PromptTemplate,
};
use crate::corpus::{CorpusStore, SentenceLookup, SentenceSet};
use crate::error::{Error, Result};
use crate::eval::{self, EvalDataset, ExperimentPlan, ExperimentResources, MetricsReport};
use crate::filter::{FilterConfig, QueryPool};
use crate::hash::fnv1a;
use crate::sampler::{compute_budget, ALConfig, BudgetSpec, Strategy};
use crate::student::{StudentModel, TrainHyper};
use crate::victim::{make_simulated_victim, RemoteVictim, SimulatedVictim, TaskSpec, Victim};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// `hate_speech`, `sst2`, `imdb`, `ag_news`, or a custom name.
    pub name: String,
    pub label_names: Option<Vec<String>>,
    pub prompt: Option<String>,
    pub topic: Option<String>,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            name: "hate_speech".into(),
            label_names: None,
            prompt: None,
            topic: None,
        }
    }
}

impl TaskSection {
    pub fn resolve(&self) -> Result<TaskSpec> {
        let mut task = match self.name.as_str() {
            "hate_speech" => TaskSpec::hate_speech(),
            "sst2" => TaskSpec::sst2(),
            "imdb" => TaskSpec::imdb(),
            "ag_news" => TaskSpec::ag_news(),
            other => {
                let labels = self
                    .label_names
                    .clone()
                    .ok_or_else(|| Error::Config(format!("task {other:?} needs label_names")))?;
                let prompt = match (&self.prompt, &self.topic) {
                    (Some(p), _) => PromptTemplate::new(p.clone())?,
                    (None, Some(t)) => PromptTemplate::about(t)?,
                    (None, None) => {
                        return Err(Error::Config(format!("task {other:?} needs a prompt or topic")))
                    }
                };
                return TaskSpec::new(other, labels, prompt);
            }
        };
        if let Some(labels) = &self.label_names {
            task.num_classes = labels.len();
            task.label_names = labels.clone();
        }
        if let Some(p) = &self.prompt {
            task.prompt = PromptTemplate::new(p.clone())?;
        } else if let Some(t) = &self.topic {
            task.prompt = PromptTemplate::about(t)?;
        }
        task.validate()?;
        Ok(task)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Ingested corpus in JSON lines.
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Cache,
    Deterministic,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub scores: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub dim: usize,
    pub seed: u64,
    pub keywords: Vec<String>,
    pub url: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for BackendSection {
    fn default() -> Self {
        let http = HttpConfig::default();
        BackendSection {
            kind: BackendKind::Cache,
            scores: None,
            embeddings: None,
            dim: 16,
            seed: 0,
            keywords: Vec::new(),
            url: None,
            timeout_ms: http.timeout_ms,
            retries: http.retries,
        }
    }
}

/// Cache files take precedence over computed values: scores and embeddings
/// found there are served from the cache, the rest from the rule backend.
struct Layered {
    cache: CacheBackend,
    fallback: Option<Box<dyn InferenceBackend>>,
}

impl InferenceBackend for Layered {
    fn score(
        &self,
        premise: &crate::corpus::Sentence,
        hypothesis: &PromptTemplate,
    ) -> Result<crate::backend::EntailmentScores> {
        match (self.cache.scores().contains_key(&premise.id), &self.fallback) {
            (false, Some(f)) => f.score(premise, hypothesis),
            _ => self.cache.score(premise, hypothesis),
        }
    }

    fn embed(&self, sentence: &crate::corpus::Sentence) -> Result<crate::backend::Embedding> {
        match (self.cache.embedding(sentence.id).is_some(), &self.fallback) {
            (false, Some(f)) => f.embed(sentence),
            _ => self.cache.embed(sentence),
        }
    }
}

impl BackendSection {
    pub fn http_config(&self) -> HttpConfig {
        let mut c = HttpConfig {
            timeout_ms: self.timeout_ms,
            retries: self.retries,
            ..HttpConfig::default()
        };
        if let Some(url) = &self.url {
            c.base_url = url.clone();
        }
        c
    }

    pub fn build(&self) -> Result<Arc<dyn InferenceBackend>> {
        let cache = CacheBackend::load(self.scores.as_deref(), self.embeddings.as_deref())?;
        let fallback: Option<Box<dyn InferenceBackend>> = match self.kind {
            BackendKind::Cache => None,
            BackendKind::Deterministic => Some(Box::new(DeterministicBackend::new(
                self.dim,
                self.seed,
                &self.keywords,
            )?)),
            BackendKind::Http => {
                let b = HttpBackend::new(self.http_config());
                b.health_check()?;
                Some(Box::new(b))
            }
        };
        Ok(Arc::new(Layered { cache, fallback }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySection {
    pub name: Strategy,
    pub epsilon: f64,
    pub iterations: usize,
    pub rounds: usize,
    pub seed_fraction: f64,
}

impl Default for StrategySection {
    fn default() -> Self {
        let al = ALConfig::default();
        StrategySection {
            name: Strategy::Meaeq,
            epsilon: FilterConfig::DEFAULT_EPSILON,
            iterations: crate::cluster::DEFAULT_ITERATIONS,
            rounds: al.rounds,
            seed_fraction: al.seed_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VictimKind {
    Simulated,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimSection {
    pub kind: VictimKind,
    /// Labeled data the simulated victim is trained on.
    pub train: Option<PathBuf>,
    /// A saved model to use instead of training one.
    pub model: Option<PathBuf>,
    /// Held-out labeled texts for agreement and accuracy.
    pub eval: Option<PathBuf>,
    pub url: Option<String>,
    pub model_id: Option<String>,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for VictimSection {
    fn default() -> Self {
        VictimSection {
            kind: VictimKind::Simulated,
            train: None,
            model: None,
            eval: None,
            url: None,
            model_id: None,
            epochs: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsSection {
    /// Explicit seed list; when absent, `count` values from `start`.
    pub values: Option<Vec<u64>>,
    pub count: usize,
    pub start: u64,
}

impl Default for SeedsSection {
    fn default() -> Self {
        SeedsSection {
            values: None,
            count: 10,
            start: 0,
        }
    }
}

impl SeedsSection {
    pub fn resolve(&self) -> Vec<u64> {
        match &self.values {
            Some(v) => v.clone(),
            None => (self.start..self.start + self.count as u64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: TaskSection,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub strategy: StrategySection,
    pub budget: BudgetSpec,
    #[serde(default)]
    pub victim: VictimSection,
    #[serde(default)]
    pub student: TrainHyper,
    #[serde(default)]
    pub seeds: SeedsSection,
}

fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not section.key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(|s| s.trim().to_string()).collect();
    if path.len() < 2 || path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override key {key:?} is not section.key")));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((path, parsed))
}

fn apply_override(doc: &mut toml::Table, raw: &str) -> Result<()> {
    let (path, value) = parse_override(raw)?;
    let (last, parents) = path.split_last().expect("at least two parts");
    let mut table = doc;
    for p in parents {
        table = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p} is not a table")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

fn resolve_path(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: ExperimentConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base, overrides)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve_path(base, &mut self.corpus.path);
        for p in [
            &mut self.backend.scores,
            &mut self.backend.embeddings,
            &mut self.victim.train,
            &mut self.victim.model,
            &mut self.victim.eval,
        ]
        .into_iter()
        .flatten()
        {
            resolve_path(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.resolve()?;
        self.budget.validate()?;
        self.student.validate()?;
        ALConfig {
            rounds: self.strategy.rounds,
            seed_fraction: self.strategy.seed_fraction,
        }
        .validate()?;
        FilterConfig::new(self.strategy.epsilon, PromptTemplate::hate_speech())?;
        if self.strategy.iterations == 0 {
            return Err(Error::Config("strategy.iterations must be at least 1".into()));
        }
        if self.seeds.resolve().is_empty() {
            return Err(Error::Config("no seeds configured".into()));
        }
        if self.victim.eval.is_none() {
            return Err(Error::Config("victim.eval must name an evaluation set".into()));
        }
        Ok(())
    }

    /// Serialized form in a fixed key order; its hash is the config digest.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn plan(&self) -> Result<ExperimentPlan> {
        Ok(ExperimentPlan {
            strategy: self.strategy.name,
            k: compute_budget(&self.budget)?,
            epsilon: self.strategy.epsilon,
            iterations: self.strategy.iterations,
            al: ALConfig {
                rounds: self.strategy.rounds,
                seed_fraction: self.strategy.seed_fraction,
            },
            hyper: self.student,
            seeds: self.seeds.resolve(),
            config_digest: self.digest(),
        })
    }

    /// Load every artifact the config names.
    pub fn build(&self) -> Result<Experiment> {
        let task = self.task.resolve()?;
        let store = CorpusStore::load(&self.corpus.path)?;
        let eval = EvalDataset::load(self.victim.eval.as_ref().expect("validated"))?;
        eval.validate(task.num_classes)?;
        let backend = self.backend.build()?;
        let mut lookup: SentenceSet = store.sentences().iter().cloned().collect();
        merge(&mut lookup, eval.sentences().into_iter().cloned())?;
        let victim: Arc<dyn Victim> = match self.victim.kind {
            VictimKind::Remote => {
                let mut http = self.backend.http_config();
                if let Some(url) = &self.victim.url {
                    http.base_url = url.clone();
                }
                let mut v = RemoteVictim::new(http, task.num_classes);
                if let Some(id) = &self.victim.model_id {
                    v = v.with_model_id(id.clone());
                }
                Arc::new(v)
            }
            VictimKind::Simulated => match (&self.victim.model, &self.victim.train) {
                (Some(path), _) => {
                    let model = StudentModel::load(path)?;
                    if model.num_classes() != task.num_classes {
                        return Err(Error::Config(format!(
                            "victim model has {} classes, task {} has {}",
                            model.num_classes(),
                            task.name,
                            task.num_classes
                        )));
                    }
                    Arc::new(SimulatedVictim::from_model(model, backend.clone()))
                }
                (None, Some(path)) => {
                    let train = EvalDataset::load(path)?;
                    train.validate(task.num_classes)?;
                    let hyper = TrainHyper {
                        epochs: self.victim.epochs,
                        seed: self.victim.seed,
                        ..TrainHyper::default()
                    };
                    Arc::new(make_simulated_victim(
                        &train.pairs(),
                        &train,
                        backend.clone(),
                        task.num_classes,
                        &hyper,
                    )?)
                }
                (None, None) => {
                    return Err(Error::Config(
                        "simulated victim needs victim.model or victim.train".into(),
                    ));
                }
            },
        };
        let pool = QueryPool::original(&store);
        Ok(Experiment {
            plan: self.plan()?,
            task,
            pool,
            lookup,
            backend,
            victim,
            eval,
        })
    }
}

fn merge(set: &mut SentenceSet, extra: impl IntoIterator<Item = crate::corpus::Sentence>) -> Result<()> {
    for s in extra {
        match set.sentence(s.id) {
            Ok(existing) if existing.text != s.text => {
                return Err(Error::Inconsistent(format!(
                    "id {} names different texts in the corpus and the evaluation set",
                    s.id
                )))
            }
            Ok(_) => {}
            Err(_) => set.insert(s),
        }
    }
    Ok(())
}

/// A loaded experiment, ready to run.
pub struct Experiment {
    pub plan: ExperimentPlan,
    pub task: TaskSpec,
    pub pool: QueryPool,
    pub lookup: SentenceSet,
    pub backend: Arc<dyn InferenceBackend>,
    pub victim: Arc<dyn Victim>,
    pub eval: EvalDataset,
}

impl Experiment {
    pub fn resources(&self) -> ExperimentResources<'_> {
        ExperimentResources {
            task: &self.task,
            pool: &self.pool,
            lookup: &self.lookup,
            backend: self.backend.as_ref(),
            victim: self.victim.as_ref(),
            eval: &self.eval,
        }
    }

    pub fn run(&self) -> Result<MetricsReport> {
        eval::run_plan(&self.resources(), &self.plan)
    }
}
