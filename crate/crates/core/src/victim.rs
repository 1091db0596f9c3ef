//! Hard-label access to victim models under a query budget.

use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{HttpConfig, InferenceBackend, PromptTemplate};
use crate::corpus::{Sentence, SentenceLookup};
use crate::error::{Error, Result};
use crate::filter::QueryPool;
use crate::http::JsonClient;
use crate::student::{self, LabeledPair, StudentModel, TrainHyper};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimResponse {
    pub query_id: u64,
    pub label: usize,
    pub latency: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub query_id: u64,
    pub label: usize,
}

/// Tracks every label bought from the victim against the budget `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLedger {
    budget_k: usize,
    log: Vec<LedgerEntry>,
}

impl QueryLedger {
    pub fn new(budget_k: usize) -> Self {
        QueryLedger {
            budget_k,
            log: Vec::new(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget_k
    }

    pub fn spent(&self) -> usize {
        self.log.len()
    }

    pub fn remaining(&self) -> usize {
        self.budget_k - self.log.len()
    }

    pub fn log(&self) -> &[LedgerEntry] {
        &self.log
    }

    pub fn labeled_pairs(&self) -> Vec<LabeledPair> {
        self.log
            .iter()
            .map(|e| LabeledPair {
                query_id: e.query_id,
                label: e.label,
            })
            .collect()
    }

    /// Fails when `n` more queries would overrun the budget.
    pub fn check(&self, n: usize) -> Result<()> {
        if n > self.remaining() {
            Err(Error::BudgetExhausted {
                spent: self.spent(),
                budget: self.budget_k,
                requested: n,
            })
        } else {
            Ok(())
        }
    }

    fn record(&mut self, entries: impl IntoIterator<Item = LedgerEntry>) {
        self.log.extend(entries);
        debug_assert!(self.log.len() <= self.budget_k);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub num_classes: usize,
    pub label_names: Vec<String>,
    pub prompt: PromptTemplate,
    /// Instruction for chat-model victims; `[batch_size]` is substituted.
    #[serde(default)]
    pub chat_instruction: Option<String>,
}

pub const HATE_SPEECH_INSTRUCTION: &str = "You are now working as a hate speech detector. \
Next, I will give you [batch_size] sentences. You need to indicate whether it contains hate speech. \
If it contains hate speech, output \"Hate\", otherwise output \"Nohate\". \
The required format is one output per line and the beginning of each output is numbered sequentially. \
Sentences:";

impl TaskSpec {
    pub fn new(name: impl Into<String>, label_names: Vec<String>, prompt: PromptTemplate) -> Result<Self> {
        let t = TaskSpec {
            name: name.into(),
            num_classes: label_names.len(),
            label_names,
            prompt,
            chat_instruction: None,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidValue(format!(
                "task {} needs at least two classes",
                self.name
            )));
        }
        if self.label_names.len() != self.num_classes {
            return Err(Error::InvalidValue(format!(
                "task {} has {} label names for {} classes",
                self.name,
                self.label_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }

    fn with_names(name: &str, labels: &[&str], prompt: PromptTemplate) -> Self {
        TaskSpec {
            name: name.into(),
            num_classes: labels.len(),
            label_names: labels.iter().map(|s| s.to_string()).collect(),
            prompt,
            chat_instruction: None,
        }
    }

    pub fn hate_speech() -> Self {
        let mut t = Self::with_names("hate_speech", &["Nohate", "Hate"], PromptTemplate::hate_speech());
        t.chat_instruction = Some(HATE_SPEECH_INSTRUCTION.into());
        t
    }

    pub fn sst2() -> Self {
        Self::with_names("sst2", &["negative", "positive"], PromptTemplate::movie_review())
    }

    pub fn imdb() -> Self {
        Self::with_names("imdb", &["negative", "positive"], PromptTemplate::movie_review())
    }

    pub fn ag_news() -> Self {
        Self::with_names(
            "ag_news",
            &["World", "Sports", "Business", "Sci/Tech"],
            PromptTemplate::news(),
        )
    }

    /// Case-insensitive lookup of a label name.
    pub fn label_index(&self, token: &str) -> Option<usize> {
        self.label_names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(token))
    }
}

/// A black-box classifier that only reveals hard labels.
pub trait Victim: Send + Sync {
    fn num_classes(&self) -> usize;

    /// Largest number of sentences per `classify` call.
    fn max_batch(&self) -> usize {
        64
    }

    fn classify(&self, batch: &[&Sentence]) -> Result<Vec<usize>>;
}

/// Label `queries` through the victim, charging the ledger batch by batch.
/// The whole request is checked against the budget before any call.
pub fn query_victim<L: SentenceLookup + ?Sized>(
    victim: &dyn Victim,
    queries: &QueryPool,
    lookup: &L,
    ledger: &mut QueryLedger,
) -> Result<Vec<VictimResponse>> {
    ledger.check(queries.len())?;
    let sentences = queries.bind(lookup)?;
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(victim.max_batch().max(1)) {
        let started = Instant::now();
        let labels = victim.classify(chunk).map_err(|e| match e {
            Error::Parse { .. } | Error::VictimUnavailable { .. } | Error::BudgetExhausted { .. } => e,
            other => Error::VictimUnavailable {
                message: other.to_string(),
                answered: ledger.spent(),
            },
        })?;
        let latency = started.elapsed();
        if labels.len() != chunk.len() {
            return Err(Error::VictimUnavailable {
                message: format!("{} labels returned for {} queries", labels.len(), chunk.len()),
                answered: ledger.spent(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= victim.num_classes()) {
            return Err(Error::VictimUnavailable {
                message: format!("label {bad} outside {} classes", victim.num_classes()),
                answered: ledger.spent(),
            });
        }
        ledger.record(chunk.iter().zip(&labels).map(|(s, &label)| LedgerEntry {
            query_id: s.id,
            label,
        }));
        out.extend(chunk.iter().zip(labels).map(|(s, label)| VictimResponse {
            query_id: s.id,
            label,
            latency,
        }));
    }
    Ok(out)
}

/// In-process victim: a linear probe whose probabilities never leave the adapter.
pub struct SimulatedVictim {
    model: StudentModel,
    backend: Arc<dyn InferenceBackend>,
}

impl std::fmt::Debug for SimulatedVictim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimulatedVictim")
            .field("num_classes", &self.model.num_classes())
            .field("dim", &self.model.dim())
            .finish()
    }
}

impl SimulatedVictim {
    pub fn from_model(model: StudentModel, backend: Arc<dyn InferenceBackend>) -> Self {
        SimulatedVictim { model, backend }
    }
}

impl Victim for SimulatedVictim {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn classify(&self, batch: &[&Sentence]) -> Result<Vec<usize>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        self.backend
            .embed_batch(batch)?
            .iter()
            .map(|e| Ok(self.model.predict(e)?.label))
            .collect()
    }
}

/// Train a linear-probe victim on labeled data; every class must appear.
pub fn make_simulated_victim<L: SentenceLookup + ?Sized>(
    train_pairs: &[LabeledPair],
    lookup: &L,
    backend: Arc<dyn InferenceBackend>,
    num_classes: usize,
    hyper: &TrainHyper,
) -> Result<SimulatedVictim> {
    for c in 0..num_classes {
        if !train_pairs.iter().any(|p| p.label == c) {
            return Err(Error::DegenerateTraining(format!(
                "class {c} has no training examples"
            )));
        }
    }
    let model = student::train_student(train_pairs, lookup, backend.as_ref(), num_classes, hyper)?;
    Ok(SimulatedVictim { model, backend })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub texts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub labels: Vec<usize>,
}

/// Victim behind `POST /classify`.
#[derive(Debug)]
pub struct RemoteVictim {
    client: JsonClient,
    num_classes: usize,
    model_id: Option<String>,
}

impl RemoteVictim {
    pub fn new(config: HttpConfig, num_classes: usize) -> Self {
        RemoteVictim {
            client: JsonClient::new(config),
            num_classes,
            model_id: None,
        }
    }

    /// Address a specific model registered on the server (e.g. by `/train`).
    pub fn with_model_id(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = Some(model_id.into());
        self
    }
}

impl Victim for RemoteVictim {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn max_batch(&self) -> usize {
        self.client.config.max_batch
    }

    fn classify(&self, batch: &[&Sentence]) -> Result<Vec<usize>> {
        let req = ClassifyRequest {
            texts: batch.iter().map(|s| s.text.clone()).collect(),
            model_id: self.model_id.clone(),
        };
        let resp: ClassifyResponse = self.client.post("/classify", &req)?;
        Ok(resp.labels)
    }
}

/// Build the numbered instruction prompt for a chat-model victim.
pub fn format_chat_batch(task: &TaskSpec, queries: &[&str], max_batch: usize) -> Result<String> {
    if queries.is_empty() {
        return Err(Error::InvalidBatch("empty chat batch".into()));
    }
    if queries.len() > max_batch {
        return Err(Error::InvalidBatch(format!(
            "{} sentences exceed the chat batch limit of {max_batch}",
            queries.len()
        )));
    }
    let instruction = task
        .chat_instruction
        .as_deref()
        .ok_or_else(|| Error::Config(format!("task {} has no chat instruction", task.name)))?;
    let mut out = instruction.replace("[batch_size]", &queries.len().to_string());
    for (i, q) in queries.iter().enumerate() {
        out.push('\n');
        out.push_str(&format!("{}. {}", i + 1, q.trim()));
    }
    Ok(out)
}

fn numbered_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*[(\[]?\s*(\d+)\s*[.):\]\-]*\s*(.*?)\s*$").unwrap())
}

/// Extract `n` sequentially numbered labels. Lines without a leading number
/// are ignored; numbering style, case, quotes and trailing punctuation are
/// tolerated.
pub fn parse_chat_response(text: &str, n: usize, task: &TaskSpec) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidBatch("expected at least one label".into()));
    }
    let mut out = Vec::with_capacity(n);
    let fail = |message: String, out: &Vec<usize>| Error::Parse {
        message,
        recovered: out.clone(),
    };
    for line in text.lines() {
        let Some(caps) = numbered_line().captures(line) else {
            continue;
        };
        let index: usize = caps[1]
            .parse()
            .map_err(|_| fail(format!("bad line number in {line:?}"), &out))?;
        if out.len() == n {
            return Err(fail(format!("more than {n} numbered lines"), &out));
        }
        if index != out.len() + 1 {
            return Err(fail(
                format!("expected line {}, found {index}", out.len() + 1),
                &out,
            ));
        }
        let token = caps[2].trim_matches(|c: char| c.is_whitespace() || "\"'`*.,;!".contains(c));
        let label = task
            .label_index(token)
            .ok_or_else(|| fail(format!("unknown label {token:?} on line {index}"), &out))?;
        out.push(label);
    }
    if out.len() != n {
        return Err(fail(format!("found {} of {n} labels", out.len()), &out));
    }
    Ok(out)
}

/// Sends a prompt to a chat model and returns its reply text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Victim that is a general chat model driven by the task's instruction.
pub struct ChatVictim<T: ChatTransport> {
    task: TaskSpec,
    transport: T,
    max_batch: usize,
}

impl<T: ChatTransport> ChatVictim<T> {
    pub fn new(task: TaskSpec, transport: T, max_batch: usize) -> Result<Self> {
        task.validate()?;
        if task.chat_instruction.is_none() {
            return Err(Error::Config(format!(
                "task {} has no chat instruction",
                task.name
            )));
        }
        if max_batch == 0 {
            return Err(Error::InvalidValue("chat batch limit must be at least 1".into()));
        }
        Ok(ChatVictim {
            task,
            transport,
            max_batch,
        })
    }
}

impl<T: ChatTransport> Victim for ChatVictim<T> {
    fn num_classes(&self) -> usize {
        self.task.num_classes
    }

    fn max_batch(&self) -> usize {
        self.max_batch
    }

    fn classify(&self, batch: &[&Sentence]) -> Result<Vec<usize>> {
        let texts: Vec<&str> = batch.iter().map(|s| s.text.as_str()).collect();
        let prompt = format_chat_batch(&self.task, &texts, self.max_batch)?;
        let reply = self.transport.complete(&prompt)?;
        parse_chat_response(&reply, batch.len(), &self.task)
    }
}
