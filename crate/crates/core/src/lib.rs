//! Query selection and extraction-attack machinery for black-box text classifiers.
//!
//! The pipeline runs in stages that can each be driven on their own:
//!
//! 1. [`corpus`] segments a raw text corpus into the original query pool.
//! 2. [`backend`] scores each sentence against a task prompt with an entailment
//!    model and produces sentence embeddings.
//! 3. [`filter`] keeps sentences whose entailment probability clears a threshold.
//! 4. [`cluster`] reduces the task-relevant pool to one representative per
//!    k-means cluster.
//! 5. [`victim`] sends the selected queries to a hard-label victim under a budget.
//! 6. [`student`] fits a linear softmax student on the returned labels.
//! 7. [`eval`] measures agreement and accuracy over many seeds.
//!
//! [`sampler`] holds the query-selection strategies that tie stages 3 and 4
//! together, plus the random and active-learning baselines.

pub mod backend;
pub mod cluster;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod filter;
pub mod hash;
mod http;
pub mod sampler;
pub mod student;
pub mod synth;
pub mod victim;

pub use backend::{
    CacheBackend, DeterministicBackend, Embedding, EntailmentScores, HttpBackend, HttpConfig,
    InferenceBackend, PromptTemplate,
};
pub use cluster::{ClusterModel, ReductionResult};
pub use corpus::{CorpusStore, IngestOptions, Sentence, SentenceLookup, SentenceSet};
pub use error::{Error, ErrorKind, Result};
pub use eval::{EvalDataset, LabeledText, MetricsReport};
pub use experiment::ExperimentConfig;
pub use filter::{FilterConfig, QueryPool, Stage};
pub use sampler::{ALConfig, AlStrategy, BudgetSpec};
pub use student::{LabeledPair, StudentModel, TrainHyper};
pub use victim::{QueryLedger, TaskSpec, Victim, VictimResponse};
