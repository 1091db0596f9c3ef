//! Entailment scoring and sentence embedding providers.
//!
//! Three implementations share the [`InferenceBackend`] trait:
//!
//! * [`DeterministicBackend`] derives everything from the sentence text, for
//!   tests and synthetic tasks.
//! * [`CacheBackend`] serves precomputed scores and embeddings keyed by
//!   sentence id, loaded from the cache file formats below.
//! * [`HttpBackend`] talks to the inference sidecar.
//!
//! Score cache: one JSON record per line,
//! `{"id":7,"p_neutral":0.03,"p_entailment":0.95,"p_contradiction":0.02}`.
//!
//! Embedding cache: `b"MQEMB1\0\0"`, `u32` dim, `u64` count, then per record a
//! `u64` id followed by `dim` `f32` values, all little-endian.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{read_json_lines, write_json_lines, Sentence};
use crate::error::{Error, Result};
use crate::hash::fnv1a;
pub use crate::http::HttpConfig;
use crate::http::JsonClient;

const SIMPLEX_TOL: f64 = 1e-6;
pub const EMBEDDING_MAGIC: &[u8; 8] = b"MQEMB1\0\0";

/// Probabilities of the three entailment relations for one premise/hypothesis pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntailmentScores {
    pub neutral: f64,
    pub entailment: f64,
    pub contradiction: f64,
}

impl EntailmentScores {
    pub fn new(neutral: f64, entailment: f64, contradiction: f64) -> Result<Self> {
        let s = EntailmentScores {
            neutral,
            entailment,
            contradiction,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.neutral, self.entailment, self.contradiction];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidDistribution(format!(
                "entailment scores {parts:?} outside [0, 1]"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidDistribution(format!(
                "entailment scores sum to {sum}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidValue(format!(
                "embedding dimension {} is below 2",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("embedding has non-finite values".into()));
        }
        Ok(Embedding { values })
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Hypothesis text paired with every premise during task filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidValue("prompt template is empty".into()));
        }
        Ok(PromptTemplate(text))
    }

    /// `This sentence is about <topic>.`
    pub fn about(topic: &str) -> Result<Self> {
        Self::new(format!("This sentence is about {}.", topic.trim()))
    }

    pub fn hate_speech() -> Self {
        PromptTemplate("This is a hate speech".into())
    }

    /// Shared by the SST-2 and IMDB sentiment tasks.
    pub fn movie_review() -> Self {
        PromptTemplate("This is a movie review.".into())
    }

    pub fn news() -> Self {
        PromptTemplate("This is a news.".into())
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        PromptTemplate::new(s)
    }
}

impl From<PromptTemplate> for String {
    fn from(p: PromptTemplate) -> String {
        p.0
    }
}

/// Resolve the first error of a batch in input order.
fn collect_ordered<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(results.len());
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => out.push(v),
            Err(e) => {
                return Err(Error::BatchItem {
                    index,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(out)
}

pub trait InferenceBackend: Send + Sync {
    fn score(&self, premise: &Sentence, hypothesis: &PromptTemplate) -> Result<EntailmentScores>;

    fn embed(&self, sentence: &Sentence) -> Result<Embedding>;

    /// Element `i` equals `embed(sentences[i])`.
    fn embed_batch(&self, sentences: &[&Sentence]) -> Result<Vec<Embedding>> {
        if sentences.is_empty() {
            return Err(Error::InvalidBatch("empty embedding batch".into()));
        }
        collect_ordered(sentences.par_iter().map(|s| self.embed(s)).collect())
    }

    fn score_batch(
        &self,
        premises: &[&Sentence],
        hypothesis: &PromptTemplate,
    ) -> Result<Vec<EntailmentScores>> {
        if premises.is_empty() {
            return Err(Error::InvalidBatch("empty scoring batch".into()));
        }
        collect_ordered(premises.par_iter().map(|s| self.score(s, hypothesis)).collect())
    }
}

/// Backend whose outputs are pure functions of the text and a seed.
///
/// Embeddings are `dim` standard-normal draws from a generator seeded with
/// `fnv1a(text) ^ seed`, scaled to unit length. Entailment is 0.99 when the
/// premise contains any keyword (case-insensitive), 0.01 otherwise, with the
/// remaining mass split between neutral and contradiction.
#[derive(Debug, Clone)]
pub struct DeterministicBackend {
    dim: usize,
    seed: u64,
    keywords: Vec<String>,
}

impl DeterministicBackend {
    pub const HIT: f64 = 0.99;
    pub const MISS: f64 = 0.01;

    pub fn new<S: AsRef<str>>(dim: usize, seed: u64, keywords: &[S]) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidValue(format!(
                "embedding dimension {dim} is below 2"
            )));
        }
        Ok(DeterministicBackend {
            dim,
            seed,
            keywords: keywords
                .iter()
                .map(|k| k.as_ref().to_lowercase())
                .filter(|k| !k.is_empty())
                .collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    pub fn matches(&self, text: &str) -> bool {
        let lower = text.to_lowercase();
        self.keywords.iter().any(|k| lower.contains(k.as_str()))
    }

    pub fn embed_text(&self, text: &str) -> Embedding {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(text.as_bytes()) ^ self.seed);
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        } else {
            v[0] = 1.0;
        }
        Embedding::from_f64(&v).expect("finite unit vector")
    }
}

impl InferenceBackend for DeterministicBackend {
    fn score(&self, premise: &Sentence, _hypothesis: &PromptTemplate) -> Result<EntailmentScores> {
        let p = if self.matches(&premise.text) {
            Self::HIT
        } else {
            Self::MISS
        };
        let rest = (1.0 - p) / 2.0;
        Ok(EntailmentScores {
            neutral: rest,
            entailment: p,
            contradiction: rest,
        })
    }

    fn embed(&self, sentence: &Sentence) -> Result<Embedding> {
        Ok(self.embed_text(&sentence.text))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: u64,
    pub p_neutral: f64,
    pub p_entailment: f64,
    pub p_contradiction: f64,
}

impl ScoreRecord {
    pub fn new(id: u64, s: &EntailmentScores) -> Self {
        ScoreRecord {
            id,
            p_neutral: s.neutral,
            p_entailment: s.entailment,
            p_contradiction: s.contradiction,
        }
    }

    pub fn scores(&self) -> Result<EntailmentScores> {
        EntailmentScores::new(self.p_neutral, self.p_entailment, self.p_contradiction)
    }
}

/// Write a score cache sorted by id. Values are written in shortest
/// round-trip form, so reading them back yields the identical `f64`.
pub fn write_score_cache(path: impl AsRef<Path>, scores: &HashMap<u64, EntailmentScores>) -> Result<()> {
    let mut records: Vec<ScoreRecord> = scores.iter().map(|(&id, s)| ScoreRecord::new(id, s)).collect();
    records.sort_by_key(|r| r.id);
    write_json_lines(path.as_ref(), &records)
}

pub fn read_score_cache(path: impl AsRef<Path>) -> Result<HashMap<u64, EntailmentScores>> {
    let records: Vec<ScoreRecord> = read_json_lines(path.as_ref(), "score cache")?;
    let mut out = HashMap::with_capacity(records.len());
    for r in records {
        let s = r
            .scores()
            .map_err(|e| Error::format("score cache", format!("id {}: {e}", r.id)))?;
        if out.insert(r.id, s).is_some() {
            return Err(Error::format("score cache", format!("duplicate id {}", r.id)));
        }
    }
    Ok(out)
}

pub fn write_embedding_cache<'a, I>(path: impl AsRef<Path>, dim: usize, records: I) -> Result<()>
where
    I: IntoIterator<Item = (u64, &'a Embedding)>,
{
    let path = path.as_ref();
    let records: Vec<(u64, &Embedding)> = records.into_iter().collect();
    let dim32 = u32::try_from(dim).map_err(|_| Error::InvalidValue(format!("dimension {dim} too large")))?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut put = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    put(EMBEDDING_MAGIC)?;
    put(&dim32.to_le_bytes())?;
    put(&(records.len() as u64).to_le_bytes())?;
    for (id, e) in records {
        if e.dim() != dim {
            return Err(Error::Shape {
                expected: dim,
                found: e.dim(),
            });
        }
        put(&id.to_le_bytes())?;
        for v in e.values() {
            put(&v.to_le_bytes())?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Returns `(dim, records)` in file order.
pub fn read_embedding_cache(path: impl AsRef<Path>) -> Result<(usize, Vec<(u64, Embedding)>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_embedding_cache(&bytes)
}

pub fn decode_embedding_cache(bytes: &[u8]) -> Result<(usize, Vec<(u64, Embedding)>)> {
    let bad = |m: String| Error::format("embedding cache", m);
    if bytes.len() < 20 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(bad("missing MQEMB1 header".into()));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let record_len = 8 + 4 * dim;
    let expected = (count as u128) * (record_len as u128) + 20;
    if expected != bytes.len() as u128 {
        return Err(bad(format!(
            "{count} records of dim {dim} need {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(count as usize);
    for chunk in bytes[20..].chunks_exact(record_len) {
        let id = u64::from_le_bytes(chunk[..8].try_into().unwrap());
        let values = chunk[8..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let e = Embedding::new(values).map_err(|e| bad(format!("id {id}: {e}")))?;
        out.push((id, e));
    }
    Ok((dim, out))
}

/// Precomputed scores and embeddings keyed by sentence id. Scores are bound
/// to the prompt they were computed with, so the hypothesis is not consulted.
#[derive(Debug, Clone, Default)]
pub struct CacheBackend {
    dim: Option<usize>,
    scores: HashMap<u64, EntailmentScores>,
    embeddings: HashMap<u64, Embedding>,
}

impl CacheBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_scores(mut self, scores: HashMap<u64, EntailmentScores>) -> Self {
        self.scores = scores;
        self
    }

    pub fn with_embeddings(mut self, embeddings: impl IntoIterator<Item = (u64, Embedding)>) -> Result<Self> {
        for (id, e) in embeddings {
            match self.dim {
                Some(d) if d != e.dim() => {
                    return Err(Error::Shape {
                        expected: d,
                        found: e.dim(),
                    })
                }
                _ => self.dim = Some(e.dim()),
            }
            if self.embeddings.insert(id, e).is_some() {
                return Err(Error::format("embedding cache", format!("duplicate id {id}")));
            }
        }
        Ok(self)
    }

    pub fn load(scores: Option<&Path>, embeddings: Option<&Path>) -> Result<Self> {
        let mut backend = CacheBackend::new();
        if let Some(p) = scores {
            backend.scores = read_score_cache(p)?;
        }
        if let Some(p) = embeddings {
            let (dim, records) = read_embedding_cache(p)?;
            backend = backend.with_embeddings(records)?;
            backend.dim.get_or_insert(dim);
        }
        Ok(backend)
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn scores(&self) -> &HashMap<u64, EntailmentScores> {
        &self.scores
    }

    pub fn embedding(&self, id: u64) -> Option<&Embedding> {
        self.embeddings.get(&id)
    }
}

impl InferenceBackend for CacheBackend {
    fn score(&self, premise: &Sentence, _hypothesis: &PromptTemplate) -> Result<EntailmentScores> {
        self.scores
            .get(&premise.id)
            .copied()
            .ok_or(Error::MissingScore(premise.id))
    }

    fn embed(&self, sentence: &Sentence) -> Result<Embedding> {
        self.embeddings
            .get(&sentence.id)
            .cloned()
            .ok_or(Error::MissingEmbedding(sentence.id))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NliRequest {
    pub premise: String,
    pub hypothesis: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NliBatchRequest {
    pub pairs: Vec<NliRequest>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NliBatchResponse {
    pub results: Vec<EntailmentScores>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub dim: usize,
    pub vectors: Vec<Vec<f32>>,
}

/// Client for the inference sidecar (`/nli`, `/nli_batch`, `/embed`).
#[derive(Debug)]
pub struct HttpBackend {
    client: JsonClient,
    dim: OnceLock<usize>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        HttpBackend {
            client: JsonClient::new(config),
            dim: OnceLock::new(),
        }
    }

    pub fn health_check(&self) -> Result<()> {
        self.client.healthy()
    }

    /// Dimension seen in the first embedding response, if any.
    pub fn dim(&self) -> Option<usize> {
        self.dim.get().copied()
    }

    fn embed_texts(&self, texts: Vec<String>) -> Result<Vec<Embedding>> {
        let n = texts.len();
        let resp: EmbedResponse = self.client.post("/embed", &EmbedRequest { texts })?;
        let bad = |message: String| Error::Backend { message, retries: 0 };
        if resp.vectors.len() != n {
            return Err(bad(format!(
                "/embed returned {} vectors for {n} texts",
                resp.vectors.len()
            )));
        }
        let dim = *self.dim.get_or_init(|| resp.dim);
        if resp.dim != dim {
            return Err(bad(format!(
                "/embed dimension changed from {dim} to {}",
                resp.dim
            )));
        }
        resp.vectors
            .into_iter()
            .map(|v| {
                if v.len() != dim {
                    return Err(bad(format!(
                        "/embed row of length {} in dim {dim} reply",
                        v.len()
                    )));
                }
                Embedding::new(v).map_err(|e| bad(e.to_string()))
            })
            .collect()
    }
}

impl InferenceBackend for HttpBackend {
    fn score(&self, premise: &Sentence, hypothesis: &PromptTemplate) -> Result<EntailmentScores> {
        let s: EntailmentScores = self.client.post(
            "/nli",
            &NliRequest {
                premise: premise.text.clone(),
                hypothesis: hypothesis.text().to_string(),
            },
        )?;
        s.validate().map_err(|e| Error::Backend {
            message: format!("/nli: {e}"),
            retries: 0,
        })?;
        Ok(s)
    }

    fn embed(&self, sentence: &Sentence) -> Result<Embedding> {
        Ok(self.embed_texts(vec![sentence.text.clone()])?.remove(0))
    }

    fn embed_batch(&self, sentences: &[&Sentence]) -> Result<Vec<Embedding>> {
        if sentences.is_empty() {
            return Err(Error::InvalidBatch("empty embedding batch".into()));
        }
        let size = self.client.config.max_batch.max(1);
        let chunks: Vec<Result<Vec<Embedding>>> = sentences
            .par_chunks(size)
            .map(|chunk| self.embed_texts(chunk.iter().map(|s| s.text.clone()).collect()))
            .collect();
        let mut out = Vec::with_capacity(sentences.len());
        for (i, c) in chunks.into_iter().enumerate() {
            match c {
                Ok(v) => out.extend(v),
                Err(e) => {
                    return Err(Error::BatchItem {
                        index: i * size,
                        source: Box::new(e),
                    })
                }
            }
        }
        Ok(out)
    }

    fn score_batch(
        &self,
        premises: &[&Sentence],
        hypothesis: &PromptTemplate,
    ) -> Result<Vec<EntailmentScores>> {
        if premises.is_empty() {
            return Err(Error::InvalidBatch("empty scoring batch".into()));
        }
        let size = self.client.config.max_batch.max(1);
        let chunks: Vec<Result<Vec<EntailmentScores>>> = premises
            .par_chunks(size)
            .map(|chunk| {
                let req = NliBatchRequest {
                    pairs: chunk
                        .iter()
                        .map(|s| NliRequest {
                            premise: s.text.clone(),
                            hypothesis: hypothesis.text().to_string(),
                        })
                        .collect(),
                };
                let resp: NliBatchResponse = self.client.post("/nli_batch", &req)?;
                if resp.results.len() != chunk.len() {
                    return Err(Error::Backend {
                        message: format!(
                            "/nli_batch returned {} results for {} pairs",
                            resp.results.len(),
                            chunk.len()
                        ),
                        retries: 0,
                    });
                }
                for s in &resp.results {
                    s.validate().map_err(|e| Error::Backend {
                        message: format!("/nli_batch: {e}"),
                        retries: 0,
                    })?;
                }
                Ok(resp.results)
            })
            .collect();
        let mut out = Vec::with_capacity(premises.len());
        for (i, c) in chunks.into_iter().enumerate() {
            match c {
                Ok(v) => out.extend(v),
                Err(e) => {
                    return Err(Error::BatchItem {
                        index: i * size,
                        source: Box::new(e),
                    })
                }
            }
        }
        Ok(out)
    }
}
