//! Corpus ingestion: raw text lines become the original query pool.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::fnv1a;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: u64,
    pub source_line: u64,
    pub text: String,
}

impl Sentence {
    pub fn new(id: u64, text: impl Into<String>) -> Self {
        Sentence {
            id,
            source_line: id,
            text: text.into(),
        }
    }

    pub fn token_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

/// Anything that can resolve a sentence id back to its text.
pub trait SentenceLookup: Sync {
    fn sentence(&self, id: u64) -> Result<&Sentence>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestOptions {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub dedup: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            min_tokens: 5,
            max_tokens: 128,
            dedup: true,
        }
    }
}

impl IngestOptions {
    fn validate(&self) -> Result<()> {
        if self.min_tokens == 0 {
            return Err(Error::InvalidValue("min_tokens must be at least 1".into()));
        }
        if self.max_tokens < self.min_tokens {
            return Err(Error::InvalidValue(format!(
                "max_tokens ({}) is below min_tokens ({})",
                self.max_tokens, self.min_tokens
            )));
        }
        Ok(())
    }
}

/// Immutable, id-ordered set of corpus sentences. Sentence ids are their
/// ordinal positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusStore {
    sentences: Vec<Sentence>,
    source_digest: u64,
}

impl CorpusStore {
    /// Build a store from sentences whose ids must equal their positions.
    pub fn from_sentences(sentences: Vec<Sentence>, source_digest: u64) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for (pos, s) in sentences.iter().enumerate() {
            if s.id != pos as u64 {
                return Err(Error::format(
                    "corpus store",
                    format!("sentence at position {pos} has id {}", s.id),
                ));
            }
            if s.text.trim().is_empty() {
                return Err(Error::format(
                    "corpus store",
                    format!("sentence {} is blank", s.id),
                ));
            }
        }
        Ok(CorpusStore {
            sentences,
            source_digest,
        })
    }

    pub fn size_p(&self) -> usize {
        self.sentences.len()
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn source_digest(&self) -> u64 {
        self.source_digest
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.sentences.iter().map(|s| s.id)
    }

    pub fn sentence_by_id(&self, id: u64) -> Result<&Sentence> {
        usize::try_from(id)
            .ok()
            .and_then(|i| self.sentences.get(i))
            .ok_or(Error::NotFound(id))
    }

    /// Write one `{id, source_line, text}` JSON record per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for s in &self.sentences {
            let line = serde_json::to_string(s).expect("sentence serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Load a store written by [`CorpusStore::save`]. The digest covers the
    /// bytes of the persisted file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::format("corpus store", e))?;
        let mut sentences = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s: Sentence = serde_json::from_str(line)
                .map_err(|e| Error::format("corpus store", format!("line {}: {e}", lineno + 1)))?;
            sentences.push(s);
        }
        Self::from_sentences(sentences, fnv1a(&bytes))
    }
}

impl SentenceLookup for CorpusStore {
    fn sentence(&self, id: u64) -> Result<&Sentence> {
        self.sentence_by_id(id)
    }
}

/// Sentences with arbitrary ids, for data that lives outside the corpus
/// (victim training sets, evaluation sets).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SentenceSet {
    by_id: BTreeMap<u64, Sentence>,
}

impl SentenceSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, s: Sentence) {
        self.by_id.insert(s.id, s);
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl FromIterator<Sentence> for SentenceSet {
    fn from_iter<I: IntoIterator<Item = Sentence>>(iter: I) -> Self {
        let mut set = SentenceSet::new();
        for s in iter {
            set.insert(s);
        }
        set
    }
}

impl SentenceLookup for SentenceSet {
    fn sentence(&self, id: u64) -> Result<&Sentence> {
        self.by_id.get(&id).ok_or(Error::NotFound(id))
    }
}

/// Lines whose first and last non-space characters are `=` are wiki headings.
fn is_heading(line: &str) -> bool {
    let t = line.trim();
    t.len() >= 2 && t.starts_with('=') && t.ends_with('=')
}

/// Split a line after `.`, `!` or `?` when followed by whitespace.
pub fn split_sentences(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = line.char_indices().peekable();
    while let Some((_, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(j, next)) = chars.peek() {
                if next.is_whitespace() {
                    let piece = line[start..j].trim();
                    if !piece.is_empty() {
                        out.push(piece);
                    }
                    start = j;
                }
            }
        }
    }
    let tail = line[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Segment corpus text held in memory. `ingest` is this plus file reading.
pub fn ingest_str(text: &str, opts: &IngestOptions) -> Result<CorpusStore> {
    opts.validate()?;
    let lines: Vec<(usize, &str)> = text.lines().enumerate().collect();
    let per_line: Vec<Vec<(u64, String)>> = lines
        .par_iter()
        .map(|&(lineno, line)| {
            if is_heading(line) {
                return Vec::new();
            }
            split_sentences(line)
                .into_iter()
                .filter(|piece| {
                    let n = piece.split_whitespace().count();
                    n >= opts.min_tokens && n <= opts.max_tokens
                })
                .map(|piece| (lineno as u64, piece.to_string()))
                .collect()
        })
        .collect();

    let mut seen = HashSet::new();
    let mut sentences = Vec::new();
    for (source_line, text) in per_line.into_iter().flatten() {
        if opts.dedup && !seen.insert(text.clone()) {
            continue;
        }
        sentences.push(Sentence {
            id: sentences.len() as u64,
            source_line,
            text,
        });
    }
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(CorpusStore {
        sentences,
        source_digest: fnv1a(text.as_bytes()),
    })
}

pub fn ingest(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<CorpusStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::format("corpus text", e))?;
    ingest_str(&text, opts)
}

/// Read a file of `{..}` JSON lines, skipping blank lines.
pub(crate) fn read_json_lines<T: serde::de::DeserializeOwned>(
    path: &Path,
    what: &'static str,
) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(what, format!("line {}: {e}", lineno + 1)))?,
        );
    }
    Ok(out)
}

pub(crate) fn write_json_lines<'a, T, I>(path: &Path, records: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format("record", e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
