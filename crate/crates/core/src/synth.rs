//! Synthetic two-class task with known structure, used for end-to-end runs
//! that need no inference service.
//!
//! Task-relevant sentences mention the keyword and carry class-conditional
//! Gaussian embeddings with means at `±separation/2` along the first axis.
//! Off-task sentences sit around the class-0 mean shifted along the second
//! axis, so they are cheap to query but say little about the boundary.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backend::{write_embedding_cache, Embedding};
use crate::corpus::{CorpusStore, Sentence};
use crate::error::{Error, Result};
use crate::eval::{EvalDataset, LabeledText};
use crate::hash::{fnv1a, mix_seed};
use crate::student::{train_on_embeddings, StudentModel, TrainHyper};

pub const VICTIM_TRAIN_OFFSET: u64 = 1_000_000;
pub const EVAL_OFFSET: u64 = 2_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dim: usize,
    pub pool_size: usize,
    pub relevant_fraction: f64,
    /// Distance between the class means, in units of the noise scale.
    pub separation: f64,
    /// Offset of the off-task cluster along the second axis.
    pub off_task_shift: f64,
    pub victim_train: usize,
    pub eval_size: usize,
    pub victim_epochs: usize,
    pub keyword: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 8,
            pool_size: 2000,
            relevant_fraction: 0.1,
            separation: 3.0,
            off_task_shift: 4.0,
            victim_train: 500,
            eval_size: 1000,
            victim_epochs: 30,
            keyword: "hate".into(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidValue("synthetic dim must be at least 2".into()));
        }
        if !(self.relevant_fraction > 0.0 && self.relevant_fraction <= 1.0) {
            return Err(Error::InvalidValue(format!(
                "relevant_fraction {} outside (0, 1]",
                self.relevant_fraction
            )));
        }
        if self.pool_size == 0 || self.victim_train < 2 || self.eval_size == 0 {
            return Err(Error::InvalidValue("synthetic set sizes must be positive".into()));
        }
        if self.pool_size as u64 >= VICTIM_TRAIN_OFFSET
            || self.victim_train as u64 >= EVAL_OFFSET - VICTIM_TRAIN_OFFSET
        {
            return Err(Error::InvalidValue(
                "synthetic set too large for its id range".into(),
            ));
        }
        if self.keyword.trim().is_empty() || self.keyword.contains(char::is_whitespace) {
            return Err(Error::InvalidValue("keyword must be a single word".into()));
        }
        Ok(())
    }
}

const RELEVANT_SUBJECTS: &[&str] = &[
    "some users",
    "these trolls",
    "many posters",
    "a few commenters",
    "several accounts",
];
const RELEVANT_VERBS: &[&str] = &["{kw}", "really {kw}", "openly {kw}", "loudly {kw}"];
const RELEVANT_OBJECTS: &[&str] = &[
    "the new neighbors",
    "that group",
    "those outsiders",
    "people like them",
    "the visitors",
];
const OFF_SUBJECTS: &[&str] = &[
    "the committee",
    "a local team",
    "the museum",
    "our garden club",
    "the river authority",
];
const OFF_VERBS: &[&str] = &["announced", "published", "reviewed", "scheduled", "restored"];
const OFF_OBJECTS: &[&str] = &[
    "a new timetable",
    "the annual report",
    "several old bridges",
    "its spring program",
    "the harbor lights",
];

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

#[derive(Debug, Clone)]
pub struct SynthTask {
    pub config: SynthConfig,
    pub corpus: CorpusStore,
    /// Ids of corpus sentences that mention the keyword.
    pub relevant: Vec<u64>,
    pub embeddings: Vec<(u64, Embedding)>,
    pub victim_train: EvalDataset,
    pub eval: EvalDataset,
    pub victim: StudentModel,
}

struct Gaussians {
    dim: usize,
    half: f64,
    shift: f64,
}

impl Gaussians {
    fn class(&self, rng: &mut ChaCha8Rng, label: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(rng)).collect();
        v[0] += if label == 1 { self.half } else { -self.half };
        v
    }

    fn off_task(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut v = self.class(rng, 0);
        v[1] += self.shift;
        v
    }
}

/// Deterministic in `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<SynthTask> {
    config.validate()?;
    let g = Gaussians {
        dim: config.dim,
        half: config.separation / 2.0,
        shift: config.off_task_shift,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, fnv1a(b"synth")));
    let n_rel =
        ((config.pool_size as f64 * config.relevant_fraction).round() as usize).clamp(1, config.pool_size);
    let mut is_relevant: Vec<bool> = (0..config.pool_size).map(|i| i < n_rel).collect();
    is_relevant.shuffle(&mut rng);

    let mut sentences = Vec::with_capacity(config.pool_size);
    let mut embeddings = Vec::new();
    let mut relevant = Vec::new();
    for (i, &rel) in is_relevant.iter().enumerate() {
        let id = i as u64;
        let (text, v) = if rel {
            relevant.push(id);
            let label = rng.random_range(0..2);
            let verb = pick(&mut rng, RELEVANT_VERBS).replace("{kw}", &config.keyword);
            let text = format!(
                "{} {verb} {} in post {id}",
                pick(&mut rng, RELEVANT_SUBJECTS),
                pick(&mut rng, RELEVANT_OBJECTS)
            );
            (text, g.class(&mut rng, label))
        } else {
            let text = format!(
                "{} {} {} in entry {id}",
                pick(&mut rng, OFF_SUBJECTS),
                pick(&mut rng, OFF_VERBS),
                pick(&mut rng, OFF_OBJECTS)
            );
            (text, g.off_task(&mut rng))
        };
        sentences.push(Sentence::new(id, text));
        embeddings.push((id, Embedding::from_f64(&v)?));
    }
    let corpus_text: String = sentences.iter().map(|s| format!("{}\n", s.text)).collect();
    let corpus = CorpusStore::from_sentences(sentences, fnv1a(corpus_text.as_bytes()))?;

    let mut labeled = |offset: u64, n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<LabeledText>> {
        let mut items = Vec::with_capacity(n);
        for i in 0..n {
            let id = offset + i as u64;
            let label = i % 2;
            embeddings.push((id, Embedding::from_f64(&g.class(rng, label))?));
            items.push(LabeledText {
                id,
                text: format!("labeled sample {id}"),
                label,
            });
        }
        Ok(items)
    };
    let train_items = labeled(VICTIM_TRAIN_OFFSET, config.victim_train, &mut rng)?;
    let eval_items = labeled(EVAL_OFFSET, config.eval_size, &mut rng)?;

    let lookup: std::collections::HashMap<u64, &Embedding> =
        embeddings.iter().map(|(id, e)| (*id, e)).collect();
    let xs: Vec<Embedding> = train_items.iter().map(|t| lookup[&t.id].clone()).collect();
    let ys: Vec<usize> = train_items.iter().map(|t| t.label).collect();
    let hyper = TrainHyper {
        epochs: config.victim_epochs,
        seed: config.seed,
        ..TrainHyper::default()
    };
    let victim = train_on_embeddings(&xs, &ys, 2, &hyper)?.model;

    Ok(SynthTask {
        config: config.clone(),
        corpus,
        relevant,
        embeddings,
        victim_train: EvalDataset::new(train_items)?,
        eval: EvalDataset::new(eval_items)?,
        victim,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPaths {
    pub corpus_text: PathBuf,
    pub corpus: PathBuf,
    pub embeddings: PathBuf,
    pub victim_train: PathBuf,
    pub eval: PathBuf,
    pub victim_model: PathBuf,
    pub config: PathBuf,
}

impl SynthTask {
    /// Experiment config pointing at the files written by [`SynthTask::write`].
    pub fn experiment_toml(&self, k: usize) -> String {
        format!(
            r#"[task]
name = "hate_speech"

[corpus]
path = "corpus.jsonl"

[backend]
kind = "deterministic"
embeddings = "embeddings.bin"
keywords = ["{kw}"]
dim = {dim}

[strategy]
name = "meaeq"

[budget]
mode = "absolute"
absolute_k = {k}

[victim]
model = "victim.bin"
eval = "eval.jsonl"
"#,
            kw = self.config.keyword,
            dim = self.config.dim,
        )
    }

    pub fn write(&self, dir: impl AsRef<Path>, k: usize) -> Result<SynthPaths> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = SynthPaths {
            corpus_text: dir.join("corpus.txt"),
            corpus: dir.join("corpus.jsonl"),
            embeddings: dir.join("embeddings.bin"),
            victim_train: dir.join("victim_train.jsonl"),
            eval: dir.join("eval.jsonl"),
            victim_model: dir.join("victim.bin"),
            config: dir.join("experiment.toml"),
        };
        let text: String = self
            .corpus
            .sentences()
            .iter()
            .map(|s| format!("{}\n", s.text))
            .collect();
        std::fs::write(&paths.corpus_text, text).map_err(|e| Error::io(&paths.corpus_text, e))?;
        self.corpus.save(&paths.corpus)?;
        write_embedding_cache(
            &paths.embeddings,
            self.config.dim,
            self.embeddings.iter().map(|(id, e)| (*id, e)),
        )?;
        self.victim_train.save(&paths.victim_train)?;
        self.eval.save(&paths.eval)?;
        self.victim.save(&paths.victim_model)?;
        std::fs::write(&paths.config, self.experiment_toml(k)).map_err(|e| Error::io(&paths.config, e))?;
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{read_embedding_cache, DeterministicBackend};
    use crate::corpus::{ingest, IngestOptions};
    use crate::student::StudentModel;

    fn small() -> SynthConfig {
        SynthConfig {
            pool_size: 300,
            victim_train: 200,
            eval_size: 200,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn shape_and_keyword_rule() {
        let t = generate(&small()).unwrap();
        assert_eq!(t.corpus.len(), 300);
        assert_eq!(t.relevant.len(), 30);
        let rule = DeterministicBackend::new(8, 0, &["hate"]).unwrap();
        for s in t.corpus.sentences() {
            assert_eq!(rule.matches(&s.text), t.relevant.contains(&s.id), "{}", s.text);
        }
        assert_eq!(t.embeddings.len(), 300 + 200 + 200);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.victim, b.victim);
        let c = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.embeddings, c.embeddings);
    }

    #[test]
    fn victim_is_accurate_on_held_out_data() {
        for seed in 0..10 {
            let t = generate(&SynthConfig {
                separation: 4.0,
                seed,
                ..small()
            })
            .unwrap();
            let lookup: std::collections::HashMap<u64, &Embedding> =
                t.embeddings.iter().map(|(id, e)| (*id, e)).collect();
            let hits = t
                .eval
                .items()
                .iter()
                .filter(|it| t.victim.predict(lookup[&it.id]).unwrap().label == it.label)
                .count();
            assert!(hits as f64 / t.eval.len() as f64 >= 0.95, "seed {seed}: {hits}");
        }
    }

    #[test]
    fn files_round_trip_and_text_survives_ingest() {
        let t = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = t.write(dir.path(), 30).unwrap();
        let re = ingest(&paths.corpus_text, &IngestOptions::default()).unwrap();
        assert_eq!(re.sentences(), t.corpus.sentences());
        assert_eq!(
            CorpusStore::load(&paths.corpus).unwrap().sentences(),
            t.corpus.sentences()
        );
        let (dim, embs) = read_embedding_cache(&paths.embeddings).unwrap();
        assert_eq!(dim, 8);
        assert_eq!(embs, t.embeddings);
        let loaded = StudentModel::load(&paths.victim_model).unwrap();
        assert_eq!(loaded.weights(), t.victim.weights());
        assert_eq!(loaded.bias(), t.victim.bias());
        let cfg = crate::experiment::ExperimentConfig::load(&paths.config, &[]).unwrap();
        assert_eq!(cfg.plan().unwrap().k, 30);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&SynthConfig { dim: 1, ..small() }).is_err());
        assert!(generate(&SynthConfig {
            relevant_fraction: 0.0,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            keyword: "two words".into(),
            ..small()
        })
        .is_err());
    }
}
