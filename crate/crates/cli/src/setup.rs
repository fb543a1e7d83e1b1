//! Corpus loading, model construction and prompt sampling shared by every
//! subcommand.

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use ngdraft_core::drafters::{
    unigram_from_predictor, BigramTable, ExtendedBigramTable, UnigramMetric, DEFAULT_TABLE_K,
};
use ngdraft_core::model::{Predictor, TableModel, ToyTransformer};
use ngdraft_core::strategy::DraftTables;
use ngdraft_core::vocab::{load_documents, seeded_rng, DocSplit, Vocab, VocabMode};
use ngdraft_core::{TokenId, TokenSeq};
use rand::Rng;

use crate::CliError;

pub const BIGRAM_FILE: &str = "bigram.ngtb";
pub const EXTENDED_FILE: &str = "extended.ngtb";
pub const WEIGHTS_FILE: &str = "model.spdr";

/// `table:<order>` or `toy:<seed>:<dim>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSpec {
    Table { order: usize },
    Toy { seed: u64, dim: usize },
}

impl FromStr for ModelSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad =
            || format!("invalid model spec {s:?}: expected table:<order> or toy:<seed>:<dim>");
        match parts.as_slice() {
            ["table", order] => Ok(ModelSpec::Table {
                order: order.parse().map_err(|_| bad())?,
            }),
            ["toy", seed, dim] => Ok(ModelSpec::Toy {
                seed: seed.parse().map_err(|_| bad())?,
                dim: dim.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::Table { order } => write!(f, "table:{order}"),
            ModelSpec::Toy { seed, dim } => write!(f, "toy:{seed}:{dim}"),
        }
    }
}

pub enum Model {
    Table(TableModel),
    Toy(Box<ToyTransformer>),
}

impl Model {
    pub fn predictor(&self) -> &dyn Predictor {
        match self {
            Model::Table(m) => m,
            Model::Toy(m) => m.as_ref(),
        }
    }
}

/// One `--corpus` file split into documents.
pub struct Dataset {
    pub name: String,
    pub docs: Vec<TokenSeq>,
}

/// Everything loaded from the corpus and model flags.
pub struct Workspace {
    pub vocab: Vocab,
    pub datasets: Vec<Dataset>,
    pub model: Model,
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub paths: Vec<PathBuf>,
    pub vocab_mode: VocabMode,
    pub per_line: bool,
    pub model: ModelSpec,
    /// Load toy weights from this file instead of initializing from the seed.
    pub weights: Option<PathBuf>,
}

fn dataset_names(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| {
            p.file_stem()
                .map_or_else(|| "corpus".to_owned(), |s| s.to_string_lossy().into_owned())
        })
        .collect();
    stems
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if stems.iter().filter(|t| *t == s).count() > 1 {
                format!("{i}-{s}")
            } else {
                s.clone()
            }
        })
        .collect()
}

impl Workspace {
    pub fn load(config: &CorpusConfig) -> Result<Self, CliError> {
        if config.paths.is_empty() {
            return Err(CliError::Config("at least one --corpus is required".into()));
        }
        let split = if config.per_line {
            DocSplit::Line
        } else {
            DocSplit::File
        };
        let mut texts = Vec::new();
        for path in &config.paths {
            let docs = load_documents(path, split)
                .with_context(|| format!("reading corpus {}", path.display()))?;
            texts.push(docs);
        }
        let all: String = texts
            .iter()
            .flatten()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join("\n");
        let vocab = Vocab::build(&all, config.vocab_mode)?;

        let datasets: Vec<Dataset> = dataset_names(&config.paths)
            .into_iter()
            .zip(&texts)
            .map(|(name, docs)| Dataset {
                name,
                docs: docs
                    .iter()
                    .map(|d| vocab.tokenize(d))
                    .filter(|d| !d.is_empty())
                    .collect(),
            })
            .collect();
        if let Some(d) = datasets.iter().find(|d| d.docs.is_empty()) {
            return Err(CliError::Config(format!(
                "corpus {} holds no tokens",
                d.name
            )));
        }

        let model = match (config.model, &config.weights) {
            (ModelSpec::Toy { .. }, Some(path)) => {
                let file = File::open(path)
                    .with_context(|| format!("opening weights {}", path.display()))?;
                let m = ToyTransformer::read_from(BufReader::new(file))?;
                if m.vocab_size() != vocab.size() {
                    return Err(CliError::Config(format!(
                        "weights have vocab {} but the corpus vocab is {}",
                        m.vocab_size(),
                        vocab.size()
                    )));
                }
                Model::Toy(Box::new(m))
            }
            (ModelSpec::Toy { seed, dim }, None) => {
                Model::Toy(Box::new(ToyTransformer::init(seed, vocab.size(), dim)?))
            }
            (ModelSpec::Table { order }, _) => {
                let corpus: TokenSeq = datasets
                    .iter()
                    .flat_map(|d| d.docs.iter().flatten().copied())
                    .collect();
                Model::Table(TableModel::from_corpus(&corpus, order, vocab.size())?)
            }
        };
        Ok(Workspace {
            vocab,
            datasets,
            model,
        })
    }

    pub fn predictor(&self) -> &dyn Predictor {
        self.model.predictor()
    }

    /// `--table-k` if given (must not exceed the vocabulary), otherwise the
    /// default capped at the vocabulary size.
    pub fn table_k(&self, requested: Option<usize>) -> usize {
        requested.unwrap_or(DEFAULT_TABLE_K.min(self.vocab.size()))
    }

    pub fn derive_tables(&self, k: usize, depth: usize) -> Result<DraftTables, CliError> {
        let p = self.predictor();
        let bigram = BigramTable::derive(p, k)?;
        let extended = ExtendedBigramTable::derive(p, &bigram, depth)?;
        Ok(DraftTables {
            unigram: unigram_from_predictor(p, UnigramMetric::default()).ok(),
            bigram: Some(bigram),
            extended: Some(extended),
        })
    }

    pub fn load_tables(&self, dir: &Path) -> Result<DraftTables, CliError> {
        let open = |name: &str| {
            let path = dir.join(name);
            File::open(&path)
                .map(BufReader::new)
                .with_context(|| format!("opening table {}", path.display()))
        };
        let bigram = BigramTable::read_from(open(BIGRAM_FILE)?)?;
        let extended = ExtendedBigramTable::read_from(open(EXTENDED_FILE)?)?;
        for size in [bigram.vocab_size(), extended.vocab_size()] {
            if size != self.vocab.size() {
                return Err(CliError::Config(format!(
                    "tables in {} have vocab {size} but the corpus vocab is {}",
                    dir.display(),
                    self.vocab.size()
                )));
            }
        }
        Ok(DraftTables {
            unigram: unigram_from_predictor(self.predictor(), UnigramMetric::default()).ok(),
            bigram: Some(bigram),
            extended: Some(extended),
        })
    }

    pub fn stop_token(&self, word: Option<&str>) -> Result<Option<TokenId>, CliError> {
        word.map(|w| {
            self.vocab.id_of(w).ok_or_else(|| {
                CliError::Config(format!("stop token {w:?} is not in the vocabulary"))
            })
        })
        .transpose()
    }
}

/// Deterministic prompts: a random document, then a random window of
/// `len` tokens (the whole document if it is shorter).
pub fn sample_prompts(dataset: &Dataset, count: usize, len: usize, seed: u64) -> Vec<TokenSeq> {
    let mut rng = seeded_rng(seed);
    (0..count)
        .map(|_| {
            let doc = &dataset.docs[rng.gen_range(0..dataset.docs.len())];
            let len = len.clamp(1, doc.len());
            let start = rng.gen_range(0..=doc.len() - len);
            doc[start..start + len].to_vec()
        })
        .collect()
}
