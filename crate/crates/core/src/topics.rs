//! Review tokenization and LDA topic extraction by collapsed Gibbs sampling.
//!
//! Each item's aggregated review document is one LDA document. After fitting,
//! every item is assigned its dominant topic, which gates edges of the
//! review-refined session graph. Items without reviews get no topic (`None`).

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ItemCatalog;

pub const DEFAULT_MAX_TOKENS: usize = 256;
pub const TOPIC_MODEL_VERSION: u32 = 1;

const STOPWORDS: &[&str] = &[
    "about",
    "above",
    "after",
    "again",
    "against",
    "all",
    "and",
    "any",
    "are",
    "aren",
    "because",
    "been",
    "before",
    "being",
    "below",
    "between",
    "both",
    "but",
    "can",
    "cannot",
    "could",
    "did",
    "didn",
    "does",
    "doesn",
    "doing",
    "don",
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
    "her",
    "here",
    "hers",
    "herself",
    "him",
    "himself",
    "his",
    "how",
    "into",
    "its",
    "itself",
    "just",
    "let",
    "more",
    "most",
    "myself",
    "nor",
    "not",
    "now",
    "off",
    "once",
    "only",
    "other",
    "our",
    "ours",
    "ourselves",
    "out",
    "over",
    "own",
    "same",
    "she",
    "should",
    "some",
    "such",
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
    "too",
    "under",
    "until",
    "very",
    "was",
    "wasn",
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
    "won",
    "would",
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
];

fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Lowercases, splits on non-alphanumeric runs, and drops tokens shorter than
/// three characters or in the built-in stopword list.
pub fn tokenize(document: &str) -> Vec<String> {
    document
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| t.chars().count() >= 3 && !is_stopword(t))
        .collect()
}

/// Per-item token-id documents over a shared vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedCorpus {
    pub vocab: Vec<String>,
    pub docs: Vec<Vec<u32>>,
}

impl TokenizedCorpus {
    /// Tokenizes every catalog document, truncating each to `max_tokens`.
    /// Word ids follow first occurrence in item order.
    pub fn from_catalog(catalog: &ItemCatalog, max_tokens: usize) -> Self {
        Self::from_documents(catalog.review_docs().iter().map(String::as_str), max_tokens)
    }

    pub fn from_documents<'a>(docs: impl IntoIterator<Item = &'a str>, max_tokens: usize) -> Self {
        let mut index: HashMap<String, u32> = HashMap::new();
        let mut vocab = Vec::new();
        let docs = docs
            .into_iter()
            .map(|doc| {
                tokenize(doc)
                    .into_iter()
                    .take(max_tokens)
                    .map(|tok| {
                        *index.entry(tok).or_insert_with_key(|k| {
                            vocab.push(k.clone());
                            (vocab.len() - 1) as u32
                        })
                    })
                    .collect()
            })
            .collect();
        Self { vocab, docs }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn doc_lengths(&self) -> Vec<usize> {
        self.docs.iter().map(Vec::len).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdaConfig {
    pub num_topics: usize,
    pub alpha: f64,
    pub beta: f64,
    pub sweeps: usize,
    pub seed: u64,
}

impl LdaConfig {
    /// `alpha = 50/T`, `beta = 0.01`, 500 sweeps.
    pub fn with_topics(num_topics: usize) -> Self {
        Self {
            num_topics,
            alpha: 50.0 / num_topics as f64,
            beta: 0.01,
            sweeps: 500,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_topics < 2 {
            return Err(Error::Config("LDA needs at least two topics".into()));
        }
        if self.sweeps == 0 {
            return Err(Error::Config("LDA needs at least one sweep".into()));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("Dirichlet priors must be positive".into()));
        }
        Ok(())
    }
}

/// Fitted LDA state plus the dominant topic of every item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    pub version: u32,
    pub config: LdaConfig,
    pub vocab: Vec<String>,
    /// `T × V`, row-major.
    pub topic_word_counts: Vec<u32>,
    /// `m × T`, row-major.
    pub doc_topic_counts: Vec<u32>,
    pub topic_totals: Vec<u32>,
    pub assignments: Vec<Vec<u32>>,
    pub dominant: Vec<Option<u32>>,
}

/// Collapsed Gibbs sampler. `fit_lda` drives it; tests step it sweep by sweep.
pub struct LdaSampler<'c> {
    corpus: &'c TokenizedCorpus,
    config: LdaConfig,
    rng: ChaCha8Rng,
    topic_word: Vec<u32>,
    doc_topic: Vec<u32>,
    topic_totals: Vec<u32>,
    assignments: Vec<Vec<u32>>,
    probs: Vec<f64>,
}

impl<'c> LdaSampler<'c> {
    pub fn new(corpus: &'c TokenizedCorpus, config: LdaConfig) -> Result<Self> {
        config.validate()?;
        if corpus.vocab_size() == 0 || corpus.total_tokens() == 0 {
            return Err(Error::Config("LDA corpus has an empty vocabulary".into()));
        }
        let t = config.num_topics;
        let v = corpus.vocab_size();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut topic_word = vec![0u32; t * v];
        let mut doc_topic = vec![0u32; corpus.docs.len() * t];
        let mut topic_totals = vec![0u32; t];
        let assignments = corpus
            .docs
            .iter()
            .enumerate()
            .map(|(d, doc)| {
                doc.iter()
                    .map(|&w| {
                        let k = rng.gen_range(0..t);
                        topic_word[k * v + w as usize] += 1;
                        doc_topic[d * t + k] += 1;
                        topic_totals[k] += 1;
                        k as u32
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            corpus,
            config,
            rng,
            topic_word,
            doc_topic,
            topic_totals,
            assignments,
            probs: vec![0.0; t],
        })
    }

    /// One full pass over every token, in document then position order.
    pub fn sweep(&mut self) {
        let t = self.config.num_topics;
        let v = self.corpus.vocab_size();
        let (alpha, beta) = (self.config.alpha, self.config.beta);
        let v_beta = v as f64 * beta;
        for (d, doc) in self.corpus.docs.iter().enumerate() {
            for (pos, &w) in doc.iter().enumerate() {
                let w = w as usize;
                let old = self.assignments[d][pos] as usize;
                self.topic_word[old * v + w] -= 1;
                self.doc_topic[d * t + old] -= 1;
                self.topic_totals[old] -= 1;

                let mut total = 0.0;
                for k in 0..t {
                    let p = (self.doc_topic[d * t + k] as f64 + alpha) * (self.topic_word[k * v + w] as f64 + beta)
                        / (self.topic_totals[k] as f64 + v_beta);
                    total += p;
                    self.probs[k] = total;
                }
                let u = self.rng.gen::<f64>() * total;
                let new = self.probs.iter().position(|&c| u < c).unwrap_or(t - 1);

                self.topic_word[new * v + w] += 1;
                self.doc_topic[d * t + new] += 1;
                self.topic_totals[new] += 1;
                self.assignments[d][pos] = new as u32;
            }
        }
    }

    /// Count matrices agree with the assignments and with each other.
    pub fn check_invariants(&self) -> Result<()> {
        let t = self.config.num_topics;
        let v = self.corpus.vocab_size();
        let total = self.corpus.total_tokens() as u64;
        let tw: u64 = self.topic_word.iter().map(|&c| c as u64).sum();
        let dt: u64 = self.doc_topic.iter().map(|&c| c as u64).sum();
        let tt: u64 = self.topic_totals.iter().map(|&c| c as u64).sum();
        if tw != total || dt != total || tt != total {
            return Err(Error::Contract(format!(
                "count sums {tw}/{dt}/{tt} differ from token total {total}"
            )));
        }
        let mut tw_check = vec![0u32; t * v];
        for (d, doc) in self.corpus.docs.iter().enumerate() {
            let mut row = vec![0u32; t];
            for (&w, &k) in doc.iter().zip(&self.assignments[d]) {
                if k as usize >= t {
                    return Err(Error::Contract(format!("assignment {k} out of range")));
                }
                row[k as usize] += 1;
                tw_check[k as usize * v + w as usize] += 1;
            }
            if row[..] != self.doc_topic[d * t..(d + 1) * t] {
                return Err(Error::Contract(format!("doc-topic row {d} is stale")));
            }
        }
        if tw_check != self.topic_word {
            return Err(Error::Contract("topic-word counts are stale".into()));
        }
        Ok(())
    }

    pub fn into_model(self) -> TopicModel {
        let t = self.config.num_topics;
        let dominant = (0..self.corpus.docs.len())
            .map(|d| {
                if self.corpus.docs[d].is_empty() {
                    None
                } else {
                    Some(dominant_topic(&self.doc_topic[d * t..(d + 1) * t], self.config.alpha))
                }
            })
            .collect();
        TopicModel {
            version: TOPIC_MODEL_VERSION,
            config: self.config,
            vocab: self.corpus.vocab.clone(),
            topic_word_counts: self.topic_word,
            doc_topic_counts: self.doc_topic,
            topic_totals: self.topic_totals,
            assignments: self.assignments,
            dominant,
        }
    }
}

pub fn fit_lda(corpus: &TokenizedCorpus, config: LdaConfig) -> Result<TopicModel> {
    let mut sampler = LdaSampler::new(corpus, config)?;
    for _ in 0..sampler.config.sweeps {
        sampler.sweep();
    }
    debug_assert!(sampler.check_invariants().is_ok());
    Ok(sampler.into_model())
}

/// Argmax of `count + alpha`; ties go to the lowest topic id.
pub fn dominant_topic(doc_topic_row: &[u32], alpha: f64) -> u32 {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (k, &c) in doc_topic_row.iter().enumerate() {
        let score = c as f64 + alpha;
        if score > best_score {
            best = k;
            best_score = score;
        }
    }
    best as u32
}

impl TopicModel {
    pub fn num_topics(&self) -> usize {
        self.config.num_topics
    }

    pub fn num_docs(&self) -> usize {
        self.assignments.len()
    }

    pub fn doc_topic_row(&self, item: usize) -> &[u32] {
        let t = self.num_topics();
        &self.doc_topic_counts[item * t..(item + 1) * t]
    }

    /// Dominant topic of an item, or `None` when its review document is empty.
    pub fn assign_dominant(&self, item: usize) -> Option<u32> {
        assert!(item < self.num_docs(), "item {item} out of range");
        if self.assignments[item].is_empty() {
            None
        } else {
            Some(dominant_topic(self.doc_topic_row(item), self.config.alpha))
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let model: TopicModel = serde_json::from_slice(bytes)?;
        if model.version != TOPIC_MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported topic model version {}",
                model.version
            )));
        }
        let t = model.config.num_topics;
        let docs = model.assignments.len();
        if model.doc_topic_counts.len() != docs * t
            || model.topic_word_counts.len() != t * model.vocab.len()
            || model.dominant.len() != docs
        {
            return Err(Error::Format("topic model arrays have inconsistent sizes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Fraction of items whose cluster's majority label matches their own label.
pub fn purity(clusters: &[Option<u32>], labels: &[u32]) -> f64 {
    assert_eq!(clusters.len(), labels.len());
    let mut table: HashMap<Option<u32>, HashMap<u32, usize>> = HashMap::new();
    for (&c, &l) in clusters.iter().zip(labels) {
        *table.entry(c).or_default().entry(l).or_default() += 1;
    }
    let hits: usize = table.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    hits as f64 / labels.len().max(1) as f64
}
