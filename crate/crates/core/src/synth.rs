//! Synthetic session corpora with planted dependency structure.
//!
//! Items are grouped by topic, item `t * M + j` being the `j`-th item of
//! topic `t`. Every session interleaves intent threads, each thread walking
//! its topic's item ring with a fixed stride. Items within a thread depend on
//! each other; adjacent items from different threads do not. Reviews are bags
//! of words drawn from the item's topic vocabulary, disjoint across topics.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::graph::{RigRule, SessionGraph};
use crate::ingest::{split_train_test, Bundle, Case, CorpusStats, ItemCatalog, Session, BUNDLE_VERSION};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

const EPOCH_START: i64 = 1_400_000_000;
const TWO_YEARS: i64 = 2 * 365 * 86_400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_topics: usize,
    pub items_per_topic: usize,
    pub vocab_per_topic: usize,
    pub session_count: usize,
    /// Session lengths are uniform on `[min_len, max_len]`.
    pub min_len: usize,
    pub max_len: usize,
    /// Chance that the next item comes from a different thread.
    pub interleave_prob: f64,
    pub threads: usize,
    pub review_tokens: usize,
    /// Share of sessions, latest first, placed two years later to form the test split.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_topics: 8,
            items_per_topic: 30,
            vocab_per_topic: 40,
            session_count: 2000,
            min_len: 4,
            max_len: 10,
            interleave_prob: 0.5,
            threads: 2,
            review_tokens: 20,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub const KEYS: &'static [&'static str] = &[
        "num_topics",
        "items_per_topic",
        "vocab_per_topic",
        "session_count",
        "min_len",
        "max_len",
        "interleave_prob",
        "threads",
        "review_tokens",
        "test_fraction",
        "seed",
    ];

    pub fn apply(&mut self, kv: &KvConfig) -> Result<()> {
        kv.reject_unknown(Self::KEYS)?;
        kv.read_into("num_topics", &mut self.num_topics)?;
        kv.read_into("items_per_topic", &mut self.items_per_topic)?;
        kv.read_into("vocab_per_topic", &mut self.vocab_per_topic)?;
        kv.read_into("session_count", &mut self.session_count)?;
        kv.read_into("min_len", &mut self.min_len)?;
        kv.read_into("max_len", &mut self.max_len)?;
        kv.read_into("interleave_prob", &mut self.interleave_prob)?;
        kv.read_into("threads", &mut self.threads)?;
        kv.read_into("review_tokens", &mut self.review_tokens)?;
        kv.read_into("test_fraction", &mut self.test_fraction)?;
        kv.read_into("seed", &mut self.seed)?;
        self.validate()
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("num_topics", self.num_topics);
        kv.set("items_per_topic", self.items_per_topic);
        kv.set("vocab_per_topic", self.vocab_per_topic);
        kv.set("session_count", self.session_count);
        kv.set("min_len", self.min_len);
        kv.set("max_len", self.max_len);
        kv.set("interleave_prob", self.interleave_prob);
        kv.set("threads", self.threads);
        kv.set("review_tokens", self.review_tokens);
        kv.set("test_fraction", self.test_fraction);
        kv.set("seed", self.seed);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_topics", self.num_topics),
            ("items_per_topic", self.items_per_topic),
            ("vocab_per_topic", self.vocab_per_topic),
            ("session_count", self.session_count),
            ("min_len", self.min_len),
            ("threads", self.threads),
            ("review_tokens", self.review_tokens),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.max_len < self.min_len {
            return Err(Error::Config("max_len must be at least min_len".into()));
        }
        if self.threads > self.num_topics {
            return Err(Error::Config("each thread needs its own topic".into()));
        }
        if !(0.0..=1.0).contains(&self.interleave_prob) {
            return Err(Error::Config("interleave_prob must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn num_items(&self) -> usize {
        self.num_topics * self.items_per_topic
    }

    pub fn topic_of(&self, item: u32) -> u32 {
        item / self.items_per_topic as u32
    }
}

/// Generated sessions with the thread of every position and the true
/// dependency pairs of every session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub sessions: Vec<Vec<u32>>,
    pub threads: Vec<Vec<u32>>,
    pub edges: Vec<BTreeSet<(u32, u32)>>,
    pub topics: Vec<u32>,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub struct SynthCorpus {
    pub bundle: Bundle,
    pub truth: GroundTruth,
}

fn word(topic: usize, k: usize) -> String {
    format!("topic{topic}word{k}")
}

/// Every ordered pair of distinct items at positions `t1 < t2` in the same thread.
pub fn thread_pairs(items: &[u32], threads: &[u32]) -> BTreeSet<(u32, u32)> {
    let mut out = BTreeSet::new();
    for t1 in 0..items.len() {
        for t2 in t1 + 1..items.len() {
            if threads[t1] == threads[t2] && items[t1] != items[t2] {
                out.insert((items[t1], items[t2]));
            }
        }
    }
    out
}

fn generate_session(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (Vec<u32>, Vec<u32>) {
    let m = spec.items_per_topic;
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let topics = sample(rng, spec.num_topics, spec.threads).into_vec();
    let mut pos: Vec<usize> = (0..spec.threads).map(|_| rng.gen_range(0..m)).collect();
    let stride: Vec<usize> = (0..spec.threads).map(|_| rng.gen_range(1..=2)).collect();
    let mut current = rng.gen_range(0..spec.threads);
    let mut items = Vec::with_capacity(len);
    let mut threads = Vec::with_capacity(len);
    for step in 0..len {
        if step > 0 && spec.threads > 1 && rng.gen_bool(spec.interleave_prob) {
            let other = rng.gen_range(0..spec.threads - 1);
            current = if other >= current { other + 1 } else { other };
        }
        items.push((topics[current] * m + pos[current]) as u32);
        threads.push(current as u32);
        pos[current] = (pos[current] + stride[current]) % m;
    }
    (items, threads)
}

/// Deterministic in `spec`; each session draws from its own stream.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut review_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ids = Vec::with_capacity(spec.num_items());
    let mut docs = Vec::with_capacity(spec.num_items());
    let mut topics = Vec::with_capacity(spec.num_items());
    for t in 0..spec.num_topics {
        for j in 0..spec.items_per_topic {
            ids.push(format!("item{:06}", t * spec.items_per_topic + j));
            let doc: Vec<String> = (0..spec.review_tokens)
                .map(|_| word(t, review_rng.gen_range(0..spec.vocab_per_topic)))
                .collect();
            docs.push(doc.join(" "));
            topics.push(t as u32);
        }
    }
    let catalog = ItemCatalog::new(ids, docs)?;

    let n_test = (spec.session_count as f64 * spec.test_fraction).round() as usize;
    let n_train = spec.session_count - n_test;
    let mut sessions = Vec::with_capacity(spec.session_count);
    let mut thread_tags = Vec::with_capacity(spec.session_count);
    let mut edges = Vec::with_capacity(spec.session_count);
    let mut dated = Vec::with_capacity(spec.session_count);
    for s in 0..spec.session_count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(s as u64 + 1);
        let (items, threads) = generate_session(spec, &mut rng);
        edges.push(thread_pairs(&items, &threads));
        let offset = if s < n_train { 0 } else { TWO_YEARS };
        dated.push(Session {
            items: items.clone(),
            start_time: EPOCH_START + offset + 600 * s as i64,
        });
        sessions.push(items);
        thread_tags.push(threads);
    }
    let (train, test) = split_train_test(&dated);
    let interactions = sessions.iter().map(Vec::len).sum();
    let bundle = Bundle {
        version: BUNDLE_VERSION,
        case: Case::One,
        catalog,
        train,
        test,
        stats: CorpusStats {
            interactions,
            malformed_lines: 0,
            sessions_built: spec.session_count,
        },
        oracle_topics: Some(topics.iter().map(|&t| Some(t)).collect()),
    };
    let truth = GroundTruth {
        spec: spec.clone(),
        sessions,
        threads: thread_tags,
        edges,
        topics,
    };
    Ok(SynthCorpus { bundle, truth })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeScore {
    pub true_positives: usize,
    pub predicted: usize,
    pub actual: usize,
    pub precision: f64,
    pub recall: f64,
}

impl EdgeScore {
    fn finish(mut self) -> Self {
        self.precision = ratio(self.true_positives, self.predicted);
        self.recall = ratio(self.true_positives, self.actual);
        self
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub aig: EdgeScore,
    pub rig: EdgeScore,
}

/// Micro-averaged precision and recall of both graph constructions against
/// the true dependency pairs. `topics` is indexed by item.
pub fn dependency_recovery(sessions: &[Vec<u32>], truth: &[BTreeSet<(u32, u32)>], topics: &[Option<u32>]) -> Recovery {
    assert_eq!(sessions.len(), truth.len(), "one ground-truth set per session");
    let mut aig = EdgeScore::default();
    let mut rig = EdgeScore::default();
    for (session, gold) in sessions.iter().zip(truth) {
        let graph = SessionGraph::<f64>::build(session, topics, RigRule::SameTopic);
        for (score, edges) in [(&mut aig, graph.aig_item_edges()), (&mut rig, graph.rig_item_edges())] {
            score.true_positives += edges.intersection(gold).count();
            score.predicted += edges.len();
            score.actual += gold.len();
        }
    }
    Recovery {
        aig: aig.finish(),
        rig: rig.finish(),
    }
}
