//! Review-interaction parsing, preprocessing and the corpus bundle format.
//!
//! The pipeline is: parse newline-delimited review records, drop rare items,
//! cut each user's history into fixed epoch-anchored windows, split by time
//! into train and test, then expand sessions into prefix/label examples.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const DEFAULT_WINDOW_DAYS: i64 = 7;
pub const BUNDLE_VERSION: u32 = 1;
pub const BUNDLE_FILE: &str = "bundle.json";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub review_text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub items: Vec<u32>,
    pub start_time: i64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceExample {
    pub prefix: Vec<u32>,
    pub label: u32,
}

/// Item id ↔ dense index map plus the aggregated review document of every item.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemCatalog {
    item_ids: Vec<String>,
    review_docs: Vec<String>,
    #[serde(skip)]
    index_of: HashMap<String, u32>,
}

impl ItemCatalog {
    pub fn new(item_ids: Vec<String>, review_docs: Vec<String>) -> Result<Self> {
        if item_ids.len() != review_docs.len() {
            return Err(Error::Data(format!(
                "{} item ids but {} review documents",
                item_ids.len(),
                review_docs.len()
            )));
        }
        let mut catalog = Self {
            item_ids,
            review_docs,
            index_of: HashMap::new(),
        };
        catalog.rebuild_index()?;
        Ok(catalog)
    }

    fn rebuild_index(&mut self) -> Result<()> {
        self.index_of.clear();
        for (i, id) in self.item_ids.iter().enumerate() {
            if self.index_of.insert(id.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate item id {id}")));
            }
        }
        Ok(())
    }

    /// Number of items `m`.
    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn index_of(&self, item_id: &str) -> Option<u32> {
        self.index_of.get(item_id).copied()
    }

    pub fn item_id(&self, index: u32) -> &str {
        &self.item_ids[index as usize]
    }

    pub fn review_doc(&self, index: u32) -> &str {
        &self.review_docs[index as usize]
    }

    pub fn review_docs(&self) -> &[String] {
        &self.review_docs
    }
}

/// Parses newline-delimited JSON review records. Lines that fail to parse or
/// lack a required field are counted and skipped; blank lines are ignored.
pub fn parse_reviews<R: Read>(reader: R) -> Result<(Vec<Interaction>, usize)> {
    #[derive(Deserialize)]
    struct Record {
        #[serde(rename = "reviewerID")]
        reviewer_id: String,
        asin: String,
        #[serde(rename = "unixReviewTime")]
        unix_review_time: i64,
        #[serde(rename = "reviewText", default)]
        review_text: Option<String>,
    }

    let mut interactions = Vec::new();
    let mut errors = 0;
    for line in BufReader::new(reader).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(&line) {
            Ok(r) if r.unix_review_time > 0 && !r.asin.is_empty() => interactions.push(Interaction {
                user_id: r.reviewer_id,
                item_id: r.asin,
                timestamp: r.unix_review_time,
                review_text: r.review_text.unwrap_or_default(),
            }),
            _ => errors += 1,
        }
    }
    Ok((interactions, errors))
}

/// Opens a review dump, transparently decompressing gzip input.
pub fn parse_review_file(path: &Path) -> Result<(Vec<Interaction>, usize)> {
    let mut file = BufReader::new(File::open(path)?);
    let is_gzip = file.fill_buf()?.starts_with(&[0x1f, 0x8b]);
    if is_gzip {
        parse_reviews(GzDecoder::new(file))
    } else {
        parse_reviews(file)
    }
}

/// Keeps interactions whose item occurs at least `min_count` times in the input.
/// Single pass: counts are not recomputed after filtering.
pub fn filter_min_count(interactions: &[Interaction], min_count: usize) -> Vec<Interaction> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for it in interactions {
        *counts.entry(it.item_id.as_str()).or_default() += 1;
    }
    interactions
        .iter()
        .filter(|it| counts[it.item_id.as_str()] >= min_count)
        .cloned()
        .collect()
}

/// Builds the catalog from the given interactions: items sorted by id, each
/// with all of its reviews concatenated in timestamp order.
pub fn build_catalog(interactions: &[Interaction]) -> ItemCatalog {
    let mut by_item: BTreeMap<&str, Vec<(i64, usize)>> = BTreeMap::new();
    for (pos, it) in interactions.iter().enumerate() {
        by_item
            .entry(it.item_id.as_str())
            .or_default()
            .push((it.timestamp, pos));
    }
    let mut ids = Vec::with_capacity(by_item.len());
    let mut docs = Vec::with_capacity(by_item.len());
    for (id, mut reviews) in by_item {
        reviews.sort();
        let doc = reviews
            .iter()
            .map(|&(_, pos)| interactions[pos].review_text.trim())
            .filter(|t| !t.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        ids.push(id.to_string());
        docs.push(doc);
    }
    ItemCatalog::new(ids, docs).expect("ids are unique by construction")
}

/// Partitions each user's interactions into epoch-anchored windows of
/// `window_secs`. Output is ordered by user id, then start time.
pub fn build_sessions(interactions: &[Interaction], catalog: &ItemCatalog, window_secs: i64) -> Vec<Session> {
    assert!(window_secs > 0, "session window must be positive");
    let mut by_user: BTreeMap<&str, Vec<(i64, usize, u32)>> = BTreeMap::new();
    for (pos, it) in interactions.iter().enumerate() {
        let Some(idx) = catalog.index_of(&it.item_id) else {
            continue;
        };
        by_user
            .entry(it.user_id.as_str())
            .or_default()
            .push((it.timestamp, pos, idx));
    }
    let mut sessions = Vec::new();
    for (_, mut events) in by_user {
        // Ties in time keep input order.
        events.sort();
        let mut current: Option<(i64, Session)> = None;
        for (ts, _, idx) in events {
            let bin = ts.div_euclid(window_secs);
            match &mut current {
                Some((b, s)) if *b == bin => s.items.push(idx),
                _ => {
                    if let Some((_, s)) = current.take() {
                        sessions.push(s);
                    }
                    current = Some((
                        bin,
                        Session {
                            items: vec![idx],
                            start_time: ts,
                        },
                    ));
                }
            }
        }
        if let Some((_, s)) = current {
            sessions.push(s);
        }
    }
    sessions
}

/// Sessions starting within 365 days of the latest start time form the test
/// split. Test items never seen in training are removed, and test sessions
/// left with fewer than two items are dropped.
pub fn split_train_test(sessions: &[Session]) -> (Vec<Session>, Vec<Session>) {
    let Some(max_start) = sessions.iter().map(|s| s.start_time).max() else {
        return (Vec::new(), Vec::new());
    };
    let cutoff = max_start - 365 * SECONDS_PER_DAY;
    let (test, train): (Vec<Session>, Vec<Session>) = sessions.iter().cloned().partition(|s| s.start_time > cutoff);
    let seen: HashSet<u32> = train.iter().flat_map(|s| s.items.iter().copied()).collect();
    let test = drop_unseen(test, &seen);
    (train, test)
}

fn drop_unseen(sessions: Vec<Session>, seen: &HashSet<u32>) -> Vec<Session> {
    sessions
        .into_iter()
        .filter_map(|mut s| {
            s.items.retain(|i| seen.contains(i));
            (s.items.len() >= 2).then_some(s)
        })
        .collect()
}

/// Session-length regime: Case 1 keeps sessions with more than one item,
/// Case 2 keeps sessions with more than five.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Case {
    pub fn min_len(self) -> usize {
        match self {
            Case::One => 2,
            Case::Two => 6,
        }
    }

    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Case::One),
            2 => Ok(Case::Two),
            other => Err(Error::Config(format!("case must be 1 or 2, got {other}"))),
        }
    }
}

/// `([v1], v2), ([v1, v2], v3), …`; empty when the session is too short for `case`.
pub fn sequence_split(session: &Session, case: Case) -> Vec<SequenceExample> {
    if session.items.len() < case.min_len() {
        return Vec::new();
    }
    (1..session.items.len())
        .map(|end| SequenceExample {
            prefix: session.items[..end].to_vec(),
            label: session.items[end],
        })
        .collect()
}

pub fn split_all(sessions: &[Session], case: Case) -> Vec<SequenceExample> {
    sessions.iter().flat_map(|s| sequence_split(s, case)).collect()
}

/// Counters describing a prepared corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    /// Interactions surviving the min-count filter.
    pub interactions: usize,
    pub malformed_lines: usize,
    /// Sessions before the length filter.
    pub sessions_built: usize,
}

/// Everything downstream stages need: catalog, split sessions and provenance counters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub version: u32,
    pub case: Case,
    pub catalog: ItemCatalog,
    pub train: Vec<Session>,
    pub test: Vec<Session>,
    pub stats: CorpusStats,
    /// Known per-item topics (synthetic corpora only); `null` entries mark items without reviews.
    #[serde(default)]
    pub oracle_topics: Option<Vec<Option<u32>>>,
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub min_count: usize,
    pub window_days: i64,
    pub case: Case,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            min_count: 5,
            window_days: DEFAULT_WINDOW_DAYS,
            case: Case::One,
        }
    }
}

/// Runs the full preprocessing protocol on parsed interactions.
pub fn prepare(interactions: &[Interaction], malformed: usize, opts: &IngestOptions) -> Result<Bundle> {
    if opts.min_count == 0 {
        return Err(Error::Config("min-count must be at least 1".into()));
    }
    if opts.window_days <= 0 {
        return Err(Error::Config("window must be positive".into()));
    }
    let kept = filter_min_count(interactions, opts.min_count);
    let catalog = build_catalog(&kept);
    let sessions = build_sessions(&kept, &catalog, opts.window_days * SECONDS_PER_DAY);
    let sessions_built = sessions.len();
    let (train, test) = split_train_test(&sessions);
    let min_len = opts.case.min_len();
    let train: Vec<Session> = train.into_iter().filter(|s| s.items.len() >= min_len).collect();
    // Items seen only in train sessions dropped by the length filter are unseen.
    let seen: HashSet<u32> = train.iter().flat_map(|s| s.items.iter().copied()).collect();
    let test: Vec<Session> = drop_unseen(test, &seen)
        .into_iter()
        .filter(|s| s.items.len() >= min_len)
        .collect();
    Ok(Bundle {
        version: BUNDLE_VERSION,
        case: opts.case,
        catalog,
        train,
        test,
        stats: CorpusStats {
            interactions: kept.len(),
            malformed_lines: malformed,
            sessions_built,
        },
        oracle_topics: None,
    })
}

impl Bundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut bundle: Bundle = serde_json::from_slice(bytes)?;
        if bundle.version != BUNDLE_VERSION {
            return Err(Error::Format(format!("unsupported bundle version {}", bundle.version)));
        }
        bundle.catalog.rebuild_index()?;
        bundle.validate()?;
        Ok(bundle)
    }

    fn validate(&self) -> Result<()> {
        let m = self.catalog.len() as u32;
        for s in self.train.iter().chain(&self.test) {
            if s.items.is_empty() || s.items.iter().any(|&i| i >= m) {
                return Err(Error::Format("session references an unknown item".into()));
            }
        }
        if let Some(t) = &self.oracle_topics {
            if t.len() != self.catalog.len() {
                return Err(Error::Format("oracle topic list does not match catalog".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = File::create(dir.join(BUNDLE_FILE))?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bytes = std::fs::read(dir.join(BUNDLE_FILE))?;
        Self::from_bytes(&bytes)
    }

    pub fn train_examples(&self) -> Vec<SequenceExample> {
        split_all(&self.train, self.case)
    }

    pub fn test_examples(&self) -> Vec<SequenceExample> {
        split_all(&self.test, self.case)
    }

    /// Interaction counts per item over the training sessions.
    pub fn train_popularity(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.catalog.len()];
        for s in &self.train {
            for &i in &s.items {
                counts[i as usize] += 1;
            }
        }
        counts
    }

    pub fn report(&self) -> StatsReport {
        let sessions = self.train.len() + self.test.len();
        let session_items: usize = self.train.iter().chain(&self.test).map(|s| s.items.len()).sum();
        StatsReport {
            interactions: self.stats.interactions,
            malformed_lines: self.stats.malformed_lines,
            sessions_built: self.stats.sessions_built,
            train_sessions: self.train.len(),
            test_sessions: self.test.len(),
            train_examples: self.train_examples().len(),
            test_examples: self.test_examples().len(),
            items: self.catalog.len(),
            avg_session_length: if sessions == 0 {
                0.0
            } else {
                session_items as f64 / sessions as f64
            },
        }
    }
}

/// Corpus summary. Session counts are reported both before
/// (`*_sessions`) and after (`*_examples`) sequence splitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub interactions: usize,
    pub malformed_lines: usize,
    pub sessions_built: usize,
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub items: usize,
    /// Items in retained sessions divided by retained sessions.
    pub avg_session_length: f64,
}
