//! Ranking metrics, the S-POP and S-KNN baselines, ablation runs and the
//! paired significance test used to compare variants across seeds.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::ingest::{SequenceExample, Session};
use crate::model::{ItemSide, ModelConfig, RiGnn, Variant};
use crate::scalar::Scalar;
use crate::train::{train, Prepared, TrainConfig};

/// Ranked list length kept per example.
pub const TOP_N: usize = 20;
pub const DEFAULT_KNN: usize = 500;

/// Top-ranked items for one test example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedResult {
    pub top: Vec<u32>,
    pub label: u32,
}

impl RankedResult {
    /// 1-based rank of the label, if it made the list.
    pub fn rank(&self) -> Option<usize> {
        self.top.iter().position(|&i| i == self.label).map(|p| p + 1)
    }
}

/// Indices of the `n` best scores: descending score, ties by ascending index.
pub fn top_n<S: Scalar>(scores: &[S], n: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..scores.len() as u32).collect();
    let cmp = |a: &u32, b: &u32| {
        scores[*b as usize]
            .partial_cmp(&scores[*a as usize])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let n = n.min(idx.len());
    if n < idx.len() && n > 0 {
        idx.select_nth_unstable_by(n - 1, cmp);
        idx.truncate(n);
    }
    idx.sort_by(cmp);
    idx.truncate(n);
    idx
}

fn check(results: &[RankedResult], k: usize) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Data("no ranked results to score".into()));
    }
    if k == 0 {
        return Err(Error::Config("K must be positive".into()));
    }
    if let Some(r) = results.iter().find(|r| r.top.len() < k) {
        return Err(Error::Contract(format!(
            "ranked list of {} items is shorter than K = {k}",
            r.top.len()
        )));
    }
    Ok(())
}

/// Percentage of examples whose label is in the top `k`.
pub fn precision_at_k(results: &[RankedResult], k: usize) -> Result<f64> {
    check(results, k)?;
    let hits = results.iter().filter(|r| r.rank().is_some_and(|p| p <= k)).count();
    Ok(100.0 * hits as f64 / results.len() as f64)
}

/// Mean reciprocal rank within the top `k`, as a percentage.
pub fn mrr_at_k(results: &[RankedResult], k: usize) -> Result<f64> {
    check(results, k)?;
    let total: f64 = results
        .iter()
        .filter_map(|r| r.rank().filter(|&p| p <= k))
        .map(|p| 1.0 / p as f64)
        .sum();
    Ok(100.0 * total / results.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "P@10")]
    pub p10: f64,
    #[serde(rename = "P@20")]
    pub p20: f64,
    #[serde(rename = "MRR@10")]
    pub mrr10: f64,
    #[serde(rename = "MRR@20")]
    pub mrr20: f64,
}

/// P@10, P@20, MRR@10 and MRR@20 of a result set.
pub fn metrics(results: &[RankedResult]) -> Result<Metrics> {
    Ok(Metrics {
        p10: precision_at_k(results, 10)?,
        p20: precision_at_k(results, 20)?,
        mrr10: mrr_at_k(results, 10)?,
        mrr20: mrr_at_k(results, 20)?,
    })
}

/// Ranks every example with the model, fanning out over worker threads.
pub fn evaluate_model<S: Scalar>(
    model: &RiGnn<S>,
    examples: &[SequenceExample],
    items: &ItemSide,
) -> Result<Vec<RankedResult>> {
    evaluate_model_top(model, examples, items, TOP_N)
}

pub fn evaluate_model_top<S: Scalar>(
    model: &RiGnn<S>,
    examples: &[SequenceExample],
    items: &ItemSide,
    n: usize,
) -> Result<Vec<RankedResult>> {
    if model.num_items() < n {
        return Err(Error::Data(format!(
            "{} items cannot fill a top-{n} list",
            model.num_items()
        )));
    }
    let reviews = model.precompute_reviews(items);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(16);
    let chunk = examples.len().div_ceil(workers).max(1);
    let parts: Vec<Vec<RankedResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = examples
            .chunks(chunk)
            .map(|part| {
                let reviews = &reviews;
                scope.spawn(move || {
                    part.iter()
                        .map(|ex| RankedResult {
                            top: top_n(model.score(&ex.prefix, items, reviews).data(), n),
                            label: ex.label,
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let results: Vec<RankedResult> = parts.into_iter().flatten().collect();
    if results.iter().any(|r| r.top.len() < n) {
        return Err(Error::NonFinite("scores produced a short ranking".into()));
    }
    Ok(results)
}

/// Global popularity order: descending count, ties by ascending index.
pub fn popularity_order(counts: &[u64]) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..counts.len() as u32).collect();
    idx.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    idx
}

fn fill(mut ranked: Vec<u32>, popularity: &[u32], n: usize) -> Vec<u32> {
    let mut seen: std::collections::HashSet<u32> = ranked.iter().copied().collect();
    for &item in popularity {
        if ranked.len() >= n {
            break;
        }
        if seen.insert(item) {
            ranked.push(item);
        }
    }
    ranked.truncate(n);
    ranked
}

/// Session items by in-session frequency, then global popularity.
pub fn s_pop(prefix: &[u32], popularity: &[u32], n: usize) -> Vec<u32> {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &i in prefix {
        *counts.entry(i).or_default() += 1;
    }
    let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    fill(ranked.into_iter().map(|(i, _)| i).collect(), popularity, n)
}

/// Session-level nearest neighbors over binary item sets.
pub struct SKnn {
    sets: Vec<Vec<u32>>,
    sessions_of: HashMap<u32, Vec<usize>>,
    popularity: Vec<u32>,
    pub k_nn: usize,
}

impl SKnn {
    pub fn new(train: &[Session], popularity: Vec<u32>, k_nn: usize) -> Self {
        let mut sets = Vec::with_capacity(train.len());
        let mut sessions_of: HashMap<u32, Vec<usize>> = HashMap::new();
        for (s, session) in train.iter().enumerate() {
            let mut set = session.items.clone();
            set.sort_unstable();
            set.dedup();
            for &i in &set {
                sessions_of.entry(i).or_default().push(s);
            }
            sets.push(set);
        }
        Self {
            sets,
            sessions_of,
            popularity,
            k_nn,
        }
    }

    /// Summed neighbor similarity per item, before popularity backfill.
    pub fn scores(&self, prefix: &[u32]) -> HashMap<u32, f64> {
        let mut query = prefix.to_vec();
        query.sort_unstable();
        query.dedup();
        let mut overlap: HashMap<usize, usize> = HashMap::new();
        for i in &query {
            for &s in self.sessions_of.get(i).map_or(&[][..], Vec::as_slice) {
                *overlap.entry(s).or_default() += 1;
            }
        }
        let mut neighbors: Vec<(usize, f64)> = overlap
            .into_iter()
            .map(|(s, common)| {
                let denom = ((query.len() * self.sets[s].len()) as f64).sqrt();
                (s, common as f64 / denom)
            })
            .collect();
        neighbors.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        neighbors.truncate(self.k_nn);
        let mut votes: HashMap<u32, f64> = HashMap::new();
        for (s, sim) in neighbors {
            for &i in &self.sets[s] {
                *votes.entry(i).or_default() += sim;
            }
        }
        votes
    }

    pub fn recommend(&self, prefix: &[u32], n: usize) -> Vec<u32> {
        let mut ranked: Vec<(u32, f64)> = self.scores(prefix).into_iter().filter(|(_, w)| *w > 0.0).collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        fill(ranked.into_iter().map(|(i, _)| i).collect(), &self.popularity, n)
    }
}

pub fn evaluate_ranker(examples: &[SequenceExample], rank: impl Fn(&[u32]) -> Vec<u32>) -> Vec<RankedResult> {
    examples
        .iter()
        .map(|ex| RankedResult {
            top: rank(&ex.prefix),
            label: ex.label,
        })
        .collect()
}

/// Test metrics of one trained variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Trains and tests each variant under every seed, with identical
/// configuration otherwise. Test metrics use the best-by-validation parameters.
pub fn run_ablations(
    data: &Prepared,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<AblationRecord>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for &variant in variants {
            let cfg = ModelConfig {
                variant,
                ..model_config.clone()
            };
            let tc = TrainConfig {
                seed,
                ..train_config.clone()
            };
            let mut model = RiGnn::<f64>::new(cfg.clone(), data.num_items(), data.vocab_size(), seed)?;
            let outcome = train(&mut model, &data.train, &data.valid, &data.items, &tc, |_| {})?;
            if let Some(reason) = outcome.aborted {
                return Err(Error::NonFinite(format!("{variant} seed {seed}: {reason}")));
            }
            let best = RiGnn::from_params(cfg, outcome.best)?;
            let metrics = metrics(&evaluate_model(&best, &data.test, &data.items)?)?;
            log::info!("{variant} seed {seed}: MRR@10 {:.3}", metrics.mrr10);
            out.push(AblationRecord {
                variant,
                seed,
                best_epoch: outcome.best_epoch,
                metrics,
            });
        }
    }
    Ok(out)
}

/// Paired t-test on per-seed differences `a - b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// P-value for the alternative `mean(a - b) > 0`.
    pub p_greater: f64,
    pub p_two_sided: f64,
}

pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Data("paired test needs two equal samples of size ≥ 2".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let (t, p_greater, p_two_sided) = if se == 0.0 {
        match mean.partial_cmp(&0.0) {
            Some(Ordering::Greater) => (f64::INFINITY, 0.0, 0.0),
            Some(Ordering::Less) => (f64::NEG_INFINITY, 1.0, 0.0),
            _ => (0.0, 0.5, 1.0),
        }
    } else {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Data(e.to_string()))?;
        (t, 1.0 - dist.cdf(t), 2.0 * (1.0 - dist.cdf(t.abs())))
    };
    Ok(PairedTest {
        n: diffs.len(),
        mean_diff: mean,
        t,
        p_greater,
        p_two_sided,
    })
}
