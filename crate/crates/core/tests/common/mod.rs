//! Reference implementations and check drivers shared by the integration
//! tests and the acceptance suite. The oracles never call the library code
//! they are compared against.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rignn::eval::{evaluate_model_top, mrr_at_k, precision_at_k, top_n, RankedResult};
use rignn::graph::{build_aig, build_rig, RigRule};
use rignn::ingest::SequenceExample;
use rignn::model::{ItemSide, ModelConfig, NeighborSource, RiGnn, Variant};
use rignn::numcore::{GradCheckOptions, GradCheckReport};
use rignn::topics::{fit_lda, purity, LdaConfig, TokenizedCorpus, TopicModel};
use rignn::train::{loss_and_grad, train, TrainConfig};
use rignn::SessionGraph;

pub type Mat = Vec<Vec<f64>>;

// ---------------------------------------------------------------- graphs

pub struct OracleGraph {
    pub nodes: Vec<u32>,
    pub aig: BTreeSet<(u32, u32)>,
    pub rig: BTreeSet<(u32, u32)>,
    /// Keyed by item pairs.
    pub a_out: BTreeMap<(u32, u32), f64>,
    pub a_in: BTreeMap<(u32, u32), f64>,
    pub b_out: BTreeMap<(u32, u32), f64>,
    pub b_in: BTreeMap<(u32, u32), f64>,
}

fn first_seen(session: &[u32], item: u32) -> usize {
    session.iter().position(|&x| x == item).unwrap()
}

type EdgeWeights = BTreeMap<(u32, u32), f64>;

/// Normalizes pair counts: `out[(u,w)] = c(u,w) / Σ_x c(u,x)`, `in[(w,u)] = c(u,w) / Σ_x c(x,w)`.
fn normalized(counts: &EdgeWeights) -> (EdgeWeights, EdgeWeights) {
    let mut out = BTreeMap::new();
    let mut inc = BTreeMap::new();
    for (&(u, w), &c) in counts {
        let from_u: f64 = counts.iter().filter(|((a, _), _)| *a == u).map(|(_, v)| v).sum();
        let into_w: f64 = counts.iter().filter(|((_, b), _)| *b == w).map(|(_, v)| v).sum();
        out.insert((u, w), c / from_u);
        inc.insert((w, u), c / into_w);
    }
    (out, inc)
}

/// Enumerates every position pair of the session.
pub fn brute_force_graph(session: &[u32], topics: &[Option<u32>]) -> OracleGraph {
    let mut nodes = Vec::new();
    for &x in session {
        if !nodes.contains(&x) {
            nodes.push(x);
        }
    }
    let mut adj = BTreeMap::new();
    let mut re = BTreeMap::new();
    for i in 0..session.len() {
        for j in 0..session.len() {
            let (u, w) = (session[i], session[j]);
            if u == w {
                continue;
            }
            if j == i + 1 {
                *adj.entry((u, w)).or_insert(0.0) += 1.0;
            }
            let same = matches!((topics[u as usize], topics[w as usize]), (Some(a), Some(b)) if a == b);
            if i < j && same && first_seen(session, u) < first_seen(session, w) {
                *re.entry((u, w)).or_insert(0.0) += 1.0;
            }
        }
    }
    let (a_out, a_in) = normalized(&adj);
    let (b_out, b_in) = normalized(&re);
    OracleGraph {
        nodes,
        aig: adj.keys().copied().collect(),
        rig: re.keys().copied().collect(),
        a_out,
        a_in,
        b_out,
        b_in,
    }
}

pub fn random_session(rng: &mut ChaCha8Rng, max_len: usize, num_items: u32) -> Vec<u32> {
    let n = rng.gen_range(1..=max_len);
    (0..n).map(|_| rng.gen_range(0..num_items)).collect()
}

pub fn random_topics(rng: &mut ChaCha8Rng, num_items: usize, num_topics: u32) -> Vec<Option<u32>> {
    (0..num_items)
        .map(|_| {
            let t = rng.gen_range(0..=num_topics);
            (t < num_topics).then_some(t)
        })
        .collect()
}

/// Compares one session against the brute-force enumerator; returns a description of the first mismatch.
pub fn graph_mismatch(session: &[u32], topics: &[Option<u32>]) -> Option<String> {
    let oracle = brute_force_graph(session, topics);
    let (nodes, a_out, a_in) = build_aig::<f64>(session);
    let (edges, b_out, b_in) = build_rig::<f64>(session, topics, RigRule::SameTopic);
    if nodes != oracle.nodes {
        return Some(format!("nodes {nodes:?} vs {:?}", oracle.nodes));
    }
    let g = SessionGraph::build(session, topics, RigRule::SameTopic);
    if g.aig_item_edges() != oracle.aig {
        return Some(format!("aig {:?} vs {:?}", g.aig_item_edges(), oracle.aig));
    }
    let rig: BTreeSet<(u32, u32)> = edges.iter().map(|&(u, w)| (nodes[u], nodes[w])).collect();
    if rig != oracle.rig {
        return Some(format!("rig {rig:?} vs {:?}", oracle.rig));
    }
    let n = nodes.len();
    for u in 0..n {
        for w in 0..n {
            let key = (nodes[u], nodes[w]);
            let pairs = [
                (a_out.get(u, w), oracle.a_out.get(&key), "a_out"),
                (a_in.get(u, w), oracle.a_in.get(&key), "a_in"),
                (b_out.get(u, w), oracle.b_out.get(&key), "b_out"),
                (b_in.get(u, w), oracle.b_in.get(&key), "b_in"),
            ];
            for (got, want, name) in pairs {
                let want = want.copied().unwrap_or(0.0);
                if (got - want).abs() > 1e-12 {
                    return Some(format!("{name}[{u},{w}] = {got} vs {want}"));
                }
            }
        }
    }
    None
}

// ---------------------------------------------------------------- model

pub fn tiny_config(layers: usize) -> ModelConfig {
    ModelConfig {
        dim: 4,
        word_dim: 5,
        heads: 2,
        key_dim: 3,
        value_dim: 2,
        layers,
        steps: 1,
        dropout: 0.0,
        max_len: 8,
        max_review_tokens: 10,
        variant: Variant::Full,
        neighbor_source: NeighborSource::Input,
    }
}

/// Random reviews over `vocab` words and the given topics.
pub fn random_items(rng: &mut ChaCha8Rng, topics: Vec<Option<u32>>, vocab: u32) -> ItemSide {
    let reviews = topics
        .iter()
        .map(|_| {
            let len = rng.gen_range(1..6);
            (0..len).map(|_| rng.gen_range(0..vocab)).collect()
        })
        .collect();
    ItemSide::new(topics, reviews).unwrap()
}

/// Re-draws every parameter uniformly in `±scale`.
pub fn randomize(model: &mut RiGnn<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for x in model.params.get_mut(id).data_mut() {
            *x = rng.gen_range(-scale..scale);
        }
    }
}

pub fn mat(model: &RiGnn<f64>, name: &str) -> Mat {
    let a = model
        .params
        .get(model.params.id(name).unwrap_or_else(|| panic!("{name}")));
    (0..a.rows()).map(|r| a.row(r).to_vec()).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `M x` for `M` of shape rows × x.len().
fn apply(m: &Mat, x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Row vector times matrix: `x M`.
fn vec_mat(x: &[f64], m: &Mat) -> Vec<f64> {
    let cols = m[0].len();
    (0..cols)
        .map(|c| x.iter().enumerate().map(|(r, v)| v * m[r][c]).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn oracle_review(model: &RiGnn<f64>, tokens: &[u32]) -> Vec<f64> {
    let cfg = model.config();
    if tokens.is_empty() {
        return vec![0.0; cfg.word_dim];
    }
    let words = mat(model, "word_embedding");
    let e: Mat = tokens.iter().map(|&t| words[t as usize].clone()).collect();
    let l = e.len();
    let mut concat: Mat = vec![Vec::new(); l];
    for k in 0..cfg.heads {
        let wq = mat(model, &format!("review.head{k}.w_q"));
        let wk = mat(model, &format!("review.head{k}.w_k"));
        let wv = mat(model, &format!("review.head{k}.w_v"));
        let q: Mat = e.iter().map(|r| vec_mat(r, &wq)).collect();
        let kk: Mat = e.iter().map(|r| vec_mat(r, &wk)).collect();
        let v: Mat = e.iter().map(|r| vec_mat(r, &wv)).collect();
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| dot(&q[i], &kk[j]) / (cfg.key_dim as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            for c in 0..cfg.value_dim {
                concat[i].push((0..l).map(|j| w[j] * v[j][c]).sum());
            }
        }
    }
    let w1 = mat(model, "review.w_1");
    let mixed: Mat = concat.iter().map(|r| vec_mat(r, &w1)).collect();
    (0..cfg.word_dim)
        .map(|c| mixed.iter().map(|r| r[c]).sum::<f64>() / l as f64)
        .collect()
}

/// One gated propagation step per configured step, node by node.
pub fn oracle_ail(model: &RiGnn<f64>, g: &OracleGraph, h_in: &Mat) -> Mat {
    let d = model.config().dim;
    let hw = mat(model, "ail.h");
    let b1 = &mat(model, "ail.b_1")[0];
    let (wz, uz) = (mat(model, "ail.w_z"), mat(model, "ail.u_z"));
    let (wr, ur) = (mat(model, "ail.w_r"), mat(model, "ail.u_r"));
    let (wo, uo) = (mat(model, "ail.w_o"), mat(model, "ail.u_o"));
    let n = g.nodes.len();
    let mut h = h_in.clone();
    for _ in 0..model.config().steps {
        let proj: Mat = h.iter().map(|r| vec_mat(r, &hw)).collect();
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let vi = g.nodes[i];
            let mut a = b1.clone();
            for j in 0..n {
                let vj = g.nodes[j];
                let wout = g.a_out.get(&(vi, vj)).copied().unwrap_or(0.0);
                let win = g.a_in.get(&(vi, vj)).copied().unwrap_or(0.0);
                for c in 0..d {
                    a[c] += wout * proj[j][c];
                    a[d + c] += win * proj[j][d + c];
                }
            }
            let hi = &h[i];
            let z: Vec<f64> = apply(&wz, &a)
                .iter()
                .zip(apply(&uz, hi))
                .map(|(x, y)| sigmoid(x + y))
                .collect();
            let r: Vec<f64> = apply(&wr, &a)
                .iter()
                .zip(apply(&ur, hi))
                .map(|(x, y)| sigmoid(x + y))
                .collect();
            let rh: Vec<f64> = r.iter().zip(hi).map(|(a, b)| a * b).collect();
            let cand: Vec<f64> = apply(&wo, &a)
                .iter()
                .zip(apply(&uo, &rh))
                .map(|(x, y)| (x + y).tanh())
                .collect();
            next.push((0..d).map(|c| (1.0 - z[c]) * hi[c] + z[c] * cand[c]).collect());
        }
        h = next;
    }
    h
}

pub fn oracle_ril(model: &RiGnn<f64>, g: &OracleGraph, h_in: &Mat, items: &ItemSide) -> Mat {
    let n = g.nodes.len();
    (0..n)
        .map(|i| {
            let vi = g.nodes[i];
            let nbrs: Vec<usize> = (0..n)
                .filter(|&j| g.rig.contains(&(vi, g.nodes[j])) || g.rig.contains(&(g.nodes[j], vi)))
                .collect();
            if nbrs.is_empty() {
                return h_in[i].clone();
            }
            let ri = oracle_review(model, &items.reviews[vi as usize]);
            let pi: Vec<f64> = nbrs
                .iter()
                .map(|&j| {
                    let vj = g.nodes[j];
                    match (items.topics[vi as usize], items.topics[vj as usize]) {
                        (Some(a), Some(b)) if a == b => cosine(&ri, &oracle_review(model, &items.reviews[vj as usize])),
                        _ => 0.0,
                    }
                })
                .collect();
            let w = softmax(&pi);
            (0..h_in[0].len())
                .map(|c| nbrs.iter().zip(&w).map(|(&j, wj)| wj * h_in[j][c]).sum())
                .collect()
        })
        .collect()
}

fn concat_rows(parts: &[Mat]) -> Mat {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}

pub fn oracle_stack(model: &RiGnn<f64>, g: &OracleGraph, base: &Mat, items: &ItemSide) -> Mat {
    let mut outputs = vec![base.clone()];
    for l in 0..model.config().layers {
        let input = if l == 0 {
            base.clone()
        } else {
            let w = mat(model, &format!("stack.proj_in{l}"));
            concat_rows(&outputs).iter().map(|r| vec_mat(r, &w)).collect()
        };
        let out = if l % 2 == 0 {
            oracle_ail(model, g, &input)
        } else {
            oracle_ril(model, g, &input, items)
        };
        outputs.push(out);
    }
    let w = mat(model, "stack.proj_out");
    concat_rows(&outputs).iter().map(|r| vec_mat(r, &w)).collect()
}

/// Soft-attention readout; `states[t]` is the representation of position `t`.
pub fn oracle_readout(model: &RiGnn<f64>, states: &Mat) -> Vec<f64> {
    let n = states.len();
    let d = model.config().dim;
    let pos = mat(model, "readout.position");
    let (w2, b2) = (mat(model, "readout.w_2"), mat(model, "readout.b_2")[0].clone());
    let (w3, w4) = (mat(model, "readout.w_3"), mat(model, "readout.w_4"));
    let b3 = mat(model, "readout.b_3")[0].clone();
    let q = mat(model, "readout.q")[0].clone();
    let mean: Vec<f64> = (0..d)
        .map(|c| states.iter().map(|s| s[c]).sum::<f64>() / n as f64)
        .collect();
    let g_mean = apply(&w4, &mean);
    let mut s = vec![0.0; d];
    for t in 0..n {
        // position p_{n-t} in one-based terms
        let x: Vec<f64> = states[t].iter().chain(&pos[n - 1 - t]).copied().collect();
        let z: Vec<f64> = apply(&w2, &x).iter().zip(&b2).map(|(a, b)| (a + b).tanh()).collect();
        let gate: Vec<f64> = apply(&w3, &z)
            .iter()
            .zip(&g_mean)
            .zip(&b3)
            .map(|((a, b), c)| sigmoid(a + b + c))
            .collect();
        let beta = dot(&q, &gate);
        for c in 0..d {
            s[c] += beta * states[t][c];
        }
    }
    s
}

pub fn oracle_logits(model: &RiGnn<f64>, prefix: &[u32], items: &ItemSide) -> Vec<f64> {
    let g = brute_force_graph(prefix, &items.topics);
    let table = mat(model, "item_embedding");
    let base: Mat = g.nodes.iter().map(|&v| table[v as usize].clone()).collect();
    let h = oracle_stack(model, &g, &base, items);
    let states: Mat = prefix
        .iter()
        .map(|v| h[g.nodes.iter().position(|x| x == v).unwrap()].clone())
        .collect();
    let s = oracle_readout(model, &states);
    table.iter().map(|row| dot(row, &s)).collect()
}

// ---------------------------------------------------------------- data

/// Twenty distinct two-item prefixes over items `0..12`, labels in `0..10`.
pub fn toy_examples() -> Vec<SequenceExample> {
    (0..20u32)
        .map(|i| SequenceExample {
            prefix: vec![i % 10, 10 + i / 10],
            label: (7 * i + i / 10) % 10,
        })
        .collect()
}

/// Forty documents: the first twenty use words `a*`, the rest words `b*`.
pub fn two_topic_documents(rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<u32>) {
    let mut docs = Vec::new();
    let mut labels = Vec::new();
    for t in 0..2u32 {
        let prefix = if t == 0 { "alpha" } else { "beta" };
        for _ in 0..20 {
            let words: Vec<String> = (0..30).map(|_| format!("{prefix}{}", rng.gen_range(0..15))).collect();
            docs.push(words.join(" "));
            labels.push(t);
        }
    }
    (docs, labels)
}

// ---------------------------------------------------------------- drivers

pub fn setup(seed: u64, layers: usize, topics: Vec<Option<u32>>) -> (RiGnn<f64>, ItemSide) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = topics.len();
    let mut model = RiGnn::<f64>::new(tiny_config(layers), m, 12, seed).unwrap();
    randomize(&mut model, &mut rng, 0.8);
    let items = random_items(&mut rng, topics, 12);
    (model, items)
}

/// Full regularized loss on three sessions, checked against central differences.
pub fn full_model_grad_check(seed: u64) -> GradCheckReport {
    let topics = vec![Some(0), Some(1), Some(0), Some(0), Some(1), Some(1), None];
    let (model, items) = setup(seed, 2, topics);
    let examples = [
        SequenceExample {
            prefix: vec![0, 1, 2, 3],
            label: 4,
        },
        SequenceExample {
            prefix: vec![4, 5, 4, 2],
            label: 0,
        },
        SequenceExample {
            prefix: vec![6, 3],
            label: 1,
        },
    ];
    let batch: Vec<&SequenceExample> = examples.iter().collect();
    let opts = GradCheckOptions {
        tolerance: 1e-4,
        ..GradCheckOptions::default()
    };
    rignn::numcore::grad_check(
        &model.params,
        |p| {
            let m = RiGnn::from_params(model.config().clone(), p.clone())?;
            let e = loss_and_grad(&m, &batch, &items, 1e-3, None)?;
            Ok((e.loss, e.grads))
        },
        &opts,
    )
    .unwrap()
}

/// Rank of `label` under descending score with ties broken by lower index.
fn brute_rank(scores: &[f64], label: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[label] || (scores[j] == scores[label] && j < label))
        .count()
}

fn brute_metrics(cases: &[(Vec<f64>, usize)], k: usize) -> (f64, f64) {
    let mut hits = 0usize;
    let mut rr = 0.0;
    for (scores, label) in cases {
        let r = brute_rank(scores, *label);
        if r <= k {
            hits += 1;
            rr += 1.0 / r as f64;
        }
    }
    let n = cases.len() as f64;
    (100.0 * hits as f64 / n, 100.0 * rr / n)
}

pub fn metric_oracle_mismatches(count: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..count {
        let m = rng.gen_range(20..40);
        let batch = rng.gen_range(1..30);
        let k = [1, 5, 10, 20][rng.gen_range(0..4)];
        let cases: Vec<(Vec<f64>, usize)> = (0..batch)
            .map(|_| {
                // coarse scores force frequent ties
                let scores = (0..m).map(|_| rng.gen_range(0..6) as f64).collect();
                (scores, rng.gen_range(0..m))
            })
            .collect();
        let results: Vec<RankedResult> = cases
            .iter()
            .map(|(s, l)| RankedResult {
                top: top_n(s, 20),
                label: *l as u32,
            })
            .collect();
        let want = brute_metrics(&cases, k);
        let got = (precision_at_k(&results, k).unwrap(), mrr_at_k(&results, k).unwrap());
        if got != want {
            bad += 1;
        }
    }
    bad
}

pub fn overfit_config() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        dim: 16,
        word_dim: 8,
        heads: 2,
        key_dim: 4,
        value_dim: 4,
        layers: 2,
        steps: 1,
        dropout: 0.0,
        max_len: 10,
        max_review_tokens: 10,
        variant: Variant::Full,
        neighbor_source: NeighborSource::Input,
    };
    let train = TrainConfig {
        learning_rate: 0.01,
        batch_size: 5,
        l2: 0.0,
        epochs: 200,
        seed: 1,
        ..TrainConfig::default()
    };
    (model, train)
}

pub fn toy_items() -> ItemSide {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let topics = (0..24).map(|i| Some(i % 3)).collect();
    random_items(&mut rng, topics, 20)
}

pub fn train_p1(examples: &[SequenceExample], items: &ItemSide, model_cfg: ModelConfig, cfg: &TrainConfig) -> f64 {
    let mut model = RiGnn::<f64>::new(model_cfg, items.num_items(), 20, cfg.seed).unwrap();
    let outcome = train(&mut model, examples, &[], items, cfg, |_| {}).unwrap();
    assert!(outcome.aborted.is_none());
    let results = evaluate_model_top(&model, examples, items, 5).unwrap();
    precision_at_k(&results, 1).unwrap()
}

/// Dominant-topic purity of LDA on the two-topic corpus for one seed.
pub fn lda_purity(seed: u64) -> (f64, TopicModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let (docs, labels) = two_topic_documents(&mut rng);
    let corpus = TokenizedCorpus::from_documents(docs.iter().map(String::as_str), 256);
    let config = LdaConfig {
        seed,
        ..LdaConfig::with_topics(2)
    };
    let model = fit_lda(&corpus, config).unwrap();
    (purity(&model.dominant, &labels), model)
}
