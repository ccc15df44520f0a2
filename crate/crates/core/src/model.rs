//! The session model: multi-head review encoder, gated adjacency layer,
//! review-attention layer, densely connected stack, position-aware session
//! readout and softmax scoring over the item table.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::graph::{RigRule, SessionGraph};
use crate::numcore::{Array, Axis, ParamId, ParameterSet, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// Review layers replaced by identity.
    NoRil,
    /// Review graph links every ordered pair; attention from review cosine alone.
    NoTopic,
    /// Uniform attention over same-topic neighbors.
    NoReview,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoRil, Variant::NoTopic, Variant::NoReview];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRil => "no-ril",
            Variant::NoTopic => "no-topic",
            Variant::NoReview => "no-review",
        }
    }

    pub fn rig_rule(self) -> RigRule {
        match self {
            Variant::NoTopic => RigRule::AllPairs,
            _ => RigRule::SameTopic,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }
}

/// Which representation the review layer aggregates from its neighbors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeighborSource {
    /// The layer's own input.
    #[default]
    Input,
    /// The base item embeddings.
    Base,
}

impl FromStr for NeighborSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(NeighborSource::Input),
            "base" => Ok(NeighborSource::Base),
            _ => Err(Error::Config(format!("unknown neighbor source `{s}`"))),
        }
    }
}

impl fmt::Display for NeighborSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NeighborSource::Input => "input",
            NeighborSource::Base => "base",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Item state width `d`.
    pub dim: usize,
    /// Word embedding width `d_w`.
    pub word_dim: usize,
    pub heads: usize,
    /// Query/key width per head.
    pub key_dim: usize,
    pub value_dim: usize,
    /// Number of stacked graph layers `k`.
    pub layers: usize,
    /// Propagation steps inside each adjacency layer.
    pub steps: usize,
    pub dropout: f64,
    /// Position table size; longer prefixes keep their most recent items.
    pub max_len: usize,
    /// Review tokens kept per item.
    pub max_review_tokens: usize,
    pub variant: Variant,
    pub neighbor_source: NeighborSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            word_dim: 300,
            heads: 3,
            key_dim: 100,
            value_dim: 100,
            layers: 2,
            steps: 1,
            dropout: 0.2,
            max_len: 50,
            max_review_tokens: 256,
            variant: Variant::Full,
            neighbor_source: NeighborSource::Input,
        }
    }
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "d",
        "d_w",
        "h",
        "d_q",
        "d_k",
        "d_v",
        "k",
        "steps",
        "dropout",
        "n_max",
        "l",
        "variant",
        "ril_source",
    ];

    /// Overrides fields named in `kv`; unrelated keys are ignored.
    pub fn apply(&mut self, kv: &KvConfig) -> Result<()> {
        kv.read_into("d", &mut self.dim)?;
        kv.read_into("d_w", &mut self.word_dim)?;
        kv.read_into("h", &mut self.heads)?;
        kv.read_into("d_q", &mut self.key_dim)?;
        kv.read_into("d_k", &mut self.key_dim)?;
        if let (Some(q), Some(k)) = (kv.get::<usize>("d_q")?, kv.get::<usize>("d_k")?) {
            if q != k {
                return Err(Error::Config(format!("d_q = {q} must equal d_k = {k}")));
            }
        }
        kv.read_into("d_v", &mut self.value_dim)?;
        kv.read_into("k", &mut self.layers)?;
        kv.read_into("steps", &mut self.steps)?;
        kv.read_into("dropout", &mut self.dropout)?;
        kv.read_into("n_max", &mut self.max_len)?;
        kv.read_into("l", &mut self.max_review_tokens)?;
        kv.read_into("variant", &mut self.variant)?;
        kv.read_into("ril_source", &mut self.neighbor_source)?;
        self.validate()
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("d", self.dim);
        kv.set("d_w", self.word_dim);
        kv.set("h", self.heads);
        kv.set("d_k", self.key_dim);
        kv.set("d_v", self.value_dim);
        kv.set("k", self.layers);
        kv.set("steps", self.steps);
        kv.set("dropout", self.dropout);
        kv.set("n_max", self.max_len);
        kv.set("l", self.max_review_tokens);
        kv.set("variant", self.variant);
        kv.set("ril_source", self.neighbor_source);
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d", self.dim),
            ("d_w", self.word_dim),
            ("h", self.heads),
            ("d_k", self.key_dim),
            ("d_v", self.value_dim),
            ("steps", self.steps),
            ("n_max", self.max_len),
            ("l", self.max_review_tokens),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(1..=6).contains(&self.layers) {
            return Err(Error::Config(format!("k = {} outside [1, 6]", self.layers)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-item side information: dominant topics and review token ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ItemSide {
    pub topics: Vec<Option<u32>>,
    pub reviews: Vec<Vec<u32>>,
}

impl ItemSide {
    pub fn new(topics: Vec<Option<u32>>, reviews: Vec<Vec<u32>>) -> Result<Self> {
        if topics.len() != reviews.len() {
            return Err(Error::Data(format!(
                "{} topic entries for {} review documents",
                topics.len(),
                reviews.len()
            )));
        }
        Ok(Self { topics, reviews })
    }

    /// No topics and no reviews for any item.
    pub fn blank(num_items: usize) -> Self {
        Self {
            topics: vec![None; num_items],
            reviews: vec![Vec::new(); num_items],
        }
    }

    pub fn num_items(&self) -> usize {
        self.topics.len()
    }

    pub fn truncate_reviews(&mut self, max_tokens: usize) {
        for r in &mut self.reviews {
            r.truncate(max_tokens);
        }
    }
}

/// Review encodings reachable from a tape: computed on demand and memoized,
/// or read from a precomputed table as constants.
pub struct ReviewCache<'a, S> {
    fixed: Option<&'a [Array<S>]>,
    vars: HashMap<u32, Var>,
}

impl<'a, S: Scalar> ReviewCache<'a, S> {
    pub fn live() -> Self {
        Self {
            fixed: None,
            vars: HashMap::new(),
        }
    }

    pub fn fixed(table: &'a [Array<S>]) -> Self {
        Self {
            fixed: Some(table),
            vars: HashMap::new(),
        }
    }
}

#[derive(Clone, Debug)]
struct Ids {
    item: ParamId,
    word: ParamId,
    w_q: Vec<ParamId>,
    w_k: Vec<ParamId>,
    w_v: Vec<ParamId>,
    w_1: ParamId,
    h: ParamId,
    b_1: ParamId,
    w_z: ParamId,
    u_z: ParamId,
    w_r: ParamId,
    u_r: ParamId,
    w_o: ParamId,
    u_o: ParamId,
    /// `proj_in[l]` feeds layer `l`; layer 0 reads the base embeddings directly.
    proj_in: Vec<Option<ParamId>>,
    proj_out: ParamId,
    pos: ParamId,
    w_2: ParamId,
    b_2: ParamId,
    w_3: ParamId,
    w_4: ParamId,
    b_3: ParamId,
    q: ParamId,
}

/// Expected parameter names and shapes, in insertion order.
fn layout(config: &ModelConfig, num_items: usize, vocab_size: usize) -> Vec<(String, [usize; 2])> {
    let (d, dw) = (config.dim, config.word_dim);
    let mut out = vec![
        ("item_embedding".to_string(), [num_items, d]),
        ("word_embedding".to_string(), [vocab_size, dw]),
    ];
    for k in 0..config.heads {
        out.push((format!("review.head{k}.w_q"), [dw, config.key_dim]));
        out.push((format!("review.head{k}.w_k"), [dw, config.key_dim]));
        out.push((format!("review.head{k}.w_v"), [dw, config.value_dim]));
    }
    out.push(("review.w_1".into(), [config.heads * config.value_dim, dw]));
    out.push(("ail.h".into(), [d, 2 * d]));
    out.push(("ail.b_1".into(), [1, 2 * d]));
    for gate in ["z", "r", "o"] {
        out.push((format!("ail.w_{gate}"), [d, 2 * d]));
        out.push((format!("ail.u_{gate}"), [d, d]));
    }
    for l in 1..config.layers {
        out.push((format!("stack.proj_in{l}"), [(l + 1) * d, d]));
    }
    out.push(("stack.proj_out".into(), [(config.layers + 1) * d, d]));
    out.push(("readout.position".into(), [config.max_len, d]));
    out.push(("readout.w_2".into(), [d, 2 * d]));
    out.push(("readout.b_2".into(), [1, d]));
    out.push(("readout.w_3".into(), [d, d]));
    out.push(("readout.w_4".into(), [d, d]));
    out.push(("readout.b_3".into(), [1, d]));
    out.push(("readout.q".into(), [1, d]));
    out
}

impl Ids {
    fn resolve<S: Scalar>(params: &ParameterSet<S>, config: &ModelConfig) -> Result<Self> {
        let id = |name: &str| {
            params
                .id(name)
                .ok_or_else(|| Error::Format(format!("parameter `{name}` missing")))
        };
        let heads = |suffix: &str| -> Result<Vec<ParamId>> {
            (0..config.heads)
                .map(|k| id(&format!("review.head{k}.{suffix}")))
                .collect()
        };
        let mut proj_in = vec![None];
        for l in 1..config.layers {
            proj_in.push(Some(id(&format!("stack.proj_in{l}"))?));
        }
        Ok(Self {
            item: id("item_embedding")?,
            word: id("word_embedding")?,
            w_q: heads("w_q")?,
            w_k: heads("w_k")?,
            w_v: heads("w_v")?,
            w_1: id("review.w_1")?,
            h: id("ail.h")?,
            b_1: id("ail.b_1")?,
            w_z: id("ail.w_z")?,
            u_z: id("ail.u_z")?,
            w_r: id("ail.w_r")?,
            u_r: id("ail.u_r")?,
            w_o: id("ail.w_o")?,
            u_o: id("ail.u_o")?,
            proj_in,
            proj_out: id("stack.proj_out")?,
            pos: id("readout.position")?,
            w_2: id("readout.w_2")?,
            b_2: id("readout.b_2")?,
            w_3: id("readout.w_3")?,
            w_4: id("readout.w_4")?,
            b_3: id("readout.b_3")?,
            q: id("readout.q")?,
        })
    }
}

static TRUNCATION_WARNED: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Debug)]
pub struct RiGnn<S> {
    config: ModelConfig,
    num_items: usize,
    vocab_size: usize,
    pub params: ParameterSet<S>,
    ids: Ids,
}

impl<S: Scalar> RiGnn<S> {
    /// Fresh parameters drawn from `U(-1/√d, 1/√d)`.
    pub fn new(config: ModelConfig, num_items: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_items == 0 {
            return Err(Error::Config("model needs at least one item".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.dim as f64).sqrt();
        let mut params = ParameterSet::new();
        for (name, [r, c]) in layout(&config, num_items, vocab_size) {
            params.insert(name, Array::uniform(r, c, bound, &mut rng));
        }
        let ids = Ids::resolve(&params, &config)?;
        Ok(Self {
            config,
            num_items,
            vocab_size,
            params,
            ids,
        })
    }

    /// Wraps existing parameters, checking every name and shape.
    pub fn from_params(config: ModelConfig, params: ParameterSet<S>) -> Result<Self> {
        config.validate()?;
        let item = params
            .id("item_embedding")
            .ok_or_else(|| Error::Format("parameter `item_embedding` missing".into()))?;
        let word = params
            .id("word_embedding")
            .ok_or_else(|| Error::Format("parameter `word_embedding` missing".into()))?;
        let num_items = params.get(item).rows();
        let vocab_size = params.get(word).rows();
        let expected = layout(&config, num_items, vocab_size);
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.id(name) {
                Some(id) if params.get(id).shape() == *shape => {}
                Some(id) => {
                    return Err(Error::Format(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        params.get(id).shape()
                    )))
                }
                None => return Err(Error::Format(format!("parameter `{name}` missing"))),
            }
        }
        let ids = Ids::resolve(&params, &config)?;
        Ok(Self {
            config,
            num_items,
            vocab_size,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Same parameters, different variant or neighbor source.
    pub fn with_config(&self, config: ModelConfig) -> Result<Self> {
        Self::from_params(config, self.params.clone())
    }

    /// Overwrites word embedding rows from a text file of `token v1 .. v_dw`
    /// lines. Returns how many vocabulary rows were set.
    pub fn load_word_vectors<R: BufRead>(&mut self, vocab: &[String], reader: R) -> Result<usize> {
        let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
        let dw = self.config.word_dim;
        let table = self.params.get_mut(self.ids.word);
        let mut loaded = 0;
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values: Vec<f64> = fields
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("word vectors line {}: bad number", n + 1)))?;
            if values.len() != dw {
                return Err(Error::Format(format!(
                    "word vectors line {}: {} values, expected {dw}",
                    n + 1,
                    values.len()
                )));
            }
            if let Some(&row) = index.get(token) {
                for (dst, v) in table.row_mut(row).iter_mut().zip(values) {
                    *dst = S::lit(v);
                }
                loaded += 1;
            }
        }
        Ok(loaded)
    }

    /// The most recent `n_max` items of `prefix`.
    pub fn truncate<'s>(&self, prefix: &'s [u32]) -> &'s [u32] {
        let n_max = self.config.max_len;
        if prefix.len() > n_max {
            if !TRUNCATION_WARNED.swap(true, Ordering::Relaxed) {
                log::warn!("prefix of length {} truncated to the last {n_max} items", prefix.len());
            }
            &prefix[prefix.len() - n_max..]
        } else {
            prefix
        }
    }

    pub fn session_graph(&self, prefix: &[u32], items: &ItemSide) -> SessionGraph<S> {
        SessionGraph::build(prefix, &items.topics, self.config.variant.rig_rule())
    }

    /// Multi-head self-attention over a review's word embeddings, mean-pooled
    /// to one `1 × d_w` row. Empty reviews encode to zeros.
    pub fn encode_review(&self, tape: &mut Tape<'_, S>, tokens: &[u32]) -> Var {
        let tokens = &tokens[..tokens.len().min(self.config.max_review_tokens)];
        if tokens.is_empty() {
            return tape.constant(Array::zeros(1, self.config.word_dim));
        }
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = tape.param(self.ids.word);
        let e = tape.gather_rows(table, &idx);
        let scale = S::lit(1.0 / (self.config.key_dim as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.heads);
        for k in 0..self.config.heads {
            let wq = tape.param(self.ids.w_q[k]);
            let wk = tape.param(self.ids.w_k[k]);
            let wv = tape.param(self.ids.w_v[k]);
            let q = tape.matmul(e, wq);
            let key = tape.matmul(e, wk);
            let v = tape.matmul(e, wv);
            let scores = tape.matmul_t(q, key);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, Axis::Cols);
            heads.push(tape.matmul(attn, v));
        }
        let cat = tape.concat(&heads, Axis::Cols);
        let w1 = tape.param(self.ids.w_1);
        let mixed = tape.matmul(cat, w1);
        tape.mean(mixed, Axis::Rows)
    }

    fn review_var(&self, tape: &mut Tape<'_, S>, cache: &mut ReviewCache<'_, S>, items: &ItemSide, item: u32) -> Var {
        if let Some(&v) = cache.vars.get(&item) {
            return v;
        }
        let v = match cache.fixed {
            Some(table) => tape.constant(table[item as usize].clone()),
            None => self.encode_review(tape, &items.reviews[item as usize]),
        };
        cache.vars.insert(item, v);
        v
    }

    /// Encodes every item's review once, outside any gradient computation.
    pub fn precompute_reviews(&self, items: &ItemSide) -> Vec<Array<S>> {
        items
            .reviews
            .iter()
            .map(|tokens| {
                let mut tape = Tape::new(&self.params);
                let v = self.encode_review(&mut tape, tokens);
                tape.value(v).clone()
            })
            .collect()
    }

    /// Gated propagation over the adjacency matrices for `steps` steps.
    pub fn ail_forward(&self, tape: &mut Tape<'_, S>, graph: &SessionGraph<S>, h_in: Var) -> Var {
        let d = self.config.dim;
        let a_out = tape.constant(graph.a_out.clone());
        let a_in = tape.constant(graph.a_in.clone());
        let hw = tape.param(self.ids.h);
        let b1 = tape.param(self.ids.b_1);
        let (wz, uz) = (tape.param(self.ids.w_z), tape.param(self.ids.u_z));
        let (wr, ur) = (tape.param(self.ids.w_r), tape.param(self.ids.u_r));
        let (wo, uo) = (tape.param(self.ids.w_o), tape.param(self.ids.u_o));
        let mut h = h_in;
        for _ in 0..self.config.steps {
            let hh = tape.matmul(h, hw);
            let h_out = tape.slice_cols(hh, 0, d);
            let h_inc = tape.slice_cols(hh, d, 2 * d);
            let m_out = tape.matmul(a_out, h_out);
            let m_in = tape.matmul(a_in, h_inc);
            let a = tape.concat(&[m_out, m_in], Axis::Cols);
            let a = tape.add(a, b1);

            let z = self.gate(tape, a, wz, h, uz);
            let z = tape.sigmoid(z);
            let r = self.gate(tape, a, wr, h, ur);
            let r = tape.sigmoid(r);
            let rh = tape.mul(r, h);
            let cand = self.gate(tape, a, wo, rh, uo);
            let cand = tape.tanh(cand);

            let keep = tape.affine(z, -S::one(), S::one());
            let kept = tape.mul(keep, h);
            let fresh = tape.mul(z, cand);
            h = tape.add(kept, fresh);
        }
        h
    }

    fn gate(&self, tape: &mut Tape<'_, S>, a: Var, w: Var, h: Var, u: Var) -> Var {
        let x = tape.matmul_t(a, w);
        let y = tape.matmul_t(h, u);
        tape.add(x, y)
    }

    /// Cosine-attention aggregation over review-refined neighbors. Nodes
    /// without neighbors keep their input row.
    pub fn ril_forward(
        &self,
        tape: &mut Tape<'_, S>,
        graph: &SessionGraph<S>,
        h_in: Var,
        base: Var,
        cache: &mut ReviewCache<'_, S>,
        items: &ItemSide,
    ) -> Var {
        let variant = self.config.variant;
        let n = graph.len();
        if variant == Variant::NoRil || (0..n).all(|i| graph.re_neighbors(i).is_empty()) {
            return h_in;
        }
        let source = match self.config.neighbor_source {
            NeighborSource::Input => h_in,
            NeighborSource::Base => base,
        };
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let nbrs = graph.re_neighbors(i);
            if nbrs.is_empty() {
                rows.push(tape.gather_rows(h_in, &[i]));
                continue;
            }
            let weights = if variant == Variant::NoReview {
                let w = S::one() / S::lit(nbrs.len() as f64);
                tape.constant(Array::filled(1, nbrs.len(), w))
            } else {
                let item_i = graph.nodes[i];
                let r_i = self.review_var(tape, cache, items, item_i);
                let mut pis = Vec::with_capacity(nbrs.len());
                for &j in nbrs {
                    let item_j = graph.nodes[j];
                    let gated = variant == Variant::NoTopic
                        || (items.topics[item_i as usize].is_some()
                            && items.topics[item_i as usize] == items.topics[item_j as usize]);
                    pis.push(if gated {
                        let r_j = self.review_var(tape, cache, items, item_j);
                        tape.cosine_similarity(r_i, r_j)
                    } else {
                        tape.constant(Array::scalar(S::zero()))
                    });
                }
                let pi = tape.concat(&pis, Axis::Cols);
                tape.softmax(pi, Axis::Cols)
            };
            let neighbor_rows = tape.gather_rows(source, nbrs);
            rows.push(tape.matmul(weights, neighbor_rows));
        }
        tape.concat(&rows, Axis::Rows)
    }

    /// Alternating adjacency and review layers with dense connections.
    /// `rng` enables dropout on every layer output.
    pub fn stack_forward(
        &self,
        tape: &mut Tape<'_, S>,
        graph: &SessionGraph<S>,
        base: Var,
        cache: &mut ReviewCache<'_, S>,
        items: &ItemSide,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let mut outputs = vec![base];
        for l in 0..self.config.layers {
            let input = match self.ids.proj_in[l] {
                None => base,
                Some(p) => {
                    let cat = tape.concat(&outputs, Axis::Cols);
                    let w = tape.param(p);
                    tape.matmul(cat, w)
                }
            };
            let out = if l % 2 == 0 {
                self.ail_forward(tape, graph, input)
            } else {
                self.ril_forward(tape, graph, input, base, cache, items)
            };
            let out = match rng.as_deref_mut() {
                Some(r) => tape.dropout(out, self.config.dropout, true, r),
                None => out,
            };
            outputs.push(out);
        }
        let cat = tape.concat(&outputs, Axis::Cols);
        let w = tape.param(self.ids.proj_out);
        tape.matmul(cat, w)
    }

    /// Position-aware soft-attention readout. Position rows are attached in
    /// reverse, so the last item always sees the first position row.
    pub fn session_repr(&self, tape: &mut Tape<'_, S>, h_prime: Var, graph: &SessionGraph<S>) -> Var {
        let n = graph.node_of.len();
        assert!(n <= self.config.max_len, "session of length {n} exceeds n_max");
        let states = tape.gather_rows(h_prime, &graph.node_of);
        let table = tape.param(self.ids.pos);
        let rev: Vec<usize> = (0..n).rev().collect();
        let pos = tape.gather_rows(table, &rev);
        let zin = tape.concat(&[states, pos], Axis::Cols);
        let w2 = tape.param(self.ids.w_2);
        let b2 = tape.param(self.ids.b_2);
        let z = tape.matmul_t(zin, w2);
        let z = tape.add(z, b2);
        let z = tape.tanh(z);

        let s_mean = tape.mean(states, Axis::Rows);
        let w3 = tape.param(self.ids.w_3);
        let w4 = tape.param(self.ids.w_4);
        let b3 = tape.param(self.ids.b_3);
        let gz = tape.matmul_t(z, w3);
        let gs = tape.matmul_t(s_mean, w4);
        let g = tape.add(gz, gs);
        let g = tape.add(g, b3);
        let g = tape.sigmoid(g);
        let q = tape.param(self.ids.q);
        let beta = tape.matmul_t(q, g);
        tape.matmul(beta, states)
    }

    /// Inner products of `s` with every base item embedding, `1 × m`.
    pub fn logits(&self, tape: &mut Tape<'_, S>, s: Var) -> Var {
        let table = tape.param(self.ids.item);
        tape.matmul_t(s, table)
    }

    /// Next-item logits for one prefix.
    pub fn forward(
        &self,
        tape: &mut Tape<'_, S>,
        prefix: &[u32],
        items: &ItemSide,
        cache: &mut ReviewCache<'_, S>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Var {
        let prefix = self.truncate(prefix);
        let graph = self.session_graph(prefix, items);
        let idx: Vec<usize> = graph.nodes.iter().map(|&v| v as usize).collect();
        let table = tape.param(self.ids.item);
        let base = tape.gather_rows(table, &idx);
        let h_prime = self.stack_forward(tape, &graph, base, cache, items, rng);
        let s = self.session_repr(tape, h_prime, &graph);
        self.logits(tape, s)
    }

    /// Logits without gradients, using precomputed review encodings.
    pub fn score(&self, prefix: &[u32], items: &ItemSide, reviews: &[Array<S>]) -> Array<S> {
        let mut tape = Tape::new(&self.params);
        let mut cache = ReviewCache::fixed(reviews);
        let z = self.forward(&mut tape, prefix, items, &mut cache, None);
        tape.value(z).clone()
    }

    /// Next-item probability vector.
    pub fn predict(&self, prefix: &[u32], items: &ItemSide, reviews: &[Array<S>]) -> Vec<S> {
        softmax(self.score(prefix, items, reviews).data())
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax<S: Scalar>(z: &[S]) -> Vec<S> {
    let max = z.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = z.iter().map(|&x| (x - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}
