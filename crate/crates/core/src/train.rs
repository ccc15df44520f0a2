//! Mini-batch training with cross-entropy, L2 regularization and Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, metrics, Metrics};
use crate::ingest::{split_all, Bundle, SequenceExample, Session};
use crate::model::{ItemSide, ReviewCache, RiGnn};
use crate::numcore::{Array, Gradients, ParameterSet, Tape, Var};
use crate::scalar::Scalar;
use crate::topics::TokenizedCorpus;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Share of train sessions, latest first, held out for model selection.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 100,
            l2: 1e-5,
            epochs: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lr",
        "batch_size",
        "l2",
        "epochs",
        "seed",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "val_fraction",
    ];

    pub fn apply(&mut self, kv: &KvConfig) -> Result<()> {
        kv.read_into("lr", &mut self.learning_rate)?;
        kv.read_into("batch_size", &mut self.batch_size)?;
        kv.read_into("l2", &mut self.l2)?;
        kv.read_into("epochs", &mut self.epochs)?;
        kv.read_into("seed", &mut self.seed)?;
        kv.read_into("adam_beta1", &mut self.beta1)?;
        kv.read_into("adam_beta2", &mut self.beta2)?;
        kv.read_into("adam_eps", &mut self.epsilon)?;
        kv.read_into("val_fraction", &mut self.val_fraction)?;
        self.validate()
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("lr", self.learning_rate);
        kv.set("batch_size", self.batch_size);
        kv.set("l2", self.l2);
        kv.set("epochs", self.epochs);
        kv.set("seed", self.seed);
        kv.set("adam_beta1", self.beta1);
        kv.set("adam_beta2", self.beta2);
        kv.set("adam_eps", self.epsilon);
        kv.set("val_fraction", self.val_fraction);
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config("learning rate and Adam epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config("l2 must be non-negative".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Array<S>>,
    v: Vec<Array<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParameterSet<S>, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Array<S>> = params
            .iter()
            .map(|(_, _, a)| Array::zeros(a.rows(), a.cols()))
            .collect();
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config(params: &ParameterSet<S>, config: &TrainConfig) -> Self {
        Self::new(params, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParameterSet<S>, grads: &Gradients<S>) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let c1 = S::one() - S::lit(self.beta1.powi(t));
        let c2 = S::one() - S::lit(self.beta2.powi(t));
        let lr = S::lit(self.learning_rate);
        let eps = S::lit(self.epsilon);
        for (id, g) in grads.iter() {
            let k = id.index();
            let theta = params.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Mean cross-entropy of a batch, recorded on `tape`.
pub fn batch_loss<S: Scalar>(
    model: &RiGnn<S>,
    tape: &mut Tape<'_, S>,
    examples: &[&SequenceExample],
    items: &ItemSide,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Var {
    assert!(!examples.is_empty(), "empty batch");
    let mut cache = ReviewCache::live();
    let losses: Vec<Var> = examples
        .iter()
        .map(|ex| {
            let z = model.forward(tape, &ex.prefix, items, &mut cache, rng.as_deref_mut());
            tape.cross_entropy(z, ex.label as usize)
        })
        .collect();
    let cat = tape.concat(&losses, crate::numcore::Axis::Cols);
    tape.mean(cat, crate::numcore::Axis::Cols)
}

/// Regularized loss and its gradient. The data term is the batch mean; the
/// penalty is `l2/2 · Σθ²` over every parameter.
pub fn loss_and_grad<S: Scalar>(
    model: &RiGnn<S>,
    examples: &[&SequenceExample],
    items: &ItemSide,
    l2: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<LossEval<S>> {
    let mut tape = Tape::new(&model.params);
    let loss = batch_loss(model, &mut tape, examples, items, rng);
    tape.check_finite()?;
    let mut grads = tape.backward(loss)?;
    let coef = S::lit(l2);
    grads.add_l2(&model.params, coef);
    let data = tape.value(loss).item();
    let penalty = coef * S::lit(0.5) * model.params.sum_sq();
    Ok(LossEval {
        loss: data + penalty,
        data_loss: data,
        grads,
        clamped: tape.clamped_count(),
    })
}

pub struct LossEval<S> {
    pub loss: S,
    pub data_loss: S,
    pub grads: Gradients<S>,
    /// Examples whose target probability hit the floor.
    pub clamped: usize,
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

pub struct TrainOutcome<S> {
    pub initial: ParameterSet<S>,
    pub best: ParameterSet<S>,
    /// Zero when no epoch ran.
    pub best_epoch: usize,
    pub last: ParameterSet<S>,
    pub log: Vec<EpochRecord>,
    /// Set when training stopped on a non-finite loss or gradient; `last`
    /// then holds the parameters from before the failing step.
    pub aborted: Option<String>,
    pub clamped: usize,
}

/// Model inputs derived from a bundle: per-item side information and the
/// train, validation and test examples.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub items: ItemSide,
    pub vocab: Vec<String>,
    pub train: Vec<SequenceExample>,
    pub valid: Vec<SequenceExample>,
    pub test: Vec<SequenceExample>,
}

impl Prepared {
    /// `topics` is indexed by item; reviews are tokenized from the catalog.
    pub fn new(bundle: &Bundle, topics: Vec<Option<u32>>, max_review_tokens: usize, val_fraction: f64) -> Result<Self> {
        let corpus = TokenizedCorpus::from_catalog(&bundle.catalog, max_review_tokens);
        if topics.len() != bundle.catalog.len() {
            return Err(Error::Data(format!(
                "{} topic entries for {} items",
                topics.len(),
                bundle.catalog.len()
            )));
        }
        let items = ItemSide::new(topics, corpus.docs)?;
        let (fit, held) = validation_split(&bundle.train, val_fraction);
        Ok(Self {
            items,
            vocab: corpus.vocab,
            train: split_all(&fit, bundle.case),
            valid: split_all(&held, bundle.case),
            test: bundle.test_examples(),
        })
    }

    pub fn num_items(&self) -> usize {
        self.items.num_items()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }
}

/// Splits off the latest `fraction` of sessions by start time.
pub fn validation_split(sessions: &[Session], fraction: f64) -> (Vec<Session>, Vec<Session>) {
    let mut order: Vec<&Session> = sessions.iter().collect();
    order.sort_by_key(|s| s.start_time);
    let held = ((sessions.len() as f64) * fraction).floor() as usize;
    let cut = sessions.len() - held;
    (
        order[..cut].iter().map(|s| (*s).clone()).collect(),
        order[cut..].iter().map(|s| (*s).clone()).collect(),
    )
}

/// Runs `config.epochs` epochs of shuffled mini-batch Adam. Validation
/// metrics come from `valid`, or from `train` when `valid` is empty. The best
/// parameters by MRR@20 are kept; `model` ends holding the last parameters.
pub fn train<S: Scalar>(
    model: &mut RiGnn<S>,
    train: &[SequenceExample],
    valid: &[SequenceExample],
    items: &ItemSide,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if train.is_empty() && config.epochs > 0 {
        return Err(Error::Data("no training examples".into()));
    }
    let initial = model.params.clone();
    let mut best = initial.clone();
    let mut best_epoch = 0;
    let mut best_mrr = f64::NEG_INFINITY;
    let mut log = Vec::new();
    let mut clamped = 0;
    let mut adam = Adam::from_config(&model.params, config);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);
    let selection = if valid.is_empty() { train } else { valid };
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut batch: Vec<&SequenceExample> = chunk.iter().map(|&i| &train[i]).collect();
            batch.sort_by_key(|ex| ex.prefix.len());
            let step = loss_and_grad(model, &batch, items, config.l2, Some(&mut dropout_rng));
            let eval = match step {
                Ok(e) if e.loss.is_finite() && e.grads.is_finite() => e,
                Ok(_) => {
                    return Ok(abort(
                        model,
                        initial,
                        best,
                        best_epoch,
                        log,
                        clamped,
                        epoch,
                        "non-finite gradient".into(),
                    ))
                }
                Err(err) => {
                    return Ok(abort(
                        model,
                        initial,
                        best,
                        best_epoch,
                        log,
                        clamped,
                        epoch,
                        err.to_string(),
                    ))
                }
            };
            clamped += eval.clamped;
            total += eval.loss.as_f64() * batch.len() as f64;
            adam.step(&mut model.params, &eval.grads);
        }
        if clamped > 0 {
            log::warn!("{clamped} target probabilities clamped so far");
        }
        let metrics = metrics(&evaluate_model(model, selection, items)?)?;
        let record = EpochRecord {
            epoch,
            loss: total / train.len() as f64,
            metrics,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} P@20 {:.2} MRR@20 {:.2}",
            record.loss,
            record.metrics.p20,
            record.metrics.mrr20
        );
        on_epoch(&record);
        if record.metrics.mrr20 > best_mrr {
            best_mrr = record.metrics.mrr20;
            best = model.params.clone();
            best_epoch = epoch;
        }
        log.push(record);
    }
    if config.epochs == 0 {
        best = initial.clone();
    }
    Ok(TrainOutcome {
        initial,
        best,
        best_epoch,
        last: model.params.clone(),
        log,
        aborted: None,
        clamped,
    })
}

#[allow(clippy::too_many_arguments)]
fn abort<S: Scalar>(
    model: &RiGnn<S>,
    initial: ParameterSet<S>,
    best: ParameterSet<S>,
    best_epoch: usize,
    log: Vec<EpochRecord>,
    clamped: usize,
    epoch: usize,
    reason: String,
) -> TrainOutcome<S> {
    log::error!("training diverged in epoch {epoch}: {reason}");
    TrainOutcome {
        initial,
        best,
        best_epoch,
        last: model.params.clone(),
        log,
        aborted: Some(format!("epoch {epoch}: {reason}")),
        clamped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ParamId;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = ParameterSet::<f64>::new();
        let id = params.insert("w", Array::row_vector(vec![1.0, -2.0, 0.5]));
        let mut grads = Gradients::zeros_like(&params);
        grads.get_mut(id).data_mut().copy_from_slice(&[0.3, -5.0, 0.0]);
        let mut adam = Adam::new(&params, 0.001, 0.9, 0.999, 1e-8);
        adam.step(&mut params, &grads);
        let w = params.get(id).data();
        assert!((w[0] - (1.0 - 0.001)).abs() < 1e-10);
        assert!((w[1] - (-2.0 + 0.001)).abs() < 1e-10);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut params = ParameterSet::<f64>::new();
        params.insert("w", Array::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let before = params.clone();
        let grads = Gradients::zeros_like(&params);
        let mut adam = Adam::new(&params, 0.01, 0.9, 0.999, 1e-8);
        for _ in 0..3 {
            adam.step(&mut params, &grads);
        }
        assert_eq!(params.get(ParamId(0)), before.get(ParamId(0)));
    }

    #[test]
    fn config_keys_round_trip() {
        let cfg = TrainConfig {
            epochs: 3,
            seed: 7,
            ..TrainConfig::default()
        };
        let mut kv = KvConfig::new();
        cfg.write_kv(&mut kv);
        let mut back = TrainConfig::default();
        back.apply(&kv).unwrap();
        assert_eq!(back, cfg);
        assert!(back.apply(&KvConfig::parse("batch_size = 0").unwrap()).is_err());
        assert!(back.apply(&KvConfig::parse("lr = -1").unwrap()).is_err());
    }

    #[test]
    fn validation_takes_latest_sessions() {
        let sessions: Vec<Session> = (0..10)
            .map(|i| Session {
                items: vec![i, i + 1],
                start_time: 100 - i as i64,
            })
            .collect();
        let (fit, held) = validation_split(&sessions, 0.2);
        assert_eq!(fit.len(), 8);
        assert_eq!(held.iter().map(|s| s.start_time).collect::<Vec<_>>(), [99, 100]);
    }
}
