use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use rignn::config::KvConfig;
use rignn::eval::{
    evaluate_model_top, evaluate_ranker, mrr_at_k, paired_t_test, popularity_order, precision_at_k, run_ablations,
    s_pop, RankedResult, SKnn,
};
use rignn::graph::{RigRule, SessionGraph};
use rignn::ingest::{parse_review_file, prepare, Bundle, Case, IngestOptions, BUNDLE_FILE};
use rignn::model::{ModelConfig, RiGnn, Variant};
use rignn::numcore::ParameterSet;
use rignn::synth::{dependency_recovery, generate, SynthSpec, GROUND_TRUTH_FILE};
use rignn::topics::{fit_lda, purity, LdaConfig, TokenizedCorpus, TopicModel};
use rignn::train::{train as train_model, Prepared, TrainConfig};

use crate::manifest::{file_hash, RunManifest};
use crate::{
    AblateArgs, ConfigArgs, EvalArgs, GraphArgs, IngestArgs, Invalid, Rule, Split, StatsArgs, SynthArgs, TopicsArgs,
    TrainArgs,
};

const TOPICS_FILE: &str = "topics.json";
const CONFIG_FILE: &str = "config.txt";

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("no such file: {}", path.display())))
    }
}

fn load_bundle(dir: &Path) -> Result<Bundle> {
    require_file(&dir.join(BUNDLE_FILE))?;
    Bundle::load(dir).with_context(|| format!("loading bundle from {}", dir.display()))
}

/// `<dir>/<stem>.manifest.json` for a file output.
fn sidecar(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or("run".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.manifest.json"))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn parse_sets(sets: &[String]) -> Result<KvConfig> {
    let mut kv = KvConfig::new();
    for s in sets {
        let Some((k, v)) = s.split_once('=') else {
            return Err(invalid(format!("--set expects KEY=VALUE, got `{s}`")));
        };
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

/// Flags over file over defaults. Returns the fully resolved key-value view too.
fn resolve_config(args: &ConfigArgs, fallback: Option<&Path>) -> Result<(KvConfig, ModelConfig, TrainConfig)> {
    let path = args.config.as_deref().or(fallback);
    let base = match path {
        Some(p) => {
            require_file(p)?;
            KvConfig::load(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => KvConfig::new(),
    };
    let kv = base.merged(&parse_sets(&args.sets)?);
    let known: Vec<&str> = ModelConfig::KEYS.iter().chain(TrainConfig::KEYS).copied().collect();
    kv.reject_unknown(&known)?;
    let mut model = ModelConfig::default();
    model.apply(&kv)?;
    let mut train = TrainConfig::default();
    train.apply(&kv)?;
    let mut resolved = KvConfig::new();
    model.write_kv(&mut resolved);
    train.write_kv(&mut resolved);
    Ok((resolved, model, train))
}

/// Explicit topic file, else `<bundle>/topics.json`, else the bundle's oracle topics.
fn resolve_topics(
    dir: &Path,
    bundle: &Bundle,
    flag: Option<&Path>,
    manifest: &mut RunManifest,
) -> Result<Vec<Option<u32>>> {
    let default = dir.join(TOPICS_FILE);
    let path = match flag {
        Some(p) => {
            require_file(p)?;
            Some(p.to_path_buf())
        }
        None => default.is_file().then_some(default),
    };
    match path {
        Some(p) => {
            let model = TopicModel::load(&p).with_context(|| format!("loading {}", p.display()))?;
            if model.num_docs() != bundle.catalog.len() {
                return Err(invalid(format!(
                    "topic model covers {} items but the bundle has {}",
                    model.num_docs(),
                    bundle.catalog.len()
                )));
            }
            manifest.input("topics", &p)?;
            log::info!("topics from {}", p.display());
            Ok(model.dominant)
        }
        None => match &bundle.oracle_topics {
            Some(t) => {
                log::info!("using the bundle's oracle topics");
                Ok(t.clone())
            }
            None => Err(invalid(
                "no topics available: run `rignn topics` first or pass --topics",
            )),
        },
    }
}

pub fn ingest(args: IngestArgs, manifest_path: Option<PathBuf>) -> Result<()> {
    let mut manifest = RunManifest::start("ingest");
    require_file(&args.input)?;
    let case = Case::from_number(args.case)?;
    let opts = IngestOptions {
        min_count: args.min_count,
        window_days: args.window_days,
        case,
    };
    let (interactions, malformed) = parse_review_file(&args.input)?;
    if malformed > 0 {
        log::warn!("{malformed} malformed lines skipped");
    }
    let bundle = prepare(&interactions, malformed, &opts)?;
    bundle.save(&args.out)?;
    let mut kv = KvConfig::new();
    kv.set("min_count", args.min_count);
    kv.set("window_days", args.window_days);
    kv.set("case", args.case);
    manifest.set_config(&kv);
    manifest.input("reviews", &args.input)?;
    manifest.output("bundle", &args.out.join(BUNDLE_FILE))?;
    let r = bundle.report();
    log::info!(
        "{} interactions, {} train / {} test sessions, {} items",
        r.interactions,
        r.train_sessions,
        r.test_sessions,
        r.items
    );
    manifest.finish(&manifest_path.unwrap_or_else(|| args.out.join("manifest.json")))?;
    Ok(())
}

pub fn topics(args: TopicsArgs, manifest_path: Option<PathBuf>) -> Result<()> {
    let mut manifest = RunManifest::start("topics");
    let bundle = load_bundle(&args.bundle)?;
    manifest.input("bundle", &args.bundle.join(BUNDLE_FILE))?;
    let mut config = LdaConfig::with_topics(args.topics);
    config.alpha = args.alpha.unwrap_or(config.alpha);
    config.beta = args.beta.unwrap_or(config.beta);
    config.sweeps = args.sweeps;
    config.seed = args.seed;
    let corpus = TokenizedCorpus::from_catalog(&bundle.catalog, args.max_tokens);
    let model = fit_lda(&corpus, config.clone())?;
    let out = args.out.unwrap_or_else(|| args.bundle.join(TOPICS_FILE));
    model.save(&out)?;

    let empty = model.dominant.iter().filter(|t| t.is_none()).count();
    log::info!(
        "{} items, {} without reviews, vocabulary {}",
        model.num_docs(),
        empty,
        corpus.vocab_size()
    );
    if let Some(oracle) = &bundle.oracle_topics {
        let pairs: Vec<(Option<u32>, u32)> = model
            .dominant
            .iter()
            .zip(oracle)
            .filter_map(|(&d, &o)| o.map(|o| (d, o)))
            .collect();
        let (clusters, labels): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        log::info!("purity against oracle topics: {:.4}", purity(&clusters, &labels));
    }
    let mut kv = KvConfig::new();
    kv.set("topics", config.num_topics);
    kv.set("alpha", config.alpha);
    kv.set("beta", config.beta);
    kv.set("sweeps", config.sweeps);
    kv.set("max_tokens", args.max_tokens);
    manifest.set_config(&kv);
    manifest.seeds = vec![config.seed];
    manifest.output("topics", &out)?;
    manifest.finish(&manifest_path.unwrap_or_else(|| sidecar(&out)))?;
    Ok(())
}

type InlineSession = (Vec<String>, Vec<u32>, Vec<Option<u32>>);

/// Session and per-item topics from `--items`/`--item-topics`, with ids interned in order.
fn inline_session(items: &[String], topics: Option<&[String]>) -> Result<InlineSession> {
    let mut names: Vec<String> = Vec::new();
    let mut session = Vec::with_capacity(items.len());
    for it in items {
        let idx = match names.iter().position(|n| n == it) {
            Some(i) => i,
            None => {
                names.push(it.clone());
                names.len() - 1
            }
        };
        session.push(idx as u32);
    }
    let mut item_topics = vec![None; names.len()];
    if let Some(ts) = topics {
        if ts.len() != items.len() {
            return Err(invalid(format!(
                "--item-topics has {} entries for {} items",
                ts.len(),
                items.len()
            )));
        }
        for (&node, t) in session.iter().zip(ts) {
            let t = match t.trim() {
                "-" | "" => None,
                v => Some(v.parse::<u32>().map_err(|_| invalid(format!("bad topic `{v}`")))?),
            };
            let slot = &mut item_topics[node as usize];
            if slot.is_some() && *slot != t {
                return Err(invalid("an item repeated in --items must keep one topic"));
            }
            *slot = t;
        }
    }
    Ok((names, session, item_topics))
}

fn graph_json(g: &SessionGraph<f64>, session: &[u32], topics: &[Option<u32>], label: &dyn Fn(u32) -> String) -> Value {
    let name = |slot: usize| label(g.nodes[slot]);
    let aig: Vec<Value> = g
        .aig_edges()
        .into_iter()
        .map(|(u, w)| json!({"from": name(u), "to": name(w), "out": g.a_out.get(u, w), "in": g.a_in.get(w, u)}))
        .collect();
    let rig: Vec<Value> = g
        .rig_edges
        .iter()
        .map(|&(u, w)| json!({"from": name(u), "to": name(w), "out": g.b_out.get(u, w), "in": g.b_in.get(w, u)}))
        .collect();
    json!({
        "session": session.iter().map(|&i| label(i)).collect::<Vec<_>>(),
        "topics": g.nodes.iter().map(|&i| topics[i as usize]).collect::<Vec<_>>(),
        "nodes": (0..g.len()).map(name).collect::<Vec<_>>(),
        "aig": aig,
        "rig": rig,
    })
}

pub fn graph(args: GraphArgs, manifest_path: Option<PathBuf>) -> Result<()> {
    let mut manifest = RunManifest::start("graph");
    let rule = match args.rule {
        Rule::SameTopic => RigRule::SameTopic,
        Rule::AllPairs => RigRule::AllPairs,
    };
    let mut report = if let Some(items) = &args.items {
        if items.is_empty() {
            return Err(invalid("--items is empty"));
        }
        let (names, session, topics) = inline_session(items, args.item_topics.as_deref())?;
        let g = SessionGraph::<f64>::build(&session, &topics, rule);
        let label = |i: u32| names[i as usize].clone();
        print!("{}", g.describe(label));
        graph_json(&g, &session, &topics, &label)
    } else {
        let dir = args.bundle.as_deref().expect("clap enforces a source");
        let bundle = load_bundle(dir)?;
        manifest.input("bundle", &dir.join(BUNDLE_FILE))?;
        let topics = resolve_topics(dir, &bundle, args.topics.as_deref(), &mut manifest)?;
        let sessions = match args.split {
            Split::Train => &bundle.train,
            Split::Test => &bundle.test,
        };
        let session = sessions.get(args.session).ok_or_else(|| {
            invalid(format!(
                "session {} out of range ({} sessions)",
                args.session,
                sessions.len()
            ))
        })?;
        let g = SessionGraph::<f64>::build(&session.items, &topics, rule);
        let label = |i: u32| bundle.catalog.item_id(i).to_string();
        let mut report = graph_json(&g, &session.items, &topics, &label);
        if let Some(truth_path) = &args.truth {
            require_file(truth_path)?;
            let truth = rignn::synth::GroundTruth::load(truth_path)?;
            manifest.input("truth", truth_path)?;
            let recovery = dependency_recovery(&truth.sessions, &truth.edges, &topics);
            report["recovery"] = serde_json::to_value(recovery)?;
        }
        report
    };
    report["rule"] = json!(match rule {
        RigRule::SameTopic => "same-topic",
        RigRule::AllPairs => "all-pairs",
    });
    write_json(&args.out, &report)?;
    manifest.output("graph", &args.out)?;
    manifest.finish(&manifest_path.unwrap_or_else(|| sidecar(&args.out)))?;
    Ok(())
}

fn write_checkpoint(path: &Path, params: &ParameterSet<f64>, manifest: &mut RunManifest, name: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    params.write_checkpoint(&mut w)?;
    w.flush()?;
    drop(w);
    manifest.output(name, path)?;
    Ok(())
}

pub fn train(args: TrainArgs, manifest_path: Option<PathBuf>) -> Result<()> {
    let mut manifest = RunManifest::start("train");
    let (kv, model_cfg, train_cfg) = resolve_config(&args.config, None)?;
    let bundle = load_bundle(&args.bundle)?;
    manifest.input("bundle", &args.bundle.join(BUNDLE_FILE))?;
    let topics = resolve_topics(&args.bundle, &bundle, args.topics.as_deref(), &mut manifest)?;
    let data = Prepared::new(&bundle, topics, model_cfg.max_review_tokens, train_cfg.val_fraction)?;
    log::info!(
        "{} train / {} validation examples, {} items, vocabulary {}",
        data.train.len(),
        data.valid.len(),
        data.num_items(),
        data.vocab_size()
    );
    let mut model = RiGnn::<f64>::new(model_cfg, data.num_items(), data.vocab_size(), train_cfg.seed)?;
    if let Some(path) = &args.word_vectors {
        require_file(path)?;
        let n = model.load_word_vectors(&data.vocab, BufReader::new(File::open(path)?))?;
        manifest.input("word_vectors", path)?;
        log::info!("{n} word vectors loaded");
    }

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join(CONFIG_FILE), kv.to_string())?;
    manifest.set_config(&kv);
    manifest.seeds = vec![train_cfg.seed];
    let log_path = args.out.join("metrics.jsonl");
    let mut log_file = BufWriter::new(File::create(&log_path)?);
    let mut write_err = None;
    let outcome = train_model(&mut model, &data.train, &data.valid, &data.items, &train_cfg, |rec| {
        let line = serde_json::to_string(rec).map_err(anyhow::Error::from).and_then(|l| {
            writeln!(log_file, "{l}")?;
            log_file.flush()?;
            Ok(())
        });
        if let Err(e) = line {
            write_err.get_or_insert(e);
        }
    })?;
    drop(log_file);
    if let Some(e) = write_err {
        return Err(e.context("writing metric log"));
    }

    write_checkpoint(
        &args.out.join("initial.ckpt"),
        &outcome.initial,
        &mut manifest,
        "initial",
    )?;
    if !outcome.log.is_empty() || outcome.aborted.is_some() {
        write_checkpoint(&args.out.join("best.ckpt"), &outcome.best, &mut manifest, "best")?;
        write_checkpoint(&args.out.join("last.ckpt"), &outcome.last, &mut manifest, "last")?;
    }
    manifest.output("metrics", &log_path)?;
    manifest.output("config", &args.out.join(CONFIG_FILE))?;
    manifest.finish(&manifest_path.unwrap_or_else(|| args.out.join("manifest.json")))?;
    if let Some(reason) = outcome.aborted {
        anyhow::bail!("training diverged ({reason}); last good parameters saved");
    }
    log::info!("best epoch {}", outcome.best_epoch);
    Ok(())
}

fn metric_block(results: &[RankedResult], ks: &[usize]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for &k in ks {
        out.insert(format!("P@{k}"), precision_at_k(results, k)?);
        out.insert(format!("MRR@{k}"), mrr_at_k(results, k)?);
    }
    Ok(out)
}

pub fn eval(args: EvalArgs, manifest_path: Option<PathBuf>) -> Result<()> {
    let mut manifest = RunManifest::start("eval");
    if args.k.is_empty() || args.k.contains(&0) {
        return Err(invalid("--k needs positive cutoffs"));
    }
    require_file(&args.checkpoint)?;
    let fallback = args.checkpoint.with_file_name(CONFIG_FILE);
    let fallback = fallback.is_file().then_some(fallback);
    let (kv, model_cfg, train_cfg) = resolve_config(&args.config, fallback.as_deref())?;
    let bundle = load_bundle(&args.bundle)?;
    let bundle_hash = file_hash(&args.bundle.join(BUNDLE_FILE))?;
    manifest.input("bundle", &args.bundle.join(BUNDLE_FILE))?;
    manifest.input("checkpoint", &args.checkpoint)?;
    let topics = resolve_topics(&args.bundle, &bundle, args.topics.as_deref(), &mut manifest)?;
    let data = Prepared::new(&bundle, topics, model_cfg.max_review_tokens, train_cfg.val_fraction)?;
    if data.test.is_empty() {
        return Err(invalid("the bundle has no test examples"));
    }
    let params = ParameterSet::<f64>::read_checkpoint(BufReader::new(File::open(&args.checkpoint)?))?;
    let model = RiGnn::from_params(model_cfg, params)?;
    if model.num_items() != data.num_items() {
        return Err(invalid("checkpoint and bundle disagree on the number of items"));
    }
    let n = args.k.iter().copied().max().unwrap_or(20).max(rignn::eval::TOP_N);
    if n > data.num_items() {
        return Err(invalid(format!(
            "K = {n} exceeds the {} catalog items",
            data.num_items()
        )));
    }
    let results = evaluate_model_top(&model, &data.test, &data.items, n)?;
    let popularity = popularity_order(&bundle.train_popularity());
    let pop = evaluate_ranker(&data.test, |p| s_pop(p, &popularity, n));
    let knn = SKnn::new(&bundle.train, popularity.clone(), args.k_nn);
    let knn_results = evaluate_ranker(&data.test, |p| knn.recommend(p, n));

    manifest.set_config(&kv);
    manifest.seeds = vec![train_cfg.seed];
    let report = json!({
        "seed": train_cfg.seed,
        "config_hash": manifest.config_hash,
        "bundle_hash": bundle_hash,
        "checkpoint_hash": manifest.inputs.get("checkpoint"),
        "variant": model.config().variant,
        "test_examples": data.test.len(),
        "results": {
            "rignn": metric_block(&results, &args.k)?,
            "s-pop": metric_block(&pop, &args.k)?,
            "s-knn": metric_block(&knn_results, &args.k)?,
        },
    });
    write_json(&args.out, &report)?;
    manifest.output("metrics", &args.out)?;
    manifest.finish(&manifest_path.unwrap_or_else(|| sidecar(&args.out)))?;
    Ok(())
}

pub fn ablate(args: AblateArgs, manifest_path: Option<PathBuf>) -> Result<()> {
    let mut manifest = RunManifest::start("ablate");
    if args.seeds == 0 {
        return Err(invalid("--seeds must be positive"));
    }
    let (kv, model_cfg, train_cfg) = resolve_config(&args.config, None)?;
    let bundle = load_bundle(&args.bundle)?;
    let bundle_hash = file_hash(&args.bundle.join(BUNDLE_FILE))?;
    manifest.input("bundle", &args.bundle.join(BUNDLE_FILE))?;
    let topics = resolve_topics(&args.bundle, &bundle, args.topics.as_deref(), &mut manifest)?;
    let data = Prepared::new(&bundle, topics, model_cfg.max_review_tokens, train_cfg.val_fraction)?;
    let seeds: Vec<u64> = (0..args.seeds).map(|i| train_cfg.seed + i).collect();
    let records = run_ablations(&data, &model_cfg, &train_cfg, &Variant::ALL, &seeds)?;

    let mrr10 = |v: Variant| -> Vec<f64> {
        records
            .iter()
            .filter(|r| r.variant == v)
            .map(|r| r.metrics.mrr10)
            .collect()
    };
    let mut summary = serde_json::Map::new();
    let full = mrr10(Variant::Full);
    for v in Variant::ALL {
        let xs = mrr10(v);
        let mut entry = json!({"mean_MRR@10": xs.iter().sum::<f64>() / xs.len() as f64});
        if v != Variant::Full && xs.len() >= 2 {
            entry["paired_vs_full"] = serde_json::to_value(paired_t_test(&full, &xs)?)?;
        }
        summary.insert(v.name().to_string(), entry);
    }
    manifest.set_config(&kv);
    manifest.seeds = seeds.clone();
    let report = json!({
        "seeds": seeds,
        "config_hash": manifest.config_hash,
        "bundle_hash": bundle_hash,
        "records": records,
        "summary": summary,
    });
    write_json(&args.out, &report)?;
    manifest.output("ablation", &args.out)?;
    manifest.finish(&manifest_path.unwrap_or_else(|| sidecar(&args.out)))?;
    Ok(())
}

pub fn synth(args: SynthArgs, manifest_path: Option<PathBuf>) -> Result<()> {
    let mut manifest = RunManifest::start("synth");
    let mut kv = match &args.spec {
        Some(p) => {
            require_file(p)?;
            manifest.input("spec", p)?;
            KvConfig::load(p)?
        }
        None => KvConfig::new(),
    };
    kv = kv.merged(&parse_sets(&args.sets)?);
    let mut spec = SynthSpec::default();
    spec.apply(&kv)?;
    let corpus = generate(&spec)?;
    corpus.bundle.save(&args.out)?;
    let truth_path = args.out.join(GROUND_TRUTH_FILE);
    corpus.truth.save(&truth_path)?;
    let oracle = corpus.bundle.oracle_topics.clone().unwrap_or_default();
    let recovery = dependency_recovery(&corpus.truth.sessions, &corpus.truth.edges, &oracle);
    let recovery_path = args.out.join("recovery.json");
    write_json(&recovery_path, &recovery)?;
    log::info!(
        "adjacency edges: precision {:.3} recall {:.3}; review-refined edges: precision {:.3} recall {:.3}",
        recovery.aig.precision,
        recovery.aig.recall,
        recovery.rig.precision,
        recovery.rig.recall
    );
    manifest.set_config(&spec.to_kv());
    manifest.seeds = vec![spec.seed];
    manifest.output("bundle", &args.out.join(BUNDLE_FILE))?;
    manifest.output("truth", &truth_path)?;
    manifest.output("recovery", &recovery_path)?;
    manifest.finish(&manifest_path.unwrap_or_else(|| args.out.join("manifest.json")))?;
    Ok(())
}

pub fn stats(args: StatsArgs, manifest_path: Option<PathBuf>) -> Result<()> {
    let mut manifest = RunManifest::start("stats");
    let bundle = load_bundle(&args.bundle)?;
    manifest.input("bundle", &args.bundle.join(BUNDLE_FILE))?;
    let report = bundle.report();
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(&report)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
        r => r?,
    }
    manifest.finish(&manifest_path.unwrap_or_else(|| args.bundle.join("stats.manifest.json")))?;
    Ok(())
}
