//! The six subcommand implementations.

use std::collections::HashSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scop_core::baselines::{
    finetune_baseline, train_baseline, Baseline, BaselineKind, BaselineScorer,
};
use scop_core::checkpoint::{self, write_atomic, Checkpoint};
use scop_core::context::assemble_sequence;
use scop_core::eval::{
    accuracy_spread, margin_sweep, rank_pairs, write_score_distribution, MarginPoint,
    RankingReport,
};
use scop_core::gradcheck::{grad_check, GradCheckReport};
use scop_core::kg::{NegativeSampler, TaskDataset, Triple, TripleStore};
use scop_core::model::{ModelConfig, ScopModel, TaskHead};
use scop_core::train::{self, TrainOutcome};

use crate::artifacts::{
    checkpoint_path, ensure_dir, load_dataset_dir, load_graph, loss_path, write_dataset_dir,
    write_json, write_loss_csv, write_run_cfg,
};
use crate::settings::{
    CommonOpts, ModelChoice, Settings, SplitChoice, TaskKind, ALIGNMENT_RELATION, TYPING_RELATION,
};

/// A trained or loaded model of either family.
enum Model {
    Scop(ScopModel),
    Baseline(Baseline),
}

impl Model {
    fn name(&self) -> &'static str {
        match self {
            Model::Scop(_) => "scop",
            Model::Baseline(b) => b.kind.name(),
        }
    }

    fn params(&self) -> Vec<(String, scop_core::tensor::Tensor)> {
        match self {
            Model::Scop(m) => m.params(),
            Model::Baseline(b) => b.params(),
        }
    }

    /// Config entries stored in the checkpoint so it can be rebuilt.
    fn config_entries(&self) -> Vec<(String, String)> {
        match self {
            Model::Scop(m) => {
                let c = &m.config;
                vec![
                    ("model".into(), "scop".into()),
                    ("dim".into(), c.dim.to_string()),
                    ("layers".into(), c.layers.to_string()),
                    ("heads".into(), c.heads.to_string()),
                    ("cap".into(), c.cap.to_string()),
                    ("dropout".into(), c.dropout.to_string()),
                    ("n_entities".into(), c.n_entities.to_string()),
                    ("n_relations".into(), c.n_relations.to_string()),
                ]
            }
            Model::Baseline(b) => vec![
                ("model".into(), b.kind.name().into()),
                ("dim".into(), b.dim.to_string()),
                ("n_entities".into(), b.n_entities().to_string()),
                ("n_relations".into(), b.n_relations().to_string()),
            ],
        }
    }

    /// Expected entity/relation vocabulary sizes.
    fn vocab_sizes(&self) -> (usize, usize) {
        match self {
            Model::Scop(m) => (m.config.n_entities, m.config.n_relations),
            Model::Baseline(b) => (b.n_entities(), b.n_relations()),
        }
    }
}

fn ckpt_value<'c>(ck: &'c Checkpoint, key: &str) -> Result<&'c str> {
    ck.config_value(key)
        .ok_or_else(|| anyhow::anyhow!("checkpoint config is missing `{key}`"))
}

fn ckpt_parse<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    ckpt_value(ck, key)?.parse::<T>().with_context(|| format!("checkpoint config key `{key}`"))
}

/// Rebuild the model a checkpoint describes and load its weights.
fn load_model(ck: &Checkpoint) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = match ckpt_value(ck, "model")? {
        "scop" => {
            let config = ModelConfig {
                dim: ckpt_parse(ck, "dim")?,
                layers: ckpt_parse(ck, "layers")?,
                heads: ckpt_parse(ck, "heads")?,
                cap: ckpt_parse(ck, "cap")?,
                dropout: ckpt_parse(ck, "dropout")?,
                n_entities: ckpt_parse(ck, "n_entities")?,
                n_relations: ckpt_parse(ck, "n_relations")?,
            };
            Model::Scop(ScopModel::new(config, &mut rng)?)
        }
        name => {
            let kind = BaselineKind::parse(name)
                .ok_or_else(|| anyhow::anyhow!("checkpoint has unknown model {name:?}"))?;
            Model::Baseline(Baseline::new(
                kind,
                ckpt_parse(ck, "dim")?,
                ckpt_parse(ck, "n_entities")?,
                ckpt_parse(ck, "n_relations")?,
                &mut rng,
            ))
        }
    };
    checkpoint::load_into(ck, &model.params())?;
    Ok(model)
}

/// The embedding tables are indexed by vocabulary id, so a checkpoint only
/// makes sense against the graph it was trained on.
fn check_vocab(model: &Model, store: &TripleStore) -> Result<()> {
    let (ents, rels) = model.vocab_sizes();
    if ents != store.entity_count() || rels != store.relation_count() {
        bail!(
            "checkpoint was trained on {ents} entities / {rels} relations, \
             but this graph has {} / {}",
            store.entity_count(),
            store.relation_count(),
        );
    }
    Ok(())
}

fn print_outcome(outcome: &TrainOutcome) {
    println!("steps: {}", outcome.steps);
    println!("epochs: {}", outcome.epochs_run);
    if let Some(loss) = outcome.final_loss() {
        println!("final loss: {loss:.6}");
    }
    if let Some(acc) = outcome.final_accuracy() {
        println!("train accuracy: {acc:.4}");
    }
    if outcome.negatives_exhausted > 0 {
        println!("negatives exhausted: {}", outcome.negatives_exhausted);
    }
}

fn run_entries(s: &Settings, extra: &[(&str, String)]) -> Vec<(String, String)> {
    let mut entries = s.resolved_entries();
    for (k, v) in extra {
        entries.push((k.to_string(), v.clone()));
    }
    entries
}

// ---------------------------------------------------------------- dataset

pub fn build_dataset(kg: &str, out: &Path, common: &CommonOpts) -> Result<()> {
    let s = Settings::resolve(common)?;
    let TaskKind::Pairs { relation, label } = s.task_kind() else {
        bail!("build-dataset needs a pair task: pass --task typing|alignment or --relation <name>");
    };
    let store = load_graph(kg, s.seed)?;
    let ratios = s.split_ratios(&relation)?;
    let ds = TaskDataset::build(&store, &relation, ratios, s.seed)?;

    write_dataset_dir(out, &ds)?;
    write_run_cfg(out, &run_entries(&s, &[("command", "build-dataset".into()), ("kg", kg.into())]))?;

    println!("task: {label}");
    println!("relation: {relation}");
    println!("pairs: {}", ds.train.len() + ds.dev.len() + ds.test.len());
    println!("splits: {}/{}/{}", ds.train.len(), ds.dev.len(), ds.test.len());
    println!("candidates: {}", ds.candidate_pool.len());
    println!("context triples: {}", ds.context.len());
    Ok(())
}

// ---------------------------------------------------------------- training

pub fn pretrain(kg: &str, out: &Path, common: &CommonOpts) -> Result<()> {
    let s = Settings::resolve(common)?;
    let store = load_graph(kg, s.seed)?;
    if store.is_empty() {
        bail!("graph {kg:?} has no triples");
    }
    let tcfg = s.train_config()?;
    ensure_dir(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let (model, outcome) = match s.model {
        ModelChoice::Scop => {
            let mcfg = s.model_config(store.entity_count(), store.relation_count());
            let m = ScopModel::new(mcfg, &mut rng)?;
            let outcome = train::pretrain(&m, &store, &tcfg)?;
            (Model::Scop(m), outcome)
        }
        ModelChoice::Baseline(kind) => {
            let b = Baseline::new(kind, s.dim, store.entity_count(), store.relation_count(), &mut rng);
            let outcome = train_baseline(&b, &store, &tcfg)?;
            (Model::Baseline(b), outcome)
        }
    };

    let mut entries = model.config_entries();
    entries.push(("phase".into(), "pretrain".into()));
    checkpoint::save(&checkpoint_path(out), &entries, &model.params())?;
    write_loss_csv(&loss_path(out), &outcome.rows)?;
    write_run_cfg(out, &run_entries(&s, &[("command", "pretrain".into()), ("kg", kg.into())]))?;

    println!("model: {}", model.name());
    println!("triples: {}", store.len());
    print_outcome(&outcome);
    println!("checkpoint: {}", checkpoint_path(out).display());
    Ok(())
}

/// Resolve the training corpus for finetune/evaluate/analyze: either a raw
/// graph (split on the fly) or a dataset directory written by build-dataset.
enum TaskData {
    /// Whole-graph triple classification.
    Graph(TripleStore),
    /// Pair task with its context graph and splits.
    Pairs { ds: TaskDataset, label: String },
}

fn load_task_data(kg: Option<&str>, data: Option<&Path>, s: &Settings) -> Result<TaskData> {
    match (kg, data) {
        (Some(_), Some(_)) => bail!("pass either --kg or --data, not both"),
        (None, None) => bail!("pass a data source: --kg <graph.tsv> or --data <dataset dir>"),
        (Some(kg), None) => {
            let store = load_graph(kg, s.seed)?;
            match s.task_kind() {
                TaskKind::Triples => Ok(TaskData::Graph(store)),
                TaskKind::Pairs { relation, label } => {
                    let ratios = s.split_ratios(&relation)?;
                    let ds = TaskDataset::build(&store, &relation, ratios, s.seed)?;
                    Ok(TaskData::Pairs { ds, label: label.to_string() })
                }
            }
        }
        (None, Some(dir)) => {
            // A dataset directory is always a pair task over its relation.
            let ds = load_dataset_dir(dir)?;
            let relation = ds.context.relations.name(ds.relation).to_string();
            let label = match relation.as_str() {
                TYPING_RELATION => "typing",
                ALIGNMENT_RELATION => "alignment",
                _ => "pairs",
            };
            Ok(TaskData::Pairs { ds, label: label.to_string() })
        }
    }
}

pub fn finetune(
    kg: Option<&str>,
    data: Option<&Path>,
    ckpt: &Path,
    out: &Path,
    common: &CommonOpts,
) -> Result<()> {
    let s = Settings::resolve(common)?;
    let ck = checkpoint::load(ckpt)?;
    let model = load_model(&ck)?;
    let tcfg = s.train_config()?;
    let task_data = load_task_data(kg, data, &s)?;
    ensure_dir(out)?;

    let (outcome, task_label, relation_name) = match &task_data {
        TaskData::Graph(store) => {
            check_vocab(&model, store)?;
            let outcome = match &model {
                Model::Scop(m) => train::finetune_triples(m, store, &tcfg)?,
                Model::Baseline(b) => train_baseline(b, store, &tcfg)?,
            };
            (outcome, "triples".to_string(), None)
        }
        TaskData::Pairs { ds, label } => {
            check_vocab(&model, &ds.context)?;
            if ds.train.is_empty() {
                bail!("the task has no training pairs");
            }
            let outcome = match &model {
                Model::Scop(m) => train::finetune(m, ds, &tcfg)?,
                Model::Baseline(b) => finetune_baseline(b, ds, &tcfg)?,
            };
            let rel = ds.context.relations.name(ds.relation).to_string();
            (outcome, label.clone(), Some(rel))
        }
    };

    let mut entries = model.config_entries();
    entries.push(("phase".into(), "finetune".into()));
    entries.push(("task".into(), task_label.clone()));
    if let Some(rel) = &relation_name {
        entries.push(("task_relation".into(), rel.clone()));
    }
    checkpoint::save(&checkpoint_path(out), &entries, &model.params())?;
    write_loss_csv(&loss_path(out), &outcome.rows)?;

    let mut extra = vec![("command", "finetune".to_string()), ("ckpt", ckpt.display().to_string())];
    if let Some(kg) = kg {
        extra.push(("kg", kg.to_string()));
    }
    if let Some(data) = data {
        extra.push(("data", data.display().to_string()));
    }
    write_run_cfg(out, &run_entries(&s, &extra))?;

    println!("model: {}", model.name());
    println!("task: {task_label}");
    print_outcome(&outcome);
    println!("checkpoint: {}", checkpoint_path(out).display());
    Ok(())
}

// ---------------------------------------------------------------- scoring

fn split_pairs(ds: &TaskDataset, split: SplitChoice) -> &[(u32, u32)] {
    match split {
        SplitChoice::Train => &ds.train,
        SplitChoice::Dev => &ds.dev,
        SplitChoice::Test => &ds.test,
    }
}

/// A uniform fallible scoring closure over both model families.
fn make_scorer<'m>(
    model: &'m Model,
    store: &'m TripleStore,
    head: TaskHead,
    seed: u64,
) -> Box<dyn FnMut(Triple) -> Result<f64> + 'm> {
    match model {
        Model::Scop(m) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Box::new(move |t| Ok(m.score_triple(store, t, head, &mut rng)?))
        }
        Model::Baseline(b) => {
            let scorer: BaselineScorer = b.scorer();
            Box::new(move |t| Ok(scorer.score(t)))
        }
    }
}

#[derive(serde::Serialize)]
struct EvalReport<'a> {
    model: &'a str,
    task: &'a str,
    relation: &'a str,
    split: &'a str,
    head: &'a str,
    #[serde(flatten)]
    ranking: RankingReport,
}

pub fn evaluate(
    kg: Option<&str>,
    data: Option<&Path>,
    ckpt: &Path,
    out: &Path,
    common: &CommonOpts,
) -> Result<()> {
    let s = Settings::resolve(common)?;
    let ck = checkpoint::load(ckpt)?;
    let model = load_model(&ck)?;
    let TaskData::Pairs { ds, label } = load_task_data(kg, data, &s)? else {
        bail!("evaluate ranks pair tasks; for triple classification use `analyze`");
    };
    check_vocab(&model, &ds.context)?;
    ensure_dir(out)?;

    let pairs = split_pairs(&ds, s.split);
    if pairs.is_empty() {
        bail!("the {} split has no pairs", s.split.name());
    }
    let known: HashSet<(u32, u32)> =
        ds.train.iter().chain(&ds.dev).chain(&ds.test).copied().collect();

    let mut score = make_scorer(&model, &ds.context, s.head.task_head(), s.seed ^ 0xE7A1);
    let ranking = rank_pairs(pairs, ds.relation, &ds.candidate_pool, &known, &mut score)?;
    drop(score);

    let relation = ds.context.relations.name(ds.relation).to_string();
    let report = EvalReport {
        model: model.name(),
        task: &label,
        relation: &relation,
        split: s.split.name(),
        head: s.head.name(),
        ranking,
    };
    write_json(&out.join("eval.json"), &report)?;

    let mut extra = vec![("command", "evaluate".to_string()), ("ckpt", ckpt.display().to_string())];
    if let Some(kg) = kg {
        extra.push(("kg", kg.to_string()));
    }
    if let Some(data) = data {
        extra.push(("data", data.display().to_string()));
    }
    write_run_cfg(out, &run_entries(&s, &extra))?;

    println!("model: {}", report.model);
    println!("task: {label} ({relation}, {} split)", report.split);
    println!("queries: {}", report.ranking.queries);
    println!("mean pool size: {:.1}", report.ranking.mean_pool_size);
    println!("mrr: {:.4}", report.ranking.mrr);
    println!("hits@1: {:.4}", report.ranking.hits_at_1);
    println!("hits@3: {:.4}", report.ranking.hits_at_3);
    println!("hits@10: {:.4}", report.ranking.hits_at_10);
    Ok(())
}

#[derive(serde::Serialize)]
struct SweepReport<'a> {
    model: &'a str,
    task: &'a str,
    split: &'a str,
    positives: usize,
    negatives: usize,
    points: &'a [MarginPoint],
    accuracy_spread: f64,
}

pub fn analyze(
    kg: Option<&str>,
    data: Option<&Path>,
    ckpt: &Path,
    out: &Path,
    common: &CommonOpts,
) -> Result<()> {
    let s = Settings::resolve(common)?;
    let ck = checkpoint::load(ckpt)?;
    let model = load_model(&ck)?;
    let task_data = load_task_data(kg, data, &s)?;
    ensure_dir(out)?;

    // Positives, their context graph, and the matching corruption scheme.
    let (positives, store, mut sampler, label): (Vec<Triple>, &TripleStore, _, String) =
        match &task_data {
            TaskData::Graph(store) => {
                (store.triples().to_vec(), store, NegativeSampler::new(), "triples".into())
            }
            TaskData::Pairs { ds, label } => {
                let pairs = split_pairs(ds, s.split);
                if pairs.is_empty() {
                    bail!("the {} split has no pairs", s.split.name());
                }
                (
                    train::task_triples(ds, pairs),
                    &ds.context,
                    NegativeSampler::with_slot_probs(0.0, 1.0, 0.0),
                    label.clone(),
                )
            }
        };
    check_vocab(&model, store)?;

    let mut neg_rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0xA7A1);
    let negatives: Vec<Triple> =
        positives.iter().map(|p| sampler.sample(store, p, &mut neg_rng).0).collect();

    let mut score = make_scorer(&model, store, s.head.task_head(), s.seed ^ 0x5C02);
    let pos_scores: Vec<f64> =
        positives.iter().map(|&t| score(t)).collect::<Result<_>>()?;
    let neg_scores: Vec<f64> =
        negatives.iter().map(|&t| score(t)).collect::<Result<_>>()?;
    drop(score);

    let points = margin_sweep(&pos_scores, &neg_scores, &s.gammas);
    let spread = accuracy_spread(&points);

    let report = SweepReport {
        model: model.name(),
        task: &label,
        split: s.split.name(),
        positives: pos_scores.len(),
        negatives: neg_scores.len(),
        points: &points,
        accuracy_spread: spread,
    };
    write_json(&out.join("sweep.json"), &report)?;

    let mut csv = Vec::new();
    write_score_distribution(&mut csv, &pos_scores, &neg_scores)?;
    write_atomic(&out.join("distribution.csv"), &csv)
        .with_context(|| format!("writing {}", out.join("distribution.csv").display()))?;

    let mut extra = vec![("command", "analyze".to_string()), ("ckpt", ckpt.display().to_string())];
    if let Some(kg) = kg {
        extra.push(("kg", kg.to_string()));
    }
    if let Some(data) = data {
        extra.push(("data", data.display().to_string()));
    }
    write_run_cfg(out, &run_entries(&s, &extra))?;

    println!("model: {}", report.model);
    println!("task: {label}");
    println!("scored: {} positives, {} negatives", pos_scores.len(), neg_scores.len());
    for point in &points {
        println!("gamma {:.0}%: accuracy {:.4}", point.margin * 100.0, point.accuracy);
    }
    println!("accuracy spread: {spread:.4}");
    Ok(())
}

// ---------------------------------------------------------------- gradcheck

#[derive(serde::Serialize)]
struct GradCheckArtifact {
    model: String,
    dim: usize,
    layers: usize,
    heads: usize,
    cap: usize,
    tolerance: f64,
    max_rel_error: f64,
    worst_param: String,
    pass: bool,
    per_param: std::collections::BTreeMap<String, f64>,
}

/// Fold one head's report into the running combined report.
fn merge_report(into: &mut GradCheckReport, from: GradCheckReport) {
    if from.max_rel_error > into.max_rel_error {
        into.max_rel_error = from.max_rel_error;
        into.worst_param = from.worst_param;
        into.worst_index = from.worst_index;
        into.worst_analytic = from.worst_analytic;
        into.worst_numeric = from.worst_numeric;
    }
    for (name, err) in from.per_param {
        let entry = into.per_param.entry(name).or_insert(0.0);
        if err > *entry {
            *entry = err;
        }
    }
}

/// Central-difference step for the audit. Smaller than the engine default on
/// purpose: a bias element perturbed by ±h shifts a whole relu pre-activation
/// lane by the full step, and at this scale of initialization a 1e-3 window
/// regularly straddles the relu kink, corrupting the numerical slope. At 1e-6
/// a crossing is a thousand times rarer while the difference quotient stays
/// far above the 64-bit rounding floor (observed error ~1e-8).
const AUDIT_STEP: f64 = 1e-6;

pub fn gradcheck(tolerance: Option<f64>, out: Option<&Path>, common: &CommonOpts) -> Result<()> {
    let s = Settings::resolve(common)?;
    let tolerance = tolerance.unwrap_or(1e-3);
    // The audit defaults to the smallest interesting configuration instead
    // of the preset sizes: finite differences cost two forwards per scalar.
    let dim = common.dim.unwrap_or(8);
    let layers = common.layers.unwrap_or(1);
    let heads = common.heads.unwrap_or(1);
    let cap = common.cap.unwrap_or(4);

    let store = scop_core::synth::toy_graph(s.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);

    // A fixed batch: two stored triples and two corruptions of them.
    let mut sampler = NegativeSampler::new();
    let positives = [store.triple(0), store.triple(1)];
    let negatives: Vec<Triple> =
        positives.iter().map(|p| sampler.sample(&store, p, &mut rng).0).collect();

    let (report, params_len, model_name) = match s.model {
        ModelChoice::Scop => {
            let config = ModelConfig {
                dim,
                layers,
                heads,
                cap,
                dropout: 0.0,
                n_entities: store.entity_count(),
                n_relations: store.relation_count(),
            };
            let model = ScopModel::new(config, &mut rng)?;
            let mut batch = Vec::new();
            for &t in &positives {
                batch.push((assemble_sequence(&store, t, cap, &mut rng), true));
            }
            for &t in &negatives {
                batch.push((assemble_sequence(&store, t, cap, &mut rng), false));
            }
            let params = model.params();

            // Both heads, so every parameter tensor gets a live gradient in
            // at least one pass (each head leaves the other head's weights
            // untouched, where analytic and numeric are both zero).
            let mut combined: Option<GradCheckReport> = None;
            for head in [TaskHead::Pretrain, TaskHead::Finetune] {
                let loss = || {
                    let mut unused = ChaCha8Rng::seed_from_u64(0);
                    model.batch_loss(&batch, head, false, &mut unused)
                };
                let report = grad_check(&loss, &params, AUDIT_STEP)?;
                match &mut combined {
                    None => combined = Some(report),
                    Some(c) => merge_report(c, report),
                }
            }
            (combined.expect("two passes ran"), params.len(), "scop".to_string())
        }
        ModelChoice::Baseline(kind) => {
            let b = Baseline::new(kind, dim, store.entity_count(), store.relation_count(), &mut rng);
            let params = b.params();
            let pos = positives.to_vec();
            let neg = negatives.clone();
            let loss = move || b.batch_loss(&pos, &neg);
            let report = grad_check(&loss, &params, AUDIT_STEP)?;
            (report, params.len(), kind.name().to_string())
        }
    };

    println!("model: {model_name}");
    println!("config: dim {dim}, layers {layers}, heads {heads}, cap {cap}");
    println!("parameter tensors: {params_len}");
    for (name, err) in &report.per_param {
        println!("  {name}: {err:.3e}");
    }
    println!(
        "max relative error: {:.3e} ({} [{}]: analytic {:.6e}, numeric {:.6e})",
        report.max_rel_error,
        report.worst_param,
        report.worst_index,
        report.worst_analytic,
        report.worst_numeric,
    );
    println!("tolerance: {tolerance:.1e}");
    let pass = report.passes(tolerance);
    println!("{}", if pass { "PASS" } else { "FAIL" });

    if let Some(dir) = out {
        ensure_dir(dir)?;
        let artifact = GradCheckArtifact {
            model: model_name,
            dim,
            layers,
            heads,
            cap,
            tolerance,
            max_rel_error: report.max_rel_error,
            worst_param: report.worst_param.clone(),
            pass,
            per_param: report.per_param.clone(),
        };
        write_json(&dir.join("gradcheck.json"), &artifact)?;
        write_run_cfg(dir, &run_entries(&s, &[("command", "gradcheck".into())]))?;
    }

    if !pass {
        bail!("gradient check failed: max relative error {:.3e} >= {tolerance:.1e}", report.max_rel_error);
    }
    Ok(())
}
