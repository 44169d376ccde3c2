//! Run configuration: preset defaults, an optional `key = value` config
//! file, and command-line flags, resolved in that order (flags win).

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use scop_core::baselines::BaselineKind;
use scop_core::kg::SplitRatios;
use scop_core::model::{ModelConfig, TaskHead};
use scop_core::synth::{WN_HYPERNYM_RATIOS, WN_SIMILAR_RATIOS};
use scop_core::train::TrainConfig;

/// Seed used when none is given, so every run is deterministic by default.
pub const DEFAULT_SEED: u64 = 13;

/// Relation behind the entity-typing task.
pub const TYPING_RELATION: &str = "_hypernym";
/// Relation behind the entity-alignment task.
pub const ALIGNMENT_RELATION: &str = "_similar_to";

/// Flags shared by every subcommand. All values are optional here; the
/// resolver fills gaps from the config file, then from the preset.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct CommonOpts {
    /// Config file of `key = value` lines; flags override its entries.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Scale preset supplying defaults: `full` or `toy`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Seed for every random choice in the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model family: `scop`, `transe`, `complex`, or `rotate`.
    #[arg(long)]
    pub model: Option<String>,
    /// Hidden width (and baseline embedding width).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Encoder depth.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Attention heads per layer.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Context slots per anchor segment.
    #[arg(long)]
    pub cap: Option<usize>,
    /// Dropout probability during training.
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Linear warmup steps.
    #[arg(long)]
    pub warmup: Option<u64>,
    /// Positives per optimizer step (each brings one negative).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training epochs. Required unless the preset supplies one.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop early once the train-set probe reaches this accuracy.
    #[arg(long)]
    pub target_accuracy: Option<f64>,
    /// Task selector: `triples`, `typing`, or `alignment`.
    #[arg(long)]
    pub task: Option<String>,
    /// Task relation name; overrides the task's default relation.
    #[arg(long)]
    pub relation: Option<String>,
    /// Decision margins as percentages of the score range, e.g. `20,40,60,80`.
    #[arg(long)]
    pub gammas: Option<String>,
    /// Train/dev/test fractions, e.g. `0.8,0.1,0.1`.
    #[arg(long)]
    pub ratios: Option<String>,
    /// Split to evaluate: `train`, `dev`, or `test`.
    #[arg(long)]
    pub split: Option<String>,
    /// Scoring head: `pretrain` or `finetune`.
    #[arg(long)]
    pub head: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Full,
    Toy,
}

impl Preset {
    fn parse(s: &str) -> Result<Preset> {
        match s {
            "full" => Ok(Preset::Full),
            "toy" => Ok(Preset::Toy),
            other => bail!("unknown preset {other:?} (expected `full` or `toy`)"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Toy => "toy",
        }
    }
}

/// Per-preset defaults. Epochs are deliberately absent from the full-scale
/// preset: runs at that scale must state their budget explicitly.
struct PresetDefaults {
    dim: usize,
    layers: usize,
    heads: usize,
    cap: usize,
    dropout: f64,
    lr: f64,
    warmup: u64,
    batch_size: usize,
    epochs: Option<usize>,
    check_every: usize,
}

impl Preset {
    fn defaults(self) -> PresetDefaults {
        match self {
            Preset::Full => PresetDefaults {
                dim: 192,
                layers: 6,
                heads: 3,
                cap: 84,
                dropout: 0.1,
                lr: 2e-5,
                warmup: 1000,
                batch_size: 32,
                epochs: None,
                check_every: 1,
            },
            Preset::Toy => PresetDefaults {
                dim: 32,
                layers: 2,
                heads: 2,
                cap: 8,
                dropout: 0.0,
                lr: 2e-3,
                warmup: 50,
                batch_size: 8,
                epochs: Some(200),
                check_every: 5,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Scop,
    Baseline(BaselineKind),
}

impl ModelChoice {
    fn parse(s: &str) -> Result<ModelChoice> {
        if s == "scop" {
            return Ok(ModelChoice::Scop);
        }
        BaselineKind::parse(s).map(ModelChoice::Baseline).ok_or_else(|| {
            anyhow::anyhow!("unknown model {s:?} (expected scop, transe, complex, or rotate)")
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::Scop => "scop",
            ModelChoice::Baseline(kind) => kind.name(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskChoice {
    Triples,
    Typing,
    Alignment,
}

impl TaskChoice {
    fn parse(s: &str) -> Result<TaskChoice> {
        match s {
            "triples" => Ok(TaskChoice::Triples),
            "typing" => Ok(TaskChoice::Typing),
            "alignment" => Ok(TaskChoice::Alignment),
            other => bail!("unknown task {other:?} (expected triples, typing, or alignment)"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskChoice::Triples => "triples",
            TaskChoice::Typing => "typing",
            TaskChoice::Alignment => "alignment",
        }
    }
}

/// What a command actually operates on once task/relation flags combine.
#[derive(Debug, Clone)]
pub enum TaskKind {
    /// Triple classification over the whole graph.
    Triples,
    /// Pair completion over one relation's `(head, tail)` pairs.
    Pairs { relation: String, label: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Dev,
    Test,
}

impl SplitChoice {
    fn parse(s: &str) -> Result<SplitChoice> {
        match s {
            "train" => Ok(SplitChoice::Train),
            "dev" => Ok(SplitChoice::Dev),
            "test" => Ok(SplitChoice::Test),
            other => bail!("unknown split {other:?} (expected train, dev, or test)"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SplitChoice::Train => "train",
            SplitChoice::Dev => "dev",
            SplitChoice::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadChoice {
    Pretrain,
    Finetune,
}

impl HeadChoice {
    fn parse(s: &str) -> Result<HeadChoice> {
        match s {
            "pretrain" => Ok(HeadChoice::Pretrain),
            "finetune" => Ok(HeadChoice::Finetune),
            other => bail!("unknown head {other:?} (expected pretrain or finetune)"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadChoice::Pretrain => "pretrain",
            HeadChoice::Finetune => "finetune",
        }
    }

    pub fn task_head(self) -> TaskHead {
        match self {
            HeadChoice::Pretrain => TaskHead::Pretrain,
            HeadChoice::Finetune => TaskHead::Finetune,
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct Settings {
    pub preset: Preset,
    pub seed: u64,
    pub model: ModelChoice,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub cap: usize,
    pub dropout: f64,
    pub lr: f64,
    pub warmup: u64,
    pub batch_size: usize,
    pub epochs: Option<usize>,
    pub check_every: usize,
    pub target_accuracy: Option<f64>,
    pub task: TaskChoice,
    pub relation: Option<String>,
    /// Margins as fractions of the normalized score range.
    pub gammas: Vec<f64>,
    /// Explicit split fractions; `None` means per-relation defaults.
    pub ratios: Option<(f64, f64, f64)>,
    pub split: SplitChoice,
    pub head: HeadChoice,
}

fn parse_config_file(path: &PathBuf) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected `key = value`, got {raw:?}", path.display(), line_no + 1);
        };
        // Keys may be written flag-style (`batch-size`) or plainly.
        let key = key.trim().replace('-', "_");
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

/// Parse a comma-separated list of numbers.
fn parse_list(value: &str, label: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .with_context(|| format!("bad {label} entry {part:?} in {value:?}"))
        })
        .collect()
}

impl Settings {
    pub fn resolve(opts: &CommonOpts) -> Result<Settings> {
        let file = match &opts.config {
            Some(path) => parse_config_file(path)?,
            None => BTreeMap::new(),
        };

        // A typed lookup: flag value, else config-file entry, else None.
        fn pick<T, F>(flag: &Option<T>, file: &BTreeMap<String, String>, key: &str, parse: F) -> Result<Option<T>>
        where
            T: Clone,
            F: Fn(&str) -> Result<T>,
        {
            if let Some(v) = flag {
                return Ok(Some(v.clone()));
            }
            match file.get(key) {
                Some(raw) => parse(raw).map(Some).with_context(|| format!("config key `{key}`")),
                None => Ok(None),
            }
        }
        let num = |raw: &str| raw.parse::<usize>().map_err(Into::into);
        let flt = |raw: &str| raw.parse::<f64>().map_err(Into::into);

        let preset = pick(&opts.preset, &file, "preset", |s| Ok(s.to_string()))?
            .map(|s| Preset::parse(&s))
            .transpose()?
            .unwrap_or(Preset::Full);
        let d = preset.defaults();

        let seed = pick(&opts.seed, &file, "seed", |s| s.parse::<u64>().map_err(Into::into))?
            .unwrap_or(DEFAULT_SEED);
        let model = pick(&opts.model, &file, "model", |s| Ok(s.to_string()))?
            .map(|s| ModelChoice::parse(&s))
            .transpose()?
            .unwrap_or(ModelChoice::Scop);
        let task = pick(&opts.task, &file, "task", |s| Ok(s.to_string()))?
            .map(|s| TaskChoice::parse(&s))
            .transpose()?
            .unwrap_or(TaskChoice::Triples);
        let split = pick(&opts.split, &file, "split", |s| Ok(s.to_string()))?
            .map(|s| SplitChoice::parse(&s))
            .transpose()?
            .unwrap_or(SplitChoice::Test);
        let head = pick(&opts.head, &file, "head", |s| Ok(s.to_string()))?
            .map(|s| HeadChoice::parse(&s))
            .transpose()?
            .unwrap_or(HeadChoice::Finetune);

        let gammas_pct = match pick(&opts.gammas, &file, "gammas", |s| Ok(s.to_string()))? {
            Some(raw) => parse_list(&raw, "gamma")?,
            None => vec![20.0, 40.0, 60.0, 80.0],
        };
        for &g in &gammas_pct {
            if !(0.0..=100.0).contains(&g) {
                bail!("gamma {g} out of range (margins are percentages of the score range)");
            }
        }

        let ratios = match pick(&opts.ratios, &file, "ratios", |s| Ok(s.to_string()))? {
            Some(raw) => {
                let parts = parse_list(&raw, "ratio")?;
                if parts.len() != 3 {
                    bail!("--ratios wants three comma-separated fractions, got {raw:?}");
                }
                Some((parts[0], parts[1], parts[2]))
            }
            None => None,
        };

        Ok(Settings {
            preset,
            seed,
            model,
            dim: pick(&opts.dim, &file, "dim", num)?.unwrap_or(d.dim),
            layers: pick(&opts.layers, &file, "layers", num)?.unwrap_or(d.layers),
            heads: pick(&opts.heads, &file, "heads", num)?.unwrap_or(d.heads),
            cap: pick(&opts.cap, &file, "cap", num)?.unwrap_or(d.cap),
            dropout: pick(&opts.dropout, &file, "dropout", flt)?.unwrap_or(d.dropout),
            lr: pick(&opts.lr, &file, "lr", flt)?.unwrap_or(d.lr),
            warmup: pick(&opts.warmup, &file, "warmup", |s| s.parse::<u64>().map_err(Into::into))?
                .unwrap_or(d.warmup),
            batch_size: pick(&opts.batch_size, &file, "batch_size", num)?.unwrap_or(d.batch_size),
            epochs: pick(&opts.epochs, &file, "epochs", num)?.or(d.epochs),
            check_every: d.check_every,
            target_accuracy: pick(&opts.target_accuracy, &file, "target_accuracy", flt)?,
            task,
            relation: pick(&opts.relation, &file, "relation", |s| Ok(s.to_string()))?,
            gammas: gammas_pct.iter().map(|g| g / 100.0).collect(),
            ratios,
            split,
            head,
        })
    }

    /// The epoch budget; full-scale runs must state one explicitly.
    pub fn epochs_required(&self) -> Result<usize> {
        self.epochs
            .ok_or_else(|| anyhow::anyhow!("--epochs is required (the full preset has no default)"))
    }

    /// What the task/relation flags select. An explicit relation always
    /// means a pair task, even without `--task`.
    pub fn task_kind(&self) -> TaskKind {
        if let Some(rel) = &self.relation {
            let label = match rel.as_str() {
                TYPING_RELATION => "typing",
                ALIGNMENT_RELATION => "alignment",
                _ => "pairs",
            };
            return TaskKind::Pairs { relation: rel.clone(), label };
        }
        match self.task {
            TaskChoice::Triples => TaskKind::Triples,
            TaskChoice::Typing => {
                TaskKind::Pairs { relation: TYPING_RELATION.to_string(), label: "typing" }
            }
            TaskChoice::Alignment => {
                TaskKind::Pairs { relation: ALIGNMENT_RELATION.to_string(), label: "alignment" }
            }
        }
    }

    /// Split fractions for a relation: an explicit `--ratios` wins;
    /// otherwise the two benchmark relations use the published split
    /// proportions and everything else splits 0.8/0.1/0.1.
    pub fn split_ratios(&self, relation: &str) -> Result<SplitRatios> {
        let (train, dev, test) = match self.ratios {
            Some(r) => r,
            None => match relation {
                TYPING_RELATION => WN_HYPERNYM_RATIOS,
                ALIGNMENT_RELATION => WN_SIMILAR_RATIOS,
                _ => (0.8, 0.1, 0.1),
            },
        };
        Ok(SplitRatios::new(train, dev, test)?)
    }

    pub fn model_config(&self, n_entities: usize, n_relations: usize) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            cap: self.cap,
            dropout: self.dropout,
            n_entities,
            n_relations,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr: self.lr,
            warmup: self.warmup,
            batch_size: self.batch_size,
            epochs: self.epochs_required()?,
            seed: self.seed,
            target_accuracy: self.target_accuracy,
            check_every: self.check_every,
        })
    }

    /// Every resolved value as `key = value` lines for the run sidecar.
    pub fn resolved_entries(&self) -> Vec<(String, String)> {
        let mut rows: Vec<(String, String)> = vec![
            ("preset".into(), self.preset.name().into()),
            ("seed".into(), self.seed.to_string()),
            ("model".into(), self.model.name().into()),
            ("dim".into(), self.dim.to_string()),
            ("layers".into(), self.layers.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("cap".into(), self.cap.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("warmup".into(), self.warmup.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("task".into(), self.task.name().into()),
            ("split".into(), self.split.name().into()),
            ("head".into(), self.head.name().into()),
            (
                "gammas".into(),
                self.gammas
                    .iter()
                    .map(|g| format!("{}", g * 100.0))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ];
        if let Some(e) = self.epochs {
            rows.push(("epochs".into(), e.to_string()));
        }
        if let Some(t) = self.target_accuracy {
            rows.push(("target_accuracy".into(), t.to_string()));
        }
        if let Some(rel) = &self.relation {
            rows.push(("relation".into(), rel.clone()));
        }
        if let Some((a, b, c)) = self.ratios {
            rows.push(("ratios".into(), format!("{a},{b},{c}")));
        }
        rows
    }
}
