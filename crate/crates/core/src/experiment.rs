//! Experiment configs and run directories.
//!
//! A run directory holds `config.json` (the config that reproduces it),
//! `tokenizer.json`, `metrics.jsonl`, `checkpoints/` and `eval.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model, save_model};
use crate::eval::{evaluate_task, teacher_forced, EvalOptions, EvalReport, TaskEval};
use crate::json::canonical;
use crate::model::Vlm;
use crate::synth::{self, Split, SynthOptions};
use crate::task::{encode, encode_text, read_jsonl, EncodeOptions, EncodedExample, RawExample, TaskRegistry};
use crate::tokenizer::Tokenizer;
use crate::train::{ensure_task, train, Regime, TrainConfig, TrainReport, UNSTEERED};
use crate::{ModelConfig, Result, VlmError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Language-model training of the backbone on plain text.
    Pretrain,
    /// Task training from a pretrained (or, ablated, random) backbone.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated suite data; for pretraining, the marked-up text corpus.
    Synth {
        n: usize,
        seed: u64,
        #[serde(default)]
        options: SynthOptions,
    },
    /// JSON-lines files keyed by task; for pretraining, one text file under any key.
    Files { paths: BTreeMap<String, PathBuf> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    #[serde(default)]
    pub no_task_emb: bool,
    /// Start fine-tuning from a randomly initialized backbone.
    #[serde(default)]
    pub no_pretrain: bool,
}

impl Ablation {
    pub fn names(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.no_task_emb {
            v.push("no_task_emb".to_string());
        }
        if self.no_pretrain {
            v.push("no_pretrain".to_string());
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub stage: Stage,
    pub model: ModelConfig,
    /// Tokenizer file; the suite tokenizer when absent.
    #[serde(default)]
    pub tokenizer: Option<PathBuf>,
    /// Task registry file; the built-in suite when absent.
    #[serde(default)]
    pub registry: Option<PathBuf>,
    /// Adapter width for built-in suite tasks.
    #[serde(default = "bottleneck")]
    pub bottleneck: usize,
    #[serde(default)]
    pub tasks: Vec<String>,
    pub train_data: DataSource,
    #[serde(default)]
    pub eval_data: Option<DataSource>,
    /// Checkpoint directory to start from: a backbone plus any earlier tasks.
    #[serde(default)]
    pub init: Option<PathBuf>,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub ablation: Ablation,
    pub encode: EncodeOptions,
    #[serde(default = "eval_batch")]
    pub eval_batch: usize,
    pub out_dir: PathBuf,
}

fn bottleneck() -> usize {
    16
}

fn eval_batch() -> usize {
    64
}

impl ExperimentConfig {
    /// Every problem with the config, including referenced paths that do not exist.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        let n_tasks = match self.stage {
            Stage::Pretrain => 1,
            Stage::Finetune => self.tasks.len(),
        };
        v.extend(self.train.violations(n_tasks));
        if self.seeds.is_empty() {
            v.push("seed list is empty".into());
        }
        if self.eval_batch == 0 {
            v.push("eval_batch must be positive".into());
        }
        if self.encode.max_context > self.model.max_context {
            v.push(format!(
                "encode.max_context {} exceeds the model context {}",
                self.encode.max_context, self.model.max_context
            ));
        }
        let mut paths: Vec<&Path> = Vec::new();
        paths.extend(self.tokenizer.as_deref());
        paths.extend(self.registry.as_deref());
        paths.extend(self.init.as_deref());
        for src in std::iter::once(&self.train_data).chain(self.eval_data.as_ref()) {
            if let DataSource::Files { paths: p } = src {
                paths.extend(p.values().map(PathBuf::as_path));
            }
        }
        for p in paths {
            if !p.exists() {
                v.push(format!("path {} does not exist", p.display()));
            }
        }
        match self.stage {
            Stage::Pretrain => {
                if self.train.regime != Regime::Full {
                    v.push("pretraining uses the full regime".into());
                }
                if !self.tasks.is_empty() {
                    v.push("pretraining takes no tasks".into());
                }
            }
            Stage::Finetune => {
                if self.ablation.no_pretrain && self.init.is_some() {
                    v.push("no_pretrain conflicts with an init checkpoint".into());
                }
                if self.ablation.no_pretrain && self.train.regime != Regime::Full {
                    v.push("a random backbone only makes sense with the full regime".into());
                }
                if self.init.is_none() && !self.ablation.no_pretrain {
                    v.push("fine-tuning needs an init checkpoint unless no_pretrain is set".into());
                }
                if self.registry.is_none() {
                    for t in &self.tasks {
                        if synth::spec(t, 1).is_err() {
                            v.push(format!("unknown task {t:?}"));
                        }
                    }
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(VlmError::Config(v))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed-{seed}"))
    }

    /// The single-seed config stored in a run directory.
    pub fn snapshot(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.train.seed = seed;
        c
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        match &self.tokenizer {
            Some(p) => load_tokenizer(p),
            None => synth::suite_tokenizer(self.model.vocab_size),
        }
    }

    pub fn registry(&self) -> Result<TaskRegistry> {
        match &self.registry {
            Some(p) => {
                let r: TaskRegistry = serde_json::from_str(&std::fs::read_to_string(p)?)?;
                r.validate()?;
                Ok(r)
            }
            None => Ok(synth::registry(self.bottleneck)),
        }
    }
}

pub fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn save_tokenizer(path: &Path, tok: &Tokenizer) -> Result<()> {
    std::fs::write(path, serde_json::to_string(tok)? + "\n")?;
    Ok(())
}

/// Raw examples of `task` from a data source.
pub fn load_rows(src: &DataSource, task: &str, split: Split) -> Result<Vec<RawExample>> {
    match src {
        DataSource::Synth { n, seed, options } => synth::generate(task, *n, *seed, split, options),
        DataSource::Files { paths } => {
            let p = paths
                .get(task)
                .ok_or_else(|| VlmError::Invalid(format!("no data file for task {task}")))?;
            read_jsonl(p)
        }
    }
}

/// Pretraining text lines from a data source.
pub fn load_corpus(src: &DataSource) -> Result<Vec<String>> {
    match src {
        DataSource::Synth { n, seed, .. } => Ok(synth::pretraining_corpus(*n, *seed)),
        DataSource::Files { paths } => {
            let mut lines = Vec::new();
            for p in paths.values() {
                let text = std::fs::read_to_string(p)?;
                lines.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
            }
            Ok(lines)
        }
    }
}

/// Encodes rows, skipping those whose target is empty (possible for
/// teacher-rewritten data). Returns the examples and the number skipped.
pub fn encode_rows(
    spec: &crate::task::TaskSpec,
    rows: &[RawExample],
    tok: &Tokenizer,
    opts: EncodeOptions,
) -> Result<(Vec<EncodedExample>, usize)> {
    let mut out = Vec::with_capacity(rows.len());
    let mut skipped = 0;
    for r in rows {
        if r.target_text(spec).split_whitespace().next().is_none() {
            skipped += 1;
            continue;
        }
        out.push(encode(spec, r, tok, opts)?);
    }
    Ok((out, skipped))
}

/// What one seed of an experiment produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub model: Vlm,
    pub report: TrainReport,
    pub eval: EvalReport,
}

/// Runs every seed of `cfg`, writing one run directory per seed.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    cfg.seeds.iter().map(|&s| run_seed(&cfg.snapshot(s), s)).collect()
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    let dir = cfg.run_dir(seed);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    let tok = cfg.tokenizer()?;
    save_tokenizer(&dir.join("tokenizer.json"), &tok)?;

    let (model, report, eval) = match cfg.stage {
        Stage::Pretrain => pretrain(cfg, &tok)?,
        Stage::Finetune => finetune(cfg, &tok)?,
    };
    std::fs::write(dir.join("metrics.jsonl"), report.metrics_jsonl()?)?;
    save_model(&dir.join("checkpoints"), &model)?;
    std::fs::write(dir.join("eval.json"), canonical(&eval)? + "\n")?;
    Ok(RunOutcome {
        seed,
        dir,
        model,
        report,
        eval,
    })
}

/// Mean loss over the last `window` steps, exponentiated.
pub fn final_train_perplexity(report: &TrainReport, window: usize) -> Option<f64> {
    let n = report.records.len().min(window);
    if n == 0 {
        return None;
    }
    let tail = &report.records[report.records.len() - n..];
    Some((tail.iter().map(|r| r.loss).sum::<f64>() / n as f64).exp())
}

fn pretrain(cfg: &ExperimentConfig, tok: &Tokenizer) -> Result<(Vlm, TrainReport, EvalReport)> {
    let lines = load_corpus(&cfg.train_data)?;
    if lines.is_empty() {
        return Err(VlmError::EmptyDataset("pretraining corpus".into()));
    }
    let enc = lines
        .iter()
        .map(|l| encode_text(l, tok, cfg.encode.max_context))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Vlm::init(cfg.model.clone(), cfg.train.seed)?;
    let data = BTreeMap::from([(UNSTEERED.to_string(), enc)]);
    let report = train(&mut model, &data, &cfg.train)?;

    let mut metrics = BTreeMap::new();
    if let Some(p) = final_train_perplexity(&report, 50) {
        metrics.insert("train_ppl".to_string(), p);
    }
    let mut examples = 0;
    if let Some(src) = &cfg.eval_data {
        let held = load_corpus(src)?
            .iter()
            .map(|l| encode_text(l, tok, cfg.encode.max_context))
            .collect::<Result<Vec<_>>>()?;
        if !held.is_empty() {
            let tf = teacher_forced(&model, None, &held, cfg.eval_batch)?;
            metrics.insert("token_accuracy".to_string(), tf.accuracy());
            metrics.insert("ppl".to_string(), tf.perplexity()?);
            examples = held.len();
        }
    }
    let eval = EvalReport {
        tasks: BTreeMap::from([(
            UNSTEERED.to_string(),
            TaskEval {
                examples,
                metrics,
                ..Default::default()
            },
        )]),
        ablation: Vec::new(),
    };
    Ok((model, report, eval))
}

fn finetune(cfg: &ExperimentConfig, tok: &Tokenizer) -> Result<(Vlm, TrainReport, EvalReport)> {
    let registry = cfg.registry()?;
    let mut model = match &cfg.init {
        Some(dir) => {
            let m = load_model(dir, None, false)?;
            if m.config != cfg.model {
                return Err(VlmError::Invalid(format!(
                    "checkpoint {} was built with a different model config",
                    dir.display()
                )));
            }
            m
        }
        None => Vlm::init(cfg.model.clone(), cfg.train.seed)?,
    };
    let mut data = BTreeMap::new();
    for (i, t) in cfg.tasks.iter().enumerate() {
        let spec = registry.get(t)?;
        ensure_task(&mut model, spec, cfg.train.regime, cfg.train.seed.wrapping_add(1 + i as u64))?;
        if cfg.ablation.no_task_emb {
            if let Some(p) = model.tasks.get_mut(t) {
                p.no_task_emb = true;
            }
        }
        let rows = load_rows(&cfg.train_data, t, Split::Train)?;
        let (enc, _) = encode_rows(spec, &rows, tok, cfg.encode)?;
        data.insert(t.clone(), enc);
    }
    let report = train(&mut model, &data, &cfg.train)?;
    let mut eval = EvalReport {
        tasks: BTreeMap::new(),
        ablation: cfg.ablation.names(),
    };
    if let Some(src) = &cfg.eval_data {
        for t in &cfg.tasks {
            let spec = registry.get(t)?;
            let rows = load_rows(src, t, Split::Test)?;
            let (enc, _) = encode_rows(spec, &rows, tok, cfg.encode)?;
            let opts = eval_options(spec, cfg.eval_batch);
            eval.tasks.insert(t.clone(), evaluate_task(&model, Some(t), spec, &enc, tok, &opts)?);
        }
    }
    Ok((model, report, eval))
}

/// Greedy decoding bounded by the task's target length limit (32 when unset).
pub fn eval_options(spec: &crate::task::TaskSpec, batch_size: usize) -> EvalOptions {
    EvalOptions {
        decode: crate::distill::decode_config_for(spec, 32),
        batch_size,
        keep_predictions: false,
    }
}

