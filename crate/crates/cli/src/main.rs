use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use vlm_core::checkpoint::load_model;
use vlm_core::decode::{greedy_decode, Prompt};
use vlm_core::distill::{build_student_dataset, decode_config_for, verify_student_dataset, DistillManifest};
use vlm_core::eval::{evaluate_task, EvalReport};
use vlm_core::experiment::{
    encode_rows, eval_options, load_rows, load_tokenizer, run, Ablation, DataSource, ExperimentConfig, Stage,
};
use vlm_core::report::{five_task_schedule, param_report, TaskCost};
use vlm_core::synth::{self, Split, SynthOptions};
use vlm_core::task::{encode_prompt, read_jsonl, write_jsonl, EncodeOptions, RawExample};
use vlm_core::train::{Regime, Schedule, TrainConfig};
use vlm_core::{ModelConfig, VlmError};

#[derive(Parser)]
#[command(name = "vlm", version, about = "Shared language-model backbone with per-task adapters")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic task data as JSON lines.
    SynthData {
        #[arg(long)]
        task: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 0.0)]
        nmt_ambiguity: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a backbone language model on plain text.
    Pretrain(RunArgs),
    /// Train task parameters (and, in the full regime, the backbone).
    Finetune(RunArgs),
    /// Rewrite a dataset's targets with a teacher's greedy decodes.
    DistillBuild {
        /// Checkpoint directory holding the teacher backbone and task.
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        max_context: Option<usize>,
        /// Re-decode every row and compare against the manifest.
        #[arg(long)]
        verify: bool,
    },
    /// Fine-tune a student on a rewritten dataset; metrics are tagged distilled.
    DistillTrain(RunArgs),
    /// Score a trained model on a task's data.
    Evaluate {
        /// Checkpoint directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true)]
        task: Vec<String>,
        /// JSON-lines file per task as TASK=PATH; synthetic test data when absent.
        #[arg(long)]
        data: Vec<String>,
        #[arg(long, default_value_t = 200)]
        synth_n: usize,
        #[arg(long, default_value_t = 0)]
        synth_seed: u64,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        registry: Option<PathBuf>,
        /// Evaluate without the task's parameters (backbone alone).
        #[arg(long)]
        unsteered: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy-decode a target for one example given as a JSON line on the command line.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        input: String,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },
    /// Stored-parameter accounting for a set of tasks.
    ParamReport {
        #[arg(long, value_enum, default_value_t = Preset::Gpt2Small)]
        preset: Preset,
        /// `five-task` or a comma list of NAME:SEGMENTS[:M].
        #[arg(long, default_value = "five-task")]
        tasks: String,
        /// Regime for every task; all three when absent.
        #[arg(long)]
        regime: Option<Regime>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Gpt2Small,
    Toy,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::Gpt2Small => ModelConfig::gpt2_small(),
            Preset::Toy => ModelConfig::toy(),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long = "task")]
    tasks: Vec<String>,
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    multi_task: bool,
    #[arg(long)]
    bottleneck: Option<usize>,
    #[arg(long = "ablate")]
    ablate: Vec<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Training data per task as TASK=PATH (text files for pretraining).
    #[arg(long)]
    data: Vec<String>,
    /// Synthetic rows per task (or corpus lines) when no data files are given.
    #[arg(long)]
    synth_n: Option<usize>,
    #[arg(long)]
    synth_seed: Option<u64>,
    #[arg(long)]
    nmt_ambiguity: Option<f64>,
    /// Evaluate on synthetic test data of this size after training.
    #[arg(long)]
    eval_n: Option<usize>,
    /// Evaluation data per task as TASK=PATH.
    #[arg(long)]
    eval_data: Vec<String>,
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long)]
    max_context: Option<usize>,
    #[arg(long)]
    sep: bool,
    #[arg(long)]
    dropout: Option<f64>,
}

fn parse_pairs(items: &[String]) -> Result<BTreeMap<String, PathBuf>> {
    items
        .iter()
        .map(|s| {
            let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("expected TASK=PATH, got {s:?}"))?;
            Ok((k.to_string(), PathBuf::from(v)))
        })
        .collect()
}

fn base_config(stage: Stage) -> ExperimentConfig {
    let model = ModelConfig::toy();
    let regime = match stage {
        Stage::Pretrain => Regime::Full,
        Stage::Finetune => Regime::Adapter,
    };
    ExperimentConfig {
        stage,
        encode: EncodeOptions::new(model.max_context),
        model,
        tokenizer: None,
        registry: None,
        bottleneck: 16,
        tasks: Vec::new(),
        train_data: DataSource::Synth {
            n: 2000,
            seed: 0,
            options: SynthOptions::default(),
        },
        eval_data: None,
        init: None,
        train: TrainConfig::new(regime, 32, 0),
        seeds: vec![0],
        ablation: Ablation::default(),
        eval_batch: 64,
        out_dir: PathBuf::from("runs"),
    }
}

fn build_config(stage: Stage, a: &RunArgs, distilled: bool) -> Result<ExperimentConfig> {
    let mut c = match &a.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => base_config(stage),
    };
    c.stage = stage;
    if let Some(v) = &a.out {
        c.out_dir = v.clone();
    }
    if let Some(v) = &a.init {
        c.init = Some(v.clone());
    }
    if !a.tasks.is_empty() {
        c.tasks = a.tasks.clone();
    }
    if let Some(r) = a.regime {
        c.train.regime = r;
    }
    if a.multi_task {
        c.train.schedule = Schedule::MultiTask;
    }
    if let Some(m) = a.bottleneck {
        c.bottleneck = m;
    }
    for name in &a.ablate {
        match name.as_str() {
            "no_task_emb" => c.ablation.no_task_emb = true,
            "no_pretrain" => c.ablation.no_pretrain = true,
            other => bail!("unknown ablation {other:?}"),
        }
    }
    if let Some(v) = a.steps {
        c.train.max_steps = Some(v);
    }
    if let Some(v) = a.epochs {
        c.train.epochs = v;
        c.train.max_steps = None;
    }
    if let Some(v) = a.batch_size {
        c.train.batch_size = v;
    }
    if a.lr.is_some() {
        c.train.lr = a.lr;
    }
    if let Some(v) = a.warmup {
        c.train.warmup_steps = v;
    }
    if !a.seeds.is_empty() {
        c.seeds = a.seeds.clone();
    }
    if !a.data.is_empty() {
        c.train_data = DataSource::Files { paths: parse_pairs(&a.data)? };
    } else if a.synth_n.is_some() || a.synth_seed.is_some() || a.nmt_ambiguity.is_some() {
        let (mut n, mut seed, mut options) = match &c.train_data {
            DataSource::Synth { n, seed, options } => (*n, *seed, *options),
            DataSource::Files { .. } => (2000, 0, SynthOptions::default()),
        };
        n = a.synth_n.unwrap_or(n);
        seed = a.synth_seed.unwrap_or(seed);
        if let Some(x) = a.nmt_ambiguity {
            options.nmt_ambiguity = x;
        }
        c.train_data = DataSource::Synth { n, seed, options };
    }
    if !a.eval_data.is_empty() {
        c.eval_data = Some(DataSource::Files {
            paths: parse_pairs(&a.eval_data)?,
        });
    } else if let Some(n) = a.eval_n {
        let (seed, options) = match &c.train_data {
            DataSource::Synth { seed, options, .. } => (*seed, *options),
            DataSource::Files { .. } => (0, SynthOptions::default()),
        };
        c.eval_data = Some(DataSource::Synth { n, seed, options });
    }
    if a.tokenizer.is_some() {
        c.tokenizer = a.tokenizer.clone();
    }
    if a.registry.is_some() {
        c.registry = a.registry.clone();
    }
    if let Some(v) = a.max_context {
        c.encode.max_context = v;
    }
    if a.sep {
        c.encode.sep_between_segments = true;
    }
    if let Some(v) = a.dropout {
        c.model.dropout = v;
    }
    if distilled {
        c.train.distilled = true;
    }
    Ok(c)
}

fn run_stage(stage: Stage, a: &RunArgs, distilled: bool) -> Result<()> {
    let cfg = build_config(stage, a, distilled)?;
    for out in run(&cfg)? {
        let line = json!({
            "seed": out.seed,
            "dir": out.dir,
            "steps": out.report.records.len(),
            "final_loss": out.report.final_loss(),
            "eval": out.eval,
        });
        println!("{line}");
    }
    Ok(())
}

fn tokenizer_for(model_dir: &Path, explicit: Option<&Path>, vocab: usize) -> Result<vlm_core::tokenizer::Tokenizer> {
    if let Some(p) = explicit {
        return Ok(load_tokenizer(p)?);
    }
    // a run directory keeps its tokenizer next to `checkpoints/`
    let sibling = model_dir.parent().map(|p| p.join("tokenizer.json"));
    match sibling {
        Some(p) if p.exists() => Ok(load_tokenizer(&p)?),
        _ => Ok(synth::suite_tokenizer(vocab)?),
    }
}

fn registry_for(explicit: Option<&Path>, bottleneck: usize) -> Result<vlm_core::task::TaskRegistry> {
    match explicit {
        Some(p) => {
            let r: vlm_core::task::TaskRegistry = serde_json::from_str(&std::fs::read_to_string(p)?)?;
            r.validate()?;
            Ok(r)
        }
        None => Ok(synth::registry(bottleneck)),
    }
}

fn task_costs(spec: &str, regime: Regime) -> Result<Vec<TaskCost>> {
    if spec == "five-task" {
        return Ok(five_task_schedule(regime));
    }
    spec.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            let (name, segs, m) = match parts.as_slice() {
                [n, s] => (*n, s.parse::<usize>()?, None),
                [n, s, m] => (*n, s.parse::<usize>()?, Some(m.parse::<usize>()?)),
                _ => bail!("expected NAME:SEGMENTS[:M], got {item:?}"),
            };
            Ok(TaskCost {
                task: name.to_string(),
                regime,
                bottleneck: if regime == Regime::Adapter { m } else { None },
                n_segments: segs,
            })
        })
        .collect()
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::SynthData {
            task,
            n,
            seed,
            split,
            nmt_ambiguity,
            out,
        } => {
            let split: Split = split.parse()?;
            let rows = synth::generate(&task, n, seed, split, &SynthOptions { nmt_ambiguity })?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_jsonl(&out, &rows)?;
            println!("{}", json!({"task": task, "rows": rows.len(), "out": out}));
        }
        Cmd::Pretrain(a) => run_stage(Stage::Pretrain, &a, false)?,
        Cmd::Finetune(a) => run_stage(Stage::Finetune, &a, false)?,
        Cmd::DistillTrain(a) => run_stage(Stage::Finetune, &a, true)?,
        Cmd::DistillBuild {
            teacher,
            task,
            data,
            out,
            manifest,
            tokenizer,
            max_context,
            verify,
        } => {
            if !teacher.exists() {
                bail!(VlmError::Checkpoint {
                    path: teacher.display().to_string(),
                    reason: "teacher checkpoint is missing".into(),
                });
            }
            let model = load_model(&teacher, Some(&[task.as_str()]), false)?;
            let tok = tokenizer_for(&teacher, tokenizer.as_deref(), model.config.vocab_size)?;
            let bottleneck = model.task(&task)?.bottleneck;
            let spec = registry_for(None, bottleneck)?.get(&task)?.clone();
            let rows = read_jsonl(&data)?;
            let enc = EncodeOptions::new(max_context.unwrap_or(model.config.max_context));
            let dc = decode_config_for(&spec, 32);
            let (rewritten, mut man) = build_student_dataset(&model, &spec, &rows, &tok, enc, &dc)?;
            man.source_path = Some(data.display().to_string());
            man.output_path = Some(out.display().to_string());
            write_jsonl(&out, &rewritten)?;
            man.save(&manifest)?;
            let mut problems = Vec::new();
            if verify {
                let m = DistillManifest::load(&manifest)?;
                problems = verify_student_dataset(&model, &spec, &rows, &rewritten, &m, &tok)?;
            }
            println!(
                "{}",
                json!({"rows": rewritten.len(), "truncated": man.truncated(), "teacher_id": man.teacher_id, "problems": problems})
            );
            if !problems.is_empty() {
                bail!("{} rows failed verification", problems.len());
            }
        }
        Cmd::Evaluate {
            model,
            task,
            data,
            synth_n,
            synth_seed,
            tokenizer,
            registry,
            unsteered,
            out,
        } => {
            let names: Vec<&str> = task.iter().map(String::as_str).collect();
            let m = if unsteered {
                load_model(&model, Some(&[][..]), false)?
            } else {
                load_model(&model, Some(&names), false)?
            };
            let tok = tokenizer_for(&model, tokenizer.as_deref(), m.config.vocab_size)?;
            let reg = registry_for(registry.as_deref(), 16)?;
            let files = parse_pairs(&data)?;
            let mut report = EvalReport::default();
            for t in &task {
                let spec = reg.get(t)?;
                let src = match files.get(t) {
                    Some(p) => DataSource::Files {
                        paths: BTreeMap::from([(t.clone(), p.clone())]),
                    },
                    None => DataSource::Synth {
                        n: synth_n,
                        seed: synth_seed,
                        options: SynthOptions::default(),
                    },
                };
                let rows = load_rows(&src, t, Split::Test)?;
                let (enc, _) = encode_rows(spec, &rows, &tok, EncodeOptions::new(m.config.max_context))?;
                let steer = (!unsteered).then_some(t.as_str());
                let opts = eval_options(spec, 64);
                report.tasks.insert(t.clone(), evaluate_task(&m, steer, spec, &enc, &tok, &opts)?);
                let ablated = m.tasks.get(t).is_some_and(|p| p.no_task_emb);
                if ablated && !report.ablation.iter().any(|a| a == "no_task_emb") {
                    report.ablation.push("no_task_emb".into());
                }
            }
            print!("{}", report.table());
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_string_pretty(&report)? + "\n")?;
            }
        }
        Cmd::Generate {
            model,
            task,
            input,
            tokenizer,
            registry,
            max_new_tokens,
        } => {
            let m = load_model(&model, Some(&[task.as_str()]), false)?;
            let tok = tokenizer_for(&model, tokenizer.as_deref(), m.config.vocab_size)?;
            let reg = registry_for(registry.as_deref(), m.task(&task)?.bottleneck)?;
            let spec = reg.get(&task)?;
            let mut raw: RawExample = serde_json::from_str(&input).context("parsing --input")?;
            raw.task = task.clone();
            let ctx = RawExample {
                segments: raw.context(spec).to_vec(),
                ..raw
            };
            let e = encode_prompt(spec, &ctx, &tok, EncodeOptions::new(m.config.max_context))?;
            let (tokens, segments) = e.prompt();
            let mut dc = decode_config_for(spec, 32);
            if let Some(n) = max_new_tokens {
                dc.max_new_tokens = n;
            }
            let d = greedy_decode(
                &m,
                Some(&task),
                Prompt {
                    tokens,
                    segments,
                    gen_segment: spec.first_target_id(),
                },
                &dc,
            )?;
            println!("{}", json!({"output": tok.decode(&d.tokens), "finished": d.finished}));
        }
        Cmd::ParamReport {
            preset,
            tasks,
            regime,
            json: as_json,
        } => {
            let cfg = preset.config();
            let regimes = match regime {
                Some(r) => vec![r],
                None => vec![Regime::Full, Regime::LmHead, Regime::Adapter],
            };
            for r in regimes {
                let report = param_report(&cfg, &task_costs(&tasks, r)?)?;
                if as_json {
                    println!("{}", serde_json::to_string(&report)?);
                } else {
                    println!("{report}\n");
                }
            }
        }
    }
    Ok(())
}

fn error_record(e: &anyhow::Error) -> serde_json::Value {
    let kind = match e.downcast_ref::<VlmError>() {
        Some(VlmError::Config(v)) => return json!({"error": "config", "message": e.to_string(), "violations": v}),
        Some(VlmError::Checkpoint { .. }) => "checkpoint",
        Some(VlmError::UnknownTask(_)) => "unknown_task",
        Some(VlmError::EmptyDataset(_)) => "empty_dataset",
        Some(VlmError::Diverged { .. }) => "diverged",
        Some(VlmError::Encode { .. }) => "encode",
        Some(VlmError::Io(_)) => "io",
        Some(_) => "invalid",
        None => "error",
    };
    json!({"error": kind, "message": format!("{e:#}")})
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim_end()}));
            return ExitCode::from(2);
        }
    };
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}
