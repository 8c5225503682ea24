//! Training loops for the full, LM-head and adapter regimes, single-task or
//! multi-task, with Adam and global-norm clipping.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vlm_tensor::{Graph, Tensor};

use crate::model::{task_prefix, Vlm};
use crate::task::{EncodedExample, TaskLayout};
use crate::{Result, VlmError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Backbone and task tensors all train; a fine-tuned copy is stored per task.
    Full,
    /// Only an untied per-task output head trains.
    LmHead,
    /// Only adapters and segment tables train; the backbone is frozen.
    Adapter,
}

impl Regime {
    pub fn layout(self) -> TaskLayout {
        match self {
            Regime::Full => TaskLayout {
                segments: true,
                ..Default::default()
            },
            Regime::LmHead => TaskLayout {
                lm_head: true,
                ..Default::default()
            },
            Regime::Adapter => TaskLayout {
                segments: true,
                adapters: true,
                lm_head: false,
            },
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Regime::Full => 6.25e-5,
            Regime::LmHead | Regime::Adapter => 1e-3,
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = VlmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Regime::Full),
            "lm_head" | "lm-head" => Ok(Regime::LmHead),
            "adapter" => Ok(Regime::Adapter),
            other => Err(VlmError::Invalid(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    SingleTask,
    MultiTask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    #[serde(default)]
    pub schedule: Schedule,
    /// Passes over the data; ignored when `max_steps` is set.
    #[serde(default = "one")]
    pub epochs: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    /// Defaults to the regime's learning rate.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
    pub seed: u64,
    #[serde(default = "clip")]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub warmup_steps: usize,
    /// Record elapsed milliseconds in the metrics log (makes logs run-dependent).
    #[serde(default)]
    pub record_wall_time: bool,
    /// Tag every log record as distilled.
    #[serde(default)]
    pub distilled: bool,
}

fn one() -> usize {
    1
}
fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}
fn clip() -> Option<f64> {
    Some(1.0)
}

impl TrainConfig {
    pub fn new(regime: Regime, batch_size: usize, seed: u64) -> Self {
        Self {
            regime,
            schedule: Schedule::SingleTask,
            epochs: 1,
            max_steps: None,
            batch_size,
            lr: None,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
            seed,
            clip_norm: clip(),
            warmup_steps: 0,
            record_wall_time: false,
            distilled: false,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.regime.default_lr())
    }

    pub fn violations(&self, n_tasks: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("batch_size must be positive".into());
        }
        if self.max_steps.is_none() && self.epochs == 0 {
            v.push("epochs must be positive".into());
        }
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            v.push(format!("learning rate {} must be positive", self.lr()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            v.push("Adam betas must lie in [0, 1)".into());
        }
        if self.eps <= 0.0 {
            v.push("Adam eps must be positive".into());
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            v.push("clip norm must be positive".into());
        }
        if n_tasks == 0 {
            v.push("at least one task is required".into());
        }
        if self.schedule == Schedule::MultiTask && n_tasks < 2 {
            v.push("multi-task schedule needs at least two tasks".into());
        }
        if self.schedule == Schedule::SingleTask && n_tasks > 1 {
            v.push("single-task schedule takes exactly one task".into());
        }
        v
    }
}

/// Named split of every parameter reachable in the forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamPartition {
    pub frozen: BTreeSet<String>,
    pub trainable: BTreeSet<String>,
}

impl ParamPartition {
    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }
}

/// Splits the parameters of the backbone and `tasks` by regime.
pub fn partition(regime: Regime, model: &Vlm, tasks: &[&str]) -> Result<ParamPartition> {
    let mut p = ParamPartition::default();
    for (name, _) in model.backbone.entries("") {
        if regime == Regime::Full {
            p.trainable.insert(name);
        } else {
            p.frozen.insert(name);
        }
    }
    for &task in tasks {
        let params = model.task(task)?;
        let prefix = task_prefix(task);
        for (name, _) in params.weights.entries(&prefix) {
            let leaf = &name[prefix.len()..];
            let train = match regime {
                Regime::Full => true,
                Regime::LmHead => leaf == "lm_head",
                Regime::Adapter => leaf != "lm_head",
            };
            // an ablated segment table is never read, so it never trains
            let train = train && !(params.no_task_emb && leaf == "segments");
            if train {
                p.trainable.insert(name);
            } else {
                p.frozen.insert(name);
            }
        }
    }
    Ok(p)
}

/// Adam moments for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
    pub t: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub slots: BTreeMap<String, AdamSlot>,
}

impl AdamState {
    /// One Adam step on `param` with bias-corrected moments.
    pub fn update(&mut self, name: &str, param: &mut Tensor<f32>, grad: &Tensor<f32>, lr: f64, cfg: &TrainConfig) {
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
            t: 0,
        });
        slot.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - cfg.beta1.powi(slot.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(slot.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (cfg.eps * c2.sqrt()) as f32;
        let m = slot.m.data_mut();
        let v = slot.v.data_mut();
        for (((p, &gr), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gr;
            *vi = b2 * *vi + (1.0 - b2) * gr * gr;
            *p -= step * *mi / (vi.sqrt() + eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task: String,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub distilled: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub partition: ParamPartition,
    /// Gradient buffers found on frozen leaves after backward; always zero.
    pub frozen_grad_buffers: usize,
    /// Largest number of gradient buffers live in any one step.
    pub max_grad_allocations: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Per-step callback; return `true` to stop.
pub type StepHook<'a> = dyn FnMut(&StepRecord, &Vlm) -> Result<bool> + 'a;

/// Cycles through a task's examples in seeded shuffled order.
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Data key for plain language-model text trained through the backbone alone,
/// without any task parameters.
pub const UNSTEERED: &str = "<lm>";

pub fn train(model: &mut Vlm, data: &BTreeMap<String, Vec<EncodedExample>>, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_hook(model, data, cfg, &mut |_, _| Ok(false))
}

/// Trains the tasks in `data` (keyed by task name) under `cfg`.
///
/// Every key must name a task in `model.tasks` (see [`ensure_task`]), except
/// [`UNSTEERED`], which needs the full regime. Each step samples a task (proportionally to its dataset size when
/// multi-task), takes the next batch from its shuffled order and applies one
/// Adam update to the trainable partition only.
pub fn train_with_hook(
    model: &mut Vlm,
    data: &BTreeMap<String, Vec<EncodedExample>>,
    cfg: &TrainConfig,
    hook: &mut StepHook<'_>,
) -> Result<TrainReport> {
    let errs = cfg.violations(data.len());
    if !errs.is_empty() {
        return Err(VlmError::Config(errs));
    }
    for (task, rows) in data {
        if rows.is_empty() {
            return Err(VlmError::EmptyDataset(task.clone()));
        }
        if task == UNSTEERED {
            if cfg.regime != Regime::Full {
                return Err(VlmError::Invalid(format!(
                    "unsteered text trains the backbone and needs the full regime, not {:?}",
                    cfg.regime
                )));
            }
            continue;
        }
        let p = model.task(task)?;
        let layout = cfg.regime.layout();
        let has = |x: bool, present: bool| !x || present;
        let w = &p.weights;
        if !(has(layout.adapters, w.adapters.is_some())
            && has(layout.lm_head, w.lm_head.is_some())
            && has(layout.segments, w.segments.is_some()))
        {
            return Err(VlmError::Invalid(format!(
                "task {task} lacks the parameters the {:?} regime trains",
                cfg.regime
            )));
        }
    }
    let names: Vec<&str> = data.keys().map(String::as_str).filter(|&k| k != UNSTEERED).collect();
    let part = partition(cfg.regime, model, &names)?;

    let total: usize = data.values().map(Vec::len).sum();
    let steps = cfg
        .max_steps
        .unwrap_or_else(|| cfg.epochs * total.div_ceil(cfg.batch_size));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d209);
    let mut cursors: Vec<Cursor> = data
        .values()
        .map(|rows| {
            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.shuffle(&mut sample_rng);
            Cursor { order, pos: 0 }
        })
        .collect();
    let tasks: Vec<(&String, &Vec<EncodedExample>)> = data.iter().collect();
    let mut adam = AdamState::default();
    let mut report = TrainReport {
        partition: part.clone(),
        ..Default::default()
    };
    let start = Instant::now();

    for step in 0..steps {
        let ti = if tasks.len() == 1 {
            0
        } else {
            let mut r = sample_rng.random_range(0..total);
            let mut i = 0;
            while r >= tasks[i].1.len() {
                r -= tasks[i].1.len();
                i += 1;
            }
            i
        };
        let (task, rows) = tasks[ti];
        let idx = cursors[ti].next_batch(cfg.batch_size, &mut sample_rng);
        let batch: Vec<&EncodedExample> = idx.iter().map(|&i| &rows[i]).collect();

        let mut g = Graph::<f32>::new();
        let trainable = |n: &str| part.is_trainable(n);
        let steer = (task != UNSTEERED).then_some(task.as_str());
        let bound = model.bind(&mut g, steer.as_slice(), &trainable)?;
        let loss = model.batch_loss(&mut g, &bound, steer, &batch, Some(&mut dropout_rng))?;
        let loss_value = g.value(loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(VlmError::Diverged {
                step,
                task: task.clone(),
                loss: loss_value,
            });
        }
        g.backward(loss).map_err(|e| match e {
            vlm_tensor::TensorError::NonFinite { .. } => VlmError::Diverged {
                step,
                task: task.clone(),
                loss: loss_value,
            },
            other => other.into(),
        })?;
        report.max_grad_allocations = report.max_grad_allocations.max(g.grad_allocations());
        let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (name, v) in &bound.leaves {
            if part.is_trainable(name) {
                if let Some(gr) = g.take_grad(*v) {
                    grads.insert(name.clone(), gr);
                }
            } else if g.grad(*v).is_some() {
                report.frozen_grad_buffers += 1;
            }
        }
        drop(g);

        if let Some(max_norm) = cfg.clip_norm {
            let sq: f64 = grads
                .values()
                .flat_map(|t| t.data().iter())
                .map(|&x| (x as f64) * (x as f64))
                .sum();
            let norm = sq.sqrt();
            if !norm.is_finite() {
                return Err(VlmError::Diverged {
                    step,
                    task: task.clone(),
                    loss: loss_value,
                });
            }
            if norm > max_norm {
                let s = (max_norm / norm) as f32;
                for t in grads.values_mut() {
                    t.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        let lr = if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
            cfg.lr() * (step + 1) as f64 / cfg.warmup_steps as f64
        } else {
            cfg.lr()
        };
        model.for_each_param_mut(&mut |name, t| {
            if let Some(gr) = grads.get(name) {
                adam.update(name, t, gr, lr, cfg);
            }
        });

        let record = StepRecord {
            step,
            task: task.clone(),
            loss: loss_value,
            lr,
            wall_ms: cfg.record_wall_time.then(|| start.elapsed().as_millis() as u64),
            distilled: cfg.distilled,
        };
        let stop = hook(&record, model)?;
        report.records.push(record);
        if stop {
            report.stopped_early = true;
            break;
        }
    }
    Ok(report)
}

/// Adds parameters for `spec` to `model` with the regime's layout, unless present.
pub fn ensure_task(
    model: &mut Vlm,
    spec: &crate::task::TaskSpec,
    regime: Regime,
    seed: u64,
) -> Result<()> {
    if !model.tasks.contains_key(&spec.name) {
        let p = crate::task::TaskParams::init(spec, &model.config, regime.layout(), &model.backbone.wte, seed)?;
        model.tasks.insert(spec.name.clone(), p);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{TaskParams, TaskSpec};
    use crate::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab_size: 24,
            max_context: 16,
            dropout: 0.0,
            ..ModelConfig::toy()
        }
    }

    fn spec(name: &str) -> TaskSpec {
        TaskSpec {
            name: name.into(),
            segments: vec!["src".into(), "tgt".into()],
            targets: vec!["tgt".into()],
            bottleneck: 4,
            max_len: Default::default(),
            separators: false,
        }
    }

    fn example(src: &[u32], tgt: &[u32]) -> EncodedExample {
        let mut e = EncodedExample {
            tokens: src.to_vec(),
            segments: vec![0; src.len()],
            loss_mask: vec![false; src.len()],
            target_start: src.len(),
        };
        for &t in tgt.iter().chain(&[crate::EOS_ID]) {
            e.tokens.push(t);
            e.segments.push(1);
            e.loss_mask.push(true);
        }
        e
    }

    fn setup(regime: Regime) -> (Vlm, BTreeMap<String, Vec<EncodedExample>>) {
        let mut m = Vlm::init(cfg(), 1).unwrap();
        ensure_task(&mut m, &spec("a"), regime, 2).unwrap();
        let rows = (0..8u32)
            .map(|i| example(&[4 + i, 5 + i, 6], &[10 + (i % 3), 20]))
            .collect();
        (m, BTreeMap::from([("a".to_string(), rows)]))
    }

    #[test]
    fn partition_by_regime() {
        let (mut m, _) = setup(Regime::Adapter);
        let p = partition(Regime::Adapter, &m, &["a"]).unwrap();
        assert!(p.frozen.contains("wte") && p.frozen.contains("h.1.fc_w"));
        assert!(p.trainable.contains("a.segments") && p.trainable.contains("a.adapter.0.w_e"));
        assert!(p.frozen.is_disjoint(&p.trainable));
        assert_eq!(p.frozen.len() + p.trainable.len(), m.named_params().len());

        let wte = m.backbone.wte.clone();
        m.tasks.insert(
            "b".into(),
            TaskParams::init(&spec("b"), &m.config, Regime::LmHead.layout(), &wte, 0).unwrap(),
        );
        let p = partition(Regime::LmHead, &m, &["b"]).unwrap();
        assert_eq!(p.trainable, BTreeSet::from(["b.lm_head".to_string()]));
        let full = partition(Regime::Full, &m, &["a"]).unwrap();
        assert!(full.frozen.is_empty());
    }

    #[test]
    fn adapter_training_freezes_backbone_and_skips_its_grads() {
        let (mut m, data) = setup(Regime::Adapter);
        let before = m.backbone.clone();
        let mut c = TrainConfig::new(Regime::Adapter, 4, 0);
        c.max_steps = Some(20);
        let r = train(&mut m, &data, &c).unwrap();
        assert_eq!(r.frozen_grad_buffers, 0);
        assert!(m.backbone.entries("").iter().zip(before.entries("")).all(|(a, b)| a.1.bit_eq(b.1)));
        assert!(r.final_loss().unwrap() < r.records[0].loss);
    }

    #[test]
    fn step_zero_loss_matches_backbone() {
        let (mut m, data) = setup(Regime::Adapter);
        let plain = {
            let mut g = Graph::new();
            let b = m.bind(&mut g, &[], &|_| false).unwrap();
            let batch: Vec<&EncodedExample> = data["a"].iter().collect();
            let l = m.batch_loss(&mut g, &b, None, &batch, None).unwrap();
            g.value(l).item()
        };
        let mut c = TrainConfig::new(Regime::Adapter, 8, 0);
        c.max_steps = Some(1);
        let r = train(&mut m, &data, &c).unwrap();
        assert_eq!(r.records[0].loss, plain as f64);
    }

    #[test]
    fn overfits_one_batch() {
        let (mut m, mut data) = setup(Regime::Full);
        data.get_mut("a").unwrap().truncate(2);
        let mut c = TrainConfig::new(Regime::Full, 2, 0);
        c.lr = Some(3e-3);
        c.max_steps = Some(300);
        let r = train(&mut m, &data, &c).unwrap();
        assert!(r.final_loss().unwrap() < 0.01, "{:?}", r.final_loss());
    }

    #[test]
    fn deterministic_under_seed() {
        let run = || {
            let (mut m, data) = setup(Regime::Adapter);
            let mut c = TrainConfig::new(Regime::Adapter, 3, 5);
            c.max_steps = Some(10);
            let mut mc = m.config.clone();
            mc.dropout = 0.1;
            m.config = mc;
            let r = train(&mut m, &data, &c).unwrap();
            (r.metrics_jsonl().unwrap(), m)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!(a.contains("\"wall_ms\":null"));
    }

    #[test]
    fn multi_task_samples_both_tasks() {
        let (mut m, mut data) = setup(Regime::Adapter);
        ensure_task(&mut m, &spec("b"), Regime::Adapter, 3).unwrap();
        data.insert("b".into(), data["a"].clone());
        let mut c = TrainConfig::new(Regime::Adapter, 2, 0);
        c.schedule = Schedule::MultiTask;
        c.max_steps = Some(30);
        let before_a = m.tasks["a"].clone();
        let r = train(&mut m, &data, &c).unwrap();
        let seen: BTreeSet<&str> = r.records.iter().map(|x| x.task.as_str()).collect();
        assert_eq!(seen.len(), 2);
        assert_ne!(m.tasks["a"], before_a);
    }

    #[test]
    fn config_errors_are_listed_together() {
        let (mut m, data) = setup(Regime::Adapter);
        let mut c = TrainConfig::new(Regime::Adapter, 0, 0);
        c.schedule = Schedule::MultiTask;
        c.lr = Some(-1.0);
        match train(&mut m, &data, &c) {
            Err(VlmError::Config(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
        let c = TrainConfig::new(Regime::LmHead, 2, 0);
        assert!(train(&mut m, &data, &c).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (mut m, data) = setup(Regime::Adapter);
        m.backbone.ln_f_g.data_mut()[0] = f32::NAN;
        let mut c = TrainConfig::new(Regime::Adapter, 2, 0);
        c.max_steps = Some(1);
        assert!(matches!(train(&mut m, &data, &c), Err(VlmError::Diverged { .. }) | Err(VlmError::Tensor(_))));
    }
}
