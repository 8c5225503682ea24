//! Backbone plus the stored parameters of every task.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use vlm_tensor::{Graph, Scalar, Tensor, Var};

use crate::backbone::{forward, BackboneVars, BackboneWeights, ForwardOptions, ForwardOutput, SeqInput, Steering};
use crate::task::{lookup_segments, EncodedExample, TaskParams, TaskWeights};
use crate::{ModelConfig, Result, VlmError};

#[derive(Clone, Debug, PartialEq)]
pub struct Vlm<S: Scalar = f32> {
    pub config: ModelConfig,
    pub backbone: BackboneWeights<S>,
    pub tasks: BTreeMap<String, TaskParams<S>>,
}

/// Graph handles for one step: the backbone and the tasks it touches.
pub struct Bound {
    pub backbone: BackboneVars,
    pub tasks: BTreeMap<String, TaskWeights<Var>>,
    /// Every bound leaf with its full parameter name.
    pub leaves: Vec<(String, Var)>,
}

/// A token sequence with its per-position segment ids.
#[derive(Clone, Copy, Debug)]
pub struct Seq<'a> {
    pub tokens: &'a [u32],
    pub segments: &'a [u32],
}

impl<'a> From<&'a EncodedExample> for Seq<'a> {
    fn from(e: &'a EncodedExample) -> Self {
        Seq {
            tokens: &e.tokens,
            segments: &e.segments,
        }
    }
}

pub fn task_prefix(task: &str) -> String {
    format!("{task}.")
}

impl<S: Scalar> Vlm<S> {
    pub fn new(config: ModelConfig, backbone: BackboneWeights<S>) -> Self {
        Self {
            config,
            backbone,
            tasks: BTreeMap::new(),
        }
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let backbone = BackboneWeights::init(&config, seed)?;
        Ok(Self::new(config, backbone))
    }

    pub fn task(&self, name: &str) -> Result<&TaskParams<S>> {
        self.tasks.get(name).ok_or_else(|| VlmError::UnknownTask(name.to_string()))
    }

    pub fn cast<T: Scalar>(&self) -> Vlm<T> {
        Vlm {
            config: self.config.clone(),
            backbone: self.backbone.cast(),
            tasks: self
                .tasks
                .iter()
                .map(|(k, p)| {
                    let weights = p
                        .weights
                        .try_map("", &mut |_, t| Ok::<_, std::convert::Infallible>(t.cast()))
                        .expect("infallible");
                    (
                        k.clone(),
                        TaskParams {
                            task: p.task.clone(),
                            bottleneck: p.bottleneck,
                            no_task_emb: p.no_task_emb,
                            weights,
                        },
                    )
                })
                .collect(),
        }
    }

    /// All parameters by full name: backbone names bare, task names prefixed by `task.`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = self.backbone.entries("");
        for (name, p) in &self.tasks {
            out.extend(p.weights.entries(&task_prefix(name)));
        }
        out
    }

    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&str, &mut Tensor<S>)) {
        self.backbone.for_each_mut("", f);
        for (name, p) in self.tasks.iter_mut() {
            p.weights.for_each_mut(&task_prefix(name), f);
        }
    }

    /// Registers the backbone and the named tasks on `g`.
    pub fn bind(&self, g: &mut Graph<S>, tasks: &[&str], trainable: &dyn Fn(&str) -> bool) -> Result<Bound> {
        let mut leaves = Vec::new();
        let backbone = self.backbone.try_map("", &mut |name, t| {
            let v = g.leaf(t.clone(), trainable(name))?;
            leaves.push((name.to_string(), v));
            Ok::<_, VlmError>(v)
        })?;
        let mut bound = BTreeMap::new();
        for &task in tasks {
            let p = self.task(task)?;
            let w = p.weights.try_map(&task_prefix(task), &mut |name, t| {
                let v = g.leaf(t.clone(), trainable(name))?;
                leaves.push((name.to_string(), v));
                Ok::<_, VlmError>(v)
            })?;
            bound.insert(task.to_string(), w);
        }
        Ok(Bound {
            backbone,
            tasks: bound,
            leaves,
        })
    }

    /// Forward pass over packed sequences, steered by `task` when given.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        task: Option<&str>,
        seqs: &[Seq<'_>],
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let (weights, params) = match task {
            Some(t) => (
                Some(bound.tasks.get(t).ok_or_else(|| VlmError::UnknownTask(t.to_string()))?),
                Some(self.task(t)?),
            ),
            None => (None, None),
        };
        let table = match (weights, params) {
            (Some(w), Some(p)) if !p.no_task_emb => w.segments,
            _ => None,
        };
        let mut inputs = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.segments.len() != s.tokens.len() {
                return Err(VlmError::Invalid("segment ids and tokens differ in length".into()));
            }
            let segment_embed = match table {
                Some(t) => Some(lookup_segments(g, t, s.segments)?),
                None => None,
            };
            inputs.push(SeqInput {
                tokens: s.tokens,
                segment_embed,
            });
        }
        let steering = Steering {
            adapters: weights.and_then(|w| w.adapters.as_ref()).map(|a| a.layers.as_slice()),
            lm_head: weights.and_then(|w| w.lm_head),
        };
        forward(g, &self.config, &bound.backbone, &inputs, steering, opts)
    }

    /// Masked next-token cross-entropy over a packed batch of encoded examples.
    pub fn batch_loss(
        &self,
        g: &mut Graph<S>,
        bound: &Bound,
        task: Option<&str>,
        batch: &[&EncodedExample],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (seqs, targets, mask) = shifted(batch)?;
        let out = self.forward(
            g,
            bound,
            task,
            &seqs,
            ForwardOptions {
                dropout_rng,
                ..Default::default()
            },
        )?;
        Ok(g.cross_entropy(out.logits, &targets, &mask)?)
    }

    /// Logits without recording gradients; `last_only` keeps one row per sequence.
    pub fn logits(&self, task: Option<&str>, seqs: &[Seq<'_>], last_only: bool) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let tasks: Vec<&str> = task.into_iter().collect();
        let bound = self.bind(&mut g, &tasks, &|_| false)?;
        let out = self.forward(
            &mut g,
            &bound,
            task,
            seqs,
            ForwardOptions {
                last_only,
                ..Default::default()
            },
        )?;
        Ok(g.value(out.logits).clone())
    }
}

/// Inputs drop the final token; targets are the tokens shifted left by one.
pub fn shifted<'a>(batch: &[&'a EncodedExample]) -> Result<(Vec<Seq<'a>>, Vec<usize>, Vec<bool>)> {
    let mut seqs = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for e in batch {
        if e.len() < 2 {
            return Err(VlmError::Invalid("examples need at least two tokens".into()));
        }
        let n = e.len() - 1;
        seqs.push(Seq {
            tokens: &e.tokens[..n],
            segments: &e.segments[..n],
        });
        targets.extend(e.tokens[1..].iter().map(|&t| t as usize));
        mask.extend_from_slice(&e.loss_mask[1..]);
    }
    Ok((seqs, targets, mask))
}
