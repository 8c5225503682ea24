//! Task registry, per-task parameters and example encoding.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use vlm_tensor::{Graph, Scalar, Tensor, Var};

use crate::adapter::{init_adapter_stack, AdapterStack};
use crate::tokenizer::Tokenizer;
use crate::{ModelConfig, Result, VlmError, EOS_ID, SEP_ID};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    /// Segment roles in their canonical order; the index is the segment id.
    pub segments: Vec<String>,
    /// Roles whose tokens are generated (and trained on).
    pub targets: Vec<String>,
    /// Adapter bottleneck size `m`.
    pub bottleneck: usize,
    /// Optional per-role token budget.
    #[serde(default)]
    pub max_len: BTreeMap<String, usize>,
    /// Always put SEP between segments, whatever the encode options say.
    #[serde(default)]
    pub separators: bool,
}

impl TaskSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.name.is_empty() {
            v.push("task name is empty".into());
        }
        if self.segments.is_empty() {
            v.push(format!("{}: no segments", self.name));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if self.segments[..i].contains(s) {
                v.push(format!("{}: duplicate segment {s:?}", self.name));
            }
        }
        if self.targets.is_empty() {
            v.push(format!("{}: no target segments", self.name));
        }
        for t in &self.targets {
            if !self.segments.contains(t) {
                v.push(format!("{}: target {t:?} is not a segment", self.name));
            }
        }
        for k in self.max_len.keys() {
            if !self.segments.contains(k) {
                v.push(format!("{}: length limit for unknown segment {k:?}", self.name));
            }
        }
        if self.bottleneck == 0 {
            v.push(format!("{}: bottleneck must be positive", self.name));
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

    pub fn segment_id(&self, role: &str) -> Option<u32> {
        self.segments.iter().position(|s| s == role).map(|i| i as u32)
    }

    pub fn is_target(&self, role: &str) -> bool {
        self.targets.iter().any(|t| t == role)
    }

    /// Segment id assigned to generated tokens.
    pub fn first_target_id(&self) -> u32 {
        self.segments
            .iter()
            .position(|s| self.is_target(s))
            .unwrap_or(0) as u32
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskRegistry {
    pub tasks: Vec<TaskSpec>,
}

impl TaskRegistry {
    pub fn get(&self, name: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| VlmError::UnknownTask(name.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut v: Vec<String> = self.tasks.iter().flat_map(|t| t.violations()).collect();
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|u| u.name == t.name) {
                v.push(format!("duplicate task {:?}", t.name));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(VlmError::Config(v))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSegment {
    pub seg: String,
    pub text: String,
}

/// One line of the JSON-lines dataset format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub task: String,
    pub segments: Vec<RawSegment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

impl RawExample {
    pub fn new(task: &str, parts: &[(&str, String)]) -> Self {
        Self {
            task: task.to_string(),
            segments: parts
                .iter()
                .map(|(s, t)| RawSegment {
                    seg: s.to_string(),
                    text: t.clone(),
                })
                .collect(),
            provenance: None,
        }
    }

    /// Index where the trailing run of target segments starts.
    pub fn target_start(&self, spec: &TaskSpec) -> usize {
        let mut i = self.segments.len();
        while i > 0 && spec.is_target(&self.segments[i - 1].seg) {
            i -= 1;
        }
        i
    }

    pub fn context(&self, spec: &TaskSpec) -> &[RawSegment] {
        &self.segments[..self.target_start(spec)]
    }

    pub fn target_text(&self, spec: &TaskSpec) -> String {
        self.segments[self.target_start(spec)..]
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RawExample>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            VlmError::Invalid(format!("{}:{}: {e}", path.display(), n + 1))
        })?);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, rows: &[RawExample]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeOptions {
    pub max_context: usize,
    /// Insert SEP before every segment after the first.
    #[serde(default)]
    pub sep_between_segments: bool,
    /// Train on every position instead of the target only.
    #[serde(default)]
    pub full_sequence_loss: bool,
}

impl EncodeOptions {
    pub fn new(max_context: usize) -> Self {
        Self {
            max_context,
            sep_between_segments: false,
            full_sequence_loss: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub tokens: Vec<u32>,
    pub segments: Vec<u32>,
    pub loss_mask: Vec<bool>,
    /// First position of the generated part; `tokens[..target_start]` is the prompt.
    pub target_start: usize,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt(&self) -> (&[u32], &[u32]) {
        (&self.tokens[..self.target_start], &self.segments[..self.target_start])
    }

    /// Target tokens without the closing EOS.
    pub fn target(&self) -> &[u32] {
        let end = if self.tokens.last() == Some(&EOS_ID) {
            self.tokens.len() - 1
        } else {
            self.tokens.len()
        };
        &self.tokens[self.target_start.min(end)..end]
    }
}

fn encode_err(spec: &TaskSpec, reason: impl Into<String>) -> VlmError {
    VlmError::Encode {
        task: spec.name.clone(),
        reason: reason.into(),
    }
}

/// Encodes a full training example: context segments, then the trailing
/// run of target segments and EOS. Only the target tokens and EOS are
/// loss-masked. Context segments are front-truncated to fit, targets never.
pub fn encode(spec: &TaskSpec, raw: &RawExample, tok: &Tokenizer, opts: EncodeOptions) -> Result<EncodedExample> {
    encode_inner(spec, raw, tok, opts, true)
}

/// Encodes a prompt only: every segment of `raw` is treated as context.
pub fn encode_prompt(spec: &TaskSpec, raw: &RawExample, tok: &Tokenizer, opts: EncodeOptions) -> Result<EncodedExample> {
    encode_inner(spec, raw, tok, opts, false)
}

fn encode_inner(
    spec: &TaskSpec,
    raw: &RawExample,
    tok: &Tokenizer,
    opts: EncodeOptions,
    with_target: bool,
) -> Result<EncodedExample> {
    if raw.task != spec.name {
        return Err(encode_err(spec, format!("example belongs to task {:?}", raw.task)));
    }
    for s in &raw.segments {
        if spec.segment_id(&s.seg).is_none() {
            return Err(encode_err(spec, format!("unknown segment {:?}", s.seg)));
        }
    }
    let context_roles = spec.segments.iter().filter(|s| !spec.is_target(s));
    for role in context_roles {
        if !raw.segments.iter().any(|s| &s.seg == role) {
            return Err(encode_err(spec, format!("missing segment {role:?}")));
        }
    }
    let split = if with_target {
        raw.target_start(spec)
    } else {
        raw.segments.len()
    };

    let mut parts: Vec<(u32, Vec<u32>)> = Vec::with_capacity(raw.segments.len());
    for (i, s) in raw.segments.iter().enumerate() {
        let id = spec.segment_id(&s.seg).unwrap_or_default();
        let mut ids = tok.encode(&s.text);
        if let Some(&limit) = spec.max_len.get(&s.seg) {
            if ids.len() > limit {
                if i >= split {
                    return Err(encode_err(
                        spec,
                        format!("target segment {:?} has {} tokens, limit {limit}", s.seg, ids.len()),
                    ));
                }
                ids.drain(..ids.len() - limit);
            }
        }
        parts.push((id, ids));
    }
    if with_target && parts[split..].iter().all(|(_, ids)| ids.is_empty()) {
        return Err(encode_err(spec, "target segment is empty"));
    }

    let sep = opts.sep_between_segments || spec.separators;
    let n_seps = if sep {
        parts.len().saturating_sub(1)
    } else {
        0
    };
    let target_len: usize = parts[split..].iter().map(|(_, p)| p.len()).sum::<usize>() + usize::from(with_target);
    let mut context_len: usize = parts[..split].iter().map(|(_, p)| p.len()).sum();
    let budget = opts.max_context;
    // prompts need room for at least one generated token
    let reserve = usize::from(!with_target);
    let mut over = (context_len + target_len + n_seps + reserve).saturating_sub(budget);
    for (_, p) in parts[..split].iter_mut() {
        if over == 0 {
            break;
        }
        let cut = over.min(p.len());
        p.drain(..cut);
        over -= cut;
        context_len -= cut;
    }
    if over > 0 {
        return Err(encode_err(
            spec,
            format!("{} tokens do not fit the context of {budget}", context_len + target_len + n_seps + over),
        ));
    }

    let mut out = EncodedExample {
        tokens: Vec::new(),
        segments: Vec::new(),
        loss_mask: Vec::new(),
        target_start: 0,
    };
    for (i, (id, ids)) in parts.iter().enumerate() {
        if i > 0 && sep {
            // SEP belongs to the segment it opens
            out.tokens.push(SEP_ID);
            out.segments.push(*id);
            out.loss_mask.push(opts.full_sequence_loss);
        }
        if i == split {
            out.target_start = out.tokens.len();
        }
        for &t in ids {
            out.tokens.push(t);
            out.segments.push(*id);
            out.loss_mask.push(i >= split || opts.full_sequence_loss);
        }
    }
    if with_target {
        out.tokens.push(EOS_ID);
        out.segments.push(parts.last().map(|p| p.0).unwrap_or_default());
        out.loss_mask.push(true);
    } else {
        if sep && !parts.is_empty() {
            out.tokens.push(SEP_ID);
            out.segments.push(spec.first_target_id());
            out.loss_mask.push(false);
        }
        out.target_start = out.tokens.len();
    }
    if out.tokens.is_empty() {
        return Err(encode_err(spec, "example has no tokens"));
    }
    Ok(out)
}

/// Encodes a plain text line for language-model training: its first
/// `max_context - 1` tokens and EOS, all in segment 0 and all loss-masked.
pub fn encode_text(text: &str, tok: &Tokenizer, max_context: usize) -> Result<EncodedExample> {
    let mut tokens = tok.encode(text);
    if tokens.is_empty() {
        return Err(VlmError::Invalid("text line has no tokens".into()));
    }
    tokens.truncate(max_context.saturating_sub(1).max(1));
    tokens.push(EOS_ID);
    let n = tokens.len();
    Ok(EncodedExample {
        tokens,
        segments: vec![0; n],
        loss_mask: vec![true; n],
        target_start: 0,
    })
}

/// Per-task weights; which pieces exist depends on the training regime.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskWeights<T> {
    /// Segment embedding table, `n_segments × d`.
    pub segments: Option<T>,
    pub adapters: Option<AdapterStack<T>>,
    /// Untied output head, `V × d`.
    pub lm_head: Option<T>,
}

impl<T> TaskWeights<T> {
    pub fn try_map<'a, U, E>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a T) -> std::result::Result<U, E>,
    ) -> std::result::Result<TaskWeights<U>, E> {
        let segments = match &self.segments {
            Some(s) => Some(f(&format!("{prefix}segments"), s)?),
            None => None,
        };
        let adapters = match &self.adapters {
            Some(a) => Some(a.try_map(prefix, f)?),
            None => None,
        };
        let lm_head = match &self.lm_head {
            Some(h) => Some(f(&format!("{prefix}lm_head"), h)?),
            None => None,
        };
        Ok(TaskWeights {
            segments,
            adapters,
            lm_head,
        })
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        if let Some(s) = &mut self.segments {
            f(&format!("{prefix}segments"), s);
        }
        if let Some(a) = &mut self.adapters {
            a.for_each_mut(prefix, f);
        }
        if let Some(h) = &mut self.lm_head {
            f(&format!("{prefix}lm_head"), h);
        }
    }

    pub fn entries<'a>(&'a self, prefix: &str) -> Vec<(String, &'a T)> {
        let mut out = Vec::new();
        let _ = self.try_map(prefix, &mut |n, t| {
            out.push((n.to_string(), t));
            Ok::<_, std::convert::Infallible>(())
        });
        out
    }
}

/// Which task-specific tensors to allocate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TaskLayout {
    pub segments: bool,
    pub adapters: bool,
    pub lm_head: bool,
}

/// Everything stored for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskParams<S: Scalar = f32> {
    pub task: String,
    pub bottleneck: usize,
    /// Ablation: segment ids are still encoded but contribute nothing.
    pub no_task_emb: bool,
    pub weights: TaskWeights<Tensor<S>>,
}

impl<S: Scalar> TaskParams<S> {
    /// Segment table starts at zero and adapters at the identity, so a fresh
    /// task leaves the backbone's function unchanged. The untied head starts
    /// as a copy of `wte`.
    pub fn init(spec: &TaskSpec, cfg: &ModelConfig, layout: TaskLayout, wte: &Tensor<S>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let d = cfg.d_model;
        if layout.lm_head && wte.shape() != [cfg.vocab_size, d] {
            return Err(VlmError::Invalid("token embedding does not match the config".into()));
        }
        Ok(Self {
            task: spec.name.clone(),
            bottleneck: spec.bottleneck,
            no_task_emb: false,
            weights: TaskWeights {
                segments: layout.segments.then(|| Tensor::zeros(&[spec.segments.len(), d])),
                adapters: if layout.adapters {
                    Some(init_adapter_stack(d, spec.bottleneck, cfg.n_layers, seed)?)
                } else {
                    None
                },
                lm_head: layout.lm_head.then(|| wte.clone()),
            },
        })
    }

    pub fn num_params(&self) -> usize {
        self.weights.entries("").iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Gathers segment rows for `ids`; gradients scatter back to the rows used.
pub fn lookup_segments<S: Scalar>(g: &mut Graph<S>, table: Var, ids: &[u32]) -> Result<Var> {
    let n = g.value(table).shape()[0];
    let idx = ids
        .iter()
        .map(|&i| {
            if (i as usize) < n {
                Ok(i as usize)
            } else {
                Err(VlmError::SegmentOutOfRange { id: i, segments: n })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(g.embedding(table, &idx)?)
}
