//! Sequence-level distillation: a teacher's greedy decodes replace the gold
//! targets of a training set, which then trains a smaller student.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{backbone_bytes, task_bytes};
use crate::decode::DecodeConfig;
use crate::eval::decode_examples;
use crate::json::{canonical, sha256_hex};
use crate::model::Vlm;
use crate::task::{encode_prompt, EncodeOptions, RawExample, RawSegment, TaskSpec};
use crate::tokenizer::Tokenizer;
use crate::{Result, VlmError};

pub const PROVENANCE: &str = "distilled";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// SHA-256 of the canonical JSON of the context segments.
    pub input_hash: String,
    pub teacher_tokens: Vec<u32>,
    pub teacher_output: String,
    /// The decode hit `max_new_tokens` before EOS.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillManifest {
    /// SHA-256 over the teacher's backbone and task checkpoint bytes.
    pub teacher_id: String,
    pub task: String,
    pub source_path: Option<String>,
    pub output_path: Option<String>,
    pub decode: DecodeConfig,
    pub encode: EncodeOptions,
    pub rows: Vec<ManifestRow>,
}

impl DistillManifest {
    pub fn truncated(&self) -> usize {
        self.rows.iter().filter(|r| r.truncated).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn context_hash(spec: &TaskSpec, ex: &RawExample) -> Result<String> {
    Ok(sha256_hex(canonical(&ex.context(spec))?.as_bytes()))
}

/// Identifies a teacher by its serialized backbone and task parameters.
pub fn teacher_id(teacher: &Vlm, task: &str) -> Result<String> {
    let mut bytes = backbone_bytes(&teacher.config, &teacher.backbone)?;
    bytes.extend(task_bytes(&teacher.config, teacher.task(task)?)?);
    Ok(sha256_hex(&bytes))
}

/// Greedy decode budget for a task: the length limit of its first target segment.
pub fn decode_config_for(spec: &TaskSpec, default_max: usize) -> DecodeConfig {
    let first = spec.targets.first().and_then(|t| spec.max_len.get(t)).copied();
    DecodeConfig::new(first.unwrap_or(default_max))
}

fn prompts(spec: &TaskSpec, rows: &[RawExample], tok: &Tokenizer, opts: EncodeOptions) -> Result<Vec<crate::task::EncodedExample>> {
    rows.iter()
        .map(|r| {
            let ctx = RawExample {
                task: r.task.clone(),
                segments: r.context(spec).to_vec(),
                provenance: None,
            };
            encode_prompt(spec, &ctx, tok, opts)
        })
        .collect()
}

/// Rewrites every row's trailing target segments as one segment holding the
/// teacher's greedy decode. Context segments are copied unchanged and row
/// order is preserved. Rows whose decode is empty are kept with an empty
/// target; encoding them for training fails, so callers filter them.
pub fn build_student_dataset(
    teacher: &Vlm,
    spec: &TaskSpec,
    rows: &[RawExample],
    tok: &Tokenizer,
    encode: EncodeOptions,
    decode: &DecodeConfig,
) -> Result<(Vec<RawExample>, DistillManifest)> {
    if rows.is_empty() {
        return Err(VlmError::EmptyDataset(spec.name.clone()));
    }
    let target_role = spec
        .targets
        .first()
        .ok_or_else(|| VlmError::Invalid(format!("task {} has no target segment", spec.name)))?;
    let enc = prompts(spec, rows, tok, encode)?;
    let decoded = decode_examples(teacher, Some(&spec.name), spec, &enc, decode)?;
    let mut out = Vec::with_capacity(rows.len());
    let mut manifest_rows = Vec::with_capacity(rows.len());
    for (r, d) in rows.iter().zip(decoded) {
        let text = tok.decode(&d.tokens);
        let mut segments: Vec<RawSegment> = r.context(spec).to_vec();
        segments.push(RawSegment {
            seg: r.segments[r.target_start(spec)..]
                .first()
                .map(|s| s.seg.clone())
                .unwrap_or_else(|| target_role.clone()),
            text: text.clone(),
        });
        manifest_rows.push(ManifestRow {
            input_hash: context_hash(spec, r)?,
            teacher_tokens: d.tokens,
            teacher_output: text,
            truncated: !d.finished,
        });
        out.push(RawExample {
            task: r.task.clone(),
            segments,
            provenance: Some(PROVENANCE.to_string()),
        });
    }
    let manifest = DistillManifest {
        teacher_id: teacher_id(teacher, &spec.name)?,
        task: spec.name.clone(),
        source_path: None,
        output_path: None,
        decode: *decode,
        encode,
        rows: manifest_rows,
    };
    Ok((out, manifest))
}

/// Problems found when checking a rewritten dataset against its source,
/// its manifest and a fresh decode by the teacher. Empty means consistent.
pub fn verify_student_dataset(
    teacher: &Vlm,
    spec: &TaskSpec,
    source: &[RawExample],
    rewritten: &[RawExample],
    manifest: &DistillManifest,
    tok: &Tokenizer,
) -> Result<Vec<String>> {
    let mut problems = Vec::new();
    if source.len() != rewritten.len() || source.len() != manifest.rows.len() {
        problems.push(format!(
            "row counts differ: source {}, rewritten {}, manifest {}",
            source.len(),
            rewritten.len(),
            manifest.rows.len()
        ));
        return Ok(problems);
    }
    let id = teacher_id(teacher, &spec.name)?;
    if id != manifest.teacher_id {
        problems.push(format!("teacher id {id} does not match the manifest"));
    }
    let enc = prompts(spec, source, tok, manifest.encode)?;
    let fresh = decode_examples(teacher, Some(&spec.name), spec, &enc, &manifest.decode)?;
    for (i, ((s, r), (m, d))) in source.iter().zip(rewritten).zip(manifest.rows.iter().zip(fresh)).enumerate() {
        let h = context_hash(spec, s)?;
        if h != m.input_hash || context_hash(spec, r)? != h {
            problems.push(format!("row {i}: context hash differs"));
        }
        if d.tokens != m.teacher_tokens {
            problems.push(format!("row {i}: teacher decode differs from the manifest"));
        }
        if tok.encode(&r.target_text(spec)) != m.teacher_tokens {
            problems.push(format!("row {i}: rewritten target does not re-encode to the teacher tokens"));
        }
        if r.provenance.as_deref() != Some(PROVENANCE) {
            problems.push(format!("row {i}: missing provenance"));
        }
    }
    Ok(problems)
}

/// Entropy in nats of the unigram distribution over all whitespace tokens.
pub fn unigram_entropy<'a>(texts: impl IntoIterator<Item = &'a str>) -> f64 {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut n = 0usize;
    for t in texts {
        for w in t.split_whitespace() {
            *counts.entry(w).or_default() += 1;
            n += 1;
        }
    }
    if n == 0 {
        return 0.0;
    }
    let mut freqs: Vec<usize> = counts.into_values().collect();
    freqs.sort_unstable();
    freqs
        .iter()
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, Split, SynthOptions};
    use crate::train::{ensure_task, Regime};
    use crate::ModelConfig;

    #[test]
    fn entropy_fixtures() {
        assert_eq!(unigram_entropy(["a a a"]), 0.0);
        assert!((unigram_entropy(["a b", "c d"]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(unigram_entropy([""]), 0.0);
    }

    #[test]
    fn rewrite_preserves_inputs_and_verifies() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            // no ids without a word, so every decode has a text form
            vocab_size: synth::all_words().len() + 4,
            ..ModelConfig::toy()
        };
        let tok = synth::suite_tokenizer(cfg.vocab_size).unwrap();
        let spec = synth::spec("toy-dlg", 4).unwrap();
        let mut teacher = Vlm::init(cfg, 3).unwrap();
        ensure_task(&mut teacher, &spec, Regime::Full, 1).unwrap();
        let rows = synth::generate("toy-dlg", 6, 0, Split::Train, &SynthOptions::default()).unwrap();
        let opts = EncodeOptions::new(64);
        let dc = decode_config_for(&spec, 8);
        assert_eq!(dc.max_new_tokens, 8);
        let (out, man) = build_student_dataset(&teacher, &spec, &rows, &tok, opts, &dc).unwrap();
        assert_eq!(out.len(), rows.len());
        for (a, b) in rows.iter().zip(&out) {
            assert_eq!(a.context(&spec), b.context(&spec));
        }
        assert!(verify_student_dataset(&teacher, &spec, &rows, &out, &man, &tok).unwrap().is_empty());
        let (again, man2) = build_student_dataset(&teacher, &spec, &rows, &tok, opts, &dc).unwrap();
        assert_eq!((again, man2), (out.clone(), man.clone()));

        let mut tampered = out.clone();
        tampered[2].segments[0].text.push_str(" x");
        let p = verify_student_dataset(&teacher, &spec, &rows, &tampered, &man, &tok).unwrap();
        assert_eq!(p, vec!["row 2: context hash differs".to_string()]);
        assert!(build_student_dataset(&teacher, &spec, &[], &tok, opts, &dc).is_err());
    }
}
