//! Teacher-forced and generation-based evaluation of one task.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vlm_tensor::kernels::{argmax, log_sum_exp};

use crate::decode::{greedy_decode_batch, DecodeConfig, Decoded, Prompt};
use crate::metrics::{bleu, perplexity, rouge, token_f1};
use crate::model::{shifted, Vlm};
use crate::task::{EncodedExample, TaskSpec};
use crate::tokenizer::Tokenizer;
use crate::{Result, VlmError};

/// Sums over the loss-masked positions of a dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TeacherForced {
    pub correct: usize,
    pub count: usize,
    pub nll: f64,
}

impl TeacherForced {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }

    pub fn perplexity(&self) -> Result<f64> {
        perplexity(self.nll, self.count)
    }
}

/// Next-token accuracy and summed NLL on target positions, using the true prefix.
pub fn teacher_forced(model: &Vlm, task: Option<&str>, examples: &[EncodedExample], batch_size: usize) -> Result<TeacherForced> {
    let mut acc = TeacherForced::default();
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&EncodedExample> = chunk.iter().collect();
        let (seqs, targets, mask) = shifted(&refs)?;
        let logits = model.logits(task, &seqs, false)?;
        for (i, (&t, &m)) in targets.iter().zip(&mask).enumerate() {
            if !m {
                continue;
            }
            let row: Vec<f64> = logits.row(i).iter().map(|&x| x as f64).collect();
            acc.nll += log_sum_exp(&row) - row[t];
            acc.correct += usize::from(argmax(&row) == t);
            acc.count += 1;
        }
    }
    Ok(acc)
}

pub fn decode_examples(
    model: &Vlm,
    task: Option<&str>,
    spec: &TaskSpec,
    examples: &[EncodedExample],
    cfg: &DecodeConfig,
) -> Result<Vec<Decoded>> {
    let gen_segment = spec.first_target_id();
    let prompts: Vec<Prompt<'_>> = examples
        .iter()
        .map(|e| {
            let (tokens, segments) = e.prompt();
            Prompt {
                tokens,
                segments,
                gen_segment,
            }
        })
        .collect();
    greedy_decode_batch(model, task, &prompts, cfg)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub examples: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Generations that hit the length limit before EOS.
    pub decode_failures: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predictions: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: BTreeMap<String, TaskEval>,
    /// Ablations in effect when the evaluated parameters were trained.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablation: Vec<String>,
}

impl EvalReport {
    /// Fixed-order text table; BLEU and ROUGE as percentages.
    pub fn table(&self) -> String {
        const COLS: [&str; 8] = ["token_accuracy", "exact_match", "bleu", "rouge1", "rouge2", "rougeL", "f1", "ppl"];
        let mut s = format!("{:<10} {:>6}", "task", "n");
        for c in COLS {
            s.push_str(&format!(" {c:>14}"));
        }
        s.push('\n');
        for (name, t) in &self.tasks {
            s.push_str(&format!("{name:<10} {:>6}", t.examples));
            for c in COLS {
                let v = t.metrics.get(c).copied();
                match v {
                    Some(v) if c == "ppl" => s.push_str(&format!(" {v:>14.3}")),
                    Some(v) => s.push_str(&format!(" {:>14.2}", 100.0 * v)),
                    None => s.push_str(&format!(" {:>14}", "-")),
                }
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub decode: DecodeConfig,
    pub batch_size: usize,
    pub keep_predictions: bool,
}

/// All metrics for one task: teacher-forced accuracy and perplexity, then
/// greedy generations scored by exact match, BLEU, ROUGE and token F1.
pub fn evaluate_task(
    model: &Vlm,
    task: Option<&str>,
    spec: &TaskSpec,
    examples: &[EncodedExample],
    tok: &Tokenizer,
    opts: &EvalOptions,
) -> Result<TaskEval> {
    if examples.is_empty() {
        return Err(VlmError::EmptyDataset(spec.name.clone()));
    }
    let tf = teacher_forced(model, task, examples, opts.batch_size)?;
    let decoded = decode_examples(model, task, spec, examples, &opts.decode)?;
    let preds: Vec<String> = decoded.iter().map(|d| tok.decode(&d.tokens)).collect();
    let golds: Vec<String> = examples.iter().map(|e| tok.decode(e.target())).collect();
    let exact = decoded
        .iter()
        .zip(examples)
        .filter(|(d, e)| d.tokens == e.target())
        .count();
    let p: Vec<&str> = preds.iter().map(String::as_str).collect();
    let g: Vec<&str> = golds.iter().map(String::as_str).collect();
    let r = rouge(&p, &g)?;
    let f1 = p.iter().zip(&g).map(|(a, b)| token_f1(a, b)).sum::<f64>() / p.len() as f64;
    let n = examples.len() as f64;
    let mut metrics = BTreeMap::from([
        ("token_accuracy".to_string(), tf.accuracy()),
        ("exact_match".to_string(), exact as f64 / n),
        ("bleu".to_string(), bleu(&p, &g)?),
        ("rouge1".to_string(), r.rouge1),
        ("rouge2".to_string(), r.rouge2),
        ("rougeL".to_string(), r.rouge_l),
        ("f1".to_string(), f1),
    ]);
    if tf.count > 0 {
        metrics.insert("ppl".to_string(), tf.perplexity()?);
    }
    Ok(TaskEval {
        examples: examples.len(),
        metrics,
        decode_failures: decoded.iter().filter(|d| !d.finished).count(),
        predictions: if opts.keep_predictions { preds } else { Vec::new() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ModelConfig;
    use vlm_tensor::Tensor;

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            vocab_size: 16,
            max_context: 8,
            dropout: 0.0,
            ..ModelConfig::toy()
        };
        let mut m = Vlm::init(cfg, 0).unwrap();
        // a zero head gives equal logits everywhere
        m.backbone.wte = Tensor::zeros(&[16, 8]);
        let e = EncodedExample {
            tokens: vec![4, 5, 6, 1],
            segments: vec![0, 1, 1, 1],
            loss_mask: vec![false, true, true, true],
            target_start: 1,
        };
        let tf = teacher_forced(&m, None, &[e], 4).unwrap();
        assert_eq!(tf.count, 3);
        assert!((tf.perplexity().unwrap() - 16.0).abs() < 1e-4);
        // ties resolve to id 0, which is never a target here
        assert_eq!(tf.correct, 0);
    }
}
