//! Greedy decoding.

use serde::{Deserialize, Serialize};
use vlm_tensor::kernels::argmax;
use vlm_tensor::Scalar;

use crate::model::{Seq, Vlm};
use crate::{Result, VlmError, EOS_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    #[serde(default = "eos")]
    pub eos_id: u32,
    /// Prompts decoded together in one packed forward pass.
    #[serde(default = "batch")]
    pub batch_size: usize,
}

fn eos() -> u32 {
    EOS_ID
}

fn batch() -> usize {
    32
}

impl DecodeConfig {
    pub fn new(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            eos_id: EOS_ID,
            batch_size: batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    /// Generated tokens, without EOS.
    pub tokens: Vec<u32>,
    /// Whether generation ended with EOS rather than a length limit.
    pub finished: bool,
}

/// A prompt and the segment id given to generated tokens.
#[derive(Clone, Copy, Debug)]
pub struct Prompt<'a> {
    pub tokens: &'a [u32],
    pub segments: &'a [u32],
    pub gen_segment: u32,
}

/// Appends the argmax token (lowest id on ties) until EOS, `max_new_tokens`,
/// or the context limit.
pub fn greedy_decode<S: Scalar>(model: &Vlm<S>, task: Option<&str>, prompt: Prompt<'_>, cfg: &DecodeConfig) -> Result<Decoded> {
    Ok(greedy_decode_batch(model, task, &[prompt], cfg)?.remove(0))
}

/// Decodes many prompts; each sequence's output does not depend on its batch mates.
pub fn greedy_decode_batch<S: Scalar>(
    model: &Vlm<S>,
    task: Option<&str>,
    prompts: &[Prompt<'_>],
    cfg: &DecodeConfig,
) -> Result<Vec<Decoded>> {
    if cfg.max_new_tokens == 0 {
        return Err(VlmError::Invalid("max_new_tokens must be at least 1".into()));
    }
    let limit = model.config.max_context;
    for p in prompts {
        if p.tokens.is_empty() || p.tokens.len() >= limit {
            return Err(VlmError::SequenceTooLong {
                len: p.tokens.len(),
                max: limit,
            });
        }
        if p.segments.len() != p.tokens.len() {
            return Err(VlmError::Invalid("prompt segment ids and tokens differ in length".into()));
        }
    }
    let mut out = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(cfg.batch_size.max(1)) {
        let mut toks: Vec<Vec<u32>> = chunk.iter().map(|p| p.tokens.to_vec()).collect();
        let mut segs: Vec<Vec<u32>> = chunk.iter().map(|p| p.segments.to_vec()).collect();
        let mut done: Vec<Option<bool>> = vec![None; chunk.len()];
        let mut generated: Vec<Vec<u32>> = vec![Vec::new(); chunk.len()];
        loop {
            let active: Vec<usize> = (0..chunk.len()).filter(|&i| done[i].is_none()).collect();
            if active.is_empty() {
                break;
            }
            let seqs: Vec<Seq<'_>> = active
                .iter()
                .map(|&i| Seq {
                    tokens: &toks[i],
                    segments: &segs[i],
                })
                .collect();
            let logits = model.logits(task, &seqs, true)?;
            for (row, &i) in active.iter().enumerate() {
                let next = argmax(logits.row(row)) as u32;
                if next == cfg.eos_id {
                    done[i] = Some(true);
                    continue;
                }
                generated[i].push(next);
                toks[i].push(next);
                segs[i].push(chunk[i].gen_segment);
                if generated[i].len() >= cfg.max_new_tokens || toks[i].len() >= limit {
                    done[i] = Some(false);
                }
            }
        }
        out.extend(generated.into_iter().zip(done).map(|(tokens, d)| Decoded {
            tokens,
            finished: d.unwrap_or(false),
        }));
    }
    Ok(out)
}
