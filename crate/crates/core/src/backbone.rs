//! GPT-2-shaped decoder-only transformer: pre-LN blocks, GELU feed-forward,
//! learned positions, and an output head tied to the token embedding unless
//! configured otherwise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlm_tensor::{Graph, Scalar, Tensor, Var};

use crate::adapter::{adapter_forward, AdapterLayer};
use crate::params::{normal_tensor, param_struct};
use crate::{ModelConfig, Result, VlmError, LN_EPS};

param_struct!(
    /// Weights of one transformer block. Linear maps are stored `in × out`.
    Block {
        ln_1_g, ln_1_b, attn_w, attn_b, proj_w, proj_b,
        ln_2_g, ln_2_b, fc_w, fc_b, out_w, out_b,
    }
);

/// Shared backbone parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub wte: T,
    pub wpe: T,
    pub blocks: Vec<Block<T>>,
    pub ln_f_g: T,
    pub ln_f_b: T,
    /// Present only when the output head is untied from `wte`.
    pub lm_head: Option<T>,
}

pub type BackboneWeights<S = f32> = Backbone<Tensor<S>>;
pub type BackboneVars = Backbone<Var>;

impl<T> Backbone<T> {
    pub fn try_map<'a, U, E>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a T) -> std::result::Result<U, E>,
    ) -> std::result::Result<Backbone<U>, E> {
        let wte = f(&format!("{prefix}wte"), &self.wte)?;
        let wpe = f(&format!("{prefix}wpe"), &self.wpe)?;
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.try_map(&format!("{prefix}h.{i}."), f))
            .collect::<std::result::Result<_, _>>()?;
        let ln_f_g = f(&format!("{prefix}ln_f_g"), &self.ln_f_g)?;
        let ln_f_b = f(&format!("{prefix}ln_f_b"), &self.ln_f_b)?;
        let lm_head = match &self.lm_head {
            Some(h) => Some(f(&format!("{prefix}lm_head"), h)?),
            None => None,
        };
        Ok(Backbone {
            wte,
            wpe,
            blocks,
            ln_f_g,
            ln_f_b,
            lm_head,
        })
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}wte"), &mut self.wte);
        f(&format!("{prefix}wpe"), &mut self.wpe);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("{prefix}h.{i}."), f);
        }
        f(&format!("{prefix}ln_f_g"), &mut self.ln_f_g);
        f(&format!("{prefix}ln_f_b"), &mut self.ln_f_b);
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

/// Tensor shapes of every backbone parameter for `cfg`.
pub fn backbone_shapes(cfg: &ModelConfig) -> Backbone<Vec<usize>> {
    let (d, f, v, t) = (cfg.d_model, cfg.ffn_dim(), cfg.vocab_size, cfg.max_context);
    let block = Block {
        ln_1_g: vec![d],
        ln_1_b: vec![d],
        attn_w: vec![d, 3 * d],
        attn_b: vec![3 * d],
        proj_w: vec![d, d],
        proj_b: vec![d],
        ln_2_g: vec![d],
        ln_2_b: vec![d],
        fc_w: vec![d, f],
        fc_b: vec![f],
        out_w: vec![f, d],
        out_b: vec![d],
    };
    Backbone {
        wte: vec![v, d],
        wpe: vec![t, d],
        blocks: vec![block; cfg.n_layers],
        ln_f_g: vec![d],
        ln_f_b: vec![d],
        lm_head: (!cfg.tie_lm_head).then(|| vec![v, d]),
    }
}

/// Closed-form parameter count: embeddings, `L·(12d² + 13d)` for the blocks
/// (with `ffn_mult = 4`; `(4 + 2k)d² + (9 + k)d` in general), the final
/// layer norm, and an untied head when configured.
pub fn count_backbone_params(cfg: &ModelConfig) -> u64 {
    let (l, d, k) = (cfg.n_layers as u64, cfg.d_model as u64, cfg.ffn_mult as u64);
    let (v, t) = (cfg.vocab_size as u64, cfg.max_context as u64);
    let per_block = (4 + 2 * k) * d * d + (9 + k) * d;
    let head = if cfg.tie_lm_head { 0 } else { v * d };
    v * d + t * d + l * per_block + 2 * d + head
}

impl<S: Scalar> BackboneWeights<S> {
    /// GPT-2 style initialization: `N(0, 0.02)` weights, residual output
    /// projections scaled by `1/sqrt(2L)`, zero biases, unit layer norms.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid_std = 0.02 / ((2 * cfg.n_layers.max(1)) as f64).sqrt();
        backbone_shapes(cfg).try_map("", &mut |name, shape| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            match leaf {
                "ln_1_g" | "ln_2_g" | "ln_f_g" => Ok(Tensor::ones(shape)),
                "ln_1_b" | "ln_2_b" | "ln_f_b" | "attn_b" | "proj_b" | "fc_b" | "out_b" => {
                    Ok(Tensor::zeros(shape))
                }
                "wpe" => normal_tensor(&mut rng, shape, 0.01),
                "proj_w" | "out_w" => normal_tensor(&mut rng, shape, resid_std),
                _ => normal_tensor(&mut rng, shape, 0.02),
            }
        })
    }

    pub fn num_params(&self) -> usize {
        self.entries("").iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> BackboneWeights<T> {
        self.try_map("", &mut |_, t| Ok::<_, std::convert::Infallible>(t.cast()))
            .expect("infallible")
    }

    /// Registers every tensor on `g`; `trainable(name)` decides `requires_grad`.
    pub fn bind(&self, g: &mut Graph<S>, prefix: &str, trainable: &dyn Fn(&str) -> bool) -> Result<BackboneVars> {
        self.try_map(prefix, &mut |name, t| Ok(g.leaf(t.clone(), trainable(name))?))
    }
}

/// One sequence of a packed batch.
#[derive(Clone, Copy, Debug)]
pub struct SeqInput<'a> {
    pub tokens: &'a [u32],
    /// Per-position segment embedding (`t × d`) added to the input.
    pub segment_embed: Option<Var>,
}

/// Task-specific modifications of the forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Steering<'a> {
    /// One adapter per block, applied to the block output.
    pub adapters: Option<&'a [AdapterLayer<Var>]>,
    /// Output head `V × d` replacing the backbone's.
    pub lm_head: Option<Var>,
}

pub struct ForwardOutput {
    /// `N × V` for the `N` packed positions (one row per sequence with `last_only`).
    pub logits: Var,
    /// First row of each sequence in the packed batch.
    pub offsets: Vec<usize>,
    /// Attention probabilities, indexed `[layer][sequence][head]`, when requested.
    pub attention: Vec<Vec<Vec<Var>>>,
}

#[derive(Default)]
pub struct ForwardOptions<'r> {
    /// Enables dropout at the configured rate.
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
    pub record_attention: bool,
    /// Produce logits for the last position of each sequence only.
    pub last_only: bool,
}

fn dropout<S: Scalar>(g: &mut Graph<S>, x: Var, p: f64, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(r) if p > 0.0 => Ok(g.dropout(x, p, &mut **r)?),
        _ => Ok(x),
    }
}

fn linear<S: Scalar>(g: &mut Graph<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

/// Runs the backbone over a packed batch of sequences.
///
/// Input representation is token + position (+ segment) embedding; each
/// sequence attends causally within itself only. With adapters, every block
/// output passes through its adapter before the next block.
pub fn forward<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    w: &BackboneVars,
    seqs: &[SeqInput<'_>],
    steering: Steering<'_>,
    mut opts: ForwardOptions<'_>,
) -> Result<ForwardOutput> {
    if seqs.is_empty() {
        return Err(VlmError::Invalid("forward needs at least one sequence".into()));
    }
    if let Some(a) = steering.adapters {
        if a.len() != cfg.n_layers {
            return Err(VlmError::Invalid(format!(
                "adapter stack has {} layers, backbone has {}",
                a.len(),
                cfg.n_layers
            )));
        }
    }
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut offsets = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.tokens.is_empty() || s.tokens.len() > cfg.max_context {
            return Err(VlmError::SequenceTooLong {
                len: s.tokens.len(),
                max: cfg.max_context,
            });
        }
        offsets.push(ids.len());
        for (p, &tok) in s.tokens.iter().enumerate() {
            if tok as usize >= cfg.vocab_size {
                return Err(VlmError::TokenOutOfRange {
                    id: tok,
                    vocab: cfg.vocab_size,
                });
            }
            ids.push(tok as usize);
            positions.push(p);
        }
    }

    let tok = g.embedding(w.wte, &ids)?;
    let pos = g.embedding(w.wpe, &positions)?;
    let mut x = g.add(tok, pos)?;
    if seqs.iter().any(|s| s.segment_embed.is_some()) {
        let parts = seqs
            .iter()
            .map(|s| {
                s.segment_embed.ok_or_else(|| {
                    VlmError::Invalid("segment embeddings must be given for all or no sequences".into())
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let seg = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        x = g.add(x, seg)?;
    }
    x = dropout(g, x, cfg.dropout, &mut opts.dropout_rng)?;

    let scale = S::lit(1.0 / (hd as f64).sqrt());
    let mut attention = Vec::new();
    for (li, b) in w.blocks.iter().enumerate() {
        let h = g.layer_norm(x, b.ln_1_g, b.ln_1_b, S::lit(LN_EPS))?;
        let qkv = linear(g, h, b.attn_w, b.attn_b)?;
        let mut seq_outs = Vec::with_capacity(seqs.len());
        let mut layer_probs = Vec::new();
        for (si, s) in seqs.iter().enumerate() {
            let rows = if seqs.len() == 1 {
                qkv
            } else {
                g.slice_rows(qkv, offsets[si], s.tokens.len())?
            };
            let mut heads = Vec::with_capacity(cfg.n_heads);
            let mut probs = Vec::new();
            for hi in 0..cfg.n_heads {
                let q = g.slice_cols(rows, hi * hd, hd)?;
                let k = g.slice_cols(rows, d + hi * hd, hd)?;
                let v = g.slice_cols(rows, 2 * d + hi * hd, hd)?;
                let scores = g.matmul_nt(q, k)?;
                let p = g.causal_softmax(scores, scale)?;
                if opts.record_attention {
                    probs.push(p);
                }
                heads.push(g.matmul(p, v)?);
            }
            layer_probs.push(probs);
            seq_outs.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
        }
        if opts.record_attention {
            attention.push(layer_probs);
        }
        let attn = if seq_outs.len() == 1 { seq_outs[0] } else { g.concat_rows(&seq_outs)? };
        let proj = linear(g, attn, b.proj_w, b.proj_b)?;
        let proj = dropout(g, proj, cfg.dropout, &mut opts.dropout_rng)?;
        x = g.add(x, proj)?;

        let h = g.layer_norm(x, b.ln_2_g, b.ln_2_b, S::lit(LN_EPS))?;
        let f = linear(g, h, b.fc_w, b.fc_b)?;
        let f = g.gelu(f)?;
        let f = linear(g, f, b.out_w, b.out_b)?;
        let f = dropout(g, f, cfg.dropout, &mut opts.dropout_rng)?;
        x = g.add(x, f)?;

        if let Some(adapters) = steering.adapters {
            x = adapter_forward(g, &adapters[li], x)?;
        }
    }
    if opts.last_only {
        let rows = seqs
            .iter()
            .zip(&offsets)
            .map(|(s, &o)| g.slice_rows(x, o + s.tokens.len() - 1, 1))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        x = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
    }
    let h = g.layer_norm(x, w.ln_f_g, w.ln_f_b, S::lit(LN_EPS))?;
    let head = steering.lm_head.or(w.lm_head).unwrap_or(w.wte);
    let logits = g.matmul_nt(h, head)?;
    Ok(ForwardOutput {
        logits,
        offsets,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gpt2_small_count() {
        assert_eq!(count_backbone_params(&ModelConfig::gpt2_small()), 124_439_808);
    }

    #[test]
    fn closed_form_matches_allocated_tensors() {
        for cfg in [
            ModelConfig {
                n_layers: 4,
                d_model: 128,
                n_heads: 4,
                vocab_size: 512,
                max_context: 128,
                ..ModelConfig::toy()
            },
            ModelConfig {
                tie_lm_head: false,
                ffn_mult: 2,
                ..ModelConfig::toy()
            },
            ModelConfig {
                n_layers: 0,
                ..ModelConfig::toy()
            },
        ] {
            let w = BackboneWeights::<f32>::init(&cfg, 0).unwrap();
            assert_eq!(w.num_params() as u64, count_backbone_params(&cfg), "{cfg:?}");
        }
    }

    #[test]
    fn degenerate_zero_layer_count() {
        let cfg = ModelConfig {
            n_layers: 0,
            d_model: 8,
            n_heads: 2,
            vocab_size: 10,
            max_context: 4,
            ..ModelConfig::toy()
        };
        assert_eq!(count_backbone_params(&cfg), 10 * 8 + 4 * 8 + 2 * 8);
    }

    #[test]
    fn names_are_unique_and_ordered_consistently() {
        let cfg = ModelConfig {
            tie_lm_head: false,
            ..ModelConfig::toy()
        };
        let mut w = BackboneWeights::<f32>::init(&cfg, 1).unwrap();
        let names: Vec<String> = w.entries("").into_iter().map(|(n, _)| n).collect();
        let mut mutable = Vec::new();
        w.for_each_mut("", &mut |n, _| mutable.push(n.to_string()));
        assert_eq!(names, mutable);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }

    #[test]
    fn rejects_long_sequences_and_bad_ids() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            vocab_size: 10,
            max_context: 4,
            dropout: 0.0,
            ..ModelConfig::toy()
        };
        let w = BackboneWeights::<f32>::init(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let vars = w.bind(&mut g, "", &|_| false).unwrap();
        let run = |g: &mut Graph<f32>, toks: &[u32]| {
            forward(
                g,
                &cfg,
                &vars,
                &[SeqInput {
                    tokens: toks,
                    segment_embed: None,
                }],
                Steering::default(),
                ForwardOptions::default(),
            )
            .map(|_| ())
        };
        assert!(matches!(run(&mut g, &[1, 2, 3, 4, 5]), Err(VlmError::SequenceTooLong { .. })));
        assert!(matches!(run(&mut g, &[1, 10]), Err(VlmError::TokenOutOfRange { .. })));
        assert!(run(&mut g, &[1, 9]).is_ok());
    }
}
