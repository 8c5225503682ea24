//! Stored-parameter accounting across tasks and regimes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapter::count_adapter_params;
use crate::backbone::count_backbone_params;
use crate::train::Regime;
use crate::{ModelConfig, Result, VlmError};

/// What one task needs stored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCost {
    pub task: String,
    pub regime: Regime,
    /// Adapter bottleneck; required for the adapter regime.
    #[serde(default)]
    pub bottleneck: Option<usize>,
    pub n_segments: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub regime: Regime,
    pub bottleneck: Option<usize>,
    /// Parameters stored for this task on top of any shared backbone.
    pub additional: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub backbone: u64,
    pub rows: Vec<ReportRow>,
    /// Whether one shared backbone is stored (false when every task keeps its own copy).
    pub shared_backbone: bool,
    pub total_stored: u64,
    /// `total_stored / backbone`.
    pub ratio: f64,
}

impl ParamReport {
    /// Task-specific parameters over the backbone, ignoring full copies.
    pub fn overhead(&self) -> f64 {
        self.ratio - 1.0
    }
}

pub fn task_additional_params(cfg: &ModelConfig, cost: &TaskCost) -> Result<u64> {
    let (d, v, l) = (cfg.d_model as u64, cfg.vocab_size as u64, cfg.n_layers as u64);
    let segments = cost.n_segments as u64 * d;
    Ok(match cost.regime {
        Regime::Full => count_backbone_params(cfg) + segments,
        Regime::LmHead => v * d,
        Regime::Adapter => {
            let m = cost.bottleneck.ok_or_else(|| {
                VlmError::Invalid(format!("task {}: adapter regime needs a bottleneck", cost.task))
            })?;
            count_adapter_params(d, m as u64, l)? + segments
        }
    })
}

pub fn param_report(cfg: &ModelConfig, tasks: &[TaskCost]) -> Result<ParamReport> {
    cfg.validate()?;
    let backbone = count_backbone_params(cfg);
    let rows = tasks
        .iter()
        .map(|t| {
            Ok(ReportRow {
                task: t.task.clone(),
                regime: t.regime,
                bottleneck: t.bottleneck,
                additional: task_additional_params(cfg, t)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let shared_backbone = tasks.is_empty() || tasks.iter().any(|t| t.regime != Regime::Full);
    let total_stored = u64::from(shared_backbone) * backbone + rows.iter().map(|r| r.additional).sum::<u64>();
    Ok(ParamReport {
        backbone,
        rows,
        shared_backbone,
        total_stored,
        ratio: total_stored as f64 / backbone as f64,
    })
}

/// The five tasks with their segment counts and chosen bottlenecks
/// (dialogue, translation, summarization, QA, NLG).
pub fn five_task_schedule(regime: Regime) -> Vec<TaskCost> {
    [("dlg", 100, 3), ("nmt", 300, 2), ("sum", 100, 2), ("qa", 300, 3), ("nlg", 10, 4)]
        .into_iter()
        .map(|(task, m, n_segments)| TaskCost {
            task: task.to_string(),
            regime,
            bottleneck: (regime == Regime::Adapter).then_some(m),
            n_segments,
        })
        .collect()
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:<8} {:>6} {:>14}", "task", "regime", "m", "additional")?;
        for r in &self.rows {
            let regime = match r.regime {
                Regime::Full => "full",
                Regime::LmHead => "lm_head",
                Regime::Adapter => "adapter",
            };
            let m = r.bottleneck.map(|m| m.to_string()).unwrap_or_else(|| "-".into());
            writeln!(f, "{:<12} {:<8} {:>6} {:>14}", r.task, regime, m, r.additional)?;
        }
        writeln!(f, "backbone     {:>30}", self.backbone)?;
        writeln!(f, "stored       {:>30}", self.total_stored)?;
        write!(f, "ratio        {:>29.2}x", self.ratio)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_task_ratios() {
        let cfg = ModelConfig::gpt2_small();
        let full = param_report(&cfg, &five_task_schedule(Regime::Full)).unwrap();
        let head = param_report(&cfg, &five_task_schedule(Regime::LmHead)).unwrap();
        let vlm = param_report(&cfg, &five_task_schedule(Regime::Adapter)).unwrap();
        assert!((full.ratio - 5.0).abs() < 0.005, "{}", full.ratio);
        assert!((head.ratio - 2.55).abs() < 0.02, "{}", head.ratio);
        assert!((vlm.ratio - 1.13).abs() < 0.02, "{}", vlm.ratio);
        assert!((0.12..=0.14).contains(&vlm.overhead()));
        assert_eq!(vlm.total_stored - vlm.backbone, 15_022_080 + 14 * 768);
    }

    #[test]
    fn no_tasks_is_one_backbone() {
        let r = param_report(&ModelConfig::toy(), &[]).unwrap();
        assert_eq!(r.ratio, 1.0);
        assert!(r.shared_backbone);
    }

    #[test]
    fn adapter_needs_bottleneck() {
        let t = TaskCost {
            task: "x".into(),
            regime: Regime::Adapter,
            bottleneck: None,
            n_segments: 2,
        };
        assert!(param_report(&ModelConfig::toy(), &[t]).is_err());
    }

    #[test]
    fn pretty_print_has_ratio() {
        let r = param_report(&ModelConfig::gpt2_small(), &five_task_schedule(Regime::Adapter)).unwrap();
        let s = r.to_string();
        assert!(s.lines().last().unwrap().trim_end().ends_with("1.12x"), "{s}");
    }
}
