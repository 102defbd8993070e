//! Fusion-mode × head-count × hop grids trained and evaluated under one seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::num::NonZeroUsize;
use std::str::FromStr;

use rayon::prelude::*;

use crate::context::{ContextBuilder, ContextConfig, TextEncoder};
use crate::kg::{KnowledgeGraph, RelationStats, TemplateTable};
use crate::model::{FusionMode, FusionModel, ModelConfig};

use super::{evaluate, prepare_examples, train, Example, PreparedExample, TrainConfig, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationCell {
    pub mode: FusionMode,
    /// Only meaningful for cross-attention; 1 elsewhere.
    pub heads: usize,
    pub max_hop: NonZeroUsize,
}

impl AblationCell {
    pub fn label(&self) -> String {
        match self.mode {
            FusionMode::None => "No Fusion".into(),
            FusionMode::Naive => "Naive Fusion".into(),
            FusionMode::Interaction => "Interaction Token".into(),
            FusionMode::CrossAttention => {
                format!("Cross Attention ({} head{})", self.heads, if self.heads == 1 { "" } else { "s" })
            }
        }
    }
}

/// Fusion variant as written on the command line: `none`, `naive`,
/// `interaction`, `cross-<heads>` (or `cross_attention`, one head).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub mode: FusionMode,
    pub heads: usize,
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(h) = s.strip_prefix("cross-") {
            let heads = h.parse().ok().filter(|&h: &usize| h > 0).ok_or_else(|| format!("bad head count in {s:?}"))?;
            return Ok(Self { mode: FusionMode::CrossAttention, heads });
        }
        Ok(Self { mode: s.parse()?, heads: 1 })
    }
}

/// `{none, naive, interaction, cross-1, cross-4} × {1, 3}`, grouped by hop.
pub fn default_grid() -> Vec<AblationCell> {
    grid(&["none", "naive", "interaction", "cross-1", "cross-4"].map(|v| v.parse().expect("known variant")), &[1, 3])
}

pub fn grid(variants: &[Variant], hops: &[usize]) -> Vec<AblationCell> {
    hops.iter()
        .filter_map(|&h| NonZeroUsize::new(h))
        .flat_map(|max_hop| variants.iter().map(move |v| AblationCell { mode: v.mode, heads: v.heads, max_hop }))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    /// `(train accuracy, test accuracy, last training loss)` or the error.
    pub outcome: Result<(f64, f64, f64), String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn test_accuracy(&self, mode: FusionMode, heads: usize, hop: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.cell.mode == mode && r.cell.heads == heads && r.cell.max_hop.get() == hop)
            .and_then(|r| r.outcome.as_ref().ok().map(|o| o.1))
    }

    /// One aligned row per cell; failed cells carry their error.
    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.cell.label().len()).max().unwrap_or(0).max("fusion".len());
        let mut out = format!("{:<w$}  {:>5}  {:>3}  {:>9}  {:>8}  {:>10}  status\n", "fusion", "heads", "hop", "train_acc", "test_acc", "final_loss");
        for r in &self.rows {
            let heads = if r.cell.mode == FusionMode::CrossAttention { r.cell.heads.to_string() } else { "-".into() };
            let _ = match &r.outcome {
                Ok((tr, te, loss)) => writeln!(
                    out,
                    "{:<w$}  {:>5}  {:>3}  {:>9.4}  {:>8.4}  {:>10.4}  ok",
                    r.cell.label(),
                    heads,
                    r.cell.max_hop,
                    tr,
                    te,
                    loss
                ),
                Err(e) => writeln!(
                    out,
                    "{:<w$}  {:>5}  {:>3}  {:>9}  {:>8}  {:>10}  FAILED: {e}",
                    r.cell.label(),
                    heads,
                    r.cell.max_hop,
                    "-",
                    "-",
                    "-"
                ),
            };
        }
        out
    }
}

/// Everything a grid shares: graph, scoring setup, base configs and data.
pub struct AblationSetup<'a> {
    pub kg: &'a KnowledgeGraph,
    pub templates: &'a TemplateTable,
    pub encoder: &'a dyn TextEncoder,
    pub stats: &'a RelationStats,
    pub context: ContextConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_examples: &'a [Example],
    pub test_examples: &'a [Example],
}

fn run_cell(
    setup: &AblationSetup<'_>,
    cell: AblationCell,
    data: &(Vec<PreparedExample>, Vec<PreparedExample>),
) -> Result<(f64, f64, f64), TrainError> {
    let config = ModelConfig { fusion_mode: cell.mode, n_heads: cell.heads, ..setup.model.clone() };
    let mut model = FusionModel::new(config, setup.kg.num_relations())?;
    let train_metrics = train(&mut model, &data.0, &setup.train)?;
    let test_metrics = evaluate(&model, &data.1)?;
    Ok((train_metrics.accuracy, test_metrics.accuracy, train_metrics.loss_curve.last().copied().unwrap_or(f64::NAN)))
}

/// Trains and evaluates every cell with the same seeds and data. Contexts
/// are built once per hop. A failing cell is recorded and the rest still
/// run.
pub fn run_ablation(cells: &[AblationCell], setup: &AblationSetup<'_>) -> AblationTable {
    let mut prepared: BTreeMap<NonZeroUsize, Result<(Vec<PreparedExample>, Vec<PreparedExample>), String>> =
        BTreeMap::new();
    for cell in cells {
        prepared.entry(cell.max_hop).or_insert_with(|| {
            let ctx = ContextConfig { max_hop: cell.max_hop, ..setup.context };
            let builder = ContextBuilder::new(setup.kg, setup.templates, setup.encoder, setup.stats, ctx)
                .map_err(|e| e.to_string())?;
            let tr = prepare_examples(setup.train_examples, &builder, &setup.model).map_err(|e| e.to_string())?;
            let te = prepare_examples(setup.test_examples, &builder, &setup.model).map_err(|e| e.to_string())?;
            Ok((tr, te))
        });
    }
    let rows = cells
        .par_iter()
        .map(|&cell| {
            let outcome = match &prepared[&cell.max_hop] {
                Ok(data) => run_cell(setup, cell, data).map_err(|e| e.to_string()),
                Err(e) => Err(e.clone()),
            };
            if let Err(e) = &outcome {
                log::error!("{} hop={}: {e}", cell.label(), cell.max_hop);
            }
            AblationRow { cell, outcome }
        })
        .collect();
    AblationTable { rows }
}
