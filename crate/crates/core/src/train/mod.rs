//! Dataset handling, training loop, evaluation and ablation grids.

mod ablation;
mod dataset;
mod synthetic;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{ContextBuilder, ContextError, HashingEncoder, RetrievedContext};
use crate::kg::KnowledgeGraph;
use crate::model::{argmax, FusionModel, GraphInput, ModelConfig, ModelError, ModelInput};
use crate::tensor::Tape;

pub use ablation::{default_grid, grid, run_ablation, AblationCell, AblationRow, AblationSetup, AblationTable, Variant};
pub use dataset::{load_dataset, load_split, parse_dataset, save_dataset, to_jsonl, DatasetError, Example, Split};
pub use synthetic::{make_synthetic_task, planted_choices, question_text, SyntheticTask, ANSWER_RELATION, NUM_CHOICES, RELATIONS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyTrain,
    #[error("empty evaluation set")]
    EmptyEval,
    #[error("non-finite loss {loss} at step {step} (example {example})")]
    NonFinite { step: usize, example: String, loss: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Momentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    /// Questions per update; gradients are averaged over them.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Used only by [`Optimizer::Momentum`].
    pub momentum: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            steps: 2000,
            batch_size: 1,
            seed: 0,
            optimizer: Optimizer::Momentum,
            momentum: 0.9,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// An example with one model input per choice.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub example: Example,
    pub contexts: Vec<RetrievedContext>,
    pub inputs: Vec<ModelInput>,
}

fn lookup_all(kg: &KnowledgeGraph, surfaces: &[String]) -> BTreeSet<crate::kg::EntityId> {
    surfaces
        .iter()
        .filter_map(|s| {
            let id = kg.lookup_entity(s);
            if id.is_none() {
                log::warn!("pre-grounded entity {s:?} is not in the graph");
            }
            id
        })
        .collect()
}

/// Builds the retrieved context and model input for every (example, choice).
/// Pre-grounded entity lists replace text grounding where present.
pub fn prepare_examples(
    examples: &[Example],
    builder: &ContextBuilder<'_>,
    config: &ModelConfig,
) -> Result<Vec<PreparedExample>, TrainError> {
    config.validate()?;
    let node_encoder = HashingEncoder::new(config.d_gnn);
    let tokenizer = config.tokenizer();
    examples
        .iter()
        .map(|ex| {
            let mut contexts = Vec::with_capacity(ex.choices.len());
            let mut inputs = Vec::with_capacity(ex.choices.len());
            for (i, choice) in ex.choices.iter().enumerate() {
                let mut seeds = builder.seeds(&ex.question, choice);
                if let Some(q) = &ex.question_entities {
                    seeds.question = lookup_all(builder.kg, q);
                }
                if let Some(c) = &ex.choice_entities {
                    seeds.answer = lookup_all(builder.kg, &c[i]);
                }
                let ctx = builder.build_with_seeds(&ex.question, choice, seeds)?;
                let graph = GraphInput::from_context(&ctx, builder.kg, &node_encoder)?;
                let tokens = tokenizer.encode_pair(&ex.question, choice, config.max_seq_len);
                inputs.push(ModelInput { tokens, graph });
                contexts.push(ctx);
            }
            Ok(PreparedExample { example: ex.clone(), contexts, inputs })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub answer: usize,
    pub predicted: usize,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Mean cross-entropy over the evaluated examples.
    pub mean_loss: f64,
    /// Per-step training loss; empty for pure evaluation.
    pub loss_curve: Vec<f64>,
    pub predictions: Vec<Prediction>,
}

impl Metrics {
    pub fn summary(&self) -> String {
        format!("accuracy={:.4} ({}/{}) mean_loss={:.6}", self.accuracy, self.correct, self.total, self.mean_loss)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Accuracy, loss and argmax predictions. Examples are scored in parallel;
/// results keep example order.
pub fn evaluate(model: &FusionModel, data: &[PreparedExample]) -> Result<Metrics, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyEval);
    }
    let predictions = data
        .par_iter()
        .map(|p| {
            let logits = model.score_candidates(&p.inputs)?;
            Ok(Prediction { id: p.example.id.clone(), answer: p.example.answer, predicted: argmax(&logits), logits })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let correct = predictions.iter().filter(|p| p.predicted == p.answer).count();
    let loss_sum: f64 = predictions.iter().map(|p| cross_entropy(&p.logits, p.answer)).sum();
    Ok(Metrics {
        accuracy: correct as f64 / predictions.len() as f64,
        correct,
        total: predictions.len(),
        mean_loss: loss_sum / predictions.len() as f64,
        loss_curve: Vec::new(),
        predictions,
    })
}

/// Loss and per-parameter gradients for one question.
fn question_gradients(model: &FusionModel, ex: &PreparedExample) -> Result<(f64, Vec<Option<Vec<f64>>>), ModelError> {
    let mut t = Tape::new();
    let p = model.bind(&mut t);
    let (loss, _) = model.question_loss(&mut t, &p, &ex.inputs, ex.example.answer)?;
    t.backward(loss)?;
    let grads = p.0.iter().map(|&v| t.grad(v).map(<[f64]>::to_vec)).collect();
    Ok((t.value(loss).data()[0], grads))
}

/// Deterministic SGD: each epoch visits the examples in an order drawn from
/// `config.seed`; every step averages the gradients of `batch_size`
/// questions, clips their global norm and updates all parameters. The
/// returned metrics evaluate the final model on `data`.
pub fn train(model: &mut FusionModel, data: &[PreparedExample], config: &TrainConfig) -> Result<Metrics, TrainError> {
    config.validate()?;
    if config.steps > 0 && data.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let shapes: Vec<usize> = model.params().iter().map(|p| p.tensor.len()).collect();
    let mut velocity: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
    let mut loss_curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut acc: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
        let mut step_loss = 0.0;
        for _ in 0..config.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let ex = &data[order.pop().expect("refilled above")];
            let (loss, grads) = question_gradients(model, ex)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite { step, example: ex.example.id.clone(), loss });
            }
            step_loss += loss;
            for (a, g) in acc.iter_mut().zip(grads) {
                if let Some(g) = g {
                    a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
                }
            }
        }
        let scale = 1.0 / config.batch_size as f64;
        let norm = acc.iter().flatten().map(|g| (g * scale).powi(2)).sum::<f64>().sqrt();
        let clip = if norm > config.clip_norm { config.clip_norm / norm } else { 1.0 };
        let mu = match config.optimizer {
            Optimizer::Sgd => 0.0,
            Optimizer::Momentum => config.momentum,
        };
        for ((param, g), v) in model.params_mut().iter_mut().zip(&acc).zip(&mut velocity) {
            for ((w, g), v) in param.tensor.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *v = mu * *v + g * scale * clip;
                *w -= config.lr * *v;
            }
        }
        loss_curve.push(step_loss * scale);
        if (step + 1) % 500 == 0 {
            let recent = &loss_curve[loss_curve.len().saturating_sub(100)..];
            log::info!("step {}: mean loss (last {}) {:.4}", step + 1, recent.len(), recent.iter().sum::<f64>() / recent.len() as f64);
        }
    }
    let mut metrics = if data.is_empty() {
        Metrics { accuracy: 0.0, correct: 0, total: 0, mean_loss: 0.0, loss_curve: Vec::new(), predictions: Vec::new() }
    } else {
        evaluate(model, data)?
    };
    metrics.loss_curve = loss_curve;
    Ok(metrics)
}
