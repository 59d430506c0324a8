//! Minibatch training loop and supervised fine-tuning.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ar::{ArPolicy, Control, Output, Query};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, Adam};
use crate::rng::{mix64, tag, Stream};
use crate::world::Token;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

/// Learning-rate schedule over the run's optimizer steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero.
    Cosine,
}

impl Schedule {
    pub fn lr(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            lr: 1e-3,
            batch_size: 32,
            grad_clip: 1.0,
            max_steps: 0,
            schedule: Schedule::Constant,
            seed: 0x5EED_7A1E,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip", "must be non-negative"));
        }
        Ok(())
    }
}

/// One line of a training-metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_time: f64,
    #[serde(flatten)]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub logs: Vec<StepLog>,
    /// Example-weighted mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainSummary {
    pub fn steps(&self) -> usize {
        self.logs.len()
    }
}

/// Result of one optimization step's objective evaluation.
pub struct StepOut {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub extra: Vec<(&'static str, f64)>,
}

/// A model whose flat parameters can be updated in place.
pub trait Trainable {
    fn params_mut(&mut self) -> &mut Vec<f64>;
}

impl Trainable for ArPolicy {
    fn params_mut(&mut self) -> &mut Vec<f64> {
        &mut self.params
    }
}

/// Shuffled minibatch Adam over `n` items. `step` evaluates the objective
/// on a batch of item indices at the current parameters.
pub fn run_epochs<M, F>(model: &mut M, n: usize, cfg: &TrainConfig, mut step: F) -> Result<TrainSummary>
where
    M: Trainable,
    F: FnMut(&M, &[usize]) -> Result<StepOut>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Argument("training set is empty".into()));
    }
    let start = Instant::now();
    let mut opt = Adam::new(model.params_mut().len());
    let mut summary = TrainSummary::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut total = cfg.epochs * n.div_ceil(cfg.batch_size);
    if cfg.max_steps > 0 {
        total = total.min(cfg.max_steps);
    }
    'epochs: for epoch in 0..cfg.epochs {
        Stream::new(mix64(mix64(cfg.seed, tag::SHUFFLE), epoch as u64)).shuffle(&mut order);
        let mut weighted = 0.0;
        let mut seen = 0;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && summary.logs.len() >= cfg.max_steps {
                if seen > 0 {
                    summary.epoch_losses.push(weighted / seen as f64);
                }
                break 'epochs;
            }
            let mut out = step(model, batch)?;
            let step_no = summary.logs.len();
            if !out.loss.is_finite() {
                return Err(Error::Divergence(format!("step {step_no}: loss is {}", out.loss)));
            }
            if let Some(i) = out.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Divergence(format!("step {step_no}: gradient coordinate {i} is not finite")));
            }
            clip_grad_norm(&mut out.grad, cfg.grad_clip);
            let lr = cfg.schedule.lr(cfg.lr, step_no, total);
            let params = model.params_mut();
            opt.step(params, &out.grad, lr)?;
            if let Some(i) = params.iter().position(|p| !p.is_finite()) {
                return Err(Error::Divergence(format!("step {step_no}: parameter {i} is not finite")));
            }
            weighted += out.loss * batch.len() as f64;
            seen += batch.len();
            summary.logs.push(StepLog {
                step: step_no,
                epoch,
                loss: out.loss,
                lr,
                wall_time: start.elapsed().as_secs_f64(),
                extra: out.extra.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            });
            log::debug!("step {step_no} epoch {epoch} loss {:.5}", out.loss);
        }
        summary.epoch_losses.push(weighted / seen as f64);
        log::info!("epoch {epoch}: mean loss {:.5}", weighted / seen as f64);
    }
    Ok(summary)
}

/// One supervised pair: a text and its layer-1 rendering.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: Vec<Token>,
    pub y: Vec<Token>,
    pub control: Control,
}

/// Mean negative log-likelihood per scored token over a batch, and its
/// gradient.
pub fn nll_step(policy: &ArPolicy, batch: &[&Example]) -> Result<StepOut> {
    let queries = batch
        .iter()
        .map(|e| {
            Ok(Query {
                framed: policy.frame(&e.text, &e.y, e.control)?,
                output: Output::TokenLogprobs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total: usize = queries.iter().map(|q| q.framed.n_free()).sum();
    let scale = 1.0 / total.max(1) as f64;
    let (loss, grad) = policy.loss_and_grad(&queries, |outs| {
        let s: f64 = outs.iter().flatten().sum();
        (-s * scale, outs.iter().map(|o| vec![-scale; o.len()]).collect())
    })?;
    Ok(StepOut {
        loss,
        grad,
        extra: Vec::new(),
    })
}

/// Supervised fine-tuning on `(x, y)` pairs.
pub fn sft_train(policy: &mut ArPolicy, data: &[Example], cfg: &TrainConfig) -> Result<TrainSummary> {
    run_epochs(policy, data.len(), cfg, |p, idx| {
        let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
        nll_step(p, &batch)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ar::{ArConfig, Vocab};

    fn tiny() -> ArPolicy {
        let vocab = Vocab {
            v_text: 4,
            k_ar: 6,
            r: 2,
            max_text: 3,
        };
        let cfg = ArConfig {
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            n_layers: 1,
            max_context: 16,
            ..ArConfig::default()
        };
        ArPolicy::new(cfg, vocab).unwrap()
    }

    #[test]
    fn memorizes_a_single_example() {
        let mut m = tiny();
        let ex = Example {
            text: vec![1, 3, 0],
            y: vec![5, 0, 2, 2, 4, 1],
            control: Control::None,
        };
        let cfg = TrainConfig {
            epochs: 200,
            lr: 1e-2,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let s = sft_train(&mut m, std::slice::from_ref(&ex), &cfg).unwrap();
        assert_eq!(s.steps(), 200);
        let nll = -m.seq_logprob(&ex.text, &ex.y, Control::None).unwrap() / 6.0;
        assert!(nll < 0.1, "nll/token {nll}");
    }

    #[test]
    fn training_is_reproducible() {
        let data: Vec<Example> = (0..10)
            .map(|i| Example {
                text: vec![i % 4, (i + 1) % 4],
                y: vec![i % 6, 1, 2],
                control: Control::None,
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let mut a = tiny();
        let mut b = tiny();
        let la = sft_train(&mut a, &data, &cfg).unwrap();
        sft_train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert!(la.epoch_losses[1] < la.epoch_losses[0]);
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let s = Schedule::Cosine;
        assert_eq!(s.lr(2.0, 0, 10), 2.0);
        assert!((s.lr(2.0, 5, 10) - 1.0).abs() < 1e-12);
        assert!(s.lr(2.0, 10, 10).abs() < 1e-12);
        assert_eq!(Schedule::Constant.lr(2.0, 7, 10), 2.0);
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = tiny();
        let r = run_epochs(&mut m, 3, &TrainConfig::default(), |_, _| {
            Ok(StepOut {
                loss: f64::NAN,
                grad: Vec::new(),
                extra: Vec::new(),
            })
        });
        assert!(matches!(r, Err(Error::Divergence(_))));
    }
}
