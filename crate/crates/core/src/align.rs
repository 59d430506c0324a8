//! Preference optimization of the AR policy: chain-of-hindsight, DPO, a
//! pairwise reward model with PPO or best-of-N selection, and plain
//! continued fine-tuning on the golden side as a control.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ar::{ArPolicy, Control, Output, Query};
use crate::ckpt::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::eval::Generator;
use crate::nn::{log_sigmoid, sigmoid, softplus};
use crate::optim::{clip_grad_norm, Adam};
use crate::prefs::PreferenceTriple;
use crate::rng::{mix64, tag, Stream};
use crate::train::{nll_step, run_epochs, sft_train, Example, StepOut, TrainConfig, TrainSummary, Trainable};
use crate::world::Token;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Coh,
    Dpo,
    Ppo,
    Bon,
    ContinueSft,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coh" => Ok(Method::Coh),
            "dpo" => Ok(Method::Dpo),
            "ppo" => Ok(Method::Ppo),
            "bon" => Ok(Method::Bon),
            "continue-sft" => Ok(Method::ContinueSft),
            _ => Err(Error::config("method", format!("unknown method `{s}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Coh => "coh",
            Method::Dpo => "dpo",
            Method::Ppo => "ppo",
            Method::Bon => "bon",
            Method::ContinueSft => "continue-sft",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub steps: usize,
    pub rollouts: usize,
    pub inner_epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub kl_beta: f64,
    pub clip: f64,
    pub kl_abort: f64,
    pub temperature: f64,
    pub baseline_momentum: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            steps: 40,
            rollouts: 32,
            inner_epochs: 2,
            minibatch: 16,
            lr: 1e-4,
            kl_beta: 0.05,
            clip: 0.2,
            kl_abort: 10.0,
            temperature: 1.0,
            baseline_momentum: 0.9,
            grad_clip: 1.0,
            seed: 0x0990,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub method: Method,
    pub dpo_beta: f64,
    /// Optimization settings of CoH, DPO and continued fine-tuning.
    pub train: TrainConfig,
    pub rm: TrainConfig,
    /// Fraction of triples held out to measure reward-model accuracy.
    pub rm_holdout: f64,
    pub ppo: PpoConfig,
    pub bon_n: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            method: Method::Dpo,
            dpo_beta: 1.0,
            train: TrainConfig {
                epochs: 2,
                lr: 5e-5,
                batch_size: 16,
                ..TrainConfig::default()
            },
            rm: TrainConfig {
                epochs: 2,
                lr: 3e-4,
                batch_size: 16,
                ..TrainConfig::default()
            },
            rm_holdout: 0.1,
            ppo: PpoConfig::default(),
            bon_n: 8,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.rm.validate()?;
        if !(self.dpo_beta.is_finite() && self.dpo_beta > 0.0) {
            return Err(Error::config("dpo_beta", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.rm_holdout) {
            return Err(Error::config("rm_holdout", "must lie in [0, 1)"));
        }
        if self.bon_n == 0 {
            return Err(Error::config("bon_n", "must be at least 1"));
        }
        let p = &self.ppo;
        if p.rollouts == 0 || p.inner_epochs == 0 || p.minibatch == 0 {
            return Err(Error::config("ppo", "rollouts, inner_epochs and minibatch must be positive"));
        }
        if !(p.lr > 0.0 && p.kl_beta >= 0.0 && p.clip > 0.0 && p.kl_abort > 0.0 && p.temperature >= 0.0) {
            return Err(Error::config("ppo", "rates must be positive and temperature non-negative"));
        }
        if !(0.0..1.0).contains(&p.baseline_momentum) {
            return Err(Error::config("ppo.baseline_momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

fn logprob_query(policy: &ArPolicy, text: &[Token], y: &[Token], control: Control) -> Result<Query> {
    Ok(Query {
        framed: policy.frame(text, y, control)?,
        output: Output::TokenLogprobs,
    })
}

// ---------------------------------------------------------------------------
// Chain of hindsight.

/// Mean over triples of `NLL(y_g | x, GOOD) + NLL(y_s | x, BAD)`.
pub fn coh_step(policy: &ArPolicy, batch: &[&PreferenceTriple]) -> Result<StepOut> {
    let mut queries = Vec::with_capacity(2 * batch.len());
    for t in batch {
        queries.push(logprob_query(policy, &t.text, &t.y_g, Control::Good)?);
        queries.push(logprob_query(policy, &t.text, &t.y_s, Control::Bad)?);
    }
    let scale = 1.0 / batch.len() as f64;
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

/// Trains with quality control tokens; the policy samples with `GOOD`
/// afterwards.
pub fn coh_train(policy: &mut ArPolicy, data: &[PreferenceTriple], cfg: &TrainConfig) -> Result<TrainSummary> {
    let s = run_epochs(policy, data.len(), cfg, |p, idx| {
        let batch: Vec<&PreferenceTriple> = idx.iter().map(|&i| &data[i]).collect();
        coh_step(p, &batch)
    })?;
    policy.inference_control = Control::Good;
    Ok(s)
}

// ---------------------------------------------------------------------------
// DPO.

/// `(log π_ref(y_g|x), log π_ref(y_s|x))` for every triple.
pub fn reference_logprobs(reference: &ArPolicy, data: &[PreferenceTriple]) -> Result<Vec<(f64, f64)>> {
    data.par_iter()
        .map(|t| {
            Ok((
                reference.seq_logprob(&t.text, &t.y_g, Control::None)?,
                reference.seq_logprob(&t.text, &t.y_s, Control::None)?,
            ))
        })
        .collect()
}

/// DPO loss and gradient on a batch given frozen reference log-probs.
/// Logs the mean implicit-reward margin `Δ_g − Δ_s`.
pub fn dpo_step(policy: &ArPolicy, batch: &[&PreferenceTriple], reference: &[(f64, f64)], beta: f64) -> Result<StepOut> {
    let mut queries = Vec::with_capacity(2 * batch.len());
    for t in batch {
        queries.push(logprob_query(policy, &t.text, &t.y_g, Control::None)?);
        queries.push(logprob_query(policy, &t.text, &t.y_s, Control::None)?);
    }
    let b = batch.len() as f64;
    let mut margin = 0.0;
    let (loss, grad) = policy.loss_and_grad(&queries, |outs| {
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(outs.len());
        for (k, pair) in outs.chunks(2).enumerate() {
            let dg = pair[0].iter().sum::<f64>() - reference[k].0;
            let ds = pair[1].iter().sum::<f64>() - reference[k].1;
            let z = beta * (dg - ds);
            margin += (dg - ds) / b;
            loss += softplus(-z) / b;
            let w = beta * sigmoid(-z) / b;
            grads.push(vec![-w; pair[0].len()]);
            grads.push(vec![w; pair[1].len()]);
        }
        (loss, grads)
    })?;
    Ok(StepOut {
        loss,
        grad,
        extra: vec![("margin", margin)],
    })
}

/// `−mean log σ(β (Δ_g − Δ_s))` of a batch.
pub fn dpo_loss(policy: &ArPolicy, reference: &ArPolicy, batch: &[PreferenceTriple], beta: f64) -> Result<f64> {
    let r = reference_logprobs(reference, batch)?;
    let p = reference_logprobs(policy, batch)?;
    Ok(-p.iter().zip(&r).map(|(p, r)| log_sigmoid(beta * ((p.0 - r.0) - (p.1 - r.1)))).sum::<f64>() / batch.len() as f64)
}

/// Mean implicit-reward margin of `policy` against `reference`.
pub fn dpo_margin(policy: &ArPolicy, reference: &ArPolicy, data: &[PreferenceTriple]) -> Result<f64> {
    let r = reference_logprobs(reference, data)?;
    let p = reference_logprobs(policy, data)?;
    Ok(p.iter().zip(&r).map(|(p, r)| (p.0 - r.0) - (p.1 - r.1)).sum::<f64>() / data.len() as f64)
}

/// DPO against a frozen snapshot of the incoming policy.
pub fn dpo_train(policy: &mut ArPolicy, data: &[PreferenceTriple], cfg: &TrainConfig, beta: f64) -> Result<TrainSummary> {
    let reference = policy.clone();
    let ref_lp = reference_logprobs(&reference, data)?;
    run_epochs(policy, data.len(), cfg, |p, idx| {
        let batch: Vec<&PreferenceTriple> = idx.iter().map(|&i| &data[i]).collect();
        let refs: Vec<(f64, f64)> = idx.iter().map(|&i| ref_lp[i]).collect();
        dpo_step(p, &batch, &refs, beta)
    })
}

// ---------------------------------------------------------------------------
// Continued fine-tuning control.

/// Supervised training on the golden side of the triples only.
pub fn continue_sft(policy: &mut ArPolicy, data: &[PreferenceTriple], cfg: &TrainConfig) -> Result<TrainSummary> {
    sft_train(policy, &golden_examples(data), cfg)
}

pub fn golden_examples(data: &[PreferenceTriple]) -> Vec<Example> {
    data.iter()
        .map(|t| Example {
            text: t.text.clone(),
            y: t.y_g.clone(),
            control: Control::None,
        })
        .collect()
}

/// First-batch loss of continued fine-tuning, for comparisons.
pub fn continue_sft_first_loss(policy: &ArPolicy, data: &[PreferenceTriple], cfg: &TrainConfig) -> Result<f64> {
    let ex = golden_examples(data);
    let mut order: Vec<usize> = (0..ex.len()).collect();
    Stream::new(mix64(mix64(cfg.seed, tag::SHUFFLE), 0)).shuffle(&mut order);
    let batch: Vec<&Example> = order.iter().take(cfg.batch_size).map(|&i| &ex[i]).collect();
    Ok(nll_step(policy, &batch)?.loss)
}

// ---------------------------------------------------------------------------
// Reward model.

/// A policy backbone with a scalar head at the final position.
#[derive(Clone, Debug)]
pub struct RewardModel {
    pub model: ArPolicy,
}

impl Trainable for RewardModel {
    fn params_mut(&mut self) -> &mut Vec<f64> {
        &mut self.model.params
    }
}

impl RewardModel {
    /// Backbone copied from `policy`, head at zero.
    pub fn from_policy(policy: &ArPolicy) -> Self {
        let mut model = policy.clone();
        for name in ["reward.w", "reward.b"] {
            let r = model.layout().get(name).expect("reward head registered").range();
            model.params[r].iter_mut().for_each(|v| *v = 0.0);
        }
        model.inference_control = Control::None;
        RewardModel { model }
    }

    pub fn score(&self, text: &[Token], y: &[Token]) -> Result<f64> {
        self.model.reward(text, y)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.model.checkpoint(ModelKind::Reward)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        Ok(RewardModel {
            model: ArPolicy::from_checkpoint(c, ModelKind::Reward)?,
        })
    }
}

/// `−mean log σ(r(x, y_g) − r(x, y_s))` and its gradient.
pub fn rm_step(rm: &RewardModel, batch: &[&PreferenceTriple]) -> Result<StepOut> {
    let mut queries = Vec::with_capacity(2 * batch.len());
    for t in batch {
        for y in [&t.y_g, &t.y_s] {
            queries.push(Query {
                framed: rm.model.frame(&t.text, y, Control::None)?,
                output: Output::Reward,
            });
        }
    }
    let b = batch.len() as f64;
    let (loss, grad) = rm.model.loss_and_grad(&queries, |outs| {
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(outs.len());
        for pair in outs.chunks(2) {
            let z = pair[0][0] - pair[1][0];
            loss += softplus(-z) / b;
            let w = sigmoid(-z) / b;
            grads.push(vec![-w]);
            grads.push(vec![w]);
        }
        (loss, grads)
    })?;
    Ok(StepOut {
        loss,
        grad,
        extra: Vec::new(),
    })
}

/// Fraction of triples the model ranks golden-over-synthetic.
pub fn pairwise_accuracy(rm: &RewardModel, data: &[PreferenceTriple]) -> Result<f64> {
    let hits: Vec<bool> = data
        .par_iter()
        .map(|t| Ok(rm.score(&t.text, &t.y_g)? > rm.score(&t.text, &t.y_s)?))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len().max(1) as f64)
}

pub struct RmOutcome {
    pub model: RewardModel,
    pub summary: TrainSummary,
    pub heldout_accuracy: f64,
    pub heldout_size: usize,
}

/// Fits a reward model initialized from `policy` on a seeded split of the
/// triples and reports pairwise accuracy on the held-out part.
pub fn rm_train(policy: &ArPolicy, data: &[PreferenceTriple], cfg: &TrainConfig, holdout: f64) -> Result<RmOutcome> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    Stream::derived(cfg.seed, tag::SPLIT).shuffle(&mut order);
    let n_hold = ((data.len() as f64) * holdout).round() as usize;
    let (held, train): (Vec<PreferenceTriple>, Vec<PreferenceTriple>) = (
        order[..n_hold].iter().map(|&i| data[i].clone()).collect(),
        order[n_hold..].iter().map(|&i| data[i].clone()).collect(),
    );
    let mut rm = RewardModel::from_policy(policy);
    let summary = run_epochs(&mut rm, train.len(), cfg, |m, idx| {
        let batch: Vec<&PreferenceTriple> = idx.iter().map(|&i| &train[i]).collect();
        rm_step(m, &batch)
    })?;
    let heldout_accuracy = if held.is_empty() { f64::NAN } else { pairwise_accuracy(&rm, &held)? };
    Ok(RmOutcome {
        model: rm,
        summary,
        heldout_accuracy,
        heldout_size: held.len(),
    })
}

// ---------------------------------------------------------------------------
// PPO.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoLog {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub loss: f64,
}

struct Rollout {
    framed: crate::ar::Framed,
    old_lp: Vec<f64>,
    reward: f64,
    kl: f64,
}

/// Zero-mean, unit-variance rescaling; all zeros when the values are
/// (numerically) constant.
pub fn whiten(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 1e-12 * (1.0 + mean.abs()) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - mean) / sd).collect()
}

/// Clipped-surrogate policy optimization of `r(x, y) − β·KL(π ‖ π_ref)`.
///
/// Each step samples rollouts for random prompts, scores them with the
/// reward model minus the summed per-token log-ratio to the frozen
/// reference, subtracts a running-mean baseline, whitens the advantages,
/// and runs `inner_epochs` passes of the clipped objective.
pub fn ppo_train(policy: &mut ArPolicy, rm: &RewardModel, prompts: &[Vec<Token>], cfg: &PpoConfig) -> Result<Vec<PpoLog>> {
    if prompts.is_empty() {
        return Err(Error::Argument("PPO needs at least one prompt".into()));
    }
    let reference = policy.clone();
    let mut opt = Adam::new(policy.n_params());
    let mut baseline: Option<f64> = None;
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let step_seed = mix64(mix64(cfg.seed, tag::ROLLOUT), step as u64);
        let mut pick = Stream::new(step_seed);
        let texts: Vec<&Vec<Token>> = (0..cfg.rollouts).map(|_| &prompts[pick.below(prompts.len())]).collect();
        let current = &*policy;
        let rollouts: Vec<Rollout> = texts
            .par_iter()
            .enumerate()
            .map(|(i, text)| {
                let y = current.sample(text, Control::None, cfg.temperature, mix64(step_seed, i as u64))?;
                let framed = current.frame(text, &y, Control::None)?;
                let old_lp = current.token_logprobs(&framed)?;
                let ref_lp = reference.token_logprobs(&framed)?;
                let kl: f64 = old_lp.iter().zip(&ref_lp).map(|(a, b)| a - b).sum();
                Ok(Rollout {
                    reward: rm.score(text, &y)?,
                    framed,
                    old_lp,
                    kl,
                })
            })
            .collect::<Result<_>>()?;
        let mean_reward = rollouts.iter().map(|r| r.reward).sum::<f64>() / rollouts.len() as f64;
        let mean_kl = rollouts.iter().map(|r| r.kl).sum::<f64>() / rollouts.len() as f64;
        if mean_kl > cfg.kl_abort {
            return Err(Error::Divergence(format!("step {step}: mean KL to reference {mean_kl:.3} exceeds {}", cfg.kl_abort)));
        }
        let scores: Vec<f64> = rollouts.iter().map(|r| r.reward - cfg.kl_beta * r.kl).collect();
        let batch_mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let b = *baseline.get_or_insert(batch_mean);
        let adv = whiten(&scores.iter().map(|s| s - b).collect::<Vec<_>>());
        baseline = Some(cfg.baseline_momentum * b + (1.0 - cfg.baseline_momentum) * batch_mean);

        let mut last_loss = 0.0;
        for epoch in 0..cfg.inner_epochs {
            let mut order: Vec<usize> = (0..rollouts.len()).collect();
            Stream::new(mix64(step_seed, tag::SHUFFLE + epoch as u64)).shuffle(&mut order);
            for mb in order.chunks(cfg.minibatch) {
                let queries: Vec<Query> = mb
                    .iter()
                    .map(|&i| Query {
                        framed: rollouts[i].framed.clone(),
                        output: Output::TokenLogprobs,
                    })
                    .collect();
                let n_tok: usize = mb.iter().map(|&i| rollouts[i].framed.n_free()).sum();
                let scale = 1.0 / n_tok.max(1) as f64;
                let (loss, mut grad) = policy.loss_and_grad(&queries, |outs| {
                    let mut loss = 0.0;
                    let mut grads = Vec::with_capacity(outs.len());
                    for (k, lp) in outs.iter().enumerate() {
                        let r = &rollouts[mb[k]];
                        let a = adv[mb[k]];
                        let mut g = vec![0.0; lp.len()];
                        for j in 0..r.framed.n_free() {
                            let ratio = (lp[j] - r.old_lp[j]).exp();
                            let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
                            let (u, c) = (ratio * a, clipped * a);
                            loss -= u.min(c) * scale;
                            if u <= c {
                                g[j] = -a * ratio * scale;
                            }
                        }
                        grads.push(g);
                    }
                    (loss, grads)
                })?;
                if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                    return Err(Error::Divergence(format!("step {step}: gradient coordinate {i} is not finite")));
                }
                clip_grad_norm(&mut grad, cfg.grad_clip);
                opt.step(&mut policy.params, &grad, cfg.lr)?;
                last_loss = loss;
            }
        }
        log::info!("ppo step {step}: reward {mean_reward:.4} kl {mean_kl:.4}");
        logs.push(PpoLog {
            step,
            mean_reward,
            mean_kl,
            loss: last_loss,
        });
    }
    Ok(logs)
}

// ---------------------------------------------------------------------------
// Best-of-N.

/// Samples `n` candidates and returns the one with the highest reward
/// (ties to the lowest candidate index) with every candidate's reward.
pub fn bon_select(
    policy: &ArPolicy,
    rm: &RewardModel,
    text: &[Token],
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<(Vec<Token>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::Argument("best-of-N needs N ≥ 1".into()));
    }
    let mut best: Option<Vec<Token>> = None;
    let mut best_r = f64::NEG_INFINITY;
    let mut rewards = Vec::with_capacity(n);
    for j in 0..n {
        let y = policy.sample(text, policy.inference_control, temperature, mix64(seed, j as u64))?;
        let r = if n == 1 { 0.0 } else { rm.score(text, &y)? };
        rewards.push(r);
        if best.is_none() || r > best_r {
            best_r = r;
            best = Some(y);
        }
    }
    Ok((best.expect("n ≥ 1"), rewards))
}

/// Best-of-N as a response generator.
pub struct BestOfN<'a> {
    pub policy: &'a ArPolicy,
    pub rm: &'a RewardModel,
    pub n: usize,
    pub temperature: f64,
}

impl Generator for BestOfN<'_> {
    fn generate(&self, text: &[Token], seed: u64) -> Result<Vec<Token>> {
        Ok(bon_select(self.policy, self.rm, text, self.n, self.temperature, seed)?.0)
    }
}

// ---------------------------------------------------------------------------
// Dispatch.

/// Training artifacts of one alignment run.
#[derive(Default)]
pub struct AlignOutcome {
    pub summary: Option<TrainSummary>,
    pub reward_model: Option<RmOutcome>,
    pub ppo: Vec<PpoLog>,
}

/// Runs `cfg.method` on the triples. CoH, DPO, PPO and continued
/// fine-tuning update `policy`; best-of-N only fits the reward model and
/// leaves the policy as is.
pub fn align_policy(policy: &mut ArPolicy, data: &[PreferenceTriple], cfg: &AlignConfig) -> Result<AlignOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Argument("preference dataset is empty".into()));
    }
    let mut out = AlignOutcome::default();
    match cfg.method {
        Method::Coh => out.summary = Some(coh_train(policy, data, &cfg.train)?),
        Method::Dpo => out.summary = Some(dpo_train(policy, data, &cfg.train, cfg.dpo_beta)?),
        Method::ContinueSft => out.summary = Some(continue_sft(policy, data, &cfg.train)?),
        Method::Bon => out.reward_model = Some(rm_train(policy, data, &cfg.rm, cfg.rm_holdout)?),
        Method::Ppo => {
            let rm = rm_train(policy, data, &cfg.rm, cfg.rm_holdout)?;
            let prompts: Vec<Vec<Token>> = data.iter().map(|t| t.text.clone()).collect();
            out.ppo = ppo_train(policy, &rm.model, &prompts, &cfg.ppo)?;
            out.reward_model = Some(rm);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ar::{ArConfig, Vocab};

    fn micro() -> ArPolicy {
        let vocab = Vocab {
            v_text: 3,
            k_ar: 4,
            r: 2,
            max_text: 2,
        };
        let cfg = ArConfig {
            d_model: 16,
            n_heads: 2,
            d_ffn: 24,
            n_layers: 2,
            max_context: 12,
            init_std: 0.3,
            param_seed: 11,
        };
        ArPolicy::new(cfg, vocab).unwrap()
    }

    fn triples() -> Vec<PreferenceTriple> {
        vec![
            PreferenceTriple {
                iter: 0,
                speaker: 0,
                seed: 1,
                text: vec![1, 2],
                y_g: vec![0, 3, 2, 1],
                y_s: vec![1, 1],
            },
            PreferenceTriple {
                iter: 0,
                speaker: 1,
                seed: 2,
                text: vec![0],
                y_g: vec![2, 2],
                y_s: vec![3],
            },
        ]
    }

    #[test]
    fn dpo_loss_is_ln2_at_reference() {
        let p = micro();
        let l = dpo_loss(&p, &p, &triples(), 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-9);
        assert!(softplus(-50.0) < 1e-20);
    }

    #[test]
    fn rm_loss_is_ln2_with_zero_head() {
        let rm = RewardModel::from_policy(&micro());
        let d = triples();
        let batch: Vec<&PreferenceTriple> = d.iter().collect();
        let out = rm_step(&rm, &batch).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn coh_loss_decomposes() {
        let p = micro();
        let d = triples();
        let batch: Vec<&PreferenceTriple> = d.iter().collect();
        let out = coh_step(&p, &batch).unwrap();
        let direct: f64 = d
            .iter()
            .map(|t| -p.seq_logprob(&t.text, &t.y_g, Control::Good).unwrap() - p.seq_logprob(&t.text, &t.y_s, Control::Bad).unwrap())
            .sum::<f64>()
            / 2.0;
        assert!((out.loss - direct).abs() < 1e-12);
    }

    #[test]
    fn whiten_handles_constants() {
        assert_eq!(whiten(&[0.1, 0.1, 0.1]), vec![0.0; 3]);
        let w = whiten(&[1.0, 2.0, 3.0]);
        assert!(w.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn constant_reward_without_kl_leaves_policy_unchanged() {
        let mut p = micro();
        let before = p.params.clone();
        let mut rm = RewardModel::from_policy(&p);
        let b = rm.model.layout().get("reward.b").unwrap().offset;
        rm.model.params[b] = 0.7;
        let cfg = PpoConfig {
            steps: 2,
            rollouts: 6,
            kl_beta: 0.0,
            ..PpoConfig::default()
        };
        let logs = ppo_train(&mut p, &rm, &[vec![0, 1], vec![2]], &cfg).unwrap();
        assert_eq!(p.params, before);
        assert!(logs.iter().all(|l| l.mean_kl == 0.0 && (l.mean_reward - 0.7).abs() < 1e-12));
    }

    #[test]
    fn bon_returns_pool_maximum() {
        let p = micro();
        let mut rm = RewardModel::from_policy(&p);
        let w = rm.model.layout().get("reward.w").unwrap().range();
        let mut rng = Stream::new(3);
        for v in &mut rm.model.params[w] {
            *v = rng.normal();
        }
        for seed in 0..20 {
            let (y, rewards) = bon_select(&p, &rm, &[1, 0], 5, 1.0, seed).unwrap();
            let best = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(rm.score(&[1, 0], &y).unwrap(), best);
        }
        let (y1, _) = bon_select(&p, &rm, &[1, 0], 1, 1.0, 4).unwrap();
        assert_eq!(y1, p.sample(&[1, 0], Control::None, 1.0, mix64(4, 0)).unwrap());
    }

    #[test]
    fn continue_sft_matches_sft_on_golden_half() {
        let p = micro();
        let d = triples();
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let first = continue_sft_first_loss(&p, &d, &cfg).unwrap();
        let ex = golden_examples(&d);
        let direct = nll_step(&p, &ex.iter().collect::<Vec<_>>()).unwrap().loss;
        assert!((first - direct).abs() < 1e-12);
        let mut a = p.clone();
        let mut b = p.clone();
        continue_sft(&mut a, &d, &cfg).unwrap();
        sft_train(&mut b, &ex, &cfg).unwrap();
        assert_eq!(a.params, b.params);
    }

    fn check_grad(p: &ArPolicy, f: impl Fn(&ArPolicy) -> StepOut) {
        let g = f(p).grad;
        let coords = Stream::new(99).sample_indices(p.n_params(), 200);
        let h = 1e-5;
        let mut q = p.clone();
        for i in coords {
            let orig = q.params[i];
            q.params[i] = orig + h;
            let up = f(&q).loss;
            q.params[i] = orig - h;
            let down = f(&q).loss;
            q.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - g[i]).abs() / (fd.abs() + g[i].abs()).max(1e-6);
            assert!(err < 1e-4, "coord {i}: analytic {} numeric {fd}", g[i]);
        }
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let mut p = micro();
        let w = p.layout().get("reward.w").unwrap().range();
        let mut rng = Stream::new(5);
        for v in &mut p.params[w] {
            *v = 0.3 * rng.normal();
        }
        let d = triples();
        let batch: Vec<&PreferenceTriple> = d.iter().collect();
        let ex = golden_examples(&d);
        let exb: Vec<&Example> = ex.iter().collect();
        check_grad(&p, |m| nll_step(m, &exb).unwrap());
        check_grad(&p, |m| coh_step(m, &batch).unwrap());
        let refs = vec![(-3.0, -2.5), (-1.0, -1.7)];
        check_grad(&p, |m| dpo_step(m, &batch, &refs, 0.7).unwrap());
        check_grad(&p, |m| rm_step(&RewardModel { model: m.clone() }, &batch).unwrap());
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Coh, Method::Dpo, Method::Ppo, Method::Bon, Method::ContinueSft] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("sft".parse::<Method>().is_err());
    }
}
