//! Iterated self-improvement: build preference data with the current
//! policy, merge it with the previous window, align, evaluate, repeat.
//!
//! Iteration `t` (0-based) produces the policy trained on the `t`-th
//! dataset, so iteration 0 is the first aligned model ("Iter1" in report
//! tables), iteration 1 is "Iter2", and so on.
//!
//! Output layout:
//!
//! ```text
//! <out>/ledger.jsonl          one IterationRecord per line, append-only
//! <out>/baseline.json         evaluation snapshot of the initial policy
//! <out>/iter_<t>/dataset.jsonl
//! <out>/iter_<t>/policy.ckpt
//! <out>/iter_<t>/metrics.json
//! ```

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::{align_policy, AlignConfig, Method, PpoLog};
use crate::ar::{ArPolicy, Control};
use crate::binio::sha256_hex;
use crate::ckpt::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::eval::{
    generate_and_score, kl_gap, rep_gap, std_dev, Estimate, EvalSet, Generator, GapReport, ModelRow, PolicyConditionals,
    PolicySampler, RunMetrics, WinRate,
};
use crate::nar::{NarModel, Recon};
use crate::prefs::{build_pref_slice, merge_iterations, PreferenceDataset};
use crate::rng::{mix64, tag};
use crate::train::StepLog;
use crate::world::World;

// ---------------------------------------------------------------------------
// Snapshot evaluation.

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalPlan {
    /// Independent generation passes over the evaluation set.
    pub runs: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for EvalPlan {
    fn default() -> Self {
        EvalPlan {
            runs: 10,
            temperature: 1.0,
            seed: 0xE7A1,
        }
    }
}

impl EvalPlan {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::config("eval.runs", "must be at least 1"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("eval.temperature", "must be non-negative"));
        }
        Ok(())
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        mix64(mix64(self.seed, tag::EVAL_RUN), run as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub runs: usize,
    pub ter_mean: f64,
    pub ter_sd: f64,
    pub sim_mean: f64,
    pub sim_sd: f64,
    pub kl_gap: Estimate,
    pub rep_gap: Estimate,
    /// Oracle-judge outcome against the baseline, pooled over runs.
    pub win_rate: Option<WinRate>,
}

impl EvalSummary {
    pub fn row(&self, name: &str) -> ModelRow {
        ModelRow {
            name: name.to_string(),
            ter_mean: self.ter_mean,
            ter_sd: self.ter_sd,
            sim_mean: self.sim_mean,
            sim_sd: self.sim_sd,
            kl_gap: Some(self.kl_gap),
            rep_gap: Some(self.rep_gap),
        }
    }
}

/// Everything measured on one policy snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub policy_hash: String,
    pub summary: EvalSummary,
    pub per_run: Vec<Vec<Recon>>,
    pub gap: GapReport,
}

impl Snapshot {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("snapshot: {e}")))
    }
}

/// Runs the evaluation battery `plan.runs` times with derived seeds.
///
/// `generator` defaults to sampling the policy at `plan.temperature`. The
/// distribution gap is measured on the policy itself, the representation
/// gap against the first run's samples.
pub fn snapshot_eval(
    world: &World,
    nar: &NarModel,
    set: &EvalSet,
    policy: &ArPolicy,
    generator: Option<&dyn Generator>,
    plan: &EvalPlan,
    baseline: Option<&Snapshot>,
) -> Result<Snapshot> {
    plan.validate()?;
    let sampler = PolicySampler {
        policy,
        temperature: plan.temperature,
    };
    let gen = generator.unwrap_or(&sampler);
    let mut per_run = Vec::with_capacity(plan.runs);
    let mut synthetic = Vec::new();
    for r in 0..plan.runs {
        let results = generate_and_score(world, nar, set, gen, plan.run_seed(r))?;
        if r == 0 {
            synthetic = results.iter().map(|x| x.y.clone()).collect();
        }
        per_run.push(results.into_iter().map(|x| x.recon).collect::<Vec<Recon>>());
    }
    let metrics: Vec<RunMetrics> = per_run.iter().map(|r| RunMetrics::of(r)).collect();
    let ters: Vec<f64> = metrics.iter().map(|m| m.ter).collect();
    let sims: Vec<f64> = metrics.iter().map(|m| m.sim).collect();
    let conditionals = PolicyConditionals {
        policy,
        control: policy.inference_control,
    };
    let kl = kl_gap(world, &conditionals, set)?;
    let gap = rep_gap(policy, set, &synthetic, plan.seed)?;
    let win_rate = match baseline {
        None => None,
        Some(b) => {
            if b.per_run.len() != per_run.len() || b.per_run.iter().zip(&per_run).any(|(x, y)| x.len() != y.len()) {
                return Err(Error::Argument("baseline snapshot was evaluated on a different plan".into()));
            }
            let mine: Vec<Recon> = per_run.iter().flatten().copied().collect();
            let theirs: Vec<Recon> = b.per_run.iter().flatten().copied().collect();
            Some(WinRate::compare(&mine, &theirs))
        }
    };
    Ok(Snapshot {
        policy_hash: policy.checkpoint(ModelKind::Ar).hash(),
        summary: EvalSummary {
            runs: plan.runs,
            ter_mean: ters.iter().sum::<f64>() / ters.len() as f64,
            ter_sd: std_dev(&ters),
            sim_mean: sims.iter().sum::<f64>() / sims.len() as f64,
            sim_sd: std_dev(&sims),
            kl_gap: kl,
            rep_gap: gap.centroid_distance,
            win_rate,
        },
        per_run,
        gap,
    })
}

// ---------------------------------------------------------------------------
// Iterations.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterationPlan {
    pub iterations: usize,
    /// Fresh triples per iteration.
    pub n: usize,
    pub align: AlignConfig,
    /// Seed of the corpus the triples are drawn from; iteration `t` takes
    /// items `t·n .. (t+1)·n`.
    pub base_seed: u64,
    /// Sampling temperature of synthetic responses.
    pub temperature: f64,
    pub eval: EvalPlan,
}

impl Default for IterationPlan {
    fn default() -> Self {
        IterationPlan {
            iterations: 3,
            n: 500,
            align: AlignConfig::default(),
            base_seed: 0x17E2,
            temperature: 1.0,
            eval: EvalPlan::default(),
        }
    }
}

impl IterationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if self.n == 0 {
            return Err(Error::config("n", "must be at least 1"));
        }
        if self.align.method == Method::Bon {
            return Err(Error::config("align.method", "best-of-N does not update the policy and cannot be iterated"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be non-negative"));
        }
        self.align.validate()?;
        self.eval.validate()
    }

    /// Item indices of iteration `t`'s fresh triples: consecutive blocks of
    /// the corpus seeded by `base_seed`.
    pub fn dataset_items(&self, t: usize) -> std::ops::Range<usize> {
        t * self.n..(t + 1) * self.n
    }

    /// The alignment settings of iteration `t`, with per-iteration seeds.
    pub fn align_config(&self, t: usize) -> AlignConfig {
        let mut c = self.align.clone();
        c.train.seed = mix64(c.train.seed, t as u64);
        c.rm.seed = mix64(c.rm.seed, t as u64);
        c.ppo.seed = mix64(c.ppo.seed, t as u64);
        c
    }
}

/// Inputs an iteration run reads but never modifies.
pub struct IterationInputs<'a> {
    pub world: &'a World,
    pub initial: &'a ArPolicy,
    /// NAR model and evaluation set; without them iterations are not
    /// evaluated.
    pub eval: Option<(&'a NarModel, &'a EvalSet)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationRecord {
    pub iteration: usize,
    pub status: Status,
    pub plan_hash: String,
    pub dataset_start: usize,
    pub pre_hash: String,
    pub dataset_hash: Option<String>,
    pub dataset_size: Option<usize>,
    pub post_hash: Option<String>,
    pub eval: Option<EvalSummary>,
    pub error: Option<String>,
}

#[derive(Serialize)]
struct IterationMetrics<'a> {
    iteration: usize,
    method: Method,
    train: &'a [StepLog],
    epoch_losses: &'a [f64],
    rm_heldout_accuracy: Option<f64>,
    ppo: &'a [PpoLog],
    eval: Option<&'a EvalSummary>,
}

pub fn iteration_dir(out: &Path, t: usize) -> PathBuf {
    out.join(format!("iter_{t}"))
}

pub fn ledger_path(out: &Path) -> PathBuf {
    out.join("ledger.jsonl")
}

/// Reads the ledger, dropping a trailing partial line left by an
/// interrupted append.
pub fn read_ledger(out: &Path) -> Result<Vec<IterationRecord>> {
    let path = ledger_path(out);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn append_record(out: &Path, rec: &IterationRecord) -> Result<()> {
    let path = ledger_path(out);
    if let Ok(text) = std::fs::read_to_string(&path) {
        if !text.is_empty() && !text.ends_with('\n') {
            let keep = text.rfind('\n').map_or(0, |i| i + 1);
            std::fs::write(&path, &text[..keep]).map_err(|e| Error::io(&path, e))?;
        }
    }
    let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    let mut line = serde_json::to_string(rec).expect("record serializes");
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
    f.sync_all().map_err(|e| Error::io(&path, e))
}

/// Writes through a temporary file so a crash never leaves a truncated
/// artifact under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn policy_hash(p: &ArPolicy) -> String {
    p.checkpoint(ModelKind::Ar).hash()
}

/// Hash binding a ledger to its plan, world, and starting policy.
pub fn plan_hash(plan: &IterationPlan, inputs: &IterationInputs) -> String {
    let eval = inputs.eval.map(|(nar, set)| (nar.checkpoint().hash(), set.len()));
    let key = serde_json::json!({
        "plan": plan,
        "world": inputs.world.hash(),
        "initial": policy_hash(inputs.initial),
        "eval": eval,
    });
    sha256_hex(key.to_string().as_bytes())
}

/// Loads or computes the baseline snapshot of the initial policy.
fn baseline_snapshot(out: &Path, plan: &IterationPlan, inputs: &IterationInputs, nar: &NarModel, set: &EvalSet) -> Result<Snapshot> {
    let path = out.join("baseline.json");
    let want = policy_hash(inputs.initial);
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(s) = Snapshot::from_json(&text) {
            if s.policy_hash == want && s.summary.runs == plan.eval.runs && s.per_run.first().map(Vec::len) == Some(set.len()) {
                return Ok(s);
            }
        }
    }
    let s = snapshot_eval(inputs.world, nar, set, inputs.initial, None, &plan.eval, None)?;
    write_atomic(&path, s.to_json().as_bytes())?;
    Ok(s)
}

/// Verifies a completed iteration on disk and returns its dataset and
/// policy.
fn load_completed(out: &Path, rec: &IterationRecord, pre_hash: &str) -> Result<(PreferenceDataset, ArPolicy)> {
    let dir = iteration_dir(out, rec.iteration);
    if rec.pre_hash != pre_hash {
        return Err(Error::Provenance(format!("iteration {} started from a different policy", rec.iteration)));
    }
    let ds = PreferenceDataset::load(&dir.join("dataset.jsonl"))?;
    if Some(ds.hash()) != rec.dataset_hash {
        return Err(Error::Provenance(format!("iteration {} dataset does not match the ledger", rec.iteration)));
    }
    let ck = Checkpoint::load(&dir.join("policy.ckpt"))?;
    if Some(ck.hash()) != rec.post_hash {
        return Err(Error::Provenance(format!("iteration {} checkpoint does not match the ledger", rec.iteration)));
    }
    Ok((ds, ArPolicy::from_checkpoint(&ck, ModelKind::Ar)?))
}

/// Runs (or resumes) the iteration loop in `out`.
///
/// Iterations already recorded as completed for the same plan are
/// verified by hash and skipped. A failing stage appends a failed record
/// and stops the loop with the stage's error.
pub fn run_iterations(plan: &IterationPlan, inputs: &IterationInputs, out: &Path) -> Result<Vec<IterationRecord>> {
    plan.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let hash = plan_hash(plan, inputs);
    let existing = read_ledger(out)?;
    if let Some(r) = existing.iter().find(|r| r.plan_hash != hash) {
        return Err(Error::Provenance(format!(
            "{} holds iteration {} of a different plan",
            out.display(),
            r.iteration
        )));
    }
    let baseline = match inputs.eval {
        Some((nar, set)) => Some(baseline_snapshot(out, plan, inputs, nar, set)?),
        None => None,
    };

    let mut policy = inputs.initial.clone();
    let mut previous: Option<PreferenceDataset> = None;
    let mut records = Vec::with_capacity(plan.iterations);
    for t in 0..plan.iterations {
        let pre_hash = policy_hash(&policy);
        if let Some(rec) = existing.iter().find(|r| r.iteration == t && r.status == Status::Ok) {
            let (ds, next) = load_completed(out, rec, &pre_hash)?;
            log::info!("iteration {t}: already complete, skipping");
            previous = Some(ds);
            policy = next;
            records.push(rec.clone());
            continue;
        }
        let mut rec = IterationRecord {
            iteration: t,
            status: Status::Ok,
            plan_hash: hash.clone(),
            dataset_start: plan.dataset_items(t).start,
            pre_hash,
            dataset_hash: None,
            dataset_size: None,
            post_hash: None,
            eval: None,
            error: None,
        };
        match run_one(plan, inputs, out, t, &policy, previous.as_ref(), baseline.as_ref(), &mut rec) {
            Ok((ds, next)) => {
                append_record(out, &rec)?;
                previous = Some(ds);
                policy = next;
                records.push(rec);
            }
            Err(e) => {
                log::error!("iteration {t} failed: {e}");
                rec.status = Status::Failed;
                rec.error = Some(e.to_string());
                append_record(out, &rec)?;
                return Err(e);
            }
        }
    }
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    plan: &IterationPlan,
    inputs: &IterationInputs,
    out: &Path,
    t: usize,
    policy: &ArPolicy,
    previous: Option<&PreferenceDataset>,
    baseline: Option<&Snapshot>,
    rec: &mut IterationRecord,
) -> Result<(PreferenceDataset, ArPolicy)> {
    let dir = iteration_dir(out, t);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let fresh = build_pref_slice(inputs.world, policy, plan.dataset_items(t), t, plan.base_seed, plan.temperature)?;
    let merged = merge_iterations(previous, &fresh)?;
    write_atomic(&dir.join("dataset.jsonl"), merged.to_jsonl().as_bytes())?;
    rec.dataset_hash = Some(merged.hash());
    rec.dataset_size = Some(merged.len());
    log::info!("iteration {t}: {} triples", merged.len());

    let mut next = policy.clone();
    let outcome = align_policy(&mut next, &merged.triples, &plan.align_config(t))?;
    let ck = next.checkpoint(ModelKind::Ar);
    write_atomic(&dir.join("policy.ckpt"), &ck.to_bytes())?;
    rec.post_hash = Some(ck.hash());

    if let (Some((nar, set)), Some(b)) = (inputs.eval, baseline) {
        let snap = snapshot_eval(inputs.world, nar, set, &next, None, &plan.eval, Some(b))?;
        rec.eval = Some(snap.summary);
    }
    let empty = Vec::new();
    let summary = outcome.summary.as_ref();
    let metrics = IterationMetrics {
        iteration: t,
        method: plan.align.method,
        train: summary.map_or(&empty[..], |s| &s.logs),
        epoch_losses: summary.map_or(&[][..], |s| &s.epoch_losses),
        rm_heldout_accuracy: outcome.reward_model.as_ref().map(|r| r.heldout_accuracy),
        ppo: &outcome.ppo,
        eval: rec.eval.as_ref(),
    };
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    write_atomic(&dir.join("metrics.json"), json.as_bytes())?;
    debug_assert!(next.inference_control == Control::Good || plan.align.method != Method::Coh);
    Ok((merged, next))
}

/// Loads the policy an iteration produced.
pub fn load_iteration_policy(out: &Path, t: usize) -> Result<ArPolicy> {
    ArPolicy::from_checkpoint(&Checkpoint::load(&iteration_dir(out, t).join("policy.ckpt"))?, ModelKind::Ar)
}
