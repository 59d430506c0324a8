//! Subcommands. Each reads its inputs from declared files in the output
//! directory, writes its outputs there, and leaves a resolved-config
//! snapshot next to them.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use codecalign::align::{align_policy, rm_train, BestOfN, Method, RewardModel};
use codecalign::ar::ArPolicy;
use codecalign::ckpt::{Checkpoint, ModelKind};
use codecalign::eval::{emit_report, reconstruction_experiment, Generator, PolicySampler, Report, ScatterSet, WinRateRow};
use codecalign::nar::NarModel;
use codecalign::pipeline::{train_nar, train_sft};
use codecalign::prefs::{build_pref_slice, oracle_verify, PreferenceDataset};
use codecalign::self_improve::{read_ledger, run_iterations, snapshot_eval, IterationInputs, Snapshot, Status};
use codecalign::train::TrainSummary;
use codecalign::eval::EvalSet;
use codecalign::{Error, World};
use serde_json::json;

use crate::config::{ConfigError, ExperimentConfig};
use crate::lock::DirLock;

#[derive(Debug, Parser)]
#[command(name = "codecalign", version, about = "Codec language model alignment experiments in a synthetic codec world")]
pub struct Cli {
    /// Experiment configuration (TOML). Flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory [default: paths.out from the config, runs/default]
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Master seed [default: seed from the config, 1]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Oracle world generation.
    World {
        #[command(subcommand)]
        action: WorldAction,
    },
    /// Supervised fine-tuning of the AR policy on golden pairs.
    Sft,
    /// NAR model.
    Nar {
        #[command(subcommand)]
        action: NarAction,
    },
    /// Preference datasets.
    Prefs {
        #[command(subcommand)]
        action: PrefsAction,
    },
    /// One preference-aware optimization run on a preference dataset.
    Align(AlignArgs),
    /// Reward model.
    Rm {
        #[command(subcommand)]
        action: RmAction,
    },
    /// Iterative self-improvement starting from the SFT policy.
    Iterate(IterateArgs),
    /// Evaluates a policy checkpoint on the reserved set.
    Eval(EvalArgs),
    /// Collects the iteration results into report tables.
    Report,
}

#[derive(Debug, Subcommand)]
pub enum WorldAction {
    /// Generates the world described by the [world] section.
    Gen,
}

#[derive(Debug, Subcommand)]
pub enum NarAction {
    /// Trains the NAR model on golden utterances.
    Train,
}

#[derive(Debug, Subcommand)]
pub enum PrefsAction {
    /// Builds golden-vs-synthetic triples with a policy.
    Build {
        /// Policy that samples the synthetic responses [default: <out>/sft.ckpt]
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Corpus block to draw the texts from.
        #[arg(long, default_value_t = 0)]
        iteration: usize,
        /// Also judge this many triples with the oracle (needs the NAR model).
        #[arg(long, value_name = "M")]
        verify: Option<usize>,
    },
}

#[derive(Debug, Subcommand)]
pub enum RmAction {
    /// Fits a reward model on a preference dataset.
    Train {
        /// Initialization [default: <out>/sft.ckpt]
        #[arg(long)]
        policy: Option<PathBuf>,
        /// [default: <out>/prefs.jsonl]
        #[arg(long)]
        prefs: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Alignment method [default: align.method from the config, dpo]
    #[arg(long, value_parser = ["coh", "dpo", "ppo", "bon", "continue-sft"])]
    pub method: Option<String>,
    /// Starting policy [default: <out>/sft.ckpt]
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// [default: <out>/prefs.jsonl]
    #[arg(long)]
    pub prefs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IterateArgs {
    /// [default: align.method from the config, dpo]
    #[arg(long, value_parser = ["coh", "dpo", "ppo", "continue-sft"])]
    pub method: Option<String>,
    /// Number of iterations [default: iterate.iterations from the config, 3]
    #[arg(short = 'T', long = "iterations")]
    pub iterations: Option<usize>,
    /// Initial policy [default: <out>/sft.ckpt]
    #[arg(long)]
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// [default: <out>/sft.ckpt]
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Report name, used as the model label and as <out>/eval/<NAME>
    /// [default: the checkpoint's file stem]
    #[arg(long)]
    pub name: Option<String>,
    /// Policy to compute win rates against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Reward model for best-of-N decoding.
    #[arg(long, requires = "bon")]
    pub rm: Option<PathBuf>,
    /// Best-of-N candidates per item (needs --rm).
    #[arg(long, requires = "rm")]
    pub bon: Option<usize>,
}

/// Failure classes, mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Config(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Config(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// File names inside the output directory.
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn world(&self) -> PathBuf {
        self.out.join("world.salw")
    }
    pub fn sft(&self) -> PathBuf {
        self.out.join("sft.ckpt")
    }
    pub fn nar(&self) -> PathBuf {
        self.out.join("nar.ckpt")
    }
    pub fn prefs(&self) -> PathBuf {
        self.out.join("prefs.jsonl")
    }
    pub fn rm(&self) -> PathBuf {
        self.out.join("rm.ckpt")
    }
    pub fn align_dir(&self, m: Method) -> PathBuf {
        self.out.join(format!("align-{m}"))
    }
    pub fn iterate_dir(&self) -> PathBuf {
        self.out.join("iterate")
    }
    pub fn eval_dir(&self, name: &str) -> PathBuf {
        self.out.join("eval").join(name)
    }
    pub fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }
}

/// Resolves the configuration: defaults, then the file, then flags.
pub fn resolve(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.paths.out = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Align(a) => {
            if let Some(m) = &a.method {
                cfg.align.method = m.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            }
        }
        Command::Iterate(a) => {
            if let Some(m) = &a.method {
                cfg.align.method = m.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            }
            if let Some(t) = a.iterations {
                cfg.iterate.iterations = t;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    if let Command::Iterate(_) = cli.command {
        cfg.iteration_plan().validate()?;
    }
    Ok(cfg)
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<(), Failure> {
    let cfg = resolve(cli)?;
    let layout = Layout { out: cfg.paths.out.clone() };
    let _lock = DirLock::acquire(&layout.out).map_err(|e| Failure::Runtime(format!("{}: {e}", layout.out.display())))?;
    let snapshot_name = match &cli.command {
        Command::World { .. } => "world-gen".to_string(),
        Command::Sft => "sft".to_string(),
        Command::Nar { .. } => "nar-train".to_string(),
        Command::Prefs { .. } => "prefs-build".to_string(),
        Command::Align(_) => format!("align-{}", cfg.align.method),
        Command::Rm { .. } => "rm-train".to_string(),
        Command::Iterate(_) => "iterate".to_string(),
        Command::Eval(a) => format!("eval-{}", eval_name(a)?),
        Command::Report => "report".to_string(),
    };
    write(&layout.out.join(format!("{snapshot_name}.config.toml")), cfg.to_toml()?.as_bytes())?;

    match &cli.command {
        Command::World { action: WorldAction::Gen } => world_gen(&cfg, &layout),
        Command::Sft => sft(&cfg, &layout),
        Command::Nar { action: NarAction::Train } => nar_train(&cfg, &layout),
        Command::Prefs {
            action: PrefsAction::Build { policy, iteration, verify },
        } => prefs_build(&cfg, &layout, policy.as_deref(), *iteration, *verify),
        Command::Align(a) => align(&cfg, &layout, a),
        Command::Rm {
            action: RmAction::Train { policy, prefs },
        } => rm(&cfg, &layout, policy.as_deref(), prefs.as_deref()),
        Command::Iterate(a) => iterate(&cfg, &layout, a),
        Command::Eval(a) => eval(&cfg, &layout, a),
        Command::Report => report(&cfg, &layout),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<(), Failure> {
    let mut s = serde_json::to_string_pretty(v).map_err(runtime)?;
    s.push('\n');
    write(path, s.as_bytes())
}

/// The deterministic part of a training run. Per-step logs, which carry
/// wall-clock times, go to a separate JSONL file.
fn summary_json(s: &TrainSummary) -> serde_json::Value {
    json!({ "steps": s.steps(), "epoch_losses": s.epoch_losses })
}

fn write_step_log(path: &Path, s: &TrainSummary) -> Result<(), Failure> {
    let mut text = String::new();
    for l in &s.logs {
        text.push_str(&serde_json::to_string(l).map_err(runtime)?);
        text.push('\n');
    }
    write(path, text.as_bytes())
}

fn need(path: &Path, hint: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} not found; run `{hint}` first", path.display())))
    }
}

fn load_world(cfg: &ExperimentConfig, layout: &Layout) -> Result<World, Failure> {
    let p = layout.world();
    need(&p, "world gen")?;
    let w = World::load(&p)?;
    if w.config() != &cfg.world {
        return Err(Failure::Runtime(format!("{} was generated from a different [world] section", p.display())));
    }
    Ok(w)
}

fn load_policy(path: &Path, hint: &str) -> Result<ArPolicy, Failure> {
    need(path, hint)?;
    Ok(ArPolicy::from_checkpoint(&Checkpoint::load(path)?, ModelKind::Ar)?)
}

fn load_nar(layout: &Layout) -> Result<NarModel, Failure> {
    let p = layout.nar();
    need(&p, "nar train")?;
    Ok(NarModel::from_checkpoint(&Checkpoint::load(&p)?)?)
}

fn load_prefs(path: &Path, world: &World) -> Result<PreferenceDataset, Failure> {
    need(path, "prefs build")?;
    let ds = PreferenceDataset::load(path)?;
    ds.verify_against(world)?;
    Ok(ds)
}

fn world_gen(cfg: &ExperimentConfig, layout: &Layout) -> Result<(), Failure> {
    let w = World::new(cfg.world.clone())?;
    w.save(&layout.world())?;
    log::info!("world {} written to {}", w.hash(), layout.world().display());
    Ok(())
}

fn sft(cfg: &ExperimentConfig, layout: &Layout) -> Result<(), Failure> {
    let world = load_world(cfg, layout)?;
    let (policy, summary) = train_sft(&world, cfg.ar_model(), cfg.data.sft_n, &cfg.sft_train(), cfg.corpus_seed())?;
    let ck = policy.checkpoint(ModelKind::Ar);
    ck.save(&layout.sft())?;
    write_json(&layout.out.join("sft.json"), &json!({ "checkpoint": ck.hash(), "train": summary_json(&summary) }))?;
    write_step_log(&layout.out.join("sft.train.jsonl"), &summary)?;
    log::info!("SFT final epoch loss {:?}", summary.epoch_losses.last());
    Ok(())
}

fn nar_train(cfg: &ExperimentConfig, layout: &Layout) -> Result<(), Failure> {
    let world = load_world(cfg, layout)?;
    let (nar, summary) = train_nar(&world, cfg.nar_model(), cfg.data.nar_n, &cfg.nar_training(), cfg.nar_corpus_seed())?;
    let ck = nar.checkpoint();
    ck.save(&layout.nar())?;
    write_json(&layout.out.join("nar.json"), &json!({ "checkpoint": ck.hash(), "train": summary_json(&summary) }))?;
    write_step_log(&layout.out.join("nar.train.jsonl"), &summary)?;
    Ok(())
}

fn prefs_build(cfg: &ExperimentConfig, layout: &Layout, policy: Option<&Path>, iteration: usize, verify: Option<usize>) -> Result<(), Failure> {
    let world = load_world(cfg, layout)?;
    let policy = load_policy(policy.unwrap_or(&layout.sft()), "sft")?;
    let n = cfg.data.pref_n;
    let items = iteration * n..(iteration + 1) * n;
    let ds = build_pref_slice(&world, &policy, items, iteration, cfg.corpus_seed(), cfg.data.temperature)?;
    ds.save(&layout.prefs())?;
    log::info!("{} triples written to {}", ds.len(), layout.prefs().display());
    if let Some(m) = verify {
        let nar = load_nar(layout)?;
        let rate = oracle_verify(&world, &nar, &ds, m, cfg.eval_plan().seed)?;
        write_json(&layout.out.join("prefs.verify.json"), &json!({ "judged": m, "golden_vs_synthetic": rate }))?;
        log::info!("golden win {:.1}% / tie {:.1}% / lose {:.1}%", rate.win, rate.tie, rate.lose);
    }
    Ok(())
}

fn align(cfg: &ExperimentConfig, layout: &Layout, a: &AlignArgs) -> Result<(), Failure> {
    let world = load_world(cfg, layout)?;
    let mut policy = load_policy(a.policy.as_deref().unwrap_or(&layout.sft()), "sft")?;
    let ds = load_prefs(a.prefs.as_deref().unwrap_or(&layout.prefs()), &world)?;
    let settings = cfg.align_settings();
    let outcome = align_policy(&mut policy, &ds.triples, &settings)?;
    let dir = layout.align_dir(settings.method);
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    let mut metrics = json!({ "method": settings.method, "dataset": ds.hash() });
    if settings.method != Method::Bon {
        let ck = policy.checkpoint(ModelKind::Ar);
        ck.save(&dir.join("policy.ckpt"))?;
        metrics["checkpoint"] = json!(ck.hash());
    }
    if let Some(s) = &outcome.summary {
        metrics["train"] = summary_json(s);
        write_step_log(&dir.join("train.jsonl"), s)?;
    }
    if let Some(rm) = &outcome.reward_model {
        rm.model.checkpoint().save(&dir.join("rm.ckpt"))?;
        metrics["rm_heldout_accuracy"] = json!(rm.heldout_accuracy);
        metrics["rm_heldout_size"] = json!(rm.heldout_size);
    }
    if !outcome.ppo.is_empty() {
        metrics["ppo"] = json!(outcome.ppo);
    }
    write_json(&dir.join("metrics.json"), &metrics)
}

fn rm(cfg: &ExperimentConfig, layout: &Layout, policy: Option<&Path>, prefs: Option<&Path>) -> Result<(), Failure> {
    let world = load_world(cfg, layout)?;
    let policy = load_policy(policy.unwrap_or(&layout.sft()), "sft")?;
    let ds = load_prefs(prefs.unwrap_or(&layout.prefs()), &world)?;
    let settings = cfg.align_settings();
    let out = rm_train(&policy, &ds.triples, &settings.rm, settings.rm_holdout)?;
    let ck = out.model.checkpoint();
    ck.save(&layout.rm())?;
    write_json(
        &layout.out.join("rm.json"),
        &json!({
            "checkpoint": ck.hash(),
            "heldout_accuracy": out.heldout_accuracy,
            "heldout_size": out.heldout_size,
            "train": summary_json(&out.summary),
        }),
    )?;
    write_step_log(&layout.out.join("rm.train.jsonl"), &out.summary)?;
    log::info!("reward model held-out accuracy {:.3} on {} pairs", out.heldout_accuracy, out.heldout_size);
    Ok(())
}

fn iterate(cfg: &ExperimentConfig, layout: &Layout, a: &IterateArgs) -> Result<(), Failure> {
    let world = load_world(cfg, layout)?;
    let initial = load_policy(a.policy.as_deref().unwrap_or(&layout.sft()), "sft")?;
    let nar = load_nar(layout)?;
    let set = EvalSet::reserved(&world, cfg.data.eval_n, cfg.nar.prompt_len);
    let inputs = IterationInputs {
        world: &world,
        initial: &initial,
        eval: Some((&nar, &set)),
    };
    let records = run_iterations(&cfg.iteration_plan(), &inputs, &layout.iterate_dir())?;
    for r in &records {
        if let Some(e) = &r.eval {
            log::info!("Iter{}: TER {:.4} SIM {:.4}", r.iteration + 1, e.ter_mean, e.sim_mean);
        }
    }
    Ok(())
}

fn eval_name(a: &EvalArgs) -> Result<String, Failure> {
    let name = match (&a.name, &a.policy) {
        (Some(n), _) => n.clone(),
        (None, Some(p)) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        (None, None) => "sft".to_string(),
    };
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(Failure::Usage(format!("invalid report name {name:?}")));
    }
    Ok(name)
}

fn eval(cfg: &ExperimentConfig, layout: &Layout, a: &EvalArgs) -> Result<(), Failure> {
    let name = eval_name(a)?;
    let world = load_world(cfg, layout)?;
    let policy = load_policy(a.policy.as_deref().unwrap_or(&layout.sft()), "sft")?;
    let nar = load_nar(layout)?;
    let set = EvalSet::reserved(&world, cfg.data.eval_n, cfg.nar.prompt_len);
    let plan = cfg.eval_plan();
    let rm = match &a.rm {
        Some(p) => Some(RewardModel::from_checkpoint(&Checkpoint::load(p)?)?),
        None => None,
    };
    let sampler = PolicySampler {
        policy: &policy,
        temperature: plan.temperature,
    };
    let bon = match (&rm, a.bon) {
        (Some(rm), Some(n)) => Some(BestOfN {
            policy: &policy,
            rm,
            n,
            temperature: plan.temperature,
        }),
        _ => None,
    };
    let generator: &dyn Generator = match &bon {
        Some(b) => b,
        None => &sampler,
    };

    let mut report = Report::default();
    let baseline = match &a.baseline {
        Some(p) => {
            let b = load_policy(p, "sft")?;
            let snap = snapshot_eval(&world, &nar, &set, &b, None, &plan, None)?;
            report.models.push(snap.summary.row("baseline"));
            Some(snap)
        }
        None => None,
    };
    let snap = snapshot_eval(&world, &nar, &set, &policy, bon.as_ref().map(|b| b as &dyn Generator), &plan, baseline.as_ref())?;
    report.models.push(snap.summary.row(&name));
    if let Some(rate) = snap.summary.win_rate {
        report.winrates.push(WinRateRow {
            model: name.clone(),
            baseline: "baseline".into(),
            rate,
        });
    }
    report.reconstruction = Some(reconstruction_experiment(&world, &nar, &set, generator, plan.run_seed(0))?);
    report.scatter.push(ScatterSet { model: name.clone(), gap: snap.gap });
    emit_report(&report, &layout.eval_dir(&name))?;
    log::info!("{name}: TER {:.4} SIM {:.4}", snap.summary.ter_mean, snap.summary.sim_mean);
    Ok(())
}

fn report(_cfg: &ExperimentConfig, layout: &Layout) -> Result<(), Failure> {
    let dir = layout.iterate_dir();
    let base_path = dir.join("baseline.json");
    need(&base_path, "iterate")?;
    let text = std::fs::read_to_string(&base_path).map_err(|e| Failure::Runtime(format!("{}: {e}", base_path.display())))?;
    let baseline = Snapshot::from_json(&text)?;
    let mut report = Report::default();
    report.models.push(baseline.summary.row("SFT"));
    report.scatter.push(ScatterSet {
        model: "SFT".into(),
        gap: baseline.gap,
    });
    let mut records = read_ledger(&dir)?;
    records.retain(|r| r.status == Status::Ok);
    records.sort_by_key(|r| r.iteration);
    for r in records {
        let Some(e) = r.eval else { continue };
        let name = format!("Iter{}", r.iteration + 1);
        report.models.push(e.row(&name));
        if let Some(rate) = e.win_rate {
            report.winrates.push(WinRateRow {
                model: name,
                baseline: "SFT".into(),
                rate,
            });
        }
    }
    emit_report(&report, &layout.report_dir())?;
    Ok(())
}
