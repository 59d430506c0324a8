//! End to end on a micro world: SFT, preference data, every alignment
//! method, and resumable iterations.

use codecalign::align::{continue_sft, dpo_loss, dpo_train, Method};
use codecalign::ar::{ArConfig, ArPolicy, Control};
use codecalign::ckpt::ModelKind;
use codecalign::eval::EvalSet;
use codecalign::nar::NarConfig;
use codecalign::pipeline::{sft_examples, train_nar, train_sft};
use codecalign::prefs::build_pref_dataset;
use codecalign::self_improve::{ledger_path, read_ledger, run_iterations, EvalPlan, IterationInputs, IterationPlan, Status};
use codecalign::train::TrainConfig;
use codecalign::{World, WorldConfig};

fn micro() -> World {
    World::new(WorldConfig {
        v_text: 4,
        l_text: 4,
        k_ar: 8,
        k_nar: 8,
        speakers: 3,
        d_emb: 8,
        palette: 3,
        ..WorldConfig::default()
    })
    .unwrap()
}

fn ar() -> ArConfig {
    ArConfig {
        d_model: 16,
        d_ffn: 32,
        ..ArConfig::default()
    }
}

fn sft(world: &World) -> ArPolicy {
    let train = TrainConfig {
        epochs: 3,
        batch_size: 16,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    train_sft(world, ar(), 120, &train, 1).unwrap().0
}

fn golden_nll(world: &World, p: &ArPolicy) -> f64 {
    let ex = sft_examples(world, 40, 99);
    -ex.iter().map(|e| p.seq_logprob(&e.text, &e.y, Control::None).unwrap()).sum::<f64>() / ex.len() as f64
}

#[test]
fn sft_lowers_held_out_golden_nll() {
    let w = micro();
    let fresh = ArPolicy::new(ar(), codecalign::ar::Vocab::from_world(w.config())).unwrap();
    let trained = sft(&w);
    assert!(golden_nll(&w, &trained) < golden_nll(&w, &fresh) - 1.0);
}

#[test]
fn dpo_moves_the_policy_off_its_reference() {
    let w = micro();
    let p0 = sft(&w);
    let data = build_pref_dataset(&w, &p0, 40, 0, 5, 1.0).unwrap().triples;
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let mut p = p0.clone();
    dpo_train(&mut p, &data, &cfg, 1.0).unwrap();
    assert!(dpo_loss(&p, &p0, &data, 1.0).unwrap() < std::f64::consts::LN_2);

    let mut c = p0.clone();
    let before = golden_nll(&w, &c);
    continue_sft(&mut c, &data, &cfg).unwrap();
    assert!(golden_nll(&w, &c) < before);
}

#[test]
fn iterations_resume_and_refuse_other_plans() {
    let w = micro();
    let p0 = sft(&w);
    let nar_cfg = NarConfig {
        d_model: 16,
        d_ffn: 32,
        prompt_len: 2,
        ..NarConfig::default()
    };
    let nar_train = TrainConfig {
        epochs: 1,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let nar = train_nar(&w, nar_cfg, 30, &nar_train, 4).unwrap().0;
    let set = EvalSet::reserved(&w, 8, 2);
    let mut plan = IterationPlan {
        iterations: 2,
        n: 12,
        eval: EvalPlan {
            runs: 1,
            ..EvalPlan::default()
        },
        ..IterationPlan::default()
    };
    plan.align.train.epochs = 1;
    plan.align.train.batch_size = 8;
    let inputs = IterationInputs {
        world: &w,
        initial: &p0,
        eval: Some((&nar, &set)),
    };
    let dir = tempfile::tempdir().unwrap();
    let recs = run_iterations(&plan, &inputs, dir.path()).unwrap();
    assert_eq!(recs.len(), 2);
    assert!(recs.iter().all(|r| r.status == Status::Ok && r.eval.is_some()));
    assert_eq!(recs[0].dataset_size, Some(12));
    assert_eq!(recs[1].dataset_size, Some(24));
    assert_eq!(recs[1].pre_hash, recs[0].post_hash.clone().unwrap());
    assert_ne!(recs[0].pre_hash, recs[0].post_hash.clone().unwrap());
    assert_eq!(recs[0].pre_hash, p0.checkpoint(ModelKind::Ar).hash());

    let ledger = std::fs::read(ledger_path(dir.path())).unwrap();
    let again = run_iterations(&plan, &inputs, dir.path()).unwrap();
    assert_eq!(again, recs);
    assert_eq!(std::fs::read(ledger_path(dir.path())).unwrap(), ledger);
    assert_eq!(read_ledger(dir.path()).unwrap().len(), 2);

    let mut other = plan.clone();
    other.align.method = Method::Coh;
    assert!(run_iterations(&other, &inputs, dir.path()).is_err());
}
