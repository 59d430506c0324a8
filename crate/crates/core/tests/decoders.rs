//! The decoders behind the fuzz targets, driven by the checked-in seed
//! corpora: every seed parses and round-trips, and mutated seeds are
//! rejected with an error rather than a panic.

use std::path::{Path, PathBuf};

use codecalign::align::RewardModel;
use codecalign::ar::ArPolicy;
use codecalign::ckpt::{Checkpoint, ModelKind};
use codecalign::nar::NarModel;
use codecalign::prefs::PreferenceDataset;
use codecalign::World;
use proptest::prelude::*;

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds in {}", dir.display());
    files.into_iter().map(|p| (p.clone(), std::fs::read(&p).unwrap())).collect()
}

fn world(data: &[u8]) {
    if let Ok(w) = World::from_bytes(data) {
        let bytes = w.to_bytes();
        assert_eq!(World::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        let _ = w.transcribe(0, &[0; 4]);
    }
}

fn checkpoint(data: &[u8]) {
    if let Ok(c) = Checkpoint::from_bytes(data) {
        let bytes = c.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        let _ = ArPolicy::from_checkpoint(&c, ModelKind::Ar);
        let _ = NarModel::from_checkpoint(&c);
        let _ = RewardModel::from_checkpoint(&c);
    }
}

fn dataset(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ds) = PreferenceDataset::from_jsonl(text) {
        assert_eq!(PreferenceDataset::from_jsonl(&ds.to_jsonl()).unwrap().hash(), ds.hash());
    }
}

/// Every truncation plus a byte flip at a spread of positions.
fn mutations(seed: &[u8]) -> impl Iterator<Item = Vec<u8>> + '_ {
    let cuts = (0..seed.len()).map(move |n| seed[..n].to_vec());
    let step = (seed.len() / 97).max(1);
    let flips = (0..seed.len()).step_by(step).flat_map(move |i| {
        [0x01u8, 0x80, 0xFF].into_iter().map(move |m| {
            let mut v = seed.to_vec();
            v[i] ^= m;
            v
        })
    });
    cuts.chain(flips)
}

#[test]
fn world_seeds_parse_and_survive_mutation() {
    for (path, seed) in corpus("world_bytes") {
        World::from_bytes(&seed).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        world(&seed);
        mutations(&seed).for_each(|m| world(&m));
        assert!(World::from_bytes(&seed[..seed.len() - 1]).is_err());
    }
}

#[test]
fn checkpoint_seeds_parse_and_survive_mutation() {
    for (path, seed) in corpus("checkpoint_bytes") {
        let c = Checkpoint::from_bytes(&seed).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let loads = [
            ArPolicy::from_checkpoint(&c, ModelKind::Ar).is_ok(),
            NarModel::from_checkpoint(&c).is_ok(),
            RewardModel::from_checkpoint(&c).is_ok(),
        ];
        assert_eq!(loads.iter().filter(|&&ok| ok).count(), 1, "{}: exactly one model kind loads", path.display());
        mutations(&seed).for_each(|m| checkpoint(&m));
    }
}

#[test]
fn dataset_seeds_parse_and_survive_mutation() {
    for (path, seed) in corpus("dataset_jsonl") {
        let text = std::str::from_utf8(&seed).unwrap();
        PreferenceDataset::from_jsonl(text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        mutations(&seed).for_each(|m| dataset(&m));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_splices_never_panic(pos in 0usize..8000, junk in prop::collection::vec(any::<u8>(), 0..64), which in 0usize..3) {
        let target = ["world_bytes", "checkpoint_bytes", "dataset_jsonl"][which];
        for (_, seed) in corpus(target) {
            let at = pos % (seed.len() + 1);
            let mut v = seed[..at].to_vec();
            v.extend_from_slice(&junk);
            v.extend_from_slice(&seed[(at + junk.len()).min(seed.len())..]);
            match which {
                0 => world(&v),
                1 => checkpoint(&v),
                _ => dataset(&v),
            }
        }
    }
}
