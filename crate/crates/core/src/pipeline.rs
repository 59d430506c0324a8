//! Building blocks of a full experiment: the supervised corpus, the SFT
//! policy, and the NAR model, all derived from a world and seeds.

use crate::ar::{ArConfig, ArPolicy, Control, Vocab};
use crate::error::Result;
use crate::nar::{build_items, NarConfig, NarModel, NarShape};
use crate::rng::mix64;
use crate::train::{sft_train, Example, TrainConfig, TrainSummary};
use crate::world::World;

/// `n` golden `(text, layer-1)` pairs. Item `i` is the utterance of speaker
/// `i mod S` with seed `mix64(seed, i)`, the same indexing preference
/// datasets use, so a preference build with the corpus seed draws golden
/// responses from the supervised training data.
pub fn sft_examples(world: &World, n: usize, seed: u64) -> Vec<Example> {
    let s = world.config().speakers;
    (0..n)
        .map(|i| {
            let u = world.sample_utterance(i % s, mix64(seed, i as u64));
            Example {
                y: u.golden.layer1().to_vec(),
                text: u.text,
                control: Control::None,
            }
        })
        .collect()
}

/// A fresh policy fine-tuned on `n` golden pairs.
pub fn train_sft(world: &World, cfg: ArConfig, n: usize, train: &TrainConfig, seed: u64) -> Result<(ArPolicy, TrainSummary)> {
    let mut policy = ArPolicy::new(cfg, Vocab::from_world(world.config()))?;
    let summary = sft_train(&mut policy, &sft_examples(world, n, seed), train)?;
    Ok((policy, summary))
}

/// A fresh NAR model trained on `n` utterances.
pub fn train_nar(world: &World, cfg: NarConfig, n: usize, train: &TrainConfig, seed: u64) -> Result<(NarModel, TrainSummary)> {
    let items = build_items(world, n, cfg.prompt_len, seed);
    let mut nar = NarModel::new(cfg, NarShape::from_world(world.config()))?;
    let summary = nar.train(&items, train)?;
    Ok((nar, summary))
}
