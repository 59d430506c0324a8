//! Preference datasets of `(x, y_g, y_s)` triples: golden renderings from
//! the world against samples from the current policy.
//!
//! On disk a dataset is JSON lines: one header line with provenance, then
//! one triple per line.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ar::ArPolicy;
use crate::binio::sha256_hex;
use crate::ckpt::ModelKind;
use crate::error::{Error, Result};
use crate::eval::{oracle_judge, Verdict, WinRate};
use crate::nar::{reconstruct, speaker_prompt, NarModel};
use crate::rng::{mix64, tag, Stream};
use crate::world::{Token, World};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceTriple {
    pub iter: usize,
    pub speaker: usize,
    pub seed: u64,
    pub text: Vec<Token>,
    pub y_g: Vec<Token>,
    pub y_s: Vec<Token>,
}

/// Where one iteration's block of triples came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Part {
    pub iteration: usize,
    pub policy_hash: String,
    pub base_seed: u64,
    /// Index of the first item drawn.
    #[serde(default)]
    pub start: usize,
    pub temperature: f64,
    pub requested: usize,
    pub degenerate: usize,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub world_hash: String,
    pub size: usize,
    pub parts: Vec<Part>,
}

const FORMAT: &str = "preference-dataset/1";
const MAX_LINE_TOKENS: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceDataset {
    pub header: Header,
    pub triples: Vec<PreferenceTriple>,
}

impl PreferenceDataset {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Iteration of the newest block.
    pub fn latest_iteration(&self) -> Option<usize> {
        self.header.parts.iter().map(|p| p.iteration).max()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serializes");
        s.push('\n');
        for t in &self.triples {
            s.push_str(&serde_json::to_string(t).expect("triple serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| Error::Format("dataset is empty".into()))?;
        let header: Header = serde_json::from_str(first).map_err(|e| Error::Format(format!("line 1: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Format(format!("unknown dataset format `{}`", header.format)));
        }
        let mut triples = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let t: PreferenceTriple = serde_json::from_str(line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            if t.text.len() > MAX_LINE_TOKENS || t.y_g.len() > MAX_LINE_TOKENS || t.y_s.len() > MAX_LINE_TOKENS {
                return Err(Error::Format(format!("line {}: sequence too long", i + 1)));
            }
            triples.push(t);
        }
        if triples.len() != header.size {
            return Err(Error::Format(format!("header declares {} triples, found {}", header.size, triples.len())));
        }
        let declared: usize = header.parts.iter().map(|p| p.size).sum();
        if declared != header.size {
            return Err(Error::Format(format!("parts declare {declared} triples, header {}", header.size)));
        }
        Ok(PreferenceDataset { header, triples })
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&s)
    }

    /// Checks every triple against the world: golden responses must replay
    /// exactly from `(speaker, seed)`, synthetic ones must be in range.
    pub fn verify_against(&self, world: &World) -> Result<()> {
        if self.header.world_hash != world.hash() {
            return Err(Error::Provenance("dataset was built from a different world".into()));
        }
        let c = world.config();
        for (i, t) in self.triples.iter().enumerate() {
            if t.speaker >= c.speakers {
                return Err(Error::Format(format!("triple {i}: speaker {} out of range", t.speaker)));
            }
            let u = world.sample_utterance(t.speaker, t.seed);
            if u.text != t.text || u.golden.layer1() != t.y_g.as_slice() {
                return Err(Error::Provenance(format!("triple {i} does not replay from its seed")));
            }
            if t.y_s.len() > c.l_ar() || t.y_s.iter().any(|&y| y as usize >= c.k_ar) {
                return Err(Error::Format(format!("triple {i}: synthetic response out of range")));
            }
        }
        Ok(())
    }
}

/// Builds `n` triples with the policy's current samples. Item `i` uses seed
/// `mix64(base_seed, i)` and speaker `i mod S`; synthetic responses are
/// sampled under the policy's inference control token. An empty sample is
/// retried once with a fresh seed; if it is empty again the item is skipped
/// and counted.
pub fn build_pref_dataset(
    world: &World,
    policy: &ArPolicy,
    n: usize,
    iteration: usize,
    base_seed: u64,
    temperature: f64,
) -> Result<PreferenceDataset> {
    build_pref_slice(world, policy, 0..n, iteration, base_seed, temperature)
}

/// [`build_pref_dataset`] over the item indices in `items`, so successive
/// iterations can draw disjoint blocks of one seeded corpus.
pub fn build_pref_slice(
    world: &World,
    policy: &ArPolicy,
    items: std::ops::Range<usize>,
    iteration: usize,
    base_seed: u64,
    temperature: f64,
) -> Result<PreferenceDataset> {
    let n = items.len();
    if n == 0 {
        return Err(Error::Argument("a preference dataset needs at least one item".into()));
    }
    let start = items.start;
    let s = world.config().speakers;
    let drawn: Vec<Option<PreferenceTriple>> = items
        .into_par_iter()
        .map(|i| {
            let seed = mix64(base_seed, i as u64);
            let speaker = i % s;
            let u = world.sample_utterance(speaker, seed);
            let mut y_s = policy.sample(&u.text, policy.inference_control, temperature, mix64(seed, tag::SYNTHETIC))?;
            if y_s.is_empty() {
                y_s = policy.sample(&u.text, policy.inference_control, temperature, mix64(seed, tag::SYNTHETIC_RETRY))?;
            }
            Ok((!y_s.is_empty()).then(|| PreferenceTriple {
                iter: iteration,
                speaker,
                seed,
                y_g: u.golden.layer1().to_vec(),
                text: u.text,
                y_s,
            }))
        })
        .collect::<Result<_>>()?;
    let degenerate = drawn.iter().filter(|t| t.is_none()).count();
    let triples: Vec<PreferenceTriple> = drawn.into_iter().flatten().collect();
    if degenerate > 0 {
        log::warn!("{degenerate} of {n} synthetic samples were empty and skipped");
    }
    Ok(PreferenceDataset {
        header: Header {
            format: FORMAT.into(),
            world_hash: world.hash(),
            size: triples.len(),
            parts: vec![Part {
                iteration,
                policy_hash: policy.checkpoint(ModelKind::Ar).hash(),
                base_seed,
                start,
                temperature,
                requested: n,
                degenerate,
                size: triples.len(),
            }],
        },
        triples,
    })
}

/// Sliding-window merge: the newest block of `previous` followed by `new`.
/// Older blocks are dropped; items are neither altered nor deduplicated.
pub fn merge_iterations(previous: Option<&PreferenceDataset>, new: &PreferenceDataset) -> Result<PreferenceDataset> {
    let Some(prev) = previous else {
        return Ok(new.clone());
    };
    if prev.header.world_hash != new.header.world_hash {
        return Err(Error::Provenance("cannot merge datasets built from different worlds".into()));
    }
    let Some(last) = prev.latest_iteration() else {
        return Ok(new.clone());
    };
    let mut parts: Vec<Part> = prev.header.parts.iter().filter(|p| p.iteration == last).cloned().collect();
    let mut triples: Vec<PreferenceTriple> = prev.triples.iter().filter(|t| t.iter == last).cloned().collect();
    parts.extend(new.header.parts.iter().cloned());
    triples.extend(new.triples.iter().cloned());
    Ok(PreferenceDataset {
        header: Header {
            format: FORMAT.into(),
            world_hash: new.header.world_hash.clone(),
            size: triples.len(),
            parts,
        },
        triples,
    })
}

/// Reconstructs golden and synthetic responses of `m` randomly chosen
/// triples through the NAR model and judges golden against synthetic.
pub fn oracle_verify(world: &World, nar: &NarModel, dataset: &PreferenceDataset, m: usize, seed: u64) -> Result<WinRate> {
    if m > dataset.len() {
        return Err(Error::Argument(format!("cannot judge {m} of {} triples", dataset.len())));
    }
    let idx = Stream::derived(seed, tag::SPLIT).sample_indices(dataset.len(), m);
    let prompt_len = nar.config().prompt_len;
    let verdicts: Vec<Verdict> = idx
        .par_iter()
        .map(|&i| {
            let t = &dataset.triples[i];
            let prompt = speaker_prompt(world, t.speaker, prompt_len, t.seed);
            let g = reconstruct(world, nar, t.speaker, &t.text, &prompt, &t.y_g)?;
            let s = reconstruct(world, nar, t.speaker, &t.text, &prompt, &t.y_s)?;
            Ok(oracle_judge(g, s))
        })
        .collect::<Result<_>>()?;
    Ok(WinRate::from_verdicts(&verdicts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ar::{ArConfig, Vocab};
    use crate::world::WorldConfig;

    fn setup() -> (World, ArPolicy) {
        let w = World::new(WorldConfig {
            l_text: 4,
            ..WorldConfig::default()
        })
        .unwrap();
        let cfg = ArConfig {
            d_model: 16,
            d_ffn: 32,
            n_layers: 1,
            max_context: 24,
            ..ArConfig::default()
        };
        let p = ArPolicy::new(cfg, Vocab::from_world(w.config())).unwrap();
        (w, p)
    }

    #[test]
    fn build_is_deterministic_and_replays() {
        let (w, p) = setup();
        let a = build_pref_dataset(&w, &p, 20, 0, 9, 1.0).unwrap();
        let b = build_pref_dataset(&w, &p, 20, 0, 9, 1.0).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        a.verify_against(&w).unwrap();
        assert_eq!(a.header.size + a.header.parts[0].degenerate, 20);
        let one = build_pref_dataset(&w, &p, 1, 3, 9, 1.0).unwrap();
        assert!(one.len() <= 1 && one.triples.iter().all(|t| t.iter == 3));
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let (w, p) = setup();
        let d = build_pref_dataset(&w, &p, 8, 2, 1, 1.0).unwrap();
        let s = d.to_jsonl();
        let back = PreferenceDataset::from_jsonl(&s).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_jsonl(), s);
        let mut bad = s.clone();
        bad.push_str("{\"iter\":0}\n");
        assert!(PreferenceDataset::from_jsonl(&bad).is_err());
        assert!(PreferenceDataset::from_jsonl("").is_err());
    }

    fn fake(iter: usize, n: usize, world_hash: &str) -> PreferenceDataset {
        let triples: Vec<PreferenceTriple> = (0..n)
            .map(|i| PreferenceTriple {
                iter,
                speaker: 0,
                seed: (iter * 1000 + i) as u64,
                text: vec![1],
                y_g: vec![1, 2],
                y_s: vec![3],
            })
            .collect();
        PreferenceDataset {
            header: Header {
                format: FORMAT.into(),
                world_hash: world_hash.into(),
                size: n,
                parts: vec![Part {
                    iteration: iter,
                    policy_hash: format!("p{iter}"),
                    base_seed: iter as u64,
                    start: 0,
                    temperature: 1.0,
                    requested: n,
                    degenerate: 0,
                    size: n,
                }],
            },
            triples,
        }
    }

    #[test]
    fn sliding_window_merge_sizes() {
        let d0 = fake(0, 50, "w");
        let m0 = merge_iterations(None, &d0).unwrap();
        assert_eq!(m0.len(), 50);
        let m1 = merge_iterations(Some(&m0), &fake(1, 50, "w")).unwrap();
        assert_eq!(m1.len(), 100);
        assert_eq!(m1.triples.iter().filter(|t| t.iter == 0).count(), 50);
        let m2 = merge_iterations(Some(&m1), &fake(2, 50, "w")).unwrap();
        assert_eq!(m2.len(), 100);
        assert!(m2.triples.iter().all(|t| t.iter >= 1));
        assert_eq!(m2.triples[..50], fake(1, 50, "w").triples[..]);
        assert!(matches!(merge_iterations(Some(&m2), &fake(3, 5, "other")), Err(Error::Provenance(_))));
    }
}
