//! Metrics: token error rate, speaker similarity, the teacher-forced KL gap
//! to the oracle, the pooled-representation gap, the oracle judge, the
//! golden-vs-synthetic reconstruction table, and report files.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ar::{ArPolicy, Control};
use crate::error::{Error, Result};
use crate::nar::{reconstruct, score_stack, speaker_prompt, NarModel, Recon};
use crate::rng::{mix64, tag, Stream};
use crate::world::{cosine, LayeredTokens, Token, World};

/// Bootstrap resamples used for standard errors.
pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// Levenshtein distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance normalized by the reference length.
pub fn ter<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Argument("token error rate needs a non-empty reference".into()));
    }
    Ok(edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

/// Cosine between the stack's speaker embedding and the speaker reference.
pub fn sim(world: &World, generated: &LayeredTokens, speaker: usize) -> Result<f64> {
    Ok(cosine(&world.speaker_embed(generated)?, world.speaker_ref(speaker)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Win,
    Tie,
    Lose,
}

/// SIM differences at or below this margin count as equal.
pub const SIM_MARGIN: f64 = 0.01;
const TER_MARGIN: f64 = 1e-9;

/// Judges `a` against `b`: lower TER wins; on equal TER, higher SIM wins
/// by more than [`SIM_MARGIN`]; otherwise a tie.
pub fn oracle_judge(a: Recon, b: Recon) -> Verdict {
    if a.ter < b.ter - TER_MARGIN {
        Verdict::Win
    } else if b.ter < a.ter - TER_MARGIN {
        Verdict::Lose
    } else if a.sim > b.sim + SIM_MARGIN {
        Verdict::Win
    } else if b.sim > a.sim + SIM_MARGIN {
        Verdict::Lose
    } else {
        Verdict::Tie
    }
}

/// Percentages of win / tie / lose for the first side.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub win: f64,
    pub tie: f64,
    pub lose: f64,
}

impl WinRate {
    pub fn from_verdicts(v: &[Verdict]) -> Self {
        if v.is_empty() {
            return WinRate::default();
        }
        let pct = |x: Verdict| 100.0 * v.iter().filter(|&&y| y == x).count() as f64 / v.len() as f64;
        WinRate {
            win: pct(Verdict::Win),
            tie: pct(Verdict::Tie),
            lose: pct(Verdict::Lose),
        }
    }

    /// Item-wise judgement of `a` against `b`.
    pub fn compare(a: &[Recon], b: &[Recon]) -> Self {
        let v: Vec<Verdict> = a.iter().zip(b).map(|(x, y)| oracle_judge(*x, *y)).collect();
        Self::from_verdicts(&v)
    }
}

// ---------------------------------------------------------------------------
// Evaluation set.

/// A held-out item: text, its golden rendering, and a prompt taken from a
/// different utterance of the same speaker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalItem {
    pub speaker: usize,
    pub text: Vec<Token>,
    pub golden: LayeredTokens,
    pub prompt: LayeredTokens,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSet {
    pub items: Vec<EvalItem>,
}

impl EvalSet {
    /// The world's reserved evaluation items. Seeds come from a domain no
    /// dataset builder draws from, so the set never overlaps training data.
    pub fn reserved(world: &World, n: usize, prompt_len: usize) -> Self {
        let base = mix64(world.config().world_seed, tag::EVAL_SET);
        let s = world.config().speakers;
        let items = (0..n)
            .into_par_iter()
            .map(|i| {
                let seed = mix64(base, i as u64);
                let speaker = i % s;
                let u = world.sample_utterance(speaker, seed);
                EvalItem {
                    speaker,
                    text: u.text,
                    golden: u.golden,
                    prompt: speaker_prompt(world, speaker, prompt_len, seed),
                    seed,
                }
            })
            .collect();
        EvalSet { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Anything that turns a text into a layer-1 response.
pub trait Generator: Sync {
    fn generate(&self, text: &[Token], seed: u64) -> Result<Vec<Token>>;
}

/// Plain ancestral sampling from a policy under its inference control.
pub struct PolicySampler<'a> {
    pub policy: &'a ArPolicy,
    pub temperature: f64,
}

impl Generator for PolicySampler<'_> {
    fn generate(&self, text: &[Token], seed: u64) -> Result<Vec<Token>> {
        self.policy.sample(text, self.policy.inference_control, self.temperature, seed)
    }
}

/// Per-item result of one generation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemResult {
    pub y: Vec<Token>,
    pub recon: Recon,
}

/// Generates a response for every item, decodes the upper layers with the
/// NAR model, and scores the reconstruction.
pub fn generate_and_score(world: &World, nar: &NarModel, set: &EvalSet, gen: &dyn Generator, seed: u64) -> Result<Vec<ItemResult>> {
    set.items
        .par_iter()
        .enumerate()
        .map(|(i, it)| {
            let y = gen.generate(&it.text, mix64(seed, i as u64))?;
            let recon = reconstruct(world, nar, it.speaker, &it.text, &it.prompt, &y)?;
            Ok(ItemResult { y, recon })
        })
        .collect()
}

/// Mean TER and SIM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub ter: f64,
    pub sim: f64,
}

impl RunMetrics {
    pub fn of(results: &[Recon]) -> Self {
        let n = results.len().max(1) as f64;
        RunMetrics {
            ter: results.iter().map(|r| r.ter).sum::<f64>() / n,
            sim: results.iter().map(|r| r.sim).sum::<f64>() / n,
        }
    }
}

// ---------------------------------------------------------------------------
// Distribution gap.

/// Next-token distributions of a model along a given response.
pub trait ConditionalModel: Sync {
    /// Log-probability rows over the `K_ar` layer-1 tokens, one per
    /// position of `y`, each conditioned on `x`, the speaker (if the model
    /// uses it) and `y[..i]`. Rows need not be normalized over `K_ar`.
    fn teacher_forced(&self, speaker: usize, text: &[Token], y: &[Token]) -> Result<Vec<Vec<f64>>>;
}

/// An AR policy scored under a fixed control token.
pub struct PolicyConditionals<'a> {
    pub policy: &'a ArPolicy,
    pub control: Control,
}

impl ConditionalModel for PolicyConditionals<'_> {
    fn teacher_forced(&self, _speaker: usize, text: &[Token], y: &[Token]) -> Result<Vec<Vec<f64>>> {
        let f = self.policy.frame(text, y, self.control)?;
        let mut rows = self.policy.response_dists(&f)?;
        rows.truncate(y.len());
        for r in rows.iter_mut() {
            r.truncate(self.policy.vocab().k_ar);
        }
        Ok(rows)
    }
}

/// A statistic with its bootstrap standard error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

/// Mean of per-item values with a bootstrap standard error over items.
fn mean_with_bootstrap(values: &[f64], seed: u64) -> Estimate {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = Stream::derived(seed, tag::BOOTSTRAP);
    let stats: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| (0..n).map(|_| values[rng.below(n)]).sum::<f64>() / n as f64)
        .collect();
    Estimate {
        value: mean,
        se: std_dev(&stats),
    }
}

pub(crate) fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Mean per-position `KL(p* ‖ p_model)` along golden sequences, the model
/// renormalized over the layer-1 vocabulary.
pub fn kl_gap(world: &World, model: &dyn ConditionalModel, set: &EvalSet) -> Result<Estimate> {
    if set.is_empty() {
        return Err(Error::Statistics("KL gap over an empty set".into()));
    }
    let r = world.config().r;
    let per_item: Vec<f64> = set
        .items
        .par_iter()
        .map(|it| {
            let y = it.golden.layer1();
            let rows = model.teacher_forced(it.speaker, &it.text, y)?;
            if rows.len() != y.len() {
                return Err(Error::Shape("model returned the wrong number of rows".into()));
            }
            let mut total = 0.0;
            let mut prev = None;
            for (i, row) in rows.iter().enumerate() {
                let golden = world.golden_row(it.speaker, it.text[i / r], prev);
                let lse = crate::nn::log_sum_exp(row);
                let mut kl = 0.0;
                for (lp, lq) in golden.iter().zip(row) {
                    if *lp > f64::NEG_INFINITY {
                        kl += lp.exp() * (lp - (lq - lse));
                    }
                }
                total += kl.max(0.0);
                prev = Some(y[i]);
            }
            Ok(total / y.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(mean_with_bootstrap(&per_item, world.config().world_seed))
}

/// Centroid gap between golden and synthetic pooled representations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub centroid_distance: Estimate,
    /// 2-D projections: every golden point, then every synthetic point.
    pub pca: Vec<[f64; 2]>,
    pub n_items: usize,
}

/// Gap between two paired sets of representations.
pub fn rep_gap_from_reps(rep_g: &[Vec<f64>], rep_s: &[Vec<f64>], seed: u64) -> Result<GapReport> {
    let n = rep_g.len();
    if n < 3 || rep_s.len() != n {
        return Err(Error::Statistics(format!("need at least 3 paired items, got {} and {}", n, rep_s.len())));
    }
    let dist = |idx: &mut dyn Iterator<Item = usize>| {
        let d = rep_g[0].len();
        let mut cg = vec![0.0; d];
        let mut cs = vec![0.0; d];
        let mut m = 0;
        for i in idx {
            for k in 0..d {
                cg[k] += rep_g[i][k];
                cs[k] += rep_s[i][k];
            }
            m += 1;
        }
        cg.iter().zip(&cs).map(|(a, b)| ((a - b) / m as f64).powi(2)).sum::<f64>().sqrt()
    };
    let value = dist(&mut (0..n));
    let mut rng = Stream::derived(seed, tag::BOOTSTRAP);
    let stats: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let idx: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
            dist(&mut idx.into_iter())
        })
        .collect();
    let mut all = rep_g.to_vec();
    all.extend_from_slice(rep_s);
    Ok(GapReport {
        centroid_distance: Estimate { value, se: std_dev(&stats) },
        pca: pca_2d(&all)?,
        n_items: n,
    })
}

/// Pooled representations of golden and synthetic responses under one
/// scoring policy. Items whose synthetic response is empty are dropped.
pub fn rep_gap(scorer: &ArPolicy, set: &EvalSet, synthetic: &[Vec<Token>], seed: u64) -> Result<GapReport> {
    if synthetic.len() != set.len() {
        return Err(Error::Shape("one synthetic response per item is required".into()));
    }
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = set
        .items
        .par_iter()
        .zip(synthetic.par_iter())
        .filter(|(_, y)| !y.is_empty())
        .map(|(it, y)| Ok((scorer.pooled_rep(&it.text, it.golden.layer1())?, scorer.pooled_rep(&it.text, y)?)))
        .collect::<Result<_>>()?;
    let (g, s): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    rep_gap_from_reps(&g, &s, seed)
}

/// Projects points onto the top two principal directions of their
/// centered matrix. Each direction's sign makes its largest-magnitude
/// component positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("points have different dimensions".into()));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = x.transpose() * &x;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let dirs: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&c| {
            let v: Vec<f64> = eig.eigenvectors.column(c).iter().cloned().collect();
            let lead = v.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            if lead < 0.0 {
                v.iter().map(|x| -x).collect()
            } else {
                v
            }
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let mut out = [0.0; 2];
            for (k, dir) in dirs.iter().enumerate() {
                out[k] = (0..d).map(|j| x[(i, j)] * dir[j]).sum();
            }
            out
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Reconstruction table.

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionTable {
    pub groundtruth: RunMetrics,
    pub golden_input: RunMetrics,
    pub synthetic_input: RunMetrics,
}

/// Scores the golden stack itself, the NAR reconstruction from golden
/// layer 1, and the NAR reconstruction from generated layer 1.
pub fn reconstruction_experiment(
    world: &World,
    nar: &NarModel,
    set: &EvalSet,
    gen: &dyn Generator,
    seed: u64,
) -> Result<ReconstructionTable> {
    let rows: Vec<(Recon, Recon)> = set
        .items
        .par_iter()
        .map(|it| {
            let truth = score_stack(world, it.speaker, &it.text, &it.golden)?;
            let golden = reconstruct(world, nar, it.speaker, &it.text, &it.prompt, it.golden.layer1())?;
            Ok((truth, golden))
        })
        .collect::<Result<_>>()?;
    let synthetic = generate_and_score(world, nar, set, gen, seed)?;
    let (truth, golden): (Vec<Recon>, Vec<Recon>) = rows.into_iter().unzip();
    let synth: Vec<Recon> = synthetic.iter().map(|r| r.recon).collect();
    Ok(ReconstructionTable {
        groundtruth: RunMetrics::of(&truth),
        golden_input: RunMetrics::of(&golden),
        synthetic_input: RunMetrics::of(&synth),
    })
}

// ---------------------------------------------------------------------------
// Reports.

/// One evaluated model (or condition).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub name: String,
    pub ter_mean: f64,
    pub ter_sd: f64,
    pub sim_mean: f64,
    pub sim_sd: f64,
    pub kl_gap: Option<Estimate>,
    pub rep_gap: Option<Estimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WinRateRow {
    pub model: String,
    pub baseline: String,
    #[serde(flatten)]
    pub rate: WinRate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterSet {
    pub model: String,
    pub gap: GapReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub models: Vec<ModelRow>,
    pub reconstruction: Option<ReconstructionTable>,
    pub scatter: Vec<ScatterSet>,
    pub winrates: Vec<WinRateRow>,
}

fn opt(e: &Option<Estimate>, f: impl Fn(&Estimate) -> f64) -> String {
    e.as_ref().map(|e| f(e).to_string()).unwrap_or_default()
}

impl Report {
    pub fn tables_csv(&self) -> String {
        let mut s = String::from("model,ter_mean,ter_sd,sim_mean,sim_sd,kl_gap,kl_gap_se,rep_gap,rep_gap_se\n");
        for m in &self.models {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                m.name,
                m.ter_mean,
                m.ter_sd,
                m.sim_mean,
                m.sim_sd,
                opt(&m.kl_gap, |e| e.value),
                opt(&m.kl_gap, |e| e.se),
                opt(&m.rep_gap, |e| e.value),
                opt(&m.rep_gap, |e| e.se),
            );
        }
        if let Some(t) = &self.reconstruction {
            for (name, r) in [
                ("reconstruction:groundtruth", t.groundtruth),
                ("reconstruction:golden", t.golden_input),
                ("reconstruction:synthetic", t.synthetic_input),
            ] {
                let _ = writeln!(s, "{name},{},,{},,,,,", r.ter, r.sim);
            }
        }
        s
    }

    pub fn scatter_csv(&self) -> String {
        let mut s = String::from("model,cluster,x,y\n");
        for set in &self.scatter {
            let n = set.gap.pca.len() / 2;
            for (i, p) in set.gap.pca.iter().enumerate() {
                let cluster = if i < n { "golden" } else { "synthetic" };
                let _ = writeln!(s, "{},{cluster},{},{}", set.model, p[0], p[1]);
            }
        }
        s
    }

    pub fn winrate_csv(&self) -> String {
        let mut s = String::from("model,baseline,win,tie,lose\n");
        for w in &self.winrates {
            let _ = writeln!(s, "{},{},{},{},{}", w.model, w.baseline, w.rate.win, w.rate.tie, w.rate.lose);
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("report: {e}")))
    }
}

/// Writes `metrics.json`, `tables.csv`, `scatter.csv` and `winrate.csv`.
pub fn emit_report(report: &Report, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (name, body) in [
        ("metrics.json", report.to_json()),
        ("tables.csv", report.tables_csv()),
        ("scatter.csv", report.scatter_csv()),
        ("winrate.csv", report.winrate_csv()),
    ] {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ter_examples() {
        assert_eq!(ter(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert!((ter(&["a", "b", "d"], &["a", "b", "c"]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ter(&[1, 2, 3, 7, 8, 9], &[1, 2, 3]).unwrap(), 1.0);
        assert!(matches!(ter::<u32>(&[1], &[]), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(
            a in prop::collection::vec(0u8..4, 0..12),
            b in prop::collection::vec(0u8..4, 0..12),
            c in prop::collection::vec(0u8..4, 0..12),
        ) {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            prop_assert_eq!(edit_distance(&a, &a), 0);
        }

        #[test]
        fn judge_is_antisymmetric(t1 in 0.0f64..1.0, s1 in -1.0f64..1.0, t2 in 0.0f64..1.0, s2 in -1.0f64..1.0, same_ter in any::<bool>()) {
            let a = Recon { ter: t1, sim: s1 };
            let b = Recon { ter: if same_ter { t1 } else { t2 }, sim: s2 };
            let ab = oracle_judge(a, b);
            let ba = oracle_judge(b, a);
            prop_assert_eq!(ab == Verdict::Win, ba == Verdict::Lose);
            prop_assert_eq!(ab == Verdict::Tie, ba == Verdict::Tie);
            prop_assert_eq!(oracle_judge(a, a), Verdict::Tie);
        }
    }

    #[test]
    fn judge_rule() {
        let a = Recon { ter: 0.1, sim: 0.9 };
        let b = Recon { ter: 0.2, sim: 0.95 };
        assert_eq!(oracle_judge(a, b), Verdict::Win);
        assert_eq!(oracle_judge(Recon { ter: 0.1, sim: 0.905 }, a), Verdict::Tie);
        assert_eq!(oracle_judge(Recon { ter: 0.1, sim: 0.92 }, a), Verdict::Win);
    }

    #[test]
    fn win_rates_sum_to_hundred() {
        let v = [Verdict::Win, Verdict::Tie, Verdict::Lose, Verdict::Win, Verdict::Win, Verdict::Tie, Verdict::Lose];
        let w = WinRate::from_verdicts(&v);
        assert!((w.win + w.tie + w.lose - 100.0).abs() < 1e-9);
    }

    #[test]
    fn pca_of_planar_points_preserves_distances() {
        let mut rng = Stream::new(3);
        let u: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let (a, b) = (rng.normal(), rng.normal());
                (0..6).map(|k| 1.5 + a * u[k] + b * v[k]).collect()
            })
            .collect();
        let proj = pca_2d(&pts).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d: f64 = pts[i].iter().zip(&pts[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let e = ((proj[i][0] - proj[j][0]).powi(2) + (proj[i][1] - proj[j][1]).powi(2)).sqrt();
                assert!((d - e).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_sets_have_zero_gap_and_order_invariance() {
        let mut rng = Stream::new(5);
        let g: Vec<Vec<f64>> = (0..10).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let r = rep_gap_from_reps(&g, &g, 1).unwrap();
        assert!(r.centroid_distance.value.abs() < 1e-12);
        let s: Vec<Vec<f64>> = g.iter().map(|p| p.iter().map(|x| x + 0.3).collect()).collect();
        let a = rep_gap_from_reps(&g, &s, 1).unwrap().centroid_distance.value;
        let (mut g2, mut s2) = (g.clone(), s.clone());
        g2.reverse();
        s2.reverse();
        let b = rep_gap_from_reps(&g2, &s2, 1).unwrap().centroid_distance.value;
        assert!((a - b).abs() < 1e-12 && (a - 0.6).abs() < 1e-12);
        assert!(matches!(rep_gap_from_reps(&g[..2], &g[..2], 1), Err(Error::Statistics(_))));
    }

    fn sample_report() -> Report {
        Report {
            models: vec![ModelRow {
                name: "sft".into(),
                ter_mean: 0.1 + 0.2,
                ter_sd: 1.0 / 3.0,
                sim_mean: 0.87,
                sim_sd: 0.0,
                kl_gap: Some(Estimate { value: 0.123456789012345, se: 1e-5 }),
                rep_gap: None,
            }],
            reconstruction: Some(ReconstructionTable::default()),
            scatter: vec![ScatterSet {
                model: "sft".into(),
                gap: GapReport {
                    centroid_distance: Estimate::default(),
                    pca: vec![[0.1, 0.2], [0.3, -0.4], [1e-17, 2.0], [3.0, 4.0]],
                    n_items: 2,
                },
            }],
            winrates: vec![WinRateRow {
                model: "dpo".into(),
                baseline: "sft".into(),
                rate: WinRate { win: 50.0, tie: 30.0, lose: 20.0 },
            }],
        }
    }

    #[test]
    fn report_round_trips_and_is_stable() {
        let r = sample_report();
        assert_eq!(Report::from_json(&r.to_json()).unwrap(), r);
        let dir = tempfile::tempdir().unwrap();
        emit_report(&r, dir.path()).unwrap();
        let first: Vec<Vec<u8>> = ["metrics.json", "tables.csv", "scatter.csv", "winrate.csv"]
            .iter()
            .map(|f| std::fs::read(dir.path().join(f)).unwrap())
            .collect();
        emit_report(&r, dir.path()).unwrap();
        for (i, f) in ["metrics.json", "tables.csv", "scatter.csv", "winrate.csv"].iter().enumerate() {
            assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), first[i]);
        }
        let back = Report::from_json(&String::from_utf8(first[0].clone()).unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.scatter_csv().lines().count(), 1 + 2 * 2);
    }
}
