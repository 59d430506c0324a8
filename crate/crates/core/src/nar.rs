//! Masked non-autoregressive generator of the upper codec layers.
//!
//! The model sees a speaker prompt (a short stack of all layers from
//! another utterance of the same speaker) followed by the target span,
//! whose layer 1 is given and whose upper layers are known, masked, or
//! absent. Attention is bidirectional. Layers are decoded one at a time,
//! coarse to fine, each by iterative confidence-ranked unmasking.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ckpt::{config_json, parse_config, Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::eval::ter;
use crate::nn::{log_sum_exp, Body, BodyDims, BodyTrace, Init, ParamLayout};
use crate::rng::{mix64, tag, Stream};
use crate::train::{run_epochs, StepOut, TrainConfig, TrainSummary, Trainable};
use crate::world::{cosine, LayeredTokens, Token, World, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NarConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    /// Prompt positions (each a full stack of `q` tokens).
    pub prompt_len: usize,
    pub decode_steps: usize,
    pub init_std: f64,
    pub param_seed: u64,
}

impl Default for NarConfig {
    fn default() -> Self {
        NarConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 256,
            prompt_len: 8,
            decode_steps: 4,
            init_std: 0.02,
            param_seed: 0x0A2_0001,
        }
    }
}

/// Layer sizes the model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NarShape {
    pub q: usize,
    pub k_ar: usize,
    pub k_nar: usize,
    pub max_len: usize,
}

impl NarShape {
    pub fn from_world(c: &WorldConfig) -> Self {
        NarShape {
            q: c.q,
            k_ar: c.k_ar,
            k_nar: c.k_nar,
            max_len: c.l_ar(),
        }
    }

    fn vocab(&self, layer: usize) -> usize {
        if layer == 0 {
            self.k_ar
        } else {
            self.k_nar
        }
    }

    /// Input id of a masked position in `layer`.
    pub fn mask_id(&self, layer: usize) -> u32 {
        self.vocab(layer) as u32
    }

    /// Input id of a not-yet-generated position in `layer`.
    pub fn absent_id(&self, layer: usize) -> u32 {
        self.vocab(layer) as u32 + 1
    }
}

impl NarConfig {
    pub fn validate(&self, shape: &NarShape) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config("d_model", format!("{} is not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.n_layers == 0 || self.d_ffn == 0 {
            return Err(Error::config("n_layers", "layers and FFN width must be positive"));
        }
        if self.prompt_len == 0 {
            return Err(Error::config("prompt_len", "must be at least 1"));
        }
        if self.decode_steps == 0 {
            return Err(Error::config("decode_steps", "must be at least 1"));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::config("init_std", "must be positive"));
        }
        if shape.q < 2 {
            return Err(Error::config("q", "the model needs at least one layer to generate"));
        }
        Ok(())
    }
}

/// A training example: a prompt and the golden stack to reproduce.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NarItem {
    pub speaker: usize,
    pub prompt: LayeredTokens,
    pub target: LayeredTokens,
}

/// Model input with explicit per-position ids for every layer of the span.
#[derive(Clone, Debug)]
struct NarInput {
    prompt: LayeredTokens,
    /// `q` rows of input ids (tokens, mask or absent) over the span.
    span: Vec<Vec<u32>>,
    /// Layer being predicted (1-based index into the stack).
    target_layer: usize,
    /// `(span position, golden token)` of each scored position.
    targets: Vec<(usize, Token)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NarHeader {
    config: NarConfig,
    shape: NarShape,
}

#[derive(Clone, Debug)]
pub struct NarModel {
    cfg: NarConfig,
    shape: NarShape,
    layout: ParamLayout,
    body: Body,
    layer_emb: Vec<std::ops::Range<usize>>,
    seg_emb: std::ops::Range<usize>,
    target_emb: std::ops::Range<usize>,
    pos_emb: std::ops::Range<usize>,
    heads: Vec<std::ops::Range<usize>>,
    pub params: Vec<f64>,
}

impl Trainable for NarModel {
    fn params_mut(&mut self) -> &mut Vec<f64> {
        &mut self.params
    }
}

impl NarModel {
    pub fn new(cfg: NarConfig, shape: NarShape) -> Result<Self> {
        cfg.validate(&shape)?;
        let mut m = Self::skeleton(cfg, shape);
        m.params = m.layout.init(m.cfg.param_seed, m.cfg.init_std);
        Ok(m)
    }

    fn skeleton(cfg: NarConfig, shape: NarShape) -> Self {
        let d = cfg.d_model;
        let mut layout = ParamLayout::new();
        let layer_emb = (0..shape.q)
            .map(|q| layout.add(format!("emb.layer{}", q + 1), &[shape.vocab(q) + 2, d], Init::Normal))
            .collect();
        let seg_emb = layout.add("emb.segment", &[2, d], Init::Normal);
        let target_emb = layout.add("emb.target_layer", &[shape.q - 1, d], Init::Normal);
        let pos_emb = layout.add("emb.position", &[cfg.prompt_len + shape.max_len, d], Init::Normal);
        let body = Body::register(
            &mut layout,
            "body",
            BodyDims {
                d_model: d,
                n_heads: cfg.n_heads,
                d_ffn: cfg.d_ffn,
                n_layers: cfg.n_layers,
            },
            false,
        );
        let heads = (1..shape.q)
            .map(|q| layout.add(format!("head.layer{}", q + 1), &[d, shape.k_nar], Init::Normal))
            .collect();
        NarModel {
            cfg,
            shape,
            layout,
            body,
            layer_emb,
            seg_emb,
            target_emb,
            pos_emb,
            heads,
            params: Vec::new(),
        }
    }

    pub fn config(&self) -> &NarConfig {
        &self.cfg
    }

    pub fn shape(&self) -> &NarShape {
        &self.shape
    }

    pub fn n_params(&self) -> usize {
        self.layout.len()
    }

    fn check_prompt(&self, prompt: &LayeredTokens) -> Result<()> {
        if prompt.num_layers() != self.shape.q || prompt.len() != self.cfg.prompt_len {
            return Err(Error::Shape(format!(
                "prompt is {}×{}, expected {}×{}",
                prompt.num_layers(),
                prompt.len(),
                self.shape.q,
                self.cfg.prompt_len
            )));
        }
        for (q, row) in prompt.layers.iter().enumerate() {
            if let Some(&t) = row.iter().find(|&&t| t as usize >= self.shape.vocab(q)) {
                return Err(Error::Shape(format!("prompt token {t} outside layer {} vocabulary", q + 1)));
            }
        }
        Ok(())
    }

    fn check_layer1(&self, layer1: &[Token]) -> Result<()> {
        if layer1.len() > self.shape.max_len {
            return Err(Error::Shape(format!("span of {} exceeds {}", layer1.len(), self.shape.max_len)));
        }
        if let Some(&t) = layer1.iter().find(|&&t| t as usize >= self.shape.k_ar) {
            return Err(Error::Shape(format!("layer-1 token {t} outside vocabulary")));
        }
        Ok(())
    }

    fn embed(&self, input: &NarInput) -> Vec<f64> {
        let d = self.cfg.d_model;
        let p = &self.params;
        let plen = self.cfg.prompt_len;
        let n = plen + input.span[0].len();
        let mut x = vec![0.0; n * d];
        let tgt = &p[self.target_emb.start + (input.target_layer - 1) * d..][..d];
        for i in 0..n {
            let (seg, ids): (usize, Vec<u32>) = if i < plen {
                (0, input.prompt.layers.iter().map(|row| row[i]).collect())
            } else {
                (1, input.span.iter().map(|row| row[i - plen]).collect())
            };
            let row = &mut x[i * d..(i + 1) * d];
            let add = |row: &mut [f64], off: usize| {
                for (r, v) in row.iter_mut().zip(&p[off..off + d]) {
                    *r += v;
                }
            };
            for (q, &id) in ids.iter().enumerate() {
                add(row, self.layer_emb[q].start + id as usize * d);
            }
            add(row, self.seg_emb.start + seg * d);
            add(row, self.pos_emb.start + i * d);
            for (r, v) in row.iter_mut().zip(tgt) {
                *r += v;
            }
        }
        x
    }

    fn embed_backward(&self, input: &NarInput, dx: &[f64], grad: &mut [f64]) {
        let d = self.cfg.d_model;
        let plen = self.cfg.prompt_len;
        let n = dx.len() / d;
        let tgt = self.target_emb.start + (input.target_layer - 1) * d;
        for i in 0..n {
            let row = &dx[i * d..(i + 1) * d];
            let (seg, ids): (usize, Vec<u32>) = if i < plen {
                (0, input.prompt.layers.iter().map(|r| r[i]).collect())
            } else {
                (1, input.span.iter().map(|r| r[i - plen]).collect())
            };
            let mut offs: Vec<usize> = ids
                .iter()
                .enumerate()
                .map(|(q, &id)| self.layer_emb[q].start + id as usize * d)
                .collect();
            offs.push(self.seg_emb.start + seg * d);
            offs.push(self.pos_emb.start + i * d);
            offs.push(tgt);
            for off in offs {
                for (g, v) in grad[off..off + d].iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
    }

    fn head_logits(&self, hidden: &[f64], layer: usize, span_pos: usize) -> Vec<f64> {
        let d = self.cfg.d_model;
        let k = self.shape.k_nar;
        let h = &hidden[(self.cfg.prompt_len + span_pos) * d..][..d];
        let w = &self.params[self.heads[layer - 1].clone()];
        (0..k).map(|c| (0..d).map(|j| h[j] * w[j * k + c]).sum()).collect()
    }

    fn forward(&self, input: &NarInput) -> BodyTrace {
        self.body.forward(&self.params, self.embed(input))
    }

    /// Mean NLL over every scored position of the batch, with gradient.
    fn masked_nll(&self, batch: &[NarInput]) -> Result<(f64, Vec<f64>)> {
        let total: usize = batch.iter().map(|b| b.targets.len()).sum();
        if total == 0 {
            return Err(Error::Argument("batch has no masked positions".into()));
        }
        let scale = 1.0 / total as f64;
        let d = self.cfg.d_model;
        let k = self.shape.k_nar;
        let parts: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|input| {
                let trace = self.forward(input);
                let n = trace.out.len() / d;
                let mut grad = vec![0.0; self.n_params()];
                let mut d_hidden = vec![0.0; n * d];
                let mut loss = 0.0;
                let head = self.heads[input.target_layer - 1].clone();
                for &(pos, tok) in &input.targets {
                    let logits = self.head_logits(&trace.out, input.target_layer, pos);
                    let lse = log_sum_exp(&logits);
                    loss -= (logits[tok as usize] - lse) * scale;
                    let row = self.cfg.prompt_len + pos;
                    let h = &trace.out[row * d..(row + 1) * d];
                    let w = &self.params[head.clone()];
                    for c in 0..k {
                        let g = scale * ((logits[c] - lse).exp() - if c == tok as usize { 1.0 } else { 0.0 });
                        for j in 0..d {
                            grad[head.start + j * k + c] += g * h[j];
                            d_hidden[row * d + j] += g * w[j * k + c];
                        }
                    }
                }
                let dx = self.body.backward(&self.params, &trace, &d_hidden, &mut grad);
                self.embed_backward(input, &dx, &mut grad);
                (loss, grad)
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.n_params()];
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("masked NLL is {loss}")));
        }
        Ok((loss, grad))
    }

    /// Masks a random fraction of one random target layer of `item`.
    fn training_input(&self, item: &NarItem, seed: u64) -> NarInput {
        let mut rng = Stream::new(seed);
        let q = self.shape.q;
        let len = item.target.len();
        let target_layer = 1 + rng.below(q - 1);
        let n_mask = loop {
            let m = (rng.uniform() * len as f64).floor() as usize;
            if m > 0 {
                break m;
            }
        };
        let masked = rng.sample_indices(len, n_mask);
        let mut span: Vec<Vec<u32>> = item.target.layers.clone();
        for (l, row) in span.iter_mut().enumerate().skip(target_layer + 1) {
            row.iter_mut().for_each(|t| *t = self.shape.absent_id(l));
        }
        let mut targets: Vec<(usize, Token)> = masked.iter().map(|&i| (i, item.target.layers[target_layer][i])).collect();
        targets.sort_unstable();
        for &(i, _) in &targets {
            span[target_layer][i] = self.shape.mask_id(target_layer);
        }
        NarInput {
            prompt: item.prompt.clone(),
            span,
            target_layer,
            targets,
        }
    }

    /// Masked-prediction training on golden items.
    pub fn train(&mut self, items: &[NarItem], cfg: &TrainConfig) -> Result<TrainSummary> {
        for it in items {
            self.check_prompt(&it.prompt)?;
            if it.target.num_layers() != self.shape.q || it.target.is_empty() {
                return Err(Error::Shape("training target must be a non-empty full stack".into()));
            }
            self.check_layer1(it.target.layer1())?;
        }
        let mut step_no = 0u64;
        run_epochs(self, items.len(), cfg, |m, idx| {
            let batch: Vec<NarInput> = idx
                .iter()
                .map(|&i| m.training_input(&items[i], mix64(mix64(cfg.seed, tag::MASK), step_no.wrapping_mul(1 << 20) + i as u64)))
                .collect();
            step_no += 1;
            let (loss, grad) = m.masked_nll(&batch)?;
            Ok(StepOut {
                loss,
                grad,
                extra: Vec::new(),
            })
        })
    }

    /// Masked-prediction loss and gradient on `items`, item `i` masked
    /// with seed `mix64(seed, i)`.
    pub fn masked_loss(&self, items: &[NarItem], seed: u64) -> Result<(f64, Vec<f64>)> {
        let batch: Vec<NarInput> = items
            .iter()
            .enumerate()
            .map(|(i, it)| self.training_input(it, mix64(seed, i as u64)))
            .collect();
        self.masked_nll(&batch)
    }

    /// Generates layers `2..=Q` for `layer1` given a prompt.
    ///
    /// `temperature == 0` picks the most probable token at every position
    /// (ties to the lowest id); otherwise tokens are sampled from `seed`.
    pub fn decode(&self, prompt: &LayeredTokens, layer1: &[Token], temperature: f64, seed: u64) -> Result<Vec<Vec<Token>>> {
        Ok(self.decode_traced(prompt, layer1, temperature, seed)?.0)
    }

    /// As [`decode`](Self::decode), also returning per layer the step at
    /// which each position was committed (1-based).
    pub fn decode_traced(
        &self,
        prompt: &LayeredTokens,
        layer1: &[Token],
        temperature: f64,
        seed: u64,
    ) -> Result<(Vec<Vec<Token>>, Vec<Vec<usize>>)> {
        self.check_prompt(prompt)?;
        self.check_layer1(layer1)?;
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::Argument(format!("temperature {temperature} must be finite and non-negative")));
        }
        let q = self.shape.q;
        let len = layer1.len();
        let steps = self.cfg.decode_steps;
        let mut rng = Stream::derived(seed, tag::DECODE);
        let mut span: Vec<Vec<u32>> = (0..q)
            .map(|l| if l == 0 { layer1.to_vec() } else { vec![self.shape.absent_id(l); len] })
            .collect();
        let mut committed_at = vec![vec![0usize; len]; q - 1];
        if len == 0 {
            return Ok((vec![Vec::new(); q - 1], committed_at));
        }
        for layer in 1..q {
            span[layer].iter_mut().for_each(|t| *t = self.shape.mask_id(layer));
            let mut done = 0;
            for k in 1..=steps {
                let input = NarInput {
                    prompt: prompt.clone(),
                    span: span.clone(),
                    target_layer: layer,
                    targets: Vec::new(),
                };
                let trace = self.forward(&input);
                let goal = if k == steps { len } else { schedule(len, k, steps) };
                let mut cands: Vec<(f64, usize, Token)> = Vec::new();
                for i in 0..len {
                    if span[layer][i] != self.shape.mask_id(layer) {
                        continue;
                    }
                    let logits = self.head_logits(&trace.out, layer, i);
                    let lse = log_sum_exp(&logits);
                    let best = crate::ar::argmax(&logits);
                    let tok = if temperature == 0.0 {
                        best
                    } else {
                        let w: Vec<f64> = logits.iter().map(|l| ((l - logits[best]) / temperature).exp()).collect();
                        rng.categorical(&w)
                    };
                    cands.push(((logits[tok] - lse).exp(), i, tok as Token));
                }
                // Highest confidence first; ties to the lower position.
                cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                for &(_, i, tok) in cands.iter().take(goal.saturating_sub(done)) {
                    span[layer][i] = tok;
                    committed_at[layer - 1][i] = k;
                    done += 1;
                }
            }
        }
        Ok((span.into_iter().skip(1).collect(), committed_at))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let header = NarHeader {
            config: self.cfg.clone(),
            shape: self.shape,
        };
        Checkpoint::from_layout(ModelKind::Nar, config_json(&header), &self.layout, &self.params)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let header: NarHeader = parse_config(&ckpt.config_json)?;
        header
            .config
            .validate(&header.shape)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let s = &header.shape;
        if s.k_ar == 0 || s.k_nar == 0 || s.max_len == 0 || s.q > 64 {
            return Err(Error::Format("checkpoint shape is degenerate".into()));
        }
        let cells = (header.config.d_model as u128)
            * (header.config.prompt_len as u128 + s.max_len as u128 + header.config.d_ffn as u128 + (s.q as u128) * (s.k_ar.max(s.k_nar) as u128 + 2));
        if cells > 1 << 28 {
            return Err(Error::Format("checkpoint config describes an oversized model".into()));
        }
        let mut m = Self::skeleton(header.config, header.shape);
        ckpt.check(ModelKind::Nar, &m.layout)?;
        m.params = ckpt.params.clone();
        Ok(m)
    }
}

/// Positions committed after step `k` of `steps` under the cosine schedule.
pub fn schedule(len: usize, k: usize, steps: usize) -> usize {
    let frac = 1.0 - (std::f64::consts::FRAC_PI_2 * k as f64 / steps as f64).cos();
    ((len as f64 * frac).ceil() as usize).min(len)
}

/// A prompt for `speaker`: the first `prompt_len` positions of a golden
/// utterance drawn from `seed`.
pub fn speaker_prompt(world: &World, speaker: usize, prompt_len: usize, seed: u64) -> LayeredTokens {
    world
        .sample_utterance(speaker, mix64(seed, tag::PROMPT))
        .golden
        .segment(0, prompt_len)
}

/// Golden training items; item `i` uses speaker `i mod S`.
pub fn build_items(world: &World, n: usize, prompt_len: usize, seed: u64) -> Vec<NarItem> {
    let s = world.config().speakers;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let item_seed = mix64(seed, i as u64);
            let speaker = i % s;
            let u = world.sample_utterance(speaker, item_seed);
            NarItem {
                speaker,
                prompt: speaker_prompt(world, speaker, prompt_len, item_seed),
                target: u.golden,
            }
        })
        .collect()
}

/// Token error and speaker similarity of one reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recon {
    pub ter: f64,
    pub sim: f64,
}

/// Decodes the upper layers for `layer1`, then scores the stack against
/// the text (TER of the layer-1 transcription) and the speaker (SIM).
pub fn reconstruct(
    world: &World,
    nar: &NarModel,
    speaker: usize,
    text: &[Token],
    prompt: &LayeredTokens,
    layer1: &[Token],
) -> Result<Recon> {
    let upper = nar.decode(prompt, layer1, 0.0, 0)?;
    score_stack(world, speaker, text, &LayeredTokens::stack(layer1.to_vec(), upper)?)
}

/// TER and SIM of a complete token stack. An empty stack has similarity 0.
pub fn score_stack(world: &World, speaker: usize, text: &[Token], stack: &LayeredTokens) -> Result<Recon> {
    let hyp = world.transcribe_prefix(speaker, stack.layer1())?;
    let sim = if stack.is_empty() {
        0.0
    } else {
        cosine(&world.speaker_embed(stack)?, world.speaker_ref(speaker))
    };
    Ok(Recon {
        ter: ter(&hyp, text)?,
        sim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> (NarModel, NarItem) {
        let shape = NarShape {
            q: 3,
            k_ar: 5,
            k_nar: 4,
            max_len: 6,
        };
        let cfg = NarConfig {
            d_model: 16,
            n_heads: 2,
            d_ffn: 24,
            n_layers: 2,
            prompt_len: 3,
            init_std: 0.3,
            ..NarConfig::default()
        };
        let m = NarModel::new(cfg, shape).unwrap();
        let item = NarItem {
            speaker: 0,
            prompt: LayeredTokens::new(vec![vec![0, 4, 2], vec![1, 3, 0], vec![2, 2, 1]]).unwrap(),
            target: LayeredTokens::new(vec![vec![1, 2, 3, 4, 0], vec![0, 1, 2, 3, 0], vec![3, 3, 1, 0, 2]]).unwrap(),
        };
        (m, item)
    }

    #[test]
    fn schedule_is_monotone_and_complete() {
        for steps in 1..6 {
            let mut prev = 0;
            for k in 1..=steps {
                let s = schedule(24, k, steps);
                assert!(s >= prev);
                prev = s;
            }
            assert_eq!(prev, 24);
        }
    }

    #[test]
    fn training_input_masks_target_layer_only() {
        let (m, item) = micro();
        for seed in 0..50 {
            let inp = m.training_input(&item, seed);
            assert!(!inp.targets.is_empty());
            let t = inp.target_layer;
            for (l, row) in inp.span.iter().enumerate() {
                for (i, &id) in row.iter().enumerate() {
                    if l < t {
                        assert_eq!(id, item.target.layers[l][i]);
                    } else if l > t {
                        assert_eq!(id, m.shape().absent_id(l));
                    } else if inp.targets.iter().any(|&(p, _)| p == i) {
                        assert_eq!(id, m.shape().mask_id(l));
                    } else {
                        assert_eq!(id, item.target.layers[l][i]);
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (m, item) = micro();
        let batch = vec![m.training_input(&item, 1), m.training_input(&item, 2)];
        let (_, g) = m.masked_nll(&batch).unwrap();
        let mut rng = Stream::new(4);
        let h = 1e-5;
        for _ in 0..200 {
            let i = rng.below(m.n_params());
            let mut mm = m.clone();
            mm.params[i] += h;
            let up = mm.masked_nll(&batch).unwrap().0;
            mm.params[i] -= 2.0 * h;
            let down = mm.masked_nll(&batch).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - g[i]).abs() / (fd.abs() + g[i].abs()).max(1e-8);
            assert!(err < 1e-4 || (fd - g[i]).abs() < 1e-10, "coord {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn single_step_decode_is_argmax_fill() {
        let (mut m, item) = micro();
        m.cfg.decode_steps = 1;
        let (out, at) = m.decode_traced(&item.prompt, item.target.layer1(), 0.0, 0).unwrap();
        assert!(at.iter().flatten().all(|&k| k == 1));
        // Layer 2 from one pass over the fully masked span.
        let input = NarInput {
            prompt: item.prompt.clone(),
            span: vec![item.target.layer1().to_vec(), vec![m.shape().mask_id(1); 5], vec![m.shape().absent_id(2); 5]],
            target_layer: 1,
            targets: Vec::new(),
        };
        let trace = m.forward(&input);
        for i in 0..5 {
            assert_eq!(out[0][i] as usize, crate::ar::argmax(&m.head_logits(&trace.out, 1, i)));
        }
    }

    #[test]
    fn multi_step_decode_commits_every_position_once() {
        let (m, item) = micro();
        let (out, at) = m.decode_traced(&item.prompt, item.target.layer1(), 0.0, 0).unwrap();
        assert_eq!(out.len(), 2);
        for row in &at {
            assert!(row.iter().all(|&k| (1..=4).contains(&k)));
            // Committed counts follow the schedule.
            for k in 1..=4 {
                assert_eq!(row.iter().filter(|&&s| s <= k).count(), schedule(5, k, 4));
            }
        }
        assert_eq!(out, m.decode(&item.prompt, item.target.layer1(), 0.0, 7).unwrap());
    }

    #[test]
    fn bad_inputs_rejected() {
        let (m, item) = micro();
        assert!(m.decode(&item.target, item.target.layer1(), 0.0, 0).is_err());
        assert!(m.decode(&item.prompt, &[9], 0.0, 0).is_err());
        assert!(m.decode(&item.prompt, &[0; 7], 0.0, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, _) = micro();
        let c = Checkpoint::from_bytes(&m.checkpoint().to_bytes()).unwrap();
        assert_eq!(NarModel::from_checkpoint(&c).unwrap().params, m.params);
    }
}
