//! The autoregressive codec language model.
//!
//! A decoder-only transformer over one shared vocabulary: text symbols,
//! layer-1 codec tokens, and the specials `BOS SEP EOS GOOD BAD`. A training
//! sequence is framed as
//!
//! ```text
//! [GOOD|BAD]? BOS x_1 .. x_L SEP y_1 .. y_M EOS
//! ```
//!
//! and only the response span `y_1 .. y_M EOS` is scored. The response
//! distribution is restricted to layer-1 tokens and `EOS`, and once the
//! response reaches its cap of `r · |x|` tokens `EOS` is forced, so the
//! probabilities of all responses of length `0..=cap` sum to one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ckpt::{config_json, parse_config, Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::nn::{log_sum_exp, Body, BodyDims, BodyTrace, Init, ParamLayout};
use crate::rng::Stream;
use crate::world::{Token, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_context: usize,
    pub init_std: f64,
    pub param_seed: u64,
}

impl Default for ArConfig {
    fn default() -> Self {
        ArConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 256,
            max_context: 64,
            init_std: 0.02,
            param_seed: 0xA11C_E000,
        }
    }
}

/// Token-id layout shared by the model and the data it reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub v_text: usize,
    pub k_ar: usize,
    /// Layer-1 tokens per text symbol.
    pub r: usize,
    pub max_text: usize,
}

impl Vocab {
    pub fn from_world(c: &WorldConfig) -> Self {
        Vocab {
            v_text: c.v_text,
            k_ar: c.k_ar,
            r: c.r,
            max_text: c.l_text,
        }
    }

    pub fn size(&self) -> usize {
        self.v_text + self.k_ar + 5
    }

    pub fn text(&self, s: Token) -> u32 {
        s
    }

    pub fn layer1(&self, t: Token) -> u32 {
        (self.v_text as u32) + t
    }

    pub fn bos(&self) -> u32 {
        (self.v_text + self.k_ar) as u32
    }

    pub fn sep(&self) -> u32 {
        self.bos() + 1
    }

    pub fn eos(&self) -> u32 {
        self.bos() + 2
    }

    pub fn good(&self) -> u32 {
        self.bos() + 3
    }

    pub fn bad(&self) -> u32 {
        self.bos() + 4
    }

    /// Longest response for a text of `text_len` symbols.
    pub fn cap(&self, text_len: usize) -> usize {
        self.r * text_len
    }

    /// Length of the longest framed sequence.
    pub fn max_framed(&self) -> usize {
        2 + self.max_text + 1 + self.cap(self.max_text) + 1
    }
}

/// Quality control token prepended to a sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Control {
    #[default]
    None,
    Good,
    Bad,
}

/// A framed sequence and the location of its response span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Framed {
    pub tokens: Vec<u32>,
    /// Index of `y_1` (equivalently, of `EOS` when the response is empty).
    pub resp_start: usize,
    pub resp_len: usize,
    /// Whether `EOS` is forced because the response is at its cap.
    pub eos_forced: bool,
}

impl Framed {
    /// Number of scored response positions, `resp_len + 1`.
    pub fn n_scored(&self) -> usize {
        self.resp_len + 1
    }

    /// Positions that actually carry probability mass.
    pub fn n_free(&self) -> usize {
        self.resp_len + usize::from(!self.eos_forced)
    }
}

/// What a differentiable query reads off a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Output {
    /// Per-position log-probabilities of `y_1 .. y_M EOS` (length `M + 1`).
    TokenLogprobs,
    /// The scalar reward head at the final position (length 1).
    Reward,
}

#[derive(Clone, Debug)]
pub struct Query {
    pub framed: Framed,
    pub output: Output,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArHeader {
    config: ArConfig,
    vocab: Vocab,
    inference_control: Control,
}

/// Model tensors and the flat parameter vector.
#[derive(Clone, Debug)]
pub struct ArPolicy {
    cfg: ArConfig,
    vocab: Vocab,
    layout: ParamLayout,
    body: Body,
    tok_emb: std::ops::Range<usize>,
    pos_emb: std::ops::Range<usize>,
    out_w: std::ops::Range<usize>,
    rm_w: std::ops::Range<usize>,
    rm_b: std::ops::Range<usize>,
    /// Control token used when sampling for downstream use.
    pub inference_control: Control,
    pub params: Vec<f64>,
}

impl ArConfig {
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config("d_model", format!("{} is not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.n_layers == 0 {
            return Err(Error::config("n_layers", "must be at least 1"));
        }
        if self.d_ffn == 0 {
            return Err(Error::config("d_ffn", "must be positive"));
        }
        if self.max_context < vocab.max_framed() {
            return Err(Error::config(
                "max_context",
                format!("{} cannot hold a framed sequence of {}", self.max_context, vocab.max_framed()),
            ));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::config("init_std", "must be positive"));
        }
        Ok(())
    }
}

impl ArPolicy {
    /// Freshly initialized model.
    pub fn new(cfg: ArConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate(&vocab)?;
        let mut m = Self::skeleton(cfg, vocab);
        m.params = m.layout.init(m.cfg.param_seed, m.cfg.init_std);
        Ok(m)
    }

    fn skeleton(cfg: ArConfig, vocab: Vocab) -> Self {
        let d = cfg.d_model;
        let v = vocab.size();
        let mut layout = ParamLayout::new();
        let tok_emb = layout.add("tok_emb", &[v, d], Init::Normal);
        let pos_emb = layout.add("pos_emb", &[cfg.max_context, d], Init::Normal);
        let body = Body::register(
            &mut layout,
            "body",
            BodyDims {
                d_model: d,
                n_heads: cfg.n_heads,
                d_ffn: cfg.d_ffn,
                n_layers: cfg.n_layers,
            },
            true,
        );
        let out_w = layout.add("lm_head", &[d, v], Init::Normal);
        let rm_w = layout.add("reward.w", &[d], Init::Zeros);
        let rm_b = layout.add("reward.b", &[1], Init::Zeros);
        ArPolicy {
            cfg,
            vocab,
            layout,
            body,
            tok_emb,
            pos_emb,
            out_w,
            rm_w,
            rm_b,
            inference_control: Control::None,
            params: Vec::new(),
        }
    }

    pub fn config(&self) -> &ArConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.layout.len()
    }

    /// Sets the output projection to zero, making every row of logits zero.
    pub fn zero_lm_head(&mut self) {
        let r = self.out_w.clone();
        self.params[r].iter_mut().for_each(|v| *v = 0.0);
    }

    /// Builds the framed sequence for `(x, y)` under a control token.
    pub fn frame(&self, text: &[Token], y: &[Token], control: Control) -> Result<Framed> {
        let vb = &self.vocab;
        if text.is_empty() || text.len() > vb.max_text {
            return Err(Error::Shape(format!("text of {} symbols; expected 1..={}", text.len(), vb.max_text)));
        }
        if let Some(&s) = text.iter().find(|&&s| s as usize >= vb.v_text) {
            return Err(Error::Shape(format!("text symbol {s} outside alphabet of {}", vb.v_text)));
        }
        let cap = vb.cap(text.len());
        if y.len() > cap {
            return Err(Error::Shape(format!("response of {} tokens exceeds cap {cap}", y.len())));
        }
        if let Some(&t) = y.iter().find(|&&t| t as usize >= vb.k_ar) {
            return Err(Error::Shape(format!("layer-1 token {t} outside vocabulary of {}", vb.k_ar)));
        }
        let mut tokens = Vec::with_capacity(vb.max_framed());
        match control {
            Control::None => {}
            Control::Good => tokens.push(vb.good()),
            Control::Bad => tokens.push(vb.bad()),
        }
        tokens.push(vb.bos());
        tokens.extend(text.iter().map(|&s| vb.text(s)));
        tokens.push(vb.sep());
        let resp_start = tokens.len();
        tokens.extend(y.iter().map(|&t| vb.layer1(t)));
        tokens.push(vb.eos());
        Ok(Framed {
            tokens,
            resp_start,
            resp_len: y.len(),
            eos_forced: y.len() == cap,
        })
    }

    fn embed(&self, tokens: &[u32]) -> Vec<f64> {
        let d = self.cfg.d_model;
        let p = &self.params;
        let mut x = vec![0.0; tokens.len() * d];
        for (i, &t) in tokens.iter().enumerate() {
            let te = &p[self.tok_emb.start + t as usize * d..][..d];
            let pe = &p[self.pos_emb.start + i * d..][..d];
            for j in 0..d {
                x[i * d + j] = te[j] + pe[j];
            }
        }
        x
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.cfg.max_context {
            return Err(Error::Shape(format!(
                "sequence of {} tokens; expected 1..={}",
                tokens.len(),
                self.cfg.max_context
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab.size()) {
            return Err(Error::Shape(format!("token id {t} outside vocabulary of {}", self.vocab.size())));
        }
        Ok(())
    }

    fn run(&self, tokens: &[u32]) -> BodyTrace {
        self.body.forward(&self.params, self.embed(tokens))
    }

    /// Full-vocabulary logits for every position, `n × V` row-major.
    pub fn forward_logits(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        self.check_tokens(tokens)?;
        let trace = self.run(tokens);
        Ok(self.logits_from_hidden(&trace.out, tokens.len()))
    }

    fn logits_from_hidden(&self, hidden: &[f64], n: usize) -> Vec<f64> {
        let v = self.vocab.size();
        let mut logits = vec![0.0; n * v];
        crate::nn::matmul(hidden, &self.params[self.out_w.clone()], &mut logits, n, self.cfg.d_model, v, false);
        logits
    }

    /// Logits over the response support (`K_ar` layer-1 tokens, then `EOS`)
    /// from one full-vocabulary row.
    fn support_logits(&self, row: &[f64]) -> Vec<f64> {
        let vb = &self.vocab;
        let mut s: Vec<f64> = row[vb.v_text..vb.v_text + vb.k_ar].to_vec();
        s.push(row[vb.eos() as usize]);
        s
    }

    /// Support logits from a single hidden state.
    fn support_logits_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        let vb = &self.vocab;
        let v = vb.size();
        let w = &self.params[self.out_w.clone()];
        let cols = (vb.v_text..vb.v_text + vb.k_ar).chain(std::iter::once(vb.eos() as usize));
        cols.map(|c| h.iter().enumerate().map(|(k, hk)| hk * w[k * v + c]).sum())
            .collect()
    }

    /// Next-token log-probabilities over the response support, at each
    /// response position of a framed sequence (teacher forcing). Row `j`
    /// is the distribution of the `j`-th response token, the last entry of
    /// each row is `EOS`.
    pub fn response_dists(&self, framed: &Framed) -> Result<Vec<Vec<f64>>> {
        self.check_tokens(&framed.tokens)?;
        let trace = self.run(&framed.tokens);
        let d = self.cfg.d_model;
        Ok((0..framed.n_scored())
            .map(|j| {
                let pos = framed.resp_start + j - 1;
                let logits = self.support_logits_from_hidden(&trace.out[pos * d..(pos + 1) * d]);
                let lse = log_sum_exp(&logits);
                logits.iter().map(|l| l - lse).collect()
            })
            .collect())
    }

    fn token_logprobs_from(&self, framed: &Framed, logits: &[f64]) -> Vec<f64> {
        let v = self.vocab.size();
        (0..framed.n_scored())
            .map(|j| {
                if j == framed.resp_len && framed.eos_forced {
                    return 0.0;
                }
                let pos = framed.resp_start + j - 1;
                let s = self.support_logits(&logits[pos * v..(pos + 1) * v]);
                let target = self.support_index(framed.tokens[pos + 1]);
                s[target] - log_sum_exp(&s)
            })
            .collect()
    }

    fn support_index(&self, token: u32) -> usize {
        let vb = &self.vocab;
        if token == vb.eos() {
            vb.k_ar
        } else {
            (token - vb.v_text as u32) as usize
        }
    }

    /// Per-position log-probabilities of the response span.
    pub fn token_logprobs(&self, framed: &Framed) -> Result<Vec<f64>> {
        self.check_tokens(&framed.tokens)?;
        let trace = self.run(&framed.tokens);
        let logits = self.logits_from_hidden(&trace.out, framed.tokens.len());
        Ok(self.token_logprobs_from(framed, &logits))
    }

    /// `log p(y | x, control)`.
    pub fn seq_logprob(&self, text: &[Token], y: &[Token], control: Control) -> Result<f64> {
        let f = self.frame(text, y, control)?;
        Ok(self.token_logprobs(&f)?.iter().sum())
    }

    /// Scalar reward of `(x, y)` from the head at the final position.
    pub fn reward(&self, text: &[Token], y: &[Token]) -> Result<f64> {
        let f = self.frame(text, y, Control::None)?;
        self.check_tokens(&f.tokens)?;
        let trace = self.run(&f.tokens);
        Ok(self.reward_from(&trace.out, f.tokens.len()))
    }

    fn reward_from(&self, hidden: &[f64], n: usize) -> f64 {
        let d = self.cfg.d_model;
        let h = &hidden[(n - 1) * d..n * d];
        let w = &self.params[self.rm_w.clone()];
        h.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + self.params[self.rm_b.start]
    }

    /// Mean final hidden state over the layer-1 token positions.
    pub fn pooled_rep(&self, text: &[Token], y: &[Token]) -> Result<Vec<f64>> {
        if y.is_empty() {
            return Err(Error::Shape("pooled representation of an empty response".into()));
        }
        let f = self.frame(text, y, Control::None)?;
        let trace = self.run(&f.tokens);
        Ok(pool_rows(&trace.out, self.cfg.d_model, f.resp_start, f.resp_len))
    }

    /// Final-layer hidden states of a framed sequence, `n × d_model`.
    pub fn hidden_states(&self, framed: &Framed) -> Result<Vec<f64>> {
        self.check_tokens(&framed.tokens)?;
        Ok(self.run(&framed.tokens).out)
    }

    /// Ancestral sampling of a response. `temperature == 0` is greedy with
    /// ties going to the lowest support index.
    pub fn sample(&self, text: &[Token], control: Control, temperature: f64, seed: u64) -> Result<Vec<Token>> {
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::Argument(format!("temperature {temperature} must be finite and non-negative")));
        }
        let prompt = self.frame(text, &[], control)?;
        let cap = self.vocab.cap(text.len());
        let mut rng = Stream::new(seed);
        let mut cache = self.body.new_cache(prompt.resp_start + cap + 1);
        let mut h = Vec::new();
        for (i, &t) in prompt.tokens[..prompt.resp_start].iter().enumerate() {
            h = self.step(&mut cache, t, i);
        }
        let mut y = Vec::with_capacity(cap);
        while y.len() < cap {
            let logits = self.support_logits_from_hidden(&h);
            let choice = if temperature == 0.0 {
                argmax(&logits)
            } else {
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
                rng.categorical(&w)
            };
            if choice == self.vocab.k_ar {
                break;
            }
            let t = choice as Token;
            y.push(t);
            if y.len() < cap {
                h = self.step(&mut cache, self.vocab.layer1(t), prompt.resp_start + y.len() - 1);
            }
        }
        Ok(y)
    }

    fn step(&self, cache: &mut crate::nn::KvCache, token: u32, pos: usize) -> Vec<f64> {
        let d = self.cfg.d_model;
        let p = &self.params;
        let te = &p[self.tok_emb.start + token as usize * d..][..d];
        let pe = &p[self.pos_emb.start + pos * d..][..d];
        let x: Vec<f64> = te.iter().zip(pe).map(|(a, b)| a + b).collect();
        self.body.decode_step(p, cache, &x)
    }

    /// Evaluates `objective` on the outputs of `queries` and returns its
    /// value and gradient with respect to the parameters.
    ///
    /// The objective receives one output vector per query (see [`Output`])
    /// and returns the loss together with its partial derivatives in the
    /// same shapes. Per-query gradients are summed in query order, so the
    /// result does not depend on the number of worker threads.
    pub fn loss_and_grad<F>(&self, queries: &[Query], objective: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>),
    {
        for q in queries {
            self.check_tokens(&q.framed.tokens)?;
        }
        let passes: Vec<(BodyTrace, Vec<f64>, Vec<f64>)> = queries
            .par_iter()
            .map(|q| {
                let trace = self.run(&q.framed.tokens);
                let n = q.framed.tokens.len();
                let logits = self.logits_from_hidden(&trace.out, n);
                let out = match q.output {
                    Output::TokenLogprobs => self.token_logprobs_from(&q.framed, &logits),
                    Output::Reward => vec![self.reward_from(&trace.out, n)],
                };
                (trace, logits, out)
            })
            .collect();
        for (qi, (_, _, out)) in passes.iter().enumerate() {
            if let Some(j) = out.iter().position(|v| v.is_nan()) {
                return Err(Error::Numeric(format!("NaN in forward pass: query {qi}, output {j}")));
            }
        }
        let outputs: Vec<Vec<f64>> = passes.iter().map(|p| p.2.clone()).collect();
        let (loss, d_out) = objective(&outputs);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("objective is not finite: {loss}")));
        }
        if d_out.len() != queries.len() || d_out.iter().zip(&outputs).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Shape("objective gradient does not match its inputs".into()));
        }
        let grads: Vec<Option<Vec<f64>>> = queries
            .par_iter()
            .zip(passes.par_iter())
            .zip(d_out.par_iter())
            .map(|((q, (trace, logits, _)), g)| {
                if g.iter().all(|&v| v == 0.0) {
                    return None;
                }
                Some(self.backward_query(q, trace, logits, g))
            })
            .collect();
        let mut total = vec![0.0; self.n_params()];
        for g in grads.into_iter().flatten() {
            for (t, v) in total.iter_mut().zip(&g) {
                *t += v;
            }
        }
        Ok((loss, total))
    }

    fn backward_query(&self, q: &Query, trace: &BodyTrace, logits: &[f64], g: &[f64]) -> Vec<f64> {
        let d = self.cfg.d_model;
        let v = self.vocab.size();
        let n = q.framed.tokens.len();
        let mut grad = vec![0.0; self.n_params()];
        let mut d_logits = vec![0.0; n * v];
        let mut d_hidden = vec![0.0; n * d];
        match q.output {
            Output::TokenLogprobs => {
                let f = &q.framed;
                let vb = &self.vocab;
                for (j, &gj) in g.iter().enumerate() {
                    if gj == 0.0 || (j == f.resp_len && f.eos_forced) {
                        continue;
                    }
                    let pos = f.resp_start + j - 1;
                    let row = &logits[pos * v..(pos + 1) * v];
                    let s = self.support_logits(row);
                    let lse = log_sum_exp(&s);
                    let target = self.support_index(f.tokens[pos + 1]);
                    let dl = &mut d_logits[pos * v..(pos + 1) * v];
                    for (i, &si) in s.iter().enumerate() {
                        let col = if i == vb.k_ar { vb.eos() as usize } else { vb.v_text + i };
                        let ind = if i == target { 1.0 } else { 0.0 };
                        dl[col] += gj * (ind - (si - lse).exp());
                    }
                }
            }
            Output::Reward => {
                let gr = g[0];
                let h = &trace.out[(n - 1) * d..n * d];
                let w = &self.params[self.rm_w.clone()];
                for k in 0..d {
                    grad[self.rm_w.start + k] += gr * h[k];
                    d_hidden[(n - 1) * d + k] += gr * w[k];
                }
                grad[self.rm_b.start] += gr;
            }
        }
        // logits = H · W_out
        crate::nn::matmul_tn(&trace.out, &d_logits, &mut grad[self.out_w.clone()], d, n, v, true);
        crate::nn::matmul_nt(&d_logits, &self.params[self.out_w.clone()], &mut d_hidden, n, v, d, true);
        let dx = self.body.backward(&self.params, trace, &d_hidden, &mut grad);
        for (i, &t) in q.framed.tokens.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            let te = self.tok_emb.start + t as usize * d;
            let pe = self.pos_emb.start + i * d;
            for k in 0..d {
                grad[te + k] += row[k];
                grad[pe + k] += row[k];
            }
        }
        grad
    }

    pub fn checkpoint(&self, kind: ModelKind) -> Checkpoint {
        let header = ArHeader {
            config: self.cfg.clone(),
            vocab: self.vocab,
            inference_control: self.inference_control,
        };
        Checkpoint::from_layout(kind, config_json(&header), &self.layout, &self.params)
    }

    /// Restores a policy (or reward model, by `kind`) from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, kind: ModelKind) -> Result<Self> {
        let header: ArHeader = parse_config(&ckpt.config_json)?;
        header
            .config
            .validate(&header.vocab)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        if header.vocab.v_text == 0 || header.vocab.k_ar == 0 || header.vocab.r == 0 || header.vocab.max_text == 0 {
            return Err(Error::Format("checkpoint vocabulary has an empty range".into()));
        }
        let cells = (header.config.d_model as u128)
            * (header.config.max_context as u128 + header.vocab.size() as u128 + header.config.d_ffn as u128);
        if cells > 1 << 28 {
            return Err(Error::Format("checkpoint config describes an oversized model".into()));
        }
        let mut m = Self::skeleton(header.config, header.vocab);
        ckpt.check(kind, &m.layout)?;
        m.params = ckpt.params.clone();
        m.inference_control = header.inference_control;
        Ok(m)
    }
}

/// Mean of `count` consecutive `d`-wide rows starting at row `start`.
pub(crate) fn pool_rows(rows: &[f64], d: usize, start: usize, count: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    for i in start..start + count {
        for (a, v) in acc.iter_mut().zip(&rows[i * d..(i + 1) * d]) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    acc
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn micro() -> ArPolicy {
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
            param_seed: 5,
        };
        ArPolicy::new(cfg, vocab).unwrap()
    }

    #[test]
    fn framing_layout() {
        let m = micro();
        let f = m.frame(&[2, 0], &[3, 1], Control::Good).unwrap();
        let vb = m.vocab();
        assert_eq!(f.tokens, vec![vb.good(), vb.bos(), 2, 0, vb.sep(), 6, 4, vb.eos()]);
        assert_eq!(f.resp_start, 5);
        assert!(!f.eos_forced);
        assert!(m.frame(&[0], &[0, 1, 2], Control::None).is_err());
        assert!(m.frame(&[3], &[], Control::None).is_err());
        assert!(m.frame(&[0], &[4], Control::None).is_err());
    }

    #[test]
    fn context_limit_enforced() {
        let vocab = Vocab {
            v_text: 3,
            k_ar: 4,
            r: 2,
            max_text: 2,
        };
        let cfg = ArConfig {
            max_context: 9,
            ..ArConfig::default()
        };
        assert!(matches!(ArPolicy::new(cfg, vocab), Err(Error::Config { .. })));
        let m = micro();
        assert!(matches!(m.forward_logits(&[0; 13]), Err(Error::Shape(_))));
    }

    #[test]
    fn logits_rows_normalize_and_are_causal() {
        let m = micro();
        let f = m.frame(&[1, 2], &[0, 3, 2], Control::None).unwrap();
        let v = m.vocab().size();
        let a = m.forward_logits(&f.tokens).unwrap();
        for row in a.chunks(v) {
            let s: f64 = row.iter().map(|l| (l - log_sum_exp(row)).exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let mut t = f.tokens.clone();
        t[6] = m.vocab().layer1(1);
        let b = m.forward_logits(&t).unwrap();
        assert_eq!(a[..6 * v], b[..6 * v]);
        assert_eq!(a, m.forward_logits(&f.tokens).unwrap());
    }

    #[test]
    fn zero_head_gives_uniform_support() {
        let mut m = micro();
        m.zero_lm_head();
        // Non-capped response: every free position is uniform over K + 1.
        let lp = m.seq_logprob(&[1, 2], &[0, 3, 2], Control::None).unwrap();
        assert!((lp - 4.0 * (1.0f64 / 5.0).ln()).abs() < 1e-12);
        // Capped response: EOS is forced and costs nothing.
        let lp = m.seq_logprob(&[1, 2], &[0, 3, 2, 1], Control::None).unwrap();
        assert!((lp - 4.0 * (1.0f64 / 5.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn response_probabilities_sum_to_one() {
        let m = micro();
        let mut total = 0.0;
        let k = 4;
        total += m.seq_logprob(&[1], &[], Control::Bad).unwrap().exp();
        for a in 0..k {
            total += m.seq_logprob(&[1], &[a], Control::Bad).unwrap().exp();
            for b in 0..k {
                total += m.seq_logprob(&[1], &[a, b], Control::Bad).unwrap().exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-8, "{total}");
    }

    #[test]
    fn greedy_sample_follows_argmax() {
        let m = micro();
        let y = m.sample(&[0, 2], Control::None, 0.0, 1).unwrap();
        assert_eq!(y, m.sample(&[0, 2], Control::None, 0.0, 99).unwrap());
        let f = m.frame(&[0, 2], &y, Control::None).unwrap();
        let dists = m.response_dists(&f).unwrap();
        for (j, row) in dists.iter().enumerate() {
            let expect = if j < y.len() { y[j] as usize } else { m.vocab().k_ar };
            if j == m.vocab().cap(2) {
                break;
            }
            assert_eq!(argmax(row), expect);
        }
    }

    #[test]
    fn sampled_frequencies_match_softmax() {
        let m = micro();
        // First response token of a one-symbol text.
        let f = m.frame(&[2], &[], Control::None).unwrap();
        let p: Vec<f64> = m.response_dists(&f).unwrap()[0].iter().map(|l| l.exp()).collect();
        let mut counts = vec![0usize; 5];
        let n = 20_000;
        for s in 0..n {
            let y = m.sample(&[2], Control::None, 1.0, crate::rng::mix64(3, s)).unwrap();
            counts[y.first().map_or(4, |&t| t as usize)] += 1;
        }
        let tv: f64 = counts.iter().zip(&p).map(|(&c, q)| (c as f64 / n as f64 - q).abs()).sum::<f64>() / 2.0;
        assert!(tv < 0.02, "TV {tv}");
    }

    #[test]
    fn pooled_rep_is_span_mean() {
        let m = micro();
        let f = m.frame(&[1, 0], &[2], Control::None).unwrap();
        let h = m.hidden_states(&f).unwrap();
        let d = m.config().d_model;
        assert_eq!(m.pooled_rep(&[1, 0], &[2]).unwrap(), h[f.resp_start * d..(f.resp_start + 1) * d].to_vec());
        assert!(matches!(m.pooled_rep(&[1, 0], &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn constant_objective_has_zero_gradient_and_scales_linearly() {
        let m = micro();
        let q = vec![Query {
            framed: m.frame(&[1, 2], &[0, 1], Control::None).unwrap(),
            output: Output::TokenLogprobs,
        }];
        let (l, g) = m
            .loss_and_grad(&q, |o| (1.5, o.iter().map(|v| vec![0.0; v.len()]).collect()))
            .unwrap();
        assert_eq!(l, 1.5);
        assert!(g.iter().all(|&v| v == 0.0));
        let nll = |scale: f64| {
            m.loss_and_grad(&q, move |o| {
                let s: f64 = o[0].iter().sum();
                (-scale * s, vec![vec![-scale; o[0].len()]])
            })
            .unwrap()
        };
        let (l1, g1) = nll(1.0);
        let (l3, g3) = nll(3.0);
        assert!((l3 - 3.0 * l1).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = micro();
        m.inference_control = Control::Good;
        let c = m.checkpoint(ModelKind::Ar);
        let back = ArPolicy::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes()).unwrap(), ModelKind::Ar).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.inference_control, Control::Good);
        assert!(ArPolicy::from_checkpoint(&c, ModelKind::Reward).is_err());
    }
}
