//! The oracle codec world.
//!
//! A seeded stand-in for real speech plus a codec tokenizer. Text symbols
//! are rendered into `Q` layers of codec tokens: layer 1 is drawn from a
//! first-order Markov oracle conditioned on the current text symbol, the
//! previous layer-1 token and the speaker; layers `2..=Q` are speaker-specific
//! lookups of the layer-1 token with a small amount of uniform noise.
//!
//! Because the golden layer-1 distribution `p*` is an explicit table, exact
//! likelihoods, exact KL divergences and MAP transcriptions are all cheap.

use serde::{Deserialize, Serialize};

use crate::binio::{sha256_hex, Reader, Writer};
use crate::error::{Error, Result};
use crate::rng::{mix64, tag, Stream, RNG_VERSION};

pub type Token = u32;

/// Golden samples averaged into each speaker reference embedding.
pub const SPEAKER_REF_SAMPLES: usize = 512;

/// Log-probabilities below this are reported as `-inf`: the probability
/// is not representable as a normal `f64`.
pub const MIN_LOG_PROB: f64 = -690.7755278982137; // ln(1e-300)

const WORLD_MAGIC: &[u8; 4] = b"SALW";
const WORLD_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Text alphabet size.
    pub v_text: usize,
    /// Text length in symbols.
    pub l_text: usize,
    /// Layer-1 vocabulary size.
    pub k_ar: usize,
    /// Vocabulary size of every layer above the first.
    pub k_nar: usize,
    /// Total number of token layers.
    pub q: usize,
    /// Layer-1 tokens emitted per text symbol.
    pub r: usize,
    /// Number of speakers.
    pub speakers: usize,
    pub tau_oracle: f64,
    /// Probability that an expanded token is replaced by uniform noise.
    pub eps_nar: f64,
    /// Dimension of token signatures and speaker embeddings.
    pub d_emb: usize,
    /// Weight of the speaker-specific component of the oracle logits,
    /// relative to the component shared by all speakers.
    pub speaker_spread: f64,
    /// Size of each speaker's token palette on the upper layers.
    pub palette: usize,
    /// Lift of each row's anchor token above the row maximum, before
    /// tempering. Anchors differ across text symbols for a fixed previous
    /// token, which makes the oracle invertible as `tau_oracle -> 0`.
    pub anchor_margin: f64,
    pub world_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            v_text: 16,
            l_text: 12,
            k_ar: 32,
            k_nar: 32,
            q: 3,
            r: 2,
            speakers: 8,
            tau_oracle: 0.5,
            eps_nar: 0.05,
            d_emb: 16,
            speaker_spread: 0.5,
            palette: 8,
            anchor_margin: 2.0,
            world_seed: 0x5EED_0001,
        }
    }
}

impl WorldConfig {
    /// Length of a layer-1 sequence for a full-length text.
    pub fn l_ar(&self) -> usize {
        self.r * self.l_text
    }

    /// Vocabulary size of layer `layer` (0-based; 0 is the AR layer).
    pub fn layer_vocab(&self, layer: usize) -> usize {
        if layer == 0 {
            self.k_ar
        } else {
            self.k_nar
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_text < 1 {
            return Err(Error::config("l_text", "must be at least 1"));
        }
        let sizes = [
            ("v_text", self.v_text),
            ("k_ar", self.k_ar),
            ("k_nar", self.k_nar),
            ("q", self.q),
            ("r", self.r),
            ("speakers", self.speakers),
            ("d_emb", self.d_emb),
        ];
        for (name, v) in sizes {
            if v < 2 {
                return Err(Error::config(name, format!("must be at least 2, got {v}")));
            }
            // Keeps every table comfortably addressable.
            if v > 4096 {
                return Err(Error::config(name, format!("must be at most 4096, got {v}")));
            }
        }
        if !(self.tau_oracle > 0.0 && self.tau_oracle.is_finite()) {
            return Err(Error::config("tau_oracle", format!("must be positive, got {}", self.tau_oracle)));
        }
        if !(0.0..1.0).contains(&self.eps_nar) {
            return Err(Error::config("eps_nar", format!("must lie in [0, 1), got {}", self.eps_nar)));
        }
        if !(self.speaker_spread >= 0.0 && self.speaker_spread.is_finite()) {
            return Err(Error::config(
                "speaker_spread",
                format!("must be non-negative, got {}", self.speaker_spread),
            ));
        }
        if !(self.anchor_margin >= 0.0 && self.anchor_margin.is_finite()) {
            return Err(Error::config(
                "anchor_margin",
                format!("must be non-negative, got {}", self.anchor_margin),
            ));
        }
        if self.palette < 1 || self.palette > self.k_nar {
            return Err(Error::config(
                "palette",
                format!("must lie in [1, k_nar={}], got {}", self.k_nar, self.palette),
            ));
        }
        let cells = self.speakers * self.v_text * (self.k_ar + 1) * self.k_ar;
        if cells > 1 << 24 {
            return Err(Error::config("k_ar", format!("oracle table of {cells} cells is too large")));
        }
        Ok(())
    }
}

/// `Q` layers of codec tokens, all of the same length.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayeredTokens {
    pub layers: Vec<Vec<Token>>,
}

impl LayeredTokens {
    pub fn new(layers: Vec<Vec<Token>>) -> Result<Self> {
        if let Some(first) = layers.first() {
            if layers.iter().any(|l| l.len() != first.len()) {
                return Err(Error::Shape("layers have different lengths".into()));
            }
        }
        Ok(LayeredTokens { layers })
    }

    /// Stacks a layer-1 sequence on top of the upper layers.
    pub fn stack(layer1: Vec<Token>, upper: Vec<Vec<Token>>) -> Result<Self> {
        let mut layers = Vec::with_capacity(upper.len() + 1);
        layers.push(layer1);
        layers.extend(upper);
        LayeredTokens::new(layers)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Number of positions.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer1(&self) -> &[Token] {
        &self.layers[0]
    }

    /// Positions `[start, end)` of every layer.
    pub fn segment(&self, start: usize, end: usize) -> LayeredTokens {
        LayeredTokens {
            layers: self.layers.iter().map(|l| l[start..end].to_vec()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: usize,
    pub text: Vec<Token>,
    pub golden: LayeredTokens,
    pub sample_seed: u64,
}

/// The immutable oracle world. Construct with [`World::new`].
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    config: WorldConfig,
    /// `[speaker][symbol][prev (k_ar = start)][token]`, already divided by
    /// the oracle temperature.
    oracle_logits: Vec<f64>,
    /// Row-normalized log-probabilities of `oracle_logits`.
    log_probs: Vec<f64>,
    /// `[layer - 2][speaker][layer-1 token]`.
    nar_tables: Vec<Token>,
    /// Unit signatures, one table per layer, `[token][d_emb]`.
    token_sig: Vec<Vec<f64>>,
    /// Unit reference embedding per speaker, `[speaker][d_emb]`.
    speaker_ref: Vec<f64>,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let k = c.k_ar;

        let mut shared = Stream::derived(c.world_seed, tag::ORACLE_LOGITS);
        let shared_logits: Vec<f64> = (0..c.v_text * (k + 1) * k).map(|_| shared.normal()).collect();
        // anchor[prev][symbol]: a per-context permutation of the token space.
        let mut anchor_rng = Stream::derived(mix64(c.world_seed, tag::ORACLE_LOGITS), u64::MAX);
        let anchors: Vec<Vec<usize>> = (0..=k)
            .map(|_| {
                let mut perm: Vec<usize> = (0..k).collect();
                anchor_rng.shuffle(&mut perm);
                (0..c.v_text).map(|sym| perm[sym % k]).collect()
            })
            .collect();
        let norm = 1.0 / (1.0 + c.speaker_spread * c.speaker_spread).sqrt();
        let mut oracle_logits = Vec::with_capacity(c.speakers * shared_logits.len());
        for s in 0..c.speakers {
            let mut own = Stream::derived(mix64(c.world_seed, tag::ORACLE_LOGITS), s as u64);
            for (cell, zs) in shared_logits.chunks(k).enumerate() {
                let (sym, prev) = (cell / (k + 1), cell % (k + 1));
                let mut row: Vec<f64> = zs.iter().map(|&z| (z + c.speaker_spread * own.normal()) * norm).collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row[anchors[prev][sym]] = max + c.anchor_margin;
                oracle_logits.extend(row.iter().map(|v| v / c.tau_oracle));
            }
        }

        let mut tables = Stream::derived(c.world_seed, tag::NAR_TABLES);
        let mut nar_tables = Vec::with_capacity((c.q - 1) * c.speakers * k);
        for _layer in 1..c.q {
            for _s in 0..c.speakers {
                let palette = tables.sample_indices(c.k_nar, c.palette);
                for _t in 0..k {
                    nar_tables.push(palette[tables.below(palette.len())] as Token);
                }
            }
        }

        let mut sig = Stream::derived(c.world_seed, tag::TOKEN_SIG);
        let token_sig = (0..c.q)
            .map(|layer| {
                let mut table = Vec::with_capacity(c.layer_vocab(layer) * c.d_emb);
                for _ in 0..c.layer_vocab(layer) {
                    let v: Vec<f64> = (0..c.d_emb).map(|_| sig.normal()).collect();
                    let n = l2_norm(&v);
                    table.extend(v.iter().map(|x| x / n));
                }
                table
            })
            .collect();

        let log_probs = normalize_rows(&oracle_logits, k);
        let mut world = World {
            config,
            oracle_logits,
            log_probs,
            nar_tables,
            token_sig,
            speaker_ref: Vec::new(),
        };
        world.speaker_ref = world.compute_speaker_ref();
        Ok(world)
    }

    fn compute_speaker_ref(&self) -> Vec<f64> {
        let c = &self.config;
        let base = mix64(c.world_seed, tag::SPEAKER_REF);
        let mut out = Vec::with_capacity(c.speakers * c.d_emb);
        for s in 0..c.speakers {
            let mut acc = vec![0.0; c.d_emb];
            for m in 0..SPEAKER_REF_SAMPLES {
                let utt = self.sample_utterance(s, mix64(base, (s * SPEAKER_REF_SAMPLES + m) as u64));
                let e = self.speaker_embed(&utt.golden).expect("golden stacks are non-empty");
                for (a, v) in acc.iter_mut().zip(&e) {
                    *a += v;
                }
            }
            let n = l2_norm(&acc);
            out.extend(acc.iter().map(|x| x / n));
        }
        out
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    /// Raw tempered logits, `[speaker][symbol][prev][token]` flattened.
    pub fn oracle_logits(&self) -> &[f64] {
        &self.oracle_logits
    }

    fn row_index(&self, speaker: usize, symbol: Token, prev: Option<Token>) -> usize {
        let k = self.config.k_ar;
        let prev = prev.map_or(k, |p| p as usize);
        ((speaker * self.config.v_text + symbol as usize) * (k + 1) + prev) * k
    }

    /// `log p*(· | symbol, prev, speaker)` over the layer-1 vocabulary.
    /// `prev = None` is the start-of-sequence context.
    pub fn golden_row(&self, speaker: usize, symbol: Token, prev: Option<Token>) -> &[f64] {
        let i = self.row_index(speaker, symbol, prev);
        &self.log_probs[i..i + self.config.k_ar]
    }

    /// Entropy of one oracle row, in nats.
    pub fn row_entropy(&self, speaker: usize, symbol: Token, prev: Option<Token>) -> f64 {
        -self
            .golden_row(speaker, symbol, prev)
            .iter()
            .filter(|l| l.is_finite())
            .map(|&l| l.exp() * l)
            .sum::<f64>()
    }

    pub fn speaker_ref(&self, speaker: usize) -> &[f64] {
        let d = self.config.d_emb;
        &self.speaker_ref[speaker * d..(speaker + 1) * d]
    }

    /// Signature of `token` on layer `layer` (0-based).
    pub fn token_sig(&self, layer: usize, token: Token) -> &[f64] {
        let d = self.config.d_emb;
        let t = token as usize;
        &self.token_sig[layer][t * d..(t + 1) * d]
    }

    /// Deterministic expansion of a layer-1 token onto layer `layer` (0-based, ≥ 1).
    pub fn expansion(&self, layer: usize, speaker: usize, token: Token) -> Token {
        let c = &self.config;
        self.nar_tables[((layer - 1) * c.speakers + speaker) * c.k_ar + token as usize]
    }

    fn check_speaker(&self, speaker: usize) -> Result<()> {
        if speaker >= self.config.speakers {
            return Err(Error::Argument(format!(
                "speaker {speaker} out of range (world has {})",
                self.config.speakers
            )));
        }
        Ok(())
    }

    fn check_layer1(&self, y: &[Token]) -> Result<()> {
        if let Some(&t) = y.iter().find(|&&t| t as usize >= self.config.k_ar) {
            return Err(Error::Shape(format!("layer-1 token {t} outside vocabulary of {}", self.config.k_ar)));
        }
        Ok(())
    }

    fn check_text(&self, text: &[Token]) -> Result<()> {
        if let Some(&t) = text.iter().find(|&&t| t as usize >= self.config.v_text) {
            return Err(Error::Shape(format!("text symbol {t} outside alphabet of {}", self.config.v_text)));
        }
        Ok(())
    }

    /// Draws a random text and its golden rendering for `speaker`.
    ///
    /// Panics if `speaker` is out of range.
    pub fn sample_utterance(&self, speaker: usize, sample_seed: u64) -> Utterance {
        assert!(speaker < self.config.speakers, "speaker {speaker} out of range");
        let c = &self.config;
        let mut text_rng = Stream::derived(sample_seed, tag::UTT_TEXT);
        let text: Vec<Token> = (0..c.l_text).map(|_| text_rng.below(c.v_text) as Token).collect();
        let layer1 = self.sample_layer1(speaker, &text, mix64(sample_seed, tag::UTT_LAYER1));
        let golden = self.nar_expand(speaker, &layer1, mix64(sample_seed, tag::UTT_NAR));
        Utterance {
            speaker,
            text,
            golden,
            sample_seed,
        }
    }

    /// Golden layer-1 rendering of a given text.
    pub fn sample_layer1(&self, speaker: usize, text: &[Token], seed: u64) -> Vec<Token> {
        let mut rng = Stream::new(seed);
        let mut prev = None;
        let mut y = Vec::with_capacity(text.len() * self.config.r);
        let mut weights = vec![0.0; self.config.k_ar];
        for &sym in text {
            for _ in 0..self.config.r {
                for (w, l) in weights.iter_mut().zip(self.golden_row(speaker, sym, prev)) {
                    *w = l.exp();
                }
                let t = rng.categorical(&weights) as Token;
                y.push(t);
                prev = Some(t);
            }
        }
        y
    }

    /// `Σ_i log p*(y_i | x, y_{i-1}, s)`; `-inf` if any token is impossible.
    pub fn golden_logprob(&self, speaker: usize, text: &[Token], y: &[Token]) -> Result<f64> {
        self.check_speaker(speaker)?;
        self.check_text(text)?;
        self.check_layer1(y)?;
        if y.len() != text.len() * self.config.r {
            return Err(Error::Shape(format!(
                "layer-1 length {} does not match {} text symbols at ratio {}",
                y.len(),
                text.len(),
                self.config.r
            )));
        }
        let mut total = 0.0;
        let mut prev = None;
        for (i, &t) in y.iter().enumerate() {
            let sym = text[i / self.config.r];
            total += self.golden_row(speaker, sym, prev)[t as usize];
            prev = Some(t);
        }
        Ok(total)
    }

    /// Renders upper layers from layer 1: table lookup, with each token
    /// replaced by a uniform draw with probability `eps_nar`.
    ///
    /// Panics on an out-of-range speaker or token.
    pub fn nar_expand(&self, speaker: usize, layer1: &[Token], noise_seed: u64) -> LayeredTokens {
        let c = &self.config;
        let mut rng = Stream::new(noise_seed);
        let mut layers = Vec::with_capacity(c.q);
        layers.push(layer1.to_vec());
        for layer in 1..c.q {
            let row = layer1
                .iter()
                .map(|&t| {
                    let noisy = rng.uniform() < c.eps_nar;
                    let random = rng.below(c.k_nar) as Token;
                    if noisy {
                        random
                    } else {
                        self.expansion(layer, speaker, t)
                    }
                })
                .collect();
            layers.push(row);
        }
        LayeredTokens { layers }
    }

    /// MAP transcription of a layer-1 sequence: each block of `r` tokens is
    /// read as the text symbol maximizing its oracle likelihood given the
    /// realized previous token. Ties go to the lowest symbol.
    pub fn transcribe(&self, speaker: usize, layer1: &[Token]) -> Result<Vec<Token>> {
        self.check_speaker(speaker)?;
        self.check_layer1(layer1)?;
        let r = self.config.r;
        if layer1.len() % r != 0 {
            return Err(Error::Shape(format!(
                "layer-1 length {} is not a multiple of the expansion ratio {r}",
                layer1.len()
            )));
        }
        let mut out = Vec::with_capacity(layer1.len() / r);
        for (b, block) in layer1.chunks(r).enumerate() {
            let mut best = 0;
            let mut best_ll = f64::NEG_INFINITY;
            for sym in 0..self.config.v_text as Token {
                let mut prev = if b == 0 { None } else { Some(layer1[b * r - 1]) };
                let mut ll = 0.0;
                for &t in block {
                    ll += self.golden_row(speaker, sym, prev)[t as usize];
                    prev = Some(t);
                }
                if ll > best_ll {
                    best_ll = ll;
                    best = sym;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    /// Transcribes the longest prefix whose length is a multiple of `r`.
    pub fn transcribe_prefix(&self, speaker: usize, layer1: &[Token]) -> Result<Vec<Token>> {
        let n = layer1.len() - layer1.len() % self.config.r;
        self.transcribe(speaker, &layer1[..n])
    }

    /// Mean token signature over every (layer, position), L2-normalized.
    pub fn speaker_embed(&self, tokens: &LayeredTokens) -> Result<Vec<f64>> {
        if tokens.is_empty() || tokens.num_layers() == 0 {
            return Err(Error::Shape("cannot embed an empty token stack".into()));
        }
        if tokens.num_layers() > self.config.q {
            return Err(Error::Shape(format!(
                "{} layers exceed the world's {}",
                tokens.num_layers(),
                self.config.q
            )));
        }
        let mut acc = vec![0.0; self.config.d_emb];
        for (layer, row) in tokens.layers.iter().enumerate() {
            let vocab = self.config.layer_vocab(layer);
            for &t in row {
                if t as usize >= vocab {
                    return Err(Error::Shape(format!("token {t} outside layer {} vocabulary", layer + 1)));
                }
                for (a, v) in acc.iter_mut().zip(self.token_sig(layer, t)) {
                    *a += v;
                }
            }
        }
        let n = l2_norm(&acc);
        if n == 0.0 {
            return Err(Error::Numeric("token signatures cancel to a zero embedding".into()));
        }
        Ok(acc.iter().map(|x| x / n).collect())
    }

    /// SHA-256 of the serialized world.
    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new();
        w.bytes(WORLD_MAGIC);
        w.u32(WORLD_VERSION);
        w.u32(RNG_VERSION);
        for v in [c.v_text, c.l_text, c.k_ar, c.k_nar, c.q, c.r, c.speakers, c.d_emb, c.palette] {
            w.u64(v as u64);
        }
        w.f64(c.tau_oracle);
        w.f64(c.eps_nar);
        w.f64(c.speaker_spread);
        w.f64(c.anchor_margin);
        w.u64(c.world_seed);
        w.f64s(&self.oracle_logits);
        let tables: Vec<f64> = self.nar_tables.iter().map(|&t| t as f64).collect();
        w.f64s(&tables);
        for table in &self.token_sig {
            w.f64s(table);
        }
        w.f64s(&self.speaker_ref);
        w.buf
    }

    /// Decodes a world file. Every field is validated; malformed input is
    /// an error, never a panic.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != WORLD_MAGIC {
            return Err(Error::Format("not a world file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != WORLD_VERSION {
            return Err(Error::Format(format!("unsupported world version {version}")));
        }
        let rng_version = r.u32()?;
        if rng_version != RNG_VERSION {
            return Err(Error::Format(format!("world written with generator version {rng_version}")));
        }
        let mut sizes = [0usize; 9];
        for s in sizes.iter_mut() {
            *s = r.count(4096, "config size")?;
        }
        let [v_text, l_text, k_ar, k_nar, q, rr, speakers, d_emb, palette] = sizes;
        let config = WorldConfig {
            v_text,
            l_text,
            k_ar,
            k_nar,
            q,
            r: rr,
            speakers,
            d_emb,
            palette,
            tau_oracle: r.f64()?,
            eps_nar: r.f64()?,
            speaker_spread: r.f64()?,
            anchor_margin: r.f64()?,
            world_seed: r.u64()?,
        };
        config.validate().map_err(|e| Error::Format(format!("world config: {e}")))?;
        let oracle_logits = r.f64s_exact(speakers * v_text * (k_ar + 1) * k_ar, "oracle_logits")?;
        if oracle_logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Format("oracle_logits contain NaN or +inf".into()));
        }
        let raw_tables = r.f64s_exact((q - 1) * speakers * k_ar, "nar_tables")?;
        let mut nar_tables = Vec::with_capacity(raw_tables.len());
        for v in raw_tables {
            if !(v >= 0.0 && v < k_nar as f64 && v.fract() == 0.0) {
                return Err(Error::Format(format!("nar table entry {v} is not a token id")));
            }
            nar_tables.push(v as Token);
        }
        let mut token_sig = Vec::with_capacity(q);
        for layer in 0..q {
            let t = r.f64s_exact(config.layer_vocab(layer) * d_emb, "token_sig")?;
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format("token signatures must be finite".into()));
            }
            token_sig.push(t);
        }
        let speaker_ref = r.f64s_exact(speakers * d_emb, "speaker_ref")?;
        if speaker_ref.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("speaker references must be finite".into()));
        }
        r.finish()?;
        let log_probs = normalize_rows(&oracle_logits, k_ar);
        Ok(World {
            config,
            oracle_logits,
            log_probs,
            nar_tables,
            token_sig,
            speaker_ref,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        World::from_bytes(&bytes)
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (l2_norm(a) * l2_norm(b))
}

/// Log-softmax of each `width`-wide row; entries below [`MIN_LOG_PROB`]
/// become `-inf`.
fn normalize_rows(logits: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(width) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| {
            let l = v - lse;
            if l < MIN_LOG_PROB {
                f64::NEG_INFINITY
            } else {
                l
            }
        }));
    }
    out
}
