//! A small pre-norm transformer with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat `f64` buffer described by a [`ParamLayout`];
//! each model registers the tensors it needs and keeps the returned ranges.
//! The [`Body`] is the stack of attention/FFN blocks plus the final norm; the
//! models in [`crate::ar`] and [`crate::nar`] own their embeddings and heads.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::rng::Stream;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Named tensors packed into one flat parameter vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<TensorEntry>,
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Range<usize> {
        let entry = TensorEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.len,
            init,
        };
        self.len += entry.numel();
        let r = entry.range();
        self.entries.push(entry);
        r
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Fresh parameters: `N(0, std²)` weights, unit norm gains, zero biases.
    pub fn init(&self, seed: u64, std: f64) -> Vec<f64> {
        let mut rng = Stream::new(seed);
        let mut out = vec![0.0; self.len];
        for e in &self.entries {
            let slot = &mut out[e.range()];
            match e.init {
                Init::Normal => slot.iter_mut().for_each(|v| *v = std * rng.normal()),
                Init::Zeros => {}
                Init::Ones => slot.iter_mut().for_each(|v| *v = 1.0),
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// GEMM on strided row-major views.

#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    off: usize,
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    fn rm(data: &'a [f64], cols: usize) -> Self {
        View { data, off: 0, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    fn rm_t(data: &'a [f64], cols: usize) -> Self {
        View { data, off: 0, rs: 1, cs: cols }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.off + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, `c` row-major with row
/// stride `ldc` starting at `c_off`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: View, b: View, beta: f64, c: &mut [f64], c_off: usize, ldc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!(c_off + (m - 1) * ldc + n <= c.len(), "output view out of bounds");
    // SAFETY: every index touched by dgemm lies inside the slices, as
    // checked above; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            ldc as isize,
            1,
        );
    }
}

/// `c = a · b` (or `c += a · b` when `acc`), all row-major.
pub(crate) fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, acc: bool) {
    gemm(m, k, n, 1.0, View::rm(a, k), View::rm(b, n), if acc { 1.0 } else { 0.0 }, c, 0, n);
}

/// `c (+)= aᵀ · b` where `a` is stored `k×m`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, acc: bool) {
    gemm(m, k, n, 1.0, View::rm_t(a, m), View::rm(b, n), if acc { 1.0 } else { 0.0 }, c, 0, n);
}

/// `c (+)= a · bᵀ` where `b` is stored `n×k`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, acc: bool) {
    gemm(m, k, n, 1.0, View::rm(a, k), View::rm_t(b, k), if acc { 1.0 } else { 0.0 }, c, 0, n);
}

// ---------------------------------------------------------------------------
// Elementwise pieces.

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

#[derive(Clone, Debug, Default)]
struct LnTrace {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64], out: &mut [f64]) -> LnTrace {
    let n = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gain[j] + bias[j];
        }
    }
    LnTrace { xhat, rstd }
}

/// Accumulates into `dx`, `dgain`, `dbias`.
fn layer_norm_backward(dy: &[f64], t: &LnTrace, d: usize, gain: &[f64], dx: &mut [f64], dgain: &mut [f64], dbias: &mut [f64]) {
    let n = dy.len() / d;
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &t.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            dx[i * d + j] += t.rstd[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn col_sum_into(x: &[f64], cols: usize, out: &mut [f64]) {
    for row in x.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

// ---------------------------------------------------------------------------
// Transformer body.

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_layers: usize,
}

#[derive(Clone, Debug)]
struct LayerSlots {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    w_qkv: Range<usize>,
    w_o: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    w_ff1: Range<usize>,
    b_ff1: Range<usize>,
    w_ff2: Range<usize>,
    b_ff2: Range<usize>,
}

/// The attention/FFN stack and final layer norm.
#[derive(Clone, Debug)]
pub struct Body {
    dims: BodyDims,
    causal: bool,
    layers: Vec<LayerSlots>,
    lnf_g: Range<usize>,
    lnf_b: Range<usize>,
}

#[derive(Clone, Debug, Default)]
struct LayerTrace {
    ln1: LnTrace,
    a: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2: LnTrace,
    c: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BodyTrace {
    n: usize,
    layers: Vec<LayerTrace>,
    lnf: LnTrace,
    /// Final normalized hidden states, `n × d_model`.
    pub out: Vec<f64>,
}

/// Keys and values of already-processed positions, for incremental decoding.
#[derive(Clone, Debug)]
pub struct KvCache {
    len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Body {
    pub fn register(layout: &mut ParamLayout, prefix: &str, dims: BodyDims, causal: bool) -> Body {
        let d = dims.d_model;
        let f = dims.d_ffn;
        let layers = (0..dims.n_layers)
            .map(|l| {
                let p = |s: &str| format!("{prefix}.h{l}.{s}");
                LayerSlots {
                    ln1_g: layout.add(p("ln1.g"), &[d], Init::Ones),
                    ln1_b: layout.add(p("ln1.b"), &[d], Init::Zeros),
                    w_qkv: layout.add(p("attn.w_qkv"), &[d, 3 * d], Init::Normal),
                    w_o: layout.add(p("attn.w_o"), &[d, d], Init::Normal),
                    ln2_g: layout.add(p("ln2.g"), &[d], Init::Ones),
                    ln2_b: layout.add(p("ln2.b"), &[d], Init::Zeros),
                    w_ff1: layout.add(p("ffn.w1"), &[d, f], Init::Normal),
                    b_ff1: layout.add(p("ffn.b1"), &[f], Init::Zeros),
                    w_ff2: layout.add(p("ffn.w2"), &[f, d], Init::Normal),
                    b_ff2: layout.add(p("ffn.b2"), &[d], Init::Zeros),
                }
            })
            .collect();
        Body {
            dims,
            causal,
            layers,
            lnf_g: layout.add(format!("{prefix}.lnf.g"), &[d], Init::Ones),
            lnf_b: layout.add(format!("{prefix}.lnf.b"), &[d], Init::Zeros),
        }
    }

    pub fn dims(&self) -> BodyDims {
        self.dims
    }

    /// Runs the stack on input embeddings `x` (`n × d_model`).
    pub fn forward(&self, p: &[f64], mut x: Vec<f64>) -> BodyTrace {
        let d = self.dims.d_model;
        let f = self.dims.d_ffn;
        let h = self.dims.n_heads;
        let dh = d / h;
        let n = x.len() / d;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut traces = Vec::with_capacity(self.layers.len());
        for ls in &self.layers {
            let mut t = LayerTrace {
                a: vec![0.0; n * d],
                ..Default::default()
            };
            t.ln1 = layer_norm(&x, d, &p[ls.ln1_g.clone()], &p[ls.ln1_b.clone()], &mut t.a);
            t.qkv = vec![0.0; n * 3 * d];
            matmul(&t.a, &p[ls.w_qkv.clone()], &mut t.qkv, n, d, 3 * d, false);

            t.probs = vec![0.0; h * n * n];
            t.attn = vec![0.0; n * d];
            for head in 0..h {
                let probs = &mut t.probs[head * n * n..(head + 1) * n * n];
                // scores = Q_h K_hᵀ
                let q = View { data: &t.qkv, off: head * dh, rs: 3 * d, cs: 1 };
                let k_t = View { data: &t.qkv, off: d + head * dh, rs: 1, cs: 3 * d };
                gemm(n, dh, n, scale, q, k_t, 0.0, probs, 0, n);
                for i in 0..n {
                    let row = &mut probs[i * n..(i + 1) * n];
                    let lim = if self.causal { i + 1 } else { n };
                    let max = row[..lim].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row[..lim].iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row[..lim].iter_mut() {
                        *v /= sum;
                    }
                    row[lim..].iter_mut().for_each(|v| *v = 0.0);
                }
                let v = View { data: &t.qkv, off: 2 * d + head * dh, rs: 3 * d, cs: 1 };
                gemm(n, n, dh, 1.0, View::rm(probs, n), v, 0.0, &mut t.attn, head * dh, d);
            }
            matmul(&t.attn, &p[ls.w_o.clone()], &mut x, n, d, d, true);

            t.c = vec![0.0; n * d];
            t.ln2 = layer_norm(&x, d, &p[ls.ln2_g.clone()], &p[ls.ln2_b.clone()], &mut t.c);
            t.u = vec![0.0; n * f];
            matmul(&t.c, &p[ls.w_ff1.clone()], &mut t.u, n, d, f, false);
            add_bias(&mut t.u, &p[ls.b_ff1.clone()]);
            t.g = t.u.iter().map(|&u| gelu(u)).collect();
            matmul(&t.g, &p[ls.w_ff2.clone()], &mut x, n, f, d, true);
            add_bias(&mut x, &p[ls.b_ff2.clone()]);
            traces.push(t);
        }
        let mut out = vec![0.0; n * d];
        let lnf = layer_norm(&x, d, &p[self.lnf_g.clone()], &p[self.lnf_b.clone()], &mut out);
        BodyTrace {
            n,
            layers: traces,
            lnf,
            out,
        }
    }

    /// Backpropagates `d_out` (gradient w.r.t. [`BodyTrace::out`]),
    /// accumulating parameter gradients into `grad`. Returns the gradient
    /// w.r.t. the input embeddings.
    pub fn backward(&self, p: &[f64], trace: &BodyTrace, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let d = self.dims.d_model;
        let f = self.dims.d_ffn;
        let h = self.dims.n_heads;
        let dh = d / h;
        let n = trace.n;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dx = vec![0.0; n * d];
        {
            let (dg, db) = two_slices(grad, &self.lnf_g, &self.lnf_b);
            layer_norm_backward(d_out, &trace.lnf, d, &p[self.lnf_g.clone()], &mut dx, dg, db);
        }

        for (ls, t) in self.layers.iter().zip(&trace.layers).rev() {
            // FFN: x_out = x_mid + gelu(c W1 + b1) W2 + b2
            matmul_tn(&t.g, &dx, &mut grad[ls.w_ff2.clone()], f, n, d, true);
            col_sum_into(&dx, d, &mut grad[ls.b_ff2.clone()]);
            let mut du = vec![0.0; n * f];
            matmul_nt(&dx, &p[ls.w_ff2.clone()], &mut du, n, d, f, false);
            for (g, &u) in du.iter_mut().zip(&t.u) {
                *g *= gelu_grad(u);
            }
            matmul_tn(&t.c, &du, &mut grad[ls.w_ff1.clone()], d, n, f, true);
            col_sum_into(&du, f, &mut grad[ls.b_ff1.clone()]);
            let mut dc = vec![0.0; n * d];
            matmul_nt(&du, &p[ls.w_ff1.clone()], &mut dc, n, f, d, false);
            {
                let (dg, db) = two_slices(grad, &ls.ln2_g, &ls.ln2_b);
                layer_norm_backward(&dc, &t.ln2, d, &p[ls.ln2_g.clone()], &mut dx, dg, db);
            }

            // Attention: x_mid = x_in + attn W_o
            matmul_tn(&t.attn, &dx, &mut grad[ls.w_o.clone()], d, n, d, true);
            let mut d_attn = vec![0.0; n * d];
            matmul_nt(&dx, &p[ls.w_o.clone()], &mut d_attn, n, d, d, false);

            let mut d_qkv = vec![0.0; n * 3 * d];
            let mut dp = vec![0.0; n * n];
            for head in 0..h {
                let probs = &t.probs[head * n * n..(head + 1) * n * n];
                // dP = dO Vᵀ
                let d_o = View { data: &d_attn, off: head * dh, rs: d, cs: 1 };
                let v_t = View { data: &t.qkv, off: 2 * d + head * dh, rs: 1, cs: 3 * d };
                gemm(n, dh, n, 1.0, d_o, v_t, 0.0, &mut dp, 0, n);
                // dV = Pᵀ dO
                gemm(n, n, dh, 1.0, View::rm_t(probs, n), d_o, 1.0, &mut d_qkv, 2 * d + head * dh, 3 * d);
                // dS = P ⊙ (dP - rowsum(dP ⊙ P)), scaled
                for i in 0..n {
                    let pr = &probs[i * n..(i + 1) * n];
                    let row = &mut dp[i * n..(i + 1) * n];
                    let dot: f64 = pr.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                    for (g, &pv) in row.iter_mut().zip(pr) {
                        *g = pv * (*g - dot) * scale;
                    }
                }
                // dQ = dS K ; dK = dSᵀ Q
                let k = View { data: &t.qkv, off: d + head * dh, rs: 3 * d, cs: 1 };
                gemm(n, n, dh, 1.0, View::rm(&dp, n), k, 1.0, &mut d_qkv, head * dh, 3 * d);
                let q = View { data: &t.qkv, off: head * dh, rs: 3 * d, cs: 1 };
                gemm(n, n, dh, 1.0, View::rm_t(&dp, n), q, 1.0, &mut d_qkv, d + head * dh, 3 * d);
            }
            matmul_tn(&t.a, &d_qkv, &mut grad[ls.w_qkv.clone()], d, n, 3 * d, true);
            let mut da = vec![0.0; n * d];
            matmul_nt(&d_qkv, &p[ls.w_qkv.clone()], &mut da, n, 3 * d, d, false);
            {
                let (dg, db) = two_slices(grad, &ls.ln1_g, &ls.ln1_b);
                layer_norm_backward(&da, &t.ln1, d, &p[ls.ln1_g.clone()], &mut dx, dg, db);
            }
        }
        dx
    }

    pub fn new_cache(&self, capacity: usize) -> KvCache {
        let d = self.dims.d_model;
        KvCache {
            len: 0,
            keys: vec![Vec::with_capacity(capacity * d); self.layers.len()],
            values: vec![Vec::with_capacity(capacity * d); self.layers.len()],
        }
    }

    /// Processes one new position of a causal body given the cached
    /// prefix. Returns the final normalized hidden state of that position.
    pub fn decode_step(&self, p: &[f64], cache: &mut KvCache, x_in: &[f64]) -> Vec<f64> {
        assert!(self.causal, "incremental decoding needs a causal body");
        let d = self.dims.d_model;
        let f = self.dims.d_ffn;
        let h = self.dims.n_heads;
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = x_in.to_vec();
        let mut a = vec![0.0; d];
        let mut qkv = vec![0.0; 3 * d];
        let mut attn = vec![0.0; d];
        let mut u = vec![0.0; f];
        let t_len = cache.len + 1;
        let mut scores = vec![0.0; t_len];
        for (l, ls) in self.layers.iter().enumerate() {
            layer_norm(&x, d, &p[ls.ln1_g.clone()], &p[ls.ln1_b.clone()], &mut a);
            matmul(&a, &p[ls.w_qkv.clone()], &mut qkv, 1, d, 3 * d, false);
            cache.keys[l].extend_from_slice(&qkv[d..2 * d]);
            cache.values[l].extend_from_slice(&qkv[2 * d..]);
            let keys = &cache.keys[l];
            let values = &cache.values[l];
            for head in 0..h {
                let q = &qkv[head * dh..(head + 1) * dh];
                for (t, s) in scores.iter_mut().enumerate() {
                    let k = &keys[t * d + head * dh..t * d + (head + 1) * dh];
                    *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let o = &mut attn[head * dh..(head + 1) * dh];
                o.iter_mut().for_each(|v| *v = 0.0);
                for (t, s) in scores.iter().enumerate() {
                    let w = s / sum;
                    let v = &values[t * d + head * dh..t * d + (head + 1) * dh];
                    for (oj, vj) in o.iter_mut().zip(v) {
                        *oj += w * vj;
                    }
                }
            }
            matmul(&attn, &p[ls.w_o.clone()], &mut x, 1, d, d, true);
            layer_norm(&x, d, &p[ls.ln2_g.clone()], &p[ls.ln2_b.clone()], &mut a);
            matmul(&a, &p[ls.w_ff1.clone()], &mut u, 1, d, f, false);
            add_bias(&mut u, &p[ls.b_ff1.clone()]);
            for v in u.iter_mut() {
                *v = gelu(*v);
            }
            matmul(&u, &p[ls.w_ff2.clone()], &mut x, 1, f, d, true);
            add_bias(&mut x, &p[ls.b_ff2.clone()]);
        }
        cache.len = t_len;
        let mut out = vec![0.0; d];
        layer_norm(&x, d, &p[self.lnf_g.clone()], &p[self.lnf_b.clone()], &mut out);
        out
    }
}

/// Two disjoint mutable sub-slices; `a` must precede `b`.
fn two_slices<'a>(buf: &'a mut [f64], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

/// Numerically stable `log(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log σ(z)`, stable for large |z|.
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

/// `log(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(causal: bool) -> (Body, Vec<f64>) {
        let mut layout = ParamLayout::new();
        let dims = BodyDims {
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
            n_layers: 2,
        };
        let b = Body::register(&mut layout, "body", dims, causal);
        let mut p = layout.init(3, 0.3);
        // Perturb norm parameters away from their identity init.
        let mut rng = Stream::new(4);
        for e in layout.entries() {
            if e.init != Init::Normal {
                for v in &mut p[e.range()] {
                    *v += 0.2 * rng.normal();
                }
            }
        }
        (b, p)
    }

    fn input(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = Stream::new(seed);
        (0..n * d).map(|_| rng.normal()).collect()
    }

    /// Scalar objective `Σ w ⊙ out` with fixed random weights.
    fn objective(b: &Body, p: &[f64], x: &[f64], w: &[f64]) -> f64 {
        b.forward(p, x.to_vec()).out.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let a = input(3, 4, 1);
        let b = input(4, 5, 2);
        let mut c = vec![0.0; 15];
        matmul(&a, &b, &mut c, 3, 4, 5, false);
        for i in 0..3 {
            for j in 0..5 {
                let s: f64 = (0..4).map(|k| a[i * 4 + k] * b[k * 5 + j]).sum();
                assert!((c[i * 5 + j] - s).abs() < 1e-12);
            }
        }
        // aᵀ with a stored 4×3
        let at: Vec<f64> = (0..4).flat_map(|k| (0..3).map(move |i| (k, i))).map(|(k, i)| a[i * 4 + k]).collect();
        let mut c2 = vec![0.0; 15];
        matmul_tn(&at, &b, &mut c2, 3, 4, 5, false);
        let bt: Vec<f64> = (0..5).flat_map(|j| (0..4).map(move |k| (j, k))).map(|(j, k)| b[k * 5 + j]).collect();
        let mut c3 = vec![0.0; 15];
        matmul_nt(&a, &bt, &mut c3, 3, 4, 5, false);
        for i in 0..15 {
            assert!((c[i] - c2[i]).abs() < 1e-12 && (c[i] - c3[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn body_gradients_match_finite_differences() {
        for causal in [true, false] {
            let (b, p) = body(causal);
            let n = 5;
            let x = input(n, 8, 7);
            let w = input(n, 8, 8);
            let trace = b.forward(&p, x.clone());
            let mut grad = vec![0.0; p.len()];
            let dx = b.backward(&p, &trace, &w, &mut grad);
            let h = 1e-5;
            for i in (0..p.len()).step_by(7) {
                let mut pp = p.clone();
                pp[i] += h;
                let up = objective(&b, &pp, &x, &w);
                pp[i] -= 2.0 * h;
                let down = objective(&b, &pp, &x, &w);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {}", grad[i]);
            }
            for i in 0..x.len() {
                let mut xx = x.clone();
                xx[i] += h;
                let up = objective(&b, &p, &xx, &w);
                xx[i] -= 2.0 * h;
                let down = objective(&b, &p, &xx, &w);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - dx[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "input {i}: fd {fd} vs {}", dx[i]);
            }
        }
    }

    #[test]
    fn causal_prefix_is_bitwise_stable() {
        let (b, p) = body(true);
        let x = input(6, 8, 9);
        let mut y = x.clone();
        for v in &mut y[4 * 8..] {
            *v += 1.0;
        }
        let a = b.forward(&p, x).out;
        let c = b.forward(&p, y).out;
        assert_eq!(a[..4 * 8], c[..4 * 8]);
        assert_ne!(a[4 * 8..], c[4 * 8..]);
    }

    #[test]
    fn decode_steps_match_full_forward() {
        let (b, p) = body(true);
        let n = 6;
        let x = input(n, 8, 10);
        let full = b.forward(&p, x.clone()).out;
        let mut cache = b.new_cache(n);
        for i in 0..n {
            let out = b.decode_step(&p, &mut cache, &x[i * 8..(i + 1) * 8]);
            for j in 0..8 {
                assert!((out[j] - full[i * 8 + j]).abs() < 1e-12);
            }
        }
        assert_eq!(cache.len(), n);
    }

    #[test]
    fn stable_scalar_helpers() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(-50.0) < 1e-20 && softplus(-50.0) > 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }
}
