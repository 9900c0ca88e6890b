//! A small pre-LN transformer over frames, with hand-written backward pass.
//!
//! Each frame is one token: `x_t W_in + b_in + pos_t + phi(k_t) W_lvl + act(a_t)`,
//! where `phi_j(k) = cos(pi j k)` are fixed level features. Attention is
//! full (non-causal) across frames so history frames can inform generated
//! ones. The head predicts `v`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{DenoiserOutput, NoiseLevelVector, SequenceBatch};
use crate::error::{Error, Result};
use crate::model::{check_inputs, Denoiser};
use crate::param::Parameterization;
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyDenoiserConfig {
    pub frame_dim: usize,
    pub max_frames: usize,
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "defaults::num_heads")]
    pub num_heads: usize,
    #[serde(default = "defaults::num_blocks")]
    pub num_blocks: usize,
    #[serde(default = "defaults::mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "defaults::level_features")]
    pub level_features: usize,
    #[serde(default)]
    pub action_vocab: Option<usize>,
    /// Zero-initialize the output head so a fresh model predicts `v = 0`.
    #[serde(default = "defaults::zero_head")]
    pub zero_head: bool,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn embed_dim() -> usize {
        32
    }
    pub fn num_heads() -> usize {
        4
    }
    pub fn num_blocks() -> usize {
        2
    }
    pub fn mlp_ratio() -> usize {
        4
    }
    pub fn level_features() -> usize {
        16
    }
    pub fn zero_head() -> bool {
        true
    }
}

impl TinyDenoiserConfig {
    pub fn new(frame_dim: usize, max_frames: usize) -> Self {
        Self {
            frame_dim,
            max_frames,
            embed_dim: defaults::embed_dim(),
            num_heads: defaults::num_heads(),
            num_blocks: defaults::num_blocks(),
            mlp_ratio: defaults::mlp_ratio(),
            level_features: defaults::level_features(),
            action_vocab: None,
            zero_head: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frame_dim", self.frame_dim),
            ("max_frames", self.max_frames),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_blocks", self.num_blocks),
            ("mlp_ratio", self.mlp_ratio),
            ("level_features", self.level_features),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct BlockOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    w_in: usize,
    b_in: usize,
    pos: usize,
    lvl: usize,
    act: Option<usize>,
    blocks: Vec<BlockOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    b_out: usize,
}

fn build_layout(cfg: &TinyDenoiserConfig) -> (Vec<ParamEntry>, Offsets) {
    let mut entries = Vec::new();
    let mut next = 0usize;
    let mut add = |name: String, shape: Vec<usize>| -> usize {
        let off = next;
        next += shape.iter().product::<usize>();
        entries.push(ParamEntry { name, shape, offset: off });
        off
    };
    let (d, e, f) = (cfg.frame_dim, cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio);
    let w_in = add("embed.w_in".into(), vec![d, e]);
    let b_in = add("embed.b_in".into(), vec![e]);
    let pos = add("embed.pos".into(), vec![cfg.max_frames, e]);
    let lvl = add("embed.level".into(), vec![cfg.level_features, e]);
    let act = cfg.action_vocab.map(|v| add("embed.action".into(), vec![v + 1, e]));
    let blocks = (0..cfg.num_blocks)
        .map(|i| {
            let p = |s: &str| format!("block{i}.{s}");
            BlockOffsets {
                ln1_g: add(p("ln1.g"), vec![e]),
                ln1_b: add(p("ln1.b"), vec![e]),
                wq: add(p("attn.wq"), vec![e, e]),
                bq: add(p("attn.bq"), vec![e]),
                wk: add(p("attn.wk"), vec![e, e]),
                bk: add(p("attn.bk"), vec![e]),
                wv: add(p("attn.wv"), vec![e, e]),
                bv: add(p("attn.bv"), vec![e]),
                wo: add(p("attn.wo"), vec![e, e]),
                bo: add(p("attn.bo"), vec![e]),
                ln2_g: add(p("ln2.g"), vec![e]),
                ln2_b: add(p("ln2.b"), vec![e]),
                w1: add(p("mlp.w1"), vec![e, f]),
                b1: add(p("mlp.b1"), vec![f]),
                w2: add(p("mlp.w2"), vec![f, e]),
                b2: add(p("mlp.b2"), vec![e]),
            }
        })
        .collect();
    let lnf_g = add("final.ln.g".into(), vec![e]);
    let lnf_b = add("final.ln.b".into(), vec![e]);
    let w_out = add("head.w".into(), vec![e, d]);
    let b_out = add("head.b".into(), vec![d]);
    (
        entries,
        Offsets {
            w_in,
            b_in,
            pos,
            lvl,
            act,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
        },
    )
}

#[derive(Debug, Clone)]
pub struct TinyDenoiser<S> {
    cfg: TinyDenoiserConfig,
    layout: Vec<ParamEntry>,
    off: Offsets,
    params: Vec<S>,
}

/// Activations saved by the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    batch: usize,
    frames: usize,
    x: Vec<S>,
    phi: Vec<S>,
    actions: Option<Vec<usize>>,
    blocks: Vec<BlockCache<S>>,
    lnf: LnCache<S>,
    lnf_out: Vec<S>,
}

#[derive(Debug, Clone)]
struct LnCache<S> {
    xhat: Vec<S>,
    rstd: Vec<S>,
}

#[derive(Debug, Clone)]
struct BlockCache<S> {
    ln1: LnCache<S>,
    ln1_out: Vec<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    probs: Vec<S>,
    att: Vec<S>,
    ln2: LnCache<S>,
    ln2_out: Vec<S>,
    u: Vec<S>,
    g: Vec<S>,
}

// ---- dense kernels (row-major) ----

/// `x[n×i] · w[i×o] + b`.
fn linear<S: Scalar>(x: &[S], n: usize, i: usize, w: &[S], b: &[S], o: usize) -> Vec<S> {
    let mut y = Vec::with_capacity(n * o);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    S::gemm(n, i, o, S::one(), x, false, w, false, S::one(), &mut y);
    y
}

/// Accumulates `dw += x^T dy`, `db += colsum(dy)` and returns `dx = dy w^T`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<S: Scalar>(
    x: &[S],
    dy: &[S],
    n: usize,
    i: usize,
    o: usize,
    w: &[S],
    dw: &mut [S],
    db: &mut [S],
) -> Vec<S> {
    S::gemm(i, n, o, S::one(), x, true, dy, false, S::one(), dw);
    for r in 0..n {
        for (acc, &v) in db.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
            *acc += v;
        }
    }
    let mut dx = vec![S::zero(); n * i];
    S::gemm(n, o, i, S::one(), dy, false, w, true, S::zero(), &mut dx);
    dx
}

fn layer_norm<S: Scalar>(x: &[S], n: usize, e: usize, g: &[S], b: &[S]) -> (Vec<S>, LnCache<S>) {
    let mut y = vec![S::zero(); n * e];
    let mut xhat = vec![S::zero(); n * e];
    let mut rstd = vec![S::zero(); n];
    let inv = S::one() / S::of(e as f64);
    for r in 0..n {
        let row = &x[r * e..(r + 1) * e];
        let mean = row.iter().copied().sum::<S>() * inv;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv;
        let rs = S::one() / (var + S::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for c in 0..e {
            let xh = (row[c] - mean) * rs;
            xhat[r * e + c] = xh;
            y[r * e + c] = xh * g[c] + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    cache: &LnCache<S>,
    n: usize,
    e: usize,
    g: &[S],
    dg: &mut [S],
    db: &mut [S],
) -> Vec<S> {
    let mut dx = vec![S::zero(); n * e];
    let inv = S::one() / S::of(e as f64);
    let mut dxhat = vec![S::zero(); e];
    for r in 0..n {
        let xh = &cache.xhat[r * e..(r + 1) * e];
        let d = &dy[r * e..(r + 1) * e];
        let mut m1 = S::zero();
        let mut m2 = S::zero();
        for c in 0..e {
            dg[c] += d[c] * xh[c];
            db[c] += d[c];
            dxhat[c] = d[c] * g[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xh[c];
        }
        m1 *= inv;
        m2 *= inv;
        let rs = cache.rstd[r];
        for c in 0..e {
            dx[r * e + c] = rs * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
    dx
}

/// `tanh` through one `exp`; much cheaper than libm's `tanh` and exact to
/// rounding for this use. Saturates correctly at both ends.
fn fast_tanh<S: Scalar>(z: S) -> S {
    let two = S::of(2.0);
    S::one() - two / ((two * z).exp() + S::one())
}

fn gelu<S: Scalar>(u: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let a = S::of(0.044715);
    let half = S::of(0.5);
    half * u * (S::one() + fast_tanh(c * (u + a * u * u * u)))
}

fn gelu_grad<S: Scalar>(u: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let a = S::of(0.044715);
    let half = S::of(0.5);
    let t = fast_tanh(c * (u + a * u * u * u));
    half * (S::one() + t) + half * u * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * u * u)
}

fn add_into<S: Scalar>(acc: &mut [S], v: &[S]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

impl<S: Scalar> TinyDenoiser<S> {
    pub fn new(cfg: TinyDenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let (layout, off) = build_layout(&cfg);
        let total = layout.last().map(|e| e.offset + e.len()).unwrap_or(0);
        let mut params = vec![S::zero(); total];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for entry in &layout {
            let name = entry.name.as_str();
            let slice = &mut params[entry.offset..entry.offset + entry.len()];
            let std = if name.ends_with(".g") {
                slice.iter_mut().for_each(|v| *v = S::one());
                continue;
            } else if entry.shape.len() == 1 {
                // biases
                continue;
            } else if name == "embed.pos" || name == "embed.action" {
                0.1
            } else if name.starts_with("head.") {
                if cfg.zero_head {
                    continue;
                }
                1.0 / (cfg.embed_dim as f64).sqrt()
            } else {
                1.0 / (entry.shape[0] as f64).sqrt()
            };
            for v in slice.iter_mut() {
                *v = S::of(std) * S::sample_normal(&mut rng);
            }
        }
        Ok(Self {
            cfg,
            layout,
            off,
            params,
        })
    }

    /// Rebuilds a model from a flat parameter vector in [`layout`](Self::layout) order.
    pub fn from_params(cfg: TinyDenoiserConfig, params: Vec<S>) -> Result<Self> {
        cfg.validate()?;
        let (layout, off) = build_layout(&cfg);
        let total = layout.last().map(|e| e.offset + e.len()).unwrap_or(0);
        if params.len() != total {
            return Err(Error::ShapeMismatch(format!(
                "model needs {total} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            cfg,
            layout,
            off,
            params,
        })
    }

    pub fn config(&self) -> &TinyDenoiserConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.layout
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn p<'a>(&self, params: &'a [S], off: usize, len: usize) -> &'a [S] {
        &params[off..off + len]
    }

    /// Forward pass with explicit parameters; returns the `v` prediction
    /// (`B × T × D`) and the activations needed by [`backward`](Self::backward).
    pub fn forward(
        &self,
        params: &[S],
        batch: &SequenceBatch<S>,
        levels: &[NoiseLevelVector<S>],
    ) -> Result<(Vec<S>, ForwardCache<S>)> {
        check_inputs(self, batch, levels)?;
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch("parameter vector has the wrong length".into()));
        }
        let cfg = &self.cfg;
        let (bsz, t_len, d, e) = (batch.batch, batch.frames, cfg.frame_dim, cfg.embed_dim);
        let n = bsz * t_len;
        let l = cfg.level_features;
        let f = e * cfg.mlp_ratio;
        let o = &self.off;

        let mut phi = vec![S::zero(); n * l];
        for b in 0..bsz {
            for t in 0..t_len {
                let k = levels[b].get(t);
                for j in 0..l {
                    phi[(b * t_len + t) * l + j] = (S::PI() * S::of(j as f64) * k).cos();
                }
            }
        }
        let mut h = linear(&batch.data, n, d, self.p(params, o.w_in, d * e), self.p(params, o.b_in, e), e);
        let lw = self.p(params, o.lvl, l * e);
        S::gemm(n, l, e, S::one(), &phi, false, lw, false, S::one(), &mut h);
        let pos = self.p(params, o.pos, cfg.max_frames * e);
        for b in 0..bsz {
            for t in 0..t_len {
                let row = &mut h[(b * t_len + t) * e..(b * t_len + t + 1) * e];
                add_into(row, &pos[t * e..(t + 1) * e]);
                if let (Some(ao), Some(vocab)) = (o.act, cfg.action_vocab) {
                    let a = batch.action(b, t).unwrap_or(vocab);
                    add_into(row, &params[ao + a * e..ao + (a + 1) * e]);
                }
            }
        }

        let mut blocks = Vec::with_capacity(o.blocks.len());
        for bo in &o.blocks {
            let (ln1_out, ln1) = layer_norm(&h, n, e, self.p(params, bo.ln1_g, e), self.p(params, bo.ln1_b, e));
            let q = linear(&ln1_out, n, e, self.p(params, bo.wq, e * e), self.p(params, bo.bq, e), e);
            let k = linear(&ln1_out, n, e, self.p(params, bo.wk, e * e), self.p(params, bo.bk, e), e);
            let v = linear(&ln1_out, n, e, self.p(params, bo.wv, e * e), self.p(params, bo.bv, e), e);
            let (att, probs) = self.attention(&q, &k, &v, bsz, t_len);
            let proj = linear(&att, n, e, self.p(params, bo.wo, e * e), self.p(params, bo.bo, e), e);
            add_into(&mut h, &proj);
            let (ln2_out, ln2) = layer_norm(&h, n, e, self.p(params, bo.ln2_g, e), self.p(params, bo.ln2_b, e));
            let u = linear(&ln2_out, n, e, self.p(params, bo.w1, e * f), self.p(params, bo.b1, f), f);
            let g: Vec<S> = u.iter().map(|&x| gelu(x)).collect();
            let m = linear(&g, n, f, self.p(params, bo.w2, f * e), self.p(params, bo.b2, e), e);
            add_into(&mut h, &m);
            blocks.push(BlockCache {
                ln1,
                ln1_out,
                q,
                k,
                v,
                probs,
                att,
                ln2,
                ln2_out,
                u,
                g,
            });
        }
        let (lnf_out, lnf) = layer_norm(&h, n, e, self.p(params, o.lnf_g, e), self.p(params, o.lnf_b, e));
        let out = linear(&lnf_out, n, e, self.p(params, o.w_out, e * d), self.p(params, o.b_out, d), d);
        Ok((
            out,
            ForwardCache {
                batch: bsz,
                frames: t_len,
                x: batch.data.clone(),
                phi,
                actions: batch.actions.clone(),
                blocks,
                lnf,
                lnf_out,
            },
        ))
    }

    fn attention(&self, q: &[S], k: &[S], v: &[S], bsz: usize, t_len: usize) -> (Vec<S>, Vec<S>) {
        let e = self.cfg.embed_dim;
        let heads = self.cfg.num_heads;
        let dh = e / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let mut out = vec![S::zero(); bsz * t_len * e];
        let mut probs = vec![S::zero(); bsz * heads * t_len * t_len];
        for b in 0..bsz {
            for hd in 0..heads {
                let pbase = (b * heads + hd) * t_len * t_len;
                for t in 0..t_len {
                    let qi = (b * t_len + t) * e + hd * dh;
                    let qrow = &q[qi..qi + dh];
                    let row = &mut probs[pbase + t * t_len..pbase + (t + 1) * t_len];
                    let mut max = S::neg_infinity();
                    for (s, r) in row.iter_mut().enumerate() {
                        let ki = (b * t_len + s) * e + hd * dh;
                        let dot: S = qrow.iter().zip(&k[ki..ki + dh]).map(|(&a, &b)| a * b).sum();
                        *r = dot * scale;
                        max = max.max(*r);
                    }
                    let mut z = S::zero();
                    for p in row.iter_mut() {
                        *p = (*p - max).exp();
                        z += *p;
                    }
                    let inv = S::one() / z;
                    for p in row.iter_mut() {
                        *p *= inv;
                    }
                    let orow = &mut out[qi..qi + dh];
                    for (s, &p) in row.iter().enumerate() {
                        let vi = (b * t_len + s) * e + hd * dh;
                        for (o, &vv) in orow.iter_mut().zip(&v[vi..vi + dh]) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        (out, probs)
    }

    /// Parameter gradient of `sum(d_out ∘ output)`.
    pub fn backward(&self, params: &[S], cache: &ForwardCache<S>, d_out: &[S]) -> Vec<S> {
        let cfg = &self.cfg;
        let (bsz, t_len, d, e) = (cache.batch, cache.frames, cfg.frame_dim, cfg.embed_dim);
        let n = bsz * t_len;
        let l = cfg.level_features;
        let f = e * cfg.mlp_ratio;
        let heads = cfg.num_heads;
        let hdim = e / heads;
        let scale = S::one() / S::of(hdim as f64).sqrt();
        let o = &self.off;
        let mut grad = vec![S::zero(); params.len()];

        macro_rules! split2 {
            ($a:expr, $la:expr, $b:expr, $lb:expr) => {{
                // two disjoint gradient slices, in either order
                let (a, b) = ($a, $b);
                if a < b {
                    let (lo, hi) = grad.split_at_mut(b);
                    (&mut lo[a..a + $la], &mut hi[..$lb])
                } else {
                    let (lo, hi) = grad.split_at_mut(a);
                    let bs = &mut lo[b..b + $lb];
                    (&mut hi[..$la], bs)
                }
            }};
        }

        let (dw, db) = split2!(o.w_out, e * d, o.b_out, d);
        let dlnf = linear_backward(&cache.lnf_out, d_out, n, e, d, self.p(params, o.w_out, e * d), dw, db);
        let (dg, dbeta) = split2!(o.lnf_g, e, o.lnf_b, e);
        let mut dh = layer_norm_backward(&dlnf, &cache.lnf, n, e, self.p(params, o.lnf_g, e), dg, dbeta);

        for (bo, bc) in o.blocks.iter().zip(&cache.blocks).rev() {
            // MLP residual
            let (dw2, db2) = split2!(bo.w2, f * e, bo.b2, e);
            let dgel = linear_backward(&bc.g, &dh, n, f, e, self.p(params, bo.w2, f * e), dw2, db2);
            let du: Vec<S> = dgel.iter().zip(&bc.u).map(|(&g, &u)| g * gelu_grad(u)).collect();
            let (dw1, db1) = split2!(bo.w1, e * f, bo.b1, f);
            let dln2 = linear_backward(&bc.ln2_out, &du, n, e, f, self.p(params, bo.w1, e * f), dw1, db1);
            let (dg2, db2n) = split2!(bo.ln2_g, e, bo.ln2_b, e);
            let dres = layer_norm_backward(&dln2, &bc.ln2, n, e, self.p(params, bo.ln2_g, e), dg2, db2n);
            add_into(&mut dh, &dres);

            // attention residual
            let (dwo, dbo) = split2!(bo.wo, e * e, bo.bo, e);
            let datt = linear_backward(&bc.att, &dh, n, e, e, self.p(params, bo.wo, e * e), dwo, dbo);
            let mut dq = vec![S::zero(); n * e];
            let mut dk = vec![S::zero(); n * e];
            let mut dv = vec![S::zero(); n * e];
            let mut dp = vec![S::zero(); t_len];
            for b in 0..bsz {
                for hd in 0..heads {
                    let pbase = (b * heads + hd) * t_len * t_len;
                    for t in 0..t_len {
                        let oi = (b * t_len + t) * e + hd * hdim;
                        let prow = &bc.probs[pbase + t * t_len..pbase + (t + 1) * t_len];
                        let mut dot = S::zero();
                        for s in 0..t_len {
                            let vi = (b * t_len + s) * e + hd * hdim;
                            let mut acc = S::zero();
                            for i in 0..hdim {
                                acc += datt[oi + i] * bc.v[vi + i];
                                dv[vi + i] += prow[s] * datt[oi + i];
                            }
                            dp[s] = acc;
                            dot += prow[s] * acc;
                        }
                        for s in 0..t_len {
                            let ds = prow[s] * (dp[s] - dot) * scale;
                            let ki = (b * t_len + s) * e + hd * hdim;
                            for i in 0..hdim {
                                dq[oi + i] += ds * bc.k[ki + i];
                                dk[ki + i] += ds * bc.q[oi + i];
                            }
                        }
                    }
                }
            }
            let mut dln1 = {
                let (dwq, dbq) = split2!(bo.wq, e * e, bo.bq, e);
                linear_backward(&bc.ln1_out, &dq, n, e, e, self.p(params, bo.wq, e * e), dwq, dbq)
            };
            {
                let (dwk, dbk) = split2!(bo.wk, e * e, bo.bk, e);
                let t = linear_backward(&bc.ln1_out, &dk, n, e, e, self.p(params, bo.wk, e * e), dwk, dbk);
                add_into(&mut dln1, &t);
            }
            {
                let (dwv, dbv) = split2!(bo.wv, e * e, bo.bv, e);
                let t = linear_backward(&bc.ln1_out, &dv, n, e, e, self.p(params, bo.wv, e * e), dwv, dbv);
                add_into(&mut dln1, &t);
            }
            let (dg1, db1n) = split2!(bo.ln1_g, e, bo.ln1_b, e);
            let dres = layer_norm_backward(&dln1, &bc.ln1, n, e, self.p(params, bo.ln1_g, e), dg1, db1n);
            add_into(&mut dh, &dres);
        }

        // embeddings
        {
            let (dwi, dbi) = split2!(o.w_in, d * e, o.b_in, e);
            S::gemm(d, n, e, S::one(), &cache.x, true, &dh, false, S::one(), dwi);
            for r in 0..n {
                add_into(dbi, &dh[r * e..(r + 1) * e]);
            }
        }
        S::gemm(l, n, e, S::one(), &cache.phi, true, &dh, false, S::one(), &mut grad[o.lvl..o.lvl + l * e]);
        for b in 0..bsz {
            for t in 0..t_len {
                let row = &dh[(b * t_len + t) * e..(b * t_len + t + 1) * e];
                add_into(&mut grad[o.pos + t * e..o.pos + (t + 1) * e], row);
                if let (Some(ao), Some(vocab)) = (o.act, cfg.action_vocab) {
                    let a = cache
                        .actions
                        .as_ref()
                        .map(|acts| acts[b * t_len + t])
                        .unwrap_or(vocab);
                    add_into(&mut grad[ao + a * e..ao + (a + 1) * e], row);
                }
            }
        }
        grad
    }
}

impl<S: Scalar> Denoiser<S> for TinyDenoiser<S> {
    fn parameterization(&self) -> Parameterization {
        Parameterization::V
    }

    fn frame_dim(&self) -> usize {
        self.cfg.frame_dim
    }

    fn max_frames(&self) -> usize {
        self.cfg.max_frames
    }

    fn action_vocab(&self) -> Option<usize> {
        self.cfg.action_vocab
    }

    fn denoise(&self, batch: &SequenceBatch<S>, levels: &[NoiseLevelVector<S>]) -> Result<DenoiserOutput<S>> {
        let (out, _) = self.forward(&self.params, batch, levels)?;
        let prediction = SequenceBatch {
            batch: batch.batch,
            frames: batch.frames,
            dim: batch.dim,
            data: out,
            actions: None,
        };
        prediction.check_finite()?;
        Ok(DenoiserOutput {
            prediction,
            parameterization: Parameterization::V,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseLevel;
    use rand::Rng;

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, t: usize, d: usize) -> (SequenceBatch<f64>, Vec<NoiseLevelVector<f64>>) {
        let data: Vec<f64> = (0..b * t * d).map(|_| f64::sample_normal(rng)).collect();
        let levels = (0..b)
            .map(|_| NoiseLevelVector::new(&(0..t).map(|_| rng.random::<f64>()).collect::<Vec<_>>()).unwrap())
            .collect();
        (SequenceBatch::new(b, t, d, data).unwrap(), levels)
    }

    #[test]
    fn zero_head_outputs_zero() {
        let m = TinyDenoiser::<f64>::new(TinyDenoiserConfig::new(3, 5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (b, l) = random_batch(&mut rng, 4, 5, 3);
        let out = m.denoise(&b, &l).unwrap();
        assert!(out.prediction.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layout_is_contiguous_and_named_uniquely() {
        let mut cfg = TinyDenoiserConfig::new(2, 4);
        cfg.action_vocab = Some(3);
        let m = TinyDenoiser::<f32>::new(cfg).unwrap();
        let mut next = 0;
        let mut names = std::collections::HashSet::new();
        for e in m.layout() {
            assert_eq!(e.offset, next);
            next += e.len();
            assert!(names.insert(e.name.clone()));
        }
        assert_eq!(next, m.num_params());
    }

    #[test]
    fn rejects_bad_config_and_inputs() {
        let mut cfg = TinyDenoiserConfig::new(2, 4);
        cfg.num_heads = 5;
        assert!(TinyDenoiser::<f64>::new(cfg).is_err());
        let mut cfg = TinyDenoiserConfig::new(2, 4);
        cfg.action_vocab = Some(2);
        let m = TinyDenoiser::<f64>::new(cfg).unwrap();
        let b = SequenceBatch::<f64>::zeros(1, 2, 2).with_actions(vec![0, 3]).unwrap();
        let lv = vec![NoiseLevelVector::uniform(2, NoiseLevel::masked())];
        assert!(matches!(m.denoise(&b, &lv), Err(Error::ActionOutOfVocabulary { .. })));
        let ok = SequenceBatch::<f64>::zeros(1, 2, 2).with_actions(vec![0, 2]).unwrap();
        assert!(m.denoise(&ok, &lv).is_ok());
    }

    #[test]
    fn backward_matches_finite_differences_small() {
        let mut cfg = TinyDenoiserConfig::new(2, 3);
        cfg.embed_dim = 8;
        cfg.num_heads = 2;
        cfg.level_features = 4;
        cfg.zero_head = false;
        cfg.action_vocab = Some(2);
        cfg.seed = 5;
        let m = TinyDenoiser::<f64>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, l) = random_batch(&mut rng, 2, 3, 2);
        let b = b.with_actions(vec![0, 1, 2, 2, 1, 0]).unwrap();
        let w: Vec<f64> = (0..12).map(|_| f64::sample_normal(&mut rng)).collect();
        let loss = |p: &[f64]| -> f64 {
            let (out, _) = m.forward(p, &b, &l).unwrap();
            out.iter().zip(&w).map(|(o, w)| o * w).sum()
        };
        let (_, cache) = m.forward(m.params(), &b, &l).unwrap();
        let g = m.backward(m.params(), &cache, &w);
        let h = 1e-5;
        for i in 0..m.num_params() {
            let mut p = m.params().to_vec();
            p[i] += h;
            let up = loss(&p);
            p[i] -= 2.0 * h;
            let dn = loss(&p);
            let fd = (up - dn) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-6);
            assert!((fd - g[i]).abs() / denom < 1e-4, "param {i}: fd {fd} vs {}", g[i]);
        }
    }
}
