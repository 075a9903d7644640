//! A tiny patch-based cross-attention denoiser.
//!
//! Layout: a stride-`P` patch embedding (kernel = stride = `P`), a 1x1 conv,
//! one multi-head cross-attention block over token embeddings at `H/P x W/P`,
//! another 1x1 conv and a transposed patch projection back to `C x H x W`,
//! plus a linear skip from each input patch. Gradients are written out by
//! hand; [`TinyDenoiser::loss_and_grad`] is checked against finite
//! differences in the tests.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::weights::{Tensor, Weights};
use super::{AttentionStash, Conditioning, Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::field::{Field, Shape};
use crate::rng;
use crate::schedule::NoiseSchedule;

/// Token id of the null prompt used for unconditional passes.
pub const NULL_TOKEN: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TinyConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    pub d_embed: usize,
    pub vocab: usize,
    pub t_max: usize,
}

const TIME_FEATURES: usize = 8;

impl TinyConfig {
    pub fn toy(channels: usize, height: usize, width: usize, vocab: usize, t_max: usize) -> Self {
        Self {
            channels,
            height,
            width,
            patch: 4,
            d_model: 32,
            heads: 2,
            d_head: 8,
            d_embed: 16,
            vocab,
            t_max,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.channels,
            self.height,
            self.width,
            self.patch,
            self.d_model,
            self.heads,
            self.d_head,
            self.d_embed,
            self.vocab,
            self.t_max,
        ];
        if dims.contains(&0) {
            return Err(Error::param(format!(
                "tiny config has a zero dimension: {self:?}"
            )));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::param(format!(
                "field {}x{} is not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        (self.channels, self.height, self.width)
    }

    /// Attention resolution `(H/P, W/P)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    fn patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    fn inner(&self) -> usize {
        self.heads * self.d_head
    }

    fn as_vec(&self) -> Vec<f32> {
        [
            self.channels,
            self.height,
            self.width,
            self.patch,
            self.d_model,
            self.heads,
            self.d_head,
            self.d_embed,
            self.vocab,
            self.t_max,
        ]
        .iter()
        .map(|&v| v as f32)
        .collect()
    }

    fn from_slice(v: &[f32]) -> Result<Self> {
        if v.len() != 10 || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
            return Err(Error::format(
                "tiny config tensor must hold 10 non-negative integers",
            ));
        }
        let u = |i: usize| v[i] as usize;
        let c = Self {
            channels: u(0),
            height: u(1),
            width: u(2),
            patch: u(3),
            d_model: u(4),
            heads: u(5),
            d_head: u(6),
            d_embed: u(7),
            vocab: u(8),
            t_max: u(9),
        };
        c.validate()?;
        Ok(c)
    }
}

/// Trainable parameters, each a row-major matrix or vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyParams {
    pub in_w: Vec<f32>,
    pub in_b: Vec<f32>,
    pub pos: Vec<f32>,
    pub time_w: Vec<f32>,
    pub enc_w: Vec<f32>,
    pub enc_b: Vec<f32>,
    pub attn_q: Vec<f32>,
    pub attn_k: Vec<f32>,
    pub attn_v: Vec<f32>,
    pub attn_o: Vec<f32>,
    pub tok_emb: Vec<f32>,
    pub dec_w: Vec<f32>,
    pub dec_b: Vec<f32>,
    pub out_w: Vec<f32>,
    pub out_b: Vec<f32>,
    pub skip_w: Vec<f32>,
}

const PARAM_NAMES: [&str; 16] = [
    "in.w", "in.b", "pos", "time.w", "enc.w", "enc.b", "attn.q", "attn.k", "attn.v", "attn.o",
    "tok.emb", "dec.w", "dec.b", "out.w", "out.b", "skip.w",
];

impl TinyParams {
    fn dims(cfg: &TinyConfig) -> [Vec<usize>; 16] {
        let d = cfg.d_model;
        let pd = cfg.patch_dim();
        let inner = cfg.inner();
        [
            vec![d, pd],
            vec![d],
            vec![cfg.patches(), d],
            vec![d, TIME_FEATURES],
            vec![d, d],
            vec![d],
            vec![inner, d],
            vec![inner, cfg.d_embed],
            vec![inner, cfg.d_embed],
            vec![d, inner],
            vec![cfg.vocab, cfg.d_embed],
            vec![d, d],
            vec![d],
            vec![pd, d],
            vec![pd],
            vec![pd, pd],
        ]
    }

    fn zeros(cfg: &TinyConfig) -> Self {
        let mut it = Self::dims(cfg)
            .into_iter()
            .map(|d| vec![0.0f32; d.iter().product()]);
        let mut next = || it.next().unwrap();
        Self {
            in_w: next(),
            in_b: next(),
            pos: next(),
            time_w: next(),
            enc_w: next(),
            enc_b: next(),
            attn_q: next(),
            attn_k: next(),
            attn_v: next(),
            attn_o: next(),
            tok_emb: next(),
            dec_w: next(),
            dec_b: next(),
            out_w: next(),
            out_b: next(),
            skip_w: next(),
        }
    }

    fn fields(&self) -> [&Vec<f32>; 16] {
        [
            &self.in_w,
            &self.in_b,
            &self.pos,
            &self.time_w,
            &self.enc_w,
            &self.enc_b,
            &self.attn_q,
            &self.attn_k,
            &self.attn_v,
            &self.attn_o,
            &self.tok_emb,
            &self.dec_w,
            &self.dec_b,
            &self.out_w,
            &self.out_b,
            &self.skip_w,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Vec<f32>; 16] {
        [
            &mut self.in_w,
            &mut self.in_b,
            &mut self.pos,
            &mut self.time_w,
            &mut self.enc_w,
            &mut self.enc_b,
            &mut self.attn_q,
            &mut self.attn_k,
            &mut self.attn_v,
            &mut self.attn_o,
            &mut self.tok_emb,
            &mut self.dec_w,
            &mut self.dec_b,
            &mut self.out_w,
            &mut self.out_b,
            &mut self.skip_w,
        ]
    }

    fn add_assign(&mut self, other: &TinyParams) {
        for (a, b) in self.fields_mut().into_iter().zip(other.fields()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Intermediate activations kept for the backward pass.
struct Trace {
    tokens: Vec<u32>,
    tau: [f32; TIME_FEATURES],
    u: Vec<f32>,
    h0: Vec<f32>,
    h1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    attn: Vec<f32>,
    o: Vec<f32>,
    h2: Vec<f32>,
    h3: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct TinyDenoiser {
    cfg: TinyConfig,
    params: TinyParams,
    fingerprint: [u8; 32],
}

/// `y[r] += sum_c m[r, c] x[c]` for a row-major `rows x cols` matrix.
fn matvec_acc(m: &[f32], x: &[f32], y: &mut [f32]) {
    let cols = x.len();
    for (row, out) in m.chunks_exact(cols).zip(y.iter_mut()) {
        *out += row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
    }
}

/// `dx[c] += sum_r m[r, c] dy[r]`.
fn matvec_t_acc(m: &[f32], dy: &[f32], dx: &mut [f32]) {
    let cols = dx.len();
    for (row, &g) in m.chunks_exact(cols).zip(dy) {
        if g != 0.0 {
            dx.iter_mut().zip(row).for_each(|(d, a)| *d += a * g);
        }
    }
}

/// `dm[r, c] += dy[r] x[c]`.
fn outer_acc(dm: &mut [f32], dy: &[f32], x: &[f32]) {
    let cols = x.len();
    for (row, &g) in dm.chunks_exact_mut(cols).zip(dy) {
        if g != 0.0 {
            row.iter_mut().zip(x).for_each(|(d, a)| *d += g * a);
        }
    }
}

/// 1x1 convolution over a grid of `d`-vectors.
fn conv_acc(w: &[f32], h: &[f32], d: usize, out: &mut [f32]) {
    for (hp, op) in h.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        matvec_acc(w, hp, op);
    }
}

/// Backward of [`conv_acc`]: accumulates into `dw` and `dh`.
fn conv_back(w: &[f32], h: &[f32], dout: &[f32], d: usize, dw: &mut [f32], dh: &mut [f32]) {
    for ((hp, gp), dp) in h
        .chunks_exact(d)
        .zip(dout.chunks_exact(d))
        .zip(dh.chunks_exact_mut(d))
    {
        outer_acc(dw, gp, hp);
        matvec_t_acc(w, gp, dp);
    }
}

impl TinyDenoiser {
    /// Seeded random initialisation.
    pub fn init(cfg: TinyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = TinyParams::zeros(&cfg);
        let dims = TinyParams::dims(&cfg);
        let mut r = rng::stream(seed, rng::purpose::INIT);
        for (i, (field, dim)) in params.fields_mut().into_iter().zip(dims.iter()).enumerate() {
            let name = PARAM_NAMES[i];
            let std = match name {
                "in.b" | "enc.b" | "dec.b" | "out.b" => 0.0,
                "pos" => 0.1,
                "tok.emb" => 1.0,
                _ => 1.0 / (dim[1] as f32).sqrt(),
            };
            if std > 0.0 {
                let n = Normal::new(0.0, std).unwrap();
                field.iter_mut().for_each(|v| *v = n.sample(&mut r));
            }
        }
        Ok(Self::from_params(cfg, params))
    }

    pub fn from_params(cfg: TinyConfig, params: TinyParams) -> Self {
        let mut m = Self {
            cfg,
            params,
            fingerprint: [0; 32],
        };
        m.fingerprint = m.to_weights().fingerprint();
        m
    }

    pub fn config(&self) -> &TinyConfig {
        &self.cfg
    }

    pub fn params(&self) -> &TinyParams {
        &self.params
    }

    pub fn to_weights(&self) -> Weights {
        let mut w = Weights::new();
        w.insert("config", Tensor::new(vec![10], self.cfg.as_vec()).unwrap());
        let dims = TinyParams::dims(&self.cfg);
        for ((name, field), dim) in PARAM_NAMES.iter().zip(self.params.fields()).zip(dims) {
            w.insert(*name, Tensor::new(dim, field.clone()).unwrap());
        }
        w
    }

    pub fn from_weights(w: &Weights) -> Result<Self> {
        let cfg_t = w
            .get("config")
            .ok_or_else(|| Error::param("weights lack a 'config' tensor"))?;
        let cfg = TinyConfig::from_slice(&cfg_t.data)?;
        let mut params = TinyParams::zeros(&cfg);
        let dims = TinyParams::dims(&cfg);
        for ((name, field), dim) in PARAM_NAMES.iter().zip(params.fields_mut()).zip(dims) {
            let t = w
                .get(name)
                .ok_or_else(|| Error::param(format!("weights lack tensor '{name}'")))?;
            if t.dims != dim {
                return Err(Error::param(format!(
                    "tensor '{name}' has dims {:?}, expected {dim:?}",
                    t.dims
                )));
            }
            *field = t.data.clone();
        }
        Ok(Self::from_params(cfg, params))
    }

    fn time_features(&self, t: usize) -> [f32; TIME_FEATURES] {
        let s = t as f32 / self.cfg.t_max as f32;
        let mut out = [0.0; TIME_FEATURES];
        for k in 0..TIME_FEATURES / 2 {
            let a = std::f32::consts::PI * (1 << k) as f32 * s;
            out[2 * k] = a.sin();
            out[2 * k + 1] = a.cos();
        }
        out
    }

    fn tokens_for(&self, cond: Option<&Conditioning>) -> Result<Vec<u32>> {
        let tokens = match cond {
            None => vec![NULL_TOKEN],
            Some(c) => {
                c.validate()?;
                c.tokens.clone()
            }
        };
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            return Err(Error::param(format!(
                "token {bad} outside the model vocabulary of {}",
                self.cfg.vocab
            )));
        }
        Ok(tokens)
    }

    fn patchify(&self, x: &Field) -> Vec<f32> {
        let c = &self.cfg;
        let (gh, gw) = c.grid();
        let p = c.patch;
        let pd = c.patch_dim();
        let mut u = vec![0.0f32; c.patches() * pd];
        for py in 0..gh {
            for px in 0..gw {
                let base = (py * gw + px) * pd;
                for ch in 0..c.channels {
                    for i in 0..p {
                        for j in 0..p {
                            u[base + (ch * p + i) * p + j] = x.get(ch, py * p + i, px * p + j);
                        }
                    }
                }
            }
        }
        u
    }

    fn unpatchify(&self, y: &[f32]) -> Field {
        let c = &self.cfg;
        let (_, gw) = c.grid();
        let p = c.patch;
        let pd = c.patch_dim();
        Field::from_fn(c.shape(), |ch, yy, xx| {
            let (py, i) = (yy / p, yy % p);
            let (px, j) = (xx / p, xx % p);
            y[(py * gw + px) * pd + (ch * p + i) * p + j]
        })
    }

    fn forward(&self, x: &Field, t: usize, tokens: Vec<u32>) -> Result<(Vec<f32>, Trace)> {
        let c = &self.cfg;
        if x.shape() != c.shape() {
            return Err(Error::Shape {
                expected: c.shape(),
                got: x.shape(),
            });
        }
        let pr = &self.params;
        let (d, pd, inner, de) = (c.d_model, c.patch_dim(), c.inner(), c.d_embed);
        let n = c.patches();
        let nt = tokens.len();
        let tau = self.time_features(t);
        let u = self.patchify(x);

        let mut tproj = vec![0.0f32; d];
        matvec_acc(&pr.time_w, &tau, &mut tproj);

        let mut h0 = vec![0.0f32; n * d];
        let mut h1 = vec![0.0f32; n * d];
        let mut q = vec![0.0f32; n * inner];
        for p in 0..n {
            let hp = &mut h0[p * d..(p + 1) * d];
            for k in 0..d {
                hp[k] = pr.in_b[k] + pr.pos[p * d + k] + tproj[k];
            }
            matvec_acc(&pr.in_w, &u[p * pd..(p + 1) * pd], hp);
            h1[p * d..(p + 1) * d].copy_from_slice(&pr.enc_b);
        }
        conv_acc(&pr.enc_w, &h0, d, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.max(0.0));
        for p in 0..n {
            matvec_acc(
                &pr.attn_q,
                &h1[p * d..(p + 1) * d],
                &mut q[p * inner..(p + 1) * inner],
            );
        }

        let mut k = vec![0.0f32; nt * inner];
        let mut v = vec![0.0f32; nt * inner];
        // the null token is a contentless sink: zero key and value
        for (j, &tok) in tokens.iter().enumerate().filter(|(_, &t)| t != NULL_TOKEN) {
            let e = &pr.tok_emb[tok as usize * de..(tok as usize + 1) * de];
            matvec_acc(&pr.attn_k, e, &mut k[j * inner..(j + 1) * inner]);
            matvec_acc(&pr.attn_v, e, &mut v[j * inner..(j + 1) * inner]);
        }

        let scale = 1.0 / (c.d_head as f32).sqrt();
        let dh = c.d_head;
        // attn layout [head][pixel][token]
        let mut attn = vec![0.0f32; c.heads * n * nt];
        let mut o = vec![0.0f32; n * inner];
        for hd in 0..c.heads {
            for p in 0..n {
                let qv = &q[p * inner + hd * dh..p * inner + (hd + 1) * dh];
                let row = &mut attn[(hd * n + p) * nt..(hd * n + p + 1) * nt];
                for j in 0..nt {
                    let kv = &k[j * inner + hd * dh..j * inner + (hd + 1) * dh];
                    row[j] = qv.iter().zip(kv).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0;
                row.iter_mut().for_each(|r| {
                    *r = (*r - m).exp();
                    z += *r;
                });
                row.iter_mut().for_each(|r| *r /= z);
                let op = &mut o[p * inner + hd * dh..p * inner + (hd + 1) * dh];
                for j in 0..nt {
                    let a = row[j];
                    let vv = &v[j * inner + hd * dh..j * inner + (hd + 1) * dh];
                    op.iter_mut().zip(vv).for_each(|(o, v)| *o += a * v);
                }
            }
        }

        let mut h2 = h1.clone();
        let mut h3 = vec![0.0f32; n * d];
        let mut y = vec![0.0f32; n * pd];
        for p in 0..n {
            matvec_acc(
                &pr.attn_o,
                &o[p * inner..(p + 1) * inner],
                &mut h2[p * d..(p + 1) * d],
            );
            h3[p * d..(p + 1) * d].copy_from_slice(&pr.dec_b);
        }
        conv_acc(&pr.dec_w, &h2, d, &mut h3);
        h3.iter_mut().for_each(|v| *v = v.max(0.0));
        for p in 0..n {
            let yp = &mut y[p * pd..(p + 1) * pd];
            yp.copy_from_slice(&pr.out_b);
            matvec_acc(&pr.out_w, &h3[p * d..(p + 1) * d], yp);
            matvec_acc(&pr.skip_w, &u[p * pd..(p + 1) * pd], yp);
        }
        Ok((
            y,
            Trace {
                tokens,
                tau,
                u,
                h0,
                h1,
                q,
                k,
                v,
                attn,
                o,
                h2,
                h3,
            },
        ))
    }

    /// Accumulates parameter gradients of `sum(dy * y)` into `g`.
    fn backward(&self, tr: &Trace, dy: &[f32], g: &mut TinyParams) {
        let c = &self.cfg;
        let pr = &self.params;
        let (d, pd, inner, de, dh) = (c.d_model, c.patch_dim(), c.inner(), c.d_embed, c.d_head);
        let n = c.patches();
        let nt = tr.tokens.len();
        let scale = 1.0 / (dh as f32).sqrt();

        let mut dh3 = vec![0.0f32; n * d];
        for p in 0..n {
            let dyp = &dy[p * pd..(p + 1) * pd];
            g.out_b.iter_mut().zip(dyp).for_each(|(a, b)| *a += b);
            outer_acc(&mut g.out_w, dyp, &tr.h3[p * d..(p + 1) * d]);
            outer_acc(&mut g.skip_w, dyp, &tr.u[p * pd..(p + 1) * pd]);
            matvec_t_acc(&pr.out_w, dyp, &mut dh3[p * d..(p + 1) * d]);
        }
        for (g3, h) in dh3.iter_mut().zip(&tr.h3) {
            if *h <= 0.0 {
                *g3 = 0.0;
            }
        }
        for p in 0..n {
            g.dec_b
                .iter_mut()
                .zip(&dh3[p * d..(p + 1) * d])
                .for_each(|(a, b)| *a += b);
        }
        // residual: dh1 starts as dh2
        let mut dh1 = vec![0.0f32; n * d];
        conv_back(&pr.dec_w, &tr.h2, &dh3, d, &mut g.dec_w, &mut dh1);
        let mut do_ = vec![0.0f32; n * inner];
        for p in 0..n {
            let dh2 = &dh1[p * d..(p + 1) * d];
            outer_acc(&mut g.attn_o, dh2, &tr.o[p * inner..(p + 1) * inner]);
            matvec_t_acc(&pr.attn_o, dh2, &mut do_[p * inner..(p + 1) * inner]);
        }

        let mut dq = vec![0.0f32; n * inner];
        let mut dk = vec![0.0f32; nt * inner];
        let mut dv = vec![0.0f32; nt * inner];
        let mut da = vec![0.0f32; nt];
        for hd in 0..c.heads {
            for p in 0..n {
                let row = &tr.attn[(hd * n + p) * nt..(hd * n + p + 1) * nt];
                let dop = &do_[p * inner + hd * dh..p * inner + (hd + 1) * dh];
                let mut dot = 0.0f32;
                for j in 0..nt {
                    let vv = &tr.v[j * inner + hd * dh..j * inner + (hd + 1) * dh];
                    da[j] = dop.iter().zip(vv).map(|(a, b)| a * b).sum();
                    dot += row[j] * da[j];
                    dv[j * inner + hd * dh..j * inner + (hd + 1) * dh]
                        .iter_mut()
                        .zip(dop)
                        .for_each(|(a, b)| *a += row[j] * b);
                }
                let qv = &tr.q[p * inner + hd * dh..p * inner + (hd + 1) * dh];
                for j in 0..nt {
                    let dl = row[j] * (da[j] - dot) * scale;
                    if dl == 0.0 {
                        continue;
                    }
                    let kv = &tr.k[j * inner + hd * dh..j * inner + (hd + 1) * dh];
                    dq[p * inner + hd * dh..p * inner + (hd + 1) * dh]
                        .iter_mut()
                        .zip(kv)
                        .for_each(|(a, b)| *a += dl * b);
                    dk[j * inner + hd * dh..j * inner + (hd + 1) * dh]
                        .iter_mut()
                        .zip(qv)
                        .for_each(|(a, b)| *a += dl * b);
                }
            }
        }

        for (j, &tok) in tr
            .tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != NULL_TOKEN)
        {
            let t0 = tok as usize * de;
            let e = &pr.tok_emb[t0..t0 + de];
            let dkj = &dk[j * inner..(j + 1) * inner];
            let dvj = &dv[j * inner..(j + 1) * inner];
            outer_acc(&mut g.attn_k, dkj, e);
            outer_acc(&mut g.attn_v, dvj, e);
            let ge = &mut g.tok_emb[t0..t0 + de];
            matvec_t_acc(&pr.attn_k, dkj, ge);
            matvec_t_acc(&pr.attn_v, dvj, ge);
        }

        for p in 0..n {
            let dqp = &dq[p * inner..(p + 1) * inner];
            outer_acc(&mut g.attn_q, dqp, &tr.h1[p * d..(p + 1) * d]);
            matvec_t_acc(&pr.attn_q, dqp, &mut dh1[p * d..(p + 1) * d]);
        }
        for (gv, h) in dh1.iter_mut().zip(&tr.h1) {
            if *h <= 0.0 {
                *gv = 0.0;
            }
        }
        let mut dh0_all = vec![0.0f32; n * d];
        conv_back(&pr.enc_w, &tr.h0, &dh1, d, &mut g.enc_w, &mut dh0_all);
        let mut dtproj = vec![0.0f32; d];
        for p in 0..n {
            g.enc_b
                .iter_mut()
                .zip(&dh1[p * d..(p + 1) * d])
                .for_each(|(a, b)| *a += b);
            let dh0 = &dh0_all[p * d..(p + 1) * d];
            g.in_b.iter_mut().zip(dh0).for_each(|(a, b)| *a += b);
            g.pos[p * d..(p + 1) * d]
                .iter_mut()
                .zip(dh0)
                .for_each(|(a, b)| *a += b);
            dtproj.iter_mut().zip(dh0).for_each(|(a, b)| *a += b);
            outer_acc(&mut g.in_w, dh0, &tr.u[p * pd..(p + 1) * pd]);
        }
        outer_acc(&mut g.time_w, &dtproj, &tr.tau);
    }

    /// Mean-squared noise-prediction loss over a batch of
    /// `(x_t, t, tokens-or-null, target eps)` and its parameter gradient.
    pub fn loss_and_grad(&self, batch: &[TrainExample]) -> Result<(f64, TinyParams)> {
        let numel = (batch.len() * self.cfg.channels * self.cfg.height * self.cfg.width) as f32;
        let per: Vec<Result<(f64, TinyParams)>> = batch
            .par_iter()
            .map(|ex| {
                let tokens = self.tokens_for(ex.cond.as_ref())?;
                let (y, tr) = self.forward(&ex.x_t, ex.t, tokens)?;
                let target = self.patchify(&ex.eps);
                let mut loss = 0.0f64;
                let dy: Vec<f32> = y
                    .iter()
                    .zip(&target)
                    .map(|(a, b)| {
                        let r = a - b;
                        loss += (r as f64) * (r as f64);
                        2.0 * r / numel
                    })
                    .collect();
                let mut g = TinyParams::zeros(&self.cfg);
                self.backward(&tr, &dy, &mut g);
                Ok((loss / numel as f64, g))
            })
            .collect();
        let mut total = 0.0;
        let mut grad = TinyParams::zeros(&self.cfg);
        for r in per {
            let (l, g) = r?;
            total += l;
            grad.add_assign(&g);
        }
        Ok((total, grad))
    }

    pub fn params_mut(&mut self) -> &mut TinyParams {
        &mut self.params
    }

    fn refresh_fingerprint(&mut self) {
        self.fingerprint = self.to_weights().fingerprint();
    }
}

impl Denoiser for TinyDenoiser {
    fn eps(&self, x: &Field, t: usize, cond: Option<&Conditioning>) -> Result<DenoiserOutput> {
        if t == 0 || t > self.cfg.t_max {
            return Err(Error::param(format!(
                "timestep {t} outside [1, {}]",
                self.cfg.t_max
            )));
        }
        let tokens = self.tokens_for(cond)?;
        let nt = tokens.len();
        let (y, tr) = self.forward(x, t, tokens)?;
        let attn = AttentionStash::new(1, self.cfg.heads, nt, self.cfg.grid(), tr.attn)?;
        Ok(DenoiserOutput {
            eps: self.unpatchify(&y),
            attn: Some(attn),
        })
    }

    fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    fn vocab(&self) -> Option<usize> {
        Some(self.cfg.vocab)
    }
}

#[derive(Debug, Clone)]
pub struct TrainExample {
    pub x_t: Field,
    pub t: usize,
    pub cond: Option<Conditioning>,
    pub eps: Field,
}

/// Fixed-budget training settings; recorded alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the caption with the null prompt.
    pub cond_drop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1500,
            batch: 16,
            lr: 3e-3,
            cond_drop: 0.2,
        }
    }
}

/// Trains with Adam on noise prediction. `sample(i)` yields the `i`-th clean
/// example and its caption tokens.
pub fn train(
    cfg: TinyConfig,
    schedule: &NoiseSchedule,
    tc: &TrainConfig,
    mut sample: impl FnMut(u64) -> (Field, Vec<u32>),
    mut log: impl FnMut(usize, f64),
) -> Result<TinyDenoiser> {
    if schedule.len() != cfg.t_max {
        return Err(Error::param(format!(
            "schedule has T={}, model expects {}",
            schedule.len(),
            cfg.t_max
        )));
    }
    let mut model = TinyDenoiser::init(cfg, tc.seed)?;
    let mut r = rng::stream(tc.seed, rng::purpose::TRAINING);
    let (b1, b2, eps_adam) = (0.9f64, 0.999f64, 1e-8f64);
    let mut m1 = TinyParams::zeros(&cfg);
    let mut m2 = TinyParams::zeros(&cfg);
    let mut index = 0u64;
    for step in 0..tc.steps {
        let batch: Vec<TrainExample> = (0..tc.batch)
            .map(|_| {
                let (x0, tokens) = sample(index);
                index += 1;
                let t = r.gen_range(1..=cfg.t_max);
                let ab = schedule.alpha_bar(t);
                let eps = Field::from_fn(x0.shape(), |_, _, _| StandardNormal.sample(&mut r));
                let x_t = x0
                    .scale(ab.sqrt() as f32)
                    .add(&eps.scale((1.0 - ab).sqrt() as f32))
                    .expect("same shape");
                let cond = if r.gen_bool(tc.cond_drop) {
                    None
                } else {
                    Some(Conditioning {
                        label: String::new(),
                        tokens,
                        components: Vec::new(),
                    })
                };
                TrainExample { x_t, t, cond, eps }
            })
            .collect();
        let (loss, grad) = model.loss_and_grad(&batch)?;
        log(step, loss);
        let k = step as i32 + 1;
        let c1 = 1.0 - b1.powi(k);
        let c2 = 1.0 - b2.powi(k);
        // cosine decay to 10% of the base rate
        let lr = tc.lr
            * (0.1
                + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / tc.steps as f64).cos()));
        let params = model.params_mut();
        for ((p, g), (a, b)) in params
            .fields_mut()
            .into_iter()
            .zip(grad.fields())
            .zip(m1.fields_mut().into_iter().zip(m2.fields_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i] as f64;
                a[i] = (b1 * a[i] as f64 + (1.0 - b1) * gi) as f32;
                b[i] = (b2 * b[i] as f64 + (1.0 - b2) * gi * gi) as f32;
                let mh = a[i] as f64 / c1;
                let vh = b[i] as f64 / c2;
                p[i] -= (lr * mh / (vh.sqrt() + eps_adam)) as f32;
            }
        }
    }
    model.refresh_fingerprint();
    Ok(model)
}

/// Stable digest of a training recipe, for provenance in reports.
pub fn train_digest(cfg: &TinyConfig, tc: &TrainConfig) -> String {
    let mut h = Sha256::new();
    for v in cfg.as_vec() {
        h.update(v.to_le_bytes());
    }
    h.update(serde_json::to_vec(tc).unwrap_or_default());
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;

    fn small_cfg() -> TinyConfig {
        TinyConfig {
            channels: 2,
            height: 8,
            width: 8,
            patch: 4,
            d_model: 6,
            heads: 2,
            d_head: 3,
            d_embed: 4,
            vocab: 5,
            t_max: 100,
        }
    }

    fn probe(shape: Shape, k: f32) -> Field {
        Field::from_fn(shape, |c, y, x| ((c * 13 + y * 5 + x) as f32 * k).sin())
    }

    #[test]
    fn deterministic_and_stash_normalised() {
        let m = TinyDenoiser::init(TinyConfig::toy(1, 16, 16, 4, 1000), 3).unwrap();
        let x = probe((1, 16, 16), 0.3);
        let cond = Conditioning::new("c", vec![0, 2], vec![]).unwrap();
        let a = m.eps(&x, 500, Some(&cond)).unwrap();
        let b = m.eps(&x, 500, Some(&cond)).unwrap();
        assert!(a.eps.bit_eq(&b.eps));
        let stash = a.attn.unwrap();
        assert_eq!(stash.resolution(), (4, 4));
        assert_eq!(stash.tokens(), 2);
        assert!(stash.max_row_sum_error() < 1e-5);
        assert_eq!(a.eps.shape(), x.shape());
    }

    #[test]
    fn single_token_gives_one_map_of_ones() {
        let m = TinyDenoiser::init(TinyConfig::toy(1, 8, 8, 4, 1000), 1).unwrap();
        let cond = Conditioning::new("c", vec![3], vec![]).unwrap();
        let s = m
            .eps(&probe((1, 8, 8), 0.2), 10, Some(&cond))
            .unwrap()
            .attn
            .unwrap();
        assert_eq!(s.tokens(), 1);
        for h in 0..s.heads() {
            assert!(s.map(0, h, 0).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn zero_query_gives_uniform_maps() {
        let mut m = TinyDenoiser::init(TinyConfig::toy(1, 8, 8, 4, 1000), 1).unwrap();
        m.params_mut().attn_q.iter_mut().for_each(|v| *v = 0.0);
        let cond = Conditioning::new("c", vec![0, 1, 2, 3], vec![]).unwrap();
        let s = m
            .eps(&probe((1, 8, 8), 0.2), 10, Some(&cond))
            .unwrap()
            .attn
            .unwrap();
        for tok in 0..4 {
            assert!(s.map(0, 0, tok).iter().all(|&v| (v - 0.25).abs() < 1e-7));
        }
    }

    #[test]
    fn rejects_shape_and_vocab_mismatch() {
        let m = TinyDenoiser::init(TinyConfig::toy(1, 8, 8, 4, 1000), 1).unwrap();
        assert!(m.eps(&Field::zeros((1, 12, 12)), 10, None).is_err());
        let cond = Conditioning::new("c", vec![9], vec![]).unwrap();
        assert!(m.eps(&Field::zeros((1, 8, 8)), 10, Some(&cond)).is_err());
        assert!(TinyDenoiser::init(TinyConfig::toy(1, 10, 8, 4, 1000), 1).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let m = TinyDenoiser::init(small_cfg(), 11).unwrap();
        let back = TinyDenoiser::from_weights(&m.to_weights()).unwrap();
        assert_eq!(back.fingerprint(), m.fingerprint());
        let mut w = m.to_weights();
        w.insert("enc.w", Tensor::zeros(vec![3, 3]));
        assert!(TinyDenoiser::from_weights(&w).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let mut m = TinyDenoiser::init(cfg, 5).unwrap();
        // shift biases so ReLUs are not all on one side
        m.params_mut()
            .enc_b
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = 0.1 * i as f32 - 0.2);
        let batch = vec![
            TrainExample {
                x_t: probe(cfg.shape(), 0.7),
                t: 37,
                cond: Some(Conditioning::new("c", vec![0, 3, 1], vec![]).unwrap()),
                eps: probe(cfg.shape(), 1.3),
            },
            TrainExample {
                x_t: probe(cfg.shape(), 0.4),
                t: 80,
                cond: None,
                eps: probe(cfg.shape(), 2.1),
            },
        ];
        let (_, grad) = m.loss_and_grad(&batch).unwrap();
        // small enough to stay clear of ReLU kinks
        let h = 2e-3f32;
        let mut checked = 0;
        for (fi, name) in PARAM_NAMES.iter().enumerate() {
            let len = m.params.fields()[fi].len();
            for idx in (0..len).step_by((len / 4).max(1)) {
                let orig = m.params.fields()[fi][idx];
                m.params.fields_mut()[fi][idx] = orig + h;
                let (lp, _) = m.loss_and_grad(&batch).unwrap();
                m.params.fields_mut()[fi][idx] = orig - h;
                let (lm, _) = m.loss_and_grad(&batch).unwrap();
                m.params.fields_mut()[fi][idx] = orig;
                let fd = (lp - lm) / (2.0 * h as f64);
                let an = grad.fields()[fi][idx] as f64;
                let tol = 2e-3 + 2e-2 * fd.abs().max(an.abs());
                assert!(
                    (fd - an).abs() < tol,
                    "{name} [{idx}]: fd {fd} vs analytic {an}"
                );
                checked += 1;
            }
        }
        assert!(checked > 40);
    }

    #[test]
    fn short_training_reduces_loss() {
        let cfg = TinyConfig::toy(1, 8, 8, 3, 100);
        let sched = NoiseSchedule::build(ScheduleKind::Linear, 100, 1e-3, 0.2).unwrap();
        let tc = TrainConfig {
            seed: 1,
            steps: 60,
            batch: 8,
            lr: 1e-2,
            cond_drop: 0.2,
        };
        let mut losses = Vec::new();
        train(
            cfg,
            &sched,
            &tc,
            |i| {
                let on = i % 2 == 0;
                (
                    Field::from_fn(
                        (1, 8, 8),
                        |_, y, x| if on && y < 4 && x < 4 { 1.0 } else { 0.0 },
                    ),
                    vec![if on { 1 } else { 2 }],
                )
            },
            |_, l| losses.push(l),
        )
        .unwrap();
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }
}
