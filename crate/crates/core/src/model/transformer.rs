//! Pre-norm decoder blocks with hand-written backward passes.
//!
//! Every tensor is `f64`. The residual stream after block `l` receives
//! `alpha[l] * csv[l]` at every position when a shift is supplied.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    /// `[d_model, 3 * d_model]`, columns ordered q | k | v.
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_fc: Array2<f64>,
    pub b_fc: Array1<f64>,
    pub w_proj: Array2<f64>,
    pub b_proj: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    /// `[img_prefix_len * d_model, d_img]`: slot `j` owns rows `j*d .. (j+1)*d`.
    pub img_w: Array2<f64>,
    pub img_b: Array1<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

/// A named tensor view: name, shape and row-major values.
pub type NamedTensor<'a> = (String, Vec<usize>, &'a [f64]);

impl Params {
    pub fn init(config: &ModelConfig, vocab_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let d = config.d_model;
        let mut mat = |r: usize, c: usize, scale: f64| {
            Array2::from_shape_fn((r, c), |_| scale * normal.sample(&mut rng))
        };
        let tok_emb = mat(vocab_size, d, 1.0);
        let pos_emb = mat(config.max_seq, d, 1.0);
        let img_w = mat(config.img_prefix_len * d, config.d_img, 1.0);
        let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                w_qkv: mat(d, 3 * d, 1.0),
                b_qkv: Array1::zeros(3 * d),
                w_o: mat(d, d, residual_scale),
                b_o: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w_fc: mat(d, config.d_ff, 1.0),
                b_fc: Array1::zeros(config.d_ff),
                w_proj: mat(config.d_ff, d, residual_scale),
                b_proj: Array1::zeros(d),
            })
            .collect();
        Params {
            tok_emb,
            pos_emb,
            img_w,
            img_b: Array1::zeros(config.img_prefix_len * d),
            layers,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            w_out: mat(d, vocab_size, 1.0),
            b_out: Array1::zeros(vocab_size),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, v| v.fill(0.0));
        z
    }

    /// Visits every tensor in a fixed order with its checkpoint name.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        fn sl<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        f("tok_emb", sl(&mut self.tok_emb));
        f("pos_emb", sl(&mut self.pos_emb));
        f("img_w", sl(&mut self.img_w));
        f("img_b", sl(&mut self.img_b));
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{i}.ln1_g"), sl(&mut l.ln1_g));
            f(&format!("layers.{i}.ln1_b"), sl(&mut l.ln1_b));
            f(&format!("layers.{i}.w_qkv"), sl(&mut l.w_qkv));
            f(&format!("layers.{i}.b_qkv"), sl(&mut l.b_qkv));
            f(&format!("layers.{i}.w_o"), sl(&mut l.w_o));
            f(&format!("layers.{i}.b_o"), sl(&mut l.b_o));
            f(&format!("layers.{i}.ln2_g"), sl(&mut l.ln2_g));
            f(&format!("layers.{i}.ln2_b"), sl(&mut l.ln2_b));
            f(&format!("layers.{i}.w_fc"), sl(&mut l.w_fc));
            f(&format!("layers.{i}.b_fc"), sl(&mut l.b_fc));
            f(&format!("layers.{i}.w_proj"), sl(&mut l.w_proj));
            f(&format!("layers.{i}.b_proj"), sl(&mut l.b_proj));
        }
        f("lnf_g", sl(&mut self.lnf_g));
        f("lnf_b", sl(&mut self.lnf_b));
        f("w_out", sl(&mut self.w_out));
        f("b_out", sl(&mut self.b_out));
    }

    /// Read-only view of every tensor in checkpoint order.
    pub fn named(&self) -> Vec<NamedTensor<'_>> {
        fn v<D: ndarray::Dimension>(name: String, a: &ndarray::Array<f64, D>) -> NamedTensor<'_> {
            (name, a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        let mut out = vec![
            v("tok_emb".into(), &self.tok_emb),
            v("pos_emb".into(), &self.pos_emb),
            v("img_w".into(), &self.img_w),
            v("img_b".into(), &self.img_b),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(v(format!("layers.{i}.ln1_g"), &l.ln1_g));
            out.push(v(format!("layers.{i}.ln1_b"), &l.ln1_b));
            out.push(v(format!("layers.{i}.w_qkv"), &l.w_qkv));
            out.push(v(format!("layers.{i}.b_qkv"), &l.b_qkv));
            out.push(v(format!("layers.{i}.w_o"), &l.w_o));
            out.push(v(format!("layers.{i}.b_o"), &l.b_o));
            out.push(v(format!("layers.{i}.ln2_g"), &l.ln2_g));
            out.push(v(format!("layers.{i}.ln2_b"), &l.ln2_b));
            out.push(v(format!("layers.{i}.w_fc"), &l.w_fc));
            out.push(v(format!("layers.{i}.b_fc"), &l.b_fc));
            out.push(v(format!("layers.{i}.w_proj"), &l.w_proj));
            out.push(v(format!("layers.{i}.b_proj"), &l.b_proj));
        }
        out.push(v("lnf_g".into(), &self.lnf_g));
        out.push(v("lnf_b".into(), &self.lnf_b));
        out.push(v("w_out".into(), &self.w_out));
        out.push(v("b_out".into(), &self.b_out));
        out
    }

    pub fn add_assign(&mut self, other: &Params) {
        let flat: Vec<Vec<f64>> = other.named().into_iter().map(|(_, _, v)| v.to_vec()).collect();
        let mut i = 0;
        self.for_each_mut(|_, dst| {
            for (d, s) in dst.iter_mut().zip(&flat[i]) {
                *d += s;
            }
            i += 1;
        });
    }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Dense input to the blocks: token ids with optional image-slot overrides.
pub struct Input<'a> {
    pub tokens: &'a [usize],
    /// `(position, slot index, image features)`.
    pub image_slots: Vec<(usize, usize, &'a [f64])>,
}

/// Per-layer additive shift already multiplied out (`alpha * csv`).
pub type ResidualShift = [Vec<f64>];

struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerCache {
    ln1: LayerNormCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LayerNormCache,
    m: Array2<f64>,
    u: Array2<f64>,
    h: Array2<f64>,
}

/// Activations retained for the backward pass.
pub struct Trace {
    layers: Vec<LayerCache>,
    /// Residual stream after each block (post-shift), `n_layers` entries.
    pub outputs: Vec<Array2<f64>>,
    rows: Vec<usize>,
    lnf: LayerNormCache,
    fin: Array2<f64>,
    pub logits: Array2<f64>,
}

fn layer_norm(x: ArrayView2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * g + b;
    (y, LayerNormCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    g: &Array1<f64>,
    grads: Option<(&mut Array1<f64>, &mut Array1<f64>)>,
) -> Array2<f64> {
    if let Some((dg, db)) = grads {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let mut dx = dy * g;
    for ((mut row, xh), &rs) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.rstd.iter()) {
        let mean = row.sum() / d;
        let mean_x = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        for (v, &x) in row.iter_mut().zip(xh.iter()) {
            *v = rs * (*v - mean - x * mean_x);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let inner = GELU_C * (u + 0.044715 * u * u * u);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn embed(params: &Params, config: &ModelConfig, input: &Input<'_>) -> Array2<f64> {
    let t = input.tokens.len();
    let d = config.d_model;
    let mut x = Array2::zeros((t, d));
    for (p, &tok) in input.tokens.iter().enumerate() {
        let mut row = x.row_mut(p);
        row.assign(&params.tok_emb.row(tok));
        row += &params.pos_emb.row(p);
    }
    for &(p, slot, features) in &input.image_slots {
        let w = params.img_w.slice(s![slot * d..(slot + 1) * d, ..]);
        let b = params.img_b.slice(s![slot * d..(slot + 1) * d]);
        let proj = w.dot(&ArrayView1::from(features)) + b;
        let mut row = x.row_mut(p);
        row.assign(&proj);
        row += &params.pos_emb.row(p);
    }
    x
}

/// Runs the blocks over `input`; logits are produced only for `rows`.
pub fn forward(
    params: &Params,
    config: &ModelConfig,
    input: &Input<'_>,
    shift: Option<&ResidualShift>,
    rows: &[usize],
) -> Trace {
    let d = config.d_model;
    let nh = config.n_heads;
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();
    let t = input.tokens.len();

    let mut x = embed(params, config, input);
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut outputs = Vec::with_capacity(params.layers.len());
    for (li, lp) in params.layers.iter().enumerate() {
        let (a, ln1) = layer_norm(x.view(), &lp.ln1_g, &lp.ln1_b);
        let qkv = a.dot(&lp.w_qkv) + &lp.b_qkv;
        let mut ctx = Array2::zeros((t, d));
        let mut probs = Vec::with_capacity(nh);
        for h in 0..nh {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut p = q.dot(&k.t());
            for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    row[j] *= scale;
                    max = max.max(row[j]);
                }
                let mut sum = 0.0;
                for j in 0..=i {
                    row[j] = (row[j] - max).exp();
                    sum += row[j];
                }
                for j in 0..=i {
                    row[j] /= sum;
                }
                for j in i + 1..t {
                    row[j] = 0.0;
                }
            }
            ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            probs.push(p);
        }
        let x_mid = &x + &(ctx.dot(&lp.w_o) + &lp.b_o);
        let (m, ln2) = layer_norm(x_mid.view(), &lp.ln2_g, &lp.ln2_b);
        let u = m.dot(&lp.w_fc) + &lp.b_fc;
        let hact = u.mapv(gelu);
        let mut out = &x_mid + &(hact.dot(&lp.w_proj) + &lp.b_proj);
        if let Some(shift) = shift {
            out += &ArrayView1::from(&shift[li][..]);
        }
        layers.push(LayerCache {
            ln1,
            a,
            qkv,
            probs,
            ctx,
            ln2,
            m,
            u,
            h: hact,
        });
        outputs.push(out.clone());
        x = out;
    }

    let picked = x.select(Axis(0), rows);
    let (fin, lnf) = layer_norm(picked.view(), &params.lnf_g, &params.lnf_b);
    let logits = fin.dot(&params.w_out) + &params.b_out;
    Trace {
        layers,
        outputs,
        rows: rows.to_vec(),
        lnf,
        fin,
        logits,
    }
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Gradients of a scalar loss given `dlogits` (one row per traced logit row).
pub struct Backward {
    /// `sum over positions of dL/d(residual after block l)`, i.e. the gradient
    /// of an additive per-layer shift.
    pub shift: Vec<Array1<f64>>,
    pub params: Option<Params>,
}

pub fn backward(
    params: &Params,
    config: &ModelConfig,
    input: &Input<'_>,
    trace: &Trace,
    dlogits: &Array2<f64>,
    want_params: bool,
) -> Backward {
    let d = config.d_model;
    let nh = config.n_heads;
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();
    let t = input.tokens.len();
    let mut grads = want_params.then(|| params.zeros_like());

    if let Some(g) = grads.as_mut() {
        g.w_out += &trace.fin.t().dot(dlogits);
        g.b_out += &dlogits.sum_axis(Axis(0));
    }
    let dfin = dlogits.dot(&params.w_out.t());
    let dpicked = layer_norm_backward(
        &dfin,
        &trace.lnf,
        &params.lnf_g,
        grads.as_mut().map(|g| (&mut g.lnf_g, &mut g.lnf_b)),
    );
    let mut dx = Array2::zeros((t, d));
    for (r, &row) in trace.rows.iter().enumerate() {
        let mut target = dx.row_mut(row);
        target += &dpicked.row(r);
    }

    let mut shift = vec![Array1::zeros(d); params.layers.len()];
    for li in (0..params.layers.len()).rev() {
        let lp = &params.layers[li];
        let c = &trace.layers[li];
        shift[li] = dx.sum_axis(Axis(0));
        let mut lg = grads.as_mut().map(|g| &mut g.layers[li]);

        // MLP
        if let Some(g) = lg.as_deref_mut() {
            g.w_proj += &c.h.t().dot(&dx);
            g.b_proj += &dx.sum_axis(Axis(0));
        }
        let mut du = dx.dot(&lp.w_proj.t());
        du.zip_mut_with(&c.u, |g, &u| *g *= gelu_grad(u));
        if let Some(g) = lg.as_deref_mut() {
            g.w_fc += &c.m.t().dot(&du);
            g.b_fc += &du.sum_axis(Axis(0));
        }
        let dm = du.dot(&lp.w_fc.t());
        let dmid = layer_norm_backward(
            &dm,
            &c.ln2,
            &lp.ln2_g,
            lg.as_deref_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b)),
        );
        let dx_mid = &dx + &dmid;

        // attention
        if let Some(g) = lg.as_deref_mut() {
            g.w_o += &c.ctx.t().dot(&dx_mid);
            g.b_o += &dx_mid.sum_axis(Axis(0));
        }
        let dctx = dx_mid.dot(&lp.w_o.t());
        let mut dqkv = Array2::zeros((t, 3 * d));
        for h in 0..nh {
            let q = c.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = c.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = c.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let p = &c.probs[h];
            let dout = dctx.slice(s![.., h * dh..(h + 1) * dh]);
            let dp = dout.dot(&v.t());
            let dv = p.t().dot(&dout);
            let mut ds = dp;
            for (i, (mut row, prow)) in ds.rows_mut().into_iter().zip(p.rows()).enumerate() {
                let dot: f64 = (0..=i).map(|j| row[j] * prow[j]).sum();
                for j in 0..=i {
                    row[j] = prow[j] * (row[j] - dot) * scale;
                }
                for j in i + 1..t {
                    row[j] = 0.0;
                }
            }
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
        }
        if let Some(g) = lg.as_deref_mut() {
            g.w_qkv += &c.a.t().dot(&dqkv);
            g.b_qkv += &dqkv.sum_axis(Axis(0));
        }
        let da = dqkv.dot(&lp.w_qkv.t());
        let dln1 = layer_norm_backward(
            &da,
            &c.ln1,
            &lp.ln1_g,
            lg.as_deref_mut().map(|g| (&mut g.ln1_g, &mut g.ln1_b)),
        );
        dx = dx_mid + dln1;
    }

    if let Some(g) = grads.as_mut() {
        let mut is_image = vec![false; t];
        for &(p, slot, features) in &input.image_slots {
            is_image[p] = true;
            let drow = dx.row(p);
            let mut w = g.img_w.slice_mut(s![slot * d..(slot + 1) * d, ..]);
            for (i, &gv) in drow.iter().enumerate() {
                for (wv, &f) in w.row_mut(i).iter_mut().zip(features) {
                    *wv += gv * f;
                }
            }
            let mut b = g.img_b.slice_mut(s![slot * d..(slot + 1) * d]);
            b += &drow;
        }
        for (p, &tok) in input.tokens.iter().enumerate() {
            let mut pe = g.pos_emb.row_mut(p);
            pe += &dx.row(p);
            if !is_image[p] {
                let mut te = g.tok_emb.row_mut(tok);
                te += &dx.row(p);
            }
        }
    }

    Backward { shift, params: grads }
}
