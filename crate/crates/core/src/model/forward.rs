//! Pre-norm decoder forward pass with residual-stream capture and
//! in-flight patching, plus the matching reverse-mode backward pass.

use super::ops::{acc_at_b, gelu, gelu_grad, matmul, matmul_bt, position_code, rmsnorm, rmsnorm_backward};
use super::params::{LayerOffsets, Parameters};
use super::{ActivationTrace, PatchAction, PatchPlan, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

struct LayerCache {
    x_in: Vec<f64>,
    a: Vec<f64>,
    inv1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    x_mid: Vec<f64>,
    b: Vec<f64>,
    inv2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Intermediate values retained for [`backward`].
pub struct ForwardCache {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    inv_final: Vec<f64>,
    normed: Vec<f64>,
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `seq_len x vocab_size`.
    pub logits: Matrix,
    pub trace: ActivationTrace,
}

fn check_input(params: &Parameters, seq: &TokenSequence) -> Result<Vec<usize>> {
    let c = params.config();
    if seq.len() > c.max_seq_len {
        return Err(Error::ContextOverflow {
            len: seq.len(),
            max: c.max_seq_len,
        });
    }
    seq.tokens()
        .iter()
        .map(|&t| {
            let t = t as usize;
            if t < c.vocab_size {
                Ok(t)
            } else {
                Err(Error::InvalidArgument(format!(
                    "token {t} outside vocabulary of {}",
                    c.vocab_size
                )))
            }
        })
        .collect()
}

fn check_plan(params: &Parameters, plan: &PatchPlan, seq_len: usize) -> Result<()> {
    let c = params.config();
    if plan.layer >= c.n_layers {
        return Err(Error::Shape(format!(
            "patch layer {} but model has {} layers",
            plan.layer, c.n_layers
        )));
    }
    if !(0.0..=1.0).contains(&plan.alpha) {
        return Err(Error::InvalidArgument(format!("alpha {} outside [0, 1]", plan.alpha)));
    }
    let m = plan.action.matrix();
    if m.cols() != c.d_model || m.rows() != seq_len {
        return Err(Error::Shape(format!(
            "patch matrix is {}x{}, sequence needs {}x{}",
            m.rows(),
            m.cols(),
            seq_len,
            c.d_model
        )));
    }
    if let Some(pos) = &plan.positions {
        if let Some(p) = pos.iter().find(|&&p| p >= seq_len) {
            return Err(Error::Shape(format!("patch position {p} beyond sequence length {seq_len}")));
        }
    }
    Ok(())
}

fn apply_patch(plan: &PatchPlan, x: &mut [f64], d: usize, seq_len: usize) {
    if plan.alpha == 0.0 {
        return;
    }
    let alpha = plan.alpha;
    let mut patch_row = |t: usize| {
        let row = &mut x[t * d..(t + 1) * d];
        match &plan.action {
            PatchAction::Replace(m) => {
                for (h, r) in row.iter_mut().zip(m.row(t)) {
                    *h = (1.0 - alpha) * *h + alpha * r;
                }
            }
            PatchAction::Add(m) => {
                for (h, r) in row.iter_mut().zip(m.row(t)) {
                    *h += alpha * r;
                }
            }
        }
    };
    match &plan.positions {
        Some(pos) => pos.iter().for_each(|&t| patch_row(t)),
        None => (0..seq_len).for_each(patch_row),
    }
}

fn embed(params: &Parameters, tokens: &[usize]) -> Vec<f64> {
    let d = params.config().d_model;
    let emb = &params.flat()[params.layout.tok_emb..];
    let mut x = vec![0.0; tokens.len() * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let pos = position_code(t, d);
        for j in 0..d {
            x[t * d + j] = emb[tok * d + j] + pos[j];
        }
    }
    x
}

fn attention(params: &Parameters, q: &[f64], k: &[f64], v: &[f64], t_len: usize) -> (Vec<f64>, Vec<f64>) {
    let c = params.config();
    let (d, h, dh) = (c.d_model, c.n_heads, c.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; h * t_len * t_len];
    let mut o = vec![0.0; t_len * d];
    for head in 0..h {
        let off = head * dh;
        for t in 0..t_len {
            let qt = &q[t * d + off..t * d + off + dh];
            let p = &mut probs[(head * t_len + t) * t_len..(head * t_len + t + 1) * t_len];
            let mut max = f64::NEG_INFINITY;
            for s in 0..=t {
                let ks = &k[s * d + off..s * d + off + dh];
                let score = qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
                p[s] = score;
                max = max.max(score);
            }
            let mut z = 0.0;
            for ps in &mut p[..=t] {
                *ps = (*ps - max).exp();
                z += *ps;
            }
            let ot = &mut o[t * d + off..t * d + off + dh];
            for s in 0..=t {
                p[s] /= z;
                let vs = &v[s * d + off..s * d + off + dh];
                for (oo, vv) in ot.iter_mut().zip(vs) {
                    *oo += p[s] * vv;
                }
            }
        }
    }
    (probs, o)
}

fn run(
    params: &Parameters,
    seq: &TokenSequence,
    plan: Option<&PatchPlan>,
    keep_cache: bool,
) -> Result<(ForwardOutput, Option<ForwardCache>)> {
    let tokens = check_input(params, seq)?;
    let t_len = tokens.len();
    if let Some(p) = plan {
        check_plan(params, p, t_len)?;
    }
    let c = params.config();
    let (d, f, vsz) = (c.d_model, c.d_ff, c.vocab_size);
    let w = params.flat();

    let mut x = embed(params, &tokens);
    let pre = Matrix::new(t_len, d, x.clone())?;
    let mut layers_out = Vec::with_capacity(c.n_layers);
    let mut caches = Vec::new();

    for (l, off) in params.layout.layers.iter().enumerate() {
        let LayerOffsets {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            ff_norm,
            w1,
            w2,
        } = *off;
        let (a, inv1) = rmsnorm(&x, &w[attn_norm..attn_norm + d], t_len);
        let q = matmul(&a, &w[wq..wq + d * d], t_len, d, d);
        let k = matmul(&a, &w[wk..wk + d * d], t_len, d, d);
        let v = matmul(&a, &w[wv..wv + d * d], t_len, d, d);
        let (probs, o) = attention(params, &q, &k, &v, t_len);
        let attn_out = matmul(&o, &w[wo..wo + d * d], t_len, d, d);
        let x_mid: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
        let (b, inv2) = rmsnorm(&x_mid, &w[ff_norm..ff_norm + d], t_len);
        let u = matmul(&b, &w[w1..w1 + d * f], t_len, d, f);
        let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        let ff = matmul(&g, &w[w2..w2 + f * d], t_len, f, d);
        let mut x_out: Vec<f64> = x_mid.iter().zip(&ff).map(|(a, b)| a + b).collect();
        if let Some(p) = plan.filter(|p| p.layer == l) {
            apply_patch(p, &mut x_out, d, t_len);
        }
        layers_out.push(Matrix::new(t_len, d, x_out.clone())?);
        if keep_cache {
            caches.push(LayerCache {
                x_in: std::mem::take(&mut x),
                a,
                inv1,
                q,
                k,
                v,
                probs,
                o,
                x_mid,
                b,
                inv2,
                u,
                g,
            });
        }
        x = x_out;
    }

    let fnorm = params.layout.final_norm;
    let (normed, inv_final) = rmsnorm(&x, &w[fnorm..fnorm + d], t_len);
    let ue = params.layout.unembed;
    let logits = matmul(&normed, &w[ue..ue + d * vsz], t_len, d, vsz);
    let out = ForwardOutput {
        logits: Matrix::new(t_len, vsz, logits)?,
        trace: ActivationTrace { pre, layers: layers_out },
    };
    let cache = keep_cache.then(|| ForwardCache {
        tokens,
        layers: caches,
        x_final: x,
        inv_final,
        normed,
    });
    Ok((out, cache))
}

/// Runs the model on `seq`, optionally patching one layer's residual stream.
pub fn forward(params: &Parameters, seq: &TokenSequence, plan: Option<&PatchPlan>) -> Result<ForwardOutput> {
    run(params, seq, plan, false).map(|(o, _)| o)
}

/// Unpatched forward pass that also keeps what [`backward`] needs.
pub fn forward_with_cache(params: &Parameters, seq: &TokenSequence) -> Result<(ForwardOutput, ForwardCache)> {
    let (out, cache) = run(params, seq, None, true)?;
    Ok((out, cache.expect("cache requested")))
}

/// Accumulates `d loss / d params` into `grad` given `d loss / d logits`.
pub fn backward(params: &Parameters, cache: &ForwardCache, dlogits: &Matrix, grad: &mut [f64]) {
    let c = params.config();
    let (d, f, vsz, h, dh) = (c.d_model, c.d_ff, c.vocab_size, c.n_heads, c.head_dim());
    let t_len = cache.tokens.len();
    let w = params.flat();
    assert_eq!(grad.len(), w.len());
    assert_eq!(dlogits.rows(), t_len);

    let ue = params.layout.unembed;
    acc_at_b(&cache.normed, dlogits.data(), t_len, d, vsz, &mut grad[ue..ue + d * vsz]);
    let dnormed = matmul_bt(dlogits.data(), &w[ue..ue + d * vsz], t_len, vsz, d);
    let fnorm = params.layout.final_norm;
    let mut dx = rmsnorm_backward(
        &cache.x_final,
        &w[fnorm..fnorm + d],
        &cache.inv_final,
        &dnormed,
        &mut grad[fnorm..fnorm + d],
    );

    let scale = 1.0 / (dh as f64).sqrt();
    for (lc, off) in cache.layers.iter().zip(&params.layout.layers).rev() {
        // feed-forward branch; dx is d(x_out)
        acc_at_b(&lc.g, &dx, t_len, f, d, &mut grad[off.w2..off.w2 + f * d]);
        let mut du = matmul_bt(&dx, &w[off.w2..off.w2 + f * d], t_len, d, f);
        for (g, &z) in du.iter_mut().zip(&lc.u) {
            *g *= gelu_grad(z);
        }
        acc_at_b(&lc.b, &du, t_len, d, f, &mut grad[off.w1..off.w1 + d * f]);
        let db = matmul_bt(&du, &w[off.w1..off.w1 + d * f], t_len, f, d);
        let dmid_ff = rmsnorm_backward(
            &lc.x_mid,
            &w[off.ff_norm..off.ff_norm + d],
            &lc.inv2,
            &db,
            &mut grad[off.ff_norm..off.ff_norm + d],
        );
        let dmid: Vec<f64> = dx.iter().zip(&dmid_ff).map(|(a, b)| a + b).collect();

        // attention branch
        acc_at_b(&lc.o, &dmid, t_len, d, d, &mut grad[off.wo..off.wo + d * d]);
        let dout = matmul_bt(&dmid, &w[off.wo..off.wo + d * d], t_len, d, d);
        let mut dq = vec![0.0; t_len * d];
        let mut dk = vec![0.0; t_len * d];
        let mut dv = vec![0.0; t_len * d];
        let mut dp = vec![0.0; t_len];
        for head in 0..h {
            let hoff = head * dh;
            for t in 0..t_len {
                let p = &lc.probs[(head * t_len + t) * t_len..(head * t_len + t + 1) * t_len];
                let dot_t = &dout[t * d + hoff..t * d + hoff + dh];
                let mut weighted = 0.0;
                for s in 0..=t {
                    let vs = &lc.v[s * d + hoff..s * d + hoff + dh];
                    dp[s] = dot_t.iter().zip(vs).map(|(a, b)| a * b).sum();
                    weighted += p[s] * dp[s];
                    let dvs = &mut dv[s * d + hoff..s * d + hoff + dh];
                    for (g, o) in dvs.iter_mut().zip(dot_t) {
                        *g += p[s] * o;
                    }
                }
                for s in 0..=t {
                    let ds = p[s] * (dp[s] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for j in 0..dh {
                        dq[t * d + hoff + j] += ds * lc.k[s * d + hoff + j];
                        dk[s * d + hoff + j] += ds * lc.q[t * d + hoff + j];
                    }
                }
            }
        }
        acc_at_b(&lc.a, &dq, t_len, d, d, &mut grad[off.wq..off.wq + d * d]);
        acc_at_b(&lc.a, &dk, t_len, d, d, &mut grad[off.wk..off.wk + d * d]);
        acc_at_b(&lc.a, &dv, t_len, d, d, &mut grad[off.wv..off.wv + d * d]);
        let mut da = matmul_bt(&dq, &w[off.wq..off.wq + d * d], t_len, d, d);
        for (x, y) in da.iter_mut().zip(matmul_bt(&dk, &w[off.wk..off.wk + d * d], t_len, d, d)) {
            *x += y;
        }
        for (x, y) in da.iter_mut().zip(matmul_bt(&dv, &w[off.wv..off.wv + d * d], t_len, d, d)) {
            *x += y;
        }
        let din_attn = rmsnorm_backward(
            &lc.x_in,
            &w[off.attn_norm..off.attn_norm + d],
            &lc.inv1,
            &da,
            &mut grad[off.attn_norm..off.attn_norm + d],
        );
        dx = dmid.iter().zip(&din_attn).map(|(a, b)| a + b).collect();
    }

    let emb = params.layout.tok_emb;
    for (t, &tok) in cache.tokens.iter().enumerate() {
        let g = &mut grad[emb + tok * d..emb + (tok + 1) * d];
        for (gv, dv) in g.iter_mut().zip(&dx[t * d..(t + 1) * d]) {
            *gv += dv;
        }
    }
}
