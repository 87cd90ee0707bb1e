//! Forward and reverse passes of the two-stream transformer.
//!
//! Both streams are stacked into one activation matrix: rows `0..t` are the
//! content stream (BOS sentinel first, then the `n` tokens) and rows
//! `t..t+n` are the query stream, one row per predicted position. All
//! row-wise weights are shared, so projections, feed-forward blocks and layer
//! norms run once over the stacked matrix. Keys and values always come from
//! the content rows; each row attends only to the content columns its mask
//! allows. Blocked columns get probability exactly zero, which is what an
//! additive `-inf` mask produces after the softmax.
//!
//! The last layer only updates query rows: its content output is never read.

use super::{ModelParams, NetError};
use crate::grouping::Grouping;
use crate::masking::MaskPair;
use crate::tensor::{
    axpy, gemm_strided, matmul, matmul_into, matmul_nt_into, matmul_tn_acc, Mat, Scalar, Strided,
};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Visible content columns for every stacked row.
pub(crate) struct Layout {
    pub n: usize,
    pub t: usize,
    pub rows: usize,
    pub tokens: Vec<u32>,
    /// `rows × t`, row-major.
    pub visible: Vec<bool>,
}

impl Layout {
    pub fn new<T: Scalar>(params: &ModelParams<T>, tokens: &[u32], g: &Grouping) -> Result<Self, NetError> {
        let cfg = &params.config;
        let n = tokens.len();
        if n == 0 {
            return Err(NetError::EmptySequence);
        }
        if n > cfg.max_tokens() {
            return Err(NetError::SequenceTooLong {
                len: n,
                max: cfg.max_tokens(),
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&x| x as usize >= cfg.vocab_size) {
            return Err(NetError::InvalidToken {
                token: bad,
                vocab_size: cfg.vocab_size,
            });
        }
        g.validate(n)?;
        let masks = MaskPair::new(g, true)?;
        let t = n + 1;
        let mut visible = Vec::with_capacity((t + n) * t);
        for p in 0..t {
            visible.extend_from_slice(masks.content.row(p));
        }
        // The sentinel never gets a query row.
        for p in 1..t {
            let row = masks.query.row(p);
            if !row.iter().any(|&b| b) {
                return Err(NetError::Internal(format!("query row {p} has no visible column")));
            }
            visible.extend_from_slice(row);
        }
        let mut content_tokens = Vec::with_capacity(t);
        content_tokens.push(cfg.bos);
        content_tokens.extend_from_slice(tokens);
        Ok(Self {
            n,
            t,
            rows: t + n,
            tokens: content_tokens,
            visible,
        })
    }

    fn visible_row(&self, row: usize) -> &[bool] {
        &self.visible[row * self.t..(row + 1) * self.t]
    }

    /// Position index (into the position table) of a stacked row.
    fn position(&self, row: usize) -> usize {
        if row < self.t {
            row
        } else {
            row - self.t + 1
        }
    }
}

struct LayerCache<T> {
    /// First stacked row this layer updates.
    a0: usize,
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    a1: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    /// Attention probabilities, `heads × active × t`.
    probs: Vec<T>,
    attn: Mat<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    a2: Mat<T>,
    pre: Mat<T>,
    /// `tanh` term of the GELU, reused by the reverse pass.
    th: Vec<T>,
    act: Mat<T>,
}

pub(crate) struct Trace<T> {
    layers: Vec<LayerCache<T>>,
    /// Content rows feeding the last layer's keys and values (BOS included).
    pub content: Mat<T>,
    xhatf: Vec<T>,
    rstdf: Vec<T>,
    z: Mat<T>,
    pub logits: Mat<T>,
    /// Output of every layer, kept only for non-finite diagnostics.
    finite_layers: Vec<bool>,
}

fn layer_norm<T: Scalar>(
    x: &[T],
    d: usize,
    gain: &[T],
    bias: &[T],
    out: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(LN_EPS);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::ONE / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for c in 0..d {
            xh[c] = (row[c] - mean) * rs;
            o[c] = xh[c] * gain[c] + bias[c];
        }
    }
}

/// Accumulates the input gradient of a layer norm into `dx` and the
/// parameter gradients into `dgain`/`dbias`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_back<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    d: usize,
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dxhat = vec![T::ZERO; d];
    for (r, dyr) in dy.chunks_exact(d).enumerate() {
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::ZERO;
        let mut mean_dxhat_xhat = T::ZERO;
        for c in 0..d {
            dgain[c] += dyr[c] * xh[c];
            dbias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = rstd[r];
        let dxr = &mut dx[r * d..(r + 1) * d];
        for c in 0..d {
            dxr[c] += rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
}

/// `tanh` through `exp`, several times cheaper than the libm call.
fn tanh<T: Scalar>(y: T) -> T {
    let two = T::from_f64(2.0);
    T::ONE - two / ((two * y).exp() + T::ONE)
}

/// Tanh-approximated GELU; returns the activation and its `tanh` term.
fn gelu<T: Scalar>(u: T) -> (T, T) {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    let th = tanh(c * (u + k * u * u * u));
    (half * u * (T::ONE + th), th)
}

fn gelu_grad<T: Scalar>(u: T, th: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    half * (T::ONE + th) + half * u * (T::ONE - th * th) * c * (T::ONE + T::from_f64(3.0) * k * u * u)
}

fn all_finite<T: Scalar>(xs: &[T]) -> bool {
    xs.iter().all(|v| v.is_finite())
}

/// In-place softmax of `scale * row` over the visible entries; blocked
/// entries become exactly zero.
fn masked_softmax<T: Scalar>(row: &mut [T], visible: &[bool], scale: T) {
    let mut max: Option<T> = None;
    for (x, &ok) in row.iter_mut().zip(visible) {
        if ok {
            *x *= scale;
            max = Some(match max {
                Some(m) if m >= *x => m,
                _ => *x,
            });
        }
    }
    let max = max.expect("layout guarantees a visible column");
    let mut sum = T::ZERO;
    for (x, &ok) in row.iter_mut().zip(visible) {
        if ok {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = T::ZERO;
        }
    }
    let inv = T::ONE / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Runs the stacked network and keeps everything the reverse pass needs.
pub(crate) fn run<T: Scalar>(params: &ModelParams<T>, lay: &Layout) -> Trace<T> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let t = lay.t;

    let mut h = Mat::zeros(lay.rows, d);
    for r in 0..lay.rows {
        let row = h.row_mut(r);
        let src = if r < t {
            params.tok_emb.row(lay.tokens[r] as usize)
        } else {
            &params.query[..]
        };
        let pos = params.pos_emb.row(lay.position(r));
        for c in 0..d {
            row[c] = src[c] + pos[c];
        }
    }

    let n_layers = params.layers.len();
    let mut caches = Vec::with_capacity(n_layers);
    let mut finite_layers = Vec::with_capacity(n_layers);
    let mut content = Mat::zeros(0, d);
    for (l, lp) in params.layers.iter().enumerate() {
        let last = l + 1 == n_layers;
        let a0 = if last { t } else { 0 };
        let active = lay.rows - a0;
        if last {
            content = h.slice_rows(0, t);
        }

        let mut a1 = Mat::zeros(lay.rows, d);
        let mut xhat1 = vec![T::ZERO; lay.rows * d];
        let mut rstd1 = vec![T::ZERO; lay.rows];
        layer_norm(
            &h.data,
            d,
            &lp.ln1_gain,
            &lp.ln1_bias,
            &mut a1.data,
            &mut xhat1,
            &mut rstd1,
        );

        let q = matmul(&a1.data[a0 * d..], active, d, &lp.wq);
        let k = matmul(&a1.data, t, d, &lp.wk);
        let v = matmul(&a1.data, t, d, &lp.wv);

        let mut probs = vec![T::ZERO; n_heads * active * t];
        let mut attn = Mat::zeros(active, d);
        for hd in 0..n_heads {
            let p = &mut probs[hd * active * t..(hd + 1) * active * t];
            gemm_strided(
                active,
                dh,
                t,
                &q.data,
                Strided::row_major(hd * dh, d),
                &k.data,
                Strided::transposed(hd * dh, d),
                T::ZERO,
                p,
                Strided::row_major(0, t),
            );
            for (ar, row) in p.chunks_exact_mut(t).enumerate() {
                masked_softmax(row, lay.visible_row(ar + a0), scale);
            }
            gemm_strided(
                active,
                t,
                dh,
                p,
                Strided::row_major(0, t),
                &v.data,
                Strided::row_major(hd * dh, d),
                T::ZERO,
                &mut attn.data,
                Strided::row_major(hd * dh, d),
            );
        }

        let mut h1 = h.slice_rows(a0, lay.rows);
        matmul_into(&attn.data, active, d, &lp.wo, &mut h1.data, true);

        let mut a2 = Mat::zeros(active, d);
        let mut xhat2 = vec![T::ZERO; active * d];
        let mut rstd2 = vec![T::ZERO; active];
        layer_norm(
            &h1.data,
            d,
            &lp.ln2_gain,
            &lp.ln2_bias,
            &mut a2.data,
            &mut xhat2,
            &mut rstd2,
        );
        let pre = matmul(&a2.data, active, d, &lp.ff_in);
        let (act, th): (Vec<T>, Vec<T>) = pre.data.iter().map(|&u| gelu(u)).unzip();
        let act = Mat::from_vec(active, cfg.d_ff, act);
        matmul_into(&act.data, active, cfg.d_ff, &lp.ff_out, &mut h1.data, true);

        finite_layers.push(all_finite(&h1.data));
        h = h1;
        caches.push(LayerCache {
            a0,
            xhat1,
            rstd1,
            a1,
            q,
            k,
            v,
            probs,
            attn,
            xhat2,
            rstd2,
            a2,
            pre,
            th,
            act,
        });
    }

    // After the last layer `h` holds exactly the query rows.
    let nq = lay.n;
    let mut z = Mat::zeros(nq, d);
    let mut xhatf = vec![T::ZERO; nq * d];
    let mut rstdf = vec![T::ZERO; nq];
    layer_norm(
        &h.data,
        d,
        &params.lnf_gain,
        &params.lnf_bias,
        &mut z.data,
        &mut xhatf,
        &mut rstdf,
    );
    let logits = matmul(&z.data, nq, d, &params.out_proj);
    Trace {
        layers: caches,
        content,
        xhatf,
        rstdf,
        z,
        logits,
        finite_layers,
    }
}

/// Row-wise log-softmax.
pub(crate) fn log_softmax_rows<T: Scalar>(logits: &Mat<T>) -> Mat<T> {
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(row[0], |m, s| if s > m { s } else { m });
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
        for x in row.iter_mut() {
            *x -= lse;
        }
    }
    out
}

/// Mean cross-entropy of `trace` against the tokens and its exact gradient.
pub(crate) fn backward<T: Scalar>(
    params: &ModelParams<T>,
    lay: &Layout,
    trace: &Trace<T>,
    grads: &mut ModelParams<T>,
) -> Result<T, NetError> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let t = lay.t;
    let n = lay.n;
    let inv_n = T::from_f64(1.0 / n as f64);

    let logp = log_softmax_rows(&trace.logits);
    let mut loss = T::ZERO;
    let mut dlogits = Mat::zeros(n, cfg.vocab_size);
    for i in 0..n {
        let target = lay.tokens[i + 1] as usize;
        let lp = logp.row(i);
        loss -= lp[target];
        let dl = dlogits.row_mut(i);
        for (c, &v) in lp.iter().enumerate() {
            dl[c] = v.exp() * inv_n;
        }
        dl[target] -= inv_n;
    }
    loss *= inv_n;
    if !loss.is_finite() {
        let layer = trace.finite_layers.iter().position(|ok| !ok);
        return Err(NetError::NonFinite { layer });
    }

    matmul_tn_acc(
        &trace.z.data,
        &dlogits.data,
        n,
        d,
        cfg.vocab_size,
        &mut grads.out_proj,
    );
    let mut dz = vec![T::ZERO; n * d];
    matmul_nt_into(&dlogits.data, n, &params.out_proj, &mut dz, false);
    let mut dh_out = vec![T::ZERO; n * d];
    layer_norm_back(
        &dz,
        &trace.xhatf,
        &trace.rstdf,
        &params.lnf_gain,
        d,
        &mut dh_out,
        &mut grads.lnf_gain,
        &mut grads.lnf_bias,
    );

    for (l, cache) in trace.layers.iter().enumerate().rev() {
        let lp = &params.layers[l];
        let gl = &mut grads.layers[l];
        let a0 = cache.a0;
        let active = lay.rows - a0;

        // Feed-forward block.
        let mut dh1 = dh_out.clone();
        matmul_tn_acc(&cache.act.data, &dh_out, active, f, d, &mut gl.ff_out);
        let mut dpre = vec![T::ZERO; active * f];
        matmul_nt_into(&dh_out, active, &lp.ff_out, &mut dpre, false);
        for ((g, &u), &th) in dpre.iter_mut().zip(&cache.pre.data).zip(&cache.th) {
            *g *= gelu_grad(u, th);
        }
        matmul_tn_acc(&cache.a2.data, &dpre, active, d, f, &mut gl.ff_in);
        let mut da2 = vec![T::ZERO; active * d];
        matmul_nt_into(&dpre, active, &lp.ff_in, &mut da2, false);
        layer_norm_back(
            &da2,
            &cache.xhat2,
            &cache.rstd2,
            &lp.ln2_gain,
            d,
            &mut dh1,
            &mut gl.ln2_gain,
            &mut gl.ln2_bias,
        );

        // Attention output projection.
        matmul_tn_acc(&cache.attn.data, &dh1, active, d, d, &mut gl.wo);
        let mut dattn = vec![T::ZERO; active * d];
        matmul_nt_into(&dh1, active, &lp.wo, &mut dattn, false);

        // Masked softmax attention.
        let mut dq = Mat::zeros(active, d);
        let mut dk = Mat::zeros(t, d);
        let mut dv = Mat::zeros(t, d);
        let mut ds = vec![T::ZERO; active * t];
        for hd in 0..n_heads {
            let p = &cache.probs[hd * active * t..(hd + 1) * active * t];
            // dP = dO · Vᵀ
            gemm_strided(
                active,
                dh,
                t,
                &dattn,
                Strided::row_major(hd * dh, d),
                &cache.v.data,
                Strided::transposed(hd * dh, d),
                T::ZERO,
                &mut ds,
                Strided::row_major(0, t),
            );
            for (dsr, pr) in ds.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
                let weighted: T = dsr.iter().zip(pr).map(|(&g, &pj)| g * pj).sum();
                for (g, &pj) in dsr.iter_mut().zip(pr) {
                    *g = pj * (*g - weighted) * scale;
                }
            }
            // dV = Pᵀ · dO
            gemm_strided(
                t,
                active,
                dh,
                p,
                Strided::transposed(0, t),
                &dattn,
                Strided::row_major(hd * dh, d),
                T::ZERO,
                &mut dv.data,
                Strided::row_major(hd * dh, d),
            );
            // dQ = dS · K
            gemm_strided(
                active,
                t,
                dh,
                &ds,
                Strided::row_major(0, t),
                &cache.k.data,
                Strided::row_major(hd * dh, d),
                T::ZERO,
                &mut dq.data,
                Strided::row_major(hd * dh, d),
            );
            // dK = dSᵀ · Q
            gemm_strided(
                t,
                active,
                dh,
                &ds,
                Strided::transposed(0, t),
                &cache.q.data,
                Strided::row_major(hd * dh, d),
                T::ZERO,
                &mut dk.data,
                Strided::row_major(hd * dh, d),
            );
        }

        let mut da1 = vec![T::ZERO; lay.rows * d];
        matmul_tn_acc(&cache.a1.data[a0 * d..], &dq.data, active, d, d, &mut gl.wq);
        matmul_nt_into(&dq.data, active, &lp.wq, &mut da1[a0 * d..], true);
        matmul_tn_acc(&cache.a1.data, &dk.data, t, d, d, &mut gl.wk);
        matmul_nt_into(&dk.data, t, &lp.wk, &mut da1, true);
        matmul_tn_acc(&cache.a1.data, &dv.data, t, d, d, &mut gl.wv);
        matmul_nt_into(&dv.data, t, &lp.wv, &mut da1, true);

        let mut dh_in = vec![T::ZERO; lay.rows * d];
        layer_norm_back(
            &da1,
            &cache.xhat1,
            &cache.rstd1,
            &lp.ln1_gain,
            d,
            &mut dh_in,
            &mut gl.ln1_gain,
            &mut gl.ln1_bias,
        );
        for (dst, &src) in dh_in[a0 * d..].iter_mut().zip(&dh1) {
            *dst += src;
        }
        dh_out = dh_in;
    }

    // Embeddings.
    for r in 0..lay.rows {
        let g = &dh_out[r * d..(r + 1) * d];
        if r < t {
            axpy(T::ONE, g, grads.tok_emb.row_mut(lay.tokens[r] as usize));
        } else {
            axpy(T::ONE, g, &mut grads.query);
        }
        axpy(T::ONE, g, grads.pos_emb.row_mut(lay.position(r)));
    }
    Ok(loss)
}
