//! Codebook-guided attention: rendered LD features are projected to queries,
//! codebook entries to keys, and the retrieved language feature of a pixel is
//! the attention-weighted combination of the row-normalized codebook entries.
//! Includes the language loss (cosine + L1), the entropy regularizer over
//! attention rows, the exact backward pass for every parameter group, and the
//! per-gaussian retrieval path used for 3D queries.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::Real;
use crate::preprocess::Codebook;
use crate::rng::{stream_rng, Stream};
use rand::Rng;

pub const COSINE_EPS: f64 = 1e-8;

/// Query/key projections plus the (trainable) codebook they attend over.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead<T> {
    /// d_h x d query projection.
    pub wq: Vec<T>,
    pub bq: Vec<T>,
    /// d_h x D key projection.
    pub wk: Vec<T>,
    pub bk: Vec<T>,
    /// N_c x D codebook rows.
    pub codebook: Vec<T>,
    pub d: usize,
    pub dim_high: usize,
    pub d_h: usize,
    pub n_entries: usize,
}

/// Xavier-uniform projections, zero biases, codebook copied from the
/// preprocessing output. Deterministic per seed.
pub fn init_attention_head<T: Real>(
    seed: u64,
    d: usize,
    d_h: usize,
    codebook: &Codebook,
) -> AttentionHead<T> {
    let mut rng = stream_rng(seed, Stream::AttentionInit);
    let mut xavier = |rows: usize, cols: usize| -> Vec<T> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        (0..rows * cols)
            .map(|_| T::of(a * (2.0 * rng.gen::<f64>() - 1.0)))
            .collect()
    };
    AttentionHead {
        wq: xavier(d_h, d),
        bq: vec![T::zero(); d_h],
        wk: xavier(d_h, codebook.dim),
        bk: vec![T::zero(); d_h],
        codebook: codebook.entries.iter().map(|&v| T::of(v as f64)).collect(),
        d,
        dim_high: codebook.dim,
        d_h,
        n_entries: codebook.n_entries,
    }
}

/// Forward cache plus the attention weights and retrieved features.
#[derive(Debug, Clone)]
pub struct AttentionOutput<T> {
    pub n_rows: usize,
    pub n_entries: usize,
    pub dim_high: usize,
    /// n_rows x N_c attention weights, each row summing to 1.
    pub a: Vec<T>,
    /// n_rows x D retrieved language features.
    pub lhat: Vec<T>,
    pub cache: AttentionCache<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    /// n_rows x d input queries.
    pub queries: Vec<T>,
    /// n_rows x d_h projected queries.
    pub q_proj: Vec<T>,
    /// N_c x d_h projected keys.
    pub k_proj: Vec<T>,
    /// N_c x D row-normalized codebook.
    pub v: Vec<T>,
    /// Codebook row norms.
    pub s_norms: Vec<T>,
}

/// Numerically stable row softmax (max-subtracted), in place.
pub fn softmax_rows<T: Real>(logits: &mut [T], n_rows: usize, n_cols: usize) {
    for row in logits.chunks_exact_mut(n_cols).take(n_rows) {
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

fn affine<T: Real>(w: &[T], b: &[T], x: &[T], out: &mut [T]) {
    let in_dim = x.len();
    for (o, (row, &bv)) in out.iter_mut().zip(w.chunks_exact(in_dim).zip(b)) {
        let mut acc = bv;
        for (&wv, &xv) in row.iter().zip(x) {
            acc = acc + wv * xv;
        }
        *o = acc;
    }
}

/// Attention retrieval: A = softmax(Q(M) K(S)^T / sqrt(d_h)),
/// Lhat = A * normalize_rows(S).
pub fn attention_forward<T: Real>(
    head: &AttentionHead<T>,
    queries: &[T],
) -> Result<AttentionOutput<T>> {
    if head.n_entries == 0 {
        return Err(Error::validation("attention requires a nonempty codebook"));
    }
    if queries.len() % head.d != 0 {
        return Err(Error::validation("query buffer is not a multiple of d"));
    }
    let n = queries.len() / head.d;
    let (nc, dd, dh) = (head.n_entries, head.dim_high, head.d_h);

    // Keys and normalized values, once per call.
    let mut k_proj = vec![T::zero(); nc * dh];
    let mut v = vec![T::zero(); nc * dd];
    let mut s_norms = vec![T::zero(); nc];
    for j in 0..nc {
        let s = &head.codebook[j * dd..(j + 1) * dd];
        affine(&head.wk, &head.bk, s, &mut k_proj[j * dh..(j + 1) * dh]);
        let mut norm = T::zero();
        for &x in s {
            norm = norm + x * x;
        }
        let norm = norm.sqrt();
        if norm <= T::of(1e-12) {
            return Err(Error::validation(format!("codebook row {j} has zero norm")));
        }
        s_norms[j] = norm;
        for (o, &x) in v[j * dd..(j + 1) * dd].iter_mut().zip(s) {
            *o = x / norm;
        }
    }

    let inv_sqrt = T::one() / T::of(dh as f64).sqrt();
    let mut q_proj = vec![T::zero(); n * dh];
    let mut a = vec![T::zero(); n * nc];
    let mut lhat = vec![T::zero(); n * dd];

    // Parallel over row blocks; each block writes disjoint slices.
    let block = 512usize;
    let mut jobs: Vec<(&mut [T], &mut [T], &mut [T], &[T])> = Vec::new();
    {
        let mut qp = q_proj.as_mut_slice();
        let mut aa = a.as_mut_slice();
        let mut ll = lhat.as_mut_slice();
        let mut qs = queries;
        while !qs.is_empty() {
            let rows = block.min(qs.len() / head.d);
            let (qp1, qp2) = qp.split_at_mut(rows * dh);
            let (aa1, aa2) = aa.split_at_mut(rows * nc);
            let (ll1, ll2) = ll.split_at_mut(rows * dd);
            let (q1, q2) = qs.split_at(rows * head.d);
            jobs.push((qp1, aa1, ll1, q1));
            qp = qp2;
            aa = aa2;
            ll = ll2;
            qs = q2;
        }
    }
    jobs.into_par_iter().for_each(|(qp, aa, ll, qs)| {
        let rows = qs.len() / head.d;
        for i in 0..rows {
            let q = &qs[i * head.d..(i + 1) * head.d];
            let qp_row = &mut qp[i * dh..(i + 1) * dh];
            affine(&head.wq, &head.bq, q, qp_row);
            let a_row = &mut aa[i * nc..(i + 1) * nc];
            for (j, av) in a_row.iter_mut().enumerate() {
                let mut acc = T::zero();
                for (x, y) in qp_row.iter().zip(&k_proj[j * dh..(j + 1) * dh]) {
                    acc = acc + *x * *y;
                }
                *av = acc * inv_sqrt;
            }
            softmax_rows(a_row, 1, nc);
            let l_row = &mut ll[i * dd..(i + 1) * dd];
            for (j, &av) in a_row.iter().enumerate() {
                for (o, &vv) in l_row.iter_mut().zip(&v[j * dd..(j + 1) * dd]) {
                    *o = *o + av * vv;
                }
            }
        }
    });

    Ok(AttentionOutput {
        n_rows: n,
        n_entries: nc,
        dim_high: dd,
        a,
        lhat,
        cache: AttentionCache {
            queries: queries.to_vec(),
            q_proj,
            k_proj,
            v,
            s_norms,
        },
    })
}

/// Language loss: mean(1 - cos(L, Lhat)) + mean per-row L1 distance.
pub fn lang_loss<T: Real>(target: &[T], lhat: &[T], dim: usize) -> Result<T> {
    if target.len() != lhat.len() || target.len() % dim != 0 {
        return Err(Error::validation("lang_loss shape mismatch"));
    }
    let n = target.len() / dim;
    if n == 0 {
        return Err(Error::validation("lang_loss on zero rows"));
    }
    let eps = T::of(COSINE_EPS);
    let mut total = T::zero();
    for (lr, hr) in target.chunks_exact(dim).zip(lhat.chunks_exact(dim)) {
        let mut dot = T::zero();
        let mut nl = T::zero();
        let mut nh = T::zero();
        let mut l1 = T::zero();
        for (&a, &b) in lr.iter().zip(hr) {
            dot = dot + a * b;
            nl = nl + a * a;
            nh = nh + b * b;
            l1 = l1 + (a - b).abs();
        }
        let cosine = dot / (nl.sqrt() * nh.sqrt()).max(eps);
        total = total + (T::one() - cosine) + l1;
    }
    Ok(total / T::of(n as f64))
}

/// d lang_loss / d lhat.
pub fn lang_loss_backward<T: Real>(target: &[T], lhat: &[T], dim: usize) -> Result<Vec<T>> {
    if target.len() != lhat.len() || target.len() % dim != 0 {
        return Err(Error::validation("lang_loss shape mismatch"));
    }
    let n = target.len() / dim;
    let eps = T::of(COSINE_EPS);
    let inv_n = T::one() / T::of(n as f64);
    let mut grad = vec![T::zero(); lhat.len()];
    for ((lr, hr), gr) in target
        .chunks_exact(dim)
        .zip(lhat.chunks_exact(dim))
        .zip(grad.chunks_exact_mut(dim))
    {
        let mut dot = T::zero();
        let mut nl2 = T::zero();
        let mut nh2 = T::zero();
        for (&a, &b) in lr.iter().zip(hr) {
            dot = dot + a * b;
            nl2 = nl2 + a * a;
            nh2 = nh2 + b * b;
        }
        let (nl, nh) = (nl2.sqrt(), nh2.sqrt());
        let denom = (nl * nh).max(eps);
        let guarded = nl * nh > eps;
        for (k, g) in gr.iter_mut().enumerate() {
            // -(d cos / d lhat_k) / n
            let dcos = if guarded {
                lr[k] / denom - dot * hr[k] / (denom * nh * nh)
            } else {
                lr[k] / denom
            };
            let sign = if hr[k] > lr[k] {
                T::one()
            } else if hr[k] < lr[k] {
                -T::one()
            } else {
                T::zero()
            };
            *g = (sign - dcos) * inv_n;
        }
    }
    Ok(grad)
}

/// Mean row entropy of the attention weights (natural log, 0 log 0 = 0).
pub fn entropy_loss<T: Real>(a: &[T], n_rows: usize, n_entries: usize) -> T {
    if n_rows == 0 {
        return T::zero();
    }
    let mut total = T::zero();
    for row in a.chunks_exact(n_entries).take(n_rows) {
        for &p in row {
            if p > T::zero() {
                total = total - p * p.ln();
            }
        }
    }
    total / T::of(n_rows as f64)
}

/// Gradients for every attention parameter group.
#[derive(Debug, Clone)]
pub struct AttentionGrads<T> {
    pub wq: Vec<T>,
    pub bq: Vec<T>,
    pub wk: Vec<T>,
    pub bk: Vec<T>,
    pub codebook: Option<Vec<T>>,
    pub queries: Option<Vec<T>>,
}

/// Exact adjoint of `lambda_entropy * entropy_loss(A) + f(Lhat)` where
/// `grad_lhat = df/dLhat`. Codebook gradients combine the key path and the
/// normalized-value path.
pub fn attention_backward<T: Real>(
    head: &AttentionHead<T>,
    out: &AttentionOutput<T>,
    grad_lhat: &[T],
    lambda_entropy: T,
    want_codebook: bool,
    want_queries: bool,
) -> Result<AttentionGrads<T>> {
    let (n, nc, dd, dh, d) = (out.n_rows, out.n_entries, out.dim_high, head.d_h, head.d);
    if grad_lhat.len() != n * dd {
        return Err(Error::validation("grad_lhat has wrong shape"));
    }
    let cache = &out.cache;
    let inv_sqrt = T::one() / T::of(dh as f64).sqrt();
    let ent_scale = if n > 0 {
        lambda_entropy / T::of(n as f64)
    } else {
        T::zero()
    };

    struct BlockGrads<T> {
        wq: Vec<T>,
        bq: Vec<T>,
        dk_proj: Vec<T>,
        dv: Vec<T>,
        queries: Option<Vec<T>>,
    }

    const BLOCK: usize = 512;
    let blocks: Vec<(usize, usize)> = (0..n.max(1))
        .step_by(BLOCK)
        .map(|s| (s, (s + BLOCK).min(n)))
        .collect();

    let results: Vec<BlockGrads<T>> = blocks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut bg = BlockGrads {
                wq: vec![T::zero(); dh * d],
                bq: vec![T::zero(); dh],
                dk_proj: vec![T::zero(); nc * dh],
                dv: vec![T::zero(); nc * dd],
                queries: want_queries.then(|| vec![T::zero(); (hi - lo) * d]),
            };
            let mut da = vec![T::zero(); nc];
            let mut dlogits = vec![T::zero(); nc];
            let mut dqp = vec![T::zero(); dh];
            for i in lo..hi {
                let a_row = &out.a[i * nc..(i + 1) * nc];
                let g_row = &grad_lhat[i * dd..(i + 1) * dd];

                // da from the Lhat path plus the entropy regularizer, and dv.
                for j in 0..nc {
                    let vj = &cache.v[j * dd..(j + 1) * dd];
                    let mut acc = T::zero();
                    for (&gv, &vv) in g_row.iter().zip(vj) {
                        acc = acc + gv * vv;
                    }
                    let dvj = &mut bg.dv[j * dd..(j + 1) * dd];
                    for (o, &gv) in dvj.iter_mut().zip(g_row) {
                        *o = *o + a_row[j] * gv;
                    }
                    let ent = if a_row[j] > T::zero() {
                        -ent_scale * (a_row[j].ln() + T::one())
                    } else {
                        T::zero()
                    };
                    da[j] = acc + ent;
                }

                // Softmax backward: dlogit = a * (da - <da, a>).
                let mut inner = T::zero();
                for j in 0..nc {
                    inner = inner + da[j] * a_row[j];
                }
                for j in 0..nc {
                    dlogits[j] = a_row[j] * (da[j] - inner) * inv_sqrt;
                }

                // dq_proj and dk_proj accumulation.
                for v in dqp.iter_mut() {
                    *v = T::zero();
                }
                let qp_row = &cache.q_proj[i * dh..(i + 1) * dh];
                for j in 0..nc {
                    let dl = dlogits[j];
                    if dl == T::zero() {
                        continue;
                    }
                    let kp = &cache.k_proj[j * dh..(j + 1) * dh];
                    for (o, &kv) in dqp.iter_mut().zip(kp) {
                        *o = *o + dl * kv;
                    }
                    let dk = &mut bg.dk_proj[j * dh..(j + 1) * dh];
                    for (o, &qv) in dk.iter_mut().zip(qp_row) {
                        *o = *o + dl * qv;
                    }
                }

                // Wq, bq, and query input gradients.
                let q_row = &cache.queries[i * d..(i + 1) * d];
                for (r, &dv) in dqp.iter().enumerate() {
                    bg.bq[r] = bg.bq[r] + dv;
                    let wrow = &mut bg.wq[r * d..(r + 1) * d];
                    for (o, &qv) in wrow.iter_mut().zip(q_row) {
                        *o = *o + dv * qv;
                    }
                }
                if let Some(qg) = bg.queries.as_mut() {
                    let row = &mut qg[(i - lo) * d..(i - lo + 1) * d];
                    for (r, &dv) in dqp.iter().enumerate() {
                        let wrow = &head.wq[r * d..(r + 1) * d];
                        for (o, &wv) in row.iter_mut().zip(wrow) {
                            *o = *o + dv * wv;
                        }
                    }
                }
            }
            bg
        })
        .collect();

    // Deterministic reduction in block order.
    let mut wq = vec![T::zero(); dh * d];
    let mut bq = vec![T::zero(); dh];
    let mut dk_proj = vec![T::zero(); nc * dh];
    let mut dv = vec![T::zero(); nc * dd];
    let mut queries = want_queries.then(|| Vec::with_capacity(n * d));
    for bg in results {
        for (o, v) in wq.iter_mut().zip(bg.wq) {
            *o = *o + v;
        }
        for (o, v) in bq.iter_mut().zip(bg.bq) {
            *o = *o + v;
        }
        for (o, v) in dk_proj.iter_mut().zip(bg.dk_proj) {
            *o = *o + v;
        }
        for (o, v) in dv.iter_mut().zip(bg.dv) {
            *o = *o + v;
        }
        if let (Some(all), Some(blk)) = (queries.as_mut(), bg.queries) {
            all.extend(blk);
        }
    }

    // Key-side parameters and codebook gradients.
    let mut wk = vec![T::zero(); dh * dd];
    let mut bk = vec![T::zero(); dh];
    let mut codebook = want_codebook.then(|| vec![T::zero(); nc * dd]);
    for j in 0..nc {
        let s = &head.codebook[j * dd..(j + 1) * dd];
        let dk = &dk_proj[j * dh..(j + 1) * dh];
        for (r, &dkv) in dk.iter().enumerate() {
            bk[r] = bk[r] + dkv;
            let wrow = &mut wk[r * dd..(r + 1) * dd];
            for (o, &sv) in wrow.iter_mut().zip(s) {
                *o = *o + dkv * sv;
            }
        }
        if let Some(cb) = codebook.as_mut() {
            let row = &mut cb[j * dd..(j + 1) * dd];
            // Key path: Wk^T dk.
            for (r, &dkv) in dk.iter().enumerate() {
                let wrow = &head.wk[r * dd..(r + 1) * dd];
                for (o, &wv) in row.iter_mut().zip(wrow) {
                    *o = *o + dkv * wv;
                }
            }
            // Value path through row normalization: (dv - <dv, v> v) / |s|.
            let vj = &cache.v[j * dd..(j + 1) * dd];
            let dvj = &dv[j * dd..(j + 1) * dd];
            let mut inner = T::zero();
            for (&a, &b) in dvj.iter().zip(vj) {
                inner = inner + a * b;
            }
            for (k, o) in row.iter_mut().enumerate() {
                *o = *o + (dvj[k] - inner * vj[k]) / cache.s_norms[j];
            }
        }
    }

    Ok(AttentionGrads {
        wq,
        bq,
        wk,
        bk,
        codebook,
        queries,
    })
}

/// 3D inference path: run the same attention on per-gaussian LD features.
pub fn per_gaussian_language<T: Real>(
    head: &AttentionHead<T>,
    features: &[T],
) -> Result<Vec<T>> {
    Ok(attention_forward(head, features)?.lhat)
}
