//! Differentiable tile-based splatting.
//!
//! Gaussians are projected with the standard EWA approximation, binned into
//! 16x16 pixel tiles by their 3-sigma footprint, then alpha-composited
//! front to back. The same compositor runs two kinds of passes: color with
//! appearance opacity and LD features with semantic opacity. The backward
//! pass produces exact adjoints with respect to payloads and opacity logits
//! (optionally 2D means).
//!
//! Compositing semantics, shared verbatim by any reference implementation:
//! for each pixel, walk gaussians in ascending depth order and
//!
//! ```text
//! q        = delta^T inv_cov2d delta          (delta = pixel center - mean2d)
//! skip gaussian if q > 9                      (3-sigma Mahalanobis cutoff)
//! alpha    = min(opacity * exp(-q/2), 0.99)
//! w        = alpha * (1 - accum)              (accum = sum of prior weights)
//! accum    = accum + w
//! stop when 1 - accum < 1e-4
//! ```

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{mat3_mul, mat3_mul_vec3, mat3_transpose, quat_to_rot, sigmoid, Real, Sym2};
use crate::scene::{Camera, GaussianSplat, SceneModel};

pub const TILE_SIZE: usize = 16;
/// Squared Mahalanobis cutoff (3 sigma).
pub const CUTOFF_SQ: f64 = 9.0;
pub const ALPHA_CLAMP: f64 = 0.99;
pub const COV_DILATION: f64 = 0.3;
pub const STOP_TRANSMITTANCE: f64 = 1e-4;
pub const MIN_DEPTH: f64 = 0.01;

/// Camera geometry in the scalar type of the pass.
#[derive(Debug, Clone)]
pub struct ViewGeom<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    /// World-to-camera rotation, row-major.
    pub rot: [[T; 3]; 3],
    pub trans: [T; 3],
    pub width: usize,
    pub height: usize,
}

impl ViewGeom<f32> {
    pub fn from_camera(camera: &Camera) -> Self {
        ViewGeom {
            fx: camera.fx,
            fy: camera.fy,
            cx: camera.cx,
            cy: camera.cy,
            rot: camera.rotation,
            trans: camera.translation,
            width: camera.width as usize,
            height: camera.height as usize,
        }
    }
}

/// A gaussian after projection into a view.
#[derive(Debug, Clone)]
pub struct Projected2D<T> {
    pub mean2d: [T; 2],
    pub cov2d: Sym2<T>,
    pub depth: T,
    pub inv_cov2d: Sym2<T>,
    /// Binning radius in pixels: 3 * sqrt(max eigenvalue of cov2d).
    pub radius: T,
}

/// One gaussian's contribution to one pixel, retained for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct Contrib<T> {
    /// Caller-supplied gaussian id (index into the original splat list).
    pub id: u32,
    pub alpha_eff: T,
    pub weight: T,
}

/// Result of one compositing pass.
#[derive(Debug, Clone)]
pub struct RenderOutput<T> {
    pub width: usize,
    pub height: usize,
    pub p_dim: usize,
    /// H*W*P row-major composited payload.
    pub payload_image: Vec<T>,
    /// H*W total compositing weight per pixel.
    pub accum_weight: Vec<T>,
    /// Per-pixel contribution lists in compositing order, present when the
    /// pass was run with `retain_contrib`.
    pub contrib: Option<Vec<Vec<Contrib<T>>>>,
}

/// Gradients produced by [`composite_backward`], indexed by gaussian id.
#[derive(Debug, Clone)]
pub struct CompositeGrads<T> {
    pub payloads: Vec<T>,
    pub opacity_logits: Vec<T>,
    pub mean2d: Option<Vec<T>>,
}

impl RenderOutput<f32> {
    /// Debug dump: writes the payload image (H x W x P) and the accumulated
    /// weights (H x W) as tensor files under `dir`.
    pub fn dump(&self, dir: &std::path::Path, prefix: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::tensorio::write_tensor(
            &dir.join(format!("{prefix}_payload.gaft")),
            &[self.height as u64, self.width as u64, self.p_dim as u64],
            &self.payload_image,
        )?;
        crate::tensorio::write_tensor(
            &dir.join(format!("{prefix}_accum.gaft")),
            &[self.height as u64, self.width as u64],
            &self.accum_weight,
        )
    }
}

/// EWA projection of one gaussian. Returns `None` when the gaussian is culled
/// (behind the near plane or its 3-sigma footprint misses the image).
pub fn project_gaussian<T: Real>(
    mu: [T; 3],
    quat: [T; 4],
    log_scale: [T; 3],
    view: &ViewGeom<T>,
) -> Option<Projected2D<T>> {
    let t = {
        let r = mat3_mul_vec3(&view.rot, mu);
        [r[0] + view.trans[0], r[1] + view.trans[1], r[2] + view.trans[2]]
    };
    let depth = t[2];
    if depth <= T::of(MIN_DEPTH) {
        return None;
    }
    let inv_z = T::one() / depth;
    let mean2d = [
        view.fx * t[0] * inv_z + view.cx,
        view.fy * t[1] * inv_z + view.cy,
    ];

    // World covariance R S S^T R^T, then into camera coordinates.
    let rot = quat_to_rot(quat);
    let s = [log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp()];
    let mut rs = rot;
    for row in rs.iter_mut() {
        row[0] = row[0] * s[0];
        row[1] = row[1] * s[1];
        row[2] = row[2] * s[2];
    }
    let sigma = mat3_mul(&rs, &mat3_transpose(&rs));
    let cam_cov = mat3_mul(&view.rot, &mat3_mul(&sigma, &mat3_transpose(&view.rot)));

    // 2x3 perspective Jacobian rows, evaluated at frustum-clamped camera
    // coordinates. Without the clamp, a gaussian sitting almost in the
    // camera plane (tiny depth, large lateral offset) gets a near-singular
    // Jacobian and its projected footprint blankets the whole image.
    let clamp_ratio = |r: T, lim: T| r.min(lim).max(-lim);
    let lim_x = T::of(1.3 * 0.5) * T::of(view.width as f64) / view.fx;
    let lim_y = T::of(1.3 * 0.5) * T::of(view.height as f64) / view.fy;
    let tx = clamp_ratio(t[0] * inv_z, lim_x);
    let ty = clamp_ratio(t[1] * inv_z, lim_y);
    let j0 = [view.fx * inv_z, T::zero(), -view.fx * tx * inv_z];
    let j1 = [T::zero(), view.fy * inv_z, -view.fy * ty * inv_z];
    let jc = |j: &[T; 3], col: usize| -> T {
        j[0] * cam_cov[0][col] + j[1] * cam_cov[1][col] + j[2] * cam_cov[2][col]
    };
    let row0 = [jc(&j0, 0), jc(&j0, 1), jc(&j0, 2)];
    let row1 = [jc(&j1, 0), jc(&j1, 1), jc(&j1, 2)];
    let dil = T::of(COV_DILATION);
    let cov2d = Sym2 {
        xx: row0[0] * j0[0] + row0[1] * j0[1] + row0[2] * j0[2] + dil,
        xy: row0[0] * j1[0] + row0[1] * j1[1] + row0[2] * j1[2],
        yy: row1[0] * j1[0] + row1[1] * j1[1] + row1[2] * j1[2] + dil,
    };

    let radius = T::of(3.0) * cov2d.max_eigenvalue().sqrt();
    let (w, h) = (T::of(view.width as f64), T::of(view.height as f64));
    if mean2d[0] + radius < T::zero()
        || mean2d[0] - radius > w
        || mean2d[1] + radius < T::zero()
        || mean2d[1] - radius > h
    {
        return None;
    }
    Some(Projected2D {
        mean2d,
        cov2d,
        depth,
        inv_cov2d: cov2d.inverse(),
        radius,
    })
}

fn tile_range<T: Real>(p: &Projected2D<T>, tiles_x: usize, tiles_y: usize) -> (usize, usize, usize, usize) {
    let ts = TILE_SIZE as f64;
    let clampi = |v: f64, hi: usize| -> usize {
        if v < 0.0 {
            0
        } else if v as usize >= hi {
            hi - 1
        } else {
            v as usize
        }
    };
    let x0 = clampi(((p.mean2d[0] - p.radius).as_f64() / ts).floor(), tiles_x);
    let x1 = clampi(((p.mean2d[0] + p.radius).as_f64() / ts).floor(), tiles_x);
    let y0 = clampi(((p.mean2d[1] - p.radius).as_f64() / ts).floor(), tiles_y);
    let y1 = clampi(((p.mean2d[1] + p.radius).as_f64() / ts).floor(), tiles_y);
    (x0, x1, y0, y1)
}

fn bin_gaussians<T: Real>(
    projected: &[Projected2D<T>],
    width: usize,
    height: usize,
) -> (Vec<Vec<u32>>, usize, usize) {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut bins = vec![Vec::new(); tiles_x * tiles_y];
    for (k, p) in projected.iter().enumerate() {
        let (x0, x1, y0, y1) = tile_range(p, tiles_x, tiles_y);
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                bins[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    (bins, tiles_x, tiles_y)
}

fn check_sorted<T: Real>(projected: &[Projected2D<T>]) -> Result<()> {
    for pair in projected.windows(2) {
        if pair[1].depth < pair[0].depth {
            return Err(Error::validation(
                "composite input must be sorted by ascending depth",
            ));
        }
    }
    Ok(())
}

struct TileResult<T> {
    tile: usize,
    payload: Vec<T>,
    accum: Vec<T>,
    contrib: Option<Vec<Vec<Contrib<T>>>>,
}

/// Front-to-back alpha compositing of depth-sorted projected gaussians.
///
/// `ids[k]` is the caller's identifier for `projected[k]`, recorded in the
/// contribution lists; `payloads` holds one P-vector per projected gaussian;
/// `opacities` are the (0, 1) opacity values of the chosen kind.
pub fn composite<T: Real>(
    projected: &[Projected2D<T>],
    ids: &[u32],
    payloads: &[T],
    p_dim: usize,
    opacities: &[T],
    width: usize,
    height: usize,
    retain_contrib: bool,
) -> Result<RenderOutput<T>> {
    let n = projected.len();
    if ids.len() != n || opacities.len() != n || payloads.len() != n * p_dim {
        return Err(Error::validation("composite input arrays disagree on length"));
    }
    check_sorted(projected)?;

    let (bins, tiles_x, tiles_y) = bin_gaussians(projected, width, height);
    let cutoff = T::of(CUTOFF_SQ);
    let clamp = T::of(ALPHA_CLAMP);
    let stop = T::of(STOP_TRANSMITTANCE);
    let half = T::of(0.5);

    let tile_results: Vec<TileResult<T>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let tx = tile % tiles_x;
            let ty = tile / tiles_x;
            let x_lo = tx * TILE_SIZE;
            let y_lo = ty * TILE_SIZE;
            let tw = TILE_SIZE.min(width - x_lo);
            let th = TILE_SIZE.min(height - y_lo);
            let mut payload = vec![T::zero(); tw * th * p_dim];
            let mut accum = vec![T::zero(); tw * th];
            let mut contrib = retain_contrib.then(|| vec![Vec::new(); tw * th]);
            let bin = &bins[tile];
            for py in 0..th {
                for px in 0..tw {
                    let cx = T::of((x_lo + px) as f64 + 0.5);
                    let cy = T::of((y_lo + py) as f64 + 0.5);
                    let pix = py * tw + px;
                    let mut acc = T::zero();
                    for &k in bin {
                        let k = k as usize;
                        let p = &projected[k];
                        let d = [cx - p.mean2d[0], cy - p.mean2d[1]];
                        let q = p.inv_cov2d.quad(d);
                        if q > cutoff {
                            continue;
                        }
                        let alpha = (opacities[k] * (-q * half).exp()).min(clamp);
                        let w = alpha * (T::one() - acc);
                        let row = &payloads[k * p_dim..(k + 1) * p_dim];
                        let out = &mut payload[pix * p_dim..(pix + 1) * p_dim];
                        for (o, &v) in out.iter_mut().zip(row) {
                            *o = *o + w * v;
                        }
                        acc = acc + w;
                        if let Some(c) = contrib.as_mut() {
                            c[pix].push(Contrib {
                                id: ids[k],
                                alpha_eff: alpha,
                                weight: w,
                            });
                        }
                        if T::one() - acc < stop {
                            break;
                        }
                    }
                    accum[pix] = acc;
                }
            }
            TileResult {
                tile,
                payload,
                accum,
                contrib,
            }
        })
        .collect();

    let mut out = RenderOutput {
        width,
        height,
        p_dim,
        payload_image: vec![T::zero(); width * height * p_dim],
        accum_weight: vec![T::zero(); width * height],
        contrib: retain_contrib.then(|| vec![Vec::new(); width * height]),
    };
    for tr in tile_results {
        let tx = tr.tile % tiles_x;
        let ty = tr.tile / tiles_x;
        let x_lo = tx * TILE_SIZE;
        let y_lo = ty * TILE_SIZE;
        let tw = TILE_SIZE.min(width - x_lo);
        let th = TILE_SIZE.min(height - y_lo);
        for py in 0..th {
            for px in 0..tw {
                let src = py * tw + px;
                let dst = (y_lo + py) * width + (x_lo + px);
                out.accum_weight[dst] = tr.accum[src];
                out.payload_image[dst * p_dim..(dst + 1) * p_dim]
                    .copy_from_slice(&tr.payload[src * p_dim..(src + 1) * p_dim]);
            }
        }
        if let (Some(dst), Some(src)) = (out.contrib.as_mut(), tr.contrib) {
            for (py, row) in src.chunks(tw).enumerate() {
                for (px, lst) in row.iter().enumerate() {
                    dst[(y_lo + py) * width + (x_lo + px)] = lst.clone();
                }
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of [`composite`] with respect to payloads and opacity
/// logits (and, when `want_mean2d`, the projected 2D means). Gradients are
/// accumulated into buffers indexed by gaussian id, sized by `n_ids`.
#[allow(clippy::too_many_arguments)]
pub fn composite_backward<T: Real>(
    output: &RenderOutput<T>,
    projected: &[Projected2D<T>],
    ids: &[u32],
    payloads: &[T],
    opacities: &[T],
    upstream: &[T],
    n_ids: usize,
    want_mean2d: bool,
) -> Result<CompositeGrads<T>> {
    let contrib = output
        .contrib
        .as_ref()
        .ok_or_else(|| Error::validation("composite_backward requires a retained contrib cache"))?;
    let p_dim = output.p_dim;
    if upstream.len() != output.width * output.height * p_dim {
        return Err(Error::validation("upstream gradient has wrong shape"));
    }
    // Map gaussian id -> index in the projected arrays of this pass.
    let mut id_to_k = vec![u32::MAX; n_ids];
    for (k, &id) in ids.iter().enumerate() {
        id_to_k[id as usize] = k as u32;
    }

    let mut grads = CompositeGrads {
        payloads: vec![T::zero(); n_ids * p_dim],
        opacity_logits: vec![T::zero(); n_ids],
        mean2d: want_mean2d.then(|| vec![T::zero(); n_ids * 2]),
    };
    let clamp = T::of(ALPHA_CLAMP);
    let half = T::of(0.5);

    let mut transmittance: Vec<T> = Vec::new();
    for (pix, lst) in contrib.iter().enumerate() {
        if lst.is_empty() {
            continue;
        }
        let g = &upstream[pix * p_dim..(pix + 1) * p_dim];
        let px = T::of((pix % output.width) as f64 + 0.5);
        let py = T::of((pix / output.width) as f64 + 0.5);

        // T_i = 1 - sum of prior weights, recomputed in forward order.
        transmittance.clear();
        let mut acc = T::zero();
        for c in lst {
            transmittance.push(T::one() - acc);
            acc = acc + c.weight;
        }

        // Reverse sweep: suffix = sum_{j>i} w_j (g . p_j).
        let mut suffix = T::zero();
        for (i, c) in lst.iter().enumerate().rev() {
            let k = id_to_k[c.id as usize] as usize;
            let row = &payloads[k * p_dim..(k + 1) * p_dim];
            let mut gp = T::zero();
            let out = &mut grads.payloads[c.id as usize * p_dim..(c.id as usize + 1) * p_dim];
            for ((o, &gv), &pv) in out.iter_mut().zip(g).zip(row) {
                *o = *o + c.weight * gv;
                gp = gp + gv * pv;
            }
            let d_alpha_eff = transmittance[i] * gp - suffix / (T::one() - c.alpha_eff);
            suffix = suffix + c.weight * gp;

            // Through the 0.99 clamp: zero gradient where it binds.
            if c.alpha_eff < clamp {
                let d = [px - projected[k].mean2d[0], py - projected[k].mean2d[1]];
                let q = projected[k].inv_cov2d.quad(d);
                let gauss = (-q * half).exp();
                let op = opacities[k];
                // alpha_eff = sigmoid(logit) * gauss
                grads.opacity_logits[c.id as usize] = grads.opacity_logits[c.id as usize]
                    + d_alpha_eff * gauss * op * (T::one() - op);
                if let Some(gm) = grads.mean2d.as_mut() {
                    // d alpha_eff / d mean2d = alpha_eff * inv_cov * delta
                    let ic = &projected[k].inv_cov2d;
                    let v = [ic.xx * d[0] + ic.xy * d[1], ic.xy * d[0] + ic.yy * d[1]];
                    let base = c.id as usize * 2;
                    gm[base] = gm[base] + d_alpha_eff * c.alpha_eff * v[0];
                    gm[base + 1] = gm[base + 1] + d_alpha_eff * c.alpha_eff * v[1];
                }
            }
        }
    }
    Ok(grads)
}

/// Projects every splat of a scene into a view and returns the depth-sorted
/// projection list together with the original splat index of each entry.
pub fn project_scene(
    splats: &[GaussianSplat],
    view: &ViewGeom<f32>,
    selection: Option<&[bool]>,
) -> (Vec<Projected2D<f32>>, Vec<u32>) {
    let mut entries: Vec<(u32, Projected2D<f32>)> = splats
        .iter()
        .enumerate()
        .filter(|(i, _)| selection.map_or(true, |s| s[*i]))
        .filter_map(|(i, s)| {
            project_gaussian(s.mu, s.rot, s.log_scale, view).map(|p| (i as u32, p))
        })
        .collect();
    entries.sort_by(|a, b| {
        a.1.depth
            .partial_cmp(&b.1.depth)
            .unwrap()
            .then(a.0.cmp(&b.0))
    });
    let ids = entries.iter().map(|e| e.0).collect();
    let projected = entries.into_iter().map(|e| e.1).collect();
    (projected, ids)
}

fn gather<T: Copy>(ids: &[u32], per_splat: &[T], stride: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(ids.len() * stride);
    for &id in ids {
        out.extend_from_slice(&per_splat[id as usize * stride..(id as usize + 1) * stride]);
    }
    out
}

/// Color pass: composites per-splat colors with appearance opacity.
pub fn render_color(scene: &SceneModel, camera: &Camera, retain_contrib: bool) -> Result<RenderOutput<f32>> {
    let view = ViewGeom::from_camera(camera);
    let (projected, ids) = project_scene(&scene.splats, &view, None);
    let colors: Vec<f32> = scene.splats.iter().flat_map(|s| s.color).collect();
    let alphas: Vec<f32> = scene.splats.iter().map(|s| sigmoid(s.alpha_logit)).collect();
    composite(
        &projected,
        &ids,
        &gather(&ids, &colors, 3),
        3,
        &gather(&ids, &alphas, 1),
        view.width,
        view.height,
        retain_contrib,
    )
}

/// Feature pass: composites caller-supplied per-splat d-vectors with
/// semantic opacity. Color visibility plays no role here.
pub fn render_features(
    scene: &SceneModel,
    camera: &Camera,
    features: &[f32],
    p_dim: usize,
    retain_contrib: bool,
) -> Result<RenderOutput<f32>> {
    if features.len() != scene.splats.len() * p_dim {
        return Err(Error::validation(format!(
            "expected {} features of dim {}, got buffer of {}",
            scene.splats.len(),
            p_dim,
            features.len()
        )));
    }
    let view = ViewGeom::from_camera(camera);
    let (projected, ids) = project_scene(&scene.splats, &view, None);
    let sem: Vec<f32> = scene
        .splats
        .iter()
        .map(|s| sigmoid(s.sem_alpha_logit))
        .collect();
    composite(
        &projected,
        &ids,
        &gather(&ids, features, p_dim),
        p_dim,
        &gather(&ids, &sem, 1),
        view.width,
        view.height,
        retain_contrib,
    )
}

/// Color pass restricted to a subset of splats, plus the binary coverage
/// mask (accumulated weight >= 0.5).
pub fn render_selected(
    scene: &SceneModel,
    camera: &Camera,
    selection: &[bool],
) -> Result<(RenderOutput<f32>, Vec<bool>)> {
    if selection.len() != scene.splats.len() {
        return Err(Error::validation("selection length must match splat count"));
    }
    let view = ViewGeom::from_camera(camera);
    let (projected, ids) = project_scene(&scene.splats, &view, Some(selection));
    let colors: Vec<f32> = scene.splats.iter().flat_map(|s| s.color).collect();
    let alphas: Vec<f32> = scene.splats.iter().map(|s| sigmoid(s.alpha_logit)).collect();
    let out = composite(
        &projected,
        &ids,
        &gather(&ids, &colors, 3),
        3,
        &gather(&ids, &alphas, 1),
        view.width,
        view.height,
        false,
    )?;
    let mask = out.accum_weight.iter().map(|&a| a >= 0.5).collect();
    Ok((out, mask))
}
