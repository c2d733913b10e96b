//! Open-vocabulary querying against a trained checkpoint: cosine relevancy
//! maps on rendered feature maps (2D), per-gaussian retrieval with
//! statistical thresholding and selected-splat rendering (3D), the mIoU /
//! localization-accuracy / Acc@0.25 metrics, and per-entry attention heatmap
//! export.
//!
//! Coverage convention: a pixel counts as covered when its accumulated
//! compositing weight reaches 0.5, matching the mask rule of the synthetic
//! generator and of selected-splat rendering.

use std::path::{Path, PathBuf};

use crate::attention::{attention_forward, per_gaussian_language};
use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::preprocess::compute_ld_map;
use crate::raster;
use crate::scene::{Camera, SceneModel, ViewSupervision};
use crate::tensorio;
use crate::train::{Checkpoint, Stage};

pub const DEFAULT_TAU_REL: f32 = 0.6;
pub const DEFAULT_KAPPA: f32 = 1.0;
pub const SCORE_FLOOR_3D: f32 = 0.2;
pub const COVERAGE_THRESHOLD: f32 = 0.5;

/// A named query embedding, unit norm.
#[derive(Debug, Clone)]
pub struct TextQuery {
    pub name: String,
    pub embedding: Vec<f32>,
}

impl TextQuery {
    pub fn new(name: impl Into<String>, embedding: Vec<f32>) -> Result<TextQuery> {
        let n: f64 = embedding.iter().map(|&v| (v as f64) * (v as f64)).sum();
        if (n.sqrt() - 1.0).abs() > 1e-6 {
            return Err(Error::validation("query embedding must be unit norm"));
        }
        Ok(TextQuery {
            name: name.into(),
            embedding,
        })
    }

    pub fn from_vocab(scene: &SceneModel, name: &str) -> Result<TextQuery> {
        match scene.vocab_embedding(name) {
            Some(e) => TextQuery::new(name, e.to_vec()),
            None => {
                let known: Vec<&str> = scene.vocab.iter().map(|v| v.name.as_str()).collect();
                Err(Error::validation(format!(
                    "unknown query '{name}'; scene vocabulary: {known:?}"
                )))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueryResult2D {
    pub width: usize,
    pub height: usize,
    /// Cosine relevancy per pixel; -1 at uncovered pixels.
    pub score_map: Vec<f32>,
    pub mask: Vec<bool>,
    /// (row, col) of the maximum score over covered pixels.
    pub argmax_pixel: (usize, usize),
    pub max_score: f32,
}

#[derive(Debug, Clone)]
pub struct QueryResult3D {
    pub selection: Vec<bool>,
    pub scores: Vec<f32>,
    pub threshold: f32,
}

fn require_stage2(ckpt: &Checkpoint) -> Result<&crate::attention::AttentionHead<f32>> {
    if ckpt.stage != Stage::Stage2 {
        return Err(Error::validation("querying requires a stage-2 checkpoint"));
    }
    ckpt.attention
        .as_ref()
        .ok_or_else(|| Error::validation("checkpoint carries no attention head"))
}

/// Renders the checkpoint's LD feature map for one camera and returns the
/// render output (with semantic opacities, honoring the coupled-opacity
/// ablation flag the checkpoint was trained with).
pub fn render_ld_map(ckpt: &Checkpoint, camera: &Camera) -> Result<raster::RenderOutput<f32>> {
    let d = ckpt.field.feature_dim();
    let (features, _) = ckpt.field.forward(&ckpt.splats);
    let sem: Vec<f32> = if ckpt.config.couple_semantic_opacity {
        ckpt.splats.iter().map(|s| sigmoid(s.alpha_logit)).collect()
    } else {
        ckpt.splats.iter().map(|s| sigmoid(s.sem_alpha_logit)).collect()
    };
    let view = raster::ViewGeom::from_camera(camera);
    let (projected, ids) = raster::project_scene(&ckpt.splats, &view, None);
    let gather = |per: &[f32], stride: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(ids.len() * stride);
        for &id in &ids {
            out.extend_from_slice(&per[id as usize * stride..(id as usize + 1) * stride]);
        }
        out
    };
    raster::composite(
        &projected,
        &ids,
        &gather(&features, d),
        d,
        &gather(&sem, 1),
        view.width,
        view.height,
        false,
    )
}

fn cosine_rows_vs(embedding: &[f32], rows: &[f32], dim: usize) -> Vec<f32> {
    let ne: f64 = embedding.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    rows.chunks_exact(dim)
        .map(|r| {
            let mut dot = 0.0f64;
            let mut nr = 0.0f64;
            for (&a, &b) in r.iter().zip(embedding) {
                dot += a as f64 * b as f64;
                nr += a as f64 * a as f64;
            }
            (dot / (nr.sqrt() * ne).max(1e-8)) as f32
        })
        .collect()
}

/// 2D open-vocabulary query: render the LD map, retrieve language features
/// per covered pixel, score by cosine against the query embedding, and
/// threshold at `tau_rel * max_score`.
pub fn query_2d(
    ckpt: &Checkpoint,
    camera: &Camera,
    query: &TextQuery,
    tau_rel: f32,
) -> Result<QueryResult2D> {
    let head = require_stage2(ckpt)?;
    if query.embedding.len() != head.dim_high {
        return Err(Error::validation(format!(
            "query embedding dimension {} does not match language dimension {}",
            query.embedding.len(),
            head.dim_high
        )));
    }
    let out = render_ld_map(ckpt, camera)?;
    let d = out.p_dim;
    let n_pix = out.width * out.height;
    let covered: Vec<usize> = (0..n_pix)
        .filter(|&p| out.accum_weight[p] >= COVERAGE_THRESHOLD)
        .collect();
    if covered.is_empty() {
        return Err(Error::validation("no covered pixels in this view"));
    }
    let mut queries = Vec::with_capacity(covered.len() * d);
    for &p in &covered {
        queries.extend_from_slice(&out.payload_image[p * d..(p + 1) * d]);
    }
    let att = attention_forward(head, &queries)?;
    let scores = cosine_rows_vs(&query.embedding, &att.lhat, head.dim_high);

    let mut score_map = vec![-1.0f32; n_pix];
    let mut max_score = f32::NEG_INFINITY;
    let mut arg = covered[0];
    for (&p, &s) in covered.iter().zip(&scores) {
        score_map[p] = s;
        if s > max_score {
            max_score = s;
            arg = p;
        }
    }
    let thresh = tau_rel * max_score;
    let mut mask = vec![false; n_pix];
    for (&p, &s) in covered.iter().zip(&scores) {
        mask[p] = s >= thresh;
    }
    Ok(QueryResult2D {
        width: out.width,
        height: out.height,
        score_map,
        mask,
        argmax_pixel: (arg / out.width, arg % out.width),
        max_score,
    })
}

/// 3D open-vocabulary query: score every gaussian's retrieved language
/// feature against the query; select scores above mean + kappa * std,
/// intersected with the absolute floor 0.2.
pub fn query_3d(ckpt: &Checkpoint, query: &TextQuery, kappa: f32) -> Result<QueryResult3D> {
    let head = require_stage2(ckpt)?;
    if query.embedding.len() != head.dim_high {
        return Err(Error::validation("query embedding dimension mismatch"));
    }
    let (features, _) = ckpt.field.forward(&ckpt.splats);
    let lang = per_gaussian_language(head, &features)?;
    let scores = cosine_rows_vs(&query.embedding, &lang, head.dim_high);
    let n = scores.len() as f64;
    let mean: f64 = scores.iter().map(|&s| s as f64).sum::<f64>() / n;
    let var: f64 = scores
        .iter()
        .map(|&s| (s as f64 - mean) * (s as f64 - mean))
        .sum::<f64>()
        / n;
    let threshold = (mean + kappa as f64 * var.sqrt()) as f32;
    let selection = scores
        .iter()
        .map(|&s| s >= threshold && s >= SCORE_FLOOR_3D)
        .collect();
    Ok(QueryResult3D {
        selection,
        scores,
        threshold,
    })
}

/// Intersection over union; both masks empty counts as 1.
pub fn miou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::validation("mask lengths disagree"));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Fraction of queries whose argmax pixel landed inside the ground truth.
pub fn localization_acc(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        return 0.0;
    }
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}

/// Fraction of per-query IoUs at or above 0.25. Errors on an empty set.
pub fn acc_at_025(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::validation("acc@0.25 undefined on an empty query set"));
    }
    Ok(ious.iter().filter(|&&i| i >= 0.25).count() as f64 / ious.len() as f64)
}

/// Per-entry attention maps of one view: the column A[:, j] per codebook
/// entry scattered over covered pixels, plus the coverage list.
pub fn entry_activation_maps(
    ckpt: &Checkpoint,
    camera: &Camera,
) -> Result<(Vec<Vec<f32>>, Vec<usize>, usize, usize)> {
    let head = require_stage2(ckpt)?;
    let out = render_ld_map(ckpt, camera)?;
    let d = out.p_dim;
    let n_pix = out.width * out.height;
    let covered: Vec<usize> = (0..n_pix)
        .filter(|&p| out.accum_weight[p] >= COVERAGE_THRESHOLD)
        .collect();
    let mut queries = Vec::with_capacity(covered.len() * d);
    for &p in &covered {
        queries.extend_from_slice(&out.payload_image[p * d..(p + 1) * d]);
    }
    let att = attention_forward(head, &queries)?;
    let nc = head.n_entries;
    let mut maps = vec![vec![0.0f32; n_pix]; nc];
    for (ci, &p) in covered.iter().enumerate() {
        for (j, map) in maps.iter_mut().enumerate() {
            map[p] = att.a[ci * nc + j];
        }
    }
    Ok((maps, covered, out.width, out.height))
}

/// For each codebook entry, the region activating at >= 0.5 of the entry's
/// maximum attention (over covered pixels).
pub fn entry_activation_masks(ckpt: &Checkpoint, camera: &Camera) -> Result<Vec<Vec<bool>>> {
    let (maps, covered, w, h) = entry_activation_maps(ckpt, camera)?;
    let mut out = Vec::with_capacity(maps.len());
    for map in &maps {
        let mx = covered.iter().map(|&p| map[p]).fold(0.0f32, f32::max);
        let mut mask = vec![false; w * h];
        if mx > 0.0 {
            for &p in &covered {
                mask[p] = map[p] >= 0.5 * mx;
            }
        }
        out.push(mask);
    }
    Ok(out)
}

/// Write per-entry heatmaps (min-max normalized over covered pixels, blue to
/// red) and the RGB image masked to each entry's high-activation region.
/// Returns the written paths.
pub fn export_entry_heatmaps(
    ckpt: &Checkpoint,
    scene: &SceneModel,
    camera: &Camera,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (maps, covered, w, h) = entry_activation_maps(ckpt, camera)?;
    let rgb = {
        let scene_now = SceneModel {
            splats: ckpt.splats.clone(),
            cameras: vec![camera.clone()],
            vocab: scene.vocab.clone(),
        };
        raster::render_color(&scene_now, camera, false)?.payload_image
    };
    let mut written = Vec::new();
    for (j, map) in maps.iter().enumerate() {
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &p in &covered {
            lo = lo.min(map[p]);
            hi = hi.max(map[p]);
        }
        let span = (hi - lo).max(1e-12);
        let mut norm = vec![0.0f32; w * h];
        for &p in &covered {
            norm[p] = (map[p] - lo) / span;
        }
        let heat = tensorio::heatmap_to_image(&norm);
        let heat_path = out_dir.join(format!("entry_{j:02}.ppm"));
        tensorio::write_ppm(&heat_path, w, h, &heat)?;
        written.push(heat_path);

        let mut masked = vec![0.0f32; w * h * 3];
        for &p in &covered {
            if map[p] >= 0.5 * hi {
                for c in 0..3 {
                    masked[p * 3 + c] = rgb[p * 3 + c].clamp(0.0, 1.0);
                }
            }
        }
        let mask_path = out_dir.join(format!("entry_{j:02}_masked.ppm"));
        tensorio::write_ppm(&mask_path, w, h, &masked)?;
        written.push(mask_path);
    }
    Ok(written)
}

/// Mean attention-row entropy over every supervised pixel of every view;
/// the quantity the entropy-regularization ablation tracks.
pub fn mean_attention_entropy(
    ckpt: &Checkpoint,
    cameras: &[Camera],
    supervision: &[ViewSupervision],
) -> Result<f64> {
    let head = require_stage2(ckpt)?;
    let banks = crate::train::build_pixel_banks(ckpt, cameras, supervision)?;
    let mut total = 0.0f64;
    let mut rows = 0usize;
    for bank in &banks {
        if bank.n_pixels == 0 {
            continue;
        }
        let att = attention_forward(head, &bank.queries)?;
        total += crate::attention::entropy_loss(&att.a, bank.n_pixels, head.n_entries) as f64
            * bank.n_pixels as f64;
        rows += bank.n_pixels;
    }
    if rows == 0 {
        return Err(Error::validation("no supervised pixels to evaluate"));
    }
    Ok(total / rows as f64)
}

/// One query's aggregated metrics across all cameras.
#[derive(Debug, Clone)]
pub struct QueryEvalRow {
    pub name: String,
    pub miou_2d: f64,
    pub acc_2d: f64,
    pub miou_3d: f64,
    pub iou_3d_at_025: bool,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<QueryEvalRow>,
    pub mean_miou_2d: f64,
    pub mean_acc_2d: f64,
    pub mean_miou_3d: f64,
    pub acc_at_025_3d: f64,
    pub tau_rel: f32,
    pub kappa: f32,
}

impl EvalReport {
    /// Fixed columns: query,miou_2d,acc_2d,miou_3d,acc_at_025_3d.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query,miou_2d,acc_2d,miou_3d,acc_at_025_3d\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.name,
                r.miou_2d,
                r.acc_2d,
                r.miou_3d,
                if r.iou_3d_at_025 { 1 } else { 0 }
            ));
        }
        out.push_str(&format!(
            "mean,{},{},{},{}\n",
            self.mean_miou_2d, self.mean_acc_2d, self.mean_miou_3d, self.acc_at_025_3d
        ));
        out
    }
}

/// Ground-truth pixel mask of one class in one view.
pub fn gt_class_mask(view: &ViewSupervision, class: i32) -> Vec<bool> {
    view.masks.iter().map(|&m| m == class).collect()
}

/// Run every vocabulary query in both 2D and 3D against the generator's
/// ground truth. 2D IoU and localization hits are averaged over the
/// camera set; 3D renders the selected splats per camera and compares the
/// coverage mask against the class's ground-truth mask.
pub fn evaluate(
    ckpt: &Checkpoint,
    scene: &SceneModel,
    supervision: &[ViewSupervision],
    tau_rel: f32,
    kappa: f32,
) -> Result<EvalReport> {
    if scene.vocab.is_empty() {
        return Err(Error::validation("scene has no vocabulary to evaluate"));
    }
    if scene.cameras.len() != supervision.len() {
        return Err(Error::validation("one supervision view per camera required"));
    }
    let scene_now = SceneModel {
        splats: ckpt.splats.clone(),
        cameras: scene.cameras.clone(),
        vocab: scene.vocab.clone(),
    };
    let mut rows = Vec::new();
    for (class, entry) in scene.vocab.iter().enumerate() {
        let query = TextQuery::new(entry.name.clone(), entry.embedding.clone())?;
        let mut ious_2d = Vec::new();
        let mut hits = Vec::new();
        let mut ious_3d = Vec::new();
        let q3 = query_3d(ckpt, &query, kappa)?;
        for (cam, view) in scene.cameras.iter().zip(supervision) {
            let gt = gt_class_mask(view, class as i32);
            let gt_nonempty = gt.iter().any(|&g| g);
            let q2 = query_2d(ckpt, cam, &query, tau_rel)?;
            if gt_nonempty {
                ious_2d.push(miou(&q2.mask, &gt)?);
                let (r, c) = q2.argmax_pixel;
                hits.push(gt[r * view.width + c]);
            }
            let (_, sel_mask) = raster::render_selected(&scene_now, cam, &q3.selection)?;
            if gt_nonempty {
                ious_3d.push(miou(&sel_mask, &gt)?);
            }
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let miou_3d = mean(&ious_3d);
        rows.push(QueryEvalRow {
            name: entry.name.clone(),
            miou_2d: mean(&ious_2d),
            acc_2d: localization_acc(&hits),
            miou_3d,
            iou_3d_at_025: miou_3d >= 0.25,
        });
    }
    let n = rows.len() as f64;
    let report = EvalReport {
        mean_miou_2d: rows.iter().map(|r| r.miou_2d).sum::<f64>() / n,
        mean_acc_2d: rows.iter().map(|r| r.acc_2d).sum::<f64>() / n,
        mean_miou_3d: rows.iter().map(|r| r.miou_3d).sum::<f64>() / n,
        acc_at_025_3d: rows.iter().filter(|r| r.iou_3d_at_025).count() as f64 / n,
        rows,
        tau_rel,
        kappa,
    };
    Ok(report)
}

/// Derived LD maps for every view (the preprocessing product stage 1 trains
/// against), attached in place.
pub fn attach_ld_maps(
    supervision: &mut [ViewSupervision],
    pca: &crate::preprocess::PcaProjection,
) -> Result<()> {
    for view in supervision.iter_mut() {
        view.ld_map = Some(compute_ld_map(view, pca)?);
    }
    Ok(())
}
