//! Two-stage training. Stage 1 jointly optimizes the appearance branch
//! (colors, appearance opacities) with the photometric loss and, after a
//! photometric-only warmup, distills LD feature maps into the feature field
//! and the semantic opacities. Stage 2 freezes everything upstream, renders
//! each camera's LD map once, and trains the attention head plus the codebook
//! on sampled supervised pixels. Geometry stays frozen throughout.

pub mod adam;
pub mod checkpoint;
pub mod losses;

pub use adam::AdamState;
pub use checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Stage};
pub use losses::{ld_loss, ld_loss_backward, photometric_backward, photometric_loss};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::attention::{
    attention_backward, attention_forward, entropy_loss, init_attention_head, lang_loss,
    lang_loss_backward,
};
use crate::error::{Error, Result};
use crate::field::{FeatureField, SceneBounds};
use crate::math::sigmoid;
use crate::preprocess::{Codebook, PcaProjection};
use crate::raster::{composite, composite_backward, project_scene, Projected2D, ViewGeom};
use crate::rng::{stream_rng, Stream};
use crate::scene::{Camera, GaussianSplat, SceneModel, ViewSupervision};

/// All tunables of the two training stages. Desk-scale defaults; the
/// full-scale values (30k/10k/15k iterations, 32776 pixels, d = 16,
/// D = 512) remain reachable through configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1_iters: u32,
    pub stage2_iters: u32,
    /// Photometric-only iterations at the start of stage 1.
    pub warmup_iters: u32,
    pub pixels_per_iter: u32,
    /// LD feature dimension d.
    pub d: u32,
    /// Attention hidden dimension.
    pub d_h: u32,
    pub n_freq: u32,
    pub field_hidden: u32,
    /// Weight of the photometric term (1.0; exposed for ablations).
    pub lambda_pho: f32,
    pub lambda_ld: f32,
    pub lambda_entropy: f32,
    pub lr_color: f32,
    pub lr_opacity: f32,
    pub lr_sem_opacity: f32,
    pub lr_field: f32,
    pub lr_attention: f32,
    /// Ablation: rasterize features with the appearance opacity instead of
    /// the semantic opacity.
    pub couple_semantic_opacity: bool,
    /// Ablation: keep the codebook at its initialization during stage 2.
    pub freeze_codebook: bool,
    /// Route stage-1 semantic gradients into splat colors (off by default so
    /// the ablations stay clean).
    pub route_semantic_color_grads: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            stage1_iters: 2000,
            stage2_iters: 1000,
            warmup_iters: 500,
            pixels_per_iter: 4096,
            d: 8,
            d_h: 128,
            n_freq: 6,
            field_hidden: 128,
            lambda_pho: 1.0,
            lambda_ld: 0.01,
            lambda_entropy: 0.001,
            lr_color: 1e-2,
            lr_opacity: 1e-2,
            lr_sem_opacity: 1e-2,
            lr_field: 1e-3,
            lr_attention: 1e-3,
            couple_semantic_opacity: false,
            freeze_codebook: false,
            route_semantic_color_grads: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_h == 0 || self.field_hidden == 0 || self.pixels_per_iter == 0 {
            return Err(Error::validation("dimensions and batch sizes must be positive"));
        }
        for (name, v) in [
            ("lambda_pho", self.lambda_pho),
            ("lambda_ld", self.lambda_ld),
            ("lambda_entropy", self.lambda_entropy),
        ] {
            if !(v >= 0.0) {
                return Err(Error::validation(format!("{name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("lr_color", self.lr_color),
            ("lr_opacity", self.lr_opacity),
            ("lr_sem_opacity", self.lr_sem_opacity),
            ("lr_field", self.lr_field),
            ("lr_attention", self.lr_attention),
        ] {
            if !(v > 0.0) {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-iteration loss components, written out as CSV by the front end.
#[derive(Debug, Clone)]
pub struct LossTrace {
    pub columns: Vec<&'static str>,
    pub rows: Vec<(u64, Vec<f64>)>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (it, vals) in &self.rows {
            out.push_str(&it.to_string());
            for v in vals {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn gather_f32(ids: &[u32], per_splat: &[f32], stride: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(ids.len() * stride);
    for &id in ids {
        out.extend_from_slice(&per_splat[id as usize * stride..(id as usize + 1) * stride]);
    }
    out
}

struct FieldAdam {
    states: Vec<AdamState>,
}

impl FieldAdam {
    fn new(field: &FeatureField) -> FieldAdam {
        let mut states = Vec::new();
        for l in &field.mlp.layers {
            states.push(AdamState::new(l.w.len()));
            states.push(AdamState::new(l.b.len()));
        }
        FieldAdam { states }
    }

    fn step(&mut self, field: &mut FeatureField, grads: &crate::field::Mlp<f32>, lr: f32) {
        for (li, (l, g)) in field.mlp.layers.iter_mut().zip(&grads.layers).enumerate() {
            self.states[li * 2].step(&mut l.w, &g.w, lr);
            self.states[li * 2 + 1].step(&mut l.b, &g.b, lr);
        }
    }
}

/// Stage 1: photometric warmup, then joint photometric + LD distillation.
/// One camera per iteration in seeded round-robin order (reshuffled each
/// epoch). Returns the stage-1 checkpoint and the loss trace.
pub fn train_stage1(
    scene: &SceneModel,
    supervision: &[ViewSupervision],
    pca: &PcaProjection,
    codebook: &Codebook,
    config: &TrainConfig,
) -> Result<(Checkpoint, LossTrace)> {
    config.validate()?;
    scene.validate()?;
    codebook.validate()?;
    if supervision.len() != scene.cameras.len() {
        return Err(Error::validation("one supervision view per camera required"));
    }
    let d = config.d as usize;
    for (i, view) in supervision.iter().enumerate() {
        match &view.ld_map {
            None => {
                return Err(Error::validation(format!(
                    "view {i} has no LD map; run preprocessing first"
                )))
            }
            Some(m) if m.d != d => {
                return Err(Error::validation(format!(
                    "view {i} LD map dimension {} does not match config d = {d}",
                    m.d
                )))
            }
            _ => {}
        }
    }

    let n = scene.splats.len();
    let mut splats: Vec<GaussianSplat> = scene.splats.to_vec();
    let mut field = FeatureField::new(
        config.seed,
        config.n_freq as usize,
        config.field_hidden as usize,
        d,
        SceneBounds::of_scene(scene),
    );

    // Geometry is frozen, so per-camera projections are computed once.
    let proj_cache: Vec<(Vec<Projected2D<f32>>, Vec<u32>)> = scene
        .cameras
        .iter()
        .map(|cam| project_scene(&splats, &ViewGeom::from_camera(cam), None))
        .collect();
    let supervised: Vec<Vec<usize>> = supervision.iter().map(|v| v.supervised_pixels()).collect();
    let ld_targets: Vec<Vec<f32>> = supervision
        .iter()
        .zip(&supervised)
        .map(|(view, pix)| {
            let m = view.ld_map.as_ref().unwrap();
            let mut rows = Vec::with_capacity(pix.len() * d);
            for &p in pix {
                rows.extend_from_slice(&m.data[p * d..(p + 1) * d]);
            }
            rows
        })
        .collect();

    let mut adam_color = AdamState::new(n * 3);
    let mut adam_alpha = AdamState::new(n);
    let mut adam_sem = AdamState::new(n);
    let mut adam_field = FieldAdam::new(&field);

    let mut order_rng = stream_rng(config.seed, Stream::CameraOrder);
    let n_cams = scene.cameras.len();
    let mut order: Vec<usize> = (0..n_cams).collect();

    let mut trace = LossTrace {
        columns: vec!["photometric", "ld", "total"],
        rows: Vec::new(),
    };

    for iter in 0..config.stage1_iters as usize {
        if iter % n_cams == 0 {
            order.shuffle(&mut order_rng);
        }
        let cam_idx = order[iter % n_cams];
        let cam = &scene.cameras[cam_idx];
        let view = &supervision[cam_idx];
        let (projected, ids) = &proj_cache[cam_idx];
        let (w, h) = (cam.width as usize, cam.height as usize);

        let colors_full: Vec<f32> = splats.iter().flat_map(|s| s.color).collect();
        let alphas_full: Vec<f32> = splats.iter().map(|s| sigmoid(s.alpha_logit)).collect();

        // Photometric pass.
        let mut pho = 0.0f64;
        let mut grad_color = vec![0.0f32; n * 3];
        let mut grad_alpha = vec![0.0f32; n];
        let mut have_pho = false;
        if config.lambda_pho > 0.0 {
            let colors = gather_f32(ids, &colors_full, 3);
            let alphas = gather_f32(ids, &alphas_full, 1);
            let out = composite(projected, ids, &colors, 3, &alphas, w, h, true)?;
            pho = photometric_loss(&view.color, &out.payload_image, h, w)? as f64;
            let mut upstream = photometric_backward(&view.color, &out.payload_image, h, w)?;
            for g in upstream.iter_mut() {
                *g *= config.lambda_pho;
            }
            let grads =
                composite_backward(&out, projected, ids, &colors, &alphas, &upstream, n, false)?;
            grad_color = grads.payloads;
            grad_alpha = grads.opacity_logits;
            have_pho = true;
        }

        // Semantic distillation pass.
        let mut ld = 0.0f64;
        let mut field_grads = None;
        let mut grad_sem = vec![0.0f32; n];
        let mut sem_color_grads = None;
        let run_semantic = iter >= config.warmup_iters as usize && config.lambda_ld > 0.0;
        if run_semantic {
            let (features, fcache) = field.forward(&splats);
            let sem_full: Vec<f32> = if config.couple_semantic_opacity {
                alphas_full.clone()
            } else {
                splats.iter().map(|s| sigmoid(s.sem_alpha_logit)).collect()
            };
            let feats = gather_f32(ids, &features, d);
            let sems = gather_f32(ids, &sem_full, 1);
            let out = composite(projected, ids, &feats, d, &sems, w, h, true)?;

            let pix = &supervised[cam_idx];
            if !pix.is_empty() {
                let mut pred = Vec::with_capacity(pix.len() * d);
                for &p in pix {
                    pred.extend_from_slice(&out.payload_image[p * d..(p + 1) * d]);
                }
                let target = &ld_targets[cam_idx];
                ld = ld_loss(target, &pred, d)? as f64;
                let grad_rows = ld_loss_backward(target, &pred, d)?;
                let mut upstream = vec![0.0f32; w * h * d];
                for (ri, &p) in pix.iter().enumerate() {
                    for k in 0..d {
                        upstream[p * d + k] = config.lambda_ld * grad_rows[ri * d + k];
                    }
                }
                let grads =
                    composite_backward(&out, projected, ids, &feats, &sems, &upstream, n, false)?;
                let (fg, cg) =
                    field.backward(&fcache, &grads.payloads, config.route_semantic_color_grads)?;
                field_grads = Some(fg);
                sem_color_grads = cg;
                if !config.couple_semantic_opacity {
                    grad_sem = grads.opacity_logits;
                }
                // In the coupled ablation the feature pass reads the
                // appearance opacity but, per the default gradient-routing
                // decision, does not update it.
            }
        }

        // Apply all updates after both passes so gradients are consistent.
        if have_pho {
            if let Some(cg) = &sem_color_grads {
                for (g, &c) in grad_color.iter_mut().zip(cg) {
                    *g += c;
                }
            }
            apply_colors(&mut splats, &grad_color, config.lr_color, &mut adam_color);
            adam_alpha_step(&mut splats, &grad_alpha, config.lr_opacity, &mut adam_alpha);
        }
        if let Some(fg) = &field_grads {
            adam_field.step(&mut field, fg, config.lr_field);
            if !config.couple_semantic_opacity {
                adam_sem_step(&mut splats, &grad_sem, config.lr_sem_opacity, &mut adam_sem);
            }
        }

        let total = config.lambda_pho as f64 * pho + config.lambda_ld as f64 * ld;
        trace.rows.push((iter as u64, vec![pho, ld, total]));
    }

    let ckpt = Checkpoint {
        stage: Stage::Stage1,
        iteration: config.stage1_iters as u64,
        config: config.clone(),
        splats,
        field,
        pca: pca.clone(),
        codebook: codebook.clone(),
        attention: None,
    };
    Ok((ckpt, trace))
}

fn apply_colors(
    splats: &mut [GaussianSplat],
    grads: &[f32],
    lr: f32,
    adam: &mut AdamState,
) {
    let mut params: Vec<f32> = splats.iter().flat_map(|s| s.color).collect();
    adam.step(&mut params, grads, lr);
    for (s, chunk) in splats.iter_mut().zip(params.chunks_exact(3)) {
        s.color = [
            chunk[0].clamp(0.0, 1.0),
            chunk[1].clamp(0.0, 1.0),
            chunk[2].clamp(0.0, 1.0),
        ];
    }
}

fn adam_alpha_step(splats: &mut [GaussianSplat], grads: &[f32], lr: f32, adam: &mut AdamState) {
    let mut params: Vec<f32> = splats.iter().map(|s| s.alpha_logit).collect();
    adam.step(&mut params, grads, lr);
    for (s, &p) in splats.iter_mut().zip(&params) {
        s.alpha_logit = p;
    }
}

fn adam_sem_step(splats: &mut [GaussianSplat], grads: &[f32], lr: f32, adam: &mut AdamState) {
    let mut params: Vec<f32> = splats.iter().map(|s| s.sem_alpha_logit).collect();
    adam.step(&mut params, grads, lr);
    for (s, &p) in splats.iter_mut().zip(&params) {
        s.sem_alpha_logit = p;
    }
}

/// Rendered LD rows and full-D targets for every supervised pixel of one
/// camera, cached once per stage-2 run (everything upstream is frozen).
pub struct PixelBank {
    pub queries: Vec<f32>,
    pub targets: Vec<f32>,
    pub n_pixels: usize,
}

/// Render each camera's LD feature map with the checkpoint's field and
/// semantic opacities and collect (query, target) rows over supervised
/// pixels.
pub fn build_pixel_banks(
    ckpt: &Checkpoint,
    cameras: &[Camera],
    supervision: &[ViewSupervision],
) -> Result<Vec<PixelBank>> {
    let d = ckpt.field.feature_dim();
    let (features, _) = ckpt.field.forward(&ckpt.splats);
    let sem_full: Vec<f32> = if ckpt.config.couple_semantic_opacity {
        ckpt.splats.iter().map(|s| sigmoid(s.alpha_logit)).collect()
    } else {
        ckpt.splats.iter().map(|s| sigmoid(s.sem_alpha_logit)).collect()
    };
    let mut banks = Vec::with_capacity(cameras.len());
    for (cam, view) in cameras.iter().zip(supervision) {
        let (projected, ids) = project_scene(&ckpt.splats, &ViewGeom::from_camera(cam), None);
        let feats = gather_f32(&ids, &features, d);
        let sems = gather_f32(&ids, &sem_full, 1);
        let out = composite(
            &projected,
            &ids,
            &feats,
            d,
            &sems,
            cam.width as usize,
            cam.height as usize,
            false,
        )?;
        let pix = view.supervised_pixels();
        let mut queries = Vec::with_capacity(pix.len() * d);
        let mut targets = Vec::with_capacity(pix.len() * view.feature_dim);
        for &p in &pix {
            queries.extend_from_slice(&out.payload_image[p * d..(p + 1) * d]);
            targets.extend_from_slice(view.mask_feature(view.masks[p] as usize));
        }
        banks.push(PixelBank {
            queries,
            targets,
            n_pixels: pix.len(),
        });
    }
    Ok(banks)
}

/// Stage 2: train the attention head and (unless frozen) the codebook on
/// sampled supervised pixels of cached LD renders.
pub fn train_stage2(
    ckpt: &Checkpoint,
    cameras: &[Camera],
    supervision: &[ViewSupervision],
    config: &TrainConfig,
) -> Result<(Checkpoint, LossTrace)> {
    config.validate()?;
    if ckpt.stage != Stage::Stage1 {
        return Err(Error::validation(
            "stage-order violation: stage 2 requires a stage-1 checkpoint",
        ));
    }
    ckpt.codebook.validate()?;
    if cameras.len() != supervision.len() {
        return Err(Error::validation("one supervision view per camera required"));
    }
    let d = ckpt.field.feature_dim();
    let dim_high = ckpt.codebook.dim;

    let banks = build_pixel_banks(ckpt, cameras, supervision)?;
    let eligible: Vec<usize> = (0..banks.len()).filter(|&i| banks[i].n_pixels > 0).collect();
    if eligible.is_empty() {
        return Err(Error::validation("no supervised pixels in any view"));
    }

    let mut head = init_attention_head::<f32>(config.seed, d, config.d_h as usize, &ckpt.codebook);
    let mut adam_wq = AdamState::new(head.wq.len());
    let mut adam_bq = AdamState::new(head.bq.len());
    let mut adam_wk = AdamState::new(head.wk.len());
    let mut adam_bk = AdamState::new(head.bk.len());
    let mut adam_cb = AdamState::new(head.codebook.len());

    let mut rng = stream_rng(config.seed, Stream::PixelSampling);
    let batch = config.pixels_per_iter as usize;
    let mut trace = LossTrace {
        columns: vec!["lang", "entropy", "total"],
        rows: Vec::new(),
    };

    for iter in 0..config.stage2_iters as usize {
        let bank = &banks[eligible[rng.gen_range(0..eligible.len())]];
        let mut queries = Vec::with_capacity(batch * d);
        let mut targets = Vec::with_capacity(batch * dim_high);
        for _ in 0..batch {
            let p = rng.gen_range(0..bank.n_pixels);
            queries.extend_from_slice(&bank.queries[p * d..(p + 1) * d]);
            targets.extend_from_slice(&bank.targets[p * dim_high..(p + 1) * dim_high]);
        }

        let out = attention_forward(&head, &queries)?;
        let lang = lang_loss(&targets, &out.lhat, dim_high)? as f64;
        let ent = entropy_loss(&out.a, batch, head.n_entries) as f64;
        let grad_lhat = lang_loss_backward(&targets, &out.lhat, dim_high)?;
        let grads = attention_backward(
            &head,
            &out,
            &grad_lhat,
            config.lambda_entropy,
            !config.freeze_codebook,
            false,
        )?;
        adam_wq.step(&mut head.wq, &grads.wq, config.lr_attention);
        adam_bq.step(&mut head.bq, &grads.bq, config.lr_attention);
        adam_wk.step(&mut head.wk, &grads.wk, config.lr_attention);
        adam_bk.step(&mut head.bk, &grads.bk, config.lr_attention);
        if let Some(cbg) = &grads.codebook {
            adam_cb.step(&mut head.codebook, cbg, config.lr_attention);
        }

        let total = lang + config.lambda_entropy as f64 * ent;
        trace.rows.push((iter as u64, vec![lang, ent, total]));
    }

    let codebook = Codebook {
        n_entries: head.n_entries,
        dim: head.dim_high,
        entries: head.codebook.clone(),
    };
    let out = Checkpoint {
        stage: Stage::Stage2,
        iteration: config.stage2_iters as u64,
        config: config.clone(),
        splats: ckpt.splats.clone(),
        field: ckpt.field.clone(),
        pca: ckpt.pca.clone(),
        codebook,
        attention: Some(head),
    };
    Ok((out, trace))
}
