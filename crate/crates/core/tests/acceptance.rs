//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//! The heavyweight desk-scale pipeline is trained once and shared between
//! criteria through a OnceLock.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use gaff_core::attention::{attention_forward, entropy_loss, lang_loss, softmax_rows};
use gaff_core::field::SceneBounds;
use gaff_core::gradcheck;
use gaff_core::math::{sigmoid, Sym2};
use gaff_core::preprocess::{
    cosine_kmeans, fit_pca, init_codebook, select_codebook_size, Codebook,
};
use gaff_core::query::{self, TextQuery};
use gaff_core::raster::{
    composite, project_gaussian, project_scene, Projected2D, RenderOutput, ViewGeom,
};
use gaff_core::rng::{stream_rng, Stream};
use gaff_core::scene::{
    generate_synthetic_scene, Camera, GaussianSplat, SceneModel, SynthParams, ViewSupervision,
    VocabEntry,
};
use gaff_core::train::{
    encode_checkpoint, ld_loss, train_stage1, train_stage2, Checkpoint, TrainConfig,
};

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

// ---------------------------------------------------------------------------
// Shared desk-scale pipeline (criterion 4 config).

struct Pipeline {
    scene: SceneModel,
    supervision: Vec<ViewSupervision>,
    config: TrainConfig,
    ckpt1: Checkpoint,
    ckpt2: Checkpoint,
    report: query::EvalReport,
    elapsed_secs: f64,
}

static PIPELINE: OnceLock<Pipeline> = OnceLock::new();

fn pooled_features(supervision: &[ViewSupervision]) -> (Vec<f32>, usize, usize) {
    let dim = supervision[0].feature_dim;
    let mut feats = Vec::new();
    for v in supervision {
        feats.extend_from_slice(&v.mask_features);
    }
    let n = feats.len() / dim;
    (feats, n, dim)
}

fn pipeline() -> &'static Pipeline {
    PIPELINE.get_or_init(|| {
        let t0 = Instant::now();
        let params = SynthParams::default(); // 8 classes, 2000 splats, 16 cams, 64x64, D=32
        let config = TrainConfig::default(); // d=8, stage1=2000, stage2=1000
        let (scene, mut supervision) = generate_synthetic_scene(&params).unwrap();
        let (feats, n, dim) = pooled_features(&supervision);
        let pca = fit_pca(&feats, n, dim, config.d as usize).unwrap();
        let codebook = init_codebook(&feats, n, dim, 2, 16, config.seed).unwrap();
        query::attach_ld_maps(&mut supervision, &pca).unwrap();
        let (ckpt1, _) = train_stage1(&scene, &supervision, &pca, &codebook, &config).unwrap();
        let (ckpt2, _) = train_stage2(&ckpt1, &scene.cameras, &supervision, &config).unwrap();
        let report = query::evaluate(&ckpt2, &scene, &supervision, 0.6, 1.0).unwrap();
        Pipeline {
            scene,
            supervision,
            config,
            ckpt1,
            ckpt2,
            report,
            elapsed_secs: t0.elapsed().as_secs_f64(),
        }
    })
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient oracle.

#[test]
fn criterion_1_gradient_oracle() {
    let t0 = Instant::now();
    let report = gradcheck::run_gradcheck(42).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    for c in &report.components {
        assert!(
            c.pass(),
            "criterion 1 FAIL: {} max rel err {:.3e}",
            c.name,
            c.max_rel_err
        );
    }
    assert!(
        elapsed < 60.0,
        "criterion 1 FAIL: gradcheck took {elapsed:.1}s (budget 60s)"
    );
    let worst = report
        .components
        .iter()
        .map(|c| c.max_rel_err)
        .fold(0.0f64, f64::max);
    println!(
        "criterion 1 PASS: all adjoints match central differences \
         (worst rel err {worst:.3e} < 1e-4, {elapsed:.1}s)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: tile rasterizer vs an independent naive per-pixel compositor.

/// Reference compositor: per pixel, walk every gaussian in order with the
/// shared contribution rule. No tiles, no binning.
fn naive_composite(
    projected: &[Projected2D<f32>],
    payloads: &[f32],
    p_dim: usize,
    opacities: &[f32],
    width: usize,
    height: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut image = vec![0.0f32; width * height * p_dim];
    let mut accum = vec![0.0f32; width * height];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let pix = y * width + x;
            let mut acc = 0.0f32;
            for (k, p) in projected.iter().enumerate() {
                let d = [px - p.mean2d[0], py - p.mean2d[1]];
                let q = p.inv_cov2d.quad(d);
                if q > 9.0 {
                    continue;
                }
                let alpha = (opacities[k] * (-0.5 * q).exp()).min(0.99);
                let w = alpha * (1.0 - acc);
                for c in 0..p_dim {
                    image[pix * p_dim + c] += w * payloads[k * p_dim + c];
                }
                acc += w;
                if 1.0 - acc < 1e-4 {
                    break;
                }
            }
            accum[pix] = acc;
        }
    }
    (image, accum)
}

fn random_projected_scene(rng: &mut ChaCha8Rng, max_splats: usize) -> (Vec<Projected2D<f32>>, Vec<u32>) {
    let n = 10 + rng.gen_range(0..max_splats - 10);
    let view = ViewGeom {
        fx: 40.0,
        fy: 40.0,
        cx: 16.0,
        cy: 16.0,
        rot: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        trans: [0.0, 0.0, 0.0],
        width: 32,
        height: 32,
    };
    let mut entries: Vec<(u32, Projected2D<f32>)> = Vec::new();
    for i in 0..n {
        let mu = [
            rng.gen::<f32>() * 2.4 - 1.2,
            rng.gen::<f32>() * 2.4 - 1.2,
            2.0 + rng.gen::<f32>() * 3.0,
        ];
        let q: [f32; 4] = [
            rng.gen::<f32>() - 0.5,
            rng.gen::<f32>() - 0.5,
            rng.gen::<f32>() - 0.5,
            rng.gen::<f32>() - 0.5,
        ];
        let log_scale = [(0.02 + rng.gen::<f32>() * 0.2_f32).ln(); 3];
        if let Some(p) = project_gaussian(mu, q, log_scale, &view) {
            entries.push((i as u32, p));
        }
    }
    entries.sort_by(|a, b| a.1.depth.partial_cmp(&b.1.depth).unwrap().then(a.0.cmp(&b.0)));
    let ids = entries.iter().map(|e| e.0).collect();
    (entries.into_iter().map(|e| e.1).collect(), ids)
}

#[test]
fn criterion_2_rasterizer_oracle_equivalence() {
    let mut rng = stream_rng(2024, Stream::GradCheck);
    let mut worst = 0.0f32;
    for scene_i in 0..20 {
        let (projected, ids) = random_projected_scene(&mut rng, 100);
        let n = projected.len();
        let payloads: Vec<f32> = (0..n * 3).map(|_| rng.gen::<f32>()).collect();
        let opacities: Vec<f32> = (0..n).map(|_| 0.05 + 0.9 * rng.gen::<f32>()).collect();
        let tile = composite(&projected, &ids, &payloads, 3, &opacities, 32, 32, true).unwrap();
        let (naive_img, naive_acc) = naive_composite(&projected, &payloads, 3, &opacities, 32, 32);
        for (a, b) in tile.payload_image.iter().zip(&naive_img) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in tile.accum_weight.iter().zip(&naive_acc) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst <= 1e-6, "criterion 2 FAIL on scene {scene_i}: max diff {worst}");

        // Per-pixel weights reproduce the accumulated weight exactly as
        // computed, and never exceed 1.
        for (pix, lst) in tile.contrib.as_ref().unwrap().iter().enumerate() {
            let mut sum = 0.0f32;
            for c in lst {
                assert!(c.weight >= 0.0);
                sum += c.weight;
            }
            assert_eq!(
                sum, tile.accum_weight[pix],
                "criterion 2 FAIL: weight sum mismatch at pixel {pix}"
            );
            assert!(sum <= 1.0 + 1e-6);
        }
    }
    println!(
        "criterion 2 PASS: tile compositor matches the naive oracle on 20 scenes \
         (max abs diff {worst:.2e} <= 1e-6) and weight sums are exact"
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: codebook size recovery.

#[test]
fn criterion_3_codebook_size_recovery() {
    for n_classes in [4usize, 8, 12] {
        let mut hits = 0;
        for seed in 0..10u64 {
            let params = SynthParams {
                seed: 1000 + seed,
                n_classes,
                splats_per_class: 10,
                n_cameras: 8,
                width: 16,
                height: 16,
                embed_dim: 32,
            };
            let (scene, supervision) = generate_synthetic_scene(&params).unwrap();
            let (feats, n, dim) = pooled_features(&supervision);
            let found = select_codebook_size(&feats, n, dim, 2, 16, 7 * seed + 1).unwrap();
            if found == n_classes {
                hits += 1;
                // Centroids must recover the class embeddings.
                let cb = init_codebook(&feats, n, dim, 2, 16, 7 * seed + 1).unwrap();
                for entry in &scene.vocab {
                    let best = (0..cb.n_entries)
                        .map(|j| cosine(cb.entry(j), &entry.embedding))
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert!(
                        best >= 0.99,
                        "criterion 3 FAIL: centroid for {} matches at {best:.4} < 0.99",
                        entry.name
                    );
                }
            }
        }
        assert!(
            hits >= 9,
            "criterion 3 FAIL: n_classes = {n_classes} recovered in {hits}/10 seeds"
        );
        println!(
            "criterion 3 PASS: n_classes = {n_classes} recovered in {hits}/10 seeds \
             with centroid cosine >= 0.99"
        );
    }
}

// ---------------------------------------------------------------------------
// Criterion 4: end-to-end synthetic open-vocabulary segmentation.

#[test]
fn criterion_4_end_to_end_synthetic_ovs() {
    let p = pipeline();
    let r = &p.report;
    assert!(
        r.mean_miou_2d >= 0.85,
        "criterion 4 FAIL: 2D mIoU {:.4} < 0.85",
        r.mean_miou_2d
    );
    assert!(
        r.mean_acc_2d == 1.0,
        "criterion 4 FAIL: 2D localization Acc {:.4} != 1.0",
        r.mean_acc_2d
    );
    assert!(
        r.acc_at_025_3d == 1.0,
        "criterion 4 FAIL: 3D Acc@0.25 {:.4} != 1.0",
        r.acc_at_025_3d
    );
    assert!(
        r.mean_miou_3d >= 0.6,
        "criterion 4 FAIL: 3D mean IoU {:.4} < 0.6",
        r.mean_miou_3d
    );
    assert!(
        p.elapsed_secs < 600.0,
        "criterion 4 FAIL: pipeline took {:.0}s (budget 600s)",
        p.elapsed_secs
    );
    println!(
        "criterion 4 PASS: 2D mIoU {:.3} >= 0.85, 2D Acc {:.2} = 1.0, \
         3D Acc@0.25 {:.2} = 1.0, 3D mIoU {:.3} >= 0.6 in {:.0}s < 600s",
        r.mean_miou_2d, r.mean_acc_2d, r.acc_at_025_3d, r.mean_miou_3d, p.elapsed_secs
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: entropy ablation trend.

#[test]
fn criterion_5_entropy_ablation_trend() {
    let p = pipeline();
    let mut entropies = Vec::new();
    let mut ckpt_high = None;
    for lambda in [0.0f32, 0.001, 0.01] {
        let cfg = TrainConfig {
            lambda_entropy: lambda,
            stage2_iters: 400,
            ..p.config.clone()
        };
        let (ck, _) = train_stage2(&p.ckpt1, &p.scene.cameras, &p.supervision, &cfg).unwrap();
        entropies.push(query::mean_attention_entropy(&ck, &p.scene.cameras, &p.supervision).unwrap());
        if lambda == 0.01 {
            ckpt_high = Some(ck);
        }
    }
    assert!(
        entropies[0] > entropies[1] && entropies[1] > entropies[2],
        "criterion 5 FAIL: entropies not strictly decreasing: {entropies:?}"
    );

    // At lambda 0.01 every class has an entry whose top-activation region
    // overlaps its ground-truth mask with IoU >= 0.5.
    let ck = ckpt_high.unwrap();
    let masks = query::entry_activation_masks(&ck, &p.scene.cameras[0]).unwrap();
    let mut per_class = Vec::new();
    for class in 0..p.scene.vocab.len() {
        let gt = query::gt_class_mask(&p.supervision[0], class as i32);
        let best = masks
            .iter()
            .map(|m| query::miou(m, &gt).unwrap())
            .fold(0.0f64, f64::max);
        assert!(
            best >= 0.5,
            "criterion 5 FAIL: class {class} best entry-activation IoU {best:.3} < 0.5"
        );
        per_class.push(best);
    }
    println!(
        "criterion 5 PASS: mean attention entropy strictly decreasing over \
         lambda {{0, 0.001, 0.01}} ({:.4} > {:.4} > {:.4}); per-class best entry IoU >= {:.2}",
        entropies[0],
        entropies[1],
        entropies[2],
        per_class.iter().cloned().fold(f64::INFINITY, f64::min)
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: semantic-opacity decoupling.

/// A room whose walls are a patchwork cylinder of 8 opaque classes, with a
/// near-transparent object (class 8, alpha ~ 0.02 per splat) floating at the
/// center. Jittered interior cameras see a different wall mix behind the
/// object from every view.
fn transparent_room() -> (SceneModel, Vec<ViewSupervision>) {
    let mut rng = stream_rng(77, Stream::SceneGeometry);
    let mut emb_rng = stream_rng(78, Stream::SceneEmbeddings);
    let embeds =
        gaff_core::scene::sample_separated_embeddings(&mut emb_rng, 9, 32, 0.3).unwrap();

    let mut splats = Vec::new();
    let wall_colors = [
        [0.9, 0.3, 0.3],
        [0.3, 0.9, 0.3],
        [0.3, 0.3, 0.9],
        [0.9, 0.9, 0.3],
        [0.9, 0.3, 0.9],
        [0.3, 0.9, 0.9],
        [0.8, 0.6, 0.2],
        [0.6, 0.6, 0.6],
    ];
    for _ in 0..2400 {
        let phi = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
        let r = 4.0 + 0.1 * (rng.gen::<f64>() - 0.5);
        let z = 6.4 * (rng.gen::<f64>() - 0.5);
        let cell_a = (phi * 4.0 / 0.8) as usize;
        let cell_z = ((z + 3.2) / 0.8) as usize;
        let class = (cell_a + 3 * cell_z) % 8;
        splats.push(GaussianSplat {
            mu: [(r * phi.cos()) as f32, (r * phi.sin()) as f32, z as f32],
            rot: [1.0, 0.0, 0.0, 0.0],
            log_scale: [(0.18f32).ln(); 3],
            alpha_logit: 2.2,
            sem_alpha_logit: 0.0,
            color: wall_colors[class],
            class_id: Some(class as u32),
        });
    }
    for _ in 0..80 {
        let mut j = || 0.3 * (rng.gen::<f32>() * 2.0 - 1.0);
        let mu = [j(), j(), j()];
        splats.push(GaussianSplat {
            mu,
            rot: [1.0, 0.0, 0.0, 0.0],
            log_scale: [(0.045f32).ln(); 3],
            alpha_logit: (0.02f32 / 0.98).ln(),
            sem_alpha_logit: 0.0,
            color: [0.95, 0.95, 0.95],
            class_id: Some(8),
        });
    }
    let n_cams = 16;
    let mut cameras = Vec::new();
    for t in 0..n_cams {
        let theta =
            2.0 * std::f64::consts::PI * (t as f64 + 0.6 * rng.gen::<f64>()) / n_cams as f64;
        let radius = 1.8 + 0.8 * rng.gen::<f64>();
        let z = 1.6 * (rng.gen::<f64>() - 0.5);
        cameras.push(
            Camera::look_at(
                [radius * theta.cos(), radius * theta.sin(), z],
                [0.0, 0.0, 0.0],
                [0.0, 0.0, 1.0],
                48.0,
                48.0,
                48,
                48,
            )
            .unwrap(),
        );
    }
    let vocab = embeds
        .iter()
        .enumerate()
        .map(|(k, e)| VocabEntry {
            name: if k < 8 { format!("wall_{k}") } else { "glass".into() },
            embedding: e.clone(),
        })
        .collect();
    let scene = SceneModel {
        splats,
        cameras,
        vocab,
    };
    scene.validate().unwrap();

    // Supervision: colors from the true (transparent) scene; the object's
    // pixels labeled over its full visible extent via an opaque probe render,
    // the way a 2D segmenter would mask a glass object; everything else by
    // the max-weight-contributor rule.
    let mut probe = scene.clone();
    for s in probe.splats.iter_mut() {
        if s.class_id == Some(8) {
            s.alpha_logit = 2.2;
        }
    }
    let sel: Vec<bool> = probe.splats.iter().map(|s| s.class_id == Some(8)).collect();
    let mut sup = Vec::new();
    for cam in &scene.cameras {
        let out = gaff_core::raster::render_color(&scene, cam, true).unwrap();
        let sil: Vec<bool> = gaff_core::raster::render_selected(&probe, cam, &sel)
            .unwrap()
            .0
            .accum_weight
            .iter()
            .map(|&a| a >= 0.3)
            .collect();
        let contrib = out.contrib.as_ref().unwrap();
        let mut masks = vec![-1i32; out.width * out.height];
        for (pix, lst) in contrib.iter().enumerate() {
            if sil[pix] {
                masks[pix] = 8;
                continue;
            }
            if out.accum_weight[pix] < 0.5 {
                continue;
            }
            let mut best = (f32::NEG_INFINITY, 0u32);
            for c in lst {
                if c.weight > best.0 {
                    best = (c.weight, c.id);
                }
            }
            masks[pix] = scene.splats[best.1 as usize].class_id.unwrap() as i32;
        }
        let mask_features: Vec<f32> =
            scene.vocab.iter().flat_map(|v| v.embedding.clone()).collect();
        let view = ViewSupervision {
            width: out.width,
            height: out.height,
            color: out.payload_image,
            masks,
            n_masks: 9,
            feature_dim: 32,
            mask_features,
            ld_map: None,
        };
        view.validate().unwrap();
        sup.push(view);
    }
    (scene, sup)
}

fn object_pixel_cosine(
    ckpt: &Checkpoint,
    scene: &SceneModel,
    sup: &[ViewSupervision],
    class: i32,
) -> f64 {
    let d = ckpt.field.feature_dim();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (cam, view) in scene.cameras.iter().zip(sup) {
        let out = query::render_ld_map(ckpt, cam).unwrap();
        let m = view.ld_map.as_ref().unwrap();
        for (pix, &id) in view.masks.iter().enumerate() {
            if id != class {
                continue;
            }
            total += cosine(
                &out.payload_image[pix * d..(pix + 1) * d],
                &m.data[pix * d..(pix + 1) * d],
            );
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn criterion_6_semantic_opacity_decoupling() {
    let (scene, mut sup) = transparent_room();
    let (feats, n, dim) = pooled_features(&sup);
    let base = TrainConfig {
        stage1_iters: 800,
        warmup_iters: 200,
        lr_sem_opacity: 2e-2,
        ..TrainConfig::default()
    };
    let pca = fit_pca(&feats, n, dim, base.d as usize).unwrap();
    let codebook = init_codebook(&feats, n, dim, 2, 16, base.seed).unwrap();
    query::attach_ld_maps(&mut sup, &pca).unwrap();

    let decoupled_cfg = base.clone();
    let (ck_dec, _) = train_stage1(&scene, &sup, &pca, &codebook, &decoupled_cfg).unwrap();
    let dec = object_pixel_cosine(&ck_dec, &scene, &sup, 8);

    let coupled_cfg = TrainConfig {
        couple_semantic_opacity: true,
        ..base
    };
    let (ck_cpl, _) = train_stage1(&scene, &sup, &pca, &codebook, &coupled_cfg).unwrap();
    let cpl = object_pixel_cosine(&ck_cpl, &scene, &sup, 8);

    assert!(
        dec >= 0.9,
        "criterion 6 FAIL: decoupled LD cosine on the transparent object is {dec:.4} < 0.9"
    );
    assert!(
        cpl <= 0.5,
        "criterion 6 FAIL: coupled-opacity ablation reached {cpl:.4} > 0.5"
    );

    // Gradient-isolation identities, asserted bitwise: the feature pass is
    // constant in the appearance logits and the color pass is constant in
    // the semantic logits.
    let cam = &scene.cameras[0];
    let d = ck_dec.field.feature_dim();
    let base_feat = query::render_ld_map(&ck_dec, cam).unwrap();
    let base_color = gaff_core::raster::render_color(
        &SceneModel {
            splats: ck_dec.splats.clone(),
            cameras: vec![cam.clone()],
            vocab: vec![],
        },
        cam,
        false,
    )
    .unwrap();
    let mut perturbed = ck_dec.clone();
    for s in perturbed.splats.iter_mut() {
        s.alpha_logit += 0.7;
    }
    let feat_after = query::render_ld_map(&perturbed, cam).unwrap();
    assert_eq!(
        base_feat.payload_image, feat_after.payload_image,
        "criterion 6 FAIL: feature pass depends on appearance opacity"
    );
    let mut perturbed = ck_dec.clone();
    for s in perturbed.splats.iter_mut() {
        s.sem_alpha_logit -= 1.3;
    }
    let color_after = gaff_core::raster::render_color(
        &SceneModel {
            splats: perturbed.splats.clone(),
            cameras: vec![cam.clone()],
            vocab: vec![],
        },
        cam,
        false,
    )
    .unwrap();
    assert_eq!(
        base_color.payload_image, color_after.payload_image,
        "criterion 6 FAIL: color pass depends on semantic opacity"
    );
    let _ = d;
    println!(
        "criterion 6 PASS: transparent object LD cosine {dec:.3} >= 0.9 decoupled vs \
         {cpl:.3} <= 0.5 coupled; gradient-isolation identities hold bitwise"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: attention/rendering commutativity.

#[test]
fn criterion_7_commutativity() {
    let p = pipeline();
    let head = p.ckpt2.attention.as_ref().unwrap();
    let d = p.ckpt2.field.feature_dim();

    // Exact single-contributor case: a stack of four identical splats with
    // semantic opacity ~ 1 fully determines a pixel (residual transmittance
    // (1 - 0.99)^4 = 1e-8).
    let m: Vec<f32> = (0..d).map(|i| 0.3 + 0.1 * i as f32).collect();
    let cov = Sym2 {
        xx: 40.0f32,
        xy: 0.0,
        yy: 40.0,
    };
    let stack: Vec<Projected2D<f32>> = (0..4)
        .map(|i| Projected2D {
            mean2d: [0.5, 0.5],
            cov2d: cov,
            depth: 1.0 + i as f32,
            inv_cov2d: cov.inverse(),
            radius: 3.0 * cov.max_eigenvalue().sqrt(),
        })
        .collect();
    let payloads: Vec<f32> = stack.iter().flat_map(|_| m.clone()).collect();
    let out = composite(&stack, &[0, 1, 2, 3], &payloads, d, &[0.9999; 4], 1, 1, false).unwrap();
    assert!((out.accum_weight[0] - 1.0).abs() < 1e-5);

    let pixel_path = attention_forward(head, &out.payload_image).unwrap().lhat;
    let gaussian_path = attention_forward(head, &m).unwrap().lhat;
    let max_diff = pixel_path
        .iter()
        .zip(&gaussian_path)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(
        max_diff <= 1e-5,
        "criterion 7 FAIL: single-contributor paths differ by {max_diff:.2e} > 1e-5"
    );

    // General case: measure and report the gap between attending to rendered
    // features versus rendering per-gaussian attention outputs.
    let cam = &p.scene.cameras[0];
    let (features, _) = p.ckpt2.field.forward(&p.ckpt2.splats);
    let per_gauss = gaff_core::attention::per_gaussian_language(head, &features).unwrap();
    let dim_high = head.dim_high;
    let sem: Vec<f32> = p.ckpt2.splats.iter().map(|s| sigmoid(s.sem_alpha_logit)).collect();
    let view = ViewGeom::from_camera(cam);
    let (projected, ids) = project_scene(&p.ckpt2.splats, &view, None);
    let gather = |per: &[f32], stride: usize| -> Vec<f32> {
        let mut out = Vec::with_capacity(ids.len() * stride);
        for &id in &ids {
            out.extend_from_slice(&per[id as usize * stride..(id as usize + 1) * stride]);
        }
        out
    };
    let rendered_lang: RenderOutput<f32> = composite(
        &projected,
        &ids,
        &gather(&per_gauss, dim_high),
        dim_high,
        &gather(&sem, 1),
        view.width,
        view.height,
        false,
    )
    .unwrap();
    let ld = query::render_ld_map(&p.ckpt2, cam).unwrap();
    let mut covered_rows = Vec::new();
    let mut covered_pix = Vec::new();
    for pix in 0..ld.width * ld.height {
        if ld.accum_weight[pix] >= 0.5 {
            covered_rows.extend_from_slice(&ld.payload_image[pix * d..(pix + 1) * d]);
            covered_pix.push(pix);
        }
    }
    let att_of_render = attention_forward(head, &covered_rows).unwrap().lhat;
    let mut mean_cos = 0.0f64;
    let mut worst_cos = 1.0f64;
    for (row_i, &pix) in covered_pix.iter().enumerate() {
        let a = &att_of_render[row_i * dim_high..(row_i + 1) * dim_high];
        let b = &rendered_lang.payload_image[pix * dim_high..(pix + 1) * dim_high];
        let c = cosine(a, b);
        mean_cos += c;
        worst_cos = worst_cos.min(c);
    }
    mean_cos /= covered_pix.len() as f64;
    println!(
        "criterion 7 PASS: single-contributor paths agree within {max_diff:.2e} <= 1e-5; \
         general-case gap (reported, not gated): mean cosine {mean_cos:.4}, worst {worst_cos:.4} \
         over {} covered pixels",
        covered_pix.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: determinism and persistence.

fn run_small_pipeline() -> (Vec<u8>, String) {
    let params = SynthParams {
        seed: 9,
        n_classes: 4,
        splats_per_class: 60,
        n_cameras: 6,
        width: 32,
        height: 32,
        embed_dim: 16,
    };
    let config = TrainConfig {
        stage1_iters: 80,
        warmup_iters: 20,
        stage2_iters: 50,
        pixels_per_iter: 512,
        ..TrainConfig::default()
    };
    let (scene, mut sup) = generate_synthetic_scene(&params).unwrap();
    let (feats, n, dim) = pooled_features(&sup);
    let pca = fit_pca(&feats, n, dim, config.d as usize).unwrap();
    let codebook = init_codebook(&feats, n, dim, 2, 12, config.seed).unwrap();
    query::attach_ld_maps(&mut sup, &pca).unwrap();
    let (ck1, _) = train_stage1(&scene, &sup, &pca, &codebook, &config).unwrap();
    let (ck2, _) = train_stage2(&ck1, &scene.cameras, &sup, &config).unwrap();
    let report = query::evaluate(&ck2, &scene, &sup, 0.6, 1.0).unwrap();
    (encode_checkpoint(&ck2), report.to_csv())
}

#[test]
fn criterion_8_determinism_and_persistence() {
    let (bytes_a, csv_a) = run_small_pipeline();
    let (bytes_b, csv_b) = run_small_pipeline();
    assert_eq!(bytes_a, bytes_b, "criterion 8 FAIL: checkpoints differ across runs");
    assert_eq!(csv_a, csv_b, "criterion 8 FAIL: metric CSVs differ across runs");
    println!(
        "criterion 8 PASS: identical seeds give bit-identical checkpoints ({} bytes) \
         and metric CSVs; format round-trip property tests live in format_roundtrip.rs",
        bytes_a.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: analytic unit identities.

#[test]
fn criterion_9_analytic_identities() {
    // Softmax rows sum to one and are shift invariant.
    let mut rng = stream_rng(5, Stream::GradCheck);
    let mut logits: Vec<f64> = (0..6 * 5).map(|_| rng.gen::<f64>() * 8.0 - 4.0).collect();
    let mut shifted: Vec<f64> = logits.iter().map(|v| v + 57.25).collect();
    softmax_rows(&mut logits, 6, 5);
    softmax_rows(&mut shifted, 6, 5);
    for row in logits.chunks_exact(5) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    for (a, b) in logits.iter().zip(&shifted) {
        assert!((a - b).abs() < 1e-9);
    }

    // Entropy bounds [0, ln N_c] with exact endpoints.
    assert!((entropy_loss(&vec![0.25f64; 4], 1, 4) - 4.0f64.ln()).abs() < 1e-12);
    assert_eq!(entropy_loss(&[1.0f64, 0.0, 0.0, 0.0], 1, 4), 0.0);

    // Loss zero-points.
    let l = vec![0.6f64, -0.8, 0.3, 0.7];
    assert!(lang_loss(&l, &l, 2).unwrap().abs() < 1e-12);
    assert!(ld_loss(&l, &l, 4).unwrap().abs() < 1e-12);
    let c = vec![0.5f64; 6 * 6 * 3];
    assert!(
        gaff_core::train::photometric_loss(&c, &c, 6, 6)
            .unwrap()
            .abs()
            < 1e-12
    );

    // PCA basis orthonormality on random data.
    let data: Vec<f32> = (0..50 * 6).map(|_| rng.gen::<f32>()).collect();
    let pca = fit_pca(&data, 50, 6, 3).unwrap();
    for j in 0..3 {
        for l in 0..=j {
            let dot: f64 = (0..6)
                .map(|i| pca.basis[i * 3 + j] as f64 * pca.basis[i * 3 + l] as f64)
                .sum();
            let expect = if j == l { 1.0 } else { 0.0 };
            assert!((dot - expect).abs() < 1e-5);
        }
    }

    // IoU edge cases.
    let a = vec![true, false];
    let empty = vec![false, false];
    assert_eq!(query::miou(&a, &a).unwrap(), 1.0);
    assert_eq!(query::miou(&a, &empty).unwrap(), 0.0);
    assert_eq!(query::miou(&empty, &empty).unwrap(), 1.0);

    // k-means degenerate range and cosine-scale invariance already covered
    // by unit tests; rerun the two-cluster sanity here.
    let feats = vec![1.0f32, 0.0, 0.95, 0.05, -1.0, 0.0, -0.95, -0.05];
    let run = cosine_kmeans(&feats, 4, 2, 2, 3, 50).unwrap();
    assert_eq!(run.assignments[0], run.assignments[1]);
    assert_ne!(run.assignments[0], run.assignments[2]);

    // Attention rows of a live head are stochastic and retrieved rows stay
    // in the unit ball.
    let cb = Codebook {
        n_entries: 3,
        dim: 5,
        entries: (0..15).map(|i| 0.2 + 0.1 * (i % 4) as f32).collect(),
    };
    let head: gaff_core::attention::AttentionHead<f64> =
        gaff_core::attention::init_attention_head(3, 4, 6, &cb);
    let queries: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
    let out = attention_forward(&head, &queries).unwrap();
    for row in out.a.chunks_exact(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    for row in out.lhat.chunks_exact(5) {
        assert!(row.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1.0 + 1e-9);
    }

    println!(
        "criterion 9 PASS: softmax, entropy bounds, loss zero-points, PCA orthonormality, \
         IoU edge cases, and attention identities all hold"
    );
}

// ---------------------------------------------------------------------------
// Supporting invariants referenced by the criteria above.

#[test]
fn stage1_ld_cosine_reaches_threshold() {
    let p = pipeline();
    let d = p.ckpt1.field.feature_dim();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (cam, view) in p.scene.cameras.iter().zip(&p.supervision) {
        let out = query::render_ld_map(&p.ckpt1, cam).unwrap();
        let m = view.ld_map.as_ref().unwrap();
        for pix in view.supervised_pixels() {
            total += cosine(
                &out.payload_image[pix * d..(pix + 1) * d],
                &m.data[pix * d..(pix + 1) * d],
            );
            count += 1;
        }
    }
    let mean = total / count as f64;
    assert!(mean >= 0.95, "stage-1 LD cosine {mean:.4} < 0.95");
    println!("stage-1 mean LD cosine over supervised pixels: {mean:.4} >= 0.95");
}

#[test]
fn stage2_language_cosine_reaches_threshold() {
    let p = pipeline();
    let head = p.ckpt2.attention.as_ref().unwrap();
    let banks =
        gaff_core::train::build_pixel_banks(&p.ckpt2, &p.scene.cameras, &p.supervision).unwrap();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for bank in &banks {
        if bank.n_pixels == 0 {
            continue;
        }
        let out = attention_forward(head, &bank.queries).unwrap();
        for i in 0..bank.n_pixels {
            total += cosine(
                &out.lhat[i * head.dim_high..(i + 1) * head.dim_high],
                &bank.targets[i * head.dim_high..(i + 1) * head.dim_high],
            );
            count += 1;
        }
    }
    let mean = total / count as f64;
    assert!(mean >= 0.97, "stage-2 language cosine {mean:.4} < 0.97");
    println!("stage-2 mean language cosine over supervised pixels: {mean:.4} >= 0.97");
}

#[test]
fn feature_rendering_is_linear_in_payloads() {
    let mut rng = stream_rng(31, Stream::GradCheck);
    let (projected, ids) = random_projected_scene(&mut rng, 40);
    let n = projected.len();
    let f1: Vec<f32> = (0..n * 2).map(|_| rng.gen::<f32>()).collect();
    let f2: Vec<f32> = (0..n * 2).map(|_| rng.gen::<f32>()).collect();
    let ops: Vec<f32> = (0..n).map(|_| 0.1 + 0.8 * rng.gen::<f32>()).collect();
    let (a, b) = (0.7f32, -0.3f32);
    let mix: Vec<f32> = f1.iter().zip(&f2).map(|(&x, &y)| a * x + b * y).collect();
    let r1 = composite(&projected, &ids, &f1, 2, &ops, 32, 32, false).unwrap();
    let r2 = composite(&projected, &ids, &f2, 2, &ops, 32, 32, false).unwrap();
    let rm = composite(&projected, &ids, &mix, 2, &ops, 32, 32, false).unwrap();
    for ((x, y), m) in r1.payload_image.iter().zip(&r2.payload_image).zip(&rm.payload_image) {
        assert!((a * x + b * y - m).abs() < 1e-5);
    }
}

#[test]
fn field_is_spatially_coherent() {
    let p = pipeline();
    let field = &p.ckpt2.field;
    // Lipschitz bound: product of layer Frobenius norms times the encoder
    // Jacobian column norm (per-axis outputs are disjoint, so the Jacobian's
    // spectral norm equals one column's norm).
    let mut bound = 1.0f64;
    for l in &field.mlp.layers {
        bound *= l.w.iter().map(|&w| (w as f64) * (w as f64)).sum::<f64>().sqrt();
    }
    let enc_col: f64 = (1.0
        + (0..field.encoder.n_freq)
            .map(|k| {
                let f = std::f64::consts::PI * 2.0f64.powi(k as i32);
                f * f
            })
            .sum::<f64>())
    .sqrt();
    bound *= enc_col.max(1.0);

    let mut rng = stream_rng(13, Stream::GradCheck);
    let d = field.feature_dim();
    for _ in 0..20 {
        let base = [
            rng.gen::<f32>() * 1.6 - 0.8,
            rng.gen::<f32>() * 1.6 - 0.8,
            rng.gen::<f32>() * 1.6 - 0.8,
        ];
        let color = [0.5f32, 0.5, 0.5];
        let eval = |pos: [f32; 3]| -> Vec<f32> {
            let mut input = Vec::new();
            field.encoder.encode(pos, &mut input);
            input.extend_from_slice(&color);
            gaff_core::field::mlp_forward(&field.mlp, input).0
        };
        let m0 = eval(base);
        let mut prev_cos = -1.0f64;
        for eps in [1e-2f32, 1e-3, 1e-4] {
            let m1 = eval([base[0] + eps, base[1], base[2]]);
            let dist: f64 = m0
                .iter()
                .zip(&m1)
                .map(|(&x, &y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(
                dist <= bound * eps as f64 + 1e-9,
                "|m(x+e) - m(x)| = {dist:.3e} exceeds K*eps = {:.3e}",
                bound * eps as f64
            );
            let c = cosine(&m0, &m1);
            assert!(c >= prev_cos - 1e-6, "cosine not improving as eps shrinks");
            prev_cos = c;
        }
        assert!(prev_cos > 0.999, "cosine at eps=1e-4 is {prev_cos}");
        let _ = d;
    }
}

#[test]
fn stage1_loss_trend_is_non_increasing_smoothed() {
    // Smoke-level convergence: trailing-100 moving average of the total
    // stage-1 loss does not increase from the start of joint training to
    // the end.
    let p = pipeline();
    let params = SynthParams {
        n_classes: 4,
        splats_per_class: 80,
        n_cameras: 6,
        width: 32,
        height: 32,
        embed_dim: 16,
        seed: 33,
    };
    let config = TrainConfig {
        stage1_iters: 600,
        warmup_iters: 100,
        ..p.config.clone()
    };
    let (scene, mut sup) = generate_synthetic_scene(&params).unwrap();
    let (feats, n, dim) = pooled_features(&sup);
    let pca = fit_pca(&feats, n, dim, config.d as usize).unwrap();
    let codebook = init_codebook(&feats, n, dim, 2, 12, config.seed).unwrap();
    query::attach_ld_maps(&mut sup, &pca).unwrap();
    let (_, trace) = train_stage1(&scene, &sup, &pca, &codebook, &config).unwrap();
    let totals: Vec<f64> = trace.rows.iter().map(|(_, v)| v[2]).collect();
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let early = avg(&totals[100..200]);
    let late = avg(&totals[totals.len() - 100..]);
    assert!(
        late <= early + 1e-9,
        "trailing average increased: early {early:.5} -> late {late:.5}"
    );
}

#[test]
fn lambda_ld_zero_freezes_field_and_semantic_opacity() {
    let params = SynthParams {
        n_classes: 3,
        splats_per_class: 30,
        n_cameras: 3,
        width: 24,
        height: 24,
        embed_dim: 16,
        seed: 4,
    };
    let config = TrainConfig {
        stage1_iters: 40,
        warmup_iters: 5,
        lambda_ld: 0.0,
        ..TrainConfig::default()
    };
    let (scene, mut sup) = generate_synthetic_scene(&params).unwrap();
    let (feats, n, dim) = pooled_features(&sup);
    let pca = fit_pca(&feats, n, dim, config.d as usize).unwrap();
    let codebook = init_codebook(&feats, n, dim, 2, 8, config.seed).unwrap();
    query::attach_ld_maps(&mut sup, &pca).unwrap();
    let (ckpt, _) = train_stage1(&scene, &sup, &pca, &codebook, &config).unwrap();
    let fresh = gaff_core::field::FeatureField::new(
        config.seed,
        config.n_freq as usize,
        config.field_hidden as usize,
        config.d as usize,
        SceneBounds::of_scene(&scene),
    );
    assert_eq!(ckpt.field.mlp, fresh.mlp, "field changed with lambda_ld = 0");
    for (a, b) in ckpt.splats.iter().zip(&scene.splats) {
        assert_eq!(a.sem_alpha_logit, b.sem_alpha_logit);
    }
}

#[test]
fn lambda_pho_zero_freezes_appearance() {
    let params = SynthParams {
        n_classes: 3,
        splats_per_class: 30,
        n_cameras: 3,
        width: 24,
        height: 24,
        embed_dim: 16,
        seed: 6,
    };
    let config = TrainConfig {
        stage1_iters: 40,
        warmup_iters: 5,
        lambda_pho: 0.0,
        ..TrainConfig::default()
    };
    let (scene, mut sup) = generate_synthetic_scene(&params).unwrap();
    let (feats, n, dim) = pooled_features(&sup);
    let pca = fit_pca(&feats, n, dim, config.d as usize).unwrap();
    let codebook = init_codebook(&feats, n, dim, 2, 8, config.seed).unwrap();
    query::attach_ld_maps(&mut sup, &pca).unwrap();
    let (ckpt, _) = train_stage1(&scene, &sup, &pca, &codebook, &config).unwrap();
    for (a, b) in ckpt.splats.iter().zip(&scene.splats) {
        assert_eq!(a.alpha_logit, b.alpha_logit, "appearance opacity moved");
        assert_eq!(a.color, b.color, "color moved");
    }
    // Semantic side still trained.
    assert!(ckpt
        .splats
        .iter()
        .zip(&scene.splats)
        .any(|(a, b)| a.sem_alpha_logit != b.sem_alpha_logit));
}

#[test]
fn untrained_stage2_checkpoint_evaluates_without_crashing() {
    let p = pipeline();
    let cfg = TrainConfig {
        stage2_iters: 0,
        ..p.config.clone()
    };
    let (ck, _) = train_stage2(&p.ckpt1, &p.scene.cameras, &p.supervision, &cfg).unwrap();
    let report = query::evaluate(&ck, &p.scene, &p.supervision, 0.6, 1.0).unwrap();
    // Near chance is fine; it just must not crash and stay in range.
    assert!(report.mean_miou_2d >= 0.0 && report.mean_miou_2d <= 1.0);
}

#[test]
fn frozen_codebook_flag_keeps_rows_bit_identical() {
    let p = pipeline();
    let cfg = TrainConfig {
        freeze_codebook: true,
        stage2_iters: 40,
        ..p.config.clone()
    };
    let (ck, _) = train_stage2(&p.ckpt1, &p.scene.cameras, &p.supervision, &cfg).unwrap();
    assert_eq!(
        ck.codebook.entries, p.ckpt1.codebook.entries,
        "codebook rows changed despite freeze flag"
    );
}

#[test]
fn query_3d_edge_cases() {
    let p = pipeline();
    let q = TextQuery::from_vocab(&p.scene, "class_0").unwrap();
    // kappa -> infinity empties the selection.
    let r = query::query_3d(&p.ckpt2, &q, 1e9).unwrap();
    assert!(r.selection.iter().all(|&s| !s));
    // Identical queries give identical selections.
    let a = query::query_3d(&p.ckpt2, &q, 1.0).unwrap();
    let b = query::query_3d(&p.ckpt2, &q, 1.0).unwrap();
    assert_eq!(a.selection, b.selection);
    // Scaling the embedding does not change scores' argmax behavior
    // (cosine is scale free); verified through query_2d masks.
    let r2a = query::query_2d(&p.ckpt2, &p.scene.cameras[0], &q, 1.0).unwrap();
    assert!(r2a.mask.iter().filter(|&&m| m).count() >= 1);
    let top = r2a.score_map[r2a.argmax_pixel.0 * r2a.width + r2a.argmax_pixel.1];
    assert_eq!(top, r2a.max_score);

    // Per-class 3D selection quality against ground-truth splat labels.
    for (class, entry) in p.scene.vocab.iter().enumerate() {
        let q = TextQuery::new(entry.name.clone(), entry.embedding.clone()).unwrap();
        let sel = query::query_3d(&p.ckpt2, &q, 1.0).unwrap().selection;
        let mut hit = 0usize;
        let mut class_n = 0usize;
        let mut wrong = 0usize;
        let mut other_n = 0usize;
        for (s, picked) in p.ckpt2.splats.iter().zip(&sel) {
            if s.class_id == Some(class as u32) {
                class_n += 1;
                hit += *picked as usize;
            } else {
                other_n += 1;
                wrong += *picked as usize;
            }
        }
        let recall = hit as f64 / class_n as f64;
        let leak = wrong as f64 / other_n as f64;
        assert!(recall >= 0.9, "{}: selected {recall:.3} of its splats", entry.name);
        assert!(leak <= 0.05, "{}: selected {leak:.3} of other splats", entry.name);
    }
}

#[test]
fn render_selected_recovers_class_masks() {
    // Rendering exactly one synthetic class's splats reproduces that class's
    // ground-truth mask up to occlusion; on a low-occlusion 4-class scene the
    // per-class IoU averaged over cameras stays high.
    let params = SynthParams {
        n_classes: 4,
        splats_per_class: 150,
        n_cameras: 8,
        width: 48,
        height: 48,
        embed_dim: 16,
        seed: 77,
    };
    let (scene, sup) = generate_synthetic_scene(&params).unwrap();
    for class in 0..4u32 {
        let selection: Vec<bool> = scene.splats.iter().map(|s| s.class_id == Some(class)).collect();
        let mut mean = 0.0f64;
        for (cam, view) in scene.cameras.iter().zip(&sup) {
            let (_, mask) = gaff_core::raster::render_selected(&scene, cam, &selection).unwrap();
            let gt = query::gt_class_mask(view, class as i32);
            mean += query::miou(&mask, &gt).unwrap();
        }
        mean /= scene.cameras.len() as f64;
        assert!(mean >= 0.9, "class {class} selected-render IoU {mean:.3} < 0.9");
    }

    // Selecting everything equals the plain color render; selecting nothing
    // covers nothing.
    let cam = &scene.cameras[0];
    let all = vec![true; scene.splats.len()];
    let (full, _) = gaff_core::raster::render_selected(&scene, cam, &all).unwrap();
    let plain = gaff_core::raster::render_color(&scene, cam, false).unwrap();
    assert_eq!(full.payload_image, plain.payload_image);
    let none = vec![false; scene.splats.len()];
    let (_, empty_mask) = gaff_core::raster::render_selected(&scene, cam, &none).unwrap();
    assert!(empty_mask.iter().all(|&m| !m));
}

#[test]
fn query_orthogonal_embedding_scores_low() {
    let p = pipeline();
    // Build a unit vector orthogonal to every vocab embedding.
    let dim = p.scene.vocab[0].embedding.len();
    let mut v: Vec<f64> = {
        let mut rng = stream_rng(99, Stream::GradCheck);
        (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect()
    };
    for entry in &p.scene.vocab {
        let dot: f64 = v.iter().zip(&entry.embedding).map(|(&a, &b)| a * b as f64).sum();
        let n2: f64 = entry.embedding.iter().map(|&b| (b as f64).powi(2)).sum();
        for (x, &e) in v.iter_mut().zip(&entry.embedding) {
            *x -= dot / n2 * e as f64;
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let emb: Vec<f32> = v.iter().map(|&x| (x / n) as f32).collect();
    let q = TextQuery::new("orthogonal", emb).unwrap();
    let r = query::query_2d(&p.ckpt2, &p.scene.cameras[0], &q, 0.6).unwrap();
    assert!(
        r.max_score as f64 <= 0.5,
        "orthogonal query scored {:.3} > 0.3 + 0.2 slack",
        r.max_score
    );
}

#[test]
fn export_heatmaps_writes_expected_files() {
    let p = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let written =
        query::export_entry_heatmaps(&p.ckpt2, &p.scene, &p.scene.cameras[0], dir.path()).unwrap();
    let nc = p.ckpt2.codebook.n_entries;
    assert_eq!(written.len(), nc * 2);
    for path in &written {
        assert!(path.exists());
    }
    // Attention columns sum to 1 per covered pixel (row-stochastic A).
    let (maps, covered, _, _) = query::entry_activation_maps(&p.ckpt2, &p.scene.cameras[0]).unwrap();
    for &pix in covered.iter().take(500) {
        let s: f32 = maps.iter().map(|m| m[pix]).sum();
        assert!((s - 1.0).abs() < 1e-4, "entry maps sum to {s} at pixel {pix}");
    }
}
