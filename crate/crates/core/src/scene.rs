//! The explicit Gaussian scene model, pinhole cameras, per-view supervision,
//! the "GAFS" scene container, and a synthetic ground-truth generator that
//! stands in for foundation-model preprocessing: it builds labeled clusters
//! of gaussians, renders their images with the real rasterizer, and emits
//! per-view masks and per-mask embeddings.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::raster;
use crate::rng::{stream_rng, Stream};
use crate::tensorio;

pub const SCENE_MAGIC: [u8; 4] = *b"GAFS";
pub const SCENE_VERSION: u32 = 1;

/// One anisotropic 3D gaussian. Appearance opacity and semantic opacity are
/// separate parameters; `class_id` is synthetic ground truth only and is
/// never read by training code.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSplat {
    pub mu: [f32; 3],
    /// Unit quaternion (w, x, y, z).
    pub rot: [f32; 4],
    /// Per-axis log scale; scale = exp(log_scale).
    pub log_scale: [f32; 3],
    /// Appearance opacity = sigmoid(alpha_logit).
    pub alpha_logit: f32,
    /// Semantic opacity = sigmoid(sem_alpha_logit).
    pub sem_alpha_logit: f32,
    /// RGB in [0, 1].
    pub color: [f32; 3],
    pub class_id: Option<u32>,
}

impl GaussianSplat {
    pub fn alpha(&self) -> f32 {
        sigmoid(self.alpha_logit)
    }

    pub fn sem_alpha(&self) -> f32 {
        sigmoid(self.sem_alpha_logit)
    }

    fn validate(&self, idx: usize) -> Result<()> {
        let all = self
            .mu
            .iter()
            .chain(&self.rot)
            .chain(&self.log_scale)
            .chain(&self.color)
            .chain([&self.alpha_logit, &self.sem_alpha_logit]);
        for v in all {
            if !v.is_finite() {
                return Err(Error::validation(format!("splat {idx}: non-finite field")));
            }
        }
        let n2: f64 = self.rot.iter().map(|&v| (v as f64) * (v as f64)).sum();
        if (n2.sqrt() - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "splat {idx}: quaternion norm {} is not 1",
                n2.sqrt()
            )));
        }
        Ok(())
    }
}

/// Pinhole camera with a rigid world-to-camera transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    /// Row-major rotation; camera point = rotation * world + translation.
    pub rotation: [[f32; 3]; 3],
    pub translation: [f32; 3],
    pub width: u32,
    pub height: u32,
}

impl Camera {
    /// Camera at `eye` looking at `target`, +z forward, +y down in image space.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fx: f32,
        fy: f32,
        width: u32,
        height: u32,
    ) -> Result<Camera> {
        let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let cross = |a: [f64; 3], b: [f64; 3]| {
            [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ]
        };
        let normalize = |v: [f64; 3]| -> Result<[f64; 3]> {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n < 1e-12 {
                return Err(Error::validation("degenerate look_at frame"));
            }
            Ok([v[0] / n, v[1] / n, v[2] / n])
        };
        let z = normalize(sub(target, eye))?;
        let x = normalize(cross(z, up))?;
        let y = cross(z, x);
        let rot64 = [x, y, z];
        let mut rotation = [[0.0f32; 3]; 3];
        let mut translation = [0.0f32; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = rot64[i][j] as f32;
            }
            translation[i] =
                -(rot64[i][0] * eye[0] + rot64[i][1] * eye[1] + rot64[i][2] * eye[2]) as f32;
        }
        let cam = Camera {
            fx,
            fy,
            cx: width as f32 / 2.0,
            cy: height as f32 / 2.0,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate(0)?;
        Ok(cam)
    }

    fn validate(&self, idx: usize) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::validation(format!("camera {idx}: focal must be positive")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation(format!("camera {idx}: empty image plane")));
        }
        let r = &self.rotation;
        let dotf = |a: [f32; 3], b: [f32; 3]| -> f64 {
            a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum()
        };
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dotf(r[i], r[j]) - expect).abs() > 1e-6 {
                    return Err(Error::validation(format!(
                        "camera {idx}: rotation is not orthonormal"
                    )));
                }
            }
        }
        let det = (r[0][0] as f64) * ((r[1][1] as f64) * (r[2][2] as f64) - (r[1][2] as f64) * (r[2][1] as f64))
            - (r[0][1] as f64) * ((r[1][0] as f64) * (r[2][2] as f64) - (r[1][2] as f64) * (r[2][0] as f64))
            + (r[0][2] as f64) * ((r[1][0] as f64) * (r[2][1] as f64) - (r[1][1] as f64) * (r[2][0] as f64));
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "camera {idx}: rotation determinant {det} is not +1"
            )));
        }
        Ok(())
    }
}

/// Named language embedding, unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabEntry {
    pub name: String,
    pub embedding: Vec<f32>,
}

/// The full scene: splats, cameras, and (for synthetic scenes) the class
/// vocabulary used to build the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneModel {
    pub splats: Vec<GaussianSplat>,
    pub cameras: Vec<Camera>,
    pub vocab: Vec<VocabEntry>,
}

impl SceneModel {
    pub fn validate(&self) -> Result<()> {
        if self.splats.is_empty() {
            return Err(Error::validation("scene must contain at least one splat"));
        }
        for (i, s) in self.splats.iter().enumerate() {
            s.validate(i)?;
        }
        for (i, c) in self.cameras.iter().enumerate() {
            c.validate(i)?;
        }
        for v in &self.vocab {
            let n: f64 = v.embedding.iter().map(|&x| (x as f64) * (x as f64)).sum();
            if (n.sqrt() - 1.0).abs() > 1e-6 {
                return Err(Error::validation(format!(
                    "vocab entry '{}' embedding is not unit norm",
                    v.name
                )));
            }
        }
        Ok(())
    }

    /// Axis-aligned bounding box over splat positions.
    pub fn bounds(&self) -> ([f32; 3], [f32; 3]) {
        let mut lo = [f32::INFINITY; 3];
        let mut hi = [f32::NEG_INFINITY; 3];
        for s in &self.splats {
            for a in 0..3 {
                lo[a] = lo[a].min(s.mu[a]);
                hi[a] = hi[a].max(s.mu[a]);
            }
        }
        (lo, hi)
    }

    pub fn vocab_embedding(&self, name: &str) -> Option<&[f32]> {
        self.vocab
            .iter()
            .find(|v| v.name == name)
            .map(|v| v.embedding.as_slice())
    }
}

/// Ground-truth supervision for one view: color image, mask-id map
/// (-1 = unsupervised pixel), per-mask language features, and the derived
/// LD feature map once preprocessing has run.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSupervision {
    pub width: usize,
    pub height: usize,
    /// H*W*3 ground-truth color.
    pub color: Vec<f32>,
    /// H*W mask ids; -1 means no supervision at that pixel.
    pub masks: Vec<i32>,
    pub n_masks: usize,
    pub feature_dim: usize,
    /// n_masks * feature_dim per-mask language features.
    pub mask_features: Vec<f32>,
    /// H*W*d LD map, zero at unsupervised pixels. Filled by preprocessing.
    pub ld_map: Option<LdMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdMap {
    pub d: usize,
    pub data: Vec<f32>,
}

impl ViewSupervision {
    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.color.len() != n * 3 || self.masks.len() != n {
            return Err(Error::validation("supervision buffers disagree with resolution"));
        }
        if self.mask_features.len() != self.n_masks * self.feature_dim {
            return Err(Error::validation("mask feature table has wrong shape"));
        }
        if self.mask_features.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("mask features must be finite"));
        }
        for (i, &id) in self.masks.iter().enumerate() {
            if id < -1 || id >= self.n_masks as i32 {
                return Err(Error::validation(format!(
                    "pixel {i} references mask id {id} outside [-1, {})",
                    self.n_masks
                )));
            }
        }
        Ok(())
    }

    pub fn mask_feature(&self, id: usize) -> &[f32] {
        &self.mask_features[id * self.feature_dim..(id + 1) * self.feature_dim]
    }

    /// Indices of pixels that carry supervision.
    pub fn supervised_pixels(&self) -> Vec<usize> {
        self.masks
            .iter()
            .enumerate()
            .filter(|(_, &id)| id >= 0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Parameters for [`generate_synthetic_scene`].
#[derive(Debug, Clone)]
pub struct SynthParams {
    pub seed: u64,
    pub n_classes: usize,
    pub splats_per_class: usize,
    pub n_cameras: usize,
    pub width: u32,
    pub height: u32,
    pub embed_dim: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            seed: 42,
            n_classes: 8,
            splats_per_class: 250,
            n_cameras: 16,
            width: 64,
            height: 64,
            embed_dim: 32,
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).min(5.999);
    let i = h6 as i32;
    let f = h6 - i as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Draw unit embeddings whose pairwise cosine stays at or below `max_cos`,
/// resampling each candidate up to 1000 times.
pub fn sample_separated_embeddings(
    rng: &mut impl Rng,
    count: usize,
    dim: usize,
    max_cos: f64,
) -> Result<Vec<Vec<f32>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut accepted = None;
        for _ in 0..1000 {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            let ok = out
                .iter()
                .all(|u| u.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() <= max_cos);
            if ok {
                accepted = Some(v);
                break;
            }
        }
        match accepted {
            Some(v) => out.push(v),
            None => {
                return Err(Error::validation(format!(
                    "could not sample {count} embeddings with pairwise cosine <= {max_cos} \
                     in dimension {dim}; increase the embedding dimension"
                )))
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|v| {
            // Renormalize after the f64 -> f32 narrowing.
            let v32: Vec<f32> = v.iter().map(|&x| x as f32).collect();
            let n = v32.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            v32.iter().map(|&x| (x as f64 / n) as f32).collect()
        })
        .collect())
}

/// Build a labeled synthetic scene plus per-view supervision. Classes are
/// compact clusters at well-separated positions; cameras orbit the origin;
/// supervision images are rendered with the real rasterizer; masks assign
/// each pixel to the class of its maximum-weight contributing gaussian
/// (-1 where the accumulated weight stays below 0.5).
pub fn generate_synthetic_scene(params: &SynthParams) -> Result<(SceneModel, Vec<ViewSupervision>)> {
    if params.n_classes < 2 {
        return Err(Error::validation("need at least 2 classes"));
    }
    if params.splats_per_class == 0 || params.n_cameras == 0 {
        return Err(Error::validation("splats_per_class and n_cameras must be positive"));
    }

    let mut geo = stream_rng(params.seed, Stream::SceneGeometry);
    let mut emb = stream_rng(params.seed, Stream::SceneEmbeddings);
    let embeddings = sample_separated_embeddings(&mut emb, params.n_classes, params.embed_dim, 0.3)?;

    let nc = params.n_classes as f64;
    let mut splats = Vec::with_capacity(params.n_classes * params.splats_per_class);
    for k in 0..params.n_classes {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / nc;
        let center = [
            2.5 * angle.cos(),
            2.5 * angle.sin(),
            if k % 2 == 0 { 0.45 } else { -0.45 },
        ];
        let base = hsv_to_rgb(k as f32 / params.n_classes as f32, 0.75, 0.95);
        for _ in 0..params.splats_per_class {
            let jitter = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
                let z: f64 = rng.sample(StandardNormal);
                0.22 * z
            };
            let mu = [
                (center[0] + jitter(&mut geo)) as f32,
                (center[1] + jitter(&mut geo)) as f32,
                (center[2] + jitter(&mut geo)) as f32,
            ];
            let q64: [f64; 4] = [
                geo.sample(StandardNormal),
                geo.sample(StandardNormal),
                geo.sample(StandardNormal),
                geo.sample(StandardNormal),
            ];
            let qn = q64.iter().map(|x| x * x).sum::<f64>().sqrt();
            let rot = [
                (q64[0] / qn) as f32,
                (q64[1] / qn) as f32,
                (q64[2] / qn) as f32,
                (q64[3] / qn) as f32,
            ];
            let mut ls = || (0.05f64.ln() + 0.3 * (geo.gen::<f64>() * 2.0 - 1.0)) as f32;
            let log_scale = [ls(), ls(), ls()];
            let alpha_logit = (2.0 + 0.3 * (geo.gen::<f64>() * 2.0 - 1.0)) as f32;
            let cjit = |rng: &mut rand_chacha::ChaCha8Rng, b: f32| {
                (b + 0.03 * (rng.gen::<f32>() * 2.0 - 1.0)).clamp(0.0, 1.0)
            };
            let color = [
                cjit(&mut geo, base[0]),
                cjit(&mut geo, base[1]),
                cjit(&mut geo, base[2]),
            ];
            splats.push(GaussianSplat {
                mu,
                rot,
                log_scale,
                alpha_logit,
                sem_alpha_logit: 0.0,
                color,
                class_id: Some(k as u32),
            });
        }
    }

    let mut cameras = Vec::with_capacity(params.n_cameras);
    let orbit_r = 7.0f64;
    let elevation = 0.55f64;
    for t in 0..params.n_cameras {
        let theta = 2.0 * std::f64::consts::PI * t as f64 / params.n_cameras as f64;
        let eye = [
            orbit_r * elevation.cos() * theta.cos(),
            orbit_r * elevation.cos() * theta.sin(),
            orbit_r * elevation.sin(),
        ];
        cameras.push(Camera::look_at(
            eye,
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            params.width as f32,
            params.width as f32,
            params.width,
            params.height,
        )?);
    }

    let vocab = embeddings
        .iter()
        .enumerate()
        .map(|(k, e)| VocabEntry {
            name: format!("class_{k}"),
            embedding: e.clone(),
        })
        .collect();

    let scene = SceneModel {
        splats,
        cameras,
        vocab,
    };
    scene.validate()?;

    let mut supervision = Vec::with_capacity(params.n_cameras);
    for camera in &scene.cameras {
        let out = raster::render_color(&scene, camera, true)?;
        let contrib = out.contrib.as_ref().unwrap();
        let mut masks = vec![-1i32; out.width * out.height];
        for (pix, lst) in contrib.iter().enumerate() {
            if out.accum_weight[pix] < 0.5 {
                continue;
            }
            let mut best_w = f32::NEG_INFINITY;
            let mut best_id = 0u32;
            for c in lst {
                if c.weight > best_w {
                    best_w = c.weight;
                    best_id = c.id;
                }
            }
            masks[pix] = scene.splats[best_id as usize].class_id.unwrap() as i32;
        }
        let mask_features: Vec<f32> = embeddings.iter().flatten().copied().collect();
        let view = ViewSupervision {
            width: out.width,
            height: out.height,
            color: out.payload_image,
            masks,
            n_masks: params.n_classes,
            feature_dim: params.embed_dim,
            mask_features,
            ld_map: None,
        };
        view.validate()?;
        supervision.push(view);
    }
    Ok((scene, supervision))
}

pub fn encode_scene(scene: &SceneModel) -> Result<Vec<u8>> {
    scene.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(&SCENE_MAGIC);
    out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    out.extend_from_slice(&(scene.splats.len() as u64).to_le_bytes());
    out.extend_from_slice(&(scene.cameras.len() as u32).to_le_bytes());
    out.extend_from_slice(&(scene.vocab.len() as u32).to_le_bytes());
    let vocab_dim = scene.vocab.first().map_or(0, |v| v.embedding.len());
    out.extend_from_slice(&(vocab_dim as u32).to_le_bytes());
    for s in &scene.splats {
        for v in s
            .mu
            .iter()
            .chain(&s.rot)
            .chain(&s.log_scale)
            .chain([&s.alpha_logit, &s.sem_alpha_logit])
            .chain(&s.color)
        {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match s.class_id {
            Some(c) => {
                out.push(1);
                out.extend_from_slice(&c.to_le_bytes());
            }
            None => out.push(0),
        }
    }
    for c in &scene.cameras {
        for v in [c.fx, c.fy, c.cx, c.cy] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for row in &c.rotation {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in &c.translation {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&c.width.to_le_bytes());
        out.extend_from_slice(&c.height.to_le_bytes());
    }
    for v in &scene.vocab {
        if v.embedding.len() != vocab_dim {
            return Err(Error::validation("vocab embeddings disagree on dimension"));
        }
        out.extend_from_slice(&(v.name.len() as u32).to_le_bytes());
        out.extend_from_slice(v.name.as_bytes());
        for e in &v.embedding {
            out.extend_from_slice(&e.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_scene(scene: &SceneModel, path: &Path) -> Result<()> {
    tensorio::atomic_write(path, &encode_scene(scene)?)
}

pub fn load_scene(path: &Path) -> Result<SceneModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = tensorio::ByteReader::new(&bytes, path);
    if c.take(4, "magic")? != SCENE_MAGIC {
        return Err(Error::format(path, "bad magic, expected \"GAFS\""));
    }
    let version = c.u32("version")?;
    if version != SCENE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n_splats = c.u64("splat count")? as usize;
    let n_cameras = c.u32("camera count")? as usize;
    let n_vocab = c.u32("vocab count")? as usize;
    let vocab_dim = c.u32("vocab dim")? as usize;

    let mut splats = Vec::with_capacity(n_splats);
    for i in 0..n_splats {
        let f = c.f32s(15, &format!("splat {i}"))?;
        let class_id = if c.u8("class flag")? == 1 {
            Some(c.u32("class id")?)
        } else {
            None
        };
        splats.push(GaussianSplat {
            mu: [f[0], f[1], f[2]],
            rot: [f[3], f[4], f[5], f[6]],
            log_scale: [f[7], f[8], f[9]],
            alpha_logit: f[10],
            sem_alpha_logit: f[11],
            color: [f[12], f[13], f[14]],
            class_id,
        });
    }
    let mut cameras = Vec::with_capacity(n_cameras);
    for i in 0..n_cameras {
        let f = c.f32s(16, &format!("camera {i}"))?;
        cameras.push(Camera {
            fx: f[0],
            fy: f[1],
            cx: f[2],
            cy: f[3],
            rotation: [[f[4], f[5], f[6]], [f[7], f[8], f[9]], [f[10], f[11], f[12]]],
            translation: [f[13], f[14], f[15]],
            width: c.u32("camera width")?,
            height: c.u32("camera height")?,
        });
    }
    let mut vocab = Vec::with_capacity(n_vocab);
    for i in 0..n_vocab {
        let name_len = c.u32("vocab name length")? as usize;
        let raw = c.take(name_len, "vocab name")?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| Error::format(path, format!("vocab entry {i} name is not UTF-8")))?
            .to_string();
        let embedding = c.f32s(vocab_dim, &format!("vocab embedding {i}"))?;
        vocab.push(VocabEntry { name, embedding });
    }
    c.done()?;
    let scene = SceneModel {
        splats,
        cameras,
        vocab,
    };
    scene.validate()?;
    Ok(scene)
}

/// Assemble a [`ViewSupervision`] from externally produced tensor files:
/// an H*W*3 color image, an H*W integer mask map stored as floats
/// (-1 = unmasked), and a K*D per-mask feature table.
pub fn ingest_supervision(
    color_path: &Path,
    mask_path: &Path,
    features_path: &Path,
    expected_width: usize,
    expected_height: usize,
) -> Result<ViewSupervision> {
    let (cdims, color) = tensorio::read_tensor(color_path)?;
    if cdims.len() != 3 || cdims[2] != 3 {
        return Err(Error::format(color_path, "color tensor must be H x W x 3"));
    }
    let (h, w) = (cdims[0] as usize, cdims[1] as usize);
    if h != expected_height || w != expected_width {
        return Err(Error::validation(format!(
            "color image {w}x{h} does not match declared camera {expected_width}x{expected_height}"
        )));
    }
    let (mdims, mask_f) = tensorio::read_tensor(mask_path)?;
    if mdims.len() != 2 || mdims[0] as usize != h || mdims[1] as usize != w {
        return Err(Error::validation(
            "mask tensor shape does not match the color image",
        ));
    }
    let (fdims, features) = tensorio::read_tensor(features_path)?;
    if fdims.len() != 2 {
        return Err(Error::format(features_path, "feature tensor must be K x D"));
    }
    let k = fdims[0] as usize;
    let d = fdims[1] as usize;

    let mut masks = Vec::with_capacity(h * w);
    for (i, &v) in mask_f.iter().enumerate() {
        if v.fract() != 0.0 {
            return Err(Error::validation(format!(
                "mask value {v} at pixel {i} is not an exact integer"
            )));
        }
        let id = v as i64;
        if id < -1 || id >= k as i64 {
            return Err(Error::validation(format!(
                "mask id {id} at pixel {i} outside [-1, {k})"
            )));
        }
        masks.push(id as i32);
    }
    let view = ViewSupervision {
        width: w,
        height: h,
        color,
        masks,
        n_masks: k,
        feature_dim: d,
        mask_features: features,
        ld_map: None,
    };
    view.validate()?;
    Ok(view)
}
