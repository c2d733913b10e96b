//! "GAFC" checkpoint container: trained splat parameters, the feature-field
//! MLP, the PCA projection, the codebook, the attention head (stage 2), the
//! training configuration, the stage tag, and the iteration counter. All
//! floats are stored raw little-endian so a round-trip is bit-identical.

use std::fs;
use std::path::Path;

use crate::attention::AttentionHead;
use crate::error::{Error, Result};
use crate::field::{Dense, FeatureField, FourierEncoder, Mlp, SceneBounds};
use crate::preprocess::{Codebook, PcaProjection};
use crate::scene::GaussianSplat;
use crate::tensorio::{atomic_write, ByteReader};
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GAFC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Stage1 = 1,
    Stage2 = 2,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub iteration: u64,
    pub config: TrainConfig,
    pub splats: Vec<GaussianSplat>,
    pub field: FeatureField,
    pub pca: PcaProjection,
    pub codebook: Codebook,
    pub attention: Option<AttentionHead<f32>>,
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(ckpt.stage as u8);
    out.extend_from_slice(&ckpt.iteration.to_le_bytes());

    // Config block, fixed field order.
    let c = &ckpt.config;
    out.extend_from_slice(&c.seed.to_le_bytes());
    for v in [
        c.stage1_iters,
        c.stage2_iters,
        c.warmup_iters,
        c.pixels_per_iter,
        c.d,
        c.d_h,
        c.n_freq,
        c.field_hidden,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_f32s(
        &mut out,
        &[
            c.lambda_pho,
            c.lambda_ld,
            c.lambda_entropy,
            c.lr_color,
            c.lr_opacity,
            c.lr_sem_opacity,
            c.lr_field,
            c.lr_attention,
        ],
    );
    let flags = (c.couple_semantic_opacity as u32)
        | ((c.freeze_codebook as u32) << 1)
        | ((c.route_semantic_color_grads as u32) << 2);
    out.extend_from_slice(&flags.to_le_bytes());

    // Splats.
    out.extend_from_slice(&(ckpt.splats.len() as u64).to_le_bytes());
    for s in &ckpt.splats {
        put_f32s(&mut out, &s.mu);
        put_f32s(&mut out, &s.rot);
        put_f32s(&mut out, &s.log_scale);
        put_f32s(&mut out, &[s.alpha_logit, s.sem_alpha_logit]);
        put_f32s(&mut out, &s.color);
        match s.class_id {
            Some(id) => {
                out.push(1);
                out.extend_from_slice(&id.to_le_bytes());
            }
            None => out.push(0),
        }
    }

    // Feature field.
    out.extend_from_slice(&(ckpt.field.encoder.n_freq as u32).to_le_bytes());
    put_f32s(&mut out, &ckpt.field.bounds.lo);
    put_f32s(&mut out, &ckpt.field.bounds.hi);
    out.extend_from_slice(&(ckpt.field.mlp.layers.len() as u32).to_le_bytes());
    for l in &ckpt.field.mlp.layers {
        out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
    }
    put_f32s(&mut out, &ckpt.field.mlp.flatten());

    // PCA.
    out.extend_from_slice(&(ckpt.pca.dim_high as u32).to_le_bytes());
    out.extend_from_slice(&(ckpt.pca.dim_low as u32).to_le_bytes());
    put_f32s(&mut out, &ckpt.pca.mean);
    put_f32s(&mut out, &ckpt.pca.basis);
    put_f32s(&mut out, &ckpt.pca.explained_variance);

    // Codebook.
    out.extend_from_slice(&(ckpt.codebook.n_entries as u32).to_le_bytes());
    out.extend_from_slice(&(ckpt.codebook.dim as u32).to_le_bytes());
    put_f32s(&mut out, &ckpt.codebook.entries);

    // Attention head.
    match &ckpt.attention {
        None => out.push(0),
        Some(h) => {
            out.push(1);
            for v in [h.d as u32, h.dim_high as u32, h.d_h as u32, h.n_entries as u32] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put_f32s(&mut out, &h.wq);
            put_f32s(&mut out, &h.bq);
            put_f32s(&mut out, &h.wk);
            put_f32s(&mut out, &h.bk);
            put_f32s(&mut out, &h.codebook);
        }
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    atomic_write(path, &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, path);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic, expected \"GAFC\""));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let stage = match r.u8("stage tag")? {
        1 => Stage::Stage1,
        2 => Stage::Stage2,
        other => return Err(Error::format(path, format!("unknown stage tag {other}"))),
    };
    let iteration = r.u64("iteration")?;

    let seed = r.u64("config.seed")?;
    let u = |what: &str, r: &mut ByteReader| r.u32(what);
    let stage1_iters = u("config.stage1_iters", &mut r)?;
    let stage2_iters = u("config.stage2_iters", &mut r)?;
    let warmup_iters = u("config.warmup_iters", &mut r)?;
    let pixels_per_iter = u("config.pixels_per_iter", &mut r)?;
    let d = u("config.d", &mut r)?;
    let d_h = u("config.d_h", &mut r)?;
    let n_freq = u("config.n_freq", &mut r)?;
    let field_hidden = u("config.field_hidden", &mut r)?;
    let fl = r.f32s(8, "config.floats")?;
    let flags = r.u32("config.flags")?;
    let config = TrainConfig {
        seed,
        stage1_iters,
        stage2_iters,
        warmup_iters,
        pixels_per_iter,
        d,
        d_h,
        n_freq,
        field_hidden,
        lambda_pho: fl[0],
        lambda_ld: fl[1],
        lambda_entropy: fl[2],
        lr_color: fl[3],
        lr_opacity: fl[4],
        lr_sem_opacity: fl[5],
        lr_field: fl[6],
        lr_attention: fl[7],
        couple_semantic_opacity: flags & 1 != 0,
        freeze_codebook: flags & 2 != 0,
        route_semantic_color_grads: flags & 4 != 0,
    };

    let n_splats = r.u64("splat count")? as usize;
    let mut splats = Vec::with_capacity(n_splats);
    for i in 0..n_splats {
        let f = r.f32s(15, &format!("splat {i}"))?;
        let class_id = if r.u8("class flag")? == 1 {
            Some(r.u32("class id")?)
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

    let enc_freq = r.u32("field.n_freq")? as usize;
    let lo = r.f32s(3, "field.bounds.lo")?;
    let hi = r.f32s(3, "field.bounds.hi")?;
    let n_layers = r.u32("field.layers")? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let in_dim = r.u32(&format!("layer {i} in_dim"))? as usize;
        let out_dim = r.u32(&format!("layer {i} out_dim"))? as usize;
        layers.push(Dense {
            w: vec![0.0f32; in_dim * out_dim],
            b: vec![0.0f32; out_dim],
            in_dim,
            out_dim,
        });
    }
    let mut mlp = Mlp { layers };
    let total: usize = mlp.layers.iter().map(|l| l.w.len() + l.b.len()).sum();
    let flat = r.f32s(total, "field parameters")?;
    mlp.load_flat(&flat)?;
    let field = FeatureField {
        encoder: FourierEncoder { n_freq: enc_freq },
        bounds: SceneBounds {
            lo: [lo[0], lo[1], lo[2]],
            hi: [hi[0], hi[1], hi[2]],
        },
        mlp,
    };

    let dim_high = r.u32("pca.dim_high")? as usize;
    let dim_low = r.u32("pca.dim_low")? as usize;
    let pca = PcaProjection {
        dim_high,
        dim_low,
        mean: r.f32s(dim_high, "pca.mean")?,
        basis: r.f32s(dim_high * dim_low, "pca.basis")?,
        explained_variance: r.f32s(dim_low, "pca.variance")?,
    };

    let n_entries = r.u32("codebook.n_entries")? as usize;
    let cb_dim = r.u32("codebook.dim")? as usize;
    let codebook = Codebook {
        n_entries,
        dim: cb_dim,
        entries: r.f32s(n_entries * cb_dim, "codebook.entries")?,
    };
    codebook.validate().map_err(|e| Error::format(path, e.to_string()))?;

    let attention = if r.u8("attention flag")? == 1 {
        let ad = r.u32("attention.d")? as usize;
        let add = r.u32("attention.dim_high")? as usize;
        let adh = r.u32("attention.d_h")? as usize;
        let anc = r.u32("attention.n_entries")? as usize;
        Some(AttentionHead {
            wq: r.f32s(adh * ad, "attention.wq")?,
            bq: r.f32s(adh, "attention.bq")?,
            wk: r.f32s(adh * add, "attention.wk")?,
            bk: r.f32s(adh, "attention.bk")?,
            codebook: r.f32s(anc * add, "attention.codebook")?,
            d: ad,
            dim_high: add,
            d_h: adh,
            n_entries: anc,
        })
    } else {
        None
    };
    r.done()?;

    Ok(Checkpoint {
        stage,
        iteration,
        config,
        splats,
        field,
        pca,
        codebook,
        attention,
    })
}
