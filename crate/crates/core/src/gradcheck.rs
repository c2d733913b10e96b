//! Finite-difference verification of every hand-written adjoint, run in f64.
//!
//! Each component is checked on several seeded random configurations against
//! central differences with step 1e-5. Configurations are filtered away from
//! the non-smooth boundaries of the compositor (the 3-sigma cutoff), the ReLU
//! kinks, and the L1 kinks, where a finite difference straddles a derivative
//! discontinuity and says nothing about the adjoint.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_backward, attention_forward, entropy_loss, init_attention_head, AttentionHead};
use crate::error::Result;
use crate::field::{init_mlp, mlp_backward, mlp_forward, Mlp};
use crate::math::{sigmoid, Sym2};
use crate::preprocess::Codebook;
use crate::raster::{composite, composite_backward, Projected2D};
use crate::rng::{stream_rng, Stream};
use crate::train::losses::{ld_loss, ld_loss_backward, photometric_backward, photometric_loss};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const CONFIGS_PER_COMPONENT: usize = 10;

#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub checked_params: usize,
}

impl ComponentReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < GRAD_TOL
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub components: Vec<ComponentReport>,
}

impl GradReport {
    pub fn all_pass(&self) -> bool {
        self.components.iter().all(|c| c.pass())
    }

    pub fn first_failure(&self) -> Option<&ComponentReport> {
        self.components.iter().find(|c| !c.pass())
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Additive bump used by the fault-injection fixture so even a zero gradient
/// turns visibly wrong.
fn sabotage_grads(grads: &mut [f64]) {
    if let Some(g) = grads.first_mut() {
        *g += 0.5 * g.abs().max(1.0);
    }
}

struct Tracker {
    max_err: f64,
    count: usize,
}

impl Tracker {
    fn new() -> Tracker {
        Tracker {
            max_err: 0.0,
            count: 0,
        }
    }

    fn check(&mut self, analytic: f64, numeric: f64) {
        self.max_err = self.max_err.max(rel_err(analytic, numeric));
        self.count += 1;
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

// ---------------------------------------------------------------------------
// Compositor

struct CompositorConfig {
    projected: Vec<Projected2D<f64>>,
    ids: Vec<u32>,
    payloads: Vec<f64>,
    logits: Vec<f64>,
    upstream: Vec<f64>,
}

const COMP_N: usize = 5;
const COMP_W: usize = 8;
const COMP_H: usize = 8;
const COMP_P: usize = 3;

fn compositor_config(rng: &mut ChaCha8Rng) -> CompositorConfig {
    'outer: loop {
        let mut projected = Vec::with_capacity(COMP_N);
        for i in 0..COMP_N {
            let mean2d = [uniform(rng, 0.5, 7.5), uniform(rng, 0.5, 7.5)];
            let (a, b, c, d) = (
                uniform(rng, -1.0, 1.0),
                uniform(rng, -1.0, 1.0),
                uniform(rng, -1.0, 1.0),
                uniform(rng, -1.0, 1.0),
            );
            let cov = Sym2 {
                xx: a * a + b * b + 0.4,
                xy: a * c + b * d,
                yy: c * c + d * d + 0.4,
            };
            projected.push(Projected2D {
                mean2d,
                cov2d: cov,
                depth: 1.0 + i as f64,
                inv_cov2d: cov.inverse(),
                radius: 3.0 * cov.max_eigenvalue().sqrt(),
            });
        }
        // Keep every pixel clear of the Mahalanobis cutoff boundary.
        for y in 0..COMP_H {
            for x in 0..COMP_W {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                for p in &projected {
                    let q = p.inv_cov2d.quad([px - p.mean2d[0], py - p.mean2d[1]]);
                    if (q - crate::raster::CUTOFF_SQ).abs() < 1e-3 {
                        continue 'outer;
                    }
                }
            }
        }
        let payloads = (0..COMP_N * COMP_P).map(|_| uniform(rng, 0.0, 1.0)).collect();
        // Opacities stay below sigmoid(1.2) = 0.77, far from both the 0.99
        // clamp and the 1e-4 transmittance stop.
        let logits = (0..COMP_N).map(|_| uniform(rng, -1.5, 1.2)).collect();
        let upstream = (0..COMP_W * COMP_H * COMP_P)
            .map(|_| uniform(rng, -1.0, 1.0))
            .collect();
        return CompositorConfig {
            projected,
            ids: (0..COMP_N as u32).collect(),
            payloads,
            logits,
            upstream,
        };
    }
}

fn compositor_loss(cfg: &CompositorConfig) -> f64 {
    let opacities: Vec<f64> = cfg.logits.iter().map(|&l| sigmoid(l)).collect();
    let out = composite(
        &cfg.projected,
        &cfg.ids,
        &cfg.payloads,
        COMP_P,
        &opacities,
        COMP_W,
        COMP_H,
        false,
    )
    .unwrap();
    out.payload_image
        .iter()
        .zip(&cfg.upstream)
        .map(|(&o, &g)| o * g)
        .sum()
}

fn check_compositor(seed: u64, sabotage: bool) -> Result<ComponentReport> {
    let mut rng = stream_rng(seed, Stream::GradCheck);
    let mut tr = Tracker::new();
    for _ in 0..CONFIGS_PER_COMPONENT {
        let mut cfg = compositor_config(&mut rng);
        let opacities: Vec<f64> = cfg.logits.iter().map(|&l| sigmoid(l)).collect();
        let out = composite(
            &cfg.projected,
            &cfg.ids,
            &cfg.payloads,
            COMP_P,
            &opacities,
            COMP_W,
            COMP_H,
            true,
        )?;
        let grads = composite_backward(
            &out,
            &cfg.projected,
            &cfg.ids,
            &cfg.payloads,
            &opacities,
            &cfg.upstream,
            COMP_N,
            true,
        )?;
        let mut g_payloads = grads.payloads;
        let g_logits = grads.opacity_logits;
        let g_means = grads.mean2d.unwrap();
        if sabotage {
            sabotage_grads(&mut g_payloads);
        }

        for i in 0..cfg.payloads.len() {
            let orig = cfg.payloads[i];
            cfg.payloads[i] = orig + FD_STEP;
            let fp = compositor_loss(&cfg);
            cfg.payloads[i] = orig - FD_STEP;
            let fm = compositor_loss(&cfg);
            cfg.payloads[i] = orig;
            tr.check(g_payloads[i], (fp - fm) / (2.0 * FD_STEP));
        }
        for i in 0..cfg.logits.len() {
            let orig = cfg.logits[i];
            cfg.logits[i] = orig + FD_STEP;
            let fp = compositor_loss(&cfg);
            cfg.logits[i] = orig - FD_STEP;
            let fm = compositor_loss(&cfg);
            cfg.logits[i] = orig;
            tr.check(g_logits[i], (fp - fm) / (2.0 * FD_STEP));
        }
        for i in 0..COMP_N {
            for a in 0..2 {
                let orig = cfg.projected[i].mean2d[a];
                cfg.projected[i].mean2d[a] = orig + FD_STEP;
                let fp = compositor_loss(&cfg);
                cfg.projected[i].mean2d[a] = orig - FD_STEP;
                let fm = compositor_loss(&cfg);
                cfg.projected[i].mean2d[a] = orig;
                tr.check(g_means[i * 2 + a], (fp - fm) / (2.0 * FD_STEP));
            }
        }
    }
    Ok(ComponentReport {
        name: "compositor",
        max_rel_err: tr.max_err,
        checked_params: tr.count,
    })
}

// ---------------------------------------------------------------------------
// Feature-field MLP

const MLP_DIMS: [usize; 4] = [9, 14, 14, 5];
const MLP_BATCH: usize = 8;

fn mlp_preacts_clear(mlp: &Mlp<f64>, inputs: &[f64]) -> bool {
    let in_dim = mlp.in_dim();
    let n = inputs.len() / in_dim;
    for i in 0..n {
        let mut x: Vec<f64> = inputs[i * in_dim..(i + 1) * in_dim].to_vec();
        for (li, layer) in mlp.layers.iter().enumerate() {
            let mut z = vec![0.0f64; layer.out_dim];
            layer.apply(&x, &mut z);
            if li + 1 < mlp.layers.len() {
                if z.iter().any(|v| v.abs() < 1e-4) {
                    return false;
                }
                x = z.iter().map(|&v| v.max(0.0)).collect();
            }
        }
    }
    true
}

fn check_mlp(seed: u64, sabotage: bool) -> Result<ComponentReport> {
    let mut rng = stream_rng(seed.wrapping_add(1), Stream::GradCheck);
    let mut tr = Tracker::new();
    for cfg_i in 0..CONFIGS_PER_COMPONENT {
        let (mlp, inputs) = loop {
            let mlp: Mlp<f64> = init_mlp(seed.wrapping_add(1000 + cfg_i as u64 * 7919), &MLP_DIMS);
            let inputs: Vec<f64> = (0..MLP_BATCH * MLP_DIMS[0])
                .map(|_| uniform(&mut rng, -1.0, 1.0))
                .collect();
            if mlp_preacts_clear(&mlp, &inputs) {
                break (mlp, inputs);
            }
        };
        let upstream: Vec<f64> = (0..MLP_BATCH * MLP_DIMS[3])
            .map(|_| uniform(&mut rng, -1.0, 1.0))
            .collect();
        let loss = |mlp: &Mlp<f64>, inputs: &[f64]| -> f64 {
            let (out, _) = mlp_forward(mlp, inputs.to_vec());
            out.iter().zip(&upstream).map(|(&o, &g)| o * g).sum()
        };

        let (_, cache) = mlp_forward(&mlp, inputs.clone());
        let (grads, input_grads) = mlp_backward(&mlp, &cache, &upstream, true)?;
        let mut flat_grads = grads.flatten();
        let input_grads = input_grads.unwrap();
        if sabotage {
            sabotage_grads(&mut flat_grads);
        }

        let mut flat = mlp.flatten();
        let mut probe = mlp.clone();
        for i in 0..flat.len() {
            let orig = flat[i];
            flat[i] = orig + FD_STEP;
            probe.load_flat(&flat)?;
            let fp = loss(&probe, &inputs);
            flat[i] = orig - FD_STEP;
            probe.load_flat(&flat)?;
            let fm = loss(&probe, &inputs);
            flat[i] = orig;
            tr.check(flat_grads[i], (fp - fm) / (2.0 * FD_STEP));
        }
        probe.load_flat(&flat)?;

        let mut inputs_fd = inputs.clone();
        for i in 0..inputs_fd.len() {
            let orig = inputs_fd[i];
            inputs_fd[i] = orig + FD_STEP;
            let fp = loss(&mlp, &inputs_fd);
            inputs_fd[i] = orig - FD_STEP;
            let fm = loss(&mlp, &inputs_fd);
            inputs_fd[i] = orig;
            tr.check(input_grads[i], (fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(ComponentReport {
        name: "feature_field",
        max_rel_err: tr.max_err,
        checked_params: tr.count,
    })
}

// ---------------------------------------------------------------------------
// Attention (including codebook rows)

const ATT_ROWS: usize = 12;
const ATT_NC: usize = 4;
const ATT_D: usize = 6;
const ATT_DD: usize = 10;
const ATT_DH: usize = 5;
const ATT_LAMBDA: f64 = 0.01;

fn attention_loss(head: &AttentionHead<f64>, queries: &[f64], upstream: &[f64]) -> f64 {
    let out = attention_forward(head, queries).unwrap();
    let lhat: f64 = out.lhat.iter().zip(upstream).map(|(&o, &g)| o * g).sum();
    lhat + ATT_LAMBDA * entropy_loss(&out.a, ATT_ROWS, ATT_NC)
}

fn check_attention(seed: u64, sabotage: bool) -> Result<ComponentReport> {
    let mut rng = stream_rng(seed.wrapping_add(2), Stream::GradCheck);
    let mut tr = Tracker::new();
    for cfg_i in 0..CONFIGS_PER_COMPONENT {
        let entries: Vec<f32> = (0..ATT_NC * ATT_DD)
            .map(|_| uniform(&mut rng, 0.1, 1.1) as f32)
            .collect();
        let cb = Codebook {
            n_entries: ATT_NC,
            dim: ATT_DD,
            entries,
        };
        let mut head: AttentionHead<f64> =
            init_attention_head(seed.wrapping_add(2000 + cfg_i as u64 * 104729), ATT_D, ATT_DH, &cb);
        for b in head.bq.iter_mut().chain(head.bk.iter_mut()) {
            *b = uniform(&mut rng, -0.3, 0.3);
        }
        let queries: Vec<f64> = (0..ATT_ROWS * ATT_D)
            .map(|_| uniform(&mut rng, -1.0, 1.0))
            .collect();
        let upstream: Vec<f64> = (0..ATT_ROWS * ATT_DD)
            .map(|_| uniform(&mut rng, -1.0, 1.0))
            .collect();

        let out = attention_forward(&head, &queries)?;
        let grads = attention_backward(&head, &out, &upstream, ATT_LAMBDA, true, true)?;
        let mut g_wq = grads.wq;
        if sabotage {
            sabotage_grads(&mut g_wq);
        }
        let g_cb = grads.codebook.unwrap();
        let g_queries = grads.queries.unwrap();

        for (which, analytic) in [
            ("wq", &g_wq),
            ("bq", &grads.bq),
            ("wk", &grads.wk),
            ("bk", &grads.bk),
            ("codebook", &g_cb),
        ] {
            let len = match which {
                "wq" => head.wq.len(),
                "bq" => head.bq.len(),
                "wk" => head.wk.len(),
                "bk" => head.bk.len(),
                _ => head.codebook.len(),
            };
            for i in 0..len {
                let mut probe = head.clone();
                let slot = match which {
                    "wq" => &mut probe.wq[i],
                    "bq" => &mut probe.bq[i],
                    "wk" => &mut probe.wk[i],
                    "bk" => &mut probe.bk[i],
                    _ => &mut probe.codebook[i],
                };
                let orig = *slot;
                *slot = orig + FD_STEP;
                let fp = attention_loss(&probe, &queries, &upstream);
                let slot = match which {
                    "wq" => &mut probe.wq[i],
                    "bq" => &mut probe.bq[i],
                    "wk" => &mut probe.wk[i],
                    "bk" => &mut probe.bk[i],
                    _ => &mut probe.codebook[i],
                };
                *slot = orig - FD_STEP;
                let fm = attention_loss(&probe, &queries, &upstream);
                tr.check(analytic[i], (fp - fm) / (2.0 * FD_STEP));
            }
        }
        let mut q_fd = queries.clone();
        for i in 0..q_fd.len() {
            let orig = q_fd[i];
            q_fd[i] = orig + FD_STEP;
            let fp = attention_loss(&head, &q_fd, &upstream);
            q_fd[i] = orig - FD_STEP;
            let fm = attention_loss(&head, &q_fd, &upstream);
            q_fd[i] = orig;
            tr.check(g_queries[i], (fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(ComponentReport {
        name: "attention",
        max_rel_err: tr.max_err,
        checked_params: tr.count,
    })
}

// ---------------------------------------------------------------------------
// Losses

fn check_photometric(seed: u64, sabotage: bool) -> Result<ComponentReport> {
    let mut rng = stream_rng(seed.wrapping_add(3), Stream::GradCheck);
    let mut tr = Tracker::new();
    let (h, w) = (10usize, 10usize);
    for _ in 0..CONFIGS_PER_COMPONENT {
        let c: Vec<f64> = (0..h * w * 3).map(|_| uniform(&mut rng, 0.1, 0.9)).collect();
        // Shift every channel by at least 0.02 so the L1 kink is far away.
        let mut chat = c.clone();
        for v in chat.iter_mut() {
            let s = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            *v += s * uniform(&mut rng, 0.02, 0.08);
        }
        let mut grads = photometric_backward(&c, &chat, h, w)?;
        if sabotage {
            sabotage_grads(&mut grads);
        }
        for i in 0..chat.len() {
            let orig = chat[i];
            chat[i] = orig + FD_STEP;
            let fp = photometric_loss(&c, &chat, h, w)?;
            chat[i] = orig - FD_STEP;
            let fm = photometric_loss(&c, &chat, h, w)?;
            chat[i] = orig;
            tr.check(grads[i], (fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(ComponentReport {
        name: "photometric_loss",
        max_rel_err: tr.max_err,
        checked_params: tr.count,
    })
}

fn check_ld_lang(seed: u64, sabotage: bool) -> Result<ComponentReport> {
    let mut rng = stream_rng(seed.wrapping_add(4), Stream::GradCheck);
    let mut tr = Tracker::new();
    let (rows, dim) = (6usize, 7usize);
    for _ in 0..CONFIGS_PER_COMPONENT {
        let target: Vec<f64> = (0..rows * dim).map(|_| uniform(&mut rng, 0.2, 1.0)).collect();
        let mut pred = target.clone();
        for v in pred.iter_mut() {
            let s = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            *v += s * uniform(&mut rng, 0.02, 0.3);
        }
        let mut grads = ld_loss_backward(&target, &pred, dim)?;
        if sabotage {
            sabotage_grads(&mut grads);
        }
        for i in 0..pred.len() {
            let orig = pred[i];
            pred[i] = orig + FD_STEP;
            let fp = ld_loss(&target, &pred, dim)?;
            pred[i] = orig - FD_STEP;
            let fm = ld_loss(&target, &pred, dim)?;
            pred[i] = orig;
            tr.check(grads[i], (fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(ComponentReport {
        name: "ld_lang_loss",
        max_rel_err: tr.max_err,
        checked_params: tr.count,
    })
}

fn run_inner(seed: u64, sabotage: Option<&str>) -> Result<GradReport> {
    let components = vec![
        check_compositor(seed, sabotage == Some("compositor"))?,
        check_mlp(seed, sabotage == Some("feature_field"))?,
        check_attention(seed, sabotage == Some("attention"))?,
        check_photometric(seed, sabotage == Some("photometric_loss"))?,
        check_ld_lang(seed, sabotage == Some("ld_lang_loss"))?,
    ];
    Ok(GradReport { components })
}

/// Run all finite-difference suites.
pub fn run_gradcheck(seed: u64) -> Result<GradReport> {
    run_inner(seed, None)
}

/// Test fixture: deliberately corrupts the analytic gradients of one named
/// component so the report must flag exactly that component.
pub fn run_gradcheck_sabotaged(seed: u64, component: &str) -> Result<GradReport> {
    run_inner(seed, Some(component))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_components_pass() {
        let report = run_gradcheck(12345).unwrap();
        for c in &report.components {
            assert!(
                c.pass(),
                "{} failed with max rel err {}",
                c.name,
                c.max_rel_err
            );
            assert!(c.checked_params > 0);
        }
    }

    #[test]
    fn sabotaged_attention_fails_by_name() {
        let report = run_gradcheck_sabotaged(12345, "attention").unwrap();
        assert!(!report.all_pass());
        assert_eq!(report.first_failure().unwrap().name, "attention");
        // Only the sabotaged component fails.
        for c in &report.components {
            if c.name != "attention" {
                assert!(c.pass(), "{} unexpectedly failed", c.name);
            }
        }
    }
}
