//! Shared fixtures for the pipeline benchmarks.

use gaff_core::preprocess::{fit_pca, init_codebook, Codebook, PcaProjection};
use gaff_core::scene::{generate_synthetic_scene, SceneModel, SynthParams, ViewSupervision};

/// Desk-scale benchmark scene: 2000 splats, 16 cameras, 64x64, D = 32.
pub fn bench_scene() -> (SceneModel, Vec<ViewSupervision>, PcaProjection, Codebook) {
    let params = SynthParams::default();
    let (scene, mut supervision) = generate_synthetic_scene(&params).unwrap();
    let dim = params.embed_dim;
    let mut feats = Vec::new();
    for v in &supervision {
        feats.extend_from_slice(&v.mask_features);
    }
    let n = feats.len() / dim;
    let pca = fit_pca(&feats, n, dim, 8).unwrap();
    let codebook = init_codebook(&feats, n, dim, 2, 16, 42).unwrap();
    gaff_core::query::attach_ld_maps(&mut supervision, &pca).unwrap();
    (scene, supervision, pca, codebook)
}
