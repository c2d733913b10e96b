//! Property tests: every on-disk format round-trips bit-identically for
//! arbitrary valid content.

use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use gaff_core::field::{FeatureField, SceneBounds};
use gaff_core::preprocess::{Codebook, PcaProjection};
use gaff_core::rng::{stream_rng, Stream};
use gaff_core::scene::{
    encode_scene, load_scene, save_scene, Camera, GaussianSplat, SceneModel, VocabEntry,
};
use gaff_core::tensorio::{read_tensor, write_tensor};
use gaff_core::train::{
    encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Stage, TrainConfig,
};

fn dims_and_data() -> impl Strategy<Value = (Vec<u64>, Vec<f32>)> {
    prop::collection::vec(1u64..5, 1..4).prop_flat_map(|dims| {
        let n: u64 = dims.iter().product();
        let data = prop::collection::vec(-1e6f32..1e6f32, n as usize..=n as usize);
        (Just(dims), data)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_roundtrip_bit_identical((dims, data) in dims_and_data()) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.gaft");
        write_tensor(&p, &dims, &data).unwrap();
        let (rd, rdata) = read_tensor(&p).unwrap();
        prop_assert_eq!(rd, dims);
        // Compare raw bits, not float equality.
        let a: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = rdata.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }
}

fn random_scene(seed: u64) -> SceneModel {
    let mut rng: ChaCha8Rng = stream_rng(seed, Stream::GradCheck);
    let n_splats = 1 + rng.gen_range(0..12);
    let splats = (0..n_splats)
        .map(|i| {
            let q64 = [
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            ];
            let n = q64.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
            GaussianSplat {
                mu: [rng.gen::<f32>() * 8.0 - 4.0, rng.gen(), rng.gen()],
                rot: [
                    (q64[0] / n) as f32,
                    (q64[1] / n) as f32,
                    (q64[2] / n) as f32,
                    (q64[3] / n) as f32,
                ],
                log_scale: [rng.gen::<f32>() - 3.0; 3],
                alpha_logit: rng.gen::<f32>() * 4.0 - 2.0,
                sem_alpha_logit: rng.gen::<f32>() * 4.0 - 2.0,
                color: [rng.gen(), rng.gen(), rng.gen()],
                class_id: if i % 3 == 0 { None } else { Some(i as u32) },
            }
        })
        .collect();
    let n_cams = rng.gen_range(0..4);
    let cameras = (0..n_cams)
        .map(|k| {
            let theta = k as f64 + 0.3;
            Camera::look_at(
                [5.0 * theta.cos(), 5.0 * theta.sin(), 1.0 + k as f64],
                [0.0, 0.0, 0.0],
                [0.0, 0.0, 1.0],
                10.0 + rng.gen::<f32>() * 100.0,
                10.0 + rng.gen::<f32>() * 100.0,
                8 + k,
                6 + k,
            )
            .unwrap()
        })
        .collect();
    let dim = 4 + rng.gen_range(0..5);
    let n_vocab = rng.gen_range(0..3);
    let vocab = (0..n_vocab)
        .map(|k| {
            let mut e: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect();
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
            e.iter_mut().for_each(|x| *x /= n);
            VocabEntry {
                name: format!("entry-{k}-\u{00e9}"),
                embedding: e.iter().map(|&x| x as f32).collect(),
            }
        })
        .collect();
    SceneModel {
        splats,
        cameras,
        vocab,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scene_roundtrip_bit_identical(seed in any::<u64>()) {
        let scene = random_scene(seed);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.gafs");
        save_scene(&scene, &p).unwrap();
        let back = load_scene(&p).unwrap();
        prop_assert_eq!(&scene, &back);
        prop_assert_eq!(encode_scene(&scene).unwrap(), encode_scene(&back).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip_bit_identical(seed in any::<u64>()) {
        let mut rng: ChaCha8Rng = stream_rng(seed, Stream::GradCheck);
        let scene = random_scene(seed ^ 0xabcd);
        let dim_high = 6usize;
        let d = 3usize;
        let n_feat = 12usize;
        let feats: Vec<f32> = (0..n_feat * dim_high).map(|_| rng.gen::<f32>()).collect();
        let pca: PcaProjection = gaff_core::preprocess::fit_pca(&feats, n_feat, dim_high, d).unwrap();
        let codebook = Codebook {
            n_entries: 3,
            dim: dim_high,
            entries: (0..3 * dim_high).map(|_| 0.1 + rng.gen::<f32>()).collect(),
        };
        let mut field = FeatureField::new(seed, 3, 8, d, SceneBounds { lo: [-1.0; 3], hi: [1.0; 3] });
        for l in field.mlp.layers.iter_mut() {
            for w in l.w.iter_mut() {
                *w = rng.gen::<f32>() - 0.5;
            }
            for b in l.b.iter_mut() {
                *b = rng.gen::<f32>() - 0.5;
            }
        }
        let attention = if seed % 2 == 0 {
            Some(gaff_core::attention::init_attention_head(seed, d, 4, &codebook))
        } else {
            None
        };
        let ckpt = Checkpoint {
            stage: if attention.is_some() { Stage::Stage2 } else { Stage::Stage1 },
            iteration: seed % 100000,
            config: TrainConfig {
                seed,
                lambda_ld: rng.gen::<f32>(),
                freeze_codebook: seed % 3 == 0,
                ..TrainConfig::default()
            },
            splats: scene.splats,
            field,
            pca,
            codebook,
            attention,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.gafc");
        save_checkpoint(&ckpt, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        prop_assert_eq!(&ckpt, &back);
        prop_assert_eq!(encode_checkpoint(&ckpt), encode_checkpoint(&back));
    }
}
