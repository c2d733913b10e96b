use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use gaff_bench::bench_scene;
use gaff_core::attention::{attention_backward, attention_forward, init_attention_head};
use gaff_core::field::FeatureField;
use gaff_core::math::sigmoid;
use gaff_core::raster::{composite, composite_backward, project_scene, ViewGeom};
use gaff_core::train::losses::{photometric_backward, photometric_loss};

fn rasterizer_benches(c: &mut Criterion) {
    let (scene, supervision, _, _) = bench_scene();
    let cam = &scene.cameras[0];
    let view = ViewGeom::from_camera(cam);
    let (projected, ids) = project_scene(&scene.splats, &view, None);
    let colors: Vec<f32> = {
        let all: Vec<f32> = scene.splats.iter().flat_map(|s| s.color).collect();
        ids.iter()
            .flat_map(|&id| all[id as usize * 3..id as usize * 3 + 3].to_vec())
            .collect()
    };
    let alphas: Vec<f32> = ids
        .iter()
        .map(|&id| sigmoid(scene.splats[id as usize].alpha_logit))
        .collect();
    let n = scene.splats.len();

    c.bench_function("project_scene 2000 splats", |b| {
        b.iter(|| project_scene(black_box(&scene.splats), &view, None))
    });
    c.bench_function("composite color 64x64", |b| {
        b.iter(|| {
            composite(
                black_box(&projected),
                &ids,
                &colors,
                3,
                &alphas,
                view.width,
                view.height,
                false,
            )
            .unwrap()
        })
    });

    let out = composite(&projected, &ids, &colors, 3, &alphas, view.width, view.height, true).unwrap();
    let upstream = photometric_backward(&supervision[0].color, &out.payload_image, view.height, view.width).unwrap();
    c.bench_function("composite_backward color 64x64", |b| {
        b.iter(|| {
            composite_backward(
                black_box(&out),
                &projected,
                &ids,
                &colors,
                &alphas,
                &upstream,
                n,
                false,
            )
            .unwrap()
        })
    });
    c.bench_function("photometric loss + backward 64x64", |b| {
        b.iter(|| {
            let l = photometric_loss(&supervision[0].color, &out.payload_image, view.height, view.width).unwrap();
            let g = photometric_backward(&supervision[0].color, &out.payload_image, view.height, view.width).unwrap();
            black_box((l, g))
        })
    });
}

fn field_benches(c: &mut Criterion) {
    let (scene, _, _, _) = bench_scene();
    let field = FeatureField::new(42, 6, 128, 8, gaff_core::field::SceneBounds::of_scene(&scene));
    c.bench_function("field forward 2000 splats (128 hidden)", |b| {
        b.iter(|| field.forward(black_box(&scene.splats)))
    });
    let (_, cache) = field.forward(&scene.splats);
    let grad = vec![0.01f32; scene.splats.len() * 8];
    c.bench_function("field backward 2000 splats", |b| {
        b.iter(|| field.backward(black_box(&cache), &grad, false).unwrap())
    });
}

fn attention_benches(c: &mut Criterion) {
    let (_, _, _, codebook) = bench_scene();
    let head = init_attention_head::<f32>(42, 8, 128, &codebook);
    let queries: Vec<f32> = (0..4096 * 8).map(|i| ((i % 97) as f32) * 0.01 - 0.4).collect();
    c.bench_function("attention forward 4096 pixels", |b| {
        b.iter(|| attention_forward(&head, black_box(&queries)).unwrap())
    });
    let out = attention_forward(&head, &queries).unwrap();
    let grad = vec![0.001f32; 4096 * codebook.dim];
    c.bench_function("attention backward 4096 pixels", |b| {
        b.iter(|| attention_backward(&head, &out, black_box(&grad), 0.001, true, false).unwrap())
    });
}

criterion_group!(benches, rasterizer_benches, field_benches, attention_benches);
criterion_main!(benches);
