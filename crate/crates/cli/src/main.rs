//! `gaff` command line: scene synthesis, preprocessing, two-stage training,
//! open-vocabulary querying, evaluation, rendering, and gradient
//! self-diagnostics. Every command is deterministic under a fixed seed and
//! writes outputs atomically (temp file + rename). Exit codes: 0 success,
//! 1 validation/domain error, 2 I/O error.

mod config;
mod workspace;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};

use config::FileConfig;
use gaff_core::error::{Error, Result};
use gaff_core::preprocess::{fit_pca, init_codebook};
use gaff_core::query::{self, TextQuery};
use gaff_core::scene::{generate_synthetic_scene, save_scene, SceneModel, SynthParams};
use gaff_core::tensorio;
use gaff_core::train::{
    load_checkpoint, save_checkpoint, train_stage1, train_stage2, Checkpoint, LossTrace,
};
use gaff_core::{gradcheck, raster};
use workspace::Workspace;

#[derive(Parser)]
#[command(
    name = "gaff",
    about = "Gaussian feature field splatting with codebook-guided language retrieval",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// Workspace directory.
    #[arg(long)]
    dir: PathBuf,
    /// Optional "key = value" configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single config key (repeatable), e.g. --set seed=7.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<FileConfig> {
        let mut cfg = match &self.config {
            Some(p) => FileConfig::from_file(p)?,
            None => FileConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic labeled scene plus per-view supervision files.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 250)]
        splats_per_class: usize,
        #[arg(long, default_value_t = 16)]
        cameras: usize,
        #[arg(long, default_value_t = 64)]
        width: u32,
        #[arg(long, default_value_t = 64)]
        height: u32,
        #[arg(long, default_value_t = 32)]
        embed_dim: usize,
        /// Overwrite existing outputs.
        #[arg(long)]
        force: bool,
    },
    /// Fit PCA, derive LD maps, and initialize the codebook.
    Preprocess(ConfigArgs),
    /// Stage 1: photometric + LD distillation training.
    Train1 {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shorthand for --set stage1_iters=N.
        #[arg(long)]
        iters: Option<u32>,
    },
    /// Stage 2: attention + codebook training.
    Train2 {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shorthand for --set stage2_iters=N.
        #[arg(long)]
        iters: Option<u32>,
    },
    /// Query the trained scene with a text name or an embedding file.
    Query {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Vocabulary name to query.
        #[arg(long, conflicts_with = "embedding")]
        text: Option<String>,
        /// Tensor file holding a unit-norm D-vector embedding.
        #[arg(long)]
        embedding: Option<PathBuf>,
        /// 2d or 3d.
        #[arg(long, default_value = "2d")]
        mode: String,
        /// Camera index, or "all".
        #[arg(long, default_value = "0")]
        camera: String,
        /// Checkpoint path (defaults to stage2.gafc in the workspace).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory (defaults to DIR/out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every vocabulary query in 2D and 3D and aggregate metrics.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render a camera's color view to a PPM image.
    Render {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        /// Render the splats of this checkpoint instead of the raw scene.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump the raw render output as tensor files.
        #[arg(long)]
        dump_tensors: bool,
    },
    /// Export per-codebook-entry attention heatmaps and masked RGB images.
    Entries {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        camera: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference verification of every hand-written adjoint.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn main() {
    if let Ok(threads) = std::env::var("GAFF_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth {
            dir,
            seed,
            classes,
            splats_per_class,
            cameras,
            width,
            height,
            embed_dim,
            force,
        } => cmd_synth(
            &dir,
            SynthParams {
                seed,
                n_classes: classes,
                splats_per_class,
                n_cameras: cameras,
                width,
                height,
                embed_dim,
            },
            force,
        ),
        Cmd::Preprocess(args) => cmd_preprocess(&args),
        Cmd::Train1 { cfg, iters } => cmd_train1(&cfg, iters),
        Cmd::Train2 { cfg, iters } => cmd_train2(&cfg, iters),
        Cmd::Query {
            cfg,
            text,
            embedding,
            mode,
            camera,
            checkpoint,
            out,
        } => cmd_query(&cfg, text, embedding, &mode, &camera, checkpoint, out),
        Cmd::Eval { cfg, checkpoint } => cmd_eval(&cfg, checkpoint),
        Cmd::Render {
            dir,
            camera,
            checkpoint,
            out,
            dump_tensors,
        } => cmd_render(&dir, camera, checkpoint, out, dump_tensors),
        Cmd::Entries {
            cfg,
            camera,
            checkpoint,
            out,
        } => cmd_entries(&cfg, camera, checkpoint, out),
        Cmd::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

fn cmd_synth(dir: &PathBuf, params: SynthParams, force: bool) -> Result<()> {
    let ws = Workspace::new(dir);
    if ws.scene_path().exists() && !force {
        return Err(Error::validation(format!(
            "{} already exists; pass --force to overwrite",
            ws.scene_path().display()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let t = Instant::now();
    let (scene, supervision) = generate_synthetic_scene(&params)?;
    save_scene(&scene, &ws.scene_path())?;
    ws.save_supervision(&supervision)?;
    println!(
        "synthesized {} splats in {} classes, {} cameras at {}x{} ({:.2?})",
        scene.splats.len(),
        params.n_classes,
        params.n_cameras,
        params.width,
        params.height,
        t.elapsed()
    );
    println!("scene: {}", ws.scene_path().display());
    Ok(())
}

fn cmd_preprocess(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let ws = Workspace::new(&args.dir);
    let scene = ws.load_scene()?;
    let mut views = ws.load_supervision(&scene)?;

    // Pool per-mask language features across views.
    let dim = views
        .first()
        .map(|v| v.feature_dim)
        .ok_or_else(|| Error::validation("no supervision views"))?;
    let mut feats = Vec::new();
    for v in &views {
        if v.feature_dim != dim {
            return Err(Error::validation("views disagree on language feature dimension"));
        }
        feats.extend_from_slice(&v.mask_features);
    }
    let n = feats.len() / dim;

    let d = cfg.train.d as usize;
    let pca = fit_pca(&feats, n, dim, d)?;
    let k_max = cfg.k_max.min(n.saturating_sub(1));
    let codebook = init_codebook(&feats, n, dim, cfg.k_min, k_max, cfg.train.seed)?;
    query::attach_ld_maps(&mut views, &pca)?;

    ws.save_pca(&pca)?;
    ws.save_codebook(&codebook)?;
    ws.save_ld_maps(&views)?;
    ws.write_meta(codebook.n_entries, d, cfg.k_min, k_max, cfg.train.seed)?;
    println!(
        "preprocessed {} feature vectors (D = {dim}): d = {d}, codebook N_c = {}",
        n, codebook.n_entries
    );
    println!("artifacts: {}", ws.preproc_dir().display());
    Ok(())
}

fn print_trace(trace: &LossTrace) {
    for (it, vals) in &trace.rows {
        if it % 100 == 0 || *it as usize + 1 == trace.rows.len() {
            let parts: Vec<String> = trace
                .columns
                .iter()
                .zip(vals)
                .map(|(c, v)| format!("{c}={v:.5}"))
                .collect();
            println!("iter {it:>6}  {}", parts.join("  "));
        }
    }
}

fn cmd_train1(args: &ConfigArgs, iters: Option<u32>) -> Result<()> {
    let mut cfg = args.resolve()?;
    if let Some(n) = iters {
        cfg.train.stage1_iters = n;
    }
    let ws = Workspace::new(&args.dir);
    let scene = ws.load_scene()?;
    let mut views = ws.load_supervision(&scene)?;
    ws.attach_ld_maps(&mut views)?;
    let pca = ws.load_pca()?;
    let codebook = ws.load_codebook()?;
    let t = Instant::now();
    let (ckpt, trace) = train_stage1(&scene, &views, &pca, &codebook, &cfg.train)?;
    print_trace(&trace);
    save_checkpoint(&ckpt, &ws.stage1_path())?;
    ws.write_text(&ws.loss_path(1), &trace.to_csv())?;
    println!(
        "stage 1 finished ({} iterations, {:.2?}): {}",
        cfg.train.stage1_iters,
        t.elapsed(),
        ws.stage1_path().display()
    );
    Ok(())
}

fn cmd_train2(args: &ConfigArgs, iters: Option<u32>) -> Result<()> {
    let mut cfg = args.resolve()?;
    if let Some(n) = iters {
        cfg.train.stage2_iters = n;
    }
    let ws = Workspace::new(&args.dir);
    if !ws.stage1_path().exists() {
        return Err(Error::validation(format!(
            "missing stage-1 checkpoint at {}; run 'gaff train1' first",
            ws.stage1_path().display()
        )));
    }
    let scene = ws.load_scene()?;
    let views = ws.load_supervision(&scene)?;
    let ckpt1 = load_checkpoint(&ws.stage1_path())?;
    let t = Instant::now();
    let (ckpt2, trace) = train_stage2(&ckpt1, &scene.cameras, &views, &cfg.train)?;
    print_trace(&trace);
    save_checkpoint(&ckpt2, &ws.stage2_path())?;
    ws.write_text(&ws.loss_path(2), &trace.to_csv())?;
    println!(
        "stage 2 finished ({} iterations, {:.2?}): {}",
        cfg.train.stage2_iters,
        t.elapsed(),
        ws.stage2_path().display()
    );
    Ok(())
}

fn load_query_checkpoint(ws: &Workspace, explicit: Option<PathBuf>) -> Result<Checkpoint> {
    let path = match explicit {
        Some(p) => p,
        None => {
            if !ws.stage2_path().exists() {
                return Err(Error::validation(format!(
                    "missing stage-2 checkpoint at {}; run 'gaff train2' first",
                    ws.stage2_path().display()
                )));
            }
            ws.stage2_path()
        }
    };
    load_checkpoint(&path)
}

fn build_query(
    scene: &SceneModel,
    text: Option<String>,
    embedding: Option<PathBuf>,
) -> Result<TextQuery> {
    match (text, embedding) {
        (Some(name), None) => TextQuery::from_vocab(scene, &name),
        (None, Some(path)) => {
            let (dims, data) = tensorio::read_tensor(&path)?;
            if dims.len() != 1 {
                return Err(Error::validation("embedding tensor must be a rank-1 D-vector"));
            }
            TextQuery::new(
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "query".into()),
                data,
            )
        }
        _ => Err(Error::validation("pass exactly one of --text or --embedding")),
    }
}

fn parse_cameras(spec: &str, n: usize) -> Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..n).collect());
    }
    let k: usize = spec
        .parse()
        .map_err(|_| Error::validation(format!("--camera expects an index or 'all', got '{spec}'")))?;
    if k >= n {
        return Err(Error::validation(format!(
            "camera {k} out of range; scene has {n} cameras"
        )));
    }
    Ok(vec![k])
}

fn cmd_query(
    args: &ConfigArgs,
    text: Option<String>,
    embedding: Option<PathBuf>,
    mode: &str,
    camera: &str,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = args.resolve()?;
    let ws = Workspace::new(&args.dir);
    let scene = ws.load_scene()?;
    let ckpt = load_query_checkpoint(&ws, checkpoint)?;
    let query = build_query(&scene, text, embedding)?;
    let cams = parse_cameras(camera, scene.cameras.len())?;
    let out_dir = out.unwrap_or_else(|| ws.out_dir());
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    // Ground truth is available when the query names a vocabulary class and
    // supervision files exist.
    let class = scene.vocab.iter().position(|v| v.name == query.name);
    let views = ws.load_supervision(&scene).ok();

    println!("query,mode,camera,max_score,miou,acc");
    match mode {
        "2d" => {
            for &k in &cams {
                let r = query::query_2d(&ckpt, &scene.cameras[k], &query, cfg.tau_rel)?;
                let heat: Vec<f32> = r.score_map.iter().map(|&s| (s + 1.0) / 2.0).collect();
                let heat_img = tensorio::heatmap_to_image(&heat);
                let base = format!("query_{}_cam{k:02}", query.name);
                tensorio::write_ppm(
                    &out_dir.join(format!("{base}_heatmap.ppm")),
                    r.width,
                    r.height,
                    &heat_img,
                )?;
                let mask_img: Vec<f32> = r
                    .mask
                    .iter()
                    .flat_map(|&m| if m { [1.0; 3] } else { [0.0; 3] })
                    .collect();
                tensorio::write_ppm(
                    &out_dir.join(format!("{base}_mask.ppm")),
                    r.width,
                    r.height,
                    &mask_img,
                )?;
                let (miou_s, acc_s) = match (class, &views) {
                    (Some(c), Some(vs)) => {
                        let gt = query::gt_class_mask(&vs[k], c as i32);
                        let iou = query::miou(&r.mask, &gt)?;
                        let (row, col) = r.argmax_pixel;
                        let hit = gt[row * r.width + col];
                        (format!("{iou:.4}"), format!("{}", hit as u8))
                    }
                    _ => ("n/a".into(), "n/a".into()),
                };
                println!("{},2d,{k},{:.4},{},{}", query.name, r.max_score, miou_s, acc_s);
            }
        }
        "3d" => {
            let r3 = query::query_3d(&ckpt, &query, cfg.kappa)?;
            let scene_now = SceneModel {
                splats: ckpt.splats.clone(),
                cameras: scene.cameras.clone(),
                vocab: scene.vocab.clone(),
            };
            let selected = r3.selection.iter().filter(|&&s| s).count();
            for &k in &cams {
                let (render, mask) =
                    raster::render_selected(&scene_now, &scene.cameras[k], &r3.selection)?;
                let base = format!("query_{}_cam{k:02}", query.name);
                let img: Vec<f32> = render.payload_image.iter().map(|v| v.clamp(0.0, 1.0)).collect();
                tensorio::write_ppm(
                    &out_dir.join(format!("{base}_selected.ppm")),
                    render.width,
                    render.height,
                    &img,
                )?;
                let mask_img: Vec<f32> = mask
                    .iter()
                    .flat_map(|&m| if m { [1.0; 3] } else { [0.0; 3] })
                    .collect();
                tensorio::write_ppm(
                    &out_dir.join(format!("{base}_mask3d.ppm")),
                    render.width,
                    render.height,
                    &mask_img,
                )?;
                let miou_s = match (class, &views) {
                    (Some(c), Some(vs)) => {
                        let gt = query::gt_class_mask(&vs[k], c as i32);
                        format!("{:.4}", query::miou(&mask, &gt)?)
                    }
                    _ => "n/a".into(),
                };
                println!(
                    "{},3d,{k},{selected} splats,{},n/a",
                    query.name, miou_s
                );
            }
        }
        other => {
            return Err(Error::validation(format!(
                "--mode must be 2d or 3d, got '{other}'"
            )))
        }
    }
    println!("outputs: {}", out_dir.display());
    Ok(())
}

fn cmd_eval(args: &ConfigArgs, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = args.resolve()?;
    let ws = Workspace::new(&args.dir);
    let scene = ws.load_scene()?;
    let views = ws.load_supervision(&scene)?;
    let ckpt = load_query_checkpoint(&ws, checkpoint)?;
    let report = query::evaluate(&ckpt, &scene, &views, cfg.tau_rel, cfg.kappa)?;
    let csv = report.to_csv();
    ws.write_text(&ws.metrics_path(), &csv)?;
    print!("{csv}");
    println!(
        "mean: 2D mIoU {:.4}, 2D Acc {:.4}, 3D mIoU {:.4}, 3D Acc@0.25 {:.4} (tau_rel {}, kappa {})",
        report.mean_miou_2d,
        report.mean_acc_2d,
        report.mean_miou_3d,
        report.acc_at_025_3d,
        report.tau_rel,
        report.kappa
    );
    println!("metrics: {}", ws.metrics_path().display());
    Ok(())
}

fn cmd_render(
    dir: &PathBuf,
    camera: usize,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    dump_tensors: bool,
) -> Result<()> {
    let ws = Workspace::new(dir);
    let mut scene = ws.load_scene()?;
    if let Some(p) = checkpoint {
        scene.splats = load_checkpoint(&p)?.splats;
    }
    if camera >= scene.cameras.len() {
        return Err(Error::validation(format!(
            "camera {camera} out of range; scene has {} cameras",
            scene.cameras.len()
        )));
    }
    let cam = scene.cameras[camera].clone();
    let render = raster::render_color(&scene, &cam, false)?;
    let img: Vec<f32> = render.payload_image.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let out_path = out.unwrap_or_else(|| {
        std::fs::create_dir_all(ws.out_dir()).ok();
        ws.out_dir().join(format!("render_cam{camera:02}.ppm"))
    });
    tensorio::write_ppm(&out_path, render.width, render.height, &img)?;
    if dump_tensors {
        let dump_dir = out_path.parent().unwrap_or(dir).to_path_buf();
        render.dump(&dump_dir, &format!("render_cam{camera:02}"))?;
        println!("dumped tensors under {}", dump_dir.display());
    }
    println!("rendered camera {camera}: {}", out_path.display());
    Ok(())
}

fn cmd_entries(
    args: &ConfigArgs,
    camera: usize,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let ws = Workspace::new(&args.dir);
    let scene = ws.load_scene()?;
    let ckpt = load_query_checkpoint(&ws, checkpoint)?;
    if camera >= scene.cameras.len() {
        return Err(Error::validation(format!(
            "camera {camera} out of range; scene has {} cameras",
            scene.cameras.len()
        )));
    }
    let out_dir = out.unwrap_or_else(|| ws.out_dir().join(format!("entries_cam{camera:02}")));
    let written =
        query::export_entry_heatmaps(&ckpt, &scene, &scene.cameras[camera], &out_dir)?;
    println!(
        "wrote {} heatmap/mask images for {} codebook entries: {}",
        written.len(),
        ckpt.codebook.n_entries,
        out_dir.display()
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let t = Instant::now();
    let report = gradcheck::run_gradcheck(seed)?;
    for c in &report.components {
        println!(
            "{:<18} max_rel_err {:>12.3e}  ({} params checked)  {}",
            c.name,
            c.max_rel_err,
            c.checked_params,
            if c.pass() { "pass" } else { "FAIL" }
        );
    }
    println!(
        "gradcheck {} in {:.2?} (tolerance {:.0e})",
        if report.all_pass() { "passed" } else { "FAILED" },
        t.elapsed(),
        gradcheck::GRAD_TOL
    );
    if let Some(fail) = report.first_failure() {
        return Err(Error::validation(format!(
            "gradient check failed in component '{}'",
            fail.name
        )));
    }
    Ok(())
}
