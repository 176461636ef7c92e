use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dbr_core::geometry::write_poses;
use dbr_core::harness::train::{infer_poses, Init};
use dbr_core::harness::{
    balab, evaluate, finetune, load_scene, neighbors_for, pretrain, render_view, Checkpoint, Mode, Model, RunConfig,
};
use dbr_core::imageio::save_depth_png;
use dbr_core::scene_graph::{build_scene_graph, write_matches, DetectorConfig, MatchConfig};

#[derive(Parser)]
#[command(name = "dbr", version, about = "Joint pose/depth optimisation with a generalizable renderer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key value` config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene seed; defaults to the config's evaluation scene.
    #[arg(long)]
    scene: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Joint training across the configured scenes.
    Pretrain(Common),
    /// Continue training on one scene with the fine-tuning rates.
    Finetune(WithCheckpoint),
    /// Pose errors for every view, renders and scores of held-out views.
    Evaluate(WithCheckpoint),
    /// Full renders of chosen views with optimizer-estimated poses.
    Render {
        #[command(flatten)]
        args: WithCheckpoint,
        /// Views to render (all when omitted).
        #[arg(long, value_delimiter = ',')]
        views: Vec<usize>,
        /// Render with ground-truth relative poses instead.
        #[arg(long)]
        gt_poses: bool,
    },
    /// Pose refinement experiments against a trained renderer.
    BaLab {
        #[command(flatten)]
        args: WithCheckpoint,
        #[arg(long)]
        mode: Mode,
    },
    /// Keypoint matching and the covisibility graph of a scene.
    SceneGraph {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: Option<u64>,
    },
    /// Writes a synthetic scene: images, depths, poses and scene parameters.
    MakeScene {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: Option<u64>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    cfg.save(&c.out.join("config.txt"))?;
    Ok(cfg)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::load(path, Some(cfg.config_hash())).with_context(|| format!("loading {}", path.display()))?;
    Ok((Model::from_checkpoint(cfg, &ckpt)?, ckpt))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Pretrain(c) => {
            let cfg = load_config(&c)?;
            let r = pretrain(&cfg, &c.out)?;
            println!("pretrained {} steps -> {}", r.step, c.out.join("checkpoint.dbrf").display());
        }
        Command::Finetune(a) => {
            let cfg = load_config(&a.common)?;
            let ckpt = Checkpoint::load(&a.checkpoint, Some(cfg.config_hash()))?;
            let data = load_scene(&cfg, a.scene.unwrap_or(cfg.eval_scene))?;
            let r = finetune(&cfg, &ckpt, &data, &a.common.out)?;
            println!("fine-tuned to step {} -> {}", r.step, a.common.out.join("checkpoint.dbrf").display());
        }
        Command::Evaluate(a) => {
            let cfg = load_config(&a.common)?;
            let (mut model, ckpt) = load_model(&cfg, &a.checkpoint)?;
            let data = load_scene(&cfg, a.scene.unwrap_or(cfg.eval_scene))?;
            let r = evaluate(&cfg, &mut model, &data, ckpt.step, Some(&a.common.out))?;
            let mut s = String::new();
            writeln!(s, "scene {} step {}", data.seed, ckpt.step)?;
            writeln!(s, "heldout_views {:?}", r.rendered)?;
            writeln!(s, "psnr {:.4}", r.mean_psnr())?;
            writeln!(s, "ssim {:.4}", r.mean_ssim())?;
            writeln!(s, "init_rot_err_deg {:.4}", dbr_core::harness::train::mean(r.init_rot_deg.iter().copied()))?;
            writeln!(s, "init_trans_err {:.5}", dbr_core::harness::train::mean(r.init_trans.iter().copied()))?;
            writeln!(s, "rot_err_deg {:.4}", r.mean_rot_deg())?;
            writeln!(s, "trans_err {:.5}", r.mean_trans())?;
            fs::write(a.common.out.join("report.txt"), &s)?;
            print!("{s}");
        }
        Command::Render { args: a, views, gt_poses } => {
            let cfg = load_config(&a.common)?;
            let (mut model, _) = load_model(&cfg, &a.checkpoint)?;
            let data = load_scene(&cfg, a.scene.unwrap_or(cfg.eval_scene))?;
            let views = if views.is_empty() { (0..data.views.len()).collect() } else { views };
            let (img_dir, depth_dir) = (a.common.out.join("images"), a.common.out.join("depths"));
            fs::create_dir_all(&img_dir)?;
            fs::create_dir_all(&depth_dir)?;
            for v in views {
                if v >= data.views.len() {
                    bail!("view {v} out of range (scene has {})", data.views.len());
                }
                let nb = neighbors_for(&cfg, &data, v, cfg.neighbors_eval)?;
                let rel = if gt_poses {
                    dbr_core::harness::train::relative_truth(&data, v, &nb)
                } else {
                    let init = Init::Perturbed { rot_deg: cfg.init_rot_deg, trans_frac: cfg.init_trans_frac, seed: cfg.seed + v as u64 };
                    let out = infer_poses(&mut model, &data, v, &nb, init, cfg.seed)?;
                    out.history.last().context("empty optimizer history")?.poses.clone()
                };
                let (img, depth) = render_view(&model, &data, &nb, &rel, 2048)?;
                img.save_png(&img_dir.join(format!("view_{v:03}.png")))?;
                save_depth_png(&depth_dir.join(format!("view_{v:03}.png")), img.width, img.height, &depth, 1000.0)?;
                println!("rendered view {v} from {nb:?}");
            }
        }
        Command::BaLab { args: a, mode } => {
            let cfg = load_config(&a.common)?;
            let (mut model, _) = load_model(&cfg, &a.checkpoint)?;
            let data = load_scene(&cfg, a.scene.unwrap_or(cfg.eval_scene))?;
            let r = balab::run(&cfg, &mut model, &data, mode, Some(&a.common.out))?;
            match mode {
                Mode::Dbarf => println!("{}: monotone batches {:.3}", mode.name(), r.monotone_fraction()),
                _ => {
                    let (first, last) = (r.rows.first().context("no rows")?, r.rows.last().context("no rows")?);
                    println!(
                        "{}: rot {:.4} -> {:.4} deg, trans {:.5} -> {:.5} (step {})",
                        mode.name(),
                        first.rot_err_deg,
                        last.rot_err_deg,
                        first.trans_err,
                        last.trans_err,
                        last.step
                    );
                }
            }
        }
        Command::SceneGraph { common, scene } => {
            let cfg = load_config(&common)?;
            let data = load_scene(&cfg, scene.unwrap_or(cfg.eval_scene))?;
            let images: Vec<_> = data.views.iter().map(|v| v.image.clone()).collect();
            let mcfg = MatchConfig { min_matches: cfg.min_matches, seed: cfg.seed, ..MatchConfig::default() };
            let (graph, matches) = build_scene_graph(&images, &data.k, &DetectorConfig::default(), &mcfg)?;
            graph.save(&common.out.join("scene_graph.txt"))?;
            write_matches(&common.out.join("matches.txt"), &matches)?;
            for i in 0..data.views.len() {
                println!("view {i}: {:?}", graph.neighbors[i]);
            }
        }
        Command::MakeScene { common, scene } => {
            let cfg = load_config(&common)?;
            let seed = scene.unwrap_or(cfg.eval_scene);
            let data = load_scene(&cfg, seed)?;
            let (img_dir, depth_dir) = (common.out.join("images"), common.out.join("depths"));
            fs::create_dir_all(&img_dir)?;
            fs::create_dir_all(&depth_dir)?;
            for (i, v) in data.views.iter().enumerate() {
                v.image.save_png(&img_dir.join(format!("view_{i:03}.png")))?;
                save_depth_png(&depth_dir.join(format!("view_{i:03}.png")), v.image.width, v.image.height, &v.depth, 1000.0)?;
            }
            write_poses(&common.out.join("poses.txt"), &data.poses)?;
            cfg.scene_config(seed).save(&common.out.join("scene.txt"))?;
            println!("scene {seed}: {} views, diameter {:.3}", data.views.len(), data.diameter);
        }
    }
    Ok(())
}
