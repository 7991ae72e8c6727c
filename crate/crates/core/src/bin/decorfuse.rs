//! Command-line surface: scene synthesis, point decoration, training,
//! inference, evaluation and gradient checking.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use decorfuse::config::{Config, GridPreset};
use decorfuse::decoration::{decorate, write_decorated_dump};
use decorfuse::detect_loss::{format_detection, parse_detection, Detection};
use decorfuse::eval_metrics::ap_40;
use decorfuse::geometry::{parse_kitti_calib, read_kitti_bin};
use decorfuse::gradcheck::run_all;
use decorfuse::harness::{
    generate_scene, infer_scenes, load_checkpoint, load_scene, save_checkpoint, save_scene, train,
    SyntheticScene,
};
use decorfuse::image::{backbone_forward_traced, read_pnm, write_pgm};
use decorfuse::model::Model;

#[derive(Parser)]
#[command(name = "decorfuse", about = "Lidar-camera fusion 3D detection pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand that needs a configuration.
#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the grid preset.
    #[arg(long, value_parser = GridPreset::parse)]
    grid: Option<GridPreset>,
    /// Toggle an ablation flag, e.g. --ablate decoration=off. Repeatable.
    #[arg(long = "ablate", value_name = "FLAG=on|off")]
    ablate: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config, String> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                Config::from_toml(&text).map_err(|e| e.to_string())?
            }
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(g) = self.grid {
            cfg.grid = g;
        }
        for spec in &self.ablate {
            let (name, value) = spec
                .split_once('=')
                .ok_or_else(|| format!("bad --ablate {spec:?}, expected FLAG=on|off"))?;
            let on = match value {
                "on" => true,
                "off" => false,
                other => return Err(format!("bad ablation value {other:?}, expected on|off")),
            };
            let a = &mut cfg.ablation;
            match name {
                "decoration" => a.decoration = on,
                "e2e" => a.e2e = on,
                "two_sparse_conv" => a.two_sparse_conv = on,
                "heatmap_init" => a.heatmap_init = on,
                "category_embedding" => a.category_embedding = on,
                other => return Err(format!("unknown ablation flag {other:?}")),
            }
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scenes into scene_NNNN directories.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of scenes.
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decorate a point cloud with 2D backbone features and dump it.
    Decorate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// KITTI-format f32 point cloud (x y z r rows).
        #[arg(long)]
        points: PathBuf,
        /// PPM/PGM image.
        #[arg(long)]
        image: PathBuf,
        /// KITTI calibration text file.
        #[arg(long)]
        calib: PathBuf,
        /// Checkpoint supplying backbone weights; seeded weights otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output dump file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a directory of scene_NNNN subdirectories.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint.bin and train_log.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run inference over scenes, writing one detection file per scene.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A scene directory or a directory of scene_NNNN subdirectories.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the class heatmap slices as PGM images.
        #[arg(long)]
        dump_heatmap: bool,
    },
    /// Score detection files against scene ground truth.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory of detection files written by `infer`.
        #[arg(long)]
        dets: PathBuf,
        /// Directory of scene_NNNN subdirectories with ground truth.
        #[arg(long)]
        data: PathBuf,
    },
    /// Run every finite-difference suite; nonzero exit on failure.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 12345)]
        seed: u64,
    },
}

fn load_scenes(dir: &Path) -> Result<Vec<(String, SyntheticScene)>, String> {
    if dir.join("points.bin").exists() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".into());
        return Ok(vec![(name, load_scene(dir)?)]);
    }
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join("points.bin").exists())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(format!("no scene directories under {}", dir.display()));
    }
    names
        .into_iter()
        .map(|n| load_scene(&dir.join(&n)).map(|s| (n, s)))
        .collect()
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.cmd {
        Cmd::Synth { cfg, count, out } => {
            let cfg = cfg.load()?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            for i in 0..count {
                let scene = generate_scene(cfg.seed + i as u64, &cfg).map_err(|e| e.to_string())?;
                let dir = out.join(format!("scene_{i:04}"));
                save_scene(&dir, &scene).map_err(|e| e.to_string())?;
                println!("wrote {} ({} points, {} objects)", dir.display(), scene.points.len(), scene.gt.len());
            }
            std::fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| e.to_string())?;
            Ok(())
        }
        Cmd::Decorate {
            cfg,
            points,
            image,
            calib,
            checkpoint,
            out,
        } => {
            let cfg = cfg.load()?;
            let pts = read_kitti_bin(&std::fs::read(&points).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            let img = read_pnm(&std::fs::read(&image).map_err(|e| e.to_string())?)?;
            let rig = parse_kitti_calib(
                &std::fs::read_to_string(&calib).map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            let model = match checkpoint {
                Some(p) => {
                    let bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
                    load_checkpoint(&bytes, &cfg).map_err(|e| e.to_string())?.0
                }
                None => Model::seeded(&cfg, cfg.seed),
            };
            let fmap = backbone_forward_traced(&img, &model.backbone2d)
                .map_err(|e| e.to_string())?
                .out;
            let (decorated, _) =
                decorate(&pts, &fmap, &rig, (img.h, img.w)).map_err(|e| e.to_string())?;
            std::fs::write(&out, write_decorated_dump(&decorated, cfg.c_img))
                .map_err(|e| e.to_string())?;
            println!("decorated {} points -> {}", decorated.len(), out.display());
            Ok(())
        }
        Cmd::Train { cfg, data, out } => {
            let cfg = cfg.load()?;
            let scenes: Vec<SyntheticScene> =
                load_scenes(&data)?.into_iter().map(|(_, s)| s).collect();
            let (model, logs) = train(&cfg, &scenes).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let ckpt = save_checkpoint(&model, &cfg, cfg.epochs as u64);
            std::fs::write(out.join("checkpoint.bin"), ckpt).map_err(|e| e.to_string())?;
            let log_text: String = logs
                .iter()
                .map(|l| {
                    format!(
                        "epoch={} aug={} total={} heatmap={} query_cls={} reg={}\n",
                        l.epoch,
                        l.aug_active,
                        l.loss.total,
                        l.loss.l_heatmap,
                        l.loss.l_query_cls,
                        l.loss.l_reg
                    )
                })
                .collect();
            std::fs::write(out.join("train_log.txt"), &log_text).map_err(|e| e.to_string())?;
            println!(
                "trained {} epochs on {} scenes, final total loss {:.6}",
                cfg.epochs,
                scenes.len(),
                logs.last().map(|l| l.loss.total).unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Cmd::Infer {
            cfg,
            checkpoint,
            data,
            out,
            dump_heatmap,
        } => {
            let cfg = cfg.load()?;
            let bytes = std::fs::read(&checkpoint).map_err(|e| e.to_string())?;
            let (model, _) = load_checkpoint(&bytes, &cfg).map_err(|e| e.to_string())?;
            let named = load_scenes(&data)?;
            let scenes: Vec<SyntheticScene> = named.iter().map(|(_, s)| s.clone()).collect();
            let all = infer_scenes(&model, &cfg, &scenes).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            for ((name, scene), dets) in named.iter().zip(&all) {
                let text: String = dets.iter().map(|d| format_detection(d) + "\n").collect();
                std::fs::write(out.join(format!("{name}.txt")), &text)
                    .map_err(|e| e.to_string())?;
                if dump_heatmap {
                    let tr = model
                        .forward(&cfg, &scene.points, &scene.image, &scene.rig, false, 0)
                        .map_err(|e| e.to_string())?;
                    let hm = &tr.head.heatmap;
                    for cls in 0..hm.k {
                        let slice: Vec<f64> = (0..hm.nx * hm.ny)
                            .map(|idx| hm.data[idx * hm.k + cls])
                            .collect();
                        let pgm = write_pgm(&slice, hm.nx, hm.ny, 0.0, 1.0);
                        std::fs::write(out.join(format!("{name}_heatmap_cls{cls}.pgm")), pgm)
                            .map_err(|e| e.to_string())?;
                    }
                }
                println!("{name}: {} detections", dets.len());
            }
            Ok(())
        }
        Cmd::Eval { cfg, dets, data } => {
            let cfg = cfg.load()?;
            let named = load_scenes(&data)?;
            let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); cfg.k_classes];
            for (name, scene) in &named {
                let path = dets.join(format!("{name}.txt"));
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| format!("{}: {e}", path.display()))?;
                let ds: Vec<Detection> = text
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(parse_detection)
                    .collect::<Result<_, _>>()?;
                for cls in 0..cfg.k_classes {
                    if scene.gt.iter().any(|(_, c)| *c == cls) {
                        let iou = cfg.eval_iou_thresholds[cls % cfg.eval_iou_thresholds.len()];
                        per_class[cls].push(ap_40(&ds, &scene.gt, iou, cls));
                    }
                }
            }
            let mut mean_sum = 0.0;
            let mut mean_n = 0usize;
            for (cls, aps) in per_class.iter().enumerate() {
                let iou = cfg.eval_iou_thresholds[cls % cfg.eval_iou_thresholds.len()];
                if aps.is_empty() {
                    println!("class={cls} iou={iou} ap=nan scenes=0");
                    continue;
                }
                let ap = aps.iter().sum::<f64>() / aps.len() as f64;
                mean_sum += ap;
                mean_n += 1;
                println!("class={cls} iou={iou} ap={ap} scenes={}", aps.len());
            }
            if mean_n > 0 {
                println!("map={}", mean_sum / mean_n as f64);
            }
            Ok(())
        }
        Cmd::Gradcheck { instances, seed } => {
            let mut ok = true;
            for r in run_all(instances, seed) {
                println!(
                    "{}: {} ({} instances, max rel err {:.3e})",
                    r.name,
                    if r.pass { "pass" } else { "FAIL" },
                    r.instances,
                    r.max_rel_err
                );
                ok &= r.pass;
            }
            if ok {
                Ok(())
            } else {
                Err("gradient check failed".into())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
