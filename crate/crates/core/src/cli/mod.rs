//! Command-line front end: `generate`, `run`, `eval` and `mesh`.

mod config;

pub use config::{DatasetConfig, MeshOptions, RunConfig};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use crate::data::{load_dataset, toy_sequence, write_dump, write_tum, Dataset, Frame, SyntheticScene};
use crate::diffnet::{Checkpoint, RefView};
use crate::error::{Error, Result};
use crate::eval::{
    ate_rmse, cull_unobserved, evaluate_views, extract_mesh, mesh_accuracy_completion, nearest_keyframes,
    scene_meshes, write_ply, EvalView, MeshConfig, MeshMetrics, MeshMode, Observer, TriangleMesh,
};
use crate::field::SceneField;
use crate::geometry::Pose;
use crate::slam::{checkpoint_state, run_slam, RunOptions};

/// Exit status of a successful command.
pub const EXIT_OK: u8 = 0;
/// Bad arguments or configuration.
pub const EXIT_CONFIG: u8 = 1;
/// Anything that failed while running.
pub const EXIT_RUNTIME: u8 = 2;
/// Tracking diverged on some frame; outputs were still written.
pub const EXIT_DIVERGED: u8 = 3;

/// Marker file naming the synthetic preset a dump was generated from.
pub const PRESET_FILE: &str = "preset.txt";

#[derive(Debug, Parser)]
#[command(name = "semslam", version, about = "Semantic neural implicit RGB-D SLAM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Master seed; overrides the seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for mesh extraction.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory; overrides `output` in the config file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MeshModeArg {
    Merged,
    PerClass,
}

impl From<MeshModeArg> for MeshMode {
    fn from(m: MeshModeArg) -> Self {
        match m {
            MeshModeArg::Merged => MeshMode::Merged,
            MeshModeArg::PerClass => MeshMode::PerClass,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic sequence with ground truth and a matching config.
    Generate {
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        /// Gaussian depth noise, metres.
        #[arg(long, default_value_t = 0.0)]
        depth_noise: f64,
    },
    /// Track and map a sequence.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Skip tracking and map with ground-truth poses.
        #[arg(long)]
        gt_pose: bool,
    },
    /// Score a finished run.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `checkpoint.bin` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Compare full meshes instead of the parts the cameras observed.
        #[arg(long)]
        no_cull: bool,
    },
    /// Extract meshes from a checkpoint as PLY files.
    Mesh {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<MeshModeArg>,
    },
}

/// Parses arguments and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

pub fn execute(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Generate {
            preset,
            frames,
            depth_noise,
        } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            generate(*preset, *frames, *depth_noise, cli.seed.unwrap_or(0), &out)?;
            Ok(EXIT_OK)
        }
        Command::Run { config, gt_pose } => {
            let cfg = resolve(cli, config)?;
            let diverged = run(&cfg, *gt_pose)?;
            Ok(if diverged { EXIT_DIVERGED } else { EXIT_OK })
        }
        Command::Eval {
            config,
            checkpoint,
            no_cull,
        } => {
            let mut cfg = resolve(cli, config)?;
            if *no_cull {
                cfg.mesh.cull = false;
            }
            let rows = eval(&cfg, checkpoint.as_deref(), cli.threads.unwrap_or(1))?;
            print!("{}", metrics_table(&rows));
            Ok(EXIT_OK)
        }
        Command::Mesh {
            config,
            checkpoint,
            resolution,
            mode,
        } => {
            let mut cfg = resolve(cli, config)?;
            if let Some(r) = resolution {
                cfg.mesh.resolution = *r;
            }
            if let Some(m) = mode {
                cfg.mesh.mode = (*m).into();
            }
            cfg.validate()?;
            mesh(&cfg, checkpoint.as_deref(), cli.threads.unwrap_or(1))?;
            Ok(EXIT_OK)
        }
    }
}

/// Loads the config file and applies command-line overrides.
fn resolve(cli: &Cli, path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.resolve();
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    if cli.threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    Ok(cfg)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Writes a synthetic dump plus `config.toml` for running on it.
pub fn generate(preset: Preset, n: usize, depth_noise: f64, seed: u64, out: &Path) -> Result<()> {
    if n < 2 {
        return Err(Error::Config("generate needs at least 2 frames".into()));
    }
    if !(depth_noise >= 0.0) {
        return Err(Error::Config("depth noise must be non-negative".into()));
    }
    let Preset::Toy = preset;
    let (mut frames, k) = toy_sequence(n);
    if depth_noise > 0.0 {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for f in &mut frames {
            f.add_depth_noise(depth_noise, &mut rng)?;
        }
    }
    write_dump(&frames, &k, out)?;
    write_file(&out.join(PRESET_FILE), "toy\n")?;
    let mut cfg = RunConfig::toy(PathBuf::from("."));
    cfg.seed = seed;
    cfg.resolve();
    write_file(&out.join("config.toml"), cfg.to_toml())?;
    log::info!("wrote {n} frames to {}", out.display());
    Ok(())
}

fn load_frames(cfg: &RunConfig) -> Result<Dataset> {
    let mut ds = load_dataset(&cfg.dataset.path, cfg.dataset.layout)?;
    if let Some(n) = cfg.dataset.max_frames {
        ds.frames.truncate(n);
        if let Some(t) = &mut ds.gt_trajectory {
            t.truncate(n);
        }
    }
    Ok(ds)
}

/// Runs SLAM and writes its outputs. Returns whether any frame diverged.
pub fn run(cfg: &RunConfig, gt_pose: bool) -> Result<bool> {
    cfg.validate()?;
    let ds = load_frames(cfg)?;
    let out = &cfg.output;
    create_dir(out)?;
    write_file(&out.join("config.resolved.toml"), cfg.to_toml())?;
    write_file(&out.join("VERSION"), format!("semslam {}\n", env!("CARGO_PKG_VERSION")))?;
    let field = SceneField::new(cfg.field.clone())?;
    let opts = RunOptions {
        gt_poses: gt_pose,
        checkpoint_dir: Some(out.clone()),
    };
    let res = run_slam(&ds.frames, ds.intrinsics, field, cfg.slam.clone(), &opts)?;
    write_tum(&out.join("traj_est.txt"), &res.trajectory)?;
    res.checkpoint.save(&out.join("checkpoint.bin"))?;
    let mut buf = Vec::new();
    res.diagnostics.write_losses(&mut buf).map_err(io_err(out))?;
    write_file(&out.join("losses.csv"), &buf)?;
    buf.clear();
    res.diagnostics.write_frames(&mut buf).map_err(io_err(out))?;
    write_file(&out.join("frames.csv"), &buf)?;
    if !res.flagged.is_empty() {
        log::warn!("tracking diverged on frames {:?}", res.flagged);
    }
    Ok(!res.flagged.is_empty())
}

struct Restored {
    ds: Dataset,
    field: SceneField,
    poses: Vec<Pose>,
    keyframes: Vec<usize>,
}

fn restore(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Restored> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.join("checkpoint.bin"));
    let ck = Checkpoint::load(&path)?;
    let field = SceneField::from_checkpoint(&ck)?;
    let (poses, keyframes) = checkpoint_state(&ck)?;
    let ds = load_frames(cfg)?;
    if poses.len() != ds.frames.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} poses but the dataset has {} frames",
            poses.len(),
            ds.frames.len()
        )));
    }
    Ok(Restored {
        ds,
        field,
        poses,
        keyframes,
    })
}

/// One line of `metrics.csv`; `value` is `None` when the metric cannot be
/// computed for this dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: &'static str,
    pub value: Option<f64>,
    pub unit: &'static str,
    pub note: String,
}

impl MetricRow {
    fn new(name: &'static str, value: Option<f64>, unit: &'static str, note: impl Into<String>) -> Self {
        Self {
            name,
            value,
            unit,
            note: note.into(),
        }
    }
}

fn gt_poses(frames: &[Frame]) -> Option<Vec<Pose>> {
    frames.iter().map(|f| f.gt_pose).collect()
}

fn preset_of(dir: &Path) -> Option<String> {
    std::fs::read_to_string(dir.join(PRESET_FILE)).ok().map(|s| s.trim().to_string())
}

fn extract(field: &SceneField, opts: &MeshOptions, threads: usize) -> Result<Vec<TriangleMesh>> {
    let mcfg = MeshConfig {
        resolution: opts.resolution,
        threads,
        ..MeshConfig::default()
    };
    extract_mesh(field, &mcfg, opts.mode)
}

/// Computes all metrics and writes `metrics.csv` to the output directory.
pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, threads: usize) -> Result<Vec<MetricRow>> {
    cfg.validate()?;
    let r = restore(cfg, checkpoint)?;
    let frames = &r.ds.frames;
    let k = r.ds.intrinsics;
    let gt = gt_poses(frames);
    let mut rows = Vec::new();

    rows.push(match &gt {
        Some(gt) => MetricRow::new("ate_rmse", Some(ate_rmse(&r.poses, gt)?), "cm", ""),
        None => MetricRow::new("ate_rmse", None, "cm", "absent: no ground-truth trajectory"),
    });

    let features: Vec<_> = r
        .keyframes
        .iter()
        .map(|i| {
            let f = &frames[*i];
            (*i, Arc::new(r.field.image_features(&f.rgb, f.width, f.height)))
        })
        .collect();
    let views: Vec<EvalView> = frames
        .iter()
        .enumerate()
        .map(|(i, f)| EvalView {
            frame: f,
            pose: gt.as_ref().map_or(r.poses[i], |g| g[i]),
            refs: nearest_keyframes(&r.keyframes, i, 2)
                .into_iter()
                .map(|j| {
                    let feats = &features.iter().find(|(kf, _)| *kf == j).expect("keyframe features").1;
                    RefView::new(&r.poses[j], k, feats.clone())
                })
                .collect(),
        })
        .collect();
    let vm = evaluate_views(&r.field, &views, &k, &cfg.eval)?;
    let pose_note = if gt.is_some() { "rendered at ground-truth poses" } else { "rendered at estimated poses" };
    rows.push(MetricRow::new("depth_l1", vm.depth_l1, "cm", pose_note));
    rows.push(MetricRow::new("miou", vm.miou, "%", pose_note));

    let reference = match preset_of(&cfg.dataset.path).as_deref() {
        Some("toy") => Some(TriangleMesh::merge(&scene_meshes(&SyntheticScene::toy(), 5))),
        _ => None,
    };
    match reference {
        Some(reference) => {
            let pred = TriangleMesh::merge(&extract(&r.field, &cfg.mesh, threads)?);
            let (pred, reference) = if cfg.mesh.cull {
                let est: Vec<Observer> =
                    frames.iter().zip(&r.poses).map(|(f, p)| Observer { pose: *p, frame: Some(f) }).collect();
                let truth: Vec<Observer> = frames
                    .iter()
                    .zip(gt.as_deref().unwrap_or(&r.poses))
                    .map(|(f, p)| Observer { pose: *p, frame: Some(f) })
                    .collect();
                (
                    cull_unobserved(&pred, &est, &k, cfg.mesh.cull_margin),
                    cull_unobserved(&reference, &truth, &k, cfg.mesh.cull_margin),
                )
            } else {
                (pred, reference)
            };
            let note = if cfg.mesh.cull { "culled to observed regions" } else { "full meshes" };
            let m: Option<MeshMetrics> = if pred.is_empty() {
                None
            } else {
                Some(mesh_accuracy_completion(&pred, &reference, cfg.mesh.metric_samples, cfg.mesh.threshold_cm, cfg.seed)?)
            };
            let note = if m.is_some() { note.to_string() } else { "absent: predicted mesh is empty".into() };
            rows.push(MetricRow::new("mesh_accuracy", m.as_ref().map(|m| m.accuracy), "cm", note.clone()));
            rows.push(MetricRow::new("mesh_completion", m.as_ref().map(|m| m.completion), "cm", note.clone()));
            rows.push(MetricRow::new("mesh_completion_ratio", m.as_ref().map(|m| m.completion_ratio), "%", note));
        }
        None => {
            for (name, unit) in [("mesh_accuracy", "cm"), ("mesh_completion", "cm"), ("mesh_completion_ratio", "%")] {
                rows.push(MetricRow::new(name, None, unit, "absent: no reference mesh"));
            }
        }
    }
    create_dir(&cfg.output)?;
    write_file(&cfg.output.join("metrics.csv"), metrics_csv(&rows))?;
    Ok(rows)
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,value,unit,note\n");
    for r in rows {
        let v = r.value.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(s, "{},{v},{},{}", r.name, r.unit, r.note).expect("string write");
    }
    s
}

pub fn metrics_table(rows: &[MetricRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let v = r.value.map(|v| format!("{v:10.3} {:<2}", r.unit)).unwrap_or_else(|| format!("{:>13}", "-"));
        writeln!(s, "{:<22}{v}  {}", r.name, r.note).expect("string write");
    }
    s
}

/// Writes `mesh_class_{id}.ply` per class, or `mesh_merged.ply`.
pub fn mesh(cfg: &RunConfig, checkpoint: Option<&Path>, threads: usize) -> Result<Vec<PathBuf>> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.join("checkpoint.bin"));
    let field = SceneField::from_checkpoint(&Checkpoint::load(&path)?)?;
    let meshes = extract(&field, &cfg.mesh, threads)?;
    create_dir(&cfg.output)?;
    let names: Vec<String> = match cfg.mesh.mode {
        MeshMode::Merged => vec!["mesh_merged.ply".into()],
        MeshMode::PerClass => field.class_ids().iter().map(|c| format!("mesh_class_{c}.ply")).collect(),
    };
    let mut written = Vec::new();
    for (m, name) in meshes.iter().zip(names) {
        let p = cfg.output.join(name);
        write_ply(m, &p)?;
        written.push(p);
    }
    Ok(written)
}
