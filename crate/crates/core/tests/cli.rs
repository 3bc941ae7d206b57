use std::path::Path;

use semslam::cli::{main_with_args, RunConfig, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME};
use semslam::data::read_tum;
use semslam::eval::read_ply;

fn cli(args: &[&str]) -> u8 {
    main_with_args(std::iter::once("semslam").chain(args.iter().copied()))
}

/// Shrinks the generated config so the whole pipeline runs in seconds.
fn shrink(config: &Path) {
    let mut cfg = RunConfig::parse(&std::fs::read_to_string(config).unwrap()).unwrap();
    cfg.slam.init_iters = 5;
    cfg.slam.map_iters = 3;
    cfg.slam.track_iters = 3;
    cfg.slam.new_class_iters = 3;
    cfg.slam.pixels_track = 50;
    cfg.slam.pixels_map = 100;
    cfg.eval.samples = 16;
    cfg.eval.stride = 3;
    cfg.mesh.resolution = 12;
    cfg.mesh.metric_samples = 500;
    std::fs::write(config, cfg.to_toml()).unwrap();
}

#[test]
fn generate_run_eval_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    let (data_s, out_s) = (data.to_str().unwrap(), out.to_str().unwrap());
    assert_eq!(cli(&["generate", "--frames", "6", "--out", data_s]), EXIT_OK);
    assert!(data.join("traj_gt.txt").exists() && data.join("preset.txt").exists());
    let config = data.join("config.toml");
    shrink(&config);
    let config_s = config.to_str().unwrap();

    let code = cli(&["run", "--config", config_s, "--out", out_s, "--seed", "3"]);
    assert!(code == EXIT_OK || code == 3, "run exited with {code}");
    for f in ["config.resolved.toml", "VERSION", "traj_est.txt", "checkpoint.bin", "losses.csv", "frames.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert_eq!(read_tum(&out.join("traj_est.txt")).unwrap().len(), 6);
    let resolved = RunConfig::parse(&std::fs::read_to_string(out.join("config.resolved.toml")).unwrap()).unwrap();
    assert_eq!((resolved.seed, resolved.slam.seed), (3, 3));

    assert_eq!(cli(&["eval", "--config", config_s, "--out", out_s]), EXIT_OK);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    for m in ["ate_rmse,", "depth_l1,", "miou,", "mesh_accuracy,", "mesh_completion,", "mesh_completion_ratio,"] {
        assert!(csv.contains(m), "{m} missing from\n{csv}");
    }
    // Barely trained fields may have no surface yet; rows then say why.
    let mesh_row = csv.lines().find(|l| l.starts_with("mesh_accuracy,")).unwrap();
    assert!(mesh_row.contains("culled") || mesh_row.contains("absent"), "{mesh_row}");
    assert_eq!(cli(&["eval", "--config", config_s, "--out", out_s, "--no-cull"]), EXIT_OK);

    assert_eq!(cli(&["mesh", "--config", config_s, "--out", out_s, "--mode", "merged"]), EXIT_OK);
    read_ply(&out.join("mesh_merged.ply")).unwrap();
    assert_eq!(cli(&["mesh", "--config", config_s, "--out", out_s, "--resolution", "10"]), EXIT_OK);
    let per_class: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.starts_with("mesh_class_"))
        .collect();
    assert!(!per_class.is_empty());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["--help"]), EXIT_OK);
    assert_eq!(cli(&["frobnicate"]), EXIT_CONFIG);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[slam]\nno_such_key = 1\n").unwrap();
    assert_eq!(cli(&["run", "--config", bad.to_str().unwrap()]), EXIT_CONFIG);
    let missing = dir.path().join("missing.toml");
    assert_eq!(cli(&["run", "--config", missing.to_str().unwrap()]), EXIT_CONFIG);
    // Valid config, but the dataset directory does not exist.
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[dataset]\npath = \"nowhere\"\n").unwrap();
    let out = dir.path().join("o");
    assert_eq!(cli(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), EXIT_RUNTIME);
    assert_eq!(cli(&["generate", "--frames", "1", "--out", out.to_str().unwrap()]), EXIT_CONFIG);
}
