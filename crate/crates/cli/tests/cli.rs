use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dtc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("dtc runs")
}

fn ok(args: &[&str]) -> String {
    let out = dtc(args);
    assert!(
        out.status.success(),
        "dtc {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.toml");
    fs::write(
        &cfg,
        "resolution = 32\nbatch_size = 4\ndamsm_epochs = 1\ngan_epochs = 1\nmax_steps = 2\n\
         embed_dim = 16\ntext_hidden = 16\nd_e = 32\nd_z = 16\nd_img = 32\ng_base_channels = 32\n\
         g_min_channels = 8\nmask_size = 8\nd_base_channels = 8\nd_backbone_channels = 32\nregion_dim = 32\n\
         roi_bins = 2\ncrop_size = 16\ndamsm_channels = 8\noracle_epochs = 1\noracle_max_crops = 64\n\
         checkpoint_every = 1\nn_candidates = 3\nretrieval_candidates = 4\noracle_threshold = 0.0\n",
    )
    .unwrap();
    let data = root.join("data");
    let runs = root.join("runs");
    let c = p(&cfg);

    ok(&["data", "gen", "--out", p(&data), "--n", "40", "--config", c, "--seed", "3"]);
    assert!(data.join("images/000000.png").exists());

    ok(&["train", "damsm", "--data", p(&data), "--out", p(&runs), "--config", c]);
    let damsm = runs.join("damsm.dtck");
    assert!(damsm.exists());
    assert!(runs.join("damsm_step1.dtck").exists());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(runs.join("damsm_report.json")).unwrap()).unwrap();
    assert_eq!(report["steps"], 2);

    ok(&["train", "gan", "--data", p(&data), "--damsm", p(&damsm), "--out", p(&runs), "--config", c]);
    let gan = runs.join("gan.dtck");
    assert!(gan.exists());
    let hist: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(runs.join("gan_history.json")).unwrap()).unwrap();
    assert_eq!(hist.len(), 2);

    // Resuming a finished run with a different config is refused.
    let out = dtc(&[
        "train", "gan", "--data", p(&data), "--damsm", p(&damsm), "--out", p(&runs), "--config", c, "--seed", "9",
        "--resume", p(&runs.join("gan_step1.dtck")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash mismatch"));

    let report = root.join("report.json");
    ok(&["eval", "--ckpt", p(&gan), "--data", p(&data), "--split", "test", "--out", p(&report)]);
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["split"], "test");
    assert!(r["frechet_image"].as_f64().unwrap().is_finite());
    assert!(r["counts"]["images"].as_u64().unwrap() > 0);

    let req = root.join("req.json");
    fs::write(
        &req,
        r#"{"regions": [{"box": [0.1, 0.1, 0.6, 0.6], "caption": "a red circle", "region_seed": 1}], "global_seed": 2}"#,
    )
    .unwrap();
    let (a, b) = (root.join("a.png"), root.join("b.png"));
    ok(&["generate", "--ckpt", p(&gan), "--request", p(&req), "--out", p(&a)]);
    ok(&["generate", "--ckpt", p(&gan), "--request", p(&req), "--out", p(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(&fs::read(&a).unwrap()[1..4], b"PNG");
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "batch_size = 1\n").unwrap();
    let out = dtc(&["data", "gen", "--out", dir.path().join("d").to_str().unwrap(), "--n", "2", "--config", p(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch size"));
    fs::write(&cfg, "colour = 3\n").unwrap();
    let out = dtc(&["data", "gen", "--out", dir.path().join("d").to_str().unwrap(), "--n", "2", "--config", p(&cfg)]);
    assert!(!out.status.success());
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk", "paper", "smoke"] {
        let text = fs::read_to_string(root.join(format!("{name}.toml"))).unwrap();
        assert_eq!(dtc_core::TrainConfig::parse(&text).unwrap(), dtc_core::TrainConfig::preset(name).unwrap());
    }
}

#[test]
fn help_lists_every_subcommand() {
    let help = ok(&["--help"]);
    for cmd in ["data", "train", "eval", "generate", "serve"] {
        assert!(help.contains(cmd), "{cmd}");
    }
    let train = ok(&["train", "--help"]);
    assert!(train.contains("damsm") && train.contains("gan"));
}
