use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shadow_inpaint::checkpoint::save_generator;
use shadow_inpaint::cli::{EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE};
use shadow_inpaint::config::ExperimentConfig;
use shadow_inpaint::data::{generate_synthetic_shadow_sized, load_triplet_dataset_sized};
use shadow_inpaint::networks::Generator;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_shadow-inpaint"));
    c.env("RUST_LOG", "off");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn tiny_config(dir: &Path, edit: impl FnOnce(&mut ExperimentConfig)) -> PathBuf {
    let mut cfg = ExperimentConfig::preset("desk-scale").unwrap();
    cfg.out_dir = dir.join("out");
    cfg.model.base_channels = 4;
    cfg.model.resnet_blocks = 1;
    cfg.data.image_size = 16;
    cfg.data.inpaint_count = 4;
    cfg.data.inpaint_val_count = 2;
    cfg.data.shadow_train_count = 4;
    cfg.data.shadow_test_count = 3;
    for stage in [&mut cfg.pretrain, &mut cfg.finetune] {
        stage.iterations = 4;
        stage.batch_size = 2;
        stage.checkpoint_every = 2;
        stage.discriminator_channels = 4;
        stage.extractor_channels = [4, 4, 4, 4, 4];
    }
    edit(&mut cfg);
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(code(&run(&["--config", "/nonexistent/cfg.toml", "show-config"])), EXIT_USAGE);
    assert_eq!(code(&run(&["no-such-command"])), EXIT_USAGE);
    assert_eq!(code(&run(&["--out", out, "synth", "--count", "0"])), EXIT_USAGE);
    assert_eq!(code(&run(&["--out", out, "synth", "--count", "1", "--size", "30"])), EXIT_USAGE);
    assert_eq!(code(&run(&["--out", out, "--fraction", "1.5", "show-config"])), EXIT_USAGE);
    assert_eq!(code(&run(&["--out", out, "ablate", "--variant", "bogus"])), EXIT_USAGE);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\nunknown_key = 2\n").unwrap();
    assert_eq!(code(&run(&["--config", s(&bad), "show-config"])), EXIT_USAGE);
}

#[test]
fn show_config_round_trips_the_preset() {
    let out = run(&["show-config"]);
    assert_eq!(code(&out), EXIT_OK);
    let parsed = ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(parsed, ExperimentConfig::preset("desk-scale").unwrap());
}

#[test]
fn synth_is_reproducible_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = run(&["--out", s(d), "--seed", "5", "synth", "--count", "3", "--size", "16", "--split", "test"]);
        assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut files = 0;
    for sub in ["shadow", "shadow_free", "mask"] {
        for entry in fs::read_dir(a.join("test").join(sub)).unwrap() {
            let p = entry.unwrap().path();
            let twin = b.join("test").join(sub).join(p.file_name().unwrap());
            assert_eq!(fs::read(&p).unwrap(), fs::read(twin).unwrap());
            files += 1;
        }
    }
    assert_eq!(files, 9);

    let loaded = load_triplet_dataset_sized(&a, "test", 16).unwrap();
    let generated = generate_synthetic_shadow_sized(5, 3, 16).unwrap();
    for (l, g) in loaded.iter().zip(&generated) {
        assert_eq!(l.shadow, g.shadow.quantized());
        assert_eq!(l.shadow_free, g.shadow_free.quantized());
        assert_eq!(l.mask, g.mask);
    }
}

#[test]
fn eval_json_and_csv_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), |_| {});
    let out = run(&["--config", s(&cfg), "eval", "--mask-source", "otsu"]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let eval_dir = dir.path().join("out/eval");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(json["mask_source"], "otsu");
    assert_eq!(json["images_evaluated"], 3);
    let csv = fs::read_to_string(eval_dir.join("eval.csv")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), csv);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("region,rmse,psnr,ssim"));
    let regions = json["regions"].as_array().unwrap();
    assert_eq!(regions.len(), 3);
    for (line, region) in lines.zip(regions) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], region["region"].as_str().unwrap());
        for (i, key) in ["rmse", "psnr", "ssim"].iter().enumerate() {
            assert_eq!(cols[i + 1].parse::<f64>().unwrap(), region[key].as_f64().unwrap());
        }
    }
}

#[test]
fn pretrain_then_finetune_then_visualize() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), |_| {});
    let out = run(&["--config", s(&cfg), "pretrain"]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let pre = dir.path().join("out/pretrain");
    for f in ["pretrain_loss.csv", "pretrain_manifest.json", "checkpoints/pretrain_00000002.json", "checkpoints/pretrain_final.json"] {
        assert!(pre.join(f).exists(), "{f}");
    }
    let init = pre.join("checkpoints/pretrain_final.json");
    let out = run(&["--config", s(&cfg), "finetune", "--init", s(&init)]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = dir.path().join("out/finetune/checkpoints/finetune_final.json");
    assert!(ckpt.exists());

    let data = dir.path().join("data");
    assert_eq!(code(&run(&["--out", s(&data), "synth", "--count", "1", "--size", "16"])), EXIT_OK);
    let image = data.join("train/shadow/00000.png");
    let mask = data.join("train/mask/00000.png");
    let gt = data.join("train/shadow_free/00000.png");
    let vis = |extra: &[&str]| {
        let mut args = vec!["--config", s(&cfg), "visualize", "--checkpoint", s(&ckpt), "--image", s(&image), "--mask", s(&mask)];
        args.extend_from_slice(extra);
        run(&args)
    };
    assert_eq!(code(&vis(&[])), EXIT_USAGE);
    let out = vis(&["--gt", s(&gt)]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let vis_dir = dir.path().join("out/visualize");
    for f in ["restored.png", "w1.png", "w2.png", "lab_a_diff.png", "lab_b_diff.png"] {
        let img = image::open(vis_dir.join(f)).unwrap();
        assert_eq!((img.width(), img.height()), (16, 16), "{f}");
    }
}

#[test]
fn visualize_without_difference_maps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), |_| {});
    let parsed = ExperimentConfig::load(s(&cfg)).unwrap();
    let ckpt = dir.path().join("init.json");
    save_generator(&Generator::build(&parsed.model.generator_config(), 0).unwrap(), &ckpt).unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&run(&["--out", s(&data), "synth", "--count", "1", "--size", "24"])), EXIT_OK);
    let out = run(&[
        "--config",
        s(&cfg),
        "visualize",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&data.join("train/shadow/00000.png")),
        "--mask",
        s(&data.join("train/mask/00000.png")),
        "--no-diff",
    ]);
    assert_eq!(code(&out), EXIT_OK, "{}", String::from_utf8_lossy(&out.stderr));
    let written: Vec<_> = fs::read_dir(dir.path().join("out/visualize")).unwrap().collect();
    assert_eq!(written.len(), 3);
}

#[test]
fn divergent_training_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), |c| {
        c.finetune.learning_rate = 1e308;
        c.finetune.checkpoint_every = 1;
    });
    let out = run(&["--config", s(&cfg), "finetune"]);
    assert_eq!(code(&out), EXIT_NUMERICAL, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/finetune/finetune_manifest.json")).unwrap()).unwrap();
    assert!(manifest["status"].to_string().contains("aborted"), "{}", manifest["status"]);
}
