//! End-to-end CLI checks through the library entry point (same code path
//! as the binary).

use advcl::cli::run;
use std::path::Path;

fn argv(args: &[&str]) -> Vec<String> {
    std::iter::once("advcl")
        .chain(args.iter().copied())
        .map(String::from)
        .collect()
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("desk.toml");
    std::fs::write(
        &path,
        format!(
            r#"
[run]
artifact_root = "{root}"

[dataset]
n = 16
image_size = 8
channels = 1

[encoder]
feature_dim = 8
projection_dim = 4
input_channels = 1
input_size = 8

[pretrain]
epochs = 1
batch_size = 8
warmup_epochs = 1
lambda = 0.0
k_list = [2, 3]
freq_radius = 2.0

[pretrain.budget]
steps = 1

[finetune]
epochs = 1
batch_size = 8
val_limit = 8

[finetune.budget]
steps = 1

[eval]
batch_size = 8
eps_list = [0.0, 0.03]
steps_list = [1, 2]

[eval.budget]
steps = 1
"#,
            root = dir.join("artifacts").display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn unknown_flags_exit_2() {
    assert_eq!(run(&argv(&["--no-such-flag"])), 2);
    assert_eq!(run(&argv(&["frobnicate"])), 2);
    assert_eq!(run(&argv(&[])), 2);
}

#[test]
fn eval_with_missing_checkpoint_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let code = run(&argv(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--ckpt",
        "missing.ckpt",
        "--out",
        dir.path().join("eval").to_str().unwrap(),
    ]));
    assert_eq!(code, 1);
}

#[test]
fn pretrain_twice_same_seed_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let code = run(&argv(&[
            "pretrain",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(code, 0);
    }
    let a = std::fs::read_to_string(out_a.join("metrics.jsonl")).unwrap();
    let b = std::fs::read_to_string(out_b.join("metrics.jsonl")).unwrap();
    assert_eq!(a, b);
    assert!(out_a.join("encoder.json").exists());
    assert!(out_a.join("manifest.json").exists());
}

#[test]
fn full_pipeline_through_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cfg_s = cfg.to_str().unwrap();
    let pre = dir.path().join("pre");
    assert_eq!(
        run(&argv(&[
            "simclr",
            "--config",
            cfg_s,
            "--out",
            pre.to_str().unwrap()
        ])),
        0
    );
    let ckpt = pre.join("encoder.json");

    let cluster = dir.path().join("cluster");
    assert_eq!(
        run(&argv(&[
            "cluster",
            "--config",
            cfg_s,
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--out",
            cluster.to_str().unwrap()
        ])),
        0
    );
    assert!(cluster.join("pseudo_tables.json").exists());

    let ft = dir.path().join("ft");
    assert_eq!(
        run(&argv(&[
            "finetune",
            "--config",
            cfg_s,
            "--mode",
            "slf",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--out",
            ft.to_str().unwrap()
        ])),
        0
    );
    let tuned = ft.join("finetuned.json");
    assert!(tuned.exists());

    let ev = dir.path().join("ev");
    assert_eq!(
        run(&argv(&[
            "eval",
            "--config",
            cfg_s,
            "--ckpt",
            tuned.to_str().unwrap(),
            "--out",
            ev.to_str().unwrap()
        ])),
        0
    );
    assert!(ev.join("report.json").exists());
    assert!(ev.join("report.csv").exists());
    assert!(ev.join("ra_vs_epsilon.png").exists());

    // diagnostics
    let freq = dir.path().join("freq");
    assert_eq!(
        run(&argv(&[
            "analyze",
            "freq",
            "--config",
            cfg_s,
            "--out",
            freq.to_str().unwrap()
        ])),
        0
    );
    for f in ["x.png", "x_high.png", "x_low.png"] {
        assert!(freq.join(f).exists(), "{f} missing");
    }

    let fim = dir.path().join("fim");
    assert_eq!(
        run(&argv(&[
            "analyze",
            "fim",
            "--config",
            cfg_s,
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--unit",
            "1",
            "--steps",
            "5",
            "--out",
            fim.to_str().unwrap()
        ])),
        0
    );
    assert!(fim.join("fim.png").exists());
    assert!(fim.join("trajectory.json").exists());

    let land = dir.path().join("land");
    assert_eq!(
        run(&argv(&[
            "analyze",
            "landscape",
            "--config",
            cfg_s,
            "--ckpt",
            tuned.to_str().unwrap(),
            "--cells",
            "3",
            "--batch",
            "4",
            "--steps",
            "1",
            "--out",
            land.to_str().unwrap()
        ])),
        0
    );
    assert!(land.join("landscape.csv").exists());
    assert!(land.join("landscape.png").exists());
}

#[test]
fn ablate_views_row_per_recipe() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("ablate");
    let code = run(&argv(&[
        "ablate",
        "views",
        "--recipes",
        "all",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for recipe in [
        "paired_adv",
        "paired_adv_plus_clean",
        "three_view",
        "three_view_low",
        "three_view_low_high",
        "three_view_high",
    ] {
        assert!(
            rows.iter().any(|r| r.starts_with(recipe)),
            "missing row {recipe}"
        );
    }
}

#[test]
fn bad_recipe_filter_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let code = run(&argv(&[
        "ablate",
        "views",
        "--recipes",
        "nonsense",
        "--config",
        cfg.to_str().unwrap(),
    ]));
    assert_eq!(code, 1);
}
