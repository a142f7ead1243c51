use std::path::Path;
use std::process::{Command, Output};

fn bilie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bilie"))
        .args(args)
        .args(["--log", "warn"])
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const MICRO: [&str; 2] = ["--preset", "micro"];

fn dataset(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let out = bilie(&[&["make-synthetic", "--out", p(&data), "--n-scenes", "3", "--size", "32"][..], &MICRO].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn train_eval_enhance_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let manifest = data.join("manifest.csv");
    let run = dir.path().join("run");
    let out = bilie(&[&["train", "--manifest", p(&manifest), "--out", p(&run), "--epochs", "2"][..], &MICRO].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ck = run.join("checkpoint.safetensors");
    assert!(ck.exists() && run.join("train_log.csv").exists() && run.join("config.toml").exists());

    let eval_dir = dir.path().join("eval");
    let out = bilie(&["eval", "--checkpoint", p(&ck), "--manifest", p(&manifest), "--split", "all", "--out", p(&eval_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 + 1);

    let single = dir.path().join("single.png");
    let out = bilie(&[
        "enhance",
        "--checkpoint",
        p(&ck),
        "--lowlight",
        p(&data.join("lowlight/scene_000.png")),
        "--events",
        p(&data.join("events/scene_000.txt")),
        "--out",
        p(&single),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(&single).unwrap(),
        std::fs::read(eval_dir.join("scene_000.png")).unwrap()
    );

    let bad_events = dir.path().join("bad.txt");
    std::fs::write(&bad_events, "32 32 0 1\n0.5 99 1 1\n").unwrap();
    let out = bilie(&[
        "enhance",
        "--checkpoint",
        p(&ck),
        "--lowlight",
        p(&data.join("lowlight/scene_000.png")),
        "--events",
        p(&bad_events),
        "--out",
        p(&single),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let manifest = data.join("manifest.csv");
    for extra in [
        &["--set", "train.batch_size=4"][..],
        &["--set", "model.heads=[3,4,4,4,4]"],
        &["--preset", "huge"],
        &["--set", "no_such_key=1"],
    ] {
        let out = bilie(&[&["train", "--manifest", p(&manifest)][..], extra].concat());
        assert_eq!(code(&out), 1, "{extra:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = bilie(&["ablate", "--manifest", p(&manifest), "--axis", "colour", "--out", "x.csv"]);
    assert_eq!(code(&out), 1);
    assert_eq!(code(&bilie(&["no-such-command"])), 1);
    assert_eq!(code(&bilie(&["train"])), 1);
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    assert_eq!(code(&bilie(&[&["train", "--manifest", p(&missing)][..], &MICRO].concat())), 2);
    let out = bilie(&["eval", "--checkpoint", p(&missing), "--manifest", p(&missing)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergent_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out = bilie(&[
        &["train", "--manifest", p(&data.join("manifest.csv")), "--epochs", "3", "--lr", "1e300"][..],
        &MICRO,
    ]
    .concat());
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ablate_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let csv = dir.path().join("sigma.csv");
    let out = bilie(&[
        &["ablate", "--manifest", p(&data.join("manifest.csv")), "--axis", "sigma1", "--out", p(&csv), "--epochs", "1"][..],
        &MICRO,
    ]
    .concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.starts_with("axis,label,"));
}

#[test]
fn white_balance_equalises_channel_means() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let out_png = dir.path().join("wb.png");
    let out = bilie(&["white-balance", "--input", p(&data.join("lowlight/scene_000.png")), "--out", p(&out_png)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let img = bilie::imaging::load_png(&out_png).unwrap();
    let m = img.channel_means();
    assert!((m[0] - m[1]).abs() < 0.02 && (m[2] - m[1]).abs() < 0.02, "{m:?}");

    let black = dir.path().join("black.png");
    bilie::imaging::save_png(&bilie::Tensor::zeros([3, 4, 4]), &black).unwrap();
    assert_eq!(code(&bilie(&["white-balance", "--input", p(&black), "--out", p(&out_png)])), 2);
}
