use std::path::Path;
use std::process::Command;

fn nasbnn(args: &[&str], out: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_nasbnn"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&o.stdout).to_string() + &String::from_utf8_lossy(&o.stderr);
    (o.status.code().unwrap_or(-1), text)
}

#[test]
fn space_stats_reports_exact_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = nasbnn(&["space-stats", "--preset", "paper"], dir.path());
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("3960359488725851308032 (~4.0e21)"), "{text}");
    assert!(text.contains("332353674695147520 (~3.3e17)"), "{text}");
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let tiny = ["--preset", "tiny", "--seed", "5"];
    let run = |cmd: &[&str], sub: &str| {
        let args: Vec<&str> = cmd.iter().chain(tiny.iter()).copied().collect();
        let (code, text) = nasbnn(&args, &d.join(sub));
        assert_eq!(code, 0, "{cmd:?}: {text}");
        text
    };
    run(&["train", "--epochs", "1"], "train");
    let ck = d.join("train/supernet.ckpt");
    let ck = ck.to_str().unwrap();
    run(&["search", "--checkpoint", ck], "search");
    let arch = d.join("search/front/arch_0.json");
    let arch = arch.to_str().unwrap();
    run(&["export", "--checkpoint", ck, "--arch", arch], "export");
    let bundle = d.join("export/subnet.ckpt");
    let bundle = bundle.to_str().unwrap();
    let a = run(&["eval", "--bundle", bundle], "eval-bundle");
    let b = run(&["eval", "--checkpoint", ck, "--arch", arch], "eval-inherit");
    let acc = |t: &str| t.split("top-1 ").nth(1).unwrap().trim().to_string();
    assert_eq!(acc(&a), acc(&b));
    run(&["finetune", "--bundle", bundle], "finetune");
    let cands = d.join("search/candidates.csv");
    let front = d.join("search/front.json");
    run(
        &[
            "report",
            "--candidates",
            cands.to_str().unwrap(),
            "--front",
            front.to_str().unwrap(),
        ],
        "report",
    );
    assert!(d.join("report/pareto.svg").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("train/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
}

#[test]
fn report_accepts_empty_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("c.csv");
    std::fs::write(&csv, "space_id,ops_m,acc,arch\n").unwrap();
    let (code, text) = nasbnn(
        &["report", "--candidates", csv.to_str().unwrap()],
        &dir.path().join("r"),
    );
    assert_eq!(code, 0, "{text}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(nasbnn(&["train", "--preset", "nope"], &d.join("a")).0, 2);
    assert_eq!(nasbnn(&["frobnicate"], &d.join("b")).0, 2);

    let cfg = d.join("missing.toml");
    std::fs::write(
        &cfg,
        "[train.dataset]\nkind = \"folder\"\ntrain = \"/nonexistent/train\"\nresolution = 12\n",
    )
    .unwrap();
    let (code, text) = nasbnn(
        &["train", "--preset", "tiny", "--config", cfg.to_str().unwrap()],
        &d.join("c"),
    );
    assert_eq!(code, 3, "{text}");

    let cfg = d.join("bad.toml");
    std::fs::write(&cfg, "[train]\nbatch_size = 0\n").unwrap();
    let (code, text) = nasbnn(
        &["train", "--preset", "tiny", "--config", cfg.to_str().unwrap()],
        &d.join("e"),
    );
    assert_eq!(code, 2, "{text}");

    let cfg = d.join("nan.toml");
    std::fs::write(&cfg, "[train]\nlr_init = 3e38\n").unwrap();
    let (code, text) = nasbnn(
        &["train", "--preset", "tiny", "--config", cfg.to_str().unwrap()],
        &d.join("f"),
    );
    assert_eq!(code, 4, "{text}");
}
