use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_camalkit"));
    for (k, _) in std::env::vars() {
        if k.starts_with("CAMALKIT_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.clone(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn small_dataset(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = dir.join("spec.toml");
    fs::write(&spec, "image_size = [32, 32]\nsamples_per_class = 5\nseed = 3\n").unwrap();
    let data = dir.join("small");
    let pseudo = dir.join("pseudo");
    ok(&run(&["--out", p(&data), "generate-data", "--spec", p(&spec), "--pseudo-masks", p(&pseudo)]));
    (data, pseudo)
}

fn experiment(dir: &Path, data: &Path, method: &str, extra: &str) -> PathBuf {
    let cfg = dir.join(format!("{method}.toml"));
    fs::write(
        &cfg,
        format!("[data]\nroot = {:?}\nresize = [32, 32]\ncrop = [32, 32]\nfolds = 5\n\n[train]\nmethod = \"{method}\"\nepochs = 1\nbatch_size = 8\n{extra}\n[eval]\nbootstrap_resamples = 1000\nk_step = 25\n", p(data)),
    )
    .unwrap();
    cfg
}

#[test]
fn generate_data_writes_layout_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&run(&["--out", p(&a), "generate-data"]));
    ok(&run(&["--out", p(&b), "generate-data"]));
    let images = fs::read_dir(a.join("images")).unwrap().count();
    let masks = fs::read_dir(a.join("masks")).unwrap().count();
    assert_eq!((images, masks), (180, 180));
    let labels = fs::read_to_string(a.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 181);
    for sub in ["images", "masks"] {
        for e in fs::read_dir(a.join(sub)).unwrap() {
            let name = e.unwrap().file_name();
            assert_eq!(fs::read(a.join(sub).join(&name)).unwrap(), fs::read(b.join(sub).join(&name)).unwrap());
        }
    }
    assert_eq!(labels, fs::read_to_string(b.join("labels.csv")).unwrap());
    assert!(a.join("manifest.json").is_file());

    let again = run(&["--out", p(&a), "generate-data"]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));
    ok(&run(&["--out", p(&a), "--force", "generate-data"]));
}

#[test]
fn config_errors_are_validation_failures() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = small_dataset(dir.path());
    let prior = experiment(dir.path(), &data, "prior", "");
    let out = run(&["--out", p(&dir.path().join("o")), "train", "--config", p(&prior)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("pseudo_mask_dir"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, format!("[data]\nroot = {:?}\nfoo = 1\n\n[train]\nepoch = 3\n", p(&data))).unwrap();
    let out = run(&["--out", p(&dir.path().join("o")), "train", "--config", p(&bad)]);
    assert_eq!(code(&out), 2);
    let msg = stderr(&out);
    assert!(msg.contains("data.foo") && msg.contains("train.epoch"), "{msg}");
}

#[test]
fn train_resume_evaluate_and_hash_check() {
    let dir = tempfile::tempdir().unwrap();
    let (data, pseudo) = small_dataset(dir.path());
    let out = dir.path().join("out");
    let extra = format!("mask_source = \"external-directory\"\npseudo_mask_dir = {:?}\n", p(&pseudo));
    let cfg = experiment(dir.path(), &data, "prior", &extra);
    let inputs = (tree(&data), tree(&pseudo), fs::read(&cfg).unwrap());
    ok(&run(&["--out", p(&out), "train", "--config", p(&cfg), "--folds", "0-1"]));
    let run_dir = out.join("runs").join("small").join("prior");
    for f in
        ["config.toml", "manifest.json", "folds.json", "0/weights.bin", "0/log.csv", "0/config.snapshot", "0/timing.json", "1/weights.bin"]
    {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    assert!(!run_dir.join("2").exists());
    let w0 = fs::read(run_dir.join("0/weights.bin")).unwrap();

    let resumed = run(&["--out", p(&out), "--jobs", "2", "train", "--config", p(&cfg), "--folds", "0-2"]);
    ok(&resumed);
    let stdout = String::from_utf8_lossy(&resumed.stdout);
    assert!(stdout.contains("fold 0: already complete") && stdout.contains("fold 1: already complete"), "{stdout}");
    assert!(run_dir.join("2/weights.bin").is_file());
    assert_eq!(fs::read(run_dir.join("0/weights.bin")).unwrap(), w0);

    for which in ["align", "accuracy", "faith"] {
        ok(&run(&["evaluate", "--run", p(&run_dir), which]));
        assert!(run_dir.join("eval").join(which).join("manifest.json").is_file());
    }
    let table = fs::read_to_string(run_dir.join("eval/align/table.md")).unwrap();
    assert!(table.contains("| prior |") && table.contains(" ± "), "{table}");
    let acc = fs::read_to_string(run_dir.join("eval/accuracy/accuracy.csv")).unwrap();
    assert_eq!(acc.lines().count(), 4);
    let plots: Vec<_> = fs::read_dir(run_dir.join("eval/faith"))
        .unwrap()
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".png"))
        .collect();
    assert_eq!(plots.len(), 2, "{plots:?}");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("eval/faith/summary.json")).unwrap()).unwrap();
    assert!(summary["removal_auc"]["point"].is_number());
    assert_eq!(summary["max_endpoint_error"].as_f64(), Some(0.0));
    assert!(inputs == (tree(&data), tree(&pseudo), fs::read(&cfg).unwrap()), "inputs changed");

    let text = fs::read_to_string(&cfg).unwrap().replace("epochs = 1", "epochs = 2");
    fs::write(&cfg, text).unwrap();
    let refused = run(&["--out", p(&out), "train", "--config", p(&cfg)]);
    assert_eq!(code(&refused), 2, "{}", stderr(&refused));

    let snapshot = run_dir.join("config.toml");
    let edited = fs::read_to_string(&snapshot).unwrap().replace("k_step = 25", "k_step = 50");
    fs::write(&snapshot, edited).unwrap();
    let refused = run(&["evaluate", "--run", p(&run_dir), "align"]);
    assert_eq!(code(&refused), 2);
    assert!(stderr(&refused).contains("hash"));
}

#[test]
fn evaluate_without_weights_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = small_dataset(dir.path());
    let out = dir.path().join("out");
    ok(&run(&["--out", p(&out), "train", "--config", p(&experiment(dir.path(), &data, "vanilla", "")), "--folds", "0"]));
    let run_dir = out.join("runs/small/vanilla");
    fs::remove_file(run_dir.join("0/weights.bin")).unwrap();
    let r = run(&["evaluate", "--run", p(&run_dir), "accuracy"]);
    assert_eq!(code(&r), 3);
    assert!(stderr(&r).contains("weights"));
}

#[test]
fn env_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = small_dataset(dir.path());
    let out = dir.path().join("out");
    let cfg = experiment(dir.path(), &data, "vanilla", "");
    let r = bin()
        .args(["train", "--config", p(&cfg), "--folds", "0"])
        .env("CAMALKIT_OUT", p(&out))
        .env("CAMALKIT_TRAIN__EPOCHS", "2")
        .output()
        .unwrap();
    ok(&r);
    let snapshot = fs::read_to_string(out.join("runs/small/vanilla/config.toml")).unwrap();
    assert!(snapshot.contains("epochs = 2"), "{snapshot}");
}

fn keyed(path: &Path, rows: &[(usize, f64)]) {
    let mut s = String::from("fold,iou\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{v}\n"));
    }
    fs::write(path, s).unwrap();
}

#[test]
fn stats_commands() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    keyed(&a, &(0..10).map(|i| (i, 0.5 + 0.01 * i as f64)).collect::<Vec<_>>());
    keyed(&b, &(0..10).map(|i| (i, 0.2 + 0.02 * i as f64)).collect::<Vec<_>>());
    keyed(&c, &(0..9).map(|i| (i, 0.2)).collect::<Vec<_>>());
    let out = dir.path().join("w");
    let r = run(&["--out", p(&out), "stats", "wsrt", "--a", p(&a), "--b", p(&b)]);
    ok(&r);
    assert!(String::from_utf8_lossy(&r.stdout).contains("significant at p < 0.05"));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("wsrt.json")).unwrap()).unwrap();
    assert!((rep["outcome"]["p_value"].as_f64().unwrap() - 1.0 / 1024.0).abs() < 1e-12);
    assert!(out.join("manifest.json").is_file());

    let r = run(&["--out", p(&dir.path().join("x")), "stats", "wsrt", "--a", p(&a), "--b", p(&c)]);
    assert_eq!(code(&r), 3);
    assert!(stderr(&r).contains("paired"));

    let m = dir.path().join("m.csv");
    fs::write(&m, "stratum,0,1,2\ns0,0.1,0.4,0.3\ns1,0.9,0.2,0.5\n").unwrap();
    let out = dir.path().join("p");
    ok(&run(&["--out", p(&out), "stats", "poi", "--a", p(&m), "--b", p(&m), "--resamples", "1000"]));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("poi.json")).unwrap()).unwrap();
    assert_eq!(rep["outcome"]["ci"]["point"].as_f64(), Some(0.5));
    assert_eq!(rep["outcome"]["significant"].as_bool(), Some(false));
    let lo = rep["outcome"]["ci"]["low"].as_f64().unwrap();
    let hi = rep["outcome"]["ci"]["high"].as_f64().unwrap();
    assert!(lo <= 0.5 && 0.5 <= hi);

    let out = dir.path().join("s");
    ok(&run(&["--out", p(&out), "stats", "sbci", "--input", p(&m), "--resamples", "1000"]));
    assert!(out.join("sbci.json").is_file() && out.join("sbci.txt").is_file());
}

#[test]
fn perturb_study_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("study");
    ok(&run(&["--out", p(&out), "perturb-study", "--n", "12", "--overlays"]));
    let md = fs::read_to_string(out.join("report.md")).unwrap();
    assert_eq!(md.lines().count(), 2 + 3 * 2);
    assert!(md.contains("| erode | suppress-only | — | — |"), "{md}");
    for k in ["shift", "erode", "dilate"] {
        assert!(out.join("overlays").join(format!("{k}.png")).is_file());
    }
}

#[test]
fn bench_overhead_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    ok(&run(&["--out", p(&out), "bench-overhead", "--models", "cnn", "--batch-sizes", "1,4,8", "--repeats", "1"]));
    for f in
        ["extraction.csv", "steps.csv", "report.json", "extraction.svg", "extraction.png", "overhead.svg", "overhead.png", "manifest.json"]
    {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let r = run(&["--out", p(&dir.path().join("b2")), "bench-overhead", "--models", "resnet", "--repeats", "1"]);
    assert_eq!(code(&r), 2);
}

#[test]
fn smoke_profile_produces_inventory_and_stable_stats() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&run(&["--out", p(&a), "repro", "smoke"]));
    ok(&run(&["--out", p(&b), "repro", "smoke"]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("acceptance_report.json")).unwrap()).unwrap();
    assert_eq!(report["missing_artifacts"].as_array().map(Vec::len), Some(0));
    for model in ["cnn", "vit"] {
        for s in ["poi_iou/poi.json", "sbci_iou_camal/sbci.json", "sbci_iou_vanilla/sbci.json"] {
            let rel = Path::new(model).join("stats").join(s);
            assert_eq!(fs::read(a.join(&rel)).unwrap(), fs::read(b.join(&rel)).unwrap(), "{}", rel.display());
        }
    }
}
