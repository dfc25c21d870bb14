use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn kip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kip")).args(args).output().expect("binary runs")
}

fn out_dir(dir: &tempfile::TempDir, name: &str) -> String {
    dir.path().join(name).display().to_string()
}

fn distill_blobs(out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["distill", "--dataset", "blobs", "--steps", "4", "--batch", "40", "--checkpoint-every", "2", "--out", out];
    args.extend_from_slice(extra);
    kip(&args)
}

fn read_csv(path: impl AsRef<Path>) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut rows = vec![r.headers().unwrap().iter().map(String::from).collect()];
    rows.extend(r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()));
    rows
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn accuracy_of(o: &Output) -> f64 {
    let text = stdout(o);
    let word = text.split_whitespace().nth(1).unwrap_or_else(|| panic!("no accuracy in {text:?}"));
    word.trim_end_matches(',').parse().unwrap()
}

#[test]
fn zero_steps_write_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(&dir, "run");
    let o = kip(&["distill", "--dataset", "blobs", "--steps", "0", "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpts: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("ckpt_"))
        .collect();
    assert_eq!(ckpts, vec!["ckpt_000000.kip"]);
    let rows = read_csv(Path::new(&out).join("metrics.csv"));
    assert_eq!(rows[0], ["step", "loss", "test_accuracy"]);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1][0], "0");
    assert!(Path::new(&out).join("best.kip").exists());
}

#[test]
fn same_flags_and_seed_give_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (out_dir(&dir, "a"), out_dir(&dir, "b"));
    assert!(distill_blobs(&a, &["--seed", "3"]).status.success());
    assert!(distill_blobs(&b, &["--seed", "3"]).status.success());
    let metrics = |d: &str| fs::read(Path::new(d).join("metrics.csv")).unwrap();
    assert_eq!(metrics(&a), metrics(&b));
    assert_eq!(read_csv(Path::new(&a).join("metrics.csv")).len(), 4);
    for f in ["ckpt_000004.kip", "best.kip"] {
        assert_eq!(fs::read(Path::new(&a).join(f)).unwrap(), fs::read(Path::new(&b).join(f)).unwrap());
    }
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(&dir, "x");
    for args in [
        vec!["distill", "--steps", "many", "--out", &out],
        vec!["distill", "--dataset", "/no/such/place", "--out", &out],
        vec!["distill", "--dataset", "blobs", "--kernel", "resnet", "--out", &out],
        vec!["distill", "--dataset", "blobs", "--imgs-per-class", "500", "--out", &out],
        vec!["distill", "--no-such-flag"],
        vec!["frobnicate"],
    ] {
        assert_eq!(kip(&args).status.code(), Some(2), "{args:?}");
    }
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "colour = blue\n").unwrap();
    let o = kip(&["--config", cfg.to_str().unwrap(), "distill", "--dataset", "blobs", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(&dir, "run");
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "# small run\ndataset = blobs\nsteps = 3\nbatch = 30\ncheckpoint_every = 1\n").unwrap();
    let o = kip(&["distill", "--config", cfg.to_str().unwrap(), "--steps", "1", "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(Path::new(&out).join("metrics.csv"));
    assert_eq!(rows.iter().skip(1).map(|r| r[0].as_str()).collect::<Vec<_>>(), ["0", "1"]);
}

#[test]
fn malformed_checkpoints_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.kip");
    fs::write(&bad, b"KIPCKPT\0garbage").unwrap();
    let out = out_dir(&dir, "e");
    let o = kip(&["eval", "--dataset", "blobs", "--checkpoint", bad.to_str().unwrap(), "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    let missing = dir.path().join("missing.kip");
    let o = kip(&["eval", "--dataset", "blobs", "--checkpoint", missing.to_str().unwrap(), "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
}

/// Runs a short distillation, then every downstream command on its output.
#[test]
fn eval_and_analyses_read_distilled_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run = out_dir(&dir, "run");
    let o = distill_blobs(&run, &["--imgs-per-class", "2", "--kernel", "fc2", "--train-labels"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let best = Path::new(&run).join("best.kip").display().to_string();
    let last = Path::new(&run).join("ckpt_000004.kip").display().to_string();

    let out = out_dir(&dir, "eval");
    let o = kip(&["eval", "--dataset", "blobs", "--checkpoint", &last, "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval_acc = accuracy_of(&o);
    let rows = read_csv(Path::new(&out).join("eval.csv"));
    assert_eq!(rows[0], ["checkpoint", "step", "kernel", "split", "images", "accuracy"]);
    assert_eq!(rows[1][1..5], ["4", "fc2-ntk", "test", "200"]);
    // the checkpoint at step 4 is the last metrics row
    let metrics = read_csv(Path::new(&run).join("metrics.csv"));
    let logged: f64 = metrics.last().unwrap()[2].parse().unwrap();
    assert!((logged - eval_acc).abs() < 1e-3, "{logged} vs {eval_acc}");

    let o = kip(&["analyze", "spectral", "--dataset", "blobs", "--checkpoint", &last, "--bands", "4", "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(Path::new(&out).join("spectral.csv"));
    assert_eq!(rows[0], ["band", "start", "end", "accuracy", "relative_change"]);
    assert_eq!(rows.len(), 6);
    let full: f64 = rows[1][3].parse().unwrap();
    assert!((full - eval_acc).abs() <= 1.0 / 200.0 + 1e-12, "{full} vs {eval_acc}");

    let o = kip(&["analyze", "subsample", "--dataset", "blobs", "--checkpoint", &best, "--fractions", "0.5,1", "--trials", "3", "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(Path::new(&out).join("subsample.csv"));
    assert_eq!(rows[0], ["keep_fraction", "mean_accuracy", "std_accuracy", "relative_drop", "trials"]);
    assert_eq!(rows[2][0], "1");
    assert_eq!(rows[2][3].parse::<f64>().unwrap(), 0.0);

    for (what, file, cols) in [("id", "id.csv", 3), ("lindim", "lindim.csv", 3), ("graddim", "graddim.csv", 4)] {
        let o = kip(&["analyze", what, "--checkpoint", &run, "--out", &out]);
        assert!(o.status.success(), "{what}: {}", String::from_utf8_lossy(&o.stderr));
        let rows = read_csv(Path::new(&out).join(file));
        assert_eq!(rows.len(), 4, "{what}");
        assert_eq!(rows[0].len(), cols);
        assert_eq!(rows.iter().skip(1).map(|r| r[1].as_str()).collect::<Vec<_>>(), ["0", "2", "4"]);
    }
}

#[test]
fn label_solve_improves_the_train_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(&dir, "ls");
    let o = kip(&["label-solve", "--dataset", "blobs", "--support", "natural:2", "--kernel", "fc2", "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("accuracy "));
    let rows = read_csv(Path::new(&out).join("label_solve.csv"));
    assert_eq!(rows[0], ["labels", "train_loss", "test_accuracy"]);
    let loss = |r: &Vec<String>| r[1].parse::<f64>().unwrap();
    assert!(loss(&rows[2]) <= loss(&rows[1]));
    let again = out_dir(&dir, "ls2");
    assert!(kip(&["label-solve", "--dataset", "blobs", "--support", "natural:2", "--kernel", "fc2", "--out", &again]).status.success());
    assert_eq!(fs::read(Path::new(&out).join("label_solve.kip")).unwrap(), fs::read(Path::new(&again).join("label_solve.kip")).unwrap());
    // a solved checkpoint can be solved again from its file
    let ckpt = Path::new(&out).join("label_solve.kip").display().to_string();
    let o = kip(&["label-solve", "--dataset", "blobs", "--support", &ckpt, "--out", &again]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn remote_workers_reproduce_local_threads() {
    let dir = tempfile::tempdir().unwrap();
    let (local, remote) = (out_dir(&dir, "local"), out_dir(&dir, "remote"));
    let flags = [
        "distill", "--dataset", "blobs", "--kernel", "convnet2", "--imgs-per-class", "1", "--steps", "2", "--batch", "12",
        "--test-size", "40", "--block", "4",
    ];
    let mut args = flags.to_vec();
    args.extend(["--workers", "2", "--out", &local]);
    let o = kip(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let addr = format!("127.0.0.1:{}", free_port());
    let endpoint = format!("{addr}*2");
    let mut args = flags.to_vec();
    args.extend(["--out", &remote, "--workers", &endpoint]);
    let mut server = Command::new(env!("CARGO_BIN_EXE_kip")).args(&args).stderr(Stdio::piped()).spawn().unwrap();
    let mut workers = Vec::new();
    for _ in 0..2 {
        // the server may not be listening yet; workers retry until it is
        let mut attempt = 0;
        let child = loop {
            std::thread::sleep(std::time::Duration::from_millis(200));
            let mut c = Command::new(env!("CARGO_BIN_EXE_kip")).args(["worker", "--connect", &addr]).spawn().unwrap();
            std::thread::sleep(std::time::Duration::from_millis(200));
            match c.try_wait().unwrap() {
                Some(status) if !status.success() && attempt < 50 => attempt += 1,
                _ => break c,
            }
        };
        workers.push(child);
    }
    let status = server.wait().unwrap();
    assert!(status.success());
    for mut w in workers {
        assert!(w.wait().unwrap().success(), "worker exits cleanly on shutdown");
    }
    let read = |d: &str, f: &str| fs::read(PathBuf::from(d).join(f)).unwrap();
    assert_eq!(read(&local, "metrics.csv"), read(&remote, "metrics.csv"));
    assert_eq!(read(&local, "best.kip"), read(&remote, "best.kip"));
}

#[test]
fn worker_without_a_server_fails() {
    let o = kip(&["worker", "--connect", &format!("127.0.0.1:{}", free_port()), "--idle-timeout", "1"]);
    assert_eq!(o.status.code(), Some(3));
}
