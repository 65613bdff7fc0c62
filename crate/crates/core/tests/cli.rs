use mpnet_lab::cli::run;

fn call(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["mpnet-lab"];
    argv.extend_from_slice(args);
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

#[test]
fn info_prints_fractions() {
    let (code, out, _) = call(&["info", "--mode", "mpnet", "--ratio", "0.15"]);
    assert_eq!(code, 0);
    assert_eq!(out, "tokens 92.5% positions 100%\n");
    let (_, out, _) = call(&["info", "--mode", "mlm"]);
    assert_eq!(out, "tokens 85% positions 100%\n");
    let (_, out, _) = call(&["info", "--mode", "plm"]);
    assert_eq!(out, "tokens 92.5% positions 92.5%\n");
}

#[test]
fn mask_dump_prints_layout() {
    let (code, out, _) = call(&[
        "mask-dump", "--n", "6", "--c", "3", "--perm", "1,3,5,4,6,2", "--mode", "mpnet",
    ]);
    assert_eq!(code, 0);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[1], "tokens (x1, x3, x5, [M], [M], [M], x4, x6, x2)");
    assert_eq!(lines[2], "positions (p1, p3, p5, p4, p6, p2, p4, p6, p2)");
}

#[test]
fn bad_permutation_is_a_runtime_failure_naming_the_flag() {
    let (code, _, err) = call(&["mask-dump", "--n", "3", "--c", "1", "--perm", "1,1,2"]);
    assert_eq!(code, 2);
    assert!(err.contains("--perm"), "{err}");
}

#[test]
fn missing_config_is_usage_error() {
    let (code, _, err) = call(&["pretrain", "--mode", "mpnet"]);
    assert_eq!(code, 1);
    assert!(err.contains("--config"), "{err}");
}

#[test]
fn unreadable_config_is_runtime_failure() {
    let (code, _, err) = call(&["pretrain", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(code, 2);
    assert!(err.contains("/nonexistent/run.cfg"), "{err}");
}

#[test]
fn help_exits_zero() {
    let (code, out, _) = call(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("mask-dump"));
    let (code, _, _) = call(&["pretrain", "--help"]);
    assert_eq!(code, 0);
}

#[test]
fn pretrain_finetune_and_probe_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = mpnet_lab::synthetic::toy_corpus(24, 20, 4, 7, 5);
    std::fs::write(dir.path().join("corpus.txt"), corpus.join("\n")).unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        "corpus = corpus.txt\nout = out\nlayers = 2\nhidden = 16\nheads = 2\nffn = 32\n\
         total_steps = 6\nbatch_size = 4\nmax_len = 32\ncheckpoint_every = 3\n",
    )
    .unwrap();
    let cfg = dir.path().join("run.cfg");
    let (code, out, err) = call(&["pretrain", "--config", cfg.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().filter(|l| l.starts_with("step=")).count(), 6);
    let ckpt = dir.path().join("out").join("final");
    assert!(dir.path().join("out").join("ckpt-0000003").exists());

    let tsv: String = mpnet_lab::synthetic::marker_task(40, 20, 1, 5)
        .iter()
        .map(|e| format!("{}\t{}\n", e.label, e.text))
        .collect();
    std::fs::write(dir.path().join("task.tsv"), tsv).unwrap();
    let data = dir.path().join("task.tsv");
    let (code, out, err) = call(&[
        "finetune", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--epochs", "1",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("(unchanged)"), "{out}");

    let (code, out, err) = call(&["probe", "--ckpt", ckpt.to_str().unwrap(), "--n", "4"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.matches("matches mask closure: yes").count(), 4);
}
