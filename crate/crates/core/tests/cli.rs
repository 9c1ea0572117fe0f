use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_linear-slam"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn files(dir: &Path, ext: &str) -> Vec<String> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v.into_iter().map(|p| p.to_string_lossy().into_owned()).collect()
}

fn value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix([' ', '='])))
        .unwrap_or_else(|| panic!("{key} missing in {text}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn complexity_prints_table_entries() {
    let o = run(&["complexity", "--og", "52288", "--sg", "7197", "--m", "10", "--n", "10"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("seq_join 0.3024\n"), "{s}");
    assert!(s.contains("dc_join 0.1680\n"), "{s}");
    let j = run(&["complexity", "--og", "52288", "--sg", "7197", "--m", "10", "--n", "100", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&j.stdout).unwrap();
    assert!((v["seq_join"].as_f64().unwrap() - 2.5502).abs() < 5e-5);
}

#[test]
fn full_pipeline_is_consistent_and_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let maps = tmp.path().join("maps");
    let d = data.to_str().unwrap();
    assert!(run(&["simulate", "--out", d, "--seed", "21"]).status.success());

    // Same seed, same bytes.
    let again = tmp.path().join("again");
    assert!(run(&["simulate", "--out", again.to_str().unwrap(), "--seed", "21"]).status.success());
    for name in ["truth.state", "chunk_000.raw", "chunk_009.raw"] {
        assert_eq!(std::fs::read(data.join(name)).unwrap(), std::fs::read(again.join(name)).unwrap());
    }

    let chunks = files(&data, "raw");
    assert_eq!(chunks.len(), 10);
    let mut args = vec!["build-maps", "--strategy", "dc", "--out", maps.to_str().unwrap()];
    args.extend(chunks.iter().map(String::as_str));
    assert!(run(&args).status.success());

    let lmaps = files(&maps, "lmap");
    let global = tmp.path().join("global.lmap");
    let mut args = vec!["join", "--strategy", "dc", "--threads", "3", "--out", global.to_str().unwrap()];
    args.extend(lmaps.iter().map(String::as_str));
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert_eq!(value(&s, "joins"), 9.0);
    assert!(s.contains("joining_s") && s.contains("overall_s"));

    let truth = data.join("truth.state");
    let mut args = vec![
        "eval",
        "--solution",
        global.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
        "--nees",
        "--rmse",
        "--chi2",
        "--json",
        "--maps",
    ];
    args.extend(lmaps.iter().map(String::as_str));
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["nees"].as_f64().unwrap() < v["nees_bound_95"].as_f64().unwrap());
    assert!(v["chi2"].as_f64().unwrap() > 0.0);

    let mut args = vec!["oracle", "--mode", "full"];
    args.extend(lmaps.iter().map(String::as_str));
    let o = run(&args);
    assert!(o.status.success());
    assert!(value(&stdout(&o), "relative_gap") < 0.05);
}

#[test]
fn noiseless_dc_join_reports_zero_chi2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    assert!(run(&["simulate", "--out", data.to_str().unwrap(), "--noiseless", "--poses", "11"]).status.success());
    let chunks = files(&data, "raw");
    assert_eq!(chunks.len(), 2);
    let maps = tmp.path().join("m");
    let mut args = vec!["build-maps", "--strategy", "dc", "--out", maps.to_str().unwrap()];
    args.extend(chunks.iter().map(String::as_str));
    assert!(run(&args).status.success());
    let lmaps = files(&maps, "lmap");
    let mut args = vec!["join", "--strategy", "dc", "--json"];
    args.extend(lmaps.iter().map(String::as_str));
    let o = run(&args);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["chi2"].as_f64().unwrap() < 1e-12);

    let mut args = vec!["oracle", "--mode", "join"];
    args.extend(lmaps.iter().map(String::as_str));
    assert!(run(&args).status.success());
}

#[test]
fn config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("s.toml");
    std::fs::write(&cfg, "dim = \"3d\"\nposes = 9\nchunk_size = 4\nseed = 5\n").unwrap();
    let out = tmp.path().join("o");
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--poses", "13", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(files(&out, "raw").len(), 3);
    let truth = std::fs::read_to_string(out.join("truth.state")).unwrap();
    assert!(truth.contains("dim 3d"));

    std::fs::write(&cfg, "bogus = 1\n").unwrap();
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn convert_pose_graph() {
    let tmp = tempfile::tempdir().unwrap();
    let g = tmp.path().join("g.g2o");
    let mut text = String::new();
    for i in 0..10 {
        text.push_str(&format!("VERTEX_SE2 {i} {i}.0 0 0\n"));
    }
    for i in 1..10 {
        text.push_str(&format!("EDGE_SE2 {} {i} 1 0 0 100 0 0 100 0 400\n", i - 1));
    }
    text.push_str("EDGE_SE2 1 9 8 0 0 100 0 0 100 0 400\n");
    std::fs::write(&g, text).unwrap();
    let out = tmp.path().join("c");
    let o = run(&["convert", g.to_str().unwrap(), "--chunk-steps", "5", "--maps", "seq", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(files(&out, "raw").len(), 2);
    let lmaps = files(&out, "lmap");
    assert_eq!(lmaps.len(), 2);
    let mut args = vec!["join"];
    args.extend(lmaps.iter().map(String::as_str));
    let o = run(&args);
    assert!(o.status.success());
    assert!(value(&stdout(&o), "chi2") < 1e-12);
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["join", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["complexity", "--og", "1", "--sg", "1", "--m", "1", "--n", "1"]).status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.lmap");
    std::fs::write(&bad, "LMAP 1\ndim 2d\n").unwrap();
    let o = run(&["join", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    // Two maps with nothing in common.
    let a = tmp.path().join("a.lmap");
    let b = tmp.path().join("b.lmap");
    std::fs::write(&a, "LMAP 1\ndim 2d\nheadings estimated\nframe pose 0\nentries 1\nfeature 1 1 2\ninfo 2\n0 0 1\n1 1 1\nend\n").unwrap();
    std::fs::write(&b, "LMAP 1\ndim 2d\nheadings estimated\nframe pose 5\nentries 1\nfeature 2 1 2\ninfo 2\n0 0 1\n1 1 1\nend\n").unwrap();
    let o = run(&["join", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5), "{}", String::from_utf8_lossy(&o.stderr));

    // A singular information matrix cannot be joined numerically.
    let c = tmp.path().join("c.lmap");
    std::fs::write(&c, "LMAP 1\ndim 2d\nheadings estimated\nframe pose 0\nentries 1\nfeature 1 1 2\ninfo 1\n0 0 1\nend\n").unwrap();
    let o = run(&["join", c.to_str().unwrap(), c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}
