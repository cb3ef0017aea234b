use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const DATASET: &str = "synth:classes=4,per_class=6,resolution=8,seed=2";

fn nasproxy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nasproxy"))
        .args(args)
        .output()
        .expect("spawn nasproxy")
}

fn small_args(out: &Path) -> Vec<String> {
    [
        "--dataset",
        DATASET,
        "--stem-channels",
        "4",
        "--iterations",
        "5",
        "--proxy-classes",
        "4",
        "--proxy-per-class",
        "3",
        "--region-batch",
        "8",
        "--ntk-batch",
        "2",
        "--out",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([out.display().to_string()])
    .collect()
}

fn run(sub: &[&str], out: &Path) -> Output {
    let extra = small_args(out);
    let mut args: Vec<&str> = sub.to_vec();
    args.extend(extra.iter().map(String::as_str));
    let o = nasproxy(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn malformed_genotype_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    let o = nasproxy(&["score", "--genotype", "3|3|9|3|3|3", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("field 3"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_dataset_file_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    let o = nasproxy(&["score", "--genotype", "3|3|3|3|3|3", "--dataset", "cifar:/no/such/file.bin", "--out", &out]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn unknown_metric_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    let o = nasproxy(&["score", "--genotype", "3|3|3|3|3|3", "--metrics", "angle,vibes", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn score_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        run(&["score", "--genotype", "3|1|2|0|4|3"], dir);
    }
    let csv = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(csv, fs::read(b.join("metrics.csv")).unwrap());
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("genotype,param_count,"));
    assert!(a.join("manifest.json").exists());
    assert!(a.join("loss_curve.csv").exists());
}

#[test]
fn config_file_matches_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let flags = tmp.path().join("flags");
    run(&["random-search", "--n", "4", "--repeats", "2", "--metrics", "angle,loss,param", "--seed", "5"], &flags);

    let cfg = tmp.path().join("run.conf");
    fs::write(&cfg, "# same run\nn = 4\nrepeats = 2\nmetrics = angle,loss,param\nseed = 99\n").unwrap();
    let via_file = tmp.path().join("file");
    let cfg_arg = cfg.display().to_string();
    // the command-line seed overrides the file
    run(&["random-search", "--config", &cfg_arg, "--seed", "5"], &via_file);

    for f in ["summary.csv", "angle-loss-param/selections.csv", "angle-loss-param/repeat1_candidates.csv"] {
        assert_eq!(fs::read(flags.join(f)).unwrap(), fs::read(via_file.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn enumerate_lists_the_whole_space() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("space.csv");
    let p = path.display().to_string();
    let o = nasproxy(&["enumerate", "--out", &p]);
    assert!(o.status.success());
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 15625 + 1);
}

#[test]
fn prune_search_reports_a_genotype() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("prune");
    run(&["prune-search", "--ops", "1,3", "--supernet-iters", "3", "--metrics", "param"], &out);
    let picked = fs::read_to_string(out.join("selected.txt")).unwrap();
    // #Param alone keeps the convolution on every edge
    assert_eq!(picked.trim(), "3|3|3|3|3|3");
    assert!(out.join("trace.csv").exists());
}
