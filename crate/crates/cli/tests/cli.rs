use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uqsep::evalkit::region_to_mask;
use uqsep::problems::toy_problem;
use uqsep::umap::{BinaryMask, GridSpec, MapKind, MapOutput, UncertaintyMap};

const SMALL: &str = r#"seed = 3

[problem]
n_points = 300

[surrogate]
kind = "eqr"
n_members = 2

[surrogate.network]
hidden = [8]

[surrogate.train]
epochs = 3

[separation]
iterations = 2
grid_resolution = 12
"#;

fn uqsep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uqsep")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_writes_the_default_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gen");
    let o = uqsep(&["generate", "--seed", "4", "--out", s(&out), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    assert!(o.stderr.is_empty());
    let text = std::fs::read_to_string(out.join("dataset.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 5);
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 4000);
    assert!(rows.iter().all(|r| r.split(',').count() == 5));
    assert!(out.join("manifest.toml").exists());
    assert!(out.join("config.toml").exists());

    let again = tmp.path().join("again");
    assert!(uqsep(&["generate", "--seed", "4", "--out", s(&again)]).status.success());
    assert_eq!(std::fs::read(out.join("dataset.csv")).unwrap(), std::fs::read(again.join("dataset.csv")).unwrap());
    let other = tmp.path().join("other");
    assert!(uqsep(&["generate", "--seed", "5", "--out", s(&other)]).status.success());
    assert_ne!(std::fs::read(out.join("dataset.csv")).unwrap(), std::fs::read(other.join("dataset.csv")).unwrap());
}

#[test]
fn config_is_echoed_verbatim() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "run.toml", &SMALL.replace("n_points = 300", "n_points = 50 # tiny"));
    let out = tmp.path().join("o");
    let o = uqsep(&["generate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&cfg).unwrap(), std::fs::read(out.join("config.toml")).unwrap());
    let rows = std::fs::read_to_string(out.join("dataset.csv")).unwrap().lines().count();
    assert_eq!(rows, 51);
}

#[test]
fn bad_configs_name_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let zero = write(tmp.path(), "zero.toml", &SMALL.replace("n_points = 300", "n_points = 0"));
    let o = uqsep(&["generate", "--config", s(&zero), "--out", s(&tmp.path().join("z"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("zero.toml:4:"), "{}", stderr(&o));

    let unknown = write(tmp.path(), "unknown.toml", &SMALL.replace("epochs = 3", "epochs = 3\nlearnin_rate = 0.1"));
    let o = uqsep(&["generate", "--config", s(&unknown), "--out", s(&tmp.path().join("u"))]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("line 15"), "{}", stderr(&o));

    let o = uqsep(&["generate", "--config", s(&tmp.path().join("nope.toml"))]);
    assert_eq!(o.status.code(), Some(5));
    assert_eq!(uqsep(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_exports_maps_that_reload_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "run.toml", SMALL);
    let out = tmp.path().join("t");
    assert!(uqsep(&["generate", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let data = out.join("dataset.csv");
    let o = uqsep(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let maps = out.join("maps");
    let csvs: Vec<_> = std::fs::read_dir(&maps)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    assert_eq!(csvs.len(), 4, "{csvs:?}");

    let re = tmp.path().join("re");
    let o = uqsep(&["maps", "--config", s(&cfg), "--model", s(&out.join("model.bin")), "--out", s(&re)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["epistemic_y0.csv", "aleatoric_y1.csv", "epistemic_y1.pgm"] {
        assert_eq!(std::fs::read(maps.join(name)).unwrap(), std::fs::read(re.join("maps").join(name)).unwrap());
    }
}

#[test]
fn mc_dropout_has_no_aleatoric_channel() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL.replace("kind = \"eqr\"\nn_members = 2", "kind = \"mc_dropout\"\nn_passes = 8")
        .replace("epochs = 3", "epochs = 3\ndropout_rate = 0.2");
    let cfg = write(tmp.path(), "mc.toml", &text);
    let out = tmp.path().join("mc");
    assert!(uqsep(&["generate", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let o = uqsep(&["train", "--config", s(&cfg), "--data", s(&out.join("dataset.csv")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let g = GridSpec::for_problem(&toy_problem(), 12).unwrap();
    for k in 0..2 {
        let a = UncertaintyMap::read_csv(&out.join(format!("maps/aleatoric_y{k}.csv")), &g, MapKind::Aleatoric, MapOutput::Index(k)).unwrap();
        assert_eq!(a.max(), 0.0);
        let e = UncertaintyMap::read_csv(&out.join(format!("maps/epistemic_y{k}.csv")), &g, MapKind::Epistemic, MapOutput::Index(k)).unwrap();
        assert!(e.max() > 0.0);
    }
}

#[test]
fn malformed_dataset_reports_the_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "run.toml", SMALL);
    let data = write(tmp.path(), "bad.csv", "x0,x1,y0,y1,round\n0,0,1,1,0\n0,0,1,oops,0\n");
    let o = uqsep(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains('3'), "{}", stderr(&o));
}

#[test]
fn separate_then_score() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "run.toml", SMALL);
    let out = tmp.path().join("sep");
    let o = uqsep(&["separate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for k in 0..=2 {
        assert!(out.join(format!("iter_{k}/total.csv")).exists());
    }
    let summary: toml::Table = std::fs::read_to_string(out.join("summary.toml")).unwrap().parse().unwrap();
    assert_eq!(summary["early_stopped"].as_bool(), Some(false));

    let o = uqsep(&["score", "--run", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores: toml::Table = std::fs::read_to_string(out.join("scores.toml")).unwrap().parse().unwrap();
    assert_eq!(scores["regions"].as_array().unwrap().len(), 4);
    let cov = scores["model"]["coverage"]["median"].as_array().unwrap();
    assert_eq!(cov.len(), 2);
    let first = std::fs::read(out.join("scores.toml")).unwrap();
    assert!(uqsep(&["score", "--run", s(&out)]).status.success());
    assert_eq!(first, std::fs::read(out.join("scores.toml")).unwrap());
}

#[test]
fn early_stop_is_flagged() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "run.toml", &SMALL.replace("iterations = 2", "iterations = 2\nthreshold = 2.0"));
    let out = tmp.path().join("sep");
    assert!(uqsep(&["separate", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let summary: toml::Table = std::fs::read_to_string(out.join("summary.toml")).unwrap().parse().unwrap();
    assert_eq!(summary["early_stopped"].as_bool(), Some(true));
    assert!(!out.join("iter_1").exists());
}

fn write_mask(path: &Path, m: &BinaryMask) {
    m.write_pgm(path).unwrap();
}

#[test]
fn score_of_a_perfect_synthetic_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut problem = toy_problem();
    problem.regions = vec![problem.regions[0].clone(), problem.regions[2].clone()];
    let grid = GridSpec::for_problem(&problem, 20).unwrap();
    let gap = region_to_mask(&problem.regions[0], &grid);
    let noise = region_to_mask(&problem.regions[1], &grid);

    #[derive(serde::Serialize)]
    struct Manifest<'a> {
        problem: &'a uqsep::problems::Problem,
        grid: &'a GridSpec,
    }
    std::fs::write(dir.join("manifest.toml"), toml::to_string(&Manifest { problem: &problem, grid: &grid }).unwrap()).unwrap();
    std::fs::write(dir.join("summary.toml"), "reference_max = 1.0\n[[iterations]]\niteration = 0\n[[iterations]]\niteration = 1\n").unwrap();
    let as_map = |m: &BinaryMask, kind| {
        UncertaintyMap::new(grid.clone(), m.bits.mapv(|b| if b { 1.0 } else { 0.1 }), kind, MapOutput::All).unwrap()
    };
    for k in 0..2 {
        std::fs::create_dir_all(dir.join("iter_0")).unwrap();
        as_map(&noise, MapKind::Epistemic).write_csv(&dir.join(format!("iter_0/epistemic_y{k}.csv"))).unwrap();
        as_map(&gap, MapKind::Aleatoric).write_csv(&dir.join(format!("iter_0/aleatoric_y{k}.csv"))).unwrap();
    }
    let mut both = noise.clone();
    both.bits.zip_mut_with(&gap.bits, |a, &b| *a |= b);
    as_map(&both, MapKind::Combined).write_csv(&dir.join("iter_0/total.csv")).unwrap();
    std::fs::create_dir_all(dir.join("iter_1")).unwrap();
    as_map(&noise, MapKind::Combined).write_csv(&dir.join("iter_1/total.csv")).unwrap();
    write_mask(&dir.join("aleatoric_mask.pgm"), &noise);
    write_mask(&dir.join("epistemic_mask.pgm"), &gap);

    let o = uqsep(&["score", "--run", s(dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores: toml::Table = std::fs::read_to_string(dir.join("scores.toml")).unwrap().parse().unwrap();
    for r in scores["regions"].as_array().unwrap() {
        assert_eq!(r["mask"]["iou"].as_float(), Some(1.0));
        assert_eq!(r["mask"]["matched_iou"].as_float(), Some(1.0));
    }
    assert!(scores.get("model").is_none());

    std::fs::remove_file(dir.join("manifest.toml")).unwrap();
    let o = uqsep(&["score", "--run", s(dir)]);
    assert_eq!(o.status.code(), Some(10));
    assert!(stderr(&o).contains("manifest.toml"));
}
