//! End-to-end runs of the `mmo` binary.

use std::fs;
use std::path::Path;
use std::process::Command;

fn mmo(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mmo")).args(args).output().unwrap()
}

fn write_config(dir: &Path, variants: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        format!(
            "seed = 11\nvariants = [{variants}]\nmeasures = [\"bhattacharyya\", \"pillai\"]\nreps = 5\ndraws_per_rep = 200\n[input]\nsynth = \"us-south-like\"\n"
        ),
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn run_is_reproducible_and_manifest_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "\"raw\", \"averaged\", \"minimal-multi\"");
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for out in [&a, &b] {
        let o = mmo(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = mmo(&["run", "--manifest", a.join("manifest.json").to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = listing(&a);
    assert!(first.iter().any(|(n, _)| n == "overlap_minimal-multi.csv"));
    assert!(first.iter().any(|(n, _)| n == "speakers_minimal-multi_bhattacharyya.svg"));
    assert_eq!(first, listing(&b));
    assert_eq!(first, listing(&c));
}

#[test]
fn us_south_speakers_overlap_more_before_nasals() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "\"minimal-multi\"");
    let out = tmp.path().join("out");
    assert!(mmo(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let mut rdr = csv::Reader::from_path(out.join("speakers_minimal-multi_bhattacharyya.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (first, second) = (col("nasal"), col("oral"));
    let mut above = 0;
    let mut total = 0;
    for row in rdr.records() {
        let row = row.unwrap();
        let (nasal, oral): (f64, f64) = (row[first].parse().unwrap(), row[second].parse().unwrap());
        above += usize::from(nasal > oral);
        total += 1;
    }
    assert_eq!(total, 20);
    assert!(above >= 18, "{above}/{total} speakers above y = x");
}

#[test]
fn invalid_config_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let o = mmo(&["run", "--config", &cfg, "--out", tmp.path().join("out").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("variant"));
}

#[test]
fn synth_fit_measure_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let p = |n: &str| dir.join(n).to_string_lossy().into_owned();
    assert!(mmo(&["synth", "--scenario", "scottish-like", "--seed", "3", "--out", &p("syn")]).status.success());
    assert!(Path::new(&p("syn/truth.json")).exists());
    let o = mmo(&["fit", "--tokens", &p("syn/tokens.csv"), "--out", &p("model.json")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = mmo(&[
        "measure", "--model", &p("model.json"), "--tokens", &p("syn/tokens.csv"), "--reps", "5", "--draws", "200",
        "--seed", "1", "--out", &p("ba.csv"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(p("ba.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    let o = mmo(&[
        "simulate", "--model", &p("model.json"), "--vowel", "IH", "--context", "nasal", "--n", "50", "--seed", "2",
        "--out", &p("sim.csv"),
    ]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(p("sim.csv")).unwrap().lines().count(), 51);
}
