use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SYNTH: &str = r#"
[corpus.synth]
n_units = 8
seed = 3
records_per_unit = { law = "constant", count = 3 }
record_len = { law = "uniform", min = 10, max = 20 }

[model]
d_emb = 4
context = 3
d_hidden = 8
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn userdp(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_userdp"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn calibrate_json(dir: &Path, body: &str) -> serde_json::Value {
    let cfg = write_config(dir, "c.toml", body);
    let out = userdp(&["calibrate"], &cfg, &dir.join("out"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn group_of_one_matches_userwise() {
    let dir = tempfile::tempdir().unwrap();
    let privacy = "[privacy]\nepsilon = 2.0\ndelta = 1e-5\npopulation = 1000\n[training]\nsteps = 20\nbatch_size = 50.0\nk = 1\n";
    let gp = calibrate_json(dir.path(), &format!("mechanism = \"group_privacy\"\n{privacy}"));
    let uw = calibrate_json(dir.path(), &format!("mechanism = \"user_wise\"\n{privacy}"));
    let (a, b) = (gp["sigma"].as_f64().unwrap(), uw["sigma"].as_f64().unwrap());
    assert!((a / b - 1.0).abs() < 1e-3, "{a} vs {b}");
    assert_eq!(gp["T"], 20);
    assert_eq!(gp["q"], 0.05);
    let text = serde_json::to_string(&gp).unwrap();
    let back: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(back, gp);
    assert!(dir.path().join("out/accounting.json").exists());
}

#[test]
fn missing_delta_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "mechanism = \"user_wise\"\n[privacy]\nepsilon = 1.0\n");
    let out = userdp(&["calibrate"], &cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("privacy.delta"));
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "mechanism = \"user_wise\"\nlearning_rate = 3\n");
    assert_eq!(userdp(&["stats"], &cfg, &dir.path().join("out")).status.code(), Some(2));
}

#[test]
fn unreachable_target_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    // An expected batch larger than the population has no sampling rate.
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "mechanism = \"user_wise\"\n[privacy]\nepsilon = 1.0\ndelta = 1e-5\npopulation = 10\n[training]\nbatch_size = 50.0\nsteps = 5\n",
    );
    assert_eq!(userdp(&["calibrate"], &cfg, &dir.path().join("out")).status.code(), Some(3));
}

#[test]
fn non_private_training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "mechanism = \"group_privacy\"\nseed = 5\n[privacy]\nepsilon = inf\n[training]\nsteps = 4\nbatch_size = 6.0\nk = 2\neval_every = 2\n{SYNTH}"
    );
    let cfg = write_config(dir.path(), "c.toml", &body);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(userdp(&["train"], &cfg, &a).status.success());
    assert!(userdp(&["train"], &cfg, &b).status.success());
    let ha = fs::read(a.join("history.csv")).unwrap();
    assert_eq!(ha, fs::read(b.join("history.csv")).unwrap());
    assert_eq!(fs::read(a.join("model.bin")).unwrap(), fs::read(b.join("model.bin")).unwrap());
    assert!(a.join("model.json").exists());
    let text = String::from_utf8(ha).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let sigma = header.iter().position(|h| *h == "sigma").unwrap();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        assert_eq!(row.split(',').nth(sigma).unwrap(), "0.0");
    }
}

#[test]
fn asi_with_zero_tau_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "mechanism = \"asi_filtered\"\n[privacy]\nepsilon = 1000.0\ndelta = 1e-5\n[training]\nsteps = 3\ntau = 0.0\nk = 2\nsigma = 1.0\n{SYNTH}"
    );
    let cfg = write_config(dir.path(), "c.toml", &body);
    let out = userdp(&["train"], &cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("halted at step 1"));
}

#[test]
fn stats_on_constant_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("mechanism = \"user_wise\"\n{SYNTH}"));
    let out = userdp(&["stats"], &cfg, &dir.path().join("out"));
    assert!(out.status.success());
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stats["avg"], 3.0);
    assert_eq!(stats["min"], 3.0);
    assert_eq!(stats["max"], 3.0);
    let csv = fs::read_to_string(dir.path().join("out/stats.csv")).unwrap();
    assert!(csv.starts_with("n_units,n_records,avg,max,min,median\n"));
}

#[test]
fn select_longest_two() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("mechanism = \"group_privacy\"\n[training]\nk = 2\nstrategy = \"longest\"\n{SYNTH}");
    let cfg = write_config(dir.path(), "c.toml", &body);
    let out = userdp(&["select"], &cfg, &dir.path().join("out"));
    assert!(out.status.success());
    let stats: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!((stats["min"].as_f64(), stats["max"].as_f64()), (Some(2.0), Some(2.0)));
    let lines = fs::read_to_string(dir.path().join("out/selected.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 16);
}

#[test]
fn analyze_noise_writes_crossover_row() {
    let dir = tempfile::tempdir().unwrap();
    let body = "mechanism = \"user_wise\"\n[privacy]\nepsilon = 3.0\ndelta = 1e-5\n[training]\nsteps = 10\n[analysis]\nmode = \"noise\"\nn_users = 100\nratios = [0.01, 0.1, 1.0]\n";
    let cfg = write_config(dir.path(), "c.toml", body);
    let out = userdp(&["analyze"], &cfg, &dir.path().join("out"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/noise_curves.csv")).unwrap();
    assert!(csv.lines().last().unwrap().starts_with("crossover,"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn analyze_concentration_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let conc = format!("mechanism = \"user_wise\"\n[analysis]\nmode = \"concentration\"\nprobe_users = 5\n{SYNTH}");
    let cfg = write_config(dir.path(), "c.toml", &conc);
    assert!(userdp(&["analyze"], &cfg, &dir.path().join("out")).status.success());
    assert!(dir.path().join("out/concentration.csv").exists());
    let sweep = format!(
        "mechanism = \"group_privacy\"\n[training]\nsteps = 2\nbatch_size = 4.0\nsigma = 0.5\neval_every = 2\n[privacy]\nepsilon = 8.0\ndelta = 1e-5\n[analysis]\nmode = \"sweep\"\nseeds = [0, 1]\n[analysis.grid]\nclip = [0.5, 1.0]\n{SYNTH}"
    );
    let cfg = write_config(dir.path(), "s.toml", &sweep);
    assert!(userdp(&["analyze"], &cfg, &dir.path().join("out")).status.success());
    let csv = fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
}

#[test]
fn synth_output_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("mechanism = \"user_wise\"\n{SYNTH}"));
    let out = userdp(&["synth"], &cfg, &dir.path().join("out"));
    assert!(out.status.success());
    let from_file = write_config(
        dir.path(),
        "f.toml",
        "mechanism = \"user_wise\"\n[corpus]\npath = \"out/corpus.jsonl\"\n",
    );
    let stats = userdp(&["stats"], &from_file, &dir.path().join("out2"));
    assert!(stats.status.success(), "{}", String::from_utf8_lossy(&stats.stderr));
    assert_eq!(stats.stdout, out.stdout);
}
