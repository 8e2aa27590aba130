use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fedsv_core::config::parse_config;
use fedsv_core::metrics::read_metrics;

const SMALL: &str = "\
clients = 8
malicious = 3
rounds = 4
attack.kind = sign_flip
data.classes = 4
data.train_per_class = 24
data.test_per_class = 40
data.dim = 6
defense.kind = fedsv
defense.sv_samples = 20
";

fn fedsv(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsv"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.txt"), config).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_one_row_per_round_and_a_summary() {
    let dir = setup(SMALL);
    let o = fedsv(&["run", "--config", "cfg.txt", "--out", "m.csv", "--quiet"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = read_metrics(fs::File::open(dir.path().join("m.csv")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert_eq!(table.clients, 8);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("m.csv.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rounds"], 4);
    assert!(summary["success"].is_boolean());
    assert!(summary["detection"]["recall"].is_number());
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = setup(SMALL);
    for out in ["a.csv", "b.csv"] {
        let o = fedsv(&["run", "--config", "cfg.txt", "--out", out, "--quiet"], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.csv")).unwrap());
    let o = fedsv(
        &["run", "--config", "cfg.txt", "--out", "c.csv", "--seed", "9", "--quiet"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(a, fs::read(dir.path().join("c.csv")).unwrap());
}

#[test]
fn malformed_config_exits_2_with_line() {
    let dir = setup("clients = 8\nrounds = four\n");
    let o = fedsv(&["run", "--config", "cfg.txt"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let dir = setup("clients = 8\nwarp.speed = 9\n");
    let o = fedsv(&["run", "--config", "cfg.txt"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("warp.speed"));
}

#[test]
fn missing_config_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedsv(&["run", "--config", "absent.txt"], dir.path());
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn unwritable_output_exits_3() {
    let dir = setup(SMALL);
    let o = fedsv(
        &["run", "--config", "cfg.txt", "--out", "no/such/dir/m.csv", "--quiet"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn divergence_exits_6() {
    let dir = setup(&format!("{SMALL}train.learning_rate = 1e308\n"));
    let o = fedsv(&["run", "--config", "cfg.txt", "--out", "m.csv", "--quiet"], dir.path());
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
    assert!(stderr(&o).contains("round 1"));
}

#[test]
fn sweep_writes_cells_and_success_table() {
    let dir = setup(SMALL);
    let o = fedsv(
        &[
            "sweep",
            "--config",
            "cfg.txt",
            "--fractions",
            "0.4",
            "--reps",
            "3",
            "--out",
            "sw",
            "--quiet",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let sw = dir.path().join("sw");
    let cells = fs::read_dir(&sw)
        .unwrap()
        .filter(|e| {
            let name = e.as_ref().unwrap().file_name();
            name.to_string_lossy().starts_with("fedsv-")
        })
        .count();
    assert_eq!(cells, 3);
    assert_eq!(fs::read_dir(sw.join("baseline")).unwrap().count(), 3);
    let table = fs::read_to_string(sw.join("success_rates.csv")).unwrap();
    assert_eq!(table.lines().count(), 2, "{table}");
    assert!(table.lines().nth(1).unwrap().starts_with("fedsv,0.4,3,"));
}

#[test]
fn sweep_with_two_defenses_has_row_per_defense_and_fraction() {
    let dir = setup(SMALL);
    let o = fedsv(
        &[
            "sweep",
            "--config",
            "cfg.txt",
            "--defense",
            "fedsv,coord_median",
            "--fractions",
            "0.25,0.5",
            "--reps",
            "1",
            "--out",
            "sw",
            "--quiet",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("sw/success_rates.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4, "{table}");
}

#[test]
fn sweep_rejects_zero_reps() {
    let dir = setup(SMALL);
    let o = fedsv(
        &["sweep", "--config", "cfg.txt", "--fractions", "0.4", "--reps", "0"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_on_single_baseline_and_corrupt_rows() {
    let clean = SMALL
        .replace("malicious = 3", "malicious = 0")
        .replace("attack.kind = sign_flip", "attack.kind = none")
        .replace("defense.kind = fedsv", "defense.kind = fedavg");
    let dir = setup(&clean);
    fs::create_dir(dir.path().join("m")).unwrap();
    let o = fedsv(
        &["run", "--config", "cfg.txt", "--out", "m/base.csv", "--quiet"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let path = dir.path().join("m/base.csv");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("this,row,is,broken\n");
    fs::write(&path, text).unwrap();

    let o = fedsv(&["report", "m", "--quiet"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("baseline accuracy (clean fedavg)"), "{stdout}");
    assert!(stdout.contains("100.0%"), "{stdout}");
    assert!(stderr(&o).contains("skipped line"), "{}", stderr(&o));
    let long = fs::read_to_string(dir.path().join("m/report_long.csv")).unwrap();
    assert_eq!(long.lines().count(), 1 + 4 * 3);
}

#[test]
fn report_groups_mixed_files() {
    let dir = setup(SMALL);
    let o = fedsv(
        &[
            "sweep",
            "--config",
            "cfg.txt",
            "--defense",
            "fedsv,fedavg",
            "--fractions",
            "0.4",
            "--reps",
            "2",
            "--out",
            "sw",
            "--quiet",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = fedsv(&["report", "sw", "--quiet"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let rows: Vec<&str> = stdout.lines().filter(|l| l.contains("sign_flip")).collect();
    assert_eq!(rows.len(), 2, "{stdout}");
    assert!(
        stdout.lines().any(|l| l.starts_with("fedsv") && l.contains("recall")),
        "{stdout}"
    );
    // Second run ignores the report's own output table.
    let o = fedsv(&["report", "sw", "--quiet"], dir.path());
    assert!(!stderr(&o).contains("warning"), "{}", stderr(&o));
}

#[test]
fn report_on_empty_or_missing_directory() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    assert_eq!(fedsv(&["report", "empty"], dir.path()).status.code(), Some(4));
    assert_eq!(fedsv(&["report", "absent"], dir.path()).status.code(), Some(5));
}

#[test]
fn config_dump_round_trips() {
    let dir = setup(&format!("{SMALL}defense.lambda = -0.2\nattack.start_round = 2\n"));
    let o = fedsv(&["config-dump", "--config", "cfg.txt", "--seed", "17"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dumped = String::from_utf8(o.stdout).unwrap();
    let mut original = parse_config(&fs::read_to_string(dir.path().join("cfg.txt")).unwrap()).unwrap();
    original.base.master_seed = 17;
    assert_eq!(parse_config(&dumped).unwrap(), original);

    fs::write(dir.path().join("dumped.txt"), &dumped).unwrap();
    let again = fedsv(&["config-dump", "--config", "dumped.txt"], dir.path());
    assert_eq!(String::from_utf8(again.stdout).unwrap(), dumped);
}
