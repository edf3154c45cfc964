use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use tempfile::TempDir;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/figure2_events.csv")
}

fn trialemu(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trialemu"))
        .current_dir(dir)
        .env_remove("TRIALEMU_CONFIG")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Small and fast settings for the slow models.
const FAST: &str = "
[simulate]
n = 300
[bootstrap]
replicates = 3
[models.bart]
burn_in = 20
draws = 20
[models.tarnet]
max_epochs = 2
[models.cfr]
max_epochs = 2
";

#[test]
fn ingest_prints_the_session_counts() {
    let dir = TempDir::new().unwrap();
    let o = trialemu(dir.path(), &["--out", "o", "ingest", fixture().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("supine(original+artificial)=4 prone=2\n"), "{}", stdout(&o));
    let sessions = fs::read_to_string(dir.path().join("o/sessions.csv")).unwrap();
    assert_eq!(sessions.lines().count(), 7);
}

#[test]
fn ingest_empty_and_missing_inputs() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("empty.csv"), "").unwrap();
    let o = trialemu(dir.path(), &["ingest", "empty.csv"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("supine(original+artificial)=0 prone=0"));
    assert_eq!(code(&trialemu(dir.path(), &["ingest", "missing.csv"])), 2);
}

/// One prone session per patient with baseline measured an hour before the
/// turn; the inclusion rule is reimplemented below.
fn scripted_events() -> (String, usize) {
    let mut csv = String::from("patient_id,timestamp,kind,name,value\n");
    let mut expected = 0;
    let mut k = 0;
    for pf in [120.0, 149.0, 150.0, 200.0] {
        for fio2 in [50.0, 60.0, 80.0] {
            for peep in [4.0, 5.0, 10.0] {
                for hours in [10, 96, 97] {
                    let id = format!("p{k}");
                    k += 1;
                    let at = |h: i64| format!("2021-01-{:02}T{:02}:00:00Z", 1 + h / 24, h % 24);
                    for (name, v) in [("pao2", 70.0), ("fio2", fio2), ("peep", peep), ("pf_ratio", pf)] {
                        writeln!(csv, "{id},{},measurement,{name},{v}", at(0)).unwrap();
                    }
                    writeln!(csv, "{id},{},position,prone,", at(1)).unwrap();
                    writeln!(csv, "{id},{},measurement,pf_ratio,{}", at(5), pf + 20.0).unwrap();
                    writeln!(csv, "{id},{},position,supine,", at(1 + hours)).unwrap();
                    writeln!(csv, "{id},{},measurement,pf_ratio,{pf}", at(3 + hours)).unwrap();
                    if pf < 150.0 && fio2 >= 60.0 && peep >= 5.0 && hours <= 96 {
                        expected += 1;
                    }
                }
            }
        }
    }
    (csv, expected)
}

#[test]
fn cohort_matches_an_independent_filter() {
    let dir = TempDir::new().unwrap();
    let (events, expected) = scripted_events();
    fs::write(dir.path().join("events.csv"), events).unwrap();
    let o = trialemu(dir.path(), &["--out", "o", "cohort", "events.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let text = fs::read_to_string(dir.path().join("o/cohort.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let t = header.iter().position(|&h| h == "treatment").unwrap();
    let prone = text.lines().skip(1).filter(|l| l.split(',').nth(t) == Some("1")).count();
    assert_eq!(prone, expected);

    // Funnel conservation: every candidate is kept or excluded once.
    let out = stdout(&o);
    let value = |label: &str| -> usize {
        out.lines().find(|l| l.starts_with(label)).unwrap().split_whitespace().last().unwrap().parse().unwrap()
    };
    let excluded: usize = out
        .lines()
        .find(|l| l.starts_with("excluded:"))
        .unwrap()
        .split(',')
        .map(|part| part.split_whitespace().last().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(value("sessions in"), value("criteria met") + excluded);
    assert_eq!(text.lines().count() - 1, value("criteria met"));
}

#[test]
fn cohort_with_no_eligible_sessions_exits_3() {
    let dir = TempDir::new().unwrap();
    let events = "patient_id,timestamp,kind,name,value\n\
        a,2021-01-01T00:00:00Z,measurement,pao2,90\n\
        a,2021-01-01T00:00:00Z,measurement,fio2,40\n\
        a,2021-01-01T00:00:00Z,measurement,peep,5\n\
        a,2021-01-01T00:00:00Z,measurement,pf_ratio,225\n\
        a,2021-01-01T01:00:00Z,position,prone,\n\
        a,2021-01-01T12:00:00Z,position,supine,\n";
    fs::write(dir.path().join("events.csv"), events).unwrap();
    let o = trialemu(dir.path(), &["--out", "o", "cohort", "events.csv"]);
    assert_eq!(code(&o), 3);
    assert!(!dir.path().join("o/cohort.csv").exists());
}

#[test]
fn simulate_is_reproducible_and_fast() {
    let dir = TempDir::new().unwrap();
    let started = Instant::now();
    assert_eq!(code(&trialemu(dir.path(), &["--seed", "9", "--out", "a", "simulate"])), 0);
    assert!(started.elapsed().as_secs_f64() < 5.0);
    assert_eq!(code(&trialemu(dir.path(), &["--seed", "9", "--out", "b", "simulate"])), 0);
    let a = fs::read(dir.path().join("a/synthetic.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/synthetic.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 2001);
}

#[test]
fn null_effect_potential_outcomes_coincide() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("c.toml"), "[simulate]\nkind = \"null_effect\"\nn = 200\n").unwrap();
    assert_eq!(code(&trialemu(dir.path(), &["--config", "c.toml", "--out", "o", "simulate"])), 0);
    let text = fs::read_to_string(dir.path().join("o/synthetic.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let (c1, c0) = (header.iter().position(|&h| h == "y1").unwrap(), header.iter().position(|&h| h == "y0").unwrap());
    let total: f64 = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f[c1].parse::<f64>().unwrap() - f[c0].parse::<f64>().unwrap()
        })
        .sum();
    assert_eq!(total, 0.0);
}

#[test]
fn invalid_simulation_spec_exits_5() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("c.toml"), "[simulate]\nn = 0\n").unwrap();
    assert_eq!(code(&trialemu(dir.path(), &["--config", "c.toml", "simulate"])), 5);
    fs::write(dir.path().join("d.toml"), "[simulate]\nsamples = 10\n").unwrap();
    assert_eq!(code(&trialemu(dir.path(), &["--config", "d.toml", "simulate"])), 5);
    assert_eq!(code(&trialemu(dir.path(), &["--config", "none.toml", "simulate"])), 2);
}

#[test]
fn estimate_recovers_a_noiseless_effect() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("c.toml"), "[simulate]\nsigma = 0.0\n").unwrap();
    assert_eq!(code(&trialemu(dir.path(), &["--config", "c.toml", "--out", "o", "simulate"])), 0);
    let o = trialemu(dir.path(), &["--out", "o", "estimate", "lr", "o/synthetic.csv"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("ATE 10.00\n"), "{}", stdout(&o));
}

#[test]
fn estimate_reports_alpha_for_the_networks() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("c.toml"), FAST).unwrap();
    assert_eq!(code(&trialemu(dir.path(), &["--config", "c.toml", "--out", "o", "simulate"])), 0);
    for (tag, alpha) in [("cfr", "alpha = 1\n"), ("tarnet", "alpha = 0\n")] {
        let o = trialemu(dir.path(), &["--config", "c.toml", "--out", "o", "estimate", tag, "o/synthetic.csv"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains(alpha), "{}", stdout(&o));
    }
    let o = trialemu(dir.path(), &["--out", "o", "estimate", "xyz"]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lr, dripw, blocking, bart, tarnet, cfr"));
}

#[test]
fn evaluate_writes_a_reproducible_report() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("c.toml"), FAST).unwrap();
    assert_eq!(code(&trialemu(dir.path(), &["--config", "c.toml", "--out", "o", "simulate"])), 0);
    let run = |out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_trialemu"))
            .current_dir(dir.path())
            .env("TRIALEMU_CONFIG", "c.toml")
            .args(["--out", out, "evaluate", "o/synthetic.csv"])
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let text = run("r1");
    run("r2");
    for label in ["LR ", "DR-IPW ", "Blocking ", "BART ", "TARNet ", "CfR "] {
        assert_eq!(text.lines().filter(|l| l.starts_with(label)).count(), 1, "{text}");
    }
    assert!(text.contains("target-trial ATE 15 (3, 27)"));
    for file in ["summary.toml", "table.csv", "boxplots.csv", "samples.csv", "overlap.csv", "report.txt"] {
        let a = fs::read(dir.path().join("r1").join(file)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("r2").join(file)).unwrap(), "{file} differs between reruns");
    }
    let table = fs::read_to_string(dir.path().join("r1/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);

    let o = trialemu(dir.path(), &["--out", "r1", "report"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("target-trial ATE 15 (3, 27)"));
}
