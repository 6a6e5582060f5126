use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leduc-lab"))
        .current_dir(dir)
        .env_remove("LEDUC_LAB_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A solved game plus suite and small population, shared by the tests.
fn fixture() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = TempDir::new().unwrap();
        let p = d.path();
        ok(p, &["solve", "--iterations", "2000", "--out", "."]);
        ok(
            p,
            &[
                "gen-opponents",
                "--mode",
                "suite",
                "--gto",
                "gto.strategy.txt",
                "--out",
                "suite",
            ],
        );
        ok(
            p,
            &[
                "gen-opponents",
                "--mode",
                "population",
                "--gto",
                "gto.strategy.txt",
                "--candidates",
                "20",
                "--keep",
                "6",
                "--out",
                "pop",
            ],
        );
        d
    })
    .path()
}

const TINY: &[&str] = &[
    "--layers",
    "1",
    "--d-model",
    "16",
    "--heads",
    "2",
    "--ff-dim",
    "16",
    "--max-seq-len",
    "128",
];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn ok_owned(dir: &Path, args: &[String]) -> String {
    let v: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(dir, &v)
}

#[test]
fn usage_errors_exit_with_one() {
    let d = TempDir::new().unwrap();
    assert_eq!(run(d.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(
        run(d.path(), &["solve", "--variant", "bogus"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(run(d.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_exit_with_two_and_name_the_file() {
    let d = TempDir::new().unwrap();
    let out = run(d.path(), &["calibrate", "--gto", "absent.strategy.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.strategy.txt"));
    let out = run(d.path(), &["report", "--results", "absent.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_format_versions_are_rejected() {
    let d = TempDir::new().unwrap();
    let gto = fs::read_to_string(fixture().join("gto.strategy.txt")).unwrap();
    fs::write(d.path().join("g.txt"), gto.replacen("v1", "v9", 1)).unwrap();
    let out = run(
        d.path(),
        &["calibrate", "--gto", "g.txt", "--scales", "1.5"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("v9"));

    fs::write(d.path().join("metrics.csv"), "epoch,phase\n").unwrap();
    ok(
        fixture(),
        &[
            "eval",
            "--gto",
            "gto.strategy.txt",
            "--suite",
            "suite/manifest.txt",
            "--agent-strategy",
            "gto.strategy.txt",
            "--hands",
            "50",
            "--trials",
            "2",
            "--out",
            "gto_eval_v",
        ],
    );
    let res = fixture().join("gto_eval_v/results.csv");
    let out = run(
        d.path(),
        &[
            "report",
            "--results",
            res.to_str().unwrap(),
            "--metrics",
            "metrics.csv",
            "--out",
            ".",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn solve_is_deterministic() {
    let d = TempDir::new().unwrap();
    ok(d.path(), &["solve", "--iterations", "1500", "--out", "a"]);
    ok(d.path(), &["solve", "--iterations", "1500", "--out", "b"]);
    for f in ["gto.strategy.txt", "game_value.txt", "solve.txt"] {
        assert_eq!(
            fs::read(d.path().join("a").join(f)).unwrap(),
            fs::read(d.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn output_directory_comes_from_the_environment() {
    let d = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_leduc-lab"))
        .current_dir(d.path())
        .env("LEDUC_LAB_DIR", "from_env")
        .args(["solve", "--iterations", "10"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.path().join("from_env/gto.strategy.txt").exists());
}

fn manifest_rows(path: &Path) -> Vec<(String, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("id="))
        .map(|l| {
            let field = |k: &str| {
                l.split_whitespace()
                    .find_map(|t| t.strip_prefix(k))
                    .unwrap()
                    .to_string()
            };
            (field("id="), field("epsilon=").parse().unwrap())
        })
        .collect()
}

#[test]
fn suite_and_population_manifests() {
    let suite = manifest_rows(&fixture().join("suite/manifest.txt"));
    assert_eq!(suite.len(), 12);
    assert!(suite.iter().any(|(id, _)| id == "maniac_high"));
    let pop = manifest_rows(&fixture().join("pop/manifest.txt"));
    assert_eq!(pop.len(), 6);
    assert!(pop.windows(2).all(|w| w[0].1 <= w[1].1));
}

#[test]
fn equilibrium_against_itself_gains_nothing() {
    let out = ok(
        fixture(),
        &[
            "eval",
            "--gto",
            "gto.strategy.txt",
            "--suite",
            "suite/manifest.txt",
            "--agent-strategy",
            "gto.strategy.txt",
            "--hands",
            "100",
            "--trials",
            "2",
            "--out",
            "gto_eval",
        ],
    );
    assert!(
        out.contains("average gain (excluding gto) +0.0000"),
        "{out}"
    );
    let csv = fs::read_to_string(fixture().join("gto_eval/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 14);
    for row in csv.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[4].parse::<f64>().unwrap(), 0.0, "{row}");
        assert_eq!(f[6], "false");
    }
    assert!(fixture().join("gto_eval/results.txt").exists());
}

#[test]
fn report_marks_significant_positive_gains() {
    // Rows with the layout of `results.csv`; two significant losses must not
    // be marked bold even though their intervals exclude zero.
    let d = TempDir::new().unwrap();
    let rows: [(&str, f64, f64, f64); 6] = [
        ("maniac_high", 2.28, 1.021, 0.002),
        ("over_caller_mid", 0.16, -0.171, 0.025),
        ("passive_mid", 0.16, -0.058, 0.050),
        ("nit_mid", 0.42, 0.034, 0.041),
        ("tight_passive_high", 0.32, 0.093, 0.030),
        ("gto", 0.0, 0.014, 0.046),
    ];
    let mut csv = String::from("opponent,epsilon,model_ev,gto_ev,gain,ci95,significant\n");
    for (id, eps, gain, ci) in rows {
        csv += &format!("{id},{eps},{gain},0,{gain},{ci},{}\n", gain.abs() > ci);
    }
    fs::write(d.path().join("results.csv"), csv).unwrap();
    ok(
        d.path(),
        &["report", "--results", "results.csv", "--out", "."],
    );
    let report = fs::read_to_string(d.path().join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(
        lines[0],
        "opponent,epsilon,model_ev,gto_ev,gain,ci95,significant,bold"
    );
    assert!(lines[1].starts_with("gto,"));
    let bold = |id: &str| {
        lines
            .iter()
            .find(|l| l.starts_with(&format!("{id},")))
            .unwrap()
            .ends_with(",true")
    };
    assert!(bold("maniac_high"));
    assert!(bold("tight_passive_high"));
    assert!(!bold("over_caller_mid"));
    assert!(!bold("passive_mid"));
    assert!(!bold("nit_mid"));
    assert!(!bold("gto"));
    assert!(lines.last().unwrap().starts_with("average_excl_gto,,,,"));
}

#[test]
fn pretrain_train_resume_and_report() {
    let root = fixture();
    let d = TempDir::new_in(root).unwrap();
    let out = d.path().to_str().unwrap();
    let pre = format!("{out}/pre");
    ok_owned(
        root,
        &with(
            &[
                "pretrain",
                "--gto",
                "gto.strategy.txt",
                "--epochs",
                "2",
                "--hands-per-buffer",
                "10",
                "--eval-hands",
                "10",
                "--out",
                &pre,
            ],
            TINY,
        ),
    );
    let pretrained = format!("{pre}/pretrained.bin");
    let train = |dir: &str, extra: &[&str]| {
        let mut v = with(
            &[
                "train",
                "--gto",
                "gto.strategy.txt",
                "--population",
                "pop/manifest.txt",
                "--pretrained",
                &pretrained,
                "--hands-per-buffer",
                "10",
                "--total-epochs",
                "8",
                "--phase1-max-epochs",
                "3",
                "--check-interval",
                "2",
                "--validation-hands",
                "6",
                "--seed",
                "5",
                "--out",
                dir,
            ],
            TINY,
        );
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };

    let full = format!("{out}/full");
    ok_owned(root, &train(&full, &[]));
    let metrics = fs::read_to_string(format!("{full}/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 9);

    // Stopped after epoch 5, then resumed.
    let part = format!("{out}/part");
    ok_owned(root, &train(&part, &["--stop-after-epoch", "5"]));
    assert_eq!(
        fs::read_to_string(format!("{part}/metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        6
    );
    let refused = run(
        root,
        &train(&part, &[])
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    assert_eq!(refused.status.code(), Some(1));
    let changed = run(
        root,
        &train(&part, &["--resume", "--phase2-alpha", "0.9"])
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    assert_eq!(changed.status.code(), Some(1));
    ok_owned(root, &train(&part, &["--resume"]));
    assert_eq!(
        fs::read_to_string(format!("{part}/metrics.csv")).unwrap(),
        metrics
    );
    assert_eq!(
        fs::read(format!("{part}/checkpoint.bin")).unwrap(),
        fs::read(format!("{full}/checkpoint.bin")).unwrap()
    );

    let p1 = format!("{out}/p1");
    ok_owned(root, &train(&p1, &["--phase1-only"]));
    let rows = fs::read_to_string(format!("{p1}/metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
    assert!(rows
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(1) == Some("1")));
    assert!(fs::read_to_string(format!("{p1}/run.txt"))
        .unwrap()
        .contains("phase1_only=true"));

    let ev = format!("{out}/ev");
    ok_owned(
        root,
        &[
            "eval",
            "--gto",
            "gto.strategy.txt",
            "--suite",
            "suite/manifest.txt",
            "--checkpoint",
            &format!("{full}/checkpoint.bin"),
            "--hands",
            "20",
            "--trials",
            "2",
            "--out",
            &ev,
        ]
        .map(String::from),
    );
    ok_owned(
        root,
        &[
            "report",
            "--results",
            &format!("{ev}/results.csv"),
            "--metrics",
            &format!("{full}/metrics.csv"),
            "--out",
            &ev,
        ]
        .map(String::from),
    );
    let curves = fs::read_to_string(format!("{ev}/learning_curves.dat")).unwrap();
    assert!(curves.starts_with("# epoch phase gto_ce br_ce opp_ce"));
    assert_eq!(curves.lines().count(), 9);
}
