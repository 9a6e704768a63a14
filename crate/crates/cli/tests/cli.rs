use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const K1: [[f64; 4]; 2] = [[-0.8653, 0.2988, 0.3105, 0.7025], [-0.1511, 0.0537, -0.1108, 0.0930]];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dbcontrol"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

fn read_matrix(path: &Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .map(|l| l.split_whitespace().map(|t| t.parse().unwrap()).collect())
        .collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const POLES: &str = r#"[{"re":-1,"im":1,"multiplicity":1},{"re":-1,"im":-1,"multiplicity":1},
{"re":-2,"im":0,"multiplicity":1},{"re":-3,"im":0,"multiplicity":1}]"#;

#[test]
fn simulate_writes_csv_deterministically() {
    let d = TempDir::new().unwrap();
    write(d.path(), "c.toml", "[system]\nbuiltin = \"aircraft\"\n[experiment]\nsegments = 15\nsegment_length = 0.5\nseed = 9\n");
    let o = run(d.path(), &["simulate", "--config", "c.toml", "--out", "a"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(d.path().join("a/data.csv")).unwrap();
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(head.len(), 2 + 4 + 4 + 2);
    assert_eq!(&head[..2], &["t", "i"]);
    assert!(lines.all(|l| l.split(',').count() == 12));
    assert!(json(&d.path().join("a/pe.json"))["passed"].as_bool().unwrap());

    let o = run(d.path(), &["simulate", "--config", "c.toml", "--out", "b"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(d.path().join("a/data.csv")).unwrap(), fs::read(d.path().join("b/data.csv")).unwrap());
    let o = run(d.path(), &["simulate", "--config", "c.toml", "--out", "c", "--seed", "10"]);
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(d.path().join("a/data.csv")).unwrap(), fs::read(d.path().join("c/data.csv")).unwrap());
}

#[test]
fn simulate_too_short_exits_two() {
    let d = TempDir::new().unwrap();
    write(d.path(), "c.toml", "[system]\nbuiltin = \"aircraft\"\n[experiment]\nsegments = 3\n");
    let o = run(d.path(), &["simulate", "--config", "c.toml", "--out", "o"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("min singular value"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&run(d.path(), &["simulate"])), 1);
    assert_eq!(code(&run(d.path(), &["frobnicate"])), 1);
    assert_eq!(code(&run(d.path(), &["simulate", "--config", "missing.toml"])), 1);
    write(d.path(), "c.toml", "[system]\nbuiltin = \"glider\"\n");
    assert_eq!(code(&run(d.path(), &["simulate", "--config", "c.toml"])), 1);
    assert_eq!(code(&run(d.path(), &["--help"])), 0);
}

#[test]
fn synth_lqr_reproduces_printed_gain() {
    let d = TempDir::new().unwrap();
    write(d.path(), "c.toml", "[system]\nbuiltin = \"aircraft\"\n[synth]\nprocedure = \"lqr\"\nq_scale = 1.0\nr_scale = 2.0\n");
    let o = run(d.path(), &["synth", "--config", "c.toml", "--out", "o"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let k = read_matrix(&d.path().join("o/K.txt"));
    for (row, want) in k.iter().zip(K1) {
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() <= 1e-3, "{a} vs {b}");
        }
    }
    let rep = json(&d.path().join("o/report.json"));
    assert!(rep["details"]["are_residual"].as_f64().unwrap() <= 1e-6);
    assert_eq!(rep["procedure"], "lqr");
    assert!(rep["timing_seconds"].as_f64().is_some());
    assert!(d.path().join("o/P.txt").exists());
}

#[test]
fn solver_tolerance_env_is_accepted() {
    let d = TempDir::new().unwrap();
    write(d.path(), "c.toml", "[system]\nbuiltin = \"aircraft\"\n[synth]\nprocedure = \"lqr\"\nr_scale = 2.0\n");
    let o = bin()
        .current_dir(d.path())
        .env("DBCONTROL_SDP_TOL", "1e-8")
        .args(["synth", "--config", "c.toml", "--out", "o"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn synth_poles_validates_spec() {
    let d = TempDir::new().unwrap();
    write(d.path(), "bad.json", r#"[{"re":-1,"im":1,"multiplicity":1},{"re":-2,"im":0,"multiplicity":3}]"#);
    write(d.path(), "c.toml", "[system]\nbuiltin = \"aircraft\"\n[synth]\nprocedure = \"poles\"\npoles = \"bad.json\"\n");
    let o = run(d.path(), &["synth", "--config", "c.toml", "--out", "o"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("conjugate"));
}

#[test]
fn synth_invoc_rank_deficient_bundle_exits_three() {
    let d = TempDir::new().unwrap();
    write(
        d.path(),
        "b.csv",
        "t,traj_id,u_1,u_2,x_1,x_2,x_3,x_4,xd_1,xd_2,xd_3,xd_4\n0,0,1,0,1,0,0,0,0,0,0,0\n0.1,0,1,0,2,0,0,0,0,0,0,0\n",
    );
    write(d.path(), "c.toml", "[system]\nbuiltin = \"aircraft\"\n[synth]\nprocedure = \"invoc\"\nbundle = \"b.csv\"\n");
    let o = run(d.path(), &["synth", "--config", "c.toml", "--out", "o"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("full row rank"), "{}", stderr(&o));
}

#[test]
fn synth_invoc_round_trip() {
    let d = TempDir::new().unwrap();
    let k: String = K1.iter().map(|r| r.map(|v| v.to_string()).join(" ") + "\n").collect();
    write(d.path(), "k1.txt", &format!("2 4\n{k}"));
    write(d.path(), "c.toml", "[system]\nbuiltin = \"aircraft\"\n[synth]\nprocedure = \"invoc\"\ngain = \"k1.txt\"\n");
    let o = run(d.path(), &["synth", "--config", "c.toml", "--out", "o"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep = json(&d.path().join("o/report.json"));
    assert!(rep["details"]["round_trip_max_entry"].as_f64().unwrap() <= 1e-3);
    assert!(d.path().join("o/Q.txt").exists() && d.path().join("o/bundle.csv").exists());
}

#[test]
fn synth_trajref_on_scalar_files() {
    // x' = x + u under K = 3 gives x(t) = e^{-2t}.
    let d = TempDir::new().unwrap();
    write(d.path(), "a.txt", "1 1\n1\n");
    write(d.path(), "b.txt", "1 1\n1\n");
    let mut refs = String::from("t,i,x_1,xd_1\n");
    // Reference times must sit on the data grid {0, 0.25, 0.5}.
    for s in 0..3 {
        let t = 0.25 * s as f64;
        let x = (-2.0 * t).exp();
        refs.push_str(&format!("{t},0,{x:.17e},{:.17e}\n", -2.0 * x));
    }
    write(d.path(), "refs.csv", &refs);
    write(
        d.path(),
        "c.toml",
        "[system]\na = \"a.txt\"\nb = \"b.txt\"\n[experiment]\nsegments = 5\n[synth]\nprocedure = \"trajref\"\nreferences = \"refs.csv\"\n",
    );
    let o = run(d.path(), &["synth", "--config", "c.toml", "--out", "o"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let k = read_matrix(&d.path().join("o/K.txt"));
    assert!((k[0][0] - 3.0).abs() <= 1e-6, "{k:?}");
    let rep = json(&d.path().join("o/report.json"));
    assert!(rep["details"]["candidate_cost"].as_f64().unwrap() <= 1e-10);
}

#[test]
fn verify_reproduces_synth_report() {
    let d = TempDir::new().unwrap();
    write(d.path(), "poles.json", POLES);
    write(d.path(), "c.toml", "[system]\nbuiltin = \"aircraft\"\n[synth]\nprocedure = \"poles\"\npoles = \"poles.json\"\nrestarts = 3\n");
    let o = run(d.path(), &["synth", "--config", "c.toml", "--out", "o"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep = json(&d.path().join("o/report.json"));
    assert!(rep["checks"]["placement_error"].as_f64().unwrap() <= 1e-6);

    let o = run(
        d.path(),
        &[
            "verify", "--gain", "o/K.txt", "--data", "o/data.csv", "--system", "aircraft", "--poles", "poles.json", "--out", "v",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(json(&d.path().join("v/verify.json")), rep["checks"]);

    // Model-only and data-only modes.
    let o = run(d.path(), &["verify", "--gain", "o/K.txt", "--system", "aircraft"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("model: stabilizing = true"));
    let o = run(d.path(), &["verify", "--gain", "o/K.txt", "--data", "o/data.csv"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("data:  stabilizing = true"));
    let o = run(d.path(), &["verify", "--gain", "o/K.txt", "--data", "o/data.csv", "--poles", "poles.json"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn bench_is_reproducible_and_exact_without_noise() {
    let d = TempDir::new().unwrap();
    write(d.path(), "poles.json", POLES);
    write(
        d.path(),
        "c.toml",
        "[system]\nbuiltin = \"aircraft\"\n[bench]\ntrials = 1\nnoise_levels = [0.0, 1e-3]\nrestarts = 2\npoles = \"poles.json\"\n",
    );
    let o = run(d.path(), &["bench", "--config", "c.toml", "--out", "a"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o2 = run(d.path(), &["bench", "--config", "c.toml", "--out", "b"]);
    assert_eq!(o.stdout, o2.stdout);
    let csv = fs::read_to_string(d.path().join("a/bench.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(d.path().join("b/bench.csv")).unwrap());
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "noise,metric,mean,std,trials,failures");
    let exact: Vec<f64> = lines
        .filter(|l| l.starts_with("0.0,"))
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(exact.len(), 2);
    assert!(exact.iter().all(|e| *e <= 1e-6), "{exact:?}");
}

#[test]
fn system_manifest_source() {
    let d = TempDir::new().unwrap();
    fs::create_dir(d.path().join("sys")).unwrap();
    write(d.path(), "sys/a.txt", "2 2\n0 1\n-2 -3\n");
    write(d.path(), "sys/b.txt", "2 1\n0\n1\n");
    write(d.path(), "sys/manifest.json", r#"{"systems":[{"name":"osc","a":"a.txt","b":"b.txt"}]}"#);
    write(d.path(), "c.toml", "[system]\nmanifest = \"sys\"\nname = \"osc\"\n[experiment]\nsegments = 6\n");
    let o = run(d.path(), &["simulate", "--config", "c.toml", "--out", "o"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    write(d.path(), "d.toml", "[system]\nmanifest = \"sys\"\nname = \"nope\"\n");
    assert_eq!(code(&run(d.path(), &["simulate", "--config", "d.toml"])), 1);
}
