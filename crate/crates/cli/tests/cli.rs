use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use agmonlab::grid::dist;
use agmonlab::io::{read_field, FieldData};
use serde_json::Value;
use tempfile::TempDir;

const CONSTANT: &str = "[potential.electric]\nkind = \"constant\"\nvalue = 1.0\n";
const ZERO: &str = "[potential.electric]\nkind = \"constant\"\nvalue = 0.0\n";
const SQUARE: &str = "[potential.electric]\nkind = \"radial_power\"\nalpha = 2.0\n";
const M_CONST: f64 = 2.046_653_415_892_977;

fn grid(half: f64, h: f64) -> String {
    format!("\n[grid]\nlo = [{lo}, {lo}, {lo}]\nhi = [{half}, {half}, {half}]\nh = {h}\n", lo = -half)
}

struct Run {
    dir: TempDir,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn exec(&self, cmd: &str, extra: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_agmonlab"))
            .arg(cmd)
            .arg("--config")
            .arg(self.dir.path().join("run.toml"))
            .arg("--out")
            .arg(self.out())
            .args(extra)
            .env_remove("AGMONLAB_THREADS")
            .output()
            .unwrap()
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.out().join(name)).unwrap()).unwrap()
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field(path: &Path) -> FieldData {
    read_field(&mut fs::File::open(path).unwrap()).unwrap()
}

#[test]
fn misspelled_key_is_named_with_its_line() {
    let run = Run::new(&format!("[ptential.electric]\nkind = \"constant\"\nvalue = 1.0\n{}", grid(1.0, 0.25)));
    let o = run.exec("compute-m", &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("ptential") && err.contains("line 1"), "{err}");
}

#[test]
fn compute_m_constant_and_square() {
    let run = Run::new(&format!("{CONSTANT}{}", grid(2.0, 0.125)));
    let o = run.exec("compute-m", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("# resolved config, hash"));
    let s = run.json("m_summary.json");
    for key in ["untruncated_m_min", "untruncated_m_max"] {
        let m = s[key].as_f64().unwrap();
        assert!((m - M_CONST).abs() <= 0.02 * M_CONST, "{key} = {m}");
    }
    let FieldData::Scalar(m) = field(&run.out().join("m.agf")) else { panic!("m.agf holds a scalar field") };
    assert_eq!(m.grid().dims(), [33; 3]);

    let run = Run::new(&format!("{SQUARE}{}", grid(2.0, 0.125)));
    assert_eq!(run.exec("compute-m", &[]).status.code(), Some(0));
    let m0 = run.json("m_summary.json")["summary"]["m_min"].as_f64().unwrap();
    assert!((m0 - 1.259_115_8).abs() <= 0.02 * 1.259_115_8, "m(0) = {m0}");
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn distance_rows_and_source_sets() {
    let run = Run::new(&format!("{CONSTANT}{}", grid(2.0, 0.125)));
    let o = run.exec("distance", &["--source", "0,0,0", "--target", "1,0,0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = csv_rows(&run.out().join("distances.csv"));
    assert_eq!(rows.len(), 1);
    assert!((rows[0][3] - M_CONST).abs() <= 0.08 * M_CONST, "{:?}", rows[0]);

    // A set distance is the pointwise minimum over single-member distances.
    let single = |p: &str| {
        let r = Run::new(&format!("{CONSTANT}{}", grid(2.0, 0.125)));
        assert_eq!(r.exec("distance", &["--source", p]).status.code(), Some(0));
        let FieldData::Scalar(d) = field(&r.out().join("d.agf")) else { panic!() };
        d
    };
    let (a, b) = (single("-1,0,0"), single("1,0.5,0"));
    let o = run.exec("distance", &["--source", "-1,0,0", "--source", "1,0.5,0"]);
    assert_eq!(o.status.code(), Some(0));
    let FieldData::Scalar(set) = field(&run.out().join("d.agf")) else { panic!() };
    for i in 0..set.values().len() {
        assert!((set.get(i) - a.get(i).min(b.get(i))).abs() <= 1e-12);
    }
    assert_eq!(run.json("distance_summary.json")["sources"].as_array().unwrap().len(), 2);
}

#[test]
fn unconverged_metric_is_refused() {
    // Φ stays below 1 out to the box half-diameter everywhere.
    let run = Run::new(&format!("[potential.electric]\nkind = \"constant\"\nvalue = 0.01\n{}", grid(1.0, 0.25)));
    let o = run.exec("distance", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unconverged"), "{}", stderr(&o));
}

#[test]
fn solve_free_column_and_resolvent_sweep() {
    let cfg = format!("{ZERO}{}\n[operator]\nt_list = [0.5, 1.0, 2.0]\n", grid(2.0, 0.125));
    let run = Run::new(&cfg);
    let o = run.exec("solve", &["--source", "0,0,0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let FieldData::Complex(col) = field(&run.out().join("gamma_0.agf")) else { panic!("complex column") };
    let g = col.grid().clone();
    let y = g.nearest_index(&[0.0; 3]).unwrap();
    let h = g.spacing();
    for x in 0..g.len() {
        let r = dist(&g.point(x), &g.point(y));
        if (4.0 * h..=0.5).contains(&r) {
            let exact = 1.0 / (4.0 * PI * r);
            assert!((col.get(x).re - exact).abs() <= 0.1 * exact, "r = {r}");
        }
    }
    for t in ["0.5", "1", "2"] {
        let FieldData::Complex(_) = field(&run.out().join(format!("resolvent_t{t}_0.agf"))) else { panic!() };
    }
    let manifest = run.json("manifest.json");
    let hash = manifest["config_hash"].as_str().unwrap();
    assert_eq!(run.json("solve_summary.json")["config_hash"].as_str(), Some(hash));
    let listed: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["file"].as_str().unwrap()).collect();
    for f in ["gamma_0.agf", "resolvent_t0.5_0.agf", "resolvent_t1_0.agf", "resolvent_t2_0.agf"] {
        assert!(listed.contains(&f), "{f} missing from manifest");
    }
}

#[test]
fn boundary_source_is_a_precondition_error() {
    let run = Run::new(&format!("{CONSTANT}{}", grid(1.0, 0.25)));
    let o = run.exec("solve", &["--source", "-1,0,0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).to_lowercase().contains("boundary"), "{}", stderr(&o));
}

fn statuses(run: &Run) -> Vec<(String, String)> {
    run.json("summary.json")["checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["check"].as_str().unwrap().to_string(), c["status"].as_str().unwrap().to_string()))
        .collect()
}

#[test]
fn magnetic_harnack_is_skipped_not_failed() {
    let cfg = format!(
        "{SQUARE}\n[potential.magnetic]\nuniform = [0.0, 0.0, 1.0]\n{}\n[checks]\nrun = [\"harnack\", \"gauge\"]\n",
        grid(2.0, 0.25)
    );
    let run = Run::new(&cfg);
    let o = run.exec("verify", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = statuses(&run);
    assert!(s.contains(&("harnack".into(), "skipped".into())), "{s:?}");
    assert!(s.contains(&("gauge".into(), "pass".into())), "{s:?}");
    assert!(run.json("harnack.json")["note"].as_str().unwrap().contains("unsupported"));
}

#[test]
fn zero_potential_suite_takes_the_no_decay_branch() {
    let run = Run::new(&format!("{ZERO}{}", grid(2.0, 0.125)));
    let o = run.exec("verify", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let env = run.json("envelope.json");
    assert_eq!(env["measurement"]["no_decay"], Value::Bool(true));
    assert!(env["measurement"]["slope_euclid"].as_f64().unwrap().abs() <= 0.05);
    assert!(!statuses(&run).iter().any(|(_, s)| s == "fail"));
}

#[test]
fn failing_check_exits_one_and_report_agrees() {
    let cfg =
        format!("{CONSTANT}{}\n[checks]\nrun = [\"envelope\"]\n\n[tolerances]\ndecay_floor = 5.0\n", grid(2.0, 0.2));
    let run = Run::new(&cfg);
    assert_eq!(run.exec("verify", &[]).status.code(), Some(1));
    assert_eq!(run.json("summary.json")["pass"], Value::Bool(false));
    let o = Command::new(env!("CARGO_BIN_EXE_agmonlab")).arg("report").arg("--out").arg(run.out()).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("envelope"));
}

#[test]
fn threads_from_environment_do_not_change_outputs() {
    let cfg = format!("{SQUARE}{}\n[checks]\nrun = [\"envelope\", \"harnack\"]\n", grid(2.0, 0.2));
    let a = Run::new(&cfg);
    assert_eq!(a.exec("verify", &["--seed", "3"]).status.code(), Some(0));
    let b = Run::new(&cfg);
    let o = Command::new(env!("CARGO_BIN_EXE_agmonlab"))
        .args(["verify", "--seed", "3", "--config"])
        .arg(b.dir.path().join("run.toml"))
        .arg("--out")
        .arg(b.out())
        .env("AGMONLAB_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    for name in ["envelope.json", "harnack.json", "summary.json", "regression.csv", "manifest.json"] {
        assert_eq!(fs::read(a.out().join(name)).unwrap(), fs::read(b.out().join(name)).unwrap(), "{name}");
    }
    let seed = a.json("manifest.json")["resolved_config"]["sampling"]["seed"].as_u64();
    assert_eq!(seed, Some(3));
}
