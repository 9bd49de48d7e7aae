use statrs::distribution::{Beta, Binomial, Continuous, Discrete};
use statrs::function::gamma::ln_gamma;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn swf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swf")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = swf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_rows(p: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(p).unwrap();
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

const IDENTITY: &str = r#"{"theta":[1,1],"clock":{"kind":"sub","family":"identity"}}"#;
const INVERSE_HALF: &str = r#"{"theta":[1,1],"clock":{"kind":"inverse","family":"stable","params":{"alpha":0.5}}}"#;
const STABLE: &str = r#"{"theta":[0.5,0.5],"clock":{"kind":"sub","family":"stable","params":{"alpha":0.7}}}"#;

#[test]
fn eigen_decay_values_and_shape() {
    let d = TempDir::new().unwrap();
    let id = write(d.path(), "id.json", IDENTITY);
    let inv = write(d.path(), "inv.json", INVERSE_HALF);
    let out = d.path().join("e.csv");
    ok(&["eigen-decay", "--model", s(&id), "--out", s(&out), "--n-list", "1", "--times", "1"]);
    let v: f64 = read_rows(&out)[0][3].parse().unwrap();
    assert!((v - (-1f64).exp()).abs() < 1e-12);

    ok(&["eigen-decay", "--model", s(&inv), "--out", s(&out), "--n-list", "1,2,5"]);
    let rows = read_rows(&out);
    let at_one = rows.iter().find(|r| r[0] == "1.0" && r[1] == "1").unwrap();
    // E_{1/2}(-1) = e erfc(1)
    assert!((at_one[3].parse::<f64>().unwrap() - 0.42758357615580705).abs() < 1e-6);
    assert!((at_one[4].parse::<f64>().unwrap() - 0.42758357615580705).abs() < 1e-6);
    for n in ["1", "2", "5"] {
        let col: Vec<f64> = rows.iter().filter(|r| r[1] == n).map(|r| r[3].parse().unwrap()).collect();
        assert!(col.iter().all(|v| *v > 0.0 && *v <= 1.0));
        assert!(col.windows(2).all(|w| w[1] <= w[0]));
    }
    assert!(d.path().join("e.csv.manifest.json").exists());
}

#[test]
fn seeded_runs_are_byte_identical_across_worker_counts() {
    let d = TempDir::new().unwrap();
    let m = write(d.path(), "m.json", STABLE);
    let (a, b) = (d.path().join("a.csv"), d.path().join("b.csv"));
    let base = ["sample-transition", "--model", s(&m), "--t", "0.25,1", "--x", "0.3,0.7", "--n", "5000", "--seed", "9"];
    ok(&[&base[..], &["--out", s(&a), "--workers", "1"]].concat());
    ok(&[&base[..], &["--out", s(&b), "--workers", "3"]].concat());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let man: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("b.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(man["seed"], 9);
    assert_eq!(man["workers"], 3);
    assert_eq!(man["command"], "sample-transition");
}

#[test]
fn error_exit_codes_carry_json() {
    let d = TempDir::new().unwrap();
    let id = write(d.path(), "id.json", IDENTITY);
    let out = d.path().join("f.json");
    let missing = swf(&["filter", "--model", s(&id), "--data", s(&d.path().join("none.csv")), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(4));
    let err: serde_json::Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");

    let bad = write(d.path(), "bad.json", r#"{"theta":[1,1],"clock":{"kind":"inverse","family":"poisson","params":{"c":1}}}"#);
    let data = write(d.path(), "data.csv", "t,y1,y2\n0,1,1\n");
    let cfg = swf(&["filter", "--model", s(&bad), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(cfg.status.code(), Some(2));

    let inv = write(d.path(), "inv.json", INVERSE_HALF);
    let skewed = write(d.path(), "skewed.csv", "t,y1,y2\n0,40,0\n1,0,40\n2,40,0\n3,0,40\n");
    let num = swf(&["nonmarkov-filter", "--model", s(&inv), "--data", s(&skewed), "--out", s(&out), "--n", "20", "--ess-floor", "19.9"]);
    assert_eq!(num.status.code(), Some(3), "{}", String::from_utf8_lossy(&num.stderr));
    let err: serde_json::Value = serde_json::from_slice(&num.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "numerical");
}

#[test]
fn dual_path_from_thirty() {
    let d = TempDir::new().unwrap();
    let m = write(d.path(), "m.json", STABLE);
    let out = d.path().join("d.csv");
    ok(&["dual-path", "--model", s(&m), "--out", s(&out), "--start-total", "30", "--t-max", "2", "--t-step", "0.1", "--n", "5"]);
    let rows = read_rows(&out);
    assert_eq!(rows.len(), 5 * 21);
    for path in rows.chunks(21) {
        assert_eq!(path[0][2], "30");
        let totals: Vec<u64> = path.iter().map(|r| r[2].parse().unwrap()).collect();
        assert!(totals.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn dual_weight_tables_are_normalized() {
    let d = TempDir::new().unwrap();
    let m = write(d.path(), "m.json", STABLE);
    let out = d.path().join("w.csv");
    ok(&["dual-weights", "--model", s(&m), "--out", s(&out), "--t", "0.5,2"]);
    for t in ["0.5", "2.0"] {
        let total: f64 = read_rows(&out).iter().filter(|r| r[0] == t).map(|r| r[2].parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-8, "{t}: {total}");
    }
}

// Classical weights q_m(t) summed directly from their alternating series.
fn classical_q(theta: f64, t: f64, m: usize) -> f64 {
    let mut v = 0.0;
    for j in m..m + 60 {
        let lam = j as f64 * (j as f64 + theta - 1.0) / 2.0;
        let log_a = (theta + 2.0 * j as f64 - 1.0).ln() + ln_gamma(theta + (m + j) as f64 - 1.0)
            - ln_gamma(theta + m as f64)
            - ln_gamma(m as f64 + 1.0)
            - ln_gamma((j - m) as f64 + 1.0);
        let term = (log_a - lam * t).exp();
        v += if (j - m) % 2 == 0 { term } else { -term };
    }
    v
}

fn density(t: f64, x: f64, y: f64) -> f64 {
    let mut v = 0.0;
    for m in 0..40 {
        let q = classical_q(2.0, t, m);
        let bin = Binomial::new(x, m as u64).unwrap();
        for l in 0..=m {
            v += q * bin.pmf(l as u64) * Beta::new(1.0 + l as f64, 1.0 + (m - l) as f64).unwrap().pdf(y);
        }
    }
    v
}

#[test]
fn synthetic_data_round_trip_matches_quadrature() {
    let d = TempDir::new().unwrap();
    let m = write(d.path(), "id.json", IDENTITY);
    let data = d.path().join("data.csv");
    ok(&["synth-data", "--model", s(&m), "--out", s(&data), "--times", "0,0.5,1", "--n-obs", "4", "--seed", "5"]);
    let obs: Vec<(f64, u64, u64)> =
        read_rows(&data).iter().map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap(), r[2].parse().unwrap())).collect();
    let trace = d.path().join("f.json");
    ok(&["filter", "--model", s(&m), "--data", s(&data), "--out", s(&trace)]);
    let smoothed = d.path().join("s.json");
    ok(&["smooth", "--model", s(&m), "--data", s(&data), "--out", s(&smoothed)]);

    // forward and backward passes on a midpoint grid
    let n = 300;
    let grid: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let kernel: Vec<Vec<f64>> = grid.iter().map(|&x| grid.iter().map(|&y| density(0.5, x, y) / n as f64).collect()).collect();
    let lik = |(_, a, b): (f64, u64, u64), x: f64| x.powi(a as i32) * (1.0 - x).powi(b as i32);
    let mut fwd = vec![vec![1.0 / n as f64; n]];
    for (i, o) in obs.iter().enumerate() {
        let prior: Vec<f64> = if i == 0 {
            fwd[0].clone()
        } else {
            (0..n).map(|j| (0..n).map(|k| fwd[i][k] * kernel[k][j]).sum()).collect()
        };
        let post: Vec<f64> = prior.iter().zip(&grid).map(|(p, x)| p * lik(*o, *x)).collect();
        let z: f64 = post.iter().sum();
        fwd.push(post.iter().map(|p| p / z).collect());
    }
    let mut back = vec![vec![1.0; n]; obs.len()];
    for i in (0..obs.len() - 1).rev() {
        back[i] = (0..n).map(|k| (0..n).map(|j| kernel[k][j] * lik(obs[i + 1], grid[j]) * back[i + 1][j]).sum()).collect();
    }
    let mean = |w: &[f64]| w.iter().zip(&grid).map(|(p, x)| p * x).sum::<f64>() / w.iter().sum::<f64>();

    let tr: serde_json::Value = serde_json::from_str(&fs::read_to_string(&trace).unwrap()).unwrap();
    let sm: serde_json::Value = serde_json::from_str(&fs::read_to_string(&smoothed).unwrap()).unwrap();
    for i in 0..obs.len() {
        let comps = tr["steps"][i]["filtered"]["components"].as_array().unwrap();
        let filtered_mean: f64 = comps
            .iter()
            .map(|c| {
                let m0 = c["m"][0].as_f64().unwrap();
                let m1 = c["m"][1].as_f64().unwrap();
                c["w"].as_f64().unwrap() * (1.0 + m0) / (2.0 + m0 + m1)
            })
            .sum();
        assert!((filtered_mean - mean(&fwd[i + 1])).abs() < 1e-4, "filtered {i}");
        let smooth_w: Vec<f64> = fwd[i + 1].iter().zip(&back[i]).map(|(a, b)| a * b).collect();
        let sm_mean = sm[i]["mean"][0].as_f64().unwrap();
        assert!((sm_mean - mean(&smooth_w)).abs() < 1e-4, "smoothed {i}");
    }
}

#[test]
fn clock_posterior_and_nonmarkov_filter_run() {
    let d = TempDir::new().unwrap();
    let m = write(d.path(), "inv.json", INVERSE_HALF);
    let data = write(d.path(), "data.csv", "t,y1,y2\n0,2,0\n0.5,1,1\n");
    let out = d.path().join("cp.csv");
    ok(&["clock-posterior", "--model", s(&m), "--data", s(&data), "--out", s(&out), "--n", "50", "--seed", "1"]);
    let rows = read_rows(&out);
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r[3] != "0.0" || r[4] == "0.0"));
    let trace = d.path().join("nm.json");
    for est in ["is", "rejection"] {
        ok(&["nonmarkov-filter", "--model", s(&m), "--data", s(&data), "--out", s(&trace), "--n", "200", "--estimator", est]);
        let tr: serde_json::Value = serde_json::from_str(&fs::read_to_string(&trace).unwrap()).unwrap();
        assert!(tr["log_marginal_likelihood"].as_f64().unwrap() < 0.0);
        assert!(tr["steps"][1]["filtered_se"].is_array());
    }
}
