//! End-to-end tests that drive the `endor` binary the way a shell user would:
//! every command runs in its own temporary directory and the produced files
//! and exit codes are checked against the documented contract.

use std::path::Path;
use std::process::{Command, Output};
use tempfile::TempDir;

fn bin(dir: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_endor"));
    cmd.current_dir(dir);
    // Keep the ambient environment from smuggling in a config.
    cmd.env_remove("ENDOR_CONFIG");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Parse a labeled-lines CSV into (label, frequency, weight) rows.
fn read_lines_csv(path: &Path) -> Vec<(String, f64, f64)> {
    let text = std::fs::read_to_string(path).expect("lines file readable");
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("label,") || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        assert!(fields.len() >= 3, "short row {line:?}");
        rows.push((
            fields[0].to_string(),
            fields[1].parse::<f64>().unwrap(),
            fields[2].parse::<f64>().unwrap(),
        ));
    }
    rows
}

type Meta = Vec<(String, String)>;

/// Parse a spectrum CSV into metadata and (frequency, signal) points.
fn read_spectrum_csv(path: &Path) -> (Meta, Vec<(f64, f64)>) {
    let text = std::fs::read_to_string(path).expect("spectrum readable");
    let mut meta = Vec::new();
    let mut pts = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# ") {
            let (k, v) = rest.split_once('=').expect("meta key=value");
            meta.push((k.to_string(), v.to_string()));
        } else if !line.starts_with("frequency_MHz") && !line.trim().is_empty() {
            let (f, s) = line.split_once(',').expect("two columns");
            pts.push((f.parse().unwrap(), s.parse().unwrap()));
        }
    }
    (meta, pts)
}

fn meta_value<'a>(meta: &'a [(String, String)], key: &str) -> Option<&'a str> {
    meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn frequency_of(rows: &[(String, f64, f64)], label: &str) -> f64 {
    rows.iter()
        .find(|(l, _, _)| l == label)
        .unwrap_or_else(|| panic!("no row labeled {label}"))
        .1
}

fn json_report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).expect("report readable"))
        .expect("report is JSON")
}

#[test]
fn predict_nmr_labels_reference_lines() {
    let dir = TempDir::new().unwrap();
    let out = run(bin(dir.path()).args([
        "predict",
        "--channel",
        "nmr",
        "--b-z-tesla",
        "0.45",
        "-o",
        "lines.csv",
    ]));
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let rows = read_lines_csv(&dir.path().join("lines.csv"));
    let f1 = frequency_of(&rows, "I");
    let f2 = frequency_of(&rows, "II");
    assert!((f1 - 48.0125).abs() < 0.01, "line I at {f1}");
    assert!((f2 - 84.1669).abs() < 0.01, "line II at {f2}");
    // Ten single-quantum nuclear lines, each labeled with a numeral.
    let numerals = rows
        .iter()
        .filter(|(l, _, _)| !l.is_empty() && l.chars().all(|c| "IVX".contains(c)))
        .count();
    assert_eq!(numerals, 10, "rows: {rows:?}");
}

#[test]
fn predict_with_huge_floor_writes_empty_table() {
    let dir = TempDir::new().unwrap();
    let out = run(bin(dir.path()).args(["predict", "--weight-floor", "1e9", "-o", "none.csv"]));
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    assert!(read_lines_csv(&dir.path().join("none.csv")).is_empty());
}

#[test]
fn predict_spinless_system_has_single_electron_line() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("spinless.toml"),
        "[spin_system]\ni_nuclear = 0.0\na_hyperfine_mhz = [0.0, 0.0, 0.0]\nkappa_mhz = 0.0\ng_n = 0.0\n",
    )
    .unwrap();
    let out = run(bin(dir.path()).args([
        "--config",
        "spinless.toml",
        "predict",
        "--channel",
        "esr",
        "-o",
        "one.csv",
    ]));
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let rows = read_lines_csv(&dir.path().join("one.csv"));
    assert_eq!(rows.len(), 1, "rows: {rows:?}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[spin_system]\nbogus = 1\n").unwrap();
    let out = run(bin(dir.path()).args(["--config", "bad.toml", "predict"]));
    assert_eq!(code(&out), 2);
    assert!(
        stderr_of(&out).contains("bogus"),
        "stderr: {}",
        stderr_of(&out)
    );
}

#[test]
fn env_var_supplies_default_config() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("env.toml");
    std::fs::write(&cfg, "seed = 777\n").unwrap();
    let mut cmd = bin(dir.path());
    cmd.env("ENDOR_CONFIG", &cfg);
    let out = run(cmd.args(["simulate", "esr", "--noise-sigma", "0.001", "-o", "env.csv"]));
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let (meta, _) = read_spectrum_csv(&dir.path().join("env.csv"));
    assert_eq!(meta_value(&meta, "seed"), Some("777"));
}

#[test]
fn sweep_endpoints_match_predict() {
    let dir = TempDir::new().unwrap();
    let out = run(bin(dir.path()).args([
        "sweep",
        "--b-start-tesla",
        "0.3",
        "--b-end-tesla",
        "0.9",
        "--steps",
        "2",
        "-o",
        "sweep.csv",
    ]));
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col_i = header.iter().position(|h| *h == "I_MHz").expect("I column");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for (row, b) in rows.iter().zip(["0.3", "0.9"]) {
        assert_eq!(row[0], b);
        let swept: f64 = row[col_i].parse().unwrap();
        let out = run(bin(dir.path()).args([
            "predict",
            "--channel",
            "nmr",
            "--b-z-tesla",
            b,
            "-o",
            "point.csv",
        ]));
        assert_eq!(code(&out), 0);
        let predicted = frequency_of(&read_lines_csv(&dir.path().join("point.csv")), "I");
        assert!(
            (swept - predicted).abs() <= 1e-9 * predicted.abs(),
            "sweep endpoint {swept} vs predict {predicted} at {b} T"
        );
    }
}

#[test]
fn sweep_columns_are_monotone_in_field() {
    let dir = TempDir::new().unwrap();
    let out = run(bin(dir.path()).args([
        "sweep",
        "--b-start-tesla",
        "0.2",
        "--b-end-tesla",
        "1.4",
        "--steps",
        "13",
        "-o",
        "sweep.csv",
    ]));
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let column = |name: &str| -> Vec<f64> {
        let idx = header.iter().position(|h| *h == name).expect(name);
        text.lines()
            .skip(1)
            .map(|l| l.split(',').nth(idx).unwrap().parse().unwrap())
            .collect()
    };
    // The lowest nuclear line shifts linearly with the field, and the
    // electron-nuclear state mixing weakens as the electron Zeeman gap grows.
    for name in ["I_MHz", "hybridization"] {
        let col = column(name);
        assert_eq!(col.len(), 13);
        assert!(
            col.windows(2).all(|w| w[1] < w[0]),
            "{name} not strictly decreasing: {col:?}"
        );
    }
}

#[test]
fn sweep_rejects_inverted_range() {
    let dir = TempDir::new().unwrap();
    let out = run(bin(dir.path()).args([
        "sweep",
        "--b-start-tesla",
        "1.0",
        "--b-end-tesla",
        "0.2",
    ]));
    assert_eq!(code(&out), 2);
    assert!(stderr_of(&out).contains("ascending"));
}

#[test]
fn same_seed_gives_byte_identical_spectra() {
    let dir = TempDir::new().unwrap();
    for name in ["a.csv", "b.csv"] {
        let out = run(bin(dir.path()).args([
            "simulate",
            "esr",
            "--noise-sigma",
            "0.002",
            "-o",
            name,
        ]));
        assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    }
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert_eq!(a, b, "same config + seed must reproduce bytes");
}

#[test]
fn esr_simulate_fit_round_trip_recovers_centers() {
    let dir = TempDir::new().unwrap();
    let out = run(bin(dir.path()).args([
        "simulate",
        "esr",
        "--noise-sigma",
        "0.002",
        "-o",
        "esr.csv",
    ]));
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let out = run(bin(dir.path()).args(["fit", "esr", "--input", "esr.csv", "-o", "fit.json"]));
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let report = json_report(&dir.path().join("fit.json"));
    assert_eq!(report["converged"], serde_json::Value::Bool(true));

    let out = run(bin(dir.path()).args(["predict", "--channel", "esr", "-o", "truth.csv"]));
    assert_eq!(code(&out), 0);
    // Keep only the strong electron-flip lines; the esr channel also lists
    // weakly allowed transitions picked up through state mixing.
    let mut truth: Vec<f64> = read_lines_csv(&dir.path().join("truth.csv"))
        .iter()
        .filter(|r| r.2 > 0.01)
        .map(|r| r.1)
        .collect();
    truth.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let fitted: Vec<f64> = report["peaks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["center_mhz"].as_f64().unwrap())
        .collect();
    assert_eq!(fitted.len(), truth.len());
    for (f, t) in fitted.iter().zip(&truth) {
        assert!((f - t).abs() < 0.5, "fitted {f} vs generator {t}");
    }
}

#[test]
fn fit_on_constant_spectrum_exits_3_with_report() {
    let dir = TempDir::new().unwrap();
    let mut csv = String::from("frequency_MHz,signal\n");
    for k in 0..120 {
        csv.push_str(&format!("{},1.0\n", 3600.0 + k as f64 * 5.0));
    }
    std::fs::write(dir.path().join("flat.csv"), csv).unwrap();
    let out = run(bin(dir.path()).args(["fit", "esr", "--input", "flat.csv", "-o", "flat.json"]));
    assert_eq!(code(&out), 3, "{}", stderr_of(&out));
    let report = json_report(&dir.path().join("flat.json"));
    assert_eq!(report["converged"], serde_json::Value::Bool(false));
}

#[test]
fn fit_malformed_input_exits_2() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "frequency_MHz,signal\n1,2\n3,oops\n").unwrap();
    let out = run(bin(dir.path()).args(["fit", "nmr", "--input", "bad.csv"]));
    assert_eq!(code(&out), 2);
    assert!(stderr_of(&out).contains("line 3"), "{}", stderr_of(&out));
}

#[test]
fn underfitting_raises_misfit_warning() {
    let dir = TempDir::new().unwrap();
    let out = run(bin(dir.path()).args([
        "simulate",
        "esr",
        "--noise-sigma",
        "0.001",
        "-o",
        "six.csv",
    ]));
    assert_eq!(code(&out), 0);
    // Six-line data described with four free lines: the leftover structure
    // must trip the residual-vs-noise check.
    let out = run(bin(dir.path()).args([
        "fit", "esr", "--input", "six.csv", "--n-peaks", "4", "--free", "-o", "under.json",
    ]));
    let report = json_report(&dir.path().join("under.json"));
    let warning = report["warning"].as_str().expect("warning set");
    assert!(warning.contains("noise estimate"), "warning: {warning}");
    assert!(stderr_of(&out).contains("noise estimate"));
}

#[test]
fn endor_zero_drive_is_flat() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("nodrive.toml"), "[drive]\nv_nmr_mv = 0.0\n").unwrap();
    let out = run(bin(dir.path()).args([
        "--config",
        "nodrive.toml",
        "simulate",
        "endor",
        "--f-start-mhz",
        "40",
        "--f-end-mhz",
        "95",
        "--step-mhz",
        "0.5",
        "-o",
        "flat.csv",
    ]));
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let (_, pts) = read_spectrum_csv(&dir.path().join("flat.csv"));
    let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    assert!(hi - lo <= 1e-12 * hi.abs(), "flat scan spans {lo}..{hi}");
}

#[test]
fn endor_dips_at_nuclear_lines() {
    let dir = TempDir::new().unwrap();
    let out = run(bin(dir.path()).args([
        "simulate",
        "endor",
        "--f-start-mhz",
        "40",
        "--f-end-mhz",
        "95",
        "--step-mhz",
        "0.25",
        "-o",
        "endor.csv",
    ]));
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let (meta, pts) = read_spectrum_csv(&dir.path().join("endor.csv"));
    assert_eq!(meta_value(&meta, "probed_mi"), Some("-5/2"));
    let baseline = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let near = |f0: f64| {
        pts.iter()
            .filter(|(f, _)| (f - f0).abs() < 0.5)
            .map(|p| p.1)
            .fold(f64::INFINITY, f64::min)
    };
    // Transitions I and II share the probed m_I = -5/2 sublevel, so driving
    // either empties it.
    assert!(near(48.0) < 0.7 * baseline, "line I dip {}", near(48.0));
    assert!(near(84.2) < 0.7 * baseline, "line II dip {}", near(84.2));
}

#[test]
fn endor_map_writes_matrix_and_zero_mean_variant() {
    let dir = TempDir::new().unwrap();
    let out = run(bin(dir.path()).args([
        "simulate",
        "endor-map",
        "--f-nmr-start-mhz",
        "44",
        "--f-nmr-end-mhz",
        "90",
        "--f-nmr-step-mhz",
        "2",
        "--f-esr-step-mhz",
        "40",
        "-o",
        "map.csv",
    ]));
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));

    let parse = |name: &str| -> (Vec<f64>, Vec<Vec<f64>>) {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(header[0], "f_nmr_MHz\\f_esr_MHz");
        let cols: Vec<f64> = header[1..].iter().map(|s| s.parse().unwrap()).collect();
        let rows = lines
            .map(|l| l.split(',').skip(1).map(|s| s.parse().unwrap()).collect())
            .collect();
        (cols, rows)
    };
    let (cols, data) = parse("map.csv");
    let (cols_sub, data_sub) = parse("map_colsub.csv");
    assert_eq!(cols, cols_sub);
    assert_eq!(data.len(), 24, "one row per radio frequency");
    assert_eq!(data[0].len(), cols.len());
    for j in 0..cols.len() {
        let mean: f64 = data_sub.iter().map(|r| r[j]).sum::<f64>() / data_sub.len() as f64;
        assert!(mean.abs() < 1e-9, "column {j} mean {mean}");
        // The subtracted column must be the raw column minus its own mean.
        let raw_mean: f64 = data.iter().map(|r| r[j]).sum::<f64>() / data.len() as f64;
        assert!((data[0][j] - raw_mean - data_sub[0][j]).abs() < 1e-9);
    }
}

#[test]
fn calibrate_recovers_dataset_truth_and_is_idempotent() {
    let dir = TempDir::new().unwrap();
    let out = run(bin(dir.path()).args(["make-dataset", "--noise-free", "--out", "ds"]));
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));

    let list = |prefix: &str| -> Vec<String> {
        let mut v: Vec<String> = std::fs::read_dir(dir.path().join("ds"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.starts_with(prefix))
            .map(|n| format!("ds/{n}"))
            .collect();
        v.sort();
        v
    };
    let esr = list("esr_");
    let nmr = list("endor_");
    assert_eq!(esr.len(), 7);
    assert_eq!(nmr.len(), 10);

    let mut cmd = bin(dir.path());
    cmd.args(["calibrate", "--esr"]).args(&esr);
    cmd.arg("--nmr").args(&nmr);
    let out = run(&mut cmd);
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let report = json_report(&dir.path().join("calibration.json"));
    let r = &report["result"];
    assert_eq!(r["converged"], serde_json::Value::Bool(true));
    assert_eq!(r["partial"], serde_json::Value::Bool(false));

    let truth: toml::Value =
        toml::from_str(&std::fs::read_to_string(dir.path().join("ds/truth.toml")).unwrap())
            .unwrap();
    let spin = &truth["spin_system"];
    let field = &truth["field"];
    let close = |got: f64, want: f64, tol: f64, what: &str| {
        assert!(
            (got - want).abs() <= tol * want.abs(),
            "{what}: {got} vs truth {want}"
        );
    };
    close(
        r["g_e_z"].as_f64().unwrap(),
        spin["g_e"][2].as_float().unwrap(),
        1e-3,
        "g_e_z",
    );
    close(
        r["a_z"].as_f64().unwrap(),
        spin["a_hyperfine_mhz"][2].as_float().unwrap(),
        1e-3,
        "a_z",
    );
    close(
        r["kappa"].as_f64().unwrap(),
        spin["kappa_mhz"].as_float().unwrap(),
        1e-3,
        "kappa",
    );
    close(
        r["b_tip"].as_f64().unwrap(),
        field["b_tip_tesla"].as_float().unwrap(),
        5e-3,
        "b_tip",
    );

    // Rerunning on the emitted config must reproduce the same parameters:
    // the pipeline has already converged, so its own output is a fixed point.
    let mut cmd = bin(dir.path());
    cmd.args(["--config", "calibrated.toml", "calibrate", "--esr"])
        .args(&esr);
    cmd.arg("--nmr").args(&nmr);
    cmd.args(["--report", "again.json", "--emit-config", "again.toml"]);
    let out = run(&mut cmd);
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let again = json_report(&dir.path().join("again.json"));
    for key in ["g_e_z", "b_tip", "phi", "a_z", "kappa"] {
        let first = r[key].as_f64().unwrap();
        let second = again["result"][key].as_f64().unwrap();
        assert!(
            (first - second).abs() <= 1e-6 * first.abs().max(1e-12),
            "{key}: {first} vs rerun {second}"
        );
    }
}

#[test]
fn calibrate_requires_field_metadata() {
    let dir = TempDir::new().unwrap();
    let mut csv = String::from("# kind=esr\nfrequency_MHz,signal\n");
    for k in 0..40 {
        csv.push_str(&format!("{},0.1\n", 3600.0 + 20.0 * k as f64));
    }
    std::fs::write(dir.path().join("nofield.csv"), csv).unwrap();
    let out = run(bin(dir.path()).args(["calibrate", "--esr", "nofield.csv"]));
    assert_eq!(code(&out), 2);
    let err = stderr_of(&out);
    assert!(err.contains("nofield.csv") && err.contains("b_z"), "{err}");
}

#[test]
fn calibrate_single_field_is_partial() {
    let dir = TempDir::new().unwrap();
    let out = run(bin(dir.path()).args(["make-dataset", "--noise-free", "--out", "ds"]));
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let out = run(bin(dir.path()).args([
        "calibrate",
        "--esr",
        "ds/esr_0.600T.csv",
        "--nmr",
        "ds/endor_0.600T_low.csv",
        "ds/endor_0.600T_high.csv",
        "--report",
        "partial.json",
    ]));
    assert_eq!(code(&out), 3, "{}", stderr_of(&out));
    let report = json_report(&dir.path().join("partial.json"));
    assert_eq!(report["result"]["partial"], serde_json::Value::Bool(true));
}
