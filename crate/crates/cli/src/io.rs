//! File formats: spectrum CSV (commented metadata header + two columns),
//! line/sweep tables, matrix maps with axis row/column, and JSON reports.
//! Every write goes through a temp-file-then-rename so interrupted runs
//! never leave truncated outputs.

use crate::CliError;
use endor_core::lineshapes::Spectrum;
use endor_core::spinmodel::{SweepRow, TransitionLine};
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Write `bytes` to `path` atomically, creating parent directories.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Input(format!("cannot create directory {}: {e}", dir.display()))
    })?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| {
        CliError::Input(format!("cannot create temp file in {}: {e}", dir.display()))
    })?;
    std::fs::write(tmp.path(), bytes)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
    tmp.persist(path)
        .map_err(|e| CliError::Input(format!("cannot move into {}: {e}", path.display())))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// spectrum files
// ---------------------------------------------------------------------------

const SPECTRUM_HEADER: &str = "frequency_MHz,signal";

/// Serialize a spectrum: sorted `# key=value` metadata lines, the column
/// header, then one `frequency,signal` row per point (shortest round-trip
/// float form, so write→read is lossless and byte-stable).
pub fn spectrum_to_csv(spec: &Spectrum) -> String {
    let mut out = String::new();
    for (k, v) in &spec.meta {
        let _ = writeln!(out, "# {k}={v}");
    }
    let _ = writeln!(out, "{SPECTRUM_HEADER}");
    for (f, y) in spec.frequencies.iter().zip(&spec.signal) {
        let _ = writeln!(out, "{f},{y}");
    }
    out
}

pub fn write_spectrum(path: &Path, spec: &Spectrum) -> Result<(), CliError> {
    atomic_write(path, spectrum_to_csv(spec).as_bytes())
}

/// Parse a spectrum file; `origin` names the file in error messages.
pub fn spectrum_from_csv(text: &str, origin: &str) -> Result<Spectrum, CliError> {
    let mut meta = BTreeMap::new();
    let mut frequencies = Vec::new();
    let mut signal = Vec::new();
    let mut seen_header = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let body = rest.trim();
            if let Some((k, v)) = body.split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        if line == SPECTRUM_HEADER {
            seen_header = true;
            continue;
        }
        let mut cols = line.split(',').map(str::trim);
        let (a, b) = (cols.next().unwrap_or(""), cols.next().unwrap_or(""));
        match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(f), Ok(y)) => {
                frequencies.push(f);
                signal.push(y);
            }
            _ => {
                return Err(CliError::Input(format!(
                    "{origin} line {}: cannot parse {line:?} as `frequency,signal`",
                    lineno + 1
                )));
            }
        }
    }
    if !seen_header && frequencies.is_empty() {
        return Err(CliError::Input(format!(
            "{origin}: not a spectrum file (no `{SPECTRUM_HEADER}` header and no data rows)"
        )));
    }
    Spectrum::new(frequencies, signal, meta)
        .map_err(|e| CliError::Input(format!("{origin}: {e}")))
}

pub fn read_spectrum(path: &Path) -> Result<Spectrum, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    spectrum_from_csv(&text, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// transition-line tables
// ---------------------------------------------------------------------------

/// Write a labeled transition table with a commented metadata header.
pub fn write_lines_csv(
    path: &Path,
    meta: &[(String, String)],
    lines: &[TransitionLine],
) -> Result<(), CliError> {
    let mut out = String::new();
    for (k, v) in meta {
        let _ = writeln!(out, "# {k}={v}");
    }
    let _ = writeln!(out, "label,frequency_MHz,weight,delta_ms,delta_mi");
    for l in lines {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            l.label.as_deref().unwrap_or(""),
            l.frequency,
            l.weight,
            l.delta_ms,
            l.delta_mi
        );
    }
    atomic_write(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// field-sweep tables
// ---------------------------------------------------------------------------

/// Stable column order for labeled transitions: Roman-numeral nuclear lines
/// by ordinal, then electron lines by descending sublevel, then the rest
/// alphabetically.
fn label_rank(label: &str) -> (u8, i64, String) {
    const NUMERALS: [&str; 12] = [
        "I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X", "XI", "XII",
    ];
    if let Some(i) = NUMERALS.iter().position(|&n| n == label) {
        return (0, i as i64, String::new());
    }
    if let Some(rest) = label.strip_prefix("mI=") {
        let twice = parse_half(rest).map(|v| (v * 2.0).round() as i64);
        if let Some(t) = twice {
            return (1, -t, String::new());
        }
    }
    (2, 0, label.to_string())
}

fn parse_half(s: &str) -> Option<f64> {
    if let Some((num, den)) = s.split_once('/') {
        Some(num.trim().parse::<f64>().ok()? / den.trim().parse::<f64>().ok()?)
    } else {
        s.trim().parse().ok()
    }
}

/// Write one row per field: eigenvalues, every labeled transition seen
/// anywhere in the sweep (blank where a label is absent at that field), and
/// the flip-flop hybridization coefficient.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut labels: Vec<String> = Vec::new();
    for row in rows {
        for t in &row.transitions {
            if let Some(l) = &t.label {
                if !labels.contains(l) {
                    labels.push(l.clone());
                }
            }
        }
    }
    labels.sort_by_key(|l| label_rank(l));

    let n_levels = rows.iter().map(|r| r.values.len()).max().unwrap_or(0);
    let mut out = String::new();
    let _ = write!(out, "b_z_tesla");
    for k in 0..n_levels {
        let _ = write!(out, ",level_{}_MHz", k + 1);
    }
    for l in &labels {
        let _ = write!(out, ",{l}_MHz");
    }
    let _ = writeln!(out, ",hybridization");

    for row in rows {
        let _ = write!(out, "{}", row.b_z);
        for k in 0..n_levels {
            match row.values.get(k) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        for l in &labels {
            match row.transitions.iter().find(|t| t.label.as_deref() == Some(l)) {
                Some(t) => {
                    let _ = write!(out, ",{}", t.frequency);
                }
                None => out.push(','),
            }
        }
        match row.hybridization {
            Some(c) => {
                let _ = writeln!(out, ",{c}");
            }
            None => out.push('\n'),
        }
    }
    atomic_write(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// matrix maps
// ---------------------------------------------------------------------------

/// Write a matrix as CSV with the first row and first column as axes. The
/// corner cell names both axes as `rows\columns`. `data[i][j]` belongs to
/// `row_axis[i]`, `col_axis[j]`.
pub fn write_map_csv(
    path: &Path,
    corner: &str,
    row_axis: &[f64],
    col_axis: &[f64],
    data: &[Vec<f64>],
) -> Result<(), CliError> {
    let mut out = String::new();
    let _ = write!(out, "{corner}");
    for c in col_axis {
        let _ = write!(out, ",{c}");
    }
    out.push('\n');
    for (r, row) in row_axis.iter().zip(data) {
        let _ = write!(out, "{r}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// JSON reports
// ---------------------------------------------------------------------------

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Input(format!("cannot serialize report: {e}")))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}
