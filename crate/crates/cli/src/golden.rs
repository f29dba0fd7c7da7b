//! Recording and comparing command outputs for regression tests.

use std::path::Path;

use wqms_core::Error;

use crate::config::GoldenConfig;
use crate::output::OutputDir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum GoldenMode {
    Record,
    Compare,
}

/// Copies every file the command wrote into `golden`.
pub fn record(out: &OutputDir, golden: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(golden).map_err(|e| Error::io(golden, e))?;
    for name in out.files() {
        let to = golden.join(name);
        std::fs::copy(out.dir().join(name), &to).map_err(|e| Error::io(&to, e))?;
    }
    Ok(())
}

/// Differences between the command's files and the recording. CSV cells are
/// compared numerically with the configured tolerances, other files byte for byte.
pub fn compare(out: &OutputDir, golden: &Path, cfg: &GoldenConfig) -> Result<Vec<String>, Error> {
    let mut diffs = Vec::new();
    for name in out.files() {
        let want_path = golden.join(name);
        let Ok(want) = std::fs::read_to_string(&want_path) else {
            diffs.push(format!("{name}: no recording at {}", want_path.display()));
            continue;
        };
        let got_path = out.dir().join(name);
        let got = std::fs::read_to_string(&got_path).map_err(|e| Error::io(&got_path, e))?;
        if name.ends_with(".csv") {
            diffs.extend(compare_csv(name, &got, &want, cfg));
        } else if got != want {
            diffs.push(format!("{name}: contents differ"));
        }
    }
    Ok(diffs)
}

fn compare_csv(name: &str, got: &str, want: &str, cfg: &GoldenConfig) -> Vec<String> {
    let read = |text: &str| -> Result<(Vec<String>, Vec<Vec<String>>), csv::Error> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
            .collect::<Result<_, _>>()?;
        Ok((header, rows))
    };
    let (Ok((gh, grows)), Ok((wh, wrows))) = (read(got), read(want)) else {
        return vec![format!("{name}: not valid CSV")];
    };
    if gh != wh {
        return vec![format!("{name}: header differs")];
    }
    if grows.len() != wrows.len() {
        return vec![format!(
            "{name}: {} rows, recording has {}",
            grows.len(),
            wrows.len()
        )];
    }
    let mut diffs = Vec::new();
    for (i, (g, w)) in grows.iter().zip(&wrows).enumerate() {
        for ((col, a), b) in gh.iter().zip(g).zip(w) {
            let same = match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(x), Ok(y)) => (x - y).abs() <= cfg.tolerance_for(col) || x == y,
                _ => a == b,
            };
            if !same {
                diffs.push(format!(
                    "{name} row {} column {col}: {a} vs recorded {b}",
                    i + 1
                ));
            }
        }
    }
    diffs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_cells_use_column_tolerances() {
        let mut cfg = GoldenConfig::default();
        cfg.columns.insert("c".into(), 1e-3);
        let want = "time,c,label\n0,1.0,a\n";
        assert!(compare_csv("f", "time,c,label\n0,1.0005,a\n", want, &cfg).is_empty());
        assert_eq!(
            compare_csv("f", "time,c,label\n0,1.01,a\n", want, &cfg).len(),
            1
        );
        assert_eq!(
            compare_csv("f", "time,c,label\n0,1.0,b\n", want, &cfg).len(),
            1
        );
        assert_eq!(compare_csv("f", "time,c\n0,1.0\n", want, &cfg).len(), 1);
    }

    #[test]
    fn record_then_compare_is_clean() {
        let tmp = tempfile::tempdir().unwrap();
        let mut out = OutputDir::open(&tmp.path().join("out")).unwrap();
        out.write("a.csv", "x\n1.5\n").unwrap();
        out.write("b.toml", "k = 1\n").unwrap();
        let golden = tmp.path().join("golden");
        record(&out, &golden).unwrap();
        assert!(compare(&out, &golden, &GoldenConfig::default())
            .unwrap()
            .is_empty());
        out.write("b.toml", "k = 2\n").unwrap();
        assert_eq!(
            compare(&out, &golden, &GoldenConfig::default())
                .unwrap()
                .len(),
            1
        );
    }
}
