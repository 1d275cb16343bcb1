use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DomainDataset, DomainKey};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub subject: u32,
    pub session: u32,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: usize,
    pub feature_dim: usize,
    pub domains: Vec<ManifestEntry>,
}

fn format_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads the manifest and every domain CSV it lists.
pub fn load_de_features(manifest_path: &Path) -> Result<Vec<DomainDataset>> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::file(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| format_err(manifest_path, e.line(), e.to_string()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(manifest.domains.len());
    for entry in &manifest.domains {
        let path = base.join(&entry.path);
        let key = DomainKey::new(entry.subject, entry.session);
        out.push(read_domain_csv(&path, key, manifest.classes, manifest.feature_dim)?);
    }
    out.sort_by_key(|d| d.key);
    if let Some(w) = out.windows(2).find(|w| w[0].key == w[1].key) {
        return Err(Error::Protocol(format!("domain {} listed twice", w[0].key)));
    }
    Ok(out)
}

/// Parses one domain CSV with header `label,f0,...,f{D-1}`. A label of `-1`
/// marks an unlabeled row; a file must be entirely labeled or unlabeled.
pub fn read_domain_csv(path: &Path, key: DomainKey, classes: usize, feature_dim: usize) -> Result<DomainDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(file);
    let csv_err = |e: csv::Error| {
        let line = e.position().map_or(0, |p| p.line() as usize);
        format_err(path, line, e.to_string())
    };
    let header = reader.headers().map_err(csv_err)?.clone();
    let expected = std::iter::once("label".to_string()).chain((0..feature_dim).map(|j| format!("f{j}")));
    if !header.iter().eq(expected) {
        return Err(format_err(
            path,
            1,
            format!("header has {} columns, expected label plus {feature_dim} features", header.len()),
        ));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut unlabeled_rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let ln = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != feature_dim + 1 {
            return Err(format_err(
                path,
                ln,
                format!("expected {} values, found {}", feature_dim + 1, record.len()),
            ));
        }
        let label: i64 = record[0]
            .parse()
            .map_err(|_| format_err(path, ln, format!("bad label {:?}", &record[0])))?;
        match label {
            -1 => unlabeled_rows += 1,
            l if l >= 0 => {
                if l as usize >= classes {
                    return Err(Error::Label {
                        label: l as usize,
                        classes,
                    });
                }
                labels.push(l as usize);
            }
            l => return Err(format_err(path, ln, format!("bad label {l}"))),
        }
        for f in record.iter().skip(1) {
            let v: f64 = f.parse().map_err(|_| format_err(path, ln, format!("bad value {f:?}")))?;
            if !v.is_finite() {
                return Err(format_err(path, ln, format!("non-finite value {f:?}")));
            }
            data.push(v);
        }
    }
    let rows = data.len() / feature_dim.max(1);
    if unlabeled_rows > 0 && !labels.is_empty() {
        return Err(format_err(path, 1, "file mixes labeled and unlabeled rows"));
    }
    let features = Tensor::from_vec(rows, feature_dim, data)?;
    let labels = (unlabeled_rows == 0).then_some(labels);
    DomainDataset::new(key, features, labels, classes)
}

/// Writes one domain CSV; values use 17 significant digits so a re-read is exact.
pub fn write_domain_csv(path: &Path, ds: &DomainDataset) -> Result<()> {
    let mut s = String::from("label");
    for j in 0..ds.feature_dim() {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    for (i, row) in ds.features.iter_rows().enumerate() {
        match &ds.labels {
            Some(l) => {
                let _ = write!(s, "{}", l[i]);
            }
            None => s.push_str("-1"),
        }
        for v in row {
            let _ = write!(s, ",{v:.16e}");
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::file(path, e))
}

/// Writes every dataset as `domain_s{subject}_{session}.csv` plus
/// `manifest.json` into `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, datasets: &[DomainDataset]) -> Result<PathBuf> {
    let (feature_dim, classes) = super::check_consistent(datasets)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let mut domains = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let name = format!("domain_s{}_{}.csv", ds.key.subject, ds.key.session);
        write_domain_csv(&dir.join(&name), ds)?;
        domains.push(ManifestEntry {
            subject: ds.key.subject,
            session: ds.key.session,
            path: PathBuf::from(name),
        });
    }
    let manifest = Manifest {
        classes,
        feature_dim,
        domains,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::file(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(subject: u32, rows: usize, dim: usize) -> DomainDataset {
        let data = (0..rows * dim).map(|i| (i as f64 * 0.37).sin() / 3.0 + 1e-300).collect();
        let labels = (0..rows).map(|i| i % 3).collect();
        DomainDataset::new(
            DomainKey::new(subject, 1),
            Tensor::from_vec(rows, dim, data).unwrap(),
            Some(labels),
            3,
        )
        .unwrap()
    }

    #[test]
    fn manifest_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let sets = vec![sample(1, 5, 310), sample(2, 4, 310)];
        let manifest = write_dataset(dir.path(), &sets).unwrap();
        let back = load_de_features(&manifest).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back.iter().all(|d| d.feature_dim() == 310));
        for (a, b) in sets.iter().zip(&back) {
            let bits = |d: &DomainDataset| d.features.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn ragged_row_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample(1, 3, 310);
        let path = dir.path().join("d.csv");
        write_domain_csv(&path, &ds).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let cut = lines[2].rfind(',').unwrap();
        lines[2].truncate(cut);
        std::fs::write(&path, lines.join("\n")).unwrap();
        match read_domain_csv(&path, ds.key, 3, 310) {
            Err(Error::Format { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("found 310"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "label,f0\n0,1.0\n3,2.0\n").unwrap();
        assert!(matches!(
            read_domain_csv(&path, DomainKey::new(0, 0), 3, 1),
            Err(Error::Label { label: 3, classes: 3 })
        ));
        assert!(matches!(
            load_de_features(&dir.path().join("nope.json")),
            Err(Error::File { .. })
        ));
    }

    #[test]
    fn unlabeled_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = sample(4, 3, 2).unlabeled();
        write_domain_csv(&path, &ds).unwrap();
        let back = read_domain_csv(&path, ds.key, 3, 2).unwrap();
        assert!(back.labels.is_none());
        std::fs::write(&path, "label,f0\n-1,1.0\n0,2.0\n").unwrap();
        assert!(matches!(
            read_domain_csv(&path, ds.key, 3, 1),
            Err(Error::Format { .. })
        ));
    }
}
