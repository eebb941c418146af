//! Domain datasets and their on-disk CSV format.
//!
//! One CSV file per domain, header required:
//! `domain_id,label,feature_0,...,feature_{d-1}`. A label of -1 marks an
//! unlabeled sample; a file either has labels on every row or on none.

use crate::error::{Error, Result};
use crate::fmt::fmt_g6;
use crate::numerics::Matrix;
use std::io::Write as _;
use std::path::Path;

/// One domain's samples with optional labels.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub name: String,
    pub x: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Config(format!("domain {} has no samples", self.domain_id)));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(Error::Config(format!(
                    "domain {}: {} labels for {} samples",
                    self.domain_id,
                    labels.len(),
                    self.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::Config(format!(
                    "domain {}: label {bad} out of range for {classes} classes",
                    self.domain_id
                )));
            }
        }
        Ok(())
    }
}

/// Write one domain as CSV. Features are printed at six significant
/// digits, which is also what the trainer reads back; the file is the
/// interface.
pub fn write_domain_csv(dataset: &DomainDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("domain_id,label");
    for d in 0..dataset.x.cols() {
        out.push_str(&format!(",feature_{d}"));
    }
    out.push('\n');
    for i in 0..dataset.len() {
        let label = dataset
            .labels
            .as_ref()
            .map_or(-1i64, |l| l[i] as i64);
        out.push_str(&format!("{},{label}", dataset.domain_id));
        for v in dataset.x.row(i) {
            out.push(',');
            out.push_str(&fmt_g6(*v));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read one CSV file; every row must share one domain_id.
pub fn read_domain_csv(path: &Path) -> Result<DomainDataset> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let path_str = path.display().to_string();
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse {
            path: path_str.clone(),
            detail: "empty file (header required)".into(),
        })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "domain_id" || cols[1] != "label" {
        return Err(Error::Parse {
            path: path_str,
            detail: format!("bad header `{header}`; expected domain_id,label,feature_0,..."),
        });
    }
    let feature_dim = cols.len() - 2;

    let mut domain_id: Option<usize> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != feature_dim + 2 {
            return Err(Error::Parse {
                path: path_str,
                detail: format!("line {}: expected {} fields, got {}", lineno + 2, feature_dim + 2, fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| Error::Parse {
                path: path_str.clone(),
                detail: format!("line {}: bad {what} `{s}`", lineno + 2),
            })
        };
        let id = parse(fields[0], "domain_id")? as usize;
        match domain_id {
            None => domain_id = Some(id),
            Some(prev) if prev != id => {
                return Err(Error::Parse {
                    path: path_str,
                    detail: format!("line {}: mixed domain ids {prev} and {id}", lineno + 2),
                })
            }
            _ => {}
        }
        labels.push(parse(fields[1], "label")? as i64);
        let mut row = Vec::with_capacity(feature_dim);
        for f in &fields[2..] {
            row.push(parse(f, "feature")?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path_str,
            detail: "no data rows".into(),
        });
    }
    let all_labeled = labels.iter().all(|&l| l >= 0);
    let none_labeled = labels.iter().all(|&l| l < 0);
    if !all_labeled && !none_labeled {
        return Err(Error::Parse {
            path: path_str,
            detail: "mixed labeled and unlabeled rows in one domain".into(),
        });
    }
    let domain_id = domain_id.unwrap();
    Ok(DomainDataset {
        domain_id,
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("domain_{domain_id}")),
        x: Matrix::from_rows(&rows),
        labels: if all_labeled {
            Some(labels.into_iter().map(|l| l as usize).collect())
        } else {
            None
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip() {
        let ds = DomainDataset {
            domain_id: 2,
            name: "two".into(),
            x: Matrix::from_rows(&[vec![0.5, -1.25], vec![3.0, 0.0]]),
            labels: Some(vec![0, 1]),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.csv");
        write_domain_csv(&ds, &path).unwrap();
        let back = read_domain_csv(&path).unwrap();
        assert_eq!(back.domain_id, 2);
        assert_eq!(back.labels, Some(vec![0, 1]));
        assert_eq!(back.x.rows(), 2);
        assert!((back.x.get(0, 1) + 1.25).abs() < 1e-12);
    }

    #[test]
    fn unlabeled_rows_become_none() {
        let ds = DomainDataset {
            domain_id: 1,
            name: "one".into(),
            x: Matrix::from_rows(&[vec![1.0], vec![2.0]]),
            labels: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.csv");
        write_domain_csv(&ds, &path).unwrap();
        let back = read_domain_csv(&path).unwrap();
        assert!(back.labels.is_none());
    }

    #[test]
    fn header_is_required() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "0,1,0.5\n").unwrap();
        assert!(read_domain_csv(&path).is_err());
    }
}
