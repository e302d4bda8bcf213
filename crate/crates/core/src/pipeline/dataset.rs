use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::RasterImage;
use crate::refnet::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetMode {
    /// One directory per class.
    SingleLabel,
    /// Images with a `<image>.labels` sidecar listing one class per line.
    MultiLabel,
}

impl FromStr for DatasetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(DatasetMode::SingleLabel),
            "multi" => Ok(DatasetMode::MultiLabel),
            _ => Err(Error::Config(format!("dataset mode must be single or multi, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub mode: DatasetMode,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Loads every image as a single-label training sample.
    pub fn samples(&self) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .map(|e| match e.labels.as_slice() {
                [label] => Ok(Sample {
                    image: RasterImage::read(&e.path)?,
                    label: label.clone(),
                }),
                _ => Err(Error::Dataset {
                    path: e.path.clone(),
                    msg: format!("expected exactly one label, found {}", e.labels.len()),
                }),
            })
            .collect()
    }
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn check_readable(p: &Path) -> Result<()> {
    fs::File::open(p).map(|_| ()).map_err(|e| Error::io(p, e))
}

fn check_label(path: &Path, label: &str, classes: Option<&[String]>) -> Result<()> {
    match classes {
        Some(c) if !c.iter().any(|k| k == label) => Err(Error::Dataset {
            path: path.to_path_buf(),
            msg: format!("unknown class `{label}`"),
        }),
        _ => Ok(()),
    }
}

/// Path of a sidecar file: `<image>.<ext>`.
pub fn sidecar(image: &Path, ext: &str) -> PathBuf {
    let mut s = image.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Cluster count from a `<image>.k` sidecar, if present.
pub fn sidecar_k(image: &Path) -> Result<Option<usize>> {
    let p = sidecar(image, "k");
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    match text.trim().parse::<usize>() {
        Ok(k) if k >= 1 => Ok(Some(k)),
        _ => Err(Error::Dataset {
            path: p,
            msg: format!("expected a positive integer, found `{}`", text.trim()),
        }),
    }
}

/// Indexes a dataset directory, sorted by path. With `classes`, every
/// label must be one of them.
pub fn ingest(root: &Path, mode: DatasetMode, classes: Option<&[String]>) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset {
            path: root.to_path_buf(),
            msg: "not a directory".into(),
        });
    }
    let mut entries = Vec::new();
    match mode {
        DatasetMode::SingleLabel => {
            for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
                let label = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                check_label(&dir, &label, classes)?;
                for path in sorted_entries(&dir)?.into_iter().filter(|p| is_image(p)) {
                    check_readable(&path)?;
                    entries.push(DatasetEntry {
                        path,
                        labels: vec![label.clone()],
                    });
                }
            }
        }
        DatasetMode::MultiLabel => {
            for path in sorted_entries(root)?.into_iter().filter(|p| is_image(p)) {
                check_readable(&path)?;
                let side = sidecar(&path, "labels");
                let text = fs::read_to_string(&side).map_err(|e| Error::Dataset {
                    path: side.clone(),
                    msg: format!("missing or unreadable label sidecar ({e})"),
                })?;
                let mut labels: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
                for l in &labels {
                    check_label(&side, l, classes)?;
                }
                labels.sort();
                labels.dedup();
                entries.push(DatasetEntry { path, labels });
            }
        }
    }
    Ok(DatasetIndex { mode, entries })
}
