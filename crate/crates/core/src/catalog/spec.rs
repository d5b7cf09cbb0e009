//! Catalog files: TOML documents declaring datasets, cases, records and
//! modalities.
//!
//! ```toml
//! version = 1
//!
//! [[datasets]]
//! id = "train_dataset"
//!
//! [[datasets.cases]]
//! id = "subject_0"
//!
//! [[datasets.cases.records]]
//! id = "observation_0"
//!
//! [[datasets.cases.records.modalities]]
//! id = "flair"
//! kind = "volume"
//! path = "subject_0/flair.nii.gz"
//!
//! [[datasets.cases.records.modalities]]
//! id = "slice"
//! kind = "image"
//! paths = ["subject_0/slice_r.png", "subject_0/slice_g.png"]
//!
//! [[datasets.cases.records.modalities]]
//! id = "age"
//! kind = "scalar"
//! value = 45.0
//! ```
//!
//! Relative paths are resolved against the directory holding the file. An
//! image modality takes either `path` or `paths`.

use std::path::Path;

use serde::Deserialize;

use super::{resolve, Case, Dataset, Mirc, Modality, Record};
use crate::error::{bail, Error, Result};

pub const CATALOG_FORMAT_VERSION: u32 = 1;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    version: u32,
    #[serde(default)]
    datasets: Vec<DatasetEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetEntry {
    id: String,
    #[serde(default)]
    cases: Vec<CaseEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseEntry {
    id: String,
    #[serde(default)]
    records: Vec<RecordEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordEntry {
    id: String,
    #[serde(default)]
    modalities: Vec<ModalityEntry>,
}

#[derive(Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Volume,
    Image,
    Scalar,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModalityEntry {
    id: String,
    kind: Kind,
    path: Option<String>,
    paths: Option<Vec<String>>,
    value: Option<f64>,
}

impl ModalityEntry {
    fn build(self, base: &Path) -> Result<Modality> {
        let ModalityEntry {
            id,
            kind,
            path,
            paths,
            value,
        } = self;
        match kind {
            Kind::Volume => match (path, paths, value) {
                (Some(p), None, None) => Ok(Modality::volume_file(id, resolve(base, &p))),
                _ => bail!(Format, "volume modality {id:?} needs exactly `path`"),
            },
            Kind::Image => {
                let list = match (path, paths, value) {
                    (Some(p), None, None) => vec![p],
                    (None, Some(ps), None) if !ps.is_empty() => ps,
                    _ => bail!(Format, "image modality {id:?} needs `path` or a non-empty `paths`"),
                };
                Ok(Modality::image_files(
                    id,
                    list.iter().map(|p| resolve(base, p)).collect(),
                ))
            }
            Kind::Scalar => match (path, paths, value) {
                (None, None, Some(v)) => Ok(Modality::scalar(id, v)),
                _ => bail!(Format, "scalar modality {id:?} needs exactly `value`"),
            },
        }
    }
}

/// Parses catalog text; relative paths resolve against `base`.
pub fn parse_catalog(text: &str, base: &Path) -> Result<Mirc> {
    let file: CatalogFile =
        toml::from_str(text).map_err(|e| Error::Format(format!("catalog: {e}")))?;
    if file.version != CATALOG_FORMAT_VERSION {
        bail!(
            Format,
            "unsupported catalog version {} (expected {CATALOG_FORMAT_VERSION})",
            file.version
        );
    }
    let mut mirc = Mirc::new();
    for d in file.datasets {
        let mut dataset = Dataset::new(d.id);
        for c in d.cases {
            let mut case = Case::new(c.id);
            for r in c.records {
                let mut record = Record::new(r.id);
                for m in r.modalities {
                    record.add(m.build(base)?).map_err(into_format)?;
                }
                case.add(record).map_err(into_format)?;
            }
            dataset.add(case).map_err(into_format)?;
        }
        mirc.add(dataset).map_err(into_format)?;
    }
    Ok(mirc)
}

fn into_format(e: Error) -> Error {
    match e {
        Error::Argument(msg) => Error::Format(msg),
        other => other,
    }
}

/// Reads and parses a catalog file.
pub fn load_catalog(path: impl AsRef<Path>) -> Result<Mirc> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_catalog(&text, base)
}
