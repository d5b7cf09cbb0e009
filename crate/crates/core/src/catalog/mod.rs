//! Hierarchical organization of native data: a [`Mirc`] groups datasets,
//! a [`Dataset`] groups cases, a [`Case`] groups records and a [`Record`]
//! groups the modalities of one observation.
//!
//! Every level keeps insertion order, which is the traversal order used by
//! statistics, inspection and samplers.

mod inspect;
mod spec;

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::{Array3, Array5, Axis};

use crate::error::{bail, Error, Result};
use crate::nifti_io::{read_volume, Volume};
use crate::sample::Sample;

pub use inspect::{
    InconsistencyFlag, InspectionReport, ModalityInspection, ModalityStatus, RecordInspection,
    VoxelSizeSummary,
};
pub use spec::{load_catalog, parse_catalog, CATALOG_FORMAT_VERSION};

/// Where a modality's data comes from.
#[derive(Clone, Debug)]
pub enum ModalitySource {
    /// A NIfTI file read on every load.
    VolumeFile(PathBuf),
    /// An already decoded volume.
    Volume(Volume),
    /// An in-memory sample.
    Array(Sample),
    /// One or more 2D images; several files become several features.
    ImageFiles(Vec<PathBuf>),
    Scalar(f64),
}

#[derive(Clone, Debug)]
pub struct Modality {
    id: String,
    source: ModalitySource,
}

impl Modality {
    pub fn new(id: impl Into<String>, source: ModalitySource) -> Self {
        Modality {
            id: id.into(),
            source,
        }
    }

    pub fn volume_file(id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Modality::new(id, ModalitySource::VolumeFile(path.into()))
    }

    pub fn volume(id: impl Into<String>, volume: Volume) -> Self {
        Modality::new(id, ModalitySource::Volume(volume))
    }

    pub fn array(id: impl Into<String>, sample: Sample) -> Self {
        Modality::new(id, ModalitySource::Array(sample))
    }

    pub fn image_files(id: impl Into<String>, paths: Vec<PathBuf>) -> Self {
        Modality::new(id, ModalitySource::ImageFiles(paths))
    }

    pub fn scalar(id: impl Into<String>, value: f64) -> Self {
        Modality::new(id, ModalitySource::Scalar(value))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn source(&self) -> &ModalitySource {
        &self.source
    }

    /// Produces the modality's sample. Sources are read-only, so repeated
    /// calls return equal samples.
    pub fn load(&self) -> Result<Sample> {
        match &self.source {
            ModalitySource::VolumeFile(path) => read_volume(path)?.to_sample(),
            ModalitySource::Volume(v) => v.to_sample(),
            ModalitySource::Array(s) => Ok(s.clone()),
            ModalitySource::ImageFiles(paths) => load_images(paths),
            ModalitySource::Scalar(v) => Ok(Sample::scalar(*v)),
        }
    }
}

/// Rows map to the first spatial axis, columns to the second, the third
/// spatial axis is a singleton and channels (of every file, in order) are
/// features.
fn load_images(paths: &[PathBuf]) -> Result<Sample> {
    if paths.is_empty() {
        bail!(Argument, "image modality without files");
    }
    let mut planes: Vec<Array3<f64>> = Vec::with_capacity(paths.len());
    for path in paths {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other}", path.display())),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let color = img.color();
        let channels = color.channel_count() as usize;
        let values: Vec<f64> = match (color.bytes_per_pixel() as usize / channels, channels) {
            (1, 1) => img.into_luma8().into_raw().into_iter().map(f64::from).collect(),
            (1, 2) => img.into_luma_alpha8().into_raw().into_iter().map(f64::from).collect(),
            (1, 3) => img.into_rgb8().into_raw().into_iter().map(f64::from).collect(),
            (1, _) => img.into_rgba8().into_raw().into_iter().map(f64::from).collect(),
            (2, 1) => img.into_luma16().into_raw().into_iter().map(f64::from).collect(),
            (2, 2) => img.into_luma_alpha16().into_raw().into_iter().map(f64::from).collect(),
            (2, 3) => img.into_rgb16().into_raw().into_iter().map(f64::from).collect(),
            (2, _) => img.into_rgba16().into_raw().into_iter().map(f64::from).collect(),
            _ => img.into_rgba32f().into_raw().into_iter().map(f64::from).collect(),
        };
        let channels = values.len() / (w * h).max(1);
        let plane = Array3::from_shape_vec((h, w, channels), values)
            .map_err(|e| Error::Shape(e.to_string()))?;
        if let Some(first) = planes.first() {
            if first.shape()[..2] != plane.shape()[..2] {
                bail!(
                    Shape,
                    "image {} is {}x{}, expected {}x{}",
                    path.display(),
                    h,
                    w,
                    first.shape()[0],
                    first.shape()[1]
                );
            }
        }
        planes.push(plane);
    }
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    let stacked = ndarray::concatenate(Axis(2), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let data: Array5<f64> = stacked.insert_axis(Axis(2)).insert_axis(Axis(0));
    Sample::new(data.as_standard_layout().into_owned(), None)
}

macro_rules! level {
    ($name:ident, $child:ty, $field:ident, $child_label:literal) => {
        #[derive(Clone, Debug, Default)]
        pub struct $name {
            id: String,
            $field: IndexMap<String, $child>,
        }

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                $name {
                    id: id.into(),
                    $field: IndexMap::new(),
                }
            }

            pub fn id(&self) -> &str {
                &self.id
            }

            /// Adds a child; ids must be unique at this level.
            pub fn add(&mut self, child: $child) -> Result<&mut Self> {
                let key = child.id().to_owned();
                if self.$field.contains_key(&key) {
                    bail!(
                        Argument,
                        concat!("duplicate ", $child_label, " id {:?} in {:?}"),
                        key,
                        self.id
                    );
                }
                self.$field.insert(key, child);
                Ok(self)
            }

            pub fn with(mut self, child: $child) -> Result<Self> {
                self.add(child)?;
                Ok(self)
            }

            pub fn get(&self, id: &str) -> Option<&$child> {
                self.$field.get(id)
            }

            pub fn ids(&self) -> impl Iterator<Item = &str> {
                self.$field.keys().map(String::as_str)
            }

            pub fn iter(&self) -> impl Iterator<Item = &$child> {
                self.$field.values()
            }

            pub fn len(&self) -> usize {
                self.$field.len()
            }

            pub fn is_empty(&self) -> bool {
                self.$field.is_empty()
            }
        }
    };
}

level!(Record, Modality, modalities, "modality");
level!(Case, Record, records, "record");
level!(Dataset, Case, cases, "case");

/// The root of the catalog.
#[derive(Clone, Debug, Default)]
pub struct Mirc {
    datasets: IndexMap<String, Dataset>,
}

/// A level of the catalog hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Dataset,
    Case,
    Record,
    Modality,
}

/// Location of one record in the catalog.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub dataset: String,
    pub case: String,
    pub record: String,
}

impl std::fmt::Display for RecordKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.dataset, self.case, self.record)
    }
}

impl Mirc {
    pub fn new() -> Self {
        Mirc::default()
    }

    pub fn add(&mut self, dataset: Dataset) -> Result<&mut Self> {
        if self.datasets.contains_key(dataset.id()) {
            bail!(Argument, "duplicate dataset id {:?}", dataset.id());
        }
        self.datasets.insert(dataset.id().to_owned(), dataset);
        Ok(self)
    }

    pub fn with(mut self, dataset: Dataset) -> Result<Self> {
        self.add(dataset)?;
        Ok(self)
    }

    pub fn dataset(&self, id: &str) -> Option<&Dataset> {
        self.datasets.get(id)
    }

    pub fn datasets(&self) -> impl Iterator<Item = &Dataset> {
        self.datasets.values()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.values().all(|d| d.iter().all(Case::is_empty))
    }

    pub fn record(&self, dataset: &str, case: &str, record: &str) -> Option<&Record> {
        self.datasets.get(dataset)?.get(case)?.get(record)
    }

    /// All records in traversal order.
    pub fn records(&self) -> impl Iterator<Item = (RecordKey, &Record)> {
        self.datasets.values().flat_map(|d| {
            d.iter().flat_map(move |c| {
                c.iter().map(move |r| {
                    (
                        RecordKey {
                            dataset: d.id().to_owned(),
                            case: c.id().to_owned(),
                            record: r.id().to_owned(),
                        },
                        r,
                    )
                })
            })
        })
    }

    /// Distinct ids present at `level`, in first-seen traversal order.
    pub fn ids_at_level(&self, level: Level) -> Vec<String> {
        let mut seen = indexmap::IndexSet::new();
        for d in self.datasets.values() {
            if level == Level::Dataset {
                seen.insert(d.id().to_owned());
                continue;
            }
            for c in d.iter() {
                if level == Level::Case {
                    seen.insert(c.id().to_owned());
                    continue;
                }
                for r in c.iter() {
                    if level == Level::Record {
                        seen.insert(r.id().to_owned());
                        continue;
                    }
                    seen.extend(r.ids().map(str::to_owned));
                }
            }
        }
        seen.into_iter().collect()
    }

    /// Population mean and standard deviation over all voxels of the first
    /// `n` records (all records when `None`) holding `modality_id`.
    pub fn mean_and_std(&self, modality_id: &str, n: Option<usize>) -> Result<(f64, f64)> {
        let mut count = 0u64;
        let mut mean = 0.0f64;
        let mut m2 = 0.0f64;
        let mut used = 0usize;
        for (_, record) in self.records() {
            if n.is_some_and(|n| used >= n) {
                break;
            }
            let Some(modality) = record.get(modality_id) else {
                continue;
            };
            used += 1;
            let sample = modality.load()?;
            // Per-record moments merged with Chan's parallel update.
            let data = sample.data();
            let k = data.len() as u64;
            if k == 0 {
                continue;
            }
            let local_mean = data.iter().sum::<f64>() / k as f64;
            let local_m2: f64 = data.iter().map(|v| (v - local_mean).powi(2)).sum();
            let total = count + k;
            let delta = local_mean - mean;
            mean += delta * k as f64 / total as f64;
            m2 += local_m2 + delta * delta * (count as f64) * (k as f64) / total as f64;
            count = total;
        }
        if used == 0 {
            bail!(Lookup, "no record holds modality {modality_id:?}");
        }
        if count == 0 {
            bail!(Shape, "modality {modality_id:?} has no voxels");
        }
        Ok((mean, (m2 / count as f64).sqrt()))
    }

    /// One row per record holding `modality_id`, which must load to a single
    /// value.
    pub fn scalar_table(&self, modality_id: &str) -> Result<ScalarTable> {
        let mut rows = Vec::new();
        for (key, record) in self.records() {
            let Some(modality) = record.get(modality_id) else {
                continue;
            };
            let sample = modality.load()?;
            if sample.data().len() != 1 {
                bail!(
                    Shape,
                    "modality {modality_id:?} of {key} has shape {:?}, not a scalar",
                    sample.shape()
                );
            }
            rows.push((key, sample.data()[[0, 0, 0, 0, 0]]));
        }
        Ok(ScalarTable {
            column: modality_id.to_owned(),
            rows,
        })
    }

    /// Checks the listed modalities for spatial consistency within each
    /// record, inspecting at most `ns[k]` records for modality `k`.
    pub fn inspect(&self, modality_ids: &[&str], ns: &[Option<usize>]) -> Result<InspectionReport> {
        if modality_ids.len() != ns.len() {
            bail!(
                Argument,
                "{} modalities but {} record limits",
                modality_ids.len(),
                ns.len()
            );
        }
        Ok(inspect::inspect(self, modality_ids, ns))
    }
}

/// Non-imaging values keyed by record.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarTable {
    pub column: String,
    pub rows: Vec<(RecordKey, f64)>,
}

impl ScalarTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl std::fmt::Display for ScalarTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "dataset_id\tcase_id\trecord_id\t{}", self.column)?;
        for (key, value) in &self.rows {
            writeln!(f, "{}\t{}\t{}\t{}", key.dataset, key.case, key.record, value)?;
        }
        Ok(())
    }
}

pub(crate) fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
