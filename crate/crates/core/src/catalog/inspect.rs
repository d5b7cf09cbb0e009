use std::fmt;

use super::{Mirc, RecordKey};
use crate::sample::{affines_close, voxel_size, Affine};

#[derive(Clone, Debug, PartialEq)]
pub enum ModalityStatus {
    Present {
        spatial_shape: [usize; 3],
        voxel_size: [f64; 3],
        affine: Affine,
    },
    Missing,
    Unreadable(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityInspection {
    pub modality: String,
    pub status: ModalityStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub enum InconsistencyFlag {
    ShapeMismatch {
        first: (String, [usize; 3]),
        second: (String, [usize; 3]),
    },
    AffineMismatch { first: String, second: String },
    Unreadable { modality: String, reason: String },
}

impl fmt::Display for InconsistencyFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InconsistencyFlag::ShapeMismatch { first, second } => write!(
                f,
                "shape mismatch: {} {:?} vs {} {:?}",
                first.0, first.1, second.0, second.1
            ),
            InconsistencyFlag::AffineMismatch { first, second } => {
                write!(f, "affine mismatch: {first} vs {second}")
            }
            InconsistencyFlag::Unreadable { modality, reason } => {
                write!(f, "unreadable {modality}: {reason}")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordInspection {
    pub key: RecordKey,
    pub modalities: Vec<ModalityInspection>,
    pub flags: Vec<InconsistencyFlag>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelSizeSummary {
    pub min: [f64; 3],
    pub median: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct InspectionReport {
    pub records: Vec<RecordInspection>,
    /// `None` when no listed modality was found.
    pub voxel_sizes: Option<VoxelSizeSummary>,
}

impl InspectionReport {
    pub fn flag_count(&self) -> usize {
        self.records.iter().map(|r| r.flags.len()).sum()
    }

    pub fn is_consistent(&self) -> bool {
        self.flag_count() == 0
    }
}

impl fmt::Display for InspectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for record in &self.records {
            writeln!(f, "{}", record.key)?;
            for m in &record.modalities {
                match &m.status {
                    ModalityStatus::Present {
                        spatial_shape,
                        voxel_size,
                        ..
                    } => writeln!(
                        f,
                        "  {}: shape {}x{}x{} voxel {:.4}x{:.4}x{:.4}",
                        m.modality,
                        spatial_shape[0],
                        spatial_shape[1],
                        spatial_shape[2],
                        voxel_size[0],
                        voxel_size[1],
                        voxel_size[2]
                    )?,
                    ModalityStatus::Missing => writeln!(f, "  {}: missing", m.modality)?,
                    ModalityStatus::Unreadable(reason) => {
                        writeln!(f, "  {}: unreadable ({reason})", m.modality)?
                    }
                }
            }
            for flag in &record.flags {
                writeln!(f, "  FLAG {flag}")?;
            }
        }
        match &self.voxel_sizes {
            Some(v) => {
                for (label, values) in [("min", v.min), ("median", v.median), ("max", v.max)] {
                    writeln!(
                        f,
                        "voxel size {label}: {:.4} {:.4} {:.4}",
                        values[0], values[1], values[2]
                    )?;
                }
            }
            None => writeln!(f, "voxel size: no volumes found")?,
        }
        writeln!(
            f,
            "{} records, {} inconsistencies",
            self.records.len(),
            self.flag_count()
        )
    }
}

pub(super) fn inspect(mirc: &Mirc, modality_ids: &[&str], ns: &[Option<usize>]) -> InspectionReport {
    let mut seen = vec![0usize; modality_ids.len()];
    let mut records = Vec::new();
    let mut sizes: [Vec<f64>; 3] = Default::default();

    for (key, record) in mirc.records() {
        let mut modalities = Vec::new();
        for (k, id) in modality_ids.iter().enumerate() {
            let Some(modality) = record.get(id) else {
                continue;
            };
            if ns[k].is_some_and(|n| seen[k] >= n) {
                continue;
            }
            seen[k] += 1;
            let status = match modality.load() {
                Ok(sample) => ModalityStatus::Present {
                    spatial_shape: sample.spatial_shape(),
                    voxel_size: voxel_size(sample.affine(0)),
                    affine: *sample.affine(0),
                },
                Err(e) => ModalityStatus::Unreadable(e.to_string()),
            };
            modalities.push(ModalityInspection {
                modality: (*id).to_owned(),
                status,
            });
        }
        if modalities.is_empty() {
            continue;
        }
        for id in modality_ids {
            if record.get(id).is_none() {
                modalities.push(ModalityInspection {
                    modality: (*id).to_owned(),
                    status: ModalityStatus::Missing,
                });
            }
        }

        let mut flags = Vec::new();
        let mut reference: Option<(&str, [usize; 3], &Affine)> = None;
        for m in &modalities {
            match &m.status {
                ModalityStatus::Present {
                    spatial_shape,
                    voxel_size,
                    affine,
                } => {
                    for (axis, v) in voxel_size.iter().enumerate() {
                        sizes[axis].push(*v);
                    }
                    match reference {
                        None => reference = Some((&m.modality, *spatial_shape, affine)),
                        Some((name, shape, ref_affine)) => {
                            if shape != *spatial_shape {
                                flags.push(InconsistencyFlag::ShapeMismatch {
                                    first: (name.to_owned(), shape),
                                    second: (m.modality.clone(), *spatial_shape),
                                });
                            } else if !affines_close(ref_affine, affine) {
                                flags.push(InconsistencyFlag::AffineMismatch {
                                    first: name.to_owned(),
                                    second: m.modality.clone(),
                                });
                            }
                        }
                    }
                }
                ModalityStatus::Unreadable(reason) => flags.push(InconsistencyFlag::Unreadable {
                    modality: m.modality.clone(),
                    reason: reason.clone(),
                }),
                ModalityStatus::Missing => {}
            }
        }
        records.push(RecordInspection {
            key,
            modalities,
            flags,
        });
    }

    let voxel_sizes = if sizes[0].is_empty() {
        None
    } else {
        let mut summary = VoxelSizeSummary {
            min: [0.0; 3],
            median: [0.0; 3],
            max: [0.0; 3],
        };
        for axis in 0..3 {
            let values = &mut sizes[axis];
            values.sort_by(f64::total_cmp);
            let n = values.len();
            summary.min[axis] = values[0];
            summary.max[axis] = values[n - 1];
            summary.median[axis] = if n % 2 == 1 {
                values[n / 2]
            } else {
                (values[n / 2 - 1] + values[n / 2]) / 2.0
            };
        }
        Some(summary)
    };

    InspectionReport {
        records,
        voxel_sizes,
    }
}
