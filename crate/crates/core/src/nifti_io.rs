//! NIfTI-1 volume decoding and encoding.
//!
//! Headers and voxel data go through the `nifti` crate. This module adds the
//! checks needed before trusting a header (declared sizes against the bytes
//! actually present, transform codes, qform sanity) and converts between
//! on-disk volumes and [`Sample`]s.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{ArrayD, Axis, IxDyn};
use nifti::volume::ndarray::IntoNdArray;
use nifti::writer::WriterOptions;
use nifti::{InMemNiftiObject, NiftiHeader, NiftiObject, NiftiType};

use crate::error::{bail, Error, Result};
use crate::sample::{validate_affine, voxel_size, Affine, Sample};

/// Upper bound on the decompressed size accepted by [`decode_volume`].
pub const DEFAULT_MAX_BYTES: usize = 1 << 32;

const HEADER_BYTES: usize = 348;

/// A decoded volume: spatial axes first, optional trailing feature axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: ArrayD<f64>,
    pub affine: Affine,
}

impl Volume {
    /// Rank-3 volumes get a singleton feature axis; rank-4 volumes use their
    /// trailing axis as features. Other ranks are rejected.
    pub fn to_sample(&self) -> Result<Sample> {
        let data = match self.data.ndim() {
            3 => self.data.clone().insert_axis(Axis(3)),
            4 => self.data.clone(),
            r => bail!(
                Shape,
                "volume of rank {r} has no unambiguous 5D layout; promote it explicitly"
            ),
        };
        let data = data.insert_axis(Axis(0));
        Sample::from_dyn(data, Some(vec![self.affine]))
    }
}

/// Reads a `.nii` or `.nii.gz` file.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Decodes an in-memory NIfTI-1 file, gzip-compressed or not.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    decode_volume_with_limit(bytes, DEFAULT_MAX_BYTES)
}

/// As [`decode_volume`], refusing inputs that decompress beyond `max_bytes`.
pub fn decode_volume_with_limit(bytes: &[u8], max_bytes: usize) -> Result<Volume> {
    let inflated;
    let raw = if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .take(max_bytes as u64 + 1)
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip stream: {e}")))?;
        if out.len() > max_bytes {
            bail!(Format, "decompressed volume exceeds {max_bytes} bytes");
        }
        inflated = out;
        &inflated[..]
    } else {
        bytes
    };
    if raw.len() < HEADER_BYTES {
        bail!(Format, "file has {} bytes, a NIfTI-1 header needs {HEADER_BYTES}", raw.len());
    }
    let mut header =
        NiftiHeader::from_reader(raw).map_err(|e| Error::Format(format!("header: {e}")))?;
    check_payload(&header, raw.len())?;
    let affine = header_affine(&mut header)?;

    let object = InMemNiftiObject::from_reader(raw)
        .map_err(|e| Error::Format(format!("volume: {e}")))?;
    let data: ArrayD<f64> = object
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| Error::Format(format!("volume data: {e}")))?;
    // Fortran-ordered on read; normalize so downstream code sees plain C layout.
    let data = data.as_standard_layout().into_owned();
    Ok(Volume { data, affine })
}

fn check_payload(header: &NiftiHeader, available: usize) -> Result<()> {
    if &header.magic != b"n+1\0" {
        bail!(Format, "not a single-file NIfTI-1 volume (magic {:?})", header.magic);
    }
    let ndim = header.dim[0] as usize;
    if !(1..=7).contains(&ndim) {
        bail!(Format, "dim[0] = {} is outside 1..=7", header.dim[0]);
    }
    let datatype = header
        .data_type()
        .map_err(|e| Error::Format(format!("datatype: {e}")))?;
    let element = match datatype {
        NiftiType::Uint8 | NiftiType::Int8 => 1,
        NiftiType::Int16 | NiftiType::Uint16 => 2,
        NiftiType::Int32 | NiftiType::Uint32 | NiftiType::Float32 => 4,
        NiftiType::Int64 | NiftiType::Uint64 | NiftiType::Float64 => 8,
        other => bail!(Format, "unsupported voxel type {other:?}"),
    };
    let mut voxels: usize = 1;
    for &d in &header.dim[1..=ndim] {
        if d == 0 {
            bail!(Format, "zero-length dimension in {:?}", &header.dim[..=ndim]);
        }
        voxels = voxels
            .checked_mul(d as usize)
            .ok_or_else(|| Error::Format("declared volume size overflows".into()))?;
    }
    let payload = voxels
        .checked_mul(element)
        .ok_or_else(|| Error::Format("declared volume size overflows".into()))?;
    let offset = header.vox_offset;
    if !offset.is_finite() || offset < HEADER_BYTES as f32 + 4.0 {
        bail!(Format, "vox_offset {offset} is invalid for a single-file volume");
    }
    let end = (offset as usize)
        .checked_add(payload)
        .ok_or_else(|| Error::Format("declared volume size overflows".into()))?;
    if end > available {
        bail!(Format, "header declares {end} bytes but the file holds {available}");
    }
    Ok(())
}

/// sform when its code is set, otherwise qform; a header with neither is an
/// error because the engine never invents a world frame.
fn header_affine(header: &mut NiftiHeader) -> Result<Affine> {
    let affine = if header.sform_code > 0 {
        header.sform_affine::<f64>()
    } else if header.qform_code > 0 {
        if header.pixdim[1..4].iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            bail!(Validity, "qform requires non-negative spacings, got {:?}", &header.pixdim[1..4]);
        }
        let quat = [header.quatern_b, header.quatern_c, header.quatern_d];
        if quat.iter().any(|q| !q.is_finite()) {
            bail!(Validity, "qform quaternion is not finite");
        }
        // qfac outside {-1, 1} is read as 1, the usual NIfTI convention.
        if (header.pixdim[0].abs() - 1.0).abs() >= 1e-11 {
            header.pixdim[0] = 1.0;
        }
        header.qform_affine::<f64>()
    } else {
        bail!(Validity, "header carries neither an sform nor a qform transform");
    };
    validate_affine(&affine)?;
    Ok(affine)
}

/// Writes a batch-1 sample as a float64 volume with its affine in the
/// sform. Single-feature samples are written as rank-3 volumes.
pub fn write_sample(path: impl AsRef<Path>, sample: &Sample) -> Result<()> {
    let path = path.as_ref();
    if sample.batch() != 1 {
        bail!(Shape, "only batch-1 samples map onto a single volume, got batch {}", sample.batch());
    }
    let element = sample.data().index_axis(Axis(0), 0).to_owned().into_dyn();
    let data = if sample.features() == 1 {
        element.index_axis(Axis(3), 0).to_owned()
    } else {
        element
    };
    write_volume(path, &data, sample.affine(0))
}

/// Writes a rank-3 or rank-4 array with the given affine.
pub fn write_volume(path: &Path, data: &ArrayD<f64>, affine: &Affine) -> Result<()> {
    if !(3..=4).contains(&data.ndim()) {
        bail!(Shape, "volumes must have rank 3 or 4, got {}", data.ndim());
    }
    validate_affine(affine)?;
    let mut header = NiftiHeader::default();
    header.set_affine(affine);
    let spacing = voxel_size(affine);
    header.pixdim = [1.0, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    header.xyzt_units = 2;
    let data = data.view().into_dimensionality::<IxDyn>().expect("dynamic");
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&data)
        .map_err(|e| match e {
            nifti::NiftiError::Io(io) => Error::io(path, io),
            other => Error::Format(other.to_string()),
        })
}
