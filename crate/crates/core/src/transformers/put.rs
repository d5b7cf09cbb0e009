use ndarray::{s, Array3, Array4, Array5};

use super::Aggregation;
use crate::error::{bail, Result};
use crate::sample::{Affine, Sample};

const ALIGNMENT_TOLERANCE: f64 = 1e-3;

/// Exact voxel correspondence between two grids: target index along axis
/// `a` is `sign[a] * source[axis[a]] + offset[a]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridMap {
    pub axis: [usize; 3],
    pub sign: [i64; 3],
    pub offset: [i64; 3],
}

impl GridMap {
    pub fn is_shift(&self) -> bool {
        self.axis == [0, 1, 2] && self.sign == [1, 1, 1]
    }
}

/// Grid map from `placed` voxels into `reference` voxels. The grids must
/// differ by axis reversals, axis permutations and an integer shift.
pub fn grid_map(reference: &Affine, placed: &Affine) -> Result<GridMap> {
    let Some(inv) = reference.try_inverse() else {
        bail!(Numeric, "reference affine is not invertible");
    };
    let d = inv * placed;
    let mut map = GridMap {
        axis: [0; 3],
        sign: [1; 3],
        offset: [0; 3],
    };
    let mut used = [false; 3];
    for r in 0..3 {
        let mut found = None;
        for c in 0..3 {
            let v = d[(r, c)];
            if (v.abs() - 1.0).abs() <= ALIGNMENT_TOLERANCE {
                if found.is_some() || used[c] {
                    found = None;
                    break;
                }
                found = Some((c, v.signum() as i64));
            } else if v.abs() > ALIGNMENT_TOLERANCE {
                found = None;
                break;
            }
        }
        let Some((c, sign)) = found else {
            bail!(
                Alignment,
                "sample grid is rotated or scaled relative to the reference"
            );
        };
        used[c] = true;
        map.axis[r] = c;
        map.sign[r] = sign;
        let t = d[(r, 3)];
        if (t - t.round()).abs() > ALIGNMENT_TOLERANCE {
            bail!(Alignment, "offset {t} along axis {r} is not an integer voxel count");
        }
        map.offset[r] = t.round() as i64;
    }
    Ok(map)
}

/// Integer shift `t` with `placed = reference · T(t)`.
pub fn voxel_offset(reference: &Affine, placed: &Affine) -> Result<[i64; 3]> {
    let map = grid_map(reference, placed)?;
    if !map.is_shift() {
        bail!(Alignment, "sample grid is flipped or permuted relative to the reference");
    }
    Ok(map.offset)
}

fn contribute(acc: &mut Array4<f64>, count: &mut Array3<u32>, at: [usize; 3], values: impl Iterator<Item = f64>, aggregation: Aggregation) {
    let n = &mut count[at];
    for (c, v) in values.enumerate() {
        let slot = &mut acc[[at[0], at[1], at[2], c]];
        match aggregation {
            Aggregation::Average => *slot += v,
            Aggregation::Overwrite => *slot = v,
        }
    }
    match aggregation {
        Aggregation::Average => *n += 1,
        Aggregation::Overwrite => *n = 1,
    }
}

/// Pastes every batch element of every incoming sample into the reference
/// grid. Average mode divides by the number of contributions per voxel;
/// voxels nobody touched keep `fill`.
pub fn put_samples(
    reference: &Sample,
    incoming: &[Sample],
    aggregation: Aggregation,
    fill: f64,
) -> Result<Sample> {
    let shape = reference.spatial_shape();
    let Some(first) = incoming.first() else {
        bail!(Contract, "put received no samples");
    };
    let features = first.features();
    let mut acc = Array4::<f64>::zeros((shape[0], shape[1], shape[2], features));
    let mut count = Array3::<u32>::zeros((shape[0], shape[1], shape[2]));
    for sample in incoming {
        if sample.features() != features {
            bail!(
                Shape,
                "put contributions have {} and {} features",
                features,
                sample.features()
            );
        }
        let size = sample.spatial_shape();
        for b in 0..sample.batch() {
            let map = grid_map(reference.affine(0), sample.affine(b))?;
            if map.is_shift() {
                paste_shifted(&mut acc, &mut count, sample, b, map.offset, shape, size, aggregation);
                continue;
            }
            let data = sample.data();
            for ((i, j, k), _) in data.slice(s![b, .., .., .., 0]).indexed_iter() {
                let v = [i as i64, j as i64, k as i64];
                let t = [0, 1, 2].map(|a| map.sign[a] * v[map.axis[a]] + map.offset[a]);
                if (0..3).all(|a| t[a] >= 0 && t[a] < shape[a] as i64) {
                    let at = t.map(|x| x as usize);
                    let values = (0..features).map(|c| data[[b, i, j, k, c]]);
                    contribute(&mut acc, &mut count, at, values, aggregation);
                }
            }
        }
    }
    let mut out = Array5::from_elem((1, shape[0], shape[1], shape[2], features), fill);
    for ((i, j, k), n) in count.indexed_iter() {
        if *n > 0 {
            for c in 0..features {
                out[[0, i, j, k, c]] = acc[[i, j, k, c]] / f64::from(*n);
            }
        }
    }
    Sample::with_parts(out, vec![*reference.affine(0)])
}

#[allow(clippy::too_many_arguments)]
fn paste_shifted(
    acc: &mut Array4<f64>,
    count: &mut Array3<u32>,
    sample: &Sample,
    b: usize,
    t: [i64; 3],
    shape: [usize; 3],
    size: [usize; 3],
    aggregation: Aggregation,
) {
    let mut src = [(0usize, 0usize); 3];
    let mut dst = [(0usize, 0usize); 3];
    for a in 0..3 {
        let lo = t[a].max(0);
        let hi = (t[a] + size[a] as i64).min(shape[a] as i64);
        if hi <= lo {
            return;
        }
        dst[a] = (lo as usize, hi as usize);
        src[a] = ((lo - t[a]) as usize, (hi - t[a]) as usize);
    }
    let patch = sample.data().slice(s![
        b,
        src[0].0..src[0].1,
        src[1].0..src[1].1,
        src[2].0..src[2].1,
        ..
    ]);
    let mut target = acc.slice_mut(s![dst[0].0..dst[0].1, dst[1].0..dst[1].1, dst[2].0..dst[2].1, ..]);
    let mut hits = count.slice_mut(s![dst[0].0..dst[0].1, dst[1].0..dst[1].1, dst[2].0..dst[2].1]);
    match aggregation {
        Aggregation::Average => {
            target += &patch;
            hits += 1;
        }
        Aggregation::Overwrite => {
            target.assign(&patch);
            hits.fill(1);
        }
    }
}
