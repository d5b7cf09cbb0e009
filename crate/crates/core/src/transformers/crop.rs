use ndarray::{s, Array5};

use crate::error::{bail, Result};
use crate::sample::{compose_offset, Sample};

/// Extracts the `size` block starting at `start` (may lie partly outside)
/// from every batch element, padding with `fill`.
pub fn crop_block(sample: &Sample, start: [i64; 3], size: [usize; 3], fill: f64) -> Sample {
    let [b, s0, s1, s2, f] = sample.shape();
    let src_shape = [s0, s1, s2];
    let mut out = Array5::from_elem((b, size[0], size[1], size[2], f), fill);
    let mut src = [(0usize, 0usize); 3];
    let mut dst = [(0usize, 0usize); 3];
    let mut empty = false;
    for a in 0..3 {
        let lo = start[a].max(0);
        let hi = (start[a] + size[a] as i64).min(src_shape[a] as i64);
        if hi <= lo {
            empty = true;
            break;
        }
        src[a] = (lo as usize, hi as usize);
        dst[a] = ((lo - start[a]) as usize, (hi - start[a]) as usize);
    }
    if !empty {
        out.slice_mut(s![.., dst[0].0..dst[0].1, dst[1].0..dst[1].1, dst[2].0..dst[2].1, ..])
            .assign(&sample.data().slice(s![
                ..,
                src[0].0..src[0].1,
                src[1].0..src[1].1,
                src[2].0..src[2].1,
                ..
            ]));
    }
    let affines = sample.affines().iter().map(|a| compose_offset(a, start)).collect();
    Sample::with_parts(out, affines).expect("crop keeps batch and affines in step")
}

/// Centered crop with floor offset `(in - out) / 2`.
pub fn center_crop(sample: &Sample, target: [usize; 3]) -> Result<Sample> {
    let shape = sample.spatial_shape();
    if (0..3).any(|a| target[a] > shape[a]) {
        bail!(
            Shape,
            "crop target {target:?} exceeds input spatial shape {shape:?}"
        );
    }
    let start = [0, 1, 2].map(|a| ((shape[a] - target[a]) / 2) as i64);
    Ok(crop_block(sample, start, target, 0.0))
}

/// Tile starts along one axis: stride `size - overlap`, final tile clamped
/// inward. A tile at least as large as the axis is centered.
pub fn grid_starts(extent: usize, size: usize, overlap: usize) -> Result<Vec<i64>> {
    if size == 0 || overlap >= size {
        bail!(Argument, "overlap {overlap} must be smaller than tile size {size}");
    }
    if size >= extent {
        return Ok(vec![(extent as i64 - size as i64).div_euclid(2)]);
    }
    let stride = size - overlap;
    let last = extent - size;
    let mut starts = Vec::new();
    let mut start = 0;
    loop {
        starts.push(start.min(last) as i64);
        if start + size >= extent {
            break;
        }
        start += stride;
    }
    Ok(starts)
}

/// Raster-ordered tile starts over a volume, first axis outermost.
pub fn grid_tiles(shape: [usize; 3], size: [usize; 3], overlap: [usize; 3]) -> Result<Vec<[i64; 3]>> {
    let per_axis: Vec<Vec<i64>> = (0..3)
        .map(|a| grid_starts(shape[a], size[a], overlap[a]))
        .collect::<Result<_>>()?;
    let mut tiles = Vec::new();
    for &i in &per_axis[0] {
        for &j in &per_axis[1] {
            for &k in &per_axis[2] {
                tiles.push([i, j, k]);
            }
        }
    }
    Ok(tiles)
}

/// Voxels of the first batch element where any feature is positive.
pub(crate) fn nonzero_voxels(mask: &Sample) -> Vec<[usize; 3]> {
    let data = mask.data();
    let [_, s0, s1, s2, f] = mask.shape();
    let mut out = Vec::new();
    for i in 0..s0 {
        for j in 0..s1 {
            for k in 0..s2 {
                if (0..f).any(|c| data[[0, i, j, k, c]] > 0.0) {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}
