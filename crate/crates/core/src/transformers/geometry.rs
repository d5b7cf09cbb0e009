use nalgebra::{Matrix3, Rotation3, Vector3};
use ndarray::{Array5, Axis, Slice};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AffineDeformation, Interpolation, Threshold};
use crate::error::{bail, Result};
use crate::sample::{apply_affine, Affine, Sample};

pub(crate) fn threshold(sample: &Sample, p: &Threshold) -> Sample {
    let data = sample.data().mapv(|v| {
        let above = v > p.lower_threshold;
        let below = p.upper_threshold.is_none_or(|u| v <= u);
        if above && below {
            1.0
        } else {
            0.0
        }
    });
    Sample::with_parts(data, sample.affines().to_vec()).expect("shape unchanged")
}

/// Reverses the selected spatial axes and relabels the affine so every voxel
/// keeps its world coordinate.
pub fn flip_sample(sample: &Sample, axes: [bool; 3]) -> Sample {
    if !axes.contains(&true) {
        return sample.clone();
    }
    let mut view = sample.data().view();
    let shape = sample.spatial_shape();
    let mut relabel = Affine::identity();
    for (a, flip) in axes.iter().enumerate() {
        if *flip {
            view.slice_axis_inplace(Axis(a + 1), Slice::new(0, None, -1));
            relabel[(a, a)] = -1.0;
            relabel[(a, 3)] = shape[a] as f64 - 1.0;
        }
    }
    let data: Array5<f64> = view.to_owned();
    let affines = sample.affines().iter().map(|a| a * relabel).collect();
    Sample::with_parts(data, affines).expect("shape unchanged")
}

/// One draw of deformation parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DeformationDraw {
    /// Radians about the first, second and third world axes.
    pub rotation: [f64; 3],
    /// Millimeters.
    pub translation: [f64; 3],
    /// Multiplicative offsets; the applied scale is `1 + s`.
    pub scaling: [f64; 3],
}

impl DeformationDraw {
    pub(crate) fn sample(p: &AffineDeformation, rng: &mut ChaCha8Rng) -> Self {
        let mut window = |w: [f64; 3]| w.map(|w| (rng.random::<f64>() - 0.5) * w);
        DeformationDraw {
            rotation: window(p.rotation_window_width),
            translation: window(p.translation_window_width),
            scaling: window(p.scaling_window_width),
        }
    }
}

/// World-space map `x -> R S (x - c) + c + t` with `c` the world position of
/// the reference's central voxel and `R = Rz Ry Rx`.
pub fn deformation_matrix(draw: &DeformationDraw, reference: &Sample) -> Result<Affine> {
    let shape = reference.spatial_shape();
    let center = apply_affine(
        reference.affine(0),
        shape.map(|s| (s as f64 - 1.0) / 2.0),
    );
    let [rx, ry, rz] = draw.rotation;
    let rotation = Rotation3::from_axis_angle(&Vector3::z_axis(), rz)
        * Rotation3::from_axis_angle(&Vector3::y_axis(), ry)
        * Rotation3::from_axis_angle(&Vector3::x_axis(), rx);
    let scale = Matrix3::from_diagonal(&Vector3::from(draw.scaling.map(|s| 1.0 + s)));
    let linear = rotation.matrix() * scale;
    let c = Vector3::from(center);
    let shift = c + Vector3::from(draw.translation) - linear * c;
    let mut m = Affine::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&linear);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&shift);
    Ok(m)
}

/// Snap coordinates that are integers up to rounding noise.
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Resamples `sample` on its own grid after moving its content by the world
/// map `m`; reads outside the volume return `fill`.
pub fn resample(sample: &Sample, m: &Affine, interp: Interpolation, fill: f64) -> Result<Sample> {
    let Some(m_inv) = m.try_inverse() else {
        bail!(Numeric, "deformation matrix is not invertible");
    };
    let [b, s0, s1, s2, f] = sample.shape();
    let src = sample.data();
    let mut out = Array5::from_elem((b, s0, s1, s2, f), fill);
    for bi in 0..b {
        let a = sample.affine(bi);
        let Some(a_inv) = a.try_inverse() else {
            bail!(Numeric, "sample affine is not invertible");
        };
        let voxel_map = a_inv * m_inv * a;
        let lin = voxel_map.fixed_view::<3, 3>(0, 0).into_owned();
        let off = voxel_map.fixed_view::<3, 1>(0, 3).into_owned();
        let extent = [s0 as f64, s1 as f64, s2 as f64];
        for i in 0..s0 {
            for j in 0..s1 {
                for k in 0..s2 {
                    let p = lin * Vector3::new(i as f64, j as f64, k as f64) + off;
                    let p = [snap(p[0]), snap(p[1]), snap(p[2])];
                    match interp {
                        Interpolation::Nearest => {
                            let q = p.map(f64::round);
                            if (0..3).all(|ax| q[ax] >= 0.0 && q[ax] < extent[ax]) {
                                let (qi, qj, qk) = (q[0] as usize, q[1] as usize, q[2] as usize);
                                for c in 0..f {
                                    out[[bi, i, j, k, c]] = src[[bi, qi, qj, qk, c]];
                                }
                            }
                        }
                        Interpolation::Linear => {
                            let base = p.map(f64::floor);
                            let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
                            if (0..3).any(|ax| base[ax] + 1.0 < 0.0 || base[ax] >= extent[ax]) {
                                continue;
                            }
                            for c in 0..f {
                                let mut acc = 0.0;
                                for corner in 0..8 {
                                    let mut w = 1.0;
                                    let mut idx = [0i64; 3];
                                    for ax in 0..3 {
                                        let up = (corner >> ax) & 1 == 1;
                                        w *= if up { frac[ax] } else { 1.0 - frac[ax] };
                                        idx[ax] = base[ax] as i64 + i64::from(up);
                                    }
                                    if w == 0.0 {
                                        continue;
                                    }
                                    let inside =
                                        (0..3).all(|ax| idx[ax] >= 0 && (idx[ax] as f64) < extent[ax]);
                                    acc += w * if inside {
                                        src[[bi, idx[0] as usize, idx[1] as usize, idx[2] as usize, c]]
                                    } else {
                                        fill
                                    };
                                }
                                out[[bi, i, j, k, c]] = acc;
                            }
                        }
                    }
                }
            }
        }
    }
    Sample::with_parts(out, sample.affines().to_vec())
}
