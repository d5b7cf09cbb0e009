//! The spatial value type that flows through every pipeline.
//!
//! A [`Sample`] is a rank-5 tensor laid out as
//! `batch × spatial0 × spatial1 × spatial2 × feature` together with one
//! homogeneous voxel-to-world matrix per batch element. All features of a
//! batch element share that element's matrix.

use std::sync::Arc;

use nalgebra::{Matrix4, Vector4};
use ndarray::{Array5, ArrayD, Axis, IxDyn};

use crate::error::{bail, Result};

/// Homogeneous 4×4 voxel-to-world matrix (millimeters).
pub type Affine = Matrix4<f64>;

/// Elementwise tolerance used whenever two affines are compared.
pub const AFFINE_TOLERANCE: f64 = 1e-5;

/// Immutable 5D array plus per-batch-element affines.
///
/// Cloning is cheap: storage is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    data: Arc<Array5<f64>>,
    affines: Arc<[Affine]>,
}

impl Sample {
    /// Builds a sample from a rank-5 array. A missing affine stack is
    /// replaced by one identity per batch element.
    pub fn new(data: Array5<f64>, affines: Option<Vec<Affine>>) -> Result<Self> {
        let batch = data.shape()[0];
        let affines = match affines {
            Some(a) => {
                if a.len() != batch {
                    bail!(
                        Shape,
                        "affine stack has {} matrices but the batch size is {}",
                        a.len(),
                        batch
                    );
                }
                for (b, m) in a.iter().enumerate() {
                    validate_affine(m).map_err(|e| match e {
                        crate::Error::Validity(msg) => {
                            crate::Error::Validity(format!("affine {b}: {msg}"))
                        }
                        other => other,
                    })?;
                }
                a
            }
            None => vec![Affine::identity(); batch],
        };
        Ok(Sample {
            data: Arc::new(data),
            affines: affines.into(),
        })
    }

    /// Builds a sample from an array of any rank, which must be exactly 5.
    pub fn from_dyn(data: ArrayD<f64>, affines: Option<Vec<Affine>>) -> Result<Self> {
        if data.ndim() != 5 {
            bail!(Shape, "sample data must have rank 5, got rank {}", data.ndim());
        }
        let data = data
            .into_dimensionality::<ndarray::Ix5>()
            .expect("rank checked above");
        Sample::new(data, affines)
    }

    /// Single-element sample holding `value` with an identity affine.
    pub fn scalar(value: f64) -> Self {
        Sample::new(Array5::from_elem((1, 1, 1, 1, 1), value), None)
            .expect("identity affine is valid")
    }

    pub fn data(&self) -> &Array5<f64> {
        &self.data
    }

    pub fn affines(&self) -> &[Affine] {
        &self.affines
    }

    pub fn affine(&self, batch: usize) -> &Affine {
        &self.affines[batch]
    }

    pub fn shape(&self) -> [usize; 5] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3], s[4]]
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn features(&self) -> usize {
        self.data.shape()[4]
    }

    /// World coordinate of voxel `idx` in batch element `batch`.
    pub fn voxel_to_world(&self, batch: usize, idx: [usize; 3]) -> Result<[f64; 3]> {
        if batch >= self.batch() {
            bail!(Index, "batch index {batch} out of range for batch size {}", self.batch());
        }
        let shape = self.spatial_shape();
        for axis in 0..3 {
            if idx[axis] >= shape[axis] {
                bail!(Index, "voxel index {:?} outside spatial shape {:?}", idx, shape);
            }
        }
        Ok(apply_affine(
            &self.affines[batch],
            [idx[0] as f64, idx[1] as f64, idx[2] as f64],
        ))
    }

    /// Replaces the data while keeping the batch size; affines are passed
    /// explicitly so every transformer states what happens to them.
    pub fn with_parts(data: Array5<f64>, affines: Vec<Affine>) -> Result<Self> {
        Sample::new(data, Some(affines))
    }

    /// Concatenates samples along the batch axis.
    pub fn concat_batch(samples: &[Sample]) -> Result<Sample> {
        let Some(first) = samples.first() else {
            bail!(Argument, "cannot concatenate an empty list of samples");
        };
        let [_, s0, s1, s2, f] = first.shape();
        for s in samples {
            let [_, t0, t1, t2, g] = s.shape();
            if (t0, t1, t2, g) != (s0, s1, s2, f) {
                bail!(
                    Shape,
                    "cannot concatenate samples of shape {:?} and {:?} along the batch axis",
                    first.shape(),
                    s.shape()
                );
            }
        }
        if samples.len() == 1 {
            return Ok(first.clone());
        }
        let views: Vec<_> = samples.iter().map(|s| s.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| crate::Error::Shape(e.to_string()))?;
        let affines = samples
            .iter()
            .flat_map(|s| s.affines.iter().copied())
            .collect();
        Sample::new(data, Some(affines))
    }

    /// Splits a batched sample into its batch elements.
    pub fn unbatch(&self) -> Vec<Sample> {
        (0..self.batch())
            .map(|b| {
                let data = self
                    .data
                    .slice_axis(Axis(0), (b..b + 1).into())
                    .to_owned();
                Sample::new(data, Some(vec![self.affines[b]])).expect("valid parts")
            })
            .collect()
    }
}

/// Checks the homogeneous last row and invertibility of the linear block.
pub fn validate_affine(m: &Affine) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        bail!(Validity, "affine contains non-finite entries");
    }
    let row = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
    if row != [0.0, 0.0, 0.0, 1.0] {
        bail!(Validity, "last affine row is {:?}, expected (0, 0, 0, 1)", row);
    }
    let det = m.fixed_view::<3, 3>(0, 0).determinant();
    if det == 0.0 || !det.is_finite() {
        bail!(Validity, "affine linear part is singular");
    }
    Ok(())
}

/// `a · T(offset)`: voxel (0,0,0) of the result lands where voxel `offset`
/// of `a` lands.
pub fn compose_offset(a: &Affine, offset: [i64; 3]) -> Affine {
    let mut t = Affine::identity();
    for axis in 0..3 {
        t[(axis, 3)] = offset[axis] as f64;
    }
    a * t
}

/// Applies an affine to a point given in voxel (or any source) coordinates.
pub fn apply_affine(a: &Affine, p: [f64; 3]) -> [f64; 3] {
    let v = a * Vector4::new(p[0], p[1], p[2], 1.0);
    [v[0], v[1], v[2]]
}

/// Voxel spacing per axis: norms of the first three columns.
pub fn voxel_size(a: &Affine) -> [f64; 3] {
    [0, 1, 2].map(|c| a.fixed_view::<3, 1>(0, c).norm())
}

/// Elementwise comparison with [`AFFINE_TOLERANCE`].
pub fn affines_close(a: &Affine, b: &Affine) -> bool {
    a.iter()
        .zip(b.iter())
        .all(|(x, y)| (x - y).abs() <= AFFINE_TOLERANCE)
}

/// Roles an input axis can take when promoting to rank 5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AxisRole {
    Batch,
    Spatial0,
    Spatial1,
    Spatial2,
    Feature,
}

impl AxisRole {
    fn position(self) -> usize {
        match self {
            AxisRole::Batch => 0,
            AxisRole::Spatial0 => 1,
            AxisRole::Spatial1 => 2,
            AxisRole::Spatial2 => 3,
            AxisRole::Feature => 4,
        }
    }
}

/// Promotes an array of rank ≤ 5 to rank 5 given an explicit role for each
/// of its axes. Roles that are not assigned become singleton axes.
pub fn promote(data: ArrayD<f64>, roles: &[AxisRole]) -> Result<Array5<f64>> {
    if roles.len() != data.ndim() {
        bail!(
            Argument,
            "{} axis roles given for an array of rank {}",
            roles.len(),
            data.ndim()
        );
    }
    let mut seen = [false; 5];
    for role in roles {
        if std::mem::replace(&mut seen[role.position()], true) {
            bail!(Argument, "axis role {:?} assigned twice", role);
        }
    }
    let mut order: Vec<usize> = (0..roles.len()).collect();
    order.sort_by_key(|&axis| roles[axis].position());
    let mut target = [1usize; 5];
    for (axis, role) in roles.iter().enumerate() {
        target[role.position()] = data.shape()[axis];
    }
    let permuted = data.permuted_axes(IxDyn(&order));
    let standard = permuted.as_standard_layout().into_owned();
    let out = standard
        .into_shape_with_order(IxDyn(&target))
        .map_err(|e| crate::Error::Shape(e.to_string()))?;
    Ok(out
        .into_dimensionality::<ndarray::Ix5>()
        .expect("target has rank 5"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr0, Array};

    fn spacing(mm: f64) -> Affine {
        let mut a = Affine::identity();
        for i in 0..3 {
            a[(i, i)] = mm;
        }
        a
    }

    #[test]
    fn absent_affine_becomes_identity_stack() {
        let s = Sample::new(Array5::ones((2, 100, 100, 1, 3)), None).unwrap();
        assert_eq!(s.shape(), [2, 100, 100, 1, 3]);
        assert_eq!(s.affines(), &[Affine::identity(), Affine::identity()]);
        let explicit = Sample::new(
            Array5::ones((2, 100, 100, 1, 3)),
            Some(vec![Affine::identity(); 2]),
        )
        .unwrap();
        assert_eq!(s, explicit);
    }

    #[test]
    fn header_affine_is_echoed() {
        let mut a = spacing(1.0);
        a[(0, 3)] = -120.0;
        a[(1, 3)] = -120.0;
        let s = Sample::new(Array5::zeros((1, 24, 24, 15, 1)), Some(vec![a])).unwrap();
        assert_eq!(s.affine(0), &a);
    }

    #[test]
    fn rank_four_is_rejected() {
        let err = Sample::from_dyn(ArrayD::zeros(IxDyn(&[2, 3, 4, 5])), None).unwrap_err();
        assert!(matches!(err, crate::Error::Shape(_)));
    }

    #[test]
    fn affine_batch_mismatch_and_bad_last_row() {
        let err = Sample::new(Array5::zeros((2, 1, 1, 1, 1)), Some(vec![Affine::identity()]))
            .unwrap_err();
        assert!(matches!(err, crate::Error::Shape(_)));
        let mut bad = Affine::identity();
        bad[(3, 0)] = 1.0;
        let err = Sample::new(Array5::zeros((1, 1, 1, 1, 1)), Some(vec![bad])).unwrap_err();
        assert!(matches!(err, crate::Error::Validity(_)));
    }

    #[test]
    fn promote_scalar() {
        let out = promote(arr0(45.0).into_dyn(), &[]).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(out[[0, 0, 0, 0, 0]], 45.0);
    }

    #[test]
    fn promote_plane_and_feature_image() {
        let plane = Array::from_shape_fn((100, 100), |(i, j)| (i * 100 + j) as f64).into_dyn();
        let out = promote(plane, &[AxisRole::Spatial0, AxisRole::Spatial1]).unwrap();
        assert_eq!(out.shape(), &[1, 100, 100, 1, 1]);
        assert_eq!(out[[0, 3, 7, 0, 0]], 307.0);

        let rgb = Array::from_shape_fn((2, 100, 100, 3), |(b, i, j, f)| {
            (b * 1_000_000 + i * 1000 + j * 10 + f) as f64
        })
        .into_dyn();
        let out = promote(
            rgb,
            &[
                AxisRole::Batch,
                AxisRole::Spatial0,
                AxisRole::Spatial1,
                AxisRole::Feature,
            ],
        )
        .unwrap();
        assert_eq!(out.shape(), &[2, 100, 100, 1, 3]);
        assert_eq!(out[[1, 4, 5, 0, 2]], 1_004_052.0);
    }

    #[test]
    fn promote_reorders_axes() {
        let a = Array::from_shape_fn((3, 4), |(i, j)| (i * 10 + j) as f64).into_dyn();
        let out = promote(a, &[AxisRole::Feature, AxisRole::Spatial0]).unwrap();
        assert_eq!(out.shape(), &[1, 4, 1, 1, 3]);
        assert_eq!(out[[0, 2, 0, 0, 1]], 12.0);
    }

    #[test]
    fn promote_rejects_duplicate_roles() {
        let err = promote(
            ArrayD::zeros(IxDyn(&[2, 2])),
            &[AxisRole::Spatial0, AxisRole::Spatial0],
        )
        .unwrap_err();
        assert!(matches!(err, crate::Error::Argument(_)));
    }

    #[test]
    fn voxel_to_world_examples() {
        let s = Sample::new(Array5::zeros((1, 8, 8, 8, 1)), None).unwrap();
        assert_eq!(s.voxel_to_world(0, [3, 4, 5]).unwrap(), [3.0, 4.0, 5.0]);

        let mut shifted = Affine::identity();
        shifted[(0, 3)] = 10.0;
        let s = Sample::new(Array5::zeros((1, 2, 2, 2, 1)), Some(vec![shifted])).unwrap();
        assert_eq!(s.voxel_to_world(0, [0, 0, 0]).unwrap(), [10.0, 0.0, 0.0]);

        let s = Sample::new(Array5::zeros((1, 2, 2, 2, 1)), Some(vec![spacing(2.0)])).unwrap();
        assert_eq!(s.voxel_to_world(0, [1, 1, 1]).unwrap(), [2.0, 2.0, 2.0]);

        assert!(matches!(
            s.voxel_to_world(0, [2, 0, 0]),
            Err(crate::Error::Index(_))
        ));
        assert!(matches!(
            s.voxel_to_world(1, [0, 0, 0]),
            Err(crate::Error::Index(_))
        ));
    }

    #[test]
    fn compose_offset_examples() {
        let m = compose_offset(&Affine::identity(), [5, 0, 0]);
        assert_eq!(
            [m[(0, 3)], m[(1, 3)], m[(2, 3)], m[(3, 3)]],
            [5.0, 0.0, 0.0, 1.0]
        );
        let base = spacing(2.0);
        let m = compose_offset(&base, [1, 1, 1]);
        assert_eq!([m[(0, 3)], m[(1, 3)], m[(2, 3)]], [2.0, 2.0, 2.0]);
        assert_eq!(compose_offset(&base, [0, 0, 0]), base);
    }

    #[test]
    fn concat_and_unbatch() {
        let mut shifted = Affine::identity();
        shifted[(2, 3)] = 4.0;
        let a = Sample::new(Array5::zeros((1, 2, 3, 4, 1)), None).unwrap();
        let b = Sample::new(Array5::ones((1, 2, 3, 4, 1)), Some(vec![shifted])).unwrap();
        let both = Sample::concat_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(both.shape(), [2, 2, 3, 4, 1]);
        assert_eq!(both.affines(), &[Affine::identity(), shifted]);
        assert_eq!(both.unbatch(), vec![a.clone(), b]);
        let c = Sample::new(Array5::zeros((1, 2, 3, 5, 1)), None).unwrap();
        assert!(matches!(
            Sample::concat_batch(&[a, c]),
            Err(crate::Error::Shape(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_affine() -> impl Strategy<Value = Affine> {
            proptest::collection::vec(-3.0f64..3.0, 12).prop_filter_map("singular", |v| {
                let mut a = Affine::identity();
                for r in 0..3 {
                    for c in 0..4 {
                        a[(r, c)] = v[r * 4 + c] * if c == 3 { 30.0 } else { 1.0 };
                    }
                }
                (a.fixed_view::<3, 3>(0, 0).determinant().abs() > 1e-3).then_some(a)
            })
        }

        fn offset() -> impl Strategy<Value = [i64; 3]> {
            [-50i64..50, -50i64..50, -50i64..50]
        }

        proptest! {
            #[test]
            fn compose_offset_is_additive(a in random_affine(), u in offset(), v in offset()) {
                let sum = [u[0] + v[0], u[1] + v[1], u[2] + v[2]];
                let direct = compose_offset(&a, sum);
                let chained = compose_offset(&compose_offset(&a, u), v);
                for (x, y) in direct.iter().zip(chained.iter()) {
                    prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
                }
            }

            #[test]
            fn crop_origin_maps_to_source_offset(a in random_affine(), o in [0usize..10, 0usize..10, 0usize..10]) {
                let source = Sample::new(Array5::zeros((1, 10, 10, 10, 1)), Some(vec![a])).unwrap();
                let crop_affine = compose_offset(&a, [o[0] as i64, o[1] as i64, o[2] as i64]);
                let crop = Sample::new(Array5::zeros((1, 1, 1, 1, 1)), Some(vec![crop_affine])).unwrap();
                let p = crop.voxel_to_world(0, [0, 0, 0]).unwrap();
                let q = source.voxel_to_world(0, o).unwrap();
                for k in 0..3 {
                    prop_assert!((p[k] - q[k]).abs() < 1e-9);
                }
            }
        }
    }
}
