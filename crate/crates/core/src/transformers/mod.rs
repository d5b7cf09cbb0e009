//! Node kinds of the pipeline graph and their per-emission computations.

mod crop;
mod geometry;
mod put;

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::{model_hash, Model};
use crate::sample::Sample;

pub use crop::{center_crop, crop_block, grid_starts, grid_tiles};
pub use geometry::{deformation_matrix, flip_sample, resample, DeformationDraw};
pub use put::{grid_map, put_samples, voxel_offset, GridMap};

/// How many outputs a node generates per input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Multiplicity {
    Count(usize),
    /// One output per tile; only meaningful for grid cropping.
    AllTiles,
}

impl Multiplicity {
    pub fn as_option(self) -> Option<usize> {
        match self {
            Multiplicity::Count(n) => Some(n),
            Multiplicity::AllTiles => None,
        }
    }

    pub fn from_option(n: Option<usize>) -> Self {
        n.map_or(Multiplicity::AllTiles, Multiplicity::Count)
    }
}

impl std::fmt::Display for Multiplicity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Multiplicity::Count(n) => write!(f, "{n}"),
            Multiplicity::AllTiles => f.write_str("all"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Linear,
    Nearest,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Average,
    Overwrite,
}

fn zero3() -> [f64; 3] {
    [0.0; 3]
}

/// Random rigid-plus-scale resampling about the reference's world center.
/// Every parameter is drawn uniformly from `[-w/2, w/2]`; scales are
/// `1 + u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineDeformation {
    #[serde(default = "zero3")]
    pub rotation_window_width: [f64; 3],
    #[serde(default = "zero3")]
    pub translation_window_width: [f64; 3],
    #[serde(default = "zero3")]
    pub scaling_window_width: [f64; 3],
    /// Per input connection; missing entries use linear interpolation.
    #[serde(default)]
    pub interpolation: Vec<Interpolation>,
    #[serde(default)]
    pub fill: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flip {
    pub flip_probabilities: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Threshold {
    pub lower_threshold: f64,
    #[serde(default)]
    pub upper_threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomCrop {
    /// One size for all input connections, or one per connection.
    pub sizes: Vec<[usize; 3]>,
    #[serde(default)]
    pub nonzero: bool,
    #[serde(default)]
    pub fill: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCrop {
    pub sizes: Vec<[usize; 3]>,
    #[serde(default)]
    pub overlap: [usize; 3],
    #[serde(default)]
    pub fill: f64,
}

/// Centered crop to a fixed size, or to the reference's size when `size`
/// is absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crop {
    #[serde(default)]
    pub size: Option<[usize; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Buffer {
    /// `None` drains until the upstream is depleted.
    #[serde(default)]
    pub buffer_size: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Put {
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub fill: f64,
}

/// A model node's serialized identity plus the attached instance, if any.
#[derive(Clone, Debug)]
pub struct ModelSlot {
    pub model_kind: String,
    pub sha256: String,
    pub num_outputs: usize,
    pub instance: Option<Arc<dyn Model>>,
}

impl ModelSlot {
    pub fn new(model: Arc<dyn Model>) -> Self {
        ModelSlot {
            model_kind: model.kind().to_owned(),
            sha256: model_hash(model.as_ref()),
            num_outputs: model.num_outputs(),
            instance: Some(model),
        }
    }
}

impl PartialEq for ModelSlot {
    fn eq(&self, other: &Self) -> bool {
        self.model_kind == other.model_kind
            && self.sha256 == other.sha256
            && self.num_outputs == other.num_outputs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Kind {
    CatalogInput { modalities: Vec<String> },
    DirectInput,
    Split { indices: Vec<usize> },
    Group,
    AffineDeformation(AffineDeformation),
    Flip(Flip),
    Threshold(Threshold),
    RandomCrop(RandomCrop),
    GridCrop(GridCrop),
    Crop(Crop),
    Buffer(Buffer),
    Put(Put),
    Model(ModelSlot),
}

impl Kind {
    pub fn catalog_input<S: AsRef<str>>(modalities: &[S]) -> Self {
        Kind::CatalogInput {
            modalities: modalities.iter().map(|m| m.as_ref().to_owned()).collect(),
        }
    }

    pub fn model(model: Arc<dyn Model>) -> Self {
        Kind::Model(ModelSlot::new(model))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Kind::CatalogInput { .. } => "CatalogInput",
            Kind::DirectInput => "DirectInput",
            Kind::Split { .. } => "Split",
            Kind::Group => "Group",
            Kind::AffineDeformation(_) => "AffineDeformation",
            Kind::Flip(_) => "Flip",
            Kind::Threshold(_) => "Threshold",
            Kind::RandomCrop(_) => "RandomCrop",
            Kind::GridCrop(_) => "GridCrop",
            Kind::Crop(_) => "Crop",
            Kind::Buffer(_) => "Buffer",
            Kind::Put(_) => "Put",
            Kind::Model(_) => "Model",
        }
    }

    pub fn is_input(&self) -> bool {
        matches!(self, Kind::CatalogInput { .. } | Kind::DirectInput)
    }

    pub fn default_multiplicity(&self) -> Multiplicity {
        match self {
            Kind::GridCrop(_) => Multiplicity::AllTiles,
            _ => Multiplicity::Count(1),
        }
    }

    /// Allowed numbers of reference connections.
    fn reference_range(&self) -> (usize, usize) {
        match self {
            Kind::AffineDeformation(_) | Kind::Put(_) => (1, 1),
            Kind::RandomCrop(p) if p.nonzero => (1, 1),
            Kind::RandomCrop(_) => (0, 1),
            Kind::Crop(c) if c.size.is_none() => (1, 1),
            _ => (0, 0),
        }
    }

    /// Number of output slots for a node with `inputs` input connections.
    pub fn arity(&self, inputs: usize) -> usize {
        match self {
            Kind::CatalogInput { .. } | Kind::DirectInput => 1,
            Kind::Group => usize::from(inputs > 0),
            Kind::Model(m) if inputs > 0 => m.num_outputs,
            Kind::Model(_) => 0,
            _ => inputs,
        }
    }

    /// Checks parameters, multiplicity and reference count.
    pub fn validate(&self, n: Multiplicity, references: usize) -> Result<()> {
        match n {
            Multiplicity::Count(0) => bail!(Argument, "{}: n must be positive", self.name()),
            Multiplicity::AllTiles if !matches!(self, Kind::GridCrop(_)) => {
                bail!(Argument, "{}: only grid cropping supports n = all", self.name())
            }
            _ => {}
        }
        let (lo, hi) = self.reference_range();
        if references < lo || references > hi {
            bail!(
                Argument,
                "{} takes {} reference connection(s), got {references}",
                self.name(),
                if lo == hi { lo.to_string() } else { format!("{lo} to {hi}") }
            );
        }
        match self {
            Kind::CatalogInput { modalities } if modalities.is_empty() => {
                bail!(Argument, "catalog input needs at least one modality")
            }
            Kind::Split { indices } if indices.is_empty() => {
                bail!(Argument, "split needs at least one index")
            }
            Kind::AffineDeformation(p) => {
                let widths = p
                    .rotation_window_width
                    .iter()
                    .chain(&p.translation_window_width)
                    .chain(&p.scaling_window_width);
                for w in widths {
                    if !(w.is_finite() && *w >= 0.0) {
                        bail!(Argument, "window widths must be finite and non-negative, got {w}");
                    }
                }
                if p.scaling_window_width.iter().any(|w| *w >= 2.0) {
                    bail!(Argument, "scaling window width must stay below 2");
                }
            }
            Kind::Flip(p) => {
                if p.flip_probabilities.iter().any(|q| !(0.0..=1.0).contains(q)) {
                    bail!(Argument, "flip probabilities must lie in [0, 1]");
                }
            }
            Kind::RandomCrop(RandomCrop { sizes, .. }) | Kind::GridCrop(GridCrop { sizes, .. }) => {
                if sizes.is_empty() || sizes.iter().flatten().any(|s| *s == 0) {
                    bail!(Argument, "crop sizes must be non-empty and positive");
                }
                if let Kind::GridCrop(g) = self {
                    for (size, overlap) in sizes.iter().flatten().zip(g.overlap.iter().cycle()) {
                        if overlap >= size {
                            bail!(Argument, "overlap {overlap} must be smaller than size {size}");
                        }
                    }
                }
            }
            Kind::Crop(Crop { size: Some(s) }) if s.contains(&0) => {
                bail!(Argument, "crop size must be positive")
            }
            Kind::Buffer(Buffer { buffer_size: Some(0) }) => {
                bail!(Argument, "buffer size must be positive")
            }
            _ => {}
        }
        Ok(())
    }
}

/// State derived from a node's current inputs.
#[derive(Clone, Debug, Default)]
pub(crate) enum Prepared {
    #[default]
    Nothing,
    /// Center candidates of a random crop.
    Centers(Centers),
    /// Tile starts of a grid crop, in the first input's grid.
    Tiles(Vec<[i64; 3]>),
}

#[derive(Clone, Debug)]
pub(crate) enum Centers {
    Listed(Vec<[usize; 3]>),
    Box([usize; 3]),
}

fn size_for(sizes: &[[usize; 3]], k: usize) -> Result<[usize; 3]> {
    match sizes {
        [one] => Ok(*one),
        many => match many.get(k) {
            Some(s) => Ok(*s),
            None => bail!(
                Argument,
                "{} crop sizes given but input connection {k} needs one",
                many.len()
            ),
        },
    }
}

fn first_sample<'a>(inputs: &'a [Vec<Sample>], what: &str) -> Result<&'a Sample> {
    match inputs.first().and_then(|l| l.first()) {
        Some(s) => Ok(s),
        None => bail!(Contract, "{what} received no samples"),
    }
}

fn single_reference<'a>(refs: &'a [Vec<Sample>], what: &str) -> Result<&'a Sample> {
    match refs.first().map(Vec::as_slice) {
        Some([one]) => Ok(one),
        Some(list) => bail!(
            Contract,
            "{what} reference must yield exactly one sample, got {}",
            list.len()
        ),
        None => bail!(Contract, "{what} has no reference connection"),
    }
}

/// Computes per-input state and the number of emissions for the new inputs.
pub(crate) fn prepare(
    kind: &Kind,
    n: Multiplicity,
    inputs: &[Vec<Sample>],
    refs: &[Vec<Sample>],
) -> Result<(usize, Prepared)> {
    let prepared = match kind {
        Kind::RandomCrop(p) => {
            let centers = match refs.first() {
                Some(_) => {
                    let mask = single_reference(refs, "random crop")?;
                    for list in inputs {
                        for s in list {
                            for b in 0..s.batch() {
                                if !crate::sample::affines_close(mask.affine(0), s.affine(b)) {
                                    bail!(
                                        Alignment,
                                        "random crop input is not aligned with its mask"
                                    );
                                }
                            }
                        }
                    }
                    if p.nonzero {
                        let listed = crop::nonzero_voxels(mask);
                        if listed.is_empty() {
                            bail!(Argument, "random crop mask has no nonzero voxel");
                        }
                        Centers::Listed(listed)
                    } else {
                        Centers::Box(mask.spatial_shape())
                    }
                }
                None => Centers::Box(first_sample(inputs, "random crop")?.spatial_shape()),
            };
            Prepared::Centers(centers)
        }
        Kind::GridCrop(p) => {
            let shape = first_sample(inputs, "grid crop")?.spatial_shape();
            Prepared::Tiles(grid_tiles(shape, size_for(&p.sizes, 0)?, p.overlap)?)
        }
        _ => Prepared::Nothing,
    };
    let capacity = match (n, &prepared) {
        (Multiplicity::Count(k), _) => k,
        (Multiplicity::AllTiles, Prepared::Tiles(t)) => t.len(),
        (Multiplicity::AllTiles, _) => bail!(State, "n = all outside grid cropping"),
    };
    Ok((capacity, prepared))
}

fn map_inputs(
    inputs: &[Vec<Sample>],
    mut f: impl FnMut(usize, &Sample) -> Result<Sample>,
) -> Result<Vec<Vec<Sample>>> {
    inputs
        .iter()
        .enumerate()
        .map(|(k, list)| list.iter().map(|s| f(k, s)).collect())
        .collect()
}

/// Produces emission `index` for the current inputs. Input, buffer and model
/// kinds are handled by the engine.
pub(crate) fn emit(
    kind: &Kind,
    prepared: &Prepared,
    index: usize,
    rng: &mut ChaCha8Rng,
    inputs: &[Vec<Sample>],
    refs: &[Vec<Sample>],
) -> Result<Vec<Vec<Sample>>> {
    match kind {
        Kind::Split { indices } => inputs
            .iter()
            .map(|list| {
                indices
                    .iter()
                    .map(|&i| match list.get(i) {
                        Some(s) => Ok(s.clone()),
                        None => bail!(Index, "split index {i} on a list of {}", list.len()),
                    })
                    .collect()
            })
            .collect(),
        Kind::Group => Ok(vec![inputs.concat()]),
        Kind::Threshold(p) => map_inputs(inputs, |_, s| Ok(geometry::threshold(s, p))),
        Kind::Flip(p) => {
            let axes = p.flip_probabilities.map(|q| rng.random::<f64>() < q);
            map_inputs(inputs, |_, s| Ok(flip_sample(s, axes)))
        }
        Kind::AffineDeformation(p) => {
            let reference = single_reference(refs, "affine deformation")?;
            let draw = DeformationDraw::sample(p, rng);
            let m = deformation_matrix(&draw, reference)?;
            map_inputs(inputs, |k, s| {
                let interp = p.interpolation.get(k).copied().unwrap_or_default();
                resample(s, &m, interp, p.fill)
            })
        }
        Kind::RandomCrop(p) => {
            let Prepared::Centers(centers) = prepared else {
                bail!(State, "random crop used before preparation");
            };
            let center = match centers {
                Centers::Listed(list) => list[rng.random_range(0..list.len())],
                Centers::Box(shape) => shape.map(|s| rng.random_range(0..s)),
            };
            map_inputs(inputs, |k, s| {
                let size = size_for(&p.sizes, k)?;
                let start = [0, 1, 2].map(|a| center[a] as i64 - (size[a] / 2) as i64);
                Ok(crop_block(s, start, size, p.fill))
            })
        }
        Kind::GridCrop(p) => {
            let Prepared::Tiles(tiles) = prepared else {
                bail!(State, "grid crop used before preparation");
            };
            let first = size_for(&p.sizes, 0)?;
            let tile = tiles[index % tiles.len()];
            let center = [0, 1, 2].map(|a| tile[a] + (first[a] / 2) as i64);
            map_inputs(inputs, |k, s| {
                let size = size_for(&p.sizes, k)?;
                let start = [0, 1, 2].map(|a| center[a] - (size[a] / 2) as i64);
                Ok(crop_block(s, start, size, p.fill))
            })
        }
        Kind::Crop(c) => {
            let target = match c.size {
                Some(size) => size,
                None => single_reference(refs, "crop")?.spatial_shape(),
            };
            map_inputs(inputs, |_, s| center_crop(s, target))
        }
        Kind::Put(p) => {
            let reference = single_reference(refs, "put")?;
            inputs
                .iter()
                .map(|list| Ok(vec![put_samples(reference, list, p.aggregation, p.fill)?]))
                .collect()
        }
        Kind::CatalogInput { .. } | Kind::DirectInput | Kind::Buffer(_) | Kind::Model(_) => {
            bail!(State, "{} is evaluated by the engine", kind.name())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::Affine;
    use ndarray::Array5;
    use rand::SeedableRng;

    fn ramp(shape: [usize; 3]) -> Sample {
        Sample::new(
            Array5::from_shape_fn((1, shape[0], shape[1], shape[2], 1), |(_, i, j, k, _)| {
                (i * 100 + j * 10 + k) as f64
            }),
            None,
        )
        .unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn split_and_group() {
        let (a, b) = (Sample::scalar(1.0), Sample::scalar(2.0));
        let pair = vec![vec![a.clone(), b.clone()]];
        let split = |indices: Vec<usize>| {
            emit(&Kind::Split { indices }, &Prepared::Nothing, 0, &mut rng(), &pair, &[])
        };
        assert_eq!(split(vec![0]).unwrap(), vec![vec![a.clone()]]);
        assert_eq!(split(vec![1, 0]).unwrap(), vec![vec![b.clone(), a.clone()]]);
        assert!(matches!(split(vec![2]), Err(crate::Error::Index(_))));

        let c = Sample::scalar(3.0);
        let grouped = emit(
            &Kind::Group,
            &Prepared::Nothing,
            0,
            &mut rng(),
            &[vec![a.clone(), b.clone()], vec![c.clone()]],
            &[],
        )
        .unwrap();
        assert_eq!(grouped, vec![vec![a, b, c]]);
    }

    #[test]
    fn threshold_examples() {
        let s = Sample::new(
            Array5::from_shape_vec((1, 3, 1, 1, 1), vec![-1.0, 0.0, 2.0]).unwrap(),
            None,
        )
        .unwrap();
        let out = geometry::threshold(&s, &Threshold { lower_threshold: 0.0, upper_threshold: None });
        assert_eq!(out.data().iter().copied().collect::<Vec<_>>(), [0.0, 0.0, 1.0]);
        let s = Sample::new(Array5::from_shape_vec((1, 2, 1, 1, 1), vec![0.5, 2.0]).unwrap(), None).unwrap();
        let out = geometry::threshold(&s, &Threshold { lower_threshold: 0.0, upper_threshold: Some(1.0) });
        assert_eq!(out.data().iter().copied().collect::<Vec<_>>(), [1.0, 0.0]);
    }

    #[test]
    fn random_crop_shares_center_across_sizes() {
        let x = ramp([9, 9, 9]);
        let kind = Kind::RandomCrop(RandomCrop {
            sizes: vec![[5, 5, 5], [3, 3, 3]],
            nonzero: false,
            fill: 0.0,
        });
        let inputs = vec![vec![x.clone()], vec![x.clone()]];
        let (cap, prepared) = prepare(&kind, Multiplicity::Count(4), &inputs, &[]).unwrap();
        assert_eq!(cap, 4);
        let mut r = rng();
        for _ in 0..20 {
            let out = emit(&kind, &prepared, 0, &mut r, &inputs, &[]).unwrap();
            let (big, small) = (&out[0][0], &out[1][0]);
            assert_eq!(big.spatial_shape(), [5; 3]);
            assert_eq!(small.spatial_shape(), [3; 3]);
            let a = big.affine(0);
            let b = small.affine(0);
            assert_eq!(b[(0, 3)] - a[(0, 3)], 1.0);
            assert_eq!(big.data()[[0, 2, 2, 2, 0]], small.data()[[0, 1, 1, 1, 0]]);
        }
    }

    #[test]
    fn random_crop_forced_center() {
        let mut mask = Array5::zeros((1, 6, 6, 6, 1));
        mask[[0, 4, 1, 3, 0]] = 1.0;
        let mask = Sample::new(mask, None).unwrap();
        let x = ramp([6, 6, 6]);
        let kind = Kind::RandomCrop(RandomCrop { sizes: vec![[1, 1, 1]], nonzero: true, fill: 0.0 });
        let inputs = vec![vec![x]];
        let refs = vec![vec![mask]];
        let (_, prepared) = prepare(&kind, Multiplicity::Count(1), &inputs, &refs).unwrap();
        let out = emit(&kind, &prepared, 0, &mut rng(), &inputs, &refs).unwrap();
        assert_eq!(out[0][0].data()[[0, 0, 0, 0, 0]], 413.0);
        assert_eq!(*out[0][0].affine(0), crate::compose_offset(&Affine::identity(), [4, 1, 3]));
    }

    #[test]
    fn random_crop_rejections() {
        let zeros = Sample::new(Array5::zeros((1, 3, 3, 3, 1)), None).unwrap();
        let kind = Kind::RandomCrop(RandomCrop { sizes: vec![[1, 1, 1]], nonzero: true, fill: 0.0 });
        let inputs = vec![vec![zeros.clone()]];
        assert!(matches!(
            prepare(&kind, Multiplicity::Count(1), &inputs, &[vec![zeros.clone()]]),
            Err(crate::Error::Argument(_))
        ));
        let mut shifted = Affine::identity();
        shifted[(0, 3)] = 2.0;
        let moved = Sample::new(Array5::ones((1, 3, 3, 3, 1)), Some(vec![shifted])).unwrap();
        assert!(matches!(
            prepare(&kind, Multiplicity::Count(1), &inputs, &[vec![moved]]),
            Err(crate::Error::Alignment(_))
        ));
        assert!(kind.validate(Multiplicity::Count(1), 0).is_err());
    }

    #[test]
    fn full_size_crop_is_identity() {
        let x = ramp([4, 5, 6]);
        let kind = Kind::RandomCrop(RandomCrop { sizes: vec![[4, 5, 6]], nonzero: false, fill: 0.0 });
        let inputs = vec![vec![x.clone()]];
        let (_, prepared) = prepare(&kind, Multiplicity::Count(1), &inputs, &[]).unwrap();
        // Any center other than the floor-middle voxel shifts the block, so
        // the forced-identity case needs the unique center.
        let mut r = rng();
        let mut hit = false;
        for _ in 0..2000 {
            let out = emit(&kind, &prepared, 0, &mut r, &inputs, &[]).unwrap();
            if *out[0][0].affine(0) == Affine::identity() {
                assert_eq!(out[0][0], x);
                hit = true;
                break;
            }
        }
        assert!(hit);
    }

    #[test]
    fn validation() {
        let grid = Kind::GridCrop(GridCrop { sizes: vec![[2, 2, 2]], overlap: [2, 0, 0], fill: 0.0 });
        assert!(grid.validate(Multiplicity::AllTiles, 0).is_err());
        assert!(Kind::Group.validate(Multiplicity::AllTiles, 0).is_err());
        assert!(Kind::Group.validate(Multiplicity::Count(0), 0).is_err());
        let flip = Kind::Flip(Flip { flip_probabilities: [1.5, 0.0, 0.0] });
        assert!(flip.validate(Multiplicity::Count(1), 0).is_err());
        assert!(Kind::Put(Put::default()).validate(Multiplicity::Count(1), 0).is_err());
    }
}
