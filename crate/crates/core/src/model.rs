//! Black-box models that can sit inside a pipeline as a node.
//!
//! A model only has to describe its spatial contract: the output shapes it
//! produces for given input shapes and where each output sits inside the
//! first input's voxel grid. The default placement is unit scale, centered
//! with a floor offset.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;

use ndarray::{s, Array3, Array5, ArrayView5};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::sample::{compose_offset, Affine};

pub trait Model: Send + Sync + Debug {
    /// Registry key used to decode serialized weights.
    fn kind(&self) -> &str;

    fn num_outputs(&self) -> usize;

    /// Declared output shapes for the given input shapes.
    fn output_shapes(&self, inputs: &[[usize; 5]]) -> Result<Vec<[usize; 5]>>;

    /// Maps output voxel indices into the first input's voxel grid.
    fn output_to_input(&self, _output: usize, input: [usize; 3], output: [usize; 3]) -> Affine {
        centered_map(input, output)
    }

    fn predict(&self, inputs: &[ArrayView5<'_, f64>]) -> Result<Vec<Array5<f64>>>;

    /// Serialized weights and configuration.
    fn to_bytes(&self) -> Vec<u8>;
}

/// Unit-scale map placing an `output`-sized block at the floor-centered
/// position inside `input`.
pub fn centered_map(input: [usize; 3], output: [usize; 3]) -> Affine {
    let offset = [0, 1, 2].map(|a| (input[a] as i64 - output[a] as i64).div_euclid(2));
    compose_offset(&Affine::identity(), offset)
}

/// Hex-encoded sha256 of a model's serialized form.
pub fn model_hash(model: &dyn Model) -> String {
    hex(&Sha256::digest(model.to_bytes()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

type Decoder = fn(&[u8]) -> Result<Arc<dyn Model>>;

/// Decoders for serialized models, keyed by [`Model::kind`].
#[derive(Clone)]
pub struct ModelRegistry {
    decoders: BTreeMap<String, Decoder>,
}

impl Debug for ModelRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_set().entries(self.decoders.keys()).finish()
    }
}

impl Default for ModelRegistry {
    fn default() -> Self {
        ModelRegistry::with_builtins()
    }
}

impl ModelRegistry {
    pub fn empty() -> Self {
        ModelRegistry {
            decoders: BTreeMap::new(),
        }
    }

    /// Registry knowing [`IdentityModel`] and [`BoxMeanModel`].
    pub fn with_builtins() -> Self {
        let mut r = ModelRegistry::empty();
        r.register(IdentityModel::KIND, IdentityModel::decode);
        r.register(BoxMeanModel::KIND, BoxMeanModel::decode);
        r
    }

    pub fn register(&mut self, kind: &str, decoder: Decoder) {
        self.decoders.insert(kind.to_owned(), decoder);
    }

    pub fn decode(&self, kind: &str, bytes: &[u8]) -> Result<Arc<dyn Model>> {
        match self.decoders.get(kind) {
            Some(decode) => decode(bytes),
            None => bail!(Lookup, "no decoder registered for model kind {kind:?}"),
        }
    }
}

fn decode_json<T: for<'de> Deserialize<'de>>(kind: &str, bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("{kind} model: {e}")))
}

/// Returns its inputs unchanged.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityModel {}

impl IdentityModel {
    pub const KIND: &'static str = "identity";

    fn decode(bytes: &[u8]) -> Result<Arc<dyn Model>> {
        Ok(Arc::new(decode_json::<IdentityModel>(Self::KIND, bytes)?))
    }
}

impl Model for IdentityModel {
    fn kind(&self) -> &str {
        Self::KIND
    }

    fn num_outputs(&self) -> usize {
        1
    }

    fn output_shapes(&self, inputs: &[[usize; 5]]) -> Result<Vec<[usize; 5]>> {
        match inputs.first() {
            Some(s) => Ok(vec![*s]),
            None => bail!(Argument, "identity model needs one input"),
        }
    }

    fn predict(&self, inputs: &[ArrayView5<'_, f64>]) -> Result<Vec<Array5<f64>>> {
        Ok(vec![inputs[0].to_owned()])
    }

    fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("plain struct serializes")
    }
}

/// Unpadded mean over a cubic `kernel`³ window of the first input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxMeanModel {
    pub kernel: usize,
}

impl BoxMeanModel {
    pub const KIND: &'static str = "box_mean";

    pub fn new(kernel: usize) -> Result<Self> {
        if kernel == 0 {
            bail!(Argument, "box mean kernel must be positive");
        }
        Ok(BoxMeanModel { kernel })
    }

    fn decode(bytes: &[u8]) -> Result<Arc<dyn Model>> {
        let m: BoxMeanModel = decode_json(Self::KIND, bytes)?;
        Ok(Arc::new(BoxMeanModel::new(m.kernel)?))
    }
}

impl Model for BoxMeanModel {
    fn kind(&self) -> &str {
        Self::KIND
    }

    fn num_outputs(&self) -> usize {
        1
    }

    fn output_shapes(&self, inputs: &[[usize; 5]]) -> Result<Vec<[usize; 5]>> {
        let Some(s) = inputs.first() else {
            bail!(Argument, "box mean model needs one input");
        };
        let mut out = *s;
        for axis in 1..4 {
            if s[axis] < self.kernel {
                bail!(
                    Shape,
                    "spatial size {} is smaller than the {} kernel",
                    s[axis],
                    self.kernel
                );
            }
            out[axis] = s[axis] - self.kernel + 1;
        }
        Ok(vec![out])
    }

    fn predict(&self, inputs: &[ArrayView5<'_, f64>]) -> Result<Vec<Array5<f64>>> {
        let x = &inputs[0];
        let [b, s0, s1, s2, f] = self.output_shapes(&[shape5(x)])?[0];
        let k = self.kernel;
        let norm = (k * k * k) as f64;
        let mut out = Array5::zeros((b, s0, s1, s2, f));
        let dims = x.shape();
        for bi in 0..b {
            for fi in 0..f {
                // Summed-volume table with a zero border.
                let mut table = Array3::<f64>::zeros((dims[1] + 1, dims[2] + 1, dims[3] + 1));
                for i in 0..dims[1] {
                    for j in 0..dims[2] {
                        for l in 0..dims[3] {
                            table[[i + 1, j + 1, l + 1]] = x[[bi, i, j, l, fi]]
                                + table[[i, j + 1, l + 1]]
                                + table[[i + 1, j, l + 1]]
                                + table[[i + 1, j + 1, l]]
                                - table[[i, j, l + 1]]
                                - table[[i, j + 1, l]]
                                - table[[i + 1, j, l]]
                                + table[[i, j, l]];
                        }
                    }
                }
                let mut view = out.slice_mut(s![bi, .., .., .., fi]);
                for ((i, j, l), v) in view.indexed_iter_mut() {
                    let (i1, j1, l1) = (i + k, j + k, l + k);
                    let sum = table[[i1, j1, l1]]
                        - table[[i, j1, l1]]
                        - table[[i1, j, l1]]
                        - table[[i1, j1, l]]
                        + table[[i, j, l1]]
                        + table[[i, j1, l]]
                        + table[[i1, j, l]]
                        - table[[i, j, l]];
                    *v = sum / norm;
                }
            }
        }
        Ok(vec![out])
    }

    fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("plain struct serializes")
    }
}

pub(crate) fn shape5(x: &ArrayView5<'_, f64>) -> [usize; 5] {
    let s = x.shape();
    [s[0], s[1], s[2], s[3], s[4]]
}
