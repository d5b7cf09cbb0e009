//! Shape and receptive-field arithmetic for multi-pathway encoder-decoder
//! networks. No layers are built; only sizes are tracked.
//!
//! Pathway `p` runs at an absolute subsampling factor per axis. Data goes
//! down through pathways `0..P`, running each pathway's down-stage
//! convolutions, then back up through `P-1..=0`: each pathway above the
//! bottom upsamples the deeper result, merges it with its own down-stage
//! output (center-cropped to match) and runs its up-stage convolutions.
//!
//! ```
//! use voxflow::netshape::ArchConfig;
//!
//! let cfg = ArchConfig::from_toml(r#"
//! subsample_factors_per_pathway = [[1, 1, 1], [3, 3, 3]]
//! kernel_sizes_per_pathway = [
//!     [[[3, 3, 3], [3, 3, 3]], [[3, 3, 3], [3, 3, 3]]],
//!     [[[3, 3, 3], [3, 3, 3]], [[3, 3, 3], [3, 3, 3]]],
//! ]
//! number_features_per_pathway = [[[30, 30], [30, 30]], [[60, 60], [60, 30]]]
//! output_size = [53, 53, 53]
//! padding = "valid"
//! "#).unwrap();
//! assert_eq!(cfg.output_size([85; 3]).unwrap(), [53; 3]);
//! assert_eq!(cfg.receptive_field(), [33; 3]);
//! ```

use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

pub const NO_NEW_NET_PRESET: &str = include_str!("../presets/no_new_net.toml");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Valid,
    Same,
}

type Stages<T> = (Vec<T>, Vec<T>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub number_input_features: Option<usize>,
    /// Absolute factor per pathway; the first is usually `[1, 1, 1]`.
    pub subsample_factors_per_pathway: Vec<[usize; 3]>,
    /// (down-stage kernels, up-stage kernels) per pathway.
    pub kernel_sizes_per_pathway: Vec<Stages<[usize; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub number_features_per_pathway: Option<Vec<Stages<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_size: Option<[usize; 3]>,
    #[serde(default)]
    pub padding: Padding,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_normalization: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_normalization: Option<bool>,
}

/// One axis of a config.
struct AxisPlan {
    /// Ratio to the previous pathway; 1 for pathway 0.
    ratio: Vec<usize>,
    down: Vec<Vec<usize>>,
    up: Vec<Vec<usize>>,
}

impl ArchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ArchConfig =
            toml::from_str(text).map_err(|e| Error::Format(format!("architecture config: {e}")))?;
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ArchConfig::from_toml(&text)
    }

    pub fn no_new_net() -> Self {
        ArchConfig::from_toml(NO_NEW_NET_PRESET).expect("bundled preset is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let factors = &self.subsample_factors_per_pathway;
        if factors.is_empty() {
            bail!(Argument, "at least one pathway is required");
        }
        if factors.len() != self.kernel_sizes_per_pathway.len() {
            bail!(
                Argument,
                "{} subsample factors for {} kernel pathways",
                factors.len(),
                self.kernel_sizes_per_pathway.len()
            );
        }
        for (p, f) in factors.iter().enumerate() {
            for a in 0..3 {
                if f[a] == 0 {
                    bail!(Argument, "pathway {p} has a zero subsample factor");
                }
                if p > 0 && f[a] % factors[p - 1][a] != 0 {
                    bail!(
                        Argument,
                        "pathway {p} factor {} is not a multiple of {}",
                        f[a],
                        factors[p - 1][a]
                    );
                }
            }
        }
        for (p, (down, up)) in self.kernel_sizes_per_pathway.iter().enumerate() {
            if let Some(k) = down.iter().chain(up).flatten().find(|k| *k % 2 == 0) {
                bail!(Argument, "pathway {p} has an even kernel size {k}");
            }
        }
        if let Some(features) = &self.number_features_per_pathway {
            let fits = features.len() == self.kernel_sizes_per_pathway.len()
                && features
                    .iter()
                    .zip(&self.kernel_sizes_per_pathway)
                    .all(|(f, k)| f.0.len() == k.0.len() && f.1.len() == k.1.len());
            if !fits {
                bail!(Argument, "feature counts do not match the kernel layout");
            }
        }
        Ok(())
    }

    fn axis(&self, a: usize) -> AxisPlan {
        let f = &self.subsample_factors_per_pathway;
        AxisPlan {
            ratio: (0..f.len())
                .map(|p| if p == 0 { f[0][a] } else { f[p][a] / f[p - 1][a] })
                .collect(),
            down: self.kernel_sizes_per_pathway.iter().map(|s| s.0.iter().map(|k| k[a]).collect()).collect(),
            up: self.kernel_sizes_per_pathway.iter().map(|s| s.1.iter().map(|k| k[a]).collect()).collect(),
        }
    }

    /// Receptive field per axis in input voxels.
    pub fn receptive_field(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let plan = self.axis(a);
            let mut jump = 1;
            let mut rf = 1;
            let mut jumps = Vec::new();
            for p in 0..plan.ratio.len() {
                if p > 0 {
                    jump *= plan.ratio[p];
                }
                jumps.push(jump);
                rf += plan.down[p].iter().map(|k| (k - 1) * jump).sum::<usize>();
            }
            for p in (0..plan.ratio.len()).rev() {
                rf += plan.up[p].iter().map(|k| (k - 1) * jumps[p]).sum::<usize>();
            }
            rf
        })
    }

    fn axis_output(&self, a: usize, input: usize) -> Result<usize> {
        let plan = self.axis(a);
        let valid = self.padding == Padding::Valid;
        let conv = |size: usize, kernels: &[usize], stage: &str| -> Result<usize> {
            let mut s = size;
            for k in kernels {
                if valid {
                    if s < *k {
                        bail!(
                            Admissibility,
                            "axis {a}: size {s} is smaller than kernel {k} in {stage}"
                        );
                    }
                    s -= k - 1;
                }
            }
            Ok(s)
        };
        if input == 0 {
            bail!(Admissibility, "axis {a}: input size must be positive");
        }
        let mut size = input;
        let mut skips = Vec::new();
        for p in 0..plan.ratio.len() {
            if p > 0 {
                let r = plan.ratio[p];
                if size % r != 0 {
                    bail!(
                        Admissibility,
                        "axis {a}: size {size} entering pathway {p} is not divisible by {r}"
                    );
                }
                size /= r;
            }
            size = conv(size, &plan.down[p], &format!("pathway {p} down stage"))?;
            skips.push(size);
        }
        let bottom = plan.ratio.len() - 1;
        for p in (0..=bottom).rev() {
            if p < bottom {
                size *= plan.ratio[p + 1];
                if skips[p] < size {
                    bail!(
                        Admissibility,
                        "axis {a}: skip of size {} cannot be cropped to {size} in pathway {p}",
                        skips[p]
                    );
                }
            }
            size = conv(size, &plan.up[p], &format!("pathway {p} up stage"))?;
        }
        Ok(size)
    }

    /// Output patch size for an input patch size.
    pub fn output_size(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        Ok([
            self.axis_output(0, input[0])?,
            self.axis_output(1, input[1])?,
            self.axis_output(2, input[2])?,
        ])
    }

    /// Every admissible input size along `axis` in `range`, with its output.
    pub fn admissible_sizes(&self, axis: usize, range: RangeInclusive<usize>) -> Vec<(usize, usize)> {
        if axis > 2 || self.validate().is_err() {
            return Vec::new();
        }
        range
            .filter_map(|i| self.axis_output(axis, i).ok().map(|o| (i, o)))
            .collect()
    }

    /// Smallest input size per axis whose output is exactly `output`.
    pub fn input_size_for(&self, output: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let rf = self.receptive_field();
        let mut out = [0; 3];
        for a in 0..3 {
            let scale = self.subsample_factors_per_pathway.iter().map(|f| f[a]).max().unwrap_or(1);
            let limit = output[a] + rf[a] + 2 * scale;
            match (1..=limit).find(|i| self.axis_output(a, *i).ok() == Some(output[a])) {
                Some(i) => out[a] = i,
                None => bail!(Admissibility, "axis {a}: no input size produces output {}", output[a]),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(down: &[usize], up: &[usize], padding: Padding) -> ArchConfig {
        ArchConfig {
            number_input_features: None,
            subsample_factors_per_pathway: vec![[1; 3]],
            kernel_sizes_per_pathway: vec![(down.iter().map(|k| [*k; 3]).collect(), up.iter().map(|k| [*k; 3]).collect())],
            number_features_per_pathway: None,
            output_size: None,
            padding,
            instance_normalization: None,
            batch_normalization: None,
        }
    }

    #[test]
    fn default_preset() {
        let cfg = ArchConfig::no_new_net();
        assert_eq!(cfg.receptive_field(), [185; 3]);
        assert_eq!(cfg.output_size([128; 3]).unwrap(), [128; 3]);
        assert!(matches!(cfg.output_size([120, 128, 128]), Err(Error::Admissibility(_))));
    }

    #[test]
    fn trivial_configs() {
        let none = single(&[], &[], Padding::Valid);
        assert_eq!(none.output_size([7, 1, 30]).unwrap(), [7, 1, 30]);
        assert_eq!(none.receptive_field(), [1; 3]);
        assert!(none.admissible_sizes(1, 1..=20).iter().all(|(i, o)| i == o));
        assert_eq!(single(&[3], &[], Padding::Valid).receptive_field(), [3; 3]);
        assert!(single(&[3], &[], Padding::Valid).output_size([2; 3]).is_err());
    }

    #[test]
    fn hand_composed_field() {
        let mut cfg = single(&[3, 3], &[], Padding::Valid);
        cfg.subsample_factors_per_pathway.push([2; 3]);
        cfg.kernel_sizes_per_pathway.push((vec![[3; 3], [3; 3]], vec![]));
        assert_eq!(cfg.receptive_field(), [13; 3]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = single(&[4], &[], Padding::Valid);
        assert!(matches!(cfg.validate(), Err(Error::Argument(_))));
        cfg.kernel_sizes_per_pathway[0].0[0] = [3; 3];
        cfg.subsample_factors_per_pathway.push([2; 3]);
        assert!(cfg.validate().is_err());
        assert!(ArchConfig::from_toml("padding = \"valid\"").is_err());
        assert!(ArchConfig::from_toml(&NO_NEW_NET_PRESET.replace("padding", "pading")).is_err());
    }
}
