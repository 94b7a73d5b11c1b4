//! Fusion of a feature pyramid into one tensor at the resolution of its
//! deepest level.

use std::fmt;
use std::str::FromStr;

use maprotonet_tensor::{avg_pool3d, concat, max_pool3d, Conv3dSpec, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::{conv, init_conv};
use crate::params::{ParamStore, Session};

/// How shallow levels are brought to the deepest resolution and combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionVariant {
    /// Strided convolution to the deep channel count, then concatenation.
    A,
    /// Strided convolution to the deep channel count, then addition.
    B,
    /// Max-pool and average-pool pair, then concatenation.
    #[default]
    C,
    /// Pool pair, 1³ projection to the deep channel count, then addition.
    D,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [FusionVariant::A, FusionVariant::B, FusionVariant::C, FusionVariant::D];

    pub fn is_concat(self) -> bool {
        matches!(self, FusionVariant::A | FusionVariant::C)
    }

    pub fn uses_pooling(self) -> bool {
        matches!(self, FusionVariant::C | FusionVariant::D)
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FusionVariant::A => "a",
            FusionVariant::B => "b",
            FusionVariant::C => "c",
            FusionVariant::D => "d",
        };
        f.write_str(s)
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(FusionVariant::A),
            "b" => Ok(FusionVariant::B),
            "c" => Ok(FusionVariant::C),
            "d" => Ok(FusionVariant::D),
            other => Err(Error::Config(format!(
                "unknown fusion variant {other:?}; expected a, b, c or d"
            ))),
        }
    }
}

/// Integer down-sampling factor from `shallow` to `deep` spatial extents.
/// The factor must be the same on every axis and divide it exactly.
pub fn level_factor(shallow: &[usize], deep: &[usize]) -> Result<usize> {
    if shallow.len() != 3 || deep.len() != 3 {
        return Err(shape_err!("expected three spatial extents"));
    }
    let mut factor = None;
    for (&s, &d) in shallow.iter().zip(deep) {
        if d == 0 || s % d != 0 {
            return Err(shape_err!(
                "extents {shallow:?} are not an integer multiple of {deep:?}"
            ));
        }
        let f = s / d;
        if *factor.get_or_insert(f) != f {
            return Err(shape_err!("extents {shallow:?} and {deep:?} have unequal ratios"));
        }
    }
    Ok(factor.unwrap())
}

/// Max-pool and average-pool with window = stride = `factor`, stacked on channels.
pub fn pool_pair<'g>(h: Var<'g>, factor: usize) -> Var<'g> {
    concat(&[max_pool3d(h, factor, factor, 0), avg_pool3d(h, factor)], 1)
}

fn spatial(v: &Var<'_>) -> Vec<usize> {
    v.shape()[2..].to_vec()
}

/// Multi-scale fusion module for a fixed pyramid geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiScale {
    pub name: String,
    pub variant: FusionVariant,
    /// Channels of every level, shallowest first.
    pub level_channels: Vec<usize>,
    /// Down-sampling factor of every level except the deepest.
    pub factors: Vec<usize>,
}

impl MultiScale {
    pub fn new(
        name: impl Into<String>,
        variant: FusionVariant,
        level_channels: Vec<usize>,
        factors: Vec<usize>,
    ) -> Result<Self> {
        if level_channels.is_empty() {
            return Err(Error::Config("a feature pyramid needs at least one level".into()));
        }
        if factors.len() + 1 != level_channels.len() {
            return Err(Error::Config(format!(
                "{} levels need {} factors, got {}",
                level_channels.len(),
                level_channels.len() - 1,
                factors.len()
            )));
        }
        if factors.contains(&0) {
            return Err(Error::Config("down-sampling factors must be positive".into()));
        }
        Ok(Self {
            name: name.into(),
            variant,
            level_channels,
            factors,
        })
    }

    pub fn n_scale(&self) -> usize {
        self.level_channels.len()
    }

    fn deep_channels(&self) -> usize {
        *self.level_channels.last().unwrap()
    }

    /// Channels of level `s` after down-sampling.
    pub fn downsampled_channels(&self, s: usize) -> usize {
        match self.variant {
            FusionVariant::C => 2 * self.level_channels[s],
            _ => self.deep_channels(),
        }
    }

    /// Channels of the fused tensor.
    pub fn out_channels(&self) -> usize {
        let deep = self.deep_channels();
        if self.variant.is_concat() {
            deep + (0..self.n_scale() - 1)
                .map(|s| self.downsampled_channels(s))
                .sum::<usize>()
        } else {
            deep
        }
    }

    fn conv_name(&self, s: usize) -> String {
        format!("{}.level{s}.conv", self.name)
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let deep = self.deep_channels();
        for s in 0..self.n_scale() - 1 {
            let f = self.factors[s];
            match self.variant {
                FusionVariant::A | FusionVariant::B => init_conv(
                    store,
                    rng,
                    &self.conv_name(s),
                    deep,
                    self.level_channels[s],
                    2 * f - 1,
                    true,
                ),
                FusionVariant::D => init_conv(
                    store,
                    rng,
                    &self.conv_name(s),
                    deep,
                    2 * self.level_channels[s],
                    1,
                    true,
                ),
                FusionVariant::C => {}
            }
        }
    }

    /// Brings level `s` to the deepest resolution.
    pub fn downsample<'a>(&self, sess: &Session<'a>, s: usize, h: Var<'a>, factor: usize) -> Result<Var<'a>> {
        let ext = spatial(&h);
        if ext.iter().any(|&n| n % factor != 0) {
            return Err(shape_err!("factor {factor} does not divide extents {ext:?}"));
        }
        if h.shape()[1] != self.level_channels[s] {
            return Err(shape_err!(
                "level {s} has {} channels, expected {}",
                h.shape()[1],
                self.level_channels[s]
            ));
        }
        let needs_params = !matches!(self.variant, FusionVariant::C);
        if needs_params && factor != self.factors[s] {
            return Err(shape_err!(
                "level {s} needs factor {} for its parameters, pyramid gives {factor}",
                self.factors[s]
            ));
        }
        let out = match self.variant {
            FusionVariant::A | FusionVariant::B => {
                // kernel 2f-1 with padding f-1 yields exactly n/f outputs
                conv(sess, &self.conv_name(s), h, Conv3dSpec::new(factor, factor - 1))
            }
            FusionVariant::C => pool_pair(h, factor),
            FusionVariant::D => conv(sess, &self.conv_name(s), pool_pair(h, factor), Conv3dSpec::default()),
        };
        if !self.variant.is_concat() && out.shape()[1] != self.deep_channels() {
            return Err(shape_err!("projected level {s} does not match the deep channel count"));
        }
        Ok(out)
    }

    /// Fuses `levels` (shallowest first); a single level is returned unchanged.
    pub fn fuse<'a>(&self, sess: &Session<'a>, levels: &[Var<'a>]) -> Result<Var<'a>> {
        if levels.is_empty() {
            return Err(shape_err!("cannot fuse an empty pyramid"));
        }
        if levels.len() != self.n_scale() {
            return Err(shape_err!("expected {} levels, got {}", self.n_scale(), levels.len()));
        }
        let deep = *levels.last().unwrap();
        if levels.len() == 1 {
            return Ok(deep);
        }
        let deep_ext = spatial(&deep);
        let mut parts = Vec::with_capacity(levels.len());
        for (s, &h) in levels[..levels.len() - 1].iter().enumerate() {
            let factor = level_factor(&spatial(&h), &deep_ext)?;
            parts.push(self.downsample(sess, s, h, factor)?);
        }
        Ok(if self.variant.is_concat() {
            parts.push(deep);
            concat(&parts, 1)
        } else {
            parts.into_iter().fold(deep, |acc, p| acc.add(p))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use maprotonet_tensor::{Array, Graph};
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
    }

    fn build(variant: FusionVariant) -> (MultiScale, ParamStore) {
        let ms = MultiScale::new("ms", variant, vec![4, 6], vec![2]).unwrap();
        let mut store = ParamStore::new();
        ms.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        (ms, store)
    }

    #[test]
    fn factors_come_from_extent_ratios() {
        assert_eq!(level_factor(&[8, 8, 6], &[4, 4, 3]).unwrap(), 2);
        assert_eq!(level_factor(&[4, 4, 3], &[4, 4, 3]).unwrap(), 1);
        assert!(level_factor(&[8, 8, 6], &[4, 4, 2]).is_err());
        assert!(level_factor(&[8, 7, 6], &[4, 4, 3]).is_err());
    }

    #[test]
    fn every_variant_lands_on_the_deep_grid() {
        for variant in FusionVariant::ALL {
            let (ms, store) = build(variant);
            let g = Graph::new();
            let sess = Session::eval(&g, &store);
            let a = g.constant(random(&[2, 4, 8, 8, 6], 1));
            let b = g.constant(random(&[2, 6, 4, 4, 3], 2));
            let out = ms.fuse(&sess, &[a, b]).unwrap();
            assert_eq!(out.shape(), vec![2, ms.out_channels(), 4, 4, 3], "variant {variant}");
        }
    }

    #[test]
    fn mismatched_factor_is_rejected_for_parametric_variants() {
        let (ms, store) = build(FusionVariant::B);
        let g = Graph::new();
        let sess = Session::eval(&g, &store);
        let a = g.constant(random(&[1, 4, 12, 12, 9], 1));
        let b = g.constant(random(&[1, 6, 4, 4, 3], 2));
        assert!(ms.fuse(&sess, &[a, b]).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in FusionVariant::ALL {
            assert_eq!(v.to_string().parse::<FusionVariant>().unwrap(), v);
        }
        assert!("e".parse::<FusionVariant>().is_err());
    }
}
