//! Ground-truth ODF simulation: random fiber configurations with Dirichlet
//! volume fractions, composed into multi-fiber ODFs by coefficient addition.
//!
//! Randomness is fully deterministic: every sample of a dataset or training
//! stream draws from its own ChaCha12 generator, keyed by the master seed
//! with the sample index as the stream number. That splitting rule makes
//! datasets reproducible, order-stable under resizing, and safe to generate
//! in parallel.

use alloc::vec;
use alloc::vec::Vec;

use rand::distributions::Distribution;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Beta, Gamma};

use crate::sh::{delta_sh, Direction, ShVector};
use crate::{Error, Result};

/// Concentration of the symmetric Dirichlet used for volume fractions.
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Validation-set sizes: two-fiber and three-fiber sample counts.
pub const DEFAULT_N_TWO: usize = 250;
pub const DEFAULT_N_THREE: usize = 80;

/// A ground-truth fiber population: 1-3 axes with volume fractions on the
/// unit simplex.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FiberConfig {
    fibers: Vec<(Direction, f64)>,
}

impl FiberConfig {
    /// Validates fiber count, fraction positivity, and the simplex sum, and
    /// canonicalizes every direction to the reference hemisphere.
    pub fn new(fibers: Vec<(Direction, f64)>) -> Result<Self> {
        if fibers.is_empty() || fibers.len() > 3 {
            return Err(Error::InvalidArgument(alloc::format!(
                "fiber count {} outside 1..=3",
                fibers.len()
            )));
        }
        let mut sum = 0.0;
        for &(_, v) in &fibers {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidFractions(alloc::format!(
                    "fraction {v} outside (0, 1]"
                )));
            }
            sum += v;
        }
        if libm::fabs(sum - 1.0) > 1e-12 {
            return Err(Error::InvalidFractions(alloc::format!(
                "fractions sum to {sum}, not 1"
            )));
        }
        Ok(FiberConfig {
            fibers: fibers.into_iter().map(|(d, v)| (d.canonical(), v)).collect(),
        })
    }

    pub fn fibers(&self) -> &[(Direction, f64)] {
        &self.fibers
    }

    pub fn count(&self) -> usize {
        self.fibers.len()
    }

    pub fn directions(&self) -> impl Iterator<Item = &Direction> {
        self.fibers.iter().map(|(d, _)| d)
    }

    pub fn fractions(&self) -> impl Iterator<Item = f64> + '_ {
        self.fibers.iter().map(|&(_, v)| v)
    }
}

/// A simulated voxel: the generating configuration, the total ODF, and the
/// scaled single-fiber components it is the coefficient-wise sum of.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OdfSample {
    pub config: FiberConfig,
    pub total: ShVector,
    pub components: Vec<ShVector>,
}

/// Draws a direction uniform on the sphere, canonicalized to the reference
/// hemisphere (valid because fibers are axial).
pub fn sample_uniform_direction<R: Rng + ?Sized>(rng: &mut R) -> Direction {
    loop {
        let z: f64 = rng.gen_range(-1.0..=1.0);
        let phi: f64 = rng.gen_range(0.0..core::f64::consts::TAU);
        let st = libm::sqrt((1.0 - z * z).max(0.0));
        if let Ok(d) = Direction::new(st * libm::cos(phi), st * libm::sin(phi), z) {
            return d.canonical();
        }
    }
}

/// Draws `count` volume fractions from a symmetric Dirichlet(alpha).
///
/// Two fractions use the equivalent Beta(alpha, alpha) on (v, 1-v); more use
/// normalized Gamma(alpha) draws. Every returned fraction lies in (0, 1) and
/// the sum is exactly 1 (the last fraction is the complement of the rest).
pub fn sample_volume_fractions<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    alpha: f64,
) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::InvalidArgument("fraction count must be >= 1".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "Dirichlet concentration {alpha} must be > 0"
        )));
    }
    if count == 1 {
        return Ok(vec![1.0]);
    }
    if count == 2 {
        let beta = Beta::new(alpha, alpha)
            .map_err(|e| Error::InvalidArgument(alloc::format!("beta setup: {e}")))?;
        loop {
            let v = beta.sample(rng);
            if v > 0.0 && v < 1.0 {
                return Ok(vec![v, 1.0 - v]);
            }
        }
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::InvalidArgument(alloc::format!("gamma setup: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..count).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            continue;
        }
        let mut fracs: Vec<f64> = draws[..count - 1].iter().map(|g| g / total).collect();
        let mut last = 1.0;
        for &f in &fracs {
            last -= f;
        }
        fracs.push(last);
        if fracs.iter().all(|&f| f > 0.0 && f < 1.0) {
            return Ok(fracs);
        }
    }
}

/// Draws a full configuration: uniform directions, Dirichlet fractions.
pub fn sample_config<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    alpha: f64,
) -> Result<FiberConfig> {
    if count > 3 {
        return Err(Error::InvalidArgument(alloc::format!("fiber count {count} outside 1..=3")));
    }
    let fractions = sample_volume_fractions(rng, count, alpha)?;
    let fibers = fractions
        .into_iter()
        .map(|v| (sample_uniform_direction(rng), v))
        .collect();
    FiberConfig::new(fibers)
}

/// Builds the ODF for a configuration: each component is the fiber's
/// fraction times a unit single-fiber ODF; the total is their sum.
pub fn compose_multifiber(config: &FiberConfig, lmax: usize) -> Result<OdfSample> {
    let mut total = ShVector::zeros(lmax)?;
    let mut components = Vec::with_capacity(config.count());
    for &(d, v) in config.fibers() {
        let mut c = delta_sh(&d, lmax)?;
        c.scale(v);
        total.add_scaled(&c, 1.0)?;
        components.push(c);
    }
    Ok(OdfSample { config: config.clone(), total, components })
}

/// Per-sample generator for the documented seed-splitting rule.
fn sample_rng(master_seed: u64, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// Generates a reproducible validation dataset: `n_two` two-fiber samples
/// followed by `n_three` three-fiber samples.
///
/// Sample `k` depends only on `(seed, k)`, so shrinking or growing the
/// dataset preserves the common prefix.
pub fn generate_dataset(
    seed: u64,
    n_two: usize,
    n_three: usize,
    lmax: usize,
) -> Result<Vec<OdfSample>> {
    let mut out = Vec::with_capacity(n_two + n_three);
    for k in 0..n_two + n_three {
        let mut rng = sample_rng(seed, k as u64);
        let count = if k < n_two { 2 } else { 3 };
        let config = sample_config(&mut rng, count, DEFAULT_ALPHA)?;
        out.push(compose_multifiber(&config, lmax)?);
    }
    Ok(out)
}

/// Infinite training stream of simulated voxels.
///
/// Each drawn sample mixes fiber counts: an even split between two- and
/// three-fiber voxels by default; enabling `include_single` adds one-fiber
/// voxels at an equal share (count uniform over {1, 2, 3}).
#[derive(Clone, Debug)]
pub struct TrainingStream {
    seed: u64,
    lmax: usize,
    include_single: bool,
    next: u64,
}

impl TrainingStream {
    pub fn new(seed: u64, lmax: usize, include_single: bool) -> Self {
        TrainingStream { seed, lmax, include_single, next: 0 }
    }

    /// The sample at stream position `index` (independent of iteration
    /// state; the iterator is a convenience view of this).
    pub fn sample_at(&self, index: u64) -> Result<OdfSample> {
        let mut rng = sample_rng(self.seed, index);
        let count = if self.include_single {
            rng.gen_range(1..=3)
        } else {
            rng.gen_range(2..=3)
        };
        let config = sample_config(&mut rng, count, DEFAULT_ALPHA)?;
        compose_multifiber(&config, self.lmax)
    }
}

impl Iterator for TrainingStream {
    type Item = OdfSample;

    fn next(&mut self) -> Option<OdfSample> {
        let s = self.sample_at(self.next).ok()?;
        self.next += 1;
        Some(s)
    }
}
