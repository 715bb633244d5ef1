//! Von Mises–Fisher fiber-orientation targets on the hemisphere mesh.
//!
//! The network in [`crate::mlp`] is trained to map an ODF sampled on the
//! mesh to the probability of finding a fiber along each mesh direction.
//! That target is modeled as a mixture of von Mises–Fisher (vMF) bumps, one
//! per fiber, weighted by volume fraction.
//!
//! Fibers are axes, not vectors, so the density used everywhere here is the
//! antipodally symmetrized form ρ(d) + ρ(−d) of the ordinary vMF density ρ
//! on the sphere. It is equal at `d` and `−d` exactly and integrates to 1
//! over the hemisphere (equivalently, the underlying vMF integrates to 1
//! over the sphere). With the default concentration κ = 100 the bump's full
//! width at half maximum is ≈ 13.5°.

use alloc::vec::Vec;

use crate::error::Error;
use crate::lobes::Fixel;
use crate::mesh::{local_maxima, HemiMesh, MeshField, DEFAULT_MIN_SEP_DEG, DEFAULT_REL_THRESHOLD};
use crate::sh::Direction;
use crate::simulate::FiberConfig;
use crate::Result;

/// Default vMF concentration for fiber targets.
pub const DEFAULT_KAPPA: f64 = 100.0;

/// Antipodally symmetrized von Mises–Fisher density at `d` for a bump
/// centered on the axis `mean` with concentration `kappa`.
///
/// Writing t = mean·d, the value is
///
/// ```text
/// κ/(4π sinh κ) · (e^{κt} + e^{−κt})
///   = κ/(2π) · (e^{κ(t−1)} + e^{−κ(t+1)}) / (1 − e^{−2κ})
/// ```
///
/// evaluated in the right-hand form, whose exponents are all ≤ 0 so the
/// value never overflows for any κ. At the mean this is κ·coth(κ)/(2π)
/// (≈ 15.9155 for κ = 100); the hemisphere integral is exactly 1.
pub fn vmf_density(d: &Direction, mean: &Direction, kappa: f64) -> f64 {
    let t = mean.dot(d);
    let scale = kappa / (2.0 * core::f64::consts::PI) / (1.0 - libm::exp(-2.0 * kappa));
    scale * (libm::exp(kappa * (t - 1.0)) + libm::exp(-kappa * (t + 1.0)))
}

/// A weighted mixture of symmetrized vMF components sharing one
/// concentration.
#[derive(Clone, Debug)]
pub struct VmfMixture {
    components: Vec<(Direction, f64)>,
    kappa: f64,
}

impl VmfMixture {
    /// Builds a mixture from `(mean, weight)` components.
    ///
    /// Weights must be positive and sum to 1 (within 1e-9); `kappa` must be
    /// positive and finite.
    pub fn new(components: Vec<(Direction, f64)>, kappa: f64) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Empty("vMF mixture needs at least one component"));
        }
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!(
                "concentration {kappa} must be positive and finite"
            )));
        }
        let sum: f64 = components.iter().map(|&(_, w)| w).sum();
        if components.iter().any(|&(_, w)| !(w > 0.0)) || libm::fabs(sum - 1.0) > 1e-9 {
            return Err(Error::InvalidFractions(alloc::format!(
                "mixture weights must be positive and sum to 1, got sum {sum}"
            )));
        }
        Ok(VmfMixture { components, kappa })
    }

    /// The mixture matching a fiber configuration: one component per fiber,
    /// weighted by its volume fraction.
    pub fn from_config(config: &FiberConfig, kappa: f64) -> Result<Self> {
        VmfMixture::new(config.fibers().to_vec(), kappa)
    }

    pub fn components(&self) -> &[(Direction, f64)] {
        &self.components
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Mixture density at `d`: the weighted sum of component densities.
    pub fn density(&self, d: &Direction) -> f64 {
        self.components.iter().map(|(m, w)| w * vmf_density(d, m, self.kappa)).sum()
    }

    /// Samples the mixture density on every mesh pixel.
    pub fn on_mesh(&self, mesh: &HemiMesh) -> MeshDistribution {
        let values = mesh.directions().iter().map(|d| self.density(d)).collect();
        MeshDistribution { field: MeshField::new(values) }
    }
}

/// A probability distribution sampled on the mesh: non-negative amplitudes
/// whose Riemann sum over pixels approximates 1.
#[derive(Clone, Debug)]
pub struct MeshDistribution {
    field: MeshField,
}

impl MeshDistribution {
    /// Wraps a sampled field, validating that every amplitude is finite and
    /// non-negative.
    pub fn new(field: MeshField) -> Result<Self> {
        if field.values().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "distribution amplitudes must be finite and non-negative".into(),
            ));
        }
        Ok(MeshDistribution { field })
    }

    pub fn field(&self) -> &MeshField {
        &self.field
    }

    pub fn values(&self) -> &[f64] {
        self.field.values()
    }

    pub fn len(&self) -> usize {
        self.field.len()
    }

    pub fn is_empty(&self) -> bool {
        self.field.is_empty()
    }

    /// Riemann sum of the distribution over the mesh.
    pub fn integral(&self, mesh: &HemiMesh) -> f64 {
        self.field.integral(mesh)
    }
}

/// The training target for a fiber configuration: a vMF mixture with the
/// default concentration, sampled on the mesh.
pub fn target_distribution(config: &FiberConfig, mesh: &HemiMesh) -> MeshDistribution {
    target_distribution_with_kappa(config, mesh, DEFAULT_KAPPA)
        .expect("valid configuration and default concentration")
}

/// [`target_distribution`] with an explicit concentration.
pub fn target_distribution_with_kappa(
    config: &FiberConfig,
    mesh: &HemiMesh,
    kappa: f64,
) -> Result<MeshDistribution> {
    Ok(VmfMixture::from_config(config, kappa)?.on_mesh(mesh))
}

/// Converts a predicted distribution to fixels: one per detected peak, with
/// weights the peak amplitudes normalized to sum to 1 (the last weight is
/// the exact complement of the others, so the sum is exactly 1). Fixels
/// arrive strongest first. No peaks — for instance, a constant field —
/// yields an empty list.
pub fn distribution_to_fixels(dist: &MeshDistribution, mesh: &HemiMesh) -> Result<Vec<Fixel>> {
    let peaks =
        local_maxima(mesh, &dist.field, DEFAULT_REL_THRESHOLD, DEFAULT_MIN_SEP_DEG)?;
    let total: f64 = peaks.iter().map(|p| p.amplitude).sum();
    if peaks.is_empty() || total <= 0.0 {
        return Ok(Vec::new());
    }
    let mut fixels: Vec<Fixel> = peaks
        .iter()
        .map(|p| Fixel { direction: p.direction.canonical(), weight: p.amplitude / total })
        .collect();
    let partial: f64 = fixels[..fixels.len() - 1].iter().map(|f| f.weight).sum();
    if let Some(last) = fixels.last_mut() {
        last.weight = (1.0 - partial).max(0.0);
    }
    Ok(fixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::NET_MESH_PIXELS;

    const KAPPA: f64 = 100.0;

    fn mesh() -> HemiMesh {
        HemiMesh::build(NET_MESH_PIXELS).unwrap()
    }

    #[test]
    fn density_is_symmetric_and_positive() {
        let mean = Direction::from_angles(0.7, 1.3);
        for &(theta, phi) in
            &[(0.0, 0.0), (0.4, 2.0), (1.2, -1.0), (1.57, 0.3), (2.8, 4.0)]
        {
            let d = Direction::from_angles(theta, phi);
            let v = vmf_density(&d, &mean, KAPPA);
            assert!(v > 0.0, "density must be positive, got {v}");
            assert_eq!(v, vmf_density(&d.antipode(), &mean, KAPPA));
        }
    }

    #[test]
    fn at_mean_value_matches_closed_form() {
        // κ/(4π sinh κ)·(e^κ + e^{−κ}) = κ coth(κ)/(2π); at κ = 100 the
        // coth factor is 1 to machine precision.
        let mean = Direction::from_angles(1.1, 0.4);
        let v = vmf_density(&mean, &mean, KAPPA);
        let expected = KAPPA / (2.0 * core::f64::consts::PI);
        assert!((v - expected).abs() < 1e-9, "at-mean {v} vs {expected}");
        assert!((v - 15.9155).abs() < 1e-3);
    }

    #[test]
    fn hemisphere_integral_is_one_by_quadrature() {
        // Independent oracle: the density is zonal about its mean, so the
        // hemisphere integral reduces to ∫ f(θ)·2π sinθ dθ over [0, π/2]
        // with the mean at the pole. Composite Simpson on a fine grid.
        let mean = Direction::from_angles(0.0, 0.0);
        let n = 4000usize;
        let h = core::f64::consts::FRAC_PI_2 / n as f64;
        let f = |theta: f64| {
            let d = Direction::from_angles(theta, 0.0);
            vmf_density(&d, &mean, KAPPA) * core::f64::consts::TAU * libm::sin(theta)
        };
        let mut acc = f(0.0) + f(core::f64::consts::FRAC_PI_2);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(i as f64 * h);
        }
        let integral = acc * h / 3.0;
        assert!((integral - 1.0).abs() < 1e-6, "hemisphere integral {integral}");
    }

    #[test]
    fn full_width_at_half_maximum_is_near_13_5_degrees() {
        // The polar profile is strictly decreasing on [0, π/2]; bisect for
        // the half-maximum angle.
        let mean = Direction::from_angles(0.0, 0.0);
        let peak = vmf_density(&mean, &mean, KAPPA);
        let value = |theta: f64| {
            vmf_density(&Direction::from_angles(theta, 0.0), &mean, KAPPA)
        };
        let (mut lo, mut hi) = (0.0f64, core::f64::consts::FRAC_PI_2);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if value(mid) > 0.5 * peak {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let fwhm = (lo + hi).to_degrees();
        assert!((13.0..=14.0).contains(&fwhm), "FWHM {fwhm}°");
        assert!((fwhm - 13.5).abs() < 0.1, "FWHM {fwhm}° should be ≈ 13.5°");
    }

    #[test]
    fn mixture_validates_inputs() {
        let d = Direction::from_angles(0.3, 0.0);
        assert!(matches!(VmfMixture::new(alloc::vec![], KAPPA), Err(Error::Empty(_))));
        assert!(VmfMixture::new(alloc::vec![(d, 1.0)], 0.0).is_err());
        assert!(VmfMixture::new(alloc::vec![(d, 1.0)], f64::NAN).is_err());
        assert!(VmfMixture::new(alloc::vec![(d, 0.7)], KAPPA).is_err());
        assert!(VmfMixture::new(alloc::vec![(d, 0.5), (d, -0.5)], KAPPA).is_err());
        assert!(VmfMixture::new(alloc::vec![(d, 0.25), (d, 0.75)], KAPPA).is_ok());
    }

    #[test]
    fn single_fiber_target_peaks_at_the_fiber() {
        let mesh = mesh();
        let fiber = Direction::from_angles(0.9, 2.2);
        let cfg = FiberConfig::new(alloc::vec![(fiber, 1.0)]).unwrap();
        let dist = target_distribution(&cfg, &mesh);
        let argmax = dist
            .values()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        // The best pixel center sits within about one pixel radius of the
        // fiber (384 pixels over the hemisphere → ~4.5° nominal radius).
        let off = mesh.direction(argmax).axial_angle_to(&fiber).to_degrees();
        assert!(off < 6.5, "argmax pixel {off}° from the fiber");
    }

    #[test]
    fn equal_orthogonal_pair_has_equal_peaks() {
        let mesh = mesh();
        let a = Direction::new(1.0, 0.0, 0.0).unwrap();
        let b = Direction::new(0.0, 1.0, 0.0).unwrap();
        let cfg = FiberConfig::new(alloc::vec![(a, 0.5), (b, 0.5)]).unwrap();
        let mix = VmfMixture::from_config(&cfg, KAPPA).unwrap();
        // Exactly equal at the two means by symmetry of the mixture.
        assert!((mix.density(&a) - mix.density(&b)).abs() < 1e-12);
        // And equal at the two detected mesh peaks: a 90° rotation about z
        // maps this mesh onto itself, swapping the lobes.
        let dist = mix.on_mesh(&mesh);
        let peaks = local_maxima(&mesh, dist.field(), 0.1, 15.0).unwrap();
        assert_eq!(peaks.len(), 2);
        assert!((peaks[0].amplitude - peaks[1].amplitude).abs() < 1e-6);
    }

    #[test]
    fn target_integral_is_one_on_the_mesh() {
        let mesh = mesh();
        for (k, &(t1, p1, t2, p2, w)) in [
            (0.3f64, 0.0f64, 1.2f64, 1.0f64, 0.5f64),
            (0.9, 2.0, 1.5, -0.7, 0.35),
            (1.4, 4.0, 0.2, 0.0, 0.8),
        ]
        .iter()
        .enumerate()
        {
            let cfg = FiberConfig::new(alloc::vec![
                (Direction::from_angles(t1, p1), w),
                (Direction::from_angles(t2, p2), 1.0 - w),
            ])
            .unwrap();
            let dist = target_distribution(&cfg, &mesh);
            let integral = dist.integral(&mesh);
            assert!(
                (integral - 1.0).abs() < 0.02,
                "case {k}: mesh integral {integral}"
            );
        }
    }

    #[test]
    fn fixels_recover_mixture_weights_and_directions() {
        let mesh = mesh();
        let a = Direction::from_angles(0.5, 0.5);
        let (t1, t2) = a.tangent_basis();
        let _ = t2;
        let (s, c) = core::f64::consts::FRAC_PI_2.sin_cos();
        let b = Direction::new(
            a.x() * c + t1[0] * s,
            a.y() * c + t1[1] * s,
            a.z() * c + t1[2] * s,
        )
        .unwrap();
        let cfg = FiberConfig::new(alloc::vec![(a, 0.7), (b, 0.3)]).unwrap();
        let dist = target_distribution(&cfg, &mesh);
        let fixels = distribution_to_fixels(&dist, &mesh).unwrap();
        assert_eq!(fixels.len(), 2);
        assert!((fixels[0].weight - 0.7).abs() < 0.05);
        assert!((fixels[1].weight - 0.3).abs() < 0.05);
        assert!(fixels[0].direction.axial_angle_to(&a).to_degrees() < 8.0);
        assert!(fixels[1].direction.axial_angle_to(&b).to_degrees() < 8.0);
    }

    #[test]
    fn single_component_yields_one_unit_fixel() {
        let mesh = mesh();
        let cfg =
            FiberConfig::new(alloc::vec![(Direction::from_angles(1.0, 3.0), 1.0)]).unwrap();
        let dist = target_distribution(&cfg, &mesh);
        let fixels = distribution_to_fixels(&dist, &mesh).unwrap();
        assert_eq!(fixels.len(), 1);
        assert_eq!(fixels[0].weight, 1.0);
    }

    #[test]
    fn close_components_merge_into_one_fixel() {
        // 10° separation is below the resolving power of a κ = 100 bump
        // (FWHM ≈ 13.5°), so the mixture has a single ridge peak.
        let mesh = mesh();
        let a = Direction::from_angles(1.0, 0.0);
        let b = Direction::from_angles(1.0 + 10f64.to_radians(), 0.0);
        let cfg = FiberConfig::new(alloc::vec![(a, 0.5), (b, 0.5)]).unwrap();
        let dist = target_distribution(&cfg, &mesh);
        let fixels = distribution_to_fixels(&dist, &mesh).unwrap();
        assert_eq!(fixels.len(), 1, "expected a merged fixel");
    }

    #[test]
    fn fixel_weights_sum_exactly_to_one() {
        let mesh = mesh();
        let cfg = FiberConfig::new(alloc::vec![
            (Direction::from_angles(0.2, 0.0), 0.4),
            (Direction::from_angles(1.3, 2.0), 0.35),
            (Direction::from_angles(1.5, 4.5), 0.25),
        ])
        .unwrap();
        let dist = target_distribution(&cfg, &mesh);
        let fixels = distribution_to_fixels(&dist, &mesh).unwrap();
        assert_eq!(fixels.len(), 3);
        let sum: f64 = fixels.iter().map(|f| f.weight).sum();
        assert_eq!(sum, 1.0);
    }

    #[test]
    fn constant_field_yields_no_fixels() {
        let mesh = mesh();
        let dist =
            MeshDistribution::new(MeshField::new(alloc::vec![0.5; mesh.n_pixels()])).unwrap();
        assert!(distribution_to_fixels(&dist, &mesh).unwrap().is_empty());
    }

    #[test]
    fn distribution_rejects_negative_amplitudes() {
        let mut v = alloc::vec![0.1; 8];
        v[3] = -0.2;
        assert!(MeshDistribution::new(MeshField::new(v)).is_err());
    }
}
