//! Evaluation of separated fibers against ground truth: angular correlation
//! coefficient (ACC), optimal fiber matching, angular error, volume-fraction
//! RMSE, and robust summary statistics.

use alloc::string::String;
use alloc::vec::Vec;

use crate::sh::{block, Direction, ShVector};
use crate::simulate::FiberConfig;
use crate::{Error, Result};

/// A separated fiber as every separator reports it: peak axis, volume
/// fraction, and the single-fiber ODF itself.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FiberEstimate {
    pub direction: Direction,
    pub fraction: f64,
    pub odf: ShVector,
}

/// Angular correlation coefficient between two functions on the sphere.
///
/// The normalized inner product of the anisotropic (l >= 2) coefficients:
/// the l = 0 mean is excluded, so the result is invariant to positive
/// scaling of either argument. A function with no anisotropic energy has no
/// defined correlation and is reported as an error, not 0.
pub fn acc(u: &ShVector, v: &ShVector) -> Result<f64> {
    if u.lmax() != v.lmax() {
        return Err(Error::LengthMismatch { expected: u.coeffs().len(), got: v.coeffs().len() });
    }
    let start = block(2).0;
    let uu = &u.coeffs()[start..];
    let vv = &v.coeffs()[start..];
    let dot: f64 = uu.iter().zip(vv).map(|(a, b)| a * b).sum();
    let nu: f64 = libm::sqrt(uu.iter().map(|a| a * a).sum());
    let nv: f64 = libm::sqrt(vv.iter().map(|a| a * a).sum());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Undefined("ACC of a function with zero anisotropic energy"));
    }
    Ok(dot / (nu * nv))
}

/// Angle between fiber axes in degrees, antipodally folded to [0, 90].
pub fn angular_error(d_est: &Direction, d_true: &Direction) -> f64 {
    d_est.axial_angle_to(d_true).to_degrees()
}

/// Result of matching estimated fibers to ground-truth fibers.
#[derive(Clone, Debug, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Assignment {
    /// Matched (estimated index, truth index) pairs, in truth order.
    pub pairs: Vec<(usize, usize)>,
    /// ACC of each matched pair, parallel to `pairs`.
    pub pair_acc: Vec<f64>,
    /// Truth fibers left without a partner.
    pub missed_truth: Vec<usize>,
    /// Estimated fibers left without a partner.
    pub extra_estimated: Vec<usize>,
    /// Sum of matched ACCs (the maximized objective).
    pub total_acc: f64,
}

/// Pairwise ACC with undefined correlations scored as the worst value, so a
/// degenerate (isotropic) candidate is never preferred.
fn acc_or_worst(u: &ShVector, v: &ShVector) -> f64 {
    acc(u, v).unwrap_or(-1.0)
}

/// Finds the one-to-one partial assignment of estimated to truth fibers
/// maximizing total ACC, exhaustively over all injections of the smaller
/// list into the larger. Fiber counts are tiny (<= a handful), so the
/// factorial search is exact and cheap. An empty estimated list yields an
/// assignment where every truth fiber is missed.
pub fn match_fibers(estimated: &[ShVector], truth: &[ShVector]) -> Assignment {
    let ne = estimated.len();
    let nt = truth.len();
    let mut score = Vec::with_capacity(ne * nt);
    for e in estimated {
        for t in truth {
            score.push(acc_or_worst(e, t));
        }
    }
    let score = |ei: usize, ti: usize| score[ei * nt + ti];

    // Exhaustive search over injections of the smaller side.
    let k = ne.min(nt);
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    let mut chosen: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut used_e = alloc::vec![false; ne];
    let mut used_t = alloc::vec![false; nt];

    fn recurse(
        depth: usize,
        k: usize,
        ne: usize,
        nt: usize,
        score: &dyn Fn(usize, usize) -> f64,
        chosen: &mut Vec<(usize, usize)>,
        used_e: &mut [bool],
        used_t: &mut [bool],
        best: &mut Option<(f64, Vec<(usize, usize)>)>,
    ) {
        if depth == k {
            let total: f64 = chosen.iter().map(|&(e, t)| score(e, t)).sum();
            if best.as_ref().map_or(true, |(b, _)| total > *b) {
                *best = Some((total, chosen.clone()));
            }
            return;
        }
        // Pair the first unused fiber on the smaller side with every
        // remaining candidate on the larger side.
        if ne <= nt {
            let e = (0..ne).find(|&i| !used_e[i]).expect("unused estimated fiber");
            used_e[e] = true;
            for t in 0..nt {
                if used_t[t] {
                    continue;
                }
                used_t[t] = true;
                chosen.push((e, t));
                recurse(depth + 1, k, ne, nt, score, chosen, used_e, used_t, best);
                chosen.pop();
                used_t[t] = false;
            }
            used_e[e] = false;
        } else {
            let t = (0..nt).find(|&i| !used_t[i]).expect("unused truth fiber");
            used_t[t] = true;
            for e in 0..ne {
                if used_e[e] {
                    continue;
                }
                used_e[e] = true;
                chosen.push((e, t));
                recurse(depth + 1, k, ne, nt, score, chosen, used_e, used_t, best);
                chosen.pop();
                used_e[e] = false;
            }
            used_t[t] = false;
        }
    }

    recurse(0, k, ne, nt, &score, &mut chosen, &mut used_e, &mut used_t, &mut best);

    let (total_acc, mut pairs) = best.unwrap_or((0.0, Vec::new()));
    pairs.sort_unstable_by_key(|&(_, t)| t);
    let pair_acc: Vec<f64> = pairs.iter().map(|&(e, t)| score(e, t)).collect();
    let missed_truth: Vec<usize> =
        (0..nt).filter(|t| !pairs.iter().any(|&(_, pt)| pt == *t)).collect();
    let extra_estimated: Vec<usize> =
        (0..ne).filter(|e| !pairs.iter().any(|&(pe, _)| pe == *e)).collect();
    Assignment { pairs, pair_acc, missed_truth, extra_estimated, total_acc }
}

/// Volume-fraction RMSE under an assignment.
///
/// Matched pairs contribute their fraction difference; a missed truth fiber
/// contributes its full fraction, and an unmatched estimated fiber likewise
/// contributes its full fraction (spurious mass is an error too).
pub fn vf_error(est: &[f64], truth: &[f64], assignment: &Assignment) -> f64 {
    let mut sq = 0.0;
    let mut n = 0usize;
    for &(e, t) in &assignment.pairs {
        let d = est[e] - truth[t];
        sq += d * d;
        n += 1;
    }
    for &t in &assignment.missed_truth {
        sq += truth[t] * truth[t];
        n += 1;
    }
    for &e in &assignment.extra_estimated {
        sq += est[e] * est[e];
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    libm::sqrt(sq / n as f64)
}

/// Median and interquartile range with linear-interpolation quantiles.
pub fn summarize(values: &[f64]) -> Result<(f64, f64)> {
    Ok((quantile(values, 0.5)?, quantile(values, 0.75)? - quantile(values, 0.25)?))
}

/// Linear-interpolation quantile (the common "type 7" definition:
/// h = (n-1)p, interpolate between the flanking order statistics).
pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile of an empty list"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(alloc::format!("quantile level {p} outside [0, 1]")));
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Per-voxel evaluation of one separation result.
#[derive(Clone, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalRecord {
    pub method: String,
    /// ACC of each matched fiber pair (misses excluded).
    pub fiber_acc: Vec<f64>,
    /// Angular error per truth fiber, degrees; a missed fiber scores the
    /// worst case, 90.
    pub angular_error_deg: Vec<f64>,
    pub vf_rmse: f64,
    pub wall_ms: f64,
    /// Ground-truth metadata for sensitivity analysis.
    pub fiber_count: usize,
    pub min_separation_deg: Option<f64>,
    pub min_fraction: f64,
}

/// Scores a separator's output against the generating configuration.
///
/// `truth_components` are the scaled single-fiber ODFs of `truth`, in fiber
/// order (as produced by the simulator).
pub fn evaluate(
    method: &str,
    estimated: &[FiberEstimate],
    truth: &FiberConfig,
    truth_components: &[ShVector],
    wall_ms: f64,
) -> Result<EvalRecord> {
    if truth_components.len() != truth.count() {
        return Err(Error::LengthMismatch {
            expected: truth.count(),
            got: truth_components.len(),
        });
    }
    let est_odfs: Vec<ShVector> = estimated.iter().map(|f| f.odf.clone()).collect();
    let assignment = match_fibers(&est_odfs, truth_components);

    let mut angular = alloc::vec![90.0f64; truth.count()];
    for &(e, t) in &assignment.pairs {
        angular[t] = angular_error(&estimated[e].direction, &truth.fibers()[t].0);
    }

    let est_fracs: Vec<f64> = estimated.iter().map(|f| f.fraction).collect();
    let true_fracs: Vec<f64> = truth.fractions().collect();
    let vf_rmse = vf_error(&est_fracs, &true_fracs, &assignment);

    let dirs: Vec<&Direction> = truth.directions().collect();
    let mut min_sep: Option<f64> = None;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            let a = angular_error(dirs[i], dirs[j]);
            min_sep = Some(min_sep.map_or(a, |m: f64| m.min(a)));
        }
    }
    let min_fraction = true_fracs.iter().cloned().fold(f64::INFINITY, f64::min);

    Ok(EvalRecord {
        method: method.into(),
        fiber_acc: assignment.pair_acc.clone(),
        angular_error_deg: angular,
        vf_rmse,
        wall_ms,
        fiber_count: truth.count(),
        min_separation_deg: min_sep,
        min_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sh::{delta_sh, n_coeffs, rotate_sh, RotationFrame};
    use crate::simulate::{compose_multifiber, generate_dataset};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_sh(rng: &mut StdRng, lmax: usize) -> ShVector {
        let c: Vec<f64> = (0..n_coeffs(lmax)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ShVector::from_coeffs(lmax, c).unwrap()
    }

    /// Independent oracle: the correlation of two sphere functions with
    /// their means removed, computed by brute-force quadrature
    /// (Simpson in theta x trapezoid in phi), must equal the coefficient
    /// formula by Parseval's theorem.
    fn oracle_acc(u: &ShVector, v: &ShVector) -> f64 {
        let nt = 401;
        let np = 128;
        let mean = |s: &ShVector| s.coeffs()[0] * (4.0 * core::f64::consts::PI).sqrt()
            / (4.0 * core::f64::consts::PI);
        let mu = mean(u);
        let mv = mean(v);
        let mut iuv = 0.0;
        let mut iuu = 0.0;
        let mut ivv = 0.0;
        for it in 0..nt {
            let theta = core::f64::consts::PI * it as f64 / (nt - 1) as f64;
            let wt = if it == 0 || it == nt - 1 {
                1.0
            } else if it % 2 == 1 {
                4.0
            } else {
                2.0
            };
            for ip in 0..np {
                let phi = core::f64::consts::TAU * ip as f64 / np as f64;
                let d = Direction::from_angles(theta, phi);
                let a = u.eval(&d) - mu;
                let b = v.eval(&d) - mv;
                let w = wt * theta.sin();
                iuv += w * a * b;
                iuu += w * a * a;
                ivv += w * b * b;
            }
        }
        iuv / (iuu * ivv).sqrt()
    }

    #[test]
    fn acc_matches_spherical_correlation_oracle() {
        let mut rng = StdRng::seed_from_u64(101);
        for _ in 0..3 {
            let u = random_sh(&mut rng, 6);
            let v = random_sh(&mut rng, 6);
            let got = acc(&u, &v).unwrap();
            let want = oracle_acc(&u, &v);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn acc_identity_scale_and_symmetry() {
        let mut rng = StdRng::seed_from_u64(102);
        let u = random_sh(&mut rng, 6);
        let v = random_sh(&mut rng, 6);
        assert!((acc(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        let mut scaled = u.clone();
        scaled.scale(7.5);
        assert!((acc(&u, &scaled).unwrap() - 1.0).abs() < 1e-12);
        assert!((acc(&u, &v).unwrap() - acc(&v, &u).unwrap()).abs() < 1e-14);
        assert!(acc(&u, &v).unwrap().abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn acc_orthogonal_blocks_and_errors() {
        // Pure l=2 against pure l=4: orthogonal, correlation 0.
        let mut a = ShVector::zeros(6).unwrap();
        a.set(2, 1, 1.0);
        let mut b = ShVector::zeros(6).unwrap();
        b.set(4, -2, 1.0);
        assert_eq!(acc(&a, &b).unwrap(), 0.0);

        // Isotropic input: undefined, not zero.
        let mut iso = ShVector::zeros(6).unwrap();
        iso.set(0, 0, 1.0);
        assert!(matches!(acc(&iso, &a), Err(Error::Undefined(_))));
        // Band-limit mismatch is a length error.
        let c8 = ShVector::zeros(8).unwrap();
        assert!(matches!(acc(&a, &c8), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn acc_is_rotation_invariant() {
        let mut rng = StdRng::seed_from_u64(103);
        let u = random_sh(&mut rng, 6);
        let v = random_sh(&mut rng, 6);
        let frame = RotationFrame::from_angles(0.8, 2.1);
        let ru = rotate_sh(&u, &frame);
        let rv = rotate_sh(&v, &frame);
        let before = acc(&u, &v).unwrap();
        let after = acc(&ru, &rv).unwrap();
        assert!((before - after).abs() < 1e-10, "{before} vs {after}");
    }

    #[test]
    fn angular_error_examples() {
        let z = Direction::Z;
        let x = Direction::X;
        assert_eq!(angular_error(&z, &z), 0.0);
        assert!(angular_error(&z.antipode(), &z) < 1e-6);
        assert!((angular_error(&z, &x) - 90.0).abs() < 1e-10);
        let mut rng = StdRng::seed_from_u64(104);
        for _ in 0..200 {
            let a = crate::simulate::sample_uniform_direction(&mut rng);
            let b = crate::simulate::sample_uniform_direction(&mut rng);
            let c = crate::simulate::sample_uniform_direction(&mut rng);
            let ab = angular_error(&a, &b);
            assert!((0.0..=90.0 + 1e-12).contains(&ab));
            // Axial angles form a metric on the projective plane.
            assert!(angular_error(&a, &c) <= ab + angular_error(&b, &c) + 1e-9);
        }
    }

    #[test]
    fn matching_recovers_permutations() {
        let data = generate_dataset(55, 0, 5, 6).unwrap();
        for s in &data {
            // Present the truth components in reversed order as "estimates".
            let mut est = s.components.clone();
            est.reverse();
            let a = match_fibers(&est, &s.components);
            assert_eq!(a.pairs.len(), 3);
            assert!(a.missed_truth.is_empty() && a.extra_estimated.is_empty());
            for (&(e, t), &pa) in a.pairs.iter().zip(&a.pair_acc) {
                assert_eq!(e, 2 - t, "reversal not recovered");
                assert!((pa - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matching_handles_misses_and_extras() {
        let s = generate_dataset(56, 1, 0, 6).unwrap().remove(0);
        // One estimate against two truth fibers: one match, one miss.
        let est = alloc::vec![s.components[0].clone()];
        let a = match_fibers(&est, &s.components);
        assert_eq!(a.pairs, alloc::vec![(0, 0)]);
        assert_eq!(a.missed_truth, alloc::vec![1]);
        assert!(a.extra_estimated.is_empty());

        // Two estimates against one truth fiber: one match, one extra.
        let b = match_fibers(&s.components, &est);
        assert_eq!(b.pairs, alloc::vec![(0, 0)]);
        assert_eq!(b.extra_estimated, alloc::vec![1]);
        // Total score is symmetric under swapping the lists.
        assert!((a.total_acc - b.total_acc).abs() < 1e-12);

        // Empty estimated list: everything missed.
        let e = match_fibers(&[], &s.components);
        assert!(e.pairs.is_empty());
        assert_eq!(e.missed_truth, alloc::vec![0, 1]);
    }

    #[test]
    fn matching_is_optimal_by_exhaustive_oracle() {
        // Independent check: enumerate all 6 bijections of 3x3 by hand.
        let mut rng = StdRng::seed_from_u64(105);
        for _ in 0..20 {
            let est: Vec<ShVector> = (0..3).map(|_| random_sh(&mut rng, 6)).collect();
            let truth: Vec<ShVector> = (0..3).map(|_| random_sh(&mut rng, 6)).collect();
            let got = match_fibers(&est, &truth).total_acc;
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let best = perms
                .iter()
                .map(|p| {
                    (0..3)
                        .map(|t| acc(&est[p[t]], &truth[t]).unwrap())
                        .sum::<f64>()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((got - best).abs() < 1e-12, "{got} vs {best}");
        }
    }

    #[test]
    fn vf_error_examples() {
        // Perfect estimate.
        let perfect = Assignment {
            pairs: alloc::vec![(0, 0), (1, 1)],
            pair_acc: alloc::vec![1.0, 1.0],
            missed_truth: alloc::vec![],
            extra_estimated: alloc::vec![],
            total_acc: 2.0,
        };
        assert_eq!(vf_error(&[0.4, 0.6], &[0.4, 0.6], &perfect), 0.0);
        // (0.5 vs 0.6), (0.5 vs 0.4): sqrt((0.01 + 0.01) / 2) = 0.1.
        let e = vf_error(&[0.5, 0.5], &[0.6, 0.4], &perfect);
        assert!((e - 0.1).abs() < 1e-12);
        // One estimate carrying all mass vs an even split: the miss counts.
        let with_miss = Assignment {
            pairs: alloc::vec![(0, 0)],
            pair_acc: alloc::vec![1.0],
            missed_truth: alloc::vec![1],
            extra_estimated: alloc::vec![],
            total_acc: 1.0,
        };
        let e = vf_error(&[1.0], &[0.5, 0.5], &with_miss);
        assert!((e - 0.5).abs() < 1e-12);
    }

    #[test]
    fn summarize_quantiles() {
        assert_eq!(summarize(&[1.0, 2.0, 3.0]).unwrap(), (2.0, 1.0));
        assert_eq!(summarize(&[5.0, 5.0, 5.0, 5.0]).unwrap(), (5.0, 0.0));
        // Interpolated case: quartiles of (1, 2, 3, 4) are 1.75 and 3.25.
        let (m, iqr) = summarize(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert!((m - 2.5).abs() < 1e-12);
        assert!((iqr - 1.5).abs() < 1e-12);
        assert!(summarize(&[]).is_err());
        assert!(quantile(&[1.0], 1.5).is_err());
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 1.0).unwrap(), 3.0);
    }

    #[test]
    fn evaluate_perfect_and_degraded() {
        let s = generate_dataset(57, 1, 0, 6).unwrap().remove(0);
        let perfect: Vec<FiberEstimate> = s
            .config
            .fibers()
            .iter()
            .zip(&s.components)
            .map(|(&(d, v), c)| FiberEstimate { direction: d, fraction: v, odf: c.clone() })
            .collect();
        let rec = evaluate("test", &perfect, &s.config, &s.components, 1.25).unwrap();
        assert_eq!(rec.fiber_acc.len(), 2);
        assert!(rec.fiber_acc.iter().all(|&a| (a - 1.0).abs() < 1e-12));
        assert!(rec.angular_error_deg.iter().all(|&a| a < 1e-9));
        assert!(rec.vf_rmse < 1e-15);
        assert_eq!(rec.fiber_count, 2);
        assert_eq!(rec.wall_ms, 1.25);
        let sep = rec.min_separation_deg.unwrap();
        let truth_sep = angular_error(&s.config.fibers()[0].0, &s.config.fibers()[1].0);
        assert!((sep - truth_sep).abs() < 1e-12);

        // Dropping one fiber: one 90-degree angular entry, shorter ACC list.
        let partial = &perfect[..1];
        let rec = evaluate("test", partial, &s.config, &s.components, 0.0).unwrap();
        assert_eq!(rec.fiber_acc.len(), 1);
        assert_eq!(rec.angular_error_deg.iter().filter(|&&a| a == 90.0).count(), 1);
        assert!(rec.vf_rmse > 0.0);
    }

    #[test]
    fn evaluate_single_fiber_metadata() {
        let cfg = FiberConfig::new(alloc::vec![(Direction::Z, 1.0)]).unwrap();
        let s = compose_multifiber(&cfg, 6).unwrap();
        let est = alloc::vec![FiberEstimate {
            direction: Direction::Z,
            fraction: 1.0,
            odf: s.components[0].clone(),
        }];
        let rec = evaluate("test", &est, &cfg, &s.components, 0.0).unwrap();
        assert_eq!(rec.min_separation_deg, None);
        assert_eq!(rec.min_fraction, 1.0);
        let delta = delta_sh(&Direction::Z, 6).unwrap();
        assert!((acc(&s.components[0], &delta).unwrap() - 1.0).abs() < 1e-12);
    }
}
