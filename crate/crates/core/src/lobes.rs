//! Watershed lobe segmentation and fixel extraction: the fod2fixel-style
//! baseline separator and the initializer for the constrained optimizer.
//!
//! Segmentation is a discrete watershed by descending amplitude: each
//! positive pixel, visited from highest to lowest (ties by index), founds a
//! new lobe when no neighbor is assigned yet, joins the single neighboring
//! lobe when there is one, and otherwise joins the lobe of its
//! largest-amplitude assigned neighbor. Every local maximum therefore founds
//! its own lobe; band-limited ODFs carry small sidelobe lobes that callers
//! filter with a relative peak threshold.

use alloc::vec::Vec;

use crate::mesh::{sample_to_mesh, HemiMesh, MeshField};
use crate::metrics::FiberEstimate;
use crate::sh::{delta_sh, Direction, RotationFrame, ShVector};
use crate::{Error, Result};

/// Default relative peak threshold for dropping sidelobe fixels; also the
/// optimizer-initialization magnitude threshold.
pub const DEFAULT_PEAK_THRESHOLD: f64 = 0.2;
/// Default angular merge radius (degrees) for optimizer initialization.
pub const DEFAULT_MERGE_DEG: f64 = 35.0;

/// One watershed lobe: its member pixels (in assignment order, i.e.
/// descending amplitude), their amplitudes, and the founding peak pixel.
#[derive(Clone, Debug)]
pub struct Lobe {
    pub members: Vec<usize>,
    pub amplitudes: Vec<f64>,
    pub peak: usize,
}

impl Lobe {
    /// Amplitude at the founding peak (the lobe's maximum).
    pub fn peak_amplitude(&self) -> f64 {
        self.amplitudes[0]
    }

    /// Solid-angle integral of the lobe: sum of amplitudes times pixel area.
    pub fn integral(&self, mesh: &HemiMesh) -> f64 {
        self.amplitudes.iter().sum::<f64>() * mesh.pixel_area()
    }
}

/// A fixel: one fiber population's mean axis and apparent-density weight.
#[derive(Clone, Copy, Debug)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Fixel {
    pub direction: Direction,
    pub weight: f64,
}

/// Watershed segmentation of a sampled field into lobes.
///
/// Pixels with amplitude <= 0 stay unassigned; a field that is nowhere
/// positive yields no lobes. Lobes are returned in founding order, which is
/// descending peak amplitude.
pub fn segment_field(field: &MeshField, mesh: &HemiMesh) -> Result<Vec<Lobe>> {
    let v = field.values();
    if v.len() != mesh.n_pixels() {
        return Err(Error::LengthMismatch { expected: mesh.n_pixels(), got: v.len() });
    }
    let mut order: Vec<usize> = (0..v.len()).filter(|&p| v[p] > 0.0).collect();
    order.sort_unstable_by(|&a, &b| v[b].partial_cmp(&v[a]).expect("finite").then(a.cmp(&b)));

    const UNASSIGNED: usize = usize::MAX;
    let mut label = alloc::vec![UNASSIGNED; v.len()];
    let mut lobes: Vec<Lobe> = Vec::new();
    for &p in &order {
        // Find the best-assigned neighbor and whether several lobes touch.
        let mut best: Option<usize> = None; // neighbor pixel
        for &q in mesh.neighbors(p) {
            if label[q] == UNASSIGNED {
                continue;
            }
            best = Some(match best {
                None => q,
                Some(b) => {
                    // Larger amplitude wins; ties go to the lower index.
                    if v[q] > v[b] || (v[q] == v[b] && q < b) {
                        q
                    } else {
                        b
                    }
                }
            });
        }
        let lobe = match best {
            None => {
                lobes.push(Lobe {
                    members: Vec::new(),
                    amplitudes: Vec::new(),
                    peak: p,
                });
                lobes.len() - 1
            }
            Some(b) => label[b],
        };
        label[p] = lobe;
        lobes[lobe].members.push(p);
        lobes[lobe].amplitudes.push(v[p]);
    }
    Ok(lobes)
}

/// Samples an ODF on the dense mesh and segments it into lobes.
pub fn segment_lobes(s: &ShVector, dense_mesh: &HemiMesh) -> Vec<Lobe> {
    let field = sample_to_mesh(s, dense_mesh);
    segment_field(&field, dense_mesh).expect("field length matches mesh by construction")
}

/// Converts lobes to fixels: the amplitude-weighted mean member direction
/// (each member folded to the peak's hemisphere before averaging) and the
/// lobe integral as weight. Sorted by descending weight.
pub fn lobes_to_fixels(lobes: &[Lobe], mesh: &HemiMesh) -> Vec<Fixel> {
    let mut fixels: Vec<Fixel> = lobes
        .iter()
        .map(|l| {
            let pd = mesh.direction(l.peak);
            let mut sum = [0.0f64; 3];
            for (&m, &a) in l.members.iter().zip(&l.amplitudes) {
                let d = mesh.direction(m);
                let sign = if d.dot(pd) < 0.0 { -1.0 } else { 1.0 };
                let w = a * sign;
                sum[0] += w * d.x();
                sum[1] += w * d.y();
                sum[2] += w * d.z();
            }
            let direction = Direction::new(sum[0], sum[1], sum[2])
                .map(|d| d.canonical())
                .unwrap_or(*pd);
            Fixel { direction, weight: l.integral(mesh) }
        })
        .collect();
    fixels.sort_by(|a, b| b.weight.partial_cmp(&a.weight).expect("finite weights"));
    fixels
}

/// Turns fixels into single-fiber ODFs: each is its (optionally normalized)
/// weight times a unit delta along its axis. With `normalize`, weights are
/// divided by their sum so the results carry volume fractions.
pub fn fixels_to_sh(fixels: &[Fixel], lmax: usize, normalize: bool) -> Result<Vec<ShVector>> {
    if fixels.is_empty() {
        return Err(Error::Empty("fixel list"));
    }
    let total: f64 = fixels.iter().map(|f| f.weight).sum();
    if normalize && !(total > 0.0) {
        return Err(Error::InvalidArgument("fixel weights sum to zero".into()));
    }
    fixels
        .iter()
        .map(|f| {
            let mut s = delta_sh(&f.direction, lmax)?;
            s.scale(if normalize { f.weight / total } else { f.weight });
            Ok(s)
        })
        .collect()
}

/// The fod2fixel-style baseline separator: watershed segmentation, a
/// relative peak threshold to drop band-limit sidelobe lobes, fixel
/// extraction, and normalized single-fiber reconstruction.
pub fn watershed_separate(
    s: &ShVector,
    dense_mesh: &HemiMesh,
    lmax: usize,
    rel_peak_threshold: f64,
) -> Result<Vec<FiberEstimate>> {
    let field = sample_to_mesh(s, dense_mesh);
    watershed_separate_field(&field, dense_mesh, lmax, rel_peak_threshold)
}

/// [`watershed_separate`] on an already-sampled field, for callers that
/// amortize the basis evaluation over many voxels (for example via a
/// precomputed [`crate::mesh::BasisTable`]).
pub fn watershed_separate_field(
    field: &MeshField,
    dense_mesh: &HemiMesh,
    lmax: usize,
    rel_peak_threshold: f64,
) -> Result<Vec<FiberEstimate>> {
    let lobes = segment_field(field, dense_mesh)?;
    if lobes.is_empty() {
        return Ok(Vec::new());
    }
    let max_peak = lobes[0].peak_amplitude();
    let kept: Vec<Lobe> = lobes
        .into_iter()
        .filter(|l| l.peak_amplitude() >= rel_peak_threshold * max_peak)
        .collect();
    let fixels = lobes_to_fixels(&kept, dense_mesh);
    let odfs = fixels_to_sh(&fixels, lmax, true)?;
    let total: f64 = fixels.iter().map(|f| f.weight).sum();
    Ok(fixels
        .iter()
        .zip(odfs)
        .map(|(f, odf)| FiberEstimate {
            direction: f.direction,
            fraction: f.weight / total,
            odf,
        })
        .collect())
}

/// Initial rotation frames for the constrained optimizer: watershed peaks,
/// greedily merged when closer than `merge_deg` (keeping the larger peak)
/// and dropped when below `rel_threshold` of the strongest peak. If nothing
/// survives, one frame at the field's global maximum is returned.
pub fn fissile_init(
    s: &ShVector,
    dense_mesh: &HemiMesh,
    merge_deg: f64,
    rel_threshold: f64,
) -> Result<Vec<RotationFrame>> {
    let field = sample_to_mesh(s, dense_mesh);
    let lobes = segment_field(&field, dense_mesh)?;

    // Greedy merge by descending peak amplitude, keeping the larger peak.
    let min_sep = merge_deg.to_radians();
    let mut kept: Vec<usize> = Vec::new(); // peak pixels
    for l in &lobes {
        let d = dense_mesh.direction(l.peak);
        if kept.iter().all(|&k| dense_mesh.direction(k).axial_angle_to(d) >= min_sep) {
            kept.push(l.peak);
        }
    }
    let vmax = lobes.first().map(|l| l.peak_amplitude()).unwrap_or(0.0);
    kept.retain(|&p| field.values()[p] >= rel_threshold * vmax);

    if kept.is_empty() {
        // Degenerate input: point the single frame at the global argmax.
        let argmax = (0..field.len())
            .max_by(|&a, &b| field.values()[a].total_cmp(&field.values()[b]))
            .expect("mesh is non-empty");
        kept.push(argmax);
    }
    Ok(kept
        .into_iter()
        .map(|p| RotationFrame::from_direction(dense_mesh.direction(p)))
        .collect())
}
