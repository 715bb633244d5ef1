//! Equal-area hemisphere mesh for sampling antipodally symmetric functions.
//!
//! The mesh is the northern half of a HEALPix-style ring pixelization:
//! pixels sit on iso-latitude rings, every pixel covers the same solid angle
//! `2 pi / n_pixels`, and the first half of the full-sphere pixel sequence
//! (ring order) contains exactly one representative of every antipodal pair
//! — the equator ring contributes its first half, and the antipode of each
//! dropped pixel is integer-exactly one of the kept ones.
//!
//! Adjacency is ring-based: a pixel neighbors the two pixels beside it on
//! its own ring plus every pixel in the adjacent rings whose azimuth
//! interval overlaps or touches its own. Neighbors that fall on the dropped
//! southern half are folded through the antipodal identification, so the
//! mesh is a closed surface (a projective plane) with 6-8 neighbors per
//! pixel and no boundary.

use alloc::vec;
use alloc::vec::Vec;

use crate::sh::{eval_basis, n_coeffs, Direction, ShVector};
use crate::{Error, Result};

/// Mesh size used for network inputs/outputs.
pub const NET_MESH_PIXELS: usize = 384;
/// Dense mesh used for watershed lobe segmentation and peak scans.
pub const DENSE_MESH_PIXELS: usize = 1536;

/// Default relative peak threshold for [`local_maxima`].
pub const DEFAULT_REL_THRESHOLD: f64 = 0.1;
/// Default minimum peak separation for [`local_maxima`], degrees.
pub const DEFAULT_MIN_SEP_DEG: f64 = 15.0;

#[derive(Clone, Copy, Debug)]
struct RingInfo {
    start: usize,
    size: usize,
    z: f64,
    dphi: f64,
    /// Azimuth of pixel 0 in units of `dphi`.
    phase: f64,
}

/// Equal-area hemisphere mesh.
#[derive(Clone, Debug)]
pub struct HemiMesh {
    nside: usize,
    directions: Vec<Direction>,
    /// CSR adjacency.
    nbr_index: Vec<usize>,
    nbr_data: Vec<usize>,
    pixel_area: f64,
}

/// Ring geometry for every full-sphere ring 1..=4*nside-1 (ring order).
fn full_rings(nside: usize) -> Vec<RingInfo> {
    let npix = 12 * nside * nside;
    let fact2 = 4.0 / npix as f64;
    let fact1 = 2.0 / (3.0 * nside as f64);
    let mut rings = Vec::with_capacity(4 * nside - 1);
    let mut start = 0usize;
    for i in 1..(4 * nside) {
        let (size, z, phase) = if i < nside {
            // North polar cap.
            (4 * i, 1.0 - (i * i) as f64 * fact2, 0.5)
        } else if i <= 3 * nside {
            // Equatorial belt; rings alternate half-step phase.
            let phase = if (i + nside) % 2 == 0 { 0.5 } else { 0.0 };
            (4 * nside, (2.0 * nside as f64 - i as f64) * fact1, phase)
        } else {
            // South polar cap, mirror of the north.
            let k = 4 * nside - i;
            (4 * k, -(1.0 - (k * k) as f64 * fact2), 0.5)
        };
        let dphi = 2.0 * core::f64::consts::PI / size as f64;
        rings.push(RingInfo { start, size, z, dphi, phase });
        start += size;
    }
    debug_assert_eq!(start, npix);
    rings
}

impl HemiMesh {
    /// Builds the mesh with `n_pixels` hemisphere pixels.
    ///
    /// Supported sizes are `6 * nside^2` for `nside` a power of two in
    /// 2..=32: 24, 96, 384, 1536, 6144. (The 6-pixel base tiling is excluded:
    /// its cells have only 4-5 edge neighbors, breaking the adjacency
    /// guarantees the peak finder relies on.)
    pub fn build(n_pixels: usize) -> Result<Self> {
        let nside = match n_pixels {
            24 => 2,
            96 => 4,
            384 => 8,
            1536 => 16,
            6144 => 32,
            _ => return Err(Error::UnsupportedMeshSize { got: n_pixels }),
        };
        let rings = full_rings(nside);
        let equator = 2 * nside - 1; // index into `rings` of ring 2*nside

        // Hemisphere pixel directions: rings 1..2*nside fully, equator ring
        // half. Hemisphere index == full-sphere ring-order index.
        let mut directions = Vec::with_capacity(n_pixels);
        for ring in &rings[..=equator] {
            let st = libm::sqrt((1.0 - ring.z * ring.z).max(0.0));
            let kept = if ring.start + ring.size > n_pixels { ring.size / 2 } else { ring.size };
            for j in 0..kept {
                let phi = (j as f64 + ring.phase) * ring.dphi;
                directions.push(
                    Direction::new(st * libm::cos(phi), st * libm::sin(phi), ring.z)
                        .expect("ring pixel is a unit vector"),
                );
            }
        }
        debug_assert_eq!(directions.len(), n_pixels);

        // Antipodal fold of a full-sphere (ring, j) onto a hemisphere index.
        let fold = |ri: usize, j: usize| -> usize {
            let two_nside = 2 * nside;
            let i = ri + 1; // 1-based ring number
            if i < two_nside {
                rings[ri].start + j
            } else if i == two_nside {
                let half = rings[ri].size / 2;
                rings[ri].start + if j < half { j } else { j - half }
            } else {
                let mirror = 4 * nside - i; // northern partner ring
                let size = rings[ri].size;
                debug_assert_eq!(size, rings[mirror - 1].size);
                rings[mirror - 1].start + (j + size / 2) % size
            }
        };

        let mut nbr_index = Vec::with_capacity(n_pixels + 1);
        let mut nbr_data = Vec::new();
        nbr_index.push(0);
        let mut scratch: Vec<usize> = Vec::new();
        for (ri, ring) in rings[..=equator].iter().enumerate() {
            let kept = if ring.start + ring.size > n_pixels { ring.size / 2 } else { ring.size };
            for j in 0..kept {
                scratch.clear();
                // Same-ring neighbors.
                scratch.push(fold(ri, (j + 1) % ring.size));
                scratch.push(fold(ri, (j + ring.size - 1) % ring.size));
                // Adjacent rings: azimuth-interval overlap (touching counts).
                let phi_p = (j as f64 + ring.phase) * ring.dphi;
                for adj in [ri.wrapping_sub(1), ri + 1] {
                    if adj >= rings.len() {
                        continue;
                    }
                    let other = &rings[adj];
                    let half_sum = 0.5 * (ring.dphi + other.dphi);
                    for j2 in 0..other.size {
                        let phi_q = (j2 as f64 + other.phase) * other.dphi;
                        let mut d = libm::fabs(phi_p - phi_q) % (2.0 * core::f64::consts::PI);
                        if d > core::f64::consts::PI {
                            d = 2.0 * core::f64::consts::PI - d;
                        }
                        if d <= half_sum + 1e-9 {
                            scratch.push(fold(adj, j2));
                        }
                    }
                }
                let me = ring.start + j;
                scratch.sort_unstable();
                scratch.dedup();
                scratch.retain(|&q| q != me);
                nbr_data.extend_from_slice(&scratch);
                nbr_index.push(nbr_data.len());
            }
        }

        Ok(HemiMesh {
            nside,
            directions,
            nbr_index,
            nbr_data,
            pixel_area: 2.0 * core::f64::consts::PI / n_pixels as f64,
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.directions.len()
    }

    pub fn nside(&self) -> usize {
        self.nside
    }

    /// Solid angle of every pixel (steradians): `2 pi / n_pixels`.
    pub fn pixel_area(&self) -> f64 {
        self.pixel_area
    }

    pub fn direction(&self, i: usize) -> &Direction {
        &self.directions[i]
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.nbr_data[self.nbr_index[i]..self.nbr_index[i + 1]]
    }

    /// Hemisphere pixel whose direction is axially nearest to `d`.
    pub fn nearest_pixel(&self, d: &Direction) -> usize {
        let mut best = 0;
        let mut best_dot = -1.0;
        for (i, dir) in self.directions.iter().enumerate() {
            let a = libm::fabs(dir.dot(d));
            if a > best_dot {
                best_dot = a;
                best = i;
            }
        }
        best
    }
}

/// Amplitudes of a function sampled on a mesh, one value per pixel.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MeshField {
    values: Vec<f64>,
}

impl MeshField {
    pub fn new(values: Vec<f64>) -> Self {
        MeshField { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Riemann sum of the field: sum of amplitudes times pixel area.
    pub fn integral(&self, mesh: &HemiMesh) -> f64 {
        self.values.iter().sum::<f64>() * mesh.pixel_area()
    }
}

/// Samples a harmonic function onto every mesh pixel.
pub fn sample_to_mesh(s: &ShVector, mesh: &HemiMesh) -> MeshField {
    MeshField::new(mesh.directions.iter().map(|d| s.eval(d)).collect())
}

/// Precomputed basis matrix for repeatedly sampling many functions on one
/// mesh: row i holds every basis value at pixel i.
#[derive(Clone, Debug)]
pub struct BasisTable {
    lmax: usize,
    n_pixels: usize,
    rows: Vec<f64>,
}

impl BasisTable {
    pub fn build(mesh: &HemiMesh, lmax: usize) -> Result<Self> {
        let nc = n_coeffs(crate::sh::check_lmax(lmax)?);
        let mut rows = Vec::with_capacity(mesh.n_pixels() * nc);
        for d in &mesh.directions {
            rows.extend_from_slice(&eval_basis(d, lmax)?);
        }
        Ok(BasisTable { lmax, n_pixels: mesh.n_pixels(), rows })
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let nc = n_coeffs(self.lmax);
        &self.rows[i * nc..(i + 1) * nc]
    }

    /// Fast equivalent of [`sample_to_mesh`].
    pub fn sample(&self, s: &ShVector) -> Result<MeshField> {
        if s.lmax() != self.lmax {
            return Err(Error::LengthMismatch {
                expected: n_coeffs(self.lmax),
                got: s.coeffs().len(),
            });
        }
        let nc = n_coeffs(self.lmax);
        let c = s.coeffs();
        let values = (0..self.n_pixels)
            .map(|i| {
                let row = &self.rows[i * nc..(i + 1) * nc];
                row.iter().zip(c).map(|(a, b)| a * b).sum()
            })
            .collect();
        Ok(MeshField::new(values))
    }
}

/// A detected field peak: the representative pixel, its direction, and the
/// field amplitude there.
#[derive(Clone, Copy, Debug)]
pub struct Peak {
    pub pixel: usize,
    pub direction: Direction,
    pub amplitude: f64,
}

/// Finds peaks of a sampled field.
///
/// A peak is a maximal connected set of equal-amplitude pixels (usually a
/// single pixel; symmetric fields can produce exact plateaus) that strictly
/// exceeds every bordering pixel; the lowest pixel index represents the
/// plateau. Only positive amplitudes qualify, peaks below `rel_threshold`
/// times the global maximum are dropped, and surviving peaks closer than
/// `min_sep_deg` (axial angle, antipodally folded) to a larger peak are
/// merged into it. A constant field has no border anywhere and therefore no
/// peaks.
///
/// Returns peaks sorted by descending amplitude (ties by ascending index).
pub fn local_maxima(
    mesh: &HemiMesh,
    field: &MeshField,
    rel_threshold: f64,
    min_sep_deg: f64,
) -> Result<Vec<Peak>> {
    let v = field.values();
    if v.len() != mesh.n_pixels() {
        return Err(Error::LengthMismatch { expected: mesh.n_pixels(), got: v.len() });
    }
    if !(0.0..1.0).contains(&rel_threshold) {
        return Err(Error::InvalidArgument(alloc::format!(
            "rel_threshold {rel_threshold} outside [0, 1)"
        )));
    }
    if !(0.0..=180.0).contains(&min_sep_deg) {
        return Err(Error::InvalidArgument(alloc::format!(
            "min_sep_deg {min_sep_deg} outside [0, 180]"
        )));
    }

    // Plateau-aware strict maxima.
    let mut visited = vec![false; v.len()];
    let mut peaks: Vec<usize> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    let mut component: Vec<usize> = Vec::new();
    for p in 0..v.len() {
        if visited[p] {
            continue;
        }
        let val = v[p];
        visited[p] = true;
        stack.push(p);
        component.clear();
        let mut is_peak = val > 0.0;
        let mut has_border = false;
        while let Some(q) = stack.pop() {
            component.push(q);
            for &r in mesh.neighbors(q) {
                if v[r] == val {
                    if !visited[r] {
                        visited[r] = true;
                        stack.push(r);
                    }
                } else {
                    has_border = true;
                    if v[r] > val {
                        is_peak = false;
                    }
                }
            }
        }
        if is_peak && has_border {
            peaks.push(*component.iter().min().expect("component is non-empty"));
        }
    }

    let vmax = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    peaks.retain(|&p| v[p] >= rel_threshold * vmax);
    // Descending amplitude, ascending index on ties.
    peaks.sort_unstable_by(|&a, &b| {
        v[b].partial_cmp(&v[a]).expect("finite amplitudes").then(a.cmp(&b))
    });

    let min_sep = min_sep_deg.to_radians();
    let mut kept: Vec<usize> = Vec::new();
    for p in peaks {
        let dp = mesh.direction(p);
        if kept.iter().all(|&k| mesh.direction(k).axial_angle_to(dp) >= min_sep) {
            kept.push(p);
        }
    }
    Ok(kept
        .into_iter()
        .map(|p| Peak { pixel: p, direction: *mesh.direction(p), amplitude: v[p] })
        .collect())
}
