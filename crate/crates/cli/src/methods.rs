//! Uniform driver for the three separators: each one turns a composite ODF
//! into [`FiberEstimate`]s (direction, volume fraction, single-fiber ODF),
//! so downstream evaluation and reporting are method-agnostic.

use std::time::Instant;

use odfsep_core::fissile::{Fissile, FissileOptions};
use odfsep_core::lobes::{fixels_to_sh, watershed_separate_field};
use odfsep_core::mesh::{BasisTable, HemiMesh};
use odfsep_core::metrics::{self, EvalRecord, FiberEstimate};
use odfsep_core::mlp::MlpModel;
use odfsep_core::sh::ShVector;
use odfsep_core::simulate::OdfSample;
use odfsep_core::vmf::{distribution_to_fixels, MeshDistribution};

use crate::CliError;

/// Which separator to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Watershed,
    Fissile,
    Net,
}

impl Method {
    pub fn parse(name: &str) -> Result<Method, CliError> {
        match name {
            "watershed" => Ok(Method::Watershed),
            "fissile" => Ok(Method::Fissile),
            "net" => Ok(Method::Net),
            other => Err(CliError::usage(format!(
                "unknown method {other:?}; expected watershed, fissile, or net"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Watershed => "watershed",
            Method::Fissile => "fissile",
            Method::Net => "net",
        }
    }
}

/// A ready-to-run separator with its meshes and model resolved up front, so
/// per-voxel work carries no setup cost and can be timed fairly.
pub enum Separator {
    Watershed { mesh: HemiMesh, basis: BasisTable, lmax: usize, rel_peak_threshold: f64 },
    Fissile { engine: Fissile },
    Net { model: MlpModel, mesh: HemiMesh, basis: BasisTable, lmax: usize },
}

impl Separator {
    pub fn watershed(mesh_pixels: usize, lmax: usize, rel: f64) -> Result<Self, CliError> {
        let mesh = HemiMesh::build(mesh_pixels)
            .map_err(|e| CliError::usage(format!("watershed mesh: {e}")))?;
        let basis = BasisTable::build(&mesh, lmax)
            .map_err(|e| CliError::usage(format!("watershed basis: {e}")))?;
        Ok(Separator::Watershed { mesh, basis, lmax, rel_peak_threshold: rel })
    }

    pub fn fissile(opts: FissileOptions) -> Result<Self, CliError> {
        let engine =
            Fissile::new(opts).map_err(|e| CliError::usage(format!("fissile setup: {e}")))?;
        Ok(Separator::Fissile { engine })
    }

    pub fn net(model: MlpModel, lmax: usize) -> Result<Self, CliError> {
        let mesh = HemiMesh::build(model.input_width())
            .map_err(|e| CliError::usage(format!("net mesh: {e}")))?;
        let basis = BasisTable::build(&mesh, lmax)
            .map_err(|e| CliError::usage(format!("net basis: {e}")))?;
        Ok(Separator::Net { model, mesh, basis, lmax })
    }

    pub fn method(&self) -> Method {
        match self {
            Separator::Watershed { .. } => Method::Watershed,
            Separator::Fissile { .. } => Method::Fissile,
            Separator::Net { .. } => Method::Net,
        }
    }

    /// Separates one composite ODF into fiber estimates.
    pub fn separate(&self, total: &ShVector) -> Result<Vec<FiberEstimate>, CliError> {
        match self {
            Separator::Watershed { mesh, basis, lmax, rel_peak_threshold } => {
                let field = basis
                    .sample(total)
                    .map_err(|e| CliError::runtime(format!("watershed sampling: {e}")))?;
                watershed_separate_field(&field, mesh, *lmax, *rel_peak_threshold)
                    .map_err(|e| CliError::runtime(format!("watershed: {e}")))
            }
            Separator::Fissile { engine } => {
                let (world, fit) = engine
                    .separate(total)
                    .map_err(|e| CliError::runtime(format!("fissile: {e}")))?;
                // Volume fractions from the isotropic mass of each fiber.
                let masses: Vec<f64> =
                    fit.fiber_coeffs.iter().map(|c| c.coeffs()[0].max(0.0)).collect();
                let total_mass: f64 = masses.iter().sum();
                Ok(world
                    .into_iter()
                    .zip(fit.frames.iter().zip(&masses))
                    .map(|(odf, (frame, &mass))| FiberEstimate {
                        direction: frame.axis().canonical(),
                        fraction: if total_mass > 0.0 {
                            mass / total_mass
                        } else {
                            1.0 / fit.frames.len() as f64
                        },
                        odf,
                    })
                    .collect())
            }
            Separator::Net { model, mesh, basis, lmax } => {
                let field = basis
                    .sample(total)
                    .map_err(|e| CliError::runtime(format!("net sampling: {e}")))?;
                let raw = model
                    .forward(&field)
                    .map_err(|e| CliError::runtime(format!("net forward: {e}")))?;
                net_estimates(&raw, mesh, *lmax)
            }
        }
    }
}

/// Converts a predicted mesh distribution into fiber estimates: fixel
/// extraction, then one weighted unit delta per fixel. An all-flat
/// prediction yields no fibers, which evaluation scores as total misses.
fn net_estimates(
    dist: &MeshDistribution,
    mesh: &HemiMesh,
    lmax: usize,
) -> Result<Vec<FiberEstimate>, CliError> {
    let fixels = distribution_to_fixels(dist, mesh)
        .map_err(|e| CliError::runtime(format!("net fixels: {e}")))?;
    if fixels.is_empty() {
        return Ok(Vec::new());
    }
    let odfs = fixels_to_sh(&fixels, lmax, true)
        .map_err(|e| CliError::runtime(format!("net reconstruction: {e}")))?;
    Ok(fixels
        .iter()
        .zip(odfs)
        .map(|(f, odf)| FiberEstimate { direction: f.direction, fraction: f.weight, odf })
        .collect())
}

/// Runs the separator over a dataset and evaluates every voxel against its
/// generating truth. Voxels are distributed over `threads` workers; results
/// are ordered by sample index and numerically independent of the thread
/// count. Returns the rows and the total wall time in milliseconds.
pub fn run_over_dataset(
    sep: &Separator,
    samples: &[OdfSample],
    threads: usize,
) -> Result<(Vec<(Vec<FiberEstimate>, EvalRecord)>, f64), CliError> {
    let name = sep.method().name();
    let work = |index: usize, sample: &OdfSample| -> Result<_, CliError> {
        let begin = Instant::now();
        let fibers = sep.separate(&sample.total)?;
        let wall_ms = begin.elapsed().as_secs_f64() * 1e3;
        let record =
            metrics::evaluate(name, &fibers, &sample.config, &sample.components, wall_ms)
                .map_err(|e| {
                    CliError::runtime(format!("evaluating voxel {index}: {e}"))
                })?;
        Ok((fibers, record))
    };

    let begin = Instant::now();
    let results = parallel_map(samples, threads, work)?;
    let total_ms = begin.elapsed().as_secs_f64() * 1e3;
    Ok((results, total_ms))
}

/// Applies `f` to every item, on one thread or several, always returning
/// results in input order. Each item's computation is independent and
/// deterministic, so the thread count never changes the numbers.
pub fn parallel_map<T, U, F>(items: &[T], threads: usize, f: F) -> Result<Vec<U>, CliError>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U, CliError> + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut slots: Vec<Option<Result<U, CliError>>> = Vec::new();
    slots.resize_with(items.len(), || None);
    let slots_ptr = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(threads);
        for t in 0..threads {
            let f = &f;
            let slots_ptr = &slots_ptr;
            handles.push(scope.spawn(move || {
                let mut local: Vec<(usize, Result<U, CliError>)> = Vec::new();
                let mut i = t;
                while i < items.len() {
                    local.push((i, f(i, &items[i])));
                    i += threads;
                }
                let mut guard = slots_ptr.lock().expect("slot lock");
                for (i, r) in local {
                    guard[i] = Some(r);
                }
            }));
        }
        for h in handles {
            h.join().expect("worker thread panicked");
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.expect("every slot filled"))
        .collect()
}

/// A short description of the machine, reported next to absolute timings.
pub fn hardware_string() -> String {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("{model} ({cores} cores, {})", std::env::consts::OS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use odfsep_core::simulate::generate_dataset;

    #[test]
    fn parallel_map_is_ordered_and_thread_count_invariant() {
        let items: Vec<u64> = (0..37).collect();
        let f = |i: usize, &x: &u64| -> Result<u64, CliError> { Ok(x * x + i as u64) };
        let one = parallel_map(&items, 1, f).unwrap();
        let four = parallel_map(&items, 4, f).unwrap();
        let many = parallel_map(&items, 64, f).unwrap();
        assert_eq!(one, four);
        assert_eq!(one, many);
        assert_eq!(one[5], 30);
    }

    #[test]
    fn parallel_map_propagates_errors() {
        let items: Vec<u64> = (0..8).collect();
        let f = |_: usize, &x: &u64| -> Result<u64, CliError> {
            if x == 5 {
                Err(CliError::runtime("boom".into()))
            } else {
                Ok(x)
            }
        };
        assert!(parallel_map(&items, 3, f).is_err());
    }

    #[test]
    fn watershed_estimates_are_normalized_fractions() {
        let samples = generate_dataset(3, 2, 0, 6).unwrap();
        let sep = Separator::watershed(1536, 6, 0.2).unwrap();
        for s in &samples {
            let est = sep.separate(&s.total).unwrap();
            assert!(!est.is_empty());
            let sum: f64 = est.iter().map(|f| f.fraction).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fissile_estimates_order_matches_world_odfs() {
        let samples = generate_dataset(11, 1, 0, 6).unwrap();
        let sep = Separator::fissile(FissileOptions::default()).unwrap();
        let est = sep.separate(&samples[0].total).unwrap();
        let sum: f64 = est.iter().map(|f| f.fraction).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        // Each estimate's direction must sit on its own ODF's ridge: the
        // ODF evaluated along the reported axis dominates the antipodal
        // tangent direction.
        for f in &est {
            let on_axis = f.odf.eval(&f.direction);
            assert!(on_axis > 0.0);
        }
    }

    #[test]
    fn unknown_method_is_a_usage_error() {
        let err = Method::parse("magic").unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("magic"));
    }
}
