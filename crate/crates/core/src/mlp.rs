//! Mesh-to-mesh multilayer perceptron separator.
//!
//! A feedforward network maps a multi-fiber ODF sampled on the hemisphere
//! mesh to the probability of finding a fiber along each mesh direction
//! (the von Mises–Fisher mixture targets of [`crate::vmf`]). Peaks of the
//! predicted distribution become fixels, and fixels become single-fiber
//! ODFs, so a trained model separates a voxel with a handful of matrix
//! products — orders of magnitude cheaper than nonlinear optimization.
//!
//! The architecture is six neuron layers: the mesh-sized input, four
//! hidden layers (default width 512) with tanh activations, and a
//! mesh-sized output under softplus so predicted probabilities are always
//! positive. Widths are configurable; training is plain Adam on mean
//! squared error with periodic validation and early stopping, and the
//! best-validation checkpoint is what the trainer returns.
//!
//! Everything is deterministic under a fixed seed: initialization draws
//! from a seeded generator, samples are indexed (not consumed from shared
//! state), and updates happen in a single logical sequence.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::Error;
use crate::lobes::fixels_to_sh;
use crate::mesh::{sample_to_mesh, BasisTable, HemiMesh, MeshField};
use crate::sh::ShVector;
use crate::simulate::{OdfSample, TrainingStream};
use crate::vmf::{distribution_to_fixels, target_distribution_with_kappa, MeshDistribution};
use crate::Result;

/// Default hidden-layer width.
pub const DEFAULT_HIDDEN_WIDTH: usize = 512;
/// Number of hidden layers in the default architecture (six neuron layers
/// in total: input + hidden + output).
pub const DEFAULT_HIDDEN_LAYERS: usize = 4;
/// Default Adam learning rate.
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
/// Default training batch size, in voxels.
pub const DEFAULT_BATCH_SIZE: usize = 512;
/// Validation runs every this many batches.
pub const DEFAULT_VALIDATE_EVERY: usize = 50;
/// Training stops once validation has not improved in this many batches.
pub const DEFAULT_PATIENCE: usize = 250;
/// Desk-scale training budget (samples drawn), 100× below the full budget.
pub const DESK_TRAIN_SAMPLES: usize = 51_200;
/// Desk-scale validation set size.
pub const DESK_VALIDATION_SAMPLES: usize = 5_120;
/// Full-scale training budget.
pub const FULL_TRAIN_SAMPLES: usize = 5_120_000;
/// Full-scale validation set size.
pub const FULL_VALIDATION_SAMPLES: usize = 512_000;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

/// Total parameter count for a width list.
fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
}

/// A fully connected feedforward network with tanh hidden activations and
/// a softplus output layer.
///
/// Parameters are stored flat, layer by layer: the weight matrix
/// (row-major, one row per output neuron) followed by the bias vector.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MlpModel {
    widths: Vec<usize>,
    params: Vec<f64>,
    seed: u64,
}

impl MlpModel {
    /// A freshly initialized model with the given neuron-layer widths
    /// (first entry = input width, last = output width).
    ///
    /// Weights draw from the Xavier uniform distribution
    /// U(±√(6/(fan_in+fan_out))); biases start at zero.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "a network needs at least input and output layers".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(param_count(widths));
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            for _ in 0..fan_out * fan_in {
                params.push(rng.gen_range(-a..a));
            }
            params.extend(core::iter::repeat(0.0).take(fan_out));
        }
        Ok(MlpModel { widths: widths.to_vec(), params, seed })
    }

    /// The default six-layer architecture for a mesh with `n_pixels`
    /// pixels: `n_pixels` in, four hidden layers, `n_pixels` out.
    pub fn for_mesh(n_pixels: usize, seed: u64) -> Result<Self> {
        Self::for_mesh_with_width(n_pixels, DEFAULT_HIDDEN_WIDTH, seed)
    }

    /// [`MlpModel::for_mesh`] with a custom hidden width.
    pub fn for_mesh_with_width(n_pixels: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut widths = Vec::with_capacity(DEFAULT_HIDDEN_LAYERS + 2);
        widths.push(n_pixels);
        widths.extend(core::iter::repeat(hidden).take(DEFAULT_HIDDEN_LAYERS));
        widths.push(n_pixels);
        Self::new(&widths, seed)
    }

    /// Reassembles a model from stored parts, validating the parameter
    /// count and finiteness (the checkpoint-loading path).
    pub fn from_parts(widths: Vec<usize>, params: Vec<f64>, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("invalid layer widths".into()));
        }
        if params.len() != param_count(&widths) {
            return Err(Error::LengthMismatch {
                expected: param_count(&widths),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("parameters must be finite".into()));
        }
        Ok(MlpModel { widths, params, seed })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated: at least two layers")
    }

    /// Offset of layer `k`'s weights in the flat parameter vector.
    fn layer_offset(&self, k: usize) -> usize {
        param_count(&self.widths[..=k])
    }

    /// Forward pass over a batch laid out row-major (`batch` rows of the
    /// input width). Returns every neuron layer's activations, the input
    /// included, so a backward pass can follow.
    fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<Vec<Vec<f64>>> {
        if inputs.len() != batch * self.input_width() {
            return Err(Error::LengthMismatch {
                expected: batch * self.input_width(),
                got: inputs.len(),
            });
        }
        let n_affine = self.widths.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.widths.len());
        acts.push(inputs.to_vec());
        for k in 0..n_affine {
            let (w_in, w_out) = (self.widths[k], self.widths[k + 1]);
            let off = self.layer_offset(k);
            let weights = &self.params[off..off + w_out * w_in];
            let biases = &self.params[off + w_out * w_in..off + w_out * (w_in + 1)];
            let prev = &acts[k];
            let mut next = alloc::vec![0.0; batch * w_out];
            for s in 0..batch {
                let row = &prev[s * w_in..(s + 1) * w_in];
                let out = &mut next[s * w_out..(s + 1) * w_out];
                for (o, slot) in out.iter_mut().enumerate() {
                    let wrow = &weights[o * w_in..(o + 1) * w_in];
                    let z: f64 =
                        biases[o] + wrow.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                    *slot = if k + 1 == n_affine { softplus(z) } else { libm::tanh(z) };
                }
            }
            acts.push(next);
        }
        Ok(acts)
    }

    /// Forward pass for one sample, returning the raw output activations.
    pub fn forward_values(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(input, 1)?.pop().expect("at least the input layer"))
    }

    /// Forward pass for one mesh field. The softplus output keeps every
    /// amplitude positive, so the result is always a valid distribution.
    pub fn forward(&self, input: &MeshField) -> Result<MeshDistribution> {
        MeshDistribution::new(MeshField::new(self.forward_values(input.values())?))
    }

    /// Mean squared error over a batch and its gradient with respect to
    /// every parameter, laid out exactly like [`MlpModel::params`].
    ///
    /// `inputs` and `targets` are row-major batches of `batch` samples;
    /// the loss is the mean over both samples and output pixels.
    pub fn loss_and_grad(
        &self,
        inputs: &[f64],
        targets: &[f64],
        batch: usize,
    ) -> Result<(f64, Vec<f64>)> {
        let n_out = self.output_width();
        if targets.len() != batch * n_out {
            return Err(Error::LengthMismatch {
                expected: batch * n_out,
                got: targets.len(),
            });
        }
        if batch == 0 {
            return Err(Error::Empty("gradient batch"));
        }
        let acts = self.forward_batch(inputs, batch)?;
        let n_affine = self.widths.len() - 1;
        let preds = &acts[n_affine];

        let denom = (batch * n_out) as f64;
        let mut loss = 0.0;
        // Output delta: dL/dz = 2(pred − target)/denom · σ(z), with the
        // softplus derivative recovered from its own output as
        // σ(z) = 1 − e^{−softplus(z)}.
        let mut delta = alloc::vec![0.0; batch * n_out];
        for (d, (p, t)) in delta.iter_mut().zip(preds.iter().zip(targets)) {
            let e = p - t;
            loss += e * e;
            *d = 2.0 * e / denom * (1.0 - libm::exp(-p));
        }
        loss /= denom;

        let mut grad = alloc::vec![0.0; self.params.len()];
        for k in (0..n_affine).rev() {
            let (w_in, w_out) = (self.widths[k], self.widths[k + 1]);
            let off = self.layer_offset(k);
            let prev = &acts[k];
            {
                let (gw, gb) = grad[off..off + w_out * (w_in + 1)].split_at_mut(w_out * w_in);
                for s in 0..batch {
                    let drow = &delta[s * w_out..(s + 1) * w_out];
                    let arow = &prev[s * w_in..(s + 1) * w_in];
                    for (o, &d) in drow.iter().enumerate() {
                        gb[o] += d;
                        let g = &mut gw[o * w_in..(o + 1) * w_in];
                        for (gi, ai) in g.iter_mut().zip(arow) {
                            *gi += d * ai;
                        }
                    }
                }
            }
            if k > 0 {
                // Back-propagate through the affine map and the tanh that
                // produced acts[k] (tanh' = 1 − a²).
                let weights = &self.params[off..off + w_out * w_in];
                let mut prev_delta = alloc::vec![0.0; batch * w_in];
                for s in 0..batch {
                    let drow = &delta[s * w_out..(s + 1) * w_out];
                    let prow = &mut prev_delta[s * w_in..(s + 1) * w_in];
                    for (o, &d) in drow.iter().enumerate() {
                        let wrow = &weights[o * w_in..(o + 1) * w_in];
                        for (pi, wi) in prow.iter_mut().zip(wrow) {
                            *pi += d * wi;
                        }
                    }
                    let arow = &prev[s * w_in..(s + 1) * w_in];
                    for (pi, ai) in prow.iter_mut().zip(arow) {
                        *pi *= 1.0 - ai * ai;
                    }
                }
                delta = prev_delta;
            }
        }
        Ok((loss, grad))
    }

    /// Mean squared error of the model over a set of pairs, without
    /// gradients (the validation path).
    pub fn mean_loss(&self, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Empty("validation set"));
        }
        let n_out = self.output_width();
        let mut sse = 0.0;
        for (input, target) in pairs {
            let pred = self.forward_values(input)?;
            if target.len() != n_out {
                return Err(Error::LengthMismatch { expected: n_out, got: target.len() });
            }
            sse += pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
        }
        Ok(sse / (pairs.len() * n_out) as f64)
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    /// Adam learning rate.
    pub learning_rate: f64,
    /// Samples per update.
    pub batch_size: usize,
    /// Total training samples drawn (batches × batch size).
    pub train_samples: usize,
    /// Size of the fixed validation set.
    pub validation_samples: usize,
    /// Batches between validations.
    pub validate_every: usize,
    /// Stop once validation has not improved in this many batches.
    pub patience: usize,
    /// Seed controlling initialization and sample order bookkeeping.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            train_samples: DESK_TRAIN_SAMPLES,
            validation_samples: DESK_VALIDATION_SAMPLES,
            validate_every: DEFAULT_VALIDATE_EVERY,
            patience: DEFAULT_PATIENCE,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size == 0
            || self.train_samples == 0
            || self.validation_samples == 0
            || self.validate_every == 0
        {
            return Err(Error::InvalidArgument(
                "batch size, sample budgets, and validation cadence must be positive".into(),
            ));
        }
        if self.patience < self.validate_every {
            return Err(Error::InvalidArgument(
                "patience must be at least the validation interval".into(),
            ));
        }
        Ok(())
    }
}

/// One row of the training log: losses observed at a validation point.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainRecord {
    /// Batches completed when the row was written.
    pub batch: usize,
    /// Mean training loss since the previous validation.
    pub train_loss: f64,
    /// Validation loss at this point.
    pub val_loss: f64,
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainResult {
    /// The best-validation-loss checkpoint (not necessarily the last).
    pub model: MlpModel,
    /// One row per validation point.
    pub log: Vec<TrainRecord>,
    /// Validation loss of the freshly initialized model.
    pub initial_val_loss: f64,
    /// Best validation loss seen (the returned model's).
    pub best_val_loss: f64,
    /// Batch count at which the best validation loss occurred.
    pub best_batch: usize,
    /// Validation loss at the final validation point.
    pub final_val_loss: f64,
    /// Batches actually run (early stopping may cut the budget short).
    pub batches_run: usize,
    /// Whether patience expired before the sample budget did.
    pub stopped_early: bool,
}

/// Trains `model` with Adam on mean squared error.
///
/// `train_pair` maps a sample index to an (input, target) pair; indices
/// run 0, 1, 2, … across batches, so a deterministic source makes the
/// whole run deterministic. `val` is the fixed validation set, evaluated
/// before the first update and every `validate_every` batches thereafter.
/// Training stops when the sample budget is exhausted or when validation
/// has not improved in `patience` batches, and the parameters that scored
/// the best validation loss are what comes back.
///
/// A non-finite training or validation loss aborts with a diagnostic.
pub fn train(
    model: MlpModel,
    config: &TrainConfig,
    train_pair: &mut dyn FnMut(u64) -> Result<(Vec<f64>, Vec<f64>)>,
    val: &[(Vec<f64>, Vec<f64>)],
) -> Result<TrainResult> {
    config.validate()?;
    let mut current = model;
    let n_in = current.input_width();
    let n_out = current.output_width();
    let n_batches = config.train_samples / config.batch_size;
    if n_batches == 0 {
        return Err(Error::InvalidArgument(
            "training budget is smaller than one batch".into(),
        ));
    }

    let initial_val_loss = current.mean_loss(val)?;
    if !initial_val_loss.is_finite() {
        return Err(Error::InvalidArgument(
            "training diverged: initial validation loss is not finite".into(),
        ));
    }
    let mut best_params = current.params.clone();
    let mut best_val_loss = initial_val_loss;
    let mut best_batch = 0usize;
    let mut final_val_loss = initial_val_loss;
    let mut log = Vec::new();
    let mut stopped_early = false;

    // Adam state.
    let (beta1, beta2, eps) = (0.9, 0.999, 1e-8);
    let mut m = alloc::vec![0.0; current.params.len()];
    let mut v = alloc::vec![0.0; current.params.len()];

    let mut inputs = alloc::vec![0.0; config.batch_size * n_in];
    let mut targets = alloc::vec![0.0; config.batch_size * n_out];
    let mut next_index = 0u64;
    let mut batches_run = 0usize;
    let mut since_val_loss = 0.0;
    let mut since_val_batches = 0usize;

    for b in 1..=n_batches {
        for s in 0..config.batch_size {
            let (input, target) = train_pair(next_index)?;
            next_index += 1;
            if input.len() != n_in || target.len() != n_out {
                return Err(Error::LengthMismatch {
                    expected: n_in,
                    got: input.len(),
                });
            }
            inputs[s * n_in..(s + 1) * n_in].copy_from_slice(&input);
            targets[s * n_out..(s + 1) * n_out].copy_from_slice(&target);
        }
        let (loss, grad) = current.loss_and_grad(&inputs, &targets, config.batch_size)?;
        if !loss.is_finite() {
            return Err(Error::InvalidArgument(alloc::format!(
                "training diverged: loss is not finite at batch {b}"
            )));
        }
        let t = b as f64;
        let (c1, c2) = (1.0 - libm::pow(beta1, t), 1.0 - libm::pow(beta2, t));
        for ((p, g), (mi, vi)) in
            current.params.iter_mut().zip(&grad).zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            *p -= config.learning_rate * (*mi / c1) / (libm::sqrt(*vi / c2) + eps);
        }
        batches_run = b;
        since_val_loss += loss;
        since_val_batches += 1;

        if b % config.validate_every == 0 || b == n_batches {
            let val_loss = current.mean_loss(val)?;
            if !val_loss.is_finite() {
                return Err(Error::InvalidArgument(alloc::format!(
                    "training diverged: validation loss is not finite at batch {b}"
                )));
            }
            log.push(TrainRecord {
                batch: b,
                train_loss: since_val_loss / since_val_batches.max(1) as f64,
                val_loss,
            });
            since_val_loss = 0.0;
            since_val_batches = 0;
            final_val_loss = val_loss;
            if val_loss < best_val_loss {
                best_val_loss = val_loss;
                best_batch = b;
                best_params.copy_from_slice(&current.params);
            } else if b - best_batch >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    current.params = best_params;
    Ok(TrainResult {
        model: current,
        log,
        initial_val_loss,
        best_val_loss,
        best_batch,
        final_val_loss,
        batches_run,
        stopped_early,
    })
}

/// Deterministic source of (ODF mesh, fiber-probability mesh) pairs for
/// training and validation: simulated voxels sampled on a mesh, with
/// von Mises–Fisher mixture targets.
#[derive(Clone, Debug)]
pub struct MeshSampleStream {
    stream: TrainingStream,
    mesh: HemiMesh,
    basis: BasisTable,
    kappa: f64,
}

impl MeshSampleStream {
    /// A stream over voxels with `2..=3` fibers (or `1..=3` when
    /// `include_single` is set), band limit `lmax`, on a mesh with
    /// `n_pixels` pixels, and targets of concentration `kappa`.
    pub fn new(
        seed: u64,
        lmax: usize,
        n_pixels: usize,
        kappa: f64,
        include_single: bool,
    ) -> Result<Self> {
        let mesh = HemiMesh::build(n_pixels)?;
        let basis = BasisTable::build(&mesh, lmax)?;
        Ok(MeshSampleStream {
            stream: TrainingStream::new(seed, lmax, include_single),
            mesh,
            basis,
            kappa,
        })
    }

    pub fn mesh(&self) -> &HemiMesh {
        &self.mesh
    }

    /// The underlying simulated voxel at a stream position.
    pub fn odf_at(&self, index: u64) -> Result<OdfSample> {
        self.stream.sample_at(index)
    }

    /// The (input, target) pair at a stream position.
    pub fn pair_at(&self, index: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        let odf = self.stream.sample_at(index)?;
        let input = self.basis.sample(&odf.total)?.values().to_vec();
        let target = target_distribution_with_kappa(&odf.config, &self.mesh, self.kappa)?
            .values()
            .to_vec();
        Ok((input, target))
    }

    /// Materializes pairs `0..count` (a validation or test set).
    pub fn collect_pairs(&self, count: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        (0..count as u64).map(|i| self.pair_at(i)).collect()
    }
}

/// Separates a multi-fiber ODF with a trained network: sample the ODF on
/// the mesh, predict the fiber-probability distribution, convert its peaks
/// to fixels, and rebuild one single-fiber ODF (band limit `lmax`) per
/// fixel, fractions normalized over the detected peaks.
pub fn net_separate(
    model: &MlpModel,
    total: &ShVector,
    mesh: &HemiMesh,
    lmax: usize,
) -> Result<Vec<ShVector>> {
    if model.input_width() != mesh.n_pixels() {
        return Err(Error::LengthMismatch {
            expected: model.input_width(),
            got: mesh.n_pixels(),
        });
    }
    let field = sample_to_mesh(total, mesh);
    let dist = model.forward(&field)?;
    let fixels = distribution_to_fixels(&dist, mesh)?;
    fixels_to_sh(&fixels, lmax, true)
}
