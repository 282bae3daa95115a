//! Shallow feedforward regressor from KL sample coefficients to stacked
//! edge-constraint eigenvectors, trained with Moller's scaled conjugate
//! gradient (SCG).
//!
//! Conventions:
//! * Datasets store samples as rows (`M x R` inputs, `M x O` targets);
//!   network internals use columns as samples for batched linear algebra.
//! * Inputs and targets are z-scored per coordinate; the statistics are
//!   frozen at training time and applied identically at prediction.
//! * The training cost is the mean squared error over normalized targets,
//!   averaged over every entry (`1 / (M * O)` scaling).
//! * Parameters flatten layer by layer: weight matrix in column-major
//!   order, then the bias vector.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Target layout: how the flat output vector decomposes into per-edge
/// constraint eigenvectors. Frozen when a dataset is generated; training
/// and evaluation must agree on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutMeta {
    /// Interface-edge node counts in edge-id order.
    pub edge_lengths: Vec<usize>,
    /// Constraints (stacked eigenvectors) per edge.
    pub k_per_edge: usize,
    /// Input dimension: number of KL terms R.
    pub input_dim: usize,
}

impl LayoutMeta {
    /// Flat output dimension: `k * sum(edge lengths)`.
    pub fn output_dim(&self) -> usize {
        self.k_per_edge * self.edge_lengths.iter().sum::<usize>()
    }

    /// Stable content hash of the layout (hex SHA-256 of a canonical text
    /// rendering), used to reject model/dataset mismatches.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(format!(
            "layout v1; input_dim={}; k={}; edges={:?}",
            self.input_dim, self.k_per_edge, self.edge_lengths
        ));
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Training or test set: rows are samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub layout: LayoutMeta,
    /// RNG seed that produced each row (provenance).
    pub sample_seeds: Vec<u64>,
    /// Hash of the experiment configuration that generated the set.
    pub config_hash: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.nrows() != self.targets.nrows() {
            return Err(Error::MalformedDataset {
                detail: format!(
                    "{} input rows vs {} target rows",
                    self.inputs.nrows(),
                    self.targets.nrows()
                ),
            });
        }
        if self.inputs.ncols() != self.layout.input_dim
            || self.targets.ncols() != self.layout.output_dim()
        {
            return Err(Error::LayoutMismatch {
                got: format!("{} x {}", self.inputs.ncols(), self.targets.ncols()),
                expected: format!(
                    "{} x {}",
                    self.layout.input_dim,
                    self.layout.output_dim()
                ),
            });
        }
        if self.sample_seeds.len() != self.inputs.nrows() {
            return Err(Error::MalformedDataset {
                detail: "per-sample seed count differs from row count".into(),
            });
        }
        Ok(())
    }
}

/// Per-coordinate z-score statistics (frozen at fit time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    /// Fit population mean/std per column of a samples-as-rows matrix.
    /// Columns with (numerically) zero spread get scale 1 so constant
    /// coordinates pass through unscaled instead of amplifying roundoff.
    pub fn fit(data: &DMatrix<f64>) -> Self {
        let m = data.nrows().max(1) as f64;
        let mut mean = vec![0.0; data.ncols()];
        let mut scale = vec![1.0; data.ncols()];
        for c in 0..data.ncols() {
            let col = data.column(c);
            let mu = col.sum() / m;
            let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            let sd = var.sqrt();
            mean[c] = mu;
            scale[c] = if sd > 1e-12 * mu.abs().max(1.0) { sd } else { 1.0 };
        }
        Self { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(x - mean) / scale` per column (rows are samples).
    pub fn apply(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = data.clone();
        for c in 0..out.ncols() {
            let (mu, s) = (self.mean[c], self.scale[c]);
            for v in out.column_mut(c).iter_mut() {
                *v = (*v - mu) / s;
            }
        }
        out
    }

    /// Inverse of [`Normalization::apply`].
    pub fn unapply(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = data.clone();
        for c in 0..out.ncols() {
            let (mu, s) = (self.mean[c], self.scale[c]);
            for v in out.column_mut(c).iter_mut() {
                *v = *v * s + mu;
            }
        }
        out
    }
}

/// Fully connected feedforward network: tanh hidden layers, identity
/// output. `sizes` lists the layer widths from input to output; two
/// entries mean a purely affine model.
#[derive(Debug, Clone)]
pub struct MlpNetwork {
    sizes: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

impl MlpNetwork {
    /// Glorot-uniform weights (`|w| <= sqrt(6 / (fan_in + fan_out))`),
    /// zero biases, drawn column-major layer by layer from a dedicated
    /// ChaCha stream so initialization is reproducible.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config {
                detail: format!("invalid network sizes {sizes:?}"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = DMatrix::zeros(fan_out, fan_in);
            for j in 0..fan_in {
                for i in 0..fan_out {
                    w[(i, j)] = rng.random_range(-limit..limit);
                }
            }
            weights.push(w);
            biases.push(DVector::zeros(fan_out));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Flatten parameters (per layer: weights column-major, then bias).
    pub fn params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        DVector::from_vec(out)
    }

    /// Inverse of [`MlpNetwork::params`].
    pub fn set_params(&mut self, flat: &DVector<f64>) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                detail: format!(
                    "parameter vector length {} does not match network size {}",
                    flat.len(),
                    self.param_count()
                ),
            });
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (wn, bn) = (w.len(), b.len());
            w.as_mut_slice().copy_from_slice(&flat.as_slice()[at..at + wn]);
            at += wn;
            b.as_mut_slice().copy_from_slice(&flat.as_slice()[at..at + bn]);
            at += bn;
        }
        Ok(())
    }

    /// Forward pass on normalized data; columns are samples.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                detail: format!(
                    "input width {} does not match network input {}",
                    x.nrows(),
                    self.input_dim()
                ),
            });
        }
        let mut a = x.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &a;
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l < last {
                z.apply(|v| *v = v.tanh());
            }
            a = z;
        }
        Ok(a)
    }

    /// Mean squared error over all entries of the normalized targets and
    /// its exact backpropagation gradient in flattened parameter order.
    /// Columns are samples.
    pub fn loss_and_gradient(
        &self,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
    ) -> Result<(f64, DVector<f64>)> {
        if x.nrows() != self.input_dim() || y.nrows() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                detail: "input/target widths do not match network".into(),
            });
        }
        if x.ncols() != y.ncols() {
            return Err(Error::DimensionMismatch {
                detail: format!(
                    "{} input samples vs {} target samples",
                    x.ncols(),
                    y.ncols()
                ),
            });
        }
        let m = x.ncols();
        let denom = (m * self.output_dim()) as f64;
        // Forward with cached activations.
        let last = self.weights.len() - 1;
        let mut acts: Vec<DMatrix<f64>> = Vec::with_capacity(self.weights.len() + 1);
        acts.push(x.clone());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l < last {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        let resid = acts.last().unwrap() - y;
        let mse = resid.norm_squared() / denom;
        // Backward sweep.
        let mut delta = resid * (2.0 / denom);
        let mut grad_w: Vec<DMatrix<f64>> = Vec::with_capacity(self.weights.len());
        let mut grad_b: Vec<DVector<f64>> = Vec::with_capacity(self.weights.len());
        for l in (0..self.weights.len()).rev() {
            grad_w.push(&delta * acts[l].transpose());
            grad_b.push(delta.column_sum());
            if l > 0 {
                let mut back = self.weights[l].tr_mul(&delta);
                back.zip_apply(&acts[l], |d, a| *d *= 1.0 - a * a);
                delta = back;
            }
        }
        grad_w.reverse();
        grad_b.reverse();
        let mut flat = Vec::with_capacity(self.param_count());
        for (gw, gb) in grad_w.iter().zip(&grad_b) {
            flat.extend_from_slice(gw.as_slice());
            flat.extend_from_slice(gb.as_slice());
        }
        Ok((mse, DVector::from_vec(flat)))
    }
}

/// Stopping rules and SCG scalars.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Stop when the gradient norm drops below this floor.
    pub grad_min: f64,
    pub max_epochs: usize,
    /// Curvature probe step (Moller's sigma).
    pub sigma: f64,
    /// Initial trust-region regularization (Moller's lambda_1).
    pub lambda_init: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            grad_min: 1e-6,
            max_epochs: 1_000_000,
            sigma: 1e-5,
            lambda_init: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_min > 0.0) || self.max_epochs == 0 {
            return Err(Error::Config {
                detail: "grad_min must be positive and max_epochs at least 1".into(),
            });
        }
        if !(self.sigma > 0.0) || !(self.lambda_init > 0.0) {
            return Err(Error::Config {
                detail: "SCG sigma and lambda_init must be positive".into(),
            });
        }
        Ok(())
    }
}

/// One row of the training history. Epoch 0 is the initial state; later
/// epochs record the post-iteration loss (unchanged on rejected steps).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub mse: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
    /// True when the gradient floor was reached before the epoch budget.
    pub converged: bool,
}

impl TrainHistory {
    pub fn final_record(&self) -> TrainRecord {
        *self.records.last().expect("history is never empty")
    }
}

/// Moller's scaled conjugate gradient on the full batch. `x`/`y` are
/// normalized, columns are samples. Restarts every `param_count` accepted
/// directions; non-finite trial losses are treated as rejected steps, a
/// non-finite loss at the current weights aborts.
pub fn train_scg(
    net: &mut MlpNetwork,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if x.ncols() == 0 {
        return Err(Error::MalformedDataset {
            detail: "cannot train on an empty dataset".into(),
        });
    }
    let n = net.param_count();
    let mut w = net.params();
    let (mut loss, grad) = net.loss_and_gradient(x, y)?;
    if !loss.is_finite() {
        return Err(Error::Message(format!(
            "non-finite loss {loss} at initialization"
        )));
    }
    let mut r = -grad;
    let mut p = r.clone();
    let mut lambda = config.lambda_init;
    let mut lambda_bar = 0.0;
    let mut success = true;
    let mut delta = 0.0f64;
    let mut records = vec![TrainRecord {
        epoch: 0,
        mse: loss,
        grad_norm: r.norm(),
    }];
    let mut converged = r.norm() < config.grad_min;
    let mut epoch = 0usize;
    while !converged && epoch < config.max_epochs {
        epoch += 1;
        let p_norm_sq = p.norm_squared();
        if success {
            // Second-order probe along p.
            let sigma_k = config.sigma / p_norm_sq.sqrt().max(f64::MIN_POSITIVE);
            net.set_params(&(&w + &p * sigma_k))?;
            let (_, grad_probe) = net.loss_and_gradient(x, y)?;
            let s = (grad_probe + &r) / sigma_k; // (E'(w + sigma p) - E'(w)) / sigma
            delta = p.dot(&s);
        }
        // Trust-region adjustment of the curvature estimate.
        delta += (lambda - lambda_bar) * p_norm_sq;
        if delta <= 0.0 {
            // Make the (regularized) Hessian positive definite.
            lambda_bar = 2.0 * (lambda - delta / p_norm_sq);
            delta = -delta + lambda * p_norm_sq;
            lambda = lambda_bar;
        }
        let mu = p.dot(&r);
        let alpha = mu / delta;
        let w_trial = &w + &p * alpha;
        net.set_params(&w_trial)?;
        let (loss_trial, grad_trial) = net.loss_and_gradient(x, y)?;
        let comparison = if loss_trial.is_finite() {
            2.0 * delta * (loss - loss_trial) / (mu * mu)
        } else {
            -1.0 // force rejection and a larger lambda
        };
        if comparison >= 0.0 {
            // Accept the step.
            w = w_trial;
            loss = loss_trial;
            let r_new = -grad_trial;
            lambda_bar = 0.0;
            success = true;
            if epoch % n == 0 {
                p = r_new.clone(); // periodic restart
            } else {
                let beta = (r_new.norm_squared() - r_new.dot(&r)) / mu;
                p = &r_new + &p * beta;
            }
            r = r_new;
            if comparison >= 0.75 {
                lambda *= 0.25;
            }
        } else {
            lambda_bar = lambda;
            success = false;
        }
        if comparison < 0.25 {
            lambda += delta * (1.0 - comparison) / p_norm_sq;
        }
        let grad_norm = r.norm();
        records.push(TrainRecord {
            epoch,
            mse: loss,
            grad_norm,
        });
        converged = grad_norm < config.grad_min;
    }
    net.set_params(&w)?;
    Ok(TrainHistory { records, converged })
}

/// Root mean squared prediction error normalized by the largest per-sample
/// residual in the infinity norm; zero by convention when every residual
/// vanishes. Rows are samples, computed on raw (denormalized) targets.
pub fn nrmse(targets: &DMatrix<f64>, predictions: &DMatrix<f64>) -> Result<f64> {
    if targets.shape() != predictions.shape() {
        return Err(Error::DimensionMismatch {
            detail: format!(
                "target shape {:?} vs prediction shape {:?}",
                targets.shape(),
                predictions.shape()
            ),
        });
    }
    let (m, o) = targets.shape();
    if m == 0 || o == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    let mut max_inf = 0.0f64;
    for i in 0..m {
        let mut norm_sq = 0.0;
        for j in 0..o {
            let d = targets[(i, j)] - predictions[(i, j)];
            norm_sq += d * d;
            max_inf = max_inf.max(d.abs());
        }
        sum += norm_sq / o as f64;
    }
    if max_inf == 0.0 {
        return Ok(0.0);
    }
    Ok((sum / m as f64).sqrt() / max_inf)
}

/// Trained network plus its frozen normalization and the layout hash of
/// the dataset it was fitted to.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub network: MlpNetwork,
    pub input_norm: Normalization,
    pub output_norm: Normalization,
    pub layout_hash: String,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    sizes: Vec<usize>,
    layout_hash: String,
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
    output_mean: Vec<f64>,
    output_scale: Vec<f64>,
    params: Vec<f64>,
}

impl SurrogateModel {
    /// Fit normalization on the training set, initialize from `init_seed`
    /// and run SCG. `hidden` lists hidden-layer widths.
    pub fn train(
        dataset: &Dataset,
        hidden: &[usize],
        config: &TrainConfig,
        init_seed: u64,
    ) -> Result<(Self, TrainHistory)> {
        dataset.validate()?;
        if dataset.is_empty() {
            return Err(Error::MalformedDataset {
                detail: "training set is empty".into(),
            });
        }
        let input_norm = Normalization::fit(&dataset.inputs);
        let output_norm = Normalization::fit(&dataset.targets);
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(dataset.layout.input_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(dataset.layout.output_dim());
        let mut network = MlpNetwork::new(&sizes, init_seed)?;
        let x = input_norm.apply(&dataset.inputs).transpose();
        let y = output_norm.apply(&dataset.targets).transpose();
        let history = train_scg(&mut network, &x, &y, config)?;
        Ok((
            Self {
                network,
                input_norm,
                output_norm,
                layout_hash: dataset.layout.hash(),
            },
            history,
        ))
    }

    /// Raw inputs (rows = samples) to raw predictions.
    pub fn predict(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let x = self.input_norm.apply(inputs).transpose();
        let out = self.network.forward(&x)?.transpose();
        Ok(self.output_norm.unapply(&out))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = ModelFile {
            sizes: self.network.sizes().to_vec(),
            layout_hash: self.layout_hash.clone(),
            input_mean: self.input_norm.mean.clone(),
            input_scale: self.input_norm.scale.clone(),
            output_mean: self.output_norm.mean.clone(),
            output_scale: self.output_norm.scale.clone(),
            params: self.network.params().as_slice().to_vec(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Message(
            format!("model serialization failed: {e}"),
        ))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::MalformedModel {
            detail: e.to_string(),
        })?;
        let mut network = MlpNetwork::new(&file.sizes, 0).map_err(|_| Error::MalformedModel {
            detail: format!("invalid layer sizes {:?}", file.sizes),
        })?;
        let params = DVector::from_vec(file.params);
        network
            .set_params(&params)
            .map_err(|_| Error::MalformedModel {
                detail: "parameter count does not match layer sizes".into(),
            })?;
        let input_dim = network.input_dim();
        let output_dim = network.output_dim();
        if file.input_mean.len() != input_dim
            || file.input_scale.len() != input_dim
            || file.output_mean.len() != output_dim
            || file.output_scale.len() != output_dim
        {
            return Err(Error::MalformedModel {
                detail: "normalization statistics do not match layer sizes".into(),
            });
        }
        if file
            .input_scale
            .iter()
            .chain(&file.output_scale)
            .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::MalformedModel {
                detail: "normalization scales must be positive".into(),
            });
        }
        Ok(Self {
            network,
            input_norm: Normalization {
                mean: file.input_mean,
                scale: file.input_scale,
            },
            output_norm: Normalization {
                mean: file.output_mean,
                scale: file.output_scale,
            },
            layout_hash: file.layout_hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy_layout(r: usize, o: usize) -> LayoutMeta {
        LayoutMeta {
            edge_lengths: vec![o],
            k_per_edge: 1,
            input_dim: r,
        }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic_bounded_and_seed_sensitive() {
        let a = MlpNetwork::new(&[3, 5, 2], 11).unwrap();
        let b = MlpNetwork::new(&[3, 5, 2], 11).unwrap();
        let c = MlpNetwork::new(&[3, 5, 2], 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        let lim0 = (6.0f64 / 8.0).sqrt();
        for v in a.weights[0].iter() {
            assert!(v.abs() <= lim0);
        }
        for v in a.biases.iter().flat_map(|b| b.iter()) {
            assert_eq!(*v, 0.0);
        }
        assert_eq!(a.param_count(), 3 * 5 + 5 + 5 * 2 + 2);
    }

    #[test]
    fn forward_batching_consistent_and_linear_at_small_weights() {
        let net = MlpNetwork::new(&[3, 4, 2], 5).unwrap();
        let batch = random_matrix(3, 6, 1);
        let full = net.forward(&batch).unwrap();
        for j in 0..6 {
            let single = net.forward(&DMatrix::from_column_slice(3, 1, batch.column(j).as_slice()))
                .unwrap();
            assert_abs_diff_eq!(
                (full.column(j) - single.column(0)).norm(),
                0.0,
                epsilon = 0.0
            );
        }
        // Tiny weights put tanh in its linear region: f(a+b) ~ f(a)+f(b)-f(0).
        let mut small = net.clone();
        let scaled = small.params() * 1e-6;
        small.set_params(&scaled).unwrap();
        let a = DMatrix::from_column_slice(3, 1, &[0.3, -0.2, 0.5]);
        let b = DMatrix::from_column_slice(3, 1, &[-0.1, 0.4, 0.2]);
        let ab = &a + &b;
        let zero = DMatrix::zeros(3, 1);
        let f = |m: &DMatrix<f64>| small.forward(m).unwrap();
        let dev = (f(&ab) + f(&zero) - f(&a) - f(&b)).norm();
        assert!(dev <= 1e-8, "linearity deviation {dev}");
    }

    #[test]
    fn loss_zero_at_perfect_fit_and_duplication_invariant() {
        let net = MlpNetwork::new(&[2, 3, 2], 9).unwrap();
        let x = random_matrix(2, 5, 2);
        let y = net.forward(&x).unwrap();
        let (mse, grad) = net.loss_and_gradient(&x, &y).unwrap();
        assert_abs_diff_eq!(mse, 0.0, epsilon = 1e-28);
        assert!(grad.norm() <= 1e-14);

        let yy = random_matrix(2, 5, 3);
        let (m1, g1) = net.loss_and_gradient(&x, &yy).unwrap();
        let x2 = DMatrix::from_fn(2, 10, |i, j| x[(i, j % 5)]);
        let y2 = DMatrix::from_fn(2, 10, |i, j| yy[(i, j % 5)]);
        let (m2, g2) = net.loss_and_gradient(&x2, &y2).unwrap();
        assert_abs_diff_eq!(m1, m2, epsilon = 1e-15);
        assert!((g1 - g2).norm() <= 1e-14);
    }

    #[test]
    fn backprop_matches_central_differences() {
        let mut net = MlpNetwork::new(&[3, 4, 5], 21).unwrap();
        let x = random_matrix(3, 7, 31);
        let y = random_matrix(5, 7, 32);
        let (_, grad) = net.loss_and_gradient(&x, &y).unwrap();
        let w0 = net.params();
        let h = 1e-5;
        for idx in 0..w0.len() {
            let mut wp = w0.clone();
            wp[idx] += h;
            net.set_params(&wp).unwrap();
            let (lp, _) = net.loss_and_gradient(&x, &y).unwrap();
            let mut wm = w0.clone();
            wm[idx] -= h;
            net.set_params(&wm).unwrap();
            let (lm, _) = net.loss_and_gradient(&x, &y).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = grad[idx].abs().max(fd.abs()).max(1e-10);
            assert!(
                (grad[idx] - fd).abs() / denom <= 1e-6,
                "component {idx}: backprop {} vs fd {fd}",
                grad[idx]
            );
        }
    }

    #[test]
    fn scg_solves_linear_least_squares() {
        // Affine network (no hidden layer): the cost is convex quadratic and
        // the optimum has a normal-equations closed form.
        let x = random_matrix(3, 20, 41);
        let y = random_matrix(2, 20, 42);
        let mut net = MlpNetwork::new(&[3, 2], 43).unwrap();
        // Floor slightly above the f64 gradient-evaluation plateau (~4e-11).
        let config = TrainConfig {
            grad_min: 1e-10,
            max_epochs: 500,
            ..TrainConfig::default()
        };
        let history = train_scg(&mut net, &x, &y, &config).unwrap();
        assert!(history.converged, "SCG failed to converge on a quadratic");
        // Oracle: least squares on the augmented system [x; 1].
        let m = x.ncols();
        let mut aug = DMatrix::zeros(m, 4);
        for s in 0..m {
            for f in 0..3 {
                aug[(s, f)] = x[(f, s)];
            }
            aug[(s, 3)] = 1.0;
        }
        let theta = aug
            .clone()
            .svd(true, true)
            .solve(&y.transpose(), 1e-14)
            .unwrap(); // 4 x 2
        for out in 0..2 {
            for f in 0..3 {
                assert_abs_diff_eq!(net.weights[0][(out, f)], theta[(f, out)], epsilon = 1e-8);
            }
            assert_abs_diff_eq!(net.biases[0][out], theta[(3, out)], epsilon = 1e-8);
        }
    }

    #[test]
    fn scg_history_monotone_and_stopping_rules() {
        let x = random_matrix(2, 30, 51);
        let y = random_matrix(3, 30, 52);
        let mut net = MlpNetwork::new(&[2, 6, 3], 53).unwrap();
        let history = train_scg(
            &mut net,
            &x,
            &y,
            &TrainConfig {
                grad_min: 1e-9,
                max_epochs: 120,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        for w in history.records.windows(2) {
            assert!(
                w[1].mse <= w[0].mse + 1e-15,
                "loss increased: {} -> {}",
                w[0].mse,
                w[1].mse
            );
        }
        assert_eq!(history.records.first().unwrap().epoch, 0);

        // Huge gradient floor: stops immediately with only the initial record.
        let mut net2 = MlpNetwork::new(&[2, 6, 3], 53).unwrap();
        let early = train_scg(
            &mut net2,
            &x,
            &y,
            &TrainConfig {
                grad_min: 1e9,
                max_epochs: 100,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(early.records.len(), 1);
        assert!(early.converged);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let x = random_matrix(3, 25, 61);
        let y = random_matrix(2, 25, 62);
        let run = || {
            let mut net = MlpNetwork::new(&[3, 5, 2], 63).unwrap();
            let h = train_scg(
                &mut net,
                &x,
                &y,
                &TrainConfig {
                    grad_min: 1e-8,
                    max_epochs: 60,
                    ..TrainConfig::default()
                },
            )
            .unwrap();
            (net.params(), h)
        };
        let (p1, h1) = run();
        let (p2, h2) = run();
        assert_eq!(p1, p2);
        assert_eq!(h1.records.len(), h2.records.len());
        for (a, b) in h1.records.iter().zip(&h2.records) {
            assert_eq!(a.mse.to_bits(), b.mse.to_bits());
            assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
        }
    }

    #[test]
    fn nrmse_formula_cases() {
        // M=1, O=1, residual 2: RMSE = 2, denominator 2, NRMSE = 1.
        let t = DMatrix::from_element(1, 1, 3.0);
        let p = DMatrix::from_element(1, 1, 1.0);
        assert_abs_diff_eq!(nrmse(&t, &p).unwrap(), 1.0, epsilon = 1e-15);
        // Exact predictions: 0 by convention.
        assert_abs_diff_eq!(nrmse(&t, &t).unwrap(), 0.0);
        // Residual scaling by c > 0 cancels.
        let targets = random_matrix(6, 4, 71);
        let resid = random_matrix(6, 4, 72);
        let p1 = &targets + &resid;
        let p2 = &targets + &resid * 37.0;
        assert_abs_diff_eq!(
            nrmse(&targets, &p1).unwrap(),
            nrmse(&targets, &p2).unwrap(),
            epsilon = 1e-13
        );
        assert!(nrmse(&targets, &DMatrix::zeros(5, 4)).is_err());
    }

    #[test]
    fn normalization_round_trip_and_constant_columns() {
        let data = random_matrix(30, 4, 81);
        let norm = Normalization::fit(&data);
        let back = norm.unapply(&norm.apply(&data));
        assert!((&back - &data).norm() <= 1e-12 * data.norm().max(1.0));
        // Normalized columns: zero mean, unit variance.
        let z = norm.apply(&data);
        for c in 0..z.ncols() {
            let mu = z.column(c).sum() / 30.0;
            let var = z.column(c).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 30.0;
            assert_abs_diff_eq!(mu, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);
        }
        // Constant column: scale 1, passes through centered.
        let mut with_const = data.clone();
        with_const.column_mut(2).fill(5.0);
        let norm2 = Normalization::fit(&with_const);
        assert_eq!(norm2.scale[2], 1.0);
        assert_abs_diff_eq!(norm2.mean[2], 5.0, epsilon = 1e-14);
    }

    #[test]
    fn surrogate_zero_network_predicts_target_means() {
        let layout = toy_layout(3, 2);
        let dataset = Dataset {
            inputs: random_matrix(40, 3, 91),
            targets: random_matrix(40, 2, 92),
            layout: layout.clone(),
            sample_seeds: (0..40).collect(),
            config_hash: "test".into(),
        };
        let (mut model, _) = SurrogateModel::train(
            &dataset,
            &[4],
            &TrainConfig {
                grad_min: 1e9, // no training steps; just fit normalization
                max_epochs: 1,
                ..TrainConfig::default()
            },
            7,
        )
        .unwrap();
        let zeros = DVector::zeros(model.network.param_count());
        model.network.set_params(&zeros).unwrap();
        let pred = model.predict(&dataset.inputs).unwrap();
        for s in 0..40 {
            for o in 0..2 {
                assert_abs_diff_eq!(
                    pred[(s, o)],
                    model.output_norm.mean[o],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn model_save_load_round_trip() {
        let layout = toy_layout(3, 4);
        let dataset = Dataset {
            inputs: random_matrix(25, 3, 101),
            targets: random_matrix(25, 4, 102),
            layout: layout.clone(),
            sample_seeds: (0..25).collect(),
            config_hash: "test".into(),
        };
        let (model, _) = SurrogateModel::train(
            &dataset,
            &[5],
            &TrainConfig {
                grad_min: 1e-6,
                max_epochs: 40,
                ..TrainConfig::default()
            },
            13,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = SurrogateModel::load(&path).unwrap();
        assert_eq!(loaded.layout_hash, model.layout_hash);
        assert_eq!(loaded.layout_hash, layout.hash());
        assert_eq!(loaded.network.params(), model.network.params());
        let probe = random_matrix(6, 3, 103);
        let a = model.predict(&probe).unwrap();
        let b = loaded.predict(&probe).unwrap();
        assert_eq!(a, b);

        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(
            SurrogateModel::load(&path),
            Err(Error::MalformedModel { .. })
        ));
    }

    #[test]
    fn layout_hash_depends_on_content() {
        let a = toy_layout(3, 4).hash();
        let b = toy_layout(3, 5).hash();
        let c = toy_layout(3, 4).hash();
        assert_eq!(a, c);
        assert_ne!(a, b);
        assert_eq!(a.len(), 64);
    }
}
