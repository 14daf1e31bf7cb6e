//! Note predictors trained by minibatch SGD on square loss.
//!
//! Three models map a window of audio to 128 real scores, one per MIDI note:
//! a linear regression on spectral features, a two-layer network whose hidden
//! units are `log(1 + max(0, wᵀx))` on raw samples, and a convolutional
//! variant that shares its filters across positions of a longer window and
//! pools the activations before a linear readout.
//!
//! Everything is `f64`. Matrices are `ndarray` arrays and products go
//! through its single-threaded matrix multiply, so training is bitwise
//! reproducible for a given seed.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Uniform;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::dataset::{LabelVector, Segment};
use crate::dsp::{bin_frequency, featurize_window, spec_window, FeatureKind, Projector};
use crate::error::{Error, Result};

pub const NOTES: usize = 128;

/// Hidden-unit non-linearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// `log(1 + max(0, a))`
    LogRelu,
    /// `max(0, a)`
    Relu,
}

impl Activation {
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::LogRelu => a.max(0.0).ln_1p(),
            Activation::Relu => a.max(0.0),
        }
    }

    // The kink at zero gets subgradient 0.
    fn derivative(self, a: f64) -> f64 {
        if a <= 0.0 {
            0.0
        } else {
            match self {
                Activation::LogRelu => 1.0 / (1.0 + a),
                Activation::Relu => 1.0,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Average,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// `dims × 128`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub feature_kind: FeatureKind,
    /// Samples per input window, before featurization.
    pub window: usize,
    pub use_bias: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    /// `hidden × window`
    pub hidden_weights: Array2<f64>,
    /// `hidden × 128`
    pub output_weights: Array2<f64>,
    pub output_bias: Array1<f64>,
    pub activation: Activation,
    pub use_bias: bool,
}

/// Geometry of the convolutional model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvShape {
    pub input_len: usize,
    pub receptive_field: usize,
    pub conv_stride: usize,
    pub pool_width: usize,
    pub pool_stride: usize,
    pub pool_kind: PoolKind,
}

impl Default for ConvShape {
    fn default() -> Self {
        ConvShape {
            input_len: 16384,
            receptive_field: 2048,
            conv_stride: 8,
            pool_width: 16,
            pool_stride: 8,
            pool_kind: PoolKind::Average,
        }
    }
}

impl ConvShape {
    pub fn conv_positions(&self) -> usize {
        (self.input_len - self.receptive_field) / self.conv_stride + 1
    }

    pub fn pooled_positions(&self) -> usize {
        (self.conv_positions() - self.pool_width) / self.pool_stride + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.receptive_field == 0 || self.conv_stride == 0 || self.pool_width == 0 || self.pool_stride == 0 {
            return Err(Error::invalid("conv sizes and strides must be positive"));
        }
        if self.receptive_field > self.input_len {
            return Err(Error::invalid(format!(
                "receptive field {} exceeds input length {}",
                self.receptive_field, self.input_len
            )));
        }
        if self.pool_width > self.conv_positions() {
            return Err(Error::invalid(format!(
                "pool width {} exceeds the {} conv positions",
                self.pool_width,
                self.conv_positions()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvModel {
    /// `hidden × receptive_field`
    pub filter_weights: Array2<f64>,
    /// `(hidden · pooled_positions) × 128`, rows ordered unit-major.
    pub output_weights: Array2<f64>,
    pub output_bias: Array1<f64>,
    pub shape: ConvShape,
    pub activation: Activation,
    pub use_bias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Mlp,
    Conv,
}

impl ModelKind {
    fn code(self) -> u32 {
        match self {
            ModelKind::Linear => 0,
            ModelKind::Mlp => 1,
            ModelKind::Conv => 2,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "mlp" => Ok(ModelKind::Mlp),
            "conv" => Ok(ModelKind::Conv),
            _ => Err(Error::invalid(format!("unknown model kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Linear(LinearModel),
    Mlp(MlpModel),
    Conv(ConvModel),
}

fn uniform_matrix(rows: usize, cols: usize, a: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(dist))
}

impl LinearModel {
    pub fn new(feature_kind: FeatureKind, window: usize) -> LinearModel {
        let dims = feature_kind.dims(window);
        LinearModel {
            weights: Array2::zeros((dims, NOTES)),
            bias: Array1::zeros(NOTES),
            feature_kind,
            window,
            use_bias: true,
        }
    }
}

impl MlpModel {
    /// Hidden weights uniform in `±1/sqrt(window)`, output weights zero.
    pub fn new(window: usize, hidden: usize, seed: u64) -> MlpModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MlpModel {
            hidden_weights: uniform_matrix(hidden, window, 1.0 / (window as f64).sqrt(), &mut rng),
            output_weights: Array2::zeros((hidden, NOTES)),
            output_bias: Array1::zeros(NOTES),
            activation: Activation::LogRelu,
            use_bias: true,
        }
    }

    fn hidden_pre(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.hidden_weights.t())
    }
}

impl ConvModel {
    pub fn new(shape: ConvShape, hidden: usize, seed: u64) -> Result<ConvModel> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = 1.0 / (shape.receptive_field as f64).sqrt();
        Ok(ConvModel {
            filter_weights: uniform_matrix(hidden, shape.receptive_field, a, &mut rng),
            output_weights: Array2::zeros((hidden * shape.pooled_positions(), NOTES)),
            output_bias: Array1::zeros(NOTES),
            shape,
            activation: Activation::LogRelu,
            use_bias: true,
        })
    }

    fn patches(&self, x: ArrayView1<f64>) -> Array2<f64> {
        let sh = &self.shape;
        let p = sh.conv_positions();
        Array2::from_shape_fn((p, sh.receptive_field), |(i, r)| x[i * sh.conv_stride + r])
    }

    /// Filter responses `positions × hidden` before the non-linearity.
    pub fn pre_activations(&self, x: &[f64]) -> Result<Array2<f64>> {
        check_dim(self.shape.input_len, x.len())?;
        Ok(self.patches(ArrayView1::from(x)).dot(&self.filter_weights.t()))
    }

    /// Non-linear responses `positions × hidden`, before pooling.
    pub fn activations(&self, x: &[f64]) -> Result<Array2<f64>> {
        let act = self.activation;
        Ok(self.pre_activations(x)?.mapv(|a| act.apply(a)))
    }

    /// Pooled features, unit-major, plus the winning position of every max pool.
    fn pool(&self, z: &Array2<f64>) -> (Array1<f64>, Vec<usize>) {
        let sh = &self.shape;
        let (hidden, q) = (z.ncols(), sh.pooled_positions());
        let mut out = Array1::zeros(hidden * q);
        let mut argmax = Vec::new();
        for h in 0..hidden {
            for k in 0..q {
                let cells = z.slice(s![k * sh.pool_stride..k * sh.pool_stride + sh.pool_width, h]);
                out[h * q + k] = match sh.pool_kind {
                    PoolKind::Average => cells.sum() / sh.pool_width as f64,
                    PoolKind::Max => {
                        let mut best = 0;
                        for (i, &v) in cells.iter().enumerate() {
                            if v > cells[best] {
                                best = i;
                            }
                        }
                        argmax.push(k * sh.pool_stride + best);
                        cells[best]
                    }
                };
            }
        }
        (out, argmax)
    }

    fn features(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let width = self.output_weights.nrows();
        let rows: Vec<Array1<f64>> = x
            .outer_iter()
            .into_par_iter()
            .map(|row| {
                let a = self.patches(row).dot(&self.filter_weights.t());
                let act = self.activation;
                self.pool(&a.mapv(|v| act.apply(v))).0
            })
            .collect();
        let mut out = Array2::zeros((x.nrows(), width));
        for (mut dst, src) in out.outer_iter_mut().zip(rows) {
            dst.assign(&src);
        }
        out
    }
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Linear(_) => ModelKind::Linear,
            Model::Mlp(_) => ModelKind::Mlp,
            Model::Conv(_) => ModelKind::Conv,
        }
    }

    /// Length of the input vector `forward` expects.
    pub fn input_dim(&self) -> usize {
        match self {
            Model::Linear(m) => m.weights.nrows(),
            Model::Mlp(m) => m.hidden_weights.ncols(),
            Model::Conv(m) => m.shape.input_len,
        }
    }

    /// Samples of audio consumed per prediction.
    pub fn window(&self) -> usize {
        match self {
            Model::Linear(m) => m.window,
            Model::Mlp(m) => m.hidden_weights.ncols(),
            Model::Conv(m) => m.shape.input_len,
        }
    }

    /// Input vector for one window of raw samples.
    pub fn prepare_input(&self, projector: Option<&mut Projector>, samples: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.window(), samples.len())?;
        match self {
            Model::Linear(m) if m.feature_kind != FeatureKind::Raw => {
                let mut local;
                let proj = match projector {
                    Some(p) => p,
                    None => {
                        local = Projector::new(m.window)?;
                        &mut local
                    }
                };
                let mut out = vec![0.0; self.input_dim()];
                featurize_window(proj, m.feature_kind, samples, &mut out)?;
                Ok(out)
            }
            _ => Ok(samples.to_vec()),
        }
    }

    /// Scores for one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let xm = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
        Ok(self.forward_batch(xm)?.row(0).to_vec())
    }

    /// Scores for every row of `x`.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim(self.input_dim(), x.ncols())?;
        Ok(match self {
            Model::Linear(m) => x.dot(&m.weights) + &m.bias,
            Model::Mlp(m) => {
                let act = m.activation;
                m.hidden_pre(x).mapv(|a| act.apply(a)).dot(&m.output_weights) + &m.output_bias
            }
            Model::Conv(m) => m.features(x).dot(&m.output_weights) + &m.output_bias,
        })
    }

    /// Parameter blocks in a fixed order; the bias block is last.
    fn blocks(&self) -> Vec<&[f64]> {
        fn sl(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        match self {
            Model::Linear(m) => vec![sl(&m.weights), m.bias.as_slice().unwrap()],
            Model::Mlp(m) => vec![sl(&m.hidden_weights), sl(&m.output_weights), m.output_bias.as_slice().unwrap()],
            Model::Conv(m) => vec![sl(&m.filter_weights), sl(&m.output_weights), m.output_bias.as_slice().unwrap()],
        }
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Model::Linear(m) => vec![m.weights.as_slice_mut().unwrap(), m.bias.as_slice_mut().unwrap()],
            Model::Mlp(m) => vec![
                m.hidden_weights.as_slice_mut().unwrap(),
                m.output_weights.as_slice_mut().unwrap(),
                m.output_bias.as_slice_mut().unwrap(),
            ],
            Model::Conv(m) => vec![
                m.filter_weights.as_slice_mut().unwrap(),
                m.output_weights.as_slice_mut().unwrap(),
                m.output_bias.as_slice_mut().unwrap(),
            ],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Sum of squared weights, biases excluded.
    pub fn weight_norm_sq(&self) -> f64 {
        let blocks = self.blocks();
        blocks[..blocks.len() - 1]
            .iter()
            .flat_map(|b| b.iter())
            .map(|w| w * w)
            .sum()
    }

    fn get_flat(&self, mut k: usize) -> f64 {
        for b in self.blocks() {
            if k < b.len() {
                return b[k];
            }
            k -= b.len();
        }
        panic!("parameter index out of range")
    }

    fn set_flat(&mut self, mut k: usize, v: f64) {
        for b in self.blocks_mut() {
            if k < b.len() {
                b[k] = v;
                return;
            }
            k -= b.len();
        }
        panic!("parameter index out of range")
    }

    fn zeros_like(&self) -> Model {
        let mut g = self.clone();
        for b in g.blocks_mut() {
            b.fill(0.0);
        }
        g
    }

    /// `self += alpha * other`; both must have the same shape.
    fn axpy(&mut self, alpha: f64, other: &Model) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    /// Mean square loss over the rows of `x` plus `lambda · ‖W‖²`.
    pub fn batch_loss(&self, x: ArrayView2<f64>, y: ArrayView2<f64>, lambda: f64) -> Result<f64> {
        check_dim(NOTES, y.ncols())?;
        check_dim(x.nrows(), y.nrows())?;
        let r = self.forward_batch(x)? - y;
        let data = r.iter().map(|v| v * v).sum::<f64>() / x.nrows() as f64;
        Ok(data + lambda * self.weight_norm_sq())
    }

    /// Batch loss and its exact gradient, returned as a model of the same
    /// shape holding partial derivatives.
    pub fn loss_and_gradient(&self, x: ArrayView2<f64>, y: ArrayView2<f64>, lambda: f64) -> Result<(f64, Model)> {
        check_dim(self.input_dim(), x.ncols())?;
        check_dim(NOTES, y.ncols())?;
        check_dim(x.nrows(), y.nrows())?;
        let b = x.nrows() as f64;
        let mut grad = self.zeros_like();
        let loss;
        match (self, &mut grad) {
            (Model::Linear(m), Model::Linear(g)) => {
                let r = x.dot(&m.weights) + &m.bias - y;
                loss = r.iter().map(|v| v * v).sum::<f64>() / b;
                let gy = r * (2.0 / b);
                g.weights = x.t().dot(&gy) + &(&m.weights * (2.0 * lambda));
                if m.use_bias {
                    g.bias = gy.sum_axis(Axis(0));
                }
            }
            (Model::Mlp(m), Model::Mlp(g)) => {
                let a = m.hidden_pre(x);
                let act = m.activation;
                let z = a.mapv(|v| act.apply(v));
                let r = z.dot(&m.output_weights) + &m.output_bias - y;
                loss = r.iter().map(|v| v * v).sum::<f64>() / b;
                let gy = r * (2.0 / b);
                g.output_weights = z.t().dot(&gy) + &(&m.output_weights * (2.0 * lambda));
                if m.use_bias {
                    g.output_bias = gy.sum_axis(Axis(0));
                }
                let mut da = gy.dot(&m.output_weights.t());
                Zip::from(&mut da).and(&a).for_each(|d, &av| *d *= act.derivative(av));
                g.hidden_weights = da.t().dot(&x) + &(&m.hidden_weights * (2.0 * lambda));
            }
            (Model::Conv(m), Model::Conv(g)) => {
                let feats = m.features(x);
                let r = feats.dot(&m.output_weights) + &m.output_bias - y;
                loss = r.iter().map(|v| v * v).sum::<f64>() / b;
                let gy = r * (2.0 / b);
                g.output_weights = feats.t().dot(&gy) + &(&m.output_weights * (2.0 * lambda));
                if m.use_bias {
                    g.output_bias = gy.sum_axis(Axis(0));
                }
                let dfeat = gy.dot(&m.output_weights.t());
                let sh = m.shape;
                let q = sh.pooled_positions();
                let hidden = m.filter_weights.nrows();
                let mut gw = &m.filter_weights * (2.0 * lambda);
                for (row, df) in x.outer_iter().zip(dfeat.outer_iter()) {
                    let patches = m.patches(row);
                    let a = patches.dot(&m.filter_weights.t());
                    let act = m.activation;
                    let z = a.mapv(|v| act.apply(v));
                    let argmax = m.pool(&z).1;
                    let mut dz = Array2::<f64>::zeros(a.raw_dim());
                    for h in 0..hidden {
                        for k in 0..q {
                            let d = df[h * q + k];
                            match sh.pool_kind {
                                PoolKind::Average => {
                                    let start = k * sh.pool_stride;
                                    dz.slice_mut(s![start..start + sh.pool_width, h])
                                        .mapv_inplace(|v| v + d / sh.pool_width as f64);
                                }
                                PoolKind::Max => dz[[argmax[h * q + k], h]] += d,
                            }
                        }
                    }
                    Zip::from(&mut dz).and(&a).for_each(|d, &av| *d *= act.derivative(av));
                    gw += &dz.t().dot(&patches);
                }
                g.filter_weights = gw;
            }
            _ => unreachable!("gradient has the model's shape"),
        }
        Ok((loss + lambda * self.weight_norm_sq(), grad))
    }
}

/// Square loss of one prediction plus `lambda · ‖W‖²`.
pub fn loss(y_hat: &[f64], y: &[f64], model: &Model, lambda: f64) -> Result<f64> {
    check_dim(NOTES, y_hat.len())?;
    check_dim(NOTES, y.len())?;
    let data: f64 = y_hat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(data + lambda * model.weight_norm_sq())
}

/// Inputs and 0/1 targets, one row per segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Examples {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub labels: Vec<LabelVector>,
}

impl Examples {
    pub fn new(inputs: Array2<f64>, labels: Vec<LabelVector>) -> Result<Examples> {
        check_dim(inputs.nrows(), labels.len())?;
        let mut targets = Array2::zeros((labels.len(), NOTES));
        for (mut row, l) in targets.outer_iter_mut().zip(&labels) {
            for n in l.notes() {
                row[n as usize] = 1.0;
            }
        }
        Ok(Examples { inputs, targets, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Examples at the given row indices, in that order.
    pub fn select(&self, rows: &[usize]) -> Examples {
        Examples {
            inputs: self.inputs.select(Axis(0), rows),
            targets: self.targets.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Featurizes every segment the way `model` expects. Each window is taken
/// around the segment centre with the model's own length.
pub fn build_examples(model: &Model, audio: &AudioBuffer, segments: &[Segment]) -> Result<Examples> {
    let window = model.window();
    let dim = model.input_dim();
    let half = window / 2;
    let mut inputs = Array2::zeros((segments.len(), dim));
    let needs_projector = matches!(model, Model::Linear(m) if m.feature_kind != FeatureKind::Raw);
    inputs
        .outer_iter_mut()
        .into_par_iter()
        .zip(segments.par_iter())
        .try_for_each_init(
            || needs_projector.then(|| Projector::new(window)).transpose(),
            |proj, (mut row, seg)| -> Result<()> {
                let proj = proj.as_mut().map_err(|e| Error::invalid(e.to_string()))?;
                let start = seg.center_sample.checked_sub(half).filter(|s| s + window <= audio.len()).ok_or_else(|| {
                    Error::invalid(format!(
                        "a {window}-sample window centred at sample {} does not fit in the audio",
                        seg.center_sample
                    ))
                })?;
                let x = model.prepare_input(proj.as_mut(), &audio.samples()[start..start + window])?;
                row.assign(&ArrayView1::from(&x[..]));
                Ok(())
            },
        )?;
    Examples::new(inputs, segments.iter().map(|s| s.labels).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub l2_lambda: f64,
    pub threshold_grid_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 10,
            seed: 0,
            l2_lambda: 0.0,
            threshold_grid_size: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("train.learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.threshold_grid_size == 0 {
            return Err(Error::invalid("train.batch_size, epochs and threshold_grid_size must be positive"));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::invalid("train.l2_lambda must be nonnegative"));
        }
        Ok(())
    }
}

/// Per-epoch losses of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean minibatch loss over each epoch.
    pub train_loss: Vec<f64>,
    /// Loss on the validation examples after each epoch, when given.
    pub val_loss: Vec<f64>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss")?;
        for (e, l) in self.train_loss.iter().enumerate() {
            match self.val_loss.get(e) {
                Some(v) => writeln!(w, "{},{l},{v}", e + 1)?,
                None => writeln!(w, "{},{l},", e + 1)?,
            }
        }
        Ok(())
    }
}

const DIVERGENCE_LOSS: f64 = 1e6;

/// Minibatch SGD on mean square loss. Rows are reshuffled every epoch from
/// a generator seeded with `config.seed`.
pub fn train(model: &mut Model, data: &Examples, validation: Option<&Examples>, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptySegments("training set is empty".into()));
    }
    check_dim(model.input_dim(), data.inputs.ncols())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, rows) in order.chunks(config.batch_size).enumerate() {
            let x = data.inputs.select(Axis(0), rows);
            let y = data.targets.select(Axis(0), rows);
            let (loss, grad) = model.loss_and_gradient(x.view(), y.view(), config.l2_lambda)?;
            let grad_ok = grad.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()));
            if !loss.is_finite() || loss > DIVERGENCE_LOSS || !grad_ok {
                let mut trace = report.train_loss.clone();
                trace.push(loss);
                return Err(Error::Divergence { epoch, batch, loss, trace });
            }
            total += loss * rows.len() as f64;
            model.axpy(-config.learning_rate, &grad);
        }
        let mean = total / data.len() as f64;
        log::debug!("epoch {} loss {mean}", epoch + 1);
        report.train_loss.push(mean);
        if let Some(v) = validation {
            report
                .val_loss
                .push(model.batch_loss(v.inputs.view(), v.targets.view(), config.l2_lambda)?);
        }
    }
    Ok(report)
}

/// Largest relative disagreement between the analytic gradient and central
/// differences, over up to `coordinates` randomly chosen parameters.
pub fn gradient_check(
    model: &Model,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    lambda: f64,
    epsilon: f64,
    coordinates: usize,
    seed: u64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let (_, grad) = model.loss_and_gradient(x, y, lambda)?;
    let n = model.parameter_count();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(coordinates.max(200).min(n));
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for k in idx {
        let w = model.get_flat(k);
        probe.set_flat(k, w + epsilon);
        let up = probe.batch_loss(x, y, lambda)?;
        probe.set_flat(k, w - epsilon);
        let down = probe.batch_loss(x, y, lambda)?;
        probe.set_flat(k, w);
        let f = (up - down) / (2.0 * epsilon);
        let a = grad.get_flat(k);
        worst = worst.max((a - f).abs() / a.abs().max(f.abs()).max(1e-8));
    }
    Ok(worst)
}

/// Notes whose score exceeds `c`.
pub fn predict(scores: &[f64], c: f64) -> LabelVector {
    let mut out = LabelVector::default();
    for (n, &v) in scores.iter().enumerate().take(NOTES) {
        if v > c {
            out.set(n as u8);
        }
    }
    out
}

/// The F1-maximizing threshold over a grid of `grid_size` cell midpoints
/// spanning the score range. Ties go to the smallest threshold.
pub fn select_threshold(scores: ArrayView2<f64>, truths: &[LabelVector], grid_size: usize) -> Result<f64> {
    check_dim(truths.len(), scores.nrows())?;
    if grid_size == 0 {
        return Err(Error::invalid("threshold grid must be non-empty"));
    }
    // (score, is_positive) sorted by score
    let mut pairs: Vec<(f64, bool)> = Vec::with_capacity(scores.len());
    for (row, t) in scores.outer_iter().zip(truths) {
        for (n, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid("non-finite score"));
            }
            pairs.push((v, t.contains(n as u8)));
        }
    }
    let positives = pairs.iter().filter(|p| p.1).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("F1 needs at least one positive label".into()));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut pos_below = Vec::with_capacity(pairs.len() + 1);
    pos_below.push(0usize);
    for p in &pairs {
        pos_below.push(pos_below.last().unwrap() + p.1 as usize);
    }
    let lo = pairs[0].0;
    let hi = pairs[pairs.len() - 1].0;
    if lo == hi {
        // one distinct score: predicting everything beats predicting nothing
        return Ok(lo - 1.0);
    }
    let f1_at = |c: f64| {
        let cut = pairs.partition_point(|p| p.0 <= c);
        let predicted = pairs.len() - cut;
        let tp = positives - pos_below[cut];
        2.0 * tp as f64 / (predicted + positives) as f64
    };
    let step = (hi - lo) / grid_size as f64;
    let mut best = (f64::NEG_INFINITY, lo);
    for k in 0..grid_size {
        let c = lo + (k as f64 + 0.5) * step;
        let f = f1_at(c);
        if f > best.0 {
            best = (f, c);
        }
    }
    Ok(best.1)
}

/// Frequency content of one hidden unit's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSpectrum {
    pub unit: usize,
    pub dominant_hz: f64,
    /// `sqrt` of the spectrogram of the weight vector.
    pub magnitude: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSpectrum {
    pub units: Vec<UnitSpectrum>,
    /// Units left out because their weights are essentially zero.
    pub excluded: usize,
}

/// Magnitude spectrum and dominant non-DC frequency of every hidden unit.
pub fn weight_spectrum(model: &Model, sample_rate: u32) -> Result<WeightSpectrum> {
    let w = match model {
        Model::Mlp(m) => &m.hidden_weights,
        Model::Conv(m) => &m.filter_weights,
        Model::Linear(_) => return Err(Error::invalid("a linear model has no hidden units")),
    };
    let window = w.ncols();
    let mut units = Vec::new();
    let mut excluded = 0;
    for (i, row) in w.outer_iter().enumerate() {
        if row.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8 {
            excluded += 1;
            continue;
        }
        let row = row.to_vec();
        let magnitude: Vec<f64> = spec_window(&row)?.into_iter().map(f64::sqrt).collect();
        let mut k_best = 1;
        for k in 1..magnitude.len() {
            if magnitude[k] > magnitude[k_best] {
                k_best = k;
            }
        }
        units.push(UnitSpectrum {
            unit: i,
            dominant_hz: bin_frequency(k_best, window, sample_rate)?,
            magnitude,
        });
    }
    Ok(WeightSpectrum { units, excluded })
}

const MAGIC: &[u8; 4] = b"NMDL";
const VERSION: u32 = 1;

fn activation_code(a: Activation) -> u32 {
    match a {
        Activation::LogRelu => 0,
        Activation::Relu => 1,
    }
}

/// Serializes a model and its decision threshold (NaN when unset).
pub fn encode_model(model: &Model, threshold: Option<f64>) -> Vec<u8> {
    let mut fields: Vec<u32> = vec![VERSION, model.kind().code()];
    match model {
        Model::Linear(m) => fields.extend([
            m.feature_kind.code(),
            m.window as u32,
            m.weights.nrows() as u32,
            m.use_bias as u32,
        ]),
        Model::Mlp(m) => fields.extend([
            m.hidden_weights.ncols() as u32,
            m.hidden_weights.nrows() as u32,
            activation_code(m.activation),
            m.use_bias as u32,
        ]),
        Model::Conv(m) => fields.extend([
            m.shape.input_len as u32,
            m.shape.receptive_field as u32,
            m.shape.conv_stride as u32,
            m.shape.pool_width as u32,
            m.shape.pool_stride as u32,
            (m.shape.pool_kind == PoolKind::Max) as u32,
            m.filter_weights.nrows() as u32,
            activation_code(m.activation),
            m.use_bias as u32,
        ]),
    }
    let mut out = MAGIC.to_vec();
    for f in fields {
        out.extend(f.to_le_bytes());
    }
    out.extend(threshold.unwrap_or(f64::NAN).to_le_bytes());
    for b in model.blocks() {
        for v in b {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        let s = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            format: "NMDL",
            message: format!("truncated at byte {}", self.pos),
        })?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn format_error(message: impl Into<String>) -> Error {
    Error::Format {
        format: "NMDL",
        message: message.into(),
    }
}

fn decode_activation(code: u32) -> Result<Activation> {
    match code {
        0 => Ok(Activation::LogRelu),
        1 => Ok(Activation::Relu),
        c => Err(format_error(format!("unknown activation code {c}"))),
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<(Model, Option<f64>)> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(format_error("missing NMDL magic"));
    }
    let mut c = Cursor { bytes, pos: 4 };
    let version = c.u32()?;
    if version != VERSION {
        return Err(format_error(format!("unsupported version {version}")));
    }
    let mut model = match c.u32()? {
        0 => {
            let kind = FeatureKind::from_code(c.u32()?).ok_or_else(|| format_error("unknown feature kind"))?;
            let window = c.usize()?;
            let dims = c.usize()?;
            if dims != kind.dims(window) {
                return Err(format_error(format!("{dims} dims do not match {kind} at window {window}")));
            }
            let mut m = LinearModel::new(kind, window);
            m.use_bias = c.u32()? != 0;
            Model::Linear(m)
        }
        1 => {
            let window = c.usize()?;
            let hidden = c.usize()?;
            Model::Mlp(MlpModel {
                hidden_weights: Array2::zeros((hidden, window)),
                output_weights: Array2::zeros((hidden, NOTES)),
                output_bias: Array1::zeros(NOTES),
                activation: decode_activation(c.u32()?)?,
                use_bias: c.u32()? != 0,
            })
        }
        2 => {
            let shape = ConvShape {
                input_len: c.usize()?,
                receptive_field: c.usize()?,
                conv_stride: c.usize()?,
                pool_width: c.usize()?,
                pool_stride: c.usize()?,
                pool_kind: if c.u32()? != 0 { PoolKind::Max } else { PoolKind::Average },
            };
            shape.validate().map_err(|e| format_error(e.to_string()))?;
            let hidden = c.usize()?;
            let mut m = ConvModel::new(shape, hidden, 0)?;
            m.activation = decode_activation(c.u32()?)?;
            m.use_bias = c.u32()? != 0;
            Model::Conv(m)
        }
        k => return Err(format_error(format!("unknown model kind {k}"))),
    };
    let threshold = c.f64()?;
    for block in model.blocks_mut() {
        for v in block.iter_mut() {
            *v = c.f64()?;
        }
    }
    if c.pos != bytes.len() {
        return Err(format_error(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok((model, (!threshold.is_nan()).then_some(threshold)))
}

pub fn write_model(model: &Model, threshold: Option<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(model, threshold)).map_err(|e| Error::io(path, e))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<(Model, Option<f64>)> {
    let path = path.as_ref();
    decode_model(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
