//! Small differentiable classifiers, mini-batch SGD and evaluation.
//!
//! Parameters are stored flat. Multinomial logistic layout: `W (C x D)`
//! row-major, then `b (C)`. One-hidden-layer MLP (tanh) layout:
//! `W1 (H x D)`, `b1 (H)`, `W2 (C x H)`, `b2 (C)`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{ensure_len, Error, Result};
use crate::params::ParamVector;
use crate::seed;

const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Logistic,
    Mlp { hidden: usize },
}

/// Architecture descriptor: everything but the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self {
            arch: Architecture::Logistic,
            input_dim,
            num_classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            arch: Architecture::Mlp { hidden },
            input_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::Argument(
                "model needs input_dim >= 1 and num_classes >= 2".into(),
            ));
        }
        if let Architecture::Mlp { hidden: 0 } = self.arch {
            return Err(Error::Argument("mlp hidden_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, c) = (self.input_dim, self.num_classes);
        match self.arch {
            Architecture::Logistic => (d + 1) * c,
            Architecture::Mlp { hidden: h } => (d + 1) * h + (h + 1) * c,
        }
    }

    /// Uniform initialization in `[-0.05, 0.05]`.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = seed::rng(seed);
        ParamVector::new(
            (0..self.param_count())
                .map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
                .collect(),
        )
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        ensure_len(self.param_count(), params.len())
    }

    fn check_data(&self, data: &LabeledDataset) -> Result<()> {
        ensure_len(self.input_dim, data.dim())?;
        ensure_len(self.num_classes, data.num_classes())
    }

    /// Computes logits for `x` into `logits`; `hidden` is scratch space
    /// (filled with hidden activations for the MLP).
    fn logits_into(&self, params: &[f64], x: &[f64], hidden: &mut Vec<f64>, logits: &mut [f64]) {
        let (d, c) = (self.input_dim, self.num_classes);
        match self.arch {
            Architecture::Logistic => affine(&params[..c * d], &params[c * d..], x, logits),
            Architecture::Mlp { hidden: h } => {
                hidden.resize(h, 0.0);
                let (w1, rest) = params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                affine(w1, b1, x, hidden);
                for a in hidden.iter_mut() {
                    *a = a.tanh();
                }
                affine(w2, b2, hidden, logits);
            }
        }
    }

    /// Accumulates the cross-entropy gradient for one sample into `grad`
    /// and returns the sample loss.
    fn accumulate_gradient(
        &self,
        params: &[f64],
        x: &[f64],
        label: usize,
        scratch: &mut Scratch,
        grad: &mut [f64],
    ) -> f64 {
        let (d, c) = (self.input_dim, self.num_classes);
        scratch.logits.resize(c, 0.0);
        self.logits_into(params, x, &mut scratch.hidden, &mut scratch.logits);
        let loss = log_sum_exp(&scratch.logits) - scratch.logits[label];
        softmax_in_place(&mut scratch.logits);
        let dz = &mut scratch.logits;
        dz[label] -= 1.0;

        match self.arch {
            Architecture::Logistic => {
                let (gw, gb) = grad.split_at_mut(c * d);
                for k in 0..c {
                    let row = &mut gw[k * d..(k + 1) * d];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += dz[k] * xi;
                    }
                    gb[k] += dz[k];
                }
            }
            Architecture::Mlp { hidden: h } => {
                let w2 = &params[h * d + h..h * d + h + c * h];
                let (gw1, rest) = grad.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(c * h);
                let hid = &scratch.hidden;
                scratch.dh.clear();
                scratch.dh.resize(h, 0.0);
                for k in 0..c {
                    let w2_row = &w2[k * h..(k + 1) * h];
                    let g_row = &mut gw2[k * h..(k + 1) * h];
                    for j in 0..h {
                        g_row[j] += dz[k] * hid[j];
                        scratch.dh[j] += w2_row[j] * dz[k];
                    }
                    gb2[k] += dz[k];
                }
                for j in 0..h {
                    let da = scratch.dh[j] * (1.0 - hid[j] * hid[j]);
                    let row = &mut gw1[j * d..(j + 1) * d];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += da * xi;
                    }
                    gb1[j] += da;
                }
            }
        }
        loss
    }
}

#[derive(Default)]
struct Scratch {
    hidden: Vec<f64>,
    logits: Vec<f64>,
    dh: Vec<f64>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        let row = &w[k * d..(k + 1) * d];
        *o = b[k] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// A classifier: architecture plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamVector,
}

impl Model {
    pub fn new(spec: ModelSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        spec.check_params(&params)?;
        Ok(Self { spec, params })
    }

    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        Self::new(spec, ParamVector::zeros(spec.param_count()))
    }

    /// Class probabilities for one input.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        ensure_len(self.spec.input_dim, features.len())?;
        let mut logits = vec![0.0; self.spec.num_classes];
        self.spec
            .logits_into(self.params.as_slice(), features, &mut Vec::new(), &mut logits);
        softmax_in_place(&mut logits);
        Ok(logits)
    }
}

/// Local optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Index of the first epoch; epoch `e` shuffles with a stream derived from
    /// `(seed, e)`, so `E` epochs equal `E` one-epoch calls with increasing
    /// `first_epoch`.
    pub first_epoch: usize,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            learning_rate,
            epochs,
            batch_size,
            seed,
            first_epoch: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // Zero is accepted so that the step size can be switched off in tests.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Argument("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy loss and its gradient over the selected rows.
pub fn loss_and_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &LabeledDataset,
    rows: &[usize],
) -> Result<(f64, ParamVector)> {
    spec.check_params(params)?;
    spec.check_data(data)?;
    if rows.is_empty() {
        return Err(Error::EmptyData("no rows for gradient"));
    }
    let mut grad = vec![0.0; spec.param_count()];
    let mut scratch = Scratch::default();
    let mut loss = 0.0;
    for &i in rows {
        loss += spec.accumulate_gradient(params.as_slice(), data.row(i), data.label(i), &mut scratch, &mut grad);
    }
    let inv = 1.0 / rows.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, ParamVector::new(grad)))
}

/// Runs `cfg.epochs` epochs of mini-batch SGD on the shard's data, starting
/// from `model.params`. The input model is not modified.
pub fn local_train(model: &Model, data: &LabeledDataset, cfg: &TrainConfig) -> Result<ParamVector> {
    cfg.validate()?;
    model.spec.check_data(data)?;
    if data.is_empty() {
        return Err(Error::EmptyData("client shard has no samples"));
    }
    if !model.params.is_finite() {
        return Err(Error::Argument("initial parameters are not finite".into()));
    }
    let spec = &model.spec;
    let mut params = model.params.clone().into_inner();
    let mut grad = vec![0.0; params.len()];
    let mut scratch = Scratch::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in cfg.first_epoch..cfg.first_epoch + cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::stream_rng(cfg.seed, "epoch", &[epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for &i in batch {
                loss += spec.accumulate_gradient(&params, data.row(i), data.label(i), &mut scratch, &mut grad);
            }
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= step * g;
            }
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
    }
    Ok(ParamVector::new(params))
}

/// Mean cross-entropy and argmax accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(spec: &ModelSpec, params: &ParamVector, data: &LabeledDataset) -> Result<Evaluation> {
    spec.check_params(params)?;
    spec.check_data(data)?;
    if data.is_empty() {
        return Err(Error::EmptyData("evaluation dataset is empty"));
    }
    let mut logits = vec![0.0; spec.num_classes];
    let mut hidden = Vec::new();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        spec.logits_into(params.as_slice(), data.row(i), &mut hidden, &mut logits);
        loss += log_sum_exp(&logits) - logits[data.label(i)];
        correct += usize::from(argmax(&logits) == data.label(i));
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

/// Accuracy only; skips the loss computation.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, data: &LabeledDataset) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_data(data)?;
    if data.is_empty() {
        return Err(Error::EmptyData("evaluation dataset is empty"));
    }
    let mut logits = vec![0.0; spec.num_classes];
    let mut hidden = Vec::new();
    let correct = (0..data.len())
        .filter(|&i| {
            spec.logits_into(params.as_slice(), data.row(i), &mut hidden, &mut logits);
            argmax(&logits) == data.label(i)
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    fn toy_data(n: usize, dim: usize, classes: usize, seed: u64) -> LabeledDataset {
        let mut rng = seed::rng(seed);
        let features = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        LabeledDataset::new(features, dim, labels, classes).unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(ModelSpec::logistic(20, 10).param_count(), 210);
        assert_eq!(ModelSpec::mlp(4, 3, 2).param_count(), 5 * 3 + 4 * 2);
    }

    #[test]
    fn zero_params_give_uniform_output() {
        for spec in [ModelSpec::logistic(3, 4), ModelSpec::mlp(3, 5, 4)] {
            let m = Model::zeros(spec).unwrap();
            let p = m.forward(&[0.3, -2.0, 7.0]).unwrap();
            for v in p {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mlp_with_zero_output_layer_is_uniform() {
        let spec = ModelSpec::mlp(3, 5, 4);
        let mut params = spec.init_params(1);
        let start = 3 * 5 + 5;
        params.as_mut_slice()[start..].iter_mut().for_each(|v| *v = 0.0);
        let p = Model::new(spec, params).unwrap().forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn forward_matches_scalar_softmax() {
        let spec = ModelSpec::logistic(3, 4);
        let model = Model::new(spec, spec.init_params(11)).unwrap();
        let x = [0.5, -1.25, 2.0];
        let w = model.params.as_slice();
        let mut z = [0.0; 4];
        for k in 0..4 {
            z[k] = w[12 + k];
            for j in 0..3 {
                z[k] += w[k * 3 + j] * x[j];
            }
        }
        let total: f64 = z.iter().map(|v| v.exp()).sum();
        let p = model.forward(&x).unwrap();
        for k in 0..4 {
            assert!((p[k] - z[k].exp() / total).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let m = Model::zeros(ModelSpec::logistic(3, 2)).unwrap();
        assert!(matches!(
            m.forward(&[1.0]),
            Err(Error::Shape { expected: 3, actual: 1 })
        ));
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let spec = ModelSpec::mlp(4, 3, 3);
        let model = Model::new(spec, spec.init_params(2)).unwrap();
        let data = toy_data(9, 4, 3, 5);
        let out = local_train(&model, &data, &TrainConfig::new(0.0, 3, 4, 1)).unwrap();
        assert_eq!(out, model.params);
    }

    #[test]
    fn single_sample_step_matches_hand_gradient() {
        let spec = ModelSpec::logistic(2, 3);
        let params = spec.init_params(4);
        let model = Model::new(spec, params.clone()).unwrap();
        let x = [0.7, -0.2];
        let data = LabeledDataset::new(x.to_vec(), 2, vec![2], 3).unwrap();
        let lr = 0.1;
        let out = local_train(&model, &data, &TrainConfig::new(lr, 1, 1, 0)).unwrap();

        let p = model.forward(&x).unwrap();
        let w = params.as_slice();
        for k in 0..3 {
            let dz = p[k] - if k == 2 { 1.0 } else { 0.0 };
            for j in 0..2 {
                assert!((out[k * 2 + j] - (w[k * 2 + j] - lr * dz * x[j])).abs() < 1e-14);
            }
            assert!((out[6 + k] - (w[6 + k] - lr * dz)).abs() < 1e-14);
        }
    }

    #[test]
    fn training_is_deterministic_and_epoch_composable() {
        let spec = ModelSpec::mlp(4, 6, 3);
        let model = Model::new(spec, spec.init_params(3)).unwrap();
        let data = toy_data(23, 4, 3, 8);
        let cfg = TrainConfig::new(0.05, 3, 5, 77);
        let a = local_train(&model, &data, &cfg).unwrap();
        assert_eq!(a, local_train(&model, &data, &cfg).unwrap());

        let mut stepwise = model.clone();
        for e in 0..3 {
            let one = TrainConfig {
                epochs: 1,
                first_epoch: e,
                ..cfg
            };
            stepwise.params = local_train(&stepwise, &data, &one).unwrap();
        }
        assert_eq!(a, stepwise.params);
    }

    #[test]
    fn empty_shard_and_divergence() {
        let spec = ModelSpec::logistic(2, 2);
        let model = Model::zeros(spec).unwrap();
        let empty = LabeledDataset::new(vec![], 2, vec![], 2).unwrap();
        let cfg = TrainConfig::new(0.1, 1, 1, 0);
        assert!(matches!(local_train(&model, &empty, &cfg), Err(Error::EmptyData(_))));

        let data = LabeledDataset::new(vec![1e200, -1e200], 2, vec![1], 2).unwrap();
        let err = local_train(&model, &data, &TrainConfig::new(1e200, 4, 1, 0)).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 0 | 1 }), "{err}");
    }

    #[test]
    fn zero_params_evaluate_to_ln_c() {
        let data = synth_blobs(10, 7, 12, 1.0, 1).unwrap();
        let spec = ModelSpec::logistic(12, 10);
        let ev = evaluate(&spec, &ParamVector::zeros(spec.param_count()), &data).unwrap();
        assert!((ev.loss - 10f64.ln()).abs() < 1e-9);
        // Ties resolve to class 0.
        let class0 = data.labels().iter().filter(|&&l| l == 0).count();
        assert_eq!(ev.accuracy, class0 as f64 / data.len() as f64);
    }

    #[test]
    fn one_hot_logit_model_is_accurate_on_its_point() {
        let spec = ModelSpec::logistic(2, 3);
        let mut w = vec![0.0; spec.param_count()];
        w[6 + 1] = 5.0;
        let data = LabeledDataset::new(vec![0.1, 0.2], 2, vec![1], 3).unwrap();
        let ev = evaluate(&spec, &ParamVector::new(w), &data).unwrap();
        assert_eq!(ev.accuracy, 1.0);
    }

    #[test]
    fn evaluate_matches_scalar_loop() {
        let spec = ModelSpec::logistic(5, 4);
        let params = spec.init_params(99).scale(40.0);
        let data = toy_data(20, 5, 4, 12);
        let ev = evaluate(&spec, &params, &data).unwrap();

        let w = params.as_slice();
        let (mut loss, mut correct) = (0.0, 0);
        for i in 0..20 {
            let x = data.row(i);
            let mut z = [0.0; 4];
            for k in 0..4 {
                z[k] = w[20 + k];
                for j in 0..5 {
                    z[k] += w[k * 5 + j] * x[j];
                }
            }
            let total: f64 = z.iter().map(|v| v.exp()).sum();
            loss += -(z[data.label(i)].exp() / total).ln();
            let mut best = 0;
            for k in 1..4 {
                if z[k] > z[best] {
                    best = k;
                }
            }
            correct += usize::from(best == data.label(i));
        }
        assert!((ev.loss - loss / 20.0).abs() < 1e-12);
        assert_eq!(ev.accuracy, correct as f64 / 20.0);
        assert_eq!(accuracy(&spec, &params, &data).unwrap(), ev.accuracy);
    }

    #[test]
    fn evaluate_empty_dataset_errors() {
        let spec = ModelSpec::logistic(2, 2);
        let empty = LabeledDataset::new(vec![], 2, vec![], 2).unwrap();
        assert!(evaluate(&spec, &ParamVector::zeros(6), &empty).is_err());
    }

    #[test]
    fn training_reduces_loss_on_own_shard() {
        let mut failures = 0;
        for s in 0..10 {
            let data = toy_data(30, 4, 3, 100 + s);
            let spec = ModelSpec::mlp(4, 8, 3);
            let model = Model::new(spec, spec.init_params(s)).unwrap();
            let before = evaluate(&spec, &model.params, &data).unwrap().loss;
            let after_params = local_train(&model, &data, &TrainConfig::new(0.01, 2, 5, s)).unwrap();
            let after = evaluate(&spec, &after_params, &data).unwrap().loss;
            failures += usize::from(after >= before);
        }
        assert!(failures <= 1, "{failures} seeds failed to reduce loss");
    }

    #[test]
    fn separable_limit_reaches_full_accuracy() {
        let data = synth_blobs(4, 10, 6, 0.0, 2).unwrap();
        let spec = ModelSpec::logistic(6, 4);
        let model = Model::new(spec, spec.init_params(0)).unwrap();
        let trained = local_train(&model, &data, &TrainConfig::new(0.1, 20, 4, 0)).unwrap();
        assert_eq!(evaluate(&spec, &trained, &data).unwrap().accuracy, 1.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        // Relative error |a - n| / max(|a|, |n|, 1e-6); the floor keeps
        // near-zero components from amplifying rounding noise.
        let h = 1e-5;
        for spec in [ModelSpec::logistic(4, 3), ModelSpec::mlp(4, 5, 3)] {
            let data = toy_data(5, 4, 3, 11);
            let rows: Vec<usize> = (0..5).collect();
            let mut rng = seed::rng(12);
            let params = ParamVector::new((0..spec.param_count()).map(|_| rng.random_range(-0.5..0.5)).collect());
            let (_, grad) = loss_and_gradient(&spec, &params, &data, &rows).unwrap();
            for p in 0..spec.param_count() {
                let mut plus = params.clone();
                plus.as_mut_slice()[p] += h;
                let mut minus = params.clone();
                minus.as_mut_slice()[p] -= h;
                let lp = loss_and_gradient(&spec, &plus, &data, &rows).unwrap().0;
                let lm = loss_and_gradient(&spec, &minus, &data, &rows).unwrap().0;
                let numeric = (lp - lm) / (2.0 * h);
                let rel = (grad[p] - numeric).abs() / grad[p].abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "{:?} param {p}: analytic {} numeric {numeric}",
                    spec.arch,
                    grad[p]
                );
            }
        }
    }
}
