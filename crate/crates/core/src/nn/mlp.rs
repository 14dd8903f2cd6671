use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::{ParamVector, Tensor};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Architecture of a fully connected classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::InvalidModelSpec("input_dim must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidModelSpec(
                "hidden_dims must be nonempty".into(),
            ));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::InvalidModelSpec("hidden widths must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidModelSpec("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.num_classes);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

/// Mini-batch of inputs and 0-indexed class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} input rows vs {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Multilayer perceptron: `Linear → act → … → Linear`, weights laid out
/// `[out, in]` and named `fc{i}.weight` / `fc{i}.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: ModelSpec,
}

struct Trace {
    // Input to each linear layer (activations), plus pre-activations per layer.
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

impl Mlp {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Glorot-uniform weights drawn from `init_seed`, zero biases.
    pub fn init_params(&self) -> ParamVector {
        self.init_params_with_seed(self.spec.init_seed)
    }

    pub fn init_params_with_seed(&self, seed: u64) -> ParamVector {
        let mut rng = seed::rng(seed);
        let widths = self.spec.widths();
        let mut layers = Vec::with_capacity(2 * (widths.len() - 1));
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            layers.push(Tensor {
                name: format!("fc{i}.weight"),
                shape: vec![fan_out, fan_in],
                values: w,
            });
            layers.push(Tensor::zeros(format!("fc{i}.bias"), vec![fan_out]));
        }
        ParamVector::new(layers)
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        let widths = self.spec.widths();
        let layers = params.layers();
        if layers.len() != 2 * (widths.len() - 1) {
            return Err(Error::DimensionMismatch(format!(
                "expected {} tensors, got {}",
                2 * (widths.len() - 1),
                layers.len()
            )));
        }
        for (i, pair) in widths.windows(2).enumerate() {
            let w = &layers[2 * i];
            let b = &layers[2 * i + 1];
            if w.shape != [pair[1], pair[0]] || b.shape != [pair[1]] {
                return Err(Error::DimensionMismatch(format!(
                    "layer {i}: weight {:?} bias {:?} do not fit {}->{}",
                    w.shape, b.shape, pair[0], pair[1]
                )));
            }
        }
        Ok(())
    }

    fn run(&self, params: &ParamVector, inputs: &Matrix) -> Result<(Matrix, Trace)> {
        self.check_params(params)?;
        if inputs.cols() != self.spec.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "input has {} features, model expects {}",
                inputs.cols(),
                self.spec.input_dim
            )));
        }
        let layers = params.layers();
        let depth = layers.len() / 2;
        let mut trace = Trace {
            inputs: Vec::with_capacity(depth),
            pre: Vec::with_capacity(depth),
        };
        let mut a = inputs.clone();
        for l in 0..depth {
            let w = &layers[2 * l];
            let b = &layers[2 * l + 1];
            let z = a.affine(&w.values, &b.values, w.shape[0]);
            trace.inputs.push(a);
            if l + 1 == depth {
                trace.pre.push(z.clone());
                return Ok((z, trace));
            }
            let act = self.spec.activation;
            let next = Matrix::new(
                z.rows(),
                z.cols(),
                z.data().iter().map(|&v| act.apply(v)).collect(),
            )?;
            trace.pre.push(z);
            a = next;
        }
        unreachable!("model has at least one layer")
    }

    /// Logits `[n × classes]` for every row of `inputs`.
    pub fn forward(&self, params: &ParamVector, inputs: &Matrix) -> Result<Matrix> {
        self.run(params, inputs).map(|(z, _)| z)
    }

    pub fn loss(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        let logits = self.forward(params, &batch.inputs)?;
        cross_entropy(&logits, &batch.labels)
    }

    /// Analytic gradient of the mean cross-entropy with respect to every
    /// parameter.
    pub fn gradient(&self, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        self.gradient_and_loss(params, batch).map(|(g, _)| g)
    }

    pub fn gradient_and_loss(
        &self,
        params: &ParamVector,
        batch: &Batch,
    ) -> Result<(ParamVector, f64)> {
        let (logits, trace) = self.run(params, &batch.inputs)?;
        let n = batch.len();
        let classes = logits.cols();
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::OutOfRange(format!("label {bad} >= {classes}")));
        }
        let loss = cross_entropy(&logits, &batch.labels)?;

        // dL/dz for the output layer: (softmax - onehot) / n.
        let mut delta = softmax_rows(&logits);
        let inv_n = 1.0 / n as f64;
        for (i, &y) in batch.labels.iter().enumerate() {
            let row = delta.row_mut(i);
            row[y] -= 1.0;
            row.iter_mut().for_each(|v| *v *= inv_n);
        }

        let layers = params.layers();
        let depth = layers.len() / 2;
        let mut grads: Vec<Tensor> = params
            .layers()
            .iter()
            .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
            .collect();

        for l in (0..depth).rev() {
            let w = &layers[2 * l];
            let (out, inp) = (w.shape[0], w.shape[1]);
            let a_in = &trace.inputs[l];
            {
                let (gw_part, gb_part) = grads.split_at_mut(2 * l + 1);
                let gw = &mut gw_part[2 * l].values;
                let gb = &mut gb_part[0].values;
                for i in 0..n {
                    let d = delta.row(i);
                    let x = a_in.row(i);
                    for o in 0..out {
                        let dv = d[o];
                        gb[o] += dv;
                        if dv != 0.0 {
                            let gr = &mut gw[o * inp..(o + 1) * inp];
                            for (g, xv) in gr.iter_mut().zip(x) {
                                *g += dv * xv;
                            }
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            // Propagate into the previous layer's pre-activation.
            let z_prev = &trace.pre[l - 1];
            let act = self.spec.activation;
            let mut next = Matrix::zeros(n, inp);
            for i in 0..n {
                let d = delta.row(i);
                let nr = next.row_mut(i);
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    let wr = &w.values[o * inp..(o + 1) * inp];
                    for (nv, wv) in nr.iter_mut().zip(wr) {
                        *nv += dv * wv;
                    }
                }
                let zr = z_prev.row(i);
                let ar = a_in.row(i);
                for j in 0..inp {
                    nr[j] *= act.derivative(zr[j], ar[j]);
                }
            }
            delta = next;
        }
        Ok((ParamVector::new(grads), loss))
    }

    /// Predicted class per row; ties go to the lowest class index.
    pub fn predict(&self, params: &ParamVector, inputs: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(params, inputs)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Mean negative log-softmax of the true class, stabilised by log-sum-exp.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        if y >= row.len() {
            return Err(Error::OutOfRange(format!("label {y} >= {}", row.len())));
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}
