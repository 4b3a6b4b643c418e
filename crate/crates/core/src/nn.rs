//! Dense feed-forward layers with exact reverse-mode gradients and an Adam
//! optimizer. Batches are row-major: one sample per row.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const NNET_MAGIC: &[u8; 8] = b"NNET0001";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        DenseLayer {
            weights: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
            activation,
        }
    }

    /// He-scaled Gaussian weights for ReLU layers, LeCun-scaled otherwise;
    /// zero bias.
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let gain = match activation {
            Activation::Relu => 2.0,
            Activation::Identity => 1.0,
        };
        let scale = (gain / input.max(1) as f64).sqrt();
        let weights =
            Array2::from_shape_simple_fn((output, input), || scale * rng.sample::<f64, _>(StandardNormal));
        DenseLayer {
            weights,
            bias: Array1::zeros(output),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        LayerGrad {
            weights: Array2::zeros(layer.weights.raw_dim()),
            bias: Array1::zeros(layer.bias.len()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Forward intermediates: the input to each layer and each layer's
/// pre-activation.
#[derive(Debug, Clone)]
pub struct GradientTape {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    output_shape: (usize, usize),
}

impl GradientTape {
    /// Pre-activation signs of every ReLU layer, for detecting kink crossings.
    pub fn relu_pattern(&self, layers: &[DenseLayer]) -> Vec<bool> {
        let mut out = Vec::new();
        for (layer, pre) in layers.iter().zip(&self.pre_activations) {
            if layer.activation == Activation::Relu {
                out.extend(pre.iter().map(|&v| v > 0.0));
            }
        }
        out
    }
}

pub fn forward(layers: &[DenseLayer], x: &Array2<f64>) -> Result<(Array2<f64>, GradientTape)> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pres = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for (k, layer) in layers.iter().enumerate() {
        if cur.ncols() != layer.input_dim() {
            return Err(Error::shape(format!(
                "layer {k} expects {} inputs, got {}",
                layer.input_dim(),
                cur.ncols()
            )));
        }
        let pre = cur.dot(&layer.weights.t()) + &layer.bias;
        let out = match layer.activation {
            Activation::Identity => pre.clone(),
            Activation::Relu => pre.mapv(|v| if v > 0.0 { v } else { 0.0 }),
        };
        inputs.push(cur);
        pres.push(pre);
        cur = out;
    }
    let output_shape = cur.dim();
    Ok((
        cur,
        GradientTape {
            inputs,
            pre_activations: pres,
            output_shape,
        },
    ))
}

/// Forward pass without recording intermediates.
pub fn infer(layers: &[DenseLayer], x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut cur = x.clone();
    for (k, layer) in layers.iter().enumerate() {
        if cur.ncols() != layer.input_dim() {
            return Err(Error::shape(format!(
                "layer {k} expects {} inputs, got {}",
                layer.input_dim(),
                cur.ncols()
            )));
        }
        let mut pre = cur.dot(&layer.weights.t()) + &layer.bias;
        if layer.activation == Activation::Relu {
            pre.mapv_inplace(|v| v.max(0.0));
        }
        cur = pre;
    }
    Ok(cur)
}

/// Gradients of a scalar loss with respect to every layer's parameters and
/// to the network input, given `d loss / d output`.
///
/// ReLU uses subgradient 0 at exactly 0.
pub fn backward(
    layers: &[DenseLayer],
    tape: &GradientTape,
    loss_grad: &Array2<f64>,
) -> Result<(Vec<LayerGrad>, Array2<f64>)> {
    if tape.inputs.len() != layers.len() {
        return Err(Error::shape("tape was recorded for a different network"));
    }
    if loss_grad.dim() != tape.output_shape {
        return Err(Error::shape(format!(
            "loss gradient shape {:?} does not match output shape {:?}",
            loss_grad.dim(),
            tape.output_shape
        )));
    }
    let mut grads = Vec::with_capacity(layers.len());
    let mut upstream = loss_grad.clone();
    for k in (0..layers.len()).rev() {
        let layer = &layers[k];
        let mut delta = upstream;
        if layer.activation == Activation::Relu {
            ndarray::Zip::from(&mut delta)
                .and(&tape.pre_activations[k])
                .for_each(|d, &p| {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                });
        }
        let gw = delta.t().dot(&tape.inputs[k]);
        let gb = delta.sum_axis(Axis(0));
        upstream = delta.dot(&layer.weights);
        grads.push(LayerGrad {
            weights: gw,
            bias: gb,
        });
    }
    grads.reverse();
    Ok((grads, upstream))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer over an ordered list of layers.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<LayerGrad>,
    second: Vec<LayerGrad>,
}

impl AdamState {
    pub fn new<'a>(layers: impl IntoIterator<Item = &'a DenseLayer>, config: AdamConfig) -> Self {
        let first: Vec<LayerGrad> = layers.into_iter().map(LayerGrad::zeros_like).collect();
        AdamState {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    /// Apply one update. Gradients must be finite; on error no parameter is
    /// touched.
    pub fn step(&mut self, params: &mut [&mut DenseLayer], grads: &[LayerGrad]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} layers, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.weights.dim() != g.weights.dim() || p.bias.len() != g.bias.len() {
                return Err(Error::shape("gradient shape does not match parameter shape"));
            }
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient in layer {i}")));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= learning_rate * mhat / (vhat.sqrt() + eps);
            }
        };
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            update(
                p.weights.as_slice_mut().expect("standard layout"),
                g.weights.as_slice().expect("standard layout"),
                m.weights.as_slice_mut().expect("standard layout"),
                v.weights.as_slice_mut().expect("standard layout"),
            );
            update(
                p.bias.as_slice_mut().expect("standard layout"),
                g.bias.as_slice().expect("standard layout"),
                m.bias.as_slice_mut().expect("standard layout"),
                v.bias.as_slice_mut().expect("standard layout"),
            );
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Serialization: magic, layer count, then per layer in_dim, out_dim,
// activation code, row-major weights, bias.

pub(crate) fn write_layers(w: &mut Writer, layers: &[DenseLayer]) {
    w.magic(NNET_MAGIC);
    w.u64(layers.len() as u64);
    for l in layers {
        w.u64(l.input_dim() as u64);
        w.u64(l.output_dim() as u64);
        w.u8(l.activation.code());
        w.f64s(l.weights.iter());
        w.f64s(l.bias.iter());
    }
}

pub(crate) fn read_layers(r: &mut Reader) -> Result<Vec<DenseLayer>> {
    r.expect_magic(NNET_MAGIC)?;
    let count = r.dim()?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let input = r.dim()?;
        let output = r.dim()?;
        let code = r.u8()?;
        let activation = Activation::from_code(code)
            .ok_or_else(|| Error::data(format!("unknown activation code {code}")))?;
        let weights = Array2::from_shape_vec((output, input), r.f64s(input * output)?)
            .expect("sized");
        let bias = Array1::from(r.f64s(output)?);
        layers.push(DenseLayer {
            weights,
            bias,
            activation,
        });
    }
    Ok(layers)
}

pub fn encode_layers(layers: &[DenseLayer]) -> Vec<u8> {
    let mut w = Writer::default();
    write_layers(&mut w, layers);
    w.buf
}

pub fn decode_layers(bytes: &[u8]) -> Result<Vec<DenseLayer>> {
    let mut r = Reader::new(bytes, "network");
    let layers = read_layers(&mut r)?;
    r.finish()?;
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn zero_network_outputs_zero() {
        let layers = vec![DenseLayer::zeros(3, 2, Activation::Identity)];
        let (out, _) = forward(&layers, &array![[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(out, array![[0.0, 0.0]]);
    }

    #[test]
    fn relu_identity_weights() {
        let mut l = DenseLayer::zeros(2, 2, Activation::Relu);
        l.weights = Array2::eye(2);
        let (out, _) = forward(&[l], &array![[-1.0, 2.0]]).unwrap();
        assert_eq!(out, array![[0.0, 2.0]]);
    }

    #[test]
    fn output_shape_contract() {
        let mut r = rng::seeded(0);
        let layers = vec![
            DenseLayer::init(4, 6, Activation::Relu, &mut r),
            DenseLayer::init(6, 2, Activation::Identity, &mut r),
        ];
        let x = Array2::ones((3, 4));
        assert_eq!(forward(&layers, &x).unwrap().0.dim(), (3, 2));
        assert!(forward(&layers, &Array2::ones((3, 5))).is_err());
    }

    #[test]
    fn linear_layer_sum_loss_gradient() {
        let mut r = rng::seeded(1);
        let layer = DenseLayer::init(3, 2, Activation::Identity, &mut r);
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]];
        let (out, tape) = forward(&[layer.clone()], &x).unwrap();
        let (grads, gin) = backward(&[layer.clone()], &tape, &Array2::ones(out.raw_dim())).unwrap();
        // dL/dW[o, i] = sum over batch of x[b, i]
        let col_sums = x.sum_axis(Axis(0));
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(grads[0].weights[[o, i]], col_sums[i]);
            }
        }
        assert_eq!(grads[0].bias, array![2.0, 2.0]);
        assert_eq!(gin.row(0).to_owned(), layer.weights.sum_axis(Axis(0)));
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let mut l = DenseLayer::zeros(1, 1, Activation::Relu);
        l.weights[[0, 0]] = 1.0;
        let (_, tape) = forward(&[l.clone()], &array![[0.0]]).unwrap();
        let (grads, gin) = backward(&[l], &tape, &array![[1.0]]).unwrap();
        assert_eq!(grads[0].bias[0], 0.0);
        assert_eq!(gin[[0, 0]], 0.0);
    }

    #[test]
    fn backward_rejects_wrong_shape() {
        let l = DenseLayer::zeros(2, 2, Activation::Identity);
        let (_, tape) = forward(&[l.clone()], &array![[1.0, 1.0]]).unwrap();
        assert!(backward(&[l], &tape, &array![[1.0, 1.0, 1.0]]).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut r = rng::seeded(2);
        let mut l = DenseLayer::init(3, 2, Activation::Relu, &mut r);
        let before = l.clone();
        let mut opt = AdamState::new([&l], AdamConfig::default());
        let g = LayerGrad::zeros_like(&l);
        opt.step(&mut [&mut l], &[g]).unwrap();
        assert_eq!(l, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut l = DenseLayer::zeros(2, 1, Activation::Identity);
        let mut opt = AdamState::new([&l], AdamConfig::default());
        let g = LayerGrad {
            weights: array![[0.3, -2.0]],
            bias: array![5.0],
        };
        opt.step(&mut [&mut l], &[g]).unwrap();
        assert!((l.weights[[0, 0]] + 1e-3).abs() < 1e-9);
        assert!((l.weights[[0, 1]] - 1e-3).abs() < 1e-9);
        assert!((l.bias[0] + 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut l = DenseLayer::zeros(1, 1, Activation::Identity);
        let mut opt = AdamState::new([&l], AdamConfig::default());
        let g = LayerGrad {
            weights: array![[f64::NAN]],
            bias: array![0.0],
        };
        assert!(matches!(opt.step(&mut [&mut l], &[g]), Err(Error::Training(_))));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn adam_minimizes_square() {
        // f(w) = w^2 from w = 1
        let mut l = DenseLayer::zeros(1, 1, Activation::Identity);
        l.bias[0] = 1.0;
        let mut opt = AdamState::new(
            [&l],
            AdamConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
        );
        for _ in 0..200 {
            let g = LayerGrad {
                weights: array![[0.0]],
                bias: array![2.0 * l.bias[0]],
            };
            opt.step(&mut [&mut l], &[g]).unwrap();
        }
        assert!(l.bias[0].abs() < 0.1, "w = {}", l.bias[0]);
    }

    #[test]
    fn layers_roundtrip() {
        let mut r = rng::seeded(3);
        let layers = vec![
            DenseLayer::init(5, 4, Activation::Relu, &mut r),
            DenseLayer::init(4, 3, Activation::Identity, &mut r),
        ];
        let bytes = encode_layers(&layers);
        assert_eq!(&bytes[..8], NNET_MAGIC);
        assert_eq!(decode_layers(&bytes).unwrap(), layers);
    }
}
