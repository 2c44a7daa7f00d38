use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ops::{self, Mode};
use super::tensor::{Scalar, Tensor};
use crate::sim::ImageFrame;
use crate::{Error, Result};

/// Number of regression outputs: steering and throttle.
pub const OUTPUTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    },
    Flatten,
    Dense {
        units: usize,
        activation: Activation,
    },
    Dropout {
        rate: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Architecture of the regression network. Serialized as JSON; the SHA-256 of
/// that canonical serialization is the fingerprint stored in weight files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

impl Default for ModelSpec {
    /// Five strided convolutions followed by three dense layers, dropout 0.1
    /// after every hidden layer, for 120x160 RGB frames.
    fn default() -> Self {
        use Activation::*;
        let conv = |filters, kernel, stride| LayerSpec::Conv2d {
            filters,
            kernel,
            stride,
            activation: Relu,
        };
        let drop = LayerSpec::Dropout { rate: 0.1 };
        Self {
            input: InputShape {
                height: 120,
                width: 160,
                channels: 3,
            },
            layers: vec![
                conv(24, 5, 2),
                drop.clone(),
                conv(32, 5, 2),
                drop.clone(),
                conv(64, 5, 2),
                drop.clone(),
                conv(64, 3, 1),
                drop.clone(),
                conv(64, 3, 1),
                drop.clone(),
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: 100,
                    activation: Relu,
                },
                drop.clone(),
                LayerSpec::Dense {
                    units: 50,
                    activation: Relu,
                },
                drop,
                LayerSpec::Dense {
                    units: OUTPUTS,
                    activation: Linear,
                },
            ],
        }
    }
}

impl ModelSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let spec: ModelSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::file(path, e))
    }

    pub fn conv_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv2d { .. }))
            .count()
    }

    /// Output shape of every layer, validating the stack on the way.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let InputShape {
            height,
            width,
            channels,
        } = self.input;
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Config("model input dimensions must be non-zero".into()));
        }
        let mut shape = vec![height, width, channels];
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    ..
                } => {
                    let &[h, w, _] = shape.as_slice() else {
                        return Err(Error::Config(format!(
                            "layer {i}: conv2d needs a feature map, got {shape:?}"
                        )));
                    };
                    if filters == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: conv2d filters, kernel and stride must be non-zero"
                        )));
                    }
                    if kernel > h || kernel > w {
                        return Err(Error::Config(format!(
                            "layer {i}: {kernel}x{kernel} kernel does not fit {h}x{w}"
                        )));
                    }
                    vec![(h - kernel) / stride + 1, (w - kernel) / stride + 1, filters]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Dense { units, .. } => {
                    if shape.len() != 1 {
                        return Err(Error::Config(format!(
                            "layer {i}: dense needs a flattened input, got {shape:?}"
                        )));
                    }
                    if units == 0 {
                        return Err(Error::Config(format!("layer {i}: dense units must be non-zero")));
                    }
                    vec![units]
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::Config(format!(
                            "layer {i}: dropout rate {rate} outside [0, 1)"
                        )));
                    }
                    shape
                }
            };
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.layer_shapes()?;
        match self.layers.last() {
            Some(LayerSpec::Dense {
                units: OUTPUTS,
                activation: Activation::Linear,
            }) => {}
            _ => {
                return Err(Error::Config(
                    "final layer must be a linear dense layer with 2 outputs".into(),
                ))
            }
        }
        debug_assert_eq!(shapes.last().map(|s| s.as_slice()), Some(&[OUTPUTS][..]));
        Ok(())
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        let canonical = serde_json::to_vec(self).expect("model spec serializes");
        Sha256::digest(&canonical).into()
    }
}

/// Weight and bias of one trainable layer. Conv kernels are `[k, k, c_in, filters]`,
/// dense weights `[units, inputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Trained parameters, indexed by layer position (`None` for parameter-free layers).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub fingerprint: [u8; 32],
    pub layers: Vec<Option<LayerParams<T>>>,
}

impl<T: Scalar> ModelWeights<T> {
    fn build(spec: &ModelSpec, mut init: impl FnMut(&[usize], usize) -> Tensor<T>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes()?;
        let mut in_shape = vec![spec.input.height, spec.input.width, spec.input.channels];
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (layer, out_shape) in spec.layers.iter().zip(&shapes) {
            let params = match *layer {
                LayerSpec::Conv2d {
                    filters, kernel, ..
                } => {
                    let c = in_shape[2];
                    Some(LayerParams {
                        weight: init(&[kernel, kernel, c, filters], kernel * kernel * c),
                        bias: Tensor::zeros(&[filters]),
                    })
                }
                LayerSpec::Dense { units, .. } => Some(LayerParams {
                    weight: init(&[units, in_shape[0]], in_shape[0]),
                    bias: Tensor::zeros(&[units]),
                }),
                _ => None,
            };
            layers.push(params);
            in_shape = out_shape.clone();
        }
        Ok(Self {
            fingerprint: spec.fingerprint(),
            layers,
        })
    }

    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        Self::build(spec, |shape, _| Tensor::zeros(shape))
    }

    /// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
    pub fn init_he_uniform(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(spec, |shape, fan_in| {
            let limit = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::of_f64(rng.gen_range(-limit..limit)))
        })
    }

    /// Zeroed tensors with the same structure, used as gradient accumulators.
    pub fn zeros_like(&self) -> Self {
        Self {
            fingerprint: self.fingerprint,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weight: Tensor::zeros(p.weight.shape()),
                        bias: Tensor::zeros(p.bias.shape()),
                    })
                })
                .collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    /// Mutable views of every parameter tensor in a fixed order.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flatten().flat_map(|p| [&p.weight, &p.bias])
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &ModelWeights<T>) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            fingerprint: self.fingerprint,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weight: p.weight.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
        }
    }

    /// Fails unless these weights were built for `spec`.
    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if self.fingerprint != spec.fingerprint() {
            return Err(Error::FingerprintMismatch);
        }
        Ok(())
    }
}

/// Activations kept from a training-mode forward pass for backpropagation.
pub(crate) struct Trace<T> {
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    pub activations: Vec<Tensor<T>>,
    pub masks: Vec<Option<Vec<T>>>,
}


fn params<T>(weights: &ModelWeights<T>, i: usize) -> Result<&LayerParams<T>> {
    weights
        .layers
        .get(i)
        .and_then(|l| l.as_ref())
        .ok_or_else(|| Error::Shape(format!("missing parameters for layer {i}")))
}

fn apply_activation<T: Scalar>(mut t: Tensor<T>, act: Activation) -> Tensor<T> {
    if act == Activation::Relu {
        ops::relu_in_place(&mut t);
    }
    t
}

fn run_layer<T: Scalar>(
    layer: &LayerSpec,
    index: usize,
    weights: &ModelWeights<T>,
    input: &Tensor<T>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    let out = match *layer {
        LayerSpec::Conv2d {
            stride, activation, ..
        } => {
            let p = params(weights, index)?;
            let z = ops::conv2d_forward(input, &p.weight, &p.bias, stride)?;
            (apply_activation(z, activation), None)
        }
        LayerSpec::Dense { activation, .. } => {
            let p = params(weights, index)?;
            let z = ops::dense_forward(input, &p.weight, &p.bias)?;
            (apply_activation(z, activation), None)
        }
        LayerSpec::Flatten => (input.clone().reshape(&[input.len()])?, None),
        LayerSpec::Dropout { rate } => ops::dropout_with_mask(input, rate, mode, rng)?,
    };
    if !out.0.all_finite() {
        return Err(Error::NonFinite { layer: index });
    }
    Ok(out)
}

fn check_input<T: Scalar>(spec: &ModelSpec, input: &Tensor<T>) -> Result<()> {
    let expect = [spec.input.height, spec.input.width, spec.input.channels];
    if input.shape() != expect {
        return Err(Error::Shape(format!(
            "model expects input {expect:?}, got {:?}",
            input.shape()
        )));
    }
    Ok(())
}

/// Runs the network on an HWC tensor and returns the output vector.
pub fn forward_tensor<T: Scalar>(
    spec: &ModelSpec,
    weights: &ModelWeights<T>,
    input: &Tensor<T>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Tensor<T>> {
    check_input(spec, input)?;
    let mut x = input.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        x = run_layer(layer, i, weights, &x, mode, rng)?.0;
    }
    Ok(x)
}

pub(crate) fn forward_traced<T: Scalar>(
    spec: &ModelSpec,
    weights: &ModelWeights<T>,
    input: Tensor<T>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<Trace<T>> {
    check_input(spec, &input)?;
    let mut activations = Vec::with_capacity(spec.layers.len() + 1);
    let mut masks = Vec::with_capacity(spec.layers.len());
    activations.push(input);
    for (i, layer) in spec.layers.iter().enumerate() {
        let (out, mask) = run_layer(layer, i, weights, &activations[i], mode, rng)?;
        activations.push(out);
        masks.push(mask);
    }
    Ok(Trace { activations, masks })
}

/// Backpropagates `grad_output` through a traced pass, accumulating parameter
/// gradients into `grads`.
pub(crate) fn backward<T: Scalar>(
    spec: &ModelSpec,
    weights: &ModelWeights<T>,
    trace: &Trace<T>,
    grad_output: Tensor<T>,
    grads: &mut ModelWeights<T>,
) -> Result<()> {
    let mut grad = grad_output;
    for (i, layer) in spec.layers.iter().enumerate().rev() {
        let input = &trace.activations[i];
        let output = &trace.activations[i + 1];
        let need_input = i > 0;
        grad = match *layer {
            LayerSpec::Conv2d {
                stride, activation, ..
            } => {
                if activation == Activation::Relu {
                    grad = ops::relu_backward(output, &grad)?;
                }
                let p = params(weights, i)?;
                let g = grads.layers[i].as_mut().expect("grads mirror weights");
                ops::conv2d_backward_accumulate(
                    input,
                    &p.weight,
                    &grad,
                    stride,
                    g.weight.data_mut(),
                    g.bias.data_mut(),
                    need_input,
                )?
            }
            LayerSpec::Dense { activation, .. } => {
                if activation == Activation::Relu {
                    grad = ops::relu_backward(output, &grad)?;
                }
                let p = params(weights, i)?;
                let g = grads.layers[i].as_mut().expect("grads mirror weights");
                ops::dense_backward_accumulate(
                    input,
                    &p.weight,
                    &grad,
                    g.weight.data_mut(),
                    g.bias.data_mut(),
                    need_input,
                )?
            }
            LayerSpec::Flatten => Some(grad.reshape(input.shape())?),
            LayerSpec::Dropout { .. } => Some(ops::dropout_backward(trace.masks[i].as_deref(), grad)),
        }
        .unwrap_or_else(|| Tensor::zeros(&[0]));
    }
    Ok(())
}

/// One forward pass plus the gradient of `sum(grad_output * output)` with respect
/// to every parameter. Dropout masks come from `rng` exactly as in
/// [`forward_tensor`], so a fixed seed gives a fixed, differentiable network.
pub fn parameter_gradients<T: Scalar>(
    spec: &ModelSpec,
    weights: &ModelWeights<T>,
    input: &Tensor<T>,
    grad_output: &Tensor<T>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(Tensor<T>, ModelWeights<T>)> {
    weights.check_spec(spec)?;
    let trace = forward_traced(spec, weights, input.clone(), mode, rng)?;
    let output = trace.activations.last().expect("input is traced").clone();
    if output.shape() != grad_output.shape() {
        return Err(Error::Shape(format!(
            "output gradient shape {:?} does not match output {:?}",
            grad_output.shape(),
            output.shape()
        )));
    }
    let mut grads = weights.zeros_like();
    backward(spec, weights, &trace, grad_output.clone(), &mut grads)?;
    Ok((output, grads))
}

/// HWC tensor of an RGB frame with pixels scaled to [0, 1].
pub fn image_to_tensor<T: Scalar>(image: &ImageFrame) -> Tensor<T> {
    let scale = T::of_f64(1.0 / 255.0);
    let data = image.pixels.iter().map(|&p| T::of_f64(p as f64) * scale).collect();
    Tensor::from_vec(
        &[image.height_px as usize, image.width_px as usize, 3],
        data,
    )
    .expect("frame buffer matches its dimensions")
}

/// Inference on one camera frame: returns `(steering_norm, throttle_norm)`
/// unclamped.
pub fn forward<T: Scalar>(
    spec: &ModelSpec,
    weights: &ModelWeights<T>,
    image: &ImageFrame,
) -> Result<(T, T)> {
    if spec.input.channels != 3
        || image.height_px as usize != spec.input.height
        || image.width_px as usize != spec.input.width
    {
        return Err(Error::Shape(format!(
            "model expects {}x{}x{} frames, got {}x{}x3",
            spec.input.height, spec.input.width, spec.input.channels, image.height_px, image.width_px
        )));
    }
    // Eval mode never draws from the RNG.
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let out = forward_tensor(spec, weights, &image_to_tensor(image), Mode::Eval, &mut rng)?;
    Ok((out.data()[0], out.data()[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input: InputShape {
                height: 7,
                width: 6,
                channels: 2,
            },
            layers: vec![
                LayerSpec::Conv2d {
                    filters: 3,
                    kernel: 3,
                    stride: 1,
                    activation: Activation::Relu,
                },
                LayerSpec::Dropout { rate: 0.3 },
                LayerSpec::Conv2d {
                    filters: 2,
                    kernel: 2,
                    stride: 2,
                    activation: Activation::Relu,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    units: 4,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    units: 2,
                    activation: Activation::Linear,
                },
            ],
        }
    }

    #[test]
    fn default_spec_has_five_convs_and_two_outputs() {
        let spec = ModelSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.conv_layers(), 5);
        let shapes = spec.layer_shapes().unwrap();
        assert_eq!(shapes[8], vec![8, 13, 64]);
        assert_eq!(shapes.last().unwrap(), &vec![2]);
    }

    #[test]
    fn default_forward_emits_two_values() {
        let spec = ModelSpec::default();
        let weights = ModelWeights::<f32>::init_he_uniform(&spec, 1).unwrap();
        let frame = ImageFrame::filled(160, 120, [90, 30, 200]);
        let (s, t) = forward(&spec, &weights, &frame).unwrap();
        assert!(s.is_finite() && t.is_finite());
        let again = forward(&spec, &weights, &frame).unwrap();
        assert_eq!((s, t), again);
    }

    #[test]
    fn zero_weights_output_zero() {
        let spec = ModelSpec::default();
        let weights = ModelWeights::<f32>::zeros(&spec).unwrap();
        let frame = ImageFrame::filled(160, 120, [255, 255, 255]);
        assert_eq!(forward(&spec, &weights, &frame).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn wrong_frame_size_is_rejected() {
        let spec = ModelSpec::default();
        let weights = ModelWeights::<f32>::zeros(&spec).unwrap();
        let frame = ImageFrame::filled(120, 160, [0, 0, 0]);
        assert!(matches!(forward(&spec, &weights, &frame), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_activation_names_layer() {
        let spec = tiny_spec();
        let mut weights = ModelWeights::<f64>::init_he_uniform(&spec, 2).unwrap();
        weights.layers[4].as_mut().unwrap().bias.data_mut()[0] = f64::INFINITY;
        let input = Tensor::full(&[7, 6, 2], 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = forward_tensor(&spec, &weights, &input, Mode::Eval, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NonFinite { layer: 4 }), "{err}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = tiny_spec();
        spec.layers.pop();
        assert!(spec.validate().is_err());

        let mut spec = tiny_spec();
        spec.layers[1] = LayerSpec::Dropout { rate: 1.0 };
        assert!(spec.validate().is_err());

        let mut spec = tiny_spec();
        spec.layers.swap(3, 4);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let a = ModelSpec::default();
        let mut b = ModelSpec::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.layers[1] = LayerSpec::Dropout { rate: 0.2 };
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn whole_network_gradients_match_finite_differences() {
        let spec = tiny_spec();
        let weights = ModelWeights::<f64>::init_he_uniform(&spec, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::from_fn(&[7, 6, 2], |_| rng.gen_range(0.0..1.0));
        let proj = Tensor::from_vec(&[2], vec![0.7, -1.3]).unwrap();
        let dropout_seed = 77;

        let loss = |w: &ModelWeights<f64>| {
            let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
            let out = forward_tensor(&spec, w, &input, Mode::Train, &mut r).unwrap();
            out.data()[0] * proj.data()[0] + out.data()[1] * proj.data()[1]
        };

        let mut r = ChaCha8Rng::seed_from_u64(dropout_seed);
        let trace = forward_traced(&spec, &weights, input.clone(), Mode::Train, &mut r).unwrap();
        let mut grads = weights.zeros_like();
        backward(&spec, &weights, &trace, proj.clone(), &mut grads).unwrap();

        let h = 1e-5;
        let mut probe = weights.clone();
        let analytic: Vec<f64> = grads.tensors().flat_map(|t| t.data().to_vec()).collect();
        let mut numeric = Vec::new();
        let n_tensors = probe.tensors().count();
        for ti in 0..n_tensors {
            let len = probe.tensors().nth(ti).unwrap().len();
            for j in 0..len {
                let orig = probe.tensors().nth(ti).unwrap().data()[j];
                probe.tensors_mut().nth(ti).unwrap().data_mut()[j] = orig + h;
                let plus = loss(&probe);
                probe.tensors_mut().nth(ti).unwrap().data_mut()[j] = orig - h;
                let minus = loss(&probe);
                probe.tensors_mut().nth(ti).unwrap().data_mut()[j] = orig;
                numeric.push((plus - minus) / (2.0 * h));
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
            + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(scale > 0.0);
        assert!(diff / scale < 1e-6, "relative error {}", diff / scale);
    }
}

