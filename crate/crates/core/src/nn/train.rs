use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{backward, forward_traced, ModelSpec, ModelWeights, OUTPUTS};
use super::ops::Mode;
use super::tensor::{Scalar, Tensor};
use crate::dataset::{resize_image, Split, Tub};
use crate::{Error, Result};

/// Samples per gradient work unit. Fixed so the reduction order (and therefore
/// the trained weights) does not depend on the thread count.
const MICRO_BATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Randomly mirror half of the training frames, negating their steering.
    pub augment_flip: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            seed: 0,
            augment_flip: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Indexed supervised samples: an HWC input tensor and `[steering, throttle]`.
pub trait SampleSet: Sync {
    fn len(&self) -> usize;
    fn input<T: Scalar>(&self, index: usize) -> Tensor<T>;
    fn target(&self, index: usize) -> [f64; OUTPUTS];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples held in memory as 8-bit frames, scaled to [0, 1] on access.
#[derive(Debug, Clone)]
pub struct FrameSamples {
    height: usize,
    width: usize,
    frames: Vec<Vec<u8>>,
    targets: Vec<[f64; OUTPUTS]>,
}

impl FrameSamples {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            frames: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn push(&mut self, frame: &crate::sim::ImageFrame, target: [f64; OUTPUTS]) -> Result<()> {
        let frame = resize_image(frame, self.width as u32, self.height as u32)?;
        self.frames.push(frame.pixels);
        self.targets.push(target);
        Ok(())
    }

    /// Loads every record of a tub, resizing frames to the model input.
    pub fn from_tub(tub: &Tub, spec: &ModelSpec) -> Result<Self> {
        if spec.input.channels != 3 {
            return Err(Error::Config("tub frames are RGB; model must take 3 channels".into()));
        }
        let mut out = Self::new(spec.input.height, spec.input.width);
        out.add_tub(tub)?;
        Ok(out)
    }

    pub fn add_tub(&mut self, tub: &Tub) -> Result<()> {
        for (i, r) in tub.records().iter().enumerate() {
            self.push(&tub.read_image(i)?, [r.steering_norm, r.throttle_norm])?;
        }
        Ok(())
    }
}

impl SampleSet for FrameSamples {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn input<T: Scalar>(&self, index: usize) -> Tensor<T> {
        let scale = 1.0 / 255.0;
        let data = self.frames[index]
            .iter()
            .map(|&p| T::of_f64(p as f64 * scale))
            .collect();
        Tensor::from_vec(&[self.height, self.width, 3], data).expect("stored frame size")
    }

    fn target(&self, index: usize) -> [f64; OUTPUTS] {
        self.targets[index]
    }
}

/// Reverses the width axis of an HWC tensor.
fn mirror_hwc<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let &[h, w, c] = t.shape() else {
        return t.clone();
    };
    let src = t.data();
    let mut data = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let i = (y * w + x) * c;
            data.extend_from_slice(&src[i..i + c]);
        }
    }
    Tensor::from_vec(t.shape(), data).expect("same shape")
}

/// SplitMix64 finalizer, used to derive independent per-sample seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed) ^ a) ^ b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub val_steering_mse: f64,
    pub val_throttle_mse: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    /// CSV with columns `epoch,train_mse,val_mse,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{:.3}",
                e.epoch, e.train_mse, e.val_mse, e.seconds
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::file(path, e))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Per-output mean squared error over a set of samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub mse: f64,
    pub steering_mse: f64,
    pub throttle_mse: f64,
}

enum OptimizerState<T> {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
    },
}

/// Mini-batch trainer minimizing the mean squared error over both outputs.
pub struct Trainer<'a, T> {
    spec: &'a ModelSpec,
    weights: ModelWeights<T>,
    config: TrainerConfig,
    state: OptimizerState<T>,
    steps: u64,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(spec: &'a ModelSpec, weights: ModelWeights<T>, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        weights.check_spec(spec)?;
        let state = match config.optimizer {
            Optimizer::Sgd => OptimizerState::Sgd,
            Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let zeros: Vec<_> = weights.tensors().map(|t| Tensor::zeros(t.shape())).collect();
                OptimizerState::Adam {
                    beta1,
                    beta2,
                    epsilon,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        };
        Ok(Self {
            spec,
            weights,
            config,
            state,
            steps: 0,
        })
    }

    pub fn weights(&self) -> &ModelWeights<T> {
        &self.weights
    }

    pub fn into_weights(self) -> ModelWeights<T> {
        self.weights
    }

    /// Sum of squared errors and gradient of the summed loss over one micro-batch.
    fn micro_batch<S: SampleSet>(
        &self,
        samples: &S,
        items: &[(usize, u64)],
        batch_len: usize,
    ) -> Result<(f64, ModelWeights<T>)> {
        let mut grads = self.weights.zeros_like();
        let mut sse = 0.0;
        let norm = T::of_f64(2.0 / (batch_len * OUTPUTS) as f64);
        for &(index, sample_seed) in items {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            let mut input = samples.input::<T>(index);
            let mut target = samples.target(index);
            if self.config.augment_flip && rng.gen::<bool>() {
                input = mirror_hwc(&input);
                target[0] = -target[0];
            }
            let trace = forward_traced(self.spec, &self.weights, input, Mode::Train, &mut rng)?;
            let out = trace.activations.last().expect("output");
            let mut grad_out = Tensor::zeros(&[OUTPUTS]);
            for k in 0..OUTPUTS {
                let err = out.data()[k] - T::of_f64(target[k]);
                sse += err.as_f64() * err.as_f64();
                grad_out.data_mut()[k] = err * norm;
            }
            backward(self.spec, &self.weights, &trace, grad_out, &mut grads)?;
        }
        Ok((sse, grads))
    }

    /// One optimizer step on a batch; returns the batch MSE (before the update).
    ///
    /// `sample_seeds` drive dropout masks and augmentation and must be the same
    /// length as `indices`.
    pub fn train_batch<S: SampleSet>(
        &mut self,
        samples: &S,
        indices: &[usize],
        sample_seeds: &[u64],
    ) -> Result<f64> {
        assert_eq!(indices.len(), sample_seeds.len());
        if indices.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        let items: Vec<(usize, u64)> = indices.iter().copied().zip(sample_seeds.iter().copied()).collect();
        let partials: Vec<Result<(f64, ModelWeights<T>)>> = items
            .par_chunks(MICRO_BATCH)
            .map(|chunk| self.micro_batch(samples, chunk, items.len()))
            .collect();
        let mut total = None::<ModelWeights<T>>;
        let mut sse = 0.0;
        for part in partials {
            let (s, g) = part?;
            sse += s;
            match total.as_mut() {
                None => total = Some(g),
                Some(t) => t.accumulate(&g),
            }
        }
        self.apply(&total.expect("non-empty batch"));
        Ok(sse / (items.len() * OUTPUTS) as f64)
    }

    /// Applies one update `w <- w - lr * step(grad)`.
    pub fn apply(&mut self, grads: &ModelWeights<T>) {
        self.steps += 1;
        let lr = self.config.learning_rate;
        match &mut self.state {
            OptimizerState::Sgd => {
                let lr = T::of_f64(lr);
                for (w, g) in self.weights.tensors_mut().zip(grads.tensors()) {
                    for (wv, &gv) in w.data_mut().iter_mut().zip(g.data()) {
                        *wv -= lr * gv;
                    }
                }
            }
            OptimizerState::Adam {
                beta1,
                beta2,
                epsilon,
                m,
                v,
            } => {
                let t = self.steps as i32;
                let bias1 = 1.0 - beta1.powi(t);
                let bias2 = 1.0 - beta2.powi(t);
                let (b1, b2) = (T::of_f64(*beta1), T::of_f64(*beta2));
                let (c1, c2) = (T::of_f64(1.0 - *beta1), T::of_f64(1.0 - *beta2));
                let step = T::of_f64(lr / bias1);
                let inv_sqrt_bias2 = T::of_f64(1.0 / bias2.sqrt());
                let eps = T::of_f64(*epsilon);
                let tensors = self.weights.tensors_mut().zip(grads.tensors()).zip(m.iter_mut().zip(v.iter_mut()));
                for ((w, g), (m, v)) in tensors {
                    let it = w
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
                    for ((wv, &gv), (mv, vv)) in it {
                        *mv = b1 * *mv + c1 * gv;
                        *vv = b2 * *vv + c2 * gv * gv;
                        *wv -= step * *mv / (vv.sqrt() * inv_sqrt_bias2 + eps);
                    }
                }
            }
        }
    }

    /// Evaluation-mode MSE over `indices`.
    pub fn evaluate<S: SampleSet>(&self, samples: &S, indices: &[usize]) -> Result<Evaluation> {
        evaluate(self.spec, &self.weights, samples, indices)
    }
}

/// Evaluation-mode MSE of `weights` over `indices` (NaN when `indices` is empty).
pub fn evaluate<T: Scalar, S: SampleSet>(
    spec: &ModelSpec,
    weights: &ModelWeights<T>,
    samples: &S,
    indices: &[usize],
) -> Result<Evaluation> {
    let per_chunk: Vec<Result<[f64; OUTPUTS]>> = indices
        .par_chunks(MICRO_BATCH)
        .map(|chunk| {
            let mut sse = [0.0; OUTPUTS];
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            for &i in chunk {
                let out = super::model::forward_tensor(
                    spec,
                    weights,
                    &samples.input::<T>(i),
                    Mode::Eval,
                    &mut rng,
                )?;
                let target = samples.target(i);
                for k in 0..OUTPUTS {
                    sse[k] += (out.data()[k].as_f64() - target[k]).powi(2);
                }
            }
            Ok(sse)
        })
        .collect();
    let mut sse = [0.0; OUTPUTS];
    for part in per_chunk {
        let part = part?;
        for k in 0..OUTPUTS {
            sse[k] += part[k];
        }
    }
    let n = indices.len() as f64;
    Ok(Evaluation {
        mse: (sse[0] + sse[1]) / (2.0 * n),
        steering_mse: sse[0] / n,
        throttle_mse: sse[1] / n,
    })
}

/// Trains a freshly initialized network; see [`train_from`].
pub fn train<S: SampleSet>(
    spec: &ModelSpec,
    samples: &S,
    split: &Split,
    config: &TrainerConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelWeights<f32>, TrainingHistory)> {
    spec.validate()?;
    let init = ModelWeights::<f32>::init_he_uniform(spec, derive_seed(config.seed, 0, 0))?;
    train_from(spec, init, samples, split, config, on_epoch)
}

/// Runs `config.epochs` passes over `split.train`, shuffled per epoch, reporting
/// train and validation MSE after each. Deterministic for a fixed seed.
pub fn train_from<T: Scalar, S: SampleSet>(
    spec: &ModelSpec,
    weights: ModelWeights<T>,
    samples: &S,
    split: &Split,
    config: &TrainerConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelWeights<T>, TrainingHistory)> {
    if split.train.is_empty() {
        return Err(Error::Tub("training split is empty".into()));
    }
    if let Some(&bad) = split.train.iter().chain(&split.val).find(|&&i| i >= samples.len()) {
        return Err(Error::Tub(format!("split index {bad} out of range")));
    }
    let mut trainer = Trainer::new(spec, weights, config.clone())?;
    let mut history = TrainingHistory::default();
    let mut order = split.train.clone();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut shuffle_rng);
        let mut sse = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let seeds: Vec<u64> = (0..batch.len())
                .map(|k| derive_seed(config.seed, epoch as u64, (b * config.batch_size + k) as u64))
                .collect();
            let mse = match trainer.train_batch(samples, batch, &seeds) {
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch }),
                other => other?,
            };
            if !mse.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            sse += mse * batch.len() as f64;
        }
        if !trainer.weights().tensors().all(|t| t.all_finite()) {
            return Err(Error::Diverged { epoch });
        }
        let val = if split.val.is_empty() {
            Evaluation {
                mse: f64::NAN,
                steering_mse: f64::NAN,
                throttle_mse: f64::NAN,
            }
        } else {
            match trainer.evaluate(samples, &split.val) {
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { epoch }),
                other => other?,
            }
        };
        let record = EpochRecord {
            epoch,
            train_mse: sse / order.len() as f64,
            val_mse: val.mse,
            val_steering_mse: val.steering_mse,
            val_throttle_mse: val.throttle_mse,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok((trainer.into_weights(), history))
}
