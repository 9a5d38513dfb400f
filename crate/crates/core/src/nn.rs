//! Linear layers, multi-layer perceptrons and plain SGD.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, Tensor, Var};

/// A trainable array with a stable identity across graph rebuilds.
#[derive(Debug, Clone)]
pub struct Parameter {
    id: ParamId,
    pub value: Tensor,
    trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        Self {
            id: ParamId::fresh(),
            value,
            trainable: true,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Records the parameter on `g`. Frozen parameters, or any parameter when
    /// `track` is false, enter as constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph, track: bool) -> Var {
        if track && self.trainable {
            g.param(self.id, &self.value)
        } else {
            g.constant(&self.value)
        }
    }

    /// Adds the gradient accumulated on `g` (if any) into `value.grad`.
    pub fn pull_grad(&mut self, g: &Graph) -> Result<()> {
        if let Some(grad) = g.param_grad(self.id) {
            self.value.accumulate_grad(&grad)?;
        }
        Ok(())
    }
}

/// Fully connected layer `x · W + b` with `W: in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = glorot_bound(inputs, outputs);
        let data = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: Parameter::new(Tensor::new(vec![inputs, outputs], data).expect("sized")),
            bias: Parameter::new(Tensor::zeros(&[outputs])),
        }
    }

    pub fn seeded(inputs: usize, outputs: usize, seed: u64) -> Self {
        Self::glorot(inputs, outputs, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn trainable(&self) -> bool {
        self.weight.trainable() && self.bias.trainable()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.weight.set_trainable(trainable);
        self.bias.set_trainable(trainable);
    }

    pub fn forward(&self, g: &mut Graph, x: Var, track: bool) -> Result<Var> {
        let w = self.weight.bind(g, track);
        let b = self.bias.bind(g, track);
        let h = g.matmul(x, w)?;
        Ok(g.add_row(h, b)?)
    }

    pub fn param_count(&self) -> usize {
        self.weight.value.numel() + self.bias.value.numel()
    }
}

pub fn glorot_bound(inputs: usize, outputs: usize) -> f64 {
    (6.0 / (inputs + outputs) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

/// Linear layers with ReLU between consecutive layers and an optional
/// activation after the last one.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    terminal: Activation,
}

impl Mlp {
    /// `dims` lists every width from input to output, so `[784, 175, 128]`
    /// is two layers.
    pub fn new(dims: &[usize], terminal: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .map(|w| Linear::glorot(w[0], w[1], rng))
            .collect();
        Self { layers, terminal }
    }

    pub fn from_layers(layers: Vec<Linear>, terminal: Activation) -> Self {
        Self { layers, terminal }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn terminal(&self) -> Activation {
        self.terminal
    }

    pub fn trainable(&self) -> bool {
        self.layers.iter().all(Linear::trainable)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.layers.iter_mut().for_each(|l| l.set_trainable(trainable));
    }

    pub fn forward(&self, g: &mut Graph, x: Var, track: bool) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h, track)?;
            if i < last || self.terminal == Activation::Relu {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Untracked forward pass.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vx = g.constant(x);
        let out = self.forward(&mut g, vx, false)?;
        Ok(g.tensor(out))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn pull_grads(&mut self, g: &Graph) -> Result<()> {
        self.parameters_mut().try_for_each(|p| p.pull_grad(g))
    }

    pub fn clear_grads(&mut self) {
        self.parameters_mut().for_each(|p| p.value.clear_grad());
    }
}

/// Learning-rate schedule that shrinks the rate after the validation loss
/// fails to improve for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauDecay {
    pub factor: f64,
    pub patience: usize,
    #[serde(skip)]
    best: Option<f64>,
    #[serde(skip)]
    stale: usize,
}

impl PlateauDecay {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Feeds one epoch's validation loss; returns the multiplier to apply to
    /// the learning rates (1.0 when no decay is due).
    pub fn observe(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(best) if loss >= best => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.stale = 0;
                    self.best = Some(loss.min(best));
                    return self.factor;
                }
            }
            _ => {
                self.best = Some(loss);
                self.stale = 0;
            }
        }
        1.0
    }

    pub fn reset(&mut self) {
        self.best = None;
        self.stale = 0;
    }
}

impl Default for PlateauDecay {
    fn default() -> Self {
        Self::new(0.8, 3)
    }
}

/// Parameter groups with independent learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Shared,
    Private,
    Discriminator,
}

/// Plain stochastic gradient descent: `θ ← θ − α ∇θ` on trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdOptimizer {
    pub lr_shared: f64,
    pub lr_private: f64,
    pub lr_discriminator: f64,
    pub decay: Option<PlateauDecay>,
}

impl SgdOptimizer {
    pub fn new(lr_shared: f64, lr_private: f64, lr_discriminator: f64) -> Self {
        Self {
            lr_shared,
            lr_private,
            lr_discriminator,
            decay: None,
        }
    }

    pub fn with_decay(mut self, decay: PlateauDecay) -> Self {
        self.decay = Some(decay);
        self
    }

    pub fn rate(&self, group: Group) -> f64 {
        match group {
            Group::Shared => self.lr_shared,
            Group::Private => self.lr_private,
            Group::Discriminator => self.lr_discriminator,
        }
    }

    /// Updates every trainable parameter with its gradient, then clears all
    /// gradients. Frozen parameters keep their values bit-for-bit.
    pub fn step<'a>(
        &self,
        group: Group,
        params: impl IntoIterator<Item = &'a mut Parameter>,
    ) -> Result<()> {
        sgd_step(self.rate(group), params)
    }

    /// Applies the plateau schedule to all groups. Returns true if the rates
    /// were decayed.
    pub fn end_epoch(&mut self, validation_loss: f64) -> bool {
        let Some(decay) = &mut self.decay else {
            return false;
        };
        let factor = decay.observe(validation_loss);
        if factor != 1.0 {
            self.lr_shared *= factor;
            self.lr_private *= factor;
            self.lr_discriminator *= factor;
            return true;
        }
        false
    }
}

pub fn sgd_step<'a>(lr: f64, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
    for p in params {
        if p.trainable() {
            let Some(grad) = p.value.grad().map(<[f64]>::to_vec) else {
                return Err(Error::Contract(format!(
                    "trainable parameter {:?} of shape {:?} has no gradient",
                    p.id(),
                    p.value.shape()
                )));
            };
            p.value
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .for_each(|(w, g)| *w -= lr * g);
        }
        p.value.clear_grad();
    }
    Ok(())
}
