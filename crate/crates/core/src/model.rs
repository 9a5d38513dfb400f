//! The factorized architecture: a shared encoder, one private encoder and
//! head per task, and a task discriminator over shared features.
//!
//! Task indices are 1-based throughout; discriminator label 0 is reserved for
//! fake (noise) features.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{self, BlockInfo};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, Parameter};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AclConfig {
    pub input_dim: usize,
    pub shared_hidden: Vec<usize>,
    pub latent_dim_shared: usize,
    pub private_hidden: Vec<usize>,
    pub latent_dim_private: usize,
    pub head_hidden: Vec<usize>,
    pub classes_per_task: usize,
    pub max_tasks: usize,
    pub discriminator_hidden: Vec<usize>,
    pub lambda_adv: f64,
    pub lambda_task: f64,
    pub lambda_diff: f64,
    /// Scale every feature row to unit length (the norm held constant)
    /// and average, rather than sum, the squared entries in the difference
    /// loss.
    pub diff_normalized: bool,
    /// Mean and variance of every coordinate of the fake shared features.
    pub noise_mean: f64,
    pub noise_variance: f64,
}

impl Default for AclConfig {
    /// MNIST-scale sizes: 784→175→128 shared, 784→128 private, 256→28 head
    /// hidden layers, 64→64 discriminator.
    fn default() -> Self {
        Self {
            input_dim: 784,
            shared_hidden: vec![175],
            latent_dim_shared: 128,
            private_hidden: vec![],
            latent_dim_private: 128,
            head_hidden: vec![256, 28],
            classes_per_task: 2,
            max_tasks: 5,
            discriminator_hidden: vec![64, 64],
            lambda_adv: 0.05,
            lambda_task: 1.0,
            lambda_diff: 0.1,
            diff_normalized: true,
            noise_mean: 0.0,
            noise_variance: 1.0,
        }
    }
}

impl AclConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("latent_dim_shared", self.latent_dim_shared),
            ("latent_dim_private", self.latent_dim_private),
            ("max_tasks", self.max_tasks),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        for (key, dims) in [
            ("shared_hidden", &self.shared_hidden),
            ("private_hidden", &self.private_hidden),
            ("head_hidden", &self.head_hidden),
            ("discriminator_hidden", &self.discriminator_hidden),
        ] {
            if dims.contains(&0) {
                return Err(Error::config(key, "hidden widths must be positive"));
            }
        }
        if self.classes_per_task < 2 {
            return Err(Error::config("classes_per_task", "must be at least 2"));
        }
        for (key, v) in [
            ("lambda_adv", self.lambda_adv),
            ("lambda_task", self.lambda_task),
            ("lambda_diff", self.lambda_diff),
            ("noise_variance", self.noise_variance),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Which parts of the architecture exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub shared: bool,
    pub private: bool,
    pub discriminator: bool,
}

impl Components {
    pub const FULL: Components = Components {
        shared: true,
        private: true,
        discriminator: true,
    };

    pub fn validate(&self) -> Result<()> {
        if !self.shared && !self.private {
            return Err(Error::config("switches", "need a shared or a private module"));
        }
        if self.discriminator && !self.shared {
            return Err(Error::config("switches.use_d", "the discriminator requires the shared module"));
        }
        Ok(())
    }
}

impl Default for Components {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone)]
pub struct AclModel {
    config: AclConfig,
    components: Components,
    shared: Option<Mlp>,
    discriminator: Option<Mlp>,
    privates: Vec<Mlp>,
    heads: Vec<Mlp>,
    seen_tasks: usize,
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = Vec::with_capacity(hidden.len() + 2);
    d.push(input);
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

impl AclModel {
    pub fn build(config: AclConfig, seed: u64) -> Result<Self> {
        Self::build_with(config, Components::FULL, seed)
    }

    /// Builds the modules enabled in `components` and the first task's
    /// private encoder and head.
    pub fn build_with(config: AclConfig, components: Components, seed: u64) -> Result<Self> {
        config.validate()?;
        components.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared = components.shared.then(|| {
            Mlp::new(
                &dims(config.input_dim, &config.shared_hidden, config.latent_dim_shared),
                Activation::Identity,
                &mut rng,
            )
        });
        let discriminator = components.discriminator.then(|| {
            Mlp::new(
                &dims(
                    config.latent_dim_shared,
                    &config.discriminator_hidden,
                    config.max_tasks + 1,
                ),
                Activation::Identity,
                &mut rng,
            )
        });
        let mut model = Self {
            config,
            components,
            shared,
            discriminator,
            privates: Vec::new(),
            heads: Vec::new(),
            seen_tasks: 0,
        };
        model.append_task(&mut rng);
        Ok(model)
    }

    fn head_input_dim(&self) -> usize {
        let c = &self.config;
        let p = if self.components.private { c.latent_dim_private } else { 0 };
        let s = if self.components.shared { c.latent_dim_shared } else { 0 };
        p + s
    }

    fn append_task(&mut self, rng: &mut ChaCha8Rng) {
        let c = &self.config;
        if self.components.private {
            self.privates.push(Mlp::new(
                &dims(c.input_dim, &c.private_hidden, c.latent_dim_private),
                Activation::Relu,
                rng,
            ));
        }
        let head = Mlp::new(
            &dims(self.head_input_dim(), &c.head_hidden, c.classes_per_task),
            Activation::Identity,
            rng,
        );
        self.heads.push(head);
        self.seen_tasks += 1;
    }

    /// Freezes the current task's private encoder and head and appends fresh
    /// ones for the next task. Shared and discriminator parameters carry over.
    pub fn grow(&mut self, seed: u64) -> Result<()> {
        if self.seen_tasks >= self.config.max_tasks {
            return Err(Error::Capacity {
                max_tasks: self.config.max_tasks,
            });
        }
        if let Some(p) = self.privates.last_mut() {
            p.set_trainable(false);
        }
        if let Some(h) = self.heads.last_mut() {
            h.set_trainable(false);
        }
        self.append_task(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(())
    }

    pub fn config(&self) -> &AclConfig {
        &self.config
    }

    pub fn components(&self) -> Components {
        self.components
    }

    pub fn seen_tasks(&self) -> usize {
        self.seen_tasks
    }

    pub fn shared(&self) -> Option<&Mlp> {
        self.shared.as_ref()
    }

    pub fn shared_mut(&mut self) -> Option<&mut Mlp> {
        self.shared.as_mut()
    }

    pub fn discriminator(&self) -> Option<&Mlp> {
        self.discriminator.as_ref()
    }

    pub fn discriminator_mut(&mut self) -> Option<&mut Mlp> {
        self.discriminator.as_mut()
    }

    fn check_task(&self, task: usize) -> Result<usize> {
        if task == 0 || task > self.seen_tasks {
            return Err(Error::TaskIndex {
                task,
                seen: self.seen_tasks,
            });
        }
        Ok(task - 1)
    }

    pub fn private(&self, task: usize) -> Result<Option<&Mlp>> {
        let i = self.check_task(task)?;
        Ok(self.privates.get(i))
    }

    pub fn head(&self, task: usize) -> Result<&Mlp> {
        let i = self.check_task(task)?;
        Ok(&self.heads[i])
    }

    pub fn privates(&self) -> &[Mlp] {
        &self.privates
    }

    pub fn heads(&self) -> &[Mlp] {
        &self.heads
    }

    /// The trainable encoder and head of `task` (both frozen once the model
    /// has grown past it).
    pub fn task_modules_mut(&mut self, task: usize) -> Result<(Option<&mut Mlp>, &mut Mlp)> {
        let i = self.check_task(task)?;
        Ok((self.privates.get_mut(i), &mut self.heads[i]))
    }

    // ---- graph-level forward ---------------------------------------------

    pub fn shared_features(&self, g: &mut Graph, x: Var, track: bool) -> Result<Option<Var>> {
        self.shared
            .as_ref()
            .map(|s| s.forward(g, x, track))
            .transpose()
    }

    pub fn private_features(
        &self,
        g: &mut Graph,
        x: Var,
        task: usize,
        track: bool,
    ) -> Result<Option<Var>> {
        self.private(task)?
            .map(|p| p.forward(g, x, track))
            .transpose()
    }

    /// Head `task` applied to `z_P ⊕ z_S` (private columns first).
    pub fn head_logits(
        &self,
        g: &mut Graph,
        private: Option<Var>,
        shared: Option<Var>,
        task: usize,
        track: bool,
    ) -> Result<Var> {
        let input = match (private, shared) {
            (Some(p), Some(s)) => g.concat(p, s)?,
            (Some(p), None) => p,
            (None, Some(s)) => s,
            (None, None) => return Err(Error::Contract("head needs at least one feature block".into())),
        };
        self.head(task)?.forward(g, input, track)
    }

    pub fn task_logits(&self, g: &mut Graph, x: Var, task: usize, track: bool) -> Result<Var> {
        let zs = self.shared_features(g, x, track)?;
        let zp = self.private_features(g, x, task, track)?;
        self.head_logits(g, zp, zs, task, track)
    }

    pub fn discriminator_logits(&self, g: &mut Graph, z: Var, track: bool) -> Result<Var> {
        let d = self
            .discriminator
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no discriminator".into()))?;
        let shape = g.shape(z);
        if shape.len() != 2 || shape[1] != self.config.latent_dim_shared {
            return Err(TensorError::Dimension {
                op: "forward_discriminator",
                lhs: shape.to_vec(),
                rhs: vec![self.config.latent_dim_shared],
            }
            .into());
        }
        d.forward(g, z, track)
    }

    // ---- untracked forward -----------------------------------------------

    /// Class logits `n×C` for inputs of task `task`.
    pub fn forward_task(&self, x: &Tensor, task: usize) -> Result<Tensor> {
        self.check_task(task)?;
        let mut g = Graph::new();
        let vx = g.constant(x);
        let out = self.task_logits(&mut g, vx, task, false)?;
        Ok(g.tensor(out))
    }

    /// Task-label logits `n×(T+1)` for shared features; column 0 is "fake".
    pub fn forward_discriminator(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vz = g.constant(z);
        let out = self.discriminator_logits(&mut g, vz, false)?;
        Ok(g.tensor(out))
    }

    // ---- accounting --------------------------------------------------------

    pub fn shared_param_count(&self) -> usize {
        self.shared.as_ref().map_or(0, Mlp::param_count)
    }

    pub fn discriminator_param_count(&self) -> usize {
        self.discriminator.as_ref().map_or(0, Mlp::param_count)
    }

    /// Parameters added by one task (private encoder plus head).
    pub fn per_task_param_count(&self) -> usize {
        self.privates.first().map_or(0, Mlp::param_count) + self.heads[0].param_count()
    }

    pub fn total_param_count(&self) -> usize {
        self.modules().iter().map(|(_, m)| m.param_count()).sum()
    }

    /// Every module with a stable name, in declaration order.
    pub fn modules(&self) -> Vec<(String, &Mlp)> {
        let mut out = Vec::new();
        if let Some(s) = &self.shared {
            out.push(("shared".to_string(), s));
        }
        if let Some(d) = &self.discriminator {
            out.push(("discriminator".to_string(), d));
        }
        for k in 0..self.seen_tasks {
            if let Some(p) = self.privates.get(k) {
                out.push((format!("private.{}", k + 1), p));
            }
            out.push((format!("head.{}", k + 1), &self.heads[k]));
        }
        out
    }

    fn modules_mut(&mut self) -> Vec<&mut Mlp> {
        let mut out: Vec<&mut Mlp> = Vec::new();
        if let Some(s) = &mut self.shared {
            out.push(s);
        }
        if let Some(d) = &mut self.discriminator {
            out.push(d);
        }
        let mut privates = self.privates.iter_mut();
        for head in self.heads.iter_mut() {
            if let Some(p) = privates.next() {
                out.push(p);
            }
            out.push(head);
        }
        out
    }

    pub fn parameters(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        for (name, m) in self.modules() {
            for (i, layer) in m.layers().iter().enumerate() {
                out.push((format!("{name}.{i}.weight"), &layer.weight));
                out.push((format!("{name}.{i}.bias"), &layer.bias));
            }
        }
        out
    }

    // ---- checkpoints -------------------------------------------------------

    pub fn save(&self, out: impl Write) -> Result<()> {
        let params = self.parameters();
        let trainable: Vec<bool> = params.iter().map(|(_, p)| p.trainable()).collect();
        let blocks: Vec<(BlockInfo, &[f64])> = params
            .iter()
            .map(|(name, p)| {
                (
                    BlockInfo {
                        name: name.clone(),
                        shape: p.value.shape().to_vec(),
                    },
                    p.value.data(),
                )
            })
            .collect();
        let header = json!({
            "kind": "acl-model",
            "version": 1,
            "config": self.config,
            "components": self.components,
            "seen_tasks": self.seen_tasks,
            "trainable": trainable,
        });
        container::write(out, header, &blocks)
    }

    pub fn load(input: impl Read) -> Result<Self> {
        let (header, blocks) = container::read(input)?;
        if header["kind"] != "acl-model" {
            return Err(Error::Format(format!("not a model checkpoint: {}", header["kind"])));
        }
        let config: AclConfig = serde_json::from_value(header["config"].clone())?;
        let components: Components = serde_json::from_value(header["components"].clone())?;
        let seen: usize = serde_json::from_value(header["seen_tasks"].clone())?;
        let trainable: Vec<bool> = serde_json::from_value(header["trainable"].clone())?;
        let mut model = Self::build_with(config, components, 0)?;
        for k in 1..seen {
            model.grow(k as u64)?;
        }
        let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
        if names.len() != blocks.len() || trainable.len() != blocks.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} blocks, architecture needs {}",
                blocks.len(),
                names.len()
            )));
        }
        let mut params: Vec<&mut Parameter> = model
            .modules_mut()
            .into_iter()
            .flat_map(|m| m.parameters_mut())
            .collect();
        for (((p, (info, data)), name), flag) in params
            .iter_mut()
            .zip(blocks)
            .zip(&names)
            .zip(trainable)
        {
            if &info.name != name || info.shape != p.value.shape() {
                return Err(Error::Format(format!(
                    "block {} {:?} does not match {} {:?}",
                    info.name,
                    info.shape,
                    name,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(info.shape, data)?;
            p.set_trainable(flag);
        }
        Ok(model)
    }
}
