//! Sequential training and evaluation, the ordinary-network baselines, the
//! ablation grid and the replay-size sweep.

mod config;
mod ordinary;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{
    DecayConfig, ExperimentConfig, LearningRates, Method, OrdHead, OrdinaryConfig, Switches,
    ABLATION_ROWS,
};
pub use ordinary::OrdinaryNet;

use crate::data::{load_mnist, Mnist, Samples, TaskDataset};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss_for_d, adv_loss_for_s, diff_loss_for, task_loss, total_loss, Encoded, JointBatch,
    Lambdas,
};
use crate::memory::{assemble, epoch_plan, EpisodicMemory, BYTES_PER_VALUE};
use crate::metrics::{bytes_for_params, megabytes, MetricReport, ResultMatrix};
use crate::model::AclModel;
use crate::nn::{Group, Mlp, PlateauDecay, SgdOptimizer};
use crate::tensor::{Graph, Tensor};

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 2048;

mod stream {
    pub const DATA: u64 = 1;
    pub const MODEL: u64 = 2;
    pub const GROW: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const MEMORY: u64 = 5;
    pub const NOISE: u64 = 6;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for one purpose (`stream`) and index within a run.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(seed ^ splitmix(stream.wrapping_mul(0x1000_0000_01b3) ^ splitmix(index)))
}

/// Builds the task stream of `config` for `seed`, loading MNIST when needed.
pub struct TaskSource {
    mnist: Option<Mnist>,
}

impl TaskSource {
    pub fn for_config(config: &ExperimentConfig, data_dir: &Path) -> Result<Self> {
        let mnist = if config.dataset.needs_mnist() {
            Some(load_mnist(data_dir)?)
        } else {
            None
        };
        Ok(Self { mnist })
    }

    pub fn with_mnist(mnist: Option<Mnist>) -> Self {
        Self { mnist }
    }

    pub fn tasks(&self, config: &ExperimentConfig, seed: u64) -> Result<Vec<TaskDataset>> {
        config
            .dataset
            .build(self.mnist.as_ref(), derive_seed(seed, stream::DATA, 0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    /// Current learning rate of the shared (or ordinary) parameters.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub shared: usize,
    pub discriminator: usize,
    pub per_task: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub method: Method,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub r: ResultMatrix,
    pub metrics: MetricReport,
    pub task_seconds: Vec<f64>,
    pub params: ParamCounts,
    pub arch_bytes: usize,
    pub arch_mb: f64,
    pub memory_bytes: usize,
    pub memory_mb: f64,
    pub epochs: Vec<EpochLog>,
}

impl RunRecord {
    pub fn acc(&self) -> f64 {
        self.metrics.acc
    }

    pub fn bwt(&self) -> Option<f64> {
        self.metrics.bwt
    }

    pub fn write_json(&self, out: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// Called after every epoch with its log entry.
pub type Observer<'a> = &'a mut dyn FnMut(&EpochLog);

/// Runs `config.method` on `tasks` with `seed`.
pub fn run(config: &ExperimentConfig, tasks: &[TaskDataset], seed: u64, on_epoch: Observer) -> Result<RunRecord> {
    match config.method {
        Method::Acl => train_acl(config, tasks, seed, on_epoch),
        Method::OrdFt => train_ord_ft(config, tasks, seed, on_epoch),
        Method::OrdJt => train_joint(config, tasks, seed, false, on_epoch),
        Method::AclJt => train_joint(config, tasks, seed, true, on_epoch),
    }
}

fn check_tasks(config: &ExperimentConfig, tasks: &[TaskDataset]) -> Result<()> {
    config.validate()?;
    if tasks.len() != config.task_count() {
        return Err(Error::Data(format!(
            "config describes {} tasks, {} supplied",
            config.task_count(),
            tasks.len()
        )));
    }
    for (i, t) in tasks.iter().enumerate() {
        if t.task != i + 1 || t.classes != config.model.classes_per_task || t.input_dim() != config.model.input_dim {
            return Err(Error::Data(format!(
                "dataset {} (task {}, {} classes, {} features) does not fit the config",
                i + 1,
                t.task,
                t.classes,
                t.input_dim()
            )));
        }
    }
    Ok(())
}

fn optimizer(config: &ExperimentConfig) -> SgdOptimizer {
    let opt = SgdOptimizer::new(config.lr.shared, config.lr.private, config.lr.discriminator);
    match config.lr_decay {
        Some(d) => opt.with_decay(PlateauDecay::new(d.factor, d.patience)),
        None => opt,
    }
}

fn lambdas(config: &ExperimentConfig) -> Lambdas {
    let m = &config.model;
    Lambdas {
        adv: m.lambda_adv,
        task: m.lambda_task,
        diff: m.lambda_diff,
    }
}

/// Pulls gradients into `module` and takes an SGD step. Modules that
/// received no gradient in this graph (no rows of their task) are left
/// alone.
fn step_module(g: &Graph, opt: &SgdOptimizer, group: Group, module: &mut Mlp) -> Result<()> {
    if !module.trainable() {
        return Ok(());
    }
    module.pull_grads(g)?;
    if module.parameters().all(|p| p.value.grad().is_none()) {
        return Ok(());
    }
    opt.step(group, module.parameters_mut())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `samples` whose argmax logit equals the label, with logits
/// produced chunk by chunk by `logits`.
pub fn accuracy_with(samples: &Samples, mut logits: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = Tensor::new(vec![chunk.len(), samples.dim], samples.gather(chunk))?;
        let z = logits(&x)?;
        let c = z.shape()[1];
        for (r, &i) in chunk.iter().enumerate() {
            if argmax(&z.data()[r * c..(r + 1) * c]) == samples.y[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Mean cross-entropy over `samples`.
pub fn mean_loss_with(samples: &Samples, mut logits: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<f64> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = Tensor::new(vec![chunk.len(), samples.dim], samples.gather(chunk))?;
        let mut g = Graph::new();
        let z = g.constant(&logits(&x)?);
        let labels: Vec<usize> = chunk.iter().map(|&i| samples.y[i]).collect();
        let ce = g.softmax_cross_entropy(z, &labels)?;
        total += g.scalar(ce) * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Test accuracies on tasks `1..=k`, each through its own private encoder
/// and head.
pub fn eval(model: &AclModel, tasks: &[TaskDataset], k: usize) -> Result<Vec<f64>> {
    if model.seen_tasks() < k || tasks.len() < k {
        return Err(Error::Data(format!(
            "cannot evaluate {k} tasks with {} trained and {} test sets",
            model.seen_tasks(),
            tasks.len()
        )));
    }
    tasks[..k]
        .iter()
        .map(|t| accuracy_with(&t.test, |x| model.forward_task(x, t.task)))
        .collect()
}

/// Marks task `k`'s private encoder and head as frozen.
fn freeze_task(model: &mut AclModel, k: usize) -> Result<()> {
    let (p, h) = model.task_modules_mut(k)?;
    if let Some(p) = p {
        p.set_trainable(false);
    }
    h.set_trainable(false);
    Ok(())
}

/// One shared/private update followed by one discriminator update.
/// Returns the combined loss before the step.
fn acl_step(
    model: &mut AclModel,
    batch: &JointBatch,
    current_task: usize,
    config: &ExperimentConfig,
    opt: &SgdOptimizer,
    noise_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let sw = config.switches;
    let mut g = Graph::new();
    let enc = Encoded::new(&mut g, model, batch, true)?;
    let adv = if sw.use_d {
        Some(adv_loss_for_s(&mut g, model, &enc, batch)?)
    } else {
        None
    };
    let task = task_loss(&mut g, model, &enc, batch)?;
    let diff = if sw.use_diff {
        diff_loss_for(
            &mut g,
            &enc,
            current_task,
            config.diff_includes_memory,
            config.model.diff_normalized,
        )?
    } else {
        None
    };
    let total = total_loss(&mut g, lambdas(config), adv, task, diff)?;
    let loss = g.scalar(total);
    if !loss.is_finite() {
        return Err(Error::Tensor(crate::tensor::TensorError::NonFinite("training loss")));
    }
    g.backward(total)?;
    if let Some(s) = model.shared_mut() {
        step_module(&g, opt, Group::Shared, s)?;
    }
    for k in 1..=model.seen_tasks() {
        let (p, h) = model.task_modules_mut(k)?;
        if let Some(p) = p {
            step_module(&g, opt, Group::Private, p)?;
        }
        step_module(&g, opt, Group::Private, h)?;
    }
    drop(g);

    if sw.use_d {
        let mut g = Graph::new();
        let x = g.constant(&batch.x);
        let zs = model
            .shared_features(&mut g, x, false)?
            .ok_or_else(|| Error::Contract("discriminator without shared module".into()))?;
        let ld = adv_loss_for_d(&mut g, model, zs, &batch.t, batch.len(), noise_rng)?;
        g.backward(ld)?;
        let d = model
            .discriminator_mut()
            .ok_or_else(|| Error::Contract("discriminator missing".into()))?;
        step_module(&g, opt, Group::Discriminator, d)?;
    }
    Ok(loss)
}

fn param_counts(model: &AclModel) -> ParamCounts {
    ParamCounts {
        shared: model.shared_param_count(),
        discriminator: model.discriminator_param_count(),
        per_task: model.per_task_param_count(),
        total: model.total_param_count(),
    }
}

struct Finished {
    r: ResultMatrix,
    metrics: MetricReport,
    task_seconds: Vec<f64>,
    params: ParamCounts,
    memory_bytes: usize,
    epochs: Vec<EpochLog>,
}

fn record(config: &ExperimentConfig, seed: u64, f: Finished) -> RunRecord {
    let arch_bytes = bytes_for_params(f.params.total);
    RunRecord {
        experiment: config.name.clone(),
        method: config.method,
        seed,
        config: config.clone(),
        r: f.r,
        metrics: f.metrics,
        task_seconds: f.task_seconds,
        params: f.params,
        arch_bytes,
        arch_mb: megabytes(arch_bytes),
        memory_bytes: f.memory_bytes,
        memory_mb: megabytes(f.memory_bytes),
        epochs: f.epochs,
    }
}

/// Trains the factorized model on `tasks` in order and fills the accuracy
/// matrix row by row.
pub fn train_acl(config: &ExperimentConfig, tasks: &[TaskDataset], seed: u64, on_epoch: Observer) -> Result<RunRecord> {
    check_tasks(config, tasks)?;
    let t_count = tasks.len();
    let sw = config.switches;
    let mut model = AclModel::build_with(
        config.model.clone(),
        sw.components(),
        derive_seed(seed, stream::MODEL, 0),
    )?;
    let budget = if config.replay_enabled() {
        config.samples_per_class * config.model.classes_per_task
    } else {
        0
    };
    let mut memory = EpisodicMemory::new(budget, config.model.classes_per_task)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::SHUFFLE, 0));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::NOISE, 0));
    let mut r = ResultMatrix::new(t_count);
    let mut task_seconds = Vec::with_capacity(t_count);
    let mut logs = Vec::new();

    for (i, data) in tasks.iter().enumerate() {
        let k = i + 1;
        let started = Instant::now();
        let mut work = || -> Result<()> {
            let mut opt = optimizer(config);
            for epoch in 1..=config.epochs {
                let epoch_start = Instant::now();
                let plan = epoch_plan(data.train.len(), memory.len(), config.batch_size, &mut shuffle_rng)?;
                let mut sum = 0.0;
                let mut rows = 0usize;
                for p in &plan {
                    let batch = assemble(p, &data.train, k, &memory)?;
                    sum += acl_step(&mut model, &batch, k, config, &opt, &mut noise_rng)? * batch.len() as f64;
                    rows += batch.len();
                }
                let valid_loss = if data.valid.is_empty() {
                    None
                } else {
                    Some(mean_loss_with(&data.valid, |x| model.forward_task(x, k))?)
                };
                let log = EpochLog {
                    task: k,
                    epoch,
                    train_loss: sum / rows as f64,
                    valid_loss,
                    lr: opt.rate(Group::Shared),
                    seconds: epoch_start.elapsed().as_secs_f64(),
                };
                on_epoch(&log);
                logs.push(log);
                if let Some(v) = valid_loss {
                    opt.end_epoch(v);
                }
            }
            if budget > 0 {
                memory.update(data, derive_seed(seed, stream::MEMORY, k as u64))?;
            }
            freeze_task(&mut model, k)?;
            if k == 1 && config.freeze_shared_after_first_task {
                if let Some(s) = model.shared_mut() {
                    s.set_trainable(false);
                }
            }
            if k < t_count {
                model.grow(derive_seed(seed, stream::GROW, k as u64))?;
            }
            for (j, a) in eval(&model, tasks, k)?.into_iter().enumerate() {
                r.set(k, j + 1, a)?;
            }
            Ok(())
        };
        work().map_err(|e| e.in_task(k))?;
        task_seconds.push(started.elapsed().as_secs_f64());
    }

    Ok(record(
        config,
        seed,
        Finished {
            metrics: MetricReport::from_matrix(&r, config.structural_zero())?,
            r,
            task_seconds,
            params: param_counts(&model),
            memory_bytes: memory.bytes(BYTES_PER_VALUE),
            epochs: logs,
        },
    ))
}

fn ordinary_net(config: &ExperimentConfig, tasks: usize, seed: u64) -> OrdinaryNet {
    OrdinaryNet::new(
        config.model.input_dim,
        &config.ordinary.hidden,
        config.model.classes_per_task,
        tasks,
        config.ordinary.head,
        derive_seed(seed, stream::MODEL, 0),
    )
}

fn ord_step(net: &mut OrdinaryNet, batch: &JointBatch, opt: &SgdOptimizer) -> Result<f64> {
    let mut g = Graph::new();
    let loss = net.loss(&mut g, batch)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Tensor(crate::tensor::TensorError::NonFinite("training loss")));
    }
    g.backward(loss)?;
    step_module(&g, opt, Group::Shared, net.body_mut())?;
    Ok(value)
}

/// Fine-tunes one ordinary network through the task sequence with no
/// protection against forgetting. With `use_rb` and a positive
/// `samples_per_class`, batches also draw from a replay memory.
pub fn train_ord_ft(config: &ExperimentConfig, tasks: &[TaskDataset], seed: u64, on_epoch: Observer) -> Result<RunRecord> {
    check_tasks(config, tasks)?;
    let t_count = tasks.len();
    let mut net = ordinary_net(config, t_count, seed);
    let budget = if config.replay_enabled() {
        config.samples_per_class * config.model.classes_per_task
    } else {
        0
    };
    let mut memory = EpisodicMemory::new(budget, config.model.classes_per_task)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::SHUFFLE, 0));
    let mut r = ResultMatrix::new(t_count);
    let mut task_seconds = Vec::with_capacity(t_count);
    let mut logs = Vec::new();

    for (i, data) in tasks.iter().enumerate() {
        let k = i + 1;
        let started = Instant::now();
        let mut work = || -> Result<()> {
            let mut opt = optimizer(config);
            for epoch in 1..=config.epochs {
                let epoch_start = Instant::now();
                let plan = epoch_plan(data.train.len(), memory.len(), config.batch_size, &mut shuffle_rng)?;
                let (mut sum, mut rows) = (0.0, 0usize);
                for p in &plan {
                    let batch = assemble(p, &data.train, k, &memory)?;
                    sum += ord_step(&mut net, &batch, &opt)? * batch.len() as f64;
                    rows += batch.len();
                }
                let valid_loss = if data.valid.is_empty() {
                    None
                } else {
                    Some(mean_loss_with(&data.valid, |x| net.forward_task(x, k))?)
                };
                let log = EpochLog {
                    task: k,
                    epoch,
                    train_loss: sum / rows as f64,
                    valid_loss,
                    lr: opt.rate(Group::Shared),
                    seconds: epoch_start.elapsed().as_secs_f64(),
                };
                on_epoch(&log);
                logs.push(log);
                if let Some(v) = valid_loss {
                    opt.end_epoch(v);
                }
            }
            if budget > 0 {
                memory.update(data, derive_seed(seed, stream::MEMORY, k as u64))?;
            }
            for (j, t) in tasks[..k].iter().enumerate() {
                let a = accuracy_with(&t.test, |x| net.forward_task(x, t.task))?;
                r.set(k, j + 1, a)?;
            }
            Ok(())
        };
        work().map_err(|e| e.in_task(k))?;
        task_seconds.push(started.elapsed().as_secs_f64());
    }

    let total = net.param_count();
    Ok(record(
        config,
        seed,
        Finished {
            metrics: MetricReport::from_matrix(&r, false)?,
            r,
            task_seconds,
            params: ParamCounts {
                shared: total,
                discriminator: 0,
                per_task: 0,
                total,
            },
            memory_bytes: memory.bytes(BYTES_PER_VALUE),
            epochs: logs,
        },
    ))
}

/// Union of every task's samples, each tagged with its task.
struct JointData {
    x: Vec<f32>,
    y: Vec<usize>,
    t: Vec<usize>,
    dim: usize,
}

impl JointData {
    fn new(tasks: &[TaskDataset], part: impl Fn(&TaskDataset) -> &Samples) -> Self {
        let dim = tasks[0].input_dim();
        let mut out = Self {
            x: Vec::new(),
            y: Vec::new(),
            t: Vec::new(),
            dim,
        };
        for task in tasks {
            let s = part(task);
            out.x.extend_from_slice(&s.x);
            out.y.extend_from_slice(&s.y);
            out.t.extend(std::iter::repeat_n(task.task, s.len()));
        }
        out
    }

    fn len(&self) -> usize {
        self.y.len()
    }

    fn batch(&self, idx: &[usize]) -> Result<JointBatch> {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            x.extend(self.x[i * self.dim..(i + 1) * self.dim].iter().map(|&v| f64::from(v)));
        }
        JointBatch::new(
            Tensor::new(vec![idx.len(), self.dim], x)?,
            idx.iter().map(|&i| self.y[i]).collect(),
            idx.iter().map(|&i| self.t[i]).collect(),
            vec![false; idx.len()],
        )
    }
}

/// Multitask training on the union of all tasks; the accuracy matrix has
/// only its last row set. With `acl_architecture` the factorized model is
/// used with every module trainable, otherwise the ordinary network.
pub fn train_joint(
    config: &ExperimentConfig,
    tasks: &[TaskDataset],
    seed: u64,
    acl_architecture: bool,
    on_epoch: Observer,
) -> Result<RunRecord> {
    check_tasks(config, tasks)?;
    let t_count = tasks.len();
    let train = JointData::new(tasks, |t| &t.train);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::SHUFFLE, 0));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::NOISE, 0));
    let started = Instant::now();
    let mut opt = optimizer(config);
    let mut logs = Vec::new();
    let step_config = ExperimentConfig {
        diff_includes_memory: true,
        ..config.clone()
    };

    enum Net {
        Acl(AclModel),
        Ord(OrdinaryNet),
    }
    let mut net = if acl_architecture {
        let mut m = AclModel::build_with(
            config.model.clone(),
            config.switches.components(),
            derive_seed(seed, stream::MODEL, 0),
        )?;
        for k in 1..t_count {
            m.grow(derive_seed(seed, stream::GROW, k as u64))?;
        }
        for k in 1..=t_count {
            let (p, h) = m.task_modules_mut(k)?;
            if let Some(p) = p {
                p.set_trainable(true);
            }
            h.set_trainable(true);
        }
        Net::Acl(m)
    } else {
        Net::Ord(ordinary_net(config, t_count, seed))
    };
    let logits = |net: &Net, x: &Tensor, task: usize| match net {
        Net::Acl(m) => m.forward_task(x, task),
        Net::Ord(n) => n.forward_task(x, task),
    };

    for epoch in 1..=config.epochs {
        let epoch_start = Instant::now();
        let plan = epoch_plan(train.len(), 0, config.batch_size, &mut shuffle_rng)?;
        let (mut sum, mut rows) = (0.0, 0usize);
        for p in &plan {
            let idx: Vec<usize> = p
                .iter()
                .map(|r| match r {
                    crate::memory::SampleRef::Current(i) => *i,
                    crate::memory::SampleRef::Memory(i) => *i,
                })
                .collect();
            let batch = train.batch(&idx)?;
            let loss = match &mut net {
                Net::Acl(m) => acl_step(m, &batch, 0, &step_config, &opt, &mut noise_rng)?,
                Net::Ord(n) => ord_step(n, &batch, &opt)?,
            };
            sum += loss * batch.len() as f64;
            rows += batch.len();
        }
        let mut valid = 0.0;
        let mut valid_rows = 0;
        for t in tasks.iter().filter(|t| !t.valid.is_empty()) {
            valid += mean_loss_with(&t.valid, |x| logits(&net, x, t.task))? * t.valid.len() as f64;
            valid_rows += t.valid.len();
        }
        let valid_loss = (valid_rows > 0).then(|| valid / valid_rows as f64);
        let log = EpochLog {
            task: t_count,
            epoch,
            train_loss: sum / rows as f64,
            valid_loss,
            lr: opt.rate(Group::Shared),
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
        if let Some(v) = valid_loss {
            opt.end_epoch(v);
        }
    }

    let mut r = ResultMatrix::new(t_count);
    let mut last = Vec::with_capacity(t_count);
    for t in tasks {
        let a = accuracy_with(&t.test, |x| logits(&net, x, t.task))?;
        r.set(t_count, t.task, a)?;
        last.push(a);
    }
    let params = match &net {
        Net::Acl(m) => param_counts(m),
        Net::Ord(n) => ParamCounts {
            shared: n.param_count(),
            discriminator: 0,
            per_task: 0,
            total: n.param_count(),
        },
    };
    // The jointly trained model needs the whole training set at once.
    let memory_bytes = train.x.len() * BYTES_PER_VALUE;
    Ok(record(
        config,
        seed,
        Finished {
            metrics: MetricReport {
                acc: last.iter().sum::<f64>() / t_count as f64,
                bwt: None,
                structural_zero: false,
            },
            r,
            task_seconds: vec![started.elapsed().as_secs_f64()],
            params,
            memory_bytes,
            epochs: logs,
        },
    ))
}

/// Reference accuracies `a*_k`: the configured joint method trained on
/// tasks `1..=k`, scored on task `k`.
pub fn reference_accuracies(config: &ExperimentConfig, tasks: &[TaskDataset], seed: u64) -> Result<Vec<f64>> {
    let acl = config.method != Method::OrdJt;
    (1..=tasks.len())
        .map(|k| {
            let mut c = config.clone();
            shrink_dataset(&mut c, k);
            let rec = train_joint(&c, &tasks[..k], seed, acl, &mut |_| {})?;
            Ok(rec.r.get(k, k).expect("joint run sets its last row"))
        })
        .collect()
}

fn shrink_dataset(config: &mut ExperimentConfig, k: usize) {
    use crate::data::DatasetSpec;
    match &mut config.dataset {
        DatasetSpec::SplitMnist { pairs, .. } => pairs.truncate(k),
        DatasetSpec::PermutedMnist { tasks, .. } | DatasetSpec::Synthetic { tasks, .. } => *tasks = k,
    }
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for one
/// value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }

    /// Percent with two decimals, `62.07(0.51)`.
    pub fn percent(&self) -> String {
        format!("{:.2}({:.2})", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: usize,
    pub switches: Switches,
    pub acc: Summary,
    pub bwt: Summary,
    pub structural_zero: bool,
    pub records: Vec<RunRecord>,
}

/// Runs every ablation row for every seed of `config`. Rows with replay use
/// `samples_per_class` (at least 1).
pub fn run_ablation_grid(
    config: &ExperimentConfig,
    source: &TaskSource,
    on_epoch: Observer,
) -> Result<Vec<AblationRow>> {
    config.validate()?;
    let mut by_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        by_seed.push((seed, source.tasks(config, seed)?));
    }
    ABLATION_ROWS
        .iter()
        .enumerate()
        .map(|(i, &switches)| {
            let mut c = config.clone();
            c.method = Method::Acl;
            c.switches = switches;
            if switches.use_rb {
                c.samples_per_class = c.samples_per_class.max(1);
            }
            let records = by_seed
                .iter()
                .map(|(seed, tasks)| train_acl(&c, tasks, *seed, &mut *on_epoch))
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationRow {
                row: i + 1,
                switches,
                acc: Summary::of(&records.iter().map(RunRecord::acc).collect::<Vec<_>>()),
                bwt: Summary::of(&records.iter().map(|r| r.bwt().unwrap_or(0.0)).collect::<Vec<_>>()),
                structural_zero: c.structural_zero(),
                records,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub samples_per_class: usize,
    pub acc: Summary,
    pub bwt: Summary,
    pub records: Vec<RunRecord>,
}

/// Runs `config` once per replay size in `samples_per_class` (0 disables
/// replay) for every seed.
pub fn replay_sweep(
    config: &ExperimentConfig,
    samples_per_class: &[usize],
    source: &TaskSource,
    on_epoch: Observer,
) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let mut by_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        by_seed.push((seed, source.tasks(config, seed)?));
    }
    samples_per_class
        .iter()
        .map(|&s| {
            let mut c = config.clone();
            c.samples_per_class = s;
            c.switches.use_rb = s > 0;
            let records = by_seed
                .iter()
                .map(|(seed, tasks)| run(&c, tasks, *seed, &mut *on_epoch))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                samples_per_class: s,
                acc: Summary::of(&records.iter().map(RunRecord::acc).collect::<Vec<_>>()),
                bwt: Summary::of(&records.iter().map(|r| r.bwt().unwrap_or(0.0)).collect::<Vec<_>>()),
                records,
            })
        })
        .collect()
}

/// `row,S,P,D,diff,RB,acc_mean,acc_std,bwt_mean,bwt_std`.
pub fn write_ablation_csv(rows: &[AblationRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["row", "S", "P", "D", "diff", "RB", "acc_mean", "acc_std", "bwt_mean", "bwt_std"])
        .map_err(csv_err)?;
    for r in rows {
        let s = r.switches;
        let flag = |b: bool| if b { "x" } else { "" }.to_string();
        w.write_record([
            r.row.to_string(),
            flag(s.use_s),
            flag(s.use_p),
            flag(s.use_d),
            flag(s.use_diff),
            flag(s.use_rb),
            r.acc.mean.to_string(),
            r.acc.std.to_string(),
            r.bwt.mean.to_string(),
            r.bwt.std.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `samples_per_class,acc_mean,acc_std,bwt_mean,bwt_std`.
pub fn write_sweep_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["samples_per_class", "acc_mean", "acc_std", "bwt_mean", "bwt_std"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.samples_per_class.to_string(),
            r.acc.mean.to_string(),
            r.acc.std.to_string(),
            r.bwt.mean.to_string(),
            r.bwt.std.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_tasks;

    fn quick(tasks: usize) -> (ExperimentConfig, Vec<TaskDataset>) {
        let mut c = ExperimentConfig::synthetic(tasks, 2, 8, 30);
        c.epochs = 3;
        c.samples_per_class = 2;
        let data = make_synthetic_tasks(tasks, 2, 8, 30, 11).unwrap();
        (c, data)
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[-1.0]), 0);
    }

    #[test]
    fn constant_logits_score_half_on_balanced_labels() {
        let mut s = Samples::new(1);
        for i in 0..10 {
            s.push(&[0.0], i % 2, i);
        }
        let acc = accuracy_with(&s, |x| Ok(Tensor::zeros(&[x.shape()[0], 2]))).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn accuracy_matches_per_sample_count() {
        let (c, data) = quick(1);
        let model = AclModel::build(c.model.clone(), 4).unwrap();
        let acc = accuracy_with(&data[0].test, |x| model.forward_task(x, 1)).unwrap();
        let mut hits = 0;
        for i in 0..data[0].test.len() {
            let x = Tensor::new(vec![1, 8], data[0].test.gather(&[i])).unwrap();
            let z = model.forward_task(&x, 1).unwrap();
            hits += usize::from(argmax(z.data()) == data[0].test.y[i]);
        }
        assert!((acc - hits as f64 / data[0].test.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn lower_triangle_filled_and_deterministic() {
        let (c, data) = quick(3);
        let a = train_acl(&c, &data, 5, &mut |_| {}).unwrap();
        for n in 1..=3 {
            for i in 1..=3 {
                assert_eq!(a.r.get(n, i).is_some(), i <= n);
            }
        }
        let b = train_acl(&c, &data, 5, &mut |_| {}).unwrap();
        assert_eq!(a.r, b.r);
        assert_eq!(a.memory_bytes, 3 * 4 * 8 * 4);
    }

    #[test]
    fn private_only_never_forgets() {
        let (mut c, data) = quick(3);
        c.switches = ABLATION_ROWS[1];
        let rec = train_acl(&c, &data, 2, &mut |_| {}).unwrap();
        assert_eq!(rec.bwt(), Some(0.0));
        assert!(rec.metrics.structural_zero);
    }

    #[test]
    fn baselines_run() {
        let (mut c, data) = quick(2);
        c.method = Method::OrdFt;
        let ft = run(&c, &data, 1, &mut |_| {}).unwrap();
        assert!(ft.bwt().is_some());
        c.method = Method::OrdJt;
        let jt = run(&c, &data, 1, &mut |_| {}).unwrap();
        assert!(jt.bwt().is_none());
        assert!(jt.r.get(2, 1).is_some() && jt.r.get(1, 1).is_none());
        c.method = Method::AclJt;
        run(&c, &data, 1, &mut |_| {}).unwrap();
    }

    #[test]
    fn summary_formatting() {
        let s = Summary::of(&[0.6207, 0.6207]);
        assert_eq!(s.percent(), "62.07(0.00)");
        assert_eq!(Summary::of(&[1.0, 3.0]).std, 2f64.sqrt());
    }

    #[test]
    fn derived_seeds_differ_by_stream_and_index() {
        let a = derive_seed(1, stream::DATA, 0);
        assert_ne!(a, derive_seed(1, stream::MODEL, 0));
        assert_ne!(a, derive_seed(1, stream::DATA, 1));
        assert_ne!(a, derive_seed(2, stream::DATA, 0));
    }
}
