//! Task, adversarial and difference losses and their weighted combination.
//!
//! The functions here append to a caller-owned [`Graph`] so that one batch's
//! shared features are computed once and reused by every term.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AclModel;
use crate::tensor::{Graph, Tensor, Var};

/// Samples from the current task and from memory, each with its class label
/// `y` (within its task) and 1-based task label `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointBatch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub t: Vec<usize>,
    pub from_memory: Vec<bool>,
}

impl JointBatch {
    pub fn new(x: Tensor, y: Vec<usize>, t: Vec<usize>, from_memory: Vec<bool>) -> Result<Self> {
        let n = y.len();
        if x.shape().len() != 2 || x.shape()[0] != n || t.len() != n || from_memory.len() != n {
            return Err(Error::Contract(format!(
                "batch fields disagree: x {:?}, {} labels, {} task labels, {} flags",
                x.shape(),
                n,
                t.len(),
                from_memory.len()
            )));
        }
        if t.contains(&0) {
            return Err(Error::Contract("task label 0 is reserved for fake features".into()));
        }
        Ok(Self {
            x,
            y,
            t,
            from_memory,
        })
    }

    /// A batch drawn entirely from task `task`.
    pub fn single_task(x: Tensor, y: Vec<usize>, task: usize) -> Result<Self> {
        let n = y.len();
        Self::new(x, y, vec![task; n], vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn rows(&self, idx: &[usize]) -> Result<Tensor> {
        let dim = self.x.shape()[1];
        let data = self.x.data();
        let mut out = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            out.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        }
        Ok(Tensor::new(vec![idx.len(), dim], out)?)
    }
}

/// Rows of one task within a batch and their features.
#[derive(Debug, Clone)]
pub struct TaskGroup {
    pub task: usize,
    pub rows: Vec<usize>,
    pub private: Option<Var>,
    pub shared: Option<Var>,
}

/// Encoder outputs for a batch; each row is routed through its own task's
/// private encoder.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub shared: Option<Var>,
    pub groups: Vec<TaskGroup>,
    track: bool,
}

impl Encoded {
    /// With `track`, trainable parameters are recorded as differentiable
    /// leaves; frozen ones are constants either way.
    pub fn new(g: &mut Graph, model: &AclModel, batch: &JointBatch, track: bool) -> Result<Self> {
        let classes = model.config().classes_per_task;
        for (row, (&y, &t)) in batch.y.iter().zip(&batch.t).enumerate() {
            if y >= classes {
                return Err(Error::Contract(format!("row {row}: class {y} >= {classes}")));
            }
            if t == 0 || t > model.seen_tasks() {
                return Err(Error::TaskIndex {
                    task: t,
                    seen: model.seen_tasks(),
                });
            }
        }
        let x = g.constant(&batch.x);
        let shared = model.shared_features(g, x, track)?;
        let mut tasks: Vec<usize> = batch.t.clone();
        tasks.sort_unstable();
        tasks.dedup();
        let single = tasks.len() == 1;
        let mut groups = Vec::with_capacity(tasks.len());
        for task in tasks {
            let rows: Vec<usize> = (0..batch.len()).filter(|&i| batch.t[i] == task).collect();
            let (xg, sg) = if single {
                (x, shared)
            } else {
                let xg = g.constant(&batch.rows(&rows)?);
                let sg = shared.map(|s| g.select_rows(s, &rows)).transpose()?;
                (xg, sg)
            };
            let private = model.private_features(g, xg, task, track)?;
            groups.push(TaskGroup {
                task,
                rows,
                private,
                shared: sg,
            });
        }
        Ok(Self {
            shared,
            groups,
            track,
        })
    }

    pub fn group(&self, task: usize) -> Option<&TaskGroup> {
        self.groups.iter().find(|gr| gr.task == task)
    }
}

/// Mean class cross-entropy over the whole batch, each row scored by its own
/// task's head.
pub fn task_loss(g: &mut Graph, model: &AclModel, enc: &Encoded, batch: &JointBatch) -> Result<Var> {
    let n = batch.len() as f64;
    let mut total: Option<Var> = None;
    for group in &enc.groups {
        let logits = model.head_logits(g, group.private, group.shared, group.task, enc.track)?;
        let labels: Vec<usize> = group.rows.iter().map(|&i| batch.y[i]).collect();
        let ce = g.softmax_cross_entropy(logits, &labels)?;
        let weighted = if enc.groups.len() == 1 {
            ce
        } else {
            g.scale(ce, group.rows.len() as f64 / n)
        };
        total = Some(match total {
            Some(t) => g.add(t, weighted)?,
            None => weighted,
        });
    }
    total.ok_or_else(|| Error::Data("empty batch".into()))
}

/// Cross-entropy of the discriminator on `features` against `labels`.
/// `reverse` inserts gradient reversal in front of the discriminator;
/// `track_discriminator` records its parameters as differentiable.
pub fn adversarial_loss(
    g: &mut Graph,
    model: &AclModel,
    features: Var,
    labels: &[usize],
    reverse: bool,
    track_discriminator: bool,
) -> Result<Var> {
    let input = if reverse {
        g.gradient_reversal(features)
    } else {
        features
    };
    let logits = model.discriminator_logits(g, input, track_discriminator)?;
    Ok(g.softmax_cross_entropy(logits, labels)?)
}

/// Adversarial term for the shared encoder: the discriminator's task-label
/// cross-entropy behind a gradient reversal, so descending it pushes the
/// shared encoder to increase the discriminator's error. Discriminator
/// parameters are recorded as constants.
pub fn adv_loss_for_s(g: &mut Graph, model: &AclModel, enc: &Encoded, batch: &JointBatch) -> Result<Var> {
    let zs = enc
        .shared
        .ok_or_else(|| Error::Contract("adversarial loss needs the shared module".into()))?;
    if batch.t.contains(&0) {
        return Err(Error::Contract("fake label in a real batch".into()));
    }
    adversarial_loss(g, model, zs, &batch.t, true, false)
}

/// Discriminator term: real shared features (detached) labelled with their
/// tasks plus `noise_n` fake rows drawn from the configured normal
/// distribution labelled 0.
pub fn adv_loss_for_d(
    g: &mut Graph,
    model: &AclModel,
    shared_features: Var,
    task_labels: &[usize],
    noise_n: usize,
    rng: &mut impl Rng,
) -> Result<Var> {
    let real = g.detach(shared_features);
    let d = model.config().latent_dim_shared;
    if g.shape(real) != [task_labels.len(), d] {
        return Err(Error::Contract(format!(
            "features {:?} do not match {} labels of width {d}",
            g.shape(real),
            task_labels.len()
        )));
    }
    let cfg = model.config();
    let normal = Normal::new(cfg.noise_mean, cfg.noise_variance.sqrt())
        .map_err(|e| Error::config("noise_variance", e.to_string()))?;
    let mut data = g.value(real).to_vec();
    data.extend((0..noise_n * d).map(|_| normal.sample(rng)));
    let mut labels = task_labels.to_vec();
    labels.extend(std::iter::repeat_n(0, noise_n));
    let all = g.constant_from(vec![labels.len(), d], data)?;
    adversarial_loss(g, model, all, &labels, false, true)
}

/// Squared Frobenius norm of `sharedᵀ · private` for `n×d_S` and `n×d_P`
/// features.
pub fn diff_loss(g: &mut Graph, shared: Var, private: Var) -> Result<Var> {
    let st = g.transpose(shared)?;
    let m = g.matmul(st, private)?;
    let sq = g.mul(m, m)?;
    Ok(g.sum(sq))
}

/// Divides each row of `v` by its Euclidean norm. The norms enter as
/// constants, so gradients pass through the scaling only.
pub fn normalize_rows_detached(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    if shape.len() != 2 {
        return Err(Error::Contract(format!("row normalization of shape {shape:?}")));
    }
    let d = shape[1];
    let mut scale = Vec::with_capacity(shape[0] * d);
    for row in g.value(v).chunks(d.max(1)) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        scale.extend(std::iter::repeat_n(1.0 / (norm + 1e-6), d));
    }
    let c = g.constant_from(shape, scale)?;
    Ok(g.mul(v, c)?)
}

/// Difference loss of the current task's rows, optionally summed with the
/// memory rows of every stored task (each through its own private encoder).
/// With `normalized`, rows are scaled to unit length and the squared entries
/// are averaged.
pub fn diff_loss_for(
    g: &mut Graph,
    enc: &Encoded,
    current_task: usize,
    include_memory: bool,
    normalized: bool,
) -> Result<Option<Var>> {
    let mut total = None;
    for group in &enc.groups {
        if group.task != current_task && !include_memory {
            continue;
        }
        let (Some(s), Some(p)) = (group.shared, group.private) else {
            continue;
        };
        let d = if normalized {
            let entries = (g.shape(s)[1] * g.shape(p)[1]) as f64;
            let (s, p) = (normalize_rows_detached(g, s)?, normalize_rows_detached(g, p)?);
            let d = diff_loss(g, s, p)?;
            g.scale(d, 1.0 / entries)
        } else {
            diff_loss(g, s, p)?
        };
        total = Some(match total {
            Some(t) => g.add(t, d)?,
            None => d,
        });
    }
    Ok(total)
}

/// Loss weights `(λ_adv, λ_task, λ_diff)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub adv: f64,
    pub task: f64,
    pub diff: f64,
}

impl Lambdas {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("lambda_adv", self.adv), ("lambda_task", self.task), ("lambda_diff", self.diff)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// `λ_adv·adv + λ_task·task + λ_diff·diff`; absent terms contribute nothing.
pub fn total_loss(
    g: &mut Graph,
    lambdas: Lambdas,
    adv: Option<Var>,
    task: Var,
    diff: Option<Var>,
) -> Result<Var> {
    let mut total = g.scale(task, lambdas.task);
    if let Some(a) = adv {
        let a = g.scale(a, lambdas.adv);
        total = g.add(a, total)?;
    }
    if let Some(d) = diff {
        let d = g.scale(d, lambdas.diff);
        total = g.add(total, d)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AclConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> AclConfig {
        AclConfig {
            input_dim: 6,
            shared_hidden: vec![8],
            latent_dim_shared: 4,
            latent_dim_private: 3,
            head_hidden: vec![5],
            classes_per_task: 2,
            max_tasks: 5,
            discriminator_hidden: vec![6],
            ..AclConfig::default()
        }
    }

    fn batch(n: usize, task: usize, seed: u64) -> JointBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![n, 6], (0..n * 6).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        JointBatch::single_task(x, (0..n).map(|i| i % 2).collect(), task).unwrap()
    }

    #[test]
    fn untrained_task_loss_near_ln2() {
        let model = AclModel::build(AclConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(vec![32, 784], (0..32 * 784).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let b = JointBatch::single_task(x, (0..32).map(|i| i % 2).collect(), 1).unwrap();
        let mut g = Graph::new();
        let enc = Encoded::new(&mut g, &model, &b, false).unwrap();
        let l = task_loss(&mut g, &model, &enc, &b).unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 0.1, "{}", g.scalar(l));
    }

    #[test]
    fn single_row_equals_cross_entropy_of_its_logits() {
        let model = AclModel::build(small_config(), 3).unwrap();
        let b = batch(1, 1, 4);
        let mut g = Graph::new();
        let enc = Encoded::new(&mut g, &model, &b, false).unwrap();
        let l = task_loss(&mut g, &model, &enc, &b).unwrap();
        let logits = model.forward_task(&b.x, 1).unwrap();
        let mut g2 = Graph::new();
        let z = g2.constant(&logits);
        let ce = g2.softmax_cross_entropy(z, &b.y).unwrap();
        assert_eq!(g.scalar(l), g2.scalar(ce));
    }

    #[test]
    fn uniform_discriminator_gives_ln_of_label_count() {
        let mut model = AclModel::build(small_config(), 3).unwrap();
        model
            .discriminator_mut()
            .unwrap()
            .parameters_mut()
            .for_each(|p| p.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let b = batch(5, 1, 0);
        let mut g = Graph::new();
        let enc = Encoded::new(&mut g, &model, &b, true).unwrap();
        let l = adv_loss_for_s(&mut g, &model, &enc, &b).unwrap();
        assert!((g.scalar(l) - 6f64.ln()).abs() < 1e-12);
        let zs = enc.shared.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ld = adv_loss_for_d(&mut g, &model, zs, &b.t, 5, &mut rng).unwrap();
        assert!((g.scalar(ld) - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn discriminator_loss_does_not_reach_shared_encoder() {
        let mut model = AclModel::build(small_config(), 3).unwrap();
        let b = batch(6, 1, 2);
        let mut g = Graph::new();
        let enc = Encoded::new(&mut g, &model, &b, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = adv_loss_for_d(&mut g, &model, enc.shared.unwrap(), &b.t, 6, &mut rng).unwrap();
        g.backward(l).unwrap();
        let shared = model.shared_mut().unwrap();
        shared.pull_grads(&g).unwrap();
        assert!(shared.parameters().all(|p| p.value.grad().is_none()));
        let d = model.discriminator_mut().unwrap();
        d.pull_grads(&g).unwrap();
        assert!(d.parameters().all(|p| p.value.grad().is_some()));
    }

    #[test]
    fn reversal_flips_shared_gradient_exactly() {
        let model = AclModel::build(small_config(), 8).unwrap();
        let b = batch(4, 1, 3);
        let grads = |reverse: bool| {
            let mut g = Graph::new();
            let enc = Encoded::new(&mut g, &model, &b, true).unwrap();
            let l = adversarial_loss(&mut g, &model, enc.shared.unwrap(), &b.t, reverse, false).unwrap();
            g.backward(l).unwrap();
            let mut s = model.shared().unwrap().clone();
            s.pull_grads(&g).unwrap();
            s.parameters().flat_map(|p| p.value.grad().unwrap().to_vec()).collect::<Vec<f64>>()
        };
        let (rev, plain) = (grads(true), grads(false));
        assert!(plain.iter().any(|v| *v != 0.0));
        for (r, p) in rev.iter().zip(&plain) {
            assert_eq!(*r, -*p);
        }
    }

    #[test]
    fn fake_label_rejected_in_real_batch() {
        let x = Tensor::zeros(&[1, 6]);
        assert!(JointBatch::new(x, vec![0], vec![0], vec![false]).is_err());
    }

    #[test]
    fn diff_loss_examples() {
        let mut g = Graph::new();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (s, p) = (g.constant(&eye), g.constant(&eye));
        let l = diff_loss(&mut g, s, p).unwrap();
        assert_eq!(g.scalar(l), 2.0);

        // Columns of S supported on rows {0,1}, of P on rows {2,3}.
        let s = g.constant(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let p = g.constant(&Tensor::from_rows(&[vec![0.0], vec![0.0], vec![5.0], vec![-1.0]]).unwrap());
        let l = diff_loss(&mut g, s, p).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn diff_loss_matches_double_loop_and_scales_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, ds, dp) = (7, 4, 3);
        let s: Vec<f64> = (0..n * ds).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..n * dp).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut oracle = 0.0;
        for a in 0..ds {
            for b in 0..dp {
                let dot: f64 = (0..n).map(|r| s[r * ds + a] * p[r * dp + b]).sum();
                oracle += dot * dot;
            }
        }
        let mut g = Graph::new();
        let vs = g.constant_from(vec![n, ds], s.clone()).unwrap();
        let vp = g.constant_from(vec![n, dp], p.clone()).unwrap();
        let l = diff_loss(&mut g, vs, vp).unwrap();
        assert!((g.scalar(l) - oracle).abs() < 1e-12);
        let vp3 = g.scale(vp, 3.0);
        let l3 = diff_loss(&mut g, vs, vp3).unwrap();
        assert!((g.scalar(l3) - 9.0 * g.scalar(l)).abs() < 1e-10);
        // Joint row permutation leaves the loss unchanged.
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let ps = g.select_rows(vs, &perm).unwrap();
        let pp = g.select_rows(vp, &perm).unwrap();
        let lp = diff_loss(&mut g, ps, pp).unwrap();
        assert!((g.scalar(lp) - g.scalar(l)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_selects_and_sums() {
        let mut g = Graph::new();
        let a = g.variable(&Tensor::scalar(0.2));
        let t = g.variable(&Tensor::scalar(0.3));
        let d = g.variable(&Tensor::scalar(0.5));
        let sel = total_loss(&mut g, Lambdas { adv: 0.0, task: 1.0, diff: 0.0 }, Some(a), t, Some(d)).unwrap();
        assert_eq!(g.scalar(sel), g.scalar(t));
        let all = total_loss(&mut g, Lambdas { adv: 1.0, task: 1.0, diff: 1.0 }, Some(a), t, Some(d)).unwrap();
        assert!((g.scalar(all) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mixed_batch_routes_rows_to_their_tasks() {
        let mut model = AclModel::build(small_config(), 1).unwrap();
        model.grow(2).unwrap();
        let b1 = batch(3, 1, 10);
        let b2 = batch(2, 2, 11);
        let mut x = b1.x.data().to_vec();
        x.extend_from_slice(b2.x.data());
        let mixed = JointBatch::new(
            Tensor::new(vec![5, 6], x).unwrap(),
            [b1.y.clone(), b2.y.clone()].concat(),
            vec![1, 1, 1, 2, 2],
            vec![true, true, true, false, false],
        )
        .unwrap();
        let mut g = Graph::new();
        let enc = Encoded::new(&mut g, &model, &mixed, true).unwrap();
        let l = task_loss(&mut g, &model, &enc, &mixed).unwrap();
        let ce = |b: &JointBatch, k: usize| {
            let z = model.forward_task(&b.x, k).unwrap();
            let mut g = Graph::new();
            let v = g.constant(&z);
            let l = g.softmax_cross_entropy(v, &b.y).unwrap();
            g.scalar(l)
        };
        let expected = (3.0 * ce(&b1, 1) + 2.0 * ce(&b2, 2)) / 5.0;
        assert!((g.scalar(l) - expected).abs() < 1e-12);
        // Frozen task-1 modules receive no gradient.
        g.backward(l).unwrap();
        let (p, h) = model.task_modules_mut(1).unwrap();
        let p = p.unwrap();
        p.pull_grads(&g).unwrap();
        h.pull_grads(&g).unwrap();
        assert!(p.parameters().all(|q| q.value.grad().is_none()));
        assert!(h.parameters().all(|q| q.value.grad().is_none()));
    }
}
