use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::JointBatch;
use crate::nn::{Activation, Mlp};
use crate::tensor::{Graph, Tensor, Var};

use super::config::OrdHead;

/// Single-module MLP baseline.
#[derive(Debug, Clone)]
pub struct OrdinaryNet {
    body: Mlp,
    head: OrdHead,
    classes: usize,
    tasks: usize,
}

impl OrdinaryNet {
    pub fn new(input_dim: usize, hidden: &[usize], classes: usize, tasks: usize, head: OrdHead, seed: u64) -> Self {
        let outputs = match head {
            OrdHead::Shared => classes,
            OrdHead::TaskSlices => classes * tasks,
        };
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(outputs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            body: Mlp::new(&dims, Activation::Identity, &mut rng),
            head,
            classes,
            tasks,
        }
    }

    pub fn body(&self) -> &Mlp {
        &self.body
    }

    pub fn body_mut(&mut self) -> &mut Mlp {
        &mut self.body
    }

    pub fn param_count(&self) -> usize {
        self.body.param_count()
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task == 0 || task > self.tasks {
            return Err(Error::TaskIndex {
                task,
                seen: self.tasks,
            });
        }
        Ok(())
    }

    /// Restricts full outputs to task `task`'s classes.
    fn task_view(&self, g: &mut Graph, out: Var, task: usize) -> Result<Var> {
        self.check_task(task)?;
        match self.head {
            OrdHead::Shared => Ok(out),
            OrdHead::TaskSlices => {
                let c = self.classes;
                let mut sel = Tensor::zeros(&[c * self.tasks, c]);
                for j in 0..c {
                    sel.data_mut()[((task - 1) * c + j) * c + j] = 1.0;
                }
                let s = g.constant(&sel);
                Ok(g.matmul(out, s)?)
            }
        }
    }

    pub fn forward_task(&self, x: &Tensor, task: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let vx = g.constant(x);
        let out = self.body.forward(&mut g, vx, false)?;
        let v = self.task_view(&mut g, out, task)?;
        Ok(g.tensor(v))
    }

    /// Mean cross-entropy of the batch, each row scored on its own task's
    /// outputs.
    pub fn loss(&self, g: &mut Graph, batch: &JointBatch) -> Result<Var> {
        let x = g.constant(&batch.x);
        let out = self.body.forward(g, x, true)?;
        if self.head == OrdHead::Shared {
            for &t in &batch.t {
                self.check_task(t)?;
            }
            return Ok(g.softmax_cross_entropy(out, &batch.y)?);
        }
        let mut tasks = batch.t.clone();
        tasks.sort_unstable();
        tasks.dedup();
        let n = batch.len() as f64;
        let mut total: Option<Var> = None;
        for task in tasks {
            let rows: Vec<usize> = (0..batch.len()).filter(|&i| batch.t[i] == task).collect();
            let sub = g.select_rows(out, &rows)?;
            let logits = self.task_view(g, sub, task)?;
            let labels: Vec<usize> = rows.iter().map(|&i| batch.y[i]).collect();
            let ce = g.softmax_cross_entropy(logits, &labels)?;
            let w = g.scale(ce, rows.len() as f64 / n);
            total = Some(match total {
                Some(t) => g.add(t, w)?,
                None => w,
            });
        }
        total.ok_or_else(|| Error::Data("empty batch".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_two_layer_baseline() {
        let net = OrdinaryNet::new(784, &[256, 256], 2, 5, OrdHead::Shared, 0);
        assert_eq!(net.param_count(), 784 * 256 + 256 + 256 * 256 + 256 + 256 * 2 + 2);
    }

    #[test]
    fn slices_read_their_own_columns() {
        let shared = OrdinaryNet::new(4, &[3], 2, 3, OrdHead::TaskSlices, 1);
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let full = shared.body().infer(&x).unwrap();
        let t2 = shared.forward_task(&x, 2).unwrap();
        assert_eq!(t2.data(), &full.data()[2..4]);
        assert!(shared.forward_task(&x, 4).is_err());
    }
}
