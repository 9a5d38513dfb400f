//! Episodic replay memory with a fixed per-task budget split evenly across
//! classes, and assembly of joint current-task/memory batches.

use std::io::{Read, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{self, BlockInfo};
use crate::data::{Samples, TaskDataset};
use crate::error::{Error, Result};
use crate::losses::JointBatch;
use crate::tensor::Tensor;

/// Bytes per stored value under the 32-bit accounting convention.
pub const BYTES_PER_VALUE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub x: Vec<f32>,
    pub y: usize,
    pub task: usize,
}

/// How samples of one class are chosen for storage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Uniformly at random without replacement.
    #[default]
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicMemory {
    budget: usize,
    classes: usize,
    selection: Selection,
    entries: Vec<MemoryEntry>,
}

impl EpisodicMemory {
    /// `budget` samples per task, `budget / classes` per class.
    pub fn new(budget: usize, classes: usize) -> Result<Self> {
        if classes == 0 || budget % classes != 0 {
            return Err(Error::Budget { budget, classes });
        }
        Ok(Self {
            budget,
            classes,
            selection: Selection::Uniform,
            entries: Vec::new(),
        })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn per_class(&self) -> usize {
        self.budget / self.classes
    }

    pub fn selection(&self) -> Selection {
        self.selection
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends `budget / classes` training samples of every class of
    /// `dataset`. Existing entries are never modified.
    pub fn update(&mut self, dataset: &TaskDataset, seed: u64) -> Result<()> {
        if dataset.classes != self.classes {
            return Err(Error::Contract(format!(
                "task {} has {} classes, memory expects {}",
                dataset.task, dataset.classes, self.classes
            )));
        }
        if self.entries.iter().any(|e| e.task == dataset.task) {
            return Err(Error::Contract(format!("task {} already stored", dataset.task)));
        }
        let s = self.per_class();
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes];
        for (i, &y) in dataset.train.y.iter().enumerate() {
            by_class[y].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut added = Vec::with_capacity(self.budget);
        for (class, pool) in by_class.iter().enumerate() {
            if pool.len() < s {
                return Err(Error::Data(format!(
                    "task {} class {} has {} samples, memory needs {}",
                    dataset.task,
                    class,
                    pool.len(),
                    s
                )));
            }
            let picked: Vec<usize> = match self.selection {
                Selection::Uniform => pool.choose_multiple(&mut rng, s).copied().collect(),
            };
            added.extend(picked.into_iter().map(|i| MemoryEntry {
                x: dataset.train.row(i).to_vec(),
                y: class,
                task: dataset.task,
            }));
        }
        self.entries.extend(added);
        Ok(())
    }

    /// Storage size of the raw samples at `bytes_per_value` bytes each.
    pub fn bytes(&self, bytes_per_value: usize) -> usize {
        self.entries.iter().map(|e| e.x.len() * bytes_per_value).sum()
    }

    pub fn save(&self, out: impl Write) -> Result<()> {
        let dim = self.entries.first().map_or(0, |e| e.x.len());
        let data: Vec<f64> = self.entries.iter().flat_map(|e| e.x.iter().map(|&v| f64::from(v))).collect();
        let labels: Vec<(usize, usize)> = self.entries.iter().map(|e| (e.task, e.y)).collect();
        let header = json!({
            "kind": "acl-memory",
            "version": 1,
            "budget": self.budget,
            "classes": self.classes,
            "selection": self.selection,
            "labels": labels,
        });
        container::write(
            out,
            header,
            &[(
                BlockInfo {
                    name: "x".into(),
                    shape: vec![self.entries.len(), dim],
                },
                &data,
            )],
        )
    }

    pub fn load(input: impl Read) -> Result<Self> {
        let (header, blocks) = container::read(input)?;
        if header["kind"] != "acl-memory" {
            return Err(Error::Format(format!("not a memory dump: {}", header["kind"])));
        }
        let budget = serde_json::from_value(header["budget"].clone())?;
        let classes = serde_json::from_value(header["classes"].clone())?;
        let labels: Vec<(usize, usize)> = serde_json::from_value(header["labels"].clone())?;
        let mut mem = Self::new(budget, classes)?;
        mem.selection = serde_json::from_value(header["selection"].clone())?;
        let [(info, data)] = <[_; 1]>::try_from(blocks)
            .map_err(|_| Error::Format("memory dump must hold one block".into()))?;
        let (n, dim) = (info.shape[0], info.shape[1]);
        if n != labels.len() {
            return Err(Error::Format(format!("{n} rows but {} labels", labels.len())));
        }
        mem.entries = labels
            .into_iter()
            .enumerate()
            .map(|(i, (task, y))| MemoryEntry {
                x: data[i * dim..(i + 1) * dim].iter().map(|&v| v as f32).collect(),
                y,
                task,
            })
            .collect();
        Ok(mem)
    }
}

/// A sample drawn from the current task's training set or from memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SampleRef {
    Current(usize),
    Memory(usize),
}

/// Shuffles the union of `current` and `memory` samples and cuts it into
/// batches of `batch_size`; the last batch may be shorter. Every element
/// appears exactly once.
pub fn epoch_plan(
    current: usize,
    memory: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<SampleRef>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    if current + memory == 0 {
        return Err(Error::Data("no samples to iterate".into()));
    }
    let mut all: Vec<SampleRef> = (0..current)
        .map(SampleRef::Current)
        .chain((0..memory).map(SampleRef::Memory))
        .collect();
    all.shuffle(rng);
    Ok(all.chunks(batch_size).map(<[SampleRef]>::to_vec).collect())
}

/// Materializes one planned batch.
pub fn assemble(
    plan: &[SampleRef],
    current: &Samples,
    task: usize,
    memory: &EpisodicMemory,
) -> Result<JointBatch> {
    let dim = current.dim;
    let mut x = Vec::with_capacity(plan.len() * dim);
    let mut y = Vec::with_capacity(plan.len());
    let mut t = Vec::with_capacity(plan.len());
    let mut from_memory = Vec::with_capacity(plan.len());
    for r in plan {
        match *r {
            SampleRef::Current(i) => {
                x.extend(current.row(i).iter().map(|&v| f64::from(v)));
                y.push(current.y[i]);
                t.push(task);
                from_memory.push(false);
            }
            SampleRef::Memory(i) => {
                let e = &memory.entries()[i];
                if e.x.len() != dim {
                    return Err(Error::Data(format!(
                        "memory entry {i} has {} features, task data has {dim}",
                        e.x.len()
                    )));
                }
                x.extend(e.x.iter().map(|&v| f64::from(v)));
                y.push(e.y);
                t.push(e.task);
                from_memory.push(true);
            }
        }
    }
    JointBatch::new(Tensor::new(vec![plan.len(), dim], x)?, y, t, from_memory)
}

/// All batches of one epoch over `D_k ∪ M`.
pub fn joint_batches(
    current: &Samples,
    task: usize,
    memory: &EpisodicMemory,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<JointBatch>> {
    epoch_plan(current.len(), memory.len(), batch_size, rng)?
        .iter()
        .map(|p| assemble(p, current, task, memory))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_tasks;
    use proptest::prelude::*;

    #[test]
    fn one_sample_per_class() {
        let tasks = make_synthetic_tasks(1, 5, 4, 3, 0).unwrap();
        let mut mem = EpisodicMemory::new(5, 5).unwrap();
        mem.update(&tasks[0], 1).unwrap();
        assert_eq!(mem.len(), 5);
        let mut ys: Vec<usize> = mem.entries().iter().map(|e| e.y).collect();
        ys.sort();
        assert_eq!(ys, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn five_per_class_for_binary_tasks() {
        let tasks = make_synthetic_tasks(1, 2, 4, 8, 0).unwrap();
        let mut mem = EpisodicMemory::new(10, 2).unwrap();
        mem.update(&tasks[0], 1).unwrap();
        assert_eq!(mem.len(), 10);
        assert_eq!(mem.entries().iter().filter(|e| e.y == 1).count(), 5);
    }

    #[test]
    fn budget_and_data_errors() {
        assert!(matches!(
            EpisodicMemory::new(7, 2),
            Err(Error::Budget { budget: 7, classes: 2 })
        ));
        let tasks = make_synthetic_tasks(1, 2, 4, 2, 0).unwrap();
        let mut mem = EpisodicMemory::new(6, 2).unwrap();
        assert!(matches!(mem.update(&tasks[0], 0), Err(Error::Data(_))));
    }

    #[test]
    fn byte_accounting() {
        let mut mem = EpisodicMemory::new(0, 2).unwrap();
        assert_eq!(mem.bytes(BYTES_PER_VALUE), 0);
        mem.entries.push(MemoryEntry {
            x: vec![0.0; 84 * 84 * 3],
            y: 0,
            task: 1,
        });
        assert_eq!(mem.bytes(BYTES_PER_VALUE), 84 * 84 * 3 * 4);
    }

    #[test]
    fn exact_cover_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = epoch_plan(100, 10, 55, &mut rng).unwrap();
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), vec![55, 55]);
        let plan = epoch_plan(100, 0, 64, &mut rng).unwrap();
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 36]);
        assert!(plan.iter().flatten().all(|r| matches!(r, SampleRef::Current(_))));
        assert!(epoch_plan(0, 0, 4, &mut rng).is_err());
    }

    #[test]
    fn batches_carry_memory_task_labels() {
        let tasks = make_synthetic_tasks(2, 2, 3, 4, 5).unwrap();
        let mut mem = EpisodicMemory::new(2, 2).unwrap();
        mem.update(&tasks[0], 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = joint_batches(&tasks[1].train, 2, &mem, 4, &mut rng).unwrap();
        let total: usize = batches.iter().map(JointBatch::len).sum();
        assert_eq!(total, 10);
        for b in &batches {
            for i in 0..b.len() {
                assert_eq!(b.t[i], if b.from_memory[i] { 1 } else { 2 });
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let tasks = make_synthetic_tasks(2, 2, 3, 4, 5).unwrap();
        let mut mem = EpisodicMemory::new(4, 2).unwrap();
        for t in &tasks {
            mem.update(t, 3).unwrap();
        }
        let mut buf = Vec::new();
        mem.save(&mut buf).unwrap();
        assert_eq!(EpisodicMemory::load(&buf[..]).unwrap(), mem);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn epoch_is_a_permutation_of_the_union(cur in 0usize..200, mem in 0usize..40, bs in 1usize..70, seed in any::<u64>()) {
            prop_assume!(cur + mem > 0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = epoch_plan(cur, mem, bs, &mut rng).unwrap();
            let mut seen: Vec<SampleRef> = plan.iter().flatten().copied().collect();
            seen.sort();
            let mut expected: Vec<SampleRef> = (0..cur).map(SampleRef::Current).chain((0..mem).map(SampleRef::Memory)).collect();
            expected.sort();
            prop_assert_eq!(seen, expected);
            prop_assert!(plan[..plan.len() - 1].iter().all(|b| b.len() == bs));
        }

        #[test]
        fn budget_exact_and_past_entries_immutable(
            tasks in 1usize..5, classes in 2usize..5, per_class in 1usize..4, seed in any::<u64>()
        ) {
            let data = make_synthetic_tasks(tasks, classes, 3, 4, seed).unwrap();
            let budget = per_class * classes;
            let mut mem = EpisodicMemory::new(budget, classes).unwrap();
            let mut snapshots: Vec<Vec<MemoryEntry>> = Vec::new();
            for (k, t) in data.iter().enumerate() {
                mem.update(t, seed.wrapping_add(k as u64)).unwrap();
                prop_assert_eq!(mem.len(), (k + 1) * budget);
                for snap in &snapshots {
                    prop_assert_eq!(&mem.entries()[..snap.len()], &snap[..]);
                }
                snapshots.push(mem.entries().to_vec());
            }
            for k in 1..=tasks {
                for c in 0..classes {
                    let n = mem.entries().iter().filter(|e| e.task == k && e.y == c).count();
                    prop_assert_eq!(n, per_class);
                }
            }
        }
    }
}
