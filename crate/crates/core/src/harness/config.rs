use serde::{Deserialize, Serialize};

use crate::data::{default_pairs, DatasetSpec};
use crate::error::{Error, Result};
use crate::model::{AclConfig, Components};
use crate::nn::PlateauDecay;

/// Which training procedure to run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Sequential training of the factorized model.
    #[default]
    Acl,
    /// Sequential fine-tuning of an ordinary single-module network.
    OrdFt,
    /// The ordinary network trained on all tasks at once.
    OrdJt,
    /// The factorized model trained on all tasks at once.
    AclJt,
}

/// Component switches. `use_d` needs `use_s`; `use_diff` needs both
/// encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    pub use_s: bool,
    pub use_p: bool,
    pub use_d: bool,
    pub use_diff: bool,
    pub use_rb: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self::ALL
    }
}

impl Switches {
    pub const ALL: Switches = Switches {
        use_s: true,
        use_p: true,
        use_d: true,
        use_diff: true,
        use_rb: true,
    };

    pub const fn new(use_s: bool, use_p: bool, use_d: bool, use_diff: bool, use_rb: bool) -> Self {
        Self {
            use_s,
            use_p,
            use_d,
            use_diff,
            use_rb,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_s && !self.use_p {
            return Err(Error::config("switches", "need at least one of use_s and use_p"));
        }
        if self.use_d && !self.use_s {
            return Err(Error::config("switches.use_d", "the discriminator needs use_s"));
        }
        if self.use_diff && !(self.use_s && self.use_p) {
            return Err(Error::config("switches.use_diff", "the difference loss needs use_s and use_p"));
        }
        Ok(())
    }

    pub fn components(&self) -> Components {
        Components {
            shared: self.use_s,
            private: self.use_p,
            discriminator: self.use_d,
        }
    }

    /// Short label such as `S,P,D`.
    pub fn label(&self) -> String {
        let names = [
            (self.use_s, "S"),
            (self.use_p, "P"),
            (self.use_d, "D"),
            (self.use_diff, "diff"),
            (self.use_rb, "RB"),
        ];
        names
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// The eleven cumulative ablation rows, in table order.
pub const ABLATION_ROWS: [Switches; 11] = [
    Switches::new(true, false, false, false, false),
    Switches::new(false, true, false, false, false),
    Switches::new(true, false, true, false, false),
    Switches::new(true, true, false, true, false),
    Switches::new(true, true, false, false, false),
    Switches::new(true, true, false, false, true),
    Switches::new(true, true, false, true, true),
    Switches::new(true, true, true, false, false),
    Switches::new(true, true, true, true, false),
    Switches::new(true, true, true, false, true),
    Switches::ALL,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    pub shared: f64,
    pub private: f64,
    pub discriminator: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            shared: 0.02,
            private: 0.05,
            discriminator: 0.05,
        }
    }
}

/// Output layer of the ordinary baseline network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrdHead {
    /// One `C`-way layer used by every task.
    #[default]
    Shared,
    /// A `C·T`-way layer; task `k` reads its own `C` columns.
    TaskSlices,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrdinaryConfig {
    pub hidden: Vec<usize>,
    pub head: OrdHead,
}

impl Default for OrdinaryConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            head: OrdHead::Shared,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayConfig {
    pub factor: f64,
    pub patience: usize,
}

impl Default for DecayConfig {
    fn default() -> Self {
        let d = PlateauDecay::default();
        Self {
            factor: d.factor,
            patience: d.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: Method,
    pub dataset: DatasetSpec,
    pub model: AclConfig,
    pub lr: LearningRates,
    /// Learning-rate decay on plateaus of the current task's validation
    /// loss; `null` keeps rates fixed.
    pub lr_decay: Option<DecayConfig>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Replay samples stored per class (`m = s·C`); 0 disables replay.
    pub samples_per_class: usize,
    pub switches: Switches,
    pub freeze_shared_after_first_task: bool,
    /// Also apply the difference loss to replayed rows.
    pub diff_includes_memory: bool,
    pub ordinary: OrdinaryConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "split_mnist".into(),
            method: Method::Acl,
            dataset: DatasetSpec::SplitMnist {
                pairs: default_pairs(),
                valid_fraction: crate::data::default_valid_fraction(),
                train_fraction: 1.0,
            },
            model: AclConfig::default(),
            lr: LearningRates::default(),
            lr_decay: Some(DecayConfig::default()),
            epochs: 10,
            batch_size: 64,
            samples_per_class: 0,
            switches: Switches::ALL,
            freeze_shared_after_first_task: false,
            diff_includes_memory: false,
            ordinary: OrdinaryConfig::default(),
            seeds: vec![1, 2, 3],
        }
    }
}

impl ExperimentConfig {
    /// Five binary digit-pair tasks with the MNIST-sized modules.
    pub fn split_mnist() -> Self {
        Self::default()
    }

    /// `tasks` pixel permutations of ten-way MNIST, training on
    /// `train_fraction` of each task's training split.
    pub fn permuted_mnist(tasks: usize, train_fraction: f64) -> Self {
        Self {
            name: "permuted_mnist".into(),
            dataset: DatasetSpec::PermutedMnist {
                tasks,
                valid_fraction: crate::data::default_valid_fraction(),
                train_fraction,
            },
            model: AclConfig {
                classes_per_task: 10,
                max_tasks: tasks,
                ..AclConfig::default()
            },
            lr: LearningRates {
                shared: 0.005,
                private: 0.1,
                discriminator: 0.05,
            },
            epochs: 25,
            ..Self::default()
        }
    }

    /// Gaussian-cluster tasks with small modules, for fast runs.
    pub fn synthetic(tasks: usize, classes: usize, input_dim: usize, per_class: usize) -> Self {
        Self {
            name: "synthetic".into(),
            dataset: DatasetSpec::Synthetic {
                tasks,
                classes,
                input_dim,
                per_class,
            },
            model: AclConfig {
                input_dim,
                shared_hidden: vec![32],
                latent_dim_shared: 16,
                private_hidden: vec![],
                latent_dim_private: 16,
                head_hidden: vec![16],
                classes_per_task: classes,
                max_tasks: tasks,
                discriminator_hidden: vec![16],
                ..AclConfig::default()
            },
            batch_size: 32,
            epochs: 10,
            ..Self::default()
        }
    }

    pub fn task_count(&self) -> usize {
        self.dataset.task_count()
    }

    pub fn replay_enabled(&self) -> bool {
        self.switches.use_rb && self.samples_per_class > 0
    }

    /// True when no parameter on any task's evaluation path changes after
    /// that task is finished, so BWT is zero by construction.
    pub fn structural_zero(&self) -> bool {
        self.method == Method::Acl && (!self.switches.use_s || self.freeze_shared_after_first_task)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.switches.validate()?;
        let t = self.task_count();
        if t == 0 {
            return Err(Error::config("dataset", "needs at least one task"));
        }
        if self.model.input_dim != self.dataset.input_dim() {
            return Err(Error::config(
                "model.input_dim",
                format!("is {} but the dataset has {} features", self.model.input_dim, self.dataset.input_dim()),
            ));
        }
        if self.model.classes_per_task != self.dataset.classes_per_task() {
            return Err(Error::config(
                "model.classes_per_task",
                format!(
                    "is {} but the dataset has {} classes per task",
                    self.model.classes_per_task,
                    self.dataset.classes_per_task()
                ),
            ));
        }
        if self.model.max_tasks < t {
            return Err(Error::config(
                "model.max_tasks",
                format!("is {} but the dataset has {t} tasks", self.model.max_tasks),
            ));
        }
        for (key, v) in [
            ("lr.shared", self.lr.shared),
            ("lr.private", self.lr.private),
            ("lr.discriminator", self.lr.discriminator),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive and finite"));
            }
        }
        if let Some(d) = &self.lr_decay {
            if !(d.factor > 0.0 && d.factor <= 1.0) {
                return Err(Error::config("lr_decay.factor", "must lie in (0, 1]"));
            }
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if self.ordinary.hidden.contains(&0) {
            return Err(Error::config("ordinary.hidden", "layer widths must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ExperimentConfig::split_mnist().validate().unwrap();
        ExperimentConfig::permuted_mnist(10, 0.1).validate().unwrap();
        ExperimentConfig::synthetic(3, 2, 10, 20).validate().unwrap();
    }

    #[test]
    fn ablation_rows_are_valid_and_distinct() {
        for (i, a) in ABLATION_ROWS.iter().enumerate() {
            a.validate().unwrap();
            assert!(ABLATION_ROWS[i + 1..].iter().all(|b| a != b));
        }
        assert_eq!(ABLATION_ROWS[1].label(), "P");
        assert_eq!(ABLATION_ROWS[10].label(), "S,P,D,diff,RB");
    }

    #[test]
    fn inconsistent_switches_name_the_key() {
        let mut c = ExperimentConfig::default();
        c.switches.use_s = false;
        match c.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "switches.use_d"),
            other => panic!("{other:?}"),
        }
        let mut c = ExperimentConfig::default();
        c.model.input_dim = 100;
        match c.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "model.input_dim"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let c = ExperimentConfig::permuted_mnist(4, 0.5);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn structural_zero_flag() {
        let mut c = ExperimentConfig::default();
        assert!(!c.structural_zero());
        c.switches = ABLATION_ROWS[1];
        assert!(c.structural_zero());
        c.switches = Switches::ALL;
        c.freeze_shared_after_first_task = true;
        assert!(c.structural_zero());
    }
}
