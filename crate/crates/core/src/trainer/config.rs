//! Run configuration: parsing, validation and named presets.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    load_cifar_binary, load_idx, synth_blobs_split, with_label_noise, AugmentPolicy, BlobSpec, Split, TrainTest,
};
use crate::error::Result;
use crate::losses::LambdaMode;
use crate::nn::{LayerSpec, ModelSpec, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

impl ConfigError {
    pub fn fields(&self) -> Vec<&str> {
        match self {
            ConfigError::Parse(_) => Vec::new(),
            ConfigError::Invalid(errs) => errs.iter().map(|e| e.field.as_str()).collect(),
        }
    }
}

/// Either an explicit layer list or an MLP shorthand (`hidden` + `classes`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerSpec>,
}

impl ModelConfig {
    pub fn mlp(input: Vec<usize>, hidden: Vec<usize>, classes: usize) -> Self {
        ModelConfig {
            input,
            hidden: Some(hidden),
            classes: Some(classes),
            layers: Vec::new(),
        }
    }

    pub fn explicit(spec: ModelSpec) -> Self {
        ModelConfig {
            input: spec.input,
            hidden: None,
            classes: None,
            layers: spec.layers,
        }
    }

    pub fn spec(&self) -> std::result::Result<ModelSpec, String> {
        let spec = if !self.layers.is_empty() {
            if self.hidden.is_some() || self.classes.is_some() {
                return Err("give either `layers` or `hidden` + `classes`, not both".into());
            }
            ModelSpec::new(self.input.clone(), self.layers.clone())
        } else {
            match self.classes {
                Some(classes) => ModelSpec::mlp(self.input.clone(), self.hidden.as_deref().unwrap_or(&[]), classes),
                None => return Err("needs `layers` or `classes`".into()),
            }
        };
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStep {
    pub epoch: usize,
    pub multiplier: f64,
}

/// Learning rate at 1-based `epoch`: the base rate times every multiplier
/// whose boundary is at or before `epoch`.
pub fn lr_at(base: f64, schedule: &[LrStep], epoch: usize) -> f64 {
    schedule
        .iter()
        .filter(|s| s.epoch <= epoch)
        .fold(base, |lr, s| lr * s.multiplier)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    pub tau: f32,
    pub lambda: f64,
    #[serde(default)]
    pub mode: LambdaMode,
}

/// Epoch layout of a staged run: an initial uniform distillation phase,
/// `n_stages` curriculum stages, then `final_epochs` on the full set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub n_stages: usize,
    pub initial_kd_epochs: usize,
    pub stage_epochs: Vec<usize>,
    #[serde(default)]
    pub final_epochs: usize,
}

impl StageSchedule {
    pub fn total_epochs(&self) -> usize {
        self.initial_kd_epochs + self.stage_epochs.iter().sum::<usize>() + self.final_epochs
    }

    /// 1-based epochs at which stage `i` (1-based) starts.
    pub fn stage_starts(&self) -> Vec<usize> {
        let mut start = self.initial_kd_epochs + 1;
        self.stage_epochs
            .iter()
            .map(|&e| {
                let s = start;
                start += e;
                s
            })
            .collect()
    }

    /// Phase label of a 1-based epoch: 0 initial, `1..=N` stages, `N + 1` final.
    pub fn stage_of_epoch(&self, epoch: usize) -> usize {
        let mut end = self.initial_kd_epochs;
        if epoch <= end {
            return 0;
        }
        for (i, &e) in self.stage_epochs.iter().enumerate() {
            end += e;
            if epoch <= end {
                return i + 1;
            }
        }
        self.n_stages + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Blobs {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        dims: usize,
        spread: f64,
        #[serde(default = "one")]
        modes_per_class: usize,
        #[serde(default)]
        label_noise: f64,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
    },
}

fn one() -> usize {
    1
}

impl DataConfig {
    /// Loads or generates the train/test pair. Label noise, when set, is
    /// applied to the training split only.
    pub fn load(&self) -> Result<TrainTest> {
        match self {
            DataConfig::Blobs {
                classes,
                per_class,
                test_per_class,
                dims,
                spread,
                modes_per_class,
                label_noise,
                seed,
            } => {
                let spec = BlobSpec {
                    class_count: *classes,
                    per_class: *per_class,
                    dims: *dims,
                    spread: *spread,
                    seed: *seed,
                    modes_per_class: *modes_per_class,
                };
                let mut tt = synth_blobs_split(&spec, *test_per_class)?;
                tt.train = with_label_noise(&tt.train, *label_noise, seed.wrapping_add(1))?;
                Ok(tt)
            }
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(train_images, train_labels)?;
                let test = load_idx(test_images, test_labels)?.with_split(Split::Test);
                Ok(TrainTest { train, test })
            }
            DataConfig::Cifar { train, test } => Ok(TrainTest {
                train: load_cifar_binary(train)?,
                test: load_cifar_binary(test)?.with_split(Split::Test),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherTraining {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub lr_schedule: Vec<LrStep>,
    /// Epochs whose teacher checkpoints are kept as snapshots; used as the
    /// teacher-side curriculum source in the snapshot ablation.
    #[serde(default)]
    pub snapshot_epochs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Pre-trained teacher checkpoint; trained from scratch when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs_total: usize,
    pub batch_size: usize,
    pub data: DataConfig,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub teacher_training: TeacherTraining,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub lr_schedule: Vec<LrStep>,
    pub kd: KdConfig,
    pub slkd: StageSchedule,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default)]
    pub paths: PathsConfig,
}

fn check_optimizer(errs: &mut Vec<FieldError>, prefix: &str, opt: &OptimizerConfig) {
    let mut push = |f: &str, m: String| {
        errs.push(FieldError {
            field: format!("{prefix}.{f}"),
            message: m,
        })
    };
    match *opt {
        OptimizerConfig::Sgd {
            lr,
            momentum,
            weight_decay,
        } => {
            if !(lr > 0.0 && lr.is_finite()) {
                push("lr", format!("must be > 0, got {lr}"));
            }
            if !(0.0..1.0).contains(&momentum) {
                push("momentum", format!("must be in [0, 1), got {momentum}"));
            }
            if !(weight_decay >= 0.0) {
                push("weight_decay", format!("must be >= 0, got {weight_decay}"));
            }
        }
        OptimizerConfig::Adam {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } => {
            if !(lr > 0.0 && lr.is_finite()) {
                push("lr", format!("must be > 0, got {lr}"));
            }
            if !(0.0..1.0).contains(&beta1) {
                push("beta1", format!("must be in [0, 1), got {beta1}"));
            }
            if !(0.0..1.0).contains(&beta2) {
                push("beta2", format!("must be in [0, 1), got {beta2}"));
            }
            if !(eps > 0.0) {
                push("eps", format!("must be > 0, got {eps}"));
            }
            if !(weight_decay >= 0.0) {
                push("weight_decay", format!("must be >= 0, got {weight_decay}"));
            }
        }
    }
}

fn check_schedule(errs: &mut Vec<FieldError>, field: &str, schedule: &[LrStep]) {
    for (i, s) in schedule.iter().enumerate() {
        if !(s.multiplier > 0.0 && s.multiplier.is_finite()) {
            errs.push(FieldError {
                field: format!("{field}[{i}].multiplier"),
                message: format!("must be > 0, got {}", s.multiplier),
            });
        }
        if s.epoch == 0 {
            errs.push(FieldError {
                field: format!("{field}[{i}].epoch"),
                message: "epochs are 1-based".into(),
            });
        }
    }
    if schedule.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
        errs.push(FieldError {
            field: field.into(),
            message: "boundary epochs must be strictly increasing".into(),
        });
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn teacher_spec(&self) -> ModelSpec {
        self.teacher.spec().expect("validated config")
    }

    pub fn student_spec(&self) -> ModelSpec {
        self.student.spec().expect("validated config")
    }

    /// Checks every field, reporting all problems at once.
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut push = |field: &str, message: String| {
            errs.push(FieldError {
                field: field.into(),
                message,
            })
        };
        if self.batch_size == 0 {
            push("batch_size", "must be >= 1".into());
        }
        if self.epochs_total == 0 {
            push("epochs_total", "must be >= 1".into());
        }
        if !(self.kd.tau > 0.0 && self.kd.tau.is_finite()) {
            push("kd.tau", format!("must be > 0, got {}", self.kd.tau));
        }
        if let Err(e) = self.kd.mode.check(self.kd.lambda) {
            push("kd.lambda", e.to_string());
        }
        let teacher = self.teacher.spec();
        let student = self.student.spec();
        if let Err(e) = &teacher {
            push("teacher", e.clone());
        }
        if let Err(e) = &student {
            push("student", e.clone());
        }
        if let (Ok(t), Ok(s)) = (&teacher, &student) {
            if t.input != s.input {
                push("student.input", format!("{:?} differs from teacher input {:?}", s.input, t.input));
            }
            if t.num_classes().ok() != s.num_classes().ok() {
                push("student", "teacher and student must predict the same number of classes".into());
            }
        }

        let st = &self.slkd;
        if st.n_stages == 0 {
            push("slkd.n_stages", "must be >= 1".into());
        }
        if st.initial_kd_epochs == 0 {
            push("slkd.initial_kd_epochs", "must be >= 1".into());
        }
        if st.stage_epochs.len() != st.n_stages {
            push(
                "slkd.stage_epochs",
                format!("has {} entries for {} stages", st.stage_epochs.len(), st.n_stages),
            );
        }
        if st.stage_epochs.contains(&0) {
            push("slkd.stage_epochs", "every stage needs at least one epoch".into());
        }
        if st.total_epochs() > self.epochs_total {
            push(
                "slkd",
                format!(
                    "schedule spans {} epochs, exceeding epochs_total {}",
                    st.total_epochs(),
                    self.epochs_total
                ),
            );
        } else if st.total_epochs() < self.epochs_total {
            push(
                "slkd.final_epochs",
                format!(
                    "schedule spans {} epochs but epochs_total is {}",
                    st.total_epochs(),
                    self.epochs_total
                ),
            );
        }
        let tt = &self.teacher_training;
        if tt.snapshot_epochs.iter().any(|&e| e == 0 || e > tt.epochs) {
            push(
                "teacher_training.snapshot_epochs",
                format!("entries must lie in 1..={}", tt.epochs),
            );
        }
        if let Some(f) = self.augment.hflip {
            if !(0.0..=1.0).contains(&f.p) {
                push("augment.hflip.p", format!("must be in [0, 1], got {}", f.p));
            }
        }
        if let DataConfig::Blobs {
            classes,
            per_class,
            test_per_class,
            dims,
            spread,
            modes_per_class,
            label_noise,
            ..
        } = &self.data
        {
            for (name, v) in [
                ("classes", classes),
                ("per_class", per_class),
                ("test_per_class", test_per_class),
                ("dims", dims),
                ("modes_per_class", modes_per_class),
            ] {
                if *v == 0 {
                    push(&format!("data.{name}"), "must be >= 1".into());
                }
            }
            if !(*spread >= 0.0) {
                push("data.spread", format!("must be >= 0, got {spread}"));
            }
            if !(0.0..=1.0).contains(label_noise) {
                push("data.label_noise", format!("must be in [0, 1], got {label_noise}"));
            }
        }
        check_optimizer(&mut errs, "optimizer", &self.optimizer);
        check_optimizer(&mut errs, "teacher_training.optimizer", &tt.optimizer);
        check_schedule(&mut errs, "lr_schedule", &self.lr_schedule);
        check_schedule(&mut errs, "teacher_training.lr_schedule", &tt.lr_schedule);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}

/// Named configurations selectable with `--preset`.
pub mod presets {
    use super::*;
    use crate::data::{HFlip, PadCrop};
    use crate::nn::LayerKind;

    pub const NAMES: [&str; 3] = ["desk-blobs", "paper-n5", "paper-n3"];

    pub fn by_name(name: &str) -> Option<RunConfig> {
        match name {
            "desk-blobs" => Some(desk_blobs()),
            "paper-n5" => Some(paper_n5()),
            "paper-n3" => Some(paper_n3()),
            _ => None,
        }
    }

    /// Desk-scale run on noisy Gaussian blobs: 60 epochs, three stages.
    pub fn desk_blobs() -> RunConfig {
        let dims = 16;
        RunConfig {
            seed: 0,
            epochs_total: 60,
            batch_size: 32,
            data: DataConfig::Blobs {
                classes: 10,
                per_class: 200,
                test_per_class: 100,
                dims,
                spread: 0.12,
                modes_per_class: 3,
                label_noise: 0.35,
                seed: 2024,
            },
            teacher: ModelConfig::mlp(vec![dims, 1, 1], vec![64, 64], 10),
            student: ModelConfig::mlp(vec![dims, 1, 1], vec![32], 10),
            teacher_training: TeacherTraining {
                epochs: 40,
                optimizer: OptimizerConfig::Sgd {
                    lr: 0.02,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                },
                lr_schedule: vec![
                    LrStep { epoch: 20, multiplier: 0.1 },
                    LrStep { epoch: 30, multiplier: 0.1 },
                ],
                snapshot_epochs: vec![12, 24, 32],
            },
            optimizer: OptimizerConfig::Sgd {
                lr: 0.02,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
            lr_schedule: vec![LrStep { epoch: 50, multiplier: 0.1 }],
            kd: KdConfig {
                tau: 4.0,
                lambda: 4.0,
                mode: LambdaMode::Additive,
            },
            slkd: StageSchedule {
                n_stages: 3,
                initial_kd_epochs: 10,
                stage_epochs: vec![5, 5, 10],
                final_epochs: 30,
            },
            augment: AugmentPolicy::none(),
            paths: PathsConfig::default(),
        }
    }

    /// Small convolutional stand-in for the CIFAR pipelines: 3x32x32 input.
    fn cifar_net(widths: &[usize], classes: usize) -> ModelConfig {
        let mut layers: Vec<LayerSpec> = Vec::new();
        let mut cin = 3;
        let mut side = 32;
        for &w in widths {
            layers.push(LayerKind::Conv3x3 { in_channels: cin, out_channels: w }.into());
            layers.push(LayerKind::Relu.into());
            layers.push(LayerKind::MaxPool2x2.into());
            cin = w;
            side /= 2;
        }
        layers.push(LayerKind::Flatten.into());
        layers.push(LayerKind::Dense { inputs: cin * side * side, outputs: classes }.into());
        ModelConfig::explicit(ModelSpec::new(vec![3, 32, 32], layers))
    }

    fn paper_common(classes: usize, schedule: StageSchedule) -> RunConfig {
        let sgd = OptimizerConfig::Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        };
        let steps = vec![
            LrStep { epoch: 60, multiplier: 0.1 },
            LrStep { epoch: 120, multiplier: 0.1 },
            LrStep { epoch: 160, multiplier: 0.1 },
        ];
        RunConfig {
            seed: 0,
            epochs_total: schedule.total_epochs(),
            batch_size: 128,
            data: DataConfig::Cifar {
                train: (1..=5).map(|i| PathBuf::from(format!("data/cifar-10-batches-bin/data_batch_{i}.bin"))).collect(),
                test: vec![PathBuf::from("data/cifar-10-batches-bin/test_batch.bin")],
            },
            teacher: cifar_net(&[32, 64, 128], classes),
            student: cifar_net(&[16, 32], classes),
            teacher_training: TeacherTraining {
                epochs: 200,
                optimizer: sgd,
                lr_schedule: steps.clone(),
                snapshot_epochs: Vec::new(),
            },
            optimizer: sgd,
            lr_schedule: steps,
            kd: KdConfig {
                tau: 4.0,
                lambda: 16.0,
                mode: LambdaMode::Additive,
            },
            slkd: schedule,
            augment: AugmentPolicy {
                pad_crop: Some(PadCrop { pad: 4 }),
                hflip: Some(HFlip { p: 0.5 }),
                seed: 0,
            },
            paths: PathsConfig::default(),
        }
    }

    /// Five stages: 40 initial epochs, four 30-epoch stages, then 100 epochs
    /// with the fifth (full) stage. 260 epochs in total.
    pub fn paper_n5() -> RunConfig {
        let mut cfg = paper_common(
            10,
            StageSchedule {
                n_stages: 5,
                initial_kd_epochs: 40,
                stage_epochs: vec![30, 30, 30, 30, 100],
                final_epochs: 0,
            },
        );
        cfg.teacher_training.snapshot_epochs = vec![40, 70, 100, 130, 160];
        cfg
    }

    /// Three stages with snapshots taken entering epochs 41, 71 and 141 of 300.
    pub fn paper_n3() -> RunConfig {
        let mut cfg = paper_common(
            100,
            StageSchedule {
                n_stages: 3,
                initial_kd_epochs: 40,
                stage_epochs: vec![30, 70, 160],
                final_epochs: 0,
            },
        );
        cfg.teacher_training.snapshot_epochs = vec![60, 120, 160];
        cfg
    }
}
