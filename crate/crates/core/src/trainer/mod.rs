//! Training loops for the teacher, the plain student baselines and the
//! staged curriculum student.

pub mod config;
pub mod record;

use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use config::{
    lr_at, presets, ConfigError, DataConfig, FieldError, KdConfig, LrStep, ModelConfig, RunConfig, StageSchedule,
    TeacherTraining,
};
pub use record::{EpochRecord, TrainRecord, RECORD_CSV_HEADER};

use crate::checkpoint::{self, Meta};
use crate::curriculum::{partition_balanced, score_dataset, stage_active_set, CurriculumPlan};
use crate::data::{augment, make_batches, AugmentPolicy, Dataset, TrainTest};
use crate::error::{Error, Result};
use crate::losses::{objective_with_grad, LambdaMode, Objective};
use crate::metrics::{evaluate_indices, Evaluation};
use crate::nn::{Model, ModelSpec, Optimizer, Role};

const TEACHER_INIT: u64 = 1;
const TEACHER_BATCHES: u64 = 2;
const TEACHER_AUGMENT: u64 = 3;
const STUDENT_INIT: u64 = 4;
const STUDENT_BATCHES: u64 = 5;
const STUDENT_AUGMENT: u64 = 6;

/// Independent sub-seed of `seed` for one purpose.
pub fn derive_seed(seed: u64, domain: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain);
    rng.next_u64()
}

/// First 16 hex digits of the SHA-256 of the canonical TOML form.
pub fn config_hash(cfg: &RunConfig) -> String {
    Sha256::digest(cfg.to_toml().as_bytes())[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Top-1 accuracy and mean cross-entropy over a whole dataset.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    let all: Vec<usize> = (0..data.len()).collect();
    evaluate_indices(model, data, &all)
}

/// Shared per-epoch machinery: batching, augmentation, the optimizer step.
struct EpochRunner<'a> {
    data: &'a TrainTest,
    batch_size: usize,
    batch_seed: u64,
    augment: AugmentPolicy,
    base_lr: f64,
    schedule: &'a [LrStep],
}

impl EpochRunner<'_> {
    /// One optimizer step on the batch `idx`; returns its mean loss.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        model: &mut Model,
        opt: &mut Optimizer,
        teacher: Option<&Model>,
        objective: &Objective,
        idx: &[usize],
        epoch: usize,
        b: usize,
        lr: f64,
    ) -> Result<f64> {
        let (x, labels) = self.data.train.gather(idx)?;
        let x = augment(&x, &self.augment, epoch as u64, b as u64)?;
        let (logits, trace) = model.forward_trace(&x)?;
        let teacher_logits = match teacher {
            Some(t) if objective.needs_teacher() => Some(t.forward(&x)?),
            _ => None,
        };
        let (loss, grad) = objective_with_grad(objective, &logits, teacher_logits.as_ref(), &labels)?;
        if !loss.total.is_finite() {
            return Ok(loss.total);
        }
        let grads = model.backward(&trace, &grad)?;
        opt.step(model, &grads, lr)?;
        if model.params().iter().flatten().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite("parameters after the update".into()));
        }
        Ok(loss.total)
    }

    fn lr(&self, epoch: usize) -> f64 {
        lr_at(self.base_lr, self.schedule, epoch)
    }

    /// Trains one epoch on `active`; returns (mean loss per sample, iterations).
    fn run(
        &self,
        model: &mut Model,
        opt: &mut Optimizer,
        teacher: Option<&Model>,
        objective: &Objective,
        active: &[usize],
        epoch: usize,
    ) -> Result<(f64, usize)> {
        let lr = self.lr(epoch);
        let plan = make_batches(active, self.batch_size, derive_seed(self.batch_seed, epoch as u64))?;
        let diverged = |message: String| Error::Diverged { epoch, message };
        let mut loss_sum = 0.0;
        let mut iters = 0;
        for (b, idx) in plan.batches().enumerate() {
            let loss = self.step(model, opt, teacher, objective, idx, epoch, b, lr).map_err(|e| match e {
                Error::NonFinite(m) => diverged(format!("{m} at batch {b}")),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss} at batch {b}")));
            }
            loss_sum += loss * idx.len() as f64;
            iters += 1;
        }
        Ok((loss_sum / active.len() as f64, iters))
    }
}

fn meta(pairs: &[(&str, String)]) -> Meta {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Outcome of teacher training.
#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub dir: PathBuf,
    pub model: Model,
    pub record: TrainRecord,
    pub final_checkpoint: PathBuf,
    pub final_id: String,
    pub best_checkpoint: PathBuf,
    pub best_id: String,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    /// `(epoch, path)` for every configured snapshot epoch.
    pub snapshots: Vec<(usize, PathBuf)>,
}

/// Trains the teacher under `out/teacher`, keeping the final, best-by-test
/// and configured snapshot checkpoints.
pub fn train_teacher(cfg: &RunConfig, data: &TrainTest, out: &Path) -> Result<TeacherRun> {
    cfg.validate()?;
    let dir = out.join("teacher");
    let tt = &cfg.teacher_training;
    let mut model = Model::init(cfg.teacher_spec(), Role::Teacher, derive_seed(cfg.seed, TEACHER_INIT))?;
    check_data(model.spec(), data)?;
    let mut opt = Optimizer::new(tt.optimizer);
    let runner = EpochRunner {
        data,
        batch_size: cfg.batch_size,
        batch_seed: derive_seed(cfg.seed, TEACHER_BATCHES),
        augment: seeded(cfg.augment, derive_seed(cfg.seed, TEACHER_AUGMENT)),
        base_lr: tt.optimizer.base_lr(),
        schedule: &tt.lr_schedule,
    };
    let all: Vec<usize> = (0..data.train.len()).collect();
    let best_path = dir.join("best.ckpt");
    let mut best = (0usize, f64::NEG_INFINITY, String::new());
    let mut record = TrainRecord::default();
    let mut snapshots = Vec::new();
    let mut cum = 0;
    for epoch in 1..=tt.epochs {
        let (train_loss, iters) = runner.run(&mut model, &mut opt, None, &Objective::Supervised, &all, epoch)?;
        cum += iters;
        let test_acc = evaluate(&model, &data.test)?.top1_accuracy;
        record.push(EpochRecord {
            epoch,
            stage: 0,
            active: all.len(),
            iters,
            cum_iters: cum,
            train_loss,
            test_acc,
            lr: runner.lr(epoch),
        });
        let m = meta(&[("arm", "teacher".into()), ("epoch", epoch.to_string()), ("seed", cfg.seed.to_string())]);
        if test_acc > best.1 {
            let id = checkpoint::save(&model, Some(&opt.state), &m, &best_path)?;
            best = (epoch, test_acc, id);
        }
        if tt.snapshot_epochs.contains(&epoch) {
            let path = dir.join("snapshots").join(format!("epoch{epoch:04}.ckpt"));
            checkpoint::save(&model, None, &m, &path)?;
            snapshots.push((epoch, path));
        }
    }
    if tt.epochs == 0 {
        best = (0, evaluate(&model, &data.test)?.top1_accuracy, String::new());
        best.2 = checkpoint::save(&model, None, &Meta::new(), &best_path)?;
    }
    let final_checkpoint = dir.join("final.ckpt");
    let m = meta(&[("arm", "teacher".into()), ("epoch", tt.epochs.to_string()), ("seed", cfg.seed.to_string())]);
    let final_id = checkpoint::save(&model, Some(&opt.state), &m, &final_checkpoint)?;
    record.save(&dir.join("record.csv"))?;
    Ok(TeacherRun {
        dir,
        model,
        record,
        final_checkpoint,
        final_id,
        best_checkpoint: best_path,
        best_id: best.2,
        best_epoch: best.0,
        best_accuracy: best.1,
        snapshots,
    })
}

fn seeded(mut policy: AugmentPolicy, seed: u64) -> AugmentPolicy {
    policy.seed ^= seed;
    policy
}

fn check_data(spec: &ModelSpec, data: &TrainTest) -> Result<()> {
    if data.train.sample_shape() != spec.input.as_slice() || data.test.sample_shape() != spec.input.as_slice() {
        return Err(Error::Shape(format!(
            "model expects inputs {:?} but data samples are {:?}",
            spec.input,
            data.train.sample_shape()
        )));
    }
    let classes = spec.num_classes()?;
    if data.train.class_count() > classes || data.test.class_count() > classes {
        return Err(Error::Shape(format!(
            "model predicts {classes} classes but data has {}",
            data.train.class_count().max(data.test.class_count())
        )));
    }
    Ok(())
}

/// Outcome of one student training arm.
#[derive(Debug, Clone)]
pub struct StudentRun {
    pub arm: String,
    pub dir: PathBuf,
    pub model: Model,
    pub record: TrainRecord,
    pub checkpoint: PathBuf,
    pub checkpoint_id: String,
    pub final_eval: Evaluation,
}

struct StudentSession<'a> {
    cfg: &'a RunConfig,
    runner: EpochRunner<'a>,
    model: Model,
    opt: Optimizer,
    record: TrainRecord,
    cum: usize,
}

impl<'a> StudentSession<'a> {
    fn new(cfg: &'a RunConfig, data: &'a TrainTest) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(cfg.student_spec(), Role::Student, derive_seed(cfg.seed, STUDENT_INIT))?;
        check_data(model.spec(), data)?;
        Ok(StudentSession {
            cfg,
            runner: EpochRunner {
                data,
                batch_size: cfg.batch_size,
                batch_seed: derive_seed(cfg.seed, STUDENT_BATCHES),
                augment: seeded(cfg.augment, derive_seed(cfg.seed, STUDENT_AUGMENT)),
                base_lr: cfg.optimizer.base_lr(),
                schedule: &cfg.lr_schedule,
            },
            model,
            opt: Optimizer::new(cfg.optimizer),
            record: TrainRecord::default(),
            cum: 0,
        })
    }

    fn epoch(
        &mut self,
        epoch: usize,
        stage: usize,
        teacher: Option<&Model>,
        objective: &Objective,
        active: &[usize],
    ) -> Result<()> {
        let (train_loss, iters) = self.runner.run(&mut self.model, &mut self.opt, teacher, objective, active, epoch)?;
        self.cum += iters;
        let test_acc = evaluate(&self.model, &self.runner.data.test)?.top1_accuracy;
        self.record.push(EpochRecord {
            epoch,
            stage,
            active: active.len(),
            iters,
            cum_iters: self.cum,
            train_loss,
            test_acc,
            lr: self.runner.lr(epoch),
        });
        Ok(())
    }

    fn finish(self, arm: &str, dir: PathBuf) -> Result<StudentRun> {
        let checkpoint = dir.join("student.ckpt");
        let m = meta(&[
            ("arm", arm.into()),
            ("epoch", self.cfg.epochs_total.to_string()),
            ("seed", self.cfg.seed.to_string()),
        ]);
        let checkpoint_id = checkpoint::save(&self.model, Some(&self.opt.state), &m, &checkpoint)?;
        self.record.save(&dir.join("record.csv"))?;
        let final_eval = evaluate(&self.model, &self.runner.data.test)?;
        Ok(StudentRun {
            arm: arm.into(),
            dir,
            model: self.model,
            record: self.record,
            checkpoint,
            checkpoint_id,
            final_eval,
        })
    }
}

fn load_teacher(path: &Path, cfg: &RunConfig) -> Result<Model> {
    let teacher = checkpoint::load(path)?.model;
    if teacher.num_classes() != cfg.student_spec().num_classes()? {
        return Err(Error::Shape(format!(
            "teacher predicts {} classes, student {}",
            teacher.num_classes(),
            cfg.student_spec().num_classes()?
        )));
    }
    Ok(teacher)
}

fn all_indices(data: &TrainTest) -> Vec<usize> {
    (0..data.train.len()).collect()
}

/// The student trained on labels alone, under `out/student`.
pub fn train_student_alone(cfg: &RunConfig, data: &TrainTest, out: &Path) -> Result<StudentRun> {
    let mut s = StudentSession::new(cfg, data)?;
    let all = all_indices(data);
    for epoch in 1..=cfg.epochs_total {
        s.epoch(epoch, 0, None, &Objective::Supervised, &all)?;
    }
    s.finish("student", out.join("student"))
}

fn kd_objective(kd: &KdConfig) -> Objective {
    Objective::Distill {
        tau: kd.tau,
        lambda: kd.lambda,
        mode: kd.mode,
    }
}

/// Uniform distillation on the full training set for `epochs_total` epochs,
/// under `out/kd`. The teacher checkpoint is only read.
pub fn distill_kd(cfg: &RunConfig, data: &TrainTest, teacher: &Path, out: &Path) -> Result<StudentRun> {
    let teacher = load_teacher(teacher, cfg)?;
    let mut s = StudentSession::new(cfg, data)?;
    let all = all_indices(data);
    let objective = kd_objective(&cfg.kd);
    for epoch in 1..=cfg.epochs_total {
        s.epoch(epoch, 0, Some(&teacher), &objective, &all)?;
    }
    s.finish("kd", out.join("kd"))
}

/// Where the difficulty-scoring model for each stage comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum SnapshotSource {
    /// The student itself at each stage boundary.
    Student,
    /// Fixed checkpoints, one per stage (e.g. teacher history).
    Fixed(Vec<PathBuf>),
}

#[derive(Debug, Clone)]
pub struct SlkdRun {
    pub run: StudentRun,
    /// The plan built at each stage boundary.
    pub plans: Vec<CurriculumPlan>,
    pub plan_paths: Vec<PathBuf>,
    /// Snapshot checkpoints used for scoring, one per stage.
    pub snapshot_paths: Vec<PathBuf>,
}

/// Staged distillation: an initial uniform phase, then at each stage boundary
/// the snapshot model rescores the training set, the set is repartitioned
/// into class-balanced difficulty tiers and the active set grows to the
/// easiest `s` tiers. A final phase trains on everything.
pub fn distill_slkd(
    cfg: &RunConfig,
    data: &TrainTest,
    teacher: &Path,
    source: &SnapshotSource,
    out: &Path,
    arm: &str,
) -> Result<SlkdRun> {
    let teacher = load_teacher(teacher, cfg)?;
    let sched = &cfg.slkd;
    if let SnapshotSource::Fixed(paths) = source {
        if paths.len() != sched.n_stages {
            return Err(Error::InvalidArgument(format!(
                "{} fixed snapshots for {} stages",
                paths.len(),
                sched.n_stages
            )));
        }
    }
    let dir = out.join(arm);
    let mut s = StudentSession::new(cfg, data)?;
    let all = all_indices(data);
    let initial = kd_objective(&cfg.kd);
    let staged = Objective::Distill {
        tau: cfg.kd.tau,
        lambda: cfg.kd.lambda,
        mode: LambdaMode::Additive,
    };
    let starts = sched.stage_starts();
    let mut plans = Vec::new();
    let mut plan_paths = Vec::new();
    let mut snapshot_paths = Vec::new();
    let mut active = all.clone();
    for epoch in 1..=cfg.epochs_total {
        let stage = sched.stage_of_epoch(epoch);
        if let Some(k) = starts.iter().position(|&e| e == epoch) {
            let stage_no = k + 1;
            let snap_path = match source {
                SnapshotSource::Student => {
                    let path = dir.join("snapshots").join(format!("stage{stage_no}.ckpt"));
                    let m = meta(&[
                        ("arm", arm.into()),
                        ("epoch", (epoch - 1).to_string()),
                        ("stage", stage_no.to_string()),
                    ]);
                    checkpoint::save(&s.model.clone().with_role(Role::Snapshot), None, &m, &path)?;
                    path
                }
                SnapshotSource::Fixed(paths) => paths[k].clone(),
            };
            let snap = checkpoint::load(&snap_path)?;
            let scores = score_dataset(&snap.model, &data.train)?;
            let plan = partition_balanced(&scores, sched.n_stages, snap.id)?;
            let plan_path = dir.join("plans").join(format!("stage{stage_no}.csv"));
            checkpoint::write_atomic(&plan_path, plan.to_csv_string().as_bytes())?;
            active = stage_active_set(&plan, stage_no)?;
            plans.push(plan);
            plan_paths.push(plan_path);
            snapshot_paths.push(snap_path);
        }
        let (objective, set) = match stage {
            0 => (&initial, &all),
            s if s > sched.n_stages => (&staged, &all),
            _ => (&staged, &active),
        };
        s.epoch(epoch, stage, Some(&teacher), objective, set)?;
    }
    let run = s.finish(arm, dir)?;
    Ok(SlkdRun {
        run,
        plans,
        plan_paths,
        snapshot_paths,
    })
}

/// Both snapshot sources trained under otherwise identical settings.
#[derive(Debug, Clone)]
pub struct SnapshotAblation {
    pub student_snapshots: SlkdRun,
    pub teacher_snapshots: SlkdRun,
}

/// Runs the staged student twice: scored by its own snapshots and by the
/// teacher's configured snapshot checkpoints.
pub fn ablate_snapshot_source(
    cfg: &RunConfig,
    data: &TrainTest,
    teacher: &TeacherRun,
    out: &Path,
) -> Result<SnapshotAblation> {
    let paths: Vec<PathBuf> = cfg
        .teacher_training
        .snapshot_epochs
        .iter()
        .map(|e| {
            teacher
                .snapshots
                .iter()
                .find(|(se, _)| se == e)
                .map(|(_, p)| p.clone())
                .ok_or_else(|| Error::InvalidArgument(format!("teacher run has no snapshot at epoch {e}")))
        })
        .collect::<Result<_>>()?;
    let teacher_ckpt = &teacher.final_checkpoint;
    Ok(SnapshotAblation {
        student_snapshots: distill_slkd(cfg, data, teacher_ckpt, &SnapshotSource::Student, out, "slkd-student-snap")?,
        teacher_snapshots: distill_slkd(cfg, data, teacher_ckpt, &SnapshotSource::Fixed(paths), out, "slkd-teacher-snap")?,
    })
}
