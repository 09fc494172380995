mod support;

use std::path::Path;

use slkd::checkpoint;
use slkd::curriculum::CurriculumPlan;
use slkd::nn::{Model, Role};
use slkd::trainer::*;
use slkd::Error;
use support::tiny_config;

fn file_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn teacher_run_persists_final_best_and_snapshots() {
    let cfg = tiny_config();
    let data = cfg.data.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t = train_teacher(&cfg, &data, dir.path()).unwrap();
    assert_eq!(t.record.rows.len(), 4);
    assert_eq!(t.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(t.snapshots.iter().all(|(_, p)| p.exists()));
    let best = checkpoint::load(&t.best_checkpoint).unwrap();
    assert_eq!(best.id, t.best_id);
    assert_eq!(best.meta["epoch"], t.best_epoch.to_string());
    assert_eq!(t.best_accuracy, t.record.best_accuracy().unwrap());
    let fin = checkpoint::load(&t.final_checkpoint).unwrap();
    assert_eq!(fin.model.params(), t.model.params());
    assert_eq!(TrainRecord::load(&t.dir.join("record.csv")).unwrap(), t.record);
}

#[test]
fn zero_teacher_epochs_keep_the_initialization() {
    let mut cfg = tiny_config();
    cfg.teacher_training.epochs = 0;
    cfg.teacher_training.snapshot_epochs.clear();
    let data = cfg.data.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t = train_teacher(&cfg, &data, dir.path()).unwrap();
    let init = Model::init(cfg.teacher_spec(), Role::Teacher, derive_seed(cfg.seed, 1)).unwrap();
    assert!(t.record.rows.is_empty());
    assert_eq!(checkpoint::load(&t.final_checkpoint).unwrap().model.params(), init.params());
    assert_eq!(checkpoint::load(&t.best_checkpoint).unwrap().model.params(), init.params());
}

#[test]
fn teacher_fits_separable_blobs() {
    let mut cfg = tiny_config();
    cfg.data = DataConfig::Blobs {
        classes: 3,
        per_class: 40,
        test_per_class: 10,
        dims: 4,
        spread: 0.02,
        modes_per_class: 1,
        label_noise: 0.0,
        seed: 9,
    };
    cfg.teacher = ModelConfig::mlp(vec![4, 1, 1], vec![16], 3);
    cfg.student = ModelConfig::mlp(vec![4, 1, 1], vec![6], 3);
    cfg.teacher_training.epochs = 30;
    cfg.teacher_training.lr_schedule.clear();
    cfg.teacher_training.snapshot_epochs.clear();
    let data = cfg.data.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t = train_teacher(&cfg, &data, dir.path()).unwrap();
    let train_acc = evaluate(&t.model, &data.train).unwrap().top1_accuracy;
    assert!(train_acc >= 0.99, "train accuracy {train_acc}");
}

#[test]
fn kd_with_zero_lambda_is_supervised_training() {
    let mut cfg = tiny_config();
    cfg.kd.lambda = 0.0;
    let data = cfg.data.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t = train_teacher(&cfg, &data, dir.path()).unwrap();
    let kd = distill_kd(&cfg, &data, &t.final_checkpoint, dir.path()).unwrap();
    let alone = train_student_alone(&cfg, &data, dir.path()).unwrap();
    assert_eq!(kd.record.to_csv_string(), alone.record.to_csv_string());
    assert_eq!(kd.model.params(), alone.model.params());
}

#[test]
fn distillation_never_touches_the_teacher() {
    let cfg = tiny_config();
    let data = cfg.data.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t = train_teacher(&cfg, &data, dir.path()).unwrap();
    let before = file_bytes(&t.final_checkpoint);
    distill_kd(&cfg, &data, &t.final_checkpoint, dir.path()).unwrap();
    distill_slkd(&cfg, &data, &t.final_checkpoint, &SnapshotSource::Student, dir.path(), "slkd").unwrap();
    assert_eq!(file_bytes(&t.final_checkpoint), before);
    assert_eq!(checkpoint::load(&t.final_checkpoint).unwrap().model.params(), t.model.params());
}

#[test]
fn identical_student_teacher_starts_with_zero_kd() {
    use slkd::losses::kd_loss;
    let cfg = tiny_config();
    let data = cfg.data.load().unwrap();
    let student = Model::init(cfg.student_spec(), Role::Student, derive_seed(cfg.seed, 4)).unwrap();
    let (x, _) = data.train.gather(&[0, 1, 2, 3]).unwrap();
    let logits = student.forward(&x).unwrap();
    assert_eq!(kd_loss(&logits, &logits, cfg.kd.tau).unwrap(), 0.0);
}

#[test]
fn slkd_accounting_schedule_and_persistence() {
    let cfg = tiny_config();
    let data = cfg.data.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t = train_teacher(&cfg, &data, dir.path()).unwrap();
    let run = distill_slkd(&cfg, &data, &t.final_checkpoint, &SnapshotSource::Student, dir.path(), "slkd").unwrap();
    let rows = &run.run.record.rows;
    let n = data.train.len();
    assert_eq!(rows.len(), cfg.epochs_total);
    assert_eq!(rows.iter().map(|r| r.stage).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 4]);
    let mut cum = 0;
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.iters, r.active.div_ceil(cfg.batch_size));
        cum += r.iters;
        assert_eq!(r.cum_iters, cum);
        assert_eq!(r.lr, lr_at(cfg.optimizer.base_lr(), &cfg.lr_schedule, r.epoch));
        if r.stage > 1 {
            assert!(r.active >= rows[i - 1].active);
        }
    }
    let floor_thirds: usize = data.train.class_counts().iter().map(|c| c / 3).sum();
    assert_eq!(rows[1].active, floor_thirds);
    assert_eq!(rows.last().unwrap().active, n);
    assert_eq!(run.plans.len(), 3);
    for (plan, path) in run.plans.iter().zip(&run.plan_paths) {
        let back = CurriculumPlan::read_csv(std::fs::File::open(path).unwrap(), plan.source_snapshot.clone()).unwrap();
        assert_eq!(&back, plan);
    }
    for (k, p) in run.snapshot_paths.iter().enumerate() {
        let snap = checkpoint::load(p).unwrap();
        assert_eq!(snap.model.role(), Role::Snapshot);
        assert_eq!(snap.id, run.plans[k].source_snapshot);
    }
}

#[test]
fn single_stage_reduces_to_kd_after_the_initial_phase() {
    let mut cfg = tiny_config();
    cfg.slkd = StageSchedule {
        n_stages: 1,
        initial_kd_epochs: 2,
        stage_epochs: vec![4],
        final_epochs: 0,
    };
    let data = cfg.data.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t = train_teacher(&cfg, &data, dir.path()).unwrap();
    let kd = distill_kd(&cfg, &data, &t.final_checkpoint, dir.path()).unwrap();
    let s = distill_slkd(&cfg, &data, &t.final_checkpoint, &SnapshotSource::Student, dir.path(), "slkd").unwrap();
    let strip = |r: &TrainRecord| {
        r.rows
            .iter()
            .map(|e| (e.epoch, e.active, e.cum_iters, e.train_loss, e.test_acc, e.lr))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&kd.record), strip(&s.run.record));
    assert_eq!(kd.model.params(), s.run.model.params());
}

#[test]
fn runs_are_deterministic() {
    let cfg = tiny_config();
    let data = cfg.data.load().unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ta = train_teacher(&cfg, &data, a.path()).unwrap();
    let tb = train_teacher(&cfg, &data, b.path()).unwrap();
    assert_eq!(ta.final_id, tb.final_id);
    let sa = distill_slkd(&cfg, &data, &ta.final_checkpoint, &SnapshotSource::Student, a.path(), "slkd").unwrap();
    let sb = distill_slkd(&cfg, &data, &tb.final_checkpoint, &SnapshotSource::Student, b.path(), "slkd").unwrap();
    assert_eq!(
        file_bytes(&sa.run.dir.join("record.csv")),
        file_bytes(&sb.run.dir.join("record.csv"))
    );
    assert_eq!(sa.run.checkpoint_id, sb.run.checkpoint_id);
}

#[test]
fn replaying_student_snapshots_reproduces_the_run() {
    let cfg = tiny_config();
    let data = cfg.data.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t = train_teacher(&cfg, &data, dir.path()).unwrap();
    let live = distill_slkd(&cfg, &data, &t.final_checkpoint, &SnapshotSource::Student, dir.path(), "live").unwrap();
    let replay = distill_slkd(
        &cfg,
        &data,
        &t.final_checkpoint,
        &SnapshotSource::Fixed(live.snapshot_paths.clone()),
        dir.path(),
        "replay",
    )
    .unwrap();
    assert_eq!(live.plans, replay.plans);
    assert_eq!(live.run.record, replay.run.record);
}

#[test]
fn snapshot_ablation_pairs_both_sources() {
    let cfg = tiny_config();
    let data = cfg.data.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t = train_teacher(&cfg, &data, dir.path()).unwrap();
    let ab = ablate_snapshot_source(&cfg, &data, &t, dir.path()).unwrap();
    assert_eq!(ab.student_snapshots.run.record.rows.len(), ab.teacher_snapshots.run.record.rows.len());
    assert_eq!(ab.teacher_snapshots.snapshot_paths, t.snapshots.iter().map(|s| s.1.clone()).collect::<Vec<_>>());

    let mut missing = cfg.clone();
    missing.teacher_training.snapshot_epochs = vec![1, 2, 4];
    assert!(ablate_snapshot_source(&missing, &data, &t, dir.path()).is_err());
}

#[test]
fn over_budget_schedule_fails_before_training() {
    let mut cfg = tiny_config();
    let data = cfg.data.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t = train_teacher(&cfg, &data, dir.path()).unwrap();
    cfg.slkd.final_epochs = 5;
    let err = distill_slkd(&cfg, &data, &t.final_checkpoint, &SnapshotSource::Student, dir.path(), "slkd").unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(!dir.path().join("slkd").exists());
}

#[test]
fn divergence_is_reported() {
    let mut cfg = tiny_config();
    cfg.teacher_training.optimizer = slkd::nn::OptimizerConfig::Sgd {
        lr: 1e30,
        momentum: 0.9,
        weight_decay: 0.0,
    };
    let data = cfg.data.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    match train_teacher(&cfg, &data, dir.path()) {
        Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn teacher_with_other_class_count_is_rejected() {
    let cfg = tiny_config();
    let data = cfg.data.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let other = Model::init(slkd::nn::ModelSpec::mlp(vec![4, 1, 1], &[3], 5), Role::Teacher, 1).unwrap();
    let path = dir.path().join("other.ckpt");
    checkpoint::save(&other, None, &Default::default(), &path).unwrap();
    assert!(distill_kd(&cfg, &data, &path, dir.path()).is_err());
}
