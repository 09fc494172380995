//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::curriculum::{partition_balanced, score_dataset, CurriculumPlan};
use crate::data::TrainTest;
use crate::report::{plot_svg, ComparisonTable, Metric, Series};
use crate::trainer::{
    ablate_snapshot_source, config_hash, distill_kd, distill_slkd, evaluate, presets, train_student_alone,
    train_teacher, RunConfig, SnapshotSource, TrainRecord,
};

pub const RUN_ROOT_ENV: &str = "SLKD_RUN_ROOT";
pub const RUN_META: &str = "run.toml";

#[derive(Debug, Parser)]
#[command(name = "slkd", version, about = "Staged curriculum knowledge distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named configuration (desk-blobs, paper-n5, paper-n3).
    #[arg(long)]
    pub preset: Option<String>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root; defaults to $SLKD_RUN_ROOT, then ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct TeacherArg {
    /// Teacher checkpoint; defaults to the config's path, then the run's own teacher.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SnapshotKind {
    Student,
    Teacher,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Loss,
    Acc,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the teacher and keep final, best and snapshot checkpoints.
    TrainTeacher(RunArgs),
    /// Train the student on labels only.
    TrainStudent(RunArgs),
    /// Uniform distillation from a teacher checkpoint.
    DistillKd {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        teacher: TeacherArg,
    },
    /// Staged curriculum distillation.
    DistillSlkd {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        teacher: TeacherArg,
        /// Teacher snapshot checkpoints to score with, one per stage.
        #[arg(long = "snapshot", num_args = 1..)]
        snapshots: Vec<PathBuf>,
    },
    /// Teacher, student alone, KD and staged KD in one run directory.
    RunAll(RunArgs),
    /// Staged KD with student snapshots versus teacher snapshots.
    AblateSnapshots(RunArgs),
    /// Per-sample difficulty under a model checkpoint.
    Score {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint whose predictions define difficulty.
        #[arg(long)]
        model: PathBuf,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Class-balanced stage plan from a model checkpoint.
    Partition {
        #[command(flatten)]
        run: RunArgs,
        /// Snapshot checkpoint used for scoring.
        #[arg(long)]
        model: PathBuf,
        /// Number of stages N.
        #[arg(long)]
        stages: usize,
        /// Plan CSV; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Top-1 accuracy and mean loss of a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to evaluate.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Median comparison table over run directories (one per seed).
    Report {
        /// Run directories, one per seed (name ends in -s<seed>).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Markdown file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// SVG curve of a metric against cumulative iterations.
    Plot {
        /// Record files, optionally as LABEL=PATH.
        #[arg(required = true)]
        records: Vec<String>,
        #[arg(long, value_enum, default_value = "acc")]
        metric: MetricArg,
        /// SVG file to write.
        #[arg(long)]
        output: PathBuf,
    },
}

/// Resolves the configuration: file or preset, then the seed override.
pub fn resolve_config(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?
        }
        (None, Some(name)) => match presets::by_name(name) {
            Some(cfg) => cfg,
            None => bail!("unknown preset {name}; expected one of {}", presets::NAMES.join(", ")),
        },
        (None, None) => presets::desk_blobs(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_root(args: &RunArgs) -> PathBuf {
    args.out
        .clone()
        .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// `<root>/<config hash>-s<seed>`; the hash ignores the seed so that seeds
/// of one configuration sort together.
pub fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    let mut unseeded = cfg.clone();
    unseeded.seed = 0;
    root.join(format!("{}-s{}", config_hash(&unseeded), cfg.seed))
}

struct Run {
    cfg: RunConfig,
    dir: PathBuf,
}

impl Run {
    fn open(args: &RunArgs) -> anyhow::Result<Self> {
        let cfg = resolve_config(args)?;
        let dir = run_dir(&run_root(args), &cfg);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let _ = std::fs::remove_file(dir.join("FAILED"));
        let run = Run { cfg, dir };
        run.write_metadata()?;
        Ok(run)
    }

    /// Rewrites `run.toml`: the resolved config plus the content id of every
    /// checkpoint and plan currently in the run directory.
    fn write_metadata(&self) -> anyhow::Result<()> {
        let mut artifacts = toml::Table::new();
        for path in artifact_files(&self.dir)? {
            let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let rel = path.strip_prefix(&self.dir).unwrap_or(&path);
            artifacts.insert(
                rel.to_string_lossy().replace('\\', "/"),
                checkpoint::checkpoint_id(&bytes).into(),
            );
        }
        let mut doc = toml::Table::new();
        doc.insert("config".into(), toml::Value::try_from(&self.cfg)?);
        doc.insert("artifacts".into(), artifacts.into());
        checkpoint::write_atomic(&self.dir.join(RUN_META), toml::to_string(&doc)?.as_bytes())?;
        Ok(())
    }

    fn data(&self) -> anyhow::Result<TrainTest> {
        Ok(self.cfg.data.load()?)
    }

    /// Runs `f`, then refreshes the metadata; leaves a FAILED marker with the
    /// error on failure.
    fn guard<T>(&self, f: impl FnOnce() -> anyhow::Result<T>) -> anyhow::Result<T> {
        let result = f().and_then(|v| self.write_metadata().map(|()| v));
        if let Err(e) = &result {
            let _ = std::fs::write(self.dir.join("FAILED"), format!("{e:#}\n"));
        }
        result
    }

    fn teacher(&self, arg: &TeacherArg) -> anyhow::Result<PathBuf> {
        let path = arg
            .teacher
            .clone()
            .or_else(|| self.cfg.paths.teacher_checkpoint.clone())
            .unwrap_or_else(|| self.dir.join("teacher").join("final.ckpt"));
        if !path.exists() {
            bail!("teacher checkpoint {} not found; run train-teacher first", path.display());
        }
        Ok(path)
    }
}

/// Checkpoints and plan CSVs under `dir`, sorted.
fn artifact_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut pending = vec![dir.to_path_buf()];
    while let Some(d) = pending.pop() {
        for entry in std::fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                pending.push(path);
            } else {
                let ext = path.extension().and_then(|e| e.to_str());
                let in_plans = path.parent().and_then(Path::file_name).is_some_and(|n| n == "plans");
                if ext == Some("ckpt") || (ext == Some("csv") && in_plans) {
                    found.push(path);
                }
            }
        }
    }
    found.sort();
    Ok(found)
}

fn report_student(out: &mut impl Write, run: &crate::trainer::StudentRun) -> anyhow::Result<()> {
    writeln!(
        out,
        "{}: test top-1 {:.4}, loss {:.4}, {} iterations, checkpoint {} ({})",
        run.arm,
        run.final_eval.top1_accuracy,
        run.final_eval.mean_loss,
        run.record.total_iters(),
        run.checkpoint.display(),
        run.checkpoint_id
    )?;
    Ok(())
}

fn emit(output: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match output {
        Some(path) => checkpoint::write_atomic(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::TrainTeacher(args) => {
            let run = Run::open(&args)?;
            run.guard(|| {
                let t = train_teacher(&run.cfg, &run.data()?, &run.dir)?;
                writeln!(
                    out,
                    "teacher: final test top-1 {:.4}, best {:.4} at epoch {}\nfinal {} ({})\nbest {} ({})",
                    t.record.final_accuracy().unwrap_or(f64::NAN),
                    t.best_accuracy,
                    t.best_epoch,
                    t.final_checkpoint.display(),
                    t.final_id,
                    t.best_checkpoint.display(),
                    t.best_id
                )?;
                Ok(())
            })
        }
        Command::TrainStudent(args) => {
            let run = Run::open(&args)?;
            run.guard(|| report_student(&mut out, &train_student_alone(&run.cfg, &run.data()?, &run.dir)?))
        }
        Command::DistillKd { run: args, teacher } => {
            let run = Run::open(&args)?;
            run.guard(|| {
                let t = run.teacher(&teacher)?;
                report_student(&mut out, &distill_kd(&run.cfg, &run.data()?, &t, &run.dir)?)
            })
        }
        Command::DistillSlkd {
            run: args,
            teacher,
            snapshots,
        } => {
            let run = Run::open(&args)?;
            run.guard(|| {
                let t = run.teacher(&teacher)?;
                let source = if snapshots.is_empty() {
                    SnapshotSource::Student
                } else {
                    SnapshotSource::Fixed(snapshots)
                };
                let r = distill_slkd(&run.cfg, &run.data()?, &t, &source, &run.dir, "slkd")?;
                report_student(&mut out, &r.run)
            })
        }
        Command::RunAll(args) => {
            let run = Run::open(&args)?;
            run.guard(|| {
                let data = run.data()?;
                let t = train_teacher(&run.cfg, &data, &run.dir)?;
                writeln!(out, "teacher: test top-1 {:.4}", t.record.final_accuracy().unwrap_or(f64::NAN))?;
                report_student(&mut out, &train_student_alone(&run.cfg, &data, &run.dir)?)?;
                report_student(&mut out, &distill_kd(&run.cfg, &data, &t.final_checkpoint, &run.dir)?)?;
                let s = distill_slkd(&run.cfg, &data, &t.final_checkpoint, &SnapshotSource::Student, &run.dir, "slkd")?;
                report_student(&mut out, &s.run)?;
                writeln!(out, "run directory {}", run.dir.display())?;
                Ok(())
            })
        }
        Command::AblateSnapshots(args) => {
            let run = Run::open(&args)?;
            run.guard(|| {
                let data = run.data()?;
                let t = train_teacher(&run.cfg, &data, &run.dir)?;
                let ab = ablate_snapshot_source(&run.cfg, &data, &t, &run.dir)?;
                report_student(&mut out, &ab.student_snapshots.run)?;
                report_student(&mut out, &ab.teacher_snapshots.run)?;
                Ok(())
            })
        }
        Command::Score { run: args, model, output } => {
            let cfg = resolve_config(&args)?;
            let data = cfg.data.load()?;
            let ckpt = checkpoint::load(&model)?;
            let scores = score_dataset(&ckpt.model, &data.train)?;
            let mut text = String::from("index,label,difficulty\n");
            for s in scores {
                text.push_str(&format!("{},{},{}\n", s.index, s.label, s.difficulty));
            }
            emit(output.as_deref(), &text)
        }
        Command::Partition {
            run: args,
            model,
            stages,
            output,
        } => {
            let cfg = resolve_config(&args)?;
            let data = cfg.data.load()?;
            let ckpt = checkpoint::load(&model)?;
            let plan: CurriculumPlan = partition_balanced(&score_dataset(&ckpt.model, &data.train)?, stages, ckpt.id)?;
            emit(output.as_deref(), &plan.to_csv_string())
        }
        Command::Eval { run: args, model, split } => {
            let cfg = resolve_config(&args)?;
            let data = cfg.data.load()?;
            let ckpt = checkpoint::load(&model)?;
            let set = match split {
                SplitArg::Train => &data.train,
                SplitArg::Test => &data.test,
            };
            let e = evaluate(&ckpt.model, set)?;
            writeln!(
                out,
                "{} ({}): top-1 {:.4}, mean loss {:.4}, {} samples",
                model.display(),
                ckpt.id,
                e.top1_accuracy,
                e.mean_loss,
                e.count
            )?;
            Ok(())
        }
        Command::Report { runs, output } => {
            let dirs: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
            let table = ComparisonTable::from_run_dirs(&dirs)?;
            emit(output.as_deref(), &table.to_markdown())
        }
        Command::Plot {
            records,
            metric,
            output,
        } => {
            let metric = match metric {
                MetricArg::Loss => Metric::TrainLoss,
                MetricArg::Acc => Metric::TestAccuracy,
            };
            let mut series = Vec::new();
            for spec in &records {
                let (label, path) = match spec.split_once('=') {
                    Some((l, p)) => (l.to_string(), PathBuf::from(p)),
                    None => (spec.clone(), PathBuf::from(spec)),
                };
                series.push(Series::from_record(&label, &TrainRecord::load(&path)?, metric));
            }
            checkpoint::write_atomic(&output, plot_svg(&series, metric)?.as_bytes())?;
            Ok(())
        }
    }
}
