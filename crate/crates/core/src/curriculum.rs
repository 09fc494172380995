//! Difficulty scoring with a snapshot classifier and class-balanced,
//! easy-to-hard partitioning of the training set.
//!
//! A sample's difficulty is `1 - p(true label)` under the snapshot, so a
//! larger score means a harder sample. Within each class samples are
//! sorted by `(difficulty, index)` and dealt in consecutive blocks to
//! stages `1..=N`; when a class does not divide evenly the extra samples
//! go to the later stages. Stage `i` trains on the union of stages `1..=i`.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::softmax_t;
use crate::metrics::{evaluate_indices, Evaluation, EVAL_BATCH};
use crate::nn::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub index: usize,
    pub label: usize,
    pub difficulty: f64,
}

/// Scores every sample of `data` with `snapshot`, in index order.
pub fn score_dataset(snapshot: &Model, data: &Dataset) -> Result<Vec<ScoredSample>> {
    if snapshot.num_classes() != data.class_count() {
        return Err(Error::InvalidArgument(format!(
            "snapshot predicts {} classes but the dataset has {}",
            snapshot.num_classes(),
            data.class_count()
        )));
    }
    let all: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, labels) = data.gather(chunk)?;
        let probs = softmax_t(&snapshot.forward(&x)?, 1.0)?;
        for (row, (&index, &label)) in chunk.iter().zip(&labels).enumerate() {
            let p_true = probs.probs.row(row)[label] as f64;
            out.push(ScoredSample {
                index,
                label,
                difficulty: 1.0 - p_true,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanRow {
    pub index: usize,
    pub class: usize,
    pub difficulty: f64,
    /// 1-based stage.
    pub stage: usize,
}

/// Disjoint, class-balanced stages ordered from easiest to hardest.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumPlan {
    /// Sorted dataset indices of each stage.
    stages: Vec<Vec<usize>>,
    /// One row per sample, sorted by index.
    rows: Vec<PlanRow>,
    class_count: usize,
    pub source_snapshot: String,
}

pub const PLAN_CSV_HEADER: &str = "index,class,difficulty,stage";

impl CurriculumPlan {
    fn from_rows(mut rows: Vec<PlanRow>, n_stages: usize, source_snapshot: String) -> Result<Self> {
        rows.sort_by_key(|r| r.index);
        if rows.windows(2).any(|w| w[0].index == w[1].index) {
            return Err(Error::InvalidArgument("duplicate sample index in plan".into()));
        }
        let mut stages = vec![Vec::new(); n_stages];
        for r in &rows {
            if r.stage == 0 || r.stage > n_stages {
                return Err(Error::InvalidArgument(format!("stage {} out of range", r.stage)));
            }
            stages[r.stage - 1].push(r.index);
        }
        let class_count = rows.iter().map(|r| r.class + 1).max().unwrap_or(0);
        Ok(CurriculumPlan {
            stages,
            rows,
            class_count,
            source_snapshot,
        })
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// Indices of stage `stage` alone (1-based).
    pub fn stage(&self, stage: usize) -> Result<&[usize]> {
        self.check_stage(stage)?;
        Ok(&self.stages[stage - 1])
    }

    pub fn stages(&self) -> &[Vec<usize>] {
        &self.stages
    }

    pub fn rows(&self) -> &[PlanRow] {
        &self.rows
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn check_stage(&self, stage: usize) -> Result<()> {
        if stage == 0 || stage > self.stages.len() {
            return Err(Error::InvalidArgument(format!(
                "stage {stage} outside 1..={}",
                self.stages.len()
            )));
        }
        Ok(())
    }

    /// Count of class `c` in every stage.
    pub fn class_stage_counts(&self) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0; self.stages.len()]; self.class_count];
        for r in &self.rows {
            counts[r.class][r.stage - 1] += 1;
        }
        counts
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        let fail = |e: csv::Error| Error::InvalidArgument(format!("writing plan CSV: {e}"));
        w.write_record(PLAN_CSV_HEADER.split(',')).map_err(fail)?;
        for r in &self.rows {
            w.write_record([
                r.index.to_string(),
                r.class.to_string(),
                r.difficulty.to_string(),
                r.stage.to_string(),
            ])
            .map_err(fail)?;
        }
        w.flush().map_err(|e| Error::InvalidArgument(format!("writing plan CSV: {e}")))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }

    pub fn read_csv<R: Read>(input: R, source_snapshot: impl Into<String>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let bad = |msg: String| Error::InvalidArgument(format!("plan CSV: {msg}"));
        let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>().join(",") != PLAN_CSV_HEADER {
            return Err(bad(format!("expected header `{PLAN_CSV_HEADER}`")));
        }
        let mut rows = Vec::new();
        for (line, record) in reader.deserialize::<PlanRow>().enumerate() {
            rows.push(record.map_err(|e| bad(format!("row {}: {e}", line + 1)))?);
        }
        let n_stages = rows.iter().map(|r| r.stage).max().unwrap_or(0);
        if n_stages == 0 {
            return Err(bad("no rows".into()));
        }
        Self::from_rows(rows, n_stages, source_snapshot.into())
    }
}

/// Splits scored samples into `n_stages` class-balanced difficulty tiers.
pub fn partition_balanced(scores: &[ScoredSample], n_stages: usize, source_snapshot: impl Into<String>) -> Result<CurriculumPlan> {
    if n_stages == 0 {
        return Err(Error::InvalidArgument("need at least one stage".into()));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scored samples".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.difficulty.is_finite()) {
        return Err(Error::NonFinite(format!("difficulty of sample {}", s.index)));
    }
    let class_count = scores.iter().map(|s| s.label + 1).max().unwrap();
    let mut by_class: Vec<Vec<&ScoredSample>> = vec![Vec::new(); class_count];
    for s in scores {
        by_class[s.label].push(s);
    }
    let mut rows = Vec::with_capacity(scores.len());
    for (class, members) in by_class.iter_mut().enumerate() {
        let m = members.len();
        if m < n_stages {
            return Err(Error::UnbalanceableClass {
                class,
                count: m,
                stages: n_stages,
            });
        }
        members.sort_by(|a, b| a.difficulty.total_cmp(&b.difficulty).then(a.index.cmp(&b.index)));
        let (base, extra) = (m / n_stages, m % n_stages);
        let mut cursor = 0;
        for stage in 0..n_stages {
            let size = base + usize::from(stage >= n_stages - extra);
            for s in &members[cursor..cursor + size] {
                rows.push(PlanRow {
                    index: s.index,
                    class,
                    difficulty: s.difficulty,
                    stage: stage + 1,
                });
            }
            cursor += size;
        }
    }
    CurriculumPlan::from_rows(rows, n_stages, source_snapshot.into())
}

/// Union of stages `1..=stage`, sorted ascending.
pub fn stage_active_set(plan: &CurriculumPlan, stage: usize) -> Result<Vec<usize>> {
    plan.check_stage(stage)?;
    let set: BTreeSet<usize> = plan.stages[..stage].iter().flatten().copied().collect();
    Ok(set.into_iter().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LessonStats {
    pub stage: usize,
    pub size: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Cross-entropy and top-1 accuracy of `model` on each stage on its own.
pub fn lesson_report(model: &Model, plan: &CurriculumPlan, data: &Dataset) -> Result<Vec<LessonStats>> {
    if plan.len() != data.len() {
        return Err(Error::InvalidArgument(format!(
            "plan covers {} samples but dataset has {}",
            plan.len(),
            data.len()
        )));
    }
    plan.stages
        .iter()
        .enumerate()
        .map(|(i, indices)| {
            let Evaluation {
                top1_accuracy,
                mean_loss,
                count,
            } = evaluate_indices(model, data, indices)?;
            Ok(LessonStats {
                stage: i + 1,
                size: count,
                accuracy: top1_accuracy,
                mean_loss,
            })
        })
        .collect()
}
