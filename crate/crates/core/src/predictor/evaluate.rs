use crate::driver::{Backend, ExperimentIds, RunEnv, Target};
use crate::model::{EntityId, FlagCombination};
use crate::repository::Repository;

use super::{Model, ModelSpec, Objective, PredictError, TrainingEntry, TrainingSet};

/// Outcome for one held-out program.
#[derive(Debug, Clone, PartialEq)]
pub struct LooEntry {
    pub program_id: EntityId,
    pub predicted: FlagCombination,
    pub matched_program_ids: Vec<EntityId>,
    /// Metric of the predicted combination; 0 if it broke the output.
    pub achieved: f64,
    /// Metric of the program's own best combination, measured the same way.
    pub best_known: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooReport {
    pub entries: Vec<LooEntry>,
}

impl LooReport {
    pub fn mean_fraction(&self) -> f64 {
        self.entries.iter().map(|e| e.fraction).sum::<f64>() / self.entries.len() as f64
    }

    /// Programs whose prediction reached at least `fraction` of the best.
    pub fn count_at_least(&self, fraction: f64) -> usize {
        self.entries
            .iter()
            .filter(|e| e.fraction >= fraction)
            .count()
    }
}

/// Measures `opt` against the entry's baseline through the backend.
fn measure(
    backend: &dyn Backend,
    target: &Target<'_>,
    entry: &TrainingEntry,
    opt: &FlagCombination,
    objective: Objective,
    env: &RunEnv,
) -> Result<f64, PredictError> {
    let aggregator = crate::model::Aggregator::default();
    let base_c = backend.compile(target, &entry.baseline, env)?;
    let opt_c = backend.compile(target, opt, env)?;
    if !opt_c.success || opt_c.bin_size == 0 {
        return Ok(0.0);
    }
    if objective == Objective::Size {
        return Ok(base_c.bin_size as f64 / opt_c.bin_size as f64);
    }
    let base = backend.run(
        target,
        &entry.baseline,
        entry.dataset_number,
        env.runs,
        env,
        None,
    )?;
    let run = backend.run(
        target,
        opt,
        entry.dataset_number,
        env.runs,
        env,
        Some(&base.outputs),
    )?;
    if !run.output_correct {
        return Ok(0.0);
    }
    let agg = |o: &crate::driver::RunOutcome| {
        let t: Vec<f64> = o.times.iter().map(|t| t.run_time).collect();
        aggregator.apply(&t).unwrap_or(0.0)
    };
    let t = agg(&run);
    Ok(if t > 0.0 { agg(&base) / t } else { 0.0 })
}

/// Holds out each program in turn, trains on the rest, and measures the
/// predicted combination on the held-out program.
pub fn leave_one_out_evaluate(
    repo: &Repository,
    backend: &dyn Backend,
    spec: &ModelSpec,
    env: &RunEnv,
) -> Result<LooReport, PredictError> {
    let all = TrainingSet::collect(repo, spec)?;
    if all.entries.len() < 2 {
        return Err(PredictError::InsufficientData(format!(
            "leave-one-out needs at least 2 programs, have {}",
            all.entries.len()
        )));
    }
    let compiler = repo
        .entity(spec.compiler_id)
        .and_then(|e| e.descriptor.as_compiler())
        .ok_or_else(|| PredictError::InsufficientData("compiler not registered".into()))?;
    let mut entries = Vec::new();
    for held in &all.entries {
        let program = repo
            .entity(held.program_id)
            .and_then(|e| e.descriptor.as_program())
            .expect("training programs are registered");
        let target = Target {
            ids: ExperimentIds {
                platform: spec.platform_id,
                environment: held.environment_id,
                compiler: spec.compiler_id,
                program: held.program_id,
            },
            program,
            compiler,
        };
        let model = Model::from_training(*spec, all.without(held.program_id)?);
        let prediction = model.predict_features(&held.features);
        let achieved = measure(
            backend,
            &target,
            held,
            &prediction.combination,
            spec.objective,
            env,
        )?;
        let best_known = measure(backend, &target, held, &held.best, spec.objective, env)?;
        let fraction = if best_known > 0.0 {
            achieved / best_known
        } else {
            0.0
        };
        entries.push(LooEntry {
            program_id: held.program_id,
            predicted: prediction.combination,
            matched_program_ids: prediction.matched_program_ids,
            achieved,
            best_known,
            fraction,
        });
    }
    Ok(LooReport { entries })
}
