use thiserror::Error;

use super::ids::EntityId;
use super::records::{CompilationRecord, ExecutionRecord};
use super::stats::{dispersion, Aggregator};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CaseError {
    #[error("case has no executions")]
    NoExecutions,
    #[error("execution {run} belongs to compilation {found}, expected {expected}")]
    ForeignExecution {
        run: EntityId,
        found: EntityId,
        expected: EntityId,
    },
    #[error("baseline executions contain no reference run")]
    MissingBaseline,
    #[error("execution {run} is associated with {found}, not the baseline run {expected}")]
    NotAssociated {
        run: EntityId,
        found: EntityId,
        expected: EntityId,
    },
    #[error("dataset mismatch: case uses dataset {case}, baseline uses {baseline}")]
    DatasetMismatch { case: u32, baseline: u32 },
    #[error("aggregate {0} time is zero")]
    ZeroTime(&'static str),
    #[error("binary size is zero")]
    ZeroSize,
    #[error("execution {0} produced incorrect output")]
    IncorrectOutput(EntityId),
}

/// A compilation joined with its executions and improvement metrics over
/// the baseline: the unit that gets filtered, ranked and shared.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationCase {
    pub compilation: CompilationRecord,
    pub executions: Vec<ExecutionRecord>,
    pub dataset_number: u32,
    /// Baseline aggregate time over case aggregate time.
    pub speedup: f64,
    /// Baseline binary size over case binary size.
    pub size_ratio: f64,
    pub compile_time_ratio: f64,
    /// `(max - min) / median` of the case run times.
    pub dispersion: f64,
    pub output_correct: bool,
    pub rank: i64,
}

impl OptimizationCase {
    pub fn compile_id(&self) -> EntityId {
        self.compilation.compile_id
    }

    pub fn run_times(&self) -> Vec<f64> {
        self.executions.iter().map(|e| e.run_time).collect()
    }
}

/// Derives improvement metrics of `executions` of `compilation` against the
/// baseline reference run. Cases with incorrect output are rejected.
///
/// `baseline_executions` must contain the reference run (the record whose
/// `run_id == run_id_associate`); the other entries are its repeats.
pub fn derive_case(
    compilation: &CompilationRecord,
    executions: &[ExecutionRecord],
    baseline_executions: &[ExecutionRecord],
    baseline_compilation: &CompilationRecord,
    aggregator: Aggregator,
) -> Result<OptimizationCase, CaseError> {
    build_case(
        compilation,
        executions,
        baseline_executions,
        baseline_compilation,
        aggregator,
        true,
    )
}

/// Like [`derive_case`] but keeps incorrect-output cases, marking them with
/// `output_correct == false` so later filters can drop them.
pub(crate) fn build_case(
    compilation: &CompilationRecord,
    executions: &[ExecutionRecord],
    baseline_executions: &[ExecutionRecord],
    baseline_compilation: &CompilationRecord,
    aggregator: Aggregator,
    reject_incorrect: bool,
) -> Result<OptimizationCase, CaseError> {
    let first = executions.first().ok_or(CaseError::NoExecutions)?;
    let reference = baseline_executions
        .iter()
        .find(|e| e.is_reference())
        .ok_or(CaseError::MissingBaseline)?;

    for e in executions {
        if e.compile_id != compilation.compile_id {
            return Err(CaseError::ForeignExecution {
                run: e.run_id,
                found: e.compile_id,
                expected: compilation.compile_id,
            });
        }
        if e.run_id_associate != reference.run_id {
            return Err(CaseError::NotAssociated {
                run: e.run_id,
                found: e.run_id_associate,
                expected: reference.run_id,
            });
        }
        if e.dataset_number != reference.dataset_number {
            return Err(CaseError::DatasetMismatch {
                case: e.dataset_number,
                baseline: reference.dataset_number,
            });
        }
        if reject_incorrect && !e.output_correct {
            return Err(CaseError::IncorrectOutput(e.run_id));
        }
    }
    for b in baseline_executions {
        if b.compile_id != baseline_compilation.compile_id {
            return Err(CaseError::ForeignExecution {
                run: b.run_id,
                found: b.compile_id,
                expected: baseline_compilation.compile_id,
            });
        }
        if b.dataset_number != reference.dataset_number {
            return Err(CaseError::DatasetMismatch {
                case: b.dataset_number,
                baseline: reference.dataset_number,
            });
        }
    }

    let case_times: Vec<f64> = executions.iter().map(|e| e.run_time).collect();
    let base_times: Vec<f64> = baseline_executions.iter().map(|e| e.run_time).collect();
    let case_agg = aggregator.apply(&case_times).unwrap_or(0.0);
    let base_agg = aggregator.apply(&base_times).unwrap_or(0.0);
    if case_agg == 0.0 {
        return Err(CaseError::ZeroTime("case run"));
    }
    if base_agg == 0.0 {
        return Err(CaseError::ZeroTime("baseline run"));
    }
    if compilation.bin_size == 0 || baseline_compilation.bin_size == 0 {
        return Err(CaseError::ZeroSize);
    }
    if compilation.compile_time == 0.0 {
        return Err(CaseError::ZeroTime("case compile"));
    }

    Ok(OptimizationCase {
        compilation: compilation.clone(),
        executions: executions.to_vec(),
        dataset_number: first.dataset_number,
        speedup: base_agg / case_agg,
        size_ratio: baseline_compilation.bin_size as f64 / compilation.bin_size as f64,
        compile_time_ratio: baseline_compilation.compile_time / compilation.compile_time,
        dispersion: dispersion(&case_times).unwrap_or(0.0),
        output_correct: executions.iter().all(|e| e.output_correct),
        rank: executions.iter().map(|e| e.rank).max().unwrap_or(0),
    })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use std::collections::BTreeMap;

    use super::*;
    use crate::model::flags::FlagCombination;

    pub fn id(v: u128) -> EntityId {
        EntityId::new(v).unwrap()
    }

    pub fn compilation(
        compile_id: u128,
        opt: &str,
        bin_size: u64,
        compile_time: f64,
    ) -> CompilationRecord {
        CompilationRecord {
            compile_id: id(compile_id),
            platform_id: id(2111574609159278179),
            environment_id: id(2781195477254972989),
            compiler_id: id(129504539516446542),
            program_id: id(1487849553352134),
            opt: FlagCombination::parse(opt, "").unwrap(),
            compile_time,
            bin_size,
            obj_md5: format!("{:032x}", compile_id),
            date: "2009-06-04".into(),
            time: "14:06:47".into(),
            notes: String::new(),
            extensions: BTreeMap::new(),
        }
    }

    pub fn execution(
        run_id: u128,
        associate: u128,
        comp: &CompilationRecord,
        dataset: u32,
        run_time: f64,
    ) -> ExecutionRecord {
        ExecutionRecord {
            run_id: id(run_id),
            run_id_associate: id(associate),
            compile_id: comp.compile_id,
            compiler_id: comp.compiler_id,
            program_id: comp.program_id,
            platform_id: comp.platform_id,
            environment_id: comp.environment_id,
            dataset_number: dataset,
            bin_size: comp.bin_size,
            output_correct: true,
            run_time,
            run_time_user: run_time,
            run_time_sys: 0.0,
            run_command_line: String::new(),
            profile: BTreeMap::new(),
            hardware_counters: BTreeMap::new(),
            processor_num: 0,
            rank: 0,
            date: "2009-06-04".into(),
            time: "14:35:26".into(),
            notes: String::new(),
            extensions: BTreeMap::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn halved_time_is_speedup_two() {
        let base = compilation(1, "-O3", 48870, 69.0);
        let case = compilation(2, "-O3 -funroll-loops", 43983, 34.5);
        let b = [execution(10, 10, &base, 1, 16.355512)];
        let c = [execution(11, 10, &case, 1, 8.177756)];
        let oc = derive_case(&case, &c, &b, &base, Aggregator::Median).unwrap();
        assert!((oc.speedup - 2.0).abs() < 1e-9);
        assert!((oc.compile_time_ratio - 2.0).abs() < 1e-12);
        assert!((oc.size_ratio - 48870.0 / 43983.0).abs() < 1e-12);
    }

    #[test]
    fn identical_case_is_unit() {
        let base = compilation(1, "-O3", 48870, 69.0);
        let b = [execution(10, 10, &base, 1, 16.355512)];
        let oc = derive_case(&base, &b, &b, &base, Aggregator::Median).unwrap();
        assert_eq!(oc.speedup, 1.0);
        assert_eq!(oc.size_ratio, 1.0);
        assert_eq!(oc.compile_time_ratio, 1.0);
    }

    #[test]
    fn median_of_repeats() {
        // medians 10.0 and 5.0 by hand
        let base = compilation(1, "-O3", 100, 1.0);
        let case = compilation(2, "-O2", 100, 1.0);
        let b = [
            execution(10, 10, &base, 1, 10.0),
            execution(11, 10, &base, 1, 10.2),
            execution(12, 10, &base, 1, 9.8),
        ];
        let c = [
            execution(20, 10, &case, 1, 5.0),
            execution(21, 10, &case, 1, 5.1),
            execution(22, 10, &case, 1, 4.9),
        ];
        let oc = derive_case(&case, &c, &b, &base, Aggregator::Median).unwrap();
        assert_eq!(oc.speedup, 2.0);
    }

    #[test]
    fn error_paths() {
        let base = compilation(1, "-O3", 100, 1.0);
        let case = compilation(2, "-O2", 100, 1.0);
        let b = [execution(10, 10, &base, 1, 10.0)];

        let other_dataset = [execution(20, 10, &case, 2, 5.0)];
        assert!(matches!(
            derive_case(&case, &other_dataset, &b, &base, Aggregator::Median),
            Err(CaseError::DatasetMismatch { .. })
        ));

        let zero = [execution(20, 10, &case, 1, 0.0)];
        assert!(matches!(
            derive_case(&case, &zero, &b, &base, Aggregator::Median),
            Err(CaseError::ZeroTime(_))
        ));

        let mut wrong = execution(20, 10, &case, 1, 5.0);
        wrong.output_correct = false;
        assert!(matches!(
            derive_case(&case, &[wrong.clone()], &b, &base, Aggregator::Median),
            Err(CaseError::IncorrectOutput(_))
        ));
        let kept = build_case(&case, &[wrong], &b, &base, Aggregator::Median, false).unwrap();
        assert!(!kept.output_correct);

        let unassociated = [execution(20, 99, &case, 1, 5.0)];
        assert!(matches!(
            derive_case(&case, &unassociated, &b, &base, Aggregator::Median),
            Err(CaseError::NotAssociated { .. })
        ));
        assert!(matches!(
            derive_case(&case, &[], &b, &base, Aggregator::Median),
            Err(CaseError::NoExecutions)
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        const AGGREGATORS: [Aggregator; 3] =
            [Aggregator::Min, Aggregator::Median, Aggregator::Mean];

        /// `times_x` measured against `times_y` as the baseline.
        fn speedup(times_x: &[f64], times_y: &[f64], agg: Aggregator) -> f64 {
            let base = compilation(1, "-O3", 1000, 1.0);
            let case = compilation(2, "-O2", 1000, 1.0);
            let b: Vec<_> = times_y
                .iter()
                .enumerate()
                .map(|(i, &t)| execution(100 + i as u128, 100, &base, 1, t))
                .collect();
            let c: Vec<_> = times_x
                .iter()
                .enumerate()
                .map(|(i, &t)| execution(200 + i as u128, 100, &case, 1, t))
                .collect();
            derive_case(&case, &c, &b, &base, agg).unwrap().speedup
        }

        fn times() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.001f64..1000.0, 1..6)
        }

        proptest! {
            #[test]
            fn self_comparison_is_unit(t in times(), size in 1u64..1_000_000, ct in 0.001f64..100.0) {
                let base = compilation(1, "-O3", size, ct);
                let b: Vec<_> = t.iter().enumerate()
                    .map(|(i, &x)| execution(100 + i as u128, 100, &base, 1, x)).collect();
                for agg in AGGREGATORS {
                    let oc = derive_case(&base, &b, &b, &base, agg).unwrap();
                    prop_assert_eq!(oc.speedup, 1.0);
                    prop_assert_eq!(oc.size_ratio, 1.0);
                    prop_assert_eq!(oc.compile_time_ratio, 1.0);
                }
            }

            #[test]
            fn speedups_compose(a in times(), b in times(), c in times()) {
                for agg in AGGREGATORS {
                    let chained = speedup(&a, &b, agg) * speedup(&b, &c, agg);
                    prop_assert!((chained - speedup(&a, &c, agg)).abs() <= 1e-9 * chained.max(1.0));
                }
            }
        }
    }
}
