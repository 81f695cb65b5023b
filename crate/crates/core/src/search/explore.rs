use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    gen_fixed_length, gen_one_by_one, gen_uniform_random_with, one_off_prune_limited, FlagSpace,
    SearchError, Strategy,
};
use crate::driver::session::load_reference;
use crate::driver::{
    compile, run, save_outputs, Backend, DriverError, Reference, RunEnv, RunOutputs, Target,
};
use crate::model::{
    build_case, Aggregator, CompilationRecord, ExecutionRecord, FlagCombination, OptimizationCase,
};
use crate::repository::Repository;

#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationConfig {
    pub strategy: Strategy,
    /// Maximum number of evaluated combinations.
    pub budget: usize,
    pub seed: u64,
    pub probability: f64,
    pub fixed_length: usize,
    pub repeats: u32,
    pub dataset: u32,
    pub reference_level: String,
    /// Relative threshold for one-off pruning.
    pub epsilon: f64,
    /// Emit antonyms for unselected flags that have one.
    pub antonyms: bool,
    pub aggregator: Aggregator,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::UniformRandom,
            budget: 100,
            seed: 0,
            probability: 0.5,
            fixed_length: 1,
            repeats: 1,
            dataset: 1,
            reference_level: "-O3".into(),
            epsilon: 0.02,
            antonyms: false,
            aggregator: Aggregator::Median,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::InvalidConfig(m.into()));
        if self.budget == 0 {
            return bad("budget must be at least 1");
        }
        if !(self.probability > 0.0 && self.probability <= 1.0) {
            return bad("probability must be in (0, 1]");
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }
}

/// Outcome of evaluating one combination.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub combination: FlagCombination,
    pub case: Option<OptimizationCase>,
    /// Same canonical combination evaluated before; nothing was compiled.
    pub duplicate: bool,
    pub compiled: bool,
    pub ran: bool,
    pub error: Option<String>,
}

impl Evaluation {
    /// Speedup of a correct case, else 0.
    pub fn metric(&self) -> f64 {
        self.case
            .as_ref()
            .filter(|c| c.output_correct)
            .map_or(0.0, |c| c.speedup)
    }
}

#[derive(Debug, Clone)]
pub struct ExplorationReport {
    /// Distinct evaluated cases in evaluation order.
    pub cases: Vec<OptimizationCase>,
    pub best_case: Option<OptimizationCase>,
    /// 1-based iteration at which a speedup of at least 95% of the best was
    /// first reached.
    pub iterations_to_95pct: Option<usize>,
    /// Per-iteration metric (0 for failures).
    pub trace: Vec<f64>,
    pub evaluations: usize,
    pub compilations: usize,
    pub runs: usize,
    pub baseline: CompilationRecord,
    pub baseline_runs: Vec<ExecutionRecord>,
}

/// Evaluates combinations against one baseline, recording everything.
pub struct Explorer<'a> {
    backend: &'a dyn Backend,
    target: Target<'a>,
    env: RunEnv,
    dataset: u32,
    aggregator: Aggregator,
    baseline: CompilationRecord,
    baseline_runs: Vec<ExecutionRecord>,
    outputs: RunOutputs,
    seen: HashMap<String, Option<OptimizationCase>>,
    by_md5: HashMap<String, (CompilationRecord, Vec<ExecutionRecord>)>,
    compilations: usize,
    runs: usize,
}

impl<'a> Explorer<'a> {
    /// Reuses a recorded baseline at `reference_level` whose reference
    /// outputs are available, otherwise compiles and runs a new one.
    pub fn new(
        backend: &'a dyn Backend,
        target: Target<'a>,
        env: RunEnv,
        dataset: u32,
        reference_level: &str,
        aggregator: Aggregator,
        repo: &mut Repository,
    ) -> Result<Self, SearchError> {
        let level = FlagCombination::parse(reference_level, "")
            .map_err(|e| SearchError::BaselineFailed(e.to_string()))?;
        let dir = target.program.source_dir.clone();
        let reusable = repo
            .find_reference_run(
                target.ids.program,
                target.ids.compiler,
                target.ids.platform,
                &level.canonical(),
                dataset,
            )
            .map(|(c, runs)| (c.clone(), runs.into_iter().cloned().collect::<Vec<_>>()));
        let stored = if dir.is_dir() {
            load_reference(&dir, dataset).ok().flatten()
        } else {
            None
        };
        let mut explorer = match (reusable, stored) {
            (Some((comp, runs)), Some((run_id, outputs)))
                if runs.iter().any(|r| r.run_id == run_id && r.is_reference()) =>
            {
                Self::with_baseline(
                    backend, target, env, dataset, aggregator, comp, runs, outputs, 0,
                )
            }
            _ => {
                let failed = |e: DriverError| SearchError::BaselineFailed(e.to_string());
                let (comp, _) =
                    compile(backend, &target, &level, &env, repo.stamper_mut()).map_err(failed)?;
                let (runs, outcome) = run(
                    backend,
                    &target,
                    &comp,
                    dataset,
                    &env,
                    Reference::Capture,
                    repo.stamper_mut(),
                )
                .map_err(failed)?;
                repo.record_compilation(comp.clone())?;
                for r in &runs {
                    repo.record_execution(r.clone())?;
                }
                if dir.is_dir() {
                    let rdir = dir
                        .join(crate::driver::session::REFERENCE_DIR)
                        .join(dataset.to_string());
                    save_outputs(&rdir.join("outputs"), &outcome.outputs)?;
                    std::fs::write(rdir.join("RUN_ID"), format!("{}\n", runs[0].run_id))
                        .map_err(|e| SearchError::BaselineFailed(e.to_string()))?;
                }
                Self::with_baseline(
                    backend,
                    target,
                    env,
                    dataset,
                    aggregator,
                    comp,
                    runs,
                    outcome.outputs,
                    1,
                )
            }
        };
        explorer.runs = explorer.compilations;
        Ok(explorer)
    }

    #[allow(clippy::too_many_arguments)]
    fn with_baseline(
        backend: &'a dyn Backend,
        target: Target<'a>,
        env: RunEnv,
        dataset: u32,
        aggregator: Aggregator,
        baseline: CompilationRecord,
        baseline_runs: Vec<ExecutionRecord>,
        outputs: RunOutputs,
        compilations: usize,
    ) -> Self {
        let mut by_md5 = HashMap::new();
        by_md5.insert(
            baseline.obj_md5.clone(),
            (baseline.clone(), baseline_runs.clone()),
        );
        Self {
            backend,
            target,
            env,
            dataset,
            aggregator,
            baseline,
            baseline_runs,
            outputs,
            seen: HashMap::new(),
            by_md5,
            compilations,
            runs: 0,
        }
    }

    pub fn baseline(&self) -> (&CompilationRecord, &[ExecutionRecord]) {
        (&self.baseline, &self.baseline_runs)
    }

    pub fn compilations(&self) -> usize {
        self.compilations
    }

    pub fn runs(&self) -> usize {
        self.runs
    }

    fn reference_run(&self) -> &ExecutionRecord {
        self.baseline_runs
            .iter()
            .find(|r| r.is_reference())
            .expect("baseline has a reference run")
    }

    /// Compiles (unless already seen), runs (unless the binary is cached),
    /// and records `opt`.
    pub fn evaluate(
        &mut self,
        opt: &FlagCombination,
        repo: &mut Repository,
    ) -> Result<Evaluation, SearchError> {
        let key = format!("{}|{}", opt.canonical(), opt.platform_string());
        if let Some(case) = self.seen.get(&key) {
            return Ok(Evaluation {
                combination: opt.clone(),
                case: case.clone(),
                duplicate: true,
                compiled: false,
                ran: false,
                error: None,
            });
        }
        self.compilations += 1;
        let comp = match compile(
            self.backend,
            &self.target,
            opt,
            &self.env,
            repo.stamper_mut(),
        ) {
            Ok((c, _)) => c,
            Err(e @ (DriverError::CompileFailed { .. } | DriverError::Timeout { .. })) => {
                self.seen.insert(key, None);
                return Ok(Evaluation {
                    combination: opt.clone(),
                    case: None,
                    duplicate: false,
                    compiled: true,
                    ran: false,
                    error: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e.into()),
        };
        repo.record_compilation(comp.clone())?;

        let reference = self.reference_run().run_id;
        let cached = self.by_md5.get(&comp.obj_md5).cloned().or_else(|| {
            let runs: Vec<ExecutionRecord> = repo
                .cached_executions(comp.program_id, &comp.obj_md5, self.dataset)
                .into_iter()
                .filter(|e| e.run_id_associate == reference)
                .cloned()
                .collect();
            let c = repo.compilation(runs.first()?.compile_id)?.clone();
            Some((c, runs))
        });
        let mut ran = false;
        let mut error = None;
        let (case_comp, case_runs) = match cached {
            Some(hit) => hit,
            None => {
                let result = run(
                    self.backend,
                    &self.target,
                    &comp,
                    self.dataset,
                    &self.env,
                    Reference::Compare {
                        baseline_run: reference,
                        outputs: Some(&self.outputs),
                    },
                    repo.stamper_mut(),
                );
                self.runs += 1;
                ran = true;
                match result {
                    Ok((records, _)) => {
                        for r in &records {
                            repo.record_execution(r.clone())?;
                        }
                        self.by_md5
                            .insert(comp.obj_md5.clone(), (comp.clone(), records.clone()));
                        (comp.clone(), records)
                    }
                    Err(e @ (DriverError::RunFailed(_) | DriverError::Timeout { .. })) => {
                        error = Some(e.to_string());
                        (comp.clone(), Vec::new())
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        let case = if case_runs.is_empty() {
            None
        } else {
            match build_case(
                &case_comp,
                &case_runs,
                &self.baseline_runs,
                &self.baseline,
                self.aggregator,
                false,
            ) {
                Ok(c) => Some(c),
                Err(e) => {
                    error = Some(e.to_string());
                    None
                }
            }
        };
        self.seen.insert(key, case.clone());
        Ok(Evaluation {
            combination: opt.clone(),
            case,
            duplicate: false,
            compiled: true,
            ran,
            error,
        })
    }
}

/// Runs one exploration of `space` on `target`.
pub fn explore(
    target: Target<'_>,
    space: &FlagSpace,
    config: &ExplorationConfig,
    backend: &dyn Backend,
    env: &RunEnv,
    repo: &mut Repository,
) -> Result<ExplorationReport, SearchError> {
    config.validate()?;
    space.validate()?;
    let env = env.clone().with_runs(config.repeats);
    let mut explorer = Explorer::new(
        backend,
        target,
        env,
        config.dataset,
        &config.reference_level,
        config.aggregator,
        repo,
    )?;
    let mut evaluations: Vec<Evaluation> = Vec::new();
    match config.strategy {
        Strategy::OneOffPrune => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut flags: Vec<String> = space.flags.iter().map(|f| f.name.clone()).collect();
            flags.shuffle(&mut rng);
            let level = space.base_levels[0].clone();
            let base = FlagCombination::new(level, flags, Vec::new())?;
            one_off_prune_limited(
                &base,
                |c| {
                    let e = explorer.evaluate(c, repo)?;
                    let m = e.metric();
                    evaluations.push(e);
                    Ok::<f64, SearchError>(m)
                },
                config.epsilon,
                config.budget,
            )?;
        }
        strategy => {
            let combos = match strategy {
                Strategy::UniformRandom => gen_uniform_random_with(
                    space,
                    config.seed,
                    config.probability,
                    config.budget,
                    config.antonyms,
                ),
                Strategy::FixedLengthRandom => {
                    gen_fixed_length(space, config.seed, config.fixed_length, config.budget)?
                }
                _ => {
                    let mut all = gen_one_by_one(space);
                    all.truncate(config.budget);
                    all
                }
            };
            for c in &combos {
                evaluations.push(explorer.evaluate(c, repo)?);
            }
        }
    }

    let trace: Vec<f64> = evaluations.iter().map(Evaluation::metric).collect();
    let mut cases = Vec::new();
    for e in &evaluations {
        if let (false, Some(c)) = (e.duplicate, &e.case) {
            cases.push(c.clone());
        }
    }
    let best_case = cases
        .iter()
        .filter(|c| c.output_correct)
        .fold(None::<&OptimizationCase>, |best, c| match best {
            Some(b) if b.speedup >= c.speedup => Some(b),
            _ => Some(c),
        })
        .cloned();
    let iterations_to_95pct = best_case
        .as_ref()
        .and_then(|b| trace.iter().position(|m| *m >= 0.95 * b.speedup))
        .map(|i| i + 1);
    let (baseline, baseline_runs) = explorer.baseline();
    Ok(ExplorationReport {
        cases,
        best_case,
        iterations_to_95pct,
        evaluations: trace.len(),
        trace,
        compilations: explorer.compilations(),
        runs: explorer.runs(),
        baseline: baseline.clone(),
        baseline_runs: baseline_runs.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{ExperimentIds, SyntheticBackend, SyntheticProgram};
    use crate::model::{CompilerDescriptor, Descriptor, ProgramDescriptor, SystemDescriptor};
    use crate::repository::{QueryCriteria, RepoOptions};

    pub(crate) struct Bench {
        pub program: ProgramDescriptor,
        pub compiler: CompilerDescriptor,
        pub ids: ExperimentIds,
        pub backend: SyntheticBackend,
        _dir: tempfile::TempDir,
    }

    impl Bench {
        pub fn target(&self) -> Target<'_> {
            Target {
                ids: self.ids,
                program: &self.program,
                compiler: &self.compiler,
            }
        }
    }

    pub(crate) fn bench(sp: SyntheticProgram, seed: u64) -> (Bench, Repository) {
        let dir = tempfile::tempdir().unwrap();
        let mut repo = Repository::create(dir.path(), RepoOptions::deterministic(seed)).unwrap();
        let program = sp.descriptor();
        let compiler = CompilerDescriptor {
            name: "synthetic-cc".into(),
            invocation_template: "cc {flags} -o {output} {sources}".into(),
            flag_space_ref: String::new(),
        };
        let ids = ExperimentIds {
            platform: repo
                .register_entity(Descriptor::Platform(SystemDescriptor::new("sim", "")))
                .unwrap(),
            environment: repo
                .register_entity(Descriptor::Environment(SystemDescriptor::new("sim", "")))
                .unwrap(),
            compiler: repo
                .register_entity(Descriptor::Compiler(compiler.clone()))
                .unwrap(),
            program: repo
                .register_entity(Descriptor::Program(program.clone()))
                .unwrap(),
        };
        let b = Bench {
            program,
            compiler,
            ids,
            backend: SyntheticBackend::new(vec![sp], seed).unwrap(),
            _dir: dir,
        };
        (b, repo)
    }

    fn prog() -> SyntheticProgram {
        SyntheticProgram::new("p", 10.0, 1000)
            .with_flag("-fa", 0.8, 1.0)
            .with_flag("-fb", 0.9, 0.95)
            .with_flag("-fc", 1.0, 1.0)
    }

    fn space() -> FlagSpace {
        FlagSpace::simple("-O3", &["-fa", "-fb", "-fc"]).unwrap()
    }

    #[test]
    fn budget_one_gives_one_case_plus_baseline() {
        let (b, mut repo) = bench(prog(), 1);
        let cfg = ExplorationConfig {
            budget: 1,
            strategy: Strategy::OneByOne,
            ..Default::default()
        };
        let r = explore(
            b.target(),
            &space(),
            &cfg,
            &b.backend,
            &RunEnv::default(),
            &mut repo,
        )
        .unwrap();
        assert_eq!(r.cases.len(), 1);
        assert_eq!(r.compilations, 2);
        assert_eq!(repo.compilations().len(), 2);
        assert_eq!(r.iterations_to_95pct, Some(1));
    }

    #[test]
    fn no_effect_flag_reuses_cached_run() {
        let (b, mut repo) = bench(prog(), 1);
        let mut ex = Explorer::new(
            &b.backend,
            b.target(),
            RunEnv::default(),
            1,
            "-O3",
            Aggregator::Median,
            &mut repo,
        )
        .unwrap();
        let opt = |s: &str| FlagCombination::parse(s, "").unwrap();
        let a = ex.evaluate(&opt("-O3 -fa"), &mut repo).unwrap();
        assert!(a.ran);
        let ac = ex.evaluate(&opt("-O3 -fa -fc"), &mut repo).unwrap();
        assert!(ac.compiled && !ac.ran);
        assert_eq!(ac.case.unwrap().speedup, a.case.unwrap().speedup);
        let dup = ex.evaluate(&opt("-O3 -fa"), &mut repo).unwrap();
        assert!(dup.duplicate && !dup.compiled);
        let c = ex.evaluate(&opt("-O3 -fc"), &mut repo).unwrap();
        assert!(!c.ran);
        assert_eq!(c.case.unwrap().speedup, 1.0);
        assert_eq!(ex.runs(), 2);
    }

    #[test]
    fn one_off_strategy_prunes_to_influential_flags() {
        let (b, mut repo) = bench(prog(), 3);
        let cfg = ExplorationConfig {
            budget: 10,
            strategy: Strategy::OneOffPrune,
            ..Default::default()
        };
        let r = explore(
            b.target(),
            &space(),
            &cfg,
            &b.backend,
            &RunEnv::default(),
            &mut repo,
        )
        .unwrap();
        assert_eq!(r.evaluations, 4);
        let best = r.best_case.unwrap();
        assert!((best.speedup - 1.0 / 0.72).abs() < 1e-5);
    }

    #[test]
    fn exploration_is_byte_reproducible() {
        let contents = || {
            let (b, mut repo) = bench(prog(), 9);
            let cfg = ExplorationConfig {
                budget: 12,
                seed: 4,
                ..Default::default()
            };
            explore(
                b.target(),
                &space(),
                &cfg,
                &b.backend,
                &RunEnv::default(),
                &mut repo,
            )
            .unwrap();
            let root = repo.root().to_path_buf();
            ["entities.pk", "compilations.pk", "executions.pk"]
                .map(|f| std::fs::read_to_string(root.join(f)).unwrap())
                .concat()
        };
        assert_eq!(contents(), contents());
    }

    #[test]
    fn recorded_cases_match_the_report() {
        let (b, mut repo) = bench(prog(), 5);
        let cfg = ExplorationConfig {
            budget: 20,
            seed: 2,
            ..Default::default()
        };
        let r = explore(
            b.target(),
            &space(),
            &cfg,
            &b.backend,
            &RunEnv::default(),
            &mut repo,
        )
        .unwrap();
        assert!(r.compilations <= cfg.budget + 1);
        assert!(r.runs <= 1 + 4);
        let best_q = repo
            .query(&QueryCriteria::select_all())
            .into_iter()
            .map(|c| c.speedup)
            .fold(0.0, f64::max);
        assert!((best_q - r.best_case.unwrap().speedup).abs() < 1e-12);
    }

    mod props {
        use std::collections::HashSet;

        use super::*;
        use crate::search::Strategy as Plugin;
        use proptest::prelude::{any, prop, prop_assert, proptest, ProptestConfig};

        fn strategy() -> impl proptest::strategy::Strategy<Value = Plugin> {
            prop::sample::select(Plugin::ALL.to_vec())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn compilations_are_bounded_and_runs_never_repeat_a_binary(
                mults in prop::collection::vec(prop::sample::select(vec![0.8, 0.9, 1.0, 1.0, 1.1]), 1..7),
                budget in 1usize..30,
                strategy in strategy(),
                seed in any::<u64>(),
            ) {
                let names: Vec<String> = (0..mults.len()).map(|i| format!("-f{i}")).collect();
                let mut sp = SyntheticProgram::new("p", 10.0, 1000);
                for (n, m) in names.iter().zip(&mults) {
                    sp = sp.with_flag(n, *m, 1.0);
                }
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                let space = FlagSpace::simple("-O3", &refs).unwrap();
                let (b, mut repo) = bench(sp, 1);
                let cfg = ExplorationConfig { budget, strategy, seed, ..Default::default() };
                let r = explore(b.target(), &space, &cfg, &b.backend, &RunEnv::default(), &mut repo).unwrap();
                prop_assert!(r.compilations <= budget + 1);
                prop_assert!(r.evaluations <= budget);
                let binaries: HashSet<&str> = repo.compilations().iter().map(|c| c.obj_md5.as_str()).collect();
                prop_assert!(r.runs <= binaries.len());
            }
        }
    }
}
