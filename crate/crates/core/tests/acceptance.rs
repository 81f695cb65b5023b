//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctune_core::driver::{ExperimentIds, RunEnv, SyntheticBackend, SyntheticProgram, Target};
use ctune_core::filters::pareto_filter;
use ctune_core::model::{
    derive_case, Aggregator, CompilationRecord, CompilerDescriptor, Descriptor, EntityId,
    ExecutionRecord, FeatureKind, FeatureVector, FlagCombination, OptimizationCase, ProfileEntry,
    Record, SystemDescriptor,
};
use ctune_core::packet::{parse_fields, parse_stream, quantize, write_stream};
use ctune_core::predictor::{
    leave_one_out_evaluate, train, ModelKind, ModelSource, ModelSpec, Objective, PredictionService,
    ServiceConfig,
};
use ctune_core::repository::{MergeStats, RepoOptions, Repository};
use ctune_core::search::{
    explore, one_off_prune, ExplorationConfig, Explorer, FlagSpace, Strategy,
};
use ctune_core::unidapt::{
    simulate, AdaptationPolicy, AdaptiveProgram, FunctionClone, PhaseModel, PhaseSpec,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, || {
        format!(
            "took {:.2} s, limit {:.0} s",
            elapsed.as_secs_f64(),
            limit.as_secs_f64()
        )
    })
}

fn id(rng: &mut impl Rng) -> EntityId {
    EntityId::new(rng.gen::<u128>().max(1)).unwrap()
}

fn text(rng: &mut impl Rng, max: usize) -> String {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| rng.gen_range(b' '..=b'~') as char).collect()
}

fn combination(rng: &mut impl Rng) -> FlagCombination {
    let levels = ["", "-O0", "-O1", "-O2", "-O3", "-Os"];
    let flags: BTreeSet<String> = (0..rng.gen_range(0..6))
        .map(|_| format!("-f{}", text_alpha(rng, 1, 10)))
        .collect();
    let platform: BTreeSet<String> = (0..rng.gen_range(0..3))
        .map(|_| format!("-m{}", text_alpha(rng, 1, 6)))
        .collect();
    FlagCombination::new(
        levels.choose(rng).unwrap().to_string(),
        flags.into_iter().collect(),
        platform.into_iter().collect(),
    )
    .unwrap()
}

fn text_alpha(rng: &mut impl Rng, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

fn random_extensions(rng: &mut impl Rng) -> BTreeMap<String, String> {
    (0..rng.gen_range(0..3))
        .map(|_| {
            (
                format!("X_{}", text_alpha(rng, 1, 8).to_uppercase()),
                text(rng, 20),
            )
        })
        .collect()
}

fn random_compilation(rng: &mut impl Rng) -> CompilationRecord {
    let ok = rng.gen_bool(0.9);
    CompilationRecord {
        compile_id: id(rng),
        platform_id: id(rng),
        environment_id: id(rng),
        compiler_id: id(rng),
        program_id: id(rng),
        opt: combination(rng),
        compile_time: rng.gen_range(0.0..1e4),
        bin_size: if ok { rng.gen_range(1..10_000_000) } else { 0 },
        obj_md5: if ok {
            (0..32)
                .map(|_| char::from_digit(rng.gen_range(0..16), 16).unwrap())
                .collect()
        } else {
            String::new()
        },
        date: text(rng, 12),
        time: text(rng, 12),
        notes: text(rng, 30),
        extensions: random_extensions(rng),
    }
}

fn random_execution(rng: &mut impl Rng) -> ExecutionRecord {
    let run_id = id(rng);
    ExecutionRecord {
        run_id,
        run_id_associate: if rng.gen_bool(0.3) { run_id } else { id(rng) },
        compile_id: id(rng),
        compiler_id: id(rng),
        program_id: id(rng),
        platform_id: id(rng),
        environment_id: id(rng),
        dataset_number: rng.gen_range(1..100),
        bin_size: rng.gen_range(0..10_000_000),
        output_correct: rng.gen(),
        run_time: rng.gen_range(0.0..1e3),
        run_time_user: rng.gen_range(0.0..1e3),
        run_time_sys: rng.gen_range(0.0..10.0),
        run_command_line: text(rng, 40),
        profile: (0..rng.gen_range(0..3))
            .map(|_| {
                let e = ProfileEntry {
                    seconds: rng.gen_range(0.0..100.0),
                    calls: rng.gen_range(0..1_000_000),
                    fraction: rng.gen_range(0.0..1.0),
                };
                (text_alpha(rng, 1, 10), e)
            })
            .collect(),
        hardware_counters: (0..rng.gen_range(0..3))
            .map(|_| (text_alpha(rng, 1, 10).to_uppercase(), rng.gen()))
            .collect(),
        processor_num: rng.gen_range(-1..64),
        rank: rng.gen_range(-5..5),
        date: text(rng, 12),
        time: text(rng, 12),
        notes: text(rng, 30),
        extensions: random_extensions(rng),
    }
}

fn c1_packet_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let records: Vec<Record> = (0..1000)
        .map(|i| {
            if i % 2 == 0 {
                Record::Compilation(random_compilation(&mut rng))
            } else {
                Record::Execution(random_execution(&mut rng))
            }
        })
        .collect();
    let first = write_stream(&records.iter().map(Record::to_packet).collect::<Vec<_>>());
    let parsed: Vec<Record> = parse_stream(&first)
        .map_err(|e| e.to_string())?
        .iter()
        .map(Record::from_packet)
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    check(parsed.len() == 1000, || {
        format!("{} records parsed", parsed.len())
    })?;
    let second = write_stream(&parsed.iter().map(Record::to_packet).collect::<Vec<_>>());
    check(first == second, || "second serialization differs".into())?;

    let comp = parse_fields("COMPILE_TIME=69.000000\n").map_err(|e| e.to_string())?;
    let run = parse_fields("RUN_TIME=16.355512\n").map_err(|e| e.to_string())?;
    let ct: f64 = comp
        .parse_required("COMPILE_TIME")
        .map_err(|e| e.to_string())?;
    let rt: f64 = run.parse_required("RUN_TIME").map_err(|e| e.to_string())?;
    check(ct == 69.0 && rt == 16.355512, || {
        format!("parsed {ct} and {rt}")
    })?;
    let mut c = random_compilation(&mut rng);
    c.compile_time = 69.0;
    let mut e = random_execution(&mut rng);
    e.run_time = 16.355512;
    let written = c.to_packet().to_text() + &e.to_packet().to_text();
    check(
        written.contains("\nCOMPILE_TIME=69.000000\n")
            && written.contains("\nRUN_TIME=16.355512\n"),
        || "field lines not written verbatim".into(),
    )?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!(
        "1000 records bit-identical, {} bytes ({:.3} s)",
        first.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn case_with(
    template: &CompilationRecord,
    speedup: f64,
    size_ratio: f64,
    n: u128,
) -> OptimizationCase {
    let mut compilation = template.clone();
    compilation.compile_id = EntityId::new(n).unwrap();
    OptimizationCase {
        compilation,
        executions: Vec::new(),
        dataset_number: 1,
        speedup,
        size_ratio,
        compile_time_ratio: 1.0,
        dispersion: 0.0,
        output_correct: true,
        rank: 0,
    }
}

/// Brute force: kept iff no point is at least as good on both axes and
/// strictly better on one, and no earlier point is identical.
fn pareto_oracle(points: &[(f64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            let (s, z) = points[i];
            !points.iter().enumerate().any(|(j, &(sj, zj))| {
                let dominated = sj >= s && zj >= z && (sj > s || zj > z);
                dominated || (j < i && sj == s && zj == z)
            })
        })
        .collect()
}

fn c2_pareto_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let template = random_compilation(&mut rng);
    let mut frontier_sizes = 0;
    for set in 0..200 {
        let n = rng.gen_range(1..=1000);
        let grid = *[4u32, 20, 1000].choose(&mut rng).unwrap();
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                (
                    0.5 + rng.gen_range(0..grid) as f64 / grid as f64,
                    0.5 + rng.gen_range(0..grid) as f64 / grid as f64,
                )
            })
            .collect();
        let cases: Vec<OptimizationCase> = points
            .iter()
            .enumerate()
            .map(|(i, &(s, z))| case_with(&template, s, z, i as u128 + 1))
            .collect();
        let got: Vec<EntityId> = pareto_filter(&cases)
            .iter()
            .map(|c| c.compile_id())
            .collect();
        let want: Vec<EntityId> = pareto_oracle(&points)
            .into_iter()
            .map(|i| cases[i].compile_id())
            .collect();
        check(got == want, || {
            format!("set {set} (n={n}): {} vs {} kept", got.len(), want.len())
        })?;
        frontier_sizes += want.len();
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "200 sets, {frontier_sizes} frontier points total ({:.2} s)",
        start.elapsed().as_secs_f64()
    ))
}

fn c3_prune_minimality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let epsilon = 0.02;
    for trial in 0..100 {
        let n = rng.gen_range(1..=10);
        let flags: Vec<String> = (0..n).map(|i| format!("-fflag{i}")).collect();
        // run time = base - sum of gains of active flags; the base combination
        // is profitable, so influential gains are positive
        let base_time = rng.gen_range(50.0..100.0);
        let gains: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.4) {
                    base_time * rng.gen_range(0.04..0.08)
                } else {
                    base_time * rng.gen_range(-1e-4..1e-4)
                }
            })
            .collect();
        let time_of = |active: &dyn Fn(usize) -> bool| -> f64 {
            base_time - (0..n).filter(|&i| active(i)).map(|i| gains[i]).sum::<f64>()
        };
        let reference = time_of(&|_| false);
        let all = FlagCombination::new("-O3", flags.clone(), Vec::new()).unwrap();
        let result = one_off_prune(
            &all,
            |c: &FlagCombination| -> Result<f64, ()> {
                Ok(reference / time_of(&|i| c.contains(&flags[i])))
            },
            epsilon,
        )
        .unwrap();
        let base_metric = reference / time_of(&|_| true);

        let mut minimal: Option<u32> = None;
        for mask in 0u32..(1 << n) {
            let m = reference / time_of(&|i| mask & (1 << i) != 0);
            if ((m - base_metric) / base_metric).abs() < epsilon
                && minimal.is_none_or(|b| mask.count_ones() < b.count_ones())
            {
                minimal = Some(mask);
            }
        }
        let minimal = minimal.expect("the full set is within epsilon of itself");
        let want: BTreeSet<&str> = (0..n)
            .filter(|&i| minimal & (1 << i) != 0)
            .map(|i| flags[i].as_str())
            .collect();
        let got: BTreeSet<&str> = result
            .combination
            .flags()
            .iter()
            .map(String::as_str)
            .collect();
        check(got == want, || {
            format!("surrogate {trial}: kept {got:?}, minimal {want:?}")
        })?;
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "100 surrogates ({:.2} s)",
        start.elapsed().as_secs_f64()
    ))
}

/// Registered platform, environment and compiler shared by the fixtures.
struct Lab {
    repo: Repository,
    compiler: CompilerDescriptor,
    platform: EntityId,
    environment: EntityId,
    compiler_id: EntityId,
}

impl Lab {
    fn new(root: &Path, seed: u64) -> Self {
        let mut repo = Repository::create(root, RepoOptions::deterministic(seed)).unwrap();
        let compiler = CompilerDescriptor {
            name: "synthetic-gcc".into(),
            invocation_template: "gcc {flags} -o {output} {sources}".into(),
            flag_space_ref: String::new(),
        };
        let platform = repo
            .register_entity(Descriptor::Platform(SystemDescriptor::new("x86_64", "")))
            .unwrap();
        let environment = repo
            .register_entity(Descriptor::Environment(SystemDescriptor::new("linux", "")))
            .unwrap();
        let compiler_id = repo
            .register_entity(Descriptor::Compiler(compiler.clone()))
            .unwrap();
        Self {
            repo,
            compiler,
            platform,
            environment,
            compiler_id,
        }
    }

    /// Registers `sp` (with `features`, if any) and returns its descriptor
    /// and ids. The source directory does not exist, so nothing is written
    /// outside the repository.
    fn program(
        &mut self,
        sp: &mut SyntheticProgram,
        features: Option<FeatureVector>,
    ) -> (ctune_core::model::ProgramDescriptor, ExperimentIds) {
        let mut desc = sp.descriptor();
        desc.source_dir = PathBuf::from("nonexistent").join(&sp.name);
        desc.features = features;
        let program = self
            .repo
            .register_entity(Descriptor::Program(desc.clone()))
            .unwrap();
        sp.id = Some(program);
        (
            desc,
            ExperimentIds {
                platform: self.platform,
                environment: self.environment,
                compiler: self.compiler_id,
                program,
            },
        )
    }
}

fn flag_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("-fflag{i}")).collect()
}

fn c4_convergence() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let names = flag_names(10);
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let space = FlagSpace::simple("-O3", &name_refs).unwrap();
    let mut first_hits = Vec::new();
    let mut missed = 0;
    for s in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + s);
        let mut sp = SyntheticProgram::new(format!("conv{s}"), rng.gen_range(5.0..20.0), 50_000);
        let influential: BTreeSet<usize> = rand::seq::index::sample(&mut rng, 10, 4)
            .into_iter()
            .collect();
        for (i, f) in names.iter().enumerate() {
            let t = if influential.contains(&i) {
                if rng.gen_bool(0.6) {
                    rng.gen_range(0.7..0.9)
                } else {
                    rng.gen_range(1.1..1.3)
                }
            } else {
                rng.gen_range(0.99..1.01)
            };
            sp = sp.with_flag(f, t, rng.gen_range(0.9..1.1));
        }
        let mut lab = Lab::new(&tmp.path().join(format!("db{s}")), s);
        let (desc, ids) = lab.program(&mut sp, None);
        let backend = SyntheticBackend::new(vec![sp.clone()], s).unwrap();
        let target = Target {
            ids,
            program: &desc,
            compiler: &lab.compiler,
        };

        let reference = quantize(sp.expected_time(&FlagCombination::level("-O3"), 1));
        let exhaustive = (0u32..1024)
            .map(|mask| {
                let on: Vec<String> = (0..10)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| names[i].clone())
                    .collect();
                let c = FlagCombination::new("-O3", on, Vec::new()).unwrap();
                reference / quantize(sp.expected_time(&c, 1))
            })
            .fold(f64::NEG_INFINITY, f64::max);

        let config = ExplorationConfig {
            strategy: Strategy::UniformRandom,
            budget: 500,
            probability: 0.5,
            seed: s,
            ..ExplorationConfig::default()
        };
        let report = explore(
            target,
            &space,
            &config,
            &backend,
            &RunEnv::default(),
            &mut lab.repo,
        )
        .map_err(|e| e.to_string())?;
        let best = report
            .best_case
            .as_ref()
            .map_or(1.0, |c| c.speedup.max(1.0));
        check(best <= exhaustive * (1.0 + 1e-12), || {
            format!("surrogate {s}: found {best} above exhaustive {exhaustive}")
        })?;
        match report.trace.iter().position(|&m| m >= 0.95 * exhaustive) {
            Some(i) => first_hits.push(i + 1),
            None if exhaustive <= 1.0 / 0.95 => first_hits.push(0),
            None => missed += 1,
        }
    }
    first_hits.sort_unstable();
    let median = if first_hits.is_empty() {
        usize::MAX
    } else {
        let n = first_hits.len();
        (first_hits[(n - 1) / 2] + first_hits[n / 2]) / 2
    };
    check(missed <= 1, || {
        format!("{missed}/20 surrogates never reached 95%")
    })?;
    check(median <= 100, || format!("median first hit {median}"))?;
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "{}/20 reached 95%, median first hit {median} (max {}) ({:.2} s)",
        20 - missed,
        first_hits.last().copied().unwrap_or(0),
        start.elapsed().as_secs_f64()
    ))
}

fn determinism_run(root: &Path) -> Result<(), String> {
    let mut lab = Lab::new(root, 77);
    let mut sp = SyntheticProgram::new("det", 12.5, 40_000)
        .with_flag("-funroll-loops", 0.8, 1.2)
        .with_flag("-fpeel-loops", 0.95, 1.05)
        .with_flag("-fno-inline", 1.1, 0.9)
        .with_flag("-ftree-vectorize", 0.7, 1.1)
        .with_interaction(&["-funroll-loops", "-ftree-vectorize"], 0.9);
    let (desc, ids) = lab.program(&mut sp, None);
    let backend = SyntheticBackend::new(vec![sp], 77).unwrap();
    let target = Target {
        ids,
        program: &desc,
        compiler: &lab.compiler,
    };
    let space = FlagSpace::simple(
        "-O3",
        &[
            "-funroll-loops",
            "-fpeel-loops",
            "-fno-inline",
            "-ftree-vectorize",
        ],
    )
    .unwrap();
    for strategy in [Strategy::OneByOne, Strategy::OneOffPrune] {
        let config = ExplorationConfig {
            strategy,
            budget: 30,
            seed: 77,
            repeats: 3,
            ..ExplorationConfig::default()
        };
        explore(
            target,
            &space,
            &config,
            &backend,
            &RunEnv::default(),
            &mut lab.repo,
        )
        .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    out
}

fn c5_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    determinism_run(&a)?;
    determinism_run(&b)?;
    let (fa, fb) = (files(&a), files(&b));
    check(fa.keys().eq(fb.keys()), || {
        format!("file sets differ: {:?} vs {:?}", fa.keys(), fb.keys())
    })?;
    for (name, bytes) in &fa {
        check(&fb[name] == bytes, || format!("{} differs", name.display()))?;
    }
    let total: usize = fa.values().map(Vec::len).sum();
    check(total > 0, || "empty repository".into())?;
    Ok(format!("{} files, {total} bytes identical", fa.len()))
}

/// Builds a random repository; identical arguments give identical content.
fn random_repo(root: &Path, seed: u64, tag: &str, perturb: Option<usize>) -> (Repository, usize) {
    let mut repo = Repository::create(root, RepoOptions::deterministic(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let platform = repo
        .register_entity(Descriptor::Platform(SystemDescriptor::new(
            format!("plat-{tag}"),
            "",
        )))
        .unwrap();
    let environment = repo
        .register_entity(Descriptor::Environment(SystemDescriptor::new(
            format!("env-{tag}"),
            "",
        )))
        .unwrap();
    let compiler = repo
        .register_entity(Descriptor::Compiler(CompilerDescriptor {
            name: format!("cc-{tag}"),
            invocation_template: "cc {flags} -o {output} {sources}".into(),
            flag_space_ref: String::new(),
        }))
        .unwrap();
    let mut total = 3;
    let mut records = 0;
    for p in 0..rng.gen_range(1..=3) {
        let sp = SyntheticProgram::new(format!("prog-{tag}-{p}"), 10.0, 1000);
        let mut desc = sp.descriptor();
        desc.source_dir = PathBuf::from("nonexistent");
        let program = repo.register_entity(Descriptor::Program(desc)).unwrap();
        total += 1;
        let mut reference: Option<EntityId> = None;
        for _ in 0..rng.gen_range(1..=4) {
            let mut c = random_compilation(&mut rng);
            c.platform_id = platform;
            c.environment_id = environment;
            c.compiler_id = compiler;
            c.program_id = program;
            if c.bin_size == 0 {
                c.bin_size = 1;
                c.obj_md5 = format!("{:032x}", rng.gen::<u128>());
            }
            if perturb == Some(records) {
                c.compile_time += 1.0;
            }
            records += 1;
            repo.record_compilation(c.clone()).unwrap();
            for _ in 0..rng.gen_range(1..=3) {
                let mut e = random_execution(&mut rng);
                e.compile_id = c.compile_id;
                e.platform_id = platform;
                e.environment_id = environment;
                e.compiler_id = compiler;
                e.program_id = program;
                e.run_id_associate = *reference.get_or_insert(e.run_id);
                if perturb == Some(records) {
                    e.run_time += 1.0;
                }
                records += 1;
                repo.record_execution(e).unwrap();
            }
        }
    }
    (repo, total + records)
}

fn stats(new: usize, duplicate: usize, conflicting: usize) -> MergeStats {
    MergeStats {
        new,
        duplicate,
        conflicting,
    }
}

fn c6_merge_algebra() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut merged = 0;
    for pair in 0..100u64 {
        let dir = tmp.path().join(pair.to_string());
        let (sa, sb) = (1000 + 2 * pair, 1001 + 2 * pair);
        let (mut a, na) = random_repo(&dir.join("a"), sa, &format!("a{pair}"), None);
        let (b, nb) = random_repo(&dir.join("b"), sb, &format!("b{pair}"), None);

        let before = a.content_digest();
        let view = Repository::open_read_only(dir.join("a")).map_err(|e| e.to_string())?;
        let s = a.merge_from(&view).map_err(|e| e.to_string())?;
        check(s == stats(0, na, 0) && a.content_digest() == before, || {
            format!("pair {pair}: self-merge gave {s:?}")
        })?;

        let mut d = Repository::create(dir.join("d"), RepoOptions::deterministic(pair)).unwrap();
        let s = d.merge_from(&a).map_err(|e| e.to_string())?;
        check(s == stats(na, 0, 0), || {
            format!("pair {pair}: first merge {s:?}, expected new={na}")
        })?;
        let s = d.merge_from(&b).map_err(|e| e.to_string())?;
        check(s == stats(nb, 0, 0), || {
            format!("pair {pair}: disjoint merge {s:?}, expected new={nb}")
        })?;
        let s = d.merge_from(&a).map_err(|e| e.to_string())?;
        check(s == stats(0, na, 0), || {
            format!("pair {pair}: repeated merge {s:?}")
        })?;
        check(d.len() == na + nb, || {
            format!("pair {pair}: {} items after merges", d.len())
        })?;

        let records = na
            - 3
            - a.entities_of(ctune_core::model::EntityKind::Program)
                .count();
        let victim = (pair as usize * 7) % records;
        let (altered, nc) = random_repo(&dir.join("c"), sa, &format!("a{pair}"), Some(victim));
        check(nc == na, || {
            format!("pair {pair}: altered copy has {nc} items")
        })?;
        let before = d.content_digest();
        let disk_before = files(&dir.join("d"));
        let s = d.merge_from(&altered).map_err(|e| e.to_string())?;
        check(s == stats(0, na - 1, 1), || {
            format!("pair {pair}: conflicting merge {s:?}")
        })?;
        check(
            d.content_digest() == before && files(&dir.join("d")) == disk_before,
            || format!("pair {pair}: conflict changed the destination"),
        )?;
        merged += na + nb;
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "100 pairs, {merged} items merged ({:.2} s)",
        start.elapsed().as_secs_f64()
    ))
}

/// Per-cluster optimal flag sets over six flags.
const CLUSTER_OPTIMA: [&[usize]; 5] = [&[0, 1], &[2, 3], &[4, 5], &[0, 3, 5], &[1, 2, 4]];

struct Family {
    _tmp: tempfile::TempDir,
    repo: Repository,
    spec: ModelSpec,
    backend: SyntheticBackend,
    features: Vec<(EntityId, FeatureVector)>,
}

/// 50 programs in 5 well-separated feature clusters; every program of a
/// cluster has the same optimum. Each program is explored exhaustively.
fn family() -> Family {
    let tmp = tempfile::tempdir().unwrap();
    let mut lab = Lab::new(&tmp.path().join("db"), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let names = flag_names(6);
    let mut programs = Vec::new();
    let mut registered = Vec::new();
    for i in 0..50usize {
        let cluster = i / 10;
        let optimum = CLUSTER_OPTIMA[cluster];
        let mut sp = SyntheticProgram::new(format!("fam{i}"), rng.gen_range(5.0..20.0), 30_000);
        for (f, name) in names.iter().enumerate() {
            let t = if optimum.contains(&f) {
                rng.gen_range(0.65..0.75)
            } else {
                rng.gen_range(1.15..1.25)
            };
            sp = sp.with_flag(name, t, 1.0);
        }
        let k = cluster as f64;
        let fv = FeatureVector::new(
            FeatureKind::Static,
            [
                ("ft1".to_string(), 100.0 * k + rng.gen_range(-5.0..5.0)),
                (
                    "ft2".to_string(),
                    100.0 * (4.0 - k) + rng.gen_range(-5.0..5.0),
                ),
                (
                    "ft3".to_string(),
                    300.0 * (cluster % 2) as f64 + rng.gen_range(-5.0..5.0),
                ),
            ],
        )
        .unwrap();
        let (desc, ids) = lab.program(&mut sp, Some(fv.clone()));
        registered.push((ids.program, fv));
        programs.push((sp, desc, ids));
    }
    let backend =
        SyntheticBackend::new(programs.iter().map(|(sp, ..)| sp.clone()).collect(), 7).unwrap();
    for (_, desc, ids) in &programs {
        let target = Target {
            ids: *ids,
            program: desc,
            compiler: &lab.compiler,
        };
        let mut ex = Explorer::new(
            &backend,
            target,
            RunEnv::default(),
            1,
            "-O3",
            Aggregator::Median,
            &mut lab.repo,
        )
        .unwrap();
        for mask in 0u32..64 {
            let on: Vec<String> = (0..6)
                .filter(|f| mask & (1 << f) != 0)
                .map(|f| names[f].clone())
                .collect();
            let c = FlagCombination::new("-O3", on, Vec::new()).unwrap();
            ex.evaluate(&c, &mut lab.repo).unwrap();
        }
    }
    let spec = ModelSpec::new(
        lab.compiler_id,
        lab.platform,
        Objective::Time,
        ModelKind::NearestNeighbor,
    );
    Family {
        _tmp: tmp,
        repo: lab.repo,
        spec,
        backend,
        features: registered,
    }
}

fn c7_predictor_loo(fam: &Family, built: Duration) -> Outcome {
    let start = Instant::now() - built;
    let env = RunEnv::default();
    let nn = leave_one_out_evaluate(&fam.repo, &fam.backend, &fam.spec, &env)
        .map_err(|e| e.to_string())?;
    let per_flag_spec = ModelSpec {
        kind: ModelKind::PerFlagProbability,
        ..fam.spec
    };
    let pf = leave_one_out_evaluate(&fam.repo, &fam.backend, &per_flag_spec, &env)
        .map_err(|e| e.to_string())?;
    check(nn.entries.len() == 50, || {
        format!("{} programs evaluated", nn.entries.len())
    })?;
    let exact = nn
        .entries
        .iter()
        .filter(|e| (e.fraction - 1.0).abs() <= 1e-9)
        .count();
    check(exact >= 48, || format!("1-NN fraction 1.0 for {exact}/50"))?;
    check(pf.mean_fraction() >= 0.9, || {
        format!("per-flag mean fraction {:.4}", pf.mean_fraction())
    })?;
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "1-NN exact for {exact}/50, per-flag mean fraction {:.4} (family built + evaluated in {:.2} s)",
        pf.mean_fraction(),
        start.elapsed().as_secs_f64()
    ))
}

fn field<'a>(body: &'a str, key: &str) -> Option<&'a str> {
    body.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}

fn post(url: &str, body: &str) -> Result<String, String> {
    match ureq::post(url).send_string(body) {
        Ok(r) => r.into_string().map_err(|e| e.to_string()),
        Err(ureq::Error::Status(_, r)) => r.into_string().map_err(|e| e.to_string()),
        Err(e) => Err(e.to_string()),
    }
}

fn c8_service(fam: &Family) -> Outcome {
    let model = train(&fam.repo, &fam.spec).map_err(|e| e.to_string())?;
    let service = PredictionService::start(ServiceConfig::new(
        ModelSource::Fixed(vec![model.clone()]),
        "127.0.0.1:0",
    ))
    .map_err(|e| e.to_string())?;
    let url = service.url();
    let query = |fv: &FeatureVector| {
        format!(
            "PLATFORM_ID={}\nCOMPILER_ID={}\nMODEL=nearest_neighbor\nOBJECTIVE=time\n\
             STATIC_FEATURE_VECTOR={}\n",
            fam.spec.platform_id,
            fam.spec.compiler_id,
            fv.to_list()
        )
    };
    for (program, fv) in fam.features.iter().step_by(7) {
        let entry = model
            .training
            .entries
            .iter()
            .find(|e| e.program_id == *program)
            .ok_or("program missing from training set")?;
        let body = post(&url, &query(fv))?;
        check(field(&body, "STATUS") == Some("OK"), || {
            format!("status in {body:?}")
        })?;
        check(field(&body, "DISTANCE") == Some("0.000000"), || {
            format!("distance in {body:?}")
        })?;
        let best = entry.best.canonical();
        check(field(&body, "OPT_FLAGS") == Some(best.as_str()), || {
            format!("expected {best}, got {body:?}")
        })?;
    }
    for malformed in ["not a packet", "PLATFORM_ID=1\n", "COMPILER_ID\n"] {
        let body = post(&url, malformed)?;
        check(field(&body, "STATUS") == Some("MALFORMED_QUERY"), || {
            format!("{malformed:?} answered {body:?}")
        })?;
    }
    let body = query(&fam.features[13].1);
    let answers: Vec<Result<String, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..100).map(|_| s.spawn(|| post(&url, &body))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let answers: Vec<String> = answers.into_iter().collect::<Result<_, _>>()?;
    check(answers.iter().all(|a| a == &answers[0]), || {
        "concurrent answers differ".into()
    })?;
    check(field(&answers[0], "STATUS") == Some("OK"), || {
        format!("{:?}", answers[0])
    })?;
    service.shutdown();
    Ok(format!(
        "exact matches, malformed bodies and 100 concurrent queries at {url}"
    ))
}

fn two_phase_program(overhead: f64) -> AdaptiveProgram {
    let clone = |id: u32, t1: f64, t2: f64| FunctionClone {
        clone_id: id,
        flags: FlagCombination::level(if id == 0 { "-O3" } else { "-O2" }),
        phase_times: BTreeMap::from([(1, t1), (2, t2)]),
    };
    AdaptiveProgram {
        program_id: EntityId::new(1).unwrap(),
        clones: vec![clone(0, 1.0, 2.0), clone(1, 2.0, 1.0)],
        monitor_overhead: overhead,
    }
}

fn c9_unidapt() -> Outcome {
    let start = Instant::now();
    let phase = |id: u32, a: f64, b: f64| PhaseSpec {
        phase_id: id,
        features: FeatureVector::new(
            FeatureKind::Dynamic,
            [("hc1".to_string(), a), ("hc2".to_string(), b)],
        )
        .unwrap(),
        spread: 0.0,
        mean_length: 400.0,
    };
    let steps = 20_000;
    let trace = PhaseModel {
        phases: vec![phase(1, 1.0, 10.0), phase(2, 10.0, 1.0)],
        steps,
        seed: 9,
    }
    .generate()
    .map_err(|e| e.to_string())?;
    let policy = AdaptationPolicy::default();

    // oracle: clone 0 in phase 1, clone 1 in phase 2, 1.0 s per step
    let oracle_clone = |phase: u32| if phase == 1 { 0 } else { 1 };
    let oracle_total = steps as f64;

    let exact = simulate(&two_phase_program(0.0), &trace, &policy).map_err(|e| e.to_string())?;
    let mismatches = exact
        .choices
        .iter()
        .filter(|c| !c.calibrating && c.clone_id != oracle_clone(c.phase_id))
        .count();
    let calibration = exact.choices.iter().filter(|c| c.calibrating).count();
    check(
        mismatches == 0 && exact.steady_state_mismatches() == 0,
        || format!("{mismatches} steady-state steps off the oracle"),
    )?;
    check((exact.oracle_time - oracle_total).abs() < 1e-6, || {
        format!(
            "oracle time {} vs closed form {oracle_total}",
            exact.oracle_time
        )
    })?;
    let regret0 = (exact.total_time - oracle_total) / oracle_total;
    check(regret0 < 0.01, || {
        format!("zero-overhead regret {regret0:.5}")
    })?;

    let loaded = simulate(&two_phase_program(0.002), &trace, &policy).map_err(|e| e.to_string())?;
    let regret1 = (loaded.total_time - oracle_total) / oracle_total;
    check(regret1 < 0.015, || {
        format!("0.2% overhead regret {regret1:.5}")
    })?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "{steps} steps, {calibration} calibration steps, regret {:.3}% / {:.3}% with overhead ({:.2} s)",
        100.0 * regret0,
        100.0 * regret1,
        start.elapsed().as_secs_f64()
    ))
}

fn c10_speedup() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut base_c = random_compilation(&mut rng);
    base_c.bin_size = 48_870;
    base_c.obj_md5 = "0".repeat(32);
    let mut opt_c = random_compilation(&mut rng);
    opt_c.bin_size = 43_983;
    opt_c.obj_md5 = "1".repeat(32);
    let mut base_run = random_execution(&mut rng);
    base_run.run_id_associate = base_run.run_id;
    base_run.compile_id = base_c.compile_id;
    base_run.output_correct = true;
    base_run.run_time = 16.355512;
    let mut run = random_execution(&mut rng);
    run.run_id_associate = base_run.run_id;
    run.compile_id = opt_c.compile_id;
    run.output_correct = true;
    run.run_time = 8.177756;
    run.dataset_number = base_run.dataset_number;
    let case = derive_case(&opt_c, &[run], &[base_run], &base_c, Aggregator::Median)
        .map_err(|e| e.to_string())?;
    check((case.speedup - 2.0).abs() <= 1e-9, || {
        format!("speedup {}", case.speedup)
    })?;
    Ok(format!("speedup {:.6}", case.speedup))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("packet round-trip", c1_packet_round_trip()),
        ("pareto oracle equivalence", c2_pareto_oracle()),
        ("one-off pruning minimality", c3_prune_minimality()),
        ("exploration convergence", c4_convergence()),
        ("determinism", c5_determinism()),
        ("repository merge algebra", c6_merge_algebra()),
    ];
    let t = Instant::now();
    let fam = family();
    results.push((
        "predictor leave-one-out",
        c7_predictor_loo(&fam, t.elapsed()),
    ));
    results.push(("prediction service contract", c8_service(&fam)));
    results.push(("adaptation regret", c9_unidapt()));
    results.push(("speedup arithmetic", c10_speedup()));

    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("criterion {:>2} [PASS] {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} [FAIL] {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} passed in {:.2} s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
