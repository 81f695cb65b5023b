use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use ctune_core::driver::session::{
    host_platform, load_backend, save_backend, BackendSpec, Prepared, Session, Workspace,
};
use ctune_core::driver::{RunEnv, SyntheticBackend};
use ctune_core::filters::{
    best_time_filter_gated, pareto_filter, pareto_filter_with_compile_time, rank_case, FilterName,
    NOISE_GATE,
};
use ctune_core::model::{
    CompilerDescriptor, Descriptor, EntityId, EntityKind, FeatureKind, FeatureVector,
    FlagCombination, OptimizationCase, SystemDescriptor,
};
use ctune_core::packet::{fmt_f64, write_stream, Packet};
use ctune_core::predictor::{
    leave_one_out_evaluate, predict, train, Model, ModelSource, ModelSpec, PredictionQuery,
    PredictionService, ServiceConfig,
};
use ctune_core::repository::{QueryCriteria, RepoOptions, Repository};
use ctune_core::search::{explore, ExplorationConfig, FlagSpace};
use ctune_core::unidapt::{evolve_clones, simulate, AdaptationPolicy, AdaptiveProgram, PhaseModel};

use crate::args::{
    AdaptCommand, Cli, Command, CompArgs, DbCommand, ExploreArgs, FeatureKindArg, FilterArgs,
    ModelArgs, PredictArgs, QueryArgs, RegisterCommand, RunArgs, ServeArgs, TrainArgs,
};

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Comp(a) => comp(cli, a),
        Command::Run(a) => run(cli, a),
        Command::Explore(a) => explore_cmd(cli, a),
        Command::Filter(a) => filter(cli, a),
        Command::Db { command } => db(cli, command),
        Command::Train(a) => train_cmd(cli, a),
        Command::Predict(a) => predict_cmd(cli, a),
        Command::Serve(a) => serve(cli, a),
        Command::Adapt { command } => adapt(cli, command),
        Command::Register { command } => register(cli, command),
    }
}

fn repo_options(cli: &Cli) -> RepoOptions {
    if cli.deterministic {
        RepoOptions::deterministic(cli.seed)
    } else {
        RepoOptions::default()
    }
}

fn open_local(cli: &Cli) -> Result<Repository> {
    Repository::open_or_create(&cli.db, repo_options(cli))
        .with_context(|| format!("opening repository {}", cli.db.display()))
}

fn open_read(path: &PathBuf) -> Result<Repository> {
    Repository::open_read_only(path)
        .with_context(|| format!("opening repository {}", path.display()))
}

fn shared_path(cli: &Cli) -> Result<PathBuf> {
    cli.shared_db
        .clone()
        .ok_or_else(|| anyhow!("no shared repository; pass --shared-db or set CCC_CT_DB"))
}

fn named_repo(cli: &Cli, name: &str) -> Result<PathBuf> {
    Ok(match name {
        "local" => cli.db.clone(),
        "shared" => shared_path(cli)?,
        path => PathBuf::from(path),
    })
}

fn run_env(repeats: Option<u32>) -> Result<RunEnv> {
    let env = RunEnv::from_process_env()?;
    Ok(match repeats {
        Some(r) => env.with_runs(r),
        None => env,
    })
}

/// An entity id, or the name of a registered entity of `kind`.
fn resolve(repo: &Repository, kind: EntityKind, raw: &str) -> Result<EntityId> {
    if let Ok(id) = raw.parse::<EntityId>() {
        return Ok(id);
    }
    repo.find_entity(kind, raw).map(|e| e.id).ok_or_else(|| {
        anyhow!(
            "no {} named {raw:?} in {}",
            kind.as_str(),
            repo.root().display()
        )
    })
}

fn host_platform_id(repo: &Repository) -> Result<EntityId> {
    let name = host_platform().name;
    repo.find_entity(EntityKind::Platform, &name)
        .map(|e| e.id)
        .ok_or_else(|| anyhow!("platform {name:?} is not registered; pass --platform"))
}

fn print_packets(packets: &[Packet]) {
    print!("{}", write_stream(packets));
}

fn case_packet(c: &OptimizationCase) -> Packet {
    Packet::new()
        .with("COMPILE_ID", c.compile_id().to_string())
        .with("PROGRAM_ID", c.compilation.program_id.to_string())
        .with("DATASET_NUMBER", c.dataset_number.to_string())
        .with("OPT_FLAGS", c.compilation.opt.canonical())
        .with("SPEEDUP", fmt_f64(c.speedup))
        .with("SIZE_RATIO", fmt_f64(c.size_ratio))
        .with("COMPILE_TIME_RATIO", fmt_f64(c.compile_time_ratio))
        .with("DISPERSION", fmt_f64(c.dispersion))
        .with("OUTPUT_CORRECT", if c.output_correct { "1" } else { "0" })
        .with("RANK", c.rank.to_string())
}

fn print_cases(cli: &Cli, cases: &[OptimizationCase]) {
    if cli.packets {
        print_packets(&cases.iter().map(case_packet).collect::<Vec<_>>());
        return;
    }
    println!(
        "{:<36}  {:>9}  {:>9}  {:>7}  {:>4}  OPT_FLAGS",
        "COMPILE_ID", "SPEEDUP", "SIZE", "DATASET", "OK"
    );
    for c in cases {
        println!(
            "{:<36}  {:>9.4}  {:>9.4}  {:>7}  {:>4}  {}",
            c.compile_id().to_string(),
            c.speedup,
            c.size_ratio,
            c.dataset_number,
            if c.output_correct { "yes" } else { "no" },
            c.compilation.opt.canonical()
        );
    }
}

// ---- compile and run ----

fn comp(cli: &Cli, a: &CompArgs) -> Result<()> {
    let ws = Workspace::load(&cli.dir)?;
    let spec = BackendSpec::parse(&a.compiler)?;
    let opt = FlagCombination::parse(&a.flags.join(" "), "")?;
    let mut repo = open_local(cli)?;
    let prepared = Prepared::new(&mut repo, &ws, &spec, cli.seed)?.with_aux_flags(&a.aux);
    let mut session = Session::new(prepared.backend.as_ref(), run_env(None)?);
    if a.no_record {
        session = session.packets_only();
    }
    let record = session.comp(&mut repo, &prepared.target(), &opt)?;
    save_backend(&cli.dir, &spec)?;
    if !record.succeeded() {
        bail!(
            "compilation with {:?} failed; see {}",
            record.opt.canonical(),
            cli.dir.join("_comp").display()
        );
    }
    print_packets(&[record.to_packet()]);
    Ok(())
}

fn backend_for(cli: &Cli, explicit: Option<&str>, ws: &Workspace) -> Result<BackendSpec> {
    if let Some(raw) = explicit {
        return Ok(BackendSpec::parse(raw)?);
    }
    if let Some(spec) = load_backend(&cli.dir)? {
        return Ok(spec);
    }
    if ws.synthetic.is_some() {
        return Ok(BackendSpec::Synthetic("synthetic-gcc".into()));
    }
    bail!(
        "no compiler given and none recorded in {}; pass --compiler",
        cli.dir.display()
    )
}

fn run(cli: &Cli, a: &RunArgs) -> Result<()> {
    let ws = Workspace::load(&cli.dir)?;
    let spec = backend_for(cli, a.compiler.as_deref(), &ws)?;
    let mut repo = open_local(cli)?;
    let prepared = Prepared::new(&mut repo, &ws, &spec, cli.seed)?;
    let mut session = Session::new(prepared.backend.as_ref(), run_env(a.repeats)?);
    if a.no_record {
        session = session.packets_only();
    }
    let report = session.run(&mut repo, &prepared.target(), a.dataset, a.baseline == 1)?;
    if report.cached {
        log::info!("binary unchanged since an earlier run; reusing its results");
    }
    print_packets(
        &report
            .executions
            .iter()
            .map(|e| e.to_packet())
            .collect::<Vec<_>>(),
    );
    Ok(())
}

// ---- exploration ----

fn explore_cmd(cli: &Cli, a: &ExploreArgs) -> Result<()> {
    let ws = Workspace::load(&cli.dir)?;
    let spec = backend_for(cli, a.compiler.as_deref(), &ws)?;
    let space = match (&a.space, &ws.synthetic) {
        (Some(path), _) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            FlagSpace::parse(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, Some(sp)) => {
            let names: Vec<&str> = sp.flag_effects.keys().map(String::as_str).collect();
            FlagSpace::simple(&a.reference, &names)?
        }
        (None, None) => bail!("no flag space; pass --space"),
    };
    let env = run_env(a.repeats)?;
    let config = ExplorationConfig {
        strategy: a.strategy,
        budget: a.budget,
        seed: cli.seed,
        probability: a.probability,
        fixed_length: a.length,
        repeats: env.runs,
        dataset: a.dataset,
        reference_level: a.reference.clone(),
        epsilon: a.epsilon,
        antonyms: a.antonyms,
        ..ExplorationConfig::default()
    };
    let mut repo = open_local(cli)?;
    let prepared = Prepared::new(&mut repo, &ws, &spec, cli.seed)?;
    save_backend(&cli.dir, &spec)?;
    let report = explore(
        prepared.target(),
        &space,
        &config,
        prepared.backend.as_ref(),
        &env,
        &mut repo,
    )?;
    let mut p = Packet::new()
        .with("STRATEGY", a.strategy.cli_name())
        .with("EVALUATIONS", report.evaluations.to_string())
        .with("COMPILATIONS", report.compilations.to_string())
        .with("RUNS", report.runs.to_string())
        .with("CASES", report.cases.len().to_string())
        .with(
            "BASELINE_COMPILE_ID",
            report.baseline.compile_id.to_string(),
        );
    if let Some(best) = &report.best_case {
        p.put("BEST_COMPILE_ID", best.compile_id().to_string());
        p.put("BEST_OPT_FLAGS", best.compilation.opt.canonical());
        p.put("BEST_SPEEDUP", fmt_f64(best.speedup));
    }
    if let Some(i) = report.iterations_to_95pct {
        p.put("ITERATIONS_TO_95PCT", i.to_string());
    }
    print_packets(&[p]);
    Ok(())
}

// ---- filters and repository ----

fn criteria(repo: &Repository, program: Option<&str>) -> Result<QueryCriteria> {
    Ok(QueryCriteria {
        program_id: program
            .map(|p| resolve(repo, EntityKind::Program, p))
            .transpose()?,
        ..QueryCriteria::select_all()
    })
}

fn filtered(
    name: FilterName,
    cases: &[OptimizationCase],
    min_speedup: f64,
    gate: f64,
    with_ct: bool,
) -> Vec<OptimizationCase> {
    match name {
        FilterName::BestTime => best_time_filter_gated(cases, min_speedup, gate),
        FilterName::TimeSizePareto => {
            let eligible: Vec<_> = cases
                .iter()
                .filter(|c| c.output_correct && c.dispersion <= gate)
                .cloned()
                .collect();
            if with_ct {
                pareto_filter_with_compile_time(&eligible)
            } else {
                pareto_filter(&eligible)
            }
        }
    }
}

fn filter(cli: &Cli, a: &FilterArgs) -> Result<()> {
    let path = if a.shared {
        shared_path(cli)?
    } else {
        cli.db.clone()
    };
    let repo = open_read(&path)?;
    let cases = repo.query(&criteria(&repo, a.program.as_deref())?);
    let selected = filtered(a.name, &cases, a.min_speedup, a.gate, a.with_compile_time);
    print_cases(cli, &selected);
    Ok(())
}

fn db(cli: &Cli, command: &DbCommand) -> Result<()> {
    match command {
        DbCommand::Info => {
            let repo = open_local(cli)?;
            let info = repo.info();
            print_packets(&[Packet::new()
                .with("PATH", repo.root().display().to_string())
                .with("COD_VERSION", info.cod_version.as_str())
                .with("CREATED", info.created.as_str())
                .with("INSTANCE_ID", info.instance_id.to_string())
                .with("ENTITIES", repo.entities().len().to_string())
                .with("COMPILATIONS", repo.compilations().len().to_string())
                .with("EXECUTIONS", repo.executions().len().to_string())
                .with("DIGEST", repo.content_digest())]);
        }
        DbCommand::Merge {
            from,
            to,
            filtered: only_filtered,
        } => {
            let from = named_repo(cli, from)?;
            let to = named_repo(cli, to)?;
            if from == to {
                bail!("cannot merge {} into itself", from.display());
            }
            let source = open_read(&from)?;
            let mut dest = Repository::open_or_create(&to, repo_options(cli))
                .with_context(|| format!("opening repository {}", to.display()))?;
            let stats = if *only_filtered {
                let cases = source.query(&QueryCriteria::select_all());
                let mut seen = BTreeSet::new();
                let selected: Vec<_> =
                    filtered(FilterName::BestTime, &cases, 1.0, NOISE_GATE, false)
                        .into_iter()
                        .chain(filtered(
                            FilterName::TimeSizePareto,
                            &cases,
                            1.0,
                            NOISE_GATE,
                            false,
                        ))
                        .filter(|c| seen.insert((c.compile_id(), c.dataset_number)))
                        .collect();
                dest.merge_cases_from(&source, &selected)?
            } else {
                dest.merge_from(&source)?
            };
            print_packets(&[Packet::new()
                .with("NEW", stats.new.to_string())
                .with("DUPLICATE", stats.duplicate.to_string())
                .with("CONFLICTING", stats.conflicting.to_string())]);
        }
        DbCommand::Query(q) => query(cli, q)?,
        DbCommand::Rank {
            compile_id,
            rank,
            dataset,
        } => {
            let id: EntityId = compile_id
                .parse()
                .map_err(|e| anyhow!("bad compile id {compile_id:?}: {e}"))?;
            let mut repo = open_local(cli)?;
            let cases: Vec<_> = repo
                .query(&QueryCriteria {
                    dataset_number: *dataset,
                    include_baselines: true,
                    ..QueryCriteria::select_all()
                })
                .into_iter()
                .filter(|c| c.compile_id() == id)
                .collect();
            let case = match cases.as_slice() {
                [] => bail!("no case with compile id {id}"),
                [c] => c.clone(),
                _ => bail!("compile id {id} has cases on several datasets; pass --dataset"),
            };
            let ranked = rank_case(&case, *rank, &mut repo)?;
            print_packets(&[case_packet(&ranked)]);
        }
        DbCommand::Import { dir } => {
            let mut repo = open_local(cli)?;
            let stats = repo.import_packets(dir)?;
            print_packets(&[Packet::new()
                .with("NEW", stats.new.to_string())
                .with("DUPLICATE", stats.duplicate.to_string())
                .with("CONFLICTING", stats.conflicting.to_string())]);
        }
    }
    Ok(())
}

fn query(cli: &Cli, q: &QueryArgs) -> Result<()> {
    let path = if q.shared {
        shared_path(cli)?
    } else {
        cli.db.clone()
    };
    let repo = open_read(&path)?;
    let mut c = criteria(&repo, q.program.as_deref())?;
    c.compiler_id = q
        .compiler
        .as_deref()
        .map(|v| resolve(&repo, EntityKind::Compiler, v))
        .transpose()?;
    c.platform_id = q
        .platform
        .as_deref()
        .map(|v| resolve(&repo, EntityKind::Platform, v))
        .transpose()?;
    c.dataset_number = q.dataset;
    c.min_speedup = q.min_speedup;
    c.min_rank = q.min_rank;
    c.output_correct = q.correct.then_some(true);
    c.include_baselines = q.include_baselines;
    print_cases(cli, &repo.query(&c));
    Ok(())
}

fn register(cli: &Cli, command: &RegisterCommand) -> Result<()> {
    let descriptor = match command {
        RegisterCommand::Program => Descriptor::Program(Workspace::load(&cli.dir)?.program),
        RegisterCommand::Compiler {
            name,
            template,
            flag_space,
        } => Descriptor::Compiler(CompilerDescriptor {
            name: name.clone(),
            invocation_template: template.clone(),
            flag_space_ref: flag_space.clone(),
        }),
        RegisterCommand::Platform { name, notes } => {
            Descriptor::Platform(SystemDescriptor::new(name.as_str(), notes.as_str()))
        }
        RegisterCommand::Environment { name, notes } => {
            Descriptor::Environment(SystemDescriptor::new(name.as_str(), notes.as_str()))
        }
    };
    let kind = descriptor.kind();
    let mut repo = open_local(cli)?;
    let id = repo.register_entity(descriptor)?;
    print_packets(&[Packet::new()
        .with("ENTITY_KIND", kind.as_str())
        .with("ENTITY_ID", id.to_string())]);
    Ok(())
}

// ---- prediction ----

fn feature_kind(k: FeatureKindArg) -> FeatureKind {
    match k {
        FeatureKindArg::Static => FeatureKind::Static,
        FeatureKindArg::Dynamic => FeatureKind::Dynamic,
    }
}

fn model_spec(repo: &Repository, m: &ModelArgs) -> Result<ModelSpec> {
    let platform = match &m.platform {
        Some(p) => resolve(repo, EntityKind::Platform, p)?,
        None => host_platform_id(repo)?,
    };
    Ok(ModelSpec {
        feature_kind: feature_kind(m.features),
        ..ModelSpec::new(
            resolve(repo, EntityKind::Compiler, &m.compiler)?,
            platform,
            m.objective,
            m.kind,
        )
    })
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let repo = open_read(&cli.db)?;
    let spec = model_spec(&repo, &a.model)?;
    let model = train(&repo, &spec)?;
    if let Some(out) = &a.out {
        fs::write(out, model.to_text()).with_context(|| format!("writing {}", out.display()))?;
    }
    print_packets(&[Packet::new()
        .with("MODEL", spec.kind.as_str())
        .with("OBJECTIVE", spec.objective.as_str())
        .with("PROGRAMS", model.training.entries.len().to_string())
        .with("TRAINING_DIGEST", model.training_digest.as_str())]);
    if a.evaluate {
        let mut programs = Vec::new();
        for entry in &model.training.entries {
            let program = repo
                .entity(entry.program_id)
                .and_then(|e| e.descriptor.as_program())
                .ok_or_else(|| anyhow!("program {} is not registered", entry.program_id))?;
            let ws = Workspace::load(&program.source_dir)?;
            let mut sp = ws.synthetic.ok_or_else(|| {
                anyhow!(
                    "{} has no surrogate model to evaluate with",
                    program.source_dir.display()
                )
            })?;
            sp.id = Some(entry.program_id);
            programs.push(sp);
        }
        let backend = SyntheticBackend::new(programs, cli.seed)?;
        let report = leave_one_out_evaluate(&repo, &backend, &spec, &run_env(None)?)?;
        let mut packets: Vec<Packet> = report
            .entries
            .iter()
            .map(|e| {
                Packet::new()
                    .with("PROGRAM_ID", e.program_id.to_string())
                    .with("OPT_FLAGS", e.predicted.canonical())
                    .with("ACHIEVED", fmt_f64(e.achieved))
                    .with("BEST_KNOWN", fmt_f64(e.best_known))
                    .with("FRACTION", fmt_f64(e.fraction))
            })
            .collect();
        packets.push(Packet::new().with("MEAN_FRACTION", fmt_f64(report.mean_fraction())));
        print_packets(&packets);
    }
    Ok(())
}

fn query_features(cli: &Cli, raw: Option<&str>, kind: FeatureKind) -> Result<FeatureVector> {
    match raw {
        Some(raw) => Ok(FeatureVector::parse(kind, raw)?),
        None => Workspace::load(&cli.dir)?.program.features.ok_or_else(|| {
            anyhow!(
                "the program in {} has no features; pass --features",
                cli.dir.display()
            )
        }),
    }
}

fn predict_cmd(cli: &Cli, a: &PredictArgs) -> Result<()> {
    if let Some(path) = &a.model {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let model =
            Model::from_text(&text).with_context(|| format!("loading {}", path.display()))?;
        let parse_id = |raw: &Option<String>, default: EntityId| -> Result<EntityId> {
            raw.as_deref().map_or(Ok(default), |r| {
                r.parse().map_err(|e| anyhow!("bad id {r:?}: {e}"))
            })
        };
        let query = PredictionQuery {
            platform_id: parse_id(&a.platform, model.spec.platform_id)?,
            environment_id: None,
            compiler_id: parse_id(&a.compiler, model.spec.compiler_id)?,
            features: query_features(cli, a.features.as_deref(), model.spec.feature_kind)?,
            model: a.kind.unwrap_or(model.spec.kind),
            objective: a.objective.unwrap_or(model.spec.objective),
        };
        let prediction = predict(&model, &query)?;
        print_packets(&[prediction.to_response()]);
        return Ok(());
    }
    let url = a
        .service
        .as_deref()
        .expect("clap requires --model or --service");
    let local = || open_read(&cli.db);
    let compiler_id = match &a.compiler {
        Some(c) => match c.parse() {
            Ok(id) => id,
            Err(_) => resolve(&local()?, EntityKind::Compiler, c)?,
        },
        None => bail!("--compiler is required with --service"),
    };
    let platform_id = match &a.platform {
        Some(p) => match p.parse() {
            Ok(id) => id,
            Err(_) => resolve(&local()?, EntityKind::Platform, p)?,
        },
        None => host_platform_id(&local()?)?,
    };
    let query = PredictionQuery {
        platform_id,
        environment_id: None,
        compiler_id,
        features: query_features(cli, a.features.as_deref(), FeatureKind::Static)?,
        model: a
            .kind
            .unwrap_or(ctune_core::predictor::ModelKind::NearestNeighbor),
        objective: a
            .objective
            .unwrap_or(ctune_core::predictor::Objective::Time),
    };
    let body = match ureq::post(url).send_string(&query.to_packet().to_text()) {
        Ok(resp) => resp.into_string()?,
        Err(ureq::Error::Status(code, resp)) => {
            let body = resp.into_string().unwrap_or_default();
            bail!(
                "service returned {code}: {}",
                body.trim().replace('\n', " ")
            )
        }
        Err(e) => return Err(e).with_context(|| format!("querying {url}")),
    };
    print!("{body}");
    Ok(())
}

fn serve(cli: &Cli, a: &ServeArgs) -> Result<()> {
    let source = if a.model.is_empty() {
        ModelSource::Repository(cli.db.clone())
    } else {
        let mut models = Vec::new();
        for path in &a.model {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            models.push(
                Model::from_text(&text).with_context(|| format!("loading {}", path.display()))?,
            );
        }
        ModelSource::Fixed(models)
    };
    let mut config = ServiceConfig::new(source, a.bind.as_str());
    config.workers = a.workers.max(1);
    config.retrain_interval = Duration::from_secs(a.retrain_interval);
    let service = PredictionService::start(config)?;
    eprintln!("serving predictions at {}", service.url());
    service.wait();
    Ok(())
}

// ---- adaptation ----

fn read_program(path: &PathBuf) -> Result<AdaptiveProgram> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    AdaptiveProgram::from_text(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_phases(path: &PathBuf) -> Result<PhaseModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    PhaseModel::from_text(&text).with_context(|| format!("parsing {}", path.display()))
}

fn adapt(cli: &Cli, command: &AdaptCommand) -> Result<()> {
    match command {
        AdaptCommand::Simulate {
            program,
            phases,
            steps,
            bins,
            recalibrate,
            overhead,
            csv,
        } => {
            let mut program = read_program(program)?;
            if let Some(o) = overhead {
                program.monitor_overhead = *o;
            }
            let mut phases = read_phases(phases)?;
            if let Some(s) = steps {
                phases.steps = *s;
            }
            let policy = AdaptationPolicy {
                bins: *bins,
                recalibration_interval: *recalibrate,
            };
            let report = simulate(&program, &phases.generate()?, &policy)?;
            if let Some(csv) = csv {
                report.save_csv(csv)?;
            }
            print!("{}", report.to_text());
        }
        AdaptCommand::Evolve {
            program,
            k,
            phases,
            out,
        } => {
            let program = read_program(program)?;
            let repo = open_read(&cli.db)?;
            let mean_times = match phases {
                Some(p) => {
                    let trace = read_phases(p)?.generate()?;
                    simulate(&program, &trace, &AdaptationPolicy::default())?
                        .clone_mean_times(&program)
                }
                None => program.static_mean_times(),
            };
            let evolved = evolve_clones(&program, &repo, *k, &mean_times)?;
            match out {
                Some(path) => fs::write(path, evolved.to_text())
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print!("{}", evolved.to_text()),
            }
        }
    }
    Ok(())
}
