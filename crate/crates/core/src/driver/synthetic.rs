//! Deterministic surrogate backend with a closed-form performance model.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use md5::{Digest as _, Md5};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::Sha256;
use thiserror::Error;

use super::{
    Backend, Capability, CompileOutcome, DriverError, RunEnv, RunOutcome, RunOutputs, RunTimes,
    Target,
};
use crate::model::{
    DatasetEntry, EntityId, FeatureKind, FeatureVector, FlagCombination, ProgramDescriptor,
};
use crate::packet::{parse_stream, Packet, PacketError};

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("synthetic program {name}: {reason}")]
    Invalid { name: String, reason: String },
    #[error(transparent)]
    Packet(#[from] PacketError),
}

/// Multipliers applied when a flag (or base level) is active.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlagEffect {
    pub time: f64,
    pub size: f64,
    pub compile: f64,
}

impl Default for FlagEffect {
    fn default() -> Self {
        Self::NEUTRAL
    }
}

impl FlagEffect {
    pub const NEUTRAL: FlagEffect = FlagEffect {
        time: 1.0,
        size: 1.0,
        compile: 1.0,
    };

    pub fn new(time: f64, size: f64) -> Self {
        Self {
            time,
            size,
            compile: 1.0,
        }
    }

    pub fn is_neutral(&self) -> bool {
        *self == Self::NEUTRAL
    }
}

/// Surrogate program: run time, size and compile time are products of
/// per-flag multipliers, interaction terms, and a dataset modifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticProgram {
    pub name: String,
    pub id: Option<EntityId>,
    pub base_time: f64,
    pub base_size: u64,
    pub base_compile_time: f64,
    pub flag_effects: BTreeMap<String, FlagEffect>,
    pub level_effects: BTreeMap<String, FlagEffect>,
    /// Extra time multiplier applied when every flag of the set is active.
    pub interactions: Vec<(BTreeSet<String>, f64)>,
    pub dataset_modifiers: BTreeMap<u32, f64>,
    pub dataset_count: u32,
    pub noise_sigma: f64,
    pub features: Option<FeatureVector>,
    /// Flags that make the program produce wrong output.
    pub breaking_flags: BTreeSet<String>,
}

impl SyntheticProgram {
    pub fn new(name: impl Into<String>, base_time: f64, base_size: u64) -> Self {
        Self {
            name: name.into(),
            id: None,
            base_time,
            base_size,
            base_compile_time: 1.0,
            flag_effects: BTreeMap::new(),
            level_effects: BTreeMap::new(),
            interactions: Vec::new(),
            dataset_modifiers: BTreeMap::new(),
            dataset_count: 1,
            noise_sigma: 0.0,
            features: None,
            breaking_flags: BTreeSet::new(),
        }
    }

    pub fn with_flag(mut self, flag: &str, time: f64, size: f64) -> Self {
        self.flag_effects
            .insert(flag.to_string(), FlagEffect::new(time, size));
        self
    }

    pub fn with_interaction(mut self, flags: &[&str], multiplier: f64) -> Self {
        self.interactions
            .push((flags.iter().map(|f| f.to_string()).collect(), multiplier));
        self
    }

    pub fn validate(&self) -> Result<(), SyntheticError> {
        let invalid = |reason: String| SyntheticError::Invalid {
            name: self.name.clone(),
            reason,
        };
        if self.name.trim().is_empty() {
            return Err(invalid("empty name".into()));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.base_time) {
            return Err(invalid(format!(
                "base time {} must be positive",
                self.base_time
            )));
        }
        if self.base_size == 0 {
            return Err(invalid("base size must be positive".into()));
        }
        if !positive(self.base_compile_time) {
            return Err(invalid("base compile time must be positive".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(invalid("noise sigma must be non-negative".into()));
        }
        for (flag, e) in self.flag_effects.iter().chain(&self.level_effects) {
            if ![e.time, e.size, e.compile].into_iter().all(positive) {
                return Err(invalid(format!("{flag}: multipliers must be positive")));
            }
        }
        for (set, m) in &self.interactions {
            if !positive(*m) || set.is_empty() {
                return Err(invalid(
                    "interaction needs flags and a positive multiplier".into(),
                ));
            }
        }
        for (d, m) in &self.dataset_modifiers {
            if !positive(*m) || *d == 0 || *d > self.dataset_count {
                return Err(invalid(format!("dataset modifier {d}={m}")));
            }
        }
        if self.dataset_count == 0 {
            return Err(invalid("needs at least one dataset".into()));
        }
        Ok(())
    }

    fn interaction_flags(&self) -> BTreeSet<&str> {
        self.interactions
            .iter()
            .flat_map(|(s, _)| s.iter().map(String::as_str))
            .collect()
    }

    /// Active flags that influence the generated code, sorted.
    pub fn effective_flags(&self, opt: &FlagCombination) -> Vec<String> {
        let interacting = self.interaction_flags();
        let mut flags: Vec<String> = opt
            .flags()
            .iter()
            .filter(|f| {
                self.flag_effects.get(*f).is_some_and(|e| !e.is_neutral())
                    || interacting.contains(f.as_str())
                    || self.breaking_flags.contains(*f)
            })
            .cloned()
            .collect();
        flags.sort();
        flags.dedup();
        flags
    }

    fn level_effect(&self, opt: &FlagCombination) -> FlagEffect {
        self.level_effects
            .get(opt.base_level())
            .copied()
            .unwrap_or_default()
    }

    fn flag_product(&self, opt: &FlagCombination, pick: impl Fn(&FlagEffect) -> f64) -> f64 {
        opt.flags()
            .iter()
            .filter_map(|f| self.flag_effects.get(f))
            .map(pick)
            .product()
    }

    /// Noiseless run time for a dataset.
    pub fn expected_time(&self, opt: &FlagCombination, dataset: u32) -> f64 {
        let active: BTreeSet<&str> = opt.flags().iter().map(String::as_str).collect();
        let interactions: f64 = self
            .interactions
            .iter()
            .filter(|(set, _)| set.iter().all(|f| active.contains(f.as_str())))
            .map(|(_, m)| *m)
            .product();
        self.base_time
            * self.level_effect(opt).time
            * self.flag_product(opt, |e| e.time)
            * interactions
            * self.dataset_modifiers.get(&dataset).copied().unwrap_or(1.0)
    }

    pub fn expected_size(&self, opt: &FlagCombination) -> u64 {
        let size = self.base_size as f64
            * self.level_effect(opt).size
            * self.flag_product(opt, |e| e.size);
        (size.round() as u64).max(1)
    }

    pub fn expected_compile_time(&self, opt: &FlagCombination) -> f64 {
        self.base_compile_time
            * self.level_effect(opt).compile
            * self.flag_product(opt, |e| e.compile)
    }

    /// Code identity: identical for combinations differing only in
    /// no-effect flags.
    pub fn code_md5(&self, program_key: &str, opt: &FlagCombination) -> String {
        let level = if self.level_effect(opt).is_neutral() {
            ""
        } else {
            opt.base_level()
        };
        let text = format!(
            "{program_key}\n{level}\n{}",
            self.effective_flags(opt).join(" ")
        );
        hex(&Md5::digest(text.as_bytes()))
    }

    pub fn breaks_output(&self, opt: &FlagCombination) -> bool {
        opt.flags().iter().any(|f| self.breaking_flags.contains(f))
    }

    pub fn descriptor(&self) -> ProgramDescriptor {
        ProgramDescriptor {
            name: self.name.clone(),
            source_dir: PathBuf::from(format!("synthetic/{}", self.name)),
            datasets: (1..=self.dataset_count)
                .map(|n| DatasetEntry {
                    number: n,
                    command_line: format!("dataset {n}"),
                    loop_wrapper_bound: 1,
                })
                .collect(),
            features: self.features.clone(),
        }
    }

    pub fn from_packet(p: &Packet) -> Result<Self, SyntheticError> {
        let name = p.require("SPROG")?.trim().to_string();
        let mut prog = SyntheticProgram::new(
            name,
            p.parse_required("BASE_TIME")?,
            p.parse_required("BASE_SIZE")?,
        );
        prog.id = p.parse_optional("PROGRAM_ID")?;
        if let Some(v) = p.parse_optional("BASE_COMPILE_TIME")? {
            prog.base_compile_time = v;
        }
        if let Some(v) = p.parse_optional("NOISE_SIGMA")? {
            prog.noise_sigma = v;
        }
        if let Some(raw) = p.get("FLAG_EFFECTS") {
            prog.flag_effects = parse_effects("FLAG_EFFECTS", raw)?;
        }
        if let Some(raw) = p.get("LEVEL_EFFECTS") {
            prog.level_effects = parse_effects("LEVEL_EFFECTS", raw)?;
        }
        if let Some(raw) = p.get("INTERACTIONS") {
            for item in items(raw) {
                let mut tokens: Vec<&str> = item.split_whitespace().collect();
                let m = tokens
                    .pop()
                    .and_then(|t| t.parse::<f64>().ok())
                    .ok_or_else(|| {
                        PacketError::invalid(
                            "INTERACTIONS",
                            item,
                            "expected flags then a multiplier",
                        )
                    })?;
                prog.interactions
                    .push((tokens.into_iter().map(str::to_string).collect(), m));
            }
        }
        if let Some(raw) = p.get("DATASET_MODIFIERS") {
            for item in items(raw) {
                let bad = || {
                    PacketError::invalid(
                        "DATASET_MODIFIERS",
                        item,
                        "expected '<dataset> <multiplier>'",
                    )
                };
                let (d, m) = item.split_once(char::is_whitespace).ok_or_else(bad)?;
                prog.dataset_modifiers.insert(
                    d.trim().parse().map_err(|_| bad())?,
                    m.trim().parse().map_err(|_| bad())?,
                );
            }
        }
        prog.dataset_count = match p.parse_optional::<u32>("DATASETS")? {
            Some(n) => n,
            None => prog.dataset_modifiers.keys().max().copied().unwrap_or(1),
        };
        for kind in [FeatureKind::Static, FeatureKind::Dynamic] {
            if let Some(raw) = p.get(kind.packet_key()) {
                let fv = FeatureVector::parse(kind, raw)
                    .map_err(|e| PacketError::invalid(kind.packet_key(), raw, e.to_string()))?;
                prog.features = Some(match p.get("PASS") {
                    Some(pass) => fv.with_anchor_pass(pass),
                    None => fv,
                });
            }
        }
        if let Some(raw) = p.get("BREAKING_FLAGS") {
            prog.breaking_flags = raw.split_whitespace().map(str::to_string).collect();
        }
        prog.validate()?;
        Ok(prog)
    }

    pub fn to_packet(&self) -> Packet {
        let mut p = Packet::new().with("SPROG", self.name.as_str());
        if let Some(id) = self.id {
            p.put("PROGRAM_ID", id.to_string());
        }
        p.put("BASE_TIME", self.base_time.to_string());
        p.put("BASE_SIZE", self.base_size.to_string());
        p.put("BASE_COMPILE_TIME", self.base_compile_time.to_string());
        p.put("NOISE_SIGMA", self.noise_sigma.to_string());
        p.put("DATASETS", self.dataset_count.to_string());
        if !self.flag_effects.is_empty() {
            p.put("FLAG_EFFECTS", write_effects(&self.flag_effects));
        }
        if !self.level_effects.is_empty() {
            p.put("LEVEL_EFFECTS", write_effects(&self.level_effects));
        }
        if !self.interactions.is_empty() {
            let s = self
                .interactions
                .iter()
                .map(|(set, m)| {
                    let flags: Vec<&str> = set.iter().map(String::as_str).collect();
                    format!("{} {m}", flags.join(" "))
                })
                .collect::<Vec<_>>()
                .join("; ");
            p.put("INTERACTIONS", s);
        }
        if !self.dataset_modifiers.is_empty() {
            let s = self
                .dataset_modifiers
                .iter()
                .map(|(d, m)| format!("{d} {m}"))
                .collect::<Vec<_>>()
                .join("; ");
            p.put("DATASET_MODIFIERS", s);
        }
        if let Some(f) = &self.features {
            p.put(f.kind().packet_key(), f.to_list());
            if !f.anchor_pass().is_empty() {
                p.put("PASS", f.anchor_pass());
            }
        }
        if !self.breaking_flags.is_empty() {
            let flags: Vec<&str> = self.breaking_flags.iter().map(String::as_str).collect();
            p.put("BREAKING_FLAGS", flags.join(" "));
        }
        p
    }
}

fn items(raw: &str) -> impl Iterator<Item = &str> {
    raw.split(';').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_effects(key: &str, raw: &str) -> Result<BTreeMap<String, FlagEffect>, PacketError> {
    let mut out = BTreeMap::new();
    for item in items(raw) {
        let tokens: Vec<&str> = item.split_whitespace().collect();
        let nums: Option<Vec<f64>> = tokens.iter().skip(1).map(|t| t.parse().ok()).collect();
        let effect = match (tokens.first(), nums.as_deref()) {
            (Some(_), Some([t])) => FlagEffect::new(*t, 1.0),
            (Some(_), Some([t, s])) => FlagEffect::new(*t, *s),
            (Some(_), Some([t, s, c])) => FlagEffect {
                time: *t,
                size: *s,
                compile: *c,
            },
            _ => {
                return Err(PacketError::invalid(
                    key,
                    item,
                    "expected '<flag> <time> [<size> [<compile>]]'",
                ))
            }
        };
        if out.insert(tokens[0].to_string(), effect).is_some() {
            return Err(PacketError::invalid(key, item, "flag listed twice"));
        }
    }
    Ok(out)
}

fn write_effects(effects: &BTreeMap<String, FlagEffect>) -> String {
    effects
        .iter()
        .map(|(f, e)| format!("{f} {} {} {}", e.time, e.size, e.compile))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Parses a stream of `SPROG` packets.
pub fn parse_synthetic_programs(text: &str) -> Result<Vec<SyntheticProgram>, SyntheticError> {
    parse_stream(text)?
        .iter()
        .map(SyntheticProgram::from_packet)
        .collect()
}

pub fn write_synthetic_programs(programs: &[SyntheticProgram]) -> String {
    let mut out = String::new();
    for p in programs {
        out.push_str(&p.to_packet().to_text());
        out.push('\n');
    }
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Backend evaluating [`SyntheticProgram`]s. Noise is drawn from a generator
/// seeded by (seed, program, code identity, dataset, repeat), so results are
/// reproducible across runs and processes.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    programs: Vec<SyntheticProgram>,
    seed: u64,
}

impl SyntheticBackend {
    pub fn new(programs: Vec<SyntheticProgram>, seed: u64) -> Result<Self, SyntheticError> {
        for p in &programs {
            p.validate()?;
        }
        Ok(Self { programs, seed })
    }

    pub fn programs(&self) -> &[SyntheticProgram] {
        &self.programs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Finds the model for a target by registered id, then by name.
    pub fn program_for(&self, target: &Target<'_>) -> Result<&SyntheticProgram, DriverError> {
        self.programs
            .iter()
            .find(|p| p.id == Some(target.ids.program))
            .or_else(|| self.programs.iter().find(|p| p.name == target.program.name))
            .ok_or_else(|| DriverError::UnknownProgram(target.program.name.clone()))
    }

    fn noise(&self, key: &str, dataset: u32, repeat: u32, sigma: f64) -> f64 {
        if sigma == 0.0 {
            return 0.0;
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(key.as_bytes());
        h.update(dataset.to_le_bytes());
        h.update(repeat.to_le_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        Normal::new(0.0, sigma)
            .expect("sigma validated")
            .sample(&mut rng)
    }
}

impl Backend for SyntheticBackend {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn capabilities(&self) -> BTreeSet<Capability> {
        [
            Capability::Compile,
            Capability::Run,
            Capability::OutputValidation,
            Capability::Deterministic,
        ]
        .into()
    }

    fn compile(
        &self,
        target: &Target<'_>,
        opt: &FlagCombination,
        _env: &RunEnv,
    ) -> Result<CompileOutcome, DriverError> {
        let prog = self.program_for(target)?;
        Ok(CompileOutcome {
            success: true,
            compile_time: prog.expected_compile_time(opt),
            bin_size: prog.expected_size(opt),
            obj_md5: prog.code_md5(&target.ids.program.to_string(), opt),
            log: String::new(),
        })
    }

    fn run(
        &self,
        target: &Target<'_>,
        opt: &FlagCombination,
        dataset: u32,
        repeats: u32,
        _env: &RunEnv,
        reference: Option<&RunOutputs>,
    ) -> Result<RunOutcome, DriverError> {
        let prog = self.program_for(target)?;
        if dataset == 0 || dataset > prog.dataset_count {
            return Err(DriverError::InvalidDataset {
                dataset,
                count: prog.dataset_count as usize,
            });
        }
        let expected = prog.expected_time(opt, dataset);
        let key = prog.code_md5(&target.ids.program.to_string(), opt);
        let times = (0..repeats.max(1))
            .map(|r| {
                let factor = (1.0 + self.noise(&key, dataset, r, prog.noise_sigma)).max(0.05);
                let t = expected * factor;
                RunTimes {
                    run_time: t,
                    run_time_user: t,
                    run_time_sys: 0.0,
                }
            })
            .collect();
        let body = if prog.breaks_output(opt) {
            format!("{} dataset {dataset}: corrupted\n", prog.name)
        } else {
            format!("{} dataset {dataset}: ok\n", prog.name)
        };
        let outputs: RunOutputs = [("stdout".to_string(), body.into_bytes())].into();
        Ok(RunOutcome {
            times,
            output_correct: reference.is_none_or(|r| *r == outputs),
            outputs,
            profile: BTreeMap::new(),
            hardware_counters: BTreeMap::new(),
            notes: format!("synthetic seed={}", self.seed),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{compile, run, ExperimentIds, Reference};
    use crate::model::{CompilerDescriptor, Stamper};

    fn id(v: u128) -> EntityId {
        EntityId::new(v).unwrap()
    }

    fn ids() -> ExperimentIds {
        ExperimentIds {
            platform: id(1),
            environment: id(2),
            compiler: id(3),
            program: id(4),
        }
    }

    fn compiler() -> CompilerDescriptor {
        CompilerDescriptor {
            name: "synthetic-cc".into(),
            invocation_template: "cc {flags} -o {output} {sources}".into(),
            flag_space_ref: String::new(),
        }
    }

    fn opt(s: &str) -> FlagCombination {
        FlagCombination::parse(s, "").unwrap()
    }

    fn prog() -> SyntheticProgram {
        SyntheticProgram::new("p", 10.0, 48870)
            .with_flag("-fa", 0.8, 0.9)
            .with_flag("-fb", 0.5, 1.0)
            .with_flag("-fnone", 1.0, 1.0)
            .with_interaction(&["-fa", "-fb"], 1.5)
    }

    #[test]
    fn closed_form_examples() {
        let p = prog();
        assert_eq!(p.expected_size(&opt("-O3")), 48870);
        assert_eq!(p.expected_size(&opt("-O3 -fa")), 43983);
        assert!((p.expected_time(&opt("-O3 -fa"), 1) - 8.0).abs() < 1e-12);
        assert!((p.expected_time(&opt("-O3 -fa -fb"), 1) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn no_effect_flags_collide() {
        let p = prog();
        assert_eq!(
            p.code_md5("4", &opt("-O3 -fa")),
            p.code_md5("4", &opt("-O3 -fa -fnone"))
        );
        assert_ne!(
            p.code_md5("4", &opt("-O3 -fa")),
            p.code_md5("4", &opt("-O3 -fb"))
        );
    }

    #[test]
    fn driver_records_and_reference_association() {
        let p = prog();
        let desc = p.descriptor();
        let cc = compiler();
        let backend = SyntheticBackend::new(vec![p], 7).unwrap();
        let target = Target {
            ids: ids(),
            program: &desc,
            compiler: &cc,
        };
        let env = RunEnv::default().with_runs(3);
        let mut st = Stamper::seeded(1);
        let (base, _) = compile(&backend, &target, &opt("-O3"), &env, &mut st).unwrap();
        let (runs, outcome) = run(
            &backend,
            &target,
            &base,
            1,
            &env,
            Reference::Capture,
            &mut st,
        )
        .unwrap();
        assert_eq!(runs.len(), 3);
        assert!(runs[0].is_reference());
        assert!(runs.iter().all(|r| r.run_id_associate == runs[0].run_id));
        assert_eq!(outcome.times.len(), 3);

        let (c, _) = compile(&backend, &target, &opt("-O3 -fa"), &env, &mut st).unwrap();
        let missing = run(
            &backend,
            &target,
            &c,
            1,
            &env,
            Reference::Compare {
                baseline_run: runs[0].run_id,
                outputs: None,
            },
            &mut st,
        );
        assert!(matches!(
            missing,
            Err(DriverError::MissingReference { dataset: 1 })
        ));
        let (cr, _) = run(
            &backend,
            &target,
            &c,
            1,
            &env,
            Reference::Compare {
                baseline_run: runs[0].run_id,
                outputs: Some(&outcome.outputs),
            },
            &mut st,
        )
        .unwrap();
        assert!(cr.iter().all(|r| r.output_correct && r.run_time == 8.0));
    }

    #[test]
    fn breaking_flag_fails_validation() {
        let mut p = prog();
        p.breaking_flags.insert("-fbad".into());
        let desc = p.descriptor();
        let cc = compiler();
        let backend = SyntheticBackend::new(vec![p], 7).unwrap();
        let target = Target {
            ids: ids(),
            program: &desc,
            compiler: &cc,
        };
        let env = RunEnv::default();
        let base = backend.run(&target, &opt("-O3"), 1, 1, &env, None).unwrap();
        let bad = backend
            .run(&target, &opt("-O3 -fbad"), 1, 1, &env, Some(&base.outputs))
            .unwrap();
        assert!(!bad.output_correct);
    }

    #[test]
    fn noise_is_reproducible() {
        let mut p = prog();
        p.noise_sigma = 0.05;
        let desc = p.descriptor();
        let cc = compiler();
        let a = SyntheticBackend::new(vec![p.clone()], 11).unwrap();
        let b = SyntheticBackend::new(vec![p], 11).unwrap();
        let target = Target {
            ids: ids(),
            program: &desc,
            compiler: &cc,
        };
        let env = RunEnv::default();
        let ra = a.run(&target, &opt("-O3 -fa"), 1, 5, &env, None).unwrap();
        let rb = b.run(&target, &opt("-O3 -fa"), 1, 5, &env, None).unwrap();
        assert_eq!(ra.times, rb.times);
        assert!(ra.times.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn sprog_packets_round_trip() {
        let text =
            "SPROG=susan_c\nPROGRAM_ID=1487849553352134\nBASE_TIME=16.355512\nBASE_SIZE=48870\n\
                    FLAG_EFFECTS=-funroll-loops 0.9 1.1; -fomit-frame-pointer 0.95\n\
                    INTERACTIONS=-funroll-loops -fomit-frame-pointer 0.97\n\
                    DATASET_MODIFIERS=1 1.0; 2 1.3\nSTATIC_FEATURE_VECTOR= ft1=9, ft2=4\n\n";
        let progs = parse_synthetic_programs(text).unwrap();
        assert_eq!(progs.len(), 1);
        let p = &progs[0];
        assert_eq!(p.dataset_count, 2);
        assert_eq!(
            p.flag_effects["-fomit-frame-pointer"],
            FlagEffect::new(0.95, 1.0)
        );
        let again = parse_synthetic_programs(&write_synthetic_programs(&progs)).unwrap();
        assert_eq!(&again, &progs);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Debug, Clone)]
        struct Spec {
            base_time: f64,
            level: (String, f64),
            flags: Vec<(String, f64, bool)>,
            interaction: Option<(Vec<usize>, f64)>,
            modifier: f64,
            dataset: u32,
            repeats: u32,
        }

        fn spec() -> impl Strategy<Value = Spec> {
            (
                0.01f64..100.0,
                ("-O[0-3s]", 0.2f64..2.0),
                prop::collection::vec((0.2f64..2.0, any::<bool>()), 1..10),
                prop::option::of((prop::collection::vec(0usize..10, 1..4), 0.5f64..1.5)),
                0.5f64..2.0,
                1u32..3,
                1u32..6,
            )
                .prop_map(
                    |(base_time, level, fl, interaction, modifier, dataset, repeats)| Spec {
                        base_time,
                        level,
                        flags: fl
                            .into_iter()
                            .enumerate()
                            .map(|(i, (m, on))| (format!("-ff{i}"), m, on))
                            .collect(),
                        interaction,
                        modifier,
                        dataset,
                        repeats,
                    },
                )
        }

        /// Product of every active multiplier, summed in log space.
        fn oracle(s: &Spec) -> f64 {
            let mut log = s.base_time.ln() + s.level.1.ln();
            for (_, m, on) in &s.flags {
                if *on {
                    log += m.ln();
                }
            }
            if let Some((members, m)) = &s.interaction {
                let members: Vec<usize> = members.iter().map(|i| i % s.flags.len()).collect();
                if members.iter().all(|&i| s.flags[i].2) {
                    log += m.ln();
                }
            }
            if s.dataset == 2 {
                log += s.modifier.ln();
            }
            log.exp()
        }

        fn build(s: &Spec) -> (SyntheticProgram, FlagCombination) {
            let mut p = SyntheticProgram::new("p", s.base_time, 1000);
            p.level_effects
                .insert(s.level.0.clone(), FlagEffect::new(s.level.1, 1.0));
            for (f, m, _) in &s.flags {
                p = p.with_flag(f, *m, 1.0);
            }
            if let Some((members, m)) = &s.interaction {
                let names: Vec<&str> = members
                    .iter()
                    .map(|i| s.flags[i % s.flags.len()].0.as_str())
                    .collect();
                p = p.with_interaction(&names, *m);
            }
            p.dataset_modifiers.insert(2, s.modifier);
            p.dataset_count = 2;
            let active = s
                .flags
                .iter()
                .filter(|f| f.2)
                .map(|f| f.0.clone())
                .collect();
            (
                p,
                FlagCombination::new(s.level.0.clone(), active, Vec::new()).unwrap(),
            )
        }

        proptest! {
            #[test]
            fn noiseless_time_matches_closed_form(s in spec()) {
                let (p, opt) = build(&s);
                let desc = p.descriptor();
                let cc = compiler();
                let target = Target { ids: ids(), program: &desc, compiler: &cc };
                let backend = SyntheticBackend::new(vec![p], 9).unwrap();
                let env = RunEnv::default();
                let r = backend.run(&target, &opt, s.dataset, s.repeats, &env, None).unwrap();
                prop_assert_eq!(r.times.len(), s.repeats as usize);
                let want = oracle(&s);
                for t in &r.times {
                    prop_assert!(((t.run_time - want) / want).abs() <= 1e-12, "{} vs {}", t.run_time, want);
                }
                let again = backend.run(&target, &opt, s.dataset, s.repeats, &env, None).unwrap();
                prop_assert_eq!(&again.times, &r.times);
                prop_assert_eq!(
                    backend.compile(&target, &opt, &env).unwrap().obj_md5,
                    backend.compile(&target, &opt, &env).unwrap().obj_md5
                );
            }
        }
    }
}
