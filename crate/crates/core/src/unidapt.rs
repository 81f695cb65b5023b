//! Run-time adaptation simulator for multiversioned programs.
//!
//! A program carries several clones of a hot function, each with a cost per
//! program phase. While the program runs, dynamic features are observed and
//! quantized into a signature; an association table learns which clone is
//! fastest for each signature by trying every clone once, then exploits it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::filters::pareto_filter;
use crate::model::{EntityId, FeatureKind, FeatureVector, FlagCombination};
use crate::packet::{fmt_f64, parse_stream, write_stream, Packet, PacketError};
use crate::repository::{QueryCriteria, Repository};

pub const DEFAULT_BINS: usize = 8;
pub const DEFAULT_RECALIBRATION: u64 = 1000;
pub const DEFAULT_MONITOR_OVERHEAD: f64 = 0.002;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("trace has no steps")]
    EmptyTrace,
    #[error("invalid adaptive program: {0}")]
    InvalidProgram(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid phase model: {0}")]
    InvalidPhaseModel(String),
    #[error("clone {clone} has no time for phase {phase}")]
    MissingPhaseTime { clone: u32, phase: u32 },
    #[error("no candidate combinations in the repository for program {0}")]
    NoCandidates(EntityId),
    #[error(transparent)]
    Packet(#[from] PacketError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// One statically compiled version of the hot function.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionClone {
    pub clone_id: u32,
    pub flags: FlagCombination,
    /// Seconds per invocation in each phase.
    pub phase_times: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveProgram {
    pub program_id: EntityId,
    /// Clone 0 is the original.
    pub clones: Vec<FunctionClone>,
    /// Fraction added to every invocation.
    pub monitor_overhead: f64,
}

impl AdaptiveProgram {
    pub fn validate(&self) -> Result<(), AdaptError> {
        let bad = |m: String| Err(AdaptError::InvalidProgram(m));
        if self.clones.is_empty() {
            return bad("no clones".into());
        }
        let mut ids = BTreeSet::new();
        for c in &self.clones {
            if !ids.insert(c.clone_id) {
                return bad(format!("duplicate clone id {}", c.clone_id));
            }
            if let Some((p, t)) = c
                .phase_times
                .iter()
                .find(|(_, t)| !(**t > 0.0 && t.is_finite()))
            {
                return bad(format!(
                    "clone {} phase {p} time {t} must be positive",
                    c.clone_id
                ));
            }
        }
        if !ids.contains(&0) {
            return bad("clone 0 (the original) is missing".into());
        }
        if !(self.monitor_overhead >= 0.0 && self.monitor_overhead.is_finite()) {
            return bad(format!(
                "monitor overhead {} must be >= 0",
                self.monitor_overhead
            ));
        }
        Ok(())
    }

    fn time(&self, clone: &FunctionClone, phase: u32) -> Result<f64, AdaptError> {
        clone
            .phase_times
            .get(&phase)
            .copied()
            .ok_or(AdaptError::MissingPhaseTime {
                clone: clone.clone_id,
                phase,
            })
    }

    /// Mean phase time per clone, without any observations.
    pub fn static_mean_times(&self) -> BTreeMap<u32, f64> {
        self.clones
            .iter()
            .map(|c| {
                let n = c.phase_times.len().max(1) as f64;
                (c.clone_id, c.phase_times.values().sum::<f64>() / n)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut packets = vec![Packet::new()
            .with("PROGRAM_ID", self.program_id.to_string())
            .with("MONITOR_OVERHEAD", fmt_f64(self.monitor_overhead))];
        for c in &self.clones {
            let times = c
                .phase_times
                .iter()
                .map(|(p, t)| format!("{p} {}", fmt_f64(*t)))
                .collect::<Vec<_>>()
                .join("; ");
            packets.push(
                Packet::new()
                    .with("CLONE_ID", c.clone_id.to_string())
                    .with("OPT_FLAGS", c.flags.canonical())
                    .with("PHASE_TIMES", times),
            );
        }
        write_stream(&packets)
    }

    pub fn from_text(text: &str) -> Result<Self, AdaptError> {
        let packets = parse_stream(text)?;
        let header = packets
            .iter()
            .find(|p| p.contains("PROGRAM_ID"))
            .ok_or(PacketError::MissingRequiredKey("PROGRAM_ID".into()))?;
        let mut clones = Vec::new();
        for p in packets.iter().filter(|p| p.contains("CLONE_ID")) {
            let opt = p.get("OPT_FLAGS").unwrap_or("");
            let raw = p.require("PHASE_TIMES")?;
            let mut phase_times = BTreeMap::new();
            for item in raw.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                let parsed = item
                    .split_once(' ')
                    .and_then(|(ph, t)| Some((ph.trim().parse().ok()?, t.trim().parse().ok()?)));
                let (ph, t): (u32, f64) = parsed.ok_or_else(|| {
                    PacketError::invalid("PHASE_TIMES", raw, "expected `phase seconds`")
                })?;
                phase_times.insert(ph, t);
            }
            clones.push(FunctionClone {
                clone_id: p.parse_required("CLONE_ID")?,
                flags: FlagCombination::parse(opt, "")
                    .map_err(|e| PacketError::invalid("OPT_FLAGS", opt, e))?,
                phase_times,
            });
        }
        let program = Self {
            program_id: header.parse_required("PROGRAM_ID")?,
            clones,
            monitor_overhead: header
                .parse_optional("MONITOR_OVERHEAD")?
                .unwrap_or(DEFAULT_MONITOR_OVERHEAD),
        };
        program.validate()?;
        Ok(program)
    }
}

/// A phase with its characteristic feature distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpec {
    pub phase_id: u32,
    pub features: FeatureVector,
    /// Relative uniform jitter applied to each feature value.
    pub spread: f64,
    /// Expected number of consecutive steps spent in the phase.
    pub mean_length: f64,
}

/// Seeded Markov phase model: stay with probability `1 - 1/mean_length`,
/// otherwise jump to a uniformly chosen other phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseModel {
    pub phases: Vec<PhaseSpec>,
    pub steps: usize,
    pub seed: u64,
}

impl PhaseModel {
    pub fn validate(&self) -> Result<(), AdaptError> {
        let bad = |m: String| Err(AdaptError::InvalidPhaseModel(m));
        if self.phases.is_empty() {
            return bad("no phases".into());
        }
        let mut ids = BTreeSet::new();
        for p in &self.phases {
            if !ids.insert(p.phase_id) {
                return bad(format!("duplicate phase {}", p.phase_id));
            }
            if !(p.mean_length >= 1.0) {
                return bad(format!("phase {} mean length must be >= 1", p.phase_id));
            }
            if !(0.0..1.0).contains(&p.spread) {
                return bad(format!("phase {} spread must be in [0, 1)", p.phase_id));
            }
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<PhaseTrace, AdaptError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut current = 0usize;
        let mut steps = Vec::with_capacity(self.steps);
        for i in 0..self.steps {
            if i > 0
                && self.phases.len() > 1
                && rng.gen::<f64>() < 1.0 / self.phases[current].mean_length
            {
                let next = rng.gen_range(0..self.phases.len() - 1);
                current = if next >= current { next + 1 } else { next };
            }
            let spec = &self.phases[current];
            let values: Vec<(String, f64)> = spec
                .features
                .entries()
                .iter()
                .map(|(k, v)| {
                    let jitter = if spec.spread > 0.0 {
                        rng.gen_range(-spec.spread..spec.spread)
                    } else {
                        0.0
                    };
                    (k.clone(), v * (1.0 + jitter))
                })
                .collect();
            let fv = FeatureVector::new(FeatureKind::Dynamic, values)
                .expect("jittered copy of a valid vector");
            steps.push((spec.phase_id, fv));
        }
        Ok(PhaseTrace { steps })
    }

    pub fn to_text(&self) -> String {
        let mut packets = vec![Packet::new()
            .with("STEPS", self.steps.to_string())
            .with("SEED", self.seed.to_string())];
        for p in &self.phases {
            packets.push(
                Packet::new()
                    .with("PHASE", p.phase_id.to_string())
                    .with("DYNAMIC_FEATURE_VECTOR", p.features.to_list())
                    .with("SPREAD", fmt_f64(p.spread))
                    .with("MEAN_LENGTH", fmt_f64(p.mean_length)),
            );
        }
        write_stream(&packets)
    }

    pub fn from_text(text: &str) -> Result<Self, AdaptError> {
        let packets = parse_stream(text)?;
        let mut model = PhaseModel {
            phases: Vec::new(),
            steps: 10_000,
            seed: 0,
        };
        for p in &packets {
            if p.contains("PHASE") {
                let raw = p.require("DYNAMIC_FEATURE_VECTOR")?;
                model.phases.push(PhaseSpec {
                    phase_id: p.parse_required("PHASE")?,
                    features: FeatureVector::parse(FeatureKind::Dynamic, raw)
                        .map_err(|e| PacketError::invalid("DYNAMIC_FEATURE_VECTOR", raw, e))?,
                    spread: p.parse_optional("SPREAD")?.unwrap_or(0.0),
                    mean_length: p.parse_optional("MEAN_LENGTH")?.unwrap_or(1000.0),
                });
            } else {
                model.steps = p.parse_optional("STEPS")?.unwrap_or(model.steps);
                model.seed = p.parse_optional("SEED")?.unwrap_or(model.seed);
            }
        }
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseTrace {
    pub steps: Vec<(u32, FeatureVector)>,
}

impl PhaseTrace {
    /// Cycles through `(phase, features, length)` segments until `total`
    /// steps are produced.
    pub fn from_schedule(schedule: &[(u32, FeatureVector, usize)], total: usize) -> Self {
        let mut steps = Vec::with_capacity(total);
        if schedule.iter().all(|s| s.2 == 0) {
            return Self { steps };
        }
        'outer: loop {
            for (phase, features, len) in schedule {
                for _ in 0..*len {
                    if steps.len() == total {
                        break 'outer;
                    }
                    steps.push((*phase, features.clone()));
                }
            }
        }
        Self { steps }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationPolicy {
    /// Equal-width bins per feature index.
    pub bins: usize,
    /// Steps of a signature after which its row is calibrated again.
    pub recalibration_interval: u64,
}

impl Default for AdaptationPolicy {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            recalibration_interval: DEFAULT_RECALIBRATION,
        }
    }
}

impl AdaptationPolicy {
    pub fn validate(&self) -> Result<(), AdaptError> {
        if self.bins == 0 {
            return Err(AdaptError::InvalidPolicy("bins must be >= 1".into()));
        }
        if self.recalibration_interval == 0 {
            return Err(AdaptError::InvalidPolicy(
                "recalibration interval must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-index equal-width binning over an observed range.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    ranges: BTreeMap<String, (f64, f64)>,
    bins: usize,
}

impl Quantizer {
    pub fn fit(trace: &PhaseTrace, bins: usize) -> Self {
        let mut ranges: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        for (_, fv) in &trace.steps {
            for (k, v) in fv.entries() {
                let r = ranges.entry(k.clone()).or_insert((*v, *v));
                r.0 = r.0.min(*v);
                r.1 = r.1.max(*v);
            }
        }
        Self { ranges, bins }
    }

    pub fn signature(&self, fv: &FeatureVector) -> String {
        self.ranges
            .iter()
            .map(|(k, &(lo, hi))| match fv.get(k) {
                None => format!("{k}:-"),
                Some(v) => {
                    let bin = if hi > lo {
                        (((v - lo) / (hi - lo)) * self.bins as f64).floor() as i64
                    } else {
                        0
                    };
                    format!("{k}:{}", bin.clamp(0, self.bins as i64 - 1))
                }
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub best_clone: u32,
    pub evidence: u64,
    /// Clones measured in the current calibration round.
    tried: BTreeMap<u32, f64>,
    /// Steps of this signature since the round started.
    since_calibration: u64,
}

/// Learned mapping from feature signature to best clone.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssociationTable {
    pub rows: BTreeMap<String, TableRow>,
}

impl AssociationTable {
    pub fn best(&self, signature: &str) -> Option<u32> {
        self.rows.get(signature).map(|r| r.best_clone)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepChoice {
    pub phase_id: u32,
    pub signature: String,
    pub clone_id: u32,
    pub calibrating: bool,
    /// Time charged for the step, overhead included.
    pub time: f64,
    pub oracle_clone: u32,
    pub oracle_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub total_time: f64,
    pub oracle_time: f64,
    pub regret: f64,
    pub choices: Vec<StepChoice>,
    pub table: AssociationTable,
}

impl SimReport {
    pub fn calibration_steps(&self) -> usize {
        self.choices.iter().filter(|c| c.calibrating).count()
    }

    /// Exploiting steps whose clone differs from the oracle's.
    pub fn steady_state_mismatches(&self) -> usize {
        self.choices
            .iter()
            .filter(|c| !c.calibrating && c.clone_id != c.oracle_clone)
            .count()
    }

    /// Mean time per invocation of each clone that ran, overhead excluded.
    pub fn clone_mean_times(&self, program: &AdaptiveProgram) -> BTreeMap<u32, f64> {
        let mut acc: BTreeMap<u32, (f64, u64)> = BTreeMap::new();
        for c in &self.choices {
            let e = acc.entry(c.clone_id).or_default();
            e.0 += c.time / (1.0 + program.monitor_overhead);
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut packets = vec![Packet::new()
            .with("STEPS", self.choices.len().to_string())
            .with("CALIBRATION_STEPS", self.calibration_steps().to_string())
            .with("TOTAL_TIME", fmt_f64(self.total_time))
            .with("ORACLE_TIME", fmt_f64(self.oracle_time))
            .with("REGRET", fmt_f64(self.regret))];
        for (sig, row) in &self.table.rows {
            packets.push(
                Packet::new()
                    .with("SIGNATURE", sig.clone())
                    .with("BEST_CLONE", row.best_clone.to_string())
                    .with("EVIDENCE", row.evidence.to_string()),
            );
        }
        write_stream(&packets)
    }

    /// One row per step.
    pub fn write_csv(&self, w: impl Write) -> Result<(), AdaptError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "step",
            "phase",
            "signature",
            "clone",
            "calibrating",
            "time",
            "oracle_clone",
            "oracle_time",
        ])?;
        for (i, c) in self.choices.iter().enumerate() {
            out.write_record([
                i.to_string(),
                c.phase_id.to_string(),
                c.signature.clone(),
                c.clone_id.to_string(),
                u8::from(c.calibrating).to_string(),
                fmt_f64(c.time),
                c.oracle_clone.to_string(),
                fmt_f64(c.oracle_time),
            ])?;
        }
        out.flush().map_err(|source| AdaptError::Io {
            path: "csv output".into(),
            source,
        })?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), AdaptError> {
        let file = std::fs::File::create(path).map_err(|source| AdaptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.write_csv(file)
    }
}

/// Runs `trace` against `program`, learning the association table online.
pub fn simulate(
    program: &AdaptiveProgram,
    trace: &PhaseTrace,
    policy: &AdaptationPolicy,
) -> Result<SimReport, AdaptError> {
    if trace.steps.is_empty() {
        return Err(AdaptError::EmptyTrace);
    }
    program.validate()?;
    policy.validate()?;
    let quantizer = Quantizer::fit(trace, policy.bins);
    let mut clones: Vec<&FunctionClone> = program.clones.iter().collect();
    clones.sort_by_key(|c| c.clone_id);

    let mut table = AssociationTable::default();
    let mut choices = Vec::with_capacity(trace.steps.len());
    let (mut total, mut oracle) = (0.0, 0.0);
    for (phase, fv) in &trace.steps {
        let signature = quantizer.signature(fv);
        let mut oracle_pick = (clones[0].clone_id, program.time(clones[0], *phase)?);
        for c in &clones[1..] {
            let t = program.time(c, *phase)?;
            if t < oracle_pick.1 {
                oracle_pick = (c.clone_id, t);
            }
        }

        let row = table.rows.get_mut(&signature);
        let calibrated = row.as_ref().is_some_and(|r| {
            r.tried.len() == clones.len() && r.since_calibration < policy.recalibration_interval
        });
        let (clone, calibrating) = if calibrated {
            let id = row.as_ref().map(|r| r.best_clone).expect("calibrated row");
            (
                *clones
                    .iter()
                    .find(|c| c.clone_id == id)
                    .expect("known clone"),
                false,
            )
        } else {
            let row = table
                .rows
                .entry(signature.clone())
                .or_insert_with(|| TableRow {
                    best_clone: clones[0].clone_id,
                    evidence: 0,
                    tried: BTreeMap::new(),
                    since_calibration: 0,
                });
            if row.tried.len() == clones.len() {
                row.tried.clear();
                row.since_calibration = 0;
            }
            let next = *clones
                .iter()
                .find(|c| !row.tried.contains_key(&c.clone_id))
                .expect("an untried clone remains");
            (next, true)
        };

        let observed = program.time(clone, *phase)?;
        let row = table.rows.get_mut(&signature).expect("row exists");
        row.since_calibration += 1;
        if calibrating {
            row.tried.insert(clone.clone_id, observed);
            row.evidence += 1;
            row.best_clone = row
                .tried
                .iter()
                .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(b.0)))
                .map(|(id, _)| *id)
                .expect("at least one measurement");
        }

        let charged = observed * (1.0 + program.monitor_overhead);
        total += charged;
        oracle += oracle_pick.1;
        choices.push(StepChoice {
            phase_id: *phase,
            signature,
            clone_id: clone.clone_id,
            calibrating,
            time: charged,
            oracle_clone: oracle_pick.0,
            oracle_time: oracle_pick.1,
        });
    }
    Ok(SimReport {
        total_time: total,
        oracle_time: oracle,
        regret: total / oracle - 1.0,
        choices,
        table,
    })
}

/// Replaces up to `k` of the slowest clones (by `mean_times`) with the best
/// frontier combinations from the repository that no clone uses yet.
///
/// A new clone's phase times are the original's divided by the case speedup.
pub fn evolve_clones(
    program: &AdaptiveProgram,
    repo: &Repository,
    k: usize,
    mean_times: &BTreeMap<u32, f64>,
) -> Result<AdaptiveProgram, AdaptError> {
    program.validate()?;
    if k == 0 {
        return Ok(program.clone());
    }
    let cases: Vec<_> = repo
        .query(&QueryCriteria {
            program_id: Some(program.program_id),
            output_correct: Some(true),
            ..QueryCriteria::select_all()
        })
        .into_iter()
        .filter(|c| c.speedup > 0.0)
        .collect();
    let mut frontier = pareto_filter(&cases);
    frontier.sort_by(|a, b| b.speedup.total_cmp(&a.speedup));
    let mut used: BTreeSet<String> = program.clones.iter().map(|c| c.flags.canonical()).collect();
    let candidates: Vec<_> = frontier
        .into_iter()
        .filter(|c| used.insert(c.compilation.opt.canonical()))
        .collect();
    if candidates.is_empty() {
        return Err(AdaptError::NoCandidates(program.program_id));
    }

    let original = program
        .clones
        .iter()
        .find(|c| c.clone_id == 0)
        .expect("validated");
    let fallback = program.static_mean_times();
    let mut victims: Vec<(u32, f64)> = program
        .clones
        .iter()
        .filter(|c| c.clone_id != 0)
        .map(|c| {
            let t = mean_times
                .get(&c.clone_id)
                .or(fallback.get(&c.clone_id))
                .copied()
                .unwrap_or(0.0);
            (c.clone_id, t)
        })
        .collect();
    victims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut next_id = program.clones.iter().map(|c| c.clone_id).max().unwrap_or(0) + 1;
    let mut out = program.clone();
    for ((victim, _), case) in victims.iter().zip(&candidates).take(k) {
        let pos = out
            .clones
            .iter()
            .position(|c| c.clone_id == *victim)
            .expect("victim is a clone");
        out.clones[pos] = FunctionClone {
            clone_id: next_id,
            flags: FlagCombination::parse(&case.compilation.opt.canonical(), "")
                .expect("canonical form re-parses"),
            phase_times: original
                .phase_times
                .iter()
                .map(|(p, t)| (*p, t / case.speedup))
                .collect(),
        };
        next_id += 1;
    }
    Ok(out)
}
