//! Optimization prediction from program features.
//!
//! Training collects, per program, a feature vector and the best recorded
//! flag combination for an objective. Two models are offered: nearest
//! neighbour on z-normalized features, and a per-flag vote of the nearest
//! programs weighted by inverse distance.

mod evaluate;
mod service;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::driver::DriverError;
use crate::filters::{pareto_filter, NOISE_GATE};
use crate::model::{
    EntityId, EntityKind, FeatureError, FeatureKind, FeatureVector, FlagCombination,
    OptimizationCase,
};
use crate::packet::{fmt_f64, parse_stream, quantize, write_stream, Packet, PacketError};
use crate::repository::{QueryCriteria, Repository};

pub use evaluate::{leave_one_out_evaluate, LooEntry, LooReport};
pub use service::{
    handle_query, ModelSource, PredictionService, ServiceConfig, ServiceState, RETRAIN_INTERVAL,
};

/// Neighbours consulted by the per-flag model.
pub const NEIGHBORS: usize = 3;
/// Flags at or above this weighted probability are predicted.
pub const FLAG_THRESHOLD: f64 = 0.5;
const DISTANCE_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("query feature vector is empty")]
    EmptyFeatureVector,
    #[error("malformed query: {0}")]
    MalformedQuery(String),
    #[error("malformed model: {0}")]
    MalformedModel(String),
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error("service: {0}")]
    Service(String),
}

impl PredictError {
    /// Wire status code.
    pub fn status(&self) -> &'static str {
        match self {
            PredictError::InsufficientData(_) => "INSUFFICIENT_DATA",
            PredictError::ModelMismatch(_) => "MODEL_MISMATCH",
            PredictError::EmptyFeatureVector | PredictError::MalformedQuery(_) => "MALFORMED_QUERY",
            _ => "INTERNAL_ERROR",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    NearestNeighbor,
    PerFlagProbability,
}

impl ModelKind {
    pub const ALL: [ModelKind; 2] = [ModelKind::NearestNeighbor, ModelKind::PerFlagProbability];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::NearestNeighbor => "nearest_neighbor",
            ModelKind::PerFlagProbability => "per_flag_probability",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Objective {
    Time,
    Size,
    TimeAndSize,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Time, Objective::Size, Objective::TimeAndSize];

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Time => "time",
            Objective::Size => "size",
            Objective::TimeAndSize => "time_and_size",
        }
    }

    fn metric(self, case: &OptimizationCase) -> f64 {
        match self {
            Objective::Size => case.size_ratio,
            Objective::Time | Objective::TimeAndSize => case.speedup,
        }
    }

    /// Cases the objective may pick from, in query order.
    fn eligible(self, cases: &[OptimizationCase]) -> Vec<OptimizationCase> {
        let correct = cases.iter().filter(|c| c.output_correct);
        match self {
            Objective::Size => correct.cloned().collect(),
            Objective::Time => correct
                .filter(|c| c.dispersion <= NOISE_GATE)
                .cloned()
                .collect(),
            Objective::TimeAndSize => {
                let stable: Vec<_> = correct
                    .filter(|c| c.dispersion <= NOISE_GATE)
                    .cloned()
                    .collect();
                pareto_filter(&stable)
            }
        }
    }
}

macro_rules! str_enum {
    ($t:ty, $what:literal) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $t {
            type Err = PredictError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::ALL
                    .into_iter()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| PredictError::MalformedQuery(format!("unknown {} {s:?}", $what)))
            }
        }
    };
}

str_enum!(ModelKind, "model");
str_enum!(Objective, "objective");

fn feature_kind_str(kind: FeatureKind) -> &'static str {
    match kind {
        FeatureKind::Static => "static",
        FeatureKind::Dynamic => "dynamic",
    }
}

fn parse_feature_kind(s: &str) -> Option<FeatureKind> {
    match s {
        "static" => Some(FeatureKind::Static),
        "dynamic" => Some(FeatureKind::Dynamic),
        _ => None,
    }
}

/// What to train: the experiment context and the model flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub compiler_id: EntityId,
    pub platform_id: EntityId,
    pub objective: Objective,
    pub kind: ModelKind,
    pub feature_kind: FeatureKind,
}

impl ModelSpec {
    pub fn new(
        compiler_id: EntityId,
        platform_id: EntityId,
        objective: Objective,
        kind: ModelKind,
    ) -> Self {
        Self {
            compiler_id,
            platform_id,
            objective,
            kind,
            feature_kind: FeatureKind::Static,
        }
    }
}

/// One training program.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingEntry {
    pub program_id: EntityId,
    pub environment_id: EntityId,
    pub features: FeatureVector,
    pub best: FlagCombination,
    pub best_metric: f64,
    pub dataset_number: u32,
    /// Flags of the baseline the best case was measured against.
    pub baseline: FlagCombination,
    /// Share of top-decile cases containing each flag.
    pub flag_frequency: BTreeMap<String, f64>,
    /// Share of top-decile cases using each base level.
    pub level_frequency: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexStats {
    pub mean: f64,
    pub std_dev: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub entries: Vec<TrainingEntry>,
    pub normalization: BTreeMap<String, IndexStats>,
}

fn top_decile_frequencies(
    ranked: &[&OptimizationCase],
) -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
    let n = ranked.len().div_ceil(10).max(1).min(ranked.len());
    let mut flags = BTreeMap::new();
    let mut levels = BTreeMap::new();
    for c in &ranked[..n] {
        for f in c.compilation.opt.flags() {
            *flags.entry(f.clone()).or_insert(0.0) += 1.0;
        }
        *levels
            .entry(c.compilation.opt.base_level().to_string())
            .or_insert(0.0) += 1.0;
    }
    let share = |m: BTreeMap<String, f64>| {
        m.into_iter()
            .map(|(k, v)| (k, quantize(v / n as f64)))
            .collect()
    };
    (share(flags), share(levels))
}

impl TrainingSet {
    /// Programs with features of `spec.feature_kind` and at least one
    /// eligible case for the objective on this compiler and platform.
    pub fn collect(repo: &Repository, spec: &ModelSpec) -> Result<Self, PredictError> {
        let mut entries = Vec::new();
        for entity in repo.entities_of(EntityKind::Program) {
            let Some(features) = entity
                .descriptor
                .as_program()
                .and_then(|p| p.features.as_ref())
                .filter(|f| f.kind() == spec.feature_kind)
            else {
                continue;
            };
            let cases = repo.query(&QueryCriteria {
                program_id: Some(entity.id),
                compiler_id: Some(spec.compiler_id),
                platform_id: Some(spec.platform_id),
                ..QueryCriteria::select_all()
            });
            let eligible = spec.objective.eligible(&cases);
            let mut ranked: Vec<&OptimizationCase> = eligible.iter().collect();
            // stable: equal metrics keep the earlier case first
            ranked.sort_by(|a, b| {
                spec.objective
                    .metric(b)
                    .total_cmp(&spec.objective.metric(a))
            });
            let Some(best) = ranked.first() else { continue };
            let baseline = best
                .executions
                .first()
                .and_then(|e| repo.execution(e.run_id_associate))
                .and_then(|r| repo.compilation(r.compile_id))
                .map(|c| c.opt.clone())
                .unwrap_or_default();
            let (flag_frequency, level_frequency) = top_decile_frequencies(&ranked);
            entries.push(TrainingEntry {
                program_id: entity.id,
                environment_id: best.compilation.environment_id,
                features: features.clone(),
                best: FlagCombination::parse(&best.compilation.opt.canonical(), "")
                    .expect("canonical form re-parses"),
                best_metric: quantize(spec.objective.metric(best)),
                dataset_number: best.dataset_number,
                baseline: FlagCombination::parse(&baseline.canonical(), "")
                    .expect("canonical form re-parses"),
                flag_frequency,
                level_frequency,
            });
        }
        Self::from_entries(entries)
    }

    pub fn from_entries(mut entries: Vec<TrainingEntry>) -> Result<Self, PredictError> {
        if entries.is_empty() {
            return Err(PredictError::InsufficientData(
                "no program has both features and a usable case".into(),
            ));
        }
        entries.sort_by_key(|e| e.program_id);
        let mut values: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for e in &entries {
            for (k, v) in e.features.entries() {
                values.entry(k).or_default().push(*v);
            }
        }
        let normalization = values
            .into_iter()
            .map(|(k, vs)| {
                let n = vs.len() as f64;
                let mean = vs.iter().sum::<f64>() / n;
                let var = vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                (
                    k.to_string(),
                    IndexStats {
                        mean,
                        std_dev: var.sqrt(),
                    },
                )
            })
            .collect();
        Ok(Self {
            entries,
            normalization,
        })
    }

    /// The same data minus one program.
    pub fn without(&self, program_id: EntityId) -> Result<Self, PredictError> {
        Self::from_entries(
            self.entries
                .iter()
                .filter(|e| e.program_id != program_id)
                .cloned()
                .collect(),
        )
    }

    /// Euclidean distance over z-normalized indices with non-zero spread.
    pub fn distance(&self, a: &FeatureVector, b: &FeatureVector) -> f64 {
        self.normalization
            .iter()
            .filter(|(_, s)| s.std_dev > 0.0)
            .map(|(k, s)| {
                let z = |v: &FeatureVector| v.get(k).map_or(0.0, |x| (x - s.mean) / s.std_dev);
                (z(a) - z(b)).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Entries by ascending distance to `features`, ties by program id.
    pub fn neighbors(&self, features: &FeatureVector) -> Vec<(&TrainingEntry, f64)> {
        let mut out: Vec<_> = self
            .entries
            .iter()
            .map(|e| (e, self.distance(&e.features, features)))
            .collect();
        out.sort_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then(a.0.program_id.cmp(&b.0.program_id))
        });
        out
    }

    fn entry_packets(&self) -> Vec<Packet> {
        let pairs = |m: &BTreeMap<String, f64>| {
            m.iter()
                .map(|(k, v)| format!("{k} {}", fmt_f64(*v)))
                .collect::<Vec<_>>()
                .join("; ")
        };
        self.entries
            .iter()
            .map(|e| {
                Packet::new()
                    .with("PROGRAM_ID", e.program_id.to_string())
                    .with("ENVIRONMENT_ID", e.environment_id.to_string())
                    .with(e.features.kind().packet_key(), e.features.to_list())
                    .with("BEST_FLAGS", e.best.canonical())
                    .with("BEST_METRIC", fmt_f64(e.best_metric))
                    .with("DATASET_NUMBER", e.dataset_number.to_string())
                    .with("BASELINE_FLAGS", e.baseline.canonical())
                    .with("TOP_FLAGS", pairs(&e.flag_frequency))
                    .with("TOP_LEVELS", pairs(&e.level_frequency))
            })
            .collect()
    }

    fn entry_from_packet(p: &Packet, kind: FeatureKind) -> Result<TrainingEntry, PacketError> {
        let flags = |key: &str| {
            let v = p.require(key)?;
            FlagCombination::parse(v, "").map_err(|e| PacketError::invalid(key, v, e))
        };
        let pairs = |key: &str| -> Result<BTreeMap<String, f64>, PacketError> {
            let raw = p.require(key)?;
            raw.split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|item| {
                    let (k, v) = item
                        .rsplit_once(' ')
                        .ok_or_else(|| PacketError::invalid(key, raw, "expected `name share`"))?;
                    let v: f64 = v.parse().map_err(|e| PacketError::invalid(key, raw, e))?;
                    Ok((k.trim().to_string(), v))
                })
                .collect()
        };
        let fkey = kind.packet_key();
        let raw = p.require(fkey)?;
        Ok(TrainingEntry {
            program_id: p.parse_required("PROGRAM_ID")?,
            environment_id: p.parse_required("ENVIRONMENT_ID")?,
            features: FeatureVector::parse(kind, raw)
                .map_err(|e| PacketError::invalid(fkey, raw, e))?,
            best: flags("BEST_FLAGS")?,
            best_metric: p.parse_required("BEST_METRIC")?,
            dataset_number: p.parse_required("DATASET_NUMBER")?,
            baseline: flags("BASELINE_FLAGS")?,
            flag_frequency: pairs("TOP_FLAGS")?,
            level_frequency: pairs("TOP_LEVELS")?,
        })
    }

    /// Hash of the serialized entries.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(write_stream(&self.entry_packets()).as_bytes());
        format!("{:x}", h.finalize())
    }
}

/// A trained, immutable model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub training: TrainingSet,
    pub training_digest: String,
}

/// Predicted combination and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub combination: FlagCombination,
    /// Consulted programs, nearest first.
    pub matched_program_ids: Vec<EntityId>,
    pub distances: Vec<f64>,
}

impl Prediction {
    pub fn to_response(&self) -> Packet {
        Packet::new()
            .with("STATUS", "OK")
            .with("OPT_FLAGS", self.combination.canonical())
            .with(
                "MATCHED_PROGRAM_ID",
                self.matched_program_ids[0].to_string(),
            )
            .with("DISTANCE", fmt_f64(self.distances[0]))
    }
}

/// A prediction request.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionQuery {
    pub platform_id: EntityId,
    pub environment_id: Option<EntityId>,
    pub compiler_id: EntityId,
    pub features: FeatureVector,
    pub model: ModelKind,
    pub objective: Objective,
}

impl PredictionQuery {
    pub fn to_packet(&self) -> Packet {
        let mut p = Packet::new().with("PLATFORM_ID", self.platform_id.to_string());
        if let Some(env) = self.environment_id {
            p.put("ENVIRONMENT_ID", env.to_string());
        }
        p.with("COMPILER_ID", self.compiler_id.to_string())
            .with("MODEL", self.model.as_str())
            .with("OBJECTIVE", self.objective.as_str())
            .with(self.features.kind().packet_key(), self.features.to_list())
    }

    pub fn from_packet(p: &Packet) -> Result<Self, PredictError> {
        let bad = |e: PacketError| PredictError::MalformedQuery(e.to_string());
        let (kind, raw) = [FeatureKind::Static, FeatureKind::Dynamic]
            .into_iter()
            .find_map(|k| p.get(k.packet_key()).map(|v| (k, v)))
            .ok_or_else(|| PredictError::MalformedQuery("no feature vector".into()))?;
        let features = FeatureVector::parse(kind, raw).map_err(|e| match e {
            FeatureError::Empty => PredictError::EmptyFeatureVector,
            other => PredictError::MalformedQuery(other.to_string()),
        })?;
        Ok(Self {
            platform_id: p.parse_required("PLATFORM_ID").map_err(bad)?,
            environment_id: p.parse_optional("ENVIRONMENT_ID").map_err(bad)?,
            compiler_id: p.parse_required("COMPILER_ID").map_err(bad)?,
            features,
            model: p.require("MODEL").map_err(bad)?.parse()?,
            objective: p.require("OBJECTIVE").map_err(bad)?.parse()?,
        })
    }
}

/// Trains a model on the repository's cases.
pub fn train(repo: &Repository, spec: &ModelSpec) -> Result<Model, PredictError> {
    Ok(Model::from_training(
        *spec,
        TrainingSet::collect(repo, spec)?,
    ))
}

impl Model {
    pub fn from_training(spec: ModelSpec, training: TrainingSet) -> Self {
        let training_digest = training.digest();
        Self {
            spec,
            training,
            training_digest,
        }
    }

    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let header = Packet::new()
            .with("MODEL", s.kind.as_str())
            .with("OBJECTIVE", s.objective.as_str())
            .with("COMPILER_ID", s.compiler_id.to_string())
            .with("PLATFORM_ID", s.platform_id.to_string())
            .with("FEATURE_KIND", feature_kind_str(s.feature_kind))
            .with("TRAINING_DIGEST", self.training_digest.clone());
        let mut packets = vec![header];
        packets.extend(self.training.entry_packets());
        write_stream(&packets)
    }

    pub fn from_text(text: &str) -> Result<Self, PredictError> {
        let bad = |e: PacketError| PredictError::MalformedModel(e.to_string());
        let packets = parse_stream(text).map_err(bad)?;
        let (header, rest) = packets
            .split_first()
            .ok_or_else(|| PredictError::MalformedModel("empty model file".into()))?;
        let text_of = |k: &str| header.require(k).map_err(bad);
        let feature_kind = parse_feature_kind(text_of("FEATURE_KIND")?)
            .ok_or_else(|| PredictError::MalformedModel("bad FEATURE_KIND".into()))?;
        let spec = ModelSpec {
            compiler_id: header.parse_required("COMPILER_ID").map_err(bad)?,
            platform_id: header.parse_required("PLATFORM_ID").map_err(bad)?,
            objective: text_of("OBJECTIVE")?
                .parse()
                .map_err(|e: PredictError| PredictError::MalformedModel(e.to_string()))?,
            kind: text_of("MODEL")?
                .parse()
                .map_err(|e: PredictError| PredictError::MalformedModel(e.to_string()))?,
            feature_kind,
        };
        let entries = rest
            .iter()
            .map(|p| TrainingSet::entry_from_packet(p, feature_kind))
            .collect::<Result<Vec<_>, _>>()
            .map_err(bad)?;
        let training = TrainingSet::from_entries(entries)
            .map_err(|e| PredictError::MalformedModel(e.to_string()))?;
        let model = Self::from_training(spec, training);
        if model.training_digest != text_of("TRAINING_DIGEST")? {
            return Err(PredictError::MalformedModel(
                "training digest does not match entries".into(),
            ));
        }
        Ok(model)
    }

    fn check(&self, query: &PredictionQuery) -> Result<(), PredictError> {
        let s = &self.spec;
        let mismatch = |what: &str, want: &dyn fmt::Display, got: &dyn fmt::Display| {
            Err(PredictError::ModelMismatch(format!(
                "model {what} is {want}, query has {got}"
            )))
        };
        if query.compiler_id != s.compiler_id {
            return mismatch("compiler", &s.compiler_id, &query.compiler_id);
        }
        if query.platform_id != s.platform_id {
            return mismatch("platform", &s.platform_id, &query.platform_id);
        }
        if query.features.kind() != s.feature_kind {
            return mismatch(
                "feature kind",
                &feature_kind_str(s.feature_kind),
                &feature_kind_str(query.features.kind()),
            );
        }
        if query.model != s.kind {
            return mismatch("kind", &s.kind, &query.model);
        }
        if query.objective != s.objective {
            return mismatch("objective", &s.objective, &query.objective);
        }
        Ok(())
    }

    /// Prediction for `features` without context checks.
    pub fn predict_features(&self, features: &FeatureVector) -> Prediction {
        let neighbors = self.training.neighbors(features);
        match self.spec.kind {
            ModelKind::NearestNeighbor => {
                let (e, d) = neighbors[0];
                Prediction {
                    combination: e.best.clone(),
                    matched_program_ids: vec![e.program_id],
                    distances: vec![d],
                }
            }
            ModelKind::PerFlagProbability => {
                let near = &neighbors[..NEIGHBORS.min(neighbors.len())];
                let total: f64 = near.iter().map(|(_, d)| 1.0 / (d + DISTANCE_EPS)).sum();
                let vote = |pick: &dyn Fn(&TrainingEntry) -> &BTreeMap<String, f64>| {
                    let mut p: BTreeMap<&str, f64> = BTreeMap::new();
                    for (e, d) in near {
                        let w = 1.0 / (d + DISTANCE_EPS) / total;
                        for (k, v) in pick(e) {
                            *p.entry(k.as_str()).or_insert(0.0) += w * v;
                        }
                    }
                    p
                };
                let flags = vote(&|e| &e.flag_frequency)
                    .into_iter()
                    .filter(|(_, p)| *p >= FLAG_THRESHOLD - 1e-12)
                    .map(|(k, _)| k.to_string())
                    .collect();
                let level = vote(&|e| &e.level_frequency)
                    .into_iter()
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(a.0)))
                    .map(|(k, _)| k.to_string())
                    .unwrap_or_default();
                Prediction {
                    combination: FlagCombination::new(level, flags, Vec::new())
                        .expect("flags come from valid combinations"),
                    matched_program_ids: near.iter().map(|(e, _)| e.program_id).collect(),
                    distances: near.iter().map(|(_, d)| *d).collect(),
                }
            }
        }
    }
}

pub fn predict(model: &Model, query: &PredictionQuery) -> Result<Prediction, PredictError> {
    if query.features.is_empty() {
        return Err(PredictError::EmptyFeatureVector);
    }
    model.check(query)?;
    Ok(model.predict_features(&query.features))
}
