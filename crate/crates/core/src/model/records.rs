use std::collections::BTreeMap;

use thiserror::Error;

use super::flags::FlagCombination;
use super::ids::EntityId;
use crate::packet::{fmt_f64, Packet, PacketError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("{0} must be non-negative and finite")]
    NegativeTime(&'static str),
    #[error("OBJ_MD5CRC must be 32 lowercase hex characters or empty, got {0:?}")]
    BadMd5(String),
    #[error("successful compilation must report a binary size")]
    ZeroSize,
    #[error("dataset numbers are 1-based")]
    ZeroDataset,
    #[error("field {0} must be a single line")]
    MultiLine(String),
    #[error("extension key {0:?} is not a valid packet key or shadows a typed field")]
    BadExtension(String),
}

impl From<RecordError> for PacketError {
    fn from(e: RecordError) -> Self {
        PacketError::InvalidValue {
            key: "record".into(),
            value: String::new(),
            reason: e.to_string(),
        }
    }
}

const COMPILATION_KEYS: &[&str] = &[
    "COMPILE_ID",
    "PLATFORM_ID",
    "ENVIRONMENT_ID",
    "COMPILER_ID",
    "PROGRAM_ID",
    "DATE",
    "TIME",
    "OPT_FLAGS",
    "OPT_FLAGS_PLATFORM",
    "COMPILE_TIME",
    "BIN_SIZE",
    "OBJ_MD5CRC",
    "NOTES",
];

const EXECUTION_KEYS: &[&str] = &[
    "RUN_ID",
    "RUN_ID_ASSOCIATE",
    "COMPILE_ID",
    "COMPILER_ID",
    "PLATFORM_ID",
    "ENVIRONMENT_ID",
    "PROGRAM_ID",
    "DATASET_NUMBER",
    "DATE",
    "TIME",
    "BIN_SIZE",
    "RUN_COMMAND_LINE",
    "OUTPUT_CORRECT",
    "RUN_TIME",
    "RUN_TIME_USER",
    "RUN_TIME_SYS",
    "RUN_PG",
    "RUN_HC",
    "PROCESSOR_NUM",
    "RANK",
    "NOTES",
];

fn is_md5(s: &str) -> bool {
    s.len() == 32 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn check_time(name: &'static str, t: f64) -> Result<(), RecordError> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(RecordError::NegativeTime(name))
    }
}

fn check_line(name: &str, s: &str) -> Result<(), RecordError> {
    if s.contains(['\n', '\r']) {
        Err(RecordError::MultiLine(name.to_string()))
    } else {
        Ok(())
    }
}

fn check_extensions(
    extensions: &BTreeMap<String, String>,
    typed: &[&str],
) -> Result<(), RecordError> {
    for (k, v) in extensions {
        if !crate::packet::is_valid_key(k) || typed.contains(&k.as_str()) {
            return Err(RecordError::BadExtension(k.clone()));
        }
        check_line(k, v)?;
    }
    Ok(())
}

fn collect_extensions(p: &Packet, typed: &[&str]) -> BTreeMap<String, String> {
    p.iter()
        .filter(|(k, _)| !typed.contains(k))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// One compilation of a program with a flag combination.
#[derive(Debug, Clone, PartialEq)]
pub struct CompilationRecord {
    pub compile_id: EntityId,
    pub platform_id: EntityId,
    pub environment_id: EntityId,
    pub compiler_id: EntityId,
    pub program_id: EntityId,
    pub opt: FlagCombination,
    pub compile_time: f64,
    pub bin_size: u64,
    pub obj_md5: String,
    pub date: String,
    pub time: String,
    pub notes: String,
    /// Pass-through fields (`ICI_*`, `OPT_FINE`, `OPT_PAR_STATIC`, ...).
    pub extensions: BTreeMap<String, String>,
}

impl CompilationRecord {
    pub fn succeeded(&self) -> bool {
        !self.obj_md5.is_empty()
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        check_time("COMPILE_TIME", self.compile_time)?;
        if !self.obj_md5.is_empty() && !is_md5(&self.obj_md5) {
            return Err(RecordError::BadMd5(self.obj_md5.clone()));
        }
        if self.succeeded() && self.bin_size == 0 {
            return Err(RecordError::ZeroSize);
        }
        check_line("DATE", &self.date)?;
        check_line("TIME", &self.time)?;
        check_line("NOTES", &self.notes)?;
        check_extensions(&self.extensions, COMPILATION_KEYS)
    }

    pub fn to_packet(&self) -> Packet {
        let mut p = Packet::new()
            .with("COMPILE_ID", self.compile_id.to_string())
            .with("PLATFORM_ID", self.platform_id.to_string())
            .with("ENVIRONMENT_ID", self.environment_id.to_string())
            .with("COMPILER_ID", self.compiler_id.to_string())
            .with("PROGRAM_ID", self.program_id.to_string())
            .with("DATE", self.date.as_str())
            .with("TIME", self.time.as_str())
            .with("OPT_FLAGS", self.opt.canonical())
            .with("OPT_FLAGS_PLATFORM", self.opt.platform_string())
            .with("COMPILE_TIME", fmt_f64(self.compile_time))
            .with("BIN_SIZE", self.bin_size.to_string())
            .with("OBJ_MD5CRC", self.obj_md5.as_str())
            .with("NOTES", self.notes.as_str());
        for (k, v) in &self.extensions {
            p.put(k, v.as_str());
        }
        p
    }

    pub fn from_packet(p: &Packet) -> Result<Self, PacketError> {
        let opt_raw = p.get("OPT_FLAGS").unwrap_or_default();
        let plat_raw = p.get("OPT_FLAGS_PLATFORM").unwrap_or_default();
        let opt = FlagCombination::parse(opt_raw, plat_raw)
            .map_err(|e| PacketError::invalid("OPT_FLAGS", opt_raw, e))?;
        let rec = Self {
            compile_id: p.parse_required("COMPILE_ID")?,
            platform_id: p.parse_required("PLATFORM_ID")?,
            environment_id: p.parse_required("ENVIRONMENT_ID")?,
            compiler_id: p.parse_required("COMPILER_ID")?,
            program_id: p.parse_required("PROGRAM_ID")?,
            opt,
            compile_time: p.parse_required("COMPILE_TIME")?,
            bin_size: p.parse_required("BIN_SIZE")?,
            obj_md5: p.get("OBJ_MD5CRC").unwrap_or_default().to_string(),
            date: p.get("DATE").unwrap_or_default().to_string(),
            time: p.get("TIME").unwrap_or_default().to_string(),
            notes: p.get("NOTES").unwrap_or_default().to_string(),
            extensions: collect_extensions(p, COMPILATION_KEYS),
        };
        rec.validate()?;
        Ok(rec)
    }
}

/// Function-level profile entry: `name={seconds,calls,fraction}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileEntry {
    pub seconds: f64,
    pub calls: u64,
    pub fraction: f64,
}

fn format_profile(profile: &BTreeMap<String, ProfileEntry>) -> String {
    profile
        .iter()
        .map(|(name, e)| format!("{{{name}={},{},{}}}", e.seconds, e.calls, e.fraction))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_profile(raw: &str) -> Result<BTreeMap<String, ProfileEntry>, PacketError> {
    let bad = |why: &str| PacketError::invalid("RUN_PG", raw, why);
    let mut out = BTreeMap::new();
    let mut rest = raw.trim();
    while !rest.is_empty() {
        let body_start = rest.strip_prefix('{').ok_or_else(|| bad("expected '{'"))?;
        let end = body_start
            .find('}')
            .ok_or_else(|| bad("unterminated entry"))?;
        let body = &body_start[..end];
        rest = body_start[end + 1..].trim_start_matches(',').trim_start();
        let (name, nums) = body.split_once('=').ok_or_else(|| bad("expected name="))?;
        let parts: Vec<&str> = nums.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(bad("expected seconds,calls,fraction"));
        }
        let entry = ProfileEntry {
            seconds: parts[0].parse().map_err(|_| bad("bad seconds"))?,
            calls: parts[1].parse().map_err(|_| bad("bad call count"))?,
            fraction: parts[2].parse().map_err(|_| bad("bad fraction"))?,
        };
        out.insert(name.trim().to_string(), entry);
    }
    Ok(out)
}

fn format_counters(counters: &BTreeMap<String, i64>) -> String {
    counters
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn parse_counters(raw: &str) -> Result<BTreeMap<String, i64>, PacketError> {
    let mut out = BTreeMap::new();
    for item in crate::packet::split_assignments(raw) {
        let (k, v) = item.map_err(|e| PacketError::invalid("RUN_HC", raw, e))?;
        let v: i64 = v
            .parse()
            .map_err(|e| PacketError::invalid("RUN_HC", raw, e))?;
        out.insert(k.to_string(), v);
    }
    Ok(out)
}

/// One execution (one repeat) of a compiled binary on a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionRecord {
    pub run_id: EntityId,
    /// The baseline reference run this execution is compared against.
    pub run_id_associate: EntityId,
    pub compile_id: EntityId,
    pub compiler_id: EntityId,
    pub program_id: EntityId,
    pub platform_id: EntityId,
    pub environment_id: EntityId,
    pub dataset_number: u32,
    pub bin_size: u64,
    pub output_correct: bool,
    pub run_time: f64,
    pub run_time_user: f64,
    pub run_time_sys: f64,
    pub run_command_line: String,
    pub profile: BTreeMap<String, ProfileEntry>,
    pub hardware_counters: BTreeMap<String, i64>,
    pub processor_num: i64,
    pub rank: i64,
    pub date: String,
    pub time: String,
    pub notes: String,
    /// Pass-through fields (`RUN_POWER`, `RUN_ENERGY`, `PAR_DYNAMIC`, ...).
    pub extensions: BTreeMap<String, String>,
}

impl ExecutionRecord {
    pub fn is_reference(&self) -> bool {
        self.run_id == self.run_id_associate
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        check_time("RUN_TIME", self.run_time)?;
        check_time("RUN_TIME_USER", self.run_time_user)?;
        check_time("RUN_TIME_SYS", self.run_time_sys)?;
        if self.dataset_number == 0 {
            return Err(RecordError::ZeroDataset);
        }
        check_line("RUN_COMMAND_LINE", &self.run_command_line)?;
        check_line("DATE", &self.date)?;
        check_line("TIME", &self.time)?;
        check_line("NOTES", &self.notes)?;
        for name in self.profile.keys().chain(self.hardware_counters.keys()) {
            if name.is_empty() || name.contains(['{', '}', '=', ',', '\n']) {
                return Err(RecordError::BadExtension(name.clone()));
            }
        }
        check_extensions(&self.extensions, EXECUTION_KEYS)
    }

    pub fn to_packet(&self) -> Packet {
        let mut p = Packet::new()
            .with("RUN_ID", self.run_id.to_string())
            .with("RUN_ID_ASSOCIATE", self.run_id_associate.to_string())
            .with("COMPILE_ID", self.compile_id.to_string())
            .with("COMPILER_ID", self.compiler_id.to_string())
            .with("PLATFORM_ID", self.platform_id.to_string())
            .with("ENVIRONMENT_ID", self.environment_id.to_string())
            .with("PROGRAM_ID", self.program_id.to_string())
            .with("DATASET_NUMBER", self.dataset_number.to_string())
            .with("DATE", self.date.as_str())
            .with("TIME", self.time.as_str())
            .with("BIN_SIZE", self.bin_size.to_string())
            .with("RUN_COMMAND_LINE", self.run_command_line.as_str())
            .with(
                "OUTPUT_CORRECT",
                if self.output_correct { "1" } else { "0" },
            )
            .with("RUN_TIME", fmt_f64(self.run_time))
            .with("RUN_TIME_USER", fmt_f64(self.run_time_user))
            .with("RUN_TIME_SYS", fmt_f64(self.run_time_sys))
            .with("RUN_PG", format_profile(&self.profile))
            .with("RUN_HC", format_counters(&self.hardware_counters))
            .with("PROCESSOR_NUM", self.processor_num.to_string())
            .with("RANK", self.rank.to_string())
            .with("NOTES", self.notes.as_str());
        for (k, v) in &self.extensions {
            p.put(k, v.as_str());
        }
        p
    }

    pub fn from_packet(p: &Packet) -> Result<Self, PacketError> {
        let rec = Self {
            run_id: p.parse_required("RUN_ID")?,
            run_id_associate: p.parse_required("RUN_ID_ASSOCIATE")?,
            compile_id: p.parse_required("COMPILE_ID")?,
            compiler_id: p.parse_required("COMPILER_ID")?,
            platform_id: p.parse_required("PLATFORM_ID")?,
            environment_id: p.parse_required("ENVIRONMENT_ID")?,
            program_id: p.parse_required("PROGRAM_ID")?,
            dataset_number: p.parse_optional("DATASET_NUMBER")?.unwrap_or(1),
            bin_size: p.parse_optional("BIN_SIZE")?.unwrap_or(0),
            output_correct: p.parse_flag("OUTPUT_CORRECT")?,
            run_time: p.parse_required("RUN_TIME")?,
            run_time_user: p.parse_optional("RUN_TIME_USER")?.unwrap_or(0.0),
            run_time_sys: p.parse_optional("RUN_TIME_SYS")?.unwrap_or(0.0),
            run_command_line: p.get("RUN_COMMAND_LINE").unwrap_or_default().to_string(),
            profile: parse_profile(p.get("RUN_PG").unwrap_or_default())?,
            hardware_counters: parse_counters(p.get("RUN_HC").unwrap_or_default())?,
            processor_num: p.parse_optional("PROCESSOR_NUM")?.unwrap_or(0),
            rank: p.parse_optional("RANK")?.unwrap_or(0),
            date: p.get("DATE").unwrap_or_default().to_string(),
            time: p.get("TIME").unwrap_or_default().to_string(),
            notes: p.get("NOTES").unwrap_or_default().to_string(),
            extensions: collect_extensions(p, EXECUTION_KEYS),
        };
        rec.validate()?;
        Ok(rec)
    }
}

/// Either record class, as accepted by the repository.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Compilation(CompilationRecord),
    Execution(ExecutionRecord),
}

impl Record {
    pub fn id(&self) -> EntityId {
        match self {
            Record::Compilation(c) => c.compile_id,
            Record::Execution(e) => e.run_id,
        }
    }

    pub fn to_packet(&self) -> Packet {
        match self {
            Record::Compilation(c) => c.to_packet(),
            Record::Execution(e) => e.to_packet(),
        }
    }

    /// Parses a compilation or execution packet.
    pub fn from_packet(p: &Packet) -> Result<Self, PacketError> {
        use crate::packet::PacketKind;
        match p.kind()? {
            PacketKind::Compilation => CompilationRecord::from_packet(p).map(Record::Compilation),
            PacketKind::Execution => ExecutionRecord::from_packet(p).map(Record::Execution),
            other => Err(PacketError::invalid(
                "packet",
                other.local_filename(),
                "not a compilation or execution record",
            )),
        }
    }
}

/// `_comp_passes` packet: pass sequence applied to one function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassesRecord {
    pub compile_id: EntityId,
    pub compiler_id: EntityId,
    pub function_name: String,
    pub passes: Vec<String>,
}

impl PassesRecord {
    pub fn to_packet(&self) -> Packet {
        Packet::new()
            .with("COMPILE_ID", self.compile_id.to_string())
            .with("COMPILER_ID", self.compiler_id.to_string())
            .with("FUNCTION_NAME", self.function_name.as_str())
            .with("PASSES", self.passes.join(","))
    }

    pub fn from_packet(p: &Packet) -> Result<Self, PacketError> {
        Ok(Self {
            compile_id: p.parse_required("COMPILE_ID")?,
            compiler_id: p.parse_required("COMPILER_ID")?,
            function_name: p.get("FUNCTION_NAME").unwrap_or_default().to_string(),
            passes: p
                .require("PASSES")?
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect(),
        })
    }
}

/// `_prog_feat` packet: static features of one function after a pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub compile_id: EntityId,
    pub function_name: String,
    pub features: super::features::FeatureVector,
}

impl FeatureRecord {
    pub fn to_packet(&self) -> Packet {
        Packet::new()
            .with("COMPILE_ID", self.compile_id.to_string())
            .with("FUNCTION_NAME", self.function_name.as_str())
            .with("PASS", self.features.anchor_pass())
            .with(self.features.kind().packet_key(), self.features.to_list())
    }

    pub fn from_packet(p: &Packet) -> Result<Self, PacketError> {
        use super::features::{FeatureKind, FeatureVector};
        let raw = p.require("STATIC_FEATURE_VECTOR")?;
        let features = FeatureVector::parse(FeatureKind::Static, raw)
            .map_err(|e| PacketError::invalid("STATIC_FEATURE_VECTOR", raw, e))?
            .with_anchor_pass(p.get("PASS").unwrap_or_default());
        Ok(Self {
            compile_id: p.parse_required("COMPILE_ID")?,
            function_name: p.get("FUNCTION_NAME").unwrap_or_default().to_string(),
            features,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{parse_packet, PacketKind};

    pub(crate) const PAPER_RUN: &str =
        "RUN_ID=22712323769921139\nRUN_ID_ASSOCIATE=22712323769921139\n\
COMPILE_ID=8098633667852535\nCOMPILER_ID=331350613878705696\nPLATFORM_ID=2111574609159278179\n\
ENVIRONMENT_ID=2781195477254972989\nPROGRAM_ID=1487849553352134\nDATE=2009-06-04\nTIME=14:35:26\n\
RUN_COMMAND_LINE=1) ../../automotive_susan_data/1.pgm output_large.corners.pgm -c > ftmp_out\n\
OUTPUT_CORRECT=1\nRUN_TIME=16.355512\nRUN_TIME1=0.000000\nRUN_TIME_USER=13.822898\n\
RUN_TIME_SYS=2.532614\nRUN_PG={susan_corners=12.27,782,0.0156905371}\nNOTES=baseline compilation\n";

    #[test]
    fn parses_tool_execution_packet() {
        let (kind, p) = parse_packet(PAPER_RUN).unwrap();
        assert_eq!(kind, PacketKind::Execution);
        let r = ExecutionRecord::from_packet(&p).unwrap();
        assert!(r.output_correct);
        assert!(r.is_reference());
        assert_eq!(r.run_time, 16.355512);
        assert_eq!(r.run_time_user, 13.822898);
        assert_eq!(r.profile["susan_corners"].calls, 782);
        assert_eq!(r.profile["susan_corners"].fraction, 0.0156905371);
        assert_eq!(r.extensions["RUN_TIME1"], "0.000000");
        let again = ExecutionRecord::from_packet(&r.to_packet()).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn parses_tool_compilation_packet() {
        let text = "COMPILE_ID=19293849477085514\nPLATFORM_ID=2111574609159278179\n\
ENVIRONMENT_ID=2781195477254972989\nCOMPILER_ID=129504539516446542\nPROGRAM_ID=1487849553352134\n\
DATE=2009-06-04\nTIME=14:06:47\nOPT_FLAGS=-O3\nOPT_FLAGS_PLATFORM=-msse2\nCOMPILE_TIME=69.000000\n\
BIN_SIZE=48870\nOBJ_MD5CRC=b15359251b3c185dfa180e0e1ad16228\nICI_FEATURES_STATIC_EXTRACT=1\n\
NOTES=baseline compilation\n";
        let (_, p) = parse_packet(text).unwrap();
        let c = CompilationRecord::from_packet(&p).unwrap();
        assert_eq!(c.compile_time, 69.0);
        assert_eq!(c.bin_size, 48870);
        assert_eq!(c.opt.canonical(), "-O3");
        assert_eq!(c.opt.platform_flags(), ["-msse2"]);
        assert_eq!(c.extensions["ICI_FEATURES_STATIC_EXTRACT"], "1");
        assert!(c.to_packet().to_text().contains("COMPILE_TIME=69.000000\n"));
    }

    #[test]
    fn rejects_bad_md5_and_zero_size() {
        let text = "COMPILE_ID=1\nPLATFORM_ID=2\nENVIRONMENT_ID=3\nCOMPILER_ID=4\nPROGRAM_ID=5\n\
OPT_FLAGS=-O3\nCOMPILE_TIME=1.0\nBIN_SIZE=0\nOBJ_MD5CRC=b15359251b3c185dfa180e0e1ad16228\n";
        let (_, p) = parse_packet(text).unwrap();
        assert!(CompilationRecord::from_packet(&p).is_err());
        let mut p2 = p.clone();
        p2.set("BIN_SIZE", "10");
        p2.set("OBJ_MD5CRC", "XYZ");
        assert!(CompilationRecord::from_packet(&p2).is_err());
        p2.set("OBJ_MD5CRC", "");
        p2.set("BIN_SIZE", "0");
        assert!(CompilationRecord::from_packet(&p2).is_ok());
    }

    #[test]
    fn passes_and_features_packets() {
        let text = "COMPILE_ID=19293849477085514\nCOMPILER_ID=129504539516446542\nFUNCTION_NAME=corner_draw\n\
PASSES=all_optimizations,strip_predict_hints,addressables,copyrename\n";
        let (kind, p) = parse_packet(text).unwrap();
        assert_eq!(kind, PacketKind::Passes);
        let r = PassesRecord::from_packet(&p).unwrap();
        assert_eq!(r.passes.len(), 4);
        assert_eq!(PassesRecord::from_packet(&r.to_packet()).unwrap(), r);

        let text = "COMPILE_ID=19293849477085514\nFUNCTION_NAME=corner_draw\nPASS=fre\n\
STATIC_FEATURE_VECTOR= ft1=9, ft2=4, ft3=2, ...\n";
        let (kind, p) = parse_packet(text).unwrap();
        assert_eq!(kind, PacketKind::Features);
        let f = FeatureRecord::from_packet(&p).unwrap();
        assert_eq!(f.features.anchor_pass(), "fre");
        assert_eq!(FeatureRecord::from_packet(&f.to_packet()).unwrap(), f);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn id() -> impl Strategy<Value = EntityId> {
            any::<u128>().prop_map(|v| EntityId::new(v.max(1)).unwrap())
        }

        fn line() -> impl Strategy<Value = String> {
            "[ -~]{0,24}"
        }

        fn time() -> impl Strategy<Value = f64> {
            0.0f64..1e6
        }

        fn opt() -> impl Strategy<Value = FlagCombination> {
            (
                prop::option::of("-O[0-3s]"),
                prop::collection::btree_set("-f[a-z-]{1,10}", 0..6),
                prop::collection::btree_set("-m[a-z0-9]{1,6}", 0..3),
            )
                .prop_map(|(base, flags, plat)| {
                    FlagCombination::new(
                        base.unwrap_or_default(),
                        flags.into_iter().collect(),
                        plat.into_iter().collect(),
                    )
                    .unwrap()
                })
        }

        fn extensions(
            typed: &'static [&'static str],
        ) -> impl Strategy<Value = BTreeMap<String, String>> {
            prop::collection::btree_map("X_[A-Z0-9_]{1,8}", line(), 0..4).prop_map(move |m| {
                m.into_iter()
                    .filter(|(k, _)| !typed.contains(&k.as_str()))
                    .collect()
            })
        }

        prop_compose! {
            fn compilation()(
                ids in prop::collection::vec(id(), 5),
                opt in opt(),
                compile_time in time(),
                ok in any::<bool>(),
                size in 1u64..10_000_000,
                md5 in "[0-9a-f]{32}",
                text in prop::collection::vec(line(), 3),
                extensions in extensions(COMPILATION_KEYS),
            ) -> CompilationRecord {
                CompilationRecord {
                    compile_id: ids[0],
                    platform_id: ids[1],
                    environment_id: ids[2],
                    compiler_id: ids[3],
                    program_id: ids[4],
                    opt,
                    compile_time,
                    bin_size: if ok { size } else { 0 },
                    obj_md5: if ok { md5 } else { String::new() },
                    date: text[0].clone(),
                    time: text[1].clone(),
                    notes: text[2].clone(),
                    extensions,
                }
            }
        }

        prop_compose! {
            fn execution()(
                ids in prop::collection::vec(id(), 7),
                reference in any::<bool>(),
                dataset in 1u32..100,
                size in 0u64..10_000_000,
                ok in any::<bool>(),
                times in prop::collection::vec(time(), 3),
                text in prop::collection::vec(line(), 4),
                profile in prop::collection::btree_map("[a-z_]{1,10}", (0.0f64..100.0, any::<u32>(), 0.0f64..1.0), 0..4),
                counters in prop::collection::btree_map("[A-Z_]{1,10}", any::<i64>(), 0..4),
                processor in -1i64..64,
                rank in any::<i64>(),
                extensions in extensions(EXECUTION_KEYS),
            ) -> ExecutionRecord {
                ExecutionRecord {
                    run_id: ids[0],
                    run_id_associate: if reference { ids[0] } else { ids[1] },
                    compile_id: ids[2],
                    compiler_id: ids[3],
                    program_id: ids[4],
                    platform_id: ids[5],
                    environment_id: ids[6],
                    dataset_number: dataset,
                    bin_size: size,
                    output_correct: ok,
                    run_time: times[0],
                    run_time_user: times[1],
                    run_time_sys: times[2],
                    run_command_line: text[0].clone(),
                    profile: profile
                        .into_iter()
                        .map(|(k, (seconds, calls, fraction))| {
                            (k, ProfileEntry { seconds, calls: calls as u64, fraction })
                        })
                        .collect(),
                    hardware_counters: counters,
                    processor_num: processor,
                    rank,
                    date: text[1].clone(),
                    time: text[2].clone(),
                    notes: text[3].clone(),
                    extensions,
                }
            }
        }

        proptest! {
            #[test]
            fn compilation_text_round_trips(c in compilation()) {
                let first = c.to_packet().to_text();
                let parsed = CompilationRecord::from_packet(&crate::packet::parse_fields(&first).unwrap()).unwrap();
                prop_assert_eq!(parsed.to_packet().to_text(), first);
                prop_assert_eq!(parsed.compile_id, c.compile_id);
                prop_assert_eq!(&parsed.opt, &c.opt);
                prop_assert_eq!(&parsed.extensions, &c.extensions);
            }

            #[test]
            fn execution_text_round_trips(e in execution()) {
                let first = e.to_packet().to_text();
                let parsed = ExecutionRecord::from_packet(&crate::packet::parse_fields(&first).unwrap()).unwrap();
                prop_assert_eq!(parsed.to_packet().to_text(), first);
                prop_assert_eq!(&parsed.profile, &e.profile);
                prop_assert_eq!(&parsed.hardware_counters, &e.hardware_counters);
                prop_assert_eq!(parsed.is_reference(), e.is_reference());
            }
        }
    }
}
