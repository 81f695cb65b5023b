//! Append-only, file-backed optimization repository.
//!
//! Layout of a repository directory:
//!
//! ```text
//! INFORMATION        repository packet (COD_VERSION, CREATED, INSTANCE_ID)
//! entities.pk        registered platforms, environments, compilers, programs, runtimes
//! compilations.pk    compilation packets
//! executions.pk      execution packets
//! lock               advisory writer lock
//! ```
//!
//! Every stream is a sequence of packets each terminated by a blank line.
//! The in-memory index is rebuilt on open; a trailing packet without its
//! terminating blank line is an interrupted append and is discarded.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use fs2::FileExt;
use log::{debug, warn};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{
    build_case, Aggregator, CompilationRecord, Descriptor, DescriptorError, Entity, EntityId,
    EntityKind, ExecutionRecord, OptimizationCase, Record, RecordError, Stamper,
};
use crate::packet::{parse_fields, parse_stream, Packet, PacketError};

/// Schema version written to `INFORMATION`. Repositories are compatible
/// when the major component matches.
pub const COD_VERSION: &str = "1.0";

pub const INFORMATION_FILE: &str = "INFORMATION";
pub const ENTITIES_FILE: &str = "entities.pk";
pub const COMPILATIONS_FILE: &str = "compilations.pk";
pub const EXECUTIONS_FILE: &str = "executions.pk";
pub const LOCK_FILE: &str = "lock";

/// Local repository path.
pub const ENV_LOCAL_DB: &str = "CCC_DB";
/// Shared repository path.
pub const ENV_SHARED_DB: &str = "CCC_CT_DB";

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("storage failure on {path}: {source}")]
    StorageFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{file} is corrupt: {source}")]
    Corrupt {
        file: PathBuf,
        #[source]
        source: PacketError,
    },
    #[error("{0} is not a repository (no INFORMATION file)")]
    NotARepository(PathBuf),
    #[error("{0} already contains a repository")]
    AlreadyExists(PathBuf),
    #[error("repository version {found} is incompatible with {expected}")]
    VersionMismatch { found: String, expected: String },
    #[error("repository {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("repository was opened read-only")]
    ReadOnly,
    #[error("{field} {id} does not exist in this repository")]
    DanglingReference { field: &'static str, id: EntityId },
    #[error("record {0} already exists with different content")]
    Conflict(EntityId),
    #[error("unknown optimization case (run {0})")]
    UnknownCase(EntityId),
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(#[from] DescriptorError),
    #[error("invalid record: {0}")]
    InvalidRecord(#[from] RecordError),
    #[error("invalid packet: {0}")]
    InvalidPacket(#[from] PacketError),
}

fn storage(path: &Path) -> impl FnOnce(io::Error) -> RepoError + '_ {
    move |source| RepoError::StorageFailure {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepositoryInfo {
    pub cod_version: String,
    pub created: String,
    pub instance_id: EntityId,
}

impl RepositoryInfo {
    fn to_packet(&self) -> Packet {
        Packet::new()
            .with("COD_VERSION", self.cod_version.as_str())
            .with("CREATED", self.created.as_str())
            .with("INSTANCE_ID", self.instance_id.to_string())
    }

    fn from_packet(p: &Packet) -> Result<Self, PacketError> {
        let cod_version = p.require("COD_VERSION")?.trim().to_string();
        if cod_version.is_empty() {
            return Err(PacketError::invalid("COD_VERSION", "", "must not be empty"));
        }
        Ok(Self {
            cod_version,
            created: p.get("CREATED").unwrap_or_default().to_string(),
            instance_id: p.parse_required("INSTANCE_ID")?,
        })
    }

    pub fn is_compatible_with(&self, other: &str) -> bool {
        major(&self.cod_version) == major(other)
    }
}

fn major(version: &str) -> &str {
    version.split('.').next().unwrap_or(version)
}

/// Filters for [`Repository::query`]. The default selects everything.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryCriteria {
    pub program_id: Option<EntityId>,
    pub platform_id: Option<EntityId>,
    pub compiler_id: Option<EntityId>,
    pub dataset_number: Option<u32>,
    pub min_speedup: Option<f64>,
    pub min_rank: Option<i64>,
    pub output_correct: Option<bool>,
    /// Also return the baseline compilation's own case (speedup 1).
    pub include_baselines: bool,
}

impl QueryCriteria {
    pub fn select_all() -> Self {
        Self::default()
    }

    pub fn matches(&self, case: &OptimizationCase) -> bool {
        let c = &case.compilation;
        self.program_id.is_none_or(|id| c.program_id == id)
            && self.platform_id.is_none_or(|id| c.platform_id == id)
            && self.compiler_id.is_none_or(|id| c.compiler_id == id)
            && self.dataset_number.is_none_or(|d| case.dataset_number == d)
            && self.min_speedup.is_none_or(|s| case.speedup >= s)
            && self.min_rank.is_none_or(|r| case.rank >= r)
            && self.output_correct.is_none_or(|o| case.output_correct == o)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeStats {
    pub new: usize,
    pub duplicate: usize,
    pub conflicting: usize,
}

impl std::ops::AddAssign for MergeStats {
    fn add_assign(&mut self, rhs: Self) {
        self.new += rhs.new;
        self.duplicate += rhs.duplicate;
        self.conflicting += rhs.conflicting;
    }
}

/// Options for creating a new repository.
#[derive(Debug, Clone)]
pub struct RepoOptions {
    pub stamper: Stamper,
}

impl Default for RepoOptions {
    fn default() -> Self {
        Self {
            stamper: Stamper::from_entropy(),
        }
    }
}

impl RepoOptions {
    /// Seeded ids and a stepped clock: byte-reproducible contents.
    pub fn deterministic(seed: u64) -> Self {
        Self {
            stamper: Stamper::seeded(seed),
        }
    }
}

struct Writer {
    _lock: File,
    entities: File,
    compilations: File,
    executions: File,
}

#[derive(Clone, Copy)]
enum Stream {
    Entities,
    Compilations,
    Executions,
}

impl Stream {
    fn file_name(self) -> &'static str {
        match self {
            Stream::Entities => ENTITIES_FILE,
            Stream::Compilations => COMPILATIONS_FILE,
            Stream::Executions => EXECUTIONS_FILE,
        }
    }
}

pub struct Repository {
    root: PathBuf,
    info: RepositoryInfo,
    entities: Vec<Entity>,
    entity_index: HashMap<EntityId, usize>,
    entity_by_content: HashMap<String, EntityId>,
    compilations: Vec<CompilationRecord>,
    compilation_index: HashMap<EntityId, usize>,
    executions: Vec<ExecutionRecord>,
    execution_index: HashMap<EntityId, usize>,
    executions_by_compile: HashMap<EntityId, Vec<usize>>,
    compilations_by_md5: HashMap<(EntityId, String), Vec<usize>>,
    writer: Option<Writer>,
    stamper: Stamper,
    aggregator: Aggregator,
}

fn content_hash(descriptor: &Descriptor) -> String {
    let text = Entity::content_packet(descriptor).to_text();
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Splits stream text into the complete prefix and an interrupted tail.
fn complete_prefix(text: &str) -> (&str, &str) {
    if text.trim().is_empty() {
        return (text, "");
    }
    match text.rfind("\n\n") {
        Some(pos) => text.split_at(pos + 2),
        None => ("", text),
    }
}

impl Repository {
    /// Creates a new repository directory and opens it for writing.
    pub fn create(root: impl AsRef<Path>, options: RepoOptions) -> Result<Self, RepoError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(storage(&root))?;
        let info_path = root.join(INFORMATION_FILE);
        if info_path.exists() {
            return Err(RepoError::AlreadyExists(root));
        }
        let mut stamper = options.stamper;
        let info = RepositoryInfo {
            cod_version: COD_VERSION.to_string(),
            created: stamper.now_iso(),
            instance_id: stamper.next_id(),
        };
        for stream in [Stream::Entities, Stream::Compilations, Stream::Executions] {
            let p = root.join(stream.file_name());
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(storage(&p))?;
        }
        fs::write(&info_path, info.to_packet().to_text()).map_err(storage(&info_path))?;
        let mut repo = Self::open_inner(&root, true)?;
        repo.stamper = stamper;
        Ok(repo)
    }

    /// Opens an existing repository for writing (takes the writer lock).
    pub fn open(root: impl AsRef<Path>) -> Result<Self, RepoError> {
        Self::open_inner(root.as_ref(), true)
    }

    /// Opens a consistent snapshot for reading; no lock is taken.
    pub fn open_read_only(root: impl AsRef<Path>) -> Result<Self, RepoError> {
        Self::open_inner(root.as_ref(), false)
    }

    pub fn open_or_create(root: impl AsRef<Path>, options: RepoOptions) -> Result<Self, RepoError> {
        if root.as_ref().join(INFORMATION_FILE).exists() {
            let mut repo = Self::open(root)?;
            repo.stamper = options.stamper;
            Ok(repo)
        } else {
            Self::create(root, options)
        }
    }

    fn open_inner(root: &Path, writable: bool) -> Result<Self, RepoError> {
        let info_path = root.join(INFORMATION_FILE);
        if !info_path.exists() {
            return Err(RepoError::NotARepository(root.to_path_buf()));
        }
        let info_text = fs::read_to_string(&info_path).map_err(storage(&info_path))?;
        let info = parse_fields(&info_text)
            .and_then(|p| RepositoryInfo::from_packet(&p))
            .map_err(|source| RepoError::Corrupt {
                file: info_path.clone(),
                source,
            })?;
        if !info.is_compatible_with(COD_VERSION) {
            return Err(RepoError::VersionMismatch {
                found: info.cod_version,
                expected: COD_VERSION.to_string(),
            });
        }

        let lock = if writable {
            let lock_path = root.join(LOCK_FILE);
            let f = OpenOptions::new()
                .create(true)
                .truncate(false)
                .write(true)
                .open(&lock_path)
                .map_err(storage(&lock_path))?;
            f.try_lock_exclusive()
                .map_err(|_| RepoError::Locked(root.to_path_buf()))?;
            Some(f)
        } else {
            None
        };

        let mut repo = Self {
            root: root.to_path_buf(),
            info,
            entities: Vec::new(),
            entity_index: HashMap::new(),
            entity_by_content: HashMap::new(),
            compilations: Vec::new(),
            compilation_index: HashMap::new(),
            executions: Vec::new(),
            execution_index: HashMap::new(),
            executions_by_compile: HashMap::new(),
            compilations_by_md5: HashMap::new(),
            writer: None,
            stamper: Stamper::from_entropy(),
            aggregator: Aggregator::default(),
        };

        for stream in [Stream::Entities, Stream::Compilations, Stream::Executions] {
            let path = root.join(stream.file_name());
            let text = match fs::read_to_string(&path) {
                Ok(t) => t,
                Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
                Err(e) => return Err(storage(&path)(e)),
            };
            let (complete, tail) = complete_prefix(&text);
            if !tail.is_empty() {
                warn!(
                    "{}: ignoring interrupted trailing packet ({} bytes)",
                    path.display(),
                    tail.len()
                );
                if writable {
                    let f = OpenOptions::new()
                        .write(true)
                        .open(&path)
                        .map_err(storage(&path))?;
                    f.set_len(complete.len() as u64).map_err(storage(&path))?;
                }
            }
            let corrupt = |source| RepoError::Corrupt {
                file: path.clone(),
                source,
            };
            for packet in parse_stream(complete).map_err(corrupt)? {
                match stream {
                    Stream::Entities => {
                        let e = Entity::from_packet(&packet).map_err(corrupt)?;
                        repo.index_entity(e);
                    }
                    Stream::Compilations => {
                        let c = CompilationRecord::from_packet(&packet).map_err(corrupt)?;
                        repo.index_compilation(c);
                    }
                    Stream::Executions => {
                        let e = ExecutionRecord::from_packet(&packet).map_err(corrupt)?;
                        repo.index_execution(e);
                    }
                }
            }
        }

        if let Some(lock) = lock {
            let open = |name: &str| {
                let p = root.join(name);
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(storage(&p))
            };
            repo.writer = Some(Writer {
                _lock: lock,
                entities: open(ENTITIES_FILE)?,
                compilations: open(COMPILATIONS_FILE)?,
                executions: open(EXECUTIONS_FILE)?,
            });
        }
        Ok(repo)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn info(&self) -> &RepositoryInfo {
        &self.info
    }

    pub fn is_writable(&self) -> bool {
        self.writer.is_some()
    }

    pub fn stamper_mut(&mut self) -> &mut Stamper {
        &mut self.stamper
    }

    pub fn set_stamper(&mut self, stamper: Stamper) {
        self.stamper = stamper;
    }

    pub fn aggregator(&self) -> Aggregator {
        self.aggregator
    }

    pub fn set_aggregator(&mut self, aggregator: Aggregator) {
        self.aggregator = aggregator;
    }

    fn index_entity(&mut self, e: Entity) {
        let hash = content_hash(&e.descriptor);
        self.entity_by_content.entry(hash).or_insert(e.id);
        match self.entity_index.get(&e.id) {
            Some(&i) => self.entities[i] = e,
            None => {
                self.entity_index.insert(e.id, self.entities.len());
                self.entities.push(e);
            }
        }
    }

    fn index_compilation(&mut self, c: CompilationRecord) {
        match self.compilation_index.get(&c.compile_id) {
            Some(&i) => self.compilations[i] = c,
            None => {
                let i = self.compilations.len();
                self.compilation_index.insert(c.compile_id, i);
                if c.succeeded() {
                    self.compilations_by_md5
                        .entry((c.program_id, c.obj_md5.clone()))
                        .or_default()
                        .push(i);
                }
                self.compilations.push(c);
            }
        }
    }

    fn index_execution(&mut self, e: ExecutionRecord) {
        match self.execution_index.get(&e.run_id) {
            Some(&i) => self.executions[i] = e,
            None => {
                let i = self.executions.len();
                self.execution_index.insert(e.run_id, i);
                self.executions_by_compile
                    .entry(e.compile_id)
                    .or_default()
                    .push(i);
                self.executions.push(e);
            }
        }
    }

    fn append(&mut self, stream: Stream, packet: &Packet) -> Result<(), RepoError> {
        let writer = self.writer.as_mut().ok_or(RepoError::ReadOnly)?;
        let file = match stream {
            Stream::Entities => &mut writer.entities,
            Stream::Compilations => &mut writer.compilations,
            Stream::Executions => &mut writer.executions,
        };
        let mut text = packet.to_text();
        text.push('\n');
        let path = self.root.join(stream.file_name());
        file.write_all(text.as_bytes()).map_err(storage(&path))?;
        file.flush().map_err(storage(&path))
    }

    // ---- entities ----

    /// Registers a descriptor, or returns the id of an identical one already
    /// registered.
    pub fn register_entity(&mut self, descriptor: Descriptor) -> Result<EntityId, RepoError> {
        self.register_entity_with_id(descriptor, None)
    }

    /// As [`register_entity`](Self::register_entity), using `preferred` as the
    /// id of a new entity when it is free (e.g. a program's `_ccc_program_id`).
    pub fn register_entity_with_id(
        &mut self,
        descriptor: Descriptor,
        preferred: Option<EntityId>,
    ) -> Result<EntityId, RepoError> {
        descriptor.validate()?;
        if self.writer.is_none() {
            return Err(RepoError::ReadOnly);
        }
        if let Some(&id) = self.entity_by_content.get(&content_hash(&descriptor)) {
            return Ok(id);
        }
        let id = match preferred {
            Some(id) if !self.entity_index.contains_key(&id) => id,
            _ => loop {
                let id = self.stamper.next_id();
                if !self.entity_index.contains_key(&id) {
                    break id;
                }
            },
        };
        let entity = Entity::from_packet(&Entity { id, descriptor }.to_packet())?;
        self.append(Stream::Entities, &entity.to_packet())?;
        self.index_entity(entity);
        Ok(id)
    }

    pub fn entity(&self, id: EntityId) -> Option<&Entity> {
        self.entity_index.get(&id).map(|&i| &self.entities[i])
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entities_of(&self, kind: EntityKind) -> impl Iterator<Item = &Entity> {
        self.entities.iter().filter(move |e| e.kind() == kind)
    }

    pub fn find_entity(&self, kind: EntityKind, name: &str) -> Option<&Entity> {
        self.entities_of(kind).find(|e| e.descriptor.name() == name)
    }

    // ---- records ----

    fn require_entity(
        &self,
        field: &'static str,
        id: EntityId,
        kind: EntityKind,
    ) -> Result<(), RepoError> {
        match self.entity(id) {
            Some(e) if e.kind() == kind => Ok(()),
            _ => Err(RepoError::DanglingReference { field, id }),
        }
    }

    fn check_references(&self, record: &Record) -> Result<(), RepoError> {
        let (platform, environment, compiler, program) = match record {
            Record::Compilation(c) => {
                (c.platform_id, c.environment_id, c.compiler_id, c.program_id)
            }
            Record::Execution(e) => (e.platform_id, e.environment_id, e.compiler_id, e.program_id),
        };
        self.require_entity("PLATFORM_ID", platform, EntityKind::Platform)?;
        self.require_entity("ENVIRONMENT_ID", environment, EntityKind::Environment)?;
        self.require_entity("COMPILER_ID", compiler, EntityKind::Compiler)?;
        self.require_entity("PROGRAM_ID", program, EntityKind::Program)?;
        if let Record::Execution(e) = record {
            if !self.compilation_index.contains_key(&e.compile_id) {
                return Err(RepoError::DanglingReference {
                    field: "COMPILE_ID",
                    id: e.compile_id,
                });
            }
            if !e.is_reference() && !self.execution_index.contains_key(&e.run_id_associate) {
                return Err(RepoError::DanglingReference {
                    field: "RUN_ID_ASSOCIATE",
                    id: e.run_id_associate,
                });
            }
        }
        Ok(())
    }

    /// Appends a record. Re-recording an identical record is a no-op; a
    /// different record under an existing id is a conflict.
    pub fn record(&mut self, record: Record) -> Result<EntityId, RepoError> {
        // stored form: what a reload would produce
        let record = Record::from_packet(&record.to_packet())?;
        let id = record.id();
        match &record {
            Record::Compilation(c) => {
                c.validate()?;
                if let Some(existing) = self.compilation(id) {
                    return if existing == c {
                        Ok(id)
                    } else {
                        Err(RepoError::Conflict(id))
                    };
                }
            }
            Record::Execution(e) => {
                e.validate()?;
                if let Some(existing) = self.execution(id) {
                    return if existing == e {
                        Ok(id)
                    } else {
                        Err(RepoError::Conflict(id))
                    };
                }
            }
        }
        if self.writer.is_none() {
            return Err(RepoError::ReadOnly);
        }
        self.check_references(&record)?;
        match record {
            Record::Compilation(c) => {
                self.append(Stream::Compilations, &c.to_packet())?;
                self.index_compilation(c);
            }
            Record::Execution(e) => {
                self.append(Stream::Executions, &e.to_packet())?;
                self.index_execution(e);
            }
        }
        Ok(id)
    }

    pub fn record_compilation(&mut self, c: CompilationRecord) -> Result<EntityId, RepoError> {
        self.record(Record::Compilation(c))
    }

    pub fn record_execution(&mut self, e: ExecutionRecord) -> Result<EntityId, RepoError> {
        self.record(Record::Execution(e))
    }

    pub fn compilation(&self, id: EntityId) -> Option<&CompilationRecord> {
        self.compilation_index
            .get(&id)
            .map(|&i| &self.compilations[i])
    }

    pub fn execution(&self, id: EntityId) -> Option<&ExecutionRecord> {
        self.execution_index.get(&id).map(|&i| &self.executions[i])
    }

    pub fn compilations(&self) -> &[CompilationRecord] {
        &self.compilations
    }

    pub fn executions(&self) -> &[ExecutionRecord] {
        &self.executions
    }

    pub fn executions_of(&self, compile_id: EntityId) -> impl Iterator<Item = &ExecutionRecord> {
        self.executions_by_compile
            .get(&compile_id)
            .into_iter()
            .flatten()
            .map(|&i| &self.executions[i])
    }

    /// Number of stored entities and records.
    pub fn len(&self) -> usize {
        self.entities.len() + self.compilations.len() + self.executions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Compilations of `program` whose binary has the given MD5, oldest first.
    pub fn compilations_with_md5(
        &self,
        program: EntityId,
        md5: &str,
    ) -> impl Iterator<Item = &CompilationRecord> {
        self.compilations_by_md5
            .get(&(program, md5.to_string()))
            .into_iter()
            .flatten()
            .map(|&i| &self.compilations[i])
    }

    /// Prior executions of a binary with this MD5 on `dataset`, grouped by the
    /// first compilation that has any.
    pub fn cached_executions(
        &self,
        program: EntityId,
        md5: &str,
        dataset: u32,
    ) -> Vec<&ExecutionRecord> {
        for c in self.compilations_with_md5(program, md5) {
            let runs: Vec<_> = self
                .executions_of(c.compile_id)
                .filter(|e| e.dataset_number == dataset)
                .collect();
            if !runs.is_empty() {
                return runs;
            }
        }
        Vec::new()
    }

    /// Reference run for a program compiled at exactly `opt_canonical`.
    pub fn find_reference_run(
        &self,
        program: EntityId,
        compiler: EntityId,
        platform: EntityId,
        opt_canonical: &str,
        dataset: u32,
    ) -> Option<(&CompilationRecord, Vec<&ExecutionRecord>)> {
        self.compilations
            .iter()
            .filter(|c| {
                c.program_id == program
                    && c.compiler_id == compiler
                    && c.platform_id == platform
                    && c.opt.canonical() == opt_canonical
            })
            .find_map(|c| {
                let reference = self
                    .executions_of(c.compile_id)
                    .find(|e| e.is_reference() && e.dataset_number == dataset)?;
                let group = self
                    .executions_of(c.compile_id)
                    .filter(|e| e.run_id_associate == reference.run_id)
                    .collect();
                Some((c, group))
            })
    }

    // ---- query ----

    /// All optimization cases matching `criteria`, ordered by compile
    /// date/time, then compile id, then dataset.
    pub fn query(&self, criteria: &QueryCriteria) -> Vec<OptimizationCase> {
        let mut groups: BTreeMap<(EntityId, u32, EntityId), Vec<usize>> = BTreeMap::new();
        for (i, e) in self.executions.iter().enumerate() {
            groups
                .entry((e.compile_id, e.dataset_number, e.run_id_associate))
                .or_default()
                .push(i);
        }
        let mut cases = Vec::new();
        for ((compile_id, dataset, associate), idxs) in &groups {
            let Some(reference) = self.execution(*associate) else {
                debug!("executions of {compile_id} reference missing baseline {associate}");
                continue;
            };
            if reference.compile_id == *compile_id && !criteria.include_baselines {
                continue;
            }
            let (Some(comp), Some(base_comp)) = (
                self.compilation(*compile_id),
                self.compilation(reference.compile_id),
            ) else {
                continue;
            };
            let Some(base_idxs) = groups.get(&(reference.compile_id, *dataset, *associate)) else {
                continue;
            };
            let runs: Vec<ExecutionRecord> =
                idxs.iter().map(|&i| self.executions[i].clone()).collect();
            let base: Vec<ExecutionRecord> = base_idxs
                .iter()
                .map(|&i| self.executions[i].clone())
                .collect();
            match build_case(comp, &runs, &base, base_comp, self.aggregator, false) {
                Ok(case) if criteria.matches(&case) => cases.push(case),
                Ok(_) => {}
                Err(e) => debug!("skipping case {compile_id}/{dataset}: {e}"),
            }
        }
        cases.sort_by(|a, b| {
            let (ca, cb) = (&a.compilation, &b.compilation);
            (&ca.date, &ca.time, ca.compile_id, a.dataset_number).cmp(&(
                &cb.date,
                &cb.time,
                cb.compile_id,
                b.dataset_number,
            ))
        });
        cases
    }

    /// Persists a manual rank on every execution of the case. Latest wins.
    pub fn rank_case(
        &mut self,
        case: &OptimizationCase,
        rank: i64,
    ) -> Result<OptimizationCase, RepoError> {
        if self.writer.is_none() {
            return Err(RepoError::ReadOnly);
        }
        let first = case
            .executions
            .first()
            .map(|e| e.run_id)
            .ok_or(RepoError::UnknownCase(case.compile_id()))?;
        for e in &case.executions {
            if self.execution(e.run_id).is_none() {
                return Err(RepoError::UnknownCase(e.run_id));
            }
        }
        if self.compilation(case.compile_id()).is_none() {
            return Err(RepoError::UnknownCase(first));
        }
        let mut updated = case.clone();
        for e in &mut updated.executions {
            let mut stored = self.execution(e.run_id).cloned().expect("checked above");
            stored.rank = rank;
            self.append(Stream::Executions, &stored.to_packet())?;
            *e = stored.clone();
            self.index_execution(stored);
        }
        updated.rank = rank;
        Ok(updated)
    }

    // ---- merge ----

    /// Merges every entity and record of `source` into `self` by id.
    /// Identical records count as duplicates; differing records under the
    /// same id are conflicts and keep the destination version.
    pub fn merge_from(&mut self, source: &Repository) -> Result<MergeStats, RepoError> {
        self.check_merge_version(source)?;
        let mut stats = MergeStats::default();
        for e in &source.entities {
            stats += self.merge_entity(e)?;
        }
        for c in &source.compilations {
            stats += self.merge_record(Record::Compilation(c.clone()))?;
        }
        for e in &source.executions {
            stats += self.merge_record(Record::Execution(e.clone()))?;
        }
        Ok(stats)
    }

    /// Merges only the given cases (e.g. the output of a profitability
    /// filter) plus everything they reference: entities, and the baseline
    /// compilation and runs they are measured against.
    pub fn merge_cases_from(
        &mut self,
        source: &Repository,
        cases: &[OptimizationCase],
    ) -> Result<MergeStats, RepoError> {
        self.check_merge_version(source)?;
        let mut stats = MergeStats::default();
        let mut compile_ids = Vec::new();
        let mut run_ids = Vec::new();
        for case in cases {
            for e in &case.executions {
                if let Some(reference) = source.execution(e.run_id_associate) {
                    compile_ids.push(reference.compile_id);
                    run_ids.extend(
                        source
                            .executions_of(reference.compile_id)
                            .filter(|b| b.run_id_associate == reference.run_id)
                            .map(|b| b.run_id),
                    );
                }
            }
            compile_ids.push(case.compile_id());
            run_ids.extend(case.executions.iter().map(|e| e.run_id));
        }
        let mut seen = std::collections::HashSet::new();
        compile_ids.retain(|id| seen.insert(*id));
        run_ids.retain(|id| seen.insert(*id));

        let mut entity_ids = Vec::new();
        for id in &compile_ids {
            if let Some(c) = source.compilation(*id) {
                entity_ids.extend([c.platform_id, c.environment_id, c.compiler_id, c.program_id]);
            }
        }
        entity_ids.retain(|id| seen.insert(*id));
        for id in entity_ids {
            if let Some(e) = source.entity(id) {
                stats += self.merge_entity(e)?;
            }
        }
        for id in compile_ids {
            if let Some(c) = source.compilation(id) {
                stats += self.merge_record(Record::Compilation(c.clone()))?;
            }
        }
        // references before the runs associated with them
        run_ids.sort_by_key(|id| source.execution(*id).is_none_or(|e| !e.is_reference()));
        for id in run_ids {
            if let Some(e) = source.execution(id) {
                stats += self.merge_record(Record::Execution(e.clone()))?;
            }
        }
        Ok(stats)
    }

    fn check_merge_version(&self, source: &Repository) -> Result<(), RepoError> {
        if !source.info.is_compatible_with(&self.info.cod_version) {
            return Err(RepoError::VersionMismatch {
                found: source.info.cod_version.clone(),
                expected: self.info.cod_version.clone(),
            });
        }
        Ok(())
    }

    fn merge_entity(&mut self, e: &Entity) -> Result<MergeStats, RepoError> {
        let mut stats = MergeStats::default();
        match self.entity(e.id) {
            Some(existing) if existing == e => stats.duplicate += 1,
            Some(_) => stats.conflicting += 1,
            None => {
                self.append(Stream::Entities, &e.to_packet())?;
                self.index_entity(e.clone());
                stats.new += 1;
            }
        }
        Ok(stats)
    }

    fn merge_record(&mut self, record: Record) -> Result<MergeStats, RepoError> {
        let mut stats = MergeStats::default();
        let id = record.id();
        let existed = match &record {
            Record::Compilation(_) => self.compilation(id).is_some(),
            Record::Execution(_) => self.execution(id).is_some(),
        };
        match self.record(record) {
            Ok(_) if existed => stats.duplicate += 1,
            Ok(_) => stats.new += 1,
            Err(RepoError::Conflict(_)) => stats.conflicting += 1,
            Err(e) => return Err(e),
        }
        Ok(stats)
    }

    /// SHA-256 over the serialized contents; changes whenever any entity or
    /// record changes.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entities {
            h.update(e.to_packet().to_text());
        }
        for c in &self.compilations {
            h.update(c.to_packet().to_text());
        }
        for e in &self.executions {
            h.update(e.to_packet().to_text());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Imports raw packet files from an off-line directory (files named
    /// `_comp`, `_run`, `*.pk`). Returns the merge statistics.
    pub fn import_packets(&mut self, dir: &Path) -> Result<MergeStats, RepoError> {
        let mut names: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(storage(dir))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| {
                p.is_file()
                    && p.file_name().is_some_and(|n| {
                        let n = n.to_string_lossy();
                        n == "_comp" || n == "_run" || n.ends_with(".pk")
                    })
            })
            .collect();
        names.sort();
        let mut entities = Vec::new();
        let mut compilations = Vec::new();
        let mut executions = Vec::new();
        for path in names {
            let text = fs::read_to_string(&path).map_err(storage(&path))?;
            let corrupt = |source| RepoError::Corrupt {
                file: path.clone(),
                source,
            };
            for packet in parse_stream(&text).map_err(corrupt)? {
                if packet.contains("ENTITY_ID") {
                    entities.push(Entity::from_packet(&packet).map_err(corrupt)?);
                    continue;
                }
                match Record::from_packet(&packet) {
                    Ok(Record::Compilation(c)) => compilations.push(c),
                    Ok(Record::Execution(e)) => executions.push(e),
                    Err(e) => debug!("{}: skipping packet: {e}", path.display()),
                }
            }
        }
        executions.sort_by_key(|e| !e.is_reference());
        let mut stats = MergeStats::default();
        for e in &entities {
            stats += self.merge_entity(e)?;
        }
        for c in compilations {
            stats += self.merge_record(Record::Compilation(c))?;
        }
        for e in executions {
            stats += self.merge_record(Record::Execution(e))?;
        }
        Ok(stats)
    }
}

/// Merges `source` into `destination`.
pub fn merge(source: &Repository, destination: &mut Repository) -> Result<MergeStats, RepoError> {
    destination.merge_from(source)
}
