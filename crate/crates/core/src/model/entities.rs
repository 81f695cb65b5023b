use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use super::features::{FeatureKind, FeatureVector};
use super::ids::EntityId;
use crate::packet::{Packet, PacketError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DescriptorError {
    #[error("descriptor name must not be empty")]
    EmptyName,
    #[error("invocation template is missing the {0} placeholder")]
    MissingPlaceholder(&'static str),
    #[error("dataset numbers must run 1..{expected} without gaps, found {found}")]
    DatasetNumbering { expected: usize, found: u32 },
    #[error("dataset {0}: loop wrapper bound must be positive")]
    ZeroLoopBound(u32),
    #[error("field {0} must be a single line")]
    MultiLine(&'static str),
}

fn single_line(field: &'static str, value: &str) -> Result<(), DescriptorError> {
    if value.contains(['\n', '\r']) {
        return Err(DescriptorError::MultiLine(field));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityKind {
    Platform,
    Environment,
    Compiler,
    Program,
    Runtime,
}

impl EntityKind {
    pub const ALL: [EntityKind; 5] = [
        EntityKind::Platform,
        EntityKind::Environment,
        EntityKind::Compiler,
        EntityKind::Program,
        EntityKind::Runtime,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Platform => "platform",
            EntityKind::Environment => "environment",
            EntityKind::Compiler => "compiler",
            EntityKind::Program => "program",
            EntityKind::Runtime => "runtime",
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown entity kind {s:?}"))
    }
}

/// Platform, software environment or runtime environment description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemDescriptor {
    pub name: String,
    pub notes: String,
}

pub type PlatformDescriptor = SystemDescriptor;

impl SystemDescriptor {
    pub fn new(name: impl Into<String>, notes: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            notes: notes.into(),
        }
    }
}

/// Placeholders an invocation template must contain.
pub const TEMPLATE_SOURCES: &str = "{sources}";
pub const TEMPLATE_OUTPUT: &str = "{output}";
pub const TEMPLATE_FLAGS: &str = "{flags}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompilerDescriptor {
    /// Descriptive name such as `milepostgcc44`.
    pub name: String,
    /// Shell command, e.g. `gcc {flags} -o {output} {sources}`.
    pub invocation_template: String,
    pub flag_space_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub number: u32,
    pub command_line: String,
    pub loop_wrapper_bound: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgramDescriptor {
    pub name: String,
    pub source_dir: PathBuf,
    pub datasets: Vec<DatasetEntry>,
    pub features: Option<FeatureVector>,
}

impl ProgramDescriptor {
    pub fn dataset_count(&self) -> usize {
        self.datasets.len()
    }

    pub fn dataset(&self, number: u32) -> Option<&DatasetEntry> {
        self.datasets.iter().find(|d| d.number == number)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Descriptor {
    Platform(SystemDescriptor),
    Environment(SystemDescriptor),
    Compiler(CompilerDescriptor),
    Program(ProgramDescriptor),
    Runtime(SystemDescriptor),
}

impl Descriptor {
    pub fn kind(&self) -> EntityKind {
        match self {
            Descriptor::Platform(_) => EntityKind::Platform,
            Descriptor::Environment(_) => EntityKind::Environment,
            Descriptor::Compiler(_) => EntityKind::Compiler,
            Descriptor::Program(_) => EntityKind::Program,
            Descriptor::Runtime(_) => EntityKind::Runtime,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Descriptor::Platform(d) | Descriptor::Environment(d) | Descriptor::Runtime(d) => {
                &d.name
            }
            Descriptor::Compiler(d) => &d.name,
            Descriptor::Program(d) => &d.name,
        }
    }

    pub fn validate(&self) -> Result<(), DescriptorError> {
        if self.name().trim().is_empty() {
            return Err(DescriptorError::EmptyName);
        }
        single_line("NAME", self.name())?;
        match self {
            Descriptor::Platform(d) | Descriptor::Environment(d) | Descriptor::Runtime(d) => {
                single_line("NOTES", &d.notes)
            }
            Descriptor::Compiler(c) => {
                single_line("INVOCATION_TEMPLATE", &c.invocation_template)?;
                single_line("FLAG_SPACE_REF", &c.flag_space_ref)?;
                for p in [TEMPLATE_SOURCES, TEMPLATE_OUTPUT, TEMPLATE_FLAGS] {
                    if !c.invocation_template.contains(p) {
                        return Err(DescriptorError::MissingPlaceholder(p));
                    }
                }
                Ok(())
            }
            Descriptor::Program(p) => {
                single_line("SOURCE_DIR", &p.source_dir.to_string_lossy())?;
                for (i, d) in p.datasets.iter().enumerate() {
                    if d.number as usize != i + 1 {
                        return Err(DescriptorError::DatasetNumbering {
                            expected: p.datasets.len(),
                            found: d.number,
                        });
                    }
                    if d.loop_wrapper_bound == 0 {
                        return Err(DescriptorError::ZeroLoopBound(d.number));
                    }
                    single_line("COMMAND_LINE", &d.command_line)?;
                }
                Ok(())
            }
        }
    }

    pub fn as_program(&self) -> Option<&ProgramDescriptor> {
        match self {
            Descriptor::Program(p) => Some(p),
            _ => None,
        }
    }

    pub fn as_compiler(&self) -> Option<&CompilerDescriptor> {
        match self {
            Descriptor::Compiler(c) => Some(c),
            _ => None,
        }
    }
}

/// A registered descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub id: EntityId,
    pub descriptor: Descriptor,
}

impl Entity {
    pub fn kind(&self) -> EntityKind {
        self.descriptor.kind()
    }

    /// Packet without the `ENTITY_ID` line; used for content deduplication.
    pub fn content_packet(descriptor: &Descriptor) -> Packet {
        let mut p = Packet::new().with("ENTITY_KIND", descriptor.kind().as_str());
        p.put("NAME", descriptor.name());
        match descriptor {
            Descriptor::Platform(d) | Descriptor::Environment(d) | Descriptor::Runtime(d) => {
                p.put("NOTES", d.notes.as_str());
            }
            Descriptor::Compiler(c) => {
                p.put("INVOCATION_TEMPLATE", c.invocation_template.as_str());
                p.put("FLAG_SPACE_REF", c.flag_space_ref.as_str());
            }
            Descriptor::Program(prog) => {
                p.put("SOURCE_DIR", prog.source_dir.to_string_lossy());
                p.put("DATASET_COUNT", prog.datasets.len().to_string());
                for d in &prog.datasets {
                    p.put(
                        &format!("DATASET_{}_COMMAND_LINE", d.number),
                        d.command_line.as_str(),
                    );
                    p.put(
                        &format!("DATASET_{}_LOOP_WRAPPER_BOUND", d.number),
                        d.loop_wrapper_bound.to_string(),
                    );
                }
                if let Some(f) = &prog.features {
                    p.put(f.kind().packet_key(), f.to_list());
                    p.put("PASS", f.anchor_pass());
                }
            }
        }
        p
    }

    pub fn to_packet(&self) -> Packet {
        let content = Self::content_packet(&self.descriptor);
        let mut p = Packet::new().with("ENTITY_ID", self.id.to_string());
        for (k, v) in content.iter() {
            p.put(k, v);
        }
        p
    }

    pub fn from_packet(p: &Packet) -> Result<Self, PacketError> {
        let id: EntityId = p.parse_required("ENTITY_ID")?;
        Ok(Entity {
            id,
            descriptor: Descriptor::from_packet(p)?,
        })
    }
}

impl Descriptor {
    /// Parses the content fields of an entity packet; `ENTITY_ID` is ignored.
    pub fn from_packet(p: &Packet) -> Result<Self, PacketError> {
        let kind: EntityKind = p.parse_required("ENTITY_KIND")?;
        let name = p.require("NAME")?.to_string();
        let notes = || p.get("NOTES").unwrap_or_default().to_string();
        let descriptor = match kind {
            EntityKind::Platform => Descriptor::Platform(SystemDescriptor {
                name,
                notes: notes(),
            }),
            EntityKind::Environment => Descriptor::Environment(SystemDescriptor {
                name,
                notes: notes(),
            }),
            EntityKind::Runtime => Descriptor::Runtime(SystemDescriptor {
                name,
                notes: notes(),
            }),
            EntityKind::Compiler => Descriptor::Compiler(CompilerDescriptor {
                name,
                invocation_template: p.require("INVOCATION_TEMPLATE")?.to_string(),
                flag_space_ref: p.get("FLAG_SPACE_REF").unwrap_or_default().to_string(),
            }),
            EntityKind::Program => {
                let count: usize = p.parse_required("DATASET_COUNT")?;
                let mut datasets = Vec::with_capacity(count);
                for n in 1..=count as u32 {
                    datasets.push(DatasetEntry {
                        number: n,
                        command_line: p.require(&format!("DATASET_{n}_COMMAND_LINE"))?.to_string(),
                        loop_wrapper_bound: p
                            .parse_required(&format!("DATASET_{n}_LOOP_WRAPPER_BOUND"))?,
                    });
                }
                let mut features = None;
                for kind in [FeatureKind::Static, FeatureKind::Dynamic] {
                    if let Some(raw) = p.get(kind.packet_key()) {
                        let v = FeatureVector::parse(kind, raw)
                            .map_err(|e| PacketError::invalid(kind.packet_key(), raw, e))?;
                        features = Some(v.with_anchor_pass(p.get("PASS").unwrap_or_default()));
                    }
                }
                Descriptor::Program(ProgramDescriptor {
                    name,
                    source_dir: PathBuf::from(p.get("SOURCE_DIR").unwrap_or_default()),
                    datasets,
                    features,
                })
            }
        };
        descriptor
            .validate()
            .map_err(|e| PacketError::invalid("ENTITY_KIND", kind.as_str(), e))?;
        Ok(descriptor)
    }

    pub fn to_packet(&self) -> Packet {
        Entity::content_packet(self)
    }
}
