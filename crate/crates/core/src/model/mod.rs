//! Domain types mirroring the optimization database schema.

mod case;
mod entities;
mod features;
mod flags;
mod ids;
mod records;
pub mod stats;

pub(crate) use case::build_case;
#[cfg(test)]
pub(crate) use case::fixtures;
pub use case::{derive_case, CaseError, OptimizationCase};
pub use entities::{
    CompilerDescriptor, DatasetEntry, Descriptor, DescriptorError, Entity, EntityKind,
    PlatformDescriptor, ProgramDescriptor, SystemDescriptor, TEMPLATE_FLAGS, TEMPLATE_OUTPUT,
    TEMPLATE_SOURCES,
};
pub use features::{FeatureError, FeatureKind, FeatureVector};
pub use flags::{is_base_level, FlagCombination, FlagError};
pub use ids::{Clock, EntityId, IdError, Stamper, Timestamp, STEPPED_EPOCH};
pub use records::{
    CompilationRecord, ExecutionRecord, FeatureRecord, PassesRecord, ProfileEntry, Record,
    RecordError,
};
pub use stats::Aggregator;
