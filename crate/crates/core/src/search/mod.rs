//! Flag-space exploration: combination generators, one-off pruning, and
//! the exploration loop.

mod explore;
mod prune;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::driver::DriverError;
use crate::model::{FlagCombination, FlagError};
use crate::packet::{parse_repeated, PacketError};
use crate::repository::RepoError;

pub use explore::{explore, Evaluation, ExplorationConfig, ExplorationReport, Explorer};
pub use prune::{one_off_prune, one_off_prune_limited, PruneResult};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("fixed length {k} is outside 1..={available}")]
    LengthExceedsSpace { k: usize, available: usize },
    #[error("invalid flag space: {0}")]
    InvalidSpace(String),
    #[error("invalid exploration config: {0}")]
    InvalidConfig(String),
    #[error("baseline failed: {0}")]
    BaselineFailed(String),
    #[error("evaluation failed: {0}")]
    EvaluationFailed(String),
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Repository(#[from] RepoError),
    #[error(transparent)]
    Flags(#[from] FlagError),
    #[error(transparent)]
    Packet(#[from] PacketError),
}

/// A tunable flag and, optionally, the form that explicitly disables it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlagDescriptor {
    pub name: String,
    pub antonym: Option<String>,
}

impl FlagDescriptor {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            antonym: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlagSpace {
    pub base_levels: Vec<String>,
    pub flags: Vec<FlagDescriptor>,
}

impl FlagSpace {
    pub fn new(base_levels: Vec<String>, flags: Vec<FlagDescriptor>) -> Result<Self, SearchError> {
        let space = Self { base_levels, flags };
        space.validate()?;
        Ok(space)
    }

    /// Flags named `names` on a single base level.
    pub fn simple(base_level: &str, names: &[&str]) -> Result<Self, SearchError> {
        Self::new(
            vec![base_level.to_string()],
            names.iter().map(|n| FlagDescriptor::new(*n)).collect(),
        )
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.base_levels.is_empty() {
            return Err(SearchError::InvalidSpace("no base level".into()));
        }
        let mut seen = HashSet::new();
        for f in &self.flags {
            for name in std::iter::once(&f.name).chain(&f.antonym) {
                if name.is_empty() || name.chars().any(char::is_whitespace) {
                    return Err(SearchError::InvalidSpace(format!("bad flag {name:?}")));
                }
                if !seen.insert(name.as_str()) {
                    return Err(SearchError::InvalidSpace(format!("{name} listed twice")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    /// Parses `BASE_LEVEL=-O3` and `FLAG=<name> [<antonym>]` lines. Without
    /// any `BASE_LEVEL` the space uses `-O3`.
    pub fn parse(text: &str) -> Result<Self, SearchError> {
        let mut base_levels = Vec::new();
        let mut flags = Vec::new();
        for (key, value) in parse_repeated(text)? {
            match key.as_str() {
                "BASE_LEVEL" => base_levels.push(value.trim().to_string()),
                "FLAG" => {
                    let mut parts = value.split_whitespace();
                    let name = parts
                        .next()
                        .ok_or_else(|| SearchError::InvalidSpace("empty FLAG line".into()))?;
                    let antonym = parts.next().map(str::to_string);
                    if parts.next().is_some() {
                        return Err(SearchError::InvalidSpace(format!(
                            "FLAG={value}: expected '<name> [<antonym>]'"
                        )));
                    }
                    flags.push(FlagDescriptor {
                        name: name.to_string(),
                        antonym,
                    });
                }
                other => {
                    return Err(SearchError::InvalidSpace(format!("unknown key {other}")));
                }
            }
        }
        if base_levels.is_empty() {
            base_levels.push("-O3".into());
        }
        Self::new(base_levels, flags)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.base_levels {
            out.push_str(&format!("BASE_LEVEL={l}\n"));
        }
        for f in &self.flags {
            match &f.antonym {
                Some(a) => out.push_str(&format!("FLAG={} {a}\n", f.name)),
                None => out.push_str(&format!("FLAG={}\n", f.name)),
            }
        }
        out
    }

    fn pick_level(&self, rng: &mut impl Rng) -> &str {
        &self.base_levels[rng.gen_range(0..self.base_levels.len())]
    }

    fn combination(&self, level: &str, selected: &[bool], antonyms: bool) -> FlagCombination {
        let flags = self
            .flags
            .iter()
            .zip(selected)
            .filter_map(|(f, on)| match (on, &f.antonym) {
                (true, _) => Some(f.name.clone()),
                (false, Some(a)) if antonyms => Some(a.clone()),
                _ => None,
            })
            .collect();
        FlagCombination::new(level, flags, Vec::new()).expect("space validated")
    }
}

/// Exploration plugins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    UniformRandom,
    FixedLengthRandom,
    OneByOne,
    OneOffPrune,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::UniformRandom,
        Strategy::FixedLengthRandom,
        Strategy::OneByOne,
        Strategy::OneOffPrune,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            Strategy::UniformRandom => "glob-flags-rnd-uniform",
            Strategy::FixedLengthRandom => "glob-flags-rnd-fixed",
            Strategy::OneByOne => "glob-flags-one-by-one",
            Strategy::OneOffPrune => "glob-flags-one-off-rnd",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.cli_name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Strategy::ALL.iter().map(|s| s.cli_name()).collect();
                format!("unknown strategy {s:?} (one of {})", names.join(", "))
            })
    }
}

/// `count` combinations, each flag selected independently with
/// `probability`. With `antonyms`, unselected flags that have an antonym
/// contribute it.
pub fn gen_uniform_random_with(
    space: &FlagSpace,
    seed: u64,
    probability: f64,
    count: usize,
    antonyms: bool,
) -> Vec<FlagCombination> {
    let p = probability.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let level = space.pick_level(&mut rng).to_string();
            let selected: Vec<bool> = space.flags.iter().map(|_| rng.gen_bool(p)).collect();
            space.combination(&level, &selected, antonyms)
        })
        .collect()
}

pub fn gen_uniform_random(
    space: &FlagSpace,
    seed: u64,
    probability: f64,
    count: usize,
) -> Vec<FlagCombination> {
    gen_uniform_random_with(space, seed, probability, count, false)
}

/// `count` uniformly random `k`-subsets of the flags.
pub fn gen_fixed_length(
    space: &FlagSpace,
    seed: u64,
    k: usize,
    count: usize,
) -> Result<Vec<FlagCombination>, SearchError> {
    let n = space.flags.len();
    if k == 0 || k > n {
        return Err(SearchError::LengthExceedsSpace { k, available: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let level = space.pick_level(&mut rng).to_string();
            let mut selected = vec![false; n];
            for i in sample(&mut rng, n, k) {
                selected[i] = true;
            }
            space.combination(&level, &selected, false)
        })
        .collect())
}

/// Every single flag on every base level, levels outermost.
pub fn gen_one_by_one(space: &FlagSpace) -> Vec<FlagCombination> {
    let mut out = Vec::with_capacity(space.base_levels.len() * space.flags.len());
    for level in &space.base_levels {
        for f in &space.flags {
            out.push(
                FlagCombination::new(level.as_str(), vec![f.name.clone()], Vec::new())
                    .expect("space validated"),
            );
        }
    }
    out
}
