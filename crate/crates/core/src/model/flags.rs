use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FlagError {
    #[error("duplicate flag {0}")]
    Duplicate(String),
    #[error("flag {0} appears both as optimization and platform flag")]
    PlatformOverlap(String),
    #[error("invalid flag {0:?}")]
    Invalid(String),
}

/// A base optimization level plus individual flags: one point of the search
/// space. Platform flags are auxiliary and never part of the canonical form.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct FlagCombination {
    base_level: String,
    flags: Vec<String>,
    platform_flags: Vec<String>,
}

fn check_token(token: &str) -> Result<(), FlagError> {
    if token.is_empty() || token.chars().any(char::is_whitespace) {
        return Err(FlagError::Invalid(token.to_string()));
    }
    Ok(())
}

/// `-O0`, `-O3`, `-Os`, `-Ofast` and similar.
pub fn is_base_level(token: &str) -> bool {
    token.starts_with("-O") && !token.contains('=')
}

impl FlagCombination {
    pub fn new(
        base_level: impl Into<String>,
        flags: Vec<String>,
        platform_flags: Vec<String>,
    ) -> Result<Self, FlagError> {
        let base_level = base_level.into();
        if !base_level.is_empty() {
            check_token(&base_level)?;
        }
        let mut seen = HashSet::new();
        for f in &flags {
            check_token(f)?;
            if !seen.insert(f.as_str()) {
                return Err(FlagError::Duplicate(f.clone()));
            }
        }
        let mut seen_platform = HashSet::new();
        for f in &platform_flags {
            check_token(f)?;
            if seen.contains(f.as_str()) {
                return Err(FlagError::PlatformOverlap(f.clone()));
            }
            if !seen_platform.insert(f.as_str()) {
                return Err(FlagError::Duplicate(f.clone()));
            }
        }
        Ok(Self {
            base_level,
            flags,
            platform_flags,
        })
    }

    pub fn level(base_level: &str) -> Self {
        Self::new(base_level, Vec::new(), Vec::new()).expect("single level is valid")
    }

    /// Parses `OPT_FLAGS` (and optionally `OPT_FLAGS_PLATFORM`) values.
    pub fn parse(opt_flags: &str, platform_flags: &str) -> Result<Self, FlagError> {
        let mut tokens = opt_flags.split_whitespace().peekable();
        let base = match tokens.peek() {
            Some(t) if is_base_level(t) => tokens.next().unwrap().to_string(),
            _ => String::new(),
        };
        let flags = tokens.map(str::to_string).collect();
        let platform = platform_flags
            .split_whitespace()
            .map(str::to_string)
            .collect();
        Self::new(base, flags, platform)
    }

    pub fn base_level(&self) -> &str {
        &self.base_level
    }

    pub fn flags(&self) -> &[String] {
        &self.flags
    }

    pub fn platform_flags(&self) -> &[String] {
        &self.platform_flags
    }

    pub fn contains(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    /// Base level followed by flags in list order.
    pub fn canonical(&self) -> String {
        std::iter::once(self.base_level.as_str())
            .filter(|s| !s.is_empty())
            .chain(self.flags.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn platform_string(&self) -> String {
        self.platform_flags.join(" ")
    }

    /// Full command-line flag list: canonical form then platform flags.
    pub fn command_line_flags(&self) -> Vec<String> {
        std::iter::once(&self.base_level)
            .filter(|s| !s.is_empty())
            .chain(&self.flags)
            .chain(&self.platform_flags)
            .cloned()
            .collect()
    }

    pub fn without(&self, flag: &str) -> Self {
        Self {
            base_level: self.base_level.clone(),
            flags: self.flags.iter().filter(|f| *f != flag).cloned().collect(),
            platform_flags: self.platform_flags.clone(),
        }
    }

    pub fn with_platform_flags(mut self, platform_flags: Vec<String>) -> Result<Self, FlagError> {
        self.platform_flags = Vec::new();
        Self::new(self.base_level, self.flags, platform_flags)
    }
}

impl fmt::Display for FlagCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}
