//! Information packets: blocks of `KEY=VALUE` lines separated by blank lines.
//!
//! This is the single text format used for local packet files (`_comp`,
//! `_run`, ...), repository streams, definition files and the prediction
//! service wire protocol. Values are taken verbatim after the first `=`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PacketError {
    #[error("malformed line {line}: {text:?}")]
    MalformedLine { line: usize, text: String },
    #[error("missing required key {0}")]
    MissingRequiredKey(String),
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("invalid value for {key}: {value:?} ({reason})")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
}

impl PacketError {
    pub fn invalid(key: &str, value: &str, reason: impl fmt::Display) -> Self {
        PacketError::InvalidValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        }
    }
}

/// The four packet shapes emitted by the compile and run tools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PacketKind {
    Compilation,
    Passes,
    Features,
    Execution,
}

impl PacketKind {
    /// Local file name used for packets of this kind.
    pub fn local_filename(self) -> &'static str {
        match self {
            PacketKind::Compilation => "_comp",
            PacketKind::Passes => "_comp_passes",
            PacketKind::Features => "_prog_feat",
            PacketKind::Execution => "_run",
        }
    }
}

/// Ordered list of fields with unique keys.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Packet {
    fields: Vec<(String, String)>,
}

pub fn is_valid_key(key: &str) -> bool {
    let mut chars = key.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_uppercase())
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

/// Six decimals, the precision used for every float field.
pub fn fmt_f64(value: f64) -> String {
    format!("{value:.6}")
}

/// Rounds to the precision that survives a text round-trip.
pub fn quantize(value: f64) -> f64 {
    (value * 1e6).round() / 1e6
}

impl Packet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: &str, value: impl Into<String>) -> Result<(), PacketError> {
        if self.contains(key) {
            return Err(PacketError::DuplicateKey(key.to_string()));
        }
        self.fields.push((key.to_string(), value.into()));
        Ok(())
    }

    /// Appends a field whose key is known to be fresh.
    ///
    /// Panics on a duplicate key: callers only use this while serializing
    /// typed records whose keys are fixed.
    pub fn put(&mut self, key: &str, value: impl Into<String>) {
        self.push(key, value)
            .unwrap_or_else(|e| panic!("serializer emitted {e}"));
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.put(key, value);
        self
    }

    /// Replaces an existing value or appends a new field.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        match self.fields.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value.into(),
            None => self.fields.push((key.to_string(), value.into())),
        }
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        let pos = self.fields.iter().position(|(k, _)| k == key)?;
        Some(self.fields.remove(pos).1)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.fields.iter().any(|(k, _)| k == key)
    }

    pub fn require(&self, key: &str) -> Result<&str, PacketError> {
        self.get(key)
            .ok_or_else(|| PacketError::MissingRequiredKey(key.to_string()))
    }

    pub fn parse_required<T>(&self, key: &str) -> Result<T, PacketError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        let raw = self.require(key)?;
        raw.trim()
            .parse()
            .map_err(|e| PacketError::invalid(key, raw, e))
    }

    pub fn parse_optional<T>(&self, key: &str) -> Result<Option<T>, PacketError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(raw) if raw.trim().is_empty() => Ok(None),
            Some(raw) => raw
                .trim()
                .parse()
                .map(Some)
                .map_err(|e| PacketError::invalid(key, raw, e)),
        }
    }

    /// `1`/`0` boolean fields.
    pub fn parse_flag(&self, key: &str) -> Result<bool, PacketError> {
        match self.require(key)?.trim() {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(PacketError::invalid(key, other, "expected 0 or 1")),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.fields.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    /// Infers which of the four tool packets this is from its key set.
    pub fn kind(&self) -> Result<PacketKind, PacketError> {
        let has = |k: &str| self.contains(k);
        if has("RUN_ID") || has("RUN_ID_ASSOCIATE") || has("OUTPUT_CORRECT") || has("RUN_TIME") {
            self.require("RUN_ID")?;
            return Ok(PacketKind::Execution);
        }
        if has("PASSES") {
            self.require("COMPILE_ID")?;
            return Ok(PacketKind::Passes);
        }
        if has("STATIC_FEATURE_VECTOR") || has("PASS") {
            self.require("COMPILE_ID")?;
            return Ok(PacketKind::Features);
        }
        if has("COMPILE_ID")
            || has("COMPILE_TIME")
            || has("BIN_SIZE")
            || has("OBJ_MD5CRC")
            || has("OPT_FLAGS")
        {
            self.require("COMPILE_ID")?;
            return Ok(PacketKind::Compilation);
        }
        Err(PacketError::MissingRequiredKey("COMPILE_ID".into()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.fields {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for Packet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn parse_line(line_no: usize, line: &str) -> Result<(&str, &str), PacketError> {
    let malformed = || PacketError::MalformedLine {
        line: line_no,
        text: line.to_string(),
    };
    let (key, value) = line.split_once('=').ok_or_else(malformed)?;
    if !is_valid_key(key) {
        return Err(malformed());
    }
    Ok((key, value))
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .enumerate()
        .map(|(i, l)| (i + 1, l))
}

/// Parses the fields of a single packet without inferring its kind.
pub fn parse_fields(text: &str) -> Result<Packet, PacketError> {
    let mut packet = Packet::new();
    let mut ended = false;
    for (no, line) in lines(text) {
        if line.is_empty() {
            ended = !packet.is_empty();
            continue;
        }
        if ended {
            return Err(PacketError::MalformedLine {
                line: no,
                text: format!("second packet starts here: {line}"),
            });
        }
        let (k, v) = parse_line(no, line)?;
        packet.push(k, v)?;
    }
    Ok(packet)
}

/// Parses one packet and classifies it.
pub fn parse_packet(text: &str) -> Result<(PacketKind, Packet), PacketError> {
    let packet = parse_fields(text)?;
    let kind = packet.kind()?;
    Ok((kind, packet))
}

/// Parses a stream of blank-line separated packets.
pub fn parse_stream(text: &str) -> Result<Vec<Packet>, PacketError> {
    let mut packets = Vec::new();
    let mut current = Packet::new();
    for (no, line) in lines(text) {
        if line.is_empty() {
            if !current.is_empty() {
                packets.push(std::mem::take(&mut current));
            }
            continue;
        }
        let (k, v) = parse_line(no, line)?;
        current.push(k, v)?;
    }
    if !current.is_empty() {
        packets.push(current);
    }
    Ok(packets)
}

/// Parses `KEY=VALUE` lines allowing a key to repeat (definition files with
/// one line per item). Blank lines and `#` comments are skipped.
pub fn parse_repeated(text: &str) -> Result<Vec<(String, String)>, PacketError> {
    let mut out = Vec::new();
    for (no, line) in lines(text) {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = parse_line(no, line)?;
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Serializes packets as a stream; every packet is followed by a blank line.
pub fn write_stream<'a>(packets: impl IntoIterator<Item = &'a Packet>) -> String {
    let mut out = String::new();
    for p in packets {
        out.push_str(&p.to_text());
        out.push('\n');
    }
    out
}

/// Splits `a=1, b=2` style lists into trimmed name/value pairs.
pub fn split_assignments(raw: &str) -> impl Iterator<Item = Result<(&str, &str), String>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            item.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .filter(|(k, _)| !k.is_empty())
                .ok_or_else(|| format!("expected name=value, got {item:?}"))
        })
}
