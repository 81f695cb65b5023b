use std::fmt;
use std::num::NonZeroU128;
use std::str::FromStr;

use chrono::{DateTime, Local};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Globally unique record identifier, rendered as a decimal string.
///
/// Freshly issued ids use the full 128-bit range; shorter decimal ids such as
/// `19293849477085514` are accepted when parsing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(NonZeroU128);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdError {
    #[error("entity id must be a decimal number, got {0:?}")]
    NotDecimal(String),
    #[error("entity id must be nonzero")]
    Zero,
}

impl EntityId {
    pub fn new(value: u128) -> Option<Self> {
        NonZeroU128::new(value).map(Self)
    }

    pub fn get(self) -> u128 {
        self.0.get()
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            if let Some(id) = Self::new(rng.gen()) {
                return id;
            }
        }
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for EntityId {
    type Err = IdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(IdError::NotDecimal(s.to_string()));
        }
        let value: u128 = s.parse().map_err(|_| IdError::NotDecimal(s.to_string()))?;
        Self::new(value).ok_or(IdError::Zero)
    }
}

/// `DATE=` / `TIME=` pair as written into packets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timestamp {
    pub date: String,
    pub time: String,
}

impl Timestamp {
    fn from_datetime<Tz: chrono::TimeZone>(dt: &DateTime<Tz>) -> Self
    where
        Tz::Offset: fmt::Display,
    {
        Self {
            date: dt.format("%Y-%m-%d").to_string(),
            time: dt.format("%H:%M:%S").to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Clock {
    System,
    /// Deterministic clock advancing one second per reading.
    Stepped {
        next: i64,
    },
}

/// Issues ids and timestamps for new records.
///
/// A seeded stamper with a stepped clock makes repository contents
/// reproducible byte for byte.
#[derive(Debug, Clone)]
pub struct Stamper {
    rng: ChaCha8Rng,
    clock: Clock,
}

/// 2009-06-04T14:06:47Z, a fixed epoch for stepped clocks.
pub const STEPPED_EPOCH: i64 = 1_244_124_407;

impl Stamper {
    pub fn from_entropy() -> Self {
        Self {
            rng: ChaCha8Rng::from_entropy(),
            clock: Clock::System,
        }
    }

    pub fn seeded(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            clock: Clock::Stepped {
                next: STEPPED_EPOCH,
            },
        }
    }

    pub fn next_id(&mut self) -> EntityId {
        EntityId::random(&mut self.rng)
    }

    pub fn now(&mut self) -> Timestamp {
        match &mut self.clock {
            Clock::System => Timestamp::from_datetime(&Local::now()),
            Clock::Stepped { next } => {
                let secs = *next;
                *next += 1;
                let dt = DateTime::from_timestamp(secs, 0).expect("stepped clock in range");
                Timestamp::from_datetime(&dt)
            }
        }
    }

    /// ISO-8601 timestamp for repository metadata.
    pub fn now_iso(&mut self) -> String {
        let ts = self.now();
        format!("{}T{}", ts.date, ts.time)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_short_decimal_ids() {
        let id: EntityId = "19293849477085514".parse().unwrap();
        assert_eq!(id.get(), 19293849477085514);
        assert_eq!(id.to_string(), "19293849477085514");
    }

    #[test]
    fn rejects_zero_and_garbage() {
        assert_eq!("0".parse::<EntityId>(), Err(IdError::Zero));
        assert!("-5".parse::<EntityId>().is_err());
        assert!("12a".parse::<EntityId>().is_err());
        assert!("".parse::<EntityId>().is_err());
        // one past u128::MAX
        assert!("340282366920938463463374607431768211456"
            .parse::<EntityId>()
            .is_err());
    }

    #[test]
    fn seeded_stamper_is_reproducible() {
        let mut a = Stamper::seeded(7);
        let mut b = Stamper::seeded(7);
        assert_eq!(a.next_id(), b.next_id());
        assert_eq!(a.now(), b.now());
        let t = Stamper::seeded(1).now();
        assert_eq!(t.date, "2009-06-04");
        assert_eq!(t.time, "14:06:47");
    }
}
