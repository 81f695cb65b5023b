use std::fmt;
use std::str::FromStr;

/// How repeated run times are reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregator {
    Min,
    #[default]
    Median,
    Mean,
}

impl Aggregator {
    /// `None` for an empty slice.
    pub fn apply(self, values: &[f64]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        Some(match self {
            Aggregator::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            Aggregator::Median => median(values)?,
            Aggregator::Mean => values.iter().sum::<f64>() / values.len() as f64,
        })
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::Min => "min",
            Aggregator::Median => "median",
            Aggregator::Mean => "mean",
        })
    }
}

impl FromStr for Aggregator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min" => Ok(Aggregator::Min),
            "median" => Ok(Aggregator::Median),
            "mean" => Ok(Aggregator::Mean),
            _ => Err(format!("unknown aggregator {s:?} (min | median | mean)")),
        }
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

/// Spread of repeated measurements relative to their median: `(max - min) / median`.
pub fn dispersion(values: &[f64]) -> Option<f64> {
    let m = median(values)?;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if m == 0.0 {
        return Some(if max == min { 0.0 } else { f64::INFINITY });
    }
    Some((max - min) / m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregators() {
        let v = [10.0, 10.2, 9.8];
        assert_eq!(Aggregator::Median.apply(&v), Some(10.0));
        assert_eq!(Aggregator::Min.apply(&v), Some(9.8));
        assert!((Aggregator::Mean.apply(&v).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(Aggregator::Median.apply(&[10.0, 15.0]), Some(12.5));
        assert_eq!(Aggregator::Median.apply(&[]), None);
    }

    #[test]
    fn dispersion_is_range_over_median() {
        assert_eq!(dispersion(&[10.0, 10.0, 10.0]), Some(0.0));
        assert!((dispersion(&[10.0, 10.2, 9.8]).unwrap() - 0.04).abs() < 1e-12);
        assert!((dispersion(&[10.0, 15.0]).unwrap() - 0.4).abs() < 1e-12);
    }
}
