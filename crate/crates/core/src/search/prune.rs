use crate::model::FlagCombination;

#[derive(Debug, Clone, PartialEq)]
pub struct PruneResult {
    pub combination: FlagCombination,
    pub metric: f64,
    pub base_metric: f64,
    pub evaluations: usize,
}

fn relative_change(value: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        if value == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        ((value - reference) / reference).abs()
    }
}

/// Removes flags of `base` one at a time, in order, keeping a removal when
/// the metric moves by less than `epsilon` (relative) from both the current
/// combination's metric and the base metric.
pub fn one_off_prune<E>(
    base: &FlagCombination,
    evaluate: impl FnMut(&FlagCombination) -> Result<f64, E>,
    epsilon: f64,
) -> Result<PruneResult, E> {
    one_off_prune_limited(base, evaluate, epsilon, usize::MAX)
}

/// As [`one_off_prune`], stopping after `max_evaluations` evaluations.
pub fn one_off_prune_limited<E>(
    base: &FlagCombination,
    mut evaluate: impl FnMut(&FlagCombination) -> Result<f64, E>,
    epsilon: f64,
    max_evaluations: usize,
) -> Result<PruneResult, E> {
    let base_metric = evaluate(base)?;
    let mut current = base.clone();
    let mut metric = base_metric;
    let mut evaluations = 1;
    for flag in base.flags() {
        if evaluations >= max_evaluations {
            break;
        }
        let candidate = current.without(flag);
        let m = evaluate(&candidate)?;
        evaluations += 1;
        if relative_change(m, metric) < epsilon && relative_change(m, base_metric) < epsilon {
            current = candidate;
            metric = m;
        }
    }
    assert!(relative_change(metric, base_metric) < epsilon || metric == base_metric);
    Ok(PruneResult {
        combination: current,
        metric,
        base_metric,
        evaluations,
    })
}
