//! Max-subtracted softmax over index groups.

/// Softmax within each group, computed as `exp(v - max_group) / Σ exp(v - max_group)`.
///
/// Entries whose group is `None` are excluded and set to 0.
pub fn grouped_softmax_values(values: &[f64], groups: &[Option<usize>]) -> Vec<f64> {
    debug_assert_eq!(values.len(), groups.len());
    let n_groups = groups.iter().flatten().max().map_or(0, |m| m + 1);
    let mut max = vec![f64::NEG_INFINITY; n_groups];
    for (v, g) in values.iter().zip(groups) {
        if let Some(p) = g {
            max[*p] = max[*p].max(*v);
        }
    }
    let mut out: Vec<f64> = values
        .iter()
        .zip(groups)
        .map(|(v, g)| g.map_or(0.0, |p| (v - max[p]).exp()))
        .collect();
    let mut total = vec![0.0; n_groups];
    for (e, g) in out.iter().zip(groups) {
        if let Some(p) = g {
            total[*p] += e;
        }
    }
    for (e, g) in out.iter_mut().zip(groups) {
        if let Some(p) = g {
            *e /= total[*p];
        }
    }
    out
}

/// Softmax of `values` within the groups given by `group_of` (one group per index).
pub fn stable_softmax_over_groups(values: &[f64], group_of: &[usize]) -> Vec<f64> {
    let groups: Vec<Option<usize>> = group_of.iter().copied().map(Some).collect();
    grouped_softmax_values(values, &groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_group_is_one() {
        assert_eq!(stable_softmax_over_groups(&[-3.7], &[0]), vec![1.0]);
    }

    #[test]
    fn equal_values_split_evenly() {
        assert_eq!(stable_softmax_over_groups(&[0.0, 0.0], &[0, 0]), vec![0.5, 0.5]);
    }

    #[test]
    fn large_magnitudes_do_not_overflow() {
        let out = stable_softmax_over_groups(&[1000.0, 1001.0], &[0, 0]);
        // logistic(±1)
        let hi = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((out[0] - (1.0 - hi)).abs() < 1e-12);
        assert!((out[1] - hi).abs() < 1e-12);
        assert!((out[0] - 0.2689).abs() < 1e-4 && (out[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn excluded_entries_are_zero() {
        let out = grouped_softmax_values(&[1.0, 5.0, 2.0], &[Some(0), None, Some(0)]);
        assert_eq!(out[1], 0.0);
        assert!((out[0] + out[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn groups_are_independent() {
        let out = stable_softmax_over_groups(&[1.0, 2.0, 7.0, 7.0, 7.0], &[1, 1, 0, 0, 0]);
        assert!((out[0] + out[1] - 1.0).abs() < 1e-15);
        for v in &out[2..] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
