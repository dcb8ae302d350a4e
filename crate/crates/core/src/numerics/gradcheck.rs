//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Largest relative error per parameter tensor.
    pub per_group: BTreeMap<String, f64>,
}

/// Compares `analytic` (indexed like `store`) against
/// `(f(θ+eps) − f(θ−eps)) / 2eps` on sampled coordinates.
///
/// Every parameter with an analytic gradient gets at least one coordinate;
/// the remaining budget up to `min_coords` is spread uniformly over those
/// tensors. Error is `|analytic − numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F, R>(
    store: &mut ParamStore,
    analytic: &[Option<Tensor>],
    mut f: F,
    eps: f64,
    min_coords: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
    R: Rng + ?Sized,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return invalid(format!("finite-difference eps {eps} outside [1e-7, 1e-3]"));
    }
    if analytic.len() != store.len() {
        return invalid("analytic gradient list does not match the parameter store");
    }
    let groups: Vec<ParamId> = store.ids().filter(|id| analytic[id.index()].is_some()).collect();
    if groups.is_empty() {
        return invalid("no parameters carry an analytic gradient");
    }
    let mut coords: Vec<(ParamId, usize)> = groups
        .iter()
        .map(|&id| (id, rng.random_range(0..store.get(id).numel())))
        .collect();
    while coords.len() < min_coords {
        let id = groups[rng.random_range(0..groups.len())];
        coords.push((id, rng.random_range(0..store.get(id).numel())));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: coords.len(),
        per_group: BTreeMap::new(),
    };
    for (id, j) in coords {
        let orig = store.get(id).data()[j];
        store.get_mut(id).data_mut()[j] = orig + eps;
        let up = f(store);
        store.get_mut(id).data_mut()[j] = orig - eps;
        let down = f(store);
        store.get_mut(id).data_mut()[j] = orig;
        let (up, down) = (up?, down?);
        let numeric = (up - down) / (2.0 * eps);
        let exact = analytic[id.index()].as_ref().expect("filtered above").data()[j];
        if !numeric.is_finite() || !exact.is_finite() {
            return Err(Error::NonFinite(format!("gradient check of {}", store.name(id))));
        }
        let err = (exact - numeric).abs() / exact.abs().max(1.0);
        report.max_rel_err = report.max_rel_err.max(err);
        let slot = report.per_group.entry(store.name(id).to_string()).or_insert(0.0);
        *slot = slot.max(err);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::from_vec(vec![3.0])).unwrap();
        let analytic = vec![Some(Tensor::from_vec(vec![6.0]))];
        let f = |s: &ParamStore| Ok(s.get(s.id("theta").unwrap()).item().powi(2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = finite_diff_check(&mut store, &analytic, f, 1e-5, 200, &mut rng).unwrap();
        assert!(r.max_rel_err < 1e-8);
        assert_eq!(r.coords_checked, 200);
        assert_eq!(store.get(store.id("theta").unwrap()).item(), 3.0);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::from_vec(vec![3.0])).unwrap();
        let analytic = vec![Some(Tensor::from_vec(vec![5.0]))];
        let f = |s: &ParamStore| Ok(s.get(s.id("theta").unwrap()).item().powi(2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = finite_diff_check(&mut store, &analytic, f, 1e-5, 1, &mut rng).unwrap();
        assert!((r.max_rel_err - 0.2).abs() < 1e-6);
    }

    #[test]
    fn eps_outside_range_and_non_finite_values_are_errors() {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::from_vec(vec![1.0])).unwrap();
        let analytic = vec![Some(Tensor::from_vec(vec![1.0]))];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(finite_diff_check(&mut store, &analytic, |_| Ok(0.0), 1e-2, 1, &mut rng).is_err());
        let r = finite_diff_check(&mut store, &analytic, |_| Ok(f64::NAN), 1e-5, 1, &mut rng);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
