//! Global L2 budget allocation.
//!
//! Maximize `sum_i |delta_i| * eps_i` subject to `sum_i eps_i^2 <= C` and
//! `eps_i >= 0`. Stationarity of the Lagrangian gives `eps_i = |delta_i| / (2 lambda)`;
//! spending the whole budget fixes `lambda = |delta|_2 / (2 sqrt(C))`, hence
//! `eps_i = sqrt(C) * |delta_i| / |delta|_2`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Slack allowed when declaring a plan feasible.
pub const FEASIBILITY_SLACK: f64 = 1e-9;
const ORACLE_MAX_ITERS: usize = 100_000;
const BISECTION_ITERS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub epsilons: Vec<f64>,
    pub lambda: f64,
    pub c_total: f64,
    pub objective_value: f64,
    pub feasible: bool,
}

impl AllocationPlan {
    fn build(abs_deltas: &[f64], epsilons: Vec<f64>, lambda: f64, c_total: f64) -> Self {
        let objective_value = objective(abs_deltas, &epsilons);
        let spent: f64 = epsilons.iter().map(|e| e * e).sum();
        Self {
            feasible: spent <= c_total + FEASIBILITY_SLACK && epsilons.iter().all(|e| *e >= 0.0),
            epsilons,
            lambda,
            c_total,
            objective_value,
        }
    }

    pub fn spent(&self) -> f64 {
        self.epsilons.iter().map(|e| e * e).sum()
    }
}

/// `sum_i |delta_i| * eps_i`.
pub fn objective(abs_deltas: &[f64], epsilons: &[f64]) -> f64 {
    abs_deltas.iter().zip(epsilons).map(|(d, e)| d * e).sum()
}

fn check_inputs(abs_deltas: &[f64], c_total: f64) -> Result<()> {
    if abs_deltas.is_empty() {
        return Err(LabError::Argument("abs_deltas must be non-empty".into()));
    }
    if !(c_total > 0.0 && c_total.is_finite()) {
        return Err(LabError::Argument(format!(
            "c_total must be positive and finite, got {c_total}"
        )));
    }
    if let Some(i) = abs_deltas.iter().position(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(LabError::Argument(format!(
            "abs_deltas[{i}] = {} is not a finite non-negative number",
            abs_deltas[i]
        )));
    }
    Ok(())
}

/// Overflow-safe Euclidean norm.
fn l2_norm(xs: &[f64]) -> f64 {
    let max = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return 0.0;
    }
    max * xs.iter().map(|x| (x / max).powi(2)).sum::<f64>().sqrt()
}

/// Closed-form optimum. An all-zero input yields the zero allocation with `lambda = 0`.
pub fn global_allocate(abs_deltas: &[f64], c_total: f64) -> Result<AllocationPlan> {
    check_inputs(abs_deltas, c_total)?;
    let norm = l2_norm(abs_deltas);
    if norm == 0.0 {
        return Ok(AllocationPlan::build(
            abs_deltas,
            vec![0.0; abs_deltas.len()],
            0.0,
            c_total,
        ));
    }
    let radius = c_total.sqrt();
    let scale = radius / norm;
    let epsilons = abs_deltas.iter().map(|d| d * scale).collect();
    Ok(AllocationPlan::build(abs_deltas, epsilons, norm / (2.0 * radius), c_total))
}

/// Projected gradient ascent from the uniform feasible point. Exists to cross-check
/// [`global_allocate`]; stops once both the objective change and the largest
/// coordinate change fall below `tol`.
pub fn numerical_allocate_oracle(
    abs_deltas: &[f64],
    c_total: f64,
    tol: f64,
) -> Result<AllocationPlan> {
    check_inputs(abs_deltas, c_total)?;
    if !(tol > 0.0) {
        return Err(LabError::Argument("tol must be positive".into()));
    }
    let n = abs_deltas.len();
    let radius = c_total.sqrt();
    let max_delta = abs_deltas.iter().fold(0.0f64, |m, d| m.max(*d));
    if max_delta == 0.0 {
        return Ok(AllocationPlan::build(abs_deltas, vec![0.0; n], 0.0, c_total));
    }
    let step = radius / max_delta;
    let mut eps = vec![radius / (n as f64).sqrt(); n];
    let mut obj = objective(abs_deltas, &eps);
    for _ in 0..ORACLE_MAX_ITERS {
        let mut next: Vec<f64> = eps
            .iter()
            .zip(abs_deltas)
            .map(|(e, d)| (e + step * d).max(0.0))
            .collect();
        let norm = l2_norm(&next);
        if norm > radius {
            next.iter_mut().for_each(|e| *e *= radius / norm);
        }
        let next_obj = objective(abs_deltas, &next);
        let moved = next
            .iter()
            .zip(&eps)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let settled = (next_obj - obj).abs() <= tol * obj.abs().max(1.0) && moved <= tol;
        eps = next;
        obj = next_obj;
        if settled {
            let spent: f64 = eps.iter().map(|e| e * e).sum();
            // Least-squares fit of the stationarity condition |delta_i| = 2 lambda eps_i.
            let lambda = obj / (2.0 * spent);
            return Ok(AllocationPlan::build(abs_deltas, eps, lambda, c_total));
        }
    }
    Err(LabError::Numerical(format!(
        "projected gradient allocation did not settle in {ORACLE_MAX_ITERS} iterations"
    )))
}

/// Water-filling under a per-sample cap: `eps_i = min(cap, |delta_i| / (2 lambda))`
/// with `lambda` chosen so the budget `min(C, n_nonzero * cap^2)` is spent.
pub fn allocate_with_caps(abs_deltas: &[f64], c_total: f64, cap: f64) -> Result<AllocationPlan> {
    check_inputs(abs_deltas, c_total)?;
    if !(cap > 0.0) {
        return Err(LabError::Argument(format!("cap must be positive, got {cap}")));
    }
    let nonzero: Vec<f64> = abs_deltas.iter().copied().filter(|d| *d > 0.0).collect();
    if nonzero.is_empty() {
        return global_allocate(abs_deltas, c_total);
    }
    let min_nz = nonzero.iter().copied().fold(f64::INFINITY, f64::min);
    if nonzero.len() as f64 * cap * cap <= c_total {
        let eps = abs_deltas.iter().map(|d| if *d > 0.0 { cap } else { 0.0 }).collect();
        // Largest multiplier at which every nonzero entry still saturates.
        return Ok(AllocationPlan::build(abs_deltas, eps, min_nz / (2.0 * cap), c_total));
    }
    let spent_at = |lambda: f64| -> f64 {
        nonzero
            .iter()
            .map(|d| (d / (2.0 * lambda)).min(cap).powi(2))
            .sum()
    };
    // Below `lo` every entry saturates (spend > C); at the uncapped optimum spend <= C.
    let mut lo = min_nz / (2.0 * cap);
    let mut hi = l2_norm(&nonzero) / (2.0 * c_total.sqrt());
    if !(spent_at(lo) >= c_total && spent_at(hi) <= c_total * (1.0 + 1e-12)) {
        return Err(LabError::Numerical("could not bracket the water level".into()));
    }
    for _ in 0..BISECTION_ITERS {
        let mid = (lo * hi).sqrt();
        if spent_at(mid) > c_total {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    let mut lambda = hi;
    // Exact water level for the capped set identified by bisection.
    let capped: Vec<bool> = abs_deltas.iter().map(|d| d / (2.0 * lambda) >= cap).collect();
    let k = capped.iter().filter(|c| **c).count() as f64;
    let rest: Vec<f64> = abs_deltas
        .iter()
        .zip(&capped)
        .filter(|(_, c)| !**c)
        .map(|(d, _)| *d)
        .collect();
    let remaining = c_total - k * cap * cap;
    let rest_norm = l2_norm(&rest);
    if remaining > 0.0 && rest_norm > 0.0 {
        let exact = rest_norm / (2.0 * remaining.sqrt());
        let consistent = abs_deltas.iter().zip(&capped).all(|(d, c)| {
            let e = d / (2.0 * exact);
            if *c {
                e >= cap * (1.0 - 1e-9)
            } else {
                e <= cap * (1.0 + 1e-9)
            }
        });
        if consistent {
            lambda = exact;
        }
    }
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(LabError::Numerical("water level bisection failed".into()));
    }
    let eps = abs_deltas
        .iter()
        .map(|d| (d / (2.0 * lambda)).min(cap))
        .collect();
    Ok(AllocationPlan::build(abs_deltas, eps, lambda, c_total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn three_four_five() {
        let p = global_allocate(&[3.0, 4.0], 1.0).unwrap();
        close(&p.epsilons, &[0.6, 0.8], 1e-15);
        assert!((p.lambda - 2.5).abs() < 1e-15);
        assert!((p.objective_value - 5.0).abs() < 1e-14);
        assert!(p.feasible);
        let o = numerical_allocate_oracle(&[3.0, 4.0], 1.0, 1e-14).unwrap();
        close(&o.epsilons, &p.epsilons, 1e-6);
    }

    #[test]
    fn symmetric_and_single_support() {
        let p = global_allocate(&[1.0; 4], 4.0).unwrap();
        close(&p.epsilons, &[1.0; 4], 1e-15);
        let p = global_allocate(&[0.0, 0.0, 5.0], 9.0).unwrap();
        assert_eq!(p.epsilons, vec![0.0, 0.0, 3.0]);
        for input in [(vec![1.0; 4], 4.0), (vec![0.0, 0.0, 5.0], 9.0)] {
            let o = numerical_allocate_oracle(&input.0, input.1, 1e-14).unwrap();
            close(&o.epsilons, &global_allocate(&input.0, input.1).unwrap().epsilons, 1e-6);
        }
        let o = numerical_allocate_oracle(&[5.0], 4.0, 1e-14).unwrap();
        close(&o.epsilons, &[2.0], 1e-12);
    }

    #[test]
    fn degenerate_zero_input() {
        let p = global_allocate(&[0.0, 0.0], 2.0).unwrap();
        assert_eq!(p.epsilons, vec![0.0, 0.0]);
        assert_eq!(p.lambda, 0.0);
        assert!(p.feasible);
        assert_eq!(numerical_allocate_oracle(&[0.0], 1.0, 1e-9).unwrap().epsilons, vec![0.0]);
    }

    #[test]
    fn argument_errors() {
        assert!(global_allocate(&[1.0], 0.0).is_err());
        assert!(global_allocate(&[1.0], -1.0).is_err());
        assert!(global_allocate(&[f64::NAN], 1.0).is_err());
        assert!(global_allocate(&[-1.0], 1.0).is_err());
        assert!(global_allocate(&[], 1.0).is_err());
        assert!(numerical_allocate_oracle(&[1.0], 1.0, 0.0).is_err());
        assert!(allocate_with_caps(&[1.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn huge_deltas_do_not_overflow() {
        let p = global_allocate(&[1e200, 1e200], 2.0).unwrap();
        close(&p.epsilons, &[1.0, 1.0], 1e-12);
    }

    #[test]
    fn cap_that_never_binds_matches_closed_form() {
        let d = [0.3, 2.0, 1.1, 0.0, 4.2];
        let c = 3.0;
        let free = global_allocate(&d, c).unwrap();
        let capped = allocate_with_caps(&d, c, c.sqrt()).unwrap();
        close(&capped.epsilons, &free.epsilons, 1e-12);
        assert!((capped.lambda - free.lambda).abs() < 1e-12 * free.lambda);
    }

    #[test]
    fn binding_cap_three_four() {
        // Both entries saturate: 2 * 0.49 = 0.98 < 1.
        let p = allocate_with_caps(&[3.0, 4.0], 1.0, 0.7).unwrap();
        close(&p.epsilons, &[0.7, 0.7], 1e-15);
        // A partially binding cap, checked against a brute-force scan over lambda.
        let d = [3.0, 4.0, 1.0];
        let (c, cap) = (1.0, 0.7);
        let p = allocate_with_caps(&d, c, cap).unwrap();
        let spend = |l: f64| d.iter().map(|x| (x / (2.0 * l)).min(cap).powi(2)).sum::<f64>();
        let (mut lo, mut hi) = (1e-3, 1e3);
        // Brute force: geometric grid to locate the bracket, then fine linear grids.
        for _ in 0..6 {
            let grid: Vec<f64> = (0..=1000).map(|i| lo + (hi - lo) * i as f64 / 1000.0).collect();
            let j = grid.iter().position(|l| spend(*l) <= c).unwrap();
            lo = grid[j.saturating_sub(1)];
            hi = grid[j];
        }
        let brute: Vec<f64> = d.iter().map(|x| (x / (2.0 * hi)).min(cap)).collect();
        close(&p.epsilons, &brute, 1e-9);
        assert!((p.spent() - c).abs() < 1e-12);
        assert_eq!(p.epsilons[1], cap);
    }

    #[test]
    fn equal_deltas_small_cap_all_saturate() {
        let p = allocate_with_caps(&[2.0; 10], 5.0, 0.5).unwrap();
        assert!(p.epsilons.iter().all(|e| *e == 0.5));
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, f64)> {
        (
            prop::collection::vec(prop_oneof![Just(0.0), 1e-6f64..1e3], 1..60),
            1e-3f64..1e3,
        )
            .prop_filter("some nonzero", |(d, _)| d.iter().any(|x| *x > 0.0))
    }

    proptest! {
        #[test]
        fn scale_covariance((d, c) in instance(), k in 1e-3f64..1e3) {
            let base = global_allocate(&d, c).unwrap();
            let scaled: Vec<f64> = d.iter().map(|x| x * k).collect();
            let p = global_allocate(&scaled, c).unwrap();
            for (a, b) in p.epsilons.iter().zip(&base.epsilons) {
                prop_assert!((a - b).abs() <= 1e-12 * c.sqrt());
            }
            let q = global_allocate(&d, c * k).unwrap();
            for (a, b) in q.epsilons.iter().zip(&base.epsilons) {
                prop_assert!((a - b * k.sqrt()).abs() <= 1e-12 * (c * k).sqrt());
            }
        }

        #[test]
        fn budget_spent_and_kkt((d, c) in instance()) {
            let p = global_allocate(&d, c).unwrap();
            prop_assert!((p.spent() - c).abs() <= 1e-9 * c);
            for (x, e) in d.iter().zip(&p.epsilons) {
                if *x > 0.0 {
                    prop_assert!((x - 2.0 * p.lambda * e).abs() <= 1e-10 * x);
                } else {
                    prop_assert_eq!(*e, 0.0);
                }
            }
        }

        #[test]
        fn capped_plans_respect_cap_and_budget((d, c) in instance(), cap in 1e-2f64..10.0) {
            let p = allocate_with_caps(&d, c, cap).unwrap();
            let nz = d.iter().filter(|x| **x > 0.0).count() as f64;
            let target = c.min(nz * cap * cap);
            prop_assert!(p.epsilons.iter().all(|e| *e <= cap * (1.0 + 1e-12)));
            prop_assert!((p.spent() - target).abs() <= 1e-9 * target);
        }
    }
}
