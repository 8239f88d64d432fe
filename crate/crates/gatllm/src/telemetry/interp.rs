//! Missing-cell repair via local Lagrange interpolation.

use super::TelemetrySeries;
use crate::error::{Error, Result};

/// Evaluate the Lagrange polynomial through `points` at `x`.
pub fn lagrange_eval(points: &[(f64, f64)], x: f64) -> f64 {
    let mut acc = 0.0;
    for (i, &(xi, yi)) in points.iter().enumerate() {
        let mut basis = 1.0;
        for (j, &(xj, _)) in points.iter().enumerate() {
            if i != j {
                basis *= (x - xj) / (xi - xj);
            }
        }
        acc += yi * basis;
    }
    acc
}

/// Pick up to `max_points` known samples around time `t`, balanced before and
/// after where both sides have enough; a short side donates its shortfall to
/// the other.
fn neighborhood(known: &[(usize, f64)], t: usize, max_points: usize) -> Vec<(f64, f64)> {
    let split = known.partition_point(|&(kt, _)| kt < t);
    let before = split;
    let after = known.len() - split;
    let want_before = max_points / 2;
    let want_after = max_points - want_before;
    let take_after = after.min(want_after + want_before.saturating_sub(before));
    let take_before = before.min(max_points - take_after);
    let take_after = after.min(max_points - take_before);
    known[split - take_before..split + take_after]
        .iter()
        .map(|&(kt, v)| (kt as f64, v))
        .collect()
}

/// Fill every missing cell with the Lagrange polynomial through the nearest
/// non-missing samples of its column, then clear the mask. Filled values of
/// bounded columns are clamped to the valid range so the series invariant
/// survives polynomial overshoot.
pub fn interpolate_missing(series: &TelemetrySeries, max_points: usize) -> Result<TelemetrySeries> {
    if max_points == 0 {
        return Err(Error::Config("interpolate_missing: max_points must be >= 1".into()));
    }
    let mut out = series.clone();
    let (rows, cols) = (series.rows(), series.cols());
    for j in 0..cols {
        let known: Vec<(usize, f64)> = (0..rows)
            .filter(|&t| !series.is_missing(t, j))
            .map(|t| (t, series.value(t, j)))
            .collect();
        if known.is_empty() {
            return Err(Error::Data(format!(
                "column `{}` is fully missing; cannot interpolate",
                series.schema[j].name
            )));
        }
        if known.len() == rows {
            continue;
        }
        for t in 0..rows {
            if !series.is_missing(t, j) {
                continue;
            }
            let pts = neighborhood(&known, t, max_points);
            let mut v = lagrange_eval(&pts, t as f64);
            if let Some(lo) = series.schema[j].min_valid {
                v = v.max(lo);
            }
            if let Some(hi) = series.schema[j].max_valid {
                v = v.min(hi);
            }
            out.set_value(t, j, v);
            out.set_missing(t, j, false);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::{Layer, ParameterSpec};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn one_column(values: &[Option<f64>]) -> TelemetrySeries {
        let schema = vec![ParameterSpec {
            name: "c0".into(),
            layer: Layer::Phy,
            unit: String::new(),
            min_valid: None,
            max_valid: None,
        }];
        let data: Vec<f64> = values.iter().map(|v| v.unwrap_or(0.0)).collect();
        let missing: Vec<bool> = values.iter().map(|v| v.is_none()).collect();
        TelemetrySeries::new(schema, data, missing).unwrap()
    }

    #[test]
    fn two_point_linear_fill() {
        let s = one_column(&[Some(1.0), None, Some(3.0)]);
        let out = interpolate_missing(&s, 2).unwrap();
        assert_relative_eq!(out.value(1, 0), 2.0, epsilon = 1e-12);
        assert_eq!(out.missing_count(), 0);
    }

    #[test]
    fn quadratic_recovered_through_four_points() {
        // t^2 sampled at t = 0,1,3,4; the gap at t=2 must fill to 4.
        let s = one_column(&[Some(0.0), Some(1.0), None, Some(9.0), Some(16.0)]);
        let out = interpolate_missing(&s, 4).unwrap();
        assert_relative_eq!(out.value(2, 0), 4.0, epsilon = 1e-9);
    }

    #[test]
    fn no_missing_cells_is_identity() {
        let s = one_column(&[Some(5.0), Some(6.0), Some(7.0)]);
        let out = interpolate_missing(&s, 4).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn fully_missing_column_is_an_error() {
        let s = one_column(&[None, None]);
        assert!(interpolate_missing(&s, 4).is_err());
    }

    #[test]
    fn single_known_value_fills_constant() {
        let s = one_column(&[None, Some(3.5), None, None]);
        let out = interpolate_missing(&s, 4).unwrap();
        for t in 0..4 {
            assert_relative_eq!(out.value(t, 0), 3.5);
        }
    }

    #[test]
    fn neighborhood_balances_sides() {
        let known = vec![(0, 0.0), (1, 1.0), (3, 9.0), (4, 16.0), (5, 25.0)];
        let pts = neighborhood(&known, 2, 4);
        let ts: Vec<f64> = pts.iter().map(|p| p.0).collect();
        assert_eq!(ts, vec![0.0, 1.0, 3.0, 4.0]);
        // Only one point on the left: right side takes the slack.
        let pts = neighborhood(&known, 1, 4);
        assert_eq!(pts.len(), 4);
    }

    proptest! {
        // Lagrange fill is exact on any column sampled from a polynomial of
        // degree < max_points.
        #[test]
        fn exact_on_low_degree_polynomials(
            coeffs in proptest::collection::vec(-2.0f64..2.0, 1..=4),
            gap in 1usize..19,
        ) {
            let degree = coeffs.len() - 1;
            let poly = |t: f64| coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c);
            let cells: Vec<Option<f64>> = (0..20)
                .map(|t| if t == gap { None } else { Some(poly(t as f64)) })
                .collect();
            let s = one_column(&cells);
            let out = interpolate_missing(&s, degree + 1).unwrap();
            let expect = poly(gap as f64);
            prop_assert!((out.value(gap, 0) - expect).abs() <= 1e-6 * (1.0 + expect.abs()));
        }
    }
}
