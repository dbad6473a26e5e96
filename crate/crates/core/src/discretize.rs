//! Kaplan-Meier estimation and time-grid construction.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Product-limit estimate evaluated at the distinct event times.
#[derive(Debug, Clone, PartialEq)]
pub struct KmEstimate {
    pub event_times: Vec<f64>,
    pub survival: Vec<f64>,
    pub n_at_risk: Vec<usize>,
    pub n_events: Vec<usize>,
}

impl KmEstimate {
    /// `S(t)`: product over event times `<= t`.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.event_times.partition_point(|&e| e <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }
}

/// Kaplan-Meier estimator. At tied times, events are counted before censorings,
/// so a row censored at an event time is still at risk for that event.
pub fn kaplan_meier(time: &[f64], event: &[u8]) -> Result<KmEstimate> {
    if time.is_empty() {
        return Err(Error::Empty("kaplan_meier needs at least one observation"));
    }
    if time.len() != event.len() {
        return Err(Error::DimensionMismatch { expected: time.len(), got: event.len() });
    }
    let mut order: Vec<usize> = (0..time.len()).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));

    let mut at_risk = time.len();
    let mut s = 1.0;
    let mut km = KmEstimate {
        event_times: vec![],
        survival: vec![],
        n_at_risk: vec![],
        n_events: vec![],
    };
    let mut i = 0;
    while i < order.len() {
        let t = time[order[i]];
        let mut j = i;
        let mut deaths = 0;
        while j < order.len() && time[order[j]] == t {
            deaths += usize::from(event[order[j]] == 1);
            j += 1;
        }
        if deaths > 0 {
            s *= 1.0 - deaths as f64 / at_risk as f64;
            km.event_times.push(t);
            km.survival.push(s);
            km.n_at_risk.push(at_risk);
            km.n_events.push(deaths);
        }
        at_risk -= j - i;
        i = j;
    }
    Ok(km)
}

/// Evenly spaced cuts `j * max_time / m`.
pub fn grid_equidistant(max_time: f64, m: usize) -> Result<TimeGrid> {
    if m < 2 {
        return Err(Error::GridTooCoarse(m));
    }
    if !(max_time > 0.0 && max_time.is_finite()) {
        return Err(Error::InvalidGrid(format!("max_time must be positive, got {max_time}")));
    }
    TimeGrid::new((0..=m).map(|j| j as f64 * max_time / m as f64).collect())
}

/// Cuts at equally spaced survival levels of the KM curve, up to its last event time.
pub fn grid_km_quantile(km: &KmEstimate, m: usize) -> Result<TimeGrid> {
    let t_max = *km.event_times.last().ok_or(Error::Empty("KM estimate has no events"))?;
    grid_km_quantile_until(km, m, t_max)
}

/// Survival levels `eta_i = 1 - i (1 - eta_m) / m` with `eta_m = S(t_max)`; cut `i`
/// is the smallest event time with `S <= eta_i`. Duplicate cuts are collapsed, so
/// the returned grid may have fewer than `m` intervals.
pub fn grid_km_quantile_until(km: &KmEstimate, m: usize, t_max: f64) -> Result<TimeGrid> {
    if m < 2 {
        return Err(Error::GridTooCoarse(m));
    }
    if km.event_times.is_empty() {
        return Err(Error::Empty("KM estimate has no events"));
    }
    let eta_m = km.at(t_max);
    let mut cuts = vec![0.0];
    for i in 1..=m {
        let eta = 1.0 - i as f64 * (1.0 - eta_m) / m as f64;
        let Some(k) = km.survival.iter().position(|&s| s <= eta + 1e-12) else {
            continue;
        };
        let c = km.event_times[k];
        if c > *cuts.last().unwrap() {
            cuts.push(c);
        }
    }
    if cuts.len() < 3 {
        return Err(Error::GridTooCoarse(cuts.len() - 1));
    }
    TimeGrid::new(cuts)
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}
