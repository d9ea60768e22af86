//! Model fitting from labeled per-appliance traces, and the generic HMM for
//! load that no registered appliance explains.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FhmmError, Result};
use crate::model::ApplianceHmm;

pub const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITER: usize = 200;
/// Self-transition probability of the generic model.
pub const STICKY_DIAGONAL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    /// Smallest `|Δy|` counted as an event, watts.
    pub event_threshold: f64,
    /// Events this close to a registered level change are explained, watts.
    pub match_tolerance: f64,
    /// State count of the generic model.
    pub unregistered_states: usize,
    /// Added to every transition count before normalizing.
    pub pseudo_count: f64,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            event_threshold: 100.0,
            match_tolerance: 50.0,
            unregistered_states: 4,
            pseudo_count: 1.0,
        }
    }
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.event_threshold)
            || !positive(self.match_tolerance)
            || !positive(self.pseudo_count)
            || self.unregistered_states < 2
        {
            return Err(FhmmError::InvalidInput(format!(
                "learning settings must be positive with at least 2 states: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Result of a 1-D k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Ascending centroids.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    /// Clusters that ended up without members.
    pub empty: usize,
}

fn nearest(centroids: &[f64], v: f64) -> usize {
    let mut best = 0;
    for (c, &m) in centroids.iter().enumerate() {
        if (v - m).abs() < (v - centroids[best]).abs() {
            best = c;
        }
    }
    best
}

/// Lloyd's algorithm on the line, best of [`KMEANS_RESTARTS`] seeded
/// restarts. With `pin_zero` the first centroid stays at 0.
pub fn kmeans_1d(values: &[f64], k: usize, pin_zero: bool) -> Result<Clustering> {
    if k == 0 || values.is_empty() {
        return Err(FhmmError::InvalidInput(format!(
            "k-means needs k >= 1 and data (k = {k}, {} values)",
            values.len()
        )));
    }
    let mut best: Option<Clustering> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(restart as u64);
        let mut centroids = init_plus_plus(values, k, pin_zero, &mut rng);
        let mut assign = vec![usize::MAX; values.len()];
        let mut empty = 0;
        for _ in 0..KMEANS_MAX_ITER {
            let mut changed = false;
            for (a, &v) in assign.iter_mut().zip(values) {
                let c = nearest(&centroids, v);
                if *a != c {
                    *a = c;
                    changed = true;
                }
            }
            let mut sums = vec![0.0; k];
            let mut counts = vec![0usize; k];
            for (&a, &v) in assign.iter().zip(values) {
                sums[a] += v;
                counts[a] += 1;
            }
            empty = 0;
            for c in 0..k {
                if pin_zero && c == 0 {
                    continue;
                }
                if counts[c] > 0 {
                    centroids[c] = sums[c] / counts[c] as f64;
                } else {
                    empty += 1;
                }
            }
            if !changed {
                break;
            }
        }
        let inertia = values
            .iter()
            .map(|&v| {
                let d = v - centroids[nearest(&centroids, v)];
                d * d
            })
            .sum();
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(Clustering {
                centroids: centroids.clone(),
                inertia,
                empty,
            });
        }
    }
    let mut out = best.ok_or_else(|| FhmmError::Undefined("k-means produced no result".into()))?;
    out.centroids.sort_by(f64::total_cmp);
    Ok(out)
}

/// k-means++ seeding; the pinned zero counts as the first centre.
fn init_plus_plus(values: &[f64], k: usize, pin_zero: bool, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k);
    if pin_zero {
        centroids.push(0.0);
    } else {
        centroids.push(values[rng.random_range(0..values.len())]);
    }
    while centroids.len() < k {
        let weights: Vec<f64> = values
            .iter()
            .map(|&v| {
                centroids
                    .iter()
                    .map(|c| (v - c) * (v - c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = values.len() - 1;
            for (j, &w) in weights.iter().enumerate() {
                if u < w {
                    idx = j;
                    break;
                }
                u -= w;
            }
            values[idx]
        } else {
            values[rng.random_range(0..values.len())]
        };
        centroids.push(pick);
    }
    centroids
}

/// A fitted appliance plus anything suspicious found on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted {
    pub appliance: ApplianceHmm,
    pub warnings: Vec<String>,
}

/// Quantizes readings into `k` levels (the lowest pinned at 0 W) and
/// estimates smoothed transition frequencies between the levels.
pub fn fit_supervised(trace: &[f64], k: usize, config: &LearnConfig) -> Result<Fitted> {
    config.validate()?;
    if k < 2 {
        return Err(FhmmError::InvalidInput(format!(
            "need K >= 2 states, got {k}"
        )));
    }
    if trace.len() < k {
        return Err(FhmmError::InvalidInput(format!(
            "trace of length {} is shorter than K = {k}",
            trace.len()
        )));
    }
    if trace.iter().any(|v| !v.is_finite()) {
        return Err(FhmmError::InvalidInput(
            "trace contains non-finite readings".into(),
        ));
    }
    let clusters = kmeans_1d(trace, k, true)?;
    let mut warnings = Vec::new();
    let levels: Vec<f64> = clusters.centroids.iter().map(|c| c.max(0.0)).collect();
    if clusters.empty > 0 || levels.windows(2).any(|w| w[1] - w[0] <= 1e-9) {
        warnings.push(format!(
            "fewer than {k} distinct reading clusters; levels {levels:?} contain duplicates"
        ));
    }
    let states: Vec<usize> = trace.iter().map(|&v| nearest(&levels, v)).collect();
    let mut counts = vec![vec![config.pseudo_count; k]; k];
    for w in states.windows(2) {
        counts[w[0]][w[1]] += 1.0;
    }
    let transition = counts
        .into_iter()
        .map(|row| {
            let sum: f64 = row.iter().sum();
            row.into_iter().map(|c| c / sum).collect()
        })
        .collect();
    Ok(Fitted {
        appliance: ApplianceHmm::new(levels, transition),
        warnings,
    })
}

/// Sample standard deviation of readings around their fitted level.
pub fn residual_sigma(trace: &[f64], appliance: &ApplianceHmm) -> f64 {
    if trace.len() < 2 {
        return 0.0;
    }
    let ss: f64 = trace
        .iter()
        .map(|&v| {
            let d = v - appliance.power_levels[nearest(&appliance.power_levels, v)];
            d * d
        })
        .sum();
    (ss / (trace.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Step before the change: the event is `y[t + 1] − y[t]`.
    pub t: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventList {
    pub events: Vec<Event>,
}

impl EventList {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Every step change of at least the threshold.
pub fn extract_events(aggregate: &[f64], config: &LearnConfig) -> Result<EventList> {
    config.validate()?;
    if aggregate.len() < 2 {
        return Err(FhmmError::InvalidInput(format!(
            "event extraction needs at least 2 readings, got {}",
            aggregate.len()
        )));
    }
    let events = aggregate
        .windows(2)
        .enumerate()
        .filter_map(|(t, w)| {
            let delta = w[1] - w[0];
            (delta.abs() >= config.event_threshold).then_some(Event { t, delta })
        })
        .collect();
    Ok(EventList { events })
}

/// Generic appliance for events not explained by any registered level
/// change: off at 0 W plus `K − 1` levels from clustering `|Δy|`.
pub fn build_unregistered(
    aggregate: &[f64],
    registered: &[ApplianceHmm],
    config: &LearnConfig,
) -> Result<Fitted> {
    let events = extract_events(aggregate, config)?;
    let k = config.unregistered_states;
    let known: Vec<f64> = registered
        .iter()
        .flat_map(|app| {
            let n = app.num_states();
            (0..n).flat_map(move |m| {
                (0..n)
                    .filter(move |&j| j != m)
                    .map(move |j| app.level_change(m, j))
            })
        })
        .collect();
    let survivors: Vec<f64> = events
        .events
        .iter()
        .filter(|e| {
            known
                .iter()
                .all(|d| (e.delta - d).abs() > config.match_tolerance)
        })
        .map(|e| e.delta.abs())
        .collect();
    let mut warnings = Vec::new();
    if survivors.is_empty() {
        warnings.push("no unexplained events; generic appliance is always off".to_string());
        let transition = (0..k)
            .map(|_| {
                let mut row = vec![0.0; k];
                row[0] = 1.0;
                row
            })
            .collect();
        return Ok(Fitted {
            appliance: ApplianceHmm::new(vec![0.0; k], transition),
            warnings,
        });
    }
    let clusters = kmeans_1d(&survivors, k - 1, false)?;
    if clusters.empty > 0 {
        warnings.push(format!(
            "{} unexplained events give fewer than {} distinct levels",
            survivors.len(),
            k - 1
        ));
    }
    let mut levels = vec![0.0];
    levels.extend(clusters.centroids);
    let off = (1.0 - STICKY_DIAGONAL) / (k - 1) as f64;
    let transition = (0..k)
        .map(|r| {
            (0..k)
                .map(|c| if r == c { STICKY_DIAGONAL } else { off })
                .collect()
        })
        .collect();
    Ok(Fitted {
        appliance: ApplianceHmm::new(levels, transition),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FhmmModel;
    use rand_distr::{Distribution, Normal};

    fn square_wave(len: usize, hold: usize, on: f64) -> Vec<f64> {
        (0..len)
            .map(|t| if (t / hold) % 2 == 1 { on } else { 0.0 })
            .collect()
    }

    #[test]
    fn square_wave_levels_and_transitions() {
        let cfg = LearnConfig::default();
        let wave = square_wave(200, 10, 200.0);
        let fit = fit_supervised(&wave, 2, &cfg).unwrap();
        let app = &fit.appliance;
        assert_eq!(app.power_levels, vec![0.0, 200.0]);
        // off runs: 10 steps each, 10 runs, the last run has no exit
        let stays_off = 10.0 * 9.0;
        let leaves_off = 10.0;
        let expect = (stays_off + 1.0) / (stays_off + leaves_off + 2.0);
        assert!((app.transition[0][0] - expect).abs() < 1e-12);
        assert!((app.transition[0][0] - 0.9).abs() < 0.02);
        assert!(fit.warnings.is_empty());
    }

    #[test]
    fn constant_zero_trace_stays_off() {
        let fit = fit_supervised(&[0.0; 50], 2, &LearnConfig::default()).unwrap();
        let p = &fit.appliance.transition;
        assert!(p[0][0] > 0.97);
        for row in p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(!fit.warnings.is_empty());
    }

    #[test]
    fn short_trace_rejected() {
        assert!(fit_supervised(&[1.0], 2, &LearnConfig::default()).is_err());
    }

    #[test]
    fn event_examples() {
        let cfg = LearnConfig::default();
        assert!(extract_events(&[5.0; 10], &cfg).unwrap().is_empty());
        let step = [0.0, 0.0, 500.0, 500.0];
        let ev = extract_events(&step, &cfg).unwrap();
        assert_eq!(ev.events, vec![Event { t: 1, delta: 500.0 }]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let noise: Vec<f64> = (0..1000).map(|_| normal.sample(&mut rng)).collect();
        assert!(extract_events(&noise, &cfg).unwrap().is_empty());
    }

    #[test]
    fn matched_events_give_trivial_model() {
        let cfg = LearnConfig::default();
        let fridge = ApplianceHmm::new(vec![0.0, 150.0], vec![vec![0.9, 0.1], vec![0.1, 0.9]]);
        let y = [0.0, 150.0, 150.0, 0.0, 160.0];
        let fit = build_unregistered(&y, &[fridge], &cfg).unwrap();
        assert!(fit.appliance.power_levels.iter().all(|&l| l == 0.0));
        assert!(fit.appliance.transition.iter().all(|r| r[0] == 1.0));
        assert!(!fit.warnings.is_empty());
        FhmmModel::new(vec![fit.appliance], 1.0, 1.0)
            .validate()
            .unwrap();
    }

    #[test]
    fn unexplained_events_cluster_into_levels() {
        let cfg = LearnConfig {
            unregistered_states: 3,
            ..LearnConfig::default()
        };
        let y = [0.0, 300.0, 0.0, 701.0, 1.0, 299.0, 0.0, 700.0, 0.0];
        let fit = build_unregistered(&y, &[], &cfg).unwrap();
        let mu = &fit.appliance.power_levels;
        assert_eq!(mu[0], 0.0);
        assert!((mu[1] - 299.5).abs() < 1.0, "{mu:?}");
        assert!((mu[2] - 700.0).abs() < 1.0, "{mu:?}");
        assert_eq!(fit.appliance.transition[1][1], STICKY_DIAGONAL);
        FhmmModel::new(vec![fit.appliance], 1.0, 1.0)
            .validate()
            .unwrap();
    }

    #[test]
    fn kmeans_is_deterministic_and_pins_zero() {
        let data = [0.0, 1.0, 99.0, 101.0, 100.0, 250.0];
        let a = kmeans_1d(&data, 3, true).unwrap();
        assert_eq!(a, kmeans_1d(&data, 3, true).unwrap());
        assert_eq!(a.centroids[0], 0.0);
        assert!((a.centroids[1] - 100.0).abs() < 1e-9);
        assert_eq!(a.centroids[2], 250.0);
    }
}
