//! Loss-spike and RMS-spike detection and the lagged matching between them.
//!
//! An RMS spike is any iteration with `RMS_t ≥ 2.3`. A loss spike is an iteration past
//! warmup whose loss exceeds the trailing running mean by `3.2` running standard
//! deviations, confirmed by a second exceedance within 10 iterations. Exceedances closer
//! than the dedup window to an emitted event collapse into it. A loss spike is explained
//! when an RMS spike occurred 1 to 8 iterations before it.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_RMS_THRESHOLD: f64 = 2.3;
pub const DEFAULT_LOSS_Z: f64 = 3.2;
pub const DEFAULT_WARMUP_SKIP: u64 = 1000;
pub const DEFAULT_RUNNING_WINDOW: usize = 100;
pub const DEFAULT_MIN_HITS: usize = 2;
pub const DEFAULT_DEDUP_WINDOW: u64 = 10;
pub const DEFAULT_LAG_MIN: u64 = 1;
pub const DEFAULT_LAG_MAX: u64 = 8;

/// Per-iteration values at contiguous iterations `start, start + 1, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub start: u64,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(start: u64, values: Vec<f64>) -> Self {
        Self { start, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.values.iter().enumerate().map(move |(i, &v)| (self.start + i as u64, v))
    }

    pub fn value_at(&self, iter: u64) -> Option<f64> {
        iter.checked_sub(self.start).and_then(|i| self.values.get(i as usize).copied())
    }
}

/// Thresholds for the whole detection pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpikeThresholds {
    pub rms_threshold: f64,
    pub loss_z: f64,
    pub warmup_skip: u64,
    pub running_window: usize,
    pub min_hits: usize,
    pub dedup_window: u64,
    pub lag_min: u64,
    pub lag_max: u64,
}

impl Default for SpikeThresholds {
    fn default() -> Self {
        Self {
            rms_threshold: DEFAULT_RMS_THRESHOLD,
            loss_z: DEFAULT_LOSS_Z,
            warmup_skip: DEFAULT_WARMUP_SKIP,
            running_window: DEFAULT_RUNNING_WINDOW,
            min_hits: DEFAULT_MIN_HITS,
            dedup_window: DEFAULT_DEDUP_WINDOW,
            lag_min: DEFAULT_LAG_MIN,
            lag_max: DEFAULT_LAG_MAX,
        }
    }
}

/// Collapses sorted event iterations: an event opens a window `[t, t + window)` and every
/// later event inside it is absorbed.
pub fn dedup_events(sorted: &[u64], window: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut open_until: Option<u64> = None;
    for &t in sorted {
        match open_until {
            Some(end) if t < end => {}
            _ => {
                out.push(t);
                open_until = Some(t.saturating_add(window));
            }
        }
    }
    out
}

/// Iterations with `RMS ≥ threshold`, deduplicated.
pub fn detect_rms_spikes(series: &Series, threshold: f64, dedup_window: u64) -> Result<Vec<u64>> {
    if series.is_empty() {
        return Err(Error::InvalidArgument("empty RMS series".into()));
    }
    let raw: Vec<u64> = series.iter().filter(|&(_, v)| v >= threshold).map(|(t, _)| t).collect();
    Ok(dedup_events(&raw, dedup_window))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossSpikeParams {
    pub z: f64,
    pub warmup_skip: u64,
    pub window: usize,
    pub min_hits: usize,
    pub dedup_window: u64,
}

impl Default for LossSpikeParams {
    fn default() -> Self {
        Self {
            z: DEFAULT_LOSS_Z,
            warmup_skip: DEFAULT_WARMUP_SKIP,
            window: DEFAULT_RUNNING_WINDOW,
            min_hits: DEFAULT_MIN_HITS,
            dedup_window: DEFAULT_DEDUP_WINDOW,
        }
    }
}

impl From<&SpikeThresholds> for LossSpikeParams {
    fn from(t: &SpikeThresholds) -> Self {
        Self {
            z: t.loss_z,
            warmup_skip: t.warmup_skip,
            window: t.running_window,
            min_hits: t.min_hits,
            dedup_window: t.dedup_window,
        }
    }
}

/// Iterations where the loss exceeds `mean + z·std` of the trailing `window` losses
/// (current iteration excluded, unbiased std). Only positions at least `warmup_skip` past
/// the series start and with a full trailing window are tested; zero std disables the
/// test at that iteration and non-finite losses never count.
pub fn loss_exceedances(series: &Series, params: &LossSpikeParams) -> Vec<u64> {
    let w = params.window;
    let first = (params.warmup_skip as usize + 1).max(w);
    let mut out = Vec::new();
    if w < 2 {
        return out;
    }
    // Rolling sums over the trailing window; non-finite entries poison the window until
    // they leave it.
    let vals = &series.values;
    for i in first..vals.len() {
        let window = &vals[i - w..i];
        if window.iter().any(|v| !v.is_finite()) || !vals[i].is_finite() {
            continue;
        }
        let mean = window.iter().sum::<f64>() / w as f64;
        let var = window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (w - 1) as f64;
        let std = var.sqrt();
        if std > 0.0 && vals[i] > mean + params.z * std {
            out.push(series.start + i as u64);
        }
    }
    out
}

/// Confirmed, deduplicated loss spikes.
///
/// Exceedances are scanned in order; an exceedance at `t` becomes a spike when at least
/// `min_hits` exceedances fall in `[t, t + dedup_window)`, and those are absorbed. An
/// unconfirmed exceedance is dropped and the scan resumes at the next one.
pub fn detect_loss_spikes(series: &Series, params: &LossSpikeParams) -> Result<Vec<u64>> {
    if series.len() < params.warmup_skip as usize + params.window {
        return Err(Error::InvalidArgument(format!(
            "loss series of length {} is shorter than warmup_skip + window = {}",
            series.len(),
            params.warmup_skip as usize + params.window
        )));
    }
    let hits = loss_exceedances(series, params);
    let mut spikes = Vec::new();
    let mut i = 0;
    while i < hits.len() {
        let t = hits[i];
        let end = t.saturating_add(params.dedup_window);
        let in_window = hits[i..].iter().take_while(|&&h| h < end).count();
        if in_window >= params.min_hits.max(1) {
            spikes.push(t);
            i += in_window;
        } else {
            i += 1;
        }
    }
    Ok(spikes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MatchedPair {
    pub rms_iter: u64,
    pub loss_iter: u64,
    pub lag: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SpikeMatches {
    pub matched: Vec<MatchedPair>,
    pub unmatched: Vec<u64>,
}

/// Matches each loss spike to the nearest RMS spike that precedes it by a lag in
/// `[lag_min, lag_max]`.
pub fn match_spikes(loss_spikes: &[u64], rms_spikes: &[u64], lag_min: u64, lag_max: u64) -> SpikeMatches {
    let rms: BTreeSet<u64> = rms_spikes.iter().copied().collect();
    let mut matched = Vec::new();
    let mut unmatched = Vec::new();
    for &t in loss_spikes {
        let lo = t.saturating_sub(lag_max);
        let hit = match t.checked_sub(lag_min) {
            Some(hi) if hi >= lo => rms.range(lo..=hi).next_back().copied(),
            _ => None,
        };
        match hit {
            Some(r) => matched.push(MatchedPair {
                rms_iter: r,
                loss_iter: t,
                lag: t - r,
            }),
            None => unmatched.push(t),
        }
    }
    SpikeMatches { matched, unmatched }
}

/// Fraction of eligible iterations that fall `lag_min..=lag_max` after some RMS spike:
/// the chance that an arbitrary loss spike would match.
pub fn chance_probability(rms_spikes: &[u64], eligible_iterations: u64, lag_min: u64, lag_max: u64) -> Result<f64> {
    if eligible_iterations == 0 {
        return Err(Error::InvalidArgument("eligible_iterations must be > 0".into()));
    }
    Ok(covered_iterations(rms_spikes, lag_min, lag_max, 0, u64::MAX) as f64 / eligible_iterations as f64)
}

/// As [`chance_probability`], with the windows clipped to the iterations `first..=last`,
/// which are also the denominator.
pub fn chance_probability_within(rms_spikes: &[u64], first: u64, last: u64, lag_min: u64, lag_max: u64) -> Result<f64> {
    if last < first {
        return Err(Error::InvalidArgument(format!("empty iteration range {first}..={last}")));
    }
    let covered = covered_iterations(rms_spikes, lag_min, lag_max, first, last);
    Ok(covered as f64 / (last - first + 1) as f64)
}

/// Size of the union of `[r + lag_min, r + lag_max]` intersected with `[lo, hi]`.
fn covered_iterations(rms_spikes: &[u64], lag_min: u64, lag_max: u64, lo: u64, hi: u64) -> u64 {
    if lag_max < lag_min {
        return 0;
    }
    let mut starts: Vec<u64> = rms_spikes.to_vec();
    starts.sort_unstable();
    starts.dedup();
    let mut covered = 0u64;
    let mut current: Option<(u64, u64)> = None;
    let mut close = |(s, e): (u64, u64)| {
        let (s, e) = (s.max(lo), e.min(hi));
        if s <= e {
            covered += e - s + 1;
        }
    };
    for r in starts {
        let (a, b) = (r.saturating_add(lag_min), r.saturating_add(lag_max));
        current = match current {
            Some((s, e)) if a <= e.saturating_add(1) => Some((s, e.max(b))),
            Some(prev) => {
                close(prev);
                Some((a, b))
            }
            None => Some((a, b)),
        };
    }
    if let Some(prev) = current {
        close(prev);
    }
    covered
}

/// Per-iteration telemetry for one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceRecord {
    pub iter: u64,
    /// `None` for a non-finite loss.
    pub loss: Option<f64>,
    pub rms: Vec<(String, f64)>,
    pub grad_absmax: Vec<(String, f64)>,
    pub feat_absmean: Vec<(usize, f64)>,
    pub skipped_tensors: Vec<String>,
}

impl TrainTrace {
    pub fn validate(&self) -> Result<()> {
        for w in self.records.windows(2) {
            if w[1].iter <= w[0].iter {
                return Err(Error::InvalidArgument(format!(
                    "iterations must be strictly increasing ({} then {})",
                    w[0].iter, w[1].iter
                )));
            }
        }
        Ok(())
    }

    fn start(&self) -> u64 {
        self.records.first().map_or(0, |r| r.iter)
    }

    /// Loss series; non-finite losses become NaN.
    pub fn loss_series(&self) -> Series {
        Series::new(self.start(), self.records.iter().map(|r| r.loss.unwrap_or(f64::NAN)).collect())
    }

    pub fn tensor_names(&self) -> Vec<String> {
        self.records.first().map_or_else(Vec::new, |r| r.rms.iter().map(|(n, _)| n.clone()).collect())
    }

    /// RMS series for one tensor; iterations where the tensor was skipped read as 0.
    pub fn rms_series(&self, tensor: &str) -> Result<Series> {
        if !self.records.iter().any(|r| r.rms.iter().any(|(n, _)| n == tensor)) {
            return Err(Error::InvalidArgument(format!("unknown tensor '{tensor}'")));
        }
        let values = self
            .records
            .iter()
            .map(|r| r.rms.iter().find(|(n, _)| n == tensor).map_or(0.0, |(_, v)| *v))
            .collect();
        Ok(Series::new(self.start(), values))
    }
}

/// Outcome of running detection and matching on one trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpikeReport {
    pub tensor: String,
    pub rms_spike_iters: Vec<u64>,
    pub loss_spike_iters: Vec<u64>,
    pub matched_pairs: Vec<MatchedPair>,
    pub unmatched_loss_spikes: Vec<u64>,
    pub chance_probability: f64,
}

impl SpikeReport {
    pub fn match_rate(&self) -> f64 {
        if self.loss_spike_iters.is_empty() {
            0.0
        } else {
            self.matched_pairs.len() as f64 / self.loss_spike_iters.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeKind {
    Rms,
    Loss,
}

/// One line of the structured spike report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpikeRecord {
    pub kind: SpikeKind,
    pub iter: u64,
    pub value: f64,
    pub matched_to: Option<u64>,
    pub lag: Option<u64>,
}

impl SpikeReport {
    /// Flattens the report into per-spike records, RMS spikes first, each kind in
    /// iteration order. `matched_to` links a loss spike to its RMS spike and vice versa.
    pub fn records(&self, rms: &Series, loss: &Series) -> Vec<SpikeRecord> {
        let mut out = Vec::with_capacity(self.rms_spike_iters.len() + self.loss_spike_iters.len());
        for &t in &self.rms_spike_iters {
            let pair = self.matched_pairs.iter().find(|p| p.rms_iter == t);
            out.push(SpikeRecord {
                kind: SpikeKind::Rms,
                iter: t,
                value: rms.value_at(t).unwrap_or(f64::NAN),
                matched_to: pair.map(|p| p.loss_iter),
                lag: pair.map(|p| p.lag),
            });
        }
        for &t in &self.loss_spike_iters {
            let pair = self.matched_pairs.iter().find(|p| p.loss_iter == t);
            out.push(SpikeRecord {
                kind: SpikeKind::Loss,
                iter: t,
                value: loss.value_at(t).unwrap_or(f64::NAN),
                matched_to: pair.map(|p| p.rms_iter),
                lag: pair.map(|p| p.lag),
            });
        }
        out
    }
}

/// Full pipeline on an RMS series and a loss series.
///
/// The chance probability is taken over the iterations eligible for loss spikes (those
/// past `warmup_skip`).
pub fn analyze_series(tensor: &str, rms: &Series, loss: &Series, th: &SpikeThresholds) -> Result<SpikeReport> {
    let rms_spikes = detect_rms_spikes(rms, th.rms_threshold, th.dedup_window)?;
    let loss_spikes = detect_loss_spikes(loss, &LossSpikeParams::from(th))?;
    let matches = match_spikes(&loss_spikes, &rms_spikes, th.lag_min, th.lag_max);
    let first = loss.start + th.warmup_skip;
    let last = loss.start + loss.len() as u64 - 1;
    let chance = chance_probability_within(&rms_spikes, first, last, th.lag_min, th.lag_max)?;
    Ok(SpikeReport {
        tensor: tensor.to_string(),
        rms_spike_iters: rms_spikes,
        loss_spike_iters: loss_spikes,
        matched_pairs: matches.matched,
        unmatched_loss_spikes: matches.unmatched,
        chance_probability: chance,
    })
}

/// Runs the pipeline on a trace using the named tensor's RMS series.
pub fn analyze_trace(trace: &TrainTrace, tensor: &str, th: &SpikeThresholds) -> Result<SpikeReport> {
    trace.validate()?;
    let rms = trace.rms_series(tensor)?;
    analyze_series(tensor, &rms, &trace.loss_series(), th)
}

/// The same pipeline on a layer whose RMS is not expected to predict loss spikes, for
/// contrast with the embedding layer.
pub fn negative_control(trace: &TrainTrace, layer_name: &str, th: &SpikeThresholds) -> Result<SpikeReport> {
    analyze_trace(trace, layer_name, th)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Rng, Seed};

    #[test]
    fn rms_spike_examples() {
        let s = Series::new(0, vec![1.0, 1.1, 2.5, 1.0, 2.4]);
        assert_eq!(detect_rms_spikes(&s, 2.3, 10).unwrap(), vec![2]);
        let s = Series::new(0, vec![1.0, 2.2, 0.5]);
        assert!(detect_rms_spikes(&s, 2.3, 10).unwrap().is_empty());
        let mut v = vec![1.0; 40];
        v[5] = 3.0;
        v[20] = 3.0;
        assert_eq!(detect_rms_spikes(&Series::new(0, v), 2.3, 10).unwrap(), vec![5, 20]);
        assert!(detect_rms_spikes(&Series::new(0, vec![]), 2.3, 10).is_err());
    }

    #[test]
    fn threshold_is_inclusive() {
        let s = Series::new(0, vec![2.3]);
        assert_eq!(detect_rms_spikes(&s, 2.3, 10).unwrap(), vec![0]);
    }

    fn flat_trace(len: usize, seed: u64) -> Vec<f64> {
        // Uniform noise with stdev 0.01 is bounded by 0.0173, far from 3.2 running stdevs.
        let mut rng = Rng::new(Seed(seed));
        let half_width = 0.01 * 3f64.sqrt();
        (0..len).map(|_| 1.0 + (2.0 * rng.uniform() - 1.0) * half_width).collect()
    }

    /// Literal reading of the rule, recomputed from scratch at every iteration.
    fn loss_oracle(values: &[f64], p: &LossSpikeParams) -> Vec<u64> {
        let mut hits = Vec::new();
        for t in 0..values.len() {
            if t <= p.warmup_skip as usize || t < p.window {
                continue;
            }
            let prev: Vec<f64> = values[t - p.window..t].to_vec();
            let n = prev.len() as f64;
            let mean = prev.iter().sum::<f64>() / n;
            let std = (prev.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            if std > 0.0 && values[t] > mean + p.z * std {
                hits.push(t as u64);
            }
        }
        let mut out = Vec::new();
        let mut consumed_until = 0u64;
        for (i, &h) in hits.iter().enumerate() {
            if h < consumed_until {
                continue;
            }
            let count = hits[i..].iter().filter(|&&x| x < h + p.dedup_window).count();
            if count >= p.min_hits {
                out.push(h);
                consumed_until = h + p.dedup_window;
            }
        }
        out
    }

    #[test]
    fn loss_spike_injected_pair() {
        let mut v = flat_trace(3000, 1);
        v[1500] = 2.0;
        v[1502] = 2.0;
        let p = LossSpikeParams::default();
        let s = Series::new(0, v.clone());
        assert_eq!(detect_loss_spikes(&s, &p).unwrap(), vec![1500]);
        assert_eq!(loss_oracle(&v, &p), vec![1500]);
    }

    #[test]
    fn loss_spike_constant_and_isolated() {
        let p = LossSpikeParams::default();
        let s = Series::new(0, vec![1.0; 1500]);
        assert!(detect_loss_spikes(&s, &p).unwrap().is_empty());

        let mut v = flat_trace(2000, 2);
        v[1500] = 2.0;
        assert!(detect_loss_spikes(&Series::new(0, v), &p).unwrap().is_empty());

        assert!(detect_loss_spikes(&Series::new(0, vec![1.0; 50]), &p).is_err());
    }

    #[test]
    fn loss_spike_ignores_warmup() {
        let mut v = flat_trace(2000, 3);
        v[500] = 2.0;
        v[502] = 2.0;
        assert!(detect_loss_spikes(&Series::new(0, v), &LossSpikeParams::default()).unwrap().is_empty());
    }

    #[test]
    fn loss_detector_matches_oracle_on_noisy_traces() {
        let p = LossSpikeParams {
            warmup_skip: 50,
            window: 30,
            z: 2.0,
            ..Default::default()
        };
        for seed in 0..20 {
            let mut rng = Rng::new(Seed(100 + seed));
            let v: Vec<f64> = (0..600).map(|_| 1.0 + rng.normal() * 0.05).collect();
            let got = detect_loss_spikes(&Series::new(0, v.clone()), &p).unwrap();
            assert_eq!(got, loss_oracle(&v, &p), "seed {seed}");
        }
    }

    #[test]
    fn shift_equivariance() {
        let mut v = flat_trace(2500, 4);
        v[1700] = 3.0;
        v[1701] = 3.0;
        let p = LossSpikeParams::default();
        let a = detect_loss_spikes(&Series::new(0, v.clone()), &p).unwrap();
        let b = detect_loss_spikes(&Series::new(37, v.clone()), &p).unwrap();
        assert_eq!(a.iter().map(|t| t + 37).collect::<Vec<_>>(), b);
        let r: Vec<f64> = v.iter().map(|x| x * 2.0).collect();
        let ra = detect_rms_spikes(&Series::new(0, r.clone()), 2.3, 10).unwrap();
        let rb = detect_rms_spikes(&Series::new(37, r), 2.3, 10).unwrap();
        assert_eq!(ra.iter().map(|t| t + 37).collect::<Vec<_>>(), rb);
    }

    #[test]
    fn raising_threshold_never_adds_spikes() {
        let mut rng = Rng::new(Seed(5));
        let v: Vec<f64> = (0..2000).map(|_| (rng.normal() * 0.8 + 1.0).abs()).collect();
        let s = Series::new(0, v);
        let mut prev = usize::MAX;
        for th in [1.0, 1.5, 2.0, 2.3, 2.6, 3.0] {
            let raw = s.values.iter().filter(|&&x| x >= th).count();
            assert!(raw <= prev);
            prev = raw;
        }
    }

    #[test]
    fn matching_examples() {
        let m = match_spikes(&[103], &[100], 1, 8);
        assert_eq!(m.matched, vec![MatchedPair { rms_iter: 100, loss_iter: 103, lag: 3 }]);
        assert_eq!(match_spikes(&[109], &[100], 1, 8).unmatched, vec![109]);
        assert_eq!(match_spikes(&[100], &[100], 1, 8).unmatched, vec![100]);
        let m = match_spikes(&[108], &[100, 105], 1, 8);
        assert_eq!(m.matched[0].rms_iter, 105, "nearest qualifying RMS spike");
        assert_eq!(match_spikes(&[3], &[0], 1, 8).matched.len(), 1);
    }

    #[test]
    fn matching_never_uses_same_or_later_rms() {
        let mut rng = Rng::new(Seed(6));
        let rms: Vec<u64> = (0..50).map(|_| rng.below(2000)).collect();
        let loss: Vec<u64> = (0..50).map(|_| rng.below(2000)).collect();
        let m = match_spikes(&loss, &rms, 1, 8);
        for p in &m.matched {
            assert!(p.rms_iter < p.loss_iter && (1..=8).contains(&p.lag));
        }
        assert_eq!(m.matched.len() + m.unmatched.len(), loss.len());
    }

    #[test]
    fn chance_examples() {
        let spikes: Vec<u64> = (0..76).map(|i| 1000 + i * 20).collect();
        assert_eq!(chance_probability(&spikes, 100_000, 1, 8).unwrap(), 608.0 / 100_000.0);
        assert_eq!(chance_probability(&[], 100, 1, 8).unwrap(), 0.0);
        assert_eq!(chance_probability(&[100, 104], 1000, 1, 8).unwrap(), 12.0 / 1000.0);
        assert!(chance_probability(&[1], 0, 1, 8).is_err());
    }

    #[test]
    fn chance_within_clips_to_range() {
        // window of 990 is 991..=998, entirely before the range; 1996 covers 1997..=2000 only
        assert_eq!(chance_probability_within(&[990, 1500, 1996], 1001, 2000, 1, 8).unwrap(), 12.0 / 1000.0);
        assert_eq!(chance_probability_within(&[995], 1001, 2000, 1, 8).unwrap(), 3.0 / 1000.0);
        let all: Vec<u64> = (0..3000).collect();
        assert_eq!(chance_probability_within(&all, 1001, 2000, 1, 8).unwrap(), 1.0);
        assert!(chance_probability_within(&[1], 10, 9, 1, 8).is_err());
    }

    #[test]
    fn chance_bound_and_brute_force() {
        let mut rng = Rng::new(Seed(7));
        for _ in 0..50 {
            let n = rng.below(30) as usize;
            let spikes: Vec<u64> = (0..n).map(|_| rng.below(500)).collect();
            let p = chance_probability(&spikes, 1000, 1, 8).unwrap();
            let brute: BTreeSet<u64> = spikes.iter().flat_map(|&r| (r + 1)..=(r + 8)).collect();
            assert_eq!(p, brute.len() as f64 / 1000.0);
            let distinct: BTreeSet<u64> = spikes.iter().copied().collect();
            assert!(p <= distinct.len() as f64 * 8.0 / 1000.0);
        }
    }

    fn record(iter: u64, loss: f64, embed: f64, mid: f64) -> TraceRecord {
        TraceRecord {
            iter,
            loss: Some(loss),
            rms: vec![("embed".into(), embed), ("mid".into(), mid)],
            ..Default::default()
        }
    }

    fn synthetic_trace() -> TrainTrace {
        let losses = flat_trace(2000, 8);
        let mut trace = TrainTrace::default();
        for (i, &l) in losses.iter().enumerate() {
            trace.records.push(record(i as u64 + 1, l, 1.0, 1.0));
        }
        let set = |t: &mut TrainTrace, iter: u64, f: &dyn Fn(&mut TraceRecord)| f(&mut t.records[iter as usize - 1]);
        set(&mut trace, 1500, &|r| r.rms[0].1 = 5.0);
        set(&mut trace, 1503, &|r| r.loss = Some(2.0));
        set(&mut trace, 1505, &|r| r.loss = Some(2.0));
        trace
    }

    #[test]
    fn negative_control_has_no_matches() {
        let trace = synthetic_trace();
        let th = SpikeThresholds::default();
        let embed = analyze_trace(&trace, "embed", &th).unwrap();
        assert_eq!(embed.matched_pairs.len(), 1);
        assert_eq!(embed.matched_pairs[0].lag, 3);
        let mid = negative_control(&trace, "mid", &th).unwrap();
        assert!(mid.matched_pairs.is_empty());
        assert_eq!(mid.loss_spike_iters, embed.loss_spike_iters);
        assert_eq!(negative_control(&trace, "embed", &th).unwrap(), embed);
        assert!(negative_control(&trace, "nope", &th).is_err());
    }

    #[test]
    fn shuffled_rms_matches_at_chance_rate() {
        // Many loss spikes at random positions against RMS spikes: expected match rate is
        // the union-of-windows coverage.
        let mut rng = Rng::new(Seed(9));
        let n = 200_000u64;
        let rms: Vec<u64> = {
            let mut v: Vec<u64> = (0..2000).map(|_| rng.below(n)).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let mut loss: Vec<u64> = (0..20_000).map(|_| rng.below(n)).collect();
        loss.sort_unstable();
        let m = match_spikes(&loss, &rms, 1, 8);
        let rate = m.matched.len() as f64 / loss.len() as f64;
        let chance = chance_probability(&rms, n, 1, 8).unwrap();
        assert!((rate - chance).abs() < 0.01, "rate {rate} chance {chance}");
    }

    #[test]
    fn trace_validation() {
        let mut t = TrainTrace::default();
        t.records.push(record(2, 1.0, 1.0, 1.0));
        t.records.push(record(2, 1.0, 1.0, 1.0));
        assert!(t.validate().is_err());
    }
}
