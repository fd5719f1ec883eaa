//! Real-world acceleration injection for human-driven vehicles.
//!
//! Event magnitudes come from the out-of-band portion of an empirical
//! acceleration histogram; event durations follow the inverse
//! magnitude/duration relation; spacing between events is uniform over the
//! observed occurrence range. During an event the sampled magnitude
//! replaces the IDM command outright (additive composition would distort
//! the realized distribution); the failsafe may deepen braking afterwards
//! but never softens a sampled deceleration.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// One histogram bin: `[low, high)` with probability mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub low: f64,
    pub high: f64,
    pub mass: f64,
}

/// Empirical acceleration distribution plus excursion duration/frequency
/// laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccelEventModel {
    pub histogram: Vec<HistBin>,
    /// Accelerations inside this band are "nominal" and never become events.
    pub nominal_band: [f64; 2],
    /// Event durations (s).
    pub duration_range: [f64; 2],
    /// Time between consecutive event starts (s).
    pub gap_range: [f64; 2],
    /// Shape of the inverse magnitude/duration interpolation.
    pub magnitude_duration_exponent: f64,
    /// Multiplicative duration jitter (fraction).
    pub duration_jitter: f64,
}

/// An acceleration excursion scheduled for one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelEvent {
    pub start_time: f64,
    pub duration: f64,
    pub magnitude: f64,
}

impl AccelEvent {
    pub fn active_at(&self, t: f64) -> bool {
        t >= self.start_time && t < self.start_time + self.duration
    }
}

const MASS_TOL: f64 = 1e-9;

impl AccelEventModel {
    /// Synthetic default matching the published summary statistics: 37% of
    /// mass inside [-1, 1] and secondary peaks in [-4, -3) and [3, 4).
    pub fn default_synthetic() -> Self {
        let masses = [
            (-6.0, -5.0, 0.015),
            (-5.0, -4.0, 0.035),
            (-4.0, -3.0, 0.105),
            (-3.0, -2.0, 0.065),
            (-2.0, -1.0, 0.095),
            (-1.0, 0.0, 0.185),
            (0.0, 1.0, 0.185),
            (1.0, 2.0, 0.095),
            (2.0, 3.0, 0.065),
            (3.0, 4.0, 0.105),
            (4.0, 5.0, 0.035),
            (5.0, 6.0, 0.015),
        ];
        AccelEventModel {
            histogram: masses.iter().map(|&(low, high, mass)| HistBin { low, high, mass }).collect(),
            nominal_band: [-1.0, 1.0],
            duration_range: [0.1, 20.0],
            gap_range: [15.0, 60.0],
            magnitude_duration_exponent: 2.0,
            duration_jitter: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.histogram.is_empty() {
            return Err(Error::config("histogram has no bins"));
        }
        let mut sum = 0.0;
        let mut prev_high = f64::NEG_INFINITY;
        for (i, bin) in self.histogram.iter().enumerate() {
            if bin.low >= bin.high {
                return Err(Error::config(format!("bin {i}: low {} >= high {}", bin.low, bin.high)));
            }
            if bin.low < prev_high {
                return Err(Error::config(format!("bin {i} overlaps or is out of order")));
            }
            if bin.mass < 0.0 {
                return Err(Error::config(format!("bin {i}: negative mass")));
            }
            prev_high = bin.high;
            sum += bin.mass;
        }
        if (sum - 1.0).abs() > MASS_TOL {
            return Err(Error::config(format!("histogram masses sum to {sum}, expected 1")));
        }
        if self.duration_range[0] <= 0.0 || self.duration_range[1] < self.duration_range[0] {
            return Err(Error::config("invalid duration range"));
        }
        if self.gap_range[0] <= 0.0 || self.gap_range[1] < self.gap_range[0] {
            return Err(Error::config("invalid gap range"));
        }
        Ok(())
    }

    /// Largest absolute bin edge; events at this magnitude get the minimum
    /// duration.
    pub fn magnitude_cap(&self) -> f64 {
        self.histogram
            .iter()
            .flat_map(|b| [b.low.abs(), b.high.abs()])
            .fold(0.0, f64::max)
    }

    /// Probability mass inside an arbitrary interval, assuming uniform
    /// density within each bin.
    pub fn mass_in(&self, lo: f64, hi: f64) -> f64 {
        self.histogram
            .iter()
            .map(|b| {
                let l = b.low.max(lo);
                let h = b.high.min(hi);
                if h > l { b.mass * (h - l) / (b.high - b.low) } else { 0.0 }
            })
            .sum()
    }

    /// Out-of-band sub-intervals (magnitude beyond the nominal band) with
    /// their masses.
    fn excursion_intervals(&self) -> Vec<(f64, f64, f64)> {
        let [lo_band, hi_band] = self.nominal_band;
        let mut parts = Vec::new();
        for b in &self.histogram {
            let density = b.mass / (b.high - b.low);
            // part below the band
            let h = b.high.min(lo_band);
            if h > b.low {
                parts.push((b.low, h, density * (h - b.low)));
            }
            // part above the band
            let l = b.low.max(hi_band);
            if b.high > l {
                parts.push((l, b.high, density * (b.high - l)));
            }
        }
        parts.retain(|p| p.2 > 0.0);
        parts
    }

    /// Draws one event: magnitude from the renormalized out-of-band
    /// histogram, duration from the inverse magnitude/duration law, and the
    /// spacing to the next event start.
    pub fn sample_event(&self, rng: &mut SimRng) -> Result<(f64, f64, f64)> {
        let parts = self.excursion_intervals();
        let total: f64 = parts.iter().map(|p| p.2).sum();
        if total <= 0.0 {
            return Err(Error::domain("histogram has no out-of-band mass to sample"));
        }
        let mut pick = rng.unit() * total;
        let mut magnitude = 0.0;
        for (lo, hi, mass) in &parts {
            if pick <= *mass {
                magnitude = rng.uniform(*lo, *hi);
                break;
            }
            pick -= mass;
            magnitude = *hi; // fallback for fp rounding on the last bin
        }
        let duration = self.duration_for(magnitude.abs(), rng);
        let gap = rng.uniform(self.gap_range[0], self.gap_range[1]);
        Ok((magnitude, duration, gap))
    }

    /// Higher magnitudes get shorter durations; multiplicative jitter,
    /// clamped back into the duration range.
    fn duration_for(&self, magnitude: f64, rng: &mut SimRng) -> f64 {
        let [d_min, d_max] = self.duration_range;
        let cap = self.magnitude_cap();
        let band = self.nominal_band[1];
        let frac = if cap > band {
            ((cap - magnitude) / (cap - band)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let base = d_min + (d_max - d_min) * frac.powf(self.magnitude_duration_exponent);
        let jitter = 1.0 + self.duration_jitter * rng.uniform(-1.0, 1.0);
        (base * jitter).clamp(d_min, d_max)
    }

    /// Event schedule for one vehicle over `[0, horizon_s)`, deterministic
    /// in the supplied stream. Starts are spaced by sampled gaps, pushed
    /// late when a long event would overlap the next start.
    pub fn generate_schedule(&self, rng: &mut SimRng, horizon_s: f64) -> Result<Vec<AccelEvent>> {
        let mut events = Vec::new();
        let mut clock = rng.uniform(self.gap_range[0], self.gap_range[1]);
        let mut last_end = 0.0f64;
        while clock < horizon_s {
            let (magnitude, duration, gap) = self.sample_event(rng)?;
            let start = clock.max(last_end);
            if start >= horizon_s {
                break;
            }
            events.push(AccelEvent { start_time: start, duration, magnitude });
            last_end = start + duration;
            clock = start + gap;
        }
        Ok(events)
    }
}

/// The event override for an HV: the sampled magnitude replaces the model
/// command. Applying the humanizer to an RV is an error.
pub fn apply_human_accel(is_rv: bool, model_cmd: f64, active_event: Option<&AccelEvent>) -> Result<f64> {
    match active_event {
        None => Ok(model_cmd),
        Some(ev) => {
            if is_rv {
                return Err(Error::domain("humanizer events only apply to human-driven vehicles"));
            }
            Ok(ev.magnitude)
        }
    }
}

/// Loads a histogram CSV (rows `bin_low,bin_high,mass`, optional header)
/// with the standard excursion laws.
pub fn load_accel_histogram(path: &Path) -> Result<AccelEventModel> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let display = path.display().to_string();
    let mut bins = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::parse(&display, lineno + 1, format!("expected 3 fields, got {}", fields.len())));
        }
        if lineno == 0 && fields[0].parse::<f64>().is_err() {
            continue; // header row
        }
        let parse = |s: &str, name: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::parse(&display, lineno + 1, format!("bad {name}: {s:?}")))
        };
        bins.push(HistBin {
            low: parse(fields[0], "bin_low")?,
            high: parse(fields[1], "bin_high")?,
            mass: parse(fields[2], "mass")?,
        });
    }
    let model = AccelEventModel { histogram: bins, ..AccelEventModel::default_synthetic() };
    model.validate()?;
    Ok(model)
}

/// Writes the histogram in the same CSV schema `load_accel_histogram`
/// reads.
pub fn save_accel_histogram(model: &AccelEventModel, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "bin_low,bin_high,mass")?;
    for bin in &model.histogram {
        writeln!(file, "{},{},{}", bin.low, bin.high, bin.mass)?;
    }
    Ok(())
}

/// Spearman rank correlation; used to check the inverse magnitude/duration
/// relation.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                ranks[idx[k]] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mean) * (b - mean);
        dx += (a - mean) * (a - mean);
        dy += (b - mean) * (b - mean);
    }
    num / (dx.sqrt() * dy.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_histogram_matches_summary_stats() {
        let model = AccelEventModel::default_synthetic();
        model.validate().unwrap();
        let nominal = model.mass_in(-1.0, 1.0);
        assert!((nominal - 0.37).abs() <= 0.01, "nominal mass {nominal}");
        // secondary peaks: [3,4) and [-4,-3) exceed their outer neighbors
        let peak = model.mass_in(3.0, 4.0);
        assert!(peak > model.mass_in(2.0, 3.0) && peak > model.mass_in(4.0, 5.0));
    }

    #[test]
    fn masses_not_summing_to_one_rejected() {
        let mut model = AccelEventModel::default_synthetic();
        model.histogram[0].mass += 0.1;
        assert!(model.validate().is_err());
    }

    #[test]
    fn load_rejects_bad_mass_sum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hist.csv");
        std::fs::write(&path, "bin_low,bin_high,mass\n-1,0,0.4\n0,1,0.5\n").unwrap();
        assert!(load_accel_histogram(&path).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let model = AccelEventModel::default_synthetic();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hist.csv");
        save_accel_histogram(&model, &path).unwrap();
        let loaded = load_accel_histogram(&path).unwrap();
        assert_eq!(loaded.histogram, model.histogram);
    }

    #[test]
    fn single_bin_histogram_samples_inside_it() {
        let model = AccelEventModel {
            histogram: vec![HistBin { low: 2.0, high: 3.0, mass: 1.0 }],
            ..AccelEventModel::default_synthetic()
        };
        model.validate().unwrap();
        let mut rng = SimRng::seed_from(1);
        for _ in 0..1000 {
            let (m, _, _) = model.sample_event(&mut rng).unwrap();
            assert!((2.0..3.0).contains(&m));
        }
    }

    #[test]
    fn zero_out_of_band_mass_is_error() {
        let model = AccelEventModel {
            histogram: vec![HistBin { low: -1.0, high: 1.0, mass: 1.0 }],
            ..AccelEventModel::default_synthetic()
        };
        let mut rng = SimRng::seed_from(1);
        assert!(model.sample_event(&mut rng).is_err());
    }

    #[test]
    fn sampled_ranges_and_magnitudes() {
        let model = AccelEventModel::default_synthetic();
        let mut rng = SimRng::seed_from(7);
        for _ in 0..100_000 {
            let (m, d, g) = model.sample_event(&mut rng).unwrap();
            assert!(m.abs() > 1.0, "magnitude {m} inside the nominal band");
            assert!((0.1..=20.0).contains(&d), "duration {d}");
            assert!((15.0..=60.0).contains(&g), "gap {g}");
        }
    }

    #[test]
    fn duration_at_magnitude_cap_is_min_plus_jitter() {
        let model = AccelEventModel::default_synthetic();
        let mut rng = SimRng::seed_from(3);
        let cap = model.magnitude_cap();
        for _ in 0..1000 {
            let d = model.duration_for(cap, &mut rng);
            assert!(d >= 0.1 && d <= 0.1 * (1.0 + model.duration_jitter) + 1e-12);
        }
    }

    #[test]
    fn magnitude_duration_anticorrelated() {
        let model = AccelEventModel::default_synthetic();
        let mut rng = SimRng::seed_from(11);
        let mut mags = Vec::new();
        let mut durs = Vec::new();
        for _ in 0..100_000 {
            let (m, d, _) = model.sample_event(&mut rng).unwrap();
            mags.push(m.abs());
            durs.push(d);
        }
        let rho = spearman(&mags, &durs);
        assert!(rho < -0.5, "Spearman {rho}");
    }

    #[test]
    fn sampled_magnitude_histogram_close_to_model() {
        let model = AccelEventModel::default_synthetic();
        let mut rng = SimRng::seed_from(19);
        let parts = model.excursion_intervals();
        let total: f64 = parts.iter().map(|p| p.2).sum();
        let n = 1_000_000;
        let mut counts = vec![0usize; parts.len()];
        for _ in 0..n {
            let (m, _, _) = model.sample_event(&mut rng).unwrap();
            let idx = parts
                .iter()
                .position(|(lo, hi, _)| m >= *lo && m < *hi)
                .unwrap_or(parts.len() - 1);
            counts[idx] += 1;
        }
        let l1: f64 = parts
            .iter()
            .zip(&counts)
            .map(|((_, _, mass), c)| (mass / total - *c as f64 / n as f64).abs())
            .sum();
        assert!(l1 < 0.02, "L1 distance {l1}");
    }

    #[test]
    fn schedule_deterministic_and_ordered() {
        let model = AccelEventModel::default_synthetic();
        let mut a = SimRng::substream(5, 2, 3);
        let mut b = SimRng::substream(5, 2, 3);
        let ea = model.generate_schedule(&mut a, 600.0).unwrap();
        let eb = model.generate_schedule(&mut b, 600.0).unwrap();
        assert_eq!(ea, eb);
        for w in ea.windows(2) {
            assert!(w[1].start_time >= w[0].start_time + w[0].duration - 1e-12);
        }
    }

    #[test]
    fn override_semantics() {
        let ev = AccelEvent { start_time: 0.0, duration: 1.0, magnitude: 3.5 };
        assert_eq!(apply_human_accel(false, -0.2, Some(&ev)).unwrap(), 3.5);
        assert_eq!(apply_human_accel(false, -0.2, None).unwrap(), -0.2);
        assert!(apply_human_accel(true, -0.2, Some(&ev)).is_err());
    }
}
