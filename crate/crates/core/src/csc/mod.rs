//! Congestion Stage Classifier: rule-based labeling of sensing-zone headway
//! patterns and an MLP that forecasts the stage ten timesteps ahead.

pub mod dataset;
pub mod mlp;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use mlp::{argmax, Mlp};

/// Five-class congestion stage. The discriminant order fixes the one-hot
/// encoding and argmax tie-breaking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CongestionStage {
    Forming = 0,
    Leaving = 1,
    Congested = 2,
    FreeFlow = 3,
    Undefined = 4,
}

pub const STAGE_COUNT: usize = 5;

impl CongestionStage {
    pub const ALL: [CongestionStage; STAGE_COUNT] = [
        CongestionStage::Forming,
        CongestionStage::Leaving,
        CongestionStage::Congested,
        CongestionStage::FreeFlow,
        CongestionStage::Undefined,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> CongestionStage {
        Self::ALL[i]
    }

    pub fn one_hot(self) -> [f64; STAGE_COUNT] {
        let mut v = [0.0; STAGE_COUNT];
        v[self.index()] = 1.0;
        v
    }

    pub fn name(self) -> &'static str {
        match self {
            CongestionStage::Forming => "forming",
            CongestionStage::Leaving => "leaving",
            CongestionStage::Congested => "congested",
            CongestionStage::FreeFlow => "free_flow",
            CongestionStage::Undefined => "undefined",
        }
    }
}

/// One vehicle ahead of the RV inside the sensing zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoneEntry {
    /// Front-to-front distance from the RV (m), positive ahead.
    pub r_p: f64,
    /// Velocity relative to the RV (m/s), positive when opening.
    pub r_v: f64,
}

/// Vehicles ahead of the RV within the sensing zone, nearest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingZoneSnapshot {
    pub zone_length: f64,
    pub entries: Vec<ZoneEntry>,
}

impl SensingZoneSnapshot {
    pub fn new(zone_length: f64, entries: Vec<ZoneEntry>) -> Result<Self> {
        let mut prev = 0.0;
        for e in &entries {
            if e.r_p <= prev {
                return Err(Error::domain("zone entries must be strictly increasing in distance"));
            }
            if e.r_p > zone_length {
                return Err(Error::domain("zone entry beyond the sensing zone"));
            }
            prev = e.r_p;
        }
        Ok(SensingZoneSnapshot { zone_length, entries })
    }

    /// Space headways beginning at the RV: RV→first, then between
    /// consecutive zone vehicles.
    pub fn headways(&self) -> Vec<f64> {
        let mut gaps = Vec::with_capacity(self.entries.len());
        let mut prev = 0.0;
        for e in &self.entries {
            gaps.push(e.r_p - prev);
            prev = e.r_p;
        }
        gaps
    }
}

/// Tolerance band for the monotonicity comparisons (m), to avoid
/// noise-induced label flicker.
pub const MONOTONE_TOL: f64 = 0.1;

/// Rule-based stage from the headway pattern in the zone.
///
/// Leaving if successive headways strictly increase, Forming if they
/// strictly decrease; otherwise FreeFlow/Congested when all headways are
/// above/at-most the threshold, Undefined for everything else (including
/// zones with fewer than two vehicles).
pub fn label_window(snapshot: &SensingZoneSnapshot, gap_threshold: f64) -> CongestionStage {
    label_gaps(&snapshot.headways(), gap_threshold)
}

/// Same rules applied to a pre-computed headway sequence.
pub fn label_gaps(gaps: &[f64], gap_threshold: f64) -> CongestionStage {
    if gaps.len() < 2 {
        return CongestionStage::Undefined;
    }
    let increasing = gaps.windows(2).all(|w| w[1] - w[0] > MONOTONE_TOL);
    if increasing {
        return CongestionStage::Leaving;
    }
    let decreasing = gaps.windows(2).all(|w| w[0] - w[1] > MONOTONE_TOL);
    if decreasing {
        return CongestionStage::Forming;
    }
    if gaps.iter().all(|g| *g > gap_threshold) {
        return CongestionStage::FreeFlow;
    }
    if gaps.iter().all(|g| *g <= gap_threshold) {
        return CongestionStage::Congested;
    }
    CongestionStage::Undefined
}

/// Classifier bundle: the network plus the feature layout it was trained
/// with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CscModel {
    pub mlp: Mlp,
    pub zone_length: f64,
    pub speed_norm: f64,
    pub max_zone_vehicles: usize,
    pub gap_threshold: f64,
}

/// Defaults for the classifier feature layout.
pub const DEFAULT_ZONE_LENGTH: f64 = 50.0;
pub const DEFAULT_MAX_ZONE_VEHICLES: usize = 8;
pub const DEFAULT_GAP_THRESHOLD: f64 = 15.0;

impl CscModel {
    /// Fresh untrained model with the standard two 32-unit hidden layers.
    pub fn new(zone_length: f64, speed_norm: f64, max_zone_vehicles: usize, gap_threshold: f64, seed: u64) -> Result<Self> {
        let input = 2 * max_zone_vehicles;
        let mut mlp = Mlp::new(&[input, 32, 32, STAGE_COUNT], mlp::OutputKind::Softmax, seed)?;
        let mut scale = Vec::with_capacity(input);
        for _ in 0..max_zone_vehicles {
            scale.push(zone_length);
            scale.push(speed_norm);
        }
        mlp.input_scale = scale;
        Ok(CscModel { mlp, zone_length, speed_norm, max_zone_vehicles, gap_threshold })
    }

    /// Raw (un-normalized) feature vector: (r_p, r_v) per slot, padded with
    /// the zone boundary sentinel (zone_length, 0) for absent vehicles.
    pub fn features(&self, snapshot: &SensingZoneSnapshot) -> Vec<f64> {
        let mut f = Vec::with_capacity(2 * self.max_zone_vehicles);
        for i in 0..self.max_zone_vehicles {
            match snapshot.entries.get(i) {
                Some(e) => {
                    f.push(e.r_p);
                    f.push(e.r_v);
                }
                None => {
                    f.push(self.zone_length);
                    f.push(0.0);
                }
            }
        }
        f
    }

    /// Forecast stage: argmax of the network output, ties to the lowest
    /// class index.
    pub fn forecast(&self, snapshot: &SensingZoneSnapshot) -> CongestionStage {
        let probs = self.mlp.forward(&self.features(snapshot));
        CongestionStage::from_index(argmax(&probs))
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(file)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snapshot_from_gaps(gaps: &[f64]) -> SensingZoneSnapshot {
        let mut entries = Vec::new();
        let mut pos = 0.0;
        for g in gaps {
            pos += g;
            entries.push(ZoneEntry { r_p: pos, r_v: 0.0 });
        }
        SensingZoneSnapshot { zone_length: 1e9, entries }
    }

    #[test]
    fn rule_examples() {
        assert_eq!(label_window(&snapshot_from_gaps(&[4.0, 7.0, 11.0]), 15.0), CongestionStage::Leaving);
        assert_eq!(label_window(&snapshot_from_gaps(&[12.0, 8.0, 5.0]), 15.0), CongestionStage::Forming);
        assert_eq!(label_window(&snapshot_from_gaps(&[20.0, 18.0, 22.0]), 15.0), CongestionStage::FreeFlow);
        assert_eq!(label_window(&snapshot_from_gaps(&[6.0, 9.0, 4.0]), 15.0), CongestionStage::Congested);
        // non-monotone, straddling the threshold
        assert_eq!(label_window(&snapshot_from_gaps(&[6.0, 20.0, 4.0]), 15.0), CongestionStage::Undefined);
    }

    #[test]
    fn sparse_zone_is_undefined() {
        assert_eq!(label_window(&snapshot_from_gaps(&[9.0]), 15.0), CongestionStage::Undefined);
        assert_eq!(label_window(&snapshot_from_gaps(&[]), 15.0), CongestionStage::Undefined);
    }

    /// Independent transcription of the prose rules, evaluated over every
    /// ordering pattern for 3- and 4-vehicle zones.
    fn oracle(gaps: &[f64], threshold: f64) -> CongestionStage {
        if gaps.len() < 2 {
            return CongestionStage::Undefined;
        }
        let mut inc = true;
        let mut dec = true;
        for i in 1..gaps.len() {
            if !(gaps[i] > gaps[i - 1] + MONOTONE_TOL) {
                inc = false;
            }
            if !(gaps[i] < gaps[i - 1] - MONOTONE_TOL) {
                dec = false;
            }
        }
        if inc {
            CongestionStage::Leaving
        } else if dec {
            CongestionStage::Forming
        } else if gaps.iter().all(|g| *g > threshold) {
            CongestionStage::FreeFlow
        } else if gaps.iter().all(|g| *g <= threshold) {
            CongestionStage::Congested
        } else {
            CongestionStage::Undefined
        }
    }

    #[test]
    fn exhaustive_patterns_match_oracle() {
        // gap values chosen to cover below/above threshold and every
        // relative ordering, including ties inside the tolerance band
        let values = [3.0, 3.05, 8.0, 14.0, 16.0, 25.0];
        let threshold = 15.0;
        // zones of 3 vehicles -> 3 gaps; zones of 4 -> 4 gaps
        for &n in &[3usize, 4] {
            let mut idx = vec![0usize; n];
            loop {
                let gaps: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
                assert_eq!(
                    label_gaps(&gaps, threshold),
                    oracle(&gaps, threshold),
                    "gaps {gaps:?}"
                );
                // odometer increment
                let mut k = 0;
                loop {
                    idx[k] += 1;
                    if idx[k] < values.len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                    if k == n {
                        break;
                    }
                }
                if k == n {
                    break;
                }
            }
        }
    }

    #[test]
    fn zone_validation_rejects_disorder() {
        assert!(SensingZoneSnapshot::new(
            50.0,
            vec![ZoneEntry { r_p: 10.0, r_v: 0.0 }, ZoneEntry { r_p: 5.0, r_v: 0.0 }]
        )
        .is_err());
        assert!(SensingZoneSnapshot::new(50.0, vec![ZoneEntry { r_p: 60.0, r_v: 0.0 }]).is_err());
    }

    #[test]
    fn empty_zone_features_are_all_padding() {
        let model = CscModel::new(50.0, 13.41, 8, 15.0, 0).unwrap();
        let snap = SensingZoneSnapshot::new(50.0, vec![]).unwrap();
        let f = model.features(&snap);
        assert_eq!(f.len(), 16);
        for pair in f.chunks(2) {
            assert_eq!(pair, &[50.0, 0.0]);
        }
        // forecast on all-pad features is still a valid stage
        let stage = model.forecast(&snap);
        assert!(CongestionStage::ALL.contains(&stage));
    }

    #[test]
    fn one_hot_has_single_one() {
        for stage in CongestionStage::ALL {
            let oh = stage.one_hot();
            assert_eq!(oh.iter().sum::<f64>(), 1.0);
            assert_eq!(oh[stage.index()], 1.0);
        }
    }
}
