//! Episode traces: per-step vehicle snapshots plus the event log, with the
//! CSV serializations the tooling consumes.

use std::io::Write;

use serde::Serialize;

use super::{EpisodeSchedule, Network, VehicleState};
use crate::error::Result;

/// One vehicle in one snapshot; flags are the FLAG_* bits set during the
/// step that produced the snapshot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub state: VehicleState,
    pub flags: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimEvent {
    PerturbStart { step: u64, vehicle: u32 },
    PerturbEnd { step: u64, vehicle: u32 },
    HumanEventStart { step: u64, vehicle: u32, magnitude: f64, duration: f64 },
    HumanEventClamped { step: u64, vehicle: u32, commanded: f64, applied: f64 },
    Merge { step: u64, vehicle: u32, from_lane: u32, to_lane: u32, segment: usize },
    Insert { step: u64, vehicle: u32, is_rv: bool },
    Exit { step: u64, vehicle: u32 },
    FailsafeEmergency { step: u64, vehicle: u32 },
}

/// Complete record of one episode. A trace is a pure function of
/// (configuration, seed).
#[derive(Debug, Clone)]
pub struct Trace {
    pub seed: u64,
    pub dt: f64,
    pub network: Network,
    pub schedule: EpisodeSchedule,
    /// horizon + 1 snapshots, including t = 0.
    pub snapshots: Vec<Vec<TraceRow>>,
    pub events: Vec<SimEvent>,
    /// (step, vehicle id) for every bottleneck exit.
    pub exits: Vec<(u64, u32)>,
    pub insertions: u64,
    pub rv_insertions: u64,
}

impl Trace {
    pub fn n_steps(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn time_at(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn step_at(&self, time_s: f64) -> usize {
        ((time_s / self.dt).round() as usize).min(self.n_steps())
    }

    /// Network-average velocity per step.
    pub fn mean_velocity_series(&self) -> Vec<f64> {
        self.snapshots
            .iter()
            .map(|rows| {
                if rows.is_empty() {
                    0.0
                } else {
                    rows.iter().map(|r| r.state.velocity).sum::<f64>() / rows.len() as f64
                }
            })
            .collect()
    }

    /// Velocity series of one vehicle (None where absent).
    pub fn velocity_of(&self, id: u32) -> Vec<Option<f64>> {
        self.snapshots
            .iter()
            .map(|rows| rows.iter().find(|r| r.state.id == id).map(|r| r.state.velocity))
            .collect()
    }

    /// Acceleration series of one vehicle (None where absent).
    pub fn accel_of(&self, id: u32) -> Vec<Option<f64>> {
        self.snapshots
            .iter()
            .map(|rows| rows.iter().find(|r| r.state.id == id).map(|r| r.state.acceleration))
            .collect()
    }

    /// Vehicle ids tagged RV anywhere in the trace.
    pub fn rv_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = Vec::new();
        for rows in &self.snapshots {
            for r in rows {
                if r.state.is_rv && !ids.contains(&r.state.id) {
                    ids.push(r.state.id);
                }
            }
        }
        ids.sort_unstable();
        ids
    }

    /// CSV with one row per (step, vehicle).
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "step,time_s,vehicle_id,lane,position_m,velocity_mps,accel_mps2,controller,event_flags")?;
        for (step, rows) in self.snapshots.iter().enumerate() {
            let time = self.time_at(step);
            for r in rows {
                writeln!(
                    out,
                    "{},{:.1},{},{},{:.6},{:.6},{:.6},{},{}",
                    step,
                    time,
                    r.state.id,
                    r.state.lane,
                    r.state.position,
                    r.state.velocity,
                    r.state.acceleration,
                    r.state.controller.name(),
                    r.flags
                )?;
            }
        }
        Ok(())
    }

    /// Event log as CSV: step,kind,vehicle,a,b.
    pub fn write_events_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "step,kind,vehicle_id,value_a,value_b")?;
        for ev in &self.events {
            match *ev {
                SimEvent::PerturbStart { step, vehicle } => writeln!(out, "{step},perturb_start,{vehicle},,")?,
                SimEvent::PerturbEnd { step, vehicle } => writeln!(out, "{step},perturb_end,{vehicle},,")?,
                SimEvent::HumanEventStart { step, vehicle, magnitude, duration } => {
                    writeln!(out, "{step},human_event,{vehicle},{magnitude:.4},{duration:.4}")?
                }
                SimEvent::HumanEventClamped { step, vehicle, commanded, applied } => {
                    writeln!(out, "{step},human_event_clamped,{vehicle},{commanded:.4},{applied:.4}")?
                }
                SimEvent::Merge { step, vehicle, from_lane, to_lane, .. } => {
                    writeln!(out, "{step},merge,{vehicle},{from_lane},{to_lane}")?
                }
                SimEvent::Insert { step, vehicle, is_rv } => {
                    writeln!(out, "{step},insert,{vehicle},{},", u8::from(is_rv))?
                }
                SimEvent::Exit { step, vehicle } => writeln!(out, "{step},exit,{vehicle},,")?,
                SimEvent::FailsafeEmergency { step, vehicle } => {
                    writeln!(out, "{step},failsafe_emergency,{vehicle},,")?
                }
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to vec");
        String::from_utf8(buf).expect("csv is utf8")
    }
}
