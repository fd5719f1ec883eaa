//! Fixed-timestep world model for the ring and bottleneck networks.
//!
//! Each step queries every vehicle's longitudinal policy for a commanded
//! acceleration (IDM plus noise for HVs, a controller for active RVs,
//! humanizer overrides and perturbation pins where scheduled), clamps it
//! through the braking-envelope failsafe, then integrates semi-implicitly:
//! velocity first, position with the new velocity. Identical seed and
//! configuration give a bit-identical trace.

pub mod failsafe;
pub mod network;
pub mod trace;

use serde::{Deserialize, Serialize};

pub use failsafe::{apply_failsafe, max_safe_speed, FailsafeOutcome, FailsafeParams};
pub use network::{
    leader_views, BottleneckNet, LeaderInfo, LeaderView, Network, Segment, FREE_ROAD_GAP,
};
pub use trace::{SimEvent, Trace, TraceRow};

use crate::controllers::{ControlInput, PolicyController, RvController, RV_ACTION_BOUND};
use crate::csc::mlp::Mlp;
use crate::csc::{CscModel, SensingZoneSnapshot, ZoneEntry};
use crate::error::{Error, Result};
use crate::humanizer::{AccelEvent, AccelEventModel};
use crate::idm::{equilibrium_velocity, idm_accel, IdmParams};
use crate::rng::SimRng;

pub const FLAG_PERTURBED: u8 = 1;
pub const FLAG_HUMAN_EVENT: u8 = 2;
pub const FLAG_MERGED: u8 = 4;
pub const FLAG_EMERGENCY: u8 = 8;

const RNG_DOMAIN_NOISE: u64 = 1;
const RNG_DOMAIN_HUMANIZER: u64 = 2;
const RNG_DOMAIN_INFLOW: u64 = 3;
const RNG_DOMAIN_PERTURB: u64 = 4;

/// Longitudinal policy tag carried in traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerTag {
    Idm,
    Fs,
    Piws,
    Bcm,
    Lacc,
    ScriptedGap,
    Policy,
}

impl ControllerTag {
    pub fn name(self) -> &'static str {
        match self {
            ControllerTag::Idm => "idm",
            ControllerTag::Fs => "fs",
            ControllerTag::Piws => "piws",
            ControllerTag::Bcm => "bcm",
            ControllerTag::Lacc => "lacc",
            ControllerTag::ScriptedGap => "scripted_gap",
            ControllerTag::Policy => "policy",
        }
    }
}

/// Per-vehicle kinematic record. `position` is the front bumper along the
/// route; the bumper gap to the leader is
/// `leader.position - position - leader.length` (mod ring length).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u32,
    pub lane: u32,
    pub position: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub length: f64,
    pub controller: ControllerTag,
    pub is_rv: bool,
}

pub const DEFAULT_VEHICLE_LENGTH: f64 = 5.0;

// ---------------------------------------------------------------------------
// Scenarios
// ---------------------------------------------------------------------------

/// Single-lane circular road.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RingScenario {
    pub ring_length: f64,
    pub n_vehicles: usize,
    pub speed_limit: f64,
    pub vehicle_length: f64,
}

impl Default for RingScenario {
    fn default() -> Self {
        // 22 vehicles at 85 veh/km; 30 mph limit
        RingScenario::from_density(85.0, 22)
    }
}

impl RingScenario {
    /// Ring sized so that `n` vehicles give the requested density.
    pub fn from_density(density_veh_km: f64, n_vehicles: usize) -> Self {
        RingScenario {
            ring_length: n_vehicles as f64 / (density_veh_km / 1000.0),
            n_vehicles,
            speed_limit: 13.41,
            vehicle_length: DEFAULT_VEHICLE_LENGTH,
        }
    }

    pub fn density_veh_per_m(&self) -> f64 {
        self.n_vehicles as f64 / self.ring_length
    }

    pub fn validate(&self) -> Result<()> {
        if self.ring_length <= 0.0 || self.speed_limit <= 0.0 || self.vehicle_length <= 0.0 {
            return Err(Error::config("ring dimensions must be positive"));
        }
        if self.n_vehicles == 0 {
            return Err(Error::config("ring needs at least one vehicle"));
        }
        if self.n_vehicles as f64 * self.vehicle_length >= self.ring_length {
            return Err(Error::config(format!(
                "{} vehicles of length {} do not fit on a {} m ring",
                self.n_vehicles, self.vehicle_length, self.ring_length
            )));
        }
        Ok(())
    }
}

/// Segment chain with zipper merges at lane drops.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BottleneckScenario {
    /// Ordered (length m, lane count) pairs; lane counts non-increasing.
    pub segments: Vec<(f64, u32)>,
    pub inflow_veh_hr: f64,
    pub speed_limit: f64,
    pub merge_zone: f64,
    pub vehicle_length: f64,
}

impl Default for BottleneckScenario {
    fn default() -> Self {
        BottleneckScenario {
            segments: vec![(300.0, 8), (200.0, 4), (200.0, 2)],
            inflow_veh_hr: 3600.0,
            speed_limit: 15.0,
            merge_zone: 100.0,
            vehicle_length: DEFAULT_VEHICLE_LENGTH,
        }
    }
}

impl BottleneckScenario {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::config("bottleneck needs at least one segment"));
        }
        let mut prev = u32::MAX;
        for &(len, lanes) in &self.segments {
            if len <= 0.0 || lanes == 0 {
                return Err(Error::config("segment lengths and lane counts must be positive"));
            }
            if lanes > prev {
                return Err(Error::config("lane counts must be non-increasing"));
            }
            prev = lanes;
        }
        if self.inflow_veh_hr <= 0.0 {
            return Err(Error::config("inflow rate must be positive"));
        }
        if self.speed_limit <= 0.0 || self.merge_zone <= 0.0 {
            return Err(Error::config("speed limit and merge zone must be positive"));
        }
        Ok(())
    }

    pub fn network(&self) -> BottleneckNet {
        BottleneckNet::new(
            self.segments.iter().map(|&(length, lanes)| Segment { length, lanes }).collect(),
            self.merge_zone,
        )
    }
}

// ---------------------------------------------------------------------------
// Fleet
// ---------------------------------------------------------------------------

/// Which controller RVs run.
#[derive(Debug, Clone)]
pub enum RvSpec {
    Fs(crate::controllers::FsParams),
    Piws(crate::controllers::PiwsParams),
    Bcm(crate::controllers::BcmParams),
    Lacc(crate::controllers::LaccParams),
    ScriptedGap(crate::controllers::ScriptedGapParams),
    Policy { policy: Mlp, csc: CscModel },
}

impl RvSpec {
    pub fn tag(&self) -> ControllerTag {
        match self {
            RvSpec::Fs(_) => ControllerTag::Fs,
            RvSpec::Piws(_) => ControllerTag::Piws,
            RvSpec::Bcm(_) => ControllerTag::Bcm,
            RvSpec::Lacc(_) => ControllerTag::Lacc,
            RvSpec::ScriptedGap(_) => ControllerTag::ScriptedGap,
            RvSpec::Policy { .. } => ControllerTag::Policy,
        }
    }

    /// Instantiate per-vehicle controller state. `v_des_default` fills in
    /// desired velocities left unset (the scenario's uniform-flow
    /// equilibrium on the ring, the speed limit in the bottleneck).
    fn instantiate(&self, v_des_default: f64, dt: f64) -> RvController {
        match self {
            RvSpec::Fs(p) => RvController::Fs { params: *p, u_des: p.u_des.unwrap_or(v_des_default) },
            RvSpec::Piws(p) => RvController::Piws {
                params: *p,
                state: crate::controllers::PiwsState::new(p.history_window_s, dt),
            },
            RvSpec::Bcm(p) => RvController::Bcm { params: *p, v_des: p.v_des.unwrap_or(v_des_default) },
            RvSpec::Lacc(p) => RvController::Lacc { params: *p, state: Default::default() },
            RvSpec::ScriptedGap(p) => RvController::ScriptedGap { params: *p },
            RvSpec::Policy { policy, csc } => RvController::Policy(Box::new(PolicyController {
                policy: policy.clone(),
                csc: csc.clone(),
            })),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RvSpec::Fs(p) => p.validate(),
            RvSpec::Piws(p) => p.validate(),
            RvSpec::Bcm(p) => p.validate(),
            RvSpec::Lacc(p) => p.validate(),
            RvSpec::ScriptedGap(_) => Ok(()),
            RvSpec::Policy { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Platooned,
    Dispersed,
}

/// Fleet composition: all-IDM when `rv` is `None`.
#[derive(Debug, Clone, Default)]
pub struct FleetSpec {
    pub rv: Option<RvSpec>,
    /// Number of RVs on the ring.
    pub rv_count: usize,
    /// RV probability per insertion in the bottleneck.
    pub penetration: f64,
    pub placement: Placement,
}

impl FleetSpec {
    pub fn all_idm() -> Self {
        FleetSpec::default()
    }

    pub fn ring(rv: RvSpec, rv_count: usize) -> Self {
        FleetSpec { rv: Some(rv), rv_count, penetration: 0.0, placement: Placement::Platooned }
    }

    pub fn bottleneck(rv: Option<RvSpec>, penetration: f64) -> Self {
        FleetSpec { rv, rv_count: 0, penetration, placement: Placement::Dispersed }
    }
}

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbTarget {
    /// The HV immediately ahead of the lead RV.
    HvLeadingRv,
    /// A seeded-random HV (all-IDM protocol).
    RandomHv,
    Vehicle(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub target: PerturbTarget,
    pub start_time_s: f64,
    /// Velocity the target is pinned to (m/s).
    pub hold_velocity: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSchedule {
    pub dt: f64,
    pub horizon_steps: u64,
    pub warmup_steps: u64,
    pub measurement_window_s: f64,
    pub humanizer_enabled: bool,
    /// When humanizer events begin; defaults to RV activation time.
    pub humanizer_start_s: Option<f64>,
    /// Step at which RVs switch from IDM to their controller; defaults to
    /// `warmup_steps` on the ring and 0 in the bottleneck.
    pub rv_activation_step: Option<u64>,
    pub perturbation: Option<PerturbationSpec>,
}

impl Default for EpisodeSchedule {
    fn default() -> Self {
        EpisodeSchedule {
            dt: 0.1,
            horizon_steps: 6000,
            warmup_steps: 2500,
            measurement_window_s: 360.0,
            humanizer_enabled: false,
            humanizer_start_s: None,
            rv_activation_step: None,
            perturbation: None,
        }
    }
}

impl EpisodeSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.dt <= 0.0 {
            return Err(Error::config("dt must be positive"));
        }
        if self.warmup_steps >= self.horizon_steps {
            return Err(Error::config("warmup must end before the horizon"));
        }
        if self.measurement_window_s > self.horizon_steps as f64 * self.dt {
            return Err(Error::config("measurement window exceeds the horizon"));
        }
        if let Some(p) = &self.perturbation {
            if p.duration_s <= 0.0 || p.start_time_s < 0.0 || p.hold_velocity < 0.0 {
                return Err(Error::config("invalid perturbation spec"));
            }
            if p.start_time_s >= self.horizon_steps as f64 * self.dt {
                return Err(Error::config("perturbation starts after the horizon"));
            }
        }
        Ok(())
    }

    pub fn horizon_s(&self) -> f64 {
        self.horizon_steps as f64 * self.dt
    }

    pub fn activation_step(&self) -> u64 {
        self.rv_activation_step.unwrap_or(self.warmup_steps)
    }

    pub fn humanizer_start(&self) -> f64 {
        self.humanizer_start_s
            .unwrap_or(self.activation_step() as f64 * self.dt)
    }

    /// Measurement window: the trailing `measurement_window_s` of the
    /// horizon, clipped to start no earlier than RV activation.
    pub fn measurement_bounds(&self) -> (f64, f64) {
        let end = self.horizon_s();
        let start = (end - self.measurement_window_s).max(self.activation_step() as f64 * self.dt);
        (start, end)
    }
}

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct SimVehicle {
    state: VehicleState,
    segment: usize,
    rv: Option<RvController>,
    events: Vec<AccelEvent>,
    event_cursor: usize,
    logged_start: Option<usize>,
    logged_clamp: Option<usize>,
    flags: u8,
}

impl SimVehicle {
    fn active_event(&mut self, t: f64) -> Option<AccelEvent> {
        while self.event_cursor < self.events.len()
            && t >= self.events[self.event_cursor].start_time + self.events[self.event_cursor].duration
        {
            self.event_cursor += 1;
        }
        let ev = self.events.get(self.event_cursor)?;
        ev.active_at(t).then_some(*ev)
    }
}

#[derive(Debug, Clone, Copy)]
struct ActivePerturbation {
    target: u32,
    end_step: u64,
    hold: f64,
}

/// The simulation state plus everything needed to advance it.
#[derive(Debug, Clone)]
pub struct World {
    pub network: Network,
    pub schedule: EpisodeSchedule,
    pub idm: IdmParams,
    pub failsafe: FailsafeParams,
    pub speed_limit: f64,
    vehicles: Vec<SimVehicle>,
    pub step_count: u64,
    pub time: f64,
    seed: u64,
    noise_rng: SimRng,
    inflow_rng: SimRng,
    perturb_rng: SimRng,
    humanizer: Option<AccelEventModel>,
    inflow_veh_hr: f64,
    penetration: f64,
    rv_spec: Option<RvSpec>,
    rv_v_des_default: f64,
    vehicle_length: f64,
    next_id: u32,
    active_perturbation: Option<ActivePerturbation>,
    perturb_started: bool,
    events_log: Vec<SimEvent>,
    exits: Vec<(u64, u32)>,
    pub insertions: u64,
    pub rv_insertions: u64,
}

/// Uniformly spaced ring fleet at rest; RVs platooned (or dispersed) per
/// the fleet spec, driving as IDM until activation.
pub fn build_ring(
    scenario: &RingScenario,
    fleet: &FleetSpec,
    idm: IdmParams,
    failsafe_params: FailsafeParams,
    schedule: EpisodeSchedule,
    humanizer: Option<AccelEventModel>,
    seed: u64,
) -> Result<World> {
    scenario.validate()?;
    idm.validate()?;
    schedule.validate()?;
    if let Some(rv) = &fleet.rv {
        rv.validate()?;
    }
    if let Some(model) = &humanizer {
        model.validate()?;
    }
    let n = scenario.n_vehicles;
    if fleet.rv.is_some() && fleet.rv_count > n {
        return Err(Error::config(format!(
            "fleet asks for {} RVs but the ring only holds {} vehicles",
            fleet.rv_count, n
        )));
    }

    let v_eq = equilibrium_velocity(&idm, scenario.density_veh_per_m(), scenario.vehicle_length)?;
    let spacing = scenario.ring_length / n as f64;
    let dt = schedule.dt;
    let hum_start = schedule.humanizer_start();
    let horizon_s = schedule.horizon_s();

    let mut rv_slots = vec![false; n];
    if let Some(_rv) = &fleet.rv {
        match fleet.placement {
            Placement::Platooned => {
                for slot in rv_slots.iter_mut().take(fleet.rv_count) {
                    *slot = true;
                }
            }
            Placement::Dispersed => {
                for k in 0..fleet.rv_count {
                    let idx = (k * n) / fleet.rv_count.max(1);
                    rv_slots[idx] = true;
                }
            }
        }
    }

    let mut vehicles = Vec::with_capacity(n);
    for i in 0..n {
        let is_rv = rv_slots[i];
        let tag = if is_rv { fleet.rv.as_ref().unwrap().tag() } else { ControllerTag::Idm };
        let events = if schedule.humanizer_enabled && !is_rv {
            let model = humanizer.as_ref().ok_or_else(|| Error::config("humanizer enabled but no event model supplied"))?;
            shifted_schedule(model, seed, i as u32, hum_start, horizon_s)?
        } else {
            Vec::new()
        };
        vehicles.push(SimVehicle {
            state: VehicleState {
                id: i as u32,
                lane: 0,
                position: i as f64 * spacing,
                velocity: 0.0,
                acceleration: 0.0,
                length: scenario.vehicle_length,
                controller: tag,
                is_rv,
            },
            segment: 0,
            rv: if is_rv { Some(fleet.rv.as_ref().unwrap().instantiate(v_eq, dt)) } else { None },
            events,
            event_cursor: 0,
            logged_start: None,
            logged_clamp: None,
            flags: 0,
        });
    }

    Ok(World {
        network: Network::Ring { length: scenario.ring_length },
        schedule,
        idm,
        failsafe: failsafe_params,
        speed_limit: scenario.speed_limit,
        vehicles,
        step_count: 0,
        time: 0.0,
        seed,
        noise_rng: SimRng::substream(seed, RNG_DOMAIN_NOISE, 0),
        inflow_rng: SimRng::substream(seed, RNG_DOMAIN_INFLOW, 0),
        perturb_rng: SimRng::substream(seed, RNG_DOMAIN_PERTURB, 0),
        humanizer,
        inflow_veh_hr: 0.0,
        penetration: 0.0,
        rv_spec: fleet.rv.clone(),
        rv_v_des_default: v_eq,
        vehicle_length: scenario.vehicle_length,
        next_id: n as u32,
        active_perturbation: None,
        perturb_started: false,
        events_log: Vec::new(),
        exits: Vec::new(),
        insertions: 0,
        rv_insertions: 0,
    })
}

/// Empty bottleneck with a seeded inflow process; entering vehicles are
/// tagged RV with probability `fleet.penetration`. RVs are active from
/// step 0 unless the schedule says otherwise.
pub fn build_bottleneck(
    scenario: &BottleneckScenario,
    fleet: &FleetSpec,
    idm: IdmParams,
    failsafe_params: FailsafeParams,
    mut schedule: EpisodeSchedule,
    humanizer: Option<AccelEventModel>,
    seed: u64,
) -> Result<World> {
    scenario.validate()?;
    idm.validate()?;
    if schedule.rv_activation_step.is_none() {
        schedule.rv_activation_step = Some(0);
    }
    schedule.validate()?;
    if let Some(rv) = &fleet.rv {
        rv.validate()?;
    }
    if !(0.0..=1.0).contains(&fleet.penetration) {
        return Err(Error::config("penetration must lie in [0, 1]"));
    }
    if let Some(model) = &humanizer {
        model.validate()?;
    }

    Ok(World {
        network: Network::Bottleneck(scenario.network()),
        schedule,
        idm,
        failsafe: failsafe_params,
        speed_limit: scenario.speed_limit,
        vehicles: Vec::new(),
        step_count: 0,
        time: 0.0,
        seed,
        noise_rng: SimRng::substream(seed, RNG_DOMAIN_NOISE, 0),
        inflow_rng: SimRng::substream(seed, RNG_DOMAIN_INFLOW, 0),
        perturb_rng: SimRng::substream(seed, RNG_DOMAIN_PERTURB, 0),
        humanizer,
        inflow_veh_hr: scenario.inflow_veh_hr,
        penetration: fleet.penetration,
        rv_spec: fleet.rv.clone(),
        rv_v_des_default: scenario.speed_limit,
        vehicle_length: scenario.vehicle_length,
        next_id: 0,
        active_perturbation: None,
        perturb_started: false,
        events_log: Vec::new(),
        exits: Vec::new(),
        insertions: 0,
        rv_insertions: 0,
    })
}

fn shifted_schedule(
    model: &AccelEventModel,
    seed: u64,
    id: u32,
    start_s: f64,
    horizon_s: f64,
) -> Result<Vec<AccelEvent>> {
    if horizon_s <= start_s {
        return Ok(Vec::new());
    }
    let mut rng = SimRng::substream(seed, RNG_DOMAIN_HUMANIZER, id as u64);
    let mut events = model.generate_schedule(&mut rng, horizon_s - start_s)?;
    for ev in events.iter_mut() {
        ev.start_time += start_s;
    }
    Ok(events)
}

impl World {
    pub fn n_vehicles(&self) -> usize {
        self.vehicles.len()
    }

    pub fn vehicle_states(&self) -> Vec<VehicleState> {
        self.vehicles.iter().map(|v| v.state).collect()
    }

    pub fn find_vehicle(&self, id: u32) -> Option<VehicleState> {
        self.vehicles.iter().find(|v| v.state.id == id).map(|v| v.state)
    }

    pub fn mean_velocity(&self) -> f64 {
        if self.vehicles.is_empty() {
            return 0.0;
        }
        self.vehicles.iter().map(|v| v.state.velocity).sum::<f64>() / self.vehicles.len() as f64
    }

    pub fn rv_ids(&self) -> Vec<u32> {
        self.vehicles.iter().filter(|v| v.state.is_rv).map(|v| v.state.id).collect()
    }

    /// Uniform-flow equilibrium velocity this world resolved for
    /// controllers with unset desired velocities.
    pub fn v_des_default(&self) -> f64 {
        self.rv_v_des_default
    }

    /// Test and RL-environment hook: pin every vehicle to one velocity.
    pub fn set_uniform_velocity(&mut self, v: f64) {
        for veh in self.vehicles.iter_mut() {
            veh.state.velocity = v;
        }
    }

    /// Schedule a perturbation starting at the next step. Errors if an
    /// explicit target vehicle is not present.
    pub fn inject_perturbation(&mut self, target: PerturbTarget, hold_velocity: f64, duration_s: f64) -> Result<()> {
        if let PerturbTarget::Vehicle(id) = target {
            if self.find_vehicle(id).is_none() {
                return Err(Error::config(format!("perturbation target {id} is not in the network")));
            }
        }
        self.schedule.perturbation = Some(PerturbationSpec {
            target,
            start_time_s: self.time,
            hold_velocity,
            duration_s,
        });
        self.perturb_started = false;
        Ok(())
    }

    /// Sensing zone ahead of a vehicle: follow the leader chain until the
    /// zone boundary, collecting relative position and velocity.
    pub fn sensing_zone_of(&self, vehicle_id: u32, zone_length: f64, max_entries: usize) -> Result<SensingZoneSnapshot> {
        let states = self.vehicle_states();
        let views = leader_views(&self.network, &states);
        let idx = states
            .iter()
            .position(|s| s.id == vehicle_id)
            .ok_or_else(|| Error::domain(format!("vehicle {vehicle_id} not in the network")))?;
        build_zone(&states, &views, idx, zone_length, max_entries)
    }

    fn resolve_perturbation(&mut self, states: &[VehicleState], views: &[LeaderView]) -> Result<()> {
        if let Some(active) = self.active_perturbation {
            if self.step_count >= active.end_step {
                self.events_log.push(SimEvent::PerturbEnd { step: self.step_count, vehicle: active.target });
                self.active_perturbation = None;
            }
        }
        let Some(spec) = self.schedule.perturbation else {
            return Ok(());
        };
        let start_step = (spec.start_time_s / self.schedule.dt).round() as u64;
        if self.perturb_started || self.step_count != start_step {
            return Ok(());
        }
        let target = match spec.target {
            PerturbTarget::Vehicle(id) => {
                if states.iter().all(|s| s.id != id) {
                    return Err(Error::config(format!("perturbation target {id} is not in the network")));
                }
                id
            }
            PerturbTarget::RandomHv => {
                let hvs: Vec<u32> = states.iter().filter(|s| !s.is_rv).map(|s| s.id).collect();
                if hvs.is_empty() {
                    return Err(Error::config("no HV available to perturb"));
                }
                hvs[self.perturb_rng.index(hvs.len())]
            }
            PerturbTarget::HvLeadingRv => {
                let mut rvs: Vec<usize> = (0..states.len()).filter(|&i| states[i].is_rv).collect();
                rvs.sort_by_key(|&i| states[i].id);
                let lead = rvs
                    .into_iter()
                    .find_map(|i| {
                        views[i]
                            .leader
                            .as_ref()
                            .filter(|l| !states[l.idx].is_rv)
                            .map(|l| states[l.idx].id)
                    })
                    .ok_or_else(|| Error::config("no RV with an HV leader to perturb"))?;
                lead
            }
        };
        let n_steps = (spec.duration_s / self.schedule.dt).round().max(1.0) as u64;
        self.active_perturbation = Some(ActivePerturbation {
            target,
            end_step: start_step + n_steps,
            hold: spec.hold_velocity,
        });
        self.perturb_started = true;
        self.events_log.push(SimEvent::PerturbStart { step: self.step_count, vehicle: target });
        Ok(())
    }

    /// Advance the world by one timestep.
    pub fn step(&mut self) -> Result<()> {
        let dt = self.schedule.dt;
        let t = self.time;
        let activation = self.schedule.activation_step();
        let states = self.vehicle_states();
        let views = leader_views(&self.network, &states);
        self.resolve_perturbation(&states, &views)?;

        let n = self.vehicles.len();
        let mut accels = vec![0.0; n];
        for i in 0..n {
            // one draw per vehicle per step keeps the stream layout uniform
            let noise = self.noise_rng.normal(0.0, self.idm.noise_sigma);
            let view = &views[i];
            let me = states[i];
            let (gap, headway, v_lead, has_leader) = match view.leader {
                Some(l) => (l.gap, l.headway, l.velocity, true),
                None => (FREE_ROAD_GAP, FREE_ROAD_GAP, me.velocity, false),
            };
            let (gap_follow, v_follow) = match view.follower {
                Some(f) => (f.gap, f.velocity),
                None => (gap, me.velocity),
            };
            let zone = match &self.vehicles[i].rv {
                Some(RvController::Policy(pc)) => {
                    Some(build_zone(&states, &views, i, pc.csc.zone_length, pc.csc.max_zone_vehicles)?)
                }
                _ => None,
            };
            let pinned = self
                .active_perturbation
                .filter(|p| p.target == me.id && self.step_count < p.end_step)
                .map(|p| p.hold);

            let idm_params = self.idm;
            let failsafe_params = self.failsafe;
            let veh = &mut self.vehicles[i];
            let prev_flags = veh.flags;
            veh.flags = 0;
            if let Some(rv) = veh.rv.as_mut() {
                rv.observe(me.velocity);
            }

            let a_cmd = if let Some(hold) = pinned {
                veh.flags |= FLAG_PERTURBED;
                (hold - me.velocity) / dt
            } else if veh.state.is_rv && self.step_count >= activation {
                let input = ControlInput {
                    v: me.velocity,
                    gap,
                    headway,
                    v_lead,
                    has_leader,
                    gap_follow,
                    v_follow,
                    zone: zone.as_ref(),
                    dt,
                };
                let raw = veh.rv.as_mut().expect("RV has controller").accel(&input);
                raw.clamp(-RV_ACTION_BOUND, RV_ACTION_BOUND)
            } else {
                let base = idm_accel(&idm_params, me.velocity, gap, v_lead)? + noise;
                match veh.active_event(t) {
                    Some(ev) => {
                        veh.flags |= FLAG_HUMAN_EVENT;
                        if veh.logged_start != Some(veh.event_cursor) {
                            veh.logged_start = Some(veh.event_cursor);
                            self.events_log.push(SimEvent::HumanEventStart {
                                step: self.step_count,
                                vehicle: me.id,
                                magnitude: ev.magnitude,
                                duration: ev.duration,
                            });
                        }
                        ev.magnitude
                    }
                    None => base,
                }
            };

            let mut a = a_cmd;
            let mut flagged = false;
            for cand in &view.candidates {
                let out = apply_failsafe(a_cmd, me.velocity, cand.velocity, cand.gap, &failsafe_params, dt);
                a = a.min(out.accel);
                flagged |= out.flagged;
            }
            let veh = &mut self.vehicles[i];
            if flagged {
                veh.flags |= FLAG_EMERGENCY;
                if prev_flags & FLAG_EMERGENCY == 0 {
                    self.events_log.push(SimEvent::FailsafeEmergency { step: self.step_count, vehicle: me.id });
                }
            }
            if veh.flags & FLAG_HUMAN_EVENT != 0 && a < a_cmd && veh.logged_clamp != Some(veh.event_cursor) {
                veh.logged_clamp = Some(veh.event_cursor);
                self.events_log.push(SimEvent::HumanEventClamped {
                    step: self.step_count,
                    vehicle: me.id,
                    commanded: a_cmd,
                    applied: a,
                });
            }
            accels[i] = a;
        }

        // semi-implicit update, capped at the network speed limit
        for (veh, &a) in self.vehicles.iter_mut().zip(&accels) {
            let v_new = (veh.state.velocity + a * dt).max(0.0).min(self.speed_limit);
            veh.state.velocity = v_new;
            veh.state.position += v_new * dt;
            veh.state.acceleration = a;
        }

        // geometry bookkeeping: ring wrap, segment crossings, exits
        match &self.network {
            Network::Ring { length } => {
                let length = *length;
                for veh in self.vehicles.iter_mut() {
                    if veh.state.position >= length {
                        veh.state.position -= length;
                    }
                }
            }
            Network::Bottleneck(net) => {
                let net = net.clone();
                let total = net.total_length();
                let step = self.step_count;
                let mut exited: Vec<u32> = Vec::new();
                for veh in self.vehicles.iter_mut() {
                    if veh.state.position >= total {
                        exited.push(veh.state.id);
                        continue;
                    }
                    let new_seg = net.segment_of(veh.state.position);
                    if new_seg != veh.segment {
                        let new_lane = net.map_lane(veh.segment, new_seg, veh.state.lane);
                        if new_lane != veh.state.lane {
                            veh.flags |= FLAG_MERGED;
                            self.events_log.push(SimEvent::Merge {
                                step,
                                vehicle: veh.state.id,
                                from_lane: veh.state.lane,
                                to_lane: new_lane,
                                segment: new_seg,
                            });
                        }
                        veh.state.lane = new_lane;
                        veh.segment = new_seg;
                    }
                }
                for id in exited {
                    self.events_log.push(SimEvent::Exit { step, vehicle: id });
                    self.exits.push((step, id));
                }
                self.vehicles.retain(|v| v.state.position < total);
            }
        }

        // the failsafe guarantee: a negative same-lane gap is a hard bug
        let states_after = self.vehicle_states();
        let views_after = leader_views(&self.network, &states_after);
        for (i, view) in views_after.iter().enumerate() {
            for cand in &view.candidates {
                if cand.physical && cand.gap <= 0.0 && cand.idx != i {
                    return Err(Error::Overlap {
                        step: self.step_count,
                        follower: states_after[i].id,
                        leader: states_after[cand.idx].id,
                        gap: cand.gap,
                    });
                }
            }
        }

        if self.inflow_veh_hr > 0.0 {
            self.run_inflow()?;
        }

        self.step_count += 1;
        self.time = self.step_count as f64 * dt;
        Ok(())
    }

    fn run_inflow(&mut self) -> Result<()> {
        let p = self.inflow_veh_hr * self.schedule.dt / 3600.0;
        let mut budget = p;
        while budget >= 1.0 {
            self.try_insert()?;
            budget -= 1.0;
        }
        if budget > 0.0 && self.inflow_rng.bernoulli(budget) {
            self.try_insert()?;
        }
        Ok(())
    }

    fn try_insert(&mut self) -> Result<()> {
        let Network::Bottleneck(net) = &self.network else {
            return Ok(());
        };
        let lanes = net.segments[0].lanes;
        // clearance to the nearest vehicle in each entry lane
        let mut best: Option<(f64, u32, f64)> = None; // (clearance, lane, v_lead)
        for lane in 0..lanes {
            let mut clearance = net.boundaries[1];
            let mut v_lead = self.speed_limit;
            for veh in &self.vehicles {
                if veh.segment == 0 && veh.state.lane == lane {
                    let c = veh.state.position - veh.state.length;
                    if c < clearance {
                        clearance = c;
                        v_lead = veh.state.velocity;
                    }
                }
            }
            if best.map_or(true, |(bc, _, _)| clearance > bc) {
                best = Some((clearance, lane, v_lead));
            }
        }
        let (clearance, lane, v_lead) = best.expect("at least one lane");
        if clearance < self.failsafe.min_gap + 0.5 {
            return Ok(()); // entry blocked; the arrival is dropped
        }
        let v0 = max_safe_speed(clearance, v_lead, &self.failsafe, self.schedule.dt).min(self.speed_limit);
        let is_rv = self.rv_spec.is_some() && self.inflow_rng.bernoulli(self.penetration);
        let id = self.next_id;
        self.next_id += 1;
        let tag = if is_rv { self.rv_spec.as_ref().unwrap().tag() } else { ControllerTag::Idm };
        let events = if self.schedule.humanizer_enabled && !is_rv {
            let model = self
                .humanizer
                .as_ref()
                .ok_or_else(|| Error::config("humanizer enabled but no event model supplied"))?;
            let start = self.schedule.humanizer_start().max(self.time);
            shifted_schedule(model, self.seed, id, start, self.schedule.horizon_s())?
        } else {
            Vec::new()
        };
        self.vehicles.push(SimVehicle {
            state: VehicleState {
                id,
                lane,
                position: 0.0,
                velocity: v0,
                acceleration: 0.0,
                length: self.vehicle_length,
                controller: tag,
                is_rv,
            },
            segment: 0,
            rv: if is_rv {
                Some(
                    self.rv_spec
                        .as_ref()
                        .unwrap()
                        .instantiate(self.rv_v_des_default, self.schedule.dt),
                )
            } else {
                None
            },
            events,
            event_cursor: 0,
            logged_start: None,
            logged_clamp: None,
            flags: 0,
        });
        self.insertions += 1;
        if is_rv {
            self.rv_insertions += 1;
        }
        self.events_log
            .push(SimEvent::Insert { step: self.step_count, vehicle: id, is_rv });
        Ok(())
    }

    fn trace_rows(&self) -> Vec<TraceRow> {
        self.vehicles
            .iter()
            .map(|v| TraceRow { state: v.state, flags: v.flags })
            .collect()
    }
}

/// Walk the leader chain from `idx`, collecting (relative position,
/// relative velocity) pairs inside the zone.
pub fn build_zone(
    states: &[VehicleState],
    views: &[LeaderView],
    idx: usize,
    zone_length: f64,
    max_entries: usize,
) -> Result<SensingZoneSnapshot> {
    let mut entries = Vec::new();
    let mut cur = idx;
    let mut r_acc = 0.0;
    while entries.len() < max_entries {
        let Some(l) = &views[cur].leader else { break };
        r_acc += l.headway;
        if r_acc > zone_length || l.idx == idx {
            break;
        }
        entries.push(ZoneEntry { r_p: r_acc, r_v: states[l.idx].velocity - states[idx].velocity });
        cur = l.idx;
    }
    SensingZoneSnapshot::new(zone_length, entries)
}

/// Run a configured world to its horizon, returning the full trace
/// (horizon + 1 snapshots including t = 0) with the event log.
pub fn run_episode(mut world: World) -> Result<Trace> {
    let mut snapshots = Vec::with_capacity(world.schedule.horizon_steps as usize + 1);
    snapshots.push(world.trace_rows());
    for _ in 0..world.schedule.horizon_steps {
        world.step()?;
        snapshots.push(world.trace_rows());
    }
    Ok(Trace {
        seed: world.seed,
        dt: world.schedule.dt,
        network: world.network.clone(),
        schedule: world.schedule,
        snapshots,
        events: world.events_log,
        exits: world.exits,
        insertions: world.insertions,
        rv_insertions: world.rv_insertions,
    })
}
