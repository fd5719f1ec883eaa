//! Braking-envelope failsafe.
//!
//! A commanded acceleration is clamped so that if the follower applies it
//! for one step and then brakes at `b_max` while its leader also brakes at
//! `b_max` from its current speed, the bumper gap never drops below
//! `min_gap`. The envelope uses the simulator's own discrete update
//! (velocity first, then position), so the clamp is exact, not a
//! continuous-time approximation.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailsafeParams {
    /// Emergency braking bound (m/s^2).
    pub b_max: f64,
    /// Hard minimum bumper gap (m).
    pub min_gap: f64,
}

impl Default for FailsafeParams {
    fn default() -> Self {
        FailsafeParams { b_max: 9.0, min_gap: 0.5 }
    }
}

/// Clamp outcome; `flagged` marks a non-positive gap (failsafe authority
/// exceeded, emergency braking returned).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FailsafeOutcome {
    pub accel: f64,
    pub flagged: bool,
}

/// Distance covered from speed `v` braking at rate `b` per step under the
/// discrete update v_{k+1} = max(0, v_k - b*dt), x += v_{k+1}*dt.
pub fn braking_distance(v: f64, b: f64, dt: f64) -> f64 {
    if v <= 0.0 {
        return 0.0;
    }
    let steps = (v / (b * dt)).ceil() - 1.0;
    let n = steps.max(0.0);
    dt * (n * v - b * dt * n * (n + 1.0) / 2.0)
}

/// Total advance of a vehicle that moves one step at speed `v1` and then
/// brakes at `b`: v1*dt + braking_distance(v1).
fn advance_from(v1: f64, b: f64, dt: f64) -> f64 {
    v1 * dt + braking_distance(v1, b, dt)
}

/// Largest first-step speed whose total advance stays within `budget`.
/// The advance is piecewise linear in the speed, so this inverts it
/// exactly.
fn max_first_step_speed(budget: f64, b: f64, dt: f64) -> f64 {
    if budget <= 0.0 {
        return 0.0;
    }
    // advance(m*b*dt) = b*dt^2 * m*(m+1)/2; find the piece containing budget
    let c = 2.0 * budget / (b * dt * dt);
    let mut m = (((1.0 + 4.0 * c).sqrt() - 1.0) / 2.0).floor();
    if m < 0.0 {
        m = 0.0;
    }
    // guard against fp rounding on the piece boundary
    while b * dt * dt * m * (m + 1.0) / 2.0 > budget {
        m -= 1.0;
    }
    while b * dt * dt * (m + 1.0) * (m + 2.0) / 2.0 <= budget {
        m += 1.0;
    }
    let v1 = (budget + b * dt * dt * m * (m + 1.0) / 2.0) / (dt * (m + 1.0));
    v1.min((m + 1.0) * b * dt)
}

/// Clamp `a_cmd` to the braking envelope for a follower at speed `v_f`
/// with bumper gap `gap` to a leader at speed `v_l`.
pub fn apply_failsafe(
    a_cmd: f64,
    v_f: f64,
    v_l: f64,
    gap: f64,
    p: &FailsafeParams,
    dt: f64,
) -> FailsafeOutcome {
    if gap <= 0.0 {
        return FailsafeOutcome { accel: -p.b_max, flagged: true };
    }
    if gap < p.min_gap {
        // already inside the protected gap: full braking until it reopens
        return FailsafeOutcome { accel: -p.b_max, flagged: false };
    }
    let u1 = (v_l - p.b_max * dt).max(0.0);
    // end-state condition: follower advance <= gap - min_gap + leader advance
    let budget = gap - p.min_gap + advance_from(u1, p.b_max, dt);
    let v1_env = max_first_step_speed(budget, p.b_max, dt);
    // first-step condition: gap after one step stays >= min_gap
    let v1_step = (gap - p.min_gap) / dt + u1;
    let v1_max = v1_env.min(v1_step).max(0.0);
    let a_safe = (v1_max - v_f) / dt;
    FailsafeOutcome { accel: a_cmd.min(a_safe).max(-p.b_max), flagged: false }
}

/// Safe initial speed for a vehicle inserted with bumper gap `gap` behind
/// a leader at `v_l` (used by the bottleneck inflow).
pub fn max_safe_speed(gap: f64, v_l: f64, p: &FailsafeParams, dt: f64) -> f64 {
    if gap < p.min_gap {
        return 0.0;
    }
    let u1 = (v_l - p.b_max * dt).max(0.0);
    let budget = gap - p.min_gap + advance_from(u1, p.b_max, dt);
    let v1_env = max_first_step_speed(budget, p.b_max, dt);
    let v1_step = (gap - p.min_gap) / dt + u1;
    v1_env.min(v1_step).max(0.0)
}
