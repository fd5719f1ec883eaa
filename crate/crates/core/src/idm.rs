//! Human-driver longitudinal model: IDM with stochastic acceleration noise.
//!
//! `s` throughout is the bumper gap to the leader (space headway minus the
//! leader's length), and `v_f` is the leader ("front") velocity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// IDM parameters. Defaults follow the Treiber/Kesting textbook values
/// commonly used for ring experiments.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    /// Maximum acceleration (m/s^2).
    pub a_max: f64,
    /// Desired velocity (m/s).
    pub v0: f64,
    /// Acceleration exponent.
    pub delta: f64,
    /// Minimum gap at standstill (m).
    pub s0: f64,
    /// Desired time gap (s).
    pub t_gap: f64,
    /// Comfortable deceleration (m/s^2).
    pub b: f64,
    /// Std of additive Gaussian acceleration noise (m/s^2).
    pub noise_sigma: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            a_max: 1.0,
            v0: 30.0,
            delta: 4.0,
            s0: 2.0,
            t_gap: 1.0,
            b: 1.5,
            noise_sigma: 0.2,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        if self.a_max <= 0.0 || self.v0 <= 0.0 || self.b <= 0.0 || self.t_gap <= 0.0 {
            return Err(Error::config("IDM a_max, v0, b, T must be positive"));
        }
        if self.s0 < 0.0 {
            return Err(Error::config("IDM s0 must be non-negative"));
        }
        if self.delta < 1.0 {
            return Err(Error::config("IDM delta must be >= 1"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config("IDM noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Desired gap s*(v, v_f) = s0 + max(0, v*T + v*(v - v_f) / (2*sqrt(a*b))).
pub fn idm_desired_gap(p: &IdmParams, v: f64, v_front: f64) -> f64 {
    let dynamic = v * p.t_gap + v * (v - v_front) / (2.0 * (p.a_max * p.b).sqrt());
    p.s0 + dynamic.max(0.0)
}

/// IDM acceleration for gap `s` and leader velocity `v_front`.
///
/// `s` must be positive; a non-positive gap is outside the model's domain
/// and the caller is expected to have applied the failsafe first.
pub fn idm_accel(p: &IdmParams, v: f64, s: f64, v_front: f64) -> Result<f64> {
    if s <= 0.0 {
        return Err(Error::domain(format!("IDM gap must be positive, got {s}")));
    }
    let s_star = idm_desired_gap(p, v, v_front);
    Ok(p.a_max * (1.0 - (v / p.v0).powf(p.delta) - (s_star / s).powi(2)))
}

/// IDM acceleration plus seeded Gaussian noise.
pub fn idm_accel_noisy(p: &IdmParams, v: f64, s: f64, v_front: f64, rng: &mut SimRng) -> Result<f64> {
    let base = idm_accel(p, v, s, v_front)?;
    Ok(base + rng.normal(0.0, p.noise_sigma))
}

/// Uniform-flow equilibrium velocity at the given density (veh/m of lane),
/// i.e. the speed at which evenly spaced vehicles have zero IDM
/// acceleration. Solved by bisection on the equilibrium gap.
pub fn equilibrium_velocity(p: &IdmParams, density_veh_per_m: f64, vehicle_length: f64) -> Result<f64> {
    if density_veh_per_m <= 0.0 {
        return Err(Error::domain("density must be positive"));
    }
    let gap = 1.0 / density_veh_per_m - vehicle_length;
    if gap <= p.s0 {
        return Ok(0.0); // jam density: no room to move
    }
    // idm_accel(v, gap, v) is strictly decreasing in v, positive at v=0.
    let f = |v: f64| idm_accel(p, v, gap, v).expect("gap > 0");
    let mut lo = 0.0;
    let mut hi = p.v0;
    if f(hi) > 0.0 {
        return Ok(hi); // gap so large the desired velocity is the equilibrium
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> IdmParams {
        IdmParams::default()
    }

    #[test]
    fn desired_gap_standstill_is_s0() {
        let p = params();
        assert_eq!(idm_desired_gap(&p, 0.0, 0.0), p.s0);
        assert_eq!(idm_desired_gap(&p, 0.0, 20.0), p.s0);
    }

    #[test]
    fn desired_gap_equal_speeds_hand_value() {
        let p = IdmParams { s0: 2.0, t_gap: 1.0, ..params() };
        // interaction term zero at equal speeds: 2 + 10*1 = 12
        assert!((idm_desired_gap(&p, 10.0, 10.0) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn desired_gap_closing_speed_branch() {
        // v=10, v_f=15, s0=2, T=1, a=1, b=1.5: dynamic term
        // 10 - 50/(2*sqrt(1.5)) = 10 - 20.41... < 0, so s* = s0 = 2
        let p = IdmParams { a_max: 1.0, b: 1.5, s0: 2.0, t_gap: 1.0, ..params() };
        assert!((idm_desired_gap(&p, 10.0, 15.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn accel_hand_value() {
        // a=1, v0=30, delta=4, s0=2, T=1, b=1.5, v=10, v_f=10, s=100
        let p = params();
        let a = idm_accel(&p, 10.0, 100.0, 10.0).unwrap();
        let expected = 1.0 * (1.0 - (1.0f64 / 3.0).powi(4) - (12.0f64 / 100.0).powi(2));
        assert!((a - expected).abs() < 1e-12);
        assert!((a - 0.9733).abs() < 1e-3);
    }

    #[test]
    fn standstill_equilibrium() {
        let p = params();
        let a = idm_accel(&p, 0.0, p.s0, 0.0).unwrap();
        assert!(a.abs() < 1e-12);
    }

    #[test]
    fn free_flow_equilibrium_from_below() {
        let p = params();
        let a = idm_accel(&p, p.v0, 1e9, p.v0).unwrap();
        assert!(a <= 0.0 && a.abs() < 1e-3);
    }

    #[test]
    fn non_positive_gap_is_domain_error() {
        let p = params();
        assert!(idm_accel(&p, 5.0, 0.0, 5.0).is_err());
        assert!(idm_accel(&p, 5.0, -1.0, 5.0).is_err());
    }

    #[test]
    fn zero_noise_matches_deterministic() {
        let p = IdmParams { noise_sigma: 0.0, ..params() };
        let mut rng = SimRng::seed_from(1);
        let a = idm_accel_noisy(&p, 7.0, 30.0, 6.0, &mut rng).unwrap();
        let b = idm_accel(&p, 7.0, 30.0, 6.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_moments_match() {
        let p = params();
        let mut rng = SimRng::seed_from(42);
        let base = idm_accel(&p, 7.0, 30.0, 6.0).unwrap();
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let a = idm_accel_noisy(&p, 7.0, 30.0, 6.0, &mut rng).unwrap();
            sum += a;
            sum_sq += (a - base) * (a - base);
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64).sqrt();
        assert!((mean - base).abs() < 1e-3, "mean {mean} vs base {base}");
        assert!((std - 0.2).abs() < 0.01, "std {std}");
    }

    #[test]
    fn equilibrium_velocity_85_veh_km() {
        // gap = 1/0.085 - 5 = 6.7647 m; solve (2+v)^2/gap^2 + (v/30)^4 = 1
        let p = params();
        let v = equilibrium_velocity(&p, 0.085, 5.0).unwrap();
        let a = idm_accel(&p, v, 1.0 / 0.085 - 5.0, v).unwrap();
        assert!(a.abs() < 1e-9);
        assert!(v > 4.0 && v < 5.5, "v_eq = {v}");
    }

    #[test]
    fn equilibrium_velocity_jam_density() {
        let p = params();
        let v = equilibrium_velocity(&p, 1.0 / 6.9, 5.0).unwrap();
        assert_eq!(v, 0.0);
    }

    proptest! {
        #[test]
        fn accel_monotone_in_speed_and_gap(
            v in 0.0..25.0f64,
            dv in 0.1..5.0f64,
            s in 5.0..200.0f64,
            ds in 0.1..50.0f64,
            v_front in 0.0..25.0f64,
        ) {
            let p = params();
            // non-increasing in v at fixed s, v_front
            let a1 = idm_accel(&p, v, s, v_front).unwrap();
            let a2 = idm_accel(&p, v + dv, s, v_front).unwrap();
            prop_assert!(a2 <= a1 + 1e-12);
            // non-decreasing in s at fixed v, v_front
            let a3 = idm_accel(&p, v, s + ds, v_front).unwrap();
            prop_assert!(a3 >= a1 - 1e-12);
            // bounded above by a_max
            prop_assert!(a1 <= p.a_max);
        }
    }
}
