//! Slot-level Monte-Carlo simulation of the sensing protocol.
//!
//! Each slot draws the PU state (idle with probability pi0, i.i.d. across
//! slots), then one observation bit per sensing SU, fuses them through the
//! given rule, and credits throughput: `1 - T_c` to the SU side when an idle
//! slot is used, `gamma` to the PU side when an active slot is protected.
//! A mis-detection transmits into the PU and collides.
//!
//! The summary estimates the analytic objective, whose PU term conditions on
//! the PU being active; the estimator therefore rescales the PU-side slot
//! credit by `1/(1 - pi0)` while per-slot traces keep the raw credit.
//!
//! RNG: ChaCha8 seeded per run; draw order is one uniform for the PU state
//! followed by one per subset member, so traces are reproducible per seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::DecisionRule;
use crate::model::{ObservationVector, SensorSet, Subset, SystemParams};
use crate::scalar::Real;

/// Everything observable about one simulated slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotTrace<T> {
    /// PU state B (true = active).
    pub pu_active: bool,
    pub observations: ObservationVector,
    /// Fused decision O (true = active).
    pub decision: bool,
    /// An SU transmits exactly when the fused decision is idle.
    pub su_transmitted: bool,
    /// Collision: the PU was active and an SU transmitted anyway.
    pub collision: bool,
    /// Raw credit: `(1-T_c) [O=0, B=0] + gamma [O=1, B=1]`.
    pub slot_throughput: T,
}

/// Aggregates of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimSummary<T> {
    pub slots: u64,
    pub idle_slots: u64,
    pub active_slots: u64,
    /// Slots with `O=1, B=0`.
    pub false_alarm_slots: u64,
    /// Slots with `O=0, B=1`; each one is a collision.
    pub collision_slots: u64,
    /// Mean of the normalized per-slot objective estimator.
    pub empirical_total: T,
    /// `false_alarm_slots / idle_slots` (0 when no idle slot occurred).
    pub empirical_pf_coop: T,
    /// `collision_slots / active_slots` (0 when no active slot occurred).
    pub empirical_pm_coop: T,
    /// Standard error of `empirical_total` from the per-slot variance.
    pub std_error: T,
}

impl<T: Real> SimSummary<T> {
    /// Fraction of all slots in which an SU transmission collided with the
    /// PU; converges to `(1 - pi0) * P_m^c`.
    pub fn collision_rate(&self) -> T {
        if self.slots == 0 {
            T::zero()
        } else {
            T::from_u64(self.collision_slots).unwrap() / T::from_u64(self.slots).unwrap()
        }
    }

    /// Empirical `P(O=1 | B=1)`, the PU-protection rate the constraint
    /// bounds from below by alpha.
    pub fn pu_success_rate(&self) -> T {
        T::one() - self.empirical_pm_coop
    }
}

/// Runs `slots` slots and hands every trace to `observer` before folding it
/// into the summary.
pub fn run_simulation_observed<T: Real>(
    sensors: &SensorSet<T>,
    subset: &Subset,
    rule: &DecisionRule<T>,
    params: &SystemParams<T>,
    slots: u64,
    seed: u64,
    mut observer: impl FnMut(u64, &SlotTrace<T>),
) -> Result<SimSummary<T>> {
    subset.check_against(sensors)?;
    if slots == 0 {
        return Err(Error::OutOfRange {
            context: "slot count",
            value: 0.0,
            bounds: "1..",
        });
    }
    let k = subset.len();
    if rule.arity() != k {
        return Err(Error::DimensionMismatch {
            obs_len: rule.arity(),
            subset_len: k,
        });
    }

    // Draw thresholds in f64 so the random stream does not depend on T.
    let pi0 = params.pi0().to_f64().unwrap();
    let active_one: Vec<f64> = subset
        .indices()
        .iter()
        .map(|&i| 1.0 - sensors.get(i).p_m().to_f64().unwrap())
        .collect();
    let idle_one: Vec<f64> = subset
        .indices()
        .iter()
        .map(|&i| sensors.get(i).p_f().to_f64().unwrap())
        .collect();

    let t_d = params.t_d();
    let gamma = params.gamma();
    let pu_scale = T::one() / (T::one() - params.pi0());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = T::zero();
    let mut sum_sq = T::zero();
    let mut idle_slots = 0u64;
    let mut active_slots = 0u64;
    let mut false_alarms = 0u64;
    let mut collisions = 0u64;

    for slot in 0..slots {
        let pu_active = rng.random::<f64>() >= pi0;
        let mut code = 0u64;
        for i in 0..k {
            let p_one = if pu_active {
                active_one[i]
            } else {
                idle_one[i]
            };
            if rng.random::<f64>() < p_one {
                code |= 1 << i;
            }
        }
        let obs = ObservationVector::from_code(code, k)?;
        let decision = rule.decide(&obs)?;

        if pu_active {
            active_slots += 1;
        } else {
            idle_slots += 1;
        }
        if decision && !pu_active {
            false_alarms += 1;
        }
        let collision = !decision && pu_active;
        if collision {
            collisions += 1;
        }

        let su_credit = if !decision && !pu_active {
            t_d
        } else {
            T::zero()
        };
        let pu_credit = if decision && pu_active {
            gamma
        } else {
            T::zero()
        };
        let estimator = su_credit + pu_credit * pu_scale;
        sum = sum + estimator;
        sum_sq = sum_sq + estimator * estimator;

        observer(
            slot,
            &SlotTrace {
                pu_active,
                observations: obs,
                decision,
                su_transmitted: !decision,
                collision,
                slot_throughput: su_credit + pu_credit,
            },
        );
    }

    let n = T::from_u64(slots).unwrap();
    let mean = sum / n;
    let std_error = if slots > 1 {
        let var = ((sum_sq - sum * sum / n) / (n - T::one())).max(T::zero());
        (var / n).sqrt()
    } else {
        T::zero()
    };
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            T::zero()
        } else {
            T::from_u64(num).unwrap() / T::from_u64(den).unwrap()
        }
    };
    Ok(SimSummary {
        slots,
        idle_slots,
        active_slots,
        false_alarm_slots: false_alarms,
        collision_slots: collisions,
        empirical_total: mean,
        empirical_pf_coop: ratio(false_alarms, idle_slots),
        empirical_pm_coop: ratio(collisions, active_slots),
        std_error,
    })
}

/// Runs `slots` slots and returns the summary.
pub fn run_simulation<T: Real>(
    sensors: &SensorSet<T>,
    subset: &Subset,
    rule: &DecisionRule<T>,
    params: &SystemParams<T>,
    slots: u64,
    seed: u64,
) -> Result<SimSummary<T>> {
    run_simulation_observed(sensors, subset, rule, params, slots, seed, |_, _| {})
}
