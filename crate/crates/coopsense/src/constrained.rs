//! Throughput maximization under a PU-throughput floor.
//!
//! The constraint `sum over f(o)=1 of P(o|B=1) >= alpha` is handled in
//! H-mass form: a rule is feasible iff its PU-side mass is at least
//! `alpha * gamma`. Every observation with `G(o) < H(o)` is pinned to the
//! active decision; the remaining "movable" observations form a knapsack
//! whose greedy prefix solution carries a strict 1/2 approximation
//! guarantee.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{evaluate_rule, DecisionRule, RuleTable};
use crate::model::{
    observations, weights, ObservationVector, SensorSet, Subset, SystemParams, ENUMERATION_CAP,
};
use crate::scalar::{real, Real};

/// Largest movable-set size the exhaustive oracle will enumerate
/// (`2^20` subsets).
pub const ORACLE_MOVABLE_CAP: usize = 20;

/// Slack used by feasibility comparisons so that re-summation in a different
/// order cannot flip an exactly-tight solution to infeasible.
pub(crate) fn feas_eps<T: Real>() -> T {
    real(1e-12)
}

/// Sums over the fixed set and the two movable partitions of one solution.
/// `u = a + b_prime + c_prime` equals the total detection mass and `w` is
/// the unconstrained optimum `a + b + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Diagnostics<T> {
    /// H-mass of the pinned set (`G < H`).
    pub a: T,
    /// G-mass of movable observations the solution keeps at O=1.
    pub b: T,
    /// H-mass of movable observations the solution keeps at O=1.
    pub b_prime: T,
    /// G-mass of movable observations the solution leaves at O=0.
    pub c: T,
    /// H-mass of movable observations the solution leaves at O=0.
    pub c_prime: T,
    pub u: T,
    pub w: T,
}

/// Output of the constrained solvers.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Real + Serialize"))]
pub struct ConstrainedSolution<T> {
    pub rule: DecisionRule<T>,
    /// Objective value of the rule, from exact evaluation.
    pub total: T,
    /// `sum over f(o)=1 of H(o)`.
    pub pu_side_sum: T,
    /// Whether `pu_side_sum >= alpha * gamma` (up to summation slack).
    pub feasible: bool,
    pub diagnostics: Diagnostics<T>,
}

/// A movable observation: `g >= h > 0`, eligible to be flipped from the
/// idle decision to the active one to buy PU-side mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MovableItem<T> {
    #[serde(serialize_with = "serialize_obs")]
    pub obs: ObservationVector,
    pub g: T,
    pub h: T,
}

fn serialize_obs<S: serde::Serializer>(
    obs: &ObservationVector,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&obs.hex())
}

impl<T: Real> MovableItem<T> {
    pub fn ratio(&self) -> T {
        self.g / self.h
    }
}

/// The knapsack behind the constrained problem: keeping item `i` at the idle
/// decision gains `g_i - h_i` but consumes `h_i` of the budget
/// `U - alpha * gamma`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnapsackView<T> {
    /// Movable observations in canonical order.
    pub items: Vec<MovableItem<T>>,
    pub budget: T,
}

struct WeightedObs<T> {
    code: usize,
    g: T,
    h: T,
}

/// (pinned `G < H` set, movable `G >= H` set), both in canonical order.
type Partition<T> = (Vec<WeightedObs<T>>, Vec<WeightedObs<T>>);

/// Splits all observations into the pinned set (`G < H`, forced active) and
/// the movable set (`G >= H`), both in canonical order.
fn partition<T: Real>(
    sensors: &SensorSet<T>,
    subset: &Subset,
    params: &SystemParams<T>,
) -> Result<Partition<T>> {
    let mut fixed = Vec::new();
    let mut movable = Vec::new();
    for obs in observations(subset.len())? {
        let w = weights(&obs, sensors, subset, params)?;
        let entry = WeightedObs {
            code: obs.code() as usize,
            g: w.g,
            h: w.h,
        };
        if w.g < w.h {
            fixed.push(entry);
        } else {
            movable.push(entry);
        }
    }
    Ok((fixed, movable))
}

/// True when the plain Bayesian assignment (every movable observation at the
/// idle decision) already satisfies the PU constraint.
pub fn bayes_rule_feasible<T: Real>(
    sensors: &SensorSet<T>,
    subset: &Subset,
    params: &SystemParams<T>,
) -> Result<bool> {
    let (fixed, _) = partition(sensors, subset, params)?;
    let pinned_mass: T = fixed.iter().map(|e| e.h).fold(T::zero(), |a, b| a + b);
    Ok(pinned_mass >= params.alpha() * params.gamma() - feas_eps::<T>())
}

fn finish_solution<T: Real>(
    table: RuleTable,
    sensors: &SensorSet<T>,
    subset: &Subset,
    params: &SystemParams<T>,
    fixed: &[WeightedObs<T>],
    movable: &[WeightedObs<T>],
) -> Result<ConstrainedSolution<T>> {
    let mut a = T::zero();
    for e in fixed {
        a = a + e.h;
    }
    let (mut b, mut b_prime, mut c, mut c_prime) = (T::zero(), T::zero(), T::zero(), T::zero());
    for e in movable {
        if table.get(e.code) {
            b = b + e.g;
            b_prime = b_prime + e.h;
        } else {
            c = c + e.g;
            c_prime = c_prime + e.h;
        }
    }
    let diagnostics = Diagnostics {
        a,
        b,
        b_prime,
        c,
        c_prime,
        u: a + b_prime + c_prime,
        w: a + b + c,
    };
    let pu_side_sum = a + b_prime;
    let rule = DecisionRule::Table(table);
    let total = evaluate_rule(&rule, sensors, subset, params)?.total;
    let feasible = pu_side_sum >= params.alpha() * params.gamma() - feas_eps::<T>();
    Ok(ConstrainedSolution {
        rule,
        total,
        pu_side_sum,
        feasible,
        diagnostics,
    })
}

/// Orders movable observations by non-increasing `g/h`. Ratios are compared
/// by cross multiplication so exact ties stay exact; ties break toward the
/// smaller `h`, then the smaller canonical code.
fn sort_by_ratio<T: Real>(movable: &mut [WeightedObs<T>]) {
    movable.sort_by(|x, y| {
        (y.g * x.h)
            .partial_cmp(&(x.g * y.h))
            .unwrap()
            .then_with(|| x.h.partial_cmp(&y.h).unwrap())
            .then_with(|| x.code.cmp(&y.code))
    });
}

/// Greedy approximation for the constrained problem. Starts from the
/// all-active assignment, pins the Bayes-favored set to idle when the
/// constraint allows it outright, and otherwise keeps a maximal prefix of
/// movable observations (by descending `g/h`) at the idle decision within
/// the budget `U - alpha * gamma`. Achieves strictly more than half of the
/// optimal objective.
pub fn greedy_constrained<T: Real>(
    sensors: &SensorSet<T>,
    subset: &Subset,
    params: &SystemParams<T>,
) -> Result<ConstrainedSolution<T>> {
    let k = subset.len();
    if k == 0 {
        return Err(Error::DimensionMismatch {
            obs_len: 0,
            subset_len: 0,
        });
    }
    let (fixed, mut movable) = partition(sensors, subset, params)?;
    // The total detection mass is gamma exactly: sum of P(o|B=1) over all o
    // is 1. The count-based path recomputes this from cells instead.
    let u = params.gamma();
    let bound = params.alpha() * params.gamma();
    if u < bound {
        return Err(Error::Infeasible {
            u: u.to_f64().unwrap_or(f64::NAN),
            bound: bound.to_f64().unwrap_or(f64::NAN),
        });
    }

    let mut table = RuleTable::all_active(k)?;
    let pinned_mass: T = {
        let mut s = T::zero();
        for e in &fixed {
            s = s + e.h;
        }
        s
    };
    if pinned_mass >= bound {
        // The pinned set alone meets the constraint: every movable
        // observation goes to idle, i.e. the plain Bayesian rule.
        for e in &movable {
            table.set(e.code, false);
        }
    } else {
        sort_by_ratio(&mut movable);
        let budget = u - bound;
        let mut used = T::zero();
        for item in &movable {
            if used + item.h > budget {
                break;
            }
            used = used + item.h;
            table.set(item.code, false);
        }
    }
    finish_solution(table, sensors, subset, params, &fixed, &movable)
}

/// Exhaustive oracle: pins the `G < H` set to active, then tries every
/// subset of movable observations. First maximum wins over ascending subset
/// masks, so output is deterministic.
pub fn exact_constrained_bruteforce<T: Real>(
    sensors: &SensorSet<T>,
    subset: &Subset,
    params: &SystemParams<T>,
) -> Result<ConstrainedSolution<T>> {
    let k = subset.len();
    if k == 0 {
        return Err(Error::DimensionMismatch {
            obs_len: 0,
            subset_len: 0,
        });
    }
    let (fixed, movable) = partition(sensors, subset, params)?;
    if movable.len() > ORACLE_MOVABLE_CAP {
        return Err(Error::BudgetExceeded(format!(
            "{} movable observations; the exhaustive oracle caps at {ORACLE_MOVABLE_CAP}",
            movable.len()
        )));
    }
    let u = params.gamma();
    let bound = params.alpha() * params.gamma();
    if u < bound {
        return Err(Error::Infeasible {
            u: u.to_f64().unwrap_or(f64::NAN),
            bound: bound.to_f64().unwrap_or(f64::NAN),
        });
    }
    let a: T = fixed.iter().map(|e| e.h).fold(T::zero(), |s, h| s + h);
    let eps = feas_eps::<T>();

    let m = movable.len();
    let mut best_mask = None;
    let mut best_obj = T::neg_infinity();
    for mask in 0..(1u64 << m) {
        // Bit i set: movable[i] moves to the active side.
        let mut pu_side = a;
        let mut obj = a;
        for (i, item) in movable.iter().enumerate() {
            if (mask >> i) & 1 == 1 {
                pu_side = pu_side + item.h;
                obj = obj + item.h;
            } else {
                obj = obj + item.g;
            }
        }
        if pu_side >= bound - eps && obj > best_obj {
            best_obj = obj;
            best_mask = Some(mask);
        }
    }
    let mask = best_mask.ok_or(Error::Infeasible {
        u: u.to_f64().unwrap_or(f64::NAN),
        bound: bound.to_f64().unwrap_or(f64::NAN),
    })?;

    let mut table = RuleTable::all_active(k)?;
    for (i, item) in movable.iter().enumerate() {
        if (mask >> i) & 1 == 0 {
            table.set(item.code, false);
        }
    }
    finish_solution(table, sensors, subset, params, &fixed, &movable)
}

/// Exposes the knapsack reduction: items in canonical order plus the H-mass
/// budget that may stay on the idle side.
pub fn knapsack_view<T: Real>(
    sensors: &SensorSet<T>,
    subset: &Subset,
    params: &SystemParams<T>,
) -> Result<KnapsackView<T>> {
    let (_, movable) = partition(sensors, subset, params)?;
    let items = movable
        .iter()
        .map(|e| {
            Ok(MovableItem {
                obs: ObservationVector::from_code(e.code as u64, subset.len())?,
                g: e.g,
                h: e.h,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KnapsackView {
        items,
        budget: params.gamma() - params.alpha() * params.gamma(),
    })
}

/// Baseline from the evaluation study: start from the Bayesian assignment
/// and move uniformly random movable observations to the active side until
/// the constraint holds. Deterministic per seed (ChaCha8).
pub fn random_selection_constrained<T: Real>(
    sensors: &SensorSet<T>,
    subset: &Subset,
    params: &SystemParams<T>,
    seed: u64,
) -> Result<ConstrainedSolution<T>> {
    let k = subset.len();
    if k == 0 {
        return Err(Error::DimensionMismatch {
            obs_len: 0,
            subset_len: 0,
        });
    }
    let (fixed, movable) = partition(sensors, subset, params)?;
    let u = params.gamma();
    let bound = params.alpha() * params.gamma();
    if u < bound {
        return Err(Error::Infeasible {
            u: u.to_f64().unwrap_or(f64::NAN),
            bound: bound.to_f64().unwrap_or(f64::NAN),
        });
    }
    let eps = feas_eps::<T>();

    let mut table = RuleTable::all_active(k)?;
    for e in &movable {
        table.set(e.code, false);
    }
    let mut pu_side: T = fixed.iter().map(|e| e.h).fold(T::zero(), |s, h| s + h);
    if pu_side < bound - eps {
        let mut order: Vec<usize> = (0..movable.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        for idx in order {
            table.set(movable[idx].code, true);
            pu_side = pu_side + movable[idx].h;
            if pu_side >= bound - eps {
                break;
            }
        }
    }
    finish_solution(table, sensors, subset, params, &fixed, &movable)
}

/// Builds an instance whose movable observations encode a partition problem:
/// SU `i` contributes `+y_i` or `-y_i` to the scaled log-ratio of an
/// observation depending on its bit. Uses `P_f = P_m = 1/(1 + 10^y)`,
/// `(1 - T_c) * pi0 = gamma` (with `T_c = 0.2`, `pi0 = 0.4`), and sets the
/// constraint so that exactly one movable observation must flip: the optimal
/// flip is the one with the smallest nonnegative log-ratio.
pub fn hard_instance<T: Real>(y: &[u32]) -> Result<(SensorSet<T>, SystemParams<T>)> {
    if y.is_empty() {
        return Err(Error::InvalidConfig(
            "need at least one partition weight".into(),
        ));
    }
    if y.len() > ENUMERATION_CAP {
        return Err(Error::EnumerationCap {
            k: y.len(),
            cap: ENUMERATION_CAP,
        });
    }
    let ten = real::<T>(10.0);
    let mut profiles = Vec::with_capacity(y.len());
    for &yi in y {
        if yi == 0 {
            return Err(Error::OutOfRange {
                context: "partition weight y",
                value: 0.0,
                bounds: "positive integers",
            });
        }
        let pow = ten.powi(yi as i32);
        let p = T::one() / (T::one() + pow);
        let representable = pow.is_finite() && p > T::zero();
        if !representable {
            return Err(Error::OutOfRange {
                context: "partition weight y",
                value: yi as f64,
                bounds: "small enough that 1/(1+10^y) stays positive",
            });
        }
        profiles.push(crate::model::SensorProfile::new(p, p)?);
    }
    let sensors = SensorSet::new(profiles)?;
    let t_c = real::<T>(0.2);
    let pi0 = real::<T>(0.4);
    let gamma = (T::one() - t_c) * pi0;

    // alpha * gamma must equal (pinned H-mass) + epsilon with epsilon the
    // smallest movable H, so that any single movable flip is feasible but
    // none is free.
    let probe = SystemParams::new(t_c, pi0, gamma, T::zero())?;
    let subset = Subset::full(y.len());
    let (fixed, movable) = partition(&sensors, &subset, &probe)?;
    let pinned_mass: T = fixed.iter().map(|e| e.h).fold(T::zero(), |s, h| s + h);
    let epsilon = movable
        .iter()
        .map(|e| e.h)
        .fold(T::infinity(), |m, h| if h < m { h } else { m });
    debug_assert!(
        epsilon.is_finite(),
        "the all-zeros observation is always movable"
    );
    let alpha = ((pinned_mass + epsilon) / gamma).min(T::one());
    Ok((sensors, SystemParams::new(t_c, pi0, gamma, alpha)?))
}
