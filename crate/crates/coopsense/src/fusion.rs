//! Decision rules and their exact evaluation.
//!
//! A rule is a total map from observation vectors to the fused busy/idle
//! decision. The Bayesian rule decides idle exactly when
//! `G(o) >= H(o)` (ties go to idle) and maximizes the expected system
//! throughput; k-out-of-N rules are the classical linear baselines.

use serde::{Deserialize, Serialize};

use crate::dp::{Boundary, ThresholdRule};
use crate::error::{Error, Result};
use crate::model::{
    likelihood_active, likelihood_idle, observations, ObservationVector, SensorProfile, SensorSet,
    Subset, SystemParams, ENUMERATION_CAP,
};
use crate::scalar::Real;

/// Above this arity the Bayesian comparison switches to summed logs to avoid
/// underflow; below it, plain products match the algorithm's arithmetic
/// exactly.
const LOG_SPACE_ABOVE_K: usize = 30;

/// Largest arity accepted by the exhaustive search over all `2^(2^k)` rules.
pub const BRUTEFORCE_MAX_K: usize = 4;

/// Explicit rule table: one decision bit per observation vector, indexed by
/// the canonical code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleTable {
    k: usize,
    words: Vec<u64>,
}

impl RuleTable {
    /// All-idle table (`f ≡ 0`).
    pub fn all_idle(k: usize) -> Result<Self> {
        if k == 0 || k > ENUMERATION_CAP {
            return Err(Error::EnumerationCap {
                k,
                cap: ENUMERATION_CAP,
            });
        }
        let entries = 1usize << k;
        Ok(Self {
            k,
            words: vec![0; entries.div_ceil(64)],
        })
    }

    /// All-active table (`f ≡ 1`).
    pub fn all_active(k: usize) -> Result<Self> {
        let mut t = Self::all_idle(k)?;
        for w in &mut t.words {
            *w = u64::MAX;
        }
        let used = (1usize << k) % 64;
        if used != 0 {
            *t.words.last_mut().unwrap() = (1u64 << used) - 1;
        }
        Ok(t)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        1 << self.k
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, code: usize) -> bool {
        debug_assert!(code < self.len());
        (self.words[code >> 6] >> (code & 63)) & 1 == 1
    }

    pub fn set(&mut self, code: usize, active: bool) {
        debug_assert!(code < self.len());
        let mask = 1u64 << (code & 63);
        if active {
            self.words[code >> 6] |= mask;
        } else {
            self.words[code >> 6] &= !mask;
        }
    }

    /// Hex encoding in canonical observation order: each nibble packs four
    /// consecutive codes with the earliest code in the most significant bit,
    /// so the string reads left to right as codes 0, 1, 2, ...
    pub fn hex(&self) -> String {
        let entries = self.len();
        let mut out = String::with_capacity(entries.div_ceil(4));
        let mut code = 0usize;
        while code < entries {
            let mut nibble = 0u8;
            for offset in 0..4 {
                if code + offset < entries && self.get(code + offset) {
                    nibble |= 1 << (3 - offset);
                }
            }
            out.push(char::from_digit(nibble as u32, 16).unwrap());
            code += 4;
        }
        out
    }

    pub fn from_hex(k: usize, text: &str) -> Result<Self> {
        let mut table = Self::all_idle(k)?;
        let entries = table.len();
        if text.len() != entries.div_ceil(4) {
            return Err(Error::Serialization(format!(
                "table for k={k} needs {} hex digits, got {}",
                entries.div_ceil(4),
                text.len()
            )));
        }
        for (n, ch) in text.chars().enumerate() {
            let nibble = ch
                .to_digit(16)
                .ok_or_else(|| Error::Serialization(format!("invalid hex digit {ch:?}")))?
                as u8;
            for offset in 0..4 {
                let code = n * 4 + offset;
                if code < entries && (nibble >> (3 - offset)) & 1 == 1 {
                    table.set(code, true);
                }
            }
        }
        Ok(table)
    }
}

/// Self-contained Bayesian predicate: the subset's profiles plus the system
/// constants it closes over.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesRule<T> {
    profiles: Vec<SensorProfile<T>>,
    params: SystemParams<T>,
}

impl<T: Real> BayesRule<T> {
    pub fn new(sensors: &SensorSet<T>, subset: &Subset, params: &SystemParams<T>) -> Result<Self> {
        subset.check_against(sensors)?;
        if subset.is_empty() {
            return Err(Error::DimensionMismatch {
                obs_len: 0,
                subset_len: 0,
            });
        }
        Ok(Self {
            profiles: subset.indices().iter().map(|&i| *sensors.get(i)).collect(),
            params: *params,
        })
    }

    pub fn profiles(&self) -> &[SensorProfile<T>] {
        &self.profiles
    }

    pub fn params(&self) -> &SystemParams<T> {
        &self.params
    }

    fn decide(&self, obs: &ObservationVector) -> Result<bool> {
        if obs.len() != self.profiles.len() {
            return Err(Error::DimensionMismatch {
                obs_len: obs.len(),
                subset_len: self.profiles.len(),
            });
        }
        Ok(bayes_compare(obs, self.profiles.iter(), &self.params))
    }
}

/// The core comparison, shared by the table builder and the predicate form
/// so both take the exact same arithmetic path: linear products (matching
/// the `weights` evaluation order) up to the log-space threshold, summed
/// logs beyond it.
fn bayes_compare<'a, T: Real>(
    obs: &ObservationVector,
    profiles: impl Iterator<Item = &'a SensorProfile<T>>,
    params: &SystemParams<T>,
) -> bool {
    if obs.len() <= LOG_SPACE_ABOVE_K {
        let mut lik_idle = T::one();
        let mut lik_active = T::one();
        for (i, p) in profiles.enumerate() {
            if obs.bit(i) {
                lik_idle = lik_idle * p.p_f();
                lik_active = lik_active * (T::one() - p.p_m());
            } else {
                lik_idle = lik_idle * (T::one() - p.p_f());
                lik_active = lik_active * p.p_m();
            }
        }
        params.t_d() * params.pi0() * lik_idle < params.gamma() * lik_active
    } else {
        let mut log_g = (params.t_d() * params.pi0()).ln();
        let mut log_h = params.gamma().ln();
        for (i, p) in profiles.enumerate() {
            if obs.bit(i) {
                log_g = log_g + p.p_f().ln();
                log_h = log_h + (T::one() - p.p_m()).ln();
            } else {
                log_g = log_g + (T::one() - p.p_f()).ln();
                log_h = log_h + p.p_m().ln();
            }
        }
        log_g < log_h
    }
}

/// A total decision rule in one of four representations. `decide` returns
/// `true` for the "PU active" decision (O = 1).
#[derive(Debug, Clone, PartialEq)]
pub enum DecisionRule<T> {
    /// Explicit table over all `2^k` observations.
    Table(RuleTable),
    /// `f(o) = 1` iff at least `threshold` of the `k` bits are set.
    KOfN { threshold: usize, k: usize },
    /// The Bayesian predicate, evaluated per observation.
    Bayes(BayesRule<T>),
    /// Rounded log-weight threshold rule decoded from the count table.
    Threshold(ThresholdRule<T>),
}

impl<T: Real> DecisionRule<T> {
    /// Number of observation bits the rule expects.
    pub fn arity(&self) -> usize {
        match self {
            DecisionRule::Table(t) => t.k(),
            DecisionRule::KOfN { k, .. } => *k,
            DecisionRule::Bayes(b) => b.profiles.len(),
            DecisionRule::Threshold(t) => t.arity(),
        }
    }

    pub fn decide(&self, obs: &ObservationVector) -> Result<bool> {
        if obs.len() != self.arity() {
            return Err(Error::DimensionMismatch {
                obs_len: obs.len(),
                subset_len: self.arity(),
            });
        }
        match self {
            DecisionRule::Table(t) => Ok(t.get(obs.code() as usize)),
            DecisionRule::KOfN { threshold, .. } => Ok(obs.ones() as usize >= *threshold),
            DecisionRule::Bayes(b) => b.decide(obs),
            DecisionRule::Threshold(t) => t.decide(obs),
        }
    }

    pub fn as_table(&self) -> Option<&RuleTable> {
        match self {
            DecisionRule::Table(t) => Some(t),
            _ => None,
        }
    }

    pub fn to_json_string(&self) -> Result<String>
    where
        T: Serialize,
    {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self>
    where
        T: Serialize + for<'de> Deserialize<'de>,
    {
        Ok(serde_json::from_str(text)?)
    }
}

/// Serialized shape of a rule; `kind` discriminates the representation.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum RuleRepr<T> {
    Table {
        k: usize,
        bits: String,
    },
    Kofn {
        k: usize,
        threshold: usize,
    },
    Bayes {
        p_f: Vec<T>,
        p_m: Vec<T>,
        t_c: T,
        pi0: T,
        gamma: T,
        alpha: T,
    },
    Threshold {
        p_f: Vec<T>,
        p_m: Vec<T>,
        t_c: T,
        pi0: T,
        gamma: T,
        alpha: T,
        r: u32,
        boundary: Boundary,
    },
}

impl<T: Real + Serialize> Serialize for DecisionRule<T> {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let repr = match self {
            DecisionRule::Table(t) => RuleRepr::Table {
                k: t.k(),
                bits: t.hex(),
            },
            DecisionRule::KOfN { threshold, k } => RuleRepr::Kofn {
                k: *k,
                threshold: *threshold,
            },
            DecisionRule::Bayes(b) => RuleRepr::Bayes {
                p_f: b.profiles.iter().map(|p| p.p_f()).collect(),
                p_m: b.profiles.iter().map(|p| p.p_m()).collect(),
                t_c: b.params.t_c(),
                pi0: b.params.pi0(),
                gamma: b.params.gamma(),
                alpha: b.params.alpha(),
            },
            DecisionRule::Threshold(t) => RuleRepr::Threshold {
                p_f: t.sensors().iter().map(|p| p.p_f()).collect(),
                p_m: t.sensors().iter().map(|p| p.p_m()).collect(),
                t_c: t.params().t_c(),
                pi0: t.params().pi0(),
                gamma: t.params().gamma(),
                alpha: t.params().alpha(),
                r: t.r(),
                boundary: *t.boundary(),
            },
        };
        repr.serialize(serializer)
    }
}

impl<'de, T: Real + Deserialize<'de>> Deserialize<'de> for DecisionRule<T> {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as DeError;
        let repr = RuleRepr::<T>::deserialize(deserializer)?;
        match repr {
            RuleRepr::Table { k, bits } => RuleTable::from_hex(k, &bits)
                .map(DecisionRule::Table)
                .map_err(D::Error::custom),
            RuleRepr::Kofn { k, threshold } => k_of_n_rule(threshold, k).map_err(D::Error::custom),
            RuleRepr::Bayes {
                p_f,
                p_m,
                t_c,
                pi0,
                gamma,
                alpha,
            } => {
                let sensors =
                    SensorSet::from_probabilities(&p_f, &p_m).map_err(D::Error::custom)?;
                let params = SystemParams::new(t_c, pi0, gamma, alpha).map_err(D::Error::custom)?;
                let k = sensors.len();
                BayesRule::new(&sensors, &Subset::full(k), &params)
                    .map(DecisionRule::Bayes)
                    .map_err(D::Error::custom)
            }
            RuleRepr::Threshold {
                p_f,
                p_m,
                t_c,
                pi0,
                gamma,
                alpha,
                r,
                boundary,
            } => {
                let sensors =
                    SensorSet::from_probabilities(&p_f, &p_m).map_err(D::Error::custom)?;
                let params = SystemParams::new(t_c, pi0, gamma, alpha).map_err(D::Error::custom)?;
                Ok(DecisionRule::Threshold(ThresholdRule::from_parts(
                    sensors, params, r, boundary,
                )))
            }
        }
    }
}

/// Exact error probabilities and throughput decomposition of one rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RuleEvaluation<T> {
    /// `P_f^c = 1 - sum over f(o)=0 of P(o|B=0)`.
    pub p_f_coop: T,
    /// `P_m^c = 1 - sum over f(o)=1 of P(o|B=1)`.
    pub p_m_coop: T,
    /// `(1 - T_c) * pi0 * P(O=0 | B=0)`.
    pub su_throughput: T,
    /// `gamma * P(O=1 | B=1)`.
    pub pu_throughput: T,
    /// Objective value: `su_throughput + pu_throughput`.
    pub total: T,
}

/// The Bayesian decision for one observation: idle (`false`) iff
/// `G(o) >= H(o)`. Per-observation cost is O(k).
pub fn bayes_decide<T: Real>(
    obs: &ObservationVector,
    sensors: &SensorSet<T>,
    subset: &Subset,
    params: &SystemParams<T>,
) -> Result<bool> {
    subset.check_against(sensors)?;
    if obs.len() != subset.len() {
        return Err(Error::DimensionMismatch {
            obs_len: obs.len(),
            subset_len: subset.len(),
        });
    }
    Ok(bayes_compare(
        obs,
        subset.indices().iter().map(|&i| sensors.get(i)),
        params,
    ))
}

/// Materializes the Bayesian rule: a table for `k <= ENUMERATION_CAP`, the
/// predicate form beyond that. Never returns a k-out-of-N form. Empty
/// subsets are rejected.
pub fn rule_from_bayes<T: Real>(
    sensors: &SensorSet<T>,
    subset: &Subset,
    params: &SystemParams<T>,
) -> Result<DecisionRule<T>> {
    subset.check_against(sensors)?;
    let k = subset.len();
    if k == 0 {
        return Err(Error::DimensionMismatch {
            obs_len: 0,
            subset_len: 0,
        });
    }
    if k > ENUMERATION_CAP {
        return Ok(DecisionRule::Bayes(BayesRule::new(
            sensors, subset, params,
        )?));
    }
    let mut table = RuleTable::all_idle(k)?;
    for obs in observations(k)? {
        if bayes_decide(&obs, sensors, subset, params)? {
            table.set(obs.code() as usize, true);
        }
    }
    Ok(DecisionRule::Table(table))
}

/// `f(o) = 1` iff at least `threshold` bits are set. OR is `threshold = 1`,
/// AND is `threshold = k`.
pub fn k_of_n_rule<T: Real>(threshold: usize, k: usize) -> Result<DecisionRule<T>> {
    if k == 0 || threshold == 0 || threshold > k {
        return Err(Error::OutOfRange {
            context: "k-out-of-N threshold",
            value: threshold as f64,
            bounds: "1..=k",
        });
    }
    Ok(DecisionRule::KOfN { threshold, k })
}

pub fn or_rule<T: Real>(k: usize) -> Result<DecisionRule<T>> {
    k_of_n_rule(1, k)
}

pub fn and_rule<T: Real>(k: usize) -> Result<DecisionRule<T>> {
    k_of_n_rule(k, k)
}

/// Strict majority: `threshold = ceil((k+1)/2)`, so an exact half never
/// triggers the rule on even `k`.
pub fn majority_rule<T: Real>(k: usize) -> Result<DecisionRule<T>> {
    k_of_n_rule(k / 2 + 1, k)
}

/// Exact evaluation of any rule by enumerating all `2^k` observations in
/// canonical order (a fixed sequential summation order, so results are
/// reproducible bit for bit).
pub fn evaluate_rule<T: Real>(
    rule: &DecisionRule<T>,
    sensors: &SensorSet<T>,
    subset: &Subset,
    params: &SystemParams<T>,
) -> Result<RuleEvaluation<T>> {
    subset.check_against(sensors)?;
    let k = subset.len();
    if rule.arity() != k {
        return Err(Error::DimensionMismatch {
            obs_len: rule.arity(),
            subset_len: k,
        });
    }
    let mut idle_mass = T::zero(); // sum over f(o)=0 of P(o|B=0)
    let mut active_mass = T::zero(); // sum over f(o)=1 of P(o|B=1)
    for obs in observations(k)? {
        if rule.decide(&obs)? {
            active_mass = active_mass + likelihood_active(&obs, sensors, subset)?;
        } else {
            idle_mass = idle_mass + likelihood_idle(&obs, sensors, subset)?;
        }
    }
    let su_throughput = params.t_d() * params.pi0() * idle_mass;
    let pu_throughput = params.gamma() * active_mass;
    Ok(RuleEvaluation {
        p_f_coop: T::one() - idle_mass,
        p_m_coop: T::one() - active_mass,
        su_throughput,
        pu_throughput,
        total: su_throughput + pu_throughput,
    })
}

/// Exhaustive oracle over the full rule space: iterates every table as an
/// integer `0..2^(2^k)` and keeps the first maximum, so ties resolve to the
/// smallest table encoding. Only sensible for `k <= 4`.
pub fn optimal_rule_bruteforce<T: Real>(
    sensors: &SensorSet<T>,
    subset: &Subset,
    params: &SystemParams<T>,
) -> Result<(DecisionRule<T>, RuleEvaluation<T>)> {
    subset.check_against(sensors)?;
    let k = subset.len();
    if k == 0 {
        return Err(Error::DimensionMismatch {
            obs_len: 0,
            subset_len: 0,
        });
    }
    if k > BRUTEFORCE_MAX_K {
        return Err(Error::BudgetExceeded(format!(
            "rule search over 2^(2^{k}) tables; the cap is k <= {BRUTEFORCE_MAX_K}"
        )));
    }
    let entries = 1usize << k;
    let mut lik_idle = Vec::with_capacity(entries);
    let mut lik_active = Vec::with_capacity(entries);
    for obs in observations(k)? {
        lik_idle.push(likelihood_idle(&obs, sensors, subset)?);
        lik_active.push(likelihood_active(&obs, sensors, subset)?);
    }
    let prior_idle = params.t_d() * params.pi0();
    let gamma = params.gamma();

    let mut best_bits = 0u64;
    let mut best_total = T::neg_infinity();
    for bits in 0..(1u64 << entries) {
        let mut idle_mass = T::zero();
        let mut active_mass = T::zero();
        for code in 0..entries {
            if (bits >> code) & 1 == 1 {
                active_mass = active_mass + lik_active[code];
            } else {
                idle_mass = idle_mass + lik_idle[code];
            }
        }
        let total = prior_idle * idle_mass + gamma * active_mass;
        if total > best_total {
            best_total = total;
            best_bits = bits;
        }
    }

    let mut table = RuleTable::all_idle(k)?;
    for code in 0..entries {
        if (best_bits >> code) & 1 == 1 {
            table.set(code, true);
        }
    }
    let rule = DecisionRule::Table(table);
    let eval = evaluate_rule(&rule, sensors, subset, params)?;
    Ok((rule, eval))
}
