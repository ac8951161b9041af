//! Domain types, validation, and exact probability/throughput arithmetic
//! shared by the fusion, constrained, selection and simulation layers.
//!
//! Observation vectors are canonically encoded as integers `0..2^k` with bit
//! `i` holding the report of the `i`-th member of the sensing subset. Every
//! enumeration in the crate walks that encoding in ascending order, so sums
//! are reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Hard cap on explicit enumeration: iterating all `2^k` observation vectors
/// is refused for `k > ENUMERATION_CAP`. Larger instances must use the
/// count-based dynamic-programming path.
pub const ENUMERATION_CAP: usize = 20;

/// Per-SU sensing accuracies: false-alarm and mis-detection probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SensorProfile<T> {
    p_f: T,
    p_m: T,
}

impl<T: Real> SensorProfile<T> {
    /// Both probabilities must lie strictly inside (0,1) so that every
    /// observation vector has positive probability and all logs are finite.
    pub fn new(p_f: T, p_m: T) -> Result<Self> {
        for (value, context) in [
            (p_f, "false-alarm probability"),
            (p_m, "mis-detection probability"),
        ] {
            if !(value > T::zero() && value < T::one()) {
                return Err(Error::OutOfRange {
                    context,
                    value: value.to_f64().unwrap_or(f64::NAN),
                    bounds: "the open interval (0,1)",
                });
            }
        }
        Ok(Self { p_f, p_m })
    }

    pub fn p_f(&self) -> T {
        self.p_f
    }

    pub fn p_m(&self) -> T {
        self.p_m
    }

    /// An informative sensor satisfies `p_f + p_m < 1`: seeing "active" is
    /// more likely under an active PU than under an idle one.
    pub fn is_informative(&self) -> bool {
        self.p_f + self.p_m < T::one()
    }
}

/// The ordered set `S` of interfering SUs. Indices are stable and 0-based;
/// they double as SEQ report order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensorSet<T> {
    sensors: Vec<SensorProfile<T>>,
}

impl<T: Real> SensorSet<T> {
    pub fn new(sensors: Vec<SensorProfile<T>>) -> Result<Self> {
        if sensors.is_empty() {
            return Err(Error::InvalidConfig(
                "a sensor set needs at least one SU".into(),
            ));
        }
        Ok(Self { sensors })
    }

    /// Builds a set from parallel probability slices.
    pub fn from_probabilities(p_f: &[T], p_m: &[T]) -> Result<Self> {
        if p_f.len() != p_m.len() {
            return Err(Error::InvalidConfig(format!(
                "p_f has {} entries but p_m has {}",
                p_f.len(),
                p_m.len()
            )));
        }
        let sensors = p_f
            .iter()
            .zip(p_m)
            .map(|(&f, &m)| SensorProfile::new(f, m))
            .collect::<Result<Vec<_>>>()?;
        Self::new(sensors)
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires n >= 1
    }

    pub fn get(&self, index: usize) -> &SensorProfile<T> {
        &self.sensors[index]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SensorProfile<T>> {
        self.sensors.iter()
    }
}

/// A sensing subset `S_0 ⊆ S`, stored as strictly increasing SU indices.
/// Bit `i` of an observation vector refers to `indices()[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Subset {
    indices: Vec<usize>,
}

impl Subset {
    /// Indices are sorted into canonical ascending order; duplicates are
    /// rejected.
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig(
                "subset contains a duplicate SU index".into(),
            ));
        }
        Ok(Self { indices })
    }

    pub fn full(n: usize) -> Self {
        Self {
            indices: (0..n).collect(),
        }
    }

    pub fn empty() -> Self {
        Self {
            indices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// Checks that every index addresses a member of `sensors`.
    pub fn check_against<T: Real>(&self, sensors: &SensorSet<T>) -> Result<()> {
        match self.indices.last() {
            Some(&max) if max >= sensors.len() => Err(Error::InvalidConfig(format!(
                "subset index {max} out of range for a set of {} SUs",
                sensors.len()
            ))),
            _ => Ok(()),
        }
    }
}

/// Global constants of one scenario: control-slot fraction, PU idle prior,
/// average PU throughput, and the PU throughput constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SystemParams<T> {
    t_c: T,
    pi0: T,
    gamma: T,
    alpha: T,
}

impl<T: Real> SystemParams<T> {
    pub fn new(t_c: T, pi0: T, gamma: T, alpha: T) -> Result<Self> {
        if !(t_c > T::zero() && t_c < T::one()) {
            return Err(Error::OutOfRange {
                context: "control slot t_c",
                value: t_c.to_f64().unwrap_or(f64::NAN),
                bounds: "the open interval (0,1)",
            });
        }
        if !(pi0 > T::zero() && pi0 < T::one()) {
            return Err(Error::OutOfRange {
                context: "idle prior pi0",
                value: pi0.to_f64().unwrap_or(f64::NAN),
                bounds: "the open interval (0,1)",
            });
        }
        if !(gamma >= T::zero() && gamma.is_finite()) {
            return Err(Error::OutOfRange {
                context: "PU throughput gamma",
                value: gamma.to_f64().unwrap_or(f64::NAN),
                bounds: "[0, inf)",
            });
        }
        if !(alpha >= T::zero() && alpha <= T::one()) {
            return Err(Error::OutOfRange {
                context: "PU constraint alpha",
                value: alpha.to_f64().unwrap_or(f64::NAN),
                bounds: "[0, 1]",
            });
        }
        Ok(Self {
            t_c,
            pi0,
            gamma,
            alpha,
        })
    }

    pub fn t_c(&self) -> T {
        self.t_c
    }

    /// Data slot fraction, always derived as `1 - t_c`.
    pub fn t_d(&self) -> T {
        T::one() - self.t_c
    }

    pub fn pi0(&self) -> T {
        self.pi0
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }
}

/// One joint observation: bit `i` is the report of subset member `i`
/// (1 = "PU active"). Encoded as the integer `code`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ObservationVector {
    code: u64,
    len: usize,
}

impl ObservationVector {
    pub fn from_code(code: u64, len: usize) -> Result<Self> {
        if len > 63 {
            return Err(Error::InvalidConfig(format!(
                "observation vectors support at most 63 bits, got {len}"
            )));
        }
        if len < 63 && code >> len != 0 {
            return Err(Error::InvalidConfig(format!(
                "code {code} does not fit into {len} bits"
            )));
        }
        Ok(Self { code, len })
    }

    pub fn from_bits(bits: &[bool]) -> Result<Self> {
        let mut code = 0u64;
        for (i, &b) in bits.iter().enumerate() {
            if b {
                code |= 1 << i;
            }
        }
        Self::from_code(code, bits.len())
    }

    pub fn code(&self) -> u64 {
        self.code
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.code >> i) & 1 == 1
    }

    /// Number of "active" reports in the vector.
    pub fn ones(&self) -> u32 {
        self.code.count_ones()
    }

    /// Lowercase hex rendering of the canonical code, zero padded to the
    /// vector width. Used by trace dumps.
    pub fn hex(&self) -> String {
        let width = self.len.div_ceil(4).max(1);
        format!("{:0width$x}", self.code, width = width)
    }
}

/// Iterates all `2^k` observation vectors in canonical (ascending code)
/// order. Refused above [`ENUMERATION_CAP`].
pub fn observations(k: usize) -> Result<impl Iterator<Item = ObservationVector>> {
    if k > ENUMERATION_CAP {
        return Err(Error::EnumerationCap {
            k,
            cap: ENUMERATION_CAP,
        });
    }
    Ok((0..1u64 << k).map(move |code| ObservationVector { code, len: k }))
}

/// The pair `(G(o), H(o))`: idle-side and active-side throughput mass of one
/// observation vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObservationWeights<T> {
    pub g: T,
    pub h: T,
}

fn check_dims<T: Real>(
    obs: &ObservationVector,
    sensors: &SensorSet<T>,
    subset: &Subset,
) -> Result<()> {
    subset.check_against(sensors)?;
    if obs.len() != subset.len() {
        return Err(Error::DimensionMismatch {
            obs_len: obs.len(),
            subset_len: subset.len(),
        });
    }
    Ok(())
}

/// `P(o | B=0)`: the probability of observing `obs` from the given subset
/// while the PU is idle. Product of `p_f` over reported-active members and
/// `1 - p_f` over reported-idle members.
pub fn likelihood_idle<T: Real>(
    obs: &ObservationVector,
    sensors: &SensorSet<T>,
    subset: &Subset,
) -> Result<T> {
    check_dims(obs, sensors, subset)?;
    let mut p = T::one();
    for (i, &su) in subset.indices().iter().enumerate() {
        let pf = sensors.get(su).p_f();
        p = p * if obs.bit(i) { pf } else { T::one() - pf };
    }
    Ok(p)
}

/// `P(o | B=1)`: product of `1 - p_m` over reported-active members and `p_m`
/// over reported-idle members.
pub fn likelihood_active<T: Real>(
    obs: &ObservationVector,
    sensors: &SensorSet<T>,
    subset: &Subset,
) -> Result<T> {
    check_dims(obs, sensors, subset)?;
    let mut p = T::one();
    for (i, &su) in subset.indices().iter().enumerate() {
        let pm = sensors.get(su).p_m();
        p = p * if obs.bit(i) { T::one() - pm } else { pm };
    }
    Ok(p)
}

/// `G(o) = (1 - T_c) * pi0 * P(o|B=0)` and `H(o) = gamma * P(o|B=1)`.
pub fn weights<T: Real>(
    obs: &ObservationVector,
    sensors: &SensorSet<T>,
    subset: &Subset,
    params: &SystemParams<T>,
) -> Result<ObservationWeights<T>> {
    let g = params.t_d() * params.pi0() * likelihood_idle(obs, sensors, subset)?;
    let h = params.gamma() * likelihood_active(obs, sensors, subset)?;
    Ok(ObservationWeights { g, h })
}

/// A full scenario: the interfering SU set plus the system constants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Instance<T> {
    sensors: SensorSet<T>,
    params: SystemParams<T>,
    /// Total SUs in the secondary network including non-interfering ones.
    /// Pure metadata: it never enters any computation.
    m_total: Option<usize>,
}

/// On-disk schema for instances. Field names are part of the external
/// interface; `m` is optional metadata.
#[derive(Serialize, Deserialize)]
struct InstanceFile<T> {
    n: usize,
    p_f: Vec<T>,
    p_m: Vec<T>,
    t_c: T,
    pi0: T,
    gamma: T,
    alpha: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
}

impl<T: Real> Instance<T> {
    pub fn new(sensors: SensorSet<T>, params: SystemParams<T>) -> Self {
        Self {
            sensors,
            params,
            m_total: None,
        }
    }

    pub fn with_m_total(mut self, m: usize) -> Result<Self> {
        if m < self.sensors.len() {
            return Err(Error::InvalidConfig(format!(
                "m = {m} is smaller than the interfering-set size {}",
                self.sensors.len()
            )));
        }
        self.m_total = Some(m);
        Ok(self)
    }

    pub fn sensors(&self) -> &SensorSet<T> {
        &self.sensors
    }

    pub fn params(&self) -> &SystemParams<T> {
        &self.params
    }

    pub fn m_total(&self) -> Option<usize> {
        self.m_total
    }
}

impl<T: Real + Serialize + for<'de> Deserialize<'de>> Instance<T> {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: InstanceFile<T> = serde_json::from_str(text)?;
        if file.n != file.p_f.len() || file.n != file.p_m.len() {
            return Err(Error::InvalidConfig(format!(
                "n = {} but p_f has {} entries and p_m has {}",
                file.n,
                file.p_f.len(),
                file.p_m.len()
            )));
        }
        let sensors = SensorSet::from_probabilities(&file.p_f, &file.p_m)?;
        let params = SystemParams::new(file.t_c, file.pi0, file.gamma, file.alpha)?;
        let mut instance = Instance::new(sensors, params);
        if let Some(m) = file.m {
            instance = instance.with_m_total(m)?;
        }
        Ok(instance)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&InstanceFile {
            n: self.sensors.len(),
            p_f: self.sensors.iter().map(|s| s.p_f()).collect(),
            p_m: self.sensors.iter().map(|s| s.p_m()).collect(),
            t_c: self.params.t_c(),
            pi0: self.params.pi0(),
            gamma: self.params.gamma(),
            alpha: self.params.alpha(),
            m: self.m_total,
        })?)
    }
}
