//! Sensing-set choice under a reporting-delay budget.
//!
//! `F*(S0)` is the throughput of the Bayesian rule over the subset `S0`;
//! it is monotone in the subset, so the full set is optimal whenever the
//! control slot fits every report. Otherwise at most
//! `k = floor((T_c - d~) / d)` SUs may sense, and the size-k choice is made
//! either exhaustively or by sequential forward selection.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{evaluate_rule, rule_from_bayes};
use crate::model::{SensorSet, Subset, SystemParams};
use crate::scalar::{real, Real};

/// Cost cap for `best_subset_exhaustive`: `C(N,k) * 2^k` evaluations.
pub const SELECTION_BUDGET: u128 = 1 << 26;

/// Subset-lattice cap for `verify_monotonicity`.
pub const MONOTONICITY_MAX_N: usize = 12;

/// Per-report and post-processing delays inside the control slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingParams<T> {
    d: T,
    d_tilde: T,
}

impl<T: Real> TimingParams<T> {
    pub fn new(d: T, d_tilde: T) -> Result<Self> {
        if !(d > T::zero() && d.is_finite()) {
            return Err(Error::OutOfRange {
                context: "report delay d",
                value: d.to_f64().unwrap_or(f64::NAN),
                bounds: "(0, inf)",
            });
        }
        if !(d_tilde >= T::zero() && d_tilde.is_finite()) {
            return Err(Error::OutOfRange {
                context: "processing delay d~",
                value: d_tilde.to_f64().unwrap_or(f64::NAN),
                bounds: "[0, inf)",
            });
        }
        Ok(Self { d, d_tilde })
    }

    pub fn d(&self) -> T {
        self.d
    }

    pub fn d_tilde(&self) -> T {
        self.d_tilde
    }

    /// `floor((t_c - d~) / d)`, clamped at zero: the number of reports that
    /// fit in the control slot.
    pub fn k_max(&self, t_c: T) -> usize {
        let room = t_c - self.d_tilde;
        if room <= T::zero() {
            return 0;
        }
        (room / self.d).floor().to_usize().unwrap_or(usize::MAX)
    }
}

/// A chosen sensing set with its Bayesian-rule throughput. For SFS results,
/// `per_step_gains` lists `(chosen SU index, marginal gain)` per step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult<T> {
    pub subset: Subset,
    pub total: T,
    pub per_step_gains: Vec<(usize, T)>,
}

impl<T: Real> SelectionResult<T> {
    /// SFS trace rows: `step, chosen_su, marginal_gain, cumulative_total`,
    /// with the cumulative column rebuilt from the empty-set baseline.
    pub fn write_sfs_trace_csv<W: std::io::Write>(
        &self,
        params: &SystemParams<T>,
        mut out: W,
    ) -> std::io::Result<()> {
        writeln!(out, "step,chosen_su,marginal_gain,cumulative_total")?;
        let mut cumulative = empty_set_total(params);
        for (step, (su, gain)) in self.per_step_gains.iter().enumerate() {
            cumulative = cumulative + *gain;
            writeln!(out, "{},{},{},{}", step + 1, su, gain, cumulative)?;
        }
        Ok(())
    }
}

/// With no observations the fused decision rests on the prior alone: decide
/// idle iff `(1-T_c) pi0 >= gamma`, earning the larger of the two sides.
fn empty_set_total<T: Real>(params: &SystemParams<T>) -> T {
    let idle = params.t_d() * params.pi0();
    if idle >= params.gamma() {
        idle
    } else {
        params.gamma()
    }
}

/// `F*(S0)`: Bayesian-rule throughput of one subset.
pub fn f_star<T: Real>(
    sensors: &SensorSet<T>,
    params: &SystemParams<T>,
    subset: &Subset,
) -> Result<T> {
    subset.check_against(sensors)?;
    if subset.is_empty() {
        return Ok(empty_set_total(params));
    }
    let rule = rule_from_bayes(sensors, subset, params)?;
    Ok(evaluate_rule(&rule, sensors, subset, params)?.total)
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Walks all size-k index combinations in lexicographic order.
fn for_each_combination(
    n: usize,
    k: usize,
    mut f: impl FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    let mut combo: Vec<usize> = (0..k).collect();
    loop {
        f(&combo)?;
        // Advance to the next combination.
        let mut i = k;
        loop {
            if i == 0 {
                return Ok(());
            }
            i -= 1;
            if combo[i] != i + n - k {
                break;
            }
            if i == 0 {
                return Ok(());
            }
        }
        combo[i] += 1;
        for j in i + 1..k {
            combo[j] = combo[j - 1] + 1;
        }
    }
}

/// Exhaustive size-k search; first maximum wins over lexicographic subset
/// order.
pub fn best_subset_exhaustive<T: Real>(
    sensors: &SensorSet<T>,
    params: &SystemParams<T>,
    k: usize,
) -> Result<SelectionResult<T>> {
    let n = sensors.len();
    if k > n {
        return Err(Error::OutOfRange {
            context: "subset size k",
            value: k as f64,
            bounds: "0..=N",
        });
    }
    let cost = binomial(n, k) * (1u128 << k.min(126));
    if cost > SELECTION_BUDGET {
        return Err(Error::BudgetExceeded(format!(
            "exhaustive size-{k} search over {n} SUs costs ~{cost} evaluations"
        )));
    }
    if k == 0 {
        return Ok(SelectionResult {
            subset: Subset::empty(),
            total: empty_set_total(params),
            per_step_gains: Vec::new(),
        });
    }
    let mut best: Option<(Vec<usize>, T)> = None;
    for_each_combination(n, k, |combo| {
        let subset = Subset::new(combo.to_vec())?;
        let total = f_star(sensors, params, &subset)?;
        match &best {
            Some((_, t)) if total <= *t => {}
            _ => best = Some((combo.to_vec(), total)),
        }
        Ok(())
    })?;
    let (indices, total) = best.expect("k >= 1 yields at least one combination");
    Ok(SelectionResult {
        subset: Subset::new(indices)?,
        total,
        per_step_gains: Vec::new(),
    })
}

/// Sequential forward selection: grows the set one SU at a time, always by
/// the largest marginal gain, ties to the smallest index.
pub fn sfs_select<T: Real>(
    sensors: &SensorSet<T>,
    params: &SystemParams<T>,
    k: usize,
) -> Result<SelectionResult<T>> {
    let n = sensors.len();
    if k > n {
        return Err(Error::OutOfRange {
            context: "subset size k",
            value: k as f64,
            bounds: "0..=N",
        });
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut current = empty_set_total(params);
    let mut gains = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, T)> = None;
        for candidate in 0..n {
            if chosen.contains(&candidate) {
                continue;
            }
            let mut trial = chosen.clone();
            trial.push(candidate);
            let total = f_star(sensors, params, &Subset::new(trial)?)?;
            match best {
                Some((_, t)) if total <= t => {}
                _ => best = Some((candidate, total)),
            }
        }
        let (candidate, total) = best.expect("k <= n leaves a candidate");
        gains.push((candidate, total - current));
        chosen.push(candidate);
        current = total;
    }
    Ok(SelectionResult {
        subset: Subset::new(chosen)?,
        total: current,
        per_step_gains: gains,
    })
}

/// Checks `F*(D + {i}) >= F*(D)` (within 1e-12) over the whole subset
/// lattice.
pub fn verify_monotonicity<T: Real>(
    sensors: &SensorSet<T>,
    params: &SystemParams<T>,
) -> Result<bool> {
    let n = sensors.len();
    if n > MONOTONICITY_MAX_N {
        return Err(Error::BudgetExceeded(format!(
            "monotonicity check walks 2^{n} subsets; the cap is N <= {MONOTONICITY_MAX_N}"
        )));
    }
    let f = f_star_by_mask(sensors, params)?;
    let slack = real::<T>(1e-12);
    for mask in 0..(1usize << n) {
        for i in 0..n {
            if mask & (1 << i) == 0 && f[mask | (1 << i)] < f[mask] - slack {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// `F*` for every subset mask; mask bit i selects SU i.
pub fn f_star_by_mask<T: Real>(sensors: &SensorSet<T>, params: &SystemParams<T>) -> Result<Vec<T>> {
    let n = sensors.len();
    if n > MONOTONICITY_MAX_N {
        return Err(Error::BudgetExceeded(format!(
            "subset table walks 2^{n} subsets; the cap is N <= {MONOTONICITY_MAX_N}"
        )));
    }
    let mut out = Vec::with_capacity(1 << n);
    for mask in 0..(1usize << n) {
        let indices: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        out.push(f_star(sensors, params, &Subset::new(indices)?)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMethod {
    Exhaustive,
    Sfs,
}

/// Applies the timing budget: the full set is returned outright when every
/// report fits in the control slot; otherwise the capped size-k search runs.
pub fn select_with_timing<T: Real>(
    sensors: &SensorSet<T>,
    params: &SystemParams<T>,
    timing: &TimingParams<T>,
    method: SelectionMethod,
) -> Result<SelectionResult<T>> {
    let n = sensors.len();
    let k_max = timing.k_max(params.t_c());
    if k_max >= n {
        let subset = Subset::full(n);
        let total = f_star(sensors, params, &subset)?;
        return Ok(SelectionResult {
            subset,
            total,
            per_step_gains: Vec::new(),
        });
    }
    match method {
        SelectionMethod::Exhaustive => best_subset_exhaustive(sensors, params, k_max),
        SelectionMethod::Sfs => sfs_select(sensors, params, k_max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SensorProfile;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, seed: u64) -> SensorSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sensors = (0..n)
            .map(|_| {
                SensorProfile::new(rng.random_range(0.05..0.45), rng.random_range(0.05..0.45))
                    .unwrap()
            })
            .collect();
        SensorSet::new(sensors).unwrap()
    }

    fn paper_params() -> SystemParams<f64> {
        SystemParams::new(0.2, 0.4, 2.0, 0.8).unwrap()
    }

    #[test]
    fn timing_capacity() {
        let t = TimingParams::new(0.03f64, 0.01).unwrap();
        assert_eq!(t.k_max(0.2), 6); // (0.2 - 0.01) / 0.03 = 6.33
        let t = TimingParams::new(0.03f64, 0.25).unwrap();
        assert_eq!(t.k_max(0.2), 0);
        assert!(TimingParams::new(0.0f64, 0.0).is_err());
        assert!(TimingParams::new(0.1f64, -0.1).is_err());
    }

    #[test]
    fn full_set_is_best_at_k_equals_n() {
        let set = random_set(6, 1);
        let params = paper_params();
        let full = best_subset_exhaustive(&set, &params, 6).unwrap();
        assert_eq!(full.subset, Subset::full(6));
        let sfs = sfs_select(&set, &params, 6).unwrap();
        assert_eq!(sfs.subset, Subset::full(6));
        assert!((sfs.total - full.total).abs() <= 1e-12);
    }

    #[test]
    fn k_zero_decides_on_prior() {
        let set = random_set(4, 2);
        let params = paper_params();
        let r = best_subset_exhaustive(&set, &params, 0).unwrap();
        assert_eq!(r.total, 2.0f64.max(0.8 * 0.4));
        assert!(r.subset.is_empty());
    }

    #[test]
    fn k_one_picks_best_singleton() {
        let set = random_set(5, 3);
        let params = paper_params();
        let r = best_subset_exhaustive(&set, &params, 1).unwrap();
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0;
        for i in 0..5 {
            let total = f_star(&set, &params, &Subset::new(vec![i]).unwrap()).unwrap();
            if total > best {
                best = total;
                best_idx = i;
            }
        }
        assert_eq!(r.subset.indices(), &[best_idx]);
        assert_eq!(r.total, best);
    }

    #[test]
    fn sfs_on_identical_sus_picks_lowest_indices() {
        let sensors = vec![SensorProfile::new(0.2f64, 0.2).unwrap(); 6];
        let set = SensorSet::new(sensors).unwrap();
        let params = paper_params();
        let r = sfs_select(&set, &params, 3).unwrap();
        assert_eq!(r.subset.indices(), &[0, 1, 2]);
        let exhaustive = best_subset_exhaustive(&set, &params, 3).unwrap();
        assert!((r.total - exhaustive.total).abs() <= 1e-12);
        assert_eq!(r.per_step_gains.len(), 3);
        assert_eq!(r.per_step_gains[0].0, 0);
    }

    #[test]
    fn sfs_never_beats_exhaustive_and_gains_are_nonnegative() {
        for seed in 10..20 {
            let set = random_set(7, seed);
            let params = paper_params();
            for k in 0..=7 {
                let sfs = sfs_select(&set, &params, k).unwrap();
                let opt = best_subset_exhaustive(&set, &params, k).unwrap();
                assert!(
                    sfs.total <= opt.total + 1e-12,
                    "seed {seed} k {k}: sfs {} > opt {}",
                    sfs.total,
                    opt.total
                );
                for &(_, gain) in &sfs.per_step_gains {
                    assert!(gain >= -1e-12);
                }
            }
        }
    }

    #[test]
    fn monotone_over_lattice() {
        for seed in 30..36 {
            let set = random_set(5, seed);
            assert!(verify_monotonicity(&set, &paper_params()).unwrap());
        }
        // gamma = 0 still satisfies monotonicity.
        let set = random_set(5, 40);
        let params = SystemParams::new(0.2, 0.4, 0.0, 0.0).unwrap();
        assert!(verify_monotonicity(&set, &params).unwrap());
    }

    #[test]
    fn chain_is_nondecreasing() {
        let set = random_set(6, 50);
        let params = paper_params();
        let mut prev = f_star(&set, &params, &Subset::empty()).unwrap();
        for k in 1..=6 {
            let total = f_star(&set, &params, &Subset::new((0..k).collect()).unwrap()).unwrap();
            assert!(total >= prev - 1e-12);
            prev = total;
        }
    }

    #[test]
    fn timing_dispatch() {
        let set = random_set(5, 60);
        let params = paper_params();
        // Every report fits: full set without search.
        let roomy = TimingParams::new(0.01f64, 0.0).unwrap();
        let r = select_with_timing(&set, &params, &roomy, SelectionMethod::Sfs).unwrap();
        assert_eq!(r.subset, Subset::full(5));
        // Only 2 fit.
        let tight = TimingParams::new(0.08f64, 0.05).unwrap();
        assert_eq!(tight.k_max(0.2), 1);
        let r = select_with_timing(&set, &params, &tight, SelectionMethod::Exhaustive).unwrap();
        assert_eq!(r.subset.len(), 1);
    }

    #[test]
    fn budget_guards() {
        let set = random_set(12, 70);
        assert!(verify_monotonicity(&set, &paper_params()).is_ok());
        let set = random_set(13, 70);
        assert!(verify_monotonicity(&set, &paper_params()).is_err());
    }

    #[test]
    fn sfs_trace_csv_shape() {
        let set = random_set(4, 80);
        let params = paper_params();
        let r = sfs_select(&set, &params, 3).unwrap();
        let mut buf = Vec::new();
        r.write_sfs_trace_csv(&params, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,chosen_su,marginal_gain,cumulative_total"
        );
        assert_eq!(lines.count(), 3);
    }
}
