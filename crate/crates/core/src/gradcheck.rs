//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::param::ParameterStore;
use crate::rng::SplitMix64;
use crate::scalar::Real;
use crate::tensor::no_grad;

pub const DEFAULT_STEP: f64 = 1e-3;

/// Nudge every parameter element by U(-scale, scale).
///
/// Several blocks zero-initialize their output projections so a fresh model
/// is an exact residual identity; gradients upstream of such a zero are zero
/// too, and a gradcheck there would compare 0 against 0. Jittering first
/// makes every backward path carry signal.
pub fn jitter_params<T: Real>(store: &mut ParameterStore<T>, scale: f64, seed: u64) {
    let mut rng = SplitMix64::new(seed);
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let data: Vec<T> = store
            .get(&name)
            .expect("listed name")
            .data()
            .iter()
            .map(|&v| v + T::from_f64(rng.uniform(-scale, scale)))
            .collect();
        store.set_data(&name, data).expect("shape unchanged");
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub elements_checked: usize,
}

/// Check the reverse-mode gradient of `f` (a scalar function of the store's
/// parameters) against central finite differences.
///
/// Every parameter element is probed; use [`grad_check_sampled`] for large
/// models. The relative error per element is
/// |g_ad - g_fd| / max(1, |g_ad|, |g_fd|). Any non-finite loss or gradient is
/// an error naming the offending parameter.
pub fn grad_check<T, F>(f: &F, store: &mut ParameterStore<T>, step: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&ParameterStore<T>) -> Result<crate::tensor::Tensor<T>>,
{
    let all: Vec<(String, usize)> = store
        .iter()
        .flat_map(|p| (0..p.value.numel()).map(move |i| (p.name.clone(), i)))
        .collect();
    check_elements(f, store, step, &all)
}

/// [`grad_check`] over a random subset of parameter elements (without
/// replacement when possible).
pub fn grad_check_sampled<T, F>(
    f: &F,
    store: &mut ParameterStore<T>,
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&ParameterStore<T>) -> Result<crate::tensor::Tensor<T>>,
{
    let all: Vec<(String, usize)> = store
        .iter()
        .flat_map(|p| (0..p.value.numel()).map(move |i| (p.name.clone(), i)))
        .collect();
    let mut rng = SplitMix64::new(seed);
    let chosen: Vec<(String, usize)> = if samples >= all.len() {
        all
    } else {
        // partial Fisher-Yates
        let mut pool = all;
        let n = pool.len();
        for i in 0..samples {
            let j = i + rng.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(samples);
        pool
    };
    check_elements(f, store, step, &chosen)
}

fn check_elements<T, F>(
    f: &F,
    store: &mut ParameterStore<T>,
    step: f64,
    elements: &[(String, usize)],
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&ParameterStore<T>) -> Result<crate::tensor::Tensor<T>>,
{
    store.zero_grads();
    let loss = f(store)?;
    let l0 = loss.item()?.as_f64();
    if !l0.is_finite() {
        return Err(Error::NonFinite(format!("loss value {l0}")));
    }
    loss.backward()?;

    // Snapshot analytic grads before finite differences disturb anything.
    let mut ad: Vec<(String, Vec<f64>)> = Vec::new();
    for p in store.iter() {
        let g = p
            .value
            .grad()
            .map(|g| g.iter().map(|&v| v.as_f64()).collect())
            .unwrap_or_else(|| vec![0.0; p.value.numel()]);
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of `{}` at element {bad}",
                p.name
            )));
        }
        ad.push((p.name.clone(), g));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        elements_checked: 0,
    };
    for (name, idx) in elements {
        let orig: Vec<T> = store.get(name)?.data().to_vec();
        let base = orig[*idx].as_f64();

        let mut plus = orig.clone();
        plus[*idx] = T::from_f64(base + step);
        store.set_data(name, plus)?;
        let lp = no_grad(|| f(store))?.item()?.as_f64();

        let mut minus = orig.clone();
        minus[*idx] = T::from_f64(base - step);
        store.set_data(name, minus)?;
        let lm = no_grad(|| f(store))?.item()?.as_f64();

        store.set_data(name, orig)?;

        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::NonFinite(format!(
                "perturbed loss for `{name}`[{idx}]: f+ = {lp}, f- = {lm}"
            )));
        }
        let fd = (lp - lm) / (2.0 * step);
        let g = ad
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, g)| g[*idx])
            .unwrap_or(0.0);
        let rel = (g - fd).abs() / 1.0f64.max(g.abs()).max(fd.abs());
        report.elements_checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = name.clone();
            report.worst_index = *idx;
        }
    }
    Ok(report)
}
