//! Central finite-difference verification of analytic gradients.
//!
//! Large tensors are probed on a seeded random subsample of components so the
//! harness stays fast while covering every parameter across seeds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nd::{NdArray, Scalar};
use crate::{Error, Result};

/// Ordered name -> tensor collection. Iteration order is insertion order and
/// is part of the determinism contract.
#[derive(Clone, Debug, Default)]
pub struct NamedParams<T> {
    entries: Vec<(String, NdArray<T>)>,
}

impl<T: Scalar> NamedParams<T> {
    pub fn new() -> Self {
        NamedParams { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NdArray<T>) {
        let name = name.into();
        debug_assert!(
            self.get(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&NdArray<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NdArray<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray<T>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> NamedParams<U> {
        NamedParams {
            entries: self
                .entries
                .iter()
                .map(|(n, v)| (n.clone(), v.cast::<U>()))
                .collect(),
        }
    }
}

/// A deterministic scalar loss with an analytic gradient path.
pub trait DiffLoss<T: Scalar> {
    fn value(&self, params: &NamedParams<T>) -> T;
    /// Returns (loss, gradient per named parameter).
    fn gradients(&self, params: &NamedParams<T>) -> (T, NamedParams<T>);
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the max relative error.
    pub tolerance: f64,
    /// Components probed per tensor; tensors at most this large are checked
    /// exhaustively.
    pub max_samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tolerance: 1e-6,
            max_samples_per_tensor: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub eps: f64,
    pub pass: bool,
    pub components_checked: usize,
}

impl GradCheckReport {
    pub fn format_line(&self) -> String {
        format!(
            "{:<28} abs {:>12.4e}  rel {:>12.4e}  ({} comps)  {}",
            self.name,
            self.max_abs_err,
            self.max_rel_err,
            self.components_checked,
            if self.pass { "ok" } else { "FAIL" }
        )
    }
}

fn sample_indices(len: usize, max_samples: usize, seed: u64, tensor_idx: usize) -> Vec<usize> {
    if len <= max_samples {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (tensor_idx as u64).wrapping_mul(0x9E3779B97F4A7C15));
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx.truncate(max_samples);
    idx.sort_unstable();
    idx
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-12);
    (analytic - numeric).abs() / denom
}

/// Checks the analytic gradients of `loss` at `params` against central finite
/// differences computed with the same element type.
pub fn grad_check<T: Scalar, L: DiffLoss<T>>(
    loss: &L,
    params: &NamedParams<T>,
    cfg: &GradCheckConfig,
) -> Result<Vec<GradCheckReport>> {
    let base1 = loss.value(params).as_f64();
    let base2 = loss.value(params).as_f64();
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::NonDeterministic {
            first: base1,
            second: base2,
        });
    }
    let (_, grads) = loss.gradients(params);
    let eval = |p: &NamedParams<T>| loss.value(p).as_f64();
    fd_compare(&eval, params, &grads, cfg)
}

/// Checks analytic `f32` gradients against a float64 finite-difference oracle.
/// The parameters are widened exactly (every `f32` is representable in `f64`);
/// the oracle loss must implement the same computation at `f64`.
pub fn grad_check_mixed<L32: DiffLoss<f32>, L64: DiffLoss<f64>>(
    loss32: &L32,
    loss64: &L64,
    params: &NamedParams<f32>,
    cfg: &GradCheckConfig,
) -> Result<Vec<GradCheckReport>> {
    let base1 = loss32.value(params).as_f64();
    let base2 = loss32.value(params).as_f64();
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::NonDeterministic {
            first: base1,
            second: base2,
        });
    }
    let (_, grads32) = loss32.gradients(params);
    let params64 = params.cast::<f64>();
    let grads64 = grads32.cast::<f64>();
    let eval = |p: &NamedParams<f64>| loss64.value(p);
    fd_compare(&eval, &params64, &grads64, cfg)
}

fn fd_compare<T: Scalar>(
    eval: &dyn Fn(&NamedParams<T>) -> f64,
    params: &NamedParams<T>,
    grads: &NamedParams<T>,
    cfg: &GradCheckConfig,
) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::with_capacity(params.len());
    let mut work = params.clone();
    for (ti, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads.get(name).ok_or_else(|| {
            Error::InvalidArgument(format!("gradient missing for parameter {name}"))
        })?;
        if analytic.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                context: "grad_check",
                left: tensor.shape().to_vec(),
                right: analytic.shape().to_vec(),
            });
        }
        let indices = sample_indices(tensor.len(), cfg.max_samples_per_tensor, cfg.seed, ti);
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        for &ci in &indices {
            let orig = tensor.data()[ci];
            let eps = T::of(cfg.eps);

            work.get_mut(name).unwrap().data_mut()[ci] = orig + eps;
            let fp = eval(&work);
            work.get_mut(name).unwrap().data_mut()[ci] = orig - eps;
            let fm = eval(&work);
            work.get_mut(name).unwrap().data_mut()[ci] = orig;

            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let an = analytic.data()[ci].as_f64();
            max_abs = max_abs.max((an - numeric).abs());
            max_rel = max_rel.max(relative_error(an, numeric));
        }
        reports.push(GradCheckReport {
            name: name.to_string(),
            max_abs_err: max_abs,
            max_rel_err: max_rel,
            eps: cfg.eps,
            pass: max_rel < cfg.tolerance,
            components_checked: indices.len(),
        });
    }
    Ok(reports)
}
