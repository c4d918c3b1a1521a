//! Central-difference gradient oracle.
//!
//! The analytic side comes from [`Tape::backward`]; the numeric side only
//! ever evaluates the forward closure on a no-grad tape, so the two routes
//! share nothing but the forward kernels.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Perturbation size. The default 2^-10 (≈1e-3) is a power of two, so
    /// `θ ± h` is exact for parameters of moderate magnitude.
    pub h: f32,
    /// Coordinates sampled per parameter array (all of them if the array is smaller).
    pub samples_per_param: usize,
    /// Coordinates where both |analytic| and |numeric| fall below this are
    /// under the f32 noise floor of a central difference and are skipped.
    pub floor: f32,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1.0 / 1024.0,
            samples_per_param: 8,
            floor: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f32,
    pub numeric: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f32,
    pub checked: usize,
    pub skipped: usize,
    /// Coordinates whose probe interval crosses a ReLU breakpoint, where
    /// the loss is not differentiable and a central difference is meaningless.
    pub kinks: usize,
    pub worst: Option<Mismatch>,
}

/// Runs `forward` with gradients, then compares against central differences.
pub fn finite_diff_check<F>(
    store: &ParameterStore,
    forward: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store, true);
        let loss = forward(&mut tape)?;
        tape.backward(loss)?
    };
    compare_with_numeric(store, &forward, &analytic, opts)
}

/// Same as [`finite_diff_check`] but against caller-supplied gradients.
pub fn compare_with_numeric<F>(
    store: &ParameterStore,
    forward: &F,
    analytic: &[Vec<f32>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let eval = |s: &ParameterStore| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new(s, false);
        let loss = forward(&mut tape)?;
        let v = tape.scalar_f64(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss {v} during gradient check")));
        }
        Ok((v, tape.relu_pattern()))
    };
    let (_, pattern) = eval(store)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        kinks: 0,
        worst: None,
    };
    for p in 0..store.len() {
        let n = store.by_index(p).len();
        let picks: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.samples_per_param).into_vec()
        };
        for idx in picks {
            let orig = store.by_index(p).data()[idx];
            let plus = orig + opts.h;
            let minus = orig - opts.h;
            probe.by_index_mut(p).data_mut()[idx] = plus;
            let (f_plus, pat_plus) = eval(&probe)?;
            probe.by_index_mut(p).data_mut()[idx] = minus;
            let (f_minus, pat_minus) = eval(&probe)?;
            probe.by_index_mut(p).data_mut()[idx] = orig;
            if pat_plus != pattern || pat_minus != pattern {
                report.kinks += 1;
                continue;
            }

            let numeric = ((f_plus - f_minus) / (plus as f64 - minus as f64)) as f32;
            let a = analytic[p][idx];
            if a.abs().max(numeric.abs()) < opts.floor {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(Mismatch {
                    param: store.name_of(p).to_string(),
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Array;

    fn linear_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Array::new(vec![1, 4], vec![0.5, -0.25, 2.0, 1.0]).unwrap())
            .unwrap();
        s
    }

    fn linear_forward(t: &mut Tape<'_>) -> Result<Var> {
        let w = t.param("w")?;
        let x = t.constant(Array::new(vec![4, 1], vec![2.0, -4.0, 0.5, 1.0]).unwrap());
        Ok(t.matmul(w, x, false))
    }

    #[test]
    fn linear_model_is_exact() {
        let r = finite_diff_check(&linear_store(), linear_forward, GradCheckOptions::default())
            .unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let store = linear_store();
        let mut tape = Tape::new(&store, true);
        let loss = linear_forward(&mut tape).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        for g in grads.iter_mut().flatten() {
            *g *= 2.0;
        }
        let r = compare_with_numeric(&store, &linear_forward, &grads, GradCheckOptions::default())
            .unwrap();
        assert!((r.max_rel_error - 1.0).abs() < 1e-3, "{r:?}");
    }

    #[test]
    fn relu_breakpoint_inside_the_probe_is_skipped() {
        let mut s = ParameterStore::new();
        s.insert("w", Array::new(vec![1, 2], vec![1e-4, 0.5]).unwrap())
            .unwrap();
        let r = finite_diff_check(
            &s,
            |t| {
                let w = t.param("w")?;
                let r = t.relu(w);
                let x = t.constant(Array::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
                Ok(t.matmul(r, x, false))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!((r.kinks, r.checked), (1, 1));
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut s = ParameterStore::new();
        s.insert("w", Array::new(vec![1, 1], vec![f32::INFINITY]).unwrap())
            .unwrap();
        let r = finite_diff_check(
            &s,
            |t| {
                let w = t.param("w")?;
                Ok(t.scale(w, 1.0))
            },
            GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
