use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NnError;

/// Which parameter entries a gradient check perturbs.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many entries per tensor, chosen by a seeded sampler.
    Sampled { per_tensor: usize, seed: u64 },
}

/// Compares reverse-mode adjoints against central differences.
///
/// `f` builds a scalar loss on a fresh tape from the bound parameters.
/// Returns `max |analytic − fd| / max(1, |fd|)` over the checked entries.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64, NnError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NnError>,
{
    grad_check_with(f, params, eps, Coverage::All)
}

pub fn grad_check_with<F>(f: F, params: &[Tensor], eps: f64, coverage: Coverage) -> Result<f64, NnError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NnError>,
{
    let eval = |ps: &[Tensor]| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(NnError::NonFiniteValue("loss"));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).is_finite() {
        return Err(NnError::NonFiniteValue("loss"));
    }
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let n = params[k].len();
        let entries: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::Sampled { per_tensor, seed } if per_tensor < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e37_79b9));
                let mut idx = sample(&mut rng, n, per_tensor).into_vec();
                idx.sort_unstable();
                idx
            }
            Coverage::Sampled { .. } => (0..n).collect(),
        };
        for i in entries {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[i];
            if !a.is_finite() {
                return Err(NnError::NonFiniteValue("gradient"));
            }
            worst = worst.max((a - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}
