//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates forward values, so it is independent of the
//! reverse pass it validates. The scalar being differentiated is a fixed random
//! projection `Σ w·y` of the checked function's output, which exercises the full
//! Jacobian rather than a single row of it.
//!
//! A coordinate whose ±h stencil changes a discrete branch (a ReLU sign, a
//! max-pool winner) is not differentiable there; such coordinates are counted
//! as skipped instead of being compared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Finite-difference step.
pub const STEP: Real = 1e-4;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Lower bound on the relative-error denominator, so that gradients which are
/// zero up to round-off are compared absolutely.
pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < TOLERANCE
    }

    fn merge(&mut self, other: &CheckOutcome) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// Aggregate of one named check over several seeds.
#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn project(tape: &mut Tape, out: Var, weights: &[Real]) -> Result<Var> {
    let w = tape.constant(Tensor::new(tape.value(out).shape().to_vec(), weights.to_vec())?);
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

fn evaluate<F>(inputs: &[Tensor], weights: &mut Option<Vec<Real>>, seed: u64, f: &F) -> Result<(Real, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let w = weights.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        (0..tape.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    });
    let s = project(&mut tape, out, w)?;
    Ok((tape.value(s).item()?, tape.branch_signature()))
}

/// Checks `f` against finite differences with respect to every input that has
/// `requires_grad` set.
pub fn check<F>(inputs: &[Tensor], seed: u64, f: F) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut weights = None;
    let (_, base_sig) = evaluate(inputs, &mut weights, seed, &f)?;

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let s = project(&mut tape, out, weights.as_ref().expect("weights drawn"))?;
    tape.backward(s)?;

    let mut outcome = CheckOutcome { max_rel_err: 0.0, checked: 0, skipped: 0 };
    let mut probe = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        if !inputs[slot].is_requires_grad() {
            continue;
        }
        let analytic = tape.grad(*var).map(<[Real]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[slot].numel()]);
        for (k, &a) in analytic.iter().enumerate() {
            let orig = inputs[slot].data()[k];
            probe[slot].data_mut()[k] = orig + STEP;
            let (plus, sig_p) = evaluate(&probe, &mut weights, seed, &f)?;
            probe[slot].data_mut()[k] = orig - STEP;
            let (minus, sig_m) = evaluate(&probe, &mut weights, seed, &f)?;
            probe[slot].data_mut()[k] = orig;
            if sig_p != base_sig || sig_m != base_sig {
                outcome.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            outcome.max_rel_err = outcome.max_rel_err.max(rel_err(a as f64, numeric as f64));
            outcome.checked += 1;
        }
    }
    Ok(outcome)
}

/// Runs `case(seed)` for each seed and folds the outcomes into one report.
pub fn check_seeds(
    name: &str,
    seeds: impl IntoIterator<Item = u64>,
    mut case: impl FnMut(u64) -> Result<CheckOutcome>,
) -> Result<CheckReport> {
    let mut total = CheckOutcome { max_rel_err: 0.0, checked: 0, skipped: 0 };
    let mut count = 0;
    for seed in seeds {
        total.merge(&case(seed)?);
        count += 1;
    }
    Ok(CheckReport {
        name: name.to_string(),
        seeds: count,
        max_rel_err: total.max_rel_err,
        checked: total.checked,
        skipped: total.skipped,
    })
}

/// Uniform random tensor in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Random tensor whose entries have magnitude in `[0.1, 1)`, keeping them
/// clear of the kink at zero.
pub fn random_away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: Real = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Random tensor with pairwise-distinct entries separated by at least 0.01,
/// so that max-based operators have no near-ties.
pub fn random_distinct(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut levels: Vec<usize> = (0..n).collect();
    levels.shuffle(rng);
    let data = levels.into_iter().map(|l| (l as Real - n as Real / 2.0) * 0.05 + rng.gen_range(0.0..0.01)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
