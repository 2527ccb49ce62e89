//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taxoseq::numerics::{Array, NumericsError, Tape, Var};
use taxoseq::taxonomy::{LabelHierarchy, LabelId, LabelSet};

/// Labels `L0..L42`, numbered by id. Paths `L1 > L5 > L9 > L14`,
/// `L2 > L20 > L37`, `L3 > L42` and `L4 > L35`; every other label is
/// top-level. The closed set of all path labels minimizes to
/// `{L14, L37, L42, L35}`.
pub fn nyt_fixture() -> (LabelHierarchy, LabelSet) {
    let parent = |k: u32| match k {
        5 => Some(1),
        9 => Some(5),
        14 => Some(9),
        20 => Some(2),
        37 => Some(20),
        42 => Some(3),
        35 => Some(4),
        _ => None,
    };
    let mut text = String::new();
    for k in 0..=42u32 {
        match parent(k) {
            Some(p) => text.push_str(&format!("L{p}\tL{k}\n")),
            None => text.push_str(&format!("ROOT\tL{k}\n")),
        }
    }
    let h = LabelHierarchy::parse(&text).expect("fixture parses");
    let full: LabelSet = [1, 5, 9, 14, 2, 20, 37, 3, 42, 4, 35]
        .into_iter()
        .map(LabelId)
        .collect();
    (h, full)
}

/// Random closed label set: a few random labels plus their ancestors.
pub fn random_closed_set<R: Rng>(h: &LabelHierarchy, rng: &mut R, max_seeds: usize) -> LabelSet {
    let n = rng.random_range(1..=max_seeds);
    let seeds: LabelSet = (0..n).map(|_| LabelId(rng.random_range(0..h.len() as u32))).collect();
    h.closure(&seeds).expect("ids are valid")
}

/// Norm-wise relative error between analytic and numeric gradients.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

/// Fixed projection weights for reducing an output to a scalar.
fn projection(shape: &[usize]) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().fold(17u64, |h, &d| h * 31 + d as u64));
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub type OpFn<'a> = dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var, NumericsError> + 'a;

/// Central-difference check of `f` with respect to each input, through
/// the scalar `sum(w * f(inputs))` for fixed random `w`. Returns the
/// relative error per input.
pub fn check_op(inputs: &[Array], eps: f64, f: &OpFn<'_>) -> Vec<f64> {
    let eval = |vals: &[Array]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|a| tape.leaf(a.clone())).collect();
        let y = f(&mut tape, &vars).expect("forward");
        let y = tape.value(y);
        let w = projection(y.shape());
        y.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let y = f(&mut tape, &vars).expect("forward");
    let w = tape.constant(projection(tape.value(y).shape()));
    let prod = tape.mul(y, w).expect("same shape");
    let s = tape.sum(prod);
    let grads = tape.backward(s).expect("backward");

    let mut errors = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let Some(g) = grads.leaf(*v) else {
            errors.push(f64::NAN);
            continue;
        };
        let analytic: Vec<f64> = g.data().iter().map(|&x| x as f64).collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps as f32;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps as f32;
            let h = plus[i].data()[j] as f64 - minus[i].data()[j] as f64;
            numeric.push((eval(&plus) - eval(&minus)) / h);
        }
        errors.push(rel_error(&analytic, &numeric));
    }
    errors
}

pub fn random_array<R: Rng>(rng: &mut R, shape: &[usize], scale: f32) -> Array {
    let n: usize = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}
