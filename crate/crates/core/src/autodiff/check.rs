//! Central finite-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Step used by the default checks.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(T::lit(RELATIVE_ERROR_FLOOR));
    (analytic - numeric).abs() / denom
}

/// Central difference `(f(x+h) - f(x-h)) / 2h` for every coordinate of `x`.
pub fn numeric_gradient<T, F>(mut f: F, x: &[T], step: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe)?;
        probe[i] = orig - step;
        let minus = f(&probe)?;
        probe[i] = orig;
        out.push((plus - minus) / (step + step));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck<T> {
    pub max_relative_error: T,
    pub checked: usize,
}

impl<T: Scalar> GradCheck<T> {
    pub fn passes(&self, tol: T) -> bool {
        self.max_relative_error < tol
    }
}

/// Compares tape gradients of a scalar function of several tensors against
/// central differences of its forward value.
pub fn check_graph_fn<T, F>(inputs: &[Tensor<T>], step: T, build: F) -> Result<GradCheck<T>>
where
    T: Scalar,
    F: Fn(&Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<T>]| -> Result<T> {
        let g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t)).collect();
        let out = build(&g, &vars)?;
        g.item(out)
    };

    let g = Graph::new();
    let leaves: Vec<Tensor<T>> = inputs.iter().map(|t| t.clone().requiring_grad()).collect();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t)).collect();
    let out = build(&g, &vars)?;
    g.backward(out)?;

    let mut worst = T::zero();
    let mut checked = 0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).unwrap_or_else(|| vec![T::zero(); inputs[k].numel()]);
        let mut scratch = inputs.to_vec();
        let numeric = numeric_gradient(
            |x| {
                scratch[k].data_mut().copy_from_slice(x);
                eval(&scratch)
            },
            inputs[k].data(),
            step,
        )?;
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_relative_error: worst,
        checked,
    })
}

/// Names of the cases run by [`check_primitive`], indexed by kind.
pub const PRIMITIVES: [&str; 18] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "tanh",
    "exp",
    "log",
    "scale",
    "abs",
    "relu",
    "add_row",
    "softmax_rows",
    "grad_reverse",
    "l1_mean",
    "mean",
    "column_kurtosis",
    "softmax_cross_entropy",
    "select_concat_rows",
];

fn primitive_loss(kind: usize, g: &Graph<f64>, v: &[Var]) -> Result<Var> {
    // v[0]: 4×3 input, v[1]: 4×3 second operand, v[2]: 3×2 weights,
    // v[3]: bias of 3, v[4]: 4×3 mixing weights
    let x = v[0];
    let out = match kind {
        0 => g.matmul(x, v[2])?,
        1 => g.add(x, v[1])?,
        2 => g.sub(x, v[1])?,
        3 => g.mul(x, v[1])?,
        4 => g.tanh(x)?,
        5 => g.exp(x)?,
        6 => g.log(g.exp(x)?)?,
        7 => g.scale(x, -1.7)?,
        8 => g.abs(x)?,
        9 => g.relu(x)?,
        10 => g.add_row(x, v[3])?,
        11 => g.softmax_rows(x)?,
        // With lambda = -1 the reversal is a plain identity in both passes.
        12 => g.grad_reverse(x, -1.0)?,
        13 => return g.l1_mean(x),
        14 => return g.mean(x),
        15 => return g.column_kurtosis(x),
        16 => return g.softmax_cross_entropy(x, &[0, 2, 1, 2], None),
        _ => {
            let picked = g.select_rows(x, &[3, 0, 3, 1])?;
            let both = g.concat_rows(&[picked, v[1]])?;
            return g.sum(g.mul(g.tanh(both)?, both)?);
        }
    };
    if g.shape(out) == [4, 3] {
        g.sum(g.mul(out, v[4])?)
    } else {
        g.sum(out)
    }
}

/// Finite-difference check of one primitive on random inputs drawn from `seed`.
pub fn check_primitive(kind: usize, seed: u64) -> Result<GradCheck<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let mut random = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect())
    };
    let mut x = random(&[4, 3])?;
    if kind == 8 || kind == 9 {
        // keep away from the kink
        x.data_mut().iter_mut().for_each(|v: &mut f64| {
            if v.abs() < 0.05 {
                *v += 0.1
            }
        });
    }
    let inputs = [x, random(&[4, 3])?, random(&[3, 2])?, random(&[3])?, random(&[4, 3])?];
    check_graph_fn(&inputs, FD_STEP, |g, v| primitive_loss(kind, g, v))
}
