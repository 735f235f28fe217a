//! Measurements taken during and after training.
//!
//! Everything here works on detached values: nothing in this module can push
//! gradient back into a model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_into, Graph, Tensor, KURTOSIS_MIN_VARIANCE, KURTOSIS_STD_GUARD};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::hdan::{ForwardValues, HdanModel};
use crate::nn::{sgd_step, InitSpec, Mlp, Module, SgdState};
use crate::scalar::Scalar;

/// Norms below this make a cosine degenerate.
pub const COSINE_MIN_NORM: f64 = 1e-12;

/// Mean excess kurtosis over the columns of `x`.
///
/// Each column is centered and scaled to unit variance, then
/// `mean(N⁴) − 3·mean(N²)²` is taken. Columns with variance below
/// [`KURTOSIS_MIN_VARIANCE`] are left out.
pub fn kurtosis<T: Scalar>(x: &Tensor<T>) -> Result<T> {
    if x.shape().len() != 2 {
        return Err(Error::arg(format!("kurtosis expects a matrix, got {:?}", x.shape())));
    }
    let (n, d) = (x.rows(), x.cols());
    if n < 4 {
        return Err(Error::Degenerate(format!("kurtosis needs at least 4 rows, got {n}")));
    }
    let nf = T::from_usize_lossy(n);
    let guard = T::lit(KURTOSIS_STD_GUARD);
    let mut total = T::zero();
    let mut used = 0usize;
    for j in 0..d {
        let mean = (0..n).map(|i| x.get(i, j)).sum::<T>() / nf;
        let var = (0..n).map(|i| (x.get(i, j) - mean).powi(2)).sum::<T>() / nf;
        if var < T::lit(KURTOSIS_MIN_VARIANCE) {
            continue;
        }
        let s = var.sqrt().max(guard);
        let (mut m2, mut m4) = (T::zero(), T::zero());
        for i in 0..n {
            let z = (x.get(i, j) - mean) / s;
            let z2 = z * z;
            m2 += z2;
            m4 += z2 * z2;
        }
        let (m2, m4) = (m2 / nf, m4 / nf);
        total += m4 - T::lit(3.0) * m2 * m2;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Degenerate("every column is constant".into()));
    }
    Ok(total / T::from_usize_lossy(used))
}

/// Signed `kurt(f) − kurt(g)`.
pub fn nongauss_gap<T: Scalar>(f: &Tensor<T>, g: &Tensor<T>) -> Result<T> {
    Ok(kurtosis(f)? - kurtosis(g)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine<T> {
    pub value: T,
    /// Set when either vector is numerically zero; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<Cosine<T>> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "cosine",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    let floor = T::lit(COSINE_MIN_NORM);
    if na < floor || nb < floor {
        return Ok(Cosine {
            value: T::zero(),
            degenerate: true,
        });
    }
    let value = (dot / (na * nb)).max(-T::one()).min(T::one());
    Ok(Cosine {
        value,
        degenerate: false,
    })
}

/// Mean over rows of the cosine between matching rows of `a` and `b`.
pub fn batch_cosine<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "batch_cosine",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut total = T::zero();
    for i in 0..a.rows() {
        total += cosine(a.row(i), b.row(i))?.value;
    }
    Ok(total / T::from_usize_lossy(a.rows()))
}

pub fn l1_mean<T: Scalar>(x: &Tensor<T>) -> T {
    x.data().iter().map(|v| v.abs()).sum::<T>() / T::from_usize_lossy(x.numel())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadDiagnostics<T> {
    /// Mean absolute output of every heuristic head.
    pub ranges: Vec<T>,
    /// Batch-mean cosines between every pair of heads.
    pub pairwise_cos: Vec<Vec<T>>,
}

impl<T: Scalar> HeadDiagnostics<T> {
    /// Mean of the off-diagonal cosines, or `None` with a single head.
    pub fn mean_pair_cos(&self) -> Option<T> {
        let m = self.ranges.len();
        if m < 2 {
            return None;
        }
        let mut total = T::zero();
        for (k, row) in self.pairwise_cos.iter().enumerate() {
            for (l, &c) in row.iter().enumerate() {
                if k != l {
                    total += c;
                }
            }
        }
        Some(total / T::from_usize_lossy(m * (m - 1)))
    }
}

pub fn head_diagnostics<T: Scalar>(out: &ForwardValues<T>) -> Result<HeadDiagnostics<T>> {
    let parts = &out.h_parts;
    if parts.is_empty() {
        return Err(Error::arg("head diagnostics need at least one heuristic head"));
    }
    let ranges = parts.iter().map(l1_mean).collect();
    let mut pairwise_cos = vec![vec![T::one(); parts.len()]; parts.len()];
    for k in 0..parts.len() {
        for l in k + 1..parts.len() {
            let c = batch_cosine(&parts[k], &parts[l])?;
            pairwise_cos[k][l] = c;
            pairwise_cos[l][k] = c;
        }
    }
    Ok(HeadDiagnostics { ranges, pairwise_cos })
}

/// Fixed training recipe of the domain probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecipe {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
}

impl Default for ProbeRecipe {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 200,
            lr: 0.1,
            batch_size: 32,
            train_fraction: 0.8,
        }
    }
}

fn to_f64<T: Scalar>(x: &Tensor<T>) -> Tensor<f64> {
    let data = x.data().iter().map(|v| v.to_f64_lossy()).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

// Column mean and std over `rows`; zero spread maps to 1.
fn column_stats(x: &Tensor<f64>, rows: &[usize]) -> Vec<(f64, f64)> {
    let n = rows.len() as f64;
    (0..x.cols())
        .map(|j| {
            let mean = rows.iter().map(|&i| x.get(i, j)).sum::<f64>() / n;
            let var = rows.iter().map(|&i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (mean, if sd > 1e-12 { sd } else { 1.0 })
        })
        .collect()
}

fn standardize(x: &Tensor<f64>, rows: &[usize], stats: &[(f64, f64)]) -> Result<Tensor<f64>> {
    let d = x.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &i in rows {
        data.extend(x.row(i).iter().zip(stats).map(|(v, (m, s))| (v - m) / s));
    }
    Tensor::new(vec![rows.len(), d], data)
}

/// Trains a one-hidden-layer classifier with momentum SGD.
pub fn fit_classifier(
    x: &Tensor<f64>,
    labels: &[usize],
    num_classes: usize,
    recipe: &ProbeRecipe,
    seed: u64,
) -> Result<Mlp<f64>> {
    if labels.len() != x.rows() || labels.is_empty() {
        return Err(Error::Dimension {
            op: "fit_classifier",
            lhs: x.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let d = x.cols();
    let fan = |n: usize| InitSpec::Gaussian {
        std: 1.0 / (n as f64).sqrt(),
    };
    let mut model = Mlp::init(&[d, recipe.hidden, num_classes], fan(d), fan(recipe.hidden), seed)?;
    let mut opt = SgdState::new(recipe.lr, 0.9, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed0f9e0be);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..recipe.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(recipe.batch_size.max(1)) {
            let xb = x.select_rows(chunk)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let g = Graph::new();
            let vars = model.bind(&g);
            let logits = vars.forward(&g, g.constant(&xb))?;
            let loss = g.softmax_cross_entropy(logits, &yb, None)?;
            g.backward(loss)?;
            model.zero_grad();
            model.absorb_grads(&g, &vars)?;
            sgd_step(&mut model.params_mut(), &mut opt)?;
        }
    }
    Ok(model)
}

/// Row-wise argmax.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Dimension {
            op: "accuracy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Held-out domain-classification accuracy of a fresh probe trained on
/// `reps`. Features are standardized with training-split statistics.
pub fn domain_probe<T: Scalar>(
    reps: &Tensor<T>,
    domain_labels: &[usize],
    recipe: &ProbeRecipe,
    seed: u64,
) -> Result<f64> {
    if reps.shape().len() != 2 || reps.rows() != domain_labels.len() {
        return Err(Error::Dimension {
            op: "domain_probe",
            lhs: reps.shape().to_vec(),
            rhs: vec![domain_labels.len()],
        });
    }
    let mut ids = domain_labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::arg("domain probe needs at least two domains"));
    }
    let remap: Vec<usize> = domain_labels
        .iter()
        .map(|d| ids.binary_search(d).expect("present"))
        .collect();
    let n = reps.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * recipe.train_fraction).round() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(n_train);

    let x = to_f64(reps);
    let stats = column_stats(&x, train);
    let xtr = standardize(&x, train, &stats)?;
    let xte = standardize(&x, test, &stats)?;
    let ytr: Vec<usize> = train.iter().map(|&i| remap[i]).collect();
    let yte: Vec<usize> = test.iter().map(|&i| remap[i]).collect();
    let probe = fit_classifier(&xtr, &ytr, ids.len(), recipe, seed)?;
    accuracy(&probe.forward(&xte)?, &yte)
}

/// Mean absolute difference between two output matrices.
pub fn disagreement_risk<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op: "disagreement_risk",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let total: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum();
    Ok(total / T::from_usize_lossy(a.numel()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport<T> {
    /// Largest `|(1 − k)(f − f*) − (g − g*)|`.
    pub identity_residual: T,
    pub risk_g: T,
    pub risk_f: T,
    /// `(1 − k) · risk_f`, which must equal `risk_g`.
    pub scaled_risk_f: T,
}

impl<T: Scalar> BoundReport<T> {
    pub fn holds(&self, tol: T) -> bool {
        self.identity_residual <= tol && (self.risk_g - self.scaled_risk_f).abs() <= tol
    }
}

/// Builds `h = k(f − f*)`, `g = f − h`, `g* = f*` and compares both sides of
/// `g − g* = (1 − k)(f − f*)` and of the matching risk scaling.
pub fn bound_identity_check<T: Scalar>(f: &Tensor<T>, f_star: &Tensor<T>, k: T) -> Result<BoundReport<T>> {
    if !(k > T::zero() && k <= T::one()) {
        return Err(Error::Domain(format!("k must lie in (0, 1], got {k}")));
    }
    if f.shape() != f_star.shape() {
        return Err(Error::Dimension {
            op: "bound_identity_check",
            lhs: f.shape().to_vec(),
            rhs: f_star.shape().to_vec(),
        });
    }
    let h: Vec<T> = f.data().iter().zip(f_star.data()).map(|(&a, &b)| k * (a - b)).collect();
    let g: Vec<T> = f.data().iter().zip(&h).map(|(&a, &hh)| a - hh).collect();
    let one_minus_k = T::one() - k;
    let identity_residual = f
        .data()
        .iter()
        .zip(f_star.data())
        .zip(&g)
        .map(|((&a, &b), &gg)| (one_minus_k * (a - b) - (gg - b)).abs())
        .fold(T::zero(), T::max);
    let g = Tensor::new(f.shape().to_vec(), g)?;
    let risk_f = disagreement_risk(f, f_star)?;
    let risk_g = disagreement_risk(&g, f_star)?;
    Ok(BoundReport {
        identity_residual,
        risk_g,
        risk_f,
        scaled_risk_f: one_minus_k * risk_f,
    })
}

/// Fraction of target points whose argmax of `G` matches the label.
pub fn target_accuracy<T: Scalar>(model: &HdanModel<T>, target_eval: &DomainDataset<T>) -> Result<f64> {
    let labels = target_eval
        .y
        .as_ref()
        .ok_or_else(|| Error::arg("target evaluation set has no labels"))?;
    accuracy(&model.evaluate(&target_eval.x)?.g, labels)
}

fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<f64> {
    let x = to_f64(x);
    let c = x.cols();
    let mut out = vec![0.0; x.numel()];
    for i in 0..x.rows() {
        softmax_into(x.row(i), &mut out[i * c..(i + 1) * c]);
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Risk terms of a trained model against an oracle classifier `F*` fitted to
/// pooled labeled source and target data. Disagreements are taken between
/// class-probability outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    /// 0-1 risk of the prediction `G` on the source.
    pub eps_s_f: f64,
    pub eps_t_f: f64,
    pub disagreement_s: f64,
    pub disagreement_t: f64,
    /// Least-squares fit of `h ≈ k (f − f*)` in probability space, clipped to (0, 1].
    pub k: f64,
}

pub fn bound_terms<T: Scalar>(
    model: &HdanModel<T>,
    source: &DomainDataset<T>,
    target_eval: &DomainDataset<T>,
    seed: u64,
) -> Result<BoundTerms> {
    let ys = source.y.as_ref().ok_or_else(|| Error::arg("source must be labeled"))?;
    let yt = target_eval
        .y
        .as_ref()
        .ok_or_else(|| Error::arg("target evaluation set has no labels"))?;
    let num_classes = model.architecture().num_classes;

    let xs = to_f64(&source.x);
    let xt = to_f64(&target_eval.x);
    let pooled = Tensor::concat_rows(&[&xs, &xt])?;
    let labels: Vec<usize> = ys.iter().chain(yt).copied().collect();
    let rows: Vec<usize> = (0..pooled.rows()).collect();
    let stats = column_stats(&pooled, &rows);
    let oracle = fit_classifier(
        &standardize(&pooled, &rows, &stats)?,
        &labels,
        num_classes,
        &ProbeRecipe::default(),
        seed,
    )?;

    let (mut dot, mut norm) = (0.0, 0.0);
    let mut side = |x: &Tensor<T>, xf: &Tensor<f64>, y: &[usize]| -> Result<(f64, f64)> {
        let out = model.evaluate(x)?;
        let all: Vec<usize> = (0..xf.rows()).collect();
        let star = softmax_rows(&oracle.forward(&standardize(xf, &all, &stats)?)?);
        let (pf, pg) = (softmax_rows(&out.f), softmax_rows(&out.g));
        for ((&a, &b), &s) in pf.data().iter().zip(pg.data()).zip(star.data()) {
            dot += (a - b) * (a - s);
            norm += (a - s) * (a - s);
        }
        Ok((1.0 - accuracy(&out.g, y)?, disagreement_risk(&pg, &star)?))
    };
    let (eps_s_f, disagreement_s) = side(&source.x, &xs, ys)?;
    let (eps_t_f, disagreement_t) = side(&target_eval.x, &xt, yt)?;
    let k = if norm > 0.0 { (dot / norm).clamp(1e-6, 1.0) } else { 1.0 };
    Ok(BoundTerms {
        eps_s_f,
        eps_t_f,
        disagreement_s,
        disagreement_t,
        k,
    })
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_trans: f64,
    pub l_h: f64,
    pub cos_gh: f64,
    pub kurt_f: f64,
    pub kurt_g: f64,
    pub kurt_gap: f64,
    pub h_part_ranges: Vec<f64>,
    /// `NaN` with a single head.
    pub head_pair_cos: f64,
    /// `NaN` on epochs without a probe.
    pub probe_acc_g: f64,
    pub probe_acc_h: f64,
    pub target_acc: f64,
    /// Mean `|H(x)|` over the target pool. Not part of the CSV.
    pub target_h_l1: f64,
}

#[cfg(test)]
mod tests;
