//! The heuristic domain adaptation network and its losses.
//!
//! A shared encoder feeds a fundament head `F`, an additive ensemble of
//! heuristic heads `H = Σₖ Hᵏ` and a domain discriminator `D`. Predictions
//! come from `G = F − H`. All heads act at class-response level, so `F`, `G`
//! and every `Hᵏ` are `n × C`.
//!
//! At initialization `F` is close to zero, which makes `G ≈ −H` and the
//! cosine between them close to −1. Training pushes the range of `H` down
//! through an L1 penalty while the adversarial loss aligns `G` across domains.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::check::{relative_error, GradCheck};
use crate::autodiff::{softmax_into, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, InitSpec, Mlp, MlpVars, Module};
use crate::scalar::Scalar;

/// Standard deviation of the fundament head's final weights.
pub const FUNDAMENT_INIT_STD: f64 = 1e-3;

/// Final-layer init std of heuristic head `k` (zero-based): `0.1 · 2ᵏ`.
pub fn heuristic_init_std(k: usize) -> f64 {
    0.1 * f64::powi(2.0, k as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub d_in: usize,
    pub hidden: usize,
    pub num_classes: usize,
    /// Number of heuristic heads `M`.
    pub heads: usize,
    pub num_domains: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Hdan,
    SourceOnly,
    DannBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicNorm {
    #[default]
    L1,
    /// Mean of squared entries.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorInput {
    #[default]
    Probabilities,
    Logits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdanModel<T> {
    pub encoder: Mlp<T>,
    pub fundament_head: Mlp<T>,
    pub heuristic_heads: Vec<Mlp<T>>,
    pub discriminator: Mlp<T>,
    arch: Architecture,
}

#[derive(Debug, Clone)]
pub struct HdanVars {
    pub encoder: MlpVars,
    pub fundament_head: MlpVars,
    pub heuristic_heads: Vec<MlpVars>,
    pub discriminator: MlpVars,
    num_classes: usize,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub f: Var,
    pub h_total: Var,
    pub h_parts: Vec<Var>,
    pub g: Var,
}

/// Detached values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardValues<T> {
    pub f: Tensor<T>,
    pub h_total: Tensor<T>,
    pub h_parts: Vec<Tensor<T>>,
    pub g: Tensor<T>,
}

// Independent sub-seeds per component, so that models with and without
// heuristic heads share encoder, fundament and discriminator weights.
fn component_seed(seed: u64, component: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(component);
    rng.next_u64()
}

fn gaussian(std: f64) -> InitSpec {
    InitSpec::Gaussian { std }
}

impl<T: Scalar> HdanModel<T> {
    pub fn build(arch: Architecture, seed: u64) -> Result<Self> {
        if arch.heads < 1 {
            return Err(Error::arg("the heuristic ensemble needs at least one head"));
        }
        Self::assemble(arch, seed)
    }

    /// Same encoder, fundament head and discriminator as [`build`](Self::build)
    /// with the same seed, but no heuristic heads, so `G = F`.
    pub fn build_without_heuristics(arch: Architecture, seed: u64) -> Result<Self> {
        Self::assemble(Architecture { heads: 0, ..arch }, seed)
    }

    fn assemble(arch: Architecture, seed: u64) -> Result<Self> {
        let Architecture {
            d_in,
            hidden,
            num_classes,
            heads,
            num_domains,
        } = arch;
        if d_in == 0 || hidden == 0 || num_classes < 2 || num_domains < 2 {
            return Err(Error::arg(format!("invalid architecture {arch:?}")));
        }
        let fan = |n: usize| gaussian(1.0 / (n as f64).sqrt());
        let encoder = Mlp::init(&[d_in, hidden], fan(d_in), fan(d_in), component_seed(seed, 1))?
            .with_output_activation(Activation::Tanh);
        let fundament_head = Mlp::init(
            &[hidden, hidden, num_classes],
            fan(hidden),
            gaussian(FUNDAMENT_INIT_STD),
            component_seed(seed, 2),
        )?;
        let heuristic_heads = (0..heads)
            .map(|k| {
                Mlp::init(
                    &[hidden, hidden, num_classes],
                    fan(hidden),
                    gaussian(heuristic_init_std(k)),
                    component_seed(seed, 100 + k as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let discriminator = Mlp::init(
            &[num_classes, hidden, num_domains],
            fan(num_classes),
            fan(hidden),
            component_seed(seed, 3),
        )?;
        Ok(Self {
            encoder,
            fundament_head,
            heuristic_heads,
            discriminator,
            arch,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn num_heads(&self) -> usize {
        self.heuristic_heads.len()
    }

    pub fn bind(&self, g: &Graph<T>) -> HdanVars {
        HdanVars {
            encoder: self.encoder.bind(g),
            fundament_head: self.fundament_head.bind(g),
            heuristic_heads: self.heuristic_heads.iter().map(|h| h.bind(g)).collect(),
            discriminator: self.discriminator.bind(g),
            num_classes: self.arch.num_classes,
        }
    }

    pub fn absorb_grads(&mut self, g: &Graph<T>, vars: &HdanVars) -> Result<()> {
        self.encoder.absorb_grads(g, &vars.encoder)?;
        self.fundament_head.absorb_grads(g, &vars.fundament_head)?;
        for (h, v) in self.heuristic_heads.iter_mut().zip(&vars.heuristic_heads) {
            h.absorb_grads(g, v)?;
        }
        self.discriminator.absorb_grads(g, &vars.discriminator)
    }

    /// Gradient-free forward pass.
    pub fn evaluate(&self, x: &Tensor<T>) -> Result<ForwardValues<T>> {
        let g = Graph::new();
        let vars = self.bind(&g);
        let out = forward(&g, &vars, g.constant(x))?;
        Ok(ForwardValues {
            f: g.tensor(out.f),
            h_total: g.tensor(out.h_total),
            h_parts: out.h_parts.iter().map(|&v| g.tensor(v)).collect(),
            g: g.tensor(out.g),
        })
    }
}

impl<T: Scalar> Module<T> for HdanModel<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.encoder.params();
        p.extend(self.fundament_head.params());
        for h in &self.heuristic_heads {
            p.extend(h.params());
        }
        p.extend(self.discriminator.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.fundament_head.params_mut());
        for h in &mut self.heuristic_heads {
            p.extend(h.params_mut());
        }
        p.extend(self.discriminator.params_mut());
        p
    }
}

/// `z = encoder(x)`, `f = F(z)`, `hₖ = Hᵏ(z)`, `g = f − Σₖ hₖ`.
pub fn forward<T: Scalar>(graph: &Graph<T>, vars: &HdanVars, x: Var) -> Result<ForwardOut> {
    let z = vars.encoder.forward(graph, x)?;
    let f = vars.fundament_head.forward(graph, z)?;
    let h_parts = vars
        .heuristic_heads
        .iter()
        .map(|h| h.forward(graph, z))
        .collect::<Result<Vec<_>>>()?;
    let h_total = match h_parts.split_first() {
        Some((first, rest)) => rest.iter().try_fold(*first, |acc, &h| graph.add(acc, h))?,
        None => {
            let n = graph.shape(x)[0];
            graph.constant(&Tensor::zeros(vec![n, vars.num_classes])?)
        }
    };
    let g = graph.sub(f, h_total)?;
    Ok(ForwardOut { f, h_total, h_parts, g })
}

/// Largest `|g + h_total − f|` of a recorded forward pass.
pub fn decomposition_residual<T: Scalar>(graph: &Graph<T>, out: &ForwardOut) -> T {
    let (f, h, g) = (graph.value(out.f), graph.value(out.h_total), graph.value(out.g));
    f.iter()
        .zip(&h)
        .zip(&g)
        .map(|((&f, &h), &g)| (g + h - f).abs())
        .fold(T::zero(), T::max)
}

/// Cross-entropy of `G` on labeled rows.
pub fn classification_loss<T: Scalar>(graph: &Graph<T>, g_labeled: Var, labels: &[usize]) -> Result<Var> {
    graph.softmax_cross_entropy(g_labeled, labels, None)
}

/// Per-row `1 + exp(−entropy(softmax(g)))`, before normalization.
pub fn raw_entropy_weights<T: Scalar>(g: &Tensor<T>) -> Vec<T> {
    let c = g.cols();
    let mut p = vec![T::zero(); c];
    (0..g.rows())
        .map(|i| {
            softmax_into(g.row(i), &mut p);
            let entropy: T = p.iter().filter(|&&v| v > T::zero()).map(|&v| -v * v.ln()).sum();
            T::one() + (-entropy).exp()
        })
        .collect()
}

/// Entropy-conditioning weights rescaled to mean 1. The result is plain data
/// and never carries gradient.
pub fn entropy_weights<T: Scalar>(g: &Tensor<T>) -> Vec<T> {
    let raw = raw_entropy_weights(g);
    let n = T::from_usize_lossy(raw.len());
    let total: T = raw.iter().copied().sum();
    raw.into_iter().map(|w| w * n / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferOptions<T> {
    pub lambda: T,
    pub input: DiscriminatorInput,
    pub entropy_conditioning: bool,
}

/// Domain-classification cross-entropy of the discriminator on `G`, behind a
/// gradient reversal layer. Every group is one domain's rows of `G`.
///
/// With two domains this is the usual `−E_S log D − E_T log(1 − D)` minimax
/// objective: the discriminator descends it while everything upstream of the
/// reversal ascends it, scaled by `lambda`.
pub fn transfer_loss<T: Scalar>(
    graph: &Graph<T>,
    discriminator: &MlpVars,
    groups: &[(Var, usize)],
    opts: TransferOptions<T>,
) -> Result<Var> {
    let mut ids: Vec<usize> = groups.iter().map(|&(_, d)| d).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::arg(format!(
            "transfer loss needs at least two domains, got {ids:?}"
        )));
    }
    let parts: Vec<Var> = groups.iter().map(|&(v, _)| v).collect();
    let g_all = graph.concat_rows(&parts)?;
    let labels: Vec<usize> = groups
        .iter()
        .flat_map(|&(v, d)| std::iter::repeat_n(d, graph.shape(v)[0]))
        .collect();
    let weights = opts.entropy_conditioning.then(|| entropy_weights(&graph.tensor(g_all)));
    let disc_in = match opts.input {
        DiscriminatorInput::Probabilities => graph.softmax_rows(g_all)?,
        DiscriminatorInput::Logits => g_all,
    };
    let reversed = graph.grad_reverse(disc_in, opts.lambda)?;
    let logits = discriminator.forward(graph, reversed)?;
    graph.softmax_cross_entropy(logits, &labels, weights.as_deref())
}

/// Range penalty on the heuristic output over samples of every domain.
pub fn heuristic_loss<T: Scalar>(graph: &Graph<T>, h_total: Var, norm: HeuristicNorm) -> Result<Var> {
    match norm {
        HeuristicNorm::L1 => graph.l1_mean(h_total),
        HeuristicNorm::L2 => graph.mean(graph.mul(h_total, h_total)?),
    }
}

/// `|kurt(F) − kurt(G)|` as a differentiable term.
pub fn independence_loss<T: Scalar>(graph: &Graph<T>, f: Var, g: Var) -> Result<Var> {
    let gap = graph.sub(graph.column_kurtosis(f)?, graph.column_kurtosis(g)?)?;
    graph.abs(gap)
}

#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub l_cls: Var,
    pub l_trans: Var,
    pub l_h: Var,
    pub l_ind: Option<Var>,
    pub l_f: Var,
}

/// `l_f = l_cls + l_trans + mu · l_h`.
pub fn total_loss<T: Scalar>(graph: &Graph<T>, l_cls: Var, l_trans: Var, l_h: Var, mu: T) -> Result<LossBundle> {
    for v in [l_cls, l_trans, l_h] {
        if graph.shape(v).iter().product::<usize>() != 1 {
            return Err(Error::arg("loss parts must be scalars"));
        }
    }
    let l_f = graph.add(graph.add(l_cls, l_trans)?, graph.scale(l_h, mu)?)?;
    Ok(LossBundle {
        l_cls,
        l_trans,
        l_h,
        l_ind: None,
        l_f,
    })
}

/// One domain's rows in a training step.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch<T> {
    pub x: Tensor<T>,
    /// Present for rows that enter the classification loss.
    pub labels: Option<Vec<usize>>,
    pub domain_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings<T> {
    pub method: Method,
    pub mu: T,
    pub lambda: T,
    pub norm: HeuristicNorm,
    pub discriminator_input: DiscriminatorInput,
    pub entropy_conditioning: bool,
    /// Weight of the optional kurtosis-gap term; `None` leaves it out.
    pub independence_weight: Option<T>,
}

impl<T: Scalar> ObjectiveSettings<T> {
    pub fn hdan(lambda: T) -> Self {
        Self {
            method: Method::Hdan,
            mu: T::one(),
            lambda,
            norm: HeuristicNorm::L1,
            discriminator_input: DiscriminatorInput::Probabilities,
            entropy_conditioning: false,
            independence_weight: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub losses: LossBundle,
    pub outputs: Vec<ForwardOut>,
}

/// Records the full training objective for one step on `graph`.
///
/// `source_only` keeps only the classification loss and `dann_baseline`
/// drops the heuristic penalty.
pub fn build_objective<T: Scalar>(
    graph: &Graph<T>,
    vars: &HdanVars,
    batches: &[DomainBatch<T>],
    settings: &ObjectiveSettings<T>,
) -> Result<Objective> {
    let outputs = batches
        .iter()
        .map(|b| forward(graph, vars, graph.constant(&b.x)))
        .collect::<Result<Vec<_>>>()?;
    let zero = || graph.constant(&Tensor::scalar(T::zero()));

    let (mut sup, mut labels) = (Vec::new(), Vec::new());
    for (b, out) in batches.iter().zip(&outputs) {
        if let Some(y) = &b.labels {
            sup.push(out.g);
            labels.extend_from_slice(y);
        }
    }
    if sup.is_empty() {
        return Err(Error::arg("no labeled batch for the classification loss"));
    }
    let l_cls = classification_loss(graph, graph.concat_rows(&sup)?, &labels)?;

    let l_trans = if settings.method == Method::SourceOnly {
        zero()
    } else {
        let groups: Vec<(Var, usize)> = batches.iter().zip(&outputs).map(|(b, o)| (o.g, b.domain_id)).collect();
        let opts = TransferOptions {
            lambda: settings.lambda,
            input: settings.discriminator_input,
            entropy_conditioning: settings.entropy_conditioning,
        };
        transfer_loss(graph, &vars.discriminator, &groups, opts)?
    };

    let l_h = if settings.method == Method::Hdan {
        let hs: Vec<Var> = outputs.iter().map(|o| o.h_total).collect();
        heuristic_loss(graph, graph.concat_rows(&hs)?, settings.norm)?
    } else {
        zero()
    };

    let mut losses = total_loss(graph, l_cls, l_trans, l_h, settings.mu)?;
    if let Some(w) = settings.independence_weight {
        let fs: Vec<Var> = outputs.iter().map(|o| o.f).collect();
        let gs: Vec<Var> = outputs.iter().map(|o| o.g).collect();
        let l_ind = independence_loss(graph, graph.concat_rows(&fs)?, graph.concat_rows(&gs)?)?;
        losses.l_f = graph.add(losses.l_f, graph.scale(l_ind, w)?)?;
        losses.l_ind = Some(l_ind);
    }
    Ok(Objective { losses, outputs })
}

/// Compares tape gradients of the full objective with respect to every model
/// parameter against central differences.
///
/// Gradient reversal makes the recorded gradient differ from the derivative
/// of the forward value unless `lambda = -1`, so callers checking the
/// adversarial term should pass that value.
pub fn check_objective_gradients<T: Scalar>(
    model: &HdanModel<T>,
    batches: &[DomainBatch<T>],
    settings: &ObjectiveSettings<T>,
    step: T,
) -> Result<GradCheck<T>> {
    let loss_of = |m: &HdanModel<T>| -> Result<T> {
        let graph = Graph::new();
        let vars = m.bind(&graph);
        let obj = build_objective(&graph, &vars, batches, settings)?;
        graph.item(obj.losses.l_f)
    };

    let mut analytic_model = model.clone();
    analytic_model.zero_grad();
    let graph = Graph::new();
    let vars = analytic_model.bind(&graph);
    let obj = build_objective(&graph, &vars, batches, settings)?;
    graph.backward(obj.losses.l_f)?;
    analytic_model.absorb_grads(&graph, &vars)?;
    let analytic: Vec<Vec<T>> = analytic_model
        .params()
        .iter()
        .map(|p| {
            p.grad()
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); p.numel()])
        })
        .collect();

    let mut probe = model.clone();
    let mut worst = T::zero();
    let mut checked = 0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe.params()[pi].data()[j];
            probe.params_mut()[pi].data_mut()[j] = orig + step;
            let plus = loss_of(&probe)?;
            probe.params_mut()[pi].data_mut()[j] = orig - step;
            let minus = loss_of(&probe)?;
            probe.params_mut()[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (step + step);
            worst = worst.max(relative_error(a, numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_relative_error: worst,
        checked,
    })
}

#[cfg(test)]
mod tests;
