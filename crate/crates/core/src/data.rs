//! Synthetic domain-shift generators and task splits.
//!
//! Two families are provided. *Moons* is the classic two half-moon problem
//! whose target domain is a rotated copy of the source, so the shift is
//! entangled with the class boundary. *Blobs with nuisance* keeps the class
//! structure fixed in a few signal dimensions and moves only extra nuisance
//! dimensions between domains, which gives a known domain-specific subspace.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Points of one domain, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset<T> {
    pub x: Tensor<T>,
    pub y: Option<Vec<usize>>,
    pub domain_id: usize,
    pub name: String,
}

impl<T: Scalar> DomainDataset<T> {
    pub fn new(x: Tensor<T>, y: Option<Vec<usize>>, domain_id: usize, name: impl Into<String>) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::arg(format!(
                "dataset points must be a matrix, got {:?}",
                x.shape()
            )));
        }
        if let Some(y) = &y {
            if y.len() != x.rows() {
                return Err(Error::Dimension {
                    op: "dataset labels",
                    lhs: x.shape().to_vec(),
                    rhs: vec![y.len()],
                });
            }
        }
        Ok(Self {
            x,
            y,
            domain_id,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn is_labeled(&self) -> bool {
        self.y.is_some()
    }

    /// Copy with labels dropped.
    pub fn unlabeled(&self) -> Self {
        Self {
            y: None,
            ..self.clone()
        }
    }

    pub fn subset(&self, idx: &[usize], domain_id: usize, name: impl Into<String>) -> Result<Self> {
        let x = self.x.select_rows(idx)?;
        let y = self.y.as_ref().map(|y| idx.iter().map(|&i| y[i]).collect());
        Self::new(x, y, domain_id, name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Uda,
    Msda,
    Ssda,
}

fn default_class_radius() -> f64 {
    2.0
}

/// Generator family and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    Moons {
        n_per_domain: usize,
        rotation_deg: f64,
        noise_std: f64,
    },
    Blobs {
        n_per_domain: usize,
        num_classes: usize,
        d_signal: usize,
        d_nuisance: usize,
        domain_offset: f64,
        noise_std: f64,
        /// Distance of the class means from the origin in the signal plane.
        #[serde(default = "default_class_radius")]
        class_radius: f64,
    },
}

impl GeneratorSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            GeneratorSpec::Moons { .. } => 2,
            GeneratorSpec::Blobs { num_classes, .. } => *num_classes,
        }
    }

    pub fn n_per_domain(&self) -> usize {
        match self {
            GeneratorSpec::Moons { n_per_domain, .. } | GeneratorSpec::Blobs { n_per_domain, .. } => *n_per_domain,
        }
    }
}

fn default_num_sources() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub mode: Mode,
    #[serde(default = "default_num_sources")]
    pub num_sources: usize,
    /// Labeled target samples per class (ssda only).
    #[serde(default)]
    pub shots: Option<usize>,
    pub generator: GeneratorSpec,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            Mode::Uda if self.num_sources != 1 => {
                return Err(Error::Config(format!(
                    "uda uses exactly one source, got {}",
                    self.num_sources
                )))
            }
            Mode::Msda if self.num_sources < 1 => return Err(Error::Config("msda needs at least one source".into())),
            Mode::Ssda => {
                if self.num_sources != 1 {
                    return Err(Error::Config("ssda uses exactly one source".into()));
                }
                match self.shots {
                    Some(1) | Some(3) => {}
                    other => return Err(Error::Config(format!("ssda shots must be 1 or 3, got {other:?}"))),
                }
            }
            _ => {}
        }
        if self.mode != Mode::Ssda && self.shots.is_some() {
            return Err(Error::Config("shots only applies to ssda".into()));
        }
        Ok(())
    }

    pub fn num_domains(&self) -> usize {
        match self.mode {
            Mode::Uda => 2,
            Mode::Msda => self.num_sources + 1,
            Mode::Ssda => 3,
        }
    }
}

/// Datasets of one adaptation problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Task<T> {
    pub mode: Mode,
    pub num_classes: usize,
    pub sources: Vec<DomainDataset<T>>,
    /// Target points used for training, labels withheld.
    pub target_unlabeled: DomainDataset<T>,
    /// The few labeled target points of the semi-supervised setting.
    pub target_labeled: Option<DomainDataset<T>>,
    /// Labeled copy of the unlabeled pool, for evaluation only.
    pub target_eval: DomainDataset<T>,
}

impl<T> Task<T> {
    pub fn num_domains(&self) -> usize {
        self.sources.len() + 1 + usize::from(self.target_labeled.is_some())
    }
}

// Centered half-moons rotated by `rotation_deg`.
fn sample_moons<T: Scalar>(
    n: usize,
    rotation_deg: f64,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) -> (Vec<T>, Vec<usize>) {
    let (s, c) = rotation_deg.to_radians().sin_cos();
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let t = rng.random_range(0.0..PI);
        let (mut px, mut py) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        px += noise.sample(rng) - 0.5;
        py += noise.sample(rng) - 0.25;
        x.push(T::lit(c * px - s * py));
        x.push(T::lit(s * px + c * py));
        y.push(label);
    }
    (x, y)
}

struct BlobLayout {
    means: Vec<Vec<f64>>,
    d_nuisance: usize,
}

impl BlobLayout {
    fn new(num_classes: usize, d_signal: usize, d_nuisance: usize, radius: f64, rng: &mut ChaCha8Rng) -> Self {
        let phase = rng.random_range(0.0..2.0 * PI);
        let means = (0..num_classes)
            .map(|k| {
                let mut m = vec![0.0; d_signal];
                if d_signal == 1 {
                    m[0] = radius * (2.0 * k as f64 / (num_classes - 1) as f64 - 1.0);
                } else {
                    let a = phase + 2.0 * PI * k as f64 / num_classes as f64;
                    m[0] = radius * a.cos();
                    m[1] = radius * a.sin();
                }
                m
            })
            .collect();
        Self { means, d_nuisance }
    }

    fn sample<T: Scalar>(
        &self,
        n: usize,
        offset: f64,
        noise: &Normal<f64>,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<T>, Vec<usize>) {
        let c = self.means.len();
        let d = self.means[0].len() + self.d_nuisance;
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % c;
            for &m in &self.means[label] {
                x.push(T::lit(m + noise.sample(rng)));
            }
            for _ in 0..self.d_nuisance {
                x.push(T::lit(offset + noise.sample(rng)));
            }
            y.push(label);
        }
        (x, y)
    }
}

fn noise_dist(noise_std: f64) -> Result<Normal<f64>> {
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::arg(format!("noise_std must be >= 0, got {noise_std}")));
    }
    Normal::new(0.0, noise_std).map_err(|e| Error::arg(e.to_string()))
}

/// Generates one labeled dataset per entry of `shifts`, each from its own
/// sub-seed drawn in order from the master stream of `seed`.
///
/// For moons a shift is a rotation in degrees; for blobs it is the nuisance offset.
fn generate_domains<T: Scalar>(gen: &GeneratorSpec, shifts: &[f64], seed: u64) -> Result<Vec<(Tensor<T>, Vec<usize>)>> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    match gen {
        GeneratorSpec::Moons {
            n_per_domain,
            noise_std,
            ..
        } => {
            if *n_per_domain < 2 {
                return Err(Error::arg(format!("n_per_domain must be >= 2, got {n_per_domain}")));
            }
            let noise = noise_dist(*noise_std)?;
            shifts
                .iter()
                .map(|&rot| {
                    let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
                    let (x, y) = sample_moons(*n_per_domain, rot, &noise, &mut rng);
                    Ok((Tensor::new(vec![*n_per_domain, 2], x)?, y))
                })
                .collect()
        }
        GeneratorSpec::Blobs {
            n_per_domain,
            num_classes,
            d_signal,
            d_nuisance,
            noise_std,
            class_radius,
            ..
        } => {
            if *num_classes < 2 {
                return Err(Error::arg(format!("num_classes must be >= 2, got {num_classes}")));
            }
            if *d_signal < 1 || *d_nuisance < 1 {
                return Err(Error::arg("d_signal and d_nuisance must be >= 1"));
            }
            if *n_per_domain < 2 {
                return Err(Error::arg(format!("n_per_domain must be >= 2, got {n_per_domain}")));
            }
            let noise = noise_dist(*noise_std)?;
            let layout = BlobLayout::new(*num_classes, *d_signal, *d_nuisance, *class_radius, &mut master);
            let d = d_signal + d_nuisance;
            shifts
                .iter()
                .map(|&offset| {
                    let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
                    let (x, y) = layout.sample(*n_per_domain, offset, &noise, &mut rng);
                    Ok((Tensor::new(vec![*n_per_domain, d], x)?, y))
                })
                .collect()
        }
    }
}

fn labeled<T: Scalar>(pair: (Tensor<T>, Vec<usize>), domain_id: usize, name: &str) -> Result<DomainDataset<T>> {
    DomainDataset::new(pair.0, Some(pair.1), domain_id, name)
}

/// Two-moons source and a target rotated by `rotation_deg` about the data center.
pub fn make_moons_shift<T: Scalar>(
    n_per_domain: usize,
    rotation_deg: f64,
    noise_std: f64,
    seed: u64,
) -> Result<(DomainDataset<T>, DomainDataset<T>)> {
    let gen = GeneratorSpec::Moons {
        n_per_domain,
        rotation_deg,
        noise_std,
    };
    let mut d = generate_domains(&gen, &[0.0, rotation_deg], seed)?.into_iter();
    let src = labeled(d.next().expect("two domains"), 0, "source")?;
    let tgt = labeled(d.next().expect("two domains"), 1, "target")?;
    Ok((src, tgt))
}

/// Gaussian class blobs in `d_signal` dims followed by `d_nuisance` pure-noise
/// dims that sit at 0 in the source and at `domain_offset` in the target.
#[allow(clippy::too_many_arguments)]
pub fn make_blobs_nuisance<T: Scalar>(
    n_per_domain: usize,
    num_classes: usize,
    d_signal: usize,
    d_nuisance: usize,
    domain_offset: f64,
    noise_std: f64,
    seed: u64,
) -> Result<(DomainDataset<T>, DomainDataset<T>)> {
    let gen = GeneratorSpec::Blobs {
        n_per_domain,
        num_classes,
        d_signal,
        d_nuisance,
        domain_offset,
        noise_std,
        class_radius: default_class_radius(),
    };
    let mut d = generate_domains(&gen, &[0.0, domain_offset], seed)?.into_iter();
    let src = labeled(d.next().expect("two domains"), 0, "source")?;
    let tgt = labeled(d.next().expect("two domains"), 1, "target")?;
    Ok((src, tgt))
}

// Source shifts for multi-source tasks: the first source is unshifted and the
// rest step away from the target by half the target shift each.
fn source_shifts(target_shift: f64, num_sources: usize) -> Vec<f64> {
    (0..num_sources).map(|k| -(k as f64) * target_shift / 2.0).collect()
}

pub fn make_task<T: Scalar>(spec: &TaskSpec) -> Result<Task<T>> {
    spec.validate()?;
    let target_shift = match &spec.generator {
        GeneratorSpec::Moons { rotation_deg, .. } => *rotation_deg,
        GeneratorSpec::Blobs { domain_offset, .. } => *domain_offset,
    };
    let num_sources = spec.num_sources;
    let mut shifts = source_shifts(target_shift, num_sources);
    shifts.push(target_shift);
    let mut domains = generate_domains::<T>(&spec.generator, &shifts, spec.seed)?;
    let target = domains.pop().expect("target generated");
    let sources = domains
        .into_iter()
        .enumerate()
        .map(|(k, d)| {
            let name = if num_sources == 1 {
                "source".to_string()
            } else {
                format!("source_{k}")
            };
            labeled(d, k, &name)
        })
        .collect::<Result<Vec<_>>>()?;
    let target_id = num_sources;
    let target = labeled(target, target_id, "target")?;
    let num_classes = spec.generator.num_classes();

    match spec.mode {
        Mode::Uda | Mode::Msda => Ok(Task {
            mode: spec.mode,
            num_classes,
            sources,
            target_unlabeled: DomainDataset {
                name: "target_unlabeled".into(),
                ..target.unlabeled()
            },
            target_labeled: None,
            target_eval: DomainDataset {
                name: "target_eval".into(),
                ..target
            },
        }),
        Mode::Ssda => {
            let shots = spec.shots.expect("validated");
            let labels = target.y.as_ref().expect("generated labeled");
            let mut order: Vec<usize> = (0..target.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5ab1_e5ee_d5ee);
            order.shuffle(&mut rng);
            let mut picked = Vec::with_capacity(shots * num_classes);
            for c in 0..num_classes {
                let of_class: Vec<usize> = order.iter().copied().filter(|&i| labels[i] == c).take(shots).collect();
                if of_class.len() < shots {
                    return Err(Error::arg(format!(
                        "class {c} has {} target samples, {shots} shots requested",
                        of_class.len()
                    )));
                }
                picked.extend(of_class);
            }
            picked.sort_unstable();
            let rest: Vec<usize> = (0..target.len()).filter(|i| picked.binary_search(i).is_err()).collect();
            let eval = target.subset(&rest, target_id, "target_eval")?;
            Ok(Task {
                mode: spec.mode,
                num_classes,
                sources,
                target_unlabeled: DomainDataset {
                    name: "target_unlabeled".into(),
                    ..eval.unlabeled()
                },
                target_labeled: Some(target.subset(&picked, target_id + 1, "target_labeled")?),
                target_eval: eval,
            })
        }
    }
}

/// Writes `x0,…,x{d-1},y,domain` rows. Unlabeled rows carry `y = -1`.
/// Floats use the shortest representation that parses back to the same value.
pub fn export_csv<T: Scalar>(ds: &DomainDataset<T>, path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    header.push("domain".into());
    w.write_record(&header).map_err(io)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.y.as_ref().map_or("-1".to_string(), |y| y[i].to_string()));
        rec.push(ds.domain_id.to_string());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`export_csv`].
pub fn import_csv<T: Scalar + std::str::FromStr>(path: &Path, name: &str) -> Result<DomainDataset<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let headers = r
        .headers()
        .map_err(|e| Error::Parse {
            path: path.into(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let d = headers.len().saturating_sub(2);
    if d == 0 || &headers[d] != "y" || &headers[d + 1] != "domain" {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: "expected header x0,...,y,domain".into(),
        });
    }
    let mut x = Vec::new();
    let mut ys: Vec<i64> = Vec::new();
    let mut domain = None;
    for (row, rec) in r.records().enumerate() {
        let line = row as u64 + 2;
        let bad = |msg: String| Error::Parse {
            path: path.into(),
            line,
            msg,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != d + 2 {
            return Err(bad(format!("expected {} fields, got {}", d + 2, rec.len())));
        }
        for field in rec.iter().take(d) {
            x.push(field.parse::<T>().map_err(|_| bad(format!("bad number `{field}`")))?);
        }
        ys.push(rec[d].parse().map_err(|_| bad(format!("bad label `{}`", &rec[d])))?);
        let dom: usize = rec[d + 1]
            .parse()
            .map_err(|_| bad(format!("bad domain `{}`", &rec[d + 1])))?;
        if *domain.get_or_insert(dom) != dom {
            return Err(bad("mixed domain ids in one file".into()));
        }
    }
    let n = ys.len();
    let y = if ys.iter().all(|&v| v == -1) {
        None
    } else if ys.iter().all(|&v| v >= 0) {
        Some(ys.into_iter().map(|v| v as usize).collect())
    } else {
        return Err(Error::Parse {
            path: path.into(),
            line: 0,
            msg: "mix of labeled and unlabeled rows".into(),
        });
    };
    DomainDataset::new(Tensor::new(vec![n, d], x)?, y, domain.unwrap_or(0), name)
}
