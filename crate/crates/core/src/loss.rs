//! Classification loss, RBF-kernel MMD² and the adaptation-weight schedule.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::nn::ForwardOutput;
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Bandwidth multipliers applied to the median-heuristic squared distance.
pub const DEFAULT_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// How the RBF bandwidths σ are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidths {
    /// Explicit σ values.
    Fixed(Vec<f64>),
    /// σ_s² = multiplier_s · median pairwise squared distance of the pooled sample.
    MedianHeuristic { multipliers: Vec<f64> },
}

/// RBF mixture kernel `k(x, y) = Σ_s exp(-‖x - y‖² / (2σ_s²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub bandwidths: Bandwidths,
    /// Median-heuristic only: let gradient flow through the median distance
    /// instead of treating the bandwidths as constants.
    #[serde(default)]
    pub bandwidth_gradient: bool,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::median_heuristic(&DEFAULT_MULTIPLIERS)
    }
}

impl KernelSpec {
    pub fn fixed(sigmas: &[f64]) -> Self {
        Self {
            bandwidths: Bandwidths::Fixed(sigmas.to_vec()),
            bandwidth_gradient: false,
        }
    }

    pub fn median_heuristic(multipliers: &[f64]) -> Self {
        Self {
            bandwidths: Bandwidths::MedianHeuristic {
                multipliers: multipliers.to_vec(),
            },
            bandwidth_gradient: false,
        }
    }

    pub fn with_bandwidth_gradient(mut self, on: bool) -> Self {
        self.bandwidth_gradient = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (key, values) = match &self.bandwidths {
            Bandwidths::Fixed(s) => ("kernel.bandwidths.fixed", s),
            Bandwidths::MedianHeuristic { multipliers } => {
                ("kernel.bandwidths.median_heuristic.multipliers", multipliers)
            }
        };
        if values.is_empty() {
            return Err(Error::config(key, "needs at least one value"));
        }
        if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config(key, "values must be positive and finite"));
        }
        Ok(())
    }

    /// Resolves σ values for samples `x` and `y`, both row-major with `dim` columns.
    ///
    /// The result is a constant; see [`KernelSpec::bandwidth_gradient`] for
    /// the variant that differentiates through the median.
    pub fn resolve(&self, x: &[f64], y: &[f64], dim: usize) -> Result<Vec<f64>> {
        self.validate()?;
        Ok(match &self.bandwidths {
            Bandwidths::Fixed(s) => s.clone(),
            Bandwidths::MedianHeuristic { multipliers } => {
                let base = median_pairwise_sq_distance(x, y, dim);
                multipliers.iter().map(|m| (m * base).sqrt()).collect()
            }
        })
    }
}

/// Median of the squared distances over all unordered pairs of the pooled
/// sample `x ∪ y`; 1.0 when that median is 0 or there is only one point.
pub fn median_pairwise_sq_distance(x: &[f64], y: &[f64], dim: usize) -> f64 {
    median_pairs(x, y, dim).map_or(1.0, |(median, _)| median)
}

/// The positive median pairwise squared distance of `x ∪ y` and the pairs
/// realizing it: one pair with weight 1, or two with weight 1/2 when the
/// count is even. Rows are numbered `x` first, then `y`.
fn median_pairs(x: &[f64], y: &[f64], dim: usize) -> Option<(f64, Vec<(usize, usize, f64)>)> {
    let rows: Vec<&[f64]> = x.chunks_exact(dim).chain(y.chunks_exact(dim)).collect();
    let mut distances = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate().skip(i + 1) {
            let d = a.iter().zip(*b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            distances.push((d, i, j));
        }
    }
    if distances.is_empty() {
        return None;
    }
    distances.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mid = distances.len() / 2;
    let (median, pairs) = if distances.len() % 2 == 1 {
        let (d, i, j) = distances[mid];
        (d, vec![(i, j, 1.0)])
    } else {
        let ((d0, i0, j0), (d1, i1, j1)) = (distances[mid - 1], distances[mid]);
        (0.5 * (d0 + d1), vec![(i0, j0, 0.5), (i1, j1, 0.5)])
    };
    (median > 0.0).then_some((median, pairs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Includes diagonal kernel terms; nonnegative, defined for one sample per side.
    #[default]
    Biased,
    /// Excludes diagonal within-domain terms; needs at least two samples per side.
    Unbiased,
}

/// Which representation the discrepancy is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptOn {
    /// Encoder output.
    #[default]
    Features,
    /// Softmax outputs of the task head.
    Predictions,
    /// No regularizer: plain supervised training on the source domain.
    Off,
}

/// Mean categorical cross-entropy, `-(1/N) Σ y·log(max(p, 1e-12))`.
pub fn categorical_cross_entropy(g: &mut Graph, probs: Var, one_hot: &Tensor) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    let [n, k] = shape[..] else {
        return Err(Error::InvalidArgument {
            op: "categorical_cross_entropy",
            reason: format!("probabilities must be [N,K], got {shape:?}"),
        });
    };
    if n == 0 {
        return Err(Error::InvalidArgument {
            op: "categorical_cross_entropy",
            reason: "empty batch".into(),
        });
    }
    if one_hot.shape() != shape.as_slice() {
        return Err(Error::InvalidArgument {
            op: "categorical_cross_entropy",
            reason: format!("labels {:?} do not match probabilities {shape:?}", one_hot.shape()),
        });
    }
    for (row, labels) in one_hot.data().chunks_exact(k).enumerate() {
        let ones = labels.iter().filter(|&&v| v == 1.0).count();
        let zeros = labels.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::InvalidArgument {
                op: "categorical_cross_entropy",
                reason: format!("label row {row} is not one-hot: {labels:?}"),
            });
        }
    }
    Ok(g.cross_entropy(probs, one_hot)?)
}

/// Kernel matrix between the rows of `x` `[m,D]` and `y` `[n,D]`.
pub fn rbf_kernel_matrix(g: &mut Graph, x: Var, y: Var, spec: &KernelSpec) -> Result<Var> {
    let dim = check_samples(g, "rbf_kernel_matrix", x, y, 1)?;
    let [k] = kernel_blocks(g, spec, x, y, dim, [(x, y)])?;
    Ok(k)
}

/// Kernel matrices for each `(a, b)` block, with bandwidths taken from the
/// pooled sample `x ∪ y`.
fn kernel_blocks<const N: usize>(
    g: &mut Graph,
    spec: &KernelSpec,
    x: Var,
    y: Var,
    dim: usize,
    blocks: [(Var, Var); N],
) -> Result<[Var; N]> {
    let mut out = [x; N];
    match &spec.bandwidths {
        Bandwidths::MedianHeuristic { multipliers } if spec.bandwidth_gradient => {
            spec.validate()?;
            match median_pairs(g.value(x).data(), g.value(y).data(), dim) {
                Some((_, pairs)) => {
                    let base = g.pair_sq_distance(x, y, &pairs)?;
                    for (slot, (a, b)) in out.iter_mut().zip(blocks) {
                        *slot = g.rbf_kernel_scaled(a, b, base, multipliers)?;
                    }
                }
                None => {
                    // Degenerate sample: same constant fallback as the detached path.
                    let sigmas: Vec<f64> = multipliers.iter().map(|m| m.sqrt()).collect();
                    for (slot, (a, b)) in out.iter_mut().zip(blocks) {
                        *slot = g.rbf_kernel(a, b, &sigmas)?;
                    }
                }
            }
        }
        _ => {
            let sigmas = spec.resolve(g.value(x).data(), g.value(y).data(), dim)?;
            for (slot, (a, b)) in out.iter_mut().zip(blocks) {
                *slot = g.rbf_kernel(a, b, &sigmas)?;
            }
        }
    }
    Ok(out)
}

fn check_samples(g: &Graph, op: &'static str, x: Var, y: Var, min_rows: usize) -> Result<usize> {
    let (xs, ys) = (g.shape(x), g.shape(y));
    match (xs, ys) {
        ([m, d], [n, d2]) if d == d2 => {
            if *m < min_rows || *n < min_rows {
                return Err(Error::InvalidArgument {
                    op,
                    reason: format!("needs at least {min_rows} samples per side, got {m} and {n}"),
                });
            }
            Ok(*d)
        }
        _ => Err(Error::InvalidArgument {
            op,
            reason: format!("sample shapes {xs:?} and {ys:?} are not [m,D] and [n,D]"),
        }),
    }
}

/// Squared maximum mean discrepancy between samples `x` and `y`.
///
/// Biased: `mean(Kxx) + mean(Kyy) - 2 mean(Kxy)`. Unbiased: within-domain
/// means skip the diagonal. Bandwidths are resolved once from the pooled
/// sample and shared by all three kernel blocks.
pub fn mmd2(g: &mut Graph, x: Var, y: Var, spec: &KernelSpec, estimator: Estimator) -> Result<Var> {
    let (op, min_rows) = match estimator {
        Estimator::Biased => ("mmd2 (biased estimator)", 1),
        Estimator::Unbiased => ("mmd2 (unbiased estimator)", 2),
    };
    let dim = check_samples(g, op, x, y, min_rows)?;
    // A fixed operand order makes mmd2(x, y) and mmd2(y, x) bit-identical.
    let (x, y) = match compare_samples(g.value(x), g.value(y)) {
        Ordering::Greater => (y, x),
        _ => (x, y),
    };
    let [kxx, kyy, kxy] = kernel_blocks(g, spec, x, y, dim, [(x, x), (y, y), (x, y)])?;
    let (within_x, within_y) = match estimator {
        Estimator::Biased => (g.mean(kxx)?, g.mean(kyy)?),
        Estimator::Unbiased => (g.mean_off_diagonal(kxx)?, g.mean_off_diagonal(kyy)?),
    };
    let cross = g.mean(kxy)?;
    let within = g.add(within_x, within_y)?;
    let cross2 = g.scale(cross, 2.0)?;
    Ok(g.sub(within, cross2)?)
}

fn compare_samples(a: &Tensor, b: &Tensor) -> Ordering {
    a.shape().cmp(b.shape()).then_with(|| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Warm-up curve `λ(p) = λ_max · (2 / (1 + exp(-γ p)) - 1)` over training progress `p ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSchedule {
    pub lambda_max: f64,
    pub gamma: f64,
    progress: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self::new(1.0, 10.0)
    }
}

impl LambdaSchedule {
    pub fn new(lambda_max: f64, gamma: f64) -> Self {
        Self {
            lambda_max,
            gamma,
            progress: 0.0,
        }
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    pub fn lambda_at(&self, progress: f64) -> f64 {
        self.lambda_max * (2.0 / (1.0 + (-self.gamma * progress).exp()) - 1.0)
    }

    pub fn current(&self) -> f64 {
        self.lambda_at(self.progress)
    }

    /// Moves the schedule to the start of `epoch` and returns the new weight.
    pub fn update_lambda(&mut self, epoch: usize, total_epochs: usize) -> Result<f64> {
        if total_epochs == 0 {
            return Err(Error::InvalidArgument {
                op: "update_lambda",
                reason: "total_epochs must be >= 1".into(),
            });
        }
        if epoch >= total_epochs {
            return Err(Error::InvalidArgument {
                op: "update_lambda",
                reason: format!("epoch {epoch} out of range for {total_epochs} epochs"),
            });
        }
        self.progress = epoch as f64 / (total_epochs - 1).max(1) as f64;
        Ok(self.current())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub ce_loss: f64,
    pub mmd_value: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Discrepancy settings for [`combined_loss`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Adaptation {
    pub adapt_on: AdaptOn,
    pub kernel: KernelSpec,
    pub estimator: Estimator,
}

/// `CE(source) + λ · MMD²(source repr, target repr)`.
///
/// Target labels are never consulted. With [`AdaptOn::Off`] the total is the
/// cross-entropy alone and `target` may be `None`.
pub fn combined_loss(
    g: &mut Graph,
    source: ForwardOutput,
    source_labels: &Tensor,
    target: Option<ForwardOutput>,
    adaptation: &Adaptation,
    lambda: f64,
) -> Result<(Var, LossReport)> {
    let ce = categorical_cross_entropy(g, source.probs, source_labels)?;
    let ce_loss = g.value(ce).data()[0];
    let pick = |out: ForwardOutput| match adaptation.adapt_on {
        AdaptOn::Predictions => out.probs,
        _ => out.features,
    };
    if adaptation.adapt_on == AdaptOn::Off {
        return Ok((
            ce,
            LossReport {
                ce_loss,
                mmd_value: 0.0,
                lambda,
                total: ce_loss,
            },
        ));
    }
    let target = target.ok_or(Error::InvalidArgument {
        op: "combined_loss",
        reason: "adaptation requires a target batch".into(),
    })?;
    let discrepancy = mmd2(
        g,
        pick(source),
        pick(target),
        &adaptation.kernel,
        adaptation.estimator,
    )?;
    let weighted = g.scale(discrepancy, lambda)?;
    let total = g.add(ce, weighted)?;
    let report = LossReport {
        ce_loss,
        mmd_value: g.value(discrepancy).data()[0],
        lambda,
        total: g.value(total).data()[0],
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], data: Vec<f64>) -> Var {
        g.leaf(Tensor::new(shape, data).unwrap().with_requires_grad(true))
    }

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::new();
        let p = leaf(&mut g, &[1, 2], vec![0.5, 0.5]);
        for labels in [[1.0, 0.0], [0.0, 1.0]] {
            let y = Tensor::new(&[1, 2], labels.to_vec()).unwrap();
            let ce = categorical_cross_entropy(&mut g, p, &y).unwrap();
            assert!((scalar(&g, ce) - std::f64::consts::LN_2).abs() < 1e-12);
        }

        let p = leaf(&mut g, &[1, 2], vec![1.0 - 1e-12, 1e-12]);
        let y = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let ce = categorical_cross_entropy(&mut g, p, &y).unwrap();
        assert!(scalar(&g, ce).abs() < 1e-11);

        let p = leaf(&mut g, &[2, 2], vec![0.9, 0.1, 0.2, 0.8]);
        let y = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ce = categorical_cross_entropy(&mut g, p, &y).unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((scalar(&g, ce) - want).abs() < 1e-15);
        assert!((want - 0.164252).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut g = Graph::new();
        let p = leaf(&mut g, &[1, 2], vec![0.5, 0.5]);
        let soft = Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap();
        assert!(categorical_cross_entropy(&mut g, p, &soft).is_err());
        let two = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert!(categorical_cross_entropy(&mut g, p, &two).is_err());
        let wrong_shape = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
        assert!(categorical_cross_entropy(&mut g, p, &wrong_shape).is_err());
    }

    #[test]
    fn cross_entropy_through_softmax_has_closed_form_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (n, k) = (5, 3);
        let logits: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut labels = vec![0.0; n * k];
        for row in 0..n {
            labels[row * k + rng.gen_range(0..k)] = 1.0;
        }
        let y = Tensor::new(&[n, k], labels.clone()).unwrap();
        let mut g = Graph::new();
        let z = leaf(&mut g, &[n, k], logits);
        let p = g.softmax(z).unwrap();
        let ce = categorical_cross_entropy(&mut g, p, &y).unwrap();
        g.backward(ce).unwrap();
        let probs = g.value(p).data().to_vec();
        for ((grad, p), y) in g.grad(z).unwrap().iter().zip(&probs).zip(&labels) {
            assert!((grad - (p - y) / n as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn kernel_reference_values() {
        let mut g = Graph::new();
        let spec = KernelSpec::fixed(&[1.5]);
        let x = leaf(&mut g, &[1, 2], vec![0.3, -0.7]);
        let k = rbf_kernel_matrix(&mut g, x, x, &spec).unwrap();
        assert_eq!(g.value(k).data(), &[1.0]);

        // ‖x - y‖² = 2σ² → e⁻¹
        let sigma: f64 = 1.5;
        let y = leaf(&mut g, &[1, 2], vec![0.3 + sigma * 2f64.sqrt(), -0.7]);
        let k = rbf_kernel_matrix(&mut g, x, y, &spec).unwrap();
        assert!((g.value(k).data()[0] - (-1.0f64).exp()).abs() < 1e-12);

        let mixture = KernelSpec::fixed(&[0.5, 1.0, 2.0]);
        let k = rbf_kernel_matrix(&mut g, x, x, &mixture).unwrap();
        assert_eq!(g.value(k).data(), &[3.0]);
    }

    #[test]
    fn kernel_decays_with_distance() {
        let mut g = Graph::new();
        let spec = KernelSpec::fixed(&[1.0]);
        let origin = leaf(&mut g, &[1, 1], vec![0.0]);
        let far = leaf(&mut g, &[6, 1], vec![0.0, 0.5, 1.0, 2.0, 4.0, 40.0]);
        let k = rbf_kernel_matrix(&mut g, origin, far, &spec).unwrap();
        let d = g.value(k).data();
        assert!(d.windows(2).all(|w| w[1] < w[0]));
        assert!(d[5] < 1e-300);
        let empty = g.shape(origin).to_vec();
        assert_eq!(empty, vec![1, 1]);
    }

    #[test]
    fn mmd_reference_values() {
        let mut g = Graph::new();
        let sigma: f64 = 0.8;
        let spec = KernelSpec::fixed(&[sigma]);
        let x = leaf(&mut g, &[1, 1], vec![0.0]);
        let y = leaf(&mut g, &[1, 1], vec![sigma * 2f64.sqrt()]);
        let m = mmd2(&mut g, x, y, &spec, Estimator::Biased).unwrap();
        let want = 2.0 - 2.0 * (-1.0f64).exp();
        assert!((scalar(&g, m) - want).abs() < 1e-12);
        assert!((want - 1.264241).abs() < 1e-6);

        let z = leaf(&mut g, &[3, 2], vec![0.1, 0.2, -0.5, 0.3, 2.0, 1.0]);
        let m = mmd2(&mut g, z, z, &KernelSpec::default(), Estimator::Biased).unwrap();
        assert!(scalar(&g, m).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_gradient_keeps_value_and_passes_gradcheck() {
        let xs = vec![0.1, 0.7, -0.4, 0.3, 1.1, -0.2, 0.5, 0.9];
        let ys = vec![1.3, -0.6, 0.2, 0.8, -0.9, 0.4];
        let detached = KernelSpec::default();
        let live = KernelSpec::default().with_bandwidth_gradient(true);
        for est in [Estimator::Biased, Estimator::Unbiased] {
            let mut g = Graph::new();
            let x = leaf(&mut g, &[4, 2], xs.clone());
            let y = leaf(&mut g, &[3, 2], ys.clone());
            let a = mmd2(&mut g, x, y, &detached, est).unwrap();
            let b = mmd2(&mut g, x, y, &live, est).unwrap();
            assert!((scalar(&g, a) - scalar(&g, b)).abs() < 1e-12);

            let inputs = [Tensor::new(&[4, 2], xs.clone()).unwrap(), Tensor::new(&[3, 2], ys.clone()).unwrap()];
            let err = crate::tensor::gradcheck::grad_check_many(
                |g, v| mmd2(g, v[0], v[1], &live, est).map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => panic!("{other}"),
                }),
                &inputs,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{est:?}: {err}");
        }
    }

    #[test]
    fn bandwidth_gradient_makes_mmd_scale_invariant() {
        let xs = [0.1, 0.7, -0.4, 0.3, 1.1, -0.2];
        let ys = [1.3, -0.6, 0.2, 0.8, -0.9, 0.4];
        let spec = KernelSpec::default().with_bandwidth_gradient(true);
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3, 2], xs.to_vec());
        let y = leaf(&mut g, &[3, 2], ys.to_vec());
        let m = mmd2(&mut g, x, y, &spec, Estimator::Biased).unwrap();
        g.backward(m).unwrap();
        // d/dc MMD(c·x, c·y) at c = 1 is Σ x·∇x + y·∇y, which must vanish.
        let directional: f64 = [(x, &xs), (y, &ys)]
            .iter()
            .map(|(v, vals)| g.grad(*v).unwrap().iter().zip(vals.iter()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        assert!(directional.abs() < 1e-12, "{directional}");
    }

    #[test]
    fn mmd_sample_size_errors_name_estimator() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 2], vec![0.0, 1.0]);
        let y = leaf(&mut g, &[3, 2], vec![0.0; 6]);
        let err = mmd2(&mut g, x, y, &KernelSpec::default(), Estimator::Unbiased).unwrap_err();
        assert!(err.to_string().contains("unbiased"), "{err}");
        assert!(mmd2(&mut g, x, y, &KernelSpec::default(), Estimator::Biased).is_ok());
        let z = leaf(&mut g, &[2, 3], vec![0.0; 6]);
        assert!(mmd2(&mut g, x, z, &KernelSpec::default(), Estimator::Biased).is_err());
    }

    #[test]
    fn median_heuristic_falls_back_on_degenerate_samples() {
        assert_eq!(median_pairwise_sq_distance(&[1.0, 1.0], &[1.0, 1.0], 2), 1.0);
        assert_eq!(median_pairwise_sq_distance(&[0.0], &[], 1), 1.0);
        // distances {1, 4, 1} -> median 1
        assert_eq!(median_pairwise_sq_distance(&[0.0, 1.0], &[2.0], 1), 1.0);
        // distances {1, 4, 9, 1, 4, 1} -> sorted 1,1,1,4,4,9 -> (1 + 4) / 2
        assert_eq!(median_pairwise_sq_distance(&[0.0, 1.0], &[2.0, 3.0], 1), 2.5);
    }

    #[test]
    fn lambda_schedule_values() {
        let mut s = LambdaSchedule::default();
        assert_eq!(s.update_lambda(0, 30).unwrap(), 0.0);
        assert!((s.lambda_at(0.5) - 0.986614).abs() < 1e-6);
        let last = s.update_lambda(29, 30).unwrap();
        assert_eq!(s.progress(), 1.0);
        assert!((last - 0.999909).abs() < 1e-6);
        assert!(s.update_lambda(0, 0).is_err());
        assert!(s.update_lambda(30, 30).is_err());
        // a single epoch sits at p = 0
        assert_eq!(s.update_lambda(0, 1).unwrap(), 0.0);
    }

    fn outputs(g: &mut Graph, feats: Vec<f64>, probs: Vec<f64>) -> ForwardOutput {
        let n = probs.len() / 2;
        ForwardOutput {
            features: leaf(g, &[n, feats.len() / n], feats),
            probs: leaf(g, &[n, 2], probs),
        }
    }

    #[test]
    fn combined_loss_compositions() {
        let labels = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let src = outputs(&mut g, vec![0.1, 0.5, 0.9, 0.2], vec![0.7, 0.3, 0.4, 0.6]);
        let tgt = outputs(&mut g, vec![1.1, 0.4, 2.0, 0.0], vec![0.2, 0.8, 0.5, 0.5]);

        let off = Adaptation {
            adapt_on: AdaptOn::Off,
            ..Adaptation::default()
        };
        let (_, r) = combined_loss(&mut g, src, &labels, None, &off, 0.9).unwrap();
        assert_eq!(r.total, r.ce_loss);
        assert_eq!(r.mmd_value, 0.0);

        let feats = Adaptation::default();
        let (_, r) = combined_loss(&mut g, src, &labels, Some(tgt), &feats, 0.0).unwrap();
        assert_eq!(r.total, r.ce_loss);
        assert!(r.mmd_value > 0.0);

        let (_, r) = combined_loss(&mut g, src, &labels, Some(tgt), &feats, 0.7).unwrap();
        assert_eq!(r.total, r.ce_loss + 0.7 * r.mmd_value);

        let (_, r) = combined_loss(&mut g, src, &labels, Some(src), &feats, 0.7).unwrap();
        assert!((r.total - r.ce_loss).abs() < 1e-12);

        let preds = Adaptation {
            adapt_on: AdaptOn::Predictions,
            ..Adaptation::default()
        };
        let (_, r) = combined_loss(&mut g, src, &labels, Some(tgt), &preds, 1.0).unwrap();
        let mut check = Graph::new();
        let a = check.constant(Tensor::new(&[2, 2], vec![0.7, 0.3, 0.4, 0.6]).unwrap());
        let b = check.constant(Tensor::new(&[2, 2], vec![0.2, 0.8, 0.5, 0.5]).unwrap());
        let m = mmd2(&mut check, a, b, &KernelSpec::default(), Estimator::Biased).unwrap();
        assert_eq!(r.mmd_value, scalar(&check, m));

        assert!(combined_loss(&mut g, src, &labels, None, &feats, 0.5).is_err());
    }
}
