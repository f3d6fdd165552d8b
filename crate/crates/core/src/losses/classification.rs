//! Classification-based objectives: four logit heads feeding a softmax cross
//! entropy, plus the center penalty.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{CenterLossParams, CenterPenalty, ClassifierParams, LossHyper, LossOutput, Reduction, UnitRows};
use crate::embedding::SpeakerId;
use crate::error::{check_dim, Error, Result};
use crate::sampling::LabeledBatch;

/// Guard below which the margin-free derivative is used for the target logit.
const SIN_GUARD: f64 = 1e-6;

/// Which logit head produced a [`Logits`] matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `f·Cᵀ + b`.
    Linear,
    /// `f·Cᵀ`.
    NoBias,
    /// `α·cos θ`.
    Coco,
    /// `α·cos(θ + m)` on the target class, `α·cos θ` elsewhere.
    Aam,
}

/// Per-sample logits plus what is needed to push gradients back to the head inputs.
#[derive(Debug, Clone)]
pub struct Logits {
    values: Array2<f64>,
    source: Source,
}

#[derive(Debug, Clone)]
enum Source {
    Raw,
    Affine {
        embeddings: Array2<f64>,
        centers: Array2<f64>,
        has_bias: bool,
    },
    Angular {
        rows: UnitRows,
        centers: UnitRows,
        cos: Array2<f64>,
        /// dσ_ik / d cos θ_ik
        slope: Array2<f64>,
    },
}

struct HeadGrads {
    embeddings: Array2<f64>,
    centers: Option<Array2<f64>>,
    bias: Option<Array1<f64>>,
}

impl Logits {
    /// Wraps precomputed logits; gradients stop at the logits.
    pub fn raw(values: Array2<f64>) -> Self {
        Logits {
            values,
            source: Source::Raw,
        }
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn n_classes(&self) -> usize {
        self.values.ncols()
    }

    fn backward(&self, grad: &Array2<f64>) -> HeadGrads {
        match &self.source {
            Source::Raw => HeadGrads {
                embeddings: Array2::zeros((grad.nrows(), 0)),
                centers: None,
                bias: None,
            },
            Source::Affine {
                embeddings,
                centers,
                has_bias,
            } => HeadGrads {
                embeddings: grad.dot(centers),
                centers: Some(grad.t().dot(embeddings)),
                bias: has_bias.then(|| grad.sum_axis(Axis(0))),
            },
            Source::Angular {
                rows,
                centers,
                cos,
                slope,
            } => {
                // g = dL/dcos
                let g = grad * slope;
                let gc = &g * cos;
                let mut d_rows = g.dot(&centers.hat);
                for (i, mut row) in d_rows.axis_iter_mut(Axis(0)).enumerate() {
                    let s: f64 = gc.row(i).sum();
                    row.scaled_add(-s, &rows.hat.row(i));
                    row /= rows.norms[i];
                }
                let mut d_centers = g.t().dot(&rows.hat);
                for (k, mut row) in d_centers.axis_iter_mut(Axis(0)).enumerate() {
                    let s: f64 = gc.column(k).sum();
                    row.scaled_add(-s, &centers.hat.row(k));
                    row /= centers.norms[k];
                }
                HeadGrads {
                    embeddings: d_rows,
                    centers: Some(d_centers),
                    bias: None,
                }
            }
        }
    }
}

fn check_head_dims(batch: &LabeledBatch, params: &ClassifierParams) -> Result<()> {
    check_dim("classifier centers", batch.dim(), params.centers.ncols())?;
    if let Some(bias) = &params.bias {
        check_dim("classifier bias", params.centers.nrows(), bias.len())?;
    }
    Ok(())
}

/// `σ_i = f(x_i)·Cᵀ + b`.
pub fn logits_linear(batch: &LabeledBatch, params: &ClassifierParams) -> Result<Logits> {
    check_head_dims(batch, params)?;
    let bias = params
        .bias
        .as_ref()
        .ok_or_else(|| Error::domain("linear logits require a bias vector"))?;
    let values = batch.rows().dot(&params.centers.t()) + bias;
    Ok(Logits {
        values,
        source: Source::Affine {
            embeddings: batch.rows().to_owned(),
            centers: params.centers.clone(),
            has_bias: true,
        },
    })
}

/// `σ_ik = ‖f_i‖·‖c_k‖·cos θ`, which is the plain dot product.
pub fn logits_nobias(batch: &LabeledBatch, params: &ClassifierParams) -> Result<Logits> {
    check_head_dims(batch, params)?;
    let values = batch.rows().dot(&params.centers.t());
    Ok(Logits {
        values,
        source: Source::Affine {
            embeddings: batch.rows().to_owned(),
            centers: params.centers.clone(),
            has_bias: false,
        },
    })
}

/// `σ_ik = α·cos θ_ik`.
pub fn logits_coco(batch: &LabeledBatch, params: &ClassifierParams, hyper: &LossHyper) -> Result<Logits> {
    angular_logits(batch, params, hyper.alpha, 0.0)
}

/// Additive angular margin logits.
pub fn logits_aam(batch: &LabeledBatch, params: &ClassifierParams, hyper: &LossHyper) -> Result<Logits> {
    hyper.check_aam_margin()?;
    angular_logits(batch, params, hyper.alpha, hyper.margin)
}

fn angular_logits(batch: &LabeledBatch, params: &ClassifierParams, alpha: f64, margin: f64) -> Result<Logits> {
    check_head_dims(batch, params)?;
    if !(alpha > 0.0) {
        return Err(Error::domain(format!("alpha must be positive, got {alpha}")));
    }
    let n_classes = params.centers.nrows();
    if margin > 0.0 {
        check_labels(batch.labels(), n_classes)?;
    }
    let rows = UnitRows::new(batch.rows(), "embedding row")?;
    let centers = UnitRows::new(params.centers.view(), "center row")?;
    let cos = rows.hat.dot(&centers.hat.t()).mapv(|c| c.clamp(-1.0, 1.0));
    let mut values = &cos * alpha;
    let mut slope = Array2::from_elem(cos.raw_dim(), alpha);
    if margin > 0.0 {
        for (i, label) in batch.labels().iter().enumerate() {
            let k = label.index();
            let theta = cos[[i, k]].acos();
            values[[i, k]] = alpha * (theta + margin).cos();
            let sin_theta = theta.sin();
            if sin_theta >= SIN_GUARD {
                slope[[i, k]] = alpha * (theta + margin).sin() / sin_theta;
            }
        }
    }
    Ok(Logits {
        values,
        source: Source::Angular {
            rows,
            centers,
            cos,
            slope,
        },
    })
}

pub fn head_logits(
    head: HeadKind,
    batch: &LabeledBatch,
    params: &ClassifierParams,
    hyper: &LossHyper,
) -> Result<Logits> {
    match head {
        HeadKind::Linear => logits_linear(batch, params),
        HeadKind::NoBias => logits_nobias(batch, params),
        HeadKind::Coco => logits_coco(batch, params, hyper),
        HeadKind::Aam => logits_aam(batch, params, hyper),
    }
}

pub(crate) fn check_labels(labels: &[SpeakerId], n_classes: usize) -> Result<()> {
    match labels.iter().find(|l| l.index() >= n_classes) {
        Some(bad) => Err(Error::domain(format!(
            "label {bad} out of range for {n_classes} classes"
        ))),
        None => Ok(()),
    }
}

fn log_softmax_row(row: ndarray::ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = row.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    (max + sum.ln(), exp / sum)
}

/// Mean negative log-softmax of the target logits.
pub fn cross_entropy(logits: &Logits, labels: &[SpeakerId]) -> Result<LossOutput> {
    let values = &logits.values;
    check_dim("cross_entropy labels", values.nrows(), labels.len())?;
    check_labels(labels, values.ncols())?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("cross_entropy received non-finite logits"));
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(values.raw_dim());
    for (i, label) in labels.iter().enumerate() {
        let k = label.index();
        let (lse, probs) = log_softmax_row(values.row(i));
        total += lse - values[[i, k]];
        let mut g = grad.row_mut(i);
        g.assign(&probs);
        g[k] -= 1.0;
        g /= n;
    }
    let head = logits.backward(&grad);
    Ok(LossOutput {
        // lse ≥ target logit, so the tiny negative values are rounding noise
        value: (total / n).max(0.0),
        grad_embeddings: head.embeddings,
        grad_centers: head.centers,
        grad_bias: head.bias,
        grad_gamma: None,
        grad_logits: Some(grad),
        reduction: Reduction::Mean,
    })
}

/// `(λ/2)·Σ_i penalty(cos θ_{i,γ_{y_i}})` on its own.
pub fn center_penalty(batch: &LabeledBatch, cparams: &CenterLossParams) -> Result<LossOutput> {
    check_dim("center gamma", batch.dim(), cparams.gamma.ncols())?;
    check_labels(batch.labels(), cparams.gamma.nrows())?;
    if !(cparams.lambda >= 0.0) {
        return Err(Error::domain(format!("lambda must be >= 0, got {}", cparams.lambda)));
    }
    let rows = UnitRows::new(batch.rows(), "embedding row")?;
    let gamma = UnitRows::new(cparams.gamma.view(), "gamma row")?;
    let lambda = cparams.lambda;
    let mut value = 0.0;
    let mut grad_rows = Array2::zeros(batch.rows().raw_dim());
    let mut grad_gamma = Array2::zeros(cparams.gamma.raw_dim());
    for (i, label) in batch.labels().iter().enumerate() {
        let k = label.index();
        let c = rows.cos_with(i, &gamma, k);
        let (p, dp) = match cparams.penalty {
            CenterPenalty::SquaredDistance => ((1.0 - c) * (1.0 - c), -2.0 * (1.0 - c)),
            CenterPenalty::OneMinusSquaredCosine => (1.0 - c * c, -2.0 * c),
        };
        value += 0.5 * lambda * p;
        let upstream = 0.5 * lambda * dp;
        rows.accumulate_cross(i, &gamma, k, c, upstream, &mut grad_rows, &mut grad_gamma);
    }
    Ok(LossOutput {
        value,
        grad_embeddings: grad_rows,
        grad_centers: None,
        grad_bias: None,
        grad_gamma: Some(grad_gamma),
        grad_logits: None,
        reduction: Reduction::Sum,
    })
}

/// Cross entropy on `head` logits plus the center penalty.
pub fn center_loss(
    batch: &LabeledBatch,
    params: &ClassifierParams,
    cparams: &CenterLossParams,
    head: HeadKind,
    hyper: &LossHyper,
) -> Result<LossOutput> {
    let logits = head_logits(head, batch, params, hyper)?;
    let mut out = cross_entropy(&logits, batch.labels())?;
    let penalty = center_penalty(batch, cparams)?;
    out.value += penalty.value;
    out.grad_embeddings += &penalty.grad_embeddings;
    out.grad_gamma = penalty.grad_gamma;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn batch(rows: Array2<f64>, labels: &[usize]) -> LabeledBatch {
        LabeledBatch::new(rows, labels.iter().map(|&l| SpeakerId(l)).collect()).unwrap()
    }

    fn basis() -> ClassifierParams {
        ClassifierParams {
            centers: array![[1.0, 0.0], [0.0, 1.0]],
            bias: Some(array![0.0, 0.0]),
        }
    }

    #[test]
    fn linear_examples() {
        let b = batch(array![[1.0, 0.0]], &[0]);
        let l = logits_linear(&b, &basis()).unwrap();
        assert_eq!(l.values(), array![[1.0, 0.0]]);

        let mut p = basis();
        p.bias = Some(array![0.5, -0.5]);
        assert_eq!(logits_linear(&b, &p).unwrap().values(), array![[1.5, -0.5]]);

        let z = batch(array![[0.0, 0.0]], &[0]);
        p.bias = Some(array![1.0, 2.0]);
        assert_eq!(logits_linear(&z, &p).unwrap().values(), array![[1.0, 2.0]]);
    }

    #[test]
    fn linear_dimension_errors() {
        let b = batch(array![[1.0, 0.0, 0.0]], &[0]);
        assert!(matches!(logits_linear(&b, &basis()), Err(Error::DimensionMismatch { .. })));
        let mut p = basis();
        p.bias = Some(array![0.0]);
        let b = batch(array![[1.0, 0.0]], &[0]);
        assert!(logits_linear(&b, &p).is_err());
        p.bias = None;
        assert!(logits_linear(&b, &p).is_err());
    }

    #[test]
    fn nobias_examples() {
        let p = ClassifierParams {
            centers: array![[1.0, 0.0], [3.0, 0.0], [0.0, 5.0]],
            bias: None,
        };
        let l = logits_nobias(&batch(array![[1.0, 0.0]], &[0]), &p).unwrap();
        assert_eq!(l.values()[[0, 0]], 1.0);
        assert_eq!(l.values()[[0, 2]], 0.0);
        let l = logits_nobias(&batch(array![[2.0, 0.0]], &[0]), &p).unwrap();
        assert_eq!(l.values()[[0, 1]], 6.0);
    }

    #[test]
    fn coco_examples() {
        let hyper = LossHyper::new(10.0, 0.0).unwrap();
        let p = ClassifierParams {
            centers: array![[2.0, 0.0], [0.0, 1.0], [2.0, 1.0]],
            bias: None,
        };
        let l = logits_coco(&batch(array![[1.0, 0.0]], &[0]), &p, &hyper).unwrap();
        assert_abs_diff_eq!(l.values()[[0, 0]], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.values()[[0, 1]], 0.0, epsilon = 1e-12);
        let l = logits_coco(&batch(array![[1.0, 2.0]], &[0]), &p, &hyper).unwrap();
        assert_abs_diff_eq!(l.values()[[0, 2]], 8.0, epsilon = 1e-12);
    }

    #[test]
    fn coco_rejects_zero_norm() {
        let hyper = LossHyper::new(10.0, 0.0).unwrap();
        let err = logits_coco(&batch(array![[0.0, 0.0]], &[0]), &basis(), &hyper).unwrap_err();
        assert!(err.to_string().contains("embedding row 0"), "{err}");
        let p = ClassifierParams {
            centers: array![[1.0, 0.0], [0.0, 0.0]],
            bias: None,
        };
        let err = logits_coco(&batch(array![[1.0, 0.0]], &[0]), &p, &hyper).unwrap_err();
        assert!(err.to_string().contains("center row 1"), "{err}");
    }

    #[test]
    fn aam_examples() {
        let hyper = LossHyper::new(10.0, 0.05).unwrap();
        let b = batch(array![[1.0, 0.0]], &[0]);
        let l = logits_aam(&b, &basis(), &hyper).unwrap();
        // 10·cos(0.05)
        assert_abs_diff_eq!(l.values()[[0, 0]], 9.987_502_603_949_663, epsilon = 1e-12);
        assert_abs_diff_eq!(l.values()[[0, 1]], 0.0, epsilon = 1e-12);

        let zero = LossHyper::new(10.0, 0.0).unwrap();
        let b = batch(array![[0.3, -1.2], [0.7, 0.1]], &[1, 0]);
        let a = logits_aam(&b, &basis(), &zero).unwrap();
        let c = logits_coco(&b, &basis(), &zero).unwrap();
        assert_eq!(a.values(), c.values());
    }

    #[test]
    fn aam_margin_bound() {
        assert!(LossHyper::new(10.0, 0.6).unwrap().check_aam_margin().is_err());
        let b = batch(array![[1.0, 0.0]], &[0]);
        let hyper = LossHyper { alpha: 10.0, margin: 0.7 };
        assert!(logits_aam(&b, &basis(), &hyper).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Logits::raw(Array2::from_elem((3, 4), 0.7));
        let out = cross_entropy(&uniform, &[SpeakerId(0), SpeakerId(2), SpeakerId(3)]).unwrap();
        assert_abs_diff_eq!(out.value, 4f64.ln(), epsilon = 1e-12);

        let l = Logits::raw(array![[3f64.ln(), 0.0]]);
        let out = cross_entropy(&l, &[SpeakerId(0)]).unwrap();
        assert_abs_diff_eq!(out.value, -(0.75f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(out.value, 0.287_682_072_451_780_9, epsilon = 1e-12);

        let l = Logits::raw(array![[800.0, 0.0, -3.0]]);
        let out = cross_entropy(&l, &[SpeakerId(0)]).unwrap();
        assert!(out.value.is_finite() && out.value < 1e-300);
    }

    #[test]
    fn cross_entropy_uniform_gradient() {
        let l = Logits::raw(array![[0.0, 0.0]]);
        let out = cross_entropy(&l, &[SpeakerId(1)]).unwrap();
        let g = out.grad_logits.unwrap();
        assert_abs_diff_eq!(g[[0, 0]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g[[0, 1]], -0.5, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let l = Logits::raw(array![[0.0, 0.0]]);
        assert!(cross_entropy(&l, &[SpeakerId(2)]).is_err());
    }

    fn center_params(gamma: Array2<f64>, lambda: f64) -> CenterLossParams {
        CenterLossParams {
            gamma,
            lambda,
            penalty: CenterPenalty::SquaredDistance,
        }
    }

    #[test]
    fn center_examples() {
        let hyper = LossHyper::default();
        let b = batch(array![[2.0, 0.0], [0.0, 3.0]], &[0, 1]);
        let aligned = center_params(array![[1.0, 0.0], [0.0, 1.0]], 1.0);
        let ce = cross_entropy(&logits_linear(&b, &basis()).unwrap(), b.labels()).unwrap();
        let out = center_loss(&b, &basis(), &aligned, HeadKind::Linear, &hyper).unwrap();
        assert_abs_diff_eq!(out.value, ce.value, epsilon = 1e-15);

        let single = batch(array![[1.0, 0.0]], &[0]);
        let orth = center_params(array![[0.0, 1.0], [1.0, 0.0]], 1.0);
        let p = center_penalty(&single, &orth).unwrap();
        assert_abs_diff_eq!(p.value, 0.5, epsilon = 1e-15);

        let alt = CenterLossParams {
            penalty: CenterPenalty::OneMinusSquaredCosine,
            ..orth.clone()
        };
        assert_abs_diff_eq!(center_penalty(&single, &alt).unwrap().value, 0.5, epsilon = 1e-15);

        let disabled = center_params(array![[0.3, 1.0], [1.0, -2.0]], 0.0);
        let out = center_loss(&b, &basis(), &disabled, HeadKind::Linear, &hyper).unwrap();
        assert_eq!(out.value, ce.value);
        assert_eq!(out.grad_embeddings, ce.grad_embeddings);
    }

    #[test]
    fn center_penalty_readings_differ_off_axis() {
        // cos = 0.5: (1 - 0.5)^2 = 0.25 versus 1 - 0.25 = 0.75
        let single = batch(array![[1.0, 3f64.sqrt()]], &[0]);
        let mut cp = center_params(array![[1.0, 0.0]], 2.0);
        assert_abs_diff_eq!(center_penalty(&single, &cp).unwrap().value, 0.25, epsilon = 1e-12);
        cp.penalty = CenterPenalty::OneMinusSquaredCosine;
        assert_abs_diff_eq!(center_penalty(&single, &cp).unwrap().value, 0.75, epsilon = 1e-12);
    }

    #[test]
    fn center_rejects_zero_gamma() {
        let single = batch(array![[1.0, 0.0]], &[0]);
        let cp = center_params(array![[0.0, 0.0]], 1.0);
        let err = center_penalty(&single, &cp).unwrap_err();
        assert!(err.to_string().contains("gamma row 0"), "{err}");
    }
}
