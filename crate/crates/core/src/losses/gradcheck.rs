use ndarray::Array2;

use super::{LossConfig, LossOutput, LossParams};
use crate::error::Result;
use crate::sampling::{LabeledBatch, TupleIndex};

/// Compares an analytic gradient against central differences.
///
/// `loss_fn` maps a flat parameter vector to `(value, analytic gradient)`.
/// Returns `max_j |analytic_j − numeric_j| / max(1, |numeric_j|)`. Any error
/// from `loss_fn` is reported as an infinite discrepancy.
pub fn finite_difference_check<F>(mut loss_fn: F, inputs: &[f64], epsilon: f64) -> f64
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let analytic = match loss_fn(inputs) {
        Ok((_, g)) if g.len() == inputs.len() => g,
        _ => return f64::INFINITY,
    };
    let mut x = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for j in 0..x.len() {
        let orig = x[j];
        x[j] = orig + epsilon;
        let plus = loss_fn(&x).map(|(v, _)| v);
        x[j] = orig - epsilon;
        let minus = loss_fn(&x).map(|(v, _)| v);
        x[j] = orig;
        let (Ok(plus), Ok(minus)) = (plus, minus) else {
            return f64::INFINITY;
        };
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
        if !err.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max(err);
    }
    worst
}

/// Layout of the flattened (embeddings, centers, bias, gamma) vector.
struct Packing {
    rows: (usize, usize),
    centers: Option<(usize, usize)>,
    bias: Option<usize>,
    gamma: Option<(usize, usize)>,
}

impl Packing {
    fn of(batch: &LabeledBatch, params: &LossParams) -> Self {
        let classifier = params.classifier.as_ref();
        Packing {
            rows: batch.rows().dim(),
            centers: classifier.map(|c| c.centers.dim()),
            bias: classifier.and_then(|c| c.bias.as_ref().map(|b| b.len())),
            gamma: params.center.as_ref().map(|c| c.gamma.dim()),
        }
    }

    fn pack(batch: &LabeledBatch, params: &LossParams) -> Vec<f64> {
        let mut flat: Vec<f64> = batch.rows().iter().copied().collect();
        if let Some(c) = &params.classifier {
            flat.extend(c.centers.iter());
            if let Some(b) = &c.bias {
                flat.extend(b.iter());
            }
        }
        if let Some(c) = &params.center {
            flat.extend(c.gamma.iter());
        }
        flat
    }

    fn unpack(&self, flat: &[f64], template_batch: &LabeledBatch, template: &LossParams) -> (LabeledBatch, LossParams) {
        let mut offset = 0;
        let mut take = |(r, c): (usize, usize)| {
            let m = Array2::from_shape_vec((r, c), flat[offset..offset + r * c].to_vec()).expect("shape");
            offset += r * c;
            m
        };
        let rows = take(self.rows);
        let mut params = template.clone();
        if let (Some(dim), Some(c)) = (self.centers, params.classifier.as_mut()) {
            c.centers = take(dim);
            if let (Some(n), Some(b)) = (self.bias, c.bias.as_mut()) {
                *b = take((1, n)).into_shape_with_order(n).expect("shape");
            }
        }
        if let (Some(dim), Some(c)) = (self.gamma, params.center.as_mut()) {
            c.gamma = take(dim);
        }
        let batch = LabeledBatch::new(rows, template_batch.labels().to_vec()).expect("labels unchanged");
        (batch, params)
    }

    fn flatten_grads(out: &LossOutput) -> Vec<f64> {
        let mut flat: Vec<f64> = out.grad_embeddings.iter().copied().collect();
        if let Some(g) = &out.grad_centers {
            flat.extend(g.iter());
        }
        if let Some(g) = &out.grad_bias {
            flat.extend(g.iter());
        }
        if let Some(g) = &out.grad_gamma {
            flat.extend(g.iter());
        }
        flat
    }
}

/// Runs [`finite_difference_check`] over every embedding coordinate and every
/// head parameter of `config`'s loss.
pub fn check_loss_gradients(
    config: &LossConfig,
    batch: &LabeledBatch,
    tuples: &TupleIndex,
    params: &LossParams,
    epsilon: f64,
) -> f64 {
    let packing = Packing::of(batch, params);
    let x = Packing::pack(batch, params);
    finite_difference_check(
        |flat| {
            let (b, p) = packing.unpack(flat, batch, params);
            let out = config.evaluate(&b, tuples, &p)?;
            Ok((out.value, Packing::flatten_grads(&out)))
        },
        &x,
        epsilon,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::SpeakerId;
    use crate::error::Error;
    use crate::losses::{center_penalty, cross_entropy, CenterLossParams, CenterPenalty, LossKind, Logits};
    use crate::sampling::{form_pairs, form_triplets};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let err = finite_difference_check(
            |x| Ok((x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect())),
            &[0.3, -1.2, 4.0],
            1e-5,
        );
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = finite_difference_check(|x| Ok((x[0] * x[0], vec![x[0]])), &[1.0], 1e-5);
        // analytic 1, numeric 2: |1 - 2| / 2
        assert!((err - 0.5).abs() < 1e-6, "{err}");
    }

    #[test]
    fn errors_are_reported_not_thrown() {
        let err = finite_difference_check(|_| Err(Error::domain("boom")), &[1.0], 1e-5);
        assert!(err.is_infinite());
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let labels = vec![SpeakerId(0), SpeakerId(1)];
        let template = LabeledBatch::new(array![[0.4, 0.1], [-0.3, 0.8]], labels.clone()).unwrap();
        let gamma = array![[1.0, 0.2], [0.1, -1.0]];
        let flat: Vec<f64> = template.rows().iter().chain(gamma.iter()).copied().collect();
        let eval = |x: &[f64]| {
            let b = LabeledBatch::new(Array2::from_shape_vec((2, 2), x[..4].to_vec()).unwrap(), labels.clone())?;
            let cp = CenterLossParams {
                gamma: Array2::from_shape_vec((2, 2), x[4..].to_vec()).unwrap(),
                lambda: 0.0,
                penalty: CenterPenalty::SquaredDistance,
            };
            let out = center_penalty(&b, &cp)?;
            assert_eq!(out.value, 0.0);
            assert!(out.grad_embeddings.iter().chain(out.grad_gamma.as_ref().unwrap().iter()).all(|&g| g == 0.0));
            Ok((out.value, out.grad_embeddings.iter().chain(out.grad_gamma.unwrap().iter()).copied().collect()))
        };
        assert_eq!(finite_difference_check(eval, &flat, 1e-5), 0.0);
    }

    #[test]
    fn cross_entropy_logit_gradient_matches_differences() {
        let labels = [SpeakerId(0)];
        let eval = |x: &[f64]| {
            let out = cross_entropy(&Logits::raw(array![[x[0], x[1]]]), &labels)?;
            Ok((out.value, out.grad_logits.unwrap().iter().copied().collect()))
        };
        assert!(finite_difference_check(eval, &[0.0, 0.0], 1e-5) < 1e-9);
        let (_, g) = eval(&[0.0, 0.0]).unwrap();
        assert_eq!(g, vec![-0.5, 0.5]);
    }

    #[test]
    fn every_kind_passes_on_a_small_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let labels: Vec<SpeakerId> = [0, 0, 1, 1, 2, 2, 3].into_iter().map(SpeakerId).collect();
        for kind in LossKind::ALL {
            let cfg = crate::losses::LossConfig::reference(kind);
            let batch = LabeledBatch::new(
                Array2::from_shape_fn((7, 5), |_| rng.random_range(-1.0..1.0)),
                labels.clone(),
            )
            .unwrap();
            let mut tuples = form_pairs(&batch).unwrap();
            tuples.triplets = form_triplets(&batch).unwrap().triplets;
            if cfg.kink_distance(&batch, &tuples).unwrap() < 1e-3 {
                continue;
            }
            let params = cfg.init_params(4, 5, &mut rng);
            let err = check_loss_gradients(&cfg, &batch, &tuples, &params, 1e-5);
            assert!(err <= 1e-4, "{kind}: {err}");
        }
    }
}
