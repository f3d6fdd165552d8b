//! Metric-learning objectives with exact analytic gradients.
//!
//! Every loss returns a [`LossOutput`] carrying the scalar value together with
//! the gradient with respect to each embedding row and, for classification
//! losses, with respect to the head parameters (centers, bias, gamma).
//!
//! Classification losses are averaged over the batch; contrast losses are sums
//! over the tuples they see. The reduction is reported on the output so that
//! learning rates can be compared across families.

mod classification;
mod contrast;
mod gradcheck;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use classification::{
    center_loss, center_penalty, cross_entropy, head_logits, logits_aam, logits_coco, logits_linear,
    logits_nobias, HeadKind, Logits,
};
pub use contrast::{
    contrastive_kink_distance, contrastive_loss, sigmoid, triplet_kink_distance, triplet_loss_hinge,
    triplet_loss_sigmoid, triplet_sigmoid_terms,
};
pub use gradcheck::{check_loss_gradients, finite_difference_check};

use crate::error::{Error, Result};
use crate::sampling::{LabeledBatch, TupleIndex};

/// Largest additive angular margin accepted.
pub const MAX_AAM_MARGIN: f64 = 0.5;

/// Scale and margin hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossHyper {
    pub alpha: f64,
    pub margin: f64,
}

impl LossHyper {
    pub fn new(alpha: f64, margin: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::domain(format!("alpha must be positive, got {alpha}")));
        }
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(Error::domain(format!("margin must be >= 0, got {margin}")));
        }
        Ok(LossHyper { alpha, margin })
    }

    pub(crate) fn check_aam_margin(&self) -> Result<()> {
        if !(0.0..=MAX_AAM_MARGIN).contains(&self.margin) {
            return Err(Error::domain(format!(
                "angular margin must lie in [0, {MAX_AAM_MARGIN}], got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

impl Default for LossHyper {
    fn default() -> Self {
        LossHyper {
            alpha: 10.0,
            margin: 0.0,
        }
    }
}

/// Class centers `C` (K×m) and the optional bias `b` of the linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub centers: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

/// Which of the two readings of the center penalty to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterPenalty {
    /// `(1 − cos θ)²`
    #[default]
    SquaredDistance,
    /// `1 − cos² θ`
    OneMinusSquaredCosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterLossParams {
    pub gamma: Array2<f64>,
    pub lambda: f64,
    pub penalty: CenterPenalty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_embeddings: Array2<f64>,
    pub grad_centers: Option<Array2<f64>>,
    pub grad_bias: Option<Array1<f64>>,
    pub grad_gamma: Option<Array2<f64>>,
    /// Only set by cross entropy.
    pub grad_logits: Option<Array2<f64>>,
    pub reduction: Reduction,
}

/// Row-normalized copy of a matrix, keeping the original norms.
#[derive(Debug, Clone)]
pub(crate) struct UnitRows {
    pub(crate) hat: Array2<f64>,
    pub(crate) norms: Array1<f64>,
}

impl UnitRows {
    pub(crate) fn new(m: ArrayView2<'_, f64>, what: &str) -> Result<Self> {
        let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::zero_norm(format!("{what} {i}")));
        }
        let mut hat = m.to_owned();
        for (mut row, &n) in hat.axis_iter_mut(Axis(0)).zip(&norms) {
            row /= n;
        }
        Ok(UnitRows { hat, norms })
    }

    pub(crate) fn cos(&self, i: usize, j: usize) -> f64 {
        self.hat.row(i).dot(&self.hat.row(j)).clamp(-1.0, 1.0)
    }

    pub(crate) fn cos_with(&self, i: usize, other: &UnitRows, k: usize) -> f64 {
        self.hat.row(i).dot(&other.hat.row(k)).clamp(-1.0, 1.0)
    }

    /// Adds `upstream · ∂cos(r_i, r_j)/∂r_{i,j}` to `grad`.
    pub(crate) fn accumulate_pair(&self, i: usize, j: usize, c: f64, upstream: f64, grad: &mut Array2<f64>) {
        let (hi, hj) = (self.hat.row(i), self.hat.row(j));
        let (si, sj) = (upstream / self.norms[i], upstream / self.norms[j]);
        {
            let mut gi = grad.row_mut(i);
            gi.scaled_add(si, &hj);
            gi.scaled_add(-si * c, &hi);
        }
        let mut gj = grad.row_mut(j);
        gj.scaled_add(sj, &hi);
        gj.scaled_add(-sj * c, &hj);
    }

    /// Same as [`Self::accumulate_pair`] with `r_j` taken from another matrix.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn accumulate_cross(
        &self,
        i: usize,
        other: &UnitRows,
        k: usize,
        c: f64,
        upstream: f64,
        grad_self: &mut Array2<f64>,
        grad_other: &mut Array2<f64>,
    ) {
        let (hi, hk) = (self.hat.row(i), other.hat.row(k));
        let si = upstream / self.norms[i];
        let sk = upstream / other.norms[k];
        let mut gi = grad_self.row_mut(i);
        gi.scaled_add(si, &hk);
        gi.scaled_add(-si * c, &hi);
        let mut gk = grad_other.row_mut(k);
        gk.scaled_add(sk, &hi);
        gk.scaled_add(-sk * c, &hk);
    }
}

/// The eight trainable objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    CeNobias,
    Coco,
    Aam,
    Center,
    Contrastive,
    TripletHinge,
    TripletSigmoid,
}

/// How a loss consumes a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossFamily {
    Classification,
    Pairs,
    Triplets,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::Ce,
        LossKind::CeNobias,
        LossKind::Coco,
        LossKind::Aam,
        LossKind::Center,
        LossKind::Contrastive,
        LossKind::TripletHinge,
        LossKind::TripletSigmoid,
    ];

    /// The six objectives compared side by side: cross entropy, congenerous
    /// cosine, additive angular margin, center, contrastive and sigmoid triplet.
    pub const ROSTER: [LossKind; 6] = [
        LossKind::Ce,
        LossKind::Coco,
        LossKind::Aam,
        LossKind::Center,
        LossKind::Contrastive,
        LossKind::TripletSigmoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::CeNobias => "ce_nobias",
            LossKind::Coco => "coco",
            LossKind::Aam => "aam",
            LossKind::Center => "center",
            LossKind::Contrastive => "contrastive",
            LossKind::TripletHinge => "triplet_hinge",
            LossKind::TripletSigmoid => "triplet_sigmoid",
        }
    }

    pub fn family(self) -> LossFamily {
        match self {
            LossKind::Contrastive => LossFamily::Pairs,
            LossKind::TripletHinge | LossKind::TripletSigmoid => LossFamily::Triplets,
            _ => LossFamily::Classification,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown loss kind '{s}'")))
    }
}

/// A loss kind together with its hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub alpha: f64,
    pub margin: f64,
    pub lambda: f64,
    pub center_penalty: CenterPenalty,
    /// Logit head used inside the center loss.
    pub center_head: HeadKind,
}

impl LossConfig {
    /// Best-performing hyper-parameters reported for each kind. Kinds without
    /// a reported value keep neutral defaults (α = 10, no margin).
    pub fn reference(kind: LossKind) -> Self {
        let mut cfg = LossConfig {
            kind,
            alpha: 10.0,
            margin: 0.0,
            lambda: 1.0,
            center_penalty: CenterPenalty::SquaredDistance,
            center_head: HeadKind::Linear,
        };
        match kind {
            LossKind::Aam => cfg.margin = 0.05,
            LossKind::Contrastive => cfg.margin = 0.2,
            LossKind::TripletHinge => cfg.margin = 0.2,
            _ => {}
        }
        cfg
    }

    pub fn hyper(&self) -> LossHyper {
        LossHyper {
            alpha: self.alpha,
            margin: self.margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        LossHyper::new(self.alpha, self.margin)?;
        match self.kind {
            LossKind::Aam => self.hyper().check_aam_margin()?,
            LossKind::Contrastive if self.margin <= 0.0 => {
                return Err(Error::domain("contrastive margin must be > 0"));
            }
            LossKind::Center if !(self.lambda >= 0.0) => {
                return Err(Error::domain(format!("lambda must be >= 0, got {}", self.lambda)));
            }
            LossKind::Center if self.center_head == HeadKind::Aam => self.hyper().check_aam_margin()?,
            _ => {}
        }
        Ok(())
    }

    fn head(&self) -> Option<HeadKind> {
        match self.kind {
            LossKind::Ce => Some(HeadKind::Linear),
            LossKind::CeNobias => Some(HeadKind::NoBias),
            LossKind::Coco => Some(HeadKind::Coco),
            LossKind::Aam => Some(HeadKind::Aam),
            LossKind::Center => Some(self.center_head),
            _ => None,
        }
    }

    /// Fresh trainable head parameters: centers and gamma uniform in
    /// `±1/√dim`, bias zero.
    pub fn init_params<R: Rng + ?Sized>(&self, n_classes: usize, dim: usize, rng: &mut R) -> LossParams {
        let scale = 1.0 / (dim as f64).sqrt();
        let mut uniform = |rows: usize| Array2::from_shape_fn((rows, dim), |_| rng.random_range(-scale..scale));
        let Some(head) = self.head() else {
            return LossParams::default();
        };
        let classifier = ClassifierParams {
            centers: uniform(n_classes),
            bias: (head == HeadKind::Linear).then(|| Array1::zeros(n_classes)),
        };
        let center = (self.kind == LossKind::Center).then(|| CenterLossParams {
            gamma: uniform(n_classes),
            lambda: self.lambda,
            penalty: self.center_penalty,
        });
        LossParams {
            classifier: Some(classifier),
            center,
        }
    }

    /// Evaluates the loss. `tuples` is only read by contrast-based kinds.
    pub fn evaluate(&self, batch: &LabeledBatch, tuples: &TupleIndex, params: &LossParams) -> Result<LossOutput> {
        let hyper = self.hyper();
        let classifier = || {
            params
                .classifier
                .as_ref()
                .ok_or_else(|| Error::domain(format!("{} loss requires classifier parameters", self.kind)))
        };
        match self.kind {
            LossKind::Center => {
                let cparams = params
                    .center
                    .as_ref()
                    .ok_or_else(|| Error::domain("center loss requires gamma parameters"))?;
                center_loss(batch, classifier()?, cparams, self.center_head, &hyper)
            }
            LossKind::Contrastive => contrastive_loss(batch, tuples, &hyper),
            LossKind::TripletHinge => triplet_loss_hinge(batch, tuples, &hyper),
            LossKind::TripletSigmoid => triplet_loss_sigmoid(batch, tuples, &hyper),
            _ => {
                let head = self.head().expect("classification kind has a head");
                let logits = head_logits(head, batch, classifier()?, &hyper)?;
                cross_entropy(&logits, batch.labels())
            }
        }
    }

    /// Distance of the nearest hinge argument from its kink at this point.
    pub fn kink_distance(&self, batch: &LabeledBatch, tuples: &TupleIndex) -> Result<f64> {
        match self.kind {
            LossKind::Contrastive => contrastive_kink_distance(batch, tuples, &self.hyper()),
            LossKind::TripletHinge => triplet_kink_distance(batch, tuples, &self.hyper()),
            _ => Ok(f64::INFINITY),
        }
    }
}

/// Trainable parameters owned by a loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossParams {
    pub classifier: Option<ClassifierParams>,
    pub center: Option<CenterLossParams>,
}

impl LossParams {
    /// Plain SGD step on every head parameter present in `grads`.
    pub fn sgd_step(&mut self, grads: &LossOutput, lr: f64) {
        if let Some(c) = &mut self.classifier {
            if let Some(g) = &grads.grad_centers {
                c.centers.scaled_add(-lr, g);
            }
            if let (Some(b), Some(g)) = (&mut c.bias, &grads.grad_bias) {
                b.scaled_add(-lr, g);
            }
        }
        if let (Some(c), Some(g)) = (&mut self.center, &grads.grad_gamma) {
            c.gamma.scaled_add(-lr, g);
        }
    }

    pub fn is_finite(&self) -> bool {
        let finite = |a: &Array2<f64>| a.iter().all(|v| v.is_finite());
        self.classifier
            .as_ref()
            .is_none_or(|c| finite(&c.centers) && c.bias.as_ref().is_none_or(|b| b.iter().all(|v| v.is_finite())))
            && self.center.as_ref().is_none_or(|c| finite(&c.gamma))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::SpeakerId;
    use crate::sampling::{form_pairs, form_triplets};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_batch(rng: &mut ChaCha8Rng) -> LabeledBatch {
        let labels: Vec<SpeakerId> = [0, 0, 1, 1, 2, 2].into_iter().map(SpeakerId).collect();
        let rows = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0));
        LabeledBatch::new(rows, labels).unwrap()
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in LossKind::ALL {
            assert_eq!(kind.name().parse::<LossKind>().unwrap(), kind);
        }
        assert!("arcface".parse::<LossKind>().is_err());
    }

    #[test]
    fn reference_configs_validate() {
        for kind in LossKind::ALL {
            LossConfig::reference(kind).validate().unwrap();
        }
        let aam = LossConfig::reference(LossKind::Aam);
        assert_eq!((aam.alpha, aam.margin), (10.0, 0.05));
        assert_eq!(LossConfig::reference(LossKind::Contrastive).margin, 0.2);
        assert_eq!(LossConfig::reference(LossKind::Center).lambda, 1.0);
        assert_eq!(LossConfig::reference(LossKind::Coco).alpha, 10.0);
        assert_eq!(LossConfig::reference(LossKind::TripletSigmoid).alpha, 10.0);
    }

    #[test]
    fn evaluate_every_kind() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = toy_batch(&mut rng);
        let mut tuples = form_pairs(&batch).unwrap();
        tuples.triplets = form_triplets(&batch).unwrap().triplets;
        for kind in LossKind::ALL {
            let cfg = LossConfig::reference(kind);
            let params = cfg.init_params(3, 4, &mut rng);
            let out = cfg.evaluate(&batch, &tuples, &params).unwrap();
            assert!(out.value.is_finite() && out.value >= 0.0, "{kind}");
            assert_eq!(out.grad_embeddings.dim(), (6, 4), "{kind}");
            let expected = match kind.family() {
                LossFamily::Classification => Reduction::Mean,
                _ => Reduction::Sum,
            };
            assert_eq!(out.reduction, expected);
            if let Some(g) = &out.grad_centers {
                assert_eq!(g.dim(), (3, 4));
            }
        }
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = toy_batch(&mut rng);
        let cfg = LossConfig::reference(LossKind::Center);
        let mut params = cfg.init_params(3, 4, &mut rng);
        let before = params.clone();
        let out = cfg.evaluate(&batch, &TupleIndex::default(), &params).unwrap();
        params.sgd_step(&out, 0.0);
        assert_eq!(params, before);
        params.sgd_step(&out, 0.1);
        let after = cfg.evaluate(&batch, &TupleIndex::default(), &params).unwrap();
        assert!(after.value < out.value);
    }
}
