//! Loss terms and the three composite objectives.
//!
//! Graph-level functions return per-sample or batch-mean [`Var`]s so they can be
//! differentiated; the scalar entry points (`pixelwise_cross_entropy`,
//! `attribute_classification_loss`) work on plain slices and are what external
//! callers and tests use directly.

use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Var};
use crate::error::{Error, Result};
use crate::networks::{BoundParams, DiscriminatorParams, GeneratorParams, SegmentorParams};
use crate::tensor::{Float, Tensor};
use crate::types::{AttributeLabel, SegmentationMap};

/// Probability floor applied when probabilities are supplied directly.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_seg: f64,
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cls: 5.0, lambda_seg: 1.0, lambda_gp: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cls", self.lambda_cls), ("lambda_seg", self.lambda_seg), ("lambda_gp", self.lambda_gp)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Which auxiliary terms take part in the totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TermMask {
    pub disable_classifier: bool,
    pub disable_segmentor: bool,
}

/// Raw loss parts. `adv_d` is the critic objective including the weighted gradient
/// penalty; `adv_g` is the generator's adversarial part. Segmentation parts are
/// `None` when the segmentation term is excluded or was not evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub adv_d: f64,
    pub adv_g: f64,
    pub gp: f64,
    pub cls_real: f64,
    pub cls_fake: f64,
    pub seg_real: Option<f64>,
    pub seg_fake: Option<f64>,
}

/// Loss parts together with the totals recomposed from them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(flatten)]
    pub parts: LossParts,
    pub total_s: f64,
    pub total_d: f64,
    pub total_g: f64,
    pub cls_included: bool,
    pub seg_included: bool,
}

impl LossReport {
    pub fn new(parts: LossParts, w: &LossWeights, mask: TermMask) -> Self {
        let (total_s, total_d, total_g) = compose_objectives(&parts, w, mask);
        Self {
            parts,
            total_s,
            total_d,
            total_g,
            cls_included: !mask.disable_classifier,
            seg_included: !mask.disable_segmentor,
        }
    }

    pub fn is_finite(&self) -> bool {
        let p = &self.parts;
        [p.adv_d, p.adv_g, p.gp, p.cls_real, p.cls_fake, self.total_s, self.total_d, self.total_g]
            .iter()
            .chain(p.seg_real.iter())
            .chain(p.seg_fake.iter())
            .all(|v| v.is_finite())
    }

    pub fn describe(&self) -> String {
        let p = &self.parts;
        format!(
            "adv_d={} adv_g={} gp={} cls_real={} cls_fake={} seg_real={:?} seg_fake={:?}",
            p.adv_d, p.adv_g, p.gp, p.cls_real, p.cls_fake, p.seg_real, p.seg_fake
        )
    }
}

/// `(total_S, total_D, total_G)` from raw parts.
///
/// `total_S = seg_real`, `total_D = adv_d + lambda_cls * cls_real`,
/// `total_G = adv_g + lambda_cls * cls_fake + lambda_seg * seg_fake`, with masked
/// terms left out.
pub fn compose_objectives(parts: &LossParts, w: &LossWeights, mask: TermMask) -> (f64, f64, f64) {
    let cls = if mask.disable_classifier { 0.0 } else { w.lambda_cls };
    let seg_fake = if mask.disable_segmentor { 0.0 } else { w.lambda_seg * parts.seg_fake.unwrap_or(0.0) };
    let total_s = parts.seg_real.unwrap_or(0.0);
    let total_d = parts.adv_d + cls * parts.cls_real;
    let total_g = parts.adv_g + cls * parts.cls_fake + seg_fake;
    (total_s, total_d, total_g)
}

// ---- scalar entry points -------------------------------------------------

/// Pixelwise cross-entropy `-sum a log b` of a one-hot map against probabilities
/// `b` given in `(height, width, class)` order.
///
/// Returns the loss and whether any true-class probability had to be clamped up to
/// [`PROB_FLOOR`].
pub fn pixelwise_cross_entropy(a: &SegmentationMap, b: &[f64]) -> Result<(f64, bool)> {
    let k = a.classes();
    if b.len() != a.indices().len() * k {
        return Err(Error::Shape(format!(
            "probabilities need {} values, got {}",
            a.indices().len() * k,
            b.len()
        )));
    }
    if b.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidValue("probabilities contain NaN".into()));
    }
    let mut total = 0.0;
    let mut clamped = false;
    for (p, &class) in a.indices().iter().enumerate() {
        let row = &b[p * k..(p + 1) * k];
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidValue(format!(
                "pixel {p} is not a probability vector (sum {sum})"
            )));
        }
        let q = row[class as usize];
        if q < PROB_FLOOR {
            clamped = true;
        }
        total -= q.max(PROB_FLOOR).ln();
    }
    Ok((total, clamped))
}

/// Multi-attribute binary cross-entropy with logits, summed over attributes.
pub fn attribute_classification_loss(c: &AttributeLabel, logits: &[f64]) -> Result<f64> {
    if logits.len() != c.len() {
        return Err(Error::Shape(format!("{} logits for {} attributes", logits.len(), c.len())));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidValue("logits contain NaN".into()));
    }
    Ok(c.bits()
        .iter()
        .zip(logits)
        .map(|(&bit, &l)| {
            // softplus(l) - c * l
            l.max(0.0) + (-l.abs()).exp().ln_1p() - bit as f64 * l
        })
        .sum())
}

// ---- graph-level terms -----------------------------------------------------

/// Per-sample pixelwise cross-entropy `[N]` of one-hot `target` against the softmax
/// of `logits`, both `[N, n_s, H, W]`.
pub fn seg_cross_entropy<T: Float>(target: &Var<T>, logits: &Var<T>) -> Var<T> {
    let n = logits.shape()[0];
    target.mul(&logits.log_softmax_channels()).sum_to(&[n, 1, 1, 1]).reshape(&[n]).neg()
}

/// Per-sample attribute loss `[N]` for labels and logits `[N, n_c]`.
pub fn attribute_bce<T: Float>(labels: &Var<T>, logits: &Var<T>) -> Var<T> {
    let n = logits.shape()[0];
    logits.softplus().sub(&labels.mul(logits)).sum_to(&[n, 1]).reshape(&[n])
}

/// Mean over the batch of `(||grad_x D(x_hat)||_2 - 1)^2` with
/// `x_hat = eps * real + (1 - eps) * fake`.
///
/// `critic` maps an `[N, ...]` batch to per-sample scalars `[N]`. The returned value
/// stays differentiable with respect to whatever parameters `critic` closes over.
pub fn gradient_penalty<T: Float>(
    critic: impl Fn(&Var<T>) -> Result<Var<T>>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    eps: &[T],
) -> Result<Var<T>> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!("real {:?} vs fake {:?}", real.shape(), fake.shape())));
    }
    let n = real.shape()[0];
    if eps.len() != n {
        return Err(Error::Shape(format!("{} mixing weights for a batch of {n}", eps.len())));
    }
    let per = real.numel() / n;
    let mut mixed = Vec::with_capacity(real.numel());
    for (b, &e) in eps.iter().enumerate() {
        let r = &real.data()[b * per..(b + 1) * per];
        let f = &fake.data()[b * per..(b + 1) * per];
        mixed.extend(r.iter().zip(f).map(|(&x, &y)| e * x + (T::one() - e) * y));
    }
    let x_hat = Var::param(Tensor::new(real.shape().to_vec(), mixed));
    let scores = critic(&x_hat)?;
    if scores.shape() != [n] {
        return Err(Error::Shape(format!("critic returned {:?}, expected [{n}]", scores.shape())));
    }
    let g = grad(&scores.sum(), &[&x_hat], true).remove(0);
    let mut reduced = vec![1; real.shape().len()];
    reduced[0] = n;
    let norm = g.square().sum_to(&reduced).add_scalar(T::lit(1e-12)).powf(T::lit(0.5));
    Ok(norm.add_scalar(-T::one()).square().mean())
}

/// `mean D(fake) - mean D(real) + lambda_gp * gp`; the discriminator descends this.
pub fn critic_objective<T: Float>(d_real: &Var<T>, d_fake: &Var<T>, gp: &Var<T>, lambda_gp: f64) -> Result<Var<T>> {
    if d_real.shape() != d_fake.shape() {
        return Err(Error::Shape(format!(
            "critic batches differ: {:?} vs {:?}",
            d_real.shape(),
            d_fake.shape()
        )));
    }
    Ok(d_fake.mean().sub(&d_real.mean()).add(&gp.scale(T::lit(lambda_gp))))
}

/// `-mean D(fake)`; the generator descends this.
pub fn generator_adversarial<T: Float>(d_fake: &Var<T>) -> Var<T> {
    d_fake.mean().neg()
}

// ---- composite objectives ------------------------------------------------

/// Tensors for one training step. `segmentations` are the ground-truth maps of the
/// real images; `targets` are the shuffled maps fed to the generator.
#[derive(Clone, Debug)]
pub struct StepBatch<T> {
    pub images: Tensor<T>,
    pub labels: Tensor<T>,
    pub segmentations: Tensor<T>,
    pub targets: Tensor<T>,
    pub latents: Tensor<T>,
    pub eps: Vec<T>,
}

impl<T: Float> StepBatch<T> {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Float>(&self) -> StepBatch<U> {
        StepBatch {
            images: self.images.cast(),
            labels: self.labels.cast(),
            segmentations: self.segmentations.cast(),
            targets: self.targets.cast(),
            latents: self.latents.cast(),
            eps: self.eps.iter().map(|&e| U::lit(e.as_f64())).collect(),
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        for (what, t) in [
            ("labels", &self.labels),
            ("segmentations", &self.segmentations),
            ("targets", &self.targets),
            ("latents", &self.latents),
        ] {
            if t.shape()[0] != n {
                return Err(Error::Shape(format!("{what} batch {} differs from image batch {n}", t.shape()[0])));
            }
        }
        if self.eps.len() != n {
            return Err(Error::Shape("mixing weights do not match the batch".into()));
        }
        Ok(())
    }
}

fn fakes<T: Float>(g: &GeneratorParams<T>, gp: &BoundParams<T>, batch: &StepBatch<T>) -> Result<Var<T>> {
    g.forward_graph(
        gp,
        &Var::constant(batch.latents.clone()),
        &Var::constant(batch.labels.clone()),
        &Var::constant(batch.targets.clone()),
    )
}

/// Graph of the discriminator objective for parameters `dp` (generator frozen).
pub fn discriminator_objective<T: Float>(
    g: &GeneratorParams<T>,
    d: &DiscriminatorParams<T>,
    dp: &BoundParams<T>,
    batch: &StepBatch<T>,
    w: &LossWeights,
    mask: TermMask,
) -> Result<(Var<T>, LossParts)> {
    batch.check()?;
    let fake = {
        let _guard = crate::autograd::NoGradGuard::new();
        fakes(g, &g.params.bind(false), batch)?.value().clone()
    };
    let real = d.forward_graph(dp, &Var::constant(batch.images.clone()))?;
    let fake_out = d.forward_graph(dp, &Var::constant(fake.clone()))?;
    let gp = gradient_penalty(|x| Ok(d.forward_graph(dp, x)?.critic), &batch.images, &fake, &batch.eps)?;
    let adv = critic_objective(&real.critic, &fake_out.critic, &gp, w.lambda_gp)?;
    let cls = attribute_bce(&Var::constant(batch.labels.clone()), &real.class_logits).mean();
    let total = if mask.disable_classifier { adv.clone() } else { adv.add(&cls.scale(T::lit(w.lambda_cls))) };
    let parts = LossParts {
        adv_d: adv.item().as_f64(),
        gp: gp.item().as_f64(),
        cls_real: cls.item().as_f64(),
        ..LossParts::default()
    };
    Ok((total, parts))
}

/// Graph of the segmentor objective (real images against their ground truth).
pub fn segmentor_objective<T: Float>(
    s: &SegmentorParams<T>,
    sp: &BoundParams<T>,
    batch: &StepBatch<T>,
) -> Result<(Var<T>, f64)> {
    let logits = s.forward_graph(sp, &Var::constant(batch.images.clone()))?;
    let loss = seg_cross_entropy(&Var::constant(batch.segmentations.clone()), &logits).mean();
    let v = loss.item().as_f64();
    Ok((loss, v))
}

/// Graph of the generator objective for parameters `gp`; gradients flow through
/// the (fixed) discriminator and segmentor into the generator.
pub fn generator_objective<T: Float>(
    g: &GeneratorParams<T>,
    gp: &BoundParams<T>,
    d: &DiscriminatorParams<T>,
    s: &SegmentorParams<T>,
    batch: &StepBatch<T>,
    w: &LossWeights,
    mask: TermMask,
) -> Result<(Var<T>, LossParts)> {
    batch.check()?;
    let fake = fakes(g, gp, batch)?;
    let out = d.forward_graph(&d.params.bind(false), &fake)?;
    let adv = generator_adversarial(&out.critic);
    let cls = attribute_bce(&Var::constant(batch.labels.clone()), &out.class_logits).mean();
    let mut total = adv.clone();
    if !mask.disable_classifier {
        total = total.add(&cls.scale(T::lit(w.lambda_cls)));
    }
    let mut seg_fake = None;
    if !mask.disable_segmentor {
        let logits = s.forward_graph(&s.params.bind(false), &fake)?;
        let seg = seg_cross_entropy(&Var::constant(batch.targets.clone()), &logits).mean();
        seg_fake = Some(seg.item().as_f64());
        total = total.add(&seg.scale(T::lit(w.lambda_seg)));
    }
    let parts = LossParts {
        adv_g: adv.item().as_f64(),
        cls_fake: cls.item().as_f64(),
        seg_fake,
        ..LossParts::default()
    };
    Ok((total, parts))
}
