//! The contrastive finetuning loss family and its exact gradients.
//!
//! For an anchor i with positive p, task negatives N(i) and distractor batch
//! I_dt, the per-pair likelihood is
//!
//! ```text
//! l_ip = exp(s_ip) / (exp(s_ip) + a * sum_n exp(s_in) + (2 - a) * sum_d exp(s_id))
//! ```
//!
//! with s_xy = (z_x . z_y) / temperature. Unweighted, a = 1. With weighting
//! enabled, a = 2|I_dt| / (|N(i)| + |I_dt|), which equalizes the total mass
//! of task negatives and distractors in the denominator. The loss is the
//! mean over anchor terms of -log l_ip. Denominators are evaluated with
//! max-subtraction so small temperatures stay finite.
//!
//! Gradients with respect to every representation are exact and accumulated
//! in a fixed order (anchor-major, index-ascending), so results are
//! bit-reproducible.

use crate::error::{ConftError, Result};
use crate::model::Representation;
use crate::pairing::PairPlan;

/// Hyperparameters of the loss family.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Softmax temperature (gamma), > 0.
    pub temperature: f64,
    /// Batch-size-proportional weighting of task negatives vs distractors.
    pub weighting_enabled: bool,
    /// Multitask cross-entropy weight (lambda), >= 0.
    pub lambda: f64,
    /// Cosine-classifier multiplying factor (beta), > 0.
    pub beta: f64,
    /// Normalize the outer sum by the support-set size instead of by the
    /// number of anchor terms. Only differs for odd shot counts, where
    /// omission shrinks the anchor set below |I_supp|.
    pub normalize_by_support_size: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            weighting_enabled: true,
            lambda: 1.0,
            beta: 10.0,
            normalize_by_support_size: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(ConftError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(ConftError::InvalidConfig(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.beta > 0.0) {
            return Err(ConftError::InvalidConfig(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Value and gradients of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss: f64,
    /// Per-anchor likelihoods l_ip, each in (0, 1].
    pub per_anchor: Vec<f64>,
    /// The negative-weighting factor applied (1 when weighting is off or
    /// degenerate).
    pub alpha: f64,
    /// Gradient with respect to each support-side representation
    /// (indexed like the embedding slots of the pair plan).
    pub grad_support: Vec<Vec<f64>>,
    /// Gradient with respect to each distractor representation.
    pub grad_distractors: Vec<Vec<f64>>,
}

/// Batch-size-proportional weighting factor: a = 2|I_dt| / (|N(i)| + |I_dt|).
///
/// `a` multiplies the task-negative sum and `2 - a` the distractor sum, so
/// the two groups contribute equal total mass regardless of their sizes.
pub fn compute_alpha(n_task_negatives: usize, n_distractors: usize) -> Result<f64> {
    if n_task_negatives == 0 && n_distractors == 0 {
        return Err(ConftError::UndefinedWeighting);
    }
    Ok(2.0 * n_distractors as f64 / (n_task_negatives + n_distractors) as f64)
}

/// Effective weight used inside the loss. When either negative group is
/// empty there is nothing to balance and the literal formula would zero out
/// the remaining group, so the loss falls back to the unweighted form.
fn effective_alpha(weighting: bool, n_negs: usize, n_dist: usize) -> Result<f64> {
    if !weighting || n_negs == 0 || n_dist == 0 {
        Ok(1.0)
    } else {
        compute_alpha(n_negs, n_dist)
    }
}

/// Evaluate the contrastive finetuning loss and its gradients.
///
/// `z_support` holds one representation per embedding slot of `plan`
/// (support samples first, then any virtual augmented copies); all
/// representations are expected unit-norm. Distractors participate only in
/// the denominators, never as anchors or positives.
pub fn conft_loss(
    z_support: &[Representation],
    plan: &PairPlan,
    z_distractors: &[Representation],
    config: &LossConfig,
) -> Result<LossReport> {
    config.validate()?;
    if plan.anchors.is_empty() {
        return Err(ConftError::MalformedPlan("empty anchor set".into()));
    }
    if z_support.len() != plan.n_embeddings {
        return Err(ConftError::ShapeMismatch {
            what: "support representations",
            expected: plan.n_embeddings,
            got: z_support.len(),
        });
    }
    let dim = z_support[0].dim();
    let gamma = config.temperature;
    let n_dist = z_distractors.len();

    let mut grad_support = vec![vec![0.0; dim]; z_support.len()];
    let mut grad_distractors = vec![vec![0.0; dim]; n_dist];
    let mut per_anchor = Vec::with_capacity(plan.anchors.len());
    let mut total = 0.0;
    let mut alpha_used = 1.0;

    let mut s_negs: Vec<f64> = Vec::new();
    let mut s_dist: Vec<f64> = Vec::new();
    for (k, anchor) in plan.anchors.iter().enumerate() {
        let zi = &z_support[anchor.index];
        let zp = &z_support[anchor.positive];
        let s_pos = zi.dot(zp) / gamma;
        s_negs.clear();
        s_negs.extend(anchor.negatives.iter().map(|&n| zi.dot(&z_support[n]) / gamma));
        s_dist.clear();
        s_dist.extend(z_distractors.iter().map(|zd| zi.dot(zd) / gamma));

        let alpha = effective_alpha(config.weighting_enabled, s_negs.len(), n_dist)?;
        if k == 0 {
            alpha_used = alpha;
        }

        let m = s_negs
            .iter()
            .chain(s_dist.iter())
            .fold(s_pos, |acc, &s| acc.max(s));
        let e_pos = (s_pos - m).exp();
        let mut den = e_pos;
        for &s in &s_negs {
            den += alpha * (s - m).exp();
        }
        for &s in &s_dist {
            den += (2.0 - alpha) * (s - m).exp();
        }
        let l_ip = e_pos / den;
        per_anchor.push(l_ip);
        total += -(s_pos - m) + den.ln();

        // d(-log l)/d(s_pos) = l - 1; d/d(s_n) = a e_n / den; d/d(s_d) = (2-a) e_d / den
        let c_pos = l_ip - 1.0;
        for (g, v) in grad_support[anchor.index].iter_mut().zip(zp.values()) {
            *g += c_pos * v;
        }
        for (g, v) in grad_support[anchor.positive].iter_mut().zip(zi.values()) {
            *g += c_pos * v;
        }
        for (&n, &s) in anchor.negatives.iter().zip(&s_negs) {
            let w = alpha * (s - m).exp() / den;
            for (g, v) in grad_support[anchor.index].iter_mut().zip(z_support[n].values()) {
                *g += w * v;
            }
            for (g, v) in grad_support[n].iter_mut().zip(zi.values()) {
                *g += w * v;
            }
        }
        for (d, &s) in s_dist.iter().enumerate() {
            let w = (2.0 - alpha) * (s - m).exp() / den;
            for (g, v) in grad_support[anchor.index].iter_mut().zip(z_distractors[d].values()) {
                *g += w * v;
            }
            for (g, v) in grad_distractors[d].iter_mut().zip(zi.values()) {
                *g += w * v;
            }
        }
    }

    let denom_anchors = if config.normalize_by_support_size {
        plan.n_support as f64
    } else {
        plan.anchors.len() as f64
    };
    let scale = 1.0 / (denom_anchors * gamma);
    for g in grad_support.iter_mut().chain(grad_distractors.iter_mut()) {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }

    Ok(LossReport {
        loss: total / denom_anchors,
        per_anchor,
        alpha: alpha_used,
        grad_support,
        grad_distractors,
    })
}

/// Cosine classifier over base-domain categories: logits are
/// `beta * (z . w_c / ||w_c||)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineClassifierHead {
    /// Class ids, ascending; `weights[k]` belongs to `class_ids[k]`.
    pub class_ids: Vec<usize>,
    /// One (unnormalized) weight vector per class.
    pub weights: Vec<Vec<f64>>,
    pub beta: f64,
}

impl CosineClassifierHead {
    /// Initialize weights as the normalized class means of a labelled set of
    /// representations.
    pub fn from_class_means(
        embeddings: &[Representation],
        labels: &[usize],
        beta: f64,
    ) -> Result<Self> {
        if embeddings.is_empty() || embeddings.len() != labels.len() {
            return Err(ConftError::InvalidConfig(
                "class-mean head needs matching, non-empty embeddings and labels".into(),
            ));
        }
        let dim = embeddings[0].dim();
        let mut class_ids: Vec<usize> = labels.to_vec();
        class_ids.sort_unstable();
        class_ids.dedup();
        let mut weights = vec![vec![0.0; dim]; class_ids.len()];
        let mut counts = vec![0usize; class_ids.len()];
        for (z, &label) in embeddings.iter().zip(labels) {
            let k = class_ids.binary_search(&label).unwrap();
            counts[k] += 1;
            for (w, v) in weights[k].iter_mut().zip(z.values()) {
                *w += v;
            }
        }
        for (w, &c) in weights.iter_mut().zip(&counts) {
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(ConftError::InvalidConfig(format!(
                    "degenerate class mean (count {c})"
                )));
            }
            for v in w.iter_mut() {
                *v /= norm;
            }
        }
        Ok(CosineClassifierHead { class_ids, weights, beta })
    }

    fn class_index(&self, label: usize) -> Result<usize> {
        self.class_ids
            .binary_search(&label)
            .map_err(|_| ConftError::LabelDomain { label })
    }
}

/// Value and gradients of the auxiliary cross-entropy loss.
#[derive(Debug, Clone)]
pub struct MtceReport {
    pub loss: f64,
    /// Gradient with respect to each input representation.
    pub grad_inputs: Vec<Vec<f64>>,
    /// Gradient with respect to each head weight vector.
    pub grad_weights: Vec<Vec<f64>>,
}

/// Softmax cross-entropy of the cosine classifier, averaged over the batch.
/// Gradients flow to the inputs and, through the weight normalization, to
/// the head weights.
pub fn mtce_loss(
    z_batch: &[Representation],
    labels: &[usize],
    head: &CosineClassifierHead,
) -> Result<MtceReport> {
    if z_batch.is_empty() || z_batch.len() != labels.len() {
        return Err(ConftError::InvalidConfig(
            "mtce needs a non-empty batch with one label per sample".into(),
        ));
    }
    let dim = z_batch[0].dim();
    let n_classes = head.weights.len();
    let beta = head.beta;

    // normalized weight vectors and their raw norms
    let mut w_hat = Vec::with_capacity(n_classes);
    let mut w_norm = Vec::with_capacity(n_classes);
    for w in &head.weights {
        if w.len() != dim {
            return Err(ConftError::ShapeMismatch {
                what: "head weight vector",
                expected: dim,
                got: w.len(),
            });
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(ConftError::DegenerateRepresentation { norm });
        }
        w_hat.push(w.iter().map(|v| v / norm).collect::<Vec<f64>>());
        w_norm.push(norm);
    }

    let batch = z_batch.len() as f64;
    let mut loss = 0.0;
    let mut grad_inputs = vec![vec![0.0; dim]; z_batch.len()];
    let mut grad_weights = vec![vec![0.0; dim]; n_classes];
    let mut logits = vec![0.0; n_classes];
    let mut probs = vec![0.0; n_classes];
    for (b, (z, &label)) in z_batch.iter().zip(labels).enumerate() {
        let y = head.class_index(label)?;
        for (c, wh) in w_hat.iter().enumerate() {
            logits[c] = beta * crate::model::dot(z.values(), wh);
        }
        let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut den = 0.0;
        for (p, &l) in probs.iter_mut().zip(&logits) {
            *p = (l - m).exp();
            den += *p;
        }
        for p in probs.iter_mut() {
            *p /= den;
        }
        loss += -(logits[y] - m - den.ln());

        for c in 0..n_classes {
            let coef = (probs[c] - if c == y { 1.0 } else { 0.0 }) * beta / batch;
            // input gradient through the logit
            for (g, w) in grad_inputs[b].iter_mut().zip(&w_hat[c]) {
                *g += coef * w;
            }
            // weight gradient through the normalization Jacobian
            let zw = crate::model::dot(z.values(), &w_hat[c]);
            for ((g, zv), wv) in grad_weights[c].iter_mut().zip(z.values()).zip(&w_hat[c]) {
                *g += coef * (zv - wv * zw) / w_norm[c];
            }
        }
    }

    Ok(MtceReport {
        loss: loss / batch,
        grad_inputs,
        grad_weights,
    })
}

/// Combined multitask loss: contrastive term plus `lambda` times the
/// auxiliary cross-entropy over the labelled distractor batch.
#[derive(Debug, Clone)]
pub struct MtLossReport {
    pub total: f64,
    pub conft: LossReport,
    pub mtce: MtceReport,
    /// Combined gradient for the distractor representations (contrastive
    /// negatives plus lambda-weighted cross-entropy inputs).
    pub grad_distractors: Vec<Vec<f64>>,
    /// lambda-weighted gradient for the head weights.
    pub grad_head: Vec<Vec<f64>>,
}

pub fn mt_conft_loss(
    z_support: &[Representation],
    plan: &PairPlan,
    z_distractors: &[Representation],
    distractor_labels: &[usize],
    head: &CosineClassifierHead,
    config: &LossConfig,
) -> Result<MtLossReport> {
    if distractor_labels.len() != z_distractors.len() {
        return Err(ConftError::InvalidConfig(
            "multitask loss requested on an unlabelled distractor batch".into(),
        ));
    }
    let conft = conft_loss(z_support, plan, z_distractors, config)?;
    let mtce = mtce_loss(z_distractors, distractor_labels, head)?;
    let lambda = config.lambda;
    let mut grad_distractors = conft.grad_distractors.clone();
    for (g, gi) in grad_distractors.iter_mut().zip(&mtce.grad_inputs) {
        for (a, b) in g.iter_mut().zip(gi) {
            *a += lambda * b;
        }
    }
    let grad_head = mtce
        .grad_weights
        .iter()
        .map(|g| g.iter().map(|v| lambda * v).collect())
        .collect();
    Ok(MtLossReport {
        total: conft.loss + lambda * mtce.loss,
        conft,
        mtce,
        grad_distractors,
        grad_head,
    })
}

/// Ablation baseline: the standard symmetric supervised-contrastive
/// construction over the union of task samples and labelled distractors.
///
/// Every union member with at least one same-class partner is an anchor;
/// its positives are all same-class members and its negatives all
/// different-class members. Task and distractor classes are disjoint by
/// construction, so task samples are never positives of distractors.
pub fn standard_pairs_loss(
    z_task: &[Representation],
    task_labels: &[usize],
    z_distractors: &[Representation],
    distractor_labels: &[usize],
    config: &LossConfig,
) -> Result<LossReport> {
    config.validate()?;
    if z_task.len() != task_labels.len() || z_distractors.len() != distractor_labels.len() {
        return Err(ConftError::InvalidConfig(
            "standard pair construction needs labels for every sample".into(),
        ));
    }
    if z_task.is_empty() {
        return Err(ConftError::MalformedPlan("empty task set".into()));
    }
    let n_task = z_task.len();
    let n_union = n_task + z_distractors.len();
    let dim = z_task[0].dim();
    let gamma = config.temperature;

    let z_of = |u: usize| -> &Representation {
        if u < n_task { &z_task[u] } else { &z_distractors[u - n_task] }
    };
    // labels in disjoint namespaces: (side, class id)
    let label_of = |u: usize| -> (u8, usize) {
        if u < n_task { (0, task_labels[u]) } else { (1, distractor_labels[u - n_task]) }
    };

    let mut grads = vec![vec![0.0; dim]; n_union];
    let mut per_anchor = Vec::new();
    let mut total = 0.0;
    let mut n_anchor_terms = 0usize;

    for i in 0..n_union {
        let li = label_of(i);
        let positives: Vec<usize> = (0..n_union).filter(|&p| p != i && label_of(p) == li).collect();
        if positives.is_empty() {
            continue;
        }
        let negatives: Vec<usize> = (0..n_union).filter(|&n| label_of(n) != li).collect();
        let zi = z_of(i);
        let s_negs: Vec<f64> = negatives.iter().map(|&n| zi.dot(z_of(n)) / gamma).collect();
        let inner = 1.0 / positives.len() as f64;
        for &p in &positives {
            let s_pos = zi.dot(z_of(p)) / gamma;
            let m = s_negs.iter().fold(s_pos, |acc, &s| acc.max(s));
            let e_pos = (s_pos - m).exp();
            let den = e_pos + s_negs.iter().map(|&s| (s - m).exp()).sum::<f64>();
            let l_ip = e_pos / den;
            per_anchor.push(l_ip);
            total += inner * (-(s_pos - m) + den.ln());

            let c_pos = inner * (l_ip - 1.0);
            for (g, v) in grads[i].iter_mut().zip(z_of(p).values()) {
                *g += c_pos * v;
            }
            for (g, v) in grads[p].iter_mut().zip(zi.values()) {
                *g += c_pos * v;
            }
            for (&n, &s) in negatives.iter().zip(&s_negs) {
                let w = inner * (s - m).exp() / den;
                for (g, v) in grads[i].iter_mut().zip(z_of(n).values()) {
                    *g += w * v;
                }
                for (g, v) in grads[n].iter_mut().zip(zi.values()) {
                    *g += w * v;
                }
            }
        }
        n_anchor_terms += 1;
    }

    if n_anchor_terms == 0 {
        return Err(ConftError::MalformedPlan(
            "standard pair construction found no anchor with a positive".into(),
        ));
    }
    let scale = 1.0 / (n_anchor_terms as f64 * gamma);
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    let grad_distractors = grads.split_off(n_task);
    Ok(LossReport {
        loss: total / n_anchor_terms as f64,
        per_anchor,
        alpha: 1.0,
        grad_support: grads,
        grad_distractors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{normalize, ProjectionModel};
    use crate::pairing::{build_pair_plan, Anchor};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn unit(values: &[f64]) -> Representation {
        normalize(values).unwrap()
    }

    fn random_units(n: usize, dim: usize, seed: u64) -> Vec<Representation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                unit(&v)
            })
            .collect()
    }

    /// Term-by-term reference evaluation: every exponential materialized,
    /// no max subtraction.
    fn brute_force_loss(
        z_support: &[Representation],
        plan: &PairPlan,
        z_dist: &[Representation],
        cfg: &LossConfig,
    ) -> f64 {
        let mut total = 0.0;
        for anchor in &plan.anchors {
            let zi = &z_support[anchor.index];
            let exp_pos = (zi.dot(&z_support[anchor.positive]) / cfg.temperature).exp();
            let alpha = if cfg.weighting_enabled
                && !anchor.negatives.is_empty()
                && !z_dist.is_empty()
            {
                2.0 * z_dist.len() as f64 / (anchor.negatives.len() + z_dist.len()) as f64
            } else {
                1.0
            };
            let mut den = exp_pos;
            for &n in &anchor.negatives {
                den += alpha * (zi.dot(&z_support[n]) / cfg.temperature).exp();
            }
            for zd in z_dist {
                den += (2.0 - alpha) * (zi.dot(zd) / cfg.temperature).exp();
            }
            total += -(exp_pos / den).ln();
        }
        total / plan.anchors.len() as f64
    }

    #[test]
    fn uniform_similarity_collapses_to_count_ratio() {
        // identical representations everywhere: every dot product is 1, so
        // with |N(i)| = |I_dt| = n each l_ip = 1 / (1 + 2n).
        let z = unit(&[0.3, -0.4, 0.5]);
        let labels = vec![0, 0, 1, 1];
        let plan = build_pair_plan(&labels, 2, 9).unwrap();
        let z_support = vec![z.clone(); 4];
        let z_dist = vec![z.clone(); 2];
        let cfg = LossConfig { weighting_enabled: true, ..LossConfig::default() };
        let report = conft_loss(&z_support, &plan, &z_dist, &cfg).unwrap();
        for &l in &report.per_anchor {
            assert!((l - 1.0 / 5.0).abs() < 1e-12);
        }
        assert!((report.loss - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_anchor_scalar_evaluation() {
        // one anchor at similarity 1 with its positive and -1 with its only
        // negative, gamma = 0.1: loss = ln(1 + e^{-20}).
        let plan = PairPlan {
            anchors: vec![Anchor { index: 0, positive: 1, negatives: vec![2] }],
            omitted: vec![],
            distractor_indices: vec![],
            n_support: 3,
            n_embeddings: 3,
            virtual_copies: vec![],
        };
        let z = vec![unit(&[1.0, 0.0]), unit(&[1.0, 0.0]), unit(&[-1.0, 0.0])];
        let cfg = LossConfig { temperature: 0.1, ..LossConfig::default() };
        let report = conft_loss(&z, &plan, &[], &cfg).unwrap();
        let expected = (1.0 + (-20.0f64).exp()).ln();
        assert!(
            (report.loss - expected).abs() < 1e-22,
            "loss {} vs {}",
            report.loss,
            expected
        );
    }

    #[test]
    fn matches_brute_force_on_random_instance() {
        let labels = vec![0, 0, 1, 1, 2, 2];
        let plan = build_pair_plan(&labels, 2, 21).unwrap();
        let z_support = random_units(6, 5, 100);
        let z_dist = random_units(4, 5, 200);
        for weighting in [false, true] {
            let cfg = LossConfig {
                temperature: 0.2,
                weighting_enabled: weighting,
                ..LossConfig::default()
            };
            let report = conft_loss(&z_support, &plan, &z_dist, &cfg).unwrap();
            let expected = brute_force_loss(&z_support, &plan, &z_dist, &cfg);
            assert!(
                (report.loss - expected).abs() < 1e-12,
                "weighting {weighting}: {} vs {expected}",
                report.loss
            );
        }
    }

    #[test]
    fn alpha_values() {
        assert!((compute_alpha(20, 128).unwrap() - 256.0 / 148.0).abs() == 0.0);
        assert_eq!(compute_alpha(5, 5).unwrap(), 1.0);
        assert_eq!(compute_alpha(7, 0).unwrap(), 0.0);
        assert_eq!(compute_alpha(0, 9).unwrap(), 2.0);
        assert!(matches!(compute_alpha(0, 0), Err(ConftError::UndefinedWeighting)));
    }

    #[test]
    fn equal_group_sizes_reduce_to_unweighted() {
        // |N(i)| = |I_dt| gives alpha = 1, so Eq. 2 equals Eq. 1 exactly.
        let labels = vec![0, 0, 1, 1, 2, 2];
        let plan = build_pair_plan(&labels, 2, 33).unwrap();
        let z_support = random_units(6, 4, 300);
        let z_dist = random_units(4, 4, 400); // |N(i)| = 4 task negatives
        let weighted = conft_loss(
            &z_support,
            &plan,
            &z_dist,
            &LossConfig { weighting_enabled: true, ..LossConfig::default() },
        )
        .unwrap();
        let unweighted = conft_loss(
            &z_support,
            &plan,
            &z_dist,
            &LossConfig { weighting_enabled: false, ..LossConfig::default() },
        )
        .unwrap();
        assert!((weighted.loss - unweighted.loss).abs() < 1e-12);
        assert_eq!(weighted.alpha, 1.0);
    }

    #[test]
    fn empty_distractor_set_reduces_to_plain_loss() {
        // nothing to balance: the weighted loss falls back to Eq. 1.
        let labels = vec![0, 0, 1, 1];
        let plan = build_pair_plan(&labels, 2, 5).unwrap();
        let z_support = random_units(4, 4, 77);
        let weighted = conft_loss(
            &z_support,
            &plan,
            &[],
            &LossConfig { weighting_enabled: true, ..LossConfig::default() },
        )
        .unwrap();
        let unweighted = conft_loss(
            &z_support,
            &plan,
            &[],
            &LossConfig { weighting_enabled: false, ..LossConfig::default() },
        )
        .unwrap();
        assert_eq!(weighted.loss, unweighted.loss);
        assert_eq!(weighted.alpha, 1.0);
    }

    #[test]
    fn distractor_order_does_not_change_the_loss() {
        let labels = vec![0, 0, 1, 1];
        let plan = build_pair_plan(&labels, 2, 8).unwrap();
        let z_support = random_units(4, 6, 500);
        let z_dist = random_units(5, 6, 600);
        let mut reversed = z_dist.clone();
        reversed.reverse();
        let cfg = LossConfig::default();
        let a = conft_loss(&z_support, &plan, &z_dist, &cfg).unwrap();
        let b = conft_loss(&z_support, &plan, &reversed, &cfg).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn negative_order_does_not_change_the_loss() {
        let z_support = random_units(4, 6, 501);
        let mk_plan = |negs: Vec<usize>| PairPlan {
            anchors: vec![Anchor { index: 0, positive: 1, negatives: negs }],
            omitted: vec![],
            distractor_indices: vec![],
            n_support: 4,
            n_embeddings: 4,
            virtual_copies: vec![],
        };
        let cfg = LossConfig::default();
        let a = conft_loss(&z_support, &mk_plan(vec![2, 3]), &[], &cfg).unwrap();
        let b = conft_loss(&z_support, &mk_plan(vec![3, 2]), &[], &cfg).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn small_temperature_stays_finite() {
        let labels = vec![0, 0, 1, 1];
        let plan = build_pair_plan(&labels, 2, 2).unwrap();
        let z_support = random_units(4, 8, 700);
        let z_dist = random_units(16, 8, 800);
        let cfg = LossConfig { temperature: 0.01, ..LossConfig::default() };
        let report = conft_loss(&z_support, &plan, &z_dist, &cfg).unwrap();
        assert!(report.loss.is_finite());
        assert!(report.per_anchor.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn raising_distractor_similarity_raises_the_loss() {
        // rotate a distractor toward the anchor: z_i . z_d increases, loss
        // must strictly increase; rotating the positive toward the anchor
        // must strictly decrease it.
        let plan = PairPlan {
            anchors: vec![Anchor { index: 0, positive: 1, negatives: vec![2] }],
            omitted: vec![],
            distractor_indices: vec![],
            n_support: 3,
            n_embeddings: 3,
            virtual_copies: vec![],
        };
        let at = |theta: f64| unit(&[theta.cos(), theta.sin()]);
        let cfg = LossConfig::default();
        let loss_with = |pos_angle: f64, dist_angle: f64| {
            let z = vec![at(0.0), at(pos_angle), at(2.0)];
            conft_loss(&z, &plan, &[at(dist_angle)], &cfg).unwrap().loss
        };
        // closer distractor (smaller angle to anchor) -> larger loss
        assert!(loss_with(0.5, 0.4) > loss_with(0.5, 0.9));
        // closer positive -> smaller loss
        assert!(loss_with(0.3, 1.0) < loss_with(0.7, 1.0));
    }

    #[test]
    fn empty_anchor_set_is_rejected() {
        let plan = PairPlan {
            anchors: vec![],
            omitted: vec![],
            distractor_indices: vec![],
            n_support: 2,
            n_embeddings: 2,
            virtual_copies: vec![],
        };
        let z = random_units(2, 3, 1);
        assert!(matches!(
            conft_loss(&z, &plan, &[], &LossConfig::default()),
            Err(ConftError::MalformedPlan(_))
        ));
    }

    #[test]
    fn mtce_aligned_and_orthogonal() {
        // z aligned with its own class weight, orthogonal to the other:
        // loss = -log(e^10 / (e^10 + e^0)) = ln(1 + e^{-10}).
        let head = CosineClassifierHead {
            class_ids: vec![0, 1],
            weights: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            beta: 10.0,
        };
        let z = vec![unit(&[1.0, 0.0])];
        let report = mtce_loss(&z, &[0], &head).unwrap();
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((report.loss - expected).abs() < 1e-15);
    }

    #[test]
    fn mtce_uniform_logits_give_log_c() {
        let c = 7;
        let head = CosineClassifierHead {
            class_ids: (0..c).collect(),
            weights: vec![vec![1.0, 0.0, 0.0]; c],
            beta: 10.0,
        };
        let z = vec![unit(&[0.2, 0.5, -0.3])];
        let report = mtce_loss(&z, &[3], &head).unwrap();
        assert!((report.loss - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mtce_rejects_unknown_label() {
        let head = CosineClassifierHead {
            class_ids: vec![0, 1],
            weights: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            beta: 10.0,
        };
        let z = vec![unit(&[1.0, 0.0])];
        assert!(matches!(
            mtce_loss(&z, &[5], &head),
            Err(ConftError::LabelDomain { label: 5 })
        ));
    }

    #[test]
    fn head_from_class_means_is_normalized() {
        let z = vec![unit(&[1.0, 0.1]), unit(&[1.0, -0.1]), unit(&[0.0, 1.0])];
        let head = CosineClassifierHead::from_class_means(&z, &[4, 4, 9], 10.0).unwrap();
        assert_eq!(head.class_ids, vec![4, 9]);
        for w in &head.weights {
            let n: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multitask_reduces_to_conft_at_lambda_zero() {
        let labels = vec![0, 0, 1, 1];
        let plan = build_pair_plan(&labels, 2, 13).unwrap();
        let z_support = random_units(4, 4, 900);
        let z_dist = random_units(3, 4, 901);
        let head = CosineClassifierHead::from_class_means(&z_dist, &[7, 8, 9], 10.0).unwrap();
        let cfg = LossConfig { lambda: 0.0, ..LossConfig::default() };
        let mt = mt_conft_loss(&z_support, &plan, &z_dist, &[7, 8, 9], &head, &cfg).unwrap();
        let plain = conft_loss(&z_support, &plan, &z_dist, &cfg).unwrap();
        assert_eq!(mt.total, plain.loss);
        assert_eq!(mt.grad_distractors, plain.grad_distractors);
        assert!(mt.grad_head.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn multitask_is_additive() {
        let labels = vec![0, 0, 1, 1];
        let plan = build_pair_plan(&labels, 2, 13).unwrap();
        let z_support = random_units(4, 4, 910);
        let z_dist = random_units(3, 4, 911);
        let head = CosineClassifierHead::from_class_means(&z_dist, &[1, 2, 2], 10.0).unwrap();
        let cfg = LossConfig { lambda: 1.0, ..LossConfig::default() };
        let mt = mt_conft_loss(&z_support, &plan, &z_dist, &[1, 2, 2], &head, &cfg).unwrap();
        let conft = conft_loss(&z_support, &plan, &z_dist, &cfg).unwrap();
        let mtce = mtce_loss(&z_dist, &[1, 2, 2], &head).unwrap();
        assert!((mt.total - (conft.loss + mtce.loss)).abs() < 1e-12);
    }

    #[test]
    fn multitask_requires_labels() {
        let labels = vec![0, 0, 1, 1];
        let plan = build_pair_plan(&labels, 2, 13).unwrap();
        let z_support = random_units(4, 4, 920);
        let z_dist = random_units(3, 4, 921);
        let head = CosineClassifierHead::from_class_means(&z_dist, &[1, 2, 3], 10.0).unwrap();
        assert!(matches!(
            mt_conft_loss(&z_support, &plan, &z_dist, &[1], &head, &LossConfig::default()),
            Err(ConftError::InvalidConfig(_))
        ));
    }

    #[test]
    fn standard_pairs_matches_hand_computation() {
        // two task samples of one class, two distractors of one (disjoint)
        // class: every union member anchors with one positive and two
        // negatives.
        let zt = vec![unit(&[1.0, 0.2]), unit(&[0.9, -0.1])];
        let zd = vec![unit(&[-0.3, 1.0]), unit(&[-0.5, 0.8])];
        let cfg = LossConfig { temperature: 0.5, ..LossConfig::default() };
        let report = standard_pairs_loss(&zt, &[0, 0], &zd, &[0, 0], &cfg).unwrap();

        let all = [&zt[0], &zt[1], &zd[0], &zd[1]];
        let partner = [1usize, 0, 3, 2];
        let opponents = [[2usize, 3], [2, 3], [0, 1], [0, 1]];
        let mut expected = 0.0;
        for i in 0..4 {
            let e_pos = (all[i].dot(all[partner[i]]) / 0.5).exp();
            let den = e_pos
                + (all[i].dot(all[opponents[i][0]]) / 0.5).exp()
                + (all[i].dot(all[opponents[i][1]]) / 0.5).exp();
            expected += -(e_pos / den).ln();
        }
        expected /= 4.0;
        assert!((report.loss - expected).abs() < 1e-12);
        // distractor-class ids collide with the task class id on purpose:
        // the namespaces are disjoint, so no cross-side positives arise.
        assert_eq!(report.per_anchor.len(), 4);
    }

    #[test]
    fn standard_pairs_skips_singleton_anchors() {
        let zt = vec![unit(&[1.0, 0.0]), unit(&[0.8, 0.6])];
        let zd = vec![unit(&[0.0, 1.0])];
        let cfg = LossConfig::default();
        // distractor is a singleton class: it cannot anchor
        let report = standard_pairs_loss(&zt, &[0, 0], &zd, &[3], &cfg).unwrap();
        assert_eq!(report.per_anchor.len(), 2);
    }

    proptest! {
        #[test]
        fn likelihoods_are_probabilities(seed in 0u64..300) {
            let labels = vec![0, 0, 1, 1, 2, 2];
            let plan = build_pair_plan(&labels, 2, seed).unwrap();
            let z_support = random_units(6, 4, seed.wrapping_add(1));
            let z_dist = random_units(3, 4, seed.wrapping_add(2));
            for weighting in [false, true] {
                let cfg = LossConfig { weighting_enabled: weighting, ..LossConfig::default() };
                let report = conft_loss(&z_support, &plan, &z_dist, &cfg).unwrap();
                prop_assert!(report.loss >= 0.0);
                for &l in &report.per_anchor {
                    prop_assert!(l > 0.0 && l <= 1.0);
                }
            }
        }
    }

    /// Chain the loss gradient through the model and compare against central
    /// finite differences on the parameters.
    #[test]
    fn gradients_match_finite_differences_through_the_model() {
        let model = ProjectionModel::init(&[3, 10, 3], 424).unwrap();
        let xs: Vec<Vec<f64>> = {
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            (0..6).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let xd: Vec<Vec<f64>> = {
            let mut rng = ChaCha8Rng::seed_from_u64(32);
            (0..3).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let labels = vec![0, 0, 1, 1, 2, 2];
        let plan = build_pair_plan(&labels, 2, 55).unwrap();
        let cfg = LossConfig { weighting_enabled: true, ..LossConfig::default() };

        let eval = |m: &ProjectionModel| -> f64 {
            let zs: Vec<Representation> = xs.iter().map(|x| m.embed(x).unwrap()).collect();
            let zd: Vec<Representation> = xd.iter().map(|x| m.embed(x).unwrap()).collect();
            conft_loss(&zs, &plan, &zd, &cfg).unwrap().loss
        };

        // analytic: loss gradients w.r.t. z chained through backward
        let mut total = crate::model::ModelGradients::zeros_like(&model);
        let mut caches = Vec::new();
        let mut zs = Vec::new();
        for x in &xs {
            let (h, c) = model.forward(x).unwrap();
            zs.push(normalize(&h).unwrap());
            caches.push(c);
        }
        let mut dcaches = Vec::new();
        let mut zd = Vec::new();
        for x in &xd {
            let (h, c) = model.forward(x).unwrap();
            zd.push(normalize(&h).unwrap());
            dcaches.push(c);
        }
        let report = conft_loss(&zs, &plan, &zd, &cfg).unwrap();
        for (c, g) in caches.iter().zip(&report.grad_support) {
            total.add_assign(&model.backward(c, g).unwrap());
        }
        for (c, g) in dcaches.iter().zip(&report.grad_distractors) {
            total.add_assign(&model.backward(c, g).unwrap());
        }
        let analytic = total.flat();

        // numeric
        let base = model.flat_params();
        let mut m = model.clone();
        let step = 1e-6;
        for (i, &a) in analytic.iter().enumerate() {
            let mut p = base.clone();
            p[i] = base[i] + step;
            m.set_flat_params(&p).unwrap();
            let fp = eval(&m);
            p[i] = base[i] - step;
            m.set_flat_params(&p).unwrap();
            let fm = eval(&m);
            let numeric = (fp - fm) / (2.0 * step);
            let err = (a - numeric).abs();
            assert!(
                err < 1e-8 || err / a.abs().max(numeric.abs()) < 1e-5,
                "param {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}
