//! Per-task distractor-aware contrastive finetuning.
//!
//! One epoch is one loss evaluation and one optimizer step over the whole
//! support set with one fresh distractor batch: sample the batch without
//! replacement, augment the support samples, build the pair plan, embed
//! everything (support augmented, distractors raw), evaluate the loss and
//! take one Adam step. The distractor pool is reshuffled on exhaustion.
//!
//! The run seed is split into named streams (pairing, augmentation,
//! distractor-shuffle), each indexed by epoch where appropriate, so ablation
//! arms sharing a seed see identical pairings and augmentations regardless
//! of whether they consume distractors.

use crate::diagnostics::{
    cluster_separation, cluster_spread, relative_change_trajectory, ClusterStats,
    EpochClusterSnapshot,
};
use crate::error::{ConftError, Result};
use crate::loss::{
    conft_loss, mt_conft_loss, standard_pairs_loss, CosineClassifierHead, LossConfig,
};
use crate::model::{AdamState, ModelGradients, ProjectionModel, Representation};
use crate::pairing::{build_augmented_pair_plan, build_pair_plan, DistractorCursor, PairPlan};
use crate::rng::{derive_seed, derive_seed_indexed, indexed_rng};
use crate::taskgen::{DistractorPool, FewShotTask};
use rand::Rng;
use rand_distr::StandardNormal;

/// Early-stopping epoch grid used when grid enforcement is on.
pub const EPOCH_GRID: [usize; 6] = [50, 100, 200, 300, 400, 500];

/// How similarity pairs are constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairConstruction {
    /// Distractors participate only as anchor-negatives.
    Asymmetric,
    /// Supervised-contrastive over the union of task samples and labelled
    /// distractors (ablation baseline).
    Standard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    /// Number of finetuning epochs (one optimizer step each).
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
    /// Distractor batch size per step; 0 disables distractors.
    pub distractor_batch: usize,
    /// Standard deviation of the additive Gaussian input augmentation.
    pub augment_sigma: f64,
    /// Run seed; split into named streams internally.
    pub seed: u64,
    /// Record cluster statistics every this many epochs (0 disables
    /// snapshots; epoch 0 and the final epoch are always included when on).
    pub snapshot_stride: usize,
    pub pair_construction: PairConstruction,
    /// Add the auxiliary cosine-classifier cross-entropy over the labelled
    /// distractor batch.
    pub multitask: bool,
    /// 1-shot path: include augmented copies of other-class samples among
    /// the negatives.
    pub augmented_negatives: bool,
    /// Restrict `epochs` to the cross-validation grid.
    pub enforce_epoch_grid: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 100,
            learning_rate: 5e-4,
            loss: LossConfig::default(),
            distractor_batch: 64,
            augment_sigma: 0.1,
            seed: 0,
            snapshot_stride: 1,
            pair_construction: PairConstruction::Asymmetric,
            multitask: false,
            augmented_negatives: true,
            enforce_epoch_grid: false,
        }
    }
}

/// Outcome of one finetuning run.
#[derive(Debug, Clone)]
pub struct FinetuneTrace {
    /// Loss value per epoch (length = epochs).
    pub losses: Vec<f64>,
    /// Cluster statistics per recorded epoch (empty when snapshots are off).
    pub snapshots: Vec<EpochClusterSnapshot>,
    /// Task-adapted parameters.
    pub model: ProjectionModel,
    /// Pairing of the first epoch, for inspecting seed pairing across arms.
    pub first_epoch_plan: Option<PairPlan>,
}

impl FinetuneTrace {
    /// Delta / relative-delta series of this run (needs snapshots).
    pub fn relative_trajectory(&self) -> Result<Vec<ClusterStats>> {
        relative_change_trajectory(&self.snapshots)
    }
}

/// Finetune without any distractors (I_dt empty every epoch).
pub fn finetune_without_distractors(
    prior: &ProjectionModel,
    task: &FewShotTask,
    config: &FinetuneConfig,
) -> Result<FinetuneTrace> {
    finetune(prior, task, None, config)
}

/// Run the full finetuning loop, returning the loss trace, optional
/// diagnostics snapshots and the adapted parameters. The prior model is
/// never mutated.
pub fn finetune(
    prior: &ProjectionModel,
    task: &FewShotTask,
    pool: Option<&DistractorPool>,
    config: &FinetuneConfig,
) -> Result<FinetuneTrace> {
    config.loss.validate()?;
    if config.epochs == 0 {
        return Err(ConftError::InvalidConfig("epochs must be positive".into()));
    }
    if config.enforce_epoch_grid && !EPOCH_GRID.contains(&config.epochs) {
        return Err(ConftError::InvalidConfig(format!(
            "epochs {} not in the grid {EPOCH_GRID:?}",
            config.epochs
        )));
    }
    if task.support.is_empty() || task.query.is_empty() {
        return Err(ConftError::MalformedTask("empty support or query set".into()));
    }
    for (x, _) in task.support.iter().chain(&task.query) {
        if x.len() != prior.input_dim() {
            return Err(ConftError::ShapeMismatch {
                what: "task feature",
                expected: prior.input_dim(),
                got: x.len(),
            });
        }
    }
    let distractors_on = pool.is_some() && config.distractor_batch > 0;
    if let (true, Some(p)) = (distractors_on, pool) {
        if config.distractor_batch > p.len() {
            return Err(ConftError::InvalidConfig(format!(
                "distractor batch {} exceeds pool size {}",
                config.distractor_batch,
                p.len()
            )));
        }
    }
    if config.multitask && config.pair_construction == PairConstruction::Standard {
        return Err(ConftError::InvalidConfig(
            "multitask is not combined with the standard pair construction".into(),
        ));
    }
    let pool_labels: Option<&[usize]> = match pool {
        Some(p) => p.labels.as_deref(),
        None => None,
    };
    let needs_labels =
        config.multitask || config.pair_construction == PairConstruction::Standard;
    if needs_labels {
        if !distractors_on {
            return Err(ConftError::InvalidConfig(
                "this variant needs a distractor pool with a positive batch size".into(),
            ));
        }
        if pool_labels.is_none() {
            return Err(ConftError::InvalidConfig(
                "this variant needs a labelled distractor pool".into(),
            ));
        }
    }

    let mut model = prior.clone();
    let mut adam = AdamState::new(&model, config.learning_rate);
    let support_labels = task.support_labels();
    let shots = task.shots;

    // multitask head: normalized class means of the pool under the prior
    let mut head: Option<CosineClassifierHead> = None;
    let mut head_adam = FlatAdam::default();
    if config.multitask {
        let p = pool.unwrap();
        let labels = pool_labels.unwrap();
        let z_pool: Vec<Representation> =
            p.features.iter().map(|x| model.embed(x)).collect::<Result<_>>()?;
        let h = CosineClassifierHead::from_class_means(&z_pool, labels, config.loss.beta)?;
        head_adam = FlatAdam::new(
            h.weights.iter().map(|w| w.len()).sum(),
            config.learning_rate,
        );
        head = Some(h);
    }

    let mut cursor = if distractors_on {
        Some(DistractorCursor::new(
            pool.unwrap().len(),
            derive_seed(config.seed, "distractor-shuffle"),
        )?)
    } else {
        None
    };

    let take_snapshot = |model: &ProjectionModel, epoch: usize| -> Result<EpochClusterSnapshot> {
        let z_s: Vec<Representation> =
            task.support.iter().map(|(x, _)| model.embed(x)).collect::<Result<_>>()?;
        let z_q: Vec<Representation> =
            task.query.iter().map(|(x, _)| model.embed(x)).collect::<Result<_>>()?;
        let labels_s: Vec<usize> = task.support.iter().map(|(_, y)| *y).collect();
        let labels_q: Vec<usize> = task.query.iter().map(|(_, y)| *y).collect();
        Ok(EpochClusterSnapshot {
            epoch,
            support_spread: cluster_spread(&z_s, &labels_s, task.ways)?,
            support_sep: cluster_separation(&z_s, &labels_s, task.ways)?,
            query_spread: cluster_spread(&z_q, &labels_q, task.ways)?,
            query_sep: cluster_separation(&z_q, &labels_q, task.ways)?,
        })
    };

    let stride = config.snapshot_stride;
    let mut snapshots = Vec::new();
    if stride > 0 {
        snapshots.push(take_snapshot(&model, 0)?);
    }

    let mut losses = Vec::with_capacity(config.epochs);
    let mut first_epoch_plan = None;
    for epoch in 1..=config.epochs {
        // distractor batch for this step
        let (batch_indices, dist_x, dist_labels): (Vec<usize>, Vec<&Vec<f64>>, Vec<usize>) =
            match (&mut cursor, pool) {
                (Some(cur), Some(p)) => {
                    let idx = cur.next_batch(config.distractor_batch)?;
                    let x = idx.iter().map(|&i| &p.features[i]).collect();
                    let labels = match pool_labels {
                        Some(l) => idx.iter().map(|&i| l[i]).collect(),
                        None => Vec::new(),
                    };
                    (idx, x, labels)
                }
                _ => (Vec::new(), Vec::new(), Vec::new()),
            };

        // fresh augmentation per epoch
        let mut aug_rng = indexed_rng(config.seed, "augmentation", epoch as u64);
        let mut augment = |x: &[f64]| -> Vec<f64> {
            x.iter()
                .map(|v| v + config.augment_sigma * aug_rng.sample::<f64, _>(StandardNormal))
                .collect()
        };

        let plan = match config.pair_construction {
            PairConstruction::Standard => None,
            PairConstruction::Asymmetric => Some(if shots == 1 {
                build_augmented_pair_plan(&support_labels, config.augmented_negatives)?
            } else {
                build_pair_plan(
                    &support_labels,
                    shots,
                    derive_seed_indexed(config.seed, "pairing", epoch as u64),
                )?
                .with_distractor_indices(batch_indices)
            }),
        };
        let plan = match plan {
            Some(p) if shots == 1 => Some(p.with_distractor_indices(
                // set here so the 1-shot branch shares the builder call above
                std::mem::take(&mut Vec::new()),
            )),
            other => other,
        };

        // embed: augmented support, virtual copies, raw distractors
        let n_embeddings = plan.as_ref().map_or(task.support.len(), |p| p.n_embeddings);
        let mut z_support = Vec::with_capacity(n_embeddings);
        let mut caches = Vec::with_capacity(n_embeddings);
        for (x, _) in &task.support {
            let (h, cache) = model.forward(&augment(x))?;
            z_support.push(crate::model::normalize(&h)?);
            caches.push(cache);
        }
        if let Some(p) = &plan {
            for &(_, src) in &p.virtual_copies {
                let (h, cache) = model.forward(&augment(&task.support[src].0))?;
                z_support.push(crate::model::normalize(&h)?);
                caches.push(cache);
            }
        }
        let mut z_dist = Vec::with_capacity(dist_x.len());
        let mut dist_caches = Vec::with_capacity(dist_x.len());
        for x in &dist_x {
            let (h, cache) = model.forward(x)?;
            z_dist.push(crate::model::normalize(&h)?);
            dist_caches.push(cache);
        }

        // evaluate loss and gradients w.r.t. representations
        let (loss_value, grad_support, grad_dist, grad_head) =
            match (config.pair_construction, &head) {
                (PairConstruction::Standard, _) => {
                    let report = standard_pairs_loss(
                        &z_support,
                        &support_labels,
                        &z_dist,
                        &dist_labels,
                        &config.loss,
                    )?;
                    (report.loss, report.grad_support, report.grad_distractors, None)
                }
                (PairConstruction::Asymmetric, Some(h)) => {
                    let report = mt_conft_loss(
                        &z_support,
                        plan.as_ref().unwrap(),
                        &z_dist,
                        &dist_labels,
                        h,
                        &config.loss,
                    )?;
                    (
                        report.total,
                        report.conft.grad_support,
                        report.grad_distractors,
                        Some(report.grad_head),
                    )
                }
                (PairConstruction::Asymmetric, None) => {
                    let report =
                        conft_loss(&z_support, plan.as_ref().unwrap(), &z_dist, &config.loss)?;
                    (report.loss, report.grad_support, report.grad_distractors, None)
                }
            };
        if !loss_value.is_finite() {
            return Err(ConftError::FinetuneDiverged { epoch });
        }

        // backprop into parameter space
        let mut grads = ModelGradients::zeros_like(&model);
        for (cache, g) in caches.iter().zip(&grad_support) {
            grads.add_assign(&model.backward(cache, g)?);
        }
        for (cache, g) in dist_caches.iter().zip(&grad_dist) {
            grads.add_assign(&model.backward(cache, g)?);
        }
        model
            .adam_step(&mut adam, &grads)
            .map_err(|e| e.with_context(format!("epoch {epoch}")))?;
        if model.assert_finite().is_err() {
            return Err(ConftError::FinetuneDiverged { epoch });
        }
        if let (Some(h), Some(gh)) = (&mut head, grad_head) {
            let flat_grad: Vec<f64> = gh.iter().flatten().copied().collect();
            if flat_grad.iter().any(|g| !g.is_finite()) {
                return Err(ConftError::FinetuneDiverged { epoch });
            }
            head_adam.step(&mut h.weights, &flat_grad);
        }

        losses.push(loss_value);
        if epoch == 1 {
            first_epoch_plan = plan;
        }
        if stride > 0 && (epoch % stride == 0 || epoch == config.epochs) {
            snapshots.push(take_snapshot(&model, epoch)?);
        }
    }

    Ok(FinetuneTrace { losses, snapshots, model, first_epoch_plan })
}

/// Minimal Adam over a flat parameter vector, for the classifier head.
#[derive(Debug, Clone, Default)]
struct FlatAdam {
    step: u64,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl FlatAdam {
    fn new(n: usize, lr: f64) -> Self {
        FlatAdam { step: 0, lr, m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step(&mut self, weights: &mut [Vec<f64>], flat_grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let bc1 = 1.0 - B1.powi(self.step as i32);
        let bc2 = 1.0 - B2.powi(self.step as i32);
        let mut i = 0;
        for w in weights.iter_mut() {
            for p in w.iter_mut() {
                let g = flat_grad[i];
                self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
                self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
                *p -= self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + EPS);
                i += 1;
            }
        }
    }
}
