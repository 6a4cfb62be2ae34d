//! Clustering diagnostics and the proxy A-distance probe.
//!
//! Cluster spread sums cosine dissimilarity (1 - z_i . z_j) over ordered
//! same-class pairs; cluster separation sums it over cross-class pairs, with
//! each ordered cross pair counted under both endpoint classes. Both carry a
//! 1/M factor and are otherwise unnormalized double sums; the relative-change
//! series divide by the prior support separation, which absorbs scale.
//!
//! Sums are compensated (Kahan) so the O(n^2) reference comparison holds to
//! tight tolerances even at a few hundred samples.

use crate::error::{ConftError, Result};
use crate::model::Representation;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

#[derive(Debug, Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    fn total(self) -> f64 {
        self.sum
    }
}

fn class_members(labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() != n_classes {
        return Err(ConftError::MalformedTask(format!(
            "expected {n_classes} non-empty classes, found {}",
            classes.len()
        )));
    }
    Ok(classes
        .iter()
        .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect())
}

/// Within-class spread: (1/M) sum over classes of the ordered-pair sum of
/// (1 - z_i . z_j).
pub fn cluster_spread(
    z: &[Representation],
    labels: &[usize],
    n_classes: usize,
) -> Result<f64> {
    if z.len() != labels.len() || z.is_empty() {
        return Err(ConftError::MalformedTask(
            "representations and labels must be non-empty and aligned".into(),
        ));
    }
    let members = class_members(labels, n_classes)?;
    let mut acc = Kahan::default();
    for group in &members {
        for &i in group {
            for &j in group {
                if i != j {
                    acc.add(1.0 - z[i].dot(&z[j]));
                }
            }
        }
    }
    Ok(acc.total() / n_classes as f64)
}

/// Cross-class separation: (1/M) sum over classes of the cross-pair sum of
/// (1 - z_i . z_j), with both orders counted per class.
pub fn cluster_separation(
    z: &[Representation],
    labels: &[usize],
    n_classes: usize,
) -> Result<f64> {
    if z.len() != labels.len() || z.is_empty() {
        return Err(ConftError::MalformedTask(
            "representations and labels must be non-empty and aligned".into(),
        ));
    }
    if n_classes < 2 {
        return Err(ConftError::MalformedTask(
            "separation needs at least 2 classes".into(),
        ));
    }
    let members = class_members(labels, n_classes)?;
    let mut acc = Kahan::default();
    for group in &members {
        for &i in group {
            for j in 0..z.len() {
                if labels[j] != labels[i] {
                    acc.add(2.0 * (1.0 - z[i].dot(&z[j])));
                }
            }
        }
    }
    Ok(acc.total() / n_classes as f64)
}

/// Which sample split a statistic was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Support,
    Query,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Support => "support",
            Split::Query => "query",
        }
    }
}

/// Raw spread/separation values of both splits at one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochClusterSnapshot {
    pub epoch: usize,
    pub support_spread: f64,
    pub support_sep: f64,
    pub query_spread: f64,
    pub query_sep: f64,
}

/// Spread/separation values of one split at one epoch together with their
/// changes relative to epoch 0, normalized by kappa = support separation at
/// epoch 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub epoch: usize,
    pub split: Split,
    pub u_spread: f64,
    pub u_sep: f64,
    pub delta_spread: f64,
    pub delta_sep: f64,
    pub delta_rel_spread: f64,
    pub delta_rel_sep: f64,
    pub kappa: f64,
}

/// Turn per-epoch snapshots into delta / relative-delta series for both
/// splits. The first snapshot must be epoch 0 (the prior model).
pub fn relative_change_trajectory(
    snapshots: &[EpochClusterSnapshot],
) -> Result<Vec<ClusterStats>> {
    let first = snapshots
        .first()
        .ok_or_else(|| ConftError::InvalidConfig("no snapshots recorded".into()))?;
    if first.epoch != 0 {
        return Err(ConftError::InvalidConfig(format!(
            "trajectory must start at epoch 0, starts at {}",
            first.epoch
        )));
    }
    let kappa = first.support_sep;
    if kappa.abs() < 1e-12 {
        return Err(ConftError::DegeneratePrior);
    }
    let mut out = Vec::with_capacity(2 * snapshots.len());
    for s in snapshots {
        for (split, spread, sep, spread0, sep0) in [
            (Split::Support, s.support_spread, s.support_sep, first.support_spread, first.support_sep),
            (Split::Query, s.query_spread, s.query_sep, first.query_spread, first.query_sep),
        ] {
            let delta_spread = spread - spread0;
            let delta_sep = sep - sep0;
            out.push(ClusterStats {
                epoch: s.epoch,
                split,
                u_spread: spread,
                u_sep: sep,
                delta_spread,
                delta_sep,
                delta_rel_spread: delta_spread / kappa,
                delta_rel_sep: delta_sep / kappa,
                kappa,
            });
        }
    }
    Ok(out)
}

/// Pointwise mean of per-task trajectories. All tasks must share the same
/// (epoch, split) grid.
pub fn average_trajectories(trajectories: &[Vec<ClusterStats>]) -> Result<Vec<ClusterStats>> {
    let first = trajectories
        .first()
        .ok_or_else(|| ConftError::InvalidConfig("no trajectories to average".into()))?;
    for t in trajectories {
        if t.len() != first.len()
            || t.iter()
                .zip(first.iter())
                .any(|(a, b)| a.epoch != b.epoch || a.split != b.split)
        {
            return Err(ConftError::InvalidConfig(
                "trajectories do not share an epoch grid".into(),
            ));
        }
    }
    let n = trajectories.len() as f64;
    Ok((0..first.len())
        .map(|row| {
            let mean = |f: &dyn Fn(&ClusterStats) -> f64| {
                trajectories.iter().map(|t| f(&t[row])).sum::<f64>() / n
            };
            ClusterStats {
                epoch: first[row].epoch,
                split: first[row].split,
                u_spread: mean(&|s| s.u_spread),
                u_sep: mean(&|s| s.u_sep),
                delta_spread: mean(&|s| s.delta_spread),
                delta_sep: mean(&|s| s.delta_sep),
                delta_rel_spread: mean(&|s| s.delta_rel_spread),
                delta_rel_sep: mean(&|s| s.delta_rel_sep),
                kappa: mean(&|s| s.kappa),
            }
        })
        .collect())
}

/// PAD value for a given held-out domain-discrimination error.
pub fn pad_from_error(epsilon: f64) -> f64 {
    (2.0 * (1.0 - 2.0 * epsilon)).clamp(0.0, 2.0)
}

/// Proxy A-distance between two embedding sets: train a logistic probe to
/// discriminate the domains on half the samples, measure the held-out error
/// eps, return 2(1 - 2 eps) clamped to [0, 2].
pub fn proxy_a_distance(
    domain_a: &[Vec<f64>],
    domain_b: &[Vec<f64>],
    seed: u64,
) -> Result<f64> {
    const MIN_SAMPLES: usize = 20;
    for (name, d) in [("first", domain_a), ("second", domain_b)] {
        if d.len() < MIN_SAMPLES {
            return Err(ConftError::InsufficientSamples { needed: MIN_SAMPLES, got: d.len() });
        }
        let _ = name;
    }
    let dim = domain_a[0].len();
    if domain_b[0].len() != dim {
        return Err(ConftError::ShapeMismatch {
            what: "domain embedding dim",
            expected: dim,
            got: domain_b[0].len(),
        });
    }

    // 50/50 split within each domain keeps both sides label-balanced.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train: Vec<(&[f64], f64)> = Vec::new();
    let mut test: Vec<(&[f64], f64)> = Vec::new();
    for (samples, label) in [(domain_a, 0.0), (domain_b, 1.0)] {
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut rng);
        let half = samples.len() / 2;
        if half == 0 || samples.len() - half == 0 {
            return Err(ConftError::InvalidConfig("degenerate train/test split".into()));
        }
        for &i in &idx[..half] {
            train.push((&samples[i], label));
        }
        for &i in &idx[half..] {
            test.push((&samples[i], label));
        }
    }

    // logistic probe trained with Adam, full batch
    const STEPS: usize = 200;
    const LR: f64 = 0.05;
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let n_params = dim + 1; // weights + bias
    let mut params = vec![0.0; n_params];
    let mut m = vec![0.0; n_params];
    let mut v = vec![0.0; n_params];
    let mut grad = vec![0.0; n_params];
    for step in 1..=STEPS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, y) in &train {
            let logit =
                params[dim] + x.iter().zip(&params[..dim]).map(|(a, w)| a * w).sum::<f64>();
            let p = 1.0 / (1.0 + (-logit).exp());
            let err = (p - y) / train.len() as f64;
            for (g, xv) in grad[..dim].iter_mut().zip(*x) {
                *g += err * xv;
            }
            grad[dim] += err;
        }
        let bc1 = 1.0 - B1.powi(step as i32);
        let bc2 = 1.0 - B2.powi(step as i32);
        for i in 0..n_params {
            m[i] = B1 * m[i] + (1.0 - B1) * grad[i];
            v[i] = B2 * v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= LR * (m[i] / bc1) / ((v[i] / bc2).sqrt() + EPS);
        }
    }

    let mut errors = 0usize;
    for (x, y) in &test {
        let logit = params[dim] + x.iter().zip(&params[..dim]).map(|(a, w)| a * w).sum::<f64>();
        let predicted = if logit > 0.0 { 1.0 } else { 0.0 };
        if predicted != *y {
            errors += 1;
        }
    }
    let epsilon = errors as f64 / test.len() as f64;
    Ok(pad_from_error(epsilon))
}
