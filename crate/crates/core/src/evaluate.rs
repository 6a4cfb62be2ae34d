//! Nearest-mean evaluation of finetuned representations.
//!
//! Class weight vectors are the per-class means of the (un-augmented)
//! support representations; queries are assigned to the class with the
//! largest cosine similarity. Prototypes are not re-normalized: cosine
//! similarity is scale-invariant, so the argmax is unaffected.

use crate::error::{ConftError, Result};
use crate::model::ProjectionModel;
use crate::taskgen::FewShotTask;

/// Mean support representation of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class: usize,
    pub values: Vec<f64>,
    /// Set when the mean collapsed to (numerically) zero; degenerate
    /// prototypes are excluded from classification.
    pub degenerate: bool,
}

/// Per-class means of the support representations, ascending by class id.
pub fn class_prototypes(
    model: &ProjectionModel,
    support: &[(Vec<f64>, usize)],
) -> Result<Vec<Prototype>> {
    if support.is_empty() {
        return Err(ConftError::MalformedTask("empty support set".into()));
    }
    let mut classes: Vec<usize> = support.iter().map(|(_, y)| *y).collect();
    classes.sort_unstable();
    classes.dedup();

    let dim = model.repr_dim();
    let mut sums = vec![vec![0.0; dim]; classes.len()];
    let mut counts = vec![0usize; classes.len()];
    for (x, y) in support {
        let z = model.embed(x)?;
        let k = classes.binary_search(y).unwrap();
        counts[k] += 1;
        for (s, v) in sums[k].iter_mut().zip(z.values()) {
            *s += v;
        }
    }
    Ok(classes
        .into_iter()
        .zip(sums)
        .zip(counts)
        .map(|((class, mut sum), count)| {
            for v in sum.iter_mut() {
                *v /= count as f64;
            }
            let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
            Prototype { class, values: sum, degenerate: norm < 1e-12 }
        })
        .collect())
}

/// Classify one query by largest cosine similarity against the non-degenerate
/// prototypes. Ties break toward the lowest class id.
pub fn classify_query(
    model: &ProjectionModel,
    prototypes: &[Prototype],
    query: &[f64],
) -> Result<usize> {
    if prototypes.iter().all(|p| p.degenerate) {
        return Err(ConftError::Evaluation(
            "all class prototypes are degenerate".into(),
        ));
    }
    let z = model.embed(query)?;
    let mut best: Option<(usize, f64)> = None;
    for p in prototypes {
        if p.degenerate {
            continue;
        }
        let norm = p.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = crate::model::dot(z.values(), &p.values) / norm;
        let better = match best {
            None => true,
            Some((_, b)) => cos > b,
        };
        if better {
            best = Some((p.class, cos));
        }
    }
    Ok(best.unwrap().0)
}

/// Accuracy of one evaluated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub task_id: usize,
    pub predictions: Vec<usize>,
    /// correct / |query|
    pub accuracy: f64,
}

/// Build prototypes from the support set and classify every query.
pub fn evaluate_task(
    model: &ProjectionModel,
    task: &FewShotTask,
    task_id: usize,
) -> Result<EpisodeResult> {
    let prototypes = class_prototypes(model, &task.support)?;
    let mut predictions = Vec::with_capacity(task.query.len());
    let mut correct = 0usize;
    for (x, y) in &task.query {
        let pred = classify_query(model, &prototypes, x)?;
        if pred == *y {
            correct += 1;
        }
        predictions.push(pred);
    }
    Ok(EpisodeResult {
        task_id,
        predictions,
        accuracy: correct as f64 / task.query.len() as f64,
    })
}

/// Mean accuracy and 95% confidence half-width over tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateResult {
    pub mean_accuracy: f64,
    /// 1.96 * sample std / sqrt(T)
    pub ci95_half_width: f64,
    pub tasks: usize,
}

pub fn aggregate(results: &[EpisodeResult]) -> Result<AggregateResult> {
    if results.len() < 2 {
        return Err(ConftError::InsufficientSamples { needed: 2, got: results.len() });
    }
    let n = results.len() as f64;
    let mean = results.iter().map(|r| r.accuracy).sum::<f64>() / n;
    let var = results
        .iter()
        .map(|r| (r.accuracy - mean) * (r.accuracy - mean))
        .sum::<f64>()
        / (n - 1.0);
    Ok(AggregateResult {
        mean_accuracy: mean,
        ci95_half_width: 1.96 * var.sqrt() / n.sqrt(),
        tasks: results.len(),
    })
}
