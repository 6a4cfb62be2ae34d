//! Anchor-positive / anchor-negative set construction and distractor
//! batching.
//!
//! Support samples of the same class are randomly paired with no sample
//! occurring in more than one pair; each unordered pair {a, b} contributes
//! two directed anchor terms (a with positive b, b with positive a). For an
//! odd shot count one uniformly chosen sample per class sits out for the
//! epoch. The 1-shot path pairs every sample with an independently augmented
//! copy of itself, resolved at embedding time through a virtual slot.
//!
//! Distractors are sampled from the pool without replacement; the pool is
//! reshuffled and traversal restarts once it is exhausted. Distractors never
//! appear as anchors or positives (asymmetric pair construction).

use crate::error::{ConftError, Result};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use std::collections::BTreeMap;

/// One directed anchor term of the contrastive loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Anchor {
    /// Embedding slot of the anchor.
    pub index: usize,
    /// Embedding slot of its positive.
    pub positive: usize,
    /// Task-specific negative slots N(i), ascending.
    pub negatives: Vec<usize>,
}

/// Pairing of one finetuning step.
///
/// Embedding slots `0..n_support` are the support samples; slots
/// `n_support..n_embeddings` are virtual augmented copies (1-shot path only).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairPlan {
    /// Directed anchor terms, ascending by anchor slot.
    pub anchors: Vec<Anchor>,
    /// Support indices omitted this epoch (odd shot counts), ascending.
    pub omitted: Vec<usize>,
    /// Distractor pool indices I_dt for this step (bookkeeping; the loss
    /// receives distractor representations separately).
    pub distractor_indices: Vec<usize>,
    /// Number of support samples.
    pub n_support: usize,
    /// Total embedding slots, including virtual augmented copies.
    pub n_embeddings: usize,
    /// (virtual slot, source support index) pairs to resolve at embedding
    /// time with an independent augmentation draw.
    pub virtual_copies: Vec<(usize, usize)>,
}

impl PairPlan {
    /// Number of unordered anchor-positive pairs.
    pub fn unordered_pair_count(&self) -> usize {
        if self.virtual_copies.is_empty() {
            self.anchors.len() / 2
        } else {
            self.anchors.len()
        }
    }

    pub fn with_distractor_indices(mut self, indices: Vec<usize>) -> Self {
        self.distractor_indices = indices;
        self
    }
}

fn group_by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    by_class
}

/// Build the pairing for one epoch of a K >= 2 task.
///
/// Every class must hold exactly `shots` samples. For even `shots` every
/// sample lands in exactly one unordered pair; for odd `shots` one uniformly
/// chosen sample per class is omitted for the epoch. Omitted samples appear
/// neither as anchors nor in any negative set.
pub fn build_pair_plan(support_labels: &[usize], shots: usize, seed: u64) -> Result<PairPlan> {
    if shots < 2 {
        return Err(ConftError::MalformedTask(format!(
            "pair plan needs shots >= 2, got {shots} (1-shot uses the augmented plan)"
        )));
    }
    let by_class = group_by_class(support_labels);
    for (&c, members) in &by_class {
        if members.len() < 2 {
            return Err(ConftError::MalformedTask(format!(
                "class {c} has {} sample(s), need at least 2",
                members.len()
            )));
        }
        if members.len() != shots {
            return Err(ConftError::MalformedTask(format!(
                "class {c} has {} samples, expected exactly {shots}",
                members.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut omitted = Vec::new();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for members in by_class.values() {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        if members.len() % 2 == 1 {
            omitted.push(members.pop().unwrap());
        }
        for chunk in members.chunks_exact(2) {
            pairs.push((chunk[0], chunk[1]));
        }
    }
    omitted.sort_unstable();

    let mut anchors: Vec<Anchor> = Vec::with_capacity(2 * pairs.len());
    for &(a, b) in &pairs {
        anchors.push(Anchor { index: a, positive: b, negatives: Vec::new() });
        anchors.push(Anchor { index: b, positive: a, negatives: Vec::new() });
    }
    anchors.sort_by_key(|a| a.index);

    let eligible: Vec<usize> =
        (0..support_labels.len()).filter(|i| !omitted.contains(i)).collect();
    for anchor in &mut anchors {
        anchor.negatives = eligible
            .iter()
            .copied()
            .filter(|&p| support_labels[p] != support_labels[anchor.index])
            .collect();
    }

    Ok(PairPlan {
        anchors,
        omitted,
        distractor_indices: Vec::new(),
        n_support: support_labels.len(),
        n_embeddings: support_labels.len(),
        virtual_copies: Vec::new(),
    })
}

/// Build the 1-shot pairing: each support sample is paired with an
/// independently augmented copy of itself (a virtual slot resolved at
/// embedding time). Negatives are the other classes' samples, plus their
/// augmented copies when `augmented_negatives` is set.
pub fn build_augmented_pair_plan(
    support_labels: &[usize],
    augmented_negatives: bool,
) -> Result<PairPlan> {
    let by_class = group_by_class(support_labels);
    for (&c, members) in &by_class {
        if members.len() != 1 {
            return Err(ConftError::MalformedTask(format!(
                "augmented pairing is the 1-shot path; class {c} has {} samples",
                members.len()
            )));
        }
    }
    let n = support_labels.len();
    let virtual_copies: Vec<(usize, usize)> = (0..n).map(|i| (n + i, i)).collect();
    let mut anchors = Vec::with_capacity(n);
    for i in 0..n {
        let mut negatives: Vec<usize> = (0..n)
            .filter(|&p| support_labels[p] != support_labels[i])
            .collect();
        if augmented_negatives {
            let copies: Vec<usize> = negatives.iter().map(|&p| n + p).collect();
            negatives.extend(copies);
        }
        negatives.sort_unstable();
        anchors.push(Anchor { index: i, positive: n + i, negatives });
    }
    Ok(PairPlan {
        anchors,
        omitted: Vec::new(),
        distractor_indices: Vec::new(),
        n_support: n,
        n_embeddings: 2 * n,
        virtual_copies,
    })
}

/// Without-replacement traversal of a shuffled distractor pool. When the
/// permutation is exhausted the pool is reshuffled and traversal restarts.
#[derive(Debug, Clone)]
pub struct DistractorCursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl DistractorCursor {
    pub fn new(pool_size: usize, seed: u64) -> Result<Self> {
        if pool_size == 0 {
            return Err(ConftError::InvalidConfig(
                "distractor pool is empty".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..pool_size).collect();
        order.shuffle(&mut rng);
        Ok(DistractorCursor { order, pos: 0, rng })
    }

    pub fn pool_size(&self) -> usize {
        self.order.len()
    }

    /// Draw the next `batch_size` indices of the traversal.
    pub fn next_batch(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        if batch_size > self.order.len() {
            return Err(ConftError::InvalidConfig(format!(
                "distractor batch size {batch_size} exceeds pool size {}",
                self.order.len()
            )));
        }
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        Ok(batch)
    }
}
