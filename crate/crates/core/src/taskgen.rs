//! Embedding domains and episodic task sampling.
//!
//! Domains are plain labelled feature-vector collections, either generated
//! as Gaussian mixtures (class prototypes on a sphere plus isotropic noise)
//! or loaded from a text file. A pair of domains sharing the ambient space
//! can be generated with a configurable gap angle between their prototype
//! subspaces, emulating base/novel domain proximity.
//!
//! File format: first line `n d`, then `n` lines of `d` space-separated
//! floats followed by an integer class id (-1 for unlabelled).

use crate::error::{io_err, ConftError, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Class id used in files for unlabelled rows.
const UNLABELLED: i64 = -1;

/// A labelled collection of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDomain {
    pub name: String,
    /// (feature vector, class id) pairs.
    pub samples: Vec<(Vec<f64>, usize)>,
    pub dim: usize,
}

impl EmbeddingDomain {
    /// Sorted catalog of class ids.
    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.samples.iter().map(|(_, y)| *y).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, (_, y)) in self.samples.iter().enumerate() {
            map.entry(*y).or_default().push(i);
        }
        map
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generate a Gaussian-mixture domain: class prototypes uniformly directed
/// on a sphere of radius `prototype_scale`, samples at prototype plus
/// isotropic noise of standard deviation `noise_sigma`.
pub fn generate_synthetic_domain(
    n_classes: usize,
    per_class: usize,
    input_dim: usize,
    prototype_scale: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<EmbeddingDomain> {
    if n_classes == 0 || per_class == 0 || input_dim == 0 {
        return Err(ConftError::InvalidConfig(
            "synthetic domain needs positive class count, per-class count and dimension".into(),
        ));
    }
    if !(prototype_scale > 0.0) || noise_sigma < 0.0 {
        return Err(ConftError::InvalidConfig(format!(
            "bad synthetic parameters: scale {prototype_scale}, sigma {noise_sigma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_classes * per_class);
    for class in 0..n_classes {
        let prototype: Vec<f64> =
            random_unit(&mut rng, input_dim).into_iter().map(|v| v * prototype_scale).collect();
        for _ in 0..per_class {
            let x: Vec<f64> = prototype
                .iter()
                .map(|p| p + noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push((x, class));
        }
    }
    Ok(EmbeddingDomain { name: format!("synthetic-{seed}"), samples, dim: input_dim })
}

/// Parameters for a base/novel domain pair sharing one ambient space.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPairConfig {
    pub base_classes: usize,
    pub novel_classes: usize,
    pub per_class: usize,
    /// Ambient dimension; must be even (prototypes live in half-dimensional
    /// subspaces).
    pub input_dim: usize,
    pub prototype_scale: f64,
    pub noise_sigma: f64,
    /// Angle in radians between the base and novel prototype subspaces:
    /// 0 puts both mixtures in the same subspace, pi/2 in orthogonal ones.
    pub gap_angle: f64,
}

/// Generate a (base, novel) domain pair. Base prototypes span the first
/// `input_dim / 2` coordinates; novel prototypes span the same subspace
/// rotated by `gap_angle` into the remaining coordinates. Noise is
/// full-dimensional in both domains.
pub fn generate_domain_pair(
    cfg: &DomainPairConfig,
    seed: u64,
) -> Result<(EmbeddingDomain, EmbeddingDomain)> {
    if cfg.input_dim < 4 || cfg.input_dim % 2 != 0 {
        return Err(ConftError::InvalidConfig(format!(
            "domain pair needs an even input dim >= 4, got {}",
            cfg.input_dim
        )));
    }
    if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&cfg.gap_angle) {
        return Err(ConftError::InvalidConfig(format!(
            "gap angle must lie in [0, pi/2], got {}",
            cfg.gap_angle
        )));
    }
    let k = cfg.input_dim / 2;
    let (cos_g, sin_g) = (cfg.gap_angle.cos(), cfg.gap_angle.sin());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut build = |n_classes: usize, rotated: bool, name: &str| -> EmbeddingDomain {
        let mut samples = Vec::with_capacity(n_classes * cfg.per_class);
        for class in 0..n_classes {
            let dir = random_unit(&mut rng, k);
            let mut prototype = vec![0.0; cfg.input_dim];
            for (i, &v) in dir.iter().enumerate() {
                if rotated {
                    prototype[i] = cos_g * v * cfg.prototype_scale;
                    prototype[k + i] = sin_g * v * cfg.prototype_scale;
                } else {
                    prototype[i] = v * cfg.prototype_scale;
                }
            }
            for _ in 0..cfg.per_class {
                let x: Vec<f64> = prototype
                    .iter()
                    .map(|p| p + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                samples.push((x, class));
            }
        }
        EmbeddingDomain { name: name.to_string(), samples, dim: cfg.input_dim }
    };

    let base = build(cfg.base_classes, false, "base");
    let novel = build(cfg.novel_classes, true, "novel");
    Ok((base, novel))
}

/// An M-way K-shot episode: labelled support set plus a query set whose
/// labels are retained for scoring and diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotTask {
    /// Exactly `shots` samples for each of `ways` classes.
    pub support: Vec<(Vec<f64>, usize)>,
    /// `queries` samples per class, disjoint from the support set.
    pub query: Vec<(Vec<f64>, usize)>,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

impl FewShotTask {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|(_, y)| *y).collect()
    }

    /// Episode classes, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.support_labels();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Sample an episode: `ways` classes without replacement, then `shots`
/// support and `queries` query samples per class without replacement.
pub fn sample_episode(
    domain: &EmbeddingDomain,
    ways: usize,
    shots: usize,
    queries: usize,
    seed: u64,
) -> Result<FewShotTask> {
    if ways < 2 {
        return Err(ConftError::MalformedTask(format!("need at least 2 ways, got {ways}")));
    }
    let by_class = domain.by_class();
    let eligible: Vec<usize> = by_class
        .iter()
        .filter(|(_, members)| members.len() >= shots + queries)
        .map(|(&c, _)| c)
        .collect();
    if eligible.len() < ways {
        return Err(ConftError::MalformedTask(format!(
            "domain {} has {} classes with >= {} samples, need {ways}",
            domain.name,
            eligible.len(),
            shots + queries
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = eligible.clone();
    chosen.shuffle(&mut rng);
    let mut chosen: Vec<usize> = chosen.into_iter().take(ways).collect();
    chosen.sort_unstable();

    let mut support = Vec::with_capacity(ways * shots);
    let mut query = Vec::with_capacity(ways * queries);
    for &class in &chosen {
        let members = &by_class[&class];
        if members.len() < shots + queries {
            return Err(ConftError::Episode {
                class,
                reason: format!(
                    "{} samples available, need {}",
                    members.len(),
                    shots + queries
                ),
            });
        }
        let mut members = members.clone();
        members.shuffle(&mut rng);
        for &i in members.iter().take(shots) {
            support.push((domain.samples[i].0.clone(), class));
        }
        for &i in members.iter().skip(shots).take(queries) {
            query.push((domain.samples[i].0.clone(), class));
        }
    }
    Ok(FewShotTask { support, query, ways, shots, queries })
}

/// Unlabelled (or optionally labelled, for the multitask and standard-pair
/// variants) pool of distractor samples.
#[derive(Debug, Clone, PartialEq)]
pub struct DistractorPool {
    pub features: Vec<Vec<f64>>,
    /// Present iff the pool was built labelled.
    pub labels: Option<Vec<usize>>,
    pub dim: usize,
}

impl DistractorPool {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Keep a random subset of `n` samples (deterministic per seed), for the
    /// domain-size ablation. `n >= len` keeps the full pool.
    pub fn subsample(&self, n: usize, seed: u64) -> DistractorPool {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx.truncate(n);
        idx.sort_unstable();
        DistractorPool {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            dim: self.dim,
        }
    }
}

/// Build the distractor pool from a base domain, excluding the given
/// classes. Labels are retained iff `labelled`.
pub fn build_distractor_pool(
    base: &EmbeddingDomain,
    exclude_classes: &[usize],
    labelled: bool,
) -> Result<DistractorPool> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (x, y) in &base.samples {
        if !exclude_classes.contains(y) {
            features.push(x.clone());
            labels.push(*y);
        }
    }
    if features.is_empty() {
        return Err(ConftError::InvalidConfig(format!(
            "distractor pool is empty after excluding {exclude_classes:?}"
        )));
    }
    Ok(DistractorPool {
        features,
        labels: labelled.then_some(labels),
        dim: base.dim,
    })
}

/// Write a domain in the plain text format (floats at 17 significant
/// digits, so values round-trip).
pub fn save_domain(domain: &EmbeddingDomain, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("{} {}\n", domain.len(), domain.dim));
    for (x, y) in &domain.samples {
        for (i, v) in x.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&format!("{v:.16e}"));
        }
        out.push_str(&format!(" {y}\n"));
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Load a domain from the plain text format. Unlabelled rows (class id -1)
/// are assigned a shared synthetic class id after all labelled ids.
pub fn load_domain(path: &Path) -> Result<EmbeddingDomain> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| ConftError::EmptyDomain(format!("{} is empty", path.display())))?;
    let mut parts = header.split_whitespace();
    let n: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| ConftError::Parse { line: 1, reason: "expected `n d` header".into() })?;
    let dim: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| ConftError::Parse { line: 1, reason: "expected `n d` header".into() })?;
    if parts.next().is_some() {
        return Err(ConftError::Parse { line: 1, reason: "header has trailing tokens".into() });
    }
    if n == 0 {
        return Err(ConftError::EmptyDomain(format!("{} declares 0 samples", path.display())));
    }

    let mut raw: Vec<(Vec<f64>, i64)> = Vec::with_capacity(n);
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != dim + 1 {
            return Err(ConftError::Parse {
                line: line_no,
                reason: format!("expected {} values + class id, got {} tokens", dim, tokens.len()),
            });
        }
        let mut x = Vec::with_capacity(dim);
        for t in &tokens[..dim] {
            x.push(t.parse::<f64>().map_err(|e| ConftError::Parse {
                line: line_no,
                reason: format!("bad float {t:?}: {e}"),
            })?);
        }
        let y: i64 = tokens[dim].parse().map_err(|e| ConftError::Parse {
            line: line_no,
            reason: format!("bad class id {:?}: {e}", tokens[dim]),
        })?;
        if y < UNLABELLED {
            return Err(ConftError::Parse {
                line: line_no,
                reason: format!("class id must be >= -1, got {y}"),
            });
        }
        raw.push((x, y));
    }
    if raw.len() != n {
        return Err(ConftError::Parse {
            line: raw.len() + 1,
            reason: format!("header declares {n} samples, found {}", raw.len()),
        });
    }
    let unlabelled_id = raw
        .iter()
        .filter(|(_, y)| *y >= 0)
        .map(|(_, y)| *y as usize + 1)
        .max()
        .unwrap_or(0);
    let samples = raw
        .into_iter()
        .map(|(x, y)| (x, if y == UNLABELLED { unlabelled_id } else { y as usize }))
        .collect();
    Ok(EmbeddingDomain {
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "domain".into()),
        samples,
        dim,
    })
}
