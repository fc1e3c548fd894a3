//! Adaptive patch selection: uniform index sampling, exclusion-aware
//! attention top-k, their union, and the (k_u, k_a) grid search.
//!
//! Indices are 0-based throughout; the uniform rule is the 0-based
//! translation `index_m = ⌊(m−1)·n/k_u⌋` for `m = 1..=k_u`, taken over the
//! slide's stored raster order.

use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{attention_weights, ModelBundle};
use crate::numerics::Tensor;

/// How many patches each strategy contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionConfig {
    pub k_u: usize,
    pub k_a: usize,
}

impl SelectionConfig {
    pub fn new(k_u: usize, k_a: usize) -> Result<Self> {
        if k_u + k_a == 0 {
            return Err(Error::invalid("selection needs k_u + k_a >= 1".to_string()));
        }
        Ok(SelectionConfig { k_u, k_a })
    }

    pub fn total(&self) -> usize {
        self.k_u + self.k_a
    }
}

/// Outcome of one selection: the uniform set (sorted ascending), the
/// attention set (descending score order), and their union sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionResult {
    pub uniform: Vec<usize>,
    pub attention: Vec<usize>,
    pub combined: Vec<usize>,
    pub n_total: usize,
}

impl SelectionResult {
    /// `min(k_u, n) + min(k_a, n − min(k_u, n))`: the clamped selection size.
    pub fn expected_len(n: usize, cfg: SelectionConfig) -> usize {
        let u = cfg.k_u.min(n);
        u + cfg.k_a.min(n - u)
    }

    pub fn covers_all(&self) -> bool {
        self.combined.len() == self.n_total
    }
}

/// Evenly spaced indices over `[0, n)`: `⌊(m−1)·n/k_u⌋` for `m = 1..=k_u`.
/// `k_u > n` clamps to all indices; `k_u = 0` yields the empty set.
pub fn uniform_indices(n: usize, k_u: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("uniform_indices over empty slide".to_string()));
    }
    if k_u == 0 {
        return Ok(Vec::new());
    }
    if k_u >= n {
        return Ok((0..n).collect());
    }
    Ok((0..k_u)
        .map(|m| (m as u64 * n as u64 / k_u as u64) as usize)
        .collect())
}

/// The `k_a` highest-scoring indices outside `excluded`, in descending score
/// order with ties broken by the lower index. Clamps when fewer candidates
/// remain.
pub fn attention_topk(scores: &[f64], excluded: &[usize], k_a: usize) -> Result<Vec<usize>> {
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attention scores".to_string()));
    }
    let n = scores.len();
    let mut excluded_mask = vec![false; n];
    for &i in excluded {
        if i >= n {
            return Err(Error::invalid(format!("excluded index {i} out of range {n}")));
        }
        excluded_mask[i] = true;
    }
    if k_a == 0 {
        return Ok(Vec::new());
    }
    let mut candidates: Vec<usize> = (0..n).filter(|&i| !excluded_mask[i]).collect();
    candidates.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    candidates.truncate(k_a);
    Ok(candidates)
}

/// Full hybrid selection: uniform first, then attention top-k over the
/// remainder. `scores` must cover all `n` patches whenever `k_a > 0`; for
/// pure uniform configs it may be empty because the scorer is never invoked
/// on that path.
pub fn select(n: usize, scores: &[f64], cfg: SelectionConfig) -> Result<SelectionResult> {
    if cfg.k_a > 0 && scores.len() != n {
        return Err(Error::shape(format!(
            "select: {} scores for {n} patches",
            scores.len()
        )));
    }
    let uniform = uniform_indices(n, cfg.k_u)?;
    let attention = if cfg.k_a > 0 {
        attention_topk(scores, &uniform, cfg.k_a)?
    } else {
        Vec::new()
    };
    let mut combined: Vec<usize> = uniform.iter().chain(&attention).copied().collect();
    combined.sort_unstable();
    debug_assert!(combined.windows(2).all(|w| w[0] < w[1]), "duplicate index");
    Ok(SelectionResult {
        uniform,
        attention,
        combined,
        n_total: n,
    })
}

/// One validation slide as the grid search consumes it: full embeddings for
/// every patch plus the scorer's raw attention estimates, both precomputed.
#[derive(Debug, Clone)]
pub struct SlideFeatures {
    pub slide_id: String,
    pub label: usize,
    /// `[n × output_dim]` full-path embedding of every patch.
    pub embeddings: Tensor,
    /// Raw scoring-network output per patch; empty only if no scorer exists.
    pub scores: Vec<f64>,
}

impl SlideFeatures {
    pub fn n_patches(&self) -> usize {
        self.embeddings.rows()
    }
}

/// MIL class probabilities restricted to a selected subset of the cached
/// embeddings.
pub fn predict_on_selection(
    slide: &SlideFeatures,
    selection: &SelectionResult,
    bundle: &ModelBundle,
) -> Result<Vec<f64>> {
    let head = bundle.abmil()?;
    let d = slide.embeddings.cols();
    let mut bag = Tensor::zeros(vec![selection.combined.len(), d]);
    for (row, &idx) in selection.combined.iter().enumerate() {
        bag.row_mut(row).copy_from_slice(slide.embeddings.row(idx));
    }
    let out = head.forward(&bag)?;
    Ok(attention_weights(&out.logits).into_data())
}

/// Default (k_u, k_a) grid; mirrors the configurations observed in practice,
/// filtered to k_u + k_a ≥ 1.
pub fn default_grid() -> Vec<SelectionConfig> {
    let k_us = [0usize, 950, 1000, 1900, 1950, 2000, 2900, 3000, 3900, 3950, 4000];
    let k_as = [0usize, 50, 100, 1000];
    let mut grid = Vec::new();
    for &k_u in &k_us {
        for &k_a in &k_as {
            if k_u + k_a >= 1 {
                grid.push(SelectionConfig { k_u, k_a });
            }
        }
    }
    grid
}

/// Grid search over selection configs: evaluates validation Macro-AUC of the
/// selective pipeline for every candidate and returns the winner. Ties go to
/// the smaller budget k_u + k_a, then to the larger k_u (cheaper and more
/// coverage-biased).
pub fn grid_search(
    validation: &[SlideFeatures],
    grid: &[SelectionConfig],
    bundle: &ModelBundle,
) -> Result<SelectionConfig> {
    if validation.is_empty() {
        return Err(Error::invalid("grid_search needs a validation set".to_string()));
    }
    if grid.is_empty() {
        return Err(Error::invalid("grid_search needs a non-empty grid".to_string()));
    }
    let labels: Vec<usize> = validation.iter().map(|s| s.label).collect();
    let mut best: Option<(f64, SelectionConfig)> = None;
    for &cfg in grid {
        let mut rows = Vec::with_capacity(validation.len());
        for slide in validation {
            let sel = select(slide.n_patches(), &slide.scores, cfg)?;
            rows.push(predict_on_selection(slide, &sel, bundle)?);
        }
        let n_classes = rows[0].len();
        let score_matrix = Tensor::new(
            vec![rows.len(), n_classes],
            rows.into_iter().flatten().collect(),
        )?;
        let auc = metrics::macro_auc(&labels, &score_matrix)?;
        let better = match &best {
            None => true,
            Some((best_auc, best_cfg)) => match auc.total_cmp(best_auc) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => match cfg.total().cmp(&best_cfg.total()) {
                    std::cmp::Ordering::Less => true,
                    std::cmp::Ordering::Greater => false,
                    std::cmp::Ordering::Equal => cfg.k_u > best_cfg.k_u,
                },
            },
        };
        if better {
            best = Some((auc, cfg));
        }
    }
    Ok(best.expect("non-empty grid").1)
}
