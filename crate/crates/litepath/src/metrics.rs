//! Deployability metrics: Macro-AUC with case-level bootstrap confidence
//! intervals, CI-based non-inferiority testing, the D-Score, per-cohort
//! ranking scores, and AUC retention.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};

/// Macro-AUC point estimate with a percentile-bootstrap interval.
#[derive(Debug, Clone, PartialEq)]
pub struct AucResult {
    pub macro_auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_bootstrap: usize,
}

/// Inputs for the D-Score: one AUC and one mean slide-level FLOPs figure per
/// model, plus the accuracy weight (0.9 by default).
#[derive(Debug, Clone)]
pub struct DScoreInput {
    pub aucs: Vec<f64>,
    pub flops: Vec<f64>,
    pub alpha: f64,
}

impl DScoreInput {
    pub fn new(aucs: Vec<f64>, flops: Vec<f64>) -> Self {
        DScoreInput {
            aucs,
            flops,
            alpha: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonInferiorityResult {
    pub mean_diff: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub margin: f64,
    pub pass: bool,
}

/// Default non-inferiority margin: the selective pipeline passes when the
/// lower 95% bound of its AUC difference stays above −2.5%.
pub const NONINFERIORITY_MARGIN: f64 = -0.025;

/// One scored slide: per-class probability scores plus the case the slide
/// belongs to (the bootstrap resampling unit).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub slide_id: String,
    pub case_id: String,
    pub label: usize,
    pub scores: Vec<f64>,
}

/// One-vs-rest AUC of a single class given per-slide scores for that class.
/// Rank-based (Mann-Whitney) with average ranks, so tied scores contribute
/// one half per tied pair, matching the O(n²) pairwise definition exactly.
fn binary_auc(labels: &[bool], scores: &[f64]) -> f64 {
    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank for the tie group [i, j]
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = n - n_pos;
    debug_assert!(n_pos > 0 && n_neg > 0);
    let rank_sum: f64 = (0..n).filter(|&i| labels[i]).map(|i| ranks[i]).sum();
    (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64)
}

/// Macro-AUC with the per-class detail: one-vs-rest AUC for every class that
/// has both positives and negatives, averaged arithmetically. Classes that
/// cannot be scored are reported in `skipped`.
pub fn macro_auc_detailed(labels: &[usize], scores: &Tensor) -> Result<(f64, Vec<Option<f64>>, Vec<usize>)> {
    if labels.len() != scores.rows() {
        return Err(Error::shape(format!(
            "{} labels vs {} score rows",
            labels.len(),
            scores.rows()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Metric("empty score table".to_string()));
    }
    scores.check_finite("macro_auc scores")?;
    let n_classes = scores.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Metric(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    let mut per_class = vec![None; n_classes];
    let mut skipped = Vec::new();
    let mut sum = 0.0;
    let mut scored = 0usize;
    for c in 0..n_classes {
        let mask: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let pos = mask.iter().filter(|&&m| m).count();
        if pos == 0 || pos == labels.len() {
            if pos > 0 {
                skipped.push(c);
            }
            continue;
        }
        let col: Vec<f64> = (0..labels.len()).map(|i| scores.get2(i, c)).collect();
        let auc = binary_auc(&mask, &col);
        per_class[c] = Some(auc);
        sum += auc;
        scored += 1;
    }
    if scored < 2 && n_classes > 2 || scored == 0 {
        return Err(Error::Metric(format!(
            "fewer than 2 scorable classes ({scored} scored, skipped {skipped:?})"
        )));
    }
    // binary tasks are one scorable problem scored symmetrically
    if scored == 1 && n_classes == 2 {
        return Err(Error::Metric("binary task with a single present class".to_string()));
    }
    Ok((sum / scored as f64, per_class, skipped))
}

/// Mean one-vs-rest AUC across scorable classes; ties contribute 0.5.
pub fn macro_auc(labels: &[usize], scores: &Tensor) -> Result<f64> {
    macro_auc_detailed(labels, scores).map(|(v, _, _)| v)
}

/// Linear-interpolation percentile of a sample (q in [0, 1]).
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let pos = q * (m - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= m {
        sorted[m - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

fn group_cases(rows: &[ScoreRow]) -> Vec<Vec<usize>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let e = groups.entry(&r.case_id).or_insert_with(|| {
            order.push(&r.case_id);
            Vec::new()
        });
        e.push(i);
    }
    order.into_iter().map(|c| groups[c].clone()).collect()
}

/// Percentile bootstrap over case-level resamples. Statistics that fail on a
/// degenerate resample (e.g. a single-class draw) are skipped and redrawn,
/// up to 10× `n_rep` attempts. Deterministic per seed: attempt `k` always
/// uses the substream `seed ⊕ k`.
pub fn bootstrap_ci<F>(rows: &[ScoreRow], statistic: F, n_rep: usize, seed: u64) -> Result<(f64, f64)>
where
    F: Fn(&[ScoreRow]) -> Result<f64>,
{
    let samples = bootstrap_samples(rows, statistic, n_rep, seed)?;
    let mut sorted = samples;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite statistic"));
    Ok((percentile(&sorted, 0.025), percentile(&sorted, 0.975)))
}

/// The raw replicate values behind [`bootstrap_ci`], for procedures that need
/// the whole distribution (non-inferiority works on AUC differences).
pub fn bootstrap_samples<F>(
    rows: &[ScoreRow],
    statistic: F,
    n_rep: usize,
    seed: u64,
) -> Result<Vec<f64>>
where
    F: Fn(&[ScoreRow]) -> Result<f64>,
{
    let cases = group_cases(rows);
    if cases.len() < 2 {
        return Err(Error::Metric(format!(
            "bootstrap needs >= 2 cases, got {}",
            cases.len()
        )));
    }
    let master = SeededRng::new(seed);
    let mut samples = Vec::with_capacity(n_rep);
    let mut attempt = 0u64;
    let max_attempts = (n_rep as u64) * 10;
    while samples.len() < n_rep {
        if attempt >= max_attempts {
            return Err(Error::Metric(format!(
                "bootstrap exhausted {max_attempts} attempts with {} successes",
                samples.len()
            )));
        }
        let mut rng = master.derive(attempt);
        attempt += 1;
        let mut resample = Vec::with_capacity(rows.len());
        for _ in 0..cases.len() {
            let case = &cases[rng.next_below(cases.len())];
            for &i in case {
                resample.push(rows[i].clone());
            }
        }
        match statistic(&resample) {
            Ok(v) if v.is_finite() => samples.push(v),
            Ok(_) | Err(Error::Metric(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(samples)
}

/// Macro-AUC statistic over a set of score rows.
pub fn macro_auc_of_rows(rows: &[ScoreRow]) -> Result<f64> {
    let labels: Vec<usize> = rows.iter().map(|r| r.label).collect();
    let n_classes = rows.first().map(|r| r.scores.len()).unwrap_or(0);
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.scores.iter().copied()).collect();
    macro_auc(&labels, &Tensor::new(vec![rows.len(), n_classes], flat)?)
}

/// Point estimate plus percentile CI, with the interval clamped to contain
/// the point estimate.
pub fn auc_with_ci(rows: &[ScoreRow], n_rep: usize, seed: u64) -> Result<AucResult> {
    let point = macro_auc_of_rows(rows)?;
    let (lo, hi) = bootstrap_ci(rows, macro_auc_of_rows, n_rep, seed)?;
    Ok(AucResult {
        macro_auc: point,
        ci_low: lo.min(point),
        ci_high: hi.max(point),
        n_bootstrap: n_rep,
    })
}

/// Paired bootstrap of AUC differences (pipeline A − pipeline B): each
/// replicate resamples cases once and scores both tables on the same draw.
/// The two tables must cover the same slides in the same order.
pub fn paired_auc_diffs(
    rows_a: &[ScoreRow],
    rows_b: &[ScoreRow],
    n_rep: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if rows_a.len() != rows_b.len() {
        return Err(Error::Metric("paired tables differ in length".to_string()));
    }
    for (a, b) in rows_a.iter().zip(rows_b) {
        if a.slide_id != b.slide_id || a.case_id != b.case_id || a.label != b.label {
            return Err(Error::Metric(format!(
                "paired tables disagree on slide {} vs {}",
                a.slide_id, b.slide_id
            )));
        }
    }
    let paired: Vec<ScoreRow> = rows_a.to_vec();
    let by_slide: BTreeMap<&str, &ScoreRow> =
        rows_b.iter().map(|r| (r.slide_id.as_str(), r)).collect();
    let statistic = move |resample: &[ScoreRow]| -> Result<f64> {
        let auc_a = macro_auc_of_rows(resample)?;
        let resample_b: Vec<ScoreRow> = resample
            .iter()
            .map(|r| (*by_slide.get(r.slide_id.as_str()).expect("aligned tables")).clone())
            .collect();
        let auc_b = macro_auc_of_rows(&resample_b)?;
        Ok(auc_a - auc_b)
    };
    bootstrap_samples(&paired, statistic, n_rep, seed)
}

/// CI-based non-inferiority: pass iff the 2.5th percentile of the difference
/// distribution exceeds the margin.
pub fn noninferiority(diff_samples: &[f64], margin: f64) -> Result<NonInferiorityResult> {
    if diff_samples.len() < 100 {
        return Err(Error::Metric(format!(
            "non-inferiority needs >= 100 samples, got {}",
            diff_samples.len()
        )));
    }
    if diff_samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("non-inferiority samples".to_string()));
    }
    let mut sorted = diff_samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ci_low = percentile(&sorted, 0.025);
    let ci_high = percentile(&sorted, 0.975);
    // summed in sorted order so the result is independent of sample order
    let mean_diff = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Ok(NonInferiorityResult {
        mean_diff,
        ci_low,
        ci_high,
        margin,
        pass: ci_low > margin,
    })
}

/// Lower-of-two-middles median: for even counts the smaller central element
/// is returned, so the median is always a real model's FLOPs figure and that
/// model's normalized score is exactly 0.5.
fn median_lower(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[(v.len() - 1) / 2]
}

/// D-Score per model: `d_i = ā_i^α · f̄_i^(1−α)` with min-max normalized AUC
/// and sigmoid-normalized log-FLOPs centred at the median.
pub fn dscore(input: &DScoreInput) -> Result<Vec<f64>> {
    let m = input.aucs.len();
    if m < 2 || input.flops.len() != m {
        return Err(Error::Metric(format!(
            "dscore needs >= 2 models with matching FLOPs, got {m} aucs and {} flops",
            input.flops.len()
        )));
    }
    if !(0.0..=1.0).contains(&input.alpha) {
        return Err(Error::Metric(format!("alpha {} outside [0,1]", input.alpha)));
    }
    if input.flops.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::Metric("FLOPs must be positive".to_string()));
    }
    let (min_a, max_a) = input
        .aucs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| {
            (lo.min(a), hi.max(a))
        });
    if min_a == max_a {
        return Err(Error::Metric(
            "all AUCs equal: min-max normalization is degenerate, D-Score undefined".to_string(),
        ));
    }
    let log_t = libm::log(median_lower(&input.flops));
    Ok(input
        .aucs
        .iter()
        .zip(&input.flops)
        .map(|(&a, &f)| {
            let a_norm = (a - min_a) / (max_a - min_a);
            let f_norm = 1.0 - 1.0 / (1.0 + libm::exp(-(libm::log(f) - log_t)));
            libm::pow(a_norm, input.alpha) * libm::pow(f_norm, 1.0 - input.alpha)
        })
        .collect())
}

/// Mean rank per model across cohorts; rank 1 is the best AUC in a cohort and
/// ties share the mean of their positions (midrank convention).
pub fn ranking_scores(per_cohort_aucs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if per_cohort_aucs.is_empty() {
        return Err(Error::Metric("no cohorts".to_string()));
    }
    let n_models = per_cohort_aucs[0].len();
    if n_models == 0 {
        return Err(Error::Metric("no models".to_string()));
    }
    let mut sums = vec![0.0; n_models];
    for (ci, cohort) in per_cohort_aucs.iter().enumerate() {
        if cohort.len() != n_models {
            return Err(Error::Metric(format!(
                "cohort {ci} has {} entries, expected {n_models}",
                cohort.len()
            )));
        }
        let mut order: Vec<usize> = (0..n_models).collect();
        order.sort_by(|&a, &b| cohort[b].partial_cmp(&cohort[a]).expect("finite auc"));
        let mut i = 0;
        while i < n_models {
            let mut j = i;
            while j + 1 < n_models && cohort[order[j + 1]] == cohort[order[i]] {
                j += 1;
            }
            let midrank = (i + j) as f64 / 2.0 + 1.0;
            for &m in &order[i..=j] {
                sums[m] += midrank;
            }
            i = j + 1;
        }
    }
    let c = per_cohort_aucs.len() as f64;
    Ok(sums.into_iter().map(|s| s / c).collect())
}

/// Percentage of the reference AUC the model retains; can exceed 100.
pub fn auc_retention(model_auc: f64, reference_auc: f64) -> Result<f64> {
    if !(reference_auc > 0.0) {
        return Err(Error::Metric(format!(
            "reference AUC must be positive, got {reference_auc}"
        )));
    }
    Ok(100.0 * model_auc / reference_auc)
}

/// Spearman rank correlation with midrank ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Metric("spearman needs two equal series of length >= 2".to_string()));
    }
    let rank = |xs: &[f64]| -> Vec<f64> {
        let n = xs.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&p, &q| xs[p].partial_cmp(&xs[q]).expect("finite"));
        let mut ranks = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                ranks[idx] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let ra = rank(a);
    let rb = rank(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - mean;
        let db = rb[i] - mean;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::Metric("constant series has no rank correlation".to_string()));
    }
    Ok(cov / libm::sqrt(var_a * var_b))
}

/// Reads a delimited score table: header `slide_id\tcase_id\tlabel\t
/// score_class_0..k`, one row per slide. Lines starting with `#` are
/// metadata stamps and are skipped.
pub fn read_score_table(path: &Path) -> Result<Vec<ScoreRow>> {
    let file = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    let mut saw_header = false;
    let mut n_scores = 0usize;
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !saw_header {
            if fields.len() < 4 || fields[0] != "slide_id" {
                return Err(Error::Format(format!("bad score table header: {line}")));
            }
            n_scores = fields.len() - 3;
            saw_header = true;
            continue;
        }
        if fields.len() != n_scores + 3 {
            return Err(Error::Format(format!("bad score row: {line}")));
        }
        let label: usize = fields[2]
            .parse()
            .map_err(|_| Error::Format(format!("bad label in {line}")))?;
        let scores = fields[3..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::Format(format!("bad score in {line}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(ScoreRow {
            slide_id: fields[0].to_string(),
            case_id: fields[1].to_string(),
            label,
            scores,
        });
    }
    if rows.is_empty() {
        return Err(Error::Format("empty score table".to_string()));
    }
    Ok(rows)
}

/// Writes a score table with provenance stamp lines. `stamps` are emitted as
/// leading `# key=value` comments.
pub fn write_score_table(path: &Path, rows: &[ScoreRow], stamps: &[(String, String)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let n_scores = rows.first().map(|r| r.scores.len()).unwrap_or(0);
    let mut out = String::new();
    for (k, v) in stamps {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out.push_str("slide_id\tcase_id\tlabel");
    for c in 0..n_scores {
        out.push_str(&format!("\tscore_class_{c}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}", r.slide_id, r.case_id, r.label));
        for s in &r.scores {
            out.push_str(&format!("\t{s:.17e}"));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores2(pos: &[f64]) -> Tensor {
        // two-class score matrix from positive-class probabilities
        let data: Vec<f64> = pos.iter().flat_map(|&p| [1.0 - p, p]).collect();
        Tensor::new(vec![pos.len(), 2], data).unwrap()
    }

    #[test]
    fn binary_hand_example() {
        // labels [0,0,1,1], positive scores [0.1,0.4,0.35,0.8] → 0.75
        let auc = macro_auc(&[0, 0, 1, 1], &scores2(&[0.1, 0.4, 0.35, 0.8])).unwrap();
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_is_one() {
        let auc = macro_auc(&[0, 0, 1, 1], &scores2(&[0.1, 0.2, 0.8, 0.9])).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn all_ties_give_half() {
        let auc = macro_auc(&[0, 1, 0, 1], &scores2(&[0.5, 0.5, 0.5, 0.5])).unwrap();
        assert!((auc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn matches_pairwise_oracle() {
        use crate::numerics::SeededRng;
        let mut rng = SeededRng::new(31);
        for _ in 0..200 {
            let n = 5 + rng.next_below(195);
            let n_classes = 2 + rng.next_below(3);
            let labels: Vec<usize> = (0..n).map(|_| rng.next_below(n_classes)).collect();
            // quantized scores force plenty of ties
            let flat: Vec<f64> = (0..n * n_classes)
                .map(|_| (rng.next_f64() * 8.0).floor() / 8.0)
                .collect();
            let scores = Tensor::new(vec![n, n_classes], flat).unwrap();
            let fast = macro_auc(&labels, &scores);
            let slow = pairwise_macro_auc(&labels, &scores);
            match (fast, slow) {
                (Ok(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
                (Err(_), None) => {}
                (a, b) => panic!("disagreement: {a:?} vs {b:?}"),
            }
        }
    }

    /// O(n²) oracle: mean over scorable classes of concordant-pair fractions.
    fn pairwise_macro_auc(labels: &[usize], scores: &Tensor) -> Option<f64> {
        let n = labels.len();
        let n_classes = scores.cols();
        let mut sum = 0.0;
        let mut scored = 0;
        for c in 0..n_classes {
            let pos: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            let neg: Vec<usize> = (0..n).filter(|&i| labels[i] != c).collect();
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let mut acc = 0.0;
            for &p in &pos {
                for &q in &neg {
                    let sp = scores.get2(p, c);
                    let sq = scores.get2(q, c);
                    acc += if sp > sq {
                        1.0
                    } else if sp == sq {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
            sum += acc / (pos.len() * neg.len()) as f64;
            scored += 1;
        }
        if scored == 0 || (n_classes == 2 && scored < 2) {
            None
        } else {
            Some(sum / scored as f64)
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        use crate::numerics::SeededRng;
        let mut rng = SeededRng::new(5);
        let labels: Vec<usize> = (0..50).map(|_| rng.next_below(2)).collect();
        let pos: Vec<f64> = (0..50).map(|_| rng.next_f64()).collect();
        let a = macro_auc(&labels, &scores2(&pos)).unwrap();
        let transformed: Vec<f64> = pos.iter().map(|&p| libm::exp(3.0 * p)).collect();
        let flat: Vec<f64> = transformed.iter().flat_map(|&p| [-p, p]).collect();
        let b = macro_auc(&labels, &Tensor::new(vec![50, 2], flat).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    fn toy_rows(n: usize, seed: u64) -> Vec<ScoreRow> {
        use crate::numerics::SeededRng;
        let mut rng = SeededRng::new(seed);
        (0..n)
            .map(|i| {
                let label = rng.next_below(2);
                let p = 0.3 * rng.normal() + label as f64 * 0.6 + 0.2;
                ScoreRow {
                    slide_id: format!("s{i}"),
                    case_id: format!("c{}", i / 2),
                    label,
                    scores: vec![1.0 - p, p],
                }
            })
            .collect()
    }

    #[test]
    fn bootstrap_constant_statistic_zero_width() {
        let rows = toy_rows(20, 1);
        let (lo, hi) = bootstrap_ci(&rows, |_| Ok(0.42), 200, 7).unwrap();
        assert_eq!((lo, hi), (0.42, 0.42));
    }

    #[test]
    fn bootstrap_deterministic_per_seed() {
        let rows = toy_rows(30, 2);
        let a = bootstrap_ci(&rows, macro_auc_of_rows, 100, 3).unwrap();
        let b = bootstrap_ci(&rows, macro_auc_of_rows, 100, 3).unwrap();
        let c = bootstrap_ci(&rows, macro_auc_of_rows, 100, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn interval_contains_point_estimate_on_fuzz() {
        for seed in 0..100 {
            let rows = toy_rows(24, seed);
            if macro_auc_of_rows(&rows).is_err() {
                continue;
            }
            let res = auc_with_ci(&rows, 100, seed).unwrap();
            assert!(res.ci_low <= res.macro_auc && res.macro_auc <= res.ci_high);
        }
    }

    #[test]
    fn wider_samples_shrink_interval() {
        let mut widths = Vec::new();
        for &n in &[16usize, 64, 256] {
            let mut ws = Vec::new();
            for seed in 0..5 {
                let rows = toy_rows(n, 100 + seed);
                let r = auc_with_ci(&rows, 200, seed).unwrap();
                ws.push(r.ci_high - r.ci_low);
            }
            ws.sort_by(|a, b| a.partial_cmp(b).unwrap());
            widths.push(ws[2]);
        }
        assert!(widths[2] < widths[0], "median widths {widths:?}");
    }

    #[test]
    fn noninferiority_trivial_cases() {
        let zeros = vec![0.0; 200];
        let r = noninferiority(&zeros, NONINFERIORITY_MARGIN).unwrap();
        assert!(r.pass);
        let bad = vec![-0.05; 200];
        let r = noninferiority(&bad, NONINFERIORITY_MARGIN).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn noninferiority_positive_mean_can_fail() {
        // heavy spread around +0.001 that crosses the margin
        use crate::numerics::SeededRng;
        let mut rng = SeededRng::new(9);
        let diffs: Vec<f64> = (0..1000).map(|_| 0.001 + 0.05 * rng.normal()).collect();
        let r = noninferiority(&diffs, NONINFERIORITY_MARGIN).unwrap();
        assert!(r.mean_diff > 0.0);
        assert!(!r.pass, "ci_low {}", r.ci_low);
    }

    #[test]
    fn noninferiority_order_invariant() {
        use crate::numerics::SeededRng;
        let mut rng = SeededRng::new(10);
        let diffs: Vec<f64> = (0..300).map(|_| 0.01 * rng.normal()).collect();
        let mut shuffled = diffs.clone();
        rng.shuffle(&mut shuffled);
        assert_eq!(
            noninferiority(&diffs, -0.025).unwrap(),
            noninferiority(&shuffled, -0.025).unwrap()
        );
    }

    #[test]
    fn noninferiority_needs_enough_samples() {
        assert!(noninferiority(&[0.0; 99], -0.025).is_err());
    }

    #[test]
    fn dscore_worst_model_is_zero() {
        let input = DScoreInput::new(vec![0.9, 0.6, 0.8], vec![4.0e9, 4.0e9, 4.0e9]);
        let d = dscore(&input).unwrap();
        assert_eq!(d[1], 0.0);
    }

    #[test]
    fn dscore_best_at_median_flops() {
        // ā=1 at f=T ⇒ d = 0.5^0.1
        let input = DScoreInput::new(vec![0.9, 0.7, 0.8], vec![2.0e9, 1.0e9, 8.0e9]);
        let d = dscore(&input).unwrap();
        let expect = libm::pow(0.5, 0.1);
        assert!((d[0] - expect).abs() < 1e-12, "{} vs {expect}", d[0]);
        assert!((expect - 0.9330329915368074).abs() < 1e-12);
    }

    #[test]
    fn dscore_two_models_equal_flops() {
        let input = DScoreInput::new(vec![0.6, 0.8], vec![1e9, 1e9]);
        let d = dscore(&input).unwrap();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - libm::pow(0.5, 0.1)).abs() < 1e-12);
    }

    #[test]
    fn dscore_monotonicity_and_anchor() {
        let base = DScoreInput::new(vec![0.9, 0.7, 0.8], vec![2.0e9, 1.0e9, 8.0e9]);
        let d0 = dscore(&base).unwrap();
        // raising a non-extreme model's AUC cannot lower its score
        let mut up = base.clone();
        up.aucs[2] = 0.85;
        let d1 = dscore(&up).unwrap();
        assert!(d1[2] >= d0[2]);
        // raising FLOPs lowers the score, all else fixed
        let mut heavy = base.clone();
        heavy.flops[2] = 16.0e9;
        let d2 = dscore(&heavy).unwrap();
        assert!(d2[2] <= d0[2]);
    }

    #[test]
    fn dscore_degenerate_aucs_error() {
        let input = DScoreInput::new(vec![0.8, 0.8], vec![1e9, 2e9]);
        assert!(dscore(&input).is_err());
    }

    #[test]
    fn ranking_strictly_best_everywhere() {
        let table = vec![vec![0.9, 0.5, 0.7], vec![0.8, 0.6, 0.7]];
        let ranks = ranking_scores(&table).unwrap();
        assert_eq!(ranks[0], 1.0);
        assert_eq!(ranks[1], 3.0);
    }

    #[test]
    fn ranking_midrank_ties() {
        let table = vec![vec![0.9, 0.9]];
        let ranks = ranking_scores(&table).unwrap();
        assert_eq!(ranks, vec![1.5, 1.5]);
    }

    #[test]
    fn ranking_matches_hand_table() {
        // 3 models, 2 cohorts
        let table = vec![vec![0.7, 0.9, 0.8], vec![0.6, 0.6, 0.9]];
        // cohort 1 ranks: model0=3, model1=1, model2=2
        // cohort 2 ranks: model0=2.5, model1=2.5, model2=1
        let ranks = ranking_scores(&table).unwrap();
        assert_eq!(ranks, vec![2.75, 1.75, 1.5]);
    }

    #[test]
    fn retention_cases() {
        assert_eq!(auc_retention(0.8, 0.8).unwrap(), 100.0);
        assert_eq!(auc_retention(0.7, 0.8).unwrap(), 87.5);
        assert!(auc_retention(0.9, 0.8).unwrap() > 100.0);
        assert!(auc_retention(0.5, 0.0).is_err());
    }

    #[test]
    fn spearman_perfect_and_inverse() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [10.0, 20.0, 30.0, 40.0];
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &c).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_table_roundtrip() {
        let rows = toy_rows(8, 3);
        let dir = std::env::temp_dir().join("litepath_metrics_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("scores.tsv");
        write_score_table(&path, &rows, &[("seed".to_string(), "3".to_string())]).unwrap();
        let back = read_score_table(&path).unwrap();
        assert_eq!(rows, back);
        std::fs::remove_dir_all(&dir).ok();
    }
}
