//! Multi-label evaluation: rank-based AUC with midranks, macro/micro
//! precision-recall-F1, precision@k, and a paired approximate randomization
//! significance test.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    Usage(String),
    #[error("every label is degenerate; AUC is undefined")]
    AllLabelsDegenerate,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Prediction probabilities and gold assignments for a document set.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    probs: Vec<Vec<f64>>,
    gold: Vec<Vec<bool>>,
}

impl ScoreMatrix {
    pub fn new(probs: Vec<Vec<f64>>, gold: Vec<Vec<bool>>) -> Result<Self> {
        if probs.len() != gold.len() {
            return Err(MetricsError::Shape(format!(
                "{} probability rows vs {} gold rows",
                probs.len(),
                gold.len()
            )));
        }
        let width = probs.first().map_or(0, |r| r.len());
        for (i, (p, g)) in probs.iter().zip(&gold).enumerate() {
            if p.len() != width || g.len() != width {
                return Err(MetricsError::Shape(format!("row {i} has inconsistent width")));
            }
        }
        Ok(ScoreMatrix { probs, gold })
    }

    pub fn n_docs(&self) -> usize {
        self.probs.len()
    }

    pub fn n_labels(&self) -> usize {
        self.probs.first().map_or(0, |r| r.len())
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn gold(&self) -> &[Vec<bool>] {
        &self.gold
    }

    fn label_column(&self, l: usize) -> (Vec<f64>, Vec<bool>) {
        (
            self.probs.iter().map(|r| r[l]).collect(),
            self.gold.iter().map(|r| r[l]).collect(),
        )
    }
}

// ── AUC ─────────────────────────────────────────────────────────────────

/// Rank-based (Mann-Whitney) AUC with midranks for ties. Returns `None`
/// when the label has no positives or no negatives.
pub fn roc_auc_label(scores: &[f64], gold: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), gold.len());
    let n_pos = gold.iter().filter(|&&g| g).count();
    let n_neg = gold.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Midranks: tied scores share the average of their 1-based rank range.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if gold[k] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Some((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

#[derive(Debug, Clone, Serialize)]
pub struct AucSummary {
    pub macro_auc: f64,
    pub micro_auc: f64,
    pub per_label: Vec<Option<f64>>,
    /// Labels excluded from the macro average (no positives or no negatives).
    pub skipped: Vec<usize>,
}

/// Macro AUC over non-degenerate labels plus micro AUC over the flattened
/// (document, label) pairs.
pub fn aggregate_auc(m: &ScoreMatrix) -> Result<AucSummary> {
    let mut per_label = Vec::with_capacity(m.n_labels());
    let mut skipped = Vec::new();
    let mut sum = 0.0;
    let mut kept = 0usize;
    for l in 0..m.n_labels() {
        let (scores, gold) = m.label_column(l);
        match roc_auc_label(&scores, &gold) {
            Some(a) => {
                sum += a;
                kept += 1;
                per_label.push(Some(a));
            }
            None => {
                skipped.push(l);
                per_label.push(None);
            }
        }
    }
    if kept == 0 {
        return Err(MetricsError::AllLabelsDegenerate);
    }
    let flat_scores: Vec<f64> = m.probs.iter().flatten().copied().collect();
    let flat_gold: Vec<bool> = m.gold.iter().flatten().copied().collect();
    let micro = roc_auc_label(&flat_scores, &flat_gold).ok_or(MetricsError::AllLabelsDegenerate)?;
    Ok(AucSummary { macro_auc: sum / kept as f64, micro_auc: micro, per_label, skipped })
}

// ── Precision / recall / F1 ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Prf {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf { precision, recall, f1 }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PrfSummary {
    pub macro_avg: Prf,
    pub micro: Prf,
    pub per_label: Vec<Prf>,
}

/// Threshold the probabilities and count. Micro pools all decisions; macro
/// averages per-label metrics over every label (undefined ratios count 0).
pub fn prf1(m: &ScoreMatrix, threshold: f64) -> PrfSummary {
    let labels = m.n_labels();
    let mut tp = vec![0usize; labels];
    let mut fp = vec![0usize; labels];
    let mut fn_ = vec![0usize; labels];
    for (p_row, g_row) in m.probs.iter().zip(&m.gold) {
        for l in 0..labels {
            let pred = p_row[l] >= threshold;
            match (pred, g_row[l]) {
                (true, true) => tp[l] += 1,
                (true, false) => fp[l] += 1,
                (false, true) => fn_[l] += 1,
                (false, false) => {}
            }
        }
    }
    let per_label: Vec<Prf> = (0..labels).map(|l| Prf::from_counts(tp[l], fp[l], fn_[l])).collect();
    let macro_avg = Prf {
        precision: mean(per_label.iter().map(|p| p.precision)),
        recall: mean(per_label.iter().map(|p| p.recall)),
        f1: mean(per_label.iter().map(|p| p.f1)),
    };
    let micro = Prf::from_counts(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    PrfSummary { macro_avg, micro, per_label }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

// ── Precision @ k ───────────────────────────────────────────────────────

/// Mean over documents of the gold fraction among the k top-scored labels.
/// Score ties break toward the lower label index.
pub fn precision_at_k(m: &ScoreMatrix, k: usize) -> Result<f64> {
    if k == 0 || k > m.n_labels() {
        return Err(MetricsError::Usage(format!(
            "k = {k} must be in 1..={} (label count)",
            m.n_labels()
        )));
    }
    if m.n_docs() == 0 {
        return Err(MetricsError::Usage("empty score matrix".into()));
    }
    let mut total = 0.0;
    for (p_row, g_row) in m.probs.iter().zip(&m.gold) {
        let mut idx: Vec<usize> = (0..p_row.len()).collect();
        idx.sort_by(|&a, &b| p_row[b].partial_cmp(&p_row[a]).expect("finite scores").then(a.cmp(&b)));
        let hits = idx[..k].iter().filter(|&&l| g_row[l]).count();
        total += hits as f64 / k as f64;
    }
    Ok(total / m.n_docs() as f64)
}

// ── Approximate randomization test ──────────────────────────────────────

/// Metric compared by the paired significance test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PairedMetric {
    MicroF1,
    MacroF1,
    MicroAuc,
    MacroAuc,
}

impl PairedMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "micro_f1" | "micro-f1" => Ok(PairedMetric::MicroF1),
            "macro_f1" | "macro-f1" => Ok(PairedMetric::MacroF1),
            "micro_auc" | "micro-auc" => Ok(PairedMetric::MicroAuc),
            "macro_auc" | "macro-auc" => Ok(PairedMetric::MacroAuc),
            other => Err(MetricsError::Usage(format!("unknown metric {other:?}"))),
        }
    }

    pub fn eval(&self, m: &ScoreMatrix) -> f64 {
        match self {
            PairedMetric::MicroF1 => prf1(m, 0.5).micro.f1,
            PairedMetric::MacroF1 => prf1(m, 0.5).macro_avg.f1,
            PairedMetric::MicroAuc => aggregate_auc(m).map(|a| a.micro_auc).unwrap_or(0.5),
            PairedMetric::MacroAuc => aggregate_auc(m).map(|a| a.macro_auc).unwrap_or(0.5),
        }
    }
}

fn check_aligned(probs_a: &[Vec<f64>], probs_b: &[Vec<f64>], gold: &[Vec<bool>]) -> Result<()> {
    if probs_a.len() != probs_b.len() || probs_a.len() != gold.len() {
        return Err(MetricsError::Shape(format!(
            "systems predict {} and {} documents, gold has {}",
            probs_a.len(),
            probs_b.len(),
            gold.len()
        )));
    }
    for i in 0..probs_a.len() {
        if probs_a[i].len() != probs_b[i].len() || probs_a[i].len() != gold[i].len() {
            return Err(MetricsError::Shape(format!("document {i} rows differ in width")));
        }
    }
    Ok(())
}

fn swapped_delta(
    probs_a: &[Vec<f64>],
    probs_b: &[Vec<f64>],
    gold: &[Vec<bool>],
    swap: impl Fn(usize) -> bool,
    metric: PairedMetric,
) -> f64 {
    let n = probs_a.len();
    let mut pa = Vec::with_capacity(n);
    let mut pb = Vec::with_capacity(n);
    for i in 0..n {
        if swap(i) {
            pa.push(probs_b[i].clone());
            pb.push(probs_a[i].clone());
        } else {
            pa.push(probs_a[i].clone());
            pb.push(probs_b[i].clone());
        }
    }
    let ma = ScoreMatrix::new(pa, gold.to_vec()).expect("aligned");
    let mb = ScoreMatrix::new(pb, gold.to_vec()).expect("aligned");
    (metric.eval(&ma) - metric.eval(&mb)).abs()
}

/// Paired approximate randomization test: swap each document's two system
/// outputs with probability one half and count permuted deltas at least as
/// large as the observed one. p = (count + 1) / (n_iter + 1).
pub fn approx_randomization_test(
    probs_a: &[Vec<f64>],
    probs_b: &[Vec<f64>],
    gold: &[Vec<bool>],
    metric: PairedMetric,
    n_iter: usize,
    seed: u64,
) -> Result<f64> {
    check_aligned(probs_a, probs_b, gold)?;
    let delta_obs = swapped_delta(probs_a, probs_b, gold, |_| false, metric);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = probs_a.len();
    let mut exceed = 0usize;
    for _ in 0..n_iter {
        let flips: Vec<bool> = (0..n).map(|_| rng.gen_range(0..2u8) == 1).collect();
        let delta = swapped_delta(probs_a, probs_b, gold, |i| flips[i], metric);
        if delta >= delta_obs - 1e-15 {
            exceed += 1;
        }
    }
    Ok((exceed as f64 + 1.0) / (n_iter as f64 + 1.0))
}

/// Exact version over all 2^n swap patterns (test oracle for small n):
/// the plain proportion of patterns with delta >= observed.
pub fn exhaustive_randomization_test(
    probs_a: &[Vec<f64>],
    probs_b: &[Vec<f64>],
    gold: &[Vec<bool>],
    metric: PairedMetric,
) -> Result<f64> {
    check_aligned(probs_a, probs_b, gold)?;
    let n = probs_a.len();
    if n > 20 {
        return Err(MetricsError::Usage(format!("exhaustive enumeration over {n} documents is too large")));
    }
    let delta_obs = swapped_delta(probs_a, probs_b, gold, |_| false, metric);
    let mut exceed = 0usize;
    for pattern in 0u32..(1 << n) {
        let delta = swapped_delta(probs_a, probs_b, gold, |i| pattern >> i & 1 == 1, metric);
        if delta >= delta_obs - 1e-15 {
            exceed += 1;
        }
    }
    Ok(exceed as f64 / (1u64 << n) as f64)
}

// ── Aggregate report ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct LabelMetrics {
    pub label: String,
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub auc_macro: f64,
    pub auc_micro: f64,
    pub precision_macro: f64,
    pub precision_micro: f64,
    pub recall_macro: f64,
    pub recall_micro: f64,
    pub f1_macro: f64,
    pub f1_micro: f64,
    /// (k, value) for each requested k that fits the label count.
    pub precision_at: Vec<(usize, f64)>,
    pub per_label: Vec<LabelMetrics>,
    pub skipped_labels: Vec<String>,
    pub n_docs: usize,
}

impl MetricsReport {
    pub fn compute(m: &ScoreMatrix, threshold: f64, label_codes: &[String]) -> Result<MetricsReport> {
        let auc = aggregate_auc(m)?;
        let prf = prf1(m, threshold);
        let ks = [5usize, 8, 15];
        let mut precision_at = Vec::new();
        for k in ks {
            if k <= m.n_labels() {
                precision_at.push((k, precision_at_k(m, k)?));
            }
        }
        let name = |l: usize| {
            label_codes
                .get(l)
                .cloned()
                .unwrap_or_else(|| format!("label{l}"))
        };
        let per_label = (0..m.n_labels())
            .map(|l| LabelMetrics {
                label: name(l),
                auc: auc.per_label[l],
                precision: prf.per_label[l].precision,
                recall: prf.per_label[l].recall,
                f1: prf.per_label[l].f1,
            })
            .collect();
        Ok(MetricsReport {
            auc_macro: auc.macro_auc,
            auc_micro: auc.micro_auc,
            precision_macro: prf.macro_avg.precision,
            precision_micro: prf.micro.precision,
            recall_macro: prf.macro_avg.recall,
            recall_micro: prf.micro.recall,
            f1_macro: prf.macro_avg.f1,
            f1_micro: prf.micro.f1,
            precision_at,
            per_label,
            skipped_labels: auc.skipped.iter().map(|&l| name(l)).collect(),
            n_docs: m.n_docs(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned human-readable table. With `percent`, values print as
    /// percentages with one decimal, matching the usual reporting style.
    pub fn to_table(&self, percent: bool) -> String {
        let fmt = |v: f64| {
            if percent {
                format!("{:6.1}", v * 100.0)
            } else {
                format!("{v:6.4}")
            }
        };
        let mut out = String::new();
        out.push_str(&format!("documents evaluated: {}\n", self.n_docs));
        out.push_str("metric              macro   micro\n");
        out.push_str(&format!("AUC                {}  {}\n", fmt(self.auc_macro), fmt(self.auc_micro)));
        out.push_str(&format!("Precision          {}  {}\n", fmt(self.precision_macro), fmt(self.precision_micro)));
        out.push_str(&format!("Recall             {}  {}\n", fmt(self.recall_macro), fmt(self.recall_micro)));
        out.push_str(&format!("F1                 {}  {}\n", fmt(self.f1_macro), fmt(self.f1_micro)));
        for (k, v) in &self.precision_at {
            out.push_str(&format!("P@{k:<2}               {}\n", fmt(*v)));
        }
        if !self.skipped_labels.is_empty() {
            out.push_str(&format!("labels skipped for AUC: {}\n", self.skipped_labels.join(", ")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn matrix(probs: Vec<Vec<f64>>, gold: Vec<Vec<bool>>) -> ScoreMatrix {
        ScoreMatrix::new(probs, gold).unwrap()
    }

    /// O(n^2) pairwise AUC oracle: ties count one half.
    fn pairwise_auc(scores: &[f64], gold: &[bool]) -> Option<f64> {
        let pos: Vec<f64> = scores.iter().zip(gold).filter(|(_, &g)| g).map(|(&s, _)| s).collect();
        let neg: Vec<f64> = scores.iter().zip(gold).filter(|(_, &g)| !g).map(|(&s, _)| s).collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for &p in &pos {
            for &n in &neg {
                total += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Some(total / (pos.len() * neg.len()) as f64)
    }

    #[test]
    fn auc_separated_and_tied() {
        assert_eq!(roc_auc_label(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]), Some(1.0));
        assert_eq!(roc_auc_label(&[0.5, 0.5, 0.5, 0.5], &[true, false, true, false]), Some(0.5));
        assert_eq!(roc_auc_label(&[0.5, 0.4], &[true, true]), None);
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.gen_range(2..=50);
            // Coarse grid scores force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
            let mut gold: Vec<bool> = (0..n).map(|_| rng.gen_range(0..2) == 1).collect();
            gold[0] = true;
            if n > 1 {
                gold[1] = false;
            }
            let got = roc_auc_label(&scores, &gold);
            let want = pairwise_auc(&scores, &gold);
            match (got, want) {
                (Some(g), Some(w)) => assert!((g - w).abs() < 1e-12, "{g} vs {w}"),
                (a, b) => assert_eq!(a.is_none(), b.is_none()),
            }
        }
    }

    #[test]
    fn auc_monotone_transform_invariant_and_complement() {
        let scores = vec![0.11, 0.52, 0.34, 0.97, 0.03, 0.71];
        let gold = vec![false, true, false, true, false, true];
        let base = roc_auc_label(&scores, &gold).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&s| (5.0 * s).tanh()).collect();
        assert!((roc_auc_label(&squashed, &gold).unwrap() - base).abs() < 1e-12);
        let negated: Vec<f64> = scores.iter().map(|&s| -s).collect();
        assert!((roc_auc_label(&negated, &gold).unwrap() + base - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_macro_micro() {
        // label 0 perfectly separated (AUC 1), label 1 constant scores with
        // both classes (AUC 0.5), label 2 degenerate (skipped).
        let m = matrix(
            vec![vec![0.9, 0.5, 0.1], vec![0.1, 0.5, 0.2]],
            vec![vec![true, true, false], vec![false, false, false]],
        );
        let s = aggregate_auc(&m).unwrap();
        assert!((s.macro_auc - 0.75).abs() < 1e-12);
        assert_eq!(s.skipped, vec![2]);
        // micro over flattened pairs matches the pairwise oracle
        let flat_scores: Vec<f64> = m.probs().iter().flatten().copied().collect();
        let flat_gold: Vec<bool> = m.gold().iter().flatten().copied().collect();
        assert!((s.micro_auc - pairwise_auc(&flat_scores, &flat_gold).unwrap()).abs() < 1e-12);

        let single = matrix(vec![vec![0.9], vec![0.1]], vec![vec![true], vec![false]]);
        let s1 = aggregate_auc(&single).unwrap();
        assert_eq!(s1.macro_auc, s1.micro_auc);

        let degenerate = matrix(vec![vec![0.9]], vec![vec![true]]);
        assert!(matches!(aggregate_auc(&degenerate), Err(MetricsError::AllLabelsDegenerate)));
    }

    #[test]
    fn prf_perfect_and_all_negative() {
        let m = matrix(
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![vec![true, false], vec![false, true]],
        );
        let s = prf1(&m, 0.5);
        assert_eq!(s.micro.f1, 1.0);
        assert_eq!(s.macro_avg.f1, 1.0);

        let m2 = matrix(vec![vec![0.1, 0.1]], vec![vec![true, true]]);
        let s2 = prf1(&m2, 0.5);
        assert_eq!(s2.micro.recall, 0.0);
        assert_eq!(s2.micro.f1, 0.0);
    }

    #[test]
    fn prf_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let docs = 20;
        let labels = 5;
        let probs: Vec<Vec<f64>> = (0..docs)
            .map(|_| (0..labels).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let gold: Vec<Vec<bool>> = (0..docs)
            .map(|_| (0..labels).map(|_| rng.gen_range(0..2) == 1).collect())
            .collect();
        let m = matrix(probs.clone(), gold.clone());
        let s = prf1(&m, 0.5);

        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for d in 0..docs {
            for l in 0..labels {
                let pred = probs[d][l] >= 0.5;
                if pred && gold[d][l] {
                    tp += 1;
                } else if pred {
                    fp += 1;
                } else if gold[d][l] {
                    fn_ += 1;
                }
            }
        }
        let p = tp as f64 / (tp + fp) as f64;
        let r = tp as f64 / (tp + fn_) as f64;
        assert_eq!(s.micro.precision, p);
        assert_eq!(s.micro.recall, r);
        assert_eq!(s.micro.f1, 2.0 * p * r / (p + r));
    }

    #[test]
    fn p_at_k_basics() {
        // doc 0: all top-2 gold; doc 1: no gold at all.
        let m = matrix(
            vec![vec![0.9, 0.8, 0.1], vec![0.9, 0.8, 0.7]],
            vec![vec![true, true, false], vec![false, false, false]],
        );
        assert_eq!(precision_at_k(&m, 2).unwrap(), 0.5);
        assert!(precision_at_k(&m, 4).is_err());
        assert!(precision_at_k(&m, 0).is_err());
    }

    #[test]
    fn p_at_k_matches_sort_oracle_and_tie_break() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..30 {
            let labels = rng.gen_range(3..8);
            let docs = rng.gen_range(1..6);
            let probs: Vec<Vec<f64>> = (0..docs)
                .map(|_| (0..labels).map(|_| (rng.gen_range(0..4) as f64) / 4.0).collect())
                .collect();
            let gold: Vec<Vec<bool>> = (0..docs)
                .map(|_| (0..labels).map(|_| rng.gen_range(0..2) == 1).collect())
                .collect();
            let k = rng.gen_range(1..=labels);
            let m = matrix(probs.clone(), gold.clone());
            let got = precision_at_k(&m, k).unwrap();

            let mut want = 0.0;
            for d in 0..docs {
                let mut order: Vec<usize> = (0..labels).collect();
                order.sort_by(|&a, &b| {
                    probs[d][b].partial_cmp(&probs[d][a]).unwrap().then(a.cmp(&b))
                });
                let hits = order[..k].iter().filter(|&&l| gold[d][l]).count();
                want += hits as f64 / k as f64;

                // per-document bound: P@k <= min(#gold, k)/k
                let gold_count = gold[d].iter().filter(|&&g| g).count();
                assert!(hits as f64 / k as f64 <= (gold_count.min(k)) as f64 / k as f64 + 1e-12);
            }
            want /= docs as f64;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn art_identical_predictions_give_p_one() {
        let probs = vec![vec![0.9, 0.1], vec![0.4, 0.7]];
        let gold = vec![vec![true, false], vec![false, true]];
        let p = approx_randomization_test(&probs, &probs, &gold, PairedMetric::MicroF1, 200, 7).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn art_p_in_unit_interval_and_seeded() {
        let probs_a = vec![vec![0.9, 0.2], vec![0.8, 0.3], vec![0.7, 0.6]];
        let probs_b = vec![vec![0.4, 0.6], vec![0.3, 0.8], vec![0.2, 0.9]];
        let gold = vec![vec![true, false], vec![true, false], vec![true, false]];
        let p1 = approx_randomization_test(&probs_a, &probs_b, &gold, PairedMetric::MicroF1, 500, 3).unwrap();
        let p2 = approx_randomization_test(&probs_a, &probs_b, &gold, PairedMetric::MicroF1, 500, 3).unwrap();
        assert!(p1 > 0.0 && p1 <= 1.0);
        assert_eq!(p1, p2);
    }

    #[test]
    fn art_matches_exhaustive_enumeration_on_four_docs() {
        let probs_a = vec![
            vec![0.9, 0.2, 0.7],
            vec![0.8, 0.6, 0.1],
            vec![0.3, 0.9, 0.5],
            vec![0.6, 0.4, 0.8],
        ];
        let probs_b = vec![
            vec![0.2, 0.8, 0.4],
            vec![0.5, 0.1, 0.6],
            vec![0.7, 0.3, 0.2],
            vec![0.1, 0.9, 0.3],
        ];
        let gold = vec![
            vec![true, false, true],
            vec![true, true, false],
            vec![false, true, false],
            vec![true, false, true],
        ];
        let exact = exhaustive_randomization_test(&probs_a, &probs_b, &gold, PairedMetric::MicroF1).unwrap();
        let sampled =
            approx_randomization_test(&probs_a, &probs_b, &gold, PairedMetric::MicroF1, 20000, 11).unwrap();
        assert!((sampled - exact).abs() < 0.02, "sampled {sampled} vs exact {exact}");
    }

    #[test]
    fn art_misaligned_inputs_error() {
        let probs_a = vec![vec![0.9]];
        let probs_b = vec![vec![0.9], vec![0.1]];
        let gold = vec![vec![true]];
        assert!(matches!(
            approx_randomization_test(&probs_a, &probs_b, &gold, PairedMetric::MicroF1, 10, 0),
            Err(MetricsError::Shape(_))
        ));
    }

    #[test]
    fn report_contains_all_headline_metrics() {
        let m = matrix(
            vec![vec![0.9, 0.2, 0.6, 0.1, 0.8], vec![0.3, 0.7, 0.2, 0.9, 0.4]],
            vec![vec![true, false, true, false, true], vec![false, true, false, true, false]],
        );
        let codes: Vec<String> = (0..5).map(|i| format!("C{i}")).collect();
        let report = MetricsReport::compute(&m, 0.5, &codes).unwrap();
        assert_eq!(report.precision_at.len(), 1); // only k=5 fits 5 labels
        let table = report.to_table(true);
        assert!(table.contains("AUC"));
        assert!(table.contains("P@5"));
        let json = report.to_json();
        assert!(json.contains("f1_micro"));
    }
}
