//! Evaluation suite: feature-space fidelity (FID), class diversity (IS),
//! classifier accuracy on generated data (CAS), manifold geometry (PRDC),
//! nearest-neighbor realism, prototype concentration, paired Wilcoxon
//! tests, and classification scores. All computations run at f64.

use crate::classifier::Classifier;
use crate::data::{Split, WindowDataset};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// N x D feature rows plus the provenance needed to keep reports honest:
/// which split the windows came from and which extractor produced them.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub features: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub source: Split,
    pub fingerprint: u64,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, features: Vec<f64>, source: Split, fingerprint: u64) -> Result<Self> {
        if features.len() != n * d {
            return Err(Error::ShapeMismatch(format!(
                "feature buffer {} != {}x{}",
                features.len(),
                n,
                d
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite feature values".into()));
        }
        Ok(FeatureMatrix { features, n, d, source, fingerprint })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }
}

/// Penultimate-layer activations for a whole dataset.
pub fn extract_features(clf: &Classifier, ds: &WindowDataset) -> Result<FeatureMatrix> {
    let f = clf.features(&ds.windows)?;
    let (n, d) = (f.shape()[0], f.shape()[1]);
    FeatureMatrix::new(
        n,
        d,
        f.data().iter().map(|&v| v as f64).collect(),
        ds.split,
        clf.fingerprint(),
    )
}

fn check_same_extractor(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<()> {
    if a.fingerprint != b.fingerprint {
        return Err(Error::InvalidArgument(
            "feature matrices come from different extractors".into(),
        ));
    }
    if a.d != b.d {
        return Err(Error::ShapeMismatch(format!(
            "feature dims differ: {} vs {}",
            a.d, b.d
        )));
    }
    Ok(())
}

fn mean_cov(fm: &FeatureMatrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (fm.n, fm.d);
    let mut mu = vec![0f64; d];
    for i in 0..n {
        for (m, &v) in mu.iter_mut().zip(fm.row(i)) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = vec![0f64; d * d];
    for i in 0..n {
        let r = fm.row(i);
        for a in 0..d {
            let da = r[a] - mu[a];
            for b in a..d {
                cov[a * d + b] += da * (r[b] - mu[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / n as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    (mu, cov)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns the
/// eigenvalues and the rotation matrix Q (row-major) with A = Q diag(w) Q^T.
pub fn symmetric_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut q = vec![0f64; d * d];
    for i in 0..d {
        q[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0f64;
        for p in 0..d {
            for r in p + 1..d {
                off += m[p * d + r].abs();
            }
        }
        if off < 1e-14 * scale * d as f64 {
            break;
        }
        for p in 0..d {
            for r in p + 1..d {
                let apq = m[p * d + r];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[r * d + r];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + r];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + r] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[r * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[r * d + k] = s * mpk + c * mqk;
                }
                for k in 0..d {
                    let qkp = q[k * d + p];
                    let qkq = q[k * d + r];
                    q[k * d + p] = c * qkp - s * qkq;
                    q[k * d + r] = s * qkp + c * qkq;
                }
            }
        }
    }
    let w = (0..d).map(|i| m[i * d + i]).collect();
    (w, q)
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0f64; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

fn psd_sqrt(a: &[f64], d: usize) -> Vec<f64> {
    let (w, q) = symmetric_eigen(a, d);
    let mut tmp = vec![0f64; d * d];
    // Q diag(sqrt(max(w,0))) Q^T
    for i in 0..d {
        for j in 0..d {
            tmp[i * d + j] = q[i * d + j] * w[j].max(0.0).sqrt();
        }
    }
    let mut qt = vec![0f64; d * d];
    for i in 0..d {
        for j in 0..d {
            qt[i * d + j] = q[j * d + i];
        }
    }
    matmul_sq(&tmp, &qt, d)
}

/// Frechet distance between Gaussians fitted (population covariance) to the
/// two feature sets. The cross term uses the symmetric product
/// Sa^{1/2} Sb Sa^{1/2}; its eigenvalues are clamped at zero, with a warning
/// on stderr when the drift is larger than numerical noise.
pub fn fid(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    check_same_extractor(a, b)?;
    if a.n < 2 || b.n < 2 {
        return Err(Error::InvalidArgument(
            "fid needs at least 2 samples per side".into(),
        ));
    }
    let d = a.d;
    let (mu_a, cov_a) = mean_cov(a);
    let (mu_b, cov_b) = mean_cov(b);
    let mean_term: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr_a: f64 = (0..d).map(|i| cov_a[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| cov_b[i * d + i]).sum();
    let sa_half = psd_sqrt(&cov_a, d);
    let prod = matmul_sq(&matmul_sq(&sa_half, &cov_b, d), &sa_half, d);
    let (w, _) = symmetric_eigen(&prod, d);
    let trace: f64 = w.iter().sum();
    let most_negative = w.iter().cloned().fold(0.0, f64::min);
    if most_negative < -1e-6 * trace.abs() {
        eprintln!(
            "warning: covariance product eigenvalue {:.3e} clamped to 0 (trace {:.3e})",
            most_negative, trace
        );
    }
    let tr_sqrt: f64 = w.iter().map(|&v| v.max(0.0).sqrt()).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0))
}

/// Inception-style score over class probabilities: per split,
/// exp(E[KL(p(y|x) || mean p)]); mean and std over splits. N is truncated
/// to a multiple of the split count.
pub fn inception_score(probs: &[f64], n: usize, k: usize, n_splits: usize) -> Result<(f64, f64)> {
    if n_splits == 0 || n < n_splits {
        return Err(Error::InvalidArgument(format!(
            "{} rows cannot fill {} splits",
            n, n_splits
        )));
    }
    if probs.len() != n * k {
        return Err(Error::ShapeMismatch(format!(
            "probability buffer {} != {}x{}",
            probs.len(),
            n,
            k
        )));
    }
    for i in 0..n {
        let row = &probs[i * k..(i + 1) * k];
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-5 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "row {} is not a probability distribution (sum {})",
                i, s
            )));
        }
    }
    let per_split = n / n_splits;
    let mut scores = Vec::with_capacity(n_splits);
    for s in 0..n_splits {
        let rows = &probs[s * per_split * k..(s + 1) * per_split * k];
        let mut marginal = vec![0f64; k];
        for i in 0..per_split {
            for (m, &p) in marginal.iter_mut().zip(&rows[i * k..(i + 1) * k]) {
                *m += p;
            }
        }
        for m in &mut marginal {
            *m /= per_split as f64;
        }
        let mut kl_sum = 0f64;
        for i in 0..per_split {
            for (j, &p) in rows[i * k..(i + 1) * k].iter().enumerate() {
                if p > 0.0 {
                    kl_sum += p * (p / marginal[j]).ln();
                }
            }
        }
        scores.push((kl_sum / per_split as f64).exp());
    }
    let mean = scores.iter().sum::<f64>() / n_splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n_splits as f64;
    Ok((mean, var.sqrt()))
}

/// Fraction of predictions matching labels.
pub fn accuracy(preds: &[u16], labels: &[u16]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::InvalidArgument("prediction/label length mismatch".into()));
    }
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64)
}

/// Classifier accuracy score: a real-train-only classifier scored against
/// the conditioning labels of generated windows. Rejects classifiers whose
/// provenance shows synthetic or test contamination.
pub fn cas(clf: &Classifier, gen: &WindowDataset) -> Result<f64> {
    if clf.provenance.synthetic_windows > 0 || clf.provenance.real_test_windows > 0 {
        return Err(Error::Contamination(format!(
            "cas classifier saw {} synthetic and {} test windows; must be real train only",
            clf.provenance.synthetic_windows, clf.provenance.real_test_windows
        )));
    }
    if clf.provenance.real_train_windows == 0 {
        return Err(Error::Contamination(
            "cas classifier provenance shows no real training windows".into(),
        ));
    }
    let preds = clf.predict(&gen.windows)?;
    accuracy(&preds, &gen.labels)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Distance from each point of `s` to its k-th nearest neighbor within `s`
/// (excluding itself).
fn knn_radii(s: &FeatureMatrix, k: usize) -> Vec<f64> {
    (0..s.n)
        .map(|i| {
            let mut ds: Vec<f64> = (0..s.n)
                .filter(|&j| j != i)
                .map(|j| dist(s.row(i), s.row(j)))
                .collect();
            ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ds[k - 1]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prdc {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

/// k-nearest-neighbor manifold estimates of precision, recall, density and
/// coverage. Brute-force pairwise distances at f64.
pub fn prdc(real: &FeatureMatrix, fake: &FeatureMatrix, k: usize) -> Result<Prdc> {
    check_same_extractor(real, fake)?;
    if k == 0 {
        return Err(Error::InvalidArgument("prdc needs k >= 1".into()));
    }
    if real.n < k + 1 || fake.n < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "prdc with k={} needs at least {} points per side",
            k,
            k + 1
        )));
    }
    let real_r = knn_radii(real, k);
    let fake_r = knn_radii(fake, k);
    let mut precision_hits = 0usize;
    let mut density_sum = 0usize;
    for i in 0..fake.n {
        let mut inside_any = false;
        for j in 0..real.n {
            if dist(fake.row(i), real.row(j)) <= real_r[j] {
                inside_any = true;
                density_sum += 1;
            }
        }
        if inside_any {
            precision_hits += 1;
        }
    }
    let mut recall_hits = 0usize;
    let mut coverage_hits = 0usize;
    for j in 0..real.n {
        let mut min_d = f64::INFINITY;
        let mut inside_any = false;
        for i in 0..fake.n {
            let d = dist(real.row(j), fake.row(i));
            min_d = min_d.min(d);
            if d <= fake_r[i] {
                inside_any = true;
            }
        }
        if inside_any {
            recall_hits += 1;
        }
        if min_d <= real_r[j] {
            coverage_hits += 1;
        }
    }
    Ok(Prdc {
        precision: precision_hits as f64 / fake.n as f64,
        recall: recall_hits as f64 / real.n as f64,
        density: density_sum as f64 / (k * fake.n) as f64,
        coverage: coverage_hits as f64 / real.n as f64,
    })
}

fn mean_nn_dist(fake: &FeatureMatrix, s: &FeatureMatrix) -> f64 {
    (0..fake.n)
        .map(|i| {
            (0..s.n)
                .map(|j| dist(fake.row(i), s.row(j)))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / fake.n as f64
}

/// Negative mean nearest-neighbor distance from generated points to the
/// train and test sets; gap = realism_train - realism_test, so a positive
/// gap means generated points sit closer to train than to test.
pub fn knn_realism(
    fake: &FeatureMatrix,
    train: &FeatureMatrix,
    test: &FeatureMatrix,
) -> Result<(f64, f64, f64)> {
    check_same_extractor(fake, train)?;
    check_same_extractor(fake, test)?;
    if fake.n == 0 || train.n == 0 || test.n == 0 {
        return Err(Error::InvalidArgument("realism needs non-empty sets".into()));
    }
    let rt = -mean_nn_dist(fake, train);
    let rs = -mean_nn_dist(fake, test);
    Ok((rt, rs, rt - rs))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtoStats {
    /// (m, fraction of fakes assigned to the m most-hit templates)
    pub top_shares: Vec<(usize, f64)>,
    /// (threshold, fraction of fakes with ratio below it)
    pub frac_r_lt: Vec<(f64, f64)>,
    /// median hit share over templates with at least one hit
    pub median_hit_share: f64,
}

/// Assign each generated point to its nearest train template and summarize
/// how concentrated the assignment is. The ratio r divides the distance to
/// the template by the template's own nearest-neighbor distance within
/// train, so r near 0 flags near-copies.
pub fn prototype_concentration(
    fake: &FeatureMatrix,
    train: &FeatureMatrix,
    ratio_thresholds: &[f64],
    top_m: &[usize],
) -> Result<ProtoStats> {
    check_same_extractor(fake, train)?;
    if train.n < 2 {
        return Err(Error::InvalidArgument(
            "prototype ratio needs at least 2 train points".into(),
        ));
    }
    if fake.n == 0 {
        return Err(Error::InvalidArgument("no generated points".into()));
    }
    let train_nn = knn_radii(train, 1);
    let mut hits = vec![0usize; train.n];
    let mut ratios = Vec::with_capacity(fake.n);
    for i in 0..fake.n {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for j in 0..train.n {
            let d = dist(fake.row(i), train.row(j));
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        hits[best] += 1;
        ratios.push(best_d / train_nn[best].max(1e-300));
    }
    let mut sorted_hits: Vec<usize> = hits.iter().cloned().filter(|&h| h > 0).collect();
    sorted_hits.sort_unstable_by(|a, b| b.cmp(a));
    let top_shares = top_m
        .iter()
        .map(|&m| {
            let s: usize = sorted_hits.iter().take(m).sum();
            (m, s as f64 / fake.n as f64)
        })
        .collect();
    let frac_r_lt = ratio_thresholds
        .iter()
        .map(|&tau| {
            let c = ratios.iter().filter(|&&r| r < tau).count();
            (tau, c as f64 / fake.n as f64)
        })
        .collect();
    let mut shares: Vec<f64> = sorted_hits
        .iter()
        .map(|&h| h as f64 / fake.n as f64)
        .collect();
    shares.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_hit_share = if shares.len() % 2 == 1 {
        shares[shares.len() / 2]
    } else {
        0.5 * (shares[shares.len() / 2 - 1] + shares[shares.len() / 2])
    };
    Ok(ProtoStats { top_shares, frac_r_lt, median_hit_share })
}

fn ranks_of_abs(diffs: &[f64]) -> Vec<f64> {
    let n = diffs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).unwrap());
    let mut ranks = vec![0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[idx[j + 1]].abs() == diffs[idx[i]].abs() {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn normal_cdf(x: f64) -> f64 {
    // Abramowitz & Stegun 7.1.26 polynomial for erf
    let z = x / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * z.abs());
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-z * z).exp();
    let signed = if z < 0.0 { -erf } else { erf };
    0.5 * (1.0 + signed)
}

/// Paired Wilcoxon signed-rank test. Zero differences are dropped; the
/// statistic is min(W+, W-). Exact two-sided p by enumerating all sign
/// assignments for n <= 12, normal approximation with tie correction beyond.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("paired samples differ in length".into()));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::InvalidArgument("degenerate pairs: all differences zero".into()));
    }
    let n = diffs.len();
    if n < 5 {
        return Err(Error::InvalidArgument(format!(
            "need at least 5 nonzero differences, got {}",
            n
        )));
    }
    let ranks = ranks_of_abs(&diffs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = n as f64 * (n + 1) as f64 / 2.0;
    let w_minus = total - w_plus;
    let stat = w_plus.min(w_minus);
    let p = if n <= 12 {
        let count_total = 1u64 << n;
        let mut le = 0u64;
        let mut ge = 0u64;
        let hi = total - stat;
        for mask in 0..count_total {
            let mut w = 0f64;
            for (i, r) in ranks.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    w += r;
                }
            }
            if w <= stat + 1e-12 {
                le += 1;
            }
            if w >= hi - 1e-12 {
                ge += 1;
            }
        }
        ((le + ge) as f64 / count_total as f64).min(1.0)
    } else {
        let mean = total / 2.0;
        // tie correction over groups of equal |d|
        let mut sorted: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut tie_term = 0f64;
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = (n as f64 * (n + 1) as f64 * (2 * n + 1) as f64) / 24.0 - tie_term / 48.0;
        if var <= 0.0 {
            return Err(Error::Numerical("zero variance in rank test".into()));
        }
        let z = (w_plus - mean) / var.sqrt();
        (2.0 * (1.0 - normal_cdf(z.abs()))).min(1.0)
    };
    Ok((stat, p))
}

/// Accuracy plus unweighted per-class F1 and recall. Labels are in [1..K];
/// a class with a zero F1 denominator scores 0.
pub fn macro_scores(preds: &[u16], labels: &[u16], k: u16) -> Result<(f64, f64, f64)> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::InvalidArgument("empty or mismatched predictions".into()));
    }
    for &v in preds.iter().chain(labels) {
        if v == 0 || v > k {
            return Err(Error::InvalidArgument(format!("value {} outside [1..{}]", v, k)));
        }
    }
    let ku = k as usize;
    let mut tp = vec![0usize; ku];
    let mut fp = vec![0usize; ku];
    let mut fne = vec![0usize; ku];
    let mut correct = 0usize;
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            correct += 1;
            tp[(p - 1) as usize] += 1;
        } else {
            fp[(p - 1) as usize] += 1;
            fne[(l - 1) as usize] += 1;
        }
    }
    let acc = correct as f64 / preds.len() as f64;
    let mut f1_sum = 0f64;
    let mut rec_sum = 0f64;
    for c in 0..ku {
        let denom_r = tp[c] + fne[c];
        let recall = if denom_r > 0 { tp[c] as f64 / denom_r as f64 } else { 0.0 };
        rec_sum += recall;
        let f1_denom = 2 * tp[c] + fp[c] + fne[c];
        if f1_denom > 0 {
            f1_sum += 2.0 * tp[c] as f64 / f1_denom as f64;
        }
    }
    Ok((acc, f1_sum / ku as f64, rec_sum / ku as f64))
}

/// One evaluation run's worth of scores. Metrics a protocol does not
/// produce stay None and are omitted from the JSON.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid_anchor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub is_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub is_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cas: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub realism_train: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub realism_test: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub traintest_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proto_top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proto_top10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proto_frac_r_lt_08: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proto_frac_r_lt_06: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proto_median_share: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extractor_fingerprint: Option<u64>,
}

pub const METRIC_FIELDS: [&str; 21] = [
    "fid",
    "fid_anchor",
    "is_mean",
    "is_std",
    "cas",
    "precision",
    "recall",
    "density",
    "coverage",
    "realism_train",
    "realism_test",
    "traintest_gap",
    "proto_top1",
    "proto_top10",
    "proto_frac_r_lt_08",
    "proto_frac_r_lt_06",
    "proto_median_share",
    "acc",
    "macro_f1",
    "macro_recall",
    "extractor_fingerprint",
];

impl MetricReport {
    pub fn fields(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("fid", self.fid),
            ("fid_anchor", self.fid_anchor),
            ("is_mean", self.is_mean),
            ("is_std", self.is_std),
            ("cas", self.cas),
            ("precision", self.precision),
            ("recall", self.recall),
            ("density", self.density),
            ("coverage", self.coverage),
            ("realism_train", self.realism_train),
            ("realism_test", self.realism_test),
            ("traintest_gap", self.traintest_gap),
            ("proto_top1", self.proto_top1),
            ("proto_top10", self.proto_top10),
            ("proto_frac_r_lt_08", self.proto_frac_r_lt_08),
            ("proto_frac_r_lt_06", self.proto_frac_r_lt_06),
            ("proto_median_share", self.proto_median_share),
            ("acc", self.acc),
            ("macro_f1", self.macro_f1),
            ("macro_recall", self.macro_recall),
        ]
    }

    /// Set a numeric metric by name; unknown names are ignored so callers
    /// can drive this from `fields()` output.
    pub fn set(&mut self, name: &str, v: f64) {
        match name {
            "fid" => self.fid = Some(v),
            "fid_anchor" => self.fid_anchor = Some(v),
            "is_mean" => self.is_mean = Some(v),
            "is_std" => self.is_std = Some(v),
            "cas" => self.cas = Some(v),
            "precision" => self.precision = Some(v),
            "recall" => self.recall = Some(v),
            "density" => self.density = Some(v),
            "coverage" => self.coverage = Some(v),
            "realism_train" => self.realism_train = Some(v),
            "realism_test" => self.realism_test = Some(v),
            "traintest_gap" => self.traintest_gap = Some(v),
            "proto_top1" => self.proto_top1 = Some(v),
            "proto_top10" => self.proto_top10 = Some(v),
            "proto_frac_r_lt_08" => self.proto_frac_r_lt_08 = Some(v),
            "proto_frac_r_lt_06" => self.proto_frac_r_lt_06 = Some(v),
            "proto_median_share" => self.proto_median_share = Some(v),
            "acc" => self.acc = Some(v),
            "macro_f1" => self.macro_f1 = Some(v),
            "macro_recall" => self.macro_recall = Some(v),
            _ => {}
        }
    }

    pub fn csv_header() -> String {
        METRIC_FIELDS.join(",")
    }

    /// One CSV row; absent metrics become empty cells.
    pub fn csv_row(&self) -> String {
        let mut cells: Vec<String> = self
            .fields()
            .iter()
            .map(|(_, v)| v.map(|x| format!("{}", x)).unwrap_or_default())
            .collect();
        cells.push(
            self.extractor_fingerprint
                .map(|f| format!("{:016x}", f))
                .unwrap_or_default(),
        );
        cells.join(",")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.fields() {
            if let Some(x) = v {
                if !x.is_finite() {
                    return Err(Error::Numerical(format!("metric {} is not finite", name)));
                }
            }
        }
        for (name, v) in [
            ("cas", self.cas),
            ("precision", self.precision),
            ("recall", self.recall),
            ("coverage", self.coverage),
            ("acc", self.acc),
        ] {
            if let Some(x) = v {
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::Numerical(format!("metric {} outside [0,1]", name)));
                }
            }
        }
        Ok(())
    }
}
