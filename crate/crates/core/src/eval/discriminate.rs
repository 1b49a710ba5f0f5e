//! Real-versus-generated discrimination by cross-validated logistic regression.

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::seqgen::{sample_outcomes, sample_treatments, ModelParams};
use crate::trajectory::{Channels, Window, D};

const FOLDS: usize = 5;
const RIDGE: f64 = 1e-3;
const NEWTON_ITERS: usize = 50;

/// Future part of a trajectory; glucose features use the masked cells only.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrajectory {
    pub outcomes: Channels<f64>,
    pub mask: Channels<bool>,
    pub treatments: Channels<f64>,
}

impl SampleTrajectory {
    pub fn from_window(w: &Window) -> Self {
        Self {
            outcomes: w.future_outcomes.clone(),
            mask: w.future_mask.clone(),
            treatments: w.future_treatments.clone(),
        }
    }
}

/// One joint draw `(x, y) ~ p(x, y | c)` per window, observed at the
/// window's measured cells.
pub fn generate_like(params: &ModelParams, windows: &[Window], rng: &mut Rng) -> Result<Vec<SampleTrajectory>> {
    windows
        .iter()
        .map(|w| {
            let x = sample_treatments(params, &w.context, 1, rng)?.remove(0);
            let y = sample_outcomes(params, &w.context, &x, 1, rng)?.remove(0);
            Ok(SampleTrajectory {
                outcomes: y,
                mask: w.future_mask.clone(),
                treatments: x,
            })
        })
        .collect()
}

/// Glucose mean, sd, min, max and lag-1 autocorrelation over measured
/// cells, then per treatment channel the total dose and the injection count.
pub fn summary_features(s: &SampleTrajectory) -> Vec<f64> {
    let ys: Vec<f64> = (0..s.outcomes.cols())
        .filter(|&t| s.mask.get(0, t))
        .map(|t| s.outcomes.get(0, t))
        .collect();
    let mut f = Vec::with_capacity(5 + 2 * D);
    if ys.is_empty() {
        f.extend([0.0; 5]);
    } else {
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let lag = if ys.len() > 2 && var > 0.0 {
            ys.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>() / (n * var)
        } else {
            0.0
        };
        f.push(mean);
        f.push(var.sqrt());
        f.push(ys.iter().cloned().fold(f64::INFINITY, f64::min));
        f.push(ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        f.push(lag);
    }
    for d in 0..D {
        let row = s.treatments.row(d);
        f.push(row.iter().sum());
        f.push(row.iter().filter(|&&v| v > 0.0).count() as f64);
    }
    f
}

/// Solves `a · x = b` for a small dense symmetric positive definite `a`.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Ridge-penalised logistic regression by Newton's method; rows carry a
/// leading 1 for the (unpenalised) intercept.
fn fit_logistic(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = x[0].len();
    let mut w = vec![0.0; p];
    for _ in 0..NEWTON_ITERS {
        let mut grad = vec![0.0; p];
        let mut hess = vec![vec![0.0; p]; p];
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum();
            let mu = sigmoid(z);
            let h = mu * (1.0 - mu);
            for a in 0..p {
                grad[a] += (mu - yi) * xi[a];
                for b in 0..p {
                    hess[a][b] += h * xi[a] * xi[b];
                }
            }
        }
        for a in 1..p {
            grad[a] += RIDGE * w[a];
            hess[a][a] += RIDGE;
        }
        hess[0][0] += 1e-12;
        let step = solve(hess, grad);
        let mut size = 0.0f64;
        for (wi, s) in w.iter_mut().zip(&step) {
            *wi -= s;
            size = size.max(s.abs());
        }
        if size < 1e-10 {
            break;
        }
    }
    w
}

/// Area under the ROC curve of `scores` for labels (ties count one half).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InsufficientData("AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Fold of a feature vector. Folds follow content, so identical
/// trajectories never straddle a training and a test fold.
fn fold_of(features: &[f64], seed: u64) -> usize {
    (rng::hash_words(seed, features.iter().map(|v| v.to_bits())) % FOLDS as u64) as usize
}

/// Five-fold cross-validated AUC of a logistic classifier separating
/// `generated` (positive) from `real` on [`summary_features`]. Features are
/// standardised with training-fold statistics; folds are assigned by a
/// seeded hash of the features.
pub fn real_vs_generated_auc(real: &[SampleTrajectory], generated: &[SampleTrajectory], seed: u64) -> Result<f64> {
    if real.len() < FOLDS || generated.len() < FOLDS {
        return Err(Error::InsufficientData(format!("each set needs at least {FOLDS} trajectories")));
    }
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut folds = Vec::new();
    for (set, label) in [(real, false), (generated, true)] {
        for s in set {
            let f = summary_features(s);
            folds.push(fold_of(&f, seed));
            feats.push(f);
            labels.push(label);
        }
    }
    for f in 0..FOLDS {
        for label in [false, true] {
            let in_fold = (0..feats.len()).filter(|&i| labels[i] == label && folds[i] == f).count();
            let total = labels.iter().filter(|&&l| l == label).count();
            if in_fold == 0 || in_fold == total {
                return Err(Error::InsufficientData(format!("fold {f} lacks a class in training or testing")));
            }
        }
    }
    let p = feats[0].len();
    let mut scores = vec![0.0; feats.len()];
    for f in 0..FOLDS {
        let tr: Vec<usize> = (0..feats.len()).filter(|&i| folds[i] != f).collect();
        let n = tr.len() as f64;
        let mean: Vec<f64> = (0..p).map(|j| tr.iter().map(|&i| feats[i][j]).sum::<f64>() / n).collect();
        let sd: Vec<f64> = (0..p)
            .map(|j| {
                let v = tr.iter().map(|&i| (feats[i][j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-24 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let design = |i: usize| {
            let mut r = Vec::with_capacity(p + 1);
            r.push(1.0);
            r.extend((0..p).map(|j| (feats[i][j] - mean[j]) / sd[j]));
            r
        };
        let x: Vec<Vec<f64>> = tr.iter().map(|&i| design(i)).collect();
        let y: Vec<f64> = tr.iter().map(|&i| if labels[i] { 1.0 } else { 0.0 }).collect();
        let w = fit_logistic(&x, &y);
        for i in (0..feats.len()).filter(|&i| folds[i] == f) {
            scores[i] = design(i).iter().zip(&w).map(|(a, b)| a * b).sum();
        }
    }
    auc(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn random_set(n: usize, seed: u64) -> Vec<SampleTrajectory> {
        let mut r = rng::stream(seed, "traj", 0);
        (0..n)
            .map(|_| {
                let base = r.gen_range(5.0..12.0);
                let y: Vec<f64> = (0..24).map(|_| base + r.gen_range(-2.0..2.0)).collect();
                let m: Vec<bool> = (0..24).map(|t| t % 5 == 1 || r.gen::<f64>() < 0.1).collect();
                let x: Vec<f64> = (0..2 * 24).map(|_| if r.gen::<f64>() < 0.1 { r.gen_range(1..10) as f64 } else { 0.0 }).collect();
                SampleTrajectory {
                    outcomes: Channels::from_vec(1, 24, y).unwrap(),
                    mask: Channels::from_vec(1, 24, m).unwrap(),
                    treatments: Channels::from_vec(D, 24, x).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
        assert!(auc(&[0.5, 0.6], &[true, true]).is_err());
    }

    #[test]
    fn shuffled_copy_is_indistinguishable() {
        let real = random_set(400, 1);
        let mut gen = real.clone();
        gen.shuffle(&mut rng::stream(2, "shuffle", 0));
        let a = real_vs_generated_auc(&real, &gen, 3).unwrap();
        assert!((0.45..=0.55).contains(&a), "{a}");
    }

    #[test]
    fn constant_trajectories_are_separable() {
        let real = random_set(200, 4);
        let gen: Vec<SampleTrajectory> = real
            .iter()
            .map(|s| SampleTrajectory {
                outcomes: Channels::filled(1, 24, 8.0),
                ..s.clone()
            })
            .collect();
        let a = real_vs_generated_auc(&real, &gen, 5).unwrap();
        assert!(a > 0.95, "{a}");
    }

    #[test]
    fn swapping_labels_complements_the_auc() {
        let mut r = rng::stream(10, "scores", 0);
        let scores: Vec<f64> = (0..200).map(|_| (r.gen_range(0..40) as f64) / 4.0).collect();
        let labels: Vec<bool> = (0..200).map(|_| r.gen::<bool>()).collect();
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let s = auc(&scores, &labels).unwrap() + auc(&scores, &flipped).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "{s}");
    }

    #[test]
    fn classifier_auc_ignores_argument_order() {
        let a = random_set(120, 6);
        let b: Vec<SampleTrajectory> = random_set(90, 7)
            .into_iter()
            .map(|mut s| {
                s.outcomes = s.outcomes.map(|v| v * 1.1);
                s
            })
            .collect();
        let ab = real_vs_generated_auc(&a, &b, 8).unwrap();
        let ba = real_vs_generated_auc(&b, &a, 8).unwrap();
        // The classifier is refitted with the labels swapped, so the two
        // directions agree rather than complement each other.
        assert!((ab - ba).abs() < 1e-9, "{ab} vs {ba}");
        assert!(ab > 0.5);
    }

    #[test]
    fn tiny_sets_are_rejected() {
        let a = random_set(4, 9);
        assert!(real_vs_generated_auc(&a, &a, 0).is_err());
    }
}
