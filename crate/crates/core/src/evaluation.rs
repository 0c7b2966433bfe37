//! Classification and retrieval metrics, clip aggregation and linear probes.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub count: usize,
    pub split: String,
    pub fingerprint: String,
}

/// Indices sorted by score descending; equal scores keep index order.
fn ranking(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let s: Vec<f64> = scores.collect();
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    idx
}

/// Precision averaged over the ranks of the positives (no interpolation).
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let order = ranking(scores.iter().copied());
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    // precision at each positive, summed in instance order so the result
    // does not depend on how the ranking was produced
    let mut at = vec![0.0; scores.len()];
    let mut hits = 0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            at[i] = hits as f64 / (rank + 1) as f64;
        }
    }
    Some(at.iter().sum::<f64>() / total as f64)
}

/// Unweighted mean AP over classes that have at least one positive.
pub fn mean_average_precision(scores: &Tensor, labels: &[Vec<usize>]) -> Result<f64> {
    let (n, c) = scores.dims2()?;
    if labels.len() != n {
        return Err(Error::shape("mean_average_precision", format!("{n} score rows, {} label sets", labels.len())));
    }
    let mut aps = Vec::new();
    for k in 0..c {
        let col: Vec<f64> = (0..n).map(|i| scores.at(i, k)).collect();
        let pos: Vec<bool> = labels.iter().map(|l| l.contains(&k)).collect();
        aps.extend(average_precision(&col, &pos));
    }
    if aps.is_empty() {
        return Err(Error::invalid("no class has a positive instance"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy_top1(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = scores.dims2()?;
    if labels.len() != n {
        return Err(Error::shape("accuracy_top1", format!("{n} score rows, {} labels", labels.len())));
    }
    let hits = (0..n).filter(|&i| argmax(scores.row(i)) == labels[i]).count();
    Ok(hits as f64 / n as f64)
}

fn normalized_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|x| x / n).collect()
            } else {
                vec![0.0; r.len()]
            }
        })
        .collect()
}

/// Zero-based rank of each query's true match (gallery row `i`) under cosine
/// similarity, with ties broken by gallery index.
pub fn match_ranks(queries: &Tensor, gallery: &Tensor) -> Result<Vec<usize>> {
    let (nq, hq) = queries.dims2()?;
    let (ng, hg) = gallery.dims2()?;
    if hq != hg || nq > ng {
        return Err(Error::shape("recall_at_k", format!("queries {nq}x{hq}, gallery {ng}x{hg}")));
    }
    let (q, g) = (normalized_rows(queries), normalized_rows(gallery));
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    Ok((0..nq)
        .map(|i| {
            let sims: Vec<f64> = g.iter().map(|gj| dot(&q[i], gj)).collect();
            let s = sims[i];
            sims.iter()
                .enumerate()
                .filter(|&(j, &x)| x > s || (x == s && j < i))
                .count()
        })
        .collect())
}

/// Gallery index of each query's most similar row (lowest index on ties).
pub fn nearest(queries: &Tensor, gallery: &Tensor) -> Result<Vec<usize>> {
    let (q, g) = (normalized_rows(queries), normalized_rows(gallery));
    if queries.cols() != gallery.cols() {
        return Err(Error::shape("nearest", format!("{} vs {} columns", queries.cols(), gallery.cols())));
    }
    Ok(q.iter()
        .map(|qi| argmax(&g.iter().map(|gj| qi.iter().zip(gj).map(|(x, y)| x * y).sum()).collect::<Vec<f64>>()))
        .collect())
}

pub fn recall_at_k(queries: &Tensor, gallery: &Tensor, k: usize) -> Result<f64> {
    let ng = gallery.rows();
    if k == 0 || k > ng {
        return Err(Error::invalid(format!("k = {k} with a gallery of {ng}")));
    }
    let ranks = match_ranks(queries, gallery)?;
    Ok(ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
}

/// Mean of per-clip logits (`clips x C`), as a `1 x C` row.
pub fn multiclip_aggregate(per_clip: &Tensor) -> Result<Tensor> {
    let (n, c) = per_clip.dims2()?;
    let mut out = vec![0.0; c];
    for i in 0..n {
        for (o, x) in out.iter_mut().zip(per_clip.row(i)) {
            *o += x;
        }
    }
    Tensor::new(vec![1, c], out.into_iter().map(|s| s / n as f64).collect())
}

/// Mean of per-clip sigmoid probabilities.
pub fn multiclip_aggregate_probs(per_clip: &Tensor) -> Result<Tensor> {
    multiclip_aggregate(&per_clip.map(sigmoid))
}

/// Ridge-regression probe onto one-hot targets over standardized features.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `(D + 1) x C`, bias in the last row.
    weights: DMatrix<f64>,
}

pub fn linear_probe(features: &Tensor, labels: &[usize], classes: usize, ridge: f64) -> Result<LinearProbe> {
    let (n, d) = features.dims2()?;
    if labels.len() != n || n == 0 {
        return Err(Error::shape("linear_probe", format!("{n} feature rows, {} labels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {l} with {classes} classes")));
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| features.at(i, j)).sum::<f64>() / n as f64).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = (0..n).map(|i| (features.at(i, j) - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 }
        })
        .collect();
    let mut probe = LinearProbe {
        mean,
        scale,
        weights: DMatrix::zeros(d + 1, classes),
    };
    let x = probe.design(features);
    let y = DMatrix::from_fn(n, classes, |i, c| f64::from(labels[i] == c));
    let mut gram = x.transpose() * &x;
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    let rhs = x.transpose() * y;
    probe.weights = gram
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::invalid("probe system is singular; raise the ridge"))?;
    Ok(probe)
}

impl LinearProbe {
    fn design(&self, features: &Tensor) -> DMatrix<f64> {
        let (n, d) = (features.rows(), features.cols());
        DMatrix::from_fn(n, d + 1, |i, j| {
            if j == d {
                1.0
            } else {
                (features.at(i, j) - self.mean[j]) * self.scale[j]
            }
        })
    }

    pub fn scores(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() + 1 != self.weights.nrows() {
            return Err(Error::shape("linear_probe", format!("{} features, probe fitted on {}", features.cols(), self.weights.nrows() - 1)));
        }
        let s = self.design(features) * &self.weights;
        let rows: Vec<Vec<f64>> = (0..s.nrows()).map(|i| s.row(i).iter().copied().collect()).collect();
        Tensor::from_rows(&rows)
    }
}

/// Fits a probe on one split and reports top-1 accuracy on another.
pub fn probe_accuracy(
    train: (&Tensor, &[usize]),
    test: (&Tensor, &[usize]),
    classes: usize,
    ridge: f64,
) -> Result<f64> {
    let probe = linear_probe(train.0, train.1, classes, ridge)?;
    accuracy_top1(&probe.scores(test.0)?, test.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    /// AP from its definition: for each positive, count items ranked at or
    /// above it by comparing every pair directly.
    fn brute_ap(scores: &[f64], pos: &[bool]) -> Option<f64> {
        let n = scores.len();
        let above = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
        let ps: Vec<usize> = (0..n).filter(|&i| pos[i]).collect();
        if ps.is_empty() {
            return None;
        }
        let s: f64 = ps
            .iter()
            .map(|&i| {
                let rank = (0..n).filter(|&j| above(i, j)).count();
                let hits = ps.iter().filter(|&&j| above(i, j)).count();
                hits as f64 / rank as f64
            })
            .sum();
        Some(s / ps.len() as f64)
    }

    fn brute_map(scores: &Tensor, labels: &[Vec<usize>]) -> f64 {
        let aps: Vec<f64> = (0..scores.cols())
            .filter_map(|k| {
                let col: Vec<f64> = (0..scores.rows()).map(|i| scores.at(i, k)).collect();
                let pos: Vec<bool> = labels.iter().map(|l| l.contains(&k)).collect();
                brute_ap(&col, &pos)
            })
            .collect();
        aps.iter().sum::<f64>() / aps.len() as f64
    }

    /// Recall by sorting every gallery item per query.
    fn brute_recall(q: &Tensor, g: &Tensor, k: usize) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let mut hits = 0;
        for i in 0..q.rows() {
            let mut order: Vec<(f64, usize)> = (0..g.rows()).map(|j| (cos(q.row(i), g.row(j)), j)).collect();
            order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            if order[..k].iter().any(|&(_, j)| j == i) {
                hits += 1;
            }
        }
        hits as f64 / q.rows() as f64
    }

    #[test]
    fn ap_hand_cases() {
        assert_eq!(average_precision(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(average_precision(&[0.9, 0.1], &[false, true]), Some(0.5));
        assert_eq!(average_precision(&[0.9, 0.1], &[false, false]), None);
        // ties: index order decides
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
        let perfect = t(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.8, 0.1]]);
        assert_eq!(mean_average_precision(&perfect, &[vec![0], vec![1], vec![0]]).unwrap(), 1.0);
        assert!(mean_average_precision(&perfect, &[vec![], vec![], vec![]]).is_err());
    }

    #[test]
    fn accuracy_and_tie_rule() {
        let s = t(&[vec![0.1, 0.9], vec![0.7, 0.3]]);
        assert_eq!(accuracy_top1(&s, &[1, 0]).unwrap(), 1.0);
        let flat = t(&[vec![0.5; 3], vec![0.5; 3]]);
        assert_eq!(accuracy_top1(&flat, &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy_top1(&flat, &[0, 2]).unwrap(), 0.5);
    }

    #[test]
    fn recall_cases() {
        let g = Tensor::eye(4);
        assert_eq!(recall_at_k(&g, &g, 1).unwrap(), 1.0);
        let q = t(&[g.row(2).to_vec()]);
        assert_eq!(nearest(&q, &g).unwrap(), vec![2]);
        assert_eq!(match_ranks(&q, &g).unwrap(), vec![1]);
        assert!(recall_at_k(&g, &g, 5).is_err());
        assert!(recall_at_k(&g, &g, 0).is_err());
    }

    #[test]
    fn random_recall_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (trials, m) = (200, 20);
        let mut hits = 0.0;
        for _ in 0..trials {
            let rows = |rng: &mut ChaCha8Rng| -> Tensor {
                t(&(0..m).map(|_| (0..8).map(|_| rng.random::<f64>() - 0.5).collect()).collect::<Vec<_>>())
            };
            let (q, g) = (rows(&mut rng), rows(&mut rng));
            hits += recall_at_k(&q, &g, 1).unwrap() * m as f64;
        }
        let n = (trials * m) as f64;
        let p = 1.0 / m as f64;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!((hits / n - p).abs() < 3.0 * sigma, "{}", hits / n);
    }

    #[test]
    fn aggregation() {
        let one = t(&[vec![1.0, -2.0]]);
        assert_eq!(multiclip_aggregate(&one).unwrap(), one);
        let same = t(&vec![vec![1.0, -2.0]; 10]);
        assert_eq!(multiclip_aggregate(&same).unwrap(), one);
        let mixed = t(&[vec![1.0, 2.0], vec![3.0, -4.0], vec![2.0, 5.0]]);
        let agg = multiclip_aggregate(&mixed).unwrap();
        assert_eq!(agg.data(), &[(1.0 + 3.0 + 2.0) / 3.0, (2.0 - 4.0 + 5.0) / 3.0]);
        let p = multiclip_aggregate_probs(&t(&[vec![0.0], vec![0.0]])).unwrap();
        assert_eq!(p.data(), &[0.5]);
    }

    #[test]
    fn aggregation_commutes_with_linear_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats = Tensor::new(vec![10, 6], (0..60).map(|_| rng.random::<f64>()).collect()).unwrap();
        let w = Tensor::new(vec![6, 3], (0..18).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap();
        let head_then = multiclip_aggregate(&feats.matmul(&w).unwrap()).unwrap();
        let then_head = multiclip_aggregate(&feats).unwrap().matmul(&w).unwrap();
        assert!(head_then.max_abs_diff(&then_head) < 1e-12);
    }

    #[test]
    fn probe_separates_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            rows.push((0..4).map(|j| f64::from(j == c) * 2.0 + 0.1 * (rng.random::<f64>() - 0.5)).collect());
            labels.push(c);
        }
        let x = t(&rows);
        assert_eq!(probe_accuracy((&x, &labels), (&x, &labels), 3, 1e-3).unwrap(), 1.0);
        assert!(linear_probe(&x, &labels, 2, 1e-3).is_err());
    }

    fn problem() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<usize>>)> {
        // small integer scores so ties are common
        (
            prop::collection::vec(0..4i32, 15).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(prop::collection::vec(0..3usize, 0..3), 5),
        )
    }

    proptest! {
        #[test]
        fn map_matches_brute_force((s, labels) in problem()) {
            prop_assume!(labels.iter().any(|l| !l.is_empty()));
            let scores = Tensor::new(vec![5, 3], s).unwrap();
            let labels: Vec<Vec<usize>> = labels.into_iter().map(|mut l| { l.sort(); l.dedup(); l }).collect();
            prop_assert_eq!(mean_average_precision(&scores, &labels).unwrap(), brute_map(&scores, &labels));
        }

        #[test]
        fn recall_matches_brute_force(q in prop::collection::vec(-3..4i32, 15), g in prop::collection::vec(-3..4i32, 15), k in 1..=5usize) {
            let q = Tensor::new(vec![5, 3], q.into_iter().map(|x| f64::from(x) + 0.5).collect()).unwrap();
            let g = Tensor::new(vec![5, 3], g.into_iter().map(|x| f64::from(x) + 0.5).collect()).unwrap();
            // parallel rows tie in exact arithmetic but not after rounding;
            // only identical rows tie bitwise on both sides
            let unit = normalized_rows(&g);
            for i in 0..q.rows() {
                let c: Vec<f64> = unit.iter().map(|u| u.iter().zip(q.row(i)).map(|(a, b)| a * b).sum()).collect();
                for a in 0..5 {
                    for b in 0..a {
                        prop_assume!(g.row(a) == g.row(b) || (c[a] - c[b]).abs() > 1e-9);
                    }
                }
            }
            prop_assert_eq!(recall_at_k(&q, &g, k).unwrap(), brute_recall(&q, &g, k));
        }

        #[test]
        fn recall_nondecreasing_in_k(q in prop::collection::vec(-1.0..1.0f64, 18), g in prop::collection::vec(-1.0..1.0f64, 18)) {
            let q = Tensor::new(vec![6, 3], q).unwrap();
            let g = Tensor::new(vec![6, 3], g).unwrap();
            let r: Vec<f64> = (1..=6).map(|k| recall_at_k(&q, &g, k).unwrap()).collect();
            prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(r[5], 1.0);
        }

        #[test]
        fn metrics_invariant_to_monotone_transform(s in prop::collection::vec(-2.0..2.0f64, 15), labels in prop::collection::vec(0..3usize, 5)) {
            let scores = Tensor::new(vec![5, 3], s).unwrap();
            let warped = scores.map(|x| (3.0 * x).exp() + 1.0);
            let sets: Vec<Vec<usize>> = labels.iter().map(|&l| vec![l]).collect();
            prop_assert_eq!(mean_average_precision(&scores, &sets).unwrap(), mean_average_precision(&warped, &sets).unwrap());
            prop_assert_eq!(accuracy_top1(&scores, &labels).unwrap(), accuracy_top1(&warped, &labels).unwrap());
        }
    }
}
