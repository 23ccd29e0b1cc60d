//! Identity, triplet, and center-guided nuances mining losses.
//!
//! The nuances loss works on per-class centers of the four branch/modality
//! embedding streams (v1, v2, i1, i2). For an anchor stream, each ordered
//! class pair (j, k) with different labels contributes
//! `[2 D(a_j, x_j) - D(a_j, o_j) - D(a_j, a_k) + m]_+` where `x` is the same
//! branch in the other modality and `o` the other branch in the same
//! modality: cross-modality same-class centers are pulled together while the
//! two branches and different classes stay apart. Gradients flow through the
//! centers into the embeddings.

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Loss balance: Eq-9 style `id + lambda1 * tri + lambda2 * cnm`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Margin of the nuances mining hinge.
    pub margin_cnm: f64,
    pub margin_tri: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.5,
            margin_cnm: 0.2,
            margin_tri: 0.3,
        }
    }
}

/// Mean over anchors of `[hardest positive - hardest negative + margin]_+`
/// with Euclidean distances inside the minibatch.
pub fn triplet_batch_hard(embeddings: &Tensor, labels: &[usize], margin: f64) -> Result<Tensor> {
    let &[n, _] = embeddings.shape() else {
        return Err(Error::invalid(
            "triplet_batch_hard",
            format!("expected [N,D], got {:?}", embeddings.shape()),
        ));
    };
    if labels.len() != n {
        return Err(Error::invalid(
            "triplet_batch_hard",
            format!("{} labels for {n} embeddings", labels.len()),
        ));
    }
    for (i, &l) in labels.iter().enumerate() {
        let same = labels.iter().filter(|x| **x == l).count();
        if same < 2 {
            return Err(Error::BadLabel(l, "needs at least 2 samples".into()));
        }
        let other = labels.iter().any(|x| *x != l);
        if !other {
            return Err(Error::BadLabel(labels[i], "needs at least one other label".into()));
        }
    }

    let dist = ops::pairwise_dist(embeddings)?;
    let d = dist.data();
    let mut pos_pairs = Vec::with_capacity(n);
    let mut neg_pairs = Vec::with_capacity(n);
    for a in 0..n {
        let mut hardest_pos = (0usize, f64::NEG_INFINITY);
        let mut hardest_neg = (0usize, f64::INFINITY);
        for j in 0..n {
            if j == a {
                continue;
            }
            let dv = d[a * n + j];
            if labels[j] == labels[a] {
                if dv > hardest_pos.1 {
                    hardest_pos = (j, dv);
                }
            } else if dv < hardest_neg.1 {
                hardest_neg = (j, dv);
            }
        }
        pos_pairs.push((a, hardest_pos.0));
        neg_pairs.push((a, hardest_neg.0));
    }
    let pos = ops::gather2d(&dist, &pos_pairs)?;
    let neg = ops::gather2d(&dist, &neg_pairs)?;
    let hinge = ops::relu(&ops::affine(&ops::sub(&pos, &neg)?, 1.0, margin));
    Ok(ops::mean_all(&hinge))
}

/// Which embedding stream a center set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    V1,
    V2,
    I1,
    I2,
}

/// Per-class centers of one branch/modality stream in a minibatch.
pub struct CenterSet {
    pub branch: Branch,
    /// Class ids in first-appearance order; each appears exactly once.
    pub class_ids: Vec<usize>,
    /// One `[D]` center per class id, gradient-connected to the embeddings.
    pub centers: Vec<Tensor>,
}

/// Arithmetic per-class means of the rows belonging to `modality`.
pub fn compute_centers(
    embeddings: &Tensor,
    labels: &[usize],
    modalities: &[Modality],
    modality: Modality,
    branch: Branch,
) -> Result<CenterSet> {
    let &[n, _] = embeddings.shape() else {
        return Err(Error::invalid(
            "compute_centers",
            format!("expected [N,D], got {:?}", embeddings.shape()),
        ));
    };
    if labels.len() != n || modalities.len() != n {
        return Err(Error::invalid(
            "compute_centers",
            "labels/modalities must match the batch size",
        ));
    }
    let mut class_ids = Vec::new();
    for &l in labels {
        if !class_ids.contains(&l) {
            class_ids.push(l);
        }
    }
    let mut centers = Vec::with_capacity(class_ids.len());
    for &id in &class_ids {
        let rows: Vec<usize> = (0..n)
            .filter(|&i| labels[i] == id && modalities[i] == modality)
            .collect();
        if rows.is_empty() {
            return Err(Error::BadLabel(
                id,
                format!("no {} samples in the minibatch", modality.as_str()),
            ));
        }
        centers.push(ops::rows_mean(embeddings, &rows)?);
    }
    Ok(CenterSet {
        branch,
        class_ids,
        centers,
    })
}

fn check_class_sets(op: &'static str, a: &CenterSet, b: &CenterSet) -> Result<()> {
    if a.class_ids != b.class_ids {
        return Err(Error::invalid(
            op,
            format!("class sets differ: {:?} vs {:?}", a.class_ids, b.class_ids),
        ));
    }
    Ok(())
}

/// Nuances hinge for one anchor stream over all ordered different-class
/// pairs. `cross` is the same branch in the other modality, `other` the
/// other branch in the same modality.
pub fn cnm_branch(
    anchor: &CenterSet,
    cross: &CenterSet,
    other: &CenterSet,
    m: f64,
) -> Result<Tensor> {
    check_class_sets("cnm_branch", anchor, cross)?;
    check_class_sets("cnm_branch", anchor, other)?;
    let p = anchor.class_ids.len();
    if p < 2 {
        return Ok(Tensor::scalar(0.0));
    }
    let mut terms = Vec::with_capacity(p * (p - 1));
    for j in 0..p {
        let pull = ops::euclidean(&anchor.centers[j], &cross.centers[j])?;
        let spread = ops::euclidean(&anchor.centers[j], &other.centers[j])?;
        for k in 0..p {
            if k == j {
                continue;
            }
            let separate = ops::euclidean(&anchor.centers[j], &anchor.centers[k])?;
            let pre = ops::weighted_sum(&[&pull, &spread, &separate], &[2.0, -1.0, -1.0])?;
            terms.push(ops::relu(&ops::affine(&pre, 1.0, m)));
        }
    }
    let refs: Vec<&Tensor> = terms.iter().collect();
    ops::weighted_sum(&refs, &vec![1.0; refs.len()])
}

/// Mean of the four per-stream hinges with the partner assignment
/// v1->(i1,v2), v2->(i2,v1), i1->(v1,i2), i2->(v2,i1).
pub fn cnm_total(
    v1: &CenterSet,
    v2: &CenterSet,
    i1: &CenterSet,
    i2: &CenterSet,
    m: f64,
) -> Result<Tensor> {
    let lv1 = cnm_branch(v1, i1, v2, m)?;
    let lv2 = cnm_branch(v2, i2, v1, m)?;
    let li1 = cnm_branch(i1, v1, i2, m)?;
    let li2 = cnm_branch(i2, v2, i1, m)?;
    ops::weighted_sum(&[&lv1, &lv2, &li1, &li2], &[0.25; 4])
}

/// All scalar pieces of one training step's objective.
pub struct LossBundle {
    pub total: Tensor,
    pub id: Tensor,
    pub tri: Tensor,
    pub cnm: Tensor,
}

/// Weighted combination `id + lambda1 * tri + lambda2 * cnm`.
pub fn combine(id: &Tensor, tri: &Tensor, cnm: &Tensor, w: &LossWeights) -> Result<Tensor> {
    ops::weighted_sum(&[id, tri, cnm], &[1.0, w.lambda1, w.lambda2])
}

/// Full objective over the global and local heads.
///
/// Identity and triplet losses are averaged over every provided head
/// (global first, then locals); the nuances loss comes from the four branch
/// center sets when present, otherwise it contributes a constant zero.
pub fn total_loss(
    logits: &[&Tensor],
    embeddings: &[&Tensor],
    labels: &[usize],
    centers: Option<(&CenterSet, &CenterSet, &CenterSet, &CenterSet)>,
    w: &LossWeights,
) -> Result<LossBundle> {
    if logits.is_empty() || logits.len() != embeddings.len() {
        return Err(Error::invalid(
            "total_loss",
            "need matching, non-empty logits and embeddings lists",
        ));
    }
    let head_w = 1.0 / logits.len() as f64;
    let ces: Vec<Tensor> = logits
        .iter()
        .map(|l| ops::cross_entropy(l, labels))
        .collect::<Result<_>>()?;
    let ce_refs: Vec<&Tensor> = ces.iter().collect();
    let id = ops::weighted_sum(&ce_refs, &vec![head_w; ce_refs.len()])?;

    let tris: Vec<Tensor> = embeddings
        .iter()
        .map(|e| triplet_batch_hard(e, labels, w.margin_tri))
        .collect::<Result<_>>()?;
    let tri_refs: Vec<&Tensor> = tris.iter().collect();
    let tri = ops::weighted_sum(&tri_refs, &vec![head_w; tri_refs.len()])?;

    let cnm = match centers {
        Some((v1, v2, i1, i2)) => cnm_total(v1, v2, i1, i2, w.margin_cnm)?,
        None => Tensor::scalar(0.0),
    };
    let total = combine(&id, &tri, &cnm, w)?;
    Ok(LossBundle { total, id, tri, cnm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn centers_1d(branch: Branch, values: &[f64]) -> CenterSet {
        CenterSet {
            branch,
            class_ids: (0..values.len()).collect(),
            centers: values.iter().map(|v| Tensor::param(vec![1], vec![*v])).collect(),
        }
    }

    #[test]
    fn triplet_hand_case_is_zero() {
        let e = Tensor::leaf(vec![4, 1], vec![0.0, 0.1, 1.0, 1.1]);
        let labels = [0, 0, 1, 1];
        let l = triplet_batch_hard(&e, &labels, 0.3).unwrap();
        assert!(l.item().abs() < 1e-12);
    }

    #[test]
    fn triplet_of_identical_embeddings_is_the_margin() {
        let e = Tensor::leaf(vec![4, 2], vec![0.5; 8]);
        let labels = [0, 0, 1, 1];
        let l = triplet_batch_hard(&e, &labels, 0.3).unwrap();
        assert!((l.item() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn triplet_zero_margin_separated_clusters_is_zero() {
        let e = Tensor::leaf(vec![4, 1], vec![0.0, 0.01, 10.0, 10.01]);
        let labels = [0, 0, 1, 1];
        let l = triplet_batch_hard(&e, &labels, 0.0).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn triplet_matches_brute_force_over_all_triplets() {
        for seed in 0..10u64 {
            let mut r = rng::stream(seed, "tri-oracle", 0, 0);
            let n = 12;
            let d = 3;
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let data: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
            let e = Tensor::leaf(vec![n, d], data.clone());
            let got = triplet_batch_hard(&e, &labels, 0.3).unwrap().item();

            let dist = |i: usize, j: usize| -> f64 {
                (0..d)
                    .map(|k| (data[i * d + k] - data[j * d + k]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let mut total = 0.0;
            for a in 0..n {
                let mut worst: f64 = 0.0;
                for p in 0..n {
                    if p == a || labels[p] != labels[a] {
                        continue;
                    }
                    for ng in 0..n {
                        if labels[ng] == labels[a] {
                            continue;
                        }
                        worst = worst.max((dist(a, p) - dist(a, ng) + 0.3).max(0.0));
                    }
                }
                total += worst;
            }
            let expect = total / n as f64;
            assert!((got - expect).abs() < 1e-12, "seed {seed}: {got} vs {expect}");
        }
    }

    #[test]
    fn triplet_rejects_singleton_label() {
        let e = Tensor::leaf(vec![3, 1], vec![0.0, 1.0, 2.0]);
        let err = triplet_batch_hard(&e, &[0, 0, 7], 0.3).unwrap_err().to_string();
        assert!(err.contains('7'), "{err}");
    }

    #[test]
    fn centers_of_single_samples_are_the_samples() {
        let e = Tensor::leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let cs = compute_centers(
            &e,
            &[0, 1],
            &[Modality::Vis, Modality::Vis],
            Modality::Vis,
            Branch::V1,
        )
        .unwrap();
        assert_eq!(cs.centers[0].data(), &[1.0, 2.0]);
        assert_eq!(cs.centers[1].data(), &[3.0, 4.0]);
    }

    #[test]
    fn centers_are_arithmetic_means() {
        let e = Tensor::leaf(vec![2, 2], vec![0.0, 0.0, 2.0, 2.0]);
        let cs = compute_centers(
            &e,
            &[5, 5],
            &[Modality::Ir, Modality::Ir],
            Modality::Ir,
            Branch::I1,
        )
        .unwrap();
        assert_eq!(cs.centers[0].data(), &[1.0, 1.0]);
    }

    #[test]
    fn centers_match_loop_oracle_and_reject_empty_classes() {
        let mut r = rng::stream(3, "centers", 0, 0);
        let n = 8;
        let data: Vec<f64> = (0..n * 2).map(|_| r.gen_range(-1.0..1.0)).collect();
        let e = Tensor::leaf(vec![n, 2], data.clone());
        let labels = [0, 0, 1, 1, 0, 1, 0, 1];
        let mods = [
            Modality::Vis,
            Modality::Ir,
            Modality::Vis,
            Modality::Ir,
            Modality::Vis,
            Modality::Ir,
            Modality::Ir,
            Modality::Vis,
        ];
        let cs = compute_centers(&e, &labels, &mods, Modality::Vis, Branch::V1).unwrap();
        for (ci, &id) in cs.class_ids.iter().enumerate() {
            let rows: Vec<usize> = (0..n)
                .filter(|&i| labels[i] == id && mods[i] == Modality::Vis)
                .collect();
            for k in 0..2 {
                let expect: f64 =
                    rows.iter().map(|&ri| data[ri * 2 + k]).sum::<f64>() / rows.len() as f64;
                assert!((cs.centers[ci].data()[k] - expect).abs() < 1e-12);
            }
        }
        let only_vis = [Modality::Vis; 8];
        assert!(compute_centers(&e, &labels, &only_vis, Modality::Ir, Branch::I1).is_err());
    }

    #[test]
    fn cnm_branch_single_class_is_zero() {
        let v1 = centers_1d(Branch::V1, &[0.3]);
        let i1 = centers_1d(Branch::I1, &[0.9]);
        let v2 = centers_1d(Branch::V2, &[0.1]);
        let l = cnm_branch(&v1, &i1, &v2, 0.2).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn cnm_branch_hand_enumeration() {
        let v1 = centers_1d(Branch::V1, &[0.0, 1.0]);
        let i1 = centers_1d(Branch::I1, &[2.0, 1.0]);
        let v2 = centers_1d(Branch::V2, &[0.0, 1.0]);
        let l = cnm_branch(&v1, &i1, &v2, 0.2).unwrap();
        assert!((l.item() - 3.2).abs() < 1e-12);
    }

    #[test]
    fn cnm_branch_inactive_hinge_is_zero() {
        let v1 = centers_1d(Branch::V1, &[0.0, 10.0]);
        let i1 = centers_1d(Branch::I1, &[1.0, 10.0]);
        let v2 = centers_1d(Branch::V2, &[0.5, 10.0]);
        let l = cnm_branch(&v1, &i1, &v2, 0.2).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn cnm_branch_is_permutation_and_translation_invariant() {
        let mut r = rng::stream(5, "cnm-inv", 0, 0);
        let vals: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let mk = |v: &[f64], order: &[usize], shift: f64| CenterSet {
            branch: Branch::V1,
            class_ids: order.to_vec(),
            centers: order
                .iter()
                .map(|&i| Tensor::leaf(vec![1], vec![v[i] + shift]))
                .collect(),
        };
        let base = cnm_branch(
            &mk(&vals[0], &[0, 1, 2, 3], 0.0),
            &mk(&vals[1], &[0, 1, 2, 3], 0.0),
            &mk(&vals[2], &[0, 1, 2, 3], 0.0),
            0.2,
        )
        .unwrap()
        .item();
        let permuted = cnm_branch(
            &mk(&vals[0], &[2, 0, 3, 1], 0.0),
            &mk(&vals[1], &[2, 0, 3, 1], 0.0),
            &mk(&vals[2], &[2, 0, 3, 1], 0.0),
            0.2,
        )
        .unwrap()
        .item();
        let shifted = cnm_branch(
            &mk(&vals[0], &[0, 1, 2, 3], 7.5),
            &mk(&vals[1], &[0, 1, 2, 3], 7.5),
            &mk(&vals[2], &[0, 1, 2, 3], 7.5),
            0.2,
        )
        .unwrap()
        .item();
        assert!((base - permuted).abs() < 1e-10);
        assert!((base - shifted).abs() < 1e-10);
    }

    #[test]
    fn cnm_branch_is_nonnegative_and_monotone_in_margin() {
        let mut r = rng::stream(7, "cnm-mono", 0, 0);
        for _ in 0..20 {
            let vals: Vec<Vec<f64>> =
                (0..3).map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
            let mk = |v: &[f64]| centers_1d(Branch::V1, v);
            let mut prev = -1.0;
            for m in [0.0, 0.1, 0.2, 0.5, 1.0] {
                let l = cnm_branch(&mk(&vals[0]), &mk(&vals[1]), &mk(&vals[2]), m)
                    .unwrap()
                    .item();
                assert!(l >= 0.0);
                assert!(l >= prev);
                prev = l;
            }
        }
    }

    #[test]
    fn cnm_branch_weakly_decreases_as_cross_modality_gap_shrinks() {
        let v1 = centers_1d(Branch::V1, &[0.0, 1.0]);
        let v2 = centers_1d(Branch::V2, &[0.2, 0.8]);
        let mut prev = f64::INFINITY;
        for gap in [2.0, 1.5, 1.0, 0.5, 0.1] {
            let i1 = centers_1d(Branch::I1, &[gap, 1.0 + gap]);
            let l = cnm_branch(&v1, &i1, &v2, 0.2).unwrap().item();
            assert!(l <= prev + 1e-12, "loss rose as the gap shrank");
            prev = l;
        }
    }

    #[test]
    fn cnm_total_of_identical_separated_sets_is_zero() {
        // All four streams coincide and the two classes sit far apart, so
        // every branch hinge is inactive.
        let mk = |b| centers_1d(b, &[0.0, 10.0]);
        let l = cnm_total(
            &mk(Branch::V1),
            &mk(Branch::V2),
            &mk(Branch::I1),
            &mk(Branch::I2),
            0.2,
        )
        .unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn cnm_total_single_class_is_zero() {
        let mk = |b| centers_1d(b, &[3.0]);
        let l = cnm_total(
            &mk(Branch::V1),
            &mk(Branch::V2),
            &mk(Branch::I1),
            &mk(Branch::I2),
            0.2,
        )
        .unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn cnm_total_of_equal_branch_losses_equals_one_branch() {
        // A fully symmetric construction: v1 <-> i1 and v2 <-> i2 mirror each
        // other, so all four branch losses coincide and the mean equals any
        // one of them.
        let v1 = centers_1d(Branch::V1, &[0.0, 1.0]);
        let v2 = centers_1d(Branch::V2, &[0.0, 1.0]);
        let i1 = centers_1d(Branch::I1, &[2.0, 1.0]);
        let i2 = centers_1d(Branch::I2, &[2.0, 1.0]);
        let branch = cnm_branch(&v1, &i1, &v2, 0.2).unwrap().item();
        let b2 = cnm_branch(&v2, &i2, &v1, 0.2).unwrap().item();
        let b3 = cnm_branch(&i1, &v1, &i2, 0.2).unwrap().item();
        let b4 = cnm_branch(&i2, &v2, &i1, 0.2).unwrap().item();
        assert!((branch - b2).abs() < 1e-12);
        assert!((branch - b3).abs() < 1e-12);
        assert!((branch - b4).abs() < 1e-12);
        let total = cnm_total(&v1, &v2, &i1, &i2, 0.2).unwrap().item();
        assert!((total - branch).abs() < 1e-12);
    }

    #[test]
    fn cnm_branch_rejects_mismatched_class_sets() {
        let a = centers_1d(Branch::V1, &[0.0, 1.0]);
        let mut b = centers_1d(Branch::I1, &[0.0, 1.0]);
        b.class_ids = vec![0, 7];
        let c = centers_1d(Branch::V2, &[0.0, 1.0]);
        assert!(cnm_branch(&a, &b, &c, 0.2).is_err());
    }

    #[test]
    fn combine_is_the_weighted_sum_of_unit_losses() {
        let one = Tensor::scalar(1.0);
        let w = LossWeights::default();
        let total = combine(&one, &one, &one, &w).unwrap();
        assert!((total.item() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn total_loss_with_zero_weights_is_the_id_loss() {
        let mut r = rng::stream(9, "total", 0, 0);
        let logits = Tensor::leaf(vec![4, 3], (0..12).map(|_| r.gen_range(-1.0..1.0)).collect());
        let emb = Tensor::leaf(vec![4, 2], (0..8).map(|_| r.gen_range(-1.0..1.0)).collect());
        let labels = [0, 0, 1, 1];
        let w = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            ..LossWeights::default()
        };
        let bundle = total_loss(&[&logits], &[&emb], &labels, None, &w).unwrap();
        let ce = ops::cross_entropy(&logits, &labels).unwrap();
        assert!((bundle.total.item() - ce.item()).abs() < 1e-12);
        assert_eq!(bundle.cnm.item(), 0.0);
    }

    #[test]
    fn total_loss_decomposition_identity_holds() {
        let mut r = rng::stream(11, "total2", 0, 0);
        let logits = Tensor::leaf(vec![6, 3], (0..18).map(|_| r.gen_range(-1.0..1.0)).collect());
        let emb = Tensor::leaf(vec![6, 4], (0..24).map(|_| r.gen_range(-1.0..1.0)).collect());
        let labels = [0, 0, 0, 1, 1, 1];
        let w = LossWeights::default();
        let bundle = total_loss(&[&logits], &[&emb], &labels, None, &w).unwrap();
        let recon = bundle.id.item() + w.lambda1 * bundle.tri.item() + w.lambda2 * bundle.cnm.item();
        assert!((bundle.total.item() - recon).abs() < 1e-10);
    }
}
