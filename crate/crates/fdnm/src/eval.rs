//! Cross-modality retrieval evaluation: distance matrices, CMC and mAP, and
//! intra/inter-class distance statistics.
//!
//! Ranking ties break toward the lower gallery index. `FDNM_THREADS` caps the
//! row-parallel distance computation; rows are independent and written to
//! disjoint slices, so the result is identical for any thread count.

use crate::data::{Dataset, Modality};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::{self, NormMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Metric> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::invalid("metric", format!("unknown metric {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }
}

/// Flat `n x d` embedding block with retrieval labels.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub vectors: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub ids: Vec<usize>,
    pub cameras: Vec<usize>,
}

impl EmbeddingSet {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }
}

fn threads_cap() -> usize {
    std::env::var("FDNM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|v| *v >= 1)
        .unwrap_or(1)
}

pub fn pair_distance(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        Metric::Cosine => {
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na < 1e-300 || nb < 1e-300 {
                return 1.0;
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            1.0 - dot / (na * nb)
        }
    }
}

/// Pairwise query-gallery distances as a `|Q| x |G|` row-major matrix.
pub fn distance_matrix(q: &EmbeddingSet, g: &EmbeddingSet, metric: Metric) -> Result<Vec<f64>> {
    if q.d != g.d {
        return Err(Error::ShapeMismatch {
            op: "distance_matrix",
            lhs: vec![q.n, q.d],
            rhs: vec![g.n, g.d],
        });
    }
    let mut dist = vec![0.0; q.n * g.n];
    let threads = threads_cap().min(q.n.max(1));
    if threads <= 1 {
        for i in 0..q.n {
            let row = &mut dist[i * g.n..(i + 1) * g.n];
            fill_row(q.row(i), g, metric, row);
        }
    } else {
        let chunk = q.n.div_ceil(threads);
        std::thread::scope(|scope| {
            for (ti, rows) in dist.chunks_mut(chunk * g.n).enumerate() {
                let q = &q;
                let g = &g;
                scope.spawn(move || {
                    for (r, row) in rows.chunks_mut(g.n).enumerate() {
                        fill_row(q.row(ti * chunk + r), g, metric, row);
                    }
                });
            }
        });
    }
    Ok(dist)
}

fn fill_row(qv: &[f64], g: &EmbeddingSet, metric: Metric, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = pair_distance(qv, g.row(j), metric);
    }
}

/// Query/gallery pairing with its distance matrix.
pub struct RetrievalTable {
    pub dist: Vec<f64>,
    pub q_ids: Vec<usize>,
    pub q_cameras: Vec<usize>,
    pub g_ids: Vec<usize>,
    pub g_cameras: Vec<usize>,
    /// Drop same-id same-camera gallery entries from each query's ranking.
    pub camera_filter: bool,
}

impl RetrievalTable {
    pub fn new(q: &EmbeddingSet, g: &EmbeddingSet, metric: Metric, camera_filter: bool) -> Result<Self> {
        Ok(RetrievalTable {
            dist: distance_matrix(q, g, metric)?,
            q_ids: q.ids.clone(),
            q_cameras: q.cameras.clone(),
            g_ids: g.ids.clone(),
            g_cameras: g.cameras.clone(),
            camera_filter,
        })
    }
}

pub struct RetrievalResult {
    /// `cmc[k-1]` is the fraction of evaluated queries with a correct match
    /// in the top k.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Queries without any valid gallery match, excluded from the averages.
    pub excluded: usize,
}

impl RetrievalResult {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[(k - 1).min(self.cmc.len() - 1)]
    }
}

/// CMC curve and mean average precision.
///
/// Gallery entries are ranked per query by ascending distance with ties
/// resolved toward the lower index. Average precision per query is the mean
/// over correct positions `i` (1-based rank) of `correct_in_top_i / i`.
pub fn cmc_map(table: &RetrievalTable) -> Result<RetrievalResult> {
    let nq = table.q_ids.len();
    let ng = table.g_ids.len();
    if ng == 0 {
        return Err(Error::invalid("cmc_map", "empty gallery"));
    }
    if table.dist.len() != nq * ng {
        return Err(Error::invalid("cmc_map", "distance matrix size mismatch"));
    }
    let mut cmc_hits = vec![0.0; ng];
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    for qi in 0..nq {
        let keep: Vec<usize> = (0..ng)
            .filter(|&gi| {
                !(table.camera_filter
                    && table.g_ids[gi] == table.q_ids[qi]
                    && table.g_cameras[gi] == table.q_cameras[qi])
            })
            .collect();
        let has_match = keep.iter().any(|&gi| table.g_ids[gi] == table.q_ids[qi]);
        if !has_match {
            excluded += 1;
            continue;
        }
        evaluated += 1;
        let mut order = keep;
        let row = &table.dist[qi * ng..(qi + 1) * ng];
        order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));

        let mut first_correct = None;
        let mut correct_so_far = 0usize;
        let mut ap = 0.0;
        for (pos, &gi) in order.iter().enumerate() {
            if table.g_ids[gi] == table.q_ids[qi] {
                correct_so_far += 1;
                ap += correct_so_far as f64 / (pos + 1) as f64;
                if first_correct.is_none() {
                    first_correct = Some(pos);
                }
            }
        }
        ap /= correct_so_far as f64;
        ap_sum += ap;
        for k in first_correct.unwrap()..ng {
            cmc_hits[k] += 1.0;
        }
    }
    if evaluated == 0 {
        return Err(Error::invalid("cmc_map", "no query has a valid gallery match"));
    }
    let cmc = cmc_hits.iter().map(|h| h / evaluated as f64).collect();
    Ok(RetrievalResult {
        cmc,
        map: ap_sum / evaluated as f64,
        excluded,
    })
}

/// Cross-modality cosine-distance statistics: all VIS x IR pairs split into
/// same-identity and different-identity populations, with 64-bin histograms
/// over `[0, 2]`.
pub struct DistanceStats {
    pub intra: Vec<f64>,
    pub inter: Vec<f64>,
    pub mean_intra: f64,
    pub mean_inter: f64,
    pub hist_intra: Vec<usize>,
    pub hist_inter: Vec<usize>,
}

pub const HIST_BINS: usize = 64;

pub fn distance_stats(
    emb: &EmbeddingSet,
    modalities: &[Modality],
) -> Result<DistanceStats> {
    if modalities.len() != emb.n {
        return Err(Error::invalid("distance_stats", "modality list size mismatch"));
    }
    let vis: Vec<usize> = (0..emb.n).filter(|&i| modalities[i] == Modality::Vis).collect();
    let ir: Vec<usize> = (0..emb.n).filter(|&i| modalities[i] == Modality::Ir).collect();
    if vis.is_empty() || ir.is_empty() {
        return Err(Error::invalid("distance_stats", "both modalities must be present"));
    }
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for &v in &vis {
        for &i in &ir {
            let d = pair_distance(emb.row(v), emb.row(i), Metric::Cosine);
            if emb.ids[v] == emb.ids[i] {
                intra.push(d);
            } else {
                inter.push(d);
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let hist = |v: &[f64]| {
        let mut h = vec![0usize; HIST_BINS];
        for &d in v {
            let bin = ((d / 2.0) * HIST_BINS as f64).floor() as isize;
            h[bin.clamp(0, HIST_BINS as isize - 1) as usize] += 1;
        }
        h
    };
    Ok(DistanceStats {
        mean_intra: mean(&intra),
        mean_inter: mean(&inter),
        hist_intra: hist(&intra),
        hist_inter: hist(&inter),
        intra,
        inter,
    })
}

// ---------------------------------------------------------------------------
// Embedding extraction
// ---------------------------------------------------------------------------

fn l2_normalize(seg: &mut [f64]) {
    let norm: f64 = seg.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for v in seg {
            *v /= norm;
        }
    }
}

/// Run the model in frozen eval mode over the chosen samples and return the
/// retrieval embeddings: global and stripe post-BN embeddings concatenated,
/// each segment L2-normalized.
pub fn extract_embeddings(model: &mut Model, ds: &Dataset, indices: &[usize]) -> Result<EmbeddingSet> {
    let d_seg = model.cfg.backbone.embed_dim;
    let parts = if model.cfg.use_local {
        model.cfg.backbone.parts
    } else {
        0
    };
    let d = d_seg * (1 + parts);
    let mut vectors = Vec::with_capacity(indices.len() * d);
    let mut ids = Vec::with_capacity(indices.len());
    let mut cameras = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(64) {
        let images: Vec<Tensor> = chunk.iter().map(|&i| ds.samples[i].image.clone()).collect();
        let batch = ops::stack(&images)?;
        let modalities: Vec<Modality> = chunk.iter().map(|&i| ds.samples[i].modality).collect();
        let out = model.forward(&batch, &modalities, NormMode::Eval, true)?;
        for (row, &i) in chunk.iter().enumerate() {
            let mut v = Vec::with_capacity(d);
            let mut seg = out.global.data()[row * d_seg..(row + 1) * d_seg].to_vec();
            l2_normalize(&mut seg);
            v.extend_from_slice(&seg);
            for local in &out.locals {
                let mut seg = local.data()[row * d_seg..(row + 1) * d_seg].to_vec();
                l2_normalize(&mut seg);
                v.extend_from_slice(&seg);
            }
            vectors.extend_from_slice(&v);
            ids.push(ds.samples[i].identity);
            cameras.push(ds.samples[i].camera);
            let _ = i;
        }
    }
    Ok(EmbeddingSet {
        vectors,
        n: indices.len(),
        d,
        ids,
        cameras,
    })
}

/// Cross-modality retrieval on a dataset: IR queries against a VIS gallery.
pub fn evaluate_model(
    model: &mut Model,
    ds: &Dataset,
    metric: Metric,
    camera_filter: bool,
) -> Result<RetrievalResult> {
    let query_idx: Vec<usize> = (0..ds.samples.len())
        .filter(|&i| ds.samples[i].modality == Modality::Ir)
        .collect();
    let gallery_idx: Vec<usize> = (0..ds.samples.len())
        .filter(|&i| ds.samples[i].modality == Modality::Vis)
        .collect();
    if query_idx.is_empty() || gallery_idx.is_empty() {
        return Err(Error::invalid("evaluate_model", "need both modalities present"));
    }
    let q = extract_embeddings(model, ds, &query_idx)?;
    let g = extract_embeddings(model, ds, &gallery_idx)?;
    let table = RetrievalTable::new(&q, &g, metric, camera_filter)?;
    cmc_map(&table)
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

fn write_file(path: &std::path::Path, contents: String) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_cmc_csv(path: &std::path::Path, result: &RetrievalResult) -> Result<()> {
    let mut s = String::from("rank,value\n");
    for (k, v) in result.cmc.iter().enumerate() {
        s.push_str(&format!("{},{}\n", k + 1, v));
    }
    write_file(path, s)
}

pub fn summary_row(result: &RetrievalResult) -> String {
    format!(
        "{},{},{},{},{}",
        result.rank(1),
        result.rank(5),
        result.rank(10),
        result.rank(20),
        result.map
    )
}

pub fn write_summary_csv(path: &std::path::Path, result: &RetrievalResult) -> Result<()> {
    write_file(
        path,
        format!("rank1,rank5,rank10,rank20,mAP\n{}\n", summary_row(result)),
    )
}

pub fn write_dist_hist_csv(path: &std::path::Path, stats: &DistanceStats) -> Result<()> {
    let mut s = String::from("bin_center,intra_count,inter_count\n");
    for b in 0..HIST_BINS {
        let center = (b as f64 + 0.5) * 2.0 / HIST_BINS as f64;
        s.push_str(&format!("{},{},{}\n", center, stats.hist_intra[b], stats.hist_inter[b]));
    }
    write_file(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn set(vectors: Vec<f64>, d: usize, ids: Vec<usize>, cameras: Vec<usize>) -> EmbeddingSet {
        let n = ids.len();
        assert_eq!(vectors.len(), n * d);
        EmbeddingSet {
            vectors,
            n,
            d,
            ids,
            cameras,
        }
    }

    #[test]
    fn identical_vectors_have_zero_distance_in_both_metrics() {
        let a = [0.3, -0.7, 1.1];
        assert_eq!(pair_distance(&a, &a, Metric::Euclidean), 0.0);
        assert!(pair_distance(&a, &a, Metric::Cosine).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_unit_vectors() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert!((pair_distance(&a, &b, Metric::Cosine) - 1.0).abs() < 1e-12);
        assert!((pair_distance(&a, &b, Metric::Euclidean) - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_guard_gives_distance_one() {
        let z = [0.0, 0.0];
        let a = [1.0, 0.0];
        assert_eq!(pair_distance(&z, &a, Metric::Cosine), 1.0);
    }

    #[test]
    fn distance_matrix_matches_loop_oracle() {
        let mut r = rng::stream(1, "dm", 0, 0);
        let qv: Vec<f64> = (0..5 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let gv: Vec<f64> = (0..7 * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let q = set(qv.clone(), 3, vec![0; 5], vec![0; 5]);
        let g = set(gv.clone(), 3, vec![0; 7], vec![0; 7]);
        for metric in [Metric::Euclidean, Metric::Cosine] {
            let m = distance_matrix(&q, &g, metric).unwrap();
            for i in 0..5 {
                for j in 0..7 {
                    let expect = pair_distance(&qv[i * 3..i * 3 + 3], &gv[j * 3..j * 3 + 3], metric);
                    assert!((m[i * 7 + j] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ap_hand_case() {
        // One query; ranking by distance is [correct, wrong, correct].
        let q = set(vec![0.0], 1, vec![1], vec![0]);
        let g = set(vec![0.1, 0.2, 0.3], 1, vec![1, 2, 1], vec![1, 1, 1]);
        let table = RetrievalTable::new(&q, &g, Metric::Euclidean, false).unwrap();
        let res = cmc_map(&table).unwrap();
        assert!((res.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(res.cmc[0], 1.0);
    }

    #[test]
    fn perfect_retrieval_has_unit_cmc_and_map() {
        let q = set(vec![0.0, 10.0], 1, vec![0, 1], vec![0, 0]);
        let g = set(vec![0.1, 9.9, 5.0], 1, vec![0, 1, 2], vec![1, 1, 1]);
        let table = RetrievalTable::new(&q, &g, Metric::Euclidean, false).unwrap();
        let res = cmc_map(&table).unwrap();
        assert_eq!(res.map, 1.0);
        assert!(res.cmc.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn ties_break_toward_lower_gallery_index() {
        // Both gallery entries at the same distance; the correct one has the
        // lower index, so rank-1 must hit.
        let q = set(vec![0.0], 1, vec![3], vec![0]);
        let g = set(vec![1.0, 1.0], 1, vec![3, 9], vec![1, 1]);
        let table = RetrievalTable::new(&q, &g, Metric::Euclidean, false).unwrap();
        let res = cmc_map(&table).unwrap();
        assert_eq!(res.cmc[0], 1.0);
    }

    #[test]
    fn cmc_is_monotone_and_saturates() {
        let mut r = rng::stream(5, "cmc", 0, 0);
        let nq = 20;
        let ng = 50;
        let qv: Vec<f64> = (0..nq * 4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let gv: Vec<f64> = (0..ng * 4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let q = set(qv, 4, (0..nq).map(|i| i % 10).collect(), vec![0; nq]);
        let g = set(gv, 4, (0..ng).map(|i| i % 10).collect(), vec![1; ng]);
        let table = RetrievalTable::new(&q, &g, Metric::Euclidean, false).unwrap();
        let res = cmc_map(&table).unwrap();
        for k in 1..res.cmc.len() {
            assert!(res.cmc[k] >= res.cmc[k - 1]);
        }
        assert_eq!(res.cmc[ng - 1], 1.0);
        assert_eq!(res.excluded, 0);
    }

    #[test]
    fn queries_without_valid_match_are_excluded_and_counted() {
        let q = set(vec![0.0, 1.0], 1, vec![0, 99], vec![0, 0]);
        let g = set(vec![0.5], 1, vec![0], vec![1]);
        let table = RetrievalTable::new(&q, &g, Metric::Euclidean, false).unwrap();
        let res = cmc_map(&table).unwrap();
        assert_eq!(res.excluded, 1);
        assert_eq!(res.map, 1.0);
    }

    #[test]
    fn camera_filter_drops_same_camera_matches() {
        // The only same-id gallery entry shares the query's camera; with the
        // filter on, that query has no valid match left.
        let q = set(vec![0.0], 1, vec![0], vec![0]);
        let g = set(vec![0.1, 0.2], 1, vec![0, 1], vec![0, 1]);
        let table = RetrievalTable::new(&q, &g, Metric::Euclidean, true).unwrap();
        assert!(cmc_map(&table).is_err());
    }

    #[test]
    fn two_ids_one_sample_each_gives_two_intra_two_inter_pairs() {
        let emb = set(
            vec![0.0, 1.0, 0.1, 1.0, 1.0, 0.0, 1.1, 0.0],
            2,
            vec![0, 1, 0, 1],
            vec![0, 0, 1, 1],
        );
        let mods = [Modality::Vis, Modality::Vis, Modality::Ir, Modality::Ir];
        let stats = distance_stats(&emb, &mods).unwrap();
        assert_eq!(stats.intra.len(), 2);
        assert_eq!(stats.inter.len(), 2);
    }

    #[test]
    fn identical_embeddings_make_both_means_zero() {
        let emb = set(vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 2, vec![0, 1, 0, 1], vec![0; 4]);
        let mods = [Modality::Vis, Modality::Vis, Modality::Ir, Modality::Ir];
        let stats = distance_stats(&emb, &mods).unwrap();
        assert!(stats.mean_intra.abs() < 1e-12);
        assert!(stats.mean_inter.abs() < 1e-12);
    }

    #[test]
    fn pair_partition_matches_loop_oracle() {
        let mut r = rng::stream(9, "ds", 0, 0);
        let n = 10;
        let vectors: Vec<f64> = (0..n * 3).map(|_| r.gen_range(-1.0..1.0)).collect();
        let ids: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let mods: Vec<Modality> = (0..n)
            .map(|i| if i < 5 { Modality::Vis } else { Modality::Ir })
            .collect();
        let emb = set(vectors, 3, ids.clone(), vec![0; n]);
        let stats = distance_stats(&emb, &mods).unwrap();
        let mut intra = 0;
        let mut inter = 0;
        for v in 0..5 {
            for i in 5..n {
                if ids[v] == ids[i] {
                    intra += 1;
                } else {
                    inter += 1;
                }
            }
        }
        assert_eq!(stats.intra.len(), intra);
        assert_eq!(stats.inter.len(), inter);
        assert_eq!(stats.intra.len() + stats.inter.len(), 25);
    }

    #[test]
    fn rank_statistics_survive_monotone_distance_transforms() {
        let mut r = rng::stream(11, "mono", 0, 0);
        let nq = 8;
        let ng = 20;
        let q = set(
            (0..nq * 3).map(|_| r.gen_range(-1.0..1.0)).collect(),
            3,
            (0..nq).map(|i| i % 4).collect(),
            vec![0; nq],
        );
        let g = set(
            (0..ng * 3).map(|_| r.gen_range(-1.0..1.0)).collect(),
            3,
            (0..ng).map(|i| i % 4).collect(),
            vec![1; ng],
        );
        let mut table = RetrievalTable::new(&q, &g, Metric::Euclidean, false).unwrap();
        let base = cmc_map(&table).unwrap();
        for d in table.dist.iter_mut() {
            *d = d.powi(3) * 2.0 + 1.0;
        }
        let transformed = cmc_map(&table).unwrap();
        assert_eq!(base.map, transformed.map);
        assert_eq!(base.cmc, transformed.cmc);
    }
}
