//! Central finite-difference verification of every differentiable operation.
//!
//! Each check builds a scalar loss from parameter leaves, compares the
//! recorded gradients against central differences with `h = 1e-5` in 64-bit,
//! and reports the max-norm relative error over a set of seeds. Checks that
//! involve hinges or hard selections resample their inputs until every
//! pre-activation and selection gap clears a safety margin; a finite step
//! across a kink would otherwise measure the wrong one-sided slope.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{self, Modality};
use crate::error::Result;
use crate::fourier::{self, RealPolicy};
use crate::loss::{self, Branch};
use crate::model::{self, AgpParams, AnmParams, Model};
use crate::ops::{self, BnStats, NormMode};
use crate::rng;
use crate::tensor::Tensor;
use crate::train;

pub const REL_TOL: f64 = 1e-4;
const FD_H: f64 = 1e-5;
/// Minimum distance of hinge pre-activations and selection gaps from zero.
const KINK_GUARD: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub seeds: usize,
    pub max_rel: f64,
    pub passed: bool,
}

type LossFn<'a> = dyn Fn(&[Tensor]) -> Result<Tensor> + 'a;

/// Max-norm relative error between recorded gradients and central
/// finite differences over all elements of all inputs.
fn fd_rel_error(f: &LossFn, inputs: &[Tensor]) -> Result<f64> {
    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval_at = |idx: usize, data: Vec<f64>| -> Result<f64> {
        let mut v: Vec<Tensor> = inputs.to_vec();
        v[idx] = Tensor::param(inputs[idx].shape().to_vec(), data);
        Ok(f(&v)?.item())
    };

    let mut max_fd: f64 = 0.0;
    let mut max_diff: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = t.data().to_vec();
            plus[j] += FD_H;
            let mut minus = t.data().to_vec();
            minus[j] -= FD_H;
            let fd = (eval_at(i, plus)? - eval_at(i, minus)?) / (2.0 * FD_H);
            max_fd = max_fd.max(fd.abs());
            max_diff = max_diff.max((analytic[i][j] - fd).abs());
        }
    }
    Ok(max_diff / max_fd.max(1e-4))
}

fn rand_vec(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

fn rand_param(r: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, rand_vec(r, n, lo, hi))
}

fn rand_leaf(r: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::leaf(shape, rand_vec(r, n, lo, hi))
}

/// Uniform random image whose spectrum stays clear of zero amplitude, where
/// the phase derivative is ill-conditioned for finite differencing.
fn rand_image_clear_amp(seed: u64, tag: u64, shape: Vec<usize>) -> Tensor {
    for attempt in 0.. {
        let mut r = rng::stream(seed, "gc-img", tag, attempt);
        let x = rand_param(&mut r, shape.clone(), -1.0, 1.0);
        let s = fourier::fft2(&x.detach()).expect("fft of random image");
        if s.amp.data().iter().all(|a| *a > 0.05) {
            return x;
        }
    }
    unreachable!()
}

// ---------------------------------------------------------------------------
// Individual checks
// ---------------------------------------------------------------------------

fn check_conv1x1(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gc-conv1x1", 0, 0);
    let x = rand_param(&mut r, vec![3, 2, 2], -1.0, 1.0);
    let w = rand_param(&mut r, vec![2, 3], -1.0, 1.0);
    let b = rand_param(&mut r, vec![2], -1.0, 1.0);
    let proj = rand_leaf(&mut r, vec![2, 2, 2], -1.0, 1.0);
    fd_rel_error(
        &|inp: &[Tensor]| ops::dot(&ops::conv1x1(&inp[0], &inp[1], &inp[2])?, &proj),
        &[x, w, b],
    )
}

fn check_conv2d(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gc-conv2d", 0, 0);
    let x = rand_param(&mut r, vec![2, 3, 4, 4], -1.0, 1.0);
    let w = rand_param(&mut r, vec![4, 3, 3, 3], -0.5, 0.5);
    let b = rand_param(&mut r, vec![4], -0.5, 0.5);
    let proj = rand_leaf(&mut r, vec![2, 4, 2, 2], -1.0, 1.0);
    fd_rel_error(
        &|inp: &[Tensor]| ops::dot(&ops::conv2d(&inp[0], &inp[1], &inp[2], 2)?, &proj),
        &[x, w, b],
    )
}

fn check_linear(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gc-linear", 0, 0);
    let x = rand_param(&mut r, vec![3, 4], -1.0, 1.0);
    let w = rand_param(&mut r, vec![5, 4], -1.0, 1.0);
    let b = rand_param(&mut r, vec![5], -1.0, 1.0);
    let proj = rand_leaf(&mut r, vec![3, 5], -1.0, 1.0);
    fd_rel_error(
        &|inp: &[Tensor]| ops::dot(&ops::linear(&inp[0], &inp[1], Some(&inp[2]))?, &proj),
        &[x, w, b],
    )
}

fn check_gap(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gc-gap", 0, 0);
    let x = rand_param(&mut r, vec![3, 4, 5], -1.0, 1.0);
    let proj = rand_leaf(&mut r, vec![3, 1, 1], -1.0, 1.0);
    fd_rel_error(&|inp: &[Tensor]| ops::dot(&ops::gap(&inp[0])?, &proj), &[x])
}

fn check_sigmoid(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gc-sigmoid", 0, 0);
    let x = rand_param(&mut r, vec![8], -3.0, 3.0);
    let proj = rand_leaf(&mut r, vec![8], -1.0, 1.0);
    fd_rel_error(&|inp: &[Tensor]| ops::dot(&ops::sigmoid(&inp[0]), &proj), &[x])
}

fn check_batch_norm_train(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gc-bn", 0, 0);
    let x = rand_param(&mut r, vec![4, 3, 2, 2], -1.0, 1.0);
    let gamma = rand_param(&mut r, vec![3], 0.5, 1.5);
    let beta = rand_param(&mut r, vec![3], -0.5, 0.5);
    let proj = rand_leaf(&mut r, vec![4, 3, 2, 2], -1.0, 1.0);
    fd_rel_error(
        &|inp: &[Tensor]| {
            let mut stats = BnStats::new(3);
            ops::dot(
                &ops::batch_norm(&inp[0], &inp[1], &inp[2], &mut stats, NormMode::Train)?,
                &proj,
            )
        },
        &[x, gamma, beta],
    )
}

fn check_batch_norm_eval(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gc-bne", 0, 0);
    let x = rand_param(&mut r, vec![3, 4], -1.0, 1.0);
    let gamma = rand_param(&mut r, vec![4], 0.5, 1.5);
    let beta = rand_param(&mut r, vec![4], -0.5, 0.5);
    let mut stats = BnStats::new(4);
    stats.mean = rand_vec(&mut r, 4, -0.5, 0.5);
    stats.var = rand_vec(&mut r, 4, 0.5, 2.0);
    let proj = rand_leaf(&mut r, vec![3, 4], -1.0, 1.0);
    fd_rel_error(
        &|inp: &[Tensor]| {
            let mut s = stats.clone();
            ops::dot(
                &ops::batch_norm(&inp[0], &inp[1], &inp[2], &mut s, NormMode::Eval)?,
                &proj,
            )
        },
        &[x, gamma, beta],
    )
}

fn check_instance_norm(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gc-in", 0, 0);
    let x = rand_param(&mut r, vec![2, 3, 3, 3], -1.0, 1.0);
    let gamma = rand_param(&mut r, vec![3], 0.5, 1.5);
    let beta = rand_param(&mut r, vec![3], -0.5, 0.5);
    let proj = rand_leaf(&mut r, vec![2, 3, 3, 3], -1.0, 1.0);
    fd_rel_error(
        &|inp: &[Tensor]| {
            ops::dot(
                &ops::instance_norm(&inp[0], Some((&inp[1], &inp[2])))?,
                &proj,
            )
        },
        &[x, gamma, beta],
    )
}

fn check_fft_decompose(seed: u64) -> Result<f64> {
    let x = rand_image_clear_amp(seed, 0, vec![2, 4, 3]);
    let mut r = rng::stream(seed, "gc-fft-proj", 0, 0);
    let pa = rand_leaf(&mut r, vec![2, 4, 3], -1.0, 1.0);
    let pp = rand_leaf(&mut r, vec![2, 4, 3], -1.0, 1.0);
    fd_rel_error(
        &|inp: &[Tensor]| {
            let s = fourier::fft2(&inp[0])?;
            ops::add(&ops::dot(&s.amp, &pa)?, &ops::dot(&s.pha, &pp)?)
        },
        &[x],
    )
}

fn check_resynth(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gc-resynth", 0, 0);
    let amp = rand_param(&mut r, vec![2, 3, 4], 0.5, 1.5);
    let pha = rand_param(&mut r, vec![2, 3, 4], -2.5, 2.5);
    let proj = rand_leaf(&mut r, vec![2, 3, 4], -1.0, 1.0);
    fd_rel_error(
        &|inp: &[Tensor]| {
            let s = fourier::recombine(&inp[0], &inp[1])?;
            ops::dot(&fourier::ifft2(&s, RealPolicy::ForceReal)?, &proj)
        },
        &[amp, pha],
    )
}

fn check_agp(seed: u64) -> Result<f64> {
    let x = rand_image_clear_amp(seed, 1, vec![4, 4, 4]);
    let mut r = rng::stream(seed, "gc-agp", 0, 0);
    let w0 = rand_param(&mut r, vec![2, 4], -0.5, 0.5);
    let b0 = rand_param(&mut r, vec![2], -0.5, 0.5);
    let w1 = rand_param(&mut r, vec![2, 4], -0.5, 0.5);
    let b1 = rand_param(&mut r, vec![2], -0.5, 0.5);
    let proj = rand_leaf(&mut r, vec![4, 4, 4], -1.0, 1.0);
    fd_rel_error(
        &|inp: &[Tensor]| {
            let p = AgpParams {
                k: 2,
                convs: vec![
                    (inp[1].clone(), inp[2].clone()),
                    (inp[3].clone(), inp[4].clone()),
                ],
            };
            ops::dot(&model::agp_forward(&inp[0], &p)?, &proj)
        },
        &[x, w0, b0, w1, b1],
    )
}

fn check_anm(seed: u64) -> Result<f64> {
    let x = rand_image_clear_amp(seed, 2, vec![2, 3, 3, 3]);
    let mut r = rng::stream(seed, "gc-anm", 0, 0);
    let w1 = rand_param(&mut r, vec![3, 3], -0.7, 0.7);
    let b1 = rand_param(&mut r, vec![3], -0.3, 0.3);
    let w2 = rand_param(&mut r, vec![3, 3], -0.7, 0.7);
    let b2 = rand_param(&mut r, vec![3], -0.3, 0.3);
    let gamma = rand_param(&mut r, vec![3], 0.5, 1.5);
    let beta = rand_param(&mut r, vec![3], -0.5, 0.5);
    let p1 = rand_leaf(&mut r, vec![2, 3, 3, 3], -1.0, 1.0);
    let p2 = rand_leaf(&mut r, vec![2, 3, 3, 3], -1.0, 1.0);
    fd_rel_error(
        &|inp: &[Tensor]| {
            let p = AnmParams {
                res1: (inp[1].clone(), inp[2].clone()),
                res2: (inp[3].clone(), inp[4].clone()),
                bn_gamma: inp[5].clone(),
                bn_beta: inp[6].clone(),
                use_in: true,
            };
            let mut stats = BnStats::new(3);
            let (o1, o2) = model::anm_forward(&inp[0], &p, &mut stats, NormMode::Train)?;
            ops::add(&ops::dot(&o1, &p1)?, &ops::dot(&o2, &p2)?)
        },
        &[x, w1, b1, w2, b2, gamma, beta],
    )
}

fn check_cross_entropy(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "gc-ce", 0, 0);
    let logits = rand_param(&mut r, vec![4, 5], -2.0, 2.0);
    let labels = [1usize, 0, 4, 2];
    fd_rel_error(
        &|inp: &[Tensor]| ops::cross_entropy(&inp[0], &labels),
        &[logits],
    )
}

/// Smallest gap between competing selections and the hinge for each anchor.
fn triplet_safety(data: &[f64], n: usize, d: usize, labels: &[usize], margin: f64) -> f64 {
    let dist = |i: usize, j: usize| -> f64 {
        (0..d)
            .map(|k| (data[i * d + k] - data[j * d + k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut guard = f64::INFINITY;
    for a in 0..n {
        let mut pos: Vec<f64> = (0..n)
            .filter(|&j| j != a && labels[j] == labels[a])
            .map(|j| dist(a, j))
            .collect();
        let mut neg: Vec<f64> = (0..n)
            .filter(|&j| labels[j] != labels[a])
            .map(|j| dist(a, j))
            .collect();
        pos.sort_by(|x, y| y.partial_cmp(x).unwrap());
        neg.sort_by(|x, y| x.partial_cmp(y).unwrap());
        if pos.len() > 1 {
            guard = guard.min(pos[0] - pos[1]);
        }
        if neg.len() > 1 {
            guard = guard.min(neg[1] - neg[0]);
        }
        guard = guard.min((pos[0] - neg[0] + margin).abs());
    }
    guard
}

fn check_triplet(seed: u64) -> Result<f64> {
    let labels = [0usize, 0, 1, 1, 2, 2];
    let (n, d) = (6usize, 3usize);
    let emb = (0..)
        .find_map(|attempt| {
            let mut r = rng::stream(seed, "gc-tri", attempt, 0);
            let data = rand_vec(&mut r, n * d, -1.0, 1.0);
            (triplet_safety(&data, n, d, &labels, 0.3) > KINK_GUARD)
                .then(|| Tensor::param(vec![n, d], data))
        })
        .unwrap();
    fd_rel_error(
        &|inp: &[Tensor]| loss::triplet_batch_hard(&inp[0], &labels, 0.3),
        &[emb],
    )
}

struct CnmFixture {
    e1: Tensor,
    e2: Tensor,
    labels: Vec<usize>,
    modalities: Vec<Modality>,
}

fn cnm_centers(
    f: &CnmFixture,
    e1: &Tensor,
    e2: &Tensor,
) -> Result<(loss::CenterSet, loss::CenterSet, loss::CenterSet, loss::CenterSet)> {
    Ok((
        loss::compute_centers(e1, &f.labels, &f.modalities, Modality::Vis, Branch::V1)?,
        loss::compute_centers(e2, &f.labels, &f.modalities, Modality::Vis, Branch::V2)?,
        loss::compute_centers(e1, &f.labels, &f.modalities, Modality::Ir, Branch::I1)?,
        loss::compute_centers(e2, &f.labels, &f.modalities, Modality::Ir, Branch::I2)?,
    ))
}

/// Hinge pre-activations of every branch for the kink guard.
fn cnm_min_pre_activation(f: &CnmFixture, m: f64) -> Result<f64> {
    let (v1, v2, i1, i2) = cnm_centers(f, &f.e1, &f.e2)?;
    let mut min_abs = f64::INFINITY;
    let setups = [(&v1, &i1, &v2), (&v2, &i2, &v1), (&i1, &v1, &i2), (&i2, &v2, &i1)];
    for (anchor, cross, other) in setups {
        let p = anchor.class_ids.len();
        for j in 0..p {
            for k in 0..p {
                if j == k {
                    continue;
                }
                let d = |a: &Tensor, b: &Tensor| -> f64 {
                    a.data()
                        .iter()
                        .zip(b.data())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt()
                };
                let pre = 2.0 * d(&anchor.centers[j], &cross.centers[j])
                    - d(&anchor.centers[j], &other.centers[j])
                    - d(&anchor.centers[j], &anchor.centers[k])
                    + m;
                min_abs = min_abs.min(pre.abs());
            }
        }
    }
    Ok(min_abs)
}

fn cnm_fixture(seed: u64, m: f64) -> CnmFixture {
    let labels = vec![0, 0, 0, 0, 1, 1, 1, 1];
    let modalities = vec![
        Modality::Vis,
        Modality::Vis,
        Modality::Ir,
        Modality::Ir,
        Modality::Vis,
        Modality::Vis,
        Modality::Ir,
        Modality::Ir,
    ];
    for attempt in 0.. {
        let mut r = rng::stream(seed, "gc-cnm", attempt, 0);
        let f = CnmFixture {
            e1: rand_param(&mut r, vec![8, 3], -1.0, 1.0),
            e2: rand_param(&mut r, vec![8, 3], -1.0, 1.0),
            labels: labels.clone(),
            modalities: modalities.clone(),
        };
        // Stay clear of the hinge kink; a finite step across it would
        // measure a one-sided slope.
        if cnm_min_pre_activation(&f, m).unwrap() > KINK_GUARD {
            return f;
        }
    }
    unreachable!()
}

fn check_cnm_branch(seed: u64) -> Result<f64> {
    let m = 0.2;
    let f = cnm_fixture(seed, m);
    let (e1, e2) = (f.e1.clone(), f.e2.clone());
    fd_rel_error(
        &|inp: &[Tensor]| {
            let (v1, _v2, i1, _i2) = cnm_centers(&f, &inp[0], &inp[1])?;
            let (_, v2, _, _) = cnm_centers(&f, &inp[0], &inp[1])?;
            loss::cnm_branch(&v1, &i1, &v2, m)
        },
        &[e1, e2],
    )
}

fn check_cnm_total(seed: u64) -> Result<f64> {
    let m = 0.2;
    let f = cnm_fixture(seed.wrapping_add(1000), m);
    let (e1, e2) = (f.e1.clone(), f.e2.clone());
    fd_rel_error(
        &|inp: &[Tensor]| {
            let (v1, v2, i1, i2) = cnm_centers(&f, &inp[0], &inp[1])?;
            loss::cnm_total(&v1, &v2, &i1, &i2, m)
        },
        &[e1, e2],
    )
}

fn micro_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.apply_desk_preset();
    cfg.seed = seed;
    cfg.num_identities = 2;
    cfg.images_per_identity = 2;
    cfg.image_height = 8;
    cfg.image_width = 8;
    cfg.stage_channels = vec![4, 8];
    cfg.stage_strides = vec![2, 1];
    cfg.agp_after = vec![1];
    cfg.agp_k = 4;
    cfg.parts = 4;
    cfg.p_identities = 2;
    cfg.k_per_modality = 1;
    cfg
}

/// End-to-end objective of the micro model against finite differences over
/// every parameter.
fn check_total_loss(seed: u64) -> Result<f64> {
    let cfg = micro_config(seed);
    let ds = data::generate(&cfg.synth_spec())?;
    let batch = data::pk_sample(&ds, cfg.p_identities, cfg.k_per_modality, cfg.seed, 0, 0)?;
    let (images, labels, modalities) = train::assemble_batch(&ds, &batch, &cfg, 0, 0)?;
    let weights = cfg.loss_weights();

    let base = Model::init(cfg.model_config(ds.num_identities), cfg.seed)?;
    let names = base.params.names();
    let inputs: Vec<Tensor> = names.iter().map(|n| base.params.get(n).unwrap()).collect();
    let stats_snapshot = base.stats.clone();
    let model_cfg = base.cfg.clone();

    fd_rel_error(
        &|inp: &[Tensor]| {
            let mut params = crate::store::ParamStore::new();
            for (name, t) in names.iter().zip(inp) {
                params.insert(name, t.clone())?;
            }
            let mut m = Model {
                cfg: model_cfg.clone(),
                params,
                stats: stats_snapshot.clone(),
            };
            let bundle =
                train::compute_step_loss(&mut m, &images, &modalities, &labels, &weights, true)?;
            Ok(bundle.total)
        },
        &inputs,
    )
}

// ---------------------------------------------------------------------------
// Suite driver
// ---------------------------------------------------------------------------

fn run_check(name: &str, seeds: usize, f: impl Fn(u64) -> Result<f64>) -> Result<CheckReport> {
    let mut max_rel: f64 = 0.0;
    for seed in 0..seeds as u64 {
        max_rel = max_rel.max(f(seed)?);
    }
    Ok(CheckReport {
        name: name.to_string(),
        seeds,
        max_rel,
        passed: max_rel <= REL_TOL,
    })
}

/// Run the whole suite. `seeds` counts random instances per check; the
/// heavyweight end-to-end check uses a reduced but still multi-seed budget.
pub fn run_all(seeds: usize) -> Result<Vec<CheckReport>> {
    let mut reports = vec![
        run_check("conv1x1", seeds, check_conv1x1)?,
        run_check("conv2d", seeds, check_conv2d)?,
        run_check("linear", seeds, check_linear)?,
        run_check("gap", seeds, check_gap)?,
        run_check("sigmoid", seeds, check_sigmoid)?,
        run_check("batch_norm_train", seeds, check_batch_norm_train)?,
        run_check("batch_norm_eval", seeds, check_batch_norm_eval)?,
        run_check("instance_norm", seeds, check_instance_norm)?,
        run_check("fft_decompose", seeds, check_fft_decompose)?,
        run_check("recombine_ifft2", seeds, check_resynth)?,
        run_check("agp_forward", seeds, check_agp)?,
        run_check("anm_forward", seeds, check_anm)?,
        run_check("cross_entropy", seeds, check_cross_entropy)?,
        run_check("triplet_batch_hard", seeds, check_triplet)?,
        run_check("cnm_branch", seeds, check_cnm_branch)?,
        run_check("cnm_total", seeds, check_cnm_total)?,
    ];
    reports.push(run_check("total_loss_micro_model", seeds, check_total_loss)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    // The acceptance suite runs all checks over the full seed budget; these
    // keep the inner dev loop fast.

    #[test]
    fn core_ops_pass_fd_on_a_few_seeds() {
        for report in [
            run_check("conv1x1", 3, check_conv1x1).unwrap(),
            run_check("gap", 3, check_gap).unwrap(),
            run_check("sigmoid", 3, check_sigmoid).unwrap(),
            run_check("batch_norm_train", 3, check_batch_norm_train).unwrap(),
            run_check("instance_norm", 3, check_instance_norm).unwrap(),
        ] {
            assert!(report.passed, "{}: {:e}", report.name, report.max_rel);
        }
    }

    #[test]
    fn spectral_ops_pass_fd_on_a_few_seeds() {
        for report in [
            run_check("fft_decompose", 3, check_fft_decompose).unwrap(),
            run_check("recombine_ifft2", 3, check_resynth).unwrap(),
            run_check("agp_forward", 2, check_agp).unwrap(),
            run_check("anm_forward", 2, check_anm).unwrap(),
        ] {
            assert!(report.passed, "{}: {:e}", report.name, report.max_rel);
        }
    }

    #[test]
    fn loss_ops_pass_fd_on_a_few_seeds() {
        for report in [
            run_check("cross_entropy", 3, check_cross_entropy).unwrap(),
            run_check("triplet", 3, check_triplet).unwrap(),
            run_check("cnm_branch", 3, check_cnm_branch).unwrap(),
            run_check("cnm_total", 3, check_cnm_total).unwrap(),
        ] {
            assert!(report.passed, "{}: {:e}", report.name, report.max_rel);
        }
    }

    #[test]
    fn full_model_passes_fd_on_one_seed() {
        let report = run_check("total_loss", 1, check_total_loss).unwrap();
        assert!(report.passed, "total_loss: {:e}", report.max_rel);
    }
}
