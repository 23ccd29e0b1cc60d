//! The two frequency-domain modules, the toy two-stream backbone, and the
//! shared-neck embedding head.
//!
//! The amplitude-guided-phase (AGP) module pools the amplitude plane, runs K
//! parallel pointwise convolutions whose concatenation restores the channel
//! count, squashes the result into a per-channel gate, and rescales the phase
//! with `gate * phase + phase` before resynthesis. The amplitude-nuances-
//! mining (ANM) module learns two amplitude variants through pointwise
//! convolution and instance normalization, recombines each with the original
//! phase, and normalizes both branch outputs with one shared batch-norm site.

use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::fourier::{self, RealPolicy};
use crate::ops::{self, BnStats, NormMode};
use crate::rng;
use crate::store::ParamStore;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// AGP
// ---------------------------------------------------------------------------

/// Parameters of one AGP site: K non-shared pointwise kernels, each mapping
/// the pooled `[C]` amplitude to `[C/K]`.
pub struct AgpParams {
    pub k: usize,
    /// `(kernel [C/K, C], bias [C/K])` per branch.
    pub convs: Vec<(Tensor, Tensor)>,
}

/// Gate the phase of a single feature map by its pooled amplitude.
///
/// Returns the resynthesized spatial map. Fully differentiable in the input
/// and in every AGP parameter.
pub fn agp_forward(x_spa: &Tensor, p: &AgpParams) -> Result<Tensor> {
    let &[c, _, _] = x_spa.shape() else {
        return Err(Error::invalid(
            "agp_forward",
            format!("expected [C,H,W], got {:?}", x_spa.shape()),
        ));
    };
    if p.k == 0 || c % p.k != 0 || p.convs.len() != p.k {
        return Err(Error::invalid(
            "agp_forward",
            format!("{c} channels not divisible into {} branches", p.k),
        ));
    }
    let spectrum = fourier::fft2(x_spa)?;
    let pooled = ops::gap(&spectrum.amp)?;
    let mut parts = Vec::with_capacity(p.k);
    for (w, b) in &p.convs {
        parts.push(ops::conv1x1(&pooled, w, b)?);
    }
    let gate = ops::sigmoid(&ops::concat_channels(&parts)?);
    let gated = ops::scale_channels(&spectrum.pha, &gate)?;
    let new_pha = ops::add(&gated, &spectrum.pha)?;
    fourier::ifft2(
        &fourier::recombine(&spectrum.amp, &new_pha)?,
        RealPolicy::ForceReal,
    )
}

/// Batched AGP over `[N,C,H,W]`: the same arithmetic as mapping
/// [`agp_forward`] over the batch, in one set of graph nodes. The pooled
/// amplitude is a per-sample vector, so each branch kernel acts as a linear
/// map on it.
pub fn agp_forward_batch(x_spa: &Tensor, p: &AgpParams) -> Result<Tensor> {
    let &[_, c, h, _] = x_spa.shape() else {
        return Err(Error::invalid(
            "agp_forward_batch",
            format!("expected [N,C,H,W], got {:?}", x_spa.shape()),
        ));
    };
    if p.k == 0 || c % p.k != 0 || p.convs.len() != p.k {
        return Err(Error::invalid(
            "agp_forward_batch",
            format!("{c} channels not divisible into {} branches", p.k),
        ));
    }
    let spectrum = fourier::fft2(x_spa)?;
    let pooled = ops::gap_rows(&spectrum.amp, 0, h)?;
    let mut parts = Vec::with_capacity(p.k);
    for (w, b) in &p.convs {
        parts.push(ops::linear(&pooled, w, Some(b))?);
    }
    let gate = ops::sigmoid(&ops::concat_channels(&parts)?);
    let gated = ops::scale_channels(&spectrum.pha, &gate)?;
    let new_pha = ops::add(&gated, &spectrum.pha)?;
    fourier::ifft2(
        &fourier::recombine(&spectrum.amp, &new_pha)?,
        RealPolicy::ForceReal,
    )
}

// ---------------------------------------------------------------------------
// ANM
// ---------------------------------------------------------------------------

/// Parameters of the dual-branch amplitude mining module. One batch-norm
/// parameter/statistic set is shared by both branches.
pub struct AnmParams {
    pub res1: (Tensor, Tensor),
    pub res2: (Tensor, Tensor),
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    /// Branch instance normalization; disabled only by tests probing the
    /// identity path.
    pub use_in: bool,
}

/// Mine two amplitude variants of a batched feature map.
///
/// Returns the two branch maps in fixed order, both carrying the input's
/// phase and normalized by the shared batch-norm site (branch one first,
/// then branch two, which fixes the running-statistics update order).
pub fn anm_forward(
    f_spa: &Tensor,
    p: &AnmParams,
    stats: &mut BnStats,
    mode: NormMode,
) -> Result<(Tensor, Tensor)> {
    if f_spa.shape().len() != 4 {
        return Err(Error::invalid(
            "anm_forward",
            format!("expected [N,C,H,W], got {:?}", f_spa.shape()),
        ));
    }
    let spectrum = fourier::fft2(f_spa)?;
    let mut branches = Vec::with_capacity(2);
    for (w, b) in [&p.res1, &p.res2] {
        let mut amp = ops::conv1x1(&spectrum.amp, w, b)?;
        if p.use_in {
            amp = ops::instance_norm(&amp, None)?;
        }
        let spatial = fourier::resynth_edited(&amp, &spectrum.pha, RealPolicy::ForceReal)?;
        branches.push(spatial);
    }
    let b1 = ops::batch_norm(&branches[0], &p.bn_gamma, &p.bn_beta, stats, mode)?;
    let b2 = ops::batch_norm(&branches[1], &p.bn_gamma, &p.bn_beta, stats, mode)?;
    Ok((b1, b2))
}

// ---------------------------------------------------------------------------
// Backbone configuration
// ---------------------------------------------------------------------------

/// Layout of the toy backbone: conv stages (3x3, batch-normed, ReLU), the
/// per-modality prefix length, AGP insertion points, and the head geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    /// Stages with index below this are modality-specific.
    pub stream_split: usize,
    /// 1-based stage indices after which AGP is applied.
    pub agp_after: Vec<usize>,
    pub agp_k: usize,
    /// Horizontal stripes pooled by the head.
    pub parts: usize,
    pub embed_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            stage_channels: vec![16, 32, 64, 128],
            // The last stage keeps stride 1 so four stripes fit the final map.
            stage_strides: vec![2, 2, 2, 1],
            stream_split: 1,
            agp_after: vec![1, 2],
            agp_k: 4,
            parts: 4,
            embed_dim: 128,
        }
    }
}

fn conv_out(extent: usize, stride: usize) -> usize {
    // kernel 3, padding 1
    (extent + 2 - 3) / stride + 1
}

impl BackboneConfig {
    /// Check internal consistency and return the final feature height/width
    /// for the given input size.
    pub fn validate(&self, image_h: usize, image_w: usize) -> Result<(usize, usize)> {
        let n = self.stage_channels.len();
        if n == 0 || self.stage_strides.len() != n {
            return Err(Error::invalid(
                "backbone",
                "stage channel and stride lists must be non-empty and equal length",
            ));
        }
        if self.stream_split > n {
            return Err(Error::invalid("backbone", "stream_split beyond last stage"));
        }
        if self.embed_dim != self.stage_channels[n - 1] {
            return Err(Error::invalid(
                "backbone",
                format!(
                    "embed_dim {} must equal last stage channels {}",
                    self.embed_dim,
                    self.stage_channels[n - 1]
                ),
            ));
        }
        for &a in &self.agp_after {
            if a == 0 || a > n {
                return Err(Error::invalid("backbone", format!("agp_after index {a} out of 1..={n}")));
            }
            let c = self.stage_channels[a - 1];
            if self.agp_k == 0 || c % self.agp_k != 0 {
                return Err(Error::invalid(
                    "backbone",
                    format!("stage {a} has {c} channels, not divisible by K={}", self.agp_k),
                ));
            }
        }
        let (mut h, mut w) = (image_h, image_w);
        for (i, &s) in self.stage_strides.iter().enumerate() {
            if s == 0 {
                return Err(Error::invalid("backbone", "zero stride"));
            }
            h = conv_out(h, s);
            w = conv_out(w, s);
            if h == 0 || w == 0 {
                return Err(Error::invalid(
                    "backbone",
                    format!("image {image_h}x{image_w} collapses at stage {}", i + 1),
                ));
            }
        }
        if self.parts == 0 || h % self.parts != 0 {
            return Err(Error::invalid(
                "backbone",
                format!("{} parts do not divide final feature height {h}", self.parts),
            ));
        }
        Ok((h, w))
    }
}

// ---------------------------------------------------------------------------
// Embedding head
// ---------------------------------------------------------------------------

pub struct HeadParams {
    pub global_bn: (Tensor, Tensor),
    pub local_bns: Vec<(Tensor, Tensor)>,
    pub cls_global: Tensor,
    pub cls_locals: Vec<Tensor>,
}

pub struct HeadOutput {
    /// Post-BN global embedding `[N,D]`.
    pub global: Tensor,
    /// Post-BN stripe embeddings, one per part.
    pub locals: Vec<Tensor>,
    pub logits_global: Tensor,
    pub logits_locals: Vec<Tensor>,
}

/// Pool the feature map globally and per horizontal stripe, batch-normalize
/// each embedding with its own modality-shared site, and classify each with
/// its own linear layer. Retrieval consumes the post-BN embeddings.
pub fn embed_head(
    f: &Tensor,
    parts: usize,
    hp: &HeadParams,
    stats_global: &mut BnStats,
    stats_locals: &mut [BnStats],
    mode: NormMode,
) -> Result<HeadOutput> {
    let &[_, _, h, _] = f.shape() else {
        return Err(Error::invalid(
            "embed_head",
            format!("expected [N,C,H,W], got {:?}", f.shape()),
        ));
    };
    if parts == 0 || h % parts != 0 {
        return Err(Error::invalid(
            "embed_head",
            format!("{parts} parts do not divide feature height {h}"),
        ));
    }
    if hp.local_bns.len() != parts || hp.cls_locals.len() != parts || stats_locals.len() != parts {
        return Err(Error::invalid(
            "embed_head",
            "head parameter lists must match the part count",
        ));
    }
    let pooled = ops::gap_rows(f, 0, h)?;
    let global = ops::batch_norm(&pooled, &hp.global_bn.0, &hp.global_bn.1, stats_global, mode)?;
    let logits_global = ops::linear(&global, &hp.cls_global, None)?;
    let stripe = h / parts;
    let mut locals = Vec::with_capacity(parts);
    let mut logits_locals = Vec::with_capacity(parts);
    for p in 0..parts {
        let pooled = ops::gap_rows(f, p * stripe, (p + 1) * stripe)?;
        let emb = ops::batch_norm(
            &pooled,
            &hp.local_bns[p].0,
            &hp.local_bns[p].1,
            &mut stats_locals[p],
            mode,
        )?;
        logits_locals.push(ops::linear(&emb, &hp.cls_locals[p], None)?);
        locals.push(emb);
    }
    Ok(HeadOutput {
        global,
        locals,
        logits_global,
        logits_locals,
    })
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub use_agp: bool,
    pub use_anm: bool,
    pub use_local: bool,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub stats: IndexMap<String, BnStats>,
}

pub struct ForwardOutput {
    /// Final feature map `[N,D,H',W']`.
    pub feature_map: Tensor,
    pub global: Tensor,
    pub locals: Vec<Tensor>,
    pub logits_global: Tensor,
    pub logits_locals: Vec<Tensor>,
    /// Pooled post-BN embeddings of the two ANM branches, when enabled.
    pub anm_branches: Option<(Tensor, Tensor)>,
}

fn stream_tags(cfg: &BackboneConfig, stage: usize) -> Vec<&'static str> {
    if stage < cfg.stream_split {
        vec!["v", "i"]
    } else {
        vec!["s"]
    }
}

impl Model {
    /// Initialize all parameters from per-name random streams, so the same
    /// seed yields the same values for a module regardless of which other
    /// modules are enabled.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        let bb = &cfg.backbone;
        let mut params = ParamStore::new();
        let mut stats = IndexMap::new();

        let normal_init = |name: &str, shape: Vec<usize>, std: f64| -> Tensor {
            let mut r = rng::stream(seed, "init", hash_name(name), 0);
            let dist = Normal::new(0.0, std).unwrap();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut r)).collect();
            Tensor::param(shape, data)
        };

        let mut c_in = bb.in_channels;
        for (i, (&c_out, _)) in bb.stage_channels.iter().zip(&bb.stage_strides).enumerate() {
            for tag in stream_tags(bb, i) {
                let base = format!("stage{i}.{tag}");
                let std = (2.0 / (c_in * 9) as f64).sqrt();
                params.insert(
                    &format!("{base}.conv.w"),
                    normal_init(&format!("{base}.conv.w"), vec![c_out, c_in, 3, 3], std),
                )?;
                params.insert(&format!("{base}.conv.b"), Tensor::param(vec![c_out], vec![0.0; c_out]))?;
                params.insert(&format!("{base}.bn.gamma"), Tensor::param(vec![c_out], vec![1.0; c_out]))?;
                params.insert(&format!("{base}.bn.beta"), Tensor::param(vec![c_out], vec![0.0; c_out]))?;
                stats.insert(format!("{base}.bn"), BnStats::new(c_out));
            }
            c_in = c_out;
        }

        if cfg.use_agp {
            for &site in &bb.agp_after {
                let c = bb.stage_channels[site - 1];
                let per = c / bb.agp_k;
                let std = (2.0 / c as f64).sqrt();
                for k in 0..bb.agp_k {
                    let name = format!("agp{site}.conv{k}.w");
                    params.insert(&name, normal_init(&name, vec![per, c], std))?;
                    params.insert(&format!("agp{site}.conv{k}.b"), Tensor::param(vec![per], vec![0.0; per]))?;
                }
            }
        }

        let d = bb.embed_dim;
        if cfg.use_anm {
            let std = (2.0 / d as f64).sqrt();
            for branch in ["res1", "res2"] {
                let name = format!("anm.{branch}.w");
                params.insert(&name, normal_init(&name, vec![d, d], std))?;
                params.insert(&format!("anm.{branch}.b"), Tensor::param(vec![d], vec![0.0; d]))?;
            }
            params.insert("anm.bn.gamma", Tensor::param(vec![d], vec![1.0; d]))?;
            params.insert("anm.bn.beta", Tensor::param(vec![d], vec![0.0; d]))?;
            stats.insert("anm.bn".into(), BnStats::new(d));
        }

        params.insert("neck.global.bn.gamma", Tensor::param(vec![d], vec![1.0; d]))?;
        params.insert("neck.global.bn.beta", Tensor::param(vec![d], vec![0.0; d]))?;
        stats.insert("neck.global.bn".into(), BnStats::new(d));
        params.insert(
            "cls.global.w",
            normal_init("cls.global.w", vec![cfg.num_classes, d], 0.1),
        )?;
        if cfg.use_local {
            for p in 0..bb.parts {
                params.insert(&format!("neck.local{p}.bn.gamma"), Tensor::param(vec![d], vec![1.0; d]))?;
                params.insert(&format!("neck.local{p}.bn.beta"), Tensor::param(vec![d], vec![0.0; d]))?;
                stats.insert(format!("neck.local{p}.bn"), BnStats::new(d));
                let name = format!("cls.local{p}.w");
                params.insert(&name, normal_init(&name, vec![cfg.num_classes, d], 0.1))?;
            }
        }

        Ok(Model { cfg, params, stats })
    }

    fn fetch(&self, name: &str, frozen: bool) -> Result<Tensor> {
        let t = self.params.get(name)?;
        Ok(if frozen { t.detach() } else { t })
    }

    fn agp_params(&self, site: usize, frozen: bool) -> Result<AgpParams> {
        let k = self.cfg.backbone.agp_k;
        let mut convs = Vec::with_capacity(k);
        for ki in 0..k {
            convs.push((
                self.fetch(&format!("agp{site}.conv{ki}.w"), frozen)?,
                self.fetch(&format!("agp{site}.conv{ki}.b"), frozen)?,
            ));
        }
        Ok(AgpParams { k, convs })
    }

    /// Run the backbone, head and (when enabled) ANM over an interleaved
    /// two-modality batch. `frozen` detaches all parameters so inference
    /// builds no graph.
    pub fn forward(
        &mut self,
        images: &Tensor,
        modalities: &[Modality],
        mode: NormMode,
        frozen: bool,
    ) -> Result<ForwardOutput> {
        let &[n, _, _, _] = images.shape() else {
            return Err(Error::invalid(
                "forward",
                format!("expected [N,C,H,W] images, got {:?}", images.shape()),
            ));
        };
        if modalities.len() != n {
            return Err(Error::invalid(
                "forward",
                format!("{} modality labels for {n} images", modalities.len()),
            ));
        }
        let bn_mode = if frozen { NormMode::Eval } else { mode };
        let cfg = self.cfg.clone();
        let bb = &cfg.backbone;

        let vis_idx: Vec<usize> = (0..n).filter(|&i| modalities[i] == Modality::Vis).collect();
        let ir_idx: Vec<usize> = (0..n).filter(|&i| modalities[i] == Modality::Ir).collect();

        let mut x = images.clone();
        for (i, &stride) in bb.stage_strides.iter().enumerate() {
            if i < bb.stream_split {
                let mut halves = Vec::new();
                for (tag, idx) in [("v", &vis_idx), ("i", &ir_idx)] {
                    if idx.is_empty() {
                        continue;
                    }
                    let part = ops::gather_batch(&x, idx)?;
                    halves.push((self.stage_forward(&part, i, tag, stride, bn_mode, frozen)?, idx.clone()));
                }
                x = match halves.len() {
                    1 => halves.pop().unwrap().0,
                    2 => {
                        let (b, idx_b) = halves.pop().unwrap();
                        let (a, idx_a) = halves.pop().unwrap();
                        ops::merge_batch(&a, &b, &idx_a, &idx_b)?
                    }
                    _ => unreachable!(),
                };
            } else {
                x = self.stage_forward(&x, i, "s", stride, bn_mode, frozen)?;
            }
            let site = i + 1;
            if cfg.use_agp && bb.agp_after.contains(&site) {
                let agp = self.agp_params(site, frozen)?;
                x = agp_forward_batch(&x, &agp)?;
            }
        }

        let anm_branches = if cfg.use_anm {
            let p = AnmParams {
                res1: (self.fetch("anm.res1.w", frozen)?, self.fetch("anm.res1.b", frozen)?),
                res2: (self.fetch("anm.res2.w", frozen)?, self.fetch("anm.res2.b", frozen)?),
                bn_gamma: self.fetch("anm.bn.gamma", frozen)?,
                bn_beta: self.fetch("anm.bn.beta", frozen)?,
                use_in: true,
            };
            let stats = self.stats.get_mut("anm.bn").expect("anm stats");
            let (b1, b2) = anm_forward(&x, &p, stats, bn_mode)?;
            let h = b1.shape()[2];
            Some((ops::gap_rows(&b1, 0, h)?, ops::gap_rows(&b2, 0, h)?))
        } else {
            None
        };

        let parts = if cfg.use_local { bb.parts } else { 0 };
        let head = self.head_forward(&x, parts, bn_mode, frozen)?;

        Ok(ForwardOutput {
            feature_map: x,
            global: head.global,
            locals: head.locals,
            logits_global: head.logits_global,
            logits_locals: head.logits_locals,
            anm_branches,
        })
    }

    fn stage_forward(
        &mut self,
        x: &Tensor,
        stage: usize,
        tag: &str,
        stride: usize,
        mode: NormMode,
        frozen: bool,
    ) -> Result<Tensor> {
        let base = format!("stage{stage}.{tag}");
        let w = self.fetch(&format!("{base}.conv.w"), frozen)?;
        let b = self.fetch(&format!("{base}.conv.b"), frozen)?;
        let gamma = self.fetch(&format!("{base}.bn.gamma"), frozen)?;
        let beta = self.fetch(&format!("{base}.bn.beta"), frozen)?;
        let conv = ops::conv2d(x, &w, &b, stride)?;
        let stats = self
            .stats
            .get_mut(&format!("{base}.bn"))
            .expect("stage stats");
        let normed = ops::batch_norm(&conv, &gamma, &beta, stats, mode)?;
        Ok(ops::relu(&normed))
    }

    fn head_forward(
        &mut self,
        f: &Tensor,
        parts: usize,
        mode: NormMode,
        frozen: bool,
    ) -> Result<HeadOutput> {
        let hp = HeadParams {
            global_bn: (
                self.fetch("neck.global.bn.gamma", frozen)?,
                self.fetch("neck.global.bn.beta", frozen)?,
            ),
            local_bns: (0..parts)
                .map(|p| {
                    Ok((
                        self.fetch(&format!("neck.local{p}.bn.gamma"), frozen)?,
                        self.fetch(&format!("neck.local{p}.bn.beta"), frozen)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?,
            cls_global: self.fetch("cls.global.w", frozen)?,
            cls_locals: (0..parts)
                .map(|p| self.fetch(&format!("cls.local{p}.w"), frozen))
                .collect::<Result<Vec<_>>>()?,
        };
        if parts == 0 {
            // Head without stripes: global embedding only.
            let h = f.shape()[2];
            let pooled = ops::gap_rows(f, 0, h)?;
            let stats = self.stats.get_mut("neck.global.bn").expect("neck stats");
            let global = ops::batch_norm(&pooled, &hp.global_bn.0, &hp.global_bn.1, stats, mode)?;
            let logits_global = ops::linear(&global, &hp.cls_global, None)?;
            return Ok(HeadOutput {
                global,
                locals: Vec::new(),
                logits_global,
                logits_locals: Vec::new(),
            });
        }
        let mut stats_locals: Vec<BnStats> = (0..parts)
            .map(|p| self.stats[&format!("neck.local{p}.bn")].clone())
            .collect();
        let mut stats_global = self.stats["neck.global.bn"].clone();
        let out = embed_head(f, parts, &hp, &mut stats_global, &mut stats_locals, mode)?;
        self.stats.insert("neck.global.bn".into(), stats_global);
        for (p, s) in stats_locals.into_iter().enumerate() {
            self.stats.insert(format!("neck.local{p}.bn"), s);
        }
        Ok(out)
    }
}

fn hash_name(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x1000_0000_01b3)
        })
}
