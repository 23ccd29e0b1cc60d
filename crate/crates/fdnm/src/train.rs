//! SGD training loop: warmup/step learning-rate schedule, momentum updates,
//! per-epoch metrics, checkpointing, and the hyperparameter sweep.
//!
//! Checkpoints carry parameters, batch-norm running statistics, optimizer
//! velocity and the completed-epoch counter in one FDNM1 container. All
//! training state is rounded to checkpoint precision at every epoch boundary,
//! so a run resumed from `epoch_k` continues bit-for-bit like the run that
//! wrote it.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::config::Config;
use crate::data::{self, Batch, Dataset, Modality};
use crate::error::{Error, Result};
use crate::eval::{self, RetrievalResult};
use crate::loss::{self, Branch, LossBundle, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::ops::{self, NormMode};
use crate::rng;
use crate::store::{self, snap_f32, ParamStore, Record};
use crate::tensor::Tensor;

/// Per-parameter momentum buffers.
pub struct OptimState {
    pub momentum: f64,
    pub velocity: IndexMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ParamStore, momentum: f64) -> Self {
        let velocity = params
            .iter()
            .map(|(name, t)| (name.to_string(), vec![0.0; t.numel()]))
            .collect();
        OptimState { momentum, velocity }
    }
}

/// Learning rate for an epoch: linear warmup from `init_lr` to `base_lr`,
/// then a plateau, then the configured rate after each passed milestone.
pub fn lr_at(cfg: &Config, epoch: usize) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.init_lr
            + (cfg.base_lr - cfg.init_lr) * epoch as f64 / cfg.warmup_epochs as f64;
    }
    let mut lr = cfg.base_lr;
    for (m, l) in cfg.milestones.iter().zip(&cfg.milestone_lrs) {
        if epoch >= *m {
            lr = *l;
        }
    }
    lr
}

/// One momentum step: `v <- mu*v + g` then `w <- w - lr*v`, clearing grads by
/// replacing each parameter with a fresh leaf.
pub fn sgd_step(
    params: &mut ParamStore,
    opt: &mut OptimState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let names = params.names();
    for name in names {
        let t = params.get(&name)?;
        let grad = t.grad().ok_or_else(|| Error::MissingGrad(name.clone()))?;
        let v = opt
            .velocity
            .get_mut(&name)
            .ok_or_else(|| Error::MissingGrad(name.clone()))?;
        let mut data = t.data().to_vec();
        for i in 0..data.len() {
            let g = grad[i] + weight_decay * data[i];
            v[i] = opt.momentum * v[i] + g;
            data[i] -= lr * v[i];
        }
        params.set(&name, Tensor::param(t.shape().to_vec(), data))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Step assembly
// ---------------------------------------------------------------------------

/// Materialize a PK batch: optionally flip-augmented images stacked into
/// `[N,3,H,W]`, with labels and modality tags.
pub fn assemble_batch(
    ds: &Dataset,
    batch: &Batch,
    cfg: &Config,
    epoch: u64,
    step: usize,
) -> Result<(Tensor, Vec<usize>, Vec<Modality>)> {
    let mut r = rng::stream(cfg.seed, "augment", epoch, step as u64);
    let images: Vec<Tensor> = batch
        .indices
        .iter()
        .map(|&i| {
            let img = &ds.samples[i].image;
            if cfg.augment_hflip {
                data::augment(img, &mut r)
            } else {
                img.clone()
            }
        })
        .collect();
    Ok((
        ops::stack(&images)?,
        batch.identities.clone(),
        batch.modalities.clone(),
    ))
}

/// Forward one batch and build the full objective.
///
/// When the ANM branches are active their centers always enter the graph;
/// disabling the nuances loss only zeroes its weight, so branch parameters
/// still receive (zero) gradients and the optimizer contract holds.
pub fn compute_step_loss(
    model: &mut Model,
    images: &Tensor,
    modalities: &[Modality],
    labels: &[usize],
    weights: &LossWeights,
    use_cnm: bool,
) -> Result<LossBundle> {
    let out = model.forward(images, modalities, NormMode::Train, false)?;
    let mut logits: Vec<&Tensor> = vec![&out.logits_global];
    let mut embeddings: Vec<&Tensor> = vec![&out.global];
    for l in &out.logits_locals {
        logits.push(l);
    }
    for e in &out.locals {
        embeddings.push(e);
    }
    let mut w = weights.clone();
    let centers;
    let center_refs = match &out.anm_branches {
        Some((b1, b2)) => {
            if !use_cnm {
                w.lambda2 = 0.0;
            }
            let v1 = loss::compute_centers(b1, labels, modalities, Modality::Vis, Branch::V1)?;
            let v2 = loss::compute_centers(b2, labels, modalities, Modality::Vis, Branch::V2)?;
            let i1 = loss::compute_centers(b1, labels, modalities, Modality::Ir, Branch::I1)?;
            let i2 = loss::compute_centers(b2, labels, modalities, Modality::Ir, Branch::I2)?;
            centers = (v1, v2, i1, i2);
            Some((&centers.0, &centers.1, &centers.2, &centers.3))
        }
        None => {
            w.lambda2 = 0.0;
            None
        }
    };
    loss::total_loss(&logits, &embeddings, labels, center_refs, &w)
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

fn snap_vec(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = snap_f32(*x);
    }
}

/// Round all training state to checkpoint precision.
fn snap_state(model: &mut Model, opt: &mut OptimState) {
    model.params.snap_to_f32();
    for stats in model.stats.values_mut() {
        snap_vec(&mut stats.mean);
        snap_vec(&mut stats.var);
    }
    for v in opt.velocity.values_mut() {
        snap_vec(v);
    }
}

fn checkpoint_records(model: &Model, opt: &OptimState, completed_epochs: usize) -> Vec<Record> {
    let mut records = model.params.to_records();
    for (name, stats) in &model.stats {
        records.push(Record {
            name: format!("stats.{name}.mean"),
            shape: vec![stats.mean.len()],
            data: stats.mean.clone(),
        });
        records.push(Record {
            name: format!("stats.{name}.var"),
            shape: vec![stats.var.len()],
            data: stats.var.clone(),
        });
    }
    for (name, v) in &opt.velocity {
        records.push(Record {
            name: format!("opt.{name}.v"),
            shape: vec![v.len()],
            data: v.clone(),
        });
    }
    records.push(Record {
        name: "meta.epoch".into(),
        shape: vec![1],
        data: vec![completed_epochs as f64],
    });
    records
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    opt: &OptimState,
    completed_epochs: usize,
) -> Result<()> {
    store::write_records(path, &checkpoint_records(model, opt, completed_epochs))
}

/// Load a checkpoint into a freshly initialized model/optimizer pair.
/// Returns the number of completed epochs recorded in the file.
pub fn load_checkpoint(path: &Path, model: &mut Model, opt: &mut OptimState) -> Result<usize> {
    let records = store::records_by_name(store::read_records(path)?);
    model.params.load_records(&records)?;
    for (name, stats) in model.stats.iter_mut() {
        let mean = records
            .get(&format!("stats.{name}.mean"))
            .ok_or_else(|| Error::Checkpoint(format!("missing stats.{name}.mean")))?;
        let var = records
            .get(&format!("stats.{name}.var"))
            .ok_or_else(|| Error::Checkpoint(format!("missing stats.{name}.var")))?;
        stats.mean = mean.data.clone();
        stats.var = var.data.clone();
    }
    for (name, v) in opt.velocity.iter_mut() {
        let rec = records
            .get(&format!("opt.{name}.v"))
            .ok_or_else(|| Error::Checkpoint(format!("missing opt.{name}.v")))?;
        v.copy_from_slice(&rec.data);
    }
    let epoch = records
        .get("meta.epoch")
        .ok_or_else(|| Error::Checkpoint("missing meta.epoch".into()))?;
    Ok(epoch.data[0] as usize)
}

/// Load only the model state (parameters and statistics) for evaluation.
pub fn load_model_state(path: &Path, model: &mut Model) -> Result<()> {
    let records = store::records_by_name(store::read_records(path)?);
    model.params.load_records(&records)?;
    for (name, stats) in model.stats.iter_mut() {
        if let (Some(mean), Some(var)) = (
            records.get(&format!("stats.{name}.mean")),
            records.get(&format!("stats.{name}.var")),
        ) {
            stats.mean = mean.data.clone();
            stats.var = var.data.clone();
        } else {
            return Err(Error::Checkpoint(format!("missing stats for {name}")));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_id: f64,
    pub loss_tri: f64,
    pub loss_cnm: f64,
    pub rank1: Option<f64>,
    pub map: Option<f64>,
}

impl EpochRow {
    fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}\n",
            self.epoch,
            self.lr,
            self.loss_total,
            self.loss_id,
            self.loss_tri,
            self.loss_cnm,
            opt(self.rank1),
            opt(self.map)
        )
    }
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub rows: Vec<EpochRow>,
    pub final_eval: RetrievalResult,
    pub last_checkpoint: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

/// Train a model per the config on the given dataset.
///
/// Writes `config.txt`, `metrics.csv`, per-epoch `epoch_%04d.fdnm`
/// checkpoints and the final retrieval reports into `run_dir`. `resume`
/// continues from a checkpoint written by an identically configured run.
pub fn train(
    cfg: &Config,
    ds: &Dataset,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let config_echo = run_dir.join("config.txt");
    std::fs::write(&config_echo, cfg.serialize()).map_err(io_err(&config_echo))?;

    let model_cfg: ModelConfig = cfg.model_config(ds.num_identities);
    model_cfg.backbone.validate(ds.height, ds.width)?;
    let mut model = Model::init(model_cfg, cfg.seed)?;
    model.params.snap_to_f32();
    let mut opt = OptimState::new(&model.params, cfg.momentum);
    let mut start_epoch = 0;
    if let Some(ckpt) = resume {
        start_epoch = load_checkpoint(ckpt, &mut model, &mut opt)?;
    }
    model.params.zero_grads();

    let weights = cfg.loss_weights();
    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics = String::new();
    if start_epoch == 0 || !metrics_path.exists() {
        metrics.push_str("epoch,lr,loss_total,loss_id,loss_tri,loss_cnm,rank1,mAP\n");
    } else {
        metrics = std::fs::read_to_string(&metrics_path).map_err(io_err(&metrics_path))?;
    }

    let mut rows = Vec::new();
    let mut global_step = 0usize;
    let mut last_eval: Option<RetrievalResult> = None;
    let mut last_checkpoint = run_dir.join(format!("epoch_{start_epoch:04}.fdnm"));
    for epoch in start_epoch..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let batches = data::pk_epoch(ds, cfg.p_identities, cfg.k_per_modality, cfg.seed, epoch as u64)?;
        let mut sums = [0.0; 4];
        for (step, batch) in batches.iter().enumerate() {
            let (images, labels, modalities) = assemble_batch(ds, batch, cfg, epoch as u64, step)?;
            let bundle = compute_step_loss(
                &mut model,
                &images,
                &modalities,
                &labels,
                &weights,
                cfg.use_cnm,
            )?;
            let (t, i, tr, c) = (
                bundle.total.item(),
                bundle.id.item(),
                bundle.tri.item(),
                bundle.cnm.item(),
            );
            if !t.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: global_step,
                    id: i,
                    tri: tr,
                    cnm: c,
                });
            }
            bundle.total.backward()?;
            sgd_step(&mut model.params, &mut opt, lr, cfg.weight_decay)?;
            sums[0] += t;
            sums[1] += i;
            sums[2] += tr;
            sums[3] += c;
            global_step += 1;
        }
        let steps = batches.len() as f64;

        // Snap to checkpoint precision before writing so a resumed run sees
        // exactly the values this run continues with.
        snap_state(&mut model, &mut opt);
        let completed = epoch + 1;
        if completed % cfg.checkpoint_every.max(1) == 0 || completed == cfg.epochs {
            last_checkpoint = run_dir.join(format!("epoch_{completed:04}.fdnm"));
            save_checkpoint(&last_checkpoint, &model, &opt, completed)?;
        }

        let evaluate_now =
            completed == cfg.epochs || (cfg.eval_every > 0 && completed % cfg.eval_every == 0);
        let (rank1, map) = if evaluate_now {
            let res = eval::evaluate_model(&mut model, ds, cfg.eval_metric, cfg.camera_filter)?;
            let pair = (Some(res.rank(1)), Some(res.map));
            last_eval = Some(res);
            pair
        } else {
            (None, None)
        };

        let row = EpochRow {
            epoch,
            lr,
            loss_total: sums[0] / steps,
            loss_id: sums[1] / steps,
            loss_tri: sums[2] / steps,
            loss_cnm: sums[3] / steps,
            rank1,
            map,
        };
        metrics.push_str(&row.csv());
        std::fs::write(&metrics_path, &metrics).map_err(io_err(&metrics_path))?;
        rows.push(row);
    }

    let final_eval = match last_eval {
        Some(res) => res,
        None => eval::evaluate_model(&mut model, ds, cfg.eval_metric, cfg.camera_filter)?,
    };
    eval::write_cmc_csv(&run_dir.join("cmc.csv"), &final_eval)?;
    eval::write_summary_csv(&run_dir.join("summary.csv"), &final_eval)?;

    let all: Vec<usize> = (0..ds.samples.len()).collect();
    let emb = eval::extract_embeddings(&mut model, ds, &all)?;
    let modalities: Vec<Modality> = ds.samples.iter().map(|s| s.modality).collect();
    let stats = eval::distance_stats(&emb, &modalities)?;
    eval::write_dist_hist_csv(&run_dir.join("dist_hist.csv"), &stats)?;

    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        rows,
        final_eval,
        last_checkpoint,
    })
}

/// Grid sweep over the nuances loss weight and margin. Each cell trains a
/// fresh model with the shared seed; results land in `sweep.csv`.
pub fn sweep(
    cfg: &Config,
    lambda2_grid: &[f64],
    margin_grid: &[f64],
    ds: &Dataset,
    out_dir: &Path,
) -> Result<PathBuf> {
    if lambda2_grid.is_empty() || margin_grid.is_empty() {
        return Err(Error::invalid("sweep", "empty grid"));
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut csv = String::from("lambda2,m,rank1,mAP\n");
    for &l2 in lambda2_grid {
        for &m in margin_grid {
            let mut cell_cfg = cfg.clone();
            cell_cfg.lambda2 = l2;
            cell_cfg.margin_cnm = m;
            let cell_dir = out_dir.join(format!("cell_l2_{l2}_m_{m}"));
            let outcome = train(&cell_cfg, ds, &cell_dir, None)?;
            csv.push_str(&format!(
                "{},{},{},{}\n",
                l2,
                m,
                outcome.final_eval.rank(1),
                outcome.final_eval.map
            ));
        }
    }
    let path = out_dir.join("sweep.csv");
    std::fs::write(&path, csv).map_err(io_err(&path))?;
    Ok(path)
}
