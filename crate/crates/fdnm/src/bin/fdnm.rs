//! Command-line front end. All logic lives in the library; see `examples/`
//! for the same capabilities as runnable programs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fdnm::config::Config;
use fdnm::data;
use fdnm::error::{Error, Result};
use fdnm::fourier::{self, Component, RealPolicy};
use fdnm::model::Model;
use fdnm::store::{self, Record};
use fdnm::tensor::Tensor;
use fdnm::{eval, gradcheck, train};

#[derive(Parser)]
#[command(name = "fdnm", about = "Frequency-domain nuances mining toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Compress the schedule to desk scale (30 epochs, milestones 4/16/24).
    #[arg(long)]
    desk: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        if self.desk {
            cfg.apply_desk_preset();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-modality dataset as PNM files.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split an image into per-channel amplitude/phase planes.
    Decompose {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild an image from planes written by `decompose`.
    Recompose {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross amplitude and phase between two same-size images.
    Swap {
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the synthetic dataset defined by the config.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an identical config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset directory (manifest.tsv).
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Train one model per (lambda2, margin) grid cell.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated lambda2 grid.
        #[arg(long, default_value = "0,0.25,0.5,1.0")]
        lambda2: String,
        /// Comma-separated margin grid.
        #[arg(long, default_value = "0,0.2,0.5")]
        margin: String,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => cmd_synth(&config.load()?, &out),
        Command::Decompose { image, out } => cmd_decompose(&image, &out),
        Command::Recompose { dir, out } => cmd_recompose(&dir, &out),
        Command::Swap { image_a, image_b, out } => cmd_swap(&image_a, &image_b, &out),
        Command::Train { config, out, resume } => cmd_train(&config.load()?, &out, resume.as_deref()),
        Command::Eval { config, checkpoint, data, out } => {
            cmd_eval(&config.load()?, &checkpoint, &data, &out)
        }
        Command::Gradcheck { seeds } => cmd_gradcheck(seeds),
        Command::Sweep { config, out, lambda2, margin } => {
            let l2 = parse_grid(&lambda2)?;
            let m = parse_grid(&margin)?;
            cmd_sweep(&config.load()?, &out, &l2, &m)
        }
    }
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid("grid", format!("bad grid value {v:?}")))
        })
        .collect()
}

fn cmd_synth(cfg: &Config, out: &Path) -> Result<()> {
    println!("seed: {}", cfg.seed);
    let ds = data::generate(&cfg.synth_spec())?;
    data::write_dataset(&ds, out)?;
    println!(
        "wrote {} samples ({} identities) to {}",
        ds.samples.len(),
        ds.num_identities,
        out.display()
    );
    Ok(())
}

/// Log-scaled amplitude and linearly mapped phase as 8-bit previews.
fn write_plane_view(dir: &Path, tag: &str, channel: usize, plane: &Tensor, is_phase: bool) -> Result<()> {
    let (h, w) = (plane.shape()[1], plane.shape()[2]);
    let mapped: Vec<f64> = if is_phase {
        plane
            .data()
            .iter()
            .map(|p| (p + std::f64::consts::PI) / std::f64::consts::TAU)
            .collect()
    } else {
        let logged: Vec<f64> = plane.data().iter().map(|a| (1.0 + a).ln()).collect();
        let max = logged.iter().cloned().fold(0.0, f64::max);
        logged
            .iter()
            .map(|v| if max > 0.0 { v / max } else { 0.0 })
            .collect()
    };
    data::save_image(
        &Tensor::leaf(vec![1, h, w], mapped),
        &dir.join(format!("{tag}_c{channel}.pgm")),
    )
}

fn write_plane_f32(dir: &Path, tag: &str, channel: usize, plane: &Tensor) -> Result<()> {
    let (h, w) = (plane.shape()[1], plane.shape()[2]);
    store::write_records(
        &dir.join(format!("{tag}_c{channel}.f32")),
        &[Record {
            name: tag.to_string(),
            shape: vec![h, w],
            data: plane.data().to_vec(),
        }],
    )
}

fn cmd_decompose(image: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let img = data::load_image(image)?;
    let channels = img.shape()[0];
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let spectrum = fourier::fft2(&img)?;
    for c in 0..channels {
        let amp = Tensor::leaf(
            vec![1, h, w],
            spectrum.amp.data()[c * h * w..(c + 1) * h * w].to_vec(),
        );
        let pha = Tensor::leaf(
            vec![1, h, w],
            spectrum.pha.data()[c * h * w..(c + 1) * h * w].to_vec(),
        );
        write_plane_f32(out, "amp", c, &amp)?;
        write_plane_f32(out, "pha", c, &pha)?;
        write_plane_view(out, "amp", c, &amp, false)?;
        write_plane_view(out, "pha", c, &pha, true)?;
    }
    println!("decomposed {} channels into {}", channels, out.display());
    Ok(())
}

fn read_plane(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let records = store::read_records(path)?;
    let rec = records
        .into_iter()
        .next()
        .ok_or_else(|| Error::Checkpoint(format!("{}: empty container", path.display())))?;
    let &[h, w] = rec.shape.as_slice() else {
        return Err(Error::Checkpoint(format!(
            "{}: expected a 2-D plane",
            path.display()
        )));
    };
    Ok((h, w, rec.data))
}

fn clamp_unit(data: &mut [f64]) -> usize {
    let mut clamped = 0;
    for v in data.iter_mut() {
        if *v < 0.0 || *v > 1.0 {
            clamped += 1;
            *v = v.clamp(0.0, 1.0);
        }
    }
    clamped
}

fn cmd_recompose(dir: &Path, out: &Path) -> Result<()> {
    let mut channels = 0;
    while dir.join(format!("amp_c{channels}.f32")).exists() {
        channels += 1;
    }
    if channels == 0 {
        return Err(Error::invalid(
            "recompose",
            format!("no amp_c*.f32 planes in {}", dir.display()),
        ));
    }
    let mut amp_all = Vec::new();
    let mut pha_all = Vec::new();
    let (mut h, mut w) = (0, 0);
    for c in 0..channels {
        let (ph, pw, amp) = read_plane(&dir.join(format!("amp_c{c}.f32")))?;
        let (_, _, pha) = read_plane(&dir.join(format!("pha_c{c}.f32")))?;
        h = ph;
        w = pw;
        amp_all.extend(amp);
        pha_all.extend(pha);
    }
    let spectrum = fourier::recombine(
        &Tensor::leaf(vec![channels, h, w], amp_all),
        &Tensor::leaf(vec![channels, h, w], pha_all),
    )?;
    // Planes round through 32-bit storage, so the spectrum is only
    // approximately conjugate-symmetric.
    let img = fourier::ifft2(&spectrum, RealPolicy::ForceReal)?;
    let mut data = img.data().to_vec();
    let clamped = clamp_unit(&mut data);
    data::save_image(&Tensor::leaf(img.shape().to_vec(), data), out)?;
    println!("recomposed {} ({clamped} pixels clamped)", out.display());
    Ok(())
}

fn cmd_swap(image_a: &Path, image_b: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let a = data::load_image(image_a)?;
    let b = data::load_image(image_b)?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "swap",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let ext = if a.shape()[0] == 3 { "ppm" } else { "pgm" };
    let (pha_a_amp_b, pha_b_amp_a) = fourier::swap_components(&a, &b)?;
    let outputs = [
        ("swap_pha_a_amp_b", pha_a_amp_b),
        ("swap_pha_b_amp_a", pha_b_amp_a),
        ("a_amplitude_only", fourier::component_only(&a, Component::Amplitude)?),
        ("a_phase_only", fourier::component_only(&a, Component::Phase)?),
        ("b_amplitude_only", fourier::component_only(&b, Component::Amplitude)?),
        ("b_phase_only", fourier::component_only(&b, Component::Phase)?),
    ];
    let mut total_clamped = 0;
    for (name, img) in outputs {
        let mut data = img.data().to_vec();
        total_clamped += clamp_unit(&mut data);
        data::save_image(
            &Tensor::leaf(img.shape().to_vec(), data),
            &out.join(format!("{name}.{ext}")),
        )?;
    }
    println!(
        "wrote 6 reconstructions to {} ({total_clamped} pixels clamped)",
        out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &Config, out: &Path, resume: Option<&Path>) -> Result<()> {
    println!("seed: {}", cfg.seed);
    let ds = data::generate(&cfg.synth_spec())?;
    let outcome = train::train(cfg, &ds, out, resume)?;
    println!("rank1,rank5,rank10,rank20,mAP");
    println!("{}", eval::summary_row(&outcome.final_eval));
    println!("metrics: {}", out.join("metrics.csv").display());
    Ok(())
}

fn cmd_eval(cfg: &Config, checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    println!("seed: {}", cfg.seed);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let ds = data::load_dataset(data_dir)?;
    let mut model = Model::init(cfg.model_config(ds.num_identities), cfg.seed)?;
    train::load_model_state(checkpoint, &mut model)?;
    let result = eval::evaluate_model(&mut model, &ds, cfg.eval_metric, cfg.camera_filter)?;
    eval::write_cmc_csv(&out.join("cmc.csv"), &result)?;
    eval::write_summary_csv(&out.join("summary.csv"), &result)?;
    let all: Vec<usize> = (0..ds.samples.len()).collect();
    let emb = eval::extract_embeddings(&mut model, &ds, &all)?;
    let modalities: Vec<data::Modality> = ds.samples.iter().map(|s| s.modality).collect();
    let stats = eval::distance_stats(&emb, &modalities)?;
    eval::write_dist_hist_csv(&out.join("dist_hist.csv"), &stats)?;
    println!("rank1,rank5,rank10,rank20,mAP");
    println!("{}", eval::summary_row(&result));
    Ok(())
}

fn cmd_gradcheck(seeds: usize) -> Result<()> {
    let reports = gradcheck::run_all(seeds)?;
    let mut all_passed = true;
    for r in &reports {
        println!(
            "{:<24} seeds={:<3} max_rel={:9.3e}  {}",
            r.name,
            r.seeds,
            r.max_rel,
            if r.passed { "PASS" } else { "FAIL" }
        );
        all_passed &= r.passed;
    }
    if !all_passed {
        return Err(Error::invalid("gradcheck", "finite-difference check failed"));
    }
    Ok(())
}

fn cmd_sweep(cfg: &Config, out: &Path, lambda2: &[f64], margin: &[f64]) -> Result<()> {
    println!("seed: {}", cfg.seed);
    let ds = data::generate(&cfg.synth_spec())?;
    let path = train::sweep(cfg, lambda2, margin, &ds, out)?;
    print!(
        "{}",
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?
    );
    Ok(())
}
