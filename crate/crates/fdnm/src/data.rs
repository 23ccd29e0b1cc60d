//! Synthetic two-modality identity data, PK batch sampling, and image IO.
//!
//! Each identity owns a persistent signature: a person-like layout (head,
//! torso, legs) with its own colors, an accent patch, and a sinusoidal
//! texture with its own frequency. VIS renders the signature in color; IR
//! collapses it to luma, dims it and blurs it, so the two modalities share
//! structure but differ exactly where brightness and contrast live. Per-image
//! variation (pixel noise plus brightness/contrast jitter) scales with the
//! spec's noise level, so a zero noise level reproduces the clean render.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Vis,
    Ir,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Vis => "vis",
            Modality::Ir => "ir",
        }
    }

    pub fn parse(s: &str) -> Result<Modality> {
        match s {
            "vis" => Ok(Modality::Vis),
            "ir" => Ok(Modality::Ir),
            other => Err(Error::invalid("modality", format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    /// `[3,H,W]` pixels in `[0,1]`.
    pub image: Tensor,
    pub identity: usize,
    pub modality: Modality,
    pub camera: usize,
}

/// Generation settings for the synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_identities: usize,
    /// Images per identity per modality.
    pub images_per_identity: usize,
    pub height: usize,
    pub width: usize,
    /// Drives pixel noise and the brightness/contrast jitter alike.
    pub noise_sigma: f64,
    /// IR modality transform: luma collapse, then this brightness factor.
    pub ir_brightness: f64,
    /// IR modality transform: 3x3 binomial blur.
    pub ir_blur: bool,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_identities: 20,
            images_per_identity: 16,
            height: 32,
            width: 16,
            noise_sigma: 0.05,
            ir_brightness: 0.6,
            ir_blur: true,
            seed: 0,
        }
    }
}

pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_identities: usize,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn indices(&self, identity: usize, modality: Modality) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.identity == identity && s.modality == modality)
            .map(|(i, _)| i)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Identity signatures and rendering
// ---------------------------------------------------------------------------

struct Signature {
    bg: [f64; 3],
    body: [f64; 3],
    head: [f64; 3],
    accent: [f64; 3],
    stripe_freq: f64,
    stripe_phase: f64,
    stripe_vertical: bool,
    stripe_strength: f64,
    accent_row: f64,
    accent_col: f64,
}

fn color(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [r.gen_range(lo..hi), r.gen_range(lo..hi), r.gen_range(lo..hi)]
}

fn signature(seed: u64, identity: usize) -> Signature {
    let mut r = rng::stream(seed, "identity", identity as u64, 0);
    Signature {
        bg: color(&mut r, 0.02, 0.25),
        body: color(&mut r, 0.30, 0.95),
        head: color(&mut r, 0.40, 0.95),
        accent: color(&mut r, 0.30, 0.95),
        stripe_freq: r.gen_range(1.0..6.0),
        stripe_phase: r.gen_range(0.0..std::f64::consts::TAU),
        stripe_vertical: r.gen_bool(0.5),
        stripe_strength: r.gen_range(0.25..0.55),
        accent_row: r.gen_range(0.35..0.60),
        accent_col: r.gen_range(0.15..0.65),
    }
}

fn render(sig: &Signature, h: usize, w: usize) -> Vec<f64> {
    let mut img = vec![0.0; 3 * h * w];
    let set = |img: &mut Vec<f64>, y: usize, x: usize, c: &[f64; 3]| {
        for ch in 0..3 {
            img[(ch * h + y) * w + x] = c[ch];
        }
    };
    for y in 0..h {
        for x in 0..w {
            set(&mut img, y, x, &sig.bg);
        }
    }
    let fh = h as f64;
    let fw = w as f64;
    // Torso with the identity's stripe texture.
    let (ty0, ty1) = ((0.28 * fh) as usize, (0.62 * fh) as usize);
    let (tx0, tx1) = ((0.20 * fw) as usize, (0.80 * fw).ceil() as usize);
    for y in ty0..ty1.min(h) {
        for x in tx0..tx1.min(w) {
            let t = if sig.stripe_vertical {
                x as f64 / fw
            } else {
                y as f64 / fh
            };
            let wave = (std::f64::consts::TAU * sig.stripe_freq * t + sig.stripe_phase).sin();
            let m = 1.0 + sig.stripe_strength * wave;
            let c = [
                (sig.body[0] * m).clamp(0.0, 1.0),
                (sig.body[1] * m).clamp(0.0, 1.0),
                (sig.body[2] * m).clamp(0.0, 1.0),
            ];
            set(&mut img, y, x, &c);
        }
    }
    // Head disc.
    let (cy, cx) = (0.16 * fh, 0.5 * fw);
    let rad = 0.10 * fh;
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            if dy * dy + dx * dx <= rad * rad {
                set(&mut img, y, x, &sig.head);
            }
        }
    }
    // Legs.
    let (ly0, ly1) = ((0.64 * fh) as usize, (0.95 * fh) as usize);
    for y in ly0..ly1.min(h) {
        for x in [(0.30 * fw) as usize, (0.62 * fw) as usize] {
            for dx in 0..((0.12 * fw).ceil() as usize).max(1) {
                if x + dx < w {
                    set(&mut img, y, x + dx, &sig.body);
                }
            }
        }
    }
    // Accent patch on the torso.
    let (ay, ax) = ((sig.accent_row * fh) as usize, (sig.accent_col * fw) as usize);
    for dy in 0..(0.08 * fh).ceil() as usize {
        for dx in 0..(0.2 * fw).ceil() as usize {
            if ay + dy < h && ax + dx < w {
                set(&mut img, ay + dy, ax + dx, &sig.accent);
            }
        }
    }
    img
}

fn luma_collapse(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; 3 * hw];
    for k in 0..hw {
        let l = 0.299 * img[k] + 0.587 * img[hw + k] + 0.114 * img[2 * hw + k];
        out[k] = l;
        out[hw + k] = l;
        out[2 * hw + k] = l;
    }
    out
}

fn blur3(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let kernel = [1.0, 2.0, 1.0];
    let mut out = vec![0.0; 3 * hw];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (dy, ky) in kernel.iter().enumerate() {
                    let yy = y + dy;
                    if yy < 1 || yy > h {
                        continue;
                    }
                    for (dx, kx) in kernel.iter().enumerate() {
                        let xx = x + dx;
                        if xx < 1 || xx > w {
                            continue;
                        }
                        acc += ky * kx * img[(c * h + yy - 1) * w + xx - 1];
                        norm += ky * kx;
                    }
                }
                out[(c * h + y) * w + x] = acc / norm;
            }
        }
    }
    out
}

/// Per-image photometric nuisance, all of it scaled by the spec's noise
/// level: a global contrast/brightness shift, a per-channel gain (a color
/// cast; only meaningful for VIS, IR is already collapsed to luma), and
/// pixel noise. These live in the amplitude domain by construction — a gain
/// scales amplitude bins, a brightness shift moves the DC bin — while the
/// image's structure (phase) stays put.
fn jitter_and_noise(img: &mut [f64], sigma: f64, per_channel: bool, r: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let contrast = (1.0 + 5.0 * sigma * normal.sample(r)).clamp(0.3, 1.9);
    let brightness = (3.0 * sigma * normal.sample(r)).clamp(-0.35, 0.35);
    let hw = img.len() / 3;
    let gains: [f64; 3] = if per_channel {
        [
            (1.0 + 4.0 * sigma * normal.sample(r)).clamp(0.4, 1.7),
            (1.0 + 4.0 * sigma * normal.sample(r)).clamp(0.4, 1.7),
            (1.0 + 4.0 * sigma * normal.sample(r)).clamp(0.4, 1.7),
        ]
    } else {
        [1.0; 3]
    };
    for c in 0..3 {
        for v in img[c * hw..(c + 1) * hw].iter_mut() {
            let noisy = gains[c] * contrast * *v + brightness + sigma * normal.sample(r);
            *v = noisy.clamp(0.0, 1.0);
        }
    }
}

/// Generate the full dataset. Deterministic for a fixed spec.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.num_identities == 0
        || spec.images_per_identity == 0
        || spec.height == 0
        || spec.width == 0
    {
        return Err(Error::invalid("generate", "sizes must be positive"));
    }
    let (h, w) = (spec.height, spec.width);
    let clean: Vec<Vec<f64>> = (0..spec.num_identities)
        .map(|id| render(&signature(spec.seed, id), h, w))
        .collect();

    // Signatures must be pairwise distinct in pixel space.
    for i in 0..clean.len() {
        for j in (i + 1)..clean.len() {
            let d2: f64 = clean[i]
                .iter()
                .zip(&clean[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2 <= 0.0 {
                return Err(Error::invalid(
                    "generate",
                    format!("identities {i} and {j} render identically"),
                ));
            }
        }
    }

    let mut samples = Vec::with_capacity(spec.num_identities * spec.images_per_identity * 2);
    for id in 0..spec.num_identities {
        for k in 0..spec.images_per_identity {
            let mut img = clean[id].clone();
            let mut r = rng::stream(spec.seed, "vis", id as u64, k as u64);
            jitter_and_noise(&mut img, spec.noise_sigma, true, &mut r);
            samples.push(Sample {
                image: Tensor::leaf(vec![3, h, w], img),
                identity: id,
                modality: Modality::Vis,
                camera: 0,
            });
        }
        for k in 0..spec.images_per_identity {
            let mut img = luma_collapse(&clean[id], h, w);
            for v in img.iter_mut() {
                *v *= spec.ir_brightness;
            }
            if spec.ir_blur {
                img = blur3(&img, h, w);
            }
            let mut r = rng::stream(spec.seed, "ir", id as u64, k as u64);
            jitter_and_noise(&mut img, spec.noise_sigma, false, &mut r);
            samples.push(Sample {
                image: Tensor::leaf(vec![3, h, w], img),
                identity: id,
                modality: Modality::Ir,
                camera: 1,
            });
        }
    }
    Ok(Dataset {
        samples,
        num_identities: spec.num_identities,
        height: h,
        width: w,
    })
}

// ---------------------------------------------------------------------------
// PK sampling
// ---------------------------------------------------------------------------

/// Minibatch as indices into a dataset, identity-major, VIS images before IR
/// images within each identity.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub identities: Vec<usize>,
    pub modalities: Vec<Modality>,
}

fn shuffled(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = r.gen_range(0..=i);
        v.swap(i, j);
    }
    v
}

/// Full epoch of PK batches: `p` identities per batch, `k` images per
/// modality per identity, without replacement within the epoch.
///
/// Every identity contributes `images_per_identity / k` visits per epoch; a
/// round whose tail holds fewer than `p` identities still forms a batch when
/// at least two remain (one identity alone cannot support the triplet loss
/// and is dropped for that round).
pub fn pk_epoch(ds: &Dataset, p: usize, k: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if p == 0 || k == 0 {
        return Err(Error::invalid("pk_epoch", "P and K must be positive"));
    }
    if ds.num_identities < p {
        return Err(Error::invalid(
            "pk_epoch",
            format!(
                "dataset has {} identities, need at least {p}",
                ds.num_identities
            ),
        ));
    }
    let mut vis_chunks: Vec<Vec<Vec<usize>>> = Vec::with_capacity(ds.num_identities);
    let mut ir_chunks: Vec<Vec<Vec<usize>>> = Vec::with_capacity(ds.num_identities);
    let mut visits = usize::MAX;
    for id in 0..ds.num_identities {
        let vis = ds.indices(id, Modality::Vis);
        let ir = ds.indices(id, Modality::Ir);
        if vis.len() < k || ir.len() < k {
            return Err(Error::BadLabel(
                id,
                format!(
                    "needs at least {k} images per modality, has {} vis / {} ir",
                    vis.len(),
                    ir.len()
                ),
            ));
        }
        let mut rv = rng::stream(seed, "pk-vis", epoch, id as u64);
        let mut ri = rng::stream(seed, "pk-ir", epoch, id as u64);
        let order_v = shuffled(&mut rv, vis.len());
        let order_i = shuffled(&mut ri, ir.len());
        let chunks_v: Vec<Vec<usize>> = order_v
            .chunks_exact(k)
            .map(|c| c.iter().map(|&i| vis[i]).collect())
            .collect();
        let chunks_i: Vec<Vec<usize>> = order_i
            .chunks_exact(k)
            .map(|c| c.iter().map(|&i| ir[i]).collect())
            .collect();
        visits = visits.min(chunks_v.len()).min(chunks_i.len());
        vis_chunks.push(chunks_v);
        ir_chunks.push(chunks_i);
    }

    let mut batches = Vec::new();
    for round in 0..visits {
        let mut ro = rng::stream(seed, "pk-order", epoch, round as u64);
        let order = shuffled(&mut ro, ds.num_identities);
        for group in order.chunks(p) {
            if group.len() < 2 {
                continue;
            }
            let mut batch = Batch {
                indices: Vec::with_capacity(group.len() * 2 * k),
                identities: Vec::with_capacity(group.len() * 2 * k),
                modalities: Vec::with_capacity(group.len() * 2 * k),
            };
            for &id in group {
                for &idx in &vis_chunks[id][round] {
                    batch.indices.push(idx);
                    batch.identities.push(id);
                    batch.modalities.push(Modality::Vis);
                }
                for &idx in &ir_chunks[id][round] {
                    batch.indices.push(idx);
                    batch.identities.push(id);
                    batch.modalities.push(Modality::Ir);
                }
            }
            batches.push(batch);
        }
    }
    Ok(batches)
}

/// One deterministic PK batch, addressed by `(seed, epoch, step)`.
pub fn pk_sample(
    ds: &Dataset,
    p: usize,
    k: usize,
    seed: u64,
    epoch: u64,
    step: usize,
) -> Result<Batch> {
    let batches = pk_epoch(ds, p, k, seed, epoch)?;
    batches.get(step).cloned().ok_or_else(|| {
        Error::invalid(
            "pk_sample",
            format!("step {step} beyond epoch of {} batches", batches.len()),
        )
    })
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Mirror the image left-right: pixel `(c,h,w)` moves to `(c,h,W-1-w)`.
pub fn hflip(img: &Tensor) -> Tensor {
    let &[c, h, w] = img.shape() else {
        panic!("hflip expects [C,H,W], got {:?}", img.shape());
    };
    let mut out = vec![0.0; img.numel()];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ci * h + y) * w + x] = img.data()[(ci * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Tensor::leaf(img.shape().to_vec(), out)
}

/// Random horizontal flip with probability 1/2 under the step generator.
pub fn augment(img: &Tensor, r: &mut ChaCha8Rng) -> Tensor {
    if r.gen_bool(0.5) {
        hflip(img)
    } else {
        img.clone()
    }
}

// ---------------------------------------------------------------------------
// Binary PNM (P5/P6) IO
// ---------------------------------------------------------------------------

struct PnmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> PnmCursor<'a> {
    fn fail(&self, msg: &str) -> Error {
        Error::ImageFormat {
            path: self.path.to_string(),
            offset: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail("unexpected end of header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.fail("expected a decimal number"))
    }
}

/// Load a binary PGM (`P5`, one channel) or PPM (`P6`, three channels) with
/// maxval 255. Pixels map to `[0,1]` by division by 255.
pub fn load_image(path: &std::path::Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let display = path.display().to_string();
    let mut cur = PnmCursor {
        bytes: &bytes,
        pos: 0,
        path: &display,
    };
    let channels = match cur.token()? {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(cur.fail("expected P5 or P6 magic")),
    };
    let w = cur.number()?;
    let h = cur.number()?;
    let maxval = cur.number()?;
    if maxval != 255 {
        return Err(cur.fail("only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(cur.fail("zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.fail("missing separator before payload"));
    }
    cur.pos += 1;
    let need = channels * h * w;
    if bytes.len() - cur.pos < need {
        return Err(cur.fail("truncated pixel payload"));
    }
    let payload = &bytes[cur.pos..cur.pos + need];
    // PNM interleaves channels per pixel; tensors are channel-major.
    let mut data = vec![0.0; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = payload[(y * w + x) * channels + c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::leaf(vec![channels, h, w], data))
}

/// Save as binary PGM/PPM with maxval 255, rounding half-up.
pub fn save_image(t: &Tensor, path: &std::path::Path) -> Result<()> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::invalid(
            "save_image",
            format!("expected [C,H,W], got {:?}", t.shape()),
        ));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(Error::invalid(
                "save_image",
                format!("{c} channels unsupported"),
            ))
        }
    };
    let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                let v = t.data()[(ci * h + y) * w + x];
                let q = (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8;
                bytes.push(q);
            }
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Dataset on disk
// ---------------------------------------------------------------------------

/// Write every sample as a PPM plus a `manifest.tsv` of
/// `path<TAB>identity<TAB>modality<TAB>camera`.
pub fn write_dataset(ds: &Dataset, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = String::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let name = format!("img_{i:05}_{}_{:03}.ppm", s.modality.as_str(), s.identity);
        save_image(&s.image, &dir.join(&name))?;
        manifest.push_str(&format!(
            "{name}\t{}\t{}\t{}\n",
            s.identity,
            s.modality.as_str(),
            s.camera
        ));
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a dataset back from a directory written by [`write_dataset`].
pub fn load_dataset(dir: &std::path::Path) -> Result<Dataset> {
    let path = dir.join("manifest.tsv");
    let text =
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut samples = Vec::new();
    let mut max_id = 0;
    let (mut height, mut width) = (0, 0);
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Config {
                line: lineno + 1,
                msg: format!("manifest line needs 4 fields, got {}", fields.len()),
            });
        }
        let image = load_image(&dir.join(fields[0]))?;
        let identity: usize = fields[1].parse().map_err(|_| Error::Config {
            line: lineno + 1,
            msg: format!("bad identity {:?}", fields[1]),
        })?;
        let modality = Modality::parse(fields[2])?;
        let camera: usize = fields[3].parse().map_err(|_| Error::Config {
            line: lineno + 1,
            msg: format!("bad camera {:?}", fields[3]),
        })?;
        max_id = max_id.max(identity);
        height = image.shape()[1];
        width = image.shape()[2];
        samples.push(Sample {
            image,
            identity,
            modality,
            camera,
        });
    }
    if samples.is_empty() {
        return Err(Error::invalid("load_dataset", "empty manifest"));
    }
    Ok(Dataset {
        samples,
        num_identities: max_id + 1,
        height,
        width,
    })
}
