//! Per-channel 2-D Fourier transforms and the amplitude/phase algebra.
//!
//! The forward transform carries the unitary `1/sqrt(H*W)` factor and the
//! inverse carries the same factor, so a round trip is the identity and
//! energy is preserved bin-for-bin. Transforms of any length are supported
//! through recursive mixed-radix decimation with a direct evaluation at prime
//! lengths.
//!
//! Editing amplitude or phase planes breaks the conjugate symmetry a real
//! image guarantees, so the inverse of an edited spectrum is generally
//! complex. [`ifft2`] therefore takes a [`RealPolicy`]: `Strict` errors when
//! the imaginary residue is larger than rounding noise, `ForceReal` keeps the
//! real part. Gradients flow through both the decomposition and the
//! resynthesis.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::{BackCtx, Tensor};

const AMP_CLAMP: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Complex transform core
// ---------------------------------------------------------------------------

fn smallest_factor(n: usize) -> usize {
    if n % 2 == 0 {
        return 2;
    }
    let mut f = 3;
    while f * f <= n {
        if n % f == 0 {
            return f;
        }
        f += 2;
    }
    n
}

/// Unit roots `e^{-2 pi i k / n}` for `k < n`, cached per length.
fn twiddles(n: usize) -> std::sync::Arc<Vec<Complex64>> {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<Complex64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(n)
        .or_insert_with(|| {
            Arc::new(
                (0..n)
                    .map(|k| {
                        let ang = -TAU * k as f64 / n as f64;
                        Complex64::new(ang.cos(), ang.sin())
                    })
                    .collect(),
            )
        })
        .clone()
}

#[inline]
fn twiddle_at(table: &[Complex64], idx: usize, inverse: bool) -> Complex64 {
    let w = table[idx];
    if inverse {
        w.conj()
    } else {
        w
    }
}

fn dft_prime(v: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = v.len();
    let table = twiddles(n);
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (t, x) in v.iter().enumerate() {
            acc += x * twiddle_at(&table, (k * t) % n, inverse);
        }
        *o = acc;
    }
    out
}

/// Unnormalized 1-D transform of any length. `inverse` flips the twiddle sign.
fn fft_1d(v: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = v.len();
    match n {
        1 => return v.to_vec(),
        2 => return vec![v[0] + v[1], v[0] - v[1]],
        4 => {
            // radix-2 by hand; the only nontrivial twiddle is +-i
            let (a, b) = (v[0] + v[2], v[0] - v[2]);
            let (c, d) = (v[1] + v[3], v[1] - v[3]);
            let jd = if inverse {
                Complex64::new(-d.im, d.re)
            } else {
                Complex64::new(d.im, -d.re)
            };
            return vec![a + c, b + jd, a - c, b - jd];
        }
        _ => {}
    }
    let p = smallest_factor(n);
    if p == n {
        return dft_prime(v, inverse);
    }
    let m = n / p;
    let subs: Vec<Vec<Complex64>> = (0..p)
        .map(|r| {
            let sub: Vec<Complex64> = (0..m).map(|t| v[t * p + r]).collect();
            fft_1d(&sub, inverse)
        })
        .collect();
    let table = twiddles(n);
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = subs[0][k % m];
        for (r, sub) in subs.iter().enumerate().skip(1) {
            acc += sub[k % m] * twiddle_at(&table, (k * r) % n, inverse);
        }
        *o = acc;
    }
    out
}

/// Unitary 2-D transform of one `h x w` plane, row-major.
pub(crate) fn fft2_plane(
    re: &[f64],
    im: &[f64],
    h: usize,
    w: usize,
    inverse: bool,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(re.len(), h * w);
    let mut grid: Vec<Complex64> = re
        .iter()
        .zip(im)
        .map(|(r, i)| Complex64::new(*r, *i))
        .collect();
    for row in grid.chunks_exact_mut(w) {
        let t = fft_1d(row, inverse);
        row.copy_from_slice(&t);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        let t = fft_1d(&col, inverse);
        for y in 0..h {
            grid[y * w + x] = t[y];
        }
    }
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let mut out_re = vec![0.0; h * w];
    let mut out_im = vec![0.0; h * w];
    for (k, z) in grid.iter().enumerate() {
        out_re[k] = z.re * scale;
        out_im[k] = z.im * scale;
    }
    (out_re, out_im)
}

// ---------------------------------------------------------------------------
// Amplitude / phase view
// ---------------------------------------------------------------------------

/// Polar view of one complex value. The phase of the origin is defined as 0
/// and results lie in `(-pi, pi]`.
pub fn amp_phase(re: f64, im: f64) -> (f64, f64) {
    if re == 0.0 && im == 0.0 {
        return (0.0, 0.0);
    }
    let amp = re.hypot(im);
    let mut pha = im.atan2(re);
    if pha <= -PI {
        pha = PI;
    }
    (amp, pha)
}

/// How [`ifft2`] treats the imaginary part of the inverse transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RealPolicy {
    /// Error when `max|Im| > 1e-8 * max|Re|`; a real spectrum came back wrong.
    Strict,
    /// Keep the real part. Required after amplitude or phase edits, which
    /// break conjugate symmetry.
    ForceReal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Amplitude,
    Phase,
}

/// Per-channel frequency representation as amplitude and phase planes.
///
/// The real/imaginary view is `amp * cos(pha)` and `amp * sin(pha)`.
#[derive(Clone)]
pub struct Spectrum {
    pub amp: Tensor,
    pub pha: Tensor,
}

fn spatial_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        [n, c, h, w] => Ok((n * c, h, w)),
        _ => Err(Error::invalid(
            "fft2",
            format!("expected [C,H,W] or [N,C,H,W], got {shape:?}"),
        )),
    }
}

/// Forward transform into amplitude and phase planes, independently per
/// channel. Both planes are differentiable functions of the input.
pub fn fft2(x: &Tensor) -> Result<Spectrum> {
    let (channels, h, w) = spatial_dims(x.shape())?;
    let hw = h * w;
    let n = x.numel();
    let mut re_all = vec![0.0; n];
    let mut im_all = vec![0.0; n];
    for c in 0..channels {
        let plane = &x.data()[c * hw..(c + 1) * hw];
        let (re, im) = fft2_plane(plane, &vec![0.0; hw], h, w, false);
        re_all[c * hw..(c + 1) * hw].copy_from_slice(&re);
        im_all[c * hw..(c + 1) * hw].copy_from_slice(&im);
    }
    let mut amp = vec![0.0; n];
    let mut pha = vec![0.0; n];
    for k in 0..n {
        let (a, p) = amp_phase(re_all[k], im_all[k]);
        amp[k] = a;
        pha[k] = p;
    }

    let saved_re = Arc::new(re_all);
    let saved_im = Arc::new(im_all);

    // Amplitude and phase propagate to the input independently and the
    // engine sums the two contributions.
    let (re_a, im_a) = (saved_re.clone(), saved_im.clone());
    let amp_t = Tensor::from_op(
        "fft2_amp",
        x.shape().to_vec(),
        amp,
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx| {
            let mut g_re = vec![0.0; ctx.out_grad.len()];
            let mut g_im = vec![0.0; ctx.out_grad.len()];
            for k in 0..ctx.out_grad.len() {
                let a = re_a[k].hypot(im_a[k]).max(AMP_CLAMP);
                g_re[k] = ctx.out_grad[k] * re_a[k] / a;
                g_im[k] = ctx.out_grad[k] * im_a[k] / a;
            }
            vec![Some(adjoint_to_input(&g_re, &g_im, channels, h, w))]
        }),
    );

    let (re_p, im_p) = (saved_re, saved_im);
    let pha_t = Tensor::from_op(
        "fft2_pha",
        x.shape().to_vec(),
        pha,
        vec![x.clone()],
        Box::new(move |ctx: &BackCtx| {
            let mut g_re = vec![0.0; ctx.out_grad.len()];
            let mut g_im = vec![0.0; ctx.out_grad.len()];
            for k in 0..ctx.out_grad.len() {
                let a2 = re_p[k].hypot(im_p[k]).max(AMP_CLAMP).powi(2);
                g_re[k] = -ctx.out_grad[k] * im_p[k] / a2;
                g_im[k] = ctx.out_grad[k] * re_p[k] / a2;
            }
            vec![Some(adjoint_to_input(&g_re, &g_im, channels, h, w))]
        }),
    );

    Ok(Spectrum { amp: amp_t, pha: pha_t })
}

/// Adjoint of the unitary forward transform restricted to real inputs:
/// the real part of the unitary inverse applied to the cotangent.
fn adjoint_to_input(g_re: &[f64], g_im: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; channels * hw];
    for c in 0..channels {
        let (dre, _dim) = fft2_plane(
            &g_re[c * hw..(c + 1) * hw],
            &g_im[c * hw..(c + 1) * hw],
            h,
            w,
            true,
        );
        out[c * hw..(c + 1) * hw].copy_from_slice(&dre);
    }
    out
}

/// Pair amplitude and phase planes back into a spectrum.
/// Rejects negative amplitude entries, which no spectrum can carry.
pub fn recombine(amp: &Tensor, pha: &Tensor) -> Result<Spectrum> {
    if amp.shape() != pha.shape() {
        return Err(Error::ShapeMismatch {
            op: "recombine",
            lhs: amp.shape().to_vec(),
            rhs: pha.shape().to_vec(),
        });
    }
    if let Some((index, value)) = amp
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| **v < 0.0)
        .map(|(i, v)| (i, *v))
    {
        return Err(Error::NegativeAmplitude { index, value });
    }
    Ok(Spectrum {
        amp: amp.clone(),
        pha: pha.clone(),
    })
}

/// Unitary inverse transform back to the spatial domain.
///
/// Differentiable in the spectrum's amplitude and phase.
pub fn ifft2(s: &Spectrum, policy: RealPolicy) -> Result<Tensor> {
    if s.amp.shape() != s.pha.shape() {
        return Err(Error::ShapeMismatch {
            op: "ifft2",
            lhs: s.amp.shape().to_vec(),
            rhs: s.pha.shape().to_vec(),
        });
    }
    let (channels, h, w) = spatial_dims(s.amp.shape())?;
    let hw = h * w;
    let n = s.amp.numel();
    let amp = s.amp.data();
    let pha = s.pha.data();
    let mut out = vec![0.0; n];
    let mut max_re: f64 = 0.0;
    let mut max_im: f64 = 0.0;
    for c in 0..channels {
        let mut re = vec![0.0; hw];
        let mut im = vec![0.0; hw];
        for k in 0..hw {
            let (a, p) = (amp[c * hw + k], pha[c * hw + k]);
            re[k] = a * p.cos();
            im[k] = a * p.sin();
        }
        let (zre, zim) = fft2_plane(&re, &im, h, w, true);
        for k in 0..hw {
            max_re = max_re.max(zre[k].abs());
            max_im = max_im.max(zim[k].abs());
        }
        out[c * hw..(c + 1) * hw].copy_from_slice(&zre);
    }
    if policy == RealPolicy::Strict && max_im > 1e-8 * max_re {
        return Err(Error::ImaginaryResidue { max_im, max_re });
    }

    Ok(Tensor::from_op(
        "ifft2",
        s.amp.shape().to_vec(),
        out,
        vec![s.amp.clone(), s.pha.clone()],
        Box::new(move |ctx: &BackCtx| {
            let amp = ctx.parents[0].data();
            let pha = ctx.parents[1].data();
            let mut g_amp = vec![0.0; amp.len()];
            let mut g_pha = vec![0.0; amp.len()];
            for c in 0..channels {
                // Adjoint of "real part of unitary inverse" is the unitary
                // forward transform of the (real) cotangent.
                let (gr, gi) = fft2_plane(
                    &ctx.out_grad[c * hw..(c + 1) * hw],
                    &vec![0.0; hw],
                    h,
                    w,
                    false,
                );
                for k in 0..hw {
                    let i = c * hw + k;
                    let (sin, cos) = pha[i].sin_cos();
                    g_amp[i] = gr[k] * cos + gi[k] * sin;
                    g_pha[i] = amp[i] * (-gr[k] * sin + gi[k] * cos);
                }
            }
            vec![Some(g_amp), Some(g_pha)]
        }),
    ))
}

/// Resynthesis from a learned amplitude-like plane, which convolution may
/// have driven negative. A negative entry acts as a positive amplitude with
/// the phase flipped by pi, so the inverse transform is still well defined;
/// only the [`Spectrum`] invariant is bypassed.
pub(crate) fn resynth_edited(
    amp_like: &Tensor,
    pha: &Tensor,
    policy: RealPolicy,
) -> Result<Tensor> {
    if amp_like.shape() != pha.shape() {
        return Err(Error::ShapeMismatch {
            op: "resynth_edited",
            lhs: amp_like.shape().to_vec(),
            rhs: pha.shape().to_vec(),
        });
    }
    ifft2(
        &Spectrum {
            amp: amp_like.clone(),
            pha: pha.clone(),
        },
        policy,
    )
}

/// Cross the components of two images: the first result keeps `a`'s phase
/// with `b`'s amplitude, the second keeps `b`'s phase with `a`'s amplitude.
pub fn swap_components(a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "swap_components",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let sa = fft2(a)?;
    let sb = fft2(b)?;
    let first = ifft2(&recombine(&sb.amp, &sa.pha)?, RealPolicy::ForceReal)?;
    let second = ifft2(&recombine(&sa.amp, &sb.pha)?, RealPolicy::ForceReal)?;
    Ok((first, second))
}

/// Reconstruction from a single component: amplitude-only zeroes the phase,
/// phase-only sets every amplitude bin to one.
pub fn component_only(a: &Tensor, which: Component) -> Result<Tensor> {
    let s = fft2(a)?;
    let spectrum = match which {
        Component::Amplitude => {
            let zeros = Tensor::zeros(s.pha.shape().to_vec());
            recombine(&s.amp, &zeros)?
        }
        Component::Phase => {
            let ones = Tensor::leaf(s.amp.shape().to_vec(), vec![1.0; s.amp.numel()]);
            recombine(&ones, &s.pha)?
        }
    };
    ifft2(&spectrum, RealPolicy::ForceReal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    /// Literal quadruple-loop evaluation of the unitary forward transform.
    fn naive_dft(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for u in 0..h {
            for v in 0..w {
                let mut acc_re = 0.0;
                let mut acc_im = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let ang = -TAU * (y as f64 * u as f64 / h as f64
                            + x as f64 * v as f64 / w as f64);
                        acc_re += plane[y * w + x] * ang.cos();
                        acc_im += plane[y * w + x] * ang.sin();
                    }
                }
                re[u * w + v] = acc_re * scale;
                im[u * w + v] = acc_im * scale;
            }
        }
        (re, im)
    }

    fn naive_idft(re: &[f64], im: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let mut ore = vec![0.0; h * w];
        let mut oim = vec![0.0; h * w];
        let scale = 1.0 / ((h * w) as f64).sqrt();
        for y in 0..h {
            for x in 0..w {
                let mut acc_re = 0.0;
                let mut acc_im = 0.0;
                for u in 0..h {
                    for v in 0..w {
                        let ang = TAU * (y as f64 * u as f64 / h as f64
                            + x as f64 * v as f64 / w as f64);
                        let (c, s) = (ang.cos(), ang.sin());
                        acc_re += re[u * w + v] * c - im[u * w + v] * s;
                        acc_im += re[u * w + v] * s + im[u * w + v] * c;
                    }
                }
                ore[y * w + x] = acc_re * scale;
                oim[y * w + x] = acc_im * scale;
            }
        }
        (ore, oim)
    }

    fn rand_image(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "fourier-test", 0, 0);
        let n = shape.iter().product();
        Tensor::leaf(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn constant_image_is_dc_only() {
        let c = 1.7;
        let x = Tensor::leaf(vec![1, 2, 2], vec![c; 4]);
        let s = fft2(&x).unwrap();
        assert!((s.amp.data()[0] - 2.0 * c).abs() < 1e-12);
        for k in 1..4 {
            assert!(s.amp.data()[k].abs() < 1e-12);
        }
    }

    #[test]
    fn delta_image_has_flat_spectrum() {
        let x = Tensor::leaf(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        let s = fft2(&x).unwrap();
        for k in 0..4 {
            assert!((s.amp.data()[k] - 0.5).abs() < 1e-12);
            assert!(s.pha.data()[k].abs() < 1e-12);
        }
    }

    #[test]
    fn fft2_matches_naive_dft() {
        for (h, w) in [(2, 2), (3, 4), (4, 3), (8, 8), (3, 3), (8, 3)] {
            let x = rand_image(vec![1, h, w], (h * 100 + w) as u64);
            let s = fft2(&x).unwrap();
            let (re, im) = naive_dft(x.data(), h, w);
            for k in 0..h * w {
                let (a, p) = amp_phase(re[k], im[k]);
                assert!((s.amp.data()[k] - a).abs() < 1e-10, "amp mismatch at {k} for {h}x{w}");
                if a > 1e-9 {
                    let mut dp = (s.pha.data()[k] - p).abs();
                    dp = dp.min((dp - TAU).abs());
                    assert!(dp < 1e-8, "phase mismatch at {k} for {h}x{w}");
                }
            }
        }
    }

    #[test]
    fn amp_phase_known_values() {
        let (a, p) = amp_phase(3.0, 4.0);
        assert!((a - 5.0).abs() < 1e-12);
        assert!((p - 0.927295218).abs() < 1e-9);
        let (a, p) = amp_phase(-1.0, 0.0);
        assert!((a - 1.0).abs() < 1e-15);
        assert!((p - PI).abs() < 1e-15);
        assert_eq!(amp_phase(0.0, 0.0), (0.0, 0.0));
    }

    #[test]
    fn phases_stay_in_half_open_interval() {
        let x = rand_image(vec![2, 4, 4], 5);
        let s = fft2(&x).unwrap();
        for &p in s.pha.data() {
            assert!(p > -PI && p <= PI);
        }
        for &a in s.amp.data() {
            assert!(a >= 0.0);
        }
    }

    #[test]
    fn recombine_inverts_decomposition() {
        let x = rand_image(vec![1, 4, 4], 8);
        let s = fft2(&x).unwrap();
        let r = recombine(&s.amp, &s.pha).unwrap();
        for k in 0..16 {
            assert!((r.amp.data()[k] - s.amp.data()[k]).abs() < 1e-12);
            assert!((r.pha.data()[k] - s.pha.data()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn recombine_rejects_negative_amplitude() {
        let amp = Tensor::leaf(vec![1, 2, 2], vec![1.0, -0.5, 0.0, 0.0]);
        let pha = Tensor::zeros(vec![1, 2, 2]);
        assert!(recombine(&amp, &pha).is_err());
    }

    #[test]
    fn flat_spectrum_inverts_to_scaled_delta() {
        let (h, w) = (4, 4);
        let amp = Tensor::leaf(vec![1, h, w], vec![1.0; h * w]);
        let pha = Tensor::zeros(vec![1, h, w]);
        let x = ifft2(&recombine(&amp, &pha).unwrap(), RealPolicy::Strict).unwrap();
        let (ore, _) = naive_idft(&vec![1.0; h * w], &vec![0.0; h * w], h, w);
        for k in 0..h * w {
            assert!((x.data()[k] - ore[k]).abs() < 1e-10);
        }
        assert!((x.data()[0] - (h * w) as f64 / ((h * w) as f64).sqrt()).abs() < 1e-10);
        for k in 1..h * w {
            assert!(x.data()[k].abs() < 1e-10);
        }
    }

    #[test]
    fn zero_amplitude_gives_zero_image() {
        let amp = Tensor::zeros(vec![1, 3, 5]);
        let pha = Tensor::zeros(vec![1, 3, 5]);
        let x = ifft2(&recombine(&amp, &pha).unwrap(), RealPolicy::Strict).unwrap();
        assert!(x.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn round_trip_is_identity_on_all_small_shapes() {
        for h in 1..=16usize {
            for w in 1..=16usize {
                let x = rand_image(vec![1, h, w], (h * 31 + w) as u64);
                let y = ifft2(&fft2(&x).unwrap(), RealPolicy::Strict).unwrap();
                for (a, b) in x.data().iter().zip(y.data()) {
                    assert!((a - b).abs() < 1e-10, "round trip failed for {h}x{w}");
                }
            }
        }
    }

    #[test]
    fn real_images_have_conjugate_symmetric_amplitude() {
        let (h, w) = (6, 5);
        let x = rand_image(vec![1, h, w], 77);
        let s = fft2(&x).unwrap();
        for u in 0..h {
            for v in 0..w {
                let a = s.amp.data()[u * w + v];
                let b = s.amp.data()[((h - u) % h) * w + (w - v) % w];
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hand_two_by_two_inverse_matches_naive() {
        let re = vec![1.0, 2.0, 3.0, 4.0];
        let im = vec![0.0, 0.0, 0.0, 0.0];
        let (got_re, got_im) = fft2_plane(&re, &im, 2, 2, true);
        let (exp_re, exp_im) = naive_idft(&re, &im, 2, 2);
        for k in 0..4 {
            assert!((got_re[k] - exp_re[k]).abs() < 1e-12);
            assert!((got_im[k] - exp_im[k]).abs() < 1e-12);
        }
        // 2x2 by hand: bins (y,x) of the unnormalized inverse are
        // [1+2+3+4, 1-2+3-4, 1+2-3-4, 1-2-3+4] / sqrt(4).
        let hand = [5.0, -1.0, -2.0, 0.0];
        for k in 0..4 {
            assert!((got_re[k] - hand[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn strict_policy_rejects_asymmetric_edits() {
        let x = rand_image(vec![1, 4, 4], 91);
        let s = fft2(&x).unwrap();
        // Random phases break conjugate symmetry almost surely.
        let edited = rand_image(vec![1, 4, 4], 92);
        let pha = Tensor::leaf(vec![1, 4, 4], edited.data().iter().map(|v| v * 2.0).collect());
        let bad = recombine(&s.amp, &pha).unwrap();
        assert!(matches!(
            ifft2(&bad, RealPolicy::Strict),
            Err(Error::ImaginaryResidue { .. })
        ));
        assert!(ifft2(&bad, RealPolicy::ForceReal).is_ok());
    }

    #[test]
    fn self_swap_is_identity() {
        let a = rand_image(vec![3, 6, 4], 101);
        let (x, y) = swap_components(&a, &a).unwrap();
        for k in 0..a.numel() {
            assert!((x.data()[k] - a.data()[k]).abs() < 1e-10);
            assert!((y.data()[k] - a.data()[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn double_swap_recovers_originals() {
        let a = rand_image(vec![1, 8, 8], 103);
        let b = rand_image(vec![1, 8, 8], 104);
        let (x, y) = swap_components(&a, &b).unwrap();
        // x carries a's phase, y carries b's phase; swapping the produced
        // pair's components again restores the originals.
        let (a2, b2) = swap_components(&x, &y).unwrap();
        for k in 0..a.numel() {
            assert!((a2.data()[k] - a.data()[k]).abs() < 1e-8);
            assert!((b2.data()[k] - b.data()[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn amplitude_only_reconstruction_is_even_symmetric() {
        let (h, w) = (6, 4);
        let a = rand_image(vec![1, h, w], 107);
        let x = component_only(&a, Component::Amplitude).unwrap();
        for y in 0..h {
            for xx in 0..w {
                let v1 = x.data()[y * w + xx];
                let v2 = x.data()[((h - y) % h) * w + (w - xx) % w];
                assert!((v1 - v2).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn amplitude_only_of_constant_image_is_the_image() {
        let x = Tensor::leaf(vec![1, 4, 4], vec![0.42; 16]);
        let y = component_only(&x, Component::Amplitude).unwrap();
        for k in 0..16 {
            assert!((y.data()[k] - 0.42).abs() < 1e-10);
        }
    }

    #[test]
    fn phase_only_of_zero_image_is_delta_like() {
        let x = Tensor::zeros(vec![1, 4, 4]);
        let y = component_only(&x, Component::Phase).unwrap();
        assert!((y.data()[0] - 4.0).abs() < 1e-10);
        for k in 1..16 {
            assert!(y.data()[k].abs() < 1e-10);
        }
    }

    #[test]
    fn component_pipeline_matches_naive_oracle() {
        let (h, w) = (5, 6);
        let a = rand_image(vec![1, h, w], 113);
        let got = component_only(&a, Component::Phase).unwrap();
        let (re, im) = naive_dft(a.data(), h, w);
        let mut ure = vec![0.0; h * w];
        let mut uim = vec![0.0; h * w];
        for k in 0..h * w {
            let (a, p) = amp_phase(re[k], im[k]);
            let amp = if a == 0.0 && p == 0.0 { 1.0 } else { 1.0 };
            ure[k] = amp * p.cos();
            uim[k] = amp * p.sin();
        }
        let (ore, _) = naive_idft(&ure, &uim, h, w);
        for k in 0..h * w {
            assert!((got.data()[k] - ore[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn parseval_energy_is_preserved() {
        for h in 1..=16usize {
            for w in 1..=16usize {
                let x = rand_image(vec![1, h, w], (h * 131 + w) as u64);
                let s = fft2(&x).unwrap();
                let spatial: f64 = x.data().iter().map(|v| v * v).sum();
                let spectral: f64 = s.amp.data().iter().map(|v| v * v).sum();
                let rel = (spatial - spectral).abs() / spatial.max(1e-300);
                assert!(rel < 1e-10, "Parseval violated for {h}x{w}: rel={rel:e}");
            }
        }
    }
}
