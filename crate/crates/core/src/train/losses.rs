//! Training losses: the photometric term (0.8 L1 + 0.2 (1 - SSIM)) and the
//! LD distillation term (cosine + L1 over supervised pixels), each with an
//! exact hand-written adjoint.
//!
//! SSIM uses the standard 11x11 Gaussian window (sigma 1.5) with c1 = 0.01^2,
//! c2 = 0.03^2, computed per channel and averaged. Convolution borders use
//! replicate padding, which keeps constant images exactly constant and makes
//! the constant-shift closed form hold at every pixel.

use crate::error::{Error, Result};
use crate::math::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel<T: Real>() -> [T; SSIM_WINDOW] {
    let mut k = [T::zero(); SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0f64;
    let mut raw = [0.0f64; SSIM_WINDOW];
    for (i, r) in raw.iter_mut().enumerate() {
        let x = i as f64 - half;
        *r = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *r;
    }
    for (o, r) in k.iter_mut().zip(raw) {
        *o = T::of(r / sum);
    }
    k
}

/// Separable convolution with replicate (clamp-to-edge) padding:
/// rows first, then columns.
fn conv_replicate<T: Real>(src: &[T], h: usize, w: usize, kernel: &[T; SSIM_WINDOW]) -> Vec<T> {
    let half = SSIM_WINDOW as isize / 2;
    let mut tmp = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (t, &kv) in kernel.iter().enumerate() {
                let sx = (x as isize + t as isize - half).clamp(0, w as isize - 1) as usize;
                acc = acc + kv * src[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (t, &kv) in kernel.iter().enumerate() {
                let sy = (y as isize + t as isize - half).clamp(0, h as isize - 1) as usize;
                acc = acc + kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Adjoint of [`conv_replicate`]: scatter through the column pass, then the
/// row pass, clamping indices the same way.
fn conv_replicate_adjoint<T: Real>(
    grad_out: &[T],
    h: usize,
    w: usize,
    kernel: &[T; SSIM_WINDOW],
) -> Vec<T> {
    let half = SSIM_WINDOW as isize / 2;
    let mut tmp = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let g = grad_out[y * w + x];
            if g == T::zero() {
                continue;
            }
            for (t, &kv) in kernel.iter().enumerate() {
                let sy = (y as isize + t as isize - half).clamp(0, h as isize - 1) as usize;
                tmp[sy * w + x] = tmp[sy * w + x] + kv * g;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let g = tmp[y * w + x];
            if g == T::zero() {
                continue;
            }
            for (t, &kv) in kernel.iter().enumerate() {
                let sx = (x as isize + t as isize - half).clamp(0, w as isize - 1) as usize;
                out[y * w + sx] = out[y * w + sx] + kv * g;
            }
        }
    }
    out
}

fn split_channel<T: Real>(img: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    (0..h * w).map(|p| img[p * 3 + c]).collect()
}

/// Mean SSIM between two H*W*3 images, per channel then averaged.
pub fn mean_ssim<T: Real>(x: &[T], y: &[T], h: usize, w: usize) -> T {
    let kernel = gaussian_kernel::<T>();
    let c1 = T::of(SSIM_C1);
    let c2 = T::of(SSIM_C2);
    let two = T::of(2.0);
    let mut total = T::zero();
    for c in 0..3 {
        let xc = split_channel(x, h, w, c);
        let yc = split_channel(y, h, w, c);
        let mx = conv_replicate(&xc, h, w, &kernel);
        let my = conv_replicate(&yc, h, w, &kernel);
        let xx: Vec<T> = xc.iter().map(|&v| v * v).collect();
        let yy: Vec<T> = yc.iter().map(|&v| v * v).collect();
        let xy: Vec<T> = xc.iter().zip(&yc).map(|(&a, &b)| a * b).collect();
        let gxx = conv_replicate(&xx, h, w, &kernel);
        let gyy = conv_replicate(&yy, h, w, &kernel);
        let gxy = conv_replicate(&xy, h, w, &kernel);
        for p in 0..h * w {
            let (ux, uy) = (mx[p], my[p]);
            let sx = gxx[p] - ux * ux;
            let sy = gyy[p] - uy * uy;
            let sxy = gxy[p] - ux * uy;
            let a1 = two * ux * uy + c1;
            let a2 = two * sxy + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = sx + sy + c2;
            total = total + (a1 * a2) / (b1 * b2);
        }
    }
    total / T::of((h * w * 3) as f64)
}

/// d mean_ssim / d y.
pub fn mean_ssim_backward<T: Real>(x: &[T], y: &[T], h: usize, w: usize) -> Vec<T> {
    let kernel = gaussian_kernel::<T>();
    let c1 = T::of(SSIM_C1);
    let c2 = T::of(SSIM_C2);
    let two = T::of(2.0);
    let scale = T::one() / T::of((h * w * 3) as f64);
    let mut grad = vec![T::zero(); h * w * 3];
    for c in 0..3 {
        let xc = split_channel(x, h, w, c);
        let yc = split_channel(y, h, w, c);
        let mx = conv_replicate(&xc, h, w, &kernel);
        let my = conv_replicate(&yc, h, w, &kernel);
        let xx: Vec<T> = xc.iter().map(|&v| v * v).collect();
        let yy: Vec<T> = yc.iter().map(|&v| v * v).collect();
        let xy: Vec<T> = xc.iter().zip(&yc).map(|(&a, &b)| a * b).collect();
        let gxx = conv_replicate(&xx, h, w, &kernel);
        let gyy = conv_replicate(&yy, h, w, &kernel);
        let gxy = conv_replicate(&xy, h, w, &kernel);

        let mut d_my = vec![T::zero(); h * w];
        let mut d_gyy = vec![T::zero(); h * w];
        let mut d_gxy = vec![T::zero(); h * w];
        for p in 0..h * w {
            let (ux, uy) = (mx[p], my[p]);
            let sx = gxx[p] - ux * ux;
            let sy = gyy[p] - uy * uy;
            let sxy = gxy[p] - ux * uy;
            let a1 = two * ux * uy + c1;
            let a2 = two * sxy + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = sx + sy + c2;
            let inv = T::one() / (b1 * b2);
            let da1 = scale * a2 * inv;
            let da2 = scale * a1 * inv;
            let db1 = -scale * a1 * a2 * inv / b1;
            let db2 = -scale * a1 * a2 * inv / b2;
            let dsxy = da2 * two;
            let dsy = db2;
            d_my[p] = da1 * two * ux + db1 * two * uy - dsxy * ux - dsy * two * uy;
            d_gyy[p] = dsy;
            d_gxy[p] = dsxy;
        }
        let ga = conv_replicate_adjoint(&d_my, h, w, &kernel);
        let gb = conv_replicate_adjoint(&d_gyy, h, w, &kernel);
        let gc = conv_replicate_adjoint(&d_gxy, h, w, &kernel);
        for p in 0..h * w {
            grad[p * 3 + c] = ga[p] + two * yc[p] * gb[p] + xc[p] * gc[p];
        }
    }
    grad
}

/// L_pho = 0.8 * mean |C - Chat| + 0.2 * (1 - SSIM(C, Chat)).
pub fn photometric_loss<T: Real>(c: &[T], chat: &[T], h: usize, w: usize) -> Result<T> {
    if c.len() != h * w * 3 || chat.len() != c.len() {
        return Err(Error::validation("photometric loss image shapes disagree"));
    }
    let mut l1 = T::zero();
    for (&a, &b) in c.iter().zip(chat) {
        l1 = l1 + (a - b).abs();
    }
    l1 = l1 / T::of((h * w * 3) as f64);
    let ssim = mean_ssim(c, chat, h, w);
    Ok(T::of(0.8) * l1 + T::of(0.2) * (T::one() - ssim))
}

/// d L_pho / d Chat.
pub fn photometric_backward<T: Real>(c: &[T], chat: &[T], h: usize, w: usize) -> Result<Vec<T>> {
    if c.len() != h * w * 3 || chat.len() != c.len() {
        return Err(Error::validation("photometric loss image shapes disagree"));
    }
    let n = T::of((h * w * 3) as f64);
    let mut grad = mean_ssim_backward(c, chat, h, w);
    let w_l1 = T::of(0.8) / n;
    let w_ssim = T::of(0.2);
    for (g, (&cv, &hv)) in grad.iter_mut().zip(c.iter().zip(chat)) {
        let sign = if hv > cv {
            T::one()
        } else if hv < cv {
            -T::one()
        } else {
            T::zero()
        };
        *g = w_l1 * sign - w_ssim * *g;
    }
    Ok(grad)
}

/// L_LD over supervised pixels: mean(1 - cos(M, Mhat)) + mean per-pixel L1.
/// Identical in form to the language loss, applied in the LD space.
pub fn ld_loss<T: Real>(target: &[T], pred: &[T], dim: usize) -> Result<T> {
    crate::attention::lang_loss(target, pred, dim)
}

pub fn ld_loss_backward<T: Real>(target: &[T], pred: &[T], dim: usize) -> Result<Vec<T>> {
    crate::attention::lang_loss_backward(target, pred, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_have_zero_loss() {
        let img = vec![0.4f64; 8 * 8 * 3];
        let l = photometric_loss(&img, &img, 8, 8).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn constant_shift_matches_closed_form() {
        let (h, w) = (10, 12);
        let a = 0.3f64;
        let b = 0.4f64;
        let c: Vec<f64> = vec![a; h * w * 3];
        let chat: Vec<f64> = vec![b; h * w * 3];
        let loss = photometric_loss(&c, &chat, h, w).unwrap();
        // Constant images: variances vanish, SSIM = (2ab + c1) / (a^2 + b^2 + c1).
        let ssim = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        let expect = 0.8 * 0.1 + 0.2 * (1.0 - ssim);
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }

    #[test]
    fn loss_is_nonnegative_on_random_images() {
        let mut rng = crate::rng::stream_rng(1, crate::rng::Stream::GradCheck);
        use rand::Rng;
        let (h, w) = (9, 7);
        let c: Vec<f64> = (0..h * w * 3).map(|_| rng.gen::<f64>()).collect();
        let chat: Vec<f64> = (0..h * w * 3).map(|_| rng.gen::<f64>()).collect();
        let l = photometric_loss(&c, &chat, h, w).unwrap();
        assert!(l >= 0.0);
    }

    #[test]
    fn ld_loss_zero_point_and_antipodal() {
        let m = vec![0.5f64, -0.5, 0.5, 0.5];
        assert!(ld_loss(&m, &m, 2).unwrap().abs() < 1e-12);
        let unit = vec![1.0f64, 0.0];
        let neg = vec![-1.0f64, 0.0];
        let l = ld_loss(&unit, &neg, 2).unwrap();
        assert!((l - 4.0).abs() < 1e-12);
        assert!(ld_loss(&m, &[0.1, 0.2, 0.3, 0.4], 2).unwrap() >= 0.0);
    }

    #[test]
    fn conv_adjoint_is_exact_transpose() {
        // <K u, v> == <u, K^T v> for random u, v.
        let mut rng = crate::rng::stream_rng(2, crate::rng::Stream::GradCheck);
        use rand::Rng;
        let (h, w) = (7, 9);
        let kernel = gaussian_kernel::<f64>();
        let u: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>() - 0.5).collect();
        let v: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>() - 0.5).collect();
        let ku = conv_replicate(&u, h, w, &kernel);
        let ktv = conv_replicate_adjoint(&v, h, w, &kernel);
        let lhs: f64 = ku.iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&ktv).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }
}
