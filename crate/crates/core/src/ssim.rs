//! Structural similarity with an 11x11 Gaussian window (σ = 1.5), evaluated
//! only where the window fits inside the image and averaged over channels.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::reduce::pairwise_sum;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut k = [0.0; WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-(d * d) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode filtering of a `w x h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * row[x + t];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * horiz[(y + t) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an output-sized map back to `w x h`.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for (t, kv) in k.iter().enumerate() {
                horiz[(y + t) * ow + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = horiz[y * ow + x];
            for (t, kv) in k.iter().enumerate() {
                out[y * w + x + t] += kv * v;
            }
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.as_slice().iter().skip(c).step_by(3).copied().collect()
}

fn check(a: &Image, b: &Image) -> Result<()> {
    a.ensure_same_shape(b)?;
    if a.width() < WINDOW || a.height() < WINDOW {
        return Err(Error::InvalidInput(format!(
            "{}x{} image is smaller than the {WINDOW}x{WINDOW} ssim window",
            a.width(),
            a.height()
        )));
    }
    Ok(())
}

struct ChannelStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    sigma_x: Vec<f64>,
    sigma_y: Vec<f64>,
    sigma_xy: Vec<f64>,
}

fn channel_stats(x: &[f64], y: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> ChannelStats {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, w, h, k);
    let mu_y = filter_valid(y, w, h, k);
    let e_xx = filter_valid(&xx, w, h, k);
    let e_yy = filter_valid(&yy, w, h, k);
    let e_xy = filter_valid(&xy, w, h, k);
    let n = mu_x.len();
    let mut sigma_x = Vec::with_capacity(n);
    let mut sigma_y = Vec::with_capacity(n);
    let mut sigma_xy = Vec::with_capacity(n);
    for p in 0..n {
        sigma_x.push(e_xx[p] - mu_x[p] * mu_x[p]);
        sigma_y.push(e_yy[p] - mu_y[p] * mu_y[p]);
        sigma_xy.push(e_xy[p] - mu_x[p] * mu_y[p]);
    }
    ChannelStats {
        mu_x,
        mu_y,
        sigma_x,
        sigma_y,
        sigma_xy,
    }
}

/// Mean SSIM over all valid window positions and the three channels.
pub fn ssim_index(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let (w, h) = (a.width(), a.height());
    let k = kernel();
    let mut values = Vec::new();
    for c in 0..3 {
        let s = channel_stats(&channel(a, c), &channel(b, c), w, h, &k);
        for p in 0..s.mu_x.len() {
            let (mx, my) = (s.mu_x[p], s.mu_y[p]);
            let l = 2.0 * mx * my + C1;
            let m = mx * mx + my * my + C1;
            let cs = 2.0 * s.sigma_xy[p] + C2;
            let d = s.sigma_x[p] + s.sigma_y[p] + C2;
            values.push(l * cs / (m * d));
        }
    }
    Ok(pairwise_sum(&values) / values.len() as f64)
}

/// SSIM and its gradient w.r.t. the first image.
pub(crate) fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    check(a, b)?;
    let (w, h) = (a.width(), a.height());
    let k = kernel();
    let npos = (w + 1 - WINDOW) * (h + 1 - WINDOW);
    let norm = 1.0 / (3 * npos) as f64;
    let mut values = Vec::with_capacity(3 * npos);
    let mut grad = Image::zeros(w, h);
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let s = channel_stats(&x, &y, w, h, &k);
        let mut d_mu = vec![0.0; npos];
        let mut d_xx = vec![0.0; npos];
        let mut d_xy = vec![0.0; npos];
        for p in 0..npos {
            let (mx, my) = (s.mu_x[p], s.mu_y[p]);
            let l = 2.0 * mx * my + C1;
            let m = mx * mx + my * my + C1;
            let cs = 2.0 * s.sigma_xy[p] + C2;
            let d = s.sigma_x[p] + s.sigma_y[p] + C2;
            let ssim = l * cs / (m * d);
            values.push(ssim);
            d_mu[p] = norm * ssim * (2.0 * my / l - 2.0 * mx / m + 2.0 * mx / d - 2.0 * my / cs);
            d_xx[p] = norm * (-ssim / d);
            d_xy[p] = norm * (2.0 * ssim / cs);
        }
        let g_mu = filter_valid_adjoint(&d_mu, w, h, &k);
        let g_xx = filter_valid_adjoint(&d_xx, w, h, &k);
        let g_xy = filter_valid_adjoint(&d_xy, w, h, &k);
        for i in 0..w * h {
            let v = g_mu[i] + 2.0 * x[i] * g_xx[i] + y[i] * g_xy[i];
            grad.as_mut_slice()[i * 3 + c] = v;
        }
    }
    Ok((pairwise_sum(&values) / values.len() as f64, grad))
}
