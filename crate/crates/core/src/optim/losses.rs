//! Loss terms and their analytic gradients: photometric (L1 + D-SSIM),
//! depth distortion, normal consistency, rigging hinges and the
//! contact-guided isotropic regularizer, plus PSNR/SSIM metrics.

use serde::{Deserialize, Serialize};

use crate::geom::{Camera, Vec3};
use crate::io::ImageRgb;
use crate::model::{SurfelGrad, Surfel2D};
use crate::render::{ImageGrads, RenderOutput};
use crate::{Error, Result};

/// Loss weights; the defaults mirror the published settings.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// D-SSIM mixing weight inside the photometric term.
    pub lambda_dssim: f64,
    /// Depth distortion (lambda 1).
    pub w_distortion: f64,
    /// Normal consistency (lambda 2).
    pub w_normal: f64,
    /// Rigging position hinge (lambda 3).
    pub w_position: f64,
    /// Rigging scale hinge (lambda 4).
    pub w_scale: f64,
    /// Contact-voxel isotropy (lambda 5).
    pub w_isotropic: f64,
    /// Target min/max scale ratio inside contact voxels.
    pub tau_s: f64,
    /// Rigging hinge thresholds (local units).
    pub eps_p: f64,
    pub eps_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dssim: 0.2,
            w_distortion: 100.0,
            w_normal: 0.005,
            w_position: 0.01,
            w_scale: 1.0,
            w_isotropic: 0.1,
            tau_s: 0.4,
            eps_p: 1.0,
            eps_s: 0.6,
        }
    }
}

/// Unweighted components of the total loss.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossComponents {
    pub photometric: f64,
    pub distortion: f64,
    pub normal: f64,
    pub position: f64,
    pub scale: f64,
    pub isotropic: f64,
}

/// Weighted sum of the six components.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    let total = c.photometric
        + w.w_distortion * c.distortion
        + w.w_normal * c.normal
        + w.w_position * c.position
        + w.w_scale * c.scale
        + w.w_isotropic * c.isotropic;
    if total.is_finite() {
        Ok(total)
    } else {
        Err(Error::NonFinite { context: format!("total loss from {c:?}") })
    }
}

// ---------------------------------------------------------------------
// SSIM machinery
// ---------------------------------------------------------------------

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable same-size convolution with zero padding (the kernel is
/// symmetric, so this is its own adjoint).
fn conv_same(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xi = x as isize + i as isize - r as isize;
                if xi >= 0 && (xi as usize) < w {
                    acc += kv * src[y * w + xi as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yi = y as isize + i as isize - r as isize;
                if yi >= 0 && (yi as usize) < h {
                    acc += kv * tmp[yi as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

struct SsimPlane {
    value: f64,
    /// dSSIM/dx per pixel (x = first argument).
    grad_x: Vec<f64>,
}

fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize, with_grad: bool) -> SsimPlane {
    let k = gaussian_kernel();
    let n = w * h;
    let mu_x = conv_same(x, w, h, &k);
    let mu_y = conv_same(y, w, h, &k);
    let x2: Vec<f64> = x.iter().map(|v| v * v).collect();
    let y2: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let e_x2 = conv_same(&x2, w, h, &k);
    let e_y2 = conv_same(&y2, w, h, &k);
    let e_xy = conv_same(&xy, w, h, &k);

    let mut value = 0.0;
    let mut d_mu = vec![0.0; n];
    let mut d_ex2 = vec![0.0; n];
    let mut d_exy = vec![0.0; n];
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sx2 = e_x2[i] - mx * mx;
        let sy2 = e_y2[i] - my * my;
        let sxy = e_xy[i] - mx * my;
        let n1 = 2.0 * mx * my + SSIM_C1;
        let n2 = 2.0 * sxy + SSIM_C2;
        let d1 = mx * mx + my * my + SSIM_C1;
        let d2 = sx2 + sy2 + SSIM_C2;
        let s = (n1 * n2) / (d1 * d2);
        value += s;
        if with_grad {
            // Treat (mu_x, E[x^2], E[xy]) as the conv outputs.
            d_mu[i] = (2.0 * my * n2 - 2.0 * my * n1) / (d1 * d2)
                - s * (2.0 * mx / d1 - 2.0 * mx / d2);
            d_ex2[i] = -s / d2;
            d_exy[i] = 2.0 * n1 / (d1 * d2);
        }
    }
    value /= n as f64;

    let grad_x = if with_grad {
        for i in 0..n {
            d_mu[i] /= n as f64;
            d_ex2[i] /= n as f64;
            d_exy[i] /= n as f64;
        }
        let a = conv_same(&d_mu, w, h, &k);
        let b = conv_same(&d_ex2, w, h, &k);
        let c = conv_same(&d_exy, w, h, &k);
        (0..n).map(|i| a[i] + 2.0 * x[i] * b[i] + y[i] * c[i]).collect()
    } else {
        Vec::new()
    };
    SsimPlane { value, grad_x }
}

/// Mean SSIM over RGB channels (11x11 Gaussian window, sigma 1.5).
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height));
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    for ch in 0..3 {
        let xa: Vec<f64> = a.data.iter().map(|p| p[ch]).collect();
        let xb: Vec<f64> = b.data.iter().map(|p| p[ch]).collect();
        total += ssim_plane(&xa, &xb, w, h, false).value;
    }
    total / 3.0
}

/// PSNR in dB over RGB with unit peak.
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height));
    let mut mse = 0.0;
    for (pa, pb) in a.data.iter().zip(&b.data) {
        for ch in 0..3 {
            let d = pa[ch] - pb[ch];
            mse += d * d;
        }
    }
    mse /= (a.data.len() * 3) as f64;
    if mse <= 1e-20 {
        200.0
    } else {
        -10.0 * mse.log10()
    }
}

/// Photometric loss parts.
#[derive(Clone, Copy, Debug)]
pub struct PhotometricLoss {
    pub l1: f64,
    pub dssim: f64,
    pub total: f64,
}

/// Foreground-supervised target: outside the mask the target becomes the
/// training background, forcing empty space transparent.
pub fn masked_target(target: &ImageRgb, mask: Option<&crate::io::ImageGray>, background: [f64; 3]) -> ImageRgb {
    let mut out = target.clone();
    if let Some(m) = mask {
        for (px, mv) in out.data.iter_mut().zip(&m.data) {
            if *mv <= 0.5 {
                *px = background;
            }
        }
    }
    out
}

/// (1 - lambda) L1 + lambda (1 - SSIM)/2 between a rendered color buffer
/// and a (pre-masked) target. Optionally writes dLoss/dRendered.
pub fn loss_photometric(
    rendered: &[[f64; 3]],
    target: &ImageRgb,
    lambda: f64,
    mut grad: Option<&mut Vec<[f64; 3]>>,
) -> Result<PhotometricLoss> {
    let (w, h) = (target.width, target.height);
    if rendered.len() != w * h {
        return Err(Error::DimensionMismatch { a: (rendered.len(), 1), b: (w, h) });
    }
    let n = (w * h * 3) as f64;
    if let Some(g) = grad.as_deref_mut() {
        g.clear();
        g.resize(w * h, [0.0; 3]);
    }

    let mut l1 = 0.0;
    for (i, (r, t)) in rendered.iter().zip(&target.data).enumerate() {
        for ch in 0..3 {
            let d = r[ch] - t[ch];
            l1 += d.abs();
            if let Some(g) = grad.as_deref_mut() {
                g[i][ch] += (1.0 - lambda) * d.signum() / n;
            }
        }
    }
    l1 /= n;

    let mut ssim_sum = 0.0;
    for ch in 0..3 {
        let xr: Vec<f64> = rendered.iter().map(|p| p[ch]).collect();
        let xt: Vec<f64> = target.data.iter().map(|p| p[ch]).collect();
        let plane = ssim_plane(&xr, &xt, w, h, grad.is_some());
        ssim_sum += plane.value;
        if let Some(g) = grad.as_deref_mut() {
            // d/dx of lambda * (1 - ssim)/2, with ssim averaged over 3
            // channels.
            for (i, gv) in plane.grad_x.iter().enumerate() {
                g[i][ch] += lambda * (-0.5) * gv / 3.0;
            }
        }
    }
    let mean_ssim = ssim_sum / 3.0;
    let dssim = (1.0 - mean_ssim) / 2.0;
    Ok(PhotometricLoss { l1, dssim, total: (1.0 - lambda) * l1 + lambda * dssim })
}

// ---------------------------------------------------------------------
// Rendering-level regularizers
// ---------------------------------------------------------------------

/// Mean per-pixel depth distortion. Adds `weight`-scaled gradients into
/// the distortion plane of `grads` when provided.
pub fn loss_distortion(out: &RenderOutput, weight: f64, grads: Option<&mut ImageGrads>) -> f64 {
    let n = out.distortion.len() as f64;
    let loss = out.distortion.iter().sum::<f64>() / n;
    if let Some(g) = grads {
        for d in g.distortion.iter_mut() {
            *d += weight / n;
        }
    }
    loss
}

/// Smooth coverage gate for the normal loss: 0 below alpha 0.4, 1 above
/// 0.6, C1-smooth in between (value and first derivative).
fn coverage_gate(alpha: f64) -> (f64, f64) {
    let t = ((alpha - 0.4) / 0.2).clamp(0.0, 1.0);
    let s = t * t * (3.0 - 2.0 * t);
    let ds = if t > 0.0 && t < 1.0 { (6.0 * t - 6.0 * t * t) / 0.2 } else { 0.0 };
    (s, ds)
}

/// Normal-consistency loss: blended surfel normals against the normal of
/// the expected-depth surface (forward differences of unprojected depth),
/// smoothly gated to well-covered pixels. Per gated pixel the term is
/// alpha - <blended normal, depth normal>, i.e. sum_i w_i (1 - n_i . N).
/// Adds `weight`-scaled gradients into the alpha, normal and depth planes.
pub fn loss_normal(
    out: &RenderOutput,
    camera: &Camera,
    weight: f64,
    mut grads: Option<&mut ImageGrads>,
) -> f64 {
    let (w, h) = (out.width, out.height);
    let n_px = (w * h) as f64;
    let origin = camera.center();
    let rot_t = camera.rot.transpose();
    let dir = |x: usize, y: usize| -> Vec3 {
        let d = Vec3::new(
            (x as f64 + 0.5 - camera.cx) / camera.fx,
            (y as f64 + 0.5 - camera.cy) / camera.fy,
            1.0,
        );
        (rot_t * d).normalize()
    };
    // Normalized expected depth; the smooth coverage gate keeps the
    // quotient away from vanishing alpha.
    const A_EPS: f64 = 1e-6;
    let ndepth = |i: usize| out.depth[i] / (out.alpha[i] + A_EPS);
    let point = |x: usize, y: usize| -> Vec3 { origin + ndepth(y * w + x) * dir(x, y) };

    let mut loss = 0.0;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let i = y * w + x;
            let (g0, dg0) = coverage_gate(out.alpha[i]);
            let (g1, dg1) = coverage_gate(out.alpha[i + 1]);
            let (g2, dg2) = coverage_gate(out.alpha[i + w]);
            let gate = g0 * g1 * g2;
            if gate <= 0.0 {
                continue;
            }
            let p0 = point(x, y);
            let pu = point(x + 1, y);
            let pv = point(x, y + 1);
            let eu = pu - p0;
            let ev = pv - p0;
            let c = eu.cross(&ev);
            let len = c.norm();
            if len < 1e-15 {
                continue;
            }
            let d0 = dir(x, y);
            let flip = if c.dot(&d0) > 0.0 { -1.0 } else { 1.0 };
            let nd = c * (flip / len);
            let nb = Vec3::new(out.normal[i][0], out.normal[i][1], out.normal[i][2]);
            let term = out.alpha[i] - nb.dot(&nd);
            loss += gate * term;

            if let Some(g) = grads.as_deref_mut() {
                let s = weight / n_px;
                g.alpha[i] += s * (gate + dg0 * g1 * g2 * term);
                g.alpha[i + 1] += s * (g0 * dg1 * g2 * term);
                g.alpha[i + w] += s * (g0 * g1 * dg2 * term);
                for ch in 0..3 {
                    g.normal[i][ch] += -s * gate * nd[ch];
                }
                // Chain through the depth-derived normal.
                let chat = c / len;
                let gc = -(flip * s * gate / len) * (nb - chat * chat.dot(&nb));
                let geu = ev.cross(&gc);
                let gev = gc.cross(&eu);
                // e_u = p(x+1,y) - p(x,y); e_v = p(x,y+1) - p(x,y); depth
                // enters through the alpha-normalized quotient.
                let mut add = |q: usize, dd: f64| {
                    let inv = 1.0 / (out.alpha[q] + A_EPS);
                    g.depth[q] += dd * inv;
                    g.alpha[q] += -dd * ndepth(q) * inv;
                };
                add(i, (-geu - gev).dot(&d0));
                add(i + 1, geu.dot(&dir(x + 1, y)));
                add(i + w, gev.dot(&dir(x, y + 1)));
            }
        }
    }
    loss / n_px
}

// ---------------------------------------------------------------------
// Per-surfel regularizers
// ---------------------------------------------------------------------

/// Isotropy penalty of one surfel: | min(s)/max(s) - tau_s | on the world
/// scales, with the gradient w.r.t. the two log-scales.
pub fn isotropy_penalty(log_scales: [f64; 2], tau_s: f64) -> (f64, [f64; 2]) {
    let (lmin, lmax, min_first) = if log_scales[0] <= log_scales[1] {
        (log_scales[0], log_scales[1], true)
    } else {
        (log_scales[1], log_scales[0], false)
    };
    let ratio = (lmin - lmax).exp();
    let diff = ratio - tau_s;
    let term = diff.abs();
    let s = if diff >= 0.0 { 1.0 } else { -1.0 };
    let g_min = s * ratio;
    let g_max = -s * ratio;
    let grad = if min_first { [g_min, g_max] } else { [g_max, g_min] };
    (term, grad)
}

/// Mean isotropy penalty over the selected surfels (zero when empty).
pub fn loss_isotropic(surfels: &[Surfel2D], selected: &[usize], tau_s: f64) -> f64 {
    if selected.is_empty() {
        return 0.0;
    }
    selected
        .iter()
        .map(|&i| isotropy_penalty(surfels[i].log_scales, tau_s).0)
        .sum::<f64>()
        / selected.len() as f64
}

/// Adds `weight`-scaled isotropy gradients into per-surfel world grads.
pub fn isotropic_backward(
    surfels: &[Surfel2D],
    selected: &[usize],
    tau_s: f64,
    weight: f64,
    grads: &mut [SurfelGrad],
) {
    if selected.is_empty() {
        return;
    }
    let scale = weight / selected.len() as f64;
    for &i in selected {
        let (_, g) = isotropy_penalty(surfels[i].log_scales, tau_s);
        grads[i].log_scales[0] += scale * g[0];
        grads[i].log_scales[1] += scale * g[1];
    }
}

/// Rigging hinge penalties for one local surfel: position hinge beyond
/// eps_p and linear-scale hinge beyond eps_s, with gradients w.r.t. local
/// position and log-scales.
pub fn rigging_penalties(
    s: &Surfel2D,
    eps_p: f64,
    eps_s: f64,
) -> (f64, f64, Vec3, [f64; 2]) {
    let hinge = Vec3::new(
        (s.pos.x.abs() - eps_p).max(0.0),
        (s.pos.y.abs() - eps_p).max(0.0),
        (s.pos.z.abs() - eps_p).max(0.0),
    );
    let pnorm = hinge.norm();
    let mut gpos = Vec3::zeros();
    if pnorm > 1e-15 {
        for c in 0..3 {
            if hinge[c] > 0.0 {
                gpos[c] = hinge[c] / pnorm * s.pos[c].signum();
            }
        }
    }

    let es = [s.log_scales[0].exp(), s.log_scales[1].exp()];
    let sh = [(es[0] - eps_s).max(0.0), (es[1] - eps_s).max(0.0)];
    let snorm = (sh[0] * sh[0] + sh[1] * sh[1]).sqrt();
    let mut gls = [0.0; 2];
    if snorm > 1e-15 {
        for c in 0..2 {
            if sh[c] > 0.0 {
                gls[c] = sh[c] / snorm * es[c];
            }
        }
    }
    (pnorm, snorm, gpos, gls)
}

/// Mean rigging penalties over a hand's local surfels.
pub fn loss_rigging(surfels: &[Surfel2D], eps_p: f64, eps_s: f64) -> (f64, f64) {
    if surfels.is_empty() {
        return (0.0, 0.0);
    }
    let mut p = 0.0;
    let mut s = 0.0;
    for surf in surfels {
        let (tp, ts, _, _) = rigging_penalties(surf, eps_p, eps_s);
        p += tp;
        s += ts;
    }
    (p / surfels.len() as f64, s / surfels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Quat;
    use crate::synth::fd_gradient;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageRgb {
        ImageRgb {
            width: w,
            height: h,
            data: (0..w * h)
                .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
                .collect(),
        }
    }

    #[test]
    fn photometric_zero_for_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_img(&mut rng, 16, 12);
        let loss = loss_photometric(&img.data, &img, 0.2, None).unwrap();
        assert_relative_eq!(loss.total, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn photometric_pure_l1_constant_offset() {
        let w = 10;
        let h = 8;
        let a = ImageRgb { width: w, height: h, data: vec![[0.5; 3]; w * h] };
        let rendered = vec![[0.6; 3]; w * h];
        let loss = loss_photometric(&rendered, &a, 0.0, None).unwrap();
        assert_relative_eq!(loss.total, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn ssim_and_l1_match_naive_reference() {
        // Independent direct implementation of the windowed statistics.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, h) = (14, 11);
        let a = rand_img(&mut rng, w, h);
        let b = rand_img(&mut rng, w, h);
        let loss = loss_photometric(&a.data, &b, 0.2, None).unwrap();

        let k = gaussian_kernel();
        let mut ssim_ref = 0.0;
        for ch in 0..3 {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut stats = [0.0f64; 5]; // mx, my, ex2, ey2, exy
                    for dy in -5..=5isize {
                        for dx in -5..=5isize {
                            let (xi, yi) = (x + dx, y + dy);
                            if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
                                continue;
                            }
                            let kv = k[(dx + 5) as usize] * k[(dy + 5) as usize];
                            let pa = a.data[yi as usize * w + xi as usize][ch];
                            let pb = b.data[yi as usize * w + xi as usize][ch];
                            stats[0] += kv * pa;
                            stats[1] += kv * pb;
                            stats[2] += kv * pa * pa;
                            stats[3] += kv * pb * pb;
                            stats[4] += kv * pa * pb;
                        }
                    }
                    let (mx, my) = (stats[0], stats[1]);
                    let sx2 = stats[2] - mx * mx;
                    let sy2 = stats[3] - my * my;
                    let sxy = stats[4] - mx * my;
                    ssim_ref += (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)
                        / ((mx * mx + my * my + SSIM_C1) * (sx2 + sy2 + SSIM_C2));
                }
            }
        }
        ssim_ref /= (3 * w * h) as f64;
        let mut l1_ref = 0.0;
        for (pa, pb) in a.data.iter().zip(&b.data) {
            for ch in 0..3 {
                l1_ref += (pa[ch] - pb[ch]).abs();
            }
        }
        l1_ref /= (3 * w * h) as f64;
        let expect = 0.8 * l1_ref + 0.2 * (1.0 - ssim_ref) / 2.0;
        assert_relative_eq!(loss.total, expect, epsilon = 1e-6);
        assert_relative_eq!(ssim(&a, &b), ssim_ref, epsilon = 1e-9);
    }

    #[test]
    fn photometric_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (8, 7);
        let target = rand_img(&mut rng, w, h);
        let rendered = rand_img(&mut rng, w, h);
        let mut grad = Some(Vec::new());
        let loss = loss_photometric(&rendered.data, &target, 0.2, grad.as_mut()).unwrap();
        assert!(loss.total.is_finite());
        let grad = grad.unwrap();

        let flat: Vec<f64> = rendered.data.iter().flatten().copied().collect();
        let f = |x: &[f64]| {
            let data: Vec<[f64; 3]> = x.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            loss_photometric(&data, &target, 0.2, None).unwrap().total
        };
        let fd = fd_gradient(&f, &flat, 1e-6).unwrap();
        for (i, fdv) in fd.iter().enumerate() {
            let a = grad[i / 3][i % 3];
            let denom = a.abs().max(fdv.abs()).max(1e-6);
            assert!((a - fdv).abs() / denom < 1e-4, "pixel {i}: {a} vs {fdv}");
        }
    }

    #[test]
    fn isotropy_examples_and_fd() {
        // Ratio exactly tau_s.
        let (t, _) = isotropy_penalty([(0.4f64 * 2.0).ln(), 2.0f64.ln()], 0.4);
        assert_relative_eq!(t, 0.0, epsilon = 1e-12);
        // Isotropic surfel: |1 - 0.4|.
        let (t, _) = isotropy_penalty([0.3, 0.3], 0.4);
        assert_relative_eq!(t, 0.6, epsilon = 1e-12);
        // FD check.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let ls = [rng.random::<f64>() * 2.0 - 2.0, rng.random::<f64>() * 2.0 - 2.0];
            let (_, g) = isotropy_penalty(ls, 0.4);
            let f = |x: &[f64]| isotropy_penalty([x[0], x[1]], 0.4).0;
            let fd = fd_gradient(&f, &ls, 1e-6).unwrap();
            for c in 0..2 {
                assert_relative_eq!(g[c], fd[c], epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn rigging_examples_and_fd() {
        let inside = Surfel2D::flat(
            Vec3::new(0.1, -0.2, 0.05),
            Quat::IDENTITY,
            [0.3, 0.2],
            0.5,
            [0.5; 3],
        );
        let (p, s, _, _) = rigging_penalties(&inside, 1.0, 0.6);
        assert_relative_eq!(p, 0.0, epsilon = 1e-12);
        assert_relative_eq!(s, 0.0, epsilon = 1e-12);

        // One coordinate at |x| = 2 -> hinge length 1.
        let out = Surfel2D::flat(Vec3::new(2.0, 0.0, 0.0), Quat::IDENTITY, [0.1, 0.1], 0.5, [0.5; 3]);
        let (p, _, _, _) = rigging_penalties(&out, 1.0, 0.6);
        assert_relative_eq!(p, 1.0, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s = Surfel2D {
                pos: Vec3::new(
                    (rng.random::<f64>() - 0.5) * 4.0,
                    (rng.random::<f64>() - 0.5) * 4.0,
                    (rng.random::<f64>() - 0.5) * 4.0,
                ),
                rot: Quat::IDENTITY,
                log_scales: [rng.random::<f64>() * 1.2 - 1.0, rng.random::<f64>() * 1.2 - 1.0],
                opacity_logit: 0.0,
                sh: vec![[0.0; 3]],
            };
            let (_, _, gp, gs) = rigging_penalties(&s, 1.0, 0.6);
            let fp = |x: &[f64]| {
                let mut t = s.clone();
                t.pos = Vec3::new(x[0], x[1], x[2]);
                rigging_penalties(&t, 1.0, 0.6).0
            };
            let fd = fd_gradient(&fp, &[s.pos.x, s.pos.y, s.pos.z], 1e-6).unwrap();
            for c in 0..3 {
                let denom = gp[c].abs().max(fd[c].abs()).max(1e-6);
                assert!((gp[c] - fd[c]).abs() / denom < 1e-4);
            }
            let fs = |x: &[f64]| {
                let mut t = s.clone();
                t.log_scales = [x[0], x[1]];
                rigging_penalties(&t, 1.0, 0.6).1
            };
            let fd = fd_gradient(&fs, &s.log_scales, 1e-6).unwrap();
            for c in 0..2 {
                let denom = gs[c].abs().max(fd[c].abs()).max(1e-6);
                assert!((gs[c] - fd[c]).abs() / denom < 1e-4);
            }
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        let zero = LossComponents::default();
        assert_relative_eq!(total_loss(&zero, &w).unwrap(), 0.0);

        let only_photo = LossComponents { photometric: 1.0, ..Default::default() };
        assert_relative_eq!(total_loss(&only_photo, &w).unwrap(), 1.0);

        let c = LossComponents {
            photometric: 0.5,
            distortion: 0.001,
            normal: 0.2,
            position: 0.1,
            scale: 0.05,
            isotropic: 0.3,
        };
        assert_relative_eq!(total_loss(&c, &w).unwrap(), 0.682, epsilon = 1e-12);

        let bad = LossComponents { photometric: f64::NAN, ..Default::default() };
        assert!(matches!(total_loss(&bad, &w), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn unit_components_sum_to_eq6_weights() {
        let w = LossWeights::default();
        let ones = LossComponents {
            photometric: 1.0,
            distortion: 1.0,
            normal: 1.0,
            position: 1.0,
            scale: 1.0,
            isotropic: 1.0,
        };
        assert_eq!(total_loss(&ones, &w).unwrap(), 102.115);
    }

    #[test]
    fn psnr_basics() {
        let a = ImageRgb { width: 4, height: 4, data: vec![[0.5; 3]; 16] };
        let mut b = a.clone();
        assert!(psnr(&a, &b) > 100.0);
        for p in b.data.iter_mut() {
            p[0] += 0.1;
        }
        // MSE = 0.01/3 -> PSNR = -10 log10(0.01/3).
        assert_relative_eq!(psnr(&a, &b), -10.0 * (0.01f64 / 3.0).log10(), epsilon = 1e-9);
    }
}
