//! Real spherical-harmonics color evaluation (degrees 0..3) with analytic
//! gradients w.r.t. both coefficients and the view direction.

use crate::geom::Vec3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Basis values and their direction gradients for a unit direction.
pub fn sh_basis(degree: usize, d: &Vec3) -> (Vec<f64>, Vec<Vec3>) {
    let n = (degree + 1) * (degree + 1);
    let mut b = vec![0.0; n];
    let mut g = vec![Vec3::zeros(); n];
    let (x, y, z) = (d.x, d.y, d.z);

    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * y;
        g[1] = Vec3::new(0.0, -SH_C1, 0.0);
        b[2] = SH_C1 * z;
        g[2] = Vec3::new(0.0, 0.0, SH_C1);
        b[3] = -SH_C1 * x;
        g[3] = Vec3::new(-SH_C1, 0.0, 0.0);
    }
    if degree >= 2 {
        b[4] = SH_C2[0] * x * y;
        g[4] = Vec3::new(SH_C2[0] * y, SH_C2[0] * x, 0.0);
        b[5] = SH_C2[1] * y * z;
        g[5] = Vec3::new(0.0, SH_C2[1] * z, SH_C2[1] * y);
        b[6] = SH_C2[2] * (2.0 * z * z - x * x - y * y);
        g[6] = Vec3::new(-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z);
        b[7] = SH_C2[3] * x * z;
        g[7] = Vec3::new(SH_C2[3] * z, 0.0, SH_C2[3] * x);
        b[8] = SH_C2[4] * (x * x - y * y);
        g[8] = Vec3::new(2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0);
    }
    if degree >= 3 {
        b[9] = SH_C3[0] * y * (3.0 * x * x - y * y);
        g[9] = Vec3::new(SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * x * x - 3.0 * y * y), 0.0);
        b[10] = SH_C3[1] * x * y * z;
        g[10] = Vec3::new(SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y);
        b[11] = SH_C3[2] * y * (4.0 * z * z - x * x - y * y);
        g[11] = Vec3::new(
            -2.0 * SH_C3[2] * x * y,
            SH_C3[2] * (4.0 * z * z - x * x - 3.0 * y * y),
            8.0 * SH_C3[2] * y * z,
        );
        b[12] = SH_C3[3] * z * (2.0 * z * z - 3.0 * x * x - 3.0 * y * y);
        g[12] = Vec3::new(
            -6.0 * SH_C3[3] * x * z,
            -6.0 * SH_C3[3] * y * z,
            SH_C3[3] * (6.0 * z * z - 3.0 * x * x - 3.0 * y * y),
        );
        b[13] = SH_C3[4] * x * (4.0 * z * z - x * x - y * y);
        g[13] = Vec3::new(
            SH_C3[4] * (4.0 * z * z - 3.0 * x * x - y * y),
            -2.0 * SH_C3[4] * x * y,
            8.0 * SH_C3[4] * x * z,
        );
        b[14] = SH_C3[5] * z * (x * x - y * y);
        g[14] = Vec3::new(2.0 * SH_C3[5] * x * z, -2.0 * SH_C3[5] * y * z, SH_C3[5] * (x * x - y * y));
        b[15] = SH_C3[6] * x * (x * x - 3.0 * y * y);
        g[15] = Vec3::new(SH_C3[6] * (3.0 * x * x - 3.0 * y * y), -SH_C3[6] * 6.0 * x * y, 0.0);
    }
    (b, g)
}

/// Evaluated color (with the +0.5 offset convention), unclamped.
pub fn eval_color(basis: &[f64], sh: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.5; 3];
    for (b, coeff) in basis.iter().zip(sh) {
        for ch in 0..3 {
            c[ch] += b * coeff[ch];
        }
    }
    c
}
