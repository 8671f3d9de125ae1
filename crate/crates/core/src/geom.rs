//! Foundational geometry: quaternions, triangle local frames, pinhole
//! cameras and NeRF-style positional encoding.
//!
//! Everything is computed in `f64`. All functions here are pure and safe to
//! call concurrently.

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Triangles with area below this are considered degenerate and skipped.
pub const DEGENERATE_AREA: f64 = 1e-12;

/// Rotation quaternion, scalar-first layout.
///
/// Stored components may be unnormalized (they are optimized directly);
/// callers normalize before any rotation use.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let a = axis.normalize() * (angle * 0.5).sin();
        Quat { w: (angle * 0.5).cos(), x: a.x, y: a.y, z: a.z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        debug_assert!(n > 1e-12, "quaternion norm collapsed");
        Quat { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    pub fn conjugate(&self) -> Quat {
        Quat { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Quat) -> Quat {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (rhs.w, rhs.x, rhs.y, rhs.z);
        Quat {
            w: aw * bw - ax * bx - ay * by - az * bz,
            x: aw * bx + ax * bw + ay * bz - az * by,
            y: aw * by - ax * bz + ay * bw + az * bx,
            z: aw * bz + ax * by - ay * bx + az * bw,
        }
    }

    /// Rotation matrix for a unit quaternion.
    pub fn to_matrix(&self) -> Mat3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Mat3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Unit quaternion for a rotation matrix (Shepperd's method), w >= 0.
    pub fn from_matrix(m: &Mat3) -> Quat {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quat {
                w: 0.25 * s,
                x: (m[(2, 1)] - m[(1, 2)]) / s,
                y: (m[(0, 2)] - m[(2, 0)]) / s,
                z: (m[(1, 0)] - m[(0, 1)]) / s,
            }
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quat {
                w: (m[(2, 1)] - m[(1, 2)]) / s,
                x: 0.25 * s,
                y: (m[(0, 1)] + m[(1, 0)]) / s,
                z: (m[(0, 2)] + m[(2, 0)]) / s,
            }
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quat {
                w: (m[(0, 2)] - m[(2, 0)]) / s,
                x: (m[(0, 1)] + m[(1, 0)]) / s,
                y: 0.25 * s,
                z: (m[(1, 2)] + m[(2, 1)]) / s,
            }
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quat {
                w: (m[(1, 0)] - m[(0, 1)]) / s,
                x: (m[(0, 2)] + m[(2, 0)]) / s,
                y: (m[(1, 2)] + m[(2, 1)]) / s,
                z: 0.25 * s,
            }
        };
        let q = q.normalized();
        if q.w < 0.0 {
            Quat { w: -q.w, x: -q.x, y: -q.y, z: -q.z }
        } else {
            q
        }
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.to_matrix() * v
    }

    /// Partial derivatives of `to_matrix` w.r.t. the four components,
    /// evaluated at a unit quaternion.
    pub fn matrix_jacobian(&self) -> [Mat3; 4] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let dw = Mat3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
        let dx = Mat3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
        let dy = Mat3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
        let dz = Mat3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
        [dw, dx, dy, dz]
    }
}

/// Chain an upstream gradient w.r.t. the normalized quaternion back to the
/// raw (unnormalized) components: `J = (I - q̂ q̂ᵀ) / ‖q‖`.
pub fn backprop_normalization(raw: &Quat, grad_unit: [f64; 4]) -> [f64; 4] {
    let n = raw.norm();
    let qh = [raw.w / n, raw.x / n, raw.y / n, raw.z / n];
    let dot = qh[0] * grad_unit[0] + qh[1] * grad_unit[1] + qh[2] * grad_unit[2] + qh[3] * grad_unit[3];
    [
        (grad_unit[0] - qh[0] * dot) / n,
        (grad_unit[1] - qh[1] * dot) / n,
        (grad_unit[2] - qh[2] * dot) / n,
        (grad_unit[3] - qh[3] * dot) / n,
    ]
}

/// For `q = a * b` with `a` held fixed: maps dL/dq to dL/db.
pub fn backprop_mul_right(a: &Quat, grad_out: [f64; 4]) -> [f64; 4] {
    // q = L(a) b; dL/db = L(a)^T dL/dq.
    let (aw, ax, ay, az) = (a.w, a.x, a.y, a.z);
    let [gw, gx, gy, gz] = grad_out;
    [
        aw * gw + ax * gx + ay * gy + az * gz,
        -ax * gw + aw * gx + az * gy - ay * gz,
        -ay * gw - az * gx + aw * gy + ax * gz,
        -az * gw + ay * gx - ax * gy + aw * gz,
    ]
}

/// For `q = a * b` with `b` held fixed: maps dL/dq to dL/da.
pub fn backprop_mul_left(b: &Quat, grad_out: [f64; 4]) -> [f64; 4] {
    // q = R(b) a; dL/da = R(b)^T dL/dq.
    let (bw, bx, by, bz) = (b.w, b.x, b.y, b.z);
    let [gw, gx, gy, gz] = grad_out;
    [
        bw * gw + bx * gx + by * gy + bz * gz,
        -bx * gw + bw * gx - bz * gy + by * gz,
        -by * gw + bz * gx + bw * gy - bx * gz,
        -bz * gw - by * gx + bx * gy + bw * gz,
    ]
}

/// Local coordinate frame of a template triangle: rotation columns are
/// (edge direction, face normal, their cross product), origin is the
/// barycenter, scale is sqrt(area).
#[derive(Clone, Copy, Debug)]
pub struct TriangleFrame {
    pub rot: Mat3,
    pub origin: Vec3,
    pub scale: f64,
}

impl TriangleFrame {
    pub const IDENTITY: TriangleFrame = TriangleFrame {
        rot: Mat3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
        origin: Vec3::new(0.0, 0.0, 0.0),
        scale: 1.0,
    };

    pub fn to_world_point(&self, local: &Vec3) -> Vec3 {
        self.scale * (self.rot * local) + self.origin
    }

    pub fn to_local_point(&self, world: &Vec3) -> Vec3 {
        (self.rot.transpose() * (world - self.origin)) / self.scale
    }

    pub fn rotation_quat(&self) -> Quat {
        Quat::from_matrix(&self.rot)
    }
}

/// Local frame of the triangle (v0, v1, v2) with the stored vertex
/// ordering; the first axis follows the v0->v1 edge.
pub fn triangle_frame(v0: &Vec3, v1: &Vec3, v2: &Vec3) -> Result<TriangleFrame> {
    let e1 = v1 - v0;
    let cross = e1.cross(&(v2 - v0));
    let area = 0.5 * cross.norm();
    if !(area >= DEGENERATE_AREA) {
        return Err(Error::DegenerateTriangle { area });
    }
    let c0 = e1.normalize();
    let c1 = cross.normalize();
    let c2 = c0.cross(&c1);
    Ok(TriangleFrame {
        rot: Mat3::from_columns(&[c0, c1, c2]),
        origin: (v0 + v1 + v2) / 3.0,
        scale: area.sqrt(),
    })
}

/// Pinhole camera with a rigid world-to-camera transform.
#[derive(Clone, Debug)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rot: Mat3,
    /// World-to-camera translation.
    pub trans: Vec3,
}

/// World-space ray with unit direction.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64
            && self.width > 0
            && self.height > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::BadConfig { reason: format!("invalid camera intrinsics: {self:?}") })
        }
    }

    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rot * x + self.trans
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rot.transpose() * self.trans)
    }

    /// Projects a world point to (u, v) pixels and camera-frame depth.
    pub fn project(&self, x: &Vec3) -> Result<(f64, f64, f64)> {
        let c = self.to_camera(x);
        if c.z <= 1e-6 {
            return Err(Error::BehindCamera { depth: c.z });
        }
        Ok((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    /// World-space ray through the continuous pixel position (px, py).
    /// Pixel (i, j) is sampled at (i + 0.5, j + 0.5).
    pub fn ray(&self, px: f64, py: f64) -> Ray {
        let dir_cam = Vec3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        let dir = (self.rot.transpose() * dir_cam).normalize();
        Ray { origin: self.center(), dir }
    }

    /// Simple look-at constructor (world-space eye and target, up hint).
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right);
        // Camera axes: x right, y down, z forward.
        let rot = Mat3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let trans = -(rot * eye);
        Camera {
            fx,
            fy,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
            width,
            height,
            rot,
            trans,
        }
    }
}

/// Output length of [`posenc`] for a `dim`-vector at `levels` frequencies.
pub fn posenc_len(dim: usize, levels: usize) -> usize {
    2 * levels * dim
}

/// NeRF positional encoding: for k = 0..L-1 emit sin(2^k πp) then
/// cos(2^k πp), elementwise over `p`.
pub fn posenc_into(p: &[f64], levels: usize, out: &mut Vec<f64>) {
    for k in 0..levels {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        for &c in p {
            out.push((f * c).sin());
        }
        for &c in p {
            out.push((f * c).cos());
        }
    }
}

pub fn posenc(p: &[f64], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(posenc_len(p.len(), levels));
    posenc_into(p, levels, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_unit_quat(rng: &mut ChaCha8Rng) -> Quat {
        Quat::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        )
        .normalized()
    }

    fn rand_vec3(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
        Vec3::new(
            (rng.random::<f64>() * 2.0 - 1.0) * scale,
            (rng.random::<f64>() * 2.0 - 1.0) * scale,
            (rng.random::<f64>() * 2.0 - 1.0) * scale,
        )
    }

    #[test]
    fn axis_aligned_unit_triangle_frame() {
        let f = triangle_frame(
            &Vec3::new(0.0, 0.0, 0.0),
            &Vec3::new(1.0, 0.0, 0.0),
            &Vec3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        assert_relative_eq!(f.origin, Vec3::new(1.0 / 3.0, 1.0 / 3.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(f.rot.column(0).into_owned(), Vec3::x(), epsilon = 1e-15);
        assert_relative_eq!(f.rot.column(1).into_owned(), Vec3::z(), epsilon = 1e-15);
        assert_relative_eq!(f.rot.column(2).into_owned(), -Vec3::y(), epsilon = 1e-15);
        assert_relative_eq!(f.scale, 0.5f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn frame_is_orthonormal_and_right_handed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let v0 = rand_vec3(&mut rng, 1.0);
            let v1 = rand_vec3(&mut rng, 1.0);
            let v2 = rand_vec3(&mut rng, 1.0);
            let Ok(f) = triangle_frame(&v0, &v1, &v2) else { continue };
            let should_be_eye = f.rot * f.rot.transpose();
            assert_relative_eq!(should_be_eye, Mat3::identity(), epsilon = 1e-9);
            assert_relative_eq!(f.rot.determinant(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn frame_equivariance_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let v0 = rand_vec3(&mut rng, 0.5);
            let v1 = rand_vec3(&mut rng, 0.5);
            let v2 = rand_vec3(&mut rng, 0.5);
            let Ok(f) = triangle_frame(&v0, &v1, &v2) else { continue };
            let q = rand_unit_quat(&mut rng);
            let t = rand_vec3(&mut rng, 2.0);
            let m = q.to_matrix();
            let g = triangle_frame(&(m * v0 + t), &(m * v1 + t), &(m * v2 + t)).unwrap();
            assert_relative_eq!(g.rot, m * f.rot, epsilon = 1e-9);
            assert_relative_eq!(g.origin, m * f.origin + t, epsilon = 1e-9);
            assert_relative_eq!(g.scale, f.scale, epsilon = 1e-9);
        }
    }

    #[test]
    fn frame_roundtrips_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let v0 = rand_vec3(&mut rng, 1.0);
            let v1 = rand_vec3(&mut rng, 1.0);
            let v2 = rand_vec3(&mut rng, 1.0);
            let Ok(f) = triangle_frame(&v0, &v1, &v2) else { continue };
            for v in [&v0, &v1, &v2] {
                let back = f.to_world_point(&f.to_local_point(v));
                assert_relative_eq!(back, *v, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_triangle_rejected() {
        let r = triangle_frame(
            &Vec3::new(0.0, 0.0, 0.0),
            &Vec3::new(1.0, 0.0, 0.0),
            &Vec3::new(2.0, 0.0, 0.0),
        );
        assert!(matches!(r, Err(Error::DegenerateTriangle { .. })));
    }

    #[test]
    fn quat_matrix_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let q = rand_unit_quat(&mut rng);
            let r = Quat::from_matrix(&q.to_matrix());
            let same = (r.w - q.w).abs() < 1e-9
                && (r.x - q.x).abs() < 1e-9
                && (r.y - q.y).abs() < 1e-9
                && (r.z - q.z).abs() < 1e-9;
            let negated = (r.w + q.w).abs() < 1e-9
                && (r.x + q.x).abs() < 1e-9
                && (r.y + q.y).abs() < 1e-9
                && (r.z + q.z).abs() < 1e-9;
            assert!(same || negated, "roundtrip failed: {q:?} vs {r:?}");
        }
    }

    #[test]
    fn quat_mul_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a = rand_unit_quat(&mut rng);
            let b = rand_unit_quat(&mut rng);
            assert_relative_eq!(a.mul(&b).to_matrix(), a.to_matrix() * b.to_matrix(), epsilon = 1e-12);
        }
    }

    #[test]
    fn quat_matrix_jacobian_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        for _ in 0..50 {
            let q = rand_unit_quat(&mut rng);
            let jac = q.matrix_jacobian();
            for c in 0..4 {
                let mut qp = [q.w, q.x, q.y, q.z];
                let mut qm = qp;
                qp[c] += h;
                qm[c] -= h;
                let mp = Quat::new(qp[0], qp[1], qp[2], qp[3]).to_matrix();
                let mm = Quat::new(qm[0], qm[1], qm[2], qm[3]).to_matrix();
                let fd = (mp - mm) / (2.0 * h);
                assert_relative_eq!(jac[c], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn normalization_backprop_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = 1e-6;
        for _ in 0..50 {
            // Scalar probe: L = g . normalize(q)
            let raw = Quat::new(
                rng.random::<f64>() + 0.5,
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random::<f64>(),
            );
            let g = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let loss = |q: &Quat| {
                let u = q.normalized();
                g[0] * u.w + g[1] * u.x + g[2] * u.y + g[3] * u.z
            };
            let grad = backprop_normalization(&raw, g);
            let comps = [raw.w, raw.x, raw.y, raw.z];
            for c in 0..4 {
                let mut p = comps;
                let mut m = comps;
                p[c] += h;
                m[c] -= h;
                let fp = loss(&Quat::new(p[0], p[1], p[2], p[3]));
                let fm = loss(&Quat::new(m[0], m[1], m[2], m[3]));
                assert_relative_eq!(grad[c], (fp - fm) / (2.0 * h), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn mul_backprops_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let h = 1e-6;
        let a = rand_unit_quat(&mut rng);
        let b = rand_unit_quat(&mut rng);
        let g = [0.3, -1.2, 0.7, 0.4];
        let probe = |q: &Quat| g[0] * q.w + g[1] * q.x + g[2] * q.y + g[3] * q.z;

        let gb = backprop_mul_right(&a, g);
        let ga = backprop_mul_left(&b, g);
        let bc = [b.w, b.x, b.y, b.z];
        let ac = [a.w, a.x, a.y, a.z];
        for c in 0..4 {
            let mut p = bc;
            let mut m = bc;
            p[c] += h;
            m[c] -= h;
            let fp = probe(&a.mul(&Quat::new(p[0], p[1], p[2], p[3])));
            let fm = probe(&a.mul(&Quat::new(m[0], m[1], m[2], m[3])));
            assert_relative_eq!(gb[c], (fp - fm) / (2.0 * h), epsilon = 1e-7);

            let mut p = ac;
            let mut m = ac;
            p[c] += h;
            m[c] -= h;
            let fp = probe(&Quat::new(p[0], p[1], p[2], p[3]).mul(&b));
            let fm = probe(&Quat::new(m[0], m[1], m[2], m[3]).mul(&b));
            assert_relative_eq!(ga[c], (fp - fm) / (2.0 * h), epsilon = 1e-7);
        }
    }

    #[test]
    fn posenc_known_values() {
        assert_eq!(posenc(&[0.0], 2), vec![0.0, 1.0, 0.0, 1.0]);
        let e = posenc(&[0.5], 1);
        assert_relative_eq!(e[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(e[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn posenc_matches_scalar_reference() {
        // Independent scalar-math evaluation of the definition.
        let p = [0.3, -0.7];
        let l = 4;
        let got = posenc(&p, l);
        assert_eq!(got.len(), posenc_len(2, l));
        let mut expect = Vec::new();
        for k in 0..l {
            let f = 2f64.powi(k as i32) * std::f64::consts::PI;
            expect.push((f * 0.3).sin());
            expect.push((f * -0.7).sin());
            expect.push((f * 0.3).cos());
            expect.push((f * -0.7).cos());
        }
        for (a, b) in got.iter().zip(&expect) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
        for v in &got {
            assert!(*v >= -1.0 && *v <= 1.0);
        }
    }

    #[test]
    fn project_examples() {
        let cam = Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 100,
            height: 100,
            rot: Mat3::identity(),
            trans: Vec3::zeros(),
        };
        let (u, v, z) = cam.project(&Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(u, 50.0);
        assert_relative_eq!(v, 50.0);
        assert_relative_eq!(z, 1.0);
        let (u, _, _) = cam.project(&Vec3::new(0.1, 0.0, 1.0)).unwrap();
        assert_relative_eq!(u, 60.0);
        assert!(matches!(
            cam.project(&Vec3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn project_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let q = rand_unit_quat(&mut rng);
            let cam = Camera {
                fx: 80.0 + rng.random::<f64>() * 100.0,
                fy: 80.0 + rng.random::<f64>() * 100.0,
                cx: 32.0,
                cy: 32.0,
                width: 64,
                height: 64,
                rot: q.to_matrix(),
                trans: rand_vec3(&mut rng, 0.2),
            };
            let x = rand_vec3(&mut rng, 0.5) + Vec3::new(0.0, 0.0, 2.0);
            // Homogeneous 3x4 oracle: K [R|t] x.
            let c = cam.rot * x + cam.trans;
            if c.z <= 1e-6 {
                continue;
            }
            let k = Mat3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0);
            let hom = k * c;
            let (u, v, z) = cam.project(&x).unwrap();
            assert_relative_eq!(u, hom.x / hom.z, epsilon = 1e-9);
            assert_relative_eq!(v, hom.y / hom.z, epsilon = 1e-9);
            assert_relative_eq!(z, c.z, epsilon = 1e-12);
        }
    }

    #[test]
    fn camera_ray_passes_through_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..50 {
            let q = rand_unit_quat(&mut rng);
            let cam = Camera {
                fx: 90.0,
                fy: 95.0,
                cx: 31.5,
                cy: 32.5,
                width: 64,
                height: 64,
                rot: q.to_matrix(),
                trans: rand_vec3(&mut rng, 0.3),
            };
            let x = cam.rot.transpose() * (rand_vec3(&mut rng, 0.4) + Vec3::new(0.0, 0.0, 1.5) - cam.trans);
            let (u, v, _) = cam.project(&x).unwrap();
            let ray = cam.ray(u, v);
            // x must lie on the ray.
            let d = (x - ray.origin).normalize();
            assert_relative_eq!(d, ray.dir, epsilon = 1e-9);
        }
    }
}
