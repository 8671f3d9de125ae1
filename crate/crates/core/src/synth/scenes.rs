//! Self-contained synthetic manipulation scenes: an articulated two-link
//! template closing onto an analytic object, rendered to multi-view image
//! sequences through the forward rasterizer, with closed-form ground-truth
//! vertex contacts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geom::{triangle_frame, Camera, Mat3, Quat, Vec3};
use crate::io::{ImageGray, ImageRgb, Manifest, SceneBundle, MANIFEST_SCHEMA_VERSION};
use crate::model::{
    rgb_to_sh0, HandModel, HandSide, ObjectModel, PoseSample, SceneModel, Surfel2D,
    TemplateFrame, TemplateSequence, TemplateTopology, TriangleBinding,
};
use crate::render::{render, RasterConfig};
use crate::synth::mix_seed;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    /// Two-link gripper closing onto a sphere (curved contact).
    GripperSphere,
    /// Hinged paddle pressing onto a box (planar contact).
    PaddleBox,
}

impl SceneKind {
    pub fn name(&self) -> &'static str {
        match self {
            SceneKind::GripperSphere => "gripper-sphere",
            SceneKind::PaddleBox => "paddle-box",
        }
    }

    pub fn parse(s: &str) -> Option<SceneKind> {
        match s {
            "gripper-sphere" => Some(SceneKind::GripperSphere),
            "paddle-box" => Some(SceneKind::PaddleBox),
            _ => None,
        }
    }
}

/// Scripted time-varying vertex bulge, used to exercise the refinement
/// module: rendered geometry carries the bulge while the bundle's template
/// buffers stay clean.
#[derive(Clone, Copy, Debug)]
pub struct BulgeSpec {
    /// Peak displacement along vertex normals, meters.
    pub amplitude: f64,
    /// Spatial Gaussian falloff, meters.
    pub sigma: f64,
}

impl Default for BulgeSpec {
    fn default() -> Self {
        BulgeSpec { amplitude: 0.006, sigma: 0.015 }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub kind: SceneKind,
    pub frames: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    /// Additive Gaussian image noise sigma in [0,1] units; 0 disables.
    pub noise: f64,
    pub seed: u64,
    /// Contact threshold used for ground-truth generation, meters.
    pub tau: f64,
    /// Final gap between the template and the object surface, meters.
    /// Values above tau produce a no-contact control sequence.
    pub closing_gap: f64,
    pub bulge: Option<BulgeSpec>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            kind: SceneKind::GripperSphere,
            frames: 20,
            views: 8,
            width: 64,
            height: 64,
            noise: 0.0,
            seed: 7,
            tau: 0.004,
            closing_gap: 0.0005,
            bulge: None,
        }
    }
}

pub struct SynthOutput {
    pub bundle: SceneBundle,
    /// Per hand: ground-truth per-vertex contact labels.
    pub gt_vertex_contact: Vec<(HandSide, Vec<bool>)>,
}

// ---------------------------------------------------------------------
// Mesh building blocks
// ---------------------------------------------------------------------

/// Axis-aligned box surface mesh with per-axis segment counts.
fn box_mesh(half: Vec3, segs: (usize, usize, usize)) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    // Each face: (normal axis, sign, u axis, v axis, u segs, v segs).
    let axes = [
        (0usize, 1.0, 1usize, 2usize, segs.1, segs.2),
        (0, -1.0, 2, 1, segs.2, segs.1),
        (1, 1.0, 2, 0, segs.2, segs.0),
        (1, -1.0, 0, 2, segs.0, segs.2),
        (2, 1.0, 0, 1, segs.0, segs.1),
        (2, -1.0, 1, 0, segs.1, segs.0),
    ];
    for (axis, sign, ua, va, nu, nv) in axes {
        let base = vertices.len();
        for j in 0..=nv {
            for i in 0..=nu {
                let mut p = Vec3::zeros();
                p[axis] = sign * half[axis];
                p[ua] = (-1.0 + 2.0 * i as f64 / nu as f64) * half[ua];
                p[va] = (-1.0 + 2.0 * j as f64 / nv as f64) * half[va];
                vertices.push(p);
            }
        }
        for j in 0..nv {
            for i in 0..nu {
                let a = base + j * (nu + 1) + i;
                let b = a + 1;
                let c = a + (nu + 1);
                let d = c + 1;
                // Winding chosen per-face so normals point outward.
                faces.push([a, b, c]);
                faces.push([b, d, c]);
            }
        }
    }
    (vertices, faces)
}

/// Area-weighted vertex normals.
fn vertex_normals(vertices: &[Vec3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    let mut normals = vec![Vec3::zeros(); vertices.len()];
    for f in faces {
        let n = (vertices[f[1]] - vertices[f[0]]).cross(&(vertices[f[2]] - vertices[f[0]]));
        for &i in f {
            normals[i] += n;
        }
    }
    for n in normals.iter_mut() {
        let len = n.norm();
        if len > 1e-12 {
            *n /= len;
        }
    }
    normals
}

fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rot_x(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn smoothstep(p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    p * p * (3.0 - 2.0 * p)
}

/// Rotation whose normal column (column 1) equals `n`.
fn quat_from_normal(n: &Vec3) -> Quat {
    let a = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let tu = a.cross(n).normalize();
    let tv = tu.cross(n);
    Quat::from_matrix(&Mat3::from_columns(&[tu, *n, tv]))
}

fn texture(p: &Vec3, base: [f64; 3]) -> [f64; 3] {
    let s1 = (47.0 * p.x + 61.0 * p.y + 83.0 * p.z).sin();
    let s2 = (123.0 * p.x - 97.0 * p.y + 71.0 * p.z).sin();
    let mut c = [0.0; 3];
    for (i, b) in base.iter().enumerate() {
        let w = match i {
            0 => 0.16 * s1 + 0.06 * s2,
            1 => 0.12 * s2 - 0.05 * s1,
            _ => -0.10 * s1 + 0.08 * s2,
        };
        c[i] = (b + w).clamp(0.03, 0.97);
    }
    c
}

// ---------------------------------------------------------------------
// Scene definitions
// ---------------------------------------------------------------------

struct ArticulatedDef {
    topology: TemplateTopology,
    /// Rest-pose vertices of both links (link A first).
    rest: Vec<Vec3>,
    link_a_count: usize,
    /// Per-vertex outward normals in link-local coordinates.
    rest_normals: Vec<Vec3>,
    pivot: Vec3,
    /// Articulation parameter at the start of the sequence.
    theta_open: f64,
    object_sdf: fn(&Vec3) -> f64,
    kind: SceneKind,
}

const GRIPPER_PIVOT: Vec3 = Vec3::new(0.0, 0.085, 0.0);
const SPHERE_CENTER: Vec3 = Vec3::new(0.0, -0.008, 0.0);
const SPHERE_RADIUS: f64 = 0.03;

const PADDLE_PIVOT: Vec3 = Vec3::new(0.0, 0.07, 0.0);
const BOX_CENTER: Vec3 = Vec3::new(0.0, -0.032, 0.0);
const BOX_HALF: Vec3 = Vec3::new(0.035, 0.022, 0.035);

fn sphere_sdf(p: &Vec3) -> f64 {
    (p - SPHERE_CENTER).norm() - SPHERE_RADIUS
}

fn box_sdf(p: &Vec3) -> f64 {
    let q = Vec3::new(
        (p.x - BOX_CENTER.x).abs() - BOX_HALF.x,
        (p.y - BOX_CENTER.y).abs() - BOX_HALF.y,
        (p.z - BOX_CENTER.z).abs() - BOX_HALF.z,
    );
    let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
    outside + q.x.max(q.y).max(q.z).min(0.0)
}

fn build_def(kind: SceneKind) -> ArticulatedDef {
    match kind {
        SceneKind::GripperSphere => {
            // One finger: box 0.02 x 0.10 x 0.02 hanging from the pivot.
            let (mut verts, faces) = box_mesh(Vec3::new(0.010, 0.050, 0.010), (2, 6, 2));
            for v in verts.iter_mut() {
                v.y -= 0.053;
            }
            let normals = vertex_normals(&verts, &faces);
            let link_a_count = verts.len();
            let mut rest = verts.clone();
            rest.extend(verts.iter().copied());
            let mut rest_normals = normals.clone();
            rest_normals.extend(normals);
            let mut all_faces = faces.clone();
            all_faces
                .extend(faces.iter().map(|f| [f[0] + link_a_count, f[1] + link_a_count, f[2] + link_a_count]));
            ArticulatedDef {
                topology: TemplateTopology { vertex_count: rest.len(), faces: all_faces },
                rest,
                link_a_count,
                rest_normals,
                pivot: GRIPPER_PIVOT,
                theta_open: 40f64.to_radians(),
                object_sdf: sphere_sdf,
                kind,
            }
        }
        SceneKind::PaddleBox => {
            // Handle (link A) and a flat blade (link B) joined at the wrist.
            let (mut handle, handle_faces) = box_mesh(Vec3::new(0.008, 0.030, 0.008), (2, 4, 2));
            for v in handle.iter_mut() {
                v.y -= 0.031;
            }
            let (mut blade, blade_faces) = box_mesh(Vec3::new(0.030, 0.004, 0.030), (5, 1, 5));
            for v in blade.iter_mut() {
                v.y -= 0.066;
            }
            let ha_normals = vertex_normals(&handle, &handle_faces);
            let bl_normals = vertex_normals(&blade, &blade_faces);
            let link_a_count = handle.len();
            let mut rest = handle;
            rest.extend(blade);
            let mut rest_normals = ha_normals;
            rest_normals.extend(bl_normals);
            let mut faces = handle_faces;
            faces.extend(
                blade_faces.iter().map(|f| [f[0] + link_a_count, f[1] + link_a_count, f[2] + link_a_count]),
            );
            ArticulatedDef {
                topology: TemplateTopology { vertex_count: rest.len(), faces },
                rest,
                link_a_count,
                rest_normals,
                pivot: PADDLE_PIVOT,
                theta_open: 0.0,
                object_sdf: box_sdf,
                kind,
            }
        }
    }
}

impl ArticulatedDef {
    /// Vertex positions for articulation parameter `theta` with optional
    /// bulge displacement (applied in link-local coordinates, pulse in
    /// [0,1]).
    fn pose_vertices(&self, theta: f64, bulge: Option<(&BulgeSpec, f64)>) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.rest.len());
        match self.kind {
            SceneKind::GripperSphere => {
                let ra = rot_z(theta);
                let rb = rot_z(-theta);
                for (i, v) in self.rest.iter().enumerate() {
                    let mut local = *v;
                    if let Some((b, pulse)) = bulge {
                        // Bulge on the inner tip face of link A.
                        if i < self.link_a_count {
                            let c = Vec3::new(-0.010, -0.098, 0.0);
                            let w = (-(local - c).norm_squared() / (2.0 * b.sigma * b.sigma)).exp();
                            local += self.rest_normals[i] * (b.amplitude * w * pulse);
                        }
                    }
                    let world = if i < self.link_a_count { ra * local } else { rb * local };
                    out.push(self.pivot + world);
                }
            }
            SceneKind::PaddleBox => {
                // theta is the vertical press depth; the blade also tilts.
                let tilt = rot_x(6f64.to_radians() * (theta / 0.05).min(1.0));
                let drop = Vec3::new(0.0, -theta, 0.0);
                for (i, v) in self.rest.iter().enumerate() {
                    let mut local = *v;
                    if let Some((b, pulse)) = bulge {
                        if i >= self.link_a_count {
                            let c = Vec3::new(0.0, -0.066, 0.0);
                            let w = (-(local - c).norm_squared() / (2.0 * b.sigma * b.sigma)).exp();
                            local += self.rest_normals[i] * (b.amplitude * w * pulse);
                        }
                    }
                    let world = if i < self.link_a_count {
                        local
                    } else {
                        // Tilt the blade about the wrist joint.
                        let joint = Vec3::new(0.0, -0.062, 0.0);
                        tilt * (local - joint) + joint
                    };
                    out.push(self.pivot + world + drop);
                }
            }
        }
        out
    }

    /// Smallest vertex-to-object-surface distance at articulation `theta`.
    fn min_surface_distance(&self, theta: f64) -> f64 {
        self.pose_vertices(theta, None)
            .iter()
            .map(|v| (self.object_sdf)(v).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Articulation value that brings the template within `gap` of the
    /// object surface. Bisection from the open pose toward the deepest
    /// pose; the approach is monotone until first touch by design.
    /// The gripper closes by DECREASING the hinge angle (the fingertips
    /// converge toward the sphere sides).
    fn solve_closed(&self, gap: f64) -> f64 {
        let (mut lo, mut hi) = match self.kind {
            SceneKind::GripperSphere => (self.theta_open, 8f64.to_radians()),
            SceneKind::PaddleBox => (0.0, 0.08),
        };
        if self.min_surface_distance(hi) > gap {
            return hi;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.min_surface_distance(mid) > gap {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }

    fn schedule(&self, spec: &SynthSpec, t: usize) -> f64 {
        let closed = self.solve_closed(spec.closing_gap);
        let p = if spec.frames <= 1 {
            1.0
        } else {
            (t as f64 / (0.7 * (spec.frames - 1) as f64)).min(1.0)
        };
        self.theta_open + (closed - self.theta_open) * smoothstep(p)
    }

    fn bulge_pulse(&self, spec: &SynthSpec, t: usize) -> f64 {
        if spec.frames <= 1 {
            1.0
        } else {
            let x = t as f64 / (spec.frames - 1) as f64;
            (std::f64::consts::PI * x).sin().powi(2)
        }
    }
}

// ---------------------------------------------------------------------
// Ground-truth surfel coverings
// ---------------------------------------------------------------------

/// Dense flat surfels covering every template triangle, colored by a
/// procedural texture of the rest-pose position.
fn cover_template(
    def: &ArticulatedDef,
    topology: &TemplateTopology,
    rest: &[Vec3],
    spacing: f64,
) -> (Vec<Surfel2D>, Vec<TriangleBinding>) {
    let mut surfels = Vec::new();
    let mut bindings = Vec::new();
    for (tri, f) in topology.faces.iter().enumerate() {
        let (v0, v1, v2) = (rest[f[0]], rest[f[1]], rest[f[2]]);
        let Ok(frame) = triangle_frame(&v0, &v1, &v2) else { continue };
        let area = frame.scale * frame.scale;
        let n = ((area / (spacing * spacing)).ceil() as usize).clamp(1, 64);
        // Regular-ish barycentric pattern, deterministic.
        let r = (n as f64).sqrt().ceil() as usize;
        let mut placed = 0;
        'outer: for i in 0..r {
            for j in 0..r {
                if placed >= n {
                    break 'outer;
                }
                let mut a = (i as f64 + 0.5) / r as f64;
                let mut b = (j as f64 + 0.5) / r as f64;
                if a + b > 1.0 {
                    a = 1.0 - a;
                    b = 1.0 - b;
                }
                let world = v0 + a * (v1 - v0) + b * (v2 - v0);
                let local = frame.to_local_point(&world);
                let base = if tri < topology.faces.len() / 2 {
                    match def.kind {
                        SceneKind::GripperSphere => [0.78, 0.32, 0.26],
                        SceneKind::PaddleBox => [0.72, 0.5, 0.25],
                    }
                } else {
                    match def.kind {
                        SceneKind::GripperSphere => [0.28, 0.42, 0.80],
                        SceneKind::PaddleBox => [0.30, 0.62, 0.45],
                    }
                };
                let color = texture(&world, base);
                let local_scale = spacing * 0.9 / frame.scale;
                surfels.push(Surfel2D {
                    pos: local,
                    rot: Quat::IDENTITY,
                    log_scales: [local_scale.ln(); 2],
                    opacity_logit: crate::model::logit(0.97),
                    sh: vec![rgb_to_sh0(color)],
                });
                bindings.push(TriangleBinding { triangle_id: tri, owner: HandSide::Left });
                placed += 1;
            }
        }
    }
    (surfels, bindings)
}

/// Fibonacci sampling of the analytic object surface.
fn cover_object(kind: SceneKind, spacing: f64) -> Vec<Surfel2D> {
    let mut out = Vec::new();
    match kind {
        SceneKind::GripperSphere => {
            let area = 4.0 * std::f64::consts::PI * SPHERE_RADIUS * SPHERE_RADIUS;
            let n = (area / (spacing * spacing)).ceil() as usize;
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            for i in 0..n {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let phi = golden * i as f64;
                let dir = Vec3::new(r * phi.cos(), y, r * phi.sin());
                let pos = SPHERE_CENTER + SPHERE_RADIUS * dir;
                out.push(Surfel2D {
                    pos,
                    rot: quat_from_normal(&dir),
                    log_scales: [(spacing * 0.9).ln(); 2],
                    opacity_logit: crate::model::logit(0.97),
                    sh: vec![rgb_to_sh0(texture(&pos, [0.85, 0.72, 0.30]))],
                });
            }
        }
        SceneKind::PaddleBox => {
            let (verts, faces) = box_mesh(BOX_HALF, (1, 1, 1));
            // Per-face uniform grids at the requested spacing.
            for f in faces.iter() {
                let (v0, v1, v2) = (verts[f[0]], verts[f[1]], verts[f[2]]);
                let Ok(frame) = triangle_frame(&v0, &v1, &v2) else { continue };
                let area = frame.scale * frame.scale;
                let n = (area / (spacing * spacing)).ceil() as usize;
                let r = (n as f64).sqrt().ceil() as usize;
                for i in 0..r {
                    for j in 0..r {
                        let mut a = (i as f64 + 0.5) / r as f64;
                        let mut b = (j as f64 + 0.5) / r as f64;
                        if a + b > 1.0 {
                            a = 1.0 - a;
                            b = 1.0 - b;
                        }
                        let p = v0 + a * (v1 - v0) + b * (v2 - v0) + BOX_CENTER;
                        let nrm: Vec3 = frame.rot.column(1).into();
                        out.push(Surfel2D {
                            pos: p,
                            rot: quat_from_normal(&nrm),
                            log_scales: [(spacing * 0.9).ln(); 2],
                            opacity_logit: crate::model::logit(0.97),
                            sh: vec![rgb_to_sh0(texture(&p, [0.82, 0.75, 0.35]))],
                        });
                    }
                }
            }
        }
    }
    out
}

fn camera_ring(spec: &SynthSpec) -> Vec<Camera> {
    let target = Vec3::new(0.0, 0.025, 0.0);
    let radius = 0.34;
    let f = 1.75 * spec.width as f64;
    (0..spec.views)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * i as f64 / spec.views as f64;
            let el = if i % 2 == 0 { 18f64.to_radians() } else { 34f64.to_radians() };
            let eye = target
                + Vec3::new(radius * el.cos() * az.cos(), radius * el.sin(), radius * el.cos() * az.sin());
            Camera::look_at(eye, target, Vec3::y(), f, f, spec.width, spec.height)
        })
        .collect()
}

// ---------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------

/// Builds the full synthetic bundle plus analytic ground-truth contacts.
/// Deterministic given the spec: the same seed produces byte-identical
/// on-disk bundles.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    assert!(spec.frames >= 1 && spec.views >= 2 && spec.tau > 0.0);
    let def = build_def(spec.kind);

    // Template sequences: clean buffers go into the bundle; ground-truth
    // rendering (and contact) uses the bulged variant.
    let mut clean_frames = Vec::with_capacity(spec.frames);
    let mut gt_frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let theta = def.schedule(spec, t);
        clean_frames.push(TemplateFrame { t, vertices: def.pose_vertices(theta, None), provenance: None });
        let bulged = match &spec.bulge {
            Some(b) => def.pose_vertices(theta, Some((b, def.bulge_pulse(spec, t)))),
            None => clean_frames[t].vertices.clone(),
        };
        gt_frames.push(TemplateFrame { t, vertices: bulged, provenance: None });
    }
    let clean_template = TemplateSequence { topology: def.topology.clone(), frames: clean_frames };
    let gt_template = TemplateSequence { topology: def.topology.clone(), frames: gt_frames };
    clean_template.validate()?;

    // Ground-truth scene used only to render images.
    let px_world = 0.34 / (1.75 * spec.width as f64);
    let spacing = (px_world * 0.8).clamp(0.0015, 0.004);
    let (gt_surfels, gt_bindings) = cover_template(&def, &def.topology, &def.rest, spacing);
    let gt_object = cover_object(spec.kind, spacing);
    let gt_scene = SceneModel {
        hands: vec![HandModel {
            side: HandSide::Left,
            template: gt_template.clone(),
            surfels: gt_surfels,
            bindings: gt_bindings,
        }],
        objects: vec![ObjectModel {
            surfels: gt_object.clone(),
            pose_track: vec![PoseSample::IDENTITY; spec.frames],
        }],
        net: None,
        sh_degree: 0,
        frame_count: spec.frames,
    };

    let cameras = camera_ring(spec);
    let background = [0.0, 0.0, 0.0];
    let cfg = RasterConfig::default();

    // Render every (view, frame); masks are alpha > 0.5.
    let mut images: Vec<Vec<ImageRgb>> = vec![Vec::with_capacity(spec.frames); spec.views];
    let mut masks: Vec<Vec<ImageGray>> = vec![Vec::with_capacity(spec.frames); spec.views];
    use rayon::prelude::*;
    let rendered: Vec<(usize, usize, ImageRgb, ImageGray)> = (0..spec.views * spec.frames)
        .into_par_iter()
        .map(|k| {
            let v = k / spec.frames;
            let t = k % spec.frames;
            let composed = gt_scene.compose(t).expect("gt scene composes");
            let out = render(&composed.surfels, &cameras[v], background, &cfg, 0);
            let mut img = ImageRgb::from_flat(spec.width, spec.height, out.color);
            if spec.noise > 0.0 {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 1000 + (v * spec.frames + t) as u64));
                for px in img.data.iter_mut() {
                    for c in px.iter_mut() {
                        let (u1, u2) = (rng.random::<f64>().max(1e-12), rng.random::<f64>());
                        let z = (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos();
                        *c = (*c + spec.noise * z).clamp(0.0, 1.0);
                    }
                }
            }
            let mask = ImageGray {
                width: spec.width,
                height: spec.height,
                data: out.alpha.iter().map(|&a| if a > 0.5 { 1.0 } else { 0.0 }).collect(),
            };
            (v, t, img, mask)
        })
        .collect();
    for view in images.iter_mut() {
        view.resize(spec.frames, ImageRgb::new(0, 0));
    }
    for view in masks.iter_mut() {
        view.resize(spec.frames, ImageGray::new(0, 0));
    }
    for (v, t, img, mask) in rendered {
        images[v][t] = img;
        masks[v][t] = mask;
    }

    // Object seed cloud: subsampled ground-truth covering, with colors.
    let seed_points: Vec<(Vec3, Option<[f64; 3]>)> = gt_object
        .iter()
        .step_by(4)
        .map(|s| {
            let c = crate::render::eval_color(&[crate::model::SH_C0], &s.sh);
            (s.pos, Some(c))
        })
        .collect();

    // Ground-truth vertex contact: closest approach of the rendered
    // (bulged) template to the analytic object surface, any frame.
    let nv = def.topology.vertex_count;
    let mut gt_labels = vec![false; nv];
    for frame in &gt_template.frames {
        for (i, v) in frame.vertices.iter().enumerate() {
            if (def.object_sdf)(v).abs() < spec.tau {
                gt_labels[i] = true;
            }
        }
    }

    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        views: spec.views,
        frames: spec.frames,
        width: spec.width,
        height: spec.height,
        hands: vec!["left".into()],
        objects: 1,
        tau: spec.tau,
        units: "meters".into(),
        fps: 30.0,
        background,
    };

    Ok(SynthOutput {
        bundle: SceneBundle {
            manifest,
            cameras,
            images,
            masks,
            templates: vec![(HandSide::Left, clean_template)],
            object_seed: seed_points,
        },
        gt_vertex_contact: vec![(HandSide::Left, gt_labels)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::save_bundle;

    fn small_spec() -> SynthSpec {
        SynthSpec { frames: 4, views: 2, width: 32, height: 32, ..Default::default() }
    }

    #[test]
    fn no_contact_control() {
        let spec = SynthSpec { closing_gap: 0.02, ..small_spec() };
        let out = generate(&spec).unwrap();
        assert!(out.gt_vertex_contact[0].1.iter().all(|&c| !c));
    }

    #[test]
    fn closing_gripper_contacts() {
        let out = generate(&small_spec()).unwrap();
        let labels = &out.gt_vertex_contact[0].1;
        let n_contact = labels.iter().filter(|&&c| c).count();
        assert!(n_contact > 0, "closed gripper must touch the sphere");
        // Both links should make contact (sphere gripped from both sides).
        let def = build_def(SceneKind::GripperSphere);
        let a = labels[..def.link_a_count].iter().filter(|&&c| c).count();
        let b = labels[def.link_a_count..].iter().filter(|&&c| c).count();
        assert!(a > 0 && b > 0);
    }

    #[test]
    fn paddle_box_contacts() {
        let spec = SynthSpec { kind: SceneKind::PaddleBox, ..small_spec() };
        let out = generate(&spec).unwrap();
        assert!(out.gt_vertex_contact[0].1.iter().any(|&c| c));
    }

    #[test]
    fn fingertip_within_half_tau_is_contacted() {
        let spec = SynthSpec { closing_gap: 0.002, tau: 0.004, ..small_spec() };
        let out = generate(&spec).unwrap();
        // The vertex that achieves the closing gap must be labeled.
        let def = build_def(SceneKind::GripperSphere);
        let theta = def.schedule(&spec, spec.frames - 1);
        let verts = def.pose_vertices(theta, None);
        let (best, _) = verts
            .iter()
            .enumerate()
            .map(|(i, v)| (i, (def.object_sdf)(v).abs()))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        assert!(out.gt_vertex_contact[0].1[best]);
    }

    #[test]
    fn masks_cover_foreground() {
        let out = generate(&small_spec()).unwrap();
        let covered: f64 = out.bundle.masks[0][0].data.iter().sum();
        let total = out.bundle.masks[0][0].data.len() as f64;
        assert!(covered > 0.02 * total, "mask nearly empty: {covered}");
        assert!(covered < 0.9 * total, "mask nearly full: {covered}");
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let spec = SynthSpec { noise: 0.01, ..small_spec() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        save_bundle(da.path(), &a.bundle).unwrap();
        save_bundle(db.path(), &b.bundle).unwrap();
        for entry in walk(da.path()) {
            let rel = entry.strip_prefix(da.path()).unwrap();
            let other = db.path().join(rel);
            assert_eq!(
                std::fs::read(&entry).unwrap(),
                std::fs::read(&other).unwrap(),
                "file differs: {rel:?}"
            );
        }
    }

    fn walk(root: &std::path::Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            let mut entries: Vec<_> =
                std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
            entries.sort();
            for e in entries {
                if e.is_dir() {
                    stack.push(e);
                } else {
                    out.push(e);
                }
            }
        }
        out
    }

    #[test]
    fn bundle_roundtrips_through_disk() {
        let out = generate(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &out.bundle).unwrap();
        let loaded = crate::io::load_bundle(dir.path()).unwrap();
        assert_eq!(loaded.views(), 2);
        assert_eq!(loaded.frames(), 4);
        assert_eq!(loaded.templates[0].1.topology, out.bundle.templates[0].1.topology);
        // Second save is byte-stable.
        let dir2 = tempfile::tempdir().unwrap();
        save_bundle(dir2.path(), &loaded).unwrap();
        for entry in walk(dir.path()) {
            let rel = entry.strip_prefix(dir.path()).unwrap();
            assert_eq!(
                std::fs::read(&entry).unwrap(),
                std::fs::read(dir2.path().join(rel)).unwrap(),
                "file differs after roundtrip: {rel:?}"
            );
        }
    }
}
