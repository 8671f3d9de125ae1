//! Scene representation: hand surfels rigged to template triangles, the
//! time-conditioned refinement network, rigid objects with per-frame pose
//! tracks, and frame-wise scene composition.

mod refine;

use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geom::{
    backprop_mul_left, backprop_mul_right, backprop_normalization, triangle_frame, Quat,
    TriangleFrame, Vec3,
};
use crate::{Error, Result};

pub use refine::{NetConfig, RefineCacheEntry, RefinementNet};

/// SH band-0 basis constant, 1 / (2 sqrt(pi)).
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Number of SH coefficients per channel for a given degree.
pub fn sh_basis_len(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// One 2D Gaussian surfel.
///
/// The rotation's columns are (t_u, n, t_v): tangential axis u, the surfel
/// normal, tangential axis v. Putting the normal in column 1 mirrors the
/// triangle-frame layout (edge, face normal, cross), so a surfel with
/// identity local rotation lies flat in its parent triangle's plane.
/// Scales apply along t_u and t_v and are stored as logs; opacity is stored
/// as a logit. Color is a set of SH coefficients, `sh[basis][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Surfel2D {
    pub pos: Vec3,
    pub rot: Quat,
    pub log_scales: [f64; 2],
    pub opacity_logit: f64,
    pub sh: Vec<[f64; 3]>,
}

impl Surfel2D {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> [f64; 2] {
        [self.log_scales[0].exp(), self.log_scales[1].exp()]
    }

    /// Constant-color surfel (SH degree 0).
    pub fn flat(pos: Vec3, rot: Quat, scales: [f64; 2], opacity: f64, rgb: [f64; 3]) -> Surfel2D {
        Surfel2D {
            pos,
            rot,
            log_scales: [scales[0].ln(), scales[1].ln()],
            opacity_logit: logit(opacity),
            sh: vec![rgb_to_sh0(rgb)],
        }
    }
}

/// Degree-0 coefficients reproducing an RGB color exactly.
pub fn rgb_to_sh0(rgb: [f64; 3]) -> [f64; 3] {
    [
        (rgb[0] - 0.5) / SH_C0,
        (rgb[1] - 0.5) / SH_C0,
        (rgb[2] - 0.5) / SH_C0,
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HandSide {
    Left,
    Right,
}

impl HandSide {
    pub fn name(&self) -> &'static str {
        match self {
            HandSide::Left => "left",
            HandSide::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<HandSide> {
        match s {
            "left" => Some(HandSide::Left),
            "right" => Some(HandSide::Right),
            _ => None,
        }
    }
}

/// Rigs one hand surfel to its parent template triangle. Bindings survive
/// densification: children inherit the parent's triangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TriangleBinding {
    pub triangle_id: usize,
    pub owner: HandSide,
}

/// Fixed triangle topology shared by all frames of one template.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateTopology {
    pub vertex_count: usize,
    pub faces: Vec<[usize; 3]>,
}

impl TemplateTopology {
    pub fn validate(&self) -> Result<()> {
        for (f, face) in self.faces.iter().enumerate() {
            for &i in face {
                if i >= self.vertex_count {
                    return Err(Error::TopologyOutOfRange {
                        face: f,
                        index: i,
                        vertex_count: self.vertex_count,
                    });
                }
            }
        }
        Ok(())
    }

    /// For each vertex, the list of incident face indices.
    pub fn vertex_faces(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.vertex_count];
        for (f, face) in self.faces.iter().enumerate() {
            for &i in face {
                out[i].push(f);
            }
        }
        out
    }
}

/// Template vertex positions at one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateFrame {
    pub t: usize,
    pub vertices: Vec<Vec3>,
    /// Opaque provenance record (e.g. source pose parameters), never
    /// interpreted by the pipeline.
    pub provenance: Option<String>,
}

/// Fixed-topology mesh with per-frame vertex buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSequence {
    pub topology: TemplateTopology,
    pub frames: Vec<TemplateFrame>,
}

impl TemplateSequence {
    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        if self.frames.is_empty() {
            return Err(Error::EmptySequence);
        }
        for frame in &self.frames {
            if frame.vertices.len() != self.topology.vertex_count {
                return Err(Error::ShapeMismatch {
                    group: format!("template frame {}", frame.t),
                    a: frame.vertices.len(),
                    b: self.topology.vertex_count,
                });
            }
            for v in &frame.vertices {
                if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
                    return Err(Error::NonFinite { context: format!("template frame {}", frame.t) });
                }
            }
        }
        Ok(())
    }

    /// Local frame of every triangle at frame `t`; `None` for degenerate
    /// triangles.
    pub fn triangle_frames(&self, t: usize) -> Result<Vec<Option<TriangleFrame>>> {
        let frame = self
            .frames
            .get(t)
            .ok_or(Error::FrameOutOfRange { frame: t, len: self.frames.len() })?;
        Ok(self
            .topology
            .faces
            .iter()
            .map(|f| {
                triangle_frame(&frame.vertices[f[0]], &frame.vertices[f[1]], &frame.vertices[f[2]])
                    .ok()
            })
            .collect())
    }
}

/// One hand: template sequence plus local surfels bound to its triangles.
#[derive(Clone, Debug)]
pub struct HandModel {
    pub side: HandSide,
    pub template: TemplateSequence,
    pub surfels: Vec<Surfel2D>,
    pub bindings: Vec<TriangleBinding>,
}

/// Rigid pose sample (rotation stored raw, normalized at use).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSample {
    pub q: Quat,
    pub t: Vec3,
}

impl PoseSample {
    pub const IDENTITY: PoseSample =
        PoseSample { q: Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }, t: Vec3::new(0.0, 0.0, 0.0) };
}

/// Rigid object: canonical-frame surfels plus a per-frame pose track.
#[derive(Clone, Debug)]
pub struct ObjectModel {
    pub surfels: Vec<Surfel2D>,
    pub pose_track: Vec<PoseSample>,
}

/// Parameters for hand surfel initialization.
#[derive(Clone, Debug)]
pub struct HandInitParams {
    /// Surfels per triangle (k).
    pub per_triangle: usize,
    /// Variance of the local-coordinate position distribution (v).
    pub variance: f64,
    /// Initial gray level, typically the mean intensity inside the masks.
    pub base_gray: f64,
    pub sh_degree: usize,
    /// Initial log-scale in triangle-local units.
    pub initial_log_scale: f64,
    /// Initial opacity in (0, 1).
    pub initial_opacity: f64,
}

impl Default for HandInitParams {
    fn default() -> Self {
        HandInitParams {
            per_triangle: 5,
            variance: 0.5,
            base_gray: 0.5,
            sh_degree: 0,
            initial_log_scale: 0.5f64.ln(),
            initial_opacity: 0.1,
        }
    }
}

pub struct HandInit {
    pub surfels: Vec<Surfel2D>,
    pub bindings: Vec<TriangleBinding>,
    pub skipped_triangles: usize,
}

/// Samples `k` surfels per non-degenerate triangle with local positions
/// drawn from N(0, v I), identity local rotation, and uniform initial
/// scale/opacity/color. Degenerate triangles receive no surfels; their
/// count is reported.
pub fn init_hand_surfels(
    topology: &TemplateTopology,
    frame: &TemplateFrame,
    side: HandSide,
    params: &HandInitParams,
    rng: &mut ChaCha8Rng,
) -> HandInit {
    assert!(params.per_triangle >= 1 && params.variance > 0.0);
    let normal = Normal::new(0.0, params.variance.sqrt()).expect("valid std");
    let basis = sh_basis_len(params.sh_degree);
    let mut sh = vec![[0.0; 3]; basis];
    sh[0] = rgb_to_sh0([params.base_gray; 3]);

    let mut surfels = Vec::with_capacity(topology.faces.len() * params.per_triangle);
    let mut bindings = Vec::with_capacity(surfels.capacity());
    let mut skipped = 0usize;
    for (tri, face) in topology.faces.iter().enumerate() {
        let ok = triangle_frame(
            &frame.vertices[face[0]],
            &frame.vertices[face[1]],
            &frame.vertices[face[2]],
        )
        .is_ok();
        if !ok {
            skipped += 1;
            continue;
        }
        for _ in 0..params.per_triangle {
            let pos = Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
            surfels.push(Surfel2D {
                pos,
                rot: Quat::IDENTITY,
                log_scales: [params.initial_log_scale; 2],
                opacity_logit: logit(params.initial_opacity),
                sh: sh.clone(),
            });
            bindings.push(TriangleBinding { triangle_id: tri, owner: side });
        }
    }
    HandInit { surfels, bindings, skipped_triangles: skipped }
}

/// Maps a local hand surfel into world space through its triangle frame:
/// rotation composes with the frame rotation, position is scaled-rotated-
/// translated, and log-scales shift by log(frame scale).
pub fn rig_to_world(local: &Surfel2D, frame: &TriangleFrame) -> Surfel2D {
    rig_to_world_with_quat(local, frame, &frame.rotation_quat())
}

pub fn rig_to_world_with_quat(
    local: &Surfel2D,
    frame: &TriangleFrame,
    frame_quat: &Quat,
) -> Surfel2D {
    let ls = frame.scale.ln();
    Surfel2D {
        pos: frame.to_world_point(&local.pos),
        rot: frame_quat.mul(&local.rot),
        log_scales: [local.log_scales[0] + ls, local.log_scales[1] + ls],
        opacity_logit: local.opacity_logit,
        sh: local.sh.clone(),
    }
}

/// Gradient of a scalar loss w.r.t. one surfel's attributes.
#[derive(Clone, Debug)]
pub struct SurfelGrad {
    pub pos: Vec3,
    pub rot: [f64; 4],
    pub log_scales: [f64; 2],
    pub opacity_logit: f64,
    pub sh: Vec<[f64; 3]>,
}

impl SurfelGrad {
    pub fn zeros(basis: usize) -> SurfelGrad {
        SurfelGrad {
            pos: Vec3::zeros(),
            rot: [0.0; 4],
            log_scales: [0.0; 2],
            opacity_logit: 0.0,
            sh: vec![[0.0; 3]; basis],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pos.iter().all(|v| v.is_finite())
            && self.rot.iter().all(|v| v.is_finite())
            && self.log_scales.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.sh.iter().flatten().all(|v| v.is_finite())
    }
}

/// Pulls a world-attribute gradient back through [`rig_to_world`].
pub fn rig_backward(world: &SurfelGrad, frame: &TriangleFrame, frame_quat: &Quat) -> SurfelGrad {
    SurfelGrad {
        pos: frame.scale * (frame.rot.transpose() * world.pos),
        rot: backprop_mul_right(frame_quat, world.rot),
        log_scales: world.log_scales,
        opacity_logit: world.opacity_logit,
        sh: world.sh.clone(),
    }
}

/// Poses an object's canonical surfels into world space at frame `t`.
pub fn object_to_world(obj: &ObjectModel, t: usize) -> Result<Vec<Surfel2D>> {
    let pose = obj
        .pose_track
        .get(t)
        .ok_or(Error::FrameOutOfRange { frame: t, len: obj.pose_track.len() })?;
    let q = pose.q.normalized();
    let r = q.to_matrix();
    Ok(obj
        .surfels
        .iter()
        .map(|s| Surfel2D {
            pos: r * s.pos + pose.t,
            rot: q.mul(&s.rot),
            log_scales: s.log_scales,
            opacity_logit: s.opacity_logit,
            sh: s.sh.clone(),
        })
        .collect())
}

/// Tag identifying which source set a composed surfel came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurfelTag {
    HandLeft,
    HandRight,
    Object(usize),
}

impl SurfelTag {
    pub fn is_hand(&self) -> bool {
        matches!(self, SurfelTag::HandLeft | SurfelTag::HandRight)
    }

    pub fn label(&self) -> String {
        match self {
            SurfelTag::HandLeft => "hand-left".to_owned(),
            SurfelTag::HandRight => "hand-right".to_owned(),
            SurfelTag::Object(k) => format!("object-{k}"),
        }
    }
}

/// Index of a composed surfel back into its owning model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurfelSource {
    Hand { hand: usize, surfel: usize },
    Object { object: usize, surfel: usize },
}

/// The full optimizable scene.
#[derive(Clone, Debug)]
pub struct SceneModel {
    pub hands: Vec<HandModel>,
    pub objects: Vec<ObjectModel>,
    pub net: Option<RefinementNet>,
    pub sh_degree: usize,
    pub frame_count: usize,
}

/// A frame-wise composition: every surfel in world space, tagged with its
/// source, plus the caches the backward pass needs.
pub struct ComposedScene {
    pub frame: usize,
    pub t_norm: f64,
    pub surfels: Vec<Surfel2D>,
    pub tags: Vec<SurfelTag>,
    pub sources: Vec<SurfelSource>,
    pub hand_ranges: Vec<Range<usize>>,
    pub object_ranges: Vec<Range<usize>>,
    hand_frames: Vec<Vec<Option<(TriangleFrame, Quat)>>>,
    refine_cache: Vec<Option<RefineCacheEntry>>,
}

impl ComposedScene {
    /// Indices of all hand surfels.
    pub fn hand_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.hand_ranges.iter().flat_map(|r| r.clone())
    }

    /// Indices of all object surfels.
    pub fn object_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.object_ranges.iter().flat_map(|r| r.clone())
    }
}

/// Per-model gradients mirroring [`SceneModel`]'s parameters.
#[derive(Clone, Debug)]
pub struct SceneGrads {
    pub hands: Vec<Vec<SurfelGrad>>,
    pub objects: Vec<ObjectGrads>,
    pub net: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ObjectGrads {
    pub surfels: Vec<SurfelGrad>,
    pub pose_q: Vec<[f64; 4]>,
    pub pose_t: Vec<Vec3>,
}

impl SceneGrads {
    pub fn zeros(scene: &SceneModel) -> SceneGrads {
        let basis = sh_basis_len(scene.sh_degree);
        SceneGrads {
            hands: scene
                .hands
                .iter()
                .map(|h| vec![SurfelGrad::zeros(basis); h.surfels.len()])
                .collect(),
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectGrads {
                    surfels: vec![SurfelGrad::zeros(basis); o.surfels.len()],
                    pose_q: vec![[0.0; 4]; o.pose_track.len()],
                    pose_t: vec![Vec3::zeros(); o.pose_track.len()],
                })
                .collect(),
            net: scene.net.as_ref().map(|n| vec![0.0; n.weights.len()]).unwrap_or_default(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.hands.iter().flatten().all(|g| g.is_finite())
            && self.objects.iter().all(|o| {
                o.surfels.iter().all(|g| g.is_finite())
                    && o.pose_q.iter().flatten().all(|v| v.is_finite())
                    && o.pose_t.iter().all(|v| v.iter().all(|c| c.is_finite()))
            })
            && self.net.iter().all(|v| v.is_finite())
    }
}

impl SceneModel {
    pub fn normalized_time(&self, frame: usize) -> f64 {
        if self.frame_count <= 1 {
            0.0
        } else {
            frame as f64 / (self.frame_count - 1) as f64
        }
    }

    pub fn total_surfels(&self) -> usize {
        self.hands.iter().map(|h| h.surfels.len()).sum::<usize>()
            + self.objects.iter().map(|o| o.surfels.len()).sum::<usize>()
    }

    /// Composes the world-space scene at frame `t`: rigged (and refined)
    /// hand surfels followed by posed object surfels, each tagged with its
    /// origin. Concatenation order is stable.
    pub fn compose(&self, t: usize) -> Result<ComposedScene> {
        let t_norm = self.normalized_time(t);
        let mut surfels = Vec::with_capacity(self.total_surfels());
        let mut tags = Vec::with_capacity(surfels.capacity());
        let mut sources = Vec::with_capacity(surfels.capacity());
        let mut hand_ranges = Vec::with_capacity(self.hands.len());
        let mut object_ranges = Vec::with_capacity(self.objects.len());
        let mut hand_frames = Vec::with_capacity(self.hands.len());
        let mut refine_cache = Vec::new();

        for (hi, hand) in self.hands.iter().enumerate() {
            let start = surfels.len();
            let frames: Vec<Option<(TriangleFrame, Quat)>> = hand
                .template
                .triangle_frames(t)?
                .into_iter()
                .map(|f| f.map(|fr| (fr, fr.rotation_quat())))
                .collect();
            let tag = match hand.side {
                HandSide::Left => SurfelTag::HandLeft,
                HandSide::Right => SurfelTag::HandRight,
            };
            for (si, (local, binding)) in hand.surfels.iter().zip(&hand.bindings).enumerate() {
                let (frame, fq) = frames
                    .get(binding.triangle_id)
                    .and_then(|f| f.as_ref())
                    .ok_or(Error::DegenerateTriangle { area: 0.0 })?;
                let mut world = rig_to_world_with_quat(local, frame, fq);
                if let Some(net) = &self.net {
                    let (offsets, cache) = net.offsets_cached(&world, t_norm);
                    world.pos += offsets.pos;
                    world.rot = Quat::new(
                        world.rot.w + offsets.rot[0],
                        world.rot.x + offsets.rot[1],
                        world.rot.y + offsets.rot[2],
                        world.rot.z + offsets.rot[3],
                    );
                    world.log_scales[0] += offsets.log_scales[0];
                    world.log_scales[1] += offsets.log_scales[1];
                    refine_cache.push(Some(cache));
                } else {
                    refine_cache.push(None);
                }
                surfels.push(world);
                tags.push(tag);
                sources.push(SurfelSource::Hand { hand: hi, surfel: si });
            }
            hand_ranges.push(start..surfels.len());
            hand_frames.push(frames);
        }

        for (oi, obj) in self.objects.iter().enumerate() {
            let start = surfels.len();
            let world = object_to_world(obj, t)?;
            for (si, s) in world.into_iter().enumerate() {
                surfels.push(s);
                tags.push(SurfelTag::Object(oi));
                sources.push(SurfelSource::Object { object: oi, surfel: si });
                refine_cache.push(None);
            }
            object_ranges.push(start..surfels.len());
        }

        Ok(ComposedScene {
            frame: t,
            t_norm,
            surfels,
            tags,
            sources,
            hand_ranges,
            object_ranges,
            hand_frames,
            refine_cache,
        })
    }

    /// Scatters world-attribute gradients back to model parameters.
    ///
    /// Refinement-net inputs carry stop-gradients: world-attribute
    /// gradients reach local hand attributes only through the rigging
    /// chain plus the additive offsets, never through the net's input
    /// encoding.
    pub fn compose_backward(
        &self,
        composed: &ComposedScene,
        world_grads: &[SurfelGrad],
        grads: &mut SceneGrads,
    ) {
        assert_eq!(world_grads.len(), composed.surfels.len());
        for (idx, source) in composed.sources.iter().enumerate() {
            let wg = &world_grads[idx];
            match *source {
                SurfelSource::Hand { hand, surfel } => {
                    if let (Some(net), Some(cache)) =
                        (&self.net, composed.refine_cache[idx].as_ref())
                    {
                        let mut upstream = [0.0; 9];
                        upstream[0] = wg.pos.x;
                        upstream[1] = wg.pos.y;
                        upstream[2] = wg.pos.z;
                        upstream[3..7].copy_from_slice(&wg.rot);
                        upstream[7] = wg.log_scales[0];
                        upstream[8] = wg.log_scales[1];
                        net.backward(cache, &upstream, &mut grads.net);
                    }
                    let binding = self.hands[hand].bindings[surfel];
                    let (frame, fq) = composed.hand_frames[hand][binding.triangle_id]
                        .as_ref()
                        .expect("frame cached during compose");
                    let local = rig_backward(wg, frame, fq);
                    accumulate_surfel_grad(&mut grads.hands[hand][surfel], &local);
                }
                SurfelSource::Object { object, surfel } => {
                    let obj = &self.objects[object];
                    let pose = &obj.pose_track[composed.frame];
                    let q = pose.q.normalized();
                    let r = q.to_matrix();
                    let canon = &obj.surfels[surfel];

                    let local = SurfelGrad {
                        pos: r.transpose() * wg.pos,
                        rot: backprop_mul_right(&q, wg.rot),
                        log_scales: wg.log_scales,
                        opacity_logit: wg.opacity_logit,
                        sh: wg.sh.clone(),
                    };
                    accumulate_surfel_grad(&mut grads.objects[object].surfels[surfel], &local);

                    // Pose gradients: position path through R(q̂) x + t and
                    // rotation-composition path through q̂ ⊗ r.
                    let jac = q.matrix_jacobian();
                    let mut gq_unit = [0.0; 4];
                    for (c, j) in jac.iter().enumerate() {
                        gq_unit[c] = (j * canon.pos).dot(&wg.pos);
                    }
                    let comp = backprop_mul_left(&canon.rot, wg.rot);
                    for c in 0..4 {
                        gq_unit[c] += comp[c];
                    }
                    let gq = backprop_normalization(&pose.q, gq_unit);
                    let pg = &mut grads.objects[object];
                    for c in 0..4 {
                        pg.pose_q[composed.frame][c] += gq[c];
                    }
                    pg.pose_t[composed.frame] += wg.pos;
                }
            }
        }
    }
}

fn accumulate_surfel_grad(acc: &mut SurfelGrad, g: &SurfelGrad) {
    acc.pos += g.pos;
    for c in 0..4 {
        acc.rot[c] += g.rot[c];
    }
    acc.log_scales[0] += g.log_scales[0];
    acc.log_scales[1] += g.log_scales[1];
    acc.opacity_logit += g.opacity_logit;
    for (a, b) in acc.sh.iter_mut().zip(&g.sh) {
        for c in 0..3 {
            a[c] += b[c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};

    fn strip_template(faces: usize) -> (TemplateTopology, TemplateFrame) {
        // A planar triangle strip with `faces` triangles.
        let mut vertices = Vec::new();
        for i in 0..(faces / 2 + 2) {
            vertices.push(Vec3::new(i as f64 * 0.01, 0.0, 0.0));
            vertices.push(Vec3::new(i as f64 * 0.01, 0.01, 0.0));
        }
        let mut tri = Vec::new();
        let mut i = 0;
        while tri.len() < faces {
            let b = i * 2;
            tri.push([b, b + 1, b + 2]);
            if tri.len() < faces {
                tri.push([b + 1, b + 3, b + 2]);
            }
            i += 1;
        }
        let topology = TemplateTopology { vertex_count: vertices.len(), faces: tri };
        topology.validate().unwrap();
        (topology, TemplateFrame { t: 0, vertices, provenance: None })
    }

    fn rand_surfel(rng: &mut ChaCha8Rng) -> Surfel2D {
        Surfel2D {
            pos: Vec3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5),
            rot: Quat::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            ),
            log_scales: [rng.random::<f64>() - 2.0, rng.random::<f64>() - 2.0],
            opacity_logit: rng.random::<f64>(),
            sh: vec![[rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]],
        }
    }

    #[test]
    fn init_counts_match_topology() {
        let (topology, frame) = strip_template(1538);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = init_hand_surfels(
            &topology,
            &frame,
            HandSide::Left,
            &HandInitParams::default(),
            &mut rng,
        );
        assert_eq!(init.surfels.len(), 7690);
        assert_eq!(init.skipped_triangles, 0);
        for b in &init.bindings {
            assert!(b.triangle_id < topology.faces.len());
        }
    }

    #[test]
    fn init_zero_variance_sits_at_barycenter() {
        let (topology, frame) = strip_template(8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = HandInitParams { per_triangle: 1, variance: 1e-30, ..Default::default() };
        let init = init_hand_surfels(&topology, &frame, HandSide::Left, &params, &mut rng);
        for s in &init.surfels {
            assert!(s.pos.norm() < 1e-12);
            assert_eq!(s.rot, Quat::IDENTITY);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let (topology, frame) = strip_template(20);
        let params = HandInitParams::default();
        let a = init_hand_surfels(
            &topology,
            &frame,
            HandSide::Left,
            &params,
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        let b = init_hand_surfels(
            &topology,
            &frame,
            HandSide::Left,
            &params,
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        assert_eq!(a.surfels, b.surfels);
    }

    #[test]
    fn init_skips_degenerate_triangles() {
        let topology = TemplateTopology { vertex_count: 4, faces: vec![[0, 1, 2], [0, 1, 3]] };
        let frame = TemplateFrame {
            t: 0,
            vertices: vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(2.0, 0.0, 0.0), // collinear with 0,1
            ],
            provenance: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init = init_hand_surfels(
            &topology,
            &frame,
            HandSide::Right,
            &HandInitParams { per_triangle: 3, ..Default::default() },
            &mut rng,
        );
        assert_eq!(init.surfels.len(), 3);
        assert_eq!(init.skipped_triangles, 1);
    }

    #[test]
    fn rig_identity_frame_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = rand_surfel(&mut rng);
        let w = rig_to_world(&s, &TriangleFrame::IDENTITY);
        assert_relative_eq!(w.pos, s.pos, epsilon = 1e-15);
        assert_relative_eq!(w.log_scales[0], s.log_scales[0], epsilon = 1e-15);
        // Frame quat is identity, so rotation is unchanged.
        assert_relative_eq!(w.rot.w, s.rot.w, epsilon = 1e-12);
        assert_relative_eq!(w.rot.x, s.rot.x, epsilon = 1e-12);
    }

    #[test]
    fn rig_pure_scale() {
        let mut frame = TriangleFrame::IDENTITY;
        frame.scale = 2.0;
        let s = Surfel2D::flat(
            Vec3::new(1.0, 0.0, 0.0),
            Quat::IDENTITY,
            [0.1, 0.2],
            0.5,
            [0.5, 0.5, 0.5],
        );
        let w = rig_to_world(&s, &frame);
        assert_relative_eq!(w.pos, Vec3::new(2.0, 0.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(w.scales()[0], 0.2, epsilon = 1e-12);
        assert_relative_eq!(w.scales()[1], 0.4, epsilon = 1e-12);
    }

    #[test]
    fn rig_matches_homogeneous_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let v0 = Vec3::new(rng.random(), rng.random(), rng.random());
            let v1 = Vec3::new(rng.random(), rng.random(), rng.random());
            let v2 = Vec3::new(rng.random(), rng.random(), rng.random());
            let Ok(frame) = triangle_frame(&v0, &v1, &v2) else { continue };
            let s = rand_surfel(&mut rng);
            let w = rig_to_world(&s, &frame);

            // 4x4 homogeneous oracle for the position path.
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(frame.rot * frame.scale));
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&frame.origin);
            let hom = m * nalgebra::Vector4::new(s.pos.x, s.pos.y, s.pos.z, 1.0);
            assert_relative_eq!(w.pos, Vec3::new(hom.x, hom.y, hom.z), epsilon = 1e-9);

            // Rotation path: matrix of composed quat equals product.
            let rw = w.rot.normalized().to_matrix();
            let expect = frame.rot * s.rot.normalized().to_matrix();
            assert_relative_eq!(rw, expect, epsilon = 1e-9);

            // Eq. world scale = frame scale * local scale.
            assert_relative_eq!(w.scales()[0], frame.scale * s.scales()[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn rigging_equivariance_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let v0 = Vec3::new(rng.random(), rng.random(), rng.random());
            let v1 = Vec3::new(rng.random(), rng.random(), rng.random());
            let v2 = Vec3::new(rng.random(), rng.random(), rng.random());
            let Ok(frame) = triangle_frame(&v0, &v1, &v2) else { continue };
            let s = rand_surfel(&mut rng);

            let q = Quat::new(
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            )
            .normalized();
            let m = q.to_matrix();
            let t = Vec3::new(rng.random(), rng.random(), rng.random());
            let moved = triangle_frame(&(m * v0 + t), &(m * v1 + t), &(m * v2 + t)).unwrap();

            let w = rig_to_world(&s, &frame);
            let wm = rig_to_world(&s, &moved);
            assert_relative_eq!(wm.pos, m * w.pos + t, epsilon = 1e-9);
            // Rotations agree up to quaternion sign.
            let a = q.mul(&w.rot.normalized());
            let b = wm.rot.normalized();
            let dot = a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
            assert_relative_eq!(dot.abs(), 1.0, epsilon = 1e-9);
            assert_relative_eq!(wm.log_scales[0], w.log_scales[0], epsilon = 1e-9);
        }
    }

    #[test]
    fn rigging_scale_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let v0 = Vec3::new(rng.random(), rng.random(), rng.random());
            let v1 = Vec3::new(rng.random(), rng.random(), rng.random());
            let v2 = Vec3::new(rng.random(), rng.random(), rng.random());
            let Ok(frame) = triangle_frame(&v0, &v1, &v2) else { continue };
            let alpha = 0.5 + rng.random::<f64>() * 2.0;
            let scaled =
                triangle_frame(&(alpha * v0), &(alpha * v1), &(alpha * v2)).unwrap();
            let s = rand_surfel(&mut rng);
            let w = rig_to_world(&s, &frame);
            let ws = rig_to_world(&s, &scaled);
            assert_relative_eq!(ws.pos, alpha * w.pos, epsilon = 1e-9);
            assert_relative_eq!(ws.scales()[0], alpha * w.scales()[0], epsilon = 1e-9);
            assert_relative_eq!(ws.scales()[1], alpha * w.scales()[1], epsilon = 1e-9);
        }
    }

    #[test]
    fn object_to_world_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = rand_surfel(&mut rng);
        let obj = ObjectModel {
            surfels: vec![Surfel2D { pos: Vec3::new(1.0, 0.0, 0.0), ..s.clone() }],
            pose_track: vec![
                PoseSample::IDENTITY,
                PoseSample { q: Quat::IDENTITY, t: Vec3::new(0.0, 0.0, 0.1) },
                PoseSample {
                    q: Quat::from_axis_angle(Vec3::z(), std::f64::consts::FRAC_PI_2),
                    t: Vec3::zeros(),
                },
            ],
        };
        let w0 = object_to_world(&obj, 0).unwrap();
        assert_relative_eq!(w0[0].pos, obj.surfels[0].pos, epsilon = 1e-15);
        let w1 = object_to_world(&obj, 1).unwrap();
        assert_relative_eq!(w1[0].pos, Vec3::new(1.0, 0.0, 0.1), epsilon = 1e-15);
        let w2 = object_to_world(&obj, 2).unwrap();
        assert_relative_eq!(w2[0].pos, Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-9);
        assert!(matches!(object_to_world(&obj, 3), Err(Error::FrameOutOfRange { .. })));
    }

    fn tiny_scene(with_objects: bool) -> SceneModel {
        let (topology, frame) = strip_template(6);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let init = init_hand_surfels(
            &topology,
            &frame,
            HandSide::Left,
            &HandInitParams { per_triangle: 2, ..Default::default() },
            &mut rng,
        );
        let template = TemplateSequence {
            topology,
            frames: vec![
                frame.clone(),
                TemplateFrame {
                    t: 1,
                    vertices: frame.vertices.iter().map(|v| v + Vec3::new(0.0, 0.0, 0.01)).collect(),
                    provenance: None,
                },
            ],
        };
        let hand = HandModel {
            side: HandSide::Left,
            template,
            surfels: init.surfels,
            bindings: init.bindings,
        };
        let objects = if with_objects {
            vec![ObjectModel {
                surfels: (0..5).map(|_| rand_surfel(&mut rng)).collect(),
                pose_track: vec![PoseSample::IDENTITY; 2],
            }]
        } else {
            vec![]
        };
        SceneModel { hands: vec![hand], objects, net: None, sh_degree: 0, frame_count: 2 }
    }

    #[test]
    fn compose_hand_only() {
        let scene = tiny_scene(false);
        let c = scene.compose(0).unwrap();
        assert_eq!(c.surfels.len(), 12);
        assert!(c.tags.iter().all(|t| t.is_hand()));
    }

    #[test]
    fn compose_cardinality_and_partition() {
        let scene = tiny_scene(true);
        let c = scene.compose(1).unwrap();
        assert_eq!(c.surfels.len(), 12 + 5);
        assert_eq!(c.hand_indices().count(), 12);
        assert_eq!(c.object_indices().count(), 5);
        // Tags partition the output with no gaps.
        let mut seen = vec![false; c.surfels.len()];
        for i in c.hand_indices().chain(c.object_indices()) {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn compose_matches_piecewise_transforms() {
        let scene = tiny_scene(true);
        let t = 1;
        let c = scene.compose(t).unwrap();
        // Hands: manual rig of each surfel.
        let hand = &scene.hands[0];
        let frames = hand.template.triangle_frames(t).unwrap();
        for (i, (local, binding)) in hand.surfels.iter().zip(&hand.bindings).enumerate() {
            let frame = frames[binding.triangle_id].unwrap();
            let manual = rig_to_world(local, &frame);
            assert_relative_eq!(c.surfels[i].pos, manual.pos, epsilon = 1e-12);
        }
        // Objects: manual pose.
        let world = object_to_world(&scene.objects[0], t).unwrap();
        for (k, w) in world.iter().enumerate() {
            assert_relative_eq!(c.surfels[12 + k].pos, w.pos, epsilon = 1e-12);
        }
    }
}
