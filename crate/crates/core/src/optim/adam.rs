//! Adam with bias correction and per-parameter-group learning rates.
//! Moments live alongside the scene parameters and survive densification
//! through explicit surgery (see `density`).

use serde::{Deserialize, Serialize};

use crate::model::{sh_basis_len, SceneGrads, SceneModel};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-group learning rates.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub net: f64,
    pub object_pose: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position: 1.6e-4,
            rotation: 1e-3,
            log_scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            net: 1e-4,
            object_pose: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Moments {
        Moments { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// Moments for one surfel array, one row per surfel.
#[derive(Clone, Debug, Default)]
pub struct SurfelMoments {
    pub pos: Moments,
    pub rot: Moments,
    pub log_scales: Moments,
    pub opacity: Moments,
    pub sh: Moments,
}

impl SurfelMoments {
    pub fn zeros(n: usize, basis: usize) -> SurfelMoments {
        SurfelMoments {
            pos: Moments::zeros(n * 3),
            rot: Moments::zeros(n * 4),
            log_scales: Moments::zeros(n * 2),
            opacity: Moments::zeros(n),
            sh: Moments::zeros(n * 3 * basis),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ObjectMoments {
    pub surfels: SurfelMoments,
    pub pose_q: Moments,
    pub pose_t: Moments,
}

/// Optimizer state mirroring the scene's parameter groups.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub hands: Vec<SurfelMoments>,
    pub objects: Vec<ObjectMoments>,
    pub net: Moments,
}

impl AdamState {
    pub fn for_scene(scene: &SceneModel) -> AdamState {
        let basis = sh_basis_len(scene.sh_degree);
        AdamState {
            step: 0,
            hands: scene.hands.iter().map(|h| SurfelMoments::zeros(h.surfels.len(), basis)).collect(),
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectMoments {
                    surfels: SurfelMoments::zeros(o.surfels.len(), basis),
                    pose_q: Moments::zeros(o.pose_track.len() * 4),
                    pose_t: Moments::zeros(o.pose_track.len() * 3),
                })
                .collect(),
            net: scene
                .net
                .as_ref()
                .map(|n| Moments::zeros(n.weights.len()))
                .unwrap_or_default(),
        }
    }
}

#[inline]
fn adam_update(p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64, bc1: f64, bc2: f64) {
    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
    let mhat = *m / bc1;
    let vhat = *v / bc2;
    *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
}

/// One optimizer step. Returns false (state decays, parameters untouched
/// by non-finite inputs) when any gradient is non-finite.
pub fn adam_step(
    scene: &mut SceneModel,
    grads: &SceneGrads,
    state: &mut AdamState,
    lr: &LearningRates,
) -> Result<bool> {
    let basis = sh_basis_len(scene.sh_degree);
    if grads.hands.len() != scene.hands.len() || grads.objects.len() != scene.objects.len() {
        return Err(Error::ShapeMismatch {
            group: "scene".into(),
            a: grads.hands.len() + grads.objects.len(),
            b: scene.hands.len() + scene.objects.len(),
        });
    }
    for (h, g) in scene.hands.iter().zip(&grads.hands) {
        if h.surfels.len() != g.len() {
            return Err(Error::ShapeMismatch {
                group: "hand surfels".into(),
                a: g.len(),
                b: h.surfels.len(),
            });
        }
    }
    for (o, g) in scene.objects.iter().zip(&grads.objects) {
        if o.surfels.len() != g.surfels.len() {
            return Err(Error::ShapeMismatch {
                group: "object surfels".into(),
                a: g.surfels.len(),
                b: o.surfels.len(),
            });
        }
    }
    if let Some(net) = &scene.net {
        if grads.net.len() != net.weights.len() {
            return Err(Error::ShapeMismatch {
                group: "net".into(),
                a: grads.net.len(),
                b: net.weights.len(),
            });
        }
    }

    if !grads.is_finite() {
        return Ok(false);
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);

    for (hi, hand) in scene.hands.iter_mut().enumerate() {
        let mom = &mut state.hands[hi];
        for (si, s) in hand.surfels.iter_mut().enumerate() {
            let g = &grads.hands[hi][si];
            for c in 0..3 {
                adam_update(
                    &mut s.pos[c],
                    g.pos[c],
                    &mut mom.pos.m[si * 3 + c],
                    &mut mom.pos.v[si * 3 + c],
                    lr.position,
                    bc1,
                    bc2,
                );
            }
            let rot = [&mut s.rot.w, &mut s.rot.x, &mut s.rot.y, &mut s.rot.z];
            for (c, p) in rot.into_iter().enumerate() {
                adam_update(
                    p,
                    g.rot[c],
                    &mut mom.rot.m[si * 4 + c],
                    &mut mom.rot.v[si * 4 + c],
                    lr.rotation,
                    bc1,
                    bc2,
                );
            }
            for c in 0..2 {
                adam_update(
                    &mut s.log_scales[c],
                    g.log_scales[c],
                    &mut mom.log_scales.m[si * 2 + c],
                    &mut mom.log_scales.v[si * 2 + c],
                    lr.log_scale,
                    bc1,
                    bc2,
                );
            }
            adam_update(
                &mut s.opacity_logit,
                g.opacity_logit,
                &mut mom.opacity.m[si],
                &mut mom.opacity.v[si],
                lr.opacity,
                bc1,
                bc2,
            );
            for b in 0..basis.min(s.sh.len()) {
                for c in 0..3 {
                    let k = (si * basis + b) * 3 + c;
                    adam_update(
                        &mut s.sh[b][c],
                        g.sh[b][c],
                        &mut mom.sh.m[k],
                        &mut mom.sh.v[k],
                        lr.color,
                        bc1,
                        bc2,
                    );
                }
            }
        }
    }

    for (oi, obj) in scene.objects.iter_mut().enumerate() {
        let mom = &mut state.objects[oi];
        let og = &grads.objects[oi];
        for (si, s) in obj.surfels.iter_mut().enumerate() {
            let g = &og.surfels[si];
            for c in 0..3 {
                adam_update(
                    &mut s.pos[c],
                    g.pos[c],
                    &mut mom.surfels.pos.m[si * 3 + c],
                    &mut mom.surfels.pos.v[si * 3 + c],
                    lr.position,
                    bc1,
                    bc2,
                );
            }
            let rot = [&mut s.rot.w, &mut s.rot.x, &mut s.rot.y, &mut s.rot.z];
            for (c, p) in rot.into_iter().enumerate() {
                adam_update(
                    p,
                    g.rot[c],
                    &mut mom.surfels.rot.m[si * 4 + c],
                    &mut mom.surfels.rot.v[si * 4 + c],
                    lr.rotation,
                    bc1,
                    bc2,
                );
            }
            for c in 0..2 {
                adam_update(
                    &mut s.log_scales[c],
                    g.log_scales[c],
                    &mut mom.surfels.log_scales.m[si * 2 + c],
                    &mut mom.surfels.log_scales.v[si * 2 + c],
                    lr.log_scale,
                    bc1,
                    bc2,
                );
            }
            adam_update(
                &mut s.opacity_logit,
                g.opacity_logit,
                &mut mom.surfels.opacity.m[si],
                &mut mom.surfels.opacity.v[si],
                lr.opacity,
                bc1,
                bc2,
            );
            for b in 0..basis.min(s.sh.len()) {
                for c in 0..3 {
                    let k = (si * basis + b) * 3 + c;
                    adam_update(
                        &mut s.sh[b][c],
                        g.sh[b][c],
                        &mut mom.surfels.sh.m[k],
                        &mut mom.surfels.sh.v[k],
                        lr.color,
                        bc1,
                        bc2,
                    );
                }
            }
        }
        for (fi, pose) in obj.pose_track.iter_mut().enumerate() {
            let gq = &og.pose_q[fi];
            let q = [&mut pose.q.w, &mut pose.q.x, &mut pose.q.y, &mut pose.q.z];
            for (c, p) in q.into_iter().enumerate() {
                adam_update(
                    p,
                    gq[c],
                    &mut mom.pose_q.m[fi * 4 + c],
                    &mut mom.pose_q.v[fi * 4 + c],
                    lr.object_pose,
                    bc1,
                    bc2,
                );
            }
            for c in 0..3 {
                adam_update(
                    &mut pose.t[c],
                    og.pose_t[fi][c],
                    &mut mom.pose_t.m[fi * 3 + c],
                    &mut mom.pose_t.v[fi * 3 + c],
                    lr.object_pose,
                    bc1,
                    bc2,
                );
            }
        }
    }

    if let Some(net) = scene.net.as_mut() {
        for (k, w) in net.weights.iter_mut().enumerate() {
            adam_update(w, grads.net[k], &mut state.net.m[k], &mut state.net.v[k], lr.net, bc1, bc2);
        }
    }

    Ok(true)
}
