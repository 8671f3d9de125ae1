//! Versioned little-endian binary checkpoint holding all optimizable
//! state: surfel arrays, bindings, pose tracks and refinement-net weights.
//!
//! Layout (all integers and floats little-endian):
//!   magic   4 bytes  "SCPK"
//!   version u32      (currently 1)
//!   sh_degree u32, frame_count u32
//!   hand count u32, then per hand:
//!     side u8 (0 left, 1 right), surfel count u32,
//!     per surfel: pos f64*3, rot f64*4 (w x y z), log_scales f64*2,
//!                 opacity_logit f64, sh f64*3*basis,
//!     bindings: triangle_id u32 per surfel
//!   object count u32, then per object:
//!     surfel count u32, surfels as above,
//!     pose track: frame_count * (q f64*4, t f64*3)
//!   net flag u8; if 1: depth/hidden/l_x/l_r/l_s/l_j u32 each,
//!     weight count u64, weights f64*count

use std::fs;
use std::path::Path;

use crate::geom::{Quat, Vec3};
use crate::model::{
    sh_basis_len, HandModel, HandSide, NetConfig, ObjectModel, PoseSample, RefinementNet,
    SceneModel, Surfel2D, TriangleBinding,
};
use crate::{Error, Result};

use super::bundle::SceneBundle;

const MAGIC: &[u8; 4] = b"SCPK";
const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn vec3(&mut self, v: &Vec3) {
        self.f64(v.x);
        self.f64(v.y);
        self.f64(v.z);
    }
    fn surfel(&mut self, s: &Surfel2D) {
        self.vec3(&s.pos);
        self.f64(s.rot.w);
        self.f64(s.rot.x);
        self.f64(s.rot.y);
        self.f64(s.rot.z);
        self.f64(s.log_scales[0]);
        self.f64(s.log_scales[1]);
        self.f64(s.opacity_logit);
        for c in &s.sh {
            self.f64(c[0]);
            self.f64(c[1]);
            self.f64(c[2]);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.buf.len() {
            return Err(Error::BadCheckpoint { reason: "unexpected end of file".into() });
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    fn surfel(&mut self, basis: usize) -> Result<Surfel2D> {
        let pos = self.vec3()?;
        let rot = Quat::new(self.f64()?, self.f64()?, self.f64()?, self.f64()?);
        let log_scales = [self.f64()?, self.f64()?];
        let opacity_logit = self.f64()?;
        let mut sh = Vec::with_capacity(basis);
        for _ in 0..basis {
            sh.push([self.f64()?, self.f64()?, self.f64()?]);
        }
        Ok(Surfel2D { pos, rot, log_scales, opacity_logit, sh })
    }
}

pub fn save_checkpoint(path: &Path, scene: &SceneModel) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(scene.sh_degree as u32);
    w.u32(scene.frame_count as u32);

    w.u32(scene.hands.len() as u32);
    for hand in &scene.hands {
        w.u8(match hand.side {
            HandSide::Left => 0,
            HandSide::Right => 1,
        });
        w.u32(hand.surfels.len() as u32);
        for s in &hand.surfels {
            w.surfel(s);
        }
        for b in &hand.bindings {
            w.u32(b.triangle_id as u32);
        }
    }

    w.u32(scene.objects.len() as u32);
    for obj in &scene.objects {
        w.u32(obj.surfels.len() as u32);
        for s in &obj.surfels {
            w.surfel(s);
        }
        for p in &obj.pose_track {
            w.f64(p.q.w);
            w.f64(p.q.x);
            w.f64(p.q.y);
            w.f64(p.q.z);
            w.vec3(&p.t);
        }
    }

    match &scene.net {
        Some(net) => {
            w.u8(1);
            w.u32(net.cfg.depth as u32);
            w.u32(net.cfg.hidden as u32);
            w.u32(net.cfg.l_x as u32);
            w.u32(net.cfg.l_r as u32);
            w.u32(net.cfg.l_s as u32);
            w.u32(net.cfg.l_j as u32);
            w.u64(net.weights.len() as u64);
            for &v in &net.weights {
                w.f64(v);
            }
        }
        None => w.u8(0),
    }

    fs::write(path, w.buf).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; templates are reattached from the bundle (they are
/// inputs, not optimizable state).
pub fn load_checkpoint(path: &Path, bundle: &SceneBundle) -> Result<SceneModel> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, off: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::BadCheckpoint { reason: "bad magic".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::BadCheckpoint { reason: format!("unsupported version {version}") });
    }
    let sh_degree = r.u32()? as usize;
    let frame_count = r.u32()? as usize;
    let basis = sh_basis_len(sh_degree);

    let n_hands = r.u32()? as usize;
    let mut hands = Vec::with_capacity(n_hands);
    for _ in 0..n_hands {
        let side = match r.u8()? {
            0 => HandSide::Left,
            1 => HandSide::Right,
            other => {
                return Err(Error::BadCheckpoint { reason: format!("bad hand side {other}") })
            }
        };
        let n = r.u32()? as usize;
        let mut surfels = Vec::with_capacity(n);
        for _ in 0..n {
            surfels.push(r.surfel(basis)?);
        }
        let template = bundle
            .templates
            .iter()
            .find(|(s, _)| *s == side)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::BadCheckpoint {
                reason: format!("bundle lacks template for hand '{}'", side.name()),
            })?;
        let faces = template.topology.faces.len();
        let mut bindings = Vec::with_capacity(n);
        for _ in 0..n {
            let tri = r.u32()? as usize;
            if tri >= faces {
                return Err(Error::BadCheckpoint {
                    reason: format!("binding {tri} out of range ({faces} faces)"),
                });
            }
            bindings.push(TriangleBinding { triangle_id: tri, owner: side });
        }
        hands.push(HandModel { side, template, surfels, bindings });
    }

    let n_objects = r.u32()? as usize;
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let n = r.u32()? as usize;
        let mut surfels = Vec::with_capacity(n);
        for _ in 0..n {
            surfels.push(r.surfel(basis)?);
        }
        let mut pose_track = Vec::with_capacity(frame_count);
        for _ in 0..frame_count {
            let q = Quat::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let t = r.vec3()?;
            pose_track.push(PoseSample { q, t });
        }
        objects.push(ObjectModel { surfels, pose_track });
    }

    let net = if r.u8()? == 1 {
        let cfg = NetConfig {
            depth: r.u32()? as usize,
            hidden: r.u32()? as usize,
            l_x: r.u32()? as usize,
            l_r: r.u32()? as usize,
            l_s: r.u32()? as usize,
            l_j: r.u32()? as usize,
        };
        let n = r.u64()? as usize;
        if n != cfg.weight_len() {
            return Err(Error::BadCheckpoint {
                reason: format!("net weight count {n} != expected {}", cfg.weight_len()),
            });
        }
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(r.f64()?);
        }
        Some(RefinementNet { cfg, weights })
    } else {
        None
    };

    Ok(SceneModel { hands, objects, net, sh_degree, frame_count })
}
