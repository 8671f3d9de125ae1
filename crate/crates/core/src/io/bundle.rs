//! On-disk scene bundle: manifest, cameras, image/mask grids, template
//! sequences and the object seed cloud.
//!
//! Layout under the bundle root:
//!   manifest.json
//!   cameras.json
//!   images/<view>/<frame:05>.ppm
//!   masks/<view>/<frame:05>.pgm          (255 = foreground)
//!   template/<hand>/topology.obj         (v/f lines only; rest pose)
//!   template/<hand>/frames.bin           (per frame: u32 LE vertex count,
//!                                         then count*3 f32 LE)
//!   object/seed.ply                      (ASCII, x y z [red green blue])
//!   gt_contact.json                      (optional ground-truth labels)

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geom::{Camera, Mat3, Vec3};
use crate::io::image::{read_pgm, read_ppm, write_pgm, write_ppm, ImageGray, ImageRgb};
use crate::model::{HandSide, TemplateFrame, TemplateSequence, TemplateTopology};
use crate::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub views: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub hands: Vec<String>,
    pub objects: usize,
    /// Contact threshold in meters, surfaced in all outputs.
    pub tau: f64,
    pub units: String,
    pub fps: f64,
    pub background: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    /// Row-major world-to-camera rotation.
    world_to_cam_rot: [[f64; 3]; 3],
    world_to_cam_trans: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CamerasJson {
    schema_version: u32,
    cameras: Vec<CameraJson>,
}

/// Fully-loaded multi-view capture bundle.
#[derive(Clone, Debug)]
pub struct SceneBundle {
    pub manifest: Manifest,
    pub cameras: Vec<Camera>,
    /// Indexed [view][frame].
    pub images: Vec<Vec<ImageRgb>>,
    pub masks: Vec<Vec<ImageGray>>,
    pub templates: Vec<(HandSide, TemplateSequence)>,
    pub object_seed: Vec<(Vec3, Option<[f64; 3]>)>,
}

impl SceneBundle {
    pub fn views(&self) -> usize {
        self.manifest.views
    }

    pub fn frames(&self) -> usize {
        self.manifest.frames
    }

    /// Mean intensity of mask-foreground pixels over the first frame of
    /// every view; initial surfel gray level.
    pub fn mean_masked_gray(&self) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for v in 0..self.views() {
            let img = &self.images[v][0];
            let mask = &self.masks[v][0];
            for (px, m) in img.data.iter().zip(&mask.data) {
                if *m > 0.5 {
                    sum += (px[0] + px[1] + px[2]) / 3.0;
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.5
        } else {
            sum / count as f64
        }
    }
}

pub fn image_path(root: &Path, view: usize, frame: usize) -> PathBuf {
    root.join("images").join(view.to_string()).join(format!("{frame:05}.ppm"))
}

pub fn mask_path(root: &Path, view: usize, frame: usize) -> PathBuf {
    root.join("masks").join(view.to_string()).join(format!("{frame:05}.pgm"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Loads and fully validates a bundle; any inconsistency is a hard error
/// naming the offending file.
pub fn load_bundle(root: &Path) -> Result<SceneBundle> {
    let manifest: Manifest = read_json(&root.join("manifest.json"))?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::parse(
            root.join("manifest.json"),
            format!("unsupported schema_version {}", manifest.schema_version),
        ));
    }
    if manifest.views == 0 || manifest.frames == 0 || manifest.tau <= 0.0 {
        return Err(Error::BadConfig { reason: "manifest must declare views, frames and tau > 0".into() });
    }

    let cams: CamerasJson = read_json(&root.join("cameras.json"))?;
    if cams.cameras.len() != manifest.views {
        return Err(Error::parse(
            root.join("cameras.json"),
            format!("expected {} cameras, found {}", manifest.views, cams.cameras.len()),
        ));
    }
    let cameras: Vec<Camera> = cams
        .cameras
        .iter()
        .map(|c| {
            let r = &c.world_to_cam_rot;
            Camera {
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                rot: Mat3::new(
                    r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
                ),
                trans: Vec3::new(
                    c.world_to_cam_trans[0],
                    c.world_to_cam_trans[1],
                    c.world_to_cam_trans[2],
                ),
            }
        })
        .collect();
    for cam in &cameras {
        cam.validate()?;
    }

    let mut images = Vec::with_capacity(manifest.views);
    let mut masks = Vec::with_capacity(manifest.views);
    for v in 0..manifest.views {
        let mut vi = Vec::with_capacity(manifest.frames);
        let mut vm = Vec::with_capacity(manifest.frames);
        for f in 0..manifest.frames {
            let ip = image_path(root, v, f);
            if !ip.exists() {
                return Err(Error::GridIncomplete { view: v, frame: f, path: ip });
            }
            let img = read_ppm(&ip)?;
            if img.width != manifest.width || img.height != manifest.height {
                return Err(Error::parse(ip, "image size differs from manifest"));
            }
            let mp = mask_path(root, v, f);
            if !mp.exists() {
                return Err(Error::GridIncomplete { view: v, frame: f, path: mp });
            }
            let mask = read_pgm(&mp)?;
            if mask.width != manifest.width || mask.height != manifest.height {
                return Err(Error::parse(mp, "mask size differs from manifest"));
            }
            vi.push(img);
            vm.push(mask);
        }
        images.push(vi);
        masks.push(vm);
    }

    let mut templates = Vec::new();
    for hand in &manifest.hands {
        let side = HandSide::parse(hand).ok_or_else(|| Error::BadConfig {
            reason: format!("unknown hand '{hand}' in manifest"),
        })?;
        let dir = root.join("template").join(hand);
        let (rest, topology) = read_topology_obj(&dir.join("topology.obj"))?;
        let frames = read_frames_bin(&dir.join("frames.bin"), topology.vertex_count)?;
        if frames.len() != manifest.frames {
            return Err(Error::parse(
                dir.join("frames.bin"),
                format!("expected {} frames, found {}", manifest.frames, frames.len()),
            ));
        }
        let _ = rest;
        let seq = TemplateSequence { topology, frames };
        seq.validate()?;
        templates.push((side, seq));
    }

    let object_seed = if manifest.objects > 0 {
        read_seed_ply(&root.join("object").join("seed.ply"))?
    } else {
        Vec::new()
    };

    Ok(SceneBundle { manifest, cameras, images, masks, templates, object_seed })
}

/// Writes a bundle with canonical serialization (save -> load -> save is
/// byte-stable).
pub fn save_bundle(root: &Path, bundle: &SceneBundle) -> Result<()> {
    let mk = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mk(root)?;
    write_json(&root.join("manifest.json"), &bundle.manifest)?;

    let cams = CamerasJson {
        schema_version: 1,
        cameras: bundle
            .cameras
            .iter()
            .map(|c| CameraJson {
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                world_to_cam_rot: [
                    [c.rot[(0, 0)], c.rot[(0, 1)], c.rot[(0, 2)]],
                    [c.rot[(1, 0)], c.rot[(1, 1)], c.rot[(1, 2)]],
                    [c.rot[(2, 0)], c.rot[(2, 1)], c.rot[(2, 2)]],
                ],
                world_to_cam_trans: [c.trans.x, c.trans.y, c.trans.z],
            })
            .collect(),
    };
    write_json(&root.join("cameras.json"), &cams)?;

    for v in 0..bundle.views() {
        mk(&root.join("images").join(v.to_string()))?;
        mk(&root.join("masks").join(v.to_string()))?;
        for f in 0..bundle.frames() {
            write_ppm(&image_path(root, v, f), &bundle.images[v][f])?;
            write_pgm(&mask_path(root, v, f), &bundle.masks[v][f])?;
        }
    }

    for (side, seq) in &bundle.templates {
        let dir = root.join("template").join(side.name());
        mk(&dir)?;
        write_topology_obj(&dir.join("topology.obj"), &seq.frames[0], &seq.topology)?;
        write_frames_bin(&dir.join("frames.bin"), &seq.frames)?;
    }

    if bundle.manifest.objects > 0 {
        let dir = root.join("object");
        mk(&dir)?;
        write_seed_ply(&dir.join("seed.ply"), &bundle.object_seed)?;
    }
    Ok(())
}

fn read_topology_obj(path: &Path) -> Result<(Vec<Vec3>, TemplateTopology)> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let bad = |reason: String| Error::parse(path, format!("line {}: {}", ln + 1, reason));
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let mut c = [0.0; 3];
                for slot in c.iter_mut() {
                    *slot = it
                        .next()
                        .and_then(|t| t.parse::<f64>().ok())
                        .ok_or_else(|| bad("bad vertex".into()))?;
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let mut f = [0usize; 3];
                for slot in f.iter_mut() {
                    let tok = it.next().ok_or_else(|| bad("bad face".into()))?;
                    // Accept "i", "i/..." OBJ forms; indices are 1-based.
                    let idx: usize = tok
                        .split('/')
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad("bad face index".into()))?;
                    if idx == 0 {
                        return Err(bad("face index must be 1-based".into()));
                    }
                    *slot = idx - 1;
                }
                faces.push(f);
            }
            _ => {}
        }
    }
    let topology = TemplateTopology { vertex_count: vertices.len(), faces };
    topology.validate()?;
    Ok((vertices, topology))
}

fn write_topology_obj(path: &Path, rest: &TemplateFrame, topology: &TemplateTopology) -> Result<()> {
    let mut out = String::new();
    for v in &rest.vertices {
        // Vertex buffers are stored as f32; quantize identically here so
        // a save -> load -> save cycle is byte-stable.
        out.push_str(&format!(
            "v {:.9} {:.9} {:.9}\n",
            v.x as f32 as f64,
            v.y as f32 as f64,
            v.z as f32 as f64
        ));
    }
    for f in &topology.faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    super::image::write_text(path, &out)
}

fn read_frames_bin(path: &Path, expect_vertices: usize) -> Result<Vec<TemplateFrame>> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut frames = Vec::new();
    let mut off = 0usize;
    let mut t = 0usize;
    while off < bytes.len() {
        if off + 4 > bytes.len() {
            return Err(Error::parse(path, "truncated frame header"));
        }
        let count =
            u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
                as usize;
        off += 4;
        if count != expect_vertices {
            return Err(Error::parse(
                path,
                format!("frame {t}: vertex count {count} != topology {expect_vertices}"),
            ));
        }
        let need = count * 3 * 4;
        if off + need > bytes.len() {
            return Err(Error::parse(path, format!("frame {t}: truncated vertex data")));
        }
        let mut vertices = Vec::with_capacity(count);
        for i in 0..count {
            let base = off + i * 12;
            let f = |o: usize| {
                f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64
            };
            vertices.push(Vec3::new(f(base), f(base + 4), f(base + 8)));
        }
        off += need;
        frames.push(TemplateFrame { t, vertices, provenance: None });
        t += 1;
    }
    Ok(frames)
}

fn write_frames_bin(path: &Path, frames: &[TemplateFrame]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    for frame in frames {
        buf.extend_from_slice(&(frame.vertices.len() as u32).to_le_bytes());
        for v in &frame.vertices {
            buf.extend_from_slice(&(v.x as f32).to_le_bytes());
            buf.extend_from_slice(&(v.y as f32).to_le_bytes());
            buf.extend_from_slice(&(v.z as f32).to_le_bytes());
        }
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_seed_ply(path: &Path) -> Result<Vec<(Vec3, Option<[f64; 3]>)>> {
    if !path.exists() {
        return Err(Error::MissingFile { path: path.to_path_buf() });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let bad = |reason: &str| Error::parse(path, reason);
    if lines.next() != Some("ply") {
        return Err(bad("missing ply magic"));
    }
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    for line in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?)
            }
            ["property", _, name] => props.push((*name).to_owned()),
            ["end_header"] => break,
            ["comment", ..] | ["element", ..] => {}
            _ => return Err(bad("unexpected header line")),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let has_color = props.iter().any(|p| p == "red");
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad vertex line"))?;
        if vals.len() < 3 {
            return Err(bad("vertex line too short"));
        }
        let pos = Vec3::new(vals[0], vals[1], vals[2]);
        let color = if has_color && vals.len() >= 6 {
            Some([vals[3] / 255.0, vals[4] / 255.0, vals[5] / 255.0])
        } else {
            None
        };
        out.push((pos, color));
    }
    Ok(out)
}

fn write_seed_ply(path: &Path, seed: &[(Vec3, Option<[f64; 3]>)]) -> Result<()> {
    let has_color = seed.iter().any(|(_, c)| c.is_some());
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", seed.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if has_color {
        out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.push_str("end_header\n");
    for (p, c) in seed {
        if has_color {
            let c = c.unwrap_or([0.5; 3]);
            out.push_str(&format!(
                "{:.9} {:.9} {:.9} {} {} {}\n",
                p.x,
                p.y,
                p.z,
                (c[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                (c[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                (c[2].clamp(0.0, 1.0) * 255.0).round() as u8,
            ));
        } else {
            out.push_str(&format!("{:.9} {:.9} {:.9}\n", p.x, p.y, p.z));
        }
    }
    super::image::write_text(path, &out)
}

/// Ground-truth / predicted per-vertex contact labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelsJson {
    pub schema_version: u32,
    pub tau: f64,
    /// Hand name -> 0/1 vertex labels.
    pub hands: std::collections::BTreeMap<String, Vec<u8>>,
}

pub fn read_labels(path: &Path) -> Result<LabelsJson> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_obj_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("topology.obj");
        let frame = TemplateFrame {
            t: 0,
            vertices: vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            provenance: None,
        };
        let topo = TemplateTopology { vertex_count: 3, faces: vec![[0, 1, 2]] };
        write_topology_obj(&path, &frame, &topo).unwrap();
        let (verts, loaded) = read_topology_obj(&path).unwrap();
        assert_eq!(verts.len(), 3);
        assert_eq!(loaded.faces, vec![[0, 1, 2]]);

        // Out-of-range face index is rejected.
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nf 1 2 3\n").unwrap();
        assert!(matches!(
            read_topology_obj(&path),
            Err(Error::TopologyOutOfRange { .. })
        ));
    }

    #[test]
    fn frames_bin_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.bin");
        let frames: Vec<TemplateFrame> = (0..3)
            .map(|t| TemplateFrame {
                t,
                vertices: vec![Vec3::new(t as f64, 0.5, -1.25), Vec3::new(0.0, t as f64, 2.0)],
                provenance: None,
            })
            .collect();
        write_frames_bin(&path, &frames).unwrap();
        let loaded = read_frames_bin(&path, 2).unwrap();
        assert_eq!(loaded.len(), 3);
        assert!((loaded[1].vertices[0].x - 1.0).abs() < 1e-6);
        assert!((loaded[2].vertices[1].y - 2.0).abs() < 1e-6);
        // Wrong vertex count reported.
        assert!(read_frames_bin(&path, 5).is_err());
    }

    #[test]
    fn seed_ply_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seed.ply");
        let seed = vec![
            (Vec3::new(0.1, 0.2, 0.3), Some([1.0, 0.0, 0.5])),
            (Vec3::new(-0.1, 0.0, 0.9), Some([0.0, 1.0, 0.25])),
        ];
        write_seed_ply(&path, &seed).unwrap();
        let loaded = read_seed_ply(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert!((loaded[0].0 - seed[0].0).norm() < 1e-6);
        assert!(loaded[0].1.is_some());
    }
}
