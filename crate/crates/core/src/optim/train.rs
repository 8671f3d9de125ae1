//! The fitting loop: per iteration, sample a (view, frame), compose the
//! scene, render, evaluate the weighted losses, backpropagate analytically
//! to every parameter group, take an Adam step, and periodically run
//! contact-guided adaptive density control.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contact::{
    accumulate, instantaneous_contact_positions, label_contact_voxels, project_to_template,
    AccumulatedContact, ContactMap,
};
use crate::geom::{Camera, Vec3};
use crate::io::{ImageRgb, SceneBundle};
use crate::model::{
    init_hand_surfels, HandInitParams, HandModel, HandSide, NetConfig, ObjectModel, PoseSample,
    RefinementNet, SceneGrads, SceneModel, Surfel2D,
};
use crate::optim::adam::{adam_step, AdamState, LearningRates};
use crate::optim::density::{density_control, DensifyConfig, ScreenAccum};
use crate::optim::losses::{
    isotropic_backward, loss_distortion, loss_isotropic, loss_normal, loss_photometric,
    masked_target, psnr, rigging_penalties, ssim, total_loss, LossComponents, LossWeights,
};
use crate::render::{render, render_backward, ImageGrads, RasterConfig, RenderOutput};
use crate::synth::mix_seed;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub sh_degree: usize,
    /// Surfels per template triangle at initialization (k).
    pub hand_k: usize,
    /// Variance of initial local positions (v).
    pub hand_variance: f64,
    /// Enable the time-dependent refinement network.
    pub refine: bool,
    pub net: NetConfig,
    pub lr: LearningRates,
    /// Exponential position-lr decay down to this ratio (1.0 = constant).
    pub position_lr_final_ratio: f64,
    pub weights: LossWeights,
    pub densify: DensifyConfig,
    pub densify_start: usize,
    pub densify_interval: usize,
    /// Densification stops at this fraction of total iterations.
    pub densify_end_frac: f64,
    /// Contact-voxel set refresh period, iterations.
    pub contact_refresh: usize,
    /// Integer downscale applied to images (and intrinsics) for training.
    pub image_downscale: usize,
    pub holdout_views: Vec<usize>,
    /// Contact threshold; falls back to the bundle manifest when absent.
    pub tau: Option<f64>,
    pub raster: RasterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            seed: 0,
            sh_degree: 0,
            hand_k: 5,
            hand_variance: 0.5,
            refine: true,
            net: NetConfig::default(),
            lr: LearningRates::default(),
            position_lr_final_ratio: 0.1,
            weights: LossWeights::default(),
            densify: DensifyConfig::default(),
            densify_start: 500,
            densify_interval: 100,
            densify_end_frac: 0.7,
            contact_refresh: 50,
            image_downscale: 1,
            holdout_views: Vec::new(),
            tau: None,
            raster: RasterConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct IterationLog {
    pub iter: usize,
    pub total: f64,
    pub photometric: f64,
    pub distortion: f64,
    pub normal: f64,
    pub position: f64,
    pub scale: f64,
    pub isotropic: f64,
    pub hand_surfels: usize,
    pub object_surfels: usize,
    pub psnr: f64,
    pub stepped: bool,
}

pub const LOG_CSV_HEADER: &str =
    "iter,total,photometric,distortion,normal,position,scale,isotropic,hand_surfels,object_surfels,psnr,stepped";

impl IterationLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{},{},{:.6},{}",
            self.iter,
            self.total,
            self.photometric,
            self.distortion,
            self.normal,
            self.position,
            self.scale,
            self.isotropic,
            self.hand_surfels,
            self.object_surfels,
            self.psnr,
            self.stepped as u8,
        )
    }
}

pub struct TrainState {
    pub scene: SceneModel,
    pub opt: AdamState,
    pub accum: ScreenAccum,
    pub iter: usize,
}

/// Initializes the scene from the bundle: hand surfels sampled on the
/// first-frame template, object surfels on the seed cloud with scales
/// from the mean nearest-neighbor spacing, and a zero-offset refinement
/// net when enabled.
pub fn init_scene(bundle: &SceneBundle, cfg: &TrainConfig) -> Result<SceneModel> {
    let gray = bundle.mean_masked_gray();
    let mut hands = Vec::new();
    for (hi, (side, template)) in bundle.templates.iter().enumerate() {
        let params = HandInitParams {
            per_triangle: cfg.hand_k,
            variance: cfg.hand_variance,
            base_gray: gray,
            sh_degree: cfg.sh_degree,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 100 + hi as u64));
        let init = init_hand_surfels(&template.topology, &template.frames[0], *side, &params, &mut rng);
        hands.push(HandModel {
            side: *side,
            template: template.clone(),
            surfels: init.surfels,
            bindings: init.bindings,
        });
    }

    let mut objects = Vec::new();
    if !bundle.object_seed.is_empty() {
        let points: Vec<Vec3> = bundle.object_seed.iter().map(|(p, _)| *p).collect();
        // Mean nearest-neighbor spacing sets the initial footprint.
        let mut nn_sum = 0.0;
        for (i, p) in points.iter().enumerate() {
            let mut best = f64::INFINITY;
            for (j, q) in points.iter().enumerate() {
                if i != j {
                    best = best.min((p - q).norm_squared());
                }
            }
            if best.is_finite() {
                nn_sum += best.sqrt();
            }
        }
        let spacing = if points.len() > 1 { nn_sum / points.len() as f64 } else { 0.01 };
        let scale = (spacing * 0.7).max(1e-5);
        let basis = crate::model::sh_basis_len(cfg.sh_degree);
        let surfels: Vec<Surfel2D> = bundle
            .object_seed
            .iter()
            .map(|(p, c)| {
                let rgb = c.unwrap_or([gray; 3]);
                let mut sh = vec![[0.0; 3]; basis];
                sh[0] = crate::model::rgb_to_sh0(rgb);
                Surfel2D {
                    pos: *p,
                    rot: crate::geom::Quat::IDENTITY,
                    log_scales: [scale.ln(); 2],
                    opacity_logit: crate::model::logit(0.1),
                    sh,
                }
            })
            .collect();
        objects.push(ObjectModel {
            surfels,
            pose_track: vec![PoseSample::IDENTITY; bundle.frames()],
        });
    }

    let net = if cfg.refine {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 7_000));
        Some(RefinementNet::new(cfg.net, &mut rng))
    } else {
        None
    };

    Ok(SceneModel { hands, objects, net, sh_degree: cfg.sh_degree, frame_count: bundle.frames() })
}

fn downscale_camera(cam: &Camera, factor: usize) -> Camera {
    if factor <= 1 {
        return cam.clone();
    }
    let f = factor as f64;
    Camera {
        fx: cam.fx / f,
        fy: cam.fy / f,
        cx: cam.cx / f,
        cy: cam.cy / f,
        width: cam.width / factor,
        height: cam.height / factor,
        rot: cam.rot,
        trans: cam.trans,
    }
}

fn scene_extent(surfels: &[Surfel2D]) -> f64 {
    if surfels.is_empty() {
        return 1.0;
    }
    let mut lo = surfels[0].pos;
    let mut hi = surfels[0].pos;
    for s in surfels {
        for c in 0..3 {
            lo[c] = lo[c].min(s.pos[c]);
            hi[c] = hi[c].max(s.pos[c]);
        }
    }
    (hi - lo).norm().max(1e-6)
}

/// Runs the optimization; deterministic given the seed.
pub fn train(
    bundle: &SceneBundle,
    cfg: &TrainConfig,
    resume: Option<SceneModel>,
) -> Result<(TrainState, Vec<IterationLog>)> {
    let tau = cfg.tau.unwrap_or(bundle.manifest.tau);
    if tau <= 0.0 {
        return Err(Error::BadConfig { reason: "tau must be positive".into() });
    }
    let train_views: Vec<usize> =
        (0..bundle.views()).filter(|v| !cfg.holdout_views.contains(v)).collect();
    if train_views.is_empty() {
        return Err(Error::BadConfig { reason: "no training views left after holdout".into() });
    }

    // Pre-masked supervision targets and matching cameras.
    let bg = bundle.manifest.background;
    let factor = cfg.image_downscale.max(1);
    let cameras: Vec<Camera> =
        bundle.cameras.iter().map(|c| downscale_camera(c, factor)).collect();
    let targets: Vec<Vec<ImageRgb>> = (0..bundle.views())
        .map(|v| {
            (0..bundle.frames())
                .map(|f| {
                    let img = bundle.images[v][f].downscale(factor);
                    let mask = bundle.masks[v][f].downscale(factor);
                    masked_target(&img, Some(&mask), bg)
                })
                .collect()
        })
        .collect();

    let mut scene = match resume {
        Some(s) => s,
        None => init_scene(bundle, cfg)?,
    };
    let mut opt = AdamState::for_scene(&scene);
    let mut accum = ScreenAccum::for_scene(&scene);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xA11CE));
    let mut logs = Vec::with_capacity(cfg.iterations);

    let mut contact_cache: Option<(usize, Vec<usize>)> = None;
    let densify_end = (cfg.densify_end_frac * cfg.iterations as f64) as usize;

    for iter in 0..cfg.iterations {
        let view = train_views[rng.random_range(0..train_views.len())];
        let frame = rng.random_range(0..bundle.frames());
        let camera = &cameras[view];

        let composed = scene.compose(frame)?;
        let out = render(&composed.surfels, camera, bg, &cfg.raster, cfg.sh_degree);

        // Photometric loss and its image gradient.
        let target = &targets[view][frame];
        let mut color_grad = Some(Vec::new());
        let photo =
            loss_photometric(&out.color, target, cfg.weights.lambda_dssim, color_grad.as_mut())?;
        let mut img_grads = ImageGrads::zeros(out.width, out.height);
        img_grads.color = color_grad.unwrap();

        // Rendering-level regularizers.
        let l_d = loss_distortion(&out, cfg.weights.w_distortion, Some(&mut img_grads));
        let l_n = loss_normal(&out, camera, cfg.weights.w_normal, Some(&mut img_grads));

        // Contact-voxel set, refreshed periodically and after any change
        // in scene cardinality.
        let refresh = match &contact_cache {
            Some((len, _)) => *len != composed.surfels.len() || iter % cfg.contact_refresh == 0,
            None => true,
        };
        if refresh {
            let positions: Vec<Vec3> = composed.surfels.iter().map(|s| s.pos).collect();
            let cv = label_contact_voxels(&positions, &composed.tags, tau);
            contact_cache = Some((composed.surfels.len(), cv.surfels_in_contact));
        }
        let selected = &contact_cache.as_ref().unwrap().1;
        let l_i = loss_isotropic(&composed.surfels, selected, cfg.weights.tau_s);

        // Backward through the rasterizer, then direct per-surfel terms.
        let mut buf = render_backward(&composed.surfels, camera, bg, &cfg.raster, cfg.sh_degree, &img_grads);
        isotropic_backward(
            &composed.surfels,
            selected,
            cfg.weights.tau_s,
            cfg.weights.w_isotropic,
            &mut buf.surfels,
        );

        let mut grads = SceneGrads::zeros(&scene);
        scene.compose_backward(&composed, &buf.surfels, &mut grads);

        // Rigging hinges act on local attributes directly.
        let hand_total: usize = scene.hands.iter().map(|h| h.surfels.len()).sum();
        let mut l_p = 0.0;
        let mut l_s = 0.0;
        if hand_total > 0 {
            let inv = 1.0 / hand_total as f64;
            for (hi, hand) in scene.hands.iter().enumerate() {
                for (si, s) in hand.surfels.iter().enumerate() {
                    let (tp, ts, gp, gs) = rigging_penalties(s, cfg.weights.eps_p, cfg.weights.eps_s);
                    l_p += tp * inv;
                    l_s += ts * inv;
                    let g = &mut grads.hands[hi][si];
                    g.pos += cfg.weights.w_position * inv * gp;
                    g.log_scales[0] += cfg.weights.w_scale * inv * gs[0];
                    g.log_scales[1] += cfg.weights.w_scale * inv * gs[1];
                }
            }
        }

        let components = LossComponents {
            photometric: photo.total,
            distortion: l_d,
            normal: l_n,
            position: l_p,
            scale: l_s,
            isotropic: l_i,
        };
        let total = total_loss(&components, &cfg.weights)?;

        // Screen-gradient statistics feed density control.
        for (idx, source) in composed.sources.iter().enumerate() {
            if !buf.contributed[idx] {
                continue;
            }
            match *source {
                crate::model::SurfelSource::Hand { hand, surfel } => {
                    accum.hands[hand].0[surfel] += buf.screen_grad[idx];
                    accum.hands[hand].1[surfel] += 1;
                }
                crate::model::SurfelSource::Object { object, surfel } => {
                    accum.objects[object].0[surfel] += buf.screen_grad[idx];
                    accum.objects[object].1[surfel] += 1;
                }
            }
        }

        // Position lr decays exponentially to the configured ratio.
        let mut lr_now = cfg.lr;
        if cfg.position_lr_final_ratio < 1.0 && cfg.iterations > 1 {
            let p = iter as f64 / (cfg.iterations - 1) as f64;
            lr_now.position *= cfg.position_lr_final_ratio.powf(p);
        }
        let stepped = adam_step(&mut scene, &grads, &mut opt, &lr_now)?;
        if !stepped {
            eprintln!("iteration {iter}: non-finite gradient, step skipped");
        }

        if iter >= cfg.densify_start
            && iter < densify_end
            && (iter - cfg.densify_start) % cfg.densify_interval.max(1) == 0
        {
            let extent = scene_extent(&composed.surfels);
            let mut drng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xD0 + iter as u64));
            density_control(&mut scene, &mut opt, &mut accum, &cfg.densify, extent, &mut drng);
            contact_cache = None;
        }

        let rendered = ImageRgb::from_flat(out.width, out.height, out.color.clone());
        logs.push(IterationLog {
            iter,
            total,
            photometric: photo.total,
            distortion: l_d,
            normal: l_n,
            position: l_p,
            scale: l_s,
            isotropic: l_i,
            hand_surfels: scene.hands.iter().map(|h| h.surfels.len()).sum(),
            object_surfels: scene.objects.iter().map(|o| o.surfels.len()).sum(),
            psnr: psnr(&rendered, target),
            stepped,
        });
    }

    Ok((TrainState { scene, opt, accum, iter: cfg.iterations }, logs))
}

/// Renders one (view, frame) of a fitted scene with the bundle's camera.
pub fn render_scene_frame(
    scene: &SceneModel,
    bundle: &SceneBundle,
    view: usize,
    frame: usize,
    raster: &RasterConfig,
) -> Result<RenderOutput> {
    let camera = bundle
        .cameras
        .get(view)
        .ok_or(Error::FrameOutOfRange { frame: view, len: bundle.cameras.len() })?;
    let composed = scene.compose(frame)?;
    Ok(render(&composed.surfels, camera, bundle.manifest.background, raster, scene.sh_degree))
}

/// Mean PSNR/SSIM of the fitted scene over held-out views, all frames.
pub fn holdout_metrics(
    scene: &SceneModel,
    bundle: &SceneBundle,
    holdout: &[usize],
    raster: &RasterConfig,
) -> Result<(f64, f64)> {
    let mut p_sum = 0.0;
    let mut s_sum = 0.0;
    let mut n = 0usize;
    for &view in holdout {
        for frame in 0..bundle.frames() {
            let out = render_scene_frame(scene, bundle, view, frame, raster)?;
            let rendered = ImageRgb::from_flat(out.width, out.height, out.color);
            let target = &bundle.images[view][frame];
            p_sum += psnr(&rendered, target);
            s_sum += ssim(&rendered, target);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::BadConfig { reason: "no holdout views given".into() });
    }
    Ok((p_sum / n as f64, s_sum / n as f64))
}

/// Contact prediction over the whole sequence, per hand.
pub struct ContactPrediction {
    /// Indexed [hand][frame].
    pub per_frame: Vec<Vec<ContactMap>>,
    pub accumulated: Vec<AccumulatedContact>,
    pub labels: Vec<(HandSide, Vec<bool>)>,
    pub tau: f64,
    pub tau_v: f64,
}

/// Computes instantaneous contact maps for every frame, their
/// accumulation, and per-vertex template labels.
pub fn predict_contacts(scene: &SceneModel, tau: f64) -> Result<ContactPrediction> {
    let mut per_frame: Vec<Vec<ContactMap>> = vec![Vec::new(); scene.hands.len()];
    for t in 0..scene.frame_count {
        let composed = scene.compose(t)?;
        let object_positions: Vec<Vec3> =
            composed.object_indices().map(|i| composed.surfels[i].pos).collect();
        for (hi, range) in composed.hand_ranges.iter().enumerate() {
            let hand_positions: Vec<Vec3> =
                range.clone().map(|i| composed.surfels[i].pos).collect();
            per_frame[hi].push(instantaneous_contact_positions(
                &hand_positions,
                &object_positions,
                tau,
            ));
        }
    }
    let mut accumulated = Vec::new();
    let mut labels = Vec::new();
    for (hi, hand) in scene.hands.iter().enumerate() {
        let mut acc = accumulate(&per_frame[hi])?;
        acc.vertex_labels =
            project_to_template(&acc, &hand.bindings, &hand.template.topology);
        labels.push((hand.side, acc.vertex_labels.clone()));
        accumulated.push(acc);
    }
    Ok(ContactPrediction {
        per_frame,
        accumulated,
        labels,
        tau,
        tau_v: tau / 3f64.sqrt(),
    })
}

/// Per-hand IoU/F1 against ground-truth labels plus their means.
pub fn label_metrics(
    pred: &[(HandSide, Vec<bool>)],
    gt: &[(HandSide, Vec<bool>)],
) -> Result<(f64, f64, Vec<(HandSide, f64, f64)>)> {
    let mut per_hand = Vec::new();
    let mut iou_sum = 0.0;
    let mut f1_sum = 0.0;
    for (side, labels) in pred {
        let gt_labels = gt
            .iter()
            .find(|(s, _)| s == side)
            .map(|(_, l)| l)
            .ok_or(Error::BadConfig { reason: format!("no GT labels for hand {}", side.name()) })?;
        let (iou, f1) = crate::contact::contact_metrics(labels, gt_labels)?;
        per_hand.push((*side, iou, f1));
        iou_sum += iou;
        f1_sum += f1;
    }
    let n = per_hand.len().max(1) as f64;
    Ok((iou_sum / n, f1_sum / n, per_hand))
}
