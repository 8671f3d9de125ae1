use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use surfelcap::contact::contact_metrics;
use surfelcap::io::{
    self, heatmap_color, load_bundle, load_checkpoint, read_labels, save_bundle, save_checkpoint,
    write_json, write_pgm, write_pgm16, write_ppm, write_ppm_from_flat, AccumulatedHandJson,
    ContactFrameJson, ContactHandJson, ContactSequenceJson, HandMetricsJson, ImageGray, ImageRgb,
    LabelsJson, MetricsJson,
};
use surfelcap::model::{rgb_to_sh0, SceneModel};
use surfelcap::optim::{
    holdout_metrics, predict_contacts, train, TrainConfig, LOG_CSV_HEADER,
};
use surfelcap::render::{render, RasterConfig};
use surfelcap::synth::{generate, BulgeSpec, SceneKind, SynthSpec};

#[derive(Parser)]
#[command(name = "surfelcap", version, about = "Hand-object contact capture with 2D Gaussian surfels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view bundle with ground-truth contacts.
    GenSynth(GenSynthArgs),
    /// Fit surfels (and optionally the refinement net) to a bundle.
    Fit(FitArgs),
    /// Render a fitted checkpoint from a bundle camera.
    Render(RenderArgs),
    /// Estimate per-frame and accumulated contacts from a checkpoint.
    Contact(ContactArgs),
    /// Compare predicted and ground-truth contact labels; optionally
    /// report held-out-view PSNR/SSIM.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// gripper-sphere | paddle-box
    #[arg(long, default_value = "gripper-sphere")]
    kind: String,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, default_value_t = 8)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 0.004)]
    tau: f64,
    /// Final template-to-surface gap, meters.
    #[arg(long, default_value_t = 0.0005)]
    closing_gap: f64,
    /// Amplitude of the scripted time-varying vertex bulge; 0 disables.
    #[arg(long, default_value_t = 0.0)]
    bulge_amp: f64,
    #[arg(long, default_value_t = 0.015)]
    bulge_sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// JSON file with TrainConfig fields; flags override.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Comma-separated held-out view indices.
    #[arg(long)]
    views_holdout: Option<String>,
    /// Disable the refinement net.
    #[arg(long)]
    no_refine: bool,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    view: usize,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ContactArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    /// View used for the heatmap renders.
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// Skip heatmap images.
    #[arg(long)]
    no_heatmaps: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    views_holdout: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    scenes: usize,
}

fn parse_views(csv: &Option<String>) -> Result<Option<Vec<usize>>> {
    match csv {
        None => Ok(None),
        Some(s) => {
            let mut out = Vec::new();
            for tok in s.split(',').filter(|t| !t.trim().is_empty()) {
                out.push(tok.trim().parse::<usize>().context("bad view index")?);
            }
            Ok(Some(out))
        }
    }
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<()> {
    let kind = SceneKind::parse(&args.kind)
        .with_context(|| format!("unknown scene kind '{}'", args.kind))?;
    let spec = SynthSpec {
        kind,
        frames: args.frames,
        views: args.views,
        width: args.width,
        height: args.height,
        noise: args.noise,
        seed: args.seed,
        tau: args.tau,
        closing_gap: args.closing_gap,
        bulge: (args.bulge_amp > 0.0)
            .then_some(BulgeSpec { amplitude: args.bulge_amp, sigma: args.bulge_sigma }),
    };
    let out = generate(&spec)?;
    save_bundle(&args.out, &out.bundle)?;
    let labels = LabelsJson {
        schema_version: 1,
        tau: args.tau,
        hands: out
            .gt_vertex_contact
            .iter()
            .map(|(side, l)| (side.name().to_owned(), l.iter().map(|&b| b as u8).collect()))
            .collect(),
    };
    write_json(&args.out.join("gt_contact.json"), &labels)?;
    println!(
        "wrote bundle to {} ({} views x {} frames, {} GT contact vertices)",
        args.out.display(),
        args.views,
        args.frames,
        out.gt_vertex_contact[0].1.iter().filter(|&&b| b).count()
    );
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).context("reading config")?;
            serde_json::from_str(&text).context("parsing config")?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(tau) = args.tau {
        cfg.tau = Some(tau);
    }
    if let Some(iters) = args.iters {
        cfg.iterations = iters;
    }
    if let Some(views) = parse_views(&args.views_holdout)? {
        cfg.holdout_views = views;
    }
    if args.no_refine {
        cfg.refine = false;
    }

    let resume = match &args.resume {
        Some(path) => Some(load_checkpoint(path, &bundle)?),
        None => None,
    };

    fs::create_dir_all(&args.out).context("creating output directory")?;
    write_json(&args.out.join("config.json"), &cfg)?;

    let (state, logs) = train(&bundle, &cfg, resume)?;

    let mut csv = String::from(LOG_CSV_HEADER);
    csv.push('\n');
    for row in &logs {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    fs::write(args.out.join("log.csv"), csv).context("writing log")?;
    save_checkpoint(&args.out.join("checkpoint.bin"), &state.scene)?;

    if let Some(last) = logs.last() {
        println!(
            "fit finished: {} iterations, total loss {:.6}, {} hand + {} object surfels",
            logs.len(),
            last.total,
            last.hand_surfels,
            last.object_surfels
        );
    }
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let scene = load_checkpoint(&args.checkpoint, &bundle)?;
    if args.view >= bundle.views() {
        bail!("view {} out of range ({} views)", args.view, bundle.views());
    }
    let camera = &bundle.cameras[args.view];
    let composed = scene.compose(args.frame)?;
    let out = render(
        &composed.surfels,
        camera,
        bundle.manifest.background,
        &RasterConfig::default(),
        scene.sh_degree,
    );
    fs::create_dir_all(&args.out).context("creating output directory")?;
    let stem = format!("v{}_f{:05}", args.view, args.frame);
    write_ppm_from_flat(&args.out.join(format!("{stem}_color.ppm")), out.width, out.height, &out.color)?;
    let alpha = ImageGray { width: out.width, height: out.height, data: out.alpha.clone() };
    write_pgm(&args.out.join(format!("{stem}_alpha.pgm")), &alpha)?;
    let depth =
        ImageGray { width: out.width, height: out.height, data: out.normalized_depth() };
    write_pgm16(&args.out.join(format!("{stem}_depth.pgm")), &depth, 10000.0)?;
    // Normals mapped from [-1,1] to [0,1].
    let normal = ImageRgb {
        width: out.width,
        height: out.height,
        data: out
            .normal
            .iter()
            .map(|n| {
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                if len > 1e-9 {
                    [
                        0.5 + 0.5 * n[0] / len,
                        0.5 + 0.5 * n[1] / len,
                        0.5 + 0.5 * n[2] / len,
                    ]
                } else {
                    [0.5; 3]
                }
            })
            .collect(),
    };
    write_ppm(&args.out.join(format!("{stem}_normal.ppm")), &normal)?;
    println!("rendered view {} frame {} to {}", args.view, args.frame, args.out.display());
    Ok(())
}

fn cmd_contact(args: ContactArgs) -> Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let scene = load_checkpoint(&args.checkpoint, &bundle)?;
    let tau = args.tau.unwrap_or(bundle.manifest.tau);
    let pred = predict_contacts(&scene, tau)?;
    fs::create_dir_all(&args.out).context("creating output directory")?;

    let units = bundle.manifest.units.clone();
    for frame in 0..scene.frame_count {
        let hands: Vec<ContactHandJson> = scene
            .hands
            .iter()
            .enumerate()
            .map(|(hi, hand)| {
                let map = &pred.per_frame[hi][frame];
                ContactHandJson {
                    side: hand.side.name().to_owned(),
                    in_contact: map.entries.iter().map(|e| e.in_contact as u8).collect(),
                    distance: map
                        .entries
                        .iter()
                        .map(|e| e.distance.is_finite().then_some(e.distance))
                        .collect(),
                    nearest_object_surfel: map.entries.iter().map(|e| e.nearest).collect(),
                }
            })
            .collect();
        let doc = ContactFrameJson {
            schema_version: 1,
            frame,
            tau,
            tau_v: pred.tau_v,
            units: units.clone(),
            hands,
        };
        write_json(&args.out.join(format!("contact_{frame:05}.json")), &doc)?;
    }

    let seq = ContactSequenceJson {
        schema_version: 1,
        tau,
        tau_v: pred.tau_v,
        units: units.clone(),
        frames: scene.frame_count,
        hands: scene
            .hands
            .iter()
            .enumerate()
            .map(|(hi, hand)| AccumulatedHandJson {
                side: hand.side.name().to_owned(),
                ever_contact: pred.accumulated[hi].ever_contact.iter().map(|&b| b as u8).collect(),
                min_distance: pred.accumulated[hi]
                    .min_distance
                    .iter()
                    .map(|d| d.is_finite().then_some(*d))
                    .collect(),
                vertex_labels: pred.accumulated[hi].vertex_labels.iter().map(|&b| b as u8).collect(),
            })
            .collect(),
    };
    write_json(&args.out.join("contact_sequence.json"), &seq)?;

    let labels = LabelsJson {
        schema_version: 1,
        tau,
        hands: pred
            .labels
            .iter()
            .map(|(side, l)| (side.name().to_owned(), l.iter().map(|&b| b as u8).collect()))
            .collect(),
    };
    write_json(&args.out.join("labels.json"), &labels)?;

    if !args.no_heatmaps {
        render_heatmaps(&args.out, &bundle, &scene, &pred, args.view, tau)?;
    }
    println!(
        "contact maps for {} frames written to {} (tau = {} m)",
        scene.frame_count,
        args.out.display(),
        tau
    );
    Ok(())
}

/// Renders per-frame heatmaps: hand surfels colored by contact distance,
/// object surfels dimmed gray.
fn render_heatmaps(
    out_dir: &Path,
    bundle: &io::SceneBundle,
    scene: &SceneModel,
    pred: &surfelcap::optim::ContactPrediction,
    view: usize,
    tau: f64,
) -> Result<()> {
    if view >= bundle.views() {
        bail!("heatmap view {} out of range", view);
    }
    let camera = &bundle.cameras[view];
    for frame in 0..scene.frame_count {
        let composed = scene.compose(frame)?;
        let mut colored = composed.surfels.clone();
        for (hi, range) in composed.hand_ranges.iter().enumerate() {
            let map = &pred.per_frame[hi][frame];
            for (k, idx) in range.clone().enumerate() {
                colored[idx].sh = vec![rgb_to_sh0(heatmap_color(map.entries[k].distance, tau))];
            }
        }
        for idx in composed.object_indices() {
            colored[idx].sh = vec![rgb_to_sh0([0.45, 0.45, 0.45])];
        }
        let out = render(
            &colored,
            camera,
            bundle.manifest.background,
            &RasterConfig::default(),
            0,
        );
        write_ppm_from_flat(
            &out_dir.join(format!("heatmap_{frame:05}.ppm")),
            out.width,
            out.height,
            &out.color,
        )?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let pred = read_labels(&args.pred)?;
    let gt = read_labels(&args.gt)?;
    let mut per_hand = std::collections::BTreeMap::new();
    let mut iou_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut n = 0usize;
    for (side, labels) in &pred.hands {
        let gt_labels = gt
            .hands
            .get(side)
            .with_context(|| format!("ground truth lacks hand '{side}'"))?;
        let pb: Vec<bool> = labels.iter().map(|&v| v != 0).collect();
        let gb: Vec<bool> = gt_labels.iter().map(|&v| v != 0).collect();
        let (iou, f1) = contact_metrics(&pb, &gb)?;
        per_hand.insert(side.clone(), HandMetricsJson { iou, f1 });
        iou_sum += iou;
        f1_sum += f1;
        n += 1;
    }
    if n == 0 {
        bail!("no hands in predicted labels");
    }

    let holdout = parse_views(&args.views_holdout)?.unwrap_or_default();
    let (psnr, ssim) = match (&args.bundle, &args.checkpoint) {
        (Some(bp), Some(cp)) if !holdout.is_empty() => {
            let bundle = load_bundle(bp)?;
            let scene = load_checkpoint(cp, &bundle)?;
            let (p, s) = holdout_metrics(&scene, &bundle, &holdout, &RasterConfig::default())?;
            (Some(p), Some(s))
        }
        _ => (None, None),
    };

    let metrics = MetricsJson {
        schema_version: 1,
        tau: pred.tau,
        units: "meters".into(),
        miou: iou_sum / n as f64,
        f1: f1_sum / n as f64,
        per_hand,
        psnr,
        ssim,
        holdout_views: holdout,
    };
    write_json(&args.out, &metrics)?;
    println!(
        "mIoU {:.4}  F1 {:.4}{}",
        metrics.miou,
        metrics.f1,
        match (metrics.psnr, metrics.ssim) {
            (Some(p), Some(s)) => format!("  PSNR {p:.2} dB  SSIM {s:.4}"),
            _ => String::new(),
        }
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let report = surfelcap::gradcheck::run_all(args.seed, args.scenes)?;
    for s in &report.suites {
        println!(
            "{:22} scenes={:3} params={:7} max_rel_err={:.3e}  {}",
            s.name,
            s.scenes,
            s.params,
            s.max_rel_err,
            if s.passed() { "ok" } else { "FAIL" }
        );
    }
    if !report.all_passed() {
        bail!("gradient check failed");
    }
    println!("all gradient suites passed (tolerance {:.0e})", surfelcap::gradcheck::REL_TOLERANCE);
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Render(args) => cmd_render(args),
        Command::Contact(args) => cmd_contact(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    if let Err(err) = result {
        eprintln!("{}", serde_json::json!({ "error": format!("{err:#}") }));
        std::process::exit(1);
    }
}
