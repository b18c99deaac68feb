use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use splatprop::densify::{geometric_filter, FilterConfig};
use splatprop::grid::Grid;
use splatprop::io::{
    generate_synthetic, init_cloud_from_points, read_pfm_gray, read_pfm_rgb, read_ply, read_ppm, write_pfm_gray, write_pfm_rgb, write_ppm,
    Scene, SyntheticSceneSpec,
};
use splatprop::loss::{psnr, ssim};
use splatprop::propagation::{nearest_views, propagate, MatchView, PropagationConfig};
use splatprop::render::{render, GeoMaps};
use splatprop::train::{train, TrainConfig};

/// Gaussian splatting with plane-propagation guided densification.
#[derive(Parser)]
#[command(name = "splatprop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planar scene from a JSON spec.
    Synth { spec: PathBuf, out: PathBuf },
    /// Train from a scene directory's sparse points.
    Train {
        scene: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one view of a cloud; writes color, depth, normal and alpha maps.
    Render {
        cloud: PathBuf,
        scene: PathBuf,
        #[arg(long)]
        view: u32,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Propagate rendered depth/normal maps of every view and filter them.
    Propagate {
        scene: PathBuf,
        maps: PathBuf,
        #[arg(long, default_value_t = 3)]
        iters: usize,
        /// Output directory (defaults to `maps`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare same-named PPM images of two directories.
    Eval { a: PathBuf, b: PathBuf },
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
enum Failure {
    Data(String),
    Numerical(String),
}

impl From<splatprop::Error> for Failure {
    fn from(e: splatprop::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn print_json(value: &impl Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("results serialise"));
}

fn synth(spec: &Path, out: &Path) -> CliResult<()> {
    let spec: SyntheticSceneSpec = read_json(spec)?;
    let scene = generate_synthetic(&spec)?;
    scene.write(out)?;
    log::info!("wrote {} views and {} points to {}", scene.views.len(), scene.points.len(), out.display());
    Ok(())
}

fn train_cmd(scene: &Path, config: &Path, out: &Path) -> CliResult<()> {
    let cfg: TrainConfig = read_json(config)?;
    let scene = Scene::load(scene)?;
    let cloud = init_cloud_from_points(&scene.points, scene.camera_extent())?;
    let outcome = train(&scene, cloud, &cfg, Some(out))?;
    print_json(&outcome.report);
    Ok(())
}

fn render_cmd(cloud: &Path, scene: &Path, id: u32, out: &Path) -> CliResult<()> {
    let cloud = read_ply(cloud)?;
    let scene = Scene::load(scene)?;
    let view = scene.view_by_id(id).ok_or_else(|| Failure::Data(format!("scene has no view with id {id}")))?;
    let maps = render(&view.camera, &cloud);
    fs::create_dir_all(out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    let stem = view.stem();
    let color = out.join(format!("{stem}.ppm"));
    write_ppm(&color, &maps.color)?;
    write_pfm_gray(out.join(format!("{stem}.depth.pfm")), &maps.depth)?;
    write_pfm_rgb(out.join(format!("{stem}.normal.pfm")), &maps.normal)?;
    write_pfm_gray(out.join(format!("{stem}.alpha.pfm")), &maps.alpha)?;
    println!("{}", color.display());
    Ok(())
}

#[derive(Serialize)]
struct PropagateSummary {
    view: u32,
    propagated: usize,
    filtered: usize,
}

fn load_maps(dir: &Path, stem: &str) -> CliResult<GeoMaps> {
    let depth = read_pfm_gray(dir.join(format!("{stem}.depth.pfm")))?;
    let normal = read_pfm_rgb(dir.join(format!("{stem}.normal.pfm")))?;
    let alpha_path = dir.join(format!("{stem}.alpha.pfm"));
    let alpha = if alpha_path.exists() {
        read_pfm_gray(&alpha_path)?
    } else {
        depth.map(|d| if *d > 0.0 { 1.0 } else { 0.0 })
    };
    if !depth.same_shape(&normal) || !depth.same_shape(&alpha) {
        return Err(Failure::Data(format!("{}: depth, normal and alpha maps of {stem} differ in size", dir.display())));
    }
    let mut maps = GeoMaps::empty(depth.width, depth.height);
    maps.depth = depth;
    maps.normal = normal;
    maps.alpha = alpha;
    Ok(maps)
}

fn propagate_cmd(scene: &Path, maps_dir: &Path, iters: usize, out: &Path) -> CliResult<()> {
    let scene = Scene::load(scene)?;
    let cfg = PropagationConfig {
        iterations: iters,
        ..Default::default()
    };
    cfg.validate()?;
    let cams = scene.cameras();
    let mut propagated = Vec::with_capacity(scene.views.len());
    for (i, view) in scene.views.iter().enumerate() {
        let rendered = load_maps(maps_dir, &view.stem())?;
        let sources: Vec<MatchView> = nearest_views(&cams, i, cfg.num_neighbor_views)
            .into_iter()
            .map(|j| MatchView::new(cams[j], &scene.views[j].image))
            .collect();
        propagated.push(propagate(&MatchView::new(view.camera, &view.image), &sources, &rendered, &cfg)?);
    }
    let filtered = geometric_filter(&cams, &propagated, &FilterConfig::default())?;
    fs::create_dir_all(out).map_err(|e| Failure::Data(format!("{}: {e}", out.display())))?;
    let mut summary = Vec::new();
    for ((view, p), f) in scene.views.iter().zip(&propagated).zip(&filtered) {
        let stem = view.stem();
        write_pfm_gray(out.join(format!("{stem}.prop_depth.pfm")), &f.depth)?;
        write_pfm_rgb(out.join(format!("{stem}.prop_normal.pfm")), &f.normal)?;
        let valid: Grid<f64> = f.valid.map(|v| if *v { 1.0 } else { 0.0 });
        write_pfm_gray(out.join(format!("{stem}.prop_valid.pfm")), &valid)?;
        summary.push(PropagateSummary {
            view: view.id,
            propagated: p.valid_count(),
            filtered: f.valid_count(),
        });
    }
    print_json(&summary);
    Ok(())
}

#[derive(Serialize)]
struct ImageScore {
    name: String,
    psnr: f64,
    ssim: f64,
}

#[derive(Serialize)]
struct EvalReport {
    images: Vec<ImageScore>,
    mean_psnr: f64,
    mean_ssim: f64,
}

fn ppm_names(dir: &Path) -> CliResult<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".ppm") {
            names.insert(name);
        }
    }
    Ok(names)
}

fn eval_cmd(a: &Path, b: &Path) -> CliResult<()> {
    let (na, nb) = (ppm_names(a)?, ppm_names(b)?);
    let common: Vec<&String> = na.intersection(&nb).collect();
    if common.is_empty() {
        return Err(Failure::Data(format!("no PPM images shared by {} and {}", a.display(), b.display())));
    }
    let mut images = Vec::with_capacity(common.len());
    for name in common {
        let (x, y) = (read_ppm(a.join(name))?, read_ppm(b.join(name))?);
        images.push(ImageScore {
            name: name.clone(),
            psnr: psnr(&x, &y)?,
            ssim: ssim(&x, &y)?,
        });
    }
    let n = images.len() as f64;
    let report = EvalReport {
        mean_psnr: images.iter().map(|s| s.psnr).sum::<f64>() / n,
        mean_ssim: images.iter().map(|s| s.ssim).sum::<f64>() / n,
        images,
    };
    print_json(&report);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { spec, out } => synth(&spec, &out),
        Command::Train { scene, config, out } => train_cmd(&scene, &config, &out),
        Command::Render { cloud, scene, view, out } => render_cmd(&cloud, &scene, view, &out),
        Command::Propagate { scene, maps, iters, out } => {
            let out = out.unwrap_or_else(|| maps.clone());
            propagate_cmd(&scene, &maps, iters, &out)
        }
        Command::Eval { a, b } => eval_cmd(&a, &b),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical error: {msg}");
            ExitCode::from(3)
        }
    }
}
