use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use irmap::config::{GridSpec, LayerRange, RunConfig};
use irmap::features::FeatureId;
use irmap::geometry::{read_stl, voxelize_parts, DEFAULT_PITCH_UM};
use irmap::pipeline::{manifest_path_for, run_pipeline};
use irmap::radiometry::{fit_emissivity, fit_window_transmission, CalibrationProfile};
use irmap::simulator::{simulate_to_dir, Simulation};
use irmap::spatial::{correction_homography, parse_correspondences};
use irmap::store::{write_voxel_cache, ExportFormat, VoxelFeatureStore};
use irmap::{Error, Result};

#[derive(Parser)]
#[command(name = "irmap", version, about = "Infrared layer monitoring for powder bed fusion builds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the config-driven subcommands. They override the file.
#[derive(Args, Default)]
struct RunFlags {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Half-open layer range such as `0..20`.
    #[arg(long)]
    layers: Option<String>,
    /// Comma-separated feature names.
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the raw-to-corrected homography from plate marker correspondences.
    CalibrateSpatial {
        #[command(flatten)]
        run: RunFlags,
        /// `world_x_mm,world_y_mm,image_x_px,image_y_px` lines.
        #[arg(long)]
        points: Option<PathBuf>,
    },
    /// Fit emissivity or window transmission from reference measurements.
    CalibrateThermal {
        /// `counts,reference_c` lines.
        #[arg(long, required_unless_present = "window")]
        samples: Option<PathBuf>,
        /// Surface the samples were taken on: powder or printed.
        #[arg(long, default_value = "powder")]
        surface: String,
        /// `counts_through_window,counts_direct,reference_c` lines.
        #[arg(long, conflicts_with = "samples")]
        window: Option<PathBuf>,
        /// Profile to start from; defaults otherwise.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Voxelize STL parts at camera pitch and write a voxel cache.
    Voxelize {
        #[command(flatten)]
        run: RunFlags,
        /// STL files; taken from the config when omitted.
        stl: Vec<PathBuf>,
        #[arg(long)]
        pitch_um: Option<f64>,
        #[arg(long)]
        layer_um: Option<f64>,
    },
    /// Render the configured simulation into a directory of frame stacks.
    Simulate {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Run the full extraction and write the feature store and manifest.
    Extract {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Export one layer of one feature as CSV, VTK or a PGM heat map.
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        layer: u32,
        #[arg(long)]
        feature: String,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Destination file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a store and its manifest.
    Report {
        #[arg(long)]
        store: PathBuf,
    },
}

fn load_config(flags: &RunFlags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(l) = &flags.layers {
        cfg.layers = Some(l.clone());
    }
    if let Some(f) = &flags.features {
        cfg.features = Some(f.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect());
    }
    if let Some(j) = flags.jobs {
        cfg.jobs = j;
    }
    if flags.seed.is_some() {
        cfg.seed = flags.seed;
    }
    if let Some(o) = &flags.out {
        // Relative flag paths are relative to the working directory.
        cfg.paths.output = Some(std::path::absolute(o).map_err(|e| Error::io(o, e))?);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_out(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::write(p, bytes).map_err(|e| Error::io(p, e))
        }
        None => std::io::stdout().write_all(bytes).map_err(|e| Error::io(Path::new("<stdout>"), e)),
    }
}

fn parse_rows<const N: usize>(text: &str, what: &str) -> Result<Vec<[f64; N]>> {
    let mut rows = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != N {
            return Err(Error::Config(format!("{what} line {}: expected {N} fields", n + 1)));
        }
        let mut row = [0.0; N];
        for (slot, f) in row.iter_mut().zip(&fields) {
            *slot = f
                .parse()
                .map_err(|_| Error::Config(format!("{what} line {}: bad number {f:?}", n + 1)))?;
        }
        rows.push(row);
    }
    Ok(rows)
}

fn calibrate_spatial(run: &RunFlags, points: Option<&Path>) -> Result<()> {
    let cfg = load_config(run)?;
    let path = match points {
        Some(p) => p.to_path_buf(),
        None => cfg
            .paths
            .correspondences
            .as_ref()
            .map(|p| cfg.resolve(p))
            .ok_or_else(|| Error::Config("pass --points or set paths.correspondences".into()))?,
    };
    let corr = parse_correspondences(&read_text(&path)?)?;
    let grid = cfg.grid.unwrap_or_default().frame()?;
    let est = correction_homography(&corr, &grid)?;
    eprintln!("{} markers, max residual {:.3} px", corr.len(), est.max_residual);
    let mut text = String::from("# raw pixel -> corrected pixel\nhomography = [\n");
    for r in est.homography.rows() {
        text.push_str(&format!("  [{:e}, {:e}, {:e}],\n", r[0], r[1], r[2]));
    }
    text.push_str(&format!("]\nmax_residual_px = {:e}\n", est.max_residual));
    write_out(run.out.as_deref(), text.as_bytes())
}

fn calibrate_thermal(
    samples: Option<&Path>,
    surface: &str,
    window: Option<&Path>,
    profile: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let mut prof = match profile {
        Some(p) => CalibrationProfile::from_toml(&read_text(p)?)?,
        None => CalibrationProfile::default(),
    };
    if let Some(w) = window {
        let rows = parse_rows::<3>(&read_text(w)?, "window sample")?;
        let paired: Vec<(f64, f64, f64)> = rows.iter().map(|r| (r[0], r[1], r[2])).collect();
        let fit = fit_window_transmission(&paired, &prof)?;
        eprintln!("window transmission {:.4} (residual {:.2} °C)", fit.value, fit.residual_std_c);
        prof.window_transmission = fit.value;
    } else if let Some(s) = samples {
        let rows = parse_rows::<2>(&read_text(s)?, "sample")?;
        let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r[0], r[1])).collect();
        let fit = fit_emissivity(&pairs, &prof)?;
        eprintln!("{surface} emissivity {:.4} (residual {:.2} °C)", fit.value, fit.residual_std_c);
        match surface {
            "powder" => prof.emissivity_powder = fit.value,
            "printed" => prof.emissivity_printed = fit.value,
            other => return Err(Error::Config(format!("unknown surface {other:?}; expected powder or printed"))),
        }
    }
    prof.validate()?;
    write_out(out, prof.to_toml().as_bytes())
}

fn voxelize_cmd(run: &RunFlags, stl: &[PathBuf], pitch_um: Option<f64>, layer_um: Option<f64>) -> Result<()> {
    let cfg = load_config(run)?;
    let files: Vec<PathBuf> = if stl.is_empty() {
        cfg.paths.stl.iter().map(|p| cfg.resolve(p)).collect()
    } else {
        stl.to_vec()
    };
    if files.is_empty() {
        return Err(Error::Config("no STL files given".into()));
    }
    let pitch = pitch_um.or(cfg.grid.map(|g: GridSpec| g.pitch_um)).unwrap_or(DEFAULT_PITCH_UM[0]);
    let thickness = layer_um.or(cfg.layer_thickness_um).unwrap_or(irmap::pipeline::DEFAULT_LAYER_THICKNESS_UM);
    let parts = files
        .iter()
        .map(|p| {
            if !p.exists() {
                return Err(Error::MissingPath(p.clone()));
            }
            let name = p.file_stem().map_or("part".into(), |s| s.to_string_lossy().into_owned());
            Ok((name, read_stl(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let vox = voxelize_parts(&parts, [pitch, pitch, thickness], None)?;
    let out = run
        .out
        .clone()
        .or(cfg.paths.voxel_cache.as_ref().map(|p| cfg.resolve(p)))
        .ok_or_else(|| Error::Config("pass --out or set paths.voxel_cache".into()))?;
    let bytes = write_voxel_cache(&vox, &out)?;
    let [nx, ny, nz] = vox.dims();
    println!(
        "{} parts, {nx}x{ny}x{nz} voxels, {} occupied, {bytes} bytes -> {}",
        vox.parts().len(),
        vox.occupied_count(),
        out.display()
    );
    Ok(())
}

fn simulate_cmd(run: &RunFlags) -> Result<()> {
    let cfg = load_config(run)?;
    let spec = cfg
        .paths
        .simulation
        .as_ref()
        .map(|p| cfg.resolve(p))
        .ok_or_else(|| Error::Config("paths.simulation is not set".into()))?;
    if !spec.exists() {
        return Err(Error::MissingPath(spec));
    }
    let mut sim = Simulation::load(&spec)?;
    if let Some(s) = cfg.seed {
        sim.spec.seed = s;
    }
    if let Some(r) = cfg.layer_range()? {
        sim.spec.layers = Some(r.end.min(sim.layer_count()));
    }
    let dir = run.out.clone().unwrap_or_else(|| cfg.resolve(Path::new("out/frames")));
    let truths = simulate_to_dir(&sim, &dir)?;
    let events: usize = truths.iter().map(|t| t.spatter_events.len()).sum();
    println!("{} layers, {events} spatter events -> {}", truths.len(), dir.display());
    Ok(())
}

fn extract_cmd(run: &RunFlags) -> Result<()> {
    let cfg = load_config(run)?;
    let out = run_pipeline(&cfg)?;
    let spatters: usize = out.layers.iter().map(|l| l.spatters.len()).sum();
    println!(
        "{} layers, {spatters} spatters, reduction {:.4}{} -> {}",
        out.layers.len(),
        out.report.ratio,
        if out.report.meets_claim() { "" } else { " (below 0.99)" },
        out.store_path.display()
    );
    Ok(())
}

fn feature_code(name: &str) -> Result<u8> {
    if let Ok(code) = name.parse::<u8>() {
        return Ok(code);
    }
    name.parse::<FeatureId>().map(FeatureId::code)
}

fn export_cmd(store: &Path, layer: u32, feature: &str, format: &str, out: Option<&Path>) -> Result<()> {
    let format: ExportFormat = format.parse()?;
    let code = feature_code(feature)?;
    if !store.exists() {
        return Err(Error::MissingPath(store.to_path_buf()));
    }
    let s = VoxelFeatureStore::read(store)?;
    write_out(out, &format.export(&s, layer, code)?)
}

fn report_cmd(store: &Path) -> Result<()> {
    if !store.exists() {
        return Err(Error::MissingPath(store.to_path_buf()));
    }
    let s = VoxelFeatureStore::read(store)?;
    let [nx, ny, nz] = s.header.dims;
    println!("store {}", store.display());
    println!("  dims {nx}x{ny}x{nz}, pitch {:?} um, {} parts", s.header.pitch_um, s.header.parts.len());
    let layers = s.layers();
    if let (Some(a), Some(b)) = (layers.first(), layers.last()) {
        println!("  layers {}", LayerRange { start: *a as usize, end: *b as usize + 1 });
    }
    let mut ids: Vec<u8> = s.blocks.iter().map(|b| b.feature_id).filter(|&f| f < 0xFE).collect();
    ids.sort_unstable();
    ids.dedup();
    for id in ids {
        let blocks: Vec<_> = s.blocks.iter().filter(|b| b.feature_id == id).collect();
        let total: usize = blocks.iter().map(|b| b.entries.len()).sum();
        let valid: usize = blocks.iter().map(|b| b.entries.iter().filter(|e| !e.1.is_nan()).count()).sum();
        let name = FeatureId::from_code(id).map_or_else(|| format!("feature_{id}"), |f| f.name().to_string());
        println!("  {name:<20} {valid:>8} valid of {total:>8} entries in {} layers", blocks.len());
    }
    let manifest = manifest_path_for(store);
    if manifest.exists() {
        let text = read_text(&manifest)?;
        let doc: toml::Table = text.parse().map_err(|e| Error::Format(format!("{}: {e}", manifest.display())))?;
        if let Some(r) = doc.get("reduction").and_then(|v| v.as_table()) {
            println!(
                "  raw {} bytes, stored {} bytes, reduction {:.4}",
                r.get("raw_bytes").and_then(|v| v.as_integer()).unwrap_or(0),
                r.get("stored_bytes").and_then(|v| v.as_integer()).unwrap_or(0),
                r.get("ratio").and_then(|v| v.as_float()).unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::CalibrateSpatial { run, points } => calibrate_spatial(&run, points.as_deref()),
        Command::CalibrateThermal {
            samples,
            surface,
            window,
            profile,
            out,
        } => calibrate_thermal(samples.as_deref(), &surface, window.as_deref(), profile.as_deref(), out.as_deref()),
        Command::Voxelize {
            run,
            stl,
            pitch_um,
            layer_um,
        } => voxelize_cmd(&run, &stl, pitch_um, layer_um),
        Command::Simulate { run } => simulate_cmd(&run),
        Command::Extract { run } => extract_cmd(&run),
        Command::Export {
            store,
            layer,
            feature,
            format,
            out,
        } => export_cmd(&store, layer, &feature, &format, out.as_deref()),
        Command::Report { store } => report_cmd(&store),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("irmap: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}
