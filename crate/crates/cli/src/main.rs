//! `cavanc`: command-line front end for the EMI coupling and suppression
//! simulation pipeline.
//!
//! Every output file embeds the SHA-256 hash of the resolved configuration
//! (and the seed) in its header, so any artifact can be traced back to the
//! exact run that produced it.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing input files.

use cavanc_core::anc::spatial_cancellation_report;
use cavanc_core::cavity::{coupling_scale, CavityField};
use cavanc_core::coil::realize_coil;
use cavanc_core::error::CoreError;
use cavanc_core::fusion::{fuse, noise_profile_1d, reconstruct, snr_db, ComplexImage};
use cavanc_core::kspace::{read_kspace, write_kspace, KSpaceMatrix};
use cavanc_core::post::{apply_cancellation, estimate_transfer, BandPartition, TransferModel};
use cavanc_core::scenario::{
    build_channels, flux_summary, run_pipeline, spatial_stage, ScenarioConfig,
};
use cavanc_core::C64;
use clap::{Parser, Subcommand, ValueEnum};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cavanc", version, about = "EMI coupling and dual-stage suppression laboratory")]
struct Cli {
    /// Scenario configuration JSON; omitting it selects a preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config/preset value.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output (and, for consumers, input) directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Built-in scenario used when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Default)]
    preset: Preset,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    StrongEmi,
}

#[derive(Subcommand)]
enum Cmd {
    /// Emit cavity-field profiles through the center plus a model summary.
    MapField,
    /// Sweep the incidence angle 0..90 degrees in 15 degree steps.
    SweepAngle,
    /// Run the acquisition pipeline and write k-space files per condition.
    Simulate,
    /// Re-run reference-based post-processing on a simulated directory.
    Denoise,
    /// Solve the spatial cancellation drive and report the residual field.
    AncTune,
    /// Fuse the two final channel images from a simulated directory.
    Fuse,
    /// Compute metrics, images and noise traces from a simulated directory.
    Report,
}

/// Error with the process exit code it maps to.
struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn missing(files: &[String]) -> CliError {
        CliError { code: 3, msg: format!("missing inputs: {}", files.join(", ")) }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> CliError {
        let code = match &e {
            CoreError::Config(_) | CoreError::InvalidSpec(_) | CoreError::Provenance(_) => 2,
            CoreError::MissingInput(_) => 3,
            CoreError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
            _ => 1,
        };
        CliError { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::from(CoreError::Io(e))
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let dir = out_dir(cli, &cfg);
    match cli.cmd {
        Cmd::MapField => cmd_map_field(&cfg, &dir),
        Cmd::SweepAngle => cmd_sweep_angle(&cfg, &dir),
        Cmd::Simulate => cmd_simulate(&cfg, &dir),
        Cmd::Denoise => cmd_denoise(&cfg, &dir),
        Cmd::AncTune => cmd_anc_tune(&cfg, &dir),
        Cmd::Fuse => cmd_fuse(&cfg, &dir),
        Cmd::Report => cmd_report(&cfg, &dir),
    }
}

/// Resolve the scenario: config file if given, preset otherwise, then the
/// seed override. Nothing is written before this succeeds, so a malformed
/// config never leaves partial outputs behind.
fn load_config(cli: &Cli) -> CliResult<ScenarioConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    CliError::missing(&[path.display().to_string()])
                } else {
                    CliError::from(e)
                }
            })?;
            ScenarioConfig::from_json(&text)?
        }
        None => {
            let seed = cli.seed.unwrap_or(42);
            match cli.preset {
                Preset::Default => ScenarioConfig::default_preset(seed),
                Preset::StrongEmi => ScenarioConfig::strong_emi_preset(seed),
            }
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &ScenarioConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("cavanc-out"))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)?;
    Ok(())
}

fn trace_line(cfg: &ScenarioConfig) -> String {
    format!("# config_hash={} seed={}", cfg.hash(), cfg.seed)
}

/// 16-bit binary PGM, normalized to the image maximum; the config hash
/// rides in a comment line.
fn write_pgm(path: &Path, img: &[f64], n_read: usize, n_phase: usize, trace: &str) -> CliResult<()> {
    let max = img.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
    let mut buf = Vec::with_capacity(64 + 2 * img.len());
    write!(buf, "P5\n{trace}\n{n_read} {n_phase}\n65535\n").expect("vec write");
    for v in img {
        let q = (v * scale).round().clamp(0.0, 65535.0) as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn c_pair(c: C64) -> serde_json::Value {
    serde_json::json!([c.re, c.im])
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn cmd_map_field(cfg: &ScenarioConfig, dir: &Path) -> CliResult<()> {
    let field = CavityField::new(cfg.cavity, cfg.incidence)?;
    let trace = trace_line(cfg);
    fs::create_dir_all(dir)?;

    let profile = |path: &Path, axis: &str, points: &[(f64, f64, f64)]| -> CliResult<()> {
        let mut text = format!("{trace}\n{axis},hx,hy\n");
        for &(x, y, z) in points {
            let h = field.components_unchecked(cavanc_core::geom::Vec3::new(x, y, z));
            let coord = if axis == "y" { y } else { x };
            text.push_str(&format!("{coord},{},{}\n", h[0].re, h[1].re));
        }
        write_text(path, &text)
    };
    let ys: Vec<(f64, f64, f64)> = linspace(-cfg.cavity.ly / 2.0, cfg.cavity.ly / 2.0, 119)
        .into_iter()
        .map(|y| (0.0, y, 0.0))
        .collect();
    let xs: Vec<(f64, f64, f64)> = linspace(-cfg.cavity.lx / 2.0, cfg.cavity.lx / 2.0, 119)
        .into_iter()
        .map(|x| (x, 0.0, 0.0))
        .collect();
    profile(&dir.join("profile_y.csv"), "y", &ys)?;
    profile(&dir.join("profile_x.csv"), "x", &xs)?;

    let opening = field
        .components_unchecked(cavanc_core::geom::Vec3::new(cfg.cavity.lx / 2.0, 0.0, 0.0));
    let summary = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "alpha_per_m": field.alpha(),
        "wavelength_m": cfg.cavity.wavelength(),
        "quasi_static_valid": cfg.cavity.quasi_static_valid(),
        "coupling_scale": coupling_scale(&cfg.incidence)?,
        "hy_at_opening_center": opening[1].re,
        "decay_ratio_per_0p2m": (-field.alpha() * 0.2).exp(),
    });
    write_text(&dir.join("field_summary.json"), &pretty(&summary))
}

fn cmd_sweep_angle(cfg: &ScenarioConfig, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let trace = trace_line(cfg);
    let ys = linspace(-cfg.cavity.ly / 2.0, cfg.cavity.ly / 2.0, 61);
    let mut entries = Vec::new();
    let mut peaks = Vec::new();
    for k in 0..=6u32 {
        let angle = 15.0 * k as f64;
        let mut inc = cfg.incidence;
        inc.angle_deg = angle;
        let field = CavityField::new(cfg.cavity, inc)?;
        let hy: Vec<f64> = ys
            .iter()
            .map(|&y| field.components_unchecked(cavanc_core::geom::Vec3::new(0.0, y, 0.0))[1].re)
            .collect();
        let peak = hy.iter().cloned().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut text = format!("{trace}\n# angle_deg={angle}\ny,hy,hy_normalized\n");
        for (&y, &v) in ys.iter().zip(&hy) {
            let norm = if peak > 0.0 { v / peak } else { 0.0 };
            text.push_str(&format!("{y},{v},{norm}\n"));
        }
        write_text(&dir.join(format!("profile_theta_{:03}.csv", angle as u32)), &text)?;
        entries.push(serde_json::json!({
            "angle_deg": angle,
            "coupling_scale": coupling_scale(&inc)?,
            "peak_hy": peak,
        }));
        peaks.push(peak);
    }
    let monotone = peaks.windows(2).all(|w| w[1] < w[0]);
    let summary = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "angles": entries,
        "monotone_decreasing": monotone,
    });
    write_text(&dir.join("sweep_summary.json"), &pretty(&summary))
}

/// The condition files `simulate` emits for the given toggles, per channel.
fn condition_names(cfg: &ScenarioConfig) -> Vec<&'static str> {
    let mut names = vec!["raw"];
    if cfg.post_anc {
        names.push("post");
    }
    if cfg.spatial_anc {
        names.push("spatial");
    }
    if cfg.post_anc && cfg.spatial_anc {
        names.push("combined");
    }
    names
}

fn cmd_simulate(cfg: &ScenarioConfig, dir: &Path) -> CliResult<()> {
    let out = run_pipeline(cfg)?;
    fs::create_dir_all(dir)?;
    write_text(&dir.join("config.json"), &pretty(&serde_json::to_value(cfg).expect("config")))?;
    write_text(&dir.join("report.json"), &pretty(&serde_json::to_value(&out.report).expect("report")))?;

    let mut files: Vec<(String, &KSpaceMatrix)> = Vec::new();
    for (name, set) in [("saddle", &out.saddle), ("solenoid", &out.solenoid)] {
        for cond in condition_names(cfg) {
            let (k, kn) = match cond {
                "raw" => (&set.raw, &set.raw_noise),
                "post" => (&set.post, &set.post_noise),
                "spatial" => (&set.spatial, &set.spatial_noise),
                _ => (&set.combined, &set.combined_noise),
            };
            files.push((format!("{name}_{cond}"), k));
            files.push((format!("{name}_{cond}_noise"), kn));
        }
    }
    for (spec, k) in cfg.refs.iter().zip(&out.refs) {
        files.push((spec.name.clone(), k));
    }
    for (stem, k) in &files {
        let mut f = fs::File::create(dir.join(format!("{stem}.kspc")))?;
        write_kspace(&mut f, k, cfg.seed, &out.config_hash)?;
    }
    println!("wrote {} k-space files to {} (config {})", files.len(), dir.display(), out.config_hash);
    Ok(())
}

/// Read a set of k-space files, reporting every absent file at once.
fn read_inputs(dir: &Path, stems: &[String], cfg: &ScenarioConfig) -> CliResult<Vec<KSpaceMatrix>> {
    let missing: Vec<String> = stems
        .iter()
        .map(|s| format!("{s}.kspc"))
        .filter(|f| !dir.join(f).exists())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::missing(&missing));
    }
    let hash = cfg.hash();
    let mut out = Vec::with_capacity(stems.len());
    for stem in stems {
        let path = dir.join(format!("{stem}.kspc"));
        let mut f = fs::File::open(&path)?;
        let (k, header) = read_kspace(&mut f)?;
        if header.config_hash != hash {
            return Err(CoreError::Provenance(format!(
                "{} was produced under config {}, current config is {}",
                path.display(),
                header.config_hash,
                hash
            ))
            .into());
        }
        out.push(k);
    }
    Ok(out)
}

fn transfer_json(model: &TransferModel, cfg: &ScenarioConfig) -> serde_json::Value {
    serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "bands": model.partition.bands().iter().map(|r| [r.start, r.end]).collect::<Vec<_>>(),
        "ref_names": model.ref_names,
        "coefficients": model
            .coefficients
            .iter()
            .map(|band| band.iter().map(|&c| c_pair(c)).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
        "degenerate": model.degenerate,
    })
}

fn cmd_denoise(cfg: &ScenarioConfig, dir: &Path) -> CliResult<()> {
    let mut stems: Vec<String> = vec!["saddle_raw".into(), "solenoid_raw".into()];
    stems.extend(cfg.refs.iter().map(|r| r.name.clone()));
    let mut inputs = read_inputs(dir, &stems, cfg)?;
    let refs: Vec<KSpaceMatrix> = inputs.split_off(2);
    let ref_views: Vec<&KSpaceMatrix> = refs.iter().collect();
    let partition = BandPartition::equal(cfg.sequence.n_read, cfg.bands)?;
    for (name, raw) in ["saddle", "solenoid"].iter().zip(&inputs) {
        let model = estimate_transfer(raw, &ref_views, &partition, cfg.periphery, cfg.ridge_rel)?;
        let denoised = apply_cancellation(raw, &ref_views, &model)?;
        let mut f = fs::File::create(dir.join(format!("{name}_denoised.kspc")))?;
        write_kspace(&mut f, &denoised, cfg.seed, &cfg.hash())?;
        write_text(&dir.join(format!("transfer_{name}.json")), &pretty(&transfer_json(&model, cfg)))?;
    }
    Ok(())
}

fn cmd_anc_tune(cfg: &ScenarioConfig, dir: &Path) -> CliResult<()> {
    let (fluxes, pair_path) = flux_summary(cfg)?;
    let stage = spatial_stage(cfg, &fluxes)?;
    let field = CavityField::new(cfg.cavity, cfg.incidence)?;
    let report = spatial_cancellation_report(
        &field,
        &pair_path,
        &cfg.coils.saddle(),
        stage.drive.current,
        cfg.coils.isocenter,
        cfg.region_radius,
        7,
        cfg.quadrature_order,
    )?;
    // Couplings are only meaningful if the layout produces valid channels.
    build_channels(cfg, &fluxes)?;
    fs::create_dir_all(dir)?;

    let summary = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "policy": cfg.drive_policy,
        "drive_current": c_pair(stage.drive.current),
        "chain_gain": stage.drive.gain,
        "chain_phase_delay_deg": stage.drive.phase_delay_deg,
        "saddle_residual_factor": c_pair(stage.saddle_residual_factor),
        "solenoid_residual_factor": c_pair(stage.solenoid_residual_factor),
        "fluxes": fluxes,
        "region": report,
    });
    write_text(&dir.join("anc_tune.json"), &pretty(&summary))?;

    let trace = trace_line(cfg);
    let mut text = format!("{trace}\nx,y,z,hy_before,hy_after\n");
    for (p, before, after) in &report.per_point {
        text.push_str(&format!("{},{},{},{before},{after}\n", p.x, p.y, p.z));
    }
    write_text(&dir.join("cancellation_region.csv"), &text)?;

    for (name, spec) in [
        ("saddle", cfg.coils.saddle()),
        ("solenoid", cfg.coils.solenoid()),
        ("detection", cfg.coils.detection()),
        ("pair", cfg.coils.pair()),
    ] {
        let path = realize_coil(&spec, cfg.segments_per_turn)?;
        let mut buf = Vec::new();
        writeln!(buf, "{trace}").expect("vec write");
        path.write_csv(&mut buf)?;
        fs::write(dir.join(format!("winding_{name}.csv")), buf)?;
    }
    Ok(())
}

fn noise_sigma(img: &ComplexImage) -> f64 {
    (img.data.iter().map(|c| c.norm_sqr()).sum::<f64>() / img.data.len() as f64).sqrt()
}

fn cmd_fuse(cfg: &ScenarioConfig, dir: &Path) -> CliResult<()> {
    let stems: Vec<String> = [
        "saddle_combined",
        "saddle_combined_noise",
        "solenoid_combined",
        "solenoid_combined_noise",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let inputs = read_inputs(dir, &stems, cfg)?;
    let img_sad = reconstruct(&inputs[0]);
    let img_sol = reconstruct(&inputs[2]);
    let sigmas = [noise_sigma(&reconstruct(&inputs[1])), noise_sigma(&reconstruct(&inputs[3]))];
    let fusion = fuse(&[&img_sad, &img_sol], &sigmas)?;
    let (nr, np) = (img_sad.n_read, img_sad.n_phase);
    let fused_snr = snr_db(&fusion.image.magnitude(), nr, np, &cfg.signal_roi, &cfg.noise_roi)?;

    let trace = trace_line(cfg);
    write_pgm(&dir.join("fused.pgm"), &fusion.image.magnitude(), nr, np, &trace)?;
    let summary = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "channels": ["saddle", "solenoid"],
        "weights": fusion.weights,
        "alignments": fusion.alignments.iter().map(|&a| c_pair(a)).collect::<Vec<_>>(),
        "noise_sigmas": sigmas,
        "fused_snr_db": fused_snr,
    });
    write_text(&dir.join("fusion.json"), &pretty(&summary))
}

fn cmd_report(cfg: &ScenarioConfig, dir: &Path) -> CliResult<()> {
    let conditions = condition_names(cfg);
    let mut stems = Vec::new();
    for ch in ["saddle", "solenoid"] {
        for cond in &conditions {
            stems.push(format!("{ch}_{cond}"));
            stems.push(format!("{ch}_{cond}_noise"));
        }
    }
    let inputs = read_inputs(dir, &stems, cfg)?;
    let trace = trace_line(cfg);
    let (nr, np) = (cfg.sequence.n_read, cfg.sequence.n_phase);

    let mut channels = serde_json::Map::new();
    let mut fusable: Vec<(ComplexImage, f64)> = Vec::new();
    for (ci, ch) in ["saddle", "solenoid"].iter().enumerate() {
        let mut conds = serde_json::Map::new();
        for (ki, cond) in conditions.iter().enumerate() {
            let k = &inputs[(ci * conditions.len() + ki) * 2];
            let kn = &inputs[(ci * conditions.len() + ki) * 2 + 1];
            let img = reconstruct(k);
            let img_noise = reconstruct(kn);
            let snr = snr_db(&img.magnitude(), nr, np, &cfg.signal_roi, &cfg.noise_roi)?;
            let rms = (kn.power() / kn.data.len() as f64).sqrt();
            conds.insert(
                cond.to_string(),
                serde_json::json!({ "snr_db": snr, "noise_rms": rms }),
            );
            write_pgm(&dir.join(format!("{ch}_{cond}.pgm")), &img.magnitude(), nr, np, &trace)?;
            let profile = noise_profile_1d(&img_noise.magnitude(), nr, np, &cfg.noise_roi)?;
            let mut text = format!("{trace}\ncolumn,noise_std\n");
            for (i, v) in profile.iter().enumerate() {
                text.push_str(&format!("{i},{v}\n"));
            }
            write_text(&dir.join(format!("noise_{ch}_{cond}.csv")), &text)?;
            if *cond == *conditions.last().unwrap() {
                fusable.push((img, noise_sigma(&img_noise)));
            }
        }
        channels.insert(ch.to_string(), serde_json::Value::Object(conds));
    }

    let mut metrics = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "conditions": conditions,
        "channels": channels,
    });
    if cfg.fusion {
        let imgs: Vec<&ComplexImage> = fusable.iter().map(|(i, _)| i).collect();
        let sigmas: Vec<f64> = fusable.iter().map(|(_, s)| *s).collect();
        let fusion = fuse(&imgs, &sigmas)?;
        let fused_snr = snr_db(&fusion.image.magnitude(), nr, np, &cfg.signal_roi, &cfg.noise_roi)?;
        write_pgm(&dir.join("fused.pgm"), &fusion.image.magnitude(), nr, np, &trace)?;
        metrics["fusion"] = serde_json::json!({
            "weights": fusion.weights,
            "fused_snr_db": fused_snr,
        });
    }
    write_text(&dir.join("metrics.json"), &pretty(&metrics))
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s
}
