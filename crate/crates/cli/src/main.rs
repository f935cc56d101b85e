use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dea_lab::calibration::Calibration;
use dea_lab::campaign::{
    execute_planned, CampaignReport, Cell, LocalExecutor, Manifest, PlannedTrial, ProgressEvent,
};
use dea_lab::devicemodel::{DeviceModel, DeviceSpec, Drive, Filler, MaterialConfig};
use dea_lab::gait::{self, ActuatorDrive, ForceMode, GaitConfig, GaitSchedule};
use dea_lab::rig::{AbortSignal, ChannelRig, ModeTarget, Paced, Protocol, SimBackend, TrialStatus};
use dea_lab::store::{self, RunDirectory};
use dea_lab::waveform::WaveformSpec;

#[derive(Parser)]
#[command(name = "dea-lab", version, about = "Simulated DEA lifetime rig, campaigns and gait model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Staged optimization campaigns.
    #[command(subcommand)]
    Campaign(CampaignCmd),
    /// Single lifetime trials.
    #[command(subcommand)]
    Trial(TrialCmd),
    /// Locomotion-unit pose and force traces (CSV).
    #[command(subcommand)]
    Gait(GaitCmd),
    /// Rig walkthroughs.
    #[command(subcommand)]
    Rig(RigCmd),
}

#[derive(Subcommand)]
enum CampaignCmd {
    /// Runs all three stages and writes a run directory.
    Run {
        manifest: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated-time acceleration; unpaced when omitted.
        #[arg(long)]
        accel: Option<f64>,
        /// Run directory; defaults to $DEA_LAB_DATA_DIR/<name>-s<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        channels: Option<u32>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Rebuilds report.json/report.csv from trials.csv and prints the
    /// comparison table.
    Report { run_dir: PathBuf },
}

#[derive(Subcommand)]
enum TrialCmd {
    Run(TrialArgs),
}

#[derive(Args)]
struct TrialArgs {
    /// V/µm
    #[arg(long)]
    field: f64,
    /// Hz
    #[arg(long)]
    freq: f64,
    #[arg(long, default_value = "CB")]
    filler: Filler,
    /// wt%
    #[arg(long, default_value_t = 2.5)]
    cnt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = DeviceKind::Sample)]
    device: DeviceKind,
    /// Lifetime cap, s.
    #[arg(long, default_value_t = 10800.0)]
    cap: f64,
    #[arg(long)]
    accel: Option<f64>,
    /// Writes telemetry to <dir>/telemetry/ch0.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DeviceKind {
    Sample,
    Scaled,
}

#[derive(Subcommand)]
enum GaitCmd {
    /// Pose and forces for the configured elongations and forces.
    Pose(GaitArgs),
    /// Per-phase pose and forces over one walking cycle.
    Cycle(GaitArgs),
}

#[derive(Args)]
struct GaitArgs {
    /// TOML or JSON gait config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Printed)]
    mode: Mode,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Printed,
    Corrected,
}

impl From<Mode> for ForceMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Printed => ForceMode::AsPrinted,
            Mode::Corrected => ForceMode::Corrected,
        }
    }
}

#[derive(Subcommand)]
enum RigCmd {
    /// Scripted mode-switch sequence on one simulated channel.
    Demo {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Campaign(CampaignCmd::Run {
            manifest,
            seed,
            accel,
            out,
            channels,
            quiet,
        }) => campaign_run(&manifest, seed, accel, out, channels, quiet),
        Cmd::Campaign(CampaignCmd::Report { run_dir }) => campaign_report(&run_dir),
        Cmd::Trial(TrialCmd::Run(a)) => trial_run(&a),
        Cmd::Gait(GaitCmd::Pose(a)) => gait_pose(&a),
        Cmd::Gait(GaitCmd::Cycle(a)) => gait_cycle(&a),
        Cmd::Rig(RigCmd::Demo { seed }) => rig_demo(seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn data_dir() -> PathBuf {
    std::env::var_os("DEA_LAB_DATA_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn campaign_run(
    path: &Path,
    seed: Option<u64>,
    accel: Option<f64>,
    out: Option<PathBuf>,
    channels: Option<u32>,
    quiet: bool,
) -> Result<()> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut manifest = Manifest::from_json(&text)?;
    if let Some(s) = seed {
        manifest.seed = s;
    }
    if let Some(c) = channels {
        manifest.channels = c;
    }
    manifest.validate()?;
    let out = out.unwrap_or_else(|| data_dir().join(format!("{}-s{}", manifest.name, manifest.seed)));
    let epoch = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .ok()
        .map(|d| d.as_secs());
    let mut run = RunDirectory::create(&out, &manifest, epoch)?;
    let hooks = run.channel_hooks(manifest.channels, accel.unwrap_or(f64::INFINITY))?;
    let mut exec = LocalExecutor::with_hooks(hooks);
    let progress = |e: ProgressEvent| {
        if quiet {
            return;
        }
        match &e {
            ProgressEvent::TrialStarted { .. } | ProgressEvent::TrialEnded { .. } => {}
            _ => eprintln!("{}", serde_json::to_string(&e).unwrap_or_default()),
        }
    };
    let outcome = run.run(&manifest, &mut exec, &progress, &AbortSignal::new())?;
    print_report(&outcome.report);
    println!("run directory: {}", out.display());
    let faulted = outcome.records.iter().filter(|r| r.status == TrialStatus::Faulted).count();
    if faulted > 0 {
        bail!("{faulted} trial(s) faulted");
    }
    Ok(())
}

fn campaign_report(dir: &Path) -> Result<()> {
    let has_rows = store::load_trials(dir).map(|t| !t.is_empty()).unwrap_or(false);
    if !has_rows {
        bail!("no trials in {}", dir.display());
    }
    let report = store::regenerate_report(dir)?;
    print_report(&report);
    Ok(())
}

fn print_report(r: &CampaignReport) {
    println!("campaign {} (seed {}, {} trials)", r.name, r.seed, r.trials);
    let drives: Vec<String> = r.boundary.iter().map(drive_label).collect();
    println!("boundary: {}", drives.join(", "));
    for c in &r.comparisons {
        println!();
        println!("{}", drive_label(&c.drive));
        println!(
            "  {:<9} {:<9} {:>3} {:>18} {:>18}",
            "role", "material", "n", "lifetime s", "displacement mm"
        );
        for row in [&c.best, &c.baseline, &c.worst] {
            let role = serde_json::to_value(row.role).ok().and_then(|v| v.as_str().map(String::from));
            println!(
                "  {:<9} {:<9} {:>3} {:>10.0} ± {:<6.0} {:>9.3} ± {:<6.3}",
                role.unwrap_or_default(),
                row.material.to_string(),
                row.completed,
                row.mean_lifetime,
                row.std_lifetime,
                row.mean_displacement,
                row.std_displacement
            );
        }
        println!(
            "  lifetime: {:+.1}% vs baseline, {:+.1}% vs worst",
            c.lifetime_vs_baseline_pct, c.lifetime_vs_worst_pct
        );
        println!(
            "  displacement: {:+.1}% vs baseline, {:+.1}% vs worst",
            c.displacement_vs_baseline_pct, c.displacement_vs_worst_pct
        );
    }
}

fn drive_label(d: &Drive) -> String {
    format!("{} V/um @ {} Hz", d.field, d.frequency)
}

fn trial_run(a: &TrialArgs) -> Result<()> {
    let material = MaterialConfig {
        filler: a.filler,
        cnt_conc: a.cnt,
    };
    let device = match a.device {
        DeviceKind::Sample => DeviceSpec::test_sample(),
        DeviceKind::Scaled => DeviceSpec::scaled(),
    }
    .with_material(material);
    let cell = Cell::new(
        Drive {
            field: a.field,
            frequency: a.freq,
        },
        material,
    );
    let trial = PlannedTrial::new(a.seed, 0, cell, 0);
    let mut protocol = Protocol::default();
    protocol.lifetime.cap = a.cap;
    let model = DeviceModel::new(Calibration::default());
    let mut rig = ChannelRig::new(0, SimBackend::new(model, device.clone(), trial.seed));
    let accel = a.accel.unwrap_or(f64::INFINITY);
    let (path, lines) = match &a.out {
        Some(dir) => {
            let run = RunDirectory::create(dir, &Manifest::default(), None)?;
            let w = run.telemetry_writer(0)?;
            let lines = w.line_counter();
            rig.set_sink(Box::new(Paced::new(w, accel)));
            (RunDirectory::telemetry_rel(0), Some(lines))
        }
        None => {
            rig.set_sink(Box::new(Paced::new(dea_lab::rig::NullSink, accel)));
            (RunDirectory::telemetry_rel(0), None)
        }
    };
    let rec = execute_planned(&mut rig, &trial, &device, &protocol, &AbortSignal::new(), &path, lines.as_deref());
    println!("{}", serde_json::to_string_pretty(&rec)?);
    if rec.status == TrialStatus::Faulted {
        let reason = rig.fault().map(|f| f.to_string()).unwrap_or_else(|| "unknown".into());
        bail!("trial faulted: {reason}");
    }
    Ok(())
}

fn load_gait_config(path: Option<&Path>) -> Result<GaitConfig> {
    let Some(path) = path else {
        return Ok(GaitConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    Ok(cfg)
}

const POSE_COLUMNS: [&str; 9] = ["h_c", "w_c", "delta_h", "delta_l", "delta_w", "d", "theta_b", "f_x", "f_y"];

fn pose_fields(p: &dea_lab::Pose, f: &dea_lab::BodyForces) -> [String; 9] {
    [p.h_c, p.w_c, p.delta_h, p.delta_l, p.delta_w, p.d, p.theta_b, f.f_x, f.f_y].map(|v| v.to_string())
}

fn gait_pose(a: &GaitArgs) -> Result<()> {
    let cfg = load_gait_config(a.config.as_deref())?;
    let [e1, e2, e3] = cfg.elongations;
    let [f1, f2, f3] = cfg.forces;
    let drive = ActuatorDrive {
        e: [e1, e2, e3],
        f: [f1, f2, f3],
    };
    let p = gait::pose(&cfg.geometry, &drive)?;
    let f = gait::body_forces(&p, &drive, a.mode.into());
    let mut w = csv::Writer::from_writer(std::io::stdout());
    w.write_record(["e1", "e2", "e3", "f1", "f2", "f3"].iter().chain(POSE_COLUMNS.iter()))?;
    let inputs = [e1, e2, e3, f1, f2, f3].map(|v| v.to_string());
    w.write_record(inputs.iter().chain(pose_fields(&p, &f).iter()))?;
    w.flush()?;
    Ok(())
}

fn gait_cycle(a: &GaitArgs) -> Result<()> {
    let cfg = load_gait_config(a.config.as_deref())?;
    let schedule = GaitSchedule::with_fractions(cfg.cycle_freq, cfg.fractions)?;
    let model = DeviceModel::new(Calibration::default());
    let units = gait::simulate_cycle(
        &model,
        &cfg.geometry,
        &cfg.device,
        cfg.field,
        &schedule,
        cfg.units,
        a.mode.into(),
    )?;
    let mut w = csv::Writer::from_writer(std::io::stdout());
    let head = ["unit", "phase", "t_s", "active", "e1", "e2", "e3", "f1", "f2", "f3"];
    w.write_record(head.iter().chain(POSE_COLUMNS.iter()))?;
    for s in units.iter().flatten() {
        let active: Vec<String> = s.active.iter().map(|a| a.to_string()).collect();
        let mut row = vec![s.unit.to_string(), s.phase.to_string(), s.t.to_string(), active.join("+")];
        row.extend(s.drive.e.iter().chain(s.drive.f.iter()).map(|v| v.to_string()));
        row.extend(pose_fields(&s.pose, &s.forces));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn rig_demo(seed: u64) -> Result<()> {
    let device = DeviceSpec::test_sample();
    let model = DeviceModel::new(Calibration::default());
    let mut rig = ChannelRig::new(0, SimBackend::new(model, device, seed));
    let show = |rig: &mut ChannelRig<SimBackend>, step: &str| -> Result<()> {
        println!("# {step}");
        for e in rig.take_events() {
            println!("{}", serde_json::to_string(&e)?);
        }
        Ok(())
    };

    rig.switch_mode(ModeTarget::Displacement)?;
    rig.apply_drive(&WaveformSpec::dc_square(40.0, 1.0, 60.0), 0.0)?;
    show(&mut rig, "displacement mode, 40 V/um square drive at 1 Hz")?;
    for _ in 0..8 {
        rig.wait(0.125);
        let s = rig.sample()?;
        println!(
            "t={:.3} V={:.0} disp={:.4} mm",
            s.t,
            s.voltage,
            s.displacement.unwrap_or(f64::NAN)
        );
    }

    match rig.switch_mode(ModeTarget::Impedance) {
        Ok(()) => bail!("impedance mode accepted while HV was live"),
        Err(e) => println!("impedance request refused: {} ({e})", e.reason()),
    }
    show(&mut rig, "interlock")?;

    rig.stop_drive()?;
    rig.switch_mode(ModeTarget::Force)?;
    show(&mut rig, "rotate under force sensor and clamp")?;

    rig.switch_mode(ModeTarget::Impedance)?;
    let sweep = rig.impedance_sweep(10)?;
    show(&mut rig, "isolate HV and sweep")?;
    for p in sweep {
        println!("f={:.1} Hz C={:.3} nF", p.probe_freq, p.capacitance);
    }

    rig.switch_mode(ModeTarget::Idle)?;
    show(&mut rig, "back to idle")?;
    Ok(())
}
