//! Append-only run directories:
//!
//! ```text
//! <run>/manifest.json
//! <run>/telemetry/ch<N>.jsonl
//! <run>/trials.csv
//! <run>/report.json
//! <run>/report.csv
//! ```

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{LifetimeResult, TerminalCause};
use crate::campaign::{
    compile_report, run_campaign, CampaignError, CampaignOutcome, CampaignReport, Cell, ChannelHooks, Manifest,
    ProgressEvent, TrialExecutor, TrialRecord,
};
use crate::devicemodel::{Filler, MaterialConfig};
use crate::rig::{AbortSignal, Paced, SinkError, TelemetrySample, TelemetrySink, TrialStatus};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRIALS_FILE: &str = "trials.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TELEMETRY_DIR: &str = "telemetry";

/// Default telemetry flush cadence, simulated seconds.
pub const DEFAULT_FLUSH_INTERVAL: f64 = 1.0;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("run directory is closed")]
    Closed,
    #[error("duplicate device_id {0}")]
    Duplicate(String),
    #[error("run directory already initialized: {0}")]
    Exists(PathBuf),
    #[error("malformed {file} at line {line}: {msg}")]
    Format { file: String, line: usize, msg: String },
    #[error("bad telemetry ref {0:?}")]
    BadRef(String),
}

/// manifest.json: the campaign manifest plus the wall-clock run epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    #[serde(flatten)]
    pub manifest: Manifest,
    /// Unix seconds when the run started; telemetry times are relative to
    /// each trial's start.
    pub run_epoch: Option<u64>,
}

/// Flat trials.csv row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrialRow {
    device_id: String,
    stage: u8,
    field: f64,
    freq: f64,
    filler: Filler,
    cnt_conc: f64,
    replicate: u32,
    seed: u64,
    channel: u32,
    status: TrialStatus,
    lifetime_s: f64,
    censored: bool,
    terminal_cause: TerminalCause,
    initial_amplitude_mm: f64,
    avg_displacement_mm: Option<f64>,
    capacitance_loss: Option<f64>,
    duration_s: f64,
    telemetry_ref: String,
}

pub const TRIALS_HEADER: &str = "device_id,stage,field,freq,filler,cnt_conc,replicate,seed,channel,status,lifetime_s,censored,terminal_cause,initial_amplitude_mm,avg_displacement_mm,capacitance_loss,duration_s,telemetry_ref";

impl From<&TrialRecord> for TrialRow {
    fn from(r: &TrialRecord) -> Self {
        Self {
            device_id: r.device_id.clone(),
            stage: r.stage,
            field: r.cell.field,
            freq: r.cell.freq,
            filler: r.cell.material.filler,
            cnt_conc: r.cell.material.cnt_conc,
            replicate: r.replicate,
            seed: r.seed,
            channel: r.channel,
            status: r.status,
            lifetime_s: r.lifetime.lifetime,
            censored: r.lifetime.censored,
            terminal_cause: r.lifetime.terminal_cause,
            initial_amplitude_mm: r.lifetime.initial_amplitude,
            avg_displacement_mm: r.avg_displacement,
            capacitance_loss: r.capacitance_loss,
            duration_s: r.duration,
            telemetry_ref: r.telemetry_ref.clone(),
        }
    }
}

impl From<TrialRow> for TrialRecord {
    fn from(r: TrialRow) -> Self {
        Self {
            stage: r.stage,
            cell: Cell {
                field: r.field,
                freq: r.freq,
                material: MaterialConfig {
                    filler: r.filler,
                    cnt_conc: r.cnt_conc,
                },
            },
            replicate: r.replicate,
            device_id: r.device_id,
            seed: r.seed,
            channel: r.channel,
            status: r.status,
            lifetime: LifetimeResult {
                lifetime: r.lifetime_s,
                censored: r.censored,
                initial_amplitude: r.initial_amplitude_mm,
                terminal_cause: r.terminal_cause,
            },
            avg_displacement: r.avg_displacement_mm,
            capacitance_loss: r.capacitance_loss,
            duration: r.duration_s,
            telemetry_ref: r.telemetry_ref,
        }
    }
}

/// Writable run directory. Trial and report writes go through this single
/// owner; telemetry goes through per-channel [`TelemetryWriter`]s.
#[derive(Debug)]
pub struct RunDirectory {
    root: PathBuf,
    closed: Arc<AtomicBool>,
    device_ids: BTreeSet<String>,
    flush_interval: f64,
}

impl RunDirectory {
    /// Initializes a run directory. The manifest is written before anything
    /// else.
    pub fn create(root: impl AsRef<Path>, manifest: &Manifest, run_epoch: Option<u64>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let manifest_path = root.join(MANIFEST_FILE);
        if manifest_path.exists() {
            return Err(StoreError::Exists(root));
        }
        let file = ManifestFile {
            manifest: manifest.clone(),
            run_epoch,
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        fs::write(&manifest_path, text)?;
        fs::create_dir_all(root.join(TELEMETRY_DIR))?;
        fs::write(root.join(TRIALS_FILE), format!("{TRIALS_HEADER}\n"))?;
        Ok(Self {
            root,
            closed: Arc::new(AtomicBool::new(false)),
            device_ids: BTreeSet::new(),
            flush_interval: DEFAULT_FLUSH_INTERVAL,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_flush_interval(&mut self, seconds: f64) {
        self.flush_interval = seconds;
    }

    /// Relative path of a channel's telemetry log.
    pub fn telemetry_rel(channel: u32) -> String {
        format!("{TELEMETRY_DIR}/ch{channel}.jsonl")
    }

    /// Opens (creating on first use) the append-only log of one channel.
    pub fn telemetry_writer(&self, channel: u32) -> Result<TelemetryWriter, StoreError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(StoreError::Closed);
        }
        let path = self.root.join(Self::telemetry_rel(channel));
        let existing = if path.exists() { load_telemetry(&path)?.samples.len() as u64 } else { 0 };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(TelemetryWriter {
            out: BufWriter::new(file),
            lines: Arc::new(AtomicU64::new(existing)),
            closed: self.closed.clone(),
            flush_interval: self.flush_interval,
            last_flush_t: 0.0,
        })
    }

    /// Appends one row to trials.csv. A device_id may appear only once.
    pub fn write_trial(&mut self, record: &TrialRecord) -> Result<(), StoreError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(StoreError::Closed);
        }
        if self.device_ids.contains(&record.device_id) {
            return Err(StoreError::Duplicate(record.device_id.clone()));
        }
        let file = OpenOptions::new().append(true).open(self.root.join(TRIALS_FILE))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        w.serialize(TrialRow::from(record))?;
        w.flush()?;
        self.device_ids.insert(record.device_id.clone());
        Ok(())
    }

    /// Writes report.json and report.csv (replacing earlier versions).
    pub fn write_report(&self, report: &CampaignReport) -> Result<(), StoreError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(StoreError::Closed);
        }
        fs::write(self.root.join(REPORT_JSON), report_json(report)?)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in report.summary_rows() {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| StoreError::Io(e.into_error()))?;
        fs::write(self.root.join(REPORT_CSV), bytes)?;
        Ok(())
    }

    /// Refuses further writes from this handle and every telemetry writer.
    pub fn close(&mut self) {
        self.closed.store(true, Ordering::SeqCst);
    }
}

/// Canonical report.json bytes.
pub fn report_json(report: &CampaignReport) -> Result<String, StoreError> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    Ok(text)
}

/// Line-delimited JSON telemetry sink for one channel.
pub struct TelemetryWriter {
    out: BufWriter<File>,
    lines: Arc<AtomicU64>,
    closed: Arc<AtomicBool>,
    flush_interval: f64,
    last_flush_t: f64,
}

impl TelemetryWriter {
    /// Shared count of lines in the file.
    pub fn line_counter(&self) -> Arc<AtomicU64> {
        self.lines.clone()
    }

    pub fn append(&mut self, sample: &TelemetrySample) -> Result<(), StoreError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(StoreError::Closed);
        }
        serde_json::to_writer(&mut self.out, sample)?;
        self.out.write_all(b"\n")?;
        self.lines.fetch_add(1, Ordering::SeqCst);
        if sample.t - self.last_flush_t >= self.flush_interval || sample.t < self.last_flush_t {
            self.out.flush()?;
            self.last_flush_t = sample.t;
        }
        Ok(())
    }
}

impl TelemetrySink for TelemetryWriter {
    fn record(&mut self, sample: &TelemetrySample) -> Result<(), SinkError> {
        self.append(sample).map_err(|e| SinkError(e.to_string()))
    }

    fn flush(&mut self) -> Result<(), SinkError> {
        self.out.flush().map_err(|e| SinkError(e.to_string()))
    }
}

impl Drop for TelemetryWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Parsed telemetry log.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryLoad {
    pub samples: Vec<TelemetrySample>,
    /// A trailing line without newline was found and discarded.
    pub partial_line: bool,
}

/// Loads a telemetry log, tolerating a torn final line.
pub fn load_telemetry(path: impl AsRef<Path>) -> Result<TelemetryLoad, StoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mut samples = Vec::new();
    let mut rest = &bytes[..];
    let mut line = 0;
    while let Some(nl) = rest.iter().position(|&b| b == b'\n') {
        line += 1;
        let s = serde_json::from_slice(&rest[..nl]).map_err(|e| StoreError::Format {
            file: path.display().to_string(),
            line,
            msg: e.to_string(),
        })?;
        samples.push(s);
        rest = &rest[nl + 1..];
    }
    Ok(TelemetryLoad {
        samples,
        partial_line: !rest.is_empty(),
    })
}

pub fn load_manifest(root: impl AsRef<Path>) -> Result<ManifestFile, StoreError> {
    let text = fs::read_to_string(root.as_ref().join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_trials(root: impl AsRef<Path>) -> Result<Vec<TrialRecord>, StoreError> {
    let mut r = csv::Reader::from_path(root.as_ref().join(TRIALS_FILE))?;
    let mut out = Vec::new();
    for row in r.deserialize::<TrialRow>() {
        out.push(row?.into());
    }
    Ok(out)
}

pub fn load_report(root: impl AsRef<Path>) -> Result<CampaignReport, StoreError> {
    let text = fs::read_to_string(root.as_ref().join(REPORT_JSON))?;
    Ok(serde_json::from_str(&text)?)
}

/// `(relative path, first line, last line)` of a telemetry ref
/// `telemetry/ch0.jsonl#L3-L9`. Lines are 1-based and inclusive; an empty
/// range has `last = first - 1`.
pub fn parse_ref(r: &str) -> Result<(String, u64, u64), StoreError> {
    let bad = || StoreError::BadRef(r.to_string());
    let (path, range) = r.split_once("#L").ok_or_else(bad)?;
    let (a, b) = range.split_once("-L").ok_or_else(bad)?;
    let a: u64 = a.parse().map_err(|_| bad())?;
    let b: u64 = b.parse().map_err(|_| bad())?;
    if path.is_empty() || a == 0 || b + 1 < a || path.contains("..") {
        return Err(bad());
    }
    Ok((path.to_string(), a, b))
}

/// Telemetry of one trial. `complete` is false when the log ends before the
/// referenced range does.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRef {
    pub samples: Vec<TelemetrySample>,
    pub complete: bool,
}

pub fn resolve_ref(root: impl AsRef<Path>, r: &str) -> Result<ResolvedRef, StoreError> {
    let (path, a, b) = parse_ref(r)?;
    let load = load_telemetry(root.as_ref().join(path))?;
    let n = load.samples.len() as u64;
    let lo = (a - 1).min(n) as usize;
    let hi = b.min(n) as usize;
    Ok(ResolvedRef {
        samples: load.samples[lo..hi.max(lo)].to_vec(),
        complete: b <= n,
    })
}

impl From<StoreError> for CampaignError {
    fn from(e: StoreError) -> Self {
        CampaignError::Storage(e.to_string())
    }
}

impl RunDirectory {
    /// Hooks that log each channel to this directory, paced to `accel`.
    pub fn channel_hooks(&self, channels: u32, accel: f64) -> Result<Vec<ChannelHooks>, StoreError> {
        (0..channels.max(1))
            .map(|ch| {
                let w = self.telemetry_writer(ch)?;
                Ok(ChannelHooks {
                    lines: Some(w.line_counter()),
                    sink: Box::new(Paced::new(w, accel)),
                    telemetry_path: Self::telemetry_rel(ch),
                    abort: AbortSignal::new(),
                })
            })
            .collect()
    }

    /// Runs a campaign, appending every record as its batch lands and writing
    /// the report at the end. The directory is closed afterwards either way.
    pub fn run(
        &mut self,
        manifest: &Manifest,
        exec: &mut dyn TrialExecutor,
        progress: &(dyn Fn(ProgressEvent) + Sync),
        cancel: &AbortSignal,
    ) -> Result<CampaignOutcome, CampaignError> {
        let res = run_campaign(manifest, exec, &mut |r| Ok(self.write_trial(r)?), progress, cancel);
        let res = res.and_then(|o| {
            self.write_report(&o.report)?;
            Ok(o)
        });
        self.close();
        res
    }
}

/// Recomputes the report of a run directory from its trial table and
/// rewrites report.json/report.csv.
pub fn regenerate_report(root: impl AsRef<Path>) -> Result<CampaignReport, CampaignError> {
    let root = root.as_ref();
    let manifest = load_manifest(root)?.manifest;
    let records = load_trials(root)?;
    let report = compile_report(&manifest, &records)?;
    let run = RunDirectory {
        root: root.to_path_buf(),
        closed: Arc::new(AtomicBool::new(false)),
        device_ids: BTreeSet::new(),
        flush_interval: DEFAULT_FLUSH_INTERVAL,
    };
    run.write_report(&report)?;
    Ok(report)
}
