//! File formats: model JSON, observation CSV, output tables and manifests.

use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

use swf::filtering::{DirichletMixture, ObservationRecord};
use swf::swf_sampler::SwfModel;
use swf::wf_core::CountVector;
use swf::SwfError;

/// Failure classes, one per exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Numerical(_) => "numerical",
            CliError::Io(_) => "io",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numerical(m) | CliError::Io(m) => m,
        }
    }
}

impl From<SwfError> for CliError {
    fn from(e: SwfError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            CliError::Io(e.to_string())
        } else {
            CliError::Config(format!("malformed CSV: {e}"))
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))
}

pub fn read_model(path: &Path) -> CliResult<SwfModel> {
    let text = read_text(path)?;
    let model: SwfModel =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid model file {}: {e}", path.display())))?;
    model.validate()?;
    Ok(model)
}

/// Observation table with header `t,y1,...,yK`.
pub fn read_data(path: &Path, k: usize) -> CliResult<Vec<ObservationRecord>> {
    // read first so a missing file is an I/O error rather than a CSV one
    let text = read_text(path)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let width = rdr.headers()?.len();
    if width != k + 1 {
        return Err(CliError::Config(format!("data file has {width} columns; expected t and {k} counts")));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| CliError::Config(format!("data row {}: bad {what}", i + 1));
        let t: f64 = rec[0].parse().map_err(|_| bad("time"))?;
        let y = (1..=k).map(|j| rec[j].parse::<u64>().map_err(|_| bad("count"))).collect::<CliResult<Vec<u64>>>()?;
        out.push(ObservationRecord { t, y: CountVector::new(y) });
    }
    Ok(out)
}

pub fn write_data(path: &Path, data: &[ObservationRecord]) -> CliResult<()> {
    let k = data.first().map_or(0, |d| d.y.k());
    let mut header = vec!["t".to_string()];
    header.extend((1..=k).map(|j| format!("y{j}")));
    let rows = data.iter().map(|d| {
        let mut r = vec![format!("{:?}", d.t)];
        r.extend(d.y.counts().iter().map(u64::to_string));
        r
    });
    write_csv(path, &header, rows)
}

pub fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    let io = |e: csv::Error| CliError::Io(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(format!("cannot encode output: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Mixtures are checked before they are written.
pub fn check_normalized(mix: &DirichletMixture, what: &str) -> CliResult<()> {
    let total = mix.total_weight();
    if (total - 1.0).abs() > 1e-8 {
        return Err(CliError::Numerical(format!("{what}: weights sum to {total}")));
    }
    Ok(())
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

#[derive(Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub command: &'a str,
    pub config: &'a C,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub outputs: Vec<String>,
    pub versions: Versions,
    pub wall_time_seconds: f64,
}

#[derive(Serialize)]
pub struct Versions {
    pub swf: &'static str,
    pub swf_cli: &'static str,
}

impl Versions {
    pub fn current() -> Self {
        Versions { swf: swf::VERSION, swf_cli: env!("CARGO_PKG_VERSION") }
    }
}
