use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GraphError, SignalRecord};
use crate::numkit::Tensor;

/// One line of the dataset manifest. `csv` is resolved relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub csv: String,
    pub label: usize,
    pub channels: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GraphError + '_ {
    move |source| GraphError::Io { path: path.display().to_string(), source }
}

/// Reads a JSON manifest and every CSV it lists.
pub fn load_csv_dataset(manifest_path: &Path) -> Result<Vec<SignalRecord>, GraphError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| GraphError::Format { path: manifest_path.display().to_string(), msg: e.to_string() })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    entries.iter().map(|e| load_one(&base.join(&e.csv), e)).collect()
}

fn load_one(path: &Path, entry: &ManifestEntry) -> Result<SignalRecord, GraphError> {
    let shown = path.display().to_string();
    let fmt = |msg: String| GraphError::Format { path: shown.clone(), msg };
    if entry.channels.is_empty() {
        return Err(fmt("manifest entry lists no channels".into()));
    }
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers().map_err(|e| fmt(e.to_string()))?.clone();
    let cols: Vec<usize> = entry
        .channels
        .iter()
        .map(|name| {
            headers.iter().position(|h| h.trim() == name).ok_or_else(|| fmt(format!("no column named `{name}`")))
        })
        .collect::<Result<_, _>>()?;

    let mut series = vec![Vec::new(); cols.len()];
    for row in reader.records() {
        let row = row.map_err(|e| match e.position() {
            Some(p) => fmt(format!("line {}: {e}", p.line())),
            None => fmt(e.to_string()),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        for (s, &c) in series.iter_mut().zip(&cols) {
            let cell = row.get(c).unwrap_or("").trim();
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| GraphError::Parse {
                path: shown.clone(),
                line,
                column: headers.get(c).unwrap_or("").to_string(),
                value: cell.to_string(),
            })?;
            s.push(v);
        }
    }
    let len = series[0].len();
    if len == 0 {
        return Err(fmt("no data rows".into()));
    }
    let channels = Tensor::matrix(cols.len(), len, series.concat())?;
    SignalRecord::new(channels, entry.label)
}

/// Writes one CSV per record plus `manifest.json` into `dir` and returns the
/// manifest path. Values use the shortest representation that parses back
/// to the same `f64`.
pub fn write_csv_dataset(dir: &Path, records: &[SignalRecord]) -> Result<PathBuf, GraphError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let name = format!("record_{i:04}.csv");
        let path = dir.join(&name);
        let channels: Vec<String> = (0..rec.n_channels()).map(|c| format!("ch{c}")).collect();
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| GraphError::Format { path: path.display().to_string(), msg: e.to_string() })?;
        let werr = |e: csv::Error| GraphError::Format { path: path.display().to_string(), msg: e.to_string() };
        w.write_record(&channels).map_err(werr)?;
        for t in 0..rec.len() {
            let row: Vec<String> = (0..rec.n_channels()).map(|c| rec.channels.get(c, t).to_string()).collect();
            w.write_record(&row).map_err(werr)?;
        }
        w.flush().map_err(io_err(&path))?;
        manifest.push(ManifestEntry { csv: name, label: rec.label, channels });
    }
    let mpath = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| GraphError::Format { path: mpath.display().to_string(), msg: e.to_string() })?;
    fs::write(&mpath, text + "\n").map_err(io_err(&mpath))?;
    Ok(mpath)
}
