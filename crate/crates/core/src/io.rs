//! On-disk formats: field snapshots, CNN checkpoints, datasets, trajectory
//! manifests and CSV outputs.
//!
//! Binary formats are little-endian. Every type here holds exactly what its
//! file holds, so `write → read → write` reproduces the bytes.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::closures::{CnnArchitecture, CnnClosure, CnnParams, Normalization};
use crate::coarse::{Sample, SampleSet};
use crate::diagnostics::SpectrumSeries;
use crate::dynamics::QGState;
use crate::error::{QgError, Result};
use crate::spectral::{to_real, to_spectral, Grid, RealField};
use crate::training::EpochRecord;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"QGF1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QGNN";
pub const DATASET_MAGIC: &[u8; 4] = b"QGDS";
pub const FORMAT_VERSION: u16 = 1;

/// Write to a sibling temp file, then rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| QgError::Format(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return Err(QgError::Format(format!("{}: truncated at byte {}", self.what, self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(QgError::Format(format!("{}: bad magic", self.what)));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(QgError::Format(format!("{}: unsupported version {version}", self.what)));
        }
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, len: usize) -> Result<Vec<f64>> {
        let bytes = self.take(len.checked_mul(8).ok_or_else(|| self.too_big())?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn too_big(&self) -> QgError {
        QgError::Format(format!("{}: size overflow", self.what))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(QgError::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| QgError::Format(format!("{what} = {v} does not fit in u32")))
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(QgError::NonFinite(what.to_string()))
    }
}

/// Real-space vorticity at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSnapshot {
    pub n: u32,
    pub time: f64,
    pub length: f64,
    pub values: Vec<f64>,
}

impl FieldSnapshot {
    pub fn from_state(state: &QGState) -> Result<Self> {
        let real = to_real(&state.omega_hat)?;
        let grid = real.grid().clone();
        let snap = Self {
            n: u32_of(grid.n(), "n")?,
            time: state.t,
            length: grid.length(),
            values: real.into_values(),
        };
        snap.validate()?;
        Ok(snap)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n as usize;
        if self.values.len() != n * n {
            return Err(QgError::Format(format!(
                "snapshot payload has {} values for n = {n}",
                self.values.len()
            )));
        }
        check_finite(&self.values, "snapshot payload")?;
        if !self.time.is_finite() || !(self.length > 0.0) {
            return Err(QgError::Format("snapshot time/length invalid".into()));
        }
        Ok(())
    }

    /// Spectral state on a grid of this snapshot's size.
    pub fn to_state(&self) -> Result<QGState> {
        let grid = Grid::new(self.n as usize)?;
        if self.length != grid.length() {
            return Err(QgError::Format(format!(
                "snapshot domain length {} differs from {}",
                self.length,
                grid.length()
            )));
        }
        let real = RealField::new(grid, self.values.clone())?;
        QGState::new(to_spectral(&real)?, self.time)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(26 + 8 * self.values.len());
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.extend_from_slice(&self.time.to_le_bytes());
        out.extend_from_slice(&self.length.to_le_bytes());
        put_f64s(&mut out, &self.values);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "snapshot");
        r.magic(SNAPSHOT_MAGIC)?;
        let n = r.u32()?;
        let time = r.f64()?;
        let length = r.f64()?;
        let len = (n as usize).checked_mul(n as usize).ok_or_else(|| r.too_big())?;
        let values = r.f64s(len)?;
        r.finish()?;
        let snap = Self {
            n,
            time,
            length,
            values,
        };
        snap.validate()?;
        Ok(snap)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// CNN weights plus the normalization they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: CnnArchitecture,
    pub norm: Normalization,
    /// Per layer: weights `[out, in, k, k]` row-major, then biases.
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_closure(c: &CnnClosure) -> Self {
        Self {
            architecture: *c.params.architecture(),
            norm: c.norm,
            params: c.params.flatten(),
        }
    }

    pub fn to_closure(&self) -> Result<CnnClosure> {
        Ok(CnnClosure {
            params: CnnParams::from_flat(self.architecture, &self.params)?,
            norm: self.norm,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.architecture.validate()?;
        if self.params.len() != self.architecture.param_count() {
            return Err(QgError::Format("checkpoint parameter count mismatch".into()));
        }
        let widths = self.architecture.widths();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(self.architecture.depth, "depth")?.to_le_bytes());
        out.extend_from_slice(&u32_of(self.architecture.kernel, "kernel")?.to_le_bytes());
        for w in widths {
            out.extend_from_slice(&u32_of(w, "width")?.to_le_bytes());
        }
        out.extend_from_slice(&self.norm.omega_scale.to_le_bytes());
        out.extend_from_slice(&self.norm.residual_scale.to_le_bytes());
        put_f64s(&mut out, &self.params);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let depth = r.u32()? as usize;
        let kernel = r.u32()? as usize;
        if depth == 0 || depth > 1024 {
            return Err(QgError::Format(format!("checkpoint: implausible depth {depth}")));
        }
        let widths = (0..=depth).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
        let width = if depth > 1 { widths[1] } else { 1 };
        let architecture = CnnArchitecture { depth, width, kernel };
        architecture
            .validate()
            .map_err(|e| QgError::Format(format!("checkpoint header: {e}")))?;
        if architecture.widths() != widths {
            return Err(QgError::Format(format!("checkpoint: unsupported widths {widths:?}")));
        }
        let norm = Normalization {
            omega_scale: r.f64()?,
            residual_scale: r.f64()?,
        };
        norm.validate()
            .map_err(|e| QgError::Format(format!("checkpoint normalization: {e}")))?;
        let params = r.f64s(architecture.param_count())?;
        r.finish()?;
        check_finite(&params, "checkpoint parameters")?;
        Ok(Self {
            architecture,
            norm,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub t: f64,
    pub omega_bar: Vec<f64>,
    pub residual: Vec<f64>,
}

/// One trajectory's samples; rollout windows never cross segments.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSegment {
    pub source_id: u32,
    pub dt_sample: f64,
    pub samples: Vec<SampleRecord>,
}

/// LES-grid training data, fields in real space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: u32,
    pub segments: Vec<DatasetSegment>,
}

impl Dataset {
    pub fn from_sets(sets: &[SampleSet]) -> Result<Self> {
        let n = sets
            .iter()
            .flat_map(|s| s.samples.first())
            .map(|s| s.omega_bar.grid().n())
            .next()
            .ok_or_else(|| QgError::Config("dataset has no samples".into()))?;
        let segments = sets
            .iter()
            .map(|set| {
                let samples = set
                    .samples
                    .iter()
                    .map(|s| {
                        if s.omega_bar.grid().n() != n || s.residual.grid().n() != n {
                            return Err(QgError::GridMismatch {
                                expected: n,
                                got: s.omega_bar.grid().n(),
                            });
                        }
                        Ok(SampleRecord {
                            t: s.t,
                            omega_bar: to_real(&s.omega_bar)?.into_values(),
                            residual: to_real(&s.residual)?.into_values(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(DatasetSegment {
                    source_id: set.source_id,
                    dt_sample: set.dt_sample,
                    samples,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = Self {
            n: u32_of(n, "n")?,
            segments,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_sets(&self) -> Result<Vec<SampleSet>> {
        self.validate()?;
        let grid = Grid::new(self.n as usize)?;
        let spec = |values: &[f64]| -> Result<_> { to_spectral(&RealField::new(grid.clone(), values.to_vec())?) };
        self.segments
            .iter()
            .map(|seg| {
                let samples = seg
                    .samples
                    .iter()
                    .map(|s| {
                        Ok(Sample {
                            omega_bar: spec(&s.omega_bar)?,
                            residual: spec(&s.residual)?,
                            t: s.t,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SampleSet {
                    samples,
                    source_id: seg.source_id,
                    dt_sample: seg.dt_sample,
                })
            })
            .collect()
    }

    pub fn sample_count(&self) -> usize {
        self.segments.iter().map(|s| s.samples.len()).sum()
    }

    pub fn grid(&self) -> Result<Arc<Grid>> {
        Grid::new(self.n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let len = (self.n as usize) * (self.n as usize);
        for seg in &self.segments {
            if !(seg.dt_sample > 0.0) || !seg.dt_sample.is_finite() {
                return Err(QgError::Format(format!("dataset: bad dt_sample {}", seg.dt_sample)));
            }
            for s in &seg.samples {
                if s.omega_bar.len() != len || s.residual.len() != len {
                    return Err(QgError::Format("dataset: sample size mismatch".into()));
                }
                if !s.t.is_finite() {
                    return Err(QgError::Format("dataset: non-finite sample time".into()));
                }
                check_finite(&s.omega_bar, "dataset vorticity")?;
                check_finite(&s.residual, "dataset residual")?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.extend_from_slice(&u32_of(self.segments.len(), "segments")?.to_le_bytes());
        for seg in &self.segments {
            out.extend_from_slice(&seg.source_id.to_le_bytes());
            out.extend_from_slice(&seg.dt_sample.to_le_bytes());
            out.extend_from_slice(&u32_of(seg.samples.len(), "samples")?.to_le_bytes());
            for s in &seg.samples {
                out.extend_from_slice(&s.t.to_le_bytes());
                put_f64s(&mut out, &s.omega_bar);
                put_f64s(&mut out, &s.residual);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        r.magic(DATASET_MAGIC)?;
        let n = r.u32()?;
        let len = (n as usize).checked_mul(n as usize).ok_or_else(|| r.too_big())?;
        let n_segments = r.u32()?;
        let mut segments = Vec::new();
        for _ in 0..n_segments {
            let source_id = r.u32()?;
            let dt_sample = r.f64()?;
            let count = r.u32()?;
            let mut samples = Vec::new();
            for _ in 0..count {
                let t = r.f64()?;
                let omega_bar = r.f64s(len)?;
                let residual = r.f64s(len)?;
                samples.push(SampleRecord { t, omega_bar, residual });
            }
            segments.push(DatasetSegment {
                source_id,
                dt_sample,
                samples,
            });
        }
        r.finish()?;
        let ds = Self { n, segments };
        ds.validate()?;
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Floats in CSV: shortest representation that parses back exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| QgError::Format(format!("{what}: cannot parse `{s}` as a number")))
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| QgError::Format(format!("{what}: cannot parse `{s}` as an integer")))
}

/// Rows of a headed CSV file with exactly `header.len()` fields each.
fn csv_rows<'a>(text: &'a str, header: &[&str], what: &str) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| QgError::Format(format!("{what}: empty file")))?;
    if first.split(',').collect::<Vec<_>>() != header {
        return Err(QgError::Format(format!("{what}: header must be `{}`", header.join(","))));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != header.len() {
                return Err(QgError::Format(format!("{what}: line {} has {} fields", i + 2, fields.len())));
            }
            Ok(fields)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub step: usize,
    pub time: f64,
    /// Relative to the manifest's directory.
    pub file: String,
}

/// Index of a stored DNS trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub n: usize,
    pub dt: f64,
    pub cadence: usize,
    pub entries: Vec<ManifestEntry>,
}

const MANIFEST_HEADER: [&str; 6] = ["step", "time", "dt", "cadence", "n", "file"];

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.cadence == 0 || !(self.dt > 0.0) {
            return Err(QgError::Format("manifest: cadence and dt must be positive".into()));
        }
        for pair in self.entries.windows(2) {
            if pair[1].step <= pair[0].step || !(pair[1].time > pair[0].time) {
                return Err(QgError::Format("manifest: entries not in time order".into()));
            }
            if pair[1].step - pair[0].step != self.cadence {
                return Err(QgError::Format("manifest: entries not spaced by the cadence".into()));
            }
        }
        for e in &self.entries {
            if e.file.is_empty() || e.file.contains(',') || e.file.contains('\n') {
                return Err(QgError::Format(format!("manifest: bad file name `{}`", e.file)));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        self.validate()?;
        let mut out = MANIFEST_HEADER.join(",");
        out.push('\n');
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                e.step,
                fmt_f64(e.time),
                fmt_f64(self.dt),
                self.cadence,
                self.n,
                e.file
            )
            .unwrap();
        }
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = csv_rows(text, &MANIFEST_HEADER, "manifest")?;
        let first = rows
            .first()
            .ok_or_else(|| QgError::Format("manifest: no entries".into()))?;
        let dt = parse_f64(first[2], "manifest dt")?;
        let cadence = parse_usize(first[3], "manifest cadence")?;
        let n = parse_usize(first[4], "manifest n")?;
        let mut entries = Vec::new();
        for row in &rows {
            if parse_f64(row[2], "manifest dt")? != dt
                || parse_usize(row[3], "manifest cadence")? != cadence
                || parse_usize(row[4], "manifest n")? != n
            {
                return Err(QgError::Format("manifest: dt, cadence and n must agree on every row".into()));
            }
            entries.push(ManifestEntry {
                step: parse_usize(row[0], "manifest step")?,
                time: parse_f64(row[1], "manifest time")?,
                file: row[5].to_string(),
            });
        }
        let m = Self { n, dt, cadence, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_csv()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

const LOG_HEADER: [&str; 4] = ["epoch", "loss", "wall_time", "diverged_count"];

pub fn training_log_csv(records: &[EpochRecord]) -> String {
    let mut out = LOG_HEADER.join(",");
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{}",
            r.epoch,
            fmt_f64(r.loss),
            fmt_f64(r.wall_time),
            r.diverged_count
        )
        .unwrap();
    }
    out
}

pub fn parse_training_log(text: &str) -> Result<Vec<EpochRecord>> {
    csv_rows(text, &LOG_HEADER, "training log")?
        .into_iter()
        .map(|row| {
            Ok(EpochRecord {
                epoch: parse_usize(row[0], "epoch")?,
                loss: parse_f64(row[1], "loss")?,
                wall_time: parse_f64(row[2], "wall_time")?,
                diverged_count: parse_usize(row[3], "diverged_count")?,
            })
        })
        .collect()
}

pub fn write_training_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    atomic_write(path, training_log_csv(records).as_bytes())
}

const SPECTRUM_HEADER: [&str; 2] = ["k", "value"];

pub fn spectrum_csv(values: &[f64]) -> String {
    let mut out = SPECTRUM_HEADER.join(",");
    out.push('\n');
    for (k, v) in values.iter().enumerate() {
        writeln!(out, "{k},{}", fmt_f64(*v)).unwrap();
    }
    out
}

/// Values by shell index; the `k` column must count up from 0.
pub fn parse_spectrum_csv(text: &str) -> Result<Vec<f64>> {
    csv_rows(text, &SPECTRUM_HEADER, "spectrum")?
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            if parse_usize(row[0], "k")? != i {
                return Err(QgError::Format(format!("spectrum: row {i} has k = {}", row[0])));
            }
            parse_f64(row[1], "value")
        })
        .collect()
}

pub fn write_spectrum(path: &Path, s: &SpectrumSeries) -> Result<()> {
    atomic_write(path, spectrum_csv(&s.values).as_bytes())
}

pub fn read_spectrum(path: &Path) -> Result<Vec<f64>> {
    parse_spectrum_csv(&fs::read_to_string(path)?)
}
