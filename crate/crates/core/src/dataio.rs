//! Dataset containers, CSV ingestion and the synthetic crossmodal generator.
//!
//! Regression CSV (one file may hold several recordings):
//!
//! ```text
//! recording_id,frame_index,<feature columns...>,gold
//! rec01,0,0.12,-1.3,...,0.05
//! ```
//!
//! Frames of a recording are contiguous rows with `frame_index` counting
//! from 0. The utterance variant has the header
//! `utterance_id,frame_index,<feature columns...>,label` with an integer
//! label repeated on every frame of the utterance; pooled utterances have a
//! single frame. UTF-8, comma separated, header row required.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::Modality;

pub mod synth;

pub use synth::{generate_crossmodal, generate_utterances, LabelRule, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    /// `T × d` feature frames.
    pub features: Matrix,
    /// Gold standard, one value per frame.
    pub gold: Vec<f64>,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }
}

/// Time-continuous recordings of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub modality: Modality,
    pub partition: Partition,
    pub frame_rate_hz: f64,
    pub recordings: Vec<Recording>,
}

impl SequenceDataset {
    pub fn feature_dim(&self) -> usize {
        self.recordings.first().map_or(0, |r| r.features.cols())
    }

    pub fn total_frames(&self) -> usize {
        self.recordings.iter().map(Recording::len).sum()
    }

    /// All gold values, recordings concatenated in order.
    pub fn gold_concat(&self) -> Vec<f64> {
        self.recordings.iter().flat_map(|r| r.gold.iter().copied()).collect()
    }

    /// Checks per-recording lengths, widths and finiteness.
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate_hz > 0.0) {
            return Err(Error::Integrity(format!("frame rate must be positive, got {}", self.frame_rate_hz)));
        }
        let d = self.feature_dim();
        for r in &self.recordings {
            if r.features.rows() != r.gold.len() {
                return Err(Error::Integrity(format!(
                    "recording {}: {} feature frames but {} gold values",
                    r.id,
                    r.features.rows(),
                    r.gold.len()
                )));
            }
            if r.features.cols() != d {
                return Err(Error::Integrity(format!("recording {} has {} features, expected {d}", r.id, r.features.cols())));
            }
            if r.is_empty() {
                return Err(Error::Integrity(format!("recording {} is empty", r.id)));
            }
            if !r.features.is_finite() || r.gold.iter().any(|g| !g.is_finite()) {
                return Err(Error::Integrity(format!("recording {} has non-finite values", r.id)));
            }
        }
        Ok(())
    }

    /// Moves recordings `at..` into a new dataset with the given partition.
    pub fn split_off(&mut self, at: usize, partition: Partition) -> SequenceDataset {
        SequenceDataset {
            modality: self.modality,
            partition,
            frame_rate_hz: self.frame_rate_hz,
            recordings: self.recordings.split_off(at.min(self.recordings.len())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T × d` frames, or a single pooled frame.
    pub features: Matrix,
    pub label: usize,
}

/// Utterance-level clips of one modality with categorical labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceDataset {
    pub modality: Modality,
    pub partition: Partition,
    pub classes: usize,
    pub utterances: Vec<Utterance>,
}

impl UtteranceDataset {
    pub fn feature_dim(&self) -> usize {
        self.utterances.first().map_or(0, |u| u.features.cols())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim();
        for u in &self.utterances {
            if u.label >= self.classes {
                return Err(Error::Integrity(format!(
                    "utterance {}: label {} outside 0..{}",
                    u.id, u.label, self.classes
                )));
            }
            if u.features.rows() == 0 || u.features.cols() != d {
                return Err(Error::Integrity(format!("utterance {} has malformed features", u.id)));
            }
            if !u.features.is_finite() {
                return Err(Error::Integrity(format!("utterance {} has non-finite features", u.id)));
            }
        }
        Ok(())
    }

    pub fn split_off(&mut self, at: usize, partition: Partition) -> UtteranceDataset {
        UtteranceDataset {
            modality: self.modality,
            partition,
            classes: self.classes,
            utterances: self.utterances.split_off(at.min(self.utterances.len())),
        }
    }
}

/// Metadata not carried by the regression CSV itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionSchema {
    pub modality: Modality,
    pub partition: Partition,
    pub frame_rate_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSchema {
    pub modality: Modality,
    pub partition: Partition,
    pub classes: usize,
}

/// Rows grouped into contiguous blocks by id, with frame-index checks.
struct Block {
    id: String,
    values: Vec<f64>,
    targets: Vec<String>,
    next_frame: usize,
}

fn read_blocks(paths: &[PathBuf], id_col: &str, target_col: &str) -> Result<(usize, Vec<Block>)> {
    let mut blocks: Vec<Block> = Vec::new();
    let mut width: Option<usize> = None;
    for path in paths {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
        let headers = reader.headers()?.clone();
        let n = headers.len();
        if n < 4 || &headers[0] != id_col || &headers[1] != "frame_index" || &headers[n - 1] != target_col {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "{}: header must be `{id_col},frame_index,<features...>,{target_col}`",
                    path.display()
                ),
            });
        }
        let d = n - 3;
        match width {
            Some(w) if w != d => {
                return Err(Error::Integrity(format!(
                    "{} has {d} feature columns, earlier files have {w}",
                    path.display()
                )))
            }
            _ => width = Some(d),
        }
        let first_block = blocks.len();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                Error::Parse { line, message: format!("{}: {e}", path.display()) }
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let parse_err = |message: String| Error::Parse { line, message: format!("{}: {message}", path.display()) };
            if record.len() != n {
                return Err(parse_err(format!("expected {n} fields, found {}", record.len())));
            }
            let id = &record[0];
            let frame: usize = record[1]
                .parse()
                .map_err(|_| parse_err(format!("bad frame index `{}`", &record[1])))?;
            let is_new = blocks.last().is_none_or(|b| b.id != id) || blocks.len() == first_block;
            if is_new {
                if blocks.iter().any(|b| b.id == id) {
                    return Err(Error::Integrity(format!("`{id}` appears in more than one block of rows")));
                }
                blocks.push(Block { id: id.to_string(), values: Vec::new(), targets: Vec::new(), next_frame: 0 });
            }
            let block = blocks.last_mut().expect("just pushed");
            if frame != block.next_frame {
                return Err(Error::Integrity(format!(
                    "`{}`: expected frame {}, found frame {frame} (line {line})",
                    block.id, block.next_frame
                )));
            }
            block.next_frame += 1;
            for i in 2..n - 1 {
                let v: f64 = record[i]
                    .parse()
                    .map_err(|_| parse_err(format!("bad number `{}` in column {}", &record[i], &headers[i])))?;
                if !v.is_finite() {
                    return Err(parse_err(format!("non-finite value in column {}", &headers[i])));
                }
                block.values.push(v);
            }
            block.targets.push(record[n - 1].to_string());
        }
    }
    Ok((width.unwrap_or(0), blocks))
}

/// Loads and validates a regression dataset from one or more CSV files.
pub fn load_regression_csv(paths: &[PathBuf], schema: &RegressionSchema) -> Result<SequenceDataset> {
    let (d, blocks) = read_blocks(paths, "recording_id", "gold")?;
    let mut recordings = Vec::with_capacity(blocks.len());
    for b in blocks {
        let gold = b
            .targets
            .iter()
            .map(|g| {
                g.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Integrity(format!("`{}`: bad gold value `{g}`", b.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let t = gold.len();
        recordings.push(Recording { id: b.id, features: Matrix::from_vec(t, d, b.values)?, gold });
    }
    let ds = SequenceDataset {
        modality: schema.modality,
        partition: schema.partition,
        frame_rate_hz: schema.frame_rate_hz,
        recordings,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_utterance_csv(paths: &[PathBuf], schema: &UtteranceSchema) -> Result<UtteranceDataset> {
    let (d, blocks) = read_blocks(paths, "utterance_id", "label")?;
    let mut utterances = Vec::with_capacity(blocks.len());
    for b in blocks {
        let first = b.targets.first().cloned().unwrap_or_default();
        if b.targets.iter().any(|t| *t != first) {
            return Err(Error::Integrity(format!("`{}`: label changes within the utterance", b.id)));
        }
        let label: usize = first
            .parse()
            .map_err(|_| Error::Integrity(format!("`{}`: bad label `{first}`", b.id)))?;
        let t = b.targets.len();
        utterances.push(Utterance { id: b.id, features: Matrix::from_vec(t, d, b.values)?, label });
    }
    let ds = UtteranceDataset {
        modality: schema.modality,
        partition: schema.partition,
        classes: schema.classes,
        utterances,
    };
    ds.validate()?;
    Ok(ds)
}

fn write_header(out: &mut impl Write, id_col: &str, d: usize, target_col: &str) -> std::io::Result<()> {
    write!(out, "{id_col},frame_index")?;
    for i in 0..d {
        write!(out, ",f{i}")?;
    }
    writeln!(out, ",{target_col}")
}

/// Writes values with Rust's shortest round-trip formatting, so loading
/// the file back reproduces every `f64` bit for bit.
pub fn save_regression_csv(ds: &SequenceDataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    write_header(&mut out, "recording_id", ds.feature_dim(), "gold")?;
    for r in &ds.recordings {
        for (t, row) in r.features.row_iter().enumerate() {
            write!(out, "{},{t}", r.id)?;
            for v in row {
                write!(out, ",{v}")?;
            }
            writeln!(out, ",{}", r.gold[t])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_utterance_csv(ds: &UtteranceDataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    write_header(&mut out, "utterance_id", ds.feature_dim(), "label")?;
    for u in &ds.utterances {
        for (t, row) in u.features.row_iter().enumerate() {
            write!(out, "{},{t}", u.id)?;
            for v in row {
                write!(out, ",{v}")?;
            }
            writeln!(out, ",{}", u.label)?;
        }
    }
    out.flush()?;
    Ok(())
}
