//! Minimum sufficient token length per sample.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ReViT;
use crate::numerics::{ParamStore, Scalar};

/// Samples per forward batch during extraction.
const EXTRACT_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelEntry {
    pub sample_id: u64,
    pub label: usize,
    /// Per-length correctness, largest length first.
    pub bitmap: Vec<bool>,
}

/// Length labels aligned with a dataset's sample order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    num_lengths: usize,
    entries: Vec<LabelEntry>,
}

/// Largest `i` such that lengths `0..=i` are all correct; 0 when length 0
/// is wrong. Later successes after a failure do not count.
pub fn label_from_bitmap(bitmap: &[bool]) -> usize {
    bitmap.iter().take_while(|&&b| b).count().saturating_sub(1)
}

pub const LABELS_HEADER: &str = "sample_id,label_idx,bitmap";

impl LabelSet {
    pub fn new(num_lengths: usize, entries: Vec<LabelEntry>) -> Result<Self> {
        for e in &entries {
            if e.bitmap.len() != num_lengths {
                return Err(Error::Validation(format!(
                    "sample {} has a {}-entry bitmap, expected {num_lengths}",
                    e.sample_id,
                    e.bitmap.len()
                )));
            }
            if e.label >= num_lengths || e.label != label_from_bitmap(&e.bitmap) {
                return Err(Error::Validation(format!(
                    "sample {}: label {} inconsistent with bitmap {}",
                    e.sample_id,
                    e.label,
                    bitmap_string(&e.bitmap)
                )));
            }
        }
        Ok(Self { num_lengths, entries })
    }

    pub fn num_lengths(&self) -> usize {
        self.num_lengths
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_lengths];
        for e in &self.entries {
            h[e.label] += 1;
        }
        h
    }

    /// Errors unless entry `i` describes sample `i` of `data`.
    pub fn check_covers(&self, data: &Dataset) -> Result<()> {
        if self.len() != data.len() {
            return Err(Error::Validation(format!(
                "{} labels for {} samples",
                self.len(),
                data.len()
            )));
        }
        if let Some((i, e)) = self
            .entries
            .iter()
            .enumerate()
            .find(|(i, e)| e.sample_id != data.ids()[*i])
        {
            return Err(Error::Validation(format!(
                "label {i} is for sample {}, dataset has {}",
                e.sample_id,
                data.ids()[i]
            )));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(LABELS_HEADER);
        out.push('\n');
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.sample_id, e.label, bitmap_string(&e.bitmap));
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let format = |line: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {line}: {message}"),
        };
        let mut lines = text.lines();
        if lines.next() != Some(LABELS_HEADER) {
            return Err(format(1, format!("expected header `{LABELS_HEADER}`")));
        }
        let mut entries = Vec::new();
        let mut k = None;
        for (n, line) in lines.enumerate() {
            let line_no = n + 2;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(format(line_no, format!("expected 3 fields, got {}", fields.len())));
            }
            let sample_id = fields[0]
                .parse()
                .map_err(|_| format(line_no, format!("bad sample id `{}`", fields[0])))?;
            let label = fields[1]
                .parse()
                .map_err(|_| format(line_no, format!("bad label `{}`", fields[1])))?;
            let bitmap = fields[2]
                .chars()
                .map(|c| match c {
                    '1' => Ok(true),
                    '0' => Ok(false),
                    _ => Err(format(line_no, format!("bad bitmap `{}`", fields[2]))),
                })
                .collect::<Result<Vec<bool>>>()?;
            if *k.get_or_insert(bitmap.len()) != bitmap.len() {
                return Err(format(line_no, "bitmap width changes".into()));
            }
            entries.push(LabelEntry {
                sample_id,
                label,
                bitmap,
            });
        }
        let k = k.ok_or_else(|| format(1, "no label rows".into()))?;
        Self::new(k, entries).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path)
    }
}

fn bitmap_string(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Per-length correctness of every sample, from inference-mode forwards.
pub fn correctness_bitmaps<T: Scalar>(model: &ReViT, store: &ParamStore<T>, data: &Dataset) -> Result<Vec<Vec<bool>>> {
    let k = model.num_lengths();
    let chunks: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(EXTRACT_BATCH)
        .map(<[usize]>::to_vec)
        .collect();
    let per_chunk: Vec<Vec<Vec<bool>>> = chunks
        .par_iter()
        .map(|idx| -> Result<Vec<Vec<bool>>> {
            let (images, targets) = data.batch::<T>(idx)?;
            let mut bits = vec![Vec::with_capacity(k); idx.len()];
            for i in 0..k {
                let pred = model.predict(store, &images, i)?;
                for (s, (p, t)) in pred.iter().zip(&targets).enumerate() {
                    bits[s].push(p == t);
                }
            }
            Ok(bits)
        })
        .collect::<Result<_>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// Labels every sample of `data` with its minimum sufficient length.
pub fn extract_labels<T: Scalar>(model: &ReViT, store: &ParamStore<T>, data: &Dataset) -> Result<LabelSet> {
    let bitmaps = correctness_bitmaps(model, store, data)?;
    let entries = bitmaps
        .into_iter()
        .zip(data.ids())
        .map(|(bitmap, &sample_id)| LabelEntry {
            sample_id,
            label: label_from_bitmap(&bitmap),
            bitmap,
        })
        .collect();
    LabelSet::new(model.num_lengths(), entries)
}
