use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::model::{Roi, RoiSet};
use crate::text::{extract_attributes, AttributeVocabulary, DiseaseTerms, Report};
use crate::train::Sample;

pub const ROI_MAGIC: &[u8; 4] = b"XROI";
pub const ROI_VERSION: u16 = 1;

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = parent.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Io(e.into()))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_reports(path: &Path) -> Result<Vec<Report>> {
    let reports: Vec<Report> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for (i, r) in reports.iter().enumerate() {
        if r.id.is_empty() || !seen.insert(r.id.as_str()) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("report id `{}` is empty or duplicated", r.id),
            });
        }
        if let Some(s) = r.severity {
            if !(0.0..=8.0).contains(&s) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("severity {s} outside [0, 8]"),
                });
            }
        }
    }
    Ok(reports)
}

pub fn write_reports(path: &Path, reports: &[Report]) -> Result<()> {
    write_jsonl(path, reports)
}

fn check_roi_sets(sets: &[RoiSet]) -> Result<()> {
    let dim = sets.first().map_or(0, RoiSet::feature_dim);
    let mut seen = HashSet::new();
    for s in sets {
        for r in &s.rois {
            if r.feat.len() != dim {
                return Err(Error::FeatureDimMismatch {
                    expected: dim,
                    found: r.feat.len(),
                });
            }
        }
        s.validate()?;
        if !seen.insert(s.image_id.as_str()) {
            return Err(Error::InvalidConfig(format!(
                "duplicate ROI record for `{}`",
                s.image_id
            )));
        }
    }
    Ok(())
}

/// Read ROI sets from either format; the binary bundle is recognized by
/// its magic bytes.
pub fn read_roi_sets(path: &Path) -> Result<Vec<RoiSet>> {
    let head = {
        let mut f = fs::File::open(path)?;
        let mut b = [0u8; 4];
        let n = std::io::Read::read(&mut f, &mut b)?;
        b[..n].to_vec()
    };
    let sets = if head == ROI_MAGIC {
        read_roi_bundle(&fs::read(path)?)?
    } else {
        read_jsonl(path)?
    };
    check_roi_sets(&sets)?;
    Ok(sets)
}

pub fn write_roi_sets_jsonl(path: &Path, sets: &[RoiSet]) -> Result<()> {
    write_jsonl(path, sets)
}

/// Binary bundle: magic `XROI`, `u16` version, `u32` image count, `u32`
/// feature dim; then per image `u32` id length, id bytes, `u32` ROI count,
/// and per ROI `f32` score, `4 × f32` box, `dim × f32` features.
pub fn roi_bundle_bytes(sets: &[RoiSet]) -> Result<Vec<u8>> {
    check_roi_sets(sets)?;
    let dim = sets.first().map_or(0, RoiSet::feature_dim);
    let mut buf = Vec::new();
    buf.extend_from_slice(ROI_MAGIC);
    buf.extend_from_slice(&ROI_VERSION.to_le_bytes());
    buf.extend_from_slice(&(sets.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for s in sets {
        buf.extend_from_slice(&(s.image_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.image_id.as_bytes());
        buf.extend_from_slice(&(s.rois.len() as u32).to_le_bytes());
        for r in &s.rois {
            let vals = std::iter::once(r.score)
                .chain(r.bbox)
                .chain(r.feat.iter().copied());
            for v in vals {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(buf)
}

pub fn write_roi_bundle(path: &Path, sets: &[RoiSet]) -> Result<()> {
    write_atomic(path, &roi_bundle_bytes(sets)?)
}

/// Little-endian cursor over an in-memory file.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], pos: usize) -> Self {
        Self { bytes, pos }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "file truncated",
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn read_roi_bundle(bytes: &[u8]) -> Result<Vec<RoiSet>> {
    if bytes.len() < 4 || &bytes[..4] != ROI_MAGIC {
        return Err(Error::BadMagic { expected: "XROI" });
    }
    let mut r = ByteReader::new(bytes, 4);
    let version = r.u16()?;
    if version != ROI_VERSION {
        return Err(Error::VersionUnsupported {
            found: version,
            supported: ROI_VERSION,
        });
    }
    let images = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut sets = Vec::with_capacity(images.min(1 << 16));
    for _ in 0..images {
        let len = r.u32()? as usize;
        let id = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Parse {
            line: 0,
            msg: format!("image id: {e}"),
        })?;
        let n = r.u32()? as usize;
        let mut rois = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let vals: Vec<f64> = r.f32s(5 + dim)?.into_iter().map(f64::from).collect();
            rois.push(Roi {
                score: vals[0],
                bbox: [vals[1], vals[2], vals[3], vals[4]],
                feat: vals[5..].to_vec(),
            });
        }
        sets.push(RoiSet { image_id: id, rois });
    }
    if !r.is_done() {
        return Err(Error::Parse {
            line: 0,
            msg: "trailing bytes in ROI bundle".into(),
        });
    }
    Ok(sets)
}

/// Ground-truth boxes for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: String,
    pub boxes: Vec<[f64; 4]>,
}

pub fn read_annotations(path: &Path) -> Result<HashMap<String, Vec<[f64; 4]>>> {
    let recs: Vec<Annotation> = read_jsonl(path)?;
    let mut out: HashMap<String, Vec<[f64; 4]>> = HashMap::new();
    for a in recs {
        out.entry(a.id).or_default().extend(a.boxes);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    write_jsonl(path, annotations)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    read_jsonl(path)
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    write_jsonl(path, detections)
}

/// Joined training data.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Images dropped because no attribute was extracted from their report.
    pub dropped: usize,
    pub ground_truth: HashMap<String, Vec<[f64; 4]>>,
    pub severity: HashMap<String, f64>,
}

/// Join reports and ROI sets by id, extract attributes and embed them.
/// Images without any extracted attribute are dropped and counted.
pub fn load_dataset(
    reports_path: &Path,
    rois_path: &Path,
    annotations_path: Option<&Path>,
    table: &EmbeddingTable,
    disease_terms: &DiseaseTerms,
) -> Result<Dataset> {
    let reports = read_reports(reports_path)?;
    let sets = read_roi_sets(rois_path)?;
    let vocab = AttributeVocabulary::load();

    let mut by_id: HashMap<String, RoiSet> =
        sets.into_iter().map(|s| (s.image_id.clone(), s)).collect();
    let mut ds = Dataset::default();
    for report in &reports {
        let set = by_id
            .remove(&report.id)
            .ok_or_else(|| Error::IdMismatch(report.id.clone()))?;
        if let Some(s) = report.severity {
            ds.severity.insert(report.id.clone(), s);
        }
        let attrs = extract_attributes(report, &vocab, disease_terms);
        if attrs.is_empty() {
            ds.dropped += 1;
            continue;
        }
        ds.samples.push(Sample::new(set, attrs, &vocab, table)?);
    }
    if let Some(orphan) = by_id.into_keys().min() {
        return Err(Error::IdMismatch(orphan));
    }
    if let Some(p) = annotations_path {
        ds.ground_truth = read_annotations(p)?;
    }
    info!(
        "loaded {} samples ({} dropped without attributes)",
        ds.samples.len(),
        ds.dropped
    );
    Ok(ds)
}
