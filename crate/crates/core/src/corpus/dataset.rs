//! JSON-lines dataset files.
//!
//! The first line is a header record declaring the feature dimensions:
//!
//! ```text
//! {"dataset":"capgen","version":1,"region_dim":16,"image_dim":16}
//! ```
//!
//! Every following non-blank line is one image:
//!
//! ```text
//! {"image_id":"img7","captions":["a dog on grass"],"regions":[[0.1, ...], ...],"image_feature":[...]}
//! ```
//!
//! `regions` may be replaced by `"regions_file": "bags/img7.bin"`, a sidecar
//! of little-endian `f64` values (row-major, `region_dim` per region)
//! resolved relative to the dataset file.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Caption, CorpusError};
use crate::util::substream;

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub dataset: String,
    pub version: u32,
    pub region_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_dim: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    image_id: String,
    captions: Vec<String>,
    #[serde(default)]
    regions: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    regions_file: Option<PathBuf>,
    #[serde(default)]
    image_feature: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    image_id: &'a str,
    captions: Vec<&'a str>,
    regions: &'a [Vec<f64>],
    #[serde(skip_serializing_if = "Option::is_none")]
    image_feature: Option<&'a Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub image_id: String,
    pub captions: Vec<Caption>,
    pub regions: Vec<Vec<f64>>,
    pub image_feature: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub region_dim: usize,
    pub image_dim: Option<usize>,
    pub entries: Vec<DatasetEntry>,
    /// Split of each entry, parallel to `entries`.
    pub split: Vec<Split>,
}

impl Dataset {
    /// Builds a dataset in memory, checking the same invariants as [`load`](Self::load).
    pub fn new(region_dim: usize, image_dim: Option<usize>, entries: Vec<DatasetEntry>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            validate_entry(e, region_dim, image_dim, i + 2)?;
            if !seen.insert(e.image_id.as_str()) {
                return Err(CorpusError::Malformed { line: i + 2, msg: format!("duplicate image_id {}", e.image_id) });
            }
        }
        let split = vec![Split::Train; entries.len()];
        Ok(Dataset { region_dim, image_dim, entries, split })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());

        let (hline, htext) = lines.next().ok_or(CorpusError::Malformed { line: 1, msg: "missing header record".into() })?;
        let header: DatasetHeader = serde_json::from_str(htext)
            .map_err(|e| CorpusError::Malformed { line: hline + 1, msg: format!("bad header: {e}") })?;
        if header.version != DATASET_VERSION {
            return Err(CorpusError::Malformed {
                line: hline + 1,
                msg: format!("unsupported dataset version {}", header.version),
            });
        }
        if header.region_dim == 0 {
            return Err(CorpusError::Malformed { line: hline + 1, msg: "region_dim must be positive".into() });
        }

        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, l) in lines {
            let line = i + 1;
            let raw: RawRecord =
                serde_json::from_str(l).map_err(|e| CorpusError::Malformed { line, msg: e.to_string() })?;
            let regions = match (raw.regions, raw.regions_file) {
                (Some(r), None) => r,
                (None, Some(p)) => read_sidecar(&base.join(&p), header.region_dim, line)?,
                (Some(_), Some(_)) => {
                    return Err(CorpusError::Malformed { line, msg: "both regions and regions_file given".into() })
                }
                (None, None) => return Err(CorpusError::Malformed { line, msg: "missing regions".into() }),
            };
            let mut captions = Vec::with_capacity(raw.captions.len());
            for (k, c) in raw.captions.iter().enumerate() {
                let cap = Caption::new(raw.image_id.clone(), c.clone())
                    .ok_or_else(|| CorpusError::Malformed { line, msg: format!("caption {k} has no tokens") })?;
                captions.push(cap);
            }
            let entry = DatasetEntry { image_id: raw.image_id, captions, regions, image_feature: raw.image_feature };
            validate_entry(&entry, header.region_dim, header.image_dim, line)?;
            if !seen.insert(entry.image_id.clone()) {
                return Err(CorpusError::Malformed { line, msg: format!("duplicate image_id {}", entry.image_id) });
            }
            entries.push(entry);
        }
        let split = vec![Split::Train; entries.len()];
        Ok(Dataset { region_dim: header.region_dim, image_dim: header.image_dim, entries, split })
    }

    /// Writes the dataset with inline regions.
    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let io = |source| CorpusError::Io { path: path.display().to_string(), source };
        let mut out = Vec::new();
        let header = DatasetHeader {
            dataset: "capgen".into(),
            version: DATASET_VERSION,
            region_dim: self.region_dim,
            image_dim: self.image_dim,
        };
        serde_json::to_writer(&mut out, &header).expect("header serializes");
        out.push(b'\n');
        for e in &self.entries {
            let rec = OutRecord {
                image_id: &e.image_id,
                captions: e.captions.iter().map(|c| c.raw.as_str()).collect(),
                regions: &e.regions,
                image_feature: e.image_feature.as_ref(),
            };
            serde_json::to_writer(&mut out, &rec).expect("record serializes");
            out.push(b'\n');
        }
        fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(io)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in &self.split {
            c[*s as usize] += 1;
        }
        c
    }

    pub fn captions(&self, split: Split) -> Vec<Caption> {
        self.indices(split).into_iter().flat_map(|i| self.entries[i].captions.iter().cloned()).collect()
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.image_id == image_id)
    }
}

fn validate_entry(e: &DatasetEntry, region_dim: usize, image_dim: Option<usize>, line: usize) -> Result<(), CorpusError> {
    if e.captions.is_empty() {
        return Err(CorpusError::Malformed { line, msg: "record has no captions".into() });
    }
    if e.regions.is_empty() {
        return Err(CorpusError::Malformed { line, msg: "record has no regions".into() });
    }
    for r in &e.regions {
        if r.len() != region_dim {
            return Err(CorpusError::DimensionMismatch { line, expected: region_dim, found: r.len() });
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(CorpusError::Malformed { line, msg: "non-finite region feature".into() });
        }
    }
    if let Some(f) = &e.image_feature {
        match image_dim {
            Some(d) if d != f.len() => {
                return Err(CorpusError::DimensionMismatch { line, expected: d, found: f.len() })
            }
            None => return Err(CorpusError::Malformed { line, msg: "image_feature without image_dim in header".into() }),
            _ => {}
        }
        if f.iter().any(|x| !x.is_finite()) {
            return Err(CorpusError::Malformed { line, msg: "non-finite image feature".into() });
        }
    }
    Ok(())
}

fn read_sidecar(path: &Path, dim: usize, line: usize) -> Result<Vec<Vec<f64>>, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    if bytes.len() % (8 * dim) != 0 {
        return Err(CorpusError::Malformed {
            line,
            msg: format!("sidecar {} holds {} bytes, not a multiple of {} regions", path.display(), bytes.len(), dim),
        });
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(values.chunks(dim).map(<[f64]>::to_vec).collect())
}

/// Largest-remainder apportionment of `n` items by `ratios`: every count is
/// within one of its exact share and the counts sum to `n`.
pub fn apportion(n: usize, ratios: [f64; 3]) -> Result<[usize; 3], CorpusError> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || total <= 0.0 {
        return Err(CorpusError::BadRatios(ratios));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Seeded shuffle of the images followed by [`apportion`] into train, val
/// and test.
pub fn split_dataset(mut dataset: Dataset, ratios: [f64; 3], seed: u64) -> Result<Dataset, CorpusError> {
    let counts = apportion(dataset.len(), ratios)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut substream(seed, "split"));
    for (k, &i) in order.iter().enumerate() {
        dataset.split[i] = if k < counts[0] {
            Split::Train
        } else if k < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str) -> DatasetEntry {
        DatasetEntry {
            image_id: id.into(),
            captions: vec![Caption::new(id, "a cat").unwrap()],
            regions: vec![vec![0.0, 1.0]],
            image_feature: None,
        }
    }

    #[test]
    fn ten_images_eighty_ten_ten() {
        let ds = Dataset::new(2, None, (0..10).map(|i| entry(&format!("i{i}"))).collect()).unwrap();
        let a = split_dataset(ds.clone(), [0.8, 0.1, 0.1], 42).unwrap();
        let b = split_dataset(ds, [0.8, 0.1, 0.1], 42).unwrap();
        assert_eq!(a.split_counts(), [8, 1, 1]);
        assert_eq!(a.split, b.split);
    }

    #[test]
    fn coco_style_split_counts() {
        let counts = apportion(82_729 + 20_243 + 20_244, [82_729.0, 20_243.0, 20_244.0]).unwrap();
        assert_eq!(counts, [82_729, 20_243, 20_244]);
        let halves = apportion(40_504, [0.0, 0.5, 0.5]).unwrap();
        assert_eq!(halves, [0, 20_252, 20_252]);
    }

    #[test]
    fn apportion_within_one() {
        for n in 0..60 {
            let r = [0.7, 0.2, 0.1];
            let c = apportion(n, r).unwrap();
            assert_eq!(c.iter().sum::<usize>(), n);
            for i in 0..3 {
                assert!((c[i] as f64 - n as f64 * r[i]).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn bad_ratios() {
        assert!(apportion(3, [0.0, 0.0, 0.0]).is_err());
        assert!(apportion(3, [-1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut e = entry("x");
        e.regions.push(vec![1.0]);
        assert!(matches!(Dataset::new(2, None, vec![e]), Err(CorpusError::DimensionMismatch { .. })));
    }
}
