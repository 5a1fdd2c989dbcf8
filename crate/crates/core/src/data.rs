//! Feature files, dataset manifests and a synthetic re-identification set.
//!
//! Two feature formats are read:
//!
//! * CSV with header `id,camera,path,f0,…,f{d−1}`; an empty `path` means no
//!   image.
//! * Binary, little-endian: magic `b"TMAF"`, `u32` version (= 1), `u32`
//!   record count, `u32` dimension, then per record a `u16` byte length and
//!   the UTF-8 person id, a `u8` camera, and `dim` `f64` values.
//!
//! A manifest is a JSON document naming the feature file (relative to the
//! manifest) and the train/test identity split.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::FeatureRecord;

pub const BINARY_MAGIC: &[u8; 4] = b"TMAF";
const BINARY_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    Csv,
    Binary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// Expected feature dimension; inferred from the feature file when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    /// Feature file, relative to the manifest's directory.
    pub features: PathBuf,
    /// Inferred from the file's magic bytes when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<FeatureFormat>,
    pub split: Split,
    #[serde(default)]
    pub probe_camera: u8,
    #[serde(default = "default_gallery_camera")]
    pub gallery_camera: u8,
}

fn default_gallery_camera() -> u8 {
    1
}

/// Where one record came from in the feature file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordDescriptor {
    pub person_id: String,
    pub camera_id: u8,
    pub row: usize,
    pub image_path: Option<String>,
}

/// A loaded dataset: every record plus the identity split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub dim: usize,
    pub records: Vec<Arc<FeatureRecord>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Test,
}

/// Probe and gallery records of one split, each sorted by person id.
#[derive(Clone, Debug)]
pub struct ProbeGallery {
    pub probes: Vec<Arc<FeatureRecord>>,
    pub gallery: Vec<Arc<FeatureRecord>>,
}

impl ProbeGallery {
    pub fn pair_count(&self) -> usize {
        self.probes.len() * self.gallery.len()
    }
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, records: Vec<FeatureRecord>) -> Result<Self> {
        let dim = check_records(&records, manifest.d)?;
        check_split(&manifest.split, &records)?;
        Ok(Self {
            manifest,
            dim,
            records: records.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn descriptors(&self) -> Vec<RecordDescriptor> {
        self.records
            .iter()
            .enumerate()
            .map(|(row, r)| RecordDescriptor {
                person_id: r.person_id.clone(),
                camera_id: r.camera_id,
                row,
                image_path: r.image_path.clone(),
            })
            .collect()
    }

    pub fn split(&self, kind: SplitKind) -> ProbeGallery {
        let ids: BTreeSet<&str> = match kind {
            SplitKind::Train => &self.manifest.split.train,
            SplitKind::Test => &self.manifest.split.test,
        }
        .iter()
        .map(String::as_str)
        .collect();
        let pick = |camera: u8| {
            let mut v: Vec<Arc<FeatureRecord>> = self
                .records
                .iter()
                .filter(|r| r.camera_id == camera && ids.contains(r.person_id.as_str()))
                .cloned()
                .collect();
            v.sort_by(|a, b| a.person_id.cmp(&b.person_id));
            v
        };
        ProbeGallery {
            probes: pick(self.manifest.probe_camera),
            gallery: pick(self.manifest.gallery_camera),
        }
    }
}

fn check_records(records: &[FeatureRecord], expected: Option<usize>) -> Result<usize> {
    let dim = match (expected, records.first()) {
        (Some(d), _) => d,
        (None, Some(r)) => r.dim(),
        (None, None) => return Err(Error::Schema("dataset has no records".into())),
    };
    for (i, r) in records.iter().enumerate() {
        if r.dim() != dim {
            return Err(Error::Schema(format!(
                "record {i} ({}) has dimension {}, expected {dim}",
                r.person_id,
                r.dim()
            )));
        }
    }
    Ok(dim)
}

fn check_split(split: &Split, records: &[FeatureRecord]) -> Result<()> {
    let train: BTreeSet<&str> = split.train.iter().map(String::as_str).collect();
    let test: BTreeSet<&str> = split.test.iter().map(String::as_str).collect();
    if let Some(id) = train.intersection(&test).next() {
        return Err(Error::Schema(format!("identity {id} is in both splits")));
    }
    for r in records {
        let id = r.person_id.as_str();
        if !train.contains(id) && !test.contains(id) {
            return Err(Error::Schema(format!("identity {id} is in no split")));
        }
    }
    Ok(())
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest: DatasetManifest = serde_json::from_reader(BufReader::new(File::open(manifest_path)?))
        .map_err(|e| Error::Parse {
            location: format!("{}:{}:{}", manifest_path.display(), e.line(), e.column()),
            message: e.to_string(),
        })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let features_path = base.join(&manifest.features);
    let format = match manifest.format {
        Some(f) => f,
        None => sniff_format(&features_path)?,
    };
    let records = match format {
        FeatureFormat::Csv => read_csv(BufReader::new(File::open(&features_path)?))?,
        FeatureFormat::Binary => read_binary(BufReader::new(File::open(&features_path)?))?,
    };
    Dataset::new(manifest, records)
}

fn sniff_format(path: &Path) -> Result<FeatureFormat> {
    let mut head = [0u8; 4];
    let n = File::open(path)?.read(&mut head)?;
    Ok(if n == 4 && &head == BINARY_MAGIC {
        FeatureFormat::Binary
    } else {
        FeatureFormat::Csv
    })
}

pub fn read_csv<R: Read>(reader: R) -> Result<Vec<FeatureRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err("header", e))?.clone();
    if header.len() < 4 || &header[0] != "id" || &header[1] != "camera" || &header[2] != "path" {
        return Err(Error::Parse {
            location: "line 1".into(),
            message: "expected header id,camera,path,f0,...".into(),
        });
    }
    for (j, name) in header.iter().skip(3).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::Parse {
                location: "line 1".into(),
                message: format!("feature column {j} is named {name:?}, expected \"f{j}\""),
            });
        }
    }
    let dim = header.len() - 3;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(&format!("line {line}"), e)
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let at = |msg: String| Error::Parse { location: format!("line {line}"), message: msg };
        if row.len() != dim + 3 {
            return Err(at(format!("expected {} fields, found {}", dim + 3, row.len())));
        }
        let camera: u8 = row[1].parse().map_err(|e| at(format!("camera: {e}")))?;
        let feature = row
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>().map_err(|e| at(format!("feature {v:?}: {e}"))))
            .collect::<Result<Array1<f64>>>()?;
        let mut rec = FeatureRecord::new(&row[0], camera, feature).map_err(|e| at(e.to_string()))?;
        if !row[2].is_empty() {
            rec.image_path = Some(row[2].to_string());
        }
        out.push(rec);
    }
    Ok(out)
}

fn parse_err(location: &str, e: csv::Error) -> Error {
    Error::Parse { location: location.into(), message: e.to_string() }
}

pub fn write_csv<W: Write>(records: &[FeatureRecord], writer: W) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.dim());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "camera".into(), "path".into()];
    header.extend((0..dim).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| parse_err("write", e))?;
    for r in records {
        let mut row = vec![r.person_id.clone(), r.camera_id.to_string(), r.image_path.clone().unwrap_or_default()];
        row.extend(r.feature.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| parse_err("write", e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<Vec<FeatureRecord>> {
    let schema = |what: &str| Error::Schema(format!("binary feature file: {what}"));
    let eof = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            schema("truncated")
        } else {
            Error::Io(e)
        }
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != BINARY_MAGIC {
        return Err(schema("bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != BINARY_VERSION {
        return Err(schema(&format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let dim = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = r.read_u16::<LittleEndian>().map_err(eof)? as usize;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id).map_err(eof)?;
        let id = String::from_utf8(id).map_err(|_| schema(&format!("record {i}: id is not UTF-8")))?;
        let camera = r.read_u8().map_err(eof)?;
        let mut feature = vec![0.0; dim];
        r.read_f64_into::<LittleEndian>(&mut feature).map_err(eof)?;
        out.push(FeatureRecord::new(id, camera, Array1::from(feature)).map_err(|e| schema(&format!("record {i}: {e}")))?);
    }
    Ok(out)
}

pub fn write_binary<W: Write>(records: &[FeatureRecord], mut w: W) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.dim());
    w.write_all(BINARY_MAGIC)?;
    w.write_u32::<LittleEndian>(BINARY_VERSION)?;
    w.write_u32::<LittleEndian>(records.len() as u32)?;
    w.write_u32::<LittleEndian>(dim as u32)?;
    for r in records {
        if r.dim() != dim {
            return Err(Error::Schema(format!("record {} has dimension {}, expected {dim}", r.person_id, r.dim())));
        }
        let id = r.person_id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| Error::Schema(format!("id {} too long", r.person_id)))?;
        w.write_u16::<LittleEndian>(len)?;
        w.write_all(id)?;
        w.write_u8(r.camera_id)?;
        for &v in r.feature.iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `features.{csv,bin}` and `manifest.json` into `dir`; returns the
/// manifest path.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>, format: FeatureFormat) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let records: Vec<FeatureRecord> = dataset.records.iter().map(|r| (**r).clone()).collect();
    let file = match format {
        FeatureFormat::Csv => "features.csv",
        FeatureFormat::Binary => "features.bin",
    };
    let out = BufWriter::new(File::create(dir.join(file))?);
    match format {
        FeatureFormat::Csv => write_csv(&records, out)?,
        FeatureFormat::Binary => write_binary(&records, out)?,
    }
    let manifest = DatasetManifest {
        features: PathBuf::from(file),
        format: Some(format),
        d: Some(dataset.dim),
        ..dataset.manifest.clone()
    };
    let path = dir.join("manifest.json");
    serde_json::to_writer_pretty(BufWriter::new(File::create(&path)?), &manifest)?;
    Ok(path)
}

/// Two-camera single-shot identities drawn around latent appearance vectors.
///
/// Each identity has a latent appearance `a ∈ ℝ^m`. Camera `c` sees
/// `G_c a + o_c` plus isotropic noise in the first `m` dimensions, while the
/// remaining `d − m` dimensions carry identity-free clutter with a larger
/// spread, so that a plain Euclidean match is confused and a learned
/// projection has something to discard. Features are scaled to unit
/// expected norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub train_identities: usize,
    pub test_identities: usize,
    pub dim: usize,
    /// Number of identity-bearing dimensions `m`.
    pub informative: usize,
    /// Spread of the per-camera distortion `G_c − I`.
    pub camera_distortion: f64,
    /// Standard deviation of the per-image noise in informative dimensions.
    pub noise: f64,
    /// Standard deviation of the clutter dimensions.
    pub clutter: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_identities: 40,
            test_identities: 100,
            dim: 30,
            informative: 20,
            camera_distortion: 0.3,
            noise: 0.4,
            clutter: 0.5,
            seed: 2016,
        }
    }
}

pub fn synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.informative == 0 || cfg.informative > cfg.dim {
        return Err(Error::InvalidArgument("informative must be in 1..=dim".into()));
    }
    if cfg.train_identities == 0 {
        return Err(Error::InvalidArgument("need at least one training identity".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.informative;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let cameras: Vec<(Array2<f64>, Array1<f64>)> = (0..2)
        .map(|_| {
            let g = Array2::from_shape_fn((m, m), |(i, j)| {
                let e: f64 = normal(&mut rng) * cfg.camera_distortion / (m as f64).sqrt();
                if i == j {
                    1.0 + e
                } else {
                    e
                }
            });
            let o = Array1::from_shape_simple_fn(m, || normal(&mut rng) * cfg.camera_distortion);
            (g, o)
        })
        .collect();
    // expected squared norm before scaling
    let norm2 = m as f64 * (1.0 + cfg.noise * cfg.noise) + (cfg.dim - m) as f64 * cfg.clutter * cfg.clutter;
    let scale = 1.0 / norm2.sqrt();

    let total = cfg.train_identities + cfg.test_identities;
    let width = total.to_string().len();
    let mut records = Vec::with_capacity(2 * total);
    let mut split = Split::default();
    for i in 0..total {
        let id = format!("id{:0width$}", i, width = width);
        let latent = Array1::from_shape_simple_fn(m, || normal(&mut rng));
        for (cam, (g, o)) in cameras.iter().enumerate() {
            let mut x = Array1::zeros(cfg.dim);
            let seen = g.dot(&latent) + o;
            for j in 0..m {
                x[j] = seen[j] + cfg.noise * normal(&mut rng);
            }
            for j in m..cfg.dim {
                x[j] = cfg.clutter * normal(&mut rng);
            }
            x *= scale;
            records.push(FeatureRecord::new(id.clone(), cam as u8, x)?);
        }
        if i < cfg.train_identities {
            split.train.push(id);
        } else {
            split.test.push(id);
        }
    }
    let manifest = DatasetManifest {
        name: format!("synthetic-{}", cfg.seed),
        d: Some(cfg.dim),
        features: PathBuf::from("features.csv"),
        format: Some(FeatureFormat::Csv),
        split,
        probe_camera: 0,
        gallery_camera: 1,
    };
    Dataset::new(manifest, records)
}

/// Maps person ids to their index in a record slice.
pub fn index_by_id(records: &[Arc<FeatureRecord>]) -> HashMap<&str, usize> {
    records.iter().enumerate().map(|(i, r)| (r.person_id.as_str(), i)).collect()
}
