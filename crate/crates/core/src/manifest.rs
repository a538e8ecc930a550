//! Dataset manifests and generated chain files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Category;
use crate::homography::{Correspondences, Homography, HomographyJson};

/// Fewest labelled points an estimation can use.
pub const MIN_POINTS: usize = 4;
/// Labelling floor of the reference datasets; fewer points only warn.
pub const RECOMMENDED_POINTS: usize = 6;

/// One labelled image pair. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub source: PathBuf,
    pub target: PathBuf,
    pub points: Vec<[f64; 4]>,
    pub category: Category,
    /// Recorded ground truth, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<HomographyJson>,
    /// Chain file the pair was generated from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<PathBuf>,
}

impl DatasetRecord {
    /// `id`, or the position in the manifest.
    pub fn pair_id(&self, index: usize) -> String {
        self.id.clone().unwrap_or_else(|| format!("{index:04}"))
    }

    pub fn correspondences(&self) -> Result<Correspondences> {
        Correspondences::from_tuples(&self.points)
    }

    pub fn ground_truth(&self) -> Result<Option<Homography>> {
        self.homography.as_ref().map(Homography::try_from).transpose()
    }
}

fn validate(records: &[DatasetRecord]) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        let name = format!("record {i} ({})", r.pair_id(i));
        if r.points.len() < MIN_POINTS {
            return Err(Error::Validation(format!(
                "{name} has {} labelled points, at least {MIN_POINTS} are required",
                r.points.len()
            )));
        }
        if r.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("{name} has a non-finite point")));
        }
        if r.source.as_os_str().is_empty() || r.target.as_os_str().is_empty() {
            return Err(Error::Validation(format!("{name} has an empty image path")));
        }
        r.correspondences()
            .map_err(|e| Error::Validation(format!("{name}: {e}")))?;
        r.ground_truth()
            .map_err(|e| Error::Validation(format!("{name}: {e}")))?;
    }
    Ok(())
}

/// Parses and validates a manifest document.
pub fn parse_manifest_str(text: &str, context: &str) -> Result<Vec<DatasetRecord>> {
    let records: Vec<DatasetRecord> = serde_json::from_str(text).map_err(|e| Error::Parse {
        context: format!("{context}:{}:{}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    validate(&records)?;
    Ok(records)
}

pub fn parse_manifest(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = read_existing(path)?;
    parse_manifest_str(&text, &path.display().to_string())
}

/// Records labelled below the recommended floor.
pub fn manifest_warnings(records: &[DatasetRecord]) -> Vec<String> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.points.len() < RECOMMENDED_POINTS)
        .map(|(i, r)| {
            format!(
                "record {i} ({}) has only {} labelled points (fewer than {RECOMMENDED_POINTS})",
                r.pair_id(i),
                r.points.len()
            )
        })
        .collect()
}

pub fn manifest_to_string(records: &[DatasetRecord]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(records).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_manifest(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    write_atomic(path, manifest_to_string(records)?.as_bytes())
}

/// Ground truth and image files of one generated chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainFile {
    pub seed: u64,
    pub n: usize,
    pub crop_origin: (usize, usize),
    pub width: usize,
    pub height: usize,
    /// `I_s0 … I_sn`, relative to the chain file.
    pub images: Vec<PathBuf>,
    pub target: PathBuf,
    /// `hops[i]`: `I_si -> I_s(i+1)`.
    pub hops: Vec<HomographyJson>,
    /// `bridges[i]`: `I_s(i+1) -> I_t`.
    pub bridges: Vec<HomographyJson>,
    pub h_st: HomographyJson,
    pub non_overlap_rate: f64,
}

impl ChainFile {
    pub fn hop_homographies(&self) -> Result<Vec<Homography>> {
        self.hops.iter().map(Homography::try_from).collect()
    }

    pub fn bridge_homographies(&self) -> Result<Vec<Homography>> {
        self.bridges.iter().map(Homography::try_from).collect()
    }

    pub fn st_homography(&self) -> Result<Homography> {
        Homography::try_from(&self.h_st)
    }
}

pub fn parse_chain_file(path: &Path) -> Result<ChainFile> {
    let text = read_existing(path)?;
    let chain: ChainFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })?;
    if chain.images.len() != chain.n + 1 || chain.hops.len() != chain.n || chain.bridges.len() != chain.n {
        return Err(Error::Validation(format!(
            "{}: n = {} with {} images, {} hops, {} bridges",
            path.display(),
            chain.n,
            chain.images.len(),
            chain.hops.len(),
            chain.bridges.len()
        )));
    }
    Ok(chain)
}

/// What a reader of the written JSON of `h` obtains, bit for bit.
pub fn recorded(h: &Homography) -> Result<Homography> {
    Homography::try_from(&HomographyJson::from(h))
}

fn read_existing(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    Ok(fs::read_to_string(path)?)
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
