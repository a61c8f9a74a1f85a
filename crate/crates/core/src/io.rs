//! File formats and artifact bookkeeping.
//!
//! Every artifact is written atomically (temporary file, then rename) and its
//! SHA-256 is recorded in the directory's `manifest.json`. Readers verify the
//! checksum before parsing, so a tampered or half-written file is rejected.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Dataset, DatasetMeta, Dimensions, Direction, Sample};
use crate::scalar::Real;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

const BINARY_MAGIC: &[u8; 8] = b"TMINFER1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Checksums of the artifacts in one output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: BTreeMap<String, String>,
}

/// An output directory with its manifest.
#[derive(Debug, Clone)]
pub struct ArtifactDir {
    root: PathBuf,
}

impl ArtifactDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::InvalidArgument(format!("no such directory: {}", root.display())));
        }
        Ok(Self { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let p = self.path(MANIFEST);
        if !p.is_file() {
            return Ok(Manifest::default());
        }
        serde_json::from_slice(&fs::read(&p)?).map_err(|e| Error::Format {
            file: MANIFEST.into(),
            msg: e.to_string(),
        })
    }

    /// Atomically writes `name` and records its checksum.
    pub fn put(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(name), bytes)?;
        let mut m = self.manifest()?;
        m.files.insert(name.to_owned(), sha256_hex(bytes));
        let mut text = serde_json::to_vec_pretty(&m)?;
        text.push(b'\n');
        write_atomic(&self.path(MANIFEST), &text)
    }

    /// Reads `name` after checking it against the manifest.
    pub fn get(&self, name: &str) -> Result<Vec<u8>> {
        let p = self.path(name);
        if !p.is_file() {
            return Err(Error::InvalidArgument(format!("missing input file {}", p.display())));
        }
        let bytes = fs::read(&p)?;
        let m = self.manifest()?;
        match m.files.get(name) {
            Some(sum) if *sum == sha256_hex(&bytes) => Ok(bytes),
            Some(_) => Err(Error::Checksum(name.to_owned())),
            None => Err(Error::Checksum(format!("{name} (not in manifest)"))),
        }
    }

    pub fn put_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(value)?;
        text.push(b'\n');
        self.put(name, &text)
    }

    pub fn get_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        let bytes = self.get(name)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            file: name.to_owned(),
            msg: e.to_string(),
        })
    }
}

/// Full-precision decimal rendering (17 significant digits).
pub fn fmt_real<S: Real>(v: S) -> String {
    format!("{:.16e}", v.as_f64())
}

fn parse_real<S: Real>(tok: &str, file: &str, line: usize) -> Result<S> {
    tok.trim()
        .parse::<f64>()
        .map(S::lit)
        .map_err(|e| Error::Format {
            file: file.to_owned(),
            msg: format!("line {line}: {e}"),
        })
}

/// One sample per line: input channels (row-major pixels) then output channels.
pub fn dataset_to_csv<S: Real>(ds: &Dataset<S>) -> String {
    let mut out = String::new();
    for s in &ds.samples {
        let line: Vec<String> = s.input.iter().chain(&s.output).map(|&v| fmt_real(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn dataset_from_csv<S: Real>(text: &str, dims: Dimensions, direction: Direction, meta: DatasetMeta) -> Result<Dataset<S>> {
    let n = dims.n_half();
    let file = "dataset.csv";
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals: Vec<S> = line
            .split(',')
            .map(|t| parse_real(t, file, i + 1))
            .collect::<Result<_>>()?;
        if vals.len() != 2 * n {
            return Err(Error::Format {
                file: file.into(),
                msg: format!("line {}: expected {} columns, found {}", i + 1, 2 * n, vals.len()),
            });
        }
        samples.push(Sample {
            input: vals[..n].to_vec(),
            output: vals[n..].to_vec(),
        });
    }
    Dataset::new(dims, samples, direction, meta)
}

/// Packed little-endian variant: magic, `w`, `M` (both `u64`), then the values of
/// every sample as `f64`.
pub fn dataset_to_binary<S: Real>(ds: &Dataset<S>) -> Vec<u8> {
    let n = ds.dims.n();
    let mut out = Vec::with_capacity(24 + 8 * n * ds.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(ds.dims.w() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for s in &ds.samples {
        for v in s.input.iter().chain(&s.output) {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

pub fn dataset_from_binary<S: Real>(bytes: &[u8], direction: Direction, meta: DatasetMeta) -> Result<Dataset<S>> {
    let bad = |msg: &str| Error::Format {
        file: "dataset.bin".into(),
        msg: msg.into(),
    };
    if bytes.len() < 24 || &bytes[..8] != BINARY_MAGIC {
        return Err(bad("missing header"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8-byte slice"));
    let dims = Dimensions::new(word(8) as usize)?;
    let m = word(16) as usize;
    let n = dims.n();
    if bytes.len() != 24 + 8 * n * m {
        return Err(bad("length does not match header"));
    }
    let vals: Vec<S> = bytes[24..]
        .chunks_exact(8)
        .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    let half = dims.n_half();
    let samples = vals
        .chunks_exact(n)
        .map(|c| Sample {
            input: c[..half].to_vec(),
            output: c[half..].to_vec(),
        })
        .collect();
    Dataset::new(dims, samples, direction, meta)
}

/// `# rows,cols` header, then one comma-separated row per line.
pub fn matrix_to_csv<S: Real>(m: &Array2<S>) -> String {
    let (r, c) = m.dim();
    let mut out = format!("# {r},{c}\n");
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|&v| fmt_real(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv<S: Real>(text: &str, file: &str) -> Result<Array2<S>> {
    let bad = |msg: String| Error::Format {
        file: file.to_owned(),
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let shape = header
        .strip_prefix('#')
        .ok_or_else(|| bad("missing '#' shape header".into()))?;
    let dims: Vec<usize> = shape
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| bad(format!("shape header: {e}"))))
        .collect::<Result<_>>()?;
    let (r, c) = match dims[..] {
        [r, c] => (r, c),
        _ => return Err(bad("shape header needs two entries".into())),
    };
    let mut vals = Vec::with_capacity(r * c);
    let mut rows = 0;
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let before = vals.len();
        for t in line.split(',') {
            vals.push(parse_real::<S>(t, file, i + 2)?);
        }
        if vals.len() - before != c {
            return Err(bad(format!("line {}: expected {c} columns", i + 2)));
        }
        rows += 1;
    }
    if rows != r {
        return Err(bad(format!("expected {r} rows, found {rows}")));
    }
    Array2::from_shape_vec((r, c), vals).map_err(|e| bad(e.to_string()))
}

/// Single-column vector file with a `# len` header.
pub fn vector_to_csv<S: Real>(v: &[S]) -> String {
    let mut out = format!("# {}\n", v.len());
    for &x in v {
        out.push_str(&fmt_real(x));
        out.push('\n');
    }
    out
}

pub fn vector_from_csv<S: Real>(text: &str, file: &str) -> Result<Vec<S>> {
    let bad = |msg: String| Error::Format {
        file: file.to_owned(),
        msg,
    };
    let mut lines = text.lines();
    let len: usize = lines
        .next()
        .and_then(|h| h.strip_prefix('#'))
        .ok_or_else(|| bad("missing '#' length header".into()))?
        .trim()
        .parse()
        .map_err(|e| bad(format!("length header: {e}")))?;
    let v: Vec<S> = lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_real(l, file, i + 2))
        .collect::<Result<_>>()?;
    if v.len() != len {
        return Err(bad(format!("expected {len} values, found {}", v.len())));
    }
    Ok(v)
}

/// Envelope around every JSON result: versions, the run's config fingerprint and
/// the fingerprint of the dataset it derives from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub format_version: u32,
    pub tool_version: String,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub payload: T,
}

impl<T> Envelope<T> {
    pub fn new(config_fingerprint: &str, dataset_fingerprint: &str, payload: T) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            tool_version: TOOL_VERSION.to_owned(),
            config_fingerprint: config_fingerprint.to_owned(),
            dataset_fingerprint: dataset_fingerprint.to_owned(),
            payload,
        }
    }

    /// Rejects results produced by another run.
    pub fn check(&self, config_fingerprint: &str) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                file: "envelope".into(),
                msg: format!("unsupported format version {}", self.format_version),
            });
        }
        if self.config_fingerprint != config_fingerprint {
            return Err(Error::Fingerprint {
                expected: config_fingerprint.to_owned(),
                found: self.config_fingerprint.clone(),
            });
        }
        Ok(())
    }
}

/// Sidecar of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub tool_version: String,
    pub config_fingerprint: String,
    pub w: usize,
    pub m_samples: usize,
    pub direction: Direction,
    pub seed: u64,
    pub sigma: Vec<f64>,
    pub source: String,
    /// Name of the data file this header describes.
    pub data_file: String,
    pub checksum: String,
    pub fingerprint: String,
}

pub const DATASET_CSV: &str = "dataset.csv";
pub const DATASET_BIN: &str = "dataset.bin";
pub const DATASET_META: &str = "dataset.meta.json";

/// Writes the dataset (text or packed) plus its sidecar.
pub fn save_dataset<S: Real>(dir: &ArtifactDir, ds: &Dataset<S>, binary: bool, config_fingerprint: &str) -> Result<()> {
    let (name, bytes) = if binary {
        (DATASET_BIN, dataset_to_binary(ds))
    } else {
        (DATASET_CSV, dataset_to_csv(ds).into_bytes())
    };
    dir.put(name, &bytes)?;
    let header = DatasetHeader {
        format_version: FORMAT_VERSION,
        tool_version: TOOL_VERSION.to_owned(),
        config_fingerprint: config_fingerprint.to_owned(),
        w: ds.dims.w(),
        m_samples: ds.len(),
        direction: ds.direction,
        seed: ds.meta.seed,
        sigma: ds.meta.sigma.clone(),
        source: ds.meta.source.clone(),
        data_file: name.to_owned(),
        checksum: sha256_hex(&bytes),
        fingerprint: ds.fingerprint(),
    };
    dir.put_json(DATASET_META, &header)
}

pub fn load_dataset<S: Real>(dir: &ArtifactDir) -> Result<(Dataset<S>, DatasetHeader)> {
    let header: DatasetHeader = dir.get_json(DATASET_META)?;
    let bytes = dir.get(&header.data_file)?;
    if sha256_hex(&bytes) != header.checksum {
        return Err(Error::Checksum(header.data_file.clone()));
    }
    let meta = DatasetMeta {
        seed: header.seed,
        sigma: header.sigma.clone(),
        source: header.source.clone(),
    };
    let ds = match header.data_file.as_str() {
        DATASET_BIN => dataset_from_binary(&bytes, header.direction, meta)?,
        DATASET_CSV => {
            let text = String::from_utf8(bytes).map_err(|e| Error::Format {
                file: DATASET_CSV.into(),
                msg: e.to_string(),
            })?;
            dataset_from_csv(&text, Dimensions::new(header.w)?, header.direction, meta)?
        }
        other => {
            return Err(Error::Format {
                file: DATASET_META.into(),
                msg: format!("unknown data file {other}"),
            })
        }
    };
    if ds.dims.w() != header.w || ds.len() != header.m_samples {
        return Err(Error::Format {
            file: header.data_file.clone(),
            msg: "shape disagrees with the sidecar".into(),
        });
    }
    if ds.fingerprint() != header.fingerprint {
        return Err(Error::Fingerprint {
            expected: header.fingerprint.clone(),
            found: ds.fingerprint(),
        });
    }
    Ok((ds, header))
}

pub fn save_matrix<S: Real>(dir: &ArtifactDir, name: &str, m: &Array2<S>) -> Result<()> {
    dir.put(name, matrix_to_csv(m).as_bytes())
}

pub fn load_matrix<S: Real>(dir: &ArtifactDir, name: &str) -> Result<Array2<S>> {
    let bytes = dir.get(name)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Format {
        file: name.to_owned(),
        msg: e.to_string(),
    })?;
    matrix_from_csv(&text, name)
}
