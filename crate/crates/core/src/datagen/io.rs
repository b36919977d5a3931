//! On-disk dataset: `manifest.jsonl` plus one `.serf` feature file per utterance.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use super::Utterance;
use crate::diffcore::Tensor;
use crate::emotion::Emotion;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FEATURE_MAGIC: &[u8; 4] = b"SERF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_BYTES: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: field `{field}`: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error("{path}:{line}: not valid JSON: {message}")]
    Json { path: PathBuf, line: usize, message: String },
    #[error("{path}: expected {expected} bytes, found {actual}")]
    Truncated { path: PathBuf, expected: usize, actual: usize },
    #[error("{path}: at byte offset {offset}: {message}")]
    Feature {
        path: PathBuf,
        offset: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_features(t: &Tensor) -> Vec<u8> {
    let shape = t.shape();
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * t.len());
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION, shape[0] as u32, shape[1] as u32, shape[2] as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor, DataError> {
    let feature_err = |offset: usize, message: String| DataError::Feature {
        path: path.to_path_buf(),
        offset,
        message,
    };
    if bytes.len() < HEADER_BYTES {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_BYTES,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(feature_err(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32_at(bytes, 4);
    if version != FEATURE_VERSION {
        return Err(feature_err(4, format!("unsupported version {version}")));
    }
    let dims = [u32_at(bytes, 8), u32_at(bytes, 12), u32_at(bytes, 16)].map(|v| v as usize);
    if let Some(i) = dims.iter().position(|&v| v == 0) {
        return Err(feature_err(8 + 4 * i, "zero-sized dimension".into()));
    }
    let expected = HEADER_BYTES + 4 * dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new(dims.to_vec(), data).map_err(|e| feature_err(8, e.to_string()))
}

fn feature_path(id: &str) -> String {
    format!("features/{id}.serf")
}

pub fn write_dataset(corpus: &[Utterance], dir: &Path) -> Result<(), DataError> {
    let features_dir = dir.join("features");
    fs::create_dir_all(&features_dir).map_err(io_err(&features_dir))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut manifest = BufWriter::new(file);
    for u in corpus {
        let rel = feature_path(&u.id);
        let fpath = dir.join(&rel);
        fs::write(&fpath, encode_features(&u.features)).map_err(io_err(&fpath))?;
        let row = json!({
            "id": u.id,
            "features_file": rel,
            "n_layers": u.n_layers(),
            "n_frames": u.n_frames(),
            "dim": u.dim(),
            "transcript": u.transcript,
            "descriptor_caption": u.descriptor_caption,
            "emotion": u.emotion,
        });
        writeln!(manifest, "{row}").map_err(io_err(&manifest_path))?;
    }
    manifest.flush().map_err(io_err(&manifest_path))
}

struct Row<'a> {
    path: &'a Path,
    line: usize,
    obj: Map<String, Value>,
}

impl Row<'_> {
    fn err(&self, field: &str, message: impl Into<String>) -> DataError {
        DataError::Manifest {
            path: self.path.to_path_buf(),
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn field(&self, name: &str) -> Result<&Value, DataError> {
        self.obj.get(name).ok_or_else(|| self.err(name, "missing"))
    }

    fn string(&self, name: &str) -> Result<String, DataError> {
        self.field(name)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.err(name, "expected a string"))
    }

    fn count(&self, name: &str) -> Result<usize, DataError> {
        match self.field(name)?.as_u64() {
            Some(v) if v > 0 => Ok(v as usize),
            _ => Err(self.err(name, "expected a positive integer")),
        }
    }

    fn tokens(&self, name: &str) -> Result<Vec<String>, DataError> {
        let arr = self
            .field(name)?
            .as_array()
            .ok_or_else(|| self.err(name, "expected an array of strings"))?;
        arr.iter()
            .map(|v| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| self.err(name, "expected an array of strings"))
            })
            .collect()
    }
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Utterance>, DataError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let value: Value = serde_json::from_str(line).map_err(|e| DataError::Json {
            path: manifest_path.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        let Value::Object(obj) = value else {
            return Err(DataError::Json {
                path: manifest_path.clone(),
                line: line_no,
                message: "expected an object".into(),
            });
        };
        let row = Row {
            path: &manifest_path,
            line: line_no,
            obj,
        };
        let id = row.string("id")?;
        let emotion_label = row.string("emotion")?;
        let emotion = Emotion::parse(&emotion_label)
            .ok_or_else(|| row.err("emotion", format!("unknown label `{emotion_label}`")))?;
        let transcript = row.tokens("transcript")?;
        if transcript.is_empty() {
            return Err(row.err("transcript", "must not be empty"));
        }
        let descriptor_caption = row.tokens("descriptor_caption")?;
        let dims = [row.count("n_layers")?, row.count("n_frames")?, row.count("dim")?];
        if dims[0] < 2 {
            return Err(row.err("n_layers", "need at least 2 layers"));
        }
        let rel = row.string("features_file")?;
        let fpath = dir.join(&rel);
        let bytes = fs::read(&fpath).map_err(io_err(&fpath))?;
        let features = decode_features(&bytes, &fpath)?;
        for (name, (&want, &got)) in ["n_layers", "n_frames", "dim"].iter().zip(dims.iter().zip(features.shape())) {
            if want != got {
                return Err(row.err(name, format!("manifest says {want}, feature file has {got}")));
            }
        }
        out.push(Utterance {
            id,
            features,
            transcript,
            descriptor_caption,
            emotion,
        });
    }
    Ok(out)
}
