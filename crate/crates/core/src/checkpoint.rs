//! Named-tensor container: a plain-text manifest followed by a little-endian
//! float32 payload. Used for model checkpoints and for externally produced
//! encoder vectors.
//!
//! ```text
//! hilat-checkpoint v1
//! d_model 32
//! n_labels 10
//! n_chunks 10
//! tensors 2
//! head.w 32 32 0
//! head.bias 1 10 4096
//! end
//! <raw little-endian f32 bytes>
//! ```
//!
//! Tensor values are stored row-major. Offsets are byte offsets into the
//! payload and must be contiguous in manifest order; the loader validates
//! the manifest before touching the payload.

use std::path::Path;

use thiserror::Error;

pub const FORMAT_HEADER: &str = "hilat-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint header {0:?}")]
    VersionMismatch(String),
    #[error("malformed manifest at line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("shape mismatch for {field}: {msg}")]
    ShapeMismatch { field: String, msg: String },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("tensor {0:?} not present in checkpoint")]
    MissingTensor(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn next_line(&mut self) -> Result<&'a str> {
        self.line += 1;
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(CheckpointError::Malformed { line: self.line, msg: "unexpected end of manifest".into() })?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| CheckpointError::Malformed { line: self.line, msg: "manifest is not utf-8".into() })?;
        self.pos += end + 1;
        Ok(line)
    }

    fn scalar_field(&mut self, name: &str) -> Result<usize> {
        let line = self.next_line()?;
        line.strip_prefix(name)
            .and_then(|r| r.trim().parse().ok())
            .ok_or_else(|| CheckpointError::Malformed {
                line: self.line,
                msg: format!("expected {name:?} field, got {line:?}"),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major values, widened from the stored f32.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub d_model: usize,
    pub n_labels: usize,
    pub n_chunks: usize,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Result<&TensorEntry> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        manifest.push_str(FORMAT_HEADER);
        manifest.push('\n');
        manifest.push_str(&format!("d_model {}\n", self.d_model));
        manifest.push_str(&format!("n_labels {}\n", self.n_labels));
        manifest.push_str(&format!("n_chunks {}\n", self.n_chunks));
        manifest.push_str(&format!("tensors {}\n", self.tensors.len()));
        let mut offset = 0usize;
        for t in &self.tensors {
            debug_assert!(!t.name.chars().any(|c| c.is_whitespace()), "tensor name {:?}", t.name);
            manifest.push_str(&format!("{} {} {} {}\n", t.name, t.rows, t.cols, offset));
            offset += t.rows * t.cols * 4;
        }
        manifest.push_str("end\n");

        let mut bytes = manifest.into_bytes();
        bytes.reserve(offset);
        for t in &self.tensors {
            for &v in &t.values {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cursor = Cursor { bytes, pos: 0, line: 0 };

        let header = cursor.next_line()?;
        if header != FORMAT_HEADER {
            return Err(CheckpointError::VersionMismatch(header.to_string()));
        }
        let d_model = cursor.scalar_field("d_model")?;
        let n_labels = cursor.scalar_field("n_labels")?;
        let n_chunks = cursor.scalar_field("n_chunks")?;
        let n_tensors = cursor.scalar_field("tensors")?;

        let mut headers = Vec::with_capacity(n_tensors);
        let mut expected_offset = 0usize;
        for _ in 0..n_tensors {
            let line = cursor.next_line()?;
            let line_no = cursor.line;
            let mut it = line.rsplitn(4, ' ');
            let offset: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or(CheckpointError::Malformed { line: line_no, msg: "bad offset".into() })?;
            let cols: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or(CheckpointError::Malformed { line: line_no, msg: "bad cols".into() })?;
            let rows: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or(CheckpointError::Malformed { line: line_no, msg: "bad rows".into() })?;
            let name = it
                .next()
                .filter(|s| !s.is_empty())
                .ok_or(CheckpointError::Malformed { line: line_no, msg: "missing tensor name".into() })?
                .to_string();
            if offset != expected_offset {
                return Err(CheckpointError::ShapeMismatch {
                    field: name,
                    msg: format!("offset {offset} but {expected_offset} expected from preceding shapes"),
                });
            }
            expected_offset += rows * cols * 4;
            headers.push((name, rows, cols));
        }
        let end = cursor.next_line()?;
        if end != "end" {
            return Err(CheckpointError::Malformed { line: cursor.line, msg: format!("expected end marker, got {end:?}") });
        }
        let pos = cursor.pos;

        let payload = &bytes[pos..];
        if payload.len() != expected_offset {
            return Err(CheckpointError::TruncatedPayload { expected: expected_offset, found: payload.len() });
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        let mut at = 0usize;
        for (name, rows, cols) in headers {
            let n = rows * cols;
            let mut values = Vec::with_capacity(n);
            for i in 0..n {
                let b = &payload[at + i * 4..at + i * 4 + 4];
                values.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
            }
            at += n * 4;
            tensors.push(TensorEntry { name, rows, cols, values });
        }
        Ok(Checkpoint { d_model, n_labels, n_chunks, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            d_model: 4,
            n_labels: 2,
            n_chunks: 3,
            tensors: vec![
                TensorEntry { name: "a".into(), rows: 2, cols: 2, values: vec![1.0, -0.5, 0.25, 3.0] },
                TensorEntry { name: "b.0".into(), rows: 1, cols: 3, values: vec![0.1, 0.2, 0.3] },
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact_at_f32() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.d_model, 4);
        for (orig, loaded) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(orig.name, loaded.name);
            for (&o, &l) in orig.values.iter().zip(&loaded.values) {
                assert_eq!(o as f32, l as f32);
                assert_eq!(l, (l as f32) as f64);
            }
        }
        // Saving the loaded checkpoint reproduces identical bytes.
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_payload_detected() {
        let mut bytes = sample().to_bytes();
        bytes.truncate(bytes.len() - 4);
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, CheckpointError::TruncatedPayload { .. }), "{err}");
    }

    #[test]
    fn version_mismatch_detected() {
        let mut bytes = sample().to_bytes();
        bytes[18] = b'9'; // header version digit
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, CheckpointError::VersionMismatch(_)), "{err}");
    }

    #[test]
    fn bad_offset_names_tensor() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let manifest_len = bytes.windows(4).position(|w| w == b"end\n").unwrap() + 4;
        let manifest = std::str::from_utf8(&bytes[..manifest_len]).unwrap();
        assert!(manifest.contains("b.0 1 3 16"));
        let mut out = manifest.replace("b.0 1 3 16", "b.0 1 3 20").into_bytes();
        out.extend_from_slice(&bytes[manifest_len..]);
        let err = Checkpoint::from_bytes(&out).unwrap_err();
        match err {
            CheckpointError::ShapeMismatch { field, .. } => assert_eq!(field, "b.0"),
            other => panic!("expected shape mismatch, got {other}"),
        }
    }

    #[test]
    fn missing_tensor_lookup() {
        let ck = sample();
        assert!(ck.get("a").is_ok());
        assert!(matches!(ck.get("zz"), Err(CheckpointError::MissingTensor(_))));
    }
}
