//! Dataset manifest and raw tensor files.
//!
//! ```text
//! mft-manifest v1
//! C=12
//! modality alpha 24
//! modality beta 8x8
//! id,subject,<path per modality>,<label string>
//! ```
//!
//! Paths are relative to the manifest's directory. Each tensor file holds
//! the row-major little-endian `f64` values of one sample, with no header.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{format_dims, parse_dims, valid_modality_name, ModalitySpec};
use crate::tensor::Tensor;

use super::dataset::{Dataset, Sample};

pub const HEADER: &str = "mft-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub subject: String,
    /// One relative path per modality, in declaration order.
    pub paths: Vec<String>,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub num_aus: usize,
    pub modalities: Vec<ModalitySpec>,
    pub rows: Vec<ManifestRow>,
}

/// `"0100"` → `[0, 1, 0, 0]`.
pub fn parse_labels(text: &str, num_aus: usize) -> Result<Vec<u8>> {
    if text.len() != num_aus {
        return Err(Error::Load(format!(
            "label string {text:?} has length {}, expected {num_aus}",
            text.len()
        )));
    }
    text.bytes()
        .map(|b| match b {
            b'0' => Ok(0),
            b'1' => Ok(1),
            _ => Err(Error::Load(format!("label string {text:?} is not 0/1"))),
        })
        .collect()
}

pub fn format_labels(labels: &[u8]) -> String {
    labels
        .iter()
        .map(|&y| if y == 0 { '0' } else { '1' })
        .collect()
}

pub fn decode_tensor(bytes: &[u8], shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if bytes.len() != numel * 8 {
        return Err(Error::Load(format!(
            "expected {numel} values ({} bytes), found {} bytes",
            numel * 8,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn valid_id(s: &str) -> bool {
    !s.is_empty()
        && s != "."
        && s != ".."
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl DatasetManifest {
    /// Parses manifest text; performs no file system access.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim().is_empty());
        let bad = |line: usize, msg: String| Error::Load(format!("manifest line {line}: {msg}"));

        match lines.next() {
            Some((_, l)) if l.trim() == HEADER => {}
            Some((n, l)) => return Err(bad(n, format!("expected {HEADER:?}, got {l:?}"))),
            None => return Err(Error::Load("empty manifest".into())),
        }
        let num_aus = match lines.next() {
            Some((n, l)) => l
                .trim()
                .strip_prefix("C=")
                .and_then(|v| v.parse::<usize>().ok())
                .filter(|&c| c > 0)
                .ok_or_else(|| bad(n, format!("expected C=<positive int>, got {l:?}")))?,
            None => return Err(Error::Load("manifest lacks C= line".into())),
        };

        let mut modalities: Vec<ModalitySpec> = Vec::new();
        let mut rows = Vec::new();
        let mut ids = BTreeSet::new();
        for (n, line) in lines {
            if let Some(rest) = line.strip_prefix("modality ") {
                if !rows.is_empty() {
                    return Err(bad(n, "modality declarations must precede rows".into()));
                }
                let mut parts = rest.split_whitespace();
                let (name, dims) = match (parts.next(), parts.next(), parts.next()) {
                    (Some(name), Some(dims), None) => (name, dims),
                    _ => {
                        return Err(bad(
                            n,
                            format!("expected `modality <name> <dims>`, got {line:?}"),
                        ))
                    }
                };
                if !valid_modality_name(name) {
                    return Err(bad(n, format!("invalid modality name {name:?}")));
                }
                if modalities.iter().any(|m| m.name == name) {
                    return Err(bad(n, format!("duplicate modality {name}")));
                }
                let dims = parse_dims(dims).map_err(|e| bad(n, e.to_string()))?;
                modalities.push(ModalitySpec::new(name, dims));
                continue;
            }
            if modalities.is_empty() {
                return Err(bad(n, "no modality declared before the first row".into()));
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let want = 3 + modalities.len();
            if fields.len() != want {
                return Err(bad(
                    n,
                    format!("row has {} fields, expected {want}", fields.len()),
                ));
            }
            let id = fields[0];
            if !valid_id(id) {
                return Err(bad(n, format!("invalid sample id {id:?}")));
            }
            if fields[1].is_empty() {
                return Err(bad(n, format!("row {id}: empty subject")));
            }
            if !ids.insert(id.to_string()) {
                return Err(bad(n, format!("duplicate sample id {id}")));
            }
            let labels = fields[want - 1];
            parse_labels(labels, num_aus).map_err(|e| bad(n, format!("row {id}: {e}")))?;
            rows.push(ManifestRow {
                id: id.to_string(),
                subject: fields[1].to_string(),
                paths: fields[2..want - 1].iter().map(|p| p.to_string()).collect(),
                labels: labels.to_string(),
            });
        }
        if modalities.is_empty() {
            return Err(Error::Load("manifest declares no modality".into()));
        }
        Ok(DatasetManifest {
            root: root.into(),
            num_aus,
            modalities,
            rows,
        })
    }

    pub fn render(&self) -> String {
        let mut out = format!("{HEADER}\nC={}\n", self.num_aus);
        for m in &self.modalities {
            out.push_str(&format!("modality {} {}\n", m.name, format_dims(&m.shape)));
        }
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.id,
                r.subject,
                r.paths.join(","),
                r.labels
            ));
        }
        out
    }

    /// Reads and parses a manifest, then checks that every referenced file
    /// exists with the declared size.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, root)?;
        m.verify_files()?;
        Ok(m)
    }

    pub fn verify_files(&self) -> Result<()> {
        for row in &self.rows {
            for (spec, rel) in self.modalities.iter().zip(&row.paths) {
                let path = self.root.join(rel);
                let meta = fs::metadata(&path)
                    .map_err(|e| Error::Load(format!("row {}: {}: {e}", row.id, path.display())))?;
                let want = spec.numel() as u64 * 8;
                if meta.len() != want {
                    return Err(Error::Load(format!(
                        "row {}: {} has {} bytes, expected {want} ({} values)",
                        row.id,
                        path.display(),
                        meta.len(),
                        spec.numel()
                    )));
                }
            }
        }
        Ok(())
    }

    fn load_row(&self, row: &ManifestRow) -> Result<Sample> {
        let mut modalities = BTreeMap::new();
        for (spec, rel) in self.modalities.iter().zip(&row.paths) {
            let path = self.root.join(rel);
            let bytes = fs::read(&path)
                .map_err(|e| Error::Load(format!("row {}: {}: {e}", row.id, path.display())))?;
            let t = decode_tensor(&bytes, &spec.shape)
                .map_err(|e| Error::Load(format!("row {}: {}: {e}", row.id, path.display())))?;
            modalities.insert(spec.name.clone(), t);
        }
        Ok(Sample {
            id: row.id.clone(),
            subject: row.subject.clone(),
            modalities,
            labels: parse_labels(&row.labels, self.num_aus)
                .map_err(|e| Error::Load(format!("row {}: {e}", row.id)))?,
        })
    }

    pub fn load_sample(&self, id: &str) -> Result<Sample> {
        let row = self
            .rows
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Load(format!("no sample with id {id}")))?;
        self.load_row(row)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let samples = self
            .rows
            .iter()
            .map(|r| self.load_row(r))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.modalities.clone(), self.num_aus, samples)
    }
}

/// Writes `dataset` under `dir` as `manifest.txt` plus one
/// `<modality>/<id>.f64` file per sample and modality.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<DatasetManifest> {
    for m in dataset.modalities() {
        let sub = dir.join(&m.name);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    }
    let mut rows = Vec::with_capacity(dataset.len());
    for s in dataset.samples() {
        if !valid_id(&s.id) || s.subject.is_empty() || s.subject.contains([',', '\n']) {
            return Err(Error::Load(format!(
                "sample {:?} cannot be written to a manifest",
                s.id
            )));
        }
        let mut paths = Vec::new();
        for m in dataset.modalities() {
            let rel = format!("{}/{}.f64", m.name, s.id);
            let path = dir.join(&rel);
            fs::write(&path, encode_tensor(&s.modalities[&m.name]))
                .map_err(|e| Error::io(&path, e))?;
            paths.push(rel);
        }
        rows.push(ManifestRow {
            id: s.id.clone(),
            subject: s.subject.clone(),
            paths,
            labels: format_labels(&s.labels),
        });
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        num_aus: dataset.num_aus(),
        modalities: dataset.modalities().to_vec(),
        rows,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str =
        "mft-manifest v1\nC=3\nmodality a 2\nmodality b 2x2\nx1,s1,a/x1.f64,b/x1.f64,010\n";

    #[test]
    fn labels_parse() {
        let got = parse_labels("010000000000", 12).unwrap();
        assert_eq!(got.iter().filter(|&&y| y == 1).count(), 1);
        assert_eq!(got[1], 1);
        assert!(parse_labels("01", 3).is_err());
        assert!(parse_labels("012", 3).is_err());
    }

    #[test]
    fn parse_render_round_trip() {
        let m = DatasetManifest::parse(TEXT, "/data").unwrap();
        assert_eq!(m.num_aus, 3);
        assert_eq!(m.modalities[1].shape, vec![2, 2]);
        assert_eq!(m.rows[0].paths, vec!["a/x1.f64", "b/x1.f64"]);
        assert_eq!(m.render(), TEXT);
    }

    #[test]
    fn parse_errors() {
        for bad in [
            "",
            "mft-manifest v2\nC=3\n",
            "mft-manifest v1\nC=0\n",
            "mft-manifest v1\nC=3\n",
            "mft-manifest v1\nC=3\nmodality a 2\nx1,s1,a/x1.f64\n",
            "mft-manifest v1\nC=3\nmodality a 2\nx1,s1,a/x1.f64,01\n",
            "mft-manifest v1\nC=3\nmodality a 2\nx1,s1,p,010\nx1,s1,q,010\n",
            "mft-manifest v1\nC=3\nmodality a 2\nmodality a 3\n",
            "mft-manifest v1\nC=3\nmodality fusion 2\n",
        ] {
            assert!(DatasetManifest::parse(bad, ".").is_err(), "{bad:?}");
        }
    }

    #[test]
    fn tensor_length_validated() {
        let t = Tensor::vector(vec![1.0, -2.5]);
        let bytes = encode_tensor(&t);
        assert_eq!(decode_tensor(&bytes, &[2]).unwrap(), t);
        assert!(decode_tensor(&bytes[..15], &[2]).is_err());
        assert!(decode_tensor(&bytes, &[3]).is_err());
    }
}
