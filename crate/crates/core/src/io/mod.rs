//! On-disk bundle format.
//!
//! A bundle directory holds `manifest.json` and one headerless blob per
//! matrix: `singleton.f32`, `auxiliary.f32`, `compound.f32` (row-major
//! little-endian binary32) and optionally `labels.u8` (one byte per cell).
//! Dimensions live only in the manifest. Scores are widened to `f64` on load.

mod tables;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SparcError};
use crate::model::{
    validate_bundle, ClassVocabulary, LabelMatrix, PromptKind, PromptSpec, ScoreBundle, ScoreMatrix,
};

pub use tables::{
    import_csv, read_cooccurrence_csv, read_prompts_csv, read_score_table_csv, read_vocabulary,
    write_prompts_csv, write_score_table_csv,
};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SINGLETON_FILE: &str = "singleton.f32";
pub const AUXILIARY_FILE: &str = "auxiliary.f32";
pub const COMPOUND_FILE: &str = "compound.f32";
pub const LABELS_FILE: &str = "labels.u8";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub format_version: u32,
    pub classes: Vec<String>,
    pub image_ids: Vec<String>,
    pub prompts: Vec<PromptRecord>,
    pub matrices: MatrixSet,
    pub labels: Option<LabelDescriptor>,
    pub provenance: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub id: u32,
    pub text: String,
    pub kind: PromptKind,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSet {
    pub singleton: MatrixDescriptor,
    pub auxiliary: MatrixDescriptor,
    pub compound: MatrixDescriptor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixDescriptor {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub prompt_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelDescriptor {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

impl BundleManifest {
    pub fn for_bundle(bundle: &ScoreBundle) -> Self {
        let mut prompts: Vec<PromptRecord> = bundle
            .prompts
            .iter()
            .map(|p| PromptRecord {
                id: p.id,
                text: p.text.clone(),
                kind: p.kind,
                classes: p.class_set.clone(),
            })
            .collect();
        prompts.sort_by_key(|p| p.id);
        let desc = |file: &str, m: &ScoreMatrix| MatrixDescriptor {
            file: file.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            prompt_ids: m.prompt_ids.clone(),
        };
        Self {
            format_version: FORMAT_VERSION,
            classes: bundle.vocabulary.names().to_vec(),
            image_ids: bundle.image_ids().to_vec(),
            prompts,
            matrices: MatrixSet {
                singleton: desc(SINGLETON_FILE, &bundle.singleton),
                auxiliary: desc(AUXILIARY_FILE, &bundle.auxiliary),
                compound: desc(COMPOUND_FILE, &bundle.compound),
            },
            labels: bundle.labels.as_ref().map(|l| LabelDescriptor {
                file: LABELS_FILE.to_string(),
                rows: l.rows(),
                cols: l.cols(),
            }),
            provenance: bundle.provenance.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Little-endian binary32 encoding of a score matrix.
pub fn encode_f32(matrix: &ScoreMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(matrix.values().len() * 4);
    for &v in matrix.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect()
}

/// Write `contents` to `path` through a temporary file in the same directory
/// followed by a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| SparcError::io(dir, e))?;
    tmp.write_all(contents)
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(|e| SparcError::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| SparcError::io(path, e.error))?;
    Ok(())
}

/// Write a validated bundle into `dir`. Refuses to replace an existing
/// manifest unless `force` is set.
pub fn write_bundle(bundle: &ScoreBundle, dir: &Path, force: bool) -> Result<()> {
    let problems = validate_bundle(bundle);
    if !problems.is_empty() {
        return Err(SparcError::Validation(problems));
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() && !force {
        return Err(SparcError::AlreadyExists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir).map_err(|e| SparcError::io(dir, e))?;

    let manifest = BundleManifest::for_bundle(bundle);
    write_atomic(&dir.join(SINGLETON_FILE), &encode_f32(&bundle.singleton))?;
    write_atomic(&dir.join(AUXILIARY_FILE), &encode_f32(&bundle.auxiliary))?;
    write_atomic(&dir.join(COMPOUND_FILE), &encode_f32(&bundle.compound))?;
    match &bundle.labels {
        Some(labels) => write_atomic(&dir.join(LABELS_FILE), labels.values())?,
        None => {
            let stale = dir.join(LABELS_FILE);
            if stale.exists() {
                fs::remove_file(&stale).map_err(|e| SparcError::io(&stale, e))?;
            }
        }
    }
    // manifest last: a directory with a manifest always has complete blobs
    write_atomic(&manifest_path, manifest.to_json()?.as_bytes())
}

fn blob_path(dir: &Path, file: &str) -> Result<PathBuf> {
    if file.is_empty() || file.contains(['/', '\\']) || file == ".." || file == "." {
        return Err(SparcError::invalid(format!(
            "blob name {file:?} is not a plain file name"
        )));
    }
    Ok(dir.join(file))
}

fn read_blob(dir: &Path, file: &str, expected_len: u64) -> Result<Vec<u8>> {
    let path = blob_path(dir, file)?;
    if !path.is_file() {
        return Err(SparcError::MissingBlob(path));
    }
    let bytes = fs::read(&path).map_err(|e| SparcError::io(&path, e))?;
    if bytes.len() as u64 != expected_len {
        return Err(SparcError::DimensionMismatch {
            file: file.to_string(),
            expected: expected_len,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

fn read_matrix(dir: &Path, d: &MatrixDescriptor, image_ids: &[String]) -> Result<ScoreMatrix> {
    if d.rows != image_ids.len() || d.cols != d.prompt_ids.len() {
        return Err(SparcError::invalid(format!(
            "descriptor for {} declares {}x{} but lists {} images and {} prompt ids",
            d.file,
            d.rows,
            d.cols,
            image_ids.len(),
            d.prompt_ids.len()
        )));
    }
    let bytes = read_blob(dir, &d.file, (d.rows * d.cols * 4) as u64)?;
    ScoreMatrix::new(decode_f32(&bytes), image_ids.to_vec(), d.prompt_ids.clone())
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| SparcError::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    // check the version before the schema so newer layouts get a clear error
    if let Some(v) = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
    {
        if v > u64::from(FORMAT_VERSION) || v == 0 {
            return Err(SparcError::UnsupportedVersion {
                found: v.min(u64::from(u32::MAX)) as u32,
                supported: FORMAT_VERSION,
            });
        }
    }
    Ok(serde_json::from_value(value)?)
}

/// Read and validate a bundle directory.
pub fn read_bundle(dir: &Path) -> Result<ScoreBundle> {
    let manifest = read_manifest(dir)?;
    let vocabulary = ClassVocabulary::new(manifest.classes.clone())?;
    let ids = &manifest.image_ids;
    let singleton = read_matrix(dir, &manifest.matrices.singleton, ids)?;
    let auxiliary = read_matrix(dir, &manifest.matrices.auxiliary, ids)?;
    let compound = read_matrix(dir, &manifest.matrices.compound, ids)?;
    let labels = match &manifest.labels {
        None => None,
        Some(d) => {
            if d.rows != ids.len() {
                return Err(SparcError::invalid(format!(
                    "label descriptor declares {} rows for {} images",
                    d.rows,
                    ids.len()
                )));
            }
            let bytes = read_blob(dir, &d.file, (d.rows * d.cols) as u64)?;
            Some(LabelMatrix::new(bytes, ids.clone(), d.cols)?)
        }
    };
    let prompts = manifest
        .prompts
        .iter()
        .map(|r| PromptSpec {
            id: r.id,
            text: r.text.clone(),
            kind: r.kind,
            class_set: r.classes.clone(),
        })
        .collect();
    let bundle = ScoreBundle::new(
        vocabulary,
        prompts,
        singleton,
        auxiliary,
        compound,
        labels,
        manifest.provenance,
    );
    let problems = validate_bundle(&bundle);
    if problems.is_empty() {
        Ok(bundle)
    } else {
        Err(SparcError::Validation(problems))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::small_bundle;

    fn quantized() -> ScoreBundle {
        let mut b = small_bundle();
        b.singleton.quantize_f32();
        b.auxiliary.quantize_f32();
        b.compound.quantize_f32();
        b
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = quantized();
        write_bundle(&b, dir.path(), false).unwrap();
        assert_eq!(read_bundle(dir.path()).unwrap(), b);
    }

    #[test]
    fn blob_length_follows_dimensions() {
        let images = vec!["a".to_string(), "b".to_string()];
        let m = ScoreMatrix::from_fn(images, vec![1, 2, 3], |r, c| (r + c) as f64);
        assert_eq!(encode_f32(&m).len(), 2 * 3 * 4);
        assert_eq!(&encode_f32(&m)[4..8], &1.0f32.to_le_bytes());
    }

    #[test]
    fn refuses_invalid_bundle_and_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = quantized();
        b.singleton.set(0, 0, f64::NAN);
        assert!(matches!(
            write_bundle(&b, dir.path(), false),
            Err(SparcError::Validation(_))
        ));
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn refuses_overwrite_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let b = quantized();
        write_bundle(&b, dir.path(), false).unwrap();
        assert!(matches!(
            write_bundle(&b, dir.path(), false),
            Err(SparcError::AlreadyExists(_))
        ));
        write_bundle(&b, dir.path(), true).unwrap();
    }

    #[test]
    fn truncated_blob_is_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&quantized(), dir.path(), false).unwrap();
        let path = dir.path().join(COMPOUND_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        match read_bundle(dir.path()) {
            Err(SparcError::DimensionMismatch {
                expected, actual, ..
            }) => {
                assert_eq!(expected, 4 * 2 * 4);
                assert_eq!(actual, expected - 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_blob() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&quantized(), dir.path(), false).unwrap();
        fs::remove_file(dir.path().join(LABELS_FILE)).unwrap();
        assert!(matches!(
            read_bundle(dir.path()),
            Err(SparcError::MissingBlob(_))
        ));
    }

    #[test]
    fn newer_format_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&quantized(), dir.path(), false).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            read_bundle(dir.path()),
            Err(SparcError::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn malformed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&quantized(), dir.path(), false).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{\"format_version\": 1,").unwrap();
        assert!(matches!(
            read_bundle(dir.path()),
            Err(SparcError::Manifest(_))
        ));
    }

    #[test]
    fn hand_edited_class_index_surfaces_as_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&quantized(), dir.path(), false).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut manifest = read_manifest(dir.path()).unwrap();
        let p = manifest.prompts.iter_mut().find(|p| p.id == 7).unwrap();
        p.classes = vec![0, 5];
        fs::write(&path, manifest.to_json().unwrap()).unwrap();
        match read_bundle(dir.path()) {
            Err(SparcError::Validation(v)) => {
                assert_eq!(v.len(), 1);
                assert_eq!(v[0].rule, "class_index");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn blob_names_must_be_plain() {
        assert!(blob_path(Path::new("/tmp"), "../etc/passwd").is_err());
        assert!(blob_path(Path::new("/tmp"), "x.f32").is_ok());
    }
}
