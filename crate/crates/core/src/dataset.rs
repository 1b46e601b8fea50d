//! On-disk dataset: `manifest.json` plus `data.bin` of little-endian f32 payloads.
//!
//! Each sample's payload is its image followed by its masks in scene order.
//! The manifest carries byte offsets and a SHA-256 per payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompts::PromptSpec;
use crate::scene::{NounMask, Palette, SceneSample};

pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub offset: u64,
    pub bytes: u64,
    pub sha256: String,
    pub seed: u64,
    pub mask_positions: Vec<usize>,
    pub prompt: PromptSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: usize,
    pub resolution: usize,
    pub palette: Palette,
    pub samples: Vec<ManifestEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn payload(sample: &SceneSample) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * (sample.image.len() + sample.masks.len() * sample.resolution.pow(2)));
    for v in sample.image.iter().chain(sample.masks.iter().flat_map(|m| m.mask.iter())) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Write samples in order. All samples must share one resolution.
pub fn write_dataset(samples: &[SceneSample], palette: &Palette, dir: &Path) -> Result<DatasetManifest> {
    let resolution = samples.first().map(|s| s.resolution).ok_or(Error::EmptyDataset)?;
    std::fs::create_dir_all(dir)?;
    let mut data = BufWriter::new(File::create(dir.join(DATA_FILE))?);
    let mut entries = Vec::with_capacity(samples.len());
    let mut offset = 0u64;
    for s in samples {
        if s.resolution != resolution {
            return Err(Error::ShapeMismatch(format!("mixed resolutions {} and {resolution}", s.resolution)));
        }
        let bytes = payload(s);
        data.write_all(&bytes)?;
        entries.push(ManifestEntry {
            offset,
            bytes: bytes.len() as u64,
            sha256: hex(&Sha256::digest(&bytes)),
            seed: s.seed,
            mask_positions: s.masks.iter().map(|m| m.position).collect(),
            prompt: s.prompt.clone(),
        });
        offset += bytes.len() as u64;
    }
    data.flush()?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        count: samples.len(),
        resolution,
        palette: palette.clone(),
        samples: entries,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::VersionMismatch { found: manifest.version, expected: DATASET_VERSION });
    }
    if manifest.count != manifest.samples.len() {
        return Err(Error::Config(format!(
            "manifest lists {} samples but declares {}",
            manifest.samples.len(),
            manifest.count
        )));
    }
    Ok(manifest)
}

/// Streaming reader; every payload is checksummed as it is read.
pub struct DatasetReader {
    manifest: DatasetManifest,
    data: BufReader<File>,
    next: usize,
}

impl DatasetReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let data = BufReader::new(File::open(dir.join(DATA_FILE))?);
        Ok(Self { manifest, data, next: 0 })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn read_entry(&mut self, index: usize) -> Result<SceneSample> {
        let entry = &self.manifest.samples[index];
        let mut bytes = vec![0u8; entry.bytes as usize];
        self.data.seek(SeekFrom::Start(entry.offset))?;
        self.data.read_exact(&mut bytes)?;
        if hex(&Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::ChecksumMismatch { what: format!("sample {index}") });
        }
        let r = self.manifest.resolution;
        let plane = r * r;
        let expected = 4 * plane * (3 + entry.mask_positions.len());
        if bytes.len() != expected {
            return Err(Error::ShapeMismatch(format!("sample {index} has {} bytes, expected {expected}", bytes.len())));
        }
        let floats: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let image = floats[..3 * plane].to_vec();
        let masks = entry
            .mask_positions
            .iter()
            .enumerate()
            .map(|(k, &position)| NounMask { position, mask: floats[(3 + k) * plane..(4 + k) * plane].to_vec() })
            .collect();
        Ok(SceneSample { resolution: r, image, masks, prompt: entry.prompt.clone(), seed: entry.seed })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<SceneSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.manifest.samples.len() {
            return None;
        }
        let i = self.next;
        self.next += 1;
        Some(self.read_entry(i))
    }
}

pub fn read_dataset(dir: &Path) -> Result<DatasetReader> {
    DatasetReader::open(dir)
}

/// Read every sample into memory.
pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let samples = read_dataset(dir)?.collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate, GenerationSpec};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GenerationSpec { count: 100, ..Default::default() };
        let samples = generate(&spec).unwrap();
        write_dataset(&samples, &spec.palette, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 100);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tampered_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GenerationSpec { count: 3, ..Default::default() };
        write_dataset(&generate(&spec).unwrap(), &spec.palette, dir.path()).unwrap();
        let path = dir.path().join(DATA_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 5;
        bytes[last] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        let results: Vec<_> = read_dataset(dir.path()).unwrap().collect();
        assert!(results[0].is_ok());
        assert!(matches!(results[2], Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GenerationSpec { count: 2, ..Default::default() };
        write_dataset(&generate(&spec).unwrap(), &spec.palette, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        m["version"] = 99.into();
        std::fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::VersionMismatch { found: 99, expected: 1 })));
    }
}
