//! On-disk formats: the SWED tensor file, dataset directories and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swe_autograd::{Module, Tensor};

use crate::error::{Error, Result};
use crate::forge::{self, Geometry, MotionVolume, Sample, SampleMeta, Split};

pub const TENSOR_MAGIC: &[u8; 4] = b"SWED";
pub const TENSOR_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SWCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

/// `SWED | version | rank | dims… | f32 LE payload | crc32`, all integers little-endian u32.
pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::BadMagic { what: "tensor", expected: "SWED" });
    }
    let short = |expected: usize| Error::Truncated { expected, found: bytes.len() };
    let version = read_u32(bytes, 4).ok_or_else(|| short(8))?;
    if version != TENSOR_VERSION {
        return Err(Error::Version { what: "tensor", found: version, supported: TENSOR_VERSION });
    }
    let rank = read_u32(bytes, 8).ok_or_else(|| short(12))? as usize;
    let header = 12 + 4 * rank;
    let dims: Vec<usize> =
        (0..rank).map(|i| read_u32(bytes, 12 + 4 * i).map(|d| d as usize)).collect::<Option<_>>().ok_or_else(|| short(header))?;
    let expected = 4 * dims.iter().product::<usize>();
    let found = bytes.len().saturating_sub(header + 4);
    if bytes.len() < header + 4 || found != expected {
        return Err(Error::Truncated { expected, found });
    }
    let body = &bytes[..header + expected];
    let stored = read_u32(bytes, header + expected).expect("length checked");
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let data = body[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(&dims, data))
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    #[serde(flatten)]
    pub meta: SampleMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub geometry: Geometry,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    /// Inclusion stiffness values must not be shared between splits.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Version { what: "manifest", found: self.version, supported: MANIFEST_VERSION });
        }
        let mut owner: BTreeMap<u64, Split> = BTreeMap::new();
        for e in &self.samples {
            let key = e.meta.spec.e_inclusion_kpa.to_bits();
            match owner.get(&key) {
                Some(&s) if s != e.meta.split => {
                    return Err(Error::SplitOverlap {
                        value: e.meta.spec.e_inclusion_kpa,
                        a: s.name().into(),
                        b: e.meta.split.name().into(),
                    })
                }
                _ => {
                    owner.insert(key, e.meta.split);
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.meta.split == split)
    }
}

/// Stacks the region volumes of a sample into one (R, T, A, L) tensor.
pub fn stack_regions(regions: &[MotionVolume]) -> Tensor<f32> {
    let parts: Vec<&Tensor<f32>> = regions.iter().map(|r| &r.data).collect();
    let s = parts[0].shape().to_vec();
    let mut data = Vec::with_capacity(parts.len() * parts[0].len());
    for p in &parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[parts.len(), s[0], s[1], s[2]], data)
}

/// Writes `manifest.toml` and `samples/<id>.swed`. Fails if the splits share stiffness values.
pub fn write_dataset(dir: &Path, geometry: &Geometry, seed: u64, samples: &[Sample]) -> Result<Manifest> {
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        geometry: geometry.clone(),
        samples: samples
            .iter()
            .map(|s| ManifestEntry { file: format!("samples/{}.swed", s.meta.id), meta: s.meta.clone() })
            .collect(),
    };
    manifest.validate()?;
    let sample_dir = dir.join("samples");
    fs::create_dir_all(&sample_dir).map_err(|e| Error::io(&sample_dir, e))?;
    for (s, e) in samples.iter().zip(&manifest.samples) {
        write_tensor(&dir.join(&e.file), &stack_regions(&s.regions))?;
    }
    let text = toml::to_string(&manifest).map_err(|e| Error::Parse { path: dir.join(MANIFEST_FILE), msg: e.to_string() })?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Parse { path: path.clone(), msg: e.to_string() })?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads one sample: motion from disk, truth regenerated from its spec.
pub fn read_sample(dir: &Path, manifest: &Manifest, entry: &ManifestEntry) -> Result<Sample> {
    let stack = read_tensor(&dir.join(&entry.file))?;
    let layout = &manifest.geometry.layout;
    let want = [layout.r_regions, layout.frames_t, layout.region_axial_px, layout.region_lateral_px];
    if stack.shape() != want {
        return Err(Error::Shape { expected: want.to_vec(), got: stack.shape().to_vec() });
    }
    let truth = forge::make_phantom(&entry.meta.spec)?;
    let regions = (0..layout.r_regions)
        .map(|k| MotionVolume {
            data: stack.narrow(0, k, 1).reshape(&want[1..]),
            region_index: k,
            snr_db: entry.meta.snr_db,
            late_arrival: false,
            norm_range: None,
        })
        .collect();
    Ok(Sample { meta: entry.meta.clone(), truth, regions })
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = read_manifest(dir)?;
    let samples = manifest.samples.iter().map(|e| read_sample(dir, &manifest, e)).collect::<Result<_>>()?;
    Ok((manifest, samples))
}

/// Parameter tensors by canonical name plus the fingerprint of the model config.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u32,
    pub config: String,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

pub fn fingerprint(config_json: &str) -> u32 {
    crc32fast::hash(config_json.as_bytes())
}

impl Checkpoint {
    pub fn capture<M: Module<f32> + ?Sized>(config_json: &str, model: &M) -> Self {
        let mut tensors = BTreeMap::new();
        model.visit("", &mut |name, p| {
            tensors.insert(name.to_string(), p.value.clone());
        });
        Self { fingerprint: fingerprint(config_json), config: config_json.to_string(), tensors }
    }

    /// Copies every parameter into `model` after checking the fingerprint and shapes.
    pub fn restore<M: Module<f32> + ?Sized>(&self, config_json: &str, model: &mut M) -> Result<()> {
        let expected = fingerprint(config_json);
        if expected != self.fingerprint {
            return Err(Error::Fingerprint { expected, found: self.fingerprint });
        }
        let mut failure = None;
        model.visit_mut("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            match self.tensors.get(name) {
                None => failure = Some(Error::MissingParam(name.to_string())),
                Some(t) if t.shape() != p.value.shape() => {
                    failure = Some(Error::Shape { expected: p.value.shape().to_vec(), got: t.shape().to_vec() })
                }
                Some(t) => p.value = t.cast(),
            }
        });
        failure.map_or(Ok(()), Err)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let blob = encode_tensor(t);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { what: "checkpoint", expected: "SWCK" });
        }
        let truncated = || Error::Truncated { expected: 0, found: bytes.len() };
        if bytes.len() < 8 {
            return Err(truncated());
        }
        let body = &bytes[..bytes.len() - 4];
        let version = read_u32(bytes, 4).ok_or_else(truncated)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { what: "checkpoint", found: version, supported: CHECKPOINT_VERSION });
        }
        let stored = read_u32(bytes, bytes.len() - 4).ok_or_else(truncated)?;
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut at = 8;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(at..at + n).ok_or_else(truncated)?;
            at += n;
            Ok(s)
        };
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let fingerprint = u32_of(take(4)?);
        let clen = u32_of(take(4)?) as usize;
        let config = String::from_utf8_lossy(take(clen)?).into_owned();
        let count = u32_of(take(4)?) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = u32_of(take(4)?) as usize;
            let name = String::from_utf8_lossy(take(nlen)?).into_owned();
            let blen = u32_of(take(4)?) as usize;
            tensors.insert(name, decode_tensor(take(blen)?)?);
        }
        Ok(Self { fingerprint, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Location of a cached primary reconstruction.
pub fn yprime_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.swed"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let t = Tensor::new(&[2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3e7, -2.25, 0.1]);
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn each_corruption_has_its_own_error() {
        let t = Tensor::new(&[70, 168, 16], vec![0.5f32; 70 * 168 * 16]);
        let good = encode_tensor(&t);

        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(decode_tensor(&magic), Err(Error::BadMagic { .. })));

        let mut version = good.clone();
        version[4] = 9;
        assert!(matches!(decode_tensor(&version), Err(Error::Version { found: 9, .. })));

        let cut = &good[..good.len() - 100];
        assert!(matches!(decode_tensor(cut), Err(Error::Truncated { expected, .. }) if expected == 4 * 70 * 168 * 16));

        let mut flipped = good.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode_tensor(&flipped), Err(Error::Checksum { .. })));
    }
}
