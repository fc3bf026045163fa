//! Paired fundus/angiogram ingestion and cropping.
//!
//! Layout on disk:
//!
//! ```text
//! root/manifest.json        {"train": ["id", ...], "eval": ["id", ...]}
//! root/fundus/<id>.<ext>    colour photograph
//! root/angio/<id>.<ext>     angiogram (grey; colour files are averaged)
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{input_err, Error, Result};
use crate::image::ImageTensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FUNDUS_DIR: &str = "fundus";
pub const ANGIO_DIR: &str = "angio";
const EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "PNG", "JPG"];

/// Crops taken from each training image.
pub const CROPS_PER_PAIR: usize = 50;
pub const CROP_SIZE: usize = 512;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub eval: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }
}

/// One aligned photograph/angiogram pair, already normalized.
#[derive(Debug, Clone)]
pub struct SourcePair {
    pub pair_id: String,
    pub fundus: Arc<ImageTensor>,
    pub angiogram: Arc<ImageTensor>,
    /// Listed in the manifest. Unaligned pairs never get this far.
    pub aligned: bool,
}

impl SourcePair {
    pub fn new(pair_id: impl Into<String>, fundus: ImageTensor, angiogram: ImageTensor) -> Result<Self> {
        let pair_id = pair_id.into();
        if fundus.channels() != 3 || angiogram.channels() != 1 {
            return Err(Error::Ingestion {
                stem: pair_id,
                reason: format!(
                    "expected 3-channel fundus and 1-channel angiogram, got {} and {}",
                    fundus.channels(),
                    angiogram.channels()
                ),
            });
        }
        let (fd, ad) = (
            (fundus.height(), fundus.width()),
            (angiogram.height(), angiogram.width()),
        );
        if fd != ad {
            return Err(Error::Ingestion {
                stem: pair_id,
                reason: format!("fundus is {}×{} but angiogram is {}×{}", fd.0, fd.1, ad.0, ad.1),
            });
        }
        Ok(SourcePair {
            pair_id,
            fundus: Arc::new(fundus),
            angiogram: Arc::new(angiogram),
            aligned: true,
        })
    }

    pub fn height(&self) -> usize {
        self.fundus.height()
    }

    pub fn width(&self) -> usize {
        self.fundus.width()
    }
}

/// A crop of a source pair. Both images are cut at the single stored
/// offset, so alignment holds by construction; pixels are cut on demand.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub pair_id: String,
    pub offset: (usize, usize),
    pub size: usize,
    source: SourcePair,
}

impl PairedSample {
    pub fn new(source: &SourcePair, offset: (usize, usize), size: usize) -> Result<Self> {
        check_crop(source, size)?;
        let (h, w) = (source.height(), source.width());
        if offset.0 + size > h || offset.1 + size > w {
            return Err(input_err!(
                "crop at {offset:?} of size {size} leaves the {h}×{w} image"
            ));
        }
        Ok(PairedSample {
            pair_id: source.pair_id.clone(),
            offset,
            size,
            source: source.clone(),
        })
    }

    pub fn fundus_crop(&self) -> ImageTensor {
        self.source
            .fundus
            .crop(self.offset.0, self.offset.1, self.size, self.size)
            .expect("offset validated at construction")
    }

    pub fn angio_crop(&self) -> ImageTensor {
        self.source
            .angiogram
            .crop(self.offset.0, self.offset.1, self.size, self.size)
            .expect("offset validated at construction")
    }

    pub fn source(&self) -> &SourcePair {
        &self.source
    }
}

fn check_crop(pair: &SourcePair, size: usize) -> Result<()> {
    let (h, w) = (pair.height(), pair.width());
    if size == 0 || size > h || size > w {
        return Err(input_err!(
            "crop size {size} does not fit pair '{}' of size {h}×{w}",
            pair.pair_id
        ));
    }
    Ok(())
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn load_pair(root: &Path, id: &str) -> Result<SourcePair> {
    let missing = |what: &str| Error::Ingestion {
        stem: id.to_string(),
        reason: format!("no {what} image found"),
    };
    let fundus_path = find_image(&root.join(FUNDUS_DIR), id).ok_or_else(|| missing("fundus"))?;
    let angio_path = find_image(&root.join(ANGIO_DIR), id).ok_or_else(|| missing("angiogram"))?;
    let fundus = ImageTensor::load(&fundus_path, 3)?;
    let angiogram = ImageTensor::load(&angio_path, 1)?;
    SourcePair::new(id, fundus, angiogram)
}

/// Loads the listed pairs in order, decoding on up to `workers` threads.
pub fn load_pairs(root: &Path, ids: &[String], workers: usize) -> Result<Vec<SourcePair>> {
    if ids.is_empty() {
        log::warn!("no pairs listed for {}", root.display());
        return Ok(Vec::new());
    }
    let workers = workers.clamp(1, ids.len());
    if workers == 1 {
        return ids.iter().map(|id| load_pair(root, id)).collect();
    }
    let chunk = ids.len().div_ceil(workers);
    let results: Vec<Result<Vec<SourcePair>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|id| load_pair(root, id)).collect()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("decoder thread panicked"))
            .collect()
    });
    let mut pairs = Vec::with_capacity(ids.len());
    for r in results {
        pairs.extend(r?);
    }
    Ok(pairs)
}

/// Loads one split of the manifest at `root/manifest.json` (or `manifest`).
pub fn load_split(root: &Path, manifest: Option<&Path>, split: Split, workers: usize) -> Result<Vec<SourcePair>> {
    let path = manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| root.join(MANIFEST_FILE));
    let m = Manifest::load(&path)?;
    load_pairs(root, m.ids(split), workers)
}

fn crop_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_crops(pair: &SourcePair, n: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<PairedSample>> {
    check_crop(pair, size)?;
    let (max_r, max_c) = (pair.height() - size, pair.width() - size);
    (0..n)
        .map(|_| {
            let r = rng.random_range(0..=max_r);
            let c = rng.random_range(0..=max_c);
            PairedSample::new(pair, (r, c), size)
        })
        .collect()
}

/// `n` crops with offsets uniform over the valid range; overlap allowed.
pub fn random_crops(pair: &SourcePair, n: usize, size: usize, seed: u64) -> Result<Vec<PairedSample>> {
    draw_crops(pair, n, size, &mut crop_rng(seed, 0))
}

/// Crops for every pair; pair `i` draws from its own stream, so the list
/// depends only on the pair order and the seed.
pub fn build_samples(pairs: &[SourcePair], n: usize, size: usize, seed: u64) -> Result<Vec<PairedSample>> {
    let mut out = Vec::with_capacity(pairs.len() * n);
    for (i, pair) in pairs.iter().enumerate() {
        out.extend(draw_crops(pair, n, size, &mut crop_rng(seed, i as u64))?);
    }
    Ok(out)
}

/// Four crops anchored at the corners: top-left, top-right, bottom-left, bottom-right.
pub fn eval_quadrant_crops(pair: &SourcePair, size: usize) -> Result<Vec<PairedSample>> {
    check_crop(pair, size)?;
    let (r, c) = (pair.height() - size, pair.width() - size);
    [(0, 0), (0, c), (r, 0), (r, c)]
        .into_iter()
        .map(|o| PairedSample::new(pair, o, size))
        .collect()
}

/// SHA-256 over the manifest and every image it lists, in manifest order.
pub fn dataset_hash(root: &Path, manifest: Option<&Path>) -> Result<String> {
    let path = manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| root.join(MANIFEST_FILE));
    let mut h = Sha256::new();
    h.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    let m = Manifest::load(&path)?;
    for id in m.train.iter().chain(&m.eval) {
        for dir in [FUNDUS_DIR, ANGIO_DIR] {
            if let Some(p) = find_image(&root.join(dir), id) {
                h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
            }
        }
    }
    Ok(hex(&h.finalize()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub manifest_hash: String,
    pub seed: u64,
    pub n: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedCrop {
    pub pair_id: String,
    pub row: usize,
    pub col: usize,
}

/// Crop index written by `prepare`. Pixels are re-cut from the decoded
/// sources, which is exact and far smaller than storing crops.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCache {
    pub version: u32,
    pub key: CacheKey,
    pub crops: Vec<CachedCrop>,
}

impl SampleCache {
    pub fn from_samples(key: CacheKey, samples: &[PairedSample]) -> Self {
        SampleCache {
            version: CACHE_VERSION,
            key,
            crops: samples
                .iter()
                .map(|s| CachedCrop {
                    pair_id: s.pair_id.clone(),
                    row: s.offset.0,
                    col: s.offset.1,
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a cache, returning `None` if it was built for a different key
    /// or format version.
    pub fn load_matching(path: &Path, key: &CacheKey) -> Result<Option<Self>> {
        if !path.is_file() {
            return Ok(None);
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cache: SampleCache = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Ok((cache.version == CACHE_VERSION && &cache.key == key).then_some(cache))
    }

    pub fn samples(&self, pairs: &[SourcePair]) -> Result<Vec<PairedSample>> {
        self.crops
            .iter()
            .map(|c| {
                let pair = pairs
                    .iter()
                    .find(|p| p.pair_id == c.pair_id)
                    .ok_or_else(|| input_err!("cached crop refers to unknown pair '{}'", c.pair_id))?;
                PairedSample::new(pair, (c.row, c.col), self.key.size)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(id: &str, h: usize, w: usize) -> SourcePair {
        SourcePair::new(id, ImageTensor::zeros(3, h, w), ImageTensor::zeros(1, h, w)).unwrap()
    }

    #[test]
    fn offsets_stay_in_valid_range() {
        let p = synthetic("a", 576, 720);
        for s in random_crops(&p, 200, 512, 9).unwrap() {
            assert!(s.offset.0 <= 64 && s.offset.1 <= 208);
        }
    }

    #[test]
    fn corner_offsets() {
        let p = synthetic("a", 576, 720);
        let offs: Vec<_> = eval_quadrant_crops(&p, 512).unwrap().iter().map(|s| s.offset).collect();
        assert_eq!(offs, vec![(0, 0), (0, 208), (64, 0), (64, 208)]);
        let exact = synthetic("b", 512, 512);
        let offs: Vec<_> = eval_quadrant_crops(&exact, 512).unwrap().iter().map(|s| s.offset).collect();
        assert_eq!(offs, vec![(0, 0); 4]);
    }

    #[test]
    fn oversize_crop_is_rejected() {
        let p = synthetic("a", 100, 120);
        assert!(matches!(random_crops(&p, 1, 101, 0), Err(Error::Input(_))));
    }

    #[test]
    fn mismatched_dimensions_are_an_ingestion_error() {
        let r = SourcePair::new("x", ImageTensor::zeros(3, 8, 8), ImageTensor::zeros(1, 8, 9));
        assert!(matches!(r, Err(Error::Ingestion { stem, .. }) if stem == "x"));
    }
}
