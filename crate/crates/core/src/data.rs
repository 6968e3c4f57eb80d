//! Few-shot datasets: directory ingestion, deterministic k-shot subsets,
//! procedural toy domains and image-grid output.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};
use pir_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PirError, Result};
use crate::image::CHANNELS;
use crate::toy::{render_batch, sample_contents, Domain, ToyContent, ToySpec};

pub const MANIFEST_FILE: &str = "pir-manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// SHA-256 of the file bytes (or of the rendered pixels for procedural images).
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<ToyContent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KShotRecord {
    pub k: usize,
    pub seed: u64,
    /// Positions in the parent manifest.
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain: String,
    pub resolution: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_shot: Option<KShotRecord>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Images of one domain; `images` is (N, 3, R, R) in [-1, 1].
#[derive(Clone, Debug)]
pub struct FewShotDataset {
    pub images: Tensor<f32>,
    pub domain_name: String,
    /// Indices into the full manifest of the images held here.
    pub k_shot: Vec<usize>,
    pub manifest: Manifest,
}

impl FewShotDataset {
    pub fn len(&self) -> usize {
        self.images.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> usize {
        self.images.dim(2)
    }

    /// Toy content of each held image, when the manifest records it.
    pub fn contents(&self) -> Option<Vec<ToyContent>> {
        self.k_shot
            .iter()
            .map(|&i| self.manifest.entries.get(i).and_then(|e| e.content))
            .collect()
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn pixels_hash(t: &Tensor<f32>) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    hex_sha256(&bytes)
}

/// Center-crop to a square, resize, and map `v` to `v / 127.5 - 1`.
fn to_tensor_chw(img: &image::DynamicImage, resolution: usize) -> Vec<f32> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(&rgb, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let r = resolution as u32;
    let resized = if side == r {
        cropped
    } else {
        image::imageops::resize(&cropped, r, r, FilterType::Triangle)
    };
    let hw = resolution * resolution;
    let mut out = vec![0f32; CHANNELS * hw];
    for (x, y, p) in resized.enumerate_pixels() {
        for c in 0..CHANNELS {
            out[c * hw + y as usize * resolution + x as usize] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    out
}

/// Every decodable image in `dir`, sorted by file name. Writes the manifest
/// next to the images.
pub fn load_dataset(dir: &Path, resolution: usize) -> Result<FewShotDataset> {
    if resolution == 0 {
        return Err(PirError::arg("resolution must be positive"));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| PirError::NotFound(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(PirError::NotFound(format!("no files in {}", dir.display())));
    }
    let mut data = Vec::new();
    let mut entries = Vec::new();
    for path in &files {
        let bytes = std::fs::read(path)?;
        match image::load_from_memory(&bytes) {
            Ok(img) => {
                data.extend(to_tensor_chw(&img, resolution));
                entries.push(ManifestEntry {
                    name: path.file_name().unwrap().to_string_lossy().into_owned(),
                    sha256: hex_sha256(&bytes),
                    content: None,
                });
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if entries.is_empty() {
        return Err(PirError::NotFound(format!("no decodable images in {}", dir.display())));
    }
    let n = entries.len();
    let domain = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let manifest = Manifest {
        domain: domain.clone(),
        resolution,
        k_shot: None,
        entries,
    };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(FewShotDataset {
        images: Tensor::from_vec(&[n, CHANNELS, resolution, resolution], data)?,
        domain_name: domain,
        k_shot: (0..n).collect(),
        manifest,
    })
}

/// Deterministic `k`-subset of `ds`, a function of `(ds order, k, seed)` only.
pub fn select_k_shot(ds: &FewShotDataset, k: usize, seed: u64) -> Result<FewShotDataset> {
    let n = ds.len();
    if k == 0 || k > n {
        return Err(PirError::arg(format!("cannot select {k} of {n} images")));
    }
    let picks: Vec<usize> = if k == n {
        (0..n).collect()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut p = idx[..k].to_vec();
        p.sort_unstable();
        p
    };
    let indices: Vec<usize> = picks.iter().map(|&i| ds.k_shot[i]).collect();
    let mut manifest = ds.manifest.clone();
    manifest.k_shot = Some(KShotRecord {
        k,
        seed,
        indices: indices.clone(),
    });
    Ok(FewShotDataset {
        images: ds.images.select_outer(&picks),
        domain_name: ds.domain_name.clone(),
        k_shot: indices,
        manifest,
    })
}

/// Paired source and target sets: image `i` of both shares its content.
pub fn generate_toy_domains(spec: &ToySpec) -> Result<(FewShotDataset, FewShotDataset)> {
    if spec.count == 0 || spec.resolution < 8 {
        return Err(PirError::arg("toy spec needs count >= 1 and resolution >= 8"));
    }
    let contents = sample_contents(spec.count, spec.seed);
    let build = |domain: Domain| -> FewShotDataset {
        let images = render_batch(&contents, domain, spec.resolution);
        let entries = contents
            .iter()
            .enumerate()
            .map(|(i, c)| ManifestEntry {
                name: format!("{}-{i:05}", domain.name()),
                sha256: pixels_hash(&images.slice_outer(i, i + 1)),
                content: Some(*c),
            })
            .collect();
        FewShotDataset {
            images,
            domain_name: domain.name().into(),
            k_shot: (0..spec.count).collect(),
            manifest: Manifest {
                domain: domain.name().into(),
                resolution: spec.resolution,
                k_shot: None,
                entries,
            },
        }
    };
    Ok((build(Domain::Source), build(Domain::Target)))
}

fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn image_from_chw(x: &Tensor<f32>, idx: usize) -> RgbImage {
    let (h, w) = (x.dim(2), x.dim(3));
    let hw = h * w;
    let base = idx * CHANNELS * hw;
    let d = x.data();
    ImageBuffer::from_fn(w as u32, h as u32, |i, j| {
        let o = j as usize * w + i as usize;
        Rgb(std::array::from_fn(|c| to_u8(d[base + c * hw + o])))
    })
}

/// Tile `images` row-major into a `rows x cols` PNG; empty cells stay black.
pub fn emit_grid(images: &Tensor<f32>, rows: usize, cols: usize, path: &Path) -> Result<PathBuf> {
    if images.ndim() != 4 || images.dim(0) == 0 || images.dim(1) != CHANNELS {
        return Err(PirError::arg("emit_grid needs a non-empty (N, 3, H, W) batch"));
    }
    let n = images.dim(0);
    if n > rows * cols {
        return Err(PirError::arg(format!("{n} images do not fit a {rows}x{cols} grid")));
    }
    let (h, w) = (images.dim(2) as u32, images.dim(3) as u32);
    let mut canvas = RgbImage::new(w * cols as u32, h * rows as u32);
    for i in 0..n {
        let tile = image_from_chw(images, i);
        let (r, c) = ((i / cols) as u32, (i % cols) as u32);
        image::imageops::replace(&mut canvas, &tile, (c * w) as i64, (r * h) as i64);
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    canvas.save(path)?;
    Ok(path.to_path_buf())
}

/// One PNG per image, `prefix-00000.png`, ...
pub fn save_images(images: &Tensor<f32>, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    (0..images.dim(0))
        .map(|i| {
            let p = dir.join(format!("{prefix}-{i:05}.png"));
            image_from_chw(images, i).save(&p)?;
            Ok(p)
        })
        .collect()
}
