use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::Transform;
use super::haze::{apply_scattering, synthesize_haze, HazeParams, ScalarField};
use super::io::{load_png, save_png};
use super::procedural::{procedural_scene, smooth_field, MAX_DEPTH};
use super::Image;
use crate::error::{Error, Result};
use hazekit_tape::Tensor;

/// Range of the per-sample scattering coefficient for paired data.
pub const BETA_RANGE: (f64, f64) = (0.5, 2.5);
/// Range of the per-sample airlight brightness for paired data.
pub const AIRLIGHT_RANGE: (f64, f64) = (0.7, 1.0);

/// Where clean scenes come from.
#[derive(Clone, Debug)]
pub enum CleanSource {
    /// Generated scenes of `size x size` pixels.
    Procedural { size: usize },
    /// A fixed corpus, cycled through in order.
    Images(Vec<Image>),
}

impl CleanSource {
    /// Every `*.png` in `dir`, in file-name order.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let images = paths.iter().map(|p| load_png(p)).collect::<Result<Vec<_>>>()?;
        if images.is_empty() {
            return Err(Error::Input(format!("no PNG images in {}", dir.display())));
        }
        Ok(CleanSource::Images(images))
    }

    fn scene(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<(Image, ScalarField)> {
        match self {
            CleanSource::Procedural { size } => {
                if *size < 8 {
                    return Err(Error::Input(format!("procedural scenes need at least 8 pixels, got {size}")));
                }
                Ok(procedural_scene(*size, rng))
            }
            CleanSource::Images(images) => {
                if images.is_empty() {
                    return Err(Error::Input("clean image corpus is empty".into()));
                }
                let img = images[index % images.len()].clone();
                let [_, _, h, w] = img.dims4();
                let mut depth = smooth_field(h, w, 4, rng);
                // farther towards the top of the frame, as in most outdoor shots
                for y in 0..h {
                    let up = 1.0 - y as f64 / h.max(2) as f64;
                    for v in &mut depth.values[y * w..(y + 1) * w] {
                        *v = MAX_DEPTH * (0.5 * *v + 0.5 * up);
                    }
                }
                Ok((img, depth))
            }
        }
    }
}

/// Index-aligned hazy/clean pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub clean: Vec<Image>,
    pub hazy: Vec<Image>,
    pub seed: u64,
}

impl PairedDataset {
    pub fn new(clean: Vec<Image>, hazy: Vec<Image>, seed: u64) -> Result<Self> {
        if clean.len() != hazy.len() {
            return Err(Error::Input(format!("{} clean images but {} hazy ones", clean.len(), hazy.len())));
        }
        for (i, (c, h)) in clean.iter().zip(&hazy).enumerate() {
            if c.shape() != h.shape() {
                return Err(Error::Dimension(format!("pair {i}: {:?} vs {:?}", c.shape(), h.shape())));
            }
            check_unit_range(c)?;
            check_unit_range(h)?;
        }
        Ok(Self { clean, hazy, seed })
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    /// Writes `hazy/NNNN.png`, `clean/NNNN.png` and `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir.join("hazy")).map_err(|e| Error::io(dir, e))?;
        fs::create_dir_all(dir.join("clean")).map_err(|e| Error::io(dir, e))?;
        let mut pairs = Vec::with_capacity(self.len());
        for (i, (h, c)) in self.hazy.iter().zip(&self.clean).enumerate() {
            let hazy_path = PathBuf::from(format!("hazy/{i:04}.png"));
            let clean_path = PathBuf::from(format!("clean/{i:04}.png"));
            save_png(&dir.join(&hazy_path), h)?;
            save_png(&dir.join(&clean_path), c)?;
            pairs.push(PairEntry { hazy_path, clean_path });
        }
        let manifest = DatasetManifest { pairs, unlabeled: Vec::new(), seed: Some(self.seed) };
        manifest.write(&dir.join("manifest.json"))
    }

    pub fn read(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        if manifest.pairs.is_empty() {
            return Err(Error::Input(format!("{} lists no hazy/clean pairs", manifest_path.display())));
        }
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut clean = Vec::with_capacity(manifest.pairs.len());
        let mut hazy = Vec::with_capacity(manifest.pairs.len());
        for p in &manifest.pairs {
            hazy.push(load_png(&base.join(&p.hazy_path))?);
            clean.push(load_png(&base.join(&p.clean_path))?);
        }
        Self::new(clean, hazy, manifest.seed.unwrap_or(0))
    }
}

/// Unlabelled images from the deployment domain.
#[derive(Clone, Debug, PartialEq)]
pub struct RealDataset {
    pub images: Vec<Image>,
    pub seed: u64,
}

impl RealDataset {
    pub fn new(images: Vec<Image>, seed: u64) -> Result<Self> {
        for img in &images {
            check_unit_range(img)?;
        }
        Ok(Self { images, seed })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
        let mut unlabeled = Vec::with_capacity(self.len());
        for (i, img) in self.images.iter().enumerate() {
            let p = PathBuf::from(format!("images/{i:04}.png"));
            save_png(&dir.join(&p), img)?;
            unlabeled.push(p);
        }
        let manifest = DatasetManifest { pairs: Vec::new(), unlabeled, seed: Some(self.seed) };
        manifest.write(&dir.join("manifest.json"))
    }

    /// Reads the unlabelled list of a manifest, or the hazy side of a paired one.
    pub fn read(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let paths: Vec<&PathBuf> = if manifest.unlabeled.is_empty() {
            manifest.pairs.iter().map(|p| &p.hazy_path).collect()
        } else {
            manifest.unlabeled.iter().collect()
        };
        let images = paths.into_iter().map(|p| load_png(&base.join(p))).collect::<Result<Vec<_>>>()?;
        Self::new(images, manifest.seed.unwrap_or(0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub hazy_path: PathBuf,
    pub clean_path: PathBuf,
}

/// On-disk dataset listing; paths are relative to the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<PairEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unlabeled: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(path.to_path_buf())
    }
}

fn check_unit_range(img: &Image) -> Result<()> {
    if img.data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::Input("image pixels must lie in [0, 1]".into()))
    }
}

/// `n` pairs rendered with a homogeneous haze of random strength and
/// near-neutral airlight. Reproducible for a fixed `seed`.
pub fn build_synthetic_dataset(source: &CleanSource, n: usize, seed: u64) -> Result<PairedDataset> {
    if n == 0 {
        return Err(Error::Input("dataset size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clean = Vec::with_capacity(n);
    let mut hazy = Vec::with_capacity(n);
    for i in 0..n {
        let (img, depth) = source.scene(i, &mut rng)?;
        let beta = rng.random_range(BETA_RANGE.0..=BETA_RANGE.1);
        let base = rng.random_range(AIRLIGHT_RANGE.0..=AIRLIGHT_RANGE.1);
        let airlight = [0; 3].map(|_| (base + rng.random_range(-0.02..0.02)).clamp(AIRLIGHT_RANGE.0, AIRLIGHT_RANGE.1));
        let params = HazeParams::new(airlight, beta, depth)?;
        hazy.push(synthesize_haze(&img, &params)?);
        clean.push(img);
    }
    PairedDataset::new(clean, hazy, seed)
}

/// `n` unlabelled images rendered with a different haze process than
/// [`build_synthetic_dataset`]: a spatially varying scattering coefficient
/// and a coloured airlight. The clean scenes are discarded.
pub fn build_real_dataset(source: &CleanSource, n: usize, seed: u64) -> Result<RealDataset> {
    if n == 0 {
        return Err(Error::Input("dataset size must be at least 1".into()));
    }
    const CASTS: [[f64; 3]; 3] = [[1.0, 0.93, 0.78], [0.86, 0.94, 1.0], [0.97, 0.97, 0.9]];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5_EA1D_04A1);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let (img, depth) = source.scene(i, &mut rng)?;
        let field = smooth_field(depth.height, depth.width, 4, &mut rng);
        let values = field.values.iter().zip(&depth.values).map(|(b, d)| (-(0.6 + 2.2 * b) * d).exp()).collect();
        let transmission = ScalarField::new(depth.height, depth.width, values)?;
        let base = rng.random_range(0.75..0.97);
        let cast = CASTS[rng.random_range(0..CASTS.len())];
        let airlight = cast.map(|c| (base * c).clamp(0.66, 1.0));
        images.push(apply_scattering(&img, airlight, &transmission)?);
    }
    RealDataset::new(images, seed)
}

/// Deterministic shuffled minibatches with per-sample augmentation.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    crop: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, crop: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Input("cannot sample batches from an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Ok(Self { rng, order, cursor: 0, batch_size, crop })
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// `(hazy, clean)` batches of `[batch, 3, crop, crop]`.
    pub fn next_pairs(&mut self, data: &PairedDataset) -> Result<(Image, Image)> {
        let mut hazy = Vec::with_capacity(self.batch_size);
        let mut clean = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let i = self.next_index();
            let [_, _, h, w] = data.hazy[i].dims4();
            let t = Transform::sample(&mut self.rng, h, w, self.crop)?;
            hazy.push(t.apply(&data.hazy[i])?);
            clean.push(t.apply(&data.clean[i])?);
        }
        Ok((Tensor::stack_batch(&hazy), Tensor::stack_batch(&clean)))
    }

    pub fn next_images(&mut self, images: &[Image]) -> Result<Image> {
        let mut out = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let i = self.next_index();
            let [_, _, h, w] = images[i].dims4();
            let t = Transform::sample(&mut self.rng, h, w, self.crop)?;
            out.push(t.apply(&images[i])?);
        }
        Ok(Tensor::stack_batch(&out))
    }
}
