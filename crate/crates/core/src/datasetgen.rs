//! RGB-focused joint dataset: each aligned visible/infrared pair gains a
//! near-focus and a far-focus counterpart made by blurring complementary
//! regions of the visible image. The untouched visible image is the
//! multi-focus ground truth.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{load_image, save_image, Image};

pub const DEFAULT_SIGMA: f32 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    LeftHalf,
    TopHalf,
    CenteredDisk,
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::LeftHalf => "left-half",
            MaskKind::TopHalf => "top-half",
            MaskKind::CenteredDisk => "centered-disk",
        })
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left-half" => Ok(MaskKind::LeftHalf),
            "top-half" => Ok(MaskKind::TopHalf),
            "centered-disk" => Ok(MaskKind::CenteredDisk),
            other => Err(Error::InvalidArgument(format!(
                "unknown mask kind `{other}` (left-half, top-half, centered-disk)"
            ))),
        }
    }
}

/// Binary plane, row-major; `true` marks the region kept sharp in the near-focus image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn area_fraction(&self) -> f64 {
        self.bits.iter().filter(|b| **b).count() as f64 / self.bits.len() as f64
    }
}

/// Normalized 1-D Gaussian taps of radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter().map(|t| (t / sum) as f32).collect()
}

/// Separable truncated Gaussian blur with edge-replicate padding.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Result<Image> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0f32;
                for (k, t) in kernel.iter().enumerate() {
                    let sx = clampi(x as isize + k as isize - r, w);
                    acc += t * img.get(y, sx, ch);
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0f32;
                for (k, t) in kernel.iter().enumerate() {
                    let sy = clampi(y as isize + k as isize - r, h);
                    acc += t * tmp[(sy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Image::from_vec(h, w, c, out)
}

/// Complementary partial blur: `near` keeps `vis` where the mask is set and
/// takes the blurred image elsewhere; `far` is the opposite assignment.
pub fn synth_multifocus_pair(vis: &Image, mask: &Mask, sigma: f32) -> Result<(Image, Image)> {
    if (mask.height, mask.width) != vis.dims() {
        return Err(Error::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.height,
            mask.width,
            vis.height(),
            vis.width()
        )));
    }
    let blurred = gaussian_blur(vis, sigma)?;
    let mut near = vis.clone();
    let mut far = vis.clone();
    for y in 0..vis.height() {
        for x in 0..vis.width() {
            for c in 0..vis.channels() {
                if mask.get(y, x) {
                    far.set(y, x, c, blurred.get(y, x, c));
                } else {
                    near.set(y, x, c, blurred.get(y, x, c));
                }
            }
        }
    }
    Ok((near, far))
}

/// Deterministic focus mask. The disk radius is drawn uniformly from
/// `[0.2, 0.4]·min(height, width)` with a generator seeded by `seed`.
pub fn make_mask(height: usize, width: usize, kind: MaskKind, seed: u64) -> Mask {
    match kind {
        MaskKind::LeftHalf => {
            let half = width / 2;
            Mask {
                height,
                width,
                bits: (0..height * width).map(|i| i % width < half).collect(),
            }
        }
        MaskKind::TopHalf => {
            let half = height / 2;
            Mask {
                height,
                width,
                bits: (0..height * width).map(|i| i / width < half).collect(),
            }
        }
        MaskKind::CenteredDisk => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frac: f64 = rng.gen_range(0.2..=0.4);
            let radius = frac * height.min(width) as f64;
            let (cy, cx) = (height as f64 / 2.0, width as f64 / 2.0);
            let bits = (0..height * width)
                .map(|i| {
                    let dy = (i / width) as f64 + 0.5 - cy;
                    let dx = (i % width) as f64 + 0.5 - cx;
                    dy * dy + dx * dx <= radius * radius
                })
                .collect();
            Mask {
                height,
                width,
                bits,
            }
        }
    }
}

/// One aligned training record.
#[derive(Clone, Debug)]
pub struct JointSample {
    pub id: String,
    pub vis: Image,
    pub ir: Image,
    pub near_focus: Image,
    pub far_focus: Image,
    pub gt: Image,
}

impl JointSample {
    /// Assembles a sample from an aligned pair: RGB visible, single-channel infrared.
    pub fn synthesize(
        id: impl Into<String>,
        vis: &Image,
        ir: &Image,
        mask: &Mask,
        sigma: f32,
    ) -> Result<Self> {
        if vis.dims() != ir.dims() {
            return Err(Error::Shape(format!(
                "visible {:?} and infrared {:?} are not aligned",
                vis.dims(),
                ir.dims()
            )));
        }
        let vis = vis.to_rgb();
        let (near_focus, far_focus) = synth_multifocus_pair(&vis, mask, sigma)?;
        Ok(Self {
            id: id.into(),
            gt: vis.clone(),
            vis,
            ir: ir.luma(),
            near_focus,
            far_focus,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.vis.dims()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildConfig {
    pub seed: u64,
    pub sigma: f32,
    pub mask: MaskKind,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sigma: DEFAULT_SIGMA,
            mask: MaskKind::CenteredDisk,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub vis: PathBuf,
    pub ir: PathBuf,
    pub near: PathBuf,
    pub far: PathBuf,
}

/// Index of a generated dataset. Entry paths are relative to `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub blur_sigma: f32,
    pub mask_kind: MaskKind,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "seed={}\nsigma={}\nmask={}\n",
            self.seed, self.blur_sigma, self.mask_kind
        );
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.vis.display(),
                e.ir.display(),
                e.near.display(),
                e.far.display()
            ));
        }
        out
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut seed = None;
        let mut sigma = None;
        let mut mask = None;
        let mut entries: Vec<ManifestEntry> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(v) = line.strip_prefix("seed=") {
                seed = Some(
                    v.parse()
                        .map_err(|_| Error::Manifest(format!("line {}: bad seed", n + 1)))?,
                );
            } else if let Some(v) = line.strip_prefix("sigma=") {
                sigma = Some(
                    v.parse()
                        .map_err(|_| Error::Manifest(format!("line {}: bad sigma", n + 1)))?,
                );
            } else if let Some(v) = line.strip_prefix("mask=") {
                mask = Some(v.parse()?);
            } else {
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() != 5 {
                    return Err(Error::Manifest(format!(
                        "line {}: expected 5 tab-separated fields, got {}",
                        n + 1,
                        cols.len()
                    )));
                }
                if entries.iter().any(|e| e.id == cols[0]) {
                    return Err(Error::Manifest(format!("duplicate id `{}`", cols[0])));
                }
                entries.push(ManifestEntry {
                    id: cols[0].to_string(),
                    vis: cols[1].into(),
                    ir: cols[2].into(),
                    near: cols[3].into(),
                    far: cols[4].into(),
                });
            }
        }
        Ok(Self {
            root: root.into(),
            entries,
            seed: seed.ok_or_else(|| Error::Manifest("missing seed= header".into()))?,
            blur_sigma: sigma.ok_or_else(|| Error::Manifest("missing sigma= header".into()))?,
            mask_kind: mask.ok_or_else(|| Error::Manifest("missing mask= header".into()))?,
        })
    }

    /// Reads a manifest file; entry paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::parse(&text, root)?;
        for e in &manifest.entries {
            for rel in [&e.vis, &e.ir, &e.near, &e.far] {
                let full = manifest.root.join(rel);
                if !full.is_file() {
                    return Err(Error::Manifest(format!("missing file {}", full.display())));
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load_sample(&self, index: usize) -> Result<JointSample> {
        let e = &self.entries[index];
        let vis = load_image(self.root.join(&e.vis))?.to_rgb();
        let sample = JointSample {
            id: e.id.clone(),
            ir: load_image(self.root.join(&e.ir))?.luma(),
            near_focus: load_image(self.root.join(&e.near))?.to_rgb(),
            far_focus: load_image(self.root.join(&e.far))?.to_rgb(),
            gt: vis.clone(),
            vis,
        };
        let dims = sample.dims();
        if [&sample.ir, &sample.near_focus, &sample.far_focus]
            .iter()
            .any(|i| i.dims() != dims)
        {
            return Err(Error::Manifest(format!(
                "entry `{}` has unaligned images",
                e.id
            )));
        }
        Ok(sample)
    }

    pub fn load_all(&self) -> Result<Vec<JointSample>> {
        (0..self.entries.len())
            .map(|i| self.load_sample(i))
            .collect()
    }
}

fn image_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png") | Some("bmp")) {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Per-sample mask seed, derived from the run seed and the sample position.
pub(crate) fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

/// Generates the joint dataset under `out_dir` from same-named visible and
/// infrared images, then writes `manifest.txt`.
pub fn build_dataset(
    src_vis_dir: impl AsRef<Path>,
    src_ir_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    config: &BuildConfig,
) -> Result<DatasetManifest> {
    let (src_vis_dir, src_ir_dir, out_dir) =
        (src_vis_dir.as_ref(), src_ir_dir.as_ref(), out_dir.as_ref());
    if config.sigma.is_nan() || config.sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sigma must be > 0, got {}",
            config.sigma
        )));
    }
    let vis_files = image_files(src_vis_dir)?;
    if vis_files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no PNG/BMP images in {}",
            src_vis_dir.display()
        )));
    }
    let ir_files = image_files(src_ir_dir)?;
    for sub in ["vis", "ir", "near", "far"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let mut entries = Vec::with_capacity(vis_files.len());
    for (index, (id, vis_path)) in vis_files.iter().enumerate() {
        let ir_path = ir_files
            .iter()
            .find(|(stem, _)| stem == id)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::InvalidArgument(format!("no infrared image named `{id}`")))?;
        let vis = load_image(vis_path)?;
        let ir = load_image(ir_path)?;
        let (h, w) = vis.dims();
        let mask = make_mask(h, w, config.mask, sample_seed(config.seed, index));
        let sample = JointSample::synthesize(id.clone(), &vis, &ir, &mask, config.sigma)?;

        let entry = ManifestEntry {
            id: id.clone(),
            vis: PathBuf::from("vis").join(format!("{id}.png")),
            ir: PathBuf::from("ir").join(format!("{id}.png")),
            near: PathBuf::from("near").join(format!("{id}.png")),
            far: PathBuf::from("far").join(format!("{id}.png")),
        };
        save_image(&sample.vis, out_dir.join(&entry.vis))?;
        save_image(&sample.ir, out_dir.join(&entry.ir))?;
        save_image(&sample.near_focus, out_dir.join(&entry.near))?;
        save_image(&sample.far_focus, out_dir.join(&entry.far))?;
        entries.push(entry);
    }

    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
        seed: config.seed,
        blur_sigma: config.sigma,
        mask_kind: config.mask,
    };
    manifest.save()?;
    Ok(manifest)
}
