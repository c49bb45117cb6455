//! Fusion quality metrics on the 0–255 luma scale, and a directory evaluator.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imageio::{load_image, Image};

/// Noise variance of the visual channel model.
pub const VIF_SIGMA_N2: f64 = 2.0;
pub const VIF_SCALES: usize = 4;

fn scaled(img: &Image) -> (usize, usize, Vec<f64>) {
    let l = img.luma();
    let (h, w) = l.dims();
    (h, w, l.data().iter().map(|&v| v as f64 * 255.0).collect())
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Average gradient: mean of `sqrt((dx² + dy²) / 2)` over the pixels that
/// have both a right and a lower neighbour.
pub fn metric_ag(img: &Image) -> f64 {
    let (h, w, d) = scaled(img);
    if h < 2 || w < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let v = d[y * w + x];
            let dx = d[y * w + x + 1] - v;
            let dy = d[(y + 1) * w + x] - v;
            sum += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    sum / ((h - 1) * (w - 1)) as f64
}

/// Edge intensity: mean Sobel gradient magnitude with replicate padding.
pub fn metric_ei(img: &Image) -> f64 {
    let (h, w, d) = scaled(img);
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        d[yy * w + xx]
    };
    let mut sum = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            sum += (gx * gx + gy * gy).sqrt();
        }
    }
    sum / (h * w) as f64
}

/// Pearson correlation; 0 when either operand has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

/// Sum of correlation differences: `r(F − B, A) + r(F − A, B)`.
pub fn metric_scd(fused: &Image, src_a: &Image, src_b: &Image) -> Result<f64> {
    check_same(fused, src_a)?;
    check_same(fused, src_b)?;
    let (_, _, f) = scaled(fused);
    let (_, _, a) = scaled(src_a);
    let (_, _, b) = scaled(src_b);
    let f_minus_b: Vec<f64> = f.iter().zip(&b).map(|(x, y)| x - y).collect();
    let f_minus_a: Vec<f64> = f.iter().zip(&a).map(|(x, y)| x - y).collect();
    Ok(pearson(&f_minus_b, &a) + pearson(&f_minus_a, &b))
}

/// Normalized 1-D Gaussian taps of length `n` and standard deviation `n / 5`.
fn vif_taps(n: usize) -> Vec<f64> {
    let sigma = n as f64 / 5.0;
    let c = (n as f64 - 1.0) / 2.0;
    let t: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    d: Vec<f64>,
}

impl Plane {
    /// Separable valid-mode correlation.
    fn filter_valid(&self, taps: &[f64]) -> Plane {
        let n = taps.len();
        let (oh, ow) = (self.h + 1 - n, self.w + 1 - n);
        let mut rows = vec![0.0; self.h * ow];
        for y in 0..self.h {
            for x in 0..ow {
                rows[y * ow + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * self.d[y * self.w + x + k])
                    .sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * rows[(y + k) * ow + x])
                    .sum();
            }
        }
        Plane {
            h: oh,
            w: ow,
            d: out,
        }
    }

    fn decimate(&self) -> Plane {
        let (oh, ow) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut d = Vec::with_capacity(oh * ow);
        for y in (0..self.h).step_by(2) {
            for x in (0..self.w).step_by(2) {
                d.push(self.d[y * self.w + x]);
            }
        }
        Plane { h: oh, w: ow, d }
    }

    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            d: self
                .d
                .iter()
                .zip(&other.d)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        }
    }
}

/// Window length at 1-based `scale`.
pub fn vif_window(scale: usize) -> usize {
    (1usize << (VIF_SCALES - scale + 1)) + 1
}

/// Smallest square side on which every scale still has a valid window.
pub fn vif_min_size() -> usize {
    let fits = |mut s: usize| {
        for scale in 1..=VIF_SCALES {
            let n = vif_window(scale);
            if scale > 1 {
                if s < n {
                    return false;
                }
                s = (s + 1 - n).div_ceil(2);
            }
            if s < n {
                return false;
            }
        }
        true
    };
    (1..).find(|&s| fits(s)).unwrap()
}

/// Pixel-domain multi-scale VIF of `dist` against reference `reference`.
pub fn vif_single(reference: &Image, dist: &Image) -> Result<f64> {
    check_same(reference, dist)?;
    let (h, w, r) = scaled(reference);
    let (_, _, d) = scaled(dist);
    let min = vif_min_size();
    if h < min || w < min {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            min,
        });
    }
    let mut r = Plane { h, w, d: r };
    let mut d = Plane { h, w, d };
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=VIF_SCALES {
        let taps = vif_taps(vif_window(scale));
        if scale > 1 {
            r = r.filter_valid(&taps).decimate();
            d = d.filter_valid(&taps).decimate();
        }
        let mu1 = r.filter_valid(&taps);
        let mu2 = d.filter_valid(&taps);
        let rr = r.zip(&r, |a, b| a * b).filter_valid(&taps);
        let dd = d.zip(&d, |a, b| a * b).filter_valid(&taps);
        let rd = r.zip(&d, |a, b| a * b).filter_valid(&taps);
        for i in 0..mu1.d.len() {
            let (m1, m2) = (mu1.d[i], mu2.d[i]);
            let s1 = (rr.d[i] - m1 * m1).max(0.0);
            let s2 = (dd.d[i] - m2 * m2).max(0.0);
            let s12 = rd.d[i] - m1 * m2;
            let (num_i, den_i) = vif_local(s1, s2, s12);
            num += num_i;
            den += den_i;
        }
    }
    if den == 0.0 {
        // a structureless reference carries no information to preserve
        return Ok(if r.d == d.d { 1.0 } else { 0.0 });
    }
    Ok(num / den)
}

/// Information terms of one local window under the gain-plus-noise model.
pub(crate) fn vif_local(mut s1: f64, s2: f64, s12: f64) -> (f64, f64) {
    const EPS: f64 = 1e-10;
    let mut g = s12 / (s1 + EPS);
    let mut sv = s2 - g * s12;
    if s1 < EPS {
        g = 0.0;
        sv = s2;
        s1 = 0.0;
    }
    if s2 < EPS {
        g = 0.0;
        sv = 0.0;
    }
    if g < 0.0 {
        sv = s2;
        g = 0.0;
    }
    if sv <= EPS {
        sv = EPS;
    }
    (
        (1.0 + g * g * s1 / (sv + VIF_SIGMA_N2)).log10(),
        (1.0 + s1 / VIF_SIGMA_N2).log10(),
    )
}

/// Mean of the fidelity of `fused` to each source.
pub fn metric_vif(fused: &Image, src_a: &Image, src_b: &Image) -> Result<f64> {
    Ok(0.5 * (vif_single(src_a, fused)? + vif_single(src_b, fused)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub ei: f64,
    pub ag: f64,
    pub vif: f64,
    pub scd: f64,
}

impl MetricRow {
    pub fn compute(
        id: impl Into<String>,
        fused: &Image,
        src_a: &Image,
        src_b: &Image,
    ) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            ei: metric_ei(fused),
            ag: metric_ag(fused),
            vif: metric_vif(fused, src_a, src_b)?,
            scd: metric_scd(fused, src_a, src_b)?,
        })
    }

    fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.id, self.ei, self.ag, self.vif, self.scd
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<MetricRow>,
    pub mean: MetricRow,
}

impl MetricReport {
    pub fn from_rows(per_image: Vec<MetricRow>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::InvalidArgument("no images to evaluate".into()));
        }
        let n = per_image.len() as f64;
        let avg = |f: fn(&MetricRow) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        let mean = MetricRow {
            id: "MEAN".into(),
            ei: avg(|r| r.ei),
            ag: avg(|r| r.ag),
            vif: avg(|r| r.vif),
            scd: avg(|r| r.scd),
        };
        Ok(Self { per_image, mean })
    }

    pub fn count(&self) -> usize {
        self.per_image.len()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\tei\tag\tvif\tscd\n");
        for r in self.per_image.iter().chain(std::iter::once(&self.mean)) {
            s.push_str(&r.tsv());
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "bmp")
    )
}

/// Image files in `dir` keyed by file stem.
pub fn images_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !is_image(&path) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::InvalidArgument(format!(
                "`{}` and `{}` share the stem `{stem}`",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Scores every fused image against the same-stem sources; rows are sorted by id.
pub fn evaluate_dir(fused_dir: &Path, src_a_dir: &Path, src_b_dir: &Path) -> Result<MetricReport> {
    let fused = images_by_stem(fused_dir)?;
    let a = images_by_stem(src_a_dir)?;
    let b = images_by_stem(src_b_dir)?;
    if fused.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no images in {}",
            fused_dir.display()
        )));
    }
    for (dir, set) in [(src_a_dir, &a), (src_b_dir, &b)] {
        if let Some(k) = fused.keys().find(|k| !set.contains_key(*k)) {
            return Err(Error::InvalidArgument(format!(
                "`{k}` has no match in {}",
                dir.display()
            )));
        }
        if let Some(k) = set.keys().find(|k| !fused.contains_key(*k)) {
            return Err(Error::InvalidArgument(format!(
                "`{k}` in {} has no fused counterpart",
                dir.display()
            )));
        }
    }
    let rows = fused
        .iter()
        .map(|(id, path)| {
            MetricRow::compute(
                id.clone(),
                &load_image(path)?,
                &load_image(&a[id])?,
                &load_image(&b[id])?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_rows(rows)
}
