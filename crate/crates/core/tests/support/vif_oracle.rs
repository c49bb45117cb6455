//! Direct VIF evaluation with full 2-D kernels, for cross-checking.

use gifnet::Image;

pub fn to255(img: &Image) -> Vec<f64> {
    img.luma()
        .data()
        .iter()
        .map(|&v| v as f64 * 255.0)
        .collect()
}

struct Grid {
    h: usize,
    w: usize,
    d: Vec<f64>,
}

impl Grid {
    fn at(&self, y: usize, x: usize) -> f64 {
        self.d[y * self.w + x]
    }

    /// Valid-mode correlation with a full 2-D kernel.
    fn filter(&self, k: &[Vec<f64>]) -> Grid {
        let n = k.len();
        let (h, w) = (self.h + 1 - n, self.w + 1 - n);
        let mut d = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (i, row) in k.iter().enumerate() {
                    for (j, kv) in row.iter().enumerate() {
                        s += kv * self.at(y + i, x + j);
                    }
                }
                d[y * w + x] = s;
            }
        }
        Grid { h, w, d }
    }

    fn every_other(&self) -> Grid {
        let mut d = Vec::new();
        let mut h = 0;
        let mut w = 0;
        for y in (0..self.h).step_by(2) {
            h += 1;
            w = 0;
            for x in (0..self.w).step_by(2) {
                w += 1;
                d.push(self.at(y, x));
            }
        }
        Grid { h, w, d }
    }

    fn times(&self, o: &Grid) -> Grid {
        let d = self.d.iter().zip(&o.d).map(|(a, b)| a * b).collect();
        Grid {
            h: self.h,
            w: self.w,
            d,
        }
    }
}

fn gauss2d(n: usize) -> Vec<Vec<f64>> {
    let sigma = n as f64 / 5.0;
    let c = (n - 1) as f64 / 2.0;
    let mut k: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                    (-r2 / (2.0 * sigma * sigma)).exp()
                })
                .collect()
        })
        .collect();
    let total: f64 = k.iter().flatten().sum();
    k.iter_mut().flatten().for_each(|v| *v /= total);
    k
}

/// Pixel-domain VIF written out directly with 2-D kernels.
pub fn naive_vif(reference: &Image, dist: &Image) -> f64 {
    let (h, w) = reference.dims();
    let mut r = Grid {
        h,
        w,
        d: to255(reference),
    };
    let mut d = Grid {
        h,
        w,
        d: to255(dist),
    };
    let (sn2, eps) = (2.0, 1e-10);
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4u32 {
        let n = (1 << (4 - scale + 1)) + 1;
        let k = gauss2d(n);
        if scale > 1 {
            r = r.filter(&k).every_other();
            d = d.filter(&k).every_other();
        }
        let (mu1, mu2) = (r.filter(&k), d.filter(&k));
        let (rr, dd, rd) = (
            r.times(&r).filter(&k),
            d.times(&d).filter(&k),
            r.times(&d).filter(&k),
        );
        for i in 0..mu1.d.len() {
            let mut s1 = (rr.d[i] - mu1.d[i] * mu1.d[i]).max(0.0);
            let s2 = (dd.d[i] - mu2.d[i] * mu2.d[i]).max(0.0);
            let s12 = rd.d[i] - mu1.d[i] * mu2.d[i];
            let mut g = s12 / (s1 + eps);
            let mut sv = s2 - g * s12;
            if s1 < eps {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < eps {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            sv = sv.max(eps);
            num += (1.0 + g * g * s1 / (sv + sn2)).log10();
            den += (1.0 + s1 / sn2).log10();
        }
    }
    num / den
}
