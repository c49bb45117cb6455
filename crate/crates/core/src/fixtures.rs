//! Seeded synthetic visible/infrared scenes.
//!
//! Used for micro-scale training runs, benchmarks and tests when no real
//! aligned dataset is at hand. Scenes contain shapes and stripe textures that
//! are visible in the RGB image, plus "warm" targets that are bright in
//! infrared but low-contrast in the visible image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasetgen::{
    gaussian_blur, make_mask, sample_seed, JointSample, MaskKind, DEFAULT_SIGMA,
};
use crate::imageio::Image;

struct Shape {
    cy: f32,
    cx: f32,
    ry: f32,
    rx: f32,
    disk: bool,
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let (hf, wf) = (h as f32, w as f32);
        Self {
            cy: rng.gen_range(0.1..0.9) * hf,
            cx: rng.gen_range(0.1..0.9) * wf,
            ry: rng.gen_range(0.06..0.2) * hf,
            rx: rng.gen_range(0.06..0.2) * wf,
            disk: rng.gen_bool(0.5),
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f32 + 0.5 - self.cy) / self.ry;
        let dx = (x as f32 + 0.5 - self.cx) / self.rx;
        if self.disk {
            dy * dy + dx * dx <= 1.0
        } else {
            dy.abs() <= 1.0 && dx.abs() <= 1.0
        }
    }
}

/// Returns an aligned `(visible RGB, infrared)` pair of size `height × width`.
pub fn synthetic_scene(seed: u64, height: usize, width: usize) -> (Image, Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.8));
    let bottom: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.6));
    let ir_bg = rng.gen_range(0.1..0.3);

    let mut vis = Image::filled(height, width, 3, 0.0);
    let mut ir = Image::filled(height, width, 1, 0.0);
    for y in 0..height {
        let t = y as f32 / (height - 1).max(1) as f32;
        for x in 0..width {
            for c in 0..3 {
                vis.set(y, x, c, top[c] * (1.0 - t) + bottom[c] * t);
            }
            ir.set(y, x, 0, ir_bg + 0.1 * t);
        }
    }

    // textured patch: stripes in the visible image only
    let stripe = Shape::random(&mut rng, height, width);
    let period = rng.gen_range(3.0..6.0f32);
    let angle = rng.gen_range(0.0..std::f32::consts::PI);
    for y in 0..height {
        for x in 0..width {
            if stripe.contains(y, x) {
                let u = x as f32 * angle.cos() + y as f32 * angle.sin();
                let v = 0.5 + 0.4 * (2.0 * std::f32::consts::PI * u / period).sin();
                for (c, t) in top.iter().enumerate() {
                    vis.set(y, x, c, v * (0.6 + 0.4 * t));
                }
            }
        }
    }

    // ordinary objects: distinct in both modalities
    for _ in 0..rng.gen_range(3..6) {
        let shape = Shape::random(&mut rng, height, width);
        let color: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let heat = rng.gen_range(0.2..0.6);
        for y in 0..height {
            for x in 0..width {
                if shape.contains(y, x) {
                    for (c, v) in color.iter().enumerate() {
                        vis.set(y, x, c, *v);
                    }
                    ir.set(y, x, 0, heat);
                }
            }
        }
    }

    // warm targets: bright in infrared, dim in the visible image
    for _ in 0..rng.gen_range(1..3) {
        let shape = Shape::random(&mut rng, height, width);
        let heat = rng.gen_range(0.8..1.0);
        for y in 0..height {
            for x in 0..width {
                if shape.contains(y, x) {
                    for c in 0..3 {
                        let v = vis.get(y, x, c);
                        vis.set(y, x, c, 0.85 * v + 0.05);
                    }
                    ir.set(y, x, 0, heat);
                }
            }
        }
    }

    // thermal imagery is smoother than the visible band
    let ir = gaussian_blur(&ir, 0.8).expect("positive sigma");
    let noise = |rng: &mut ChaCha8Rng| rng.gen_range(-0.01..0.01f32);
    let vis = {
        let mut v = vis;
        for p in v.data_mut() {
            *p = (*p + noise(&mut rng)).clamp(0.0, 1.0);
        }
        v
    };
    let ir = ir.map(|v| v.clamp(0.0, 1.0));
    (vis, ir)
}

/// `n` joint samples built from synthetic scenes with centered-disk focus
/// masks, as `build_dataset` would lay them out.
pub fn synthetic_dataset(seed: u64, n: usize, height: usize, width: usize) -> Vec<JointSample> {
    (0..n)
        .map(|i| {
            let (vis, ir) = synthetic_scene(
                seed.wrapping_mul(1000).wrapping_add(i as u64),
                height,
                width,
            );
            let mask = make_mask(height, width, MaskKind::CenteredDisk, sample_seed(seed, i));
            JointSample::synthesize(format!("s{i:03}"), &vis, &ir, &mask, DEFAULT_SIGMA)
                .expect("fixture shapes are aligned")
        })
        .collect()
}
