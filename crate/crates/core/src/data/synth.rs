use rand::Rng as _;

use super::{Dataset, LabeledImage};
use crate::rng::{self, normal_vec};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc,
    Square,
    Ring,
    Cross,
    Stripes,
    Diamond,
}

const SHAPES: [Shape; 6] = [
    Shape::Disc,
    Shape::Square,
    Shape::Ring,
    Shape::Cross,
    Shape::Stripes,
    Shape::Diamond,
];

/// Per-class recipe: a background color with a linear ramp, and one
/// geometric figure in a second color.
#[derive(Debug, Clone)]
struct Template {
    background: [f64; 3],
    ramp: (f64, f64),
    figure: [f64; 3],
    shape: Shape,
    center: (f64, f64),
    radius: f64,
}

impl Template {
    fn draw(rng: &mut rng::Rng, class: usize) -> Self {
        let mut color = |lo: f64, hi: f64| {
            [
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
            ]
        };
        let background = color(0.15, 0.85);
        let figure = color(0.0, 1.0);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        Self {
            background,
            ramp: (0.2 * angle.cos(), 0.2 * angle.sin()),
            figure,
            shape: SHAPES[(class + rng.random_range(0..SHAPES.len())) % SHAPES.len()],
            center: (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)),
            radius: rng.random_range(0.15..0.3),
        }
    }

    /// `(u, v)` are pixel-center coordinates scaled to `[0, 1]`.
    fn inside(&self, u: f64, v: f64) -> bool {
        let (dx, dy) = (u - self.center.0, v - self.center.1);
        let r = self.radius;
        match self.shape {
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Ring => {
                let d = (dx * dx + dy * dy).sqrt();
                d <= r && d >= 0.55 * r
            }
            Shape::Cross => {
                (dx.abs() <= r && dy.abs() <= 0.3 * r) || (dy.abs() <= r && dx.abs() <= 0.3 * r)
            }
            Shape::Stripes => {
                dx.abs() <= r && dy.abs() <= r && ((dy + r) / (0.5 * r)).floor() as i64 % 2 == 0
            }
            Shape::Diamond => dx.abs() + dy.abs() <= r,
        }
    }

    fn render(&self, h: usize, w: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + 0.5) / w as f64;
                let v = (y as f64 + 0.5) / h as f64;
                if self.inside(u, v) {
                    out.extend_from_slice(&self.figure);
                } else {
                    let shade = self.ramp.0 * (u - 0.5) + self.ramp.1 * (v - 0.5);
                    out.extend(self.background.iter().map(|c| (c + shade).clamp(0.0, 1.0)));
                }
            }
        }
        out
    }
}

/// Procedural dataset: each class is a distinct template, each sample the
/// template plus Gaussian pixel noise clamped to `[0, 1]`. Samples are
/// ordered class by class.
pub fn gen_synthetic(
    num_classes: usize,
    per_class: usize,
    size: (usize, usize),
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || size.0 == 0 || size.1 == 0 {
        return Err(Error::config(
            "synthetic",
            "class count, samples per class and size must be positive",
        ));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::config(
            "noise_sigma",
            "must be finite and non-negative",
        ));
    }
    let mut rng = rng::seeded(seed, rng::stream::DATA);
    let templates: Vec<Template> = (0..num_classes)
        .map(|c| Template::draw(&mut rng, c))
        .collect();
    let (h, w) = size;
    let mut images = Vec::with_capacity(num_classes * per_class);
    for (class_id, t) in templates.iter().enumerate() {
        let base = t.render(h, w);
        for _ in 0..per_class {
            let noise = normal_vec(&mut rng, base.len(), noise_sigma);
            let data = base
                .iter()
                .zip(&noise)
                .map(|(b, n)| (b + n).clamp(0.0, 1.0))
                .collect();
            images.push(LabeledImage {
                pixels: Tensor::new([h, w, 3], data)?,
                class_id,
            });
        }
    }
    Ok(Dataset {
        images,
        num_classes,
        class_names: (0..num_classes).map(|c| format!("class{c}")).collect(),
    })
}
