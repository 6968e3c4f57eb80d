//! Procedural two-domain image set. Every image shows one shape; its content
//! (type, position, size, rotation) is shared between domains, while the
//! domain decides the rendering: a filled warm shape on a dark slate
//! background (source) or an ink outline on striped paper (target).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PirError, Result};
use crate::image::CHANNELS;
use pir_tensor::Tensor;

/// Latent coordinates that determine content.
pub const CONTENT_DIMS: usize = 5;
pub const NUM_SHAPES: usize = 3;
/// Shape type times quadrant of the centre.
pub const NUM_CONTENT_CLASSES: usize = NUM_SHAPES * 4;
/// Rotations stay small so the three shapes remain distinct at low resolution.
pub const MAX_ROTATION: f64 = std::f64::consts::PI / 12.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    fn from_index(i: usize) -> Self {
        [Shape::Circle, Shape::Square, Shape::Triangle][i.min(NUM_SHAPES - 1)]
    }

    pub fn index(self) -> usize {
        self as usize
    }

}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "toy-source",
            Domain::Target => "toy-target",
        }
    }
}

/// Content parameters in image-relative units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyContent {
    pub shape: Shape,
    /// Centre, fractions of the side length, in [0.28, 0.72].
    pub cx: f64,
    pub cy: f64,
    /// Circumradius as a fraction of the side length, in [0.16, 0.26].
    pub radius: f64,
    /// Radians in [-MAX_ROTATION, MAX_ROTATION].
    pub rotation: f64,
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

impl ToyContent {
    /// Content read off the first [`CONTENT_DIMS`] latent coordinates through
    /// the normal CDF, so standard-normal latents give uniform parameters.
    pub fn from_latent(z: &[f64]) -> Result<Self> {
        if z.len() < CONTENT_DIMS {
            return Err(PirError::arg(format!(
                "content needs {CONTENT_DIMS} latent coordinates, got {}",
                z.len()
            )));
        }
        let u: Vec<f64> = z[..CONTENT_DIMS].iter().map(|&v| normal_cdf(v)).collect();
        let shape = Shape::from_index((u[0] * NUM_SHAPES as f64) as usize);
        Ok(Self {
            shape,
            cx: 0.28 + 0.44 * u[1],
            cy: 0.28 + 0.44 * u[2],
            radius: 0.16 + 0.10 * u[3],
            rotation: (2.0 * u[4] - 1.0) * MAX_ROTATION,
        })
    }

    pub fn quadrant(&self) -> usize {
        usize::from(self.cx >= 0.5) + 2 * usize::from(self.cy >= 0.5)
    }

    /// Class label in `0..NUM_CONTENT_CLASSES`.
    pub fn class(&self) -> usize {
        self.shape.index() * 4 + self.quadrant()
    }

    /// Signed distance (negative inside) from point `(x, y)`, image-relative units.
    fn sdf(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rotation.sin_cos();
        let (px, py) = (c * dx + s * dy, -s * dx + c * dy);
        match self.shape {
            Shape::Circle => (px * px + py * py).sqrt() - self.radius,
            Shape::Square => {
                let h = self.radius * std::f64::consts::FRAC_1_SQRT_2;
                let (qx, qy) = (px.abs() - h, py.abs() - h);
                let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
                outside + qx.max(qy).min(0.0)
            }
            Shape::Triangle => {
                // Equilateral, one vertex pointing up, half side r.
                let k = 3f64.sqrt();
                let r = self.radius * k / 2.0;
                let mut qx = px.abs() - r;
                let mut qy = -py + r / k;
                if qx + k * qy > 0.0 {
                    let (ax, ay) = ((qx - k * qy) / 2.0, (-k * qx - qy) / 2.0);
                    qx = ax;
                    qy = ay;
                }
                qx -= qx.clamp(-2.0 * r, 0.0);
                -(qx * qx + qy * qy).sqrt() * qy.signum()
            }
        }
    }
}

const SLATE: [f64; 3] = [0.16, 0.20, 0.28];
const AMBER: [f64; 3] = [0.96, 0.58, 0.18];
const PAPER: [f64; 3] = [0.93, 0.90, 0.82];
const INK: [f64; 3] = [0.10, 0.09, 0.12];
/// Outline width of the target domain, as a fraction of the side length.
pub const TARGET_STROKE: f64 = 0.1;

/// Everything about an image that is not content.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderStyle {
    pub background: [f64; 3],
    pub ink: [f64; 3],
    /// Stroke the boundary instead of filling the shape.
    pub outline: bool,
    /// Stroke width as a fraction of the side length.
    pub stroke: f64,
    /// Amplitude of the diagonal background stripes.
    pub stripes: f64,
    /// Background darkening from top to bottom, as a fraction.
    pub shade: f64,
}

impl RenderStyle {
    pub fn of(domain: Domain) -> Self {
        match domain {
            Domain::Source => Self {
                background: SLATE,
                ink: AMBER,
                outline: false,
                stroke: TARGET_STROKE,
                stripes: 0.0,
                shade: 0.25,
            },
            Domain::Target => Self {
                background: PAPER,
                ink: INK,
                outline: true,
                stroke: TARGET_STROKE,
                stripes: 0.035,
                shade: 0.0,
            },
        }
    }

    /// A style with random palette, fill mode, stripes and shading. Ink and
    /// background differ in luma by at least 0.25 so the shape stays visible.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let luma = |c: &[f64; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        loop {
            let background: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
            let ink: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
            if (luma(&background) - luma(&ink)).abs() < 0.25 {
                continue;
            }
            return Self {
                background,
                ink,
                outline: rng.random(),
                stroke: rng.random_range(0.05..0.15),
                stripes: if rng.random() { rng.random_range(0.0..0.06) } else { 0.0 },
                shade: rng.random_range(0.0..0.3),
            };
        }
    }

    /// Whether the background is the lighter of the two colours.
    pub fn light_background(&self) -> bool {
        let luma = |c: &[f64; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        luma(&self.background) > luma(&self.ink)
    }
}

/// Render one image, CHW in [-1, 1].
pub fn render(content: &ToyContent, domain: Domain, resolution: usize) -> Vec<f32> {
    render_styled(content, &RenderStyle::of(domain), resolution)
}

pub fn render_styled(content: &ToyContent, style: &RenderStyle, resolution: usize) -> Vec<f32> {
    let r = resolution as f64;
    let hw = resolution * resolution;
    let mut out = vec![0f32; CHANNELS * hw];
    let stroke = style.stroke * r;
    for i in 0..resolution {
        for j in 0..resolution {
            let (x, y) = ((j as f64 + 0.5) / r, (i as f64 + 0.5) / r);
            let d = content.sdf(x, y) * r;
            let cover = if style.outline {
                (0.5 - (d.abs() - stroke / 2.0)).clamp(0.0, 1.0)
            } else {
                (0.5 - d).clamp(0.0, 1.0)
            };
            let stripe = style.stripes * (std::f64::consts::PI * (i + j) as f64 / 2.0).sin();
            let shade = 1.0 - style.shade * y;
            for c in 0..CHANNELS {
                let bg = style.background[c] * shade + stripe;
                let v = bg * (1.0 - cover) + style.ink[c] * cover;
                out[c * hw + i * resolution + j] = (v.clamp(0.0, 1.0) * 2.0 - 1.0) as f32;
            }
        }
    }
    out
}

/// Batch render, (N, 3, R, R).
pub fn render_batch(contents: &[ToyContent], domain: Domain, resolution: usize) -> Tensor<f32> {
    let style = RenderStyle::of(domain);
    render_batch_styled(contents, &[style], resolution)
}

/// Batch render with per-image styles; a single style applies to every image.
pub fn render_batch_styled(contents: &[ToyContent], styles: &[RenderStyle], resolution: usize) -> Tensor<f32> {
    assert!(styles.len() == 1 || styles.len() == contents.len(), "one style or one per image");
    let data: Vec<f32> = contents
        .iter()
        .enumerate()
        .flat_map(|(i, c)| render_styled(c, &styles[if styles.len() == 1 { 0 } else { i }], resolution))
        .collect();
    Tensor::from_vec(&[contents.len(), CHANNELS, resolution, resolution], data)
        .expect("rendered sizes agree")
}

/// Contents for a latent batch (N, z_dim), in batch order.
pub fn contents_from_latents(z: &Tensor<f32>) -> Result<Vec<ToyContent>> {
    if z.ndim() != 2 {
        return Err(PirError::arg("latent batch must be 2-D"));
    }
    let d = z.dim(1);
    z.data()
        .chunks(d)
        .map(|row| {
            let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
            ToyContent::from_latent(&v)
        })
        .collect()
}

/// Recipe of a procedural dataset pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub resolution: usize,
    /// Paired images per domain.
    pub count: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            count: 2000,
            seed: 0,
        }
    }
}

/// `count` content draws, identical for both domains.
pub fn sample_contents(count: usize, seed: u64) -> Vec<ToyContent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let z: Vec<f64> = (0..CONTENT_DIMS).map(|_| StandardNormal.sample(&mut rng)).collect();
            ToyContent::from_latent(&z).expect("enough coordinates")
        })
        .collect()
}
