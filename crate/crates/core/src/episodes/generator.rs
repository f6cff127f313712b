//! Procedural defect images.
//!
//! Each class pairs a value-noise texture with one defect shape family.
//! Sub-styles shift the shape parameters (semantic variation); every sample
//! is then warped by a random rotation, scale and perspective homography
//! (geometric variation). Coordinates are normalised to `[-1, 1]` so the
//! same class renders consistently at any resolution.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::TOTAL_STRIDE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 12;
pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.6;
/// Defect re-draws allowed before a sample is reported as degenerate.
pub const MAX_RETRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    /// Thick random polyline.
    Scratch,
    /// Smooth radial blob.
    Patch,
    /// Scattered discs around a centre.
    PitCluster,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureSpec {
    pub base: [f64; 3],
    pub noise_amp: f64,
    /// Value-noise lattice cells across the image at the coarse octave.
    pub noise_cells: usize,
    pub grain_amp: f64,
    pub grain_freq: f64,
    pub grain_angle: f64,
}

/// Shape parameters of one sub-style, in normalised units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubStyle {
    /// Scratch vertices, pit count, or patch harmonic count.
    pub count: usize,
    /// Scratch length, pit spread, or patch radius.
    pub extent: f64,
    /// Scratch width, pit radius, or patch wobble amplitude.
    pub detail: f64,
    /// Patch aspect ratio; ignored by the other families.
    pub aspect: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistortionRange {
    pub max_rotation: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_perspective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistortionParams {
    pub rotation: f64,
    pub scale: f64,
    pub perspective: [f64; 2],
}

impl DistortionParams {
    pub const IDENTITY: DistortionParams = DistortionParams {
        rotation: 0.0,
        scale: 1.0,
        perspective: [0.0, 0.0],
    };

    pub fn sample(range: &DistortionRange, rng: &mut impl Rng) -> Self {
        let k = range.max_perspective;
        DistortionParams {
            rotation: rng.random_range(-range.max_rotation..=range.max_rotation),
            scale: rng.random_range(range.min_scale..=range.max_scale),
            perspective: [rng.random_range(-k..=k), rng.random_range(-k..=k)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefectClass {
    pub id: usize,
    pub texture: TextureSpec,
    pub family: ShapeFamily,
    pub substyles: Vec<SubStyle>,
    pub distortion: DistortionRange,
    pub defect_tone: [f64; 3],
}

impl DefectClass {
    pub fn substyle_count(&self) -> usize {
        self.substyles.len()
    }

    fn check_params(&self, p: &DistortionParams) -> Result<()> {
        let r = &self.distortion;
        let tol = 1e-12;
        if p.rotation.abs() > r.max_rotation + tol
            || p.scale < r.min_scale - tol
            || p.scale > r.max_scale + tol
            || p.perspective.iter().any(|v| v.abs() > r.max_perspective + tol)
        {
            return Err(Error::Config(format!(
                "distortion {p:?} outside the range of class {}",
                self.id
            )));
        }
        Ok(())
    }
}

/// The twelve built-in classes: families cycle with the id, textures and
/// defect tones vary with `id / 3`.
pub fn default_classes() -> Vec<DefectClass> {
    (0..NUM_CLASSES).map(builtin_class).collect()
}

fn builtin_class(id: usize) -> DefectClass {
    let variant = id / 3;
    let family = [ShapeFamily::Scratch, ShapeFamily::Patch, ShapeFamily::PitCluster][id % 3];
    let bases = [[0.55, 0.56, 0.58], [0.62, 0.55, 0.45], [0.45, 0.50, 0.52], [0.58, 0.58, 0.50]];
    let texture = TextureSpec {
        base: bases[variant],
        noise_amp: 0.06 + 0.02 * variant as f64,
        noise_cells: 3 + variant,
        grain_amp: 0.03 + 0.015 * (id % 4) as f64,
        grain_freq: 6.0 + 3.0 * variant as f64,
        grain_angle: id as f64 * 0.7,
    };
    let shift = 0.01 * variant as f64;
    let substyles = match family {
        ShapeFamily::Scratch => vec![
            SubStyle { count: 2, extent: 1.3, detail: 0.20 + shift, aspect: 1.0 },
            SubStyle { count: 4, extent: 1.0, detail: 0.26 + shift, aspect: 1.0 },
            SubStyle { count: 3, extent: 1.6, detail: 0.17 + shift, aspect: 1.0 },
        ],
        ShapeFamily::Patch => vec![
            SubStyle { count: 3, extent: 0.32 + shift, detail: 0.15, aspect: 1.0 },
            SubStyle { count: 4, extent: 0.45 + shift, detail: 0.30, aspect: 1.0 },
            SubStyle { count: 2, extent: 0.35 + shift, detail: 0.20, aspect: 2.0 },
        ],
        ShapeFamily::PitCluster => vec![
            SubStyle { count: 4, extent: 0.45, detail: 0.16 + shift, aspect: 1.0 },
            SubStyle { count: 9, extent: 0.55, detail: 0.12 + shift, aspect: 1.0 },
        ],
    };
    let dark = variant.is_multiple_of(2);
    let tone = if dark { [0.08, 0.07, 0.06] } else { [0.95, 0.93, 0.88] };
    DefectClass {
        id,
        texture,
        family,
        substyles,
        distortion: DistortionRange {
            max_rotation: PI / 6.0 + variant as f64 * PI / 12.0,
            min_scale: 0.8,
            max_scale: 1.2,
            max_perspective: 0.15,
        },
        defect_tone: tone,
    }
}

/// 3x3 homography acting on normalised homogeneous coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub fn from_params(p: &DistortionParams) -> Self {
        let (s, c) = p.rotation.sin_cos();
        let k = p.scale;
        Homography([
            [k * c, -k * s, 0.0],
            [k * s, k * c, 0.0],
            [p.perspective[0] * k * c + p.perspective[1] * k * s, -p.perspective[0] * k * s + p.perspective[1] * k * c, 1.0],
        ])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        ((m[0][0] * x + m[0][1] * y + m[0][2]) / w, (m[1][0] * x + m[1][1] * y + m[1][2]) / w)
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let det = m[0][0] * adj[0][0] + m[0][1] * adj[1][0] + m[0][2] * adj[2][0];
        if det.abs() < 1e-12 {
            return Err(Error::Config("singular homography".into()));
        }
        Ok(Homography(adj.map(|row| row.map(|v| v / det))))
    }
}

/// Pixel centre to normalised coordinate.
fn to_unit(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

fn to_pixel(u: f64, n: usize) -> f64 {
    (u + 1.0) * 0.5 * n as f64 - 0.5
}

/// Warp a `c x n x n` image (bilinear, edge-clamped) and an `n x n` mask
/// (nearest, zero outside) by `h`: output pixel `p` samples the source at
/// `h^-1(p)`.
pub fn warp(image: &[f64], mask: &[f64], channels: usize, n: usize, h: &Homography) -> Result<(Vec<f64>, Vec<f64>)> {
    let inv = h.inverse()?;
    let mut out_img = vec![0.0; image.len()];
    let mut out_mask = vec![0.0; mask.len()];
    let plane = n * n;
    for y in 0..n {
        for x in 0..n {
            let (su, sv) = inv.apply(to_unit(x, n), to_unit(y, n));
            let (px, py) = (to_pixel(su, n), to_pixel(sv, n));
            let (rx, ry) = (px.round(), py.round());
            if rx >= 0.0 && ry >= 0.0 && rx < n as f64 && ry < n as f64 {
                out_mask[y * n + x] = mask[ry as usize * n + rx as usize];
            }
            let cx = px.clamp(0.0, (n - 1) as f64);
            let cy = py.clamp(0.0, (n - 1) as f64);
            let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
            let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
            for c in 0..channels {
                let src = &image[c * plane..(c + 1) * plane];
                let top = src[y0 * n + x0] * (1.0 - fx) + src[y0 * n + x1] * fx;
                let bottom = src[y1 * n + x0] * (1.0 - fx) + src[y1 * n + x1] * fx;
                out_img[c * plane + y * n + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok((out_img, out_mask))
}

struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(cells: usize, rng: &mut impl Rng) -> Self {
        let lattice = (0..(cells + 1) * (cells + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
        ValueNoise { cells, lattice }
    }

    /// `u, v` in `[-1, 1]`.
    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells;
        let gx = ((u + 1.0) * 0.5 * n as f64).clamp(0.0, n as f64 - 1e-9);
        let gy = ((v + 1.0) * 0.5 * n as f64).clamp(0.0, n as f64 - 1e-9);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (smooth(gx - x0 as f64), smooth(gy - y0 as f64));
        let l = |x: usize, y: usize| self.lattice[y * (n + 1) + x];
        let top = l(x0, y0) * (1.0 - fx) + l(x0 + 1, y0) * fx;
        let bottom = l(x0, y0 + 1) * (1.0 - fx) + l(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

fn render_texture(spec: &TextureSpec, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let coarse = ValueNoise::new(spec.noise_cells, rng);
    let fine = ValueNoise::new(spec.noise_cells * 4, rng);
    let tint: Vec<f64> = (0..3).map(|_| rng.random_range(-0.02..0.02)).collect();
    let phase = rng.random_range(0.0..2.0 * PI);
    let (sa, ca) = spec.grain_angle.sin_cos();
    let mut img = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (u, v) = (to_unit(x, n), to_unit(y, n));
            let noise = spec.noise_amp * (coarse.at(u, v) + 0.5 * fine.at(u, v));
            let grain = spec.grain_amp * (spec.grain_freq * PI * (u * ca + v * sa) + phase).sin();
            for c in 0..3 {
                img[c * n * n + y * n + x] = spec.base[c] + tint[c] + noise + grain;
            }
        }
    }
    img
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Binary defect mask in the canonical (unwarped) frame.
fn render_defect(family: ShapeFamily, style: &SubStyle, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut mask = vec![0.0; n * n];
    let inside: Box<dyn Fn(f64, f64) -> bool> = match family {
        ShapeFamily::Scratch => {
            let start = (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
            let mut heading = rng.random_range(0.0..2.0 * PI);
            let step = style.extent / style.count as f64;
            let mut pts = vec![start];
            for _ in 0..style.count {
                heading += rng.random_range(-0.6..0.6);
                let last = *pts.last().expect("nonempty");
                pts.push((last.0 + step * heading.cos(), last.1 + step * heading.sin()));
            }
            let half = style.detail / 2.0;
            Box::new(move |u, v| pts.windows(2).any(|s| segment_distance((u, v), s[0], s[1]) <= half))
        }
        ShapeFamily::Patch => {
            let centre = (rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4));
            let harmonics: Vec<(f64, f64)> = (0..style.count)
                .map(|_| (rng.random_range(0.3..1.0) * style.detail, rng.random_range(0.0..2.0 * PI)))
                .collect();
            let orient = rng.random_range(0.0..PI);
            let (so, co) = orient.sin_cos();
            let radius = style.extent;
            let aspect = style.aspect;
            Box::new(move |u, v| {
                let (dx, dy) = (u - centre.0, v - centre.1);
                let (a, b) = ((dx * co + dy * so) / aspect.sqrt(), (-dx * so + dy * co) * aspect.sqrt());
                let phi = b.atan2(a);
                let wobble: f64 = harmonics
                    .iter()
                    .enumerate()
                    .map(|(k, &(amp, ph))| amp * ((k + 2) as f64 * phi + ph).cos())
                    .sum();
                (a * a + b * b).sqrt() <= radius * (1.0 + wobble)
            })
        }
        ShapeFamily::PitCluster => {
            let centre = (rng.random_range(-0.35..0.35), rng.random_range(-0.35..0.35));
            let pits: Vec<(f64, f64, f64)> = (0..style.count)
                .map(|_| {
                    (
                        centre.0 + rng.random_range(-style.extent..style.extent),
                        centre.1 + rng.random_range(-style.extent..style.extent),
                        style.detail * rng.random_range(0.7..1.3),
                    )
                })
                .collect();
            Box::new(move |u, v| pits.iter().any(|&(x, y, r)| (u - x).powi(2) + (v - y).powi(2) <= r * r))
        }
    };
    for y in 0..n {
        for x in 0..n {
            if inside(to_unit(x, n), to_unit(y, n)) {
                mask[y * n + x] = 1.0;
            }
        }
    }
    mask
}

/// Whether the mask survives block averaging at the encoder stride.
fn has_feature_cell(mask: &[f64], n: usize) -> bool {
    let s = TOTAL_STRIDE;
    if !n.is_multiple_of(s) {
        return true;
    }
    let g = n / s;
    (0..g * g).any(|cell| {
        let (cy, cx) = (cell / g, cell % g);
        let mut count = 0;
        for y in cy * s..(cy + 1) * s {
            for x in cx * s..(cx + 1) * s {
                count += (mask[y * n + x] > 0.5) as usize;
            }
        }
        2 * count >= s * s
    })
}

/// One `(image 3 x n x n, mask n x n)` sample. Deterministic in all
/// arguments; the defect is re-drawn until its warped foreground fraction
/// lies in bounds and it covers at least one encoder cell.
pub fn generate_sample(
    class: &DefectClass,
    substyle: usize,
    params: &DistortionParams,
    n: usize,
    seed: u64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if n < 8 {
        return Err(Error::Config(format!("image size {n} is below 8")));
    }
    let style = class.substyles.get(substyle).ok_or_else(|| {
        Error::Config(format!("class {} has no sub-style {substyle}", class.id))
    })?;
    class.check_params(params)?;
    let homography = Homography::from_params(params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = render_texture(&class.texture, n, &mut rng);
    for _ in 0..MAX_RETRIES {
        let mask = render_defect(class.family, style, n, &mut rng);
        let mut img = texture.clone();
        for (i, &m) in mask.iter().enumerate() {
            if m > 0.0 {
                let jitter = rng.random_range(-0.03..0.03);
                for c in 0..3 {
                    img[c * n * n + i] = class.defect_tone[c] + jitter;
                }
            }
        }
        let (img, mask) = warp(&img, &mask, 3, n, &homography)?;
        let fraction = mask.iter().sum::<f64>() / (n * n) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fraction) && has_feature_cell(&mask, n) {
            return Ok((Tensor::from_f64(&[3, n, n], &img)?, Tensor::from_f64(&[n, n], &mask)?));
        }
    }
    Err(Error::DegenerateEpisode(format!(
        "class {} sub-style {substyle}: no valid defect after {MAX_RETRIES} draws",
        class.id
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fraction(mask: &Tensor<f32>) -> f64 {
        mask.data().iter().map(|&v| v as f64).sum::<f64>() / mask.len() as f64
    }

    #[test]
    fn builtin_classes_are_well_formed() {
        let classes = default_classes();
        assert_eq!(classes.len(), NUM_CLASSES);
        for (i, c) in classes.iter().enumerate() {
            assert_eq!(c.id, i);
            assert!(c.substyle_count() >= 2);
        }
    }

    #[test]
    fn identity_sample_is_deterministic() {
        let class = &default_classes()[4];
        let a = generate_sample(class, 1, &DistortionParams::IDENTITY, 32, 99).unwrap();
        let b = generate_sample(class, 1, &DistortionParams::IDENTITY, 32, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(class, 1, &DistortionParams::IDENTITY, 32, 100).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn half_turn_rotates_pixels() {
        let mut class = default_classes()[1].clone();
        class.distortion.max_rotation = PI;
        let n = 24;
        for seed in 0..5 {
            let (img, mask) = generate_sample(&class, 0, &DistortionParams::IDENTITY, n, seed).unwrap();
            let turned = warp(
                &img.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
                &mask.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
                3,
                n,
                &Homography::from_params(&DistortionParams { rotation: PI, ..DistortionParams::IDENTITY }),
            )
            .unwrap();
            for y in 0..n {
                for x in 0..n {
                    assert_eq!(turned.1[y * n + x], mask.data()[(n - 1 - y) * n + (n - 1 - x)] as f64);
                    for c in 0..3 {
                        let src = img.data()[c * n * n + (n - 1 - y) * n + (n - 1 - x)] as f64;
                        assert!((turned.0[c * n * n + y * n + x] - src).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn homography_inverse_round_trips() {
        let p = DistortionParams { rotation: 0.4, scale: 1.1, perspective: [0.1, -0.12] };
        let h = Homography::from_params(&p);
        let inv = h.inverse().unwrap();
        for &(x, y) in &[(0.3, -0.2), (-0.9, 0.9), (0.0, 0.0)] {
            let (a, b) = h.apply(x, y);
            let (u, v) = inv.apply(a, b);
            assert!((u - x).abs() < 1e-12 && (v - y).abs() < 1e-12);
        }
    }

    #[test]
    fn warped_mask_stays_binary_and_commutes_with_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 16;
        let soft: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let hard: Vec<f64> = soft.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
        let img = vec![0.0; 3 * n * n];
        let range = default_classes()[0].distortion;
        for _ in 0..10 {
            let h = Homography::from_params(&DistortionParams::sample(&range, &mut rng));
            let (_, a) = warp(&img, &soft, 3, n, &h).unwrap();
            let (_, b) = warp(&img, &hard, 3, n, &h).unwrap();
            let thresholded: Vec<f64> = a.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
            assert_eq!(thresholded, b);
            assert!(b.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn foreground_fraction_bounds_hold() {
        let classes = default_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..120 {
            let class = &classes[i % NUM_CLASSES];
            let style = rng.random_range(0..class.substyle_count());
            let params = DistortionParams::sample(&class.distortion, &mut rng);
            let (img, mask) = generate_sample(class, style, &params, 32, rng.random()).unwrap();
            let f = fraction(&mask);
            assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f), "class {i}: {f}");
            assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(img.all_finite());
        }
    }

    #[test]
    fn out_of_range_params_rejected() {
        let class = &default_classes()[0];
        let bad = DistortionParams { rotation: 3.0, ..DistortionParams::IDENTITY };
        assert_eq!(generate_sample(class, 0, &bad, 32, 0).unwrap_err().kind(), "config");
        assert!(generate_sample(class, 9, &DistortionParams::IDENTITY, 32, 0).is_err());
    }

    #[test]
    fn defect_pixels_contrast_with_texture() {
        for class in default_classes() {
            let (img, mask) = generate_sample(&class, 0, &DistortionParams::IDENTITY, 32, 7).unwrap();
            let (mut fg, mut bg, mut nf) = (0.0, 0.0, 0.0);
            for i in 0..32 * 32 {
                let v = img.data()[i] as f64;
                if mask.data()[i] == 1.0 {
                    fg += v;
                    nf += 1.0;
                } else {
                    bg += v;
                }
            }
            let gap = (fg / nf - bg / (1024.0 - nf)).abs();
            assert!(gap > 0.2, "class {}: gap {gap}", class.id);
        }
    }
}
