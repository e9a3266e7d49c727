//! Synthetic vein-image generator.
//!
//! Each class is a leaf-like texture with a curved main vein and symmetric
//! secondary branches. Classes share the background model and the main-vein
//! layout; the only class-discriminative signal is the branch angle,
//! base + k * delta degrees for class k. Images get anti-aliased strokes
//! (sub-pixel rendering keeps 2-degree deltas learnable), a smooth
//! background gradient and Gaussian pixel noise; masks are exact binary
//! rasterizations of the same stroke geometry.
//!
//! Determinism: sample geometry jitter is keyed by (seed, sample index) so
//! matching indices across classes share a skeleton, and noise is keyed by
//! (seed, class, sample index). Generation order never affects content.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::parallel::{self, ExecMode};
use crate::tensor::Tensor;

const JITTER_STREAM: u64 = 0x6a69_7474;
const NOISE_STREAM: u64 = 0x6e6f_6973;

/// Anti-alias band width around each stroke, in pixels.
const AA_BAND: f64 = 0.8;
/// Vein color at full coverage, styled after infrared vein imagery where
/// vessels glow against a dark field.
const VEIN_COLOR: [f64; 3] = [0.82, 0.95, 0.74];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    /// Branch angle of class 0, degrees from the main-vein direction.
    pub branch_angle_base: f64,
    /// Per-class angle increment, degrees.
    pub angle_delta: f64,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            samples_per_class: 20,
            image_size: 64,
            branch_angle_base: 20.0,
            angle_delta: 6.0,
            noise_std: 0.05,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::config("need at least one class"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("need at least one sample per class"));
        }
        if self.image_size < 8 {
            return Err(Error::config(format!(
                "image_size {} is too small to draw veins into",
                self.image_size
            )));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.angle_delta <= 0.0 {
            return Err(Error::config(format!(
                "angle_delta must be positive, got {}",
                self.angle_delta
            )));
        }
        let top = self.branch_angle_base + (self.classes - 1) as f64 * self.angle_delta;
        if self.branch_angle_base <= 0.0 || top >= 90.0 {
            return Err(Error::config(format!(
                "branch angles must stay strictly inside (0, 90) degrees; class 0 gets {} and the last class gets {top}",
                self.branch_angle_base
            )));
        }
        Ok(())
    }

    /// Nominal branch angle for one class, degrees.
    pub fn class_angle(&self, class: usize) -> f64 {
        self.branch_angle_base + class as f64 * self.angle_delta
    }
}

/// One stroke with its own half-width.
#[derive(Debug, Clone, Copy)]
struct Stroke {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    half_width: f64,
}

impl Stroke {
    fn distance(&self, px: f64, py: f64) -> f64 {
        let (dx, dy) = (self.x1 - self.x0, self.y1 - self.y0);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((px - self.x0) * dx + (py - self.y0) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (cx, cy) = (self.x0 + t * dx, self.y0 + t * dy);
        ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
    }
}

/// Per-sample geometric jitter, drawn once and shared by every class so
/// that matching sample indices differ only through branch angles.
#[derive(Debug, Clone)]
struct Jitter {
    curve: f64,
    shift_x: f64,
    shift_y: f64,
    /// Per branch point: (position nudge, right angle, left angle, length scale).
    branches: Vec<(f64, f64, f64, f64)>,
}

/// Anchor fractions along the main vein, bottom to top. Secondary veins
/// sprout densely, as in pinnate venation.
const BRANCH_ANCHORS: [f64; 9] = [0.10, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.88];
/// Nominal branch length as a fraction of the image size, before the leaf
/// boundary clips it.
const BRANCH_LENGTH: f64 = 0.55;
/// Invisible elliptical leaf boundary that secondary veins stop at, as
/// semi-axis fractions of the image size.
const LEAF_SEMI_AXES: (f64, f64) = (0.47, 0.45);

fn draw_jitter(spec: &SynthSpec, sample_index: usize, angle_jitter: f64) -> Jitter {
    let seed = crate::mix_seed(crate::mix_seed(spec.seed, JITTER_STREAM), sample_index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.image_size as f64;
    let curve = rng.gen_range(-0.05..0.05) * s;
    let shift_x = rng.gen_range(-0.02..0.02) * s;
    let shift_y = rng.gen_range(-0.02..0.02) * s;
    let branches = (0..BRANCH_ANCHORS.len())
        .map(|_| {
            let pos = rng.gen_range(-0.025..0.025);
            let right = rng.gen_range(-angle_jitter..angle_jitter);
            let left = rng.gen_range(-angle_jitter..angle_jitter);
            let len = rng.gen_range(0.9..1.1);
            (pos, right, left, len)
        })
        .collect();
    Jitter {
        curve,
        shift_x,
        shift_y,
        branches,
    }
}

/// Builds the stroke list for one (class, sample) pair.
fn strokes_for(spec: &SynthSpec, class: usize, jitter: &Jitter) -> Vec<Stroke> {
    let s = spec.image_size as f64;
    let main_width = (0.016 * s).max(1.0);
    let branch_width = (0.020 * s).max(0.8);

    // Quadratic bezier main vein, bottom to top, with a sideways bow.
    let p0 = (0.5 * s + jitter.shift_x, 0.92 * s + jitter.shift_y);
    let p2 = (0.5 * s + jitter.shift_x, 0.08 * s + jitter.shift_y);
    let p1 = (0.5 * s + jitter.shift_x + jitter.curve, 0.5 * s + jitter.shift_y);
    let bezier = |t: f64| -> (f64, f64) {
        let u = 1.0 - t;
        (
            u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
            u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
        )
    };
    let tangent = |t: f64| -> (f64, f64) {
        (
            2.0 * (1.0 - t) * (p1.0 - p0.0) + 2.0 * t * (p2.0 - p1.0),
            2.0 * (1.0 - t) * (p1.1 - p0.1) + 2.0 * t * (p2.1 - p1.1),
        )
    };

    let mut strokes = Vec::with_capacity(16 + 2 * BRANCH_ANCHORS.len());
    let steps = 16;
    for i in 0..steps {
        let (x0, y0) = bezier(i as f64 / steps as f64);
        let (x1, y1) = bezier((i + 1) as f64 / steps as f64);
        strokes.push(Stroke {
            x0,
            y0,
            x1,
            y1,
            half_width: main_width,
        });
    }

    let angle = spec.class_angle(class);
    for (i, &anchor) in BRANCH_ANCHORS.iter().enumerate() {
        let (pos, right_j, left_j, len_scale) = jitter.branches[i];
        let t = (anchor + pos).clamp(0.05, 0.95);
        let (bx, by) = bezier(t);
        let (tx, ty) = tangent(t);
        let norm = (tx * tx + ty * ty).sqrt().max(1e-9);
        let (ux, uy) = (tx / norm, ty / norm);
        for (side, nudge) in [(1.0, right_j), (-1.0, left_j)] {
            let theta = (angle + nudge).clamp(0.1, 89.9).to_radians() * side;
            let (cos, sin) = (theta.cos(), theta.sin());
            let (dx, dy) = (ux * cos - uy * sin, ux * sin + uy * cos);
            let reach = boundary_reach(s, bx, by, dx, dy);
            let length = (BRANCH_LENGTH * s * len_scale).min(reach);
            strokes.push(Stroke {
                x0: bx,
                y0: by,
                x1: bx + dx * length,
                y1: by + dy * length,
                half_width: branch_width,
            });
        }
    }
    strokes
}

/// Distance from (x0, y0) along unit direction (dx, dy) to the elliptical
/// leaf boundary. Points outside the ellipse get no reach.
fn boundary_reach(s: f64, x0: f64, y0: f64, dx: f64, dy: f64) -> f64 {
    let (cx, cy) = (0.5 * s, 0.5 * s);
    let (a, b) = (LEAF_SEMI_AXES.0 * s, LEAF_SEMI_AXES.1 * s);
    let (px, py) = (x0 - cx, y0 - cy);
    let qa = (dx / a).powi(2) + (dy / b).powi(2);
    let qb = 2.0 * (px * dx / (a * a) + py * dy / (b * b));
    let qc = (px / a).powi(2) + (py / b).powi(2) - 1.0;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc <= 0.0 || qa <= 0.0 {
        return 0.0;
    }
    ((-qb + disc.sqrt()) / (2.0 * qa)).max(0.0)
}

/// Renders one sample: anti-aliased image with background and noise, exact
/// binary mask of the same strokes.
fn render(spec: &SynthSpec, class: usize, sample_index: usize) -> Result<Sample> {
    let angle_jitter = (0.35 * spec.angle_delta).min(2.0);
    let jitter = draw_jitter(spec, sample_index, angle_jitter);
    let strokes = strokes_for(spec, class, &jitter);
    let s = spec.image_size;
    let sf = s as f64;

    let mut mask = vec![0.0f64; s * s];
    let mut coverage = vec![0.0f64; s * s];
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut inside = false;
            let mut alpha = 0.0f64;
            for stroke in &strokes {
                let d = stroke.distance(px, py);
                if d <= stroke.half_width {
                    inside = true;
                }
                let a = (1.0 - (d - stroke.half_width) / AA_BAND).clamp(0.0, 1.0);
                alpha = alpha.max(a);
                if alpha >= 1.0 && inside {
                    break;
                }
            }
            if inside {
                mask[y * s + x] = 1.0;
            }
            coverage[y * s + x] = alpha;
        }
    }

    let noise_seed = crate::mix_seed(
        crate::mix_seed(spec.seed, NOISE_STREAM),
        (class as u64) << 32 | sample_index as u64,
    );
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let normal = if spec.noise_std > 0.0 {
        Some(Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };

    let mut image = vec![0.0f64; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let (gx, gy) = (x as f64 / sf - 0.5, y as f64 / sf - 0.5);
            let radial = gx * gx + gy * gy;
            let base = [
                0.06 + 0.02 * gx + 0.03 * radial,
                0.08 + 0.03 * gy + 0.04 * radial,
                0.05 - 0.01 * gx + 0.02 * radial,
            ];
            let alpha = coverage[y * s + x];
            for (c, &b) in base.iter().enumerate() {
                let mut v = b + (VEIN_COLOR[c] - b) * alpha;
                if let Some(n) = &normal {
                    v += n.sample(&mut noise_rng);
                }
                image[(c * s + y) * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }

    Ok(Sample {
        image: Tensor::new(&[3, s, s], image)?,
        mask: Some(Tensor::new(&[s, s], mask)?),
        label: class,
    })
}

/// Generates the full dataset in class-major order. Content depends only on
/// the spec, never on the execution mode.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Sample>> {
    generate_with_mode(spec, ExecMode::default())
}

/// Like [`generate`] with an explicit execution strategy; the parallel and
/// sequential paths produce bitwise-identical samples.
pub fn generate_with_mode(spec: &SynthSpec, mode: ExecMode) -> Result<Vec<Sample>> {
    spec.validate()?;
    let pairs: Vec<(usize, usize)> = (0..spec.classes)
        .flat_map(|c| (0..spec.samples_per_class).map(move |i| (c, i)))
        .collect();
    let rendered = parallel::map_collect(mode, &pairs, |&(class, index)| render(spec, class, index));
    rendered.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            classes: 3,
            samples_per_class: 4,
            image_size: 32,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn validation_rejects_angle_overflow() {
        let spec = SynthSpec {
            classes: 13,
            angle_delta: 6.0,
            branch_angle_base: 20.0,
            ..SynthSpec::default()
        };
        // 20 + 12 * 6 = 92 degrees leaves (0, 90).
        assert!(spec.validate().is_err());
        assert!(SynthSpec::default().validate().is_ok());
        assert!(SynthSpec {
            classes: 0,
            ..SynthSpec::default()
        }
        .validate()
        .is_err());
        assert!(SynthSpec {
            branch_angle_base: -1.0,
            classes: 1,
            ..SynthSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.len(), 12);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(
                x.mask.as_ref().unwrap().data(),
                y.mask.as_ref().unwrap().data()
            );
        }
    }

    #[test]
    fn labels_follow_class_major_order() {
        let samples = generate(&small_spec()).unwrap();
        for (i, sample) in samples.iter().enumerate() {
            assert_eq!(sample.label, i / 4);
        }
    }

    #[test]
    fn masks_are_binary_and_moderately_sparse() {
        // Foreground must exist but stay under half the pixels.
        let spec = SynthSpec {
            classes: 5,
            samples_per_class: 20,
            ..SynthSpec::default()
        };
        for sample in generate(&spec).unwrap() {
            let mask = sample.mask.as_ref().unwrap();
            assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let fg = mask.data().iter().sum::<f64>() / mask.numel() as f64;
            assert!(fg > 0.0 && fg < 0.5, "foreground fraction {fg}");
        }
    }

    #[test]
    fn image_values_stay_in_unit_range() {
        for sample in generate(&small_spec()).unwrap() {
            assert!(sample
                .image
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn adjacent_classes_differ_subtly_without_noise() {
        let spec = SynthSpec {
            classes: 2,
            samples_per_class: 3,
            angle_delta: 2.0,
            noise_std: 0.0,
            ..SynthSpec::default()
        };
        let samples = generate(&spec).unwrap();
        for i in 0..3 {
            let a = &samples[i].image;
            let b = &samples[3 + i].image;
            let mean_diff: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / a.numel() as f64;
            assert!(mean_diff > 0.0, "classes must not be identical");
            assert!(
                mean_diff < 0.1,
                "2-degree classes should differ by well under 10% of range, got {mean_diff}"
            );
        }
    }

    #[test]
    fn matching_indices_share_their_skeleton() {
        // Same sample index, different class, no noise: everything but the
        // branches coincides, so the masks overlap heavily.
        let spec = SynthSpec {
            classes: 2,
            samples_per_class: 2,
            noise_std: 0.0,
            ..SynthSpec::default()
        };
        let samples = generate(&spec).unwrap();
        let a = samples[0].mask.as_ref().unwrap();
        let b = samples[2].mask.as_ref().unwrap();
        let differing: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let total_a: f64 = a.data().iter().sum();
        assert!(differing < total_a, "main vein should be shared");
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let spec = small_spec();
        let seq = generate_with_mode(&spec, ExecMode::Sequential).unwrap();
        let par = generate_with_mode(&spec, ExecMode::Parallel).unwrap();
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.image.data(), b.image.data());
        }
    }
}
