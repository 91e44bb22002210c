use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use super::{Domain, SliceStack};
use crate::error::{Error, Result};

/// Largest per-slice displacement from the subject's base position, pixels.
pub const MAX_SHIFT: f64 = 2.0;
const STEP_SHIFT: f64 = 0.6;
const EDGE: f64 = 1.2;
const GAMMA: f64 = 1.5;

/// Synthetic two-domain dataset. Train stacks of A and B come from disjoint
/// subjects; test stacks are paired (`test_b[i]` is `test_a[i]` in domain B).
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub train_a: Vec<SliceStack>,
    pub train_b: Vec<SliceStack>,
    pub test_a: Vec<SliceStack>,
    pub test_b: Vec<SliceStack>,
}

#[derive(Clone, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    value: f64,
}

impl Ellipse {
    /// Soft coverage of pixel `(x, y)` in `[0, 1]`.
    fn coverage(&self, x: f64, y: f64, scale: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / (self.rx * scale);
        let v = (-s * dx + c * dy) / (self.ry * scale);
        let r = (u * u + v * v).sqrt();
        let dist = (r - 1.0) * self.rx.min(self.ry) * scale;
        (0.5 - dist / EDGE).clamp(0.0, 1.0)
    }
}

/// Contrast inversion followed by gamma on the `[0, 1]` scale.
pub fn domain_b_intensity(a: f64) -> f64 {
    (1.0 - a).clamp(0.0, 1.0).powf(GAMMA)
}

/// Applies [`domain_b_intensity`] to a `[-1, 1]` image.
pub fn to_domain_b(img: &Image) -> Image {
    img.map(|v| 2.0 * domain_b_intensity(0.5 * (v + 1.0)) - 1.0)
}

fn subject_layers(rng: &mut ChaCha8Rng, size: f64) -> Vec<Ellipse> {
    let mid = 0.5 * (size - 1.0);
    let head = Ellipse {
        cx: mid + rng.gen_range(-0.03..0.03) * size,
        cy: mid + rng.gen_range(-0.03..0.03) * size,
        rx: size * rng.gen_range(0.36..0.42),
        ry: size * rng.gen_range(0.30..0.38),
        angle: rng.gen_range(-0.3..0.3),
        value: rng.gen_range(0.35..0.5),
    };
    let mut layers = vec![head.clone()];
    let count = rng.gen_range(3..6);
    for _ in 0..count {
        let r = rng.gen_range(0.0..0.55);
        let t = rng.gen_range(0.0..std::f64::consts::TAU);
        layers.push(Ellipse {
            cx: head.cx + r * head.rx * t.cos(),
            cy: head.cy + r * head.ry * t.sin(),
            rx: size * rng.gen_range(0.07..0.17),
            ry: size * rng.gen_range(0.06..0.15),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            value: rng.gen_range(0.6..1.0),
        });
    }
    layers
}

fn render(layers: &[Ellipse], size: usize, shift: [f64; 2], scale: f64) -> Image {
    let mut pixels = vec![0.0; size * size];
    for (i, p) in pixels.iter_mut().enumerate() {
        // content moves by `shift`: sample the base at p - shift
        let x = (i % size) as f64 - shift[0];
        let y = (i / size) as f64 - shift[1];
        let mut v = 0.0;
        for e in layers {
            let a = e.coverage(x, y, scale);
            v = v * (1.0 - a) + e.value * a;
        }
        *p = 2.0 * v - 1.0;
    }
    Image {
        height: size,
        width: size,
        pixels,
    }
}

fn subject_stack(rng: &mut ChaCha8Rng, id: String, slices: usize, size: usize) -> SliceStack {
    let layers = subject_layers(rng, size as f64);
    let mut shift = [0.0f64; 2];
    let mut shifts = Vec::with_capacity(slices);
    let mut images = Vec::with_capacity(slices);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    for t in 0..slices {
        if t > 0 {
            for s in &mut shift {
                *s = (*s + rng.gen_range(-STEP_SHIFT..STEP_SHIFT)).clamp(-MAX_SHIFT, MAX_SHIFT);
            }
        }
        let scale = 1.0 + 0.02 * (phase + 0.7 * t as f64).sin();
        images.push(render(&layers, size, shift, scale));
        shifts.push(shift);
    }
    SliceStack {
        subject: id,
        domain: Domain::A,
        slices: images,
        shifts: Some(shifts),
    }
}

fn as_domain_b(stack: &SliceStack) -> SliceStack {
    SliceStack {
        subject: stack.subject.clone(),
        domain: Domain::B,
        slices: stack.slices.iter().map(to_domain_b).collect(),
        shifts: stack.shifts.clone(),
    }
}

/// Generates `subjects` training subjects per domain and `subjects` paired
/// test subjects, each with `slices` consecutive `size x size` slices on the
/// `[-1, 1]` scale. Consecutive slices differ by sub-pixel translations of at
/// most [`MAX_SHIFT`] from the base position and a slight scale change.
pub fn generate_phantom(seed: u64, subjects: usize, slices: usize, size: usize) -> Result<Phantom> {
    if size < 16 {
        return Err(Error::invalid(format!("phantom size must be >= 16, got {size}")));
    }
    if slices < 3 {
        return Err(Error::invalid(format!("phantom needs >= 3 slices, got {slices}")));
    }
    if subjects == 0 {
        return Err(Error::invalid("phantom needs at least one subject"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |prefix: &str, n: usize| -> Vec<SliceStack> {
        (0..n)
            .map(|i| subject_stack(&mut rng, format!("{prefix}{i:03}"), slices, size))
            .collect()
    };
    let train_a = make("a", subjects);
    let train_b = make("b", subjects).iter().map(as_domain_b).collect();
    let test_a = make("t", subjects);
    let test_b = test_a.iter().map(as_domain_b).collect();
    Ok(Phantom {
        train_a,
        train_b,
        test_a,
        test_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_in_range_and_shifts_bounded() {
        let p = generate_phantom(5, 2, 6, 16).unwrap();
        for s in p.train_a.iter().chain(&p.train_b).chain(&p.test_b) {
            for img in &s.slices {
                let (lo, hi) = img.min_max();
                assert!(lo >= -1.0 && hi <= 1.0);
            }
            for sh in s.shifts.as_ref().unwrap() {
                assert!(sh[0].abs() <= MAX_SHIFT && sh[1].abs() <= MAX_SHIFT);
            }
        }
    }

    #[test]
    fn domain_transform_is_monotone_decreasing() {
        let mut prev = domain_b_intensity(0.0);
        assert_eq!(prev, 1.0);
        for i in 1..=100 {
            let v = domain_b_intensity(i as f64 / 100.0);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(generate_phantom(0, 1, 3, 8).is_err());
        assert!(generate_phantom(0, 1, 2, 16).is_err());
        assert!(generate_phantom(0, 0, 3, 16).is_err());
    }
}
