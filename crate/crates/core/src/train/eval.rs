use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, slice_file_name, tensor_to_images, Image, SliceStack};
use crate::error::{Error, Result};
use crate::metrics::{ImageMetrics, MetricReport};
use crate::objectives::{temporal_reg_loss, TEMPORAL_NEIGHBORS};
use crate::tensor::{Graph, Real, Tensor};
use crate::train::models::{Direction, Generators};

/// Paired test-set evaluation of a trained translator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub a2b: MetricReport,
    pub b2a: MetricReport,
    /// Input copied unchanged as the prediction.
    pub copy_a2b: MetricReport,
    /// Temporal error of A -> B outputs under the known slice motion.
    pub temporal_a2b: Option<f64>,
    pub temporal_b2a: Option<f64>,
}

/// Translates every slice of a stack in one batch, clamped to `[-1, 1]` like
/// the images written by [`crate::train::translate_dir`].
pub fn translate_stack<T: Real>(gens: &Generators<T>, stack: &SliceStack, dir: Direction) -> Result<Vec<Image>> {
    let x: Tensor<T> = images_to_tensor(&stack.slices.iter().collect::<Vec<_>>())?;
    let out = tensor_to_images(&gens.translate(&x, dir)?)?;
    Ok(out.iter().map(|img| img.map(|v| v.clamp(-1.0, 1.0))).collect())
}

/// Mean over interior slices of the temporal loss between translated
/// neighbors, using the stack's known inter-slice shifts as fields.
/// `None` when the stack carries no shifts.
pub fn temporal_error<T: Real>(stack: &SliceStack, translated: &[Image]) -> Result<Option<f64>> {
    if stack.shifts.is_none() || translated.len() < 3 {
        return Ok(None);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 1..translated.len() - 1 {
        let g = Graph::<T>::new();
        let img = |i: usize| images_to_tensor::<T>(&[&translated[i]]).map(|x| g.constant(x));
        let mut nb = Vec::with_capacity(TEMPORAL_NEIGHBORS);
        let mut fields = Vec::with_capacity(TEMPORAL_NEIGHBORS);
        for k in [t - 1, t + 1] {
            nb.push(img(k)?);
            let f = stack.oracle_field::<T>(t, k).expect("shifts present");
            fields.push(g.constant(f.into_tensor()));
        }
        total += temporal_reg_loss(img(t)?, &nb, &fields)?.item()?;
        count += 1;
    }
    Ok(Some(total / count as f64))
}

fn mean_option(values: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = values.iter().copied().collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Metrics of both directions on paired test stacks (`test_b[i]` pairs `test_a[i]`).
pub fn evaluate<T: Real>(gens: &Generators<T>, test_a: &[SliceStack], test_b: &[SliceStack]) -> Result<Evaluation> {
    if test_a.len() != test_b.len() || test_a.is_empty() {
        return Err(Error::invalid(format!(
            "paired evaluation needs equally many A and B test stacks, got {} and {}",
            test_a.len(),
            test_b.len()
        )));
    }
    let mut a2b = Vec::new();
    let mut b2a = Vec::new();
    let mut copy = Vec::new();
    let mut temporal_a2b = Vec::new();
    let mut temporal_b2a = Vec::new();
    for (sa, sb) in test_a.iter().zip(test_b) {
        if sa.subject != sb.subject || sa.len() != sb.len() {
            return Err(Error::invalid(format!("test stacks {} and {} are not paired", sa.subject, sb.subject)));
        }
        let fake_b = translate_stack(gens, sa, Direction::A2B)?;
        let fake_a = translate_stack(gens, sb, Direction::B2A)?;
        for t in 0..sa.len() {
            let name = slice_file_name(&sa.subject, t);
            a2b.push(ImageMetrics::compute(name.clone(), &fake_b[t], &sb.slices[t])?);
            b2a.push(ImageMetrics::compute(name.clone(), &fake_a[t], &sa.slices[t])?);
            copy.push(ImageMetrics::compute(name, &sa.slices[t], &sb.slices[t])?);
        }
        temporal_a2b.push(temporal_error::<T>(sa, &fake_b)?);
        temporal_b2a.push(temporal_error::<T>(sb, &fake_a)?);
    }
    Ok(Evaluation {
        a2b: MetricReport::from_images("A2B", a2b),
        b2a: MetricReport::from_images("B2A", b2a),
        copy_a2b: MetricReport::from_images("A2B copy", copy),
        temporal_a2b: mean_option(&temporal_a2b),
        temporal_b2a: mean_option(&temporal_b2a),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_phantom;
    use crate::warp::{warp, DeformationField};

    #[test]
    fn pure_translations_have_near_zero_temporal_error() {
        let base = Image::new(24, 24, (0..576).map(|i| (((i % 24) as f64) * 0.4).sin() * (((i / 24) as f64) * 0.3).cos()).collect()).unwrap();
        let shifts = vec![[0.0, 0.0], [1.0, 0.0], [1.0, -1.0]];
        let slices: Vec<Image> = shifts
            .iter()
            .map(|s| {
                let t: Tensor<f64> = images_to_tensor(&[&base]).unwrap();
                // content moved by s: sample base at p - s
                let f = DeformationField::constant(1, 24, 24, -s[0], -s[1]);
                tensor_to_images(&warp(&t, &f).unwrap()).unwrap().remove(0)
            })
            .collect();
        let stack = SliceStack {
            subject: "s".into(),
            domain: crate::data::Domain::A,
            slices: slices.clone(),
            shifts: Some(shifts),
        };
        let err = temporal_error::<f64>(&stack, &slices).unwrap().unwrap();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn identity_translator_scores_like_copy() {
        let p = generate_phantom(1, 1, 3, 16).unwrap();
        let cfg = crate::train::TrainConfig {
            mode: crate::train::Mode::Alignflow,
            ..Default::default()
        };
        let m = crate::train::Models::<f64>::build(&cfg).unwrap();
        let ev = evaluate(&m.gens, &p.test_a, &p.test_b).unwrap();
        assert_eq!(ev.a2b.ssim.mean, ev.copy_a2b.ssim.mean);
        assert!(ev.temporal_a2b.is_some());
    }
}
