//! Training loss (BCE + soft dice) and the per-image segmentation metrics.

use std::fmt::Write as _;

use crate::data::Sample;
use crate::error::{contract_err, shape_err, Result};
use crate::model::TransRUPNet;
use crate::tensor::{Tape, Tensor, Var};

/// Probability clamp for the log terms of the BCE loss.
pub const BCE_CLAMP: f32 = 1e-7;
/// Guard added to numerator and denominator of every metric.
pub const METRIC_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f32 = 1.0;

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(shape_err!(
            "{what}: prediction {:?} vs target {:?}",
            tape.shape(a),
            tape.shape(b)
        ));
    }
    Ok(())
}

/// Mean of `−[y·ln p + (1−y)·ln(1−p)]` with `p` clamped to `[ε, 1−ε]`.
/// Differentiable in `pred` only.
pub fn bce_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, pred, target, "bce_loss")?;
    let (p, y) = (tape.value(pred).data(), tape.value(target).data());
    let n = p.len() as f64;
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP) as f64;
            let y = y as f64;
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    let value = Tensor::scalar((total / n) as f32);
    tape.record("bce_loss", value, &[pred, target], move |ctx| {
        let g = ctx.grad[0] as f64 / n;
        let (p, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let dp = p
            .iter()
            .zip(y)
            .map(|(&p, &y)| {
                if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                    return 0.0;
                }
                let (p, y) = (p as f64, y as f64);
                (g * ((1.0 - y) / (1.0 - p) - y / p)) as f32
            })
            .collect();
        vec![Some(dp), None]
    })
}

/// `1 − (2Σpy + s)/(Σp + Σy + s)` per image (axis 0), averaged over the batch.
/// Differentiable in `pred` only.
pub fn dice_loss(tape: &mut Tape, pred: Var, target: Var, smooth: f32) -> Result<Var> {
    same_shape(tape, pred, target, "dice_loss")?;
    let shape = tape.shape(pred).to_vec();
    if shape.is_empty() {
        return Err(shape_err!("dice_loss needs a batch axis"));
    }
    let b = shape[0];
    let per = shape[1..].iter().product::<usize>();
    let s = smooth as f64;
    let sums = move |p: &[f32], y: &[f32]| -> Vec<(f64, f64)> {
        // (numerator, denominator) per image
        p.chunks(per)
            .zip(y.chunks(per))
            .map(|(p, y)| {
                let (mut i, mut sp, mut sy) = (0.0f64, 0.0f64, 0.0f64);
                for (&p, &y) in p.iter().zip(y) {
                    i += p as f64 * y as f64;
                    sp += p as f64;
                    sy += y as f64;
                }
                (2.0 * i + s, sp + sy + s)
            })
            .collect()
    };
    let stats = sums(tape.value(pred).data(), tape.value(target).data());
    let mean_dice = stats
        .iter()
        .map(|&(num, den)| if den == 0.0 { 1.0 } else { num / den })
        .sum::<f64>()
        / b as f64;
    let value = Tensor::scalar((1.0 - mean_dice) as f32);
    tape.record("dice_loss", value, &[pred, target], move |ctx| {
        let g = ctx.grad[0] as f64 / b as f64;
        let (p, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let stats = sums(p, y);
        let mut dp = Vec::with_capacity(p.len());
        for (img, &(num, den)) in y.chunks(per).zip(&stats) {
            if den == 0.0 {
                dp.extend(std::iter::repeat_n(0.0, img.len()));
                continue;
            }
            let d2 = den * den;
            dp.extend(img.iter().map(|&y| (-g * (2.0 * y as f64 * den - num) / d2) as f32));
        }
        vec![Some(dp), None]
    })
}

/// `bce_loss + dice_loss` with unit weights and smoothing 1.
pub fn combined_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let b = bce_loss(tape, pred, target)?;
    let d = dice_loss(tape, pred, target, DICE_SMOOTH)?;
    tape.add(b, d)
}

/// Pixelwise confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Confusion counts of two binary masks of equal shape.
pub fn binary_counts(pred: &Tensor, gt: &Tensor) -> Result<Counts> {
    if pred.shape() != gt.shape() {
        return Err(shape_err!("mask shapes differ: {:?} vs {:?}", pred.shape(), gt.shape()));
    }
    let mut c = Counts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (as_bit(p)?, as_bit(g)?);
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn as_bit(v: f32) -> Result<bool> {
    if v == 1.0 {
        Ok(true)
    } else if v == 0.0 {
        Ok(false)
    } else {
        Err(contract_err!("mask value {v} is not binary"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub dice: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub f2: f64,
}

impl Metrics {
    pub fn as_array(&self) -> [f64; 5] {
        [self.dice, self.iou, self.recall, self.precision, self.f2]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Self {
            dice: a[0],
            iou: a[1],
            recall: a[2],
            precision: a[3],
            f2: a[4],
        }
    }
}

/// Dice, IoU, recall, precision and F2, each guarded by [`METRIC_EPS`] so an
/// empty prediction of an empty mask scores 1.
pub fn metrics_from_counts(tp: u64, fp: u64, fn_: u64) -> Metrics {
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let e = METRIC_EPS;
    let precision = (tp + e) / (tp + fp + e);
    let recall = (tp + e) / (tp + fn_ + e);
    Metrics {
        dice: (2.0 * tp + e) / (2.0 * tp + fp + fn_ + e),
        iou: (tp + e) / (tp + fp + fn_ + e),
        recall,
        precision,
        f2: (5.0 * precision * recall + e) / (4.0 * precision + recall + e),
    }
}

/// Metrics of one predicted mask against its ground truth.
pub fn mask_metrics(pred: &Tensor, gt: &Tensor) -> Result<Metrics> {
    let c = binary_counts(pred, gt)?;
    Ok(metrics_from_counts(c.tp, c.fp, c.fn_))
}

/// Per-image metrics and their arithmetic means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub ids: Vec<String>,
    pub per_image: Vec<Metrics>,
    /// Means: mDSC, mIoU, mean recall, mean precision, mean F2.
    pub aggregate: Metrics,
}

impl MetricReport {
    pub fn new(ids: Vec<String>, per_image: Vec<Metrics>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(contract_err!("cannot report on an empty dataset"));
        }
        if ids.len() != per_image.len() {
            return Err(contract_err!("{} ids for {} images", ids.len(), per_image.len()));
        }
        let mut sums = [0.0f64; 5];
        for m in &per_image {
            for (s, v) in sums.iter_mut().zip(m.as_array()) {
                *s += v;
            }
        }
        let n = per_image.len() as f64;
        Ok(Self {
            ids,
            aggregate: Metrics::from_array(sums.map(|s| s / n)),
            per_image,
        })
    }

    pub fn n_images(&self) -> usize {
        self.per_image.len()
    }

    /// `image,dice,iou,recall,precision,f2` rows plus a final `AGGREGATE` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,dice,iou,recall,precision,f2\n");
        let row = |out: &mut String, id: &str, m: &Metrics| {
            let _ = writeln!(
                out,
                "{id},{:.6},{:.6},{:.6},{:.6},{:.6}",
                m.dice, m.iou, m.recall, m.precision, m.f2
            );
        };
        for (id, m) in self.ids.iter().zip(&self.per_image) {
            row(&mut out, id, m);
        }
        row(&mut out, "AGGREGATE", &self.aggregate);
        out
    }
}

/// Thresholds the model's predictions for every sample (in batches of
/// `batch_size`) and scores them per image.
pub fn evaluate_dataset(model: &TransRUPNet, samples: &[Sample], threshold: f32, batch_size: usize) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(contract_err!("cannot evaluate an empty dataset"));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let (images, masks) = crate::data::stack_batch(chunk)?;
        let pred = model.predict_mask(&images, threshold)?;
        for i in 0..chunk.len() {
            per_image.push(mask_metrics(&pred.index_axis0(i)?, &masks.index_axis0(i)?)?);
        }
    }
    MetricReport::new(samples.iter().map(|s| s.id.clone()).collect(), per_image)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    fn loss_of(f: fn(&mut Tape, Var, Var) -> Result<Var>, p: &Tensor, y: &Tensor) -> f32 {
        let mut tape = Tape::new();
        let (p, y) = (tape.constant(p.clone()), tape.constant(y.clone()));
        let l = f(&mut tape, p, y).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn bce_closed_forms() {
        let l = loss_of(bce_loss, &t(&[1], &[0.5]), &t(&[1], &[1.0]));
        assert!((l - std::f32::consts::LN_2).abs() < 1e-6);
        let l = loss_of(bce_loss, &t(&[1], &[0.75]), &t(&[1], &[0.0]));
        assert!((l - 4f32.ln()).abs() < 1e-6);
        let l = loss_of(bce_loss, &t(&[4], &[1.0, 0.0, 1.0, 0.0]), &t(&[4], &[1.0, 0.0, 1.0, 0.0]));
        assert!(l <= 1e-6);
    }

    #[test]
    fn dice_hand_counts() {
        let dice0 = |tape: &mut Tape, p, y| dice_loss(tape, p, y, 0.0);
        let l = loss_of(dice0, &t(&[1, 4], &[1.0, 1.0, 0.0, 0.0]), &t(&[1, 4], &[1.0, 0.0, 0.0, 0.0]));
        assert!((l - 1.0 / 3.0).abs() < 1e-6);
        let ones = Tensor::ones(&[2, 1, 3, 3]);
        assert!(loss_of(combined_loss, &ones, &ones).abs() <= 1e-6);
        let zeros = Tensor::zeros(&[2, 1, 3, 3]);
        assert_eq!(loss_of(combined_loss, &zeros, &zeros).abs() <= 1e-6, true);
    }

    #[test]
    fn shape_mismatch_is_a_shape_error() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(&[1, 4]));
        let y = tape.constant(Tensor::zeros(&[1, 5]));
        assert!(matches!(bce_loss(&mut tape, p, y), Err(crate::Error::Shape(_))));
        assert!(matches!(dice_loss(&mut tape, p, y, 1.0), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn counts_and_metrics() {
        let c = binary_counts(&t(&[2, 2], &[1.0, 1.0, 0.0, 0.0]), &t(&[2, 2], &[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(c, Counts { tp: 1, fp: 1, fn_: 0, tn: 2 });
        let m = metrics_from_counts(1, 1, 0);
        assert!((m.dice - 2.0 / 3.0).abs() < 1e-6);
        assert!((m.iou - 0.5).abs() < 1e-6);
        assert!((m.recall - 1.0).abs() < 1e-6);
        assert!((m.precision - 0.5).abs() < 1e-6);
        assert!((m.f2 - 5.0 / 6.0).abs() < 1e-6);
        let perfect = metrics_from_counts(10, 0, 0);
        assert!(perfect.as_array().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let empty = metrics_from_counts(0, 0, 0);
        assert!(empty.as_array().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn non_binary_mask_is_a_contract_error() {
        let r = binary_counts(&t(&[2], &[0.5, 1.0]), &t(&[2], &[0.0, 1.0]));
        assert!(matches!(r, Err(crate::Error::Contract(_))));
    }

    #[test]
    fn report_means_and_csv() {
        let r = MetricReport::new(
            vec!["a".into(), "b".into()],
            vec![metrics_from_counts(5, 0, 0), metrics_from_counts(1, 1, 1)],
        )
        .unwrap();
        assert!((r.aggregate.dice - 0.75).abs() < 1e-6);
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "image,dice,iou,recall,precision,f2");
        assert!(lines[3].starts_with("AGGREGATE,0.75"));
        assert!(MetricReport::new(vec![], vec![]).is_err());
    }
}
