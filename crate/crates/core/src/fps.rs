//! Single-image inference throughput.

use std::time::Instant;

use crate::error::{contract_err, Result};
use crate::model::TransRUPNet;
use crate::tensor::Tensor;

pub trait Clock {
    /// Seconds since an arbitrary origin; must never decrease.
    fn now(&mut self) -> f64;
}

/// Wall time from [`Instant`].
#[derive(Debug)]
pub struct MonotonicClock(Instant);

impl Default for MonotonicClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for MonotonicClock {
    fn now(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Returns `start`, then advances by `step` seconds on every call.
#[derive(Clone, Debug)]
pub struct StubClock {
    next: f64,
    step: f64,
}

impl StubClock {
    pub fn new(start: f64, step: f64) -> Self {
        Self { next: start, step }
    }

    pub fn every_ms(ms: f64) -> Self {
        Self::new(0.0, ms / 1000.0)
    }
}

impl Clock for StubClock {
    fn now(&mut self) -> f64 {
        let t = self.next;
        self.next += self.step;
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpsStats {
    pub n_frames: usize,
    pub total_seconds: f64,
    pub fps: f64,
    pub per_frame_ms: Vec<f64>,
}

impl FpsStats {
    /// Nearest-rank percentile of the frame times, `q` in `[0, 100]`.
    pub fn percentile_ms(&self, q: f64) -> f64 {
        let mut v = self.per_frame_ms.clone();
        v.sort_by(f64::total_cmp);
        let rank = ((q / 100.0) * v.len() as f64).ceil() as usize;
        v[rank.clamp(1, v.len()) - 1]
    }

    /// `key=value` lines: n_frames, total_seconds, fps, p50_ms, p95_ms.
    pub fn to_kv(&self) -> String {
        format!(
            "n_frames={}\ntotal_seconds={:.6}\nfps={:.4}\np50_ms={:.4}\np95_ms={:.4}\n",
            self.n_frames,
            self.total_seconds,
            self.fps,
            self.percentile_ms(50.0),
            self.percentile_ms(95.0)
        )
    }
}

/// Runs `n_warmup` untimed and `n_timed` timed calls of `forward` on a
/// batch-size-1 input of `input_shape`. The clock is read once before the
/// first timed frame and once after each.
pub fn measure_fps<F, C>(mut forward: F, input_shape: &[usize], n_warmup: usize, n_timed: usize, clock: &mut C) -> Result<FpsStats>
where
    F: FnMut(&Tensor) -> Result<()>,
    C: Clock + ?Sized,
{
    if n_timed == 0 {
        return Err(contract_err!("need at least one timed frame"));
    }
    if input_shape.first() != Some(&1) {
        return Err(contract_err!("FPS is measured at batch size 1, got shape {input_shape:?}"));
    }
    let input = Tensor::full(input_shape, 0.5);
    for _ in 0..n_warmup {
        forward(&input)?;
    }
    let start = clock.now();
    let mut last = start;
    let mut per_frame_ms = Vec::with_capacity(n_timed);
    for _ in 0..n_timed {
        forward(&input)?;
        let t = clock.now();
        if !(t >= last) {
            return Err(contract_err!("clock went backwards ({last} then {t})"));
        }
        per_frame_ms.push((t - last) * 1000.0);
        last = t;
    }
    let total_seconds = last - start;
    if total_seconds <= 0.0 {
        return Err(contract_err!("clock did not advance over {n_timed} frames"));
    }
    Ok(FpsStats {
        n_frames: n_timed,
        total_seconds,
        fps: n_timed as f64 / total_seconds,
        per_frame_ms,
    })
}

/// Measures evaluation-mode inference of `model` at `size × size`.
pub fn bench_model<C: Clock + ?Sized>(model: &TransRUPNet, size: (usize, usize), n_warmup: usize, n_timed: usize, clock: &mut C) -> Result<FpsStats> {
    let shape = [1, model.config().in_channels, size.0, size.1];
    measure_fps(|x| model.infer(x).map(|_| ()), &shape, n_warmup, n_timed, clock)
}
