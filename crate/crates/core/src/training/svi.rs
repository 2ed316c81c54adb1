//! Minibatch statistics from contiguous segments.
//!
//! A segment of length `S` covers transitions `τ+1..=τ+S` for a start
//! `τ` drawn uniformly from `0..=T−S`, and its statistics are scaled by
//! `T/S`. Transitions near either end of the series fall into fewer
//! segments than interior ones, so the exhaustive average over all starts
//! weights transition `t` by `c_t = T·count(t) / (S·(T−S+1))` rather than 1.

use crate::error::{GpssmError, Result};
use crate::model::GpssmModel;
use crate::scalar::Real;
use crate::smoothing::ParticleTrajectories;
use crate::sparse::{accumulate_stats, SufficientStats};

/// `T / S`, validated.
pub fn svi_scale<T: Real>(total: usize, segment: usize) -> Result<T> {
    if segment == 0 || segment > total {
        return Err(GpssmError::invalid(format!(
            "segment length {segment} must lie in 1..={total}"
        )));
    }
    Ok(T::from_usize_lossy(total) / T::from_usize_lossy(segment))
}

/// Statistics of one segment's particles scaled by `T/S`.
pub fn svi_stats<T: Real>(
    model: &GpssmModel<T>,
    segment: &ParticleTrajectories<T>,
    total: usize,
    segment_len: usize,
) -> Result<SufficientStats<T>> {
    let scale = svi_scale::<T>(total, segment_len)?;
    Ok(accumulate_stats(model, segment)?.scaled(scale))
}

/// Number of length-`S` segments that contain transition `t` (`1..=T`).
pub fn segment_count(t: usize, total: usize, segment: usize) -> usize {
    if t == 0 || t > total || segment == 0 || segment > total {
        return 0;
    }
    let hi = (t - 1).min(total - segment);
    let lo = t.saturating_sub(segment);
    hi + 1 - lo
}

/// Effective weight `c_t` of each transition `t = 1..=T` under the
/// exhaustive segment average.
pub fn segment_weights<T: Real>(total: usize, segment: usize) -> Result<Vec<T>> {
    let scale = svi_scale::<T>(total, segment)?;
    let n_seg = T::from_usize_lossy(total - segment + 1);
    Ok((1..=total)
        .map(|t| scale * T::from_usize_lossy(segment_count(t, total, segment)) / n_seg)
        .collect())
}

/// Upper bound on `|exhaustive average − batch|` for per-transition
/// contributions of magnitude `magnitudes[t-1]`: `Σ_t |c_t − 1| · |s_t|`.
pub fn edge_effect_bound<T: Real>(magnitudes: &[T], segment: usize) -> Result<T> {
    let w = segment_weights::<T>(magnitudes.len(), segment)?;
    Ok(w.iter()
        .zip(magnitudes)
        .fold(T::zero(), |a, (c, s)| a + (*c - T::one()).abs() * s.abs()))
}
