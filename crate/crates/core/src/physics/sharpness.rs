use std::ops::RangeInclusive;

use super::{render_frame, ExperimentState, LensBenchState, PhysicsError, RenderConfig};
use crate::image::GrayImage;

/// Variance of the 4-neighbour discrete Laplacian over interior pixels.
pub fn sharpness_metric(image: &GrayImage) -> f64 {
    let (w, h) = image.dimensions();
    if w < 3 || h < 3 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let n = ((w - 2) * (h - 2)) as f64;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let lap = image.get(x - 1, y) as f64
                + image.get(x + 1, y) as f64
                + image.get(x, y - 1) as f64
                + image.get(x, y + 1) as f64
                - 4.0 * image.get(x, y) as f64;
            sum += lap;
            sum_sq += lap * lap;
        }
    }
    let mean = sum / n;
    (sum_sq / n - mean * mean).max(0.0)
}

/// Renders the screen camera at every screen position in `v_steps` and scores
/// each frame. The noise seed is held fixed across the sweep.
pub fn focus_sweep(
    bench: &LensBenchState,
    v_steps: RangeInclusive<u32>,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<Vec<(u32, f64)>, PhysicsError> {
    v_steps
        .map(|v| {
            let state = ExperimentState::FocalLength(LensBenchState {
                v_steps: v,
                ..bench.clone()
            });
            let frame = render_frame(&state, "screen", cfg, seed, 0)?;
            Ok((v, sharpness_metric(&frame.image)))
        })
        .collect()
}

/// Position of the best score. When the maximum is attained on a run of
/// consecutive samples (defocus below one grey level looks identical), the
/// middle of that run is returned.
pub fn plateau_argmax(scores: &[(u32, f64)]) -> Option<u32> {
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return None;
    }
    let mut best_run: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < scores.len() {
        if scores[i].1 == best {
            let start = i;
            while i + 1 < scores.len() && scores[i + 1].1 == best {
                i += 1;
            }
            if best_run.is_none_or(|(s, e)| i - start > e - s) {
                best_run = Some((start, i));
            }
        }
        i += 1;
    }
    let (s, e) = best_run?;
    let lo = scores[s].0 as u64;
    let hi = scores[e].0 as u64;
    Some(((lo + hi) / 2) as u32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_frame_scores_zero() {
        assert_eq!(sharpness_metric(&GrayImage::filled(32, 32, 77)), 0.0);
        assert_eq!(sharpness_metric(&GrayImage::filled(2, 2, 5)), 0.0);
    }

    #[test]
    fn sharpness_drops_with_defocus() {
        let cfg = RenderConfig::default();
        let score_at = |v_steps| {
            let state = ExperimentState::FocalLength(LensBenchState {
                v_steps,
                ..Default::default()
            });
            sharpness_metric(&render_frame(&state, "screen", &cfg, 9, 0).unwrap().image)
        };
        // sigma = 0, 2, 4, 8 px
        let scores: Vec<f64> = [20_000, 20_500, 21_000, 22_000].into_iter().map(score_at).collect();
        assert!(scores.windows(2).all(|w| w[0] > w[1]), "{scores:?}");
    }

    #[test]
    fn plateau_center_is_reported() {
        let scores = [(0, 1.0), (1, 3.0), (2, 3.0), (3, 3.0), (4, 2.0)];
        assert_eq!(plateau_argmax(&scores), Some(2));
        assert_eq!(plateau_argmax(&[(5, 1.0)]), Some(5));
        assert_eq!(plateau_argmax(&[]), None);
    }
}
