use serde::{Deserialize, Serialize};

use super::{InfluenceScores, Method, Mode, ScoreMetadata};
use crate::error::{Error, Result};
use crate::trainer::GradientTrace;

pub const DEFAULT_FROM_CHECKPOINT: usize = 5;

/// Score of a point is the largest norm it shows at any checkpoint from
/// index `from_checkpoint` on, so a point whose gradient stays small for
/// the rest of training gets a small score.
pub fn lowest_gradients_scores(
    trace: &GradientTrace,
    from_checkpoint: usize,
) -> Result<InfluenceScores> {
    if from_checkpoint >= trace.checkpoints.len() {
        return Err(Error::param(format!(
            "from_checkpoint {from_checkpoint} leaves no checkpoints (trace has {})",
            trace.checkpoints.len()
        )));
    }
    let late = &trace.checkpoints[from_checkpoint..];
    let scores = trace
        .point_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, late.iter().fold(0.0f64, |m, c| m.max(c.norms[i]))))
        .collect();
    let meta = ScoreMetadata {
        checkpoint_epochs: late.iter().map(|c| c.epoch).collect(),
        from_checkpoint: Some(from_checkpoint),
        notes: vec![format!("{} gradient norm", trace.norm_kind.tag())],
        ..ScoreMetadata::default()
    };
    InfluenceScores::new(Method::LowestGradients, Mode::SelfInfluence, scores, meta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowGradientCount {
    pub checkpoint: usize,
    pub epoch: usize,
    pub count: usize,
}

/// Linear-interpolation percentile of `values` (`p` in percent).
pub(crate) fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Per checkpoint, the number of points whose norm is strictly below the
/// `threshold_percentile` of the first checkpoint's norms.
pub fn low_gradient_count_curve(
    trace: &GradientTrace,
    threshold_percentile: f64,
) -> Result<Vec<LowGradientCount>> {
    if !(threshold_percentile > 0.0 && threshold_percentile < 100.0) {
        return Err(Error::param("threshold percentile must lie in (0, 100)"));
    }
    let Some(first) = trace.checkpoints.first() else {
        return Ok(Vec::new());
    };
    if first.norms.is_empty() {
        return Ok(Vec::new());
    }
    let threshold = percentile(&first.norms, threshold_percentile);
    Ok(trace
        .checkpoints
        .iter()
        .enumerate()
        .map(|(checkpoint, c)| LowGradientCount {
            checkpoint,
            epoch: c.epoch,
            count: c.norms.iter().filter(|&&v| v < threshold).count(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{NormKind, TraceCheckpoint};

    fn trace(rows: &[&[f64]]) -> GradientTrace {
        GradientTrace {
            norm_kind: NormKind::L2,
            point_ids: (0..rows[0].len()).collect(),
            checkpoints: rows
                .iter()
                .enumerate()
                .map(|(epoch, r)| TraceCheckpoint {
                    epoch,
                    norms: r.to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn max_over_late_checkpoints() {
        let t = trace(&[&[5.0], &[3.0], &[1.0]]);
        let s = lowest_gradients_scores(&t, 1).unwrap();
        assert_eq!(s.get(0), Some(3.0));
        assert_eq!(s.mode, Mode::SelfInfluence);
    }

    #[test]
    fn empty_range_is_an_error() {
        let t = trace(&[&[5.0], &[3.0]]);
        assert!(lowest_gradients_scores(&t, 2).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[4.0, 1.0, 3.0, 2.0], 50.0), 2.5);
        assert_eq!(percentile(&[7.0], 5.0), 7.0);
    }

    #[test]
    fn constant_trace_gives_constant_counts() {
        let t = trace(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]]);
        let c = low_gradient_count_curve(&t, 50.0).unwrap();
        assert!(c.iter().all(|p| p.count == 1));
        assert!(low_gradient_count_curve(&t, 100.0).is_err());
    }
}
