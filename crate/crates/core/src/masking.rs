//! Span masking of input frames and mask-ratio schedules.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Default span length in frames.
pub const DEFAULT_SPAN: usize = 10;

/// The masked frame set for one utterance. Teacher and student passes within
/// a step take the same plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Sorted, distinct frame indices.
    pub masked: Vec<usize>,
    pub num_frames: usize,
    pub target_ratio: f64,
    pub span: usize,
    pub seed: u64,
}

impl MaskPlan {
    /// Plan with an explicit index set (sorted and deduplicated here).
    pub fn from_indices(num_frames: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if let Some(&bad) = masked.iter().find(|&&i| i >= num_frames) {
            return Err(Error::shape("MaskPlan", &[num_frames], &[bad]));
        }
        let ratio = masked.len() as f64 / num_frames.max(1) as f64;
        Ok(Self {
            masked,
            num_frames,
            target_ratio: ratio,
            span: 1,
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn ratio(&self) -> f64 {
        self.masked.len() as f64 / self.num_frames as f64
    }

    pub fn unmasked(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_frames - self.masked.len());
        let mut it = self.masked.iter().peekable();
        for i in 0..self.num_frames {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(i);
            }
        }
        out
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }

    /// Short digest of the frame count and masked indices, for logs.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_frames as u64).to_le_bytes());
        for &i in &self.masked {
            h.update((i as u64).to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Places spans of `span` frames at uniform start positions until at least
/// `round(ratio · n)` frames are covered. Overlapping spans merge, so the
/// result never exceeds `ratio · n + span`.
pub fn sample_mask(n: usize, ratio: f64, span: usize, rng: &mut Rng) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Degenerate(format!("mask ratio {ratio} outside (0, 1)")));
    }
    if span == 0 || span > n {
        return Err(Error::Degenerate(format!("span {span} outside [1, {n}]")));
    }
    if ratio * (n as f64) < 1.0 {
        return Err(Error::Degenerate(format!(
            "ratio {ratio} of {n} frames masks less than one frame"
        )));
    }
    let target = (ratio * n as f64).round() as usize;
    if target >= n {
        return Err(Error::Degenerate(format!(
            "ratio {ratio} of {n} frames leaves no unmasked frame"
        )));
    }
    let seed = rng.seed();
    let mut covered = vec![false; n];
    let mut count = 0;
    let starts = n - span + 1;
    let max_draws = 1000 * n;
    let mut draws = 0;
    while count < target {
        if draws == max_draws {
            return Err(Error::Degenerate(format!(
                "could not cover {target} of {n} frames with spans of {span} after {max_draws} draws"
            )));
        }
        draws += 1;
        let start = rng.below(starts);
        for c in &mut covered[start..start + span] {
            if !*c {
                *c = true;
                count += 1;
            }
        }
    }
    Ok(MaskPlan {
        masked: (0..n).filter(|&i| covered[i]).collect(),
        num_frames: n,
        target_ratio: ratio,
        span,
        seed,
    })
}

/// Copy of `x` with every masked row replaced by `mask_embedding`.
pub fn apply_mask(x: &Tensor, plan: &MaskPlan, mask_embedding: &Tensor) -> Result<Tensor> {
    let (n, c) = x.matrix_dims("apply_mask")?;
    if mask_embedding.len() != c {
        return Err(Error::shape("apply_mask", x.shape(), mask_embedding.shape()));
    }
    if plan.num_frames != n {
        return Err(Error::shape("apply_mask", x.shape(), &[plan.num_frames]));
    }
    let mut out = x.clone();
    out.clear_grad();
    for &i in &plan.masked {
        if i >= n {
            return Err(Error::shape("apply_mask", x.shape(), &[i]));
        }
        out.row_mut(i).copy_from_slice(mask_embedding.data());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RatioSchedule {
    Constant {
        ratio: f64,
    },
    /// `start` at step 0, `end` at the final step, linear in between.
    Linear {
        start: f64,
        end: f64,
    },
}

impl RatioSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| r > 0.0 && r < 1.0;
        let fine = match *self {
            RatioSchedule::Constant { ratio } => ok(ratio),
            RatioSchedule::Linear { start, end } => ok(start) && ok(end),
        };
        if fine {
            Ok(())
        } else {
            Err(Error::Config(format!("mask ratios must lie in (0, 1): {self:?}")))
        }
    }
}

/// Ratio at `step` of `total` (the final step index).
pub fn ratio_at(schedule: &RatioSchedule, step: usize, total: usize) -> Result<f64> {
    match *schedule {
        RatioSchedule::Constant { ratio } => Ok(ratio),
        RatioSchedule::Linear { start, end } => {
            if total == 0 {
                return Err(Error::Degenerate("linear schedule over zero steps".into()));
            }
            if step > total {
                return Err(Error::Degenerate(format!("step {step} beyond final step {total}")));
            }
            Ok(start + (end - start) * step as f64 / total as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_single_frame() {
        let plan = sample_mask(10, 0.1, 1, &mut Rng::new(3)).unwrap();
        assert_eq!(plan.len(), 1);
    }

    #[test]
    fn same_seed_same_mask() {
        let a = sample_mask(200, 0.4, 10, &mut Rng::new(9)).unwrap();
        let b = sample_mask(200, 0.4, 10, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        let c = sample_mask(200, 0.4, 10, &mut Rng::new(10)).unwrap();
        assert_ne!(a.masked, c.masked);
    }

    #[test]
    fn count_bounds_hold() {
        for seed in 0..50 {
            let plan = sample_mask(1000, 0.4, 10, &mut Rng::new(seed)).unwrap();
            assert!(plan.len() >= 400 && plan.len() <= 410, "{}", plan.len());
            assert!(plan.masked.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn degenerate_inputs() {
        let mut rng = Rng::new(0);
        assert!(sample_mask(5, 0.1, 1, &mut rng).is_err());
        assert!(sample_mask(10, 0.0, 1, &mut rng).is_err());
        assert!(sample_mask(10, 1.0, 1, &mut rng).is_err());
        assert!(sample_mask(10, 0.5, 11, &mut rng).is_err());
        assert!(sample_mask(10, 0.97, 2, &mut rng).is_err());
    }

    #[test]
    fn apply_mask_edges() {
        let mut rng = Rng::new(4);
        let x = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let e = Tensor::new(&[3], vec![9.0, 8.0, 7.0]).unwrap();
        let none = MaskPlan::from_indices(6, vec![]).unwrap();
        assert_eq!(apply_mask(&x, &none, &e).unwrap(), x);
        let all = MaskPlan::from_indices(6, (0..6).collect()).unwrap();
        let m = apply_mask(&x, &all, &e).unwrap();
        for i in 0..6 {
            assert_eq!(m.row(i), e.data());
        }
        assert!(MaskPlan::from_indices(6, vec![6]).is_err());
    }

    #[test]
    fn unmasked_is_complement() {
        let plan = MaskPlan::from_indices(7, vec![5, 1, 2, 2]).unwrap();
        assert_eq!(plan.masked, vec![1, 2, 5]);
        assert_eq!(plan.unmasked(), vec![0, 3, 4, 6]);
    }

    #[test]
    fn schedules() {
        let lin = RatioSchedule::Linear { start: 0.4, end: 0.8 };
        assert_eq!(ratio_at(&lin, 0, 100).unwrap(), 0.4);
        assert_eq!(ratio_at(&lin, 100, 100).unwrap(), 0.8);
        assert!((ratio_at(&lin, 50, 100).unwrap() - 0.6).abs() < 1e-15);
        assert!(ratio_at(&lin, 0, 0).is_err());
        let c = RatioSchedule::Constant { ratio: 0.6 };
        assert_eq!(ratio_at(&c, 3, 0).unwrap(), 0.6);
        assert!(RatioSchedule::Constant { ratio: 1.2 }.validate().is_err());
    }
}
