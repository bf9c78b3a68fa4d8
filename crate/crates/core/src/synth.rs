//! Deterministic synthetic frame sequences, plus a flat binary container for
//! externally extracted features.
//!
//! Feature file layout (all little endian): magic `FRAMES01`, then `n`,
//! `d_in`, `count` as `u64`, then `count · n · d_in` `f64` values, each
//! utterance row-major.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Generated values are clamped to `[-BOUND, BOUND]`.
pub const BOUND: f64 = 3.0;

const MAGIC: &[u8; 8] = b"FRAMES01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    IidGaussian,
    SmoothRandomWalk,
    PiecewiseSegment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub d_in: usize,
    #[serde(default = "default_regime")]
    pub regime: Regime,
    #[serde(default)]
    pub seed: u64,
}

fn default_regime() -> Regime {
    Regime::PiecewiseSegment
}

/// AR(1) coefficient of the random-walk regime.
const WALK_RHO: f64 = 0.8;
/// Segment lengths are uniform in this range (inclusive).
const SEGMENT_LEN: (usize, usize) = (8, 24);
const SEGMENT_NOISE: f64 = 0.1;

/// Batch `batch` of `count` utterances. Each batch index owns its own RNG
/// stream, so batches can be produced in any order.
pub fn generate(spec: &SynthSpec, batch: u64, count: usize) -> Result<Vec<Tensor>> {
    if count == 0 {
        return Err(Error::Degenerate("count must be at least 1".into()));
    }
    if spec.n == 0 || spec.d_in == 0 {
        return Err(Error::Config("synthetic n and d_in must be positive".into()));
    }
    let mut rng = Rng::with_stream(spec.seed, batch);
    Ok((0..count).map(|_| utterance(spec, &mut rng)).collect())
}

fn utterance(spec: &SynthSpec, rng: &mut Rng) -> Tensor {
    let (n, d) = (spec.n, spec.d_in);
    let mut t = Tensor::zeros(&[n, d]);
    match spec.regime {
        Regime::IidGaussian => {
            for v in t.data_mut() {
                *v = rng.normal();
            }
        }
        Regime::SmoothRandomWalk => {
            let innov = (1.0 - WALK_RHO * WALK_RHO).sqrt();
            let mut prev: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for i in 0..n {
                if i > 0 {
                    for p in &mut prev {
                        *p = WALK_RHO * *p + innov * rng.normal();
                    }
                }
                t.row_mut(i).copy_from_slice(&prev);
            }
        }
        Regime::PiecewiseSegment => {
            let mut i = 0;
            while i < n {
                let len = SEGMENT_LEN.0 + rng.below(SEGMENT_LEN.1 - SEGMENT_LEN.0 + 1);
                let level: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                for r in i..(i + len).min(n) {
                    for (v, l) in t.row_mut(r).iter_mut().zip(&level) {
                        *v = l + SEGMENT_NOISE * rng.normal();
                    }
                }
                i += len;
            }
        }
    }
    for v in t.data_mut() {
        *v = v.clamp(-BOUND, BOUND);
    }
    t
}

/// Mean correlation between frame `i` and frame `i + 1`, pooled over features.
pub fn adjacent_correlation(seqs: &[Tensor]) -> f64 {
    let (mut sxy, mut sxx, mut syy, mut sx, mut sy, mut cnt) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for s in seqs {
        for i in 1..s.rows() {
            for (a, b) in s.row(i - 1).iter().zip(s.row(i)) {
                sx += a;
                sy += b;
                sxy += a * b;
                sxx += a * a;
                syy += b * b;
                cnt += 1.0;
            }
        }
    }
    let cov = sxy / cnt - (sx / cnt) * (sy / cnt);
    let vx = sxx / cnt - (sx / cnt).powi(2);
    let vy = syy / cnt - (sy / cnt).powi(2);
    cov / (vx * vy).sqrt()
}

pub fn write_features(path: &Path, seqs: &[Tensor]) -> Result<()> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Degenerate("no sequences to write".into()))?;
    let (n, d) = first.matrix_dims("write_features")?;
    let mut buf = Vec::with_capacity(32 + seqs.len() * n * d * 8);
    buf.extend_from_slice(MAGIC);
    for v in [n as u64, d as u64, seqs.len() as u64] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in seqs {
        if s.shape() != [n, d] {
            return Err(Error::shape("write_features", &[n, d], s.shape()));
        }
        for v in s.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Vec<Tensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 32 || &bytes[..8] != MAGIC {
        return Err(Error::Config(format!("{} is not a frame feature file", path.display())));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize;
    let (n, d, count) = (word(0), word(1), word(2));
    let expected = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(count))
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::Config("feature header overflows".into()))?;
    if bytes.len() - 32 != expected {
        return Err(Error::Config(format!(
            "feature file holds {} data bytes, header implies {expected}",
            bytes.len() - 32
        )));
    }
    let values: Vec<f64> = bytes[32..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    values
        .chunks_exact(n * d)
        .map(|c| Tensor::new(&[n, d], c.to_vec()))
        .collect()
}

/// Where training batches come from.
pub trait FrameSource {
    fn batch(&mut self, index: u64, count: usize) -> Result<Vec<Tensor>>;
    fn frame_width(&self) -> usize;
}

impl FrameSource for SynthSpec {
    fn batch(&mut self, index: u64, count: usize) -> Result<Vec<Tensor>> {
        generate(self, index, count)
    }

    fn frame_width(&self) -> usize {
        self.d_in
    }
}

/// Cycles through a fixed list of utterances.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    seqs: Vec<Tensor>,
}

impl FeatureSet {
    pub fn new(seqs: Vec<Tensor>) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Degenerate("empty feature set".into()));
        }
        Ok(Self { seqs })
    }
}

impl FrameSource for FeatureSet {
    fn batch(&mut self, index: u64, count: usize) -> Result<Vec<Tensor>> {
        let start = index as usize * count;
        Ok((0..count)
            .map(|i| self.seqs[(start + i) % self.seqs.len()].clone())
            .collect())
    }

    fn frame_width(&self) -> usize {
        self.seqs[0].cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(regime: Regime) -> SynthSpec {
        SynthSpec {
            n: 1000,
            d_in: 4,
            regime,
            seed: 5,
        }
    }

    #[test]
    fn deterministic_per_batch() {
        let s = spec(Regime::PiecewiseSegment);
        assert_eq!(generate(&s, 3, 2).unwrap(), generate(&s, 3, 2).unwrap());
        assert_ne!(generate(&s, 3, 1).unwrap(), generate(&s, 4, 1).unwrap());
    }

    #[test]
    fn gaussian_moments() {
        let x = generate(&spec(Regime::IidGaussian), 0, 1).unwrap().remove(0);
        let m = x.sum() / x.len() as f64;
        let sd = (x.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
        assert!(m.abs() < 0.1, "{m}");
        assert!((sd - 1.0).abs() < 0.1, "{sd}");
    }

    #[test]
    fn correlation_ordering_and_bounds() {
        let corr = |r| {
            let seqs = generate(&spec(r), 0, 4).unwrap();
            assert!(seqs.iter().all(|s| s.data().iter().all(|v| v.abs() <= BOUND)));
            adjacent_correlation(&seqs)
        };
        let (iid, walk, piece) = (
            corr(Regime::IidGaussian),
            corr(Regime::SmoothRandomWalk),
            corr(Regime::PiecewiseSegment),
        );
        assert!(piece > walk && walk > iid, "{piece} {walk} {iid}");
    }

    #[test]
    fn zero_count_rejected() {
        assert!(generate(&spec(Regime::IidGaussian), 0, 0).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let seqs = generate(
            &SynthSpec {
                n: 7,
                d_in: 3,
                regime: Regime::SmoothRandomWalk,
                seed: 1,
            },
            0,
            3,
        )
        .unwrap();
        write_features(&path, &seqs).unwrap();
        assert_eq!(read_features(&path).unwrap(), seqs);
        let mut set = FeatureSet::new(seqs.clone()).unwrap();
        assert_eq!(set.batch(1, 2).unwrap(), vec![seqs[2].clone(), seqs[0].clone()]);

        std::fs::write(&path, b"FRAMES01short").unwrap();
        assert!(read_features(&path).is_err());
    }
}
