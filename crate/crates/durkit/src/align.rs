//! Alignment algebra: duration sequences, monotonic frame-to-phoneme paths,
//! and the distances used to score predicted durations against ground truth.
//!
//! A monotonic alignment between a phoneme sequence of length N and T
//! acoustic frames is fully determined by a per-phoneme frame count, so
//! every operation here works on duration vectors. Frames are 10 ms units.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Seconds per acoustic frame (10 ms resolution).
pub const FRAME_SECONDS: f64 = 0.010;

/// A tokenized phoneme sequence with vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSequence {
    tokens: Vec<String>,
    ids: Vec<usize>,
}

impl PhonemeSequence {
    /// Build a sequence, checking the length/vocabulary invariants.
    pub fn new(tokens: Vec<String>, ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument(
                "phoneme sequence must be non-empty".into(),
            ));
        }
        if tokens.len() != ids.len() {
            return Err(Error::InvalidArgument(format!(
                "token/id length mismatch: {} vs {}",
                tokens.len(),
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "phoneme id {bad} out of range for vocab size {vocab_size}"
            )));
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty sequences
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
}

/// Per-phoneme frame counts; every entry is at least one frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationSequence {
    frames: Vec<u32>,
}

impl DurationSequence {
    pub fn new(frames: Vec<u32>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument(
                "duration sequence must be non-empty".into(),
            ));
        }
        if let Some(pos) = frames.iter().position(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "duration at index {pos} is zero; every phoneme needs at least one frame"
            )));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> &[u32] {
        &self.frames
    }

    /// Total frame count T = sum of per-phoneme durations.
    pub fn total_frames(&self) -> u64 {
        self.frames.iter().map(|&d| u64::from(d)).sum()
    }
}

/// Frame-to-phoneme index map; monotone, unit steps, covering every phoneme.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath {
    frame_to_phoneme: Vec<usize>,
}

impl AlignmentPath {
    pub fn new(frame_to_phoneme: Vec<usize>) -> Result<Self> {
        if frame_to_phoneme.is_empty() {
            return Err(Error::InvalidArgument("alignment path is empty".into()));
        }
        if frame_to_phoneme[0] != 0 {
            return Err(Error::InvalidArgument(format!(
                "alignment path must start at phoneme 0, got {}",
                frame_to_phoneme[0]
            )));
        }
        for (t, w) in frame_to_phoneme.windows(2).enumerate() {
            // Unit steps imply both monotonicity and surjectivity.
            if w[1] != w[0] && w[1] != w[0] + 1 {
                return Err(Error::InvalidArgument(format!(
                    "alignment path jumps from {} to {} at frame {}",
                    w[0],
                    w[1],
                    t + 1
                )));
            }
        }
        Ok(Self { frame_to_phoneme })
    }

    pub fn frames(&self) -> &[usize] {
        &self.frame_to_phoneme
    }

    pub fn num_frames(&self) -> usize {
        self.frame_to_phoneme.len()
    }

    /// Number of phonemes the path covers.
    pub fn num_phonemes(&self) -> usize {
        self.frame_to_phoneme.last().map_or(0, |&p| p + 1)
    }
}

/// Expand durations into a frame-level path: phoneme i repeated d_i times.
pub fn expand(durations: &DurationSequence, phonemes: &PhonemeSequence) -> Result<AlignmentPath> {
    if durations.len() != phonemes.len() {
        return Err(Error::InvalidArgument(format!(
            "duration/phoneme length mismatch: {} vs {}",
            durations.len(),
            phonemes.len()
        )));
    }
    let mut path = Vec::with_capacity(durations.total_frames() as usize);
    for (i, &d) in durations.frames().iter().enumerate() {
        path.extend(std::iter::repeat(i).take(d as usize));
    }
    AlignmentPath::new(path)
}

/// Run-length encode a path back into per-phoneme durations.
///
/// Inverse of [`expand`]: `durations_from_alignment(expand(d, p)) == d`.
pub fn durations_from_alignment(path: &AlignmentPath) -> Result<DurationSequence> {
    let mut frames: Vec<u32> = Vec::with_capacity(path.num_phonemes());
    for &p in path.frames() {
        if p == frames.len() {
            frames.push(1);
        } else {
            frames[p] += 1;
        }
    }
    DurationSequence::new(frames)
}

/// Euclidean distance between two equal-length duration vectors.
pub fn alignment_distance(a: &DurationSequence, b: &DurationSequence) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let ss: f64 = a
        .frames()
        .iter()
        .zip(b.frames())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(ss.sqrt())
}

/// Mean of squared per-phoneme errors between ground truth and prediction.
///
/// This is the reported alignment-accuracy metric. The L2-norm-over-length
/// variant is available as [`l2_over_len`].
pub fn mse_metric(gt: &DurationSequence, pred: &DurationSequence) -> Result<f64> {
    let dist = alignment_distance(gt, pred)?;
    Ok(dist * dist / gt.len() as f64)
}

/// The L2 norm of the duration error divided by sequence length.
pub fn l2_over_len(gt: &DurationSequence, pred: &DurationSequence) -> Result<f64> {
    let dist = alignment_distance(gt, pred)?;
    Ok(dist / gt.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phonemes(tokens: &[&str]) -> PhonemeSequence {
        let ids = (0..tokens.len()).collect();
        PhonemeSequence::new(tokens.iter().map(|s| s.to_string()).collect(), ids, 64).unwrap()
    }

    fn durs(frames: &[u32]) -> DurationSequence {
        DurationSequence::new(frames.to_vec()).unwrap()
    }

    #[test]
    fn expand_identity() {
        let path = expand(&durs(&[1, 1]), &phonemes(&["a", "b"])).unwrap();
        assert_eq!(path.frames(), &[0, 1]);
    }

    #[test]
    fn expand_repeats_each_phoneme() {
        let path = expand(&durs(&[2, 3, 1]), &phonemes(&["a", "b", "c"])).unwrap();
        assert_eq!(path.frames(), &[0, 0, 1, 1, 1, 2]);
    }

    #[test]
    fn expand_single_phoneme() {
        let path = expand(&durs(&[5]), &phonemes(&["a"])).unwrap();
        assert_eq!(path.frames(), &[0, 0, 0, 0, 0]);
    }

    #[test]
    fn expand_rejects_length_mismatch() {
        assert!(expand(&durs(&[1, 2, 3]), &phonemes(&["a", "b"])).is_err());
    }

    #[test]
    fn durations_reject_zero_entries() {
        assert!(DurationSequence::new(vec![1, 0, 2]).is_err());
        assert!(DurationSequence::new(vec![]).is_err());
    }

    #[test]
    fn rle_inverts_expand() {
        let d = durs(&[2, 3, 1]);
        let path = expand(&d, &phonemes(&["a", "b", "c"])).unwrap();
        assert_eq!(durations_from_alignment(&path).unwrap(), d);
    }

    #[test]
    fn rle_examples() {
        let p = AlignmentPath::new(vec![0]).unwrap();
        assert_eq!(durations_from_alignment(&p).unwrap().frames(), &[1]);
        let p = AlignmentPath::new(vec![0, 1, 1, 2, 2, 2, 3]).unwrap();
        assert_eq!(durations_from_alignment(&p).unwrap().frames(), &[1, 2, 3, 1]);
    }

    #[test]
    fn path_rejects_jumps_and_bad_start() {
        assert!(AlignmentPath::new(vec![0, 2]).is_err());
        assert!(AlignmentPath::new(vec![1, 1]).is_err());
        assert!(AlignmentPath::new(vec![0, 1, 0]).is_err());
    }

    #[test]
    fn distance_identity_is_zero() {
        let d = durs(&[4, 7, 2]);
        assert_eq!(alignment_distance(&d, &d).unwrap(), 0.0);
    }

    #[test]
    fn distance_three_four_five() {
        // Minimum duration is 1 frame, so shift the 3-4-5 triangle by one.
        let a = durs(&[4, 5]);
        let b = durs(&[1, 1]);
        assert_eq!(alignment_distance(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn distance_hand_computed() {
        let a = durs(&[2, 3, 1]);
        let b = durs(&[1, 3, 3]);
        let got = alignment_distance(&a, &b).unwrap();
        assert!((got - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mse_identity_and_hand_value() {
        let a = durs(&[10, 10]);
        assert_eq!(mse_metric(&a, &a).unwrap(), 0.0);
        let b = durs(&[12, 6]);
        // (2^2 + 4^2) / 2 = 10
        assert_eq!(mse_metric(&a, &b).unwrap(), 10.0);
    }

    #[test]
    fn mse_is_symmetric_and_relates_to_distance() {
        let a = durs(&[2, 9, 4, 1]);
        let b = durs(&[5, 1, 4, 2]);
        let m1 = mse_metric(&a, &b).unwrap();
        let m2 = mse_metric(&b, &a).unwrap();
        assert_eq!(m1, m2);
        let dist = alignment_distance(&a, &b).unwrap();
        assert!((dist * dist - 4.0 * m1).abs() < 1e-9);
        assert!((l2_over_len(&a, &b).unwrap() - dist / 4.0).abs() < 1e-12);
    }

    #[test]
    fn mse_rejects_length_mismatch() {
        assert!(mse_metric(&durs(&[1]), &durs(&[1, 2])).is_err());
    }
}
