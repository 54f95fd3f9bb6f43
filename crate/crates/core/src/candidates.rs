//! Segment partitioning and 3O candidate assembly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::sample::MESample;

/// `K` contiguous inclusive `(start, end)` frame ranges covering
/// `[onset, offset]` in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentBounds(Vec<(usize, usize)>);

impl SegmentBounds {
    pub fn segments(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Splits `[onset_idx, offset_idx]` into `k` segments whose lengths differ
/// by at most one; the first `len % k` segments take the extra frame.
pub fn segment_bounds(onset_idx: usize, offset_idx: usize, k: usize) -> Result<SegmentBounds> {
    if k == 0 {
        return Err(Error::Invalid("k must be positive".into()));
    }
    if offset_idx < onset_idx {
        return Err(Error::Invalid(format!("offset {offset_idx} before onset {onset_idx}")));
    }
    let len = offset_idx - onset_idx + 1;
    if len < k {
        return Err(Error::Range(format!("span of {len} frames is shorter than k = {k}")));
    }
    let base = len / k;
    let extra = len % k;
    let mut start = onset_idx;
    let segs = (0..k)
        .map(|j| {
            let n = base + usize::from(j < extra);
            let seg = (start, start + n - 1);
            start += n;
            seg
        })
        .collect();
    Ok(SegmentBounds(segs))
}

/// Draws one frame index uniformly from each segment.
pub fn sample_occurring<R: Rng + ?Sized>(bounds: &SegmentBounds, rng: &mut R) -> Vec<usize> {
    bounds.segments().iter().map(|&(s, e)| if s == e { s } else { rng.random_range(s..=e) }).collect()
}

/// One (onset, occurring, offset) triple of a clip.
#[derive(Debug, Clone, Copy)]
pub struct ThreeOCandidate<'a> {
    pub sample_id: &'a str,
    /// 1-based candidate index.
    pub j: usize,
    pub onset_frame: &'a Image,
    pub occurring_frame: &'a Image,
    pub offset_frame: &'a Image,
    pub occurring_idx: usize,
    pub segment: (usize, usize),
}

/// Builds the `k` candidates of `sample`, ordered by segment.
pub fn build_candidates<'a, R: Rng + ?Sized>(
    sample: &'a MESample,
    k: usize,
    rng: &mut R,
) -> Result<Vec<ThreeOCandidate<'a>>> {
    let bounds = segment_bounds(sample.onset_idx, sample.offset_idx, k)
        .map_err(|e| Error::Range(format!("sample {}: {e}", sample.sample_id)))?;
    if sample.offset_idx >= sample.frames.len() {
        return Err(Error::Range(format!("sample {}: offset out of range", sample.sample_id)));
    }
    let occ = sample_occurring(&bounds, rng);
    Ok(bounds
        .segments()
        .iter()
        .zip(occ)
        .enumerate()
        .map(|(j, (&segment, occurring_idx))| ThreeOCandidate {
            sample_id: &sample.sample_id,
            j: j + 1,
            onset_frame: &sample.frames[sample.onset_idx],
            occurring_frame: &sample.frames[occurring_idx],
            offset_frame: &sample.frames[sample.offset_idx],
            occurring_idx,
            segment,
        })
        .collect())
}
