use crate::error::{Error, Result};
use crate::image::Image;

/// One annotated micro-expression clip.
#[derive(Debug, Clone, PartialEq)]
pub struct MESample {
    pub sample_id: String,
    pub subject_id: String,
    pub dataset_id: String,
    pub frames: Vec<Image>,
    pub onset_idx: usize,
    /// Only the apex-based baseline structures read this.
    pub apex_idx: Option<usize>,
    pub offset_idx: usize,
    pub label: usize,
}

impl MESample {
    /// Checks index ordering and that all frames share one shape.
    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if n == 0 {
            return Err(Error::Invalid(format!("sample {} has no frames", self.sample_id)));
        }
        if self.onset_idx > self.offset_idx {
            return Err(Error::Invalid(format!(
                "sample {}: onset {} after offset {}",
                self.sample_id, self.onset_idx, self.offset_idx
            )));
        }
        if self.offset_idx >= n {
            return Err(Error::Range(format!(
                "sample {}: offset out of range ({} >= {n} frames)",
                self.sample_id, self.offset_idx
            )));
        }
        if let Some(a) = self.apex_idx {
            if a < self.onset_idx || a > self.offset_idx {
                return Err(Error::Invalid(format!(
                    "sample {}: apex {a} outside [{}, {}]",
                    self.sample_id, self.onset_idx, self.offset_idx
                )));
            }
        }
        let shape = self.frames[0].shape();
        if shape.2 != 1 && shape.2 != 3 {
            return Err(Error::Shape(format!("sample {}: frames have {} channels", self.sample_id, shape.2)));
        }
        if let Some(i) = self.frames.iter().position(|f| f.shape() != shape) {
            return Err(Error::Shape(format!(
                "sample {}: frame {i} is {:?}, frame 0 is {shape:?}",
                self.sample_id,
                self.frames[i].shape()
            )));
        }
        Ok(())
    }

    /// Number of frames in the annotated span `[onset, offset]`.
    pub fn span_len(&self) -> usize {
        self.offset_idx - self.onset_idx + 1
    }

    pub fn check_span(&self, k: usize) -> Result<()> {
        if self.span_len() < k {
            return Err(Error::Range(format!(
                "sample {}: span of {} frames is shorter than k = {k}",
                self.sample_id,
                self.span_len()
            )));
        }
        Ok(())
    }
}
