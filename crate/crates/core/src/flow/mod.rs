//! Dense optical flow, flow fusion and the candidate input rendering.

mod cache;
mod lk;

pub use cache::{
    cache_entry_path, flow_cache_read, flow_cache_write, import_entry_path, read_import, read_record, write_import,
    write_record, CACHE_MAGIC, CACHE_VERSION,
};
pub use lk::PyramidLk;

use crate::candidates::ThreeOCandidate;
use crate::error::{Error, Result};
use crate::image::Image;

/// Per-pixel displacement `(u, v)` in pixels; `u` horizontal, `v` vertical.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField(Image);

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField(Image::zeros(height, width, 2))
    }

    pub fn from_image(img: Image) -> Result<Self> {
        if img.channels() != 2 {
            return Err(Error::Shape(format!("flow field needs 2 channels, got {}", img.channels())));
        }
        Ok(FlowField(img))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut img = Image::zeros(height, width, 2);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(y, x);
                img.set(y, x, 0, u);
                img.set(y, x, 1, v);
            }
        }
        FlowField(img)
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn u(&self, y: usize, x: usize) -> f32 {
        self.0.get(y, x, 0)
    }

    #[inline]
    pub fn v(&self, y: usize, x: usize) -> f32 {
        self.0.get(y, x, 1)
    }

    pub fn as_image(&self) -> &Image {
        &self.0
    }

    pub fn negated(&self) -> FlowField {
        let data = self.0.data().iter().map(|x| -x).collect();
        FlowField(Image::from_vec(self.height(), self.width(), 2, data).expect("same shape"))
    }

    pub fn is_finite(&self) -> bool {
        self.0.data().iter().all(|v| v.is_finite())
    }
}

/// A dense flow estimator mapping `frame_a` onto `frame_b`: the returned
/// field `f` satisfies `b(p + f(p)) ~= a(p)`.
pub trait FlowEstimator: Sync {
    fn estimate(&self, frame_a: &Image, frame_b: &Image) -> Result<FlowField>;
}

/// Flow with the default reference estimator.
pub fn estimate_flow(frame_a: &Image, frame_b: &Image) -> Result<FlowField> {
    PyramidLk::default().estimate(frame_a, frame_b)
}

fn check_same(a: &FlowField, b: &FlowField) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!("flow fields {}x{} and {}x{}", a.height(), a.width(), b.height(), b.width())));
    }
    Ok(())
}

/// Renders `(u, v)` as the three-channel network input
/// `(u / scale, v / scale, |(u, v)| / scale)`, clipped to `[-1, 1]` and
/// `[0, 1]` for the magnitude.
fn render(height: usize, width: usize, flow_scale: f64, uv: impl Fn(usize, usize) -> (f32, f32)) -> Image {
    let inv = (1.0 / flow_scale) as f32;
    let mut out = Image::zeros(height, width, 3);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = uv(y, x);
            let m = (u * u + v * v).sqrt();
            out.set(y, x, 0, (u * inv).clamp(-1.0, 1.0));
            out.set(y, x, 1, (v * inv).clamp(-1.0, 1.0));
            out.set(y, x, 2, (m * inv).clamp(0.0, 1.0));
        }
    }
    out
}

/// Averages two flow fields and renders the mean as a three-channel image
/// `(u_mean, v_mean, |mean|)`, all divided by `flow_scale`.
pub fn fuse_flows(flow_oo: &FlowField, flow_of: &FlowField, flow_scale: f64) -> Result<Image> {
    check_same(flow_oo, flow_of)?;
    Ok(render(flow_oo.height(), flow_oo.width(), flow_scale, |y, x| {
        (0.5 * (flow_oo.u(y, x) + flow_of.u(y, x)), 0.5 * (flow_oo.v(y, x) + flow_of.v(y, x)))
    }))
}

/// Single-field rendering used by the two-frame baseline structures.
pub fn render_flow(flow: &FlowField, flow_scale: f64) -> Image {
    render(flow.height(), flow.width(), flow_scale, |y, x| (flow.u(y, x), flow.v(y, x)))
}

/// Fuses the onset-to-occurring motion with the reversed
/// occurring-to-offset motion.
///
/// Expressions return to neutral at the offset, so the raw occurring-to-offset
/// field is roughly the negation of the onset-to-occurring one and a plain
/// average would cancel. Reversing the second field first makes both terms
/// describe the displacement of the occurring frame from a neutral frame.
pub fn fuse_candidate_flows(onset_to_occ: &FlowField, occ_to_offset: &FlowField, flow_scale: f64) -> Result<Image> {
    fuse_flows(onset_to_occ, &occ_to_offset.negated(), flow_scale)
}

/// Network input for one candidate.
pub fn build_input(candidate: &ThreeOCandidate<'_>, estimator: &dyn FlowEstimator, flow_scale: f64) -> Result<Image> {
    let oo = estimator.estimate(candidate.onset_frame, candidate.occurring_frame)?;
    let of = estimator.estimate(candidate.occurring_frame, candidate.offset_frame)?;
    fuse_candidate_flows(&oo, &of, flow_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(h: usize, w: usize, u: f32, v: f32) -> FlowField {
        FlowField::from_fn(h, w, |_, _| (u, v))
    }

    fn assert_pixel(img: &Image, want: [f32; 3]) {
        for y in 0..img.height() {
            for x in 0..img.width() {
                for (c, w) in want.iter().enumerate() {
                    assert!((img.get(y, x, c) - w).abs() < 1e-6, "{:?}", img.get(y, x, c));
                }
            }
        }
    }

    #[test]
    fn zero_fields_fuse_to_zero() {
        let z = FlowField::zeros(5, 6);
        let img = fuse_flows(&z, &z, 8.0).unwrap();
        assert_eq!(img.shape(), (5, 6, 3));
        assert_eq!(img.max_abs(), 0.0);
    }

    #[test]
    fn constant_field_cases() {
        let img = fuse_flows(&constant(4, 4, 2.0, 0.0), &FlowField::zeros(4, 4), 8.0).unwrap();
        assert_pixel(&img, [0.125, 0.0, 0.125]);
        let img = fuse_flows(&constant(4, 4, 3.0, 4.0), &constant(4, 4, 3.0, 4.0), 8.0).unwrap();
        assert_pixel(&img, [0.375, 0.5, 0.625]);
    }

    #[test]
    fn clipping() {
        let img = fuse_flows(&constant(2, 2, 30.0, -30.0), &constant(2, 2, 30.0, -30.0), 8.0).unwrap();
        assert_pixel(&img, [1.0, -1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch() {
        assert!(fuse_flows(&FlowField::zeros(4, 4), &FlowField::zeros(4, 5), 8.0).is_err());
        assert!(FlowField::from_image(Image::zeros(2, 2, 3)).is_err());
    }

    #[test]
    fn reversed_second_field_aligns_return_motion() {
        let out = constant(3, 3, 1.0, -2.0);
        let back = constant(3, 3, -1.0, 2.0);
        let img = fuse_candidate_flows(&out, &back, 4.0).unwrap();
        assert_pixel(&img, [0.25, -0.5, (5.0f32).sqrt() / 4.0]);
    }

    fn field(h: usize, w: usize) -> impl Strategy<Value = FlowField> {
        proptest::collection::vec(-6.0f32..6.0, h * w * 2)
            .prop_map(move |d| FlowField::from_image(Image::from_vec(h, w, 2, d).unwrap()).unwrap())
    }

    proptest! {
        #[test]
        fn fusion_is_symmetric_and_scale_linear(a in field(3, 4), b in field(3, 4), s in 1.0f64..10.0) {
            let ab = fuse_flows(&a, &b, s).unwrap();
            let ba = fuse_flows(&b, &a, s).unwrap();
            prop_assert_eq!(&ab, &ba);

            let twice = |f: &FlowField| {
                let d = f.as_image().data().iter().map(|x| 2.0 * x).collect();
                FlowField::from_image(Image::from_vec(3, 4, 2, d).unwrap()).unwrap()
            };
            // Large scale keeps everything inside the clip range.
            let s = s * 9.0;
            let base = fuse_flows(&a, &b, s).unwrap();
            let scaled = fuse_flows(&twice(&a), &twice(&b), 2.0 * s).unwrap();
            for y in 0..3 {
                for x in 0..4 {
                    for c in 0..2 {
                        prop_assert!((base.get(y, x, c) - scaled.get(y, x, c)).abs() < 1e-6);
                    }
                    let m = (base.get(y, x, 0).powi(2) + base.get(y, x, 1).powi(2)).sqrt();
                    prop_assert!((m - base.get(y, x, 2)).abs() < 1e-5);
                }
            }
        }
    }
}
