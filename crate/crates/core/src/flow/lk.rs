//! Coarse-to-fine dense Lucas-Kanade with iterative warping.
//!
//! Per pixel, the Gaussian-weighted structure tensor of the symmetric
//! gradient `(grad a + grad b_warped) / 2` is solved against the temporal
//! difference `b_warped - a`, with a small Tikhonov term so that textureless
//! pixels fall back to zero update. All filters are symmetric, so the
//! estimator is mirror-equivariant up to rounding.

use super::{FlowEstimator, FlowField};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLk {
    /// Maximum number of pyramid levels, finest included.
    pub max_levels: usize,
    /// A level is only added while both sides stay at least this large.
    pub min_size: usize,
    pub iterations: usize,
    /// Standard deviation of the aggregation window, in pixels of each level.
    pub window_sigma: f32,
    pub regularization: f32,
    /// Largest per-iteration update, in pixels.
    pub max_step: f32,
}

impl Default for PyramidLk {
    fn default() -> Self {
        Self { max_levels: 4, min_size: 8, iterations: 6, window_sigma: 2.0, regularization: 1e-5, max_step: 1.0 }
    }
}

#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    d: Vec<f32>,
}

impl Plane {
    fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, d: vec![0.0; h * w] }
    }

    fn from_gray(img: &Image) -> Self {
        let g = img.to_gray();
        Self { h: g.height(), w: g.width(), d: g.into_data() }
    }

    #[inline]
    fn at(&self, y: usize, x: usize) -> f32 {
        self.d[y * self.w + x]
    }

    #[inline]
    fn sample(&self, y: f32, x: f32) -> f32 {
        let yc = y.clamp(0.0, (self.h - 1) as f32);
        let xc = x.clamp(0.0, (self.w - 1) as f32);
        let y0 = yc.floor() as usize;
        let x0 = xc.floor() as usize;
        let y1 = (y0 + 1).min(self.h - 1);
        let x1 = (x0 + 1).min(self.w - 1);
        let fy = yc - y0 as f32;
        let fx = xc - x0 as f32;
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
        let bot = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Separable convolution with a symmetric kernel, clamped borders.
    fn convolve(&self, kernel: &[f32]) -> Plane {
        let r = (kernel.len() / 2) as isize;
        let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
        let mut tmp = Plane::zeros(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let mut s = 0.0;
                for (k, wk) in kernel.iter().enumerate() {
                    s += wk * self.at(y, clamp(x as isize + k as isize - r, self.w));
                }
                tmp.d[y * self.w + x] = s;
            }
        }
        let mut out = Plane::zeros(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let mut s = 0.0;
                for (k, wk) in kernel.iter().enumerate() {
                    s += wk * tmp.at(clamp(y as isize + k as isize - r, self.h), x);
                }
                out.d[y * self.w + x] = s;
            }
        }
        out
    }

    /// Blur then 2x2 box average.
    fn downsample(&self) -> Plane {
        let b = self.convolve(&[0.25, 0.5, 0.25]);
        let (h, w) = (self.h / 2, self.w / 2);
        let mut out = Plane::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                out.d[y * w + x] = 0.25
                    * (b.at(2 * y, 2 * x)
                        + b.at(2 * y, 2 * x + 1)
                        + b.at(2 * y + 1, 2 * x)
                        + b.at(2 * y + 1, 2 * x + 1));
            }
        }
        out
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

impl PyramidLk {
    fn pyramid(&self, base: Plane) -> Vec<Plane> {
        let mut levels = vec![base];
        while levels.len() < self.max_levels {
            let last = levels.last().unwrap();
            if last.h / 2 < self.min_size || last.w / 2 < self.min_size {
                break;
            }
            let next = last.downsample();
            levels.push(next);
        }
        levels
    }

    fn refine(&self, a: &Plane, b: &Plane, u: &mut Plane, v: &mut Plane, window: &[f32]) {
        let (h, w) = (a.h, a.w);
        for _ in 0..self.iterations {
            let mut warped = Plane::zeros(h, w);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    warped.d[i] = b.sample(y as f32 + v.d[i], x as f32 + u.d[i]);
                }
            }
            let mut ixx = Plane::zeros(h, w);
            let mut ixy = Plane::zeros(h, w);
            let mut iyy = Plane::zeros(h, w);
            let mut ixt = Plane::zeros(h, w);
            let mut iyt = Plane::zeros(h, w);
            let avg = |y: usize, x: usize| 0.5 * (a.at(y, x) + warped.at(y, x));
            for y in 0..h {
                let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
                for x in 0..w {
                    let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
                    let gx = if xp > xm { (avg(y, xp) - avg(y, xm)) / (xp - xm) as f32 } else { 0.0 };
                    let gy = if yp > ym { (avg(yp, x) - avg(ym, x)) / (yp - ym) as f32 } else { 0.0 };
                    let i = y * w + x;
                    let it = warped.d[i] - a.d[i];
                    ixx.d[i] = gx * gx;
                    ixy.d[i] = gx * gy;
                    iyy.d[i] = gy * gy;
                    ixt.d[i] = gx * it;
                    iyt.d[i] = gy * it;
                }
            }
            let (ixx, ixy, iyy, ixt, iyt) = (
                ixx.convolve(window),
                ixy.convolve(window),
                iyy.convolve(window),
                ixt.convolve(window),
                iyt.convolve(window),
            );
            let r = self.regularization;
            for i in 0..h * w {
                let (a11, a12, a22) = (ixx.d[i] + r, ixy.d[i], iyy.d[i] + r);
                let det = a11 * a22 - a12 * a12;
                if det <= 0.0 || !det.is_finite() {
                    continue;
                }
                let (b1, b2) = (-ixt.d[i], -iyt.d[i]);
                let du = (a22 * b1 - a12 * b2) / det;
                let dv = (a11 * b2 - a12 * b1) / det;
                let s = self.max_step;
                u.d[i] = (u.d[i] + du.clamp(-s, s)).clamp(-(w as f32), w as f32);
                v.d[i] = (v.d[i] + dv.clamp(-s, s)).clamp(-(h as f32), h as f32);
            }
        }
    }
}

impl FlowEstimator for PyramidLk {
    fn estimate(&self, frame_a: &Image, frame_b: &Image) -> Result<FlowField> {
        if frame_a.shape() != frame_b.shape() {
            return Err(Error::Shape(format!("frames {:?} and {:?}", frame_a.shape(), frame_b.shape())));
        }
        let (h, w) = (frame_a.height(), frame_a.width());
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("frame {h}x{w} too small for flow")));
        }
        let pa = self.pyramid(Plane::from_gray(frame_a));
        let pb = self.pyramid(Plane::from_gray(frame_b));
        let window = gaussian_kernel(self.window_sigma);

        let coarsest = pa.len() - 1;
        let mut u = Plane::zeros(pa[coarsest].h, pa[coarsest].w);
        let mut v = u.clone();
        for level in (0..pa.len()).rev() {
            let (a, b) = (&pa[level], &pb[level]);
            if level != coarsest {
                let (nu, nv) = (Plane::zeros(a.h, a.w), Plane::zeros(a.h, a.w));
                let (mut nu, mut nv) = (nu, nv);
                let sy = u.h as f32 / a.h as f32;
                let sx = u.w as f32 / a.w as f32;
                for y in 0..a.h {
                    for x in 0..a.w {
                        let cy = (y as f32 + 0.5) * sy - 0.5;
                        let cx = (x as f32 + 0.5) * sx - 0.5;
                        nu.d[y * a.w + x] = u.sample(cy, cx) / sx;
                        nv.d[y * a.w + x] = v.sample(cy, cx) / sy;
                    }
                }
                u = nu;
                v = nv;
            }
            self.refine(a, b, &mut u, &mut v, &window);
        }
        Ok(FlowField::from_fn(h, w, |y, x| (u.at(y, x), v.at(y, x))))
    }
}
