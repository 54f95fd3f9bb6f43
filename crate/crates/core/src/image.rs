//! Minimal floating-point raster used for frames, flow renderings and
//! network inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `height x width x channels` image, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!("{} values for a {height}x{width}x{channels} image", data.len())));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Channel mean, as a single-channel image.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let inv = 1.0 / self.channels as f32;
        let data = self.data.chunks_exact(self.channels).map(|px| px.iter().sum::<f32>() * inv).collect();
        Image { height: self.height, width: self.width, channels: 1, data }
    }

    /// Replicates a single-channel image to three channels; three-channel
    /// images are returned unchanged.
    pub fn to_rgb(&self) -> Result<Image> {
        match self.channels {
            3 => Ok(self.clone()),
            1 => Ok(Image::from_fn(self.height, self.width, 3, |y, x, _| self.get(y, x, 0))),
            c => Err(Error::Shape(format!("cannot expand {c}-channel image to RGB"))),
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| self.get(y, self.width - 1 - x, c))
    }

    /// Bilinear sample at continuous pixel coordinates, clamped to the border.
    #[inline]
    pub fn sample(&self, y: f32, x: f32, c: usize) -> f32 {
        let yc = y.clamp(0.0, (self.height - 1) as f32);
        let xc = x.clamp(0.0, (self.width - 1) as f32);
        let y0 = yc.floor() as usize;
        let x0 = xc.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = yc - y0 as f32;
        let fx = xc - x0 as f32;
        let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
        let bot = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Bilinear resize of the window `[y0, y0+h) x [x0, x0+w)` (in source
    /// pixels, may be fractional) to `out_h x out_w`, pixel-center aligned.
    pub fn resize_region(&self, y0: f32, x0: f32, h: f32, w: f32, out_h: usize, out_w: usize) -> Image {
        let sy = h / out_h as f32;
        let sx = w / out_w as f32;
        Image::from_fn(out_h, out_w, self.channels, |y, x, c| {
            let src_y = y0 + (y as f32 + 0.5) * sy - 0.5;
            let src_x = x0 + (x as f32 + 0.5) * sx - 0.5;
            self.sample(src_y, src_x, c)
        })
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        self.resize_region(0.0, 0.0, self.height as f32, self.width as f32, out_h, out_w)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn channel_mean(&self, c: usize) -> f32 {
        let n = self.height * self.width;
        self.data.iter().skip(c).step_by(self.channels).sum::<f32>() / n as f32
    }
}
