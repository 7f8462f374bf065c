//! Aspect-preserving letterbox resize, normalisation and horizontal flip.

use scb_tensor::Tensor;

use super::image::RgbImage;
use crate::box_ops::Box4;

/// Similarity map from source pixels to a `size x size` canvas:
/// `x' = x * scale + pad_x`, `y' = y * scale + pad_y`, with symmetric padding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub size: usize,
}

impl Letterbox {
    pub fn new(width: usize, height: usize, size: usize) -> Self {
        let s = size as f64;
        let scale = (s / width as f64).min(s / height as f64);
        Letterbox { scale, pad_x: (s - width as f64 * scale) / 2.0, pad_y: (s - height as f64 * scale) / 2.0, size }
    }

    /// Pixel `[x, y, w, h]` in the source image to normalised cxcywh on the canvas.
    pub fn to_normalized(&self, xywh: [f64; 4]) -> Box4 {
        let s = self.size as f64;
        let [x, y, w, h] = xywh;
        let (x1, y1) = (x * self.scale + self.pad_x, y * self.scale + self.pad_y);
        let (cw, ch) = (w * self.scale, h * self.scale);
        [(x1 + cw / 2.0) / s, (y1 + ch / 2.0) / s, cw / s, ch / s]
    }

    /// Inverse of [`Letterbox::to_normalized`].
    pub fn to_pixels(&self, cxcywh: Box4) -> [f64; 4] {
        let s = self.size as f64;
        let [cx, cy, w, h] = cxcywh;
        let (cw, ch) = (w * s, h * s);
        let (x1, y1) = (cx * s - cw / 2.0, cy * s - ch / 2.0);
        [(x1 - self.pad_x) / self.scale, (y1 - self.pad_y) / self.scale, cw / self.scale, ch / self.scale]
    }

    /// Normalised cxcywh on the canvas to source-pixel xyxy.
    pub fn to_pixel_xyxy(&self, cxcywh: Box4) -> Box4 {
        let [x, y, w, h] = self.to_pixels(cxcywh);
        [x, y, x + w, y + h]
    }
}

/// Per-channel `(value - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalize {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

/// Resizes `img` into the letterbox canvas with bilinear sampling and normalises it.
/// Padding takes the mean colour, which is 0 after normalisation.
pub fn letterbox_image(img: &RgbImage, lb: &Letterbox, norm: &Normalize) -> Tensor<f32> {
    let n = lb.size;
    let (w, h) = (img.width, img.height);
    let (x_hi, y_hi) = (lb.pad_x + w as f64 * lb.scale, lb.pad_y + h as f64 * lb.scale);
    let mut out = vec![0f32; 3 * n * n];
    let px = |x: usize, y: usize, c: usize| img.data[(y * w + x) * 3 + c] as f32 / 255.0;
    for oy in 0..n {
        let cy = oy as f64 + 0.5;
        if cy < lb.pad_y || cy >= y_hi {
            continue;
        }
        let sy = ((cy - lb.pad_y) / lb.scale - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (sy.floor() as usize, (sy - sy.floor()) as f32);
        let y1 = (y0 + 1).min(h - 1);
        for ox in 0..n {
            let cx = ox as f64 + 0.5;
            if cx < lb.pad_x || cx >= x_hi {
                continue;
            }
            let sx = ((cx - lb.pad_x) / lb.scale - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (sx.floor() as usize, (sx - sx.floor()) as f32);
            let x1 = (x0 + 1).min(w - 1);
            for c in 0..3 {
                let top = px(x0, y0, c) * (1.0 - fx) + px(x1, y0, c) * fx;
                let bot = px(x0, y1, c) * (1.0 - fx) + px(x1, y1, c) * fx;
                let v = top * (1.0 - fy) + bot * fy;
                out[(c * n + oy) * n + ox] = (v - norm.mean[c]) / norm.std[c];
            }
        }
    }
    Tensor::new([3, n, n], out).expect("letterbox canvas")
}

/// Mirrors a `[C, H, W]` image left to right.
pub fn flip_image(img: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let src = img.data();
    Tensor::from_fn([c, h, w], |i| {
        let x = i % w;
        src[i - x + (w - 1 - x)]
    })
}

/// Mirrors a normalised cxcywh box.
pub fn flip_box(b: Box4) -> Box4 {
    [1.0 - b[0], b[1], b[2], b[3]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wide_image_letterbox() {
        let lb = Letterbox::new(100, 50, 128);
        assert_eq!((lb.scale, lb.pad_x, lb.pad_y), (1.28, 0.0, 32.0));
        let b = lb.to_normalized([10.0, 10.0, 20.0, 20.0]);
        let want = [0.2, 0.45, 0.2, 0.2];
        for (x, y) in b.iter().zip(want) {
            assert!((x - y).abs() < 1e-12, "{b:?}");
        }
        let back = lb.to_pixels(b);
        for (x, y) in back.iter().zip([10.0, 10.0, 20.0, 20.0]) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn pad_is_zero_after_normalisation() {
        let norm = Normalize { mean: [0.5, 0.5, 0.5], std: [0.25, 0.25, 0.25] };
        let img = RgbImage::new(4, 2, [255, 255, 255]);
        let t = letterbox_image(&img, &Letterbox::new(4, 2, 8), &norm);
        // rows 0,1 and 6,7 are padding; rows 2..6 carry white = (1 - 0.5)/0.25
        assert_eq!(t.get(&[0, 0, 3]), 0.0);
        assert_eq!(t.get(&[1, 2, 0]), 2.0);
        assert_eq!(t.get(&[2, 5, 7]), 2.0);
        assert_eq!(t.get(&[2, 6, 7]), 0.0);
    }

    #[test]
    fn flip_is_an_involution() {
        let t = Tensor::from_fn([2, 3, 4], |i| i as f32);
        assert_eq!(flip_image(&flip_image(&t)), t);
        assert_eq!(flip_image(&t).get(&[1, 2, 0]), t.get(&[1, 2, 3]));
        let b = [0.3, 0.4, 0.2, 0.1];
        assert!((flip_box(flip_box(b))[0] - 0.3).abs() < 1e-15);
    }
}
