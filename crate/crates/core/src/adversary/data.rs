use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::render::PatchSpec;

/// One training image with its estimated depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealImage {
    /// `[3, h, w]` in `[0, 1]`.
    pub rgb: Vec<f64>,
    /// `[h, w]` estimated depth normalized into `[-1, 1]`.
    pub depth: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub class: usize,
    /// Precomputed teacher features, used instead of the built-in teacher.
    pub features: Option<Vec<f64>>,
}

impl RealImage {
    pub fn validate(&self) -> Result<()> {
        let n = self.h * self.w;
        if self.h == 0 || self.w == 0 || self.rgb.len() != 3 * n || self.depth.len() != n {
            return Err(shape_err("RealImage", format!("{}x{} with {} rgb and {} depth values", self.h, self.w, self.rgb.len(), self.depth.len())));
        }
        if self.rgb.iter().chain(&self.depth).any(|v| !v.is_finite()) {
            return Err(invalid("real image contains non-finite values"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RealDataset {
    pub images: Vec<RealImage>,
    pub n_classes: usize,
}

impl RealDataset {
    pub fn new(images: Vec<RealImage>, n_classes: usize) -> Result<Self> {
        for im in &images {
            im.validate()?;
            if im.class >= n_classes {
                return Err(invalid(format!("class {} out of range for {n_classes} classes", im.class)));
            }
        }
        let dims: Option<usize> = images.first().and_then(|i| i.features.as_ref().map(|f| f.len()));
        if images.iter().any(|i| i.features.as_ref().map(|f| f.len()) != dims) {
            return Err(invalid("precomputed features must be present for all images with one dimension"));
        }
        Ok(Self { images, n_classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Bilinear sample of a `[c, h, w]` image at continuous pixel coordinates
/// (pixel centers at integer + 0.5), clamped at the border.
fn bilinear(img: &[f64], c: usize, h: usize, w: usize, y: f64, x: f64, out: &mut [f64]) {
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (fx as usize, fy as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (a, b) = (fx - x0 as f64, fy - y0 as f64);
    for (ch, o) in out.iter_mut().enumerate().take(c) {
        let p = &img[ch * h * w..(ch + 1) * h * w];
        *o = (1.0 - a) * (1.0 - b) * p[y0 * w + x0] + a * (1.0 - b) * p[y0 * w + x1] + (1.0 - a) * b * p[y1 * w + x0] + a * b * p[y1 * w + x1];
    }
}

/// Resamples the patch region of an image into `[4, ph, pw]` (RGB then depth),
/// using the same pixel-center convention as ray generation.
pub fn extract_patch(im: &RealImage, patch: &PatchSpec) -> Result<Vec<f64>> {
    patch.validate()?;
    let (ph, pw) = (patch.h, patch.w);
    let n = ph * pw;
    let mut out = alloc::vec![0.0; 4 * n];
    let mut px = [0.0; 3];
    for i in 0..ph {
        for j in 0..pw {
            let u = patch.dx + patch.scale * (j as f64 + 0.5) / pw as f64;
            let v = patch.dy + patch.scale * (i as f64 + 0.5) / ph as f64;
            let (x, y) = (u * im.w as f64, v * im.h as f64);
            bilinear(&im.rgb, 3, im.h, im.w, y, x, &mut px);
            for ch in 0..3 {
                out[ch * n + i * pw + j] = px[ch];
            }
            bilinear(&im.depth, 1, im.h, im.w, y, x, &mut px[..1]);
            out[3 * n + i * pw + j] = px[0];
        }
    }
    Ok(out)
}
