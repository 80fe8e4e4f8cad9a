//! 4D light-field container, sub-aperture views, EPI slicing and patch
//! extraction.
//!
//! The light field `L(u, v, x, y)` is stored in one contiguous buffer in
//! `(v, u, y, x, c)` index order, so a horizontal EPI is a strided view and
//! view images can be ingested u-major straight from disk. Intensities are
//! normalized reals in `[0, 1]`; 8-bit input is divided by 255 at load time.

use crate::error::{LfError, Result};

/// Border handling when a patch window would leave the EPI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BorderPolicy {
    /// Out-of-range spatial samples repeat the edge column.
    Replicate,
    /// Raise an error if the window exceeds the EPI.
    Reject,
}

/// A 2-D image, row-major `(y, x, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Image { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

/// Which angular axis an EPI slices along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpiOrientation {
    /// Fixed row view `v0` and row `y_i`: angular axis is `u`, spatial axis `x`.
    Horizontal,
    /// Fixed column view `u0` and column `x_i`: angular axis is `v`, spatial axis `y`.
    Vertical,
}

/// A 2-D angular x spatial slice of the light field, stored `(a, s, c)`
/// row-major. Row `a` is one view; column `s` is one spatial position.
#[derive(Debug, Clone, PartialEq)]
pub struct Epi {
    pub orientation: EpiOrientation,
    /// Angular extent: number of views along the slice.
    pub angular: usize,
    /// Spatial extent in pixels.
    pub spatial: usize,
    pub channels: usize,
    /// The fixed angular coordinate (`v0` for horizontal, `u0` for vertical).
    pub fixed_view: usize,
    /// The fixed spatial coordinate (`y_i` for horizontal, `x_i` for vertical).
    pub fixed_coord: usize,
    pub data: Vec<f32>,
}

impl Epi {
    pub fn new(
        orientation: EpiOrientation,
        angular: usize,
        spatial: usize,
        channels: usize,
        fixed_view: usize,
        fixed_coord: usize,
    ) -> Self {
        Epi {
            orientation,
            angular,
            spatial,
            channels,
            fixed_view,
            fixed_coord,
            data: vec![0.0; angular * spatial * channels],
        }
    }

    /// Index of the center angular row (requires odd angular extent).
    #[inline]
    pub fn center_row(&self) -> usize {
        (self.angular - 1) / 2
    }

    #[inline]
    pub fn at(&self, a: usize, s: usize, c: usize) -> f32 {
        self.data[(a * self.spatial + s) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, a: usize, s: usize, c: usize, v: f32) {
        self.data[(a * self.spatial + s) * self.channels + c] = v;
    }

    /// Cut an `A x W` window centered at spatial index `center_s`.
    ///
    /// `w` must be odd. With [`BorderPolicy::Replicate`] the window may
    /// overhang the EPI and edge columns repeat; with [`BorderPolicy::Reject`]
    /// an overhanging window is an error.
    pub fn extract_patch(&self, center_s: usize, w: usize, border: BorderPolicy) -> Result<EpiPatch> {
        if w % 2 == 0 || w == 0 {
            return Err(LfError::Argument(format!("patch width must be odd, got {w}")));
        }
        if center_s >= self.spatial {
            return Err(LfError::Range(format!(
                "patch center {center_s} outside EPI of spatial extent {}",
                self.spatial
            )));
        }
        let half = (w - 1) / 2;
        let lo = center_s as isize - half as isize;
        let hi = center_s as isize + half as isize;
        let overhangs = lo < 0 || hi >= self.spatial as isize;
        if overhangs && border == BorderPolicy::Reject {
            return Err(LfError::Border(format!(
                "window [{lo}, {hi}] exceeds [0, {}) at center {center_s}",
                self.spatial
            )));
        }
        let mut data = Vec::with_capacity(self.angular * w * self.channels);
        for a in 0..self.angular {
            for col in lo..=hi {
                let s = col.clamp(0, self.spatial as isize - 1) as usize;
                for c in 0..self.channels {
                    data.push(self.at(a, s, c));
                }
            }
        }
        let center = match self.orientation {
            EpiOrientation::Horizontal => (center_s, self.fixed_coord),
            EpiOrientation::Vertical => (self.fixed_coord, center_s),
        };
        Ok(EpiPatch {
            orientation: self.orientation,
            height: self.angular,
            width: w,
            channels: self.channels,
            center,
            gt_disparity: None,
            replicated: overhangs,
            data,
        })
    }

    /// View the whole EPI as a patch (odd spatial extent required).
    pub fn to_patch(&self, gt_disparity: Option<f32>) -> Result<EpiPatch> {
        if self.spatial % 2 == 0 {
            return Err(LfError::Argument(format!(
                "EPI spatial extent {} is even; extract an odd window instead",
                self.spatial
            )));
        }
        let mut p = self.extract_patch((self.spatial - 1) / 2, self.spatial, BorderPolicy::Reject)?;
        p.gt_disparity = gt_disparity;
        Ok(p)
    }
}

/// An `H x W x C` window cut from an EPI, centered on a scene pixel.
///
/// `H` equals the EPI's angular extent; column `(W-1)/2` sits on the center
/// pixel. The patch optionally carries the ground-truth disparity of its
/// center pixel in pixels per view step.
#[derive(Debug, Clone, PartialEq)]
pub struct EpiPatch {
    pub orientation: EpiOrientation,
    /// Angular height `H`.
    pub height: usize,
    /// Spatial width `W` (odd).
    pub width: usize,
    pub channels: usize,
    /// Center pixel `(x, y)` in center-view coordinates.
    pub center: (usize, usize),
    /// Ground-truth disparity at the center pixel, pixels per view step.
    pub gt_disparity: Option<f32>,
    /// True when the window used edge replication.
    pub replicated: bool,
    pub data: Vec<f32>,
}

impl EpiPatch {
    #[inline]
    pub fn at(&self, a: usize, s: usize, c: usize) -> f32 {
        self.data[(a * self.width + s) * self.channels + c]
    }

    /// Index of the center angular row `(H-1)/2`.
    #[inline]
    pub fn center_row(&self) -> usize {
        (self.height - 1) / 2
    }

    /// Index of the center spatial column `(W-1)/2`.
    #[inline]
    pub fn center_col(&self) -> usize {
        (self.width - 1) / 2
    }
}

/// Per-pixel disparity in pixels per view step, plus a validity mask.
///
/// The mask marks pixels whose value is meaningful for evaluation: for
/// inference results that is the interior band where the full patch fit
/// without border replication.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub mask: Vec<bool>,
}

impl DisparityMap {
    pub fn new(height: usize, width: usize) -> Self {
        DisparityMap {
            height,
            width,
            values: vec![0.0; height * width],
            mask: vec![false; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn masked(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32, valid: bool) {
        self.values[y * self.width + x] = v;
        self.mask[y * self.width + x] = valid;
    }

    /// Mask selecting pixels at least (`margin_x`, `margin_y`) away from the
    /// image border.
    pub fn interior_mask(height: usize, width: usize, margin_x: usize, margin_y: usize) -> Vec<bool> {
        let mut mask = vec![false; height * width];
        for y in margin_y..height.saturating_sub(margin_y) {
            for x in margin_x..width.saturating_sub(margin_x) {
                mask[y * width + x] = true;
            }
        }
        mask
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// 4D light field `L(u, v, x, y)` with `C` color channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LightField4D {
    views_u: usize,
    views_v: usize,
    /// Spatial width X.
    width: usize,
    /// Spatial height Y.
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl LightField4D {
    pub fn new(views_u: usize, views_v: usize, width: usize, height: usize, channels: usize) -> Result<Self> {
        if views_u == 0 || views_v == 0 {
            return Err(LfError::Argument("angular extents must be >= 1".into()));
        }
        if width == 0 || height == 0 {
            return Err(LfError::Argument("spatial extents must be >= 1".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(LfError::Argument(format!("channel count must be 1 or 3, got {channels}")));
        }
        Ok(LightField4D {
            views_u,
            views_v,
            width,
            height,
            channels,
            data: vec![0.0; views_u * views_v * width * height * channels],
        })
    }

    /// Assemble from view images in `(v, u)` order (u varies fastest).
    pub fn from_views(views: &[Image], views_u: usize, views_v: usize) -> Result<Self> {
        if views.len() != views_u * views_v {
            return Err(LfError::Argument(format!(
                "expected {} views, got {}",
                views_u * views_v,
                views.len()
            )));
        }
        let first = &views[0];
        let mut lf = LightField4D::new(views_u, views_v, first.width, first.height, first.channels)?;
        for (i, img) in views.iter().enumerate() {
            if img.width != first.width || img.height != first.height || img.channels != first.channels {
                return Err(LfError::Argument(format!(
                    "view {i} has dimensions {}x{}x{}, expected {}x{}x{}",
                    img.width, img.height, img.channels, first.width, first.height, first.channels
                )));
            }
            let (v, u) = (i / views_u, i % views_u);
            for y in 0..lf.height {
                for x in 0..lf.width {
                    for c in 0..lf.channels {
                        lf.set(u, v, x, y, c, img.at(y, x, c));
                    }
                }
            }
        }
        Ok(lf)
    }

    pub fn views_u(&self) -> usize {
        self.views_u
    }

    pub fn views_v(&self) -> usize {
        self.views_v
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Center view index `u0 = (U-1)/2`. Integer only for odd U; callers that
    /// need a center view must check [`Self::has_center_view`].
    pub fn u0(&self) -> usize {
        (self.views_u - 1) / 2
    }

    /// Center view index `v0 = (V-1)/2`.
    pub fn v0(&self) -> usize {
        (self.views_v - 1) / 2
    }

    pub fn has_center_view(&self) -> bool {
        self.views_u % 2 == 1 && self.views_v % 2 == 1
    }

    #[inline]
    fn idx(&self, u: usize, v: usize, x: usize, y: usize, c: usize) -> usize {
        ((((v * self.views_u) + u) * self.height + y) * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize, x: usize, y: usize, c: usize) -> f32 {
        self.data[self.idx(u, v, x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, x: usize, y: usize, c: usize, value: f32) {
        let i = self.idx(u, v, x, y, c);
        self.data[i] = value;
    }

    /// Raw sample buffer in `(v, u, y, x, c)` order.
    pub fn samples(&self) -> &[f32] {
        &self.data
    }

    pub fn samples_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// The `(u, v)` slice as a 2-D image (row-major y then x).
    pub fn subaperture(&self, u: usize, v: usize) -> Result<Image> {
        if u >= self.views_u || v >= self.views_v {
            return Err(LfError::Range(format!(
                "view ({u}, {v}) outside {}x{} angular grid",
                self.views_u, self.views_v
            )));
        }
        let plane = self.channels * self.width * self.height;
        let start = (v * self.views_u + u) * plane;
        Ok(Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data[start..start + plane].to_vec(),
        })
    }

    /// The center view `(u0, v0)`.
    pub fn center_view(&self) -> Result<Image> {
        if !self.has_center_view() {
            return Err(LfError::Argument(format!(
                "no center view for even angular extents {}x{}",
                self.views_u, self.views_v
            )));
        }
        self.subaperture(self.u0(), self.v0())
    }

    /// Horizontal EPI `L(u, v0, x, y_i)` of the center row view.
    pub fn horizontal_epi(&self, y_i: usize) -> Result<Epi> {
        if self.views_v % 2 == 0 {
            return Err(LfError::Argument(format!(
                "horizontal EPI needs an odd V for the center row view, got {}",
                self.views_v
            )));
        }
        self.horizontal_epi_at(self.v0(), y_i)
    }

    /// Horizontal EPI of an arbitrary row view `v`.
    pub fn horizontal_epi_at(&self, v: usize, y_i: usize) -> Result<Epi> {
        if v >= self.views_v {
            return Err(LfError::Range(format!("row view {v} outside V={}", self.views_v)));
        }
        if y_i >= self.height {
            return Err(LfError::Range(format!("row {y_i} outside Y={}", self.height)));
        }
        let mut epi = Epi::new(
            EpiOrientation::Horizontal,
            self.views_u,
            self.width,
            self.channels,
            v,
            y_i,
        );
        let row = self.channels * self.width;
        for u in 0..self.views_u {
            let start = self.idx(u, v, 0, y_i, 0);
            epi.data[u * row..(u + 1) * row].copy_from_slice(&self.data[start..start + row]);
        }
        Ok(epi)
    }

    /// Vertical EPI `L(u0, v, x_i, y)` of the center column view.
    pub fn vertical_epi(&self, x_i: usize) -> Result<Epi> {
        if self.views_u % 2 == 0 {
            return Err(LfError::Argument(format!(
                "vertical EPI needs an odd U for the center column view, got {}",
                self.views_u
            )));
        }
        self.vertical_epi_at(self.u0(), x_i)
    }

    /// Vertical EPI of an arbitrary column view `u`.
    pub fn vertical_epi_at(&self, u: usize, x_i: usize) -> Result<Epi> {
        if u >= self.views_u {
            return Err(LfError::Range(format!("column view {u} outside U={}", self.views_u)));
        }
        if x_i >= self.width {
            return Err(LfError::Range(format!("column {x_i} outside X={}", self.width)));
        }
        let mut epi = Epi::new(
            EpiOrientation::Vertical,
            self.views_v,
            self.height,
            self.channels,
            u,
            x_i,
        );
        for v in 0..self.views_v {
            for y in 0..self.height {
                for c in 0..self.channels {
                    epi.set(v, y, c, self.at(u, v, x_i, y, c));
                }
            }
        }
        Ok(epi)
    }

    /// Swap the roles of `(u, x)` and `(v, y)`.
    pub fn transposed(&self) -> LightField4D {
        let mut out = LightField4D::new(self.views_v, self.views_u, self.height, self.width, self.channels)
            .expect("valid dims");
        for v in 0..self.views_v {
            for u in 0..self.views_u {
                for y in 0..self.height {
                    for x in 0..self.width {
                        for c in 0..self.channels {
                            out.set(v, u, y, x, c, self.at(u, v, x, y, c));
                        }
                    }
                }
            }
        }
        out
    }

    /// Snap every sample to the 8-bit grid `k/255` used by view files on disk.
    pub fn quantized_u8(&self) -> LightField4D {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
        }
        out
    }

    /// All samples finite and inside `[0, 1]`.
    pub fn is_valid(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }
}
