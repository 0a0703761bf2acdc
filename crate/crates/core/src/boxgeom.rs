//! Bounding-box geometry for guided cropping.
//!
//! Boxes live in original-image pixel coordinates and stay real-valued until
//! a backend rounds them at crop time. Every operation here is a pure function
//! of its inputs; randomized box generation takes an explicit seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter(format!(
                "image dims must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn square(side: u32) -> Result<Self> {
        Self::new(side, side)
    }

    /// Side of the largest square that fits inside the image.
    pub fn short_side(&self) -> f64 {
        self.width.min(self.height) as f64
    }

    pub fn full_box(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width as f64, self.height as f64)
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }
}

/// Axis-aligned box as `(min_x, min_y, max_x, max_y)`. Serialized as a
/// four-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.min_x, b.min_y, b.max_x, b.max_y]
    }
}

impl BBox {
    pub const fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self {
            min_x,
            min_y,
            max_x,
            max_y,
        }
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        [self.min_x, self.min_y, self.max_x, self.max_y]
            .iter()
            .all(|v| v.is_finite())
            && self.min_x <= self.max_x
            && self.min_y <= self.max_y
    }

    pub fn is_within(&self, dims: ImageDims) -> bool {
        self.is_valid()
            && self.min_x >= 0.0
            && self.min_y >= 0.0
            && self.max_x <= dims.width as f64
            && self.max_y <= dims.height as f64
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.min_x <= other.min_x
            && self.min_y <= other.min_y
            && self.max_x >= other.max_x
            && self.max_y >= other.max_y
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.max_x.min(other.max_x) - self.min_x.max(other.min_x);
        let h = self.max_y.min(other.max_y) - self.min_y.max(other.min_y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let b = BBox::new(
            self.min_x.max(other.min_x),
            self.min_y.max(other.min_y),
            self.max_x.min(other.max_x),
            self.max_y.min(other.max_y),
        );
        (b.max_x > b.min_x && b.max_y > b.min_y).then_some(b)
    }

    /// Clamp all edges into the image.
    pub fn clamp_to(&self, dims: ImageDims) -> BBox {
        let (w, h) = (dims.width as f64, dims.height as f64);
        let min_x = self.min_x.clamp(0.0, w);
        let min_y = self.min_y.clamp(0.0, h);
        BBox::new(
            min_x,
            min_y,
            self.max_x.clamp(min_x, w),
            self.max_y.clamp(min_y, h),
        )
    }

    /// Map a box expressed in the coordinate frame of `self` resized to
    /// `frame_side`×`frame_side` back into the coordinates `self` lives in.
    pub fn compose(&self, inner: &BBox, frame_side: f64) -> BBox {
        let sx = self.width() / frame_side;
        let sy = self.height() / frame_side;
        BBox::new(
            self.min_x + inner.min_x * sx,
            self.min_y + inner.min_y * sy,
            self.min_x + inner.max_x * sx,
            self.min_y + inner.max_y * sy,
        )
    }

    /// Inverse of [`BBox::compose`]: express `outer` in the frame of `self`
    /// resized to `frame_side`×`frame_side`.
    pub fn project(&self, outer: &BBox, frame_side: f64) -> BBox {
        let sx = frame_side / self.width();
        let sy = frame_side / self.height();
        BBox::new(
            (outer.min_x - self.min_x) * sx,
            (outer.min_y - self.min_y) * sy,
            (outer.max_x - self.min_x) * sx,
            (outer.max_y - self.min_y) * sy,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct MarginRatio(f64);

impl MarginRatio {
    pub const ZERO: MarginRatio = MarginRatio(0.0);
    pub const ONE: MarginRatio = MarginRatio(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::InvalidParameter(format!(
                "margin ratio must lie in [0, 1], got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for MarginRatio {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        MarginRatio::new(value)
    }
}

impl From<MarginRatio> for f64 {
    fn from(m: MarginRatio) -> Self {
        m.0
    }
}

/// Resize the `[lo, hi]` interval to `side`, growing (or shrinking) equally at
/// both ends, then shift it back inside `[0, limit]` if one end overflows.
fn fit_axis(lo: f64, hi: f64, side: f64, limit: f64) -> (f64, f64) {
    if side >= limit {
        return (0.0, limit);
    }
    let grow = (side - (hi - lo)) / 2.0;
    let (lo2, hi2) = (lo - grow, hi + grow);
    if lo2 < 0.0 {
        (0.0, side)
    } else if hi2 > limit {
        (limit - side, limit)
    } else {
        (lo2, hi2)
    }
}

/// Expand the shorter side of `bbox` about its center so the result is
/// square, capping the side at the image's short side and shifting the
/// square back into the image when it overflows.
pub fn square_adjust(bbox: &BBox, dims: ImageDims) -> BBox {
    let side = bbox.width().max(bbox.height()).min(dims.short_side());
    let (min_x, max_x) = fit_axis(bbox.min_x, bbox.max_x, side, dims.width as f64);
    let (min_y, max_y) = fit_axis(bbox.min_y, bbox.max_y, side, dims.height as f64);
    BBox::new(min_x, min_y, max_x, max_y)
}

/// Side of the α-margin box for a primary box of side `box_side` inside an
/// image whose (short) side is `image_side`.
pub fn margin_side(box_side: f64, image_side: f64, alpha: MarginRatio) -> f64 {
    let a = alpha.value();
    if a >= 1.0 {
        image_side
    } else {
        (box_side + a * (image_side - box_side)).min(image_side)
    }
}

/// Enlarge a square box to its α-margin box: the side becomes
/// `w_b + α (w − w_b)`, grown uniformly in every direction, with overflow at
/// one edge compensated by extending the opposite edge.
pub fn enlarge_margin(bbox: &BBox, dims: ImageDims, alpha: MarginRatio) -> BBox {
    if alpha.value() == 0.0 {
        return *bbox;
    }
    let box_side = bbox.width().max(bbox.height());
    let side = margin_side(box_side, dims.short_side(), alpha);
    let (min_x, max_x) = fit_axis(bbox.min_x, bbox.max_x, side, dims.width as f64);
    let (min_y, max_y) = fit_axis(bbox.min_y, bbox.max_y, side, dims.height as f64);
    BBox::new(min_x, min_y, max_x, max_y)
}

/// Margin ratios `k / (n_aug - 1)` for `k = 0..n_aug`.
pub fn maug_ratios(n_aug: usize) -> Result<Vec<MarginRatio>> {
    if n_aug < 2 {
        return Err(Error::InvalidParameter(format!(
            "multi-margin augmentation needs n_aug >= 2, got {n_aug}"
        )));
    }
    let denom = (n_aug - 1) as f64;
    (0..n_aug)
        .map(|k| MarginRatio::new(k as f64 / denom))
        .collect()
}

/// Multi-margin augmentation boxes around the primary box, ordered by
/// ascending margin ratio. The result is a nested chain.
pub fn maug_boxes(primary: &BBox, dims: ImageDims, n_aug: usize) -> Result<Vec<BBox>> {
    Ok(maug_ratios(n_aug)?
        .into_iter()
        .map(|alpha| enlarge_margin(primary, dims, alpha))
        .collect())
}

/// Random square crops with side uniform in `[β w, w]` and top-left corner
/// uniform over the placements that keep the crop inside the image.
pub fn raug_boxes(dims: ImageDims, n_aug: usize, beta: f64, seed: u64) -> Result<Vec<BBox>> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "random-crop beta must lie in (0, 1), got {beta}"
        )));
    }
    if n_aug == 0 {
        return Err(Error::InvalidParameter("n_aug must be >= 1".into()));
    }
    let w = dims.short_side();
    let (img_w, img_h) = (dims.width as f64, dims.height as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_aug)
        .map(|_| {
            let side = rng.gen_range(beta * w..=w);
            let x = rng.gen_range(0.0..=img_w - side);
            let y = rng.gen_range(0.0..=img_h - side);
            BBox::new(x, y, x + side, y + side)
        })
        .collect())
}

/// Box area over image area.
pub fn relative_object_size(bbox: &BBox, dims: ImageDims) -> f64 {
    bbox.area() / dims.area()
}

/// Binary object mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::InvalidInput(format!(
                "mask data has {} entries, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }
}

/// Tight bounds of the labelled pixels, as pixel indices.
pub fn box_from_mask(mask: &Mask) -> Result<BBox> {
    let mut bounds: Option<(u32, u32, u32, u32)> = None;
    for (i, _) in mask.data.iter().enumerate().filter(|(_, &on)| on) {
        let x = i as u32 % mask.width;
        let y = i as u32 / mask.width;
        bounds = Some(match bounds {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    let (x0, y0, x1, y1) = bounds.ok_or(Error::NoObject)?;
    Ok(BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn d224() -> ImageDims {
        ImageDims::square(224).unwrap()
    }

    fn assert_box_eq(a: BBox, b: BBox) {
        let (a, b): ([f64; 4], [f64; 4]) = (a.into(), b.into());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn square_adjust_examples() {
        let b = BBox::new(10.0, 10.0, 50.0, 50.0);
        assert_eq!(square_adjust(&b, d224()), b);
        assert_eq!(
            square_adjust(&BBox::new(10.0, 20.0, 50.0, 40.0), d224()),
            BBox::new(10.0, 10.0, 50.0, 50.0)
        );
        assert_eq!(
            square_adjust(&BBox::new(0.0, 200.0, 40.0, 224.0), d224()),
            BBox::new(0.0, 184.0, 40.0, 224.0)
        );
    }

    #[test]
    fn square_adjust_caps_at_short_side() {
        let dims = ImageDims::new(300, 200).unwrap();
        let out = square_adjust(&BBox::new(10.0, 50.0, 290.0, 100.0), dims);
        assert_abs_diff_eq!(out.width(), 200.0);
        assert_abs_diff_eq!(out.height(), 200.0);
        assert!(out.is_within(dims));
        assert_abs_diff_eq!((out.min_x + out.max_x) / 2.0, 150.0);
    }

    #[test]
    fn enlarge_margin_examples() {
        let b = BBox::new(62.0, 62.0, 162.0, 162.0);
        assert_eq!(enlarge_margin(&b, d224(), MarginRatio::ZERO), b);
        assert_eq!(
            enlarge_margin(&b, d224(), MarginRatio::ONE),
            d224().full_box()
        );
        let alpha = MarginRatio::new(0.2).unwrap();
        assert_box_eq(
            enlarge_margin(&b, d224(), alpha),
            BBox::new(49.6, 49.6, 174.4, 174.4),
        );
        assert_box_eq(
            enlarge_margin(&BBox::new(174.0, 174.0, 224.0, 224.0), d224(), alpha),
            BBox::new(139.2, 139.2, 224.0, 224.0),
        );
    }

    #[test]
    fn enlarge_margin_rectangular_image_uses_short_side() {
        let dims = ImageDims::new(320, 200).unwrap();
        let b = BBox::new(100.0, 50.0, 150.0, 100.0);
        let full = enlarge_margin(&b, dims, MarginRatio::ONE);
        assert_abs_diff_eq!(full.width(), 200.0);
        assert_eq!((full.min_y, full.max_y), (0.0, 200.0));
        assert!(full.contains(&b));
    }

    #[test]
    fn margin_ratio_bounds() {
        assert!(MarginRatio::new(-0.01).is_err());
        assert!(MarginRatio::new(1.01).is_err());
        assert!(MarginRatio::new(f64::NAN).is_err());
        assert!(serde_json::from_str::<MarginRatio>("1.5").is_err());
    }

    #[test]
    fn maug_examples() {
        let ratios: Vec<f64> = maug_ratios(11)
            .unwrap()
            .into_iter()
            .map(f64::from)
            .collect();
        let expected: Vec<f64> = (0..11).map(|k| k as f64 / 10.0).collect();
        assert_eq!(ratios, expected);

        let b = BBox::new(62.0, 62.0, 162.0, 162.0);
        let two = maug_boxes(&b, d224(), 2).unwrap();
        assert_eq!(two, vec![b, d224().full_box()]);

        let full = maug_boxes(&d224().full_box(), d224(), 11).unwrap();
        assert!(full.iter().all(|x| *x == d224().full_box()));

        assert!(matches!(
            maug_boxes(&b, d224(), 1),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn raug_examples() {
        let boxes = raug_boxes(d224(), 64, 0.9, 3).unwrap();
        assert_eq!(boxes.len(), 64);
        for b in &boxes {
            assert!(b.width() >= 201.6 && b.width() <= 224.0);
            assert_abs_diff_eq!(b.width(), b.height(), epsilon = 1e-12);
            assert!(b.is_within(d224()));
        }
        assert_eq!(boxes, raug_boxes(d224(), 64, 0.9, 3).unwrap());
        assert_ne!(boxes, raug_boxes(d224(), 64, 0.9, 4).unwrap());

        for b in raug_boxes(d224(), 16, 0.9999, 9).unwrap() {
            let full: [f64; 4] = d224().full_box().into();
            let got: [f64; 4] = b.into();
            for (x, y) in got.iter().zip(full.iter()) {
                assert!((x - y).abs() < 0.1);
            }
        }
        assert!(raug_boxes(d224(), 4, 1.0, 0).is_err());
        assert!(raug_boxes(d224(), 4, 0.0, 0).is_err());
    }

    #[test]
    fn relative_size_examples() {
        assert_eq!(relative_object_size(&d224().full_box(), d224()), 1.0);
        assert_eq!(
            relative_object_size(&BBox::new(7.0, 9.0, 7.0, 9.0), d224()),
            0.0
        );
        let d100 = ImageDims::square(100).unwrap();
        assert_abs_diff_eq!(
            relative_object_size(&BBox::new(10.0, 20.0, 50.0, 60.0), d100),
            0.16,
            epsilon = 1e-12
        );
    }

    #[test]
    fn mask_bounds() {
        let single = Mask::from_fn(10, 10, |x, y| x == 5 && y == 7);
        assert_eq!(
            box_from_mask(&single).unwrap(),
            BBox::new(5.0, 7.0, 5.0, 7.0)
        );

        let rect = Mask::from_fn(12, 12, |x, y| (2..=6).contains(&x) && (3..=9).contains(&y));
        assert_eq!(box_from_mask(&rect).unwrap(), BBox::new(2.0, 3.0, 6.0, 9.0));

        let ell = Mask::from_fn(8, 8, |x, y| (x == 0 && y <= 4) || (y == 4 && x <= 4));
        assert_eq!(box_from_mask(&ell).unwrap(), BBox::new(0.0, 0.0, 4.0, 4.0));

        let empty = Mask::from_fn(4, 4, |_, _| false);
        assert!(matches!(box_from_mask(&empty), Err(Error::NoObject)));
    }

    #[test]
    fn bbox_serializes_as_array() {
        let b = BBox::new(1.0, 2.5, 3.0, 4.0);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.5,3.0,4.0]");
    }
}
