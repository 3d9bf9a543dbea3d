//! Axis-aligned box arithmetic shared by the focuser and the evaluator.
//!
//! Boxes are stored as `(left, top, width, height)` in continuous pixel
//! coordinates. Corner form is derived on demand.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box has non-finite coordinates ({x}, {y}, {w}, {h})")]
    NonFinite { x: f64, y: f64, w: f64, h: f64 },
    #[error("box width and height must be positive, got w={w} h={h}")]
    NonPositiveSize { w: f64, h: f64 },
    #[error("score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("frame dimensions must be positive, got {width}x{height}")]
    InvalidFrame { width: f64, height: f64 },
    #[error("box ({x}, {y}, {w}, {h}) does not intersect the {width}x{height} frame")]
    OutsideFrame {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        width: f64,
        height: f64,
    },
}

/// Slack in pixels used by [`BBox::contains`].
pub const EDGE_TOLERANCE: f64 = 1e-9;

/// An axis-aligned rectangle with an optional confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BBox {
    /// Builds a validated box without a score.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let b = Self {
            x,
            y,
            w,
            h,
            score: None,
        };
        b.validate()?;
        Ok(b)
    }

    /// Builds a validated box carrying a confidence score.
    pub fn scored(x: f64, y: f64, w: f64, h: f64, score: f64) -> Result<Self, GeometryError> {
        let b = Self {
            x,
            y,
            w,
            h,
            score: Some(score),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite {
                x: self.x,
                y: self.y,
                w: self.w,
                h: self.h,
            });
        }
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(GeometryError::NonPositiveSize {
                w: self.w,
                h: self.h,
            });
        }
        if let Some(s) = self.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(GeometryError::ScoreOutOfRange(s));
            }
        }
        Ok(())
    }

    pub fn with_score(mut self, score: Option<f64>) -> Self {
        self.score = score;
        self
    }

    #[inline]
    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    #[inline]
    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    #[inline]
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Corner form `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [self.x, self.y, self.right(), self.bottom()]
    }

    /// True if `other` lies entirely inside `self` (boundaries inclusive).
    /// Containment up to [`EDGE_TOLERANCE`], since edges derived from
    /// `x + w` can be off by one ulp.
    pub fn contains(&self, other: &BBox) -> bool {
        other.x >= self.x - EDGE_TOLERANCE
            && other.y >= self.y - EDGE_TOLERANCE
            && other.right() <= self.right() + EDGE_TOLERANCE
            && other.bottom() <= self.bottom() + EDGE_TOLERANCE
    }

    /// Area of the intersection, zero when the boxes are disjoint or only touch.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Total order used wherever a deterministic tie-break is needed:
    /// lexicographic on `(x, y, w, h)`.
    pub fn lex_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.x
            .total_cmp(&other.x)
            .then(self.y.total_cmp(&other.y))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

/// Frame resolution in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub width: f64,
    pub height: f64,
}

impl FrameSpec {
    /// Default panoramic keyframe resolution.
    pub const PANORAMIC: FrameSpec = FrameSpec {
        width: 3760.0,
        height: 480.0,
    };

    pub fn new(width: f64, height: f64) -> Result<Self, GeometryError> {
        if !(width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0) {
            return Err(GeometryError::InvalidFrame { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn bounds(&self) -> BBox {
        BBox {
            x: 0.0,
            y: 0.0,
            w: self.width,
            h: self.height,
            score: None,
        }
    }
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self::PANORAMIC
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let edge_area = |b: &BBox| (b.right() - b.x) * (b.bottom() - b.y);
    let union = edge_area(a) + edge_area(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Smallest box enclosing both inputs. The result carries no score.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    let x1 = a.x.min(b.x);
    let y1 = a.y.min(b.y);
    let x2 = a.right().max(b.right());
    let y2 = a.bottom().max(b.bottom());
    BBox {
        x: x1,
        y: y1,
        w: x2 - x1,
        h: y2 - y1,
        score: None,
    }
}

/// True iff the boxes share a region of strictly positive area.
pub fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.intersection_area(b) > 0.0
}

/// Intersects `b` with the frame rectangle. The score is kept.
pub fn clip_box(b: &BBox, frame: &FrameSpec) -> Result<BBox, GeometryError> {
    let x1 = b.x.max(0.0);
    let y1 = b.y.max(0.0);
    let x2 = b.right().min(frame.width);
    let y2 = b.bottom().min(frame.height);
    if x2 <= x1 || y2 <= y1 {
        return Err(GeometryError::OutsideFrame {
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
            width: frame.width,
            height: frame.height,
        });
    }
    Ok(BBox {
        x: x1,
        y: y1,
        w: x2 - x1,
        h: y2 - y1,
        score: b.score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(0., 0., 10., 10.)), 1.0);
        assert_eq!(iou(&bx(0., 0., 10., 10.), &bx(50., 50., 10., 10.)), 0.0);
        // inter = 5*10, union = 200 - 50
        let v = iou(&bx(0., 0., 10., 10.), &bx(5., 0., 10., 10.));
        assert!((v - 50.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn union_examples() {
        assert_eq!(union_box(&bx(0., 0., 4., 4.), &bx(3., 0., 4., 4.)), bx(0., 0., 7., 4.));
        assert_eq!(union_box(&bx(2., 2., 5., 5.), &bx(2., 2., 5., 5.)), bx(2., 2., 5., 5.));
        assert_eq!(union_box(&bx(0., 0., 1., 1.), &bx(10., 10., 1., 1.)), bx(0., 0., 11., 11.));
    }

    #[test]
    fn overlap_examples() {
        assert!(overlaps(&bx(0., 0., 4., 4.), &bx(3., 0., 4., 4.)));
        assert!(!overlaps(&bx(0., 0., 4., 4.), &bx(4., 0., 4., 4.)));
        assert!(!overlaps(&bx(0., 0., 4., 4.), &bx(20., 20., 5., 5.)));
    }

    #[test]
    fn clip_examples() {
        let f = FrameSpec::new(100., 100.).unwrap();
        assert_eq!(clip_box(&bx(-6., -6., 72., 72.), &f).unwrap(), bx(0., 0., 66., 66.));
        assert_eq!(clip_box(&bx(10., 10., 5., 5.), &f).unwrap(), bx(10., 10., 5., 5.));
        assert!(matches!(
            clip_box(&bx(200., 200., 5., 5.), &f),
            Err(GeometryError::OutsideFrame { .. })
        ));
    }

    #[test]
    fn validation() {
        assert!(BBox::new(0., 0., -1., 2.).is_err());
        assert!(BBox::new(0., 0., 0., 2.).is_err());
        assert!(BBox::new(f64::NAN, 0., 1., 2.).is_err());
        assert!(matches!(
            BBox::scored(0., 0., 1., 1., 1.5),
            Err(GeometryError::ScoreOutOfRange(_))
        ));
        assert!(FrameSpec::new(0., 10.).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..150.0f64, -50.0..150.0f64, 0.5..80.0f64, 0.5..80.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
            prop_assert_eq!(overlaps(&a, &b), ab > 0.0);
        }

        #[test]
        fn union_encloses_and_commutes(a in arb_box(), b in arb_box(), c in arb_box()) {
            let u = union_box(&a, &b);
            prop_assert!(u.contains(&a) && u.contains(&b));
            prop_assert_eq!(u, union_box(&b, &a));
            let left = union_box(&union_box(&a, &b), &c);
            let right = union_box(&a, &union_box(&b, &c));
            prop_assert!((left.x - right.x).abs() < 1e-9 && (left.y - right.y).abs() < 1e-9);
            prop_assert!((left.right() - right.right()).abs() < 1e-9);
            prop_assert!((left.bottom() - right.bottom()).abs() < 1e-9);
        }

        #[test]
        fn clip_stays_inside(b in arb_box()) {
            let f = FrameSpec::new(100., 100.).unwrap();
            if let Ok(c) = clip_box(&b, &f) {
                prop_assert!(f.bounds().contains(&c));
                prop_assert!(b.contains(&c));
            }
        }
    }
}
