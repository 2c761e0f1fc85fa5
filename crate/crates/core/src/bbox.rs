//! Normalized axis-aligned rectangles and the geometry shared by every stage.
//!
//! Coordinates are fractions of image width and height, so everything here is
//! resolution independent. Zero-area boxes are legal.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoxError {
    #[error("box coordinate is not finite: {0:?}")]
    NonFinite([f64; 4]),
    #[error("box violates 0 <= min <= max <= 1: x=[{x_min}, {x_max}] y=[{y_min}, {y_max}]")]
    OutOfOrder {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
}

/// A rectangle `[x_min, x_max] x [y_min, y_max]` inside the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = BoxError;
    fn try_from(r: RawBox) -> Result<Self, BoxError> {
        BoundingBox::new(r.x_min, r.y_min, r.x_max, r.y_max)
    }
}

impl From<BoundingBox> for RawBox {
    fn from(b: BoundingBox) -> Self {
        RawBox {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        }
    }
}

impl BoundingBox {
    /// The whole image.
    pub const UNIT: BoundingBox = BoundingBox {
        x_min: 0.0,
        y_min: 0.0,
        x_max: 1.0,
        y_max: 1.0,
    };

    /// The all-zero box used as the object of attribute ("is") relations.
    pub const NULL: BoundingBox = BoundingBox {
        x_min: 0.0,
        y_min: 0.0,
        x_max: 0.0,
        y_max: 0.0,
    };

    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, BoxError> {
        let c = [x_min, y_min, x_max, y_max];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(BoxError::NonFinite(c));
        }
        let ordered = 0.0 <= x_min && x_min <= x_max && x_max <= 1.0;
        let ordered = ordered && 0.0 <= y_min && y_min <= y_max && y_max <= 1.0;
        if !ordered {
            return Err(BoxError::OutOfOrder {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from `[x_min, y_min, x_max, y_max]`.
    pub fn from_array(c: [f64; 4]) -> Result<Self, BoxError> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    /// `[x_min, y_min, x_max, y_max]`
    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn is_null(&self) -> bool {
        *self == Self::NULL
    }

    /// Area of the overlap with `other`, 0 when the boxes do not overlap.
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Total order on coordinates, used for deterministic tie breaking.
    pub fn lexicographic_cmp(&self, other: &BoundingBox) -> std::cmp::Ordering {
        self.to_array()
            .iter()
            .zip(other.to_array().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    }
}

/// Intersection over union. Returns 0 when the union has zero area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Euclidean distance between box centers.
pub fn center_distance(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Smallest box containing both inputs.
pub fn union_box(a: &BoundingBox, b: &BoundingBox) -> BoundingBox {
    BoundingBox {
        x_min: a.x_min.min(b.x_min),
        y_min: a.y_min.min(b.y_min),
        x_max: a.x_max.max(b.x_max),
        y_max: a.y_max.max(b.y_max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let b = bb(0.1, 0.2, 0.5, 0.7);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&bb(0.0, 0.0, 0.2, 0.2), &bb(0.5, 0.5, 0.9, 0.9)), 0.0);
    }

    #[test]
    fn iou_hand_computed() {
        // intersection 0.1 x 0.1 = 0.01, union 0.04 + 0.04 - 0.01 = 0.07
        let v = iou(&bb(0.0, 0.0, 0.2, 0.2), &bb(0.1, 0.1, 0.3, 0.3));
        assert!((v - 1.0 / 7.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn iou_zero_area_is_zero() {
        let p = bb(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(iou(&p, &bb(0.0, 0.0, 1.0, 1.0)), 0.0);
        assert_eq!(iou(&BoundingBox::NULL, &BoundingBox::NULL), 0.0);
    }

    #[test]
    fn center_distance_cases() {
        let b = bb(0.1, 0.1, 0.3, 0.4);
        assert_eq!(center_distance(&b, &b), 0.0);
        let a = bb(0.0, 0.0, 0.5, 0.5);
        let c = bb(0.5, 0.5, 1.0, 1.0);
        assert!((center_distance(&a, &c) - 0.5f64.sqrt()).abs() < 1e-12);
        let d = bb(0.6, 0.0, 0.8, 0.5);
        assert!((center_distance(&a, &d) - 0.45).abs() < 1e-12);
    }

    #[test]
    fn union_box_cases() {
        let a = bb(0.0, 0.0, 0.5, 0.5);
        let b = bb(0.4, 0.4, 1.0, 1.0);
        assert_eq!(union_box(&a, &a), a);
        assert_eq!(union_box(&a, &b), BoundingBox::UNIT);
        let inner = bb(0.1, 0.1, 0.2, 0.2);
        assert_eq!(union_box(&a, &inner), a);
    }

    #[test]
    fn rejects_invalid() {
        assert!(matches!(
            BoundingBox::new(0.6, 0.0, 0.5, 1.0),
            Err(BoxError::OutOfOrder { .. })
        ));
        assert!(BoundingBox::new(0.0, 0.0, 1.1, 1.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    pub(crate) fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(a, b, c, d)| {
            BoundingBox::new(a.min(c), b.min(d), a.max(c), b.max(d)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn union_box_laws(a in arb_box(), b in arb_box(), c in arb_box()) {
            prop_assert_eq!(union_box(&a, &b), union_box(&b, &a));
            prop_assert_eq!(union_box(&union_box(&a, &b), &c), union_box(&a, &union_box(&b, &c)));
            prop_assert_eq!(union_box(&a, &a), a);
            if a.area() > 0.0 {
                let u = union_box(&a, &b);
                prop_assert!(iou(&a, &u) + 1e-12 >= iou(&a, &b));
            }
        }

        #[test]
        fn center_distance_triangle(a in arb_box(), b in arb_box(), c in arb_box()) {
            let ab = center_distance(&a, &b);
            let bc = center_distance(&b, &c);
            let ac = center_distance(&a, &c);
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
