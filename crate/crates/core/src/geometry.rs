//! Axis-aligned box arithmetic: IoU, the nine agent actions and clipping.
//!
//! Boxes are kept in real pixel coordinates. An action first applies the
//! raw translate/reshape rule, then clamps every coordinate into the image
//! and finally re-expands any side that fell below `min_side`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[x0, y0, x1, y1]` with `x0 < x1`, `y0 < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let finite = x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite();
        if !finite || x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidBox { x0, y0, x1, y1 });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// The box covering the whole image.
    pub fn full(size: ImageSize) -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: size.width as f64,
            y1: size.height as f64,
        }
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }
    pub fn y0(&self) -> f64 {
        self.y0
    }
    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn is_inside(&self, size: ImageSize) -> bool {
        self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.x1 <= size.width as f64
            && self.y1 <= size.height as f64
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImageSize { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }
}

/// The nine agent actions. The discriminant is the fixed action index used
/// by the policy head and the history encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    MoveLeft = 0,
    MoveRight = 1,
    MoveUp = 2,
    MoveDown = 3,
    Wider = 4,
    Narrower = 5,
    Taller = 6,
    Shorter = 7,
    Trigger = 8,
}

impl Action {
    pub const COUNT: usize = 9;

    pub const ALL: [Action; Action::COUNT] = [
        Action::MoveLeft,
        Action::MoveRight,
        Action::MoveUp,
        Action::MoveDown,
        Action::Wider,
        Action::Narrower,
        Action::Taller,
        Action::Shorter,
        Action::Trigger,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn is_terminal(self) -> bool {
        self == Action::Trigger
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::MoveLeft => "left",
            Action::MoveRight => "right",
            Action::MoveUp => "up",
            Action::MoveDown => "down",
            Action::Wider => "wider",
            Action::Narrower => "narrower",
            Action::Taller => "taller",
            Action::Shorter => "shorter",
            Action::Trigger => "trigger",
        }
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionParams {
    /// Fraction of the box side used by movement actions.
    pub delta_move: f64,
    /// Fraction of the box side used by shape actions.
    pub delta_shape: f64,
    /// Minimum box side in pixels after clipping.
    pub min_side: f64,
}

impl Default for ActionParams {
    fn default() -> Self {
        Self {
            delta_move: 0.2,
            delta_shape: 0.1,
            min_side: 8.0,
        }
    }
}

impl ActionParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.delta_shape > 0.0
            && self.delta_shape <= self.delta_move
            && self.delta_move < 1.0
            && self.min_side > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!(
                "action params need 0 < delta_shape <= delta_move < 1 and min_side > 0, got {self:?}"
            )))
        }
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Applies a non-terminal action. `Trigger` is rejected; the environment
/// handles termination.
pub fn apply_action(
    b: &BoundingBox,
    act: Action,
    bounds: ImageSize,
    params: &ActionParams,
) -> Result<BoundingBox> {
    let [mut x0, mut y0, mut x1, mut y1] = b.to_array();
    let dx_move = params.delta_move * b.width();
    let dy_move = params.delta_move * b.height();
    let dx_shape = 0.5 * params.delta_shape * b.width();
    let dy_shape = 0.5 * params.delta_shape * b.height();

    match act {
        Action::MoveLeft => {
            x0 -= dx_move;
            x1 -= dx_move;
        }
        Action::MoveRight => {
            x0 += dx_move;
            x1 += dx_move;
        }
        Action::MoveUp => {
            y0 -= dy_move;
            y1 -= dy_move;
        }
        Action::MoveDown => {
            y0 += dy_move;
            y1 += dy_move;
        }
        Action::Wider => {
            x0 -= dx_shape;
            x1 += dx_shape;
        }
        Action::Narrower => {
            x0 += dx_shape;
            x1 -= dx_shape;
        }
        Action::Taller => {
            y0 -= dy_shape;
            y1 += dy_shape;
        }
        Action::Shorter => {
            y0 += dy_shape;
            y1 -= dy_shape;
        }
        Action::Trigger => {
            return Err(Error::Usage(
                "trigger has no geometric effect; the environment handles it".into(),
            ))
        }
    }

    let (w, h) = (bounds.width as f64, bounds.height as f64);
    let (x0, x1) = clip_axis(x0, x1, w, params.min_side);
    let (y0, y1) = clip_axis(y0, y1, h, params.min_side);
    BoundingBox::new(x0, y0, x1, y1)
}

/// Clamps one axis into `[0, limit]` and restores a side of at least
/// `min_side` (capped by `limit`). When an edge sits on the border the
/// opposite edge is moved; otherwise the interval grows about its center.
fn clip_axis(lo: f64, hi: f64, limit: f64, min_side: f64) -> (f64, f64) {
    let mut lo = lo.clamp(0.0, limit);
    let mut hi = hi.clamp(0.0, limit);
    let min_side = min_side.min(limit);
    if hi - lo >= min_side {
        return (lo, hi);
    }
    if lo <= 0.0 {
        lo = 0.0;
        hi = min_side;
    } else if hi >= limit {
        hi = limit;
        lo = limit - min_side;
    } else {
        let c = 0.5 * (lo + hi);
        lo = c - 0.5 * min_side;
        hi = c + 0.5 * min_side;
        if lo < 0.0 {
            lo = 0.0;
            hi = min_side;
        } else if hi > limit {
            hi = limit;
            lo = limit - min_side;
        }
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn size600() -> ImageSize {
        ImageSize::new(600, 600).unwrap()
    }

    /// Counts unit cells covered by both / either box on an integer grid.
    fn iou_by_cells(a: &BoundingBox, b: &BoundingBox, grid: usize) -> f64 {
        let inside = |bb: &BoundingBox, x: usize, y: usize| {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            cx > bb.x0() && cx < bb.x1() && cy > bb.y0() && cy < bb.y1()
        };
        let (mut inter, mut union) = (0usize, 0usize);
        for y in 0..grid {
            for x in 0..grid {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        let b = bx(5.0, 0.0, 15.0, 10.0);
        let oracle = iou_by_cells(&a, &b, 30);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&a, &b) - oracle).abs() < 1e-12);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 5.0).is_err());
        assert!(BoundingBox::new(0.0, 5.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 1.0, 2.0).is_err());
        assert!(ImageSize::new(0, 4).is_err());
    }

    #[test]
    fn move_up_matches_worked_example() {
        let b = bx(0.0, 100.0, 200.0, 300.0);
        let out = apply_action(&b, Action::MoveUp, size600(), &ActionParams::default()).unwrap();
        let expected = [0.0, 100.0 - 0.2 * 200.0, 200.0, 300.0 - 0.2 * 200.0];
        assert_eq!(out.to_array(), expected);
        assert_eq!(out.to_array(), [0.0, 60.0, 200.0, 260.0]);
    }

    #[test]
    fn move_left_and_narrower() {
        let p = ActionParams::default();
        let b = bx(100.0, 100.0, 200.0, 200.0);
        let left = apply_action(&b, Action::MoveLeft, size600(), &p).unwrap();
        assert_eq!(left.to_array(), [80.0, 100.0, 180.0, 200.0]);
        let narrow = apply_action(&b, Action::Narrower, size600(), &p).unwrap();
        assert_eq!(narrow.to_array(), [105.0, 100.0, 195.0, 200.0]);
        assert_eq!(narrow.center(), b.center());
    }

    #[test]
    fn move_left_clips_at_border() {
        let b = bx(0.0, 0.0, 100.0, 100.0);
        let out = apply_action(&b, Action::MoveLeft, size600(), &ActionParams::default()).unwrap();
        assert_eq!(out.to_array(), [0.0, 0.0, 80.0, 100.0]);
    }

    #[test]
    fn shape_actions_adjust_the_right_axis() {
        let p = ActionParams::default();
        let b = bx(100.0, 100.0, 300.0, 200.0);
        let cases = [
            (Action::Wider, [90.0, 100.0, 310.0, 200.0]),
            (Action::Narrower, [110.0, 100.0, 290.0, 200.0]),
            (Action::Taller, [100.0, 95.0, 300.0, 205.0]),
            (Action::Shorter, [100.0, 105.0, 300.0, 195.0]),
            (Action::MoveRight, [140.0, 100.0, 340.0, 200.0]),
            (Action::MoveDown, [100.0, 120.0, 300.0, 220.0]),
        ];
        for (act, expected) in cases {
            let out = apply_action(&b, act, size600(), &p).unwrap();
            for (o, e) in out.to_array().iter().zip(expected) {
                assert!((o - e).abs() < 1e-9, "{act}: {out:?} vs {expected:?}");
            }
        }
    }

    #[test]
    fn trigger_rejected() {
        let b = bx(0.0, 0.0, 10.0, 10.0);
        assert!(apply_action(&b, Action::Trigger, size600(), &ActionParams::default()).is_err());
    }

    #[test]
    fn min_side_enforced() {
        let p = ActionParams::default();
        let b = bx(100.0, 100.0, 108.5, 200.0);
        let out = apply_action(&b, Action::Narrower, size600(), &p).unwrap();
        assert!((out.width() - 8.0).abs() < 1e-12);
        assert!((out.center().0 - b.center().0).abs() < 1e-9);

        // squeezed against the right border, the left edge moves inward
        let b = bx(590.0, 0.0, 600.0, 50.0);
        let out = apply_action(&b, Action::MoveRight, size600(), &p).unwrap();
        assert_eq!(out.to_array()[0], 592.0);
        assert_eq!(out.to_array()[2], 600.0);
    }

    #[test]
    fn action_index_table() {
        for (i, a) in Action::ALL.iter().enumerate() {
            assert_eq!(a.index(), i);
            assert_eq!(Action::from_index(i), Some(*a));
        }
        assert_eq!(Action::from_index(9), None);
        assert!(Action::Trigger.is_terminal());
        assert_eq!(Action::ALL.iter().filter(|a| a.is_terminal()).count(), 1);
    }

    fn arb_box_in(w: f64, h: f64) -> impl Strategy<Value = BoundingBox> {
        (0.0..w - 8.0, 0.0..h - 8.0, 8.0..w, 8.0..h).prop_map(move |(x0, y0, bw, bh)| {
            let x1 = (x0 + bw).min(w).max(x0 + 8.0);
            let y1 = (y0 + bh).min(h).max(y0 + 8.0);
            BoundingBox::new(x0, y0, x1, y1).unwrap()
        })
    }

    proptest! {
        #[test]
        fn actions_keep_box_valid(b in arb_box_in(600.0, 400.0), ai in 0usize..8) {
            let size = ImageSize::new(600, 400).unwrap();
            let p = ActionParams::default();
            let out = apply_action(&b, Action::from_index(ai).unwrap(), size, &p).unwrap();
            prop_assert!(out.is_inside(size));
            prop_assert!(out.width() >= p.min_side - 1e-9);
            prop_assert!(out.height() >= p.min_side - 1e-9);
        }

        #[test]
        fn unclipped_moves_preserve_size_and_invert(b in arb_box_in(600.0, 600.0)) {
            let size = size600();
            let p = ActionParams::default();
            let left = apply_action(&b, Action::MoveLeft, size, &p).unwrap();
            if b.x0() - 0.2 * b.width() >= 0.0 {
                prop_assert!((left.width() - b.width()).abs() < 1e-9);
                prop_assert!((left.height() - b.height()).abs() < 1e-9);
                let back = apply_action(&left, Action::MoveRight, size, &p).unwrap();
                if left.x1() + 0.2 * left.width() <= 600.0 {
                    for (u, v) in back.to_array().iter().zip(b.to_array()) {
                        prop_assert!((u - v).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn unclipped_shape_actions_keep_center(b in arb_box_in(600.0, 600.0), ai in 4usize..8) {
            let p = ActionParams::default();
            let act = Action::from_index(ai).unwrap();
            let grown_w = b.width() * 1.1;
            let grown_h = b.height() * 1.1;
            let (cx, cy) = b.center();
            let fits = cx - grown_w / 2.0 >= 0.0 && cx + grown_w / 2.0 <= 600.0
                && cy - grown_h / 2.0 >= 0.0 && cy + grown_h / 2.0 <= 600.0
                && b.width() * 0.9 >= p.min_side && b.height() * 0.9 >= p.min_side;
            if fits {
                let out = apply_action(&b, act, size600(), &p).unwrap();
                prop_assert!((out.center().0 - cx).abs() < 1e-9);
                prop_assert!((out.center().1 - cy).abs() < 1e-9);
            }
        }

        #[test]
        fn iou_symmetric_and_bounded(a in arb_box_in(100.0, 100.0), b in arb_box_in(100.0, 100.0)) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }
    }
}
