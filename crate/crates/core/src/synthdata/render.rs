//! Rasterization of sprite characters onto a background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::palette::{self, HairStyle, Pattern, Rgb};
use super::{Keypoints, Point, KP_HEAD, KP_HIP, KP_LEFT_FOOT, KP_LEFT_HAND, KP_NECK, KP_RIGHT_FOOT, KP_RIGHT_HAND};

pub const HEAD_RADIUS: f32 = 6.0;
const ARM_LEN: f32 = 13.0;
const LEG_LEN: f32 = 16.0;
pub const HORIZON_FRAC: f32 = 0.625;

/// Which body part painted a pixel (used to locate the face region).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    None,
    Body,
    Head,
}

pub struct Canvas {
    pub size: usize,
    pub rgb: Vec<f32>,
    /// 0 = background, k = character slot k-1.
    pub owner: Vec<u8>,
    pub part: Vec<Part>,
}

impl Canvas {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            rgb: vec![0.0; 3 * size * size],
            owner: vec![0; size * size],
            part: vec![Part::None; size * size],
        }
    }

    fn set(&mut self, x: i32, y: i32, color: Rgb, owner: u8, part: Part) {
        if x < 0 || y < 0 || x as usize >= self.size || y as usize >= self.size {
            return;
        }
        let i = y as usize * self.size + x as usize;
        let plane = self.size * self.size;
        for (c, v) in color.iter().enumerate() {
            self.rgb[c * plane + i] = *v;
        }
        self.owner[i] = owner;
        self.part[i] = part;
    }

    fn fill_where(&mut self, bbox: (i32, i32, i32, i32), mut f: impl FnMut(i32, i32) -> Option<(Rgb, Part)>, owner: u8) {
        let (x0, y0, x1, y1) = bbox;
        for y in y0.max(0)..y1.min(self.size as i32) {
            for x in x0.max(0)..x1.min(self.size as i32) {
                if let Some((c, p)) = f(x, y) {
                    self.set(x, y, c, owner, p);
                }
            }
        }
    }

    fn disc(&mut self, c: Point, r: f32, color: Rgb, owner: u8, part: Part) {
        let bbox = ((c.x - r).floor() as i32, (c.y - r).floor() as i32, (c.x + r).ceil() as i32 + 1, (c.y + r).ceil() as i32 + 1);
        self.fill_where(
            bbox,
            |x, y| {
                let (dx, dy) = (x as f32 + 0.5 - c.x, y as f32 + 0.5 - c.y);
                (dx * dx + dy * dy <= r * r).then_some((color, part))
            },
            owner,
        );
    }

    fn segment(&mut self, a: Point, b: Point, width: f32, color: Rgb, owner: u8) {
        let h = width / 2.0;
        let bbox = (
            (a.x.min(b.x) - h).floor() as i32,
            (a.y.min(b.y) - h).floor() as i32,
            (a.x.max(b.x) + h).ceil() as i32 + 1,
            (a.y.max(b.y) + h).ceil() as i32 + 1,
        );
        let (vx, vy) = (b.x - a.x, b.y - a.y);
        let len2 = (vx * vx + vy * vy).max(1e-6);
        self.fill_where(
            bbox,
            |x, y| {
                let (px, py) = (x as f32 + 0.5 - a.x, y as f32 + 0.5 - a.y);
                let t = ((px * vx + py * vy) / len2).clamp(0.0, 1.0);
                let (dx, dy) = (px - t * vx, py - t * vy);
                (dx * dx + dy * dy <= h * h).then_some((color, Part::Body))
            },
            owner,
        );
    }
}

pub fn paint_background(canvas: &mut Canvas, background: u32, seed: u64) {
    let style = palette::BACKGROUNDS[background as usize];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_636b);
    let size = canvas.size;
    let horizon = (size as f32 * HORIZON_FRAC) as usize;
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let base = if y < horizon { style.sky } else { style.ground };
            let jitter: f32 = rng.random_range(-0.02..0.02);
            for c in 0..3 {
                canvas.rgb[c * plane + y * size + x] = (base[c] + jitter).clamp(0.0, 1.0);
            }
        }
    }
}

/// Articulation of one character, derived from the scene's pose seed.
pub fn sample_keypoints(pose_seed: u64, action: u32, slot: usize, num_characters: usize, size: usize) -> Keypoints {
    let mut rng = ChaCha8Rng::seed_from_u64(pose_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (slot as u64 + 1));
    let s = size as f32 / 64.0;
    let cx = match (num_characters, slot) {
        (1, _) => 32.0 + rng.random_range(-4i32..=4) as f32,
        (_, 0) => 16.0 + rng.random_range(-3i32..=3) as f32,
        _ => 48.0 + rng.random_range(-3i32..=3) as f32,
    };
    let dy = rng.random_range(-2i32..=2) as f32;
    let (arm_l, arm_r, leg) = match action {
        0 => (rng.random_range(0.2..0.5), rng.random_range(0.2..0.5), rng.random_range(0.1..0.25)),
        1 => (rng.random_range(0.2..0.5), rng.random_range(2.4..2.9), rng.random_range(0.1..0.3)),
        2 => (rng.random_range(2.3..2.8), rng.random_range(2.3..2.8), rng.random_range(0.1..0.3)),
        _ => (rng.random_range(0.5..0.9), rng.random_range(0.0..0.3), rng.random_range(0.35f32..0.55)),
    };
    let head = Point::new(cx, 12.0 + dy);
    let neck = Point::new(cx, 19.0 + dy);
    let hip = Point::new(cx, 36.0 + dy);
    let shoulder = Point::new(cx, neck.y + 2.0);
    let arm = |theta: f32, sign: f32| Point::new(shoulder.x + sign * ARM_LEN * theta.sin(), shoulder.y + ARM_LEN * theta.cos());
    let foot = |sign: f32| Point::new(hip.x + sign * LEG_LEN * leg.sin(), hip.y + LEG_LEN * leg.cos());
    let mut kp = [Point::new(0.0, 0.0); super::NUM_KEYPOINTS];
    kp[KP_HEAD] = head;
    kp[KP_NECK] = neck;
    kp[KP_LEFT_HAND] = arm(arm_l, -1.0);
    kp[KP_RIGHT_HAND] = arm(arm_r, 1.0);
    kp[KP_HIP] = hip;
    kp[KP_LEFT_FOOT] = foot(-1.0);
    kp[KP_RIGHT_FOOT] = foot(1.0);
    for p in kp.iter_mut() {
        p.x *= s;
        p.y *= s;
    }
    kp
}

pub fn paint_character(canvas: &mut Canvas, kp: &Keypoints, identity: u32, clothing: u32, owner: u8) {
    let s = canvas.size as f32 / 64.0;
    let id = palette::identity_style(identity);
    let cl = palette::clothing_style(clothing);
    let hip = kp[KP_HIP];
    let neck = kp[KP_NECK];
    let head = kp[KP_HEAD];

    for (side, foot) in [(-1.0, kp[KP_LEFT_FOOT]), (1.0, kp[KP_RIGHT_FOOT])] {
        let start = Point::new(hip.x + side * 2.0 * s, hip.y);
        canvas.segment(start, foot, 4.0 * s, cl.pants, owner);
    }

    let (tx0, tx1) = ((neck.x - 6.0 * s).round() as i32, (neck.x + 6.0 * s).round() as i32);
    let (ty0, ty1) = (neck.y.round() as i32, (hip.y + 2.0 * s).round() as i32);
    let stripe = (3.0 * s).max(1.0) as i32;
    canvas.fill_where(
        (tx0, ty0, tx1, ty1),
        |x, y| {
            let (lx, ly) = ((x - tx0) / stripe, (y - ty0) / stripe);
            let alt = match cl.pattern {
                Pattern::Solid => false,
                Pattern::HStripes => ly % 2 == 1,
                Pattern::VStripes => lx % 2 == 1,
                Pattern::Checker => (lx + ly) % 2 == 1,
            };
            Some((if alt { cl.accent } else { cl.shirt }, Part::Body))
        },
        owner,
    );

    let shoulder = Point::new(neck.x, neck.y + 2.0 * s);
    for hand in [kp[KP_LEFT_HAND], kp[KP_RIGHT_HAND]] {
        canvas.segment(shoulder, hand, 3.0 * s, cl.shirt, owner);
        canvas.disc(hand, 1.6 * s, id.face, owner, Part::Body);
    }

    let r = HEAD_RADIUS * s;
    canvas.disc(head, r, id.face, owner, Part::Head);
    let hair = id.hair;
    let (hx, hy) = (head.x, head.y);
    canvas.fill_where(
        ((hx - r - 1.0).floor() as i32, (hy - r - 5.0 * s).floor() as i32, (hx + r + 2.0).ceil() as i32, (hy + r + 1.0).ceil() as i32),
        |x, y| {
            let (dx, dy) = (x as f32 + 0.5 - hx, y as f32 + 0.5 - hy);
            let in_head = dx * dx + dy * dy <= r * r;
            let cap = in_head && dy < -2.0 * s;
            let extra = match id.hair_style {
                HairStyle::Cap => false,
                HairStyle::Tall => dx.abs() <= 4.0 * s && dy < -r + 1.0 && dy >= -r - 4.0 * s,
                HairStyle::Side => in_head && dx.abs() >= 4.0 * s && dy < 3.0 * s,
            };
            (cap || extra).then_some((hair, Part::Head))
        },
        owner,
    );
    let eye = [0.05, 0.05, 0.1];
    let e = (id.eye_size as f32 * s).max(1.0) as i32;
    for side in [-1, 1] {
        let ex = (hx + (side * id.eye_offset) as f32 * s).floor() as i32;
        let ey = hy.floor() as i32;
        canvas.fill_where((ex, ey, ex + e, ey + e), |_, _| Some((eye, Part::Head)), owner);
    }
}
