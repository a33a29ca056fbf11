use rand::Rng as _;

use super::style::Render;
use crate::rng::Rng;

/// Torso decoration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    Stripes,
    Split,
    Band,
}

/// Everything that makes one identity recognizable, independent of camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    pub skin: [f32; 3],
    pub hair: [f32; 3],
    pub top: [f32; 3],
    pub accent: [f32; 3],
    pub pants: [f32; 3],
    pub shoes: [f32; 3],
    pub pattern: Pattern,
    pub long_hair: bool,
    pub height: f32,
    pub girth: f32,
    pub head: f32,
}

fn color(rng: &mut Rng, lo: f32, hi: f32) -> [f32; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

impl Appearance {
    pub fn sample(rng: &mut Rng) -> Self {
        let tone = rng.gen_range(0.35f32..0.9);
        Appearance {
            skin: [tone, tone * 0.78, tone * 0.62],
            hair: color(rng, 0.05, 0.6),
            top: color(rng, 0.05, 0.95),
            accent: color(rng, 0.05, 0.95),
            pants: color(rng, 0.05, 0.8),
            shoes: color(rng, 0.0, 0.4),
            pattern: [Pattern::Solid, Pattern::Stripes, Pattern::Split, Pattern::Band][rng.gen_range(0..4)],
            long_hair: rng.gen_bool(0.4),
            height: rng.gen_range(0.9..1.05),
            girth: rng.gen_range(0.85..1.15),
            head: rng.gen_range(0.9..1.1),
        }
    }
}

/// Per-view nuisance: horizontal offset (px), scale and limb pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewJitter {
    pub dx: f32,
    pub dy: f32,
    pub scale: f32,
    pub arm_swing: f32,
    pub leg_spread: f32,
}

impl ViewJitter {
    pub fn sample(rng: &mut Rng) -> Self {
        ViewJitter {
            dx: rng.gen_range(-3.0..=3.0),
            dy: rng.gen_range(-1.5..=1.5),
            scale: rng.gen_range(0.9..=1.1),
            arm_swing: rng.gen_range(-1.0..=1.0),
            leg_spread: rng.gen_range(-1.0..=1.0),
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<f32>,
    alpha: Vec<f32>,
}

impl Canvas {
    fn fill(&mut self, inside: impl Fn(f32, f32) -> Option<[f32; 3]>) {
        for y in 0..self.h {
            for x in 0..self.w {
                if let Some(c) = inside(x as f32 + 0.5, y as f32 + 0.5) {
                    let i = y * self.w + x;
                    self.rgb[i * 3..i * 3 + 3].copy_from_slice(&c);
                    self.alpha[i] = 1.0;
                }
            }
        }
    }
}

fn ellipse(x: f32, y: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> bool {
    let (u, v) = ((x - cx) / rx, (y - cy) / ry);
    u * u + v * v <= 1.0
}

/// Draws the sprite back to front: hair, legs, shoes, arms, torso, head.
pub fn render_sprite(a: &Appearance, j: &ViewJitter, height: usize, width: usize) -> Render {
    let mut c = Canvas { h: height, w: width, rgb: vec![0.0; height * width * 3], alpha: vec![0.0; height * width] };
    let u = height as f32 / 64.0 * j.scale * a.height;
    let cx = width as f32 / 2.0 + j.dx;
    let top = (height as f32 - 57.0 * u) / 2.0 + j.dy;
    let y = |k: f32| top + k * u;
    let gw = a.girth;

    let (head_rx, head_ry) = (4.3 * u * a.head, 5.3 * u * a.head);
    let head_cy = y(6.0);
    let hair = a.hair;
    let long_hair = a.long_hair;
    c.fill(|px, py| {
        let cap = ellipse(px, py, cx, head_cy - 0.8 * u, head_rx * 1.15, head_ry * 1.0);
        let tail = long_hair && (px - cx).abs() <= head_rx * 1.1 && py >= head_cy && py <= y(17.0);
        (cap || tail).then_some(hair)
    });

    for side in [-1.0f32, 1.0] {
        let hip = cx + side * 3.0 * u * gw;
        let foot = hip + side * j.leg_spread * 2.0 * u;
        let half = 2.7 * u * gw;
        let (pants, shoes) = (a.pants, a.shoes);
        c.fill(|px, py| {
            if py < y(31.0) || py > y(57.0) {
                return None;
            }
            let t = (py - y(31.0)) / (26.0 * u);
            let mid = hip + (foot - hip) * t;
            ((px - mid).abs() <= half).then_some(if py > y(54.0) { shoes } else { pants })
        });
    }

    let torso_half = 7.0 * u * gw;
    for side in [-1.0f32, 1.0] {
        let shoulder = cx + side * (torso_half + 1.2 * u);
        let hand = shoulder + side * (0.5 + j.arm_swing) * 2.5 * u;
        let (sleeve, skin) = (a.top, a.skin);
        c.fill(|px, py| {
            if py < y(13.0) || py > y(31.0) {
                return None;
            }
            let t = (py - y(13.0)) / (18.0 * u);
            let mid = shoulder + (hand - shoulder) * t;
            ((px - mid).abs() <= 1.4 * u).then_some(if t > 0.8 { skin } else { sleeve })
        });
    }

    let (top_c, accent, pattern) = (a.top, a.accent, a.pattern);
    c.fill(|px, py| {
        if py < y(12.0) || py > y(32.0) || (px - cx).abs() > torso_half {
            return None;
        }
        let band = match pattern {
            Pattern::Solid => false,
            Pattern::Stripes => ((py - y(12.0)) / (3.0 * u)) as i32 % 2 == 1,
            Pattern::Split => px > cx,
            Pattern::Band => (py - y(19.0)).abs() < 2.5 * u,
        };
        Some(if band { accent } else { top_c })
    });

    let skin = a.skin;
    c.fill(|px, py| ellipse(px, py, cx, head_cy, head_rx, head_ry).then_some(skin));
    c.fill(|px, py| ellipse(px, py, cx, head_cy - 0.9 * head_ry, head_rx * 1.05, head_ry * 0.45).then_some(hair));

    Render { height, width, rgb: c.rgb, alpha: c.alpha }
}
