use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::{substream, Rng};

/// Photometric look of one camera domain, applied to rendered sprites.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStyle {
    /// Added to every channel after the cast, in `[-0.5, 0.5]`.
    pub brightness: f64,
    /// Per-channel multiplier in `[0.25, 2]`.
    pub cast: [f64; 3],
    /// Standard deviation of additive Gaussian noise, in `[0, 0.3]`.
    pub noise_std: f64,
    /// Box blur radius in pixels, `0..=3`.
    pub blur_radius: usize,
    /// Seeds the domain's background colors.
    pub palette_seed: u64,
}

pub const PRESETS: [&str; 3] = ["source", "target", "null"];

impl DomainStyle {
    pub fn null() -> Self {
        DomainStyle { brightness: 0.0, cast: [1.0; 3], noise_std: 0.0, blur_radius: 0, palette_seed: 0 }
    }

    /// Bright, neutral, nearly clean.
    pub fn source() -> Self {
        DomainStyle { brightness: 0.05, cast: [1.0, 1.0, 1.0], noise_std: 0.01, blur_radius: 0, palette_seed: 11 }
    }

    /// Dark, blue-cast, noisy and soft.
    pub fn target() -> Self {
        DomainStyle { brightness: -0.18, cast: [0.6, 0.8, 1.3], noise_std: 0.05, blur_radius: 1, palette_seed: 23 }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "source" => Some(Self::source()),
            "target" => Some(Self::target()),
            "null" => Some(Self::null()),
            _ => None,
        }
    }

    /// A preset name, or comma-separated `key=value` overrides optionally led
    /// by a preset, e.g. `target,noise=0.1` or `brightness=-0.2,cast=0.7:0.9:1.2`.
    pub fn parse(spec: &str) -> Result<Self, String> {
        let mut parts = spec.split(',').map(str::trim).filter(|p| !p.is_empty()).peekable();
        let mut style = match parts.peek().and_then(|p| Self::preset(p)) {
            Some(s) => {
                parts.next();
                s
            }
            None => Self::null(),
        };
        for part in parts {
            let (key, value) = part.split_once('=').ok_or_else(|| format!("style term `{part}` is not key=value"))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| format!("style `{key}` expects a number, got `{v}`"));
            match key {
                "brightness" => style.brightness = num(value)?,
                "noise" => style.noise_std = num(value)?,
                "blur" => style.blur_radius = value.parse().map_err(|_| format!("blur expects an integer, got `{value}`"))?,
                "palette" => style.palette_seed = value.parse().map_err(|_| format!("palette expects an integer, got `{value}`"))?,
                "cast" => {
                    let c: Vec<f64> = value.split(':').map(num).collect::<Result<_, _>>()?;
                    style.cast = c.try_into().map_err(|_| "cast expects three values r:g:b".to_string())?;
                }
                other => return Err(format!("unknown style key `{other}`")),
            }
        }
        style.validate()?;
        Ok(style)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(-0.5..=0.5).contains(&self.brightness) {
            return Err(format!("brightness {} outside [-0.5, 0.5]", self.brightness));
        }
        if self.cast.iter().any(|c| !(0.25..=2.0).contains(c)) {
            return Err(format!("cast {:?} outside [0.25, 2]", self.cast));
        }
        if !(0.0..=0.3).contains(&self.noise_std) {
            return Err(format!("noise {} outside [0, 0.3]", self.noise_std));
        }
        if self.blur_radius > 3 {
            return Err(format!("blur radius {} above 3", self.blur_radius));
        }
        Ok(())
    }

    /// Stable text form accepted by [`DomainStyle::parse`].
    pub fn describe(&self) -> String {
        format!(
            "brightness={},cast={}:{}:{},noise={},blur={},palette={}",
            self.brightness, self.cast[0], self.cast[1], self.cast[2], self.noise_std, self.blur_radius, self.palette_seed
        )
    }

    fn palette(&self) -> Vec<[f64; 3]> {
        let mut rng = substream(self.palette_seed, "palette", 0);
        (0..4).map(|_| [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)]).collect()
    }

    /// Composites a pre-style render over a domain background, then blurs,
    /// casts, shifts, adds noise and quantizes to 8 bits (HWC order).
    pub fn apply(&self, render: &Render, rng: &mut Rng) -> Vec<u8> {
        let (h, w) = (render.height, render.width);
        let palette = self.palette();
        let base = palette[rng.gen_range(0..palette.len())];
        let floor = palette[rng.gen_range(0..palette.len())];
        let horizon = rng.gen_range(0.6..0.85) * h as f64;
        let mut img = vec![0.0f64; h * w * 3];
        for y in 0..h {
            let bg = if (y as f64) < horizon { base } else { floor };
            let shade = 1.0 - 0.15 * y as f64 / h as f64;
            for x in 0..w {
                let a = render.alpha[y * w + x] as f64;
                for c in 0..3 {
                    let i = (y * w + x) * 3 + c;
                    img[i] = a * render.rgb[i] as f64 + (1.0 - a) * bg[c] * shade;
                }
            }
        }
        if self.blur_radius > 0 {
            img = box_blur(&img, h, w, self.blur_radius);
        }
        let noise = Normal::new(0.0, self.noise_std.max(0.0)).expect("validated noise std");
        img.iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut v = v * self.cast[i % 3] + self.brightness;
                if self.noise_std > 0.0 {
                    v += noise.sample(rng);
                }
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            })
            .collect()
    }
}

fn box_blur(img: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let (mut acc, mut n) = (0.0, 0.0);
                    for d in -(r as isize)..=(r as isize) {
                        let (yy, xx) = if horizontal { (y as isize, x as isize + d) } else { (y as isize + d, x as isize) };
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            acc += src[(yy as usize * w + xx as usize) * 3 + c];
                            n += 1.0;
                        }
                    }
                    out[(y * w + x) * 3 + c] = acc / n;
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// A sprite before any domain styling: colors in `[0, 1]` (HWC) and coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct Render {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f32>,
    pub alpha: Vec<f32>,
}
