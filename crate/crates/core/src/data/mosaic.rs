//! Synthetic aerial mosaics: a smoothed sand/vegetation texture with grass
//! patches, tire marks, trees, dead tree trunks and small animals, some of
//! them partially hidden beneath trees. Only animals get ground-truth boxes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::Image;
use crate::config::DataConfig;
use crate::math;
use crate::rng::{stream, Tag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnimalKind {
    /// In the open.
    Open,
    /// Partially occluded by a tree crown.
    BeneathTree,
}

impl AnimalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnimalKind::Open => "animal",
            AnimalKind::BeneathTree => "animal-beneath-tree",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "animal" => Some(AnimalKind::Open),
            "animal-beneath-tree" => Some(AnimalKind::BeneathTree),
            _ => None,
        }
    }
}

/// Axis-aligned ground-truth box in pixel coordinates (`x` = column).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub kind: AnimalKind,
}

impl BBox {
    /// Whether the box shares any pixel with the window.
    pub fn intersects(&self, top: usize, left: usize, height: usize, width: usize) -> bool {
        self.x < left + width && left < self.x + self.w && self.y < top + height && top < self.y + self.h
    }

    /// Whether the box lies entirely inside the window.
    pub fn inside(&self, top: usize, left: usize, height: usize, width: usize) -> bool {
        self.x >= left && self.y >= top && self.x + self.w <= left + width && self.y + self.h <= top + height
    }
}

/// Parameters of one mosaic.
#[derive(Debug, Clone, PartialEq)]
pub struct MosaicSpec {
    pub height: usize,
    pub width: usize,
    pub animals: usize,
    pub animals_beneath_trees: usize,
    pub trees: usize,
    pub grass_patches: usize,
    pub tire_marks: usize,
    pub dead_trunks: usize,
    /// Inclusive body-length range of animals in pixels.
    pub animal_len: (usize, usize),
}

impl MosaicSpec {
    pub fn total_animals(&self) -> usize {
        self.animals + self.animals_beneath_trees
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mosaic {
    pub image: Image,
    pub boxes: Vec<BBox>,
}

const MAX_PLACEMENT_TRIES: usize = 500;

const SAND: [f64; 3] = [0.80, 0.72, 0.54];
const DRY_GREEN: [f64; 3] = [0.56, 0.58, 0.38];
const GRASS: [f64; 3] = [0.42, 0.52, 0.28];
const TRACK: [f64; 3] = [0.90, 0.85, 0.72];
const CROWN: [f64; 3] = [0.14, 0.27, 0.12];
const SHADOW: [f64; 3] = [0.22, 0.22, 0.20];
const TRUNK: [f64; 3] = [0.52, 0.47, 0.42];
const HIDE: [f64; 3] = [0.30, 0.20, 0.12];

struct Canvas {
    img: Image,
}

impl Canvas {
    fn blend(&mut self, r: isize, c: isize, rgb: [f64; 3], alpha: f64) {
        let (h, w) = (self.img.height() as isize, self.img.width() as isize);
        if r < 0 || c < 0 || r >= h || c >= w {
            return;
        }
        for (ch, v) in rgb.iter().enumerate() {
            let old = self.img.get(ch, r as usize, c as usize);
            let new = (old * (1.0 - alpha) + v * alpha).clamp(0.0, 1.0);
            self.img.set(ch, r as usize, c as usize, new);
        }
    }

    /// Paints a rotated ellipse; returns the painted pixel bounds
    /// `(min_r, min_c, max_r, max_c)` if any pixel landed on the canvas.
    #[allow(clippy::too_many_arguments)]
    fn ellipse(
        &mut self,
        cy: f64,
        cx: f64,
        semi_major: f64,
        semi_minor: f64,
        angle: f64,
        rgb: [f64; 3],
        alpha: f64,
        noise: Option<(&mut ChaCha8Rng, f64)>,
    ) -> Option<(usize, usize, usize, usize)> {
        let reach = semi_major.max(semi_minor) + 1.0;
        let (sin, cos) = (libm::sin(angle), libm::cos(angle));
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        let mut noise = noise;
        let r0 = math::floor(cy - reach) as isize;
        let r1 = math::ceil(cy + reach) as isize;
        let c0 = math::floor(cx - reach) as isize;
        let c1 = math::ceil(cx + reach) as isize;
        for r in r0..=r1 {
            for c in c0..=c1 {
                let dy = r as f64 + 0.5 - cy;
                let dx = c as f64 + 0.5 - cx;
                let u = (dx * cos + dy * sin) / semi_major;
                let v = (-dx * sin + dy * cos) / semi_minor;
                if u * u + v * v > 1.0 {
                    continue;
                }
                if r < 0 || c < 0 || r >= self.img.height() as isize || c >= self.img.width() as isize {
                    continue;
                }
                let mut color = rgb;
                if let Some((rng, amp)) = noise.as_mut() {
                    let n = rng.random_range(-*amp..=*amp);
                    color.iter_mut().for_each(|x| *x += n);
                }
                self.blend(r, c, color, alpha);
                let (ru, cu) = (r as usize, c as usize);
                bounds = Some(match bounds {
                    None => (ru, cu, ru, cu),
                    Some((a, b, cc, d)) => (a.min(ru), b.min(cu), cc.max(ru), d.max(cu)),
                });
            }
        }
        bounds
    }
}

/// Value noise on a `cell`-spaced lattice, bilinearly interpolated.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let fy = r as f64 / cell as f64;
        let y0 = math::floor(fy) as usize;
        let ty = fy - y0 as f64;
        let ty = ty * ty * (3.0 - 2.0 * ty);
        for c in 0..w {
            let fx = c as f64 / cell as f64;
            let x0 = math::floor(fx) as usize;
            let tx = fx - x0 as f64;
            let tx = tx * tx * (3.0 - 2.0 * tx);
            let g = |y: usize, x: usize| grid[y * gw + x];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bottom = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let coarse = value_noise(rng, h, w, 48);
    let fine = value_noise(rng, h, w, 8);
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        let t = (0.75 * coarse[i] + 0.25 * fine[i]).clamp(0.0, 1.0);
        let grain = rng.random_range(-0.025..=0.025);
        for ch in 0..3 {
            let v = SAND[ch] * (1.0 - t) + DRY_GREEN[ch] * t + grain + 0.06 * (fine[i] - 0.5);
            data[ch * h * w + i] = v.clamp(0.0, 1.0);
        }
    }
    Image::new(h, w, data).expect("sized above")
}

fn sub_rng<R: Rng + ?Sized>(rng: &mut R) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(rng.random())
}

struct Placed {
    top: usize,
    left: usize,
    bottom: usize,
    right: usize,
}

impl Placed {
    fn overlaps(&self, other: &Placed, gap: usize) -> bool {
        self.left < other.right + gap
            && other.left < self.right + gap
            && self.top < other.bottom + gap
            && other.top < self.bottom + gap
    }
}

/// Axis-aligned extent of a rotated ellipse plus its shadow offset.
fn ellipse_extent(cy: f64, cx: f64, a: f64, b: f64, angle: f64, shadow: f64) -> (f64, f64, f64, f64) {
    let (sin, cos) = (libm::sin(angle), libm::cos(angle));
    let ex = math::sqrt(a * a * cos * cos + b * b * sin * sin);
    let ey = math::sqrt(a * a * sin * sin + b * b * cos * cos);
    (cy - ey - 1.0, cx - ex - 1.0, cy + ey + shadow + 1.0, cx + ex + shadow + 1.0)
}

struct AnimalShape {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    angle: f64,
    shadow: f64,
}

fn draw_animal_shape(rng: &mut ChaCha8Rng, len: (usize, usize), h: usize, w: usize) -> Option<AnimalShape> {
    let length = rng.random_range(len.0..=len.1) as f64;
    let a = length / 2.0;
    let b = (a * rng.random_range(0.38..=0.55)).max(1.0);
    let angle = rng.random_range(0.0..PI);
    let shadow = rng.random_range(1.0..=2.0);
    let margin = a + shadow + 2.0;
    if 2.0 * margin >= h.min(w) as f64 {
        return None;
    }
    let cy = rng.random_range(margin..h as f64 - margin);
    let cx = rng.random_range(margin..w as f64 - margin);
    Some(AnimalShape {
        cy,
        cx,
        a,
        b,
        angle,
        shadow,
    })
}

fn paint_animal(canvas: &mut Canvas, s: &AnimalShape, rng: &mut ChaCha8Rng) -> Option<(usize, usize, usize, usize)> {
    let shadow = canvas.ellipse(s.cy + s.shadow, s.cx + s.shadow, s.a, s.b, s.angle, SHADOW, 0.55, None);
    let tone = rng.random_range(-0.06..=0.06);
    let hide = [HIDE[0] + tone, HIDE[1] + tone, HIDE[2] + tone];
    let body = canvas.ellipse(s.cy, s.cx, s.a, s.b, s.angle, hide, 1.0, Some((rng, 0.03)));
    match (shadow, body) {
        (Some(x), Some(y)) => Some((x.0.min(y.0), x.1.min(y.1), x.2.max(y.2), x.3.max(y.3))),
        (a, b) => a.or(b),
    }
}

fn paint_tree(canvas: &mut Canvas, cy: f64, cx: f64, radius: f64, rng: &mut ChaCha8Rng) {
    canvas.ellipse(cy + 2.0, cx + 2.5, radius, radius * 0.9, 0.0, SHADOW, 0.45, None);
    let tone = rng.random_range(-0.04..=0.04);
    let crown = [CROWN[0] + tone, CROWN[1] + tone, CROWN[2] + tone];
    canvas.ellipse(cy, cx, radius, radius * rng.random_range(0.85..=1.0), rng.random_range(0.0..PI), crown, 1.0, Some((rng, 0.05)));
}

/// Renders one mosaic. Each element family draws from its own stream, so
/// removing the animals leaves every other pixel untouched.
pub fn generate_mosaic<R: Rng + ?Sized>(spec: &MosaicSpec, rng: &mut R) -> Result<Mosaic> {
    let (h, w) = (spec.height, spec.width);
    if h < 16 || w < 16 {
        return Err(Error::invalid(format!("mosaic {h}x{w} is too small")));
    }
    if spec.animal_len.0 < 2 || spec.animal_len.1 < spec.animal_len.0 {
        return Err(Error::invalid("animal length range must satisfy 2 <= min <= max"));
    }
    let mut rng_bg = sub_rng(rng);
    let mut rng_grass = sub_rng(rng);
    let mut rng_tire = sub_rng(rng);
    let mut rng_tree = sub_rng(rng);
    let mut rng_trunk = sub_rng(rng);
    let mut rng_animal = sub_rng(rng);
    let mut rng_beneath = sub_rng(rng);

    let mut canvas = Canvas {
        img: background(&mut rng_bg, h, w),
    };

    for _ in 0..spec.grass_patches {
        let cy = rng_grass.random_range(0.0..h as f64);
        let cx = rng_grass.random_range(0.0..w as f64);
        let ra = rng_grass.random_range(8.0..=28.0);
        let rb = ra * rng_grass.random_range(0.5..=1.0);
        let angle = rng_grass.random_range(0.0..PI);
        let alpha = rng_grass.random_range(0.35..=0.6);
        let mut speckle = sub_rng(&mut rng_grass);
        canvas.ellipse(cy, cx, ra, rb, angle, GRASS, alpha, Some((&mut speckle, 0.06)));
    }

    for _ in 0..spec.tire_marks {
        let angle = rng_tire.random_range(0.0..PI);
        let cy = rng_tire.random_range(0.0..h as f64);
        let cx = rng_tire.random_range(0.0..w as f64);
        let length = rng_tire.random_range(0.5..=1.0) * h.max(w) as f64;
        let gap = rng_tire.random_range(3.0..=5.0);
        let (dy, dx) = (libm::sin(angle), libm::cos(angle));
        let (ny, nx) = (dx, -dy);
        let steps = (2.0 * length) as usize;
        for track in [-0.5, 0.5] {
            let oy = cy + ny * gap * track;
            let ox = cx + nx * gap * track;
            for s in 0..steps {
                let t = s as f64 * 0.5 - length / 2.0;
                let r = math::floor(oy + dy * t) as isize;
                let c = math::floor(ox + dx * t) as isize;
                canvas.blend(r, c, TRACK, 0.55);
            }
        }
    }

    for _ in 0..spec.trees {
        let radius = rng_tree.random_range(5.0..=12.0);
        let cy = rng_tree.random_range(radius..h as f64 - radius);
        let cx = rng_tree.random_range(radius..w as f64 - radius);
        paint_tree(&mut canvas, cy, cx, radius, &mut rng_tree);
    }

    for _ in 0..spec.dead_trunks {
        let a = rng_trunk.random_range(4.0..=9.0);
        let b = rng_trunk.random_range(0.7..=1.3);
        let angle = rng_trunk.random_range(0.0..PI);
        let cy = rng_trunk.random_range(a + 1.0..h as f64 - a - 1.0);
        let cx = rng_trunk.random_range(a + 1.0..w as f64 - a - 1.0);
        canvas.ellipse(cy + 1.0, cx + 1.0, a, b, angle, SHADOW, 0.4, None);
        let mut grain = sub_rng(&mut rng_trunk);
        canvas.ellipse(cy, cx, a, b, angle, TRUNK, 1.0, Some((&mut grain, 0.04)));
    }

    // Placement first: animals must not overlap each other or the crowns
    // that hide the beneath-tree animals.
    let mut occupied: Vec<Placed> = Vec::new();
    let mut beneath = Vec::with_capacity(spec.animals_beneath_trees);
    for _ in 0..spec.animals_beneath_trees {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let Some(shape) = draw_animal_shape(&mut rng_beneath, spec.animal_len, h, w) else {
                break;
            };
            let radius = rng_beneath.random_range(6.0..=10.0);
            let dir = rng_beneath.random_range(0.0..2.0 * PI);
            let ty = shape.cy + libm::sin(dir) * radius;
            let tx = shape.cx + libm::cos(dir) * radius;
            let (t0, l0, b0, r0) = ellipse_extent(shape.cy, shape.cx, shape.a, shape.b, shape.angle, shape.shadow);
            let region = Placed {
                top: math::floor((t0).min(ty - radius - 1.0)).max(0.0) as usize,
                left: math::floor((l0).min(tx - radius - 1.0)).max(0.0) as usize,
                bottom: math::ceil((b0).max(ty + radius + 4.0)) as usize,
                right: math::ceil((r0).max(tx + radius + 4.0)) as usize,
            };
            if occupied.iter().any(|o| o.overlaps(&region, 2)) {
                continue;
            }
            occupied.push(region);
            placed = Some((shape, ty, tx, radius));
            break;
        }
        match placed {
            Some(p) => beneath.push(p),
            None => {
                return Err(Error::Insufficient(format!(
                    "could not place an animal beneath a tree inside a {h}x{w} mosaic"
                )))
            }
        }
    }
    let mut open = Vec::with_capacity(spec.animals);
    for _ in 0..spec.animals {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let Some(shape) = draw_animal_shape(&mut rng_animal, spec.animal_len, h, w) else {
                break;
            };
            let (t0, l0, b0, r0) = ellipse_extent(shape.cy, shape.cx, shape.a, shape.b, shape.angle, shape.shadow);
            let region = Placed {
                top: math::floor(t0).max(0.0) as usize,
                left: math::floor(l0).max(0.0) as usize,
                bottom: math::ceil(b0) as usize,
                right: math::ceil(r0) as usize,
            };
            if occupied.iter().any(|o| o.overlaps(&region, 2)) {
                continue;
            }
            occupied.push(region);
            placed = Some(shape);
            break;
        }
        match placed {
            Some(s) => open.push(s),
            None => {
                return Err(Error::Insufficient(format!(
                    "could not place {} animals inside a {h}x{w} mosaic",
                    spec.animals
                )))
            }
        }
    }

    let mut boxes = Vec::with_capacity(spec.total_animals());
    let to_box = |b: (usize, usize, usize, usize), kind| BBox {
        x: b.1,
        y: b.0,
        w: b.3 - b.1 + 1,
        h: b.2 - b.0 + 1,
        kind,
    };
    for shape in &open {
        if let Some(b) = paint_animal(&mut canvas, shape, &mut rng_animal) {
            boxes.push(to_box(b, AnimalKind::Open));
        }
    }
    for (shape, ty, tx, radius) in &beneath {
        if let Some(b) = paint_animal(&mut canvas, shape, &mut rng_beneath) {
            boxes.push(to_box(b, AnimalKind::BeneathTree));
        }
        paint_tree(&mut canvas, *ty, *tx, *radius, &mut rng_beneath);
    }

    Ok(Mosaic {
        image: canvas.img,
        boxes,
    })
}

/// Per-mosaic specs for a whole collection; a fraction of mosaics carries
/// animals, the rest only scenery.
pub fn mosaic_specs(cfg: &DataConfig) -> Vec<MosaicSpec> {
    (0..cfg.mosaics)
        .map(|i| {
            let mut rng = stream(cfg.seed, 1, i as u64, Tag::Mosaic);
            let with_animals = rng.random_bool(cfg.animal_mosaic_prob);
            let count = if with_animals {
                rng.random_range(cfg.animals_min..=cfg.animals_max)
            } else {
                0
            };
            let beneath = (0..count)
                .filter(|_| rng.random_bool(cfg.beneath_tree_fraction))
                .count();
            MosaicSpec {
                height: cfg.mosaic_size,
                width: cfg.mosaic_size,
                animals: count - beneath,
                animals_beneath_trees: beneath,
                trees: cfg.trees,
                grass_patches: cfg.grass_patches,
                tire_marks: cfg.tire_marks,
                dead_trunks: cfg.dead_trunks,
                animal_len: (cfg.animal_len_min, cfg.animal_len_max),
            }
        })
        .collect()
}

/// Generates the full mosaic collection described by `cfg`.
pub fn generate_mosaics(cfg: &DataConfig) -> Result<Vec<Mosaic>> {
    mosaic_specs(cfg)
        .iter()
        .enumerate()
        .map(|(i, spec)| generate_mosaic(spec, &mut stream(cfg.seed, 0, i as u64, Tag::Mosaic)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(animals: usize, beneath: usize) -> MosaicSpec {
        MosaicSpec {
            height: 128,
            width: 160,
            animals,
            animals_beneath_trees: beneath,
            trees: 4,
            grass_patches: 3,
            tire_marks: 1,
            dead_trunks: 3,
            animal_len: (4, 12),
        }
    }

    #[test]
    fn no_animals_no_boxes() {
        let m = generate_mosaic(&spec(0, 0), &mut stream(1, 0, 0, Tag::Mosaic)).unwrap();
        assert!(m.boxes.is_empty());
        assert!(m.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic() {
        let a = generate_mosaic(&spec(3, 1), &mut stream(2, 0, 0, Tag::Mosaic)).unwrap();
        let b = generate_mosaic(&spec(3, 1), &mut stream(2, 0, 0, Tag::Mosaic)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn boxes_inside_and_animals_visible() {
        let with = generate_mosaic(&spec(5, 2), &mut stream(3, 0, 0, Tag::Mosaic)).unwrap();
        let without = generate_mosaic(&spec(0, 0), &mut stream(3, 0, 0, Tag::Mosaic)).unwrap();
        assert_eq!(with.boxes.len(), 7);
        for b in &with.boxes {
            assert!(b.x + b.w <= 160 && b.y + b.h <= 128);
            assert!(b.w >= 2 && b.h >= 2 && b.w <= 20 && b.h <= 20, "{b:?}");
            let mut diff = 0.0;
            for ch in 0..3 {
                for r in b.y..b.y + b.h {
                    for c in b.x..b.x + b.w {
                        diff += (with.image.get(ch, r, c) - without.image.get(ch, r, c)).abs();
                    }
                }
            }
            assert!(diff > 0.0);
        }
    }

    #[test]
    fn overcrowding_is_an_error() {
        let mut s = spec(400, 0);
        s.height = 32;
        s.width = 32;
        assert!(matches!(
            generate_mosaic(&s, &mut stream(0, 0, 0, Tag::Mosaic)),
            Err(Error::Insufficient(_))
        ));
    }
}
