use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{BoxCxcywh, GroundTruthObject, MotionLabel};
use crate::tensor::Tensor;

/// Background texture: `BACKGROUND_BASE ± BACKGROUND_AMPLITUDE`.
const BACKGROUND_BASE: f64 = 0.45;
const BACKGROUND_AMPLITUDE: f64 = 0.1;
/// Lattice spacing of the value noise, in pixels.
const NOISE_CELL: usize = 8;
/// Minimum per-channel gap between an object fill and the background base,
/// and between two fills.
const FILL_CONTRAST: f64 = 0.3;
const FILL_SEPARATION: f64 = 0.1;
const PLACEMENT_ATTEMPTS: usize = 200;

/// Closed integer range `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub min: i64,
    pub max: i64,
}

impl IntRange {
    pub const fn new(min: i64, max: i64) -> Self {
        IntRange { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> i64 {
        rng.gen_range(self.min..=self.max)
    }
}

/// Scene generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub objects: IntRange,
    /// Object width and height range as fractions of the image width.
    pub size_fraction: [f64; 2],
    /// Speed of moving objects, as the Chebyshev norm of the integer
    /// per-frame velocity.
    pub speed: IntRange,
    /// Probability that an object is static in the world.
    pub static_fraction: f64,
    /// Per-axis camera shift range in px/frame; absent disables ego motion.
    pub ego_motion: Option<IntRange>,
    pub texture_seed: u64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            objects: IntRange::new(1, 4),
            size_fraction: [0.10, 0.25],
            speed: IntRange::new(2, 6),
            static_fraction: 0.4,
            ego_motion: None,
            texture_seed: 0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// Default spec with ego motion in `[−3, 3]` px per axis.
    pub fn with_ego_motion() -> Self {
        SceneSpec {
            ego_motion: Some(IntRange::new(-3, 3)),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("height", "image size must be positive"));
        }
        if self.objects.min < 0 || self.objects.min > self.objects.max {
            return Err(Error::config("objects", "need 0 <= min <= max"));
        }
        let [lo, hi] = self.size_fraction;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config("size_fraction", "need 0 < min <= max <= 1"));
        }
        if self.min_side() < 1 {
            return Err(Error::config("size_fraction", "objects would be smaller than one pixel"));
        }
        if self.speed.min < 0 || self.speed.min > self.speed.max {
            return Err(Error::config("speed", "need 0 <= min <= max"));
        }
        if !(0.0..=1.0).contains(&self.static_fraction) {
            return Err(Error::config("static_fraction", "must lie in [0, 1]"));
        }
        if let Some(ego) = self.ego_motion {
            if ego.min > ego.max {
                return Err(Error::config("ego_motion", "need min <= max"));
            }
        }
        Ok(())
    }

    fn min_side(&self) -> usize {
        (self.size_fraction[0] * self.width as f64).round() as usize
    }

    fn max_side(&self) -> usize {
        (self.size_fraction[1] * self.width as f64).round() as usize
    }
}

/// Two consecutive frames with analytic flow and frame-`t+1` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub frame_t: Tensor,
    pub frame_t1: Tensor,
    /// `2×H×W` displacement `(dx, dy)` in pixels from `t` to `t+1`, on the
    /// frame-`t` grid.
    pub flow: Option<Tensor>,
    pub objects: Vec<GroundTruthObject>,
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    x: i64,
    y: i64,
    w: i64,
    h: i64,
    velocity: (i64, i64),
    fill: [f64; 3],
}

impl Placed {
    fn shifted(&self, (dx, dy): (i64, i64)) -> (i64, i64) {
        (self.x + dx, self.y + dy)
    }

    fn overlaps(&self, other: &Placed, a: (i64, i64), b: (i64, i64)) -> bool {
        // One pixel of clearance keeps the rectangles visually separate.
        a.0 < b.0 + other.w + 1 && b.0 < a.0 + self.w + 1 && a.1 < b.1 + other.h + 1 && b.1 < a.1 + self.h + 1
    }
}

fn quantize(v: f64) -> f64 {
    f64::from(v as f32)
}

fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let (gh, gw) = (h / NOISE_CELL + 2, w / NOISE_CELL + 2);
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        for y in 0..h {
            let (gy, fy) = (y / NOISE_CELL, (y % NOISE_CELL) as f64 / NOISE_CELL as f64);
            for x in 0..w {
                let (gx, fx) = (x / NOISE_CELL, (x % NOISE_CELL) as f64 / NOISE_CELL as f64);
                let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
                let top = at(gy, gx) * (1.0 - fx) + at(gy, gx + 1) * fx;
                let bottom = at(gy + 1, gx) * (1.0 - fx) + at(gy + 1, gx + 1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out[(c * h + y) * w + x] = quantize(BACKGROUND_BASE + BACKGROUND_AMPLITUDE * v);
            }
        }
    }
    out
}

fn sample_fill(rng: &mut ChaCha8Rng, taken: &[Placed]) -> [f64; 3] {
    loop {
        let fill = [0; 3].map(|_| quantize(rng.gen_range(0.0..=1.0)));
        let contrast = fill.iter().any(|c| (c - BACKGROUND_BASE).abs() >= FILL_CONTRAST);
        let distinct = taken.iter().all(|o| {
            o.fill
                .iter()
                .zip(&fill)
                .any(|(a, b)| (a - b).abs() >= FILL_SEPARATION)
        });
        if contrast && distinct {
            return fill;
        }
    }
}

fn sample_velocity(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (i64, i64) {
    if rng.gen_bool(spec.static_fraction) {
        return (0, 0);
    }
    let s = spec.speed.sample(rng);
    if s == 0 {
        return (0, 0);
    }
    let free = rng.gen_range(-s..=s);
    let fixed = if rng.gen_bool(0.5) { s } else { -s };
    if rng.gen_bool(0.5) {
        (fixed, free)
    } else {
        (free, fixed)
    }
}

/// Integer position range keeping `[p, p+side)` and `[p+d, p+d+side)` inside
/// `[0, extent)`.
fn position_range(extent: i64, side: i64, d: i64) -> Option<(i64, i64)> {
    let lo = 0.max(-d);
    let hi = (extent - side).min(extent - side - d);
    (lo <= hi).then_some((lo, hi))
}

/// Renders one sample. `(spec, seed)` fully determines the output.
pub fn generate_sample(spec: &SceneSpec, seed: u64) -> Result<SamplePair> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (hi, wi) = (h as i64, w as i64);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(seed);
    let mut texture_rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    texture_rng.set_stream(seed);

    let ego = spec
        .ego_motion
        .map_or((0, 0), |r| (r.sample(&mut rng), r.sample(&mut rng)));
    let count = spec.objects.sample(&mut rng) as usize;
    let (min_side, max_side) = (spec.min_side() as i64, spec.max_side() as i64);

    let mut objects: Vec<Placed> = Vec::with_capacity(count);
    for k in 0..count {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let (ow, oh) = (rng.gen_range(min_side..=max_side), rng.gen_range(min_side..=max_side));
            let velocity = sample_velocity(spec, &mut rng);
            let shift = (velocity.0 + ego.0, velocity.1 + ego.1);
            let (Some(xr), Some(yr)) = (position_range(wi, ow, shift.0), position_range(hi, oh, shift.1))
            else {
                continue;
            };
            let cand = Placed {
                x: rng.gen_range(xr.0..=xr.1),
                y: rng.gen_range(yr.0..=yr.1),
                w: ow,
                h: oh,
                velocity,
                fill: [0.0; 3],
            };
            let clear = objects.iter().all(|o| {
                let o_shift = (o.velocity.0 + ego.0, o.velocity.1 + ego.1);
                !cand.overlaps(o, (cand.x, cand.y), (o.x, o.y))
                    && !cand.overlaps(o, cand.shifted(shift), o.shifted(o_shift))
            });
            if clear {
                placed = Some(cand);
                break;
            }
        }
        let mut obj = placed.ok_or_else(|| {
            Error::Infeasible(format!(
                "could not place object {} of {count} after {PLACEMENT_ATTEMPTS} attempts",
                k + 1
            ))
        })?;
        obj.fill = sample_fill(&mut rng, &objects);
        objects.push(obj);
    }

    let background = value_noise(&mut texture_rng, h, w);
    let plane = h * w;
    let mut frame_t = background.clone();
    let mut frame_t1 = vec![0.0; 3 * plane];
    let mut flow = vec![0.0; 2 * plane];
    for y in 0..h {
        for x in 0..w {
            let sx = (x as i64 - ego.0).rem_euclid(wi) as usize;
            let sy = (y as i64 - ego.1).rem_euclid(hi) as usize;
            for c in 0..3 {
                frame_t1[c * plane + y * w + x] = background[c * plane + sy * w + sx];
            }
            flow[y * w + x] = ego.0 as f64;
            flow[plane + y * w + x] = ego.1 as f64;
        }
    }
    let paint = |img: &mut [f64], o: &Placed, (ox, oy): (i64, i64)| {
        for y in oy..oy + o.h {
            for x in ox..ox + o.w {
                for (c, v) in o.fill.iter().enumerate() {
                    img[c * plane + y as usize * w + x as usize] = *v;
                }
            }
        }
    };
    let mut labels = Vec::with_capacity(objects.len());
    for o in &objects {
        let shift = (o.velocity.0 + ego.0, o.velocity.1 + ego.1);
        paint(&mut frame_t, o, (o.x, o.y));
        paint(&mut frame_t1, o, o.shifted(shift));
        for y in o.y..o.y + o.h {
            for x in o.x..o.x + o.w {
                let i = y as usize * w + x as usize;
                flow[i] = shift.0 as f64;
                flow[plane + i] = shift.1 as f64;
            }
        }
        let (x1, y1) = o.shifted(shift);
        let (wf, hf) = (w as f64, h as f64);
        let bbox = BoxCxcywh::from_corners(
            x1 as f64 / wf,
            y1 as f64 / hf,
            (x1 + o.w) as f64 / wf,
            (y1 + o.h) as f64 / hf,
        );
        let label = if o.velocity == (0, 0) {
            MotionLabel::Static
        } else {
            MotionLabel::Moving
        };
        labels.push(GroundTruthObject::new(bbox, label));
    }

    Ok(SamplePair {
        frame_t: Tensor::new(&[3, h, w], frame_t)?,
        frame_t1: Tensor::new(&[3, h, w], frame_t1)?,
        flow: Some(Tensor::new(&[2, h, w], flow)?),
        objects: labels,
    })
}

/// `count` samples with seeds `0..count`.
pub fn generate_samples(spec: &SceneSpec, count: usize) -> Result<Vec<SamplePair>> {
    (0..count as u64).map(|i| generate_sample(spec, i)).collect()
}
