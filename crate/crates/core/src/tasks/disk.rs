//! Tracked red disk among moving distractors, rendered and reduced to a
//! centroid measurement.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::factors::{Payload, DISK_DRAG, DISK_SPRING};

use super::TaskError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiskSimConfig {
    pub spring: f64,
    pub drag: f64,
    /// Process-noise variance added to each position coordinate per step.
    pub position_noise_var: f64,
    /// Process-noise variance added to each velocity coordinate per step.
    pub velocity_noise_var: f64,
    pub image_size: usize,
    pub distractors: usize,
    pub length: usize,
    pub radius: f64,
    pub distractor_radius: (f64, f64),
    /// Initial velocity components are uniform in `±initial_speed`.
    pub initial_speed: f64,
}

impl Default for DiskSimConfig {
    fn default() -> Self {
        DiskSimConfig {
            spring: DISK_SPRING,
            drag: DISK_DRAG,
            position_noise_var: 0.1,
            velocity_noise_var: 2.0,
            image_size: 120,
            distractors: 25,
            length: 20,
            radius: 8.0,
            distractor_radius: (5.0, 15.0),
            initial_speed: 5.0,
        }
    }
}

impl DiskSimConfig {
    pub fn center(&self) -> f64 {
        self.image_size as f64 / 2.0
    }
}

/// One step of the disk dynamics without noise, in image-centred
/// coordinates.
pub fn disk_step(config: &DiskSimConfig, x: [f64; 4]) -> [f64; 4] {
    let mut out = [x[0] + x[2], x[1] + x[3], 0.0, 0.0];
    for k in 0..2 {
        let v = x[2 + k];
        out[2 + k] = v - config.spring * x[k] - config.drag * v * v.abs();
    }
    out
}

/// State sequence starting at `x0`. Position noise is added to `p'`,
/// velocity noise to `v'`.
pub fn simulate_disk_from<R: Rng>(
    config: &DiskSimConfig,
    x0: [f64; 4],
    length: usize,
    rng: &mut R,
) -> Vec<[f64; 4]> {
    let pn = Normal::new(0.0, config.position_noise_var.sqrt()).expect("finite variance");
    let vn = Normal::new(0.0, config.velocity_noise_var.sqrt()).expect("finite variance");
    let mut states = Vec::with_capacity(length);
    let mut x = x0;
    for t in 0..length {
        if t > 0 {
            let mut n = disk_step(config, x);
            n[0] += pn.sample(rng);
            n[1] += pn.sample(rng);
            n[2] += vn.sample(rng);
            n[3] += vn.sample(rng);
            x = n;
        }
        states.push(x);
    }
    states
}

pub fn random_initial_state<R: Rng>(config: &DiskSimConfig, rng: &mut R) -> [f64; 4] {
    let h = config.center();
    let s = config.initial_speed;
    [
        rng.random_range(-h..h),
        rng.random_range(-h..h),
        rng.random_range(-s..=s),
        rng.random_range(-s..=s),
    ]
}

pub fn simulate_disk<R: Rng>(config: &DiskSimConfig, rng: &mut R) -> Vec<[f64; 4]> {
    let x0 = random_initial_state(config, rng);
    simulate_disk_from(config, x0, config.length, rng)
}

/// A distractor disk: its trajectory, radius, colour and draw order.
#[derive(Debug, Clone, PartialEq)]
pub struct Distractor {
    pub states: Vec<[f64; 4]>,
    pub radius: f64,
    pub color: [u8; 3],
    /// Drawn over the tracked disk.
    pub above: bool,
}

pub const TRACKED_COLOR: [u8; 3] = [255, 0, 0];

fn random_non_red<R: Rng>(rng: &mut R) -> [u8; 3] {
    loop {
        let c: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        let reddish = c[0] > 120 && (c[1] as u16 + c[2] as u16) < c[0] as u16;
        if !reddish {
            return c;
        }
    }
}

pub fn random_distractors<R: Rng>(config: &DiskSimConfig, rng: &mut R) -> Vec<Distractor> {
    (0..config.distractors)
        .map(|_| {
            let states = simulate_disk(config, rng);
            let (lo, hi) = config.distractor_radius;
            Distractor {
                states,
                radius: rng.random_range(lo..=hi),
                color: random_non_red(rng),
                above: rng.random_bool(0.5),
            }
        })
        .collect()
}

const BACKGROUND: u16 = 0;
const TRACKED: u16 = 1;

/// Per-pixel owner labels: 0 background, 1 tracked disk, `k + 2` distractor
/// `k`. Pixel `(u, v)` covers `[u, u+1) × [v, v+1)` in image coordinates.
pub fn rasterize(
    config: &DiskSimConfig,
    tracked: [f64; 4],
    distractors: &[Distractor],
    t: usize,
) -> Vec<u16> {
    let n = config.image_size;
    let c = config.center();
    let mut labels = vec![BACKGROUND; n * n];
    let mut paint = |p: [f64; 4], radius: f64, label: u16| {
        let (cx, cy) = (p[0] + c, p[1] + c);
        let r2 = radius * radius;
        let u0 = ((cx - radius).floor().max(0.0)) as usize;
        let u1 = ((cx + radius).ceil().min(n as f64)).max(0.0) as usize;
        let v0 = ((cy - radius).floor().max(0.0)) as usize;
        let v1 = ((cy + radius).ceil().min(n as f64)).max(0.0) as usize;
        for v in v0..v1 {
            for u in u0..u1 {
                let dx = u as f64 + 0.5 - cx;
                let dy = v as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r2 {
                    labels[v * n + u] = label;
                }
            }
        }
    };
    for (k, d) in distractors.iter().enumerate().filter(|(_, d)| !d.above) {
        paint(d.states[t], d.radius, k as u16 + 2);
    }
    paint(tracked, config.radius, TRACKED);
    for (k, d) in distractors.iter().enumerate().filter(|(_, d)| d.above) {
        paint(d.states[t], d.radius, k as u16 + 2);
    }
    labels
}

/// Centroid of visible tracked pixels in image coordinates (image centre if
/// none are visible) and the visible pixel count.
pub fn extract(config: &DiskSimConfig, labels: &[u16]) -> Payload {
    let n = config.image_size;
    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
    for v in 0..n {
        for u in 0..n {
            if labels[v * n + u] == TRACKED {
                sx += u as f64 + 0.5;
                sy += v as f64 + 0.5;
                count += 1;
            }
        }
    }
    let z = if count == 0 {
        vec![config.center(), config.center()]
    } else {
        vec![sx / count as f64, sy / count as f64]
    };
    Payload {
        z,
        feature: count as f64,
    }
}

pub fn render_and_extract(
    config: &DiskSimConfig,
    states: &[[f64; 4]],
    distractors: &[Distractor],
) -> Vec<Payload> {
    states
        .iter()
        .enumerate()
        .map(|(t, &x)| extract(config, &rasterize(config, x, distractors, t)))
        .collect()
}

/// Writes `dir/<t>.png` for every frame.
pub fn dump_frames(
    config: &DiskSimConfig,
    states: &[[f64; 4]],
    distractors: &[Distractor],
    dir: &Path,
) -> Result<(), TaskError> {
    fs::create_dir_all(dir)?;
    let n = config.image_size;
    for (t, &x) in states.iter().enumerate() {
        let labels = rasterize(config, x, distractors, t);
        let mut rgb = Vec::with_capacity(n * n * 3);
        for &l in &labels {
            let c = match l {
                BACKGROUND => [255, 255, 255],
                TRACKED => TRACKED_COLOR,
                k => distractors[k as usize - 2].color,
            };
            rgb.extend_from_slice(&c);
        }
        let file = fs::File::create(dir.join(format!("{t}.png")))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), n as u32, n as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc
            .write_header()
            .map_err(|e| TaskError::Format(e.to_string()))?;
        w.write_image_data(&rgb)
            .map_err(|e| TaskError::Format(e.to_string()))?;
    }
    Ok(())
}
