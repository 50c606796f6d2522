//! Shoebox room acoustics by the image-source method, plus the grid scene of
//! candidate speaker positions and out-of-grid (OOG) noise positions observed
//! by a fixed linear array.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{convolve_slices, MultichannelSignal, Signal, SAMPLE_RATE};

pub type Point = [f64; 3];

/// Half-width of the windowed-sinc fractional-delay kernel, in samples.
const SINC_HALF_WIDTH: usize = 32;
/// Reflection gain below which an image is dropped (-60 dB).
const MIN_REFLECTION_GAIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    pub dimensions: Point,
    pub t60: f64,
    #[serde(default = "default_speed_of_sound")]
    pub speed_of_sound: f64,
    /// Cap on the total reflection order; `None` derives it from the -60 dB rule.
    #[serde(default)]
    pub max_order: Option<usize>,
}

fn default_speed_of_sound() -> f64 {
    343.0
}

impl RoomSpec {
    pub fn desk_scale(t60: f64) -> Self {
        Self {
            dimensions: [6.0, 6.0, 2.4],
            t60,
            speed_of_sound: 343.0,
            max_order: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "room dimensions must be positive, got {:?}",
                self.dimensions
            )));
        }
        if !(self.t60.is_finite() && self.t60 >= 0.0) {
            return Err(Error::InvalidT60 { t60: self.t60 });
        }
        if !(self.speed_of_sound.is_finite() && self.speed_of_sound > 0.0) {
            return Err(Error::InvalidInput("speed of sound must be positive".into()));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dimensions.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dimensions;
        2.0 * (x * y + x * z + y * z)
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.iter()
            .zip(&self.dimensions)
            .all(|(v, d)| v.is_finite() && *v > 0.0 && v < d)
    }
}

/// Uniform wall reflection coefficient for a target T60.
///
/// Starts from the Eyring inversion `T60 = 24 ln10 V / (-c S ln(1 - alpha))`,
/// `beta = sqrt(1 - alpha)`, which assumes every ray sees the mean
/// reflection rate `S / 4V`. Image sources travelling along the long room
/// axes reflect less often and dominate the late decay, so the exponent is
/// rescaled until the Schroeder -5..-25 dB slope of the directional image
/// energy model hits the target.
pub fn sabine_reflectivity(room: &RoomSpec) -> Result<f64> {
    room.validate()?;
    if room.t60 <= 0.0 {
        return Err(Error::InvalidT60 { t60: room.t60 });
    }
    let k = 24.0 * std::f64::consts::LN_10 / room.speed_of_sound;
    // ln(1 - alpha) = -k V / (S T60); beta^2 = 1 - alpha
    let log_energy = -k * room.volume() / (room.surface() * room.t60);
    let log_energy = log_energy * eyring_mismatch(&room.dimensions);
    let beta = (0.5 * log_energy).exp();
    if !(beta > 1e-12 && beta < 1.0) {
        return Err(Error::InvalidT60 { t60: room.t60 });
    }
    Ok(beta)
}

/// Ratio of the image-model T20 to the Eyring T60 for the same absorption.
///
/// Along unit direction `u` an image at distance `x` has undergone about
/// `x * g(u)` reflections with `g(u) = sum |u_a| / L_a`, so the image energy
/// envelope is `E(x) = mean_u exp(-kappa g(u) x)`. Eyring uses the spherical
/// mean of `g`, `S / 4V`. Both decays scale as `1 / kappa`, so the ratio is a
/// property of the room shape alone.
fn eyring_mismatch(dims: &Point) -> f64 {
    const DIRS: usize = 512;
    const STEPS: usize = 400;
    // Fibonacci points on the positive octant of the sphere
    let golden = PI * (3.0 - 5f64.sqrt());
    let rates: Vec<f64> = (0..DIRS)
        .map(|i| {
            let z = (i as f64 + 0.5) / DIRS as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = (golden * i as f64).rem_euclid(PI / 2.0);
            [r * phi.cos(), r * phi.sin(), z]
                .iter()
                .zip(dims)
                .map(|(u, l)| u.abs() / l)
                .sum()
        })
        .collect();
    let mean_rate = rates.iter().sum::<f64>() / DIRS as f64;
    let min_rate = rates.iter().cloned().fold(f64::INFINITY, f64::min);
    // Schroeder integral of E with kappa = 1: sum exp(-g x) / g
    let edc = |x: f64| rates.iter().map(|g| (-g * x).exp() / g).sum::<f64>();
    let e0 = edc(0.0);
    let x_max = 35.0 * std::f64::consts::LN_10 / 10.0 / min_rate;
    let (mut sx, mut sy, mut sxx, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in 0..=STEPS {
        let x = x_max * s as f64 / STEPS as f64;
        let db = 10.0 * (edc(x) / e0).log10();
        if (-25.0..=-5.0).contains(&db) {
            sx += x;
            sy += db;
            sxx += x * x;
            sxy += x * db;
            n += 1.0;
        }
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let model_decay = -60.0 / slope;
    // Eyring: 60 dB after ln(10^6) / mean_rate with kappa = 1
    let eyring_decay = 6.0 * std::f64::consts::LN_10 / mean_rate;
    model_decay / eyring_decay
}

/// Acoustic impulse response from a source to a microphone.
#[derive(Debug, Clone, PartialEq)]
pub struct Air {
    pub taps: Vec<f64>,
    pub sample_rate: u32,
}

/// Image-source AIR of `air_len` taps at [`SAMPLE_RATE`]. Each image
/// contributes `beta^order / (4 pi r)` at delay `r / c`, placed with a
/// Hann-windowed sinc. Images whose reflection gain falls below -60 dB or
/// whose delay exceeds the response length are skipped.
pub fn image_source_air(room: &RoomSpec, src: &Point, mic: &Point, air_len: usize) -> Result<Air> {
    room.validate()?;
    for (name, p) in [("source", src), ("microphone", mic)] {
        if !room.contains(p) {
            return Err(Error::OutsideRoom(format!("{name} at {p:?}")));
        }
    }
    if src == mic {
        return Err(Error::InvalidInput("source and microphone coincide".into()));
    }
    if air_len == 0 {
        return Err(Error::InvalidInput("air_len must be positive".into()));
    }
    let beta = if room.t60 == 0.0 {
        0.0
    } else {
        sabine_reflectivity(room)?
    };
    let fs = SAMPLE_RATE as f64;
    let c = room.speed_of_sound;
    let max_dist = (air_len + SINC_HALF_WIDTH) as f64 * c / fs;
    let order_cap = if beta == 0.0 {
        0
    } else {
        let by_gain = (MIN_REFLECTION_GAIN.ln() / beta.ln()).floor() as usize;
        room.max_order.map_or(by_gain, |m| m.min(by_gain))
    };

    // Per-axis images: (offset from mic along the axis, reflection count)
    let axes: Vec<Vec<(f64, usize)>> = (0..3)
        .map(|a| axis_images(src[a], mic[a], room.dimensions[a], max_dist, order_cap))
        .collect();

    let mut taps = vec![0.0; air_len];
    let max_d2 = max_dist * max_dist;
    for &(dx, ox) in &axes[0] {
        for &(dy, oy) in &axes[1] {
            let dxy2 = dx * dx + dy * dy;
            if dxy2 > max_d2 || ox + oy > order_cap {
                continue;
            }
            for &(dz, oz) in &axes[2] {
                let order = ox + oy + oz;
                let d2 = dxy2 + dz * dz;
                if d2 > max_d2 || order > order_cap {
                    continue;
                }
                let dist = d2.sqrt();
                let gain = beta.powi(order as i32) / (4.0 * PI * dist);
                add_fractional_impulse(&mut taps, dist / c * fs, gain);
            }
        }
    }
    Ok(Air {
        taps,
        sample_rate: SAMPLE_RATE,
    })
}

/// Image coordinates along one axis: index `i` mirrors the source `|i|` times.
fn axis_images(s: f64, m: f64, len: f64, max_dist: f64, order_cap: usize) -> Vec<(f64, usize)> {
    let reach = (max_dist / len).ceil() as i64 + 1;
    let reach = reach.min(order_cap as i64);
    let mut out = Vec::new();
    for i in -reach..=reach {
        let x = if i % 2 == 0 {
            i as f64 * len + s
        } else {
            (i + 1) as f64 * len - s
        };
        let d = x - m;
        if d.abs() <= max_dist {
            out.push((d, i.unsigned_abs() as usize));
        }
    }
    out
}

/// Adds `gain * sinc(n - delay) * hann(n - delay)` over the kernel support.
fn add_fractional_impulse(taps: &mut [f64], delay: f64, gain: f64) {
    let w = SINC_HALF_WIDTH as f64;
    let first = (delay - w).floor() as i64 + 1;
    let last = (delay + w).ceil() as i64 - 1;
    let lo = first.max(0);
    let hi = last.min(taps.len() as i64 - 1);
    if lo > hi {
        return;
    }
    let x0 = lo as f64 - delay;
    // sin(pi x) flips sign each step; cos(pi x / W) advances by a fixed rotation
    let mut sin_px = (PI * x0).sin();
    let (step_s, step_c) = (PI / w).sin_cos();
    let (mut win_s, mut win_c) = (PI * x0 / w).sin_cos();
    for n in lo..=hi {
        let x = n as f64 - delay;
        let sinc = if x.abs() < 1e-12 { 1.0 } else { sin_px / (PI * x) };
        let hann = 0.5 * (1.0 + win_c);
        taps[n as usize] += gain * sinc * hann;
        sin_px = -sin_px;
        let c = win_c * step_c - win_s * step_s;
        win_s = win_s * step_c + win_c * step_s;
        win_c = c;
    }
}

/// Regular grid of candidate speaker positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub origin: Point,
    pub counts: [usize; 3],
    pub spacing: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub mic_positions: Vec<Point>,
    pub ref_index: usize,
    pub grid: GridSpec,
    pub oog_positions: Vec<Point>,
}

impl SceneSpec {
    /// 144-position grid 2 m in front of a five-microphone linear array with
    /// offsets of -13, -5, 0, +5, +13 cm around the central reference.
    pub fn desk_scale() -> Self {
        let center = [3.0, 3.0, 1.2];
        let counts = [8usize, 6, 3];
        let spacing = [0.06, 0.06, 0.08];
        let origin = [0, 1, 2].map(|a| center[a] - spacing[a] * (counts[a] - 1) as f64 / 2.0);
        let mic_positions = [-0.13, -0.05, 0.0, 0.05, 0.13]
            .iter()
            .map(|dx| [center[0] + dx, 1.0, 1.2])
            .collect();
        let oog_positions = vec![
            [1.0, 4.5, 1.5],
            [5.0, 4.5, 1.5],
            [1.0, 2.0, 1.7],
            [5.0, 2.0, 1.7],
            [1.5, 5.3, 1.0],
            [4.5, 5.3, 1.0],
            [0.8, 3.0, 1.3],
            [5.2, 3.0, 1.3],
        ];
        Self {
            mic_positions,
            ref_index: 2,
            grid: GridSpec {
                origin,
                counts,
                spacing,
            },
            oog_positions,
        }
    }
}

/// A source location in a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceId {
    Grid(usize),
    Oog(usize),
}

/// Validated scene with the grid vertices enumerated x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    spec: SceneSpec,
    grid_positions: Vec<Point>,
}

pub fn build_scene(spec: &SceneSpec, room: &RoomSpec) -> Result<Scene> {
    room.validate()?;
    let m = spec.mic_positions.len();
    if m < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 microphones, got {m}")));
    }
    if spec.ref_index >= m {
        return Err(Error::InvalidInput(format!(
            "reference index {} out of range for {m} microphones",
            spec.ref_index
        )));
    }
    if spec.grid.counts.contains(&0) {
        return Err(Error::InvalidInput("grid counts must be at least 1".into()));
    }
    let [nx, ny, nz] = spec.grid.counts;
    let mut grid_positions = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = [i, j, k];
                grid_positions.push([0, 1, 2].map(|a| {
                    spec.grid.origin[a] + idx[a] as f64 * spec.grid.spacing[a]
                }));
            }
        }
    }
    let mut offenders = Vec::new();
    for (i, p) in spec.mic_positions.iter().enumerate() {
        if !room.contains(p) {
            offenders.push(format!("mic {i} {p:?}"));
        }
    }
    for (i, p) in grid_positions.iter().enumerate() {
        if !room.contains(p) {
            offenders.push(format!("grid {i} {p:?}"));
        }
    }
    for (i, p) in spec.oog_positions.iter().enumerate() {
        if !room.contains(p) {
            offenders.push(format!("oog {i} {p:?}"));
        }
    }
    if !offenders.is_empty() {
        return Err(Error::OutsideRoom(offenders.join(", ")));
    }
    Ok(Scene {
        spec: spec.clone(),
        grid_positions,
    })
}

impl Scene {
    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn num_positions(&self) -> usize {
        self.grid_positions.len()
    }

    pub fn num_oog(&self) -> usize {
        self.spec.oog_positions.len()
    }

    pub fn num_mics(&self) -> usize {
        self.spec.mic_positions.len()
    }

    pub fn ref_index(&self) -> usize {
        self.spec.ref_index
    }

    pub fn grid_positions(&self) -> &[Point] {
        &self.grid_positions
    }

    pub fn grid_index(&self, ijk: [usize; 3]) -> Result<usize> {
        let [nx, ny, nz] = self.spec.grid.counts;
        let [i, j, k] = ijk;
        if i >= nx || j >= ny || k >= nz {
            return Err(Error::InvalidInput(format!("grid coordinate {ijk:?} out of range")));
        }
        Ok(i + nx * (j + ny * k))
    }

    pub fn grid_coords(&self, index: usize) -> Result<[usize; 3]> {
        if index >= self.num_positions() {
            return Err(Error::UnknownPosition(index));
        }
        let [nx, ny, _] = self.spec.grid.counts;
        Ok([index % nx, (index / nx) % ny, index / (nx * ny)])
    }

    pub fn position(&self, id: SourceId) -> Result<Point> {
        match id {
            SourceId::Grid(i) => self
                .grid_positions
                .get(i)
                .copied()
                .ok_or(Error::UnknownPosition(i)),
            SourceId::Oog(i) => self
                .spec
                .oog_positions
                .get(i)
                .copied()
                .ok_or(Error::UnknownPosition(i)),
        }
    }

    /// One AIR per microphone for the given source.
    pub fn airs(&self, room: &RoomSpec, id: SourceId, air_len: usize) -> Result<Vec<Air>> {
        let src = self.position(id)?;
        self.spec
            .mic_positions
            .par_iter()
            .map(|mic| image_source_air(room, &src, mic, air_len))
            .collect()
    }
}

/// Convolves `excitation` with the AIR of every microphone for `id`.
pub fn render_position(
    scene: &Scene,
    room: &RoomSpec,
    id: SourceId,
    excitation: &Signal,
    air_len: usize,
) -> Result<MultichannelSignal> {
    let airs = scene.airs(room, id, air_len)?;
    render_with_airs(&airs, excitation, scene.ref_index())
}

/// Full-length convolution of `excitation` with each AIR.
pub fn render_with_airs(airs: &[Air], excitation: &Signal, ref_index: usize) -> Result<MultichannelSignal> {
    if excitation.is_empty() {
        return Err(Error::InvalidInput("empty excitation".into()));
    }
    let channels = airs
        .par_iter()
        .map(|air| Signal::new(convolve_slices(excitation.samples(), &air.taps), excitation.sample_rate()))
        .collect::<Result<Vec<_>>>()?;
    MultichannelSignal::new(channels, ref_index)
}
