//! Data pipeline: driving-log ingestion, target standardization, clip
//! construction, mirroring augmentation, keyframe-reduction schemes and the
//! synthetic desk-scale corpus with an analytic steering oracle.

use crate::error::{Error, Result};
use crate::model::{ClipInput, VehicleTriple};
use crate::tensor::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Nominal frame period for 20 FPS capture.
pub const NOMINAL_PERIOD_MS: i64 = 50;

/// Curvature-to-angle gain of the synthetic generator (radians per unit
/// curvature). The pixel-to-angle mapping is deterministic through this
/// constant, so labels are exactly recoverable from rendered curvature.
pub const ANGLE_GAIN: f64 = 0.5;

/// Base speed (m/s) of the synthetic generator.
pub const SPEED_BASE: f64 = 8.0;

/// Speed reduction per unit |curvature| (m/s): the synthetic driver slows
/// down in curves, so speed is recoverable from pixels. |curvature| is
/// mirror-invariant, keeping flipped labels consistent.
pub const SPEED_CURVE_GAIN: f64 = 1.0;

/// 8-bit RGB frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>, // row-major, 3 bytes per pixel
}

impl Frame {
    pub fn new(width: usize, height: usize) -> Self {
        Frame {
            width,
            height,
            rgb: vec![0; width * height * 3],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, p: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&p);
    }

    pub fn flip_lr(&self) -> Frame {
        let mut out = Frame::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(x, y, self.pixel(self.width - 1 - x, y));
            }
        }
        out
    }

    /// Drop the top `rows` pixel rows.
    pub fn crop_top(&self, rows: usize) -> Result<Frame> {
        if rows >= self.height {
            return Err(Error::Config(format!(
                "cannot crop {rows} rows from height {}",
                self.height
            )));
        }
        let mut out = Frame::new(self.width, self.height - rows);
        let start = rows * self.width * 3;
        out.rgb.copy_from_slice(&self.rgb[start..]);
        Ok(out)
    }

    /// Bilinear resize.
    pub fn resize(&self, width: usize, height: usize) -> Result<Frame> {
        if width == 0 || height == 0 {
            return Err(Error::Config("resize target must be >= 1".into()));
        }
        let mut out = Frame::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                let mut p = [0u8; 3];
                for ch in 0..3 {
                    let v00 = self.pixel(x0, y0)[ch] as f64;
                    let v10 = self.pixel(x1, y0)[ch] as f64;
                    let v01 = self.pixel(x0, y1)[ch] as f64;
                    let v11 = self.pixel(x1, y1)[ch] as f64;
                    let v = v00 * (1.0 - wx) * (1.0 - wy)
                        + v10 * wx * (1.0 - wy)
                        + v01 * (1.0 - wx) * wy
                        + v11 * wx * wy;
                    p[ch] = v.round().clamp(0.0, 255.0) as u8;
                }
                out.set_pixel(x, y, p);
            }
        }
        Ok(out)
    }
}

/// One synchronized log row. Angles are stored in radians internally.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingRecord {
    pub timestamp_ms: i64,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
    pub speed: f64,
    pub torque: f64,
    pub angle: f64,
    pub frame_ref: String,
}

impl DrivingRecord {
    pub fn raw_triple(&self) -> VehicleTriple {
        VehicleTriple {
            speed: self.speed,
            torque: self.torque,
            angle: self.angle,
        }
    }
}

/// Ordered records with decoded frames. `curvatures` is populated for
/// synthetic sequences, where labels derive from it analytically.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingSequence {
    pub id: usize,
    pub records: Vec<DrivingRecord>,
    pub frames: Vec<Frame>,
    pub curvatures: Option<Vec<f64>>,
}

impl DrivingSequence {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Units of the `angle` column in a log CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AngleUnits {
    #[default]
    Radians,
    Degrees,
}

fn decode_frame(path: &Path) -> Result<Frame> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "ppm" => read_ppm(path),
        "png" => {
            let img = image::open(path)
                .map_err(|e| Error::Data(format!("decode {}: {e}", path.display())))?
                .to_rgb8();
            Ok(Frame {
                width: img.width() as usize,
                height: img.height() as usize,
                rgb: img.into_raw(),
            })
        }
        other => Err(Error::Data(format!("unsupported frame format .{other}"))),
    }
}

/// Parse a log CSV (`timestamp_ms,lat,lon,speed,torque,angle,frame`) and
/// decode the referenced frames. Records are grouped into sequences, split
/// wherever the inter-frame gap exceeds 2x the nominal frame period.
pub fn load_log(csv_path: &Path, frames_dir: &Path, units: AngleUnits) -> Result<Vec<DrivingSequence>> {
    let mut reader = csv::Reader::from_path(csv_path)
        .map_err(|e| Error::Data(format!("open {}: {e}", csv_path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("csv headers: {e}")))?
        .clone();
    let expected = ["timestamp_ms", "lat", "lon", "speed", "torque", "angle", "frame"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Data(format!(
            "csv header {:?} does not match {:?}",
            headers, expected
        )));
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Data(format!("csv row: {e}")))?;
        let parse_f = |i: usize, name: &str| -> Result<f64> {
            row[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("field {name}: {e}")))
        };
        let opt_f = |i: usize| -> Option<f64> {
            let s = row[i].trim();
            if s.is_empty() {
                None
            } else {
                s.parse().ok()
            }
        };
        let mut angle = parse_f(5, "angle")?;
        if units == AngleUnits::Degrees {
            angle = angle.to_radians();
        }
        records.push(DrivingRecord {
            timestamp_ms: row[0]
                .trim()
                .parse()
                .map_err(|e| Error::Data(format!("field timestamp_ms: {e}")))?,
            lat: opt_f(1),
            lon: opt_f(2),
            speed: parse_f(3, "speed")?,
            torque: parse_f(4, "torque")?,
            angle,
            frame_ref: row[6].trim().to_string(),
        });
    }
    // split at gaps, enforce monotone timestamps
    let mut sequences = Vec::new();
    let mut current: Vec<DrivingRecord> = Vec::new();
    for rec in records {
        if let Some(last) = current.last() {
            let dt = rec.timestamp_ms - last.timestamp_ms;
            if dt <= 0 {
                return Err(Error::Data(format!(
                    "non-monotone timestamps: {} after {}",
                    rec.timestamp_ms, last.timestamp_ms
                )));
            }
            if dt > 2 * NOMINAL_PERIOD_MS {
                sequences.push(std::mem::take(&mut current));
            }
        }
        current.push(rec);
    }
    if !current.is_empty() {
        sequences.push(current);
    }
    let mut out = Vec::new();
    for (id, records) in sequences.into_iter().enumerate() {
        let mut frames = Vec::with_capacity(records.len());
        for rec in &records {
            frames.push(decode_frame(&frames_dir.join(&rec.frame_ref))?);
        }
        out.push(DrivingSequence {
            id,
            records,
            frames,
            curvatures: None,
        });
    }
    Ok(out)
}

/// Per-channel zero-mean/unit-variance transform fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Standardizer {
    pub fn identity() -> Self {
        Standardizer {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn fit(sequences: &[DrivingSequence]) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; 3];
        for seq in sequences {
            for rec in &seq.records {
                let v = [rec.speed, rec.torque, rec.angle];
                for k in 0..3 {
                    sum[k] += v[k];
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data("cannot fit standardizer on empty data".into()));
        }
        let mut mean = [0.0; 3];
        for k in 0..3 {
            mean[k] = sum[k] / n as f64;
        }
        // second pass over deviations avoids cancellation when the spread is
        // small relative to the mean (e.g. near-constant speed)
        let mut sumsq = [0.0; 3];
        for seq in sequences {
            for rec in &seq.records {
                let v = [rec.speed, rec.torque, rec.angle];
                for k in 0..3 {
                    let d = v[k] - mean[k];
                    sumsq[k] += d * d;
                }
            }
        }
        let mut std = [0.0; 3];
        for k in 0..3 {
            std[k] = (sumsq[k] / n as f64).sqrt();
            if std[k] <= 1e-12 {
                let name = ["speed", "torque", "angle"][k];
                return Err(Error::Numeric(format!(
                    "zero variance in channel {name}; cannot standardize"
                )));
            }
        }
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, t: VehicleTriple) -> VehicleTriple {
        VehicleTriple {
            speed: (t.speed - self.mean[0]) / self.std[0],
            torque: (t.torque - self.mean[1]) / self.std[1],
            angle: (t.angle - self.mean[2]) / self.std[2],
        }
    }

    pub fn invert(&self, t: VehicleTriple) -> VehicleTriple {
        VehicleTriple {
            speed: t.speed * self.std[0] + self.mean[0],
            torque: t.torque * self.std[1] + self.mean[1],
            angle: t.angle * self.std[2] + self.mean[2],
        }
    }
}

/// Flip every frame left-right; negate angle and torque, keep speed.
/// Involutive on pixels and labels.
pub fn mirror_augment(seq: &DrivingSequence) -> DrivingSequence {
    DrivingSequence {
        id: seq.id,
        records: seq
            .records
            .iter()
            .map(|r| DrivingRecord {
                torque: -r.torque,
                angle: -r.angle,
                ..r.clone()
            })
            .collect(),
        frames: seq.frames.iter().map(|f| f.flip_lr()).collect(),
        curvatures: seq
            .curvatures
            .as_ref()
            .map(|cs| cs.iter().map(|c| -c).collect()),
    }
}

/// Keyframe / size reduction schemes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum ReductionScheme {
    None,
    /// Remove the top 200/480 fraction of rows (scaled for other heights).
    TopCrop,
    SpatialSubsample { width: usize, height: usize },
    /// Keep every `factor`-th frame (indices 0, factor, 2*factor, ...).
    TemporalSubsample { factor: usize },
    /// Keep frames with |angle| >= threshold (degrees) plus +-`neighbors`.
    SalientKeyframes { threshold_deg: f64, neighbors: usize },
}

/// Apply a reduction scheme. Salient filtering can leave temporal gaps, so
/// the result is a list of contiguous sub-sequences; the other schemes
/// return a single sequence.
pub fn reduce(seq: &DrivingSequence, scheme: &ReductionScheme) -> Result<Vec<DrivingSequence>> {
    match scheme {
        ReductionScheme::None => Ok(vec![seq.clone()]),
        ReductionScheme::TopCrop => {
            let mut out = seq.clone();
            let rows = |h: usize| ((h as f64) * 200.0 / 480.0).round() as usize;
            out.frames = seq
                .frames
                .iter()
                .map(|f| f.crop_top(rows(f.height)))
                .collect::<Result<_>>()?;
            Ok(vec![out])
        }
        ReductionScheme::SpatialSubsample { width, height } => {
            let mut out = seq.clone();
            out.frames = seq
                .frames
                .iter()
                .map(|f| f.resize(*width, *height))
                .collect::<Result<_>>()?;
            Ok(vec![out])
        }
        ReductionScheme::TemporalSubsample { factor } => {
            if *factor == 0 {
                return Err(Error::Config("temporal subsample factor must be >= 1".into()));
            }
            let keep: Vec<usize> = (0..seq.len()).step_by(*factor).collect();
            Ok(vec![subset_sequence(seq, &keep)])
        }
        ReductionScheme::SalientKeyframes { threshold_deg, neighbors } => {
            let thr = threshold_deg.to_radians();
            let n = seq.len();
            let mut keep = vec![false; n];
            for (i, rec) in seq.records.iter().enumerate() {
                if rec.angle.abs() >= thr {
                    let lo = i.saturating_sub(*neighbors);
                    let hi = (i + neighbors + 1).min(n);
                    for k in keep.iter_mut().take(hi).skip(lo) {
                        *k = true;
                    }
                }
            }
            // split kept indices into contiguous runs so no clip can span a gap
            let mut runs: Vec<Vec<usize>> = Vec::new();
            for (i, &k) in keep.iter().enumerate() {
                if !k {
                    continue;
                }
                match runs.last_mut() {
                    Some(run) if *run.last().unwrap() + 1 == i => run.push(i),
                    _ => runs.push(vec![i]),
                }
            }
            Ok(runs.iter().map(|run| subset_sequence(seq, run)).collect())
        }
    }
}

fn subset_sequence(seq: &DrivingSequence, indices: &[usize]) -> DrivingSequence {
    DrivingSequence {
        id: seq.id,
        records: indices.iter().map(|&i| seq.records[i].clone()).collect(),
        frames: indices.iter().map(|&i| seq.frames[i].clone()).collect(),
        curvatures: seq
            .curvatures
            .as_ref()
            .map(|cs| indices.iter().map(|&i| cs[i]).collect()),
    }
}

/// Convert a frame to a W x H x 3 x 1 tensor with pixel values in [0, 1].
pub fn frame_to_tensor(frame: &Frame) -> Tensor4 {
    let mut t = Tensor4::zeros(frame.width, frame.height, 3, 1);
    for y in 0..frame.height {
        for x in 0..frame.width {
            let p = frame.pixel(x, y);
            for ch in 0..3 {
                t.set(x, y, ch, 0, p[ch] as f64 / 255.0);
            }
        }
    }
    t
}

/// Sliding-window clips over one sequence; each clip's target is the
/// standardized triple at its last frame. Sequences shorter than
/// `clip_length` yield no clips.
pub fn make_clips(
    seq: &DrivingSequence,
    clip_length: usize,
    stride: usize,
    standardizer: &Standardizer,
) -> Vec<ClipInput> {
    assert!(stride >= 1);
    if seq.len() < clip_length {
        return Vec::new();
    }
    let (w, h) = (seq.frames[0].width, seq.frames[0].height);
    let mut clips = Vec::new();
    let mut start = 0;
    while start + clip_length <= seq.len() {
        let mut frames = Tensor4::zeros(w, h, 3, clip_length);
        let n = w * h * 3;
        for (k, frame) in seq.frames[start..start + clip_length].iter().enumerate() {
            let slice = frame_to_tensor(frame);
            frames.data[k * n..(k + 1) * n].copy_from_slice(&slice.data);
        }
        let last = start + clip_length - 1;
        clips.push(ClipInput {
            frames,
            target: standardizer.apply(seq.records[last].raw_triple()),
            sequence_id: seq.id,
            last_frame_index: last,
        });
        start += stride;
    }
    clips
}

// ---------------------------------------------------------------------------
// synthetic corpus
// ---------------------------------------------------------------------------

/// Parameters of the synthetic road-scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub width: usize,
    pub height: usize,
    /// Step scale of the bounded curvature random walk.
    pub curvature_step: f64,
    /// Noise amplitude on the speed channel (labels only; rendering is
    /// noise-free so mirror symmetry is exact).
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            sequences: 4,
            frames_per_sequence: 60,
            width: 64,
            height: 48,
            curvature_step: 0.15,
            noise_level: 0.005,
            seed: 7,
        }
    }
}

/// Bounded random walk in [-1, 1].
pub fn curvature_walk(n: usize, step: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let mut k: f64 = rng.gen_range(-0.5..0.5);
    for _ in 0..n {
        k = (k + step * rng.gen_range(-1.0..1.0)).clamp(-1.0, 1.0);
        out.push(k);
    }
    out
}

const BACKGROUND: f64 = 13.0;
const BAND_PEAK: f64 = 230.0;

fn band_center(width: usize, curvature: f64, y_norm: f64) -> f64 {
    (width - 1) as f64 / 2.0 + curvature * 0.35 * width as f64 * y_norm
}

fn band_halfwidth(width: usize, y_norm: f64) -> f64 {
    0.08 * width as f64 * (0.3 + 0.7 * y_norm)
}

/// Render one frame: dark ground plane with a bright lane band whose
/// horizontal offset follows the curvature. Rendering is mirror-symmetric:
/// flip_lr(render(c)) == render(-c) bit-exactly.
pub fn render_frame(width: usize, height: usize, curvature: f64) -> Frame {
    let mut f = Frame::new(width, height);
    for y in 0..height {
        let y_norm = y as f64 / (height - 1).max(1) as f64;
        let center = band_center(width, curvature, y_norm);
        let hw = band_halfwidth(width, y_norm);
        for x in 0..width {
            let d = (x as f64 - center).abs();
            let band = (1.0 - d / hw).max(0.0);
            let v = (BACKGROUND + BAND_PEAK * band).round().clamp(0.0, 255.0) as u8;
            f.set_pixel(x, y, [v, v, v]);
        }
    }
    f
}

/// Boolean mask of lane-band pixels (band intensity above background).
pub fn band_mask(width: usize, height: usize, curvature: f64) -> Vec<bool> {
    let mut mask = vec![false; width * height];
    for y in 0..height {
        let y_norm = y as f64 / (height - 1).max(1) as f64;
        let center = band_center(width, curvature, y_norm);
        let hw = band_halfwidth(width, y_norm);
        for x in 0..width {
            if (x as f64 - center).abs() < hw {
                mask[y * width + x] = true;
            }
        }
    }
    mask
}

/// angle = ANGLE_GAIN * curvature; torque = d(angle)/dt per frame period.
pub fn labels_from_curvatures(curvatures: &[f64]) -> Vec<(f64, f64)> {
    let dt = NOMINAL_PERIOD_MS as f64 / 1000.0;
    curvatures
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let angle = ANGLE_GAIN * c;
            let torque = if i == 0 {
                0.0
            } else {
                (ANGLE_GAIN * c - ANGLE_GAIN * curvatures[i - 1]) / dt
            };
            (angle, torque)
        })
        .collect()
}

/// Build one synthetic sequence from an explicit curvature series.
pub fn render_sequence(
    id: usize,
    curvatures: &[f64],
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> DrivingSequence {
    let labels = labels_from_curvatures(curvatures);
    let mut records = Vec::with_capacity(curvatures.len());
    let mut frames = Vec::with_capacity(curvatures.len());
    for (i, (&c, &(angle, torque))) in curvatures.iter().zip(labels.iter()).enumerate() {
        let speed = SPEED_BASE - SPEED_CURVE_GAIN * c.abs() + spec.noise_level * rng.gen_range(-1.0..1.0);
        records.push(DrivingRecord {
            timestamp_ms: (i as i64) * NOMINAL_PERIOD_MS,
            lat: None,
            lon: None,
            speed,
            torque,
            angle,
            frame_ref: format!("seq{id:03}_frame{i:05}.ppm"),
        });
        frames.push(render_frame(spec.width, spec.height, c));
    }
    DrivingSequence {
        id,
        records,
        frames,
        curvatures: Some(curvatures.to_vec()),
    }
}

/// Deterministic synthetic corpus: fixed seed, identical output.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Vec<DrivingSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.sequences)
        .map(|id| {
            let curvatures = curvature_walk(spec.frames_per_sequence, spec.curvature_step, &mut rng);
            render_sequence(id, &curvatures, spec, &mut rng)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// on-disk corpus (CSV + PPM frames), format-identical to real data
// ---------------------------------------------------------------------------

pub fn write_ppm(frame: &Frame, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Data(format!("create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let header = format!("P6\n{} {}\n255\n", frame.width, frame.height);
    w.write_all(header.as_bytes())
        .and_then(|_| w.write_all(&frame.rgb))
        .map_err(|e| Error::Data(format!("write {}: {e}", path.display())))
}

pub fn read_ppm(path: &Path) -> Result<Frame> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    for _ in 0..3 {
        let mut line = String::new();
        r.read_line(&mut line)
            .map_err(|e| Error::Data(format!("ppm header: {e}")))?;
        header.push_str(&line);
    }
    let mut parts = header.split_whitespace();
    if parts.next() != Some("P6") {
        return Err(Error::Data("not a P6 ppm".into()));
    }
    let width: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Data("ppm width".into()))?;
    let height: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Data("ppm height".into()))?;
    if parts.next() != Some("255") {
        return Err(Error::Data("ppm maxval must be 255".into()));
    }
    let mut rgb = vec![0u8; width * height * 3];
    std::io::Read::read_exact(&mut r, &mut rgb)
        .map_err(|e| Error::Data(format!("ppm payload: {e}")))?;
    Ok(Frame { width, height, rgb })
}

/// Write sequences as `log.csv` plus one PPM per frame under `dir`.
/// Timestamps are re-spaced so that sequence boundaries appear as gaps
/// larger than 2x the nominal period, making the round trip through
/// `load_log` reproduce the same grouping.
pub fn write_corpus(sequences: &[DrivingSequence], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("mkdir {}: {e}", dir.display())))?;
    let csv_path = dir.join("log.csv");
    let file = std::fs::File::create(&csv_path)
        .map_err(|e| Error::Data(format!("create {}: {e}", csv_path.display())))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "timestamp_ms,lat,lon,speed,torque,angle,frame")
        .map_err(|e| Error::Data(e.to_string()))?;
    let mut base_ts: i64 = 0;
    for seq in sequences {
        for (rec, frame) in seq.records.iter().zip(seq.frames.iter()) {
            let ts = base_ts + rec.timestamp_ms;
            let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                ts,
                fmt_opt(rec.lat),
                fmt_opt(rec.lon),
                rec.speed,
                rec.torque,
                rec.angle,
                rec.frame_ref
            )
            .map_err(|e| Error::Data(e.to_string()))?;
            write_ppm(frame, &dir.join(&rec.frame_ref))?;
        }
        let span = seq.records.last().map(|r| r.timestamp_ms).unwrap_or(0);
        base_ts += span + 10 * NOMINAL_PERIOD_MS;
    }
    Ok(csv_path)
}
