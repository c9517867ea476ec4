//! Visual back-propagation saliency: channel-mean maps per layer, uniform
//! de-convolution upsampling, mask/residual composition down to the input
//! resolution, and heatmap emission.

use crate::data::Frame;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, StConvSpec};
use crate::tensor::Tensor4;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Rank-2 real map.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2d {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Map2d {
    pub fn zeros(width: usize, height: usize) -> Self {
        Map2d {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

/// Saliency at input spatial resolution, min-max normalized to [0, 1].
pub type SaliencyMap = Map2d;

/// Ordered layer responses from one forward pass, input layer first.
/// `specs[i]` is the convolution mapping `layers[i]` to `layers[i+1]`,
/// so `specs.len() == layers.len() - 1`.
#[derive(Debug, Clone)]
pub struct ActivationStack {
    pub layers: Vec<Tensor4>,
    pub specs: Vec<StConvSpec>,
}

/// Assemble the stack for one clip: input frames, each ST-Conv layer's
/// response, and the ConvLSTM hidden state zero-padded to the deepest conv
/// resolution (its "Conv5" role). The hidden layer's pseudo-spec is a 1x1
/// stride-1 convolution, since padding restores the lower layer's dims.
pub fn activation_stack(
    clip_frames: &Tensor4,
    conv_outputs: &[Tensor4],
    convlstm_hidden: &Tensor4,
    config: &ModelConfig,
) -> Result<ActivationStack> {
    if conv_outputs.len() != config.stconv_specs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} conv responses for {} configured layers",
            conv_outputs.len(),
            config.stconv_specs.len()
        )));
    }
    let mut layers = vec![clip_frames.clone()];
    layers.extend(conv_outputs.iter().cloned());
    let (lw, lh, _, _) = conv_outputs
        .last()
        .ok_or_else(|| Error::Config("empty conv stack".into()))?
        .dims();
    layers.push(convlstm_hidden.pad_spatial_to(lw, lh)?);
    let mut specs = config.stconv_specs.clone();
    specs.push(StConvSpec {
        kw: 1,
        kh: 1,
        sw: 1,
        sh: 1,
        c_out: convlstm_hidden.dims().2,
        kt: 1,
    });
    Ok(ActivationStack { layers, specs })
}

/// Channel mean of one time slice.
pub fn mean_map(layer: &Tensor4, time_index: usize) -> Result<Map2d> {
    let (w, h, c, t) = layer.dims();
    if time_index >= t {
        return Err(Error::ShapeMismatch(format!(
            "time index {time_index} out of range for {t} steps"
        )));
    }
    let mut map = Map2d::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            for ch in 0..c {
                sum += layer.get(x, y, ch, time_index);
            }
            map.set(x, y, sum / c as f64);
        }
    }
    Ok(map)
}

/// Transposed-convolution upsampling with a uniform sum-one kernel whose
/// shape and stride mirror `spec`, then cropped / zero-padded (top-left
/// anchored) to exactly `target` = (width, height).
pub fn upsample_to(map: &Map2d, target: (usize, usize), spec: &StConvSpec) -> Result<Map2d> {
    if spec.kw == 0 || spec.kh == 0 || spec.sw == 0 || spec.sh == 0 {
        return Err(Error::Config("upsample spec must have positive kernel and stride".into()));
    }
    let (tw, th) = target;
    if tw < map.width || th < map.height {
        return Err(Error::ShapeMismatch(format!(
            "target {tw}x{th} smaller than source {}x{}",
            map.width, map.height
        )));
    }
    let nat_w = (map.width - 1) * spec.sw + spec.kw;
    let nat_h = (map.height - 1) * spec.sh + spec.kh;
    let weight = 1.0 / (spec.kw * spec.kh) as f64;
    let mut nat = Map2d::zeros(nat_w, nat_h);
    for y in 0..map.height {
        for x in 0..map.width {
            let v = map.get(x, y) * weight;
            for ky in 0..spec.kh {
                for kx in 0..spec.kw {
                    let ox = x * spec.sw + kx;
                    let oy = y * spec.sh + ky;
                    nat.data[oy * nat_w + ox] += v;
                }
            }
        }
    }
    let mut out = Map2d::zeros(tw, th);
    for y in 0..th.min(nat_h) {
        for x in 0..tw.min(nat_w) {
            out.set(x, y, nat.get(x, y));
        }
    }
    Ok(out)
}

fn hadamard_add(up: &Map2d, mean: &Map2d) -> Map2d {
    // residual = mask + mean with mask = up (.) mean
    let mut out = mean.clone();
    for (o, (&u, &m)) in out.data.iter_mut().zip(up.data.iter().zip(mean.data.iter())) {
        *o = u * m + m;
    }
    out
}

/// Pre-normalization residual at input resolution: start from the deepest
/// mean map, repeatedly upsample to the next-shallower layer, mask
/// (point-wise multiply) with its mean map, and add the mean map. Every
/// layer contributes its final time slice.
pub fn vbp_residual(stack: &ActivationStack) -> Result<Map2d> {
    if stack.layers.is_empty() {
        return Err(Error::Config("empty activation stack".into()));
    }
    if stack.specs.len() + 1 != stack.layers.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} specs for {} layers",
            stack.specs.len(),
            stack.layers.len()
        )));
    }
    let last_slice = |t: &Tensor4| -> Result<Map2d> { mean_map(t, t.dims().3 - 1) };
    let deepest = stack.layers.len() - 1;
    let mut current = last_slice(&stack.layers[deepest])?;
    for i in (0..deepest).rev() {
        let (w, h, _, _) = stack.layers[i].dims();
        let up = upsample_to(&current, (w, h), &stack.specs[i])?;
        let mean = last_slice(&stack.layers[i])?;
        current = hadamard_add(&up, &mean);
    }
    Ok(current)
}

/// `vbp_residual` followed by one min-max normalization to [0, 1].
pub fn vbp(stack: &ActivationStack) -> Result<SaliencyMap> {
    let mut current = vbp_residual(stack)?;
    let min = current.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = current.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range > 0.0 {
        for v in current.data.iter_mut() {
            *v = (*v - min) / range;
        }
    } else {
        // constant map: normalize to all zeros
        current.data.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(current)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit grayscale PGM (P5).
pub fn emit_heatmap(map: &SaliencyMap, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Data(format!("create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let header = format!("P5\n{} {}\n255\n", map.width, map.height);
    let bytes: Vec<u8> = map.data.iter().map(|&v| quantize(v)).collect();
    w.write_all(header.as_bytes())
        .and_then(|_| w.write_all(&bytes))
        .map_err(|e| Error::Data(format!("write {}: {e}", path.display())))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = std::fs::read(path).map_err(|e| Error::Data(format!("open {}: {e}", path.display())))?;
    let text = String::from_utf8_lossy(&raw);
    let mut fields = text.split_whitespace();
    if fields.next() != Some("P5") {
        return Err(Error::Data("not a P5 pgm".into()));
    }
    let width: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Data("pgm width".into()))?;
    let height: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Data("pgm height".into()))?;
    if fields.next() != Some("255") {
        return Err(Error::Data("pgm maxval must be 255".into()));
    }
    let payload = raw.len() - width * height;
    Ok((width, height, raw[payload..].to_vec()))
}

/// Red overlay composited on the source frame at alpha 0.5, written as PPM.
pub fn emit_overlay(map: &SaliencyMap, frame: &Frame, path: &Path) -> Result<()> {
    if frame.width != map.width || frame.height != map.height {
        return Err(Error::ShapeMismatch(format!(
            "frame {}x{} vs map {}x{}",
            frame.width, frame.height, map.width, map.height
        )));
    }
    let mut out = frame.clone();
    for y in 0..frame.height {
        for x in 0..frame.width {
            let p = frame.pixel(x, y);
            let heat = map.get(x, y).clamp(0.0, 1.0) * 255.0;
            let blend = |base: u8, overlay: f64| -> u8 {
                (0.5 * base as f64 + 0.5 * overlay).round().clamp(0.0, 255.0) as u8
            };
            out.set_pixel(x, y, [blend(p[0], heat), blend(p[1], 0.0), blend(p[2], 0.0)]);
        }
    }
    crate::data::write_ppm(&out, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn spec(kw: usize, kh: usize, sw: usize, sh: usize) -> StConvSpec {
        StConvSpec { kw, kh, sw, sh, c_out: 1, kt: 1 }
    }

    #[test]
    fn mean_map_single_channel_is_identity() {
        let mut t = Tensor4::zeros(3, 2, 1, 2);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let m = mean_map(&t, 1).unwrap();
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(m.get(x, y), t.get(x, y, 0, 1));
            }
        }
        assert!(mean_map(&t, 2).is_err());
    }

    #[test]
    fn mean_map_constant_channels_average() {
        let mut t = Tensor4::zeros(4, 4, 2, 1);
        for y in 0..4 {
            for x in 0..4 {
                t.set(x, y, 0, 0, 3.0);
                t.set(x, y, 1, 0, 5.0);
            }
        }
        let m = mean_map(&t, 0).unwrap();
        assert!(m.data.iter().all(|&v| (v - 4.0).abs() < 1e-15));
    }

    #[test]
    fn mean_map_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut t = Tensor4::zeros(4, 4, 3, 1);
        for v in t.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let m = mean_map(&t, 0).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let expect = (t.get(x, y, 0, 0) + t.get(x, y, 1, 0) + t.get(x, y, 2, 0)) / 3.0;
                assert_eq!(m.get(x, y), expect);
            }
        }
    }

    #[test]
    fn upsample_identity_spec_is_identity() {
        let map = Map2d {
            width: 3,
            height: 2,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        let out = upsample_to(&map, (3, 2), &spec(1, 1, 1, 1)).unwrap();
        assert_eq!(out, map);
    }

    #[test]
    fn upsample_hand_case_one_to_four() {
        let map = Map2d { width: 1, height: 1, data: vec![1.0] };
        let out = upsample_to(&map, (2, 2), &spec(2, 2, 2, 2)).unwrap();
        assert_eq!(out.data, vec![0.25; 4]);
    }

    #[test]
    fn upsample_always_hits_target_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let w = rng.gen_range(1..5);
            let h = rng.gen_range(1..5);
            let s = spec(rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(1..3));
            let map = Map2d::zeros(w, h);
            let tw = (w - 1) * s.sw + s.kw + rng.gen_range(0..3);
            let th = (h - 1) * s.sh + s.kh + rng.gen_range(0..3);
            let out = upsample_to(&map, (tw, th), &s).unwrap();
            assert_eq!((out.width, out.height), (tw, th));
        }
    }

    /// A stack whose convolutions tile the plane exactly (kernel == stride),
    /// so uniform upsampling preserves spatial constancy.
    fn tiling_stack(fill: f64) -> ActivationStack {
        let mut l0 = Tensor4::zeros(8, 8, 2, 2);
        let mut l1 = Tensor4::zeros(4, 4, 3, 2);
        let mut l2 = Tensor4::zeros(2, 2, 2, 1);
        for t in [&mut l0, &mut l1, &mut l2] {
            t.data.iter_mut().for_each(|v| *v = fill);
        }
        ActivationStack {
            layers: vec![l0, l1, l2],
            specs: vec![
                StConvSpec { kw: 2, kh: 2, sw: 2, sh: 2, c_out: 3, kt: 1 },
                StConvSpec { kw: 2, kh: 2, sw: 2, sh: 2, c_out: 2, kt: 2 },
            ],
        }
    }

    #[test]
    fn constant_activations_give_constant_map() {
        let map = vbp(&tiling_stack(1.0)).unwrap();
        assert_eq!((map.width, map.height), (8, 8));
        let first = map.data[0];
        assert!(map.data.iter().all(|&v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn scaling_grows_residual_and_normalization_keeps_argmax() {
        let mut stack = tiling_stack(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for layer in stack.layers.iter_mut() {
            for v in layer.data.iter_mut() {
                *v = rng.gen_range(0.1..1.0);
            }
        }
        let base = vbp_residual(&stack).unwrap();
        let mut scaled = stack.clone();
        for layer in scaled.layers.iter_mut() {
            for v in layer.data.iter_mut() {
                *v *= 3.0;
            }
        }
        let after = vbp_residual(&scaled).unwrap();
        // nonnegative activations: every residual entry grows under scaling
        for (a, b) in after.data.iter().zip(base.data.iter()) {
            assert!(a > b);
        }
        // min-max normalization never reorders entries
        let argmax = |d: &[f64]| {
            d.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let normalized = vbp(&stack).unwrap();
        assert_eq!(argmax(&base.data), argmax(&normalized.data));
    }

    #[test]
    fn saliency_dims_equal_input_dims() {
        use crate::model::{extract_features, ModelParams};
        use crate::convlstm::ConvLstmState;
        let config = ModelConfig::grad_check_tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let mut clip = Tensor4::zeros(
            config.input_width,
            config.input_height,
            config.input_channels,
            config.clip_length,
        );
        for v in clip.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let trace = crate::model::shape_trace(&config).unwrap();
        let (hw, hh, hc) = trace.convlstm_hidden;
        let state = ConvLstmState::zeros(hw, hh, hc);
        let (_, state_out, cache) =
            extract_features(&clip, &state, &params, &config, false, &mut rng).unwrap();
        let stack = activation_stack(&clip, &cache.conv_outputs, &state_out.h, &config).unwrap();
        let map = vbp(&stack).unwrap();
        assert_eq!((map.width, map.height), (config.input_width, config.input_height));
        assert!(map.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn heatmap_extremes_and_round_trip() {
        let dir = tempdir().unwrap();
        let zero = Map2d::zeros(4, 3);
        let path = dir.path().join("zero.pgm");
        emit_heatmap(&zero, &path).unwrap();
        let (w, h, bytes) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert!(bytes.iter().all(|&b| b == 0));

        let one = Map2d { width: 4, height: 3, data: vec![1.0; 12] };
        let path = dir.path().join("one.pgm");
        emit_heatmap(&one, &path).unwrap();
        let (_, _, bytes) = read_pgm(&path).unwrap();
        assert!(bytes.iter().all(|&b| b == 255));

        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let map = Map2d {
            width: 5,
            height: 4,
            data: (0..20).map(|_| rng.gen_range(0.0..1.0)).collect(),
        };
        let path = dir.path().join("rand.pgm");
        emit_heatmap(&map, &path).unwrap();
        let (_, _, bytes) = read_pgm(&path).unwrap();
        let expect: Vec<u8> = map.data.iter().map(|&v| quantize(v)).collect();
        assert_eq!(bytes, expect);
    }

    #[test]
    fn overlay_blends_red_channel() {
        let mut frame = Frame::new(2, 1);
        frame.set_pixel(0, 0, [100, 100, 100]);
        frame.set_pixel(1, 0, [100, 100, 100]);
        let map = Map2d { width: 2, height: 1, data: vec![0.0, 1.0] };
        let dir = tempdir().unwrap();
        let path = dir.path().join("overlay.ppm");
        emit_overlay(&map, &frame, &path).unwrap();
        let back = crate::data::read_ppm(&path).unwrap();
        assert_eq!(back.pixel(0, 0), [50, 50, 50]);
        assert_eq!(back.pixel(1, 0), [178, 50, 50]); // 0.5*100 + 0.5*255 = 177.5 -> 178
    }
}
