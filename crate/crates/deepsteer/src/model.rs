//! Full model: ST-Conv stack -> ConvLSTM -> multi-scale residual aggregation
//! (feature extraction), then the steering-predicting head with its three
//! 1-step recurrences (vector LSTM state, ConvLSTM state, previous output).

use crate::convlstm::{
    convlstm_rollout, convlstm_rollout_backward, ConvLstmParams, ConvLstmState,
    ConvLstmStepCache, HiddenUpdateRule,
};
use crate::error::{Error, Result};
use crate::layers::{
    residual_aggregate, residual_aggregate_backward, stconv_layer_backward, stconv_layer_forward,
    StConvLayerCache,
};
use crate::lstm::{
    lstm_step, lstm_step_backward, LstmStepCache, VectorLstmParams, VectorLstmState,
};
use crate::tensor::{
    dense_backward, dense_forward, stconv_output_dims, DenseWeights, Kernel5, Tensor4,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One ST-Conv layer hyperparameter row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StConvSpec {
    pub kw: usize,
    pub kh: usize,
    pub sw: usize,
    pub sh: usize,
    pub c_out: usize,
    pub kt: usize,
}

/// Architecture hyperparameters. `full_default` is the full-scale
/// architecture (640×480 input); `desk_default` is a small configuration
/// for CPU-scale training on synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub clip_length: usize,
    pub input_width: usize,
    pub input_height: usize,
    pub input_channels: usize,
    pub stconv_specs: Vec<StConvSpec>,
    pub convlstm_hidden: usize,
    pub convlstm_kernel: usize,
    pub feature_dim: usize,
    pub lstm_hidden: usize,
    pub head_hidden: usize,
    pub keep_prob: f64,
    pub hidden_update_rule: HiddenUpdateRule,
    pub use_convlstm_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full_default()
    }
}

impl ModelConfig {
    pub fn full_default() -> Self {
        ModelConfig {
            clip_length: 15,
            input_width: 640,
            input_height: 480,
            input_channels: 3,
            stconv_specs: vec![
                StConvSpec { kw: 16, kh: 16, sw: 6, sh: 6, c_out: 24, kt: 3 },
                StConvSpec { kw: 5, kh: 5, sw: 3, sh: 3, c_out: 36, kt: 3 },
                StConvSpec { kw: 3, kh: 3, sw: 2, sh: 2, c_out: 48, kt: 2 },
                StConvSpec { kw: 1, kh: 3, sw: 1, sh: 1, c_out: 64, kt: 1 },
            ],
            convlstm_hidden: 64,
            convlstm_kernel: 3,
            feature_dim: 128,
            lstm_hidden: 64,
            head_hidden: 64,
            keep_prob: 0.25,
            hidden_update_rule: HiddenUpdateRule::Standard,
            use_convlstm_bias: true,
        }
    }

    /// Small configuration for 64x48 synthetic frames, trainable on a CPU
    /// in minutes.
    pub fn desk_default() -> Self {
        ModelConfig {
            clip_length: 15,
            input_width: 64,
            input_height: 48,
            input_channels: 3,
            stconv_specs: vec![
                StConvSpec { kw: 8, kh: 8, sw: 4, sh: 4, c_out: 6, kt: 3 },
                StConvSpec { kw: 3, kh: 3, sw: 2, sh: 2, c_out: 8, kt: 3 },
                StConvSpec { kw: 3, kh: 3, sw: 1, sh: 1, c_out: 12, kt: 2 },
            ],
            convlstm_hidden: 12,
            convlstm_kernel: 3,
            feature_dim: 32,
            lstm_hidden: 16,
            head_hidden: 16,
            keep_prob: 1.0,
            hidden_update_rule: HiddenUpdateRule::Standard,
            use_convlstm_bias: true,
        }
    }

    /// Tiny configuration used by gradient-check tests: two clips of this
    /// run end-to-end in milliseconds.
    pub fn grad_check_tiny() -> Self {
        ModelConfig {
            clip_length: 4,
            input_width: 12,
            input_height: 10,
            input_channels: 2,
            stconv_specs: vec![
                StConvSpec { kw: 3, kh: 3, sw: 2, sh: 2, c_out: 2, kt: 2 },
                StConvSpec { kw: 2, kh: 2, sw: 1, sh: 1, c_out: 3, kt: 1 },
            ],
            convlstm_hidden: 2,
            convlstm_kernel: 3,
            feature_dim: 4,
            lstm_hidden: 3,
            head_hidden: 4,
            keep_prob: 1.0,
            hidden_update_rule: HiddenUpdateRule::Standard,
            use_convlstm_bias: true,
        }
    }
}

/// Per-layer dims after each ST-Conv layer plus the ConvLSTM input/hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTrace {
    pub conv_outputs: Vec<(usize, usize, usize, usize)>,
    pub convlstm_input: (usize, usize, usize, usize),
    pub convlstm_hidden: (usize, usize, usize),
}

/// Walk the shape formula through the configured stack; fails if any
/// dimension would drop below 1.
pub fn shape_trace(config: &ModelConfig) -> Result<ShapeTrace> {
    let mut dims = (
        config.input_width,
        config.input_height,
        config.input_channels,
        config.clip_length,
    );
    let mut conv_outputs = Vec::with_capacity(config.stconv_specs.len());
    for (i, spec) in config.stconv_specs.iter().enumerate() {
        dims = stconv_output_dims(
            dims,
            (spec.kw, spec.kh, dims.2, spec.c_out, spec.kt),
            (spec.sw, spec.sh),
        )
        .map_err(|e| Error::Config(format!("stconv layer {}: {e}", i + 1)))?;
        conv_outputs.push(dims);
    }
    let k = config.convlstm_kernel;
    if dims.0 < k || dims.1 < k {
        return Err(Error::Config(format!(
            "convlstm kernel {k}x{k} exceeds input {}x{}",
            dims.0, dims.1
        )));
    }
    let hidden = (dims.0 - k + 1, dims.1 - k + 1, config.convlstm_hidden);
    Ok(ShapeTrace {
        conv_outputs,
        convlstm_input: dims,
        convlstm_hidden: hidden,
    })
}

/// Standardized (speed, torque, wheel angle).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleTriple {
    pub speed: f64,
    pub torque: f64,
    pub angle: f64,
}

impl VehicleTriple {
    pub fn to_array(self) -> [f64; 3] {
        [self.speed, self.torque, self.angle]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        VehicleTriple {
            speed: a[0],
            torque: a[1],
            angle: a[2],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.speed.is_finite() && self.torque.is_finite() && self.angle.is_finite()
    }
}

/// One model input: a clip of frames plus the target aligned to the clip's
/// last frame.
#[derive(Debug, Clone)]
pub struct ClipInput {
    pub frames: Tensor4,
    pub target: VehicleTriple,
    pub sequence_id: usize,
    pub last_frame_index: usize,
}

/// Recurrent state threaded between consecutive clips of one sequence.
#[derive(Debug, Clone)]
pub struct ModelCarry {
    pub prev_output: VehicleTriple,
    pub lstm_state: VectorLstmState,
    pub convlstm_state: ConvLstmState,
}

impl ModelCarry {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let trace = shape_trace(config)?;
        let (hw, hh, hc) = trace.convlstm_hidden;
        Ok(ModelCarry {
            prev_output: VehicleTriple::default(),
            lstm_state: VectorLstmState::zeros(config.lstm_hidden),
            convlstm_state: ConvLstmState::zeros(hw, hh, hc),
        })
    }
}

/// All learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conv_kernels: Vec<Kernel5>,
    pub convlstm: ConvLstmParams,
    /// One projection per ST-Conv layer plus one for the ConvLSTM hidden state.
    pub projections: Vec<DenseWeights>,
    pub lstm: VectorLstmParams,
    pub head_hidden: DenseWeights,
    pub head_out: DenseWeights,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let trace = shape_trace(config)?;
        let mut conv_kernels = Vec::new();
        let mut c_in = config.input_channels;
        for spec in &config.stconv_specs {
            conv_kernels.push(Kernel5::zeros(spec.kw, spec.kh, c_in, spec.c_out, spec.kt));
            c_in = spec.c_out;
        }
        let convlstm = ConvLstmParams::zeros(c_in, config.convlstm_hidden, config.convlstm_kernel);
        let mut projections = Vec::new();
        for dims in &trace.conv_outputs {
            projections.push(DenseWeights::zeros(config.feature_dim, dims.0 * dims.1 * dims.2));
        }
        let (hw, hh, hc) = trace.convlstm_hidden;
        projections.push(DenseWeights::zeros(config.feature_dim, hw * hh * hc));
        let lstm = VectorLstmParams::zeros(config.feature_dim + 3, config.lstm_hidden);
        let head_hidden = DenseWeights::zeros(
            config.head_hidden,
            config.feature_dim + config.lstm_hidden + 3,
        );
        let head_out = DenseWeights::zeros(3, config.head_hidden);
        Ok(ModelParams {
            conv_kernels,
            convlstm,
            projections,
            lstm,
            head_hidden,
            head_out,
        })
    }

    /// Uniform initialization with scale sqrt(6/(fan_in+fan_out)); biases
    /// zero except the forget gates, which start at 1.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut p = ModelParams::zeros(config)?;
        let mut fill = |data: &mut [f64], fan_in: usize, fan_out: usize| {
            let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in data.iter_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        };
        for k in p.conv_kernels.iter_mut() {
            let fan_in = k.kw * k.kh * k.c_in * k.kt;
            let fan_out = k.kw * k.kh * k.c_out * k.kt;
            fill(&mut k.data, fan_in, fan_out);
        }
        for k in [
            &mut p.convlstm.w_xi, &mut p.convlstm.w_hi, &mut p.convlstm.w_xf,
            &mut p.convlstm.w_hf, &mut p.convlstm.w_xo, &mut p.convlstm.w_ho,
            &mut p.convlstm.w_xc, &mut p.convlstm.w_hc,
        ] {
            let fan_in = k.kw * k.kh * k.c_in;
            let fan_out = k.kw * k.kh * k.c_out;
            fill(&mut k.data, fan_in, fan_out);
        }
        for b in p.convlstm.b_f.iter_mut() {
            *b = 1.0;
        }
        for d in p.projections.iter_mut() {
            fill(&mut d.weights, d.cols, d.rows);
        }
        for (i, g) in p.lstm.gates.iter_mut().enumerate() {
            fill(&mut g.weights, g.cols, g.rows);
            if i == 1 {
                for b in g.bias.iter_mut() {
                    *b = 1.0;
                }
            }
        }
        fill(&mut p.head_hidden.weights, p.head_hidden.cols, p.head_hidden.rows);
        fill(&mut p.head_out.weights, p.head_out.cols, p.head_out.rows);
        Ok(p)
    }

    /// Named parameter views, in a fixed order (used by the checkpoint
    /// format and the optimizer).
    pub fn entries(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, k) in self.conv_kernels.iter().enumerate() {
            out.push((
                format!("conv{}.kernel", i + 1),
                vec![k.kw, k.kh, k.c_in, k.c_out, k.kt],
                k.data.as_slice(),
            ));
        }
        let cl = &self.convlstm;
        let kshape = |k: &Kernel5| vec![k.kw, k.kh, k.c_in, k.c_out, k.kt];
        for (name, k) in [
            ("convlstm.w_xi", &cl.w_xi), ("convlstm.w_hi", &cl.w_hi),
            ("convlstm.w_xf", &cl.w_xf), ("convlstm.w_hf", &cl.w_hf),
            ("convlstm.w_xo", &cl.w_xo), ("convlstm.w_ho", &cl.w_ho),
            ("convlstm.w_xc", &cl.w_xc), ("convlstm.w_hc", &cl.w_hc),
        ] {
            out.push((name.to_string(), kshape(k), k.data.as_slice()));
        }
        for (name, b) in [
            ("convlstm.b_i", &cl.b_i), ("convlstm.b_f", &cl.b_f),
            ("convlstm.b_o", &cl.b_o), ("convlstm.b_c", &cl.b_c),
        ] {
            out.push((name.to_string(), vec![b.len()], b.as_slice()));
        }
        for (i, d) in self.projections.iter().enumerate() {
            out.push((format!("proj{}.weights", i + 1), vec![d.rows, d.cols], d.weights.as_slice()));
            out.push((format!("proj{}.bias", i + 1), vec![d.rows], d.bias.as_slice()));
        }
        for (i, g) in self.lstm.gates.iter().enumerate() {
            let gate = ["i", "f", "o", "c"][i];
            out.push((format!("lstm.w_{gate}"), vec![g.rows, g.cols], g.weights.as_slice()));
            out.push((format!("lstm.b_{gate}"), vec![g.rows], g.bias.as_slice()));
        }
        out.push(("head_hidden.weights".into(), vec![self.head_hidden.rows, self.head_hidden.cols], self.head_hidden.weights.as_slice()));
        out.push(("head_hidden.bias".into(), vec![self.head_hidden.rows], self.head_hidden.bias.as_slice()));
        out.push(("head_out.weights".into(), vec![self.head_out.rows, self.head_out.cols], self.head_out.weights.as_slice()));
        out.push(("head_out.bias".into(), vec![self.head_out.rows], self.head_out.bias.as_slice()));
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for k in self.conv_kernels.iter_mut() {
            out.push(k.data.as_mut_slice());
        }
        let cl = &mut self.convlstm;
        for k in [
            &mut cl.w_xi, &mut cl.w_hi, &mut cl.w_xf, &mut cl.w_hf,
            &mut cl.w_xo, &mut cl.w_ho, &mut cl.w_xc, &mut cl.w_hc,
        ] {
            out.push(k.data.as_mut_slice());
        }
        for b in [&mut cl.b_i, &mut cl.b_f, &mut cl.b_o, &mut cl.b_c] {
            out.push(b.as_mut_slice());
        }
        for d in self.projections.iter_mut() {
            out.push(d.weights.as_mut_slice());
            out.push(d.bias.as_mut_slice());
        }
        for g in self.lstm.gates.iter_mut() {
            out.push(g.weights.as_mut_slice());
            out.push(g.bias.as_mut_slice());
        }
        out.push(self.head_hidden.weights.as_mut_slice());
        out.push(self.head_hidden.bias.as_mut_slice());
        out.push(self.head_out.weights.as_mut_slice());
        out.push(self.head_out.bias.as_mut_slice());
        out
    }

    pub fn num_params(&self) -> usize {
        self.entries().iter().map(|(_, _, d)| d.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, _, d) in self.entries() {
            out.extend_from_slice(d);
        }
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let mut flat = self.flatten();
        let oflat = other.flatten();
        for (a, b) in flat.iter_mut().zip(oflat.iter()) {
            *a += scale * b;
        }
        self.assign_from_flat(&flat);
    }
}

// ---------------------------------------------------------------------------
// feature extraction
// ---------------------------------------------------------------------------

pub struct FeatureCache {
    pub conv_caches: Vec<StConvLayerCache>,
    pub conv_outputs: Vec<Tensor4>,
    pub convlstm_caches: Vec<ConvLstmStepCache>,
    pub slices: Vec<Vec<f64>>,
}

/// Run the ST-Conv stack, unroll the ConvLSTM over the surviving time steps
/// and aggregate all scales into one feature vector.
pub fn extract_features<R: Rng>(
    clip_frames: &Tensor4,
    convlstm_state: &ConvLstmState,
    params: &ModelParams,
    config: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<(Vec<f64>, ConvLstmState, FeatureCache)> {
    if clip_frames.dims()
        != (
            config.input_width,
            config.input_height,
            config.input_channels,
            config.clip_length,
        )
    {
        return Err(Error::ShapeMismatch(format!(
            "clip dims {:?} do not match config",
            clip_frames.dims()
        )));
    }
    let mut conv_caches = Vec::new();
    let mut conv_outputs: Vec<Tensor4> = Vec::new();
    let mut x = clip_frames.clone();
    for (kernel, spec) in params.conv_kernels.iter().zip(config.stconv_specs.iter()) {
        let (y, cache) =
            stconv_layer_forward(&x, kernel, (spec.sw, spec.sh), config.keep_prob, training, rng)?;
        conv_caches.push(cache);
        conv_outputs.push(y.clone());
        x = y;
    }
    let (state_out, convlstm_caches) = convlstm_rollout(
        &x,
        convlstm_state,
        &params.convlstm,
        config.hidden_update_rule,
        config.use_convlstm_bias,
    )?;
    let mut slices: Vec<Vec<f64>> = conv_outputs
        .iter()
        .map(|t| t.time_slice(t.t - 1).data)
        .collect();
    slices.push(state_out.h.data.clone());
    let feature = residual_aggregate(&slices, &params.projections)?;
    Ok((
        feature,
        state_out,
        FeatureCache {
            conv_caches,
            conv_outputs,
            convlstm_caches,
            slices,
        },
    ))
}

/// Backward of `extract_features`. `d_state_out` carries gradient arriving
/// from the next clip's recurrence; returns the gradient w.r.t. the incoming
/// ConvLSTM state.
pub fn extract_features_backward(
    cache: &FeatureCache,
    params: &ModelParams,
    config: &ModelConfig,
    d_feature: &[f64],
    d_state_out: &ConvLstmState,
    grads: &mut ModelParams,
) -> Result<ConvLstmState> {
    let (grad_projs, grad_slices) =
        residual_aggregate_backward(&cache.slices, &params.projections, d_feature)?;
    for (acc, g) in grads.projections.iter_mut().zip(grad_projs.iter()) {
        for (a, b) in acc.weights.iter_mut().zip(g.weights.iter()) {
            *a += b;
        }
        for (a, b) in acc.bias.iter_mut().zip(g.bias.iter()) {
            *a += b;
        }
    }

    // final ConvLSTM hidden state receives its slice gradient plus whatever
    // flows back from the next clip
    let mut d_h = d_state_out.h.clone();
    for (a, b) in d_h.data.iter_mut().zip(grad_slices.last().unwrap().iter()) {
        *a += b;
    }
    let (d_xs, d_state_in) = convlstm_rollout_backward(
        &cache.convlstm_caches,
        &params.convlstm,
        config.hidden_update_rule,
        config.use_convlstm_bias,
        &d_h,
        &d_state_out.c,
        &mut grads.convlstm,
    )?;

    // walk the conv stack backwards, adding each layer's final-slice
    // projection gradient where it was read
    let n_layers = config.stconv_specs.len();
    let mut d_out = d_xs;
    for layer in (0..n_layers).rev() {
        let out = &cache.conv_outputs[layer];
        {
            let slice_grad = &grad_slices[layer];
            let n = out.w * out.h * out.c;
            let base = (out.t - 1) * n;
            for (a, b) in d_out.data[base..base + n].iter_mut().zip(slice_grad.iter()) {
                *a += b;
            }
        }
        let spec = &config.stconv_specs[layer];
        let (d_in, d_kernel) = stconv_layer_backward(
            &cache.conv_caches[layer],
            &params.conv_kernels[layer],
            (spec.sw, spec.sh),
            &d_out,
        )?;
        for (a, b) in grads.conv_kernels[layer].data.iter_mut().zip(d_kernel.data.iter()) {
            *a += b;
        }
        d_out = d_in;
    }
    Ok(d_state_in)
}

// ---------------------------------------------------------------------------
// steering-predicting head
// ---------------------------------------------------------------------------

pub struct PredictCache {
    pub feature: Vec<f64>,
    pub concat1: Vec<f64>,
    pub lstm_cache: LstmStepCache,
    pub concat2: Vec<f64>,
    pub head_relu: Vec<f64>,
    pub head_mask: Vec<f64>,
    pub head_dropped: Vec<f64>,
}

/// concat [feature | prev_output] -> LSTM -> concat [feature | lstm | prev]
/// -> FC+ReLU+dropout -> FC -> (speed, torque, angle).
pub fn predict_step<R: Rng>(
    feature: &[f64],
    carry: &ModelCarry,
    params: &ModelParams,
    config: &ModelConfig,
    training: bool,
    rng: &mut R,
) -> Result<(VehicleTriple, ModelCarry, PredictCache)> {
    let prev = carry.prev_output.to_array();
    let mut concat1 = Vec::with_capacity(feature.len() + 3);
    concat1.extend_from_slice(feature);
    concat1.extend_from_slice(&prev);
    let (lstm_out, lstm_state, lstm_cache) = lstm_step(&concat1, &carry.lstm_state, &params.lstm)?;
    let mut concat2 = Vec::with_capacity(feature.len() + lstm_out.len() + 3);
    concat2.extend_from_slice(feature);
    concat2.extend_from_slice(&lstm_out);
    concat2.extend_from_slice(&prev);
    let pre = dense_forward(&params.head_hidden, &concat2)?;
    let head_relu: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
    let (head_dropped, head_mask) = {
        // vector dropout shares the tensor primitive via a 1-D view
        let t = Tensor4::from_vec(head_relu.len(), 1, 1, 1, head_relu.clone())?;
        let (y, mask) = crate::tensor::dropout_apply(&t, config.keep_prob, rng, training)?;
        (y.data, mask)
    };
    let out_vec = dense_forward(&params.head_out, &head_dropped)?;
    let prediction = VehicleTriple::from_array([out_vec[0], out_vec[1], out_vec[2]]);
    let carry_out = ModelCarry {
        prev_output: prediction,
        lstm_state,
        convlstm_state: carry.convlstm_state.clone(),
    };
    Ok((
        prediction,
        carry_out,
        PredictCache {
            feature: feature.to_vec(),
            concat1,
            lstm_cache,
            concat2,
            head_relu,
            head_mask,
            head_dropped,
        },
    ))
}

/// Backward of `predict_step`. `d_lstm_state` carries gradient from the next
/// clip's LSTM recurrence. The gradient through the prev_output feedback edge
/// is truncated. Returns (d_feature, d_lstm_state_prev).
pub fn predict_step_backward(
    cache: &PredictCache,
    params: &ModelParams,
    config: &ModelConfig,
    d_prediction: [f64; 3],
    d_lstm_state: &VectorLstmState,
    grads: &mut ModelParams,
) -> Result<(Vec<f64>, VectorLstmState)> {
    let (g_head_out, d_dropped) = dense_backward(&params.head_out, &cache.head_dropped, &d_prediction)?;
    for (a, b) in grads.head_out.weights.iter_mut().zip(g_head_out.weights.iter()) {
        *a += b;
    }
    for (a, b) in grads.head_out.bias.iter_mut().zip(g_head_out.bias.iter()) {
        *a += b;
    }
    let d_pre: Vec<f64> = d_dropped
        .iter()
        .zip(cache.head_mask.iter())
        .zip(cache.head_relu.iter())
        .map(|((g, m), r)| g * m * if *r > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let (g_head_hidden, d_concat2) = dense_backward(&params.head_hidden, &cache.concat2, &d_pre)?;
    for (a, b) in grads.head_hidden.weights.iter_mut().zip(g_head_hidden.weights.iter()) {
        *a += b;
    }
    for (a, b) in grads.head_hidden.bias.iter_mut().zip(g_head_hidden.bias.iter()) {
        *a += b;
    }
    let f = config.feature_dim;
    let h = config.lstm_hidden;
    let mut d_feature = d_concat2[..f].to_vec();
    let mut d_lstm_out = d_concat2[f..f + h].to_vec();
    // prev_output tail: truncated
    for (a, b) in d_lstm_out.iter_mut().zip(d_lstm_state.hidden.iter()) {
        *a += b;
    }
    let (d_concat1, d_state_prev) = lstm_step_backward(
        &cache.lstm_cache,
        &params.lstm,
        &d_lstm_out,
        &d_lstm_state.cell,
        &mut grads.lstm,
    )?;
    for (a, b) in d_feature.iter_mut().zip(d_concat1[..f].iter()) {
        *a += b;
    }
    Ok((d_feature, d_state_prev))
}

// ---------------------------------------------------------------------------
// whole-model forward / backward over clip sequences
// ---------------------------------------------------------------------------

pub struct ClipCache {
    pub feature_cache: FeatureCache,
    pub predict_cache: PredictCache,
}

/// Thread the carry through an ordered run of clips (carry starts at zeros).
/// With `teacher_forcing` the prev_output fed to clip i+1 is clip i's ground
/// truth target instead of the model's own prediction.
pub fn model_forward<R: Rng>(
    clips: &[ClipInput],
    params: &ModelParams,
    config: &ModelConfig,
    training: bool,
    teacher_forcing: bool,
    rng: &mut R,
) -> Result<(Vec<VehicleTriple>, Vec<ClipCache>)> {
    let mut carry = ModelCarry::zeros(config)?;
    let mut predictions = Vec::with_capacity(clips.len());
    let mut caches = Vec::with_capacity(clips.len());
    for clip in clips {
        let (feature, convlstm_state, feature_cache) = extract_features(
            &clip.frames,
            &carry.convlstm_state,
            params,
            config,
            training,
            rng,
        )?;
        carry.convlstm_state = convlstm_state;
        let (prediction, mut carry_out, predict_cache) =
            predict_step(&feature, &carry, params, config, training, rng)?;
        if teacher_forcing {
            carry_out.prev_output = clip.target;
        }
        carry = carry_out;
        predictions.push(prediction);
        caches.push(ClipCache {
            feature_cache,
            predict_cache,
        });
    }
    Ok((predictions, caches))
}

/// BPTT over the clips of one sequence given per-prediction loss gradients.
/// Exact through the ConvLSTM and vector-LSTM recurrences; truncated through
/// the prev_output feedback edge.
pub fn model_backprop(
    caches: &[ClipCache],
    d_predictions: &[[f64; 3]],
    params: &ModelParams,
    config: &ModelConfig,
    grads: &mut ModelParams,
) -> Result<()> {
    if caches.len() != d_predictions.len() {
        return Err(Error::ShapeMismatch("caches vs prediction grads".into()));
    }
    let trace = shape_trace(config)?;
    let (hw, hh, hc) = trace.convlstm_hidden;
    let mut d_lstm_state = VectorLstmState::zeros(config.lstm_hidden);
    let mut d_convlstm_state = ConvLstmState::zeros(hw, hh, hc);
    for (cache, d_pred) in caches.iter().zip(d_predictions.iter()).rev() {
        let (d_feature, d_lstm_prev) = predict_step_backward(
            &cache.predict_cache,
            params,
            config,
            *d_pred,
            &d_lstm_state,
            grads,
        )?;
        let d_convlstm_prev = extract_features_backward(
            &cache.feature_cache,
            params,
            config,
            &d_feature,
            &d_convlstm_state,
            grads,
        )?;
        d_lstm_state = d_lstm_prev;
        d_convlstm_state = d_convlstm_prev;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_scale_shape_anchors() {
        let trace = shape_trace(&ModelConfig::full_default()).unwrap();
        assert_eq!(trace.conv_outputs[0], (105, 78, 24, 13)); // 15 -> 13
        assert_eq!(trace.convlstm_input, (16, 10, 64, 10));
        assert_eq!(trace.convlstm_hidden, (14, 8, 64));
    }

    #[test]
    fn desk_config_is_feasible() {
        let trace = shape_trace(&ModelConfig::desk_default()).unwrap();
        for dims in &trace.conv_outputs {
            assert!(dims.0 >= 1 && dims.1 >= 1 && dims.2 >= 1 && dims.3 >= 1);
        }
        assert!(trace.convlstm_hidden.0 >= 1 && trace.convlstm_hidden.1 >= 1);
    }

    #[test]
    fn infeasible_config_rejected() {
        let mut config = ModelConfig::desk_default();
        config.stconv_specs.push(StConvSpec { kw: 99, kh: 99, sw: 1, sh: 1, c_out: 4, kt: 1 });
        assert!(shape_trace(&config).is_err());
    }

    fn random_clip(rng: &mut ChaCha8Rng, config: &ModelConfig, seq: usize, idx: usize) -> ClipInput {
        let n = config.input_width * config.input_height * config.input_channels * config.clip_length;
        let frames = Tensor4::from_vec(
            config.input_width,
            config.input_height,
            config.input_channels,
            config.clip_length,
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        ClipInput {
            frames,
            target: VehicleTriple {
                speed: rng.gen_range(-1.0..1.0),
                torque: rng.gen_range(-1.0..1.0),
                angle: rng.gen_range(-1.0..1.0),
            },
            sequence_id: seq,
            last_frame_index: idx,
        }
    }

    #[test]
    fn feature_length_and_zero_param_bias_sum() {
        let config = ModelConfig::grad_check_tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let clip = random_clip(&mut rng, &config, 0, 0);
        let mut params = ModelParams::zeros(&config).unwrap();
        for p in params.projections.iter_mut() {
            for v in p.bias.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let carry = ModelCarry::zeros(&config).unwrap();
        let zero_clip = ClipInput {
            frames: Tensor4::zeros(
                config.input_width,
                config.input_height,
                config.input_channels,
                config.clip_length,
            ),
            ..clip.clone()
        };
        let (feature, _, _) = extract_features(
            &zero_clip.frames,
            &carry.convlstm_state,
            &params,
            &config,
            false,
            &mut rng,
        )
        .unwrap();
        assert_eq!(feature.len(), config.feature_dim);
        let bias_sum: Vec<f64> = (0..config.feature_dim)
            .map(|i| params.projections.iter().map(|p| p.bias[i]).sum())
            .collect();
        for (a, b) in feature.iter().zip(bias_sum.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_lengths_full_scale() {
        // steering head only, full-scale dimensions
        let mut config = ModelConfig::grad_check_tiny();
        config.feature_dim = 128;
        config.lstm_hidden = 64;
        config.head_hidden = 64;
        let params = ModelParams::zeros(&config).unwrap();
        let carry = ModelCarry::zeros(&config).unwrap();
        let feature = vec![0.0; 128];
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let (_, _, cache) = predict_step(&feature, &carry, &params, &config, false, &mut rng)
            .unwrap();
        assert_eq!(cache.concat1.len(), 131);
        assert_eq!(cache.concat2.len(), 195);
    }

    #[test]
    fn zero_everything_prediction_is_output_bias() {
        let config = ModelConfig::grad_check_tiny();
        let mut params = ModelParams::zeros(&config).unwrap();
        params.head_out.bias = vec![0.4, -0.2, 0.9];
        let carry = ModelCarry::zeros(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let feature = vec![0.0; config.feature_dim];
        let (pred, _, _) = predict_step(&feature, &carry, &params, &config, false, &mut rng)
            .unwrap();
        assert_eq!(pred.to_array(), [0.4, -0.2, 0.9]);
    }

    #[test]
    fn recurrence_wiring_prev_output_feeds_next_concat() {
        let config = ModelConfig::grad_check_tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let clips = vec![
            random_clip(&mut rng, &config, 0, 0),
            random_clip(&mut rng, &config, 0, 1),
        ];
        let (preds, caches) =
            model_forward(&clips, &params, &config, false, false, &mut rng).unwrap();
        let tail = &caches[1].predict_cache.concat1[config.feature_dim..];
        assert_eq!(tail, preds[0].to_array());
    }

    #[test]
    fn model_forward_is_deterministic_in_inference() {
        let config = ModelConfig::grad_check_tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let clips = vec![
            random_clip(&mut rng, &config, 0, 0),
            random_clip(&mut rng, &config, 0, 1),
        ];
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let (p1, _) = model_forward(&clips, &params, &config, false, false, &mut r1).unwrap();
        let (p2, _) = model_forward(&clips, &params, &config, false, false, &mut r2).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn permuting_clips_changes_outputs() {
        let config = ModelConfig::grad_check_tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let clips = vec![
            random_clip(&mut rng, &config, 0, 0),
            random_clip(&mut rng, &config, 0, 1),
        ];
        let swapped = vec![clips[1].clone(), clips[0].clone()];
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let (p1, _) = model_forward(&clips, &params, &config, false, false, &mut r).unwrap();
        let (p2, _) = model_forward(&swapped, &params, &config, false, false, &mut r).unwrap();
        // second prediction depends on the carry, so order matters
        assert!(p1[1] != p2[0] || p1[0] != p2[1]);
    }

    #[test]
    fn single_clip_equals_manual_composition() {
        let config = ModelConfig::grad_check_tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let clip = random_clip(&mut rng, &config, 0, 0);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (preds, _) =
            model_forward(std::slice::from_ref(&clip), &params, &config, false, false, &mut r)
                .unwrap();
        let mut carry = ModelCarry::zeros(&config).unwrap();
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let (feature, state, _) = extract_features(
            &clip.frames,
            &carry.convlstm_state,
            &params,
            &config,
            false,
            &mut r2,
        )
        .unwrap();
        carry.convlstm_state = state;
        let (pred, _, _) = predict_step(&feature, &carry, &params, &config, false, &mut r2)
            .unwrap();
        assert_eq!(preds[0], pred);
    }
}
