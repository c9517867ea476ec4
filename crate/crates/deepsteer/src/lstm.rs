//! Standard vector LSTM cell (no peepholes). Each gate operates on the
//! concatenation [x; h_prev] through one dense layer.

use crate::error::{Error, Result};
use crate::tensor::{dense_backward, dense_forward, sigmoid, DenseWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct VectorLstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Gate order: input, forget, output, candidate.
    pub gates: [DenseWeights; 4],
}

impl VectorLstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let g = || DenseWeights::zeros(hidden_dim, input_dim + hidden_dim);
        VectorLstmParams {
            input_dim,
            hidden_dim,
            gates: [g(), g(), g(), g()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorLstmState {
    pub cell: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl VectorLstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        VectorLstmState {
            cell: vec![0.0; hidden_dim],
            hidden: vec![0.0; hidden_dim],
        }
    }
}

#[derive(Debug, Clone)]
pub struct LstmStepCache {
    pub z: Vec<f64>, // [x; h_prev]
    pub gate_i: Vec<f64>,
    pub gate_f: Vec<f64>,
    pub gate_o: Vec<f64>,
    pub cand: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub c_new: Vec<f64>,
}

pub fn lstm_step(
    x: &[f64],
    state: &VectorLstmState,
    params: &VectorLstmParams,
) -> Result<(Vec<f64>, VectorLstmState, LstmStepCache)> {
    if x.len() != params.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "lstm input length {} != {}",
            x.len(),
            params.input_dim
        )));
    }
    let mut z = Vec::with_capacity(params.input_dim + params.hidden_dim);
    z.extend_from_slice(x);
    z.extend_from_slice(&state.hidden);
    let pre_i = dense_forward(&params.gates[0], &z)?;
    let pre_f = dense_forward(&params.gates[1], &z)?;
    let pre_o = dense_forward(&params.gates[2], &z)?;
    let pre_c = dense_forward(&params.gates[3], &z)?;
    let gate_i: Vec<f64> = pre_i.iter().map(|&v| sigmoid(v)).collect();
    let gate_f: Vec<f64> = pre_f.iter().map(|&v| sigmoid(v)).collect();
    let gate_o: Vec<f64> = pre_o.iter().map(|&v| sigmoid(v)).collect();
    let cand: Vec<f64> = pre_c.iter().map(|&v| v.tanh()).collect();
    let c_new: Vec<f64> = (0..params.hidden_dim)
        .map(|k| gate_f[k] * state.cell[k] + gate_i[k] * cand[k])
        .collect();
    let hidden: Vec<f64> = (0..params.hidden_dim)
        .map(|k| gate_o[k] * c_new[k].tanh())
        .collect();
    let cache = LstmStepCache {
        z,
        gate_i,
        gate_f,
        gate_o,
        cand,
        c_prev: state.cell.clone(),
        c_new: c_new.clone(),
    };
    let state_new = VectorLstmState {
        cell: c_new,
        hidden: hidden.clone(),
    };
    Ok((hidden, state_new, cache))
}

pub type VectorLstmGrads = VectorLstmParams;

/// Backward of one step. Returns (d_x, d_state_prev) and accumulates
/// parameter gradients. `d_hidden` / `d_cell` are gradients w.r.t. the
/// step's output hidden and new cell state.
pub fn lstm_step_backward(
    cache: &LstmStepCache,
    params: &VectorLstmParams,
    d_hidden: &[f64],
    d_cell: &[f64],
    grads: &mut VectorLstmGrads,
) -> Result<(Vec<f64>, VectorLstmState)> {
    let n = params.hidden_dim;
    let mut dc = d_cell.to_vec();
    let mut d_o = vec![0.0; n];
    for k in 0..n {
        let tc = cache.c_new[k].tanh();
        d_o[k] = d_hidden[k] * tc;
        dc[k] += d_hidden[k] * cache.gate_o[k] * (1.0 - tc * tc);
    }
    let mut d_i = vec![0.0; n];
    let mut d_f = vec![0.0; n];
    let mut d_cand = vec![0.0; n];
    let mut dc_prev = vec![0.0; n];
    for k in 0..n {
        d_f[k] = dc[k] * cache.c_prev[k];
        dc_prev[k] = dc[k] * cache.gate_f[k];
        d_i[k] = dc[k] * cache.cand[k];
        d_cand[k] = dc[k] * cache.gate_i[k];
    }
    // through the nonlinearities into the dense layers
    let dz_i: Vec<f64> = (0..n)
        .map(|k| d_i[k] * cache.gate_i[k] * (1.0 - cache.gate_i[k]))
        .collect();
    let dz_f: Vec<f64> = (0..n)
        .map(|k| d_f[k] * cache.gate_f[k] * (1.0 - cache.gate_f[k]))
        .collect();
    let dz_o: Vec<f64> = (0..n)
        .map(|k| d_o[k] * cache.gate_o[k] * (1.0 - cache.gate_o[k]))
        .collect();
    let dz_c: Vec<f64> = (0..n)
        .map(|k| d_cand[k] * (1.0 - cache.cand[k] * cache.cand[k]))
        .collect();
    let mut d_z = vec![0.0; cache.z.len()];
    for (gate_idx, dz) in [dz_i, dz_f, dz_o, dz_c].iter().enumerate() {
        let (gw, gx) = dense_backward(&params.gates[gate_idx], &cache.z, dz)?;
        let acc = &mut grads.gates[gate_idx];
        for (a, b) in acc.weights.iter_mut().zip(gw.weights.iter()) {
            *a += b;
        }
        for (a, b) in acc.bias.iter_mut().zip(gw.bias.iter()) {
            *a += b;
        }
        for (a, b) in d_z.iter_mut().zip(gx.iter()) {
            *a += b;
        }
    }
    let d_x = d_z[..params.input_dim].to_vec();
    let d_h_prev = d_z[params.input_dim..].to_vec();
    Ok((
        d_x,
        VectorLstmState {
            cell: dc_prev,
            hidden: d_h_prev,
        },
    ))
}
