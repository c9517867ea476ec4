//! Composite layers: ST-Conv + ReLU + dropout, and multi-scale residual
//! aggregation of flattened layer responses into one fixed-length feature.

use crate::error::{Error, Result};
use crate::tensor::{
    dense_backward, dense_forward, dropout_apply, dropout_with_mask, pointwise_backward,
    pointwise_forward, stconv_backward, stconv_forward, DenseWeights, Kernel5, PointwiseOp,
    Tensor4,
};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct StConvLayerCache {
    pub input: Tensor4,
    pub relu_out: Tensor4,
    pub mask: Vec<f64>,
}

/// dropout(relu(stconv(x))) with inverted dropout scaling.
pub fn stconv_layer_forward<R: Rng>(
    x: &Tensor4,
    kernel: &Kernel5,
    stride: (usize, usize),
    keep_prob: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor4, StConvLayerCache)> {
    let conv = stconv_forward(x, kernel, stride)?;
    let relu_out = pointwise_forward(PointwiseOp::Relu, &conv);
    let (out, mask) = dropout_apply(&relu_out, keep_prob, rng, training)?;
    Ok((
        out,
        StConvLayerCache {
            input: x.clone(),
            relu_out,
            mask,
        },
    ))
}

/// Backward of `stconv_layer_forward`. Returns (grad_input, grad_kernel).
pub fn stconv_layer_backward(
    cache: &StConvLayerCache,
    kernel: &Kernel5,
    stride: (usize, usize),
    grad_out: &Tensor4,
) -> Result<(Tensor4, Kernel5)> {
    let after_mask = dropout_with_mask(grad_out, &cache.mask)?;
    let after_relu = pointwise_backward(PointwiseOp::Relu, &cache.relu_out, &after_mask)?;
    stconv_backward(&cache.input, kernel, stride, &after_relu)
}

/// Sum of per-layer dense projections of flattened responses. Each slice k
/// must have length `projections[k].cols`; all projections share `rows`.
pub fn residual_aggregate(slices: &[Vec<f64>], projections: &[DenseWeights]) -> Result<Vec<f64>> {
    if slices.len() != projections.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} slices vs {} projections",
            slices.len(),
            projections.len()
        )));
    }
    if projections.is_empty() {
        return Err(Error::ShapeMismatch("no layers to aggregate".into()));
    }
    let rows = projections[0].rows;
    let mut out = vec![0.0; rows];
    for (slice, proj) in slices.iter().zip(projections.iter()) {
        if proj.rows != rows {
            return Err(Error::ShapeMismatch("projection output dims differ".into()));
        }
        let term = dense_forward(proj, slice)?;
        for (a, b) in out.iter_mut().zip(term.iter()) {
            *a += b;
        }
    }
    Ok(out)
}

/// Backward of `residual_aggregate`: gradients for every projection and
/// every input slice.
pub fn residual_aggregate_backward(
    slices: &[Vec<f64>],
    projections: &[DenseWeights],
    grad_out: &[f64],
) -> Result<(Vec<DenseWeights>, Vec<Vec<f64>>)> {
    let mut grad_projs = Vec::with_capacity(projections.len());
    let mut grad_slices = Vec::with_capacity(slices.len());
    for (slice, proj) in slices.iter().zip(projections.iter()) {
        let (gw, gx) = dense_backward(proj, slice, grad_out)?;
        grad_projs.push(gw);
        grad_slices.push(gx);
    }
    Ok((grad_projs, grad_slices))
}
