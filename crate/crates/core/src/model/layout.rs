use crate::error::{IkError, Result};
use crate::numerics::Tensor;

/// Location of one primary layer inside a flat parameter vector. The weight
/// is stored row-major as `rows×cols` (`out×in`), followed by the bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlice {
    pub rows: usize,
    pub cols: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSlice {
    pub fn weight_len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Parameter layout of the primary network for one joint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrimaryLayout {
    pub joint: usize,
    pub input_width: usize,
    pub layers: Vec<LayerSlice>,
    pub param_count: usize,
}

impl PrimaryLayout {
    /// Joint `k` (zero-based) sees `max(k, 1)` inputs: the preceding angles,
    /// or a single constant for the first joint.
    pub fn new(joint: usize, hidden: usize, depth: usize, out: usize) -> Self {
        let input_width = joint.max(1);
        let mut dims = vec![input_width];
        dims.extend(std::iter::repeat(hidden).take(depth - 1));
        dims.push(out);
        let mut offset = 0;
        let layers = dims
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                let weight_offset = offset;
                let bias_offset = offset + rows * cols;
                offset = bias_offset + rows;
                LayerSlice {
                    rows,
                    cols,
                    weight_offset,
                    bias_offset,
                }
            })
            .collect();
        PrimaryLayout {
            joint,
            input_width,
            layers,
            param_count: offset,
        }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.rows)
    }

    pub fn encode(&self, weights: &PrimaryWeights) -> Result<Vec<f64>> {
        if weights.layers.len() != self.layers.len() {
            return Err(IkError::shape(
                "primary encode",
                &[self.layers.len()],
                &[weights.layers.len()],
            ));
        }
        let mut flat = vec![0.0; self.param_count];
        for (slice, (w, b)) in self.layers.iter().zip(&weights.layers) {
            if w.shape() != [slice.rows, slice.cols] || b.len() != slice.rows {
                return Err(IkError::shape(
                    "primary encode",
                    &[slice.rows, slice.cols],
                    w.shape(),
                ));
            }
            flat[slice.weight_offset..slice.bias_offset].copy_from_slice(w.data());
            flat[slice.bias_offset..slice.bias_offset + slice.rows].copy_from_slice(b.data());
        }
        Ok(flat)
    }

    pub fn decode(&self, theta: &[f64]) -> Result<PrimaryWeights> {
        if theta.len() != self.param_count {
            return Err(IkError::shape("primary decode", &[self.param_count], &[theta.len()]));
        }
        let layers = self
            .layers
            .iter()
            .map(|s| {
                let w = Tensor::matrix(
                    s.rows,
                    s.cols,
                    theta[s.weight_offset..s.bias_offset].to_vec(),
                )
                .expect("slice shape");
                let b = Tensor::vector(theta[s.bias_offset..s.bias_offset + s.rows].to_vec());
                (w, b)
            })
            .collect();
        Ok(PrimaryWeights { layers })
    }
}

/// Explicit per-layer weights `(W[out×in], b[out])` of a primary network.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimaryWeights {
    pub layers: Vec<(Tensor, Tensor)>,
}

/// A primary network evaluated directly on a slice of hypernetwork output.
#[derive(Debug, Clone, Copy)]
pub struct PrimaryNet<'a> {
    pub layout: &'a PrimaryLayout,
    pub theta: &'a [f64],
}

impl<'a> PrimaryNet<'a> {
    pub fn new(layout: &'a PrimaryLayout, theta: &'a [f64]) -> Result<Self> {
        if theta.len() != layout.param_count {
            return Err(IkError::shape("primary", &[layout.param_count], &[theta.len()]));
        }
        Ok(PrimaryNet { layout, theta })
    }

    /// Forward pass for a batch of inputs `[batch × input_width]`, ReLU
    /// between layers, none after the last.
    pub fn forward(&self, inputs: &[f64], batch: usize) -> Vec<f64> {
        debug_assert_eq!(inputs.len(), batch * self.layout.input_width);
        let mut act = inputs.to_vec();
        let last = self.layout.layers.len() - 1;
        for (li, s) in self.layout.layers.iter().enumerate() {
            let bias = &self.theta[s.bias_offset..s.bias_offset + s.rows];
            let mut out = Vec::with_capacity(batch * s.rows);
            for _ in 0..batch {
                out.extend_from_slice(bias);
            }
            crate::numerics::tensor::gemm(
                false,
                true,
                batch,
                s.cols,
                s.rows,
                &act,
                &self.theta[s.weight_offset..s.bias_offset],
                &mut out,
                true,
            );
            if li != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            act = out;
        }
        act
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_cover_parameter_vector() {
        for joint in 0..4 {
            let l = PrimaryLayout::new(joint, 8, 3, 6);
            let total: usize = l.layers.iter().map(|s| s.weight_len() + s.rows).sum();
            assert_eq!(total, l.param_count);
            assert_eq!(l.layers[0].cols, joint.max(1));
            assert_eq!(l.output_width(), 6);
        }
    }

    #[test]
    fn first_joint_count() {
        // 1->4 (8), 4->4 (20), 4->6 (30)
        let l = PrimaryLayout::new(0, 4, 3, 6);
        assert_eq!(l.param_count, 8 + 20 + 30);
    }

    #[test]
    fn decode_then_encode_is_identity() {
        let l = PrimaryLayout::new(2, 5, 3, 6);
        let theta: Vec<f64> = (0..l.param_count).map(|i| i as f64 * 0.5 - 3.0).collect();
        let w = l.decode(&theta).unwrap();
        assert_eq!(l.encode(&w).unwrap(), theta);
    }

    #[test]
    fn forward_matches_explicit_layers() {
        let l = PrimaryLayout::new(2, 3, 2, 4);
        let theta: Vec<f64> = (0..l.param_count).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let net = PrimaryNet::new(&l, &theta).unwrap();
        let x = [0.5, -0.25];
        let out = net.forward(&x, 1);
        let w = l.decode(&theta).unwrap();
        let mut act = x.to_vec();
        for (i, (wm, b)) in w.layers.iter().enumerate() {
            let mut next: Vec<f64> = (0..wm.rows())
                .map(|r| (0..wm.cols()).map(|c| wm.get(r, c) * act[c]).sum::<f64>() + b.data()[r])
                .collect();
            if i + 1 < w.layers.len() {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            act = next;
        }
        assert_eq!(out, act);
    }
}
