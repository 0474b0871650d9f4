//! Linear layers and GELU MLP encoders with a hand-written backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gelu, gelu_derivative, DenseMatrix, RngStream};
use crate::scalar::Scalar;

/// `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: DenseMatrix<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: DenseMatrix<T>, bias: Option<Vec<T>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.cols() {
                return Err(Error::DimMismatch(format!(
                    "bias of length {} for a layer with {} outputs",
                    b.len(),
                    weight.cols()
                )));
            }
        }
        Ok(Self { weight, bias })
    }

    /// Gaussian weights with variance `1/in`, zero bias.
    pub fn random(input: usize, output: usize, with_bias: bool, rng: &mut RngStream) -> Self {
        let std = 1.0 / (input.max(1) as f64).sqrt();
        let w = rng.normal_vec(input * output, std).into_iter().map(T::lit).collect();
        Self {
            weight: DenseMatrix::new(input, output, w).expect("sized"),
            bias: with_bias.then(|| vec![T::zero(); output]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: DenseMatrix::identity(dim),
            bias: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn num_params(&self) -> usize {
        self.weight.as_slice().len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn forward(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        let mut y = x.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            for i in 0..y.rows() {
                for (v, &bj) in y.row_mut(i).iter_mut().zip(b) {
                    *v += bj;
                }
            }
        }
        Ok(y)
    }

    /// Returns `dL/dx` and appends `dL/dW`, `dL/db` to `grads`.
    pub fn backward(&self, x: &DenseMatrix<T>, dy: &DenseMatrix<T>, grads: &mut Vec<T>) -> Result<DenseMatrix<T>> {
        let dw = x.t_matmul(dy)?;
        grads.extend_from_slice(dw.as_slice());
        if self.bias.is_some() {
            let mut db = vec![T::zero(); dy.cols()];
            for row in dy.row_iter() {
                for (acc, &v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            grads.extend(db);
        }
        dy.matmul_t(&self.weight)
    }

    pub fn write_params(&self, out: &mut Vec<T>) {
        out.extend_from_slice(self.weight.as_slice());
        if let Some(b) = &self.bias {
            out.extend_from_slice(b);
        }
    }

    /// Reads this layer's parameters from the front of `src`, returning the rest.
    pub fn read_params<'a>(&mut self, src: &'a [T]) -> Result<&'a [T]> {
        let n = self.num_params();
        if src.len() < n {
            return Err(Error::ShapeMismatch("parameter vector too short".into()));
        }
        let (mine, rest) = src.split_at(n);
        let nw = self.weight.as_slice().len();
        self.weight.as_mut_slice().copy_from_slice(&mine[..nw]);
        if let Some(b) = &mut self.bias {
            b.copy_from_slice(&mine[nw..]);
        }
        Ok(rest)
    }
}

/// Stack of linear layers with GELU between consecutive layers and none after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpEncoder<T> {
    layers: Vec<Linear<T>>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    /// Input of each layer.
    inputs: Vec<DenseMatrix<T>>,
    /// Pre-activation output of each hidden layer.
    preacts: Vec<DenseMatrix<T>>,
}

impl<T: Scalar> MlpEncoder<T> {
    pub fn new(layers: Vec<Linear<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::DimMismatch("encoder needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimMismatch(format!(
                    "layer emits {} features but next layer expects {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Random encoder with the given layer widths, e.g. `[24, 64, 16]`.
    pub fn random(dims: &[usize], with_bias: bool, rng: &mut RngStream) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::DimMismatch("need an input and output width".into()));
        }
        Self::new(
            dims.windows(2)
                .map(|w| Linear::random(w[0], w[1], with_bias, rng))
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Linear::output_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }

    fn check_input(&self, x: &DenseMatrix<T>) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimMismatch(format!(
                "encoder expects {} input features, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Raw (unnormalized) embeddings.
    pub fn encode(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if k < last {
                h = h.map(gelu);
            }
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &DenseMatrix<T>) -> Result<(DenseMatrix<T>, EncoderCache<T>)> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut cache = EncoderCache {
            inputs: Vec::with_capacity(self.layers.len()),
            preacts: Vec::with_capacity(last),
        };
        let mut h = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            cache.inputs.push(h);
            h = if k < last {
                let a = z.map(gelu);
                cache.preacts.push(z);
                a
            } else {
                z
            };
        }
        Ok((h, cache))
    }

    /// Parameter gradient in [`write_params`](Self::write_params) order.
    pub fn backward(&self, cache: &EncoderCache<T>, d_out: &DenseMatrix<T>) -> Result<Vec<T>> {
        let mut per_layer: Vec<Vec<T>> = vec![Vec::new(); self.layers.len()];
        let mut d = d_out.clone();
        for k in (0..self.layers.len()).rev() {
            if k < self.layers.len() - 1 {
                d = d.zip_with(&cache.preacts[k], |g, z| g * gelu_derivative(z))?;
            }
            d = self.layers[k].backward(&cache.inputs[k], &d, &mut per_layer[k])?;
        }
        Ok(per_layer.into_iter().flatten().collect())
    }

    pub fn write_params(&self, out: &mut Vec<T>) {
        for l in &self.layers {
            l.write_params(out);
        }
    }

    pub fn read_params<'a>(&mut self, mut src: &'a [T]) -> Result<&'a [T]> {
        for l in &mut self.layers {
            src = l.read_params(src)?;
        }
        Ok(src)
    }

    pub fn cast<U: Scalar>(&self) -> MlpEncoder<U> {
        MlpEncoder {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.as_ref().map(|b| b.iter().map(|&v| U::lit(v.as_f64())).collect()),
                })
                .collect(),
        }
    }
}

/// Serializable description of an encoder's layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub dims: Vec<usize>,
    pub bias: bool,
}

impl<T: Scalar> MlpEncoder<T> {
    pub fn shape(&self) -> EncoderShape {
        EncoderShape {
            dims: self.dims(),
            bias: self.layers[0].bias.is_some(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_gradient;

    type M = DenseMatrix<f64>;

    #[test]
    fn identity_encoder_passes_input_through() {
        let enc = MlpEncoder::new(vec![Linear::<f64>::identity(3)]).unwrap();
        let x = M::from_rows(&[[1.0, -2.0, 0.5], [0.0, 4.0, 1.0]]).unwrap();
        assert_eq!(enc.encode(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let enc = MlpEncoder::new(vec![
            Linear::new(M::zeros(2, 4), Some(vec![0.0; 4])).unwrap(),
            Linear::new(M::zeros(4, 3), Some(vec![0.0; 3])).unwrap(),
        ])
        .unwrap();
        let x = M::from_rows(&[[3.0, -1.0]]).unwrap();
        assert_eq!(enc.encode(&x).unwrap(), M::zeros(1, 3));
    }

    #[test]
    fn one_hidden_layer_matches_hand_computation() {
        // x = [1, 2]; W1 = [[1, 0], [0, -1]], b1 = [0.5, 0]; W2 = [[2], [1]], b2 = [-1]
        let enc = MlpEncoder::new(vec![
            Linear::new(M::from_rows(&[[1.0, 0.0], [0.0, -1.0]]).unwrap(), Some(vec![0.5, 0.0])).unwrap(),
            Linear::new(M::from_rows(&[[2.0], [1.0]]).unwrap(), Some(vec![-1.0])).unwrap(),
        ])
        .unwrap();
        let out = enc.encode(&M::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        let expected = 2.0 * gelu(1.5) + gelu(-2.0) - 1.0;
        assert!((out.get(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn mismatched_layers_rejected() {
        let mut rng = RngStream::new(0);
        let a = Linear::<f64>::random(3, 4, true, &mut rng);
        let b = Linear::<f64>::random(5, 2, true, &mut rng);
        assert!(MlpEncoder::new(vec![a, b]).is_err());
        let enc = MlpEncoder::<f64>::random(&[3, 4, 2], true, &mut rng).unwrap();
        assert!(matches!(enc.encode(&M::zeros(1, 2)), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngStream::new(4);
        let enc = MlpEncoder::<f64>::random(&[3, 5, 2], true, &mut rng).unwrap();
        let x = M::new(4, 3, rng.normal_vec(12, 1.0)).unwrap();
        let target = M::new(4, 2, rng.normal_vec(8, 1.0)).unwrap();
        // L = Σ out ⊙ target, so dL/dout = target
        let (_, cache) = enc.forward_cached(&x).unwrap();
        let analytic = enc.backward(&cache, &target).unwrap();
        let mut params = Vec::new();
        enc.write_params(&mut params);
        let loss = |p: &[f64]| {
            let mut e = enc.clone();
            e.read_params(p).unwrap();
            let out = e.encode(&x).unwrap();
            out.as_slice().iter().zip(target.as_slice()).map(|(a, b)| a * b).sum()
        };
        let numeric = finite_difference_gradient(loss, &params, 1e-6);
        assert_eq!(analytic.len(), numeric.len());
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
    }

    #[test]
    fn param_round_trip() {
        let mut rng = RngStream::new(8);
        let enc = MlpEncoder::<f64>::random(&[2, 3, 2], true, &mut rng).unwrap();
        let mut p = Vec::new();
        enc.write_params(&mut p);
        assert_eq!(p.len(), enc.num_params());
        let mut other = MlpEncoder::<f64>::random(&[2, 3, 2], true, &mut rng).unwrap();
        assert!(other.read_params(&p).unwrap().is_empty());
        assert_eq!(other, enc);
    }
}
