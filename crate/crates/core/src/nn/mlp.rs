use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;

use super::Scalar;
use crate::rng::Rng;
use crate::{Error, Result};

/// mish(x) = x * tanh(softplus(x)), evaluated with a single exponential.
#[inline]
pub fn mish<F: Scalar>(x: F) -> F {
    if x > F::c(20.0) {
        return x;
    }
    let e = x.exp();
    let n = e * (e + F::c(2.0));
    x * n / (n + F::c(2.0))
}

#[inline]
pub fn mish_grad<F: Scalar>(x: F) -> F {
    if x > F::c(20.0) {
        return F::one();
    }
    let e = x.exp();
    let n = e * (e + F::c(2.0));
    let t = n / (n + F::c(2.0));
    let sig = e / (F::one() + e);
    t + x * (F::one() - t * t) * sig
}

/// Fully connected network: Mish on hidden layers, identity on the output.
///
/// Layer `l` stores a row-major `(in, out)` weight block followed by its bias, all
/// inside one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    widths: Vec<usize>,
    params: Vec<F>,
}

/// Intermediates recorded by [`Mlp::forward_tape`] and consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Tape<F> {
    widths: Vec<usize>,
    /// Input to every layer.
    inputs: Vec<Array2<F>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<F>>,
}

impl<F> Tape<F> {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::Shape(format!(
            "an MLP needs at least input and output widths, got {widths:?}"
        )));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::Shape(format!("zero layer width in {widths:?}")));
    }
    Ok(())
}

impl<F: Scalar> Mlp<F> {
    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn new(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        check_widths(widths)?;
        let mut params = Vec::with_capacity(param_count(widths));
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1] + w[1]) {
                params.push(F::c(rng.random_range(-bound..bound)));
            }
        }
        Ok(Self {
            widths: widths.to_vec(),
            params,
        })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        Ok(Self {
            widths: widths.to_vec(),
            params: vec![F::zero(); param_count(widths)],
        })
    }

    pub fn from_params(widths: &[usize], params: Vec<F>) -> Result<Self> {
        check_widths(widths)?;
        let expected = param_count(widths);
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "widths {widths:?} need {expected} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            widths: widths.to_vec(),
            params,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<G: Scalar>(&self) -> Mlp<G> {
        Mlp {
            widths: self.widths.clone(),
            params: self.params.iter().map(|&p| G::c(p.f64())).collect(),
        }
    }

    fn offsets(&self, layer: usize) -> (usize, usize, usize) {
        let mut off = 0;
        for w in self.widths.windows(2).take(layer) {
            off += w[0] * w[1] + w[1];
        }
        let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
        (off, off + fan_in * fan_out, off + fan_in * fan_out + fan_out)
    }

    /// Weight `(in, out)` and bias views of layer `layer`.
    pub fn layer(&self, layer: usize) -> (ArrayView2<'_, F>, ArrayView1<'_, F>) {
        let (w0, b0, end) = self.offsets(layer);
        let shape = (self.widths[layer], self.widths[layer + 1]);
        (
            ArrayView2::from_shape(shape, &self.params[w0..b0]).unwrap(),
            ArrayView1::from(&self.params[b0..end]),
        )
    }

    fn check_input(&self, x: &ArrayView2<F>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn affine(&self, layer: usize, x: &ArrayView2<F>) -> Array2<F> {
        let (w, b) = self.layer(layer);
        let mut z = x.dot(&w);
        z.zip_mut_with(&b, |v, &c| *v = *v + c);
        z
    }

    /// Batched forward pass, one sample per row.
    pub fn forward(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        self.check_input(&x)?;
        let last = self.num_layers() - 1;
        let mut h = self.affine(0, &x);
        for l in 1..=last {
            h.mapv_inplace(mish);
            h = self.affine(l, &h.view());
        }
        Ok(h)
    }

    /// Forward pass that records what [`Mlp::backward`] needs.
    pub fn forward_tape(&self, x: ArrayView2<F>) -> Result<(Array2<F>, Tape<F>)> {
        self.check_input(&x)?;
        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers - 1);
        inputs.push(x.to_owned());
        let mut z = self.affine(0, &x);
        for l in 1..layers {
            let h = z.mapv(mish);
            pre.push(z);
            z = self.affine(l, &h.view());
            inputs.push(h);
        }
        Ok((
            z,
            Tape {
                widths: self.widths.clone(),
                inputs,
                pre,
            },
        ))
    }

    /// Reverse-mode gradient of `sum(grad_out * output)` w.r.t. the parameters.
    pub fn backward(&self, tape: &Tape<F>, grad_out: ArrayView2<F>) -> Result<Vec<F>> {
        let mut grads = vec![F::zero(); self.num_params()];
        self.backward_acc(tape, grad_out, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Mlp::backward`] but accumulates into `grads`.
    pub fn backward_acc(&self, tape: &Tape<F>, grad_out: ArrayView2<F>, grads: &mut [F]) -> Result<()> {
        if tape.widths != self.widths {
            return Err(Error::Shape(format!(
                "tape recorded for widths {:?}, network has {:?}",
                tape.widths, self.widths
            )));
        }
        if grad_out.dim() != (tape.batch_size(), self.output_dim()) {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match recorded batch ({}, {})",
                grad_out.dim(),
                tape.batch_size(),
                self.output_dim()
            )));
        }
        if grads.len() != self.num_params() {
            return Err(Error::Shape("gradient buffer length".into()));
        }
        let mut delta = grad_out.to_owned();
        for l in (0..self.num_layers()).rev() {
            let (w0, b0, end) = self.offsets(l);
            let x = &tape.inputs[l];
            let dw = x.t().dot(&delta);
            for (g, &d) in grads[w0..b0].iter_mut().zip(dw.iter()) {
                *g = *g + d;
            }
            let db = delta.sum_axis(Axis(0));
            for (g, &d) in grads[b0..end].iter_mut().zip(db.iter()) {
                *g = *g + d;
            }
            if l > 0 {
                let (w, _) = self.layer(l);
                let mut dx = delta.dot(&w.t());
                ndarray::Zip::from(&mut dx)
                    .and(&tape.pre[l - 1])
                    .for_each(|d, &z| *d = *d * mish_grad(z));
                delta = dx;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use ndarray::array;

    #[test]
    fn mish_matches_definition() {
        for &x in &[-30.0f64, -3.0, -0.5, 0.0, 0.7, 4.0, 25.0] {
            let softplus = (1.0 + f64::exp(x)).ln();
            let expected = x * softplus.tanh();
            assert!((mish(x) - expected).abs() < 1e-12, "x={x}");
        }
        assert_eq!(mish(0.0f64), 0.0);
    }

    #[test]
    fn mish_grad_matches_central_difference() {
        for &x in &[-6.0f64, -1.2, 0.0, 0.3, 2.5, 19.0] {
            let h = 1e-6;
            let fd = (mish(x + h) - mish(x - h)) / (2.0 * h);
            assert!((mish_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::<f64>::zeros(&[3, 5, 5, 2]).unwrap();
        let y = net.forward(array![[1.0, -2.0, 3.0], [0.5, 0.5, 9.0]].view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_identity_layer_is_identity() {
        let net = Mlp::<f64>::from_params(&[2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let x = array![[0.25, -7.0]];
        assert_eq!(net.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn construction_rejects_bad_shapes() {
        assert!(Mlp::<f32>::zeros(&[4]).is_err());
        assert!(Mlp::<f32>::zeros(&[4, 0, 2]).is_err());
        assert!(Mlp::<f32>::from_params(&[2, 2], vec![0.0; 5]).is_err());
        let net = Mlp::<f32>::zeros(&[2, 2]).unwrap();
        assert!(net.forward(Array2::zeros((1, 3)).view()).is_err());
    }

    #[test]
    fn backward_rejects_foreign_tape() {
        let mut rng = stream(0, Stream::Init);
        let a = Mlp::<f64>::new(&[2, 4, 1], &mut rng).unwrap();
        let b = Mlp::<f64>::new(&[2, 3, 1], &mut rng).unwrap();
        let (_, tape) = a.forward_tape(Array2::zeros((2, 2)).view()).unwrap();
        assert!(b.backward(&tape, Array2::zeros((2, 1)).view()).is_err());
        assert!(a.backward(&tape, Array2::zeros((3, 1)).view()).is_err());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = stream(5, Stream::Init);
        let net = Mlp::<f64>::new(&[16, 4], &mut rng).unwrap();
        assert!(net.params().iter().all(|p| p.abs() <= 0.25));
    }

    #[test]
    fn quadratic_loss_on_zero_net_only_touches_output_bias() {
        // With zero weights every hidden activation is mish(0) = 0, and so is the
        // output. A nonzero output-bias would be needed for a nonzero gradient.
        let mut net = Mlp::<f64>::zeros(&[3, 4, 2]).unwrap();
        let x = array![[1.0, 2.0, 3.0]];
        let (y, tape) = net.forward_tape(x.view()).unwrap();
        let g = net.backward(&tape, y.view()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let n = net.num_params();
        net.params_mut()[n - 1] = 0.5;
        let (y, tape) = net.forward_tape(x.view()).unwrap();
        let g = net.backward(&tape, y.view()).unwrap();
        let nonzero: Vec<usize> = (0..n).filter(|&i| g[i] != 0.0).collect();
        assert_eq!(nonzero, vec![n - 1]);
    }
}
