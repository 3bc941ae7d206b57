use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Output nonlinearity applied after the last layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

/// Fully connected network with ReLU between layers. Weights are stored
/// `in × out` so a batch multiplies from the left.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub layers: Vec<(ParamId, ParamId)>,
    pub output: Activation,
}

impl Mlp {
    /// Adds a seeded network to `store`. Weights are uniform in
    /// `±1/sqrt(fan_in)`; biases start at zero.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        output: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Shape(format!("invalid layer sizes {dims:?}")));
        }
        let mut layers = Vec::new();
        for (l, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let w = store.add(format!("{prefix}.{l}.w"), Tensor::from_vec(fan_in, fan_out, w)?)?;
            let b = store.add(format!("{prefix}.{l}.b"), Tensor::zeros(1, fan_out))?;
            layers.push((w, b));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            dims: dims.to_vec(),
            layers,
            output,
        })
    }

    /// Looks up an existing network by name prefix.
    pub fn from_store(store: &ParamStore, prefix: &str, output: Activation) -> Result<Self> {
        let mut layers = Vec::new();
        let mut dims = Vec::new();
        for l in 0.. {
            let (Some(w), Some(b)) = (store.id(&format!("{prefix}.{l}.w")), store.id(&format!("{prefix}.{l}.b"))) else {
                break;
            };
            let ws = store.get(w).shape();
            if store.get(b).shape() != [1, ws[1]] || dims.last().is_some_and(|d| *d != ws[0]) {
                return Err(Error::Shape(format!("layer {l} of {prefix} has inconsistent shapes")));
            }
            if dims.is_empty() {
                dims.push(ws[0]);
            }
            dims.push(ws[1]);
            layers.push((w, b));
        }
        if layers.is_empty() {
            return Err(Error::Config(format!("no network named {prefix} in checkpoint")));
        }
        Ok(Self {
            prefix: prefix.to_string(),
            dims,
            layers,
            output,
        })
    }

    pub fn input_len(&self) -> usize {
        self.dims[0]
    }

    pub fn output_len(&self) -> usize {
        *self.dims.last().expect("non-empty")
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let [_, cols] = tape.shape(x);
        if cols != self.input_len() {
            return Err(Error::Shape(format!(
                "{} expects {} inputs, got {cols}",
                self.prefix,
                self.input_len()
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, (w, b)) in self.layers.iter().enumerate() {
            h = tape.linear(h, *w, *b);
            if l < last {
                h = tape.relu(h);
            }
        }
        Ok(match self.output {
            Activation::Linear => h,
            Activation::Relu => tape.relu(h),
            Activation::Sigmoid => tape.sigmoid(h),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::params::Gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&mut store, "n", &[4, 8, 3], Activation::Linear, &mut rng).unwrap();
        for id in net.param_ids() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::frozen(&store);
        let x = tape.constant(Tensor::filled(5, 4, 0.7));
        let y = net.forward(&mut tape, x).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&mut store, "id", &[3, 3], Activation::Linear, &mut rng).unwrap();
        let w = store.get_mut(net.layers[0].0);
        for r in 0..3 {
            for c in 0..3 {
                w.set(r, c, if r == c { 1.0 } else { 0.0 });
            }
        }
        let mut tape = Tape::frozen(&store);
        let input = Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -0.25]).unwrap();
        let x = tape.constant(input.clone());
        let y = net.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&mut store, "n", &[4, 2], Activation::Linear, &mut rng).unwrap();
        let mut tape = Tape::frozen(&store);
        let x = tape.constant(Tensor::zeros(1, 5));
        assert!(matches!(net.forward(&mut tape, x), Err(Error::Shape(_))));
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&mut store, "n", &[5, 7, 6, 3], Activation::Sigmoid, &mut rng).unwrap();
        for id in net.param_ids() {
            store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        let input = Tensor::from_vec(4, 5, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let eval = |s: &ParamStore| {
            let mut tape = Tape::frozen(s);
            let x = tape.constant(input.clone());
            let y = net.forward(&mut tape, x).unwrap();
            let l = tape.sum(y);
            tape.value(l).item()
        };
        let mut grads = Gradients::new();
        {
            let mut tape = Tape::new(&store);
            let x = tape.constant(input.clone());
            let y = net.forward(&mut tape, x).unwrap();
            let l = tape.sum(y);
            tape.backward(l, &mut grads).unwrap();
        }
        let h = 1e-5;
        let mut checked = 0;
        for id in net.param_ids() {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + h;
                let fp = eval(&store);
                store.get_mut(id).data_mut()[k] = orig - h;
                let fm = eval(&store);
                store.get_mut(id).data_mut()[k] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let a = grads.get(id).unwrap().data()[k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "{} [{k}]: {a} vs {fd}", store.name(id));
                checked += 1;
            }
        }
        assert!(checked > 100);
    }
}
