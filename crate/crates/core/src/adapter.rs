//! Low-rank residual adapters.
//!
//! `Adapter(H) = ReLU(LN(H)·W_E)·W_D + H`, with `W_E: d×m`, `W_D: m×d` and a
//! layer norm owned by the adapter. `W_D` starts at zero, so a fresh adapter
//! is exactly the identity map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vlm_tensor::{Graph, Scalar, Tensor, Var};

use crate::params::{normal_tensor, param_struct};
use crate::{Result, VlmError, LN_EPS};

param_struct!(
    /// Layer norm (`ln_g`, `ln_b`: d) followed by the `d → m → d` bottleneck.
    AdapterLayer { ln_g, ln_b, w_e, w_d }
);

pub type AdapterWeights<S = f32> = AdapterLayer<Tensor<S>>;

/// One adapter per backbone layer, all sharing the task's bottleneck size.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterStack<T> {
    pub bottleneck: usize,
    pub layers: Vec<AdapterLayer<T>>,
}

impl<T> AdapterStack<T> {
    pub fn try_map<'a, U, E>(
        &'a self,
        prefix: &str,
        f: &mut impl FnMut(&str, &'a T) -> std::result::Result<U, E>,
    ) -> std::result::Result<AdapterStack<U>, E> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.try_map(&format!("{prefix}adapter.{i}."), f))
            .collect::<std::result::Result<_, _>>()?;
        Ok(AdapterStack {
            bottleneck: self.bottleneck,
            layers,
        })
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.for_each_mut(&format!("{prefix}adapter.{i}."), f);
        }
    }

    pub fn entries<'a>(&'a self, prefix: &str) -> Vec<(String, &'a T)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.entries(&format!("{prefix}adapter.{i}.")))
            .collect()
    }
}

pub type AdapterStackWeights<S = f32> = AdapterStack<Tensor<S>>;

/// Fresh adapter: `gamma = 1`, `beta = 0`, `W_E ~ N(0, 0.02)`, `W_D = 0`.
pub fn init_adapter<S: Scalar>(d: usize, m: usize, seed: u64) -> Result<AdapterWeights<S>> {
    if d == 0 || m == 0 {
        return Err(VlmError::Invalid(format!(
            "adapter dimensions must be positive (d={d}, m={m})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(AdapterLayer {
        ln_g: Tensor::ones(&[d]),
        ln_b: Tensor::zeros(&[d]),
        w_e: normal_tensor(&mut rng, &[d, m], 0.02)?,
        w_d: Tensor::zeros(&[m, d]),
    })
}

pub fn init_adapter_stack<S: Scalar>(
    d: usize,
    m: usize,
    n_layers: usize,
    seed: u64,
) -> Result<AdapterStackWeights<S>> {
    let layers = (0..n_layers)
        .map(|i| init_adapter(d, m, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    Ok(AdapterStack {
        bottleneck: m,
        layers,
    })
}

/// `L·(2d + 2·d·m)`: two layer-norm vectors and the two projections per layer.
pub fn count_adapter_params(d: u64, m: u64, n_layers: u64) -> Result<u64> {
    if d == 0 || m == 0 || n_layers == 0 {
        return Err(VlmError::Invalid(format!(
            "adapter counts need positive arguments (d={d}, m={m}, L={n_layers})"
        )));
    }
    Ok(n_layers * (2 * d + 2 * d * m))
}

/// Records `ReLU(LN(H)·W_E)·W_D + H` on the graph.
pub fn adapter_forward<S: Scalar>(g: &mut Graph<S>, layer: &AdapterLayer<Var>, h: Var) -> Result<Var> {
    let d = g.value(h).cols();
    let (wd, m) = (g.value(layer.w_e).shape()[0], g.value(layer.w_e).shape()[1]);
    if wd != d || g.value(layer.w_d).shape() != [m, d] {
        return Err(VlmError::Tensor(vlm_tensor::TensorError::ShapeMismatch {
            op: "adapter",
            left: g.value(h).shape().to_vec(),
            right: g.value(layer.w_e).shape().to_vec(),
        }));
    }
    let ln = g.layer_norm(h, layer.ln_g, layer.ln_b, S::lit(LN_EPS))?;
    let down = g.matmul(ln, layer.w_e)?;
    let act = g.relu(down)?;
    let up = g.matmul(act, layer.w_d)?;
    Ok(g.add(up, h)?)
}

/// Applies an adapter to a concrete tensor without recording gradients.
pub fn apply_adapter<S: Scalar>(layer: &AdapterWeights<S>, h: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let vars = layer.try_map("", &mut |_, t| g.constant(t.clone()))?;
    let x = g.constant(h.clone())?;
    let y = adapter_forward(&mut g, &vars, x)?;
    Ok(g.value(y).clone())
}
