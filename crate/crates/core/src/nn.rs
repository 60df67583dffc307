//! Parameter initialization and thin layer wrappers over the graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::tensor::{BoundParams, Graph, ParamStore, Tensor, Var};

/// Independent stream per (seed, parameter name): adding or reordering
/// parameters never perturbs the others.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Uniform on `±sqrt(6 / fan_in)`, i.e. variance `2 / fan_in`.
pub fn kaiming_uniform(seed: u64, name: &str, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let mut rng = param_rng(seed, name);
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Registers `{name}.weight` (cout, cin, k...) and a zero `{name}.bias`.
pub fn add_conv(store: &mut ParamStore, seed: u64, name: &str, cout: usize, cin: usize, kernel: &[usize]) -> Result<()> {
    let fan_in = cin * kernel.iter().product::<usize>();
    let mut shape = vec![cout, cin];
    shape.extend_from_slice(kernel);
    let wname = format!("{name}.weight");
    store.insert(&wname, kaiming_uniform(seed, &wname, shape, fan_in))?;
    store.insert(&format!("{name}.bias"), Tensor::zeros(vec![cout]))
}

/// Registers a dense layer `{name}.weight` (out, in) with `{name}.bias` (out, 1).
pub fn add_linear(store: &mut ParamStore, seed: u64, name: &str, out: usize, inp: usize) -> Result<()> {
    let wname = format!("{name}.weight");
    store.insert(&wname, kaiming_uniform(seed, &wname, vec![out, inp], inp))?;
    store.insert(&format!("{name}.bias"), Tensor::zeros(vec![out, 1]))
}

pub fn conv2d(g: &mut Graph, p: &BoundParams, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    g.conv2d(x, w, b, [stride; 2], [pad; 2])
}

pub fn conv3d(g: &mut Graph, p: &BoundParams, name: &str, x: Var, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    g.conv3d(x, w, b, stride, pad)
}

/// `W·x + b` for `x` of shape (in, N); the bias broadcasts over columns.
pub fn linear(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = g.matmul(w, x)?;
    let shape = g.shape(y).to_vec();
    let bb = g.broadcast(b, &shape)?;
    g.add(y, bb)
}
