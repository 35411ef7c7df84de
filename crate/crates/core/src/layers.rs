//! Named-parameter building blocks shared by the networks.

use crate::error::Result;
use crate::numerics::{init, Elem, Graph, ParamStore, PortableRng, Var};

pub const NORM_EPS: f64 = 1e-5;
/// Kernel size of stride-2 downsampling convolutions.
pub const DOWN_KERNEL: usize = 4;

/// Group count used for a `c`-channel group norm.
pub fn norm_groups(c: usize) -> usize {
    [8, 4, 2].into_iter().find(|g| c % g == 0 && c / g >= 2).unwrap_or(1)
}

/// Convolution with `(k − 1) / 2` padding: odd kernels keep the size at
/// stride 1, a 4×4 kernel halves it at stride 2.
pub fn conv<T: Elem>(g: &mut Graph<T>, p: &ParamStore, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = g.param(p, &format!("{name}.weight"))?;
    let b = g.param(p, &format!("{name}.bias"))?;
    let k = g.shape(w)[2];
    g.conv2d(x, w, b, stride, (k - 1) / 2)
}

pub fn norm<T: Elem>(g: &mut Graph<T>, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(p, &format!("{name}.gamma"))?;
    let beta = g.param(p, &format!("{name}.beta"))?;
    let c = g.shape(x)[1];
    g.group_norm(x, norm_groups(c), gamma, beta, NORM_EPS)
}

pub fn linear<T: Elem>(g: &mut Graph<T>, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.weight"))?;
    let b = g.param(p, &format!("{name}.bias"))?;
    g.linear(x, w, b)
}

/// `silu(norm(conv(x)))`.
pub fn conv_norm_act<T: Elem>(g: &mut Graph<T>, p: &ParamStore, name: &str, x: Var, stride: usize) -> Result<Var> {
    let h = conv(g, p, &format!("{name}.conv"), x, stride)?;
    let h = norm(g, p, &format!("{name}.norm"), h)?;
    Ok(g.silu(h))
}

pub fn init_conv_norm(
    store: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut PortableRng,
) -> Result<()> {
    init::conv(store, &format!("{name}.conv"), cin, cout, k, rng)?;
    init::norm(store, &format!("{name}.norm"), cout)
}

/// Parameter count of a `k×k` conv with bias.
pub const fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}
