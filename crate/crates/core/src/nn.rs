//! Thin layer helpers over [`Graph`] that resolve `{name}.w` / `{name}.b`
//! parameters from a store.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, NodeId, ParamStore, Primitive};

fn weight_and_bias(g: &mut Graph, store: &ParamStore, name: &str) -> Result<Vec<NodeId>> {
    let mut ids = vec![g.param(store, &format!("{name}.w"))?];
    let bias = format!("{name}.b");
    if store.contains(&bias) {
        ids.push(g.param(store, &bias)?);
    }
    Ok(ids)
}

pub(crate) fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
    let mut inputs = vec![x];
    inputs.extend(weight_and_bias(g, store, name)?);
    g.apply(Primitive::Conv2d { stride, padding }, &inputs)
}

pub(crate) fn conv_t(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
    let mut inputs = vec![x];
    inputs.extend(weight_and_bias(g, store, name)?);
    g.apply(Primitive::ConvTranspose2d { stride, padding }, &inputs)
}

pub(crate) fn fc(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId) -> Result<NodeId> {
    let mut inputs = vec![x];
    inputs.extend(weight_and_bias(g, store, name)?);
    g.apply(Primitive::FullyConnected, &inputs)
}

pub(crate) fn relu(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    g.apply(Primitive::Relu, &[x])
}

pub(crate) fn add(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    g.apply(Primitive::Add, &[a, b])
}

pub(crate) fn init_conv(store: &mut ParamStore, name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) {
    store.init_uniform(&format!("{name}.w"), &[c_out, c_in, k, k], c_in * k * k, rng);
    store.init_zeros(&format!("{name}.b"), &[c_out]);
}

pub(crate) fn init_conv_t(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) {
    // Each output pixel of a stride-2, k=4 transposed conv sees c_in·(k/2)² taps.
    store.init_uniform(&format!("{name}.w"), &[c_in, c_out, k, k], c_in * k * k / 4, rng);
    store.init_zeros(&format!("{name}.b"), &[c_out]);
}

pub(crate) fn init_fc(store: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut impl Rng) {
    store.init_uniform(&format!("{name}.w"), &[out, inp], inp, rng);
    store.init_zeros(&format!("{name}.b"), &[out]);
}
