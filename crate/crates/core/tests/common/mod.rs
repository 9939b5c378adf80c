#![allow(dead_code)]

use infocom::detect::{self, BoundingBox};
use infocom::iae::{self, IaeConfig};
use infocom::msd::{self, MaskGuidance, MsdConfig};
use infocom::smg::{self, SmgConfig};
use infocom::tensor::{apply_primitive, Graph, NodeId, ParamStore, Primitive, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-6;
pub const GRAD_POINTS: usize = 20;
/// One-sided slopes further apart than this mark a kink inside the stencil.
const KINK_TOL: f64 = 1e-4;

/// Differentiable parameters and inputs of one evaluation point, plus constants.
#[derive(Clone, Debug)]
pub struct Point {
    pub params: ParamStore,
    pub inputs: Vec<Tensor>,
    pub consts: Vec<Tensor>,
}

/// Builds the scalar under test. `relaxed` asks for the straight-through
/// surrogate: every quantizer is replaced by `y + (Q(y₀) − y₀)` with `y₀` taken
/// at `base`, which is the function whose derivative the engine reports.
pub type BuildFn = dyn Fn(&mut Graph, &ParamStore, &[NodeId], &Point, bool) -> infocom::Result<NodeId>;

pub struct GradCase {
    pub name: &'static str,
    pub sample: Box<dyn Fn(&mut ChaCha8Rng) -> Point>,
    pub build: Box<BuildFn>,
}

pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for kinked primitives.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..2.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn eval(case: &GradCase, p: &Point, base: &Point, relaxed: bool) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = p.inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.build)(&mut g, &p.params, &ids, base, relaxed).expect("build");
    g.value(out).item()
}

fn shifted(p: &Point, dir: &Point, t: f64) -> Point {
    let mut q = p.clone();
    for (name, v) in q.params.iter_mut() {
        let d = dir.params.get(name).expect("direction covers every parameter");
        *v = v.zip_map(d, |a, b| a + t * b);
    }
    for (v, d) in q.inputs.iter_mut().zip(&dir.inputs) {
        *v = v.zip_map(d, |a, b| a + t * b);
    }
    q
}

/// Worst relative error between the engine's directional derivative and a
/// central difference, over `points` random points and directions. Points
/// whose stencil straddles a kink are redrawn, at most `points` times.
pub fn max_directional_error(case: &GradCase, points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let (mut done, mut skipped) = (0, 0);
    while done < points {
        let base = (case.sample)(&mut rng);
        let mut dir = base.clone();
        for (_, v) in dir.params.iter_mut() {
            *v = randn(&mut rng, v.shape());
        }
        for v in dir.inputs.iter_mut() {
            *v = randn(&mut rng, v.shape());
        }
        let up = eval(case, &shifted(&base, &dir, FD_STEP), &base, true);
        let mid = eval(case, &base, &base, true);
        let down = eval(case, &shifted(&base, &dir, -FD_STEP), &base, true);
        let (fwd, bwd) = ((up - mid) / FD_STEP, (mid - down) / FD_STEP);
        if (fwd - bwd).abs() > KINK_TOL * fwd.abs().max(bwd.abs()).max(1.0) {
            skipped += 1;
            assert!(skipped <= points, "{}: {skipped} points sat on kinks", case.name);
            continue;
        }
        let numeric = (up - down) / (2.0 * FD_STEP);

        let mut g = Graph::new();
        let ids: Vec<NodeId> = base.inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = (case.build)(&mut g, &base.params, &ids, &base, false).expect("build");
        let grads = g.backward(out).expect("backward");
        let mut analytic = 0.0;
        for (name, gp) in grads.for_params(&base.params) {
            analytic += gp.dot(dir.params.get(&name).unwrap());
        }
        for (id, d) in ids.iter().zip(&dir.inputs) {
            if let Some(gi) = grads.wrt(*id) {
                analytic += gi.dot(d);
            }
        }
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
        done += 1;
    }
    worst
}

fn contract(g: &mut Graph, out: NodeId, weights: &Tensor) -> infocom::Result<NodeId> {
    let w = g.input(weights.clone());
    let prod = g.apply(Primitive::Mul, &[out, w])?;
    g.apply(Primitive::Sum, &[prod])
}

/// `Σ R ⊙ p(inputs)` for a single primitive; `consts[0]` is `R`, further
/// constants are appended after the inputs.
fn primitive_case(name: &'static str, p: Primitive, sample: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Vec<Tensor>) + 'static) -> GradCase {
    let prim = p.clone();
    GradCase {
        name,
        sample: Box::new(move |rng| {
            let (inputs, extra) = sample(rng);
            let refs: Vec<&Tensor> = inputs.iter().chain(&extra).collect();
            let out = apply_primitive(&prim, &refs).expect("forward");
            let mut consts = vec![randn(rng, out.shape())];
            consts.extend(extra);
            Point {
                params: ParamStore::new(),
                inputs,
                consts,
            }
        }),
        build: Box::new(move |g, _, ids, base, _| {
            let mut all = ids.to_vec();
            for c in &base.consts[1..] {
                all.push(g.input(c.clone()));
            }
            let out = g.apply(p.clone(), &all)?;
            contract(g, out, &base.consts[0])
        }),
    }
}

fn no_extra(inputs: Vec<Tensor>) -> (Vec<Tensor>, Vec<Tensor>) {
    (inputs, Vec::new())
}

pub fn primitive_cases() -> Vec<GradCase> {
    vec![
        primitive_case("conv2d_same_bias", Primitive::Conv2d { stride: 1, padding: 1 }, |r| {
            no_extra(vec![randn(r, &[3, 6, 5]), randn(r, &[4, 3, 3, 3]), randn(r, &[4])])
        }),
        primitive_case("conv2d_stride2", Primitive::Conv2d { stride: 2, padding: 1 }, |r| {
            no_extra(vec![randn(r, &[2, 8, 8]), randn(r, &[3, 2, 3, 3])])
        }),
        primitive_case("conv2d_2x2_pool", Primitive::Conv2d { stride: 2, padding: 0 }, |r| {
            no_extra(vec![randn(r, &[1, 8, 6]), randn(r, &[1, 1, 2, 2])])
        }),
        primitive_case("conv_transpose2d", Primitive::ConvTranspose2d { stride: 2, padding: 1 }, |r| {
            no_extra(vec![randn(r, &[3, 4, 5]), randn(r, &[3, 2, 4, 4]), randn(r, &[2])])
        }),
        primitive_case("fully_connected", Primitive::FullyConnected, |r| {
            no_extra(vec![randn(r, &[2, 3, 2]), randn(r, &[5, 12]), randn(r, &[5])])
        }),
        primitive_case("relu", Primitive::Relu, |r| no_extra(vec![away_from_zero(r, &[3, 4, 4])])),
        primitive_case("sigmoid", Primitive::Sigmoid, |r| no_extra(vec![randn(r, &[2, 5])])),
        primitive_case("exp", Primitive::Exp, |r| no_extra(vec![randn(r, &[7])])),
        primitive_case("ln", Primitive::Ln, |r| no_extra(vec![uniform(r, &[7], 0.2, 3.0)])),
        primitive_case("abs", Primitive::Abs, |r| no_extra(vec![away_from_zero(r, &[9])])),
        primitive_case("adaptive_max_pool", Primitive::AdaptiveMaxPool { out_h: 4, out_w: 4 }, |r| {
            no_extra(vec![randn(r, &[3, 9, 7])])
        }),
        primitive_case("add", Primitive::Add, |r| no_extra(vec![randn(r, &[2, 3, 3]), randn(r, &[2, 3, 3])])),
        primitive_case("sub", Primitive::Sub, |r| no_extra(vec![randn(r, &[6]), randn(r, &[6])])),
        primitive_case("mul", Primitive::Mul, |r| no_extra(vec![randn(r, &[2, 3, 3]), randn(r, &[2, 3, 3])])),
        primitive_case("concat_channels", Primitive::ConcatChannels, |r| {
            no_extra(vec![randn(r, &[2, 4, 4]), randn(r, &[3, 4, 4]), randn(r, &[1, 4, 4])])
        }),
        primitive_case("reshape", Primitive::Reshape { shape: vec![4, 6] }, |r| no_extra(vec![randn(r, &[2, 3, 4])])),
        primitive_case("broadcast_scale", Primitive::BroadcastScale, |r| {
            no_extra(vec![randn(r, &[3, 4, 5]), randn(r, &[1, 4, 5])])
        }),
        primitive_case("maximum", Primitive::Maximum, |r| {
            no_extra(vec![randn(r, &[2, 4, 4]), randn(r, &[2, 4, 4]), randn(r, &[2, 4, 4])])
        }),
        primitive_case("affine", Primitive::Affine { scale: -1.5, shift: 0.25 }, |r| no_extra(vec![randn(r, &[8])])),
        primitive_case("sum", Primitive::Sum, |r| no_extra(vec![randn(r, &[3, 2, 2])])),
        primitive_case("mean", Primitive::Mean, |r| no_extra(vec![randn(r, &[3, 2, 2])])),
        primitive_case("bce_with_logits", Primitive::BceWithLogits, |r| {
            let t = uniform(r, &[1, 4, 4], 0.0, 1.0);
            (vec![randn(r, &[1, 4, 4])], vec![t])
        }),
        quantize_chain(),
        sparsify_chain(),
    ]
}

/// `Σ R ⊙ Q_b(sigmoid(x))` through the straight-through quantizer.
fn quantize_chain() -> GradCase {
    GradCase {
        name: "quantize_ste_chain",
        sample: Box::new(|r| Point {
            params: ParamStore::new(),
            inputs: vec![randn(r, &[2, 5, 5])],
            consts: vec![randn(r, &[2, 5, 5])],
        }),
        build: Box::new(|g, _, ids, base, relaxed| {
            let y = g.apply(Primitive::Sigmoid, &[ids[0]])?;
            let q = if relaxed {
                let y0 = base.inputs[0].map(|x| 1.0 / (1.0 + (-x).exp()));
                let q0 = apply_primitive(&Primitive::QuantizeSte { bits: 3 }, &[&y0])?;
                let c = g.input(q0.zip_map(&y0, |a, b| a - b));
                g.apply(Primitive::Add, &[y, c])?
            } else {
                smg::quantize_ste(g, y, 3)?
            };
            contract(g, q, &base.consts[0])
        }),
    }
}

/// `Σ R ⊙ sparsify(sigmoid(x))`: top-k, 4-bit, straight-through.
fn sparsify_chain() -> GradCase {
    let prim = Primitive::SparsifyQuantize {
        alpha: 0.25,
        bits: 4,
        straight_through: true,
    };
    GradCase {
        name: "sparsify_ste_chain",
        sample: Box::new(|r| Point {
            params: ParamStore::new(),
            inputs: vec![randn(r, &[1, 6, 6])],
            consts: vec![randn(r, &[1, 6, 6])],
        }),
        build: Box::new(move |g, _, ids, base, relaxed| {
            let y = g.apply(Primitive::Sigmoid, &[ids[0]])?;
            let s = if relaxed {
                let y0 = base.inputs[0].map(|x| 1.0 / (1.0 + (-x).exp()));
                let s0 = apply_primitive(&prim, &[&y0])?;
                let c = g.input(s0.zip_map(&y0, |a, b| a - b));
                g.apply(Primitive::Add, &[y, c])?
            } else {
                g.apply(prim.clone(), &[y])?
            };
            contract(g, s, &base.consts[0])
        }),
    }
}

const C: usize = 3;
const HW: usize = 8;
const D: usize = 4;

fn iae_cfg(simple: bool) -> IaeConfig {
    IaeConfig {
        channels: C,
        latent_dim: D,
        simple,
    }
}

fn smg_cfg() -> SmgConfig {
    SmgConfig {
        channels: C,
        single_branch: false,
    }
}

fn msd_cfg() -> MsdConfig {
    MsdConfig {
        channels: C,
        height: HW,
        width: HW,
        stages: 3,
        latent_dim: D,
        guidance: MaskGuidance::AllStages,
    }
}

/// Randomizes every parameter, biases included, so no unit sits exactly at a
/// kink.
fn jitter(store: &mut ParamStore, rng: &mut impl Rng) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += 0.1 * n;
        }
    }
}

fn encode_case(name: &'static str, simple: bool) -> GradCase {
    GradCase {
        name,
        sample: Box::new(move |r| {
            let mut params = ParamStore::new();
            iae::init_params(&mut params, &iae_cfg(simple), r);
            jitter(&mut params, r);
            Point {
                params,
                inputs: vec![uniform(r, &[C, HW, HW], 0.0, 1.0)],
                consts: vec![randn(r, &[D]), randn(r, &[D])],
            }
        }),
        build: Box::new(move |g, store, ids, base, _| {
            let l = iae::encode(g, store, &iae_cfg(simple), ids[0])?;
            let a = contract(g, l.mu, &base.consts[0])?;
            let b = contract(g, l.sigma, &base.consts[1])?;
            g.apply(Primitive::Add, &[a, b])
        }),
    }
}

fn kl_case() -> GradCase {
    GradCase {
        name: "sample_and_kl",
        sample: Box::new(|r| Point {
            params: ParamStore::new(),
            inputs: vec![randn(r, &[D]), uniform(r, &[D], 0.3, 2.0)],
            consts: vec![randn(r, &[D]), randn(r, &[D])],
        }),
        build: Box::new(|g, _, ids, base, _| {
            let latent = iae::LatentNodes { mu: ids[0], sigma: ids[1] };
            let e = iae::sample(g, latent, base.consts[0].data())?;
            let a = contract(g, e, &base.consts[1])?;
            let kl = iae::kl_node(g, latent)?;
            g.apply(Primitive::Add, &[a, kl])
        }),
    }
}

fn mask_case() -> GradCase {
    GradCase {
        name: "generate_mask",
        sample: Box::new(|r| {
            let mut params = ParamStore::new();
            smg::init_params(&mut params, &smg_cfg(), r);
            jitter(&mut params, r);
            Point {
                params,
                inputs: vec![uniform(r, &[C, HW, HW], 0.0, 1.0)],
                consts: vec![randn(r, &[1, HW, HW])],
            }
        }),
        build: Box::new(|g, store, ids, base, _| {
            let m = smg::generate_mask(g, store, &smg_cfg(), ids[0])?;
            contract(g, m, &base.consts[0])
        }),
    }
}

fn decode_case() -> GradCase {
    GradCase {
        name: "msd_decode",
        sample: Box::new(|r| {
            let mut params = ParamStore::new();
            msd::init_params(&mut params, &msd_cfg(), r);
            jitter(&mut params, r);
            Point {
                params,
                inputs: vec![randn(r, &[D]), uniform(r, &[1, HW, HW], 0.0, 1.0)],
                consts: vec![randn(r, &[C, HW, HW])],
            }
        }),
        build: Box::new(|g, store, ids, base, _| {
            let f = msd::decode(g, store, &msd_cfg(), ids[0], ids[1])?;
            contract(g, f, &base.consts[0])
        }),
    }
}

fn labels() -> Vec<BoundingBox> {
    vec![
        BoundingBox::new(2.5, 3.0, 3.0, 2.0, 1.0).unwrap(),
        BoundingBox::new(6.0, 6.5, 2.0, 3.0, 1.0).unwrap(),
    ]
}

fn detection_case() -> GradCase {
    GradCase {
        name: "backbone_head_detection_loss",
        sample: Box::new(|r| {
            let mut params = ParamStore::new();
            detect::init_backbone(&mut params, C, r);
            detect::init_head(&mut params, C, r);
            jitter(&mut params, r);
            Point {
                params,
                inputs: vec![uniform(r, &[2, HW, HW], 0.0, 1.0)],
                consts: Vec::new(),
            }
        }),
        build: Box::new(|g, store, ids, _, _| {
            let z = detect::backbone(g, store, ids[0])?;
            let h = detect::head(g, store, z)?;
            detect::detection_loss(g, h, &detect::rasterize_targets(&labels(), HW, HW))
        }),
    }
}

/// Two agents through backbone, encoder, mask generator, straight-through
/// quantization, decoder, max fusion, head, and `L_detect + β Σ KL`. Every
/// position is kept at 8 bits: a zeroed cell meeting a zero ego activation in
/// the max is a tie that the relaxed surrogate always breaks.
fn pipeline_case() -> GradCase {
    let (alpha, bits, beta) = (1.0, 8, 0.01);
    GradCase {
        name: "infocom_total_loss",
        sample: Box::new(|r| {
            let mut params = ParamStore::new();
            detect::init_backbone(&mut params, C, r);
            detect::init_head(&mut params, C, r);
            iae::init_params(&mut params, &iae_cfg(false), r);
            smg::init_params(&mut params, &smg_cfg(), r);
            msd::init_params(&mut params, &msd_cfg(), r);
            jitter(&mut params, r);
            Point {
                params,
                inputs: Vec::new(),
                consts: vec![
                    uniform(r, &[2, HW, HW], 0.0, 1.0),
                    uniform(r, &[2, HW, HW], 0.0, 1.0),
                    randn(r, &[D]),
                ],
            }
        }),
        build: Box::new(move |g, store, _, base, relaxed| {
            let prim = Primitive::SparsifyQuantize {
                alpha,
                bits,
                straight_through: true,
            };
            // Straight-through offset of the sender's mask at the base point.
            let offset = if relaxed {
                let mut g0 = Graph::new();
                let o = g0.input(base.consts[1].clone());
                let z = detect::backbone(&mut g0, &base.params, o)?;
                let m = smg::generate_mask(&mut g0, &base.params, &smg_cfg(), z)?;
                let m0 = g0.value(m).clone();
                Some(apply_primitive(&prim, &[&m0])?.zip_map(&m0, |a, b| a - b))
            } else {
                None
            };
            let ego_obs = g.input(base.consts[0].clone());
            let other_obs = g.input(base.consts[1].clone());
            let ego = detect::backbone(g, store, ego_obs)?;
            let other = detect::backbone(g, store, other_obs)?;
            let latent = iae::encode(g, store, &iae_cfg(false), other)?;
            let e = iae::sample(g, latent, base.consts[2].data())?;
            let kl = iae::kl_node(g, latent)?;
            let m = smg::generate_mask(g, store, &smg_cfg(), other)?;
            let s = match offset {
                Some(c) => {
                    let c = g.input(c);
                    g.apply(Primitive::Add, &[m, c])?
                }
                None => g.apply(prim.clone(), &[m])?,
            };
            let rebuilt = msd::decode(g, store, &msd_cfg(), e, s)?;
            let fused = g.apply(Primitive::Maximum, &[ego, rebuilt])?;
            let h = detect::head(g, store, fused)?;
            let det = detect::detection_loss(g, h, &detect::rasterize_targets(&labels(), HW, HW))?;
            detect::total_loss(g, det, &[kl], beta)
        }),
    }
}

pub fn composite_cases() -> Vec<GradCase> {
    vec![
        encode_case("iae_encode", false),
        encode_case("iae_encode_naive", true),
        kl_case(),
        mask_case(),
        decode_case(),
        detection_case(),
        pipeline_case(),
    ]
}

pub fn all_cases() -> Vec<GradCase> {
    let mut v = primitive_cases();
    v.extend(composite_cases());
    v
}
