//! Differentiable operations and their backward rules.
//!
//! Layout conventions: volumes are `[B, D, H, W, C]` and patch tensors are
//! `[B, N_d, N_h, N_w, s_d, s_h, s_w, C]`, channel last in both.

use std::rc::Rc;

use rand::Rng as _;

use super::kernels::{self, Tap};
use super::tape::{Mode, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// The six mixing axes of the patch layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    GridD,
    GridH,
    GridW,
    PatchD,
    PatchH,
    PatchW,
}

impl Axis {
    pub const ALL: [Axis; 6] = [
        Axis::GridD,
        Axis::GridH,
        Axis::GridW,
        Axis::PatchD,
        Axis::PatchH,
        Axis::PatchW,
    ];

    /// Position of this axis in the 8-d patch layout.
    pub fn dim(self) -> usize {
        match self {
            Axis::GridD => 1,
            Axis::GridH => 2,
            Axis::GridW => 3,
            Axis::PatchD => 4,
            Axis::PatchH => 5,
            Axis::PatchW => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::GridD => "grid_d",
            Axis::GridH => "grid_h",
            Axis::GridW => "grid_w",
            Axis::PatchD => "patch_d",
            Axis::PatchH => "patch_h",
            Axis::PatchW => "patch_w",
        }
    }
}

/// `[outer, a, inner, f]` view of a channel-last tensor around one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisGeom {
    outer: usize,
    a: usize,
    inner: usize,
    f: usize,
}

impl AxisGeom {
    fn of(shape: &[usize], dim: usize) -> Result<Self> {
        let rank = shape.len();
        if rank < 3 || dim == 0 || dim + 1 >= rank {
            return Err(Error::dim(format!(
                "axis {dim} is not a mixing axis of shape {shape:?} (batch first, channel last)"
            )));
        }
        Ok(AxisGeom {
            outer: shape[..dim].iter().product(),
            a: shape[dim],
            inner: shape[dim + 1..rank - 1].iter().product(),
            f: shape[rank - 1],
        })
    }

    fn width(&self) -> usize {
        self.a * self.f
    }

    fn kernel(&self) -> kernels::Axial {
        kernels::Axial {
            outer: self.outer,
            a: self.a,
            inner: self.inner,
            f: self.f,
        }
    }
}

/// Geometry of a patchify permutation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PatchGeom {
    batch: usize,
    grid: [usize; 3],
    patch: [usize; 3],
    channels: usize,
}

impl PatchGeom {
    fn volume_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.grid[0] * self.patch[0],
            self.grid[1] * self.patch[1],
            self.grid[2] * self.patch[2],
            self.channels,
        ]
    }

    fn patch_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.grid[0],
            self.grid[1],
            self.grid[2],
            self.patch[0],
            self.patch[1],
            self.patch[2],
            self.channels,
        ]
    }

    /// Copies between volume and patch layouts; `to_patches` picks the direction.
    fn permute(&self, src: &[f64], to_patches: bool) -> Vec<f64> {
        let [nd, nh, nw] = self.grid;
        let [sd, sh, sw] = self.patch;
        let c = self.channels;
        let (h, w) = (nh * sh, nw * sw);
        let mut dst = vec![0.0; src.len()];
        let mut p = 0;
        for b in 0..self.batch {
            for gd in 0..nd {
                for gh in 0..nh {
                    for gw in 0..nw {
                        for id in 0..sd {
                            for ih in 0..sh {
                                let d = gd * sd + id;
                                let hh = gh * sh + ih;
                                let row = ((b * nd * sd + d) * h + hh) * w + gw * sw;
                                let v = row * c;
                                let len = sw * c;
                                if to_patches {
                                    dst[p..p + len].copy_from_slice(&src[v..v + len]);
                                } else {
                                    dst[v..v + len].copy_from_slice(&src[p..p + len]);
                                }
                                p += len;
                            }
                        }
                    }
                }
            }
        }
        dst
    }
}

pub(crate) enum Op {
    Leaf,
    Add,
    Mul {
        a: Rc<Tensor>,
        b: Rc<Tensor>,
    },
    Sum {
        len: usize,
    },
    Scale {
        factor: f64,
    },
    LinearAxis {
        geom: AxisGeom,
        x: Rc<Tensor>,
        weight: Rc<Tensor>,
    },
    LinearChannels {
        rows: usize,
        cin: usize,
        cout: usize,
        x: Rc<Tensor>,
        weight: Rc<Tensor>,
    },
    LeakyRelu {
        slope: f64,
        negative: Vec<bool>,
    },
    Sigmoid {
        out: Rc<Tensor>,
    },
    NormalizeGlobal {
        batch: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        weight: f64,
    },
    DropoutAxial {
        geom: AxisGeom,
        batch: usize,
        scale: Vec<f64>,
    },
    AxialMix {
        x: Rc<Tensor>,
        slope: f64,
        batch: usize,
        branches: Vec<MixSaved>,
    },
    Resize {
        batch: usize,
        channels: usize,
        src: [usize; 3],
        dst: [usize; 3],
    },
    Patchify {
        geom: PatchGeom,
    },
    Unpatchify {
        geom: PatchGeom,
    },
    SoftDice {
        pred: Rc<Tensor>,
        target: Rc<Tensor>,
        smooth: f64,
        batch: usize,
    },
}

/// What one branch of [`axial_mix`] keeps for its backward rule.
pub(crate) struct MixSaved {
    geom: AxisGeom,
    weight: Rc<Tensor>,
    scale: Option<Vec<f64>>,
    negative: Vec<bool>,
}

impl MixSaved {
    fn branch(&self, slope: f64, batch: usize) -> kernels::MixBranch<'_> {
        kernels::MixBranch {
            weight: self.weight.data(),
            bias: &[],
            scale: self.scale.as_deref(),
            slope,
            per_batch: self.geom.outer / batch,
        }
    }
}

type Grads = Vec<Option<Vec<f64>>>;

impl Op {
    /// Memory owned by this node for its backward rule. Shared `Rc` handles
    /// are counted in full, so this is an upper bound.
    pub(crate) fn saved_bytes(&self) -> usize {
        const F: usize = std::mem::size_of::<f64>();
        match self {
            Op::Leaf | Op::Add | Op::Sum { .. } | Op::Scale { .. } => 0,
            Op::Resize { .. } | Op::Patchify { .. } | Op::Unpatchify { .. } => 0,
            Op::Mul { a, b } => (a.len() + b.len()) * F,
            Op::LinearAxis { x, weight, .. } => (x.len() + weight.len()) * F,
            Op::LinearChannels { x, weight, .. } => (x.len() + weight.len()) * F,
            Op::LeakyRelu { negative, .. } => negative.len(),
            Op::Sigmoid { out } => out.len() * F,
            Op::NormalizeGlobal { xhat, inv_std, .. } => (xhat.len() + inv_std.len()) * F,
            Op::DropoutAxial { scale, .. } => scale.len() * F,
            Op::AxialMix { x, branches, .. } => {
                x.len() * F
                    + branches
                        .iter()
                        .map(|b| b.weight.len() * F + b.scale.as_ref().map_or(0, Vec::len) * F + b.negative.len())
                        .sum::<usize>()
            }
            Op::SoftDice { pred, target, .. } => (pred.len() + target.len()) * F,
        }
    }

    /// Gradients w.r.t. each input given the output gradient `g`.
    /// Inputs with `needs[i] == false` may be skipped.
    pub(crate) fn backward(&self, g: &[f64], needs: &[bool]) -> Grads {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add => needs.iter().map(|&n| n.then(|| g.to_vec())).collect(),
            Op::Mul { a, b } => vec![
                needs[0].then(|| g.iter().zip(b.data()).map(|(g, b)| g * b).collect()),
                needs[1].then(|| g.iter().zip(a.data()).map(|(g, a)| g * a).collect()),
            ],
            Op::Sum { len } => vec![Some(vec![g[0]; *len])],
            Op::Scale { factor } => vec![Some(g.iter().map(|v| v * factor).collect())],
            Op::LinearAxis { geom, x, weight } => {
                let width = geom.width();
                let mut dx = needs[0].then(|| vec![0.0; g.len()]);
                let mut dw = needs[1].then(|| vec![0.0; width * width]);
                let mut db = needs[2].then(|| vec![0.0; width]);
                geom.kernel().backward(
                    g,
                    x.data(),
                    weight.data(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                vec![dx, dw, db]
            }
            Op::LinearChannels {
                rows,
                cin,
                cout,
                x,
                weight,
            } => {
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; rows * cin];
                    kernels::matmul_dyw(*rows, *cout, *cin, g, weight.data(), &mut dx);
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![0.0; cout * cin];
                    kernels::accumulate_dyt_x(*rows, *cout, *cin, g, x.data(), &mut dw);
                    dw
                });
                let db = needs[2].then(|| {
                    let mut db = vec![0.0; *cout];
                    kernels::accumulate_col_sums(*rows, *cout, g, &mut db);
                    db
                });
                vec![dx, dw, db]
            }
            Op::LeakyRelu { slope, negative } => vec![Some(
                g.iter()
                    .zip(negative)
                    .map(|(&g, &neg)| if neg { g * slope } else { g })
                    .collect(),
            )],
            Op::Sigmoid { out } => vec![Some(
                g.iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect(),
            )],
            Op::NormalizeGlobal {
                batch,
                xhat,
                inv_std,
                weight,
            } => {
                let n = xhat.len() / batch;
                let nf = n as f64;
                let mut dx = needs[0].then(|| vec![0.0; xhat.len()]);
                let mut dw = 0.0;
                let mut db = 0.0;
                for b in 0..*batch {
                    let gs = &g[b * n..(b + 1) * n];
                    let xs = &xhat[b * n..(b + 1) * n];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for (&g, &x) in gs.iter().zip(xs) {
                        sum_g += g;
                        sum_gx += g * x;
                    }
                    dw += sum_gx;
                    db += sum_g;
                    if let Some(dx) = &mut dx {
                        // d/dx of w·(x−μ)/σ with σ² the biased variance
                        let k = weight * inv_std[b] / nf;
                        for ((d, &g), &x) in dx[b * n..(b + 1) * n].iter_mut().zip(gs).zip(xs) {
                            *d = k * (nf * g - sum_g - x * sum_gx);
                        }
                    }
                }
                vec![dx, needs[1].then(|| vec![dw]), needs[2].then(|| vec![db])]
            }
            Op::DropoutAxial { geom, batch, scale } => {
                let mut dx = g.to_vec();
                apply_axial_scale(&mut dx, geom, *batch, scale);
                vec![Some(dx)]
            }
            Op::AxialMix {
                x,
                slope,
                batch,
                branches,
            } => {
                let mut dx = needs[0].then(|| vec![0.0; x.len()]);
                let mut grads: Grads = vec![None; 1 + 2 * branches.len()];
                // last branch first, the order the unfused graph would accumulate in
                for (k, saved) in branches.iter().enumerate().rev() {
                    let width = saved.geom.width();
                    let mut dw = needs[1 + 2 * k].then(|| vec![0.0; width * width]);
                    let mut db = needs[2 + 2 * k].then(|| vec![0.0; width]);
                    let combine = if k + 1 == branches.len() {
                        kernels::Combine::Assign
                    } else {
                        kernels::Combine::Accumulate
                    };
                    saved.geom.kernel().mix_backward(
                        g,
                        &saved.negative,
                        x.data(),
                        &saved.branch(*slope, *batch),
                        dx.as_deref_mut().map(|d| (d, combine)),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    grads[1 + 2 * k] = dw;
                    grads[2 + 2 * k] = db;
                }
                grads[0] = dx;
                grads
            }
            Op::Resize {
                batch,
                channels,
                src,
                dst,
            } => vec![Some(resize_adjoint(g, *batch, *channels, *src, *dst))],
            Op::Patchify { geom } => vec![Some(geom.permute(g, false))],
            Op::Unpatchify { geom } => vec![Some(geom.permute(g, true))],
            Op::SoftDice {
                pred,
                target,
                smooth,
                batch,
            } => {
                let n = pred.len() / batch;
                let mut dp = vec![0.0; pred.len()];
                let scale = g[0] / *batch as f64;
                for b in 0..*batch {
                    let ps = &pred.data()[b * n..(b + 1) * n];
                    let ts = &target.data()[b * n..(b + 1) * n];
                    let (inter, total) = dice_sums(ps, ts);
                    let num = 2.0 * inter + smooth;
                    let den = total + smooth;
                    for (d, &t) in dp[b * n..(b + 1) * n].iter_mut().zip(ts) {
                        *d = -scale * (2.0 * t * den - num) / (den * den);
                    }
                }
                vec![Some(dp)]
            }
        }
    }
}

fn same_shape(a: &Var<'_>, b: &Var<'_>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Elementwise sum of two or more same-shape tensors.
pub fn add_n<'t>(xs: &[&Var<'t>]) -> Result<Var<'t>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::param("add_n needs at least one input"))?;
    let mut out = first.value().data().to_vec();
    for x in &xs[1..] {
        same_shape(first, x, "add")?;
        out.iter_mut().zip(x.data()).for_each(|(o, v)| *o += v);
    }
    let value = Tensor::new(first.shape().to_vec(), out)?;
    Ok(first.tape().record(Op::Add, xs, value))
}

pub fn add<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    add_n(&[a, b])
}

/// Elementwise product.
pub fn mul<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    same_shape(a, b, "mul")?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let value = Tensor::new(a.shape().to_vec(), out)?;
    let op = Op::Mul {
        a: a.value_rc(),
        b: b.value_rc(),
    };
    Ok(a.tape().record(op, &[a, b], value))
}

/// Sum of all elements, as a one-element tensor.
pub fn sum<'t>(x: &Var<'t>) -> Var<'t> {
    let total: f64 = x.data().iter().sum();
    x.tape()
        .record(Op::Sum { len: x.value().len() }, &[x], Tensor::scalar(total))
}

pub fn scale<'t>(x: &Var<'t>, factor: f64) -> Var<'t> {
    let out = x.data().iter().map(|v| v * factor).collect();
    let value = Tensor::new(x.shape().to_vec(), out).expect("shape preserved");
    x.tape().record(Op::Scale { factor }, &[x], value)
}

/// Fully connected layer over the flattened (axis `dim`, channel) pair.
///
/// For every fixed index of the remaining axes, the `a·f` slice `v` taken
/// along `dim` and the channel axis is mapped to `weight·v + bias`, where
/// `weight` is `(a·f)×(a·f)` indexed `[i·f + p, j·f + c]`.
pub fn linear_along_axis<'t>(
    x: &Var<'t>,
    dim: usize,
    weight: &Var<'t>,
    bias: &Var<'t>,
) -> Result<Var<'t>> {
    let geom = AxisGeom::of(x.shape(), dim)?;
    let width = geom.width();
    if weight.shape() != [width, width] {
        return Err(Error::dim(format!(
            "axial weight must be {width}×{width} for axis length {} and {} channels, got {:?}",
            geom.a,
            geom.f,
            weight.shape()
        )));
    }
    if bias.value().len() != width {
        return Err(Error::dim(format!(
            "axial bias must have {width} entries, got {:?}",
            bias.shape()
        )));
    }
    let mut y = vec![0.0; x.value().len()];
    geom.kernel().forward(x.data(), weight.data(), bias.data(), &mut y);
    let value = Tensor::new(x.shape().to_vec(), y)?;
    let op = Op::LinearAxis {
        geom,
        x: x.value_rc(),
        weight: weight.value_rc(),
    };
    Ok(x.tape().record(op, &[x, weight, bias], value))
}

/// Fully connected layer over the channel axis: `[.., cin] → [.., cout]`
/// with `weight` shaped `cout×cin`.
pub fn linear_channels<'t>(x: &Var<'t>, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
    let cin = *x.shape().last().expect("nonempty shape");
    let [cout, wcin] = weight.shape() else {
        return Err(Error::dim(format!(
            "channel weight must be 2-d, got {:?}",
            weight.shape()
        )));
    };
    let (cout, wcin) = (*cout, *wcin);
    if wcin != cin || bias.value().len() != cout {
        return Err(Error::dim(format!(
            "channel layer {cout}×{wcin} (+{} bias) does not fit input with {cin} channels",
            bias.value().len()
        )));
    }
    let rows = x.value().len() / cin;
    let mut out = vec![0.0; rows * cout];
    kernels::matmul_xwt(rows, cin, cout, x.data(), weight.data(), &mut out);
    for row in out.chunks_exact_mut(cout) {
        row.iter_mut().zip(bias.data()).for_each(|(y, b)| *y += b);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("nonempty shape") = cout;
    let value = Tensor::new(shape, out)?;
    let op = Op::LinearChannels {
        rows,
        cin,
        cout,
        x: x.value_rc(),
        weight: weight.value_rc(),
    };
    Ok(x.tape().record(op, &[x, weight, bias], value))
}

/// `max(x, slope·x)` elementwise; the subgradient at 0 is `slope`.
pub fn leaky_relu<'t>(x: &Var<'t>, slope: f64) -> Result<Var<'t>> {
    if !(slope >= 0.0) {
        return Err(Error::param(format!("leaky slope must be ≥ 0, got {slope}")));
    }
    let out: Vec<f64> = x.data().iter().map(|&v| if v <= 0.0 { slope * v } else { v }).collect();
    let value = Tensor::new(x.shape().to_vec(), out)?;
    if !x.requires_grad() {
        return Ok(x.tape().record(Op::Leaf, &[x], value));
    }
    let negative = x.data().iter().map(|&v| v <= 0.0).collect();
    Ok(x.tape().record(Op::LeakyRelu { slope, negative }, &[x], value))
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid<'t>(x: &Var<'t>) -> Var<'t> {
    let out = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let value = Tensor::new(x.shape().to_vec(), out).expect("shape preserved");
    x.tape().record_with(&[x], value, |out| Op::Sigmoid {
        out: Rc::clone(out),
    })
}

/// Standardizes each batch element over all its non-batch entries, then
/// applies one scalar weight and one scalar bias shared by all entries.
pub fn normalize_global<'t>(
    x: &Var<'t>,
    weight: &Var<'t>,
    bias: &Var<'t>,
    eps: f64,
) -> Result<Var<'t>> {
    if x.shape().len() < 2 {
        return Err(Error::dim("normalize_global needs a leading batch axis"));
    }
    if weight.value().len() != 1 || bias.value().len() != 1 {
        return Err(Error::dim("normalization weight and bias must be scalars"));
    }
    if !(eps > 0.0) {
        return Err(Error::param(format!("normalization eps must be > 0, got {eps}")));
    }
    let batch = x.shape()[0];
    let n = x.value().len() / batch;
    let (w, b) = (weight.data()[0], bias.data()[0]);
    let mut xhat = vec![0.0; x.value().len()];
    let mut inv_std = Vec::with_capacity(batch);
    for (xs, hs) in x.data().chunks_exact(n).zip(xhat.chunks_exact_mut(n)) {
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (h, &v) in hs.iter_mut().zip(xs) {
            *h = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    let out = xhat.iter().map(|h| w * h + b).collect();
    let value = Tensor::new(x.shape().to_vec(), out)?;
    let op = Op::NormalizeGlobal {
        batch,
        xhat,
        inv_std,
        weight: w,
    };
    Ok(x.tape().record(op, &[x, weight, bias], value))
}

fn apply_axial_scale(x: &mut [f64], geom: &AxisGeom, batch: usize, scale: &[f64]) {
    let per_batch = geom.outer / batch;
    let (a, inner, f) = (geom.a, geom.inner, geom.f);
    for (o, block) in x.chunks_exact_mut(a * inner * f).enumerate() {
        let b = o / per_batch;
        for i in 0..a {
            let s = &scale[(b * a + i) * f..(b * a + i + 1) * f];
            for row in block[i * inner * f..(i + 1) * inner * f].chunks_exact_mut(f) {
                row.iter_mut().zip(s).for_each(|(v, s)| *v *= s);
            }
        }
    }
}

/// Dropout that zeroes whole (axis index, channel) slices.
///
/// In train mode one keep/drop draw is made per batch element, per index
/// along `dim` and per channel; the decision is shared across every other
/// axis and kept entries are scaled by `1/(1−rate)`. Eval mode and
/// `rate == 0` are the identity.
pub fn dropout_axial<'t>(x: &Var<'t>, dim: usize, rate: f64, mode: Mode<'_>) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    let geom = AxisGeom::of(x.shape(), dim)?;
    let Mode::Train(rng) = mode else {
        return Ok(x.clone());
    };
    if rate == 0.0 {
        return Ok(x.clone());
    }
    let batch = x.shape()[0];
    let keep = 1.0 / (1.0 - rate);
    let scale: Vec<f64> = (0..batch * geom.a * geom.f)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mut out = x.data().to_vec();
    apply_axial_scale(&mut out, &geom, batch, &scale);
    let value = Tensor::new(x.shape().to_vec(), out)?;
    Ok(x.tape().record(Op::DropoutAxial { geom, batch, scale }, &[x], value))
}

/// Sum over branches of `leaky_relu(linear_along_axis(dropout_axial(x, dim)))`,
/// one branch per `(dim, weight, bias)`, recorded as a single node.
///
/// Gives the same values and gradients as composing the separate ops (and
/// draws dropout factors in the same order) while touching each activation
/// far fewer times and saving only `x` plus one sign mask per branch.
pub fn axial_mix<'t>(
    x: &Var<'t>,
    branches: &[(usize, &Var<'t>, &Var<'t>)],
    rate: f64,
    slope: f64,
    mut mode: Mode<'_>,
) -> Result<Var<'t>> {
    if branches.is_empty() {
        return Err(Error::param("axial_mix needs at least one branch"));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !(slope >= 0.0) {
        return Err(Error::param(format!("leaky slope must be ≥ 0, got {slope}")));
    }
    let batch = x.shape()[0];
    let mut geoms = Vec::with_capacity(branches.len());
    for &(dim, weight, bias) in branches {
        let geom = AxisGeom::of(x.shape(), dim)?;
        let width = geom.width();
        if weight.shape() != [width, width] || bias.value().len() != width {
            return Err(Error::dim(format!(
                "axis {dim} needs a {width}×{width} weight and {width} biases, got {:?} and {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        geoms.push(geom);
    }
    let track = x.requires_grad() || branches.iter().any(|(_, w, b)| w.requires_grad() || b.requires_grad());
    let mut out = vec![0.0; x.value().len()];
    let mut saved = Vec::with_capacity(branches.len());
    for (k, (&(_, weight, bias), geom)) in branches.iter().zip(&geoms).enumerate() {
        let scale = match mode.reborrow() {
            Mode::Train(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                Some(
                    (0..batch * geom.a * geom.f)
                        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                        .collect::<Vec<f64>>(),
                )
            }
            _ => None,
        };
        let mut negative = if track { vec![false; out.len()] } else { Vec::new() };
        let branch = kernels::MixBranch {
            weight: weight.data(),
            bias: bias.data(),
            scale: scale.as_deref(),
            slope,
            per_batch: geom.outer / batch,
        };
        let combine = if k == 0 {
            kernels::Combine::Assign
        } else {
            kernels::Combine::Accumulate
        };
        geom.kernel()
            .mix_forward(x.data(), &branch, &mut out, combine, track.then_some(&mut negative[..]));
        saved.push(MixSaved {
            geom: *geom,
            weight: weight.value_rc(),
            scale,
            negative,
        });
    }
    let value = Tensor::new(x.shape().to_vec(), out)?;
    let mut inputs: Vec<&Var<'t>> = vec![x];
    for (_, w, b) in branches {
        inputs.push(w);
        inputs.push(b);
    }
    let op = Op::AxialMix {
        x: x.value_rc(),
        slope,
        batch,
        branches: saved,
    };
    Ok(x.tape().record(op, &inputs, value))
}

fn volume_dims(shape: &[usize]) -> Result<(usize, [usize; 3], usize)> {
    match *shape {
        [b, d, h, w, c] => Ok((b, [d, h, w], c)),
        _ => Err(Error::dim(format!(
            "expected a [B, D, H, W, C] volume tensor, got {shape:?}"
        ))),
    }
}

/// Separable passes: D, then H, then W. Returns the resampled data.
fn resize_forward(x: &[f64], batch: usize, channels: usize, src: [usize; 3], dst: [usize; 3]) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut shape = src;
    for axis in 0..3 {
        if src[axis] == dst[axis] {
            continue;
        }
        let outer = batch * shape[..axis].iter().product::<usize>();
        let inner = shape[axis + 1..].iter().product::<usize>() * channels;
        let taps = kernels::linear_taps(src[axis], dst[axis]);
        cur = kernels::resample_axis(&cur, outer, src[axis], inner, &taps);
        shape[axis] = dst[axis];
    }
    cur
}

fn resize_adjoint(g: &[f64], batch: usize, channels: usize, src: [usize; 3], dst: [usize; 3]) -> Vec<f64> {
    let mut cur = g.to_vec();
    for axis in (0..3).rev() {
        if src[axis] == dst[axis] {
            continue;
        }
        // the forward pass on `axis` saw dst extents before it and src after it
        let outer = batch * dst[..axis].iter().product::<usize>();
        let inner = src[axis + 1..].iter().product::<usize>() * channels;
        let taps: Vec<Tap> = kernels::linear_taps(src[axis], dst[axis]);
        cur = kernels::resample_axis_adjoint(&cur, outer, src[axis], inner, &taps);
    }
    cur
}

/// Trilinear resampling of a `[B, D, H, W, C]` tensor on a corner-aligned grid.
pub fn trilinear_resize<'t>(x: &Var<'t>, target: [usize; 3]) -> Result<Var<'t>> {
    let (batch, src, channels) = volume_dims(x.shape())?;
    if target.contains(&0) {
        return Err(Error::param(format!("resize target must be positive, got {target:?}")));
    }
    if src == target {
        return Ok(x.clone());
    }
    let out = resize_forward(x.data(), batch, channels, src, target);
    let value = Tensor::new(vec![batch, target[0], target[1], target[2], channels], out)?;
    let op = Op::Resize {
        batch,
        channels,
        src,
        dst: target,
    };
    Ok(x.tape().record(op, &[x], value))
}

/// Plain (non-recording) trilinear resampling of a single-channel volume.
pub fn resize_volume(data: &[f64], src: [usize; 3], dst: [usize; 3]) -> Vec<f64> {
    resize_forward(data, 1, 1, src, dst)
}

/// `[B, D, H, W, C] → [B, N_d, N_h, N_w, s_d, s_h, s_w, C]`.
pub fn patchify<'t>(x: &Var<'t>, patch: [usize; 3]) -> Result<Var<'t>> {
    let (batch, spatial, channels) = volume_dims(x.shape())?;
    if patch.contains(&0) {
        return Err(Error::param(format!("patch sizes must be positive, got {patch:?}")));
    }
    let mut grid = [0; 3];
    for i in 0..3 {
        if spatial[i] % patch[i] != 0 {
            return Err(Error::dim(format!(
                "extent {} on axis {i} is not divisible by patch size {}",
                spatial[i], patch[i]
            )));
        }
        grid[i] = spatial[i] / patch[i];
    }
    let geom = PatchGeom {
        batch,
        grid,
        patch,
        channels,
    };
    let value = Tensor::new(geom.patch_shape(), geom.permute(x.data(), true))?;
    Ok(x.tape().record(Op::Patchify { geom }, &[x], value))
}

/// Inverse of [`patchify`].
pub fn unpatchify<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let geom = match *x.shape() {
        [batch, nd, nh, nw, sd, sh, sw, channels] => PatchGeom {
            batch,
            grid: [nd, nh, nw],
            patch: [sd, sh, sw],
            channels,
        },
        _ => {
            return Err(Error::dim(format!(
                "expected an 8-d patch tensor, got {:?}",
                x.shape()
            )))
        }
    };
    let value = Tensor::new(geom.volume_shape(), geom.permute(x.data(), false))?;
    Ok(x.tape().record(Op::Unpatchify { geom }, &[x], value))
}

fn dice_sums(p: &[f64], t: &[f64]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&p, &t) in p.iter().zip(t) {
        inter += p * t;
        total += p + t;
    }
    (inter, total)
}

/// Batch mean of `1 − (2Σpt + smooth)/(Σp + Σt + smooth)`, one term per
/// leading-axis element.
pub fn soft_dice_loss<'t>(pred: &Var<'t>, target: &Tensor, smooth: f64) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    if smooth < 0.0 {
        return Err(Error::param(format!("smooth must be ≥ 0, got {smooth}")));
    }
    let batch = pred.shape()[0];
    let n = pred.value().len() / batch;
    let mut loss = 0.0;
    for b in 0..batch {
        let (inter, total) = dice_sums(
            &pred.data()[b * n..(b + 1) * n],
            &target.data()[b * n..(b + 1) * n],
        );
        if total + smooth == 0.0 {
            return Err(Error::Undefined(format!(
                "soft Dice of empty prediction and empty target (batch element {b}) with smooth = 0"
            )));
        }
        loss += 1.0 - (2.0 * inter + smooth) / (total + smooth);
    }
    let op = Op::SoftDice {
        pred: pred.value_rc(),
        target: Rc::new(target.clone()),
        smooth,
        batch,
    };
    Ok(pred
        .tape()
        .record(op, &[pred], Tensor::scalar(loss / batch as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tape;
    use proptest::prelude::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0))
    }

    /// Central-difference gradient of a scalar function of several tensors.
    fn numeric_grad(
        f: &dyn Fn(&[Tensor]) -> f64,
        inputs: &[Tensor],
        which: usize,
        h: f64,
    ) -> Vec<f64> {
        let mut xs = inputs.to_vec();
        (0..inputs[which].len())
            .map(|i| {
                let orig = xs[which].data()[i];
                xs[which].data_mut()[i] = orig + h;
                let up = f(&xs);
                xs[which].data_mut()[i] = orig - h;
                let down = f(&xs);
                xs[which].data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    /// Checks every input's tape gradient of `sum(op(inputs) ⊙ probe)`.
    fn check_grads(
        op: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
        inputs: &[Tensor],
        tol: f64,
    ) {
        let out_shape = {
            let tape = Tape::new();
            let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
            op(&tape, &vars).shape().to_vec()
        };
        let probe = random(&out_shape, 99);
        let scalar = |xs: &[Tensor]| {
            let tape = Tape::new();
            let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = op(&tape, &vars);
            out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = op(&tape, &vars);
        let p = tape.constant(probe.clone());
        let loss = sum(&mul(&out, &p).unwrap());
        loss.backward().unwrap();
        for (i, v) in vars.iter().enumerate() {
            let tape_grad = tape.grad(v).expect("gradient reaches every input");
            let fd = numeric_grad(&scalar, inputs, i, 1e-5);
            let err = rel_err(tape_grad.data(), &fd);
            assert!(err < tol, "input {i}: relative error {err:e}");
        }
    }

    #[test]
    fn linear_identity_weight_is_identity_on_every_axis() {
        let x = random(&[2, 3, 2, 4, 2, 3, 2, 2], 1);
        for axis in Axis::ALL {
            let a = x.shape()[axis.dim()];
            let width = a * 2;
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let eye = Tensor::from_fn([width, width], |i| if i / width == i % width { 1.0 } else { 0.0 });
            let w = tape.constant(eye);
            let b = tape.constant(Tensor::zeros([width]));
            let y = linear_along_axis(&xv, axis.dim(), &w, &b).unwrap();
            assert_eq!(y.data(), x.data(), "axis {axis:?}");
        }
    }

    #[test]
    fn linear_swaps_a_two_element_slice() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 2, 1], vec![3.0, 5.0]).unwrap());
        let w = tape.constant(Tensor::new([2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::zeros([2]));
        let y = linear_along_axis(&x, 1, &w, &b).unwrap();
        assert_eq!(y.data(), &[5.0, 3.0]);
    }

    #[test]
    fn linear_mixes_axis_and_channel_jointly() {
        // x[0, i, n, c] over a=2, inner=2, f=2; weight acts on (i, c) pairs
        let x: Vec<f64> = (1..=8).map(f64::from).collect();
        let w: Vec<f64> = (0..16).map(|i| f64::from(i) * 0.1 - 0.7).collect();
        let bias = [0.1, -0.2, 0.3, 0.05];
        let tape = Tape::new();
        let xv = tape.constant(Tensor::new([1, 2, 2, 2], x.clone()).unwrap());
        let wv = tape.constant(Tensor::new([4, 4], w.clone()).unwrap());
        let bv = tape.constant(Tensor::new([4], bias.to_vec()).unwrap());
        let y = linear_along_axis(&xv, 1, &wv, &bv).unwrap();
        for i in 0..2 {
            for n in 0..2 {
                for p in 0..2 {
                    let mut want = bias[i * 2 + p];
                    for j in 0..2 {
                        for c in 0..2 {
                            want += w[(i * 2 + p) * 4 + j * 2 + c] * x[(j * 2 + n) * 2 + c];
                        }
                    }
                    let got = y.data()[(i * 2 + n) * 2 + p];
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_rejects_wrong_weight_size() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 3, 2, 2]));
        let w = tape.constant(Tensor::zeros([5, 5]));
        let b = tape.constant(Tensor::zeros([6]));
        assert!(matches!(linear_along_axis(&x, 1, &w, &b), Err(Error::Dimension(_))));
        assert!(matches!(linear_along_axis(&x, 3, &w, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        for dim in [1, 2, 3] {
            let a = [3, 2, 4][dim - 1];
            let inputs = [
                random(&[2, 3, 2, 4, 2], 10 + dim as u64),
                random(&[a * 2, a * 2], 20),
                random(&[a * 2], 30),
            ];
            check_grads(
                &|_, v| linear_along_axis(&v[0], dim, &v[1], &v[2]).unwrap(),
                &inputs,
                1e-6,
            );
        }
        let inputs = [random(&[2, 3, 2, 3], 1), random(&[4, 3], 2), random(&[4], 3)];
        check_grads(&|_, v| linear_channels(&v[0], &v[1], &v[2]).unwrap(), &inputs, 1e-6);
    }

    #[test]
    fn leaky_relu_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([3], vec![1.0, -1.0, 0.0]).unwrap());
        let y = leaky_relu(&x, 0.01).unwrap();
        assert_eq!(y.data(), &[1.0, -0.01, 0.0]);
        assert!(leaky_relu(&x, -0.1).is_err());
    }

    #[test]
    fn leaky_relu_subgradient_at_zero_is_slope() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::new([2], vec![0.0, 2.0]).unwrap());
        let y = sum(&leaky_relu(&x, 0.25).unwrap());
        y.backward().unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[0.25, 1.0]);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let x = Tensor::from_fn([2, 5, 3], |i| (i as f64 * 0.37).sin() + 0.05);
        check_grads(&|_, v| leaky_relu(&v[0], 0.01).unwrap(), &[x.clone()], 1e-6);
        check_grads(&|_, v| sigmoid(&v[0]), &[x.clone()], 1e-6);
        check_grads(&|_, v| scale(&v[0], -2.5), &[x.clone()], 1e-6);
        check_grads(&|_, v| mul(&v[0], &v[1]).unwrap(), &[x.clone(), random(&[2, 5, 3], 4)], 1e-6);
    }

    #[test]
    fn normalize_standardizes_each_sample() {
        let tape = Tape::new();
        let x = tape.constant(random(&[3, 4, 5, 2], 5));
        let w = tape.constant(Tensor::scalar(1.0));
        let b = tape.constant(Tensor::scalar(0.0));
        let eps = 1e-5;
        let y = normalize_global(&x, &w, &b, eps).unwrap();
        for s in y.data().chunks(40) {
            let mean = s.iter().sum::<f64>() / 40.0;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 40.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 10.0 * eps);
        }
    }

    #[test]
    fn normalize_constant_input_gives_bias() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full([2, 6], 4.2));
        let w = tape.constant(Tensor::scalar(1.0));
        let b = tape.constant(Tensor::scalar(0.0));
        let y = normalize_global(&x, &w, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_gradients_match_finite_differences() {
        let inputs = [random(&[2, 3, 4], 6), Tensor::scalar(1.3), Tensor::scalar(-0.4)];
        check_grads(
            &|_, v| normalize_global(&v[0], &v[1], &v[2], 1e-5).unwrap(),
            &inputs,
            1e-6,
        );
    }

    #[test]
    fn dropout_identity_cases() {
        let tape = Tape::new();
        let x = tape.constant(random(&[2, 3, 4, 2], 7));
        let mut r = rng::seeded(0);
        let y = dropout_axial(&x, 1, 0.0, Mode::Train(&mut r)).unwrap();
        assert_eq!(y.data(), x.data());
        let y = dropout_axial(&x, 2, 0.5, Mode::Eval).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(dropout_axial(&x, 1, 1.0, Mode::Eval).is_err());
    }

    #[test]
    fn dropout_is_shared_across_other_axes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full([2, 4, 3, 5, 2], 1.0));
        let mut r = rng::seeded(3);
        let y = dropout_axial(&x, 2, 0.5, Mode::Train(&mut r)).unwrap();
        let d = y.data();
        let idx = |b: usize, i: usize, j: usize, k: usize, c: usize| (((b * 4 + i) * 3 + j) * 5 + k) * 2 + c;
        for b in 0..2 {
            for j in 0..3 {
                for c in 0..2 {
                    let v = d[idx(b, 0, j, 0, c)];
                    assert!(v == 0.0 || v == 2.0);
                    for i in 0..4 {
                        for k in 0..5 {
                            assert_eq!(d[idx(b, i, j, k, c)], v);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dropout_is_unbiased_in_expectation() {
        let x = random(&[1, 3, 2, 2], 8);
        let mut r = rng::seeded(11);
        let mut acc = vec![0.0; x.len()];
        let draws = 10_000;
        for _ in 0..draws {
            let tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = dropout_axial(&xv, 1, 0.5, Mode::Train(&mut r)).unwrap();
            acc.iter_mut().zip(y.data()).for_each(|(a, v)| *a += v);
        }
        for (a, v) in acc.iter().zip(x.data()) {
            let mean = a / draws as f64;
            assert!((mean - v).abs() <= 0.05 * v.abs(), "{mean} vs {v}");
        }
    }

    /// Runs `axial_mix` and the composed ops on the same inputs and returns
    /// (fused value, composed value, fused grads, composed grads).
    fn mix_vs_composed(shape: &[usize], rate: f64, train: bool) -> [Vec<Vec<f64>>; 2] {
        let dims: Vec<usize> = (1..shape.len() - 1).collect();
        let f = shape[shape.len() - 1];
        let x = random(shape, 1);
        let params: Vec<(Tensor, Tensor)> = dims
            .iter()
            .map(|&d| {
                let w = shape[d] * f;
                (random(&[w, w], 10 + d as u64), random(&[w], 20 + d as u64))
            })
            .collect();
        let probe = random(shape, 3);
        let run = |fused: bool| {
            let tape = Tape::new();
            let xv = tape.param(&x);
            let pv: Vec<_> = params.iter().map(|(w, b)| (tape.param(w), tape.param(b))).collect();
            let mut r = rng::seeded(7);
            let mut mode = if train { Mode::Train(&mut r) } else { Mode::Eval };
            let out = if fused {
                let branches: Vec<_> = dims.iter().zip(&pv).map(|(&d, (w, b))| (d, w, b)).collect();
                axial_mix(&xv, &branches, rate, 0.1, mode.reborrow()).unwrap()
            } else {
                let parts: Vec<_> = dims
                    .iter()
                    .zip(&pv)
                    .map(|(&d, (w, b))| {
                        let dropped = dropout_axial(&xv, d, rate, mode.reborrow()).unwrap();
                        leaky_relu(&linear_along_axis(&dropped, d, w, b).unwrap(), 0.1).unwrap()
                    })
                    .collect();
                add_n(&parts.iter().collect::<Vec<_>>()).unwrap()
            };
            let loss = sum(&mul(&out, &tape.constant(probe.clone())).unwrap());
            tape.backward(&loss).unwrap();
            let mut all = vec![out.data().to_vec(), tape.grad(&xv).unwrap().into_data()];
            for (w, b) in &pv {
                all.push(tape.grad(w).unwrap().into_data());
                all.push(tape.grad(b).unwrap().into_data());
            }
            all
        };
        [run(true), run(false)]
    }

    #[test]
    fn axial_mix_matches_composed_ops() {
        for (shape, rate, train) in [
            (vec![2, 3, 4, 2, 3, 2], 0.3, true),
            (vec![2, 3, 4, 2, 3, 2], 0.3, false),
            (vec![1, 5, 1, 3, 4], 0.0, true),
            (vec![3, 2, 2, 2, 2, 2, 2, 3], 0.5, true),
        ] {
            let [fused, composed] = mix_vs_composed(&shape, rate, train);
            // forward, dx and the bias sums follow the same arithmetic exactly
            assert_eq!(fused[0], composed[0], "{shape:?} value");
            assert_eq!(fused[1], composed[1], "{shape:?} dx");
            for (k, (a, b)) in fused.iter().zip(&composed).enumerate().skip(2) {
                let err = rel_err(a, b);
                assert!(err < 1e-13, "{shape:?} grad {k}: {err:e}");
            }
        }
    }

    #[test]
    fn axial_mix_gradients_match_finite_differences() {
        let shape = [2, 3, 2, 4, 2];
        let inputs = vec![
            random(&shape, 1),
            random(&[6, 6], 2),
            random(&[6], 3),
            random(&[4, 4], 4),
            random(&[4], 5),
            random(&[8, 8], 6),
            random(&[8], 7),
        ];
        check_grads(
            &|_, v| {
                let mut r = rng::seeded(5);
                axial_mix(&v[0], &[(1, &v[1], &v[2]), (2, &v[3], &v[4]), (3, &v[5], &v[6])], 0.3, 0.05, Mode::Train(&mut r))
                    .unwrap()
            },
            &inputs,
            1e-6,
        );
    }

    #[test]
    fn axial_mix_rejects_bad_branches() {
        let tape = Tape::new();
        let x = tape.constant(random(&[1, 2, 3, 2], 0));
        let (w, b) = (tape.constant(random(&[4, 4], 1)), tape.constant(random(&[4], 2)));
        assert!(axial_mix(&x, &[], 0.0, 0.1, Mode::Eval).is_err());
        assert!(axial_mix(&x, &[(2, &w, &b)], 0.0, 0.1, Mode::Eval).is_err());
        assert!(axial_mix(&x, &[(1, &w, &b)], 1.0, 0.1, Mode::Eval).is_err());
        assert!(axial_mix(&x, &[(1, &w, &b)], 0.0, 0.1, Mode::Eval).is_ok());
    }

    #[test]
    fn dropout_gradient_matches_finite_differences() {
        // a fixed seed per evaluation gives the same mask every time
        check_grads(
            &|_, v| {
                let mut r = rng::seeded(5);
                dropout_axial(&v[0], 1, 0.3, Mode::Train(&mut r)).unwrap()
            },
            &[random(&[2, 4, 3, 2], 9)],
            1e-6,
        );
    }

    fn resize_plain(x: &Tensor, target: [usize; 3]) -> Tensor {
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        trilinear_resize(&v, target).unwrap().value().clone()
    }

    #[test]
    fn resize_same_shape_is_bit_identical() {
        let x = random(&[2, 4, 3, 5, 2], 12);
        assert_eq!(resize_plain(&x, [4, 3, 5]), x);
    }

    #[test]
    fn resize_keeps_constants() {
        let x = Tensor::full([1, 5, 4, 3, 1], 0.7);
        for target in [[2, 2, 2], [9, 7, 5], [1, 4, 6]] {
            let y = resize_plain(&x, target);
            assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    /// Direct trilinear formula at corner-aligned coordinates.
    fn trilinear_direct(f: &dyn Fn(usize, usize, usize) -> f64, src: [usize; 3], coord: [f64; 3]) -> f64 {
        let mut lo = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            lo[a] = (coord[a].floor() as usize).min(src[a] - 1);
            frac[a] = coord[a] - lo[a] as f64;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0; 3];
            for a in 0..3 {
                let hi = (corner >> a) & 1 == 1;
                idx[a] = if hi { (lo[a] + 1).min(src[a] - 1) } else { lo[a] };
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
            }
            acc += w * f(idx[0], idx[1], idx[2]);
        }
        acc
    }

    #[test]
    fn resize_matches_direct_trilinear_formula() {
        let ramp = |d: usize, h: usize, w: usize| 2.0 * d as f64 - 0.5 * h as f64 + 3.0 * w as f64 + 1.0;
        let src = [4, 4, 4];
        let x = Tensor::from_fn([1, 4, 4, 4, 1], |i| ramp(i / 16, (i / 4) % 4, i % 4));
        for target in [[2, 2, 2], [3, 5, 7]] {
            let y = resize_plain(&x, target);
            for d in 0..target[0] {
                for h in 0..target[1] {
                    for w in 0..target[2] {
                        let c = |i: usize, n: usize, s: usize| if n == 1 { 0.0 } else { i as f64 * (s - 1) as f64 / (n - 1) as f64 };
                        let coord = [c(d, target[0], 4), c(h, target[1], 4), c(w, target[2], 4)];
                        let want = trilinear_direct(&ramp, src, coord);
                        let got = y.data()[(d * target[1] + h) * target[2] + w];
                        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
                    }
                }
            }
        }
        // a 2×2×2 result samples exactly the eight corners
        let y = resize_plain(&x, [2, 2, 2]);
        assert_eq!(y.data()[7], ramp(3, 3, 3));
    }

    #[test]
    fn resize_gradient_matches_finite_differences() {
        for target in [[3, 2, 5], [6, 5, 2]] {
            check_grads(
                &|_, v| trilinear_resize(&v[0], target).unwrap(),
                &[random(&[2, 4, 3, 3, 2], 13)],
                1e-6,
            );
        }
    }

    #[test]
    fn patchify_grid_and_divisibility() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 96, 88, 72, 1]));
        let p = patchify(&x, [8, 8, 8]).unwrap();
        assert_eq!(p.shape(), &[1, 12, 11, 9, 8, 8, 8, 1]);
        let bad = tape.constant(Tensor::zeros([1, 100, 88, 72, 1]));
        assert!(matches!(patchify(&bad, [8, 8, 8]), Err(Error::Dimension(_))));
    }

    #[test]
    fn patchify_places_voxels_in_their_patch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([1, 4, 6, 2, 1], f64::from_usize_lossy));
        let p = patchify(&x, [2, 3, 1]).unwrap();
        // voxel (d=3, h=4, w=1) sits in grid (1, 1, 1) at offset (1, 1, 0)
        let src = (3 * 6 + 4) * 2 + 1;
        let dst = ((((1 * 2 + 1) * 2 + 1) * 2 + 1) * 3 + 1) * 1;
        assert_eq!(p.data()[dst], src as f64);
    }

    trait FromUsizeLossy {
        fn from_usize_lossy(i: usize) -> f64;
    }
    impl FromUsizeLossy for f64 {
        fn from_usize_lossy(i: usize) -> f64 {
            i as f64
        }
    }

    #[test]
    fn patch_permutations_have_matching_gradients() {
        check_grads(&|_, v| patchify(&v[0], [2, 1, 3]).unwrap(), &[random(&[2, 4, 2, 6, 2], 14)], 1e-6);
        check_grads(&|_, v| unpatchify(&v[0]).unwrap(), &[random(&[1, 2, 1, 2, 2, 3, 1, 2], 15)], 1e-6);
    }

    #[test]
    fn backward_basics() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::full([4], 3.0));
        let s = sum(&x);
        s.backward().unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[1.0; 4]);

        let tape = Tape::new();
        let x = tape.param(&Tensor::scalar(3.0));
        let sq = sum(&mul(&x, &x).unwrap());
        sq.backward().unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[6.0]);
        // repeated calls accumulate
        sq.backward().unwrap();
        assert_eq!(tape.grad(&x).unwrap().data(), &[12.0]);
        tape.zero_grad();
        assert!(tape.grad(&x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::zeros([2]));
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn soft_dice_limits() {
        let mask = Tensor::from_fn([1, 10], |i| if i < 4 { 1.0 } else { 0.0 });
        let other = Tensor::from_fn([1, 10], |i| if i >= 6 { 1.0 } else { 0.0 });
        let tape = Tape::new();
        let p = tape.constant(mask.clone());
        assert!(soft_dice_loss(&p, &mask, 0.0).unwrap().item().unwrap().abs() < 1e-15);
        assert!((soft_dice_loss(&p, &other, 0.0).unwrap().item().unwrap() - 1.0).abs() < 1e-15);
        let empty = tape.constant(Tensor::zeros([1, 10]));
        assert!(matches!(
            soft_dice_loss(&empty, &Tensor::zeros([1, 10]), 0.0),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn soft_dice_gradient_matches_finite_differences() {
        let target = Tensor::from_fn([2, 3, 4], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let pred = Tensor::from_fn([2, 3, 4], |i| 0.1 + 0.8 * ((i * 7 % 11) as f64) / 11.0);
        for smooth in [0.0, 1.0] {
            let t = target.clone();
            check_grads(
                &move |_, v| soft_dice_loss(&v[0], &t, smooth).unwrap(),
                &[pred.clone()],
                1e-6,
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn patchify_round_trip(
            b in 1usize..3, c in 1usize..3,
            g in proptest::array::uniform3(1usize..4),
            p in proptest::array::uniform3(1usize..4),
            seed in any::<u64>(),
        ) {
            let x = random(&[b, g[0] * p[0], g[1] * p[1], g[2] * p[2], c], seed);
            let tape = Tape::new();
            let v = tape.constant(x.clone());
            let back = unpatchify(&patchify(&v, p).unwrap()).unwrap();
            prop_assert_eq!(back.value(), &x);
        }

        #[test]
        fn resize_is_linear(
            src in proptest::array::uniform3(1usize..6),
            dst in proptest::array::uniform3(1usize..7),
            a in -3.0f64..3.0, bcoef in -3.0f64..3.0,
            seed in any::<u64>(),
        ) {
            let shape = [1, src[0], src[1], src[2], 2];
            let x = random(&shape, seed);
            let y = random(&shape, seed ^ 1);
            let combo = Tensor::new(shape.to_vec(), x.data().iter().zip(y.data()).map(|(u, v)| a * u + bcoef * v).collect()).unwrap();
            let lhs = resize_plain(&combo, dst);
            let rx = resize_plain(&x, dst);
            let ry = resize_plain(&y, dst);
            for ((l, u), v) in lhs.data().iter().zip(rx.data()).zip(ry.data()) {
                prop_assert!((l - (a * u + bcoef * v)).abs() < 1e-12);
            }
        }
    }
}
