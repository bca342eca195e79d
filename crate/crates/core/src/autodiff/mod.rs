//! Tape-based reverse-mode differentiation over grid operations.
//!
//! Every primitive is evaluated eagerly when recorded; the tape keeps the
//! forward values and replays the recorded operations backwards. Node ids
//! are assigned in recording order, so the tape is topologically sorted by
//! construction.
//!
//! ```
//! use ddir::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod conv;
mod tensor;

use std::sync::Arc;

pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::grid::{self, Dims, ResampleMap};
use crate::losses;

/// Negative slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    LeakyRelu(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: conv::ConvGeom,
    },
    Upsample2x(Var),
    Warp {
        img: Var,
        disp: Var,
    },
    Resample {
        src: Var,
        map: ResampleMap,
    },
    SelectRegions {
        fields: Vec<Var>,
        labels: Arc<[u8]>,
    },
    Concat(Vec<Var>),
    Ncc(Var, Var),
    SoftDice {
        pred: Var,
        target: Var,
        include: Arc<[bool]>,
    },
    Kl {
        mu: Var,
        log_var: Var,
        lambda_prior: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node that needs one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` if the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.channels(), *like.dims()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(Error::shape(format!("{what}: operand shapes differ")));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = va.with_data(data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let out = va.with_data(va.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::UnsupportedOp("log of a non-positive value".into()));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { LEAKY_SLOPE * x },
            Op::LeakyRelu(a),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Zero-padded 2D convolution with an odd square kernel.
    ///
    /// `weight` holds `cout * cin` channels on a `k x k` lattice; `bias`, if
    /// given, `cout` channels on the scalar lattice.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (vi, vw) = (self.value(input), self.value(weight));
        if vi.dims().ndim() != 2 {
            return Err(Error::UnsupportedOp(format!(
                "conv2d on {}-D input",
                vi.dims().ndim()
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::UnsupportedOp(format!("conv2d stride {stride}")));
        }
        let wd = vw.dims();
        let k = wd.size(0);
        if wd.ndim() != 2 || wd.size(1) != k || k % 2 == 0 {
            return Err(Error::shape("conv2d kernel must be square with odd size"));
        }
        let cin = vi.channels();
        if vw.channels() % cin != 0 {
            return Err(Error::shape("conv2d kernel channels not a multiple of input channels"));
        }
        let cout = vw.channels() / cin;
        if let Some(b) = bias {
            let vb = self.value(b);
            if vb.channels() != cout || vb.dims().len() != 1 {
                return Err(Error::shape("conv2d bias must hold one value per output channel"));
            }
        }
        let geom = conv::ConvGeom::new(cin, cout, k, stride, vi.dims());
        let data = conv::conv_forward(
            &geom,
            vi.data(),
            vw.data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(cout, Dims::new(&[geom.ow, geom.oh])?, data)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Nearest-neighbor x2 upsampling along every axis.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = conv::upsample_forward(v.data(), v.channels(), v.dims());
        let out = Tensor::new(v.channels(), v.dims().doubled(), data)
            .expect("upsampled length matches doubled lattice");
        let rg = self.rg(&[a]);
        self.push(out, Op::Upsample2x(a), rg)
    }

    /// `out(x) = img(x + disp(x))`, differentiable in both arguments.
    pub fn warp(&mut self, img: Var, disp: Var) -> Result<Var> {
        let (vi, vd) = (self.value(img), self.value(disp));
        if vi.dims() != vd.dims() || vd.channels() != vd.dims().ndim() {
            return Err(Error::shape("warp: image and displacement do not match"));
        }
        let data = grid::warp_data(vi.data(), vi.channels(), vi.dims(), vd.data());
        let out = vi.with_data(data);
        let rg = self.rg(&[img, disp]);
        Ok(self.push(out, Op::Warp { img, disp }, rg))
    }

    /// Multilinear resampling to `target` (align-corners mapping).
    pub fn resample(&mut self, src: Var, target: Dims) -> Result<Var> {
        let v = self.value(src);
        if target.ndim() != v.dims().ndim() {
            return Err(Error::shape("resample: dimensionality differs"));
        }
        let map = ResampleMap::new(*v.dims(), target);
        let data = grid::resample_data(v.data(), v.channels(), v.dims(), &target);
        let out = Tensor::new(v.channels(), target, data)?;
        let rg = self.rg(&[src]);
        Ok(self.push(out, Op::Resample { src, map }, rg))
    }

    /// Per-voxel hard selection `out(x) = fields[labels(x)](x)`.
    pub fn select_regions(&mut self, fields: &[Var], labels: Arc<[u8]>) -> Result<Var> {
        let first = *fields.first().ok_or(Error::EmptyInput("no fields to select from"))?;
        for &f in &fields[1..] {
            self.same_shape(first, f, "select_regions")?;
        }
        let proto = self.value(first);
        let n = proto.dims().len();
        if labels.len() != n {
            return Err(Error::shape("select_regions: labels do not cover the lattice"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= fields.len()) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                region_count: fields.len(),
            });
        }
        let ch = proto.channels();
        let mut data = vec![0.0; ch * n];
        for c in 0..ch {
            for i in 0..n {
                data[c * n + i] = self.value(fields[labels[i] as usize]).data()[c * n + i];
            }
        }
        let out = proto.with_data(data);
        let rg = self.rg(fields);
        Ok(self.push(
            out,
            Op::SelectRegions {
                fields: fields.to_vec(),
                labels,
            },
            rg,
        ))
    }

    /// Channel concatenation of tensors on the same lattice.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("nothing to concatenate"))?;
        let dims = *self.value(first).dims();
        let mut data = Vec::new();
        let mut ch = 0;
        for &p in parts {
            let v = self.value(p);
            if v.dims() != &dims {
                return Err(Error::shape("concat: lattices differ"));
            }
            ch += v.channels();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(ch, dims, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Global normalized cross-correlation loss `1 - r(x, y)`.
    pub fn ncc(&mut self, x: Var, y: Var) -> Result<Var> {
        self.same_shape(x, y, "ncc")?;
        let v = losses::ncc_forward(self.value(x).data(), self.value(y).data())?;
        let rg = self.rg(&[x, y]);
        Ok(self.push(Tensor::scalar(v), Op::Ncc(x, y), rg))
    }

    /// Soft Dice over the channels of `pred`/`target` flagged in `include`.
    pub fn soft_dice(&mut self, pred: Var, target: Var, include: Arc<[bool]>) -> Result<Var> {
        self.same_shape(pred, target, "soft_dice")?;
        let vp = self.value(pred);
        if vp.channels() != include.len() {
            return Err(Error::shape("soft_dice: class mask length differs from channels"));
        }
        let v = losses::dice_forward(vp.data(), self.value(target).data(), vp.dims().len(), &include)?;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(
            Tensor::scalar(v),
            Op::SoftDice {
                pred,
                target,
                include,
            },
            rg,
        ))
    }

    /// KL regularizer of a probabilistic velocity field.
    pub fn kl(&mut self, mu: Var, log_var: Var, lambda_prior: f64) -> Result<Var> {
        self.same_shape(mu, log_var, "kl")?;
        let (m, l) = (self.value(mu), self.value(log_var));
        let v = losses::kl_forward(m.data(), l.data(), m.channels(), m.dims(), lambda_prior)?;
        let rg = self.rg(&[mu, log_var]);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Kl {
                mu,
                log_var,
                lambda_prior,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.len()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(lv.with_data(vec![1.0]));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(self.value(v).with_data(g)),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, gd.iter().zip(vb).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, gd.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, gd.iter().map(|x| x * s).collect());
            }
            Op::Exp(a) => {
                let out = node.value.data();
                self.accumulate(grads, *a, gd.iter().zip(out).map(|(g, e)| g * e).collect());
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, gd.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::LeakyRelu(a) => {
                let x = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    gd.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { LEAKY_SLOPE * g })
                        .collect(),
                );
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, vec![gd[0]; self.value(*a).len()]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0] / n as f64; n]);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gi, gw, gb) =
                    conv::conv_backward(geom, self.value(*input).data(), self.value(*weight).data(), gd);
                self.accumulate(grads, *input, gi);
                self.accumulate(grads, *weight, gw);
                if let Some(b) = bias {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Upsample2x(a) => {
                let v = self.value(*a);
                self.accumulate(grads, *a, conv::upsample_backward(gd, v.channels(), v.dims()));
            }
            Op::Warp { img, disp } => {
                let (vi, vd) = (self.value(*img), self.value(*disp));
                let dims = *vi.dims();
                let n = dims.len();
                let ud = vd.data();
                let pos = |i| grid::displaced(&dims, ud, i);
                if self.nodes[img.0].requires_grad {
                    let gi = grid::gather_adjoint(gd, vi.channels(), &dims, n, pos);
                    self.accumulate(grads, *img, gi);
                }
                if self.nodes[disp.0].requires_grad {
                    let gu = grid::gather_position_grad(vi.data(), vi.channels(), &dims, gd, n, pos);
                    self.accumulate(grads, *disp, gu);
                }
            }
            Op::Resample { src, map } => {
                let v = self.value(*src);
                let gs = grid::gather_adjoint(gd, v.channels(), &map.src, map.dst.len(), |i| {
                    map.position(i)
                });
                self.accumulate(grads, *src, gs);
            }
            Op::SelectRegions { fields, labels } => {
                let n = labels.len();
                let ch = node.value.channels();
                for (r, f) in fields.iter().enumerate() {
                    if !self.nodes[f.0].requires_grad {
                        continue;
                    }
                    let mut gr = vec![0.0; ch * n];
                    for c in 0..ch {
                        for i in 0..n {
                            if labels[i] as usize == r {
                                gr[c * n + i] = gd[c * n + i];
                            }
                        }
                    }
                    self.accumulate(grads, *f, gr);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, gd[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::Ncc(x, y) => {
                let (gx, gy) = losses::ncc_backward(self.value(*x).data(), self.value(*y).data(), gd[0])?;
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *y, gy);
            }
            Op::SoftDice {
                pred,
                target,
                include,
            } => {
                let vp = self.value(*pred);
                let (gp, gq) = losses::dice_backward(
                    vp.data(),
                    self.value(*target).data(),
                    vp.dims().len(),
                    include,
                    gd[0],
                )?;
                self.accumulate(grads, *pred, gp);
                self.accumulate(grads, *target, gq);
            }
            Op::Kl {
                mu,
                log_var,
                lambda_prior,
            } => {
                let (m, l) = (self.value(*mu), self.value(*log_var));
                let (gm, gl) =
                    losses::kl_backward(m.data(), l.data(), m.channels(), m.dims(), *lambda_prior, gd[0])?;
                self.accumulate(grads, *mu, gm);
                self.accumulate(grads, *log_var, gl);
            }
        }
        Ok(())
    }
}

/// Compares the tape gradient of a scalar function of one tensor against
/// central differences. Returns the largest elementwise relative error,
/// using `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn finite_diff_check<F>(f: F, x0: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let y = f(&mut tape, x)?;
    let analytic = tape.backward(y)?.get_or_zeros(x, x0);

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(t);
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };
    let mut worst: f64 = 0.0;
    for k in 0..x0.len() {
        let mut plus = x0.clone();
        plus.data_mut()[k] += eps;
        let mut minus = x0.clone();
        minus.data_mut()[k] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[k];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Field, ScalarGrid, VectorGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(channels: usize, dims: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
        let d = Dims::new(dims).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * d.len()).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(channels, d, data).unwrap()
    }

    /// Displacement with every component at least 1e-3 away from an integer.
    fn offset_field(dims: &[usize], seed: u64) -> Tensor {
        let mut t = random(dims.len(), dims, -1.4, 1.4, seed);
        for v in t.data_mut() {
            let frac = *v - v.round();
            if frac.abs() < 0.01 {
                *v += 0.05;
            }
        }
        t
    }

    #[test]
    fn forward_values() {
        let mut tape = Tape::new();
        let a = tape.constant(random(2, &[3, 3], -1.0, 1.0, 1));
        let b = tape.constant(random(2, &[3, 3], -1.0, 1.0, 2));
        let s = tape.add(a, b).unwrap();
        for k in 0..18 {
            assert_eq!(
                tape.value(s).data()[k],
                tape.value(a).data()[k] + tape.value(b).data()[k]
            );
        }
        let c = tape.constant(Tensor::new(1, Dims::new(&[4, 4]).unwrap(), vec![2.5; 16]).unwrap());
        let m = tape.mean(c);
        assert_eq!(tape.value(m).item(), 2.5);
        let bad = tape.constant(random(1, &[3, 3], -1.0, 1.0, 3));
        assert!(matches!(tape.add(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn warp_forward_parity() {
        let d = Dims::new(&[6, 5]).unwrap();
        let img = ScalarGrid::from_fn(d, vec![1.0, 1.0], |c| (c[0] * c[1]) as f64 * 0.3).unwrap();
        let u = offset_field(&[6, 5], 9);
        let ug = u.to_vector_grid(vec![1.0, 1.0]).unwrap();
        let want = grid::warp(&img, &ug).unwrap();
        let mut tape = Tape::new();
        let vi = tape.constant(Tensor::from_field(&img));
        let vu = tape.leaf(u);
        let w = tape.warp(vi, vu).unwrap();
        assert_eq!(tape.value(w).data(), want.data());
        let field = VectorGrid::zeros(d, vec![1.0, 1.0]).unwrap();
        let rs = grid::resample_double(&field).unwrap();
        let vf = tape.constant(Tensor::from_field(&field));
        let r = tape.resample(vf, d.doubled()).unwrap();
        assert_eq!(tape.value(r).data(), rs.data());
    }

    #[test]
    fn mean_and_quadratic_gradients() {
        let x0 = random(1, &[4, 5], -1.0, 1.0, 4);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let m = tape.mean(x);
        let g = tape.backward(m).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0 / 20.0));

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        for (gv, xv) in g.get(x).unwrap().data().iter().zip(x0.data()) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(random(1, &[2, 2], 0.0, 1.0, 5));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(4))));
    }

    #[test]
    fn gradient_additivity() {
        let a0 = random(1, &[4, 4], 0.5, 1.5, 6);
        let build = |tape: &mut Tape, x: Var, which: u8| -> Var {
            let e = tape.exp(x);
            let l = tape.log(x).unwrap();
            match which {
                0 => tape.sum(e),
                1 => tape.mean(l),
                _ => {
                    let s1 = tape.sum(e);
                    let s2 = tape.mean(l);
                    tape.add(s1, s2).unwrap()
                }
            }
        };
        let grad = |which| {
            let mut tape = Tape::new();
            let x = tape.leaf(a0.clone());
            let y = build(&mut tape, x, which);
            tape.backward(y).unwrap().get(x).unwrap().clone()
        };
        let (g0, g1, g2) = (grad(0), grad(1), grad(2));
        for k in 0..16 {
            assert!((g0.data()[k] + g1.data()[k] - g2.data()[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn finite_difference_examples() {
        let x0 = random(1, &[4, 4], 0.5, 1.5, 7);
        let lin = finite_diff_check(
            |t, x| {
                let y = t.scale(x, 3.0);
                Ok(t.sum(y))
            },
            &x0,
            1e-4,
        )
        .unwrap();
        assert!(lin < 1e-10, "{lin}");
        let cube = finite_diff_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                let c = t.mul(sq, x)?;
                Ok(t.sum(c))
            },
            &x0,
            1e-4,
        )
        .unwrap();
        assert!(cube < 1e-6, "{cube}");
    }

    #[test]
    fn ncc_of_warp_gradient_wrt_displacement() {
        let d = Dims::new(&[8, 8]).unwrap();
        let moving = ScalarGrid::from_fn(d, vec![1.0, 1.0], |c| {
            ((c[0] as f64) * 0.7).sin() + ((c[1] as f64) * 0.45).cos() * 0.8
        })
        .unwrap();
        let fixed = ScalarGrid::from_fn(d, vec![1.0, 1.0], |c| {
            ((c[0] as f64 + 0.6) * 0.7).sin() + ((c[1] as f64 - 0.3) * 0.45).cos() * 0.8
        })
        .unwrap();
        let u0 = offset_field(&[8, 8], 11);
        let err = finite_diff_check(
            |t, u| {
                let m = t.constant(Tensor::from_field(&moving));
                let f = t.constant(Tensor::from_field(&fixed));
                let w = t.warp(m, u)?;
                t.ncc(w, f)
            },
            &u0,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conv_rejects_3d_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(random(1, &[4, 4, 4], 0.0, 1.0, 1));
        let w = tape.leaf(random(1, &[3, 3], 0.0, 1.0, 2));
        assert!(matches!(tape.conv2d(x, w, None, 1), Err(Error::UnsupportedOp(_))));
    }
}
