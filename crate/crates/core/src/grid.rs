//! Dense grids, multilinear interpolation and resampling.
//!
//! Voxel data is stored x-fastest, then y, then z. Multi-channel data is
//! planar: channel `c` occupies `data[c * n .. (c + 1) * n]` where `n` is the
//! voxel count. Displacements and velocities are in voxel units.
//!
//! Interpolation clamps coordinates to the domain (clamp-to-edge), so a
//! constant image stays exactly constant under any warp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Lattice extent, up to three axes. Unused trailing axes have size 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    n: [usize; 3],
    ndim: usize,
}

impl Dims {
    /// Builds an extent from 1 to 3 positive axis sizes.
    pub fn new(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.len() > 3 {
            return Err(Error::shape(format!(
                "expected 1 to 3 axes, got {}",
                sizes.len()
            )));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::shape(format!("zero-sized axis in {sizes:?}")));
        }
        let mut n = [1; 3];
        n[..sizes.len()].copy_from_slice(sizes);
        Ok(Dims {
            n,
            ndim: sizes.len(),
        })
    }

    /// Image extents: two or three axes.
    pub fn image(sizes: &[usize]) -> Result<Self> {
        if !(2..=3).contains(&sizes.len()) {
            return Err(Error::shape(format!(
                "images are 2D or 3D, got {} axes",
                sizes.len()
            )));
        }
        Self::new(sizes)
    }

    /// Zero-dimensional extent holding one value.
    pub fn scalar() -> Self {
        Dims {
            n: [1; 3],
            ndim: 0,
        }
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn sizes(&self) -> &[usize] {
        &self.n[..self.ndim]
    }

    pub fn size(&self, axis: usize) -> usize {
        self.n[axis]
    }

    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.n[0] * (c[1] + self.n[1] * c[2])
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.n[0];
        let r = i / self.n[0];
        [x, r % self.n[1], r / self.n[1]]
    }

    /// `ceil(n / 2)` along every axis.
    pub fn halved(&self) -> Self {
        let mut out = *self;
        for a in 0..self.ndim {
            out.n[a] = self.n[a].div_ceil(2);
        }
        out
    }

    pub fn doubled(&self) -> Self {
        let mut out = *self;
        for a in 0..self.ndim {
            out.n[a] = self.n[a] * 2;
        }
        out
    }

    /// True when the voxel touches the border along any active axis.
    pub fn is_border(&self, c: [usize; 3]) -> bool {
        (0..self.ndim).any(|a| c[a] == 0 || c[a] + 1 == self.n[a])
    }
}

/// Per-axis cell lookup: lower/upper corner, fractional weight, and whether
/// the coordinate lies inside the domain (derivative nonzero).
#[inline]
fn axis_cell(p: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let hi = (n - 1) as f64;
    if p < 0.0 {
        (0, 0, 0.0, false)
    } else if p >= hi {
        // right limit at the last voxel is the clamped (flat) branch
        (n - 1, n - 1, 0.0, false)
    } else {
        let f0 = p.floor();
        let i0 = f0 as usize;
        (i0, i0 + 1, p - f0, true)
    }
}

/// Corner offsets and weights of the multilinear stencil at one point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    /// d(weight)/d(p_axis) for each corner and axis.
    pub dw: [[f64; 8]; 3],
    pub f: [f64; 3],
    pub ndim: usize,
    pub count: usize,
}

impl Stencil {
    #[inline]
    pub(crate) fn new(dims: &Dims, p: [f64; 3]) -> Stencil {
        let nd = dims.ndim();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut f = [0.0f64; 3];
        let mut active = [false; 3];
        for a in 0..nd {
            let (l, h, fr, act) = axis_cell(p[a], dims.size(a));
            lo[a] = l;
            hi[a] = h;
            f[a] = fr;
            active[a] = act;
        }
        let count = 1usize << nd;
        let mut s = Stencil {
            idx: [0; 8],
            w: [0.0; 8],
            dw: [[0.0; 8]; 3],
            f,
            ndim: nd,
            count,
        };
        for corner in 0..count {
            let mut c = [0usize; 3];
            let mut w = 1.0;
            for a in 0..nd {
                let upper = corner >> a & 1 == 1;
                c[a] = if upper { hi[a] } else { lo[a] };
                w *= if upper { f[a] } else { 1.0 - f[a] };
            }
            s.idx[corner] = dims.index(c);
            s.w[corner] = w;
            for k in 0..nd {
                if !active[k] {
                    continue;
                }
                let mut d = if corner >> k & 1 == 1 { 1.0 } else { -1.0 };
                for a in 0..nd {
                    if a != k {
                        d *= if corner >> a & 1 == 1 { f[a] } else { 1.0 - f[a] };
                    }
                }
                s.dw[k][corner] = d;
            }
        }
        s
    }

    /// Nested per-axis lerps `a + f (b - a)`: exact on lattice points and
    /// on constant data.
    #[inline]
    pub(crate) fn apply(&self, channel: &[f64]) -> f64 {
        let mut v = [0.0; 8];
        for k in 0..self.count {
            v[k] = channel[self.idx[k]];
        }
        let mut m = self.count;
        for a in 0..self.ndim {
            m /= 2;
            for k in 0..m {
                let (lo, hi) = (v[2 * k], v[2 * k + 1]);
                v[k] = lo + self.f[a] * (hi - lo);
            }
        }
        v[0]
    }

    #[inline]
    pub(crate) fn apply_grad(&self, channel: &[f64], axis: usize) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.count {
            acc += self.dw[axis][k] * channel[self.idx[k]];
        }
        acc
    }
}

/// Samples every channel of planar `data` at arbitrary positions.
///
/// `position(i)` gives the sample point (voxel coordinates of the source) for
/// output voxel `i`; the output has `out_len` voxels per channel.
pub(crate) fn gather<P>(
    data: &[f64],
    channels: usize,
    dims: &Dims,
    out_len: usize,
    position: P,
) -> Vec<f64>
where
    P: Fn(usize) -> [f64; 3] + Sync + Send,
{
    let n = dims.len();
    let mut out = vec![0.0; channels * out_len];
    par::for_each_chunk(&mut out, 256, |chunk_idx, chunk| {
        let start = chunk_idx * 256;
        for (k, o) in chunk.iter_mut().enumerate() {
            let flat = start + k;
            let c = flat / out_len;
            let i = flat % out_len;
            let st = Stencil::new(dims, position(i));
            *o = st.apply(&data[c * n..(c + 1) * n]);
        }
    });
    out
}

/// Adjoint of [`gather`] with respect to the sampled data.
pub(crate) fn gather_adjoint<P>(
    grad_out: &[f64],
    channels: usize,
    dims: &Dims,
    out_len: usize,
    position: P,
) -> Vec<f64>
where
    P: Fn(usize) -> [f64; 3] + Sync + Send,
{
    let n = dims.len();
    let mut grad = vec![0.0; channels * n];
    // scatter is sequential within a channel to keep summation order fixed
    par::for_each_chunk(&mut grad, n, |c, g| {
        for i in 0..out_len {
            let go = grad_out[c * out_len + i];
            if go == 0.0 {
                continue;
            }
            let st = Stencil::new(dims, position(i));
            for k in 0..st.count {
                g[st.idx[k]] += st.w[k] * go;
            }
        }
    });
    grad
}

/// Gradient of `Σ grad_out · gather(data)` with respect to each sample
/// position, returned planar with `dims.ndim()` channels.
pub(crate) fn gather_position_grad<P>(
    data: &[f64],
    channels: usize,
    dims: &Dims,
    grad_out: &[f64],
    out_len: usize,
    position: P,
) -> Vec<f64>
where
    P: Fn(usize) -> [f64; 3] + Sync + Send,
{
    let n = dims.len();
    let nd = dims.ndim();
    let per_voxel: Vec<[f64; 3]> = par::map_indexed(out_len, |i| {
        let st = Stencil::new(dims, position(i));
        let mut g = [0.0; 3];
        for c in 0..channels {
            let go = grad_out[c * out_len + i];
            if go == 0.0 {
                continue;
            }
            let ch = &data[c * n..(c + 1) * n];
            for (a, ga) in g.iter_mut().enumerate().take(nd) {
                *ga += go * st.apply_grad(ch, a);
            }
        }
        g
    });
    let mut out = vec![0.0; nd * out_len];
    for (i, g) in per_voxel.iter().enumerate() {
        for a in 0..nd {
            out[a * out_len + i] = g[a];
        }
    }
    out
}

/// Sample position `x + u(x)` for warping.
#[inline]
pub(crate) fn displaced(dims: &Dims, disp: &[f64], i: usize) -> [f64; 3] {
    let n = dims.len();
    let c = dims.coords(i);
    let mut p = [0.0; 3];
    for a in 0..dims.ndim() {
        p[a] = c[a] as f64 + disp[a * n + i];
    }
    p
}

/// Align-corners coordinate map: output voxel `i` samples input coordinate
/// `i * (in - 1) / (out - 1)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ResampleMap {
    pub src: Dims,
    pub dst: Dims,
    scale: [f64; 3],
}

impl ResampleMap {
    pub(crate) fn new(src: Dims, dst: Dims) -> Self {
        let mut scale = [0.0; 3];
        for (a, s) in scale.iter_mut().enumerate().take(src.ndim()) {
            let (ni, no) = (src.size(a), dst.size(a));
            *s = if no > 1 {
                (ni - 1) as f64 / (no - 1) as f64
            } else {
                0.0
            };
        }
        ResampleMap { src, dst, scale }
    }

    #[inline]
    pub(crate) fn position(&self, i: usize) -> [f64; 3] {
        let c = self.dst.coords(i);
        let mut p = [0.0; 3];
        for a in 0..self.src.ndim() {
            p[a] = c[a] as f64 * self.scale[a];
        }
        p
    }
}

pub(crate) fn warp_data(data: &[f64], channels: usize, dims: &Dims, disp: &[f64]) -> Vec<f64> {
    gather(data, channels, dims, dims.len(), |i| displaced(dims, disp, i))
}

pub(crate) fn resample_data(data: &[f64], channels: usize, src: &Dims, dst: &Dims) -> Vec<f64> {
    let map = ResampleMap::new(*src, *dst);
    gather(data, channels, src, dst.len(), |i| map.position(i))
}

/// Common interface of real-valued grids.
pub trait Field: Sized {
    fn dims(&self) -> &Dims;
    fn spacing(&self) -> &[f64];
    fn channels(&self) -> usize;
    fn data(&self) -> &[f64];
    /// A grid of the same kind with new extent and values.
    fn rebuild(&self, dims: Dims, data: Vec<f64>) -> Self;
}

fn check_spacing(dims: &Dims, spacing: &[f64]) -> Result<()> {
    if spacing.len() != dims.ndim() {
        return Err(Error::shape(format!(
            "spacing has {} entries for {} axes",
            spacing.len(),
            dims.ndim()
        )));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("spacing must be positive: {spacing:?}")));
    }
    Ok(())
}

fn check_values(data: &[f64]) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("grid contains non-finite values".into()));
    }
    Ok(())
}

/// Single-channel intensity image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarGrid {
    #[serde(with = "dims_serde")]
    dims: Dims,
    spacing: Vec<f64>,
    data: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(dims: Dims, spacing: Vec<f64>, data: Vec<f64>) -> Result<Self> {
        check_spacing(&dims, &spacing)?;
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "scalar grid needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        check_values(&data)?;
        Ok(ScalarGrid {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: Dims, spacing: Vec<f64>, value: f64) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.len()])
    }

    pub fn from_fn(dims: Dims, spacing: Vec<f64>, f: impl Fn([usize; 3]) -> f64) -> Result<Self> {
        let data = (0..dims.len()).map(|i| f(dims.coords(i))).collect();
        Self::new(dims, spacing, data)
    }

    pub fn get(&self, c: [usize; 3]) -> f64 {
        self.data[self.dims.index(c)]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

impl Field for ScalarGrid {
    fn dims(&self) -> &Dims {
        &self.dims
    }
    fn spacing(&self) -> &[f64] {
        &self.spacing
    }
    fn channels(&self) -> usize {
        1
    }
    fn data(&self) -> &[f64] {
        &self.data
    }
    fn rebuild(&self, dims: Dims, data: Vec<f64>) -> Self {
        ScalarGrid {
            dims,
            spacing: self.spacing.clone(),
            data,
        }
    }
}

/// d-component vector field (velocity or displacement) in voxel units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorGrid {
    #[serde(with = "dims_serde")]
    dims: Dims,
    spacing: Vec<f64>,
    data: Vec<f64>,
}

impl VectorGrid {
    pub fn new(dims: Dims, spacing: Vec<f64>, data: Vec<f64>) -> Result<Self> {
        check_spacing(&dims, &spacing)?;
        if data.len() != dims.ndim() * dims.len() {
            return Err(Error::shape(format!(
                "vector grid needs {} values, got {}",
                dims.ndim() * dims.len(),
                data.len()
            )));
        }
        check_values(&data)?;
        Ok(VectorGrid {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Dims, spacing: Vec<f64>) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; dims.ndim() * dims.len()])
    }

    /// Field equal to `value` (one entry per axis) everywhere.
    pub fn constant(dims: Dims, spacing: Vec<f64>, value: &[f64]) -> Result<Self> {
        if value.len() != dims.ndim() {
            return Err(Error::shape("constant vector has wrong length"));
        }
        let n = dims.len();
        let data = (0..dims.ndim() * n).map(|k| value[k / n]).collect();
        Self::new(dims, spacing, data)
    }

    pub fn from_fn(
        dims: Dims,
        spacing: Vec<f64>,
        f: impl Fn([usize; 3]) -> [f64; 3],
    ) -> Result<Self> {
        let n = dims.len();
        let nd = dims.ndim();
        let mut data = vec![0.0; nd * n];
        for i in 0..n {
            let v = f(dims.coords(i));
            for a in 0..nd {
                data[a * n + i] = v[a];
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        let n = self.dims.len();
        &self.data[axis * n..(axis + 1) * n]
    }

    pub fn vector(&self, i: usize) -> [f64; 3] {
        let n = self.dims.len();
        let mut v = [0.0; 3];
        for (a, va) in v.iter_mut().enumerate().take(self.dims.ndim()) {
            *va = self.data[a * n + i];
        }
        v
    }

    pub fn norm_at(&self, i: usize) -> f64 {
        self.vector(i).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_norm(&self) -> f64 {
        (0..self.dims.len())
            .map(|i| self.norm_at(i))
            .fold(0.0, f64::max)
    }

    pub fn mean_norm(&self) -> f64 {
        let n = self.dims.len();
        (0..n).map(|i| self.norm_at(i)).sum::<f64>() / n as f64
    }

    pub fn scaled(&self, s: f64) -> VectorGrid {
        self.rebuild(self.dims, self.data.iter().map(|v| v * s).collect())
    }

    pub fn negated(&self) -> VectorGrid {
        self.rebuild(self.dims, self.data.iter().map(|v| -v).collect())
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Maximum pointwise Euclidean distance to another field.
    pub fn max_deviation(&self, other: &VectorGrid) -> f64 {
        let n = self.dims.len();
        let nd = self.dims.ndim();
        (0..n)
            .map(|i| {
                (0..nd)
                    .map(|a| (self.data[a * n + i] - other.data[a * n + i]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }
}

impl Field for VectorGrid {
    fn dims(&self) -> &Dims {
        &self.dims
    }
    fn spacing(&self) -> &[f64] {
        &self.spacing
    }
    fn channels(&self) -> usize {
        self.dims.ndim()
    }
    fn data(&self) -> &[f64] {
        &self.data
    }
    fn rebuild(&self, dims: Dims, data: Vec<f64>) -> Self {
        VectorGrid {
            dims,
            spacing: self.spacing.clone(),
            data,
        }
    }
}

/// Per-voxel region label in `0..region_count`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelGrid {
    #[serde(with = "dims_serde")]
    dims: Dims,
    spacing: Vec<f64>,
    data: Vec<u8>,
    region_count: usize,
}

impl LabelGrid {
    pub fn new(dims: Dims, spacing: Vec<f64>, data: Vec<u8>, region_count: usize) -> Result<Self> {
        check_spacing(&dims, &spacing)?;
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "label grid needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        if region_count == 0 || region_count > 256 {
            return Err(Error::Config(format!("invalid region count {region_count}")));
        }
        if let Some(&bad) = data.iter().find(|&&l| l as usize >= region_count) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                region_count,
            });
        }
        Ok(LabelGrid {
            dims,
            spacing,
            data,
            region_count,
        })
    }

    pub fn uniform(dims: Dims, spacing: Vec<f64>, label: u8, region_count: usize) -> Result<Self> {
        Self::new(dims, spacing, vec![label; dims.len()], region_count)
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    pub fn get(&self, c: [usize; 3]) -> u8 {
        self.data[self.dims.index(c)]
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.region_count];
        for &l in &self.data {
            h[l as usize] += 1;
        }
        h
    }

    /// Indicator of `label` as a real-valued image.
    pub fn mask(&self, label: u8) -> ScalarGrid {
        ScalarGrid {
            dims: self.dims,
            spacing: self.spacing.clone(),
            data: self
                .data
                .iter()
                .map(|&l| if l == label { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Planar one-hot encoding with `region_count` channels.
    pub fn one_hot(&self) -> Vec<f64> {
        let n = self.dims.len();
        let mut out = vec![0.0; self.region_count * n];
        for (i, &l) in self.data.iter().enumerate() {
            out[l as usize * n + i] = 1.0;
        }
        out
    }

    /// Nearest-neighbor warp: `out(x) = labels(round(x + u(x)))`, clamped.
    pub fn warp_nearest(&self, u: &VectorGrid) -> Result<LabelGrid> {
        if u.dims() != &self.dims {
            return Err(Error::shape("label grid and displacement differ in extent"));
        }
        let dims = self.dims;
        let data = par::map_indexed(dims.len(), |i| {
            let p = displaced(&dims, u.data(), i);
            let mut c = [0usize; 3];
            for a in 0..dims.ndim() {
                let hi = (dims.size(a) - 1) as f64;
                c[a] = p[a].round().clamp(0.0, hi) as usize;
            }
            self.data[dims.index(c)]
        });
        Ok(LabelGrid {
            dims,
            spacing: self.spacing.clone(),
            data,
            region_count: self.region_count,
        })
    }
}

mod dims_serde {
    use super::Dims;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Dims, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(d.sizes())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Dims, D::Error> {
        let v = Vec::<usize>::deserialize(d)?;
        Dims::new(&v).map_err(serde::de::Error::custom)
    }
}

/// Multilinear interpolation of every channel at `p` (voxel coordinates).
pub fn interpolate_linear<G: Field>(g: &G, p: &[f64]) -> Result<Vec<f64>> {
    let dims = g.dims();
    if p.len() != dims.ndim() {
        return Err(Error::shape(format!(
            "point has {} coordinates for a {}-D grid",
            p.len(),
            dims.ndim()
        )));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidPoint(p.to_vec()));
    }
    let mut q = [0.0; 3];
    q[..p.len()].copy_from_slice(p);
    let st = Stencil::new(dims, q);
    let n = dims.len();
    Ok((0..g.channels())
        .map(|c| st.apply(&g.data()[c * n..(c + 1) * n]))
        .collect())
}

/// `out(x) = img(x + u(x))`; vector images are warped componentwise.
pub fn warp<G: Field>(img: &G, u: &VectorGrid) -> Result<G> {
    if img.dims() != u.dims() {
        return Err(Error::shape(format!(
            "warp of {:?} by field on {:?}",
            img.dims().sizes(),
            u.dims().sizes()
        )));
    }
    let data = warp_data(img.data(), img.channels(), img.dims(), u.data());
    Ok(img.rebuild(*img.dims(), data))
}

/// Multilinear resampling onto `target` under the align-corners mapping.
/// Vector values are not rescaled.
pub fn resample_to<G: Field>(g: &G, target: Dims) -> Result<G> {
    let src = g.dims();
    if target.ndim() != src.ndim() {
        return Err(Error::shape("resample target has different dimensionality"));
    }
    let data = resample_data(g.data(), g.channels(), src, &target);
    Ok(g.rebuild(target, data))
}

fn require_resample_min(d: &Dims) -> Result<()> {
    if d.sizes().iter().any(|&s| s < 2) {
        return Err(Error::shape(format!(
            "resampling needs at least 2 voxels per axis, got {:?}",
            d.sizes()
        )));
    }
    Ok(())
}

/// Resamples to `ceil(dims / 2)`.
pub fn resample_half<G: Field>(g: &G) -> Result<G> {
    require_resample_min(g.dims())?;
    resample_to(g, g.dims().halved())
}

/// Resamples to `2 * dims`.
pub fn resample_double<G: Field>(g: &G) -> Result<G> {
    require_resample_min(g.dims())?;
    resample_to(g, g.dims().doubled())
}
