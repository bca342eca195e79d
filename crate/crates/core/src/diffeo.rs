//! Diffeomorphic machinery: displacement composition, scaling-and-squaring
//! exponentiation of stationary velocity fields, Jacobian analysis, and the
//! label-driven composition of regional fields into one discontinuous field.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{self, Field, LabelGrid, ScalarGrid, VectorGrid};

/// Default number of squaring steps.
pub const DEFAULT_STEPS: usize = 7;

/// Regional displacements and their label-driven composition.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationBundle {
    pub sub_fields: Vec<VectorGrid>,
    pub composed: VectorGrid,
}

impl DeformationBundle {
    /// Composes `sub_fields` through `labels`.
    pub fn compose(sub_fields: Vec<VectorGrid>, labels: &LabelGrid) -> Result<Self> {
        let composed = compose_regional_fields(&sub_fields, labels)?;
        Ok(DeformationBundle {
            sub_fields,
            composed,
        })
    }

    /// Bundle of a single smooth field, with no regional split.
    pub fn single(field: VectorGrid) -> Self {
        DeformationBundle {
            sub_fields: vec![field.clone()],
            composed: field,
        }
    }

    pub fn region_count(&self) -> usize {
        self.sub_fields.len()
    }
}

fn check_same(a: &VectorGrid, b: &VectorGrid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "fields on {:?} and {:?}",
            a.dims().sizes(),
            b.dims().sizes()
        )));
    }
    Ok(())
}

/// Displacement of `φ_outer ∘ φ_inner`: `u(x) = u_inner(x) + u_outer(x + u_inner(x))`.
pub fn compose_displacements(u_outer: &VectorGrid, u_inner: &VectorGrid) -> Result<VectorGrid> {
    check_same(u_outer, u_inner)?;
    let warped = grid::warp(u_outer, u_inner)?;
    let data = u_inner
        .data()
        .iter()
        .zip(warped.data())
        .map(|(a, b)| a + b)
        .collect();
    Ok(u_inner.rebuild(*u_inner.dims(), data))
}

/// True when some velocity component reaches a quarter of its axis length,
/// beyond which scaling and squaring is not reliably diffeomorphic.
pub fn exceeds_velocity_bound(v: &VectorGrid) -> bool {
    let dims = *v.dims();
    (0..dims.ndim()).any(|a| {
        let limit = dims.size(a) as f64 / 4.0;
        v.component(a).iter().any(|c| c.abs() >= limit)
    })
}

/// Displacement of `exp(v)` by scaling and squaring with `steps` squarings.
pub fn integrate_svf(v: &VectorGrid, steps: usize) -> Result<VectorGrid> {
    if steps == 0 {
        return Err(Error::Config("integration needs at least one step".into()));
    }
    if exceeds_velocity_bound(v) {
        log::warn!(
            "velocity magnitude {:.3} exceeds a quarter of the lattice; integration may fold",
            v.max_norm()
        );
    }
    let mut u = v.scaled(0.5f64.powi(steps as i32));
    for _ in 0..steps {
        u = compose_displacements(&u, &u)?;
    }
    Ok(u)
}

/// Recorded counterpart of [`integrate_svf`], bit-identical in value.
pub fn integrate_svf_tape(tape: &mut Tape, v: Var, steps: usize) -> Result<Var> {
    if steps == 0 {
        return Err(Error::Config("integration needs at least one step".into()));
    }
    let mut u = tape.scale(v, 0.5f64.powi(steps as i32));
    for _ in 0..steps {
        let w = tape.warp(u, u)?;
        u = tape.add(u, w)?;
    }
    Ok(u)
}

/// `det(I + ∇u)` per voxel, central differences inside and one-sided
/// differences on the border, in voxel units.
pub fn jacobian_determinant(u: &VectorGrid) -> Result<ScalarGrid> {
    let dims = *u.dims();
    let nd = dims.ndim();
    if dims.sizes().iter().any(|&s| s < 3) {
        return Err(Error::shape(format!(
            "jacobian needs at least 3 voxels per axis, got {:?}",
            dims.sizes()
        )));
    }
    let n = dims.len();
    let data = (0..n)
        .map(|i| {
            let c = dims.coords(i);
            let mut j = [[0.0f64; 3]; 3];
            for (l, _) in dims.sizes().iter().enumerate() {
                let size = dims.size(l);
                let (lo, hi, h) = if c[l] == 0 {
                    (c[l], c[l] + 1, 1.0)
                } else if c[l] + 1 == size {
                    (c[l] - 1, c[l], 1.0)
                } else {
                    (c[l] - 1, c[l] + 1, 2.0)
                };
                let (mut a, mut b) = (c, c);
                a[l] = lo;
                b[l] = hi;
                let (ia, ib) = (dims.index(a), dims.index(b));
                for (k, row) in j.iter_mut().enumerate().take(nd) {
                    let comp = u.component(k);
                    row[l] = (comp[ib] - comp[ia]) / h;
                }
            }
            for (k, row) in j.iter_mut().enumerate().take(nd) {
                row[k] += 1.0;
            }
            if nd == 2 {
                j[0][0] * j[1][1] - j[0][1] * j[1][0]
            } else {
                j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
            }
        })
        .collect();
    ScalarGrid::new(dims, u.spacing().to_vec(), data)
}

fn check_regional(sub_fields: &[VectorGrid], labels: &LabelGrid) -> Result<()> {
    let first = sub_fields
        .first()
        .ok_or(Error::EmptyInput("no regional fields"))?;
    for f in sub_fields {
        check_same(first, f)?;
    }
    if first.dims() != labels.dims() {
        return Err(Error::shape("labels and fields differ in extent"));
    }
    if let Some(&bad) = labels
        .data()
        .iter()
        .find(|&&l| l as usize >= sub_fields.len())
    {
        return Err(Error::LabelOutOfRange {
            label: bad,
            region_count: sub_fields.len(),
        });
    }
    Ok(())
}

/// Stitches regional displacements through disjoint, exhaustive masks:
/// `out(x) = sub_fields[labels(x)](x)`.
pub fn compose_regional_fields(sub_fields: &[VectorGrid], labels: &LabelGrid) -> Result<VectorGrid> {
    check_regional(sub_fields, labels)?;
    let first = &sub_fields[0];
    let n = first.dims().len();
    let nd = first.dims().ndim();
    let mut data = vec![0.0; nd * n];
    for a in 0..nd {
        for (i, &l) in labels.data().iter().enumerate() {
            data[a * n + i] = sub_fields[l as usize].data()[a * n + i];
        }
    }
    Ok(first.rebuild(*first.dims(), data))
}

/// Recorded counterpart of [`compose_regional_fields`].
pub fn compose_regional_tape(tape: &mut Tape, sub_fields: &[Var], labels: &LabelGrid) -> Result<Var> {
    if labels.data().iter().any(|&l| l as usize >= sub_fields.len()) {
        let bad = *labels
            .data()
            .iter()
            .find(|&&l| l as usize >= sub_fields.len())
            .unwrap();
        return Err(Error::LabelOutOfRange {
            label: bad,
            region_count: sub_fields.len(),
        });
    }
    let l: Arc<[u8]> = labels.data().into();
    tape.select_regions(sub_fields, l)
}

/// Neighbor-difference statistics of a displacement field split by whether
/// the neighbors carry the same label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterfaceJump {
    /// Largest `‖u_i − u_j‖` over neighbors with different labels.
    pub max_jump: f64,
    /// Mean of the same population.
    pub mean_jump: f64,
    /// Largest `‖u_i − u_j‖` over neighbors with equal labels.
    pub intra_region_max_diff: f64,
    /// No neighboring pair crosses a label boundary.
    pub cross_label_empty: bool,
}

pub fn interface_jump(u: &VectorGrid, labels: &LabelGrid) -> Result<InterfaceJump> {
    if u.dims() != labels.dims() {
        return Err(Error::shape("field and labels differ in extent"));
    }
    let dims = *u.dims();
    let nd = dims.ndim();
    let (mut max_jump, mut sum_jump, mut cross) = (0.0f64, 0.0f64, 0usize);
    let mut intra = 0.0f64;
    for i in 0..dims.len() {
        let c = dims.coords(i);
        for a in 0..nd {
            if c[a] + 1 >= dims.size(a) {
                continue;
            }
            let mut nb = c;
            nb[a] += 1;
            let j = dims.index(nb);
            let d = (0..nd)
                .map(|k| {
                    let comp = u.component(k);
                    (comp[i] - comp[j]).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            if labels.data()[i] != labels.data()[j] {
                max_jump = max_jump.max(d);
                sum_jump += d;
                cross += 1;
            } else {
                intra = intra.max(d);
            }
        }
    }
    Ok(InterfaceJump {
        max_jump,
        mean_jump: if cross > 0 { sum_jump / cross as f64 } else { 0.0 },
        intra_region_max_diff: intra,
        cross_label_empty: cross == 0,
    })
}
