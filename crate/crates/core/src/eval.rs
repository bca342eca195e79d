//! Overlap, surface distance, clinical-index and folding metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffeo::{interface_jump, jacobian_determinant, DeformationBundle, InterfaceJump};
use crate::error::{Error, Result};
use crate::grid::{Field, LabelGrid, ScalarGrid};
use crate::phantom::{LVM, REGION_NAMES};
use crate::registration::{ImagePair, RegistrationResult};

pub const MYOCARDIAL_DENSITY: f64 = 1.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiceScore {
    pub value: f64,
    /// Neither grid contains the label; `value` is 1 by convention.
    pub both_empty: bool,
}

fn same_dims(a: &LabelGrid, b: &LabelGrid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape("label grids differ in extent"));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)` over the voxels carrying `label`.
pub fn dice_score(a: &LabelGrid, b: &LabelGrid, label: u8) -> Result<DiceScore> {
    same_dims(a, b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += (x == label) as usize;
        nb += (y == label) as usize;
        both += (x == label && y == label) as usize;
    }
    if na + nb == 0 {
        return Ok(DiceScore {
            value: 1.0,
            both_empty: true,
        });
    }
    Ok(DiceScore {
        value: 2.0 * both as f64 / (na + nb) as f64,
        both_empty: false,
    })
}

/// Labeled voxels with a differently labeled face neighbor or on the border.
fn boundary_points(labels: &LabelGrid, inside: impl Fn(u8) -> bool) -> Vec<[usize; 3]> {
    let dims = *labels.dims();
    let data = labels.data();
    (0..dims.len())
        .filter(|&i| inside(data[i]))
        .filter_map(|i| {
            let c = dims.coords(i);
            if dims.is_border(c) {
                return Some(c);
            }
            for a in 0..dims.ndim() {
                for step in [-1isize, 1] {
                    let mut nb = c;
                    nb[a] = (c[a] as isize + step) as usize;
                    if !inside(data[dims.index(nb)]) {
                        return Some(c);
                    }
                }
            }
            None
        })
        .collect()
}

fn directed_distances(from: &[[usize; 3]], to: &[[usize; 3]], spacing: &[f64], nd: usize) -> Vec<f64> {
    crate::par::map_indexed(from.len(), |k| {
        let p = from[k];
        to.iter()
            .map(|q| {
                (0..nd)
                    .map(|a| ((p[a] as f64 - q[a] as f64) * spacing[a]).powi(2))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    })
}

/// Nearest-rank percentile of `v` (sorted in place).
fn percentile(v: &mut [f64], pct: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

fn hausdorff_sets(
    a: &LabelGrid,
    b: &LabelGrid,
    inside: impl Fn(u8) -> bool + Copy,
    spacing: &[f64],
    pct: f64,
    label: u8,
) -> Result<f64> {
    same_dims(a, b)?;
    let nd = a.dims().ndim();
    if spacing.len() != nd {
        return Err(Error::shape("spacing length differs from grid rank"));
    }
    let pa = boundary_points(a, inside);
    let pb = boundary_points(b, inside);
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::EmptyRegion(label));
    }
    let mut ab = directed_distances(&pa, &pb, spacing, nd);
    let mut ba = directed_distances(&pb, &pa, spacing, nd);
    Ok(percentile(&mut ab, pct).max(percentile(&mut ba, pct)))
}

/// Symmetric Hausdorff distance in mm between the boundaries of `label`.
pub fn hausdorff_mm(a: &LabelGrid, b: &LabelGrid, label: u8, spacing: &[f64]) -> Result<f64> {
    hausdorff_percentile_mm(a, b, label, spacing, 100.0)
}

/// As [`hausdorff_mm`], with the directed distances reduced at `pct`.
pub fn hausdorff_percentile_mm(a: &LabelGrid, b: &LabelGrid, label: u8, spacing: &[f64], pct: f64) -> Result<f64> {
    hausdorff_sets(a, b, |l| l == label, spacing, pct, label)
}

/// Voxel count of `label` times the voxel volume. A 2D grid is treated as a
/// slab 1 mm thick.
pub fn region_volume_ml(labels: &LabelGrid, label: u8, spacing: &[f64]) -> f64 {
    let voxel_mm3: f64 = spacing.iter().product();
    labels.count(label) as f64 * voxel_mm3 / 1000.0
}

pub fn lvm_mass_g(labels: &LabelGrid, spacing: &[f64], density: f64) -> f64 {
    region_volume_ml(labels, LVM, spacing) * density
}

/// Interior voxels whose Jacobian determinant is not positive.
pub fn folding_count(jac: &ScalarGrid) -> usize {
    let dims = *jac.dims();
    jac.data()
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v <= 0.0 && !dims.is_border(dims.coords(i)))
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub hd_percentile: f64,
    pub density: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            hd_percentile: 100.0,
            density: MYOCARDIAL_DENSITY,
        }
    }
}

/// Metrics of one segmentation against the fixed labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub dice: BTreeMap<String, f64>,
    /// Mean Dice over the foreground regions.
    pub avg_dice: f64,
    /// Per region plus `"foreground"`; null when a region is empty.
    pub hd_mm: BTreeMap<String, Option<f64>>,
    pub volumes_ml: BTreeMap<String, f64>,
    pub lvm_mass_g: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceIndices {
    pub volumes_ml: BTreeMap<String, f64>,
    pub lvm_mass_g: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldingReport {
    pub sub_fields: Vec<usize>,
    pub composed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub avg_dice: f64,
    pub dice: BTreeMap<String, f64>,
    pub hd_mm: BTreeMap<String, Option<f64>>,
}

/// Post-registration metrics at the top level; `pre` compares the moving
/// and fixed labels directly, `reference` holds the fixed-image indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dice: BTreeMap<String, f64>,
    pub avg_dice: f64,
    pub hd_mm: BTreeMap<String, Option<f64>>,
    pub volumes_ml: BTreeMap<String, f64>,
    pub lvm_mass_g: f64,
    pub folding: FoldingReport,
    pub interface_jump: InterfaceJump,
    pub pre: SegmentationMetrics,
    pub post: SegmentationMetrics,
    pub reference: ReferenceIndices,
    pub delta: MetricDelta,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(format!("report serialization: {e}")))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("report parse: {e}")))
    }
}

pub fn region_name(r: usize, regions: usize) -> String {
    if regions == REGION_NAMES.len() {
        REGION_NAMES[r].to_string()
    } else {
        format!("region_{r}")
    }
}

/// The last label is background unless there is only one region.
fn foreground_labels(regions: usize) -> Vec<u8> {
    if regions == 1 {
        vec![0]
    } else {
        (0..regions as u8 - 1).collect()
    }
}

fn segmentation_metrics(seg: &LabelGrid, fixed: &LabelGrid, opts: &EvalOptions) -> Result<SegmentationMetrics> {
    same_dims(seg, fixed)?;
    let regions = fixed.region_count();
    let sp = fixed.spacing();
    let fg = foreground_labels(regions);
    let mut dice = BTreeMap::new();
    let mut hd = BTreeMap::new();
    let mut volumes = BTreeMap::new();
    for r in 0..regions {
        let name = region_name(r, regions);
        let l = r as u8;
        dice.insert(name.clone(), dice_score(seg, fixed, l)?.value);
        let h = match hausdorff_percentile_mm(seg, fixed, l, sp, opts.hd_percentile) {
            Ok(v) => Some(v),
            Err(Error::EmptyRegion(_)) => None,
            Err(e) => return Err(e),
        };
        hd.insert(name.clone(), h);
        volumes.insert(name, region_volume_ml(seg, l, sp));
    }
    let background = if regions > 1 { Some(regions as u8 - 1) } else { None };
    let whole = match hausdorff_sets(seg, fixed, |l| Some(l) != background, sp, opts.hd_percentile, 0) {
        Ok(v) => Some(v),
        Err(Error::EmptyRegion(_)) => None,
        Err(e) => return Err(e),
    };
    hd.insert("foreground".into(), whole);
    let avg_dice = fg.iter().map(|&l| dice[&region_name(l as usize, regions)]).sum::<f64>() / fg.len() as f64;
    let mass = if regions > LVM as usize {
        lvm_mass_g(seg, sp, opts.density)
    } else {
        0.0
    };
    Ok(SegmentationMetrics {
        dice,
        avg_dice,
        hd_mm: hd,
        volumes_ml: volumes,
        lvm_mass_g: mass,
    })
}

/// Full report for a deformation bundle whose composed field maps the fixed
/// lattice into the moving image. Warped labels are recomputed from the
/// moving labels by nearest-neighbor lookup.
pub fn evaluate_bundle(bundle: &DeformationBundle, pair: &ImagePair, opts: &EvalOptions) -> Result<EvalReport> {
    let warped = pair.labels_moving.warp_nearest(&bundle.composed)?;
    let pre = segmentation_metrics(&pair.labels_moving, &pair.labels_fixed, opts)?;
    let post = segmentation_metrics(&warped, &pair.labels_fixed, opts)?;
    let fixed_ref = segmentation_metrics(&pair.labels_fixed, &pair.labels_fixed, opts)?;

    let has_jac = bundle.composed.dims().sizes().iter().all(|&s| s >= 3);
    let count = |u| -> Result<usize> {
        if has_jac {
            Ok(folding_count(&jacobian_determinant(u)?))
        } else {
            Ok(0)
        }
    };
    let folding = FoldingReport {
        sub_fields: bundle.sub_fields.iter().map(count).collect::<Result<_>>()?,
        composed: count(&bundle.composed)?,
    };
    let jump = interface_jump(&bundle.composed, &pair.labels_fixed)?;

    let delta = MetricDelta {
        avg_dice: post.avg_dice - pre.avg_dice,
        dice: post.dice.iter().map(|(k, v)| (k.clone(), v - pre.dice[k])).collect(),
        hd_mm: post
            .hd_mm
            .iter()
            .map(|(k, v)| (k.clone(), v.zip(pre.hd_mm[k]).map(|(a, b)| a - b)))
            .collect(),
    };
    Ok(EvalReport {
        dice: post.dice.clone(),
        avg_dice: post.avg_dice,
        hd_mm: post.hd_mm.clone(),
        volumes_ml: post.volumes_ml.clone(),
        lvm_mass_g: post.lvm_mass_g,
        folding,
        interface_jump: jump,
        pre,
        post,
        reference: ReferenceIndices {
            volumes_ml: fixed_ref.volumes_ml,
            lvm_mass_g: fixed_ref.lvm_mass_g,
        },
        delta,
    })
}

pub fn evaluate_registration(result: &RegistrationResult, pair: &ImagePair, opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_bundle(&result.bundle, pair, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Dims, VectorGrid};

    fn line(labels: &[u8], regions: usize) -> LabelGrid {
        let d = Dims::new(&[labels.len()]).unwrap();
        LabelGrid::new(d, vec![1.5], labels.to_vec(), regions).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = line(&[1, 1, 0, 0], 2);
        assert_eq!(dice_score(&a, &a, 1).unwrap().value, 1.0);
        let b = line(&[0, 0, 1, 1], 2);
        assert_eq!(dice_score(&a, &b, 1).unwrap().value, 0.0);
        let c = line(&[0, 1, 1, 0], 2);
        assert_eq!(dice_score(&a, &c, 1).unwrap().value, 0.5);
        let e = line(&[0, 0, 0, 0], 2);
        let s = dice_score(&e, &e, 1).unwrap();
        assert!(s.both_empty && s.value == 1.0);
        assert_eq!(dice_score(&e, &a, 1).unwrap().value, 0.0);
    }

    #[test]
    fn hausdorff_examples() {
        let d = Dims::new(&[8, 3]).unwrap();
        let mut da = vec![0u8; 24];
        let mut db = vec![0u8; 24];
        da[d.index([1, 1, 0])] = 1;
        db[d.index([4, 1, 0])] = 1;
        let a = LabelGrid::new(d, vec![1.5, 1.5], da, 2).unwrap();
        let b = LabelGrid::new(d, vec![1.5, 1.5], db, 2).unwrap();
        assert!((hausdorff_mm(&a, &b, 1, &[1.5, 1.5]).unwrap() - 4.5).abs() < 1e-12);
        assert_eq!(hausdorff_mm(&a, &b, 1, &[1.5, 1.5]).unwrap(), hausdorff_mm(&b, &a, 1, &[1.5, 1.5]).unwrap());
        assert_eq!(hausdorff_mm(&a, &a, 1, &[1.5, 1.5]).unwrap(), 0.0);
        let none = LabelGrid::uniform(d, vec![1.5, 1.5], 0, 2).unwrap();
        assert!(matches!(hausdorff_mm(&a, &none, 1, &[1.5, 1.5]), Err(Error::EmptyRegion(1))));
    }

    #[test]
    fn volume_and_mass() {
        let sp = [1.5, 1.5, 3.15];
        let d = Dims::new(&[10, 10, 10]).unwrap();
        let all = LabelGrid::uniform(d, sp.to_vec(), 1, 4).unwrap();
        assert!((region_volume_ml(&all, 1, &sp) - 7.0875).abs() < 1e-12);
        assert_eq!(region_volume_ml(&all, 0, &sp), 0.0);
        assert_eq!(lvm_mass_g(&LabelGrid::uniform(d, sp.to_vec(), 3, 4).unwrap(), &sp, 1.05), 0.0);
        // 10 ml of myocardium: 10000 voxels of 1 mm³
        let d = Dims::new(&[100, 100]).unwrap();
        let lvm = LabelGrid::uniform(d, vec![1.0, 1.0], 1, 4).unwrap();
        assert!((lvm_mass_g(&lvm, &[1.0, 1.0], 1.05) - 10.5).abs() < 1e-12);
        assert!((lvm_mass_g(&lvm, &[1.0, 1.0], 2.1) - 21.0).abs() < 1e-12);
    }

    #[test]
    fn folding_examples() {
        let d = Dims::new(&[6, 6]).unwrap();
        let id = VectorGrid::zeros(d, vec![1.0, 1.0]).unwrap();
        assert_eq!(folding_count(&jacobian_determinant(&id).unwrap()), 0);
        let fold = VectorGrid::from_fn(d, vec![1.0, 1.0], |c| [-1.5 * c[0] as f64, -1.5 * c[1] as f64, 0.0]).unwrap();
        let j = jacobian_determinant(&fold).unwrap();
        // det = (-0.5)^2 > 0 in 2D: no folds; the 3D case flips sign
        assert_eq!(folding_count(&j), 0);
        let d3 = Dims::new(&[5, 5, 5]).unwrap();
        let fold3 = VectorGrid::from_fn(d3, vec![1.0; 3], |c| {
            [-1.5 * c[0] as f64, -1.5 * c[1] as f64, -1.5 * c[2] as f64]
        })
        .unwrap();
        assert_eq!(folding_count(&jacobian_determinant(&fold3).unwrap()), 27);
        let mut more = jacobian_determinant(&id).unwrap();
        let before = folding_count(&more);
        more.data_mut()[d.index([2, 2, 0])] = -1.0;
        assert!(folding_count(&more) > before);
    }

    #[test]
    fn identity_report_round_trips() {
        let p = crate::phantom::generate_phantom(&crate::phantom::PhantomConfig {
            amplitude: 0.0,
            contraction: 0.0,
            ..Default::default()
        })
        .unwrap();
        let pair = p.image_pair();
        let d = pair.dims();
        let zero = VectorGrid::zeros(d, pair.spacing().to_vec()).unwrap();
        let bundle = DeformationBundle::single(zero);
        let rep = evaluate_bundle(&bundle, &pair, &EvalOptions::default()).unwrap();
        assert_eq!(rep.pre, rep.post);
        assert!(rep.dice.values().all(|&v| v == 1.0));
        assert_eq!(rep.hd_mm["foreground"], Some(0.0));
        assert_eq!(rep.volumes_ml, rep.reference.volumes_ml);
        let back = EvalReport::from_json(&rep.to_json().unwrap()).unwrap();
        assert_eq!(back, rep);
    }
}
