//! Kernel timings on the default rayon pool versus a single worker.
//!
//! Build with `--no-default-features` for the purely sequential code path;
//! both arms then measure the same thing.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ddir::autodiff::{Tape, Tensor};
use ddir::diffeo::{integrate_svf, jacobian_determinant};
use ddir::grid::{warp, Dims, ScalarGrid, VectorGrid};
use ddir::par;
use ddir::phantom::{generate_phantom, PhantomConfig};
use ddir::registration::{register_direct, RegistrationConfig};

fn velocity(d: Dims) -> VectorGrid {
    VectorGrid::from_fn(d, vec![1.0; d.ndim()], |c| {
        let (x, y, z) = (c[0] as f64 * 0.2, c[1] as f64 * 0.15, c[2] as f64 * 0.3);
        [x.sin() * 0.8, (y + z).cos() * 0.6, (x - y).sin() * 0.4]
    })
    .unwrap()
}

fn kernels(c: &mut Criterion) {
    let d3 = Dims::new(&[64, 64, 16]).unwrap();
    let v3 = velocity(d3);
    let img = ScalarGrid::from_fn(d3, vec![1.0; 3], |c| ((c[0] * 7 + c[1] * 3 + c[2]) % 11) as f64).unwrap();
    let u3 = integrate_svf(&v3, 7).unwrap();

    let d2 = Dims::new(&[64, 64]).unwrap();
    let feats = Tensor::new(8, d2, (0..8 * d2.len()).map(|i| ((i * 37) % 101) as f64 / 101.0).collect()).unwrap();
    let wdims = Dims::new(&[3, 3]).unwrap();
    let weight = Tensor::new(64, wdims, (0..64 * 9).map(|i| ((i * 13) % 29) as f64 / 29.0 - 0.5).collect()).unwrap();

    let pair = generate_phantom(&PhantomConfig::scaled_2d(32)).unwrap().image_pair();
    let reg_cfg = RegistrationConfig { iterations: 20, ..Default::default() };

    let arms: [(&str, Option<usize>); 2] = [("rayon", None), ("sequential", Some(1))];
    let run = |threads: Option<usize>, f: &mut (dyn FnMut() + Send)| match threads {
        Some(t) => par::with_threads(t, f),
        None => f(),
    };

    let mut g = c.benchmark_group("integrate_svf_64x64x16");
    for (name, threads) in arms {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(threads, &mut || {
                black_box(integrate_svf(&v3, 7).unwrap());
            }))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("warp_64x64x16");
    for (name, threads) in arms {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(threads, &mut || {
                black_box(warp(&img, &u3).unwrap());
            }))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("jacobian_64x64x16");
    for (name, threads) in arms {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(threads, &mut || {
                black_box(jacobian_determinant(&u3).unwrap());
            }))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("conv2d_8to8_64x64_fwd_bwd");
    for (name, threads) in arms {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(threads, &mut || {
                let mut t = Tape::new();
                let x = t.leaf(feats.clone());
                let w = t.leaf(weight.clone());
                let y = t.conv2d(x, w, None, 1).unwrap();
                let s = t.sum(y);
                black_box(t.backward(s).unwrap());
            }))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("register_direct_32x32_20it");
    g.sample_size(10);
    for (name, threads) in arms {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(threads, &mut || {
                black_box(register_direct(&pair, &reg_cfg).unwrap());
            }))
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
