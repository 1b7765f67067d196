//! Wall-clock micro-benchmarks of the quantization and matmul kernels on this machine.
//! `X` is `b × dim` and `W` is `dim × dim`.

use std::hint::black_box;
use std::time::Instant;

use lowbit_core::linear::{int8_matmul_dequant, linear_backward, linear_forward, LinearMode, Variant};
use lowbit_core::numerics::{gaussian_matrix, matmul, Seed};
use lowbit_core::quantize::{quantize_rowwise, quantize_tensorwise};
use lowbit_core::Result;
use serde::Serialize;

pub const OPS: [&str; 6] = [
    "quantize_rowwise",
    "quantize_tensorwise",
    "int8_matmul_dequant",
    "matmul",
    "switchback_fwd_bwd",
    "standard_fwd_bwd",
];

pub const CSV_HEADER: &str = "op,b,dim,repeats,mean_ns,p50_ns";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub op: String,
    pub b: usize,
    pub dim: usize,
    pub repeats: usize,
    pub mean_ns: f64,
    pub p50_ns: f64,
}

fn time(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_nanos() as f64);
    }
    let mean = samples.iter().sum::<f64>() / repeats as f64;
    samples.sort_by(f64::total_cmp);
    let mid = repeats / 2;
    let p50 = if repeats % 2 == 1 {
        samples[mid]
    } else {
        0.5 * (samples[mid - 1] + samples[mid])
    };
    Ok((mean, p50))
}

/// Times every op in [`OPS`] for each `(b, dim)` pair.
pub fn bench(sizes: &[(usize, usize)], repeats: usize) -> Result<Vec<BenchRow>> {
    let repeats = repeats.max(1);
    let mut rows = Vec::new();
    for &(b, dim) in sizes {
        let x = gaussian_matrix(b, dim, 0.0, 1.0, Seed(1));
        let w = gaussian_matrix(dim, dim, 0.0, 0.05, Seed(2));
        let g = gaussian_matrix(b, dim, 0.0, 1e-3, Seed(3));
        let qx = quantize_rowwise(&x)?;
        let qw = quantize_tensorwise(&w)?;
        for op in OPS {
            let (mean_ns, p50_ns) = match op {
                "quantize_rowwise" => time(repeats, || quantize_rowwise(black_box(&x)).map(|q| drop(black_box(q))))?,
                "quantize_tensorwise" => time(repeats, || quantize_tensorwise(black_box(&w)).map(|q| drop(black_box(q))))?,
                "int8_matmul_dequant" => time(repeats, || int8_matmul_dequant(black_box(&qx), &qw).map(|y| drop(black_box(y))))?,
                "matmul" => time(repeats, || matmul(black_box(&x), &w).map(|y| drop(black_box(y))))?,
                "switchback_fwd_bwd" => time(repeats, || fwd_bwd(LinearMode::int8(Variant::SwitchBack), &x, &w, &g))?,
                "standard_fwd_bwd" => time(repeats, || fwd_bwd(LinearMode::STANDARD, &x, &w, &g))?,
                _ => unreachable!(),
            };
            rows.push(BenchRow {
                op: op.to_string(),
                b,
                dim,
                repeats,
                mean_ns,
                p50_ns,
            });
        }
    }
    Ok(rows)
}

fn fwd_bwd(mode: LinearMode, x: &lowbit_core::Matrix, w: &lowbit_core::Matrix, g: &lowbit_core::Matrix) -> Result<()> {
    let (y, ctx) = linear_forward(mode, black_box(x), w)?;
    black_box(y);
    black_box(linear_backward(ctx, g)?);
    Ok(())
}

/// Share of the int8 forward spent quantizing:
/// `(quantize_rowwise + quantize_tensorwise) / (both + int8_matmul_dequant)`, by mean time.
pub fn quantize_fraction(rows: &[BenchRow], b: usize, dim: usize) -> Option<f64> {
    let mean = |op: &str| rows.iter().find(|r| r.op == op && r.b == b && r.dim == dim).map(|r| r.mean_ns);
    let q = mean("quantize_rowwise")? + mean("quantize_tensorwise")?;
    let m = mean("int8_matmul_dequant")?;
    (q + m > 0.0).then(|| q / (q + m))
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{},{:.1},{:.1}\n", r.op, r.b, r.dim, r.repeats, r.mean_ns, r.p50_ns));
    }
    out
}

/// Parses `"64x128,256x512"` into `(b, dim)` pairs.
pub fn parse_sizes(s: &str) -> std::result::Result<Vec<(usize, usize)>, String> {
    s.split(',')
        .map(|part| {
            let (b, d) = part
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| format!("size '{part}' is not of the form BxDIM"))?;
            let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
            match (parse(b), parse(d)) {
                (Some(b), Some(d)) => Ok((b, d)),
                _ => Err(format!("size '{part}' needs positive integers")),
            }
        })
        .collect()
}
