//! Runtime-scaling benchmarks: median-of-reps timings per sequence length
//! and a log-log least-squares slope with a Student-t confidence interval.

use std::fmt;
use std::hint::black_box;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::{Data, OrderStatistics};

use crate::attention::{
    build_mask, separable_self_attention, softmax_self_attention, vmi_sa_matrix, vmi_sa_recurrent,
    GateVector, MaskKind,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

type VmiSaKernel = fn(&Tensor, &Tensor, &GateVector, &crate::attention::Mask) -> Result<Tensor>;

pub const DEFAULT_LENGTHS: [usize; 5] = [256, 512, 1024, 2048, 4096];
pub const DEFAULT_DIM: usize = 64;
pub const BENCH_HEADER: [&str; 5] = ["kernel", "L", "D", "median_s", "iqr_s"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchKernel {
    SoftmaxSa,
    SeparableSa,
    VmiSaMatrix,
    VmiSaRecurrent,
}

impl BenchKernel {
    pub const ALL: [BenchKernel; 4] = [
        BenchKernel::SoftmaxSa,
        BenchKernel::SeparableSa,
        BenchKernel::VmiSaMatrix,
        BenchKernel::VmiSaRecurrent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchKernel::SoftmaxSa => "softmax_sa",
            BenchKernel::SeparableSa => "separable_sa",
            BenchKernel::VmiSaMatrix => "vmi_sa_matrix",
            BenchKernel::VmiSaRecurrent => "vmi_sa_recurrent",
        }
    }
}

impl fmt::Display for BenchKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchKernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown kernel {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchOptions {
    pub reps: usize,
    pub warmup: usize,
    /// Each timed rep repeats the kernel until it lasts at least this long.
    pub min_rep_time: Duration,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            reps: 5,
            warmup: 3,
            min_rep_time: Duration::from_millis(5),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingPoint {
    pub l: usize,
    /// Median seconds per kernel call.
    pub median_s: f64,
    pub iqr_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub kernel: String,
    pub d: usize,
    pub points: Vec<ScalingPoint>,
    /// Least-squares slope of `ln(median)` against `ln(L)`.
    pub slope: f64,
    /// Half-width of the 95% confidence interval of the slope.
    pub slope_ci: f64,
}

impl fmt::Display for ScalingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} (D = {}): slope {:.3} +/- {:.3}",
            self.kernel, self.d, self.slope, self.slope_ci
        )?;
        for p in &self.points {
            writeln!(
                f,
                "  L = {:>6}  median {:.3e} s  iqr {:.3e} s",
                p.l, p.median_s, p.iqr_s
            )?;
        }
        Ok(())
    }
}

/// Ordinary least squares of `y` on `x`; returns the slope and the 95%
/// confidence half-width (infinite with fewer than three points).
pub fn fit_slope(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return Err(Error::Config(format!(
            "slope fit needs >= 2 paired points, got {n} and {}",
            y.len()
        )));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("slope fit needs distinct x values".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    if n < 3 {
        return Ok((slope, f64::INFINITY));
    }
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let se = (sse / (nf - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, nf - 2.0)
        .map_err(|e| Error::Config(e.to_string()))?
        .inverse_cdf(0.975);
    Ok((slope, t * se))
}

fn time_reps(run: &mut dyn FnMut(), opts: &BenchOptions) -> (f64, f64) {
    for _ in 0..opts.warmup {
        run();
    }
    let t0 = Instant::now();
    run();
    let once = t0.elapsed().max(Duration::from_nanos(1));
    let inner = (opts.min_rep_time.as_secs_f64() / once.as_secs_f64())
        .ceil()
        .max(1.0) as u32;
    let samples: Vec<f64> = (0..opts.reps)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..inner {
                run();
            }
            t.elapsed().as_secs_f64() / f64::from(inner)
        })
        .collect();
    let mut data = Data::new(samples);
    (data.median(), data.upper_quartile() - data.lower_quartile())
}

/// Times arbitrary workloads. `setup(L)` prepares inputs outside the timed
/// region and returns the closure to time.
pub fn bench_with(
    name: &str,
    lengths: &[usize],
    d: usize,
    opts: &BenchOptions,
    mut setup: impl FnMut(usize) -> Result<Box<dyn FnMut()>>,
) -> Result<ScalingReport> {
    if opts.reps < 5 {
        return Err(Error::Config(format!(
            "reps must be >= 5, got {}",
            opts.reps
        )));
    }
    if lengths.len() < 2 || lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(Error::Config(format!(
            "lengths must be >= 2 positive, strictly increasing values: {lengths:?}"
        )));
    }
    let mut points = Vec::with_capacity(lengths.len());
    for &l in lengths {
        let mut run = setup(l)?;
        let (median_s, iqr_s) = time_reps(&mut *run, opts);
        log::debug!("{name} L={l}: {median_s:.3e} s");
        points.push(ScalingPoint { l, median_s, iqr_s });
    }
    let x: Vec<f64> = points.iter().map(|p| (p.l as f64).ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.median_s.max(1e-12).ln()).collect();
    let (slope, slope_ci) = fit_slope(&x, &y)?;
    Ok(ScalingReport {
        kernel: name.to_string(),
        d,
        points,
        slope,
        slope_ci,
    })
}

/// Single-threaded timing of one attention kernel on seeded random inputs.
/// The VMI-SA kernels use a lower-triangular mask built outside the timed region.
pub fn bench_scaling(
    kernel: BenchKernel,
    lengths: &[usize],
    d: usize,
    opts: &BenchOptions,
) -> Result<ScalingReport> {
    let seed = opts.seed;
    bench_with(kernel.name(), lengths, d, opts, |l| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ l as u64);
        let q = Tensor::randn(&[l, d], &mut rng);
        let k = Tensor::randn(&[l, d], &mut rng);
        let v = Tensor::randn(&[l, d], &mut rng);
        Ok(match kernel {
            BenchKernel::SoftmaxSa => Box::new(move || {
                black_box(softmax_self_attention(black_box(&q), &k, &v).expect("shapes agree"));
            }),
            BenchKernel::SeparableSa => {
                let qs = Tensor::randn(&[l, 1], &mut rng);
                Box::new(move || {
                    black_box(
                        separable_self_attention(black_box(&qs), &k, &v).expect("shapes agree"),
                    );
                })
            }
            BenchKernel::VmiSaMatrix | BenchKernel::VmiSaRecurrent => {
                let m = build_mask(MaskKind::LowerTriangular, l, d)?;
                let g = GateVector::init(l);
                let f: VmiSaKernel = if kernel == BenchKernel::VmiSaMatrix {
                    vmi_sa_matrix
                } else {
                    vmi_sa_recurrent
                };
                Box::new(move || {
                    black_box(f(black_box(&q), &k, &g, &m).expect("shapes agree"));
                })
            }
        })
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kernel: String,
    pub l: usize,
    pub d: usize,
    pub median_s: f64,
    pub iqr_s: f64,
}

/// Writes one header and one row per point, replacing any existing file.
pub fn write_bench_csv(path: &Path, reports: &[ScalingReport]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(BENCH_HEADER).map_err(csv_err)?;
    for r in reports {
        for p in &r.points {
            w.write_record([
                r.kernel.clone(),
                p.l.to_string(),
                r.d.to_string(),
                p.median_s.to_string(),
                p.iqr_s.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_bench_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(BENCH_HEADER) {
        return Err(Error::format(
            0,
            format!("unexpected bench header {header:?}"),
        ));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let field = |i: usize| {
            rec.get(i)
                .ok_or_else(|| Error::format(offset, format!("missing field {i}")))
        };
        let num = |i: usize| -> Result<f64> {
            field(i)?
                .parse()
                .map_err(|_| Error::format(offset, format!("bad number in field {i}")))
        };
        let int = |i: usize| -> Result<usize> {
            field(i)?
                .parse()
                .map_err(|_| Error::format(offset, format!("bad integer in field {i}")))
        };
        out.push(BenchRow {
            kernel: field(0)?.to_string(),
            l: int(1)?,
            d: int(2)?,
            median_s: num(3)?,
            iqr_s: num(4)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law_slope() {
        let x: Vec<f64> = [1.0f64, 2.0, 4.0, 8.0].iter().map(|v| v.ln()).collect();
        let y: Vec<f64> = [1.0f64, 4.0, 16.0, 64.0].iter().map(|v| v.ln()).collect();
        let (s, ci) = fit_slope(&x, &y).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
        assert!(ci < 1e-6);
    }

    #[test]
    fn two_points_have_infinite_interval() {
        let (s, ci) = fit_slope(&[0.0, 1.0], &[1.0, 3.0]).unwrap();
        assert_eq!(s, 2.0);
        assert!(ci.is_infinite());
    }

    #[test]
    fn argument_checks() {
        let o = BenchOptions::default();
        let stub = |_l: usize| -> Result<Box<dyn FnMut()>> { Ok(Box::new(|| {})) };
        assert!(bench_with("x", &[4, 4], 1, &o, stub).is_err());
        assert!(bench_with("x", &[8], 1, &o, stub).is_err());
        let few = BenchOptions { reps: 4, ..o };
        assert!(bench_with("x", &[4, 8], 1, &few, stub).is_err());
    }

    #[test]
    fn kernel_names_round_trip() {
        for k in BenchKernel::ALL {
            assert_eq!(k.name().parse::<BenchKernel>().unwrap(), k);
        }
        assert!("quadratic".parse::<BenchKernel>().is_err());
    }
}
