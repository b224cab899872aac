//! Wall-clock timing of single kernels under fixed thread counts.

use std::time::Instant;

use fpa3d::fpa::{FpaConfig, FpaModule};
use fpa3d::kernels::{maxpool3d, Conv3d, Mode};
use fpa3d::model::{FpaPosition, LipNet, LipNetConfig};
use fpa3d::{Fill, Shape5, Tensor5};

use crate::{BenchArgs, CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Nearest-rank percentiles of per-call seconds.
pub fn summarize(mut seconds: Vec<f64>) -> Timing {
    assert!(!seconds.is_empty(), "no timings");
    seconds.sort_by(f64::total_cmp);
    let at = |q: f64| seconds[((seconds.len() - 1) as f64 * q).round() as usize];
    Timing { median: at(0.5), p10: at(0.1), p90: at(0.9) }
}

pub fn parse_shape(s: &str) -> CliResult<Shape5> {
    let dims: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("bad shape '{s}': {e}")))?;
    match dims[..] {
        [n, c, t, h, w] => Ok(Shape5::new(n, c, t, h, w)?),
        _ => Err(CliError::Usage(format!("shape '{s}' needs five extents n,c,t,h,w"))),
    }
}

fn time(warmup: usize, repeats: usize, mut f: impl FnMut() -> fpa3d::Result<()>) -> CliResult<Timing> {
    for _ in 0..warmup {
        f()?;
    }
    let mut seconds = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(summarize(seconds))
}

fn host() -> String {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("host cores={cores} cpu=\"{cpu}\"")
}

/// Median seconds of the three backbone blocks and of an FPA module at F2,
/// for a default-sized batch of `n` clips.
fn fpa_overhead(n: usize, warmup: usize, repeats: usize) -> CliResult<(Timing, Timing)> {
    let cfg = LipNetConfig::default().with_fpa(FpaPosition::F2, FpaConfig::default());
    let mut model = LipNet::<f32>::build(cfg, 1)?;
    let video = Tensor5::<f32>::new(model.config.input_shape(n)?, Fill::Uniform { lo: 0.0, hi: 1.0, seed: 2 })?;
    let pool = model.config.pool;
    let mut f2_input = None;
    let blocks = time(warmup, repeats, || {
        let mut x = video.clone();
        for b in 0..3 {
            let (y, _) = model.blocks[b].forward(&x, Mode::Eval)?;
            x = maxpool3d(&y, pool, pool)?.0;
            if b == 1 {
                f2_input = Some(x.clone());
            }
        }
        Ok(())
    })?;
    let x = f2_input.expect("block 2 ran");
    let fpa = model.fpa[FpaPosition::F2.index()].as_mut().expect("configured above");
    let attention = time(warmup, repeats, || fpa.forward(&x, Mode::Eval).map(|_| ()))?;
    Ok((blocks, attention))
}

fn bench_once(args: &BenchArgs, shape: Shape5, threads: usize) -> CliResult<Timing> {
    let x = Tensor5::<f32>::new(shape, Fill::Uniform { lo: -1.0, hi: 1.0, seed: 1 })?;
    match args.op.as_str() {
        "conv3d" => {
            let conv = Conv3d::<f32>::init(shape.c, shape.c, [3; 3], [1; 3], [1; 3], true, 3)?;
            time(args.warmup, args.repeats, || conv.forward(&x).map(|_| ()))
        }
        "fpa_forward" => {
            let mut fpa = FpaModule::<f32>::build(FpaConfig::default(), shape.c, 3)?;
            time(args.warmup, args.repeats, || fpa.forward(&x, Mode::Eval).map(|_| ()))
        }
        "fpa_overhead" => {
            let (blocks, fpa) = fpa_overhead(shape.n, args.warmup, args.repeats)?;
            println!(
                "bench op=fpa_overhead n={} threads={threads} blocks_median_ms={:.3} fpa_f2_median_ms={:.3} ratio={:.4}",
                shape.n,
                blocks.median * 1e3,
                fpa.median * 1e3,
                fpa.median / blocks.median
            );
            Ok(fpa)
        }
        other => Err(CliError::Usage(format!(
            "unknown op '{other}' (expected conv3d, fpa_forward or fpa_overhead)"
        ))),
    }
}

pub fn run(args: &BenchArgs) -> CliResult<()> {
    if args.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let shape = parse_shape(&args.shape)?;
    let threads: Vec<usize> = match &args.thread_list {
        Some(list) => list
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Usage(format!("bad --thread-list '{list}': {e}")))?,
        None => vec![args.common.threads],
    };
    println!("{}", host());
    let mut medians = Vec::with_capacity(threads.len());
    for &t in &threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {t} threads: {e}")))?;
        let effective = pool.current_num_threads();
        let timing = pool.install(|| bench_once(args, shape, effective))?;
        if args.op != "fpa_overhead" {
            println!(
                "bench op={} shape={shape} threads={effective} repeats={} median_ms={:.3} p10_ms={:.3} p90_ms={:.3} elems_per_s={:.4e}",
                args.op,
                args.repeats,
                timing.median * 1e3,
                timing.p10 * 1e3,
                timing.p90 * 1e3,
                shape.len() as f64 / timing.median
            );
        }
        medians.push((effective, timing.median));
    }
    if let Some(&(t0, base)) = medians.first() {
        for &(t, m) in &medians[1..] {
            println!("bench op={} scaling threads={t}/{t0} median_ratio={:.4}", args.op, m / base);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let t = summarize(vec![5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!((t.median, t.p10, t.p90), (3.0, 1.0, 5.0));
        let one = summarize(vec![0.25]);
        assert_eq!((one.median, one.p10, one.p90), (0.25, 0.25, 0.25));
    }

    #[test]
    fn shapes() {
        assert_eq!(parse_shape("4,8,24,32,32").unwrap(), Shape5::new(4, 8, 24, 32, 32).unwrap());
        assert_eq!(parse_shape("1x2x3x4x5").unwrap(), Shape5::new(1, 2, 3, 4, 5).unwrap());
        assert!(parse_shape("1,2,3").is_err());
        assert!(parse_shape("1,2,3,0,4").is_err());
    }
}
