//! Attention mask export: one binary PGM per frame and a CSV of the raw
//! values.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use fpa3d::kernels::Mode;
use fpa3d::model::{checkpoint, FpaPosition};
use fpa3d::tensor::read_vid5;
use fpa3d::Tensor5;

use crate::{required, CliError, CliResult, MaskArgs};

pub const CSV_FILE: &str = "mask.csv";

/// Frame `t` of the channel-averaged mask of sample 0, row-major.
pub fn channel_mean(mask: &Tensor5<f32>, t: usize) -> Vec<f32> {
    let s = mask.shape();
    let mut out = Vec::with_capacity(s.h * s.w);
    for h in 0..s.h {
        for w in 0..s.w {
            let sum: f32 = (0..s.c).map(|c| mask.at(0, c, t, h, w)).sum();
            out.push(sum / s.c as f32);
        }
    }
    out
}

pub fn pgm(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    bytes
}

/// Writes `frame_%03d.pgm` for every frame and `mask.csv` with one
/// `t,h,w,mean,c0,c1,...` row per position, no header.
pub fn write_mask(mask: &Tensor5<f32>, out: &Path) -> CliResult<()> {
    let s = mask.shape();
    fs::create_dir_all(out)?;
    let mut csv = String::new();
    for t in 0..s.t {
        let mean = channel_mean(mask, t);
        fs::write(out.join(format!("frame_{t:03}.pgm")), pgm(s.w, s.h, &mean))?;
        for h in 0..s.h {
            for w in 0..s.w {
                write!(csv, "{t},{h},{w},{:e}", mean[h * s.w + w]).expect("string write");
                for c in 0..s.c {
                    write!(csv, ",{:e}", mask.at(0, c, t, h, w)).expect("string write");
                }
                csv.push('\n');
            }
        }
    }
    fs::write(out.join(CSV_FILE), csv)?;
    Ok(())
}

pub fn run(args: &MaskArgs) -> CliResult<()> {
    let cfg = args.common.run_config()?;
    let ckpt = required(args.ckpt.clone(), &cfg.paths.ckpt, "ckpt")?;
    let out = required(args.out.clone(), &cfg.paths.out, "out")?;
    let position: FpaPosition = args.position.parse()?;
    let (mut model, _) = checkpoint::load(&ckpt, cfg.train.adam)?;
    if model.fpa[position.index()].is_none() {
        return Err(CliError::Usage(format!("checkpoint has no FPA module at {position}")));
    }
    let video = read_vid5(BufReader::new(fs::File::open(&args.video)?))?;
    let (_, cache) = model.forward(&video, Mode::Eval)?;
    let mask = cache.mask(position).expect("module present");
    write_mask(mask, &out)?;
    let s = mask.shape();
    println!("mask-dump position={position} frames={} size={}x{} out={}", s.t, s.h, s.w, out.display());
    Ok(())
}
