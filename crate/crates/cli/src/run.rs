//! `synth`, `train` and `eval`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use fpa3d::ctc::Alphabet;
use fpa3d::metrics::EvalReport;
use fpa3d::model::checkpoint;
use fpa3d::model::train::{evaluate, load_split, train_epoch, EpochSeeds, Example};
use fpa3d::model::{Adam, LipNet};
use fpa3d::rng::{mix, substream};
use fpa3d::synthdata::{corpus_grammar, gen_corpus, read_manifest, Grammar, TRAIN_FILE, VAL_FILE};
use log::info;

use crate::{required, CliError, CliResult, EvalArgs, SynthArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.txt";

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let cfg = args.common.run_config()?;
    let out = required(args.out.clone(), &cfg.paths.out, "out")?;
    let slots = args.slots.unwrap_or(cfg.data.slots);
    let n = args.n.unwrap_or(cfg.data.samples);
    let grammar = Grammar::reduced(slots)?;
    let manifest = gen_corpus(&grammar, n, substream(cfg.train.seed, "data"), &out)?;
    println!(
        "synth n={n} slots={slots} train={} val={} out={}",
        manifest.train.len(),
        manifest.val.len(),
        out.display()
    );
    Ok(())
}

fn eval_line(model: &mut LipNet<f32>, data: &[Example], grammar: &Grammar, batch: usize) -> CliResult<String> {
    let alphabet = Alphabet::default();
    let ev = evaluate(model, data, batch, &alphabet)?;
    let refs: Vec<String> = data.iter().map(|e| e.label.text.clone()).collect();
    let report = EvalReport::compute(&ev.hypotheses, &refs, grammar)?;
    Ok(format!("loss={:.6} {report}", ev.mean_loss))
}

fn corpus_split(dir: &Path, file: &str) -> CliResult<(Vec<Example>, Grammar)> {
    let samples = read_manifest(&dir.join(file))?;
    let grammar = corpus_grammar(dir, &samples)?;
    let data = load_split(dir, file, &Alphabet::default())?;
    if data.is_empty() {
        return Err(CliError::Data(format!("{} lists no clips", dir.join(file).display())));
    }
    Ok((data, grammar))
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = args.common.run_config()?;
    if let Some(spec) = &args.fpa {
        cfg.apply_fpa_flag(spec).map_err(|e| CliError::Usage(format!("--fpa: {e}")))?;
    }
    let epochs = args.epochs.unwrap_or(cfg.train.epochs);
    let data_dir = required(args.data.clone(), &cfg.paths.data, "data")?;
    let out = required(args.out.clone(), &cfg.paths.out, "out")?;
    let ckpt = args.ckpt.clone().or_else(|| cfg.paths.ckpt.clone());
    let (train_set, grammar) = corpus_split(&data_dir, TRAIN_FILE)?;
    let (val_set, _) = corpus_split(&data_dir, VAL_FILE)?;
    let seed = cfg.train.seed;
    let (mut model, mut opt) = match &ckpt {
        Some(path) => {
            let (model, opt) = checkpoint::load(path, cfg.train.adam)?;
            let opt = opt.unwrap_or_else(|| Adam::new(cfg.train.adam, &model));
            (model, opt)
        }
        None => {
            let s = train_set[0].video.shape();
            let model = LipNet::<f32>::build(cfg.lipnet_config([s.c, s.t, s.h, s.w]), substream(seed, "init"))?;
            let opt = Adam::new(cfg.train.adam, &model);
            (model, opt)
        }
    };
    fs::create_dir_all(&out)?;
    let (shuffle, dropout) = (substream(seed, "shuffle"), substream(seed, "dropout"));
    let mut log = String::new();
    for epoch in 1..=epochs {
        let started = Instant::now();
        // Keyed by optimizer step so a resumed run continues the same streams.
        let seeds = EpochSeeds { shuffle: mix(shuffle, opt.step), dropout: mix(dropout, opt.step) };
        let loss = train_epoch(&mut model, &mut opt, &train_set, cfg.train.batch_size, seeds)?;
        let line = format!("epoch={epoch} loss={loss:.6}");
        info!("{line} ({:.1}s)", started.elapsed().as_secs_f64());
        println!("{line}");
        writeln!(log, "{line}").expect("string write");
    }
    let line = format!("val {}", eval_line(&mut model, &val_set, &grammar, cfg.train.batch_size)?);
    println!("{line}");
    writeln!(log, "{line}").expect("string write");
    checkpoint::save(&out.join(CHECKPOINT_FILE), &model, Some(&opt))?;
    fs::write(out.join(METRICS_FILE), log)?;
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let cfg = args.common.run_config()?;
    let data_dir = required(args.data.clone(), &cfg.paths.data, "data")?;
    let ckpt = required(args.ckpt.clone(), &cfg.paths.ckpt, "ckpt")?;
    let file = match args.split.as_str() {
        "val" => VAL_FILE,
        "train" => TRAIN_FILE,
        other => return Err(CliError::Usage(format!("unknown split '{other}' (expected val or train)"))),
    };
    let (data, grammar) = corpus_split(&data_dir, file)?;
    let (mut model, _) = checkpoint::load(&ckpt, cfg.train.adam)?;
    println!("{} {}", args.split, eval_line(&mut model, &data, &grammar, cfg.train.batch_size)?);
    Ok(())
}
