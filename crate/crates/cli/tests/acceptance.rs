//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any gated criterion fails.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use fpa3d::ctc::{ctc_brute_force, ctc_loss_grad, log_softmax_rows, LabelSeq};
use fpa3d::fpa::{FpaConfig, FpaModule, FpaVariant};
use fpa3d::kernels::Mode;
use fpa3d::metrics::{bleu, edit_distance};
use fpa3d::model::checkpoint;
use fpa3d::model::AdamConfig;
use fpa3d::params::Parameters;
use fpa3d::rng::{hash_u64, hash_unit};
use fpa3d::synthdata::VAL_FILE;
use fpa3d::tensor::{decode_vid5, write_vid5};
use fpa3d::{Fill, Shape5, Tensor5};

struct Outcome {
    id: usize,
    title: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
}

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fpa3d"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn fpa3d")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field(line: &str, key: &str) -> Option<f64> {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
        .and_then(|v| v.parse().ok())
}

fn in_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("pool").install(f)
}

fn digest_f64(values: impl IntoIterator<Item = f64>) -> u64 {
    let mut h = DefaultHasher::new();
    for v in values {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

fn without_timing(text: &str) -> String {
    text.lines()
        .map(|l| l.split_whitespace().filter(|kv| !kv.starts_with("seconds=")).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

// 1. Gradient suite through the CLI.
fn gradient_suite(threads: usize) -> (bool, String, String, f64) {
    let start = Instant::now();
    let out = run(&["gradcheck", "--threads", &threads.to_string()]);
    let seconds = start.elapsed().as_secs_f64();
    let text = stdout(&out);
    let summary = text.lines().last().unwrap_or("").to_string();
    let ok = out.status.success() && field(&summary, "failed") == Some(0.0) && seconds < 120.0;
    (ok, format!("{summary} (limit 120s)"), without_timing(&text), seconds)
}

// 2. Shape and identity properties of the FPA module.
fn shape_suite() -> (bool, String, u64) {
    let mut failures = Vec::new();
    let mut outputs = Vec::new();
    let mut odd = 0;
    for i in 0..60u64 {
        let extent = |k: u64, lo: u64, hi: u64| (lo + hash_u64(i, k) % (hi - lo + 1)) as usize;
        let s = Shape5::new(extent(0, 1, 2), extent(1, 1, 3), extent(2, 1, 19), extent(3, 1, 21), extent(4, 1, 21)).unwrap();
        odd += usize::from(s.t % 2 == 1 || s.h % 2 == 1 || s.w % 2 == 1);
        let variant = if i % 2 == 0 { FpaVariant::Spatiotemporal3d } else { FpaVariant::Spatial2d };
        let mut m = FpaModule::<f64>::build(FpaConfig::with_variant(variant), s.c, i).unwrap();
        let x = Tensor5::<f64>::new(s, Fill::Uniform { lo: -1.0, hi: 1.0, seed: i }).unwrap();
        match m.forward(&x, Mode::Eval) {
            Ok((y, cache)) => {
                if y.shape() != s {
                    failures.push(format!("{s} -> {}", y.shape()));
                }
                if variant == FpaVariant::Spatial2d && cache.level_shapes().iter().any(|l| l.t != s.t) {
                    failures.push(format!("2d variant changed t for {s}"));
                }
                outputs.extend_from_slice(y.data());
            }
            Err(e) => failures.push(format!("{s}: {e}")),
        }
    }
    for (variant, mode) in [
        (FpaVariant::Spatiotemporal3d, Mode::Eval),
        (FpaVariant::Spatiotemporal3d, Mode::train(3)),
        (FpaVariant::Spatial2d, Mode::train(4)),
    ] {
        let s = Shape5::new(2, 3, 9, 11, 13).unwrap();
        let mut m = FpaModule::<f64>::build(FpaConfig::with_variant(variant), 3, 5).unwrap();
        m.zero_params();
        let x = Tensor5::<f64>::new(s, Fill::Uniform { lo: -2.0, hi: 2.0, seed: 6 }).unwrap();
        let (y, _) = m.forward(&x, mode).unwrap();
        if y.data().iter().zip(x.data()).any(|(a, b)| *a != 0.5 * b) {
            failures.push(format!("zero-weight {variant} in {mode:?} is not 0.5 * input"));
        }
    }
    let detail = if failures.is_empty() {
        format!("60 random shapes ({odd} with an odd extent), zero-weight mask exact, 2d keeps t")
    } else {
        failures.join("; ")
    };
    (failures.is_empty(), detail, digest_f64(outputs))
}

// 3. CTC against path enumeration.
fn ctc_suite() -> (bool, String, u64) {
    let mut worst = 0.0f64;
    let mut cases = 0;
    let mut problems = Vec::new();
    let mut values = Vec::new();
    for t in 1..=4usize {
        for classes in [2usize, 3] {
            let symbols = classes - 1;
            for len in [1usize, 2] {
                for code in 0..symbols.pow(len as u32) {
                    let label: Vec<usize> = (0..len).map(|k| code / symbols.pow(k as u32) % symbols).collect();
                    let logits: Vec<f64> = (0..t * classes)
                        .map(|i| 4.0 * (hash_unit((t * 100 + classes * 10 + len) as u64 + code as u64 * 1000, i as u64) - 0.5))
                        .collect();
                    let lp = log_softmax_rows(&logits, classes);
                    let oracle = ctc_brute_force(&lp, classes, &label).unwrap();
                    let seq = LabelSeq::new(label.clone(), "").unwrap();
                    cases += 1;
                    match ctc_loss_grad(&lp, classes, &seq) {
                        Ok(out) => {
                            worst = worst.max((out.loss - oracle).abs());
                            values.push(out.loss);
                            values.extend(out.grad);
                        }
                        Err(_) if oracle.is_infinite() => {}
                        Err(e) => problems.push(format!("t={t} classes={classes} label={label:?}: {e}")),
                    }
                }
            }
        }
    }
    let uniform = vec![0.5f64.ln(); 4];
    let half = ctc_loss_grad(&uniform, 2, &LabelSeq::new(vec![0], "").unwrap()).unwrap().loss;
    let expected = -(0.75f64.ln());
    let uniform_err = (half - expected).abs();
    let ok = problems.is_empty() && worst < 1e-10 && uniform_err < 1e-10;
    let detail = format!(
        "{cases} cases, max |loss - enumeration| = {worst:.2e}, t=2 uniform loss {half:.12} vs -ln 0.75 = {expected:.12} {}",
        problems.join("; ")
    );
    (ok, detail.trim_end().to_string(), digest_f64(values))
}

fn recursive_distance(a: &[u8], b: &[u8]) -> usize {
    match (a.split_last(), b.split_last()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = recursive_distance(ra, rb) + usize::from(x != y);
            sub.min(recursive_distance(ra, b) + 1).min(recursive_distance(a, rb) + 1)
        }
    }
}

// 4. Metrics against independent oracles.
fn metrics_suite() -> (bool, String, u64) {
    let mut mismatches = 0;
    let mut values = Vec::new();
    for i in 0..1000u64 {
        let seq = |k: u64| -> Vec<u8> {
            let len = (hash_u64(i, k) % 9) as usize;
            (0..len).map(|j| b'a' + (hash_u64(i * 31 + k, j as u64) % 3) as u8).collect()
        };
        let (a, b) = (seq(0), seq(1));
        let d = edit_distance(&a, &b);
        values.push(d as f64);
        if d != recursive_distance(&a, &b) {
            mismatches += 1;
        }
    }
    let corpus = ["bin blue at f two now", "lay red by a zero please", "set green in z nine soon"];
    let identical = bleu(&corpus, &corpus).unwrap();
    let short = bleu(&["a b c d"], &["a b c d e"]).unwrap();
    let bp_err = (short - (-0.25f64).exp()).abs();
    values.extend([identical, short]);
    let ok = mismatches == 0 && identical == 1.0 && bp_err < 1e-12;
    let detail = format!(
        "edit distance mismatches {mismatches}/1000, identical BLEU {identical}, brevity case error {bp_err:.1e}"
    );
    (ok, detail, digest_f64(values))
}

struct TrainRun {
    stdout: String,
    ckpt: Vec<u8>,
    seconds: f64,
}

fn train(data: &Path, out: &Path, threads: usize, extra: &[&str]) -> Result<TrainRun, String> {
    let start = Instant::now();
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(["--epochs", "30", "--seed", "7"]);
    let threads = threads.to_string();
    args.extend(["--threads", threads.as_str()]);
    args.extend(extra);
    let o = run(&args);
    if !o.status.success() {
        return Err(format!("train {extra:?} failed: {}", String::from_utf8_lossy(&o.stderr)));
    }
    let ckpt = fs::read(out.join("model.ckpt")).map_err(|e| e.to_string())?;
    Ok(TrainRun { stdout: stdout(&o), ckpt, seconds: start.elapsed().as_secs_f64() })
}

fn epoch_loss(stdout: &str, epoch: usize) -> Option<f64> {
    let tag = format!("epoch={epoch} ");
    stdout.lines().find(|l| l.starts_with(&tag)).and_then(|l| field(l, "loss"))
}

fn val_line(stdout: &str) -> &str {
    stdout.lines().find(|l| l.starts_with("val ")).unwrap_or("")
}

/// Log-probability lengths of one validation clip under a checkpoint.
fn output_extent(ckpt: &Path, data: &Path) -> Result<(Shape5, usize), String> {
    let (mut model, _) = checkpoint::load(ckpt, AdamConfig::default()).map_err(|e| e.to_string())?;
    let first = fs::read_to_string(data.join(VAL_FILE)).map_err(|e| e.to_string())?;
    let video = first.lines().next().and_then(|l| l.split('\t').next()).ok_or("empty val split")?;
    let clip = decode_vid5(&fs::read(data.join(video)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let (lp, _) = model.forward(&clip, Mode::Eval).map_err(|e| e.to_string())?;
    Ok((clip.shape(), lp[0].len()))
}

fn files_identical(a: &Path, b: &Path) -> bool {
    let mut names: Vec<PathBuf> = walk(a).into_iter().map(|p| p.strip_prefix(a).unwrap().to_path_buf()).collect();
    names.sort();
    names.iter().all(|n| fs::read(a.join(n)).ok() == fs::read(b.join(n)).ok()) && walk(b).len() == names.len()
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap().flatten() {
        let p = entry.path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn main() {
    let started = Instant::now();
    let tmp = tempfile::tempdir().expect("tempdir");
    let root = tmp.path();
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut outcomes = Vec::new();
    let mut report = |o: Outcome| {
        println!(
            "{} criterion {}: {} [{:.1}s] {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.id,
            o.title,
            o.seconds,
            o.detail
        );
        outcomes.push(o.passed);
    };

    let (g_ok, g_detail, g_text1, g_secs) = gradient_suite(1);
    report(Outcome { id: 1, title: "gradient suite", passed: g_ok, detail: g_detail, seconds: g_secs });

    let t = Instant::now();
    let (s_ok, s_detail, s_digest1) = in_pool(1, shape_suite);
    let secs = t.elapsed().as_secs_f64();
    report(Outcome { id: 2, title: "shape and identity suite", passed: s_ok && secs < 30.0, detail: s_detail, seconds: secs });

    let t = Instant::now();
    let (c_ok, c_detail, c_digest1) = in_pool(1, ctc_suite);
    let secs = t.elapsed().as_secs_f64();
    report(Outcome { id: 3, title: "CTC oracle", passed: c_ok && secs < 10.0, detail: c_detail, seconds: secs });

    let t = Instant::now();
    let (m_ok, m_detail, m_digest1) = in_pool(1, metrics_suite);
    let secs = t.elapsed().as_secs_f64();
    report(Outcome { id: 4, title: "metrics oracle", passed: m_ok && secs < 10.0, detail: m_detail, seconds: secs });

    // 5. End-to-end smoke run.
    let t = Instant::now();
    let data = root.join("corpus");
    let synth = run(&["synth", "--n", "500", "--seed", "7", "--slots", "2", "--threads", "1", "--out", data.to_str().unwrap()]);
    let baseline = train(&data, &root.join("base"), 1, &[]);
    let with_fpa = train(&data, &root.join("fpa"), 1, &["--fpa", "f2:3d"]);
    let (e2e_ok, e2e_detail) = match (synth.status.success(), &baseline, &with_fpa) {
        (true, Ok(b), Ok(f)) => {
            let first = epoch_loss(&b.stdout, 1).unwrap_or(f64::NAN);
            let last = epoch_loss(&b.stdout, 30).unwrap_or(f64::NAN);
            let wer = field(val_line(&b.stdout), "wer").unwrap_or(f64::NAN);
            let fpa_wer = field(val_line(&f.stdout), "wer").unwrap_or(f64::NAN);
            let shapes = (
                output_extent(&root.join("base/model.ckpt"), &data),
                output_extent(&root.join("fpa/model.ckpt"), &data),
            );
            let same_shapes = matches!(&shapes, (Ok(a), Ok(b)) if a == b);
            let direction = match fpa_wer.partial_cmp(&wer) {
                Some(std::cmp::Ordering::Less) => "f2:3d lower",
                Some(std::cmp::Ordering::Greater) => "f2:3d higher",
                _ => "tied",
            };
            (
                last < 0.5 * first && wer < 0.5 && same_shapes,
                format!(
                    "loss epoch1 {first:.4} -> epoch30 {last:.4}; val WER baseline {wer:.4} vs f2:3d {fpa_wer:.4} ({direction}); \
                     shapes match {same_shapes}; train {:.0}s + {:.0}s on {cores} core(s)",
                    b.seconds, f.seconds
                ),
            )
        }
        _ => (
            false,
            format!(
                "synth ok {}; {}; {}",
                synth.status.success(),
                baseline.as_ref().err().cloned().unwrap_or_default(),
                with_fpa.as_ref().err().cloned().unwrap_or_default()
            ),
        ),
    };
    let e2e_secs = t.elapsed().as_secs_f64();
    report(Outcome { id: 5, title: "end-to-end smoke", passed: e2e_ok, detail: e2e_detail, seconds: e2e_secs });

    // 6. Everything above again with four threads.
    let t = Instant::now();
    let (_, _, g_text4, _) = gradient_suite(4);
    let same_grad = g_text1 == g_text4;
    let same_shape = in_pool(4, shape_suite).2 == s_digest1;
    let same_ctc = in_pool(4, ctc_suite).2 == c_digest1;
    let same_metrics = in_pool(4, metrics_suite).2 == m_digest1;
    let data4 = root.join("corpus4");
    let synth4 = run(&["synth", "--n", "500", "--seed", "7", "--slots", "2", "--threads", "4", "--out", data4.to_str().unwrap()]);
    let same_corpus = synth4.status.success() && files_identical(&data, &data4);
    let rerun = train(&data, &root.join("base4"), 4, &[]);
    let rerun_fpa = train(&data, &root.join("fpa4"), 4, &["--fpa", "f2:3d"]);
    let same_run = |a: &Result<TrainRun, String>, b: &Result<TrainRun, String>| {
        matches!((a, b), (Ok(a), Ok(b)) if a.ckpt == b.ckpt && a.stdout == b.stdout)
    };
    let same_train = same_run(&baseline, &rerun);
    let same_fpa = same_run(&with_fpa, &rerun_fpa);
    let checks = [
        ("gradcheck", same_grad),
        ("shapes", same_shape),
        ("ctc", same_ctc),
        ("metrics", same_metrics),
        ("corpus", same_corpus),
        ("baseline checkpoint+metrics", same_train),
        ("f2:3d checkpoint+metrics", same_fpa),
    ];
    let detail = checks.iter().map(|(n, ok)| format!("{n}={}", if *ok { "identical" } else { "DIFFERENT" })).collect::<Vec<_>>();
    report(Outcome {
        id: 6,
        title: "determinism across 1 and 4 threads",
        passed: checks.iter().all(|(_, ok)| *ok),
        detail: detail.join(" "),
        seconds: t.elapsed().as_secs_f64(),
    });

    // 7. Format round trips and corruption handling.
    let t = Instant::now();
    let ckpt_path = root.join("base/model.ckpt");
    let ckpt_bytes = fs::read(&ckpt_path).unwrap_or_default();
    let ckpt_round = checkpoint::decode(&ckpt_bytes).and_then(|ts| checkpoint::encode(&ts)).map(|b| b == ckpt_bytes).unwrap_or(false);
    let reload = checkpoint::load(&ckpt_path, AdamConfig::default()).and_then(|(m, o)| {
        let again = root.join("again.ckpt");
        checkpoint::save(&again, &m, o.as_ref())?;
        Ok(fs::read(again)? == ckpt_bytes)
    });
    let reload_ok = matches!(reload, Ok(true));
    let clip = fs::read(data.join("videos/000000.vid5")).unwrap_or_default();
    let vid_round = decode_vid5(&clip)
        .map(|v| {
            let mut buf = Vec::new();
            write_vid5(&v, &mut buf).unwrap();
            buf == clip
        })
        .unwrap_or(false);
    let mut bad = ckpt_bytes.clone();
    if let Some(b) = bad.first_mut() {
        *b ^= 0xff;
    }
    fs::write(root.join("bad.ckpt"), &bad).unwrap();
    let rejected = run(&["eval", "--data", data.to_str().unwrap(), "--ckpt", root.join("bad.ckpt").to_str().unwrap()]);
    let mut bad_clip = clip.clone();
    if let Some(b) = bad_clip.first_mut() {
        *b ^= 0xff;
    }
    fs::write(root.join("bad.vid5"), &bad_clip).unwrap();
    let fpa_ckpt = root.join("fpa/model.ckpt");
    let rejected_clip = run(&[
        "mask-dump",
        "--ckpt",
        fpa_ckpt.to_str().unwrap(),
        "--video",
        root.join("bad.vid5").to_str().unwrap(),
        "--out",
        root.join("masks").to_str().unwrap(),
    ]);
    let codes = (rejected.status.code(), rejected_clip.status.code());
    report(Outcome {
        id: 7,
        title: "format round trips",
        passed: ckpt_round && reload_ok && vid_round && codes == (Some(2), Some(2)),
        detail: format!(
            "checkpoint bytes {ckpt_round}, load/save {reload_ok}, VID5 bytes {vid_round}, corrupted magic exit codes {:?}/{:?} (expected 2)",
            codes.0, codes.1
        ),
        seconds: t.elapsed().as_secs_f64(),
    });

    // 8. Performance report; the scaling bound is a soft target for
    // 4-core hosts.
    let t = Instant::now();
    let conv = run(&["bench", "--op", "conv3d", "--shape", "4,8,24,32,32", "--thread-list", "1,4", "--repeats", "5"]);
    let fpa = run(&["bench", "--op", "fpa_forward", "--shape", "4,8,24,32,32", "--thread-list", "1,4", "--repeats", "5"]);
    let overhead = run(&["bench", "--op", "fpa_overhead", "--shape", "4,1,24,32,32", "--repeats", "5"]);
    let (conv_out, fpa_out, over_out) = (stdout(&conv), stdout(&fpa), stdout(&overhead));
    for line in conv_out.lines().chain(fpa_out.lines()).chain(over_out.lines()) {
        println!("  {line}");
    }
    let ratio = conv_out.lines().find(|l| l.contains("scaling")).and_then(|l| field(l, "median_ratio"));
    let throughput = |s: &str| s.lines().any(|l| field(l, "elems_per_s").is_some_and(|v| v > 0.0));
    let emitted = conv.status.success() && fpa.status.success() && overhead.status.success()
        && throughput(&conv_out) && throughput(&fpa_out) && over_out.contains("ratio=");
    let soft = match (cores >= 4, ratio) {
        (true, Some(r)) if r <= 0.7 => format!("soft target met: 4-thread/1-thread median {r:.3} <= 0.7"),
        (true, Some(r)) => format!("soft target MISSED: 4-thread/1-thread median {r:.3} > 0.7"),
        (false, Some(r)) => format!("soft target not applicable on a {cores}-core host (ratio {r:.3})"),
        (_, None) => "no scaling ratio reported".to_string(),
    };
    report(Outcome { id: 8, title: "performance report", passed: emitted, detail: soft, seconds: t.elapsed().as_secs_f64() });

    let failed = outcomes.iter().filter(|ok| !**ok).count();
    println!(
        "acceptance: {} passed, {failed} failed, {:.0}s total",
        outcomes.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
