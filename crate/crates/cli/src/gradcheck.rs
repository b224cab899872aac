//! The full finite-difference suite: kernels, GRU, both FPA variants and
//! the whole model.

use std::time::Instant;

use fpa3d::fpa::gradcase::FpaCase;
use fpa3d::fpa::{FpaConfig, FpaVariant};
use fpa3d::kernels::gradcheck::{gradcheck, kernel_suite, GradCase, GradReport, GradcheckOptions};
use fpa3d::model::gradcase::{tiny_config, LipNetCase};
use fpa3d::model::gru::gradcase::BiGruCase;
use fpa3d::model::FpaPosition;
use fpa3d::Shape5;

use crate::{CliError, CliResult, GradcheckArgs};

/// Relative-error bound for single ops and modules.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Looser bound for the whole model, whose loss chains every op.
pub const MODEL_TOLERANCE: f64 = 1e-3;

pub fn suite() -> fpa3d::Result<Vec<(Box<dyn GradCase>, GradcheckOptions)>> {
    let op = GradcheckOptions { tolerance: OP_TOLERANCE, ..Default::default() };
    let sampled = GradcheckOptions { max_coords: Some(30), ..op.clone() };
    let mut cases: Vec<(Box<dyn GradCase>, GradcheckOptions)> =
        kernel_suite()?.into_iter().map(|c| (c, op.clone())).collect();
    cases.push((Box::new(BiGruCase::random(5, 3, 4, 21)), op.clone()));
    for (variant, shape) in [
        (FpaVariant::Spatial2d, Shape5::new(1, 2, 3, 12, 12)?),
        (FpaVariant::Spatiotemporal3d, Shape5::new(1, 2, 8, 12, 12)?),
    ] {
        cases.push((Box::new(FpaCase::random(FpaConfig::with_variant(variant), shape, 11)?), sampled.clone()));
    }
    let model = tiny_config(&[(FpaPosition::F2, FpaVariant::Spatiotemporal3d)]);
    cases.push((
        Box::new(LipNetCase::random(model, 2, 5)?),
        GradcheckOptions { tolerance: MODEL_TOLERANCE, ..Default::default() },
    ));
    Ok(cases)
}

pub fn run_suite(filter: Option<&str>) -> CliResult<Vec<GradReport>> {
    let mut reports = Vec::new();
    for (case, opts) in suite()? {
        if filter.is_some_and(|f| !case.name().contains(f)) {
            continue;
        }
        reports.push(gradcheck(case.as_ref(), &opts)?);
    }
    Ok(reports)
}

pub fn run(args: &GradcheckArgs) -> CliResult<()> {
    let started = Instant::now();
    let reports = run_suite(args.filter.as_deref())?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    for r in &reports {
        println!("{r}");
    }
    let worst = reports.iter().map(GradReport::max_rel_err).fold(0.0, f64::max);
    println!(
        "gradcheck cases={} failed={failed} worst_rel_err={worst:.3e} seconds={:.1}",
        reports.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} gradient checks failed")));
    }
    Ok(())
}
