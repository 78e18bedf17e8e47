//! One pass/fail line per acceptance criterion. Exits non-zero if any fails.

mod gradients;
mod kernels;
mod properties;
mod reference;
mod service;

use voxsnap_acceptance::Report;
use voxsnap_core::dataset::Split;

const NEEDS_REFERENCE: &str = "reference run unavailable";

fn main() {
    let mut report = Report::default();
    report.run("1", "gradient checks", gradients::criterion);
    report.run("2", "convolution oracles", kernels::criterion);
    report.run("8", "monotone refinement", properties::monotonicity);
    report.run("9", "postprocess properties", properties::postprocess);

    eprintln!("training the reference pipeline");
    let reference = reference::Reference::train();
    let r = reference.as_ref().map_err(|e| format!("{NEEDS_REFERENCE}: {e}"));
    let with = |f: fn(&reference::Reference) -> voxsnap_acceptance::Outcome| {
        let r = r.clone();
        move || f(r?)
    };
    report.run("3", "reference GAN", with(reference::gan));
    report.run("P", "projection training loss", with(reference::projection_loss));
    report.run("R", "realism-only refinement", with(reference::realism_only));
    report.run("4", "projection beats random latents", with(reference::projection_quality));
    report.run("5", "two-stage realism", with(reference::two_stage));
    report.run("6", "latent distance correlation", with(reference::correlation));
    report.run("7", "snap vs gradient baseline", with(reference::baseline));
    report.run("10", "snap latency", with(reference::latency));
    report.run("11", "service contract", || {
        let r = r.clone()?;
        let input = r.run.dataset.grids(Split::Heldout)[0].clone();
        service::criterion(&r.run.bundle, &input)
    });

    let failed = report.failed();
    if failed.is_empty() {
        eprintln!("all criteria passed");
    } else {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
