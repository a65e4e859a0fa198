//! Run the full phantom study with default settings and print the reports.

use nodule_cascade::experiment::{run_phantom_experiment, ExperimentConfig};

fn main() {
    let cfg = ExperimentConfig::default();
    let report = run_phantom_experiment(&cfg, &mut |m| eprintln!("{m}")).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        std::process::exit(1);
    });
    for (k, v) in &report.counts {
        println!("{k}: {v}");
    }
    print!("{}", report.seg_history.to_csv());
    for c in &report.classifiers {
        println!("{}", c.arch.as_str());
        print!("{}", c.history.to_csv());
    }
    println!("pixel AUC: {:.4}", report.pixel_auc());
    println!("slice-level:\n{}", report.slice_comparison.to_text());
    println!("case-level:\n{}", report.case_comparison.to_text());
    print!("{}", report.case_comparison.to_csv());
}
