//! Batch driver for the two-stage nodule pipeline.

mod commands;
mod config;
mod data;
mod error;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;

#[derive(Parser, Debug)]
#[command(name = "nodule-cascade", version, about = "Lung nodule screening and classification on CT volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic labelled dataset.
    GenPhantom(GenPhantomArgs),
    /// Rasterize annotation tables into mask volumes and slice lists.
    BuildMasks(BuildMasksArgs),
    /// Train the segmentation network.
    TrainSeg(TrainSegArgs),
    /// Flag suspicious slices with a segmentation checkpoint.
    Screen(ScreenArgs),
    /// Train a classifier on screened, fused slices.
    TrainCls(TrainClsArgs),
    /// Run the cascade and write per-case verdicts.
    Infer(InferArgs),
    /// Score verdicts and segmentation maps.
    Eval(EvalArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenPhantom(a) => gen_phantom(a),
        Command::BuildMasks(a) => build_masks(a),
        Command::TrainSeg(a) => train_seg(a),
        Command::Screen(a) => screen(a),
        Command::TrainCls(a) => train_cls(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
