use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use vminet::bench::{bench_scaling, write_bench_csv, BenchKernel, BenchOptions, DEFAULT_DIM};
use vminet::train::{evaluate, load_checkpoint, load_cifar_batches, train, Split, TrainConfig};
use vminet::verify::{run_verify_suite, VerifyOptions};

#[derive(Parser, Debug)]
#[command(
    name = "vminet",
    version,
    about = "VMINet training, evaluation, scaling benchmarks and self-checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a key = value config file.
    Train {
        /// Config file; see the README for the accepted keys.
        #[arg(long)]
        config: PathBuf,
    },
    /// Report top-1 accuracy of a checkpoint on a CIFAR-10-format file or directory.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// CIFAR-10 binary batch file, or a directory of `*.bin` batches.
        #[arg(long)]
        data: PathBuf,
        /// Images per forward pass.
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Time attention kernels over sequence lengths and fit a log-log slope.
    Bench {
        /// Kernel names, comma separated: softmax_sa, separable_sa, vmi_sa_matrix, vmi_sa_recurrent.
        #[arg(long, value_delimiter = ',', default_value = "vmi_sa_matrix")]
        kernel: Vec<String>,
        /// Strictly increasing sequence lengths, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        lengths: Vec<usize>,
        /// Feature dimension.
        #[arg(long, default_value_t = DEFAULT_DIM)]
        dim: usize,
        /// Timed repetitions per length (at least 5).
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Output CSV with header kernel,L,D,median_s,iqr_s.
        #[arg(long)]
        out: PathBuf,
        /// Seed for the random inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the self-check suites; exits 1 if any suite fails.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random cases per suite.
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
}

fn run(cmd: Command) -> vminet::Result<bool> {
    match cmd {
        Command::Train { config } => {
            let cfg = TrainConfig::from_file(&config)?;
            let history = train(&cfg)?;
            if let Some(last) = history.epochs.last() {
                println!(
                    "epoch {} train_loss {} train_acc {} val_acc {}",
                    last.epoch, last.train_loss, last.train_acc, last.val_acc
                );
            }
            println!("metrics {}", history.metrics_path.display());
            println!("checkpoint {}", history.checkpoint_path.display());
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            data,
            batch_size,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let ds = load_cifar_batches(&data, Split::Val)?;
            info!("evaluating {} images", ds.len());
            let acc = evaluate(&ckpt.model, &ds, batch_size)?;
            println!("accuracy {acc}");
            Ok(true)
        }
        Command::Bench {
            kernel,
            lengths,
            dim,
            reps,
            out,
            seed,
        } => {
            let opts = BenchOptions {
                reps,
                seed,
                ..BenchOptions::default()
            };
            let mut reports = Vec::new();
            for name in &kernel {
                let k: BenchKernel = name.parse()?;
                info!("benchmarking {k}");
                let r = bench_scaling(k, &lengths, dim, &opts)?;
                print!("{r}");
                reports.push(r);
            }
            write_bench_csv(&out, &reports)?;
            Ok(true)
        }
        Command::Verify { seed, trials } => {
            let report = run_verify_suite(&VerifyOptions {
                seed,
                trials,
                ..VerifyOptions::default()
            });
            print!("{report}");
            Ok(report.all_passed())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
