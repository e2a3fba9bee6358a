use std::path::Path;
use std::process::ExitCode;

use clap::Parser;

use lsa::cli::{self, args::{Cli, Command}};
use lsa::config::RunConfig;

fn load_config(path: Option<&Path>, seed: Option<u64>) -> lsa::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> lsa::Result<()> {
    let mut cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::MakeData { out, force, train_count, test_count } => {
            if let Some(n) = train_count {
                cfg.data.train_count = n;
            }
            if let Some(n) = test_count {
                cfg.data.test_count = n;
            }
            let manifest = cli::cmd_make_data(&cfg, &out, force)?;
            println!(
                "wrote {} train + {} test clips to {}",
                manifest.split("train").len(),
                manifest.split("test").len(),
                out.display()
            );
        }
        Command::PretrainCodec { data, out } => {
            let loss = cli::cmd_pretrain_codec(&cfg, &data, &out)?;
            println!("codec pre-trained, final reconstruction loss {loss:.6}");
        }
        Command::Train {
            data,
            codec,
            out,
            schedule,
            variant,
            epochs,
            lambda_feat,
            learning_rate,
            batch_size,
        } => {
            if let Some(s) = schedule.as_deref() {
                cli::args::parse_schedule(s, &mut cfg.train)?;
            }
            if let Some(v) = variant.as_deref() {
                cfg.train.variant = cli::args::parse_variant(v)?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(l) = lambda_feat {
                cfg.train.lambda_feat = l;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = lr;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            let trainer = cli::cmd_train(&cfg, &data, codec.as_deref(), &out)?;
            let last = trainer.state.metric_history.last();
            println!(
                "trained {} steps; final total loss {}",
                trainer.state.global_step,
                last.map(|r| r.total.to_string()).unwrap_or_else(|| "n/a".into())
            );
        }
        Command::Generate { checkpoint, data, out } => {
            let n = cli::cmd_generate(&cfg, &checkpoint, &data, &out)?;
            println!("generated {n} clips into {}", out.display());
        }
        Command::Eval { generated, data, out } => {
            let report = cli::cmd_eval(&cfg, &generated, &data, &out)?;
            println!(
                "frechet_frame {:.6} frechet_clip {:.6} mAP {:.6} mIoU {:.6}",
                report.frechet_frame, report.frechet_clip, report.map, report.miou
            );
        }
        Command::RunAblation { data, out, seeds } => {
            let seeds = cli::args::parse_seeds(&seeds)?;
            let summary = cli::cmd_run_ablation(&cfg, &data, &out, &seeds)?;
            print!("{}", cli::format_ablation_table(&summary));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
