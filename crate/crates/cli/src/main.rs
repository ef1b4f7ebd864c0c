//! `muforce`: spike-to-force decoding on an emulated neuromorphic device.
//!
//! Everything hangs off a key-value config file (see `muforce config`);
//! subcommands either synthesize sessions, train the decoder, decode
//! trials, or run the whole benchmark and write its result tables.
//!
//! Exit codes: 0 on success, 1 when inputs fail validation (malformed
//! files, inconsistent trials, out-of-range parameters), 2 when a run
//! fails at runtime. Usage errors exit with clap's own code (2).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use muforce_core::baseline::LinearModel;
use muforce_core::harness::{
    build_inference_topology, decode_trial, export_plot_data, run_experiment,
    run_experiment_with_data, sort_channels, synth_finger_data, DecoderKind, ExperimentConfig,
    FingerData, TrialData,
};
use muforce_core::io::{
    read_force_csv, read_spike_csv, write_force_csv, write_output_spike_csv, write_spike_csv,
    KvConfig,
};
use muforce_core::seeds::{derive_seed, tag};
use muforce_core::signal::{resample_linear, rmse, validate_train, Finger, MuSpikeTrain};
use muforce_core::trainer::{
    read_checkpoint, train_decoder, DecoderTraining, TrainOutcome, RATE_SAMPLE_RATE,
};
use muforce_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "muforce",
    about = "Continuous finger-force decoding from motor-unit spikes on an emulated neuromorphic device",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Key-value config file; defaults apply for every key it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Decode for this finger (default: the config's first).
    #[arg(long)]
    finger: Option<Finger>,
}

#[derive(Args)]
struct FileData {
    /// Motor-unit spike CSV (mu_id,grid,finger,trial,time_s). When given
    /// (with --force), trials come from files instead of synthesis.
    #[arg(long, requires = "force")]
    spikes: Option<PathBuf>,
    /// Force CSV (time_s,force_pct_mvc) shared by every trial.
    #[arg(long, requires = "spikes")]
    force: Option<PathBuf>,
    /// Drop spike trains that fail validation instead of aborting.
    #[arg(long)]
    drop_invalid: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the full default config (or the resolved one) to a file.
    Config {
        #[command(flatten)]
        common: Common,
        /// Destination path.
        #[arg(long, default_value = "muforce.conf")]
        out: PathBuf,
    },
    /// Synthesize a session and write its spike and force CSVs.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long, default_value = "data")]
        out_dir: PathBuf,
    },
    /// Train the decoder and write per-epoch and final checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: FileData,
        /// Checkpoint directory.
        #[arg(long, default_value = "checkpoints")]
        out_dir: PathBuf,
    },
    /// Decode one trial with trained checkpoints.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: FileData,
        /// Flexion-population checkpoint.
        #[arg(long)]
        flexion_ckpt: PathBuf,
        /// Extension-population checkpoint.
        #[arg(long)]
        extension_ckpt: PathBuf,
        /// 1-based trial to decode.
        #[arg(long, default_value_t = 2)]
        trial: u32,
        /// Predicted-force CSV destination.
        #[arg(long, default_value = "prediction.csv")]
        out: PathBuf,
        /// Also write the device's output spikes here.
        #[arg(long)]
        spikes_out: Option<PathBuf>,
    },
    /// Fit the windowed linear-regression baseline and score it.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: FileData,
        /// Output directory for the model and per-trial predictions.
        #[arg(long, default_value = "baseline")]
        out_dir: PathBuf,
    },
    /// Run the full benchmark: train, decode every test trial with
    /// repetitions, fit the baseline, and write the result table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: FileData,
        /// Where runs.csv (and plots) land.
        #[arg(long, default_value = "results")]
        out_dir: PathBuf,
        /// Also write per-trial plot CSVs of repetition 1.
        #[arg(long)]
        plot: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    };
    std::process::exit(code);
}

/// Resolve the experiment config: file (when given), then CLI overrides.
fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut kv = match &common.config {
        Some(path) => KvConfig::load(path)?,
        None => KvConfig::default(),
    };
    if let Some(seed) = common.seed {
        kv.set("seed", seed);
    }
    if let Some(finger) = common.finger {
        kv.set("fingers", finger.name());
    }
    ExperimentConfig::from_kv(&kv)
}

/// Assemble per-trial data from spike and force files. Every trial in the
/// file shares the force profile, mirroring the repeated-trial protocol.
fn load_finger_data(
    finger: Finger,
    spikes_path: &Path,
    force_path: &Path,
    drop_invalid: bool,
) -> Result<FingerData> {
    let force = read_force_csv(force_path)?;
    let all = read_spike_csv(spikes_path)?;
    let duration = force.duration();
    let mut kept: Vec<MuSpikeTrain> = Vec::new();
    for train in all {
        if train.finger != finger {
            continue;
        }
        let v = validate_train(&train, duration)?;
        match v.rejection {
            None => kept.push(train),
            Some(reason) => {
                if drop_invalid {
                    eprintln!(
                        "dropping unit {} (grid {}, trial {}): {reason}",
                        train.mu_id, train.grid, train.trial
                    );
                } else {
                    return Err(Error::invalid(format!(
                        "unit {} (grid {}, trial {}) failed validation: {reason}; \
                         rerun with --drop-invalid to skip such units",
                        train.mu_id, train.grid, train.trial
                    )));
                }
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::invalid(format!(
            "no valid spike trains for finger {finger} in {}",
            spikes_path.display()
        )));
    }
    let mut trial_ids: Vec<u32> = kept.iter().map(|t| t.trial).collect();
    trial_ids.sort_unstable();
    trial_ids.dedup();
    let trials = trial_ids
        .into_iter()
        .map(|t| {
            let mut trains: Vec<MuSpikeTrain> =
                kept.iter().filter(|d| d.trial == t).cloned().collect();
            sort_channels(&mut trains);
            TrialData {
                trial: t,
                trains,
                force: force.clone(),
            }
        })
        .collect();
    Ok(FingerData { finger, trials })
}

/// Session data for one finger: files when given, synthesis otherwise.
fn resolve_data(cfg: &ExperimentConfig, finger: Finger, data: &FileData) -> Result<FingerData> {
    match (&data.spikes, &data.force) {
        (Some(s), Some(f)) => load_finger_data(finger, s, f, data.drop_invalid),
        _ => synth_finger_data(cfg, finger),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Config { common, out } => {
            let cfg = load_config(&common)?;
            cfg.to_kv().save(&out)?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Cmd::Synth { common, out_dir } => {
            let cfg = load_config(&common)?;
            let finger = common.finger.unwrap_or(cfg.fingers[0]);
            let data = synth_finger_data(&cfg, finger)?;
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| Error::invalid(format!("creating {}: {e}", out_dir.display())))?;
            let all: Vec<MuSpikeTrain> = data
                .trials
                .iter()
                .flat_map(|t| t.trains.iter().cloned())
                .collect();
            let spikes_path = out_dir.join(format!("{finger}_spikes.csv"));
            let force_path = out_dir.join(format!("{finger}_force.csv"));
            write_spike_csv(&spikes_path, &all)?;
            write_force_csv(&force_path, &data.trials[0].force)?;
            let n_units = data.trials[0].trains.len();
            println!(
                "wrote {} ({} trials x {n_units} units) and {}",
                spikes_path.display(),
                data.trials.len(),
                force_path.display()
            );
            Ok(())
        }

        Cmd::Train { common, data, out_dir } => {
            let mut cfg = load_config(&common)?;
            cfg.checkpoint_dir = Some(out_dir.clone());
            let finger = common.finger.unwrap_or(cfg.fingers[0]);
            let fd = resolve_data(&cfg, finger, &data)?;
            let train_data = fd
                .trial(cfg.train_trial)
                .ok_or_else(|| Error::invalid(format!("trial {} missing", cfg.train_trial)))?;
            let flex_handle = cfg.handle_for(&cfg.flexion)?;
            let ext_handle = cfg.handle_for(&cfg.extension)?;
            let training = train_decoder(
                &train_data.trains,
                &train_data.force,
                &cfg.flexion,
                &cfg.extension,
                &flex_handle,
                &ext_handle,
                &cfg.train_options(finger),
            )?;
            for (name, outcome) in [
                ("flexion", &training.flexion),
                ("extension", &training.extension),
            ] {
                let path = out_dir.join(format!("{name}_final.ckpt"));
                muforce_core::trainer::write_checkpoint(&path, &outcome.state, &outcome.w)?;
                let hist = outcome.loss_history();
                println!(
                    "{name}: {} epochs, loss {:.2} -> {:.2}, checkpoint {}",
                    hist.len(),
                    hist.first().copied().unwrap_or(f64::NAN),
                    hist.last().copied().unwrap_or(f64::NAN),
                    path.display()
                );
            }
            Ok(())
        }

        Cmd::Infer {
            common,
            data,
            flexion_ckpt,
            extension_ckpt,
            trial,
            out,
            spikes_out,
        } => {
            let cfg = load_config(&common)?;
            let finger = common.finger.unwrap_or(cfg.fingers[0]);
            let fd = resolve_data(&cfg, finger, &data)?;
            let trial_data = fd
                .trial(trial)
                .ok_or_else(|| Error::invalid(format!("trial {trial} not present")))?;
            let (flex_state, flex_w) = read_checkpoint(&flexion_ckpt)?;
            let (ext_state, ext_w) = read_checkpoint(&extension_ckpt)?;
            let training = DecoderTraining {
                flexion: TrainOutcome {
                    state: flex_state,
                    w: flex_w,
                },
                extension: TrainOutcome {
                    state: ext_state,
                    w: ext_w,
                },
            };
            let setup = build_inference_topology(&cfg, &training, &trial_data.trains)?;
            let duration = trial_data.force.duration();
            let n_readout = (RATE_SAMPLE_RATE * duration).round() as usize;
            let truth = resample_linear(&trial_data.force, RATE_SAMPLE_RATE, 0.0, n_readout)?;
            let noise_seed = derive_seed(
                cfg.seed,
                &[tag::REPETITION, finger.index(), trial as u64, 1],
            );
            let outcome = decode_trial(&setup, &trial_data.trains, &truth, 1, noise_seed)?;
            write_force_csv(&out, &outcome.pred)?;
            if let Some(path) = &spikes_out {
                write_output_spike_csv(path, &outcome.spikes)?;
            }
            println!(
                "trial {trial}: rmse {:.2} %MVC, prediction in {}",
                outcome.rmse_pct_mvc,
                out.display()
            );
            Ok(())
        }

        Cmd::Baseline { common, data, out_dir } => {
            let cfg = load_config(&common)?;
            let finger = common.finger.unwrap_or(cfg.fingers[0]);
            let fd = resolve_data(&cfg, finger, &data)?;
            let train_data = fd
                .trial(cfg.train_trial)
                .ok_or_else(|| Error::invalid(format!("trial {} missing", cfg.train_trial)))?;
            let model = LinearModel::fit(
                &train_data.trains,
                &train_data.force,
                cfg.baseline_window_len,
                cfg.baseline_hop,
            )?;
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| Error::invalid(format!("creating {}: {e}", out_dir.display())))?;
            let model_path = out_dir.join("baseline_model.csv");
            model.save(&model_path)?;
            println!("fitted on trial {}, model in {}", cfg.train_trial, model_path.display());
            for &t in &cfg.test_trials {
                let trial_data = fd
                    .trial(t)
                    .ok_or_else(|| Error::invalid(format!("trial {t} missing")))?;
                let pred = model.predict(&trial_data.trains, trial_data.force.duration())?;
                let truth = resample_linear(
                    &trial_data.force,
                    pred.sample_rate,
                    pred.t0,
                    pred.samples.len(),
                )?;
                let score = rmse(&pred, &truth)?;
                let path = out_dir.join(format!("baseline_trial{t}.csv"));
                write_force_csv(&path, &pred)?;
                println!("trial {t}: rmse {score:.2} %MVC, prediction in {}", path.display());
            }
            Ok(())
        }

        Cmd::Eval {
            common,
            data,
            out_dir,
            plot,
        } => {
            let cfg = load_config(&common)?;
            let report = match (&data.spikes, &data.force) {
                (Some(_), Some(_)) => {
                    let finger = common.finger.unwrap_or(cfg.fingers[0]);
                    let fd = resolve_data(&cfg, finger, &data)?;
                    let mut file_cfg = cfg.clone();
                    file_cfg.fingers = vec![finger];
                    run_experiment_with_data(&file_cfg, &[fd])?
                }
                _ => run_experiment(&cfg)?,
            };
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| Error::invalid(format!("creating {}: {e}", out_dir.display())))?;
            let runs_path = out_dir.join("runs.csv");
            report.table.save(&runs_path)?;
            print!("{}", report.summary_string());
            println!("result table in {}", runs_path.display());
            if plot {
                for fr in &report.fingers {
                    for trial in &fr.trials {
                        if let Some(rep) = trial.reps.first() {
                            let path = out_dir
                                .join(format!("plot_{}_trial{}.csv", fr.finger, trial.trial));
                            export_plot_data(trial, rep.repetition, &path)?;
                            println!("plot data in {}", path.display());
                        }
                    }
                }
            }
            // Make the headline comparison explicit on stdout.
            for fr in &report.fingers {
                for trial in &fr.trials {
                    if let (Some((neu, _, _)), Some((base, _, _))) = (
                        report.table.pooled_rmse(fr.finger, trial.trial, DecoderKind::Neuromorphic),
                        report.table.pooled_rmse(fr.finger, trial.trial, DecoderKind::Baseline),
                    ) {
                        println!(
                            "finger {} trial {}: neuromorphic {neu:.2} %MVC vs baseline {base:.2} %MVC",
                            fr.finger, trial.trial
                        );
                    }
                }
            }
            Ok(())
        }
    }
}
