//! End-to-end checks of the command-line interface: synthesis to files,
//! file ingestion back into training and evaluation, and the exit-code
//! contract (1 for invalid inputs, 2 for runtime failures).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn muforce(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muforce"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("muforce_cli_{name}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const SMALL_CONF: &str = "duration_s = 6\nn_flexion_units = 6\nn_extension_units = 3\n\
                          epochs = 3\nn_repetitions = 2\nseed = 9\n";

#[test]
fn synth_eval_roundtrip_through_files() {
    let dir = tmp_dir("roundtrip");
    std::fs::write(dir.join("small.conf"), SMALL_CONF).unwrap();

    let out = muforce(&dir, &["synth", "--config", "small.conf", "--out-dir", "data"]);
    assert!(out.status.success(), "synth: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("data/index_spikes.csv").is_file());
    assert!(dir.join("data/index_force.csv").is_file());

    // Evaluating from the written files must match evaluating the
    // synthesized session directly: same data, same seeds.
    let from_files = muforce(
        &dir,
        &[
            "eval",
            "--config",
            "small.conf",
            "--spikes",
            "data/index_spikes.csv",
            "--force",
            "data/index_force.csv",
            "--out-dir",
            "res_files",
        ],
    );
    assert!(
        from_files.status.success(),
        "eval files: {}",
        String::from_utf8_lossy(&from_files.stderr)
    );
    let synth_direct = muforce(
        &dir,
        &["eval", "--config", "small.conf", "--out-dir", "res_synth"],
    );
    assert!(synth_direct.status.success());
    let a = std::fs::read_to_string(dir.join("res_files/runs.csv")).unwrap();
    let b = std::fs::read_to_string(dir.join("res_synth/runs.csv")).unwrap();
    assert_eq!(a, b, "file ingestion changed the scores");
    assert!(a.lines().count() > 1);

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn invalid_input_exits_one() {
    let dir = tmp_dir("invalid");
    std::fs::write(dir.join("small.conf"), SMALL_CONF).unwrap();
    std::fs::write(
        dir.join("force.csv"),
        "time_s,force_pct_mvc\n0.000000,0\n0.010000,1\n0.020000,2\n",
    )
    .unwrap();
    // Grid out of range: a parse-level validation failure.
    std::fs::write(
        dir.join("bad.csv"),
        "mu_id,grid,finger,trial,time_s\n0,9,index,1,0.5\n",
    )
    .unwrap();
    let out = muforce(
        &dir,
        &[
            "eval",
            "--config",
            "small.conf",
            "--spikes",
            "bad.csv",
            "--force",
            "force.csv",
            "--out-dir",
            "res",
        ],
    );
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    // A config naming a nonexistent trial split is invalid too.
    std::fs::write(dir.join("bad.conf"), "train_trial = 7\n").unwrap();
    let out = muforce(&dir, &["eval", "--config", "bad.conf", "--out-dir", "res"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn drop_invalid_skips_low_rate_units() {
    let dir = tmp_dir("drop");
    // 3 s of force; one healthy 10 Hz unit per grid pair, one unit with a
    // single spike (rate far below the physiological band).
    let mut force = String::from("time_s,force_pct_mvc\n");
    for i in 0..300 {
        force.push_str(&format!("{:.6},{}\n", i as f64 / 100.0, 10));
    }
    std::fs::write(dir.join("force.csv"), force).unwrap();
    let mut spikes = String::from("mu_id,grid,finger,trial,time_s\n");
    for trial in 1..=2 {
        for (mu, grid) in [(0, 1), (1, 3)] {
            for k in 1..=30 {
                spikes.push_str(&format!("{mu},{grid},index,{trial},{:.9}\n", k as f64 / 10.0));
            }
        }
        // The broken unit: one spike in the whole trial.
        spikes.push_str(&format!("7,1,index,{trial},1.0\n"));
    }
    std::fs::write(dir.join("spikes.csv"), spikes).unwrap();
    std::fs::write(
        dir.join("cfg.conf"),
        "epochs = 1\nn_repetitions = 1\nn_trials = 2\ntest_trials = 2\n\
         flexion_neurons = 2\nextension_neurons = 2\n",
    )
    .unwrap();

    let strict = muforce(
        &dir,
        &[
            "eval", "--config", "cfg.conf", "--spikes", "spikes.csv", "--force", "force.csv",
            "--out-dir", "res",
        ],
    );
    assert_eq!(strict.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&strict.stderr).contains("--drop-invalid"));

    let lenient = muforce(
        &dir,
        &[
            "eval", "--config", "cfg.conf", "--spikes", "spikes.csv", "--force", "force.csv",
            "--out-dir", "res", "--drop-invalid",
        ],
    );
    assert!(
        lenient.status.success(),
        "{}",
        String::from_utf8_lossy(&lenient.stderr)
    );
    assert!(String::from_utf8_lossy(&lenient.stderr).contains("dropping unit 7"));

    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn config_writer_roundtrips() {
    let dir = tmp_dir("conf");
    let out = muforce(&dir, &["config", "--out", "full.conf"]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.join("full.conf")).unwrap();
    assert!(text.contains("epochs = 30"));
    assert!(text.contains("core.0."));
    // The written config parses back without complaint.
    let out = muforce(&dir, &["config", "--config", "full.conf", "--out", "again.conf"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let again = std::fs::read_to_string(dir.join("again.conf")).unwrap();
    assert_eq!(text, again);
    let _ = std::fs::remove_dir_all(&dir);
}
