use std::path::Path;
use std::process::Command;

fn backcalc(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_backcalc"))
        .args(args)
        .env("BACKCALC_OUT", out)
        .output()
        .expect("binary runs")
}

#[test]
fn fit_on_bundled_sample_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = backcalc(&["fit", "--ensemble", "2", "--seed", "5", "--set", "samples_per_draw=50", "--set", "k=15"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["incidence.csv", "r.csv", "peak_distribution.csv", "sanity_envelope.csv", "fit_report.txt", "incidence.svg"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("peak mode"), "{stdout}");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "model = basic\nensemble = 1\nk = 12\nsamples_per_draw = 40\n").unwrap();
    let out = backcalc(&["r", "--config", cfg.to_str().unwrap(), "--model", "incidence"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("fit_report.txt")).unwrap();
    assert!(report.starts_with("model: incidence"), "{report}");
}

#[test]
fn missing_dates_fail_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("gap.csv");
    std::fs::write(&data, "date,deaths\n2020-03-01,1\n2020-03-03,2\n").unwrap();
    let out = backcalc(&["fit", "--input", data.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("2020-03-02"));
}

#[test]
fn pcr_simulate_then_fit() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("pcr.csv");
    let out = backcalc(&["pcr", "simulate", "--days", "60", "--seed", "2", "-o", sim.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit_dir = dir.path().join("fit");
    let out = backcalc(&["pcr", "fit", sim.to_str().unwrap(), "--k", "10", "-o", fit_dir.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(fit_dir.join("pcr_fit.csv")).unwrap();
    assert_eq!(text.lines().count(), 61);
    assert!(text.starts_with("day,truth,positives,tested,fitted,lower,upper"));
}

#[test]
fn durations_build_feeds_a_fit() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("durations.csv");
    let out = backcalc(&["durations", "build", "--ensemble", "3", "-o", table.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let src = format!("file:{}", table.display());
    let out = backcalc(
        &["check", "sanity", "--durations", &src, "--set", "samples_per_draw=40", "--set", "k=12", "--set", "sanity_reps=20"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("duration draws: 3 fitted"));
}

#[test]
fn unknown_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = backcalc(&["fit", "--model", "sir"], dir.path());
    assert!(!out.status.success());
}
