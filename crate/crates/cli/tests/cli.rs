use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};

use gpssm::eval::{kink_f, kink_system_generate};
use gpssm::model::GpssmModel;
use gpssm::sparse::{optimal_qu, stats_from_states, InducingKernel, InducingPosterior};
use gpssm::training::TrainingState;
use gpssm::{KernelFamily, KernelSpec};
use gpssm_cli::archive::{ModelArchive, Provenance};
use gpssm_cli::config::Config;

fn gpssm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpssm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn series_csv(prefix: &str, rows: &[DVector<f64>]) -> String {
    let d = rows[0].len();
    let mut text = (1..=d).map(|i| format!("{prefix}_{i}")).collect::<Vec<_>>().join(",");
    text.push('\n');
    for r in rows {
        text.push_str(&r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        text.push('\n');
    }
    text
}

fn read_table(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

/// Kink-system posterior fitted directly from latent states.
fn kink_archive(sigma_scale: Option<f64>) -> ModelArchive {
    let z: Vec<DVector<f64>> = (0..12).map(|i| DVector::from_element(1, -6.0 + 1.2 * i as f64)).collect();
    let model = GpssmModel::free_gaussian(
        KernelSpec::isotropic(KernelFamily::Matern32, 1, 1.5, 4.0).unwrap(),
        DVector::from_element(1, 1.0),
        DVector::from_element(1, 1.0),
        z,
    )
    .unwrap();
    let kuu = InducingKernel::new(&model).unwrap();
    let traj = kink_system_generate::<f64>(2000, 11).unwrap();
    let mut q = optimal_qu(&stats_from_states(&model, &traj).unwrap(), &model, &kuu).unwrap();
    if let Some(scale) = sigma_scale {
        q = InducingPosterior::from_moments(q.mu().clone(), vec![DMatrix::identity(12, 12) * scale]).unwrap();
    }
    let mut state = TrainingState::new(model, q, 7).unwrap();
    state.iteration = 3;
    state.elbo_trace = vec![-1000.5, -990.25, -989.125];
    ModelArchive {
        state,
        provenance: Provenance {
            config_fingerprint: "test".into(),
            data_hash: "none".into(),
            seeds: vec![7, u64::MAX],
            train_time_s: 1.5,
        },
    }
}

const SMALL_TRAINING: &str = "
[training]
particles = 100
lag = 5
max_iters = 3
elbo_tolerance = 0.0

[model]
num_inducing = 6
";

#[test]
fn dump_defaults_round_trips_through_the_parser() {
    let out = gpssm(&["dump-defaults"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(Config::parse(&text).unwrap(), Config::default());
    assert!(text.contains("[training.lambda]"));
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("[training]\nparticlez = 10\n", "training"),
        ("[training]\nparticles = 1\n", "n_particles"),
        ("[simulate]\nhorizon = 0\n", "simulate.horizon"),
        ("[model]\nkernel = \"cubic\"\n", "model.kernel"),
        ("threads = 0\n", "threads"),
        ("[predict]\ngrid_lo = 3.0\ngrid_hi = 1.0\n", "predict.grid_lo"),
    ];
    for (text, needle) in cases {
        let cfg = write(dir.path(), "bad.toml", text);
        let out = gpssm(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
        assert_eq!(code(&out), 2, "{text}");
        assert!(stderr(&out).contains(needle), "{text}: {}", stderr(&out));
    }
    let out = gpssm(&["simulate", "--config", "/nonexistent.toml", "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&gpssm(&["frobnicate"])), 2);
    assert_eq!(code(&gpssm(&["simulate"])), 2);
}

#[test]
fn simulate_prior_draws_distinct_reproducible_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sim.toml",
        "seed = 40\n[model]\nstate_dim = 2\n[simulate]\nhorizon = 200\ncount = 4\nprocess_noise = 0.01\n",
    );
    let a = dir.path().join("a");
    let out = gpssm(&["simulate", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut summaries = Vec::new();
    for k in 0..4 {
        let (header, rows) = read_table(&a.join(format!("states_{k}.csv")));
        assert_eq!(header, ["x_1", "x_2"]);
        assert_eq!(rows.len(), 201);
        let (_, obs) = read_table(&a.join(format!("observations_{k}.csv")));
        assert_eq!(obs.len(), 200);
        let mean: Vec<f64> = (0..2).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 201.0).collect();
        summaries.push(mean);
    }
    for i in 0..4 {
        for j in 0..i {
            let gap = (summaries[i][0] - summaries[j][0]).abs() + (summaries[i][1] - summaries[j][1]).abs();
            assert!(gap > 1e-3, "trajectories {i} and {j} look alike");
        }
    }
    let b = dir.path().join("b");
    assert_eq!(code(&gpssm(&["simulate", "--config", s(&cfg), "--out", s(&b)])), 0);
    for k in 0..4 {
        let name = format!("states_{k}.csv");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
    let c = dir.path().join("c");
    assert_eq!(code(&gpssm(&["simulate", "--config", s(&cfg), "--out", s(&c), "--seed", "41"])), 0);
    assert_eq!(
        std::fs::read(a.join("states_1.csv")).unwrap(),
        std::fs::read(c.join("states_0.csv")).unwrap()
    );
}

#[test]
fn train_streams_progress_and_resume_continues_the_count() {
    let dir = tempfile::tempdir().unwrap();
    let traj = kink_system_generate::<f64>(80, 3).unwrap();
    let data = write(dir.path(), "y.csv", &series_csv("y", &traj.observations));
    let cfg = write(dir.path(), "t.toml", SMALL_TRAINING);
    let arch = dir.path().join("m.toml");
    let out = gpssm(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&arch), "--threads", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for (i, rec) in lines.iter().enumerate() {
        assert_eq!(rec["iter"], i);
        assert!(rec["elbo"].as_f64().unwrap().is_finite());
        assert!(rec["ess_min"].as_f64().unwrap() > 0.0);
        assert_eq!(rec["theta_digest"].as_str().unwrap().len(), 16);
    }
    let first = ModelArchive::load(&arch).unwrap();
    assert_eq!(first.state.iteration, 3);

    let again = dir.path().join("m2.toml");
    let out = gpssm(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&again), "--threads", "1"]);
    assert_eq!(code(&out), 0);
    let strip = |p: &Path| -> Vec<String> {
        std::fs::read_to_string(p)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("train_time_s"))
            .map(String::from)
            .collect()
    };
    assert!(strip(&again) == strip(&arch), "thread count changed the archive");

    let cfg5 = write(dir.path(), "t5.toml", &SMALL_TRAINING.replace("max_iters = 3", "max_iters = 5"));
    let resumed = dir.path().join("m3.toml");
    let out = gpssm(&[
        "train", "--config", s(&cfg5), "--data", s(&data), "--archive", s(&arch), "--out", s(&resumed),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let iters: Vec<u64> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["iter"].as_u64().unwrap())
        .collect();
    assert_eq!(iters, [3, 4]);
    let r = ModelArchive::load(&resumed).unwrap();
    assert_eq!(r.state.elbo_trace.len(), 5);
    assert_eq!(r.state.elbo_trace[..3], first.state.elbo_trace[..]);
}

#[test]
fn bad_data_is_rejected_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "t.toml", SMALL_TRAINING);
    let arch = dir.path().join("m.toml");
    for (text, needle) in [
        ("y_1\n1.0\n2.0\nx\n", "line 4"),
        ("y_1\n1.0\nNaN\n", "line 3"),
        ("y_1,y_2\n1,2\n3\n", "line 3"),
        ("value\n1\n", "line 1"),
        ("y_1\n", "no observations"),
    ] {
        let data = write(dir.path(), "y.csv", text);
        let out = gpssm(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&arch)]);
        assert_eq!(code(&out), 3, "{text}");
        assert!(stderr(&out).contains(needle), "{text}: {}", stderr(&out));
    }
    assert!(!arch.exists());
}

#[test]
fn archive_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = kink_archive(None);
    a.state.filter_state = Some(gpssm::smoothing::FilterState {
        dim: 1,
        particles: vec![0.1, -2.5e-300, f64::MAX],
        log_weights: vec![-1.0986122886681098; 3],
    });
    let p = dir.path().join("a.toml");
    a.save(&p).unwrap();
    let b = ModelArchive::load(&p).unwrap();
    assert_eq!(a, b);
    let bits = |m: &DMatrix<f64>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a.state.q_u.eta1()), bits(b.state.q_u.eta1()));
    assert_eq!(bits(&a.state.q_u.sigma()[0]), bits(&b.state.q_u.sigma()[0]));
    let q = dir.path().join("b.toml");
    b.save(&q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 2);
}

#[test]
fn archive_version_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.toml");
    kink_archive(None).save(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap().replace("format_version = 1", "format_version = 2");
    std::fs::write(&p, text).unwrap();
    let err = ModelArchive::load(&p).unwrap_err();
    assert!(err.message.contains("version 2"), "{}", err.message);
    let out = gpssm(&["predict", "--archive", s(&p), "--out", s(&dir.path().join("o.csv"))]);
    assert_eq!(code(&out), 3);
}

#[test]
fn predictive_band_covers_the_kink() {
    let dir = tempfile::tempdir().unwrap();
    let arch = dir.path().join("a.toml");
    kink_archive(None).save(&arch).unwrap();
    let out_csv = dir.path().join("band.csv");
    let out = gpssm(&["predict", "--archive", s(&arch), "--out", s(&out_csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (header, rows) = read_table(&out_csv);
    assert_eq!(header, ["x_1", "mean_1", "std_1", "lower_1", "upper_1"]);
    assert_eq!(rows.len(), 200);
    assert_eq!((rows[0][0], rows[199][0]), (-5.0, 8.0));
    // Data-dense region: grid points with at least 20 training states within 0.25.
    let states = kink_system_generate::<f64>(2000, 11).unwrap().states;
    let dense: Vec<&Vec<f64>> = rows
        .iter()
        .filter(|r| states.iter().filter(|x| (x[0] - r[0]).abs() < 0.25).count() >= 20)
        .collect();
    assert!(dense.len() > 50);
    let covered = dense.iter().filter(|r| r[3] <= kink_f(r[0]) && kink_f(r[0]) <= r[4]).count();
    // The band is epistemic only; off-grid interpolation error at the kink leaves a few misses.
    assert!(covered as f64 >= 0.85 * dense.len() as f64, "{covered} of {}", dense.len());
}

#[test]
fn predict_validates_its_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let arch = dir.path().join("a.toml");
    kink_archive(Some(1e-12)).save(&arch).unwrap();
    let out_csv = dir.path().join("p.csv");
    let pts = write(dir.path(), "pts.csv", "x_1\n-6.0\n-4.8\n");
    let out = gpssm(&["predict", "--archive", s(&arch), "--data", s(&pts), "--out", s(&out_csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (_, rows) = read_table(&out_csv);
    // At an inducing input with Σ ≈ 0 the predictive variance is B ≈ 0.
    assert!(rows[0][2] < 1e-4, "{}", rows[0][2]);

    let wide = write(dir.path(), "wide.csv", "x_1,x_2\n1,2\n");
    assert_eq!(code(&gpssm(&["predict", "--archive", s(&arch), "--data", s(&wide), "--out", s(&out_csv)])), 2);
    let empty = write(dir.path(), "e.toml", "[predict]\ngrid_points = 0\n");
    let out = gpssm(&["predict", "--archive", s(&arch), "--config", s(&empty), "--out", s(&out_csv)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("empty grid"));

    let roll = write(dir.path(), "r.toml", "[predict]\nrollout_steps = 10\nrollout_paths = 3\nrollout_start = [1.0]\n");
    let out = gpssm(&["predict", "--archive", s(&arch), "--config", s(&roll), "--out", s(&out_csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (header, rows) = read_table(&out_csv);
    assert_eq!(header.len(), 1 + 2 + 3);
    assert_eq!(rows.len(), 11);
    assert_eq!(rows[0][1], 1.0);
}

#[test]
fn eval_reports_and_gates_on_thresholds() {
    let dir = tempfile::tempdir().unwrap();
    let arch = dir.path().join("a.toml");
    kink_archive(None).save(&arch).unwrap();
    let test = kink_system_generate::<f64>(2000, 99).unwrap();
    let data = write(dir.path(), "x.csv", &series_csv("x", &test.states));
    let report = dir.path().join("r.json");
    let out = gpssm(&["eval", "--archive", s(&arch), "--data", s(&data), "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let rmse = r["test_rmse"].as_f64().unwrap();
    assert!(rmse > 0.9 && rmse < 1.3, "{rmse}");
    assert_eq!(r["n_pairs"], 2000);
    assert_eq!(r["seeds"][1].as_u64(), Some(u64::MAX));

    let strict = write(dir.path(), "s.toml", "[eval]\nmax_rmse = 0.5\n");
    let out = gpssm(&["eval", "--archive", s(&arch), "--data", s(&data), "--config", s(&strict)]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("RMSE"));
    let lenient = write(dir.path(), "l.toml", "[eval]\nmax_rmse = 2.0\nmin_loglik = -3.0\n");
    let out = gpssm(&["eval", "--archive", s(&arch), "--data", s(&data), "--config", s(&lenient)]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8(out.stdout).unwrap().contains("mean_pred_loglik"));

    let wide = write(dir.path(), "w.csv", "x_1,x_2\n1,2\n3,4\n");
    assert_eq!(code(&gpssm(&["eval", "--archive", s(&arch), "--data", s(&wide)])), 3);
}

#[test]
fn online_absorbs_segments_and_keeps_the_last_good_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let arch = dir.path().join("a.toml");
    let base = kink_archive(None);
    base.save(&arch).unwrap();
    let cfg = write(dir.path(), "o.toml", "[training]\nparticles = 50\nlag = 3\nsegment_length = 10\n");

    let empty = write(dir.path(), "empty.csv", "y_1\n");
    let out_path = dir.path().join("e.toml");
    let out = gpssm(&["online", "--config", s(&cfg), "--archive", s(&arch), "--data", s(&empty), "--out", s(&out_path)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let e = ModelArchive::load(&out_path).unwrap();
    assert_eq!(e.state, base.state);
    assert_ne!(e.provenance.data_hash, base.provenance.data_hash);

    let obs = kink_system_generate::<f64>(25, 5).unwrap().observations;
    let mut text = series_csv("y", &obs);
    let stream = write(dir.path(), "s.csv", &text);
    let good = dir.path().join("g.toml");
    let out = gpssm(&["online", "--config", s(&cfg), "--archive", s(&arch), "--data", s(&stream), "--out", s(&good)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let progress = String::from_utf8(out.stdout).unwrap();
    assert_eq!(progress.lines().count(), 3);
    for line in progress.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["ess_min"].as_f64().unwrap() > 0.0, "{line}");
    }
    let g = ModelArchive::load(&good).unwrap();
    assert_eq!(g.state.iteration, base.state.iteration + 3);
    assert_ne!(g.state.q_u, base.state.q_u);

    // Corrupt a row in the second segment (data line 15, file line 16).
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[15] = "oops".into();
    text = lines.join("\n") + "\n";
    let bad = write(dir.path(), "bad.csv", &text);
    let partial = dir.path().join("p.toml");
    let out = gpssm(&["online", "--config", s(&cfg), "--archive", s(&arch), "--data", s(&bad), "--out", s(&partial)]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("segment 1"), "{}", stderr(&out));
    assert!(stderr(&out).contains("line 16"), "{}", stderr(&out));
    let p = ModelArchive::load(&partial).unwrap();
    assert_eq!(p.state.iteration, base.state.iteration + 1);

    let wide = write(dir.path(), "w.csv", "y_1,y_2\n1,2\n");
    let out = gpssm(&["online", "--config", s(&cfg), "--archive", s(&arch), "--data", s(&wide), "--out", s(&partial)]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("segment 0"));
}
