use super::*;
use crate::fields::DisplacementNetConfig;

fn tiny_config() -> RunConfig {
    RunConfig {
        seed: 7,
        mesh: MeshConfig {
            truth_n: 9,
            inversion_n: 5,
            obs_n: 3,
        },
        inference: InferenceConfig {
            displacement_net: DisplacementNetConfig {
                d_z: 3,
                hidden_layers: 1,
                width: 5,
            },
            mean_net_hidden: vec![6],
            rank: 2,
            k: 8,
            l: 2,
            max_iters: 40,
            warmup: 10,
            trace_every: 5,
            window: 10,
            checkpoint_every: 0,
            ..InferenceConfig::default()
        },
        report: ReportConfig {
            samples: 20,
            pixels_per_cell: 2,
        },
        ..RunConfig::default()
    }
}

fn config_error(text: &str) -> String {
    match RunConfig::from_toml(text) {
        Err(Error::Config(msg)) => msg,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = tiny_config();
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
}

#[test]
fn config_errors_name_the_field() {
    assert!(config_error("[mesh]\ntruth_nn = 5\n").contains("truth_nn"));
    assert!(config_error("bogus = 1\n").contains("bogus"));
    assert!(config_error("[mesh]\nobs_n = 0\n").contains("mesh.obs_n"));
    assert!(config_error("[report]\nsamples = 1\n").contains("report.samples"));
    assert!(config_error("[noise]\ntau = 4.0\n").contains("noise"));
    assert!(config_error("[inference]\nk = 0\n").contains("k must be positive"));
    assert!(config_error("[material]\nnu = 0.5\n").contains("material"));
}

#[test]
fn hash_ignores_output_seed_and_iteration_budget() {
    let a = tiny_config();
    let mut b = a.clone();
    b.output = "elsewhere".into();
    b.seed = 99;
    b.inference.max_iters = 5;
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 16);
    b.inference.lambda_e *= 2.0;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn trace_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    let rows = vec![
        TraceRow {
            iter: 0,
            elbo: -1.25e6,
            res_cons: 0.1,
            res_const: 3.0,
            data_fit: 1e-300,
        },
        TraceRow {
            iter: 10,
            elbo: 2.0,
            res_cons: f64::MIN_POSITIVE,
            res_const: 0.0,
            data_fit: 0.3,
        },
    ];
    write_trace(&path, &rows, &tiny_config().meta()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().nth(1), Some(TRACE_HEADER));
    assert_eq!(read_trace(&path).unwrap(), rows);
    std::fs::write(&path, "iter,elbo\n1,2\n").unwrap();
    assert!(matches!(read_trace(&path), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn trace_drop_uses_iteration_100_and_the_tail() {
    let rows: Vec<TraceRow> = (0..20)
        .map(|k| TraceRow {
            iter: 50 * k,
            elbo: 0.0,
            res_cons: 1.0 / (k + 1) as f64,
            res_const: 0.0,
            data_fit: 0.0,
        })
        .collect();
    let (a, b) = trace_drop(&rows);
    assert_eq!(a, 1.0 / 3.0);
    assert!((b - (1.0 / 19.0 + 1.0 / 20.0) / 2.0).abs() < 1e-15);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn stages_end_to_end() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    let err = infer(&cfg, out, None, false).err().unwrap().to_string();
    assert!(err.contains("generate"), "{err}");

    generate(&cfg, out).unwrap();
    let first = files(out);
    generate(&cfg, out).unwrap();
    assert_eq!(first, files(out));
    let obs = read_field(&out.join("observations.field")).unwrap();
    assert_eq!((obs.kind, obs.n(), obs.components), (FieldKind::Point, 9, 2));
    assert_eq!(obs.meta, cfg.meta());

    let err = report(&cfg, out, None, 1).err().unwrap().to_string();
    assert!(err.contains("infer"), "{err}");

    // 40 iterations at once, and 20 + 20 through the checkpoint
    let full = infer(&cfg, out, None, false).unwrap();
    assert_eq!(full.state.iteration, 40);
    assert_eq!(full.trace.len(), 8);
    let split_dir = tempfile::tempdir().unwrap();
    let split = split_dir.path();
    generate(&cfg, split).unwrap();
    let mut half = cfg.clone();
    half.inference.max_iters = 20;
    infer(&half, split, None, false).unwrap();
    let resumed = infer(&cfg, split, None, false).unwrap();
    assert_eq!(resumed.state, full.state);
    assert_eq!(resumed.trace, full.trace);

    let mut other = cfg.clone();
    other.inference.lambda_e = 1.0;
    other.seed = cfg.seed;
    let err = infer(&other, out, None, false).err().unwrap().to_string();
    assert!(err.contains("config="), "{err}");

    let summary = report(&cfg, out, None, 2).unwrap();
    let report_dir = out.join("report");
    for name in FIELD_NAMES {
        let f = read_field(&report_dir.join(format!("{name}.field"))).unwrap();
        assert_eq!(f.meta, cfg.meta());
        let expect = if name.starts_with('u') { 25 } else { 32 };
        assert_eq!(f.n(), expect, "{name}");
        assert_eq!(f.components, if name == "lambda_c_inv" { 4 } else { 5 });
        assert!(report_dir.join(format!("{name}.ppm")).exists());
    }
    assert_eq!(read_trace(&report_dir.join("trace.csv")).unwrap(), full.trace);
    let text = std::fs::read_to_string(report_dir.join("summary.toml")).unwrap();
    assert!(text.starts_with(&format!("# config={} seed=7", cfg.hash())));
    let parsed: Summary = toml::from_str(&text).unwrap();
    assert_eq!(parsed.iterations, 40);
    assert_eq!(parsed.background_elements, summary.background_elements);

    let before = files(&report_dir);
    report(&cfg, out, None, 1).unwrap();
    assert_eq!(before, files(&report_dir));
}

#[test]
fn mc_study_noise_decreases() {
    let mut cfg = tiny_config();
    cfg.mesh.inversion_n = 9;
    cfg.mc_study = McStudyConfig {
        counts: vec![10, 100, 1000],
        reference_points: 4000,
        weight_functions: 4,
        realizations: 3,
        x_std: 0.5,
    };
    let rows = mc_study(&cfg).unwrap();
    assert_eq!(rows.iter().map(|r| r.points).collect::<Vec<_>>(), vec![10, 100, 1000]);
    assert!(rows.windows(2).all(|w| w[1].noise <= w[0].noise), "{rows:?}");
    assert_eq!(rows, mc_study(&cfg).unwrap());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mc.csv");
    write_mc_table(&path, &rows, &cfg.meta()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().nth(1), Some("points,noise_percent"));
    assert_eq!(text.lines().count(), 5);
}
