//! Run configuration and the `generate`, `infer`, `report` and `mc-study`
//! stages. All artifacts of a run live in one output directory:
//!
//! | file                   | stage    | content                                   |
//! |------------------------|----------|-------------------------------------------|
//! | `truth_u.field`        | generate | truth displacement at truth-mesh nodes    |
//! | `truth_ln_e.field`     | generate | ln of the (transverse) modulus per element |
//! | `truth_stress.field`   | generate | truth stress per truth-mesh element       |
//! | `observations.field`   | generate | noisy displacements on the observation grid |
//! | `checkpoint.json`      | infer    | variational state, resumable              |
//! | `trace.csv`            | infer    | convergence trace                         |
//! | `report/*.field`       | report   | posterior statistics per field            |
//! | `report/*.ppm`         | report   | heatmaps of posterior means               |
//! | `report/summary.toml`  | report   | headline numbers                          |
//! | `mc_study.csv`         | mc-study | integration points vs residual noise      |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor};
use crate::constitutive::{linear_isotropic_stress, IsoParams, Sym2, TransIsoParams};
use crate::error::{Error, Result};
use crate::fields::{DirichletMask, DisplacementNet};
use crate::forward::{element_stresses, BoundaryConditions, GroundTruth, Inclusion, LoadCase, Material, NewtonOptions, ObservationGrid};
use crate::inference::{train, Checkpoint, InferenceConfig, Priors, Problem, TraceRow, TrainOptions, TrainState};
use crate::mesh::{regular_points, Point, TriMesh};
use crate::postproc::{
    displacement_basis, posterior_stats, read_field, render_heatmap, write_field, ColorScale, Field, FieldKind, FieldMeta,
    FIELD_NAMES,
};
use crate::residuals::{conservation_residual_mc, generate_weight_functions};

pub const TRACE_HEADER: &str = "iter,elbo,res_cons,res_const,data_fit";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// Nodes per side of the mesh the data are generated on.
    pub truth_n: usize,
    /// Nodes per side of the inversion mesh.
    pub inversion_n: usize,
    /// Observation points per side.
    pub obs_n: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            truth_n: 33,
            inversion_n: 17,
            obs_n: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaterialConfig {
    /// Background Young's modulus and Poisson ratio; the inversion assumes
    /// the linear isotropic law with this `nu` everywhere.
    pub e: f64,
    pub nu: f64,
    pub inclusion: Inclusion,
    /// Inclusion law: transversely isotropic with transverse modulus `e`.
    pub e_a: f64,
    pub g_a: f64,
    pub axis: [f64; 2],
}

impl Default for MaterialConfig {
    fn default() -> Self {
        Self {
            e: 1.0,
            nu: 0.3,
            inclusion: Inclusion::default(),
            e_a: 3.0,
            g_a: 1.154,
            axis: [1.0, 0.0],
        }
    }
}

/// Observation noise, either a precision or a standard deviation in percent
/// of the largest truth displacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub percent: Option<f64>,
    pub tau: Option<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            percent: Some(1.0),
            tau: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    /// Posterior samples `B`.
    pub samples: usize,
    pub pixels_per_cell: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            pixels_per_cell: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McStudyConfig {
    pub counts: Vec<usize>,
    pub reference_points: usize,
    pub weight_functions: usize,
    pub realizations: usize,
    /// Standard deviation of the element-wise log-modulus draws.
    pub x_std: f64,
}

impl Default for McStudyConfig {
    fn default() -> Self {
        Self {
            counts: vec![10, 50, 100, 500, 1000, 5000],
            reference_points: 10_000,
            weight_functions: 10,
            realizations: 10,
            x_std: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output: PathBuf,
    pub seed: u64,
    pub mesh: MeshConfig,
    pub load: LoadCase,
    pub material: MaterialConfig,
    pub noise: NoiseConfig,
    pub newton: NewtonOptions,
    pub inference: InferenceConfig,
    pub report: ReportConfig,
    pub mc_study: McStudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("out"),
            seed: 0,
            mesh: MeshConfig::default(),
            load: LoadCase::default(),
            material: MaterialConfig::default(),
            noise: NoiseConfig::default(),
            newton: NewtonOptions::default(),
            inference: InferenceConfig::default(),
            report: ReportConfig::default(),
            mc_study: McStudyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("mesh.truth_n", self.mesh.truth_n),
            ("mesh.inversion_n", self.mesh.inversion_n),
            ("mesh.obs_n", self.mesh.obs_n),
            ("report.samples", self.report.samples),
            ("report.pixels_per_cell", self.report.pixels_per_cell),
            ("mc_study.reference_points", self.mc_study.reference_points),
            ("mc_study.weight_functions", self.mc_study.weight_functions),
            ("mc_study.realizations", self.mc_study.realizations),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("mesh.truth_n", self.mesh.truth_n), ("mesh.inversion_n", self.mesh.inversion_n), ("mesh.obs_n", self.mesh.obs_n)] {
            if v < 2 {
                return Err(Error::Config(format!("{name} must be at least 2")));
            }
        }
        if self.report.samples < 2 {
            return Err(Error::Config("report.samples must be at least 2".into()));
        }
        if self.mc_study.counts.is_empty() || self.mc_study.counts.contains(&0) {
            return Err(Error::Config("mc_study.counts must be non-empty and positive".into()));
        }
        match (self.noise.percent, self.noise.tau) {
            (Some(p), None) if p > 0.0 => {}
            (None, Some(t)) if t > 0.0 => {}
            _ => return Err(Error::Config("noise: give exactly one of percent > 0 or tau > 0".into())),
        }
        if !(self.material.e > 0.0) || !(self.material.inclusion.radius > 0.0) {
            return Err(Error::Config("material.e and material.inclusion.radius must be positive".into()));
        }
        self.background()?;
        crate::constitutive::transiso_constants(&self.inclusion_law()).map_err(|e| Error::Config(format!("material: {e}")))?;
        self.inference.validate()
    }

    fn background(&self) -> Result<IsoParams> {
        IsoParams::new(self.material.e, self.material.nu).map_err(|e| Error::Config(format!("material: {e}")))
    }

    fn inclusion_law(&self) -> TransIsoParams {
        TransIsoParams {
            e: self.material.e,
            e_a: self.material.e_a,
            nu: self.material.nu,
            g_a: self.material.g_a,
            axis: self.material.axis,
        }
    }

    /// First 16 hex digits of the SHA-256 of the configuration, leaving out
    /// the output directory, the seed and `inference.max_iters` (so a run can
    /// be extended from its checkpoint).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        c.seed = 0;
        c.inference.max_iters = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes())[..8].iter().fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
    }

    pub fn meta(&self) -> FieldMeta {
        FieldMeta {
            config_hash: self.hash(),
            seed: self.seed,
        }
    }
}

fn provenance(meta: &FieldMeta) -> String {
    format!("# config={} seed={}\n", meta.config_hash, meta.seed)
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "missing input {} (run `{stage}` first)",
            path.display()
        )))
    }
}

fn check_meta(path: &Path, field: &Field, meta: &FieldMeta) -> Result<()> {
    if field.meta != *meta {
        return Err(Error::InvalidArgument(format!(
            "{} was written with config={} seed={}, current run has config={} seed={}",
            path.display(),
            field.meta.config_hash,
            field.meta.seed,
            meta.config_hash,
            meta.seed
        )));
    }
    Ok(())
}

pub struct GenerateOutput {
    pub truth: GroundTruth,
    pub observations: ObservationGrid,
}

/// Solves the truth problem and samples noisy observations.
pub fn generate(cfg: &RunConfig, out: &Path) -> Result<GenerateOutput> {
    std::fs::create_dir_all(out)?;
    let meta = cfg.meta();
    let truth = GroundTruth::generate(
        cfg.mesh.truth_n,
        &cfg.load,
        cfg.background()?,
        cfg.inclusion_law(),
        cfg.material.inclusion,
        &cfg.newton,
    )?;
    let tau = match (cfg.noise.tau, cfg.noise.percent) {
        (Some(t), _) => t,
        (None, Some(p)) => truth.default_tau(p / 100.0),
        (None, None) => return Err(Error::Config("noise: give percent or tau".into())),
    };
    let obs = crate::forward::sample_observations(&truth, cfg.mesh.obs_n, tau, cfg.seed)?;

    let field = |kind, components, values| Field {
        kind,
        components,
        values,
        meta: meta.clone(),
    };
    write_field(&out.join("truth_u.field"), &field(FieldKind::Node, 2, truth.u_nodes.clone()))?;
    let ln_e = truth
        .material_map
        .assignment
        .iter()
        .map(|&k| match truth.material_map.materials[k] {
            Material::LinearIso(p) => p.e.ln(),
            Material::TransIso(p) => p.e.ln(),
        })
        .collect();
    write_field(&out.join("truth_ln_e.field"), &field(FieldKind::Element, 1, ln_e))?;
    let stress = element_stresses(&truth.mesh, &truth.material_map, &truth.u_nodes)?;
    write_field(
        &out.join("truth_stress.field"),
        &field(FieldKind::Element, 3, stress.iter().flat_map(|s| s.to_array()).collect()),
    )?;
    write_field(
        &out.join("observations.field"),
        &field(FieldKind::Point, 2, obs.values.iter().flat_map(|v| [v[0], v[1]]).collect()),
    )?;
    Ok(GenerateOutput { truth, observations: obs })
}

pub fn read_observations(cfg: &RunConfig, out: &Path) -> Result<ObservationGrid> {
    let path = out.join("observations.field");
    require(&path, "generate")?;
    let f = read_field(&path)?;
    check_meta(&path, &f, &cfg.meta())?;
    let n = cfg.mesh.obs_n;
    if f.kind != FieldKind::Point || f.components != 2 || f.n() != n * n {
        return Err(Error::InvalidArgument(format!(
            "{}: expected {} point rows with 2 columns",
            path.display(),
            n * n
        )));
    }
    Ok(ObservationGrid {
        n,
        points: regular_points(n),
        values: (0..f.n()).map(|i| [f.row(i)[0], f.row(i)[1]]).collect(),
        tau: noise_precision(cfg, out)?,
    })
}

/// The configured precision, or the one implied by the noise percentage and
/// the largest truth displacement.
fn noise_precision(cfg: &RunConfig, out: &Path) -> Result<f64> {
    match (cfg.noise.tau, cfg.noise.percent) {
        (Some(t), _) => Ok(t),
        (None, Some(p)) => {
            let path = out.join("truth_u.field");
            require(&path, "generate")?;
            let u = read_field(&path)?;
            check_meta(&path, &u, &cfg.meta())?;
            let max = u.values.chunks(2).map(|v| v[0].hypot(v[1])).fold(0.0, f64::max);
            let sd = p / 100.0 * max;
            Ok(1.0 / (sd * sd))
        }
        (None, None) => Err(Error::Config("noise: give percent or tau".into())),
    }
}

pub fn build_problem(cfg: &RunConfig, obs: &ObservationGrid) -> Result<Problem> {
    let mesh = TriMesh::build_grid(cfg.mesh.inversion_n)?;
    let bc = BoundaryConditions::from_load_case(&mesh, &cfg.load)?;
    let priors = Priors::new(cfg.inference.lambda_e, obs.tau)?;
    Problem::new(
        mesh,
        bc,
        cfg.material.nu,
        DirichletMask::for_load_case(&cfg.load),
        obs,
        priors,
        cfg.inference.n_e,
        cfg.seed,
    )
}

pub fn write_trace(path: &Path, rows: &[TraceRow], meta: &FieldMeta) -> Result<()> {
    let mut s = provenance(meta);
    s.push_str(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{},{:e},{:e},{:e},{:e}", r.iter, r.elbo, r.res_cons, r.res_const, r.data_fit).unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (k, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse { line: k + 1, msg };
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            if line != TRACE_HEADER {
                return Err(err(format!("expected header {TRACE_HEADER:?}")));
            }
            header_seen = true;
            continue;
        }
        let v: Vec<&str> = line.split(',').collect();
        if v.len() != 5 {
            return Err(err("expected 5 columns".into()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}")));
        rows.push(TraceRow {
            iter: v[0].parse().map_err(|_| err(format!("bad iteration {:?}", v[0])))?,
            elbo: num(v[1])?,
            res_cons: num(v[2])?,
            res_const: num(v[3])?,
            data_fit: num(v[4])?,
        });
    }
    Ok(rows)
}

pub struct InferOutput {
    pub state: TrainState,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
}

/// Trains from scratch, or resumes from `checkpoint` when it exists and was
/// written by the same configuration.
pub fn infer(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, verbose: bool) -> Result<InferOutput> {
    let meta = cfg.meta();
    let obs = read_observations(cfg, out)?;
    let problem = build_problem(cfg, &obs)?;
    let ck_path = checkpoint.map_or_else(|| out.join("checkpoint.json"), Path::to_path_buf);
    let trace_path = out.join("trace.csv");
    let (mut state, mut trace) = if ck_path.exists() {
        let ck = load_checkpoint(&ck_path, &meta)?;
        let mut trace = if trace_path.exists() { read_trace(&trace_path)? } else { Vec::new() };
        trace.retain(|r| r.iter < ck.state.iteration);
        (ck.state, trace)
    } else {
        (TrainState::init(&problem, &cfg.inference, cfg.seed)?, Vec::new())
    };
    let opts = TrainOptions {
        checkpoint: Some(&ck_path),
        config_hash: Some(meta.config_hash.clone()),
        verbose,
    };
    let summary = train(&problem, &cfg.inference, &mut state, &mut trace, &opts)?;
    write_trace(&trace_path, &trace, &meta)?;
    Ok(InferOutput {
        state,
        trace,
        converged: summary.converged,
    })
}

fn load_checkpoint(path: &Path, meta: &FieldMeta) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.config_hash.as_deref() != Some(meta.config_hash.as_str()) || ck.state.seed != meta.seed {
        return Err(Error::InvalidArgument(format!(
            "checkpoint {} belongs to config={} seed={}, current run has config={} seed={}",
            path.display(),
            ck.config_hash.as_deref().unwrap_or("?"),
            ck.state.seed,
            meta.config_hash,
            meta.seed
        )));
    }
    Ok(ck)
}

/// Headline numbers of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seed: u64,
    pub iterations: u64,
    pub converged: bool,
    /// Traced `res_cons` at iteration 100 and averaged over the last tenth
    /// of the trace.
    pub res_cons_at_100: f64,
    pub res_cons_final: f64,
    pub res_cons_drop: f64,
    pub lambda_c_inv_median_inside: f64,
    pub lambda_c_inv_median_outside: f64,
    pub lambda_c_inv_ratio: f64,
    /// Background elements farther than 0.1 from the inclusion boundary.
    pub background_elements: usize,
    /// Fraction of those with posterior-mean `E` within 20% of the truth.
    pub e_within_20_percent: f64,
    pub e_mean_abs_rel_error: f64,
    /// Fraction of observation points whose posterior-mean displacement is
    /// within three noise standard deviations in both components.
    pub data_within_3_sd: f64,
    pub s11_mean_abs_inside: f64,
    pub s22_mean_abs_inside: f64,
    /// Truth inside the 95% credible interval, per field with a truth.
    pub coverage_ln_e: Option<f64>,
    pub coverage_u1: Option<f64>,
    pub coverage_u2: Option<f64>,
    pub coverage_s11: Option<f64>,
    pub coverage_s12: Option<f64>,
    pub coverage_s22: Option<f64>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Truth values at the locations of the reported fields, if the truth
/// files are present.
fn truth_on_inversion_mesh(out: &Path, mesh: &TriMesh, cfg: &RunConfig) -> Result<Option<[Vec<f64>; 6]>> {
    let paths = ["truth_u.field", "truth_ln_e.field", "truth_stress.field"].map(|p| out.join(p));
    if !paths.iter().all(|p| p.exists()) {
        return Ok(None);
    }
    let meta = cfg.meta();
    let [u, ln_e, stress] = paths.clone().map(|p| read_field(&p));
    let (u, ln_e, stress) = (u?, ln_e?, stress?);
    for (p, f) in paths.iter().zip([&u, &ln_e, &stress]) {
        check_meta(p, f, &meta)?;
    }
    let tmesh = TriMesh::build_grid(cfg.mesh.truth_n)?;
    let mut ln_e_at = Vec::new();
    let mut s_at: [Vec<f64>; 3] = Default::default();
    for c in mesh.centroids() {
        let te = tmesh.locate_element(c)?;
        ln_e_at.push(ln_e.row(te)[0]);
        for (k, s) in s_at.iter_mut().enumerate() {
            s.push(stress.row(te)[k]);
        }
    }
    let mut u_at: [Vec<f64>; 2] = Default::default();
    for &p in mesh.nodes() {
        let v = tmesh.interpolate(&u.values, 2, p)?;
        u_at[0].push(v[0]);
        u_at[1].push(v[1]);
    }
    let [u1, u2] = u_at;
    let [s11, s12, s22] = s_at;
    Ok(Some([ln_e_at, u1, u2, s11, s12, s22]))
}

/// Posterior statistics, heatmaps, the convergence trace and a summary.
pub fn report(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, threads: usize) -> Result<Summary> {
    let meta = cfg.meta();
    let obs = read_observations(cfg, out)?;
    let problem = build_problem(cfg, &obs)?;
    let ck_path = checkpoint.map_or_else(|| out.join("checkpoint.json"), Path::to_path_buf);
    require(&ck_path, "infer")?;
    let state = load_checkpoint(&ck_path, &meta)?.state;
    let trace_path = out.join("trace.csv");
    let trace = if trace_path.exists() { read_trace(&trace_path)? } else { Vec::new() };

    let mut stats = posterior_stats(&state.params, &problem, &state.hyper, cfg.report.samples, cfg.seed, threads)?;
    let truth = truth_on_inversion_mesh(out, &problem.mesh, cfg)?;
    if let Some(t) = &truth {
        for (name, values) in FIELD_NAMES.iter().zip(t) {
            stats.get_mut(name).expect("field present").set_truth(values)?;
        }
    }

    let dir = out.join("report");
    std::fs::create_dir_all(&dir)?;
    for f in &stats.fields {
        write_field(&dir.join(format!("{}.field", f.name)), &f.to_field(&meta))?;
        let (values, scale) = if f.name == "lambda_c_inv" {
            // orders of magnitude apart, so drawn on a log scale
            (f.mean.iter().map(|v| v.log10()).collect::<Vec<_>>(), ColorScale::Auto)
        } else {
            (f.mean.clone(), ColorScale::Auto)
        };
        let img = render_heatmap(&values, f.kind, &problem.mesh, scale, cfg.report.pixels_per_cell, &meta)?;
        std::fs::write(dir.join(format!("{}.ppm", f.name)), img)?;
    }
    write_trace(&dir.join("trace.csv"), &trace, &meta)?;

    let mesh = &problem.mesh;
    let incl = &cfg.material.inclusion;
    let centroids = mesh.centroids();
    let lam = &stats.get("lambda_c_inv").expect("field present").mean;
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for (e, c) in centroids.iter().enumerate() {
        if incl.contains(*c) {
            inside.push(lam[e]);
        } else {
            outside.push(lam[e]);
        }
    }
    let (med_in, med_out) = (median(&mut inside), median(&mut outside));

    // posterior mean of E = exp(x), not exp of the mean of x
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draws = crate::inference::sample_posterior(&state.params, cfg.report.samples, &mut rng)?;
    let e_mean: Vec<f64> = (0..mesh.n_elements())
        .map(|e| draws.iter().map(|d| d.x[e].exp()).sum::<f64>() / draws.len() as f64)
        .collect();
    let background: Vec<usize> = (0..mesh.n_elements())
        .filter(|&e| !incl.contains(centroids[e]) && incl.boundary_distance(centroids[e]) > 0.1)
        .collect();
    let e_true = cfg.material.e;
    let rel: Vec<f64> = background.iter().map(|&e| (e_mean[e] / e_true - 1.0).abs()).collect();
    let within = rel.iter().filter(|&&r| r <= 0.2).count() as f64 / rel.len().max(1) as f64;

    // the mean displacement is linear in z, so E[u(s)] = Phi(s) mu_z exactly
    let basis = displacement_basis(&state.params.disp, &obs.points)?;
    let mu = state.params.mu_z.data();
    let sd = obs.tau.powf(-0.5);
    let fit = (0..obs.points.len())
        .filter(|&i| {
            (0..2).all(|c| {
                let u: f64 = basis[c].row_slice(i).iter().zip(mu).map(|(a, b)| a * b).sum();
                (u - obs.values[i][c]).abs() <= 3.0 * sd
            })
        })
        .count() as f64
        / obs.points.len() as f64;

    let inside_el: Vec<usize> = (0..mesh.n_elements()).filter(|&e| incl.contains(centroids[e])).collect();
    let mean_abs = |name: &str| {
        let m = &stats.get(name).expect("field present").mean;
        inside_el.iter().map(|&e| m[e].abs()).sum::<f64>() / inside_el.len().max(1) as f64
    };

    let (at100, fin) = trace_drop(&trace);
    let cov = |name: &str| stats.get(name).and_then(|f| f.coverage());
    let summary = Summary {
        config_hash: meta.config_hash.clone(),
        seed: meta.seed,
        iterations: state.iteration,
        converged: state.converged,
        res_cons_at_100: at100,
        res_cons_final: fin,
        res_cons_drop: at100 / fin,
        lambda_c_inv_median_inside: med_in,
        lambda_c_inv_median_outside: med_out,
        lambda_c_inv_ratio: med_in / med_out,
        background_elements: background.len(),
        e_within_20_percent: within,
        e_mean_abs_rel_error: rel.iter().sum::<f64>() / rel.len().max(1) as f64,
        data_within_3_sd: fit,
        s11_mean_abs_inside: mean_abs("s11"),
        s22_mean_abs_inside: mean_abs("s22"),
        coverage_ln_e: cov("ln_e"),
        coverage_u1: cov("u1"),
        coverage_u2: cov("u2"),
        coverage_s11: cov("s11"),
        coverage_s12: cov("s12"),
        coverage_s22: cov("s22"),
    };
    let text = toml::to_string(&summary).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join("summary.toml"), format!("{}{text}", provenance(&meta)))?;
    Ok(summary)
}

/// `res_cons` at iteration 100 and its mean over the last tenth of the trace.
pub fn trace_drop(trace: &[TraceRow]) -> (f64, f64) {
    let at100 = trace.iter().find(|r| r.iter >= 100).map_or(f64::NAN, |r| r.res_cons);
    let tail = (trace.len() / 10).max(1).min(trace.len());
    let fin = if tail == 0 {
        f64::NAN
    } else {
        trace[trace.len() - tail..].iter().map(|r| r.res_cons).sum::<f64>() / tail as f64
    };
    (at100, fin)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McRow {
    pub points: usize,
    /// Relative RMS deviation from the reference estimate, in percent.
    pub noise: f64,
}

/// Noise of Monte Carlo weighted residuals versus the number of integration
/// points. The integrand is the stress of the assumed linear law for random
/// realizations of the displacement (network basis with random `z`) and of
/// the element-wise log-modulus; it varies inside elements, unlike the
/// element-wise constant stress of the inference. Weight functions are the
/// random nodal combinations of the residual family.
pub fn mc_study(cfg: &RunConfig) -> Result<Vec<McRow>> {
    let mc = &cfg.mc_study;
    let mesh = TriMesh::build_grid(cfg.mesh.inversion_n)?;
    let bc = BoundaryConditions::from_load_case(&mesh, &cfg.load)?;
    let nodal = generate_weight_functions(&mesh, &bc, None, cfg.seed)?.len();
    let family = generate_weight_functions(&mesh, &bc, Some(nodal + mc.weight_functions), cfg.seed)?;
    let functions = &family.functions[nodal..];
    let nu = cfg.material.nu;
    let mask = DirichletMask::for_load_case(&cfg.load);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut refs = Vec::new();
    let mut estimates = vec![Vec::new(); mc.counts.len()];
    for r in 0..mc.realizations {
        let net = DisplacementNet::new(&cfg.inference.displacement_net, mask, &mut rng)?;
        let z: Vec<f64> = (0..net.d_z).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let x: Vec<f64> = (0..mesh.n_elements()).map(|_| mc.x_std * rng.sample::<f64, _>(StandardNormal)).collect();
        let stress = |pts: &[Point]| law_stress(&net, &z, &x, &mesh, nu, pts);
        for (w_idx, w) in functions.iter().enumerate() {
            let base = ((r * functions.len() + w_idx) as u64) << 8;
            refs.push(conservation_residual_mc(&mesh, stress, w, &bc, mc.reference_points, cfg.seed ^ base)?);
            for (k, &n) in mc.counts.iter().enumerate() {
                let seed = cfg.seed ^ (base + 1 + k as u64);
                estimates[k].push(conservation_residual_mc(&mesh, stress, w, &bc, n, seed)?);
            }
        }
    }
    let scale: f64 = refs.iter().map(|v| v * v).sum();
    Ok(mc
        .counts
        .iter()
        .zip(&estimates)
        .map(|(&points, est)| {
            let err: f64 = est.iter().zip(&refs).map(|(a, b)| (a - b).powi(2)).sum();
            McRow {
                points,
                noise: 100.0 * (err / scale).sqrt(),
            }
        })
        .collect())
}

fn law_stress(net: &DisplacementNet, z: &[f64], x: &[f64], mesh: &TriMesh, nu: f64, pts: &[Point]) -> Result<Vec<Sym2<f64>>> {
    let tape = Tape::new();
    let vars = net.mlp.register(&tape, false);
    let basis = net.basis_on_tape(&tape, &vars, pts);
    let g = basis.displacement_grad(tape.constant(Tensor::col(z.to_vec())));
    let g = g.map(|row| row.map(|v| v.value()));
    pts.iter()
        .enumerate()
        .map(|(i, &s)| {
            let grad = [[g[0][0].get(i, 0), g[0][1].get(i, 0)], [g[1][0].get(i, 0), g[1][1].get(i, 0)]];
            let e = x[mesh.locate_element(s)?].exp();
            linear_isotropic_stress(&grad, &IsoParams::new(e, nu)?)
        })
        .collect()
}

pub fn write_mc_table(path: &Path, rows: &[McRow], meta: &FieldMeta) -> Result<()> {
    let mut s = provenance(meta);
    s.push_str("points,noise_percent\n");
    for r in rows {
        writeln!(s, "{},{:.6}", r.points, r.noise).unwrap();
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests;
