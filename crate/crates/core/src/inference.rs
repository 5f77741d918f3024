//! Priors, the approximate posterior, the ELBO estimator, closed-form updates
//! of the precision hyperparameters and the stochastic variational training loop.
//!
//! All `L` posterior samples of one iteration are rows of the same tape
//! tensors, so one backward pass yields the full gradient.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::constitutive::linear_isotropic_stress_with;
use crate::error::{Error, Result};
use crate::fields::{build_jump_operator, DirichletMask, DisplacementNet, DisplacementNetConfig, JumpOperator};
use crate::forward::{BoundaryConditions, ObservationGrid};
use crate::mesh::{Point, TriMesh};
use crate::nn::{Activation, Mlp, MlpVars};
use crate::residuals::{generate_weight_functions, subsample, CollocationSet, Subsampling, WeightFamily};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Priors {
    /// Gamma shape and rate shared by the `lambda_c` and `theta` priors.
    pub a0: f64,
    pub b0: f64,
    pub chi_variance: f64,
    pub lambda_e: f64,
    pub tau: f64,
}

impl Priors {
    pub fn new(lambda_e: f64, tau: f64) -> Result<Self> {
        let p = Self {
            a0: 1e-8,
            b0: 1e-8,
            chi_variance: 1e16,
            lambda_e,
            tau,
        };
        p.validate()?;
        Ok(p)
    }

    /// `lambda_e = 0` or `tau = 0` switch the corresponding term off.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a0", self.a0), ("b0", self.b0), ("chi_variance", self.chi_variance)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda_e", self.lambda_e), ("tau", self.tau)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Independent Gamma(a, b) factors (shape, rate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl GammaParams {
    /// Factors with mean one, `a = b = a0 + 1/2`.
    pub fn unit_mean(n: usize, a0: f64) -> Self {
        Self {
            a: vec![a0 + 0.5; n],
            b: vec![a0 + 0.5; n],
        }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| a / b).collect()
    }

    pub fn mean_log(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| digamma(*a) - b.ln()).collect()
    }

    /// `sum_i KL(Gamma(a_i, b_i) || Gamma(a0, b0))`.
    pub fn kl_to_prior(&self, a0: f64, b0: f64) -> f64 {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(&a, &b)| gamma_kl(a, b, a0, b0))
            .sum()
    }
}

/// `KL(Gamma(a, b) || Gamma(a0, b0))`, rate parameterization.
pub fn gamma_kl(a: f64, b: f64, a0: f64, b0: f64) -> f64 {
    (a - a0) * digamma(a) - ln_gamma(a) + ln_gamma(a0) + a0 * (b.ln() - b0.ln()) + a * (b0 - b) / b
}

fn conjugate_update(priors: &Priors, second_moments: &[f64], what: &str) -> Result<GammaParams> {
    if let Some(m) = second_moments.iter().find(|m| !(**m >= 0.0 && m.is_finite())) {
        return Err(Error::InvalidArgument(format!("{what} second moment must be finite and non-negative, got {m}")));
    }
    Ok(GammaParams {
        a: vec![priors.a0 + 0.5; second_moments.len()],
        b: second_moments.iter().map(|m| priors.b0 + 0.5 * m).collect(),
    })
}

/// `a_i = a0 + 1/2`, `b_i = b0 + E[r_c,i^2] / 2`, with the second moment
/// summed over the three stress components.
pub fn update_lambda_c(priors: &Priors, second_moments: &[f64]) -> Result<GammaParams> {
    conjugate_update(priors, second_moments, "constitutive residual")
}

/// Same update for the jump precisions from `E[J_j^2]`.
pub fn update_theta(priors: &Priors, second_moments: &[f64]) -> Result<GammaParams> {
    conjugate_update(priors, second_moments, "jump")
}

/// Everything the ELBO needs besides the variational parameters.
#[derive(Debug, Clone)]
pub struct Problem {
    pub mesh: TriMesh,
    pub bc: BoundaryConditions,
    pub nu: f64,
    pub mask: DirichletMask,
    pub family: WeightFamily,
    pub colloc: CollocationSet,
    /// Element containing each collocation point.
    pub colloc_elements: Vec<usize>,
    pub jumps: JumpOperator,
    pub obs_points: Vec<Point>,
    pub obs_values: [Vec<f64>; 2],
    pub priors: Priors,
}

impl Problem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mesh: TriMesh,
        bc: BoundaryConditions,
        nu: f64,
        mask: DirichletMask,
        obs: &ObservationGrid,
        priors: Priors,
        n_e: Option<usize>,
        family_seed: u64,
    ) -> Result<Self> {
        priors.validate()?;
        let family = generate_weight_functions(&mesh, &bc, n_e, family_seed)?;
        let colloc = CollocationSet::centroids(&mesh);
        let colloc_elements = (0..mesh.n_elements()).collect();
        let jumps = build_jump_operator(&mesh);
        Ok(Self {
            family,
            colloc,
            colloc_elements,
            jumps,
            obs_points: obs.points.clone(),
            obs_values: [
                obs.values.iter().map(|v| v[0]).collect(),
                obs.values.iter().map(|v| v[1]).collect(),
            ],
            mesh,
            bc,
            nu,
            mask,
            priors,
        })
    }

    pub fn n_elements(&self) -> usize {
        self.mesh.n_elements()
    }

    pub fn n_e(&self) -> usize {
        self.family.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub displacement_net: DisplacementNetConfig,
    /// Hidden widths of the conditional-mean networks for `x` and `chi`.
    pub mean_net_hidden: Vec<usize>,
    pub rank: usize,
    /// Weight functions per iteration.
    pub k: usize,
    /// Posterior samples per iteration.
    pub l: usize,
    /// Size of the weight-function family; all nodal functions if unset.
    pub n_e: Option<usize>,
    pub subsampling: Subsampling,
    pub lambda_e: f64,
    pub learning_rate: f64,
    /// If set, the step size decays geometrically from `learning_rate` at
    /// iteration `decay_start` to this value at `max_iters`.
    pub final_learning_rate: Option<f64>,
    pub decay_start: u64,
    pub max_iters: u64,
    pub warmup: u64,
    pub trace_every: u64,
    pub window: u64,
    pub conv_tol: f64,
    pub init_log_std: f64,
    pub checkpoint_every: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            displacement_net: DisplacementNetConfig::default(),
            mean_net_hidden: vec![128, 128],
            rank: 10,
            k: 32,
            l: 10,
            n_e: None,
            subsampling: Subsampling::WithReplacement,
            lambda_e: 1e8,
            learning_rate: 1e-3,
            final_learning_rate: Some(1e-5),
            decay_start: 70_000,
            max_iters: 100_000,
            warmup: 2000,
            trace_every: 10,
            window: 500,
            conv_tol: 1e-5,
            init_log_std: -2.0,
            checkpoint_every: 5000,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("displacement_net.d_z", self.displacement_net.d_z),
            ("displacement_net.width", self.displacement_net.width),
            ("k", self.k),
            ("l", self.l),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.mean_net_hidden.contains(&0) {
            return Err(Error::Config("mean_net_hidden widths must be positive".into()));
        }
        if self.trace_every == 0 || self.window == 0 {
            return Err(Error::Config("trace_every and window must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda_e >= 0.0) || !(self.conv_tol > 0.0) {
            return Err(Error::Config("learning_rate, conv_tol must be positive and lambda_e non-negative".into()));
        }
        if self.final_learning_rate.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::Config("final_learning_rate must be positive".into()));
        }
        if !self.init_log_std.is_finite() {
            return Err(Error::Config("init_log_std must be finite".into()));
        }
        Ok(())
    }

    /// Step size at iteration `it`.
    pub fn learning_rate_at(&self, it: u64) -> f64 {
        match self.final_learning_rate {
            Some(end) if self.max_iters > self.decay_start => {
                let t = it.clamp(self.decay_start, self.max_iters) - self.decay_start;
                let t = t as f64 / (self.max_iters - self.decay_start) as f64;
                self.learning_rate * (end / self.learning_rate).powf(t)
            }
            _ => self.learning_rate,
        }
    }
}

/// Parameters of `q(z) q(x|z) q(chi|z)` and of the displacement network.
/// Standard deviations are stored as logarithms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub mu_z: Tensor,
    pub log_sz: Tensor,
    pub x_net: Mlp,
    /// `d_x x rank`.
    pub l_x: Tensor,
    pub log_sx: Tensor,
    pub chi_net: Mlp,
    pub l_chi: Tensor,
    pub log_schi: Tensor,
    pub disp: DisplacementNet,
}

impl VariationalParams {
    pub fn init(problem: &Problem, cfg: &InferenceConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d_z = cfg.displacement_net.d_z;
        let n_el = problem.n_elements();
        let mut sizes = vec![d_z];
        sizes.extend(&cfg.mean_net_hidden);
        sizes.push(n_el);
        let x_net = Mlp::new(&sizes, Activation::Silu, Activation::Identity, rng)?;
        *sizes.last_mut().expect("non-empty") = 3 * n_el;
        let chi_net = Mlp::new(&sizes, Activation::Silu, Activation::Identity, rng)?;
        let disp = DisplacementNet::new(&cfg.displacement_net, problem.mask, rng)?;
        let s = cfg.init_log_std;
        Ok(Self {
            mu_z: Tensor::zeros(1, d_z),
            log_sz: Tensor::full(1, d_z, s),
            x_net,
            l_x: Tensor::zeros(n_el, cfg.rank),
            log_sx: Tensor::full(1, n_el, s),
            chi_net,
            l_chi: Tensor::zeros(3 * n_el, cfg.rank),
            log_schi: Tensor::full(1, 3 * n_el, s),
            disp,
        })
    }

    pub fn d_z(&self) -> usize {
        self.mu_z.cols()
    }

    pub fn rank(&self) -> usize {
        self.l_x.cols()
    }

    /// All trainable tensors in a fixed order (the order of gradients).
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.mu_z, &self.log_sz];
        v.extend(self.x_net.params());
        v.extend([&self.l_x, &self.log_sx]);
        v.extend(self.chi_net.params());
        v.extend([&self.l_chi, &self.log_schi]);
        v.extend(self.disp.mlp.params());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.mu_z, &mut self.log_sz];
        v.extend(self.x_net.params_mut());
        v.extend([&mut self.l_x, &mut self.log_sx]);
        v.extend(self.chi_net.params_mut());
        v.extend([&mut self.l_chi, &mut self.log_schi]);
        v.extend(self.disp.mlp.params_mut());
        v
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `KL(q(z) || N(0, I))`.
    pub fn z_kl(&self) -> f64 {
        self.mu_z
            .data()
            .iter()
            .zip(self.log_sz.data())
            .map(|(m, ls)| 0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls))
            .sum()
    }
}

/// Standard normal draws and weight-function indices of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    pub weights: Vec<usize>,
    /// `L x d_z`.
    pub eps_z: Tensor,
    /// Low-rank (`L x rank`) and diagonal (`L x d_x`) noise for `x`.
    pub eps_x: [Tensor; 2],
    pub eps_chi: [Tensor; 2],
}

fn normal_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

impl Draws {
    pub fn sample(
        problem: &Problem,
        params: &VariationalParams,
        l: usize,
        k: usize,
        mode: Subsampling,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if l == 0 {
            return Err(Error::InvalidArgument("at least one posterior sample is required".into()));
        }
        let weights = subsample(k, problem.n_e(), mode, rng)?;
        let (r, n) = (params.rank(), problem.n_elements());
        let eps_z = normal_tensor(l, params.d_z(), rng);
        let eps_x = [normal_tensor(l, r, rng), normal_tensor(l, n, rng)];
        let eps_chi = [normal_tensor(l, r, rng), normal_tensor(l, 3 * n, rng)];
        Ok(Self {
            weights,
            eps_z,
            eps_x,
            eps_chi,
        })
    }

    pub fn l(&self) -> usize {
        self.eps_z.rows()
    }
}

/// Precision hyperparameters, updated in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lambda_c: GammaParams,
    pub theta: GammaParams,
}

impl Hyper {
    pub fn init(problem: &Problem) -> Self {
        let a0 = problem.priors.a0;
        Self {
            lambda_c: GammaParams::unit_mean(problem.colloc.len(), a0),
            theta: GammaParams::unit_mean(problem.jumps.n_jumps(), a0),
        }
    }
}

/// Individual ELBO contributions (up to parameter-independent constants of
/// the likelihood terms).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub conservation: f64,
    pub constitutive: f64,
    pub data: f64,
    pub z_kl: f64,
    pub x_prior: f64,
    pub x_entropy: f64,
    pub chi_prior: f64,
    pub chi_entropy: f64,
    pub gamma_kl: f64,
}

impl ElboTerms {
    fn named(&self) -> [(&'static str, f64); 9] {
        [
            ("conservation", self.conservation),
            ("constitutive", self.constitutive),
            ("data", self.data),
            ("z_kl", self.z_kl),
            ("x_prior", self.x_prior),
            ("x_entropy", self.x_entropy),
            ("chi_prior", self.chi_prior),
            ("chi_entropy", self.chi_entropy),
            ("gamma_kl", self.gamma_kl),
        ]
    }

    pub fn total(&self) -> f64 {
        self.conservation + self.constitutive + self.data - self.z_kl + self.x_prior + self.x_entropy
            + self.chi_prior
            + self.chi_entropy
            - self.gamma_kl
    }

    fn check_finite(&self) -> Result<()> {
        match self.named().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((term, value)) => Err(Error::NonFinite { term, value }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub terms: ElboTerms,
    /// Gradients in [`VariationalParams::tensors`] order; empty if not requested.
    pub grads: Vec<Tensor>,
    /// Unbiased estimate of `<sum_j r_w,j^2>` over the whole family.
    pub res_cons: f64,
    /// `<sum_i lambda_c,i r_c,i^2>`.
    pub res_const: f64,
    /// `<sum_i |u_hat_i - u(z, s_i)|^2>`.
    pub data_fit: f64,
}

/// Whether to refresh `q(lambda_c)` and `q(theta)` from this iteration's
/// samples before forming the ELBO.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperUpdate {
    Frozen,
    Update,
}

fn gaussian_entropy_const(d: usize) -> f64 {
    0.5 * d as f64 * (1.0 + (2.0 * PI).ln())
}

/// Entropy of `N(m, L L^T + diag(exp(2 log_s)))` via the matrix determinant lemma.
fn lowrank_entropy<'t>(tape: &'t Tape, l: Var<'t>, log_s: Var<'t>) -> Var<'t> {
    let (d, r) = l.shape();
    let mut h = log_s.sum().offset(gaussian_entropy_const(d));
    if r > 0 {
        let w = l * log_s.t().scale(-2.0).exp();
        let m = l.t().matmul(w) + tape.constant(Tensor::identity(r));
        h = h + m.logdet_spd().scale(0.5);
    }
    h
}

fn col_means(t: &Tensor) -> Vec<f64> {
    let (r, c) = t.shape();
    let mut m = vec![0.0; c];
    for i in 0..r {
        for (mj, v) in m.iter_mut().zip(t.row_slice(i)) {
            *mj += v;
        }
    }
    m.iter().map(|v| v / r as f64).collect()
}

/// Monte Carlo ELBO over the samples defined by `draws`; optionally updates
/// `hyper` from the same samples first and returns parameter gradients.
pub fn elbo_estimate(
    params: &VariationalParams,
    problem: &Problem,
    draws: &Draws,
    hyper: &mut Hyper,
    update: HyperUpdate,
    with_grad: bool,
) -> Result<ElboEstimate> {
    let tape = Tape::new();
    let vars: Vec<Var> = params.tensors().into_iter().map(|t| tape.param(t.clone())).collect();
    let mlp_vars = |start: usize, net: &Mlp| {
        let n = net.n_layers();
        MlpVars {
            weights: vars[start..start + n].to_vec(),
            biases: vars[start + n..start + 2 * n].to_vec(),
        }
    };
    let nx = 2 * params.x_net.n_layers();
    let nchi = 2 * params.chi_net.n_layers();
    let (mu_z, log_sz) = (vars[0], vars[1]);
    let xv = mlp_vars(2, &params.x_net);
    let (l_x, log_sx) = (vars[2 + nx], vars[3 + nx]);
    let cv = mlp_vars(4 + nx, &params.chi_net);
    let (l_chi, log_schi) = (vars[4 + nx + nchi], vars[5 + nx + nchi]);
    let dv = mlp_vars(6 + nx + nchi, &params.disp.mlp);

    let l = draws.l();
    let inv_l = 1.0 / l as f64;
    let n_el = problem.n_elements();
    let priors = &problem.priors;
    let c = |t: &Tensor| tape.constant(t.clone());

    // reparameterized samples, one per row
    let z = mu_z + log_sz.exp() * c(&draws.eps_z);
    let x = params.x_net.forward(&xv, z) + c(&draws.eps_x[0]).matmul(l_x.t()) + log_sx.exp() * c(&draws.eps_x[1]);
    let chi = params.chi_net.forward(&cv, z)
        + c(&draws.eps_chi[0]).matmul(l_chi.t())
        + log_schi.exp() * c(&draws.eps_chi[1]);
    let zt = z.t();

    let mut terms = ElboTerms::default();
    let mut objective = tape.scalar(0.0);
    let mut est = ElboEstimate {
        value: 0.0,
        terms,
        grads: Vec::new(),
        res_cons: 0.0,
        res_const: 0.0,
        data_fit: 0.0,
    };

    // conservation residuals of the subsampled weight functions
    let n_e = problem.n_e();
    let k = draws.weights.len();
    let (g_sub, f_sub) = problem.family.select(&draws.weights);
    let rw = chi.sparse_matmul_t(&g_sub) - tape.constant(Tensor::row(f_sub));
    let rw_sq = rw.square().sum().scale(inv_l * n_e as f64 / k as f64);
    est.res_cons = rw_sq.item();
    let cons = rw_sq.scale(-0.5 * priors.lambda_e);

    // observation misfit
    let mut data = tape.scalar(0.0);
    if !problem.obs_points.is_empty() {
        let basis = params.disp.basis_on_tape(&tape, &dv, &problem.obs_points);
        let u = basis.displacement(zt);
        let mut fit = tape.scalar(0.0);
        for i in 0..2 {
            let obs = tape.constant(Tensor::col(problem.obs_values[i].clone()));
            fit = fit + (u[i] - obs).square().sum();
        }
        let fit = fit.scale(inv_l);
        est.data_fit = fit.item();
        data = fit.scale(-0.5 * priors.tau);
    }

    // constitutive residuals at the collocation points, `points x L`
    let mut rc_sq = None;
    if !problem.colloc.is_empty() {
        let basis = params.disp.basis_on_tape(&tape, &dv, &problem.colloc.points);
        let grad = basis.displacement_grad(zt);
        let idx = &problem.colloc_elements;
        let e = x.gather_cols(idx).t().exp();
        let law = linear_isotropic_stress_with(&grad, &e, problem.nu);
        let comp = |k: usize| {
            let cols: Vec<usize> = idx.iter().map(|&el| k * n_el + el).collect();
            chi.gather_cols(&cols).t()
        };
        let r = [comp(0) - law.s11, comp(1) - law.s12, comp(2) - law.s22];
        rc_sq = Some(r[0].square() + r[1].square() + r[2].square());
    }

    let jumps = x.sparse_matmul_t(&problem.jumps.b);
    let j_sq = jumps.square();

    if update == HyperUpdate::Update {
        if let Some(rc) = rc_sq {
            let m: Vec<f64> = rc.with_value(|t| (0..t.rows()).map(|i| t.row_slice(i).iter().sum::<f64>() * inv_l).collect());
            hyper.lambda_c = update_lambda_c(priors, &m)?;
        }
        hyper.theta = update_theta(priors, &j_sq.with_value(col_means))?;
    }

    let mut constitutive = tape.scalar(0.0);
    if let Some(rc) = rc_sq {
        let weighted = (tape.constant(Tensor::col(hyper.lambda_c.mean())) * rc).sum().scale(inv_l);
        est.res_const = weighted.item();
        constitutive = weighted.scale(-0.5);
    }

    let x_prior = (tape.constant(Tensor::row(hyper.theta.mean())) * j_sq).sum().scale(-0.5 * inv_l).offset(
        0.5 * hyper.theta.mean_log().iter().sum::<f64>() - 0.5 * hyper.theta.len() as f64 * (2.0 * PI).ln(),
    );
    let d_chi = 3 * n_el;
    let chi_prior = chi
        .square()
        .sum()
        .scale(-0.5 * inv_l / priors.chi_variance)
        .offset(-0.5 * d_chi as f64 * (2.0 * PI * priors.chi_variance).ln());
    let neg_z_kl = (log_sz.scale(2.0) - mu_z.square() - log_sz.scale(2.0).exp()).offset(1.0).sum().scale(0.5);
    let x_entropy = lowrank_entropy(&tape, l_x, log_sx);
    let chi_entropy = lowrank_entropy(&tape, l_chi, log_schi);

    terms.conservation = cons.item();
    terms.constitutive = constitutive.item();
    terms.data = data.item();
    terms.z_kl = -neg_z_kl.item();
    terms.x_prior = x_prior.item();
    terms.x_entropy = x_entropy.item();
    terms.chi_prior = chi_prior.item();
    terms.chi_entropy = chi_entropy.item();
    terms.gamma_kl = hyper.lambda_c.kl_to_prior(priors.a0, priors.b0) + hyper.theta.kl_to_prior(priors.a0, priors.b0);
    terms.check_finite()?;

    objective = objective + cons + constitutive + data + neg_z_kl + x_prior + x_entropy + chi_prior + chi_entropy;
    est.terms = terms;
    est.value = terms.total();
    if !est.value.is_finite() {
        return Err(Error::NonFinite {
            term: "total",
            value: est.value,
        });
    }
    if with_grad {
        let g = tape.backward(objective)?;
        est.grads = vars.iter().map(|v| g.get(*v)).collect();
    }
    Ok(est)
}

/// A plain (untaped) posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    pub chi: Vec<f64>,
}

/// `L` draws of `(z, x, chi)` by the same reparameterization as the ELBO.
pub fn sample_posterior(params: &VariationalParams, l: usize, rng: &mut impl Rng) -> Result<Vec<PosteriorSample>> {
    let d_z = params.d_z();
    let z = Tensor::from_fn(l, d_z, |_, j| {
        let e: f64 = rng.sample(StandardNormal);
        params.mu_z.data()[j] + params.log_sz.data()[j].exp() * e
    });
    let x = conditional_sample(&params.x_net, &params.l_x, &params.log_sx, &z, rng)?;
    let chi = conditional_sample(&params.chi_net, &params.l_chi, &params.log_schi, &z, rng)?;
    Ok((0..l)
        .map(|i| PosteriorSample {
            z: z.row_slice(i).to_vec(),
            x: x.row_slice(i).to_vec(),
            chi: chi.row_slice(i).to_vec(),
        })
        .collect())
}

/// `mu(z) + L eps + exp(log_s) * eps'` for each row of `z`.
pub fn conditional_sample(net: &Mlp, lf: &Tensor, log_s: &Tensor, z: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let mut out = net.forward_f64(z)?;
    let (d, r) = lf.shape();
    for i in 0..z.rows() {
        let e1: Vec<f64> = (0..r).map(|_| rng.sample(StandardNormal)).collect();
        for j in 0..d {
            let e2: f64 = rng.sample(StandardNormal);
            let low: f64 = lf.row_slice(j).iter().zip(&e1).map(|(a, b)| a * b).sum();
            let v = out.get(i, j) + low + log_s.data()[j].exp() * e2;
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Tracks window means of the ELBO for the stopping and divergence rules.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceMonitor {
    sum: f64,
    count: u64,
    previous: Option<f64>,
    /// Consecutive windows whose mean fell below the previous one.
    pub worsening: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WindowEvent {
    None,
    Converged,
    Worsening(u32),
}

impl ConvergenceMonitor {
    fn push(&mut self, elbo: f64, window: u64, tol: f64) -> WindowEvent {
        self.sum += elbo;
        self.count += 1;
        if self.count < window {
            return WindowEvent::None;
        }
        let mean = self.sum / self.count as f64;
        self.sum = 0.0;
        self.count = 0;
        let prev = self.previous.replace(mean);
        let Some(prev) = prev else {
            return WindowEvent::None;
        };
        if ((mean - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < tol {
            return WindowEvent::Converged;
        }
        if mean < prev {
            self.worsening += 1;
            WindowEvent::Worsening(self.worsening)
        } else {
            self.worsening = 0;
            WindowEvent::None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: VariationalParams,
    pub adam: AdamState,
    pub hyper: Hyper,
    /// Iterations completed so far.
    pub iteration: u64,
    pub seed: u64,
    pub monitor: ConvergenceMonitor,
    pub converged: bool,
}

impl TrainState {
    pub fn init(problem: &Problem, cfg: &InferenceConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = VariationalParams::init(problem, cfg, &mut rng)?;
        let adam = AdamState::new(
            AdamConfig {
                learning_rate: cfg.learning_rate,
                ..AdamConfig::default()
            },
            params.tensors(),
        );
        Ok(Self {
            params,
            adam,
            hyper: Hyper::init(problem),
            iteration: 0,
            seed,
            monitor: ConvergenceMonitor::default(),
            converged: false,
        })
    }

    /// Random stream of iteration `it`: independent of how training was
    /// split across resumed runs.
    pub fn iteration_rng(&self, it: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(it);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: u64,
    pub elbo: f64,
    pub res_cons: f64,
    pub res_const: f64,
    pub data_fit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: Option<String>,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    pub checkpoint: Option<&'a Path>,
    pub config_hash: Option<String>,
    /// Print a progress line at every trace row.
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// SVI iterations from `state.iteration` up to `cfg.max_iters`, or until the
/// windowed relative ELBO change drops below `cfg.conv_tol`.
pub fn train(
    problem: &Problem,
    cfg: &InferenceConfig,
    state: &mut TrainState,
    trace: &mut Vec<TraceRow>,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let save = |state: &TrainState| -> Result<()> {
        match opts.checkpoint {
            Some(path) => Checkpoint {
                version: CHECKPOINT_VERSION,
                config_hash: opts.config_hash.clone(),
                state: state.clone(),
            }
            .save(path),
            None => Ok(()),
        }
    };
    let mut warnings = Vec::new();
    while state.iteration < cfg.max_iters && !state.converged {
        let it = state.iteration;
        let mut rng = state.iteration_rng(it);
        let draws = Draws::sample(problem, &state.params, cfg.l, cfg.k, cfg.subsampling, &mut rng)?;
        let update = if it >= cfg.warmup {
            HyperUpdate::Update
        } else {
            HyperUpdate::Frozen
        };
        let est = elbo_estimate(&state.params, problem, &draws, &mut state.hyper, update, true)?;
        if it % cfg.trace_every == 0 {
            trace.push(TraceRow {
                iter: it,
                elbo: est.value,
                res_cons: est.res_cons,
                res_const: est.res_const,
                data_fit: est.data_fit,
            });
            if opts.verbose {
                eprintln!(
                    "iter {it:>7}  elbo {:>14.6e}  res_cons {:>10.3e}  res_const {:>10.3e}  data_fit {:>10.3e}",
                    est.value, est.res_cons, est.res_const, est.data_fit
                );
            }
        }
        state.adam.config.learning_rate = cfg.learning_rate_at(it);
        state.adam.ascend(&mut state.params.tensors_mut(), &est.grads)?;
        state.iteration += 1;
        if it >= cfg.warmup {
            match state.monitor.push(est.value, cfg.window, cfg.conv_tol) {
                WindowEvent::Converged => state.converged = true,
                WindowEvent::Worsening(n) if n >= 10 && n % 10 == 0 => {
                    let msg = format!("ELBO window mean has decreased for {n} consecutive windows at iteration {it}");
                    eprintln!("warning: {msg}");
                    warnings.push(msg);
                    save(state)?;
                }
                _ => {}
            }
        }
        if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 {
            save(state)?;
        }
    }
    save(state)?;
    Ok(TrainSummary {
        iterations: state.iteration,
        converged: state.converged,
        warnings,
    })
}
