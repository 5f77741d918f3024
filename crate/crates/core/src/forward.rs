//! Ground-truth generation: P1 finite-element solves for linear elasticity
//! and for the hyperelastic inclusion problem, then noisy observations.
//!
//! Displacements are stored node-interleaved: dof `2 * node + component`.
//! The hyperelastic problem uses the same weak form as the linear one,
//! `sum_e A_e sigma(grad u) : grad w = traction work`, with the nonlinear law
//! evaluated on the undeformed mesh.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::banded::BandedMatrix;
use crate::constitutive::{
    linear_isotropic_stress_with, transiso_constants, transiso_stress_with, Grad2, IsoParams, Sym2,
    TransIsoParams,
};
use crate::error::{Error, Result};
use crate::mesh::{regular_points, Point, Side, TriMesh};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirichletDof {
    pub node: usize,
    pub comp: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeumannEdge {
    pub nodes: [usize; 2],
    pub traction: [f64; 2],
}

/// Layout of the standard loading: one side clamped, a uniform traction on
/// another, the remaining sides traction free.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadCase {
    pub fixed_side: Side,
    pub loaded_side: Side,
    pub traction: [f64; 2],
}

impl Default for LoadCase {
    fn default() -> Self {
        Self {
            fixed_side: Side::Left,
            loaded_side: Side::Right,
            traction: [-0.1, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub dirichlet: Vec<DirichletDof>,
    pub neumann: Vec<NeumannEdge>,
}

impl BoundaryConditions {
    pub fn new(mesh: &TriMesh, dirichlet: Vec<DirichletDof>, neumann: Vec<NeumannEdge>) -> Result<Self> {
        let mut seen = vec![false; 2 * mesh.n_nodes()];
        for d in &dirichlet {
            if d.node >= mesh.n_nodes() || d.comp > 1 {
                return Err(Error::InvalidArgument(format!("Dirichlet dof ({}, {}) out of range", d.node, d.comp)));
            }
            let k = 2 * d.node + d.comp;
            if seen[k] {
                return Err(Error::InvalidArgument(format!(
                    "node {} component {} constrained twice",
                    d.node, d.comp
                )));
            }
            seen[k] = true;
        }
        let boundary: Vec<[usize; 2]> = [Side::Bottom, Side::Right, Side::Top, Side::Left]
            .iter()
            .flat_map(|&s| mesh.boundary_edges(s))
            .map(|(a, b, _)| [a.min(b), a.max(b)])
            .collect();
        for e in &neumann {
            let [a, b] = e.nodes;
            if !boundary.contains(&[a.min(b), a.max(b)]) {
                return Err(Error::InvalidArgument(format!("edge ({a}, {b}) is not a boundary edge")));
            }
        }
        Ok(Self { dirichlet, neumann })
    }

    pub fn from_load_case(mesh: &TriMesh, case: &LoadCase) -> Result<Self> {
        if case.fixed_side == case.loaded_side {
            return Err(Error::InvalidArgument("fixed and loaded sides coincide".into()));
        }
        let dirichlet = mesh
            .side_nodes(case.fixed_side)
            .into_iter()
            .flat_map(|node| (0..2).map(move |comp| DirichletDof { node, comp, value: 0.0 }))
            .collect();
        let neumann = mesh
            .boundary_edges(case.loaded_side)
            .into_iter()
            .map(|(a, b, _)| NeumannEdge {
                nodes: [a, b],
                traction: case.traction,
            })
            .collect();
        Self::new(mesh, dirichlet, neumann)
    }

    /// Both components prescribed on every boundary node from `g`.
    pub fn prescribed_boundary(mesh: &TriMesh, g: impl Fn(Point) -> [f64; 2]) -> Self {
        let dirichlet = (0..mesh.n_nodes())
            .filter(|&k| mesh.is_boundary_node(k))
            .flat_map(|node| {
                let v = g(mesh.node(node));
                (0..2).map(move |comp| DirichletDof {
                    node,
                    comp,
                    value: v[comp],
                })
            })
            .collect();
        Self {
            dirichlet,
            neumann: Vec::new(),
        }
    }

    /// Largest traction magnitude, the force scale for solver tolerances.
    pub fn traction_scale(&self) -> f64 {
        self.neumann
            .iter()
            .map(|e| e.traction[0].hypot(e.traction[1]))
            .fold(0.0, f64::max)
    }

    /// Consistent nodal forces of the edge tractions (full dof vector).
    pub fn load_vector(&self, mesh: &TriMesh) -> Vec<f64> {
        let mut f = vec![0.0; 2 * mesh.n_nodes()];
        for e in &self.neumann {
            let [a, b] = e.nodes;
            let (pa, pb) = (mesh.node(a), mesh.node(b));
            let len = (pb[0] - pa[0]).hypot(pb[1] - pa[1]);
            for node in [a, b] {
                for c in 0..2 {
                    f[2 * node + c] += 0.5 * len * e.traction[c];
                }
            }
        }
        f
    }

    /// Total applied force.
    pub fn resultant(&self, mesh: &TriMesh) -> [f64; 2] {
        let f = self.load_vector(mesh);
        let mut r = [0.0; 2];
        for (k, v) in f.iter().enumerate() {
            r[k % 2] += v;
        }
        r
    }
}

/// Circular inclusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inclusion {
    pub center: Point,
    pub radius: f64,
}

impl Inclusion {
    pub fn contains(&self, s: Point) -> bool {
        (s[0] - self.center[0]).hypot(s[1] - self.center[1]) <= self.radius
    }

    /// Distance from `s` to the inclusion boundary.
    pub fn boundary_distance(&self, s: Point) -> f64 {
        ((s[0] - self.center[0]).hypot(s[1] - self.center[1]) - self.radius).abs()
    }
}

impl Default for Inclusion {
    fn default() -> Self {
        Self {
            center: [0.5, 0.5],
            radius: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum Material {
    LinearIso(IsoParams),
    TransIso(TransIsoParams),
}

/// Per-element constitutive law: a table of distinct materials plus an index
/// per element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialMap {
    pub background: IsoParams,
    pub materials: Vec<Material>,
    pub assignment: Vec<usize>,
}

impl MaterialMap {
    pub fn uniform(mesh: &TriMesh, background: IsoParams) -> Result<Self> {
        background.validate()?;
        Ok(Self {
            background,
            materials: vec![Material::LinearIso(background)],
            assignment: vec![0; mesh.n_elements()],
        })
    }

    /// Elements whose centroid lies in the inclusion get `inclusion_law`.
    pub fn with_inclusion(
        mesh: &TriMesh,
        background: IsoParams,
        inclusion_law: Material,
        inclusion: &Inclusion,
    ) -> Result<Self> {
        if !(inclusion.radius > 0.0) {
            return Err(Error::InvalidArgument(format!("inclusion radius must be positive, got {}", inclusion.radius)));
        }
        let mut map = Self::uniform(mesh, background)?;
        map.materials.push(inclusion_law);
        map.validate()?;
        for (e, slot) in map.assignment.iter_mut().enumerate() {
            if inclusion.contains(mesh.centroid(e)) {
                *slot = 1;
            }
        }
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        self.background.validate()?;
        for m in &self.materials {
            match m {
                Material::LinearIso(p) => p.validate()?,
                Material::TransIso(p) => {
                    transiso_constants(p)?;
                }
            }
        }
        if let Some(&k) = self.assignment.iter().find(|&&k| k >= self.materials.len()) {
            return Err(Error::InvalidArgument(format!("material index {k} out of range")));
        }
        Ok(())
    }

    pub fn material(&self, e: usize) -> &Material {
        &self.materials[self.assignment[e]]
    }
}

pub fn element_grad_u(mesh: &TriMesh, u: &[f64], e: usize) -> Grad2<f64> {
    let g = mesh.elem_grad(e);
    let mut out = [[0.0; 2]; 2];
    for (a, &node) in mesh.element(e).iter().enumerate() {
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] += u[2 * node + i] * g[a][j];
            }
        }
    }
    out
}

/// `sum_e A_e B_e^T sigma_e`, the discrete divergence of a piecewise-constant
/// stress field tested against every hat function (full dof vector).
pub fn internal_force(mesh: &TriMesh, stress: &[Sym2<f64>]) -> Vec<f64> {
    let mut f = vec![0.0; 2 * mesh.n_nodes()];
    for (e, s) in stress.iter().enumerate() {
        let g = mesh.elem_grad(e);
        let area = mesh.elem_area(e);
        let m = s.to_matrix();
        for (a, &node) in mesh.element(e).iter().enumerate() {
            for i in 0..2 {
                f[2 * node + i] += area * (m[i][0] * g[a][0] + m[i][1] * g[a][1]);
            }
        }
    }
    f
}

/// Full (unconstrained) linear-elastic stiffness matrix.
pub fn assemble_stiffness(mesh: &TriMesh, e_field: &[f64], nu: f64) -> Result<CsrMatrix> {
    if e_field.len() != mesh.n_elements() {
        return Err(Error::InvalidArgument(format!(
            "E field has {} entries for {} elements",
            e_field.len(),
            mesh.n_elements()
        )));
    }
    let mut trip = Vec::with_capacity(36 * mesh.n_elements());
    for (e, &young) in e_field.iter().enumerate() {
        let (lambda, mu) = IsoParams::new(young, nu)?.lame();
        let g = mesh.elem_grad(e);
        let area = mesh.elem_area(e);
        let nodes = mesh.element(e);
        for a in 0..3 {
            for b in 0..3 {
                let gg = g[a][0] * g[b][0] + g[a][1] * g[b][1];
                for i in 0..2 {
                    for j in 0..2 {
                        let mut v = lambda * g[a][i] * g[b][j] + mu * g[a][j] * g[b][i];
                        if i == j {
                            v += mu * gg;
                        }
                        trip.push((2 * nodes[a] + i, 2 * nodes[b] + j, area * v));
                    }
                }
            }
        }
    }
    let n = 2 * mesh.n_nodes();
    Ok(CsrMatrix::from_triplets(n, n, &trip))
}

/// Split of the dofs into free and Dirichlet-constrained ones.
#[derive(Debug, Clone)]
pub struct DofMap {
    pub free: Vec<usize>,
    free_index: Vec<Option<usize>>,
    /// Full dof vector holding the prescribed values (zero on free dofs).
    pub prescribed: Vec<f64>,
}

impl DofMap {
    pub fn new(mesh: &TriMesh, bc: &BoundaryConditions) -> Self {
        let n = 2 * mesh.n_nodes();
        let mut prescribed = vec![0.0; n];
        let mut fixed = vec![false; n];
        for d in &bc.dirichlet {
            fixed[2 * d.node + d.comp] = true;
            prescribed[2 * d.node + d.comp] = d.value;
        }
        let free: Vec<usize> = (0..n).filter(|&k| !fixed[k]).collect();
        let mut free_index = vec![None; n];
        for (i, &k) in free.iter().enumerate() {
            free_index[k] = Some(i);
        }
        Self {
            free,
            free_index,
            prescribed,
        }
    }

    pub fn free_index(&self, dof: usize) -> Option<usize> {
        self.free_index[dof]
    }

    pub fn is_fixed(&self, dof: usize) -> bool {
        self.free_index[dof].is_none()
    }

    /// Full dof vector from free values plus prescribed values.
    pub fn expand(&self, u_free: &[f64]) -> Vec<f64> {
        let mut u = self.prescribed.clone();
        for (i, &k) in self.free.iter().enumerate() {
            u[k] = u_free[i];
        }
        u
    }

    fn half_bandwidth(mesh: &TriMesh) -> usize {
        // neighbouring nodes differ by at most n + 1 in index
        2 * (mesh.n_nodes_per_side() + 1) + 1
    }
}

/// Reduced linear system after Dirichlet elimination.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub stiffness: BandedMatrix,
    pub load: Vec<f64>,
    pub dofs: DofMap,
    pub full_stiffness: CsrMatrix,
}

impl LinearSystem {
    /// Solve and return the full nodal displacement vector.
    pub fn solve(&self) -> Result<Vec<f64>> {
        let u = solve_linear(&self.stiffness, &self.load)?;
        Ok(self.dofs.expand(&u))
    }
}

pub fn assemble_linear_system(
    mesh: &TriMesh,
    e_field: &[f64],
    nu: f64,
    bc: &BoundaryConditions,
) -> Result<LinearSystem> {
    if bc.dirichlet.is_empty() {
        return Err(Error::Singular("no Dirichlet constraints; rigid-body modes remain".into()));
    }
    let full = assemble_stiffness(mesh, e_field, nu)?;
    let dofs = DofMap::new(mesh, bc);
    let f_full = bc.load_vector(mesh);
    let n_free = dofs.free.len();
    let mut k = BandedMatrix::zeros(n_free, DofMap::half_bandwidth(mesh));
    let mut load: Vec<f64> = dofs.free.iter().map(|&d| f_full[d]).collect();
    for (i, &r) in dofs.free.iter().enumerate() {
        for (c, v) in full.row(r) {
            match dofs.free_index(c) {
                Some(j) => k.add(i, j, v),
                None => load[i] -= v * dofs.prescribed[c],
            }
        }
    }
    Ok(LinearSystem {
        stiffness: k,
        load,
        dofs,
        full_stiffness: full,
    })
}

/// Banded Cholesky solve with a relative residual check.
pub fn solve_linear(k: &BandedMatrix, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != k.n() {
        return Err(Error::InvalidArgument(format!("load has {} entries for {} unknowns", f.len(), k.n())));
    }
    let u = k.clone().cholesky()?.solve(f);
    let fnorm = norm2(f);
    if fnorm > 0.0 {
        let r: Vec<f64> = k.matvec(&u).iter().zip(f).map(|(a, b)| a - b).collect();
        let rel = norm2(&r) / fnorm;
        if !(rel < 1e-10) {
            return Err(Error::Solver(format!("relative residual {rel:.3e} after direct solve")));
        }
    }
    Ok(u)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Element stresses and their derivatives `d sigma_c / d G_k`, with `G`
/// flattened as `(G11, G12, G21, G22)` and `c` over `(s11, s12, s22)`.
/// Derivatives come from one batched tape per material.
fn stress_and_tangent(
    mesh: &TriMesh,
    map: &MaterialMap,
    u: &[f64],
) -> Result<(Vec<Sym2<f64>>, Vec<[[f64; 4]; 3]>)> {
    let ne = mesh.n_elements();
    let grads: Vec<Grad2<f64>> = (0..ne).map(|e| element_grad_u(mesh, u, e)).collect();
    for g in &grads {
        let j = (1.0 + g[0][0]) * (1.0 + g[1][1]) - g[0][1] * g[1][0];
        if !(j > 0.0) {
            return Err(Error::InvertedElement(j));
        }
    }
    let mut stress = vec![
        Sym2 {
            s11: 0.0,
            s12: 0.0,
            s22: 0.0
        };
        ne
    ];
    let mut tangent = vec![[[0.0; 4]; 3]; ne];
    for (k, material) in map.materials.iter().enumerate() {
        let elems: Vec<usize> = (0..ne).filter(|&e| map.assignment[e] == k).collect();
        if elems.is_empty() {
            continue;
        }
        let tape = Tape::new();
        let comp = |i: usize, j: usize| tape.param(Tensor::row(elems.iter().map(|&e| grads[e][i][j]).collect()));
        let g: [Var; 4] = [comp(0, 0), comp(0, 1), comp(1, 0), comp(1, 1)];
        let gu = [[g[0], g[1]], [g[2], g[3]]];
        let s = match material {
            Material::LinearIso(p) => {
                let e = tape.scalar(p.e);
                linear_isotropic_stress_with(&gu, &e, p.nu)
            }
            Material::TransIso(p) => transiso_stress_with(&gu, &transiso_constants(p)?, p.axis),
        };
        let comps = s.to_array();
        for (c, sc) in comps.iter().enumerate() {
            let value = sc.value();
            let grads_c = tape.backward(sc.sum())?;
            let dg: Vec<Tensor> = g.iter().map(|&v| grads_c.get(v)).collect();
            for (local, &e) in elems.iter().enumerate() {
                let x = value.data()[local];
                match c {
                    0 => stress[e].s11 = x,
                    1 => stress[e].s12 = x,
                    _ => stress[e].s22 = x,
                }
                for kk in 0..4 {
                    tangent[e][c][kk] = dg[kk].data()[local];
                }
            }
        }
    }
    Ok((stress, tangent))
}

/// Per-element stresses of the displacement field `u`.
pub fn element_stresses(mesh: &TriMesh, map: &MaterialMap, u: &[f64]) -> Result<Vec<Sym2<f64>>> {
    Ok(stress_and_tangent(mesh, map, u)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonOptions {
    /// Absolute tolerance on the free-dof force residual (infinity norm);
    /// `None` means `1e-9` times the traction scale.
    pub tol: Option<f64>,
    pub max_iters: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: None,
            max_iters: 50,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonSolution {
    pub u: Vec<f64>,
    /// Residual infinity norm before each iteration, ending with the
    /// converged value.
    pub residuals: Vec<f64>,
}

/// Stress component index of `sigma[i][l]` in `(s11, s12, s22)` order.
const SYM_INDEX: [[usize; 2]; 2] = [[0, 1], [1, 2]];

/// Newton iteration with an exact (autodiff) tangent and step halving,
/// started from the linear solution for the background law.
pub fn solve_hyperelastic(
    mesh: &TriMesh,
    map: &MaterialMap,
    bc: &BoundaryConditions,
    opts: &NewtonOptions,
) -> Result<NewtonSolution> {
    map.validate()?;
    if map.assignment.len() != mesh.n_elements() {
        return Err(Error::InvalidArgument("material map does not match the mesh".into()));
    }
    let tol = opts.tol.unwrap_or(1e-9 * bc.traction_scale());
    let e_bg = vec![map.background.e; mesh.n_elements()];
    let lin = assemble_linear_system(mesh, &e_bg, map.background.nu, bc)?;
    let dofs = &lin.dofs;
    let f_ext = bc.load_vector(mesh);
    let mut u = lin.solve()?;

    let residual = |stress: &[Sym2<f64>]| -> Vec<f64> {
        let f_int = internal_force(mesh, stress);
        dofs.free.iter().map(|&d| f_int[d] - f_ext[d]).collect()
    };

    let (stress, mut tangent) = stress_and_tangent(mesh, map, &u)?;
    let mut r = residual(&stress);
    let mut history = vec![norm_inf(&r)];
    for _ in 0..opts.max_iters {
        if *history.last().unwrap() <= tol {
            return Ok(NewtonSolution { u, residuals: history });
        }
        let mut kt = BandedMatrix::zeros(dofs.free.len(), DofMap::half_bandwidth(mesh));
        for e in 0..mesh.n_elements() {
            let g = mesh.elem_grad(e);
            let area = mesh.elem_area(e);
            let nodes = mesh.element(e);
            let d = &tangent[e];
            for a in 0..3 {
                for i in 0..2 {
                    let Some(row) = dofs.free_index(2 * nodes[a] + i) else { continue };
                    for b in 0..3 {
                        for j in 0..2 {
                            let Some(col) = dofs.free_index(2 * nodes[b] + j) else { continue };
                            let mut v = 0.0;
                            for l in 0..2 {
                                for m in 0..2 {
                                    v += d[SYM_INDEX[i][l]][2 * j + m] * g[a][l] * g[b][m];
                                }
                            }
                            kt.add(row, col, area * v);
                        }
                    }
                }
            }
        }
        let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
        let du = kt.lu()?.solve(&rhs);

        let r_old = *history.last().unwrap();
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let mut trial = u.clone();
            for (i, &d) in dofs.free.iter().enumerate() {
                trial[d] += step * du[i];
            }
            if let Ok((s, t)) = stress_and_tangent(mesh, map, &trial) {
                let rt = residual(&s);
                if norm_inf(&rt) < r_old {
                    accepted = Some((trial, t, rt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((un, t, rn)) = accepted else {
            return Err(Error::Solver(format!(
                "Newton step halving exhausted at residual {r_old:.3e} (tolerance {tol:.3e})"
            )));
        };
        u = un;
        tangent = t;
        r = rn;
        history.push(norm_inf(&r));
    }
    if *history.last().unwrap() <= tol {
        return Ok(NewtonSolution { u, residuals: history });
    }
    Err(Error::Solver(format!(
        "Newton did not converge in {} iterations, residual {:.3e} (tolerance {tol:.3e})",
        opts.max_iters,
        history.last().unwrap()
    )))
}

/// Ground truth for the inclusion experiment.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub mesh: TriMesh,
    pub u_nodes: Vec<f64>,
    pub material_map: MaterialMap,
    pub inclusion: Inclusion,
    pub bc: BoundaryConditions,
}

impl GroundTruth {
    pub fn generate(
        n_nodes_per_side: usize,
        load: &LoadCase,
        background: IsoParams,
        inclusion_law: TransIsoParams,
        inclusion: Inclusion,
        opts: &NewtonOptions,
    ) -> Result<Self> {
        let mesh = TriMesh::build_grid(n_nodes_per_side)?;
        let bc = BoundaryConditions::from_load_case(&mesh, load)?;
        let map = MaterialMap::with_inclusion(&mesh, background, Material::TransIso(inclusion_law), &inclusion)?;
        let sol = solve_hyperelastic(&mesh, &map, &bc, opts)?;
        Ok(Self {
            mesh,
            u_nodes: sol.u,
            material_map: map,
            inclusion,
            bc,
        })
    }

    /// Largest nodal displacement magnitude.
    pub fn max_displacement(&self) -> f64 {
        self.u_nodes
            .chunks(2)
            .map(|u| u[0].hypot(u[1]))
            .fold(0.0, f64::max)
    }

    /// Precision giving a noise standard deviation of `fraction` times the
    /// largest displacement.
    pub fn default_tau(&self, fraction: f64) -> f64 {
        let sd = fraction * self.max_displacement();
        1.0 / (sd * sd)
    }
}

/// Noisy displacement observations on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationGrid {
    pub n: usize,
    pub points: Vec<Point>,
    /// Observed displacements, `[u1, u2]` per point.
    pub values: Vec<[f64; 2]>,
    pub tau: f64,
}

pub fn sample_observations(gt: &GroundTruth, obs_grid_n: usize, tau: f64, seed: u64) -> Result<ObservationGrid> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("noise precision must be positive, got {tau}")));
    }
    if obs_grid_n < 2 {
        return Err(Error::InvalidArgument("observation grid needs at least 2 points per side".into()));
    }
    let points = regular_points(obs_grid_n);
    let sd = tau.powf(-0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(points.len());
    for &s in &points {
        let u = gt.mesh.interpolate(&gt.u_nodes, 2, s)?;
        let e1: f64 = StandardNormal.sample(&mut rng);
        let e2: f64 = StandardNormal.sample(&mut rng);
        values.push([u[0] + sd * e1, u[1] + sd * e2]);
    }
    Ok(ObservationGrid {
        n: obs_grid_n,
        points,
        values,
        tau,
    })
}
