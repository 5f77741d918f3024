//! Weighted conservation residuals, collocation constitutive residuals,
//! weight-function families and their subsampling.
//!
//! A weight function is a combination of vector hat functions, stored as
//! `(dof, coefficient)` pairs with `dof = 2 * node + component`. For an
//! element-wise constant stress the weighted residual is linear in the stress
//! coefficients, `r = G chi - f`, and is assembled once as a sparse operator.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constitutive::{linear_isotropic_stress, Grad2, IsoParams, Sym2};
use crate::error::{Error, Result};
use crate::fields::{DisplacementNet, MaterialField, StressField};
use crate::forward::{BoundaryConditions, DofMap};
use crate::mesh::{Point, TriMesh};
use crate::sparse::CsrMatrix;

/// Number of nodal functions in each random combination.
const COMBINATION_SIZE: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFunction {
    pub coeffs: Vec<(usize, f64)>,
}

impl WeightFunction {
    pub fn nodal(dof: usize) -> Self {
        Self {
            coeffs: vec![(dof, 1.0)],
        }
    }

    pub fn eval(&self, mesh: &TriMesh, s: Point) -> Result<[f64; 2]> {
        let mut out = [0.0; 2];
        for &(dof, c) in &self.coeffs {
            let h = mesh.hat_function_eval(dof / 2, s)?;
            out[dof % 2] += c * h;
        }
        Ok(out)
    }

    /// `grad w` on every element of the support, `g[i][j] = dw_i/ds_j`.
    pub fn element_grads(&self, mesh: &TriMesh) -> BTreeMap<usize, Grad2<f64>> {
        let mut coef = BTreeMap::new();
        for &(dof, c) in &self.coeffs {
            *coef.entry(dof).or_insert(0.0) += c;
        }
        let mut out: BTreeMap<usize, Grad2<f64>> = BTreeMap::new();
        for (e, nodes) in mesh.elements().iter().enumerate() {
            let g = mesh.elem_grad(e);
            let mut grad = [[0.0; 2]; 2];
            let mut touched = false;
            for (a, &node) in nodes.iter().enumerate() {
                for i in 0..2 {
                    if let Some(&c) = coef.get(&(2 * node + i)) {
                        touched = true;
                        grad[i][0] += c * g[a][0];
                        grad[i][1] += c * g[a][1];
                    }
                }
            }
            if touched {
                out.insert(e, grad);
            }
        }
        out
    }
}

/// `D` with `D chi` the nodal internal forces (`2 * nodes` rows) of the
/// element-wise constant stress with component-major coefficients `chi`.
pub fn divergence_operator(mesh: &TriMesh) -> CsrMatrix {
    let ne = mesh.n_elements();
    let mut trip = Vec::with_capacity(12 * ne);
    for e in 0..ne {
        let g = mesh.elem_grad(e);
        let area = mesh.elem_area(e);
        for (a, &node) in mesh.element(e).iter().enumerate() {
            // f_0 = A (s11 g_0 + s12 g_1), f_1 = A (s12 g_0 + s22 g_1)
            trip.push((2 * node, e, area * g[a][0]));
            trip.push((2 * node, ne + e, area * g[a][1]));
            trip.push((2 * node + 1, ne + e, area * g[a][0]));
            trip.push((2 * node + 1, 2 * ne + e, area * g[a][1]));
        }
    }
    CsrMatrix::from_triplets(2 * mesh.n_nodes(), 3 * ne, &trip)
}

/// Indexed family of admissible weight functions with the assembled
/// residual operator `r = G chi - f`.
#[derive(Debug, Clone)]
pub struct WeightFamily {
    pub functions: Vec<WeightFunction>,
    /// The first `n_nodal` functions are the single hat functions.
    pub n_nodal: usize,
    pub operator: Rc<CsrMatrix>,
    pub load: Vec<f64>,
}

impl WeightFamily {
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// All residuals for component-major stress coefficients.
    pub fn residuals(&self, chi: &[f64]) -> Vec<f64> {
        self.operator.matvec(chi).iter().zip(&self.load).map(|(a, b)| a - b).collect()
    }

    /// Operator rows and load entries for the given indices (repeats kept).
    pub fn select(&self, idx: &[usize]) -> (Rc<CsrMatrix>, Vec<f64>) {
        (Rc::new(self.operator.select_rows(idx)), idx.iter().map(|&i| self.load[i]).collect())
    }
}

/// All nodal vector hat functions on non-Dirichlet dofs, then (if `n_e`
/// asks for more) seeded random `+-1` combinations of 12 of them.
pub fn generate_weight_functions(
    mesh: &TriMesh,
    bc: &BoundaryConditions,
    n_e: Option<usize>,
    seed: u64,
) -> Result<WeightFamily> {
    let dofs = DofMap::new(mesh, bc);
    let mut functions: Vec<WeightFunction> = dofs.free.iter().map(|&d| WeightFunction::nodal(d)).collect();
    let n_nodal = functions.len();
    let target = n_e.unwrap_or(n_nodal);
    if target == 0 {
        return Err(Error::InvalidArgument("weight family must not be empty".into()));
    }
    if target < n_nodal {
        functions.truncate(target);
    } else if target > n_nodal {
        if n_nodal < COMBINATION_SIZE {
            return Err(Error::InvalidArgument(format!(
                "only {n_nodal} nodal functions; cannot form combinations of {COMBINATION_SIZE}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in n_nodal..target {
            let mut picks: Vec<usize> = sample(&mut rng, n_nodal, COMBINATION_SIZE).into_vec();
            picks.sort_unstable();
            let coeffs = picks
                .into_iter()
                .map(|k| (dofs.free[k], if rng.random::<bool>() { 1.0 } else { -1.0 }))
                .collect();
            functions.push(WeightFunction { coeffs });
        }
    }

    let d = divergence_operator(mesh);
    let f_ext = bc.load_vector(mesh);
    let mut trip = Vec::new();
    let mut load = Vec::with_capacity(functions.len());
    for (r, w) in functions.iter().enumerate() {
        let mut row: BTreeMap<usize, f64> = BTreeMap::new();
        let mut f = 0.0;
        for &(dof, c) in &w.coeffs {
            for (col, v) in d.row(dof) {
                *row.entry(col).or_insert(0.0) += c * v;
            }
            f += c * f_ext[dof];
        }
        trip.extend(row.into_iter().map(|(col, v)| (r, col, v)));
        load.push(f);
    }
    Ok(WeightFamily {
        operator: Rc::new(CsrMatrix::from_triplets(functions.len(), 3 * mesh.n_elements(), &trip)),
        functions,
        n_nodal: n_nodal.min(target),
        load,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subsampling {
    WithReplacement,
    WithoutReplacement,
}

/// `k` indices out of `n_e`; uniform with replacement by default.
pub fn subsample(k: usize, n_e: usize, mode: Subsampling, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if k == 0 || k > n_e {
        return Err(Error::InvalidArgument(format!("cannot subsample {k} of {n_e} weight functions")));
    }
    Ok(match mode {
        Subsampling::WithReplacement => (0..k).map(|_| rng.random_range(0..n_e)).collect(),
        Subsampling::WithoutReplacement => sample(rng, n_e, k).into_vec(),
    })
}

/// `(n_e / k) * sum` of the subsampled terms, an unbiased estimate of the
/// full sum.
pub fn scaled_subsample_sum(terms: &[f64], n_e: usize) -> f64 {
    n_e as f64 / terms.len() as f64 * terms.iter().sum::<f64>()
}

/// `sum_e A_e sigma_e : grad w_e - int f . w`, exact for element-wise
/// constant stress.
pub fn conservation_residual(
    mesh: &TriMesh,
    chi: &StressField,
    w: &WeightFunction,
    bc: &BoundaryConditions,
) -> Result<f64> {
    if chi.n_elements() != mesh.n_elements() {
        return Err(Error::InvalidArgument("stress field does not match the mesh".into()));
    }
    let mut r = 0.0;
    for (e, g) in w.element_grads(mesh) {
        r += mesh.elem_area(e) * contract(&chi.element(e), &g);
    }
    Ok(r - boundary_work(mesh, w, bc))
}

fn contract(s: &Sym2<f64>, g: &Grad2<f64>) -> f64 {
    s.s11 * g[0][0] + s.s12 * (g[0][1] + g[1][0]) + s.s22 * g[1][1]
}

/// `int_{Gamma_N} f . w`, exact for linear `w` on each edge.
fn boundary_work(mesh: &TriMesh, w: &WeightFunction, bc: &BoundaryConditions) -> f64 {
    let f = bc.load_vector(mesh);
    w.coeffs.iter().map(|&(dof, c)| c * f[dof]).sum()
}

/// Monte Carlo version of [`conservation_residual`] for a stress that varies
/// inside elements; `stress` maps a batch of points to stresses.
///
/// Points are uniform within each support element of `w`, allocated in
/// proportion to element area (largest remainder), so element-wise constant
/// integrands are integrated exactly once `n_points` covers the support.
/// With fewer points than support elements, elements are drawn uniformly by
/// area instead. The traction term stays exact.
pub fn conservation_residual_mc(
    mesh: &TriMesh,
    mut stress: impl FnMut(&[Point]) -> Result<Vec<Sym2<f64>>>,
    w: &WeightFunction,
    bc: &BoundaryConditions,
    n_points: usize,
    seed: u64,
) -> Result<f64> {
    if n_points == 0 {
        return Err(Error::InvalidArgument("need at least one integration point".into()));
    }
    let grads: Vec<(usize, Grad2<f64>)> = w.element_grads(mesh).into_iter().collect();
    if grads.is_empty() {
        return Ok(-boundary_work(mesh, w, bc));
    }
    let areas: Vec<f64> = grads.iter().map(|(e, _)| mesh.elem_area(*e)).collect();
    let total: f64 = areas.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let counts: Vec<usize> = if n_points >= grads.len() {
        let quota: Vec<f64> = areas.iter().map(|a| a / total * n_points as f64).collect();
        let mut counts: Vec<usize> = quota.iter().map(|q| (q.floor() as usize).max(1)).collect();
        let mut order: Vec<usize> = (0..grads.len()).collect();
        order.sort_by(|&i, &j| (quota[j] - quota[j].floor()).total_cmp(&(quota[i] - quota[i].floor())));
        let mut assigned: usize = counts.iter().sum();
        for &k in order.iter().cycle() {
            if assigned >= n_points {
                break;
            }
            counts[k] += 1;
            assigned += 1;
        }
        counts
    } else {
        let mut counts = vec![0; grads.len()];
        let mut cdf = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a / total;
            cdf.push(acc);
        }
        for _ in 0..n_points {
            let u: f64 = rng.random();
            counts[cdf.partition_point(|&c| c < u).min(grads.len() - 1)] += 1;
        }
        counts
    };

    let mut points = Vec::with_capacity(n_points);
    for (k, &cnt) in counts.iter().enumerate() {
        let [a, b, c] = mesh.element(grads[k].0).map(|n| mesh.node(n));
        for _ in 0..cnt {
            let (mut r1, mut r2): (f64, f64) = (rng.random(), rng.random());
            if r1 + r2 > 1.0 {
                (r1, r2) = (1.0 - r1, 1.0 - r2);
            }
            points.push([
                a[0] + r1 * (b[0] - a[0]) + r2 * (c[0] - a[0]),
                a[1] + r1 * (b[1] - a[1]) + r2 * (c[1] - a[1]),
            ]);
        }
    }
    let sig = stress(&points)?;
    if sig.len() != points.len() {
        return Err(Error::InvalidArgument("stress callback returned the wrong number of values".into()));
    }
    let stratified = n_points >= grads.len();
    let mut volume = 0.0;
    let mut offset = 0;
    for (k, &cnt) in counts.iter().enumerate() {
        let part: f64 = sig[offset..offset + cnt].iter().map(|s| contract(s, &grads[k].1)).sum();
        offset += cnt;
        volume += if stratified {
            areas[k] * part / cnt as f64
        } else {
            total * part / n_points as f64
        };
    }
    Ok(volume - boundary_work(mesh, w, bc))
}

/// Element centroids of the inversion mesh, one per element.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    pub points: Vec<Point>,
}

impl CollocationSet {
    pub fn centroids(mesh: &TriMesh) -> Self {
        Self {
            points: mesh.centroids(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `sigma(chi, s) - sigma_law(grad u(z, s), exp(m(x, s)), nu)`.
pub fn constitutive_residual(
    mesh: &TriMesh,
    net: &DisplacementNet,
    x: &MaterialField,
    z: &[f64],
    chi: &StressField,
    nu: f64,
    s: Point,
) -> Result<[f64; 3]> {
    let grad = net.eval_displacement_grad(z, s)?;
    let law = linear_isotropic_stress(&grad, &IsoParams::new(x.eval_modulus(mesh, s)?, nu)?)?;
    let sig = chi.eval(mesh, s)?;
    Ok([sig.s11 - law.s11, sig.s12 - law.s12, sig.s22 - law.s22])
}

#[cfg(test)]
mod tests;
