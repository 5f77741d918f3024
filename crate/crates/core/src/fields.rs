//! Discretized fields: element-wise constant log-modulus and stress, the
//! network displacement basis, and the jump operator of the material prior.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::constitutive::{Grad2, Sym2};
use crate::error::{Error, Result};
use crate::forward::{element_grad_u, LoadCase};
use crate::mesh::{Point, Side, TriMesh};
use crate::nn::{Activation, Mlp, MlpVars};
use crate::sparse::CsrMatrix;

/// Log Young's modulus, one value per element.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialField {
    pub x: Vec<f64>,
}

impl MaterialField {
    pub fn new(mesh: &TriMesh, x: Vec<f64>) -> Result<Self> {
        if x.len() != mesh.n_elements() {
            return Err(Error::InvalidArgument(format!(
                "material field has {} coefficients for {} elements",
                x.len(),
                mesh.n_elements()
            )));
        }
        Ok(Self { x })
    }

    pub fn eval(&self, mesh: &TriMesh, s: Point) -> Result<f64> {
        Ok(self.x[mesh.locate_element(s)?])
    }

    pub fn eval_modulus(&self, mesh: &TriMesh, s: Point) -> Result<f64> {
        Ok(self.eval(mesh, s)?.exp())
    }
}

/// Element-wise constant stress; coefficients are component-major
/// (all `s11`, then all `s12`, then all `s22`).
#[derive(Debug, Clone, PartialEq)]
pub struct StressField {
    pub chi: Vec<f64>,
}

impl StressField {
    pub fn new(mesh: &TriMesh, chi: Vec<f64>) -> Result<Self> {
        if chi.len() != 3 * mesh.n_elements() {
            return Err(Error::InvalidArgument(format!(
                "stress field has {} coefficients, expected {}",
                chi.len(),
                3 * mesh.n_elements()
            )));
        }
        Ok(Self { chi })
    }

    pub fn from_elements(stress: &[Sym2<f64>]) -> Self {
        let mut chi = Vec::with_capacity(3 * stress.len());
        chi.extend(stress.iter().map(|s| s.s11));
        chi.extend(stress.iter().map(|s| s.s12));
        chi.extend(stress.iter().map(|s| s.s22));
        Self { chi }
    }

    pub fn n_elements(&self) -> usize {
        self.chi.len() / 3
    }

    pub fn element(&self, e: usize) -> Sym2<f64> {
        let n = self.n_elements();
        Sym2 {
            s11: self.chi[e],
            s12: self.chi[n + e],
            s22: self.chi[2 * n + e],
        }
    }

    pub fn eval(&self, mesh: &TriMesh, s: Point) -> Result<Sym2<f64>> {
        if self.n_elements() != mesh.n_elements() {
            return Err(Error::InvalidArgument("stress field does not match the mesh".into()));
        }
        Ok(self.element(mesh.locate_element(s)?))
    }
}

/// Factor `d(s)` vanishing on the clamped side, so that `d(s) u_net(s)`
/// satisfies homogeneous Dirichlet data exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirichletMask {
    pub side: Option<Side>,
}

impl DirichletMask {
    pub fn for_load_case(case: &LoadCase) -> Self {
        Self {
            side: Some(case.fixed_side),
        }
    }

    pub fn factor(&self, s: Point) -> f64 {
        self.side.map_or(1.0, |side| side.distance(s))
    }

    pub fn factor_grad(&self) -> [f64; 2] {
        self.side.map_or([0.0; 2], Side::distance_grad)
    }
}

/// `d(s) * raw` for zero Dirichlet data.
pub fn apply_dirichlet_mask(raw: [f64; 2], s: Point, mask: &DirichletMask) -> [f64; 2] {
    let d = mask.factor(s);
    [d * raw[0], d * raw[1]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisplacementNetConfig {
    pub d_z: usize,
    pub hidden_layers: usize,
    pub width: usize,
}

impl Default for DisplacementNetConfig {
    fn default() -> Self {
        Self {
            d_z: 20,
            hidden_layers: 4,
            width: 20,
        }
    }
}

/// `u_i(s) = d(s) * sum_k NN(s)[i * d_z + k] * z_k`: a tanh network with a
/// sigmoid output layer provides `d_z` basis functions per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementNet {
    pub mlp: Mlp,
    pub d_z: usize,
    pub mask: DirichletMask,
}

/// Masked basis and its spatial derivatives at a batch of points, on a tape.
/// `phi[i]` is `points x d_z`; `dphi[i][j]` is its derivative along `s_j`.
#[derive(Clone, Copy)]
pub struct BasisOnTape<'t> {
    pub phi: [Var<'t>; 2],
    pub dphi: [[Var<'t>; 2]; 2],
}

impl<'t> BasisOnTape<'t> {
    /// Displacements for latent columns `z` (`d_z x L`), each `points x L`.
    pub fn displacement(&self, z: Var<'t>) -> [Var<'t>; 2] {
        [self.phi[0].matmul(z), self.phi[1].matmul(z)]
    }

    /// `grad[i][j]` is `du_i/ds_j`, each `points x L`.
    pub fn displacement_grad(&self, z: Var<'t>) -> Grad2<Var<'t>> {
        let d = &self.dphi;
        [[d[0][0].matmul(z), d[0][1].matmul(z)], [d[1][0].matmul(z), d[1][1].matmul(z)]]
    }
}

impl DisplacementNet {
    pub fn new(cfg: &DisplacementNetConfig, mask: DirichletMask, rng: &mut impl Rng) -> Result<Self> {
        if cfg.d_z == 0 || cfg.width == 0 {
            return Err(Error::InvalidArgument("d_z and width must be positive".into()));
        }
        let mut sizes = vec![2];
        sizes.extend(std::iter::repeat_n(cfg.width, cfg.hidden_layers));
        sizes.push(2 * cfg.d_z);
        Ok(Self {
            mlp: Mlp::new(&sizes, Activation::Tanh, Activation::Sigmoid, rng)?,
            d_z: cfg.d_z,
            mask,
        })
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.d_z {
            return Err(Error::InvalidArgument(format!("z has length {}, expected {}", z.len(), self.d_z)));
        }
        Ok(())
    }

    /// Unmasked network output, reshaped to `(2, d_z)`.
    pub fn raw_basis(&self, s: Point) -> Result<[Vec<f64>; 2]> {
        let out = self.mlp.forward_f64(&Tensor::row(s.to_vec()))?;
        let d = out.data();
        Ok([d[..self.d_z].to_vec(), d[self.d_z..].to_vec()])
    }

    pub fn eval_displacement(&self, z: &[f64], s: Point) -> Result<[f64; 2]> {
        self.check_z(z)?;
        let b = self.raw_basis(s)?;
        let dot = |row: &[f64]| row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
        Ok(apply_dirichlet_mask([dot(&b[0]), dot(&b[1])], s, &self.mask))
    }

    /// `du_i/ds_j` by reverse-mode differentiation with respect to `s`.
    pub fn eval_displacement_grad(&self, z: &[f64], s: Point) -> Result<Grad2<f64>> {
        self.check_z(z)?;
        let tape = Tape::new();
        let vars = self.mlp.register(&tape, false);
        let sv = tape.param(Tensor::row(s.to_vec()));
        let raw = self.mlp.forward(&vars, sv);
        let zc = tape.constant(Tensor::col(z.to_vec()));
        let dg = self.mask.factor_grad();
        let d = sv.matmul(tape.constant(Tensor::col(dg.to_vec()))).offset(self.mask.factor(s) - dg[0] * s[0] - dg[1] * s[1]);
        let mut out = [[0.0; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            let ui = d * raw.cols_range(i * self.d_z, (i + 1) * self.d_z).matmul(zc);
            let g = tape.backward(ui)?.get(sv);
            *row = [g.data()[0], g.data()[1]];
        }
        Ok(out)
    }

    /// Masked basis with spatial derivatives at `points`, differentiable in
    /// the network weights `vars`.
    pub fn basis_on_tape<'t>(&self, tape: &'t Tape, vars: &MlpVars<'t>, points: &[Point]) -> BasisOnTape<'t> {
        let coords = Tensor::from_fn(points.len(), 2, |i, j| points[i][j]);
        let (out, dout) = self.mlp.forward_with_input_tangents(vars, tape.constant(coords));
        let d = tape.constant(Tensor::col(points.iter().map(|&s| self.mask.factor(s)).collect()));
        let dg = self.mask.factor_grad();
        let split = |v: Var<'t>| [v.cols_range(0, self.d_z), v.cols_range(self.d_z, 2 * self.d_z)];
        let raw = split(out);
        let draw = [split(dout[0]), split(dout[1])];
        let phi = [d * raw[0], d * raw[1]];
        let dphi = std::array::from_fn(|i| {
            std::array::from_fn(|j| {
                let masked = d * draw[j][i];
                if dg[j] == 0.0 {
                    masked
                } else {
                    masked + raw[i].scale(dg[j])
                }
            })
        });
        BasisOnTape { phi, dphi }
    }
}

/// Piecewise-linear displacement from nodal values (interleaved components).
pub fn eval_nodal_displacement(mesh: &TriMesh, u: &[f64], s: Point) -> Result<[f64; 2]> {
    let v = mesh.interpolate(u, 2, s)?;
    Ok([v[0], v[1]])
}

pub fn nodal_displacement_grad(mesh: &TriMesh, u: &[f64], s: Point) -> Result<Grad2<f64>> {
    Ok(element_grad_u(mesh, u, mesh.locate_element(s)?))
}

/// Signed incidence between elements sharing an edge: row `k` holds `+1` at
/// the lower and `-1` at the higher element index of interior edge `k`.
#[derive(Debug, Clone)]
pub struct JumpOperator {
    pub b: Rc<CsrMatrix>,
    /// Element pairs `(lower, higher)`, sorted.
    pub pairs: Vec<(usize, usize)>,
}

impl JumpOperator {
    pub fn n_jumps(&self) -> usize {
        self.pairs.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.b.matvec(x)
    }
}

pub fn build_jump_operator(mesh: &TriMesh) -> JumpOperator {
    let mut by_edge: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (e, nodes) in mesh.elements().iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (nodes[k], nodes[(k + 1) % 3]);
            by_edge.entry((a.min(b), a.max(b))).or_default().push(e);
        }
    }
    let mut pairs: Vec<(usize, usize)> = by_edge
        .values()
        .filter(|v| v.len() == 2)
        .map(|v| (v[0].min(v[1]), v[0].max(v[1])))
        .collect();
    pairs.sort_unstable();
    let trip: Vec<(usize, usize, f64)> = pairs
        .iter()
        .enumerate()
        .flat_map(|(k, &(lo, hi))| [(k, lo, 1.0), (k, hi, -1.0)])
        .collect();
    JumpOperator {
        b: Rc::new(CsrMatrix::from_triplets(pairs.len(), mesh.n_elements(), &trip)),
        pairs,
    }
}
