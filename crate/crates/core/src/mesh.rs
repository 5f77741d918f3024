//! Structured triangulations of the unit square and P1 basis evaluation.
//!
//! Nodes are numbered row-major (`j * n + i` for the node at `(i, j) / (n - 1)`),
//! cells row-major, and each cell is split along its lower-left to upper-right
//! diagonal into a lower triangle (index `2c`) followed by an upper one
//! (index `2c + 1`).

use crate::error::{Error, Result};

/// Tolerance used for point-in-triangle tests on barycentric coordinates.
const BARY_TOL: f64 = 1e-12;

pub type Point = [f64; 2];

#[derive(Debug, Clone)]
pub struct TriMesh {
    n_nodes_per_side: usize,
    nodes: Vec<Point>,
    elements: Vec<[usize; 3]>,
    /// Shape-function gradients, `elem_grad[e][a] = grad(phi_a)` for local node `a`.
    elem_grad: Vec<[[f64; 2]; 3]>,
    elem_area: Vec<f64>,
}

impl TriMesh {
    /// Builds the structured `n x n` node triangulation of `[0, 1]^2`.
    pub fn build_grid(n_nodes_per_side: usize) -> Result<Self> {
        let n = n_nodes_per_side;
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "mesh needs at least 2 nodes per side, got {n}"
            )));
        }
        let h = 1.0 / (n - 1) as f64;
        let mut nodes = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                nodes.push([i as f64 * h, j as f64 * h]);
            }
        }
        let cells = n - 1;
        let mut elements = Vec::with_capacity(2 * cells * cells);
        for cj in 0..cells {
            for ci in 0..cells {
                let ll = cj * n + ci;
                let lr = ll + 1;
                let ul = ll + n;
                let ur = ul + 1;
                elements.push([ll, lr, ur]);
                elements.push([ll, ur, ul]);
            }
        }
        let mut elem_grad = Vec::with_capacity(elements.len());
        let mut elem_area = Vec::with_capacity(elements.len());
        for el in &elements {
            let (grad, area) = p1_geometry([nodes[el[0]], nodes[el[1]], nodes[el[2]]]);
            elem_grad.push(grad);
            elem_area.push(area);
        }
        Ok(Self {
            n_nodes_per_side: n,
            nodes,
            elements,
            elem_grad,
            elem_area,
        })
    }

    pub fn n_nodes_per_side(&self) -> usize {
        self.n_nodes_per_side
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> Point {
        self.nodes[idx]
    }

    pub fn elements(&self) -> &[[usize; 3]] {
        &self.elements
    }

    pub fn element(&self, e: usize) -> [usize; 3] {
        self.elements[e]
    }

    pub fn elem_grad(&self, e: usize) -> &[[f64; 2]; 3] {
        &self.elem_grad[e]
    }

    pub fn elem_area(&self, e: usize) -> f64 {
        self.elem_area[e]
    }

    /// Cell spacing `1 / (n - 1)`.
    pub fn spacing(&self) -> f64 {
        1.0 / (self.n_nodes_per_side - 1) as f64
    }

    pub fn centroid(&self, e: usize) -> Point {
        let [a, b, c] = self.elements[e];
        let (pa, pb, pc) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        [
            (pa[0] + pb[0] + pc[0]) / 3.0,
            (pa[1] + pb[1] + pc[1]) / 3.0,
        ]
    }

    pub fn centroids(&self) -> Vec<Point> {
        (0..self.n_elements()).map(|e| self.centroid(e)).collect()
    }

    /// Barycentric coordinates of `s` with respect to element `e`.
    pub fn barycentric(&self, e: usize, s: Point) -> [f64; 3] {
        let [a, _, _] = self.elements[e];
        let p0 = self.nodes[a];
        let g = &self.elem_grad[e];
        let d = [s[0] - p0[0], s[1] - p0[1]];
        let l1 = g[1][0] * d[0] + g[1][1] * d[1];
        let l2 = g[2][0] * d[0] + g[2][1] * d[1];
        [1.0 - l1 - l2, l1, l2]
    }

    /// Returns the element containing `s`; points on shared edges or vertices
    /// resolve to the lowest incident element index.
    pub fn locate_element(&self, s: Point) -> Result<usize> {
        if !in_unit_square(s) {
            return Err(Error::OutOfDomain(s));
        }
        let cells = self.n_nodes_per_side - 1;
        let h = self.spacing();
        let ci = ((s[0] / h).floor() as usize).min(cells - 1);
        let cj = ((s[1] / h).floor() as usize).min(cells - 1);
        let mut best: Option<usize> = None;
        for dj in -1i64..=1 {
            for di in -1i64..=1 {
                let (x, y) = (ci as i64 + di, cj as i64 + dj);
                if x < 0 || y < 0 || x >= cells as i64 || y >= cells as i64 {
                    continue;
                }
                let cell = y as usize * cells + x as usize;
                for e in [2 * cell, 2 * cell + 1] {
                    if best.is_some_and(|b| b <= e) {
                        continue;
                    }
                    if self.barycentric(e, s).iter().all(|&l| l >= -BARY_TOL) {
                        best = Some(e);
                    }
                }
            }
        }
        best.ok_or(Error::OutOfDomain(s))
    }

    /// Evaluates the piecewise-linear nodal basis function of `node` at `s`.
    pub fn hat_function_eval(&self, node: usize, s: Point) -> Result<f64> {
        if node >= self.n_nodes() {
            return Err(Error::InvalidArgument(format!(
                "node index {node} out of range for {} nodes",
                self.n_nodes()
            )));
        }
        let e = self.locate_element(s)?;
        let bary = self.barycentric(e, s);
        Ok(self.elements[e]
            .iter()
            .position(|&a| a == node)
            .map_or(0.0, |k| bary[k].clamp(0.0, 1.0)))
    }

    /// Interpolates nodal values (`comps` values per node, node-major) at `s`.
    pub fn interpolate(&self, values: &[f64], comps: usize, s: Point) -> Result<Vec<f64>> {
        let e = self.locate_element(s)?;
        let bary = self.barycentric(e, s);
        let mut out = vec![0.0; comps];
        for (k, &a) in self.elements[e].iter().enumerate() {
            for (c, o) in out.iter_mut().enumerate() {
                *o += bary[k] * values[a * comps + c];
            }
        }
        Ok(out)
    }

    /// Whether node `idx` lies on the boundary of the unit square.
    pub fn is_boundary_node(&self, idx: usize) -> bool {
        let n = self.n_nodes_per_side;
        let (i, j) = (idx % n, idx / n);
        i == 0 || j == 0 || i == n - 1 || j == n - 1
    }

    /// Boundary edges lying on the given side, as `(node_a, node_b, element)`.
    pub fn boundary_edges(&self, side: Side) -> Vec<(usize, usize, usize)> {
        let n = self.n_nodes_per_side;
        let cells = n - 1;
        let node = |i: usize, j: usize| j * n + i;
        (0..cells)
            .map(|k| match side {
                // lower triangles touch the bottom and right sides, upper ones top and left
                Side::Bottom => (node(k, 0), node(k + 1, 0), 2 * k),
                Side::Right => (node(cells, k), node(cells, k + 1), 2 * (k * cells + cells - 1)),
                Side::Top => (node(k, cells), node(k + 1, cells), 2 * ((cells - 1) * cells + k) + 1),
                Side::Left => (node(0, k), node(0, k + 1), 2 * (k * cells) + 1),
            })
            .collect()
    }

    /// Node indices on a side of the square, in increasing order.
    pub fn side_nodes(&self, side: Side) -> Vec<usize> {
        let n = self.n_nodes_per_side;
        (0..n)
            .map(|k| match side {
                Side::Bottom => k,
                Side::Top => (n - 1) * n + k,
                Side::Left => k * n,
                Side::Right => k * n + n - 1,
            })
            .collect()
    }
}

/// A side of the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Bottom,
    Right,
    Top,
    Left,
}

impl Side {
    /// Signed distance-like coordinate vanishing on this side.
    pub fn distance(self, s: Point) -> f64 {
        match self {
            Side::Bottom => s[1],
            Side::Top => 1.0 - s[1],
            Side::Left => s[0],
            Side::Right => 1.0 - s[0],
        }
    }

    /// Gradient of [`Side::distance`].
    pub fn distance_grad(self) -> [f64; 2] {
        match self {
            Side::Bottom => [0.0, 1.0],
            Side::Top => [0.0, -1.0],
            Side::Left => [1.0, 0.0],
            Side::Right => [-1.0, 0.0],
        }
    }
}

pub fn in_unit_square(s: Point) -> bool {
    (0.0..=1.0).contains(&s[0]) && (0.0..=1.0).contains(&s[1])
}

/// Gradients of the three P1 shape functions and the (positive) area.
fn p1_geometry(p: [Point; 3]) -> ([[f64; 2]; 3], f64) {
    let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
    let inv = 1.0 / det;
    let mut g = [[0.0; 2]; 3];
    for a in 0..3 {
        let (b, c) = ((a + 1) % 3, (a + 2) % 3);
        g[a] = [(p[b][1] - p[c][1]) * inv, (p[c][0] - p[b][0]) * inv];
    }
    (g, 0.5 * det.abs())
}

/// A regular `n x n` grid of points on `[0, 1]^2` including the boundary.
pub fn regular_points(n: usize) -> Vec<Point> {
    let h = if n > 1 { 1.0 / (n - 1) as f64 } else { 0.0 };
    let mut pts = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            pts.push([i as f64 * h, j as f64 * h]);
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_locate(mesh: &TriMesh, s: Point) -> usize {
        (0..mesh.n_elements())
            .find(|&e| {
                let [a, b, c] = mesh.element(e);
                let (p, q, r) = (mesh.node(a), mesh.node(b), mesh.node(c));
                let cross = |u: Point, v: Point, w: Point| {
                    (v[0] - u[0]) * (w[1] - u[1]) - (w[0] - u[0]) * (v[1] - u[1])
                };
                let (d1, d2, d3) = (cross(p, q, s), cross(q, r, s), cross(r, p, s));
                d1 >= -1e-14 && d2 >= -1e-14 && d3 >= -1e-14
            })
            .unwrap()
    }

    #[test]
    fn element_counts() {
        let m = TriMesh::build_grid(32).unwrap();
        assert_eq!(m.n_elements(), 1922);
        let m = TriMesh::build_grid(5).unwrap();
        assert_eq!(m.n_elements(), 32);
        assert_eq!(m.n_nodes(), 25);
        let m = TriMesh::build_grid(2).unwrap();
        assert_eq!(m.n_elements(), 2);
        let total: f64 = (0..2).map(|e| m.elem_area(e)).sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn rejects_tiny_grid() {
        assert!(matches!(TriMesh::build_grid(1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn geometry_invariants() {
        for n in [2, 3, 5, 9, 17] {
            let m = TriMesh::build_grid(n).unwrap();
            let expected = 1.0 / (2.0 * ((n - 1) * (n - 1)) as f64);
            let mut total = 0.0;
            for e in 0..m.n_elements() {
                let a = m.elem_area(e);
                assert!(a > 0.0);
                assert!((a - expected).abs() < 1e-15);
                total += a;
                let g = m.elem_grad(e);
                for k in 0..2 {
                    assert!((g[0][k] + g[1][k] + g[2][k]).abs() < 1e-12);
                }
            }
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn locate_examples() {
        let m = TriMesh::build_grid(2).unwrap();
        assert_eq!(m.locate_element([0.25, 0.1]).unwrap(), 0);
        assert_eq!(m.locate_element([0.5, 0.5]).unwrap(), 0);
        assert_eq!(m.locate_element([0.1, 0.25]).unwrap(), 1);
        assert!(matches!(m.locate_element([1.2, 0.5]), Err(Error::OutOfDomain(_))));

        let m = TriMesh::build_grid(5).unwrap();
        // (0.99, 0.99) sits on the last cell's diagonal
        let e = m.locate_element([0.99, 0.99]).unwrap();
        assert_eq!(e, brute_force_locate(&m, [0.99, 0.99]));
        assert_eq!(m.locate_element([0.99, 0.995]).unwrap(), 31);
        assert_eq!(m.locate_element([0.995, 0.99]).unwrap(), 30);
    }

    #[test]
    fn locate_matches_brute_force() {
        let m = TriMesh::build_grid(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let s = [rng.random::<f64>(), rng.random::<f64>()];
            assert_eq!(m.locate_element(s).unwrap(), brute_force_locate(&m, s));
        }
        // vertices and edge midpoints
        for &p in m.nodes() {
            assert_eq!(m.locate_element(p).unwrap(), brute_force_locate(&m, p));
        }
    }

    #[test]
    fn hat_examples() {
        let m = TriMesh::build_grid(3).unwrap();
        assert_eq!(m.hat_function_eval(4, [0.5, 0.5]).unwrap(), 1.0);
        assert_eq!(m.hat_function_eval(0, [1.0, 1.0]).unwrap(), 0.0);
        let m2 = TriMesh::build_grid(2).unwrap();
        // on the diagonal: phi_0 = 1 - x = 1 - y
        assert!((m2.hat_function_eval(0, [0.25, 0.25]).unwrap() - 0.75).abs() < 1e-15);
        assert!((m2.hat_function_eval(0, [0.25, 0.1]).unwrap() - 0.75).abs() < 1e-15);
        assert!((m2.hat_function_eval(0, [0.1, 0.25]).unwrap() - 0.75).abs() < 1e-15);
        assert!(m2.hat_function_eval(7, [0.2, 0.2]).is_err());
    }

    #[test]
    fn hat_nodal_interpolation() {
        let m = TriMesh::build_grid(4).unwrap();
        for a in 0..m.n_nodes() {
            for b in 0..m.n_nodes() {
                let v = m.hat_function_eval(a, m.node(b)).unwrap();
                assert_eq!(v, if a == b { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn partition_of_unity() {
        let m = TriMesh::build_grid(6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s = [rng.random::<f64>(), rng.random::<f64>()];
            let sum: f64 = (0..m.n_nodes()).map(|a| m.hat_function_eval(a, s).unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hat_gradient_matches_finite_differences() {
        let m = TriMesh::build_grid(5).unwrap();
        let h = 1e-7;
        for e in 0..m.n_elements() {
            let c = m.centroid(e);
            for (k, &a) in m.element(e).iter().enumerate() {
                for d in 0..2 {
                    let mut sp = c;
                    let mut sm = c;
                    sp[d] += h;
                    sm[d] -= h;
                    let fd = (m.hat_function_eval(a, sp).unwrap() - m.hat_function_eval(a, sm).unwrap())
                        / (2.0 * h);
                    assert!((fd - m.elem_grad(e)[k][d]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn boundary_edges_belong_to_their_elements() {
        let m = TriMesh::build_grid(5).unwrap();
        for side in [Side::Bottom, Side::Right, Side::Top, Side::Left] {
            let edges = m.boundary_edges(side);
            assert_eq!(edges.len(), 4);
            for (a, b, e) in edges {
                let el = m.element(e);
                assert!(el.contains(&a) && el.contains(&b));
                assert_eq!(side.distance(m.node(a)), 0.0);
                assert_eq!(side.distance(m.node(b)), 0.0);
            }
        }
    }
}
