use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::constitutive::linear_isotropic_stress;
use crate::fields::{DirichletMask, DisplacementNetConfig};
use crate::forward::{
    assemble_linear_system, element_stresses, internal_force, LoadCase, MaterialMap, Material, NeumannEdge,
};
use crate::mesh::Side;

fn setup(n: usize) -> (TriMesh, BoundaryConditions) {
    let mesh = TriMesh::build_grid(n).unwrap();
    let bc = BoundaryConditions::from_load_case(&mesh, &LoadCase::default()).unwrap();
    (mesh, bc)
}

fn random_chi(n_el: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3 * n_el).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Element-wise stress of the linear solve on a heterogeneous modulus field.
fn equilibrium_stress(mesh: &TriMesh, bc: &BoundaryConditions) -> StressField {
    let e: Vec<f64> = (0..mesh.n_elements())
        .map(|k| (0.4 * (k as f64 * 0.31).sin()).exp())
        .collect();
    let u = assemble_linear_system(mesh, &e, 0.3, bc).unwrap().solve().unwrap();
    let map = MaterialMap {
        background: IsoParams::new(1.0, 0.3).unwrap(),
        materials: e.iter().map(|&e| Material::LinearIso(IsoParams::new(e, 0.3).unwrap())).collect(),
        assignment: (0..mesh.n_elements()).collect(),
    };
    StressField::from_elements(&element_stresses(mesh, &map, &u).unwrap())
}

#[test]
fn constant_stress_interior_hat_vanishes() {
    let (mesh, bc) = setup(5);
    let n = mesh.n_elements();
    let chi = StressField::new(&mesh, [0.7, -0.2, 1.3].iter().flat_map(|&c| vec![c; n]).collect()).unwrap();
    let w = WeightFunction::nodal(2 * 12 + 1);
    assert!(conservation_residual(&mesh, &chi, &w, &bc).unwrap().abs() < 1e-14);
}

#[test]
fn forward_solution_has_zero_residuals() {
    let (mesh, bc) = setup(9);
    let chi = equilibrium_stress(&mesh, &bc);
    let fam = generate_weight_functions(&mesh, &bc, Some(400), 3).unwrap();
    assert!(fam.len() == 400 && fam.n_nodal == 2 * 9 * 8);
    let tol = 1e-9 * bc.traction_scale();
    for (w, r) in fam.functions.iter().zip(fam.residuals(&chi.chi)) {
        assert!(r.abs() < tol);
        assert!(conservation_residual(&mesh, &chi, w, &bc).unwrap().abs() < tol);
    }
}

#[test]
fn traction_only_residual() {
    // the layout with a clamped bottom and upward traction on the top edge
    let mesh = TriMesh::build_grid(5).unwrap();
    let case = LoadCase {
        fixed_side: Side::Bottom,
        loaded_side: Side::Top,
        traction: [0.0, 0.1],
    };
    let bc = BoundaryConditions::from_load_case(&mesh, &case).unwrap();
    let zero = StressField::new(&mesh, vec![0.0; 3 * mesh.n_elements()]).unwrap();
    let h = mesh.spacing();
    let top_mid = 4 * 5 + 2;
    let top_corner = 4 * 5 + 4;
    let r = conservation_residual(&mesh, &zero, &WeightFunction::nodal(2 * top_mid + 1), &bc).unwrap();
    assert!((r + 0.1 * h).abs() < 1e-15);
    let r = conservation_residual(&mesh, &zero, &WeightFunction::nodal(2 * top_corner + 1), &bc).unwrap();
    assert!((r + 0.1 * h / 2.0).abs() < 1e-15);
    let r = conservation_residual(&mesh, &zero, &WeightFunction::nodal(2 * top_mid), &bc).unwrap();
    assert_eq!(r, 0.0);
}

#[test]
fn operator_matches_divergence_assembly() {
    let (mesh, bc) = setup(7);
    let chi = random_chi(mesh.n_elements(), 4);
    let field = StressField::new(&mesh, chi.clone()).unwrap();
    let stress: Vec<Sym2<f64>> = (0..mesh.n_elements()).map(|e| field.element(e)).collect();
    let f_int = internal_force(&mesh, &stress);
    let f_ext = bc.load_vector(&mesh);
    let fam = generate_weight_functions(&mesh, &bc, Some(200), 9).unwrap();
    let r = fam.residuals(&chi);
    for (k, w) in fam.functions.iter().enumerate() {
        let want: f64 = w.coeffs.iter().map(|&(d, c)| c * (f_int[d] - f_ext[d])).sum();
        assert!((r[k] - want).abs() < 1e-13);
        let direct = conservation_residual(&mesh, &field, w, &bc).unwrap();
        assert!((r[k] - direct).abs() < 1e-13);
    }
    // linear in chi
    let doubled: Vec<f64> = chi.iter().map(|c| 2.0 * c).collect();
    for ((a, b), f) in fam.residuals(&doubled).iter().zip(&r).zip(&fam.load) {
        assert!((a + f - 2.0 * (b + f)).abs() < 1e-12);
    }
}

#[test]
fn weight_family_properties() {
    let (mesh, bc) = setup(5);
    let fam = generate_weight_functions(&mesh, &bc, None, 0).unwrap();
    assert_eq!(fam.len(), 2 * (25 - 5));
    let dofs = DofMap::new(&mesh, &bc);
    let big = generate_weight_functions(&mesh, &bc, Some(100), 5).unwrap();
    for w in &big.functions {
        assert!(w.coeffs.iter().all(|&(d, _)| !dofs.is_fixed(d)));
        // admissible: vanishes on the clamped edge
        for t in [0.0, 0.3, 0.77, 1.0] {
            assert_eq!(w.eval(&mesh, [0.0, t]).unwrap(), [0.0, 0.0]);
        }
    }
    for w in &big.functions[big.n_nodal..] {
        assert_eq!(w.coeffs.len(), 12);
        assert!(w.coeffs.iter().all(|&(_, c)| c == 1.0 || c == -1.0));
    }
    let again = generate_weight_functions(&mesh, &bc, Some(100), 5).unwrap();
    assert_eq!(big.functions, again.functions);
    assert!(subsample(5, 4, Subsampling::WithReplacement, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn subsampling_is_seeded_and_unbiased() {
    let a = subsample(8, 64, Subsampling::WithReplacement, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let b = subsample(8, 64, Subsampling::WithReplacement, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a, b);

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let r2: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0f64..1.0).powi(2) * 3.0).collect();
    let full: f64 = r2.iter().sum();
    let draws = 10_000;
    let est: Vec<f64> = (0..draws)
        .map(|_| {
            let idx = subsample(8, 64, Subsampling::WithReplacement, &mut rng).unwrap();
            let terms: Vec<f64> = idx.iter().map(|&i| r2[i]).collect();
            scaled_subsample_sum(&terms, 64)
        })
        .collect();
    let mean = est.iter().sum::<f64>() / draws as f64;
    let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let se = (var / draws as f64).sqrt();
    assert!((mean - full).abs() < 3.0 * se, "{mean} vs {full} (se {se})");

    // degenerate case: every function exactly once
    let idx = subsample(64, 64, Subsampling::WithoutReplacement, &mut rng).unwrap();
    let terms: Vec<f64> = idx.iter().map(|&i| r2[i]).collect();
    assert!((scaled_subsample_sum(&terms, 64) - full).abs() < 1e-12);
}

#[test]
fn monte_carlo_integration() {
    let (mesh, bc) = setup(9);
    let fam = generate_weight_functions(&mesh, &bc, Some(200), 1).unwrap();
    let chi = random_chi(mesh.n_elements(), 12);
    let field = StressField::new(&mesh, chi).unwrap();
    let piecewise = |pts: &[Point]| pts.iter().map(|&s| field.eval(&mesh, s)).collect::<Result<Vec<_>>>();
    let constant = |pts: &[Point]| {
        Ok(vec![
            Sym2 {
                s11: 0.4,
                s12: 0.1,
                s22: -0.3
            };
            pts.len()
        ])
    };
    let uniform = StressField::new(
        &mesh,
        [0.4, 0.1, -0.3].iter().flat_map(|&c| vec![c; mesh.n_elements()]).collect(),
    )
    .unwrap();
    let picks = [0, 17, 40, 95, 120, 143, 150, 170, 185, 199];
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &k) in picks.iter().enumerate() {
        let w = &fam.functions[k];
        let support = w.element_grads(&mesh).len();
        for n in [support, support + 3, 500] {
            let exact = conservation_residual(&mesh, &uniform, w, &bc).unwrap();
            let mc = conservation_residual_mc(&mesh, constant, w, &bc, n, i as u64).unwrap();
            assert!((mc - exact).abs() < 1e-12);
        }
        let exact = conservation_residual(&mesh, &field, w, &bc).unwrap();
        let mc = conservation_residual_mc(&mesh, piecewise, w, &bc, 10_000, 100 + i as u64).unwrap();
        num += (mc - exact).powi(2);
        den += exact.powi(2);
        let again = conservation_residual_mc(&mesh, piecewise, w, &bc, 10_000, 100 + i as u64).unwrap();
        assert_eq!(mc, again);
    }
    assert!((num / den).sqrt() < 0.01);
    // fewer points than support elements still gives an estimate
    assert!(conservation_residual_mc(&mesh, constant, &fam.functions[150], &bc, 2, 0)
        .unwrap()
        .is_finite());
}

#[test]
fn traction_edges_validated() {
    let mesh = TriMesh::build_grid(3).unwrap();
    let bad = NeumannEdge {
        nodes: [0, 4],
        traction: [0.0, 1.0],
    };
    assert!(BoundaryConditions::new(&mesh, vec![], vec![bad]).is_err());
}

fn small_net(mask: DirichletMask) -> DisplacementNet {
    let cfg = DisplacementNetConfig {
        d_z: 4,
        hidden_layers: 2,
        width: 6,
    };
    DisplacementNet::new(&cfg, mask, &mut ChaCha8Rng::seed_from_u64(8)).unwrap()
}

#[test]
fn constitutive_residual_cases() {
    let mesh = TriMesh::build_grid(5).unwrap();
    let net = small_net(DirichletMask { side: Some(Side::Left) });
    let colloc = CollocationSet::centroids(&mesh);
    assert_eq!(colloc.len(), mesh.n_elements());
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = MaterialField::new(&mesh, (0..mesh.n_elements()).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
    let z: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

    // stress manufactured from the law itself
    let law: Vec<Sym2<f64>> = colloc
        .points
        .iter()
        .map(|&s| {
            let g = net.eval_displacement_grad(&z, s).unwrap();
            linear_isotropic_stress(&g, &IsoParams::new(x.eval_modulus(&mesh, s).unwrap(), 0.3).unwrap()).unwrap()
        })
        .collect();
    let chi = StressField::from_elements(&law);
    for &s in &colloc.points {
        let r = constitutive_residual(&mesh, &net, &x, &z, &chi, 0.3, s).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-15));
    }

    let zero_chi = StressField::new(&mesh, vec![0.0; 3 * mesh.n_elements()]).unwrap();
    let r = constitutive_residual(&mesh, &net, &x, &[0.0; 4], &zero_chi, 0.3, [0.3, 0.3]).unwrap();
    assert_eq!(r, [0.0; 3]);

    // random state against direct composition, and linearity in chi
    let chi = StressField::new(&mesh, random_chi(mesh.n_elements(), 5)).unwrap();
    for &s in colloc.points.iter().step_by(5) {
        let r = constitutive_residual(&mesh, &net, &x, &z, &chi, 0.3, s).unwrap();
        let e = mesh.locate_element(s).unwrap();
        let law = linear_isotropic_stress(
            &net.eval_displacement_grad(&z, s).unwrap(),
            &IsoParams::new(x.x[e].exp(), 0.3).unwrap(),
        )
        .unwrap();
        let sig = chi.element(e);
        assert_eq!(r, [sig.s11 - law.s11, sig.s12 - law.s12, sig.s22 - law.s22]);
    }
    assert!(constitutive_residual(&mesh, &net, &x, &z, &chi, 0.3, [1.2, 0.0]).is_err());
}
