use flowdecomp::atlas::{BoxRegion, FlowAtlas, Grid};
use flowdecomp::cli::{bundled, load_config};
use flowdecomp::decompose::{coordinate_factorize, run_full_flow, run_pair_decomposition, telescope, Scenario};
use flowdecomp::distributions::coordinate_flag;
use flowdecomp::fieldlang::{VectorField, VectorFieldSet};
use flowdecomp::noise::{generate_path, heun_step};
use flowdecomp::verify::gauss_row_factor_oracle;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn brownian_increments_have_the_right_law() {
    let (n, t) = (4000, 0.5);
    let ends: Vec<f64> = (0..n)
        .map(|s| generate_path(s as u64, 1, t, 0.05).unwrap().terminal(1))
        .collect();
    let mean = ends.iter().sum::<f64>() / n as f64;
    let var = ends.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() < 4.0 * (t / n as f64).sqrt(), "mean {mean}");
    assert!((var / t - 1.0).abs() < 0.1, "variance {var}");
}

#[test]
fn heun_converges_pathwise_to_geometric_brownian_motion() {
    // dX = a X dt + b X o dW has X_T = x0 exp(a T + b W_T)
    let (a, b, x0, t) = (0.3, 0.8, 1.0, 1.0);
    let fields = VectorFieldSet::parse(&["0.3 * x"], &[vec!["0.8 * x"]]).unwrap();
    let seeds = 40;
    let mut errors = [0.0f64; 4];
    for seed in 0..seeds {
        let fine = generate_path(seed, 1, t, 1.0 / 512.0).unwrap();
        let exact = x0 * (a * t + b * fine.terminal(1)).exp();
        for (k, factor) in [8usize, 4, 2, 1].into_iter().enumerate() {
            let path = fine.coarsen(factor).unwrap();
            let mut y = DVector::from_element(1, x0);
            for s in 0..path.steps() {
                y = heun_step(&fields, &y, &path.increments(s), None).unwrap();
            }
            errors[k] += (y[0] - exact).abs() / seeds as f64;
        }
    }
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!(ratio > 1.5, "errors {errors:?}");
    }
}

#[test]
fn zero_fields_give_identity_factors() {
    let cfg = load_config(bundled("zero_fields").unwrap(), &[]).unwrap();
    let sc = cfg.scenario;
    let r = run_pair_decomposition(&sc, &sc.noise_path().unwrap()).unwrap();
    for atlas in [&r.phi, &r.xi, &r.psi] {
        for a in 0..atlas.len() {
            assert!(atlas.is_valid(a));
            assert_eq!(atlas.image(a), &atlas.seed(a));
        }
    }
}

#[test]
fn pair_split_matches_coordinate_factors() {
    // for the coordinate split the horizontal factor is the first coordinate factor
    let fields = VectorFieldSet::drift_only(VectorField::parse(&["-y + 0.2 * x * y", "x + 0.1 * y^2"]).unwrap());
    let region = BoxRegion::new(vec![-0.5, -0.5], vec![0.5, 0.5]).unwrap();
    let sc = Scenario::new(region, 17, fields)
        .with_bounds(BoxRegion::new(vec![-10.0, -10.0], vec![10.0, 10.0]).unwrap())
        .with_pair(coordinate_flag(2, 1).unwrap())
        .with_noise(0, 0.5, 0.005);
    let path = sc.noise_path().unwrap();
    let r = run_pair_decomposition(&sc, &path).unwrap();
    let phi = run_full_flow(&sc, &path).unwrap();
    let coord = coordinate_factorize(&phi, &sc.base_point(), 1e-4).unwrap();
    let mut worst = 0.0f64;
    let mut compared = 0;
    let theirs = &coord.factors[0];
    // only where the factor is defined by the partial inverse, not extended past the image
    let inner = &coord.partials[1];
    for a in theirs.valid_nodes() {
        let z = theirs.seed(a);
        if inner.invert(z.as_slice()).is_err() {
            continue;
        }
        {
            if let Ok(v) = r.xi.evaluate(z.as_slice()) {
                worst = worst.max((v - theirs.image(a)).amax());
                compared += 1;
            }
        }
    }
    assert!(compared > 50);
    assert!(worst < 1e-3, "pair vs coordinate factor gap {worst}");
    // the vertical remainder changes only the second coordinate
    for a in r.psi.valid_nodes() {
        assert!((r.psi.image(a)[0] - r.psi.seed(a)[0]).abs() < 1e-3);
    }
}

fn well_conditioned(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, n * n).prop_filter_map("trailing minors not safely positive", move |v| {
        let m = DMatrix::from_row_slice(n, n, &v) + DMatrix::identity(n, n) * 1.5;
        (0..n)
            .all(|i| m.view((i, i), (n - i, n - i)).clone_owned().determinant() > 0.3)
            .then_some(m)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn affine_factorization_matches_oracle(m in (2usize..=3).prop_flat_map(well_conditioned), shift in -0.3f64..0.3) {
        let n = m.nrows();
        let grid = Grid::new(BoxRegion::new(vec![-0.5; n], vec![0.5; n]).unwrap(), 5).unwrap();
        let phi = FlowAtlas::affine(grid.clone(), &m, &DVector::from_element(n, shift));
        let f = coordinate_factorize(&phi, &DVector::zeros(n), 1e-6).unwrap();
        let oracle = gauss_row_factor_oracle(&m).unwrap();
        for (mine, theirs) in f.base_jacobians.iter().zip(&oracle) {
            prop_assert!((mine - theirs).amax() < 1e-9);
        }
        let back = telescope(&f.factors, &grid);
        for a in 0..phi.len() {
            prop_assert!(back.is_valid(a));
            prop_assert!((back.image(a) - phi.image(a)).amax() < 1e-9);
        }
    }

    #[test]
    fn factorization_is_order_free(m in well_conditioned(2)) {
        // the first factor is pinned down by phi alone: it fixes every
        // coordinate but the first and agrees with phi after the second factor
        let grid = Grid::new(BoxRegion::new(vec![-0.5; 2], vec![0.5; 2]).unwrap(), 5).unwrap();
        let phi = FlowAtlas::affine(grid, &m, &DVector::zeros(2));
        let f = coordinate_factorize(&phi, &DVector::zeros(2), 1e-6).unwrap();
        let p1 = &f.partials[1];
        for a in 0..p1.len() {
            prop_assert_eq!(p1.image(a)[0], p1.seed(a)[0]);
            prop_assert_eq!(p1.image(a)[1], phi.image(a)[1]);
        }
    }
}
