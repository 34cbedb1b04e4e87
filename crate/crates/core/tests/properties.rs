use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use spdhss::geometry::{generate_ball_points, generate_sphere_points};
use spdhss::h2::{H2Matrix, H2Options};
use spdhss::linalg::{cholesky_lower, gaussian_matrix, projection_basis, rel_fro_error, sym_sqrt_pair, SqrtMode};
use spdhss::solvers::{build_fsai, build_fsai_with, pcg, uniform_rhs};
use spdhss::spdhss::{construct_accelerated, construct_general, AcceleratedOptions, KernelBlocks};
use spdhss::ulv::{ulv_factorize, ulv_solve};
use spdhss::{KernelFamily, KernelSpec, PartitionTree, PointSet, SpdHss};

fn kernel_strategy() -> impl Strategy<Value = KernelSpec> {
    prop_oneof![
        (0.05f64..2.0).prop_map(|l| KernelSpec::matern32(l, 1e-2).unwrap()),
        (0.01f64..1.0).prop_map(|l| KernelSpec::gaussian(l, 1e-2).unwrap()),
        (0.1f64..10.0).prop_map(|l| KernelSpec::imq(l, 1e-2).unwrap()),
    ]
}

fn points_strategy() -> impl Strategy<Value = PointSet> {
    (200usize..500, any::<u64>(), any::<bool>()).prop_map(|(n, seed, ball)| {
        if ball {
            generate_ball_points(n, seed).unwrap()
        } else {
            generate_sphere_points(n, seed).unwrap()
        }
    })
}

fn min_eig(a: &DMatrix<f64>) -> f64 {
    a.clone().symmetric_eigenvalues().min()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn tree_order_is_a_bijection(p in points_strategy(), cap in 5usize..80) {
        let tree = PartitionTree::build(&p, cap).unwrap();
        tree.validate().unwrap();
        let mut seen = vec![false; p.len()];
        for &i in tree.permutation() {
            prop_assert!(!seen[i]);
            seen[i] = true;
        }
        for &leaf in tree.leaves() {
            prop_assert_eq!(tree.node(leaf).level, 1);
        }
        let inv = tree.inverse_permutation();
        for (pos, &orig) in tree.permutation().iter().enumerate() {
            prop_assert_eq!(inv[orig], pos);
        }
    }

    #[test]
    fn same_level_blocks_are_classified_consistently(p in points_strategy(), cap in 10usize..60) {
        let tree = PartitionTree::build(&p, cap).unwrap();
        for k in 1..tree.num_levels() {
            for &i in tree.level(k) {
                for &j in tree.level(k).iter().filter(|&&j| j != i) {
                    prop_assert_eq!(tree.classify_block(i, j).unwrap(), tree.classify_block(j, i).unwrap());
                }
            }
        }
    }

    #[test]
    fn kernel_blocks_are_symmetric(k in kernel_strategy(), p in points_strategy()) {
        let n = p.len().min(150);
        let a = k.eval_block(&p, 0..n, 0..n);
        prop_assert!(rel_fro_error(&a.transpose(), &a) == 0.0);
        prop_assert!(min_eig(&a) > 0.0);
    }

    #[test]
    fn cholesky_reconstructs(n in 1usize..40, seed in any::<u64>()) {
        let g = gaussian_matrix(n, n, seed);
        let a = &g * g.transpose() + DMatrix::identity(n, n);
        let l = cholesky_lower(&a).unwrap();
        prop_assert!(rel_fro_error(&(&l * l.transpose()), &a) < 1e-13);
    }

    #[test]
    fn sqrt_pair_inverts(n in 1usize..30, seed in any::<u64>(), scale in 0.0f64..3.0) {
        let g = gaussian_matrix(n, n, seed);
        let b = (&g + g.transpose()) * (scale / (2.0 * n as f64).sqrt());
        match sym_sqrt_pair(&b, SqrtMode::Strict) {
            Ok(s) => {
                let i_b = DMatrix::identity(n, n) + &b;
                prop_assert!(rel_fro_error(&(&s.sqrt * &s.sqrt), &i_b) < 1e-10);
                prop_assert!(rel_fro_error(&(&s.sqrt * &s.inv_sqrt), &DMatrix::identity(n, n)) < 1e-8);
            }
            Err(_) => prop_assert!(min_eig(&(DMatrix::identity(n, n) + &b)) <= 1e-12),
        }
    }

    #[test]
    fn projection_bases_are_orthonormal(rows in 1usize..30, cols in 1usize..60, r in 1usize..40, seed in any::<u64>()) {
        let h = gaussian_matrix(rows, cols, seed);
        let v = projection_basis(&h, r).v;
        prop_assert!(v.ncols() <= r.min(rows).min(cols));
        let g = v.tr_mul(&v);
        prop_assert!(rel_fro_error(&g, &DMatrix::identity(v.ncols(), v.ncols())) < 1e-12);
    }

    #[test]
    fn general_construction_is_spd_and_solvable(k in kernel_strategy(), p in points_strategy(), r in 1usize..20) {
        let tree = PartitionTree::build(&p, 40).unwrap();
        prop_assume!(tree.num_levels() >= 2);
        let h = construct_general(&KernelBlocks::new(&k, &p, &tree).unwrap(), &tree, r).unwrap();
        let d = h.densify().unwrap();
        prop_assert!(min_eig(&d) > 0.0);
        let f = ulv_factorize(&h).unwrap();
        let x = DVector::from_column_slice(gaussian_matrix(h.dim(), 1, 3).as_slice());
        let back = ulv_solve(&f, &h.matvec(&x).unwrap()).unwrap();
        prop_assert!((back - &x).norm() <= 1e-9 * x.norm());
    }

    #[test]
    fn accelerated_construction_is_spd(k in kernel_strategy(), p in points_strategy(), r in 1usize..20, seed in any::<u64>()) {
        let tree = PartitionTree::build(&p, 40).unwrap();
        prop_assume!(tree.num_levels() >= 2);
        let h2 = H2Matrix::build(&k, &p, &tree, &H2Options::default()).unwrap();
        let (h, stats) = construct_accelerated(&h2, &AcceleratedOptions::new(r).with_seed(seed)).unwrap();
        prop_assert_eq!(stats.sketch_calls.len(), tree.num_levels() - 1);
        prop_assert!(min_eig(&h.densify().unwrap()) > 0.0);
        let f = ulv_factorize(&h).unwrap();
        let b = uniform_rhs(h.dim(), seed);
        let x = f.solve_matrix(&DMatrix::from_column_slice(b.len(), 1, b.as_slice())).unwrap();
        prop_assert!(b.dot(&DVector::from_column_slice(x.as_slice())) > 0.0);
    }

    #[test]
    fn h2_products_are_linear(k in kernel_strategy(), p in points_strategy(), a in -3.0f64..3.0) {
        let tree = PartitionTree::build(&p, 40).unwrap();
        let h2 = H2Matrix::build(&k, &p, &tree, &H2Options::default()).unwrap();
        let x = gaussian_matrix(p.len(), 2, 1);
        let y = h2.matmat(&x).unwrap();
        let mut combo = DMatrix::zeros(p.len(), 1);
        combo.set_column(0, &(x.column(0) * a + x.column(1)));
        let lhs = h2.matmat(&combo).unwrap();
        let rhs = y.column(0) * a + y.column(1);
        prop_assert!((lhs.column(0) - &rhs).norm() <= 1e-12 * (1.0 + rhs.norm()));
        // xᵀAy = yᵀAx.
        let s1 = x.column(0).dot(&y.column(1));
        let s2 = x.column(1).dot(&y.column(0));
        prop_assert!((s1 - s2).abs() <= 1e-10 * (s1.abs() + s2.abs()).max(1e-300));
    }

    #[test]
    fn fsai_is_invariant_under_scaling(p in points_strategy(), c in 0.1f64..10.0) {
        let tree = PartitionTree::build(&p, 60).unwrap();
        let tp = tree.permute_points(&p);
        let k = KernelSpec::matern32(1.0, 1e-2).unwrap();
        let a = KernelBlocks::new(&k, &p, &tree).unwrap().dense();
        let f = build_fsai(&k, &tp, 20).unwrap();
        let b = uniform_rhs(p.len(), 4);
        let (_, r1) = pcg(&a, &f, &b, 1e-6, 500).unwrap();
        let fc = build_fsai_with(&tp, 20, |idx| k.eval_matrix_entries(&tp, idx, idx) * c).unwrap();
        let ca = &a * c;
        let (_, r2) = pcg(&ca, &fc, &b, 1e-6, 500).unwrap();
        prop_assert_eq!(r1.iterations, r2.iterations);
    }

    #[test]
    fn decoders_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..400)) {
        let _ = SpdHss::from_bytes(&bytes);
        let _ = H2Matrix::from_bytes(&bytes);
        let _ = PointSet::parse_csv(&String::from_utf8_lossy(&bytes));
    }
}

#[test]
fn mutated_encodings_never_panic() {
    let p = generate_ball_points(300, 3).unwrap();
    let tree = PartitionTree::build(&p, 40).unwrap();
    let k = KernelSpec::matern32(0.5, 1e-2).unwrap();
    let h = construct_general(&KernelBlocks::new(&k, &p, &tree).unwrap(), &tree, 4).unwrap();
    let h2 = H2Matrix::build(&k, &p, &tree, &H2Options::default()).unwrap();
    for (bytes, is_h2) in [(h.to_bytes(), false), (h2.to_bytes(), true)] {
        for pos in (0..bytes.len()).step_by(bytes.len() / 97 + 1) {
            for v in [0u8, 1, 0x7f, 0xff] {
                let mut m = bytes.clone();
                m[pos] = v;
                if is_h2 {
                    if let Ok(d) = H2Matrix::from_bytes(&m) {
                        d.matmat(&DMatrix::zeros(d.dim(), 1)).unwrap();
                    }
                } else if let Ok(d) = SpdHss::from_bytes(&m) {
                    d.matvec(&DVector::zeros(d.dim())).unwrap();
                }
            }
        }
    }
}

#[test]
fn kernel_family_names_round_trip() {
    for f in [KernelFamily::Matern32, KernelFamily::Gaussian, KernelFamily::Imq, KernelFamily::Rpy] {
        assert_eq!(f.to_string().parse::<KernelFamily>().unwrap(), f);
    }
}
