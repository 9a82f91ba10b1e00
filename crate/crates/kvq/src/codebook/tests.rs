use super::*;
use crate::numerics::{sample_gaussian, Covariance};
use proptest::prelude::*;

fn gaussian(seed: u64, rows: usize, cols: usize, var: f64) -> Matrix {
    let mut rng = SeededRng::new(seed);
    sample_gaussian(&mut rng, rows, cols, 0.0, &Covariance::Scalar(var)).unwrap()
}

fn train_cfg(seed: u64, size: usize) -> TrainConfig {
    TrainConfig::new(SeededRng::new(seed)).with_codebook_size(size)
}

/// Brute-force query-aware assignment: direct quadratic-form argmin with
/// lowest-index tie-break. Independent of the transformed-space route.
fn brute_force_qa_index(key: &[f64], cb: &Codebook) -> u32 {
    let h = cb.h_matrix().expect("query-aware codebook");
    let mut best = 0u32;
    let mut best_val = f64::INFINITY;
    for j in 0..cb.size() {
        let diff: Vec<f64> = key
            .iter()
            .zip(cb.codeword(j))
            .map(|(k, c)| k - c)
            .collect();
        let val = h.quadratic_form(&diff);
        if val < best_val {
            best_val = val;
            best = j as u32;
        }
    }
    best
}

/// Objective of a codebook over keys under the quadratic-form metric,
/// using the codebook's own quantizer, summed directly.
fn direct_quadratic_objective(keys: &Matrix, cb: &Codebook, h: &SpdMatrix) -> f64 {
    let s = quantize(keys, cb).unwrap();
    let mut total = 0.0;
    for i in 0..keys.rows() {
        let diff: Vec<f64> = keys
            .row(i)
            .iter()
            .zip(cb.codeword(s.get(i) as usize))
            .map(|(k, c)| k - c)
            .collect();
        total += h.quadratic_form(&diff);
    }
    total / keys.rows() as f64
}

mod estimate_h_tests {
    use super::*;

    #[test]
    fn orthonormal_rows_give_identity() {
        // m = d rows, row i = sqrt(m) * e_i, so (1/m) sum q^T q = I.
        let d = 4;
        let scale = (d as f64).sqrt();
        let mut rows = Vec::new();
        for i in 0..d {
            let mut r = vec![0.0; d];
            r[i] = scale;
            rows.push(r);
        }
        let h = estimate_h(&Matrix::from_rows(&rows).unwrap(), 0.0).unwrap();
        for r in 0..d {
            for c in 0..d {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!((h.get(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_one_needs_regularization() {
        let q = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let h0 = estimate_h(&q, 0.0).unwrap();
        assert!(cholesky(&h0).is_err(), "rank-1 moment must not factor");
        let h = estimate_h(&q, 1e-6).unwrap();
        assert!(cholesky(&h).is_ok());
    }

    #[test]
    fn empirical_moment_matches_generating_covariance() {
        let mut rng = SeededRng::new(77);
        let cov = SpdMatrix::diagonal(&[1.0, 4.0]);
        let q = sample_gaussian(&mut rng, 100_000, 2, 0.0, &Covariance::Spd(cov)).unwrap();
        let h = estimate_h(&q, 1e-6).unwrap();
        assert!((h.get(0, 0) - 1.0).abs() / 1.0 < 0.05);
        assert!((h.get(1, 1) - 4.0).abs() / 4.0 < 0.05);
    }

    #[test]
    fn zero_rows_rejected() {
        let q = Matrix::zeros(0, 4);
        assert!(matches!(estimate_h(&q, 0.0), Err(Error::Empty(_))));
    }
}

mod training_tests {
    use super::*;

    #[test]
    fn exact_cover_reaches_zero_error() {
        let n = 64;
        let keys = gaussian(10, n, 4, 1.0);
        let cfg = train_cfg(11, n);
        let (cb, trace) = train_conventional_traced(&keys, &cfg).unwrap();
        assert_eq!(cb.size(), n);
        let last = *trace.objective_per_iteration.last().unwrap();
        assert!(last < 1e-24, "objective {last:e}");
        let s = quantize(&keys, &cb).unwrap();
        for i in 0..n {
            assert_eq!(keys.row(i), cb.codeword(s.get(i) as usize));
        }
    }

    #[test]
    fn two_separated_clusters_recover_means() {
        // Oracle: the closed-form per-cluster empirical means.
        let per = 200;
        let d = 3;
        let mut rng = SeededRng::new(21);
        let a = sample_gaussian(&mut rng, per, d, 5.0, &Covariance::Scalar(0.01)).unwrap();
        let b = sample_gaussian(&mut rng, per, d, -5.0, &Covariance::Scalar(0.01)).unwrap();
        let mut rows = Vec::new();
        let mut mean_a = vec![0.0; d];
        let mut mean_b = vec![0.0; d];
        for i in 0..per {
            rows.push(a.row(i).to_vec());
            for c in 0..d {
                mean_a[c] += a.get(i, c) / per as f64;
            }
        }
        for i in 0..per {
            rows.push(b.row(i).to_vec());
            for c in 0..d {
                mean_b[c] += b.get(i, c) / per as f64;
            }
        }
        let keys = Matrix::from_rows(&rows).unwrap();
        let cb = train_conventional(&keys, &train_cfg(22, 2)).unwrap();
        // Match each codeword to the nearer oracle mean.
        for i in 0..2 {
            let cw = cb.codeword(i);
            let da: f64 = cw.iter().zip(&mean_a).map(|(x, m)| (x - m).powi(2)).sum();
            let db: f64 = cw.iter().zip(&mean_b).map(|(x, m)| (x - m).powi(2)).sum();
            assert!(da.sqrt().min(db.sqrt()) < 0.1);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let keys = gaussian(30, 256, 8, 1.0);
        let a = train_conventional(&keys, &train_cfg(31, 16)).unwrap();
        let b = train_conventional(&keys, &train_cfg(31, 16)).unwrap();
        assert_eq!(a.codewords(), b.codewords());

        let h = SpdMatrix::diagonal(&[3.0, 1.0, 0.5, 2.0, 1.0, 1.0, 4.0, 0.25]);
        let qa = train_query_aware(&keys, &h, &train_cfg(31, 16)).unwrap();
        let qb = train_query_aware(&keys, &h, &train_cfg(31, 16)).unwrap();
        assert_eq!(qa.codewords(), qb.codewords());
    }

    #[test]
    fn objective_non_increasing() {
        let keys = gaussian(40, 512, 6, 1.0);
        let (_, trace) = train_conventional_traced(&keys, &train_cfg(41, 12)).unwrap();
        let obj = &trace.objective_per_iteration;
        assert!(obj.len() >= 2);
        for w in obj.windows(2) {
            assert!(
                w[1] <= w[0] * (1.0 + 1e-12) + 1e-300,
                "objective rose: {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn query_aware_objective_non_increasing() {
        let keys = gaussian(42, 512, 6, 1.0);
        let h = SpdMatrix::diagonal(&[9.0, 4.0, 1.0, 1.0, 0.25, 0.0625]);
        let (_, trace) = train_query_aware_traced(&keys, &h, &train_cfg(43, 12)).unwrap();
        for w in trace.objective_per_iteration.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-300);
        }
    }

    #[test]
    fn identity_h_reduces_to_conventional() {
        // With eps = 0 and H = I the transform is exactly the identity, so
        // the query-aware route must reproduce conventional training
        // bit-for-bit.
        let keys = gaussian(50, 128, 4, 1.0);
        let mut cfg = train_cfg(51, 8);
        cfg.h_regularization_eps = 0.0;
        let conv = train_conventional(&keys, &cfg).unwrap();
        let qa = train_query_aware(&keys, &SpdMatrix::identity(4), &cfg).unwrap();
        assert_eq!(conv.codewords(), qa.codewords());
    }

    #[test]
    fn anisotropic_h_beats_conventional_on_circle() {
        // Keys on the unit circle, H = diag(100, 1): the query-aware
        // codebook spends resolution on dimension 0 and wins under the
        // quadratic-form objective.
        let n = 256;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            rows.push(vec![t.cos(), t.sin()]);
        }
        let keys = Matrix::from_rows(&rows).unwrap();
        let h = SpdMatrix::diagonal(&[100.0, 1.0]);
        let cfg = train_cfg(60, 6).with_max_iters(200);
        let conv = train_conventional(&keys, &cfg).unwrap();
        let qa = train_query_aware(&keys, &h, &cfg).unwrap();
        let j_conv = direct_quadratic_objective(&keys, &conv, &h);
        let j_qa = direct_quadratic_objective(&keys, &qa, &h);
        assert!(j_qa < j_conv, "J' qa {j_qa} vs conventional {j_conv}");
    }

    #[test]
    fn transform_round_trip_identity() {
        let keys = gaussian(70, 128, 5, 1.0);
        let h = SpdMatrix::diagonal(&[2.0, 5.0, 1.0, 0.5, 3.0]);
        let cb = train_query_aware(&keys, &h, &train_cfg(71, 8)).unwrap();
        let l = cb.transform().unwrap().to_matrix();
        // (C_z L^{-1}) L = C_z
        let back = cb.codewords().matmul(&l).unwrap();
        let again = cb
            .transform()
            .unwrap()
            .right_solve(&back)
            .unwrap()
            .matmul(&l)
            .unwrap();
        for r in 0..back.rows() {
            for c in 0..back.cols() {
                let rel = (back.get(r, c) - again.get(r, c)).abs()
                    / (1.0 + back.get(r, c).abs());
                assert!(rel < 1e-9);
            }
        }
    }

    #[test]
    fn fewer_keys_than_codewords_rejected() {
        let keys = gaussian(80, 4, 3, 1.0);
        assert!(matches!(
            train_conventional(&keys, &train_cfg(81, 8)),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn duplicate_heavy_input_preserves_codebook_size() {
        let mut rows = vec![vec![1.0, 1.0]; 6];
        rows.push(vec![9.0, 9.0]);
        rows.push(vec![9.0, 9.0]);
        let keys = Matrix::from_rows(&rows).unwrap();
        let cb = train_conventional(&keys, &train_cfg(90, 3)).unwrap();
        assert_eq!(cb.size(), 3);
        let s = quantize(&keys, &cb).unwrap();
        for i in 0..keys.rows() {
            assert_eq!(keys.row(i), cb.codeword(s.get(i) as usize));
        }
    }

    #[test]
    fn lloyd_fixpoint_assignment_optimality() {
        let keys = gaussian(100, 300, 4, 1.0);
        let cfg = train_cfg(101, 8).with_max_iters(500);
        let (cb, trace) = train_conventional_traced(&keys, &cfg).unwrap();
        assert!(trace.converged);
        let s = quantize(&keys, &cb).unwrap();
        // No single reassignment lowers the objective: every key sits at
        // its nearest codeword.
        for i in 0..keys.rows() {
            let own = sq_dist(keys.row(i), cb.codeword(s.get(i) as usize));
            for j in 0..cb.size() {
                assert!(own <= sq_dist(keys.row(i), cb.codeword(j)) + 1e-12);
            }
        }

        let h = SpdMatrix::diagonal(&[4.0, 1.0, 0.25, 2.0]);
        let (qcb, qtrace) = train_query_aware_traced(&keys, &h, &cfg).unwrap();
        assert!(qtrace.converged);
        let qs = quantize(&keys, &qcb).unwrap();
        let hm = qcb.h_matrix().unwrap();
        for i in 0..keys.rows() {
            let diff_own: Vec<f64> = keys
                .row(i)
                .iter()
                .zip(qcb.codeword(qs.get(i) as usize))
                .map(|(k, c)| k - c)
                .collect();
            let own = hm.quadratic_form(&diff_own);
            for j in 0..qcb.size() {
                let diff: Vec<f64> = keys
                    .row(i)
                    .iter()
                    .zip(qcb.codeword(j))
                    .map(|(k, c)| k - c)
                    .collect();
                assert!(own <= hm.quadratic_form(&diff) + 1e-9);
            }
        }
    }
}

mod quantize_tests {
    use super::*;

    #[test]
    fn exact_codeword_maps_to_its_index() {
        let cb = Codebook::new_conventional(gaussian(110, 12, 5, 1.0)).unwrap();
        let key = Matrix::from_rows(&[cb.codeword(7).to_vec()]).unwrap();
        let s = quantize(&key, &cb).unwrap();
        assert_eq!(s.get(0), 7);
    }

    #[test]
    fn quadratic_form_breaks_euclidean_tie() {
        // k = (1,1) is Euclidean-equidistant from (0,1) and (1,0); under
        // H = diag(100, 1) the forms are 100 vs 1, so index 1 wins.
        let codewords = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let h = SpdMatrix::diagonal(&[100.0, 1.0]);
        let l = cholesky(&h).unwrap();
        let cb = Codebook::new_query_aware(codewords, l, h).unwrap();
        let key = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(quantize(&key, &cb).unwrap().get(0), 1);
    }

    #[test]
    fn euclidean_tie_goes_to_lowest_index() {
        let codewords = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let cb = Codebook::new_conventional(codewords).unwrap();
        let key = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(quantize(&key, &cb).unwrap().get(0), 0);
    }

    #[test]
    fn transformed_route_equals_brute_force_quadratic_form() {
        let keys = gaussian(120, 1000, 6, 1.0);
        let train_keys = gaussian(121, 400, 6, 1.0);
        let queries = {
            let mut rng = SeededRng::new(122);
            let cov = SpdMatrix::diagonal(&[16.0, 8.0, 4.0, 2.0, 1.0, 0.5]);
            sample_gaussian(&mut rng, 200, 6, 0.0, &Covariance::Spd(cov)).unwrap()
        };
        let h = estimate_h(&queries, 1e-6).unwrap();
        let cb = train_query_aware(&train_keys, &h, &train_cfg(123, 32)).unwrap();
        let s = quantize(&keys, &cb).unwrap();
        for i in 0..keys.rows() {
            assert_eq!(
                s.get(i),
                brute_force_qa_index(keys.row(i), &cb),
                "key {i}"
            );
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let cb = Codebook::new_conventional(gaussian(130, 4, 5, 1.0)).unwrap();
        let keys = gaussian(131, 3, 4, 1.0);
        assert!(matches!(quantize(&keys, &cb), Err(Error::Dimension(_))));
    }
}

mod similarity_tests {
    use super::*;

    #[test]
    fn self_similarity_is_one() {
        let cb = Codebook::new_conventional(gaussian(140, 8, 4, 1.0)).unwrap();
        let sim = codebook_similarity(&cb, &cb).unwrap();
        assert!((sim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn antipodal_singletons_give_minus_one() {
        let c1 = Codebook::new_conventional(
            Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let c2 = Codebook::new_conventional(
            Matrix::from_rows(&[vec![-1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        assert!((codebook_similarity(&c1, &c2).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_asymmetric_sizes() {
        // C1 = {e1, e2}, C2 = {e1}: forward average (1 + 0)/2 = 0.5,
        // backward max = 1, so sim = 0.5*0.5 + 0.5*1 = 0.75.
        let c1 = Codebook::new_conventional(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let c2 = Codebook::new_conventional(
            Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let sim = codebook_similarity(&c1, &c2).unwrap();
        assert!((sim - 0.75).abs() < 1e-12);
    }

    #[test]
    fn singleton_codebooks_from_one_cluster_are_near_identical() {
        let mut rng = SeededRng::new(153);
        let center = [3.0, 1.0, -2.0, 0.5];
        let mk = |rng: &mut SeededRng| {
            let noise =
                sample_gaussian(rng, 1, 4, 0.0, &Covariance::Scalar(0.0001)).unwrap();
            let row: Vec<f64> = center.iter().zip(noise.row(0)).map(|(c, e)| c + e).collect();
            Codebook::new_conventional(Matrix::from_rows(&[row]).unwrap()).unwrap()
        };
        let c1 = mk(&mut rng);
        let c2 = mk(&mut rng);
        let sim = codebook_similarity(&c1, &c2).unwrap();
        assert!(sim > 0.999, "sim {sim}");
    }

    #[test]
    fn similarity_is_symmetric() {
        let c1 = Codebook::new_conventional(gaussian(150, 6, 4, 1.0)).unwrap();
        let c2 = Codebook::new_conventional(gaussian(151, 9, 4, 1.0)).unwrap();
        assert_eq!(
            codebook_similarity(&c1, &c2).unwrap(),
            codebook_similarity(&c2, &c1).unwrap()
        );
    }

    #[test]
    fn zero_norm_codeword_rejected() {
        let c1 = Codebook::new_conventional(
            Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let c2 = Codebook::new_conventional(gaussian(152, 2, 2, 1.0)).unwrap();
        assert!(matches!(
            codebook_similarity(&c1, &c2),
            Err(Error::ZeroNormCodeword(0))
        ));
    }
}

mod attention_mse_tests {
    use super::*;

    #[test]
    fn lossless_codebook_gives_zero() {
        let keys = gaussian(160, 32, 4, 1.0);
        let cb = Codebook::new_conventional(keys.clone()).unwrap();
        let queries = gaussian(161, 16, 4, 1.0);
        assert_eq!(attention_mse(&queries, &keys, &cb).unwrap(), 0.0);
    }

    #[test]
    fn matches_naive_double_loop() {
        let keys = gaussian(170, 40, 5, 1.0);
        let queries = gaussian(171, 12, 5, 1.0);
        let cb = train_conventional(&keys, &train_cfg(172, 8)).unwrap();
        let got = attention_mse(&queries, &keys, &cb).unwrap();
        // Naive oracle.
        let s = quantize(&keys, &cb).unwrap();
        let mut total = 0.0;
        for i in 0..queries.rows() {
            for j in 0..keys.rows() {
                let mut e = 0.0;
                for c in 0..5 {
                    e += queries.get(i, c) * (keys.get(j, c) - cb.codeword(s.get(j) as usize)[c]);
                }
                total += e * e;
            }
        }
        let expect = total / (queries.rows() * keys.rows()) as f64;
        assert!((got - expect).abs() <= 1e-10 * expect.max(1.0));
    }

    #[test]
    fn quadratic_in_query_scale() {
        let keys = gaussian(180, 32, 4, 1.0);
        let queries = gaussian(181, 8, 4, 1.0);
        let cb = train_conventional(&keys, &train_cfg(182, 4)).unwrap();
        let base = attention_mse(&queries, &keys, &cb).unwrap();
        let doubled = Matrix::from_vec(
            queries.rows(),
            queries.cols(),
            queries.data().iter().map(|v| 2.0 * v).collect(),
        )
        .unwrap();
        let scaled = attention_mse(&doubled, &keys, &cb).unwrap();
        assert!((scaled - 4.0 * base).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn empty_inputs_rejected() {
        let keys = gaussian(190, 8, 4, 1.0);
        let cb = train_conventional(&keys, &train_cfg(191, 2)).unwrap();
        assert!(attention_mse(&Matrix::zeros(0, 4), &keys, &cb).is_err());
    }
}

mod objective_identity_tests {
    use super::*;

    #[test]
    fn quadratic_form_objective_equals_z_space_objective() {
        // For random PD H, random codebook, random keys: the quadratic-form
        // error equals the Euclidean error after transforming by L.
        for seed in [1u64, 2, 3, 4, 5] {
            let keys = gaussian(seed.wrapping_mul(7), 64, 5, 1.0);
            let queries = {
                let mut rng = SeededRng::new(seed.wrapping_mul(11));
                let cov = SpdMatrix::diagonal(&[9.0, 3.0, 1.0, 0.5, 0.1]);
                sample_gaussian(&mut rng, 64, 5, 0.0, &Covariance::Spd(cov)).unwrap()
            };
            let h = estimate_h(&queries, 1e-6).unwrap();
            let cb = train_query_aware(&keys, &h, &train_cfg(seed, 8)).unwrap();
            let l = cb.transform().unwrap();
            let hm = cb.h_matrix().unwrap();
            let s = quantize(&keys, &cb).unwrap();
            let z = keys.matmul(&l.to_matrix()).unwrap();
            let cz = cb.codewords().matmul(&l.to_matrix()).unwrap();
            let mut j_quad = 0.0;
            let mut j_z = 0.0;
            for i in 0..keys.rows() {
                let cw = cb.codeword(s.get(i) as usize);
                let diff: Vec<f64> =
                    keys.row(i).iter().zip(cw).map(|(k, c)| k - c).collect();
                j_quad += hm.quadratic_form(&diff);
                j_z += sq_dist(z.row(i), cz.row(s.get(i) as usize));
            }
            let rel = (j_quad - j_z).abs() / j_quad.abs().max(f64::MIN_POSITIVE);
            assert!(rel < 1e-9, "seed {seed}: {j_quad} vs {j_z} rel {rel:e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn quantize_matches_brute_force_property(seed in 0u64..200) {
        let keys = gaussian(seed, 50, 4, 1.0);
        let train_keys = gaussian(seed.wrapping_add(1), 64, 4, 1.0);
        let queries = gaussian(seed.wrapping_add(2), 32, 4, 2.0);
        let h = estimate_h(&queries, 1e-6).unwrap();
        let cb = train_query_aware(&train_keys, &h, &train_cfg(seed, 8)).unwrap();
        let s = quantize(&keys, &cb).unwrap();
        for i in 0..keys.rows() {
            prop_assert_eq!(s.get(i), brute_force_qa_index(keys.row(i), &cb));
        }
    }

    #[test]
    fn similarity_range_and_symmetry(s1 in 0u64..100, s2 in 100u64..200) {
        let c1 = Codebook::new_conventional(gaussian(s1, 5, 3, 1.0)).unwrap();
        let c2 = Codebook::new_conventional(gaussian(s2, 7, 3, 1.0)).unwrap();
        let sim = codebook_similarity(&c1, &c2).unwrap();
        prop_assert!((-1.0..=1.0).contains(&sim));
        prop_assert_eq!(sim, codebook_similarity(&c2, &c1).unwrap());
    }
}
