mod common;

use common::constant_net;
use ndarray::Array2;
use proptest::prelude::*;
use uqsep::problems::toy_problem;
use uqsep::surrogates::{alpha_for_unit_sigma, QuantileSurrogate, Standardizer, Surrogate};
use uqsep::umap::*;
use uqsep::Error;

/// Toy-slice grid; small sizes bypass validation for hand-written fixtures.
fn grid(n: usize) -> GridSpec {
    GridSpec {
        dims: [0, 1],
        low: [-5.0, -5.0],
        high: [5.0, 5.0],
        resolution: [n, n],
        fixed: vec![0.0, 0.0],
    }
}

fn map_from(g: &GridSpec, values: Vec<f64>) -> UncertaintyMap {
    let (r, c) = g.shape();
    UncertaintyMap::new(
        g.clone(),
        Array2::from_shape_vec((r, c), values).unwrap(),
        MapKind::Epistemic,
        MapOutput::Index(0),
    )
    .unwrap()
}

fn mask_from(g: &GridSpec, bits: Vec<bool>) -> BinaryMask {
    BinaryMask {
        grid: g.clone(),
        bits: Array2::from_shape_vec(g.shape(), bits).unwrap(),
    }
}

#[test]
fn grid_geometry() {
    let g = GridSpec::for_problem(&toy_problem(), 8).unwrap();
    assert_eq!(g, grid(8));
    assert_eq!(g.shape(), (8, 8));
    assert_eq!(g.n_cells(), 64);
    assert_eq!(g.step(0), 1.25);
    assert_eq!(g.center(0, 0), [-4.375, -4.375]);
    assert_eq!(g.center(7, 2), [4.375, -1.875]);
    assert!(GridSpec::for_problem(&toy_problem(), 4).is_err());
}

#[test]
fn normalize_examples() {
    let g = grid(2);
    let m = map_from(&g, vec![1.0, 2.0, 3.0, 5.0]);
    let n = normalize(&m, MinMax { min: 1.0, max: 3.0 });
    assert_eq!(n.values.iter().copied().collect::<Vec<_>>(), vec![0.0, 0.5, 1.0, 1.0]);
    let flat = normalize(&m, MinMax { min: 2.0, max: 2.0 });
    assert!(flat.values.iter().all(|&v| v == 0.0));
}

#[test]
fn frozen_stats_come_from_the_first_maps() {
    let g = grid(2);
    let maps = vec![OutputMaps {
        epistemic: map_from(&g, vec![0.1, 0.4, 0.2, 0.3]),
        aleatoric: map_from(&g, vec![2.0, 2.0, 2.0, 6.0]),
    }];
    let stats = fit_minmax(&maps);
    assert_eq!(stats.epistemic[0], MinMax { min: 0.1, max: 0.4 });
    assert_eq!(stats.aleatoric[0], MinMax { min: 2.0, max: 6.0 });
    let later = vec![OutputMaps {
        epistemic: map_from(&g, vec![0.0, 0.1, 0.1, 0.25]),
        aleatoric: map_from(&g, vec![2.0, 2.0, 2.0, 4.0]),
    }];
    let n = normalize_all(&later, &stats).unwrap();
    assert!((n[0].epistemic.values[[1, 1]] - 0.5).abs() < 1e-12);
    assert_eq!(n[0].aleatoric.values[[1, 1]], 0.5);
    assert!(normalize_all(&[later[0].clone(), later[0].clone()], &stats).is_err());
}

#[test]
fn products_start_from_ones() {
    let g = grid(2);
    let a = map_from(&g, vec![0.5, 1.0, 0.0, 2.0]);
    let b = map_from(&g, vec![0.5, 0.5, 1.0, 1.0]);
    let single = combine_across_outputs(std::slice::from_ref(&a)).unwrap();
    assert_eq!(single.values, a.values);
    let both = combine_across_outputs(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(both.values.iter().copied().collect::<Vec<_>>(), vec![0.25, 0.5, 0.0, 2.0]);
    assert_eq!(both.output, MapOutput::All);
    assert!(combine_across_outputs(&[]).is_err());
    let sum = combine_per_output(&a, &b).unwrap();
    assert_eq!(sum.values[[1, 1]], 3.0);
    assert_eq!(sum.kind, MapKind::Combined);
}

#[test]
fn mismatched_grids_are_rejected() {
    let a = map_from(&grid(2), vec![0.0; 4]);
    let b = map_from(&grid(3), vec![0.0; 9]);
    assert!(combine_per_output(&a, &b).is_err());
    assert!(xor_masks(&BinaryMask::empty(&grid(2)), &BinaryMask::empty(&grid(3))).is_err());
    assert!(UncertaintyMap::new(grid(2), Array2::zeros((3, 3)), MapKind::Aleatoric, MapOutput::Index(0)).is_err());
}

#[test]
fn binarize_includes_the_threshold() {
    let g = grid(2);
    let m = map_from(&g, vec![0.1, 0.5, 0.49, 1.0]);
    assert_eq!(binarize(&m, 0.5).cells(), vec![(0, 1), (1, 1)]);
    assert_eq!(binarize_relative(&m.scaled(4.0), 0.5).cells(), vec![(0, 1), (1, 1)]);
    let zero = map_from(&g, vec![0.0; 4]);
    assert!(binarize_relative(&zero, 0.5).is_empty());
}

fn unit_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..=1.0, n)
}

proptest! {
    #[test]
    fn normalized_values_stay_in_unit_interval(v in proptest::collection::vec(0.0f64..5.0, 9), lo in 0.0f64..3.0, span in 0.0f64..4.0) {
        let m = map_from(&grid(3), v);
        let n = normalize(&m, MinMax { min: lo, max: lo + span });
        prop_assert!(n.values.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn total_map_is_bounded(e0 in unit_values(9), a0 in unit_values(9), e1 in unit_values(9), a1 in unit_values(9)) {
        let g = grid(3);
        let halves: Vec<_> = [(e0, a0), (e1, a1)]
            .into_iter()
            .map(|(e, a)| combine_per_output(&map_from(&g, e), &map_from(&g, a)).unwrap().scaled(0.5))
            .collect();
        let total = combine_across_outputs(&halves).unwrap();
        prop_assert!(total.values.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn binarize_is_monotone_in_threshold(v in unit_values(9), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let m = map_from(&grid(3), v);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(binarize(&m, hi).is_subset_of(&binarize(&m, lo)));
    }

    #[test]
    fn xor_algebra(a in proptest::collection::vec(any::<bool>(), 9), b in proptest::collection::vec(any::<bool>(), 9)) {
        let g = grid(3);
        let (a, b) = (mask_from(&g, a), mask_from(&g, b));
        prop_assert!(xor_masks(&a, &a).unwrap().is_empty());
        prop_assert_eq!(xor_masks(&a, &b).unwrap(), xor_masks(&b, &a).unwrap());
        prop_assert_eq!(xor_masks(&xor_masks(&a, &b).unwrap(), &b).unwrap(), a.clone());
        prop_assert_eq!(xor_masks(&a, &BinaryMask::empty(&g)).unwrap(), a);
    }
}

#[test]
fn sampling_in_a_single_cell_stays_inside_it() {
    let g = grid(8);
    let mut bits = vec![false; 64];
    bits[2 * 8 + 5] = true;
    let m = mask_from(&g, bits);
    let xs = sample_in_mask(&m, 500, &toy_problem(), 3).unwrap().unwrap();
    let (lo0, lo1) = (-5.0 + 2.0 * 1.25, -5.0 + 5.0 * 1.25);
    for row in xs.rows() {
        assert!(row[0] >= lo0 && row[0] < lo0 + 1.25);
        assert!(row[1] >= lo1 && row[1] < lo1 + 1.25);
    }
    assert_eq!(sample_in_mask(&m, 500, &toy_problem(), 3).unwrap().unwrap(), xs);
}

#[test]
fn sampling_is_uniform_over_mask_cells() {
    let g = grid(8);
    let chosen = [(0, 0), (1, 6), (7, 2)];
    let mut bits = vec![false; 64];
    for (i, j) in chosen {
        bits[i * 8 + j] = true;
    }
    let m = mask_from(&g, bits);
    let n = 10_000;
    let xs = sample_in_mask(&m, n, &toy_problem(), 11).unwrap().unwrap();
    let mut counts = [0usize; 3];
    for row in xs.rows() {
        let cell = (((row[0] + 5.0) / 1.25) as usize, ((row[1] + 5.0) / 1.25) as usize);
        let k = chosen.iter().position(|&c| c == cell).expect("sample outside the mask");
        counts[k] += 1;
    }
    // chi-square with 2 dof; 13.8 is the 0.999 quantile
    let expect = n as f64 / 3.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    assert!(chi2 < 13.8, "{counts:?}");
}

#[test]
fn sampling_edge_cases() {
    let g = grid(8);
    assert!(sample_in_mask(&BinaryMask::empty(&g), 5, &toy_problem(), 0).unwrap().is_none());
    assert!(matches!(sample_in_mask(&BinaryMask::full(&g), 0, &toy_problem(), 0), Err(Error::Config(_))));
}

fn constant_eqr(lo: f64, med: f64, hi: f64) -> Surrogate {
    let nets = (0..3).map(|_| constant_net(2, &[lo, med, hi, lo, med, hi])).collect();
    Surrogate::Eqr(QuantileSurrogate::from_members(nets, alpha_for_unit_sigma(), 0.7, Standardizer::identity(2, 2)).unwrap())
}

#[test]
fn maps_of_a_constant_model() {
    let g = grid(8);
    let maps = evaluate_maps(&constant_eqr(-1.0, 0.0, 1.0), &toy_problem(), &g).unwrap();
    assert_eq!(maps.len(), 2);
    for m in &maps {
        assert_eq!(m.epistemic.values.dim(), (8, 8));
        assert!(m.epistemic.values.iter().all(|&v| v == 0.0));
        // spread 2 at alpha = Phi(-0.5) is two unit sigmas
        assert!(m.aleatoric.values.iter().all(|&v| (v - 2.0).abs() < 1e-9));
    }
}

#[test]
fn map_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = grid(9);
    let m = map_from(&g, (0..81).map(|k| (k as f64 * 0.37).sin().abs() / 3.0).collect());
    let csv = dir.path().join("m.csv");
    m.write_csv(&csv).unwrap();
    let back = UncertaintyMap::read_csv(&csv, &g, MapKind::Epistemic, MapOutput::Index(0)).unwrap();
    assert_eq!(back, m);
    assert!(UncertaintyMap::read_csv(&csv, &grid(4), MapKind::Epistemic, MapOutput::Index(0)).is_err());

    let mask = binarize(&m, 0.15);
    let pgm = dir.path().join("m.pgm");
    mask.write_pgm(&pgm).unwrap();
    assert_eq!(BinaryMask::read_pgm(&pgm, &g).unwrap(), mask);
    m.write_pgm(&dir.path().join("v.pgm")).unwrap();
    let bytes = std::fs::read(dir.path().join("v.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5\n5 5\n255\n") || bytes.starts_with(b"P2"));
}

#[test]
fn reloaded_model_gives_identical_maps() {
    let dir = tempfile::tempdir().unwrap();
    let problem = toy_problem();
    let d = uqsep::problems::build_initial_dataset(&problem, 150, 2).unwrap();
    let mut cfg = uqsep::surrogates::EqrConfig::default();
    cfg.network.hidden = vec![8];
    cfg.train.epochs = 3;
    let (model, _) = Surrogate::train(&d, &uqsep::surrogates::SurrogateConfig::Eqr(cfg)).unwrap();
    let path = dir.path().join("model.bin");
    model.save(&path).unwrap();
    let g = grid(12);
    let a = evaluate_maps(&model, &problem, &g).unwrap();
    let b = evaluate_maps(&Surrogate::load(&path).unwrap(), &problem, &g).unwrap();
    assert_eq!(a, b);
}
