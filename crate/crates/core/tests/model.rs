use mgwcn_core::autodiff::Tape;
use mgwcn_core::graph::{normalized_laplacian, ModalityGraph, SpectralPrep};
use mgwcn_core::linalg::{DenseMatrix, SparseMatrix};
use mgwcn_core::model::{
    agw_forward, cross_modal_layer, cross_modal_map, forward_full, modality_dims, Activation, Mode, ModelConfig,
    ModelParams,
};
use mgwcn_core::rng::stream;
use mgwcn_core::wavelet::{build_bases, chebyshev_wavelet, WaveletBasis, WaveletSettings};
use mgwcn_core::Error;
use mgwcn_oracles::{
    dense_agw, dense_cross_layer, dense_cross_map, erdos_renyi, max_abs_diff, random_dense, random_permutation,
};
use proptest::prelude::*;

fn random_graph(n: usize, d: usize, c: usize, seed: u64) -> ModalityGraph {
    let a = erdos_renyi(n, 0.35, seed);
    let x = random_dense(n, d, seed + 1000);
    let labels = (0..n).map(|i| Some(i % c)).collect();
    ModalityGraph::new(a, x, labels).unwrap()
}

fn bases_for(g: &ModalityGraph, cfg: &ModelConfig) -> Vec<WaveletBasis> {
    let prep = SpectralPrep::from_adjacency(g.adjacency()).unwrap();
    build_bases(&prep, &cfg.scales, &cfg.wavelet).unwrap()
}

fn theta_column(n: usize, seed: u64) -> DenseMatrix {
    random_dense(n, 1, seed).map(|x| 1.0 + 0.5 * x)
}

fn column(m: &DenseMatrix) -> Vec<f64> {
    (0..m.rows()).map(|i| m.get(i, 0)).collect()
}

fn run_forward(
    graphs: &[ModalityGraph],
    bases: &[Vec<WaveletBasis>],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Vec<DenseMatrix> {
    let mut tape = Tape::new();
    let mut rng = stream(0, "dropout");
    let fwd = forward_full(&mut tape, graphs, bases, params, cfg, false, &mut rng).unwrap();
    fwd.z.iter().map(|&z| tape.value(z).clone()).collect()
}

#[test]
fn agw_matches_dense_evaluation() {
    for seed in 0..4u64 {
        let a = erdos_renyi(8, 0.4, seed);
        let prep = SpectralPrep::from_adjacency(&a).unwrap();
        let basis = chebyshev_wavelet(&prep, 0.7, &WaveletSettings::default()).unwrap();
        let h = random_dense(8, 3, seed + 10);
        let x0 = random_dense(8, 5, seed + 11);
        let theta = theta_column(8, seed + 12);
        let w = random_dense(3, 4, seed + 13);
        let v = random_dense(5, 4, seed + 14);
        for (act, relu_on) in [(Activation::Relu, true), (Activation::Identity, false)] {
            let mut tape = Tape::new();
            let th = tape.constant(h.clone());
            let tx = tape.constant(x0.clone());
            let tt = tape.param(theta.clone());
            let tw = tape.param(w.clone());
            let tv = tape.param(v.clone());
            let mut rng = stream(seed, "dropout");
            let out = agw_forward(&mut tape, th, tx, &basis, tt, tw, tv, act, 0.5, false, &mut rng).unwrap();
            let want = dense_agw(
                &h,
                &x0,
                &basis.psi.to_dense(),
                &basis.psi_inv.to_dense(),
                &column(&theta),
                &w,
                &v,
                relu_on,
            );
            assert!(max_abs_diff(tape.value(out), &want) <= 1e-12);
        }
    }
}

#[test]
fn agw_rejects_shape_mismatch() {
    let basis = WaveletBasis::identity(4, &WaveletSettings::default());
    let mut tape = Tape::new();
    let h = tape.constant(DenseMatrix::zeros(5, 2));
    let x = tape.constant(DenseMatrix::zeros(5, 2));
    let t = tape.param(DenseMatrix::filled(5, 1, 1.0));
    let w = tape.param(DenseMatrix::zeros(2, 2));
    let v = tape.param(DenseMatrix::zeros(2, 2));
    let mut rng = stream(0, "dropout");
    let r = agw_forward(&mut tape, h, x, &basis, t, w, v, Activation::Relu, 0.0, false, &mut rng);
    assert!(matches!(r, Err(Error::Shape { .. })));
}

#[test]
fn cross_map_with_hard_permutation_matches_dense() {
    let a = erdos_renyi(4, 0.6, 3);
    let prep = SpectralPrep::from_adjacency(&a).unwrap();
    let basis = chebyshev_wavelet(&prep, 0.7, &WaveletSettings::default()).unwrap();
    let (_, p) = random_permutation(4, 9);
    let h = random_dense(4, 3, 21);
    let theta = theta_column(4, 22);
    let mut tape = Tape::new();
    let th = tape.constant(h.clone());
    let tt = tape.param(theta.clone());
    let tp = tape.param(p.clone());
    let out = cross_modal_map(&mut tape, th, &basis, tt, tp).unwrap();
    let want = dense_cross_map(&h, &basis.psi.to_dense(), &basis.psi_inv.to_dense(), &column(&theta), &p);
    assert!(max_abs_diff(tape.value(out), &want) <= 1e-12);

    // Rectangular correspondence: 3 nodes in m, 4 in e.
    let pr = random_dense(3, 4, 23).map(f64::abs);
    let hr = random_dense(3, 2, 24);
    let hr_t = tape.constant(hr.clone());
    let pr_t = tape.param(pr.clone());
    let out = cross_modal_map(&mut tape, hr_t, &basis, tt, pr_t).unwrap();
    let want = dense_cross_map(&hr, &basis.psi.to_dense(), &basis.psi_inv.to_dense(), &column(&theta), &pr);
    assert!(max_abs_diff(tape.value(out), &want) <= 1e-12);
}

#[test]
fn cross_layer_matches_dense_for_two_modalities() {
    let h0 = random_dense(5, 3, 31);
    let h1 = random_dense(6, 3, 32);
    let map0 = random_dense(5, 3, 33);
    let map1 = random_dense(6, 3, 34);
    let w0 = random_dense(6, 4, 35);
    let w1 = random_dense(6, 4, 36);
    let mut tape = Tape::new();
    let t: Vec<_> = [&h0, &h1, &map0, &map1].iter().map(|m| tape.constant((*m).clone())).collect();
    let tw0 = tape.param(w0.clone());
    let tw1 = tape.param(w1.clone());
    let out = cross_modal_layer(&mut tape, &[t[0], t[1]], &[vec![t[2]], vec![t[3]]], &[tw0, tw1], Activation::Relu)
        .unwrap();
    assert!(max_abs_diff(tape.value(out[0]), &dense_cross_layer(&h0, &[map0], &w0, true)) <= 1e-12);
    assert!(max_abs_diff(tape.value(out[1]), &dense_cross_layer(&h1, &[map1], &w1, true)) <= 1e-12);
}

#[test]
fn multimodal_mode_needs_two_modalities() {
    let cfg = ModelConfig { mode: Mode::MGwcn, n_modalities: 1, ..ModelConfig::default() };
    match cfg.validate() {
        Err(Error::Config(msg)) => assert!(msg.contains("GWCN"), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

fn zero_params(params: &mut ModelParams) {
    for (_, m) in params.slots_mut() {
        for x in m.as_mut_slice() {
            *x = 0.0;
        }
    }
}

#[test]
fn zero_weights_give_uniform_distributions() {
    let g = random_graph(10, 4, 3, 1);
    let cfg = ModelConfig { n_classes: 3, ..ModelConfig::default() };
    let bases = vec![bases_for(&g, &cfg)];
    let graphs = vec![g];
    let mut params = ModelParams::init(&cfg, &modality_dims(&graphs), &mut stream(1, "init")).unwrap();
    zero_params(&mut params);
    let z = run_forward(&graphs, &bases, &params, &cfg);
    assert!(z[0].as_slice().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn gwcn_forward_is_bitwise_reproducible() {
    let g = random_graph(10, 4, 2, 2);
    let cfg = ModelConfig::default();
    let bases = vec![bases_for(&g, &cfg)];
    let graphs = vec![g];
    let p1 = ModelParams::init(&cfg, &modality_dims(&graphs), &mut stream(5, "init")).unwrap();
    let p2 = ModelParams::init(&cfg, &modality_dims(&graphs), &mut stream(5, "init")).unwrap();
    assert_eq!(p1, p2);
    let z1 = run_forward(&graphs, &bases, &p1, &cfg);
    let z2 = run_forward(&graphs, &bases, &p2, &cfg);
    let bits = |z: &DenseMatrix| z.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&z1[0]), bits(&z2[0]));
}

#[test]
fn zero_scale_has_no_cross_node_mixing() {
    let g = random_graph(9, 4, 3, 3);
    let cfg = ModelConfig { scales: vec![0.0], n_classes: 3, ..ModelConfig::default() };
    let bases = vec![bases_for(&g, &cfg)];
    let graphs = vec![g.clone()];
    let params = ModelParams::init(&cfg, &modality_dims(&graphs), &mut stream(3, "init")).unwrap();
    let base = run_forward(&graphs, &bases, &params, &cfg);
    let mut x = g.features().clone();
    for c in 0..x.cols() {
        x.set(4, c, x.get(4, c) + 3.0);
    }
    let perturbed = vec![g.with_features(x).unwrap()];
    let z = run_forward(&perturbed, &bases, &params, &cfg);
    for i in (0..9).filter(|&i| i != 4) {
        assert_eq!(z[0].row(i), base[0].row(i), "row {i} changed");
    }
    assert_ne!(z[0].row(4), base[0].row(4));
}

fn multimodal_setup(mode: Mode, seed: u64) -> (Vec<ModalityGraph>, Vec<Vec<WaveletBasis>>, ModelConfig) {
    let graphs = vec![random_graph(7, 3, 2, seed), random_graph(7, 5, 2, seed + 50)];
    let cfg = ModelConfig {
        mode,
        n_modalities: 2,
        hidden_dims: vec![4, 4],
        cross_dim: 4,
        ..ModelConfig::default()
    };
    let bases = graphs.iter().map(|g| bases_for(g, &cfg)).collect();
    (graphs, bases, cfg)
}

#[test]
fn rows_sum_to_one_in_every_mode() {
    for seed in 0..3u64 {
        let g = random_graph(10, 4, 3, seed);
        let cfg = ModelConfig { n_classes: 3, ..ModelConfig::default() };
        let graphs = vec![g];
        let bases = vec![bases_for(&graphs[0], &cfg)];
        let params = ModelParams::init(&cfg, &modality_dims(&graphs), &mut stream(seed, "init")).unwrap();
        let mut all = run_forward(&graphs, &bases, &params, &cfg);

        for mode in [Mode::MGwcn, Mode::MvGwcn] {
            let (graphs, bases, cfg) = multimodal_setup(mode, seed);
            let mut params = ModelParams::init(&cfg, &modality_dims(&graphs), &mut stream(seed, "init")).unwrap();
            if mode == Mode::MvGwcn {
                let (_, p) = random_permutation(7, seed);
                params = params
                    .with_fixed_correspondences(vec![mgwcn_core::model::PairParams { m: 0, e: 1, p }])
                    .unwrap();
            }
            all.extend(run_forward(&graphs, &bases, &params, &cfg));
        }
        for z in &all {
            for i in 0..z.rows() {
                let s: f64 = z.row(i).iter().sum();
                assert!((s - 1.0).abs() <= 1e-9);
            }
        }
    }
}

/// Relabels a graph and rebuilds its bases against the original `λ_max`,
/// so both runs use the same spectral rescaling.
fn relabeled(g: &ModalityGraph, perm: &[usize], cfg: &ModelConfig) -> (ModalityGraph, Vec<WaveletBasis>, f64) {
    let prep = SpectralPrep::from_adjacency(g.adjacency()).unwrap();
    let pg = g.permuted(perm).unwrap();
    let pprep = SpectralPrep::with_lambda_max(normalized_laplacian(pg.adjacency()).unwrap(), prep.lambda_max).unwrap();
    let bases = build_bases(&pprep, &cfg.scales, &cfg.wavelet).unwrap();
    (pg, bases, prep.lambda_max)
}

fn equivariance_error(n: usize, seed: u64) -> f64 {
    let g = random_graph(n, 5, 3, seed);
    let cfg = ModelConfig { n_classes: 3, ..ModelConfig::default() };
    let graphs = vec![g.clone()];
    let bases = vec![bases_for(&g, &cfg)];
    let mut params = ModelParams::init(&cfg, &modality_dims(&graphs), &mut stream(seed, "init")).unwrap();
    for (k, layer) in params.modalities[0].theta.iter_mut().enumerate() {
        for (s, th) in layer.iter_mut().enumerate() {
            *th = theta_column(n, seed * 31 + (k * 7 + s) as u64);
        }
    }
    let z = run_forward(&graphs, &bases, &params, &cfg);

    let (perm, _) = random_permutation(n, seed + 77);
    let (pg, pbases, _) = relabeled(&g, &perm, &cfg);
    let mut pparams = params.clone();
    for layer in pparams.modalities[0].theta.iter_mut() {
        for th in layer.iter_mut() {
            *th = th.select_rows(&perm);
        }
    }
    let pz = run_forward(&[pg], &[pbases], &pparams, &cfg);
    max_abs_diff(&pz[0], &z[0].select_rows(&perm))
}

#[test]
fn gwcn_forward_commutes_with_relabeling() {
    for seed in 0..10u64 {
        let err = equivariance_error(12 + seed as usize, seed);
        assert!(err <= 1e-9, "seed {seed}: {err}");
    }
}

#[test]
fn gcn_two_node_normalization() {
    let a = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
    let hat = mgwcn_core::model::gcn_normalized_adjacency(&a).unwrap();
    assert_eq!(hat.to_dense(), DenseMatrix::filled(2, 2, 0.5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn relabeling_equivariance_holds_generally(n in 4usize..20, seed in 0u64..1000) {
        prop_assert!(equivariance_error(n, seed) <= 1e-9);
    }
}
