use super::*;

fn fragment_graph(f: &Fragment) -> Graph {
    Graph::new(f.num_nodes, f.edges.clone(), Matrix::zeros(f.num_nodes, 1), 0, GraphMeta::default())
        .unwrap()
}

#[test]
fn motif_sizes() {
    let sizes: Vec<(usize, usize)> = MotifKind::ALL
        .iter()
        .map(|&k| {
            let f = gen_motif(k);
            (f.num_nodes, f.edges.len())
        })
        .collect();
    assert_eq!(sizes, vec![(5, 6), (5, 5), (8, 8)]);
    for k in MotifKind::ALL {
        assert!(fragment_graph(&gen_motif(k)).is_connected());
    }
}

#[test]
fn house_has_one_triangle_and_cycle_none() {
    let triangles = |f: &Fragment| {
        let has = |a: u32, b: u32| f.edges.contains(&(a.min(b), a.max(b)));
        let n = f.num_nodes as u32;
        let mut count = 0;
        for a in 0..n {
            for b in a + 1..n {
                for c in b + 1..n {
                    if has(a, b) && has(b, c) && has(a, c) {
                        count += 1;
                    }
                }
            }
        }
        count
    };
    assert_eq!(triangles(&gen_motif(MotifKind::House)), 1);
    assert_eq!(triangles(&gen_motif(MotifKind::Cycle)), 0);
    assert_eq!(triangles(&gen_motif(MotifKind::Crane)), 0);
}

#[test]
fn base_examples() {
    let wheel = gen_base(BaseKind::Wheel, 6).unwrap();
    assert_eq!((wheel.num_nodes, wheel.edges.len()), (6, 10));
    let ladder = gen_base(BaseKind::Ladder, 6).unwrap();
    assert_eq!((ladder.num_nodes, ladder.edges.len()), (6, 7));
    let tree = gen_base(BaseKind::Tree, 7).unwrap();
    assert_eq!((tree.num_nodes, tree.edges.len()), (7, 6));
    // balanced: leaves 3..7 all at depth 2
    assert!(tree.edges.iter().all(|&(p, c)| p == (c - 1) / 2));
}

#[test]
fn bases_are_connected_across_sizes() {
    for kind in BaseKind::ALL {
        for size in kind.min_size()..30 {
            let f = gen_base(kind, size).unwrap();
            let g = fragment_graph(&f);
            assert!(g.is_connected(), "{kind:?} {size}");
        }
    }
}

#[test]
fn too_small_base_is_a_domain_error() {
    for kind in BaseKind::ALL {
        assert!(matches!(gen_base(kind, kind.min_size() - 1), Err(Error::Domain(_))));
    }
}

#[test]
fn degenerate_bias_always_pairs() {
    let mut rng = SplitRng::new(3, 0);
    for y in 0..3 {
        for _ in 0..200 {
            assert_eq!(sample_pair(y, 1.0, &mut rng), (MotifKind::ALL[y], BaseKind::ALL[y]));
        }
    }
}

fn base_counts(y: usize, bias: f64, draws: usize, seed: u64) -> [usize; 3] {
    let mut rng = SplitRng::new(seed, 0);
    let mut counts = [0; 3];
    for _ in 0..draws {
        counts[sample_pair(y, bias, &mut rng).1.index()] += 1;
    }
    counts
}

#[test]
fn unbiased_pairing_is_uniform() {
    let c = base_counts(1, UNBIASED, 9000, 4);
    assert!(c.iter().all(|&k| (2700..3300).contains(&k)), "{c:?}");
}

#[test]
fn pairing_frequency_at_bias_point_nine() {
    for y in 0..3 {
        let c = base_counts(y, 0.9, 10_000, 5 + y as u64);
        let paired = c[y] as f64 / 10_000.0;
        assert!((0.88..=0.92).contains(&paired), "{paired}");
    }
}

#[test]
fn attach_counts_and_ground_truth() {
    let mut rng = SplitRng::new(6, 0);
    let base = gen_base(BaseKind::Ladder, 10).unwrap();
    for kind in MotifKind::ALL {
        let motif = gen_motif(kind);
        let g = attach((BaseKind::Ladder, &base), (kind, &motif), &mut rng).unwrap();
        assert_eq!(g.num_nodes(), base.num_nodes + motif.num_nodes);
        assert_eq!(g.num_edges(), base.edges.len() + motif.edges.len() + 1);
        assert_eq!(g.meta().gt_edges.len(), motif.edges.len());
        let off = base.num_nodes as u32;
        for &e in &g.meta().gt_edges {
            let (u, v) = g.edges()[e];
            assert!(u >= off && v >= off);
        }
        // the connector is the only edge straddling the two parts
        let straddle = g.edges().iter().filter(|&&(u, v)| u < off && v >= off).count();
        assert_eq!(straddle, 1);
        assert!(g.is_connected());
    }
}

fn fresh_graph(y: usize) -> Graph {
    let mut rng = SplitRng::new(0, 0);
    let base = gen_base(BaseKind::Tree, 9).unwrap();
    let motif = gen_motif(MotifKind::ALL[y]);
    attach((BaseKind::Tree, &base), (MotifKind::ALL[y], &motif), &mut rng).unwrap()
}

#[test]
fn fiif_degenerate_bias_sets_label_pattern() {
    let mut rng = SplitRng::new(7, 0);
    let g = apply_attr_shift(fresh_graph(2), ShiftMode::MixedFiif, 1.0, 0.0, 4, &mut rng);
    for r in 0..g.num_nodes() {
        assert_eq!(g.features().row(r), &[0.0, 0.0, 1.0, 0.0]);
    }
    assert_eq!(g.meta().attr, Some(2));
}

#[test]
fn piif_without_noise_matches_fiif() {
    for seed in 0..20 {
        let mut a = SplitRng::new(seed, 1);
        let mut b = SplitRng::new(seed, 1);
        let fiif = apply_attr_shift(fresh_graph(1), ShiftMode::MixedFiif, 0.7, 0.0, 3, &mut a);
        let piif = apply_attr_shift(fresh_graph(1), ShiftMode::MixedPiif, 0.7, 0.0, 3, &mut b);
        assert_eq!(fiif, piif);
    }
}

#[test]
fn piif_flip_fraction() {
    let mut rng = SplitRng::new(8, 0);
    let template = fresh_graph(0);
    let mut flipped = 0;
    for _ in 0..10_000 {
        let g = apply_attr_shift(template.clone(), ShiftMode::MixedPiif, 0.9, 0.05, 3, &mut rng);
        if g.meta().flipped {
            flipped += 1;
            assert_ne!(g.label(), g.meta().motif);
        } else {
            assert_eq!(g.label(), g.meta().motif);
        }
    }
    let frac = flipped as f64 / 10_000.0;
    assert!((0.04..=0.06).contains(&frac), "{frac}");
}

#[test]
fn struc_features_are_standard_normal() {
    let mut rng = SplitRng::new(9, 0);
    let g = apply_attr_shift(fresh_graph(0), ShiftMode::Struc, 0.9, 0.0, 200, &mut rng);
    let x = g.features().data();
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    assert!(mean.abs() < 0.05, "{mean}");
    assert_eq!(g.meta().attr, None);
}

fn small_cfg(mode: ShiftMode, seed: u64) -> GenConfig {
    GenConfig {
        train_per_class: 40,
        val_per_class: 10,
        test_per_class: 10,
        shift_mode: mode,
        seed,
        ..GenConfig::default()
    }
}

#[test]
fn dataset_is_deterministic_and_mode_independent() {
    let cfg = small_cfg(ShiftMode::MixedPiif, 21);
    let a = gen_dataset_with(&cfg, Execution::Sequential).unwrap();
    let b = gen_dataset_with(&cfg, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    let (mut ba, mut bb) = (Vec::new(), Vec::new());
    crate::graphdata::write_dataset(&a, &mut ba).unwrap();
    crate::graphdata::write_dataset(&gen_dataset(&cfg).unwrap(), &mut bb).unwrap();
    assert_eq!(ba, bb);
    assert_ne!(a, gen_dataset(&small_cfg(ShiftMode::MixedPiif, 22)).unwrap());
}

#[test]
fn split_sizes_and_class_balance() {
    let d = gen_dataset(&small_cfg(ShiftMode::Struc, 1)).unwrap();
    assert_eq!((d.train.len(), d.val.len(), d.test.len()), (120, 30, 30));
    for split in [&d.train, &d.val, &d.test] {
        let mut counts = [0; 3];
        split.iter().for_each(|g| counts[g.meta().motif] += 1);
        assert!(counts.iter().all(|&c| c == split.len() / 3));
    }
}

#[test]
fn emitted_graphs_satisfy_generation_invariants() {
    for mode in [ShiftMode::Struc, ShiftMode::MixedFiif, ShiftMode::MixedPiif] {
        let d = gen_dataset(&small_cfg(mode, 2)).unwrap();
        for g in d.train.iter().chain(&d.val).chain(&d.test) {
            assert!(g.is_connected());
            let m = g.meta();
            let motif = gen_motif(MotifKind::ALL[m.motif]);
            assert_eq!(m.gt_edges.len(), motif.edges.len());
            let motif_start = g.num_nodes() - motif.num_nodes;
            let internal: Vec<usize> = g
                .edges()
                .iter()
                .enumerate()
                .filter(|(_, &(u, v))| u as usize >= motif_start && v as usize >= motif_start)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(internal, m.gt_edges);
            if !m.flipped {
                assert_eq!(g.label(), m.motif);
            }
            assert_eq!(g.feature_dim(), 4);
        }
        // held-out labels are clean
        assert!(d.val.iter().chain(&d.test).all(|g| !g.meta().flipped));
    }
}

#[test]
fn train_cooccurrence_follows_bias() {
    let cfg = GenConfig {
        train_per_class: 3334,
        val_per_class: 1,
        test_per_class: 1,
        bias: 0.9,
        seed: 31,
        ..GenConfig::default()
    };
    let d = gen_dataset(&cfg).unwrap();
    let mut joint = [[0usize; 3]; 3];
    for g in &d.train {
        joint[g.meta().motif][g.meta().base] += 1;
    }
    for (y, row) in joint.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (b, &c) in row.iter().enumerate() {
            let p = c as f64 / total as f64;
            let want = if b == y { 0.9 } else { 0.05 };
            assert!((p - want).abs() <= 0.02, "motif {y} base {b}: {p}");
        }
    }
}

#[test]
fn held_out_pairing_is_unbiased() {
    let cfg = GenConfig {
        train_per_class: 1,
        val_per_class: 1000,
        test_per_class: 1000,
        bias: 0.9,
        seed: 32,
        ..GenConfig::default()
    };
    let d = gen_dataset(&cfg).unwrap();
    for split in [&d.val, &d.test] {
        let paired = split.iter().filter(|g| g.meta().base == g.meta().motif).count();
        let p = paired as f64 / split.len() as f64;
        assert!((p - 1.0 / 3.0).abs() <= 0.03, "{p}");
    }
}

fn ks_statistic(a: &[usize], b: &[usize]) -> f64 {
    let max = *a.iter().chain(b).max().unwrap();
    let cdf = |xs: &[usize], t: usize| xs.iter().filter(|&&x| x <= t).count() as f64 / xs.len() as f64;
    (0..=max).map(|t| (cdf(a, t) - cdf(b, t)).abs()).fold(0.0, f64::max)
}

#[test]
fn size_marginals_match_without_size_shift() {
    let cfg = GenConfig {
        train_per_class: 3334,
        val_per_class: 1,
        test_per_class: 3334,
        seed: 33,
        ..GenConfig::default()
    };
    let d = gen_dataset(&cfg).unwrap();
    let sizes = |s: &[Graph]| s.iter().map(Graph::num_nodes).collect::<Vec<_>>();
    let ks = ks_statistic(&sizes(&d.train), &sizes(&d.test));
    assert!(ks < 0.05, "{ks}");
}

#[test]
fn size_shift_moves_the_marginal() {
    let cfg = GenConfig {
        train_per_class: 500,
        val_per_class: 1,
        test_per_class: 500,
        eval_base_size_range: Some((30, 40)),
        seed: 34,
        ..GenConfig::default()
    };
    let d = gen_dataset(&cfg).unwrap();
    let sizes = |s: &[Graph]| s.iter().map(Graph::num_nodes).collect::<Vec<_>>();
    assert!(ks_statistic(&sizes(&d.train), &sizes(&d.test)) > 0.5);
}

#[test]
fn config_validation() {
    let ok = GenConfig::default();
    assert!(ok.validate().is_ok());
    assert!(GenConfig { bias: 0.33, ..ok.clone() }.validate().is_ok());
    assert!(GenConfig { bias: 0.3, ..ok.clone() }.validate().is_err());
    assert!(GenConfig { bias: 1.01, ..ok.clone() }.validate().is_err());
    assert!(GenConfig { train_per_class: 0, ..ok.clone() }.validate().is_err());
    assert!(GenConfig { piif_flip_prob: 0.5, ..ok.clone() }.validate().is_err());
    assert!(GenConfig { base_size_range: (3, 10), ..ok.clone() }.validate().is_err());
    assert!(GenConfig {
        feature_dim: 2,
        shift_mode: ShiftMode::MixedFiif,
        ..ok.clone()
    }
    .validate()
    .is_err());
    assert!(GenConfig { num_classes: 2, ..ok }.validate().is_err());
}
