use asgat::graph::split_per_class;
use asgat::model::{Backend, GraphContext};
use asgat::synthetic::{planted_partition, toy_two_class};
use asgat::train::{grid_search, per_beta_accuracy, train, train_in_context, GridSpace, TrainConfig};
use asgat::Split;

fn small_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        weight_decay: 1e-4,
        dropout: 0.1,
        hidden: 8,
        filter_hidden: 8,
        heads: 2,
        k: 3,
        max_epochs: 500,
        patience: 50,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn toy_split() -> Split {
    Split::from_indices(10, &[0, 4, 5, 9], &[1, 8], &[2, 3, 6, 7], 0).unwrap()
}

#[test]
fn separable_toy_graph_is_learned() {
    let g = toy_two_class();
    let r = train(&small_config(), &g, &toy_split()).unwrap();
    assert_eq!(r.test_micro_f1, 1.0);
    assert_eq!(r.test_macro_f1, 1.0);
    assert!(r.best_epoch >= 1 && r.best_epoch <= r.epochs_trained());
    assert!(r.curves_csv().lines().count() == r.epochs_trained() + 1);
}

#[test]
fn training_is_deterministic_in_seed() {
    let g = planted_partition(3, 15, 3, 0.3, 6, 1.0, 4).unwrap();
    let split = split_per_class(&g, 1).unwrap();
    let a = train(&small_config(), &g, &split).unwrap();
    let b = train(&small_config(), &g, &split).unwrap();
    assert_eq!(a.curves, b.curves);
    assert_eq!(a.model, b.model);
}

#[test]
fn every_backend_trains() {
    let g = planted_partition(2, 12, 3, 0.2, 5, 0.8, 9).unwrap();
    let split = split_per_class(&g, 2).unwrap();
    for backend in [
        Backend::Exact,
        Backend::Chebyshev { order: 8 },
        Backend::Arma { p: 3, q: 4, iters: 8 },
        Backend::Heat { scale: 1.0 },
    ] {
        let cfg = TrainConfig {
            backend,
            max_epochs: 15,
            ..small_config()
        };
        let r = train(&cfg, &g, &split).unwrap();
        assert!(r.curves.iter().all(|e| e.train_loss.is_finite()), "{backend:?}");
    }
}

#[test]
fn observer_sees_valid_attention_each_epoch() {
    let g = planted_partition(2, 10, 3, 0.5, 4, 0.5, 1).unwrap();
    let split = split_per_class(&g, 0).unwrap();
    let cfg = TrainConfig {
        dropout: 0.6,
        max_epochs: 10,
        ..small_config()
    };
    let ctx = GraphContext::new(&g, cfg.backend, true, None).unwrap();
    let mut seen = 0;
    train_in_context(&cfg, &ctx, &g, &split, &mut |_, pass| {
        seen += 1;
        for layer in 0..2 {
            pass.attention_set(layer).check(1e-9)?;
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 10);
}

#[test]
fn per_beta_bins_cover_the_test_set() {
    let g = planted_partition(3, 10, 3, 0.5, 4, 0.5, 2).unwrap();
    let split = split_per_class(&g, 0).unwrap();
    let r = train(&TrainConfig { max_epochs: 5, ..small_config() }, &g, &split).unwrap();
    let ctx = GraphContext::new(&g, Backend::Exact, true, None).unwrap();
    let bins = per_beta_accuracy(&r.model, &ctx, &g, &split).unwrap();
    assert_eq!(bins.counts.iter().sum::<usize>(), split.test_indices().len());
    for (acc, &n) in bins.accuracy.iter().zip(&bins.counts) {
        assert_eq!(acc.is_some(), n > 0);
    }
}

#[test]
fn grid_search_resumes_and_breaks_ties_by_order() {
    let g = toy_two_class();
    let split = toy_split();
    let base = TrainConfig { max_epochs: 20, ..small_config() };
    let space = GridSpace {
        lr: vec![1e-2, 5e-3],
        hidden: vec![8],
        weight_decay: vec![1e-4],
        heads: vec![2],
        dropout: vec![0.1],
        k: vec![2, 3],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.tsv");
    let first = grid_search(&space, &base, &g, &[split.clone()], Some(&path)).unwrap();
    assert_eq!(first.cells.len(), 4);
    let best = first.cells.iter().map(|c| c.score).fold(f64::NEG_INFINITY, f64::max);
    let first_best = first.cells.iter().position(|c| c.score == best).unwrap();
    assert_eq!(first.best_index, first_best);
    let lines = std::fs::read_to_string(&path).unwrap().lines().count();
    assert_eq!(lines, 5);
    let again = grid_search(&space, &base, &g, &[split], Some(&path)).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 5);
    assert_eq!(again.best, first.best);
    assert!(first.to_csv().starts_with("cell,lr"));
}

#[test]
fn micro_f1_is_accuracy_and_metrics_are_bounded() {
    use asgat::train::{macro_f1, micro_f1};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let n = rng.gen_range(1..40);
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let mask: Vec<bool> = (0..n).map(|i| i == 0 || rng.gen_bool(0.7)).collect();
        let (mut hit, mut tot) = (0, 0);
        for i in 0..n {
            if mask[i] {
                tot += 1;
                hit += usize::from(pred[i] == truth[i]);
            }
        }
        let micro = micro_f1(&pred, &truth, &mask).unwrap();
        let macro_ = macro_f1(&pred, &truth, &mask).unwrap();
        assert_eq!(micro, hit as f64 / tot as f64);
        assert!((0.0..=1.0).contains(&macro_));
        assert_eq!(micro == 1.0, macro_ == 1.0);
    }
}

#[test]
fn selected_epoch_has_the_lowest_validation_loss() {
    let g = planted_partition(3, 15, 3, 0.3, 6, 1.0, 6).unwrap();
    let split = split_per_class(&g, 3).unwrap();
    let r = train(&TrainConfig { max_epochs: 80, ..small_config() }, &g, &split).unwrap();
    let sel = &r.curves[r.best_epoch - 1];
    assert!(r.curves.iter().all(|e| e.val_loss >= sel.val_loss));
    assert_eq!(sel.test_micro_f1, r.test_micro_f1);
}

#[test]
fn weight_decay_is_l2_added_to_the_gradient() {
    use asgat::autodiff::Adam;
    use asgat::Matrix;
    let theta = Matrix::from_fn(2, 3, |r, c| 0.3 * r as f64 - 0.2 * c as f64 + 0.1);
    let grad = Matrix::from_fn(2, 3, |r, c| (r + 2 * c) as f64 * 0.05 - 0.1);
    let wd = 1e-3;
    let mut a = theta.clone();
    let mut b = theta.clone();
    let mut with_decay = Adam::new(5e-3, wd);
    let mut plain = Adam::new(5e-3, 0.0);
    for _ in 0..3 {
        let ga = grad.clone();
        let gb = Matrix::from_fn(2, 3, |r, c| grad[(r, c)] + wd * b[(r, c)]);
        with_decay.step(&mut [&mut a], &[ga]).unwrap();
        plain.step(&mut [&mut b], &[gb]).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn grid_search_single_duplicate_and_diverging_cells() {
    let g = toy_two_class();
    let split = toy_split();
    let base = TrainConfig { max_epochs: 10, ..small_config() };
    let one = grid_search(&GridSpace::single(&base), &base, &g, &[split.clone()], None).unwrap();
    assert_eq!(one.best, base);

    let dup = GridSpace {
        k: vec![3, 3],
        ..GridSpace::single(&base)
    };
    let r = grid_search(&dup, &base, &g, &[split.clone()], None).unwrap();
    assert_eq!(r.cells[0].score, r.cells[1].score);
    assert_eq!(r.best_index, 0);

    let div = GridSpace {
        lr: vec![1e300, 1e-2],
        ..GridSpace::single(&base)
    };
    let r = grid_search(&div, &base, &g, &[split], None).unwrap();
    assert!(r.cells[0].diverged && r.cells[0].score == f64::NEG_INFINITY);
    assert_eq!(r.best_index, 1);
}
