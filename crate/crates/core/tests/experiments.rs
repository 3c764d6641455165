use asgat::experiments::{
    ablate_frequency, ablate_heads, density_sweep, export_filter_responses, frequency_sweep, heat_baseline,
    model_checksum, HeadMode,
};
use asgat::graph::split_per_class;
use asgat::model::{Backend, GraphContext, Model};
use asgat::synthetic::planted_partition;
use asgat::train::{train, TrainConfig};
use asgat::{Graph, Matrix, Split};

fn setup(seed: u64) -> (Graph, Split, TrainConfig) {
    let g = planted_partition(3, 12, 3, 0.3, 6, 0.8, seed).unwrap();
    let split = split_per_class(&g, seed).unwrap();
    let cfg = TrainConfig {
        lr: 1e-2,
        hidden: 8,
        filter_hidden: 8,
        heads: 3,
        k: 4,
        dropout: 0.2,
        max_epochs: 400,
        patience: 50,
        seed,
        ..TrainConfig::default()
    };
    (g, split, cfg)
}

#[test]
fn frequency_ablation_edge_cases_and_tiling() {
    let (g, split, cfg) = setup(1);
    let model = train(&cfg, &g, &split).unwrap().model;
    let ctx = GraphContext::new(&g, cfg.backend, true, None).unwrap();
    let before = model_checksum(&model);
    assert_eq!(ablate_frequency(&model, &ctx, &g, &split, 0.7, 0.7).unwrap(), 0.0);
    let full = ablate_frequency(&model, &ctx, &g, &split, 0.0, 2.0).unwrap();
    assert!(full.is_finite() && (-1.0..=1.0).contains(&full));
    assert!(ablate_frequency(&model, &ctx, &g, &split, 1.5, 1.0).is_err());
    assert!(ablate_frequency(&model, &ctx, &g, &split, 0.0, 2.5).is_err());
    for step in [1.0, 0.5, 0.25] {
        let rows = frequency_sweep(&model, &ctx, &g, &split, step).unwrap();
        assert_eq!(rows.iter().map(|r| r.points).sum::<usize>(), g.num_nodes());
    }
    assert_eq!(model_checksum(&model), before);
}

#[test]
fn dropping_a_duplicated_head_changes_nothing() {
    let (g, split, cfg) = setup(2);
    let mut model = train(&cfg, &g, &split).unwrap().model;
    let f = &mut model.params.filter;
    for r in 0..f.w3.rows() {
        let v = f.w3[(r, 0)];
        for c in 0..f.w3.cols() {
            f.w3[(r, c)] = v;
        }
    }
    let b = f.b3[(0, 0)];
    f.b3 = Matrix::from_fn(1, f.b3.cols(), |_, _| b);
    let hidden = cfg.hidden;
    let w2 = model.params.w2.clone();
    model.params.w2 = Matrix::from_fn(w2.rows(), w2.cols(), |r, c| w2[(r % hidden, c)]);
    let ctx = GraphContext::new(&g, cfg.backend, true, None).unwrap();
    for row in ablate_heads(&model, &ctx, &g, &split, HeadMode::DropOne).unwrap() {
        assert!(row.delta.abs() < 1e-12, "head {}: {}", row.head, row.delta);
    }
}

#[test]
fn keep_one_rarely_helps() {
    let mut total = 0.0;
    let mut count = 0;
    for seed in 0..5 {
        let (g, split, cfg) = setup(10 + seed);
        let model = train(&cfg, &g, &split).unwrap().model;
        let ctx = GraphContext::new(&g, cfg.backend, true, None).unwrap();
        let before = model_checksum(&model);
        for row in ablate_heads(&model, &ctx, &g, &split, HeadMode::KeepOne).unwrap() {
            total += row.delta;
            count += 1;
        }
        assert_eq!(model_checksum(&model), before);
    }
    assert!(total / count as f64 <= 0.01, "mean keep-one delta {}", total / count as f64);
}

#[test]
fn density_endpoints_and_monotonicity() {
    let (g, split, cfg) = setup(3);
    let n = g.num_nodes();
    let ks: Vec<usize> = vec![1, 2, 5, 10, n];
    let rows = density_sweep(&TrainConfig { heads: 2, ..cfg }, &g, &split, &ks).unwrap();
    assert!((rows[0].density - 1.0 / n as f64).abs() < 1e-15);
    assert!((rows.last().unwrap().density - 1.0).abs() < 1e-15);
    for w in rows.windows(2) {
        assert!(w[1].density > w[0].density);
    }
    assert!(rows.iter().all(|r| r.epoch_secs > 0.0));
    assert!(density_sweep(&cfg, &g, &split, &[0]).is_err());
}

#[test]
fn filter_export() {
    let (g, _, cfg) = setup(4);
    let mut model = Model::init(cfg.model_config(&g), 0).unwrap();
    let csv = export_filter_responses(&model, 5).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda,head_0,head_1,head_2");
    let lambdas: Vec<f64> = lines[1..].iter().map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(lambdas, vec![0.0, 0.5, 1.0, 1.5, 2.0]);

    for t in model.params.tensors_mut() {
        *t = Matrix::zeros(t.rows(), t.cols());
    }
    let csv = export_filter_responses(&model, 9).unwrap();
    for line in csv.lines().skip(1) {
        assert!(line.split(',').skip(1).all(|v| v.parse::<f64>().unwrap() == 0.0));
    }

    model.cfg.backend = Backend::Heat { scale: 1.5 };
    let csv = export_filter_responses(&model, 11).unwrap();
    for line in csv.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert!(v[1..].iter().all(|&g| (g - (-1.5 * v[0]).exp()).abs() < 1e-15));
    }
}

#[test]
fn heat_baseline_includes_identity_filter() {
    let (g, split, cfg) = setup(5);
    let cfg = TrainConfig { max_epochs: 20, ..cfg };
    let res = heat_baseline(&cfg, &g, &[split], &[0.0, 1.0, 3.0]).unwrap();
    assert_eq!(res.rows.len(), 3);
    let best = res.best_row();
    assert!(res.rows.iter().all(|r| r.mean_val_acc <= best.mean_val_acc));
    assert!((0.0..=1.0).contains(&best.mean_test_micro_f1));
}
