//! Temporary probe, not part of the suite.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vflsim::attack::{execute_attack, generate_poisons, infer_labels, AttackMode, AttackPlan, ClusteringMode};
use vflsim::data::select_auxiliary;
use vflsim_cli::config::ExperimentConfig;
use vflsim_cli::pipeline::{load_checkpoint, load_data};

#[test]
#[ignore]
fn failing_checkpoint() {
    std::env::set_current_dir("../..").ok();
    let config =
        ExperimentConfig::load(std::path::Path::new("configs/mnist-1party.toml")).unwrap();
    let data = load_data(&config.dataset).unwrap();
    let model = load_checkpoint(std::path::Path::new(
        "/tmp/v28/mnist-train/checkpoint-r0.ckpt",
    ))
    .unwrap();
    let attacker = model.attacker_index().unwrap();
    let seed = 44u64;
    let aux = select_auxiliary(&data.train, 1, &model.parties[attacker].feature_columns, seed)
        .unwrap();
    let mut centers = infer_labels(
        &model.recorded_embeddings,
        &aux,
        &model.bottoms[attacker],
        ClusteringMode::KMeans,
    )
    .unwrap();

    let target = 0usize;
    let d = model.embedding_dim(attacker);
    let mut oracle = ndarray::Array1::<f64>::zeros(d);
    let mut n_t = 0.0;
    for (i, &y) in data.train.labels.iter().enumerate() {
        if y == target {
            oracle = oracle + model.recorded_embeddings.row(i);
            n_t += 1.0;
        }
    }
    oracle /= n_t;

    // distance matrix: final density centers vs aux centers
    for k in 0..10 {
        let c = centers.density_centers.row(k);
        let mut best = (0usize, f64::INFINITY);
        let mut second = (0usize, f64::INFINITY);
        for j in 0..10 {
            let a = centers.aux_centers.row(j);
            let d2: f64 = c
                .iter()
                .zip(a.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            if d2 < best.1 {
                second = best;
                best = (j, d2);
            } else if d2 < second.1 {
                second = (j, d2);
            }
        }
        // majority true label of cluster k
        let mut h = vec![0usize; 10];
        for (i, &lab) in centers.inferred_labels.iter().enumerate() {
            if lab == k {
                h[data.train.labels[i]] += 1;
            }
        }
        let maj = h.iter().enumerate().max_by_key(|(_, &v)| v).unwrap().0;
        println!(
            "cluster {k}: majority true {maj}, nearest aux {} (d {:.2}), second {} (d {:.2})",
            best.0,
            best.1.sqrt(),
            second.0,
            second.1.sqrt()
        );
    }

    // purity of the inferred target cluster
    let mut hist = vec![0usize; 10];
    for (i, &lab) in centers.inferred_labels.iter().enumerate() {
        if lab == target {
            hist[data.train.labels[i]] += 1;
        }
    }
    println!("target-cluster true-label histogram: {hist:?}");

    for (name, swap) in [("kmeans", false), ("oracle", true)] {
        if swap {
            centers.density_centers.row_mut(target).assign(&oracle);
        }
        for eta in [33.75f64, 54.0, 150.0] {
            let plan = AttackPlan {
                mode: AttackMode::DirtyLabel,
                source_label: Some(1),
                target_label: target,
                eta,
                mu_scale: 0.0,
                sigma_scale: 0.5,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(3);
            let poisons = generate_poisons(&centers, &plan, 512, &mut rng).unwrap();
            let out = execute_attack(&model, &plan, &data.test.features, &poisons, None).unwrap();
            let mut pred_hist = vec![0usize; 10];
            for &p in &out.predictions {
                pred_hist[p] += 1;
            }
            println!("{name} eta {eta}: predictions {pred_hist:?}");
        }
    }
}
