use rcekit::attack::{self, AttackConfig, AttackFamily};
use rcekit::data;
use rcekit::detect;
use rcekit::eval;
use rcekit::model::NetworkModel;
use std::path::Path;
use std::time::Instant;

fn main() {
    let train = data::load_mnist_idx(
        Path::new("data/mnist/train-images-idx3-ubyte"),
        Path::new("data/mnist/train-labels-idx1-ubyte"),
        "train",
    )
    .unwrap();
    let test = data::load_mnist_idx(
        Path::new("data/mnist/t10k-images-idx3-ubyte"),
        Path::new("data/mnist/t10k-labels-idx1-ubyte"),
        "test",
    )
    .unwrap();
    let _ = rayon::ThreadPoolBuilder::new().num_threads(2).build_global();

    for (name, prefix) in [("ce", "/tmp/runs/ce_b64/model"), ("rce", "/tmp/runs/rce_b64/model")] {
        let model = NetworkModel::load(Path::new(prefix)).unwrap();
        let sigma2 = detect::default_bandwidth(model.objective());
        let t0 = Instant::now();
        let det = detect::kdensity_fit(&model, &train, sigma2, None, 7).unwrap();
        let eta = attack::median_neg_log_kd(&det, &model, &train).unwrap();
        println!("{name}: fit+eta {:.1}s, eta={eta:.4}", t0.elapsed().as_secs_f64());

        for kappa in [0.0, 5.0] {
            let mut cfg = AttackConfig::new(AttackFamily::CwWb);
            cfg.eta = Some(eta);
            cfg.cw.max_iters = 800;
            cfg.cw.search_rounds = 9;
            cfg.cw.kappa = kappa;
            let t0 = Instant::now();
            let cohort =
                eval::build_detection_cohort(&model, Some(&det), &cfg, &test, 15, 7).unwrap();
            let ratio = eval::f2_positive_ratio(&cohort.outcomes);
            let d = eval::minimal_distortions(&cohort).unwrap();
            println!(
                "{name} wb kappa={kappa}: {:.1}s, successes {}/{} ratio {:?} mean_dist {:.2}",
                t0.elapsed().as_secs_f64(),
                cohort.normal.len(),
                cohort.attempted,
                ratio,
                d.mean
            );
        }
    }
}
