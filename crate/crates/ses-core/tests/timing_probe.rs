use ses_core::data::{generate_dataset, Dataset, DatasetSpec, Split};
use ses_core::model::{Network, NetworkConfig};
use ses_core::nn::Mode;
use ses_core::train::Sgd;

#[test]
#[ignore]
fn step_timing_probe() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec { n_per_class: 16, side: 64, seed: 1 };
    generate_dataset(&spec, dir.path()).unwrap();
    let train_set = Dataset::load(dir.path(), Split::Train).unwrap();
    let net = Network::new(NetworkConfig::toy(), 1).unwrap();
    let params = net.params();
    let mut sgd = Sgd::new(&params, 0.9, 1e-4);
    let idx: Vec<usize> = (0..32).collect();
    let batch = train_set.batch(&idx);
    let labels = train_set.labels_of(&idx);
    // warmup
    let logits = net.forward(&batch, Mode::Train).unwrap();
    let loss = logits.cross_entropy(&labels).unwrap();
    loss.backward().unwrap();
    sgd.step(&params, 0.01).unwrap();
    let t0 = std::time::Instant::now();
    let n = 5;
    for _ in 0..n {
        let logits = net.forward(&batch, Mode::Train).unwrap();
        let loss = logits.cross_entropy(&labels).unwrap();
        loss.backward().unwrap();
        sgd.step(&params, 0.01).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    eprintln!("sec/step = {dt:.3}  -> 20 epochs x 50 steps = {:.1} min", dt * 1000.0 / 60.0);
}
