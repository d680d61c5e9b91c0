use std::fs;

use fedleak_cli::config::ExperimentConfig;
use fedleak_cli::sweep::sweep;
use tempfile::TempDir;

const DESK: &str = r#"
id = "desk"
seed = 0
output = "out"

[data]
kind = "synthetic"
test_per_class = 128

[model]
activation = "softplus"

[plan]
rounds = 30
lr = { base = 0.1 }

[[plan.clients]]
id = "hr"
batch_size = 1
n_train = 1
n_valid = 8

[[plan.clients]]
id = "c2"
batch_size = 8
n_train = 16
n_valid = 8

[[plan.clients]]
id = "c3"
batch_size = 8
n_train = 32
n_valid = 8

[[plan.clients]]
id = "c4"
batch_size = 16
n_train = 64
n_valid = 8

[targets]
clients = ["hr"]
seeds = 2

[[sweep]]
mechanism = "none"

[[sweep]]
mechanism = "percentile_gaussian"
sigma0 = 1.0
"#;

#[test]
fn single_image_client_leaks_and_noise_reduces_it() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("desk.toml");
    fs::write(&path, DESK).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    let r = sweep(&cfg, 1).unwrap();
    assert_eq!(r.records.len(), 2);
    let clean = r.records.iter().find(|x| x.leakage.sigma0 == 0.0).unwrap();
    let noised = r.records.iter().find(|x| x.leakage.sigma0 == 1.0).unwrap();
    assert!(clean.leakage.rdlv_mean > 0.0, "clean rdlv {}", clean.leakage.rdlv_mean);
    assert!(
        clean.leakage.rdlv_mean >= noised.leakage.rdlv_mean,
        "clean {} noised {}",
        clean.leakage.rdlv_mean,
        noised.leakage.rdlv_mean
    );
}
