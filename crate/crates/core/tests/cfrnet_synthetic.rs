use trialemu::cfrnet::{cfr_ate, cfr_cate, cfr_train, CfrConfig};
use trialemu::synthetic::{generate, DgpKind, DgpSpec};

fn splits(spec: &DgpSpec, seed: u64) -> (trialemu::Dataset, trialemu::Dataset, trialemu::synthetic::SyntheticTable) {
    let table = generate(spec, seed).unwrap();
    let n = table.n();
    let n_test = n / 5;
    let n_val = (n - n_test) * 3 / 10;
    let idx: Vec<usize> = (0..n).collect();
    let test = table.select(&idx[..n_test]);
    let val = table.select(&idx[n_test..n_test + n_val]).to_dataset();
    let train = table.select(&idx[n_test + n_val..]).to_dataset();
    (train, val, test)
}

#[test]
fn null_effect_gives_small_mean_cate() {
    let spec = DgpSpec { kind: DgpKind::NullEffect, ..DgpSpec::default() };
    let (train, val, test) = splits(&spec, 3);
    let (model, trace) = cfr_train(&train, &val, &CfrConfig::cfr()).unwrap();
    let cate = cfr_cate(&model, test.x.view()).unwrap();
    let mean = cate.iter().sum::<f64>() / cate.len() as f64;
    let y = ndarray::Array1::from(train.y.clone());
    eprintln!("mean cate {mean}, sd_y {}, epochs {}", y.std(1.0), trace.stop_epoch);
    assert!(mean.abs() <= 0.2 * y.std(1.0));
}

#[test]
fn linear_effect_is_recovered() {
    let spec = DgpSpec::default();
    let (train, val, test) = splits(&spec, 5);
    for cfg in [CfrConfig::tarnet(), CfrConfig::cfr()] {
        let (model, trace) = cfr_train(&train, &val, &cfg).unwrap();
        let ate = cfr_ate(&model, test.x.view()).unwrap();
        eprintln!("{:?} ate {} epochs {} best {}", ate.method, ate.value, trace.stop_epoch, trace.best_epoch);
        assert!((ate.value - 10.0).abs() <= 1.5);
    }
}
