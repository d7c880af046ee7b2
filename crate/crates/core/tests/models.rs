use eaaw_core::data::{blobs, token_corpus, BlobParams, MarkovParams};
use eaaw_core::model_io::{decode, encode};
use eaaw_core::train::{accuracy, fit, mean_loss, train, TrainConfig};
use eaaw_core::{load_model, save_model, Corpus, Error, LabeledSet, Model, ModelSpec};

fn param_bits(m: &Model) -> Vec<u64> {
    m.params().flatten().iter().map(|v| v.to_bits()).collect()
}

fn two_blobs() -> LabeledSet {
    blobs(&BlobParams {
        samples: 400,
        classes: 2,
        sigma: 0.3,
        ..Default::default()
    })
    .unwrap()
}

/// Full-batch gradient-descent logistic regression, class 1 vs rest.
fn logistic_oracle(d: &LabeledSet) -> f64 {
    let (n, m) = (d.len(), d.dim());
    let mut w = vec![0.0; m + 1];
    for _ in 0..300 {
        let mut g = vec![0.0; m + 1];
        for i in 0..n {
            let x = d.row(i);
            let z = w[m] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - (d.label(i) == 1) as u8 as f64;
            for j in 0..m {
                g[j] += err * x[j];
            }
            g[m] += err;
        }
        for (wj, gj) in w.iter_mut().zip(&g) {
            *wj -= 0.05 * gj / n as f64;
        }
    }
    let correct = (0..n)
        .filter(|&i| {
            let z = w[m] + d.row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            (z >= 0.0) == (d.label(i) == 1)
        })
        .count();
    correct as f64 / n as f64
}

#[test]
fn separable_blobs_train_like_logistic_regression() {
    let d = two_blobs();
    let oracle = logistic_oracle(&d);
    assert!(oracle >= 0.95, "logistic oracle reaches {oracle}");
    let data = Corpus::Labeled(d.clone());
    let m = train(
        ModelSpec::classifier(256, vec![32], 2),
        &data,
        &TrainConfig::default(),
    )
    .unwrap();
    let acc = accuracy(&m, &d).unwrap();
    assert!(acc >= 0.95, "trained accuracy {acc}, oracle {oracle}");
}

#[test]
fn training_lowers_loss_and_repeats_exactly() {
    let data = Corpus::Labeled(two_blobs());
    let spec = ModelSpec::classifier(256, vec![16], 2);
    let cfg = TrainConfig {
        epochs: 5,
        seed: 3,
        ..Default::default()
    };
    let init = Model::init(spec.clone(), 3).unwrap();
    let before = mean_loss(&init, &data).unwrap();
    let mut a = init.clone();
    fit(&mut a, &data, &cfg).unwrap();
    let b = train(spec, &data, &cfg).unwrap();
    assert!(mean_loss(&a, &data).unwrap() < before);
    assert_eq!(param_bits(&a), param_bits(&b));
}

#[test]
fn save_load_is_bit_exact_for_both_backends() {
    let dir = tempfile::tempdir().unwrap();
    let cls = train(
        ModelSpec::classifier(256, vec![8, 4], 2),
        &Corpus::Labeled(two_blobs()),
        &TrainConfig {
            epochs: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let corpus = token_corpus(&MarkovParams {
        sequences: 20,
        ..Default::default()
    })
    .unwrap();
    let lm = train(
        ModelSpec::causal_lm(corpus.vocab(), 4, 3, vec![6]),
        &Corpus::Tokens(corpus),
        &TrainConfig {
            epochs: 1,
            ..Default::default()
        },
    )
    .unwrap();
    for (name, m) in [("cls.bin", &cls), ("lm.bin", &lm)] {
        let p = dir.path().join(name);
        save_model(m, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back.spec(), m.spec());
        assert_eq!(param_bits(&back), param_bits(m));
        assert_eq!(std::fs::read(&p).unwrap(), encode(&back).unwrap());
    }
}

#[test]
fn damaged_files_report_offsets() {
    let m = Model::init(ModelSpec::classifier(4, vec![3], 2), 1).unwrap();
    let good = encode(&m).unwrap();
    let offset = |bytes: &[u8]| match decode(bytes) {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {other:?}"),
    };
    let mut bad = good.clone();
    bad[0] = b'X';
    assert_eq!(offset(&bad), 0);
    let mut bad = good.clone();
    bad[4] = 99;
    assert_eq!(offset(&bad), 4);
    assert!(offset(&good[..good.len() - 3]) <= good.len() - 3);
    let mut bad = good.clone();
    let last_param = good.len() - 9;
    bad[last_param] ^= 0x40;
    assert!(matches!(decode(&bad), Err(Error::Format { .. })));
}
