//! Shared fixtures for the benchmarks.

use eaaw_core::data::{blobs, BlobParams};
use eaaw_core::train::{train, TrainConfig};
use eaaw_core::{BlackBox, Corpus, Model, ModelSpec, Sample, TriggerSample};

/// A briefly trained default classifier, its training data and a labeled
/// signed-noise trigger.
pub fn fixture() -> (Model, Corpus, TriggerSample) {
    let data = blobs(&BlobParams {
        samples: 1000,
        ..Default::default()
    })
    .expect("valid blob parameters");
    let corpus = Corpus::Labeled(data);
    let cfg = TrainConfig {
        epochs: 2,
        ..Default::default()
    };
    let model = train(ModelSpec::default_classifier(), &corpus, &cfg).expect("training succeeds");
    let TriggerSample::Classifier { input, .. } = TriggerSample::signed_noise(256, 0.1, 1.0, 0, 1)
    else {
        unreachable!("classifier trigger")
    };
    let label = model
        .predict_batch(&[Sample::Features(input.clone())])
        .expect("prediction")[0]
        .predicted;
    (model, corpus, TriggerSample::Classifier { input, label })
}
