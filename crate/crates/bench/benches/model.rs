use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use mirnet_bench::dataset;
use mirnet_core::dataset::Split;
use mirnet_core::diffcore::Tape;
use mirnet_core::train::{boost_loss, build_model, SplitData, TrainConfig};

fn training_step(c: &mut Criterion) {
    let data = dataset(200);
    let cfg = TrainConfig::default();
    let model = build_model(&data, None, &cfg, 1).unwrap();
    let train = SplitData::from_dataset(&data, Split::Train, cfg.encoder.patch_size).unwrap();
    let (patches, targets) = train.batch(&(0..cfg.batch_size).collect::<Vec<_>>()).unwrap();
    let all: Vec<usize> = (0..data.num_labels()).collect();
    let objective = cfg
        .objective
        .build(&data.manifest.prevalence, &data.manifest.rules, &cfg.ablation)
        .unwrap();

    c.bench_function("model_forward_batch32", |bench| {
        bench.iter(|| black_box(model.predict_patches_chunked(&patches).unwrap()))
    });
    c.bench_function("model_forward_backward_batch32", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let params = model.store.bind(&tape);
            let (loss, _) = boost_loss(&model, &params, &patches, &targets, &all, &objective).unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = training_step
}
criterion_main!(benches);
