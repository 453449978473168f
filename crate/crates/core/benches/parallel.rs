use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadfusion::adaptation::{init_model, HeadConfig};
use roadfusion::features::{BackboneSpec, FeatureExtractor, COMPACT_CNN};
use roadfusion::inference::{infer_batch, InferenceConfig};
use roadfusion::linalg;
use roadfusion::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn spec() -> BackboneSpec {
    BackboneSpec {
        architecture: COMPACT_CNN.into(),
        weights_id: "random-init-0".into(),
        input_size: 64,
        ..BackboneSpec::default()
    }
}

fn images(n: usize) -> Vec<(String, Array3<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..n)
        .map(|i| (format!("img{i}"), Array3::from_shape_fn((64, 64, 3), |_| rng.random::<f32>())))
        .collect()
}

fn extraction(c: &mut Criterion) {
    let fx = FeatureExtractor::from_spec(&spec()).unwrap();
    let imgs = images(16);
    let items: Vec<_> = imgs.iter().map(|(id, a)| (id.clone(), a.view())).collect();
    let mut g = c.benchmark_group("extract_batch_16x64");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| fx.extract_batch(&items, exec).unwrap()));
    }
    g.finish();
}

fn head(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array2::from_shape_fn((4096, 192), |_| rng.random::<f64>());
    let w = Array2::from_shape_fn((192, 192), |_| rng.random::<f64>());
    let mut g = c.benchmark_group("head_linear_4096x192");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new("forward", name), |b| b.iter(|| linalg::linear(x.view(), w.view(), exec)));
        g.bench_function(BenchmarkId::new("weight_grad", name), |b| {
            b.iter(|| linalg::weight_grad(x.view(), x.view(), exec))
        });
    }
    g.finish();
}

fn inference(c: &mut Criterion) {
    let fx = FeatureExtractor::from_spec(&spec()).unwrap();
    let model = init_model(
        HeadConfig {
            channels: fx.channels(),
            hidden: fx.channels(),
        },
        spec(),
        "",
        0,
    )
    .unwrap();
    let imgs = images(16);
    let items: Vec<_> = imgs.iter().map(|(id, a)| (id.clone(), a.view())).collect();
    let cfg = InferenceConfig::default();
    let mut g = c.benchmark_group("infer_batch_16x64");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| infer_batch(&items, &fx, &model, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = extraction, head, inference
}
criterion_main!(benches);
