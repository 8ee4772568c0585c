use criterion::{criterion_group, criterion_main, Criterion};
use sparse_transformer::model::{init_params, ForwardOptions, Model, ModelConfig};
use sparse_transformer::Tape;

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward_backward");
    g.sample_size(10);
    let tokens: Vec<u8> = (0..4 * 256).map(|k| (k * 31 % 251) as u8).collect();
    for recompute in [false, true] {
        let mut cfg = ModelConfig::small(2, 64, 2, 256, 64);
        cfg.recompute = recompute;
        let params = init_params::<f32>(&cfg, 0).unwrap();
        let model = Model::new(cfg).unwrap();
        let name = if recompute { "recompute" } else { "stored" };
        g.bench_function(name, |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let vars = params.on_tape(&mut tape, true);
                let loss = model
                    .loss(&mut tape, &vars, &tokens, &ForwardOptions::default())
                    .unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
