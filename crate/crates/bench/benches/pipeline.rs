use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use otcsurv::autodiff::Tape;
use otcsurv::contrast::supwcon_loss;
use otcsurv::losses::Phase;
use otcsurv::metrics::c_td;
use otcsurv::train::{batch_objective, eval_records, RmsProp, TrainSchedule};
use otcsurv::{Outcome, Tensor};
use otcsurv_bench::fixture;

fn training_step(c: &mut Criterion) {
    let (model, records) = fixture(32);
    let schedule = TrainSchedule::default();
    let batch: Vec<_> = records.iter().collect();
    c.bench_function("train_step_batch32", |b| {
        b.iter_batched(
            || (model.clone(), RmsProp::new(&schedule.optimizer, &model.store)),
            |(mut m, mut opt)| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let tape = Tape::new();
                let ctx = m.bind(&tape).unwrap();
                let (loss, _) =
                    batch_objective(&m, &ctx, &batch, Phase::Contrastive, &schedule, &mut rng).unwrap();
                let grads = tape.backward(loss).unwrap();
                drop(ctx);
                m.store.zero_grad();
                grads.accumulate_into(&mut m.store);
                opt.step(&mut m.store);
                m
            },
            BatchSize::SmallInput,
        )
    });
}

fn concordance(c: &mut Criterion) {
    let (model, records) = fixture(1000);
    let evals = eval_records(&model, &records).unwrap();
    c.bench_function("c_td_n1000", |b| b.iter(|| c_td(&evals).unwrap()));
}

fn contrastive(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let outcomes: Vec<Outcome> = (0..32)
        .map(|_| Outcome::new(rng.gen_range(1..=9), rng.gen_bool(0.4)))
        .collect();
    let z: Vec<Vec<f64>> = (0..32)
        .map(|_| {
            let v: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    c.bench_function("supwcon_batch32", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let vars: Vec<_> = z.iter().map(|v| tape.leaf(Tensor::vector(v.clone()))).collect();
            let loss = supwcon_loss(&vars, &outcomes, 0.5, 2.0).unwrap();
            tape.backward(loss).unwrap()
        })
    });
}

criterion_group!(benches, training_step, concordance, contrastive);
criterion_main!(benches);
