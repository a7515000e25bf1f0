//! Throughput of the hot paths: the per-bag forward/backward step that
//! dominates training, the adaptation head, ranking metrics, and dataset
//! generation.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use milkt_core::metrics::binary_auc;
use milkt_core::mil::{self, MILArch, MILParams};
use milkt_core::synthdata::{builtin_profile, generate_dataset};
use milkt_core::tensor::{Matrix, Tape};
use milkt_core::transfer::{mhfa_forward, MHFAParams, PTSConfig};

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let a = Matrix::uniform(64, 128, 1.0, &mut rng);
    let b = Matrix::uniform(128, 128, 1.0, &mut rng);
    c.bench_function("matmul 64x128x128", |bench| {
        bench.iter(|| black_box(a.matmul(&b).unwrap()))
    });
}

fn bench_mil_step(c: &mut Criterion) {
    let arch = MILArch { d_in: 64, d_embed: 128, d_attn: 64, n_classes: 2, dropout_rate: 0.25 };
    let params = MILParams::init(&arch, 1);
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let bag = Matrix::uniform(40, arch.d_in, 1.0, &mut rng);

    c.bench_function("mil forward (n=40)", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let nodes = params.insert(&mut tape, false);
            black_box(mil::forward(&mut tape, &nodes, &arch, &bag, None).unwrap());
        })
    });

    c.bench_function("mil forward+backward (n=40)", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let nodes = params.insert(&mut tape, true);
            let out = mil::forward(&mut tape, &nodes, &arch, &bag, None).unwrap();
            let loss = tape.cross_entropy_loss(out.probs, 1).unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.grad(nodes.w_embed).max_abs());
        })
    });
}

fn bench_mhfa(c: &mut Criterion) {
    let params = MHFAParams::init(768, 512, 8, 256, PTSConfig::default(), 3);
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let h_t = Matrix::uniform(1, 768, 1.0, &mut rng);
    c.bench_function("mhfa forward (768->512, m=8)", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let input = tape.constant(h_t.clone());
            let nodes = params.insert(&mut tape, false);
            black_box(mhfa_forward(&mut tape, input, &nodes, &params.pts).unwrap());
        })
    });
}

fn bench_auc(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let scores: Vec<f64> = (0..2000).map(|_| rng.gen_range(0..64) as f64 / 64.0).collect();
    let labels: Vec<usize> = (0..2000).map(|_| rng.gen_range(0..2)).collect();
    c.bench_function("binary_auc (n=2000 with ties)", |bench| {
        bench.iter(|| black_box(binary_auc(&scores, &labels)))
    });
}

fn bench_generation(c: &mut Criterion) {
    let mut profile = builtin_profile("came_like", 64).unwrap();
    profile.n_range = (20, 60);
    c.bench_function("generate_dataset (20 bags, d_in=64)", |bench| {
        bench.iter(|| black_box(generate_dataset(&profile, 20, 7).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_mil_step,
    bench_mhfa,
    bench_auc,
    bench_generation
);
criterion_main!(benches);
