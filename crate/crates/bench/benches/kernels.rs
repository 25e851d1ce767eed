use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fewb_core::agent::{build_agent, Experience};
use fewb_core::autodiff::kernels::{affine, gemm};
use fewb_core::config::preset;
use fewb_core::env::DSpritesEnv;
use fewb_core::mcts::{plan, PlannerConfig};

fn random(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn bench_gemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("gemm");
    for &(m, k, n) in &[(32, 768, 256), (32, 256, 256), (256, 32, 768)] {
        let a = random(m * k, &mut rng);
        let b = random(k * n, &mut rng);
        let mut out = vec![0.0; m * n];
        group.bench_with_input(BenchmarkId::from_parameter(format!("{m}x{k}x{n}")), &(), |bench, _| {
            bench.iter(|| gemm(m, k, n, &a, false, &b, false, 0.0, &mut out))
        });
    }
    group.finish();
    let x = random(32 * 768, &mut rng);
    let w = random(768 * 64, &mut rng);
    let bias = random(64, &mut rng);
    c.bench_function("affine 32x768->64", |bench| bench.iter(|| affine(&x, 32, &w, &bias, 768, 64)));
}

fn experiences(n: usize, rng: &mut ChaCha8Rng) -> Vec<Experience> {
    let cfg = preset("chmm-g4-egreedy").unwrap();
    let mut env = DSpritesEnv::new(cfg.env.clone()).unwrap();
    let mut obs = env.reset(rng);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.random_range(0..4);
        let step = env.step(fewb_core::env::Action::from_index(a).unwrap()).unwrap();
        out.push(Experience {
            obs: obs.clone(),
            action: a,
            next_obs: step.observation.clone(),
            reward: step.reward,
            done: step.done,
        });
        obs = if step.done { env.reset(rng) } else { step.observation };
    }
    out
}

fn bench_learn(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = experiences(32, &mut rng);
    let batch: Vec<&Experience> = data.iter().collect();
    let mut group = c.benchmark_group("learn_step");
    group.sample_size(20);
    for name in ["vae", "hmm", "chmm-g4-egreedy", "dai-g-best", "dqn"] {
        let mut agent = build_agent(&preset(name).unwrap()).unwrap();
        group.bench_function(name, |bench| bench.iter(|| agent.learn(&batch, &mut rng).unwrap()));
    }
    group.finish();
}

fn bench_plan(c: &mut Criterion) {
    let agent = build_agent(&preset("chmm-g-best").unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let state = vec![0.1; agent.nets.latent_dim];
    let cfg = PlannerConfig {
        t_dec: 0.74,
        ..PlannerConfig::default()
    };
    c.bench_function("plan 100 iterations", |bench| {
        bench.iter(|| plan(&state, &cfg, &agent.nets, &mut rng).unwrap())
    });
}

criterion_group!(benches, bench_gemm, bench_learn, bench_plan);
criterion_main!(benches);
