use gmdiff::metrics::{evaluate, MetricsConfig};
use gmdiff::mixture::GaussianMixture;
use gmdiff::models::DenoiserSpec;
use gmdiff::samplers::{sample, SamplerConfig};
use gmdiff::schedules::{NoiseSchedule, RespacingSpec};
use gmdiff::training::{train_diffusion, TrainConfig};
use rand::SeedableRng;

#[test]
#[ignore]
fn measure_conditional_advantage() {
    let mix = GaussianMixture::benchmark();
    let sched = NoiseSchedule::linear(1000).unwrap();
    for seed in [1u64, 2, 3] {
        let cfg = TrainConfig {
            batch_size: 256,
            iterations: 4000,
            learning_rate: 1e-3,
            ema_rate: 0.999,
            lambda_vlb: 0.001,
            seed,
            ..Default::default()
        };
        let spec_uncond = DenoiserSpec { hidden: vec![64, 64], embedding_dim: 32, group_size: 16, conditional: false, learned_variance: true };
        let spec_cond = DenoiserSpec { conditional: true, ..spec_uncond.clone() };
        let uncond = train_diffusion(&mix, &spec_uncond, &sched, &cfg).unwrap();
        let cond = train_diffusion(&mix, &spec_cond, &sched, &cfg).unwrap();

        let mut ref_rng = rand_chacha::ChaCha8Rng::seed_from_u64(50 + seed);
        let (reference, _) = mix.sample_batch(&mut ref_rng, 10_000);
        let mut class_rng = rand_chacha::ChaCha8Rng::seed_from_u64(60 + seed);
        let n = 4000;
        let classes: Vec<usize> = (0..n).map(|_| mix.sample(&mut class_rng).1).collect();
        let scfg = SamplerConfig { seed: 70 + seed, respacing: RespacingSpec::Uniform { count: 250 }, ..Default::default() };
        let mcfg = MetricsConfig::default();

        let su = sample(&uncond.ema, &sched, &scfg, n, None, None, false).unwrap();
        let sc = sample(&cond.ema, &sched, &scfg, n, None, Some(&classes), false).unwrap();
        let ru = evaluate(&mix, &reference.view(), &su.samples.view(), &mcfg).unwrap();
        let rc = evaluate(&mix, &reference.view(), &sc.samples.view(), &mcfg).unwrap();
        println!("seed {seed}: uncond frechet {:.5}, cond frechet {:.5} ({})", ru.frechet, rc.frechet,
                 if rc.frechet < ru.frechet { "cond better" } else { "UNCOND BETTER" });
    }
}

#[test]
#[ignore]
fn measure_per_class_frechet() {
    use gmdiff::metrics::frechet_distance;
    use ndarray::Array2;
    let mix = GaussianMixture::benchmark();
    let sched = NoiseSchedule::linear(1000).unwrap();
    for iters in [4000u64, 12000] {
        for seed in [1u64, 2] {
            let cfg = TrainConfig {
                batch_size: 256,
                iterations: iters,
                learning_rate: 1e-3,
                ema_rate: 0.999,
                lambda_vlb: 0.001,
                seed,
                ..Default::default()
            };
            let spec_uncond = DenoiserSpec { hidden: vec![64, 64], embedding_dim: 32, group_size: 16, conditional: false, learned_variance: true };
            let spec_cond = DenoiserSpec { conditional: true, ..spec_uncond.clone() };
            let uncond = train_diffusion(&mix, &spec_uncond, &sched, &cfg).unwrap();
            let cond = train_diffusion(&mix, &spec_cond, &sched, &cfg).unwrap();

            let mut ref_rng = rand_chacha::ChaCha8Rng::seed_from_u64(50 + seed);
            let (reference, ref_labels) = mix.sample_batch(&mut ref_rng, 12_000);
            let n = 6000;
            let mut class_rng = rand_chacha::ChaCha8Rng::seed_from_u64(60 + seed);
            let classes: Vec<usize> = (0..n).map(|_| mix.sample(&mut class_rng).1).collect();
            let scfg = SamplerConfig { seed: 70 + seed, respacing: RespacingSpec::Uniform { count: 250 }, ..Default::default() };

            let su = sample(&uncond.ema, &sched, &scfg, n, None, None, false).unwrap();
            let sc = sample(&cond.ema, &sched, &scfg, n, None, Some(&classes), false).unwrap();

            // MAP-assign unconditional samples.
            let map_class = |row: ndarray::ArrayView1<f64>| -> usize {
                let lp = mix.clean_class_log_probs(&row);
                (0..4).max_by(|&a, &b| lp[a].total_cmp(&lp[b])).unwrap()
            };
            let split = |pts: &Array2<f64>, labels: &[usize]| -> Vec<Array2<f64>> {
                (0..4).map(|y| {
                    let rows: Vec<usize> = (0..pts.nrows()).filter(|&i| labels[i] == y).collect();
                    let mut out = Array2::zeros((rows.len(), 2));
                    for (k, &i) in rows.iter().enumerate() { out.row_mut(k).assign(&pts.row(i)); }
                    out
                }).collect()
            };
            let u_labels: Vec<usize> = su.samples.rows().into_iter().map(map_class).collect();
            let ref_split = split(&reference, &ref_labels);
            let u_split = split(&su.samples, &u_labels);
            let c_split = split(&sc.samples, &classes);
            let mean_fd = |gen: &[Array2<f64>]| -> f64 {
                (0..4).map(|y| frechet_distance(&ref_split[y].view(), &gen[y].view()).unwrap().0).sum::<f64>() / 4.0
            };
            println!("iters {iters} seed {seed}: per-class frechet uncond(MAP) {:.5}, cond {:.5} ({})",
                mean_fd(&u_split), mean_fd(&c_split),
                if mean_fd(&c_split) < mean_fd(&u_split) { "cond better" } else { "UNCOND BETTER" });
        }
    }
}
