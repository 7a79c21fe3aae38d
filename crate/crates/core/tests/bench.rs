use excl_core::bench::prompt_builder::prompt_expert_with_noise;
use excl_core::bench::*;
use excl_core::numerics::{argmax, Rng};
use excl_core::rain::AdaptConfig;
use excl_core::ExclError;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn source_accuracy(b: &Benchmark, data: &Dataset) -> f64 {
    let correct = data
        .features()
        .iter()
        .zip(data.labels())
        .filter(|(x, &l)| b.source_expert.forward(x, true).unwrap().1.argmax() == l)
        .count();
    correct as f64 / data.len() as f64
}

#[test]
fn default_shift_costs_the_source_expert_fifteen_points() {
    for seed in SEEDS {
        let b = Benchmark::build(&BenchConfig::default(), seed).unwrap();
        let drop = source_accuracy(&b, &b.domains.source) - source_accuracy(&b, &b.domains.target);
        // measured minimum over these seeds: 0.186
        assert!(drop >= 0.15, "seed {seed}: drop {drop}");
    }
}

#[test]
fn zero_gamma_domains_are_interchangeable() {
    let mut cfg = BenchConfig::default();
    cfg.domains.gamma = 0.0;
    for seed in SEEDS {
        let b = Benchmark::build(&cfg, seed).unwrap();
        let gap =
            (source_accuracy(&b, &b.domains.source) - source_accuracy(&b, &b.domains.target)).abs();
        assert!(gap < 0.03, "seed {seed}: gap {gap}");
    }
}

#[test]
fn zero_gamma_shift_is_the_identity() {
    let cfg = DomainConfig {
        gamma: 0.0,
        ..Default::default()
    };
    let shift = DomainShift::sample(&cfg, &mut Rng::new(1));
    let x: Vec<f64> = (0..cfg.d_in).map(|i| i as f64 - 3.5).collect();
    assert_eq!(shift.apply(&x, &mut Rng::new(2)), x);
}

#[test]
fn generation_is_reproducible_and_validated() {
    let cfg = DomainConfig::default();
    let a = generate_domains(&cfg, 42).unwrap();
    let b = generate_domains(&cfg, 42).unwrap();
    assert_eq!(a.source, b.source);
    assert_eq!(a.target, b.target);
    let c = generate_domains(&cfg, 43).unwrap();
    assert_ne!(a.target, c.target);
    let bad = DomainConfig {
        d_in: 1,
        ..Default::default()
    };
    assert!(matches!(
        generate_domains(&bad, 0),
        Err(ExclError::InvalidArgument(_))
    ));
}

#[test]
fn generated_datasets_round_trip_through_text() {
    let d = generate_domains(&DomainConfig::default(), 5).unwrap();
    for data in [&d.source, &d.target] {
        assert_eq!(&Dataset::from_text(&data.to_text()).unwrap(), data);
    }
}

#[test]
fn default_prompt_expert_lands_in_band() {
    let cfg = BenchConfig::default();
    for seed in SEEDS {
        let b = Benchmark::build(&cfg, seed).unwrap();
        assert!(b.prompt_expert().prompt().iter().all(|&v| v == 0.0));
        let cal = b.prompt.calibration_accuracy;
        assert!((cfg.prompt.band_low..=cfg.prompt.band_high).contains(&cal));
        let zs = zero_shot_accuracy(b.prompt_expert(), &b.domains.target).unwrap();
        assert!(
            (cfg.prompt.band_low..=cfg.prompt.band_high).contains(&zs),
            "seed {seed}: zero-shot {zs}"
        );
    }
}

#[test]
fn noise_free_anchors_are_most_accurate() {
    let cfg = BenchConfig::default();
    for seed in SEEDS {
        let d = generate_domains(&cfg.domains, seed).unwrap();
        let means = d.target_means();
        let at = |sigma: f64| {
            let e = prompt_expert_with_noise(&means, &cfg.prompt, seed, sigma).unwrap();
            zero_shot_accuracy(&e, &d.target).unwrap()
        };
        let clean = at(0.0);
        for sigma in [0.5, 1.0, 2.0, 4.0, 8.0] {
            assert!(at(sigma) <= clean, "seed {seed}, sigma {sigma}");
        }
    }
}

#[test]
fn unreachable_band_is_a_construction_error() {
    let mut cfg = BenchConfig::default();
    cfg.prompt.band_low = 0.999;
    cfg.prompt.band_high = 1.0;
    assert!(matches!(
        Benchmark::build(&cfg, 0),
        Err(ExclError::BenchmarkConstruction(_))
    ));
}

#[test]
fn consensus_metric_is_the_argmax_of_averaged_outputs() {
    let b = Benchmark::build(&BenchConfig::default(), 1).unwrap();
    let data = &b.domains.target;
    let m = evaluate(&b.source_expert, b.prompt_expert(), data).unwrap();
    let mut hits = 0;
    for (x, &l) in data.features().iter().zip(data.labels()) {
        let os = b.source_expert.forward(x, true).unwrap().1;
        let ov = b.prompt_expert().forward(x, true).unwrap();
        let avg: Vec<f64> = os
            .iter()
            .zip(ov.iter())
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        hits += usize::from(argmax(&avg) == l);
    }
    assert_eq!(m.acc_consensus, hits as f64 / data.len() as f64);
}

#[test]
fn ablation_none_row_is_the_untrained_baseline() {
    let bench = BenchConfig {
        domains: DomainConfig {
            num_categories: 3,
            d_in: 6,
            samples_per_domain: 120,
            ..Default::default()
        },
        pretrain: PretrainConfig {
            d_hidden: 8,
            adapter_rank: 2,
            ..Default::default()
        },
        prompt: PromptConfig {
            d_embed: 6,
            ..Default::default()
        },
    };
    let adapt = AdaptConfig {
        epochs: 2,
        init_epochs: 1,
        batch_size: 16,
        ..Default::default()
    };
    let table = run_ablation(&bench, &adapt, &[3, 4]).unwrap();
    assert_eq!(table.rows.len(), 7);
    let none = table.row("none").unwrap();
    for (seed, metrics) in &none.per_seed {
        let b = Benchmark::build(&bench, *seed).unwrap();
        let baseline = evaluate(&b.source_expert, b.prompt_expert(), &b.domains.target).unwrap();
        assert_eq!(metrics, &baseline);
    }
    assert!(run_ablation(&bench, &adapt, &[]).is_err());
}
