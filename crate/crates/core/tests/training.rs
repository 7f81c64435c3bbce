use dpgraph::accountant::{rdp_to_dp, PrivacySpec};
use dpgraph::graph::{generate_sbm, GraphDataset, SbmConfig};
use dpgraph::model::{per_example_gradient, Activation, Features, ModelConfig, ModelParams};
use dpgraph::rng::{stream, Domain};
use dpgraph::sampler::{sample_subgraphs, SamplerConfig};
use dpgraph::trainer::{sample_minibatch, train, Optimizer, PrivacyConfig, TrainConfig};

fn setup() -> (GraphDataset, SamplerConfig, ModelConfig, TrainConfig) {
    let g = generate_sbm(&SbmConfig {
        n: 150,
        num_classes: 3,
        p_in: 0.1,
        p_out: 0.01,
        feature_dim: 5,
        feature_noise: 1.0,
        seed: 8,
    })
    .unwrap();
    let s = SamplerConfig { k: 2, r: 2, seed: 8 };
    let m = ModelConfig {
        n_enc: 2,
        n_dec: 2,
        hidden: 6,
        activation: Activation::Tanh,
        layers_r: 2,
    };
    let t = TrainConfig {
        batch_size: 16,
        learning_rate: 0.3,
        iterations: 10,
        noise_multiplier: 0.0,
        clip_percentile: None,
        optimizer: Optimizer::Sgd,
        adam_betas: (0.9, 0.999),
        adam_eps: 1e-8,
        seed: 5,
        eval_every: 1,
    };
    (g, s, m, t)
}

fn privacy() -> PrivacyConfig {
    PrivacyConfig {
        delta: 1e-5,
        alpha_grid: None,
    }
}

/// Plain minibatch SGD or Adam on the mean gradient, one flat vector per
/// parameter set, returning the parameters after every step.
fn reference_trajectory(g: &GraphDataset, s: &SamplerConfig, m: &ModelConfig, t: &TrainConfig) -> Vec<Vec<f64>> {
    let subs = sample_subgraphs(g, s).unwrap();
    let x = Features::from(g);
    let mut params = ModelParams::init(m, g.feature_dim(), g.num_classes(), t.seed).unwrap();
    let n = params.num_values();
    let (mut f, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut out = Vec::new();
    for step in 1..=t.iterations {
        let batch = sample_minibatch(subs.len(), t.batch_size, &mut stream(t.seed, Domain::Minibatch, step)).unwrap();
        let mut mean = vec![0.0; n];
        for &i in &batch {
            let label = g.label(subs[i].root()).unwrap();
            let gr = per_example_gradient(&subs[i], &x, label, &params, m).unwrap();
            for (acc, gv) in mean.iter_mut().zip(gr.grads.values()) {
                *acc += gv / batch.len() as f64;
            }
        }
        let (b1, b2) = t.adam_betas;
        for (j, p) in params.values_mut().enumerate() {
            match t.optimizer {
                Optimizer::Sgd => *p -= t.learning_rate * mean[j],
                Optimizer::Adam => {
                    // the accumulated quantity is the batch sum, as in the private update
                    let u = mean[j] * batch.len() as f64;
                    f[j] = b1 * f[j] + (1.0 - b1) * u;
                    v[j] = b2 * v[j] + (1.0 - b2) * u * u;
                    let fh = f[j] / (1.0 - b1.powi(step as i32));
                    let vh = v[j] / (1.0 - b2.powi(step as i32));
                    *p -= t.learning_rate / batch.len() as f64 * fh / (vh.sqrt() + t.adam_eps);
                }
            }
        }
        out.push(params.values().copied().collect());
    }
    out
}

fn check_trajectory(optimizer: Optimizer) {
    let (g, s, m, mut t) = setup();
    t.optimizer = optimizer;
    let want = reference_trajectory(&g, &s, &m, &t);
    for steps in 1..=10u64 {
        let mut cfg = t.clone();
        cfg.iterations = steps;
        let got = train(&g, &s, &m, &cfg, &privacy()).unwrap();
        let worst = got
            .params
            .values()
            .zip(&want[steps as usize - 1])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-10, "{optimizer:?} step {steps}: {worst:e}");
    }
}

#[test]
fn noiseless_unclipped_sgd_matches_reference() {
    check_trajectory(Optimizer::Sgd);
}

#[test]
fn noiseless_unclipped_adam_matches_reference() {
    check_trajectory(Optimizer::Adam);
}

#[test]
fn epsilon_column_agrees_with_accountant() {
    let (g, s, m, mut t) = setup();
    t.noise_multiplier = 1.2;
    t.clip_percentile = Some(75.0);
    t.iterations = 12;
    t.eval_every = 3;
    let out = train(&g, &s, &m, &t, &privacy()).unwrap();
    let steps: Vec<u64> = out.log.rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![3, 6, 9, 12]);
    for row in &out.log.rows {
        let spec = PrivacySpec::from_lambda(g.train_set().len() as u64, 2, 2, 16, 1.2, row.step, 1e-5, privacy().grid()).unwrap();
        assert_eq!(row.epsilon, rdp_to_dp(&spec).unwrap().epsilon);
    }
    assert!(out.log.rows.windows(2).all(|w| w[0].epsilon <= w[1].epsilon));
}

#[test]
fn training_is_deterministic() {
    let (g, s, m, mut t) = setup();
    t.noise_multiplier = 0.7;
    t.clip_percentile = Some(75.0);
    t.optimizer = Optimizer::Adam;
    let a = train(&g, &s, &m, &t, &privacy()).unwrap();
    let b = train(&g, &s, &m, &t, &privacy()).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
    let c = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| train(&g, &s, &m, &t, &privacy()).unwrap());
    assert_eq!(a.params, c.params);
}

#[test]
fn per_class_table_is_ordered_by_training_frequency() {
    let (g, s, m, mut t) = setup();
    t.iterations = 3;
    let out = train(&g, &s, &m, &t, &privacy()).unwrap();
    let counts: Vec<usize> = out.log.per_class.iter().map(|c| c.train_count).collect();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    let total: usize = out.log.per_class.iter().map(|c| c.support).sum();
    let correct: usize = out.log.per_class.iter().map(|c| c.correct).sum();
    assert!((correct as f64 / total as f64 - out.log.final_test_accuracy()).abs() < 1e-12);
}
