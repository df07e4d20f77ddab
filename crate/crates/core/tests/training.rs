use fivo_core::models::{LearnedGaussian, Lgssm, LgssmParams, SequentialModel};
use fivo_core::numerics::stream_role;
use fivo_core::objectives::{estimate_bound, ObjectiveSpec};
use fivo_core::trainer::{train, TrainConfig};
use fivo_core::RngStream;

fn data(m: &Lgssm, len: usize, count: u64, offset: u64) -> Vec<Vec<f64>> {
    let root = RngStream::new(5, 0);
    (0..count)
        .map(|k| m.sample(len, &mut root.derive(stream_role::DATA, offset + k)).0)
        .collect()
}

/// ELBO gap per step, averaged over sequences, for the given proposal.
fn elbo_gap_per_step(m: &Lgssm, q: &LearnedGaussian, seqs: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (k, x) in seqs.iter().enumerate() {
        let oracle = m.exact_log_marginal(x).unwrap().log_marginal;
        let rng = RngStream::new(17, 0).derive(stream_role::VALIDATION, k as u64);
        let b = estimate_bound(&ObjectiveSpec::elbo(), m, q, x, 4000, &rng).unwrap();
        total += (oracle - b.mean) / x.len() as f64;
    }
    total / seqs.len() as f64
}

#[test]
fn proposal_training_with_elbo_closes_the_gap_to_the_kalman_oracle() {
    let truth = Lgssm::new(LgssmParams::new(0.5, 1.0, 1.0, 1.0, 1.0).unwrap()).unwrap();
    let train_set = data(&truth, 10, 16, 0);
    let validation = data(&truth, 10, 4, 100);
    let mut cfg = TrainConfig::new(ObjectiveSpec::elbo(), 2e-2, 1500, 3);
    cfg.batch_size = 4;
    cfg.train_model = false;
    let q0 = LearnedGaussian::default();
    let before = elbo_gap_per_step(&truth, &q0, &validation);
    let out = train(&truth, &q0, &train_set, &validation, &cfg).unwrap();
    assert_eq!(out.model.params(), truth.params());
    let after = elbo_gap_per_step(&truth, &out.proposal, &validation);
    assert!(after < 0.05, "gap per step {before:.4} -> {after:.4}");
    assert!(after < before);
}
