//! Federation driver: configuration, the round loop, metrics export and the
//! built-in invariant checks behind `qahfl verify`.

mod config;
mod metrics;
mod run;

pub use config::{parse_ablations, Ablation, AblationRow, ConfigError, DataSource, RunConfig, ABLATION_ROWS};
pub use metrics::{
    clients_rows, export_metrics, privacy_rows, read_run_file, report, rounds_rows, summarize, MetricsError, RunFile,
    RunSummary, CLIENTS_HEADER, PRIVACY_HEADER, ROUNDS_HEADER,
};
pub use run::{
    degrade_test_set, load_data, run_federation, run_with_data, ClientRoundRecord, PlanSummary, RoundLedger,
    RoundStatus, RunError, RunOutput,
};

pub use crate::seed::seed_tree;

use crate::nn::check::{gradient_check, layer_suite};
use crate::privacy::{plain_sum, round_epsilon, secure_sum, to_fixed};
use rand::Rng;
use std::collections::BTreeSet;

/// Outcome of one built-in check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Gradient checks, epsilon arithmetic and masked-sum exactness.
pub fn verify_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for spec in layer_suite() {
        let (passed, detail) = match gradient_check(&spec, seed, 0.01, 1e-5) {
            Ok(r) => (r.max_rel_error <= 1e-4, format!("max relative error {:.2e} over {} params", r.max_rel_error, r.params)),
            Err(e) => (false, e.to_string()),
        };
        out.push(CheckResult { name: format!("gradient/{}", spec.name), passed, detail });
    }

    let eps = round_epsilon(100, 1.3, 1e-5);
    let c = (2.0 * (1.25f64 / 1e-5).ln()).sqrt();
    let oracle = 2.0 * c / 130.0;
    out.push(CheckResult {
        name: "epsilon/closed-form".into(),
        passed: ((eps - oracle) / oracle).abs() < 1e-12 && (eps - 0.074536).abs() < 1e-5,
        detail: format!("{eps:.6}"),
    });
    let ordered = [1.1, 1.3, 1.5].map(|s| round_epsilon(150, s, 1e-5));
    out.push(CheckResult {
        name: "epsilon/tier-ordering".into(),
        passed: ordered[0] > ordered[1] && ordered[1] > ordered[2],
        detail: format!("{ordered:.5?}"),
    });

    let mut rng = seed_tree(seed, &["verify", "secure-sum"]);
    let mut failures = 0;
    let trials = 50;
    for _ in 0..trials {
        let n = rng.random_range(10..=50);
        let vectors: Vec<Vec<i32>> =
            (0..n).map(|_| (0..64).map(|_| to_fixed(rng.random_range(-1.0..=1.0))).collect()).collect();
        let k = rng.random_range(0..=(n * 2 / 5));
        let dropped: BTreeSet<usize> = rand::seq::index::sample(&mut rng, n, k).into_iter().collect();
        let within = k as f64 <= 0.3 * n as f64 + 1e-9;
        match (secure_sum(&vectors, &dropped, 0.3, &mut rng), within) {
            (Ok(sum), true) if sum == plain_sum(&vectors, &dropped) => {}
            (Err(_), false) => {}
            _ => failures += 1,
        }
    }
    out.push(CheckResult {
        name: "secure-sum/exactness".into(),
        passed: failures == 0,
        detail: format!("{failures} failures in {trials} trials"),
    });
    out
}
