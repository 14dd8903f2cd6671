use std::collections::HashSet;
use std::fs;

use soul_core::federation::{self, run_arm, RunObserver, TrainPurpose};
use soul_core::harness::{self, config::RetrainCharge, run_sweep, Axis, Report};
use soul_core::{Arm, ExperimentConfig};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        rounds: 4,
        seeds: 2,
        ..ExperimentConfig::default()
    }
    .resolved()
}

#[derive(Default)]
struct Recorder {
    learned: Vec<(usize, usize, Vec<usize>)>,
    unlearned: Vec<(usize, usize, Vec<usize>)>,
}

impl RunObserver for Recorder {
    fn on_local_train(
        &mut self,
        round: usize,
        client: usize,
        purpose: TrainPurpose,
        ids: &[usize],
    ) {
        let entry = (round, client, ids.to_vec());
        match purpose {
            TrainPurpose::Learn => self.learned.push(entry),
            TrainPurpose::Unlearn => self.unlearned.push(entry),
        }
    }
}

fn forget_ids(out: &federation::RunOutcome) -> HashSet<usize> {
    out.setup
        .clients
        .iter()
        .filter_map(|c| c.split.as_ref())
        .flat_map(|s| s.unlearn.ids.iter().copied())
        .collect()
}

#[test]
fn retrain_never_sees_forget_samples() {
    let cfg = small();
    let mut rec = Recorder::default();
    let out = run_arm(&cfg, Arm::Retrain, 0, &mut rec).unwrap();
    let forget = forget_ids(&out);
    assert!(!forget.is_empty());
    assert!(rec.unlearned.is_empty());
    assert_eq!(rec.learned.len(), cfg.rounds * cfg.partition.num_clients);
    for (_, _, ids) in &rec.learned {
        assert!(ids.iter().all(|i| !forget.contains(i)));
    }
}

#[test]
fn soul_trains_unlearning_models_on_forget_and_retained_rows() {
    let cfg = small();
    let mut rec = Recorder::default();
    let out = run_arm(&cfg, Arm::Soul, 0, &mut rec).unwrap();
    let forget = forget_ids(&out);
    assert_eq!(rec.unlearned.len(), cfg.rounds * cfg.unlearn_clients);
    for (_, client, ids) in &rec.unlearned {
        let c = &out.setup.clients[*client];
        assert!(c.is_unlearning());
        let mut got = ids.clone();
        got.sort_unstable();
        let mut want = c.data.ids.clone();
        want.sort_unstable();
        assert_eq!(got, want);
        assert!(ids.iter().any(|i| forget.contains(i)));
    }
}

#[test]
fn unlearning_clients_and_forget_sets_are_nested() {
    let mut cfg = small();
    cfg.unlearn_clients = 2;
    let two = federation::build_setup(&cfg, federation::run_seed(&cfg, 0)).unwrap();
    cfg.unlearn_clients = 4;
    let four = federation::build_setup(&cfg, federation::run_seed(&cfg, 0)).unwrap();
    let (a, b) = (two.unlearning_ids(), four.unlearning_ids());
    assert_eq!((a.len(), b.len()), (2, 4));
    assert!(a.iter().all(|id| b.contains(id)));

    cfg.unlearn_ratio = 0.05;
    let low = federation::build_setup(&cfg, federation::run_seed(&cfg, 0)).unwrap();
    for (lo, hi) in low.clients.iter().zip(&four.clients) {
        if let (Some(l), Some(h)) = (&lo.split, &hi.split) {
            assert!(l.unlearn.ids.iter().all(|i| h.unlearn.ids.contains(i)));
        }
    }
}

#[test]
fn sweep_row_counts_and_determinism() {
    let mut cfg = small();
    cfg.seeds = 1;
    cfg.arms = vec![Arm::Soul];
    let one = run_sweep(&cfg, Axis::Alpha, &[0.3]).unwrap();
    assert_eq!(one.rows.len(), cfg.rounds);

    cfg.arms = Arm::ALL.to_vec();
    cfg.seeds = 2;
    let a = run_sweep(&cfg, Axis::Beta, &[0.1, 0.2]).unwrap();
    let b = run_sweep(&cfg, Axis::Beta, &[0.1, 0.2]).unwrap();
    assert_eq!(a.rows, b.rows);
    let count = |arm| a.rows.iter().filter(|r| r.arm == arm).count();
    assert_eq!(count(Arm::Soul), count(Arm::Retrain));
    assert_eq!(count(Arm::Soul), 2 * 2 * cfg.rounds);

    let mut sorted = a.rows.clone();
    harness::sort_canonical(&mut sorted);
    assert_eq!(sorted, a.rows);
}

#[test]
fn sweep_rejects_invalid_values() {
    let cfg = small();
    assert!(run_sweep(&cfg, Axis::Beta, &[0.0]).is_err());
    assert!(run_sweep(&cfg, Axis::UnlearnClients, &[11.0]).is_err());
    assert!(run_sweep(&cfg, Axis::UnlearnRatio, &[]).is_err());
}

#[test]
fn run_dir_is_self_describing() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    harness::run_sweep_to_dir(&cfg, Axis::UnlearnRatio, &[0.1], dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("config.json")).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), harness::CSV_HEADER);
    assert!(dir.path().join("summary.csv").exists());
}

#[test]
fn report_totals_match_recomputation() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let res =
        harness::run_sweep_to_dir(&cfg, Axis::UnlearnClients, &[2.0, 5.0], dir.path()).unwrap();
    let text = harness::report(dir.path().join("metrics.csv"), dir.path()).unwrap();
    assert!(text.contains("soul"));
    for f in [
        "fig2.csv",
        "fig3.csv",
        "fig4_comp.csv",
        "fig4_comm.csv",
        "fig4_total.csv",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let rep = Report::from_rows(&res.rows).unwrap();
    for t in &rep.fig4_total {
        let per_seed: Vec<f64> = (0..cfg.seeds as u64)
            .map(|s| {
                res.rows
                    .iter()
                    .filter(|r| r.arm == t.arm && r.axis_value == t.axis_value && r.seed == s)
                    .map(|r| r.comp_time_s + r.comm_time_s)
                    .sum()
            })
            .collect();
        let want = harness::median(&per_seed);
        assert!((t.median_s - want).abs() <= 1e-12 * want);
    }
    assert_eq!(rep.fig3.len(), 3 * 2 * cfg.rounds);
}

#[test]
fn retrain_is_charged_per_request() {
    let mut cfg = small();
    cfg.seeds = 1;
    let per = run_arm(&cfg, Arm::Retrain, 0, &mut federation::NoObserver).unwrap();
    cfg.retrain_charge = RetrainCharge::Once;
    let once = run_arm(&cfg, Arm::Retrain, 0, &mut federation::NoObserver).unwrap();
    let u = cfg.unlearn_clients as f64;
    for (a, b) in per.history.iter().zip(&once.history) {
        assert!((a.total_s - u * b.total_s).abs() <= 1e-9 * a.total_s);
        assert_eq!(a.acc_remain, b.acc_remain);
    }
}

#[test]
fn fedau_like_uploads_dense_payloads() {
    let cfg = small();
    let soul = run_arm(&cfg, Arm::Soul, 0, &mut federation::NoObserver).unwrap();
    let fedau = run_arm(&cfg, Arm::FedauLike, 0, &mut federation::NoObserver).unwrap();
    let (s, f) = (&soul.history[0], &fedau.history[0]);
    for k in 0..s.payload_bytes.len() {
        assert!(f.payload_bytes[k] > 3 * s.payload_bytes[k]);
    }
    assert!(fedau.history.iter().all(|r| r.selectively_pruned == 0));
    assert!(soul.history.iter().any(|r| r.selectively_pruned > 0));
}
