use apcd_core::harness::{evaluate_objective, prepare_experiment, ExperimentConfig};
use apcd_core::model::LinearPolicy;
use apcd_core::policy::policy_from_document;
use apcd_core::registry::{extractors, q_updates, synthesizers};
use apcd_core::schema::{read_json, write_json};
use apcd_core::simulator::{read_dataset, write_dataset};
use nalgebra::DVector;

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.benchmark.steps = 61;
    cfg.runs = 8;
    cfg.sweep.pool = 4;
    cfg.sweep.n = vec![1, 2];
    cfg
}

#[test]
fn registries_list_their_variants() {
    assert_eq!(extractors().names(), ["natural", "vanilla"]);
    assert_eq!(synthesizers().names(), ["lqer", "lqr"]);
    assert_eq!(q_updates().names(), ["natural", "vanilla"]);
    let err = extractors().get("bogus").err().unwrap().to_string();
    assert_eq!(err, "unknown extraction method 'bogus'");
}

#[test]
fn stored_dataset_reproduces_evaluation() {
    let cfg = small();
    let exp = prepare_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &exp.model, &exp.data).unwrap();
    let stored = read_dataset(dir.path()).unwrap();
    assert_eq!(stored.model, exp.model);
    assert_eq!(stored.measurements, exp.data.measurements);

    let a = evaluate_objective(&exp.model, &exp.cost, &exp.demo, &exp.data.bank, cfg.runs).unwrap();
    let b = evaluate_objective(&stored.model, &exp.cost, &exp.demo, &stored.bank(), cfg.runs).unwrap();
    assert_eq!(a, b);
}

#[test]
fn extracted_policies_survive_serialization() {
    let cfg = small();
    let exp = prepare_experiment(&cfg).unwrap();
    let d = exp.model.dims;
    let model = exp.model.with_prior_policy(LinearPolicy::isotropic(d.steps, d.n_x, d.n_u, 1e4));
    let seqs = exp.data.measurements[..3].to_vec();
    let dir = tempfile::tempdir().unwrap();
    for name in extractors().names() {
        let policy = extractors().get(name).unwrap().extract(&model, &seqs).unwrap();
        let path = dir.path().join(format!("{name}.json"));
        write_json(&path, &policy.to_document().with_method(name)).unwrap();
        let back = policy_from_document(&read_json(&path).unwrap()).unwrap();
        assert_eq!(back.kind(), policy.kind());
        let x = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        for t in [0, 30, 60] {
            assert_eq!(back.mean_control(t, &x).unwrap(), policy.mean_control(t, &x).unwrap());
        }
    }
}

#[test]
fn extracted_policies_close_the_loop() {
    let mut cfg = small();
    cfg.benchmark.steps = 251;
    let exp = prepare_experiment(&cfg).unwrap();
    let d = exp.model.dims;
    let model = exp.model.with_prior_policy(LinearPolicy::isotropic(d.steps, d.n_x, d.n_u, 1e4));
    let seqs = exp.data.measurements[..2].to_vec();
    let base = evaluate_objective(&model, &exp.cost, &exp.demo, &exp.data.bank, cfg.runs).unwrap();
    let prior = evaluate_objective(&model, &exp.cost, &model.prior_policy, &exp.data.bank, cfg.runs).unwrap();
    for name in ["vanilla", "natural"] {
        let p = extractors().get(name).unwrap().extract(&model, &seqs).unwrap();
        let ev = evaluate_objective(&model, &exp.cost, p.as_ref(), &exp.data.bank, cfg.runs).unwrap();
        assert!(!ev.diverged);
        assert!(ev.objective >= base.objective * 0.5, "{name}: {} vs {}", ev.objective, base.objective);
        assert!(ev.mean_position_error < prior.mean_position_error, "{name}");
    }
}
