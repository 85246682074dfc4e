use std::time::Duration;

use fedflow_core::aggregate::{AggregatorConfig, Algorithm};
use fedflow_core::models::{train_local, LeastSquares, LinearSample, LocalContext, Model, Optimizer, TrainConfig};
use fedflow_core::params::ParameterSet;
use fedflow_core::seed::rng;
use fedflow_core::transport::MsgType;
use fedflow_core::workflows::{
    round_seed, run_cyclic, run_in_process, run_scatter_gather, run_swarm, ClientData, CyclicOrder, RunOptions,
    WorkflowConfig, WorkflowError, WorkflowKind,
};
use rand::Rng;

const DIM: usize = 4;

fn samples(seed: u64, n: usize, shift: f64) -> Vec<LinearSample> {
    let mut r = rng(seed);
    let truth = [1.0, -2.0, 0.5, 3.0];
    (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..DIM).map(|_| r.random_range(-1.0..1.0) + shift).collect();
            let y = x.iter().zip(truth).map(|(a, b)| a * b).sum::<f64>() + shift * 2.0 + r.random_range(-0.1..0.1);
            LinearSample { x, y }
        })
        .collect()
}

fn client(id: &str, seed: u64, shift: f64) -> ClientData<LinearSample> {
    ClientData { id: id.into(), seed, train: samples(seed, 24, shift), test: samples(seed + 100, 8, shift) }
}

fn local(epochs: u32) -> TrainConfig {
    TrainConfig {
        local_epochs: epochs,
        batch_size: 4,
        learning_rate: 0.05,
        optimizer: Optimizer::Sgd,
        ..TrainConfig::default()
    }
}

fn cfg(kind: WorkflowKind, rounds: u32, alg: Algorithm) -> WorkflowConfig {
    WorkflowConfig::new(kind, rounds, AggregatorConfig::new(alg), local(2))
}

fn opts() -> RunOptions {
    RunOptions { round_timeout: Duration::from_secs(20), ..RunOptions::default() }
}

fn flat(p: &ParameterSet) -> Vec<f64> {
    p.to_flat_f64()
}

fn dist(a: &ParameterSet, b: &ParameterSet) -> f64 {
    flat(a).iter().zip(flat(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn solo(model: &LeastSquares, c: &ClientData<LinearSample>, rounds: u32, epochs: u32) -> ParameterSet {
    let mut w = model.init_params(0);
    for t in 0..rounds {
        let cfg = TrainConfig { seed: round_seed(c.seed, t), ..local(epochs) };
        w = train_local(model, &w, &c.train, &cfg, LocalContext::new(&c.id, t)).unwrap().weights;
    }
    w
}

#[test]
fn single_client_scatter_gather_matches_solo_training() {
    let model = LeastSquares::new(DIM, 0.01);
    let c = client("a", 7, 0.0);
    let out = run_scatter_gather(
        &cfg(WorkflowKind::ScatterGather, 1, Algorithm::FedAvg),
        &model,
        std::slice::from_ref(&c),
        &opts(),
    )
    .unwrap();
    assert_eq!(out.output.final_model, solo(&model, &c, 1, 2));
}

#[test]
fn identical_clients_average_to_solo_result() {
    let model = LeastSquares::new(DIM, 0.01);
    let a = client("a", 7, 0.0);
    let b = ClientData { id: "b".into(), ..a.clone() };
    let out =
        run_scatter_gather(&cfg(WorkflowKind::ScatterGather, 2, Algorithm::FedAvg), &model, &[a.clone(), b], &opts())
            .unwrap();
    assert!(dist(&out.output.final_model, &solo(&model, &a, 2, 2)) < 1e-6);
}

#[test]
fn single_client_cyclic_matches_solo_training() {
    let model = LeastSquares::new(DIM, 0.01);
    let c = client("a", 3, 0.0);
    for relayed in [true, false] {
        let out = run_cyclic(
            &cfg(WorkflowKind::Cyclic, 3, Algorithm::FedAvg),
            &model,
            std::slice::from_ref(&c),
            &opts(),
            relayed,
        )
        .unwrap();
        assert_eq!(out.output.final_model, solo(&model, &c, 3, 2));
    }
}

#[test]
fn runs_are_deterministic() {
    let model = LeastSquares::new(DIM, 0.01);
    let clients = [client("a", 1, 0.0), client("b", 2, 0.5)];
    let c = cfg(WorkflowKind::ScatterGather, 3, Algorithm::Scaffold);
    let r1 = run_in_process(&c, &model, &clients, &opts()).unwrap().output;
    let r2 = run_in_process(&c, &model, &clients, &opts()).unwrap().output;
    assert_eq!(r1.final_model.serialize(), r2.final_model.serialize());
    assert_eq!(r1.records, r2.records);
    assert_eq!(r1.ledger.total_bytes(), r2.ledger.total_bytes());
}

#[test]
fn swarm_matches_scatter_gather() {
    let model = LeastSquares::new(DIM, 0.01);
    let clients = [client("a", 1, 0.0), client("b", 2, 0.7), client("c", 3, -0.4)];
    for alg in Algorithm::ALL {
        let sg = run_scatter_gather(&cfg(WorkflowKind::ScatterGather, 4, alg), &model, &clients, &opts()).unwrap();
        let sw = run_swarm(&cfg(WorkflowKind::Swarm, 4, alg), &model, &clients, &opts()).unwrap();
        let d = dist(&sg.output.final_model, &sw.output.final_model);
        assert!(d < 1e-6, "{alg:?}: distance {d}");
        assert_eq!(sw.output.aggregators, ["a", "b", "c", "a"]);
    }
}

#[test]
fn relay_path_does_not_change_cyclic_result() {
    let model = LeastSquares::new(DIM, 0.01);
    let clients = [client("a", 1, 0.0), client("b", 2, 0.7), client("c", 3, -0.4)];
    for order in [CyclicOrder::Fixed(vec!["b".into(), "c".into(), "a".into()]), CyclicOrder::RandomPerRound(9)] {
        let mut c = cfg(WorkflowKind::Cyclic, 3, Algorithm::FedAvg);
        c.cyclic_order = Some(order);
        let cwt = run_cyclic(&c, &model, &clients, &opts(), true).unwrap();
        let dcwt = run_cyclic(&c, &model, &clients, &opts(), false).unwrap();
        assert_eq!(cwt.output.final_model, dcwt.output.final_model);
        assert_eq!(cwt.output.orders, dcwt.output.orders);
        assert!(dcwt.output.ledger.total_bytes() < cwt.output.ledger.total_bytes());
    }
}

#[test]
fn cyclic_order_matters_on_heterogeneous_data() {
    let model = LeastSquares::new(DIM, 0.01);
    let clients = [client("a", 1, -1.0), client("b", 2, 1.5)];
    let run = |order: [&str; 2]| {
        let mut c = cfg(WorkflowKind::Cyclic, 2, Algorithm::FedAvg);
        c.cyclic_order = Some(CyclicOrder::Fixed(order.iter().map(|s| s.to_string()).collect()));
        run_cyclic(&c, &model, &clients, &opts(), false).unwrap().output.final_model
    };
    assert!(dist(&run(["a", "b"]), &run(["b", "a"])) > 1e-3);
}

#[test]
fn ledger_has_one_entry_per_client_and_round() {
    let model = LeastSquares::new(DIM, 0.01);
    let clients = [client("a", 1, 0.0), client("b", 2, 0.5)];
    for kind in
        [WorkflowKind::ScatterGather, WorkflowKind::Cyclic, WorkflowKind::DecentralizedCyclic, WorkflowKind::Swarm]
    {
        let out = run_in_process(&cfg(kind, 3, Algorithm::FedAvg), &model, &clients, &opts()).unwrap().output;
        assert_eq!(out.ledger.rounds(), 3, "{kind:?}");
        let train_records = out.records.iter().filter(|r| r.round.is_some()).count();
        assert_eq!(train_records, 6, "{kind:?}");
        let finals = out.records.iter().filter(|r| r.round.is_none()).count();
        assert_eq!(finals, 2, "{kind:?}");
    }
}

#[test]
fn only_protocol_messages_cross_the_wire() {
    let model = LeastSquares::new(DIM, 0.01);
    let clients = [client("a", 1, 0.0), client("b", 2, 0.5)];
    let o = RunOptions { trace: true, ..opts() };
    let out = run_swarm(&cfg(WorkflowKind::Swarm, 2, Algorithm::Scaffold), &model, &clients, &o).unwrap();
    assert!(!out.trace.is_empty());
    let model_bytes = model.init_params(0).serialize().len();
    for rec in &out.trace {
        assert!(!matches!(rec.msg_type, MsgType::Heartbeat));
        assert!(rec.bytes < model_bytes * 4 + 4096, "{rec:?}");
    }
}

#[test]
fn swarm_reelects_after_aggregator_failure() {
    let model = LeastSquares::new(DIM, 0.01);
    let clients = [client("a", 1, 0.0), client("b", 2, 0.7), client("c", 3, -0.4)];
    let c = cfg(WorkflowKind::Swarm, 3, Algorithm::FedAvg);
    let healthy = run_swarm(&c, &model, &clients, &opts()).unwrap();
    let o = RunOptions {
        round_timeout: Duration::from_millis(800),
        fail_aggregation: Some(("b".into(), 1)),
        ..RunOptions::default()
    };
    let out = run_swarm(&c, &model, &clients, &o).unwrap();
    assert_eq!(out.output.aggregators, ["a", "c", "c"]);
    assert!(dist(&healthy.output.final_model, &out.output.final_model) < 1e-6);
}

#[test]
fn stateful_model_rejected_under_fedopt() {
    use fedflow_core::models::{ModelSpec, Normalization, SegNet};
    let spec = ModelSpec { normalization: Normalization::BatchStats, ..ModelSpec::default() };
    let model = SegNet::new(spec).unwrap();
    let clients: Vec<ClientData<_>> = Vec::new();
    let mut c = cfg(WorkflowKind::ScatterGather, 1, Algorithm::FedOpt);
    c.local = TrainConfig::default();
    let err = run_in_process(&c, &model, &clients, &opts()).unwrap_err();
    assert!(matches!(err, WorkflowError::InvalidConfig { .. } | WorkflowError::Aggregation { .. }), "{err}");
}

#[test]
fn first_round_aggregator_failure_moves_to_next_client() {
    let model = LeastSquares::new(DIM, 0.01);
    let clients = [client("a", 1, 0.0), client("b", 2, 0.5)];
    let o = RunOptions { round_timeout: Duration::from_millis(500), fail_aggregation: Some(("a".into(), 0)), ..opts() };
    let out = run_swarm(&cfg(WorkflowKind::Swarm, 2, Algorithm::FedAvg), &model, &clients, &o).unwrap();
    assert_eq!(out.output.aggregators[0], "b");
}
