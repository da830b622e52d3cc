use coplms::config::{ExperimentConfig, Method};
use coplms::federation::{
    aggregate_lora, baseline_fedlora, comm_ratio, device_name, prepare, run_with_setup, Direction, SERVER,
};
use coplms::model::{ParamBlock, ParamKind};
use coplms::numerics::Tensor;
use proptest::prelude::*;

const SMOKE: &str = include_str!("../../../configs/smoke.toml");

fn smoke(rounds: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml(SMOKE).unwrap();
    c.rounds = rounds;
    c
}

fn block(a: &[f64], b: &[f64]) -> ParamBlock {
    ParamBlock::new(vec![
        ("l0.wq.lora.a".into(), Tensor::new(vec![a.len()], a.to_vec()).unwrap()),
        ("l0.wq.lora.b".into(), Tensor::new(vec![b.len()], b.to_vec()).unwrap()),
    ])
}

fn values(b: &ParamBlock) -> Vec<f64> {
    b.entries.iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

#[test]
fn zero_rounds_yield_an_empty_series() {
    let c = smoke(0);
    let setup = prepare(&c, 1).unwrap();
    let fed = run_with_setup(&c, &setup, 1).unwrap();
    let r = fed.report();
    assert!(r.rounds.is_empty());
    assert!(fed.bus.ledger.is_empty());
    assert!(r.comm_ratio.iter().all(|&x| x == 0.0));
}

#[test]
fn ledger_is_conserved() {
    let c = smoke(2);
    let setup = prepare(&c, 2).unwrap();
    let fed = run_with_setup(&c, &setup, 2).unwrap();
    let ledger = &fed.bus.ledger;
    let total = ledger.totals();
    let per_endpoint: usize = (0..c.devices)
        .map(|i| ledger.endpoint_totals(&device_name(i)).scalars)
        .sum::<usize>()
        + ledger.endpoint_totals(SERVER).scalars;
    // Every message has exactly two endpoints.
    assert_eq!(per_endpoint, 2 * total.scalars);
    for t in 1..=c.rounds {
        let r = ledger.round_totals(t);
        let up: usize = ledger
            .messages
            .iter()
            .filter(|m| m.round == t && m.direction == Direction::Upload)
            .map(|m| m.scalar_count)
            .sum();
        assert_eq!(2 * up, r.scalars);
        assert_eq!(fed.reports[t - 1].comm, r);
    }
    assert_eq!(total.bytes, 8 * total.scalars);
    for m in &ledger.messages {
        assert!(m.payload.iter().all(|d| ParamKind::of(&d.name) == ParamKind::Lora), "{m:?}");
        assert!(m.wire_bytes > m.byte_count);
    }
}

#[test]
fn device_adapters_stay_local() {
    let c = smoke(2);
    let setup = prepare(&c, 3).unwrap();
    let fed = run_with_setup(&c, &setup, 3).unwrap();
    let adapters: Vec<ParamBlock> =
        fed.devices.iter().map(|d| d.dpm.as_ref().unwrap().block_of(ParamKind::Adapter)).collect();
    assert!(!adapters[0].bitwise_eq(&adapters[1]));
    assert!(!adapters[1].bitwise_eq(&adapters[2]));
    let server = fed.server.dpm.as_ref().unwrap().block_of(ParamKind::Adapter);
    assert_eq!(server.scalar_count(), 0);
}

#[test]
fn fedlora_single_device_round_trips_its_own_update() {
    let mut c = smoke(2);
    c.method = Method::Fedlora;
    c.devices = 1;
    c.models.slm.truncate(1);
    let setup = prepare(&c, 4).unwrap();
    let fed = baseline_fedlora(&c, &setup, 4).unwrap();
    assert_eq!(fed.bus.ledger.len(), 4);
    assert!(fed.server.dpm.is_none() && fed.server.llm.is_none());
    let expected = fed.devices[0].slm.lora_block().scalar_count();
    assert!(fed.bus.ledger.messages.iter().all(|m| m.scalar_count == expected));
    let resident = fed.init.device_resident_scalars[0];
    assert_eq!(comm_ratio(&fed.bus.ledger, "device0", resident), (2 * expected) as f64 / resident as f64);
}

#[test]
fn heterogeneous_devices_keep_their_architectures() {
    let c = smoke(1);
    let setup = prepare(&c, 5).unwrap();
    let fed = run_with_setup(&c, &setup, 5).unwrap();
    let r = fed.report();
    let round = &r.rounds[0];
    for (i, s) in c.models.slm.iter().enumerate() {
        assert_eq!(round.endpoint(&format!("device{i}/slm")).unwrap().arch_tag, s.arch.arch_tag);
        assert_eq!(round.endpoint(&format!("device{i}/dpm")).unwrap().arch_tag, c.models.dpm.arch_tag);
    }
    assert_eq!(round.endpoint("server/llm").unwrap().arch_tag, c.models.llm.arch_tag);
    let vocabs: Vec<usize> = fed.devices.iter().map(|d| d.tokenizer.vocab_size()).collect();
    assert!(vocabs[0] < vocabs[1] && vocabs[1] < vocabs[2], "{vocabs:?}");
}

fn lora_blocks() -> impl Strategy<Value = Vec<ParamBlock>> {
    (1usize..6, 1usize..5, 1usize..5).prop_flat_map(|(n, la, lb)| {
        prop::collection::vec(
            (prop::collection::vec(-10.0f64..10.0, la), prop::collection::vec(-10.0f64..10.0, lb)),
            n,
        )
        .prop_map(|v| v.iter().map(|(a, b)| block(a, b)).collect())
    })
}

proptest! {
    #[test]
    fn aggregate_of_copies_is_the_block(blocks in lora_blocks(), n in 1usize..6) {
        let copies = vec![blocks[0].clone(); n];
        let mean = aggregate_lora(&copies).unwrap();
        prop_assert!(mean.same_layout(&blocks[0]));
        for (m, x) in values(&mean).iter().zip(values(&blocks[0])) {
            prop_assert!((m - x).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }

    #[test]
    fn aggregate_is_order_free_and_bounded(blocks in lora_blocks(), rot in 0usize..6) {
        let mut rotated = blocks.clone();
        let k = rot % blocks.len();
        rotated.rotate_left(k);
        let a = values(&aggregate_lora(&blocks).unwrap());
        let b = values(&aggregate_lora(&rotated).unwrap());
        let all: Vec<Vec<f64>> = blocks.iter().map(values).collect();
        for j in 0..a.len() {
            prop_assert!((a[j] - b[j]).abs() < 1e-12);
            let lo = all.iter().map(|v| v[j]).fold(f64::INFINITY, f64::min);
            let hi = all.iter().map(|v| v[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a[j] >= lo - 1e-12 && a[j] <= hi + 1e-12);
        }
    }
}
