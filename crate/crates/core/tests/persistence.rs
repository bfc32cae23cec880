use proptest::prelude::*;
use vmflow::data::{make_gmm_dataset, RingSpec};
use vmflow::rng::seeded;
use vmflow::{checkpoint, generate, Condition, Dataset, FlowNet, ModelConfig, SamplerConfig, Tensor, TrainConfig, Trainer, Variant, VmfModel};

fn ring() -> Dataset {
    let spec = RingSpec {
        samples_per_mode: 8,
        ..Default::default()
    };
    make_gmm_dataset(&spec.to_gmm()).unwrap()
}

fn trainer(data: &Dataset, seed: u64) -> Trainer<VmfModel> {
    let mcfg = ModelConfig {
        width: 16,
        heads: 2,
        blocks: 1,
        mlp_ratio: 2,
        latent_dim: 2,
        encoder_hidden: 8,
        time_freqs: 3,
        dispersive_layer: 0,
        max_sample_len: 1,
    };
    let net = VmfModel::new(&mcfg, data.shape(), true, seed).unwrap();
    let mut cfg = TrainConfig::for_variant(Variant::Vmfd);
    cfg.batch_size = 16;
    cfg.seed = seed;
    Trainer::new(net, cfg).unwrap()
}

fn train_to(tr: &mut Trainer<VmfModel>, data: &Dataset, steps: u64, reports: &mut Vec<vmflow::LossReport>) {
    while tr.run_epoch(data, Some(steps), |r| reports.push(r.clone())).unwrap() {}
}

fn bits(tensors: &[(String, Tensor)]) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    tensors
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn sample_bytes(net: &VmfModel, data: &Dataset) -> Vec<u8> {
    let conds = vec![Condition::Given(data.examples()[0].c.clone()); 32];
    let cfg = SamplerConfig {
        nfe: 2,
        guidance_w: 1.5,
        conditional: true,
        seed: 5,
    };
    let s = generate(net, &conds, 1, 2, &cfg).unwrap();
    let mut out = Vec::new();
    for (i, row) in s.data().chunks(2).enumerate() {
        serde_json::to_writer(&mut out, &serde_json::json!({ "id": i, "latent": row })).unwrap();
        out.push(b'\n');
    }
    out
}

#[test]
fn checkpoint_file_round_trip_is_bit_identical() {
    let data = ring();
    let mut tr = trainer(&data, 1);
    tr.run_epoch(&data, Some(3), |_| {}).unwrap();
    let saved = tr.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    checkpoint::save(&path, &saved).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(bits(&saved), bits(&loaded));

    let mut fresh = trainer(&data, 2);
    fresh.restore(&loaded).unwrap();
    assert_eq!(bits(&fresh.checkpoint()), bits(&saved));
}

#[test]
fn restored_training_continues_identically() {
    let data = ring();
    let mut straight = trainer(&data, 3);
    let mut reports = Vec::new();
    train_to(&mut straight, &data, 10, &mut reports);
    assert_eq!(reports.len(), 10);

    // the boundary falls at the end of the first epoch
    let mut first = trainer(&data, 3);
    train_to(&mut first, &data, 4, &mut Vec::new());
    let mut buf = Vec::new();
    checkpoint::write_to(&mut buf, &first.checkpoint()).unwrap();
    let mut resumed = trainer(&data, 3);
    resumed.restore(&checkpoint::read_from(buf.as_slice()).unwrap()).unwrap();
    let mut tail = Vec::new();
    train_to(&mut resumed, &data, 10, &mut tail);

    assert_eq!(tail, reports[4..]);
    assert_eq!(bits(&resumed.checkpoint()), bits(&straight.checkpoint()));
}

#[test]
fn same_seed_gives_byte_identical_samples() {
    let data = ring();
    let run = || {
        let mut tr = trainer(&data, 4);
        tr.run_epoch(&data, Some(5), |_| {}).unwrap();
        sample_bytes(&tr.net, &data)
    };
    let a = run();
    assert_eq!(a, run());
    let mut other = trainer(&data, 5);
    other.run_epoch(&data, Some(5), |_| {}).unwrap();
    assert_ne!(a, sample_bytes(&other.net, &data));
}

#[test]
fn weights_only_restore_keeps_fresh_optimizer() {
    let data = ring();
    let mut tr = trainer(&data, 6);
    tr.run_epoch(&data, Some(2), |_| {}).unwrap();
    let weights: Vec<(String, Tensor)> = tr.net.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let mut fresh = trainer(&data, 7);
    fresh.restore(&weights).unwrap();
    assert_eq!((fresh.step, fresh.epoch, fresh.opt.step_count()), (0, 0, 0));
    assert_eq!(bits(&weights), bits(&fresh.net.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect::<Vec<_>>()));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut buf = Vec::new();
    checkpoint::write_to(&mut buf, &[("w".to_string(), t)]).unwrap();
    assert!(checkpoint::read_from(&buf[..buf.len() - 1]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(checkpoint::read_from(bad.as_slice()).is_err());

    let data = ring();
    let mut tr = trainer(&data, 8);
    assert!(tr.restore(&checkpoint::read_from(buf.as_slice()).unwrap()).is_err());
}

proptest! {
    #[test]
    fn arbitrary_tensors_round_trip(shapes in prop::collection::vec(prop::collection::vec(0usize..4, 0..4), 0..5), seed in 0u64..1000) {
        let mut rng = seeded(seed);
        let tensors: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("t/{i}"), Tensor::randn(s, 3.0, &mut rng)))
            .collect();
        let mut buf = Vec::new();
        checkpoint::write_to(&mut buf, &tensors).unwrap();
        prop_assert_eq!(bits(&tensors), bits(&checkpoint::read_from(buf.as_slice()).unwrap()));
    }
}
