use magic::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint};
use magic::data::{synthesize, ModalitySample, SceneConfig};
use magic::trainer::{
    lr_at, total_steps, train, train_step, warmup_steps, CheckpointSink, TrainConfig, TrainState,
};
use magic::MagicError;
use std::path::Path;

fn data(seed: u64, n: usize) -> Vec<ModalitySample> {
    let scene = SceneConfig {
        height: 16,
        width: 16,
        classes: 4,
        ..SceneConfig::default()
    };
    synthesize(seed, n, &scene).unwrap()
}

fn config(epochs: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        warmup_epochs: u64::from(epochs > 1),
        base_lr: 2e-3,
        feature_dim: 4,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_give_identical_logs_and_checkpoints() {
    let ds = data(1, 3);
    let cfg = config(2);
    let (a, la) = train(&ds, &cfg, None, None).unwrap();
    let (b, lb) = train(&ds, &cfg, None, None).unwrap();
    assert_eq!(la.to_csv(&cfg), lb.to_csv(&cfg));
    assert_eq!(la.rankings_csv(&cfg), lb.rankings_csv(&cfg));
    assert_eq!(
        encode_checkpoint(&a.to_checkpoint()),
        encode_checkpoint(&b.to_checkpoint())
    );
}

#[test]
fn one_epoch_logs_one_row_per_sample() {
    let (state, log) = train(&data(2, 3), &config(1), None, None).unwrap();
    assert_eq!(log.rows.len(), 3);
    assert_eq!(state.step, 3);
    let steps: Vec<u64> = log.rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, [0, 1, 2]);
}

#[test]
fn resume_reproduces_the_unbroken_run() {
    let ds = data(3, 5);
    let cfg = TrainConfig {
        checkpoint_every: 5,
        ..config(2)
    };
    let dir = tempfile::tempdir().unwrap();
    let sink = CheckpointSink { dir: dir.path() };
    let (full, full_log) = train(&ds, &cfg, None, Some(&sink)).unwrap();
    assert_eq!(full.step, 10);
    let unbroken_final = std::fs::read(sink.final_path()).unwrap();

    let mid = TrainState::from_checkpoint(load_checkpoint(&sink.step_path(5)).unwrap()).unwrap();
    assert_eq!(mid.step, 5);
    let dir2 = tempfile::tempdir().unwrap();
    let sink2 = CheckpointSink { dir: dir2.path() };
    let (resumed, resumed_log) = train(&ds, &cfg, Some(mid), Some(&sink2)).unwrap();
    assert_eq!(resumed_log.rows, full_log.rows[5..]);
    assert_eq!(resumed, full);
    assert_eq!(std::fs::read(sink2.final_path()).unwrap(), unbroken_final);
}

#[test]
fn checkpoint_bytes_round_trip() {
    let (state, _) = train(&data(4, 2), &config(1), None, None).unwrap();
    let bytes = encode_checkpoint(&state.to_checkpoint());
    let back =
        TrainState::from_checkpoint(decode_checkpoint(&bytes, Path::new("mem")).unwrap()).unwrap();
    assert_eq!(back, state);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
}

#[test]
fn loss_moving_average_decreases() {
    let ds = data(5, 4);
    let cfg = config(5);
    let (_, log) = train(&ds, &cfg, None, None).unwrap();
    assert_eq!(log.rows.len(), 20);
    let ma = |i: usize| log.rows[i..i + 5].iter().map(|r| r.loss.total).sum::<f64>() / 5.0;
    assert!(
        ma(15) < ma(0),
        "first window {}, last window {}",
        ma(0),
        ma(15)
    );
    assert!(log.rows[19].loss.total < log.rows[0].loss.total);
}

#[test]
fn zero_weights_leave_the_salient_branch_without_gradient() {
    // Decoupled weight decay still shrinks the salient parameters, but no
    // gradient reaches them: both Adam moments stay exactly zero.
    let ds = data(6, 2);
    let cfg = TrainConfig {
        lambda: 0.0,
        beta: 0.0,
        ..config(1)
    };
    let (a, _) = train(&ds, &cfg, None, None).unwrap();
    for moments in [&a.m, &a.v] {
        for (name, p) in moments.params() {
            let zero = p.data.iter().all(|v| *v == 0.0);
            assert_eq!(zero, name.starts_with("mam/salient/"), "{name}");
        }
    }
}

#[test]
fn nan_parameter_reports_the_main_term() {
    let ds = data(7, 1);
    let cfg = config(1);
    let mut state = TrainState::new(&cfg, 4).unwrap();
    state.model.seghead.proj.weight.data[0] = f64::NAN;
    match train_step(&mut state, &[&ds[0]], &cfg, 1) {
        Err(MagicError::NonFinite { term, step }) => {
            assert_eq!(term, "l_m");
            assert_eq!(step, 0);
        }
        other => panic!("expected a non-finite error, got {:?}", other.map(|r| r.0)),
    }
}

#[test]
fn schedule_probes() {
    let cfg = TrainConfig::default();
    let total = 2000;
    assert_eq!(warmup_steps(total, &cfg), 100);
    for step in [0, 50, 99] {
        assert!((lr_at(step, total, &cfg).unwrap() - 6e-6).abs() < 1e-12);
    }
    assert!((lr_at(1000, total, &cfg).unwrap() - 6e-5 * 0.5f64.powf(0.9)).abs() < 1e-12);
    assert_eq!(lr_at(total, total, &cfg).unwrap(), 0.0);
    assert!(lr_at(0, 0, &cfg).is_err());
    assert_eq!(total_steps(3, &config(2)), 6);
}
