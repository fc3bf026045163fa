mod common;

use std::collections::BTreeMap;

use angiogan::checkpoint::{self, collect_tensors};
use angiogan::dataset::{random_crops, PairedSample};
use angiogan::objective::{recon_l2, ObjectiveConfig};
use angiogan::trainer::*;
use common::*;
use ndarray::ArrayD;

fn toy_samples(n: usize, seed: u64) -> Vec<PairedSample> {
    let pair = synthetic_pair("p", 80, 96, 0.3);
    random_crops(&pair, n, 64, seed).unwrap()
}

fn toy_state(seed: u64) -> TrainingState {
    TrainingState::new(ModelConfig::toy(), TrainingSchedule::default().adam(), seed).unwrap()
}

fn schedule(epochs: usize) -> TrainingSchedule {
    TrainingSchedule {
        batch_size: 2,
        epochs,
        ..TrainingSchedule::default()
    }
}

fn snapshot(state: &mut TrainingState) -> BTreeMap<String, ArrayD<f64>> {
    collect_tensors(state)
}

/// Names whose tensors differ between two snapshots, restricted to `prefixes`.
fn changed(a: &BTreeMap<String, ArrayD<f64>>, b: &BTreeMap<String, ArrayD<f64>>, prefixes: &[&str]) -> Vec<String> {
    a.iter()
        .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
        .filter(|(k, v)| b[*k] != **v)
        .map(|(k, _)| k.clone())
        .collect()
}

const GENERATORS: [&str; 4] = ["coarse.", "fine.", "adam.coarse.", "adam.fine."];
const DISCRIMINATORS: [&str; 2] = ["discriminators.", "adam.discriminators."];

#[test]
fn frozen_networks_are_bit_unchanged_by_other_steps() {
    let samples = toy_samples(4, 1);
    let batch = Batch::from_samples(&samples.iter().take(2).collect::<Vec<_>>()).unwrap();
    let obj = ObjectiveConfig::default();
    let mut st = toy_state(5);

    let s0 = snapshot(&mut st);
    st.discriminator_step(&batch, &obj).unwrap();
    let s1 = snapshot(&mut st);
    assert!(changed(&s0, &s1, &GENERATORS).is_empty(), "discriminator step touched a generator");
    assert!(!changed(&s0, &s1, &DISCRIMINATORS).is_empty());

    st.coarse_step(&batch, &obj).unwrap();
    let s2 = snapshot(&mut st);
    assert!(changed(&s1, &s2, &DISCRIMINATORS).is_empty(), "coarse step touched a discriminator");
    assert!(changed(&s1, &s2, &["fine.", "adam.fine."]).is_empty(), "coarse step touched the fine generator");
    assert!(!changed(&s1, &s2, &["coarse."]).is_empty());

    st.fine_step(&batch, &obj).unwrap();
    let s3 = snapshot(&mut st);
    assert!(changed(&s2, &s3, &DISCRIMINATORS).is_empty(), "fine step touched a discriminator");
    assert!(changed(&s2, &s3, &["coarse.", "adam.coarse."]).is_empty(), "fine step touched the coarse generator");
    assert!(!changed(&s2, &s3, &["fine."]).is_empty());

    st.joint_step(&batch, &obj).unwrap();
    let s4 = snapshot(&mut st);
    for p in ["coarse.", "fine.", "discriminators."] {
        assert!(!changed(&s3, &s4, &[p]).is_empty(), "joint step left {p} untouched");
    }
}

#[test]
fn train_cycle_runs_the_schedule_and_counts() {
    let samples = toy_samples(4, 2);
    let sched = schedule(1);
    let obj = ObjectiveConfig::default();
    let mut st = toy_state(3);
    let batches = st.draw_cycle(&samples, &sched, CyclePlan::FULL).unwrap();
    assert_eq!(batches.discriminator.len(), sched.d_steps_per_cycle);
    let r = st.train_cycle(&batches, &sched, &obj, CyclePlan::FULL).unwrap();
    assert_eq!(r.cycle, 1);
    assert_eq!(st.cycle, 1);
    assert!(r.l2_fine > 0.0 && r.total.is_finite());
}

#[test]
fn missing_or_empty_batches_are_input_errors() {
    let sched = schedule(1);
    let mut st = toy_state(3);
    let r = st.train_cycle(&CycleBatches::default(), &sched, &ObjectiveConfig::default(), CyclePlan::FULL);
    assert!(matches!(r, Err(angiogan::Error::Input(_))));
    let empty = Batch::new(ndarray::Array4::zeros((0, 3, 64, 64)), ndarray::Array4::zeros((0, 1, 64, 64)));
    assert!(matches!(empty, Err(angiogan::Error::Input(_))));
}

#[test]
fn non_finite_loss_reports_divergence_with_cycle() {
    let sched = schedule(1);
    let mut st = toy_state(3);
    let mut angio = random_tensor((2, 1, 64, 64), 1);
    angio[[0, 0, 0, 0]] = f64::NAN;
    let batch = Batch::new(random_tensor((2, 3, 64, 64), 2), angio).unwrap();
    let batches = CycleBatches {
        discriminator: vec![batch.clone(), batch.clone()],
        coarse: Some(batch.clone()),
        fine: Some(batch.clone()),
        joint: Some(batch),
    };
    match st.train_cycle(&batches, &sched, &ObjectiveConfig::default(), CyclePlan::FULL) {
        Err(angiogan::Error::Divergence { cycle, .. }) => assert_eq!(cycle, 1),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.cycle)),
    }
}

fn run_to_bytes(dir: &std::path::Path, seed: u64, epochs: usize) -> Vec<u8> {
    let samples = toy_samples(4, 9);
    let mut st = toy_state(seed);
    let out = FitOutputs { directory: dir.to_path_buf() };
    let written = fit(&mut st, &samples, &schedule(epochs), &ObjectiveConfig::default(), &out).unwrap();
    std::fs::read(written.last().unwrap()).unwrap()
}

#[test]
fn seeded_runs_give_identical_checkpoints() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let x = run_to_bytes(a.path(), 4, 2);
    let y = run_to_bytes(b.path(), 4, 2);
    assert!(x == y, "checkpoints differ");
    let c = tempfile::tempdir().unwrap();
    assert!(run_to_bytes(c.path(), 5, 2) != x, "seed had no effect");
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let samples = toy_samples(4, 9);
    let obj = ObjectiveConfig::default();
    let full_dir = tempfile::tempdir().unwrap();
    let full = run_to_bytes(full_dir.path(), 4, 3);

    let dir = tempfile::tempdir().unwrap();
    let out = FitOutputs { directory: dir.path().to_path_buf() };
    let mut st = toy_state(4);
    let first = fit(&mut st, &samples, &schedule(1), &obj, &out).unwrap();
    let mut ck = checkpoint::load(first.last().unwrap()).unwrap();
    let written = fit(&mut ck.state, &samples, &schedule(3), &obj, &out).unwrap();
    let resumed = std::fs::read(written.last().unwrap()).unwrap();
    assert!(resumed == full, "resumed run diverged from the uninterrupted one");

    let log = std::fs::read_to_string(out.log_path()).unwrap();
    let full_log = std::fs::read_to_string(FitOutputs { directory: full_dir.path().to_path_buf() }.log_path()).unwrap();
    assert_eq!(log, full_log);
    assert_eq!(log.lines().count(), 1 + 6);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let samples = toy_samples(4, 9);
    let obj = ObjectiveConfig::default();
    let sched = schedule(1);
    let mut st = toy_state(8);
    let batches = st.draw_cycle(&samples, &sched, CyclePlan::FULL).unwrap();
    st.train_cycle(&batches, &sched, &obj, CyclePlan::FULL).unwrap();
    let bytes = checkpoint::to_bytes(&mut st, &sched, &obj).unwrap();
    let mut back = checkpoint::from_bytes(&bytes).unwrap();
    let again = checkpoint::to_bytes(&mut back.state, &back.schedule, &back.objective).unwrap();
    assert!(bytes == again);
    assert_eq!(back.state.sampler_position(), st.sampler_position());
    assert_eq!(back.state.cycle, 1);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let mut st = toy_state(1);
    let bytes = checkpoint::to_bytes(&mut st, &schedule(1), &ObjectiveConfig::default()).unwrap();
    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 1;
    assert!(matches!(checkpoint::from_bytes(&flipped), Err(angiogan::Error::Checkpoint(_))));
    assert!(matches!(checkpoint::from_bytes(&bytes[..bytes.len() / 2]), Err(angiogan::Error::Checkpoint(_))));
    assert!(matches!(checkpoint::from_bytes(b"not a checkpoint at all"), Err(angiogan::Error::Checkpoint(_))));
}

#[test]
fn fit_smoke_writes_checkpoint_and_log() {
    let pairs = [synthetic_pair("a", 80, 96, 0.1), synthetic_pair("b", 80, 96, 0.9)];
    let samples = angiogan::dataset::build_samples(&pairs, 4, 64, 0).unwrap();
    assert_eq!(samples.len(), 8);
    let dir = tempfile::tempdir().unwrap();
    let out = FitOutputs { directory: dir.path().to_path_buf() };
    let sched = TrainingSchedule { epochs: 2, checkpoint_every: 1, ..TrainingSchedule::default() };
    let mut st = toy_state(0);
    let written = fit(&mut st, &samples, &sched, &ObjectiveConfig::default(), &out).unwrap();
    assert_eq!(written.len(), 4);
    assert!(written.iter().all(|p| p.is_file()));
    assert_eq!(st.epoch, 2);
    let log = std::fs::read_to_string(out.log_path()).unwrap();
    assert!(log.starts_with("cycle,"));
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn joint_at_end_schedule_splits_epochs() {
    let sched = TrainingSchedule { epochs: 20, joint_every_cycle: false, ..TrainingSchedule::default() };
    assert_eq!(sched.joint_phase_start(), 18);
    assert_eq!(CyclePlan::for_epoch(&sched, 17), CyclePlan { individual: true, joint: false });
    assert_eq!(CyclePlan::for_epoch(&sched, 18), CyclePlan { individual: false, joint: true });
    assert_eq!(CyclePlan::for_epoch(&TrainingSchedule::default(), 0), CyclePlan::FULL);
}

#[test]
fn inference_is_deterministic_and_in_range() {
    let mut st = toy_state(2);
    let crop = toy_samples(1, 3)[0].fundus_crop();
    let a = st.infer(&crop).unwrap();
    let b = st.infer(&crop).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.channels(), a.height(), a.width()), (1, 64, 64));
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let wrong = angiogan::ImageTensor::zeros(3, 32, 32);
    assert!(matches!(st.infer(&wrong), Err(angiogan::Error::Input(_))));
}

#[test]
fn short_training_improves_reconstruction_on_a_training_crop() {
    let samples = toy_samples(2, 3);
    let sched = schedule(1);
    let obj = ObjectiveConfig::default();
    let mut st = toy_state(1);
    let crop = &samples[0];
    let before = recon_l2(st.infer(&crop.fundus_crop()).unwrap().data(), crop.angio_crop().data()).unwrap();
    let batch = Batch::from_samples(&samples.iter().collect::<Vec<_>>()).unwrap();
    let batches = CycleBatches {
        discriminator: vec![batch.clone(), batch.clone()],
        coarse: Some(batch.clone()),
        fine: Some(batch.clone()),
        joint: Some(batch),
    };
    for _ in 0..60 {
        st.train_cycle(&batches, &sched, &obj, CyclePlan::FULL).unwrap();
    }
    let after = recon_l2(st.infer(&crop.fundus_crop()).unwrap().data(), crop.angio_crop().data()).unwrap();
    assert!(after < before, "{after} !< {before}");
}
