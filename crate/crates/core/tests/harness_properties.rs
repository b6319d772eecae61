use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use redistill::align::plan;
use redistill::harness::{
    distill, make_toy_dataset, make_toy_dataset_with, toy_zoo_config, train_teacher, write_jsonl, write_summary_csv, DistillConfig, GratingSpec,
    RunMetrics, Sgd, ToyDataset, SUMMARY_COLUMNS,
};
use redistill::ir::{model_zoo, NetworkGraph, ZooModel};
use redistill::kernel::ops::fully_connected;
use redistill::kernel::{cross_entropy, load_checkpoint, manifest_path, save_checkpoint, Model, RedAblation, Tensor};
use redistill::memory::trace;
use redistill::par::{self, Execution};
use redistill::rewrite::{rewrite_aggressive, RewriteConfig};

fn quick(epochs: usize) -> DistillConfig {
    DistillConfig { epochs, ..DistillConfig::default() }
}

fn toy_pair(data: &ToyDataset, multiplier: u64) -> (NetworkGraph, NetworkGraph) {
    let teacher = model_zoo(ZooModel::ToyCnn, &toy_zoo_config(data)).unwrap();
    let (student, _) = rewrite_aggressive(&teacher, &RewriteConfig::new(multiplier)).unwrap();
    (teacher, student)
}

/// A briefly trained teacher with its student graph.
fn setup(multiplier: u64) -> (Model, NetworkGraph, ToyDataset) {
    let data = make_toy_dataset(0, 16);
    let (tg, student) = toy_pair(&data, multiplier);
    let (teacher, _) = train_teacher(&tg, &data, &DistillConfig::plain().with_schedule_of(&quick(2))).unwrap();
    (teacher, student, data)
}

fn run(teacher: &Model, student: &NetworkGraph, data: &ToyDataset, config: &DistillConfig) -> (Model, RunMetrics) {
    let p = plan(teacher.graph(), student).unwrap();
    distill(teacher, student, &p, config, data).unwrap()
}

#[test]
fn dataset_is_deterministic_balanced_and_disjoint() {
    let a = make_toy_dataset(3, 12);
    assert_eq!(a, make_toy_dataset(3, 12));
    assert_ne!(a.train.images, make_toy_dataset(4, 12).train.images);
    assert_eq!(a.train.images.dims(), [48, 1, 32, 32]);
    for split in [&a.train, &a.test] {
        let mut hist = [0usize; 4];
        split.labels.iter().for_each(|&l| hist[l] += 1);
        assert!(hist.iter().all(|&h| h == split.len() / 4), "{hist:?}");
    }
    for i in 0..a.train.len() {
        for j in 0..a.test.len() {
            assert_ne!(a.train.images.sample(i), a.test.images.sample(j));
        }
    }
}

/// Multinomial logistic regression on raw pixels, full-batch gradient descent.
fn linear_probe(data: &ToyDataset, epochs: usize, lr: f64) -> f64 {
    let flat = |t: &Tensor| t.clone().reshape([t.n(), t.sample_len(), 1, 1]).unwrap();
    let (x, xt) = (flat(&data.train.images), flat(&data.test.images));
    let d = x.c();
    let mut w = Tensor::zeros([data.classes, d, 1, 1]);
    let mut b = vec![0.0; data.classes];
    for _ in 0..epochs {
        let z = fully_connected(&x, &w, &b).unwrap();
        let g = cross_entropy(&z, &data.train.labels).unwrap().grad;
        for k in 0..data.classes {
            for n in 0..x.n() {
                let gk = g.sample(n)[k];
                b[k] -= lr * gk;
                let row = &mut w.data_mut()[k * d..(k + 1) * d];
                row.iter_mut().zip(x.sample(n)).for_each(|(wv, xv)| *wv -= lr * gk * xv);
            }
        }
    }
    let z = fully_connected(&xt, &w, &b).unwrap();
    let correct = (0..xt.n())
        .filter(|&n| {
            let row = z.sample(n);
            let pred = (0..row.len()).fold(0, |m, j| if row[j] > row[m] { j } else { m });
            pred == data.test.labels[n]
        })
        .count();
    correct as f64 / xt.n() as f64
}

#[test]
fn pixels_are_not_linearly_separable_but_a_small_cnn_learns_them() {
    let data = make_toy_dataset_with(0, 256, 256, &GratingSpec::default());
    let probe = linear_probe(&data, 300, 0.05);
    assert!(probe < 0.9, "linear probe {probe}");
    let (tg, _) = toy_pair(&data, 2);
    let (_, m) = train_teacher(&tg, &data, &DistillConfig::plain().with_schedule_of(&quick(20))).unwrap();
    println!("linear probe {probe:.3}, teacher {:.3}", m.test_accuracy);
    assert!(m.test_accuracy > 0.95, "teacher {}", m.test_accuracy);
    // No five-epoch window where the training loss rises by more than 10%.
    // Near zero, minibatch noise exceeds 10% of the loss, so rises below 1%
    // of the first-epoch loss are treated as noise.
    let floor = 0.01 * m.epochs[0].total_loss;
    for w in m.epochs.windows(5) {
        assert!(w[4].total_loss <= 1.1 * w[0].total_loss + floor, "epoch {}: {} -> {}", w[0].epoch, w[0].total_loss, w[4].total_loss);
    }
}

#[test]
fn reruns_are_bit_identical_in_single_threaded_mode() {
    par::set_default(Execution::Sequential);
    let (teacher, student, data) = setup(2);
    let a = run(&teacher, &student, &data, &quick(2));
    let b = run(&teacher, &student, &data, &quick(2));
    par::set_default(Execution::Parallel);
    assert_eq!(a.1, b.1);
    assert_eq!(a.0.state(), b.0.state());
    let c = run(&teacher, &student, &data, &DistillConfig { seed: 1, ..quick(2) });
    assert_ne!(a.1.steps, c.1.steps);
}

#[test]
fn parallel_and_sequential_runs_agree() {
    let (teacher, student, data) = setup(2);
    let par_run = run(&teacher, &student, &data, &quick(1)).1;
    par::set_default(Execution::Sequential);
    let seq_run = run(&teacher, &student, &data, &quick(1)).1;
    par::set_default(Execution::Parallel);
    assert_eq!(par_run, seq_run);
}

#[test]
fn teacher_is_left_untouched() {
    let (teacher, student, data) = setup(2);
    let before = teacher.state();
    let kd = DistillConfig { use_kd: true, ..quick(2) };
    run(&teacher, &student, &data, &kd);
    assert_eq!(teacher.state(), before);
}

#[test]
fn logged_total_is_the_sum_of_its_terms() {
    let (teacher, student, data) = setup(4);
    for config in [quick(2), DistillConfig { use_kd: true, alpha: 7.5, ..quick(2) }] {
        let (_, m) = run(&teacher, &student, &data, &config);
        assert!(!m.steps.is_empty());
        for s in &m.steps {
            let sum = s.task_loss + config.alpha * s.red_losses.iter().sum::<f64>() + s.kd_loss;
            assert!((s.total_loss - sum).abs() <= 1e-6, "step {}", s.step);
            assert_eq!(s.red_losses.len(), 1);
        }
    }
}

#[test]
fn zero_alpha_without_blocks_is_plain_training() {
    let (teacher, student, data) = setup(2);
    let (_, distilled) = run(&teacher, &student, &data, &DistillConfig { alpha: 0.0, ablation: RedAblation::NoRedBlock, ..quick(2) });
    let (_, plain) = train_teacher(&student, &data, &DistillConfig::plain().with_schedule_of(&quick(2))).unwrap();
    assert_eq!(distilled.steps.len(), plain.steps.len());
    for (a, b) in distilled.steps.iter().zip(&plain.steps) {
        assert_eq!(a.task_loss, b.task_loss);
        assert_eq!(a.total_loss, b.total_loss);
    }
    assert_eq!(distilled.test_accuracy, plain.test_accuracy);
}

#[test]
fn zero_learning_rate_keeps_the_initialization() {
    let (teacher, student, data) = setup(2);
    let (untrained, _) = run(&teacher, &student, &data, &quick(0));
    let (frozen, m) = run(&teacher, &student, &data, &DistillConfig { lr: 0.0, ..quick(2) });
    assert_eq!(m.epochs.len(), 2);
    assert_eq!(untrained.params(), frozen.params());

    let mut params = untrained.params().clone();
    let grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::full(t.dims(), 1.0)).collect();
    let mut sgd = Sgd::new(&params, 0.9, 5e-4);
    sgd.step(&mut params, &grads, 0.0);
    assert_eq!(&params, untrained.params());
}

#[test]
fn red_blocks_do_not_move_the_peak() {
    let data = make_toy_dataset(0, 8);
    for multiplier in [2, 4] {
        let (teacher, student) = toy_pair(&data, multiplier);
        let p = plan(&teacher, &student).unwrap();
        for a in RedAblation::ALL {
            let (with_red, _) = redistill::kernel::insert_red_blocks(&student, &p, a, 5).unwrap();
            assert_eq!(trace(&with_red).unwrap().peak_bytes, trace(&student).unwrap().peak_bytes, "x{multiplier} {a}");
        }
    }
    let (teacher, student, data) = setup(2);
    let (_, m) = run(&teacher, &student, &data, &quick(1));
    assert_eq!(m.peak_bytes, m.peak_bytes_with_red);
    assert!(m.red_param_count > 0);
}

#[test]
fn checkpoints_round_trip() {
    let (teacher, _, _) = setup(2);
    let dir = tempfile::tempdir().unwrap();
    let blob = dir.path().join("teacher.bin");
    let manifest = save_checkpoint(&blob, &teacher.state()).unwrap();
    assert!(manifest_path(&blob).exists());
    assert_eq!(manifest.total_bytes, std::fs::metadata(&blob).unwrap().len() as usize);
    let loaded = load_checkpoint(&blob).unwrap();
    assert_eq!(loaded, teacher.state());
    let mut fresh = Model::new(teacher.graph().clone(), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    fresh.load_state(&loaded).unwrap();
    assert_eq!(fresh.state(), teacher.state());
}

#[test]
fn metrics_serialize_to_jsonl_and_csv() {
    let (teacher, student, data) = setup(2);
    let (_, m) = run(&teacher, &student, &data, &quick(2));
    let mut jsonl = Vec::new();
    write_jsonl(&mut jsonl, &m).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(jsonl).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["epoch"], 1);
    assert_eq!(lines[0]["label"], "full");
    assert_eq!(lines[0]["red_losses"].as_array().unwrap().len(), 2);

    let mut csv_out = Vec::new();
    write_summary_csv(&mut csv_out, &[m.clone(), m]).unwrap();
    let mut reader = csv::Reader::from_reader(csv_out.as_slice());
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), SUMMARY_COLUMNS);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    let acc: f64 = rows[0][4].parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn one_epoch_smoke_run_is_fast() {
    let start = Instant::now();
    let data = make_toy_dataset_with(0, 128, 256, &GratingSpec::default());
    let (tg, student) = toy_pair(&data, 4);
    let (teacher, _) = train_teacher(&tg, &data, &DistillConfig::plain().with_schedule_of(&quick(1))).unwrap();
    run(&teacher, &student, &data, &quick(1));
    assert!(start.elapsed().as_secs() < 60, "{:?}", start.elapsed());
}
