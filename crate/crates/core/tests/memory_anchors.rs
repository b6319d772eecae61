use redistill::ir::{model_zoo, ZooConfig, ZooModel};
use redistill::memory::{trace, trace_with, AccountingOptions, PeakReport};
use redistill::rewrite::{rewrite_aggressive, RewriteConfig};

const MIB: u64 = 1 << 20;

fn peak(model: ZooModel, multiplier: u64) -> (u64, String) {
    let cfg = ZooConfig::new(224);
    let teacher = model_zoo(model, &cfg).unwrap();
    let (graph, _) = rewrite_aggressive(&teacher, &RewriteConfig::new(multiplier)).unwrap();
    let t = trace(&graph).unwrap();
    (t.peak_bytes, t.peak_node_id)
}

#[test]
fn resnet18_teacher_peaks_at_maxpool() {
    let (bytes, node) = peak(ZooModel::Resnet18, 1);
    // 64x112x112 fp32 input plus 64x56x56 output.
    assert_eq!(bytes, 64 * 112 * 112 * 4 + 64 * 56 * 56 * 4);
    assert_eq!(node, "maxpool");
    assert_eq!(format!("{:.2}", bytes as f64 / MIB as f64), "3.83");
}

#[test]
fn resnet18_times_four_peaks_at_stem() {
    let (bytes, node) = peak(ZooModel::Resnet18, 4);
    assert_eq!(bytes, 3 * 224 * 224 * 4 + 64 * 28 * 28 * 4);
    assert_eq!(node, "conv1.conv");
    assert_eq!(format!("{:.2}", bytes as f64 / MIB as f64), "0.77");
}

#[test]
fn resnet50_pair() {
    let (t, _) = peak(ZooModel::Resnet50, 1);
    let (s, _) = peak(ZooModel::Resnet50, 4);
    assert_eq!(t, 3 * 256 * 56 * 56 * 4);
    assert_eq!(s, 3 * 256 * 28 * 28 * 4);
    assert_eq!(format!("{:.2}", t as f64 / MIB as f64), "9.19");
    assert_eq!(format!("{:.2}", s as f64 / MIB as f64), "2.30");
}

#[test]
fn separate_epilogues_move_the_resnet18_peak() {
    let g = model_zoo(ZooModel::Resnet18, &ZooConfig::new(224)).unwrap();
    let t = trace_with(&g, &AccountingOptions::separate()).unwrap();
    assert_eq!(t.peak_bytes, 2 * 64 * 112 * 112 * 4);
    let report = PeakReport::new("resnet18", g.input_shape(), &trace(&g).unwrap());
    assert_eq!(report.to_string(), "3.83 MB");
}
