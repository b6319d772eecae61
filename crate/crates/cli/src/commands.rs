use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use redistill::align::{plan_with_mode, AlignmentMode};
use redistill::harness::{
    ablation_suite, mean_accuracy, paired_runs, toy_ddpm_distill, write_jsonl, write_summary_csv, DdpmConfig, DistillConfig, ToyProtocol,
};
use redistill::ir::{from_json, model_zoo, to_json, NetworkGraph, ZooModel};
use redistill::kernel::{GradCheckOp, RedAblation, RedDistance};
use redistill::memory::{export_report, trace_with, AccountingOptions, PeakReport, ReportFormat, MIB};
use redistill::rewrite::{rewrite_aggressive, RewriteConfig};

use crate::failure::Failure;
use crate::{
    Alignment, AnalyzeArgs, BnAct, Command, Distance, Format, GradCheckArgs, GraphSource, OutputArgs, PlanArgs, ReportTable, RewriteArgs,
    TrainToyArgs, ZooArgs,
};

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Analyze(a) => analyze(a),
        Command::Rewrite(a) => rewrite(a),
        Command::Plan(a) => plan(a),
        Command::GradCheck(a) => grad_check(a),
        Command::TrainToy(a) => train_toy(a),
        Command::Report(a) => report(a.table),
        Command::Zoo(a) => zoo(a),
    }
}

fn zoo_graph(name: &str, res: Option<u64>) -> Result<NetworkGraph, Failure> {
    let model: ZooModel = name.parse().map_err(|e| Failure::usage(format!("{e}; try `redistill zoo`")))?;
    let mut cfg = model.default_config();
    if let Some(r) = res {
        cfg.resolution = r;
    }
    model_zoo(model, &cfg).map_err(Failure::data)
}

fn read_graph(path: &Path) -> Result<NetworkGraph, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(Failure::data)?;
    from_json(&text).map_err(|e| Failure::data(e).context(format!("invalid graph in {}", path.display())))
}

/// The graph and a label for it.
fn load(source: &GraphSource) -> Result<(NetworkGraph, String), Failure> {
    match (&source.ir, &source.model) {
        (Some(path), _) => Ok((read_graph(path)?, path.display().to_string())),
        (None, Some(name)) => Ok((zoo_graph(name, source.res)?, name.clone())),
        (None, None) => Err(Failure::usage("give an IR file or --model")),
    }
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<(), Failure> {
    if path.exists() && !force {
        return Err(Failure::usage(format!("{} exists; pass --force to replace it", path.display())));
    }
    Ok(())
}

fn emit(output: &OutputArgs, text: &str) -> Result<(), Failure> {
    match &output.out {
        Some(path) => {
            refuse_overwrite(path, output.force)?;
            fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(Failure::data)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn student(graph: &NetworkGraph, multiplier: u64) -> Result<NetworkGraph, Failure> {
    rewrite_aggressive(graph, &RewriteConfig::new(multiplier)).map(|(g, _)| g).map_err(Failure::data)
}

fn analyze(a: AnalyzeArgs) -> Result<(), Failure> {
    if a.output.out.is_some() && a.format.is_none() {
        return Err(Failure::usage("--out needs --format"));
    }
    let (graph, label) = load(&a.source)?;
    let graph = student(&graph, a.multiplier)?;
    let options = AccountingOptions { fuse_bn_act: a.bn_act == BnAct::Fused };
    let trace = trace_with(&graph, &options).map_err(Failure::data)?;
    let report = PeakReport::new(label, graph.input_shape(), &trace);
    println!("{report}");
    if a.bytes {
        println!("{} bytes", report.peak_bytes);
    }
    println!("peak at {}", report.peak_node_id);
    if let Some(format) = a.format {
        let format = match format {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        };
        emit(&a.output, &export_report(&trace, format))?;
    }
    Ok(())
}

fn rewrite(a: RewriteArgs) -> Result<(), Failure> {
    let (graph, _) = load(&a.source)?;
    let (out, log) = rewrite_aggressive(&graph, &RewriteConfig::new(a.multiplier)).map_err(Failure::data)?;
    for c in &log.changes {
        eprintln!("{}: {} -> {} ({:?})", c.node_id, c.old_stride, c.new_stride, c.role);
    }
    emit(&a.output, &to_json(&out))
}

fn mode(a: Alignment) -> AlignmentMode {
    match a {
        Alignment::PoolingAlign => AlignmentMode::PoolingAlign,
        Alignment::StageAlign => AlignmentMode::StageAlign,
    }
}

fn plan(a: PlanArgs) -> Result<(), Failure> {
    let teacher = read_graph(&a.teacher)?;
    let student = read_graph(&a.student)?;
    let plan = plan_with_mode(&teacher, &student, mode(a.alignment)).map_err(Failure::data)?;
    eprintln!("{} RED blocks", plan.count());
    emit(&a.output, &plan.to_json())
}

fn grad_check(a: GradCheckArgs) -> Result<(), Failure> {
    let ops: Vec<GradCheckOp> = if a.op == "all" {
        GradCheckOp::ALL.into_iter().filter(|&o| o != GradCheckOp::CorruptedRedBlock).collect()
    } else {
        let names: Vec<&str> = GradCheckOp::ALL.iter().map(|o| o.name()).collect();
        vec![GradCheckOp::parse(&a.op).ok_or_else(|| Failure::usage(format!("unknown op `{}` (expected all, {})", a.op, names.join(", "))))?]
    };
    if a.seeds == 0 {
        return Err(Failure::usage("--seeds must be positive"));
    }
    let mut failed = Vec::new();
    for op in ops {
        let reports: Vec<_> = (0..a.seeds).map(|s| op.run(s, a.tol)).collect();
        let passed = reports.iter().filter(|r| r.passed).count();
        let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0f64, |m, e| if e.is_nan() { e } else { m.max(e) });
        if a.json {
            for r in &reports {
                println!("{}", serde_json::to_string(r).expect("report serializes"));
            }
        }
        println!("{}: {passed}/{} passed, max relative error {worst:.3e} (tol {:.0e})", op.name(), a.seeds, a.tol);
        if passed < reports.len() {
            failed.push(op.name());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::numeric(anyhow::anyhow!("gradient check failed for {}", failed.join(", "))))
    }
}

fn out_file(dir: &Path, name: &str, force: bool) -> Result<fs::File, Failure> {
    let path = dir.join(name);
    refuse_overwrite(&path, force)?;
    fs::File::create(&path).with_context(|| format!("creating {}", path.display())).map_err(Failure::data)
}

fn train_toy(a: TrainToyArgs) -> Result<(), Failure> {
    let ablation: RedAblation = a.ablation.parse().map_err(|e| Failure::usage(format!("{e}")))?;
    let defaults = DistillConfig::default();
    let cfg = DistillConfig {
        alpha: a.alpha,
        distance: match a.distance {
            Distance::Cosine => RedDistance::Cosine,
            Distance::Euclidean => RedDistance::Euclidean,
        },
        use_kd: a.kd,
        kd_temperature: a.kd_temperature,
        alignment: mode(a.alignment),
        ablation,
        re_kernel_size: a.re_kernel_size,
        epochs: a.epochs.unwrap_or(defaults.epochs),
        ..defaults
    };
    cfg.validate().map_err(Failure::usage)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(Failure::data)?;
    }
    let protocol = ToyProtocol {
        teacher_per_class: a.teacher_per_class,
        student_per_class: a.student_per_class,
        test_per_class: a.test_per_class,
        multiplier: a.multiplier,
        seeds: (a.seed..a.seed + a.seeds).collect(),
        ..ToyProtocol::default()
    };
    let exp = protocol.prepare(&cfg)?;
    println!("teacher accuracy {:.4}", exp.teacher_metrics.test_accuracy);
    let mut configs = vec![(ablation.to_string(), cfg.clone())];
    if a.baseline {
        configs.push(("plain".to_string(), DistillConfig::plain().with_schedule_of(&cfg)));
    }
    let groups = paired_runs(&exp, &configs, &protocol.seeds)?;
    for (label, runs) in &groups {
        let per: Vec<String> = runs.iter().map(|r| format!("{:.4}", r.test_accuracy)).collect();
        println!("{label}: mean accuracy {:.4} [{}]", mean_accuracy(runs), per.join(", "));
    }
    if let Some(dir) = &a.out {
        let all: Vec<_> = groups.into_iter().flat_map(|(_, r)| r).collect();
        let mut jsonl = std::io::BufWriter::new(out_file(dir, "metrics.jsonl", a.force)?);
        for r in &all {
            write_jsonl(&mut jsonl, r)?;
        }
        jsonl.flush().map_err(Failure::data)?;
        write_summary_csv(out_file(dir, "summary.csv", a.force)?, &all)?;
    }
    Ok(())
}

const MEMORY_MODELS: [ZooModel; 6] =
    [ZooModel::Resnet18, ZooModel::Resnet50, ZooModel::MobilenetV2, ZooModel::MobilenetV3Small, ZooModel::Resnext18, ZooModel::UnetDdpm];

fn report(table: ReportTable) -> Result<(), Failure> {
    match table {
        ReportTable::Memory { multiplier } => {
            println!("| model | resolution | teacher MB | student x{multiplier} MB | ratio |\n|---|---|---|---|---|");
            for m in MEMORY_MODELS {
                let cfg = m.default_config();
                let teacher = model_zoo(m, &cfg).map_err(Failure::data)?;
                // The U-Net has fewer levels than the classifiers; its student uses x2.
                let mult = if m == ZooModel::UnetDdpm { multiplier.min(2) } else { multiplier };
                let t = trace_with(&teacher, &AccountingOptions::default()).map_err(Failure::data)?;
                let s = trace_with(&student(&teacher, mult)?, &AccountingOptions::default()).map_err(Failure::data)?;
                println!(
                    "| {m} | {} | {:.2} | {:.2} | {:.2} |",
                    cfg.resolution,
                    t.peak_bytes as f64 / MIB,
                    s.peak_bytes as f64 / MIB,
                    t.peak_bytes as f64 / s.peak_bytes as f64
                );
            }
            Ok(())
        }
        ReportTable::Ablation { seeds, epochs } => {
            let cfg = DistillConfig { epochs: epochs.unwrap_or(DistillConfig::default().epochs), ..DistillConfig::default() };
            let protocol = ToyProtocol { seeds: (0..seeds).collect(), ..ToyProtocol::default() };
            let exp = protocol.prepare(&cfg)?;
            let table = ablation_suite(&exp, &protocol.seeds, &cfg)?;
            print!("{}", table.to_markdown());
            Ok(())
        }
        ReportTable::Ddpm { seeds, steps } => {
            let defaults = DdpmConfig::default();
            let cfg = DdpmConfig { seeds: (0..seeds).collect(), student_steps: steps.unwrap_or(defaults.student_steps), ..defaults };
            let r = toy_ddpm_distill(&cfg)?;
            println!("| seed | plain MSE | distilled MSE |\n|---|---|---|");
            for s in &r.seeds {
                println!("| {} | {:.4} | {:.4} |", s.seed, s.plain_mse, s.distilled_mse);
            }
            println!("| mean | {:.4} | {:.4} |", r.mean_plain(), r.mean_distilled());
            println!("teacher MSE {:.4}; peak memory {} -> {} bytes", r.teacher_mse, r.teacher_peak_bytes, r.student_peak_bytes);
            Ok(())
        }
    }
}

fn zoo(a: ZooArgs) -> Result<(), Failure> {
    match &a.model {
        None => {
            for m in ZooModel::ALL {
                println!("{m} (default resolution {})", m.default_config().resolution);
            }
            Ok(())
        }
        Some(name) => emit(&a.output, &to_json(&zoo_graph(name, a.res)?)),
    }
}
