use ctxdet::config::ExperimentConfig;
use ctxdet::detector::Variant;
use ctxdet::runner::finetune_and_eval;
use ctxdet::synthdata::default_benchmark;
use ctxdet::tensor::load_checkpoint;
use std::time::Instant;

fn main() {
    let bench = default_benchmark();
    let cfg = ExperimentConfig::default();
    let dcfg = cfg.detector();
    let source = load_checkpoint::<f32>(std::path::Path::new("/tmp/pre/checkpoint.ckpt")).unwrap();
    let variants = [
        Variant::Baseline,
        Variant::SourceOnly,
        Variant::TransformerOnly,
        Variant::Full,
        Variant::UnloadAtTest,
    ];
    for variant in variants {
        let mut maps = Vec::new();
        let t0 = Instant::now();
        for trial in 1..=2u64 {
            let (_, _, report) =
                finetune_and_eval(&cfg, &bench, &dcfg, &source, variant, 5, trial).unwrap();
            maps.push(report.map);
        }
        println!(
            "{:<18} trials {:?} mean {:.4}  ({:.1}s)",
            variant.name(),
            maps.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>(),
            maps.iter().sum::<f64>() / maps.len() as f64,
            t0.elapsed().as_secs_f64()
        );
    }
}
