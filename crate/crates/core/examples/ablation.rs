//! Runs the three-mode comparison and prints one line per run.
//!
//! Optional `key=value` arguments override the dataset shape (spread,
//! elongation, rank, mean_rank, outlier_rate) and training (lr, epochs).

use osmcaa::ablation::{run_ablation, AblationConfig};
use osmcaa::Mode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = AblationConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or("expected key=value")?;
        match k {
            "spread" => cfg.synth.cluster_spread = v.parse()?,
            "elongation" => cfg.synth.manifold_elongation = v.parse()?,
            "rank" => cfg.synth.manifold_rank = v.parse()?,
            "mean_rank" => cfg.synth.mean_rank = v.parse()?,
            "outlier_rate" => cfg.synth.outlier_rate = v.parse()?,
            "lr" => cfg.train.lr = v.parse()?,
            "epochs" => cfg.train.epochs = v.parse()?,
            _ => return Err(format!("unknown key {k}").into()),
        }
    }
    cfg.train.eval_every = cfg.train.epochs;
    let report = run_ablation(&cfg, &Mode::ALL)?;
    for r in &report.runs {
        println!(
            "{:<9} seed {} R@1 {:.4} -> {:.4}  mAP {:.4}  gap {:+.4}",
            r.mode.as_str(),
            r.seed,
            r.initial_recall_at_1,
            r.recall_at_1,
            r.map,
            r.outlier_caa_gap
        );
    }
    for mode in Mode::ALL {
        println!(
            "{:<9} mean R@1 {:.4}",
            mode.as_str(),
            report.mean_recall_at_1(mode)
        );
    }
    Ok(())
}
