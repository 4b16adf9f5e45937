//! `predict`: labels a query grid against a store.

use std::path::PathBuf;

use clap::Args;
use pyramem::harness::tta_predict;
use pyramem::memory::MemoryStore;
use pyramem::predict::{predict_input, PredictSettings};
use pyramem::Result;

use crate::build::fmt_threads;
use crate::io;

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Store directory from `build-memory`.
    #[arg(long)]
    pub store: PathBuf,
    /// Query grid tensor file.
    #[arg(long)]
    pub query: PathBuf,
    /// Output directory for `y_q.ptns` and friends.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip message-passing smoothing.
    #[arg(long)]
    pub no_mp: bool,
    /// Predict at unit scale only, no augmentation averaging.
    #[arg(long)]
    pub no_tta: bool,
    /// Leaf-level similarity chunk size.
    #[arg(long)]
    pub chunk: Option<usize>,
    /// Also write the pre-smoothing field and the match index/score panels,
    /// all taken from the unit-scale pass.
    #[arg(long)]
    pub emit_diagnostics: bool,
    /// Beam reduction rate per level.
    #[arg(long, default_value_t = 0.5)]
    pub phi: f64,
    /// Initial beam width; defaults to the store's sample count.
    #[arg(long)]
    pub k_init: Option<usize>,
    /// Neighbors per node in the smoothing graph.
    #[arg(long, default_value_t = 16)]
    pub kappa: usize,
    /// Blend weight toward the neighbor consensus.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Smoothing step ceiling.
    #[arg(long, default_value_t = 32)]
    pub mp_steps: usize,
    /// Convergence threshold on the mean per-node state change.
    #[arg(long, default_value_t = 1e-6)]
    pub mp_tol: f64,
    /// Augmentation scales, each in (0, 1].
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.8, 0.9, 1.0])]
    pub scales: Vec<f64>,
    /// Replace an existing, non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

pub fn run(seed: u64, threads: Option<usize>, args: &PredictArgs) -> Result<()> {
    let store = MemoryStore::load(&args.store)?;
    let query = io::read_grid(&args.query)?;
    let settings = PredictSettings {
        phi: args.phi,
        k_init: args.k_init,
        mp: !args.no_mp,
        kappa: args.kappa,
        lambda: args.lambda,
        mp_steps: args.mp_steps,
        mp_tol: args.mp_tol,
        chunk: args.chunk,
    };
    io::prepare_out_dir(&args.out, args.force)?;

    let labels = if args.no_tta {
        let pred = predict_input(&store, &query, &settings)?;
        if args.emit_diagnostics {
            pred.raw.to_ptns().write_to(&args.out.join("y_raw.ptns"))?;
            io::write_grid(&args.out.join("idx.ptns"), &pred.idx)?;
            io::write_grid(&args.out.join("sim.ptns"), &pred.sim)?;
        }
        pred.labels
    } else {
        let labels = tta_predict(&store, &query, &args.scales, &settings)?;
        if args.emit_diagnostics {
            let unit = predict_input(&store, &query, &settings)?;
            unit.raw.to_ptns().write_to(&args.out.join("y_raw.ptns"))?;
            io::write_grid(&args.out.join("idx.ptns"), &unit.idx)?;
            io::write_grid(&args.out.join("sim.ptns"), &unit.sim)?;
        }
        labels
    };
    labels.to_ptns().write_to(&args.out.join("y_q.ptns"))?;

    let scales_echo = if args.no_tta {
        "1".to_string()
    } else {
        args.scales
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    io::write_config(
        &args.out,
        &[
            ("command", "predict".into()),
            ("seed", seed.to_string()),
            ("threads", fmt_threads(threads)),
            ("store", args.store.display().to_string()),
            ("query", args.query.display().to_string()),
            ("phi", args.phi.to_string()),
            ("k_init", fmt_opt(args.k_init)),
            ("mp", (!args.no_mp).to_string()),
            ("kappa", args.kappa.to_string()),
            ("lambda", args.lambda.to_string()),
            ("mp_steps", args.mp_steps.to_string()),
            ("mp_tol", args.mp_tol.to_string()),
            ("scales", scales_echo),
            ("chunk", fmt_opt(args.chunk)),
            ("emit_diagnostics", args.emit_diagnostics.to_string()),
        ],
    )?;
    println!("wrote {}", args.out.join("y_q.ptns").display());
    Ok(())
}

pub fn fmt_opt(value: Option<usize>) -> String {
    match value {
        Some(v) => v.to_string(),
        None => "default".into(),
    }
}
