//! `cl-run`: plays a class-incremental scenario on seeded synthetic scenes.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use pyramem::features::SyntheticExtractorConfig;
use pyramem::grid::ResolutionSchedule;
use pyramem::harness::{
    fmt_metric, retention_table, run_scenario, shape_scene, ScenarioConfig, ScenarioSpec,
    StepData,
};
use pyramem::labels::LabelKind;
use pyramem::memory::MemoryStore;
use pyramem::predict::PredictSettings;
use pyramem::{Error, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::build::fmt_threads;
use crate::io;
use crate::predict::fmt_opt;

#[derive(Debug, Args)]
pub struct ClArgs {
    /// Output directory for the retention report.
    #[arg(long)]
    pub out: PathBuf,
    /// Scene edge length; scenes are square.
    #[arg(long, default_value_t = 16)]
    pub res: usize,
    /// Pyramid levels, finest first.
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    /// Class groups per step: comma inside a step, semicolon between steps.
    #[arg(long, default_value = "1,2;3,4;5,6;7,8")]
    pub steps: String,
    /// Total class count; defaults to the largest step class plus one.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Background class id, never stored and never scored.
    #[arg(long, default_value_t = 0)]
    pub background: u8,
    /// Training scenes per step.
    #[arg(long, default_value_t = 2)]
    pub train_per_step: usize,
    /// Held-out scenes per step.
    #[arg(long, default_value_t = 2)]
    pub eval_per_step: usize,
    /// Shapes drawn per scene.
    #[arg(long, default_value_t = 3)]
    pub shapes: usize,
    /// Sample ceiling of the store; additions past it are skipped.
    #[arg(long)]
    pub memory_cap: Option<usize>,
    /// Novelty-sparsification depth of the scenario store.
    #[arg(long, default_value_t = 0)]
    pub n_sp: usize,
    /// Extractor channels on the finest level; each coarser level doubles.
    #[arg(long, default_value_t = 8)]
    pub base_channels: usize,
    /// Beam reduction rate per level.
    #[arg(long, default_value_t = 0.5)]
    pub phi: f64,
    /// Skip message-passing smoothing during evaluation.
    #[arg(long)]
    pub no_mp: bool,
    /// Neighbors per node in the smoothing graph.
    #[arg(long, default_value_t = 16)]
    pub kappa: usize,
    /// Blend weight toward the neighbor consensus.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    /// Evaluate at unit scale only.
    #[arg(long)]
    pub no_tta: bool,
    /// Augmentation scales for evaluation.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.8, 0.9, 1.0])]
    pub scales: Vec<f64>,
    /// Replace an existing, non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

fn parse_steps(text: &str) -> Result<Vec<Vec<u8>>> {
    let mut steps = Vec::new();
    for group in text.split(';') {
        let mut ids = Vec::new();
        for part in group.split(',') {
            let id: u8 = part.trim().parse().map_err(|_| {
                Error::Domain(format!("step class {part:?} is not a class id"))
            })?;
            ids.push(id);
        }
        steps.push(ids);
    }
    Ok(steps)
}

pub fn run(seed: u64, threads: Option<usize>, args: &ClArgs) -> Result<()> {
    let steps = parse_steps(&args.steps)?;
    let max_class = steps
        .iter()
        .flatten()
        .copied()
        .max()
        .ok_or_else(|| Error::Domain("scenario needs at least one step class".into()))?;
    let classes = args.classes.unwrap_or(max_class as usize + 1);
    let spec = ScenarioSpec {
        steps,
        background: args.background,
    };

    let schedule =
        ResolutionSchedule::canonical(2, &[args.res, args.res], args.levels)?;
    let mut store = MemoryStore::new(schedule, LabelKind::Classes(classes), args.n_sp)?;
    store.set_extractor(SyntheticExtractorConfig::doubling(
        seed,
        args.base_channels,
        args.levels,
    ));

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let res = [args.res, args.res];
    let mut data = Vec::with_capacity(spec.steps.len());
    for (i, group) in spec.steps.iter().enumerate() {
        let mut step = StepData {
            train: Vec::new(),
            eval: Vec::new(),
        };
        for j in 0..args.train_per_step {
            let scene = shape_scene(&res, group, classes, args.background, args.shapes, &mut rng)?;
            step.train.push((format!("step{i}_train{j}"), scene.input, scene.gt));
        }
        for _ in 0..args.eval_per_step {
            let scene = shape_scene(&res, group, classes, args.background, args.shapes, &mut rng)?;
            step.eval.push((scene.input, scene.gt));
        }
        data.push(step);
    }

    let config = ScenarioConfig {
        memory_cap: args.memory_cap,
        settings: PredictSettings {
            phi: args.phi,
            mp: !args.no_mp,
            kappa: args.kappa,
            lambda: args.lambda,
            ..PredictSettings::default()
        },
        scales: (!args.no_tta).then(|| args.scales.clone()),
    };

    io::prepare_out_dir(&args.out, args.force)?;
    let report = run_scenario(&spec, &mut store, &data, &config)?;

    let mut matrix = String::new();
    for row in &report.matrix {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        let _ = writeln!(matrix, "{}", cells.join(" "));
    }
    io::write_text(&args.out.join("retention.txt"), &retention_table(&report))?;
    io::write_text(&args.out.join("matrix.txt"), &matrix)?;
    io::write_config(
        &args.out,
        &[
            ("command", "cl-run".into()),
            ("seed", seed.to_string()),
            ("threads", fmt_threads(threads)),
            ("steps", args.steps.clone()),
            ("classes", classes.to_string()),
            ("background", args.background.to_string()),
            ("res", args.res.to_string()),
            ("levels", args.levels.to_string()),
            ("train_per_step", args.train_per_step.to_string()),
            ("eval_per_step", args.eval_per_step.to_string()),
            ("shapes", args.shapes.to_string()),
            ("memory_cap", fmt_opt(args.memory_cap)),
            ("n_sp", args.n_sp.to_string()),
            ("base_channels", args.base_channels.to_string()),
            ("phi", args.phi.to_string()),
            ("mp", (!args.no_mp).to_string()),
            ("kappa", args.kappa.to_string()),
            ("lambda", args.lambda.to_string()),
            (
                "scales",
                match &config.scales {
                    Some(s) => s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
                    None => "1".into(),
                },
            ),
        ],
    )?;
    println!(
        "ran {} steps; retention delta avg {} std {}",
        report.matrix.len(),
        fmt_metric(report.delta_avg),
        fmt_metric(report.delta_std)
    );
    Ok(())
}
