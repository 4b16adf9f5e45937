//! `eval`: scores a prediction file against ground truth.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use pyramem::harness::{fmt_metric, miou, rmse_depth};
use pyramem::labels::{LabelKind, LabelMap};
use pyramem::ptns::PtnsFile;
use pyramem::{Error, Result};

use crate::build::fmt_threads;
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    /// Class overlap, micro-averaged intersection over union.
    Seg,
    /// Scalar error, root mean square over both-valid nodes.
    Depth,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted label tensor file.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth label tensor file.
    #[arg(long)]
    pub gt: PathBuf,
    /// Metric family to score.
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Output directory for `metrics.txt`.
    #[arg(long)]
    pub out: PathBuf,
    /// Classes to score; defaults to every class the ground truth can hold.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<u8>>,
    /// Replace an existing, non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

pub fn run(seed: u64, threads: Option<usize>, args: &EvalArgs) -> Result<()> {
    let pred = LabelMap::from_ptns(&PtnsFile::read_from(&args.pred)?)?;
    let gt = LabelMap::from_ptns(&PtnsFile::read_from(&args.gt)?)?;
    if pred.res() != gt.res() {
        return Err(Error::Domain(format!(
            "prediction grid {:?} does not match ground truth {:?}",
            pred.res(),
            gt.res()
        )));
    }

    let (metric, value) = match args.task {
        TaskArg::Seg => {
            let classes = match &args.classes {
                Some(c) => c.clone(),
                None => match gt.kind() {
                    LabelKind::Classes(c) => (0..c as u8).collect(),
                    LabelKind::Scalar => {
                        return Err(Error::Domain(
                            "segmentation scoring needs class-labeled ground truth".into(),
                        ))
                    }
                },
            };
            ("miou", miou(&pred, &gt, &classes, None)?)
        }
        TaskArg::Depth => ("rmse", rmse_depth(&pred, &gt, None)?),
    };

    io::prepare_out_dir(&args.out, args.force)?;
    io::write_text(
        &args.out.join("metrics.txt"),
        &pyramem::harness::kv_lines(&[
            ("task", format!("{:?}", args.task).to_lowercase()),
            (metric, fmt_metric(value)),
            ("nodes", gt.node_count().to_string()),
            ("gt_valid", gt.valid_count().to_string()),
        ]),
    )?;
    io::write_config(
        &args.out,
        &[
            ("command", "eval".into()),
            ("seed", seed.to_string()),
            ("threads", fmt_threads(threads)),
            ("pred", args.pred.display().to_string()),
            ("gt", args.gt.display().to_string()),
            ("task", format!("{:?}", args.task).to_lowercase()),
        ],
    )?;
    println!("{metric} {}", fmt_metric(value));
    Ok(())
}
