//! `build-memory`: consolidates labeled samples into a store directory.

use std::path::PathBuf;

use clap::Args;
use pyramem::features::{synth_extract, SyntheticExtractorConfig};
use pyramem::grid::ResolutionSchedule;
use pyramem::labels::{LabelKind, LabelMap};
use pyramem::memory::MemoryStore;
use pyramem::ptns::PtnsFile;
use pyramem::{Error, Result};

use crate::io;

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Output store directory.
    #[arg(long)]
    pub out: PathBuf,
    /// One sample as INPUT,LABELS tensor paths; repeat per sample. Sample
    /// ids come from the input file stems, kept in argument order.
    #[arg(long = "pair", value_name = "INPUT,LABELS", required = true)]
    pub pairs: Vec<String>,
    /// Pyramid levels, finest first.
    #[arg(long, default_value_t = 4)]
    pub levels: usize,
    /// Novelty-sparsification depth applied to stored pyramids.
    #[arg(long, default_value_t = 3)]
    pub n_sp: usize,
    /// Extractor channels on the finest level; each coarser level doubles.
    #[arg(long, default_value_t = 8)]
    pub base_channels: usize,
    /// Box-filter radius applied to inputs before feature lifting.
    #[arg(long, default_value_t = 1)]
    pub smoothing: usize,
    /// Replace an existing, non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

pub fn run(seed: u64, threads: Option<usize>, args: &BuildArgs) -> Result<()> {
    let mut parsed: Vec<(PathBuf, PathBuf)> = Vec::with_capacity(args.pairs.len());
    for pair in &args.pairs {
        let Some((input, labels)) = pair.split_once(',') else {
            return Err(Error::Domain(format!(
                "pair {pair:?} must be INPUT,LABELS"
            )));
        };
        parsed.push((PathBuf::from(input), PathBuf::from(labels)));
    }

    let first = io::read_grid(&parsed[0].0)?;
    let schedule = ResolutionSchedule::canonical(first.res().len(), first.res(), args.levels)?;
    let first_labels = LabelMap::from_ptns(&PtnsFile::read_from(&parsed[0].1)?)?;
    let kind = match first_labels.kind() {
        LabelKind::Classes(c) => LabelKind::Classes(c),
        LabelKind::Scalar => LabelKind::Scalar,
    };

    let mut store = MemoryStore::new(schedule.clone(), kind, args.n_sp)?;
    let mut extractor = SyntheticExtractorConfig::doubling(seed, args.base_channels, args.levels);
    extractor.smoothing_radius = args.smoothing;
    store.set_extractor(extractor.clone());

    for (input_path, label_path) in &parsed {
        let input = io::read_grid(input_path)?;
        let labels = LabelMap::from_ptns(&PtnsFile::read_from(label_path)?)?;
        let id = input_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| {
                Error::Domain(format!("{} has no usable file stem", input_path.display()))
            })?;
        let pyramid = synth_extract(&input, &schedule, &extractor)?;
        store.consolidate_add(&id, &pyramid, &labels, &input_path.display().to_string())?;
    }

    io::prepare_out_dir(&args.out, args.force)?;
    store.save(&args.out)?;
    io::write_config(
        &args.out,
        &[
            ("command", "build-memory".into()),
            ("seed", seed.to_string()),
            ("threads", fmt_threads(threads)),
            ("samples", store.len().to_string()),
            ("levels", args.levels.to_string()),
            ("n_sp", args.n_sp.to_string()),
            ("base_channels", args.base_channels.to_string()),
            ("smoothing", args.smoothing.to_string()),
        ],
    )?;
    println!(
        "stored {} samples into {}",
        store.len(),
        args.out.display()
    );
    Ok(())
}

pub fn fmt_threads(threads: Option<usize>) -> String {
    match threads {
        Some(t) => t.to_string(),
        None => "all".into(),
    }
}
