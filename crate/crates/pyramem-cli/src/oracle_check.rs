//! `oracle-check`: compares the hierarchical search against exhaustive
//! chain scoring on real stores.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use pyramem::features::synth_extract;
use pyramem::memory::MemoryStore;
use pyramem::oracle::{exhaustive_oracle, OracleConfig};
use pyramem::search::{hierarchical_search, SearchConfig, WindowMode};
use pyramem::{Error, Result};

use crate::build::fmt_threads;
use crate::io;
use crate::predict::fmt_opt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WindowArg {
    /// Children of the matched parents only.
    Hierarchy,
    /// Every node of the level.
    FullLevel,
}

impl From<WindowArg> for WindowMode {
    fn from(arg: WindowArg) -> WindowMode {
        match arg {
            WindowArg::Hierarchy => WindowMode::Hierarchy,
            WindowArg::FullLevel => WindowMode::FullLevel,
        }
    }
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Store directory from `build-memory`.
    #[arg(long)]
    pub store: PathBuf,
    /// Query grid tensor file; repeat for more queries.
    #[arg(long = "query", required = true)]
    pub queries: Vec<PathBuf>,
    /// Oracle matches per leaf.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Beam reduction rate; 1 keeps the beam width.
    #[arg(long, default_value_t = 1.0)]
    pub phi: f64,
    /// Initial beam width; defaults to the full candidate set, which makes
    /// the default run an exact-match check.
    #[arg(long)]
    pub k_init: Option<usize>,
    /// Candidate window relation, applied to both sides.
    #[arg(long, value_enum, default_value_t = WindowArg::Hierarchy)]
    pub window: WindowArg,
    /// Work ceiling for exhaustive scoring; larger instances are refused.
    #[arg(long, default_value_t = 1 << 26)]
    pub max_work: u64,
    /// Leaf-level similarity chunk size for the search side.
    #[arg(long)]
    pub chunk: Option<usize>,
    /// Exit with a validation failure unless every leaf matches exactly.
    #[arg(long)]
    pub expect_exact: bool,
    /// Output directory for `report.txt`.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing, non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

pub fn run(seed: u64, threads: Option<usize>, args: &OracleArgs) -> Result<()> {
    let store = MemoryStore::load(&args.store)?;
    let schedule = store.schedule().clone();
    let extractor = store
        .extractor()
        .cloned()
        .ok_or_else(|| Error::Domain("store records no extractor; queries cannot be lifted".into()))?;
    let k_init = args
        .k_init
        .unwrap_or_else(|| store.len().max(1) * schedule.node_count(1));
    let window = WindowMode::from(args.window);
    io::prepare_out_dir(&args.out, args.force)?;

    let mut report = String::new();
    let mut total_mismatched = 0usize;
    let mut total_leaves = 0usize;
    let mut hit_sum = 0.0f64;
    for query_path in &args.queries {
        let input = io::read_grid(query_path)?;
        let pyramid = synth_extract(&input, &schedule, &extractor)?;
        let oracle = exhaustive_oracle(
            &pyramid,
            &store,
            args.k,
            &OracleConfig {
                window,
                max_work: args.max_work,
            },
        )?;
        let searched = hierarchical_search(
            &pyramid,
            &store,
            &SearchConfig {
                phi: args.phi,
                k_init: Some(k_init),
                window,
                chunk: args.chunk,
            },
        )?;
        let leaves = schedule.node_count(1);
        let mut mismatched = 0usize;
        let mut hits = 0usize;
        for v in 0..leaves {
            let want = oracle.matches(v);
            let got = searched.matches(v);
            if got.len() < want.len() || &got[..want.len()] != want {
                mismatched += 1;
            }
            if let (Some(x), Some(y)) = (got.first(), want.first()) {
                hits += usize::from((x.sample, x.node) == (y.sample, y.node));
            }
        }
        let recall = hits as f64 / leaves as f64;
        let _ = writeln!(
            report,
            "query {} leaves {leaves} mismatches {mismatched} recall@1 {recall:.6}",
            query_path.display()
        );
        total_mismatched += mismatched;
        total_leaves += leaves;
        hit_sum += recall;
    }
    let verdict = if total_mismatched == 0 { "PASS" } else { "FAIL" };
    let mean_recall = hit_sum / args.queries.len() as f64;
    let _ = writeln!(
        report,
        "exact-match {verdict} mismatches {total_mismatched}/{total_leaves} mean-recall@1 {mean_recall:.6}"
    );
    io::write_text(&args.out.join("report.txt"), &report)?;
    io::write_config(
        &args.out,
        &[
            ("command", "oracle-check".into()),
            ("seed", seed.to_string()),
            ("threads", fmt_threads(threads)),
            ("store", args.store.display().to_string()),
            ("queries", args.queries.len().to_string()),
            ("k", args.k.to_string()),
            ("phi", args.phi.to_string()),
            ("k_init", fmt_opt(args.k_init)),
            ("window", format!("{:?}", args.window).to_lowercase()),
            ("max_work", args.max_work.to_string()),
            ("chunk", fmt_opt(args.chunk)),
        ],
    )?;
    print!("{report}");
    if args.expect_exact && total_mismatched > 0 {
        return Err(Error::Domain(format!(
            "{total_mismatched} of {total_leaves} leaves disagree with the oracle"
        )));
    }
    Ok(())
}
