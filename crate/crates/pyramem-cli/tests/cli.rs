//! End-to-end runs of the `pyramem` binary against tensor files on disk.

use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use pyramem::grid::ResolutionSchedule;
use pyramem::labels::{LabelKind, LabelMap};
use pyramem::memory::MemoryStore;
use pyramem::ptns::{PtnsFile, PtnsLevel, PtnsPayload};

fn pyramem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pyramem"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_grid_file(path: &Path, res: &[usize], channels: usize, seed: u64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let count = res.iter().product::<usize>() * channels;
    let data: Vec<f32> = (0..count).map(|_| rng.gen_range(0.0..1.0)).collect();
    let file = PtnsFile {
        dim: res.len() as u8,
        levels: vec![PtnsLevel {
            res: res.iter().map(|&r| r as u32).collect(),
            channels: channels as u32,
            retained: None,
            payload: PtnsPayload::F32(data),
        }],
    };
    file.write_to(path).unwrap();
}

fn write_class_labels(path: &Path, res: &[usize], classes: usize, seed: u64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let idx = (0..res.iter().product::<usize>())
        .map(|_| rng.gen_range(0..classes) as u8)
        .collect();
    LabelMap::classes(res.to_vec(), classes, idx)
        .unwrap()
        .to_ptns()
        .write_to(path)
        .unwrap();
}

fn write_scalar_labels(path: &Path, res: &[usize], seed: u64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let values = (0..res.iter().product::<usize>())
        .map(|_| rng.gen_range(0.0..4.0))
        .collect();
    LabelMap::scalar(res.to_vec(), values)
        .unwrap()
        .to_ptns()
        .write_to(path)
        .unwrap();
}

/// Two sample pairs on an 8x8 grid, ready for `build-memory`.
fn seg_fixture(dir: &Path) -> Vec<String> {
    let res = [8usize, 8];
    let mut pairs = Vec::new();
    for i in 0..2u64 {
        let input = dir.join(format!("scene{i}.ptns"));
        let labels = dir.join(format!("scene{i}.lab.ptns"));
        write_grid_file(&input, &res, 3, 10 + i);
        write_class_labels(&labels, &res, 3, 20 + i);
        pairs.push(format!("{},{}", input.display(), labels.display()));
    }
    pairs
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn build_memory_rebuilds_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = seg_fixture(tmp.path());
    let out1 = tmp.path().join("store1");
    let out2 = tmp.path().join("store2");
    for out in [&out1, &out2] {
        let out = out.display().to_string();
        let mut args = vec!["build-memory", "--seed", "9", "--out", &out];
        for p in &pairs {
            args.extend(["--pair", p]);
        }
        assert_code(&pyramem(&args), 0);
    }
    assert_eq!(dir_bytes(&out1), dir_bytes(&out2));
    let manifest = std::fs::read_to_string(out1.join("manifest.txt")).unwrap();
    let scene0 = manifest.find("sample scene0").unwrap();
    let scene1 = manifest.find("sample scene1").unwrap();
    assert!(scene0 < scene1, "manifest lost the argument order");
}

#[test]
fn output_dirs_are_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = seg_fixture(tmp.path());
    let out = tmp.path().join("store").display().to_string();
    let mut args = vec!["build-memory", "--out", &out];
    for p in &pairs {
        args.extend(["--pair", p]);
    }
    assert_code(&pyramem(&args), 0);
    let second = pyramem(&args);
    assert_code(&second, 1);
    assert!(String::from_utf8_lossy(&second.stderr).contains("--force"));
    let mut forced = args.clone();
    forced.push("--force");
    assert_code(&pyramem(&forced), 0);
}

#[test]
fn self_query_predicts_stored_labels_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = seg_fixture(tmp.path());
    let store = tmp.path().join("store").display().to_string();
    let mut args = vec!["build-memory", "--n-sp", "0", "--out", &store];
    for p in &pairs {
        args.extend(["--pair", p]);
    }
    assert_code(&pyramem(&args), 0);

    let out = tmp.path().join("pred");
    let query = tmp.path().join("scene0.ptns").display().to_string();
    let out_s = out.display().to_string();
    assert_code(
        &pyramem(&[
            "predict", "--store", &store, "--query", &query, "--out", &out_s, "--no-mp",
            "--no-tta",
        ]),
        0,
    );
    let pred = LabelMap::from_ptns(&PtnsFile::read_from(&out.join("y_q.ptns")).unwrap()).unwrap();
    let gt =
        LabelMap::from_ptns(&PtnsFile::read_from(&tmp.path().join("scene0.lab.ptns")).unwrap())
            .unwrap();
    let score = pyramem::harness::miou(&pred, &gt, &[0, 1, 2], None).unwrap();
    assert_eq!(score, 1.0);
}

#[test]
fn chunk_and_thread_count_leave_predictions_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = seg_fixture(tmp.path());
    let store = tmp.path().join("store").display().to_string();
    let mut args = vec!["build-memory", "--out", &store];
    for p in &pairs {
        args.extend(["--pair", p]);
    }
    assert_code(&pyramem(&args), 0);
    let query = tmp.path().join("query.ptns");
    write_grid_file(&query, &[8, 8], 3, 77);
    let query_s = query.display().to_string();

    let mut bytes = Vec::new();
    for (tag, extra) in [
        ("plain", vec![]),
        ("chunk1", vec!["--chunk", "1"]),
        ("chunk64", vec!["--chunk", "64"]),
        ("threads1", vec!["--threads", "1"]),
    ] {
        let out = tmp.path().join(tag);
        let out_s = out.display().to_string();
        let mut run = vec!["predict", "--store", &store, "--query", &query_s, "--out", &out_s];
        run.extend(extra);
        assert_code(&pyramem(&run), 0);
        bytes.push(std::fs::read(out.join("y_q.ptns")).unwrap());
    }
    for b in &bytes[1..] {
        assert_eq!(b, &bytes[0], "prediction bytes drifted");
    }
}

#[test]
fn predict_emits_diagnostics_on_request() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = seg_fixture(tmp.path());
    let store = tmp.path().join("store").display().to_string();
    let mut args = vec!["build-memory", "--out", &store];
    for p in &pairs {
        args.extend(["--pair", p]);
    }
    assert_code(&pyramem(&args), 0);
    let out = tmp.path().join("pred");
    let query = tmp.path().join("scene1.ptns").display().to_string();
    let out_s = out.display().to_string();
    assert_code(
        &pyramem(&[
            "predict", "--store", &store, "--query", &query, "--out", &out_s,
            "--emit-diagnostics",
        ]),
        0,
    );
    for name in ["y_q.ptns", "y_raw.ptns", "idx.ptns", "sim.ptns", "config.txt"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn empty_store_is_a_validation_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let schedule = ResolutionSchedule::canonical(2, &[8, 8], 3).unwrap();
    let mut store = MemoryStore::new(schedule, LabelKind::Classes(3), 0).unwrap();
    store.set_extractor(pyramem::features::SyntheticExtractorConfig::doubling(0, 4, 3));
    let store_dir = tmp.path().join("empty");
    store.save(&store_dir).unwrap();
    let query = tmp.path().join("query.ptns");
    write_grid_file(&query, &[8, 8], 3, 5);
    let out = pyramem(&[
        "predict",
        "--store",
        &store_dir.display().to_string(),
        "--query",
        &query.display().to_string(),
        "--out",
        &tmp.path().join("pred").display().to_string(),
    ]);
    assert_code(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn oracle_check_reports_and_guards() {
    let tmp = tempfile::tempdir().unwrap();
    let pairs = seg_fixture(tmp.path());
    let store = tmp.path().join("store").display().to_string();
    let mut args = vec!["build-memory", "--levels", "3", "--n-sp", "0", "--out", &store];
    for p in &pairs {
        args.extend(["--pair", p]);
    }
    assert_code(&pyramem(&args), 0);
    let query = tmp.path().join("query.ptns");
    write_grid_file(&query, &[8, 8], 3, 31);
    let query_s = query.display().to_string();

    let exact_out = tmp.path().join("exact");
    let exact_s = exact_out.display().to_string();
    let exact = pyramem(&[
        "oracle-check", "--store", &store, "--query", &query_s, "--k", "4", "--out", &exact_s,
        "--expect-exact",
    ]);
    assert_code(&exact, 0);
    let report = std::fs::read_to_string(exact_out.join("report.txt")).unwrap();
    assert!(report.contains("exact-match PASS"), "report: {report}");

    let pruned_out = tmp.path().join("pruned").display().to_string();
    let pruned = pyramem(&[
        "oracle-check", "--store", &store, "--query", &query_s, "--k", "1", "--phi", "0.5",
        "--k-init", "2", "--out", &pruned_out,
    ]);
    assert_code(&pruned, 0);
    assert!(String::from_utf8_lossy(&pruned.stdout).contains("recall@1"));

    let guarded = pyramem(&[
        "oracle-check", "--store", &store, "--query", &query_s, "--k", "4", "--max-work", "1",
        "--out", &tmp.path().join("guarded").display().to_string(),
    ]);
    assert_code(&guarded, 1);
    assert!(String::from_utf8_lossy(&guarded.stderr).contains("size guard"));
}

#[test]
fn eval_scores_and_rejects_mismatched_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt.ptns");
    write_class_labels(&gt, &[8, 8], 3, 3);
    let gt_s = gt.display().to_string();
    let seg_out = tmp.path().join("seg");
    let seg = pyramem(&[
        "eval", "--pred", &gt_s, "--gt", &gt_s, "--task", "seg", "--out",
        &seg_out.display().to_string(),
    ]);
    assert_code(&seg, 0);
    let metrics = std::fs::read_to_string(seg_out.join("metrics.txt")).unwrap();
    assert!(metrics.contains("miou 1.000000"), "metrics: {metrics}");

    let depth_gt = tmp.path().join("depth.ptns");
    write_scalar_labels(&depth_gt, &[8, 8], 4);
    let depth_s = depth_gt.display().to_string();
    let depth = pyramem(&[
        "eval", "--pred", &depth_s, "--gt", &depth_s, "--task", "depth", "--out",
        &tmp.path().join("depth_out").display().to_string(),
    ]);
    assert_code(&depth, 0);
    assert!(String::from_utf8_lossy(&depth.stdout).contains("rmse 0.000000"));

    let small = tmp.path().join("small.ptns");
    write_class_labels(&small, &[4, 4], 3, 3);
    let mismatch = pyramem(&[
        "eval", "--pred", &small.display().to_string(), "--gt", &gt_s, "--task", "seg", "--out",
        &tmp.path().join("bad").display().to_string(),
    ]);
    assert_code(&mismatch, 1);
}

#[test]
fn cl_run_is_deterministic_and_handles_one_step() {
    let tmp = tempfile::tempdir().unwrap();
    let base: Vec<String> = [
        "cl-run", "--seed", "7", "--res", "8", "--levels", "2", "--steps", "1,2;3,4",
        "--train-per-step", "1", "--eval-per-step", "1", "--shapes", "2", "--kappa", "4",
        "--no-tta",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = tmp.path().join(format!("run{run}"));
        let mut args: Vec<String> = base.clone();
        args.extend(["--out".to_string(), out.display().to_string()]);
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        assert_code(&pyramem(&argv), 0);
        outputs.push((
            std::fs::read(out.join("retention.txt")).unwrap(),
            std::fs::read(out.join("matrix.txt")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1], "rerun drifted");

    let single = tmp.path().join("single");
    let single_run = pyramem(&[
        "cl-run", "--seed", "7", "--res", "8", "--levels", "2", "--steps", "1,2",
        "--train-per-step", "1", "--eval-per-step", "1", "--shapes", "2", "--kappa", "4",
        "--no-tta", "--out", &single.display().to_string(),
    ]);
    assert_code(&single_run, 0);
    let table = std::fs::read_to_string(single.join("retention.txt")).unwrap();
    assert!(table.contains("delta_avg no-data"), "table: {table}");
}

#[test]
fn unknown_flags_are_validation_failures() {
    let out = pyramem(&["predict", "--no-such-flag"]);
    assert_code(&out, 1);
    let help = pyramem(&["--help"]);
    assert_code(&help, 0);
}
