use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qdiff::metrics::REPORT_CSV_HEADER;
use qdiff::patch::{read_patchset, write_patchset, PatchSet};
use qdiff::toy::{random_mlp, random_patchset, BoundaryToy};

fn qdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qdiff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Boundary model, its int8 version and the pinned seeds in `dir`, plus a
/// config running `optimizer` over the first four seeds.
fn setup(dir: &Path, optimizer: &str) -> PathBuf {
    BoundaryToy::model().save(dir.join("model.json")).unwrap();
    write_patchset(&BoundaryToy::pinned_seeds(), dir.join("seeds.patches")).unwrap();
    ok(&qdiff(&[
        "--out",
        s(dir),
        "quantize",
        "--model",
        s(&dir.join("model.json")),
    ]));
    let config = dir.join("run.toml");
    fs::write(
        &config,
        format!(
            "[subjects]\nmodel = \"model.json\"\nquantized_model = \"quantized.json\"\npatches = \"seeds.patches\"\n\
             [session]\noptimizer = \"{optimizer}\"\nmax_seeds = 4\ntiming = \"virtual\"\noffload_threshold = 200\n"
        ),
    )
    .unwrap();
    config
}

#[test]
fn run_decode_replay_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = setup(d, "ga");
    ok(&qdiff(&["--seed", "3", "--out", s(d), "run", s(&config)]));
    assert!(d.join("report.json").exists());
    let dii = d.join("dii.bin");
    assert!(dii.exists(), "the boundary seeds should give some DIIs");
    let out = qdiff(&[
        "--out",
        s(d),
        "decode",
        "--dii",
        s(&dii),
        "--patches",
        s(&d.join("seeds.patches")),
        "--model",
        s(&d.join("model.json")),
        "--quantized-model",
        s(&d.join("quantized.json")),
    ]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("replay: all"));
    let decoded = read_patchset(d.join("decoded.patches")).unwrap();
    assert!(!decoded.is_empty());

    // Decoding again gives the same bytes.
    let first = fs::read(d.join("decoded.patches")).unwrap();
    ok(&qdiff(&[
        "--out",
        s(d),
        "decode",
        "--dii",
        s(&dii),
        "--patches",
        s(&d.join("seeds.patches")),
    ]));
    assert_eq!(first, fs::read(d.join("decoded.patches")).unwrap());
}

#[test]
fn fixed_seed_gives_identical_files_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = setup(d, "pso");
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = d.join(format!("t{threads}"));
        ok(&qdiff(&[
            "--seed",
            "9",
            "--threads",
            threads,
            "--out",
            s(&out),
            "run",
            s(&config),
        ]));
        outputs.push((
            fs::read(out.join("report.json")).unwrap(),
            fs::read(out.join("dii.bin")).unwrap_or_default(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn malformed_config_exits_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = setup(d, "pso");
    let text = fs::read_to_string(&config).unwrap() + "\n[session.pso]\ninertia = \"high\"\n";
    fs::write(&config, text).unwrap();
    let out = qdiff(&["--out", s(d), "run", s(&config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("session.pso.inertia"));

    fs::write(&config, "[subjects]\nmodel = \"m\"\nquantized_model = \"q\"\npatches = \"p\"\n[session]\npopulation = 0\n").unwrap();
    assert_eq!(qdiff(&["run", s(&config)]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = setup(d, "pso");
    fs::write(d.join("model.json"), "{ not json").unwrap();
    assert_eq!(
        qdiff(&["--out", s(d), "run", s(&config)]).status.code(),
        Some(1)
    );
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let dims = BoundaryToy::DIMS;
    random_mlp(dims, 4, 3, 1)
        .unwrap()
        .save(d.join("mlp.json"))
        .unwrap();
    write_patchset(&random_patchset(dims, 5, 2, None), d.join("p.patches")).unwrap();
    let empty = PatchSet::new(Vec::new(), "empty").unwrap();
    fs::write(
        d.join("empty.patches"),
        empty.to_bytes_with_dims(dims).unwrap(),
    )
    .unwrap();
    let model = d.join("mlp.json");
    let patches = d.join("p.patches");

    let full = qdiff(&[
        "--out",
        s(d),
        "quantize",
        "--model",
        s(&model),
        "--mode",
        "full",
    ]);
    assert_eq!(full.status.code(), Some(2));
    let tune = qdiff(&[
        "--out",
        s(d),
        "tune",
        "--patches",
        s(&patches),
        "--budget",
        "99",
    ]);
    assert_eq!(tune.status.code(), Some(2));
    assert_eq!(qdiff(&["report"]).status.code(), Some(2));
    assert_eq!(
        qdiff(&["--threads", "0", "report", "x.json"]).status.code(),
        Some(2)
    );
    let prof = qdiff(&[
        "--out",
        s(d),
        "profile",
        "--model",
        s(&model),
        "--patches",
        s(&d.join("empty.patches")),
    ]);
    assert_eq!(prof.status.code(), Some(2));
}

#[test]
fn quantize_and_profile_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let dims = BoundaryToy::DIMS;
    random_mlp(dims, 4, 3, 1)
        .unwrap()
        .save(d.join("mlp.json"))
        .unwrap();
    write_patchset(&random_patchset(dims, 6, 2, None), d.join("p.patches")).unwrap();
    let model = d.join("mlp.json");
    let patches = d.join("p.patches");
    let mut files = Vec::new();
    for _ in 0..2 {
        ok(&qdiff(&[
            "--out",
            s(d),
            "quantize",
            "--model",
            s(&model),
            "--mode",
            "full",
            "--calibration",
            s(&patches),
        ]));
        ok(&qdiff(&[
            "--out",
            s(d),
            "profile",
            "--model",
            s(&model),
            "--patches",
            s(&patches),
        ]));
        files.push((
            fs::read(d.join("quantized.json")).unwrap(),
            fs::read(d.join("intervals.json")).unwrap(),
        ));
    }
    assert_eq!(files[0], files[1]);
    let q = qdiff::quant::QuantizedModel::load(d.join("quantized.json")).unwrap();
    let net = q.compile().unwrap();
    let p = read_patchset(&patches).unwrap();
    assert_eq!(net.forward(&p.patches[0]).unwrap().logits.len(), 3);
    let intervals = qdiff::nn::NeuronIntervals::load(d.join("intervals.json")).unwrap();
    assert_eq!(intervals.k, 10);
}

#[test]
fn tune_writes_bounds_and_audit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let patches = d.join("p.patches");
    write_patchset(&random_patchset(BoundaryToy::DIMS, 4, 5, None), &patches).unwrap();
    let args = [
        "--seed",
        "2",
        "--out",
        s(d),
        "tune",
        "--patches",
        s(&patches),
        "--budget",
        "100",
        "--families",
        "gaussian_noise,band_loss",
    ];
    ok(&qdiff(&args));
    let audit = fs::read_to_string(d.join("tune_audit.csv")).unwrap();
    let bounds = fs::read(d.join("bounds.json")).unwrap();
    ok(&qdiff(&args));
    assert_eq!(audit, fs::read_to_string(d.join("tune_audit.csv")).unwrap());
    assert_eq!(bounds, fs::read(d.join("bounds.json")).unwrap());
    let rows: Vec<&str> = audit.lines().skip(1).collect();
    assert!(rows.iter().any(|r| r.starts_with("gaussian_noise,")));
    assert!(rows.iter().any(|r| r.starts_with("band_loss,")));
    assert!(rows
        .iter()
        .all(|r| r.starts_with("gaussian_noise,") || r.starts_with("band_loss,")));
}

#[test]
fn empty_dii_file_decodes_to_empty_set() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_patchset(&BoundaryToy::pinned_seeds(), d.join("seeds.patches")).unwrap();
    fs::write(d.join("empty.bin"), b"DVGDIIV1").unwrap();
    let out = qdiff(&[
        "--out",
        s(d),
        "decode",
        "--dii",
        s(&d.join("empty.bin")),
        "--patches",
        s(&d.join("seeds.patches")),
    ]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    assert!(read_patchset(d.join("decoded.patches")).unwrap().is_empty());
}

#[test]
fn report_csv_header_and_pairwise_section() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = setup(d, "random");
    ok(&qdiff(&[
        "--seed",
        "1",
        "--out",
        s(&d.join("a")),
        "run",
        s(&config),
    ]));
    let single = qdiff(&["--out", s(d), "report", s(&d.join("a/report.json"))]);
    ok(&single);
    let text = String::from_utf8_lossy(&single.stdout).into_owned();
    assert!(!text.contains("pairwise"), "{text}");
    let csv = fs::read_to_string(d.join("report.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "config,seed,patch_indices,generations,generated,valid,dii,dir_percent,vr_percent,fdi_seconds,wall_seconds,final_best_fitness"
    );
    assert_eq!(csv.lines().next().unwrap(), REPORT_CSV_HEADER);
    assert_eq!(csv.lines().count(), 5);

    // The same report under two names: identical per-seed DiR, A12 = 0.5.
    fs::copy(d.join("a/report.json"), d.join("twin.json")).unwrap();
    let pair = qdiff(&[
        "--out",
        s(d),
        "report",
        s(&d.join("a/report.json")),
        s(&d.join("twin.json")),
    ]);
    ok(&pair);
    let text = String::from_utf8_lossy(&pair.stdout).into_owned();
    assert!(text.contains("pairwise"), "{text}");
    assert!(
        text.contains("report vs twin: A12 0.5000 (negligible)"),
        "{text}"
    );
    assert_eq!(fs::read_to_string(d.join("report.txt")).unwrap(), text);
}
