//! `train → sample → evaluate` determinism and the `dive` binary.

use std::process::Command;

use dive_core::backbone::BackboneConfig;
use dive_core::flow::GuidanceSpec;
use dive_core::GridDims;
use dive_harness::config::Config;
use dive_harness::dataset::{dataset_read, dataset_write};
use dive_harness::eval::{evaluate, generate, oracle_targets, Conditioning, EvalReport, SampleJob};
use dive_harness::metrics::{from_csv, MetricsRow};
use dive_harness::train::{build_dataset, held_out_scenes, new_model, train, Corpus};
use dive_harness::world::{BUCKETS, CHANNELS, FRAMES, VIEWS};

fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.model = BackboneConfig {
        d_model: 8,
        n_heads: 2,
        n_blocks: 2,
        sketch_cells: 1,
        mlp_hidden: 16,
        ..BackboneConfig::default()
    };
    cfg.data.train_scenes = 6;
    cfg.train.phase1_steps = 4;
    cfg.train.phase2_steps = 3;
    cfg.train.phase3_steps = 3;
    cfg
}

fn run_pipeline(threads: usize) -> (EvalReport, MetricsRow) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let cfg = small_config();
        let corpus = Corpus::new(&build_dataset(&cfg), &BUCKETS).unwrap();
        let mut model = new_model(&cfg.model, cfg.seed).unwrap();
        train(&mut model, &corpus, &cfg.train, FRAMES, cfg.seed, &mut |_| {}).unwrap();
        let scenes = held_out_scenes(cfg.seed, 5);
        let dims = GridDims::new(VIEWS, 2, 8, 14, CHANNELS);
        let job = SampleJob {
            encoder_model: &model,
            field: &model,
            spec: GuidanceSpec::extended(2.0),
            steps: 3,
            schedule: None,
            dims,
            seed: cfg.seed,
        };
        let samples = generate(&job, &scenes, Conditioning::Full).unwrap();
        let nfe = samples[0].1;
        let grids: Vec<_> = samples.into_iter().map(|s| s.0).collect();
        let report = evaluate(&grids, &oracle_targets(&scenes, dims)).unwrap();
        let mut row = MetricsRow::new("eval", &cfg.hash(), "extended", cfg.seed);
        row.scenes = scenes.len();
        row.nfe = nfe;
        row.sample_mse = Some(report.mean);
        (report, row)
    })
}

#[test]
fn pipeline_is_identical_across_worker_counts() {
    let one = run_pipeline(1);
    assert_eq!(one, run_pipeline(1));
    assert_eq!(one, run_pipeline(3));
    assert_eq!(one.1.nfe, 6);
}

#[test]
fn dataset_files_round_trip() {
    let cfg = small_config();
    let records = build_dataset(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.divk");
    dataset_write(&path, &records).unwrap();
    assert_eq!(dataset_read(&path).unwrap(), records);
}

fn dive(dir: &std::path::Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dive")).current_dir(dir).env_remove("DIVE_SEED").args(args).output().unwrap()
}

#[test]
fn cli_commands() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.toml"),
        "[model]\nd_model = 8\nn_heads = 2\nn_blocks = 1\nsketch_cells = 1\nmlp_hidden = 8\n\
         [data]\ntrain_scenes = 4\neval_scenes = 1\nframes = 2\nheight = 8\nwidth = 14\n\
         [train]\nphase1_steps = 2\nphase2_steps = 2\nphase3_steps = 0\n\
         [distill]\nsteps = 2\nframes = 2\nvalidation_scenes = 1\n\
         [sample]\nsteps = 2\n\
         [bench]\nscenes = 1\nsteps = 2\nschedule = \"8x14:2\"\n",
    )
    .unwrap();
    let ok = |args: &[&str]| {
        let out = dive(dir.path(), args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    ok(&["--config", "c.toml", "gen-data", "--out", "d.divk"]);
    ok(&["--config", "c.toml", "train", "--data", "d.divk"]);
    ok(&["--config", "c.toml", "distill", "--strategy", "single1", "--data", "d.divk"]);
    let sampled = ok(&["--config", "c.toml", "sample", "--model", "model-mad.ckpt", "--guidance", "mad", "--scale", "3"]);
    assert!(sampled.contains("2 NFE"), "{sampled}");
    assert_eq!(std::fs::read_dir(dir.path().join("frames")).unwrap().count(), VIEWS * 2);
    let per_family = ["--config", "c.toml", "sample", "--model", "model-mad.ckpt", "--guidance", "mad", "--family-scales", "3,2,1.5", "--out", "f2"];
    assert!(ok(&per_family).contains("2 NFE"));
    assert!(!dive(dir.path(), &["--config", "c.toml", "sample", "--guidance", "night", "--family-scales", "3,2,1.5"]).status.success());
    ok(&["--config", "c.toml", "eval", "--guidance", "night"]);
    ok(&["--config", "c.toml", "bench"]);
    let rows = from_csv(&std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap()).unwrap();
    let runs: Vec<&str> = rows.iter().map(|r| r.run.as_str()).collect();
    assert_eq!(runs, ["train", "distill/single1", "eval", "bench/cfg", "bench/mad", "bench/cfg+rps", "bench/mad+rps"]);
    assert_eq!(rows.iter().skip(3).map(|r| r.nfe).collect::<Vec<_>>(), [4, 2, 4, 2]);

    assert!(!dive(dir.path(), &["--config", "c.toml", "sample", "--guidance", "mad"]).status.success());
    assert!(!dive(dir.path(), &["--config", "c.toml", "distill", "--strategy", "single3"]).status.success());
    std::fs::write(dir.path().join("bad.toml"), "[train]\nbogus = 1\n").unwrap();
    assert!(!dive(dir.path(), &["--config", "bad.toml", "gen-data"]).status.success());
    std::fs::write(dir.path().join("short.toml"), "[data]\nframes = 2\n").unwrap();
    assert!(!dive(dir.path(), &["--config", "short.toml", "gen-data"]).status.success());

    let a = ok(&["--seed", "4", "gen-data", "--scenes", "2", "--out", "a.divk"]);
    let out = Command::new(env!("CARGO_BIN_EXE_dive"))
        .current_dir(dir.path())
        .env("DIVE_SEED", "4")
        .args(["gen-data", "--scenes", "2", "--out", "b.divk"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(a.contains("2 scenes"));
    assert_eq!(std::fs::read(dir.path().join("a.divk")).unwrap(), std::fs::read(dir.path().join("b.divk")).unwrap());
}
