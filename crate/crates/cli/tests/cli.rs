//! Drives the `mft` binary end to end on small datasets.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mft_core::data::DatasetManifest;
use mft_core::metrics::{AuId, FoldId, MetricsReport};

fn mft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mft"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_SPEC: &str = "synth.num_aus = 6\nsynth.subjects = 6\nsynth.samples_per_subject = 20\nsynth.modalities = alpha:12,beta:12\n";

const SMALL_MODEL: &str = "model.num_aus = 6
model.embed_dim = 8
model.num_stages = 1
model.te_layers_per_stage = 1
model.te_heads = 2
model.head_dim = auto
model.mlp_dim = 16
model.backbone_hidden = 16
model.feature_dim = 4
model.init_std = 0.1
train.batch_size = 16
";

fn synth_small(dir: &Path) {
    let spec = dir.join("spec.txt");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let out = mft(&[
        "synth",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        dir.join("data").to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(
        &path,
        format!("data.manifest = data/manifest.txt\n{SMALL_MODEL}{extra}"),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn default_synth_writes_two_thousand_rows_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = mft(&["synth", "--out", d.to_str().unwrap(), "--seed", "42"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let ma = DatasetManifest::load(&a.join("manifest.txt")).unwrap();
    assert_eq!(ma.rows.len(), 2000);
    assert_eq!(ma.num_aus, 12);
    assert_eq!(
        fs::read(a.join("manifest.txt")).unwrap(),
        fs::read(b.join("manifest.txt")).unwrap()
    );
    for row in ma.rows.iter().step_by(97) {
        for p in &row.paths {
            assert_eq!(fs::read(a.join(p)).unwrap(), fs::read(b.join(p)).unwrap());
        }
    }
}

#[test]
fn train_then_eval_reproduces_validation_scores() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(tmp.path());
    let cfg = write_config(tmp.path(), "run.out = run\ntrain.epochs = 2\n");
    let out = mft(&["train", "--config", &cfg]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run = tmp.path().join("run");
    for f in [
        "checkpoint.mft",
        "epochs.log",
        "report.csv",
        "config.resolved",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(run.join("epochs.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("epoch=1 lr=1e-2 loss_fusion="));

    let ck = run.join("checkpoint.mft");
    let out = mft(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        ck.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let trained = MetricsReport::read(&run.join("report.csv")).unwrap();
    let evaluated = MetricsReport::read(&run.join("eval.csv")).unwrap();
    assert_eq!(trained, evaluated);
    assert_eq!(trained.rows.len(), 7);
    assert!(trained
        .find("full", "F(alpha,beta)", FoldId::Index(1), AuId::Avg)
        .is_some());
}

#[test]
fn resolved_config_is_a_valid_config() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(tmp.path());
    let cfg = write_config(
        tmp.path(),
        "run.out = first\ntrain.epochs = 1\nrun.variant = single_alpha\n",
    );
    assert_eq!(code(&mft(&["train", "--config", &cfg])), 0);
    let echo = tmp.path().join("first/config.resolved");
    let text = fs::read_to_string(&echo).unwrap();
    assert!(text.contains("run.variant = single_alpha"));
    let second = tmp.path().join("second.cfg");
    fs::write(&second, text.replace("first", "second")).unwrap();
    let out = mft(&["train", "--config", second.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(tmp.path().join("first/checkpoint.mft")).unwrap(),
        fs::read(tmp.path().join("second/checkpoint.mft")).unwrap()
    );
}

#[test]
fn ablation_suites_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(tmp.path());
    let cfg = write_config(
        tmp.path(),
        "run.out = suites\ndata.folds = 2\ntrain.epochs = 1\nablate.lambda_grid = 0.6:0.4,1:1\n",
    );
    // The lambda sweep only runs fold 1.
    for (suite, groups, folds) in [("components", 4, 2), ("order", 2, 2), ("lambda", 2, 1)] {
        let out = mft(&["ablate", "--config", &cfg, "--suite", suite]);
        assert_eq!(code(&out), 0, "{suite}: {}", stderr(&out));
        let dir = tmp.path().join("suites");
        let report = MetricsReport::read(&dir.join(format!("ablate_{suite}.csv"))).unwrap();
        assert_eq!(report.groups().len(), groups, "{suite}");
        assert_eq!(report.rows.len(), groups * folds * 7, "{suite}");
        let summary =
            MetricsReport::read(&dir.join(format!("ablate_{suite}_summary.csv"))).unwrap();
        assert!(summary.rows.iter().all(|r| r.fold == FoldId::All));
        assert_eq!(summary.rows.len(), groups * 7);
    }
    let order = MetricsReport::read(&tmp.path().join("suites/ablate_order.csv")).unwrap();
    let orders: Vec<String> = order.groups().into_iter().map(|(_, o)| o).collect();
    assert!(orders.contains(&"F(alpha,beta)".to_string()));
    assert!(orders.contains(&"F(beta,alpha)".to_string()));
}

#[test]
fn gradcheck_passes_on_the_tiny_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "model.num_aus = 3\nmodel.embed_dim = 8\nmodel.num_stages = 1\nmodel.te_layers_per_stage = 1\n\
         model.te_heads = 2\nmodel.ft_heads = 2\nmodel.head_dim = auto\nmodel.mlp_dim = 16\n\
         model.backbone_hidden = 8\nmodel.feature_dim = 4\nmodel.modalities = alpha:5,beta:4\nmodel.fusion_order = alpha,beta\n",
    )
    .unwrap();
    let out = mft(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(code(&out), 0, "{stdout}{}", stderr(&out));
    assert!(stdout
        .lines()
        .last()
        .unwrap()
        .starts_with("PASS max_rel_err="));
}

#[test]
fn failing_gradcheck_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("strict.cfg");
    fs::write(
        &cfg,
        "model.num_aus = 2\nmodel.embed_dim = 4\nmodel.num_stages = 0\nmodel.te_heads = 2\n\
         model.head_dim = auto\nmodel.mlp_dim = 4\nmodel.backbone_hidden = 4\nmodel.feature_dim = 2\n\
         model.modalities = alpha:3,beta:3\nmodel.fusion_order = alpha,beta\ngradcheck.step = 0.5\ngradcheck.tolerance = 1e-12\n",
    )
    .unwrap();
    let out = mft(&["gradcheck", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn usage_and_input_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&mft(&["train"])), 1);
    assert_eq!(code(&mft(&["frobnicate"])), 1);
    assert_eq!(code(&mft(&["--help"])), 0);

    let missing = mft(&[
        "train",
        "--config",
        tmp.path().join("nope.cfg").to_str().unwrap(),
    ]);
    assert_eq!(code(&missing), 1);
    assert!(stderr(&missing).starts_with("error: "));

    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "data.manifest = m.txt\nmodel.embed_dims = 8\n").unwrap();
    let out = mft(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));

    let no_manifest = tmp.path().join("nomanifest.cfg");
    fs::write(&no_manifest, "model.embed_dim = 8\n").unwrap();
    let out = mft(&["train", "--config", no_manifest.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("data.manifest"));
}

#[test]
fn corrupt_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(tmp.path());
    let cfg = write_config(tmp.path(), "run.out = run\ntrain.epochs = 2\n");
    let junk = tmp.path().join("junk.mft");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let out = mft(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        junk.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);

    // A truncated tensor file is caught when the manifest is loaded.
    let manifest = DatasetManifest::load(&tmp.path().join("data/manifest.txt")).unwrap();
    let victim = tmp.path().join("data").join(&manifest.rows[3].paths[1]);
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() - 8]).unwrap();
    let out = mft(&["train", "--config", &cfg]);
    assert_eq!(code(&out), 1);
    assert!(
        stderr(&out).contains(&manifest.rows[3].id) || stderr(&out).contains("f64"),
        "{}",
        stderr(&out)
    );
}
