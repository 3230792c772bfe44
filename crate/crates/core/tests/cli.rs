//! End-to-end runs of the `dagvae` binary: every subcommand against a small
//! trained run, plus the failure paths users actually hit (bad config,
//! stale checkpoint, diverged training).

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use common::{bernoulli_csv, halves_labels_csv, read_csv, write_file};
use dagvae::data::checkpoint::checkpoint_digest;

fn dagvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dagvae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn expect_ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn expect_failure(out: &Output) -> String {
    assert!(!out.status.success(), "command unexpectedly succeeded");
    assert_eq!(out.status.code(), Some(1));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const FIXTURE_CELLS: usize = 40;
const FIXTURE_DIM_Z: usize = 2;
const FIXTURE_K: usize = 3;

fn fixture_config(output_dir: &str, extra: &str) -> String {
    format!(
        r#"
seed = 3
output_dir = "{output_dir}"

[[dataset]]
name = "a"
matrix = "a.csv"
format = "dense-csv"
likelihood = "bernoulli"

[[dataset]]
name = "b"
matrix = "b.csv"
format = "dense-csv"
likelihood = "bernoulli"

[graph]
edges = [["a", "b"]]

[model]
dim_z = {FIXTURE_DIM_Z}
k_components = {FIXTURE_K}
hidden_base = 8

[train]
learning_rate = 1e-3
epochs_per_stage = 3
batch_size = 16
warmup_epochs = 1
early_stop_patience = 2
validation_fraction = 0.25
{extra}
"#
    )
}

fn write_fixture_data(dir: &Path) {
    write_file(dir, "a.csv", &bernoulli_csv(FIXTURE_CELLS, "f", 6, 0.8, 0.2, 10));
    write_file(dir, "b.csv", &bernoulli_csv(FIXTURE_CELLS, "g", 5, 0.2, 0.8, 11));
    write_file(dir, "labels.csv", &halves_labels_csv(FIXTURE_CELLS));
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
    labels: PathBuf,
    out: PathBuf,
}

/// One small trained run shared by the read-only command tests.
fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        write_fixture_data(dir.path());
        let config = write_file(dir.path(), "run.toml", &fixture_config("out", ""));
        expect_ok(&dagvae(&["train", config.to_str().unwrap()]));
        Fixture {
            labels: dir.path().join("labels.csv"),
            out: dir.path().join("out"),
            config,
            dir,
        }
    })
}

fn fix_args<'a>(fix: &'a Fixture, cmd: &'a str) -> Vec<&'a str> {
    vec![cmd, fix.config.to_str().unwrap()]
}

#[test]
fn validate_reports_stages_and_resolved_settings() {
    let fix = fixture();
    let stdout = expect_ok(&dagvae(&fix_args(fix, "validate")));
    assert!(stdout.contains("stage 1: a; stage 2: b"), "{}", stdout);
    assert!(stdout.contains("dim_z: 2\n"), "{}", stdout);
    assert!(stdout.contains("k_components: 3\n"), "{}", stdout);
    assert!(stdout.contains("cells: 40\n"), "{}", stdout);
    assert!(stdout.contains("config_digest: "), "{}", stdout);
    assert!(stdout.trim_end().ends_with("ok"), "{}", stdout);
}

#[test]
fn validate_surfaces_the_built_in_defaults() {
    // No model/train blocks: the resolved settings are the shipped defaults.
    let fix = fixture();
    let minimal = r#"
output_dir = "out_defaults"

[[dataset]]
name = "a"
matrix = "a.csv"
format = "dense-csv"
likelihood = "bernoulli"

[[dataset]]
name = "b"
matrix = "b.csv"
format = "dense-csv"
likelihood = "bernoulli"

[graph]
edges = [["a", "b"]]
"#;
    let path = write_file(fix.dir.path(), "defaults.toml", minimal);
    let stdout = expect_ok(&dagvae(&["validate", path.to_str().unwrap()]));
    assert!(stdout.contains("dim_z: 20\n"), "{}", stdout);
    assert!(stdout.contains("k_components: 41\n"), "{}", stdout);
    assert!(stdout.contains("learning_rate: 0.0001\n"), "{}", stdout);
    assert!(stdout.contains("epochs_per_stage: 750\n"), "{}", stdout);
    assert!(stdout.contains("enrichment_k: 50\n"), "{}", stdout);
    assert!(stdout.contains("seed: 0\n"), "{}", stdout);
}

#[test]
fn group_commands_require_the_groups_flag() {
    let fix = fixture();
    for args in [
        vec!["diff", fix.config.to_str().unwrap(), "--modality", "a"],
        vec!["contrib", fix.config.to_str().unwrap(), "--target", "b"],
        vec!["interpolate", fix.config.to_str().unwrap()],
    ] {
        let out = dagvae(&args);
        assert!(!out.status.success());
        let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
        assert!(stderr.contains("--groups"), "{}", stderr);
    }
}

#[test]
fn bundled_quickstart_config_passes_preflight() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../quickstart/run.toml");
    let stdout = expect_ok(&dagvae(&["validate", path]));
    assert!(stdout.contains("stage 1: atac; stage 2: rna"), "{}", stdout);
    assert!(stdout.contains("cells: 300\n"), "{}", stdout);
    assert!(stdout.trim_end().ends_with("ok"), "{}", stdout);
}

#[test]
fn unknown_config_key_fails_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let bad = fixture_config("out", "momentum = 0.9\n");
    let path = write_file(dir.path(), "bad.toml", &bad);
    let stderr = expect_failure(&dagvae(&["validate", path.to_str().unwrap()]));
    assert!(stderr.contains("bad.toml"), "{}", stderr);
    assert!(stderr.contains("line"), "{}", stderr);
    assert!(stderr.contains("momentum"), "{}", stderr);
}

#[test]
fn unreadable_matrix_is_located_by_config_path() {
    let dir = tempfile::tempdir().unwrap();
    // Only the config exists; the matrices it names do not.
    let path = write_file(dir.path(), "run.toml", &fixture_config("out", ""));
    let stderr = expect_failure(&dagvae(&["validate", path.to_str().unwrap()]));
    assert!(stderr.contains("a.csv"), "{}", stderr);
}

#[test]
fn latents_csv_has_mean_cluster_and_confidence_columns() {
    let fix = fixture();
    expect_ok(&dagvae(&fix_args(fix, "latents")));
    let rows = read_csv(&fix.out.join("latents_a.csv"));
    assert_eq!(
        rows[0],
        ["cell_id", "mu_1", "mu_2", "argmax_cluster", "q_max"],
        "one column per latent dimension plus assignment and confidence"
    );
    assert_eq!(rows.len(), 1 + FIXTURE_CELLS);
    for row in &rows[1..] {
        let cluster: usize = row[3].parse().unwrap();
        let q_max: f64 = row[4].parse().unwrap();
        assert!(cluster < FIXTURE_K);
        assert!(q_max > 0.0 && q_max <= 1.0);
    }
    assert!(fix.out.join("latents_b.csv").exists());
}

#[test]
fn cluster_assignments_are_component_indices() {
    let fix = fixture();
    expect_ok(&dagvae(&fix_args(fix, "cluster")));
    let rows = read_csv(&fix.out.join("clusters.csv"));
    assert_eq!(rows[0], ["cell_id", "a", "b"]);
    assert_eq!(rows.len(), 1 + FIXTURE_CELLS);
    for row in &rows[1..] {
        for cell in &row[1..] {
            let c: usize = cell.parse().unwrap();
            assert!(c < FIXTURE_K);
        }
    }
}

#[test]
fn comparing_a_group_with_itself_gives_negligible_bayes_factors() {
    let fix = fixture();
    let mut args = fix_args(fix, "diff");
    let labels = fix.labels.to_str().unwrap();
    args.extend(["--modality", "b", "--groups", labels, "g1", "g1", "--pairs", "1000"]);
    expect_ok(&dagvae(&args));
    let rows = read_csv(&fix.out.join("diff.csv"));
    assert_eq!(rows[0], ["feature", "prob_h1", "bayes_factor", "mean_I", "mean_J", "lfc"]);
    for row in &rows[1..] {
        let k: f64 = row[2].parse().unwrap();
        assert!(k.abs() < 0.2, "feature {} has |K| = {}", row[0], k.abs());
    }
}

#[test]
fn diff_rank_file_is_sorted_by_bayes_factor() {
    let fix = fixture();
    let mut args = fix_args(fix, "diff");
    let labels = fix.labels.to_str().unwrap();
    args.extend(["--modality", "a", "--groups", labels, "g1", "g2", "--pairs", "300"]);
    expect_ok(&dagvae(&args));
    let rows = read_csv(&fix.out.join("diff_rank.csv"));
    assert_eq!(rows[0], ["feature", "K", "lfc"]);
    assert_eq!(rows.len(), 1 + 6);
    let ks: Vec<f64> = rows[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    for w in ks.windows(2) {
        assert!(w[0] >= w[1], "rank file out of order: {:?}", ks);
    }
}

#[test]
fn unknown_group_value_selects_no_cells() {
    let fix = fixture();
    let mut args = fix_args(fix, "diff");
    let labels = fix.labels.to_str().unwrap();
    args.extend(["--modality", "a", "--groups", labels, "g1", "nosuch"]);
    let stderr = expect_failure(&dagvae(&args));
    assert!(stderr.contains("selects no cells"), "{}", stderr);
}

#[test]
fn contribution_shares_sum_to_one_per_feature() {
    let fix = fixture();
    let mut args = fix_args(fix, "contrib");
    let labels = fix.labels.to_str().unwrap();
    args.extend(["--target", "b", "--groups", labels, "g1", "g2", "--pairs", "50"]);
    expect_ok(&dagvae(&args));

    let rows = read_csv(&fix.out.join("contrib.csv"));
    assert_eq!(rows[0], ["feature", "modality", "statistic", "C"]);
    // One row per (source modality, target feature).
    assert_eq!(rows.len(), 1 + 2 * 5);

    let share_rows = read_csv(&fix.out.join("contrib_share.csv"));
    assert_eq!(share_rows[0], ["feature", "modality", "share_of_total_abs"]);
    let mut by_feature = std::collections::BTreeMap::<String, f64>::new();
    for row in &share_rows[1..] {
        let share: f64 = row[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&share));
        *by_feature.entry(row[0].clone()).or_default() += share;
    }
    for (feature, total) in by_feature {
        assert!(
            (total - 1.0).abs() < 1e-9 || total == 0.0,
            "shares for {} sum to {}",
            feature,
            total
        );
    }
}

#[test]
fn interpolation_walks_a_uniform_grid_over_all_features() {
    let fix = fixture();
    let mut args = fix_args(fix, "interpolate");
    let labels = fix.labels.to_str().unwrap();
    args.extend(["--groups", labels, "g1", "g2", "--steps", "5"]);
    expect_ok(&dagvae(&args));
    let rows = read_csv(&fix.out.join("interpolation.csv"));
    assert_eq!(rows[0], ["t", "feature", "value"]);
    assert_eq!(rows.len(), 1 + 5 * (6 + 5));
    let ts: std::collections::BTreeSet<String> = rows[1..].iter().map(|r| r[0].clone()).collect();
    assert_eq!(ts.len(), 5);
    assert!(ts.contains("0") && ts.contains("1"));
    assert!(rows[1..].iter().any(|r| r[1].starts_with("a:")));
    assert!(rows[1..].iter().any(|r| r[1].starts_with("b:")));
}

#[test]
fn enrichment_of_a_single_label_is_exactly_one() {
    let fix = fixture();
    let mut single = String::from("cell_id,label\n");
    for c in 0..FIXTURE_CELLS {
        single.push_str(&format!("c{},only\n", c));
    }
    let labels = write_file(fix.dir.path(), "single_label.csv", &single);
    let mut args = fix_args(fix, "enrichment");
    args.extend(["--labels", labels.to_str().unwrap(), "--modality", "a", "--k", "5"]);
    expect_ok(&dagvae(&args));
    let rows = read_csv(&fix.out.join("enrichment.csv"));
    assert_eq!(rows[0], ["cell_id", "label", "score"]);
    assert_eq!(rows.len(), 1 + FIXTURE_CELLS);
    for row in &rows[1..] {
        assert_eq!(row[1], "only");
        assert_eq!(row[2].parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn enrichment_requires_a_modality_when_there_are_several() {
    let fix = fixture();
    let mut args = fix_args(fix, "enrichment");
    args.extend(["--labels", fix.labels.to_str().unwrap(), "--k", "5"]);
    let stderr = expect_failure(&dagvae(&args));
    assert!(stderr.contains("--modality"), "{}", stderr);
}

#[test]
fn generation_is_reproducible_for_a_fixed_seed() {
    let fix = fixture();
    let run = |gen_seed: &str| -> (Vec<u8>, Vec<u8>) {
        let mut args = fix_args(fix, "generate");
        args.extend([
            "--cells",
            "12",
            "--gen-seed",
            gen_seed,
            "--checkpoint",
        ]);
        let ckpt = fix.out.join("checkpoint_final");
        args.push(ckpt.to_str().unwrap());
        expect_ok(&dagvae(&args));
        (
            fs::read(fix.out.join("generated_a.csv")).unwrap(),
            fs::read(fix.out.join("generated_components.csv")).unwrap(),
        )
    };
    let (a1, c1) = run("99");
    let (a2, c2) = run("99");
    assert_eq!(a1, a2);
    assert_eq!(c1, c2);
    let (a3, _) = run("100");
    assert_ne!(a1, a3, "a different seed draws different cells");
}

#[test]
fn checkpoint_is_refused_under_a_different_config() {
    let fix = fixture();
    // Same files, different model width: the digest no longer matches.
    let other = fixture_config("out", "").replace("dim_z = 2", "dim_z = 3");
    let path = write_file(fix.dir.path(), "other.toml", &other);
    let ckpt = fix.out.join("checkpoint_final");
    let stderr = expect_failure(&dagvae(&[
        "latents",
        path.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]));
    assert!(
        stderr.contains("different resolved configuration"),
        "{}",
        stderr
    );
}

#[test]
fn training_runs_are_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture_data(dir.path());
    let c1 = write_file(dir.path(), "r1.toml", &fixture_config("out1", ""));
    let c2 = write_file(dir.path(), "r2.toml", &fixture_config("out2", ""));
    expect_ok(&dagvae(&["train", c1.to_str().unwrap()]));
    expect_ok(&dagvae(&["train", c2.to_str().unwrap()]));
    let d1 = checkpoint_digest(&dir.path().join("out1/checkpoint_final")).unwrap();
    let d2 = checkpoint_digest(&dir.path().join("out2/checkpoint_final")).unwrap();
    assert_eq!(d1, d2);
}

#[test]
fn resuming_from_a_partial_run_matches_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture_data(dir.path());
    let full_cfg = write_file(dir.path(), "full.toml", &fixture_config("out_full", ""));
    expect_ok(&dagvae(&["train", full_cfg.to_str().unwrap()]));

    // Keep only the stage-1 checkpoint, as if the run died during stage 2.
    let partial = dir.path().join("partial");
    fs::create_dir_all(partial.join("checkpoint_stage1")).unwrap();
    let src = dir.path().join("out_full/checkpoint_stage1");
    fs::copy(src.join("manifest.json"), partial.join("checkpoint_stage1/manifest.json")).unwrap();
    fs::create_dir_all(partial.join("checkpoint_stage1/tensors")).unwrap();
    for entry in fs::read_dir(src.join("tensors")).unwrap() {
        let entry = entry.unwrap();
        fs::copy(
            entry.path(),
            partial.join("checkpoint_stage1/tensors").join(entry.file_name()),
        )
        .unwrap();
    }

    let resumed_cfg = write_file(dir.path(), "resumed.toml", &fixture_config("out_resumed", ""));
    let out = dagvae(&[
        "train",
        resumed_cfg.to_str().unwrap(),
        "--resume",
        partial.to_str().unwrap(),
    ]);
    let stdout = expect_ok(&out);
    assert!(stdout.contains("resumed after stage 1"), "{}", stdout);

    let full = checkpoint_digest(&dir.path().join("out_full/checkpoint_final")).unwrap();
    let resumed = checkpoint_digest(&dir.path().join("out_resumed/checkpoint_final")).unwrap();
    assert_eq!(full, resumed, "resume must reproduce the uninterrupted run");
}

#[test]
fn resume_requires_stage_checkpoints_in_the_source() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture_data(dir.path());
    let cfg = write_file(dir.path(), "run.toml", &fixture_config("out", ""));
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let stderr = expect_failure(&dagvae(&[
        "train",
        cfg.to_str().unwrap(),
        "--resume",
        empty.to_str().unwrap(),
    ]));
    assert!(stderr.contains("no stage checkpoints"), "{}", stderr);
}

#[test]
fn diverged_training_exits_nonzero_and_keeps_last_finite_parameters() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture_data(dir.path());
    let cfg = write_file(
        dir.path(),
        "blowup.toml",
        &fixture_config("out", "").replace("learning_rate = 1e-3", "learning_rate = 1e300"),
    );
    let out = dagvae(&["train", cfg.to_str().unwrap()]);
    let stderr = expect_failure(&out);
    assert!(stderr.contains("checkpoint_abort"), "{}", stderr);
    let abort = dir.path().join("out/checkpoint_abort");
    assert!(abort.join("manifest.json").exists());
    checkpoint_digest(&abort).expect("abort checkpoint is complete and readable");
}

#[test]
fn thread_cap_flag_is_accepted() {
    let fix = fixture();
    let stdout = expect_ok(&dagvae(&[
        "validate",
        fix.config.to_str().unwrap(),
        "--threads",
        "2",
    ]));
    assert!(stdout.trim_end().ends_with("ok"));
}
