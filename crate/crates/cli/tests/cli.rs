use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "train.dim=8",
    "--set",
    "train.heads=2",
    "--set",
    "train.blocks=1",
    "--set",
    "train.max_len=8",
    "--set",
    "train.batch_size=16",
    "--set",
    "train.max_epochs=2",
    "--set",
    "train.k=2",
];

fn sigma(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sigma"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run sigma")
}

fn text(o: &Output) -> (String, String) {
    (
        String::from_utf8_lossy(&o.stdout).into_owned(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

fn write_log(dir: &Path, users: usize, len: usize) {
    let mut s = String::from("user,item,rating,timestamp\n");
    for u in 0..users {
        for t in 0..len {
            s.push_str(&format!("u{u},i{},5,{t}\n", (u * 3 + t * (1 + u % 3)) % 20));
        }
    }
    std::fs::write(dir.join("log.csv"), s).unwrap();
}

fn prepared(users: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_log(dir.path(), users, 8);
    let o = sigma(
        dir.path(),
        &["prepare", "--input", "log.csv", "--dataset", "amazon", "--out", "run"],
    );
    assert!(o.status.success(), "{:?}", text(&o));
    dir
}

#[test]
fn prepare_prints_the_stats_block() {
    let dir = tempfile::tempdir().unwrap();
    let log = "u1\ti1\t5\t1\nu1\ti2\t4\t2\nu1\ti3\t5\t3\nu2\ti1\t3\t1\nu2\ti3\t5\t2\n\
               u2\ti2\t5\t3\nu3\ti2\t5\t1\nu3\ti3\t2\t2\nu3\ti1\t5\t3\nu3\ti4\t5\t4\n";
    std::fs::write(dir.path().join("toy.tsv"), log).unwrap();
    let o = sigma(
        dir.path(),
        &[
            "prepare",
            "--input",
            "toy.tsv",
            "--dataset",
            "amazon",
            "--out",
            "run",
            "--set",
            "dataset.min_count=1",
        ],
    );
    let (out, err) = text(&o);
    assert!(o.status.success(), "{err}");
    for col in ["#Users", "#Items", "#Interactions", "Avg. seq. len."] {
        assert!(out.contains(col), "missing {col} in\n{out}");
    }
    assert!(out.contains("10"), "{out}");
    assert!(dir.path().join("run/corpus.json").exists());
}

#[test]
fn evaluate_without_checkpoint_is_a_dependency_error() {
    let dir = prepared(12);
    let o = sigma(dir.path(), &["evaluate", "--out", "run"]);
    let (_, err) = text(&o);
    assert_eq!(o.status.code(), Some(3), "{err}");
    assert!(err.contains("checkpoint") && err.contains("sigma train"), "{err}");

    let empty = tempfile::tempdir().unwrap();
    let o = sigma(empty.path(), &["train", "--out", "run"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(text(&o).1.contains("sigma prepare"));
}

#[test]
fn overrides_are_echoed_in_the_effective_config() {
    let dir = prepared(12);
    let mut args = vec!["train", "--out", "run", "--seed", "7"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--set", "train.k=8"]);
    let o = sigma(dir.path(), &args);
    let (_, err) = text(&o);
    assert!(o.status.success(), "{err}");
    let echo = &err[..err.find("\nepoch ").unwrap_or(err.len())];
    assert!(echo.contains("# effective config"));
    assert!(echo.lines().any(|l| l.trim() == "k = 8"), "{echo}");
    assert!(echo.lines().any(|l| l.trim() == "seed = 7"), "{echo}");
}

#[test]
fn config_errors_have_their_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = sigma(dir.path(), &["train", "--set", "train.nonsense=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("nonsense"));

    let o = sigma(dir.path(), &["train", "--set", "no_equals_sign"]);
    assert_eq!(o.status.code(), Some(2));

    let o = sigma(dir.path(), &["train", "--device", "gpu0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("gpu0"));

    let o = sigma(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(dir.path().join("bad.toml"), "[train]\nk = \"many\"\n").unwrap();
    let o = sigma(dir.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = prepared(12);
    std::fs::write(
        dir.path().join("exp.toml"),
        "output_dir = \"run\"\n[train]\nk = 3\nlambda = 0.01\n",
    )
    .unwrap();
    let mut args = vec!["train", "--config", "exp.toml"];
    args.extend_from_slice(&TINY[..TINY.len() - 2]);
    args.extend_from_slice(&["--set", "train.lambda=0.5"]);
    let o = sigma(dir.path(), &args);
    let (_, err) = text(&o);
    assert!(o.status.success(), "{err}");
    assert!(err.lines().any(|l| l.trim() == "k = 3"), "{err}");
    assert!(err.lines().any(|l| l.trim() == "lambda = 0.5"), "{err}");
}

#[test]
fn train_then_evaluate_is_reproducible() {
    let run = || {
        let dir = prepared(16);
        let mut args = vec!["train", "--out", "run"];
        args.extend_from_slice(TINY);
        let o = sigma(dir.path(), &args);
        assert!(o.status.success(), "{:?}", text(&o));
        assert!(dir.path().join("run/model.ckpt").exists());
        let log = std::fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
        let o = sigma(dir.path(), &["evaluate", "--out", "run"]);
        let (out, err) = text(&o);
        assert!(o.status.success(), "{err}");
        assert!(out.contains("Recall") && out.contains("NDCG"), "{out}");
        let metrics = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
        for key in ["dataset", "variant", "lambda", "k", "seed", "metric", "K", "value"] {
            assert!(first.get(key).is_some(), "missing {key}: {first}");
        }
        (log, metrics)
    };
    let (la, ma) = run();
    let (lb, mb) = run();
    let strip = |s: &str| -> Vec<serde_json::Value> {
        s.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_secs");
                v
            })
            .collect()
    };
    assert_eq!(strip(&la), strip(&lb));
    assert_eq!(ma, mb);
}

#[test]
fn mismatched_corpus_needs_force_and_recommend_lists_items() {
    let dir = prepared(16);
    let mut args = vec!["train", "--out", "run"];
    args.extend_from_slice(TINY);
    assert!(sigma(dir.path(), &args).status.success());

    let o = sigma(dir.path(), &["recommend", "--out", "run", "--user", "u3", "--k", "5"]);
    let (out, err) = text(&o);
    assert!(o.status.success(), "{err}");
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 5, "{out}");
    assert!(rows[0].trim_start().starts_with('1'));

    let o = sigma(dir.path(), &["recommend", "--out", "run", "--user", "nobody"]);
    assert_eq!(o.status.code(), Some(4));

    // a different corpus in the same directory
    write_log(dir.path(), 18, 8);
    let o = sigma(dir.path(), &["prepare", "--input", "log.csv", "--out", "run"]);
    assert!(o.status.success());
    let o = sigma(dir.path(), &["evaluate", "--out", "run"]);
    assert_eq!(o.status.code(), Some(3), "{:?}", text(&o));
    assert!(text(&o).1.contains("incompatible"));
    let o = sigma(dir.path(), &["evaluate", "--out", "run", "--force"]);
    let (_, err) = text(&o);
    assert!(err.contains("--force"), "{err}");
}

#[test]
fn ablate_writes_a_table_and_metric_rows() {
    let dir = prepared(16);
    let mut args = vec!["ablate", "--out", "run"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&[
        "--set",
        "train.max_epochs=1",
        "--set",
        "ablate.variants=[\"full\", \"uni_prior(1)\", \"mie_only\"]",
        "--set",
        "ablate.lambdas=[0.1, 0.001]",
        "--set",
        "ablate.categories=[2, 4]",
    ]);
    let o = sigma(dir.path(), &args);
    let (out, err) = text(&o);
    assert!(o.status.success(), "{err}");
    for section in ["== variants", "== KL weight sweep", "== category count sweep"] {
        assert!(out.contains(section), "{out}");
    }
    assert!(out.contains("uni_prior(1)") && out.contains("mie_only"), "{out}");
    let rows = std::fs::read_to_string(dir.path().join("run/ablation.jsonl")).unwrap();
    // 7 cells, recall and ndcg at cutoffs 10, 20, 40
    assert_eq!(rows.lines().count(), 7 * 3 * 2);
}
