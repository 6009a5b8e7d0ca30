//! End-to-end runs of the `navpetl` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use navpetl::model::checkpoint_size;
use navpetl::world::Split;
use navpetl::{Method, Model};
use navpetl_cli::{build_world, load_episodes, RunConfig, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, TRAIN_LOG_FILE};

const TINY: &str = "\
model = grad-check
grid = 3x3
edge_drop = 0
episodes = 4
eval_episodes = 3
epochs = 2
batch_size = 2
lr = 1e-3
d_mid = 4
lora_rank = 2
n_prompts = 2
booster_heads = 2
";

fn navpetl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_navpetl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

fn metric(tsv: &str, name: &str) -> f64 {
    tsv.lines()
        .find_map(|l| l.strip_prefix(&format!("{name}\t")))
        .unwrap_or_else(|| panic!("{name} missing from {tsv:?}"))
        .parse()
        .unwrap()
}

#[test]
fn gen_world_writes_and_counts_episodes() {
    let dir = tiny_dir();
    let o = navpetl(dir.path(), &["gen-world", "--config", "tiny.cfg", "--episodes", "7", "--out", "data/ep.tsv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "7");
    let text = fs::read_to_string(dir.path().join("data/ep.tsv")).unwrap();
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn train_fills_run_dir_and_eval_reproduces_its_metrics() {
    let dir = tiny_dir();
    let o = navpetl(dir.path(), &["train", "--config", "tiny.cfg", "--method", "vln-petl", "--out", "runs"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("runs/vln-petl");
    for f in [CONFIG_FILE, CHECKPOINT_FILE, TRAIN_LOG_FILE, METRICS_FILE] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    // epochs 0..=2
    assert_eq!(fs::read_to_string(run.join(TRAIN_LOG_FILE)).unwrap().lines().count(), 3);

    let echoed = RunConfig::load(&run.join(CONFIG_FILE)).unwrap();
    assert_eq!(echoed.get("method"), "vln-petl");
    assert_eq!(echoed.get("out"), "runs");
    let mut model = Model::new_virtual(echoed.model_config().unwrap()).unwrap();
    model.install(echoed.method_config().unwrap()).unwrap();
    let size = fs::metadata(run.join(CHECKPOINT_FILE)).unwrap().len() as usize;
    assert_eq!(size, checkpoint_size(model.registry(), true));
    assert!(size < checkpoint_size(model.registry(), false));

    // The echoed config alone is enough to rebuild the model and score it.
    let o = navpetl(dir.path(), &["eval", "--config", "runs/vln-petl/config.txt", "--split", "unseen"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), fs::read_to_string(run.join(METRICS_FILE)).unwrap());
}

#[test]
fn training_is_reproducible() {
    let dir = tiny_dir();
    for name in ["a", "b"] {
        let o = navpetl(dir.path(), &["train", "--config", "tiny.cfg", "--method", "lora", "--name", name]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |n: &str| fs::read(dir.path().join("run").join(n).join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn finetune_checkpoint_holds_the_whole_model() {
    let dir = tiny_dir();
    let o = navpetl(dir.path(), &["train", "--config", "tiny.cfg", "--method", "finetune", "--set", "epochs=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = RunConfig::load(&dir.path().join("tiny.cfg")).unwrap();
    let mut model = Model::new_virtual(cfg.model_config().unwrap()).unwrap();
    model.install(cfg.method_config_for(Method::Finetune).unwrap()).unwrap();
    let size = fs::metadata(dir.path().join("run/finetune").join(CHECKPOINT_FILE)).unwrap().len() as usize;
    assert_eq!(size, checkpoint_size(model.registry(), false));
}

#[test]
fn oracle_eval_succeeds_everywhere() {
    let dir = tiny_dir();
    let o = navpetl(dir.path(), &["eval", "--config", "tiny.cfg", "--oracle", "--split", "seen"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(metric(&stdout(&o), "SR"), 100.0);
}

#[test]
fn eval_without_checkpoint_fails() {
    let dir = tiny_dir();
    let o = navpetl(dir.path(), &["eval", "--config", "tiny.cfg"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains(CHECKPOINT_FILE), "{}", stderr(&o));
}

#[test]
fn unknown_method_is_a_usage_error_listing_methods() {
    let dir = tiny_dir();
    let o = navpetl(dir.path(), &["train", "--method", "full"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for m in Method::ALL {
        assert!(err.contains(m.name()), "{err}");
    }

    fs::write(dir.path().join("bad.cfg"), "method = full\n").unwrap();
    let o = navpetl(dir.path(), &["train", "--config", "bad.cfg"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("vln-petl"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tiny_dir();
    fs::write(dir.path().join("bad.cfg"), "learning_rate = 1\n").unwrap();
    let o = navpetl(dir.path(), &["count-params", "--config", "bad.cfg"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    let o = navpetl(dir.path(), &["count-params", "--set", "nope=3"]);
    assert!(!o.status.success());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tiny_dir();
    let o = navpetl(dir.path(), &["gen-world", "--config", "tiny.cfg", "--grid", "4x4", "--episodes", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    // The file must validate against the 4x4 world, not the configured 3x3 one.
    let mut cfg = RunConfig::load(&dir.path().join("tiny.cfg")).unwrap();
    cfg.set("grid", "4x4").unwrap();
    cfg.set("dataset", &dir.path().join("episodes.tsv").to_string_lossy()).unwrap();
    let world = build_world(&cfg).unwrap();
    assert_eq!(world.node_count(), 16);
    assert_eq!(load_episodes(&cfg, &world, Split::Seen).unwrap().len(), 3);
}

#[test]
fn count_params_sorts_ascending_with_finetune_last() {
    let dir = tiny_dir();
    let o = navpetl(dir.path(), &["count-params", "--set", "model=hamt-proxy"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with('#'), "proxy counts should be flagged as assumptions");
    let rows: Vec<Vec<&str>> = out
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("method"))
        .map(|l| l.split('\t').collect())
        .collect();
    assert_eq!(rows.len(), 6);
    let pct: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(pct.windows(2).all(|w| w[0] <= w[1]), "{out}");
    assert_eq!(rows[5][0], "finetune");
    assert_eq!(rows[5][3], "100.00");
}

#[test]
fn grad_check_passes_and_reports_groups() {
    let dir = tiny_dir();
    let o = navpetl(dir.path(), &["grad-check", "--method", "vln-petl", "--coords", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for group in ["LEA", "HIB", "CIB", "LoRA", "head"] {
        assert!(out.lines().any(|l| l.starts_with(&format!("{group}\t"))), "{group} missing:\n{out}");
    }
    assert!(out.lines().all(|l| l.ends_with("\tPASS")), "{out}");
}
