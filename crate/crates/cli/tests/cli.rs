use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 0

[data]
num_ids = 8
clips_per_id = 4
frames_per_clip = 4
image = [3, 16, 8]

[model]
input = [3, 16, 8]
stages = [8, 8, 16, 16]
dv = 16
t = 2

[model.attention]
d = 4

[model.agg]
r = 4

[train]
epochs = 2
p = 2
k = 2
"#;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cra-kit")).args(args).env_remove("CRA_KIT_THREADS").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_op_scope_passes() {
    let o = cli(&["gradcheck", "--scope", "op"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.ends_with("PASS")).count() > 10);
    assert!(text.contains("PASS (detected)"));
}

#[test]
fn bench_reports_the_p1_ratio() {
    let o = cli(&["bench"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("P1 ratio within [1.9, 2.1]: true"));
    assert!(text.contains("baseline model"));
}

#[test]
fn train_resume_eval_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("run");
    let o = cli(&["--config", &cfg, "--out", path(&out), "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some("epoch,L_tri,L_sof,R-1,mAP"));
    assert_eq!(fs::read_to_string(out.join("log.csv")).unwrap().lines().count(), 3);
    assert!(out.join("checkpoint/manifest.txt").exists());

    // resuming a finished run trains no further epochs
    let again = cli(&["--config", &cfg, "--out", path(&out), "train", "--resume"]);
    assert!(again.status.success());
    assert_eq!(stdout(&again).lines().count(), 1);

    let e = cli(&["--out", path(&out), "eval"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let keys: Vec<String> = stdout(&e).lines().map(|l| l.split(" = ").next().unwrap().to_string()).collect();
    assert_eq!(keys, ["r1", "r5", "r10", "r20", "map"]);
    assert_eq!(fs::read_to_string(out.join("report.txt")).unwrap(), stdout(&e));

    let d1 = cli(&["--out", path(&out), "dump-attention", "--clip", "1"]);
    assert!(d1.status.success(), "{}", String::from_utf8_lossy(&d1.stderr));
    let clip_dir = out.join("attention/clip1");
    let mut files: Vec<_> = fs::read_dir(&clip_dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 4);
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(f).unwrap()).collect();
    assert!(cli(&["--out", path(&out), "dump-attention", "--clip", "1"]).status.success());
    let second: Vec<Vec<u8>> = files.iter().map(|f| fs::read(f).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn perfect_memorisation_gives_map_one() {
    let dir = tempfile::tempdir().unwrap();
    let clean = "noise_std = 0.0\njitter_pixels = 0\nocclusion_prob = 0.0\ncamera_shift = 0.0\n";
    let cfg = write_config(dir.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("[data]\n", &format!("[data]\n{clean}"));
    fs::write(&cfg, text.replace("epochs = 2", "epochs = 1")).unwrap();
    let out = dir.path().join("run");
    assert!(cli(&["--config", &cfg, "--out", path(&out), "train"]).status.success());
    let e = cli(&["--config", &cfg, "--out", path(&out), "eval"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let text = stdout(&e);
    assert!(text.contains("map = 1.000000"), "{text}");
    assert!(text.contains("r1 = 1.000000"), "{text}");
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "\n[optim]\nlearning_rat = 0.1\n");
    let o = cli(&["--config", &cfg, "bench"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let missing = cli(&["--out", path(&dir.path().join("nothing")), "eval"]);
    assert_eq!(missing.status.code(), Some(2));
}
