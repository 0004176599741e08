use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use subliminal::data::{sha256_hex, write_synthetic_mnist};
use subliminal::engine::{ExperimentConfig, PerturbTarget, PerturbationSpec};
use subliminal::nn::ArchSpec;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_subliminal"));
    c.env_remove("SUBLIMINAL_DATA_ROOT").env_remove("SUBLIMINAL_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_mnist(&dir.path().join("data"), 200, 50, 3).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> ExperimentConfig {
        let mut c = ExperimentConfig::baseline(3);
        c.name = "tiny".into();
        c.figure = "tiny".into();
        c.data.root = Some(self.path("data"));
        c.teacher.arch = ArchSpec::mlp(&[16, 12]);
        c.student.arch = ArchSpec::mlp(&[16, 12]);
        c.training.teacher_epochs = 1;
        c.training.student_epochs = 1;
        c.training.batch_size = 50;
        c.training.eval_noise_batches = 2;
        c.training.eval_noise_batch_size = 50;
        c.noise.batch_size = 50;
        c.noise.steps_per_epoch = 2;
        c
    }

    fn write(&self, name: &str, cfg: &ExperimentConfig) -> String {
        let p = self.path(name);
        fs::write(&p, cfg.to_toml_string().unwrap()).unwrap();
        p.display().to_string()
    }

    fn records(&self, out: &str) -> Vec<serde_json::Value> {
        let mut v: Vec<_> = fs::read_dir(self.path(out).join("runs"))
            .unwrap()
            .map(|e| serde_json::from_slice(&fs::read(e.unwrap().path()).unwrap()).unwrap())
            .collect();
        v.sort_by_key(|r: &serde_json::Value| (r["config_hash"].to_string(), r["seed"].as_u64()));
        v
    }
}

fn csv_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn run_writes_records_and_honours_seed_override() {
    let f = Fixture::new();
    let cfg = f.write("c.toml", &f.config());
    let out = f.path("out").display().to_string();
    let o = run(&["run", "-c", &cfg, "-o", &out, "--seed", "7"]);
    assert!(o.status.success(), "{}", text(&o));
    let recs = f.records("out");
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0]["seed"], 7);
    assert_eq!(recs[0]["status"], "ok");
    assert_eq!(csv_rows(&f.path("out/results.csv")), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("seed=7 teacher_acc="));
}

#[test]
fn missing_data_fails_before_writing() {
    let f = Fixture::new();
    let mut c = f.config();
    c.data.root = Some(f.path("nowhere"));
    let cfg = f.write("c.toml", &c);
    let out = f.path("out");
    let o = run(&["run", "-c", &cfg, "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(!out.exists());
    assert!(text(&o).contains("fetch-data"), "{}", text(&o));
}

#[test]
fn invalid_config_lists_every_bad_field() {
    let f = Fixture::new();
    let mut c = f.config();
    c.aux_dim = 0;
    c.training.batch_size = 0;
    let cfg = f.write("c.toml", &c);
    let o = run(&["run", "-c", &cfg, "-o", f.path("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let t = text(&o);
    assert!(t.contains("aux_dim") && t.contains("batch_size"), "{t}");

    fs::write(f.path("bad.toml"), "name = 3\nbogus = true\n").unwrap();
    let o = run(&["run", "-c", f.path("bad.toml").to_str().unwrap(), "-o", "x"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn divergent_training_exits_3_with_an_error_record() {
    let f = Fixture::new();
    let mut c = f.config();
    c.training.optimizer.lr = 1e300;
    let cfg = f.write("c.toml", &c);
    let o = run(&["run", "-c", &cfg, "-o", f.path("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    let recs = f.records("out");
    assert_eq!(recs[0]["status"], "error");
    assert!(recs[0]["error"].as_str().unwrap().contains("epoch"));
}

#[test]
fn sweep_grid_then_resume() {
    let f = Fixture::new();
    let cfg = f.write("c.toml", &f.config());
    let out = f.path("sw").display().to_string();
    let args = ["sweep", "-c", &cfg, "-o", &out, "--axis", "m=1,10", "--seeds", "0,1"];
    let o = run(&args);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("executed=4 skipped=0 failed=0"), "{}", text(&o));
    assert_eq!(csv_rows(&f.path("sw/results.csv")), 4);
    let first = fs::read(f.path("sw/results.csv")).unwrap();

    let o = run(&args);
    assert!(text(&o).contains("executed=0 skipped=4"), "{}", text(&o));
    // Only wall time may differ between the two CSVs; a resume must not touch it.
    assert_eq!(fs::read(f.path("sw/results.csv")).unwrap(), first);

    let o = run(&["sweep", "-c", &cfg, "-o", &out, "--axis", "nonsense=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_teacher_then_distill_matches_run() {
    let f = Fixture::new();
    let cfg = f.write("c.toml", &f.config());
    let o = run(&["train-teacher", "-c", &cfg, "-o", f.path("t").to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let ckpt = f.path("t/teacher_s0.ckpt");
    assert!(ckpt.exists() && f.path("t/teacher_s0.json").exists());

    let o = run(&[
        "distill",
        "-c",
        &cfg,
        "-o",
        f.path("d").to_str().unwrap(),
        "--teacher",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let o = run(&["run", "-c", &cfg, "-o", f.path("r").to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let (d, r) = (&f.records("d")[0]["report"], &f.records("r")[0]["report"]);
    for key in ["teacher_acc", "student_acc", "aux_eval_losses", "student_epoch_losses"] {
        assert_eq!(d[key], r[key], "{key}");
    }

    // A checkpoint for a different m is rejected.
    let mut other = f.config();
    other.aux_dim = 5;
    let cfg5 = f.write("c5.toml", &other);
    let o = run(&[
        "distill",
        "-c",
        &cfg5,
        "-o",
        f.path("d5").to_str().unwrap(),
        "--teacher",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn theory_and_export_from_a_delta_sweep() {
    let f = Fixture::new();
    let mut c = f.config();
    c.figure = "align".into();
    c.probes.update_cosine = true;
    c.probes.posthoc_class_deltas = vec![0.0, 0.1];
    c.perturbation = Some(PerturbationSpec {
        target: PerturbTarget::StudentAux,
        delta: 0.0,
    });
    let cfg = f.write("c.toml", &c);
    let out = f.path("sw").display().to_string();
    let o = run(&[
        "sweep",
        "-c",
        &cfg,
        "-o",
        &out,
        "--axis",
        "delta=0,0.05",
        "--seeds",
        "0,1",
    ]);
    assert!(o.status.success(), "{}", text(&o));

    let th = f.path("th");
    let o = run(&["theory", "-r", &out, "-o", th.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let align = fs::read_to_string(th.join("theory_alignment.csv")).unwrap();
    let header = align.lines().next().unwrap();
    assert!(
        header.contains("bound") && header.contains("measured") && header.contains("exceeds"),
        "{header}"
    );
    assert!(th.join("theory_alignment_summary.csv").exists());
    assert!(th.join("theory_class_perturbation.csv").exists());

    let (e1, e2) = (f.path("e1"), f.path("e2"));
    assert!(run(&["export", "-r", &out, "-o", e1.to_str().unwrap()])
        .status
        .success());
    assert!(run(&["export", "-r", &out, "-o", e2.to_str().unwrap()])
        .status
        .success());
    assert_eq!(
        fs::read(e1.join("align.csv")).unwrap(),
        fs::read(e2.join("align.csv")).unwrap()
    );

    fs::create_dir(f.path("empty")).unwrap();
    let o = run(&[
        "export",
        "-r",
        f.path("empty").to_str().unwrap(),
        "-o",
        e1.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fetch_data_from_a_local_mirror() {
    let f = Fixture::new();
    let src = f.path("data/mnist");
    let mut manifest = String::new();
    for name in [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ] {
        let sha = sha256_hex(&fs::read(src.join(name)).unwrap());
        manifest += &format!("[[file]]\ndataset = \"mnist\"\nname = \"{name}\"\nsha256 = \"{sha}\"\nurls = []\n\n");
    }
    fs::write(f.path("m.toml"), &manifest).unwrap();
    let mirror = format!("file://{}", src.display());
    let root = f.path("fetched");
    let o = run(&[
        "fetch-data",
        "--manifest",
        f.path("m.toml").to_str().unwrap(),
        "--root",
        root.to_str().unwrap(),
        "--mirror",
        &mirror,
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(
        fs::read(root.join("mnist/t10k-labels-idx1-ubyte")).unwrap(),
        fs::read(src.join("t10k-labels-idx1-ubyte")).unwrap()
    );

    // A checksum mismatch is refused.
    let first_sha = sha256_hex(&fs::read(src.join("train-images-idx3-ubyte")).unwrap());
    fs::write(f.path("m2.toml"), manifest.replace(&first_sha, &"0".repeat(64))).unwrap();
    let o = run(&[
        "fetch-data",
        "--manifest",
        f.path("m2.toml").to_str().unwrap(),
        "--root",
        f.path("f2").to_str().unwrap(),
        "--mirror",
        &mirror,
    ]);
    assert!(!o.status.success());
}
