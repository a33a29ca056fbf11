use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use simpgan::classifier::{ClassifierConfig, SiameseModel};
use simpgan::eval::CmcReport;
use simpgan::synth::load_dataset;
use simpgan::train::{classifier_from_checkpoint, derive_seed, Checkpoint};

fn run(args: &[&dyn AsRef<std::ffi::OsStr>]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_simpgan")).args(args.iter().map(|a| a.as_ref())).output().unwrap();
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.code().unwrap_or(-1), text)
}

fn ok(args: &[&dyn AsRef<std::ffi::OsStr>]) {
    let (code, text) = run(args);
    assert_eq!(code, 0, "{text}");
}

fn gen(dir: &Path, style: &str, domain: &str, seed: &str) {
    ok(&[&"gen-data", &"--out", &dir, &"--identities", &"4", &"--views", &"3", &"--style", &style, &"--domain", &domain, &"--seed", &seed, &"--height", &"16", &"--width", &"16"]);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        gen(&root.join("src"), "source", "source", "1");
        gen(&root.join("tgt"), "target", "target", "1001");
        Fixture { _tmp: tmp, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn classifier(&self, out: &str, iters: &str) -> PathBuf {
        ok(&[&"train-classifier", &"--source", &self.p("src"), &"--out", &self.p(out), &"--iters", &iters, &"--stages", &"2,4", &"--seed", &"3", &"--force"]);
        self.p(out).join("classifier.ckpt")
    }

    fn gan_args(&self, out: &str) -> Vec<Box<dyn AsRef<std::ffi::OsStr>>> {
        vec![
            Box::new("train-simpgan"),
            Box::new("--source"),
            Box::new(self.p("src")),
            Box::new("--target"),
            Box::new(self.p("tgt")),
            Box::new("--classifier"),
            Box::new(self.p("clf").join("classifier.ckpt")),
            Box::new("--out"),
            Box::new(self.p(out)),
            Box::new("--gen-base"),
            Box::new("1"),
            Box::new("--disc-base"),
            Box::new("1"),
            Box::new("--residual-blocks"),
            Box::new("1"),
            Box::new("--force"),
        ]
    }
}

fn run_boxed(args: &[Box<dyn AsRef<std::ffi::OsStr>>], extra: &[&str]) -> (i32, String) {
    let mut all: Vec<&dyn AsRef<std::ffi::OsStr>> = args.iter().map(|b| b.as_ref() as &dyn AsRef<std::ffi::OsStr>).collect();
    all.extend(extra.iter().map(|s| s as &dyn AsRef<std::ffi::OsStr>));
    run(&all)
}

fn manifest(dir: &Path) -> String {
    fs::read_to_string(dir.join("run_manifest.txt")).unwrap()
}

#[test]
fn gen_data_is_reproducible_and_guards_its_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&[&"gen-data", &"--out", d, &"--identities", &"20", &"--views", &"8", &"--seed", &"7", &"--height", &"16", &"--width", &"16"]);
    }
    let strip = |v: Vec<(String, Vec<u8>)>| v.into_iter().filter(|(n, _)| n != "run_manifest.txt").collect::<Vec<_>>();
    assert_eq!(strip(files(&a)), strip(files(&b)));
    assert_eq!(load_dataset(&a).unwrap().len(), 160);
    let hashes = |d: &Path| manifest(d).lines().filter(|l| l.starts_with("output.img")).map(String::from).collect::<Vec<_>>();
    assert_eq!(hashes(&a).len(), 160);
    assert_eq!(hashes(&a), hashes(&b));

    let (code, _) = run(&[&"gen-data", &"--out", &a]);
    assert_eq!(code, 1);
    ok(&[&"gen-data", &"--out", &a, &"--force", &"--height", &"16", &"--width", &"16"]);
    let (code, text) = run(&[&"gen-data", &"--identities", &"3"]);
    assert_eq!(code, 1, "{text}");
    let (code, _) = run(&[&"gen-data", &"--out", &tmp.path().join("c"), &"--style", &"brightness=9"]);
    assert_eq!(code, 1);
}

#[test]
fn style_presets_change_pixel_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    gen(&tmp.path().join("s"), "source", "source", "4");
    gen(&tmp.path().join("t"), "target", "target", "4");
    let s = load_dataset(&tmp.path().join("s")).unwrap();
    let t = load_dataset(&tmp.path().join("t")).unwrap();
    assert!(s.mean_intensity() - t.mean_intensity() > 0.1);
    let channel_mean = |d: &simpgan::synth::Dataset, c: usize| {
        let vals: Vec<f64> = (0..d.len()).flat_map(|i| d.pixels(i).iter().skip(c).step_by(3).map(|&v| f64::from(v)).collect::<Vec<_>>()).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    // the target cast tips the balance towards blue
    assert!(channel_mean(&t, 2) - channel_mean(&t, 0) > channel_mean(&s, 2) - channel_mean(&s, 0));
}

#[test]
fn train_classifier_writes_reproducible_artifacts() {
    let f = Fixture::new();
    let ckpt = f.classifier("clf", "6");
    let trace = fs::read(f.p("clf").join("classifier_trace.csv")).unwrap();
    assert!(String::from_utf8_lossy(&trace).starts_with("iter,L_all,L_v,L_id\n"));
    let first = fs::read(&ckpt).unwrap();
    f.classifier("clf", "6");
    assert_eq!(fs::read(&ckpt).unwrap(), first);
    assert_eq!(fs::read(f.p("clf").join("classifier_trace.csv")).unwrap(), trace);
    let m = manifest(&f.p("clf"));
    assert!(m.starts_with("command=train-classifier\n"));
    assert!(m.contains("input.source.sha256=") && m.contains("output.classifier.ckpt.sha256="));

    // zero iterations return the initialization
    let init = f.classifier("clf0", "0");
    let model = classifier_from_checkpoint(&Checkpoint::load(&init).unwrap()).unwrap();
    let cfg = ClassifierConfig { height: 16, width: 16, stage_channels: vec![2, 4], ..ClassifierConfig::new(4) };
    let fresh: SiameseModel<f32> = SiameseModel::init(cfg, derive_seed(3, "classifier-init")).unwrap();
    assert_eq!(model.params(), fresh.params());

    let (code, text) = run(&[&"train-classifier", &"--source", &f.p("missing"), &"--out", &f.p("x")]);
    assert_eq!(code, 2, "{text}");
    let (code, _) = run(&[&"train-classifier", &"--source", &f.p("src"), &"--out", &f.p("x"), &"--lr", &"1e30", &"--iters", &"40", &"--stages", &"2,4"]);
    assert_eq!(code, 3);
}

#[test]
fn train_simpgan_flags_and_reproducibility() {
    let f = Fixture::new();
    f.classifier("clf", "4");
    let args = f.gan_args("gan");
    let (code, text) = run_boxed(&args, &["--iters", "3"]);
    assert_eq!(code, 0, "{text}");
    let m = manifest(&f.p("gan"));
    assert!(m.contains("\nlambda1=10\n") && m.contains("\nlambda2=1\n"), "{m}");
    let ckpt = fs::read(f.p("gan").join("gan.ckpt")).unwrap();
    let trace = fs::read(f.p("gan").join("gan_trace.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&trace).lines().count(), 4);
    run_boxed(&args, &["--iters", "3"]);
    assert_eq!(fs::read(f.p("gan").join("gan.ckpt")).unwrap(), ckpt);
    assert_eq!(fs::read(f.p("gan").join("gan_trace.csv")).unwrap(), trace);
    assert_eq!(manifest(&f.p("gan")), m);

    let (code, _) = run_boxed(&args, &["--variant", "gan_only", "--lambda1", "5"]);
    assert_eq!(code, 1);
    let (code, _) = run_boxed(&args, &["--variant", "direct_transfer"]);
    assert_eq!(code, 1);
    let (code, text) = run_boxed(&f.gan_args("gan_only"), &["--variant", "gan_only", "--iters", "1"]);
    assert_eq!(code, 0, "{text}");
    assert!(manifest(&f.p("gan_only")).contains("\nlambda1=0\n"));

    let mut bytes = fs::read(f.p("clf").join("classifier.ckpt")).unwrap();
    bytes[4] = 9;
    fs::write(f.p("clf").join("classifier.ckpt"), bytes).unwrap();
    let (code, text) = run_boxed(&args, &["--iters", "1"]);
    assert_eq!(code, 2);
    assert!(text.contains("version 9"), "{text}");
}

#[test]
fn evaluate_writes_all_reports() {
    let f = Fixture::new();
    f.classifier("clf", "4");
    let (code, text) = run_boxed(&f.gan_args("gan0"), &["--iters", "0"]);
    assert_eq!(code, 0, "{text}");
    let clf = f.p("clf").join("classifier.ckpt");

    ok(&[&"evaluate", &"--classifier", &clf, &"--target", &f.p("tgt"), &"--out", &f.p("dt")]);
    ok(&[&"evaluate", &"--classifier", &clf, &"--gan", &f.p("gan0").join("gan.ckpt"), &"--target", &f.p("tgt"), &"--out", &f.p("via")]);
    for dir in ["dt", "via"] {
        for file in ["cmc.csv", "shift.csv", "embeddings.csv", "pca.csv", "run_manifest.txt"] {
            assert!(f.p(dir).join(file).is_file(), "{dir}/{file}");
        }
    }
    let dt = CmcReport::from_csv(&f.p("dt").join("cmc.csv")).unwrap();
    let via = CmcReport::from_csv(&f.p("via").join("cmc.csv")).unwrap();
    assert_eq!(dt.ranks, [1, 5, 10]);
    assert!(dt.is_monotone() && via.is_monotone());
    // identity-initialized generators change nothing
    assert_eq!(dt.accuracy, via.accuracy);
    let shift = fs::read_to_string(f.p("dt").join("shift.csv")).unwrap();
    assert!(shift.starts_with("metric,value\ncentroid_distance_before,"));
    let emb = fs::read_to_string(f.p("via").join("embeddings.csv")).unwrap();
    assert!(emb.starts_with("sample_id,domain,transformed,dim_0,dim_1,dim_2,dim_3\n"));
    assert_eq!(emb.lines().count(), 1 + 12 * 3);
    assert!(manifest(&f.p("via")).contains("\nmode=via_F\n"));

    let (code, _) = run(&[&"evaluate", &"--classifier", &f.p("nothing.ckpt"), &"--target", &f.p("tgt"), &"--out", &f.p("e")]);
    assert_eq!(code, 2);
    let (code, _) = run(&[&"evaluate", &"--classifier", &clf, &"--target", &f.p("tgt"), &"--out", &f.p("e2"), &"--ranks", &"0"]);
    assert_eq!(code, 2);
}
