use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use simpgan::classifier::ClassifierConfig;
use simpgan::eval::{
    cmc, dataset_features, pca_project_2d, rows, single_shot_split, write_embeddings, write_pca, EmbeddingRow, TransformMode,
};
use simpgan::synth::{generate_dataset, load_dataset, save_dataset, Dataset, Domain, DomainStyle, GenConfig};
use simpgan::train::{
    classifier_checkpoint, classifier_from_checkpoint, gan_checkpoint, gan_from_checkpoint, pretrain_classifier, train_simpgan,
    write_classifier_trace, write_gan_trace, Checkpoint, TrainConfig, Variant,
};
use simpgan::transgan::{GanConfig, RealTermReading};

const MANIFEST: &str = "run_manifest.txt";

#[derive(Parser)]
#[command(name = "simpgan", version, about = "Desk-scale SimPGAN person re-identification runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sprite dataset.
    GenData(GenDataArgs),
    /// Pretrain the siamese classifier on a labeled source dataset.
    TrainClassifier(TrainClassifierArgs),
    /// Train the style translators against a frozen classifier.
    TrainSimpgan(TrainSimpganArgs),
    /// Rank-k retrieval, centroid shift and embedding export on a target dataset.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct Output {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    output: Output,
    #[arg(long, default_value_t = 20)]
    identities: usize,
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// Preset (source, target, null) or key=value list, e.g. `target,noise=0.1`.
    #[arg(long, default_value = "source")]
    style: String,
    #[arg(long, default_value = "source", value_parser = ["source", "target"])]
    domain: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[command(flatten)]
    output: Output,
    #[arg(long)]
    source: PathBuf,
    #[arg(long, default_value_t = 3000)]
    iters: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Backbone stage widths; the last is the embedding dimension.
    #[arg(long, default_value = "16,32,64,64", value_delimiter = ',')]
    stages: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    positive_ratio: f64,
    #[arg(long, default_value_t = 1)]
    pairs_per_iter: usize,
    /// Save an intermediate checkpoint every this many iterations (0: never).
    #[arg(long, default_value_t = 0)]
    checkpoint_interval: usize,
}

#[derive(Args)]
struct TrainSimpganArgs {
    #[command(flatten)]
    output: Output,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long, default_value = "simpgan", value_parser = ["simpgan", "gan_only"])]
    variant: String,
    /// Cycle weight (default 10).
    #[arg(long)]
    lambda1: Option<f64>,
    /// Similarity weight (default 1).
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long, default_value_t = 3000)]
    iters: usize,
    #[arg(long, default_value_t = 0.002)]
    lr_gen: f64,
    #[arg(long, default_value_t = 0.002)]
    lr_disc: f64,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    gen_base: usize,
    #[arg(long, default_value_t = 8)]
    disc_base: usize,
    #[arg(long, default_value_t = 2)]
    residual_blocks: usize,
    /// Which real images each discriminator sees: by_role or literal.
    #[arg(long, default_value = "by_role")]
    real_term: String,
    #[arg(long, default_value_t = 0.5)]
    positive_ratio: f64,
    #[arg(long, default_value_t = 1)]
    pairs_per_iter: usize,
    #[arg(long, default_value_t = 0)]
    checkpoint_interval: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    output: Output,
    #[arg(long)]
    classifier: PathBuf,
    /// Translate target images through this checkpoint's F before embedding.
    #[arg(long)]
    gan: Option<PathBuf>,
    #[arg(long)]
    target: PathBuf,
    /// Source dataset for the shift report; defaults to the one the classifier was trained on.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value = "1,5,10", value_delimiter = ',')]
    ranks: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    distractors: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(simpgan::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        use simpgan::Error as E;
        match self {
            CliError::Usage(_) | CliError::Core(E::Config(_)) => 1,
            CliError::Core(E::Diverged { .. } | E::NonFiniteParam(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl<E: Into<simpgan::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Flat `key=value` record of one command. The file is written before any
/// work starts and rewritten with output hashes once the command succeeds.
struct Manifest {
    path: PathBuf,
    lines: Vec<(String, String)>,
}

impl Manifest {
    fn new(dir: &Path, command: &str) -> Self {
        Manifest { path: dir.join(MANIFEST), lines: vec![("command".into(), command.into())] }
    }

    fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.lines.push((key.into(), value.to_string()));
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.set(format!("input.{name}"), path.display());
        self.set(format!("input.{name}.sha256"), hash_path(path)?);
        Ok(())
    }

    fn write(&self) -> Result<()> {
        let mut f = fs::File::create(&self.path)?;
        for (k, v) in &self.lines {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }

    /// Records the hash of every file written to `dir` and rewrites the manifest.
    fn finish(mut self, dir: &Path) -> Result<()> {
        let mut names: Vec<String> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        for name in names.into_iter().filter(|n| n != MANIFEST) {
            let hash = hash_path(&dir.join(&name))?;
            self.set(format!("output.{name}.sha256"), hash);
        }
        self.write()
    }
}

/// SHA-256 of a file, or of a directory's sorted file names and contents.
fn hash_path(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries.iter().filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST)) {
            h.update(p.file_name().unwrap_or_default().as_encoded_bytes());
            h.update([0]);
            h.update(fs::read(p)?);
        }
    } else {
        h.update(fs::read(path)?);
    }
    Ok(hex::encode(h.finalize()))
}

fn prepare_output(o: &Output) -> Result<()> {
    if o.out.is_file() {
        return Err(CliError::Usage(format!("{} is a file", o.out.display())));
    }
    if o.out.is_dir() && fs::read_dir(&o.out)?.next().is_some() && !o.force {
        return Err(CliError::Usage(format!("output directory {} is not empty (use --force)", o.out.display())));
    }
    fs::create_dir_all(&o.out)?;
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let style = DomainStyle::parse(&a.style).map_err(CliError::Usage)?;
    let domain = if a.domain == "target" { Domain::Target } else { Domain::Source };
    prepare_output(&a.output)?;
    let mut m = Manifest::new(&a.output.out, "gen-data");
    m.set("identities", a.identities);
    m.set("views", a.views);
    m.set("style", style.describe());
    m.set("domain", domain);
    m.set("height", a.height);
    m.set("width", a.width);
    m.set("seed", a.seed);
    m.set("output.dir", a.output.out.display());
    m.write()?;
    let cfg = GenConfig { height: a.height, width: a.width, ..GenConfig::new(a.identities, a.views, style, domain, a.seed) };
    save_dataset(&generate_dataset(&cfg)?, &a.output.out)?;
    m.finish(&a.output.out)
}

fn load(path: &Path) -> Result<Dataset> {
    Ok(load_dataset(path)?)
}

fn with_entries(mut ckpt: Checkpoint, cfg: &TrainConfig, iteration: usize) -> Checkpoint {
    for (k, v) in cfg.entries() {
        ckpt = ckpt.with_meta(&format!("train.{k}"), v);
    }
    ckpt.with_meta("iteration", iteration)
}

fn train_classifier(a: &TrainClassifierArgs) -> Result<()> {
    let source = load(&a.source)?;
    let model_config = ClassifierConfig {
        height: source.height(),
        width: source.width(),
        stage_channels: a.stages.clone(),
        ..ClassifierConfig::new(source.num_identities())
    };
    model_config.validate()?;
    let cfg = TrainConfig {
        classifier_iters: a.iters,
        lr_classifier: a.lr,
        momentum_classifier: a.momentum,
        positive_ratio: a.positive_ratio,
        seed: a.seed,
        checkpoint_interval: a.checkpoint_interval,
        pairs_per_iter: a.pairs_per_iter,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    prepare_output(&a.output)?;
    let out = &a.output.out;
    let mut m = Manifest::new(out, "train-classifier");
    m.input("source", &a.source)?;
    for (k, v) in cfg.entries().into_iter().filter(|(k, _)| !k.starts_with("gan") && !k.starts_with("lambda")) {
        m.set(k, v);
    }
    m.set("stages", join(&a.stages));
    m.set("num_identities", model_config.num_identities);
    m.set("output.dir", out.display());
    m.write()?;

    let source_path = a.source.display().to_string();
    let save = |model: &_, it: usize, name: &str| -> simpgan::Result<()> {
        let ckpt = with_entries(classifier_checkpoint(model), &cfg, it).with_meta("source", &source_path);
        Ok(ckpt.save(&out.join(name))?)
    };
    let (model, trace) =
        pretrain_classifier(&source, model_config, &cfg, &mut |it, model| save(model, it, &format!("classifier_iter_{it}.ckpt")))?;
    save(&model, a.iters, "classifier.ckpt")?;
    write_classifier_trace(&out.join("classifier_trace.csv"), &trace)?;
    m.finish(out)
}

fn train_gan(a: &TrainSimpganArgs) -> Result<()> {
    let variant = Variant::parse(&a.variant)?;
    if variant == Variant::GanOnly && (a.lambda1.is_some() || a.lambda2.is_some()) {
        return Err(CliError::Usage("--variant gan_only fixes both lambdas at 0; drop --lambda1/--lambda2".into()));
    }
    let (source, target) = (load(&a.source)?, load(&a.target)?);
    let classifier = classifier_from_checkpoint(&Checkpoint::load(&a.classifier)?)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        gan_iters: a.iters,
        lr_generator: a.lr_gen,
        lr_discriminator: a.lr_disc,
        momentum_gan: a.momentum,
        lambda1: a.lambda1.unwrap_or(defaults.lambda1),
        lambda2: a.lambda2.unwrap_or(defaults.lambda2),
        positive_ratio: a.positive_ratio,
        seed: a.seed,
        checkpoint_interval: a.checkpoint_interval,
        variant,
        pairs_per_iter: a.pairs_per_iter,
        ..defaults
    };
    cfg.validate()?;
    let gan_config = GanConfig {
        height: source.height(),
        width: source.width(),
        gen_base: a.gen_base,
        disc_base: a.disc_base,
        residual_blocks: a.residual_blocks,
        real_term: RealTermReading::parse(&a.real_term)?,
        ..GanConfig::default()
    };
    gan_config.validate()?;
    prepare_output(&a.output)?;
    let out = &a.output.out;
    let mut m = Manifest::new(out, "train-simpgan");
    m.input("source", &a.source)?;
    m.input("target", &a.target)?;
    m.input("classifier", &a.classifier)?;
    for (k, v) in cfg.entries().into_iter().filter(|(k, _)| !k.contains("classifier")) {
        m.set(k, v);
    }
    m.set("gen_base", a.gen_base);
    m.set("disc_base", a.disc_base);
    m.set("residual_blocks", a.residual_blocks);
    m.set("real_term", gan_config.real_term.as_str());
    m.set("output.dir", out.display());
    m.write()?;

    let save = |bundle: &_, it: usize, name: &str| -> simpgan::Result<()> {
        Ok(with_entries(gan_checkpoint(bundle), &cfg, it).save(&out.join(name))?)
    };
    let (bundle, trace) =
        train_simpgan(&source, &target, &classifier, gan_config, &cfg, &mut |it, b| save(b, it, &format!("gan_iter_{it}.ckpt")))?;
    save(&bundle, a.iters, "gan.ckpt")?;
    write_gan_trace(&out.join("gan_trace.csv"), &trace)?;
    m.finish(out)
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.classifier)?;
    let classifier = classifier_from_checkpoint(&ckpt)?;
    let gan = a.gan.as_deref().map(|p| Checkpoint::load(p).map_err(CliError::from).and_then(|c| Ok(gan_from_checkpoint(&c)?))).transpose()?;
    let source_path = match &a.source {
        Some(p) => p.clone(),
        None => PathBuf::from(ckpt.meta("source").map_err(|_| {
            CliError::Usage("the classifier checkpoint does not name its source dataset; pass --source".into())
        })?),
    };
    let (source, target) = (load(&source_path)?, load(&a.target)?);
    prepare_output(&a.output)?;
    let out = &a.output.out;
    let mode = if gan.is_some() { TransformMode::ViaF } else { TransformMode::None };
    let mut m = Manifest::new(out, "evaluate");
    m.input("classifier", &a.classifier)?;
    if let Some(g) = &a.gan {
        m.input("gan", g)?;
    }
    m.input("target", &a.target)?;
    m.input("source", &source_path)?;
    m.set("split_seed", a.split_seed);
    m.set("ranks", join(&a.ranks));
    m.set("distractors", a.distractors);
    m.set("mode", mode.as_str());
    m.set("output.dir", out.display());
    m.write()?;

    let split = single_shot_split(&target, a.split_seed, a.distractors)?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| target.identity(i)).collect::<Vec<_>>();
    let pf = dataset_features(&classifier, &target, &split.probe, gan.as_ref())?;
    let gf = dataset_features(&classifier, &target, &split.gallery, gan.as_ref())?;
    let report = cmc(&classifier, &pf, &ids(&split.probe), &gf, &ids(&split.gallery), &a.ranks, mode)?;
    report.write_csv(&out.join("cmc.csv"))?;

    let all = |d: &Dataset| (0..d.len()).collect::<Vec<_>>();
    let fs_ = rows(&dataset_features(&classifier, &source, &all(&source), None)?);
    let ft = rows(&dataset_features(&classifier, &target, &all(&target), None)?);
    let fv = match &gan {
        Some(g) => rows(&dataset_features(&classifier, &target, &all(&target), Some(g))?),
        None => ft.clone(),
    };
    simpgan::eval::centroid_shift(&fs_, &ft, &fv)?.write_csv(&out.join("shift.csv"))?;

    let label = |d: &Dataset, i: usize| format!("{}/{}", d.domain(i), d.file(i));
    let mut labels: Vec<(String, &str, bool)> = Vec::new();
    let mut values: Vec<&[f64]> = Vec::new();
    let mut sets: Vec<(&Dataset, &[Vec<f64>], bool)> = vec![(&source, &fs_, false), (&target, &ft, false)];
    if gan.is_some() {
        sets.push((&target, &fv, true));
    }
    for (d, feats, transformed) in sets {
        for (i, f) in feats.iter().enumerate() {
            labels.push((label(d, i), d.domain(i).as_str(), transformed));
            values.push(f);
        }
    }
    let emb: Vec<EmbeddingRow<'_>> = labels
        .iter()
        .zip(&values)
        .map(|((id, dom, t), v)| EmbeddingRow { sample_id: id, domain: dom, transformed: *t, values: v })
        .collect();
    write_embeddings(&out.join("embeddings.csv"), &emb)?;
    let points = pca_project_2d(&values.iter().map(|v| v.to_vec()).collect::<Vec<_>>())?;
    let plabels: Vec<(&str, &str, bool)> = labels.iter().map(|(id, d, t)| (id.as_str(), *d, *t)).collect();
    write_pca(&out.join("pca.csv"), &plabels, &points)?;

    let shown: Vec<String> = report.ranks.iter().zip(&report.accuracy).map(|(r, a)| format!("rank-{r} {a:.4}")).collect();
    println!("{} ({} probes, {} gallery): {}", mode.as_str(), report.probes, report.gallery, shown.join(", "));
    m.finish(out)
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainClassifier(a) => train_classifier(a),
        Command::TrainSimpgan(a) => train_gan(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
