use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lesionmine::config::PipelineConfig;
use lesionmine::detector::{Embedder, HeadParams, Proposal};
use lesionmine::domain::Annotation;
use lesionmine::eval::{evaluate_key_slices, evaluate_volumes, FrocMode, VolumeDetections};
use lesionmine::mining::{assemble_regions, Combination, MiningReport, RegionLabeling, SuspiciousPolicy};
use lesionmine::pipeline::experiment::{
    finetune, finetune_slices, key_slice_samples, mam_stage, nrm_stage, recovered, single_type_samples,
    to_volume_detections, train_config, train_initial, detect_set, SingleTypeSamples,
};
use lesionmine::pipeline::report::run_report;
use lesionmine::pipeline::run::RunManifest;
use lesionmine::pipeline::store::{self, load_prepared, read_index, read_slices, write_slices};
use lesionmine::pipeline::{generate_split, Arm, PreparedSet, SetKind};
use lesionmine::volio::manifest::{read_annotations, read_proposals, write_annotations, write_proposals};
use lesionmine::{Error, Result};

const MODEL: &str = "params.bin";
const DETECTIONS: &str = "detections.tsv";
const SLICES: &str = "slices.tsv";
const MINED: &str = "mined.tsv";
const SUSPICIOUS: &str = "suspicious.tsv";
const POSITIVE: &str = "positive.tsv";
const IGNORE: &str = "ignore.tsv";

#[derive(Parser)]
#[command(name = "lesionmine", version, about = "Lesion annotation mining and volumetric FROC on phantom CT")]
struct Cli {
    /// Pipeline configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's rng_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Out {
    /// Output directory (default: the configuration's paths.out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration.
    Config,
    /// Synthetic CT datasets with known ground truth.
    #[command(subcommand)]
    Phantom(PhantomCmd),
    /// Window, resample and clip a dataset directory onto the canonical grid.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        out: Out,
    },
    /// Train the initial detector on visible labels.
    Train {
        /// Preprocessed universal dataset.
        #[arg(long)]
        input: PathBuf,
        /// Preprocessed single-type datasets.
        #[arg(long = "single")]
        singles: Vec<PathBuf>,
        #[arg(long, value_enum)]
        combine: Option<CombineArg>,
        #[command(flatten)]
        out: Out,
    },
    /// Score, suppress and threshold proposals of every volume.
    Detect {
        #[arg(long)]
        input: PathBuf,
        /// Directory holding a trained model.
        #[arg(long)]
        model: PathBuf,
        /// Score column to rank by.
        #[arg(long)]
        dataset: Option<usize>,
        #[command(flatten)]
        out: Out,
    },
    /// Missing-annotation matching and negative-region mining.
    #[command(subcommand)]
    Mine(MineCmd),
    /// Label the finetuning slices into positive, ignore and negative regions.
    Assemble {
        #[arg(long)]
        input: PathBuf,
        /// Output of `mine mam`; its slices are the finetuning slices.
        #[arg(long)]
        mined: PathBuf,
        /// Output of `mine nrm`.
        #[arg(long)]
        suspicious: Option<PathBuf>,
        #[arg(long, value_enum)]
        suspicious_policy: Option<PolicyArg>,
        #[command(flatten)]
        out: Out,
    },
    /// Finetune a detector on assembled regions and the single-type datasets.
    Finetune {
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "single")]
        singles: Vec<PathBuf>,
        /// Output of `assemble`.
        #[arg(long)]
        regions: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        out: Out,
    },
    /// Detection evaluation.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Run every training arm on every configured seed, with θ and r sweeps.
    Report {
        #[command(flatten)]
        out: Out,
    },
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Generate a phantom dataset directory.
    Gen {
        #[arg(long, value_enum, default_value = "universal")]
        kind: KindArg,
        #[command(flatten)]
        out: Out,
    },
}

#[derive(Subcommand)]
enum MineCmd {
    /// Match proposals on the finetuning slices to annotations of the same patient.
    Mam {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        theta: Option<f64>,
        /// Unlabeled-slice ratio of the finetuning set.
        #[arg(long)]
        ratio: Option<f64>,
        #[command(flatten)]
        out: Out,
    },
    /// Flag proposals the single-type experts find confident but nothing explains.
    Nrm {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output of `mine mam`.
        #[arg(long)]
        mined: PathBuf,
        #[arg(long)]
        sigma: Option<f64>,
        #[command(flatten)]
        out: Out,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// FROC of a detection manifest against a dataset's ground truth.
    Froc {
        #[arg(long)]
        input: PathBuf,
        /// Output of `detect`.
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        dataset: Option<usize>,
        #[command(flatten)]
        out: Out,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Universal,
    Lung,
    Liver,
    LymphNode,
    Test,
    Calibration,
}

#[derive(Clone, Copy, ValueEnum)]
enum CombineArg {
    Single,
    Concat,
    ConcatPositive,
    Multitask,
    Proposed,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Ignore,
    Positive,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Volumetric,
    KeySlice,
}

impl KindArg {
    fn kind(self) -> Result<SetKind> {
        match self {
            KindArg::Universal => Ok(SetKind::Universal),
            KindArg::Test => Ok(SetKind::Test),
            KindArg::Calibration => Ok(SetKind::Calibration),
            KindArg::Lung => "lung".parse(),
            KindArg::Liver => "liver".parse(),
            KindArg::LymphNode => "lymph_node".parse(),
        }
    }
}

impl From<CombineArg> for Combination {
    fn from(c: CombineArg) -> Self {
        match c {
            CombineArg::Single => Combination::Single,
            CombineArg::Concat => Combination::Concat,
            CombineArg::ConcatPositive => Combination::ConcatPositive,
            CombineArg::Multitask => Combination::Multitask,
            CombineArg::Proposed => Combination::Proposed,
        }
    }
}

impl From<PolicyArg> for SuspiciousPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Ignore => SuspiciousPolicy::Ignore,
            PolicyArg::Positive => SuspiciousPolicy::Positive,
        }
    }
}

fn combination_name(c: Combination) -> &'static str {
    match c {
        Combination::Single => "single",
        Combination::Concat => "concat",
        Combination::ConcatPositive => "concat-positive",
        Combination::Multitask => "multitask",
        Combination::Proposed => "proposed",
    }
}

fn policy_name(p: SuspiciousPolicy) -> &'static str {
    match p {
        SuspiciousPolicy::Ignore => "ignore",
        SuspiciousPolicy::Positive => "positive",
    }
}

/// Loaded configuration plus the effective seed.
struct Ctx {
    cfg: PipelineConfig,
    hash: String,
    seed: u64,
    config_path: Option<PathBuf>,
}

impl Ctx {
    fn manifest(&self, command: &str) -> Result<RunManifest> {
        let mut m = RunManifest::new(command, self.seed, &self.hash);
        if let Some(p) = &self.config_path {
            m.input(p)?;
        }
        Ok(m)
    }

    fn out_dir(&self, out: &Out) -> Result<PathBuf> {
        let dir = out.out.clone().unwrap_or_else(|| self.cfg.paths.out.clone());
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn embedder(&self) -> Result<Embedder> {
        Embedder::new(&self.cfg.embed)
    }

    fn load(&self, dir: &Path, embedder: &Embedder) -> Result<(PreparedSet, store::DatasetIndex)> {
        log::info!("loading {}", dir.display());
        load_prepared(dir, &self.cfg.proposal, embedder)
    }

    fn single_type(&self, dirs: &[PathBuf], embedder: &Embedder, m: &mut RunManifest) -> Result<SingleTypeSamples> {
        let mut sets = Vec::new();
        for dir in dirs {
            m.input(dir)?;
            let (set, index) = self.load(dir, embedder)?;
            let d = index.dataset_id()?;
            if d == 0 {
                return Err(Error::InvalidInput(format!("{} is not a single-type dataset", dir.display())));
            }
            sets.push((d, set, index.annotations));
        }
        let refs: Vec<_> = sets.iter().map(|(d, s, v)| (*d, s, v.as_slice())).collect();
        single_type_samples(&refs, self.seed, self.cfg.mining.positive_iou)
    }
}

fn load_model(dir: &Path) -> Result<HeadParams> {
    HeadParams::load(&dir.join(MODEL))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let ctx = Ctx {
        hash: cfg.hash(),
        seed: cli.seed.unwrap_or(cfg.rng_seed),
        config_path: cli.config.clone(),
        cfg,
    };
    let cfg = &ctx.cfg;
    match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::Phantom(PhantomCmd::Gen { kind, out }) => {
            let dir = ctx.out_dir(&out)?;
            let kind = kind.kind()?;
            let split = generate_split(&cfg.setup(), ctx.seed, kind)?;
            store::write_split(&dir, &split)?;
            let mut m = ctx.manifest("phantom gen")?;
            m.param("kind", format!("{kind:?}"))
                .param("visible", split.visible.len())
                .param("hidden", split.hidden.len());
            m.finish(&dir)?;
            Ok(())
        }
        Command::Preprocess { input, out } => {
            let dir = ctx.out_dir(&out)?;
            let mut m = ctx.manifest("preprocess")?;
            m.input(&input)?;
            store::preprocess_dir(&input, &dir, &cfg.preprocess)?;
            m.finish(&dir)?;
            Ok(())
        }
        Command::Train {
            input,
            singles,
            combine,
            out,
        } => {
            let combination: Combination = combine.map(Into::into).unwrap_or(cfg.mining.combination);
            let dir = ctx.out_dir(&out)?;
            let mut m = ctx.manifest("train")?;
            m.input(&input)?;
            m.param("combine", combination_name(combination));
            let e = ctx.embedder()?;
            let (u, index) = ctx.load(&input, &e)?;
            let base = key_slice_samples(&u, &index.annotations, cfg.mining.positive_iou)?;
            let st = if combination == Combination::Single {
                SingleTypeSamples::default()
            } else {
                ctx.single_type(&singles, &e, &mut m)?
            };
            let params = train_initial(combination, &base, &st, &train_config(&cfg.train, ctx.seed))?;
            params.save(&dir.join(MODEL))?;
            m.finish(&dir)?;
            Ok(())
        }
        Command::Detect {
            input,
            model,
            dataset,
            out,
        } => {
            let dir = ctx.out_dir(&out)?;
            let mut m = ctx.manifest("detect")?;
            m.input(&input)?.input(&model)?;
            let mut detect = cfg.detect;
            if let Some(d) = dataset {
                detect.dataset = d;
            }
            m.param("dataset", detect.dataset);
            let params = load_model(&model)?;
            let (set, _) = ctx.load(&input, &ctx.embedder()?)?;
            let dets: Vec<Proposal> = detect_set(&set, &params, &detect)?.into_iter().flat_map(|(_, p)| p).collect();
            write_proposals(&dir.join(DETECTIONS), &dets)?;
            m.param("detections", dets.len());
            m.finish(&dir)?;
            Ok(())
        }
        Command::Mine(MineCmd::Mam { input, theta, ratio, out }) => {
            let mut mining = cfg.mining.clone();
            if let Some(t) = theta {
                mining.theta = t;
            }
            if let Some(r) = ratio {
                mining.unlabeled_ratio = r;
            }
            mining.validate()?;
            let dir = ctx.out_dir(&out)?;
            let mut m = ctx.manifest("mine mam")?;
            m.input(&input)?;
            m.param("theta", mining.theta).param("ratio", mining.unlabeled_ratio);
            let (u, index) = ctx.load(&input, &ctx.embedder()?)?;
            let slices = finetune_slices(&u, &index.annotations, &mining, ctx.seed);
            let mam = mam_stage(&u, &index.annotations, &slices, &mining)?;
            write_slices(&dir.join(SLICES), &slices)?;
            write_annotations(&dir.join(MINED), &mam.mined)?;
            let report = MiningReport::new(mining.theta, mining.sigma, &mam.pairs, &mam.mined, &[]);
            fs::write(dir.join("mining_report.tsv"), report.render())?;
            m.param("mined", mam.mined.len());
            if !index.hidden.is_empty() {
                m.param("mined_recovering_hidden", recovered(&mam.mined, &index.hidden));
            }
            println!("mined {} boxes on {} slices", mam.mined.len(), slices.len());
            m.finish(&dir)?;
            Ok(())
        }
        Command::Mine(MineCmd::Nrm {
            input,
            model,
            mined,
            sigma,
            out,
        }) => {
            let mut mining = cfg.mining.clone();
            if let Some(s) = sigma {
                mining.sigma = s;
            }
            mining.validate()?;
            let dir = ctx.out_dir(&out)?;
            let mut m = ctx.manifest("mine nrm")?;
            m.input(&input)?.input(&model)?.input(&mined)?;
            m.param("sigma", mining.sigma);
            let params = load_model(&model)?;
            let slices = read_slices(&mined.join(SLICES))?;
            let mined_boxes = read_annotations(&mined.join(MINED))?;
            let (u, index) = ctx.load(&input, &ctx.embedder()?)?;
            let known: Vec<Annotation> = index.annotations.iter().chain(&mined_boxes).cloned().collect();
            let suspicious = nrm_stage(&u, &slices, &params, &known, &mining)?;
            write_annotations(&dir.join(SUSPICIOUS), &suspicious)?;
            let report = MiningReport::new(mining.theta, mining.sigma, &[], &mined_boxes, &suspicious);
            fs::write(dir.join("mining_report.tsv"), report.render())?;
            m.param("suspicious", suspicious.len());
            if !index.hidden.is_empty() {
                m.param("suspicious_on_hidden", recovered(&suspicious, &index.hidden));
            }
            println!("{} suspicious boxes", suspicious.len());
            m.finish(&dir)?;
            Ok(())
        }
        Command::Assemble {
            input,
            mined,
            suspicious,
            suspicious_policy,
            out,
        } => {
            let policy: SuspiciousPolicy = suspicious_policy.map(Into::into).unwrap_or(cfg.mining.suspicious_policy);
            let dir = ctx.out_dir(&out)?;
            let mut m = ctx.manifest("assemble")?;
            m.input(&input)?;
            m.param("suspicious_policy", policy_name(policy));
            let index = read_index(&input)?;
            m.input(&mined)?;
            let slices = read_slices(&mined.join(SLICES))?;
            let mined_boxes = read_annotations(&mined.join(MINED))?;
            let suspicious_boxes = match &suspicious {
                Some(p) => {
                    m.input(p)?;
                    read_annotations(&p.join(SUSPICIOUS))?
                }
                None => Vec::new(),
            };
            let lab = assemble_regions(&slices, &index.annotations, &mined_boxes, &suspicious_boxes, policy)?;
            write_slices(&dir.join(SLICES), &lab.iter().map(|l| l.slice.clone()).collect::<Vec<_>>())?;
            let pos: Vec<Annotation> = lab.iter().flat_map(|l| l.positive.iter().cloned()).collect();
            let ign: Vec<Annotation> = lab.iter().flat_map(|l| l.ignore.iter().cloned()).collect();
            write_annotations(&dir.join(POSITIVE), &pos)?;
            write_annotations(&dir.join(IGNORE), &ign)?;
            m.param("slices", lab.len()).param("positive", pos.len()).param("ignore", ign.len());
            m.finish(&dir)?;
            Ok(())
        }
        Command::Finetune {
            input,
            singles,
            regions,
            model,
            out,
        } => {
            let dir = ctx.out_dir(&out)?;
            let mut m = ctx.manifest("finetune")?;
            m.input(&input)?.input(&regions)?.input(&model)?;
            let init = load_model(&model)?;
            let lab = read_regions(&regions)?;
            let e = ctx.embedder()?;
            let (u, _) = ctx.load(&input, &e)?;
            let st = ctx.single_type(&singles, &e, &mut m)?;
            let params = finetune(
                &u,
                &lab,
                &st.own,
                &init,
                &train_config(&cfg.train, ctx.seed),
                cfg.mining.positive_iou,
            )?;
            params.save(&dir.join(MODEL))?;
            m.finish(&dir)?;
            Ok(())
        }
        Command::Eval(EvalCmd::Froc {
            input,
            detections,
            mode,
            dataset,
            out,
        }) => {
            let dir = ctx.out_dir(&out)?;
            let mut m = ctx.manifest("eval froc")?;
            m.input(&input)?.input(&detections)?;
            let mut froc = cfg.froc.clone();
            if let Some(md) = mode {
                froc.mode = match md {
                    ModeArg::Volumetric => FrocMode::Volumetric,
                    ModeArg::KeySlice => FrocMode::KeySlice,
                };
            }
            let d = dataset.unwrap_or(cfg.detect.dataset);
            m.param("mode", format!("{:?}", froc.mode)).param("dataset", d);
            let index = read_index(&input)?;
            let props = read_proposals(&detections.join(DETECTIONS))?;
            let dets = group_detections(&index.volume_ids, &props, d);
            let result = match froc.mode {
                FrocMode::Volumetric => evaluate_volumes(&index.volume_ids, &dets, &index.ground_truth, &froc)?,
                FrocMode::KeySlice => evaluate_key_slices(&dets, &index.ground_truth, &froc)?,
            };
            fs::write(dir.join("froc.tsv"), result.render_records())?;
            fs::write(dir.join("froc.txt"), result.render_table())?;
            print!("{}", result.render_table());
            m.finish(&dir)?;
            Ok(())
        }
        Command::Report { out } => {
            let dir = ctx.out_dir(&out)?;
            let mut m = ctx.manifest("report")?;
            let mut report_cfg = cfg.report.clone();
            if cli.seed.is_some() {
                report_cfg.seeds = vec![ctx.seed];
            }
            m.param(
                "seeds",
                report_cfg.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            );
            let report = run_report(&cfg.setup(), &report_cfg, &Arm::ALL)?;
            report.write(&dir)?;
            print!("{}", report.render_table());
            m.finish(&dir)?;
            Ok(())
        }
    }
}

/// Detection manifest grouped by volume, scored on column `d`.
fn group_detections(volumes: &[String], props: &[Proposal], d: usize) -> Vec<VolumeDetections> {
    let mut by: BTreeMap<&str, Vec<Proposal>> = BTreeMap::new();
    for p in props {
        by.entry(&p.volume_id).or_default().push(p.clone());
    }
    let grouped: Vec<(String, Vec<Proposal>)> = volumes
        .iter()
        .map(|v| (v.clone(), by.remove(v.as_str()).unwrap_or_default()))
        .collect();
    to_volume_detections(&grouped, d)
}

/// Region labelings written by `assemble`.
fn read_regions(dir: &Path) -> Result<Vec<RegionLabeling>> {
    let slices = read_slices(&dir.join(SLICES))?;
    let positive = read_annotations(&dir.join(POSITIVE))?;
    let ignore = read_annotations(&dir.join(IGNORE))?;
    let on = |anns: &[Annotation], v: &str, z: u32| -> Vec<Annotation> {
        anns.iter().filter(|a| a.volume_id == v && a.bbox.z == z).cloned().collect()
    };
    Ok(slices
        .into_iter()
        .map(|s| RegionLabeling {
            positive: on(&positive, &s.volume_id, s.z),
            ignore: on(&ignore, &s.volume_id, s.z),
            slice: s,
        })
        .collect())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
