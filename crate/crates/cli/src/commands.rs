use std::fs;
use std::path::{Path, PathBuf};

use bundleflow::baselines::{
    build_big_bundle_menu, build_small_bundle_menu, grand_bundle_search, train_bundle_rochetnet,
    train_fixed_prices, FixedAllocationMenu, GrandBundleResult, RochetNetState,
};
use bundleflow::checkpoint;
use bundleflow::eval::{
    ablation_sweep, collect_snapshots, evaluate, field_lattice, write_lattice_csv, write_snapshot_csv,
    EvalReport, ProductEval, ProductMechanism, SweepBase, SweepParam,
};
use bundleflow::flow::FlowConfig;
use bundleflow::menu::{train_menu_steps, CompiledMenu, MenuLogRecord, MenuState, MenuTrainConfig};
use bundleflow::stage1::{coverage_report, train_flow_steps, LossRecord, Stage1Config, Stage1State, MAX_COVERAGE_ITEMS};
use bundleflow::valuations::{generate_synthetic, load_cats_files, split, SplitTag, ValuationDataset};
use bundleflow::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const FLOW_KIND: &str = "flow";
pub const MENU_KIND: &str = "menu";
pub const FIXED_KIND: &str = "fixed-menu";
pub const PRODUCT_KIND: &str = "product-menu";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BaselineKind {
    Grand,
    Big,
    Small,
    Rochetnet,
}

impl BaselineKind {
    fn name(self) -> &'static str {
        match self {
            BaselineKind::Grand => "grand",
            BaselineKind::Big => "big",
            BaselineKind::Small => "small",
            BaselineKind::Rochetnet => "rochetnet",
        }
    }
}

/// Interruption and resumption controls shared by the training commands.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunControl {
    pub resume: bool,
    /// Stop (after checkpointing) once this many iterations are done.
    pub halt_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub source: String,
    pub cats_files: Vec<PathBuf>,
    pub m: usize,
    pub v_max: f64,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCheckpoint {
    pub stage1: Stage1Config,
    pub flow: FlowConfig,
    pub state: Stage1State,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MenuCheckpoint {
    pub config: MenuTrainConfig,
    pub flow: FlowConfig,
    /// Relative to the run directory.
    pub flow_checkpoint: PathBuf,
    pub m: usize,
    pub v_max: f64,
    pub state: MenuState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedBaseline {
    pub baseline: String,
    pub menu: FixedAllocationMenu,
    pub log: Vec<MenuLogRecord>,
    pub truncated: bool,
    pub grand: Option<GrandBundleResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductBaseline {
    pub state: RochetNetState,
    pub certified_dsic: bool,
    pub max_binary_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    #[serde(flatten)]
    pub report: EvalReport,
    pub certified_dsic: bool,
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub run_dir: PathBuf,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found")),
        ))
    }
}

impl Ctx {
    pub fn new(cfg: RunConfig, out_root: &Path) -> Self {
        let run_dir = out_root.join(&cfg.run_id);
        Self { cfg, run_dir }
    }

    fn dir(&self, kind: &str) -> Result<PathBuf> {
        let d = self.run_dir.join(kind);
        io(&d, fs::create_dir_all(&d))?;
        Ok(d)
    }

    fn write_config(&self, dir: &Path) -> Result<()> {
        let p = dir.join("config.toml");
        io(&p, fs::write(&p, self.cfg.to_toml()))
    }

    fn flow_path(&self) -> PathBuf {
        self.run_dir.join("flow").join("checkpoint.json")
    }

    fn menu_path(&self) -> PathBuf {
        self.run_dir.join("menu").join("checkpoint.json")
    }

    fn load_split(&self, split: SplitTag) -> Result<ValuationDataset> {
        let name = match split {
            SplitTag::Train => "train.jsonl",
            SplitTag::Test => "test.jsonl",
            SplitTag::Full => "full.jsonl",
        };
        let path = self.run_dir.join("data").join(name);
        require(&path, "dataset (run gen-data first)")?;
        let meta: DataMeta = read_json(&self.run_dir.join("data").join("meta.json"))?;
        let ds = ValuationDataset::load_jsonl(&path, Some(meta.v_max), split)?;
        if ds.config.m != self.cfg.auction.m {
            return Err(Error::config(
                "auction.m",
                format!("dataset has m = {} but the config says {}", ds.config.m, self.cfg.auction.m),
            ));
        }
        Ok(ds)
    }

    fn load_flow(&self) -> Result<FlowCheckpoint> {
        let path = self.flow_path();
        require(&path, "flow checkpoint (run train-flow first)")?;
        let ckpt: FlowCheckpoint = checkpoint::load(&path, FLOW_KIND)?;
        if ckpt.state.field.m() != self.cfg.auction.m {
            return Err(Error::config("auction.m", "flow checkpoint was trained for a different m"));
        }
        Ok(ckpt)
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    require(path, "file")?;
    let text = io(path, fs::read_to_string(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    io(path, fs::write(path, text + "\n"))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn gen_data(ctx: &Ctx) -> Result<DataMeta> {
    let cfg = &ctx.cfg;
    let (full, source) = if cfg.data.cats.is_empty() {
        let spec = cfg.synthetic_spec()?;
        (generate_synthetic(&spec, cfg.data.samples, cfg.data.seed)?, "synthetic".to_string())
    } else {
        let ds = load_cats_files(&cfg.data.cats)?;
        if ds.config.m != cfg.auction.m {
            return Err(Error::config(
                "auction.m",
                format!("CATS files have {} goods but the config says {}", ds.config.m, cfg.auction.m),
            ));
        }
        (ds, "cats".to_string())
    };
    let (train, test) = split(&full, cfg.data.train_fraction, cfg.data.seed)?;
    let dir = ctx.dir("data")?;
    train.save_jsonl(&dir.join("train.jsonl"))?;
    test.save_jsonl(&dir.join("test.jsonl"))?;
    let meta = DataMeta {
        source,
        cats_files: cfg.data.cats.clone(),
        m: full.config.m,
        v_max: full.config.v_max,
        train: train.len(),
        test: test.len(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    ctx.write_config(&dir)?;
    Ok(meta)
}

pub enum Outcome {
    Finished,
    Halted(usize),
}

pub fn train_flow(ctx: &Ctx, control: RunControl) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let stage1 = cfg.stage1_config();
    let flow = cfg.flow;
    let path = ctx.flow_path();
    let mut state = if control.resume {
        require(&path, "flow checkpoint to resume from")?;
        let ckpt: FlowCheckpoint = checkpoint::load(&path, FLOW_KIND)?;
        if ckpt.stage1 != stage1 || ckpt.flow != flow {
            return Err(Error::config("stage1", "checkpoint was written with a different configuration"));
        }
        ckpt.state
    } else {
        Stage1State::init(cfg.auction.m, &cfg.architecture(), &stage1)
    };
    let dir = ctx.dir("flow")?;
    ctx.write_config(&dir)?;
    let until = control.halt_at.unwrap_or(stage1.iterations).min(stage1.iterations);
    let every = cfg.checkpoints.flow_every;
    let save = |s: &Stage1State| {
        checkpoint::save(
            &path,
            FLOW_KIND,
            &FlowCheckpoint {
                stage1: stage1.clone(),
                flow,
                state: s.clone(),
            },
        )
    };
    train_flow_steps(&mut state, &stage1, &flow, until, |s| {
        if s.iteration % every == 0 {
            save(s)?;
        }
        Ok(())
    })?;
    save(&state)?;
    write_csv::<LossRecord>(&dir.join("log.csv"), &state.log)?;
    if state.iteration < stage1.iterations {
        return Ok(Outcome::Halted(state.iteration));
    }
    if cfg.auction.m <= MAX_COVERAGE_ITEMS && cfg.stage1.coverage_probes > 0 {
        let cov = coverage_report(&state.field, &stage1, &flow, cfg.stage1.coverage_probes, stage1.seed)?;
        write_json(&dir.join("coverage.json"), &cov)?;
    }
    Ok(Outcome::Finished)
}

fn menu_report(ckpt: &MenuCheckpoint, flow: &FlowCheckpoint, test: &ValuationDataset, ctx: &Ctx) -> Result<ReportFile> {
    let compiled = CompiledMenu::compile(&ckpt.state.menu, &flow.state.field, &ckpt.flow, ckpt.config.mode)?;
    Ok(ReportFile {
        report: evaluate("bundleflow", &compiled, &test.samples, ctx.cfg.eval.probes, ctx.cfg.eval.seed)?,
        certified_dsic: true,
    })
}

pub fn train_menu(ctx: &Ctx, control: RunControl) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    let flow = ctx.load_flow()?;
    if flow.flow != cfg.flow {
        return Err(Error::config("flow", "flow settings differ from those the field was trained with"));
    }
    let train = ctx.load_split(SplitTag::Train)?;
    let test = ctx.load_split(SplitTag::Test)?;
    let path = ctx.menu_path();
    let mut ckpt = if control.resume {
        require(&path, "menu checkpoint to resume from")?;
        let c: MenuCheckpoint = checkpoint::load(&path, MENU_KIND)?;
        if c.config != cfg.menu || c.flow != cfg.flow {
            return Err(Error::config("menu", "checkpoint was written with a different configuration"));
        }
        c
    } else {
        MenuCheckpoint {
            config: cfg.menu.clone(),
            flow: cfg.flow,
            flow_checkpoint: PathBuf::from("flow/checkpoint.json"),
            m: cfg.auction.m,
            v_max: train.config.v_max,
            state: MenuState::init(cfg.auction.m, train.config.v_max, &cfg.menu)?,
        }
    };
    let dir = ctx.dir("menu")?;
    ctx.write_config(&dir)?;
    let until = control.halt_at.unwrap_or(cfg.menu.iterations).min(cfg.menu.iterations);
    let every = cfg.checkpoints.menu_every;
    let snapshot = ckpt.clone();
    let save = |s: &MenuState| {
        let mut c = snapshot.clone();
        c.state = s.clone();
        checkpoint::save(&path, MENU_KIND, &c)
    };
    train_menu_steps(
        &mut ckpt.state,
        &cfg.menu,
        &flow.state.field,
        &cfg.flow,
        &train.samples,
        &test.samples,
        until,
        |s| {
            if s.iteration % every == 0 {
                save(s)?;
            }
            Ok(())
        },
    )?;
    checkpoint::save(&path, MENU_KIND, &ckpt)?;
    write_csv(&dir.join("log.csv"), &ckpt.state.log)?;
    if ckpt.state.iteration < cfg.menu.iterations {
        return Ok(Outcome::Halted(ckpt.state.iteration));
    }
    let report = menu_report(&ckpt, &flow, &test, ctx)?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(Outcome::Finished)
}

pub fn train_baseline(ctx: &Ctx, kind: BaselineKind) -> Result<ReportFile> {
    let cfg = &ctx.cfg;
    let train = ctx.load_split(SplitTag::Train)?;
    let test = ctx.load_split(SplitTag::Test)?;
    let dir = ctx.dir(&format!("baseline-{}", kind.name()))?;
    ctx.write_config(&dir)?;
    let m = cfg.auction.m;
    let path = dir.join("checkpoint.json");
    let report = match kind {
        BaselineKind::Grand => {
            let result = grand_bundle_search(&train.samples, &test.samples)?;
            let menu = FixedAllocationMenu::grand(m, result.price);
            let saved = FixedBaseline {
                baseline: kind.name().into(),
                menu,
                log: Vec::new(),
                truncated: false,
                grand: Some(result),
            };
            checkpoint::save(&path, FIXED_KIND, &saved)?;
            fixed_report(&saved, &test, ctx)?
        }
        BaselineKind::Big | BaselineKind::Small => {
            let build = if kind == BaselineKind::Big {
                build_big_bundle_menu
            } else {
                build_small_bundle_menu
            };
            let built = build(&train.config, cfg.baseline.k, cfg.baseline.seed)?;
            if built.truncated {
                eprintln!(
                    "warning: requested {} allocations but only {} non-empty bundles exist",
                    built.requested,
                    built.menu.len() - 1
                );
            }
            let state = train_fixed_prices(built.menu, &train.samples, &cfg.baseline.price)?;
            let saved = FixedBaseline {
                baseline: kind.name().into(),
                menu: state.menu,
                log: state.log,
                truncated: built.truncated,
                grand: None,
            };
            checkpoint::save(&path, FIXED_KIND, &saved)?;
            write_csv(&dir.join("log.csv"), &saved.log)?;
            fixed_report(&saved, &test, ctx)?
        }
        BaselineKind::Rochetnet => {
            let state = train_bundle_rochetnet(m, train.config.v_max, &cfg.baseline.rochetnet, &train.samples)?;
            let saved = ProductBaseline {
                certified_dsic: state.certified_dsic(),
                max_binary_gap: state.menu.max_binary_gap(),
                state,
            };
            checkpoint::save(&path, PRODUCT_KIND, &saved)?;
            write_csv(&dir.join("log.csv"), &saved.state.log)?;
            product_report(&saved, &test, ctx)?
        }
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

fn fixed_report(saved: &FixedBaseline, test: &ValuationDataset, ctx: &Ctx) -> Result<ReportFile> {
    Ok(ReportFile {
        report: evaluate(&saved.baseline, &saved.menu, &test.samples, ctx.cfg.eval.probes, ctx.cfg.eval.seed)?,
        certified_dsic: true,
    })
}

/// Binary menus are evaluated exactly at their rounded allocations. Other
/// menus choose by sampled values, as in training, and are not certified.
fn product_report(saved: &ProductBaseline, test: &ValuationDataset, ctx: &Ctx) -> Result<ReportFile> {
    let (probes, seed) = (ctx.cfg.eval.probes, ctx.cfg.eval.seed);
    let report = if saved.certified_dsic {
        evaluate("rochetnet", &saved.state.menu.rounded(), &test.samples, probes, seed)?
    } else {
        let mech = ProductMechanism {
            menu: saved.state.menu.clone(),
            eval: ProductEval::Sampled {
                draws: ctx.cfg.baseline.rochetnet.draws,
                seed,
            },
        };
        evaluate("rochetnet", &mech, &test.samples, probes, seed)?
    };
    Ok(ReportFile {
        report,
        certified_dsic: saved.certified_dsic,
    })
}

pub fn evaluate_checkpoint(ctx: &Ctx, path: Option<PathBuf>) -> Result<(PathBuf, ReportFile)> {
    let path = path.unwrap_or_else(|| ctx.menu_path());
    require(&path, "checkpoint")?;
    let test = ctx.load_split(SplitTag::Test)?;
    let kind = checkpoint::peek_kind(&path)?;
    let report = match kind.as_str() {
        MENU_KIND => {
            let ckpt: MenuCheckpoint = checkpoint::load(&path, MENU_KIND)?;
            let flow_path = ctx.run_dir.join(&ckpt.flow_checkpoint);
            require(&flow_path, "flow checkpoint referenced by the menu")?;
            let flow: FlowCheckpoint = checkpoint::load(&flow_path, FLOW_KIND)?;
            menu_report(&ckpt, &flow, &test, ctx)?
        }
        FIXED_KIND => fixed_report(&checkpoint::load(&path, FIXED_KIND)?, &test, ctx)?,
        PRODUCT_KIND => product_report(&checkpoint::load(&path, PRODUCT_KIND)?, &test, ctx)?,
        other => return Err(Error::Format(format!("unknown checkpoint kind `{other}`"))),
    };
    let out = path.with_file_name("report.json");
    write_json(&out, &report)?;
    Ok((out, report))
}

pub fn sweep(ctx: &Ctx, param: SweepParam, values: &[usize], seeds: &[u64]) -> Result<PathBuf> {
    let cfg = &ctx.cfg;
    let flow = ctx.load_flow()?;
    let train = ctx.load_split(SplitTag::Train)?;
    let test = ctx.load_split(SplitTag::Test)?;
    let base = SweepBase {
        m: cfg.auction.m,
        v_max: train.config.v_max,
        menu: &cfg.menu,
        vf: &flow.state.field,
        flow: &cfg.flow,
        train: &train.samples,
        test: &test.samples,
    };
    let table = ablation_sweep(param, values, seeds, &base)?;
    let dir = ctx.dir("sweep")?;
    ctx.write_config(&dir)?;
    let path = dir.join(format!("{param}.csv"));
    let file = io(&path, fs::File::create(&path))?;
    table.write_csv(file)?;
    Ok(path)
}

/// Replays the finished menu run and writes one snapshot per interval. The
/// replay must reproduce the stored checkpoint exactly.
pub fn export_snapshots(ctx: &Ctx, interval: usize, resolution: usize) -> Result<usize> {
    let path = ctx.menu_path();
    require(&path, "menu checkpoint (run train-menu first)")?;
    let ckpt: MenuCheckpoint = checkpoint::load(&path, MENU_KIND)?;
    if ckpt.state.iteration < ckpt.config.iterations {
        return Err(Error::config("menu.iterations", "the menu run has not finished; resume it first"));
    }
    let flow: FlowCheckpoint = checkpoint::load(&ctx.run_dir.join(&ckpt.flow_checkpoint), FLOW_KIND)?;
    let train = ctx.load_split(SplitTag::Train)?;
    let test = ctx.load_split(SplitTag::Test)?;
    let mut state = MenuState::init(ckpt.m, ckpt.v_max, &ckpt.config)?;
    let snaps = collect_snapshots(
        &mut state,
        &ckpt.config,
        &flow.state.field,
        &ckpt.flow,
        &train.samples,
        &test.samples,
        interval,
    )?;
    if state.menu != ckpt.state.menu {
        return Err(Error::Format("replayed menu differs from the stored checkpoint".into()));
    }
    let dir = ctx.dir("snapshots")?;
    for s in &snaps {
        let csv_path = dir.join(format!("{}.csv", s.iteration));
        write_snapshot_csv(s, io(&csv_path, fs::File::create(&csv_path))?)?;
        write_json(&dir.join(format!("{}.json", s.iteration)), s)?;
    }
    let m = ckpt.m;
    if m >= 2 {
        let lattice = field_lattice(&flow.state.field, 0.0, &vec![0.5; m], (0, 1), resolution)?;
        let p = dir.join("field.csv");
        write_lattice_csv(&lattice, io(&p, fs::File::create(&p))?)?;
    }
    ctx.write_config(&dir)?;
    Ok(snaps.len())
}
