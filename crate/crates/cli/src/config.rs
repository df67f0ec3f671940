//! Experiment configuration: a line-oriented grammar with `[section]`
//! headers and `key = value` entries, resolved into typed settings with
//! every unknown section or key rejected.
//!
//! Grammar: blank lines and lines whose first non-space character is `#`
//! are skipped; `[name]` opens a section; entries are `key = value` with
//! surrounding whitespace trimmed and the value running to end of line (no
//! trailing comments); a key may not repeat within its section; an empty
//! value means "unset" for optional keys. Command-line overrides arrive as
//! `section.key=value` and pass through the same validation as file text.
//!
//! Every key has a default, so the empty string is a valid config. The
//! resolved form re-serializes through [`ExperimentConfig::manifest_ini`]
//! with all defaults materialized; parsing that manifest reproduces the
//! resolved config exactly.

use indexmap::IndexMap;
use loramix_core::space::GroupingStrategy;
use loramix_core::{
    MlpRatio, ResourceConstraints, RouterConfig, RoutingAttribute, SearchConfig, SearchSpace,
    SubnetConfig, TrainConfig,
};
use std::fmt::Write as _;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config not found: {0}")]
    Missing(PathBuf),
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown config section [{0}]")]
    UnknownSection(String),
    #[error("unknown config key {section}.{key}")]
    UnknownKey { section: String, key: String },
    #[error("duplicate config key {section}.{key}")]
    DuplicateKey { section: String, key: String },
    #[error("bad value for {section}.{key}: {msg}")]
    BadValue {
        section: String,
        key: String,
        msg: String,
    },
    #[error("bad override {0:?}: expected section.key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("reading config: {0}")]
    Io(std::io::Error),
}

impl ConfigError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ConfigError::Missing(_) => 2,
            ConfigError::Io(_) => 1,
            _ => 3,
        }
    }
}

const SECTIONS: &[&str] = &["space", "data", "train", "mole", "search", "probe", "run"];

/// Parsed-but-untyped config text: section → key → value.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    sections: IndexMap<String, IndexMap<String, String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut raw = RawConfig::default();
        let mut current: Option<String> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("unterminated section header {line:?}"),
                })?;
                if !SECTIONS.contains(&name) {
                    return Err(ConfigError::UnknownSection(name.to_string()));
                }
                raw.sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: format!("expected `key = value`, got {line:?}"),
                });
            };
            let section = current.clone().ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: "entry before any [section] header".to_string(),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    msg: "empty key".to_string(),
                });
            }
            let entries = raw.sections.get_mut(&section).unwrap();
            if entries
                .insert(key.clone(), value.trim().to_string())
                .is_some()
            {
                return Err(ConfigError::DuplicateKey { section, key });
            }
        }
        Ok(raw)
    }

    /// Apply one `section.key=value` override; later overrides win.
    pub fn apply_set(&mut self, spec: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadOverride(spec.to_string());
        let (path, value) = spec.split_once('=').ok_or_else(bad)?;
        let (section, key) = path.trim().split_once('.').ok_or_else(bad)?;
        if section.is_empty() || key.is_empty() {
            return Err(bad());
        }
        if !SECTIONS.contains(&section) {
            return Err(ConfigError::UnknownSection(section.to_string()));
        }
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.trim().to_string());
        Ok(())
    }
}

/// One section's entries, consumed key by key so leftovers can be rejected.
struct SectionView {
    name: &'static str,
    entries: IndexMap<String, String>,
}

impl SectionView {
    fn new(raw: &mut RawConfig, name: &'static str) -> Self {
        let entries = raw
            .sections
            .get_mut(name)
            .map(std::mem::take)
            .unwrap_or_default();
        SectionView { name, entries }
    }

    fn bad(&self, key: &str, msg: impl Into<String>) -> ConfigError {
        ConfigError::BadValue {
            section: self.name.to_string(),
            key: key.to_string(),
            msg: msg.into(),
        }
    }

    /// Remove a key; empty values count as absent.
    fn raw(&mut self, key: &str) -> Option<String> {
        self.entries.shift_remove(key).filter(|v| !v.is_empty())
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| self.bad(key, format!("{e}"))),
        }
    }

    fn parse_opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| self.bad(key, format!("{e}"))),
        }
    }

    fn parse_list<T: std::str::FromStr>(
        &mut self,
        key: &str,
        default: &[T],
    ) -> Result<Vec<T>, ConfigError>
    where
        T: Clone,
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|e| self.bad(key, format!("{e}"))))
                .collect(),
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        if let Some((key, _)) = self.entries.first() {
            return Err(ConfigError::UnknownKey {
                section: self.name.to_string(),
                key: key.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpacePreset {
    Tiny,
    AutoformerT,
    AutoformerS,
    AutoformerB,
}

impl SpacePreset {
    fn name(self) -> &'static str {
        match self {
            SpacePreset::Tiny => "tiny",
            SpacePreset::AutoformerT => "autoformer-t",
            SpacePreset::AutoformerS => "autoformer-s",
            SpacePreset::AutoformerB => "autoformer-b",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoleMode {
    /// K experts per layer with the architecture-conditioned router.
    Mole,
    /// Ablation: a single expert per layer, mixture pinned to 1.
    SingleLora,
    /// No expert terms; `train-mole` runs the full-finetune baseline.
    Off,
}

impl MoleMode {
    fn name(self) -> &'static str {
        match self {
            MoleMode::Mole => "mole",
            MoleMode::SingleLora => "single_lora",
            MoleMode::Off => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterInit {
    GroupWise,
    Random,
}

impl RouterInit {
    fn name(self) -> &'static str {
        match self {
            RouterInit::GroupWise => "group_wise",
            RouterInit::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone)]
pub struct DataSettings {
    pub source: DataSource,
    pub classes: usize,
    pub samples: usize,
    pub noise: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub val_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct MoleSettings {
    pub mode: MoleMode,
    pub rank: usize,
    /// Expert count; 0 in the file means "one per group".
    pub experts: usize,
    pub router_init: RouterInit,
    pub attributes: Vec<RoutingAttribute>,
    pub beta: f64,
    pub grouping: GroupingStrategy,
}

#[derive(Debug, Clone)]
pub struct ProbeSettings {
    pub samples: usize,
    pub subnets: Option<Vec<SubnetConfig>>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub preset: SpacePreset,
    pub space: SearchSpace,
    pub data: DataSettings,
    pub train: TrainConfig,
    pub mole: MoleSettings,
    pub search: SearchConfig,
    pub probe: ProbeSettings,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub checkpoint_every: usize,
}

fn parse_attr(s: &str) -> Option<RoutingAttribute> {
    match s {
        "heads" => Some(RoutingAttribute::Heads),
        "mlp" => Some(RoutingAttribute::Mlp),
        "embed" => Some(RoutingAttribute::Embed),
        "depth" => Some(RoutingAttribute::Depth),
        _ => None,
    }
}

fn attr_name(a: RoutingAttribute) -> &'static str {
    match a {
        RoutingAttribute::Heads => "heads",
        RoutingAttribute::Mlp => "mlp",
        RoutingAttribute::Embed => "embed",
        RoutingAttribute::Depth => "depth",
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &PathBuf, sets: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                ConfigError::Missing(path.clone())
            } else {
                ConfigError::Io(e)
            }
        })?;
        let mut raw = RawConfig::parse(&text)?;
        for s in sets {
            raw.apply_set(s)?;
        }
        Self::resolve(raw)
    }

    pub fn resolve(mut raw: RawConfig) -> Result<Self, ConfigError> {
        // [run] first: the seed feeds grouping and search defaults.
        let mut run = SectionView::new(&mut raw, "run");
        let out_dir = PathBuf::from(run.raw("out_dir").unwrap_or_else(|| "out".to_string()));
        let seed: u64 = run.parse("seed", 0)?;
        run.finish()?;

        let mut sp = SectionView::new(&mut raw, "space");
        let preset = match sp.raw("preset").as_deref() {
            None | Some("tiny") => SpacePreset::Tiny,
            Some("autoformer-t") => SpacePreset::AutoformerT,
            Some("autoformer-s") => SpacePreset::AutoformerS,
            Some("autoformer-b") => SpacePreset::AutoformerB,
            Some(other) => return Err(sp.bad("preset", format!("unknown preset {other:?}"))),
        };
        let mut space = match preset {
            SpacePreset::Tiny => SearchSpace::tiny(2),
            SpacePreset::AutoformerT => SearchSpace::autoformer_tiny(),
            SpacePreset::AutoformerS => SearchSpace::autoformer_small(),
            SpacePreset::AutoformerB => SearchSpace::autoformer_base(),
        };
        space.num_classes = sp.parse("num_classes", space.num_classes)?;
        space.head_dim = sp.parse("head_dim", space.head_dim)?;
        space.patch_size = sp.parse("patch_size", space.patch_size)?;
        space.image_size = sp.parse("image_size", space.image_size)?;
        space.head_candidates = sp.parse_list("heads", &space.head_candidates)?;
        space.embed_candidates = sp.parse_list("embed", &space.embed_candidates)?;
        space.depth_candidates = sp.parse_list("depth", &space.depth_candidates)?;
        let mlp_default: Vec<f64> = space.mlp_candidates.iter().map(|m| m.as_f64()).collect();
        let mlp: Vec<f64> = sp.parse_list("mlp", &mlp_default)?;
        space.mlp_candidates = mlp
            .iter()
            .map(|&x| {
                if x <= 0.0 || x > 4_000_000.0 {
                    return Err(sp.bad("mlp", format!("ratio {x} out of range")));
                }
                Ok(MlpRatio::from_milli((x * 1000.0).round() as u32))
            })
            .collect::<Result<_, _>>()?;
        sp.finish()?;
        space
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("search space: {e}")))?;

        let mut da = SectionView::new(&mut raw, "data");
        let source = match da.raw("source").as_deref() {
            None | Some("synthetic") => DataSource::Synthetic,
            Some("idx") => DataSource::Idx,
            Some(other) => return Err(da.bad("source", format!("unknown source {other:?}"))),
        };
        let data = DataSettings {
            source,
            classes: da.parse("classes", space.num_classes)?,
            samples: da.parse("samples", 512)?,
            noise: da.parse("noise", 0.1)?,
            train_images: da.raw("train_images").map(PathBuf::from),
            train_labels: da.raw("train_labels").map(PathBuf::from),
            val_fraction: da.parse("val_fraction", 0.25)?,
        };
        da.finish()?;
        if data.classes != space.num_classes {
            return Err(ConfigError::Invalid(format!(
                "data.classes {} must equal space.num_classes {}",
                data.classes, space.num_classes
            )));
        }
        if !(data.val_fraction > 0.0 && data.val_fraction < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "data.val_fraction {} must lie strictly between 0 and 1",
                data.val_fraction
            )));
        }
        if data.source == DataSource::Idx
            && (data.train_images.is_none() || data.train_labels.is_none())
        {
            return Err(ConfigError::Invalid(
                "data.source = idx requires train_images and train_labels".to_string(),
            ));
        }

        let mut tr = SectionView::new(&mut raw, "train");
        let dt = TrainConfig::default();
        let train = TrainConfig {
            supernet_epochs: tr.parse("supernet_epochs", dt.supernet_epochs)?,
            mole_epochs: tr.parse("mole_epochs", dt.mole_epochs)?,
            warmup_epochs: tr.parse("warmup_epochs", dt.warmup_epochs)?,
            lora_lr_start: tr.parse("lora_lr_start", dt.lora_lr_start)?,
            lora_lr_peak: tr.parse("lora_lr_peak", dt.lora_lr_peak)?,
            router_lr: tr.parse("router_lr", dt.router_lr)?,
            batch_size: tr.parse("batch_size", dt.batch_size)?,
            weight_decay: tr.parse("weight_decay", dt.weight_decay)?,
            seed,
        };
        let checkpoint_every: usize = tr.parse("checkpoint_every", 0)?;
        tr.finish()?;
        train
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("training settings: {e}")))?;

        let mut mo = SectionView::new(&mut raw, "mole");
        let mode = match mo.raw("mode").as_deref() {
            None | Some("mole") => MoleMode::Mole,
            Some("single_lora") => MoleMode::SingleLora,
            Some("none") => MoleMode::Off,
            Some(other) => return Err(mo.bad("mode", format!("unknown mode {other:?}"))),
        };
        let rank: usize = mo.parse("rank", 8)?;
        let experts_key: usize = mo.parse("experts", 0)?;
        let router_init = match mo.raw("router_init").as_deref() {
            None | Some("group_wise") => RouterInit::GroupWise,
            Some("random") => RouterInit::Random,
            Some(other) => return Err(mo.bad("router_init", format!("unknown init {other:?}"))),
        };
        let attr_default: Vec<String> = RouterConfig::default()
            .attributes
            .iter()
            .map(|&a| attr_name(a).to_string())
            .collect();
        let attr_names: Vec<String> = mo.parse_list("attributes", &attr_default)?;
        let mut attributes = Vec::new();
        for n in &attr_names {
            let a = parse_attr(n).ok_or_else(|| {
                mo.bad("attributes", format!("unknown routing attribute {n:?}"))
            })?;
            if !attributes.contains(&a) {
                attributes.push(a);
            }
        }
        if attributes.is_empty() {
            return Err(mo.bad("attributes", "at least one routing attribute required"));
        }
        let beta: f64 = mo.parse("beta", 3.0)?;
        let grouping = match mo.raw("grouping").as_deref() {
            None | Some("architectural") => GroupingStrategy::Architectural,
            Some("random") => GroupingStrategy::Random { seed },
            Some("param_count") => GroupingStrategy::ParamCount,
            Some(other) => return Err(mo.bad("grouping", format!("unknown strategy {other:?}"))),
        };
        mo.finish()?;
        if rank == 0 {
            return Err(ConfigError::Invalid("mole.rank must be positive".into()));
        }
        let experts = match mode {
            MoleMode::Mole => {
                if experts_key == 0 {
                    space.group_count()
                } else {
                    experts_key
                }
            }
            MoleMode::SingleLora => {
                if experts_key > 1 {
                    return Err(ConfigError::Invalid(
                        "mole.mode = single_lora forces mole.experts = 1".to_string(),
                    ));
                }
                1
            }
            MoleMode::Off => 0,
        };
        if mode == MoleMode::Mole
            && router_init == RouterInit::GroupWise
            && experts < space.group_count()
        {
            return Err(ConfigError::Invalid(format!(
                "group_wise router init needs at least one expert per group: \
                 mole.experts = {experts} < {} groups",
                space.group_count()
            )));
        }
        let mole = MoleSettings {
            mode,
            rank,
            experts,
            router_init,
            attributes,
            beta,
            grouping,
        };

        let mut se = SectionView::new(&mut raw, "search");
        let ds = SearchConfig::default();
        let search = SearchConfig {
            population: se.parse("population", ds.population)?,
            generations: se.parse("generations", ds.generations)?,
            top_k: se.parse("top_k", ds.top_k)?,
            mutation_prob: se.parse("mutation_prob", ds.mutation_prob)?,
            crossover_prob: se.parse("crossover_prob", ds.crossover_prob)?,
            constraints: ResourceConstraints {
                max_params: se.parse_opt("max_params")?,
                max_flops: se.parse_opt("max_flops")?,
            },
            seed,
        };
        se.finish()?;
        if search.population == 0 || search.top_k == 0 {
            return Err(ConfigError::Invalid(
                "search.population and search.top_k must be positive".to_string(),
            ));
        }

        let mut pr = SectionView::new(&mut raw, "probe");
        let samples: usize = pr.parse("samples", loramix_core::probe::DEFAULT_PROBE_SAMPLES)?;
        let subnets = match pr.raw("subnets") {
            None => None,
            Some(text) => {
                let mut list = Vec::new();
                for part in text.split('|') {
                    let part = part.trim();
                    let s = SubnetConfig::parse_text(part)
                        .map_err(|e| pr.bad("subnets", format!("{part:?}: {e}")))?;
                    s.validate(&space)
                        .map_err(|e| pr.bad("subnets", format!("{part:?}: {e}")))?;
                    list.push(s);
                }
                Some(list)
            }
        };
        pr.finish()?;
        let probe = ProbeSettings { samples, subnets };

        for (name, entries) in &raw.sections {
            if !entries.is_empty() {
                return Err(ConfigError::UnknownKey {
                    section: name.clone(),
                    key: entries.first().unwrap().0.clone(),
                });
            }
        }

        Ok(ExperimentConfig {
            preset,
            space,
            data,
            train,
            mole,
            search,
            probe,
            out_dir,
            seed,
            checkpoint_every,
        })
    }

    /// Router sizing derived from the mole settings (paper-scale embedding
    /// and hidden widths are fixed).
    pub fn router_config(&self) -> RouterConfig {
        RouterConfig {
            attributes: self.mole.attributes.clone(),
            beta: self.mole.beta as f32,
            ..RouterConfig::default()
        }
    }

    /// The fully-resolved config as canonical grammar text; parsing this
    /// reproduces the resolved config, so a copy in the output directory
    /// freezes the experiment.
    pub fn manifest_ini(&self) -> String {
        fn join<T: std::fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
            items
                .into_iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        }
        let mut s = String::new();
        let w = &mut s;
        writeln!(w, "[space]").unwrap();
        writeln!(w, "preset = {}", self.preset.name()).unwrap();
        writeln!(w, "num_classes = {}", self.space.num_classes).unwrap();
        writeln!(w, "head_dim = {}", self.space.head_dim).unwrap();
        writeln!(w, "patch_size = {}", self.space.patch_size).unwrap();
        writeln!(w, "image_size = {}", self.space.image_size).unwrap();
        writeln!(w, "heads = {}", join(&self.space.head_candidates)).unwrap();
        writeln!(
            w,
            "mlp = {}",
            join(self.space.mlp_candidates.iter().map(|m| m.as_f64()))
        )
        .unwrap();
        writeln!(w, "embed = {}", join(&self.space.embed_candidates)).unwrap();
        writeln!(w, "depth = {}", join(&self.space.depth_candidates)).unwrap();
        writeln!(w).unwrap();
        writeln!(w, "[data]").unwrap();
        let src = match self.data.source {
            DataSource::Synthetic => "synthetic",
            DataSource::Idx => "idx",
        };
        writeln!(w, "source = {src}").unwrap();
        writeln!(w, "classes = {}", self.data.classes).unwrap();
        writeln!(w, "samples = {}", self.data.samples).unwrap();
        writeln!(w, "noise = {}", self.data.noise).unwrap();
        let path_str = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        writeln!(w, "train_images = {}", path_str(&self.data.train_images)).unwrap();
        writeln!(w, "train_labels = {}", path_str(&self.data.train_labels)).unwrap();
        writeln!(w, "val_fraction = {}", self.data.val_fraction).unwrap();
        writeln!(w).unwrap();
        writeln!(w, "[train]").unwrap();
        writeln!(w, "supernet_epochs = {}", self.train.supernet_epochs).unwrap();
        writeln!(w, "mole_epochs = {}", self.train.mole_epochs).unwrap();
        writeln!(w, "warmup_epochs = {}", self.train.warmup_epochs).unwrap();
        writeln!(w, "lora_lr_start = {}", self.train.lora_lr_start).unwrap();
        writeln!(w, "lora_lr_peak = {}", self.train.lora_lr_peak).unwrap();
        writeln!(w, "router_lr = {}", self.train.router_lr).unwrap();
        writeln!(w, "batch_size = {}", self.train.batch_size).unwrap();
        writeln!(w, "weight_decay = {}", self.train.weight_decay).unwrap();
        writeln!(w, "checkpoint_every = {}", self.checkpoint_every).unwrap();
        writeln!(w).unwrap();
        writeln!(w, "[mole]").unwrap();
        writeln!(w, "mode = {}", self.mole.mode.name()).unwrap();
        writeln!(w, "rank = {}", self.mole.rank).unwrap();
        writeln!(w, "experts = {}", self.mole.experts).unwrap();
        writeln!(w, "router_init = {}", self.mole.router_init.name()).unwrap();
        writeln!(
            w,
            "attributes = {}",
            join(self.mole.attributes.iter().map(|&a| attr_name(a)))
        )
        .unwrap();
        writeln!(w, "beta = {}", self.mole.beta).unwrap();
        let grouping = match self.mole.grouping {
            GroupingStrategy::Architectural => "architectural",
            GroupingStrategy::Random { .. } => "random",
            GroupingStrategy::ParamCount => "param_count",
        };
        writeln!(w, "grouping = {grouping}").unwrap();
        writeln!(w).unwrap();
        writeln!(w, "[search]").unwrap();
        writeln!(w, "population = {}", self.search.population).unwrap();
        writeln!(w, "generations = {}", self.search.generations).unwrap();
        writeln!(w, "top_k = {}", self.search.top_k).unwrap();
        writeln!(w, "mutation_prob = {}", self.search.mutation_prob).unwrap();
        writeln!(w, "crossover_prob = {}", self.search.crossover_prob).unwrap();
        let opt_str = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "max_params = {}",
            opt_str(self.search.constraints.max_params)
        )
        .unwrap();
        writeln!(
            w,
            "max_flops = {}",
            opt_str(self.search.constraints.max_flops)
        )
        .unwrap();
        writeln!(w).unwrap();
        writeln!(w, "[probe]").unwrap();
        writeln!(w, "samples = {}", self.probe.samples).unwrap();
        let subnets = self
            .probe
            .subnets
            .as_ref()
            .map(|list| {
                list.iter()
                    .map(|s| s.canonical_text())
                    .collect::<Vec<_>>()
                    .join(" | ")
            })
            .unwrap_or_default();
        writeln!(w, "subnets = {subnets}").unwrap();
        writeln!(w).unwrap();
        writeln!(w, "[run]").unwrap();
        writeln!(w, "out_dir = {}", self.out_dir.display()).unwrap();
        writeln!(w, "seed = {}", self.seed).unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(text: &str) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::resolve(RawConfig::parse(text).unwrap())
    }

    #[test]
    fn empty_config_resolves_to_defaults() {
        let cfg = resolve("").unwrap();
        assert_eq!(cfg.preset, SpacePreset::Tiny);
        assert_eq!(cfg.space.num_classes, 2);
        assert_eq!(cfg.train.mole_epochs, 50);
        assert_eq!(cfg.train.warmup_epochs, 5);
        assert_eq!(cfg.mole.rank, 8);
        assert_eq!(cfg.mole.experts, cfg.space.group_count());
        assert_eq!(cfg.search.population, 50);
        assert_eq!(cfg.probe.samples, 512);
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn comments_blanks_and_values_parse() {
        let cfg = resolve(
            "# experiment\n\n[train]\nsupernet_epochs = 3\n\n[run]\nseed = 9\nout_dir = runs/x\n",
        )
        .unwrap();
        assert_eq!(cfg.train.supernet_epochs, 3);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.search.seed, 9);
        assert_eq!(cfg.out_dir, PathBuf::from("runs/x"));
    }

    #[test]
    fn unknown_section_and_key_are_rejected() {
        assert!(matches!(
            RawConfig::parse("[nope]\nx = 1\n"),
            Err(ConfigError::UnknownSection(s)) if s == "nope"
        ));
        assert!(matches!(
            resolve("[train]\nlearning_rate = 1\n"),
            Err(ConfigError::UnknownKey { section, key })
                if section == "train" && key == "learning_rate"
        ));
    }

    #[test]
    fn duplicate_keys_and_bad_syntax_are_rejected() {
        assert!(matches!(
            RawConfig::parse("[train]\nbatch_size = 1\nbatch_size = 2\n"),
            Err(ConfigError::DuplicateKey { .. })
        ));
        assert!(matches!(
            RawConfig::parse("[train]\njust words\n"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            RawConfig::parse("key = 1\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn overrides_win_and_are_validated() {
        let mut raw = RawConfig::parse("[train]\nbatch_size = 16\n").unwrap();
        raw.apply_set("train.batch_size=32").unwrap();
        raw.apply_set("run.seed=7").unwrap();
        let cfg = ExperimentConfig::resolve(raw).unwrap();
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.seed, 7);
        let mut raw = RawConfig::default();
        assert!(matches!(
            raw.apply_set("no_dot_here"),
            Err(ConfigError::BadOverride(_))
        ));
        assert!(matches!(
            raw.apply_set("bogus.key=1"),
            Err(ConfigError::UnknownSection(_))
        ));
    }

    #[test]
    fn space_declaration_builds_custom_space() {
        let cfg = resolve(
            "[space]\nheads = 1,2,4\nmlp = 1.5,2\nembed = 8,16\ndepth = 1,2\nhead_dim = 4\npatch_size = 2\nimage_size = 8\nnum_classes = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.space.head_candidates, vec![1, 2, 4]);
        assert_eq!(cfg.space.mlp_candidates[0].milli(), 1500);
        assert_eq!(cfg.space.num_classes, 3);
        assert_eq!(cfg.space.group_count(), 12);
        assert_eq!(cfg.mole.experts, 12);
    }

    #[test]
    fn invalid_cross_field_combinations_are_rejected() {
        assert!(matches!(
            resolve("[data]\nclasses = 5\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            resolve("[data]\nsource = idx\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            resolve("[train]\nwarmup_epochs = 60\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            resolve("[mole]\nmode = single_lora\nexperts = 4\n"),
            Err(ConfigError::Invalid(_))
        ));
        // Group-committed init needs one expert seat per group (tiny: 8).
        assert!(matches!(
            resolve("[mole]\nexperts = 5\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(resolve("[mole]\nexperts = 5\nrouter_init = random\n").is_ok());
    }

    #[test]
    fn single_lora_and_off_modes_fix_expert_count() {
        assert_eq!(resolve("[mole]\nmode = single_lora\n").unwrap().mole.experts, 1);
        assert_eq!(resolve("[mole]\nmode = none\n").unwrap().mole.experts, 0);
        assert_eq!(resolve("[mole]\nexperts = 12\n").unwrap().mole.experts, 12);
    }

    #[test]
    fn probe_subnets_parse_and_validate() {
        let cfg = resolve("[probe]\nsubnets = 2:16:[1,2;2,4] | 3:24:[1,2;1,2;2,2]\n").unwrap();
        let subs = cfg.probe.subnets.unwrap();
        assert_eq!(subs.len(), 2);
        assert_eq!(subs[0].canonical_text(), "2:16:[1,2;2,4]");
        assert!(matches!(
            resolve("[probe]\nsubnets = 9:16:[1,2]\n"),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn manifest_round_trips_resolved_config() {
        let texts = [
            String::new(),
            "[space]\npreset = tiny\nnum_classes = 4\n[train]\nsupernet_epochs = 2\n[mole]\nrouter_init = random\nattributes = depth,heads\n[search]\nmax_params = 9000\n[probe]\nsubnets = 2:16:[1,2;2,4]\n[run]\nseed = 5\n"
                .to_string(),
        ];
        for text in texts {
            let a = resolve(&text).unwrap();
            let m1 = a.manifest_ini();
            let b = resolve(&m1).unwrap();
            let m2 = b.manifest_ini();
            assert_eq!(m1, m2, "manifest must be a fixed point");
            assert_eq!(a.space, b.space);
            assert_eq!(a.train, b.train);
            assert_eq!(a.mole.experts, b.mole.experts);
            assert_eq!(a.search.constraints.max_params, b.search.constraints.max_params);
        }
    }

    #[test]
    fn attributes_subset_reaches_router_config() {
        let cfg = resolve("[mole]\nattributes = depth\n").unwrap();
        let rc = cfg.router_config();
        assert_eq!(rc.attributes, vec![RoutingAttribute::Depth]);
        assert_eq!(rc.embed_dim, 256);
        assert_eq!(rc.hidden_dim, 128);
        assert_eq!(rc.beta, 3.0);
    }
}
