//! Sectioned `key = value` run configuration.
//!
//! ```ini
//! [task]
//! pattern_len = 5
//! bits = 3
//! padding = 3
//! num_samples = 5000
//!
//! [model]
//! num_layers = 2
//! state_size = 32
//! model_size = 32
//!
//! [optim]
//! base_lr = 0.002
//!
//! [run]
//! rule = online
//! seed = 0
//! epochs = 40
//! ```
//!
//! Missing keys take the defaults of [`RunConfig::default`]. Unknown sections
//! or keys, duplicates and unparsable values are errors carrying the line.
//! `#` and `;` start comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::diagnostics::Stencil;
use crate::error::{io_err, Error, Result};
use crate::learning::RuleKind;
use crate::network::ModelConfig;
use crate::optim::OptimConfig;
use crate::tasks::CopyTaskConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignConfig {
    /// Depth axis of the grid; `None` keeps `model.num_layers`.
    pub depths: Option<Vec<usize>>,
    /// `|lambda|_min` axis of the grid; `None` keeps `model.r_min`.
    pub lambda_min: Option<Vec<f64>>,
    pub every: usize,
    pub probe_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub stencil: Stencil,
    pub tolerance: f64,
    pub batch_size: usize,
    /// Negative control: damage the trace carry of the online rule.
    pub corrupt_traces: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: CopyTaskConfig,
    /// `input_dim`/`output_dim` are derived from the task.
    pub model: ModelConfig,
    /// `total_steps` is derived from epochs, batch size and `update_every`.
    pub optim: OptimConfig,
    pub rule: RuleKind,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Apply an update every this many timesteps; 0 updates once per sequence.
    pub update_every: usize,
    pub output_dir: PathBuf,
    /// Write elapsed time into `metrics.csv` (makes the file non-reproducible).
    pub record_wall_time: bool,
    pub align: AlignConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = CopyTaskConfig::default();
        let mut cfg = Self {
            model: ModelConfig {
                num_layers: 4,
                state_size: 64,
                model_size: 128,
                input_dim: task.input_dim(),
                output_dim: task.output_dim(),
                dropout: 0.1,
                r_min: 0.0,
                r_max: 1.0,
            },
            task,
            optim: OptimConfig::default(),
            rule: RuleKind::OnlineTraces,
            seed: 0,
            epochs: 25,
            batch_size: 50,
            update_every: 0,
            output_dir: PathBuf::from("runs/default"),
            record_wall_time: false,
            align: AlignConfig {
                depths: None,
                lambda_min: None,
                every: 50,
                probe_size: 50,
            },
            gradcheck: GradcheckConfig {
                eps: 3e-4,
                stencil: Stencil::Ridders,
                tolerance: 1e-5,
                batch_size: 2,
                corrupt_traces: false,
            },
        };
        cfg.resolve().expect("defaults are valid");
        cfg
    }
}

impl RunConfig {
    pub fn batches_per_epoch(&self) -> usize {
        self.task.num_samples.div_ceil(self.batch_size)
    }

    pub fn updates_per_batch(&self) -> usize {
        match self.update_every {
            0 => 1,
            k => self.task.seq_len().div_ceil(k),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.batches_per_epoch() * self.updates_per_batch()
    }

    /// Fills derived fields and checks every section.
    pub fn resolve(&mut self) -> Result<()> {
        self.task.seed = self.seed;
        self.task.validate()?;
        self.model.input_dim = self.task.input_dim();
        self.model.output_dim = self.task.output_dim();
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidModel("epochs and batch_size must be >= 1".into()));
        }
        self.optim.total_steps = self.total_steps();
        self.optim.validate()?;
        if self.align.every == 0 || self.align.probe_size == 0 {
            return Err(Error::InvalidModel("align.every and align.probe_size must be >= 1".into()));
        }
        let g = &self.gradcheck;
        if !(g.eps > 0.0 && g.tolerance > 0.0 && g.batch_size > 0) {
            return Err(Error::InvalidModel("gradcheck eps, tolerance and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses config text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let ini = Ini::parse(text, origin)?;
        let mut cfg = RunConfig::default();
        for (section, entries) in &ini.sections {
            for (key, (value, line)) in entries {
                cfg.set(section, key, value).map_err(|message| Error::Config {
                    path: origin.to_string(),
                    line: *line,
                    message: format!("[{section}] {key}: {message}"),
                })?;
            }
        }
        cfg.resolve().map_err(|e| Error::Config {
            path: origin.to_string(),
            line: ini.last_line,
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        match (section, key) {
            ("task", "pattern_len") => self.task.pattern_len = num(v)?,
            ("task", "bits") => self.task.bits = num(v)?,
            ("task", "padding") => self.task.padding = num(v)?,
            ("task", "num_samples") => self.task.num_samples = num(v)?,
            ("model", "num_layers") => self.model.num_layers = num(v)?,
            ("model", "state_size") => self.model.state_size = num(v)?,
            ("model", "model_size") => self.model.model_size = num(v)?,
            ("model", "dropout") => self.model.dropout = num(v)?,
            ("model", "r_min") => self.model.r_min = num(v)?,
            ("model", "r_max") => self.model.r_max = num(v)?,
            ("optim", "base_lr") => self.optim.base_lr = num(v)?,
            ("optim", "lr_factor_recurrent") => self.optim.lr_factor_recurrent = num(v)?,
            ("optim", "weight_decay") => self.optim.weight_decay = num(v)?,
            ("optim", "beta1") => self.optim.betas.0 = num(v)?,
            ("optim", "beta2") => self.optim.betas.1 = num(v)?,
            ("optim", "eps") => self.optim.eps = num(v)?,
            ("optim", "warmup_steps") => self.optim.warmup_steps = num(v)?,
            ("run", "rule") => self.rule = v.parse()?,
            ("run", "seed") => self.seed = num(v)?,
            ("run", "epochs") => self.epochs = num(v)?,
            ("run", "batch_size") => self.batch_size = num(v)?,
            ("run", "update_every") => self.update_every = num(v)?,
            ("run", "output_dir") => self.output_dir = PathBuf::from(v),
            ("run", "record_wall_time") => self.record_wall_time = num(v)?,
            ("align", "depths") => self.align.depths = Some(list(v)?),
            ("align", "lambda_min") => self.align.lambda_min = Some(list(v)?),
            ("align", "every") => self.align.every = num(v)?,
            ("align", "probe_size") => self.align.probe_size = num(v)?,
            ("gradcheck", "eps") => self.gradcheck.eps = num(v)?,
            ("gradcheck", "stencil") => self.gradcheck.stencil = v.parse()?,
            ("gradcheck", "tolerance") => self.gradcheck.tolerance = num(v)?,
            ("gradcheck", "batch_size") => self.gradcheck.batch_size = num(v)?,
            ("gradcheck", "corrupt_traces") => self.gradcheck.corrupt_traces = num(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Fully resolved configuration in the same format `parse` reads.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let t = &self.task;
        writeln!(w, "[task]\npattern_len = {}\nbits = {}\npadding = {}\nnum_samples = {}\n", t.pattern_len, t.bits, t.padding, t.num_samples).unwrap();
        let m = &self.model;
        writeln!(
            w,
            "[model]\nnum_layers = {}\nstate_size = {}\nmodel_size = {}\ndropout = {:?}\nr_min = {:?}\nr_max = {:?}\n",
            m.num_layers, m.state_size, m.model_size, m.dropout, m.r_min, m.r_max
        )
        .unwrap();
        let o = &self.optim;
        writeln!(
            w,
            "[optim]\nbase_lr = {:?}\nlr_factor_recurrent = {:?}\nweight_decay = {:?}\nbeta1 = {:?}\nbeta2 = {:?}\neps = {:?}\nwarmup_steps = {}\n# total_steps = {} (derived)\n",
            o.base_lr, o.lr_factor_recurrent, o.weight_decay, o.betas.0, o.betas.1, o.eps, o.warmup_steps, o.total_steps
        )
        .unwrap();
        writeln!(
            w,
            "[run]\nrule = {}\nseed = {}\nepochs = {}\nbatch_size = {}\nupdate_every = {}\noutput_dir = {}\nrecord_wall_time = {}\n",
            self.rule,
            self.seed,
            self.epochs,
            self.batch_size,
            self.update_every,
            self.output_dir.display(),
            self.record_wall_time
        )
        .unwrap();
        let a = &self.align;
        writeln!(w, "[align]").unwrap();
        if let Some(d) = &a.depths {
            writeln!(w, "depths = {}", join(d)).unwrap();
        }
        if let Some(l) = &a.lambda_min {
            writeln!(w, "lambda_min = {}", join(l)).unwrap();
        }
        writeln!(w, "every = {}\nprobe_size = {}\n", a.every, a.probe_size).unwrap();
        let g = &self.gradcheck;
        let stencil = g.stencil;
        writeln!(
            w,
            "[gradcheck]\neps = {:?}\nstencil = {stencil}\ntolerance = {:?}\nbatch_size = {}\ncorrupt_traces = {}",
            g.eps, g.tolerance, g.batch_size, g.corrupt_traces
        )
        .unwrap();
        s
    }
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("cannot parse '{v}': {e}"))
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(num).collect()
}

fn join<T: std::fmt::Debug>(v: &[T]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

/// Raw sections in file order: key -> (value, line number).
struct Ini {
    sections: IndexMap<String, IndexMap<String, (String, usize)>>,
    last_line: usize,
}

const SECTIONS: [&str; 6] = ["task", "model", "optim", "run", "align", "gradcheck"];

impl Ini {
    fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Config {
            path: origin.to_string(),
            line,
            message,
        };
        let mut sections: IndexMap<String, IndexMap<String, (String, usize)>> = IndexMap::new();
        let mut current: Option<String> = None;
        let mut last_line = 1;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            last_line = line;
            let content = raw.split(['#', ';']).next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(line, format!("malformed section header '{content}'")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(err(line, format!("unknown section [{name}]")));
                }
                if sections.contains_key(name) {
                    return Err(err(line, format!("duplicate section [{name}]")));
                }
                sections.insert(name.to_string(), IndexMap::new());
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected 'key = value', got '{content}'")))?;
            let key = key.trim();
            let Some(section) = &current else {
                return Err(err(line, format!("key '{key}' outside of any section")));
            };
            let entries = sections.get_mut(section).expect("section registered");
            if entries.contains_key(key) {
                return Err(err(line, format!("duplicate key '{key}'")));
            }
            entries.insert(key.to_string(), (value.trim().to_string(), line));
        }
        Ok(Self { sections, last_line })
    }
}
