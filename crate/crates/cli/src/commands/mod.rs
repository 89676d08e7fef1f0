use std::path::{Path, PathBuf};

use clap::Args;

pub mod eval_cmd;
pub mod gen;
pub mod gradcheck;
pub mod report;
pub mod train;
pub mod validate;

pub struct Ctx {
    pub workdir: PathBuf,
    pub jobs: usize,
    pub json: bool,
}

impl Ctx {
    /// Resolves a path argument against the working directory.
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }
}

#[derive(Args, Clone, Default)]
pub struct GenCfgArgs {
    /// Time-window intervals I1,I2,I3.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub tw_intervals: Option<Vec<f64>>,
    #[arg(long)]
    pub dur_limit_max: Option<f64>,
    #[arg(long)]
    pub backhaul_prob: Option<f64>,
    #[arg(long)]
    pub open_prob: Option<f64>,
    #[arg(long)]
    pub depot_end_time: Option<f64>,
}

#[derive(Args, Clone)]
pub struct TrainArgs {
    /// Root seed for the stage (required: stochastic command).
    #[arg(long)]
    pub seed: u64,
    /// Named schedule: desk (default) or quick.
    #[arg(long, default_value = "desk")]
    pub profile: String,
    /// JSON file mirroring the training config fields; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub instances_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub multi_start: Option<usize>,
    /// Metrics file (JSON lines); defaults to `<out>.metrics.jsonl`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub gen: GenCfgArgs,
}

#[derive(Args, Clone)]
pub struct PolicyArgs {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub rank_frozen: Option<usize>,
    #[arg(long)]
    pub rank_free: Option<usize>,
    /// softmax | norm_softplus | sigmoid
    #[arg(long)]
    pub activation: Option<String>,
    /// dense | variant_topk | variant_exact
    #[arg(long)]
    pub routing: Option<String>,
}
