//! Run a small strategy × alpha grid into a temporary directory and print
//! the summary table.

use recunlearn::experiment::{cmd_run, summary_csv, ExperimentConfig};
use recunlearn::synthetic::SyntheticSpec;

fn main() -> recunlearn::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut cfg = ExperimentConfig { out_dir: dir.path().to_path_buf(), repeats: 2, ..Default::default() };
    cfg.data.synthetic = SyntheticSpec { users: 400, items: 200, ..Default::default() };
    let out = cmd_run(&cfg)?;
    print!("{}", summary_csv(&out.summary, &out.timing, &[10]));
    println!("reports under {}", cfg.out_dir.display());
    Ok(())
}
