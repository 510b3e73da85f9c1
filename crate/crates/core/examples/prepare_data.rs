//! Load a MovieLens-style ratings file, apply the 5-core filter, split it and
//! print Table-1 style statistics.
//!
//! ```text
//! cargo run --example prepare_data -- path/to/ratings.dat "::"
//! ```
//!
//! Without arguments a small synthetic file is written and loaded instead.

use std::io::Write;

use recunlearn::dataset::{self, DatasetStats, SplitMode, SplitSpec};
use recunlearn::synthetic::{self, SyntheticSpec};

fn main() -> recunlearn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let tmp;
    let (path, sep) = match args.as_slice() {
        [p, s, ..] => (std::path::PathBuf::from(p), s.clone()),
        [p] => (std::path::PathBuf::from(p), "::".to_string()),
        [] => {
            let data = synthetic::generate(&SyntheticSpec { users: 200, items: 150, ..Default::default() })?;
            tmp = tempfile::NamedTempFile::new().expect("temp file");
            let mut f = tmp.reopen().expect("reopen");
            for z in data.interactions() {
                writeln!(f, "{}::{}::{}::0", z.user + 1, z.item + 1, z.rating).expect("write");
            }
            (tmp.path().to_path_buf(), "::".to_string())
        }
    };

    let loaded = dataset::load_movielens(&path, &sep)?;
    let filtered = dataset::filter_min_interactions(&loaded.data, 5)?;
    let spec = SplitSpec { train_fraction: 0.8, mode: SplitMode::PerUserRandom, holdout_user_fraction: 0.2, seed: 1 };
    let (train, test) = dataset::split(&filtered, &spec)?;

    println!("raw      {:?}", DatasetStats::of(&loaded.data));
    println!("filtered {:?}", DatasetStats::of(&filtered));
    println!("duplicates dropped: {}", loaded.duplicates);
    println!("train {} ratings, test {} ratings", train.len(), test.len());
    Ok(())
}
