//! Regenerates the bundled example dataset under `testdata/`. Run with
//! `cargo run -p ncv-cli --example regen_testdata` after changing the
//! synthetic generators.

use ncv_cli::write_csv;
use ncv_core::{replicate_rng, sim_curve, CorrKind, RespKind};
use std::path::Path;

fn main() {
    let mut rng = replicate_rng(42, 0);
    let sim = sim_curve(&mut rng, 80, CorrKind::White, RespKind::Gaussian);
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata/example.csv");
    write_csv(&path, &sim.table).unwrap();
    println!("wrote {}", path.display());
}
