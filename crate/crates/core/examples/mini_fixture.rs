//! Regenerates the checked-in miniature corpus:
//!
//! ```text
//! cargo run -p scop-core --example mini_fixture > crates/core/testdata/mini-wn.tsv
//! ```

fn main() -> std::io::Result<()> {
    let stdout = std::io::stdout();
    scop_core::synth::write_mini_tsv(&mut stdout.lock())
}
