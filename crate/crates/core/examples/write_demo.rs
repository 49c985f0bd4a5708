//! Writes the scripted demo experiment into a directory.
//!
//! ```text
//! cargo run -p ielts-aes --example write_demo -- demo
//! cargo run -p ielts-aes-cli -- --config demo/experiment.json --offline eval
//! ```

fn main() -> std::io::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "demo".into());
    let config = ielts_aes::synthetic::write_demo_experiment(dir.as_ref(), 30, 50)?;
    println!("{}", config.display());
    Ok(())
}
