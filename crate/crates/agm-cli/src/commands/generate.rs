//! Corpus generation: per-domain split files, the vocabulary, and the split
//! manifest. Byte-identical across reruns of the same configuration.

use std::path::Path;

use agm_core::data::{default_suite, generate_suite};
use agm_core::Result;

use crate::config::RunConfig;
use crate::runs::write_corpus;

pub fn run(config: &RunConfig, out: &Path) -> Result<()> {
    let spec = default_suite(config.data.split, config.data.rho);
    let suite = generate_suite(&spec, config.data.seed)?;
    write_corpus(&suite, out)?;
    log::info!(
        "wrote {} domains x {{train, validation, test, ads}} under {}",
        suite.domains.len(),
        out.display()
    );
    println!(
        "generated {} domains ({} examples each) -> {}",
        suite.domains.len(),
        config.data.split.total(),
        out.display()
    );
    Ok(())
}
