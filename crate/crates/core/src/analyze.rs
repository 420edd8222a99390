//! Architecture report: size, receptive field and downsampling.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::Result;
use crate::model::{CitrinetConfig, KernelLayout};

#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub config: CitrinetConfig,
    pub parameters: usize,
    /// Parameters per section: prolog, megablock1-3, epilog, head.
    pub breakdown: BTreeMap<String, usize>,
    /// Input frames seen by one output frame through the convolutions.
    pub receptive_field: usize,
    /// Layout after γ scaling.
    pub layout: KernelLayout,
}

pub fn analyze(cfg: &CitrinetConfig) -> Result<Analysis> {
    cfg.validate()?;
    Ok(Analysis {
        config: cfg.clone(),
        parameters: cfg.parameter_count()?,
        breakdown: cfg.parameter_breakdown()?,
        receptive_field: cfg.receptive_field()?,
        layout: cfg.effective_layout()?,
    })
}

const SECTIONS: [&str; 6] = ["prolog", "megablock1", "megablock2", "megablock3", "epilog", "head"];

impl fmt::Display for Analysis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(
            f,
            "Citrinet R={} C={} epilog={} vocab={} (+blank)",
            c.repeat, c.channels, c.epilog_channels, c.vocab_size
        )?;
        writeln!(f, "parameters: {} ({:.2}M)", self.parameters, self.parameters as f64 / 1e6)?;
        for name in SECTIONS {
            let n = self.breakdown.get(name).copied().unwrap_or(0);
            writeln!(f, "  {name:<11} {n:>12}")?;
        }
        match c.gamma {
            Some(g) => writeln!(f, "kernels (γ={g}): {}", self.layout)?,
            None => writeln!(f, "kernels: {}", self.layout)?,
        }
        writeln!(f, "receptive field: {} input frames (convolutions only)", self.receptive_field)?;
        if c.se_enabled {
            match c.se_context.window() {
                None => writeln!(f, "  SE pools globally, so every output frame depends on the whole utterance")?,
                Some(w) => writeln!(f, "  SE pools over windows of {w} frames, which widens the context further")?,
            }
        }
        writeln!(f, "output frames: ceil(ceil(ceil(T/2)/2)/2), about T/8")
    }
}
