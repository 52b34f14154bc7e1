//! File formats, dataset tooling, the two training stages and the command
//! line front-end for the audio-visual Q-Former model in `avqf-core`.

pub mod avvf;
pub mod chat;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
mod error;
pub mod manifest;
pub mod pipeline;
pub mod wav;

pub use error::{Error, Result};

/// Formats `x` with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}
