//! CSV report formats. The heatmap CSV is one line per layer, integer
//! activation ids separated by commas; it round-trips exactly.

use crate::pipeline::PipelineError;
use crate::polyglu::{ActivationId, PALETTE_SIZE};

use super::EntropyHistogram;

pub fn heatmap_to_csv(map: &[Vec<ActivationId>]) -> String {
    let mut out = String::new();
    for row in map {
        let line: Vec<String> = row.iter().map(|id| id.index().to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn heatmap_from_csv(text: &str) -> Result<Vec<Vec<ActivationId>>, PipelineError> {
    let mut map = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<ActivationId>, PipelineError> = line
            .split(',')
            .map(|cell| {
                cell.trim()
                    .parse::<usize>()
                    .ok()
                    .and_then(ActivationId::from_index)
                    .ok_or_else(|| {
                        PipelineError::Data(format!(
                            "heatmap line {}: bad activation id {cell:?}",
                            lineno + 1
                        ))
                    })
            })
            .collect();
        map.push(row?);
    }
    Ok(map)
}

pub fn layer_distribution_to_csv(dist: &[[f64; PALETTE_SIZE]]) -> String {
    let mut out = String::from("layer,relu,tanh,silu,gelu\n");
    for (layer, shares) in dist.iter().enumerate() {
        out.push_str(&format!(
            "{layer},{:.4},{:.4},{:.4},{:.4}\n",
            shares[0], shares[1], shares[2], shares[3]
        ));
    }
    out
}

pub fn histogram_to_csv(hist: &EntropyHistogram) -> String {
    let mut out = String::from("bin_start,bin_end,count\n");
    for (i, &count) in hist.counts.iter().enumerate() {
        out.push_str(&format!(
            "{:.6},{:.6},{count}\n",
            hist.bin_edges[i],
            hist.bin_edges[i + 1]
        ));
    }
    out
}
