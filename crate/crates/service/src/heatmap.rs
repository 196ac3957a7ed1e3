//! Binary PPM (P6) heatmaps of one flow channel.
//!
//! Values ramp linearly from green (sparse) to red (dense) over the selected
//! channel's `[min, max]` range; a constant channel renders all green. Pixel
//! components are `round(255 * ratio)` with ties away from zero. Image rows
//! run north to south, so row 0 of the picture is the grid's highest-latitude
//! row.

use std::io::Write;
use std::path::Path;

use cityflow_core::grid::FlowTensor;

pub fn heatmap_ppm(tensor: &FlowTensor, channel: usize) -> Vec<u8> {
    let values = tensor.channel(channel);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let (rows, cols) = (tensor.rows(), tensor.cols());
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    for i in (0..rows).rev() {
        for j in 0..cols {
            let v = values[i * cols + j];
            let ratio = if span > 0.0 { (v - min) / span } else { 0.0 };
            out.push((255.0 * ratio).round() as u8);
            out.push((255.0 * (1.0 - ratio)).round() as u8);
            out.push(0);
        }
    }
    out
}

pub fn write_heatmap(
    path: impl AsRef<Path>,
    tensor: &FlowTensor,
    channel: usize,
) -> std::io::Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&heatmap_ppm(tensor, channel))?;
    Ok(())
}

/// Renders a bare `I x J` map (fusion-weight magnitudes) with the same ramp.
pub fn map_ppm(rows: usize, cols: usize, values: &[f64]) -> Vec<u8> {
    let mut data = values.to_vec();
    data.extend_from_slice(values);
    let tensor = FlowTensor::from_data(rows, cols, data).expect("doubled plane");
    heatmap_ppm(&tensor, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cityflow_core::grid::INFLOW;

    fn pixels(ppm: &[u8]) -> &[u8] {
        // Header is "P6\n{w} {h}\n255\n".
        let mut newlines = 0;
        for (idx, &b) in ppm.iter().enumerate() {
            if b == b'\n' {
                newlines += 1;
                if newlines == 3 {
                    return &ppm[idx + 1..];
                }
            }
        }
        panic!("malformed ppm header");
    }

    #[test]
    fn constant_tensor_renders_all_green() {
        let tensor = FlowTensor::zeros(3, 4);
        let ppm = heatmap_ppm(&tensor, INFLOW);
        assert!(ppm.starts_with(b"P6\n4 3\n255\n"));
        for px in pixels(&ppm).chunks(3) {
            assert_eq!(px, &[0, 255, 0]);
        }
    }

    #[test]
    fn single_hot_cell_is_the_only_red_pixel() {
        let mut tensor = FlowTensor::zeros(2, 2);
        tensor.set(INFLOW, 0, 1, 10.0);
        let ppm = heatmap_ppm(&tensor, INFLOW);
        let px: Vec<&[u8]> = pixels(&ppm).chunks(3).collect();
        // Row order is north to south: grid row 1 renders first.
        assert_eq!(px[0], &[0, 255, 0]);
        assert_eq!(px[1], &[0, 255, 0]);
        assert_eq!(px[2], &[0, 255, 0]);
        assert_eq!(px[3], &[255, 0, 0]);
        assert_eq!(
            px.iter().filter(|p| **p == [255u8, 0, 0]).count(),
            1
        );
    }

    #[test]
    fn midpoint_value_rounds_half_away_from_zero() {
        let mut tensor = FlowTensor::zeros(1, 3);
        tensor.set(INFLOW, 0, 1, 5.0);
        tensor.set(INFLOW, 0, 2, 10.0);
        let ppm = heatmap_ppm(&tensor, INFLOW);
        let px: Vec<&[u8]> = pixels(&ppm).chunks(3).collect();
        // 255 * 0.5 = 127.5 rounds to 128 for both components.
        assert_eq!(px[1], &[128, 128, 0]);
    }

    #[test]
    fn channel_selection_matters() {
        let mut tensor = FlowTensor::zeros(1, 2);
        tensor.set(INFLOW, 0, 0, 4.0);
        let inflow = heatmap_ppm(&tensor, 0);
        let outflow = heatmap_ppm(&tensor, 1);
        assert_ne!(inflow, outflow);
        for px in pixels(&outflow).chunks(3) {
            assert_eq!(px, &[0, 255, 0]);
        }
    }
}
