//! Brute-force flow counting straight from the inflow/outflow definition.
//!
//! For every cell, membership of each point is decided by an explicit
//! rectangle test (no shared binning code with the implementation), and
//! transitions are counted by scanning consecutive point pairs.

use cityflow_core::grid::{GeoPoint, GridSpec};

/// Rectangle membership test for cell `(i, j)`: half-open boxes except that
/// the last row/column includes the maximum boundary.
pub fn cell_contains(grid: &GridSpec, i: usize, j: usize, lon: f64, lat: f64) -> bool {
    let lon_step = (grid.lon_max - grid.lon_min) / grid.cols as f64;
    let lat_step = (grid.lat_max - grid.lat_min) / grid.rows as f64;
    let lon_lo = grid.lon_min + j as f64 * lon_step;
    let lat_lo = grid.lat_min + i as f64 * lat_step;
    let lon_ok = if j + 1 == grid.cols {
        lon >= lon_lo && lon <= grid.lon_max
    } else {
        lon >= lon_lo && lon < lon_lo + lon_step
    };
    let lat_ok = if i + 1 == grid.rows {
        lat >= lat_lo && lat <= grid.lat_max
    } else {
        lat >= lat_lo && lat < lat_lo + lat_step
    };
    lon_ok && lat_ok
}

/// Quadratic enumeration of inflow/outflow for one interval's trajectories.
/// Each trajectory must be sorted by timestamp. Returns row-major `I x J`
/// planes of inflow and outflow counts.
pub fn brute_force_flows(grid: &GridSpec, trajectories: &[Vec<GeoPoint>]) -> (Vec<u64>, Vec<u64>) {
    let cells = grid.rows * grid.cols;
    let mut inflow = vec![0u64; cells];
    let mut outflow = vec![0u64; cells];
    for i in 0..grid.rows {
        for j in 0..grid.cols {
            let idx = i * grid.cols + j;
            for traj in trajectories {
                for k in 1..traj.len() {
                    let prev_in = cell_contains(grid, i, j, traj[k - 1].lon, traj[k - 1].lat);
                    let cur_in = cell_contains(grid, i, j, traj[k].lon, traj[k].lat);
                    if !prev_in && cur_in {
                        inflow[idx] += 1;
                    }
                    if prev_in && !cur_in {
                        outflow[idx] += 1;
                    }
                }
            }
        }
    }
    (inflow, outflow)
}
