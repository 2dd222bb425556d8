//! The road occupancy grid around the ego vehicle and the dilated
//! convolutional pooling stack that turns it into a social context vector.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::preprocess::VehicleState;

/// Grid geometry: rows run longitudinally (last row farthest ahead), columns
/// are lanes relative to the ego lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub cell_length: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            rows: 9,
            cols: 5,
            cell_length: 15.0,
        }
    }
}

impl GridSpec {
    pub fn ego_row(&self) -> usize {
        self.rows / 2
    }

    pub fn ego_col(&self) -> usize {
        self.cols / 2
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn flat(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    /// Grid cell of a neighbor. The column is the lane difference; the row is
    /// the longitudinal offset in cells, rounded half away from the ego, so
    /// the footprint ends strictly inside half a cell beyond the last row.
    pub fn assign_cell(&self, neighbor: &VehicleState, ego: &VehicleState) -> Option<(usize, usize)> {
        let dlane = (neighbor.lane_id - ego.lane_id).round() as i64;
        let col = self.ego_col() as i64 + dlane;
        if col < 0 || col >= self.cols as i64 {
            return None;
        }
        let cells = (neighbor.y - ego.y) / self.cell_length;
        if !cells.is_finite() {
            return None;
        }
        let row = self.ego_row() as i64 + cells.round() as i64;
        if row < 0 || row >= self.rows as i64 {
            return None;
        }
        Some((row as usize, col as usize))
    }

    /// Flat cell for each vehicle at the reference instant (ego first). The
    /// ego always takes the center cell; when several vehicles share a cell,
    /// the one nearest the ego wins (earlier vehicle on exact ties).
    pub fn resolve_cells(&self, now: &[VehicleState]) -> CellAssignment {
        let mut cells = vec![None; now.len()];
        let mut owner: Vec<Option<(usize, f64)>> = vec![None; self.cells()];
        let mut collisions = 0;
        let Some(ego) = now.first() else {
            return CellAssignment { cells, collisions };
        };
        let center = self.flat(self.ego_row(), self.ego_col());
        owner[center] = Some((0, 0.0));
        for (i, s) in now.iter().enumerate().skip(1) {
            let Some((r, c)) = self.assign_cell(s, ego) else { continue };
            let k = self.flat(r, c);
            let d = (s.x - ego.x).hypot(s.y - ego.y);
            match owner[k] {
                None => owner[k] = Some((i, d)),
                Some((_, held)) => {
                    collisions += 1;
                    if d < held && k != center {
                        owner[k] = Some((i, d));
                    }
                }
            }
        }
        for (k, o) in owner.iter().enumerate() {
            if let Some((i, _)) = o {
                cells[*i] = Some(k);
            }
        }
        CellAssignment { cells, collisions }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellAssignment {
    /// Flat cell per vehicle, `None` when outside the footprint or displaced.
    pub cells: Vec<Option<usize>>,
    /// Vehicles that landed in an already occupied cell.
    pub collisions: usize,
}

/// Places each vehicle's encoding (`V×E`) into its cell of a zero
/// `rows×cols×E` grid.
pub fn build_social_tensor(encodings: &Tensor, assignment: &CellAssignment, grid: &GridSpec) -> Result<Tensor> {
    let (v, e) = encodings.as_matrix_dims();
    if v != assignment.cells.len() {
        return Err(Error::Dimension(format!(
            "{v} encodings for {} vehicles",
            assignment.cells.len()
        )));
    }
    let mut out = Tensor::zeros(&[grid.rows, grid.cols, e]);
    for (i, cell) in assignment.cells.iter().enumerate() {
        if let Some(k) = cell {
            out.data_mut()[k * e..(k + 1) * e].copy_from_slice(&encodings.data()[i * e..(i + 1) * e]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub dilation: usize,
    pub kernel: usize,
}

/// Convolution plan of the pooling stack; every layer is same-padded, so the
/// grid keeps its full resolution until the final flatten and projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub layers: Vec<ConvLayerSpec>,
    pub leaky_alpha: f64,
    pub output_dim: usize,
}

impl Default for PoolSpec {
    fn default() -> Self {
        let l = |out_channels, dilation| ConvLayerSpec {
            out_channels,
            dilation,
            kernel: 3,
        };
        PoolSpec {
            layers: vec![l(32, 1), l(16, 2), l(8, 2)],
            leaky_alpha: 0.1,
            output_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolParams {
    pub convs: Vec<(ParamId, ParamId)>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl PoolSpec {
    pub fn init(
        &self,
        store: &mut ParamStore,
        in_channels: usize,
        grid: &GridSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<PoolParams> {
        let mut cin = in_channels;
        let mut convs = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let fan = l.kernel * l.kernel * cin;
            let k = store.insert_uniform(&format!("pool.conv{i}.k"), &[l.kernel, l.kernel, cin, l.out_channels], fan, rng)?;
            let b = store.insert_uniform(&format!("pool.conv{i}.b"), &[l.out_channels], fan, rng)?;
            convs.push((k, b));
            cin = l.out_channels;
        }
        let flat = grid.cells() * cin;
        let proj_w = store.insert_uniform("pool.proj.w", &[self.output_dim, flat], flat, rng)?;
        let proj_b = store.insert_uniform("pool.proj.b", &[self.output_dim], flat, rng)?;
        Ok(PoolParams {
            convs,
            proj_w,
            proj_b,
        })
    }

    /// Recorded pooling of one `rows×cols×E` grid to the social context
    /// (a vector of `output_dim`). Conv layers are leaky-ReLU activated; the
    /// projection is linear.
    pub fn forward(&self, g: &mut Graph<'_>, grid_var: Var, p: &PoolParams) -> Result<Var> {
        let mut x = grid_var;
        for (l, &(k, b)) in self.layers.iter().zip(&p.convs) {
            let (k, b) = (g.param(k)?, g.param(b)?);
            let y = g.conv2d(x, k, Some(b), l.dilation)?;
            x = g.leaky_relu(y, self.leaky_alpha)?;
        }
        let n = g.value(x)?.len();
        let flat = g.reshape(x, &[n])?;
        let (w, b) = (g.param(p.proj_w)?, g.param(p.proj_b)?);
        g.linear(flat, w, Some(b))
    }
}

/// Social context of one grid under parameters already in `store`.
pub fn social_pool(tensor: &Tensor, spec: &PoolSpec, store: &ParamStore, p: &PoolParams) -> Result<Tensor> {
    let mut g = Graph::with_params(store);
    let x = g.constant(tensor.clone());
    let out = spec.forward(&mut g, x, p)?;
    Ok(g.value(out)?.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(y: f64, lane: f64) -> VehicleState {
        VehicleState::from_array([0.0, y, 0.0, 0.0, 0.0, 0.0, 6.0, 15.0, 2.0, lane])
    }

    #[test]
    fn cell_examples() {
        let g = GridSpec::default();
        let ego = at(0.0, 3.0);
        assert_eq!(g.assign_cell(&ego, &ego), Some((4, 2)));
        assert_eq!(g.assign_cell(&at(30.0, 3.0), &ego), Some((6, 2)));
        assert_eq!(g.assign_cell(&at(70.0, 3.0), &ego), None);
        assert_eq!(g.assign_cell(&at(67.4, 3.0), &ego), Some((8, 2)));
        assert_eq!(g.assign_cell(&at(67.5, 3.0), &ego), None);
        assert_eq!(g.assign_cell(&at(-67.5, 3.0), &ego), None);
        assert_eq!(g.assign_cell(&at(22.5, 3.0), &ego), Some((6, 2)));
        assert_eq!(g.assign_cell(&at(-22.5, 3.0), &ego), Some((2, 2)));
        assert_eq!(g.assign_cell(&at(0.0, 1.0), &ego), Some((4, 0)));
        assert_eq!(g.assign_cell(&at(0.0, 6.0), &ego), None);
    }

    #[test]
    fn collision_keeps_nearest() {
        let g = GridSpec::default();
        let now = vec![at(0.0, 3.0), at(33.0, 3.0), at(28.0, 3.0), at(5.0, 3.0)];
        let a = g.resolve_cells(&now);
        assert_eq!(a.cells, vec![Some(22), None, Some(32), None]);
        assert_eq!(a.collisions, 2);
    }
}
