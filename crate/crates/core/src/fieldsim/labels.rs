use ndarray::Array2;

use super::GridSpec;

/// Per-coarse-pixel ground truth: detection flag plus x/z offset bins in `[0, k)`.
/// Bins are zero wherever `detect` is zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub detect: Array2<u8>,
    pub xbin: Array2<u8>,
    pub zbin: Array2<u8>,
    pub k: usize,
}

impl LabelMap {
    pub fn empty(height: usize, width: usize, k: usize) -> Self {
        Self {
            detect: Array2::zeros((height, width)),
            xbin: Array2::zeros((height, width)),
            zbin: Array2::zeros((height, width)),
            k,
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.detect.dim()
    }

    pub fn count(&self) -> usize {
        self.detect.iter().filter(|&&d| d != 0).count()
    }

    /// Detected pixels as `(i, j, kz, kx)` in row-major order.
    pub fn positives(&self) -> Vec<(usize, usize, usize, usize)> {
        self.detect
            .indexed_iter()
            .filter(|(_, &d)| d != 0)
            .map(|((i, j), _)| (i, j, self.zbin[[i, j]] as usize, self.xbin[[i, j]] as usize))
            .collect()
    }
}

fn bin_of(frac: f64, k: usize) -> usize {
    ((k as f64 * frac).floor() as isize).clamp(0, k as isize - 1) as usize
}

/// Quantize continuous positions `[x_um, z_um]` onto the label lattice.
///
/// When two positions share a coarse pixel the one nearer the pixel centre
/// wins; ties keep the earlier position. Returns the map and the number of
/// positions skipped for lying outside the field.
pub fn encode_labels(positions: &[[f64; 2]], grid: &GridSpec) -> (LabelMap, usize) {
    let k = grid.upsample_k;
    let p = grid.pitch_um;
    let mut map = LabelMap::empty(grid.height_px, grid.width_px, k);
    let mut best = Array2::<f64>::from_elem((grid.height_px, grid.width_px), f64::INFINITY);
    let mut skipped = 0;
    for &[x, z] in positions {
        if !grid.contains(x, z) {
            skipped += 1;
            continue;
        }
        let (u, v) = (x / p, z / p);
        let (j, i) = (u.floor() as usize, v.floor() as usize);
        if i >= grid.height_px || j >= grid.width_px {
            skipped += 1;
            continue;
        }
        let (fx, fz) = (u - j as f64, v - i as f64);
        let d2 = (fx - 0.5).powi(2) + (fz - 0.5).powi(2);
        if d2 < best[[i, j]] {
            best[[i, j]] = d2;
            map.detect[[i, j]] = 1;
            map.xbin[[i, j]] = bin_of(fx, k) as u8;
            map.zbin[[i, j]] = bin_of(fz, k) as u8;
        }
    }
    (map, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_maps_to_first_bin() {
        let g = GridSpec::with_size(16, 16);
        let (m, skipped) = encode_labels(&[[0.0, 0.0]], &g);
        assert_eq!(skipped, 0);
        assert_eq!(m.positives(), vec![(0, 0, 0, 0)]);
    }

    #[test]
    fn hand_computed_bin() {
        // 64.4 / 51.5 = 1.2505 -> j = 1, frac 0.2505, 4 * 0.2505 = 1.002 -> bin 1
        let g = GridSpec::with_size(16, 16);
        let (m, _) = encode_labels(&[[64.4, 10.0]], &g);
        assert_eq!(m.positives(), vec![(0, 1, 0, 1)]);
    }

    #[test]
    fn out_of_field_positions_are_tallied() {
        let g = GridSpec::with_size(16, 16);
        let w = g.field_width_um();
        let (m, skipped) = encode_labels(&[[-1.0, 5.0], [w, 5.0], [5.0, 5.0]], &g);
        assert_eq!(skipped, 2);
        assert_eq!(m.count(), 1);
    }

    #[test]
    fn nearer_centre_wins_and_ties_keep_first() {
        let g = GridSpec::with_size(16, 16);
        let p = g.pitch_um;
        let edge = [0.05 * p, 0.05 * p];
        let centre = [0.55 * p, 0.45 * p];
        let (m, _) = encode_labels(&[edge, centre], &g);
        assert_eq!(m.positives(), vec![(0, 0, 1, 2)]);
        let (m, _) = encode_labels(&[centre, edge], &g);
        assert_eq!(m.positives(), vec![(0, 0, 1, 2)]);
        // Mirror-symmetric about the centre: equal distance, first stays.
        let a = [0.25 * p, 0.5 * p];
        let b = [0.75 * p, 0.5 * p];
        let (m, _) = encode_labels(&[a, b], &g);
        assert_eq!(m.xbin[[0, 0]], 1);
        let (m, _) = encode_labels(&[b, a], &g);
        assert_eq!(m.xbin[[0, 0]], 3);
    }
}
