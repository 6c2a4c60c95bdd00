//! Inference helpers: score-map upsampling to a requested resolution.

use meds_core::dataset::DataError;
use meds_core::memory::ScoreMap;

/// Nearest-neighbor upsample: output cell `(i, j)` copies grid cell
/// `(floor(i * H / out_h), floor(j * W / out_w))`. The target must be at
/// least as large as the grid; downsampling would silently drop scores.
pub fn upsample_nearest(map: &ScoreMap, out_h: usize, out_w: usize) -> Result<ScoreMap, DataError> {
    if out_h < map.height() || out_w < map.width() {
        return Err(DataError::InvalidSpec(
            "target resolution must be at least the score grid",
        ));
    }
    let mut values = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let src_h = i * map.height() / out_h;
        for j in 0..out_w {
            let src_w = j * map.width() / out_w;
            values.push(map.at(src_h, src_w));
        }
    }
    ScoreMap::new(out_h, out_w, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use meds_core::selection::robust_max;

    #[test]
    fn target_equal_to_grid_is_identity() {
        let map = ScoreMap::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let up = upsample_nearest(&map, 2, 3).unwrap();
        assert_eq!(up.values(), map.values());
    }

    #[test]
    fn integer_factor_replicates_blocks() {
        let map = ScoreMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample_nearest(&map, 4, 4).unwrap();
        #[rustfmt::skip]
        let expected = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up.values(), &expected[..]);
    }

    #[test]
    fn non_integer_factor_uses_floor_indexing() {
        let map = ScoreMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample_nearest(&map, 3, 3).unwrap();
        // floor(i * 2 / 3) = 0, 0, 1.
        #[rustfmt::skip]
        let expected = vec![
            1.0, 1.0, 2.0,
            1.0, 1.0, 2.0,
            3.0, 3.0, 4.0,
        ];
        assert_eq!(up.values(), &expected[..]);
    }

    #[test]
    fn smaller_target_is_a_contract_error() {
        let map = ScoreMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(upsample_nearest(&map, 1, 4).is_err());
        assert!(upsample_nearest(&map, 4, 1).is_err());
    }

    #[test]
    fn integer_upsampling_preserves_the_robust_max() {
        let map = ScoreMap::new(2, 2, vec![0.5, 4.0, 1.5, 2.5]).unwrap();
        let up = upsample_nearest(&map, 6, 6).unwrap();
        // Every patch duplicates 9 times, so any top-percent window that
        // maps to whole duplicated groups has the same mean.
        let direct = robust_max(&map, 25.0).unwrap();
        let resized = robust_max(&up, 25.0).unwrap();
        assert!((direct - resized).abs() < 1e-12);
    }
}
