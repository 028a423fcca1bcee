use image::{Rgb, RgbImage};

use super::{Modality, VolumeError, VoxelVolume, WindowSpec};

/// Maps a value in [0, 1] to 0..=255 with round-half-up. Out-of-range input
/// is clamped first.
pub fn quantize_unit(unit: f64) -> u8 {
    let scaled = unit.clamp(0.0, 1.0) * 255.0;
    (scaled + 0.5).floor() as u8
}

fn window_value(v: f64, w: &WindowSpec) -> u8 {
    quantize_unit((v - w.lo_hu) / (w.hi_hu - w.lo_hu))
}

/// Windows one row-major HU slice into RGB, one window per channel.
pub fn window_ct_slice(
    slice: &[f32],
    width: usize,
    height: usize,
    windows: &[WindowSpec; 3],
) -> Result<RgbImage, VolumeError> {
    for w in windows {
        w.validate()?;
    }
    if slice.len() != width * height {
        return Err(VolumeError::Invalid {
            series_id: String::new(),
            reason: format!(
                "slice has {} values, expected {width}×{height}",
                slice.len()
            ),
        });
    }
    let mut out = RgbImage::new(width as u32, height as u32);
    for (i, (&v, px)) in slice.iter().zip(out.pixels_mut()).enumerate() {
        if !v.is_finite() {
            return Err(VolumeError::NonFinite {
                series_id: String::new(),
                x: i % width,
                y: i / width,
                z: 0,
            });
        }
        let v = f64::from(v);
        *px = Rgb([
            window_value(v, &windows[0]),
            window_value(v, &windows[1]),
            window_value(v, &windows[2]),
        ]);
    }
    Ok(out)
}

/// Volume-global min-max scale for MR intensities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MrScale {
    pub min: f64,
    pub max: f64,
}

impl MrScale {
    pub fn from_volume(volume: &VoxelVolume) -> Self {
        let (min, max) = volume
            .voxels()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(f64::from(v)), hi.max(f64::from(v)))
            });
        Self { min, max }
    }

    pub fn is_degenerate(&self) -> bool {
        self.max <= self.min
    }

    pub fn map(&self, v: f32) -> u8 {
        if self.is_degenerate() {
            return 0;
        }
        quantize_unit((f64::from(v) - self.min) / (self.max - self.min))
    }

    /// Gray RGB slice with R = G = B.
    pub fn map_slice(&self, slice: &[f32], width: usize, height: usize) -> RgbImage {
        let mut out = RgbImage::new(width as u32, height as u32);
        for (&v, px) in slice.iter().zip(out.pixels_mut()) {
            let g = self.map(v);
            *px = Rgb([g, g, g]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MrNormalized {
    pub slices: Vec<RgbImage>,
    /// Set when the volume is constant and every slice came out black.
    pub warning: Option<String>,
}

/// Min-max normalises a whole MR volume into gray RGB slices.
pub fn normalize_mr_volume(volume: &VoxelVolume) -> Result<MrNormalized, VolumeError> {
    if volume.modality() != Modality::Mr {
        return Err(VolumeError::WrongModality {
            series_id: volume.series_id().to_string(),
            expected: Modality::Mr,
            found: volume.modality(),
        });
    }
    let scale = MrScale::from_volume(volume);
    let warning = scale.is_degenerate().then(|| {
        format!(
            "MR series {:?} is constant ({}); emitting black slices",
            volume.series_id(),
            scale.min
        )
    });
    let (w, h, n) = volume.dims();
    let slices = (0..n).map(|z| scale.map_slice(volume.slice(z), w, h)).collect();
    Ok(MrNormalized { slices, warning })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::volume;
    use super::super::{Orientation, CT_WINDOWS};
    use super::*;
    use proptest::prelude::*;

    fn px(hu: f32) -> [u8; 3] {
        window_ct_slice(&[hu], 1, 1, &CT_WINDOWS).unwrap().get_pixel(0, 0).0
    }

    #[test]
    fn red_window_endpoints() {
        assert_eq!(px(-1024.0)[0], 0);
        assert_eq!(px(1024.0)[0], 255);
    }

    #[test]
    fn green_window_endpoints_and_mid() {
        assert_eq!(px(-135.0)[1], 0);
        assert_eq!(px(215.0)[1], 255);
        // 255 * 175 / 350 = 127.5, rounds up
        assert_eq!(px(40.0)[1], 128);
    }

    #[test]
    fn blue_window_endpoints() {
        assert_eq!(px(0.0)[2], 0);
        assert_eq!(px(80.0)[2], 255);
    }

    #[test]
    fn saturates_above_all_windows() {
        assert_eq!(px(3000.0), [255, 255, 255]);
        assert_eq!(px(-3000.0), [0, 0, 0]);
    }

    #[test]
    fn non_finite_is_rejected_with_position() {
        let err = window_ct_slice(&[0.0, 1.0, 2.0, f32::INFINITY], 2, 2, &CT_WINDOWS).unwrap_err();
        assert!(matches!(err, VolumeError::NonFinite { x: 1, y: 1, .. }));
    }

    #[test]
    fn inverted_window_is_rejected() {
        let w = [CT_WINDOWS[0], WindowSpec { lo_hu: 5.0, hi_hu: 5.0 }, CT_WINDOWS[2]];
        assert!(window_ct_slice(&[0.0], 1, 1, &w).is_err());
    }

    #[test]
    fn mr_min_max() {
        let v = volume("mr", Modality::Mr, 101, 1, 1, Orientation::Axial, |x, _, _| x as f32);
        let out = normalize_mr_volume(&v).unwrap();
        assert!(out.warning.is_none());
        assert_eq!(out.slices[0].get_pixel(100, 0).0, [255, 255, 255]);
        assert_eq!(out.slices[0].get_pixel(50, 0).0, [128, 128, 128]);
        assert_eq!(out.slices[0].get_pixel(0, 0).0, [0, 0, 0]);
    }

    #[test]
    fn mr_constant_volume_is_black_with_warning() {
        let v = volume("flat", Modality::Mr, 4, 4, 5, Orientation::Axial, |_, _, _| 42.0);
        let out = normalize_mr_volume(&v).unwrap();
        assert!(out.warning.is_some());
        assert!(out.slices.iter().all(|s| s.pixels().all(|p| p.0 == [0, 0, 0])));
    }

    #[test]
    fn mr_scale_is_volume_global() {
        // Slice 0 spans 0..10, slice 1 spans 0..100; value 10 must map the
        // same in both.
        let v = volume("g", Modality::Mr, 2, 1, 2, Orientation::Axial, |x, _, z| {
            [[0.0, 10.0], [10.0, 100.0]][z][x]
        });
        let out = normalize_mr_volume(&v).unwrap();
        assert_eq!(out.slices[0].get_pixel(1, 0), out.slices[1].get_pixel(0, 0));
        assert_eq!(out.slices[0].get_pixel(1, 0).0[0], 26);
    }

    #[test]
    fn ct_volume_is_not_normalized_as_mr() {
        let v = volume("ct", Modality::Ct, 2, 2, 5, Orientation::Axial, |_, _, _| 0.0);
        assert!(matches!(normalize_mr_volume(&v), Err(VolumeError::WrongModality { .. })));
    }

    proptest! {
        #[test]
        fn windowing_is_monotone_and_clamped(a in -5000.0f32..5000.0, b in -5000.0f32..5000.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (plo, phi) = (px(lo), px(hi));
            for c in 0..3 {
                prop_assert!(plo[c] <= phi[c]);
                let w = CT_WINDOWS[c];
                if f64::from(lo) <= w.lo_hu { prop_assert_eq!(plo[c], 0); }
                if f64::from(hi) >= w.hi_hu { prop_assert_eq!(phi[c], 255); }
            }
        }
    }
}
