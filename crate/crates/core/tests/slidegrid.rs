use image::{Rgb, RgbImage};
use medharness::slidegrid::{
    grid_candidates, open_slide_dir, parse_slide_manifest, prepare_slide, subsample_patches, write_patchset,
    BinaryGrid, GridCell, Level, Patch, PatchSet, SlideConfig, SlidePyramid, TissueMask, PATCH_SIZE,
};
use proptest::prelude::*;

const PINK: Rgb<u8> = Rgb([230, 150, 200]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

fn grid_strategy() -> impl Strategy<Value = BinaryGrid> {
    (1usize..14, 1usize..14).prop_flat_map(|(w, h)| {
        proptest::collection::vec(any::<bool>(), w * h).prop_map(move |cells| BinaryGrid::from_fn(w, h, |x, y| cells[y * w + x]))
    })
}

/// Square window of side `size` around every cell, out-of-bounds cells skipped.
fn window_oracle(g: &BinaryGrid, size: usize, all: bool) -> BinaryGrid {
    let r = (size / 2) as isize;
    BinaryGrid::from_fn(g.width, g.height, |x, y| {
        let mut vals = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < g.width && (ny as usize) < g.height {
                    vals.push(g.get(nx as usize, ny as usize));
                }
            }
        }
        if all {
            vals.iter().all(|v| *v)
        } else {
            vals.iter().any(|v| *v)
        }
    })
}

/// 8-connected component sizes by repeated label propagation.
fn component_oracle(g: &BinaryGrid, min_cells: usize) -> BinaryGrid {
    let (w, h) = (g.width, g.height);
    let mut label: Vec<usize> = (0..w * h).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                if !g.get(x, y) {
                    continue;
                }
                for ny in y.saturating_sub(1)..(y + 2).min(h) {
                    for nx in x.saturating_sub(1)..(x + 2).min(w) {
                        if g.get(nx, ny) && label[ny * w + nx] < label[y * w + x] {
                            label[y * w + x] = label[ny * w + nx];
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let size = |l: usize| (0..w * h).filter(|&i| g.get(i % w, i / w) && label[i] == l).count();
    BinaryGrid::from_fn(w, h, |x, y| g.get(x, y) && size(label[y * w + x]) >= min_cells)
}

proptest! {
    #[test]
    fn morphology_matches_window_oracle(g in grid_strategy(), half in 0usize..3) {
        let size = 2 * half + 1;
        prop_assert_eq!(g.dilate(size), window_oracle(&g, size, false));
        prop_assert_eq!(g.erode(size), window_oracle(&g, size, true));
        prop_assert!(g.open(size).is_subset_of(&g));
        prop_assert!(g.is_subset_of(&g.close(size)));
    }

    #[test]
    fn small_components_match_label_oracle(g in grid_strategy(), min in 0usize..10) {
        let dropped = g.drop_small_components(min);
        prop_assert_eq!(&dropped, &component_oracle(&g, min));
        prop_assert_eq!(dropped.drop_small_components(min), dropped);
    }

    #[test]
    fn subsample_is_an_ordered_subsequence(n in 0usize..300, cap in 1usize..150, seed in any::<u64>()) {
        let set = PatchSet {
            slide_id: "s".into(),
            magnification: 10.0,
            patches: (0..n as u32).map(|i| Patch { grid_row: i / 20, grid_col: i % 20, png: Vec::new() }).collect(),
            cap: usize::MAX,
            caption: String::new(),
        };
        let a = subsample_patches(set.clone(), cap, seed);
        prop_assert_eq!(a.len(), n.min(cap));
        let cells = a.cells();
        prop_assert!(cells.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(&a, &subsample_patches(set, cap, seed));
    }
}

#[test]
fn candidates_match_cell_counting() {
    // mask cells are 5x pixels; one patch at magnification m spans 896·5/m of them
    let grid = BinaryGrid::from_fn(1000, 700, |x, y| {
        (100..520).contains(&x) && (50..400).contains(&y) || (x + 2 * y) % 97 < 3 || (800..990).contains(&x) && y > 600
    });
    let mask = TissueMask { grid: grid.clone(), scale_magnification: 5.0 };
    for mag in [5.0, 10.0, 20.0] {
        for frac in [0.0001, 0.1, 0.5] {
            let fp = f64::from(PATCH_SIZE) * 5.0 / mag;
            let (rows, cols) = ((700.0 / fp).ceil() as u32, (1000.0 / fp).ceil() as u32);
            let mut want = Vec::new();
            for row in 0..rows {
                for col in 0..cols {
                    let span = |i: u32, lim: usize| ((f64::from(i) * fp).floor() as usize).min(lim);
                    let (y0, y1, x0, x1) = (span(row, 700), span(row + 1, 700), span(col, 1000), span(col + 1, 1000));
                    let area = (y1 - y0) * (x1 - x0);
                    let hits = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y))).filter(|&(x, y)| grid.get(x, y)).count();
                    if area > 0 && hits as f64 / area as f64 >= frac {
                        want.push(GridCell { row, col });
                    }
                }
            }
            assert_eq!(grid_candidates(&mask, mag, frac), want, "{mag}x at {frac}");
        }
    }
}

fn two_blob_slide() -> SlidePyramid {
    let img = RgbImage::from_fn(900, 700, |x, y| {
        if (50..400).contains(&x) && (60..640).contains(&y) || (600..850).contains(&x) && (100..300).contains(&y) {
            PINK
        } else {
            WHITE
        }
    });
    SlidePyramid::new("blobs", "two fragments", vec![Level::from_image(5.0, img)]).unwrap()
}

#[test]
fn prepared_patches_are_capped_ordered_and_seeded() {
    let slide = two_blob_slide();
    let cfg = SlideConfig { cap: 9, ..SlideConfig::default() };
    let mut seen_mags = std::collections::BTreeSet::new();
    for seed in 0..12u64 {
        let a = prepare_slide(&slide, &cfg, seed).unwrap();
        let b = prepare_slide(&slide, &cfg, seed).unwrap();
        assert_eq!(a.patches, b.patches);
        assert!(a.patches.len() <= 9);
        assert_eq!(a.patches.len(), a.candidates.len().min(9));
        let cells = a.patches.cells();
        assert!(cells.windows(2).all(|w| w[0] < w[1]));
        assert!(cells.iter().all(|c| a.candidates.contains(c)));
        for p in &a.patches.patches {
            let img = image::load_from_memory(&p.png).unwrap();
            assert_eq!((img.width(), img.height()), (PATCH_SIZE, PATCH_SIZE));
        }
        seen_mags.insert(a.magnification as u32);
    }
    assert!(seen_mags.len() > 1, "twelve seeds all drew {seen_mags:?}");

    let blank = SlidePyramid::new("blank", "", vec![Level::from_image(5.0, RgbImage::from_pixel(300, 300, WHITE))]).unwrap();
    let prep = prepare_slide(&blank, &SlideConfig::default(), 1).unwrap();
    assert!(prep.candidates.is_empty() && prep.patches.is_empty());
}

#[test]
fn slide_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let slide_dir = dir.path().join("slide");
    std::fs::create_dir_all(&slide_dir).unwrap();
    RgbImage::from_fn(600, 500, |x, y| if (100..500).contains(&x) && (50..450).contains(&y) { PINK } else { WHITE })
        .save(slide_dir.join("l5.png"))
        .unwrap();
    std::fs::write(
        slide_dir.join("slide.json"),
        r#"{"slide_id": "s/1", "caption": "benign", "levels": [{"magnification": 5, "file": "l5.png"}]}"#,
    )
    .unwrap();
    let slide = open_slide_dir(&slide_dir).unwrap();
    assert_eq!(slide.slide_id, "s/1");
    let prep = prepare_slide(&slide, &SlideConfig::default(), 3).unwrap();
    let out = dir.path().join("out");
    let m = write_patchset(&prep.patches, 3, &out).unwrap();
    assert_eq!(m.patches.len(), prep.patches.len());
    assert_eq!(m.token_count, 256 * m.patches.len());
    for p in &m.patches {
        assert!(out.join(&p.file).is_file(), "{}", p.file);
        assert!(!p.file.contains(".."));
    }
    assert!(open_slide_dir(&slide_dir.join("slide.json")).is_ok());
}

#[test]
fn slide_manifest_validation() {
    let ok = r#"{"slide_id": "a", "levels": [{"magnification": 20, "file": "x.png"}]}"#;
    assert!(parse_slide_manifest(ok).is_ok());
    for bad in [
        r#"{"slide_id": "", "levels": [{"magnification": 20, "file": "x.png"}]}"#,
        r#"{"slide_id": "a", "levels": []}"#,
        r#"{"slide_id": "a", "levels": [{"magnification": 0, "file": "x.png"}]}"#,
        r#"{"slide_id": "a", "levels": [{"magnification": 5, "file": "../x.png"}]}"#,
        r#"{"slide_id": "a", "levels": [{"magnification": 5, "file": "/etc/x.png"}]}"#,
        r#"{"slide_id": "a", "levels": [{"magnification": 5, "file": "x.png"}], "extra": 1}"#,
        "not json",
    ] {
        assert!(parse_slide_manifest(bad).is_err(), "{bad}");
    }
}
