//! 4x4 key-frame collages for cheap surgical/non-surgical triage.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use thiserror::Error;

use crate::frames::{encode_png, FrameRef, FrameStore, StoreError};
use crate::manifest::write_atomic;

pub const KEYFRAMES: usize = 16;
pub const GRID: u32 = 4;

/// Shown to reviewers on storyboard tasks.
pub const REVIEW_GUIDANCE: &str =
    "Label the storyboard surgical if at least 50% of the key frames show surgical footage.";

#[derive(Debug, Error)]
pub enum StoryboardError {
    #[error("video has no frames")]
    NoFrames,
    #[error("expected {KEYFRAMES} keyframes, got {0}")]
    KeyframeCount(usize),
    #[error("tile size must be non-zero")]
    EmptyTile,
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone)]
pub struct Storyboard {
    pub video_id: String,
    pub keyframes: Vec<FrameRef>,
    pub tile_width: u32,
    pub tile_height: u32,
    pub collage: RgbImage,
}

/// Uniform temporal stratification: index `j * floor(N / n)` for `j < n`.
/// Short videos keep every frame and repeat the last one up to `n`.
pub fn select_keyframes(frames: &[FrameRef], n: usize) -> Result<Vec<FrameRef>, StoryboardError> {
    let last = frames.last().ok_or(StoryboardError::NoFrames)?;
    if frames.len() >= n {
        let stride = frames.len() / n;
        Ok((0..n).map(|j| frames[j * stride].clone()).collect())
    } else {
        let mut out = frames.to_vec();
        out.resize(n, last.clone());
        Ok(out)
    }
}

/// Scales `image` to fit a `tile_w x tile_h` box with its aspect preserved,
/// centered on black.
pub fn letterbox(image: &RgbImage, tile_w: u32, tile_h: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    let mut tile = RgbImage::from_pixel(tile_w, tile_h, Rgb([0, 0, 0]));
    if w == 0 || h == 0 {
        return tile;
    }
    // Integer cross-multiplication decides which side binds.
    let (sw, sh) = if (w as u64) * (tile_h as u64) >= (h as u64) * (tile_w as u64) {
        (tile_w, ((h as u64 * tile_w as u64 + w as u64 / 2) / w as u64).clamp(1, tile_h as u64) as u32)
    } else {
        (((w as u64 * tile_h as u64 + h as u64 / 2) / h as u64).clamp(1, tile_w as u64) as u32, tile_h)
    };
    let scaled = if (sw, sh) == (w, h) {
        image.clone()
    } else {
        imageops::resize(image, sw, sh, FilterType::Triangle)
    };
    imageops::replace(&mut tile, &scaled, ((tile_w - sw) / 2) as i64, ((tile_h - sh) / 2) as i64);
    tile
}

/// Tile `(r, c)` holds keyframe `4r + c`.
pub fn compose_storyboard(
    keyframes: &[FrameRef],
    store: &FrameStore,
    tile_w: u32,
    tile_h: u32,
) -> Result<Storyboard, StoryboardError> {
    if keyframes.len() != KEYFRAMES {
        return Err(StoryboardError::KeyframeCount(keyframes.len()));
    }
    if tile_w == 0 || tile_h == 0 {
        return Err(StoryboardError::EmptyTile);
    }
    let mut collage = RgbImage::new(GRID * tile_w, GRID * tile_h);
    let mut previous: Option<(&FrameRef, RgbImage)> = None;
    for (k, frame) in keyframes.iter().enumerate() {
        let tile = match &previous {
            Some((f, tile)) if *f == frame => tile.clone(),
            _ => letterbox(&store.get_image(frame)?, tile_w, tile_h),
        };
        let (r, c) = (k as u32 / GRID, k as u32 % GRID);
        imageops::replace(&mut collage, &tile, (c * tile_w) as i64, (r * tile_h) as i64);
        previous = Some((frame, tile));
    }
    Ok(Storyboard {
        video_id: keyframes[0].video_id.clone(),
        keyframes: keyframes.to_vec(),
        tile_width: tile_w,
        tile_height: tile_h,
        collage,
    })
}

impl Storyboard {
    pub fn tile(&self, row: u32, col: u32) -> RgbImage {
        imageops::crop_imm(
            &self.collage,
            col * self.tile_width,
            row * self.tile_height,
            self.tile_width,
            self.tile_height,
        )
        .to_image()
    }

    pub fn path(root: &Path, video_id: &str) -> PathBuf {
        root.join("storyboards").join(format!("{video_id}.png"))
    }

    /// Writes `<root>/storyboards/<video_id>.png`.
    pub fn save(&self, root: &Path) -> Result<PathBuf, StoryboardError> {
        let path = Self::path(root, &self.video_id);
        write_atomic(&path, &encode_png(&self.collage)?).map_err(StoreError::Io)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn refs(n: usize) -> Vec<FrameRef> {
        (0..n).map(|i| FrameRef::new("v", i)).collect()
    }

    #[test]
    fn stratified_selection() {
        let got: Vec<_> = select_keyframes(&refs(160), 16).unwrap().iter().map(|f| f.index).collect();
        assert_eq!(got, (0..16).map(|j| j * 10).collect::<Vec<_>>());
    }

    #[test]
    fn short_videos_pad_with_last_frame() {
        let got: Vec<_> = select_keyframes(&refs(5), 16).unwrap().iter().map(|f| f.index).collect();
        let mut expected = vec![0, 1, 2, 3, 4];
        expected.extend(std::iter::repeat(4).take(11));
        assert_eq!(got, expected);
    }

    #[test]
    fn no_frames() {
        assert!(matches!(select_keyframes(&[], 16), Err(StoryboardError::NoFrames)));
    }

    proptest! {
        #[test]
        fn selection_is_ordered_and_sized(n in 1usize..2000) {
            let sel = select_keyframes(&refs(n), 16).unwrap();
            prop_assert_eq!(sel.len(), 16);
            prop_assert!(sel.windows(2).all(|w| w[0].index <= w[1].index));
            prop_assert!(sel.iter().all(|f| f.index < n));
        }
    }

    fn sentinel(i: usize) -> Rgb<u8> {
        Rgb([(i * 13 % 256) as u8, (i * 29 % 256) as u8, (255 - i) as u8])
    }

    fn store_with_sentinels(n: usize, w: u32, h: u32) -> (tempfile::TempDir, FrameStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = FrameStore::open(dir.path()).unwrap();
        for i in 0..n {
            store.put_image(&FrameRef::new("v", i), &RgbImage::from_pixel(w, h, sentinel(i))).unwrap();
        }
        (dir, store)
    }

    #[test]
    fn collage_dimensions() {
        let (_d, store) = store_with_sentinels(16, 64, 36);
        let sb = compose_storyboard(&refs(16), &store, 320, 180).unwrap();
        assert_eq!(sb.collage.dimensions(), (1280, 720));
    }

    #[test]
    fn fifteen_keyframes_is_an_error() {
        let (_d, store) = store_with_sentinels(16, 8, 8);
        assert!(matches!(
            compose_storyboard(&refs(15), &store, 8, 8),
            Err(StoryboardError::KeyframeCount(15))
        ));
    }

    #[test]
    fn missing_frame_is_not_found() {
        let (_d, store) = store_with_sentinels(3, 8, 8);
        let mut kf = refs(16);
        kf[15] = FrameRef::new("v", 99);
        assert!(matches!(
            compose_storyboard(&kf, &store, 8, 8),
            Err(StoryboardError::Store(StoreError::NotFound(_)))
        ));
    }

    #[test]
    fn first_tile_is_scaled_keyframe_zero() {
        let dir = tempfile::tempdir().unwrap();
        let store = FrameStore::open(dir.path()).unwrap();
        for i in 0..16 {
            let img = RgbImage::from_fn(40, 30, |x, y| Rgb([(x * 6) as u8, (y * 8) as u8, i as u8]));
            store.put_image(&FrameRef::new("v", i), &img).unwrap();
        }
        let sb = compose_storyboard(&refs(16), &store, 20, 15).unwrap();
        let expected = letterbox(&store.get_image(&FrameRef::new("v", 0)).unwrap(), 20, 15);
        assert_eq!(sb.tile(0, 0), expected);
    }

    #[test]
    fn letterbox_pads_black() {
        let img = RgbImage::from_pixel(100, 100, Rgb([200, 10, 10]));
        let tile = letterbox(&img, 40, 20);
        assert_eq!(tile.get_pixel(0, 10), &Rgb([0, 0, 0]));
        assert_eq!(tile.get_pixel(39, 10), &Rgb([0, 0, 0]));
        assert_eq!(tile.get_pixel(20, 10), &Rgb([200, 10, 10]));
        // 20x20 content centered in 40x20.
        assert_eq!(tile.get_pixel(10, 0), &Rgb([200, 10, 10]));
        assert_eq!(tile.get_pixel(9, 0), &Rgb([0, 0, 0]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn tiles_hold_exactly_the_selected_frames(n in 1usize..60) {
            let (_d, store) = store_with_sentinels(n, 12, 12);
            let frames = store.frames("v").unwrap();
            let kf = select_keyframes(&frames, 16).unwrap();
            let sb = compose_storyboard(&kf, &store, 6, 6).unwrap();
            for (k, f) in kf.iter().enumerate() {
                let tile = sb.tile(k as u32 / 4, k as u32 % 4);
                prop_assert!(tile.pixels().all(|p| *p == sentinel(f.index)));
            }
        }
    }
}
