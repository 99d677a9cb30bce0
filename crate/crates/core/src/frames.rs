//! Content-addressed store of 1-fps frames.
//!
//! Directory layout:
//! ```text
//! {root}/
//! └── {video_id}/
//!     ├── 00000000.png
//!     ├── 00000001.png
//!     └── ...
//! ```
//!
//! Keys are `{video_id}/{index:08}`, so lexicographic key order is temporal
//! order within a video. A key is written at most once: re-putting identical
//! bytes is a no-op, putting different bytes is a [`StoreError::KeyConflict`].

use std::fs;
use std::io::{self, Cursor, Write};
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A 1-fps frame position. `timestamp_s` equals `index` seconds.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: String,
    pub index: usize,
}

impl FrameRef {
    pub fn new(video_id: impl Into<String>, index: usize) -> Self {
        FrameRef {
            video_id: video_id.into(),
            index,
        }
    }

    pub fn timestamp_s(&self) -> f64 {
        self.index as f64
    }

    pub fn key(&self) -> String {
        frame_key(&self.video_id, self.index)
    }
}

pub fn frame_key(video_id: &str, index: usize) -> String {
    format!("{video_id}/{index:08}")
}

/// Parses `video_id/00000012` into its parts.
pub fn parse_key(key: &str) -> Result<FrameRef, StoreError> {
    let (video_id, idx) = key
        .rsplit_once('/')
        .ok_or_else(|| StoreError::InvalidKey(key.to_string()))?;
    if idx.len() != 8 || !idx.bytes().all(|b| b.is_ascii_digit()) {
        return Err(StoreError::InvalidKey(key.to_string()));
    }
    validate_video_id(video_id)?;
    let index = idx.parse().map_err(|_| StoreError::InvalidKey(key.to_string()))?;
    Ok(FrameRef::new(video_id, index))
}

/// Video ids become directory names, so they must be a single safe path component.
pub fn validate_video_id(video_id: &str) -> Result<(), StoreError> {
    let ok = !video_id.is_empty()
        && video_id != "."
        && video_id != ".."
        && video_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidKey(video_id.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "format")]
pub enum FrameEncoding {
    /// Lossless; obliterated pixels survive storage unchanged.
    #[default]
    Png,
    Jpeg { quality: u8 },
}

impl FrameEncoding {
    pub fn extension(self) -> &'static str {
        match self {
            FrameEncoding::Png => "png",
            FrameEncoding::Jpeg { .. } => "jpg",
        }
    }

    pub fn encode(self, image: &RgbImage) -> Result<Vec<u8>, StoreError> {
        let mut buf = Cursor::new(Vec::new());
        match self {
            FrameEncoding::Png => image.write_to(&mut buf, ImageFormat::Png),
            FrameEncoding::Jpeg { quality } => {
                let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
                image.write_with_encoder(enc)
            }
        }
        .map_err(|e| StoreError::Codec(e.to_string()))?;
        Ok(buf.into_inner())
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage, StoreError> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| StoreError::Codec(e.to_string()))
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, StoreError> {
    FrameEncoding::Png.encode(image)
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("frame not found: {0}")]
    NotFound(String),
    #[error("invalid frame key {0:?}")]
    InvalidKey(String),
    #[error("key {0} already holds different content")]
    KeyConflict(String),
    #[error("image codec: {0}")]
    Codec(String),
    #[error("store io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct FrameStore {
    root: PathBuf,
    encoding: FrameEncoding,
}

impl FrameStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        Self::with_encoding(root, FrameEncoding::Png)
    }

    pub fn with_encoding(root: impl Into<PathBuf>, encoding: FrameEncoding) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(FrameStore { root, encoding })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn encoding(&self) -> FrameEncoding {
        self.encoding
    }

    pub fn path_for(&self, frame: &FrameRef) -> PathBuf {
        self.root
            .join(&frame.video_id)
            .join(format!("{:08}.{}", frame.index, self.encoding.extension()))
    }

    pub fn contains(&self, frame: &FrameRef) -> bool {
        self.path_for(frame).is_file()
    }

    /// Idempotent put: identical bytes at an existing key succeed without writing.
    pub fn put(&self, frame: &FrameRef, bytes: &[u8]) -> Result<(), StoreError> {
        validate_video_id(&frame.video_id)?;
        let path = self.path_for(frame);
        if path.is_file() {
            return if fs::read(&path)? == bytes {
                Ok(())
            } else {
                Err(StoreError::KeyConflict(frame.key()))
            };
        }
        fs::create_dir_all(path.parent().expect("frame paths have a parent"))?;
        let tmp = path.with_extension("partial");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn put_image(&self, frame: &FrameRef, image: &RgbImage) -> Result<(), StoreError> {
        let bytes = self.encoding.encode(image)?;
        self.put(frame, &bytes)
    }

    pub fn get(&self, frame: &FrameRef) -> Result<Vec<u8>, StoreError> {
        validate_video_id(&frame.video_id)?;
        match fs::read(self.path_for(frame)) {
            Ok(bytes) => Ok(bytes),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(frame.key())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn get_key(&self, key: &str) -> Result<Vec<u8>, StoreError> {
        self.get(&parse_key(key)?)
    }

    pub fn get_image(&self, frame: &FrameRef) -> Result<RgbImage, StoreError> {
        decode_image(&self.get(frame)?)
    }

    /// Frames of one video in index order. Unknown videos yield an empty list.
    pub fn frames(&self, video_id: &str) -> Result<Vec<FrameRef>, StoreError> {
        validate_video_id(video_id)?;
        let dir = self.root.join(video_id);
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let ext = self.encoding.extension();
        let mut names: Vec<String> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.len() == 9 + ext.len() && n.ends_with(ext) && n.as_bytes()[8] == b'.')
            .collect();
        names.sort();
        names
            .iter()
            .map(|n| parse_key(&format!("{video_id}/{}", &n[..8])))
            .collect()
    }

    /// Iterates `(frame, bytes)` in temporal order.
    pub fn iter(&self, video_id: &str) -> Result<impl Iterator<Item = Result<(FrameRef, Vec<u8>), StoreError>> + '_, StoreError> {
        let frames = self.frames(video_id)?;
        Ok(frames.into_iter().map(move |f| {
            let bytes = self.get(&f)?;
            Ok((f, bytes))
        }))
    }

    /// Drops every frame of a video; used to discard partial decodes.
    pub fn remove_video(&self, video_id: &str) -> Result<(), StoreError> {
        validate_video_id(video_id)?;
        let dir = self.root.join(video_id);
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn put_get_round_trip_random_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let store = FrameStore::open(dir.path()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut payloads = Vec::new();
        for i in 0..1000 {
            let len = rng.gen_range(0..512);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let f = FrameRef::new(format!("v{}", i % 10), i / 10);
            store.put(&f, &bytes).unwrap();
            payloads.push((f, bytes));
        }
        for (f, bytes) in &payloads {
            assert_eq!(&store.get(f).unwrap(), bytes);
        }
    }

    #[test]
    fn iteration_is_temporal() {
        let dir = tempfile::tempdir().unwrap();
        let store = FrameStore::open(dir.path()).unwrap();
        for i in [2usize, 0, 1] {
            store.put(&FrameRef::new("vid", i), &[i as u8]).unwrap();
        }
        let got: Vec<_> = store.iter("vid").unwrap().map(|r| r.unwrap()).collect();
        assert_eq!(got.iter().map(|(f, _)| f.index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(got[2].1, vec![2]);
    }

    #[test]
    fn ten_thousand_sorts_after_nine_thousand() {
        let dir = tempfile::tempdir().unwrap();
        let store = FrameStore::open(dir.path()).unwrap();
        store.put(&FrameRef::new("v", 10_000), b"b").unwrap();
        store.put(&FrameRef::new("v", 9_999), b"a").unwrap();
        let idx: Vec<_> = store.frames("v").unwrap().into_iter().map(|f| f.index).collect();
        assert_eq!(idx, vec![9_999, 10_000]);
    }

    #[test]
    fn unknown_key_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = FrameStore::open(dir.path()).unwrap();
        assert!(matches!(store.get_key("nope/00000000"), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn put_is_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let store = FrameStore::open(dir.path()).unwrap();
        let f = FrameRef::new("v", 0);
        store.put(&f, b"abc").unwrap();
        store.put(&f, b"abc").unwrap();
        assert!(matches!(store.put(&f, b"xyz"), Err(StoreError::KeyConflict(_))));
        assert_eq!(store.get(&f).unwrap(), b"abc");
    }

    #[test]
    fn keys_are_validated() {
        assert_eq!(parse_key("abc/00000042").unwrap(), FrameRef::new("abc", 42));
        assert!(parse_key("../00000001").is_err());
        assert!(parse_key("abc/42").is_err());
        assert!(parse_key("noslash").is_err());
        assert_eq!(FrameRef::new("abc", 42).key(), "abc/00000042");
    }

    #[test]
    fn png_is_lossless() {
        let img = RgbImage::from_fn(7, 5, |x, y| image::Rgb([x as u8 * 30, y as u8 * 40, 200]));
        let bytes = encode_png(&img).unwrap();
        assert_eq!(decode_image(&bytes).unwrap(), img);
    }
}
