//! Video probing, ingestion and 1-fps frame sampling.
//!
//! Two containers are understood natively:
//! - `LRV1` raw RGB streams (used for synthetic corpora and fixtures),
//! - ISO-BMFF (`.mp4`/`.mov`) headers, for duration, size and frame rate.
//!
//! Pixel decoding of compressed containers is delegated to an `ffmpeg`
//! binary on `PATH` when one is present.

use std::fs;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};

use image::RgbImage;
use thiserror::Error;

use crate::frames::{validate_video_id, FrameRef, FrameStore, StoreError};
use crate::manifest::{Manifest, Stage, VideoRecord};

pub const RAW_MAGIC: &[u8; 4] = b"LRV1";
const RAW_HEADER_LEN: usize = 4 + 4 + 4 + 8 + 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VideoInfo {
    pub native_fps: f64,
    pub duration_s: f64,
    pub width: u32,
    pub height: u32,
    /// Native frames in the stream.
    pub frame_count: usize,
}

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("unsupported container")]
    UnsupportedContainer,
    #[error("no decoder available for this container ({0})")]
    DecoderUnavailable(String),
    #[error("decode failed at native frame {index}: {message}")]
    Decode { index: usize, message: String },
}

/// Reads container metadata and native frames.
pub trait VideoDecoder: Send + Sync {
    fn probe(&self, path: &Path) -> Result<VideoInfo, VideoError>;

    /// Decodes the requested native frame indices, returned in request order.
    fn decode(&self, path: &Path, info: &VideoInfo, native_indices: &[usize]) -> Result<Vec<RgbImage>, VideoError>;
}

/// Picks a backend from the file's magic bytes.
#[derive(Debug, Default, Clone, Copy)]
pub struct AutoDecoder;

enum Container {
    Raw,
    IsoBmff,
    Other,
}

fn sniff(path: &Path) -> Result<Container, VideoError> {
    let mut head = [0u8; 12];
    let mut f = fs::File::open(path)?;
    let n = read_up_to(&mut f, &mut head)?;
    if n >= 4 && &head[..4] == RAW_MAGIC {
        Ok(Container::Raw)
    } else if n >= 8 && matches!(&head[4..8], b"ftyp" | b"moov" | b"mdat" | b"free" | b"wide") {
        Ok(Container::IsoBmff)
    } else {
        Ok(Container::Other)
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

impl VideoDecoder for AutoDecoder {
    fn probe(&self, path: &Path) -> Result<VideoInfo, VideoError> {
        match sniff(path)? {
            Container::Raw => RawVideo::probe(path),
            Container::IsoBmff => probe_mp4(&fs::read(path)?),
            Container::Other => Ffmpeg::probe(path),
        }
    }

    fn decode(&self, path: &Path, info: &VideoInfo, native_indices: &[usize]) -> Result<Vec<RgbImage>, VideoError> {
        match sniff(path)? {
            Container::Raw => RawVideo::decode(path, info, native_indices),
            _ => Ffmpeg::decode(path, info, native_indices),
        }
    }
}

/// Uncompressed `LRV1` container.
///
/// Layout (little-endian): magic `LRV1`, `u32` width, `u32` height, `f64` fps,
/// `u32` frame count, then `frame_count * width * height * 3` RGB bytes.
pub struct RawVideo;

impl RawVideo {
    pub fn write(path: &Path, fps: f64, frames: &[RgbImage]) -> io::Result<()> {
        let (w, h) = frames.first().map(|f| f.dimensions()).unwrap_or((0, 0));
        let mut out = io::BufWriter::new(fs::File::create(path)?);
        out.write_all(RAW_MAGIC)?;
        out.write_all(&w.to_le_bytes())?;
        out.write_all(&h.to_le_bytes())?;
        out.write_all(&fps.to_le_bytes())?;
        out.write_all(&(frames.len() as u32).to_le_bytes())?;
        for f in frames {
            if f.dimensions() != (w, h) {
                return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame sizes differ"));
            }
            out.write_all(f.as_raw())?;
        }
        out.flush()
    }

    fn probe(path: &Path) -> Result<VideoInfo, VideoError> {
        let mut header = [0u8; RAW_HEADER_LEN];
        let mut f = fs::File::open(path)?;
        if read_up_to(&mut f, &mut header)? < RAW_HEADER_LEN {
            return Err(VideoError::Malformed("truncated LRV1 header".into()));
        }
        let width = u32::from_le_bytes(header[4..8].try_into().unwrap());
        let height = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let fps = f64::from_le_bytes(header[12..20].try_into().unwrap());
        let frame_count = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
        if !(fps.is_finite() && fps > 0.0) {
            return Err(VideoError::Malformed(format!("invalid fps {fps}")));
        }
        Ok(VideoInfo {
            native_fps: fps,
            duration_s: frame_count as f64 / fps,
            width,
            height,
            frame_count,
        })
    }

    fn decode(path: &Path, info: &VideoInfo, native_indices: &[usize]) -> Result<Vec<RgbImage>, VideoError> {
        let frame_len = info.width as usize * info.height as usize * 3;
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut skip = [0u8; RAW_HEADER_LEN];
        reader.read_exact(&mut skip)?;
        let mut wanted: Vec<(usize, usize)> = native_indices.iter().copied().enumerate().map(|(i, n)| (n, i)).collect();
        wanted.sort();
        let mut out: Vec<Option<RgbImage>> = vec![None; native_indices.len()];
        let mut buf = vec![0u8; frame_len];
        let mut current = 0usize;
        let mut last: Option<RgbImage> = None;
        for (native, slot) in wanted {
            if last.is_none() || current <= native {
                while current <= native {
                    reader.read_exact(&mut buf).map_err(|e| VideoError::Decode {
                        index: current,
                        message: e.to_string(),
                    })?;
                    current += 1;
                }
                last = Some(
                    RgbImage::from_raw(info.width, info.height, buf.clone())
                        .ok_or_else(|| VideoError::Malformed("bad frame size".into()))?,
                );
            }
            out[slot] = last.clone();
        }
        Ok(out.into_iter().map(|f| f.expect("every slot filled")).collect())
    }
}

/// Subprocess backend. Probing uses `ffprobe`, decoding pipes rgb24 from `ffmpeg`.
pub struct Ffmpeg;

impl Ffmpeg {
    pub fn available() -> bool {
        Command::new("ffmpeg")
            .arg("-version")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    }

    fn probe(path: &Path) -> Result<VideoInfo, VideoError> {
        let output = Command::new("ffprobe")
            .args([
                "-v",
                "error",
                "-select_streams",
                "v:0",
                "-count_packets",
                "-show_entries",
                "stream=width,height,r_frame_rate,nb_read_packets:format=duration",
                "-of",
                "default=noprint_wrappers=1",
            ])
            .arg(path)
            .output()
            .map_err(|e| VideoError::DecoderUnavailable(format!("ffprobe: {e}")))?;
        if !output.status.success() {
            return Err(VideoError::UnsupportedContainer);
        }
        let text = String::from_utf8_lossy(&output.stdout);
        let field = |name: &str| {
            text.lines()
                .find_map(|l| l.strip_prefix(name).and_then(|r| r.strip_prefix('=')))
                .map(str::trim)
                .ok_or_else(|| VideoError::Malformed(format!("ffprobe output lacks {name}")))
        };
        let parse_num = |s: &str| s.parse::<f64>().map_err(|e| VideoError::Malformed(format!("{s}: {e}")));
        let fps = match field("r_frame_rate")?.split_once('/') {
            Some((n, d)) => parse_num(n)? / parse_num(d)?,
            None => parse_num(field("r_frame_rate")?)?,
        };
        Ok(VideoInfo {
            native_fps: fps,
            duration_s: parse_num(field("duration")?)?,
            width: parse_num(field("width")?)? as u32,
            height: parse_num(field("height")?)? as u32,
            frame_count: parse_num(field("nb_read_packets")?)? as usize,
        })
    }

    fn decode(path: &Path, info: &VideoInfo, native_indices: &[usize]) -> Result<Vec<RgbImage>, VideoError> {
        if !Self::available() {
            return Err(VideoError::DecoderUnavailable("ffmpeg not found on PATH".into()));
        }
        let mut child = Command::new("ffmpeg")
            .args(["-v", "error", "-i"])
            .arg(path)
            .args(["-f", "rawvideo", "-pix_fmt", "rgb24", "-"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| VideoError::DecoderUnavailable(format!("ffmpeg: {e}")))?;
        let mut stdout = BufReader::new(child.stdout.take().expect("stdout is piped"));
        let frame_len = info.width as usize * info.height as usize * 3;
        let max_needed = native_indices.iter().copied().max().unwrap_or(0);
        let mut decoded: std::collections::BTreeMap<usize, RgbImage> = Default::default();
        let mut buf = vec![0u8; frame_len];
        let mut last = None;
        for n in 0..=max_needed {
            match stdout.read_exact(&mut buf) {
                Ok(()) => {
                    let img = RgbImage::from_raw(info.width, info.height, buf.clone())
                        .ok_or_else(|| VideoError::Malformed("bad frame size".into()))?;
                    if native_indices.contains(&n) {
                        decoded.insert(n, img.clone());
                    }
                    last = Some((n, img));
                }
                // The header frame count can overshoot the decodable stream by a frame or two.
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof && last.is_some() => break,
                Err(e) => {
                    let _ = child.kill();
                    return Err(VideoError::Decode {
                        index: n,
                        message: e.to_string(),
                    });
                }
            }
        }
        let _ = child.kill();
        let _ = child.wait();
        let (last_index, last_img) = last.ok_or(VideoError::Decode {
            index: 0,
            message: "empty stream".into(),
        })?;
        Ok(native_indices
            .iter()
            .map(|n| match decoded.get(n) {
                Some(img) => img.clone(),
                None if *n > last_index => last_img.clone(),
                None => unreachable!("indices up to the last decoded frame are kept"),
            })
            .collect())
    }
}

struct Mp4Box<'a> {
    kind: [u8; 4],
    body: &'a [u8],
}

fn mp4_boxes(mut data: &[u8]) -> Result<Vec<Mp4Box<'_>>, VideoError> {
    let mut out = Vec::new();
    while data.len() >= 8 {
        let size32 = u32::from_be_bytes(data[0..4].try_into().unwrap()) as u64;
        let kind: [u8; 4] = data[4..8].try_into().unwrap();
        let (header, size) = match size32 {
            0 => (8, data.len() as u64),
            1 => {
                if data.len() < 16 {
                    return Err(VideoError::Malformed("truncated largesize".into()));
                }
                (16, u64::from_be_bytes(data[8..16].try_into().unwrap()))
            }
            n => (8, n),
        };
        if size < header as u64 || size > data.len() as u64 {
            return Err(VideoError::Malformed(format!(
                "box {} has size {size}",
                String::from_utf8_lossy(&kind)
            )));
        }
        out.push(Mp4Box {
            kind,
            body: &data[header..size as usize],
        });
        data = &data[size as usize..];
    }
    Ok(out)
}

fn child<'a>(boxes: &[Mp4Box<'a>], kind: &[u8; 4]) -> Option<&'a [u8]> {
    boxes.iter().find(|b| &b.kind == kind).map(|b| b.body)
}

fn be_u32(b: &[u8], at: usize) -> Result<u32, VideoError> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| VideoError::Malformed("truncated box".into()))
}

fn be_u64(b: &[u8], at: usize) -> Result<u64, VideoError> {
    b.get(at..at + 8)
        .map(|s| u64::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| VideoError::Malformed("truncated box".into()))
}

/// `(timescale, duration)` of an `mvhd` or `mdhd` body.
fn header_time(body: &[u8]) -> Result<(u32, u64), VideoError> {
    match body.first() {
        Some(0) => Ok((be_u32(body, 12)?, be_u32(body, 16)? as u64)),
        Some(1) => Ok((be_u32(body, 20)?, be_u64(body, 24)?)),
        _ => Err(VideoError::Malformed("unknown header version".into())),
    }
}

/// Reads duration, frame size and frame rate from ISO-BMFF headers.
pub fn probe_mp4(data: &[u8]) -> Result<VideoInfo, VideoError> {
    let top = mp4_boxes(data)?;
    let moov = mp4_boxes(child(&top, b"moov").ok_or_else(|| VideoError::Malformed("no moov box".into()))?)?;
    let (timescale, duration) = header_time(child(&moov, b"mvhd").ok_or_else(|| VideoError::Malformed("no mvhd".into()))?)?;
    if timescale == 0 {
        return Err(VideoError::Malformed("zero timescale".into()));
    }
    for trak in moov.iter().filter(|b| &b.kind == b"trak") {
        let trak = mp4_boxes(trak.body)?;
        let Some(mdia) = child(&trak, b"mdia") else { continue };
        let mdia = mp4_boxes(mdia)?;
        let is_video = child(&mdia, b"hdlr").map(|h| h.get(8..12) == Some(b"vide")).unwrap_or(false);
        if !is_video {
            continue;
        }
        let tkhd = child(&trak, b"tkhd").ok_or_else(|| VideoError::Malformed("no tkhd".into()))?;
        let size_at = if tkhd.first() == Some(&1) { 88 } else { 76 };
        let width = be_u32(tkhd, size_at)? >> 16;
        let height = be_u32(tkhd, size_at + 4)? >> 16;
        let (media_scale, media_duration) =
            header_time(child(&mdia, b"mdhd").ok_or_else(|| VideoError::Malformed("no mdhd".into()))?)?;
        let stbl = child(&mp4_boxes(child(&mdia, b"minf").ok_or_else(|| VideoError::Malformed("no minf".into()))?)?, b"stbl")
            .ok_or_else(|| VideoError::Malformed("no stbl".into()))?;
        let stts = child(&mp4_boxes(stbl)?, b"stts").ok_or_else(|| VideoError::Malformed("no stts".into()))?;
        let entries = be_u32(stts, 4)? as usize;
        let mut frame_count = 0usize;
        for e in 0..entries {
            frame_count += be_u32(stts, 8 + e * 8)? as usize;
        }
        let media_s = media_duration as f64 / media_scale.max(1) as f64;
        if media_s <= 0.0 {
            return Err(VideoError::Malformed("zero-length video track".into()));
        }
        return Ok(VideoInfo {
            native_fps: frame_count as f64 / media_s,
            duration_s: duration as f64 / timescale as f64,
            width,
            height,
            frame_count,
        });
    }
    Err(VideoError::Malformed("no video track".into()))
}

#[derive(Debug, Clone, Default)]
pub struct IngestMetadata {
    /// Defaults to the source file stem.
    pub video_id: Option<String>,
    pub title: String,
    /// Recorded as the record's `source`; defaults to the local path. URLs go here.
    pub source_label: Option<String>,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {message}")]
    Unreadable { path: String, message: String },
    #[error("{0} is empty")]
    EmptySource(String),
    #[error("metadata must contain a non-empty title")]
    MissingTitle,
    #[error("duplicate video id {0:?}")]
    DuplicateVideo(String),
    #[error("invalid video id: {0}")]
    InvalidId(String),
    #[error("probe failed: {0}")]
    Probe(#[from] VideoError),
}

/// Creates a [`VideoRecord`] from a local file and registers it in the manifest.
/// No frames are extracted.
pub fn ingest_video(
    manifest: &mut Manifest,
    path: &Path,
    meta: IngestMetadata,
    decoder: &dyn VideoDecoder,
) -> Result<VideoRecord, IngestError> {
    if meta.title.trim().is_empty() {
        return Err(IngestError::MissingTitle);
    }
    let unreadable = |e: io::Error| IngestError::Unreadable {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let size = fs::metadata(path).map_err(unreadable)?.len();
    if size == 0 {
        return Err(IngestError::EmptySource(path.display().to_string()));
    }
    fs::File::open(path).map_err(unreadable)?;
    let video_id = match meta.video_id {
        Some(id) => id,
        None => path
            .file_stem()
            .and_then(|s| s.to_str())
            .map(str::to_owned)
            .ok_or_else(|| IngestError::InvalidId(path.display().to_string()))?,
    };
    validate_video_id(&video_id).map_err(|_| IngestError::InvalidId(video_id.clone()))?;
    if manifest.contains(&video_id) {
        return Err(IngestError::DuplicateVideo(video_id));
    }
    let info = decoder.probe(path)?;
    let source = meta.source_label.unwrap_or_else(|| path.display().to_string());
    let mut record = VideoRecord::new(video_id, source, meta.title);
    record.native_fps = info.native_fps;
    record.duration_s = info.duration_s;
    record.width = info.width;
    record.height = info.height;
    record.pass(Stage::Ingested).expect("fresh record");
    manifest
        .insert(record.clone())
        .map_err(|_| IngestError::DuplicateVideo(record.video_id.clone()))?;
    Ok(record)
}

/// Native frame nearest to each integer second `t = 0..ceil(duration)-1`,
/// clamped to the last native frame.
pub fn one_fps_native_indices(duration_s: f64, native_fps: f64, native_frames: usize) -> Vec<usize> {
    let n = duration_s.max(0.0).ceil() as usize;
    let last = native_frames.saturating_sub(1);
    (0..n)
        .map(|t| ((t as f64 * native_fps).round() as usize).min(last))
        .collect()
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("video has no frames to sample")]
    NoFrames,
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Samples one frame per second into the store. On any failure the partial
/// frame set for the video is removed before returning the error.
pub fn sample_frames(
    record: &VideoRecord,
    path: &Path,
    decoder: &dyn VideoDecoder,
    store: &FrameStore,
) -> Result<Vec<FrameRef>, SampleError> {
    let result = (|| {
        let info = decoder.probe(path)?;
        let indices = one_fps_native_indices(record.duration_s, info.native_fps, info.frame_count);
        if indices.is_empty() || info.frame_count == 0 {
            return Err(SampleError::NoFrames);
        }
        let images = decoder.decode(path, &info, &indices)?;
        let mut refs = Vec::with_capacity(images.len());
        for (t, img) in images.iter().enumerate() {
            let f = FrameRef::new(record.video_id.clone(), t);
            store.put_image(&f, img)?;
            refs.push(f);
        }
        Ok(refs)
    })();
    if result.is_err() {
        let _ = store.remove_video(&record.video_id);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(w: u32, h: u32, v: u8) -> RgbImage {
        RgbImage::from_pixel(w, h, image::Rgb([v, v, v]))
    }

    fn write_video(dir: &Path, name: &str, fps: f64, frames: usize) -> std::path::PathBuf {
        let path = dir.join(name);
        let imgs: Vec<_> = (0..frames).map(|i| solid(4, 3, (i % 256) as u8)).collect();
        RawVideo::write(&path, fps, &imgs).unwrap();
        path
    }

    #[test]
    fn ingest_reads_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_video(dir.path(), "v1.lrv", 30.0, 300);
        let mut m = Manifest::new();
        let meta = IngestMetadata {
            title: "Robotic Cholecystectomy".into(),
            ..Default::default()
        };
        let r = ingest_video(&mut m, &path, meta, &AutoDecoder).unwrap();
        assert_eq!(r.video_id, "v1");
        assert_eq!(r.duration_s, 10.0);
        assert_eq!((r.width, r.height), (4, 3));
        assert!(r.status(Stage::Ingested).is_passed());
        assert!(r.frame_count.is_none());
    }

    #[test]
    fn ingest_rejects_duplicates_and_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_video(dir.path(), "v1.lrv", 30.0, 30);
        let mut m = Manifest::new();
        let meta = || IngestMetadata {
            title: "t".into(),
            ..Default::default()
        };
        ingest_video(&mut m, &path, meta(), &AutoDecoder).unwrap();
        assert!(matches!(
            ingest_video(&mut m, &path, meta(), &AutoDecoder),
            Err(IngestError::DuplicateVideo(_))
        ));
        let empty = dir.path().join("empty.mp4");
        fs::write(&empty, b"").unwrap();
        assert!(matches!(
            ingest_video(&mut m, &empty, meta(), &AutoDecoder),
            Err(IngestError::EmptySource(_))
        ));
        assert!(matches!(
            ingest_video(&mut m, &dir.path().join("missing.lrv"), meta(), &AutoDecoder),
            Err(IngestError::Unreadable { .. })
        ));
    }

    #[test]
    fn sampling_counts_follow_ceil_rule() {
        let dir = tempfile::tempdir().unwrap();
        let store = FrameStore::open(dir.path().join("frames")).unwrap();
        for (name, fps, native, expected) in [("a", 30.0, 300, 10usize), ("b", 30.0, 312, 11), ("c", 30.0, 6, 1), ("d", 5.0, 52, 11)] {
            let path = write_video(dir.path(), &format!("{name}.lrv"), fps, native);
            let mut m = Manifest::new();
            let r = ingest_video(
                &mut m,
                &path,
                IngestMetadata {
                    title: "t".into(),
                    ..Default::default()
                },
                &AutoDecoder,
            )
            .unwrap();
            let refs = sample_frames(&r, &path, &AutoDecoder, &store).unwrap();
            assert_eq!(refs.len(), expected, "{name}");
            assert_eq!(refs.len(), r.expected_frame_count());
            assert_eq!(store.frames(name).unwrap().len(), expected);
        }
    }

    #[test]
    fn nearest_native_frame_is_used() {
        // 10.4 s at 30 fps: t = 10 maps to native frame 300.
        assert_eq!(one_fps_native_indices(10.4, 30.0, 312)[10], 300);
        // 10.4 s at 1 fps with 11 native frames: t = 10 is the last frame.
        assert_eq!(one_fps_native_indices(10.4, 1.0, 11), (0..11).collect::<Vec<_>>());
        // 0.2 s clip: one frame at t = 0.
        assert_eq!(one_fps_native_indices(0.2, 30.0, 6), vec![0]);
        // Header duration longer than the stream clamps to the last frame.
        assert_eq!(one_fps_native_indices(3.0, 1.0, 2), vec![0, 1, 1]);
    }

    #[test]
    fn sampled_pixels_come_from_nearest_frames() {
        let dir = tempfile::tempdir().unwrap();
        let store = FrameStore::open(dir.path().join("frames")).unwrap();
        let path = write_video(dir.path(), "v.lrv", 4.0, 12);
        let mut m = Manifest::new();
        let r = ingest_video(&mut m, &path, IngestMetadata { title: "t".into(), ..Default::default() }, &AutoDecoder).unwrap();
        let refs = sample_frames(&r, &path, &AutoDecoder, &store).unwrap();
        let values: Vec<u8> = refs.iter().map(|f| store.get_image(f).unwrap().get_pixel(0, 0)[0]).collect();
        assert_eq!(values, vec![0, 4, 8]);
    }

    #[test]
    fn truncated_stream_discards_partial_frames() {
        let dir = tempfile::tempdir().unwrap();
        let store = FrameStore::open(dir.path().join("frames")).unwrap();
        let path = write_video(dir.path(), "t.lrv", 1.0, 5);
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(RAW_HEADER_LEN + 4 * 3 * 3 * 3 + 5);
        fs::write(&path, &bytes).unwrap();
        let mut r = VideoRecord::new("t", "t.lrv", "x");
        r.duration_s = 5.0;
        let err = sample_frames(&r, &path, &AutoDecoder, &store).unwrap_err();
        assert!(matches!(err, SampleError::Video(VideoError::Decode { index: 3, .. })), "{err}");
        assert!(store.frames("t").unwrap().is_empty());
    }

    fn mp4_box(kind: &[u8; 4], body: &[u8]) -> Vec<u8> {
        let mut out = ((body.len() + 8) as u32).to_be_bytes().to_vec();
        out.extend_from_slice(kind);
        out.extend_from_slice(body);
        out
    }

    /// Minimal moov tree: 1280x720, 12.5 s movie, 375 samples over 12.5 s media.
    fn tiny_mp4() -> Vec<u8> {
        let mut mvhd = vec![0u8; 100];
        mvhd[12..16].copy_from_slice(&1000u32.to_be_bytes());
        mvhd[16..20].copy_from_slice(&12_500u32.to_be_bytes());
        let mut tkhd = vec![0u8; 84];
        tkhd[76..80].copy_from_slice(&(1280u32 << 16).to_be_bytes());
        tkhd[80..84].copy_from_slice(&(720u32 << 16).to_be_bytes());
        let mut mdhd = vec![0u8; 24];
        mdhd[12..16].copy_from_slice(&30_000u32.to_be_bytes());
        mdhd[16..20].copy_from_slice(&375_000u32.to_be_bytes());
        let mut hdlr = vec![0u8; 24];
        hdlr[8..12].copy_from_slice(b"vide");
        let mut stts = vec![0u8; 8];
        stts[4..8].copy_from_slice(&1u32.to_be_bytes());
        stts.extend_from_slice(&375u32.to_be_bytes());
        stts.extend_from_slice(&1000u32.to_be_bytes());
        let stbl = mp4_box(b"stbl", &mp4_box(b"stts", &stts));
        let minf = mp4_box(b"minf", &stbl);
        let mdia = mp4_box(b"mdia", &[mp4_box(b"mdhd", &mdhd), mp4_box(b"hdlr", &hdlr), minf].concat());
        let trak = mp4_box(b"trak", &[mp4_box(b"tkhd", &tkhd), mdia].concat());
        let moov = mp4_box(b"moov", &[mp4_box(b"mvhd", &mvhd), trak].concat());
        [mp4_box(b"ftyp", b"isom\0\0\0\0"), moov].concat()
    }

    #[test]
    fn mp4_header_probe() {
        let info = probe_mp4(&tiny_mp4()).unwrap();
        assert_eq!(info.duration_s, 12.5);
        assert_eq!((info.width, info.height), (1280, 720));
        assert_eq!(info.frame_count, 375);
        assert!((info.native_fps - 30.0).abs() < 1e-12);
    }

    #[test]
    fn mp4_ingest_uses_container_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v1.mp4");
        fs::write(&path, tiny_mp4()).unwrap();
        let mut m = Manifest::new();
        let r = ingest_video(&mut m, &path, IngestMetadata { title: "Robotic Cholecystectomy".into(), ..Default::default() }, &AutoDecoder).unwrap();
        assert_eq!(r.duration_s, 12.5);
        assert_eq!(r.expected_frame_count(), 13);
    }

    #[test]
    fn malformed_mp4_is_an_error() {
        let mut data = tiny_mp4();
        data.truncate(60);
        assert!(probe_mp4(&data).is_err());
    }
}
