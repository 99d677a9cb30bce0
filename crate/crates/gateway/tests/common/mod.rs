#![allow(dead_code)]

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use lemon_core::pipeline::{Pipeline, PipelineConfig, SourceEntry};
use lemon_core::video::{AutoDecoder, RawVideo};

pub fn spawn(app: axum::Router) -> String {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async {
            let l = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(l, app).await.unwrap();
        });
    });
    format!("http://{addr}")
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

pub fn write_video(dir: &Path, name: &str, seconds: usize) -> PathBuf {
    let path = dir.join(format!("{name}.lrv"));
    let frames: Vec<RgbImage> = (0..seconds)
        .map(|i| RgbImage::from_pixel(8, 6, Rgb([(i * 9) as u8, 50, 100])))
        .collect();
    RawVideo::write(&path, 1.0, &frames).unwrap();
    path
}

/// A workspace with `n` ingested 12-second videos `v0..`.
pub fn workspace(dir: &Path, n: usize, auto: bool) -> Pipeline {
    let cfg = PipelineConfig {
        tile_width: 8,
        tile_height: 6,
        auto_approve: auto,
        ..Default::default()
    };
    let mut p = Pipeline::open(dir.join("ws"), cfg).unwrap();
    let sources: Vec<SourceEntry> = (0..n)
        .map(|i| SourceEntry {
            source: write_video(dir, &format!("v{i}"), 12).display().to_string(),
            title: "Robotic Hysterectomy".into(),
            video_id: None,
        })
        .collect();
    p.ingest(&sources, &AutoDecoder).unwrap();
    p
}
