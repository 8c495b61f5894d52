//! On-disk dataset layout:
//!
//! ```text
//! <root>/dataset.json
//! <root>/video_<k>/annotations.json
//! <root>/video_<k>/frame_<j>.png
//! ```
//!
//! Frames are 8-bit RGB PNGs, so pixel values read back as `level / 255`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result, SsgaError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DataConfig;
use crate::synth::{generate_clip, random_scene, Motion, SceneSpec, VideoClip};
use crate::tensor::Tensor;
use crate::types::{FrameTensor, GroundTruth, GtObject};

pub const MANIFEST: &str = "dataset.json";
pub const ANNOTATIONS: &str = "annotations.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VideoEntry {
    pub video_id: u64,
    pub dir: String,
    pub motion: Motion,
    pub num_frames: usize,
    pub scene: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub frame_size: usize,
    pub videos: Vec<VideoEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct FrameAnnotation {
    frame_id: u64,
    objects: Vec<GtObject>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct VideoAnnotations {
    video_id: u64,
    frames: Vec<FrameAnnotation>,
}

/// One generated video with its manifest entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub entry: VideoEntry,
    pub clip: VideoClip,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn num_frames(&self) -> usize {
        self.videos.iter().map(|v| v.clip.frames.len()).sum()
    }
}

pub fn video_dir_name(video_id: u64) -> String {
    format!("video_{video_id}")
}

/// `count` clips alternating slow and fast motion. Scene seeds are drawn
/// from `seed` mixed with `salt`, so train and val splits never share scenes.
pub fn generate_videos(cfg: &DataConfig, seed: u64, salt: u64, count: usize) -> Result<Vec<Video>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03));
    (0..count as u64)
        .map(|k| {
            let motion = if k % 2 == 0 { Motion::Slow } else { Motion::Fast };
            let scene = random_scene(cfg, motion, rng.gen());
            let clip = generate_clip(&scene)?;
            Ok(Video {
                entry: VideoEntry {
                    video_id: k,
                    dir: video_dir_name(k),
                    motion,
                    num_frames: clip.frames.len(),
                    scene,
                },
                clip,
            })
        })
        .collect()
}

/// Train and val splits of the synthetic benchmark.
pub fn generate_benchmark(cfg: &DataConfig, seed: u64) -> Result<(Vec<Video>, Vec<Video>)> {
    Ok((
        generate_videos(cfg, seed, 1, cfg.train_clips)?,
        generate_videos(cfg, seed, 2, cfg.val_clips)?,
    ))
}

/// Wraps in-memory videos as a dataset without touching the disk.
pub fn in_memory(cfg: &DataConfig, videos: Vec<Video>) -> Dataset {
    Dataset {
        manifest: Manifest {
            class_names: crate::synth::class_names(cfg.num_classes),
            frame_size: cfg.frame_size,
            videos: videos.iter().map(|v| v.entry.clone()).collect(),
        },
        videos,
    }
}

fn frame_file(frame_id: u64) -> String {
    format!("frame_{frame_id}.png")
}

pub fn write_png(path: &Path, frame: &FrameTensor) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let px = frame.pixels.data();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            rgb.push((px[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| SsgaError::Dataset {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&rgb).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

pub fn read_png(path: &Path, frame_id: u64) -> Result<FrameTensor> {
    let file = File::open(path).map_err(io_err(path))?;
    let bad = |reason: String| SsgaError::Dataset {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + 3 * w];
        for x in 0..w {
            for ch in 0..3 {
                data[ch * h * w + y * w + x] = row[3 * x + ch] as f64 / 255.0;
            }
        }
    }
    FrameTensor::new(Tensor::new(vec![3, h, w], data)?, frame_id)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Writes clips and their manifest entries; returns the manifest.
pub fn write_dataset(root: &Path, class_names: Vec<String>, frame_size: usize, videos: &[Video]) -> Result<Manifest> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    for v in videos {
        let dir = root.join(&v.entry.dir);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for f in &v.clip.frames {
            write_png(&dir.join(frame_file(f.frame_id)), f)?;
        }
        let ann = VideoAnnotations {
            video_id: v.entry.video_id,
            frames: v
                .clip
                .frames
                .iter()
                .zip(&v.clip.annotations)
                .map(|(f, gt)| FrameAnnotation {
                    frame_id: f.frame_id,
                    objects: gt.objects.clone(),
                })
                .collect(),
        };
        write_json(&dir.join(ANNOTATIONS), &ann)?;
    }
    let manifest = Manifest {
        class_names,
        frame_size,
        videos: videos.iter().map(|v| v.entry.clone()).collect(),
    };
    write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn validate_objects(path: &Path, frame_id: u64, objects: &[GtObject], num_classes: Option<usize>) -> Result<()> {
    for (i, o) in objects.iter().enumerate() {
        let err = |reason: String| SsgaError::Annotation {
            path: path.to_path_buf(),
            frame_id,
            object: i,
            reason,
        };
        let [_, _, w, h] = o.bbox;
        if !(w > 0.0 && h > 0.0) {
            return Err(err(format!("non-positive box size (w = {w}, h = {h})")));
        }
        if o.bbox.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(err(format!("box {:?} outside [0, 1]", o.bbox)));
        }
        if let Some(c) = num_classes {
            if o.class_id >= c {
                return Err(err(format!("class {} outside [0, {c})", o.class_id)));
            }
        }
    }
    Ok(())
}

/// Reads one video directory. Returns its id and the clip.
pub fn read_video(dir: &Path, num_classes: Option<usize>) -> Result<(u64, VideoClip)> {
    let path = dir.join(ANNOTATIONS);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let ann: VideoAnnotations = serde_json::from_str(&text).map_err(|e| SsgaError::Dataset {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let mut frames = Vec::with_capacity(ann.frames.len());
    let mut annotations = Vec::with_capacity(ann.frames.len());
    for fa in ann.frames {
        validate_objects(&path, fa.frame_id, &fa.objects, num_classes)?;
        frames.push(read_png(&dir.join(frame_file(fa.frame_id)), fa.frame_id)?);
        annotations.push(GroundTruth::new(fa.objects));
    }
    if frames.windows(2).any(|w| w[1].frame_id <= w[0].frame_id) {
        return Err(SsgaError::Dataset {
            path,
            reason: "frame ids must be strictly increasing".into(),
        });
    }
    Ok((ann.video_id, VideoClip { frames, annotations }))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| SsgaError::Dataset {
        path,
        reason: e.to_string(),
    })
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let dir: PathBuf = root.join(&entry.dir);
        let (video_id, clip) = read_video(&dir, Some(manifest.class_names.len()))?;
        if video_id != entry.video_id {
            return Err(SsgaError::Dataset {
                path: dir,
                reason: format!("annotations say video {video_id}, manifest says {}", entry.video_id),
            });
        }
        videos.push(Video {
            entry: entry.clone(),
            clip,
        });
    }
    Ok(Dataset { manifest, videos })
}
