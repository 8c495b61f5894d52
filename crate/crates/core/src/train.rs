//! Single-threaded, seeded training loop.
//!
//! Every frame of every clip is a sample. Frame `j` uses its `min(l, j)`
//! previous frames as neighbors, in the configured order, and all stages
//! contribute to the loss. Neighbor feature maps are computed once per clip
//! visit with the weights current at that moment and treated as constants.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::error::{Result, SsgaError};
use crate::graph::Graph;
use crate::loss::LossWeights;
use crate::model::SsgaModel;
use crate::params::AdamW;
use crate::refinement::{stages_var, training_loss_var};
use crate::strategy::neighbor_ordering;
use crate::synth::Dihedral;
use crate::tensor::Tensor;
use crate::types::{FeatureMap, FrameTensor, GroundTruth};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    /// Mean all-stage loss per sample.
    pub mean_loss: f64,
}

pub fn train(
    mut model: SsgaModel,
    dataset: &Dataset,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(SsgaModel, Vec<EpochLog>)> {
    if tc.batch_size == 0 {
        return Err(SsgaError::Config("batch_size must be positive".into()));
    }
    if dataset.num_frames() == 0 {
        return Err(SsgaError::Config("training set is empty".into()));
    }
    let weights = LossWeights::from(tc);
    let ordering = neighbor_ordering(&model.config)?;
    let stages = model.num_stages().min(model.config.num_stages);
    let mut opt = AdamW::new(&model.params, tc.lr, tc.weight_decay, tc.max_grad_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut logs = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let mut video_order: Vec<usize> = (0..dataset.videos.len()).collect();
        video_order.shuffle(&mut rng);
        let (mut loss_sum, mut samples) = (0.0, 0usize);
        for &vi in &video_order {
            let clip = &dataset.videos[vi].clip;
            for f in &clip.frames {
                model.check_frame(f)?;
            }
            let (frames, annotations): (Vec<FrameTensor>, Vec<GroundTruth>) = if tc.augment {
                let square = clip.frames.iter().all(|f| f.height() == f.width());
                let t = Dihedral::from_code(rng.gen_range(0..if square { 8 } else { 4 }));
                (
                    clip.frames.iter().map(|f| t.apply_frame(f)).collect::<Result<_>>()?,
                    clip.annotations.iter().map(|a| t.apply_gt(a)).collect(),
                )
            } else {
                (clip.frames.clone(), clip.annotations.clone())
            };
            let features: Vec<FeatureMap> = frames.iter().map(|f| model.backbone_forward(f)).collect::<Result<_>>()?;
            let mut frame_order: Vec<usize> = (0..frames.len()).collect();
            frame_order.shuffle(&mut rng);
            for batch in frame_order.chunks(tc.batch_size) {
                let mut grads: Vec<Option<Tensor>> = vec![None; model.params.len()];
                for &j in batch {
                    let frame = &frames[j];
                    let lo = j.saturating_sub(stages);
                    let ids: Vec<u64> = frames[lo..j].iter().map(|f| f.frame_id).collect();
                    let order = ordering.order(&ids, frame.frame_id);
                    let mut g = Graph::training();
                    let pixels = g.input(frame.pixels.clone());
                    let neighbors: Vec<_> = order.iter().map(|&k| g.input(features[lo + k].values.clone())).collect();
                    let sv = stages_var(&model, &mut g, &model.config, pixels, &neighbors)?;
                    let (total, _) = training_loss_var(&mut g, &sv, &annotations[j], &weights)?;
                    loss_sum += g.value(total).data()[0];
                    samples += 1;
                    let back = g.backward(total);
                    for (id, grad) in g.param_grads(&back) {
                        match &mut grads[id.index()] {
                            Some(acc) => acc.add_assign(&grad)?,
                            slot => *slot = Some(grad),
                        }
                    }
                }
                opt.step(&mut model.params, &grads, 1.0 / batch.len() as f64);
            }
        }
        let log = EpochLog {
            epoch,
            steps: opt.steps(),
            mean_loss: loss_sum / samples as f64,
        };
        log::info!("epoch {} loss {:.4} steps {}", epoch, log.mean_loss, log.steps);
        on_epoch(&log);
        logs.push(log);
    }
    Ok((model, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, SsgaConfig};
    use crate::dataset::{video_dir_name, Manifest, Video, VideoEntry};
    use crate::synth::{class_names, generate_clip, random_scene, Motion};

    fn tiny_dataset() -> Dataset {
        let cfg = DataConfig {
            num_frames: 4,
            frame_size: 32,
            ..DataConfig::default()
        };
        let videos = (0..2u64)
            .map(|k| {
                let scene = random_scene(&cfg, Motion::Fast, k);
                Video {
                    entry: VideoEntry {
                        video_id: k,
                        dir: video_dir_name(k),
                        motion: Motion::Fast,
                        num_frames: 4,
                        scene: scene.clone(),
                    },
                    clip: generate_clip(&scene).unwrap(),
                }
            })
            .collect();
        Dataset {
            manifest: Manifest {
                class_names: class_names(4),
                frame_size: 32,
                videos: vec![],
            },
            videos,
        }
    }

    fn tiny_model() -> SsgaModel {
        let cfg = SsgaConfig {
            num_queries: 6,
            embed_dim: 8,
            feature_dim: 8,
            num_heads: 2,
            decoder_layers: 1,
            pool_size: 2,
            num_stages: 2,
            beta_schedule: vec![1.5, 1.5],
            ..SsgaConfig::default()
        };
        SsgaModel::new(cfg, 3).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let d = tiny_dataset();
        let tc = TrainConfig {
            epochs: 6,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let (a, la) = train(tiny_model(), &d, &tc, |_| {}).unwrap();
        let (b, lb) = train(tiny_model(), &d, &tc, |_| {}).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(la, lb);
        assert!(la.last().unwrap().mean_loss < la[0].mean_loss, "{la:?}");
        assert_eq!(la.last().unwrap().steps, 6 * 2);
    }

    #[test]
    fn zero_batch_is_rejected() {
        let tc = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(train(tiny_model(), &tiny_dataset(), &tc, |_| {}).is_err());
    }
}
