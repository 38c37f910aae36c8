//! The training loop: view scheduling, stage plan, backward, Adam, density
//! control, evaluation, logging and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::backward::{backward_full, ViewInputs};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::densify::{densify_and_prune, DensifyReport, GradStats};
use crate::error::{Error, Result};
use crate::gaussian::{logit, GaussianCloud, ParamGroup, Primitive, SEMANTIC_DIM};
use crate::image::Image;
use crate::la;
use crate::losses::{FrameKind, LossBreakdown};
use crate::medium::{self, MediumParams};
use crate::metrics::psnr;
use crate::optim::{adam_step, OptimizerState, Trainable};
use crate::raster;
use crate::reduce;
use crate::rng::{self, Purpose};
use crate::scene::{load_scene, write_json, InitPoint, Scene};
use crate::schedule::{stage_schedule, Stage};
use crate::semantics::{EmbeddingProjector, SemanticRegion};
use crate::sh;
use crate::ssim::ssim_index;

#[derive(Clone, Debug)]
pub struct StepRecord {
    /// 0-based index of the step just taken.
    pub iteration: usize,
    pub view: usize,
    pub stage: Stage,
    pub breakdown: LossBreakdown,
    pub densify: Option<DensifyReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Views the metrics were computed on.
    pub views: Vec<usize>,
    /// Observed-space PSNR averaged over `views`.
    pub psnr: f64,
    pub ssim: f64,
    /// Mean squared error averaged over the training views.
    pub train_l2: f64,
    /// Clean-image PSNR against ground truth, when the scene has it.
    pub clean_psnr: Option<f64>,
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize)]
pub struct LogLine {
    pub iter: usize,
    pub stage: u8,
    pub frame_kind: Option<FrameKind>,
    pub view: Option<usize>,
    pub loss: Option<LossBreakdown>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub train_l2: Option<f64>,
    pub gaussians: usize,
}

pub struct Trainer {
    config: TrainConfig,
    scene: Scene,
    region_index: Vec<Vec<usize>>,
    train_views: Vec<usize>,
    extent: f64,
    cloud: GaussianCloud,
    medium: MediumParams,
    log_gamma: f64,
    optimizer: OptimizerState,
    stats: GradStats,
    iteration: usize,
}

/// Initial cloud from the scene's points, or uniform random points inside
/// the camera rig when it has none.
pub fn initial_cloud(scene: &Scene, config: &TrainConfig, extent: f64) -> Result<GaussianCloud> {
    let points = match &scene.init_points {
        Some(points) if !points.is_empty() => points.clone(),
        _ => {
            let mut rng = rng::stream(config.seed, 0, Purpose::Init);
            let centers: Vec<[f64; 3]> = scene.cameras.iter().map(|c| c.center()).collect();
            let centroid: [f64; 3] =
                std::array::from_fn(|k| reduce::mean(&centers.iter().map(|c| c[k]).collect::<Vec<_>>()));
            let half = 0.5 * extent;
            (0..config.init.random_points)
                .map(|_| InitPoint {
                    position: std::array::from_fn(|k| centroid[k] + rng.random_range(-half..half)),
                    color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                })
                .collect()
        }
    };
    if points.is_empty() {
        return Err(Error::InvalidParameter("no initialization points".into()));
    }
    let mut cloud = GaussianCloud::new(config.sh_degree)?;
    let stride = cloud.sh_stride();
    let k = config.init.neighbours.min(points.len().saturating_sub(1)).max(1);
    let floor = config.init.min_scale * extent;
    for (i, p) in points.iter().enumerate() {
        let mut d2: Vec<f64> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, q)| la::dot(la::sub(p.position, q.position), la::sub(p.position, q.position)))
            .collect();
        d2.sort_by(f64::total_cmp);
        let scale = if d2.is_empty() {
            0.1 * extent
        } else {
            reduce::mean(&d2[..k.min(d2.len())]).sqrt()
        }
        .max(floor);
        let mut coeffs = vec![0.0; stride];
        for c in 0..3 {
            coeffs[c] = sh::dc_from_color(p.color[c]);
        }
        cloud.push(Primitive {
            position: p.position,
            log_scale: [scale.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            sh: coeffs,
            opacity_logit: logit(config.init.opacity),
            semantic: [0.0; SEMANTIC_DIM],
        })?;
    }
    Ok(cloud)
}

impl Trainer {
    pub fn new(config: TrainConfig, scene: Scene) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        let extent = scene.extent();
        let cloud = initial_cloud(&scene, &config, extent)?;
        let medium = match &config.medium_init {
            Some(m) => m.params()?,
            None => MediumParams::initial(scene.training_channel_means()),
        };
        let optimizer = OptimizerState::new(&cloud);
        let stats = GradStats::new(cloud.len());
        Self::assemble(config, scene, cloud, medium, 0.0, optimizer, stats, 0)
    }

    /// Continues a run from `checkpoint`, which must come from the same scene.
    pub fn resume(config: TrainConfig, scene: Scene, checkpoint: Checkpoint) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        if checkpoint.cameras != scene.cameras {
            return Err(Error::Checkpoint("checkpoint cameras do not match the scene".into()));
        }
        if checkpoint.projector_seed != config.projector_seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint used projector seed {}, the config asks for {}",
                checkpoint.projector_seed, config.projector_seed
            )));
        }
        if checkpoint.iteration > config.iterations {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at iteration {}, past the configured {}",
                checkpoint.iteration, config.iterations
            )));
        }
        Self::assemble(
            config,
            scene,
            checkpoint.cloud,
            checkpoint.medium,
            checkpoint.log_gamma,
            checkpoint.optimizer,
            checkpoint.grad_stats,
            checkpoint.iteration,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        scene: Scene,
        cloud: GaussianCloud,
        medium: MediumParams,
        log_gamma: f64,
        optimizer: OptimizerState,
        stats: GradStats,
        iteration: usize,
    ) -> Result<Self> {
        let train_views = scene.training_views();
        if train_views.is_empty() {
            return Err(Error::InvalidInput("scene has no training views".into()));
        }
        let region_index = (0..scene.len())
            .map(|v| {
                (0..scene.regions.len())
                    .filter(|&k| scene.regions[k].image_id == scene.ids[v])
                    .collect()
            })
            .collect();
        let extent = scene.extent();
        optimizer.ensure_congruent(&cloud)?;
        Ok(Self {
            config,
            scene,
            region_index,
            train_views,
            extent,
            cloud,
            medium,
            log_gamma,
            optimizer,
            stats,
            iteration,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn cloud(&self) -> &GaussianCloud {
        &self.cloud
    }

    pub fn medium(&self) -> &MediumParams {
        &self.medium
    }

    pub fn log_gamma(&self) -> f64 {
        self.log_gamma
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// Training view used at `iteration`: each epoch visits every training
    /// view once, in an order drawn from the seed and the epoch number.
    pub fn view_for(&self, iteration: usize) -> usize {
        let n = self.train_views.len();
        let epoch = iteration / n;
        let mut order = self.train_views.clone();
        order.shuffle(&mut rng::stream(self.config.seed, epoch as u64, Purpose::ViewOrder));
        order[iteration % n]
    }

    fn regions(&self, view: usize) -> Vec<&SemanticRegion> {
        self.region_index[view]
            .iter()
            .map(|&k| &self.scene.regions[k])
            .collect()
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let i = self.iteration;
        if self.is_done() {
            return Err(Error::InvalidInput(format!(
                "training already finished at iteration {i}"
            )));
        }
        let view = self.view_for(i);
        self.step_view(i, view).map_err(|e| Error::Training {
            iteration: i,
            view,
            source: Box::new(e),
        })
    }

    fn step_view(&mut self, i: usize, view: usize) -> Result<StepRecord> {
        let objective = &self.config.objective;
        let plan = stage_schedule(i, &objective.stages);
        let regions = self.regions(view);
        let inputs = ViewInputs {
            camera: &self.scene.cameras[view],
            target: &self.scene.images[view],
            depth_prior: self.scene.depth_priors[view].as_ref(),
            regions: &regions,
            frame_kind: self.scene.frame_kinds[view],
        };
        let result = backward_full(
            &self.cloud,
            &self.medium,
            &inputs,
            objective,
            &plan,
            self.log_gamma.exp(),
        )?;
        self.stats.add(&result.stats);

        let lr = &self.config.lr;
        let (total, extent) = (self.config.iterations, self.extent);
        adam_step(
            Trainable {
                cloud: &mut self.cloud,
                medium: &mut self.medium,
                log_gamma: &mut self.log_gamma,
            },
            &result.grads,
            &mut self.optimizer,
            &plan.freeze,
            |g: ParamGroup| lr.for_group(g, i, total, extent),
            lr.gamma,
        )?;

        let boundary = objective.stages.boundary();
        let densify = if plan.densification_allowed() && self.config.densify.due(i, boundary) {
            let old_len = self.cloud.len();
            let report = densify_and_prune(
                &mut self.cloud,
                &self.stats,
                &self.config.densify,
                self.extent,
                self.config.seed,
                i,
            )?;
            self.optimizer.remap(&report.remap, old_len);
            self.stats = GradStats::new(self.cloud.len());
            Some(report)
        } else {
            None
        };
        self.iteration += 1;
        Ok(StepRecord {
            iteration: i,
            view,
            stage: plan.stage,
            breakdown: result.breakdown,
            densify,
        })
    }

    /// Clean and observed renders of any scene camera.
    pub fn render_view(&self, view: usize) -> Result<(Image, Image)> {
        render_pair(
            &self.cloud,
            &self.medium,
            &self.scene.cameras[view],
            &self.config.objective.raster,
        )
    }

    /// Metrics on the held-out views (all views when the scene has no split).
    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate_scene(&self.cloud, &self.medium, &self.scene, &self.config.objective.raster)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            cloud: self.cloud.clone(),
            medium: self.medium,
            log_gamma: self.log_gamma,
            optimizer: self.optimizer.clone(),
            grad_stats: self.stats.clone(),
            projector_seed: self.config.projector_seed,
            cameras: self.scene.cameras.clone(),
            config_json: self.config.to_json(),
        }
    }
}

pub fn render_pair(
    cloud: &GaussianCloud,
    medium_params: &MediumParams,
    camera: &crate::camera::Camera,
    options: &raster::RasterOptions,
) -> Result<(Image, Image)> {
    let out = raster::rasterize_with(cloud, camera, options);
    let observed = medium::apply_medium(&out.color, &out.depth, medium_params)?;
    Ok((out.color, observed))
}

pub fn evaluate_scene(
    cloud: &GaussianCloud,
    medium_params: &MediumParams,
    scene: &Scene,
    options: &raster::RasterOptions,
) -> Result<EvalReport> {
    let mut views = scene.holdout_views();
    if views.is_empty() {
        views = (0..scene.len()).collect();
    }
    let mut psnrs = Vec::new();
    let mut ssims = Vec::new();
    let mut clean = Vec::new();
    for &v in &views {
        let (c, observed) = render_pair(cloud, medium_params, &scene.cameras[v], options)?;
        psnrs.push(psnr(&observed, &scene.images[v])?);
        ssims.push(ssim_index(&observed, &scene.images[v])?);
        if let Some(gt) = &scene.ground_truth {
            clean.push(psnr(&c, &gt.clean[v])?);
        }
    }
    let mut l2 = Vec::new();
    for v in scene.training_views() {
        let (_, observed) = render_pair(cloud, medium_params, &scene.cameras[v], options)?;
        l2.push(crate::losses::photometric_terms(&observed, &scene.images[v])?.1);
    }
    Ok(EvalReport {
        views,
        psnr: reduce::mean(&psnrs),
        ssim: reduce::mean(&ssims),
        train_l2: reduce::mean(&l2),
        clean_psnr: (!clean.is_empty()).then(|| reduce::mean(&clean)),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub gaussians: usize,
    pub eval: EvalReport,
    pub medium: MediumSummary,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MediumSummary {
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub b_inf: [f64; 3],
}

impl From<&MediumParams> for MediumSummary {
    fn from(m: &MediumParams) -> Self {
        Self {
            beta_d: m.beta_d(),
            beta_b: m.beta_b(),
            b_inf: m.b_inf(),
        }
    }
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOG_FILE: &str = "log.jsonl";

fn due(i: usize, interval: usize) -> bool {
    interval > 0 && i.is_multiple_of(interval)
}

fn write_previews(trainer: &Trainer, dir: &Path, tag: &str) -> Result<()> {
    let view = trainer.scene.holdout_views().first().copied().unwrap_or(0);
    let (clean, observed) = trainer.render_view(view)?;
    clean.save_png(&dir.join(format!("{tag}_clean.png")))?;
    observed.save_png(&dir.join(format!("{tag}_observed.png")))
}

/// Runs a full training job described by `config`. The scene is loaded and
/// checked before anything is written, so a bad input leaves no output.
/// Every log line is also passed to `sink`.
pub fn train_command(config: &TrainConfig, mut sink: impl FnMut(&LogLine)) -> Result<TrainSummary> {
    config.validate()?;
    let projector = EmbeddingProjector::new(config.projector_seed);
    let scene = load_scene(&config.scene, &projector)?;
    let mut trainer = match &config.resume {
        Some(path) => Trainer::resume(config.clone(), scene, Checkpoint::load(path)?)?,
        None => Trainer::new(config.clone(), scene)?,
    };

    let out = &config.output;
    let previews = out.join("previews");
    std::fs::create_dir_all(&previews).map_err(|e| Error::io(&previews, e))?;
    let log_path = out.join(LOG_FILE);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(config.resume.is_some())
        .truncate(config.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut emit = |line: &LogLine| -> Result<()> {
        sink(line);
        let text = serde_json::to_string(line).expect("log line serializes");
        writeln!(log, "{text}").map_err(|e| Error::io(&log_path, e))
    };

    while !trainer.is_done() {
        let i = trainer.iteration();
        let eval = if due(i, config.eval_interval) {
            Some(trainer.evaluate()?)
        } else {
            None
        };
        if due(i, config.preview_interval) {
            write_previews(&trainer, &previews, &format!("{i:06}"))?;
        }
        let record = trainer.step()?;
        if due(i, config.log_interval) || eval.is_some() {
            emit(&LogLine {
                iter: i,
                stage: record.stage.number(),
                frame_kind: Some(record.breakdown.frame_kind),
                view: Some(record.view),
                loss: Some(record.breakdown),
                psnr: eval.as_ref().map(|e| e.psnr),
                ssim: eval.as_ref().map(|e| e.ssim),
                train_l2: eval.as_ref().map(|e| e.train_l2),
                gaussians: trainer.cloud().len(),
            })?;
        }
        if config.checkpoint_iterations.contains(&trainer.iteration()) {
            let path = out.join(format!("iter_{:06}.ckpt", trainer.iteration()));
            trainer.checkpoint().save(&path)?;
        }
    }

    let total = config.iterations;
    let eval = trainer.evaluate()?;
    emit(&LogLine {
        iter: total,
        stage: stage_schedule(total - 1, &config.objective.stages).stage.number(),
        frame_kind: None,
        view: None,
        loss: None,
        psnr: Some(eval.psnr),
        ssim: Some(eval.ssim),
        train_l2: Some(eval.train_l2),
        gaussians: trainer.cloud().len(),
    })?;
    write_previews(&trainer, &previews, "final")?;
    let checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&checkpoint)?;
    let summary = TrainSummary {
        iterations: total,
        gaussians: trainer.cloud().len(),
        eval,
        medium: MediumSummary::from(trainer.medium()),
        checkpoint,
    };
    write_json(&out.join("metrics.json"), &summary)?;
    Ok(summary)
}
