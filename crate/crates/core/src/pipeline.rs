//! End-to-end composition: preclassify, mine, train, predict, evaluate.

use crate::config::RunConfig;
use crate::error::Result;
use crate::image::{Grid, ImagePair, Mask};
use crate::model::CAMixerModel;
use crate::preclassify::{log_ratio, mine_samples, preclassify, DifferenceImage, PreclassLabels, SampleSet};
use crate::speckle::generate;
use crate::tensor::Tape;
use crate::trainer::{predict_map, train, ChangeMap, Trained};

/// Output of the unsupervised front end.
#[derive(Clone, Debug)]
pub struct Preclassified {
    pub di: DifferenceImage,
    pub labels: PreclassLabels,
    pub samples: SampleSet,
}

/// Difference image, pseudo-labels (method chosen by the variant) and mined
/// samples for `pair`.
pub fn preclassify_pair(pair: &ImagePair, cfg: &RunConfig) -> Result<Preclassified> {
    let di = log_ratio(pair)?;
    let method = cfg.train.variant.preclassifier();
    let labels = preclassify(&di, method, &cfg.precls)?;
    let samples = mine_samples(pair, &labels, &cfg.mining_params())?;
    Ok(Preclassified { di, labels, samples })
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub pre: Preclassified,
    pub trained: Trained,
    pub map: ChangeMap,
}

/// Runs the whole pipeline on `pair`, scoring against `truth` when given.
pub fn run(pair: &ImagePair, truth: Option<&Mask>, cfg: &RunConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let pre = preclassify_pair(pair, cfg)?;
    log::info!("{} training samples ({} changed)", pre.samples.len(), pre.samples.count_label(1));
    let trained = train(&pre.samples, &cfg.train_config())?;
    let mut map = predict_map(&trained.model, pair, cfg.tile)?;
    if let Some(t) = truth {
        map = map.evaluate(t)?;
    }
    Ok(PipelineRun { pre, trained, map })
}

/// The configured synthetic scene and its ground truth.
pub fn synthetic_scene(cfg: &RunConfig) -> Result<(ImagePair, Mask)> {
    generate(&cfg.scene.build())
}

/// Flattened PCAM outputs of `model` on every sample: one `[n, features]` grid
/// per block that has a PCAM.
pub fn dump_features(model: &CAMixerModel, samples: &SampleSet) -> Result<Vec<Grid>> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let batch = crate::tensor::Tensor::new(
        &[samples.len(), samples.channels, samples.side(), samples.side()],
        samples.patches.clone(),
    )?;
    let x = tape.constant(batch);
    let mut taps = Vec::new();
    params.forward_with_features(&mut tape, x, &mut |_, v| taps.push(v))?;
    taps.into_iter()
        .map(|v| {
            let values = tape.value(v).to_vec();
            let per = values.len() / samples.len().max(1);
            Grid::new(samples.len(), per, values)
        })
        .collect()
}
