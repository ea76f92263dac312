//! Per-sample map dumps as netpbm files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::cam::{argmax_labels, LabelGrid};
use crate::config::RunConfig;
use crate::error::Result;
use crate::netpbm::{encode_pgm_labels, encode_pgm_map, encode_ppm};
use crate::params::ParamStore;
use crate::synthdata::generate_sample;

use super::model::Model;

/// File names written by [`dump_maps`], in write order.
pub fn dump_manifest(config: &RunConfig) -> Vec<String> {
    let c = config.model.encoder.num_classes;
    let mut names = vec!["image.ppm".to_string(), "ground_truth.pgm".to_string()];
    for k in 1..=c {
        names.push(format!("cam_class{k}.pgm"));
    }
    for k in 1..=c {
        names.push(format!("lam_class{k}.pgm"));
    }
    for n in ["mask_reliability", "mask_confident", "mask_uncertain", "uncertain_selected"] {
        names.push(format!("{n}.pgm"));
    }
    if config.model.use_gcr {
        for k in 1..=c {
            names.push(format!("neighbors_class{k}.pgm"));
        }
    }
    names.push("pseudo_label.pgm".to_string());
    names.push("decoder_mask.pgm".to_string());
    names
}

/// Renders the synthetic sample `seed` through the model and writes every
/// manifest entry into `out`. Activation maps are upsampled to image size;
/// masks stay on the patch grid. Neighbor grids hold each selected patch's
/// rank, 1 being the strongest, and 0 elsewhere.
pub fn dump_maps(model: &Model, store: &ParamStore, config: &RunConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let sample = generate_sample(seed, &config.synth())?;
    let (h, w) = (sample.mask.height, sample.mask.width);
    let inf = model.infer(store, &sample.image, Some(&sample.labels))?;
    let d = &inf.decisions;
    let (nh, nw) = (d.mask.labels.height, d.mask.labels.width);
    let c = config.model.encoder.num_classes;

    let mut files: Vec<(String, Vec<u8>)> = vec![
        ("image.ppm".into(), encode_ppm(&sample.image)?),
        ("ground_truth.pgm".into(), encode_pgm_labels(&sample.mask)),
    ];
    let cam = inf.cam.upsample(h, w);
    let lam = inf.lam.upsample(h, w);
    for k in 0..c {
        files.push((format!("cam_class{}.pgm", k + 1), encode_pgm_map(&cam.channel(k), h, w)?));
    }
    for k in 0..c {
        files.push((format!("lam_class{}.pgm", k + 1), encode_pgm_map(&lam.channel(k), h, w)?));
    }
    files.push(("mask_reliability.pgm".into(), encode_pgm_labels(&d.mask.labels)));
    files.push(("mask_confident.pgm".into(), encode_pgm_labels(&d.relations.confident)));
    files.push(("mask_uncertain.pgm".into(), encode_pgm_labels(&d.relations.uncertain)));
    files.push(("uncertain_selected.pgm".into(), encode_pgm_labels(&d.uncertain.to_grid(nh, nw))));
    if config.model.use_gcr {
        for (k, nb) in d.neighbors.iter().enumerate() {
            let mut g = LabelGrid::filled(nh, nw, 0);
            for (rank, &j) in nb.iter().enumerate() {
                g.data[j] = (rank + 1).min(254) as u8;
            }
            files.push((format!("neighbors_class{}.pgm", k + 1), encode_pgm_labels(&g)));
        }
    }
    files.push(("pseudo_label.pgm".into(), encode_pgm_labels(&d.pseudo)));
    files.push(("decoder_mask.pgm".into(), encode_pgm_labels(&argmax_labels(&inf.segmentation))));

    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = out.join(name);
        fs::write(&path, bytes)?;
        written.push(path);
    }
    Ok(written)
}
