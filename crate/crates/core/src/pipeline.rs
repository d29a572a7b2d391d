//! Subcommand implementations: each reads its inputs from the data and
//! output roots named in the config and writes artifacts to fixed paths.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::{info, warn};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregation::{aggregate_local, grid_to_channel, AggregationGrid, CHANNEL_SIDE};
use crate::autodiff::{checkpoint, Model};
use crate::config::{PipelineConfig, Stage};
use crate::data::dataset::{prepare_base, sample_scan, synth_case, CaseMix};
use crate::data::manifest::{assign_splits, Manifest, ManifestRecord, Split};
use crate::data::resample::scale_scan;
use crate::data::{Annotation, Laterality, Magnification, Patch, Scan, View};
use crate::error::{Error, Result};
use crate::heatmap::{
    build_heatmap_net, heat_input, heat_region, infer_heatmap, make_target, train_heatmap, upsample_support,
    HeatExample, HeatTrainConfig, HeatmapNetConfig,
};
use crate::io::raster::Raster;
use crate::io::{pgm, read_file, write_file};
use crate::saliency::{gated_saliency, GateConfig};
use crate::tissue::{build_tissue_net, evaluate_tissue, train_tissue, TrainConfig};

/// One scan of the on-disk case table.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub scan_id: String,
    pub case_id: String,
    pub laterality: Laterality,
    pub view: View,
    /// Present iff the scan has an outline.
    pub grade: Option<u8>,
    pub split: Split,
    /// Relative to the data root.
    pub scan: PathBuf,
    pub mask: Option<PathBuf>,
}

pub fn cases_to_text(records: &[CaseRecord]) -> String {
    let mut s = String::from("# scan_id\tcase_id\tlaterality\tview\tgrade\tsplit\tscan\tmask\n");
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.scan_id,
            r.case_id,
            r.laterality,
            r.view,
            r.grade.map_or("-".to_string(), |g| g.to_string()),
            r.split,
            r.scan.display(),
            r.mask.as_ref().map_or("-".to_string(), |m| m.display().to_string()),
        );
    }
    s
}

pub fn parse_cases(text: &str) -> Result<Vec<CaseRecord>> {
    let bad = |n: usize, why: &str| Error::format("case table", format!("line {}: {why}", n + 1));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(bad(n, "expected 8 fields"));
        }
        let opt = |s: &str| (s != "-").then(|| s.to_string());
        out.push(CaseRecord {
            scan_id: f[0].to_string(),
            case_id: f[1].to_string(),
            laterality: f[2].parse()?,
            view: f[3].parse()?,
            grade: opt(f[4])
                .map(|g| g.parse::<u8>().map_err(|_| bad(n, "bad grade")))
                .transpose()?,
            split: f[5].parse()?,
            scan: PathBuf::from(f[6]),
            mask: opt(f[7]).map(PathBuf::from),
        });
    }
    Ok(out)
}

/// Fixed artifact locations under the data and output roots.
pub struct Layout<'a> {
    config: &'a PipelineConfig,
}

impl<'a> Layout<'a> {
    pub fn new(config: &'a PipelineConfig) -> Self {
        Layout { config }
    }

    pub fn cases(&self) -> PathBuf {
        self.config.data_root.join("cases.tsv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.config.data_root.join("patches.tsv")
    }

    pub fn patch_counts(&self) -> PathBuf {
        self.config.data_root.join("patch_counts.txt")
    }

    pub fn tissue_checkpoint(&self, scale: Magnification) -> PathBuf {
        self.config.output_root.join(format!("tissue_{scale}.ckpt"))
    }

    pub fn tissue_file(&self, scale: Magnification, suffix: &str) -> PathBuf {
        self.config.output_root.join(format!("tissue_{scale}_{suffix}"))
    }

    fn variant(aux: bool) -> &'static str {
        if aux {
            "_aux"
        } else {
            ""
        }
    }

    pub fn heatmap_checkpoint(&self, aux: bool) -> PathBuf {
        self.config.output_root.join(format!("heatmap{}.ckpt", Self::variant(aux)))
    }

    pub fn heatmap_log(&self, aux: bool) -> PathBuf {
        self.config.output_root.join(format!("heatmap{}_log.tsv", Self::variant(aux)))
    }

    pub fn infer_dir(&self, aux: bool) -> PathBuf {
        self.config.output_root.join(format!("infer{}", Self::variant(aux)))
    }

    pub fn saliency_dir(&self, aux: bool) -> PathBuf {
        self.config.output_root.join(format!("saliency{}", Self::variant(aux)))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

fn load_cases(config: &PipelineConfig) -> Result<Vec<CaseRecord>> {
    let path = Layout::new(config).cases();
    let text = String::from_utf8(read_file(&path)?).map_err(|e| Error::format("case table", e.to_string()))?;
    parse_cases(&text)
}

/// Generates `count` synthetic cases (two scans each), assigns splits per
/// case and writes scans, masks and the case table.
pub fn cmd_synth(config: &PipelineConfig, count: Option<usize>) -> Result<()> {
    let count = count.unwrap_or(config.synth.count);
    let s = &config.synth;
    let mix = CaseMix {
        side: s.side,
        lesion_fraction: s.lesion_fraction,
        max_lesions: s.max_lesions,
        contrast: s.contrast,
        lesion_radius: s.lesion_radius,
        spiculated_prob: s.spiculated_prob,
        noise: s.noise,
    };
    let case_ids: Vec<String> = (0..count).map(|k| format!("case{k:04}")).collect();
    let splits = assign_splits(
        &case_ids,
        config.split,
        &mut ChaCha8Rng::seed_from_u64(config.seed_for(Stage::Split, 0)),
    )?;
    let cases: Vec<Result<Vec<Scan>>> = case_ids
        .par_iter()
        .enumerate()
        .map(|(k, id)| synth_case(id, &mix, config.seed_for(Stage::Synth, k as u64)))
        .collect();
    let mut records = Vec::new();
    for (id, scans) in case_ids.iter().zip(cases) {
        for scan in scans? {
            let scan_id = scan.scan_id();
            let scan_rel = PathBuf::from("scans").join(format!("{scan_id}.pgm"));
            pgm::write(&config.data_root.join(&scan_rel), &scan.pixels, u16::MAX)?;
            let mask_rel = match &scan.annotation {
                Some(a) => {
                    let rel = PathBuf::from("masks").join(format!("{scan_id}.pgm"));
                    pgm::write_mask(&config.data_root.join(&rel), &a.mask)?;
                    Some(rel)
                }
                None => None,
            };
            records.push(CaseRecord {
                scan_id,
                case_id: id.clone(),
                laterality: scan.laterality,
                view: scan.view,
                grade: scan.annotation.as_ref().map(|a| a.grade),
                split: splits[id],
                scan: scan_rel,
                mask: mask_rel,
            });
        }
    }
    std::fs::create_dir_all(&config.data_root).map_err(|e| Error::io(&config.data_root, e))?;
    write_text(&Layout::new(config).cases(), &cases_to_text(&records))?;
    info!("synthesized {count} cases, {} scans", records.len());
    Ok(())
}

/// Reads one scan and, when graded, its mask.
pub fn load_scan(config: &PipelineConfig, record: &CaseRecord) -> Result<Scan> {
    let pixels = pgm::read(&config.data_root.join(&record.scan))?.to_u16_full_range();
    let annotation = match (record.grade, &record.mask) {
        (Some(grade), Some(mask)) => Some(Annotation {
            mask: pgm::read_mask(&config.data_root.join(mask))?,
            grade,
        }),
        (Some(_), None) => return Err(Error::MissingArtifact(config.data_root.join("masks").join(&record.scan_id))),
        (None, _) => None,
    };
    Scan::new(record.case_id.clone(), record.laterality, record.view, pixels, annotation)
}

/// Case ids whose graded scans lack a readable mask.
fn cases_missing_masks(config: &PipelineConfig, records: &[CaseRecord]) -> Vec<String> {
    let mut bad: Vec<String> = records
        .iter()
        .filter(|r| {
            r.grade.is_some() && r.mask.as_ref().is_none_or(|m| !config.data_root.join(m).exists())
        })
        .map(|r| r.case_id.clone())
        .collect();
    bad.sort();
    bad.dedup();
    bad
}

fn patch_counts_table(config: &PipelineConfig, manifest: &Manifest, records: &[CaseRecord]) -> String {
    let mut s = String::from("# tissue patches (positive / negative) and full scans per split\n");
    let _ = writeln!(s, "{:<20}{:>18}{:>18}{:>18}", "", "train", "val", "test");
    for &scale in &config.scales {
        let _ = write!(s, "{:<20}", format!("tissue x{scale}"));
        for split in Split::ALL {
            let (p, n) = manifest.select(split, scale).fold((0, 0), |(p, n), r| {
                if r.label.is_positive() {
                    (p + 1, n)
                } else {
                    (p, n + 1)
                }
            });
            let _ = write!(s, "{:>18}", format!("{p} / {n}"));
        }
        s.push('\n');
    }
    let _ = write!(s, "{:<20}", "full scans (CC)");
    for split in Split::ALL {
        let n = records.iter().filter(|r| r.split == split && r.view == View::Cc).count();
        let _ = write!(s, "{n:>18}");
    }
    s.push('\n');
    s
}

/// Normalizes, crops and samples every scan at every configured scale and
/// writes the patches, the manifest and a counts table.
pub fn cmd_patches(config: &PipelineConfig) -> Result<()> {
    let all = load_cases(config)?;
    let skipped = cases_missing_masks(config, &all);
    for case in &skipped {
        warn!("case {case}: graded scan without a mask, skipping the case");
    }
    let records: Vec<CaseRecord> = all.into_iter().filter(|r| !skipped.contains(&r.case_id)).collect();
    type Sampled = Vec<(Magnification, Vec<Patch>, Vec<Patch>)>;
    let sampled: Vec<Result<Sampled>> = records
        .par_iter()
        .enumerate()
        .map(|(k, record)| {
            let base = prepare_base(&load_scan(config, record)?, config.base_side)?;
            Ok(config
                .scales
                .iter()
                .enumerate()
                .map(|(si, &scale)| {
                    let seed = config.seed_for(Stage::PatchSubsample, (k * 8 + si) as u64);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let (pos, neg) = sample_scan(
                        &base,
                        scale,
                        config.patch_size,
                        config.sample_stride,
                        config.max_negatives_per_scan,
                        &mut rng,
                    );
                    (scale, pos, neg)
                })
                .collect())
        })
        .collect();

    let mut manifest = Manifest::default();
    for (record, per_scale) in records.iter().zip(sampled) {
        for (scale, pos, neg) in per_scale? {
            for (k, patch) in pos.iter().chain(&neg).enumerate() {
                let rel = PathBuf::from("patches")
                    .join(scale.label())
                    .join(record.split.to_string())
                    .join(format!("{}_{}_{k:04}.pgm", record.scan_id, patch.label));
                pgm::write_unit(&config.data_root.join(&rel), &patch.pixels)?;
                manifest.records.push(ManifestRecord {
                    path: rel,
                    label: patch.label,
                    offset: patch.offset,
                    scale,
                    case_id: record.case_id.clone(),
                    split: record.split,
                });
            }
        }
    }
    manifest.check_hygiene()?;
    let layout = Layout::new(config);
    manifest.save(&layout.manifest())?;
    write_text(&layout.patch_counts(), &patch_counts_table(config, &manifest, &records))?;
    info!("wrote {} patches", manifest.records.len());
    Ok(())
}

fn load_patches(config: &PipelineConfig, manifest: &Manifest, split: Split, scale: Magnification) -> Result<Vec<Patch>> {
    let records: Vec<&ManifestRecord> = manifest.select(split, scale).collect();
    records
        .par_iter()
        .map(|r| {
            Ok(Patch {
                pixels: pgm::read(&config.data_root.join(&r.path))?.to_unit(),
                label: r.label,
                offset: r.offset,
                scale: r.scale,
                case_id: r.case_id.clone(),
            })
        })
        .collect()
}

fn scale_index(scale: Magnification) -> u64 {
    Magnification::ALL.iter().position(|&s| s == scale).expect("known scale") as u64
}

pub fn cmd_train_tissue(config: &PipelineConfig, scale: Magnification) -> Result<()> {
    let layout = Layout::new(config);
    let manifest = Manifest::load(&layout.manifest())?;
    let train = load_patches(config, &manifest, Split::Train, scale)?;
    let val = load_patches(config, &manifest, Split::Val, scale)?;
    let mut init = ChaCha8Rng::seed_from_u64(config.seed_for(Stage::TissueInit, scale_index(scale)));
    let model = build_tissue_net(&config.tissue_net, &mut init)?;
    let hyper = TrainConfig {
        seed: config.seed_for(Stage::TissueTrain, scale_index(scale)),
        ..config.tissue_train.clone()
    };
    info!("training tissue classifier x{scale} on {} patches", train.len());
    let (best, log) = train_tissue(&model, &config.tissue_net, &train, &val, &hyper)?;
    checkpoint::save(&best, &layout.tissue_checkpoint(scale))?;
    write_text(&layout.tissue_file(scale, "log.tsv"), &log.to_text())
}

pub fn cmd_eval_tissue(config: &PipelineConfig, scale: Magnification) -> Result<()> {
    let layout = Layout::new(config);
    let model = checkpoint::load(&layout.tissue_checkpoint(scale))?;
    let manifest = Manifest::load(&layout.manifest())?;
    let test = load_patches(config, &manifest, Split::Test, scale)?;
    let report = evaluate_tissue(&model, &config.tissue_net, &test, config.eval_threshold)?;
    info!("tissue x{scale}: AUC {:.4}", report.roc.auc);
    write_text(&layout.tissue_file(scale, "eval.txt"), &report.to_table())?;
    write_text(&layout.tissue_file(scale, "eval.kv"), &report.to_key_values())?;
    write_text(&layout.tissue_file(scale, "roc.txt"), &report.roc.to_text())
}

fn base_scans(config: &PipelineConfig, split: Split) -> Result<Vec<(CaseRecord, Scan)>> {
    let all = load_cases(config)?;
    let skipped = cases_missing_masks(config, &all);
    let records: Vec<CaseRecord> = all
        .into_iter()
        .filter(|r| r.split == split && !skipped.contains(&r.case_id))
        .collect();
    records
        .into_par_iter()
        .map(|r| {
            let base = prepare_base(&load_scan(config, &r)?, config.base_side)?;
            Ok((r, base))
        })
        .collect()
}

fn aggregation_grid(config: &PipelineConfig, tissue: &Model, base: &Scan) -> Result<AggregationGrid> {
    let scaled = scale_scan(base, config.aux_scale);
    aggregate_local(tissue, &scaled.image, config.aggregation_stride, config.patch_size, config.aux_scale)
}

fn heat_config(config: &PipelineConfig, aux: bool) -> HeatmapNetConfig {
    HeatmapNetConfig {
        with_aux: aux,
        ..config.heat_net.clone()
    }
}

fn heat_examples(config: &PipelineConfig, split: Split, tissue: Option<&Model>) -> Result<Vec<HeatExample>> {
    let side = config.heat_net.input_size;
    base_scans(config, split)?
        .par_iter()
        .map(|(_, base)| {
            let aux = match tissue {
                Some(m) => Some(grid_to_channel(&aggregation_grid(config, m, base)?, CHANNEL_SIDE)?),
                None => None,
            };
            Ok(HeatExample {
                image: heat_input(base, side),
                aux,
                target: make_target(base),
            })
        })
        .collect()
}

pub fn cmd_train_heatmap(config: &PipelineConfig, aux: bool) -> Result<()> {
    let layout = Layout::new(config);
    let tissue = if aux {
        Some(checkpoint::load(&layout.tissue_checkpoint(config.aux_scale))?)
    } else {
        None
    };
    let train = heat_examples(config, Split::Train, tissue.as_ref())?;
    let val = heat_examples(config, Split::Val, tissue.as_ref())?;
    let net_config = heat_config(config, aux);
    let mut init = ChaCha8Rng::seed_from_u64(config.seed_for(Stage::HeatInit, aux as u64));
    let model = build_heatmap_net(&net_config, &mut init)?;
    let hyper = HeatTrainConfig {
        seed: config.seed_for(Stage::HeatTrain, aux as u64),
        ..config.heat_train.clone()
    };
    info!("training heatmap regressor (aux: {aux}) on {} scans", train.len());
    let (trained, log) = train_heatmap(&model, &net_config, &train, &val, &hyper)?;
    checkpoint::save(&trained, &layout.heatmap_checkpoint(aux))?;
    write_text(&layout.heatmap_log(aux), &log.to_text())
}

/// Heatmaps (and, with `aux`, aggregation grids) for every test scan.
pub fn cmd_infer(config: &PipelineConfig, aux: bool) -> Result<()> {
    let layout = Layout::new(config);
    let heat_model = checkpoint::load(&layout.heatmap_checkpoint(aux))?;
    let tissue = if aux {
        Some(checkpoint::load(&layout.tissue_checkpoint(config.aux_scale))?)
    } else {
        None
    };
    let net_config = heat_config(config, aux);
    let dir = layout.infer_dir(aux);
    let scans = base_scans(config, Split::Test)?;
    let results: Vec<Result<(Array2<f32>, Option<AggregationGrid>)>> = scans
        .par_iter()
        .map(|(_, base)| {
            let grid = tissue.as_ref().map(|m| aggregation_grid(config, m, base)).transpose()?;
            let channel = grid.as_ref().map(|g| grid_to_channel(g, CHANNEL_SIDE)).transpose()?;
            let heat = infer_heatmap(&heat_model, &net_config, &heat_input(base, net_config.input_size), channel.as_ref())?;
            Ok((heat, grid))
        })
        .collect();
    for ((record, _), result) in scans.iter().zip(results) {
        let (heat, grid) = result?;
        let id = &record.scan_id;
        Raster::new("heatmap", heat.clone()).save(&dir.join(format!("{id}_heat.raster")))?;
        pgm::write_unit(&dir.join(format!("{id}_heat.pgm")), &heat)?;
        if let Some(g) = grid {
            g.save(&dir.join(format!("{id}_grid.raster")))?;
            g.save_pgm(&dir.join(format!("{id}_grid.pgm")))?;
        }
    }
    info!("inferred {} heatmaps", scans.len());
    Ok(())
}

/// Gated saliency for every test scan, using heatmaps from `cmd_infer`.
pub fn cmd_saliency(config: &PipelineConfig, aux: bool, scale: Magnification) -> Result<()> {
    let layout = Layout::new(config);
    let tissue = checkpoint::load(&layout.tissue_checkpoint(scale))?;
    let heat_dir = layout.infer_dir(aux);
    let out_dir = layout.saliency_dir(aux);
    let gate = GateConfig {
        threshold: config.heat_threshold,
        stride: config.aggregation_stride,
        patch_size: config.patch_size,
        normalize_overlap: config.normalize_overlap,
    };
    for (record, base) in base_scans(config, Split::Test)? {
        let id = &record.scan_id;
        let heat = Raster::load(&heat_dir.join(format!("{id}_heat.raster")))?.data;
        let scaled = scale_scan(&base, scale);
        let sal = gated_saliency(&tissue, &scaled.image, &heat, &gate)?;
        info!("{id}: {} windows passed the gate", sal.included.len());
        Raster::new("saliency", sal.data.clone())
            .with_meta("scale", scale)
            .save(&out_dir.join(format!("{id}_saliency.raster")))?;
        pgm::write_scaled(&out_dir.join(format!("{id}_saliency.pgm")), &sal.data)?;
        let support = upsample_support(&heat_region(&heat, config.heat_threshold)?, scaled.image.nrows(), scaled.image.ncols());
        let png = composite(&scaled.image, &sal.data, scaled.mask.as_ref(), &support);
        let path = out_dir.join(format!("{id}_composite.png"));
        png.save(&path).map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    }
    Ok(())
}

fn boundary(mask: &Array2<bool>, r: usize, c: usize) -> bool {
    let (h, w) = mask.dim();
    mask[[r, c]]
        && (r == 0 || c == 0 || r + 1 == h || c + 1 == w || !mask[[r - 1, c]] || !mask[[r + 1, c]] || !mask[[r, c - 1]] || !mask[[r, c + 1]])
}

/// Scan on the left; on the right the dimmed scan with saliency in red, the
/// annotation outline in green and the heat support outline in blue.
pub fn composite(image: &Array2<f32>, saliency: &Array2<f32>, mask: Option<&Array2<bool>>, support: &Array2<bool>) -> RgbImage {
    let (h, w) = image.dim();
    let peak = saliency.iter().copied().fold(0.0f32, f32::max);
    let byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = RgbImage::new((2 * w) as u32, h as u32);
    for ((r, c), &v) in image.indexed_iter() {
        let g = byte(v);
        out.put_pixel(c as u32, r as u32, Rgb([g, g, g]));
        let s = if peak > 0.0 { saliency[[r, c]] / peak } else { 0.0 };
        let dim = v * 0.5;
        let mut px = Rgb([byte(dim + s), byte(dim), byte(dim)]);
        if boundary(support, r, c) {
            px = Rgb([0, 0, 255]);
        }
        if mask.is_some_and(|m| boundary(m, r, c)) {
            px = Rgb([0, 255, 0]);
        }
        out.put_pixel((w + c) as u32, r as u32, px);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_table_round_trip() {
        let records = vec![
            CaseRecord {
                scan_id: "c_LCC".into(),
                case_id: "c".into(),
                laterality: Laterality::Left,
                view: View::Cc,
                grade: Some(3),
                split: Split::Val,
                scan: "scans/c_LCC.pgm".into(),
                mask: Some("masks/c_LCC.pgm".into()),
            },
            CaseRecord {
                scan_id: "c_RCC".into(),
                case_id: "c".into(),
                laterality: Laterality::Right,
                view: View::Cc,
                grade: None,
                split: Split::Val,
                scan: "scans/c_RCC.pgm".into(),
                mask: None,
            },
        ];
        assert_eq!(parse_cases(&cases_to_text(&records)).unwrap(), records);
    }

    #[test]
    fn composite_size() {
        let img = Array2::from_elem((8, 6), 0.5);
        let png = composite(&img, &Array2::zeros((8, 6)), None, &Array2::from_elem((8, 6), false));
        assert_eq!(png.dimensions(), (12, 8));
    }
}
